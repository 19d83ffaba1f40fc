use serde::{Deserialize, Serialize};

use super::profile::TlbGeometry;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TlbKind {
    Data,
    Instruction,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TlbEntry {
    pub vpn: u64,
    pub frame: u64,
    stamp: u64,
}

/// Set-associative translation cache with LRU replacement inside each set.
#[derive(Clone, Debug)]
pub struct Tlb {
    geometry: TlbGeometry,
    slots: Vec<Option<TlbEntry>>,
    clock: u64,
}

impl Tlb {
    pub fn new(geometry: TlbGeometry) -> Self {
        Self { geometry, slots: vec![None; geometry.entries()], clock: 0 }
    }

    pub fn geometry(&self) -> TlbGeometry {
        self.geometry
    }

    pub fn set_index(&self, vpn: u64) -> usize {
        let sets = self.geometry.sets as u64;
        if sets.is_power_of_two() {
            (vpn & (sets - 1)) as usize
        } else {
            (vpn % sets) as usize
        }
    }

    fn set_mut(&mut self, vpn: u64) -> &mut [Option<TlbEntry>] {
        let ways = self.geometry.ways;
        let base = self.set_index(vpn) * ways;
        &mut self.slots[base..base + ways]
    }

    fn set(&self, vpn: u64) -> &[Option<TlbEntry>] {
        let ways = self.geometry.ways;
        let base = self.set_index(vpn) * ways;
        &self.slots[base..base + ways]
    }

    /// Presence check without touching replacement state.
    pub fn contains(&self, vpn: u64) -> bool {
        self.set(vpn).iter().flatten().any(|e| e.vpn == vpn)
    }

    /// Lookup that refreshes the entry's recency on a hit.
    pub fn lookup(&mut self, vpn: u64) -> Option<u64> {
        self.clock += 1;
        let now = self.clock;
        self.set_mut(vpn).iter_mut().flatten().find(|e| e.vpn == vpn).map(|e| {
            e.stamp = now;
            e.frame
        })
    }

    /// Inserts (or refreshes) a translation, returning the vpn evicted to make room.
    pub fn insert(&mut self, vpn: u64, frame: u64) -> Option<u64> {
        self.clock += 1;
        let now = self.clock;
        let set = self.set_mut(vpn);
        if let Some(e) = set.iter_mut().flatten().find(|e| e.vpn == vpn) {
            e.frame = frame;
            e.stamp = now;
            return None;
        }
        let fresh = TlbEntry { vpn, frame, stamp: now };
        if let Some(slot) = set.iter_mut().find(|s| s.is_none()) {
            *slot = Some(fresh);
            return None;
        }
        let victim = set.iter_mut().min_by_key(|s| s.map_or(0, |e| e.stamp)).expect("ways >= 1");
        let evicted = victim.map(|e| e.vpn);
        *victim = Some(fresh);
        evicted
    }

    pub fn invalidate(&mut self, vpn: u64) -> bool {
        for slot in self.set_mut(vpn) {
            if slot.is_some_and(|e| e.vpn == vpn) {
                *slot = None;
                return true;
            }
        }
        false
    }

    pub fn flush(&mut self) {
        self.slots.iter_mut().for_each(|s| *s = None);
    }

    pub fn entries(&self) -> impl Iterator<Item = &TlbEntry> {
        self.slots.iter().flatten()
    }

    pub fn len(&self) -> usize {
        self.entries().count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Vpns of one set ordered from least to most recently used.
    pub fn lru_order(&self, set_index: usize) -> Vec<u64> {
        let ways = self.geometry.ways;
        let mut entries: Vec<TlbEntry> =
            self.slots[set_index * ways..(set_index + 1) * ways].iter().flatten().copied().collect();
        entries.sort_by_key(|e| e.stamp);
        entries.into_iter().map(|e| e.vpn).collect()
    }
}

#[derive(Clone, Debug)]
pub struct TlbState {
    pub dtlb: Tlb,
    pub itlb: Tlb,
}

impl TlbState {
    pub fn new(dtlb: TlbGeometry, itlb: TlbGeometry) -> Self {
        Self { dtlb: Tlb::new(dtlb), itlb: Tlb::new(itlb) }
    }

    pub fn get(&self, kind: TlbKind) -> &Tlb {
        match kind {
            TlbKind::Data => &self.dtlb,
            TlbKind::Instruction => &self.itlb,
        }
    }

    pub fn get_mut(&mut self, kind: TlbKind) -> &mut Tlb {
        match kind {
            TlbKind::Data => &mut self.dtlb,
            TlbKind::Instruction => &mut self.itlb,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const GEO: TlbGeometry = TlbGeometry { sets: 4, ways: 3 };

    /// Reference model: per set, a recency list (front = LRU).
    struct LruOracle {
        sets: Vec<Vec<u64>>,
        ways: usize,
    }

    impl LruOracle {
        fn new(g: TlbGeometry) -> Self {
            Self { sets: vec![Vec::new(); g.sets], ways: g.ways }
        }

        fn touch(&mut self, vpn: u64, insert: bool) {
            let n = self.sets.len() as u64;
            let set = &mut self.sets[(vpn % n) as usize];
            if let Some(pos) = set.iter().position(|&v| v == vpn) {
                set.remove(pos);
                set.push(vpn);
            } else if insert {
                if set.len() == self.ways {
                    set.remove(0);
                }
                set.push(vpn);
            }
        }
    }

    #[test]
    fn oldest_entry_evicted_from_full_set() {
        let mut tlb = Tlb::new(GEO);
        // vpns 0, 4, 8 share set 0.
        for v in [0, 4, 8] {
            assert_eq!(tlb.insert(v, v + 100), None);
        }
        assert_eq!(tlb.insert(12, 112), Some(0));
        assert!(!tlb.contains(0));
        assert!(tlb.contains(4) && tlb.contains(8) && tlb.contains(12));
    }

    #[test]
    fn lookup_refreshes_recency() {
        let mut tlb = Tlb::new(GEO);
        for v in [0, 4, 8] {
            tlb.insert(v, v);
        }
        assert_eq!(tlb.lookup(0), Some(0));
        assert_eq!(tlb.insert(12, 12), Some(4));
    }

    #[test]
    fn sets_are_isolated() {
        let mut tlb = Tlb::new(GEO);
        tlb.insert(1, 1);
        for v in [0, 4, 8, 12, 16] {
            tlb.insert(v, v);
        }
        assert!(tlb.contains(1));
        assert!(tlb.invalidate(1));
        assert!(!tlb.contains(1));
        tlb.flush();
        assert!(tlb.is_empty());
    }

    proptest! {
        #[test]
        fn matches_lru_oracle(ops in proptest::collection::vec((0u64..24, any::<bool>()), 0..400)) {
            let mut tlb = Tlb::new(GEO);
            let mut oracle = LruOracle::new(GEO);
            for (vpn, is_insert) in ops {
                if is_insert {
                    tlb.insert(vpn, vpn);
                } else {
                    tlb.lookup(vpn);
                }
                oracle.touch(vpn, is_insert);
                for (i, set) in oracle.sets.iter().enumerate() {
                    prop_assert_eq!(&tlb.lru_order(i), set);
                }
            }
            for e in tlb.entries() {
                prop_assert_eq!(tlb.set_index(e.vpn), (e.vpn % GEO.sets as u64) as usize);
            }
        }
    }
}
