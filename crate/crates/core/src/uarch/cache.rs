use rustc_hash::FxHashMap;

pub const LINE_SIZE: u64 = 64;
pub const LINES_PER_PAGE: u64 = crate::addrspace::PAGE_SIZE / LINE_SIZE;

/// Physical cache line: frame number plus line index within the page.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LineId(u64);

impl LineId {
    pub fn new(frame: u64, page_offset: u64) -> Self {
        Self((frame << 6) | (page_offset / LINE_SIZE))
    }

    pub fn frame(self) -> u64 {
        self.0 >> 6
    }

    pub fn line_in_page(self) -> u64 {
        self.0 & (LINES_PER_PAGE - 1)
    }
}

/// Line ids below this index are looked up in a dense table; frames are
/// handed out sequentially, so in practice every line is.
const DENSE_LIMIT: u64 = 1 << 26;
const NIL: u32 = u32::MAX;

#[derive(Clone, Copy, Debug)]
struct Slot {
    line: LineId,
    prev: u32,
    next: u32,
}

/// Fully associative LRU cache of line ids: a slab of `capacity` slots
/// threaded on a recency list (head = most recent).
#[derive(Clone, Debug)]
pub struct Cache {
    capacity: usize,
    slots: Vec<Slot>,
    head: u32,
    tail: u32,
    /// line id -> slot index + 1 (0 = not cached).
    dense: Vec<u32>,
    sparse: FxHashMap<LineId, u32>,
}

impl Cache {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0 && capacity < NIL as usize, "cache capacity out of range");
        Self {
            capacity,
            slots: Vec::with_capacity(capacity),
            head: NIL,
            tail: NIL,
            dense: Vec::new(),
            sparse: FxHashMap::default(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    fn slot_of(&self, line: LineId) -> Option<u32> {
        let v = if line.0 < DENSE_LIMIT {
            self.dense.get(line.0 as usize).copied().unwrap_or(0)
        } else {
            self.sparse.get(&line).copied().unwrap_or(0)
        };
        v.checked_sub(1)
    }

    fn set_slot(&mut self, line: LineId, slot: Option<u32>) {
        let v = slot.map_or(0, |s| s + 1);
        if line.0 < DENSE_LIMIT {
            let i = line.0 as usize;
            if i >= self.dense.len() {
                if v == 0 {
                    return;
                }
                self.dense.resize((i + 1).next_power_of_two().max(1 << 14), 0);
            }
            self.dense[i] = v;
        } else if v == 0 {
            self.sparse.remove(&line);
        } else {
            self.sparse.insert(line, v);
        }
    }

    fn unlink(&mut self, i: u32) {
        let Slot { prev, next, .. } = self.slots[i as usize];
        match prev {
            NIL => self.head = next,
            p => self.slots[p as usize].next = next,
        }
        match next {
            NIL => self.tail = prev,
            n => self.slots[n as usize].prev = prev,
        }
    }

    fn push_front(&mut self, i: u32) {
        self.slots[i as usize].prev = NIL;
        self.slots[i as usize].next = self.head;
        if self.head != NIL {
            self.slots[self.head as usize].prev = i;
        }
        self.head = i;
        if self.tail == NIL {
            self.tail = i;
        }
    }

    pub fn contains(&self, line: LineId) -> bool {
        self.slot_of(line).is_some()
    }

    /// Brings the line in (or refreshes it). Returns whether it was already cached.
    pub fn access(&mut self, line: LineId) -> bool {
        if let Some(i) = self.slot_of(line) {
            if self.head != i {
                self.unlink(i);
                self.push_front(i);
            }
            return true;
        }
        let i = if self.slots.len() < self.capacity {
            self.slots.push(Slot { line, prev: NIL, next: NIL });
            (self.slots.len() - 1) as u32
        } else {
            let victim = self.tail;
            self.unlink(victim);
            let old = self.slots[victim as usize].line;
            self.set_slot(old, None);
            self.slots[victim as usize].line = line;
            victim
        };
        self.push_front(i);
        self.set_slot(line, Some(i));
        false
    }

    /// Removes exactly this line. Returns whether it was cached.
    pub fn flush(&mut self, line: LineId) -> bool {
        let Some(i) = self.slot_of(line) else { return false };
        self.unlink(i);
        self.set_slot(line, None);
        // Keep the slab dense: move the last slot into the hole.
        let last = (self.slots.len() - 1) as u32;
        if i != last {
            let moved = self.slots[last as usize];
            self.slots[i as usize] = moved;
            match moved.prev {
                NIL => self.head = i,
                p => self.slots[p as usize].next = i,
            }
            match moved.next {
                NIL => self.tail = i,
                n => self.slots[n as usize].prev = i,
            }
            self.set_slot(moved.line, Some(i));
        }
        self.slots.pop();
        true
    }

    pub fn clear(&mut self) {
        for s in std::mem::take(&mut self.slots) {
            self.set_slot(s.line, None);
        }
        self.head = NIL;
        self.tail = NIL;
    }
}
