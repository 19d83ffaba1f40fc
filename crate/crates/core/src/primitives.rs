//! Data Bounce, Fetch+Bounce and Speculative Fetch+Bounce, with the cache
//! decoders that turn their microarchitectural traces into values.

use serde::{Deserialize, Serialize};

use crate::addrspace::{PageFlags, VirtualAddress, PAGE_SIZE};
use crate::error::{AddrError, PrimitiveError, SimError};
use crate::transient::{with_window, BranchPredictor, SpecOutcome, Suppression};
use crate::uarch::{Core, Mode, TlbKind, LINES_PER_PAGE, LINE_SIZE};

pub const PROBE_PAGES: usize = 256;
pub const DEFAULT_MARKER: u8 = 0x42;
/// Fetch+Bounce tries at most this many bounces (retry 0, 1, 2).
pub const FETCH_BOUNCE_ATTEMPTS: usize = 3;

/// 256 user pages, one per byte value, used to encode a transient value in the cache.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ProbeArray {
    base: VirtualAddress,
}

impl ProbeArray {
    pub fn map(core: &mut Core, base: VirtualAddress) -> Result<Self, AddrError> {
        core.map_region(base, PROBE_PAGES as u64, PageFlags::USER_RW)?;
        Ok(Self { base })
    }

    pub fn base(&self) -> VirtualAddress {
        self.base
    }

    pub fn page(&self, value: u8) -> VirtualAddress {
        self.base.add_pages(value as u64)
    }

    pub fn covers(&self, addr: VirtualAddress) -> bool {
        let v = addr.vpn();
        v >= self.base.vpn() && v < self.base.vpn() + PROBE_PAGES as u64
    }
}

/// User buffer twice the cache size, swept to evict every probe line.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvictionBuffer {
    base: VirtualAddress,
    pages: u64,
}

impl EvictionBuffer {
    pub fn map(core: &mut Core, base: VirtualAddress) -> Result<Self, AddrError> {
        let lines = 2 * core.profile().cache_lines as u64;
        let pages = lines.div_ceil(LINES_PER_PAGE);
        core.map_region(base, pages, PageFlags::USER_RW)?;
        Ok(Self { base, pages })
    }

    pub fn lines(&self) -> u64 {
        self.pages * LINES_PER_PAGE
    }

    pub fn sweep(&self, core: &mut Core) -> Result<(), SimError> {
        for page in 0..self.pages {
            for line in 0..LINES_PER_PAGE {
                core.touch_line(self.base.add_pages(page).add(line * LINE_SIZE))?;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decoder {
    FlushReload,
    EvictReload(EvictionBuffer),
}

/// Set of probe pages found cached.
#[derive(Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct HotPages([u64; 4]);

impl HotPages {
    pub fn insert(&mut self, v: u8) {
        self.0[(v >> 6) as usize] |= 1 << (v & 63);
    }

    pub fn contains(&self, v: u8) -> bool {
        self.0[(v >> 6) as usize] & (1 << (v & 63)) != 0
    }

    pub fn len(&self) -> usize {
        self.0.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.0.iter().all(|&w| w == 0)
    }

    pub fn first(&self) -> Option<u8> {
        self.iter().next()
    }

    pub fn iter(&self) -> impl Iterator<Item = u8> + '_ {
        (0..=255u8).filter(|&v| self.contains(v))
    }
}

impl std::fmt::Debug for HotPages {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_set().entries(self.iter()).finish()
    }
}

impl FromIterator<u8> for HotPages {
    fn from_iter<I: IntoIterator<Item = u8>>(iter: I) -> Self {
        let mut h = Self::default();
        iter.into_iter().for_each(|v| h.insert(v));
        h
    }
}

/// Puts every probe line into a known-cold state before encoding.
pub fn prepare_probe(core: &mut Core, probe: &ProbeArray, decoder: Decoder) -> Result<(), SimError> {
    match decoder {
        Decoder::FlushReload => {
            for v in 0..=255u8 {
                core.flush_line(probe.page(v))?;
            }
            Ok(())
        }
        Decoder::EvictReload(buf) => buf.sweep(core),
    }
}

pub fn decode_flush_reload(core: &mut Core, probe: &ProbeArray) -> Result<HotPages, SimError> {
    let mut hot = HotPages::default();
    for v in 0..=255u8 {
        let t = core.timed_access(probe.page(v))?;
        if core.is_hit(t) {
            hot.insert(v);
        }
    }
    Ok(hot)
}

/// Times every probe page, then sweeps the buffer so the next round starts cold.
pub fn decode_evict_reload(core: &mut Core, probe: &ProbeArray, buffer: &EvictionBuffer) -> Result<HotPages, SimError> {
    let hot = decode_flush_reload(core, probe)?;
    buffer.sweep(core)?;
    Ok(hot)
}

pub fn decode(core: &mut Core, probe: &ProbeArray, decoder: Decoder) -> Result<HotPages, SimError> {
    match decoder {
        Decoder::FlushReload => decode_flush_reload(core, probe),
        Decoder::EvictReload(buf) => decode_evict_reload(core, probe, &buf),
    }
}

/// Repeats prepare/encode/decode `reps` times and keeps pages hot in a strict majority.
pub fn decode_majority(
    core: &mut Core,
    probe: &ProbeArray,
    decoder: Decoder,
    reps: usize,
    mut encode: impl FnMut(&mut Core) -> Result<(), SimError>,
) -> Result<HotPages, SimError> {
    let mut counts = [0usize; PROBE_PAGES];
    for _ in 0..reps {
        prepare_probe(core, probe, decoder)?;
        encode(core)?;
        for v in decode(core, probe, decoder)?.iter() {
            counts[v as usize] += 1;
        }
    }
    Ok((0..=255u8).filter(|&v| 2 * counts[v as usize] > reps).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BounceOutcome {
    pub bounced: bool,
    /// Marker when bounced, else the lowest hot probe page (if any).
    pub decoded_value: Option<u8>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FetchClass {
    TlbHit,
    TlbMiss,
    Invalid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FetchBounceClass {
    pub retry: usize,
    pub class: FetchClass,
}

impl FetchBounceClass {
    pub fn from_retry(retry: usize) -> Self {
        let class = match retry {
            0 => FetchClass::TlbHit,
            1 => FetchClass::TlbMiss,
            _ => FetchClass::Invalid,
        };
        Self { retry, class }
    }
}

/// Shared knobs for every bounce-based primitive.
#[derive(Clone, Copy, Debug)]
pub struct Bouncer {
    pub probe: ProbeArray,
    pub decoder: Decoder,
    pub suppression: Suppression,
    pub marker: u8,
    pub attempts: usize,
}

impl Bouncer {
    pub fn new(probe: ProbeArray) -> Self {
        Self {
            probe,
            decoder: Decoder::FlushReload,
            suppression: Suppression::TsxLike,
            marker: DEFAULT_MARKER,
            attempts: FETCH_BOUNCE_ATTEMPTS,
        }
    }

    pub fn with_decoder(mut self, decoder: Decoder) -> Self {
        self.decoder = decoder;
        self
    }

    pub fn with_suppression(mut self, suppression: Suppression) -> Self {
        self.suppression = suppression;
        self
    }

    pub fn with_marker(mut self, marker: u8) -> Self {
        self.marker = marker;
        self
    }

    /// More attempts only make sense on noisy profiles.
    pub fn with_attempts(mut self, attempts: usize) -> Self {
        assert!(attempts >= FETCH_BOUNCE_ATTEMPTS, "fetch+bounce needs at least {FETCH_BOUNCE_ATTEMPTS} attempts");
        self.attempts = attempts;
        self
    }

    fn check(&self, p: VirtualAddress) -> Result<(), PrimitiveError> {
        if self.marker == 0 {
            return Err(PrimitiveError::ZeroMarker);
        }
        if self.probe.covers(p) {
            return Err(PrimitiveError::TargetInProbe);
        }
        Ok(())
    }

    /// Store the marker, read it back and use the result as a probe index.
    fn bounce_once(&self, core: &mut Core, p: VirtualAddress, via: TlbKind) -> Result<(), SimError> {
        let x = self.marker;
        let probe = self.probe;
        let (res, _) = with_window(core, self.suppression, |c| -> Result<(), SimError> {
            c.store_issue_via(via, p, &[x])?;
            if via == TlbKind::Instruction {
                c.fetch_issue(p)?;
            }
            let v = c.load_issue(p, 1)?.byte();
            c.load_issue(probe.page(v), 1)?;
            Ok(())
        })?;
        res
    }

    /// Does a physical page back `p`? One priming window resolves the
    /// translation so that a single call answers for cold TLBs too.
    pub fn data_bounce(&self, core: &mut Core, p: VirtualAddress) -> Result<BounceOutcome, PrimitiveError> {
        self.check(p)?;
        let x = self.marker;
        let (res, _) = with_window(core, self.suppression, |c| c.store_issue(p, &[x]))?;
        res?;
        prepare_probe(core, &self.probe, self.decoder)?;
        self.bounce_once(core, p, TlbKind::Data)?;
        let hot = decode(core, &self.probe, self.decoder)?;
        let bounced = hot.contains(x);
        Ok(BounceOutcome { bounced, decoded_value: if bounced { Some(x) } else { hot.first() } })
    }

    /// Data Bounce verdict only: flushes and reloads just the marker line
    /// instead of decoding the whole probe array. Used by the big scans.
    pub fn bounced(&self, core: &mut Core, p: VirtualAddress) -> Result<bool, PrimitiveError> {
        let Decoder::FlushReload = self.decoder else {
            return Ok(self.data_bounce(core, p)?.bounced);
        };
        self.check(p)?;
        let x = self.marker;
        let (res, _) = with_window(core, self.suppression, |c| c.store_issue(p, &[x]))?;
        res?;
        let marker_page = self.probe.page(x);
        core.flush_line(marker_page)?;
        self.bounce_once(core, p, TlbKind::Data)?;
        let t = core.timed_access(marker_page)?;
        Ok(core.is_hit(t))
    }

    pub fn fetch_bounce(&self, core: &mut Core, p: VirtualAddress) -> Result<FetchBounceClass, PrimitiveError> {
        self.fetch_bounce_via(core, p, TlbKind::Data)
    }

    pub fn fetch_bounce_itlb(&self, core: &mut Core, p: VirtualAddress) -> Result<FetchBounceClass, PrimitiveError> {
        self.fetch_bounce_via(core, p, TlbKind::Instruction)
    }

    fn fetch_bounce_via(&self, core: &mut Core, p: VirtualAddress, via: TlbKind) -> Result<FetchBounceClass, PrimitiveError> {
        self.check(p)?;
        let marker_page = self.probe.page(self.marker);
        for retry in 0..self.attempts {
            core.flush_line(marker_page)?;
            self.bounce_once(core, p, via)?;
            let t = core.timed_access(marker_page)?;
            if core.is_hit(t) {
                return Ok(FetchBounceClass::from_retry(retry));
            }
        }
        Ok(FetchBounceClass::from_retry(self.attempts - 1))
    }
}

pub fn data_bounce(
    core: &mut Core,
    p: VirtualAddress,
    x: u8,
    probe: &ProbeArray,
    decoder: Decoder,
) -> Result<BounceOutcome, PrimitiveError> {
    Bouncer::new(*probe).with_marker(x).with_decoder(decoder).data_bounce(core, p)
}

pub fn fetch_bounce(core: &mut Core, p: VirtualAddress, x: u8, probe: &ProbeArray) -> Result<FetchBounceClass, PrimitiveError> {
    Bouncer::new(*probe).with_marker(x).fetch_bounce(core, p)
}

pub fn fetch_bounce_itlb(
    core: &mut Core,
    p: VirtualAddress,
    x: u8,
    probe: &ProbeArray,
) -> Result<FetchBounceClass, PrimitiveError> {
    Bouncer::new(*probe).with_marker(x).fetch_bounce_itlb(core, p)
}

/// Kernel code of the shape `if (index < bounds) oracle[data[index] * 4096]`.
#[derive(Clone, Debug)]
pub struct SpectreGadget {
    pub site: u64,
    pub data_base: VirtualAddress,
    pub bounds: u64,
    /// 256 mapped supervisor pages.
    pub oracle_base: VirtualAddress,
    pub predictor: BranchPredictor,
}

impl SpectreGadget {
    /// In-bounds calls made before each out-of-bounds trigger.
    pub const TRAINING_CALLS: usize = 3;

    pub fn oracle_page(&self, v: u8) -> VirtualAddress {
        self.oracle_base.add_pages(v as u64)
    }

    /// Invokes the gadget in kernel mode, as a syscall would.
    pub fn call(&mut self, core: &mut Core, index: u64) -> Result<SpecOutcome, SimError> {
        let (data, oracle, in_bounds) = (self.data_base, self.oracle_base, index < self.bounds);
        let mut inner = Ok(());
        let site = self.site;
        let predictor = &mut self.predictor;
        let outcome = core.with_mode(Mode::Kernel, |c| {
            predictor.speculate(c, site, in_bounds, |c| {
                inner = (|| {
                    let v = c.load_issue(data.add(index), 1)?.byte();
                    c.load_issue(oracle.add_pages(v as u64), 1)?;
                    Ok(())
                })();
            })
        })?;
        inner.map(|_| outcome)
    }

    pub fn mistrain(&mut self, core: &mut Core) -> Result<(), SimError> {
        for i in 0..Self::TRAINING_CALLS as u64 {
            self.call(core, i % self.bounds.max(1))?;
        }
        Ok(())
    }
}

/// Leaks `data[index]` through the dTLB. The 256 oracle pages are scanned in
/// rounds of one page per dTLB set so that scanning never evicts the leaked
/// translation before it is tested.
pub fn speculative_fetch_bounce(
    core: &mut Core,
    gadget: &mut SpectreGadget,
    index: u64,
    bouncer: &Bouncer,
) -> Result<u8, PrimitiveError> {
    let sets = core.tlb(TlbKind::Data).geometry().sets;
    let mut hits: Vec<u8> = Vec::new();
    for start in (0..PROBE_PAGES).step_by(sets) {
        let round: Vec<u8> = (start..(start + sets).min(PROBE_PAGES)).map(|v| v as u8).collect();
        gadget.mistrain(core)?;
        for &v in &round {
            core.tlb_evict_vpn(TlbKind::Data, gadget.oracle_page(v).vpn())?;
        }
        gadget.call(core, index)?;
        for &v in &round {
            if bouncer.fetch_bounce(core, gadget.oracle_page(v))?.class == FetchClass::TlbHit {
                hits.push(v);
            }
        }
    }
    match hits.as_slice() {
        [v] => Ok(*v),
        [] => Err(PrimitiveError::NoHit),
        many => Err(PrimitiveError::AmbiguousHit(many.len())),
    }
}

/// Probe page helper for callers that lay out several arrays.
pub const PROBE_BYTES: u64 = PROBE_PAGES as u64 * PAGE_SIZE;
