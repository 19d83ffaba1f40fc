//! Store buffer, TLBs, cache and the core that ties them together.

mod cache;
mod profile;
mod store_buffer;
mod tlb;

use std::cell::Cell;
use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric};
use serde::{Deserialize, Serialize};

pub use cache::{Cache, LineId, LINES_PER_PAGE, LINE_SIZE};
pub use profile::{MicroarchProfile, TlbGeometry, BUILTIN_PROFILES, PROFILE_DIR_ENV};
pub use store_buffer::{PhysicalMemory, StoreBuffer, StoreBufferEntry, MAX_ACCESS, SYNTHETIC_FRAME, VALID_SIZES};
pub use tlb::{Tlb, TlbEntry, TlbKind, TlbState};

use crate::addrspace::{AddressSpace, PageFlags, Translation, VirtualAddress, PAGE_SIZE};
use crate::error::{AddrError, FaultReason, SimError, TxError};
use crate::transient::{Suppression, Transaction, TxStatus};

/// Byte returned by architectural reads of protected pages.
pub const ABORT_PAGE_BYTE: u8 = 0xff;

const STORE_CYCLES: u64 = 1;
const MEMO_SLOTS: usize = 1024;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    User,
    Kernel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LoadSource {
    /// True-positive match against a resolved entry.
    StoreForward,
    /// False-positive forwarding on a page-offset match.
    WtForward,
    CacheOrMemory,
    /// Faulting load that received no forwarded data; reads as zeros.
    Squashed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LoadResult {
    data: [u8; MAX_ACCESS],
    len: u8,
    pub source: LoadSource,
    pub faulted: bool,
}

impl LoadResult {
    pub fn value(&self) -> &[u8] {
        &self.data[..self.len as usize]
    }

    pub fn byte(&self) -> u8 {
        self.data[0]
    }

    pub fn forwarded(&self) -> bool {
        matches!(self.source, LoadSource::StoreForward | LoadSource::WtForward)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FetchResult {
    pub faulted: bool,
    pub tlb_hit: bool,
}

/// A buffered store dropped when its window closed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SquashedStore {
    pub vaddr: VirtualAddress,
    pub size: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WindowReport {
    pub suppression: Suppression,
    pub squashed: Vec<SquashedStore>,
    pub suppressed_faults: usize,
    pub overhead_cycles: u64,
}

#[derive(Clone, Debug)]
struct WindowState {
    suppression: Suppression,
    deferred_walks: Vec<(TlbKind, u64, u64)>,
    suppressed_faults: usize,
}

#[derive(Clone, Debug)]
struct TxState {
    id: u64,
    touched_vpns: BTreeSet<u64>,
    written_lines: BTreeSet<LineId>,
}

/// Per-hyperthread state. TLBs, cache and memory are shared.
#[derive(Clone, Debug)]
pub struct ThreadContext {
    store_buffer: StoreBuffer,
    mode: Mode,
    window: Option<WindowState>,
    tx: Option<TxState>,
}

impl ThreadContext {
    fn new(capacity: usize) -> Self {
        Self { store_buffer: StoreBuffer::new(capacity), mode: Mode::User, window: None, tx: None }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct CoreStats {
    pub loads: u64,
    pub stores: u64,
    pub fetches: u64,
    pub timed_accesses: u64,
    pub windows: u64,
    pub store_forwards: u64,
    pub wt_forwards: u64,
    pub suppressed_faults: u64,
    pub stalls: u64,
    pub noise_flips: u64,
}

enum Access {
    Ok { frame: u64, flags: PageFlags },
    Fault { reason: FaultReason, frame: Option<u64> },
}

/// Contiguous user pages used to evict one TLB set at a time.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvictionRegion {
    pub base: VirtualAddress,
    pub pages: u64,
}

pub struct Core {
    profile: MicroarchProfile,
    space: AddressSpace,
    memory: PhysicalMemory,
    tlbs: TlbState,
    cache: Cache,
    threads: Vec<ThreadContext>,
    active: usize,
    cycles: u64,
    stats: CoreStats,
    rng: ChaCha8Rng,
    noise_countdown: u64,
    eviction: [Option<EvictionRegion>; 2],
    next_tx_id: u64,
    /// Direct-mapped memo of recent translations, keyed by vpn.
    memo: Box<[Cell<(u64, Translation)>]>,
}

impl Core {
    pub const DEFAULT_THREADS: usize = 2;

    pub fn new(profile: MicroarchProfile, space: AddressSpace, seed: u64) -> Self {
        Self::with_threads(profile, space, seed, Self::DEFAULT_THREADS)
    }

    pub fn with_threads(profile: MicroarchProfile, space: AddressSpace, seed: u64, threads: usize) -> Self {
        if let Err(e) = profile.validate() {
            panic!("{e}");
        }
        assert!(threads >= 1, "a core needs at least one hardware thread");
        let mut core = Self {
            tlbs: TlbState::new(profile.dtlb_geometry, profile.itlb_geometry),
            cache: Cache::new(profile.cache_lines),
            threads: (0..threads).map(|_| ThreadContext::new(profile.store_buffer_capacity)).collect(),
            profile,
            space,
            memory: PhysicalMemory::default(),
            active: 0,
            cycles: 0,
            stats: CoreStats::default(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            noise_countdown: u64::MAX,
            eviction: [None, None],
            next_tx_id: 1,
            memo: vec![Cell::new((u64::MAX, Translation::NotMapped)); MEMO_SLOTS].into_boxed_slice(),
        };
        core.reset_noise();
        core
    }

    pub fn profile(&self) -> &MicroarchProfile {
        &self.profile
    }

    pub fn set_noise(&mut self, noise_p: f64) {
        assert!((0.0..1.0).contains(&noise_p), "noise_p must lie in [0, 1)");
        self.profile.noise_p = noise_p;
        self.reset_noise();
    }

    fn reset_noise(&mut self) {
        self.noise_countdown = if self.profile.noise_p > 0.0 {
            Geometric::new(self.profile.noise_p).expect("validated probability").sample(&mut self.rng)
        } else {
            u64::MAX
        };
    }

    /// Whether the next timing measurement is misclassified.
    fn noise_flip(&mut self) -> bool {
        if self.noise_countdown == u64::MAX && self.profile.noise_p == 0.0 {
            return false;
        }
        if self.noise_countdown == 0 {
            self.reset_noise();
            self.stats.noise_flips += 1;
            true
        } else {
            self.noise_countdown -= 1;
            false
        }
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Bernoulli draw from the core's seeded stream.
    pub fn chance(&mut self, p: f64) -> bool {
        p >= 1.0 || (p > 0.0 && self.rng.gen::<f64>() < p)
    }

    pub fn cycles(&self) -> u64 {
        self.cycles
    }

    pub fn stats(&self) -> CoreStats {
        self.stats
    }

    pub fn advance(&mut self, cycles: u64) {
        self.cycles += cycles;
    }

    // ---- threads and privilege ----

    pub fn thread_count(&self) -> usize {
        self.threads.len()
    }

    pub fn active_thread(&self) -> usize {
        self.active
    }

    pub fn switch_thread(&mut self, index: usize) {
        assert!(index < self.threads.len(), "no hardware thread {index}");
        self.active = index;
    }

    /// Moves to the next hyperthread, wrapping around.
    pub fn rotate_thread(&mut self) {
        self.active = (self.active + 1) % self.threads.len();
    }

    fn thread(&self) -> &ThreadContext {
        &self.threads[self.active]
    }

    fn thread_mut(&mut self) -> &mut ThreadContext {
        &mut self.threads[self.active]
    }

    pub fn mode(&self) -> Mode {
        self.thread().mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.thread_mut().mode = mode;
    }

    /// Runs `body` at the given privilege level, restoring the previous one.
    pub fn with_mode<T>(&mut self, mode: Mode, body: impl FnOnce(&mut Self) -> T) -> T {
        let saved = self.mode();
        self.set_mode(mode);
        let out = body(self);
        self.set_mode(saved);
        out
    }

    pub fn store_buffer(&self) -> &StoreBuffer {
        &self.thread().store_buffer
    }

    // ---- setup and ground truth ----

    pub fn map_region(&mut self, start: VirtualAddress, n_pages: u64, flags: PageFlags) -> Result<(), AddrError> {
        self.forget_translations();
        self.space.map_region(start, n_pages, flags)
    }

    fn forget_translations(&mut self) {
        self.memo.iter().for_each(|c| c.set((u64::MAX, Translation::NotMapped)));
    }

    /// Page-table lookup through the memo.
    pub fn translate(&self, addr: VirtualAddress) -> Translation {
        if !addr.is_canonical() {
            return Translation::NonCanonical;
        }
        let vpn = addr.vpn();
        let slot = &self.memo[vpn as usize & (MEMO_SLOTS - 1)];
        let (key, t) = slot.get();
        if key == vpn {
            return t;
        }
        let t = self.space.translate(addr);
        slot.set((vpn, t));
        t
    }

    /// Privileged write straight into physical memory, bypassing every check.
    pub fn poke(&mut self, vaddr: VirtualAddress, bytes: &[u8]) -> Result<(), AddrError> {
        let mut done = 0;
        while done < bytes.len() {
            let addr = vaddr.add(done as u64);
            let frame = self.translate(addr).frame().ok_or(AddrError::AliasTargetUnmapped(addr))?;
            let room = (PAGE_SIZE - addr.page_offset()) as usize;
            let n = room.min(bytes.len() - done);
            self.memory.write(frame, addr.page_offset(), &bytes[done..done + n]);
            done += n;
        }
        Ok(())
    }

    /// Privileged read of physical memory.
    pub fn peek(&self, vaddr: VirtualAddress, len: usize) -> Result<Vec<u8>, AddrError> {
        let mut out = vec![0; len];
        let mut done = 0;
        while done < len {
            let addr = vaddr.add(done as u64);
            let frame = self.translate(addr).frame().ok_or(AddrError::AliasTargetUnmapped(addr))?;
            let room = (PAGE_SIZE - addr.page_offset()) as usize;
            let n = room.min(len - done);
            self.memory.read(frame, addr.page_offset(), &mut out[done..done + n]);
            done += n;
        }
        Ok(out)
    }

    /// The page tables. Only scoring code should look here.
    pub fn ground_truth(&self) -> &AddressSpace {
        &self.space
    }

    // ---- TLB operations ----

    pub fn tlb(&self, kind: TlbKind) -> &Tlb {
        self.tlbs.get(kind)
    }

    pub fn tlb_lookup(&self, kind: TlbKind, vpn: u64) -> bool {
        self.tlbs.get(kind).contains(vpn)
    }

    /// Inserts a translation. Ignored for vpns that are not mapped, so the
    /// TLB never holds an invalid address.
    pub fn tlb_insert(&mut self, kind: TlbKind, vpn: u64, frame: u64) {
        if let Translation::Mapped { frame: real, .. } = self.translate(VirtualAddress::from_vpn(vpn)) {
            debug_assert_eq!(real, frame, "tlb_insert frame disagrees with page tables");
            self.tlbs.get_mut(kind).insert(vpn, real);
        }
    }

    pub fn tlb_flush_all(&mut self, kind: TlbKind) {
        self.tlbs.get_mut(kind).flush();
    }

    pub fn tlb_invalidate(&mut self, kind: TlbKind, vpn: u64) -> bool {
        self.tlbs.get_mut(kind).invalidate(vpn)
    }

    /// Maps `sets * (ways + 1)` user pages at `base` and uses them for `tlb_evict_vpn`.
    pub fn install_eviction_region(&mut self, kind: TlbKind, base: VirtualAddress) -> Result<(), AddrError> {
        let g = self.tlbs.get(kind).geometry();
        let pages = (g.sets * (g.ways + 1)) as u64;
        self.map_region(base, pages, PageFlags::USER_RW)?;
        self.eviction[kind as usize] = Some(EvictionRegion { base, pages });
        Ok(())
    }

    pub fn eviction_region(&self, kind: TlbKind) -> Option<EvictionRegion> {
        self.eviction[kind as usize]
    }

    /// Evicts `target_vpn` by touching `ways + 1` congruent pages of the eviction region.
    pub fn tlb_evict_vpn(&mut self, kind: TlbKind, target_vpn: u64) -> Result<(), SimError> {
        let region = self.eviction[kind as usize].ok_or(SimError::NoEvictionRegion(kind))?;
        let g = self.tlbs.get(kind).geometry();
        let sets = g.sets as u64;
        let base_vpn = region.base.vpn();
        let first = base_vpn + (target_vpn % sets + sets - base_vpn % sets) % sets;
        for j in 0..=g.ways as u64 {
            let addr = VirtualAddress::from_vpn(first + j * sets);
            match kind {
                TlbKind::Data => {
                    self.load_issue(addr, 1)?;
                }
                TlbKind::Instruction => {
                    self.fetch_issue(addr)?;
                }
            }
        }
        debug_assert!(!self.tlbs.get(kind).contains(target_vpn));
        Ok(())
    }

    // ---- access checks ----

    fn check(&self, addr: VirtualAddress, write: bool) -> Access {
        match self.translate(addr) {
            Translation::NonCanonical => Access::Fault { reason: FaultReason::NonCanonical, frame: None },
            Translation::NotMapped => Access::Fault { reason: FaultReason::NotMapped, frame: None },
            Translation::Mapped { frame, flags } => {
                if flags.protected_region {
                    // Abort-page semantics: no fault, reads 0xff, writes vanish.
                    Access::Ok { frame, flags }
                } else if !flags.user_accessible && self.mode() == Mode::User {
                    Access::Fault { reason: FaultReason::Supervisor, frame: Some(frame) }
                } else if write && !flags.writable {
                    Access::Fault { reason: FaultReason::ReadOnly, frame: Some(frame) }
                } else {
                    Access::Ok { frame, flags }
                }
            }
        }
    }

    /// Either counts a suppressed fault or turns it into an error.
    fn fault(&mut self, addr: VirtualAddress, reason: FaultReason) -> Result<(), SimError> {
        match self.thread_mut().window.as_mut() {
            Some(w) => {
                w.suppressed_faults += 1;
                self.stats.suppressed_faults += 1;
                Ok(())
            }
            None => Err(SimError::ArchitecturalFault { addr, reason }),
        }
    }

    fn check_size(addr: VirtualAddress, size: usize) -> Result<(), SimError> {
        if !VALID_SIZES.contains(&size) {
            return Err(SimError::BadAccessSize(size));
        }
        if addr.page_offset() + size as u64 > PAGE_SIZE {
            return Err(SimError::SplitAccess(addr));
        }
        Ok(())
    }

    pub fn in_window(&self) -> bool {
        self.thread().window.is_some()
    }

    pub fn in_transaction(&self) -> bool {
        self.thread().tx.is_some()
    }

    fn note_tx_touch(&mut self, vpn: u64, line: Option<LineId>) {
        if let Some(tx) = self.thread_mut().tx.as_mut() {
            tx.touched_vpns.insert(vpn);
            if let Some(l) = line {
                tx.written_lines.insert(l);
            }
        }
    }

    /// dTLB/iTLB lookup-then-walk shared by loads and fetches. Returns (hit, walk cycles).
    fn translate_and_fill(&mut self, kind: TlbKind, vpn: u64, frame: u64) -> bool {
        let tlb = self.tlbs.get_mut(kind);
        if tlb.lookup(vpn).is_some() {
            true
        } else {
            tlb.insert(vpn, frame);
            self.cycles += self.profile.lat_walk;
            false
        }
    }

    fn fill_line(&mut self, frame: u64, offset: u64) {
        let hit = self.cache.access(LineId::new(frame, offset));
        self.cycles += if hit { self.profile.lat_cache_hit } else { self.profile.lat_cache_miss };
    }

    // ---- stores ----

    pub fn store_issue(&mut self, vaddr: VirtualAddress, data: &[u8]) -> Result<(), SimError> {
        self.store_issue_via(TlbKind::Data, vaddr, data)
    }

    /// Buffers a store whose address is resolved through the given TLB.
    pub fn store_issue_via(&mut self, kind: TlbKind, vaddr: VirtualAddress, data: &[u8]) -> Result<(), SimError> {
        Self::check_size(vaddr, data.len())?;
        if self.thread().store_buffer.is_full() {
            self.stats.stalls += 1;
            return Err(SimError::Stall { capacity: self.thread().store_buffer.capacity() });
        }
        let transient = self.in_window();
        if !transient {
            if let Access::Fault { reason, .. } = self.check(vaddr, true) {
                return Err(SimError::ArchitecturalFault { addr: vaddr, reason });
            }
        }
        let vpn = vaddr.vpn();
        let resolved = match self.translate(vaddr) {
            Translation::NonCanonical => Some(SYNTHETIC_FRAME),
            Translation::NotMapped => None,
            Translation::Mapped { frame, .. } => {
                if self.tlbs.get_mut(kind).lookup(vpn).is_some() {
                    Some(frame)
                } else if let Some(w) = self.thread_mut().window.as_mut() {
                    w.deferred_walks.push((kind, vpn, frame));
                    None
                } else {
                    self.tlbs.get_mut(kind).insert(vpn, frame);
                    self.cycles += self.profile.lat_walk;
                    Some(frame)
                }
            }
        };
        if transient {
            if let Access::Fault { reason, .. } = self.check(vaddr, true) {
                self.fault(vaddr, reason)?;
            }
        }
        let mut entry = StoreBufferEntry::new(vaddr, data, resolved, transient);
        entry.resolved_via = kind;
        let in_tx = self.in_transaction() && !transient;
        entry.in_tx = in_tx;
        if self.in_transaction() {
            let line = resolved.filter(|_| in_tx).map(|f| LineId::new(f, vaddr.page_offset()));
            self.note_tx_touch(vpn, line);
        }
        self.thread_mut().store_buffer.push(entry);
        self.stats.stores += 1;
        self.cycles += STORE_CYCLES;
        Ok(())
    }

    /// Writes every committed store to memory. Transactional and transient
    /// entries stay. Returns how many entries left the buffer.
    pub fn drain_store_buffer(&mut self) -> usize {
        let drained = self.thread_mut().store_buffer.extract(|e| !e.transient && !e.in_tx);
        let n = drained.len();
        for e in drained {
            self.commit_store(&e);
        }
        n
    }

    fn commit_store(&mut self, e: &StoreBufferEntry) {
        let Some(frame) = e.resolved_frame else { return };
        if frame == SYNTHETIC_FRAME {
            return;
        }
        if let Translation::Mapped { flags, .. } = self.translate(e.vaddr) {
            if flags.protected_region {
                return;
            }
        }
        self.memory.write(frame, e.vaddr.page_offset(), e.data());
        self.cache.access(LineId::new(frame, e.vaddr.page_offset()));
    }

    // ---- loads ----

    pub fn load_issue(&mut self, vaddr: VirtualAddress, size: usize) -> Result<LoadResult, SimError> {
        Self::check_size(vaddr, size)?;
        self.stats.loads += 1;
        let access = self.check(vaddr, false);
        let faulted = matches!(access, Access::Fault { .. });
        let vpn = vaddr.vpn();

        // Every load, faulting or not, leaves its translation and line behind.
        let mapped = match access {
            Access::Ok { frame, flags } => Some((frame, flags)),
            Access::Fault { frame: Some(frame), .. } => Some((frame, PageFlags::KERNEL_RW)),
            Access::Fault { frame: None, .. } => None,
        };
        match mapped {
            Some((frame, _)) => {
                self.translate_and_fill(TlbKind::Data, vpn, frame);
                self.fill_line(frame, vaddr.page_offset());
            }
            None => self.cycles += self.profile.lat_cache_hit,
        }
        if let Access::Fault { reason, .. } = access {
            self.fault(vaddr, reason)?;
        }
        if self.in_transaction() && mapped.is_some() {
            self.note_tx_touch(vpn, None);
        }

        let mut out = LoadResult { data: [0; MAX_ACCESS], len: size as u8, source: LoadSource::CacheOrMemory, faulted };
        let offset = vaddr.page_offset();
        let mut blocked = false;
        for e in self.threads[self.active].store_buffer.entries().rev() {
            if !e.overlaps(vaddr, size) {
                continue;
            }
            if e.is_resolved() && e.contains(vaddr, size) {
                let start = (offset - e.vaddr.page_offset()) as usize;
                out.data[..size].copy_from_slice(&e.data()[start..start + size]);
                out.source = LoadSource::StoreForward;
                self.stats.store_forwards += 1;
                return Ok(out);
            }
            blocked = true;
            break;
        }
        if !blocked && faulted && self.profile.wtf_enabled {
            for e in self.threads[self.active].store_buffer.entries().rev() {
                if e.offset_range().contains(&offset) {
                    let start = (offset - e.vaddr.page_offset()) as usize;
                    let n = (e.size() - start).min(size);
                    out.data[..n].copy_from_slice(&e.data()[start..start + n]);
                    out.source = LoadSource::WtForward;
                    self.stats.wt_forwards += 1;
                    return Ok(out);
                }
            }
        }
        match (faulted, mapped) {
            (true, _) => out.source = LoadSource::Squashed,
            (false, Some((_, flags))) if flags.protected_region => out.data[..size].fill(ABORT_PAGE_BYTE),
            (false, Some((frame, _))) => self.memory.read(frame, offset, &mut out.data[..size]),
            (false, None) => unreachable!("non-faulting loads are mapped"),
        }
        Ok(out)
    }

    /// Instruction fetch of the page holding `vaddr`; fills the iTLB.
    pub fn fetch_issue(&mut self, vaddr: VirtualAddress) -> Result<FetchResult, SimError> {
        self.stats.fetches += 1;
        let access = self.check(vaddr, false);
        let (frame, reason) = match access {
            Access::Ok { frame, flags } if flags.protected_region => (Some(frame), Some(FaultReason::Supervisor)),
            Access::Ok { frame, .. } => (Some(frame), None),
            Access::Fault { reason, frame } => (frame, Some(reason)),
        };
        let mut tlb_hit = false;
        match frame {
            Some(f) => {
                tlb_hit = self.translate_and_fill(TlbKind::Instruction, vaddr.vpn(), f);
                self.fill_line(f, vaddr.page_offset());
            }
            None => self.cycles += self.profile.lat_cache_hit,
        }
        if let Some(r) = reason {
            self.fault(vaddr, r)?;
        }
        if self.in_transaction() && frame.is_some() {
            self.note_tx_touch(vaddr.vpn(), None);
        }
        Ok(FetchResult { faulted: reason.is_some(), tlb_hit })
    }

    // ---- cache and timing ----

    fn timing_frame(&mut self, vaddr: VirtualAddress) -> Result<Option<u64>, SimError> {
        match self.check(vaddr, false) {
            Access::Ok { frame, .. } => Ok(Some(frame)),
            Access::Fault { reason, .. } => self.fault(vaddr, reason).map(|_| None),
        }
    }

    /// clflush. Does not touch the TLB.
    pub fn flush_line(&mut self, vaddr: VirtualAddress) -> Result<(), SimError> {
        if let Some(frame) = self.timing_frame(vaddr)? {
            self.cache.flush(LineId::new(frame, vaddr.page_offset()));
            self.cycles += self.profile.lat_cache_hit;
        }
        Ok(())
    }

    /// Timed reload of one line. Pays a walk on a dTLB miss but does not
    /// fill the dTLB. The hit/miss class is flipped with probability `noise_p`.
    pub fn timed_access(&mut self, vaddr: VirtualAddress) -> Result<u64, SimError> {
        let Some(frame) = self.timing_frame(vaddr)? else {
            return Ok(self.profile.lat_cache_miss);
        };
        self.stats.timed_accesses += 1;
        let walk = if self.tlbs.dtlb.lookup(vaddr.vpn()).is_some() { 0 } else { self.profile.lat_walk };
        let mut hit = self.cache.access(LineId::new(frame, vaddr.page_offset()));
        if self.noise_flip() {
            hit = !hit;
        }
        let latency = walk + if hit { self.profile.lat_cache_hit } else { self.profile.lat_cache_miss };
        self.cycles += latency;
        Ok(latency)
    }

    pub fn is_hit(&self, latency: u64) -> bool {
        latency < self.profile.hit_threshold
    }

    /// Pulls a line into the cache without timing it. Used for eviction sweeps.
    pub fn touch_line(&mut self, vaddr: VirtualAddress) -> Result<(), SimError> {
        if let Some(frame) = self.timing_frame(vaddr)? {
            self.fill_line(frame, vaddr.page_offset());
        }
        Ok(())
    }

    pub fn line_cached(&self, vaddr: VirtualAddress) -> bool {
        self.translate(vaddr).frame().is_some_and(|f| self.cache.contains(LineId::new(f, vaddr.page_offset())))
    }

    pub fn cache(&self) -> &Cache {
        &self.cache
    }

    // ---- transient windows ----

    pub fn begin_window(&mut self, suppression: Suppression) -> Result<(), SimError> {
        if self.in_window() {
            return Err(SimError::NestedWindow);
        }
        self.thread_mut().window =
            Some(WindowState { suppression, deferred_walks: Vec::new(), suppressed_faults: 0 });
        self.stats.windows += 1;
        Ok(())
    }

    /// Closes the window: transient stores are squashed, deferred page walks
    /// complete, and the suppression overhead is charged.
    pub fn end_window(&mut self) -> Result<WindowReport, SimError> {
        let w = self.thread_mut().window.take().ok_or(SimError::NoWindow)?;
        let squashed = self
            .thread_mut()
            .store_buffer
            .extract(|e| e.transient)
            .into_iter()
            .map(|e| SquashedStore { vaddr: e.vaddr, size: e.size() })
            .collect();
        for (kind, vpn, frame) in w.deferred_walks {
            self.tlbs.get_mut(kind).insert(vpn, frame);
        }
        let overhead = w.suppression.overhead_cycles(&self.profile);
        self.cycles += overhead;
        Ok(WindowReport { suppression: w.suppression, squashed, suppressed_faults: w.suppressed_faults, overhead_cycles: overhead })
    }

    // ---- transactions ----

    pub fn tx_begin(&mut self) -> Result<Transaction, TxError> {
        if self.in_window() {
            return Err(TxError::InsideWindow);
        }
        if self.in_transaction() {
            return Err(TxError::AlreadyActive);
        }
        let id = self.next_tx_id;
        self.next_tx_id += 1;
        self.thread_mut().tx = Some(TxState { id, touched_vpns: BTreeSet::new(), written_lines: BTreeSet::new() });
        Ok(Transaction::new(id))
    }

    fn take_tx(&mut self, tx: &Transaction) -> Result<TxState, TxError> {
        match &self.thread().tx {
            None => Err(TxError::NotActive),
            Some(s) if s.id != tx.id || tx.status != TxStatus::Active => Err(TxError::WrongTransaction(tx.id)),
            Some(_) => Ok(self.thread_mut().tx.take().expect("checked above")),
        }
    }

    pub fn tx_commit(&mut self, tx: &mut Transaction) -> Result<(), TxError> {
        let state = self.take_tx(tx)?;
        let entries = self.thread_mut().store_buffer.extract(|e| e.in_tx);
        for e in &entries {
            self.commit_store(e);
        }
        tx.finish(TxStatus::Committed, state.touched_vpns);
        Ok(())
    }

    /// Drops the transaction's stores and written lines. TLB entries stay.
    pub fn tx_abort(&mut self, tx: &mut Transaction) -> Result<(), TxError> {
        let state = self.take_tx(tx)?;
        self.thread_mut().store_buffer.extract(|e| e.in_tx);
        for line in &state.written_lines {
            self.cache.flush(*line);
        }
        self.cycles += self.profile.tsx_window_cycles;
        tx.finish(TxStatus::Aborted, state.touched_vpns);
        Ok(())
    }
}
