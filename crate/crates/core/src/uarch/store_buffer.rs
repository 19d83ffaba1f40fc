use std::collections::VecDeque;

use rustc_hash::FxHashMap;

use super::tlb::TlbKind;
use crate::addrspace::{VirtualAddress, PAGE_SIZE};

pub const MAX_ACCESS: usize = 32;
pub const VALID_SIZES: [usize; 6] = [1, 2, 4, 8, 16, 32];

/// Frame recorded for stores to non-canonical addresses. Never handed out
/// by an address space.
pub const SYNTHETIC_FRAME: u64 = u64::MAX >> 12;

/// One pending store; address and data halves merged into a single entry.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StoreBufferEntry {
    pub vaddr: VirtualAddress,
    size: u8,
    data: [u8; MAX_ACCESS],
    /// Physical frame once the address is translated.
    pub resolved_frame: Option<u64>,
    pub transient: bool,
    /// Issued inside a TSX transaction; dropped on abort.
    pub in_tx: bool,
    /// TLB consulted when resolving the address.
    pub resolved_via: TlbKind,
}

impl StoreBufferEntry {
    pub fn new(vaddr: VirtualAddress, bytes: &[u8], resolved_frame: Option<u64>, transient: bool) -> Self {
        let mut data = [0; MAX_ACCESS];
        data[..bytes.len()].copy_from_slice(bytes);
        Self {
            vaddr,
            size: bytes.len() as u8,
            data,
            resolved_frame,
            transient,
            in_tx: false,
            resolved_via: TlbKind::Data,
        }
    }

    pub fn size(&self) -> usize {
        self.size as usize
    }

    pub fn data(&self) -> &[u8] {
        &self.data[..self.size()]
    }

    pub fn is_resolved(&self) -> bool {
        self.resolved_frame.is_some()
    }

    pub fn offset_range(&self) -> std::ops::Range<u64> {
        let o = self.vaddr.page_offset();
        o..o + self.size as u64
    }

    /// Same vpn and overlapping bytes.
    pub fn overlaps(&self, vaddr: VirtualAddress, size: usize) -> bool {
        let r = self.offset_range();
        let o = vaddr.page_offset();
        self.vaddr.vpn() == vaddr.vpn() && o < r.end && r.start < o + size as u64
    }

    /// Same vpn and the load lies entirely inside the stored bytes.
    pub fn contains(&self, vaddr: VirtualAddress, size: usize) -> bool {
        let r = self.offset_range();
        let o = vaddr.page_offset();
        self.vaddr.vpn() == vaddr.vpn() && o >= r.start && o + size as u64 <= r.end
    }
}

#[derive(Clone, Debug)]
pub struct StoreBuffer {
    capacity: usize,
    entries: VecDeque<StoreBufferEntry>,
}

impl StoreBuffer {
    pub fn new(capacity: usize) -> Self {
        Self { capacity, entries: VecDeque::with_capacity(capacity) }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.entries.len() >= self.capacity
    }

    /// Caller checks `is_full` first.
    pub fn push(&mut self, entry: StoreBufferEntry) -> usize {
        debug_assert!(!self.is_full());
        self.entries.push_back(entry);
        self.entries.len() - 1
    }

    /// Oldest first.
    pub fn entries(&self) -> impl DoubleEndedIterator<Item = &StoreBufferEntry> {
        self.entries.iter()
    }

    pub fn get_mut(&mut self, index: usize) -> Option<&mut StoreBufferEntry> {
        self.entries.get_mut(index)
    }

    /// Removes entries matching `pred`, returning them oldest first.
    pub fn extract(&mut self, mut pred: impl FnMut(&StoreBufferEntry) -> bool) -> Vec<StoreBufferEntry> {
        let mut kept = VecDeque::with_capacity(self.capacity);
        let mut taken = Vec::new();
        for e in self.entries.drain(..) {
            if pred(&e) {
                taken.push(e);
            } else {
                kept.push_back(e);
            }
        }
        self.entries = kept;
        taken
    }
}

/// Sparse physical memory; untouched frames read as zero.
#[derive(Clone, Debug, Default)]
pub struct PhysicalMemory {
    frames: FxHashMap<u64, Box<[u8; PAGE_SIZE as usize]>>,
}

impl PhysicalMemory {
    pub fn read(&self, frame: u64, offset: u64, out: &mut [u8]) {
        let o = offset as usize;
        match self.frames.get(&frame) {
            Some(page) => out.copy_from_slice(&page[o..o + out.len()]),
            None => out.fill(0),
        }
    }

    pub fn write(&mut self, frame: u64, offset: u64, bytes: &[u8]) {
        let o = offset as usize;
        let page = self.frames.entry(frame).or_insert_with(|| Box::new([0; PAGE_SIZE as usize]));
        page[o..o + bytes.len()].copy_from_slice(bytes);
    }
}
