//! 64-bit virtual memory: canonical addresses, a flat page table and
//! randomized kernel layouts.

mod layout;

pub use layout::{
    generate_layout, KernelLayout, ModuleExtent, ModuleSpec, OsProfile, DIRECT_MAP_MATERIALIZED_PAGES,
    DIRECT_MAP_SLOTS, DIRECT_MAP_SLOT_SIZE, DIRECT_MAP_START, GIB, KERNEL_IMAGE_PAGES, KERNEL_SLOT_SIZE, LINUX_KERNEL_SLOTS, LINUX_KERNEL_START,
    LINUX_MODULE_REGION, MIB, MODULE_REGION_PAGES, WINDOWS_KERNEL_SLOTS, WINDOWS_KERNEL_START,
    WINDOWS_MODULE_REGION,
};

use std::fmt;

use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};

use crate::error::AddrError;

pub const PAGE_SHIFT: u32 = 12;
pub const PAGE_SIZE: u64 = 1 << PAGE_SHIFT;

/// Largest physical frame number representable with 52-bit physical addresses.
pub const MAX_FRAME: u64 = (1 << (52 - PAGE_SHIFT)) - 1;

/// A 64-bit virtual address.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct VirtualAddress(pub u64);

impl VirtualAddress {
    pub const fn new(value: u64) -> Self {
        Self(value)
    }

    pub const fn from_vpn(vpn: u64) -> Self {
        Self(vpn << PAGE_SHIFT)
    }

    pub const fn value(self) -> u64 {
        self.0
    }

    pub const fn vpn(self) -> u64 {
        self.0 >> PAGE_SHIFT
    }

    pub const fn page_offset(self) -> u64 {
        self.0 & (PAGE_SIZE - 1)
    }

    pub const fn is_canonical(self) -> bool {
        is_canonical(self)
    }

    pub const fn page_aligned(self) -> bool {
        self.page_offset() == 0
    }

    /// Address `n` pages above this one, wrapping at 2^64.
    pub const fn add_pages(self, n: u64) -> Self {
        Self(self.0.wrapping_add(n.wrapping_mul(PAGE_SIZE)))
    }

    pub const fn add(self, bytes: u64) -> Self {
        Self(self.0.wrapping_add(bytes))
    }
}

impl fmt::Debug for VirtualAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "VirtualAddress({:#018x})", self.0)
    }
}

impl fmt::Display for VirtualAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#018x}", self.0)
    }
}

impl fmt::LowerHex for VirtualAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::LowerHex::fmt(&self.0, f)
    }
}

impl From<u64> for VirtualAddress {
    fn from(value: u64) -> Self {
        Self(value)
    }
}

/// Addresses cross the JSON boundary as `"0x..."` strings so that 64-bit
/// values survive parsers that only have doubles.
impl Serialize for VirtualAddress {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&format!("{:#x}", self.0))
    }
}

impl<'de> Deserialize<'de> for VirtualAddress {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        parse_address(&s).map_err(serde::de::Error::custom)
    }
}

/// Parses `0x`-prefixed hex or plain decimal.
pub fn parse_address(s: &str) -> Result<VirtualAddress, String> {
    let s = s.trim();
    let parsed = match s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        Some(hex) => u64::from_str_radix(&hex.replace('_', ""), 16),
        None => s.parse::<u64>(),
    };
    parsed
        .map(VirtualAddress)
        .map_err(|e| format!("invalid address {s:?}: {e}"))
}

/// Bits 47..=63 must all equal bit 47.
pub const fn is_canonical(addr: VirtualAddress) -> bool {
    let top = addr.0 >> 47;
    top == 0 || top == (1 << 17) - 1
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PageFlags {
    pub present: bool,
    pub user_accessible: bool,
    pub writable: bool,
    /// Enclave-style page: backed by a frame, architecturally unreadable
    /// from outside (reads return all-ones, writes are dropped).
    pub protected_region: bool,
}

impl PageFlags {
    pub const USER_RW: Self = Self { present: true, user_accessible: true, writable: true, protected_region: false };
    pub const USER_RO: Self = Self { present: true, user_accessible: true, writable: false, protected_region: false };
    pub const KERNEL_RW: Self = Self { present: true, user_accessible: false, writable: true, protected_region: false };
    pub const KERNEL_RX: Self = Self { present: true, user_accessible: false, writable: false, protected_region: false };
    pub const PROTECTED: Self = Self { present: true, user_accessible: false, writable: false, protected_region: true };

    fn is_valid(self) -> bool {
        !self.protected_region || self.present
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PageEntry {
    pub frame: u64,
    pub flags: PageFlags,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Translation {
    Mapped { frame: u64, flags: PageFlags },
    NotMapped,
    NonCanonical,
}

impl Translation {
    pub fn frame(self) -> Option<u64> {
        match self {
            Translation::Mapped { frame, .. } => Some(frame),
            _ => None,
        }
    }

    pub fn is_mapped(self) -> bool {
        matches!(self, Translation::Mapped { .. })
    }
}

/// Virtual-to-physical mapping with 4 KiB pages.
///
/// Frames are handed out sequentially; two vpns only share a frame when
/// [`AddressSpace::alias_region`] asks for it.
#[derive(Clone, Debug)]
pub struct AddressSpace {
    pages: FxHashMap<u64, PageEntry>,
    next_frame: u64,
}

impl Default for AddressSpace {
    fn default() -> Self {
        Self::new()
    }
}

impl AddressSpace {
    /// Frame 0 is never handed out.
    const FIRST_FRAME: u64 = 0x100;

    pub fn new() -> Self {
        Self { pages: FxHashMap::default(), next_frame: Self::FIRST_FRAME }
    }

    pub fn translate(&self, addr: VirtualAddress) -> Translation {
        if !addr.is_canonical() {
            return Translation::NonCanonical;
        }
        match self.pages.get(&addr.vpn()) {
            Some(entry) if entry.flags.present => Translation::Mapped { frame: entry.frame, flags: entry.flags },
            _ => Translation::NotMapped,
        }
    }

    /// Maps `n_pages` fresh frames starting at the page containing `start`.
    pub fn map_region(&mut self, start: VirtualAddress, n_pages: u64, flags: PageFlags) -> Result<(), AddrError> {
        self.check_range(start, n_pages, flags)?;
        if self.next_frame + n_pages > MAX_FRAME + 1 {
            return Err(AddrError::FramesExhausted);
        }
        for i in 0..n_pages {
            let frame = self.next_frame + i;
            self.pages.insert(start.vpn() + i, PageEntry { frame, flags });
        }
        self.next_frame += n_pages;
        Ok(())
    }

    /// Maps `n_pages` at `start` onto the frames already backing `target`.
    pub fn alias_region(
        &mut self,
        start: VirtualAddress,
        n_pages: u64,
        target: VirtualAddress,
        flags: PageFlags,
    ) -> Result<(), AddrError> {
        self.check_range(start, n_pages, flags)?;
        let frames = (0..n_pages)
            .map(|i| {
                let va = target.add_pages(i);
                self.translate(va).frame().ok_or(AddrError::AliasTargetUnmapped(va))
            })
            .collect::<Result<Vec<_>, _>>()?;
        for (i, frame) in frames.into_iter().enumerate() {
            self.pages.insert(start.vpn() + i as u64, PageEntry { frame, flags });
        }
        Ok(())
    }

    /// Removes any mapping for the page containing `addr`.
    pub fn unmap(&mut self, addr: VirtualAddress) -> bool {
        self.pages.remove(&addr.vpn()).is_some()
    }

    fn check_range(&self, start: VirtualAddress, n_pages: u64, flags: PageFlags) -> Result<(), AddrError> {
        if !flags.is_valid() {
            return Err(AddrError::InvalidFlags);
        }
        if !start.page_aligned() {
            return Err(AddrError::Unaligned(start));
        }
        if n_pages == 0 {
            return Ok(());
        }
        let last = start.add_pages(n_pages - 1);
        // Both ends canonical and no wrap means the whole range stays on one
        // side of the hole.
        if !start.is_canonical() || !last.is_canonical() || last < start || (start.0 >> 47) != (last.0 >> 47) {
            return Err(AddrError::NonCanonical(start));
        }
        for i in 0..n_pages {
            if self.pages.contains_key(&(start.vpn() + i)) {
                return Err(AddrError::Overlap(start.add_pages(i)));
            }
        }
        Ok(())
    }

    pub fn is_mapped(&self, addr: VirtualAddress) -> bool {
        self.translate(addr).is_mapped()
    }

    pub fn mapped_pages(&self) -> usize {
        self.pages.len()
    }

    /// Every mapped vpn, sorted.
    pub fn mapped_vpns(&self) -> Vec<u64> {
        let mut vpns: Vec<u64> = self.pages.iter().filter(|(_, e)| e.flags.present).map(|(&v, _)| v).collect();
        vpns.sort_unstable();
        vpns
    }

    pub fn entries(&self) -> impl Iterator<Item = (u64, PageEntry)> + '_ {
        self.pages.iter().map(|(&v, &e)| (v, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn canonical_boundaries() {
        assert!(is_canonical(VirtualAddress(0x0000_7fff_ffff_ffff)));
        assert!(is_canonical(VirtualAddress(0xffff_8000_0000_0000)));
        assert!(!is_canonical(VirtualAddress(0x0000_8000_0000_0000)));
        assert!(!is_canonical(VirtualAddress(0xfeff_ffff_ffff_ffff)));
        assert!(is_canonical(VirtualAddress(0)));
        assert!(is_canonical(VirtualAddress(u64::MAX)));
    }

    #[test]
    fn translate_cases() {
        let mut space = AddressSpace::new();
        let base = VirtualAddress(0xffff_ffff_8100_0000);
        space.map_region(base, 4, PageFlags::KERNEL_RX).unwrap();
        match space.translate(base) {
            Translation::Mapped { flags, .. } => assert!(!flags.user_accessible),
            other => panic!("{other:?}"),
        }
        assert_eq!(space.translate(VirtualAddress(0x1000)), Translation::NotMapped);
        assert_eq!(space.translate(VirtualAddress(0x0000_8000_0000_0000)), Translation::NonCanonical);
    }

    #[test]
    fn map_region_rejects_overlap_and_noncanonical() {
        let mut space = AddressSpace::new();
        space.map_region(VirtualAddress(0x10000), 4, PageFlags::USER_RW).unwrap();
        assert_eq!(
            space.map_region(VirtualAddress(0x12000), 4, PageFlags::USER_RW),
            Err(AddrError::Overlap(VirtualAddress(0x12000)))
        );
        assert!(matches!(
            space.map_region(VirtualAddress(0x0000_7fff_ffff_f000), 2, PageFlags::USER_RW),
            Err(AddrError::NonCanonical(_))
        ));
        assert!(matches!(
            space.map_region(VirtualAddress(0x10001), 1, PageFlags::USER_RW),
            Err(AddrError::Unaligned(_))
        ));
        let bogus = PageFlags { present: false, protected_region: true, ..PageFlags::default() };
        assert_eq!(space.map_region(VirtualAddress(0x40000), 1, bogus), Err(AddrError::InvalidFlags));
    }

    #[test]
    fn frames_are_unique_unless_aliased() {
        let mut space = AddressSpace::new();
        space.map_region(VirtualAddress(0x10000), 8, PageFlags::USER_RW).unwrap();
        space.map_region(VirtualAddress(0x40000), 8, PageFlags::USER_RW).unwrap();
        let mut frames: Vec<u64> = space.entries().map(|(_, e)| e.frame).collect();
        frames.sort_unstable();
        frames.dedup();
        assert_eq!(frames.len(), 16);

        space.alias_region(VirtualAddress(0x80000), 2, VirtualAddress(0x10000), PageFlags::USER_RO).unwrap();
        assert_eq!(
            space.translate(VirtualAddress(0x80000)).frame(),
            space.translate(VirtualAddress(0x10000)).frame()
        );
    }

    proptest! {
        #[test]
        fn vpn_offset_recompose(value in any::<u64>()) {
            let va = VirtualAddress(value);
            prop_assert_eq!(va.vpn() * PAGE_SIZE + va.page_offset(), value);
        }

        #[test]
        fn canonical_matches_sign_extension(value in any::<u64>()) {
            let sign_extended = (((value << 16) as i64) >> 16) as u64;
            prop_assert_eq!(is_canonical(VirtualAddress(value)), sign_extended == value);
        }

        #[test]
        fn map_then_translate_round_trip(page in 0u64..(1 << 30), n in 1u64..32, user in any::<bool>(), writable in any::<bool>()) {
            let mut space = AddressSpace::new();
            let flags = PageFlags { present: true, user_accessible: user, writable, protected_region: false };
            let start = VirtualAddress::from_vpn(page);
            space.map_region(start, n, flags).unwrap();
            for i in 0..n {
                let t = space.translate(start.add_pages(i));
                let ok = matches!(t, Translation::Mapped { flags: f, .. } if f == flags);
                prop_assert!(ok);
                prop_assert_eq!(t, space.translate(start.add_pages(i)));
            }
        }
    }
}
