use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AddressSpace, PageFlags, VirtualAddress, PAGE_SIZE};
use crate::error::AddrError;

pub const MIB: u64 = 1 << 20;
pub const GIB: u64 = 1 << 30;

pub const LINUX_KERNEL_START: VirtualAddress = VirtualAddress(0xffff_ffff_8000_0000);
pub const LINUX_KERNEL_SLOTS: u64 = 512;
pub const WINDOWS_KERNEL_START: VirtualAddress = VirtualAddress(0xffff_f800_0000_0000);
pub const WINDOWS_KERNEL_SLOTS: u64 = 8192;
pub const KERNEL_SLOT_SIZE: u64 = 2 * MIB;

pub const DIRECT_MAP_START: VirtualAddress = VirtualAddress(0xffff_8880_0000_0000);
pub const DIRECT_MAP_SLOTS: u64 = 1 << 16;
pub const DIRECT_MAP_SLOT_SIZE: u64 = GIB;
/// Only the first pages of the direct map are materialized.
pub const DIRECT_MAP_MATERIALIZED_PAGES: u64 = 64;

pub const LINUX_MODULE_REGION: VirtualAddress = VirtualAddress(0xffff_ffff_c000_0000);
/// Windows has no fixed module window in this model; one is placed directly
/// after the kernel randomization range.
pub const WINDOWS_MODULE_REGION: VirtualAddress = VirtualAddress(0xffff_f804_0000_0000);
pub const MODULE_REGION_PAGES: u64 = GIB / PAGE_SIZE;

/// 16 MiB kernel image.
pub const KERNEL_IMAGE_PAGES: u64 = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OsProfile {
    Linux,
    Windows,
}

impl OsProfile {
    pub fn kernel_range_start(self) -> VirtualAddress {
        match self {
            OsProfile::Linux => LINUX_KERNEL_START,
            OsProfile::Windows => WINDOWS_KERNEL_START,
        }
    }

    pub fn kernel_slots(self) -> u64 {
        match self {
            OsProfile::Linux => LINUX_KERNEL_SLOTS,
            OsProfile::Windows => WINDOWS_KERNEL_SLOTS,
        }
    }

    pub fn module_region(self) -> VirtualAddress {
        match self {
            OsProfile::Linux => LINUX_MODULE_REGION,
            OsProfile::Windows => WINDOWS_MODULE_REGION,
        }
    }

    /// The `k`-th 2 MiB-aligned kernel base candidate.
    pub fn kernel_candidate(self, k: u64) -> VirtualAddress {
        self.kernel_range_start().add(k * KERNEL_SLOT_SIZE)
    }
}

impl std::str::FromStr for OsProfile {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "linux" => Ok(OsProfile::Linux),
            "windows" => Ok(OsProfile::Windows),
            other => Err(format!("unknown os profile {other:?} (expected linux or windows)")),
        }
    }
}

/// One row of the public module table: what `/proc/modules` would say.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleSpec {
    pub name: String,
    pub size_pages: u64,
}

impl ModuleSpec {
    pub fn new(name: impl Into<String>, size_pages: u64) -> Self {
        Self { name: name.into(), size_pages }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleExtent {
    pub name: String,
    pub start: VirtualAddress,
    #[serde(rename = "size")]
    pub size_pages: u64,
}

impl ModuleExtent {
    pub fn end(&self) -> VirtualAddress {
        self.start.add_pages(self.size_pages)
    }

    pub fn contains(&self, addr: VirtualAddress) -> bool {
        addr >= self.start && addr < self.end()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KernelLayout {
    pub os: OsProfile,
    pub kernel_base: VirtualAddress,
    pub kernel_size_pages: u64,
    /// `None` on Windows, which has no direct-physical map in this model.
    pub direct_map_base: Option<VirtualAddress>,
    /// Sorted by start address.
    pub module_extents: Vec<ModuleExtent>,
}

#[derive(Serialize)]
struct LayoutDump<'a> {
    kernel_base: VirtualAddress,
    direct_map_base: Option<VirtualAddress>,
    modules: &'a [ModuleExtent],
}

impl KernelLayout {
    pub fn module(&self, name: &str) -> Option<&ModuleExtent> {
        self.module_extents.iter().find(|m| m.name == name)
    }

    /// Maps the kernel image, the materialized part of the direct map and
    /// every module as supervisor pages.
    pub fn materialize(&self, space: &mut AddressSpace) -> Result<(), AddrError> {
        space.map_region(self.kernel_base, self.kernel_size_pages, PageFlags::KERNEL_RX)?;
        if let Some(base) = self.direct_map_base {
            space.map_region(base, DIRECT_MAP_MATERIALIZED_PAGES, PageFlags::KERNEL_RW)?;
        }
        for module in &self.module_extents {
            space.map_region(module.start, module.size_pages, PageFlags::KERNEL_RX)?;
        }
        Ok(())
    }

    /// Ground-truth dump: `{kernel_base, direct_map_base, modules: [{name, start, size}]}`.
    pub fn to_json(&self) -> String {
        let dump = LayoutDump {
            kernel_base: self.kernel_base,
            direct_map_base: self.direct_map_base,
            modules: &self.module_extents,
        };
        serde_json::to_string_pretty(&dump).expect("layout dump is always serializable")
    }

    /// Checks every layout invariant; used by property tests and by
    /// callers that load layouts from elsewhere.
    pub fn validate(&self) -> Result<(), String> {
        let slot = (self.kernel_base.0.wrapping_sub(self.os.kernel_range_start().0)) / KERNEL_SLOT_SIZE;
        let aligned = (self.kernel_base.0.wrapping_sub(self.os.kernel_range_start().0)) % KERNEL_SLOT_SIZE == 0;
        if self.kernel_base < self.os.kernel_range_start() || !aligned || slot >= self.os.kernel_slots() {
            return Err(format!("kernel base {} outside the {:?} slot grid", self.kernel_base, self.os));
        }
        match (self.os, self.direct_map_base) {
            (OsProfile::Linux, Some(base)) => {
                let off = base.0.wrapping_sub(DIRECT_MAP_START.0);
                if base < DIRECT_MAP_START || off % GIB != 0 || off / GIB >= DIRECT_MAP_SLOTS {
                    return Err(format!("direct map base {base} outside the 1 GiB slot grid"));
                }
            }
            (OsProfile::Linux, None) => return Err("linux layout without direct map".into()),
            (OsProfile::Windows, Some(_)) => return Err("windows layout with direct map".into()),
            (OsProfile::Windows, None) => {}
        }
        let region = self.os.module_region();
        let region_end = region.add_pages(MODULE_REGION_PAGES);
        let mut prev_end: Option<VirtualAddress> = None;
        for m in &self.module_extents {
            if !m.start.page_aligned() || m.start < region || (m.end() > region_end && region_end.0 != 0) {
                return Err(format!("module {} at {} outside the module region", m.name, m.start));
            }
            if let Some(end) = prev_end {
                if m.start <= end {
                    return Err(format!("module {} not separated from its predecessor", m.name));
                }
            }
            prev_end = Some(m.end());
        }
        Ok(())
    }
}

pub fn generate_layout(seed: u64, os: OsProfile, module_table: &[ModuleSpec]) -> Result<KernelLayout, AddrError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // The image has to fit inside the randomization range, so the top few
    // slots are never chosen.
    let image_slots = KERNEL_IMAGE_PAGES * PAGE_SIZE / KERNEL_SLOT_SIZE;
    let kernel_slot = rng.gen_range(0..=os.kernel_slots() - image_slots);
    let kernel_base = os.kernel_candidate(kernel_slot);

    let direct_map_base = match os {
        OsProfile::Linux => Some(DIRECT_MAP_START.add(rng.gen_range(0..DIRECT_MAP_SLOTS) * DIRECT_MAP_SLOT_SIZE)),
        OsProfile::Windows => None,
    };

    if let Some(bad) = module_table.iter().find(|m| m.size_pages == 0) {
        return Err(AddrError::EmptyModule(bad.name.clone()));
    }
    let total: u64 = module_table.iter().map(|m| m.size_pages).sum();
    // One guard page after every module.
    let needed = total + module_table.len() as u64;
    if needed > MODULE_REGION_PAGES {
        return Err(AddrError::ModuleRegionOverflow { needed, available: MODULE_REGION_PAGES });
    }
    let slack = MODULE_REGION_PAGES - needed;

    let mut order: Vec<&ModuleSpec> = module_table.iter().collect();
    order.shuffle(&mut rng);
    let mut offsets: Vec<u64> = (0..order.len()).map(|_| rng.gen_range(0..=slack)).collect();
    offsets.sort_unstable();

    let region = os.module_region();
    let mut consumed = 0;
    let module_extents = order
        .iter()
        .zip(offsets)
        .map(|(spec, gap)| {
            let start = region.add_pages(gap + consumed);
            consumed += spec.size_pages + 1;
            ModuleExtent { name: spec.name.clone(), start, size_pages: spec.size_pages }
        })
        .collect();

    Ok(KernelLayout { os, kernel_base, kernel_size_pages: KERNEL_IMAGE_PAGES, direct_map_base, module_extents })
}
