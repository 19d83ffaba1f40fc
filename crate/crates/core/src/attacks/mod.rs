//! End-to-end attacks. Every attack takes a [`Core`] and a [`Bouncer`]; the
//! kernel layout is only ever used by the scoring helpers.

mod directmap;
mod enclave;
mod kaslr;
mod modules;
mod monitor;
mod spectre;
mod tsx;

pub use directmap::{find_direct_map, find_direct_map_with, score_direct_map, DirectMapOptions};
pub use enclave::{detect_protected_pages, score_pages, EnclaveSpec, ENCLAVE_HOST_BASE};
pub use kaslr::{break_kaslr, break_kaslr_with, score_kaslr, KaslrOptions};
pub use modules::{
    classify_modules, enumerate_modules, enumerate_modules_with, score_classification, ClassifiedExtent,
    EnumerateOptions, FoundExtent, ModuleScan,
};
pub use monitor::{
    monitor_activity, ActivityEvent, ActivityScript, ActivityTrace, KernelActivity, MonitorOptions, PeriodSample,
};
pub use spectre::{install_gadget, spectre_leak, GADGET_BOUNDS, GADGET_DATA_BASE, GADGET_ORACLE_BASE};
pub use tsx::{tsx_atomicity_probe, TxOp, TxScript};

pub use crate::primitives::SpectreGadget;

use serde::Serialize;

use crate::addrspace::{generate_layout, AddressSpace, KernelLayout, ModuleSpec, OsProfile, VirtualAddress};
use crate::error::AddrError;
use crate::primitives::{Bouncer, ProbeArray};
use crate::uarch::{Core, MicroarchProfile, TlbKind};

/// User-space placements for attacker-owned buffers.
pub const PROBE_BASE: VirtualAddress = VirtualAddress(0x0000_1000_0000_0000);
pub const DTLB_EVICTION_BASE: VirtualAddress = VirtualAddress(0x0000_1100_0000_0000);
pub const ITLB_EVICTION_BASE: VirtualAddress = VirtualAddress(0x0000_1200_0000_0000);
pub const EVICTION_BUFFER_BASE: VirtualAddress = VirtualAddress(0x0000_1300_0000_0000);

/// Keeps the core's random stream independent of the layout's.
const CORE_SEED_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

/// One measured candidate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ProbeRecord {
    pub candidate: VirtualAddress,
    pub positive: bool,
    /// Extra bounces beyond the first spent on this candidate.
    pub retry: usize,
    /// Simulated cycles spent on this candidate.
    pub cycles: u64,
    /// Probe taken after the search already stopped (alias check).
    pub trailing: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct SearchReport {
    pub recovered: Option<VirtualAddress>,
    pub candidates_tested: u64,
    pub retries_per_candidate: usize,
    pub simulated_cycles: u64,
    pub probes: Vec<ProbeRecord>,
}

impl SearchReport {
    /// Positive trailing probes: later slots that also bounced.
    pub fn trailing_hits(&self) -> usize {
        self.probes.iter().filter(|p| p.trailing && p.positive).count()
    }
}

/// The 26-module table used by the fingerprinting scenarios. `usbhid`
/// shares its size with two others, so it can never be named.
pub fn default_module_table() -> Vec<ModuleSpec> {
    [
        ("usbhid", 12),
        ("hid_generic", 12),
        ("joydev", 12),
        ("bluetooth", 134),
        ("i2c_i801", 9),
        ("e1000e", 66),
        ("snd_hda_intel", 14),
        ("snd_hda_codec", 38),
        ("snd_pcm", 27),
        ("iwlwifi", 95),
        ("cfg80211", 185),
        ("mac80211", 206),
        ("btusb", 16),
        ("btintel", 7),
        ("intel_rapl", 5),
        ("kvm", 156),
        ("kvm_intel", 58),
        ("i915", 430),
        ("drm_kms_helper", 48),
        ("drm", 121),
        ("ext4", 180),
        ("mbcache", 3),
        ("crc32_pclmul", 4),
        ("aesni_intel", 93),
        ("thinkpad_acpi", 26),
        ("nvme", 11),
    ]
    .into_iter()
    .map(|(n, s)| ModuleSpec::new(n, s))
    .collect()
}

/// A booted machine: randomized kernel, attacker buffers and the simulator.
pub struct System {
    pub core: Core,
    pub layout: KernelLayout,
    pub bouncer: Bouncer,
}

impl System {
    pub fn boot(profile: MicroarchProfile, os: OsProfile, seed: u64, modules: &[ModuleSpec]) -> Result<Self, AddrError> {
        let layout = generate_layout(seed, os, modules)?;
        let mut space = AddressSpace::new();
        layout.materialize(&mut space)?;
        let mut core = Core::new(profile, space, seed ^ CORE_SEED_SALT);
        let probe = ProbeArray::map(&mut core, PROBE_BASE)?;
        core.install_eviction_region(TlbKind::Data, DTLB_EVICTION_BASE)?;
        core.install_eviction_region(TlbKind::Instruction, ITLB_EVICTION_BASE)?;
        Ok(Self { core, layout, bouncer: Bouncer::new(probe) })
    }

    pub fn boot_default(profile: MicroarchProfile, os: OsProfile, seed: u64) -> Result<Self, AddrError> {
        Self::boot(profile, os, seed, &default_module_table())
    }
}

/// Runs data bounce up to `max` times on `p`, stopping once a strict
/// majority is certain. Returns (verdict, bounces used).
pub(crate) fn majority_bounce(
    core: &mut Core,
    bouncer: &Bouncer,
    p: VirtualAddress,
    max: usize,
) -> Result<(bool, usize), crate::error::PrimitiveError> {
    let need = max / 2 + 1;
    let (mut yes, mut no) = (0, 0);
    while yes < need && no < need && yes + no < max {
        if bouncer.bounced(core, p)? {
            yes += 1;
        } else {
            no += 1;
        }
    }
    Ok((yes > no, yes + no))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_table_shape() {
        let t = default_module_table();
        assert_eq!(t.len(), 26);
        let size_of = |n: &str| t.iter().find(|m| m.name == n).unwrap().size_pages;
        assert_eq!(size_of("usbhid"), 12);
        assert_eq!(t.iter().filter(|m| m.size_pages == 12).count(), 3);
        assert_eq!(t.iter().filter(|m| m.size_pages == 134).count(), 1);
        assert_eq!(t.iter().filter(|m| m.size_pages == size_of("i2c_i801")).count(), 1);
    }

    #[test]
    fn boot_maps_attacker_buffers() {
        let sys = System::boot_default(MicroarchProfile::skylake(), OsProfile::Linux, 5).unwrap();
        assert!(sys.core.ground_truth().is_mapped(PROBE_BASE));
        assert!(sys.core.ground_truth().is_mapped(sys.layout.kernel_base));
        assert!(sys.core.eviction_region(TlbKind::Data).is_some());
    }
}
