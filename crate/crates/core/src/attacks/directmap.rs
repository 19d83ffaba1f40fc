use crate::addrspace::{KernelLayout, VirtualAddress, DIRECT_MAP_SLOTS, DIRECT_MAP_SLOT_SIZE, DIRECT_MAP_START};
use crate::error::AttackError;
use crate::harness::Confusion;
use crate::primitives::Bouncer;
use crate::uarch::Core;

use super::kaslr::{probe, score_single};
use super::SearchReport;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DirectMapOptions {
    pub start: VirtualAddress,
    pub candidates: u64,
    /// Bounces per candidate; majority wins, with early stop.
    pub retries: usize,
    /// Extra pages after a hit that must bounce too before it is accepted.
    pub confirm_pages: u64,
}

impl Default for DirectMapOptions {
    fn default() -> Self {
        Self { start: DIRECT_MAP_START, candidates: DIRECT_MAP_SLOTS, retries: 3, confirm_pages: 2 }
    }
}

pub fn find_direct_map(core: &mut Core, bouncer: &Bouncer) -> Result<SearchReport, AttackError> {
    find_direct_map_with(core, bouncer, DirectMapOptions::default())
}

/// Scans the 1 GiB-aligned slots upward. A slot counts once its first page
/// and the `confirm_pages` after it all win their majority vote.
pub fn find_direct_map_with(
    core: &mut Core,
    bouncer: &Bouncer,
    opts: DirectMapOptions,
) -> Result<SearchReport, AttackError> {
    let start = core.cycles();
    let mut report = SearchReport { retries_per_candidate: opts.retries, ..Default::default() };
    for k in 0..opts.candidates {
        let candidate = opts.start.add(k * DIRECT_MAP_SLOT_SIZE);
        let mut record = probe(core, bouncer, candidate, opts.retries, false)?;
        report.candidates_tested += 1;
        if record.positive {
            for j in 1..=opts.confirm_pages {
                let c = probe(core, bouncer, candidate.add_pages(j), opts.retries, false)?;
                record.retry += c.retry + 1;
                record.cycles += c.cycles;
                if !c.positive {
                    record.positive = false;
                    break;
                }
            }
        }
        report.probes.push(record);
        if record.positive {
            report.recovered = Some(candidate);
            break;
        }
    }
    report.simulated_cycles = core.cycles() - start;
    if report.recovered.is_none() {
        return Err(AttackError::NotFound);
    }
    Ok(report)
}

pub fn score_direct_map(recovered: Option<VirtualAddress>, layout: &KernelLayout) -> Confusion {
    match layout.direct_map_base {
        Some(truth) => score_single(recovered, truth),
        None => Confusion { fp: recovered.is_some() as u64, tn: recovered.is_none() as u64, ..Default::default() },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::addrspace::OsProfile;
    use crate::attacks::System;
    use crate::uarch::MicroarchProfile;

    #[test]
    fn recovers_base_over_seeds() {
        for seed in 0..3 {
            let mut sys = System::boot_default(MicroarchProfile::skylake(), OsProfile::Linux, seed).unwrap();
            let r = find_direct_map(&mut sys.core, &sys.bouncer).unwrap();
            assert_eq!(r.recovered, sys.layout.direct_map_base);
            assert_eq!(score_direct_map(r.recovered, &sys.layout).f1(), 1.0);
        }
    }

    #[test]
    fn single_candidate_range() {
        let mut sys = System::boot_default(MicroarchProfile::skylake(), OsProfile::Linux, 4).unwrap();
        let base = sys.layout.direct_map_base.unwrap();
        let opts = DirectMapOptions { start: base, candidates: 1, ..Default::default() };
        let r = find_direct_map_with(&mut sys.core, &sys.bouncer, opts).unwrap();
        assert_eq!((r.recovered, r.candidates_tested), (Some(base), 1));
    }

    #[test]
    fn windows_has_no_direct_map() {
        let mut sys = System::boot_default(MicroarchProfile::skylake(), OsProfile::Windows, 4).unwrap();
        let opts = DirectMapOptions { candidates: 4096, ..Default::default() };
        assert!(matches!(find_direct_map_with(&mut sys.core, &sys.bouncer, opts), Err(AttackError::NotFound)));
    }
}
