use crate::addrspace::{KernelLayout, OsProfile, VirtualAddress};
use crate::error::AttackError;
use crate::harness::Confusion;
use crate::primitives::Bouncer;
use crate::uarch::Core;

use super::{majority_bounce, ProbeRecord, SearchReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KaslrOptions {
    /// Bounces per candidate; majority wins.
    pub retries: usize,
    /// Keep scanning after the first hit.
    pub full_scan: bool,
    /// Slots probed past the hit to show the image spans them.
    pub trailing: u64,
    /// Search only the lowest this many slots.
    pub max_candidates: Option<u64>,
}

impl Default for KaslrOptions {
    fn default() -> Self {
        Self { retries: 1, full_scan: false, trailing: 2, max_candidates: None }
    }
}

pub fn break_kaslr(core: &mut Core, bouncer: &Bouncer, os: OsProfile) -> Result<SearchReport, AttackError> {
    break_kaslr_with(core, bouncer, os, KaslrOptions::default())
}

/// Bounces off the first page of every 2 MiB slot, lowest first.
pub fn break_kaslr_with(
    core: &mut Core,
    bouncer: &Bouncer,
    os: OsProfile,
    opts: KaslrOptions,
) -> Result<SearchReport, AttackError> {
    let start = core.cycles();
    let mut report = SearchReport { retries_per_candidate: opts.retries, ..Default::default() };
    let slots = opts.max_candidates.map_or(os.kernel_slots(), |m| m.min(os.kernel_slots()));
    let mut k = 0;
    while k < slots {
        let candidate = os.kernel_candidate(k);
        let record = probe(core, bouncer, candidate, opts.retries, false)?;
        report.candidates_tested += 1;
        report.probes.push(record);
        k += 1;
        if record.positive && report.recovered.is_none() {
            report.recovered = Some(candidate);
            if !opts.full_scan {
                for j in k..(k + opts.trailing).min(os.kernel_slots()) {
                    report.probes.push(probe(core, bouncer, os.kernel_candidate(j), opts.retries, true)?);
                }
                break;
            }
        }
    }
    report.simulated_cycles = core.cycles() - start;
    if report.recovered.is_none() {
        return Err(AttackError::NotFound);
    }
    Ok(report)
}

pub(crate) fn probe(
    core: &mut Core,
    bouncer: &Bouncer,
    candidate: VirtualAddress,
    retries: usize,
    trailing: bool,
) -> Result<ProbeRecord, AttackError> {
    let before = core.cycles();
    let (positive, used) = majority_bounce(core, bouncer, candidate, retries)?;
    Ok(ProbeRecord { candidate, positive, retry: used - 1, cycles: core.cycles() - before, trailing })
}

/// One run scores as a single decision: right base, wrong base, or nothing.
pub fn score_kaslr(recovered: Option<VirtualAddress>, layout: &KernelLayout) -> Confusion {
    score_single(recovered, layout.kernel_base)
}

pub(crate) fn score_single(recovered: Option<VirtualAddress>, truth: VirtualAddress) -> Confusion {
    match recovered {
        Some(r) if r == truth => Confusion { tp: 1, ..Default::default() },
        Some(_) => Confusion { fp: 1, fn_: 1, ..Default::default() },
        None => Confusion { fn_: 1, ..Default::default() },
    }
}
