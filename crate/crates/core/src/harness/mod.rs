//! Scenario runner, metrics and trace emission.

mod config;
mod metrics;
mod trace;

pub use config::{Scenario, ScenarioConfig};
pub use metrics::{Confusion, MetricsReport, SweepRun};
pub use trace::{emit_trace, parse_csv, render, to_csv, to_json, TraceFormat, TraceRow, CSV_HEADER};

use std::collections::BTreeSet;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::addrspace::{AddressSpace, KernelLayout, VirtualAddress, DIRECT_MAP_MATERIALIZED_PAGES};
use crate::attacks::{
    break_kaslr_with, classify_modules, default_module_table, detect_protected_pages, enumerate_modules, find_direct_map_with,
    install_gadget, monitor_activity, DirectMapOptions, spectre_leak, tsx_atomicity_probe, ActivityScript, EnclaveSpec, KaslrOptions,
    KernelActivity, MonitorOptions, SearchReport, System, TxOp, TxScript, ENCLAVE_HOST_BASE,
};
use crate::error::{ConfigError, HarnessError};
use crate::uarch::MicroarchProfile;

const HARNESS_SALT: u64 = 0x5eed_0f_ba5e;
pub const MONITOR_REFERENCE: &str = "i2c_i801";
pub const MONITOR_TARGET: &str = "bluetooth";
pub const MONITOR_TARGET_PAGES: u64 = 8;
pub const ENCLAVE_RANGE_PAGES: u64 = 512;
pub const TSX_CANDIDATES: u64 = 12;

/// Every mapped vpn of a layout, enumerated straight from its fields.
pub fn oracle_mapped_set(layout: &KernelLayout) -> BTreeSet<u64> {
    let mut set = BTreeSet::new();
    let mut add = |start: VirtualAddress, pages: u64| set.extend((0..pages).map(|i| start.vpn() + i));
    add(layout.kernel_base, layout.kernel_size_pages);
    if let Some(base) = layout.direct_map_base {
        add(base, DIRECT_MAP_MATERIALIZED_PAGES);
    }
    for m in &layout.module_extents {
        add(m.start, m.size_pages);
    }
    set
}

/// Every vpn with a present entry in an arbitrary space.
pub fn oracle_mapped_space(space: &AddressSpace) -> BTreeSet<u64> {
    space.entries().filter(|(_, e)| e.flags.present).map(|(vpn, _)| vpn).collect()
}

struct Cell {
    rows: Vec<TraceRow>,
    candidates: u64,
    cycles: u64,
}

pub fn run_scenario(cfg: &ScenarioConfig) -> Result<MetricsReport, HarnessError> {
    cfg.validate()?;
    let profile = cfg.resolve_profile()?;
    let started = Instant::now();
    let mut report = if cfg.scenario == Scenario::Sweep {
        run_sweep(cfg, &profile)?
    } else {
        let cell = run_cell(cfg, cfg.scenario, cfg.seed, &profile)?;
        let mut r = MetricsReport::from_rows(cfg.scenario.name(), &profile.name, cfg.seed, cell.rows);
        r.candidates_tested = cell.candidates;
        r.simulated_cycles = cell.cycles;
        r
    };
    report.wall_seconds = started.elapsed().as_secs_f64();
    if let Some(out) = &cfg.out {
        emit_trace(&report, cfg.format, out)?;
    }
    Ok(report)
}

/// Independent seeds run on their own threads; rows are reassembled in seed order.
fn run_sweep(cfg: &ScenarioConfig, profile: &MicroarchProfile) -> Result<MetricsReport, HarnessError> {
    let inner = cfg.sweep_of.unwrap_or(Scenario::Kaslr);
    let seeds: Vec<u64> = (0..cfg.sweep_seeds).map(|i| cfg.seed + i).collect();
    let cells: Vec<Result<Cell, HarnessError>> = std::thread::scope(|s| {
        let handles: Vec<_> = seeds.iter().map(|&seed| s.spawn(move || run_cell(cfg, inner, seed, profile))).collect();
        handles.into_iter().map(|h| h.join().expect("sweep worker panicked")).collect()
    });
    let mut runs = Vec::new();
    let mut rows = Vec::new();
    let (mut candidates, mut cycles) = (0, 0);
    for (seed, cell) in seeds.into_iter().zip(cells) {
        let cell = cell?;
        let c = Confusion::from_rows(&cell.rows);
        runs.push(SweepRun {
            seed,
            f1: c.f1(),
            precision: c.precision(),
            recall: c.recall(),
            candidates_tested: cell.candidates,
            simulated_cycles: cell.cycles,
        });
        candidates += cell.candidates;
        cycles += cell.cycles;
        rows.extend(cell.rows);
    }
    let mut report = MetricsReport::from_rows(Scenario::Sweep.name(), &profile.name, cfg.seed, rows);
    report.mean_f1 = Some(runs.iter().map(|r| r.f1).sum::<f64>() / runs.len() as f64);
    report.runs = runs;
    report.candidates_tested = candidates;
    report.simulated_cycles = cycles;
    Ok(report)
}

fn run_cell(cfg: &ScenarioConfig, scenario: Scenario, seed: u64, profile: &MicroarchProfile) -> Result<Cell, HarnessError> {
    let mut sys = System::boot_default(profile.clone(), cfg.os(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ HARNESS_SALT);
    let mut cell = Cell { rows: Vec::new(), candidates: 0, cycles: 0 };
    let row = |candidate: String, outcome: &str, retry: u64, cycles: u64| TraceRow {
        scenario: scenario.name().to_string(),
        seed,
        candidate,
        outcome: outcome.to_string(),
        retry,
        cycles,
    };
    let start_cycles = sys.core.cycles();
    match scenario {
        Scenario::Kaslr | Scenario::Directmap => {
            for _ in 0..cfg.repeats.unwrap_or(1) {
                let (report, truth) = if scenario == Scenario::Kaslr {
                    let opts =
                        KaslrOptions { full_scan: cfg.full_scan, max_candidates: cfg.max_candidates, ..Default::default() };
                    (break_kaslr_with(&mut sys.core, &sys.bouncer, cfg.os(), opts)?, sys.layout.kernel_base)
                } else {
                    let truth = sys.layout.direct_map_base.ok_or_else(|| ConfigError::Invalid("no direct map".into()))?;
                    let mut opts = DirectMapOptions::default();
                    opts.candidates = cfg.max_candidates.map_or(opts.candidates, |m| m.min(opts.candidates));
                    (find_direct_map_with(&mut sys.core, &sys.bouncer, opts)?, truth)
                };
                cell.candidates += report.candidates_tested;
                cell.rows.extend(label_search(&report, truth).into_iter().map(|(c, o, r, cy)| row(c, o, r, cy)));
            }
        }
        Scenario::Modules => {
            let table = default_module_table();
            for _ in 0..cfg.repeats.unwrap_or(1) {
                let scan = enumerate_modules(&mut sys.core, &sys.bouncer, cfg.os())?;
                cell.candidates += scan.candidates_tested;
                let named = classify_modules(&scan.extents, &table);
                let mut right = BTreeSet::new();
                for e in &named {
                    let outcome = match &e.name {
                        None => "unnamed",
                        Some(n) => match sys.layout.module(n) {
                            Some(m) if m.start == e.extent.start && m.size_pages == e.extent.size_pages => {
                                right.insert(n.clone());
                                "tp"
                            }
                            _ => "fp",
                        },
                    };
                    cell.rows.push(row(e.extent.start.to_string(), outcome, e.extent.size_pages, 0));
                }
                for m in &sys.layout.module_extents {
                    let unique = table.iter().filter(|t| t.size_pages == m.size_pages).count() == 1;
                    if unique && !right.contains(&m.name) {
                        cell.rows.push(row(m.start.to_string(), "fn", m.size_pages, 0));
                    }
                }
            }
        }
        Scenario::Enclave => {
            let mut pattern = vec![false; ENCLAVE_RANGE_PAGES as usize];
            let len = rng.gen_range(16..128usize);
            let at = rng.gen_range(0..ENCLAVE_RANGE_PAGES as usize - len);
            pattern[at..at + len].iter_mut().for_each(|p| *p = true);
            for p in pattern.iter_mut().skip(at + len) {
                *p = rng.gen_bool(0.25);
            }
            let spec = EnclaveSpec { base: ENCLAVE_HOST_BASE, pattern };
            spec.map(&mut sys.core)?;
            let truth = spec.protected_vpns();
            for i in 0..ENCLAVE_RANGE_PAGES {
                let p = ENCLAVE_HOST_BASE.add_pages(i);
                let before = sys.core.cycles();
                let hit = !detect_protected_pages(&mut sys.core, &sys.bouncer, p, 1)?.is_empty();
                let outcome = confusion_token(hit, truth.contains(&p.vpn()));
                cell.rows.push(row(p.to_string(), outcome, 0, sys.core.cycles() - before));
            }
            cell.candidates = ENCLAVE_RANGE_PAGES;
        }
        Scenario::Tsx => {
            let base = sys.layout.direct_map_base.unwrap_or(sys.layout.kernel_base);
            let candidates: Vec<VirtualAddress> = (0..TSX_CANDIDATES).map(|i| base.add_pages(i)).collect();
            for i in 0..cfg.repeats.unwrap_or(100) {
                let script = tsx_script(&mut rng, &candidates, i % 11, sys.layout.direct_map_base.is_some());
                let truth = script.touched_vpns();
                let before = sys.core.cycles();
                let got = tsx_atomicity_probe(&mut sys.core, &sys.bouncer, &script, &candidates)?;
                let per = (sys.core.cycles() - before) / candidates.len() as u64;
                for c in &candidates {
                    let outcome = confusion_token(got.contains(&c.vpn()), truth.contains(&c.vpn()));
                    cell.rows.push(row(c.to_string(), outcome, i as u64, per));
                }
                cell.candidates += candidates.len() as u64;
            }
        }
        Scenario::Monitor => {
            let target_name = cfg.monitor_target.as_deref().unwrap_or(MONITOR_TARGET);
            let target = sys
                .layout
                .module(target_name)
                .ok_or_else(|| ConfigError::Invalid(format!("unknown module {target_name:?}")))?
                .clone();
            let reference = sys.layout.module(MONITOR_REFERENCE).expect("reference module is in the default table").start;
            let targets: Vec<VirtualAddress> =
                (0..target.size_pages.min(MONITOR_TARGET_PAGES)).map(|i| target.start.add_pages(i)).collect();
            let script = cfg.monitor_script.clone().unwrap_or_else(|| ActivityScript::burst(target_name, 10..20, 4));
            let activity = KernelActivity::from_script(&script, &sys.layout)?;
            let mut opts = MonitorOptions { periods: cfg.periods.unwrap_or(30), ..Default::default() };
            if let Some(s) = cfg.samples_per_period {
                opts.samples_per_period = s;
            }
            if let Some(b) = cfg.lower_bound {
                opts.lower_bound = b;
            }
            let trace = monitor_activity(&mut sys.core, &sys.bouncer, &targets, reference, &activity, opts)?;
            let active: BTreeSet<usize> = script.active_periods(target_name).into_iter().collect();
            let per = trace.simulated_cycles / opts.periods.max(1) as u64;
            for (p, s) in trace.periods.iter().enumerate() {
                let near = p.checked_sub(1).is_some_and(|q| active.contains(&q)) || active.contains(&(p + 1));
                let outcome = match (s.detected, active.contains(&p)) {
                    (true, false) | (false, true) if near => "edge",
                    (d, t) => confusion_token(d, t),
                };
                cell.rows.push(row(p.to_string(), outcome, s.hits_target, per));
            }
            cell.candidates = (opts.periods * opts.samples_per_period) as u64;
        }
        Scenario::SpectreLeak => {
            let secret: Vec<u8> = match &cfg.secret {
                Some(s) => s.as_bytes().to_vec(),
                None => (0..cfg.secret_len.unwrap_or(128)).map(|_| rng.gen()).collect(),
            };
            let (mut gadget, range) = install_gadget(&mut sys.core, &secret, cfg.mispredict_p.unwrap_or(1.0))?;
            let repeats = cfg.repeats.unwrap_or(3);
            for (index, want) in range.zip(secret) {
                let before = sys.core.cycles();
                let got = spectre_leak(&mut sys.core, &mut gadget, &sys.bouncer, index..index + 1, repeats)?[0];
                let outcome = match got {
                    Some(v) if v == want => "tp",
                    Some(_) => "fp",
                    None => "fn",
                };
                cell.rows.push(row(gadget.data_base.add(index).to_string(), outcome, 0, sys.core.cycles() - before));
                cell.candidates += 1;
            }
        }
        Scenario::Sweep => unreachable!("sweeps are expanded by run_sweep"),
    }
    cell.cycles = sys.core.cycles() - start_cycles;
    Ok(cell)
}

fn confusion_token(claimed: bool, truth: bool) -> &'static str {
    match (claimed, truth) {
        (true, true) => "tp",
        (true, false) => "fp",
        (false, true) => "fn",
        (false, false) => "tn",
    }
}

/// Rows for one base search. The first positive is the answer; later
/// positives are aliases unless they are the real base; a real base the
/// scan never reached is reported as a missed row of its own.
pub fn label_search(report: &SearchReport, truth: VirtualAddress) -> Vec<(String, &'static str, u64, u64)> {
    let mut rows = Vec::with_capacity(report.probes.len() + 1);
    let mut answered = false;
    let mut truth_seen = false;
    for p in &report.probes {
        let is_truth = p.candidate == truth;
        truth_seen |= is_truth;
        let outcome = match (p.positive, answered, is_truth) {
            (true, false, true) => "tp",
            (true, false, false) => "fp",
            (true, true, true) => "fn",
            (true, true, false) => "alias",
            (false, _, true) => "fn",
            (false, _, false) => "tn",
        };
        answered |= p.positive;
        rows.push((p.candidate.to_string(), outcome, p.retry as u64, p.cycles));
    }
    if !truth_seen && report.recovered != Some(truth) {
        rows.push((truth.to_string(), "fn", 0, 0));
    }
    rows
}

/// `k` pages of `candidates` touched in random order, then a few untouched
/// ones that only run if the abort does not happen.
fn tsx_script(rng: &mut ChaCha8Rng, candidates: &[VirtualAddress], k: usize, writable: bool) -> TxScript {
    let mut order: Vec<VirtualAddress> = candidates.to_vec();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), rng);
    let op = |rng: &mut ChaCha8Rng, a: VirtualAddress| {
        if writable && rng.gen_bool(0.5) {
            TxOp::Store(a, rng.gen_range(1..=255))
        } else {
            TxOp::Load(a)
        }
    };
    let ops = order.iter().take(k + 2).map(|&a| op(rng, a)).collect();
    TxScript { ops, abort_after: Some(k) }
}
