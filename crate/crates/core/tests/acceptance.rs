//! Acceptance criteria AC1-AC10. Runs as a plain binary so that the verdict
//! lines are always printed; exits non-zero if any criterion fails.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use storebounce::addrspace::{AddressSpace, PageFlags, VirtualAddress};
use storebounce::attacks::*;
use storebounce::harness::{oracle_mapped_space, run_scenario, to_csv, Confusion, Scenario, ScenarioConfig};
use storebounce::primitives::{Bouncer, FetchClass, ProbeArray};
use storebounce::transient::{with_window, Suppression};
use storebounce::uarch::{Core, LoadSource, MicroarchProfile, Mode, TlbKind, VALID_SIZES};
use storebounce::OsProfile;

type Verdict = (bool, String);

fn main() {
    let checks: [(&str, fn() -> Verdict); 10] = [
        ("AC1 KASLR exactness", ac1_kaslr),
        ("AC2 direct-map exactness", ac2_direct_map),
        ("AC3 Fetch+Bounce trichotomy", ac3_trichotomy),
        ("AC4 Data Bounce soundness", ac4_soundness),
        ("AC5 Speculative Fetch+Bounce", ac5_spectre),
        ("AC6 profile separation", ac6_profiles),
        ("AC7 TSX atomicity", ac7_tsx),
        ("AC8 module fingerprinting", ac8_modules),
        ("AC9 activity monitoring", ac9_monitor),
        ("AC10 determinism", ac10_determinism),
    ];
    let started = Instant::now();
    let verdicts: Vec<(&str, Verdict, f64)> = std::thread::scope(|s| {
        let handles: Vec<_> = checks
            .iter()
            .map(|&(name, f)| {
                s.spawn(move || {
                    let t = Instant::now();
                    let v = f();
                    (name, v, t.elapsed().as_secs_f64())
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("criterion panicked")).collect()
    });
    let mut failed = 0;
    for (name, (ok, detail), secs) in &verdicts {
        println!("{} {name}: {detail} [{secs:.1}s]", if *ok { "PASS" } else { "FAIL" });
        failed += !ok as usize;
    }
    println!("acceptance: {}/{} passed in {:.1}s", verdicts.len() - failed, verdicts.len(), started.elapsed().as_secs_f64());
    if failed > 0 {
        std::process::exit(1);
    }
}

const USER_PAGE: VirtualAddress = VirtualAddress(0x0000_2000_0000_0000);

// ---- AC1 ----

fn kaslr_cells(os: OsProfile) -> (u64, u64, Confusion, u64) {
    let (mut exact, mut total, mut worst) = (0, 0, 0);
    let mut conf = Confusion::default();
    for seed in 0..10 {
        let mut sys = System::boot_default(MicroarchProfile::skylake(), os, 1000 + seed).unwrap();
        for _ in 0..100 {
            let r = break_kaslr(&mut sys.core, &sys.bouncer, os).ok();
            let recovered = r.as_ref().and_then(|r| r.recovered);
            worst = worst.max(r.as_ref().map_or(u64::MAX, |r| r.candidates_tested));
            exact += (recovered == Some(sys.layout.kernel_base)) as u64;
            total += 1;
            conf = conf.merge(score_kaslr(recovered, &sys.layout));
        }
    }
    (exact, total, conf, worst)
}

fn ac1_kaslr() -> Verdict {
    let (le, lt, lc, lw) = kaslr_cells(OsProfile::Linux);
    let (we, wt, wc, ww) = kaslr_cells(OsProfile::Windows);
    let ok = le == lt && we == wt && lc.f1() == 1.0 && wc.f1() == 1.0 && lw <= 512 && ww <= 8192;
    (ok, format!("linux {le}/{lt} f1={} max candidates {lw}; windows {we}/{wt} f1={} max candidates {ww}", lc.f1(), wc.f1()))
}

// ---- AC2 ----

fn ac2_direct_map() -> Verdict {
    let mut conf = Confusion::default();
    let mut retries = 0;
    for seed in 0..10 {
        let mut sys = System::boot_default(MicroarchProfile::skylake(), OsProfile::Linux, 2000 + seed).unwrap();
        let r = find_direct_map(&mut sys.core, &sys.bouncer).ok();
        retries = r.as_ref().map_or(0, |r| r.retries_per_candidate);
        conf = conf.merge(score_direct_map(r.and_then(|r| r.recovered), &sys.layout));
    }
    (conf.f1() == 1.0 && retries == 3, format!("10 layouts, {retries} retries/candidate, tp={} fp={} fn={} f1={}", conf.tp, conf.fp, conf.fn_, conf.f1()))
}

// ---- AC3 ----

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Placement {
    InTlb,
    MappedCold,
    Unmapped,
}

fn ac3_trichotomy() -> Verdict {
    let mut bad = 0;
    let mut counts: BTreeMap<(&str, &str, Placement), u64> = BTreeMap::new();
    for profile in [MicroarchProfile::skylake(), MicroarchProfile::pentium4()] {
        let name = if profile.wtf_enabled { "skylake" } else { "pentium4" };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut core = Core::new(profile, AddressSpace::new(), 3);
        core.install_eviction_region(TlbKind::Data, DTLB_EVICTION_BASE).unwrap();
        core.install_eviction_region(TlbKind::Instruction, ITLB_EVICTION_BASE).unwrap();
        let bouncer = Bouncer::new(ProbeArray::map(&mut core, PROBE_BASE).unwrap());
        let mut used = BTreeSet::new();
        for _ in 0..10_000 {
            // Pages drawn from the kernel half and from user space.
            let vpn = loop {
                let v = if rng.gen_bool(0.5) {
                    VirtualAddress(0xffff_a000_0000_0000).vpn() + rng.gen_range(0..1u64 << 30)
                } else {
                    VirtualAddress(0x0000_4000_0000_0000).vpn() + rng.gen_range(0..1u64 << 30)
                };
                if used.insert(v) {
                    break v;
                }
            };
            let p = VirtualAddress::from_vpn(vpn).add(rng.gen_range(0..4096));
            let placement = [Placement::InTlb, Placement::MappedCold, Placement::Unmapped][rng.gen_range(0..3)];
            let kind = if rng.gen_bool(0.5) { TlbKind::Data } else { TlbKind::Instruction };
            let flags = if vpn >> 35 != 0 { PageFlags::KERNEL_RX } else { PageFlags::USER_RW };
            if placement != Placement::Unmapped {
                core.map_region(VirtualAddress::from_vpn(vpn), 1, flags).unwrap();
            }
            core.tlb_evict_vpn(TlbKind::Data, vpn).unwrap();
            core.tlb_evict_vpn(TlbKind::Instruction, vpn).unwrap();
            if placement == Placement::InTlb {
                core.with_mode(Mode::Kernel, |c| match kind {
                    TlbKind::Data => c.load_issue(VirtualAddress::from_vpn(vpn), 1).map(|_| ()),
                    TlbKind::Instruction => c.fetch_issue(p).map(|_| ()),
                })
                .unwrap();
            }
            let class = match kind {
                TlbKind::Data => bouncer.fetch_bounce(&mut core, p).unwrap(),
                TlbKind::Instruction => bouncer.fetch_bounce_itlb(&mut core, p).unwrap(),
            };
            let ok = match placement {
                Placement::InTlb => class.retry == 0 && class.class == FetchClass::TlbHit,
                Placement::MappedCold => class.retry == 1 && class.class == FetchClass::TlbMiss,
                Placement::Unmapped => class.retry >= 2 && class.class == FetchClass::Invalid,
            };
            bad += !ok as u64;
            *counts.entry((name, if kind == TlbKind::Data { "dtlb" } else { "itlb" }, placement)).or_default() += 1;
        }
    }
    let cells = counts.len();
    (bad == 0 && cells == 12, format!("2 profiles x 10^4 placements, {cells}/12 cells covered, {bad} misclassified"))
}

// ---- AC4 ----

fn ac4_soundness() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut space = AddressSpace::new();
    let flag_choices = [PageFlags::USER_RW, PageFlags::USER_RO, PageFlags::KERNEL_RW, PageFlags::KERNEL_RX, PageFlags::PROTECTED];
    let bases = [0x0000_3000_0000_0000u64, 0xffff_b000_0000_0000];
    let mut mapped = 0;
    let mut probes: Vec<VirtualAddress> = Vec::new();
    let mut cursor = [0u64; 2];
    while mapped < 10_000 {
        let half = rng.gen_range(0..2);
        let gap = rng.gen_range(1..40);
        let run = rng.gen_range(1..60);
        let start = VirtualAddress(bases[half]).add_pages(cursor[half] + gap);
        for g in 0..gap {
            probes.push(VirtualAddress(bases[half]).add_pages(cursor[half] + g));
        }
        space.map_region(start, run, flag_choices[rng.gen_range(0..flag_choices.len())]).unwrap();
        probes.extend((0..run).map(|i| start.add_pages(i)));
        cursor[half] += gap + run;
        mapped += run;
    }
    let oracle = oracle_mapped_space(&space);
    let mut core = Core::new(MicroarchProfile::skylake(), space, 4);
    let bouncer = Bouncer::new(ProbeArray::map(&mut core, PROBE_BASE).unwrap());
    let mut bounced = BTreeSet::new();
    for p in &probes {
        if bouncer.data_bounce(&mut core, *p).unwrap().bounced {
            bounced.insert(p.vpn());
        }
    }
    let fp = bounced.difference(&oracle).count();
    let fn_ = oracle.difference(&bounced).count();

    let noncanonical: Vec<VirtualAddress> = (0..1000)
        .map(|_| VirtualAddress(rng.gen_range(0x0000_8000_0000_0000u64..0xffff_8000_0000_0000) & !0xfff))
        .collect();
    assert!(noncanonical.iter().all(|a| !a.is_canonical()));
    let nc_bounced = noncanonical.iter().filter(|&&a| bouncer.data_bounce(&mut core, a).unwrap().bounced).count();
    let ok = fp == 0 && fn_ == 0 && nc_bounced == noncanonical.len() && oracle.len() >= 10_000;
    (ok, format!("{} probes over {} mapped pages: fp={fp} fn={fn_}; non-canonical {nc_bounced}/{} bounced", probes.len(), oracle.len(), noncanonical.len()))
}

// ---- AC5 ----

fn leak(secret: &[u8], p: f64, repeats: usize, seed: u64) -> Vec<Option<u8>> {
    let mut sys = System::boot_default(MicroarchProfile::skylake(), OsProfile::Linux, seed).unwrap();
    let (mut g, range) = install_gadget(&mut sys.core, secret, p).unwrap();
    spectre_leak(&mut sys.core, &mut g, &sys.bouncer, range, repeats).unwrap()
}

fn ac5_spectre() -> Verdict {
    let all: Vec<u8> = (0..=255).collect();
    let identity = leak(&all, 1.0, 3, 50).iter().zip(&all).all(|(g, w)| *g == Some(*w));

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let secret: Vec<u8> = (0..128).map(|_| rng.gen()).collect();
    let exact = leak(&secret, 1.0, 3, 51).iter().zip(&secret).all(|(g, w)| *g == Some(*w));

    let (mut right, mut total) = (0, 0);
    for seed in 0..10 {
        let secret: Vec<u8> = (0..128).map(|_| rng.gen()).collect();
        let got = leak(&secret, 0.5, 8, 60 + seed);
        right += got.iter().zip(&secret).filter(|(g, w)| **g == Some(**w)).count();
        total += secret.len();
    }
    let acc = right as f64 / total as f64;
    // Each byte is lost only if all 8 mispredictions fail.
    let q = 0.5f64.powi(8);
    let sigma = (q * (1.0 - q) / total as f64).sqrt();
    let floor = 0.99 - 3.0 * sigma;
    let ok = identity && exact && acc >= floor;
    (ok, format!("256-value sweep {identity}; 128-byte secret exact {exact}; p=0.5 x8 accuracy {acc:.4} (floor {floor:.4})"))
}

// ---- AC6 ----

/// Store `size` bytes at offset `o` of a user page, then in a window load one
/// byte at every offset near it from an unmapped page. Returns offsets that
/// received forwarded data.
fn wtf_battery(profile: MicroarchProfile, trials: &[(usize, u64)]) -> (Vec<(usize, u64, Vec<u64>)>, u64) {
    let mut space = AddressSpace::new();
    space.map_region(USER_PAGE, 1, PageFlags::USER_RW).unwrap();
    let mut core = Core::new(profile, space, 6);
    core.load_issue(USER_PAGE, 1).unwrap();
    let fault_page = VirtualAddress(0x0000_5000_0000_0000);
    let mut out = Vec::new();
    for &(size, o) in trials {
        let lo = o.saturating_sub(40);
        let hi = (o + size as u64 + 40).min(4096);
        let mut hits = Vec::new();
        for l in lo..hi {
            core.store_issue(USER_PAGE.add(o), &vec![0xa5; size]).unwrap();
            let (r, _) = with_window(&mut core, Suppression::TsxLike, |c| c.load_issue(fault_page.add(l), 1).unwrap()).unwrap();
            if r.source == LoadSource::WtForward {
                hits.push(l);
            }
            core.drain_store_buffer();
        }
        out.push((size, o, hits));
    }
    (out, core.stats().wt_forwards)
}

fn data_bounce_suite(profile: MicroarchProfile) -> bool {
    let mut sys = System::boot_default(profile, OsProfile::Linux, 66).unwrap();
    let b = &sys.bouncer;
    let c = &mut sys.core;
    let base = sys.layout.kernel_base;
    let checks = [
        b.data_bounce(c, base).unwrap().bounced,
        b.data_bounce(c, base.add_pages(17)).unwrap().bounced,
        !b.data_bounce(c, base.add_pages(sys.layout.kernel_size_pages)).unwrap().bounced,
        b.data_bounce(c, VirtualAddress(0x0000_9000_0000_0000)).unwrap().bounced,
        b.data_bounce(c, sys.layout.direct_map_base.unwrap()).unwrap().bounced,
        !b.data_bounce(c, VirtualAddress(0xffff_e000_0000_0000)).unwrap().bounced,
    ];
    let kaslr = break_kaslr(c, b, OsProfile::Linux).ok().and_then(|r| r.recovered) == Some(base);
    checks.iter().all(|&x| x) && kaslr
}

fn ac6_profiles() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut trials = Vec::new();
    for &size in VALID_SIZES.iter() {
        for _ in 0..8 {
            trials.push((size, rng.gen_range(0..=4096 - size as u64)));
        }
        trials.push((size, 0));
        trials.push((size, 4096 - size as u64));
    }
    let p4_suite = data_bounce_suite(MicroarchProfile::pentium4());
    let (_, p4_wtf) = wtf_battery(MicroarchProfile::pentium4(), &trials);
    let (sky, sky_wtf) = wtf_battery(MicroarchProfile::skylake(), &trials);
    let boundary_exact = sky.iter().all(|(size, o, hits)| *hits == (*o..*o + *size as u64).collect::<Vec<_>>());
    let ok = p4_suite && p4_wtf == 0 && boundary_exact && sky_wtf > 0;
    (ok, format!("pentium4 bounce suite {p4_suite}, WtForward events {p4_wtf}; skylake {} trials boundary-exact {boundary_exact} ({sky_wtf} events)", sky.len()))
}

// ---- AC7 ----

fn ac7_tsx() -> Verdict {
    let mut sys = System::boot_default(MicroarchProfile::skylake(), OsProfile::Linux, 77).unwrap();
    let base = sys.layout.direct_map_base.unwrap();
    let candidates: Vec<VirtualAddress> = (0..12).map(|i| base.add_pages(i)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut exact, mut rolled_back) = (0, 0);
    for i in 0..100 {
        let k = i % 11;
        let mut order = candidates.clone();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let ops = order
            .iter()
            .take(k + 1)
            .map(|&a| if rng.gen_bool(0.5) { TxOp::Store(a.add(rng.gen_range(0..4096)), rng.gen_range(1..=255)) } else { TxOp::Load(a) })
            .collect();
        let script = TxScript { ops, abort_after: Some(k) };
        let before: Vec<Vec<u8>> = candidates.iter().map(|c| sys.core.peek(*c, 4096).unwrap()).collect();
        let got = tsx_atomicity_probe(&mut sys.core, &sys.bouncer, &script, &candidates).unwrap();
        sys.core.drain_store_buffer();
        let after: Vec<Vec<u8>> = candidates.iter().map(|c| sys.core.peek(*c, 4096).unwrap()).collect();
        exact += (got == script.touched_vpns() && got.len() == k) as u32;
        rolled_back += (before == after) as u32;
    }
    (exact == 100 && rolled_back == 100, format!("k=0..10: {exact}/100 scripts exact, memory rolled back in {rolled_back}/100"))
}

// ---- AC8 ----

fn ac8_modules() -> Verdict {
    let table = default_module_table();
    let mut lines = Vec::new();
    let mut ok = true;
    for &noise in &[0.0, 0.01, 0.02, 0.03, 0.04, 0.05] {
        let mut conf = Confusion::default();
        let mut sizes_exact = true;
        for seed in 0..3 {
            let mut sys = System::boot(MicroarchProfile::skylake(), OsProfile::Linux, 800 + seed, &table).unwrap();
            sys.core.set_noise(noise);
            let scan = enumerate_modules(&mut sys.core, &sys.bouncer, OsProfile::Linux).unwrap();
            let mut got: Vec<u64> = scan.extents.iter().map(|e| e.size_pages).collect();
            let mut want: Vec<u64> = sys.layout.module_extents.iter().map(|m| m.size_pages).collect();
            got.sort_unstable();
            want.sort_unstable();
            sizes_exact &= got == want;
            conf = conf.merge(score_classification(&classify_modules(&scan.extents, &table), &sys.layout));
        }
        ok &= conf.f1() >= 0.95 && (noise > 0.0 || (sizes_exact && conf.f1() == 1.0));
        lines.push(format!("noise {noise}: f1={:.3} sizes exact {sizes_exact}", conf.f1()));
    }
    (ok, format!("26 modules, <=32 repeats/page; {}", lines.join("; ")))
}

// ---- AC9 ----

fn monitor_rows(target: &str, script: ActivityScript, periods: usize) -> (Vec<usize>, Vec<usize>) {
    let mut cfg = ScenarioConfig::new(Scenario::Monitor).with_seed(90);
    cfg.monitor_target = Some(target.to_string());
    cfg.monitor_script = Some(script.clone());
    cfg.periods = Some(periods);
    let r = run_scenario(&cfg).unwrap();
    let detected = r.rows.iter().filter(|row| row.outcome == "tp" || row.outcome == "fp" || detected_edge(row, &script, target)).map(|row| row.candidate.parse().unwrap()).collect();
    (detected, script.active_periods(target))
}

/// An edge row was detected when its period is not active.
fn detected_edge(row: &storebounce::TraceRow, script: &ActivityScript, target: &str) -> bool {
    row.outcome == "edge" && !script.active_periods(target).contains(&row.candidate.parse().unwrap())
}

fn within_one(detected: &[usize], active: &[usize]) -> bool {
    let near = |p: usize| active.iter().any(|&a| a.abs_diff(p) <= 1);
    let interior = |a: usize| active.contains(&(a.wrapping_sub(1))) && active.contains(&(a + 1));
    detected.iter().all(|&p| near(p)) && active.iter().filter(|&&a| interior(a)).all(|a| detected.contains(a))
}

fn ac9_monitor() -> Verdict {
    let bt = ActivityScript::burst("bluetooth", 10..20, 4).then(ActivityScript::burst("bluetooth", 30..34, 8));
    let (d1, a1) = monitor_rows("bluetooth", bt, 40);
    let mouse = ActivityScript::burst("usbhid", 10..21, 3);
    let (d2, a2) = monitor_rows("usbhid", mouse, 30);
    let (d3, _) = monitor_rows("bluetooth", ActivityScript::quiet(), 100);
    let ok = within_one(&d1, &a1) && within_one(&d2, &a2) && d3.is_empty();
    (ok, format!("bluetooth bursts detected {d1:?}; usbhid burst detected {d2:?}; quiet 100 periods: {} detections", d3.len()))
}

// ---- AC10 ----

fn ac10_determinism() -> Verdict {
    let mut cfgs: Vec<ScenarioConfig> = Vec::new();
    for s in [Scenario::Kaslr, Scenario::Directmap, Scenario::Modules, Scenario::Enclave, Scenario::Tsx, Scenario::Monitor, Scenario::SpectreLeak, Scenario::Sweep] {
        let mut c = ScenarioConfig::new(s).with_seed(10);
        c.periods = Some(6);
        c.samples_per_period = Some(1000);
        c.secret_len = Some(24);
        c.mispredict_p = Some(0.7);
        if s == Scenario::Modules {
            c.noise_p = Some(0.02);
        }
        cfgs.push(c);
    }
    let mut windows = ScenarioConfig::new(Scenario::Kaslr).with_seed(11);
    windows.os = Some(OsProfile::Windows);
    windows.full_scan = true;
    cfgs.push(windows);
    let mut same = 0;
    for c in &cfgs {
        let a = to_csv(&run_scenario(c).unwrap().rows);
        let b = to_csv(&run_scenario(c).unwrap().rows);
        same += (a == b && a.lines().count() > 1) as usize;
    }
    (same == cfgs.len(), format!("{same}/{} configs byte-identical across two runs", cfgs.len()))
}
