use std::collections::{BTreeMap, VecDeque};

use serde::Serialize;

use crate::addrspace::{KernelLayout, ModuleSpec, OsProfile, VirtualAddress, MODULE_REGION_PAGES};
use crate::error::AttackError;
use crate::harness::Confusion;
use crate::primitives::Bouncer;
use crate::uarch::Core;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EnumerateOptions {
    pub region: VirtualAddress,
    pub pages: u64,
    /// A page is decided once one verdict leads the other by this many bounces.
    pub margin: u32,
    /// Upper bound on bounces per page during verification.
    pub max_repeats: u32,
}

impl EnumerateOptions {
    pub fn for_os(os: OsProfile) -> Self {
        Self { region: os.module_region(), pages: MODULE_REGION_PAGES, margin: 5, max_repeats: 32 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct FoundExtent {
    pub start: VirtualAddress,
    pub size_pages: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ModuleScan {
    pub extents: Vec<FoundExtent>,
    pub candidates_tested: u64,
    /// Total bounces, first pass included.
    pub bounces: u64,
    pub simulated_cycles: u64,
}

pub fn enumerate_modules(core: &mut Core, bouncer: &Bouncer, os: OsProfile) -> Result<ModuleScan, AttackError> {
    enumerate_modules_with(core, bouncer, EnumerateOptions::for_os(os))
}

/// One bounce per page finds candidates; each candidate is then confirmed by
/// a sequential vote, and confirmed pages pull their neighbours in so that a
/// page missed by the first pass is still checked.
pub fn enumerate_modules_with(
    core: &mut Core,
    bouncer: &Bouncer,
    opts: EnumerateOptions,
) -> Result<ModuleScan, AttackError> {
    let start = core.cycles();
    let base = opts.region.vpn();
    let mut scan = ModuleScan { candidates_tested: opts.pages, ..Default::default() };
    let mut queue = VecDeque::new();
    for i in 0..opts.pages {
        if bouncer.bounced(core, VirtualAddress::from_vpn(base + i))? {
            queue.push_back(i);
        }
    }
    scan.bounces = opts.pages;

    let mut decided: BTreeMap<u64, bool> = BTreeMap::new();
    while let Some(i) = queue.pop_front() {
        if decided.contains_key(&i) {
            continue;
        }
        let (mapped, used) = vote(core, bouncer, VirtualAddress::from_vpn(base + i), opts)?;
        scan.bounces += used as u64;
        decided.insert(i, mapped);
        if mapped {
            for n in [i.wrapping_sub(1), i + 1] {
                if n < opts.pages && !decided.contains_key(&n) {
                    queue.push_back(n);
                }
            }
        }
    }

    let mut run: Option<FoundExtent> = None;
    for i in decided.into_iter().filter(|&(_, m)| m).map(|(i, _)| i) {
        match run.as_mut() {
            Some(r) if r.start.vpn() - base + r.size_pages == i => r.size_pages += 1,
            _ => {
                scan.extents.extend(run.take());
                run = Some(FoundExtent { start: VirtualAddress::from_vpn(base + i), size_pages: 1 });
            }
        }
    }
    scan.extents.extend(run);
    scan.simulated_cycles = core.cycles() - start;
    Ok(scan)
}

fn vote(core: &mut Core, bouncer: &Bouncer, p: VirtualAddress, opts: EnumerateOptions) -> Result<(bool, u32), AttackError> {
    let (mut yes, mut no) = (0u32, 0u32);
    while yes.abs_diff(no) < opts.margin && yes + no < opts.max_repeats {
        if bouncer.bounced(core, p)? {
            yes += 1;
        } else {
            no += 1;
        }
    }
    Ok((yes > no, yes + no))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ClassifiedExtent {
    pub name: Option<String>,
    pub extent: FoundExtent,
}

/// Names every extent whose size appears exactly once in the public table.
pub fn classify_modules(extents: &[FoundExtent], public_table: &[ModuleSpec]) -> Vec<ClassifiedExtent> {
    let mut by_size: BTreeMap<u64, Vec<&str>> = BTreeMap::new();
    for m in public_table {
        by_size.entry(m.size_pages).or_default().push(&m.name);
    }
    extents
        .iter()
        .map(|e| ClassifiedExtent {
            name: match by_size.get(&e.size_pages).map(Vec::as_slice) {
                Some([only]) => Some(only.to_string()),
                _ => None,
            },
            extent: *e,
        })
        .collect()
}

/// Confusion over named assignments. A name is right when the extent is
/// exactly that module; every uniquely sized module not named right is a miss.
pub fn score_classification(classified: &[ClassifiedExtent], layout: &KernelLayout) -> Confusion {
    let mut sizes: BTreeMap<u64, usize> = BTreeMap::new();
    for m in &layout.module_extents {
        *sizes.entry(m.size_pages).or_default() += 1;
    }
    let mut c = Confusion::default();
    let mut named_right = 0;
    for e in classified {
        let Some(name) = &e.name else { continue };
        let right = layout
            .module(name)
            .is_some_and(|m| m.start == e.extent.start && m.size_pages == e.extent.size_pages);
        if right {
            c.tp += 1;
            named_right += 1;
        } else {
            c.fp += 1;
        }
    }
    let nameable = layout.module_extents.iter().filter(|m| sizes[&m.size_pages] == 1).count() as u64;
    c.fn_ = nameable - named_right;
    c
}
