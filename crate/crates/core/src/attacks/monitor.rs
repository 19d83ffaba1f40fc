use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::addrspace::{KernelLayout, VirtualAddress};
use crate::error::{AttackError, ConfigError, SimError};
use crate::primitives::{Bouncer, FetchClass};
use crate::uarch::{Core, Mode, TlbKind};

/// One line of an event script: in `period`, the kernel touches the first
/// `pages_touched` pages of `module`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivityEvent {
    pub period: usize,
    pub module: String,
    pub pages_touched: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ActivityScript(pub Vec<ActivityEvent>);

impl ActivityScript {
    pub fn quiet() -> Self {
        Self::default()
    }

    pub fn burst(module: &str, periods: Range<usize>, pages_touched: u64) -> Self {
        Self(periods.map(|period| ActivityEvent { period, module: module.to_string(), pages_touched }).collect())
    }

    pub fn then(mut self, other: ActivityScript) -> Self {
        self.0.extend(other.0);
        self
    }

    pub fn from_json(json: &str) -> Result<Self, ConfigError> {
        Ok(serde_json::from_str(json)?)
    }

    /// Periods in which `module` is touched at all.
    pub fn active_periods(&self, module: &str) -> Vec<usize> {
        let mut p: Vec<usize> =
            self.0.iter().filter(|e| e.module == module && e.pages_touched > 0).map(|e| e.period).collect();
        p.sort_unstable();
        p.dedup();
        p
    }
}

/// The victim side of the monitor: which kernel pages get touched when.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KernelActivity {
    by_period: BTreeMap<usize, Vec<VirtualAddress>>,
}

impl KernelActivity {
    pub fn from_script(script: &ActivityScript, layout: &KernelLayout) -> Result<Self, ConfigError> {
        let mut by_period: BTreeMap<usize, Vec<VirtualAddress>> = BTreeMap::new();
        for e in &script.0 {
            let m = layout.module(&e.module).ok_or_else(|| ConfigError::Invalid(format!("unknown module {:?}", e.module)))?;
            let pages = by_period.entry(e.period).or_default();
            pages.extend((0..e.pages_touched.min(m.size_pages)).map(|i| m.start.add_pages(i)));
        }
        for pages in by_period.values_mut() {
            pages.sort_unstable();
            pages.dedup();
        }
        Ok(Self { by_period })
    }

    pub fn pages(&self, period: usize) -> &[VirtualAddress] {
        self.by_period.get(&period).map(Vec::as_slice).unwrap_or(&[])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MonitorOptions {
    pub periods: usize,
    pub samples_per_period: usize,
    /// A period needs more target hits than this to count.
    pub lower_bound: u64,
    /// Kernel touches of each active page per period.
    pub touches_per_page: usize,
}

impl Default for MonitorOptions {
    fn default() -> Self {
        Self { periods: 100, samples_per_period: 5000, lower_bound: 5, touches_per_page: 50 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct PeriodSample {
    pub hits_target: u64,
    pub hits_reference: u64,
    pub detected: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ActivityTrace {
    pub periods: Vec<PeriodSample>,
    pub simulated_cycles: u64,
}

impl ActivityTrace {
    pub fn detected_periods(&self) -> Vec<usize> {
        self.periods.iter().enumerate().filter(|(_, s)| s.detected).map(|(i, _)| i).collect()
    }
}

/// Samples the targets and the reference page round-robin, switching
/// hyperthread after every sample. Each sample asks both TLBs through
/// Fetch+Bounce and then evicts the page again. The kernel runs on the
/// other hyperthread, spreading its touches evenly over the period.
pub fn monitor_activity(
    core: &mut Core,
    bouncer: &Bouncer,
    targets: &[VirtualAddress],
    reference: VirtualAddress,
    activity: &KernelActivity,
    opts: MonitorOptions,
) -> Result<ActivityTrace, AttackError> {
    let start = core.cycles();
    let mut pages = targets.to_vec();
    pages.push(reference);
    for p in &pages {
        evict(core, *p)?;
    }
    let stride = (opts.samples_per_period / opts.touches_per_page.max(1)).max(1);
    let mut trace = ActivityTrace::default();
    for period in 0..opts.periods {
        let touched = activity.pages(period);
        let (mut hits_target, mut hits_reference) = (0, 0);
        for s in 0..opts.samples_per_period {
            let attacker = s % core.thread_count();
            let victim = (attacker + 1) % core.thread_count();
            for (j, p) in touched.iter().enumerate() {
                if s % stride == (j * 7) % stride && s / stride < opts.touches_per_page {
                    core.switch_thread(victim);
                    let r = core.with_mode(Mode::Kernel, |c| -> Result<(), SimError> {
                        c.load_issue(*p, 1)?;
                        c.fetch_issue(*p)?;
                        Ok(())
                    });
                    core.switch_thread(attacker);
                    r?;
                }
            }
            core.switch_thread(attacker);
            let i = s % pages.len();
            let page = pages[i];
            let d = bouncer.fetch_bounce(core, page)?.class == FetchClass::TlbHit;
            let it = bouncer.fetch_bounce_itlb(core, page)?.class == FetchClass::TlbHit;
            evict(core, page)?;
            if d || it {
                if i < targets.len() {
                    hits_target += 1;
                } else {
                    hits_reference += 1;
                }
            }
        }
        let detected = hits_target > opts.lower_bound && hits_target > hits_reference;
        trace.periods.push(PeriodSample { hits_target, hits_reference, detected });
    }
    core.switch_thread(0);
    trace.simulated_cycles = core.cycles() - start;
    Ok(trace)
}

fn evict(core: &mut Core, p: VirtualAddress) -> Result<(), SimError> {
    core.tlb_evict_vpn(TlbKind::Data, p.vpn())?;
    core.tlb_evict_vpn(TlbKind::Instruction, p.vpn())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::addrspace::OsProfile;
    use crate::attacks::System;
    use crate::uarch::MicroarchProfile;

    fn run(script: &ActivityScript, periods: usize) -> ActivityTrace {
        let mut sys = System::boot_default(MicroarchProfile::skylake(), OsProfile::Linux, 17).unwrap();
        let bt = sys.layout.module("bluetooth").unwrap().start;
        let reference = sys.layout.module("i2c_i801").unwrap().start;
        let targets: Vec<VirtualAddress> = (0..8).map(|i| bt.add_pages(i)).collect();
        let activity = KernelActivity::from_script(script, &sys.layout).unwrap();
        let opts = MonitorOptions { periods, samples_per_period: 900, ..Default::default() };
        monitor_activity(&mut sys.core, &sys.bouncer, &targets, reference, &activity, opts).unwrap()
    }

    #[test]
    fn burst_detected_in_its_periods() {
        let script = ActivityScript::burst("bluetooth", 3..6, 4);
        let trace = run(&script, 9);
        assert_eq!(trace.detected_periods(), vec![3, 4, 5]);
        assert!(trace.periods[4].hits_target >= 4 * 50 - 4);
    }

    #[test]
    fn quiet_is_never_detected() {
        let trace = run(&ActivityScript::quiet(), 6);
        assert!(trace.periods.iter().all(|p| !p.detected && p.hits_target == 0));
    }

    #[test]
    fn busy_reference_masks_target() {
        let script = ActivityScript::burst("i2c_i801", 0..2, 1).then(ActivityScript::burst("bluetooth", 1..2, 1));
        let trace = run(&script, 3);
        assert_eq!(trace.periods[0].hits_reference, 50);
        assert_eq!(trace.detected_periods(), Vec::<usize>::new());
    }

    #[test]
    fn script_json_round_trip() {
        let json = r#"[{"period": 4, "module": "usbhid", "pages_touched": 3}]"#;
        let s = ActivityScript::from_json(json).unwrap();
        assert_eq!(s.active_periods("usbhid"), vec![4]);
        assert_eq!(serde_json::to_string(&s).unwrap(), json.replace(' ', ""));
    }
}
