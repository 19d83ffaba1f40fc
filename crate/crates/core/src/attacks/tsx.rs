use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::addrspace::VirtualAddress;
use crate::error::{AttackError, SimError};
use crate::primitives::{Bouncer, FetchClass};
use crate::uarch::{Core, Mode, TlbKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TxOp {
    Load(VirtualAddress),
    Store(VirtualAddress, u8),
}

impl TxOp {
    pub fn addr(self) -> VirtualAddress {
        match self {
            TxOp::Load(a) | TxOp::Store(a, _) => a,
        }
    }
}

/// Victim transaction: runs `ops` in order and aborts after `abort_after`
/// of them, or commits when that is `None`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TxScript {
    pub ops: Vec<TxOp>,
    pub abort_after: Option<usize>,
}

impl TxScript {
    /// Pages the victim reaches before it stops.
    pub fn touched_vpns(&self) -> BTreeSet<u64> {
        let n = self.abort_after.unwrap_or(self.ops.len()).min(self.ops.len());
        self.ops[..n].iter().map(|op| op.addr().vpn()).collect()
    }

    fn run(&self, core: &mut Core) -> Result<(), SimError> {
        let mut tx = core.tx_begin()?;
        let n = self.abort_after.unwrap_or(self.ops.len()).min(self.ops.len());
        for op in &self.ops[..n] {
            match *op {
                TxOp::Load(a) => {
                    core.load_issue(a, 1)?;
                }
                TxOp::Store(a, v) => core.store_issue(a, &[v])?,
            }
        }
        if self.abort_after.is_some() {
            core.tx_abort(&mut tx)?;
        } else {
            core.tx_commit(&mut tx)?;
            core.drain_store_buffer();
        }
        Ok(())
    }
}

/// Evicts every candidate, lets the victim run on the sibling hyperthread
/// in kernel mode, then asks Fetch+Bounce which candidates are cached in
/// the shared dTLB. An abort rolls back memory but not translations.
pub fn tsx_atomicity_probe(
    core: &mut Core,
    bouncer: &Bouncer,
    victim: &TxScript,
    candidates: &[VirtualAddress],
) -> Result<BTreeSet<u64>, AttackError> {
    for c in candidates {
        core.tlb_evict_vpn(TlbKind::Data, c.vpn())?;
    }
    let attacker = core.active_thread();
    core.switch_thread((attacker + 1) % core.thread_count());
    let ran = core.with_mode(Mode::Kernel, |c| victim.run(c));
    core.switch_thread(attacker);
    ran?;
    let mut hit = BTreeSet::new();
    for c in candidates {
        if bouncer.fetch_bounce(core, *c)?.class == FetchClass::TlbHit {
            hit.insert(c.vpn());
        }
    }
    Ok(hit)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::addrspace::OsProfile;
    use crate::attacks::System;
    use crate::uarch::MicroarchProfile;

    fn setup() -> (System, Vec<VirtualAddress>) {
        let sys = System::boot_default(MicroarchProfile::skylake(), OsProfile::Linux, 21).unwrap();
        // Consecutive pages fall into distinct dTLB sets.
        let pages = (0..12).map(|i| sys.layout.kernel_base.add_pages(100 + i)).collect();
        (sys, pages)
    }

    #[test]
    fn aborted_touches_stay_visible() {
        let (mut sys, pages) = setup();
        let script = TxScript { ops: vec![TxOp::Load(pages[2]), TxOp::Load(pages[5])], abort_after: Some(2) };
        let got = tsx_atomicity_probe(&mut sys.core, &sys.bouncer, &script, &pages).unwrap();
        assert_eq!(got, [pages[2].vpn(), pages[5].vpn()].into());
    }

    #[test]
    fn idle_victim_shows_nothing() {
        let (mut sys, pages) = setup();
        let got = tsx_atomicity_probe(&mut sys.core, &sys.bouncer, &TxScript::default(), &pages).unwrap();
        assert!(got.is_empty());
    }

    #[test]
    fn abort_mid_way_reveals_prefix_only() {
        let (mut sys, pages) = setup();
        let ops = pages[..10].iter().map(|&p| TxOp::Load(p)).collect();
        let script = TxScript { ops, abort_after: Some(4) };
        let got = tsx_atomicity_probe(&mut sys.core, &sys.bouncer, &script, &pages).unwrap();
        assert_eq!(got, script.touched_vpns());
        assert_eq!(got.len(), 4);
    }
}
