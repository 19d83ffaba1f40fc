use std::collections::BTreeSet;

use crate::addrspace::{PageFlags, VirtualAddress};
use crate::error::{AddrError, AttackError};
use crate::harness::Confusion;
use crate::primitives::Bouncer;
use crate::uarch::Core;

/// Default host range holding simulated enclave pages.
pub const ENCLAVE_HOST_BASE: VirtualAddress = VirtualAddress(0x0000_7000_0000_0000);

/// Protected pages laid out over a host range: `pattern[i]` marks page `i`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EnclaveSpec {
    pub base: VirtualAddress,
    pub pattern: Vec<bool>,
}

impl EnclaveSpec {
    pub fn contiguous(base: VirtualAddress, pages: usize) -> Self {
        Self { base, pattern: vec![true; pages] }
    }

    pub fn map(&self, core: &mut Core) -> Result<(), AddrError> {
        for vpn in self.protected_vpns() {
            core.map_region(VirtualAddress::from_vpn(vpn), 1, PageFlags::PROTECTED)?;
        }
        Ok(())
    }

    pub fn protected_vpns(&self) -> BTreeSet<u64> {
        let base = self.base.vpn();
        self.pattern.iter().enumerate().filter(|(_, &p)| p).map(|(i, _)| base + i as u64).collect()
    }
}

/// Bounces off every page of `[start, start + pages)`. Enclave pages are
/// backed even though reads from outside return the abort value, so they
/// show up alongside any other mapped page.
pub fn detect_protected_pages(
    core: &mut Core,
    bouncer: &Bouncer,
    start: VirtualAddress,
    pages: u64,
) -> Result<BTreeSet<u64>, AttackError> {
    let mut found = BTreeSet::new();
    for i in 0..pages {
        let p = start.add_pages(i);
        if bouncer.data_bounce(core, p)?.bounced {
            found.insert(p.vpn());
        }
    }
    Ok(found)
}

pub fn score_pages(found: &BTreeSet<u64>, truth: &BTreeSet<u64>) -> Confusion {
    let tp = found.intersection(truth).count() as u64;
    Confusion { tp, fp: found.len() as u64 - tp, fn_: truth.len() as u64 - tp, tn: 0 }
}
