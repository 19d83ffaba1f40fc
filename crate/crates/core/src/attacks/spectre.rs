use std::ops::Range;

use crate::addrspace::{PageFlags, VirtualAddress, PAGE_SIZE};
use crate::error::{AddrError, AttackError, PrimitiveError};
use crate::primitives::{speculative_fetch_bounce, Bouncer, SpectreGadget, PROBE_PAGES};
use crate::transient::BranchPredictor;
use crate::uarch::Core;

/// Gadget data array and oracle, both in a vmalloc-like kernel range.
pub const GADGET_DATA_BASE: VirtualAddress = VirtualAddress(0xffff_c900_0000_0000);
pub const GADGET_ORACLE_BASE: VirtualAddress = VirtualAddress(0xffff_c900_1000_0000);
pub const GADGET_BOUNDS: u64 = 16;
const GADGET_SITE: u64 = 0x5bec;

/// Maps the gadget's pages, fills the in-bounds part of the array and plants
/// `secret` right after it. Returns the gadget and the secret's index range.
pub fn install_gadget(
    core: &mut Core,
    secret: &[u8],
    mispredict_success_p: f64,
) -> Result<(SpectreGadget, Range<u64>), AddrError> {
    let len = GADGET_BOUNDS + secret.len() as u64;
    core.map_region(GADGET_DATA_BASE, len.div_ceil(PAGE_SIZE).max(1), PageFlags::KERNEL_RW)?;
    core.map_region(GADGET_ORACLE_BASE, PROBE_PAGES as u64, PageFlags::KERNEL_RW)?;
    let public: Vec<u8> = (0..GADGET_BOUNDS as u8).collect();
    core.poke(GADGET_DATA_BASE, &public)?;
    core.poke(GADGET_DATA_BASE.add(GADGET_BOUNDS), secret)?;
    let gadget = SpectreGadget {
        site: GADGET_SITE,
        data_base: GADGET_DATA_BASE,
        bounds: GADGET_BOUNDS,
        oracle_base: GADGET_ORACLE_BASE,
        predictor: BranchPredictor::new(mispredict_success_p),
    };
    Ok((gadget, GADGET_BOUNDS..len))
}

/// Leaks `data[i]` for every `i` in `range`. Each byte gets up to `repeats`
/// attempts and the most frequent answer wins; voting stops as soon as the
/// leader cannot be caught. `None` marks a byte no attempt recovered.
pub fn spectre_leak(
    core: &mut Core,
    gadget: &mut SpectreGadget,
    bouncer: &Bouncer,
    range: Range<u64>,
    repeats: usize,
) -> Result<Vec<Option<u8>>, AttackError> {
    let mut out = Vec::with_capacity(range.end.saturating_sub(range.start) as usize);
    for index in range {
        let mut votes = [0usize; 256];
        for attempt in 0..repeats {
            match speculative_fetch_bounce(core, gadget, index, bouncer) {
                Ok(v) => votes[v as usize] += 1,
                Err(PrimitiveError::NoHit | PrimitiveError::AmbiguousHit(_)) => {}
                Err(e) => return Err(e.into()),
            }
            let (top, second) = top_two(&votes);
            if top > second + (repeats - attempt - 1) {
                break;
            }
        }
        out.push(plurality(&votes));
    }
    Ok(out)
}

fn top_two(votes: &[usize; 256]) -> (usize, usize) {
    votes.iter().fold((0, 0), |(a, b), &v| if v > a { (v, a) } else { (a, b.max(v)) })
}

/// Ties go to the smaller byte value.
fn plurality(votes: &[usize; 256]) -> Option<u8> {
    let (best, count) = votes.iter().enumerate().fold((0, 0), |acc, (v, &c)| if c > acc.1 { (v, c) } else { acc });
    (count > 0).then_some(best as u8)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::addrspace::OsProfile;
    use crate::attacks::System;
    use crate::uarch::MicroarchProfile;

    fn leak(secret: &[u8], p: f64, repeats: usize, seed: u64) -> Vec<Option<u8>> {
        let mut sys = System::boot_default(MicroarchProfile::skylake(), OsProfile::Linux, seed).unwrap();
        let (mut g, range) = install_gadget(&mut sys.core, secret, p).unwrap();
        spectre_leak(&mut sys.core, &mut g, &sys.bouncer, range, repeats).unwrap()
    }

    #[test]
    fn secret_string_recovered() {
        let got: Vec<u8> = leak(b"SECRET", 1.0, 3, 1).into_iter().map(Option::unwrap).collect();
        assert_eq!(got, b"SECRET");
    }

    #[test]
    fn empty_range_empty_output() {
        assert!(leak(b"", 1.0, 3, 1).is_empty());
    }

    #[test]
    fn never_mispredicting_yields_erasures() {
        assert_eq!(leak(b"ab", 0.0, 2, 3), vec![None, None]);
    }

    #[test]
    fn vote_helpers() {
        let mut v = [0usize; 256];
        assert_eq!((top_two(&v), plurality(&v)), ((0, 0), None));
        v[9] = 2;
        v[4] = 2;
        v[200] = 1;
        assert_eq!((top_two(&v), plurality(&v)), ((2, 2), Some(4)));
    }
}
