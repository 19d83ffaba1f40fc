//! Fault-suppression windows, an in-place trainable branch predictor and
//! TSX-style transactions.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{SimError, TxError};
use crate::uarch::{Core, WindowReport};

/// How faults inside a window are kept from reaching the program.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suppression {
    /// Transactional memory: the abort swallows the fault.
    TsxLike,
    /// A signal handler catches the fault.
    SignalLike,
    /// Wrong-path execution after a branch misprediction.
    Misprediction,
}

impl Suppression {
    pub fn overhead_cycles(self, profile: &crate::uarch::MicroarchProfile) -> u64 {
        match self {
            Suppression::TsxLike => profile.tsx_window_cycles,
            Suppression::SignalLike => profile.signal_window_cycles,
            Suppression::Misprediction => MISPREDICT_PENALTY,
        }
    }
}

/// Pipeline flush cost charged when a mispredicted path is squashed.
pub const MISPREDICT_PENALTY: u64 = 20;

/// Runs `body` with faults suppressed and squashes its architectural effects.
pub fn with_window<T>(
    core: &mut Core,
    suppression: Suppression,
    body: impl FnOnce(&mut Core) -> T,
) -> Result<(T, WindowReport), SimError> {
    core.begin_window(suppression)?;
    let out = body(core);
    let report = core.end_window()?;
    Ok((out, report))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpecOutcome {
    /// Branch actually taken; body ran for real.
    Architectural,
    /// Predicted taken, actually not: body ran on the wrong path and was squashed.
    Transient,
    Skipped,
}

/// Per-site 2-bit saturating counters.
#[derive(Clone, Debug)]
pub struct BranchPredictor {
    table: BTreeMap<u64, u8>,
    /// Chance that a predicted-taken, actually-not-taken branch really runs
    /// its body transiently.
    pub mispredict_success_p: f64,
}

impl Default for BranchPredictor {
    fn default() -> Self {
        Self::new(1.0)
    }
}

impl BranchPredictor {
    pub fn new(mispredict_success_p: f64) -> Self {
        Self { table: BTreeMap::new(), mispredict_success_p }
    }

    pub fn counter(&self, site: u64) -> u8 {
        self.table.get(&site).copied().unwrap_or(0)
    }

    pub fn predict(&self, site: u64) -> bool {
        self.counter(site) >= 2
    }

    pub fn train(&mut self, site: u64, taken: bool) {
        let c = self.table.entry(site).or_insert(0);
        *c = if taken { (*c + 1).min(3) } else { c.saturating_sub(1) };
    }

    /// Evaluates a conditional branch guarding `body`.
    pub fn speculate(
        &mut self,
        core: &mut Core,
        site: u64,
        actual: bool,
        body: impl FnOnce(&mut Core),
    ) -> Result<SpecOutcome, SimError> {
        let predicted = self.predict(site);
        let outcome = if actual {
            body(core);
            SpecOutcome::Architectural
        } else if predicted && core.chance(self.mispredict_success_p) {
            with_window(core, Suppression::Misprediction, body)?;
            SpecOutcome::Transient
        } else {
            SpecOutcome::Skipped
        };
        self.train(site, actual);
        Ok(outcome)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TxStatus {
    Active,
    Committed,
    Aborted,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Transaction {
    pub id: u64,
    /// Filled in when the transaction ends.
    pub touched_vpns: BTreeSet<u64>,
    pub status: TxStatus,
}

impl Transaction {
    pub(crate) fn new(id: u64) -> Self {
        Self { id, touched_vpns: BTreeSet::new(), status: TxStatus::Active }
    }

    pub(crate) fn finish(&mut self, status: TxStatus, touched: BTreeSet<u64>) {
        self.status = status;
        self.touched_vpns = touched;
    }
}

pub fn tx_begin(core: &mut Core) -> Result<Transaction, TxError> {
    core.tx_begin()
}

pub fn tx_commit(core: &mut Core, tx: &mut Transaction) -> Result<(), TxError> {
    core.tx_commit(tx)
}

pub fn tx_abort(core: &mut Core, tx: &mut Transaction) -> Result<(), TxError> {
    core.tx_abort(tx)
}
