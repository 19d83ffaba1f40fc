use thiserror::Error;

use crate::addrspace::VirtualAddress;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AddrError {
    #[error("address {0} is not canonical")]
    NonCanonical(VirtualAddress),
    #[error("address {0} is not page aligned")]
    Unaligned(VirtualAddress),
    #[error("page {0} is already mapped")]
    Overlap(VirtualAddress),
    #[error("alias target {0} is not mapped")]
    AliasTargetUnmapped(VirtualAddress),
    #[error("protected pages must be present")]
    InvalidFlags,
    #[error("physical frames exhausted")]
    FramesExhausted,
    #[error("module {0:?} has zero size")]
    EmptyModule(String),
    #[error("module table needs {needed} pages but the module region holds {available}")]
    ModuleRegionOverflow { needed: u64, available: u64 },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("store buffer full ({capacity} entries); the frontend stalls")]
    Stall { capacity: usize },
    #[error("architectural fault accessing {addr}: {reason}")]
    ArchitecturalFault { addr: VirtualAddress, reason: FaultReason },
    #[error("unsupported access size {0} (expected 1, 2, 4, 8, 16 or 32)")]
    BadAccessSize(usize),
    #[error("access at {0} crosses a page boundary")]
    SplitAccess(VirtualAddress),
    #[error("transient windows do not nest")]
    NestedWindow,
    #[error("no transient window is open")]
    NoWindow,
    #[error("no eviction region mapped for the {0:?} TLB")]
    NoEvictionRegion(crate::uarch::TlbKind),
    #[error("transaction error: {0}")]
    Tx(#[from] TxError),
    #[error(transparent)]
    Addr(#[from] AddrError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultReason {
    NotMapped,
    NonCanonical,
    Supervisor,
    ReadOnly,
}

impl std::fmt::Display for FaultReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FaultReason::NotMapped => "page not present",
            FaultReason::NonCanonical => "non-canonical address",
            FaultReason::Supervisor => "supervisor page accessed from user mode",
            FaultReason::ReadOnly => "write to read-only page",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TxError {
    #[error("a transaction is already active on this core")]
    AlreadyActive,
    #[error("no active transaction")]
    NotActive,
    #[error("transaction {0} is not the active one")]
    WrongTransaction(u64),
    #[error("transactions cannot start inside a transient window")]
    InsideWindow,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PrimitiveError {
    #[error("speculative fetch+bounce saw no TLB hit (misspeculation failed)")]
    NoHit,
    #[error("speculative fetch+bounce saw {0} TLB hits")]
    AmbiguousHit(usize),
    #[error("marker value must be non-zero")]
    ZeroMarker,
    #[error("target page overlaps the probe array")]
    TargetInProbe,
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AttackError {
    #[error("no candidate bounced")]
    NotFound,
    #[error(transparent)]
    Primitive(#[from] PrimitiveError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown scenario {0:?}")]
    UnknownScenario(String),
    #[error("profile {name:?} not found: {reason}")]
    ProfileNotFound { name: String, reason: String },
    #[error("invalid profile: {0}")]
    InvalidProfile(String),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Layout(#[from] AddrError),
}

/// Anything `run_scenario` can fail with.
#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("scenario failed: {0}")]
    Scenario(#[from] AttackError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl HarnessError {
    /// CLI exit code: 2 for configuration problems, 3 for scenario failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Scenario(_) | HarnessError::Io(_) => 3,
        }
    }
}

impl From<SimError> for HarnessError {
    fn from(e: SimError) -> Self {
        HarnessError::Scenario(AttackError::Sim(e))
    }
}

impl From<PrimitiveError> for HarnessError {
    fn from(e: PrimitiveError) -> Self {
        HarnessError::Scenario(AttackError::Primitive(e))
    }
}

impl From<AddrError> for HarnessError {
    fn from(e: AddrError) -> Self {
        HarnessError::Config(ConfigError::Layout(e))
    }
}
