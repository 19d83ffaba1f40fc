//! Deterministic simulator of store-to-load forwarding, TLB and cache
//! side channels, plus the attacks built on them.

pub mod addrspace;
pub mod attacks;
pub mod error;
pub mod harness;
pub mod primitives;
pub mod transient;
pub mod uarch;

pub use addrspace::{AddressSpace, KernelLayout, ModuleSpec, OsProfile, PageFlags, VirtualAddress};
pub use attacks::{SearchReport, System};
pub use error::{AddrError, AttackError, ConfigError, HarnessError, PrimitiveError, SimError};
pub use harness::{run_scenario, Confusion, MetricsReport, Scenario, ScenarioConfig, TraceFormat, TraceRow};
pub use primitives::{BounceOutcome, Bouncer, FetchBounceClass, FetchClass, ProbeArray};
pub use transient::Suppression;
pub use uarch::{Core, MicroarchProfile, TlbKind};
