//! Shared setup for the criterion benches.

use storebounce::{MicroarchProfile, OsProfile, System};

/// A booted Linux system on the given built-in profile.
pub fn linux(profile: MicroarchProfile, seed: u64) -> System {
    System::boot_default(profile, OsProfile::Linux, seed).expect("boot")
}
