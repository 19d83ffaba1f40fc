use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::ConfigError;

/// Environment variable naming an extra directory searched for `<name>.json` profiles.
pub const PROFILE_DIR_ENV: &str = "STOREBOUNCE_PROFILE_DIR";

const SKYLAKE_JSON: &str = include_str!("../../profiles/skylake.json");
const PENTIUM4_JSON: &str = include_str!("../../profiles/pentium4.json");

pub const BUILTIN_PROFILES: &[&str] = &["skylake", "pentium4"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TlbGeometry {
    pub sets: usize,
    pub ways: usize,
}

impl TlbGeometry {
    pub const fn entries(self) -> usize {
        self.sets * self.ways
    }
}

/// Per-CPU behavior switches and timing constants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MicroarchProfile {
    pub name: String,
    #[serde(default)]
    pub notes: String,
    pub store_buffer_capacity: usize,
    /// False-positive forwarding of buffered stores to faulting loads with an
    /// overlapping page offset.
    pub wtf_enabled: bool,
    pub dtlb_geometry: TlbGeometry,
    pub itlb_geometry: TlbGeometry,
    /// Capacity of the (fully associative, LRU) data cache in 64-byte lines.
    pub cache_lines: usize,
    pub lat_cache_hit: u64,
    pub lat_cache_miss: u64,
    pub lat_walk: u64,
    /// Timed accesses strictly below this are classified as cache hits.
    pub hit_threshold: u64,
    pub tsx_window_cycles: u64,
    pub signal_window_cycles: u64,
    /// Probability that a timing measurement is misclassified.
    pub noise_p: f64,
}

impl Default for MicroarchProfile {
    fn default() -> Self {
        Self::skylake()
    }
}

impl MicroarchProfile {
    pub fn skylake() -> Self {
        serde_json::from_str(SKYLAKE_JSON).expect("bundled skylake profile parses")
    }

    pub fn pentium4() -> Self {
        serde_json::from_str(PENTIUM4_JSON).expect("bundled pentium4 profile parses")
    }

    pub fn builtin(name: &str) -> Option<Self> {
        match name {
            "skylake" => Some(Self::skylake()),
            "pentium4" => Some(Self::pentium4()),
            _ => None,
        }
    }

    pub fn with_noise(mut self, noise_p: f64) -> Self {
        self.noise_p = noise_p;
        self
    }

    pub fn from_json(json: &str) -> Result<Self, ConfigError> {
        let profile: Self = serde_json::from_str(json)?;
        profile.validate()?;
        Ok(profile)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let json = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::ProfileNotFound { name: path.display().to_string(), reason: e.to_string() })?;
        Self::from_json(&json)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("profile is always serializable")
    }

    /// Resolves a profile reference: a built-in name, `<name>.json` under
    /// `$STOREBOUNCE_PROFILE_DIR`, or a path to a JSON file.
    ///
    /// The profile directory wins over built-ins so that a site can shadow
    /// the bundled numbers.
    pub fn resolve(reference: &str) -> Result<Self, ConfigError> {
        let dir = std::env::var_os(PROFILE_DIR_ENV).map(PathBuf::from);
        Self::resolve_in(reference, dir.as_deref())
    }

    pub fn resolve_in(reference: &str, profile_dir: Option<&Path>) -> Result<Self, ConfigError> {
        if let Some(dir) = profile_dir {
            let candidate = dir.join(format!("{reference}.json"));
            if candidate.is_file() {
                return Self::load(&candidate);
            }
        }
        if let Some(profile) = Self::builtin(reference) {
            return Ok(profile);
        }
        let path = Path::new(reference);
        if path.is_file() {
            return Self::load(path);
        }
        Err(ConfigError::ProfileNotFound {
            name: reference.to_string(),
            reason: format!("not a built-in ({}), not in ${PROFILE_DIR_ENV}, not a file", BUILTIN_PROFILES.join(", ")),
        })
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |msg: String| Err(ConfigError::InvalidProfile(format!("{}: {msg}", self.name)));
        if self.store_buffer_capacity == 0 {
            return fail("store_buffer_capacity must be at least 1".into());
        }
        if self.lat_cache_miss <= self.lat_cache_hit {
            return fail("lat_cache_miss must exceed lat_cache_hit".into());
        }
        if !(0.0..1.0).contains(&self.noise_p) {
            return fail(format!("noise_p {} outside [0, 1)", self.noise_p));
        }
        for (what, g) in [("dtlb", self.dtlb_geometry), ("itlb", self.itlb_geometry)] {
            if g.sets == 0 || g.ways == 0 {
                return fail(format!("{what} geometry must have non-zero sets and ways"));
            }
        }
        if self.cache_lines == 0 {
            return fail("cache_lines must be at least 1".into());
        }
        if self.hit_threshold <= self.lat_cache_hit + self.lat_walk || self.hit_threshold > self.lat_cache_miss {
            return fail("hit_threshold must separate hit+walk latency from miss latency".into());
        }
        Ok(())
    }
}
