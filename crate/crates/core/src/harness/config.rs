use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::addrspace::OsProfile;
use crate::attacks::ActivityScript;
use crate::error::ConfigError;
use crate::uarch::MicroarchProfile;

use super::trace::TraceFormat;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Scenario {
    Kaslr,
    Directmap,
    Modules,
    Enclave,
    Tsx,
    Monitor,
    SpectreLeak,
    Sweep,
}

impl Scenario {
    pub const ALL: [Scenario; 8] = [
        Scenario::Kaslr,
        Scenario::Directmap,
        Scenario::Modules,
        Scenario::Enclave,
        Scenario::Tsx,
        Scenario::Monitor,
        Scenario::SpectreLeak,
        Scenario::Sweep,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Kaslr => "kaslr",
            Scenario::Directmap => "directmap",
            Scenario::Modules => "modules",
            Scenario::Enclave => "enclave",
            Scenario::Tsx => "tsx",
            Scenario::Monitor => "monitor",
            Scenario::SpectreLeak => "spectre-leak",
            Scenario::Sweep => "sweep",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Scenario::ALL.into_iter().find(|sc| sc.name() == s).ok_or_else(|| ConfigError::UnknownScenario(s.to_string()))
    }
}

impl Serialize for Scenario {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Scenario {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

fn default_profile() -> String {
    "skylake".into()
}

fn default_sweep_seeds() -> u64 {
    10
}

/// One run of one scenario. `repeats` means runs for the searches, scripts
/// for `tsx` and attempts per byte for `spectre-leak`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub scenario: Scenario,
    #[serde(default = "default_profile")]
    pub profile: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub os: Option<OsProfile>,
    #[serde(default)]
    pub noise_p: Option<f64>,
    #[serde(default)]
    pub repeats: Option<usize>,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub format: TraceFormat,

    /// kaslr: keep scanning after the first hit.
    #[serde(default)]
    pub full_scan: bool,
    /// kaslr, directmap: search only the lowest this many candidates.
    #[serde(default)]
    pub max_candidates: Option<u64>,
    /// sweep: scenario swept and number of consecutive seeds.
    #[serde(default)]
    pub sweep_of: Option<Scenario>,
    #[serde(default = "default_sweep_seeds")]
    pub sweep_seeds: u64,
    /// monitor
    #[serde(default)]
    pub periods: Option<usize>,
    #[serde(default)]
    pub samples_per_period: Option<usize>,
    #[serde(default)]
    pub lower_bound: Option<u64>,
    #[serde(default)]
    pub monitor_target: Option<String>,
    #[serde(default)]
    pub monitor_script: Option<ActivityScript>,
    /// spectre-leak: planted secret (random bytes from the seed if absent).
    #[serde(default)]
    pub secret: Option<String>,
    #[serde(default)]
    pub secret_len: Option<usize>,
    #[serde(default)]
    pub mispredict_p: Option<f64>,
}

impl ScenarioConfig {
    pub fn new(scenario: Scenario) -> Self {
        Self {
            scenario,
            profile: default_profile(),
            seed: 0,
            os: None,
            noise_p: None,
            repeats: None,
            out: None,
            format: TraceFormat::Csv,
            full_scan: false,
            max_candidates: None,
            sweep_of: None,
            sweep_seeds: default_sweep_seeds(),
            periods: None,
            samples_per_period: None,
            lower_bound: None,
            monitor_target: None,
            monitor_script: None,
            secret: None,
            secret_len: None,
            mispredict_p: None,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn from_json(json: &str) -> Result<Self, ConfigError> {
        let cfg: Self = serde_json::from_str(json)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn os(&self) -> OsProfile {
        self.os.unwrap_or(OsProfile::Linux)
    }

    /// The profile with any noise override applied.
    pub fn resolve_profile(&self) -> Result<MicroarchProfile, ConfigError> {
        let mut p = MicroarchProfile::resolve(&self.profile)?;
        if let Some(n) = self.noise_p {
            p.noise_p = n;
        }
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if let Some(n) = self.noise_p {
            if !(0.0..1.0).contains(&n) {
                return bad(format!("noise_p {n} outside [0, 1)"));
            }
        }
        if let Some(p) = self.mispredict_p {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("mispredict_p {p} outside [0, 1]"));
            }
        }
        if self.repeats == Some(0) {
            return bad("repeats must be at least 1".into());
        }
        if self.samples_per_period == Some(0) {
            return bad("samples_per_period must be at least 1".into());
        }
        match (self.scenario, self.sweep_of) {
            (Scenario::Sweep, Some(Scenario::Sweep)) => return bad("a sweep cannot sweep sweeps".into()),
            (Scenario::Sweep, _) if self.sweep_seeds == 0 => return bad("sweep_seeds must be at least 1".into()),
            _ => {}
        }
        if self.scenario == Scenario::Directmap && self.os() == OsProfile::Windows {
            return bad("the windows layout has no direct-physical map".into());
        }
        Ok(())
    }
}
