use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use storebounce::attacks::ActivityScript;
use storebounce::harness::{render, MetricsReport};
use storebounce::{run_scenario, ConfigError, HarnessError, OsProfile, Scenario, ScenarioConfig, TraceFormat};

#[derive(Parser)]
#[command(name = "storebounce", version, about = "Store-to-leak forwarding attacks on a simulated core")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Built-in profile name, a name under $STOREBOUNCE_PROFILE_DIR, or a JSON path.
    #[arg(long, default_value = "skylake")]
    profile: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Override the profile's timing-noise probability.
    #[arg(long)]
    noise: Option<f64>,
    /// Runs, scripts or attempts per byte, depending on the scenario.
    #[arg(long)]
    repeats: Option<usize>,
    /// Write the trace here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// csv or json.
    #[arg(long, default_value = "csv")]
    format: String,
    /// linux or windows.
    #[arg(long)]
    os: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Recover the kernel image base.
    Kaslr {
        #[command(flatten)]
        common: Common,
        /// Probe every slot instead of stopping at the first hit.
        #[arg(long)]
        full_scan: bool,
        /// Search only the lowest this many slots.
        #[arg(long)]
        max_candidates: Option<u64>,
    },
    /// Recover the direct-physical map base.
    Directmap {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        max_candidates: Option<u64>,
    },
    /// Enumerate module extents and name the uniquely sized ones.
    Modules {
        #[command(flatten)]
        common: Common,
    },
    /// Detect protected (enclave) pages in a host range.
    Enclave {
        #[command(flatten)]
        common: Common,
    },
    /// Recover the pages an aborted transaction touched.
    Tsx {
        #[command(flatten)]
        common: Common,
    },
    /// Watch module pages for kernel activity.
    Monitor {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        periods: Option<usize>,
        #[arg(long)]
        samples: Option<usize>,
        /// Module whose first pages are watched.
        #[arg(long)]
        target: Option<String>,
        /// JSON event script: [{"period", "module", "pages_touched"}].
        #[arg(long)]
        script: Option<PathBuf>,
        #[arg(long)]
        lower_bound: Option<u64>,
    },
    /// Leak a planted kernel secret through a Spectre gadget.
    SpectreLeak {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        secret: Option<String>,
        #[arg(long)]
        secret_len: Option<usize>,
        #[arg(long)]
        mispredict_p: Option<f64>,
    },
    /// Run one scenario over consecutive seeds.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Scenario to sweep.
        #[arg(long, default_value = "kaslr")]
        of: String,
        #[arg(long, default_value_t = 10)]
        seeds: u64,
    },
    /// Run a scenario described by a JSON config file.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
}

fn apply(common: Common, scenario: Scenario) -> Result<ScenarioConfig, ConfigError> {
    let mut cfg = ScenarioConfig::new(scenario).with_seed(common.seed);
    cfg.profile = common.profile;
    cfg.noise_p = common.noise;
    cfg.repeats = common.repeats;
    cfg.out = common.out;
    cfg.format = common.format.parse()?;
    cfg.os = common.os.map(|s| s.parse::<OsProfile>().map_err(ConfigError::Invalid)).transpose()?;
    Ok(cfg)
}

fn build(command: Command) -> Result<ScenarioConfig, ConfigError> {
    let cfg = match command {
        Command::Kaslr { common, full_scan, max_candidates } => {
            let mut c = apply(common, Scenario::Kaslr)?;
            c.full_scan = full_scan;
            c.max_candidates = max_candidates;
            c
        }
        Command::Directmap { common, max_candidates } => {
            let mut c = apply(common, Scenario::Directmap)?;
            c.max_candidates = max_candidates;
            c
        }
        Command::Modules { common } => apply(common, Scenario::Modules)?,
        Command::Enclave { common } => apply(common, Scenario::Enclave)?,
        Command::Tsx { common } => apply(common, Scenario::Tsx)?,
        Command::Monitor { common, periods, samples, target, script, lower_bound } => {
            let mut c = apply(common, Scenario::Monitor)?;
            c.periods = periods;
            c.samples_per_period = samples;
            c.monitor_target = target;
            c.lower_bound = lower_bound;
            c.monitor_script = script.map(|p| ActivityScript::from_json(&std::fs::read_to_string(p)?)).transpose()?;
            c
        }
        Command::SpectreLeak { common, secret, secret_len, mispredict_p } => {
            let mut c = apply(common, Scenario::SpectreLeak)?;
            c.secret = secret;
            c.secret_len = secret_len;
            c.mispredict_p = mispredict_p;
            c
        }
        Command::Sweep { common, of, seeds } => {
            let mut c = apply(common, Scenario::Sweep)?;
            c.sweep_of = Some(of.parse()?);
            c.sweep_seeds = seeds;
            c
        }
        Command::Run { config } => ScenarioConfig::load(&config)?,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn summary(r: &MetricsReport) -> String {
    let mut s = format!(
        "{} seed={} profile={} f1={:.4} precision={:.4} recall={:.4} candidates={} cycles={} wall={:.3}s",
        r.scenario, r.seed, r.profile, r.f1, r.precision, r.recall, r.candidates_tested, r.simulated_cycles, r.wall_seconds
    );
    if let Some(m) = r.mean_f1 {
        s.push_str(&format!(" mean_f1={m:.4} runs={}", r.runs.len()));
    }
    s
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = build(cli.command).map_err(HarnessError::from).and_then(|cfg| {
        let report = run_scenario(&cfg)?;
        if cfg.out.is_none() {
            print!("{}", render(&report, cfg.format));
            if cfg.format == TraceFormat::Json {
                println!();
            }
        }
        eprintln!("{}", summary(&report));
        Ok(())
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
