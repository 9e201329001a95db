use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ztd_cli::commands::{self, CliError, Outcome};
use ztd_cli::config::{self, Family, Field, RunConfig};
use ztd_core::meta::MetaMode;
use ztd_core::pomdp::ScenarioField;

/// Meta-learned trust thresholds for zero-trust session control.
#[derive(Debug, Parser)]
#[command(name = "ztd", version)]
struct Cli {
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML configuration; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Overrides `master_seed`.
    #[arg(long)]
    seed: Option<u64>,

    /// Overrides `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a distribution-agnostic meta threshold.
    Train(Common),
    /// Train a robust meta threshold with adversarial scenario weights.
    TrainRobust(Common),
    /// Adapt a threshold to one scenario with a single SPSA step.
    Adapt {
        #[command(flatten)]
        common: Common,
        /// Threshold to adapt, in [0, 1].
        #[arg(long)]
        tau: f64,
        /// Overrides on the base scenario, e.g. `p_u_n=0.3,p_a_n=0.9`.
        #[arg(long, default_value = "")]
        scenario: String,
    },
    /// Compare the adapted meta threshold with the distribution-average one.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Policy file from `train`; trains in-process when omitted.
        #[arg(long)]
        policy: Option<PathBuf>,
        /// Policy file from `train-robust`, used with `--robustness`.
        #[arg(long)]
        robust_policy: Option<PathBuf>,
        /// Also compare agnostic, robust and average thresholds under
        /// empirical and worst-case weightings.
        #[arg(long)]
        robustness: bool,
    },
    /// Adapted and optimal thresholds across the varying field's support.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Policy file from `train`; trains in-process when neither this nor `--tau-meta` is given.
        #[arg(long, conflicts_with = "tau_meta")]
        policy: Option<PathBuf>,
        /// Meta threshold to sweep with, instead of a policy file.
        #[arg(long)]
        tau_meta: Option<f64>,
    },
    /// Build an empirical scenario distribution from a histogram CSV.
    IngestHistogram {
        #[command(flatten)]
        common: Common,
        /// `group_id,technique_count` CSV; overrides `scenarios.histogram`.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Scenario field the histogram maps onto.
        #[arg(long)]
        field: Option<String>,
        /// Lower end of the field's range; overrides `scenarios.lo`.
        #[arg(long)]
        lo: Option<f64>,
        /// Upper end of the field's range; overrides `scenarios.hi`.
        #[arg(long)]
        hi: Option<f64>,
    },
    /// Print the configuration JSON schema.
    Schema,
}

fn load(common: &Common) -> Result<RunConfig, CliError> {
    let mut c = match &common.config {
        Some(path) => config::load_config(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        c.master_seed = seed;
    }
    if let Some(out) = &common.out {
        c.output_dir = out.clone();
    }
    Ok(c)
}

fn parse_field(name: &str) -> Result<ScenarioField, CliError> {
    name.parse().map_err(CliError::Usage)
}

fn parse_scenario(base: ztd_core::pomdp::Scenario, spec: &str) -> Result<ztd_core::pomdp::Scenario, CliError> {
    let mut s = base;
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--scenario entry {part:?} is not key=value")))?;
        let v: f64 = v
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("--scenario {k}: {v:?} is not a number")))?;
        s = s.with(parse_field(k.trim())?, v);
    }
    Ok(s)
}

fn run(command: Command) -> Result<Outcome, CliError> {
    match command {
        Command::Train(common) => commands::cmd_train(&load(&common)?, MetaMode::Agnostic),
        Command::TrainRobust(common) => commands::cmd_train(&load(&common)?, MetaMode::Robust),
        Command::Adapt { common, tau, scenario } => {
            let c = load(&common)?;
            let theta = parse_scenario(c.base_scenario(), &scenario)?;
            commands::cmd_adapt(&c, tau, theta)
        }
        Command::Eval {
            common,
            policy,
            robust_policy,
            robustness,
        } => commands::cmd_eval(&load(&common)?, policy.as_deref(), robust_policy.as_deref(), robustness),
        Command::Sweep {
            common,
            policy,
            tau_meta,
        } => commands::cmd_sweep(&load(&common)?, policy.as_deref(), tau_meta),
        Command::IngestHistogram {
            common,
            input,
            field,
            lo,
            hi,
        } => {
            let mut c = load(&common)?;
            if let Some(path) = input {
                c.scenarios.family = Family::Histogram;
                c.scenarios.histogram = Some(absolute(&path));
            }
            if let Some(f) = field {
                c.scenarios.varying = Field::from(parse_field(&f)?);
            }
            if lo.is_some() {
                c.scenarios.lo = lo;
            }
            if hi.is_some() {
                c.scenarios.hi = hi;
            }
            c.validate()?;
            commands::cmd_ingest(&c)
        }
        Command::Schema => Ok(Outcome {
            converged: true,
            files: Vec::new(),
            message: config::schema_json().trim_end().to_string(),
        }),
    }
}

fn absolute(path: &Path) -> PathBuf {
    std::path::absolute(path).unwrap_or_else(|_| path.to_path_buf())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let first = e.to_string();
            let first = first.lines().next().unwrap_or("invalid arguments");
            let first = first.strip_prefix("error: ").unwrap_or(first);
            eprintln!("{}", CliError::Usage(first.to_string()).one_line());
            return ExitCode::from(1);
        }
    };
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            eprintln!("{}", CliError::Usage("--jobs must be at least 1".into()).one_line());
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            eprintln!("{}", CliError::Usage(format!("--jobs: {e}")).one_line());
            return ExitCode::from(1);
        }
    }
    match run(cli.command) {
        Ok(outcome) => {
            if !outcome.message.is_empty() {
                println!("{}", outcome.message);
            }
            for f in &outcome.files {
                eprintln!("wrote {}", f.display());
            }
            ExitCode::from(outcome.exit_code() as u8)
        }
        Err(e) => {
            eprintln!("{}", e.one_line());
            ExitCode::from(1)
        }
    }
}
