//! `diffopf`: generate OPF histories, train the diffusion sampler and the
//! point-prediction baseline, draw guided warm starts, restore them and
//! report warm-start quality and sample complexity.

mod artifacts;
mod config;
mod error;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use artifacts::RunDir;
use config::{parse_assignment, smoke_overrides, ConfigBuilder, RunConfig};
use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "diffopf", version, about = "Diffusion warm starts for AC optimal power flow")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON run configuration; missing keys keep their defaults.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Root directory for runs.
    #[arg(long, global = true, env = "DIFFOPF_OUT", default_value = "diffopf-runs")]
    out_root: PathBuf,
    /// Run name; artifacts go to `<out-root>/<run>`.
    #[arg(long, global = true, default_value = "default")]
    run: String,
    /// Worker threads for OPF solves, sampling chains and restorations
    /// (default: available cores). Results do not depend on it.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Override any config value, e.g. `--set train.epochs=50`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Bundled case name or case file path.
    #[arg(long, global = true)]
    case: Option<String>,
    /// Seed for data generation, both trainings and sampling.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Training records to generate.
    #[arg(long, global = true)]
    n_records: Option<usize>,
    /// Held-out test records to generate.
    #[arg(long, global = true)]
    n_test: Option<usize>,
    /// Diffusion training epochs.
    #[arg(long, global = true)]
    epochs: Option<usize>,
    /// Baseline training epochs.
    #[arg(long, global = true)]
    baseline_epochs: Option<usize>,
    /// Guided samples per test load.
    #[arg(long, global = true)]
    n_samples: Option<usize>,
    /// Guidance step scale.
    #[arg(long, global = true)]
    lambda: Option<f64>,
    /// Guidance sign: `corrected` or `paper`.
    #[arg(long, global = true)]
    sign_mode: Option<String>,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(long, short, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve OPF over random loads and costs; writes `data/`.
    GenData,
    /// Train the diffusion model on `data/train.csv`; writes `model/`.
    Train,
    /// Train the point-prediction baseline; writes `baseline/`.
    TrainBaseline,
    /// Draw guided samples for every test load; writes `samples/`.
    Sample,
    /// Restore and score samples and baseline predictions; writes `restore/`.
    Restore,
    /// Warm-start table and gap/violation series; writes `eval/`.
    Eval,
    /// Sample-complexity table; writes `complexity/`.
    Complexity,
    /// Every stage in order.
    Bench {
        /// Two-bus case with small sizes, applied before the config file.
        #[arg(long)]
        smoke: bool,
    },
    /// Print the effective configuration as JSON.
    ShowConfig,
}

impl Common {
    fn flag_patch(&self) -> Value {
        let mut patch = json!({});
        let mut put = |path: &str, v: Value| {
            let mut node = v;
            for key in path.rsplit('.') {
                node = json!({ key: node });
            }
            config::merge_loose(&mut patch, node);
        };
        if let Some(c) = &self.case {
            put("case", json!(c));
        }
        if let Some(s) = self.seed {
            for p in ["dataset.seed", "train.seed", "baseline.seed", "guidance.seed"] {
                put(p, json!(s));
            }
        }
        if let Some(n) = self.n_records {
            put("dataset.n_records", json!(n));
        }
        if let Some(n) = self.n_test {
            put("dataset.n_test", json!(n));
        }
        if let Some(n) = self.epochs {
            put("train.epochs", json!(n));
        }
        if let Some(n) = self.baseline_epochs {
            put("baseline.epochs", json!(n));
        }
        if let Some(n) = self.n_samples {
            put("guidance.n_samples", json!(n));
        }
        if let Some(l) = self.lambda {
            put("guidance.lambda", json!(l));
        }
        if let Some(s) = &self.sign_mode {
            put("guidance.sign_mode", json!(s));
        }
        patch
    }

    fn config(&self, smoke: bool) -> Result<RunConfig, CliError> {
        let mut b = ConfigBuilder::new();
        if smoke {
            b = b.patch(&smoke_overrides())?;
        }
        if let Some(path) = &self.config {
            b = b.file(path)?;
        }
        b = b.patch(&self.flag_patch())?;
        for s in &self.set {
            b = b.patch(&parse_assignment(s)?)?;
        }
        b.build()
    }
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let smoke = matches!(cli.command, Command::Bench { smoke: true });
    let cfg = cli.common.config(smoke)?;
    if let Some(n) = cli.common.workers {
        if n == 0 {
            return Err(CliError::Config("--workers must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    let dir = RunDir::new(cli.common.out_root.join(&cli.common.run));
    let done = |m: artifacts::StageManifest| {
        println!("{}: {} ({:.2}s)", m.command, dir.root.display(), m.wall_time_s);
    };
    match &cli.command {
        Command::GenData => done(stages::gen_data(&cfg, &dir)?),
        Command::Train => done(stages::train(&cfg, &dir)?),
        Command::TrainBaseline => done(stages::train_baseline_stage(&cfg, &dir)?),
        Command::Sample => done(stages::sample(&cfg, &dir)?),
        Command::Restore => done(stages::restore(&cfg, &dir)?),
        Command::Eval => {
            let (m, text) = stages::eval(&cfg, &dir)?;
            print!("{text}");
            done(m);
        }
        Command::Complexity => {
            let (m, text) = stages::complexity(&cfg, &dir)?;
            print!("{text}");
            done(m);
        }
        Command::Bench { .. } => {
            print!("{}", stages::bench(&cfg, &dir)?);
            println!("bench: {}", dir.root.display());
        }
        Command::ShowConfig => {
            println!("{}", serde_json::to_string_pretty(&cfg).expect("config serializes"));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.common.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
