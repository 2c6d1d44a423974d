use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use meanflow::sampler::Order;
use meanflow::schedule::Schedule;
use meanflow::train::Objective;
use meanflow::validate::Fault;

mod artifacts;
mod commands;
mod config;

use config::{FieldChoice, RunConfig};

#[derive(Debug)]
pub enum CliError {
    /// Bad config, flags or inputs. Exit code 2.
    Config(String),
    /// Runtime failure. Exit code 1.
    Failure(String),
    /// A validation suite reported failures. Exit code 1.
    Validation(Vec<String>),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Failure(_) | CliError::Validation(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Failure(m) => write!(f, "{m}"),
            CliError::Validation(items) => {
                writeln!(f, "validation failed ({} checks):", items.len())?;
                for item in items {
                    writeln!(f, "  {item}")?;
                }
                Ok(())
            }
        }
    }
}

impl From<meanflow::error::Error> for CliError {
    fn from(e: meanflow::error::Error) -> Self {
        use meanflow::error::Error as E;
        match e {
            E::Parameter { .. } | E::Config(_) | E::Shape { .. } | E::Json(_) | E::Precondition(_) => {
                CliError::Config(e.to_string())
            }
            _ => CliError::Failure(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "meanflow", version, about = "Train and sample MeanFlow models on Gaussian mixtures")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON run config; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// linear, trig or poly2.
    #[arg(long)]
    schedule: Option<Schedule>,
    /// Mixture JSON to read.
    #[arg(long)]
    mixture: Option<PathBuf>,
    /// Overwrite artifacts written under a different config.
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write mixture.json and data.csv.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Train a model against the mixture; writes checkpoint.json and loss files.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        objective: Option<Objective>,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Generate samples and score them against fresh data.
    Sample {
        #[command(flatten)]
        common: Common,
        /// Number of sampling steps.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        /// 1 or 2.
        #[arg(long)]
        order: Option<Order>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Use the mixture's exact average fields instead of a checkpoint.
        #[arg(long)]
        oracle: bool,
    },
    /// Run the consistency, boundary and convergence suites.
    Validate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        points: Option<usize>,
        /// Test hook: none or negate_average_acceleration.
        #[arg(long, value_parser = parse_fault)]
        inject_fault: Option<Fault>,
        /// Skip the sampler order study.
        #[arg(long)]
        skip_orders: bool,
    },
    /// Time attention kernels and the ViT sampling pipeline.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        repeats: Option<usize>,
    },
}

fn parse_fault(s: &str) -> Result<Fault, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

fn resolve(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => {
            let seed = common
                .seed
                .ok_or_else(|| CliError::Config("a seed is required (--seed or a config file)".into()))?;
            let out = common
                .out
                .clone()
                .ok_or_else(|| CliError::Config("an output directory is required (--out or a config file)".into()))?;
            serde_json::from_value(serde_json::json!({ "seed": seed, "output_dir": out }))
                .map_err(|e| CliError::Config(e.to_string()))?
        }
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    if let Some(s) = common.schedule {
        cfg.schedule = s;
    }
    if let Some(m) = &common.mixture {
        cfg.mixture = Some(m.clone());
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData { common, samples } => {
            let mut cfg = resolve(&common)?;
            if let Some(n) = samples {
                cfg.data.get_or_insert_with(Default::default).samples = n;
            }
            commands::gen_data(&cfg, common.force)
        }
        Command::Train {
            common,
            steps,
            batch,
            objective,
            resume,
        } => {
            let mut cfg = resolve(&common)?;
            let t = cfg.train.get_or_insert_with(Default::default);
            if let Some(v) = steps {
                t.steps = v;
            }
            if let Some(v) = batch {
                t.batch_size = v;
            }
            if let Some(v) = objective {
                t.objective = v;
            }
            commands::train(&cfg, resume, common.force)
        }
        Command::Sample {
            common,
            steps,
            batch,
            order,
            checkpoint,
            oracle,
        } => {
            let mut cfg = resolve(&common)?;
            let s = cfg.sample.get_or_insert_with(Default::default);
            if let Some(v) = steps {
                s.steps = v;
            }
            if let Some(v) = batch {
                s.batch = v;
            }
            if let Some(v) = order {
                s.order = v;
            }
            if let Some(v) = checkpoint {
                s.checkpoint = Some(v);
                s.source = FieldChoice::Checkpoint;
            }
            if oracle {
                s.source = FieldChoice::Oracle;
            }
            commands::sample(&cfg, common.force)
        }
        Command::Validate {
            common,
            points,
            inject_fault,
            skip_orders,
        } => {
            let mut cfg = resolve(&common)?;
            let v = cfg.validate.get_or_insert_with(Default::default);
            if let Some(p) = points {
                v.points = p;
            }
            if let Some(f) = inject_fault {
                v.fault = f;
            }
            if skip_orders {
                v.orders = false;
            }
            commands::validate(&cfg, common.force)
        }
        Command::Bench { common, repeats } => {
            let mut cfg = resolve(&common)?;
            let b = cfg.bench.get_or_insert_with(Default::default);
            if let Some(r) = repeats {
                b.repeats = r;
            }
            commands::bench(&cfg, common.force)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
