use std::path::PathBuf;
use std::process::ExitCode;

use advtrain::config::RunConfig;
use advtrain::persist::DigestPolicy;
use advtrain::{Error, Precision};
use clap::{Args, Parser, Subcommand};

mod commands;

/// Adversarial and delayed adversarial training on small networks.
#[derive(Parser)]
#[command(name = "advtrain", version)]
struct Cli {
    /// Worker threads for data-parallel kernels (all cores when absent).
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON run configuration.
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Dot-path overrides such as `train.attack.epsilon=0.2`; keys outside
    /// the top level refer to the `train` section (`epochs=1`).
    #[arg(long = "override", value_name = "K=V", num_args = 1..)]
    overrides: Vec<String>,
    /// Output directory, replacing `output_dir` from the config.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    #[arg(long, value_parser = parse_precision, value_name = "32|64")]
    precision: Option<Precision>,
    /// Refuse checkpoints written under a different config digest.
    #[arg(long)]
    strict_digest: bool,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig, Failure> {
        let mut cfg = RunConfig::load(&self.config, &self.overrides).map_err(Failure::config)?;
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        if let Some(p) = self.precision {
            cfg.precision = p;
        }
        Ok(cfg)
    }

    fn digest_policy(&self) -> DigestPolicy {
        if self.strict_digest {
            DigestPolicy::Fail
        } else {
            DigestPolicy::Warn
        }
    }
}

fn parse_precision(s: &str) -> Result<Precision, String> {
    let bits: u32 = s.parse().map_err(|_| format!("expected 32 or 64, got {s:?}"))?;
    Precision::try_from(bits)
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes metrics, checkpoints and a summary.
    Train {
        #[command(flatten)]
        args: ConfigArgs,
        /// Continue from a checkpoint (the newest in the output directory
        /// when no path is given).
        #[arg(long, value_name = "CKPT", num_args = 0..=1)]
        resume: Option<Option<PathBuf>>,
    },
    /// Robust accuracy of a checkpoint over the configured (T, ε) grid.
    Sweep {
        #[command(flatten)]
        args: ConfigArgs,
        #[arg(long, value_name = "CKPT")]
        checkpoint: PathBuf,
    },
    /// Accuracy of the newest checkpoint on adversaries from every earlier one.
    Profile {
        #[command(flatten)]
        args: ConfigArgs,
        /// Directory of checkpoints (the output directory when absent).
        #[arg(long, value_name = "DIR")]
        checkpoints: Option<PathBuf>,
    },
    /// Write adversarial examples for the evaluation set as IDX files.
    Attack {
        #[command(flatten)]
        args: ConfigArgs,
        #[arg(long, value_name = "CKPT")]
        checkpoint: PathBuf,
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Compare a regular and a delayed run: time saved and final accuracies.
    Report {
        #[arg(long, num_args = 2, value_names = ["RAT_DIR", "DAT_DIR"], required = true)]
        compare: Vec<PathBuf>,
        #[arg(long, value_name = "DIR", default_value = "runs/report")]
        out: PathBuf,
    },
}

/// An error together with the process exit code it maps to: 2 for anything
/// wrong with the configuration, 1 for failures while running.
pub struct Failure {
    code: u8,
    error: Error,
}

impl Failure {
    fn config(error: Error) -> Self {
        Self { code: 2, error }
    }
}

impl From<Error> for Failure {
    fn from(error: Error) -> Self {
        let code = match error {
            Error::Config(_) | Error::Json(_) => 2,
            _ => 1,
        };
        Self { code, error }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        advtrain::parallel::configure_threads(n);
    }
    let result = match cli.command {
        Command::Train { args, resume } => args
            .resolve()
            .and_then(|cfg| commands::train(&cfg, resume, args.digest_policy())),
        Command::Sweep { args, checkpoint } => args
            .resolve()
            .and_then(|cfg| commands::sweep(&cfg, &checkpoint, args.digest_policy())),
        Command::Profile { args, checkpoints } => args.resolve().and_then(|cfg| {
            let dir = checkpoints.unwrap_or_else(|| cfg.output_dir.clone());
            commands::profile(&cfg, &dir, args.digest_policy())
        }),
        Command::Attack {
            args,
            checkpoint,
            epsilon,
            steps,
            alpha,
        } => args.resolve().and_then(|cfg| {
            let mut attack = cfg.eval_attack();
            attack.epsilon = epsilon.unwrap_or(attack.epsilon);
            attack.steps = steps.unwrap_or(attack.steps);
            attack.alpha = alpha.unwrap_or(attack.alpha);
            attack.validate().map_err(Failure::config)?;
            commands::attack(&cfg, &checkpoint, &attack, args.digest_policy())
        }),
        Command::Report { compare, out } => commands::report(&compare[0], &compare[1], &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.error);
            ExitCode::from(f.code)
        }
    }
}
