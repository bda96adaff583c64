use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mtnlu::run::{self, EvalArgs, SoftArgs, TrainArgs};
use mtnlu::synthetic::SynthSpec;
use mtnlu::CliError;

#[derive(Parser)]
#[command(name = "mtnlu", version, about = "Multi-task NLU trainer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct TrainFlags {
    /// Task document; repeat to merge several.
    #[arg(long = "config", required = true)]
    configs: Vec<PathBuf>,
    #[arg(long)]
    plan: PathBuf,
    #[arg(long)]
    data_dir: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Overrides the plan's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Initialise parameters from a checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Continue a run from one of its stage checkpoints.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Vocabulary file, one token per line; built from training data if absent.
    #[arg(long)]
    vocab: Option<PathBuf>,
}

impl TrainFlags {
    fn into_args(self, soft_targets: Vec<PathBuf>, distill: bool) -> TrainArgs {
        TrainArgs {
            configs: self.configs,
            plan: self.plan,
            data_dir: self.data_dir,
            out_dir: self.out_dir,
            seed: self.seed,
            soft_targets,
            init: self.checkpoint,
            resume: self.resume,
            vocab: self.vocab,
            require_soft_targets: distill,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run a training plan.
    Train {
        #[command(flatten)]
        flags: TrainFlags,
        #[arg(long = "soft-targets")]
        soft_targets: Vec<PathBuf>,
    },
    /// Train a student against teacher soft targets.
    Distill {
        #[command(flatten)]
        flags: TrainFlags,
        #[arg(long = "soft-targets", required = true)]
        soft_targets: Vec<PathBuf>,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value = "dev")]
        split: String,
        #[arg(long = "task")]
        tasks: Vec<String>,
        /// Replacement task document, e.g. with other metrics.
        #[arg(long = "config")]
        configs: Vec<PathBuf>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write teacher soft targets for the training split.
    GenSoftTargets {
        /// Teacher checkpoint; repeat for an ensemble.
        #[arg(long = "checkpoint", required = true)]
        teachers: Vec<PathBuf>,
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long = "task")]
        tasks: Vec<String>,
        /// Student task document deciding the target kind.
        #[arg(long = "config")]
        configs: Vec<PathBuf>,
        #[arg(long, default_value_t = 64)]
        batch_size: usize,
    },
    /// Finite-difference check of the reference model.
    Gradcheck {
        #[arg(long, default_value = "transformer")]
        encoder: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Validate task documents and print them with defaults filled in.
    InspectConfig {
        #[arg(long = "config", required = true)]
        configs: Vec<PathBuf>,
        #[arg(long)]
        plan: Option<PathBuf>,
    },
    /// Generate a synthetic classification dataset.
    Synth {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2)]
        tasks: usize,
        #[arg(long, default_value_t = 2000)]
        train: usize,
        #[arg(long, default_value_t = 500)]
        dev: usize,
        #[arg(long, default_value_t = 0.3)]
        margin: f64,
        #[arg(long, default_value_t = 0.0)]
        label_noise: f64,
    },
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Train { flags, soft_targets } => run::train(&flags.into_args(soft_targets, false)),
        Command::Distill { flags, soft_targets } => run::train(&flags.into_args(soft_targets, true)),
        Command::Eval {
            checkpoint,
            data_dir,
            out_dir,
            split,
            tasks,
            configs,
            batch_size,
            seed,
        } => run::eval(&EvalArgs {
            checkpoint,
            data_dir,
            out_dir,
            split,
            tasks,
            configs,
            batch_size,
            seed,
        })
        .map(drop),
        Command::GenSoftTargets {
            teachers,
            data_dir,
            out_dir,
            tasks,
            configs,
            batch_size,
        } => run::gen_soft_targets(&SoftArgs {
            teachers,
            data_dir,
            out_dir,
            tasks,
            configs,
            batch_size,
        })
        .map(drop),
        Command::Gradcheck { encoder, seed } => run::gradcheck(&encoder, seed).map(|r| print!("{r}")),
        Command::InspectConfig { configs, plan } => run::inspect(&configs, plan.as_deref()).map(|t| print!("{t}")),
        Command::Synth {
            out_dir,
            seed,
            tasks,
            train,
            dev,
            margin,
            label_noise,
        } => {
            if !(0.0..1.0).contains(&label_noise) {
                return Err(CliError::config(format!("label_noise must lie in [0, 1), got {label_noise}")));
            }
            let spec = SynthSpec {
                tasks,
                train,
                dev,
                margin,
                label_noise,
                ..Default::default()
            };
            run::synth(&spec, seed, &out_dir)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
