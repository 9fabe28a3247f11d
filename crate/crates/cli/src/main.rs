mod config;
mod data;
mod diag;
mod error;
mod run;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use absa_core::finetune::UnfreezeStrategy;
use absa_core::text::InputField;
use clap::{Parser, Subcommand, ValueEnum};

use config::{Overrides, RunConfig, Target};
use error::{CliError, CliResult};
use run::{EvalArgs, EvalTask, TrainCommand};

/// Staged LSTM language-model transfer learning for financial aspect
/// classification and sentiment regression.
#[derive(Parser, Debug)]
#[command(name = "absa", version)]
struct Cli {
    /// TOML or JSON run configuration.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override one config value, e.g. `--set train.lr_max=0.01`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Seed for every random choice of the command.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for every file the command writes.
    #[arg(long, global = true, value_name = "DIR")]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Language-model pretraining on a general corpus.
    Pretrain,
    /// Language-model fine-tuning on the domain corpus.
    FinetuneLm,
    /// Auxiliary classification (long/short position or coarse aspect).
    FinetuneAux,
    /// Target aspect classification.
    TrainClassifier,
    /// Target sentiment regression.
    TrainRegressor,
    /// Score a task checkpoint on a labelled file; prints metrics JSON.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        task: EvalTask,
        /// Label set to score against. Unset: inferred from the checkpoint.
        #[arg(long, value_enum)]
        target: Option<TargetArg>,
        #[arg(long)]
        hierarchy: Option<PathBuf>,
        #[arg(long, value_enum)]
        field: Option<FieldArg>,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
    },
    /// Learning curve over training-set fractions and seeds; prints the CSV path.
    Curve,
    /// Numerical and scheduling diagnostics; no data needed.
    #[command(subcommand)]
    Diag(Diag),
    /// Write a small synthetic dataset and matching demo configs.
    Synth {
        #[arg(long, default_value_t = 200)]
        n_fiqa: usize,
    },
}

#[derive(Subcommand, Debug)]
enum Diag {
    /// Finite-difference checks of every differentiable op.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        /// Also check the full tiny encoder.
        #[arg(long)]
        encoder: bool,
        /// Step for the encoder check.
        #[arg(long, default_value_t = 1e-6)]
        eps: f64,
    },
    /// Slanted triangular schedule as `t,lr` CSV.
    ScheduleDump {
        #[arg(long, default_value_t = 100)]
        total: usize,
        #[arg(long, default_value_t = 0.1)]
        cut_frac: f64,
        #[arg(long, default_value_t = 32.0)]
        ratio: f64,
        #[arg(long, default_value_t = 0.01)]
        lr_max: f64,
    },
    /// Phases of an unfreezing plan.
    PlanDump {
        #[arg(long, value_enum, default_value_t = StrategyArg::Gradual)]
        strategy: StrategyArg,
        #[arg(long, default_value_t = 5)]
        groups: usize,
        /// Phases for gradual; epoch cap otherwise.
        #[arg(long)]
        epochs: Option<usize>,
        /// Phases kept by chain-thaw-partial.
        #[arg(long, default_value_t = 1)]
        k: usize,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TargetArg {
    Position,
    AspectL1,
    AspectL2,
    Sentiment,
}

impl From<TargetArg> for Target {
    fn from(t: TargetArg) -> Self {
        match t {
            TargetArg::Position => Target::Position,
            TargetArg::AspectL1 => Target::AspectL1,
            TargetArg::AspectL2 => Target::AspectL2,
            TargetArg::Sentiment => Target::Sentiment,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FieldArg {
    Sentence,
    Snippet,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum StrategyArg {
    Gradual,
    ChainThawFull,
    ChainThawPartial,
    AllAtOnce,
}

fn print_stdout(text: &str) -> CliResult<()> {
    let mut out = std::io::stdout().lock();
    out.write_all(text.as_bytes())
        .and_then(|_| out.flush())
        .map_err(CliError::internal)
}

fn print_json(value: &serde_json::Value) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(CliError::internal)?;
    print_stdout(&format!("{text}\n"))
}

fn execute(cli: Cli) -> CliResult<()> {
    let overrides = Overrides {
        sets: cli.sets,
        seed: cli.seed,
        out_dir: cli.out_dir,
    };
    let cfg: RunConfig = config::resolve(cli.config.as_deref(), std::env::vars(), &overrides)
        .map_err(|e| CliError::new(error::EXIT_CONFIG, e))?;

    let train = |c| -> CliResult<()> { print_json(&run::train(c, &cfg)?) };
    match cli.command {
        Command::Pretrain => train(TrainCommand::Pretrain),
        Command::FinetuneLm => train(TrainCommand::FinetuneLm),
        Command::FinetuneAux => train(TrainCommand::FinetuneAux),
        Command::TrainClassifier => train(TrainCommand::TrainClassifier),
        Command::TrainRegressor => train(TrainCommand::TrainRegressor),
        Command::Evaluate {
            checkpoint,
            data,
            task,
            target,
            hierarchy,
            field,
            batch_size,
        } => {
            let args = EvalArgs {
                checkpoint,
                data,
                task,
                target: target.map(Into::into),
                hierarchy,
                field: field.map(|f| match f {
                    FieldArg::Sentence => InputField::Sentence,
                    FieldArg::Snippet => InputField::Snippet,
                }),
                batch_size,
            };
            print_json(&run::evaluate(&args, &cfg)?)
        }
        Command::Curve => {
            let path = run::curve(&cfg)?;
            print_stdout(&format!("{}\n", path.display()))
        }
        Command::Diag(Diag::Gradcheck {
            seeds,
            encoder,
            eps,
        }) => {
            let (report, ok) = diag::gradcheck(cfg.seed, seeds, eps, encoder)?;
            print_stdout(&report)?;
            if ok {
                Ok(())
            } else {
                Err(CliError::numerical(
                    "a gradient check reached the 1e-4 tolerance",
                ))
            }
        }
        Command::Diag(Diag::ScheduleDump {
            total,
            cut_frac,
            ratio,
            lr_max,
        }) => print_stdout(&diag::schedule_dump(total, cut_frac, ratio, lr_max)?),
        Command::Diag(Diag::PlanDump {
            strategy,
            groups,
            epochs,
            k,
        }) => {
            let strategy = match strategy {
                StrategyArg::Gradual => UnfreezeStrategy::Gradual,
                StrategyArg::ChainThawFull => UnfreezeStrategy::ChainThawFull,
                StrategyArg::ChainThawPartial => UnfreezeStrategy::ChainThawPartial { k },
                StrategyArg::AllAtOnce => UnfreezeStrategy::AllAtOnce,
            };
            let epochs = epochs.unwrap_or(match strategy {
                UnfreezeStrategy::Gradual => groups,
                _ => cfg.train.epochs,
            });
            print_stdout(&diag::plan_dump(
                &strategy,
                groups,
                epochs,
                cfg.train.patience,
                cfg.train.min_delta,
            )?)
        }
        Command::Synth { n_fiqa } => {
            let files = diag::synth(&cfg.out_dir, cfg.seed, n_fiqa)?;
            let listing: String = files
                .iter()
                .map(|f| format!("{}\n", cfg.out_dir.join(f).display()))
                .collect();
            print_stdout(&listing)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
