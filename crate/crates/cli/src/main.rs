//! `evdet` command line: training, prediction, scoring and corpus utilities.
//!
//! Exit codes: 0 success, 1 validation error (bad flags, missing or
//! malformed inputs), 2 runtime failure (divergence, I/O while writing).

mod commands;
mod error;

use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use evdet::training::{ConfigError, PredictMode, RunConfig};

use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "evdet", version, about = "Few-shot event detection with cloze prompts and a type-conditioned CRF")]
struct Cli {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 0 uses all cores. `--threads 1` is fully serial.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Log more (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    /// Only log errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

macro_rules! config_overrides {
    ($($field:ident),* $(,)?) => {
        /// Long-form flags mirroring the run config keys; they win over the
        /// config file.
        #[derive(Debug, Default, Args)]
        struct ConfigOverrides {
            $(
                #[arg(long, value_name = "VALUE", help = concat!("Override `", stringify!($field), "`"))]
                $field: Option<String>,
            )*
        }

        impl ConfigOverrides {
            fn apply(&self, config: &mut RunConfig) -> Result<(), ConfigError> {
                $(
                    if let Some(v) = &self.$field {
                        config.set(stringify!($field), v)?;
                    }
                )*
                Ok(())
            }
        }
    };
}

config_overrides!(
    encoder,
    dim,
    max_seq_len,
    batch_size,
    learning_rate,
    schedule,
    weight_decay,
    warmup_steps,
    epochs,
    adam_epsilon,
    grad_clip,
    loss,
    margin,
    prompt,
    aggregation,
    prompt_mode,
    max_keywords,
    attention,
    constrained,
    prompt_keys,
    negative_pair_ratio,
    auto_verbalizers,
    verbalizers_per_type,
    train,
    dev,
    ontology,
    null_pool,
    null_ratio,
);

#[derive(Debug, Args)]
struct ConfigArgs {
    /// Run config (`key = value` lines, or `.json`).
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: ConfigOverrides,
}

impl ConfigArgs {
    fn resolve(&self, seed: Option<u64>) -> Result<RunConfig, CliError> {
        let mut config = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        self.overrides.apply(&mut config)?;
        if let Some(seed) = seed {
            config.seed = seed;
        }
        config.validate()?;
        Ok(config)
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model and optionally save a checkpoint.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Checkpoint directory to write.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Write training history and train-set scores as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Drop mentions of types missing from the ontology instead of failing.
        #[arg(long)]
        skip_unknown_types: bool,
    },
    /// Tag sentences with a saved model.
    Predict {
        /// Checkpoint directory.
        #[arg(long)]
        model: PathBuf,
        /// JSONL sentences; gold mentions, if present, are ignored.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// `two_stage` or `enumerate`.
        #[arg(long, default_value = "two_stage")]
        mode: PredictMode,
    },
    /// Score predictions against gold. Several `--pred` files are also
    /// summarized as mean and standard deviation.
    Evaluate {
        #[arg(long, required = true)]
        pred: Vec<PathBuf>,
        #[arg(long)]
        gold: PathBuf,
        /// Score sentence-level type sets instead of mentions.
        #[arg(long)]
        identification: bool,
        /// Print JSON instead of a table.
        #[arg(long)]
        json: bool,
        /// Also write the JSON report here.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Pick verbalizers from training triggers with the frozen encoder.
    SelectVerbalizers {
        #[command(flatten)]
        config: ConfigArgs,
        /// Ontology file to write with the selected verbalizers.
        #[arg(long)]
        output: PathBuf,
    },
    /// Sample a K-shot train split; the rest becomes the test split.
    SampleSplit {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        ontology: PathBuf,
        #[arg(long)]
        k: usize,
        #[arg(long)]
        train_out: PathBuf,
        #[arg(long)]
        test_out: PathBuf,
        #[arg(long)]
        skip_unknown_types: bool,
    },
    /// Add NULL sentences from a pool at a ratio of the event-bearing ones.
    InjectNull {
        #[arg(long)]
        train: PathBuf,
        #[arg(long, requires = "test_out")]
        test: Option<PathBuf>,
        #[arg(long)]
        pool: PathBuf,
        #[arg(long)]
        ratio: f64,
        #[arg(long)]
        train_out: PathBuf,
        #[arg(long)]
        test_out: Option<PathBuf>,
        /// Leave the test split untouched.
        #[arg(long)]
        no_mirror: bool,
    },
}

fn init_logging(verbose: u8, quiet: bool) {
    let level = match (quiet, verbose) {
        (true, _) => log::LevelFilter::Error,
        (false, 0) => log::LevelFilter::Warn,
        (false, 1) => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format(|buf, record| writeln!(buf, "[{}] {}", record.level(), record.args()))
        .target(env_logger::Target::Stderr)
        .init();
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    init_logging(cli.verbose, cli.quiet);
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
        eprintln!("error: cannot start thread pool: {e}");
        return ExitCode::from(2);
    }
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
