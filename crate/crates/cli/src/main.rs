//! `abuse-detect`: prepare data, train the fold models, predict and score.

mod commands;
mod config;
mod submission;

use std::path::PathBuf;
use std::process::ExitCode;

use abuse_detect_core::corpus::{Language, Source};
use abuse_detect_core::synthetic::SyntheticSpec;
use abuse_detect_core::training::{Task, TestCombination};
use abuse_detect_core::{Error, Result};
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(
    name = "abuse-detect",
    version,
    about = "Gendered-abuse detection with a CNN-BiLSTM classifier"
)]
struct Cli {
    /// Worker threads for fold training and inference (0 = all cores).
    #[arg(long, global = true, env = "ABUSE_DETECT_THREADS", default_value_t = 0)]
    threads: usize,
    /// Log progress (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Combination {
    Ensemble,
    BestFold,
}

#[derive(Subcommand)]
enum Command {
    /// Aggregate annotations into a labeled dataset and write the 80/20 split.
    Prepare {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        language: Language,
        #[arg(long)]
        task: Task,
        /// External corpus as `macd=PATH` or `multilate=PATH` (task 2 only).
        #[arg(long = "external", value_parser = parse_external)]
        external: Vec<(Source, PathBuf)>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Training fraction.
        #[arg(long, default_value_t = 0.8)]
        ratio: f64,
        /// Stratify the split by the task's first label.
        #[arg(long)]
        stratify: bool,
    },
    /// Run k-fold cross-validation and save fold checkpoints and reports.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `output_dir` from the config.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Overrides the training and model seeds.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write a submission CSV for unlabeled posts.
    Predict {
        #[arg(long)]
        run_dir: PathBuf,
        /// Canonical `.jsonl` dataset or a CSV with `id` and `text` columns.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the run's fold-combination rule.
        #[arg(long, value_enum)]
        combination: Option<Combination>,
    },
    /// Score a submission CSV against gold labels; prints JSON.
    Evaluate {
        /// Canonical `.jsonl` dataset or a submission-style CSV.
        #[arg(long)]
        gold: PathBuf,
        #[arg(long)]
        pred: PathBuf,
    },
    /// Report dimension, size, header detection and vocabulary coverage.
    InspectEmbeddings {
        #[arg(long)]
        file: PathBuf,
        /// `vocab.json` from a run, or a whitespace-separated token list.
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// Generate a marker-token corpus and matching word vectors.
    Synth {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 200)]
        examples: usize,
        #[arg(long, default_value = "en")]
        language: Language,
        #[arg(long, default_value_t = 300)]
        dimension: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

fn parse_external(s: &str) -> std::result::Result<(Source, PathBuf), String> {
    let (source, path) = s.split_once('=').ok_or("expected SOURCE=PATH")?;
    let source: Source = source.parse().map_err(|e: Error| e.to_string())?;
    Ok((source, PathBuf::from(path)))
}

fn run(cli: Cli) -> Result<()> {
    if cli.threads > 0 {
        // Only fails if a pool already exists, which cannot happen here.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global();
    }
    match cli.command {
        Command::Prepare {
            input,
            language,
            task,
            external,
            out,
            seed,
            ratio,
            stratify,
        } => commands::prepare(commands::PrepareArgs {
            input,
            language,
            task,
            external,
            out,
            seed,
            ratio,
            stratify,
        }),
        Command::Train { config, out_dir, seed } => commands::train(&config, out_dir, seed, cli.threads),
        Command::Predict {
            run_dir,
            input,
            out,
            combination,
        } => {
            let combination = combination.map(|c| match c {
                Combination::Ensemble => TestCombination::Ensemble,
                Combination::BestFold => TestCombination::BestFold,
            });
            commands::predict(&run_dir, &input, &out, combination)
        }
        Command::Evaluate { gold, pred } => commands::evaluate(&gold, &pred),
        Command::InspectEmbeddings { file, vocab } => commands::inspect_embeddings(&file, vocab.as_deref()),
        Command::Synth {
            out_dir,
            examples,
            language,
            dimension,
            seed,
        } => commands::synth(
            SyntheticSpec {
                examples,
                language,
                dimension,
                seed,
                ..SyntheticSpec::default()
            },
            &out_dir,
        ),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Numeric(_) => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}
