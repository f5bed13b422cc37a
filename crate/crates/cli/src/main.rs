use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use stepsim_core::corpus::{generate_synthetic, load_corpus, save_corpus, SyntheticConfig};
use stepsim_core::experiment::{
    from_toml_with_overrides, history_path, rankacc_command, read_summary, render_report, run_experiment, split_questions,
    train_command, ExperimentConfig, ExperimentError,
};
use stepsim_core::scorer::{load_weights, rank_acc_prefix_curve, TrainConfig};

/// Multi-trace reasoning engine simulator: corpora, scorer training,
/// RankAcc curves and policy experiments.
#[derive(Parser, Debug)]
#[command(name = "stepsim", version, about)]
struct Cli {
    /// More log output (repeat for debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic trace corpus as JSONL.
    Generate {
        /// TOML file with synthetic corpus parameters; defaults apply otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override a parameter, e.g. `--set num_questions=200`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the step scorer on a class-balanced subset of a corpus.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        /// Weights output; the history goes to `<out>.history.json`.
        #[arg(long)]
        out: PathBuf,
        /// TOML file with training hyperparameters.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Hold out this share of questions and report RankAcc on them.
        #[arg(long)]
        holdout: Option<f64>,
    },
    /// RankAcc of prefix-mean trace scores at several prefix fractions.
    Rankacc {
        #[arg(long)]
        corpus: PathBuf,
        /// Trained weights; without them the corpus's precomputed scores are used.
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "0.25,0.5,0.75,1.0")]
        fractions: Vec<f64>,
        /// CSV output for plotting.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run an experiment grid and write report.csv, summary.json and details.jsonl.
    Run {
        config: PathBuf,
        /// Override any config field, e.g. `--set engine.memory_budget_tokens=2048`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Print the config and the accuracy / latency / wait-decode breakdown of a finished run.
    Report {
        /// Output directory of a previous `run`.
        dir: PathBuf,
    },
}

fn read_optional(path: Option<&Path>) -> Result<Option<String>> {
    path.map(|p| fs::read_to_string(p).with_context(|| format!("reading {}", p.display())))
        .transpose()
}

fn generate(config: Option<&Path>, overrides: &[String], out: &Path) -> Result<()> {
    let cfg: SyntheticConfig = from_toml_with_overrides(read_optional(config)?.as_deref(), overrides)?;
    let corpus = generate_synthetic(&cfg)?;
    save_corpus(&corpus, out)?;
    println!(
        "wrote {} questions, {} traces to {}",
        corpus.questions.len(),
        corpus.num_traces(),
        out.display()
    );
    Ok(())
}

fn train(corpus: &Path, out: &Path, config: Option<&Path>, overrides: &[String], holdout: Option<f64>) -> Result<()> {
    let cfg: TrainConfig = from_toml_with_overrides(read_optional(config)?.as_deref(), overrides)?;
    cfg.validate()?;
    let corpus = load_corpus(corpus)?;
    let (train_set, held) = match holdout {
        Some(f) => {
            let (t, h) = split_questions(&corpus, f, cfg.seed)?;
            (t, Some(h))
        }
        None => (corpus, None),
    };
    let (weights, summary) = train_command(&train_set, &cfg, out)?;
    println!(
        "trained on {} traces per class ({} step samples); best epoch {} of {}",
        summary.kept_per_class,
        summary.step_samples,
        summary.best_epoch,
        summary.history.len()
    );
    println!("weights: {}", out.display());
    println!("history: {}", history_path(out).display());
    if let Some(held) = held {
        let curve = rank_acc_prefix_curve(&held, Some(&weights), &[1.0])?;
        println!("held-out RankAcc: {:.4} over {} questions", curve[0].1.value, curve[0].1.eligible);
    }
    Ok(())
}

fn rankacc(corpus: &Path, weights: Option<&Path>, fractions: &[f64], out: Option<&Path>) -> Result<()> {
    let corpus = load_corpus(corpus)?;
    let weights = weights.map(load_weights).transpose()?;
    let curve = rankacc_command(&corpus, weights.as_ref(), fractions, out)?;
    println!("fraction  rank_acc  eligible");
    for (k, r) in &curve {
        println!("{k:>8.3}  {:>8.4}  {:>8}", r.value, r.eligible);
    }
    Ok(())
}

fn run(config: &Path, overrides: &[String]) -> Result<()> {
    let cfg = ExperimentConfig::load(config, overrides)?;
    run_experiment(&cfg)?;
    let summary = read_summary(&cfg.output_dir)?;
    print!("{}", render_report(&summary));
    println!("outputs in {}", cfg.output_dir.display());
    Ok(())
}

/// Top-level message plus any causes it does not already include.
fn error_message(err: &anyhow::Error) -> String {
    let mut msg = err.to_string();
    for cause in err.chain().skip(1) {
        let c = cause.to_string();
        if !msg.contains(&c) {
            msg.push_str(": ");
            msg.push_str(&c);
        }
    }
    msg
}

fn error_kind(err: &anyhow::Error) -> &'static str {
    if let Some(e) = err.downcast_ref::<ExperimentError>() {
        e.kind()
    } else if err.downcast_ref::<stepsim_core::corpus::CorpusError>().is_some() {
        "corpus"
    } else if err.downcast_ref::<stepsim_core::scorer::ScorerError>().is_some() {
        "scorer"
    } else if err.downcast_ref::<std::io::Error>().is_some() {
        "io"
    } else {
        "error"
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = match &cli.command {
        Command::Generate {
            config,
            overrides,
            out,
        } => generate(config.as_deref(), overrides, out),
        Command::Train {
            corpus,
            out,
            config,
            overrides,
            holdout,
        } => train(corpus, out, config.as_deref(), overrides, *holdout),
        Command::Rankacc {
            corpus,
            weights,
            fractions,
            out,
        } => rankacc(corpus, weights.as_deref(), fractions, out.as_deref()),
        Command::Run { config, overrides } => run(config, overrides),
        Command::Report { dir } => read_summary(dir).map(|s| print!("{}", render_report(&s))).map_err(Into::into),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let line = serde_json::json!({ "error": error_kind(&err), "message": error_message(&err) });
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}
