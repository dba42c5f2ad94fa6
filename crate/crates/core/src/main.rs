//! Command-line entry point: generate synthetic datasets, train the
//! triple-stream model, evaluate checkpoints, and project embeddings to 2-D.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use tristream::config::{load_run_config, RunConfig};
use tristream::datagen::{generate, read_dataset, split, write_dataset, Dataset};
use tristream::error::Result;
use tristream::evaluator::evaluate;
use tristream::trainer::{load_checkpoint, save_checkpoint, train, Checkpoint};
use tristream::tsne::{export_kl_trace, export_layout, tsne};

#[derive(Parser)]
#[command(
    name = "tristream",
    about = "Triple-stream metric learning for long-tailed behavioural action recognition",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum QuerySplit {
    Train,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic long-tailed three-stream dataset.
    Generate {
        /// Run configuration (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Output directory for manifest.json + stream blobs.
        #[arg(long)]
        out: PathBuf,
        /// Override every seed in the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model on a generated dataset and write a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory produced by `generate`.
        #[arg(long)]
        data: PathBuf,
        /// Output directory for checkpoint, history.csv and eval.json.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint with k-NN retrieval; prints a JSON report.
    Evaluate {
        /// Checkpoint directory produced by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Neighbours per query (defaults to the value used in training config's eval section, 5).
        #[arg(long)]
        k: Option<usize>,
        /// Which side of the stored split to use as queries.
        #[arg(long, value_enum, default_value = "test")]
        queries: QuerySplit,
    },
    /// Project test-split embeddings to 2-D with t-SNE.
    Project {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output directory for layout.csv and kl.csv.
        #[arg(long)]
        out: PathBuf,
        /// Optional run config supplying the tsne section (defaults otherwise).
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Generate { config, out, seed } => cmd_generate(&config, &out, seed),
        Command::Train {
            config,
            data,
            out,
            seed,
        } => cmd_train(&config, &data, &out, seed),
        Command::Evaluate {
            checkpoint,
            data,
            k,
            queries,
        } => cmd_evaluate(&checkpoint, &data, k, queries),
        Command::Project {
            checkpoint,
            data,
            out,
            config,
        } => cmd_project(&checkpoint, &data, &out, config.as_deref()),
    }
}

fn load_config(path: &std::path::Path, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = load_run_config(path)?;
    if let Some(s) = seed {
        cfg.override_seeds(s);
    }
    Ok(cfg)
}

fn cmd_generate(config: &std::path::Path, out: &std::path::Path, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(config, seed)?;
    let ds = generate(&cfg.dataset)?;
    std::fs::create_dir_all(out)?;
    write_dataset(&ds, out)?;
    eprintln!(
        "generated {} snippets across {} classes -> {}",
        ds.len(),
        ds.num_classes(),
        out.display()
    );
    Ok(())
}

fn cmd_train(
    config: &std::path::Path,
    data: &std::path::Path,
    out: &std::path::Path,
    seed: Option<u64>,
) -> Result<()> {
    let cfg = load_config(config, seed)?;
    let ds = read_dataset(data)?;
    let (train_ds, test_ds) = split(&ds, cfg.train.train_fraction, cfg.train.seed)?;
    eprintln!(
        "training on {} snippets, holding out {}",
        train_ds.len(),
        test_ds.len()
    );
    let (ckpt, history) = train(
        &cfg.model,
        &cfg.train,
        &cfg.dataset,
        &train_ds,
        &test_ds,
        cfg.eval.k,
    )?;
    std::fs::create_dir_all(out)?;
    save_checkpoint(&ckpt, out)?;
    std::fs::write(out.join("history.csv"), history.to_csv())?;
    let report = evaluate(
        &ckpt.params,
        &ckpt.model,
        &train_ds,
        &test_ds,
        cfg.eval.k,
        &cfg.dataset.head_classes,
    )?;
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| tristream::Error::Config(e.to_string()))?;
    std::fs::write(out.join("eval.json"), &json)?;
    println!("{json}");
    Ok(())
}

/// Re-create the train/test split stored implicitly in the checkpoint's
/// training config, so evaluation sees exactly the held-out snippets.
fn resplit(ckpt: &Checkpoint, data: &std::path::Path) -> Result<(Dataset, Dataset)> {
    let ds = read_dataset(data)?;
    split(&ds, ckpt.train.train_fraction, ckpt.train.seed)
}

fn cmd_evaluate(
    checkpoint: &std::path::Path,
    data: &std::path::Path,
    k: Option<usize>,
    queries: QuerySplit,
) -> Result<()> {
    let ckpt = load_checkpoint(checkpoint)?;
    let (train_ds, test_ds) = resplit(&ckpt, data)?;
    let k = k.unwrap_or(tristream::evaluator::DEFAULT_K);
    let queries_ds = match queries {
        QuerySplit::Train => &train_ds,
        QuerySplit::Test => &test_ds,
    };
    let report = evaluate(
        &ckpt.params,
        &ckpt.model,
        &train_ds,
        queries_ds,
        k,
        &ckpt.dataset.head_classes,
    )?;
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| tristream::Error::Config(e.to_string()))?;
    println!("{json}");
    Ok(())
}

fn cmd_project(
    checkpoint: &std::path::Path,
    data: &std::path::Path,
    out: &std::path::Path,
    config: Option<&std::path::Path>,
) -> Result<()> {
    let ckpt = load_checkpoint(checkpoint)?;
    let (_train_ds, test_ds) = resplit(&ckpt, data)?;
    let tsne_cfg = match config {
        Some(p) => load_run_config(p)?.tsne,
        None => Default::default(),
    };
    let points = tristream::trainer::embed_dataset(&ckpt.params, &ckpt.model, &test_ds)?;
    let (layout, trace) = tsne(&points, &tsne_cfg)?;
    let labels: Vec<usize> = test_ds.snippets.iter().map(|s| s.label).collect();
    std::fs::create_dir_all(out)?;
    export_layout(&layout, &labels, &out.join("layout.csv"))?;
    export_kl_trace(&trace, &out.join("kl.csv"))?;
    eprintln!(
        "projected {} embeddings; final KL {:.6}",
        layout.len(),
        trace.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}
