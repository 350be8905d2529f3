mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::{DataFormat, Overrides};

#[derive(Debug, Parser)]
#[command(name = "melemad", version, about = "Chunk-wise GBDT feature selection and MAML malware classification")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// TOML pipeline configuration. Flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed; each stage derives its own from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true, env = "MELEMAD_OUTPUT_DIR")]
    out_dir: Option<PathBuf>,
    /// Input dataset (.csv, or .bin for the binary format).
    #[arg(long, global = true)]
    input: Option<PathBuf>,
    /// Label column of a CSV input: a header name, or `#i` for a 0-based index.
    #[arg(long, global = true)]
    label_column: Option<String>,

    /// Chunk size as a fraction of the rows.
    #[arg(long, global = true)]
    p: Option<f64>,
    /// Overlap as a fraction of the chunk size.
    #[arg(long, global = true)]
    q: Option<f64>,
    /// Explicit number of chunks.
    #[arg(long, global = true)]
    k: Option<usize>,
    /// Importance threshold.
    #[arg(long, global = true, conflicts_with = "top_k")]
    tau: Option<f64>,
    /// Pick the threshold that keeps this many features.
    #[arg(long, global = true)]
    top_k: Option<usize>,

    /// Inner-loop learning rate.
    #[arg(long, global = true)]
    alpha: Option<f64>,
    /// Outer-loop learning rate.
    #[arg(long, global = true)]
    beta: Option<f64>,
    /// Outer-loop iterations.
    #[arg(long, global = true)]
    iterations: Option<usize>,
    #[arg(long, global = true)]
    tasks_per_batch: Option<usize>,
    #[arg(long, global = true)]
    support_size: Option<usize>,
    #[arg(long, global = true)]
    query_size: Option<usize>,
    #[arg(long, global = true)]
    first_order: Option<bool>,
}

impl GlobalArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            threads: self.threads,
            output_dir: self.out_dir.clone(),
            input: self.input.clone(),
            label_column: self.label_column.clone(),
            p: self.p,
            q: self.q,
            k: self.k,
            tau: self.tau,
            top_k: self.top_k,
            alpha: self.alpha,
            beta: self.beta,
            iterations: self.iterations,
            tasks_per_batch: self.tasks_per_batch,
            support_size: self.support_size,
            query_size: self.query_size,
            first_order: self.first_order,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset with known informative columns.
    Synth(SynthArgs),
    /// Run chunk-wise feature selection and project the dataset.
    Select,
    /// Split, scale and meta-train the classifier.
    MetaTrain(MetaTrainArgs),
    /// Score a checkpoint on the held-out meta-test pool.
    Evaluate(EvaluateArgs),
    /// select, meta-train and evaluate in one go (synthesizing data when no input is given).
    Run(SynthArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub informative: Option<usize>,
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    #[arg(long)]
    pub class_balance: Option<f64>,
    #[arg(long, value_enum)]
    pub format: Option<DataFormat>,
}

#[derive(Debug, Args)]
pub struct MetaTrainArgs {
    /// Continue from this checkpoint up to the configured iteration count.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Checkpoint every this many iterations (0: only at the end).
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Task pool. Defaults to projected.bin in the output directory.
    #[arg(long)]
    pub pool: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Defaults to checkpoint.bin in the output directory.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Meta-test pool. Defaults to meta_test.bin in the output directory.
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Decision threshold on the predicted probability.
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<commands::Invalid>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    let cfg = commands::resolve_config(cli.global.config.as_deref(), &cli.global.overrides())?;
    if let Some(threads) = cfg.threads {
        commands::init_threads(threads)?;
    }
    match cli.command {
        Command::Synth(a) => commands::cmd_synth(cfg, &a).map(|_| ()),
        Command::Select => commands::cmd_select(&cfg),
        Command::MetaTrain(a) => commands::cmd_meta_train(&cfg, &a),
        Command::Evaluate(a) => commands::cmd_evaluate(&cfg, &a),
        Command::Run(a) => commands::cmd_run(cfg, &a),
    }
}
