//! The subcommands. Every input is validated before the first file is
//! written, and every file goes through a temp-then-rename write.

use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use melemad::cfsgb::{make_chunks, run_cfsgb, threshold_for_top_k};
use melemad::dataset::{
    apply_scaler, fit_scaler, load_any, save_binary, save_csv, stratified_split, synthesize, LabelColumn, LabeledDataset,
};
use melemad::io::write_atomic;
use melemad::maml::{meta_evaluate, AdamState, Checkpoint, MamlConfig, MetaTrainer, TrainLog};
use melemad::metrics::MetricsReport;

use crate::config::{PipelineConfig, Selection};
use crate::{EvaluateArgs, MetaTrainArgs, SynthArgs};

/// Marks an error as a validation failure (exit code 2).
#[derive(Debug)]
pub struct Invalid;

impl fmt::Display for Invalid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("invalid input")
    }
}

trait OrInvalid<T> {
    fn invalid(self) -> Result<T>;
}

impl<T, E: Into<anyhow::Error>> OrInvalid<T> for std::result::Result<T, E> {
    fn invalid(self) -> Result<T> {
        self.map_err(|e| e.into().context(Invalid))
    }
}

fn invalid(msg: String) -> anyhow::Error {
    anyhow!(msg).context(Invalid)
}

pub fn resolve_config(path: Option<&Path>, overrides: &crate::config::Overrides) -> Result<PipelineConfig> {
    let mut cfg = match path {
        Some(p) => PipelineConfig::load(p).invalid()?,
        None => PipelineConfig::default(),
    };
    cfg.apply(overrides);
    Ok(cfg)
}

pub fn init_threads(threads: usize) -> Result<()> {
    if threads == 0 {
        return Err(invalid("threads must be >= 1".into()));
    }
    rayon::ThreadPoolBuilder::new().num_threads(threads).build_global().context("starting the thread pool")
}

fn label_column(spec: &str) -> LabelColumn {
    match spec.strip_prefix('#').and_then(|i| i.parse().ok()) {
        Some(i) => LabelColumn::Index(i),
        None => LabelColumn::Name(spec.to_string()),
    }
}

fn load_dataset(path: &Path, cfg: &PipelineConfig) -> Result<LabeledDataset> {
    load_any(path, &label_column(&cfg.data.label_column))
        .with_context(|| format!("loading {}", path.display()))
        .invalid()
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes()).with_context(|| format!("writing {}", path.display()))
}

fn to_json<T: serde::Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)? + "\n")
}

/// Writes `synthetic.{csv,bin}` and `informative.json`; returns the dataset path.
pub fn cmd_synth(mut cfg: PipelineConfig, a: &SynthArgs) -> Result<PathBuf> {
    let s = &mut cfg.synthetic;
    s.n = a.n.unwrap_or(s.n);
    s.m = a.m.unwrap_or(s.m);
    s.informative = a.informative.unwrap_or(s.informative);
    s.noise_sigma = a.noise_sigma.unwrap_or(s.noise_sigma);
    s.class_balance = a.class_balance.unwrap_or(s.class_balance);
    s.format = a.format.unwrap_or(s.format);
    let spec = cfg.synthetic_spec().invalid()?;

    let (ds, informative) = synthesize(&spec)?;
    let out = cfg.output_dir();
    let path = out.join(format!("synthetic.{}", cfg.synthetic.format.extension()));
    match cfg.synthetic.format {
        crate::config::DataFormat::Csv => save_csv(&ds, &path)?,
        crate::config::DataFormat::Bin => save_binary(&ds, &path)?,
    }
    write_text(&out.join("informative.json"), &to_json(&serde_json::json!({ "informative": informative }))?)?;
    eprintln!("wrote {} ({} x {})", path.display(), ds.n_samples(), ds.n_features());
    Ok(path)
}

/// Writes `selected_features.json`, `projected.bin`, `cfsgb_report.json` and
/// the wall-clock stage timings in `cfsgb_timings.json`.
pub fn cmd_select(cfg: &PipelineConfig) -> Result<()> {
    cfg.global_seed().invalid()?;
    let spec = cfg.chunk_spec().invalid()?;
    let gbdt = cfg.gbdt_config().invalid()?;
    let selection = cfg.selection().invalid()?;
    let input = cfg.data.input.as_deref().ok_or_else(|| invalid("select needs --input or [data] input".into()))?;
    let ds = load_dataset(input, cfg)?;
    make_chunks(ds.n_samples(), &spec).invalid()?;
    if let Selection::TopK(k) = selection {
        if k > ds.n_features() {
            return Err(invalid(format!("top_k = {k} exceeds the {} input features", ds.n_features())));
        }
    }

    let tau = match selection {
        Selection::Threshold(t) => t,
        Selection::TopK(k) => threshold_for_top_k(&ds, &spec, &gbdt, k)?,
    };
    let (selected, projected, report) = run_cfsgb(&ds, &spec, &gbdt, tau)?;

    let mut report_json = serde_json::to_value(&report)?;
    let timings = report_json
        .as_object_mut()
        .and_then(|o| o.remove("timings"))
        .context("report has no timings")?;
    report_json["threshold"] = serde_json::json!(tau);
    if let Selection::TopK(k) = selection {
        report_json["top_k"] = serde_json::json!(k);
    }

    let out = cfg.output_dir();
    write_text(&out.join("selected_features.json"), &(selected.to_json()? + "\n"))?;
    save_binary(&projected, &out.join("projected.bin"))?;
    write_text(&out.join("cfsgb_report.json"), &to_json(&report_json)?)?;
    write_text(&out.join("cfsgb_timings.json"), &to_json(&timings)?)?;
    eprintln!(
        "selected {} of {} features over {} chunks (tau = {tau})",
        selected.len(),
        ds.n_features(),
        report.k
    );
    Ok(())
}

/// The configuration with the iteration budget neutralised, for comparing a
/// checkpoint against the run that resumes it.
fn resumable(cfg: &MamlConfig) -> MamlConfig {
    MamlConfig { outer_iterations: 0, ..cfg.clone() }
}

/// Rows of an earlier `train_log.csv` for iterations before `upto`.
fn earlier_log_rows(path: &Path, upto: u64) -> Result<String> {
    if !path.exists() {
        return Ok(String::new());
    }
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut kept = String::new();
    for line in text.lines().skip(1) {
        let iteration: u64 = line
            .split(',')
            .next()
            .and_then(|f| f.parse().ok())
            .with_context(|| format!("malformed row in {}: {line:?}", path.display()))
            .invalid()?;
        if iteration < upto {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    Ok(kept)
}

/// Splits the projected pool, scales it on the training side, meta-trains
/// and writes `scaler.json`, `meta_test.bin`, `checkpoint.bin` and `train_log.csv`.
pub fn cmd_meta_train(cfg: &PipelineConfig, a: &MetaTrainArgs) -> Result<()> {
    cfg.global_seed().invalid()?;
    let mcfg = cfg.maml_config().invalid()?;
    let split = cfg.split_spec().invalid()?;
    let every = a.checkpoint_every.unwrap_or(cfg.meta_learning.checkpoint_every);
    let out = cfg.output_dir();
    let pool_path = a.pool.clone().unwrap_or_else(|| out.join("projected.bin"));
    let pool = load_dataset(&pool_path, cfg)?;
    let arch = mcfg.architecture(pool.n_features()).invalid()?;

    let (train, test) = stratified_split(&pool, &split).invalid()?;
    let (train, test, scaler) = if cfg.data.scale {
        let sp = fit_scaler(&train);
        (apply_scaler(&train, &sp)?, apply_scaler(&test, &sp)?, Some(sp))
    } else {
        (train, test, None)
    };
    for (name, side) in [("meta-train", &train), ("meta-test", &test)] {
        if side.n_samples() < mcfg.samples_per_task {
            return Err(invalid(format!(
                "the {name} pool has {} rows, fewer than the {} samples per task",
                side.n_samples(),
                mcfg.samples_per_task
            )));
        }
    }

    let log_path = out.join("train_log.csv");
    let (mut trainer, mut rows) = match &a.resume {
        None => (MetaTrainer::new(&train, &mcfg)?, String::new()),
        Some(path) => {
            let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display())).invalid()?;
            if ck.params.architecture != arch {
                return Err(invalid("checkpoint architecture does not match the data and configuration".into()));
            }
            if resumable(&ck.config) != resumable(&mcfg) {
                return Err(invalid("checkpoint was trained with a different configuration".into()));
            }
            if ck.iteration > mcfg.outer_iterations as u64 {
                return Err(invalid(format!(
                    "checkpoint is at iteration {}, past the configured {}",
                    ck.iteration, mcfg.outer_iterations
                )));
            }
            let adam = match ck.adam {
                Some(adam) => adam,
                None => AdamState::new(ck.params.len()),
            };
            let rows = earlier_log_rows(&log_path, ck.iteration)?;
            (MetaTrainer::resume(ck.params, adam, ck.iteration), rows)
        }
    };

    if let Some(sp) = &scaler {
        write_text(&out.join("scaler.json"), &(sp.to_json()? + "\n"))?;
    }
    save_binary(&test, &out.join("meta_test.bin"))?;

    let save = |trainer: &MetaTrainer, rows: &str| -> Result<()> {
        let ck = Checkpoint {
            params: trainer.params.clone(),
            config: mcfg.clone(),
            iteration: trainer.iteration,
            adam: Some(trainer.adam.clone()),
        };
        ck.save(&out.join("checkpoint.bin"))?;
        write_text(&log_path, &(TrainLog::default().to_csv() + rows))
    };

    let start = trainer.iteration;
    for _ in start..mcfg.outer_iterations as u64 {
        let entry = trainer.step(&train, &mcfg)?;
        let log = TrainLog { entries: vec![entry] };
        rows.push_str(log.to_csv().split_once('\n').map_or("", |(_, r)| r));
        if every > 0 && trainer.iteration % every as u64 == 0 {
            save(&trainer, &rows)?;
        }
    }
    save(&trainer, &rows)?;
    eprintln!("meta-trained {} -> {} iterations", start, trainer.iteration);
    Ok(())
}

/// Writes `metrics_report.json` and `roc.csv`.
pub fn cmd_evaluate(cfg: &PipelineConfig, a: &EvaluateArgs) -> Result<()> {
    if !(0.0..=1.0).contains(&a.threshold) {
        return Err(invalid(format!("threshold {} must lie in [0, 1]", a.threshold)));
    }
    let out = cfg.output_dir();
    let ck_path = a.checkpoint.clone().unwrap_or_else(|| out.join("checkpoint.bin"));
    let ck = Checkpoint::load(&ck_path).with_context(|| format!("loading {}", ck_path.display())).invalid()?;
    let test = load_dataset(&a.test.clone().unwrap_or_else(|| out.join("meta_test.bin")), cfg)?;
    if test.n_features() != ck.params.architecture.input_dim {
        return Err(invalid(format!(
            "checkpoint expects {} features, the test pool has {}",
            ck.params.architecture.input_dim,
            test.n_features()
        )));
    }

    let (probs, labels) = meta_evaluate(&ck.params, &test, &ck.config)?;
    let report = MetricsReport::from_predictions(&probs, &labels, a.threshold)?;
    write_text(&out.join("metrics_report.json"), &(report.to_json() + "\n"))?;
    write_text(&out.join("roc.csv"), &report.roc_csv())?;
    eprintln!(
        "accuracy {:.4}  precision {:.4}  recall {:.4}  f1 {:.4}  mcc {:.4}  auc {:.4}",
        report.accuracy, report.precision, report.recall, report.f1, report.mcc, report.auc
    );
    Ok(())
}

/// select, meta-train and evaluate, synthesizing the input when none is set.
pub fn cmd_run(mut cfg: PipelineConfig, a: &SynthArgs) -> Result<()> {
    cfg.global_seed().invalid()?;
    cfg.selection().invalid()?;
    cfg.maml_config().invalid()?;
    if cfg.data.input.is_none() {
        cfg.data.input = Some(cmd_synth(cfg.clone(), a)?);
    }
    cmd_select(&cfg)?;
    cmd_meta_train(&cfg, &MetaTrainArgs { resume: None, checkpoint_every: None, pool: None })?;
    cmd_evaluate(&cfg, &EvaluateArgs { checkpoint: None, test: None, threshold: 0.5 })
}
