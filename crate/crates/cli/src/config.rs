//! Pipeline configuration: a TOML file with one section per stage
//! (chunking, boosting, split, meta-learning), overlaid with command-line
//! overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use melemad::cfsgb::ChunkSpec;
use melemad::dataset::{SplitSpec, SyntheticSpec};
use melemad::gbdt::GbdtConfig;
use melemad::maml::MamlConfig;
use melemad::seed;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Global seed. Every stage derives its own seed from it.
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub threads: Option<usize>,
    pub data: DataSection,
    pub synthetic: SyntheticSection,
    pub feature_selection: FeatureSelectionSection,
    pub gradient_boosting: GradientBoostingSection,
    pub split: SplitSection,
    pub meta_learning: MetaLearningSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub input: Option<PathBuf>,
    pub label_column: String,
    /// Min-max scale features, fitted on the meta-training split.
    pub scale: bool,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { input: None, label_column: "label".into(), scale: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSection {
    pub n: usize,
    pub m: usize,
    pub informative: usize,
    pub noise_sigma: f64,
    pub class_balance: f64,
    pub format: DataFormat,
}

impl Default for SyntheticSection {
    fn default() -> Self {
        Self { n: 2000, m: 200, informative: 10, noise_sigma: 0.5, class_balance: 0.5, format: DataFormat::Csv }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    Csv,
    Bin,
}

impl DataFormat {
    pub fn extension(self) -> &'static str {
        match self {
            DataFormat::Csv => "csv",
            DataFormat::Bin => "bin",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureSelectionSection {
    #[serde(alias = "Number of Chunks")]
    pub number_of_chunks: Option<usize>,
    #[serde(alias = "Chunk Size")]
    pub chunk_size: f64,
    #[serde(alias = "Overlap between Chunks")]
    pub overlap_between_chunks: f64,
    #[serde(alias = "Threshold")]
    pub threshold: Option<f64>,
    /// Derive the threshold that keeps this many features instead.
    pub top_k: Option<usize>,
}

impl Default for FeatureSelectionSection {
    fn default() -> Self {
        let c = ChunkSpec::default();
        Self { number_of_chunks: None, chunk_size: c.p, overlap_between_chunks: c.q, threshold: None, top_k: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradientBoostingSection {
    pub number_of_trees: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    pub min_samples_leaf: usize,
}

impl Default for GradientBoostingSection {
    fn default() -> Self {
        let g = GbdtConfig::default();
        Self {
            number_of_trees: g.n_trees,
            max_depth: g.max_depth,
            learning_rate: g.learning_rate,
            min_samples_leaf: g.min_samples_leaf,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub train_fraction: f64,
    pub stratified: bool,
}

impl Default for SplitSection {
    fn default() -> Self {
        Self { train_fraction: 0.8, stratified: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaLearningSection {
    #[serde(alias = "Inner-loop Learning Rate")]
    pub inner_loop_learning_rate: f64,
    #[serde(alias = "Outer-loop Learning Rate")]
    pub outer_loop_learning_rate: f64,
    #[serde(alias = "Number of Iterations (Outer Loop)")]
    pub number_of_iterations: usize,
    #[serde(alias = "Number of Samples per Task")]
    pub number_of_samples_per_task: usize,
    #[serde(alias = "Support Set Size")]
    pub support_set_size: usize,
    #[serde(alias = "Query Set Size")]
    pub query_set_size: usize,
    #[serde(alias = "Loss Function")]
    pub loss_function: String,
    #[serde(alias = "Optimizer")]
    pub optimizer: String,
    pub tasks_per_meta_batch: usize,
    pub inner_steps: usize,
    pub first_order: bool,
    pub hidden_dims: Vec<usize>,
    pub dropout_rate: f64,
    pub eval_episodes: usize,
    pub dropout_in_adaptation: bool,
    /// Write a checkpoint every this many outer iterations (0: only at the end).
    pub checkpoint_every: usize,
}

impl Default for MetaLearningSection {
    fn default() -> Self {
        let m = MamlConfig::default();
        Self {
            inner_loop_learning_rate: m.alpha,
            outer_loop_learning_rate: m.beta,
            number_of_iterations: m.outer_iterations,
            number_of_samples_per_task: m.samples_per_task,
            support_set_size: m.support_size,
            query_set_size: m.query_size,
            loss_function: "BCE".into(),
            optimizer: "Adam".into(),
            tasks_per_meta_batch: m.tasks_per_meta_batch,
            inner_steps: m.inner_steps,
            first_order: m.first_order,
            hidden_dims: m.hidden_dims,
            dropout_rate: m.dropout_rate,
            eval_episodes: m.eval_episodes,
            dropout_in_adaptation: m.dropout_in_adaptation,
            checkpoint_every: 50,
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub output_dir: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub label_column: Option<String>,
    pub p: Option<f64>,
    pub q: Option<f64>,
    pub k: Option<usize>,
    pub tau: Option<f64>,
    pub top_k: Option<usize>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub iterations: Option<usize>,
    pub tasks_per_batch: Option<usize>,
    pub support_size: Option<usize>,
    pub query_size: Option<usize>,
    pub first_order: Option<bool>,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn apply(&mut self, o: &Overrides) {
        fn set<T: Clone>(slot: &mut T, v: &Option<T>) {
            if let Some(v) = v {
                *slot = v.clone();
            }
        }
        fn set_opt<T: Clone>(slot: &mut Option<T>, v: &Option<T>) {
            if v.is_some() {
                *slot = v.clone();
            }
        }
        set_opt(&mut self.seed, &o.seed);
        set_opt(&mut self.threads, &o.threads);
        set_opt(&mut self.output_dir, &o.output_dir);
        set_opt(&mut self.data.input, &o.input);
        set(&mut self.data.label_column, &o.label_column);
        let fs = &mut self.feature_selection;
        set(&mut fs.chunk_size, &o.p);
        set(&mut fs.overlap_between_chunks, &o.q);
        set_opt(&mut fs.number_of_chunks, &o.k);
        if o.tau.is_some() {
            fs.threshold = o.tau;
            fs.top_k = None;
        }
        if o.top_k.is_some() {
            fs.top_k = o.top_k;
            fs.threshold = None;
        }
        let ml = &mut self.meta_learning;
        set(&mut ml.inner_loop_learning_rate, &o.alpha);
        set(&mut ml.outer_loop_learning_rate, &o.beta);
        set(&mut ml.number_of_iterations, &o.iterations);
        set(&mut ml.tasks_per_meta_batch, &o.tasks_per_batch);
        set(&mut ml.support_set_size, &o.support_size);
        set(&mut ml.query_set_size, &o.query_size);
        set(&mut ml.first_order, &o.first_order);
    }

    pub fn global_seed(&self) -> Result<u64> {
        self.seed.context("a seed is required: pass --seed or set `seed` in the config")
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output_dir.clone().unwrap_or_else(|| PathBuf::from("."))
    }

    pub fn synthetic_spec(&self) -> Result<SyntheticSpec> {
        let s = &self.synthetic;
        let spec = SyntheticSpec {
            n: s.n,
            m: s.m,
            informative: s.informative,
            noise_sigma: s.noise_sigma,
            class_balance: s.class_balance,
            seed: seed::derive(self.global_seed()?, "synth"),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn chunk_spec(&self) -> Result<ChunkSpec> {
        let fs = &self.feature_selection;
        let spec = ChunkSpec { p: fs.chunk_size, q: fs.overlap_between_chunks, explicit_k: fs.number_of_chunks };
        spec.validate()?;
        if spec.explicit_k == Some(0) {
            bail!("number_of_chunks must be >= 1");
        }
        Ok(spec)
    }

    pub fn gbdt_config(&self) -> Result<GbdtConfig> {
        let g = &self.gradient_boosting;
        let cfg = GbdtConfig {
            n_trees: g.number_of_trees,
            max_depth: g.max_depth,
            learning_rate: g.learning_rate,
            min_samples_leaf: g.min_samples_leaf,
            seed: seed::derive(self.global_seed()?, "cfsgb"),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Either a fixed threshold or a feature budget.
    pub fn selection(&self) -> Result<Selection> {
        let fs = &self.feature_selection;
        match (fs.threshold, fs.top_k) {
            (Some(_), Some(_)) => bail!("set either threshold or top_k, not both"),
            (Some(t), None) if t.is_finite() && t >= 0.0 => Ok(Selection::Threshold(t)),
            (Some(t), None) => bail!("threshold {t} must be finite and >= 0"),
            (None, Some(0)) => bail!("top_k must be >= 1"),
            (None, Some(k)) => Ok(Selection::TopK(k)),
            (None, None) => bail!("feature selection needs a threshold (--tau) or a feature budget (--top-k)"),
        }
    }

    pub fn split_spec(&self) -> Result<SplitSpec> {
        let spec = SplitSpec {
            train_fraction: self.split.train_fraction,
            stratified: self.split.stratified,
            seed: seed::derive(self.global_seed()?, "split"),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn maml_config(&self) -> Result<MamlConfig> {
        let ml = &self.meta_learning;
        if !ml.loss_function.eq_ignore_ascii_case("bce") {
            bail!("unsupported loss function {:?}; only BCE is implemented", ml.loss_function);
        }
        if !ml.optimizer.eq_ignore_ascii_case("adam") {
            bail!("unsupported optimizer {:?}; only Adam is implemented", ml.optimizer);
        }
        let cfg = MamlConfig {
            alpha: ml.inner_loop_learning_rate,
            beta: ml.outer_loop_learning_rate,
            outer_iterations: ml.number_of_iterations,
            tasks_per_meta_batch: ml.tasks_per_meta_batch,
            samples_per_task: ml.number_of_samples_per_task,
            support_size: ml.support_set_size,
            query_size: ml.query_set_size,
            inner_steps: ml.inner_steps,
            first_order: ml.first_order,
            seed: seed::derive(self.global_seed()?, "maml"),
            hidden_dims: ml.hidden_dims.clone(),
            dropout_rate: ml.dropout_rate,
            eval_episodes: ml.eval_episodes,
            dropout_in_adaptation: ml.dropout_in_adaptation,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Selection {
    Threshold(f64),
    TopK(usize),
}
