//! Chunk-wise feature selection based on gradient boosting.
//!
//! Rows are cut into overlapping contiguous chunks, a GBDT model is trained
//! per chunk, each chunk keeps the features whose gain importance reaches
//! the threshold, and the union of those per-chunk selections defines the
//! projected dataset.

use std::collections::BTreeSet;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{DatasetError, LabeledDataset};
use crate::gbdt::{self, GbdtConfig, GbdtError, ImportanceVector};

#[derive(Debug, Error)]
pub enum CfsgbError {
    #[error("invalid chunk spec: {0}")]
    InvalidSpec(String),
    #[error("overlap of {overlap} rows leaves no stride for chunks of {len} rows")]
    DegenerateStride { len: usize, overlap: usize },
    #[error("chunk of {len} rows does not fit in {n} rows")]
    ChunkLargerThanData { len: usize, n: usize },
    #[error("no feature reached the threshold {0} in any chunk")]
    EmptySelection(f64),
    #[error("feature index {index} out of range for {m} features")]
    IndexOutOfRange { index: usize, m: usize },
    #[error(transparent)]
    Gbdt(#[from] GbdtError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CfsgbError>;

/// Chunk geometry. `p` is the chunk length as a fraction of the dataset, `q`
/// the overlap as a fraction of the chunk length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChunkSpec {
    pub p: f64,
    pub q: f64,
    pub explicit_k: Option<usize>,
}

impl Default for ChunkSpec {
    fn default() -> Self {
        Self { p: 0.4, q: 0.25, explicit_k: None }
    }
}

impl ChunkSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.p > 0.0 && self.p <= 1.0) {
            return Err(CfsgbError::InvalidSpec(format!("p = {} must lie in (0, 1]", self.p)));
        }
        if !(self.q >= 0.0 && self.q < 1.0) {
            return Err(CfsgbError::InvalidSpec(format!("q = {} must lie in [0, 1)", self.q)));
        }
        if self.explicit_k == Some(0) {
            return Err(CfsgbError::InvalidSpec("explicit k must be >= 1".into()));
        }
        Ok(())
    }
}

/// A contiguous row range `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub index: usize,
    pub start: usize,
    pub end: usize,
}

impl Chunk {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

/// Chunk length `l = round(p n)`, overlap `round(q l)`, stride
/// `l - round(q l)`. The last chunk is truncated at `n`.
///
/// With `explicit_k`, the stride becomes `max(1, floor((n - l) / (k - 1)))`
/// and the last chunk is stretched to end at `n`. If that stride exceeds `l`,
/// chunks are lengthened to the stride so that rows stay covered.
pub fn make_chunks(n: usize, spec: &ChunkSpec) -> Result<Vec<Chunk>> {
    spec.validate()?;
    if n == 0 {
        return Err(CfsgbError::InvalidSpec("dataset has no rows".into()));
    }
    let len = (spec.p * n as f64).round() as usize;
    if len == 0 {
        return Err(CfsgbError::InvalidSpec(format!("p = {} gives an empty chunk for n = {n}", spec.p)));
    }
    if len > n {
        return Err(CfsgbError::ChunkLargerThanData { len, n });
    }
    let overlap = (spec.q * len as f64).round() as usize;
    if overlap >= len {
        return Err(CfsgbError::DegenerateStride { len, overlap });
    }

    let mut chunks = Vec::new();
    match spec.explicit_k {
        None => {
            let stride = len - overlap;
            let mut start = 0;
            loop {
                let end = (start + len).min(n);
                chunks.push(Chunk { index: chunks.len(), start, end });
                if end == n {
                    break;
                }
                start += stride;
            }
        }
        Some(1) => chunks.push(Chunk { index: 0, start: 0, end: n }),
        Some(k) => {
            if k - 1 > n - len {
                return Err(CfsgbError::InvalidSpec(format!(
                    "{k} chunks of {len} rows cannot start at distinct rows of {n}"
                )));
            }
            let stride = ((n - len) / (k - 1)).max(1);
            let width = len.max(stride);
            for i in 0..k {
                let start = i * stride;
                let end = if i + 1 == k { n } else { (start + width).min(n) };
                chunks.push(Chunk { index: i, start, end });
            }
        }
    }
    Ok(chunks)
}

/// Indices whose importance is at least `tau`. Zero-importance features are
/// never selected, so `tau = 0` keeps exactly the features that split.
pub fn threshold_indices(importance: &ImportanceVector, tau: f64) -> Vec<usize> {
    importance
        .scores
        .iter()
        .enumerate()
        .filter(|(_, &s)| s > 0.0 && s >= tau)
        .map(|(j, _)| j)
        .collect()
}

pub fn select_chunk_features(
    chunk_ds: &LabeledDataset,
    cfg: &GbdtConfig,
    tau: f64,
) -> Result<(Vec<usize>, ImportanceVector)> {
    let model = gbdt::train(chunk_ds, cfg)?;
    let imp = model.feature_importance();
    Ok((threshold_indices(&imp, tau), imp))
}

pub fn aggregate<'a, I>(per_chunk: I) -> Vec<usize>
where
    I: IntoIterator<Item = &'a [usize]>,
{
    per_chunk.into_iter().flatten().copied().collect::<BTreeSet<_>>().into_iter().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkSelection {
    pub chunk: usize,
    pub indices: Vec<usize>,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedFeatureSet {
    pub threshold: f64,
    pub global_indices: Vec<usize>,
    pub per_chunk: Vec<ChunkSelection>,
}

impl SelectedFeatureSet {
    pub fn len(&self) -> usize {
        self.global_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.global_indices.is_empty()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

pub fn project_dataset(ds: &LabeledDataset, indices: &[usize]) -> Result<LabeledDataset> {
    if indices.is_empty() {
        return Err(CfsgbError::EmptySelection(f64::NAN));
    }
    let m = ds.n_features();
    if let Some(&index) = indices.iter().find(|&&j| j >= m) {
        return Err(CfsgbError::IndexOutOfRange { index, m });
    }
    let sorted: Vec<usize> = indices.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    Ok(ds.select_columns(&sorted)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkStats {
    pub chunk: usize,
    pub start: usize,
    pub end: usize,
    pub positives: usize,
    pub n_splits: usize,
    pub final_train_loss: f64,
    pub selected: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub chunking_secs: f64,
    pub importance_secs: f64,
    pub aggregation_secs: f64,
    pub projection_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CfsgbReport {
    pub k: usize,
    pub chunks: Vec<ChunkStats>,
    pub selected: usize,
    pub n_features: usize,
    pub timings: StageTimings,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    Sequential,
    #[default]
    Parallel,
}

/// Importance vector and training summary of one chunk's model.
#[derive(Debug, Clone)]
pub struct ChunkImportance {
    pub chunk: Chunk,
    pub importance: ImportanceVector,
    pub stats: ChunkStats,
}

fn score_chunk(ds: &LabeledDataset, chunk: Chunk, cfg: &GbdtConfig) -> Result<ChunkImportance> {
    let part = ds.select_row_range(chunk.start, chunk.end)?;
    let cfg = GbdtConfig { seed: cfg.seed.wrapping_add(chunk.index as u64), ..cfg.clone() };
    let (model, history) = gbdt::train_with_history(&part, &cfg)?;
    let importance = model.feature_importance();
    let stats = ChunkStats {
        chunk: chunk.index,
        start: chunk.start,
        end: chunk.end,
        positives: part.class_counts().1,
        n_splits: model.trees.iter().map(|t| t.splits().count()).sum(),
        final_train_loss: *history.last().expect("history has the initial loss"),
        selected: 0,
    };
    Ok(ChunkImportance { chunk, importance, stats })
}

/// Trains one model per chunk. Results come back in chunk order whatever the
/// execution mode.
pub fn chunk_importances(
    ds: &LabeledDataset,
    chunks: &[Chunk],
    cfg: &GbdtConfig,
    exec: Execution,
) -> Result<Vec<ChunkImportance>> {
    cfg.validate()?;
    match exec {
        Execution::Sequential => chunks.iter().map(|&c| score_chunk(ds, c, cfg)).collect(),
        Execution::Parallel => chunks.par_iter().map(|&c| score_chunk(ds, c, cfg)).collect(),
    }
}

pub fn run_cfsgb(
    ds: &LabeledDataset,
    spec: &ChunkSpec,
    cfg: &GbdtConfig,
    tau: f64,
) -> Result<(SelectedFeatureSet, LabeledDataset, CfsgbReport)> {
    run_cfsgb_with(ds, spec, cfg, tau, Execution::Parallel)
}

pub fn run_cfsgb_with(
    ds: &LabeledDataset,
    spec: &ChunkSpec,
    cfg: &GbdtConfig,
    tau: f64,
    exec: Execution,
) -> Result<(SelectedFeatureSet, LabeledDataset, CfsgbReport)> {
    if !(tau >= 0.0 && tau.is_finite()) {
        return Err(CfsgbError::InvalidSpec(format!("tau = {tau} must be finite and >= 0")));
    }
    let mut timings = StageTimings::default();

    let t = Instant::now();
    let chunks = make_chunks(ds.n_samples(), spec)?;
    timings.chunking_secs = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let scored = chunk_importances(ds, &chunks, cfg, exec)?;
    timings.importance_secs = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let mut per_chunk = Vec::with_capacity(scored.len());
    let mut stats = Vec::with_capacity(scored.len());
    for c in scored {
        let indices = threshold_indices(&c.importance, tau);
        stats.push(ChunkStats { selected: indices.len(), ..c.stats });
        per_chunk.push(ChunkSelection { chunk: c.chunk.index, indices, scores: c.importance.scores });
    }
    let global_indices = aggregate(per_chunk.iter().map(|c| c.indices.as_slice()));
    timings.aggregation_secs = t.elapsed().as_secs_f64();
    if global_indices.is_empty() {
        return Err(CfsgbError::EmptySelection(tau));
    }

    let t = Instant::now();
    let projected = project_dataset(ds, &global_indices)?;
    timings.projection_secs = t.elapsed().as_secs_f64();

    let report = CfsgbReport {
        k: chunks.len(),
        chunks: stats,
        selected: global_indices.len(),
        n_features: ds.n_features(),
        timings,
    };
    let set = SelectedFeatureSet { threshold: tau, global_indices, per_chunk };
    Ok((set, projected, report))
}

/// Per-feature maximum importance over chunks.
pub fn max_importance(scored: &[ChunkImportance], m: usize) -> Vec<f64> {
    let mut best = vec![0.0f64; m];
    for c in scored {
        for (b, &s) in best.iter_mut().zip(&c.importance.scores) {
            *b = b.max(s);
        }
    }
    best
}

/// Largest threshold that keeps at least `k_features` features: the
/// `k_features`-th largest per-feature maximum importance across chunks.
/// Returns 0.0 when fewer than `k_features` features ever split, which keeps
/// every feature that does.
pub fn threshold_for_top_k(
    ds: &LabeledDataset,
    spec: &ChunkSpec,
    cfg: &GbdtConfig,
    k_features: usize,
) -> Result<f64> {
    threshold_for_top_k_with(ds, spec, cfg, k_features, Execution::Parallel)
}

pub fn threshold_for_top_k_with(
    ds: &LabeledDataset,
    spec: &ChunkSpec,
    cfg: &GbdtConfig,
    k_features: usize,
    exec: Execution,
) -> Result<f64> {
    let m = ds.n_features();
    if k_features == 0 || k_features > m {
        return Err(CfsgbError::InvalidSpec(format!("top-k of {k_features} is outside 1..={m}")));
    }
    let chunks = make_chunks(ds.n_samples(), spec)?;
    let scored = chunk_importances(ds, &chunks, cfg, exec)?;
    Ok(top_k_threshold(&max_importance(&scored, m), k_features))
}

pub fn top_k_threshold(stat: &[f64], k_features: usize) -> f64 {
    let mut sorted = stat.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    sorted[k_features - 1]
}
