//! Gradient-boosted regression trees for binary classification.
//!
//! Logistic loss, second-order leaf values `-G / (H + lambda)`, exact greedy
//! split search over midpoints of consecutive distinct values, and total-gain
//! feature importance.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{LabeledDataset, Matrix};

/// L2 regularisation on leaf values.
pub const LAMBDA: f64 = 1.0;

/// Bound on the prior probability so the log-odds base score stays finite
/// for single-class data.
const PRIOR_EPS: f64 = 1e-6;

/// Relative tolerance under which two split gains count as tied.
const GAIN_TIE_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum GbdtError {
    #[error("dimension mismatch: model expects {expected} features, input has {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, GbdtError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbdtConfig {
    pub n_trees: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    pub min_samples_leaf: usize,
    pub seed: u64,
}

impl Default for GbdtConfig {
    fn default() -> Self {
        Self { n_trees: 100, max_depth: 3, learning_rate: 0.1, min_samples_leaf: 5, seed: 0 }
    }
}

impl GbdtConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_trees == 0 {
            return Err(GbdtError::InvalidConfig("n_trees must be >= 1".into()));
        }
        if self.max_depth == 0 {
            return Err(GbdtError::InvalidConfig("max_depth must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return Err(GbdtError::InvalidConfig(format!(
                "learning_rate {} must lie in (0, 1]",
                self.learning_rate
            )));
        }
        if self.min_samples_leaf == 0 {
            return Err(GbdtError::InvalidConfig("min_samples_leaf must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Node {
    Leaf {
        value: f64,
    },
    /// Rows with `x[feature] < threshold` go left.
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
        gain: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    pub nodes: Vec<Node>,
}

impl RegressionTree {
    pub fn predict_row(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf { value } => return value,
                Node::Split { feature, threshold, left, right, .. } => {
                    i = if x[feature] < threshold { left } else { right };
                }
            }
        }
    }

    pub fn splits(&self) -> impl Iterator<Item = (usize, f64, f64)> + '_ {
        self.nodes.iter().filter_map(|n| match *n {
            Node::Split { feature, threshold, gain, .. } => Some((feature, threshold, gain)),
            Node::Leaf { .. } => None,
        })
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self.nodes.as_slice(), [Node::Leaf { .. }])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbdtModel {
    pub base_score: f64,
    pub n_features: usize,
    pub trees: Vec<RegressionTree>,
    pub config: GbdtConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceVector {
    pub scores: Vec<f64>,
}

impl ImportanceVector {
    pub fn total(&self) -> f64 {
        self.scores.iter().sum()
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Mean logistic loss of raw scores against labels.
pub fn log_loss_from_margin(margins: &[f64], labels: &[u8]) -> f64 {
    let total: f64 = margins
        .iter()
        .zip(labels)
        .map(|(&z, &y)| {
            // log(1 + e^z) - y z, computed stably
            let softplus = if z > 0.0 { z + (-z).exp().ln_1p() } else { z.exp().ln_1p() };
            softplus - f64::from(y) * z
        })
        .sum();
    total / margins.len() as f64
}

pub fn base_score(labels: &[u8]) -> f64 {
    let pos = labels.iter().filter(|&&l| l == 1).count() as f64;
    let p = (pos / labels.len() as f64).clamp(PRIOR_EPS, 1.0 - PRIOR_EPS);
    (p / (1.0 - p)).ln()
}

/// Best split found for a node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitCandidate {
    pub feature: usize,
    pub threshold: f64,
    pub gain: f64,
}

pub fn split_gain(gl: f64, hl: f64, gr: f64, hr: f64) -> f64 {
    let score = |g: f64, h: f64| g * g / (h + LAMBDA);
    0.5 * (score(gl, hl) + score(gr, hr) - score(gl + gr, hl + hr))
}

fn better(gain: f64, best: Option<&SplitCandidate>) -> bool {
    match best {
        None => gain > 0.0,
        Some(b) => gain - b.gain > GAIN_TIE_TOL * b.gain.abs(),
    }
}

struct Builder<'a> {
    x: &'a Matrix,
    grad: &'a [f64],
    hess: &'a [f64],
    /// Row indices sorted by each feature's value, computed once per model.
    sorted: &'a [Vec<usize>],
    in_node: Vec<bool>,
    cfg: &'a GbdtConfig,
    nodes: Vec<Node>,
}

impl Builder<'_> {
    fn leaf_value(&self, rows: &[usize]) -> f64 {
        let g: f64 = rows.iter().map(|&i| self.grad[i]).sum();
        let h: f64 = rows.iter().map(|&i| self.hess[i]).sum();
        -g / (h + LAMBDA)
    }

    fn best_split(&mut self, rows: &[usize]) -> Option<SplitCandidate> {
        let min_leaf = self.cfg.min_samples_leaf;
        if rows.len() < 2 * min_leaf {
            return None;
        }
        for &i in rows {
            self.in_node[i] = true;
        }
        let g_total: f64 = rows.iter().map(|&i| self.grad[i]).sum();
        let h_total: f64 = rows.iter().map(|&i| self.hess[i]).sum();
        let n = rows.len();
        let mut best: Option<SplitCandidate> = None;
        for (f, order) in self.sorted.iter().enumerate() {
            let (mut gl, mut hl, mut count) = (0.0, 0.0, 0usize);
            let mut prev: Option<usize> = None;
            for &i in order.iter().filter(|&&i| self.in_node[i]) {
                if let Some(p) = prev {
                    let (vp, vi) = (self.x.get(p, f), self.x.get(i, f));
                    if vp < vi && count >= min_leaf && n - count >= min_leaf {
                        let gain = split_gain(gl, hl, g_total - gl, h_total - hl);
                        if better(gain, best.as_ref()) {
                            best = Some(SplitCandidate { feature: f, threshold: vp + (vi - vp) / 2.0, gain });
                        }
                    }
                }
                gl += self.grad[i];
                hl += self.hess[i];
                count += 1;
                prev = Some(i);
            }
        }
        for &i in rows {
            self.in_node[i] = false;
        }
        best
    }

    fn build(&mut self, rows: Vec<usize>, depth: usize) -> usize {
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf { value: 0.0 });
        let split = if depth < self.cfg.max_depth { self.best_split(&rows) } else { None };
        match split {
            None => {
                self.nodes[id] = Node::Leaf { value: self.leaf_value(&rows) };
            }
            Some(s) => {
                let (l, r): (Vec<usize>, Vec<usize>) =
                    rows.iter().partition(|&&i| self.x.get(i, s.feature) < s.threshold);
                let left = self.build(l, depth + 1);
                let right = self.build(r, depth + 1);
                self.nodes[id] =
                    Node::Split { feature: s.feature, threshold: s.threshold, left, right, gain: s.gain };
            }
        }
        id
    }
}

fn presort(x: &Matrix) -> Vec<Vec<usize>> {
    (0..x.cols())
        .map(|f| {
            let mut idx: Vec<usize> = (0..x.rows()).collect();
            idx.sort_by(|&a, &b| x.get(a, f).total_cmp(&x.get(b, f)).then(a.cmp(&b)));
            idx
        })
        .collect()
}

fn fit_tree(x: &Matrix, grad: &[f64], hess: &[f64], sorted: &[Vec<usize>], cfg: &GbdtConfig) -> RegressionTree {
    let mut b = Builder { x, grad, hess, sorted, in_node: vec![false; x.rows()], cfg, nodes: Vec::new() };
    b.build((0..x.rows()).collect(), 0);
    RegressionTree { nodes: b.nodes }
}

/// Trains a model and returns it with the training log-loss before the first
/// tree and after each subsequent one (`n_trees + 1` entries).
pub fn train_with_history(ds: &LabeledDataset, cfg: &GbdtConfig) -> Result<(GbdtModel, Vec<f64>)> {
    cfg.validate()?;
    let x = ds.features();
    let y = ds.labels();
    let base = base_score(y);
    let sorted = presort(x);
    let mut margin = vec![base; ds.n_samples()];
    let mut history = vec![log_loss_from_margin(&margin, y)];
    let mut trees = Vec::with_capacity(cfg.n_trees);
    let mut grad = vec![0.0; ds.n_samples()];
    let mut hess = vec![0.0; ds.n_samples()];
    for _ in 0..cfg.n_trees {
        for i in 0..ds.n_samples() {
            let p = sigmoid(margin[i]);
            grad[i] = p - f64::from(y[i]);
            hess[i] = p * (1.0 - p);
        }
        let tree = fit_tree(x, &grad, &hess, &sorted, cfg);
        for (i, row) in x.iter_rows().enumerate() {
            margin[i] += cfg.learning_rate * tree.predict_row(row);
        }
        history.push(log_loss_from_margin(&margin, y));
        trees.push(tree);
    }
    let model = GbdtModel { base_score: base, n_features: ds.n_features(), trees, config: cfg.clone() };
    Ok((model, history))
}

pub fn train(ds: &LabeledDataset, cfg: &GbdtConfig) -> Result<GbdtModel> {
    Ok(train_with_history(ds, cfg)?.0)
}

impl GbdtModel {
    pub fn margin_row(&self, x: &[f64]) -> f64 {
        self.base_score + self.config.learning_rate * self.trees.iter().map(|t| t.predict_row(x)).sum::<f64>()
    }

    pub fn predict_proba(&self, x: &Matrix) -> Result<Vec<f64>> {
        if x.cols() != self.n_features {
            return Err(GbdtError::DimensionMismatch { expected: self.n_features, found: x.cols() });
        }
        Ok(x.iter_rows().map(|r| sigmoid(self.margin_row(r))).collect())
    }

    /// Total split gain per feature, normalised to sum to 1 (all zero when
    /// no tree ever split).
    pub fn feature_importance(&self) -> ImportanceVector {
        let mut scores = vec![0.0; self.n_features];
        for t in &self.trees {
            for (f, _, gain) in t.splits() {
                scores[f] += gain;
            }
        }
        let total: f64 = scores.iter().sum();
        if total > 0.0 {
            scores.iter_mut().for_each(|s| *s /= total);
        }
        ImportanceVector { scores }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

pub fn predict_proba(model: &GbdtModel, x: &Matrix) -> Result<Vec<f64>> {
    model.predict_proba(x)
}

pub fn feature_importance(model: &GbdtModel) -> ImportanceVector {
    model.feature_importance()
}
