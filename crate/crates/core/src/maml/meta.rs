//! Inner-loop adaptation, meta-gradients, and the outer training loop.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::adam::AdamState;
use super::episode::{sample_task_indexed, Episode};
use super::mlp::{self, hessian_vector_product, loss_and_gradient, DropoutMask, ModelParams};
use super::{MamlConfig, MamlError, Result};
use crate::dataset::LabeledDataset;
use crate::seed;

fn inner_mask_seed(episode_seed: u64, step: usize) -> u64 {
    seed::child(seed::derive(episode_seed, "inner"), step as u64)
}

fn query_mask_seed(episode_seed: u64) -> u64 {
    seed::derive(episode_seed, "query")
}

/// Seed of task `task` in outer iteration `iteration`.
pub fn task_seed(cfg_seed: u64, iteration: u64, task: usize) -> u64 {
    seed::child(seed::child(seed::derive(cfg_seed, "task"), iteration), task as u64)
}

fn adapt_trajectory(
    theta: &ModelParams,
    support: &LabeledDataset,
    alpha: f64,
    steps: usize,
    episode_seed: u64,
    dropout: bool,
) -> Result<(Vec<ModelParams>, Vec<Option<DropoutMask>>)> {
    let mut path = Vec::with_capacity(steps + 1);
    let mut masks = Vec::with_capacity(steps);
    path.push(theta.clone());
    for s in 0..steps {
        let cur = path.last().expect("non-empty path");
        let mask =
            DropoutMask::for_pass(&cur.architecture, support.n_samples(), dropout, inner_mask_seed(episode_seed, s));
        let g = loss_and_gradient(cur, support.features(), support.labels(), mask.as_ref())?.grad;
        let mut next = cur.clone();
        for (p, gi) in next.values.iter_mut().zip(&g) {
            *p -= alpha * gi;
        }
        if next.values.iter().any(|v| !v.is_finite()) {
            return Err(MamlError::NonFinite("adapted parameters"));
        }
        path.push(next);
        masks.push(mask);
    }
    Ok((path, masks))
}

/// `theta' = theta - alpha * grad L_support`, repeated `inner_steps` times.
/// Dropout masks are drawn from `seed` when `dropout` is set.
pub fn inner_adapt(
    theta: &ModelParams,
    support: &LabeledDataset,
    alpha: f64,
    inner_steps: usize,
    seed: u64,
    dropout: bool,
) -> Result<ModelParams> {
    let (mut path, _) = adapt_trajectory(theta, support, alpha, inner_steps, seed, dropout)?;
    Ok(path.pop().expect("path holds theta"))
}

/// Contribution of one episode to the meta-gradient.
#[derive(Debug, Clone)]
pub struct EpisodeGradient {
    pub grad: Vec<f64>,
    pub query_loss: f64,
    pub correct: usize,
    pub total: usize,
}

/// Gradient of the query loss at the adapted parameters w.r.t. the initial
/// parameters. First-order mode stops at the query gradient; otherwise the
/// gradient is pulled back through each inner step with
/// `(I - alpha * H_support)`.
pub fn episode_gradient(theta: &ModelParams, ep: &Episode, cfg: &MamlConfig) -> Result<EpisodeGradient> {
    let (path, masks) = adapt_trajectory(theta, &ep.support, cfg.alpha, cfg.inner_steps, ep.seed, true)?;
    let adapted = path.last().expect("path holds theta");
    let qmask = DropoutMask::for_pass(&adapted.architecture, ep.query.n_samples(), true, query_mask_seed(ep.seed));
    let q = loss_and_gradient(adapted, ep.query.features(), ep.query.labels(), qmask.as_ref())?;
    let mut grad = q.grad;
    if !cfg.first_order {
        for (params, mask) in path[..cfg.inner_steps].iter().zip(&masks).rev() {
            let hv = hessian_vector_product(params, ep.support.features(), ep.support.labels(), mask.as_ref(), &grad)?;
            for (g, h) in grad.iter_mut().zip(&hv) {
                *g -= cfg.alpha * h;
            }
        }
    }
    let correct = q.probs.iter().zip(ep.query.labels()).filter(|(&p, &l)| (p >= 0.5) == (l == 1)).count();
    Ok(EpisodeGradient { grad, query_loss: q.loss, correct, total: ep.query.n_samples() })
}

/// Averaged meta-gradient and meta-loss over a batch of episodes.
#[derive(Debug, Clone)]
pub struct MetaGradient {
    pub grad: Vec<f64>,
    pub meta_loss: f64,
    pub query_accuracy: f64,
}

/// Episodes are processed in parallel and reduced in episode order.
pub fn meta_gradient(theta: &ModelParams, episodes: &[Episode], cfg: &MamlConfig) -> Result<MetaGradient> {
    if episodes.is_empty() {
        return Err(MamlError::InvalidConfig("a meta-batch needs at least one episode".into()));
    }
    let parts: Vec<EpisodeGradient> =
        episodes.par_iter().map(|ep| episode_gradient(theta, ep, cfg)).collect::<Result<_>>()?;
    let t = parts.len() as f64;
    let mut grad = vec![0.0; theta.len()];
    let (mut loss, mut correct, mut total) = (0.0, 0, 0);
    for p in &parts {
        for (g, pg) in grad.iter_mut().zip(&p.grad) {
            *g += pg;
        }
        loss += p.query_loss;
        correct += p.correct;
        total += p.total;
    }
    grad.iter_mut().for_each(|g| *g /= t);
    Ok(MetaGradient { grad, meta_loss: loss / t, query_accuracy: correct as f64 / total as f64 })
}

#[derive(Debug, Clone)]
pub struct MetaStep {
    pub params: ModelParams,
    pub adam: AdamState,
    pub meta_loss: f64,
    pub query_accuracy: f64,
}

/// One outer update: meta-gradient over `episodes`, then an Adam step at
/// rate `beta`. Inputs are left untouched.
pub fn meta_step(theta: &ModelParams, episodes: &[Episode], cfg: &MamlConfig, adam: &AdamState) -> Result<MetaStep> {
    let mg = meta_gradient(theta, episodes, cfg)?;
    let mut params = theta.clone();
    let mut adam = adam.clone();
    adam.update(&mut params.values, &mg.grad, cfg.beta);
    if params.values.iter().any(|v| !v.is_finite()) {
        return Err(MamlError::NonFinite("meta-updated parameters"));
    }
    Ok(MetaStep { params, adam, meta_loss: mg.meta_loss, query_accuracy: mg.query_accuracy })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub iteration: u64,
    pub meta_loss: f64,
    pub query_accuracy: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub entries: Vec<TrainLogEntry>,
}

impl TrainLog {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn meta_losses(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.meta_loss).collect()
    }

    /// `iteration,meta_loss,query_accuracy,seconds`; wall time is last so the
    /// deterministic columns can be compared on their own.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,meta_loss,query_accuracy,seconds\n");
        for e in &self.entries {
            s.push_str(&format!("{},{},{},{}\n", e.iteration, e.meta_loss, e.query_accuracy, e.seconds));
        }
        s
    }
}

/// Resumable outer-loop state.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaTrainer {
    pub params: ModelParams,
    pub adam: AdamState,
    /// Number of completed outer iterations.
    pub iteration: u64,
}

impl MetaTrainer {
    pub fn new(pool: &LabeledDataset, cfg: &MamlConfig) -> Result<Self> {
        cfg.validate()?;
        let arch = cfg.architecture(pool.n_features())?;
        let params = mlp::init_params(&arch, seed::derive(cfg.seed, "init"))?;
        let adam = AdamState::new(params.len());
        Ok(Self { params, adam, iteration: 0 })
    }

    pub fn resume(params: ModelParams, adam: AdamState, iteration: u64) -> Self {
        Self { params, adam, iteration }
    }

    pub fn episodes(&self, pool: &LabeledDataset, cfg: &MamlConfig) -> Result<Vec<Episode>> {
        (0..cfg.tasks_per_meta_batch)
            .map(|t| sample_task_indexed(pool, cfg, task_seed(cfg.seed, self.iteration, t), t))
            .collect()
    }

    pub fn step(&mut self, pool: &LabeledDataset, cfg: &MamlConfig) -> Result<TrainLogEntry> {
        let start = Instant::now();
        let episodes = self.episodes(pool, cfg)?;
        let out = meta_step(&self.params, &episodes, cfg, &self.adam)?;
        self.params = out.params;
        self.adam = out.adam;
        let entry = TrainLogEntry {
            iteration: self.iteration,
            meta_loss: out.meta_loss,
            query_accuracy: out.query_accuracy,
            seconds: start.elapsed().as_secs_f64(),
        };
        self.iteration += 1;
        Ok(entry)
    }

    /// Runs `iterations` outer steps, calling `on_step` after each one.
    pub fn run<F>(&mut self, pool: &LabeledDataset, cfg: &MamlConfig, iterations: usize, mut on_step: F) -> Result<TrainLog>
    where
        F: FnMut(&MetaTrainer, &TrainLogEntry) -> Result<()>,
    {
        cfg.validate()?;
        if pool.n_features() != self.params.architecture.input_dim {
            return Err(MamlError::DimensionMismatch {
                expected: self.params.architecture.input_dim,
                found: pool.n_features(),
            });
        }
        let mut log = TrainLog::default();
        for _ in 0..iterations {
            let entry = self.step(pool, cfg)?;
            on_step(self, &entry)?;
            log.entries.push(entry);
        }
        Ok(log)
    }
}

/// Meta-trains from a fresh initialisation for `cfg.outer_iterations` steps.
pub fn meta_train(train_pool: &LabeledDataset, cfg: &MamlConfig) -> Result<(ModelParams, TrainLog)> {
    let mut trainer = MetaTrainer::new(train_pool, cfg)?;
    let log = trainer.run(train_pool, cfg, cfg.outer_iterations, |_, _| Ok(()))?;
    Ok((trainer.params, log))
}

/// Adapts on the support set of `cfg.eval_episodes` test episodes and
/// predicts each query set without dropout. Returns the concatenated query
/// probabilities and labels.
pub fn meta_evaluate(theta: &ModelParams, test_pool: &LabeledDataset, cfg: &MamlConfig) -> Result<(Vec<f64>, Vec<u8>)> {
    cfg.validate()?;
    let base = seed::derive(cfg.seed, "eval");
    let parts: Vec<(Vec<f64>, Vec<u8>)> = (0..cfg.eval_episodes)
        .into_par_iter()
        .map(|i| {
            let ep = sample_task_indexed(test_pool, cfg, seed::child(base, i as u64), i)?;
            let adapted = inner_adapt(theta, &ep.support, cfg.alpha, cfg.inner_steps, ep.seed, cfg.dropout_in_adaptation)?;
            let probs = mlp::forward(&adapted, ep.query.features(), false, 0)?;
            Ok((probs, ep.query.labels().to_vec()))
        })
        .collect::<Result<_>>()?;
    let mut probs = Vec::new();
    let mut labels = Vec::new();
    for (p, l) in parts {
        probs.extend(p);
        labels.extend(l);
    }
    Ok((probs, labels))
}
