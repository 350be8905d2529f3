//! Few-shot task sampling.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{MamlConfig, MamlError, Result};
use crate::dataset::LabeledDataset;

/// One task: a support set for adaptation and a disjoint query set for
/// evaluating the adapted parameters. `support_rows` and `query_rows` index
/// into the pool the episode was drawn from.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub task_index: usize,
    pub seed: u64,
    pub support: LabeledDataset,
    pub query: LabeledDataset,
    pub support_rows: Vec<usize>,
    pub query_rows: Vec<usize>,
}

/// Positives to place in a set of `total` rows so it follows `share`,
/// respecting what is available and keeping at least `min_each` rows of
/// each class when possible.
fn positives_for(total: usize, share: f64, avail_pos: usize, avail_neg: usize, min_each: usize) -> usize {
    let mut lo = total.saturating_sub(avail_neg);
    let mut hi = avail_pos.min(total);
    let want_lo = min_each.min(hi);
    lo = lo.max(want_lo);
    let want_hi = total.saturating_sub(min_each).max(lo);
    hi = hi.min(want_hi);
    ((share * total as f64).round() as usize).clamp(lo, hi)
}

/// Draws `samples_per_task` rows without replacement, stratified to the
/// pool's class ratio, and splits them into disjoint support and query sets.
pub fn sample_task(pool: &LabeledDataset, cfg: &MamlConfig, task_seed: u64) -> Result<Episode> {
    sample_task_indexed(pool, cfg, task_seed, 0)
}

pub fn sample_task_indexed(pool: &LabeledDataset, cfg: &MamlConfig, task_seed: u64, task_index: usize) -> Result<Episode> {
    let needed = cfg.samples_per_task;
    if pool.n_samples() < needed {
        return Err(MamlError::PoolTooSmall { available: pool.n_samples(), needed });
    }
    if cfg.support_size + cfg.query_size > needed {
        return Err(MamlError::InvalidConfig("support + query exceeds samples per task".into()));
    }
    let mut pos: Vec<usize> = Vec::new();
    let mut neg: Vec<usize> = Vec::new();
    for (i, &l) in pool.labels().iter().enumerate() {
        if l == 1 { pos.push(i) } else { neg.push(i) }
    }
    if pos.is_empty() || neg.is_empty() {
        return Err(MamlError::SingleClassPool);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(task_seed);
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);

    let share = pos.len() as f64 / pool.n_samples() as f64;
    let per_class = usize::from(cfg.support_size >= 2) + usize::from(cfg.query_size >= 2);
    let task_pos = positives_for(needed, share, pos.len(), neg.len(), per_class);
    let task_neg = needed - task_pos;
    let (pos, neg) = (&pos[..task_pos], &neg[..task_neg]);

    let task_share = task_pos as f64 / needed as f64;
    let s_pos = positives_for(cfg.support_size, task_share, task_pos, task_neg, usize::from(cfg.support_size >= 2));
    let s_neg = cfg.support_size - s_pos;
    let q_pos = positives_for(cfg.query_size, task_share, task_pos - s_pos, task_neg - s_neg, usize::from(cfg.query_size >= 2));
    let q_neg = cfg.query_size - q_pos;

    let mut support_rows: Vec<usize> = pos[..s_pos].iter().chain(&neg[..s_neg]).copied().collect();
    let mut query_rows: Vec<usize> =
        pos[s_pos..s_pos + q_pos].iter().chain(&neg[s_neg..s_neg + q_neg]).copied().collect();
    support_rows.shuffle(&mut rng);
    query_rows.shuffle(&mut rng);

    Ok(Episode {
        task_index,
        seed: task_seed,
        support: pool.select_rows(&support_rows)?,
        query: pool.select_rows(&query_rows)?,
        support_rows,
        query_rows,
    })
}
