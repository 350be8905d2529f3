//! Independent reference implementations shared by the property and
//! acceptance tests.
#![allow(dead_code)]

use melemad::dataset::LabeledDataset;

/// Pairwise AUC: fraction of (positive, negative) pairs ranked correctly,
/// ties counting one half.
pub fn mann_whitney(probs: &[f64], labels: &[u8]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &pi) in probs.iter().enumerate() {
        for (j, &pj) in probs.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1.0;
                wins += if pi > pj {
                    1.0
                } else if pi == pj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    wins / pairs
}

/// Accuracy, precision, recall, F1 and MCC recounted from raw pairs.
pub fn brute_force_metrics(probs: &[f64], labels: &[u8], t: f64) -> [f64; 5] {
    let (mut tp, mut tn, mut fp, mut fn_) = (0.0, 0.0, 0.0, 0.0);
    for (&p, &l) in probs.iter().zip(labels) {
        let predicted = p >= t;
        let actual = l == 1;
        if predicted && actual {
            tp += 1.0;
        }
        if !predicted && !actual {
            tn += 1.0;
        }
        if predicted && !actual {
            fp += 1.0;
        }
        if !predicted && actual {
            fn_ += 1.0;
        }
    }
    let safe = |a: f64, b: f64| if b == 0.0 { 0.0 } else { a / b };
    let precision = safe(tp, tp + fp);
    let recall = safe(tp, tp + fn_);
    [
        (tp + tn) / (tp + tn + fp + fn_),
        precision,
        recall,
        safe(2.0 * precision * recall, precision + recall),
        safe(tp * tn - fp * fn_, ((tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_)).sqrt()),
    ]
}

/// Exhaustive root split search for the first boosting round: every
/// feature, every midpoint between adjacent distinct values. Returns the best
/// `(feature, threshold, gain)`, ties going to the earliest candidate, or
/// `None` when no candidate has positive gain.
pub fn exhaustive_root_split(ds: &LabeledDataset) -> Option<(usize, f64, f64)> {
    let y = ds.labels();
    let n = y.len();
    let pos = y.iter().filter(|&&l| l == 1).count() as f64;
    // The first round predicts the clamped prior everywhere.
    let p = (pos / n as f64).clamp(1e-6, 1.0 - 1e-6);
    let g: Vec<f64> = y.iter().map(|&l| p - f64::from(l)).collect();
    let h = p * (1.0 - p);
    let obj = |gs: f64, count: usize| gs * gs / (h * count as f64 + 1.0);
    let g_all: f64 = g.iter().sum();

    let mut cands = Vec::new();
    for f in 0..ds.n_features() {
        let mut vals = ds.features().column(f);
        vals.sort_by(f64::total_cmp);
        vals.dedup();
        for w in vals.windows(2) {
            let t = (w[0] + w[1]) / 2.0;
            let left: Vec<usize> = (0..n).filter(|&i| ds.features().get(i, f) < t).collect();
            let gl: f64 = left.iter().map(|&i| g[i]).sum();
            let gain = 0.5 * (obj(gl, left.len()) + obj(g_all - gl, n - left.len()) - obj(g_all, n));
            cands.push((f, t, gain));
        }
    }
    let best = cands.iter().map(|c| c.2).fold(f64::NEG_INFINITY, f64::max);
    if best.is_nan() || best <= 1e-12 {
        return None;
    }
    cands.into_iter().find(|c| best - c.2 <= 1e-9 * best)
}

/// Central differences of `f` at `at` with the given step.
pub fn central_differences(f: impl Fn(&[f64]) -> f64, at: &[f64], step: f64) -> Vec<f64> {
    let mut v = at.to_vec();
    (0..at.len())
        .map(|i| {
            let orig = v[i];
            v[i] = orig + step;
            let up = f(&v);
            v[i] = orig - step;
            let down = f(&v);
            v[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `|a - b| / max(|a|, |b|)` in the Euclidean norm; 0 when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}
