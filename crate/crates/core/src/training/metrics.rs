use serde::{Deserialize, Serialize};

use crate::dataset::schema::{N_TARGETS, TARGET_NAMES};
use crate::error::{Error, Result};

/// Pearson correlation, or `(0, true)` when either input has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> (f64, bool) {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return (0.0, true);
    }
    ((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0), false)
}

/// 1-based ranks with ties sharing their average rank.
pub fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&i, &j| xs[i].total_cmp(&xs[j]));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

pub fn spearman(a: &[f64], b: &[f64]) -> (f64, bool) {
    pearson(&ranks(a), &ranks(b))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetMetrics {
    pub target: String,
    pub pearson: f64,
    pub spearman: f64,
    pub mae: f64,
    pub rmse: f64,
    pub degenerate: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Summary {
    pub pearson: f64,
    pub spearman: f64,
    pub mae: f64,
    pub rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub per_target: Vec<TargetMetrics>,
    /// Unweighted average over targets.
    pub mean: Summary,
    pub n_windows: usize,
    pub degenerate: bool,
}

pub fn target_metrics(name: &str, pred: &[f64], truth: &[f64]) -> TargetMetrics {
    let n = pred.len() as f64;
    let (r, d1) = pearson(pred, truth);
    let (rho, d2) = spearman(pred, truth);
    let mae = pred
        .iter()
        .zip(truth)
        .map(|(p, t)| (p - t).abs())
        .sum::<f64>()
        / n;
    let rmse = (pred
        .iter()
        .zip(truth)
        .map(|(p, t)| (p - t).powi(2))
        .sum::<f64>()
        / n)
        .sqrt();
    TargetMetrics {
        target: name.into(),
        pearson: r,
        spearman: rho,
        mae,
        // Rounding can place the computed RMSE an ulp below the MAE when all
        // errors are equal in magnitude.
        rmse: rmse.max(mae),
        degenerate: d1 || d2,
    }
}

pub fn compute_metrics(
    pred: &[[f64; N_TARGETS]],
    truth: &[[f64; N_TARGETS]],
) -> Result<EvalMetrics> {
    if pred.len() != truth.len() {
        return Err(Error::Dimension {
            op: "compute_metrics",
            left: (pred.len(), N_TARGETS),
            right: (truth.len(), N_TARGETS),
        });
    }
    if pred.len() < 2 {
        return Err(Error::Contract(format!(
            "metrics need ≥ 2 windows, got {}",
            pred.len()
        )));
    }
    let per_target: Vec<TargetMetrics> = (0..N_TARGETS)
        .map(|j| {
            let p: Vec<f64> = pred.iter().map(|r| r[j]).collect();
            let t: Vec<f64> = truth.iter().map(|r| r[j]).collect();
            target_metrics(TARGET_NAMES[j], &p, &t)
        })
        .collect();
    Ok(EvalMetrics {
        mean: summarize(per_target.iter().map(|m| Summary {
            pearson: m.pearson,
            spearman: m.spearman,
            mae: m.mae,
            rmse: m.rmse,
        })),
        degenerate: per_target.iter().any(|m| m.degenerate),
        per_target,
        n_windows: pred.len(),
    })
}

/// Field-wise arithmetic mean.
pub fn summarize(items: impl IntoIterator<Item = Summary>) -> Summary {
    let mut acc = Summary::default();
    let mut n = 0usize;
    for s in items {
        acc.pearson += s.pearson;
        acc.spearman += s.spearman;
        acc.mae += s.mae;
        acc.rmse += s.rmse;
        n += 1;
    }
    let n = n.max(1) as f64;
    Summary {
        pearson: acc.pearson / n,
        spearman: acc.spearman / n,
        mae: acc.mae / n,
        rmse: acc.rmse / n,
    }
}

/// Field-wise population standard deviation.
pub fn spread(items: &[Summary]) -> Summary {
    let m = summarize(items.iter().copied());
    let n = items.len().max(1) as f64;
    let sd = |f: fn(&Summary) -> f64, mu: f64| {
        (items.iter().map(|s| (f(s) - mu).powi(2)).sum::<f64>() / n).sqrt()
    };
    Summary {
        pearson: sd(|s| s.pearson, m.pearson),
        spearman: sd(|s| s.spearman, m.spearman),
        mae: sd(|s| s.mae, m.mae),
        rmse: sd(|s| s.rmse, m.rmse),
    }
}
