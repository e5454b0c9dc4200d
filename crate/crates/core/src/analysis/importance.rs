use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::folds::split_validation;
use crate::dataset::preprocess::Preprocessor;
use crate::dataset::schema::{feature_names, N_FEATURES, N_TARGETS, TARGET_NAMES};
use crate::dataset::{LongitudinalDataset, Window};
use crate::edmd::LinearBaseline;
use crate::error::{Error, Result};
use crate::model::NkmModel;
use crate::training::metrics::pearson;
use crate::training::pipeline::complete_windows;
use crate::{par, seeds};

pub const METHOD: &str = "permutation importance: drop in held-out Pearson r when one feature column is shuffled across test windows (same permutation at every visit); beta is the mean feature-attention weight per modality";

/// Predictor on preprocessed windows.
pub trait WindowPredictor {
    fn predict(&self, windows: &[Window]) -> Result<Vec<[f64; N_TARGETS]>>;

    /// Mean feature-attention weight per modality group, when the model has one.
    fn mean_beta(&self, _windows: &[Window]) -> Result<Option<(Vec<String>, Vec<f64>)>> {
        Ok(None)
    }
}

impl WindowPredictor for NkmModel {
    fn predict(&self, windows: &[Window]) -> Result<Vec<[f64; N_TARGETS]>> {
        crate::training::trainer::predict_scaled(self, windows)
    }

    fn mean_beta(&self, windows: &[Window]) -> Result<Option<(Vec<String>, Vec<f64>)>> {
        let names: Vec<String> = self
            .config()
            .groups()
            .iter()
            .map(|g| g.name().to_string())
            .collect();
        let betas = par::map(windows, |w| self.forward(&w.inputs).map(|f| f.beta))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let mut mean = vec![0.0; names.len()];
        let mut n = 0.0;
        for b in betas.iter().filter(|b| !b.is_empty()) {
            for (m, v) in mean.iter_mut().zip(b) {
                *m += v;
            }
            n += 1.0;
        }
        if n == 0.0 {
            return Ok(None);
        }
        mean.iter_mut().for_each(|m| *m /= n);
        Ok(Some((names, mean)))
    }
}

impl WindowPredictor for LinearBaseline {
    fn predict(&self, windows: &[Window]) -> Result<Vec<[f64; N_TARGETS]>> {
        Ok(LinearBaseline::predict(self, windows))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImportanceConfig {
    pub runs: usize,
    pub test_frac: f64,
    pub window: usize,
    pub knn_k: usize,
    pub top: usize,
}

impl Default for ImportanceConfig {
    fn default() -> Self {
        Self {
            runs: 50,
            test_frac: 0.2,
            window: 3,
            knn_k: 5,
            top: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureImportance {
    pub feature: String,
    /// Mean over runs, per target.
    pub per_target: [f64; N_TARGETS],
    pub mean: f64,
    pub top_frequency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceReport {
    pub method: String,
    pub runs: usize,
    pub targets: Vec<String>,
    pub features: Vec<FeatureImportance>,
    /// Mean over runs of the mean feature-attention weight per modality.
    pub beta: Vec<(String, f64)>,
    pub baseline_r: f64,
}

impl ImportanceReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("feature,MMSE,CDRSB,ADAS13,mean,top_frequency\n");
        for f in &self.features {
            s.push_str(&format!(
                "{},{:.10},{:.10},{:.10},{:.10},{:.4}\n",
                f.feature,
                f.per_target[0],
                f.per_target[1],
                f.per_target[2],
                f.mean,
                f.top_frequency
            ));
        }
        s
    }
}

fn per_target_r(pred: &[[f64; N_TARGETS]], truth: &[Window]) -> [f64; N_TARGETS] {
    let mut r = [0.0; N_TARGETS];
    for (j, out) in r.iter_mut().enumerate() {
        let p: Vec<f64> = pred.iter().map(|y| y[j]).collect();
        let t: Vec<f64> = truth.iter().map(|w| w.target[j]).collect();
        *out = pearson(&p, &t).0;
    }
    r
}

/// Copy of `windows` where feature `j` of window `i` is taken from window
/// `perm[i]` at every visit.
pub fn permute_feature(windows: &[Window], j: usize, perm: &[usize]) -> Vec<Window> {
    let mut out = windows.to_vec();
    for (i, w) in out.iter_mut().enumerate() {
        for (v, row) in w.inputs.iter_mut().enumerate() {
            row[j] = windows[perm[i]].inputs[v][j];
        }
    }
    out
}

struct RunResult {
    drops: Vec<[f64; N_TARGETS]>,
    beta: Option<(Vec<String>, Vec<f64>)>,
    base: f64,
}

fn one_run<P, F>(
    factory: &F,
    ds: &LongitudinalDataset,
    cfg: &ImportanceConfig,
    run_seed: u64,
) -> Result<RunResult>
where
    P: WindowPredictor,
    F: Fn(&[Window], u64) -> Result<P>,
{
    let all: Vec<usize> = (0..ds.n_subjects()).collect();
    let (train_idx, test_idx) = split_validation(
        &all,
        cfg.test_frac,
        seeds::derive(run_seed, seeds::STREAM_FOLDS),
    );
    let pre = Preprocessor::fit(&ds.select(&train_idx), cfg.knn_k, true)?;
    let train = pre.transform_windows(&complete_windows(ds, &train_idx, cfg.window))?;
    let test = pre.transform_windows(&complete_windows(ds, &test_idx, cfg.window))?;
    if train.is_empty() || test.len() < 2 {
        return Err(Error::Config(
            "importance split leaves too few windows".into(),
        ));
    }
    let model = factory(&train, seeds::derive(run_seed, seeds::STREAM_MODEL))?;
    let base = per_target_r(&model.predict(&test)?, &test);
    let mut perm: Vec<usize> = (0..test.len()).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seeds::derive(
        run_seed,
        seeds::STREAM_PERMUTE,
    )));
    let mut drops = Vec::with_capacity(N_FEATURES);
    for j in 0..N_FEATURES {
        let r = per_target_r(&model.predict(&permute_feature(&test, j, &perm))?, &test);
        drops.push(std::array::from_fn(|t| base[t] - r[t]));
    }
    Ok(RunResult {
        drops,
        beta: model.mean_beta(&test)?,
        base: base.iter().sum::<f64>() / N_TARGETS as f64,
    })
}

/// Permutation importance over `cfg.runs` reseeded train/test splits.
/// `factory` fits a predictor on preprocessed training windows.
pub fn feature_importance<P, F>(
    factory: F,
    ds: &LongitudinalDataset,
    cfg: &ImportanceConfig,
    seed: u64,
) -> Result<ImportanceReport>
where
    P: WindowPredictor,
    F: Fn(&[Window], u64) -> Result<P> + Sync + Send,
{
    if cfg.runs == 0 {
        return Err(Error::Config("importance needs runs ≥ 1".into()));
    }
    let base_seed = seeds::derive(seed, seeds::STREAM_PERMUTE);
    let runs = par::map_range(cfg.runs, |r| {
        one_run(&factory, ds, cfg, seeds::derive(base_seed, r as u64))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let n = cfg.runs as f64;
    let names = feature_names();
    let mut feats: Vec<FeatureImportance> = names
        .iter()
        .map(|f| FeatureImportance {
            feature: f.clone(),
            per_target: [0.0; N_TARGETS],
            mean: 0.0,
            top_frequency: 0.0,
        })
        .collect();
    for run in &runs {
        let means: Vec<f64> = run
            .drops
            .iter()
            .map(|d| d.iter().sum::<f64>() / N_TARGETS as f64)
            .collect();
        let mut order: Vec<usize> = (0..N_FEATURES).collect();
        order.sort_by(|&a, &b| means[b].total_cmp(&means[a]).then(a.cmp(&b)));
        for &j in order.iter().take(cfg.top) {
            feats[j].top_frequency += 1.0 / n;
        }
        for (f, d) in feats.iter_mut().zip(&run.drops) {
            for t in 0..N_TARGETS {
                f.per_target[t] += d[t] / n;
            }
        }
    }
    for f in &mut feats {
        f.mean = f.per_target.iter().sum::<f64>() / N_TARGETS as f64;
        f.top_frequency = f.top_frequency.min(1.0);
    }
    let mut beta: Vec<(String, f64)> = Vec::new();
    let with_beta: Vec<_> = runs.iter().filter_map(|r| r.beta.as_ref()).collect();
    if let Some((groups, _)) = with_beta.first() {
        for (g, name) in groups.iter().enumerate() {
            let m = with_beta.iter().map(|(_, b)| b[g]).sum::<f64>() / with_beta.len() as f64;
            beta.push((name.clone(), m));
        }
    }
    Ok(ImportanceReport {
        method: METHOD.into(),
        runs: cfg.runs,
        targets: TARGET_NAMES.iter().map(|s| s.to_string()).collect(),
        features: feats,
        beta,
        baseline_r: runs.iter().map(|r| r.base).sum::<f64>() / n,
    })
}
