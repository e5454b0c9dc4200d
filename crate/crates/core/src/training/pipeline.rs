use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::metrics::{compute_metrics, spread, summarize, EvalMetrics, Summary};
use super::trainer::{evaluate, train, FitConfig, TrainReport};
use crate::dataset::folds::{split_validation, stratified_kfold, FoldPlan};
use crate::dataset::preprocess::Preprocessor;
use crate::dataset::schema::TARGET_NAMES;
use crate::dataset::{build_windows, LongitudinalDataset, Window};
use crate::edmd::{EdmdConfig, EdmdModel, LinearBaseline};
use crate::error::{Error, Result};
use crate::model::{AblationFlags, NkmModel};
use crate::numerics::linalg::spectral_norm;
use crate::{par, seeds};

/// Fold-local data: preprocessing fitted on the training subjects and
/// windows for fitting, validation and testing.
#[derive(Debug, Clone)]
pub struct FoldData {
    pub fold: usize,
    pub pre: Preprocessor,
    /// Preprocessed windows.
    pub train: Vec<Window>,
    pub val: Vec<Window>,
    /// Raw windows with complete targets.
    pub test: Vec<Window>,
    pub train_subjects: Vec<usize>,
    pub val_subjects: Vec<usize>,
    pub test_subjects: Vec<usize>,
}

/// Windows of `ds.select(idx)` whose target visit is fully observed.
pub fn complete_windows(ds: &LongitudinalDataset, idx: &[usize], w: usize) -> Vec<Window> {
    build_windows(&ds.select(idx), w)
        .into_iter()
        .filter(|w| w.target_complete())
        .collect()
}

pub fn prepare_fold(
    ds: &LongitudinalDataset,
    plan: &FoldPlan,
    fold: usize,
    cfg: &FitConfig,
    seed: u64,
) -> Result<FoldData> {
    let (train_idx, test_idx) = plan.split(ds, fold);
    let pre = Preprocessor::fit(
        &ds.select(&train_idx),
        cfg.train.knn_k,
        cfg.train.standardize_targets,
    )?;
    let vseed = seeds::derive(seeds::derive(seed, seeds::STREAM_VALIDATION), fold as u64);
    let (fit_idx, val_idx) = split_validation(&train_idx, cfg.train.val_frac, vseed);
    let w = cfg.model.window;
    let train = pre.transform_windows(&complete_windows(ds, &fit_idx, w))?;
    let val = pre.transform_windows(&complete_windows(ds, &val_idx, w))?;
    let test = complete_windows(ds, &test_idx, w);
    if train.is_empty() || test.len() < 2 {
        return Err(Error::Config(format!(
            "fold {fold}: {} training and {} test windows (need ≥ 1 and ≥ 2)",
            train.len(),
            test.len()
        )));
    }
    Ok(FoldData {
        fold,
        pre,
        train,
        val,
        test,
        train_subjects: fit_idx,
        val_subjects: val_idx,
        test_subjects: test_idx,
    })
}

#[derive(Debug, Clone)]
pub struct FoldOutcome {
    pub fold: usize,
    pub metrics: EvalMetrics,
    pub report: TrainReport,
    pub model: NkmModel,
    pub pre: Preprocessor,
    pub test: Vec<Window>,
    pub predictions: Vec<[f64; 3]>,
}

/// Seed of the model trained on `fold`; shared by every ablation setup.
pub fn fold_seed(seed: u64, fold: usize) -> u64 {
    seeds::derive(seeds::derive(seed, seeds::STREAM_MODEL), fold as u64)
}

pub fn run_fold(
    data: &FoldData,
    cfg: &FitConfig,
    flags: AblationFlags,
    seed: u64,
) -> Result<FoldOutcome> {
    let s = fold_seed(seed, data.fold);
    let mut model = NkmModel::new(&cfg.model, flags, s)?;
    let report = train(&mut model, &data.train, &data.val, cfg, s)?;
    let (metrics, predictions) = evaluate(&model, &data.pre, &data.test)?;
    Ok(FoldOutcome {
        fold: data.fold,
        metrics,
        report,
        model,
        pre: data.pre.clone(),
        test: data.test.clone(),
        predictions,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub fold: usize,
    pub metrics: EvalMetrics,
    pub epochs_run: usize,
    /// Absent for closed-form baselines.
    pub best_val_loss: Option<f64>,
    /// Absent for models without a Koopman matrix.
    pub spectral_norm: Option<f64>,
}

/// Cross-validated result of one setup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub setup: String,
    pub flags: AblationFlags,
    pub folds: Vec<FoldSummary>,
    /// Mean over folds of the target-averaged metrics.
    pub mean: Summary,
    pub std: Summary,
    /// Per-target means over folds, in target order.
    pub per_target: Vec<Summary>,
}

impl CvReport {
    pub fn from_outcomes(setup: &str, flags: AblationFlags, outcomes: &[FoldOutcome]) -> Self {
        let folds: Vec<FoldSummary> = outcomes
            .iter()
            .map(|o| FoldSummary {
                fold: o.fold,
                metrics: o.metrics.clone(),
                epochs_run: o.report.epochs_run(),
                best_val_loss: Some(o.report.best_val_loss),
                spectral_norm: Some(o.report.spectral_norm),
            })
            .collect();
        Self::from_folds(setup, flags, folds)
    }

    pub fn from_folds(setup: &str, flags: AblationFlags, folds: Vec<FoldSummary>) -> Self {
        let means: Vec<Summary> = folds.iter().map(|f| f.metrics.mean).collect();
        let per_target = (0..TARGET_NAMES.len())
            .map(|j| {
                summarize(folds.iter().map(|f| {
                    let m = &f.metrics.per_target[j];
                    Summary {
                        pearson: m.pearson,
                        spearman: m.spearman,
                        mae: m.mae,
                        rmse: m.rmse,
                    }
                }))
            })
            .collect();
        Self {
            setup: setup.into(),
            flags,
            mean: summarize(means.iter().copied()),
            std: spread(&means),
            folds,
            per_target,
        }
    }

    /// One line: `setup  r ± sd  ρ ± sd  MAE ± sd  RMSE ± sd`.
    pub fn row(&self) -> String {
        format!(
            "{:<20} {:.4} ± {:.4}  {:.4} ± {:.4}  {:.4} ± {:.4}  {:.4} ± {:.4}",
            self.setup,
            self.mean.pearson,
            self.std.pearson,
            self.mean.spearman,
            self.std.spearman,
            self.mean.mae,
            self.std.mae,
            self.mean.rmse,
            self.std.rmse
        )
    }
}

pub const TABLE_HEADER: &str =
    "setup                r                 rho               MAE               RMSE";

/// Prepare every fold of a seeded stratified split.
pub fn prepare_folds(
    ds: &LongitudinalDataset,
    cfg: &FitConfig,
    k: usize,
    seed: u64,
) -> Result<(FoldPlan, Vec<FoldData>)> {
    cfg.validate()?;
    let plan = stratified_kfold(ds, k, seeds::derive(seed, seeds::STREAM_FOLDS))?;
    let folds = par::map_range(k, |f| prepare_fold(ds, &plan, f, cfg, seed))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok((plan, folds))
}

pub fn run_setup(
    folds: &[FoldData],
    cfg: &FitConfig,
    setup: &str,
    flags: AblationFlags,
    seed: u64,
) -> Result<(CvReport, Vec<FoldOutcome>)> {
    let outcomes = par::map(folds, |d| run_fold(d, cfg, flags, seed))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok((CvReport::from_outcomes(setup, flags, &outcomes), outcomes))
}

/// k-fold cross-validation of one setup.
pub fn run_cv(
    ds: &LongitudinalDataset,
    cfg: &FitConfig,
    flags: AblationFlags,
    k: usize,
    seed: u64,
) -> Result<(CvReport, Vec<FoldOutcome>)> {
    let (_, folds) = prepare_folds(ds, cfg, k, seed)?;
    run_setup(&folds, cfg, "full", flags, seed)
}

/// Ablation setups in table order.
pub fn ablation_setups() -> [(&'static str, AblationFlags); 5] {
    let f = AblationFlags::default();
    [
        ("full", f),
        (
            "no control",
            AblationFlags {
                no_control: true,
                ..f
            },
        ),
        (
            "no temporal attn.",
            AblationFlags {
                no_temporal_attention: true,
                ..f
            },
        ),
        (
            "no feature attn.",
            AblationFlags {
                no_feature_attention: true,
                ..f
            },
        ),
        (
            "no spectral reg.",
            AblationFlags {
                no_spectral_reg: true,
                ..f
            },
        ),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<CvReport>,
}

impl AblationTable {
    pub fn row(&self, setup: &str) -> Option<&CvReport> {
        self.rows.iter().find(|r| r.setup == setup)
    }

    /// Folds in which `a` has a strictly higher mean Pearson r than `b`.
    pub fn wins(&self, a: &str, b: &str) -> Result<usize> {
        let (ra, rb) = match (self.row(a), self.row(b)) {
            (Some(x), Some(y)) => (x, y),
            _ => return Err(Error::Contract(format!("unknown setup `{a}` or `{b}`"))),
        };
        Ok(ra
            .folds
            .iter()
            .zip(&rb.folds)
            .filter(|(x, y)| x.metrics.mean.pearson > y.metrics.mean.pearson)
            .count())
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{TABLE_HEADER}").unwrap();
        for r in &self.rows {
            writeln!(s, "{}", r.row()).unwrap();
        }
        s
    }

    /// CSV with columns `setup,target,pearson,spearman,mae,rmse`; the
    /// `mean` target is the target-averaged row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("setup,target,pearson,spearman,mae,rmse\n");
        for r in &self.rows {
            let rows = r
                .per_target
                .iter()
                .zip(TARGET_NAMES)
                .map(|(m, t)| (t, *m))
                .chain([("mean", r.mean)]);
            for (t, m) in rows {
                writeln!(
                    s,
                    "{},{},{:.10},{:.10},{:.10},{:.10}",
                    r.setup, t, m.pearson, m.spearman, m.mae, m.rmse
                )
                .unwrap();
            }
        }
        s
    }
}

/// Train and evaluate all five setups on the same folds and seeds.
pub fn run_ablation(
    ds: &LongitudinalDataset,
    cfg: &FitConfig,
    k: usize,
    seed: u64,
) -> Result<AblationTable> {
    let (_, folds) = prepare_folds(ds, cfg, k, seed)?;
    let mut rows = Vec::new();
    for (name, flags) in ablation_setups() {
        rows.push(run_setup(&folds, cfg, name, flags, seed)?.0);
    }
    Ok(AblationTable { rows })
}

fn baseline_fold(
    fold: &FoldData,
    preds: Vec<[f64; 3]>,
    k_norm: Option<f64>,
) -> Result<FoldSummary> {
    let preds: Vec<[f64; 3]> = preds.iter().map(|y| fold.pre.unscale_target(y)).collect();
    let truth: Vec<[f64; 3]> = fold.test.iter().map(|w| w.target).collect();
    Ok(FoldSummary {
        fold: fold.fold,
        metrics: compute_metrics(&preds, &truth)?,
        epochs_run: 0,
        best_val_loss: None,
        spectral_norm: k_norm,
    })
}

/// EDMD and ridge linear regression on the same folds. Returns both reports
/// and the fitted EDMD model of every fold.
pub fn run_baselines(
    folds: &[FoldData],
    cfg: &EdmdConfig,
    seed: u64,
) -> Result<(CvReport, CvReport, Vec<EdmdModel>)> {
    let per_fold = par::map(folds, |fold| -> Result<_> {
        let test = fold.pre.transform_windows(&fold.test)?;
        let s = seeds::derive(seeds::derive(seed, seeds::STREAM_EDMD), fold.fold as u64);
        let mut edmd = EdmdModel::new(cfg.clone(), s);
        edmd.fit(&fold.train)?;
        let e = baseline_fold(
            fold,
            edmd.predict(&test)?,
            Some(spectral_norm(edmd.koopman()?)?),
        )?;
        let lin = LinearBaseline::fit(&fold.train, cfg.readout_alpha)?;
        let l = baseline_fold(fold, lin.predict(&test), None)?;
        Ok((e, l, edmd))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let mut e_folds = Vec::new();
    let mut l_folds = Vec::new();
    let mut models = Vec::new();
    for (e, l, m) in per_fold {
        e_folds.push(e);
        l_folds.push(l);
        models.push(m);
    }
    let flags = AblationFlags::default();
    Ok((
        CvReport::from_folds("EDMD (RBF)", flags, e_folds),
        CvReport::from_folds("linear regression", flags, l_folds),
        models,
    ))
}
