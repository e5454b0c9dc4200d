use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{koopman_grad_closed_form, CompositeLoss, EvalOptions, LossConfig, LossParts};
use crate::dataset::preprocess::Preprocessor;
use crate::dataset::schema::N_TARGETS;
use crate::dataset::Window;
use crate::error::{Error, Result};
use crate::model::{project_spectral, ArchConfig, NkmModel};
use crate::numerics::linalg::spectral_norm;
use crate::numerics::optim::{clip_global_norm, EarlyStopping, OptimConfig, ReduceOnPlateau};
use crate::{par, seeds};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    #[default]
    Joint,
    Alternating,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Fraction of training subjects held out for validation.
    pub val_frac: f64,
    pub mode: TrainMode,
    /// Step size of the Koopman update in alternating mode.
    pub k_lr: f64,
    pub knn_k: usize,
    pub standardize_targets: bool,
    /// Project `K` onto the `ρ` ball after training.
    pub project_final: bool,
    /// Reload the parameters of the best validation epoch at the end.
    pub restore_best: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 128,
            val_frac: 0.15,
            mode: TrainMode::Joint,
            k_lr: 1e-2,
            knn_k: 5,
            standardize_targets: true,
            project_final: true,
            restore_best: true,
        }
    }
}

impl TrainConfig {
    /// Longer schedule: 300 epochs at batch size 64.
    pub fn long() -> Self {
        Self {
            epochs: 300,
            batch_size: 64,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.knn_k == 0 {
            return Err(Error::Config(
                "epochs, batch_size and knn_k must be ≥ 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.val_frac) {
            return Err(Error::Config("val_frac must lie in [0, 1)".into()));
        }
        if !(self.k_lr > 0.0) {
            return Err(Error::Config("k_lr must be > 0".into()));
        }
        Ok(())
    }
}

/// Everything needed to fit one model.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub model: ArchConfig,
    pub train: TrainConfig,
    pub optim: OptimConfig,
    pub loss: LossConfig,
}

impl FitConfig {
    /// Laptop-scale schedule: the desk architecture trained for 60 epochs
    /// at batch size 32 and learning rate 2e-3.
    pub fn desk() -> Self {
        let mut cfg = Self::default();
        cfg.train.epochs = 60;
        cfg.train.batch_size = 32;
        cfg.optim.learning_rate = 2e-3;
        cfg
    }

    /// Full-size architecture with the reference schedule.
    pub fn adni_full() -> Self {
        Self {
            model: ArchConfig::adni_full(),
            ..Self::default()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "adni-full" => Ok(Self::adni_full()),
            other => Err(Error::Config(format!(
                "unknown preset `{other}` (expected desk or adni-full)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.optim.validate()?;
        self.loss.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    #[serde(rename = "L_pred")]
    pub l_pred: f64,
    #[serde(rename = "L_koop")]
    pub l_koop: f64,
    #[serde(rename = "R_spec")]
    pub r_spec: f64,
    pub total: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
    /// Dense-SVD norm of the final `K`.
    pub spectral_norm: f64,
    pub projected: bool,
}

impl TrainReport {
    pub fn epochs_run(&self) -> usize {
        self.history.len()
    }
}

fn check(parts: &LossParts, epoch: usize, batch: usize) -> Result<()> {
    match parts.non_finite() {
        Some(name) => Err(Error::NonFinite(format!(
            "{name} at epoch {epoch}, batch {batch}"
        ))),
        None => Ok(()),
    }
}

/// Eval-mode composite loss over `windows`.
pub fn eval_loss(model: &NkmModel, windows: &[Window], loss: &LossConfig) -> Result<LossParts> {
    let obj = CompositeLoss::new(&model.net, windows.iter().collect(), loss, None);
    Ok(obj.evaluate(&model.store, EvalOptions::default())?.parts)
}

/// Train on preprocessed windows, validating on `val` (or on the training
/// set when `val` is empty).
pub fn train(
    model: &mut NkmModel,
    train: &[Window],
    val: &[Window],
    cfg: &FitConfig,
    seed: u64,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Contract("no training windows".into()));
    }
    let tc = &cfg.train;
    let loss = cfg.loss.effective(model.flags());
    let kid = model.net.k;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut shuffle = ChaCha8Rng::seed_from_u64(seeds::derive(seed, seeds::STREAM_SHUFFLE));
    let drop_base = seeds::derive(seed, seeds::STREAM_DROPOUT);
    let mut sched = ReduceOnPlateau::new(
        cfg.optim.learning_rate,
        cfg.optim.scheduler_factor,
        cfg.optim.scheduler_patience,
    );
    let mut early = EarlyStopping::new(cfg.optim.early_stop_patience);
    let mut history = Vec::new();
    let mut best = (f64::INFINITY, 0usize, model.store.flat_values());
    let mut stopped_early = false;
    let others: Vec<_> = model.store.ids().filter(|&i| i != kid).collect();

    for epoch in 0..tc.epochs {
        let lr = sched.lr();
        order.shuffle(&mut shuffle);
        let mut sums = [0.0; 3];
        for (b, idx) in order.chunks(tc.batch_size).enumerate() {
            let batch: Vec<&Window> = idx.iter().map(|&i| &train[i]).collect();
            let dseed = seeds::derive(drop_base, ((epoch as u64) << 32) | b as u64);
            let obj = CompositeLoss::new(&model.net, batch.clone(), &loss, Some(dseed));
            let e = obj.evaluate(
                &model.store,
                EvalOptions {
                    grad: true,
                    grad_koop_k: true,
                    pairs: false,
                },
            )?;
            check(&e.parts, epoch, b)?;
            let w = batch.len() as f64;
            sums[0] += e.parts.l_pred * w;
            sums[1] += e.parts.l_koop * w;
            sums[2] += e.parts.r_spec * w;
            let mut g = e.grads.expect("requested");
            clip_global_norm(&mut g, cfg.optim.grad_clip_norm);
            model.store.set_grads(&g)?;
            match tc.mode {
                TrainMode::Joint => model.store.adamw_step(&cfg.optim, lr, &[])?,
                TrainMode::Alternating => {
                    model.store.adamw_step(&cfg.optim, lr, &[kid])?;
                    let obj = CompositeLoss::new(&model.net, batch, &loss, Some(dseed));
                    let e = obj.evaluate(
                        &model.store,
                        EvalOptions {
                            grad: true,
                            grad_koop_k: false,
                            pairs: true,
                        },
                    )?;
                    check(&e.parts, epoch, b)?;
                    let mut gk = e.grads.expect("requested");
                    let pairs = e.pairs.expect("requested");
                    if !pairs.is_empty() {
                        let closed =
                            koopman_grad_closed_form(model.koopman(), &pairs, loss.lambda)?;
                        gk.get_mut(kid).add_assign(&closed)?;
                    }
                    for &i in &others {
                        gk.get_mut(i).fill(0.0);
                    }
                    clip_global_norm(&mut gk, cfg.optim.grad_clip_norm);
                    let mut k = model.koopman().clone();
                    k.add_scaled(-tc.k_lr, gk.get(kid))?;
                    *model.koopman_mut() = project_spectral(&k, loss.rho)?;
                }
            }
        }
        let n = train.len() as f64;
        let parts = LossParts::new(sums[0] / n, sums[1] / n, sums[2] / n, loss.lambda);
        let val_loss = if val.is_empty() {
            parts.total
        } else {
            eval_loss(model, val, &loss)?.total
        };
        if !val_loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "validation loss at epoch {epoch}"
            )));
        }
        if val_loss < best.0 {
            best = (val_loss, epoch, model.store.flat_values());
        }
        history.push(EpochRecord {
            epoch,
            l_pred: parts.l_pred,
            l_koop: parts.l_koop,
            r_spec: parts.r_spec,
            total: parts.total,
            val_loss,
            lr,
        });
        sched.observe(val_loss);
        early.observe(epoch, val_loss);
        if early.should_stop() {
            stopped_early = true;
            break;
        }
    }
    if tc.restore_best {
        model.store.load_flat(&best.2)?;
    }
    let projected = tc.project_final && !model.flags().no_spectral_reg;
    if projected {
        let k = project_spectral(model.koopman(), loss.rho)?;
        *model.koopman_mut() = k;
    }
    Ok(TrainReport {
        history,
        best_epoch: best.1,
        best_val_loss: best.0,
        stopped_early,
        spectral_norm: spectral_norm(model.koopman())?,
        projected,
    })
}

/// Eval-mode predictions on preprocessed windows, in model units.
pub fn predict_scaled(model: &NkmModel, windows: &[Window]) -> Result<Vec<[f64; N_TARGETS]>> {
    par::map(windows, |w| model.predict(&w.inputs))
        .into_iter()
        .collect()
}

/// Predictions in original target units for raw (unprocessed) windows.
pub fn predict(
    model: &NkmModel,
    pre: &Preprocessor,
    raw: &[Window],
) -> Result<Vec<[f64; N_TARGETS]>> {
    let ws = pre.transform_windows(raw)?;
    Ok(predict_scaled(model, &ws)?
        .iter()
        .map(|y| pre.unscale_target(y))
        .collect())
}

/// Metrics of `model` on raw windows with complete targets.
pub fn evaluate(
    model: &NkmModel,
    pre: &Preprocessor,
    raw: &[Window],
) -> Result<(super::EvalMetrics, Vec<[f64; N_TARGETS]>)> {
    let preds = predict(model, pre, raw)?;
    let truth: Vec<[f64; N_TARGETS]> = raw.iter().map(|w| w.target).collect();
    Ok((super::metrics::compute_metrics(&preds, &truth)?, preds))
}
