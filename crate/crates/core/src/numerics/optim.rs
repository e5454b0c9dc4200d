use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use crate::error::{Error, Result};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Matrix,
    pub grad: Matrix,
    m: Matrix,
    v: Matrix,
}

/// Named parameter tensors with gradient buffers and AdamW moments.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let (r, c) = value.shape();
        self.params.push(Param {
            name: name.into(),
            value,
            grad: Matrix::zeros(r, c),
            m: Matrix::zeros(r, c),
            v: Matrix::zeros(r, c),
        });
        ParamId(self.params.len() - 1)
    }

    #[inline]
    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].value
    }

    #[inline]
    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Parameter values concatenated in declaration order.
    pub fn flat_values(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for p in &self.params {
            out.extend_from_slice(p.value.data());
        }
        out
    }

    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_scalars() {
            return Err(Error::Contract(format!(
                "flat parameter vector has {} values, store expects {}",
                flat.len(),
                self.num_scalars()
            )));
        }
        let mut off = 0;
        for p in &mut self.params {
            let n = p.value.len();
            p.value.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Copy `grads` into the per-parameter gradient buffers.
    pub fn set_grads(&mut self, grads: &GradSet) -> Result<()> {
        if grads.0.len() != self.params.len() {
            return Err(Error::Contract(
                "gradient set does not match parameter store".into(),
            ));
        }
        for (p, g) in self.params.iter_mut().zip(&grads.0) {
            if p.value.shape() != g.shape() {
                return Err(Error::Dimension {
                    op: "set_grads",
                    left: p.value.shape(),
                    right: g.shape(),
                });
            }
            p.grad.data_mut().copy_from_slice(g.data());
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    pub fn grads(&self) -> GradSet {
        GradSet(self.params.iter().map(|p| p.grad.clone()).collect())
    }

    /// One decoupled-weight-decay Adam step using the stored gradients.
    /// Parameters listed in `frozen` are left untouched.
    pub fn adamw_step(&mut self, cfg: &OptimConfig, lr: f64, frozen: &[ParamId]) -> Result<()> {
        for p in &self.params {
            if let Some(bad) = p.grad.data().iter().find(|g| !g.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of parameter `{}` ({bad})",
                    p.name
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let decay = 1.0 - lr * cfg.weight_decay;
        for (i, p) in self.params.iter_mut().enumerate() {
            if frozen.contains(&ParamId(i)) {
                continue;
            }
            let Param {
                value, grad, m, v, ..
            } = p;
            for (((w, &g), mi), vi) in value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * g;
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * g * g;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w = *w * decay - lr * mhat / (vhat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}

/// Gradients aligned index-for-index with a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradSet(pub Vec<Matrix>);

impl GradSet {
    pub fn zeros_like(store: &ParamStore) -> Self {
        GradSet(
            store
                .iter()
                .map(|p| Matrix::zeros(p.value.rows(), p.value.cols()))
                .collect(),
        )
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.0[id.0]
    }

    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.0[id.0]
    }

    pub fn add_assign(&mut self, other: &GradSet) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.0 {
            g.scale_mut(s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.0
            .iter()
            .flat_map(|g| g.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(Matrix::is_finite)
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.0
            .iter()
            .flat_map(|g| g.data().iter().copied())
            .collect()
    }
}

/// Rescale `grads` so their global L2 norm is at most `max_norm`. Returns
/// the norm before clipping. Norms within rounding of `max_norm` count as
/// already clipped, which keeps the operation idempotent.
pub fn clip_global_norm(grads: &mut GradSet, max_norm: f64) -> f64 {
    const SLACK: f64 = 1e-12;
    let norm = grads.global_norm();
    if norm > max_norm * (1.0 + SLACK) {
        grads.scale(max_norm / norm);
    }
    norm
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub grad_clip_norm: f64,
    pub scheduler_patience: usize,
    pub scheduler_factor: f64,
    pub early_stop_patience: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            learning_rate: 4e-4,
            weight_decay: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip_norm: 1.0,
            scheduler_patience: 8,
            scheduler_factor: 0.5,
            early_stop_patience: 20,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("beta1 and beta2 must lie in [0, 1)".into()));
        }
        if !(self.grad_clip_norm > 0.0) {
            return Err(Error::Config("grad_clip_norm must be > 0".into()));
        }
        if !(self.scheduler_factor > 0.0 && self.scheduler_factor <= 1.0) {
            return Err(Error::Config("scheduler_factor must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Multiplies the learning rate by `factor` after `patience` epochs without
/// a relative improvement of the monitored loss.
#[derive(Debug, Clone)]
pub struct ReduceOnPlateau {
    factor: f64,
    patience: usize,
    best: f64,
    bad_epochs: usize,
    lr: f64,
}

impl ReduceOnPlateau {
    const REL_THRESHOLD: f64 = 1e-4;

    pub fn new(lr: f64, factor: f64, patience: usize) -> Self {
        Self {
            factor,
            patience,
            best: f64::INFINITY,
            bad_epochs: 0,
            lr,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn observe(&mut self, loss: f64) -> f64 {
        if loss < self.best * (1.0 - Self::REL_THRESHOLD) {
            self.best = loss;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs > self.patience {
                self.lr *= self.factor;
                self.bad_epochs = 0;
            }
        }
        self.lr
    }
}

/// Tracks the best validation loss; `should_stop` fires once `patience`
/// consecutive epochs pass without improvement.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            since_best: 0,
        }
    }

    /// Returns true when `loss` is a new best.
    pub fn observe(&mut self, epoch: usize, loss: f64) -> bool {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = epoch;
            self.since_best = 0;
            true
        } else {
            self.since_best += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.since_best >= self.patience
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn scalar_store(w: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", Matrix::from_vec(1, 1, vec![w]).unwrap());
        (s, id)
    }

    fn set_grad(s: &mut ParamStore, g: f64) {
        s.set_grads(&GradSet(vec![Matrix::from_vec(1, 1, vec![g]).unwrap()]))
            .unwrap();
    }

    #[test]
    fn decay_only_step() {
        let cfg = OptimConfig::default();
        let (mut s, id) = scalar_store(1.0);
        s.adamw_step(&cfg, cfg.learning_rate, &[]).unwrap();
        assert_eq!(s.value(id).get(0, 0), 1.0 * (1.0 - 4e-4 * 1e-3));
        assert_eq!(s.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let cfg = OptimConfig {
            weight_decay: 0.0,
            ..OptimConfig::default()
        };
        for g in [3.0, -0.02] {
            let (mut s, id) = scalar_store(0.5);
            set_grad(&mut s, g);
            s.adamw_step(&cfg, cfg.learning_rate, &[]).unwrap();
            let moved = 0.5 - s.value(id).get(0, 0);
            assert_abs_diff_eq!(moved, cfg.learning_rate * g.signum(), epsilon = 1e-9);
        }
    }

    #[test]
    fn three_steps_on_quadratic_match_unrolled_recurrence() {
        // f(w) = 0.5 * a * (w - c)^2, grad = a (w - c)
        let (a, c) = (2.5, 0.3);
        let cfg = OptimConfig {
            learning_rate: 0.1,
            weight_decay: 0.01,
            ..OptimConfig::default()
        };
        let (mut s, id) = scalar_store(1.7);
        for _ in 0..3 {
            let w = s.value(id).get(0, 0);
            set_grad(&mut s, a * (w - c));
            s.adamw_step(&cfg, cfg.learning_rate, &[]).unwrap();
        }
        let (b1, b2, eps, lr, wd) = (0.9f64, 0.999f64, 1e-8, 0.1, 0.01);
        let g1 = a * (1.7 - c);
        let m1 = (1.0 - b1) * g1;
        let v1 = (1.0 - b2) * g1 * g1;
        let w1 = 1.7 * (1.0 - lr * wd) - lr * (m1 / (1.0 - b1)) / ((v1 / (1.0 - b2)).sqrt() + eps);
        let g2 = a * (w1 - c);
        let m2 = b1 * m1 + (1.0 - b1) * g2;
        let v2 = b2 * v1 + (1.0 - b2) * g2 * g2;
        let w2 = w1 * (1.0 - lr * wd)
            - lr * (m2 / (1.0 - b1 * b1)) / ((v2 / (1.0 - b2 * b2)).sqrt() + eps);
        let g3 = a * (w2 - c);
        let m3 = b1 * m2 + (1.0 - b1) * g3;
        let v3 = b2 * v2 + (1.0 - b2) * g3 * g3;
        let w3 = w2 * (1.0 - lr * wd)
            - lr * (m3 / (1.0 - b1.powi(3))) / ((v3 / (1.0 - b2.powi(3))).sqrt() + eps);
        assert_abs_diff_eq!(s.value(id).get(0, 0), w3, epsilon = 1e-12);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let cfg = OptimConfig::default();
        let (mut s, _) = scalar_store(1.0);
        set_grad(&mut s, f64::NAN);
        let err = s.adamw_step(&cfg, 1e-3, &[]).unwrap_err();
        assert!(err.to_string().contains("`w`"), "{err}");
    }

    #[test]
    fn frozen_params_do_not_move() {
        let cfg = OptimConfig::default();
        let (mut s, id) = scalar_store(1.0);
        set_grad(&mut s, 1.0);
        s.adamw_step(&cfg, 1e-2, &[id]).unwrap();
        assert_eq!(s.value(id).get(0, 0), 1.0);
    }

    fn grads_with_norm(norm: f64) -> GradSet {
        // (3, 4) has norm 5
        let s = norm / 5.0;
        GradSet(vec![
            Matrix::from_vec(1, 1, vec![3.0 * s]).unwrap(),
            Matrix::from_vec(1, 1, vec![4.0 * s]).unwrap(),
        ])
    }

    #[test]
    fn clipping_cases() {
        let mut g = grads_with_norm(0.5);
        let before = g.clone();
        clip_global_norm(&mut g, 1.0);
        assert_eq!(g, before);

        let mut g = grads_with_norm(2.0);
        clip_global_norm(&mut g, 1.0);
        assert_abs_diff_eq!(g.global_norm(), 1.0, epsilon = 1e-12);

        let mut g = grads_with_norm(0.0);
        clip_global_norm(&mut g, 1.0);
        assert_eq!(g.global_norm(), 0.0);
    }

    #[test]
    fn plateau_halves_after_patience() {
        let mut sched = ReduceOnPlateau::new(1.0, 0.5, 8);
        sched.observe(1.0);
        for _ in 0..8 {
            assert_eq!(sched.observe(1.0), 1.0);
        }
        assert_eq!(sched.observe(1.0), 0.5);
    }

    #[test]
    fn early_stopping_fires_after_patience() {
        let mut es = EarlyStopping::new(20);
        es.observe(0, 1.0);
        for e in 1..20 {
            es.observe(e, 2.0);
            assert!(!es.should_stop());
        }
        es.observe(20, 2.0);
        assert!(es.should_stop());
        assert_eq!(es.best_epoch(), 0);
    }

    #[test]
    fn config_validation() {
        assert!(OptimConfig::default().validate().is_ok());
        let bad = OptimConfig {
            beta1: 1.0,
            ..OptimConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = OptimConfig {
            learning_rate: 0.0,
            ..OptimConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    proptest! {
        #[test]
        fn clipping_is_idempotent(vals in proptest::collection::vec(-10.0f64..10.0, 1..20), max in 0.1f64..5.0) {
            let mut g = GradSet(vec![Matrix::from_vec(1, vals.len(), vals).unwrap()]);
            clip_global_norm(&mut g, max);
            let once = g.clone();
            clip_global_norm(&mut g, max);
            prop_assert_eq!(g, once);
        }

        #[test]
        fn zero_grad_zero_decay_is_identity(vals in proptest::collection::vec(-10.0f64..10.0, 1..20), lr in 1e-5f64..1.0) {
            let mut s = ParamStore::new();
            let id = s.add("p", Matrix::from_vec(1, vals.len(), vals.clone()).unwrap());
            let cfg = OptimConfig { weight_decay: 0.0, ..OptimConfig::default() };
            for _ in 0..3 {
                s.adamw_step(&cfg, lr, &[]).unwrap();
            }
            prop_assert_eq!(s.value(id).data(), &vals[..]);
        }
    }
}
