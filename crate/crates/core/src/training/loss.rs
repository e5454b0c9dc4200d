use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Window;
use crate::error::{Error, Result};
use crate::model::{AblationFlags, Net};
use crate::numerics::grad::Objective;
use crate::numerics::linalg::{
    pinv, power_iteration_backward, power_iteration_trace, DEFAULT_RCOND, POWER_ITERATION_SEED,
};
use crate::numerics::optim::{GradSet, ParamStore};
use crate::numerics::Matrix;
use crate::{par, seeds};

/// Windows per parallel work item. Fixed so that reductions do not depend
/// on the thread count.
pub const CHUNK: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Weight of the latent consistency term.
    pub lambda: f64,
    /// Weight of the spectral penalty.
    pub eta: f64,
    /// Spectral-norm target.
    pub rho: f64,
    pub power_iters: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            eta: 0.01,
            rho: 0.95,
            power_iters: 10,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !(self.eta >= 0.0) {
            return Err(Error::Config("lambda and eta must be ≥ 0".into()));
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(Error::Config(format!(
                "rho must lie in (0, 1), got {}",
                self.rho
            )));
        }
        if self.power_iters == 0 {
            return Err(Error::Config("power_iters must be ≥ 1".into()));
        }
        Ok(())
    }

    /// The configuration actually optimized under `flags`.
    pub fn effective(&self, flags: AblationFlags) -> Self {
        let mut c = self.clone();
        if flags.no_spectral_reg {
            c.eta = 0.0;
        }
        c
    }
}

/// Loss components; `total == l_pred + lambda * l_koop + r_spec` exactly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub l_pred: f64,
    pub l_koop: f64,
    pub r_spec: f64,
    pub total: f64,
}

impl LossParts {
    pub fn new(l_pred: f64, l_koop: f64, r_spec: f64, lambda: f64) -> Self {
        Self {
            l_pred,
            l_koop,
            r_spec,
            total: l_pred + lambda * l_koop + r_spec,
        }
    }

    /// Name of the first non-finite component, if any.
    pub fn non_finite(&self) -> Option<&'static str> {
        [
            ("L_pred", self.l_pred),
            ("L_koop", self.l_koop),
            ("R_spec", self.r_spec),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

/// `η (max(0, s² − ρ²))²` with `s` the power-iteration estimate of `‖K‖₂`.
/// Returns `(penalty, s)`; with `grad`, accumulates `∂penalty/∂K`.
pub fn spectral_penalty(
    k: &Matrix,
    cfg: &LossConfig,
    grad: Option<&mut Matrix>,
) -> Result<(f64, f64)> {
    let trace = power_iteration_trace(k, cfg.power_iters, POWER_ITERATION_SEED)?;
    let s = trace.estimate();
    let excess = (s * s - cfg.rho * cfg.rho).max(0.0);
    let value = cfg.eta * excess * excess;
    if let Some(g) = grad {
        if excess > 0.0 && cfg.eta > 0.0 {
            let ds = cfg.eta * 2.0 * excess * 2.0 * s;
            power_iteration_backward(k, &trace, ds, g);
        }
    }
    Ok((value, s))
}

/// Refined latent transition pairs with the control of their window.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LatentPairs {
    pub z: Vec<Vec<f64>>,
    pub z_next: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
}

impl LatentPairs {
    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    fn extend(&mut self, other: LatentPairs) {
        self.z.extend(other.z);
        self.z_next.extend(other.z_next);
        self.c.extend(other.c);
    }

    /// `(Ĉ_zz, Ĉ_z'z, Ĉ_cz)`, each averaged over pairs.
    pub fn covariances(&self) -> Result<(Matrix, Matrix, Matrix)> {
        let m = self.len();
        if m == 0 {
            return Err(Error::Contract("no latent transition pairs".into()));
        }
        let d = self.z[0].len();
        let mut czz = Matrix::zeros(d, d);
        let mut cpz = Matrix::zeros(d, d);
        let mut ccz = Matrix::zeros(d, d);
        let inv = 1.0 / m as f64;
        for i in 0..m {
            crate::numerics::matrix::outer_acc(&mut czz, inv, &self.z[i], &self.z[i]);
            crate::numerics::matrix::outer_acc(&mut cpz, inv, &self.z_next[i], &self.z[i]);
            crate::numerics::matrix::outer_acc(&mut ccz, inv, &self.c[i], &self.z[i]);
        }
        Ok((czz, cpz, ccz))
    }

    /// `mean ‖z' − K z − c‖²`.
    pub fn koop_loss(&self, k: &Matrix) -> Result<f64> {
        if self.is_empty() {
            return Ok(0.0);
        }
        let mut s = 0.0;
        for i in 0..self.len() {
            let kz = k.matvec(&self.z[i])?;
            s += (0..kz.len())
                .map(|j| (self.z_next[i][j] - kz[j] - self.c[i][j]).powi(2))
                .sum::<f64>();
        }
        Ok(s / self.len() as f64)
    }
}

/// `∇_K λ L_koop = 2λ (K Ĉ_zz + Ĉ_cz − Ĉ_z'z)`.
pub fn koopman_grad_closed_form(k: &Matrix, pairs: &LatentPairs, lambda: f64) -> Result<Matrix> {
    let (czz, cpz, ccz) = pairs.covariances()?;
    let mut g = k.matmul(&czz)?;
    g.add_assign(&ccz)?;
    g.add_scaled(-1.0, &cpz)?;
    Ok(g.scale(2.0 * lambda))
}

/// Stationary point `K* = (Ĉ_z'z − Ĉ_cz) Ĉ_zz⁺`.
pub fn koopman_fixed_point(pairs: &LatentPairs) -> Result<Matrix> {
    let (czz, cpz, ccz) = pairs.covariances()?;
    cpz.sub(&ccz)?.matmul(&pinv(&czz, DEFAULT_RCOND)?)
}

/// Options for one evaluation of [`CompositeLoss`].
#[derive(Debug, Clone, Copy, Default)]
pub struct EvalOptions {
    pub grad: bool,
    /// Include the latent consistency term in `∂/∂K`.
    pub grad_koop_k: bool,
    pub pairs: bool,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub parts: LossParts,
    pub spectral_estimate: f64,
    pub grads: Option<GradSet>,
    pub pairs: Option<LatentPairs>,
}

/// Composite objective over a batch. `dropout_seed == None` evaluates in
/// eval mode; otherwise every window draws its masks from a stream derived
/// from `(seed, index)`.
pub struct CompositeLoss<'a> {
    pub net: &'a Net,
    pub windows: Vec<&'a Window>,
    pub cfg: LossConfig,
    pub dropout_seed: Option<u64>,
}

struct Partial {
    pred: f64,
    koop: f64,
    grads: Option<GradSet>,
    pairs: LatentPairs,
}

impl<'a> CompositeLoss<'a> {
    pub fn new(
        net: &'a Net,
        windows: Vec<&'a Window>,
        cfg: &LossConfig,
        dropout_seed: Option<u64>,
    ) -> Self {
        Self {
            net,
            windows,
            cfg: cfg.effective(net.flags),
            dropout_seed,
        }
    }

    pub fn evaluate(&self, store: &ParamStore, opts: EvalOptions) -> Result<Evaluation> {
        let n = self.windows.len();
        if n == 0 {
            return Err(Error::Contract(
                "composite loss needs at least one window".into(),
            ));
        }
        let pairs_total: usize = self
            .windows
            .iter()
            .map(|w| w.inputs.len().saturating_sub(1))
            .sum();
        let d_pred = 2.0 / n as f64;
        let koop_coef = if pairs_total > 0 {
            self.cfg.lambda / pairs_total as f64
        } else {
            0.0
        };
        let indexed: Vec<(usize, &Window)> = self.windows.iter().copied().enumerate().collect();
        let partials = par::map_chunks(&indexed, CHUNK, |chunk| -> Result<Partial> {
            let mut p = Partial {
                pred: 0.0,
                koop: 0.0,
                grads: opts.grad.then(|| GradSet::zeros_like(store)),
                pairs: LatentPairs::default(),
            };
            for &(i, w) in chunk {
                let mut rng = self
                    .dropout_seed
                    .map(|s| ChaCha8Rng::seed_from_u64(seeds::derive(s, i as u64)));
                let cache = self.net.forward(store, &w.inputs, rng.as_mut())?;
                let out = &cache.out;
                let mut dy = [0.0; 3];
                for j in 0..3 {
                    let e = out.y_hat[j] - w.target[j];
                    p.pred += e * e;
                    dy[j] = d_pred * e;
                }
                p.koop += out.koop_sq;
                if let Some(g) = p.grads.as_mut() {
                    self.net
                        .backward(store, &cache, &dy, koop_coef, opts.grad_koop_k, g);
                }
                if opts.pairs {
                    for t in 0..out.z_ref.len().saturating_sub(1) {
                        p.pairs.z.push(out.z_ref[t].clone());
                        p.pairs.z_next.push(out.z_ref[t + 1].clone());
                        p.pairs.c.push(out.c.clone());
                    }
                }
            }
            Ok(p)
        });
        let mut pred = 0.0;
        let mut koop = 0.0;
        let mut grads: Option<GradSet> = None;
        let mut pairs = LatentPairs::default();
        for p in partials {
            let p = p?;
            pred += p.pred;
            koop += p.koop;
            if let Some(g) = p.grads {
                match grads.as_mut() {
                    Some(acc) => acc.add_assign(&g),
                    None => grads = Some(g),
                }
            }
            pairs.extend(p.pairs);
        }
        let k = store.value(self.net.k);
        let (r_spec, s) =
            spectral_penalty(k, &self.cfg, grads.as_mut().map(|g| g.get_mut(self.net.k)))?;
        let l_koop = if pairs_total > 0 {
            koop / pairs_total as f64
        } else {
            0.0
        };
        let parts = LossParts::new(pred / n as f64, l_koop, r_spec, self.cfg.lambda);
        Ok(Evaluation {
            parts,
            spectral_estimate: s,
            grads,
            pairs: opts.pairs.then_some(pairs),
        })
    }
}

impl Objective for CompositeLoss<'_> {
    fn loss(&self, store: &ParamStore) -> Result<f64> {
        Ok(self.evaluate(store, EvalOptions::default())?.parts.total)
    }

    fn loss_and_grad(&self, store: &ParamStore) -> Result<(f64, GradSet)> {
        let e = self.evaluate(
            store,
            EvalOptions {
                grad: true,
                grad_koop_k: true,
                pairs: false,
            },
        )?;
        Ok((e.parts.total, e.grads.expect("requested")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ArchConfig, NkmModel};
    use crate::numerics::grad::check_gradients;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    pub(crate) fn tiny() -> ArchConfig {
        ArchConfig {
            d_z: 8,
            n_heads: 2,
            mri_hidden: vec![6, 4],
            other_hidden: vec![3, 2],
            n_res_blocks: 2,
            decoder_layers: 2,
            dropout: 0.1,
            ..ArchConfig::desk()
        }
    }

    fn windows(seed: u64, n: usize) -> Vec<Window> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| Window {
                subject: i,
                subject_id: format!("S{i}"),
                visits: vec![0, 1, 2, 3],
                inputs: (0..3)
                    .map(|_| (0..44).map(|_| rng.random_range(-1.5..1.5)).collect())
                    .collect(),
                target: [
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ],
                diagnosis: None,
            })
            .collect()
    }

    #[test]
    fn spectral_penalty_hand_value() {
        let cfg = LossConfig::default();
        let (r, s) = spectral_penalty(&Matrix::identity(5), &cfg, None).unwrap();
        assert_eq!(s, 1.0);
        assert_abs_diff_eq!(r, 9.50625e-5, epsilon = 1e-15);
        let (r, _) = spectral_penalty(&Matrix::identity(5).scale(0.9), &cfg, None).unwrap();
        assert_eq!(r, 0.0);
    }

    #[test]
    fn weights_zero_reduces_to_prediction_loss() {
        let m = NkmModel::new(&tiny(), AblationFlags::default(), 1).unwrap();
        let ws = windows(2, 4);
        let cfg = LossConfig {
            lambda: 0.0,
            eta: 0.0,
            ..Default::default()
        };
        let e = CompositeLoss::new(&m.net, ws.iter().collect(), &cfg, None)
            .evaluate(&m.store, EvalOptions::default())
            .unwrap();
        assert_eq!(e.parts.total, e.parts.l_pred);
        let manual: f64 = ws
            .iter()
            .map(|w| {
                let y = m.predict(&w.inputs).unwrap();
                (0..3).map(|j| (y[j] - w.target[j]).powi(2)).sum::<f64>()
            })
            .sum::<f64>()
            / 4.0;
        assert_abs_diff_eq!(e.parts.l_pred, manual, epsilon = 1e-12);
    }

    #[test]
    fn perfect_model_has_zero_loss() {
        let mut m = NkmModel::new(&tiny(), AblationFlags::default(), 1).unwrap();
        let head_b = m.store.find("dec.head.b").unwrap();
        let k = m.net.k;
        for id in m.store.ids().collect::<Vec<_>>() {
            let name = m.store.param(id).name.clone();
            if name.ends_with(".w") || name.ends_with(".b") {
                m.store.value_mut(id).fill(0.0);
            }
        }
        *m.store.value_mut(k) = Matrix::identity(8).scale(0.5);
        m.store
            .value_mut(head_b)
            .data_mut()
            .copy_from_slice(&[0.2, -0.4, 0.7]);
        let mut ws = windows(3, 3);
        for w in &mut ws {
            w.target = [0.2, -0.4, 0.7];
        }
        let e = CompositeLoss::new(&m.net, ws.iter().collect(), &LossConfig::default(), None)
            .evaluate(&m.store, EvalOptions::default())
            .unwrap();
        assert_eq!(e.parts.total, 0.0);
    }

    #[test]
    fn composite_gradient_matches_finite_differences() {
        for (seed, flags) in [
            (1, AblationFlags::default()),
            (
                2,
                AblationFlags {
                    no_temporal_attention: true,
                    ..Default::default()
                },
            ),
        ] {
            let mut m = NkmModel::new(&tiny(), flags, seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for id in m.store.ids().collect::<Vec<_>>() {
                for v in m.store.value_mut(id).data_mut() {
                    *v += rng.random_range(-0.1..0.1);
                }
            }
            let k = m.net.k;
            let kk = m.store.value(k).scale(1.3);
            *m.store.value_mut(k) = kk;
            let ws = windows(seed + 10, 3);
            let obj =
                CompositeLoss::new(&m.net, ws.iter().collect(), &LossConfig::default(), Some(5));
            assert!(
                obj.evaluate(&m.store, EvalOptions::default())
                    .unwrap()
                    .parts
                    .r_spec
                    > 0.0
            );
            for c in check_gradients(&obj, &m.store, 1e-5, 1e-7).unwrap() {
                assert!(c.rel_error < 1e-4, "{c:?}");
            }
        }
    }

    fn random_pairs(seed: u64, m: usize, d: usize) -> LatentPairs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = || {
            (0..d)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect::<Vec<f64>>()
        };
        let mut p = LatentPairs::default();
        for _ in 0..m {
            p.z.push(v());
            p.z_next.push(v());
            p.c.push(v());
        }
        p
    }

    #[test]
    fn closed_form_matches_finite_differences() {
        let pairs = random_pairs(4, 20, 6);
        let k = crate::model::init_koopman(6, 0.3, 0.99, 2).unwrap();
        let g = koopman_grad_closed_form(&k, &pairs, 0.1).unwrap();
        let h = 1e-5;
        let mut num = Matrix::zeros(6, 6);
        for i in 0..36 {
            let mut kp = k.clone();
            kp.data_mut()[i] += h;
            let mut km = k.clone();
            km.data_mut()[i] -= h;
            num.data_mut()[i] =
                0.1 * (pairs.koop_loss(&kp).unwrap() - pairs.koop_loss(&km).unwrap()) / (2.0 * h);
        }
        let rel = g.sub(&num).unwrap().frobenius_norm() / g.frobenius_norm();
        assert!(rel < 1e-6, "{rel}");
    }

    #[test]
    fn closed_form_vanishes_at_fixed_point() {
        let pairs = random_pairs(5, 30, 6);
        let ks = koopman_fixed_point(&pairs).unwrap();
        assert!(
            koopman_grad_closed_form(&ks, &pairs, 0.1)
                .unwrap()
                .max_abs()
                < 1e-10
        );
        let zero = LatentPairs {
            z: vec![vec![0.0; 3]; 4],
            z_next: vec![vec![0.0; 3]; 4],
            c: vec![vec![0.0; 3]; 4],
        };
        let g = koopman_grad_closed_form(&Matrix::identity(3), &zero, 0.1).unwrap();
        assert_eq!(g, Matrix::zeros(3, 3));
    }

    #[test]
    fn closed_form_equals_backpropagated_consistency_gradient() {
        let m = NkmModel::new(&tiny(), AblationFlags::default(), 7).unwrap();
        let ws = windows(8, 5);
        let obj = CompositeLoss::new(&m.net, ws.iter().collect(), &LossConfig::default(), None);
        let with = obj
            .evaluate(
                &m.store,
                EvalOptions {
                    grad: true,
                    grad_koop_k: true,
                    pairs: true,
                },
            )
            .unwrap();
        let without = obj
            .evaluate(
                &m.store,
                EvalOptions {
                    grad: true,
                    grad_koop_k: false,
                    pairs: false,
                },
            )
            .unwrap();
        let auto = with
            .grads
            .unwrap()
            .get(m.net.k)
            .sub(without.grads.unwrap().get(m.net.k))
            .unwrap();
        let closed = koopman_grad_closed_form(m.koopman(), &with.pairs.unwrap(), 0.1).unwrap();
        assert!(auto.sub(&closed).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn evaluation_is_repeatable_and_rejects_empty_batch() {
        let m = NkmModel::new(&tiny(), AblationFlags::default(), 7).unwrap();
        let ws = windows(8, 40);
        let obj = CompositeLoss::new(&m.net, ws.iter().collect(), &LossConfig::default(), Some(3));
        let a = obj.loss_and_grad(&m.store).unwrap();
        let b = obj.loss_and_grad(&m.store).unwrap();
        assert_eq!(a.0.to_bits(), b.0.to_bits());
        assert_eq!(a.1.flatten(), b.1.flatten());
        let empty = CompositeLoss::new(&m.net, vec![], &LossConfig::default(), None);
        assert!(matches!(empty.loss(&m.store), Err(Error::Contract(_))));
    }
}
