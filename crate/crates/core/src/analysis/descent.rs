use serde::{Deserialize, Serialize};

use crate::dataset::Window;
use crate::error::{Error, Result};
use crate::model::{project_spectral, NkmModel};
use crate::numerics::optim::GradSet;
use crate::training::loss::{koopman_grad_closed_form, CompositeLoss, EvalOptions, LossConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DescentConfig {
    pub iterations: usize,
    /// Initial step for the network parameters.
    pub step: f64,
    /// Initial step for `K`.
    pub k_step: f64,
    pub backtracking: bool,
    pub max_halvings: usize,
    pub slack: f64,
}

impl Default for DescentConfig {
    fn default() -> Self {
        Self {
            iterations: 50,
            step: 0.05,
            k_step: 0.05,
            backtracking: true,
            max_halvings: 40,
            slack: 1e-9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescentReport {
    /// Loss before the first iteration and after each one.
    pub trace: Vec<f64>,
    pub halvings: usize,
    pub pass: bool,
}

/// Shrink `step` by halves until `eval(step)` does not exceed `f0 + slack`.
/// Returns the accepted step and value, or `None` when every trial failed.
pub fn backtrack(
    f0: f64,
    step: f64,
    max_halvings: usize,
    slack: f64,
    mut eval: impl FnMut(f64) -> Result<f64>,
) -> Result<Option<(f64, f64, usize)>> {
    let mut s = step;
    for h in 0..=max_halvings {
        let f = eval(s)?;
        if f.is_finite() && f <= f0 + slack {
            return Ok(Some((s, f, h)));
        }
        s *= 0.5;
    }
    Ok(None)
}

/// Non-increasing within `slack`, and finite throughout.
pub fn is_monotone(trace: &[f64], slack: f64) -> bool {
    trace.iter().all(|v| v.is_finite()) && trace.windows(2).all(|w| w[1] <= w[0] + slack)
}

fn total(model: &NkmModel, windows: &[Window], loss: &LossConfig) -> Result<f64> {
    let obj = CompositeLoss::new(&model.net, windows.iter().collect(), loss, None);
    match obj.evaluate(&model.store, EvalOptions::default()) {
        Ok(e) => Ok(e.parts.total),
        Err(Error::NonFinite(_)) => Ok(f64::INFINITY),
        Err(e) => Err(e),
    }
}

/// Full-batch alternating gradient descent in eval mode: a step on every
/// parameter except `K`, then a projected step on `K` from its closed-form
/// gradient. Each step is halved until the loss does not increase when
/// backtracking is enabled.
pub fn verify_descent(
    model: &mut NkmModel,
    windows: &[Window],
    loss: &LossConfig,
    cfg: &DescentConfig,
) -> Result<DescentReport> {
    loss.validate()?;
    if windows.is_empty() {
        return Err(Error::Contract("verify_descent needs windows".into()));
    }
    let loss = loss.effective(model.flags());
    let kid = model.net.k;
    let mut trace = vec![total(model, windows, &loss)?];
    let mut halvings = 0;
    for _ in 0..cfg.iterations {
        let f0 = *trace.last().expect("non-empty");
        if !f0.is_finite() {
            break;
        }
        let obj = CompositeLoss::new(&model.net, windows.iter().collect(), &loss, None);
        let e = obj.evaluate(
            &model.store,
            EvalOptions {
                grad: true,
                grad_koop_k: true,
                pairs: false,
            },
        )?;
        let mut g: GradSet = e.grads.expect("requested");
        g.get_mut(kid).fill(0.0);
        let base = model.store.flat_values();
        let flat_g = g.flatten();
        let trial = |m: &mut NkmModel, s: f64| -> Result<f64> {
            let moved: Vec<f64> = base.iter().zip(&flat_g).map(|(p, d)| p - s * d).collect();
            m.store.load_flat(&moved)?;
            total(m, windows, &loss)
        };
        let f1 = if !cfg.backtracking {
            trial(model, cfg.step)?
        } else {
            match backtrack(f0, cfg.step, cfg.max_halvings, cfg.slack, |s| {
                trial(model, s)
            })? {
                Some((s, f, h)) => {
                    halvings += h;
                    trial(model, s)?;
                    f
                }
                None => {
                    model.store.load_flat(&base)?;
                    f0
                }
            }
        };
        if !f1.is_finite() {
            trace.push(f1);
            break;
        }

        let obj = CompositeLoss::new(&model.net, windows.iter().collect(), &loss, None);
        let e = obj.evaluate(
            &model.store,
            EvalOptions {
                grad: true,
                grad_koop_k: false,
                pairs: true,
            },
        )?;
        let pairs = e.pairs.expect("requested");
        let mut gk = e.grads.expect("requested").get(kid).clone();
        if !pairs.is_empty() {
            gk.add_assign(&koopman_grad_closed_form(
                model.koopman(),
                &pairs,
                loss.lambda,
            )?)?;
        }
        let k0 = model.koopman().clone();
        let trial_k = |m: &mut NkmModel, s: f64| -> Result<f64> {
            let mut k = k0.clone();
            k.add_scaled(-s, &gk)?;
            *m.koopman_mut() = project_spectral(&k, loss.rho)?;
            total(m, windows, &loss)
        };
        let f2 = if !cfg.backtracking {
            trial_k(model, cfg.k_step)?
        } else {
            match backtrack(f1, cfg.k_step, cfg.max_halvings, cfg.slack, |s| {
                trial_k(model, s)
            })? {
                Some((s, f, h)) => {
                    halvings += h;
                    trial_k(model, s)?;
                    f
                }
                None => {
                    *model.koopman_mut() = k0;
                    f1
                }
            }
        };
        trace.push(f2);
    }
    Ok(DescentReport {
        pass: trace.len() == cfg.iterations + 1 && is_monotone(&trace, cfg.slack),
        trace,
        halvings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::schema::N_FEATURES;
    use crate::model::{AblationFlags, ArchConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn backtracking_on_a_quadratic_decreases_strictly() {
        // f(w) = Σ a_i (w_i − t_i)²
        let a = [1.0, 10.0, 100.0];
        let t = [1.0, -2.0, 0.5];
        let f = |w: &[f64; 3]| (0..3).map(|i| a[i] * (w[i] - t[i]).powi(2)).sum::<f64>();
        let mut w = [0.0; 3];
        let mut trace = vec![f(&w)];
        for _ in 0..50 {
            let g: Vec<f64> = (0..3).map(|i| 2.0 * a[i] * (w[i] - t[i])).collect();
            let f0 = f(&w);
            let (s, v, _) = backtrack(f0, 1.0, 40, 0.0, |s| {
                let x = [w[0] - s * g[0], w[1] - s * g[1], w[2] - s * g[2]];
                Ok(f(&x))
            })
            .unwrap()
            .unwrap();
            for i in 0..3 {
                w[i] -= s * g[i];
            }
            assert!(v < f0);
            trace.push(v);
        }
        assert!(trace.windows(2).all(|p| p[1] < p[0]));
        assert!(*trace.last().unwrap() < 0.5 * trace[0]);
    }

    #[test]
    fn monotone_predicate() {
        assert!(is_monotone(&[3.0, 2.0, 2.0 + 1e-10], 1e-9));
        assert!(!is_monotone(&[3.0, 2.0, 2.1], 1e-9));
        assert!(!is_monotone(&[3.0, f64::NAN], 1e-9));
    }

    fn windows(n: usize, seed: u64) -> Vec<Window> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| Window {
                subject: i,
                subject_id: format!("S{i}"),
                visits: vec![0, 1, 2, 3],
                inputs: (0..3)
                    .map(|_| {
                        (0..N_FEATURES)
                            .map(|_| rng.random_range(-1.0..1.0))
                            .collect()
                    })
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

    fn small() -> ArchConfig {
        ArchConfig {
            d_z: 8,
            n_heads: 2,
            mri_hidden: vec![8],
            other_hidden: vec![4],
            n_res_blocks: 1,
            decoder_layers: 2,
            ..ArchConfig::desk()
        }
    }

    #[test]
    fn small_model_descends() {
        let ws = windows(8, 1);
        let mut m = NkmModel::new(&small(), AblationFlags::default(), 3).unwrap();
        let cfg = DescentConfig {
            iterations: 10,
            ..Default::default()
        };
        let r = verify_descent(&mut m, &ws, &LossConfig::default(), &cfg).unwrap();
        assert!(r.pass, "{:?}", r.trace);
        assert!(r.trace.last().unwrap() < &r.trace[0]);
    }

    #[test]
    fn huge_step_without_backtracking_fails() {
        let ws = windows(8, 1);
        let mut m = NkmModel::new(&small(), AblationFlags::default(), 3).unwrap();
        let cfg = DescentConfig {
            iterations: 10,
            step: 1e3,
            k_step: 1e3,
            backtracking: false,
            ..Default::default()
        };
        assert!(
            !verify_descent(&mut m, &ws, &LossConfig::default(), &cfg)
                .unwrap()
                .pass
        );
    }
}
