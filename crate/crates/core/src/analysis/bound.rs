use serde::{Deserialize, Serialize};

use crate::edmd::EdmdModel;
use crate::error::{Error, Result};
use crate::model::NkmModel;
use crate::numerics::linalg::{power_iteration_norm, spectral_norm, spectral_radius};
use crate::numerics::Matrix;

/// Per-coordinate accuracy `ε` scaled to the Euclidean norm in `d_z`
/// dimensions.
pub fn eps_tilde(eps: f64, d_z: usize) -> f64 {
    eps * (d_z as f64).sqrt()
}

fn check_norm(q: f64) -> Result<()> {
    if !(0.0..1.0).contains(&q) {
        return Err(Error::Domain(format!("bound requires ‖K‖₂ < 1 (got {q})")));
    }
    Ok(())
}

/// `ε̃ (1 − q^τ) / (1 − q)`.
pub fn geometric_bound(eps_tilde: f64, q: f64, tau: usize) -> Result<f64> {
    check_norm(q)?;
    if tau == 0 {
        return Err(Error::Domain("bound requires τ ≥ 1".into()));
    }
    if q == 0.0 {
        return Ok(eps_tilde);
    }
    Ok(eps_tilde * (1.0 - q.powi(tau as i32)) / (1.0 - q))
}

/// `ε̃ / (1 − q)`.
pub fn asymptotic_limit(eps_tilde: f64, q: f64) -> Result<f64> {
    check_norm(q)?;
    Ok(eps_tilde / (1.0 - q))
}

/// A lifted trajectory `Φ(x_0), Φ(x_1), …` with a constant additive
/// control along it (empty for none).
#[derive(Debug, Clone, PartialEq)]
pub struct LiftedSequence {
    pub states: Vec<Vec<f64>>,
    pub control: Vec<f64>,
}

fn advance(k: &Matrix, z: &[f64], c: &[f64]) -> Result<Vec<f64>> {
    let mut out = k.matvec(z)?;
    for (o, ci) in out.iter_mut().zip(c) {
        *o += ci;
    }
    Ok(out)
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Largest one-step residual `‖Φ_{t+1} − K Φ_t − c‖₂` over all pairs.
pub fn measure_eps(k: &Matrix, sequences: &[LiftedSequence]) -> Result<f64> {
    let mut eps: f64 = 0.0;
    let mut pairs = 0usize;
    for s in sequences {
        for t in 1..s.states.len() {
            let pred = advance(k, &s.states[t - 1], &s.control)?;
            eps = eps.max(dist(&s.states[t], &pred));
            pairs += 1;
        }
    }
    if pairs == 0 {
        return Err(Error::Contract(
            "measure_eps needs at least one consecutive pair".into(),
        ));
    }
    Ok(eps)
}

/// Models whose dynamics are linear in a lifted space.
pub trait LiftedDynamics {
    fn koopman_matrix(&self) -> Result<&Matrix>;

    /// Lift one visit sequence (preprocessed feature rows).
    fn lift_sequence(&self, visits: &[Vec<f64>]) -> Result<LiftedSequence>;
}

impl LiftedDynamics for NkmModel {
    fn koopman_matrix(&self) -> Result<&Matrix> {
        Ok(self.koopman())
    }

    /// Refined latents of every visit; the control is computed once from
    /// the leading window and held fixed.
    fn lift_sequence(&self, visits: &[Vec<f64>]) -> Result<LiftedSequence> {
        let states = visits
            .iter()
            .map(|x| {
                Ok(self
                    .net
                    .refine(&self.store, &self.net.encode(&self.store, x)?.0))
            })
            .collect::<Result<Vec<_>>>()?;
        let w = self.config().window.min(visits.len());
        let control = if w == 0 {
            Vec::new()
        } else {
            self.forward(&visits[..w])?.c
        };
        Ok(LiftedSequence { states, control })
    }
}

impl LiftedDynamics for EdmdModel {
    fn koopman_matrix(&self) -> Result<&Matrix> {
        self.koopman()
    }

    fn lift_sequence(&self, visits: &[Vec<f64>]) -> Result<LiftedSequence> {
        Ok(LiftedSequence {
            states: visits.iter().map(|x| self.lift(x)).collect::<Result<_>>()?,
            control: Vec::new(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TauCheck {
    pub tau: usize,
    /// Largest `‖Φ_{t+τ} − ẑ_{t+τ}‖₂` over all start points.
    pub empirical: f64,
    pub bound: f64,
    pub n_starts: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub eps_tilde: f64,
    /// Power-iteration estimate (50 iterations).
    pub norm_k: f64,
    /// Dense-SVD norm, used in the bound.
    pub norm_k_svd: f64,
    pub spectral_radius: f64,
    pub per_tau: Vec<TauCheck>,
    pub limit: f64,
    pub pass: bool,
}

/// Roll every start point of every sequence forward up to `tau_max` steps
/// and compare the worst error with the geometric bound built from the
/// measured one-step residual.
pub fn verify_lifted(
    k: &Matrix,
    sequences: &[LiftedSequence],
    tau_max: usize,
) -> Result<BoundReport> {
    if tau_max == 0 {
        return Err(Error::Domain("τ_max must be ≥ 1".into()));
    }
    let q = spectral_norm(k)?;
    check_norm(q)?;
    let eps = measure_eps(k, sequences)?;
    let mut worst = vec![0.0f64; tau_max];
    let mut starts = vec![0usize; tau_max];
    for s in sequences {
        for t0 in 0..s.states.len() {
            let mut z = s.states[t0].clone();
            for tau in 1..=tau_max.min(s.states.len() - 1 - t0) {
                z = advance(k, &z, &s.control)?;
                worst[tau - 1] = worst[tau - 1].max(dist(&s.states[t0 + tau], &z));
                starts[tau - 1] += 1;
            }
        }
    }
    let mut per_tau = Vec::with_capacity(tau_max);
    let mut pass = true;
    for tau in 1..=tau_max {
        let bound = geometric_bound(eps, q, tau)?;
        let empirical = worst[tau - 1];
        // Round-off slack of a few ulps on the bound.
        pass &= empirical <= bound * (1.0 + 1e-12) + 1e-15;
        per_tau.push(TauCheck {
            tau,
            empirical,
            bound,
            n_starts: starts[tau - 1],
        });
    }
    Ok(BoundReport {
        eps_tilde: eps,
        norm_k: power_iteration_norm(k, 50)?,
        norm_k_svd: q,
        spectral_radius: spectral_radius(k)?,
        per_tau,
        limit: asymptotic_limit(eps, q)?,
        pass,
    })
}

pub fn verify_bound<D: LiftedDynamics + ?Sized>(
    dynamics: &D,
    sequences: &[Vec<Vec<f64>>],
    tau_max: usize,
) -> Result<BoundReport> {
    let k = dynamics.koopman_matrix()?;
    check_norm(spectral_norm(k)?)?;
    let lifted = sequences
        .iter()
        .map(|s| dynamics.lift_sequence(s))
        .collect::<Result<Vec<_>>>()?;
    verify_lifted(k, &lifted, tau_max)
}
