//! Synthetic cohorts with known linear latent dynamics and per-subject
//! drift.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::record::{LongitudinalDataset, Subject, Visit};
use super::schema::{one_hot_ranges, Modality, N_FEATURES, N_TARGETS, ONE_HOT_START};
use crate::error::{Error, Result};
use crate::numerics::linalg::{pinv, spectral_norm, DEFAULT_RCOND};
use crate::numerics::Matrix;

/// Bound on the spectral norm of the planted transition matrix.
pub const A_NORM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Observation {
    /// Each biomarker column is `tanh(m·z + d)` plus noise.
    Tanh,
    /// The first `latent_dim` columns carry `z` itself; the rest are zero.
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_subjects: usize,
    pub visits_per_subject: usize,
    pub latent_dim: usize,
    pub noise_sd: f64,
    pub missing_rate: f64,
    /// Standard deviation of the subject-specific drift around the common
    /// drift.
    pub drift_sd: f64,
    /// Scale of the initial latent state.
    pub init_sd: f64,
    /// Gain of the observation map inside the tanh.
    pub obs_gain: f64,
    /// Gain of the linear target readout `C`.
    pub readout_gain: f64,
    pub observation: Observation,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_subjects: 200,
            visits_per_subject: 8,
            latent_dim: 4,
            noise_sd: 0.1,
            missing_rate: 0.05,
            drift_sd: 0.5,
            init_sd: 1.0,
            obs_gain: 0.6,
            readout_gain: 2.0,
            observation: Observation::Tanh,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim < 2 {
            return Err(Error::Config("latent_dim must be ≥ 2".into()));
        }
        if self.observation == Observation::Identity && self.latent_dim > ONE_HOT_START {
            return Err(Error::Config(format!(
                "identity observation supports latent_dim ≤ {ONE_HOT_START}"
            )));
        }
        if !(0.0..1.0).contains(&self.missing_rate) {
            return Err(Error::Config("missing_rate must lie in [0, 1)".into()));
        }
        if self.noise_sd < 0.0 || self.drift_sd < 0.0 || self.init_sd < 0.0 {
            return Err(Error::Config(
                "noise_sd, drift_sd and init_sd must be ≥ 0".into(),
            ));
        }
        if self.n_subjects == 0 || self.visits_per_subject == 0 {
            return Err(Error::Config(
                "n_subjects and visits_per_subject must be ≥ 1".into(),
            ));
        }
        Ok(())
    }
}

/// Ground truth written next to a synthetic cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthTruth {
    pub seed: u64,
    pub config: SynthConfig,
    #[serde(rename = "A")]
    pub a: Matrix,
    #[serde(rename = "C")]
    pub c: Matrix,
    pub b_common: Vec<f64>,
    /// Per-subject drift `b_s`, in subject order.
    pub drifts: Vec<Vec<f64>>,
    /// Latent trajectories `z_t` per subject.
    pub latents: Vec<Vec<Vec<f64>>>,
}

impl SynthTruth {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::file(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn std_normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, sd: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| sd * std_normal(rng))
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize, sd: f64) -> Vec<f64> {
    (0..n).map(|_| sd * std_normal(rng)).collect()
}

/// Generate a cohort following `z_{t+1} = A z_t + b_s`, `y_t = C z_t + noise`.
pub fn generate_synthetic(
    cfg: &SynthConfig,
    seed: u64,
) -> Result<(LongitudinalDataset, SynthTruth)> {
    cfg.validate()?;
    let d = cfg.latent_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let raw = gaussian_matrix(&mut rng, d, d, 1.0);
    let sigma = spectral_norm(&raw)?;
    let a = raw.scale(A_NORM / sigma);
    let c = gaussian_matrix(&mut rng, N_TARGETS, d, cfg.readout_gain / (d as f64).sqrt());
    let b_common = gaussian_vec(&mut rng, d, 0.1);
    let obs_map = gaussian_matrix(&mut rng, ONE_HOT_START, d, cfg.obs_gain / (d as f64).sqrt());
    let obs_bias = gaussian_vec(&mut rng, ONE_HOT_START, 0.3);
    let noise =
        Normal::new(0.0, cfg.noise_sd.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;

    let steady = pinv(&Matrix::identity(d).sub(&a)?, DEFAULT_RCOND)?;
    let mut subjects = Vec::with_capacity(cfg.n_subjects);
    let mut drifts = Vec::with_capacity(cfg.n_subjects);
    let mut latents = Vec::with_capacity(cfg.n_subjects);
    let mut severity = Vec::with_capacity(cfg.n_subjects);

    for s in 0..cfg.n_subjects {
        let b: Vec<f64> = b_common
            .iter()
            .map(|&bc| bc + cfg.drift_sd * std_normal(&mut rng))
            .collect();
        let mut z = gaussian_vec(&mut rng, d, cfg.init_sd);
        let age0 = std_normal(&mut rng);
        let educ = std_normal(&mut rng);
        let levels: Vec<usize> = one_hot_ranges()
            .iter()
            .map(|r| rng.random_range(0..r.len()))
            .collect();

        let mut visits = Vec::with_capacity(cfg.visits_per_subject);
        let mut traj = Vec::with_capacity(cfg.visits_per_subject);
        for t in 0..cfg.visits_per_subject {
            let mut features = vec![0.0; N_FEATURES];
            match cfg.observation {
                Observation::Tanh => {
                    for (j, f) in features.iter_mut().enumerate().take(ONE_HOT_START) {
                        if Modality::Demographics.range().contains(&j) {
                            continue;
                        }
                        let pre: f64 = obs_map
                            .row(j)
                            .iter()
                            .zip(&z)
                            .map(|(m, x)| m * x)
                            .sum::<f64>()
                            + obs_bias[j];
                        *f = pre.tanh() + noise.sample(&mut rng);
                    }
                    let demo = Modality::Demographics.range().start;
                    features[demo] = age0 + 0.1 * t as f64 + noise.sample(&mut rng);
                    features[demo + 1] = educ;
                    for (r, &l) in one_hot_ranges().iter().zip(&levels) {
                        features[r.start + l] = 1.0;
                    }
                }
                Observation::Identity => {
                    for (f, &x) in features.iter_mut().zip(&z) {
                        *f = x + noise.sample(&mut rng);
                    }
                }
            }
            if cfg.missing_rate > 0.0 {
                for f in features.iter_mut() {
                    if rng.random::<f64>() < cfg.missing_rate {
                        *f = f64::NAN;
                    }
                }
                if features.iter().all(|f| f.is_nan()) {
                    features[0] = 0.0;
                }
            }
            let mut targets = [0.0; N_TARGETS];
            for (k, y) in targets.iter_mut().enumerate() {
                *y = c.row(k).iter().zip(&z).map(|(ci, x)| ci * x).sum::<f64>()
                    + noise.sample(&mut rng);
            }
            visits.push(Visit {
                visit: t as u32,
                features,
                targets,
                diagnosis: None,
            });
            traj.push(z.clone());
            let mut next = a.matvec(&z)?;
            for (n, bi) in next.iter_mut().zip(&b) {
                *n += bi;
            }
            z = next;
        }
        // Severity: steady-state value of the first target.
        let z_inf = steady.matvec(&b)?;
        severity.push(
            c.row(0)
                .iter()
                .zip(&z_inf)
                .map(|(ci, x)| ci * x)
                .sum::<f64>(),
        );
        subjects.push(Subject {
            id: format!("S{s:04}"),
            visits,
        });
        drifts.push(b);
        latents.push(traj);
    }

    let mut order: Vec<usize> = (0..severity.len()).collect();
    order.sort_by(|&i, &j| severity[i].total_cmp(&severity[j]));
    let n = order.len();
    for (rank, &i) in order.iter().enumerate() {
        let label = ["CN", "MCI", "AD"][(3 * rank / n).min(2)];
        for v in &mut subjects[i].visits {
            v.diagnosis = Some(label.to_string());
        }
    }

    let truth = SynthTruth {
        seed,
        config: cfg.clone(),
        a,
        c,
        b_common,
        drifts,
        latents,
    };
    Ok((LongitudinalDataset { subjects }, truth))
}

/// Write `data.csv` and `truth.json` into `dir`.
pub fn write_synthetic(
    dir: impl AsRef<Path>,
    ds: &LongitudinalDataset,
    truth: &SynthTruth,
) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    ds.save_csv(dir.join("data.csv"))?;
    truth.save(dir.join("truth.json"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            n_subjects: 12,
            visits_per_subject: 5,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn planted_norm_is_bounded() {
        for seed in 0..20 {
            let (_, truth) = generate_synthetic(&small(), seed).unwrap();
            assert!(spectral_norm(&truth.a).unwrap() <= A_NORM + 1e-12);
        }
    }

    #[test]
    fn same_seed_same_csv() {
        let render = |seed| {
            let (ds, _) = generate_synthetic(&small(), seed).unwrap();
            let mut buf = Vec::new();
            ds.write_csv(&mut buf).unwrap();
            buf
        };
        assert_eq!(render(5), render(5));
        assert_ne!(render(5), render(6));
    }

    #[test]
    fn latents_follow_planted_dynamics() {
        let cfg = SynthConfig {
            noise_sd: 0.0,
            missing_rate: 0.0,
            observation: Observation::Identity,
            ..small()
        };
        let (ds, truth) = generate_synthetic(&cfg, 3).unwrap();
        for (s, traj) in truth.latents.iter().enumerate() {
            for t in 0..traj.len() - 1 {
                let pred = truth.a.matvec(&traj[t]).unwrap();
                for i in 0..cfg.latent_dim {
                    let next = pred[i] + truth.drifts[s][i];
                    assert!((next - traj[t + 1][i]).abs() < 1e-12);
                }
            }
            let v = &ds.subjects[s].visits[0];
            assert_eq!(&v.features[..cfg.latent_dim], &traj[0][..]);
            assert!(v.features[cfg.latent_dim..].iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn missing_rate_masks_cells_and_one_hot_is_valid() {
        let cfg = SynthConfig {
            missing_rate: 0.2,
            ..small()
        };
        let (ds, _) = generate_synthetic(&cfg, 1).unwrap();
        let total = ds.n_visits() * N_FEATURES;
        let missing: usize = ds
            .subjects
            .iter()
            .flat_map(|s| &s.visits)
            .map(|v| v.missing_mask().iter().filter(|&&m| m).count())
            .sum();
        let rate = missing as f64 / total as f64;
        assert!((rate - 0.2).abs() < 0.05, "{rate}");
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        assert_eq!(LongitudinalDataset::read_csv(buf.as_slice()).unwrap(), ds);
    }

    #[test]
    fn truth_round_trips_through_json() {
        let (_, truth) = generate_synthetic(&small(), 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("truth.json");
        truth.save(&path).unwrap();
        assert_eq!(SynthTruth::load(&path).unwrap(), truth);
    }

    #[test]
    fn tiny_latent_dim_is_rejected() {
        let cfg = SynthConfig {
            latent_dim: 1,
            ..small()
        };
        assert!(generate_synthetic(&cfg, 0).is_err());
    }
}
