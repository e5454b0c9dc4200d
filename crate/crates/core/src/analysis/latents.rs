use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataset::Window;
use crate::error::{Error, Result};
use crate::model::NkmModel;
use crate::numerics::linalg::symmetric_eigen;
use crate::numerics::Matrix;

/// `z, K z + c, K(K z + c) + c, …` for `steps` steps.
pub fn rollout_latent(k: &Matrix, z0: &[f64], c: &[f64], steps: usize) -> Result<Vec<Vec<f64>>> {
    let mut out = vec![z0.to_vec()];
    let mut z = z0.to_vec();
    for _ in 0..steps {
        z = k.matvec(&z)?;
        for (zi, ci) in z.iter_mut().zip(c) {
            *zi += ci;
        }
        out.push(z.clone());
    }
    Ok(out)
}

/// Two-component principal axes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// `d × 2`, orthonormal columns.
    pub components: Matrix,
    /// Variance along each component.
    pub explained: [f64; 2],
}

impl Pca {
    pub fn fit(points: &[Vec<f64>]) -> Result<Self> {
        let d = points
            .first()
            .map(Vec::len)
            .ok_or_else(|| Error::Contract("PCA needs points".into()))?;
        if d < 2 {
            return Err(Error::Contract("PCA needs at least two dimensions".into()));
        }
        let n = points.len() as f64;
        let mut mean = vec![0.0; d];
        for p in points {
            for (m, v) in mean.iter_mut().zip(p) {
                *m += v / n;
            }
        }
        let mut cov = Matrix::zeros(d, d);
        for p in points {
            let x: Vec<f64> = p.iter().zip(&mean).map(|(a, b)| a - b).collect();
            crate::numerics::matrix::outer_acc(&mut cov, 1.0, &x, &x);
        }
        cov.scale_mut(1.0 / n);
        let (vals, vecs) = symmetric_eigen(&cov)?;
        let mut components = Matrix::zeros(d, 2);
        for j in 0..2 {
            let col = vecs.col(j);
            // Deterministic sign: the largest-magnitude entry is positive.
            let pivot = col
                .iter()
                .copied()
                .fold(0.0f64, |a, v| if v.abs() > a.abs() { v } else { a });
            let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
            for (i, v) in col.iter().enumerate() {
                components.set(i, j, sign * v);
            }
        }
        Ok(Self {
            mean,
            components,
            explained: [vals[0], vals[1]],
        })
    }

    pub fn project(&self, z: &[f64]) -> [f64; 2] {
        let x: Vec<f64> = z.iter().zip(&self.mean).map(|(a, b)| a - b).collect();
        let p = self
            .components
            .matvec_t(&x)
            .expect("dimension checked at fit");
        [p[0], p[1]]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentRow {
    pub subject_id: String,
    pub window_index: usize,
    pub step: usize,
    pub pc1: f64,
    pub pc2: f64,
    pub diagnosis: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentTable {
    pub pca: Pca,
    pub rows: Vec<LatentRow>,
}

impl LatentTable {
    pub fn to_csv(&self) -> Result<String> {
        let mut s = String::from("subject_id,window_index,step,pc1,pc2,diagnosis\n");
        for r in &self.rows {
            writeln!(
                s,
                "{},{},{},{:.10},{:.10},{}",
                r.subject_id,
                r.window_index,
                r.step,
                r.pc1,
                r.pc2,
                r.diagnosis.as_deref().unwrap_or("")
            )
            .map_err(|e| Error::Contract(e.to_string()))?;
        }
        Ok(s)
    }
}

/// Refined latent of the last visit and its `steps`-step rollout under
/// the window's own control.
pub fn window_trajectory(model: &NkmModel, w: &Window, steps: usize) -> Result<Vec<Vec<f64>>> {
    let out = model.forward(&w.inputs)?;
    let z = out.z_ref.last().expect("non-empty window");
    rollout_latent(model.koopman(), z, &out.c, steps)
}

/// Latent trajectories of `windows` in the PCA plane of the refined
/// training latents. Windows are numbered within their subject.
pub fn export_latents(
    model: &NkmModel,
    train: &[Window],
    windows: &[Window],
    steps: usize,
) -> Result<LatentTable> {
    let mut fit_points = Vec::new();
    for w in train {
        fit_points.extend(model.forward(&w.inputs)?.z_ref);
    }
    let pca = Pca::fit(&fit_points)?;
    let trajectories = crate::par::map(windows, |w| window_trajectory(model, w, steps))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(windows.len() * (steps + 1));
    let mut counter: Option<(&str, usize)> = None;
    for (w, traj) in windows.iter().zip(trajectories) {
        let idx = match counter {
            Some((id, i)) if id == w.subject_id => i + 1,
            _ => 0,
        };
        counter = Some((&w.subject_id, idx));
        for (step, z) in traj.iter().enumerate() {
            let [pc1, pc2] = pca.project(z);
            rows.push(LatentRow {
                subject_id: w.subject_id.clone(),
                window_index: idx,
                step,
                pc1,
                pc2,
                diagnosis: w.diagnosis.clone(),
            });
        }
    }
    Ok(LatentTable { pca, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::schema::N_FEATURES;
    use crate::model::{AblationFlags, ArchConfig};
    use crate::numerics::matrix::norm2;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn halving_rollout() {
        let k = Matrix::identity(3).scale(0.5);
        let traj = rollout_latent(&k, &[4.0, -2.0, 1.0], &[0.0; 3], 5).unwrap();
        for t in 1..traj.len() {
            assert_abs_diff_eq!(norm2(&traj[t]), norm2(&traj[t - 1]) / 2.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn pca_columns_are_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts: Vec<Vec<f64>> = (0..50)
            .map(|_| {
                let a: f64 = rng.random_range(-3.0..3.0);
                vec![
                    a,
                    0.5 * a + rng.random_range(-0.1..0.1),
                    rng.random_range(-1.0..1.0),
                    0.0,
                ]
            })
            .collect();
        let p = Pca::fit(&pts).unwrap();
        let g = p.components.transpose().matmul(&p.components).unwrap();
        assert!(g.sub(&Matrix::identity(2)).unwrap().max_abs() < 1e-10);
        assert!(p.explained[0] >= p.explained[1]);
    }

    #[test]
    fn export_counts_rows_and_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ws: Vec<Window> = (0..6)
            .map(|i| Window {
                subject: i / 2,
                subject_id: format!("S{}", i / 2),
                visits: vec![0, 1, 2, 3],
                inputs: (0..3)
                    .map(|_| {
                        (0..N_FEATURES)
                            .map(|_| rng.random_range(-1.0..1.0))
                            .collect()
                    })
                    .collect(),
                target: [0.0; 3],
                diagnosis: Some("CN".into()),
            })
            .collect();
        let m = NkmModel::new(&ArchConfig::desk(), AblationFlags::default(), 5).unwrap();
        let t = export_latents(&m, &ws, &ws, 5).unwrap();
        assert_eq!(t.rows.len(), ws.len() * 6);
        assert_eq!(t.rows[6].window_index, 1);
        assert_eq!(t.rows[12].window_index, 0);
        assert_eq!(t, export_latents(&m, &ws, &ws, 5).unwrap());
        assert!(t
            .to_csv()
            .unwrap()
            .starts_with("subject_id,window_index,step,pc1,pc2,diagnosis\n"));
    }
}
