//! Extended dynamic mode decomposition with a radial-basis dictionary, and a
//! ridge linear-regression baseline.

use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::schema::N_TARGETS;
use crate::dataset::Window;
use crate::error::{Error, Result};
use crate::model::checkpoint::{read_manifest, read_params, write_store};
use crate::numerics::linalg::{pinv, solve_spd, DEFAULT_RCOND};
use crate::numerics::matrix::{dot, outer_acc};
use crate::numerics::optim::ParamStore;
use crate::numerics::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EdmdConfig {
    pub n_centers: usize,
    /// Kernel width; `None` selects the median pairwise distance of the
    /// centers.
    pub bandwidth: Option<f64>,
    pub include_identity: bool,
    pub include_constant: bool,
    /// Tikhonov weight of the Koopman solve; 0 uses the pseudoinverse.
    pub alpha: f64,
    /// Ridge weight of the target readout.
    pub readout_alpha: f64,
}

impl Default for EdmdConfig {
    fn default() -> Self {
        Self {
            n_centers: 100,
            bandwidth: None,
            include_identity: true,
            include_constant: true,
            alpha: 1e-6,
            readout_alpha: 1e-3,
        }
    }
}

impl EdmdConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(h) = self.bandwidth {
            if !(h > 0.0) {
                return Err(Error::Config("bandwidth must be > 0".into()));
            }
        }
        if self.alpha < 0.0 || self.readout_alpha < 0.0 {
            return Err(Error::Config("alpha and readout_alpha must be ≥ 0".into()));
        }
        Ok(())
    }
}

/// Observables `[exp(−‖x − c_i‖²/(2h²))…, x…, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RbfDictionary {
    pub centers: Vec<Vec<f64>>,
    pub bandwidth: f64,
    pub include_identity: bool,
    pub include_constant: bool,
    pub input_dim: usize,
}

impl RbfDictionary {
    /// Centers drawn without replacement from `rows`.
    pub fn fit(rows: &[Vec<f64>], cfg: &EdmdConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let input_dim = rows
            .first()
            .map(Vec::len)
            .ok_or_else(|| Error::Contract("no rows to fit the dictionary".into()))?;
        let n_c = cfg.n_centers.min(rows.len());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = sample(&mut rng, rows.len(), n_c).into_vec();
        idx.sort_unstable();
        let centers: Vec<Vec<f64>> = idx.iter().map(|&i| rows[i].clone()).collect();
        let bandwidth = match cfg.bandwidth {
            Some(h) => h,
            None => median_distance(&centers)
                .filter(|&m| m > 0.0)
                .unwrap_or(1.0),
        };
        Ok(Self {
            centers,
            bandwidth,
            include_identity: cfg.include_identity,
            include_constant: cfg.include_constant,
            input_dim,
        })
    }

    pub fn lifted_dim(&self) -> usize {
        self.centers.len()
            + if self.include_identity {
                self.input_dim
            } else {
                0
            }
            + usize::from(self.include_constant)
    }

    /// Position of the raw coordinates inside a lifted vector.
    pub fn identity_range(&self) -> Option<std::ops::Range<usize>> {
        self.include_identity
            .then(|| self.centers.len()..self.centers.len() + self.input_dim)
    }

    pub fn lift(&self, x: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.lifted_dim());
        let s = 2.0 * self.bandwidth * self.bandwidth;
        for c in &self.centers {
            let d2: f64 = x.iter().zip(c).map(|(a, b)| (a - b).powi(2)).sum();
            out.push((-d2 / s).exp());
        }
        if self.include_identity {
            out.extend_from_slice(x);
        }
        if self.include_constant {
            out.push(1.0);
        }
        out
    }
}

fn median_distance(points: &[Vec<f64>]) -> Option<f64> {
    let mut d = Vec::new();
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            d.push(
                points[i]
                    .iter()
                    .zip(&points[j])
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt(),
            );
        }
    }
    if d.is_empty() {
        return None;
    }
    d.sort_by(f64::total_cmp);
    Some(d[d.len() / 2])
}

/// Gramians `G = XᵀX/m` and `A = YᵀX/m` of row-stacked snapshots.
pub fn gramians(x: &Matrix, y: &Matrix) -> Result<(Matrix, Matrix)> {
    if x.rows() != y.rows() || x.cols() != y.cols() || x.rows() == 0 {
        return Err(Error::Dimension {
            op: "gramians",
            left: x.shape(),
            right: y.shape(),
        });
    }
    let m = x.rows() as f64;
    let n = x.cols();
    let mut g = Matrix::zeros(n, n);
    let mut a = Matrix::zeros(n, n);
    for r in 0..x.rows() {
        outer_acc(&mut g, 1.0, x.row(r), x.row(r));
        outer_acc(&mut a, 1.0, y.row(r), x.row(r));
    }
    g.scale_mut(1.0 / m);
    a.scale_mut(1.0 / m);
    Ok((g, a))
}

/// `K = A G⁺` when `alpha == 0`, else `K = A (G + αI)⁻¹`.
pub fn fit_edmd(x: &Matrix, y: &Matrix, alpha: f64) -> Result<Matrix> {
    let (g, a) = gramians(x, y)?;
    if alpha == 0.0 {
        a.matmul(&pinv(&g, DEFAULT_RCOND)?)
    } else {
        let mut reg = g;
        for i in 0..reg.rows() {
            reg.set(i, i, reg.get(i, i) + alpha);
        }
        Ok(solve_spd(&reg, &a.transpose())?.transpose())
    }
}

/// Ridge regression `W = argmin ‖[F 1] W − T‖² + α‖W‖²` returned as
/// `targets × (features + 1)`, bias last.
pub fn ridge(features: &[Vec<f64>], targets: &[[f64; N_TARGETS]], alpha: f64) -> Result<Matrix> {
    let n = features
        .first()
        .map(|f| f.len() + 1)
        .ok_or_else(|| Error::Contract("ridge needs at least one row".into()))?;
    let mut gram = Matrix::zeros(n, n);
    let mut rhs = Matrix::zeros(n, N_TARGETS);
    let mut row = vec![0.0; n];
    for (f, t) in features.iter().zip(targets) {
        row[..n - 1].copy_from_slice(f);
        row[n - 1] = 1.0;
        outer_acc(&mut gram, 1.0, &row, &row);
        for (i, &ri) in row.iter().enumerate() {
            for (j, &tj) in t.iter().enumerate() {
                rhs.set(i, j, rhs.get(i, j) + ri * tj);
            }
        }
    }
    let scale = features.len() as f64;
    for i in 0..n {
        gram.set(i, i, gram.get(i, i) + alpha * scale.max(1.0) + 1e-12);
    }
    Ok(solve_spd(&gram, &rhs)?.transpose())
}

fn apply_readout(w: &Matrix, f: &[f64]) -> [f64; N_TARGETS] {
    let mut y = [0.0; N_TARGETS];
    let n = f.len();
    for (j, out) in y.iter_mut().enumerate() {
        *out = dot(&w.row(j)[..n], f) + w.get(j, n);
    }
    y
}

#[derive(Debug, Clone, PartialEq)]
struct Fitted {
    dict: RbfDictionary,
    k: Matrix,
    readout: Matrix,
}

/// EDMD forecaster: lift the last visit, advance with `K`, read out.
#[derive(Debug, Clone, PartialEq)]
pub struct EdmdModel {
    pub config: EdmdConfig,
    pub seed: u64,
    fitted: Option<Fitted>,
}

impl EdmdModel {
    pub fn new(config: EdmdConfig, seed: u64) -> Self {
        Self {
            config,
            seed,
            fitted: None,
        }
    }

    fn state(&self) -> Result<&Fitted> {
        self.fitted
            .as_ref()
            .ok_or_else(|| Error::State("EDMD model is not fitted".into()))
    }

    pub fn is_fitted(&self) -> bool {
        self.fitted.is_some()
    }

    pub fn koopman(&self) -> Result<&Matrix> {
        Ok(&self.state()?.k)
    }

    pub fn dictionary(&self) -> Result<&RbfDictionary> {
        Ok(&self.state()?.dict)
    }

    pub fn lift(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.state()?.dict.lift(x))
    }

    /// Fit on preprocessed windows: dynamics from in-window consecutive
    /// visit pairs, readout from the advanced last visit to the target.
    pub fn fit(&mut self, windows: &[Window]) -> Result<()> {
        let rows: Vec<Vec<f64>> = windows
            .iter()
            .flat_map(|w| w.inputs.iter().cloned())
            .collect();
        let dict = RbfDictionary::fit(&rows, &self.config, self.seed)?;
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for w in windows {
            let lifted: Vec<Vec<f64>> = w.inputs.iter().map(|x| dict.lift(x)).collect();
            for t in 1..lifted.len() {
                xs.push(lifted[t - 1].clone());
                ys.push(lifted[t].clone());
            }
        }
        if xs.is_empty() {
            return Err(Error::Contract(
                "EDMD needs windows with at least two visits".into(),
            ));
        }
        let k = fit_edmd(
            &Matrix::from_rows(&xs)?,
            &Matrix::from_rows(&ys)?,
            self.config.alpha,
        )?;
        let feats = windows
            .iter()
            .map(|w| k.matvec(&dict.lift(w.inputs.last().expect("non-empty window"))))
            .collect::<Result<Vec<_>>>()?;
        let targets: Vec<[f64; N_TARGETS]> = windows.iter().map(|w| w.target).collect();
        let readout = ridge(&feats, &targets, self.config.readout_alpha)?;
        self.fitted = Some(Fitted { dict, k, readout });
        Ok(())
    }

    /// Fit only the dynamics on explicit snapshot pairs `(x_t, x_{t+1})`.
    pub fn fit_dynamics(&mut self, pairs: &[(Vec<f64>, Vec<f64>)]) -> Result<()> {
        let rows: Vec<Vec<f64>> = pairs.iter().map(|p| p.0.clone()).collect();
        let dict = RbfDictionary::fit(&rows, &self.config, self.seed)?;
        let xs: Vec<Vec<f64>> = pairs.iter().map(|p| dict.lift(&p.0)).collect();
        let ys: Vec<Vec<f64>> = pairs.iter().map(|p| dict.lift(&p.1)).collect();
        let k = fit_edmd(
            &Matrix::from_rows(&xs)?,
            &Matrix::from_rows(&ys)?,
            self.config.alpha,
        )?;
        let readout = Matrix::zeros(N_TARGETS, dict.lifted_dim() + 1);
        self.fitted = Some(Fitted { dict, k, readout });
        Ok(())
    }

    /// `K^τ Φ(x)` for `τ = 0..=steps`.
    pub fn rollout(&self, x: &[f64], steps: usize) -> Result<Vec<Vec<f64>>> {
        let f = self.state()?;
        let mut z = f.dict.lift(x);
        let mut out = vec![z.clone()];
        for _ in 0..steps {
            z = f.k.matvec(&z)?;
            out.push(z.clone());
        }
        Ok(out)
    }

    /// Targets after advancing the lifted last visit `tau` steps.
    pub fn forecast(&self, window: &Window, tau: usize) -> Result<[f64; N_TARGETS]> {
        let f = self.state()?;
        let last = window
            .inputs
            .last()
            .ok_or_else(|| Error::Contract("empty window".into()))?;
        let z = self
            .rollout(last, tau)?
            .pop()
            .expect("rollout has τ+1 states");
        Ok(apply_readout(&f.readout, &z))
    }

    pub fn predict(&self, windows: &[Window]) -> Result<Vec<[f64; N_TARGETS]>> {
        windows.iter().map(|w| self.forecast(w, 1)).collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let f = self.state()?;
        let mut store = ParamStore::new();
        let centers = if f.dict.centers.is_empty() {
            Matrix::zeros(0, f.dict.input_dim)
        } else {
            Matrix::from_rows(&f.dict.centers)?
        };
        store.add("centers", centers);
        store.add("koopman", f.k.clone());
        store.add("readout", f.readout.clone());
        let config = serde_json::json!({
            "edmd": self.config,
            "bandwidth": f.dict.bandwidth,
            "input_dim": f.dict.input_dim,
        });
        write_store(
            dir,
            "edmd",
            self.seed,
            config,
            &store,
            serde_json::Value::Null,
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = read_manifest(dir)?;
        if manifest.kind != "edmd" {
            return Err(Error::Config(format!(
                "checkpoint kind is `{}`, expected `edmd`",
                manifest.kind
            )));
        }
        let config: EdmdConfig = serde_json::from_value(manifest.config["edmd"].clone())?;
        let bandwidth = manifest.config["bandwidth"]
            .as_f64()
            .ok_or_else(|| Error::Config("manifest lacks bandwidth".into()))?;
        let input_dim = manifest.config["input_dim"]
            .as_u64()
            .ok_or_else(|| Error::Config("manifest lacks input_dim".into()))?
            as usize;
        let mut store = ParamStore::new();
        for p in &manifest.params {
            store.add(p.name.clone(), Matrix::zeros(p.rows, p.cols));
        }
        read_params(dir, &manifest, &mut store)?;
        let get = |name: &str| -> Result<Matrix> {
            store
                .find(name)
                .map(|id| store.value(id).clone())
                .ok_or_else(|| Error::Config(format!("checkpoint lacks `{name}`")))
        };
        let c = get("centers")?;
        let dict = RbfDictionary {
            centers: (0..c.rows()).map(|r| c.row(r).to_vec()).collect(),
            bandwidth,
            include_identity: config.include_identity,
            include_constant: config.include_constant,
            input_dim,
        };
        Ok(Self {
            config,
            seed: manifest.seed,
            fitted: Some(Fitted {
                dict,
                k: get("koopman")?,
                readout: get("readout")?,
            }),
        })
    }
}

/// Ridge regression from the concatenated input visits to the target.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearBaseline {
    pub weights: Matrix,
}

impl LinearBaseline {
    fn features(w: &Window) -> Vec<f64> {
        w.inputs.iter().flatten().copied().collect()
    }

    pub fn fit(windows: &[Window], alpha: f64) -> Result<Self> {
        let feats: Vec<Vec<f64>> = windows.iter().map(Self::features).collect();
        let targets: Vec<[f64; N_TARGETS]> = windows.iter().map(|w| w.target).collect();
        Ok(Self {
            weights: ridge(&feats, &targets, alpha)?,
        })
    }

    pub fn predict(&self, windows: &[Window]) -> Vec<[f64; N_TARGETS]> {
        windows
            .iter()
            .map(|w| apply_readout(&self.weights, &Self::features(w)))
            .collect()
    }
}
