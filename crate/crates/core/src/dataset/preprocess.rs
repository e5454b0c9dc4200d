use std::path::Path;

use serde::{Deserialize, Serialize};

use super::record::LongitudinalDataset;
use super::schema::N_TARGETS;
use super::windows::Window;
use crate::error::{Error, Result};

/// Lower bound applied to fitted standard deviations.
pub const STD_FLOOR: f64 = 1e-8;

/// Column-wise affine standardization. NaN cells pass through untouched.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Fit on observed (non-NaN) cells with the population standard
    /// deviation. Columns without observations map to mean 0, std 1.
    pub fn fit<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let width = rows
            .first()
            .map(|r| r.as_ref().len())
            .ok_or_else(|| Error::Contract("standardizer needs at least one row".into()))?;
        let mut sum = vec![0.0; width];
        let mut count = vec![0usize; width];
        for r in rows {
            for (j, &x) in r.as_ref().iter().enumerate() {
                if !x.is_nan() {
                    sum[j] += x;
                    count[j] += 1;
                }
            }
        }
        let mean: Vec<f64> = sum
            .iter()
            .zip(&count)
            .map(|(&s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
            .collect();
        let mut ss = vec![0.0; width];
        for r in rows {
            for (j, &x) in r.as_ref().iter().enumerate() {
                if !x.is_nan() {
                    ss[j] += (x - mean[j]).powi(2);
                }
            }
        }
        let std = ss
            .iter()
            .zip(&count)
            .map(|(&s, &c)| {
                if c > 0 {
                    (s / c as f64).sqrt().max(STD_FLOOR)
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn width(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(&x, (&m, &s))| (x - m) / s)
            .collect()
    }

    pub fn invert(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(&x, (&m, &s))| x * s + m)
            .collect()
    }
}

// Euclidean distance over co-observed cells, rescaled by the fraction of
// cells compared. None when nothing is co-observed.
fn nan_euclidean(a: &[f64], b: &[f64]) -> Option<f64> {
    let mut ss = 0.0;
    let mut n = 0usize;
    for (&x, &y) in a.iter().zip(b) {
        if !x.is_nan() && !y.is_nan() {
            ss += (x - y) * (x - y);
            n += 1;
        }
    }
    (n > 0).then(|| (a.len() as f64 / n as f64 * ss).sqrt())
}

/// KNN imputation against a fixed reference table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnnImputer {
    pub k: usize,
    #[serde(with = "nan_rows")]
    pub reference: Vec<Vec<f64>>,
    pub column_mean: Vec<f64>,
}

impl KnnImputer {
    pub fn fit(rows: Vec<Vec<f64>>, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("imputation k must be ≥ 1".into()));
        }
        let column_mean = Standardizer::fit(&rows)?.mean;
        Ok(Self {
            k,
            reference: rows,
            column_mean,
        })
    }

    /// Fill every NaN in `query` with the mean of that column over the `k`
    /// nearest reference rows observing it, falling back to the reference
    /// column mean. Observed entries are returned unchanged.
    pub fn impute(&self, query: &[f64]) -> Result<Vec<f64>> {
        if query.iter().all(|x| x.is_nan()) {
            return Err(Error::Imputation(
                "query row has every feature missing".into(),
            ));
        }
        let mut out = query.to_vec();
        if !query.iter().any(|x| x.is_nan()) {
            return Ok(out);
        }
        let mut ranked: Vec<(f64, usize)> = self
            .reference
            .iter()
            .enumerate()
            .filter_map(|(i, r)| nan_euclidean(query, r).map(|d| (d, i)))
            .collect();
        ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for (j, cell) in out.iter_mut().enumerate() {
            if !cell.is_nan() {
                continue;
            }
            let mut sum = 0.0;
            let mut n = 0;
            for &(_, i) in &ranked {
                let v = self.reference[i][j];
                if !v.is_nan() {
                    sum += v;
                    n += 1;
                    if n == self.k {
                        break;
                    }
                }
            }
            *cell = if n > 0 {
                sum / n as f64
            } else {
                self.column_mean[j]
            };
        }
        Ok(out)
    }
}

/// One-shot form of [`KnnImputer::impute`].
pub fn knn_impute(train_rows: &[Vec<f64>], query: &[f64], k: usize) -> Result<Vec<f64>> {
    KnnImputer::fit(train_rows.to_vec(), k)?.impute(query)
}

/// Fold-local preprocessing: feature standardization, KNN imputation in the
/// standardized space, and optional target standardization. Everything is
/// fitted on training subjects only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preprocessor {
    pub features: Standardizer,
    pub imputer: KnnImputer,
    pub targets: Option<Standardizer>,
}

impl Preprocessor {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::file(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Fit on every visit of the (training) dataset.
    pub fn fit(train: &LongitudinalDataset, k: usize, standardize_targets: bool) -> Result<Self> {
        let rows: Vec<&[f64]> = train
            .subjects
            .iter()
            .flat_map(|s| s.visits.iter().map(|v| v.features.as_slice()))
            .collect();
        let features = Standardizer::fit(&rows)?;
        let standardized: Vec<Vec<f64>> = rows.iter().map(|r| features.apply(r)).collect();
        let imputer = KnnImputer::fit(standardized, k)?;
        let targets = if standardize_targets {
            let t: Vec<&[f64]> = train
                .subjects
                .iter()
                .flat_map(|s| s.visits.iter().map(|v| v.targets.as_slice()))
                .collect();
            Some(Standardizer::fit(&t)?)
        } else {
            None
        };
        Ok(Self {
            features,
            imputer,
            targets,
        })
    }

    pub fn transform_row(&self, row: &[f64]) -> Result<Vec<f64>> {
        self.imputer.impute(&self.features.apply(row))
    }

    pub fn transform_window(&self, w: &Window) -> Result<Window> {
        let inputs = w
            .inputs
            .iter()
            .map(|r| self.transform_row(r))
            .collect::<Result<Vec<_>>>()?;
        Ok(Window {
            inputs,
            target: self.scale_target(&w.target),
            ..w.clone()
        })
    }

    pub fn transform_windows(&self, ws: &[Window]) -> Result<Vec<Window>> {
        crate::par::map(ws, |w| self.transform_window(w))
            .into_iter()
            .collect()
    }

    pub fn scale_target(&self, t: &[f64; N_TARGETS]) -> [f64; N_TARGETS] {
        match &self.targets {
            Some(s) => to_array(&s.apply(t)),
            None => *t,
        }
    }

    /// Map a model output back to the original target scale.
    pub fn unscale_target(&self, t: &[f64; N_TARGETS]) -> [f64; N_TARGETS] {
        match &self.targets {
            Some(s) => to_array(&s.invert(t)),
            None => *t,
        }
    }
}

fn to_array(v: &[f64]) -> [f64; N_TARGETS] {
    let mut out = [0.0; N_TARGETS];
    out.copy_from_slice(v);
    out
}

/// Rows with missing cells as JSON `null`.
mod nan_rows {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(rows: &[Vec<f64>], s: S) -> Result<S::Ok, S::Error> {
        let opt: Vec<Vec<Option<f64>>> = rows
            .iter()
            .map(|r| r.iter().map(|&v| (!v.is_nan()).then_some(v)).collect())
            .collect();
        opt.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Vec<f64>>, D::Error> {
        let opt: Vec<Vec<Option<f64>>> = Vec::deserialize(d)?;
        Ok(opt
            .into_iter()
            .map(|r| r.into_iter().map(|v| v.unwrap_or(f64::NAN)).collect())
            .collect())
    }
}
