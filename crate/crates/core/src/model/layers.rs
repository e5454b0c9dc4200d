//! Layer primitives with explicit forward caches and backward rules.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::numerics::matrix::{gemv, gemv_t_acc, outer_acc, silu, silu_grad};
use crate::numerics::optim::{GradSet, ParamId, ParamStore};
use crate::numerics::Matrix;

pub const LN_EPS: f64 = 1e-5;

/// Xavier-uniform weight of shape `out × inp`.
pub fn xavier(rng: &mut ChaCha8Rng, out: usize, inp: usize) -> Matrix {
    let a = (6.0 / (inp + out) as f64).sqrt();
    Matrix::from_fn(out, inp, |_, _| rng.random_range(-a..a))
}

/// `y = W x + b` with `W: out × in`, `b: 1 × out`. A missing bias is
/// treated as zero.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        inp: usize,
        out: usize,
        bias: bool,
    ) -> Self {
        let w = store.add(format!("{name}.w"), xavier(rng, out, inp));
        let b = bias.then(|| store.add(format!("{name}.b"), Matrix::zeros(1, out)));
        Self { w, b }
    }

    pub fn out_dim(&self, store: &ParamStore) -> usize {
        store.value(self.w).rows()
    }

    pub fn forward(&self, store: &ParamStore, x: &[f64]) -> Vec<f64> {
        let w = store.value(self.w);
        let mut y = vec![0.0; w.rows()];
        gemv(w, x, &mut y);
        if let Some(b) = self.b {
            for (yi, bi) in y.iter_mut().zip(store.value(b).data()) {
                *yi += bi;
            }
        }
        y
    }

    /// Accumulate parameter gradients and, if requested, `dx += Wᵀ dy`.
    pub fn backward(
        &self,
        store: &ParamStore,
        x: &[f64],
        dy: &[f64],
        grads: &mut GradSet,
        dx: Option<&mut [f64]>,
    ) {
        outer_acc(grads.get_mut(self.w), 1.0, dy, x);
        if let Some(b) = self.b {
            for (g, d) in grads.get_mut(b).data_mut().iter_mut().zip(dy) {
                *g += d;
            }
        }
        if let Some(dx) = dx {
            gemv_t_acc(store.value(self.w), dy, dx);
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

#[derive(Debug, Clone)]
pub struct LnCache {
    xhat: Vec<f64>,
    inv_std: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.add(
            format!("{name}.gamma"),
            Matrix::from_vec(1, dim, vec![1.0; dim]).expect("shape"),
        );
        let beta = store.add(format!("{name}.beta"), Matrix::zeros(1, dim));
        Self { gamma, beta }
    }

    pub fn forward(&self, store: &ParamStore, x: &[f64]) -> (Vec<f64>, LnCache) {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let inv_std = 1.0 / (var + LN_EPS).sqrt();
        let xhat: Vec<f64> = x.iter().map(|v| (v - mean) * inv_std).collect();
        let g = store.value(self.gamma).data();
        let b = store.value(self.beta).data();
        let y = xhat
            .iter()
            .zip(g.iter().zip(b))
            .map(|(h, (g, b))| g * h + b)
            .collect();
        (y, LnCache { xhat, inv_std })
    }

    /// Returns `dx`.
    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &LnCache,
        dy: &[f64],
        grads: &mut GradSet,
    ) -> Vec<f64> {
        let g = store.value(self.gamma).data();
        {
            let dg = grads.get_mut(self.gamma).data_mut();
            for ((d, &dyi), &h) in dg.iter_mut().zip(dy).zip(&cache.xhat) {
                *d += dyi * h;
            }
        }
        for (d, &dyi) in grads.get_mut(self.beta).data_mut().iter_mut().zip(dy) {
            *d += dyi;
        }
        let n = dy.len() as f64;
        let dxhat: Vec<f64> = dy.iter().zip(g).map(|(d, g)| d * g).collect();
        let mean_d = dxhat.iter().sum::<f64>() / n;
        let mean_dh = dxhat
            .iter()
            .zip(&cache.xhat)
            .map(|(d, h)| d * h)
            .sum::<f64>()
            / n;
        dxhat
            .iter()
            .zip(&cache.xhat)
            .map(|(d, h)| cache.inv_std * (d - mean_d - h * mean_dh))
            .collect()
    }
}

/// Inverted dropout mask: each entry is 0 or `1/(1−p)`.
pub fn dropout_mask(rng: Option<&mut ChaCha8Rng>, p: f64, n: usize) -> Option<Vec<f64>> {
    let rng = rng?;
    if p <= 0.0 {
        return None;
    }
    let keep = 1.0 / (1.0 - p);
    Some(
        (0..n)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect(),
    )
}

fn apply_mask(v: &mut [f64], mask: &Option<Vec<f64>>) {
    if let Some(m) = mask {
        for (x, k) in v.iter_mut().zip(m) {
            *x *= k;
        }
    }
}

/// affine → LayerNorm → SiLU → dropout.
#[derive(Debug, Clone, Copy)]
pub struct DenseBlock {
    pub lin: Linear,
    pub ln: LayerNorm,
}

#[derive(Debug, Clone)]
pub struct DenseCache {
    x: Vec<f64>,
    normed: Vec<f64>,
    ln: LnCache,
    mask: Option<Vec<f64>>,
}

impl DenseBlock {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        inp: usize,
        out: usize,
    ) -> Self {
        let lin = Linear::new(store, rng, &format!("{name}.lin"), inp, out, true);
        let ln = LayerNorm::new(store, &format!("{name}.ln"), out);
        Self { lin, ln }
    }

    pub fn forward(
        &self,
        store: &ParamStore,
        x: &[f64],
        drop: Option<(&mut ChaCha8Rng, f64)>,
    ) -> (Vec<f64>, DenseCache) {
        let a = self.lin.forward(store, x);
        let (normed, ln) = self.ln.forward(store, &a);
        let mut y: Vec<f64> = normed.iter().map(|&v| silu(v)).collect();
        let mask = match drop {
            Some((rng, p)) => dropout_mask(Some(rng), p, y.len()),
            None => None,
        };
        apply_mask(&mut y, &mask);
        (
            y,
            DenseCache {
                x: x.to_vec(),
                normed,
                ln,
                mask,
            },
        )
    }

    /// Returns `dx`.
    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &DenseCache,
        dy: &[f64],
        grads: &mut GradSet,
    ) -> Vec<f64> {
        let mut d = dy.to_vec();
        apply_mask(&mut d, &cache.mask);
        for (di, &n) in d.iter_mut().zip(&cache.normed) {
            *di *= silu_grad(n);
        }
        let da = self.ln.backward(store, &cache.ln, &d, grads);
        let mut dx = vec![0.0; cache.x.len()];
        self.lin
            .backward(store, &cache.x, &da, grads, Some(&mut dx));
        dx
    }
}

/// `z + dropout(W₂ SiLU(LN(W₁ z + b₁)) + b₂)`.
#[derive(Debug, Clone, Copy)]
pub struct ResidualBlock {
    pub inner: DenseBlock,
    pub out: Linear,
}

#[derive(Debug, Clone)]
pub struct ResidualCache {
    inner: DenseCache,
    hidden: Vec<f64>,
    mask: Option<Vec<f64>>,
}

impl ResidualBlock {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, dim: usize) -> Self {
        let inner = DenseBlock::new(store, rng, &format!("{name}.inner"), dim, dim);
        let out = Linear::new(store, rng, &format!("{name}.out"), dim, dim, true);
        Self { inner, out }
    }

    pub fn forward(
        &self,
        store: &ParamStore,
        z: &[f64],
        mut drop: Option<(&mut ChaCha8Rng, f64)>,
    ) -> (Vec<f64>, ResidualCache) {
        let (hidden, inner) = self.inner.forward(store, z, None);
        let mut branch = self.out.forward(store, &hidden);
        let mask = match drop.as_mut() {
            Some((rng, p)) => dropout_mask(Some(rng), *p, branch.len()),
            None => None,
        };
        apply_mask(&mut branch, &mask);
        let y = z.iter().zip(&branch).map(|(a, b)| a + b).collect();
        (
            y,
            ResidualCache {
                inner,
                hidden,
                mask,
            },
        )
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &ResidualCache,
        dy: &[f64],
        grads: &mut GradSet,
    ) -> Vec<f64> {
        let mut db = dy.to_vec();
        apply_mask(&mut db, &cache.mask);
        let mut dh = vec![0.0; cache.hidden.len()];
        self.out
            .backward(store, &cache.hidden, &db, grads, Some(&mut dh));
        let dz_inner = self.inner.backward(store, &cache.inner, &dh, grads);
        dy.iter().zip(&dz_inner).map(|(a, b)| a + b).collect()
    }
}

/// `h + SiLU(LN(W h + b))`, used in the decoder.
#[derive(Debug, Clone, Copy)]
pub struct SkipDense {
    pub block: DenseBlock,
}

impl SkipDense {
    pub fn forward(&self, store: &ParamStore, h: &[f64]) -> (Vec<f64>, DenseCache) {
        let (branch, cache) = self.block.forward(store, h, None);
        (h.iter().zip(&branch).map(|(a, b)| a + b).collect(), cache)
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &DenseCache,
        dy: &[f64],
        grads: &mut GradSet,
    ) -> Vec<f64> {
        let d = self.block.backward(store, cache, dy, grads);
        dy.iter().zip(&d).map(|(a, b)| a + b).collect()
    }
}
