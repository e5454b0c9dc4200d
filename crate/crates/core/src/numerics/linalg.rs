//! Dense decompositions sized for desk-scale problems (dimensions in the
//! low hundreds): one-sided Jacobi SVD, pseudoinverse, power iteration,
//! Cholesky solves, and eigenvalue routines.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::matrix::{axpy, dot, gemv, gemv_t_acc, norm2, outer_acc, Matrix};
use crate::error::{Error, Result};

/// Largest `min(rows, cols)` accepted by [`svd_small`].
pub const SVD_MAX_DIM: usize = 512;

/// Thin singular value decomposition `M = U diag(s) Vᵀ`.
#[derive(Debug, Clone)]
pub struct Svd {
    /// `rows × k` with orthonormal columns.
    pub u: Matrix,
    /// Non-increasing, non-negative; length `k = min(rows, cols)`.
    pub s: Vec<f64>,
    /// `cols × k` with orthonormal columns.
    pub v: Matrix,
}

impl Svd {
    pub fn reconstruct(&self) -> Matrix {
        let k = self.s.len();
        let mut out = Matrix::zeros(self.u.rows(), self.v.rows());
        for j in 0..k {
            let uj = self.u.col(j);
            let vj = self.v.col(j);
            outer_acc(&mut out, self.s[j], &uj, &vj);
        }
        out
    }

    pub fn sigma_max(&self) -> f64 {
        self.s.first().copied().unwrap_or(0.0)
    }
}

/// One-sided (Hestenes) Jacobi SVD.
pub fn svd_small(m: &Matrix) -> Result<Svd> {
    if m.rows().min(m.cols()) > SVD_MAX_DIM {
        return Err(Error::Contract(format!(
            "svd_small supports min(rows, cols) <= {SVD_MAX_DIM}, got {:?}",
            m.shape()
        )));
    }
    if !m.is_finite() {
        return Err(Error::NonFinite("svd_small input".into()));
    }
    if m.rows() < m.cols() {
        let t = svd_small(&m.transpose())?;
        return Ok(Svd {
            u: t.v,
            s: t.s,
            v: t.u,
        });
    }
    let (rows, n) = m.shape();
    // Columns of M stored as rows so rotations touch contiguous memory.
    let mut cols = m.transpose();
    let mut v = Matrix::identity(n);
    // Orthogonality is only attainable to the rounding of an `rows`-term dot
    // product.
    let tol = f64::EPSILON * rows.max(1) as f64;
    let cap = 100 * n.max(1);
    // Columns below this squared norm are numerically zero.
    let negligible = (f64::MIN_POSITIVE).max((f64::EPSILON * m.frobenius_norm()).powi(2));
    let mut converged = n < 2;
    for _ in 0..cap {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot(cols.row(p), cols.row(p));
                let beta = dot(cols.row(q), cols.row(q));
                let gamma = dot(cols.row(p), cols.row(q));
                if gamma == 0.0
                    || alpha < negligible
                    || beta < negligible
                    || gamma.abs() <= tol * (alpha * beta).sqrt()
                {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_rows(&mut cols, p, q, c, s);
                rotate_rows(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Numerical(format!(
            "Jacobi SVD did not converge within {cap} sweeps"
        )));
    }
    // v currently holds Vᵀ (rows are right singular vectors).
    let mut order: Vec<usize> = (0..n).collect();
    let norms: Vec<f64> = (0..n).map(|j| norm2(cols.row(j))).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]));

    let mut u = Matrix::zeros(rows, n);
    let mut vout = Matrix::zeros(n, n);
    let mut s = Vec::with_capacity(n);
    let scale = norms.iter().cloned().fold(0.0, f64::max);
    let mut missing = Vec::new();
    for (k, &j) in order.iter().enumerate() {
        let sigma = norms[j];
        s.push(sigma);
        for r in 0..n {
            vout.set(r, k, v.get(j, r));
        }
        if sigma > scale * 1e-300 && sigma > 0.0 {
            for (r, &x) in cols.row(j).iter().enumerate() {
                u.set(r, k, x / sigma);
            }
        } else {
            missing.push(k);
        }
    }
    complete_orthonormal(&mut u, &missing);
    Ok(Svd { u, s, v: vout })
}

fn rotate_rows(m: &mut Matrix, p: usize, q: usize, c: f64, s: f64) {
    let cols = m.cols();
    let data = m.data_mut();
    let (lo, hi) = data.split_at_mut(q * cols);
    let rp = &mut lo[p * cols..(p + 1) * cols];
    let rq = &mut hi[..cols];
    for (a, b) in rp.iter_mut().zip(rq.iter_mut()) {
        let x = *a;
        let y = *b;
        *a = c * x - s * y;
        *b = s * x + c * y;
    }
}

/// Fill the listed columns of `u` with unit vectors orthogonal to every
/// other column (Gram-Schmidt against the standard basis).
fn complete_orthonormal(u: &mut Matrix, missing: &[usize]) {
    let (rows, k) = u.shape();
    let mut basis = 0;
    for &col in missing {
        while basis < rows {
            let mut cand = vec![0.0; rows];
            cand[basis] = 1.0;
            basis += 1;
            for _ in 0..2 {
                for j in 0..k {
                    if j == col || (missing.contains(&j) && u.col(j).iter().all(|&x| x == 0.0)) {
                        continue;
                    }
                    let uj = u.col(j);
                    let proj = dot(&uj, &cand);
                    axpy(-proj, &uj, &mut cand);
                }
            }
            let n = norm2(&cand);
            if n > 1e-8 {
                for r in 0..rows {
                    u.set(r, col, cand[r] / n);
                }
                break;
            }
        }
    }
}

/// Moore-Penrose pseudoinverse via truncated SVD. Singular values at or
/// below `rcond * sigma_max` are treated as zero.
pub fn pinv(m: &Matrix, rcond: f64) -> Result<Matrix> {
    let svd = svd_small(m)?;
    let cutoff = rcond * svd.sigma_max();
    let mut out = Matrix::zeros(m.cols(), m.rows());
    for (j, &sigma) in svd.s.iter().enumerate() {
        if sigma <= cutoff || sigma == 0.0 {
            continue;
        }
        let vj = svd.v.col(j);
        let uj = svd.u.col(j);
        outer_acc(&mut out, 1.0 / sigma, &vj, &uj);
    }
    Ok(out)
}

/// Default relative cutoff for [`pinv`].
pub const DEFAULT_RCOND: f64 = 1e-12;

/// Spectral norm `‖M‖₂` by dense SVD.
pub fn spectral_norm(m: &Matrix) -> Result<f64> {
    Ok(svd_small(m)?.sigma_max())
}

/// Seed used for the power-iteration start vector when none is given.
pub const POWER_ITERATION_SEED: u64 = 0x5eed_0f_4b_2d;

/// Recorded iterates of a power iteration, kept for the reverse pass.
#[derive(Debug, Clone)]
pub struct PowerTrace {
    /// Right iterates `v_0 .. v_p`.
    pub vs: Vec<Vec<f64>>,
    /// Left iterates `u_i = K v_i / ‖K v_i‖` for `i = 0..p`.
    pub us: Vec<Vec<f64>>,
    /// `‖K v_i‖₂` for `i = 0..=p`; the last entry is the estimate.
    pub norms: Vec<f64>,
    /// `‖Kᵀ u_i‖₂` for `i = 0..p`.
    pub back_norms: Vec<f64>,
    /// `K v_p`.
    pub last_image: Vec<f64>,
}

impl PowerTrace {
    pub fn estimate(&self) -> f64 {
        self.norms.last().copied().unwrap_or(0.0)
    }

    fn degenerate(&self) -> bool {
        self.norms.iter().chain(&self.back_norms).any(|&n| n == 0.0)
    }

    fn zero(
        n: usize,
        vs: Vec<Vec<f64>>,
        us: Vec<Vec<f64>>,
        norms: Vec<f64>,
        back_norms: Vec<f64>,
    ) -> Self {
        let mut norms = norms;
        norms.push(0.0);
        PowerTrace {
            vs,
            us,
            norms,
            back_norms,
            last_image: vec![0.0; n],
        }
    }
}

pub fn unit_start_vector(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (n as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    loop {
        let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let nv = norm2(&v);
        if nv > 0.0 {
            return v.into_iter().map(|x| x / nv).collect();
        }
    }
}

fn normalized(w: &[f64], nw: f64) -> Vec<f64> {
    w.iter().map(|x| x / nw).collect()
}

/// Run `iters` normalized iterations of `KᵀK` from a seeded unit start
/// vector, recording every step. The estimate is `‖K v_p‖₂`, which never
/// exceeds `σ_max(K)`.
pub fn power_iteration_trace(k: &Matrix, iters: usize, seed: u64) -> Result<PowerTrace> {
    if !k.is_square() {
        return Err(Error::Dimension {
            op: "power_iteration",
            left: k.shape(),
            right: k.shape(),
        });
    }
    if iters == 0 {
        return Err(Error::Contract(
            "power iteration needs at least one iteration".into(),
        ));
    }
    let n = k.rows();
    let mut v = unit_start_vector(n, seed);
    let mut vs = Vec::with_capacity(iters + 1);
    let mut us = Vec::with_capacity(iters);
    let mut norms = Vec::with_capacity(iters + 1);
    let mut back_norms = Vec::with_capacity(iters);
    let mut a = vec![0.0; n];
    let mut b = vec![0.0; n];
    for _ in 0..iters {
        gemv(k, &v, &mut a);
        let na = norm2(&a);
        vs.push(v.clone());
        if na == 0.0 {
            return Ok(PowerTrace::zero(n, vs, us, norms, back_norms));
        }
        norms.push(na);
        let u = normalized(&a, na);
        b.iter_mut().for_each(|x| *x = 0.0);
        gemv_t_acc(k, &u, &mut b);
        let nb = norm2(&b);
        us.push(u);
        if nb == 0.0 {
            return Ok(PowerTrace::zero(n, vs, us, norms, back_norms));
        }
        back_norms.push(nb);
        v = normalized(&b, nb);
    }
    gemv(k, &v, &mut a);
    norms.push(norm2(&a));
    vs.push(v);
    Ok(PowerTrace {
        vs,
        us,
        norms,
        back_norms,
        last_image: a,
    })
}

/// Columns carried by [`power_iteration_norm`].
pub const POWER_BLOCK: usize = 8;

/// Estimate `‖K‖₂` by block power iteration on `KᵀK` with a seeded start
/// block of up to [`POWER_BLOCK`] columns, finishing with a Rayleigh-Ritz
/// step. The block absorbs clusters of nearly equal leading singular values
/// that stall the single-vector iteration. Never exceeds `σ_max(K)` beyond
/// rounding.
pub fn power_iteration_norm(k: &Matrix, iters: usize) -> Result<f64> {
    if !k.is_square() {
        return Err(Error::Dimension {
            op: "power_iteration",
            left: k.shape(),
            right: k.shape(),
        });
    }
    if iters == 0 {
        return Err(Error::Contract(
            "power iteration needs at least one iteration".into(),
        ));
    }
    let n = k.rows();
    let b = n.min(POWER_BLOCK);
    // Block stored as b rows of length n.
    let mut rng = ChaCha8Rng::seed_from_u64(POWER_ITERATION_SEED ^ (n as u64));
    let mut block: Vec<Vec<f64>> = (0..b)
        .map(|_| (0..n).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    orthonormalize(&mut block);
    let mut image = vec![vec![0.0; n]; b];
    for _ in 0..iters {
        for (v, a) in block.iter().zip(image.iter_mut()) {
            gemv(k, v, a);
        }
        for (v, a) in block.iter_mut().zip(&image) {
            v.iter_mut().for_each(|x| *x = 0.0);
            gemv_t_acc(k, a, v);
        }
        orthonormalize(&mut block);
    }
    for (v, a) in block.iter().zip(image.iter_mut()) {
        gemv(k, v, a);
    }
    let gram = Matrix::from_fn(b, b, |i, j| dot(&image[i], &image[j]));
    let (vals, _) = symmetric_eigen(&gram)?;
    Ok(vals.first().copied().unwrap_or(0.0).max(0.0).sqrt())
}

// Modified Gram-Schmidt; columns that vanish are left as zero vectors.
fn orthonormalize(block: &mut [Vec<f64>]) {
    for i in 0..block.len() {
        let (done, rest) = block.split_at_mut(i);
        let v = &mut rest[0];
        let scale = norm2(v);
        for q in done.iter() {
            let c = dot(q, v);
            axpy(-c, q, v);
        }
        let nv = norm2(v);
        if nv > 1e-12 * scale && nv > 0.0 {
            v.iter_mut().for_each(|x| *x /= nv);
        } else {
            v.iter_mut().for_each(|x| *x = 0.0);
        }
    }
}

// Gradient of x ↦ x / ‖x‖ applied to the upstream `g`, where `y = x / ‖x‖`.
fn normalize_backward(y: &[f64], norm: f64, g: &[f64], out: &mut [f64]) {
    let proj = dot(y, g);
    for ((o, &yi), &gi) in out.iter_mut().zip(y).zip(g) {
        *o = (gi - yi * proj) / norm;
    }
}

/// Reverse pass through [`power_iteration_trace`]: accumulates
/// `d_estimate * ∂estimate/∂K` into `grad`. The start vector is constant.
pub fn power_iteration_backward(
    k: &Matrix,
    trace: &PowerTrace,
    d_estimate: f64,
    grad: &mut Matrix,
) {
    if trace.degenerate() || d_estimate == 0.0 {
        return;
    }
    let p = trace.vs.len() - 1;
    let n = k.rows();
    let s = trace.estimate();
    let a_bar: Vec<f64> = trace
        .last_image
        .iter()
        .map(|x| d_estimate * x / s)
        .collect();
    outer_acc(grad, 1.0, &a_bar, &trace.vs[p]);
    let mut v_bar = vec![0.0; n];
    gemv_t_acc(k, &a_bar, &mut v_bar);
    let mut b_bar = vec![0.0; n];
    let mut u_bar = vec![0.0; n];
    let mut w_bar = vec![0.0; n];
    for i in (0..p).rev() {
        // v_{i+1} = Kᵀ u_i / ‖Kᵀ u_i‖
        normalize_backward(&trace.vs[i + 1], trace.back_norms[i], &v_bar, &mut b_bar);
        outer_acc(grad, 1.0, &trace.us[i], &b_bar);
        gemv(k, &b_bar, &mut u_bar);
        // u_i = K v_i / ‖K v_i‖
        normalize_backward(&trace.us[i], trace.norms[i], &u_bar, &mut w_bar);
        outer_acc(grad, 1.0, &w_bar, &trace.vs[i]);
        if i > 0 {
            v_bar.iter_mut().for_each(|x| *x = 0.0);
            gemv_t_acc(k, &w_bar, &mut v_bar);
        }
    }
}

/// Solve `A X = B` for symmetric positive-definite `A` (Cholesky).
pub fn solve_spd(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    let n = a.rows();
    if !a.is_square() || b.rows() != n {
        return Err(Error::Dimension {
            op: "solve_spd",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut l = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a.get(i, j);
            for k in 0..j {
                sum -= l.get(i, k) * l.get(j, k);
            }
            if i == j {
                if sum <= 0.0 || !sum.is_finite() {
                    return Err(Error::Numerical(format!(
                        "matrix not positive definite (pivot {i} = {sum:e})"
                    )));
                }
                l.set(i, i, sum.sqrt());
            } else {
                l.set(i, j, sum / l.get(j, j));
            }
        }
    }
    let mut x = b.clone();
    for c in 0..b.cols() {
        for i in 0..n {
            let mut sum = x.get(i, c);
            for k in 0..i {
                sum -= l.get(i, k) * x.get(k, c);
            }
            x.set(i, c, sum / l.get(i, i));
        }
        for i in (0..n).rev() {
            let mut sum = x.get(i, c);
            for k in i + 1..n {
                sum -= l.get(k, i) * x.get(k, c);
            }
            x.set(i, c, sum / l.get(i, i));
        }
    }
    Ok(x)
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues in non-increasing order and eigenvectors as columns.
pub fn symmetric_eigen(a: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    if !a.is_square() {
        return Err(Error::Dimension {
            op: "symmetric_eigen",
            left: a.shape(),
            right: a.shape(),
        });
    }
    let n = a.rows();
    let mut m = a.clone();
    let mut v = Matrix::identity(n);
    let scale = m.frobenius_norm().max(f64::MIN_POSITIVE);
    let mut converged = n < 2;
    for _ in 0..100 * n.max(1) {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m.get(i, j).powi(2))
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let theta = (m.get(q, q) - m.get(p, p)) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m.get(k, p);
                    let mkq = m.get(k, q);
                    m.set(k, p, c * mkp - s * mkq);
                    m.set(k, q, s * mkp + c * mkq);
                }
                for k in 0..n {
                    let mpk = m.get(p, k);
                    let mqk = m.get(q, k);
                    m.set(p, k, c * mpk - s * mqk);
                    m.set(q, k, s * mpk + c * mqk);
                }
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    if !converged {
        return Err(Error::Numerical(
            "Jacobi eigensolver did not converge".into(),
        ));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| m.get(y, y).total_cmp(&m.get(x, x)));
    let values = order.iter().map(|&i| m.get(i, i)).collect();
    let vectors = Matrix::from_fn(n, n, |r, c| v.get(r, order[c]));
    Ok((values, vectors))
}

/// Eigenvalues `(re, im)` of a general real square matrix: reduction to
/// Hessenberg form followed by shifted QR.
pub fn eigenvalues(a: &Matrix) -> Result<Vec<(f64, f64)>> {
    if !a.is_square() {
        return Err(Error::Dimension {
            op: "eigenvalues",
            left: a.shape(),
            right: a.shape(),
        });
    }
    let n = a.rows();
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut h: Vec<Vec<f64>> = (0..n).map(|r| a.row(r).to_vec()).collect();
    hessenberg(&mut h);
    hqr(&mut h)
}

/// Largest eigenvalue modulus.
pub fn spectral_radius(a: &Matrix) -> Result<f64> {
    Ok(eigenvalues(a)?
        .into_iter()
        .map(|(re, im)| re.hypot(im))
        .fold(0.0, f64::max))
}

fn hessenberg(a: &mut [Vec<f64>]) {
    let n = a.len();
    for m in 1..n.saturating_sub(1) {
        let mut x: f64 = 0.0;
        let mut piv = m;
        for (j, row) in a.iter().enumerate().skip(m) {
            if row[m - 1].abs() > x.abs() {
                x = row[m - 1];
                piv = j;
            }
        }
        if piv != m {
            a.swap(piv, m);
            for row in a.iter_mut() {
                row.swap(piv, m);
            }
        }
        if x != 0.0 {
            for i in m + 1..n {
                let mut y = a[i][m - 1];
                if y != 0.0 {
                    y /= x;
                    a[i][m - 1] = y;
                    for j in m..n {
                        a[i][j] -= y * a[m][j];
                    }
                    for row in a.iter_mut() {
                        row[m] += y * row[i];
                    }
                }
            }
        }
    }
    for (i, row) in a.iter_mut().enumerate() {
        for v in row.iter_mut().take(i.saturating_sub(1)) {
            *v = 0.0;
        }
    }
}

fn sign(a: f64, b: f64) -> f64 {
    if b >= 0.0 {
        a.abs()
    } else {
        -a.abs()
    }
}

fn hqr(a: &mut [Vec<f64>]) -> Result<Vec<(f64, f64)>> {
    let n = a.len();
    let mut wr = vec![0.0; n];
    let mut wi = vec![0.0; n];
    let mut anorm = 0.0;
    for i in 0..n {
        for j in i.saturating_sub(1)..n {
            anorm += a[i][j].abs();
        }
    }
    let mut nn = n as isize - 1;
    let mut t = 0.0;
    while nn >= 0 {
        let mut its = 0;
        loop {
            let nu = nn as usize;
            let mut l = nu;
            while l >= 1 {
                let mut s = a[l - 1][l - 1].abs() + a[l][l].abs();
                if s == 0.0 {
                    s = anorm;
                }
                if a[l][l - 1].abs() + s == s {
                    a[l][l - 1] = 0.0;
                    break;
                }
                l -= 1;
            }
            let mut x = a[nu][nu];
            if l == nu {
                wr[nu] = x + t;
                wi[nu] = 0.0;
                nn -= 1;
                break;
            }
            let mut y = a[nu - 1][nu - 1];
            let mut w = a[nu][nu - 1] * a[nu - 1][nu];
            if l == nu - 1 {
                let p = 0.5 * (y - x);
                let q = p * p + w;
                let mut z = q.abs().sqrt();
                x += t;
                if q >= 0.0 {
                    z = p + sign(z, p);
                    wr[nu - 1] = x + z;
                    wr[nu] = if z != 0.0 { x - w / z } else { x + z };
                    wi[nu - 1] = 0.0;
                    wi[nu] = 0.0;
                } else {
                    wr[nu - 1] = x + p;
                    wr[nu] = x + p;
                    wi[nu - 1] = -z;
                    wi[nu] = z;
                }
                nn -= 2;
                break;
            }
            if its == 60 {
                return Err(Error::Numerical(
                    "QR eigenvalue iteration did not converge".into(),
                ));
            }
            if its == 10 || its == 20 {
                t += x;
                for (i, row) in a.iter_mut().enumerate().take(nu + 1) {
                    row[i] -= x;
                }
                let s = a[nu][nu - 1].abs() + a[nu - 1][nu - 2].abs();
                x = 0.75 * s;
                y = x;
                w = -0.4375 * s * s;
            }
            its += 1;
            let mut m = nu - 2;
            let (mut p, mut q, mut r);
            loop {
                let z = a[m][m];
                let rr = x - z;
                let ss = y - z;
                p = (rr * ss - w) / a[m + 1][m] + a[m][m + 1];
                q = a[m + 1][m + 1] - z - rr - ss;
                r = a[m + 2][m + 1];
                let s = p.abs() + q.abs() + r.abs();
                p /= s;
                q /= s;
                r /= s;
                if m == l {
                    break;
                }
                let u = a[m][m - 1].abs() * (q.abs() + r.abs());
                let v = p.abs() * (a[m - 1][m - 1].abs() + z.abs() + a[m + 1][m + 1].abs());
                if u + v == v {
                    break;
                }
                m -= 1;
            }
            for i in m + 2..=nu {
                a[i][i - 2] = 0.0;
                if i != m + 2 {
                    a[i][i - 3] = 0.0;
                }
            }
            let mut k = m;
            while k < nu {
                if k != m {
                    p = a[k][k - 1];
                    q = a[k + 1][k - 1];
                    r = if k != nu - 1 { a[k + 2][k - 1] } else { 0.0 };
                    x = p.abs() + q.abs() + r.abs();
                    if x != 0.0 {
                        p /= x;
                        q /= x;
                        r /= x;
                    }
                }
                let s = sign((p * p + q * q + r * r).sqrt(), p);
                if s != 0.0 {
                    if k == m {
                        if l != m {
                            a[k][k - 1] = -a[k][k - 1];
                        }
                    } else {
                        a[k][k - 1] = -s * x;
                    }
                    p += s;
                    x = p / s;
                    y = q / s;
                    let z = r / s;
                    q /= p;
                    r /= p;
                    for j in k..=nu {
                        let mut pp = a[k][j] + q * a[k + 1][j];
                        if k != nu - 1 {
                            pp += r * a[k + 2][j];
                            a[k + 2][j] -= pp * z;
                        }
                        a[k + 1][j] -= pp * y;
                        a[k][j] -= pp * x;
                    }
                    let mmin = if nu < k + 3 { nu } else { k + 3 };
                    for row in a.iter_mut().take(mmin + 1).skip(l) {
                        let mut pp = x * row[k] + y * row[k + 1];
                        if k != nu - 1 {
                            pp += z * row[k + 2];
                            row[k + 2] -= pp * r;
                        }
                        row[k + 1] -= pp * q;
                        row[k] -= pp;
                    }
                }
                k += 1;
            }
        }
    }
    Ok(wr.into_iter().zip(wi).collect())
}
