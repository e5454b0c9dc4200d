use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::numerics::linalg::{spectral_norm, svd_small};
use crate::numerics::Matrix;

/// `U min(Σ, ρ_init) Vᵀ` where `UΣVᵀ = svd(I + B₀)` and `B₀ ~ N(0, σ_init²)`.
pub fn init_koopman(d_z: usize, sigma_init: f64, rho_init: f64, seed: u64) -> Result<Matrix> {
    if d_z == 0 {
        return Err(Error::Config("d_z must be ≥ 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = Matrix::identity(d_z);
    if sigma_init > 0.0 {
        for v in m.data_mut() {
            let e: f64 = StandardNormal.sample(&mut rng);
            *v += sigma_init * e;
        }
    }
    let mut svd = svd_small(&m)?;
    for s in &mut svd.s {
        *s = s.min(rho_init);
    }
    Ok(svd.reconstruct())
}

/// `K / max(1, ‖K‖₂/ρ)` with the norm measured by dense SVD.
pub fn project_spectral(k: &Matrix, rho: f64) -> Result<Matrix> {
    if !(rho > 0.0) {
        return Err(Error::Config(format!(
            "projection radius must be > 0, got {rho}"
        )));
    }
    let norm = spectral_norm(k)?;
    if norm > rho {
        Ok(k.scale(rho / norm))
    } else {
        Ok(k.clone())
    }
}

/// `K z + c`.
pub fn koopman_step(k: &Matrix, z: &[f64], c: &[f64]) -> Result<Vec<f64>> {
    let mut out = k.matvec(z)?;
    if c.len() != out.len() {
        return Err(Error::Dimension {
            op: "koopman_step",
            left: (out.len(), 1),
            right: (c.len(), 1),
        });
    }
    for (o, ci) in out.iter_mut().zip(c) {
        *o += ci;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::linalg::power_iteration_norm;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn zero_perturbation_gives_scaled_identity() {
        let k = init_koopman(6, 0.0, 0.99, 1).unwrap();
        assert_eq!(k, Matrix::identity(6).scale(0.99));
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        for seed in 0..10 {
            let k = init_koopman(12, 1e-2, 0.99, seed).unwrap();
            assert!(power_iteration_norm(&k, 50).unwrap() <= 0.99 + 1e-6);
            assert_eq!(k, init_koopman(12, 1e-2, 0.99, seed).unwrap());
        }
    }

    #[test]
    fn projection_cases() {
        let small = Matrix::from_diag(&[0.5, 0.1]);
        assert_eq!(project_spectral(&small, 0.95).unwrap(), small);
        let big = Matrix::identity(3).scale(2.0);
        assert_eq!(
            project_spectral(&big, 0.95).unwrap(),
            Matrix::identity(3).scale(0.95)
        );
    }

    #[test]
    fn step_cases() {
        let z = [0.3, -1.0];
        assert_eq!(
            koopman_step(&Matrix::identity(2), &z, &[0.0, 0.0]).unwrap(),
            z.to_vec()
        );
        let k = Matrix::from_vec(2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        assert_eq!(
            koopman_step(&k, &[0.0, 0.0], &[5.0, 6.0]).unwrap(),
            vec![5.0, 6.0]
        );
    }

    proptest! {
        #[test]
        fn projection_bounds_norm_and_keeps_direction(vals in proptest::collection::vec(-3.0f64..3.0, 16), rho in 0.1f64..0.99) {
            let k = Matrix::from_vec(4, 4, vals).unwrap();
            prop_assume!(k.frobenius_norm() > 1e-6);
            let p = project_spectral(&k, rho).unwrap();
            prop_assert!(spectral_norm(&p).unwrap() <= rho + 1e-8);
            let a = k.scale(1.0 / k.frobenius_norm());
            let b = p.scale(1.0 / p.frobenius_norm());
            prop_assert!(a.sub(&b).unwrap().max_abs() < 1e-12);
        }

        #[test]
        fn step_is_affine(z in proptest::collection::vec(-2.0f64..2.0, 3), dz in proptest::collection::vec(-2.0f64..2.0, 3), a in -2.0f64..2.0, b in -2.0f64..2.0) {
            let k = init_koopman(3, 0.3, 0.99, 4).unwrap();
            let zero = [0.0; 3];
            let mix: Vec<f64> = z.iter().zip(&dz).map(|(x, y)| a * x + b * y).collect();
            let lhs = koopman_step(&k, &mix, &zero).unwrap();
            let s1 = koopman_step(&k, &z, &zero).unwrap();
            let s2 = koopman_step(&k, &dz, &zero).unwrap();
            for i in 0..3 {
                assert_abs_diff_eq!(lhs[i], a * s1[i] + b * s2[i], epsilon = 1e-12);
            }
        }
    }
}
