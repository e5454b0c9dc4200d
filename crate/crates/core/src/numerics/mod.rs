//! Dense linear algebra, optimisation and gradient-checking utilities.

pub mod grad;
pub mod linalg;
pub mod matrix;
pub mod optim;

pub use grad::{check_gradients, gradients, numerical_gradient, GradCheck, Objective};
pub use linalg::{
    eigenvalues, pinv, power_iteration_norm, spectral_norm, spectral_radius, svd_small, Svd,
};
pub use matrix::Matrix;
pub use optim::{
    clip_global_norm, EarlyStopping, GradSet, OptimConfig, ParamId, ParamStore, ReduceOnPlateau,
};
