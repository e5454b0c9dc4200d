//! Empirical checks of the error bound and descent property, latent
//! trajectory export and feature importance.

pub mod bound;
pub mod descent;
pub mod importance;
pub mod latents;

pub use bound::{
    asymptotic_limit, eps_tilde, geometric_bound, measure_eps, verify_bound, verify_lifted,
    BoundReport, LiftedDynamics, LiftedSequence, TauCheck,
};
pub use descent::{backtrack, verify_descent, DescentConfig, DescentReport};
pub use importance::{feature_importance, ImportanceConfig, ImportanceReport, WindowPredictor};
pub use latents::{export_latents, rollout_latent, LatentTable, Pca};
