//! Longitudinal cohort ingestion, windowing, fold planning, preprocessing
//! and synthetic cohort generation.

pub mod folds;
pub mod preprocess;
pub mod record;
pub mod schema;
pub mod synth;
pub mod windows;

pub use folds::{split_validation, stratified_kfold, FoldPlan};
pub use preprocess::{knn_impute, KnnImputer, Preprocessor, Standardizer};
pub use record::{LongitudinalDataset, Subject, Visit};
pub use schema::{feature_names, Modality, N_FEATURES, N_TARGETS, TARGET_NAMES};
pub use synth::{generate_synthetic, write_synthetic, Observation, SynthConfig, SynthTruth};
pub use windows::{build_windows, Window, WINDOW_LEN};
