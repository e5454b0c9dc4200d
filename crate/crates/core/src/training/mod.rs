pub mod loss;
pub mod metrics;
pub mod pipeline;
pub mod trainer;

pub use loss::{
    koopman_fixed_point, koopman_grad_closed_form, spectral_penalty, CompositeLoss, EvalOptions,
    LatentPairs, LossConfig, LossParts,
};
pub use metrics::{compute_metrics, pearson, spearman, EvalMetrics, Summary, TargetMetrics};
pub use pipeline::{
    ablation_setups, prepare_folds, run_ablation, run_cv, AblationTable, CvReport, FoldData,
    FoldOutcome,
};
pub use trainer::{
    evaluate, predict, train, EpochRecord, FitConfig, TrainConfig, TrainMode, TrainReport,
};
