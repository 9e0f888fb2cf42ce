//! Huber/Adam training, fold ensembles, metrics, evaluation and the layer
//! sweep.

mod adam;
mod ensemble;
mod evaluate;
mod metrics;
mod sweep;
mod trainer;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use ensemble::{
    ensemble_store, member_seed, train_ensemble, train_ensemble_on, EnsembleSpec, Member, MemberRecord,
    TrainedEnsemble, write_csv, ENSEMBLE_FILE,
};
pub use evaluate::{evaluate, evaluate_store, EvalFailure, EvalMetadata, EvalReport, EvalRow};
pub use metrics::{huber_loss, mean_baseline_rmse, ncc, rmse};
pub use sweep::{feature_layer_count, layer_sweep, SweepRow, SweepTable};
pub use trainer::{
    batch_gradients, predict_items, train_fold, validation_rmse, EpochRecord, FoldData, FoldOutcome, TrainConfig,
};
