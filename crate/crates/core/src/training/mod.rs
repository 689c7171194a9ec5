//! Loss, metrics, optimizer, training loop and ablation harness.

pub mod ablate;
pub mod loss;
pub mod metrics;
pub mod optim;
pub mod trainer;

pub use ablate::{ablate, AblationRow, ABLATION_VARIANTS};
pub use loss::{loss, sample_loss};
pub use metrics::{mae, mape, mape_mean, EvalReport};
pub use optim::{AdamConfig, AdamW};
pub use trainer::{
    dataset_loss, eval_policy, evaluate, label_scale, predict_all, prepare, train, EpochLog, PreparedSample,
    TrainConfig, TrainOutcome,
};
