//! Composite L1 loss, Adam, synthetic data, evaluation metrics, cost
//! accounting and the training loop.

pub mod accounting;
mod data;
mod loss;
mod metrics;
mod optim;
mod trainer;

pub use accounting::{count_params_flops, model_cost, Cost, ModelCost};
pub use data::{load_dataset, render_blobs, save_dataset, synth_dataset, SynthConfig, TrainingSample};
pub use loss::{loss, loss_terms, prediction_terms, LossBreakdown, LossWeights, TERM_NAMES};
pub use metrics::{evaluate, mpjpe, mpvpe, Metrics, METRICS_HEADER};
pub use optim::{lr_schedule, Adam, LrSchedule};
pub use trainer::{batch_loss, loss_csv_header, train_loop, write_loss_csv, StepRecord, TrainConfig};
