//! Once-for-all multi-width training on toy models.

pub mod data;
pub mod model;
pub mod tasks;
mod trainer;

pub use data::{synthetic_regression, Batch, CharCorpus, Dataset};
pub use tasks::{build_task, Task, TaskOptions, TaskSetup};
pub use model::{CharLm, CharLmShape, MlpRegressor, ModelError, QuantModel, ToyModel};
pub use trainer::{
    evaluate, evaluate_all_widths, train, EpochEval, Strategy, TraceRow, TrainConfig, TrainError,
    TrainReport, WidthEval, DIVERGENCE_FACTOR,
};
