//! Adaptive masked language modeling at desk scale.

mod binio;

pub mod analytics;
pub mod config;
pub mod corpus;
pub mod error;
pub mod model;
pub mod nhot;
pub mod rng;
pub mod scalar;
pub mod scheduler;
pub mod synthetic;
pub mod train;
pub mod vocab;

pub use analytics::{GroupKind, PosMap, TrajectoryLog, TrajectoryRecord};
pub use config::{RunConfig, TrainConfig};
pub use corpus::{FrequencyRanking, TokenSequence};
pub use error::{Error, Result};
pub use model::{AdamW, OptimizerConfig, ToyModel, ToyModelConfig, ToyModelParams};
pub use nhot::NHotTable;
pub use scalar::Scalar;
pub use scheduler::{
    AmlmScheduler, MaskAction, MaskDecision, MaskScheduleConfig, MaskWeightTable, Metric,
    ScheduleKind, TokenOutcome, TokenStatsAccumulator,
};
pub use train::{StepStats, Trainer};
pub use vocab::Vocabulary;

/// Training precision.
pub type ModelF32 = ToyModel<f32>;
/// Gradient-check precision.
pub type ModelF64 = ToyModel<f64>;
pub type ParamsF32 = ToyModelParams<f32>;
pub type ParamsF64 = ToyModelParams<f64>;
pub type AdamWF32 = AdamW<f32>;
pub type AdamWF64 = AdamW<f64>;
pub type TrainerF32 = Trainer<f32>;
pub type TrainerF64 = Trainer<f64>;
