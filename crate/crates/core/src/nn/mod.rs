//! Small CNN stack used to train with exact or probed conv gradients.

pub mod data;
pub mod network;
pub mod noise;
pub mod spec;
pub mod train;

pub use data::{Dataset, DatasetSpec};
pub use network::{Gradients, Layer, Network, ParamGrad, Saved, StepContext, Stored, Tape};
pub use noise::{grad_noise_study, GradNoiseReport, LayerNoise};
pub use spec::{Dims, GradMode, LayerEntry, LayerSpec, NetworkSpec};
pub use train::{evaluate, train, LrSchedule, Optimizer, OptimizerSpec, TrainConfig, TrainLog};
