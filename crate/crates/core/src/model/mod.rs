//! Autoregressive Transformer decoder built on the relative attention kernels.

pub mod checkpoint;
pub mod config;
pub mod layers;
pub mod optim;
pub mod pitch_time;
pub mod sample;
pub mod train;
pub mod transformer;
pub mod weights;

pub use checkpoint::Checkpoint;
pub use config::{
    AttentionKind, AttributeScheme, ModelConfig, NormPlacement, PitchTimeConfig, PositionMode, PositionOverflow,
};
pub use layers::{feedforward, positional_signal};
pub use optim::{Adam, AdamConfig, Schedule};
pub use pitch_time::{pitch_time_relative_logits, TokenAttributes};
pub use sample::{sample, SampleOptions, SampleOutput};
pub use train::{
    evaluate, sample_batch, train, train_step, StepMetrics, TrainConfig, TrainEvent, TrainReport, TrainState,
};
pub use transformer::{loss, AttentionTrace, HeadTrace, Model, TraceRow};
pub use weights::ModelWeights;
