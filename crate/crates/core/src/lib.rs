// negated float comparisons are how validation rejects NaN alongside bad ranges
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod config;
pub mod error;
pub mod expansion;
pub mod fusion;
pub mod heads;
pub mod metrics;
pub mod network;
pub mod ops;
pub mod parallel;
pub mod serialization;
pub mod ssm;
pub mod synth;
pub mod tensor;
pub mod train;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use tensor::{Rng, Tensor};
pub use config::NetworkConfig;
pub use network::{Model, SlideEmbedding};
pub use heads::{SurvivalRecord, Task};
pub use parallel::Parallelism;
pub use synth::{Dataset, SynthSpec};
pub use train::{Checkpoint, TrainConfig};
