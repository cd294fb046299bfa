//! Unsupervised meta-learning by pseudo-supervised contrast.
//!
//! Pseudo N-way K-shot tasks are built online: each augmented batch supplies
//! the queries, a FIFO queue of momentum-encoder keys supplies the support
//! pool, and an entropic optimal-transport plan followed by a per-row top-K
//! picks the shots. The encoder trains on the pseudo-task contrast plus a
//! MoCo term and is evaluated by prototype few-shot classification.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod assignment;
pub mod augment;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod matrix;
pub mod oracle;
pub mod rng;
pub mod snapshot;
pub mod task_queue;
pub mod trainer;

pub use assignment::{HardAssignment, SinkhornConfig, SoftAssignment};
pub use augment::{AugmentationPolicy, InputKind, PolicyKind};
pub use config::TrainConfig;
pub use data::{Dataset, DatasetManifest, SyntheticSpec};
pub use encoder::{Activation, Architecture, EncoderState, GradientTape, Params};
pub use error::{Error, Result};
pub use evaluation::{AdaptConfig, Episode, EvalConfig, EvalReport};
pub use matrix::Matrix;
pub use task_queue::{MomentumQueue, PseudoTask, SupportSelection};
pub use trainer::{EpochRecord, Trainer};
