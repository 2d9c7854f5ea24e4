//! Video transformer whose tokens are image patches sampled at deforming
//! anatomical points, with masked-autoencoder pre-training on those tokens
//! and heads for point tracking, binary classification and scalar
//! regression.

// `!(x > 0.0)` deliberately rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod geometry;
pub mod dataset;
pub mod io;
pub mod mae;
pub mod model;
pub mod numerics;
pub mod phantom;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
pub use geometry::{Clip, PatchSet, PointTrajectorySet};
pub use mae::{DecoderConfig, MaskPlan};
pub use model::{ModelConfig, PosEmbedVariant, Viact};
pub use numerics::{AdamWState, ParamStore, Tape, Tensor, Var};
pub use dataset::{Dataset, Sample};
pub use io::Checkpoint;
pub use training::{MetricReport, Task, TrainConfig};
