//! Few-shot speech emotion recognition by meta-learning with fixed classes.
//!
//! [`tensor`] holds the differentiable numerics, [`audio`] the MFCC front end
//! and synthetic corpus, [`episodes`] the task sampler, [`meta`] the learners
//! and evaluation protocol, and [`harness`] the experiment runner.

pub mod audio;
pub mod episodes;
pub mod error;
pub mod harness;
pub mod meta;
pub mod model;
pub mod rng;
pub mod tensor;

pub use audio::{FeatureClip, MfccConfig, Waveform};
pub use episodes::{DatasetRegistry, Episode, EpisodeSpec, InputShape};
pub use error::{Error, Result};
pub use harness::{ExperimentConfig, ExperimentReport, Method};
pub use meta::{GradMode, TrainConfig, Variant};
pub use model::{Model, ModelConfig};
pub use tensor::{ParamSet, Tensor};
