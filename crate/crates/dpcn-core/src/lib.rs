//! Few-shot segmentation engine built around dynamic prototype
//! convolution: a small reverse-mode tensor core, a synthetic episode
//! benchmark, the model pipeline (support activation, feature
//! filtering, dynamic convolution, decoder), episodic training with a
//! dual-direction loss, and evaluation/ablation tooling.

pub mod ablate;
pub mod config;
pub mod dcm;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod ffm;
pub mod gradcheck;
pub mod io;
pub mod model;
pub mod pipeline;
pub mod sam;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use config::Config;
pub use error::{Error, Result};
pub use model::ModelParams;
pub use tape::{GradTape, ValId};
pub use tensor::Tensor;
