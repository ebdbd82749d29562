//! Copy-move forgery detection: a hierarchical Transformer encoder, a
//! self-correlation decoder, pooled cube/strip distillation losses for
//! continual learning, a synthetic forgery generator and the training /
//! evaluation harness around them.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod harness;
pub(crate) mod kernels;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod pcsd;
pub mod synth;
pub mod tensor;
pub mod types;

pub use autograd::{Gradients, Graph, Var};
pub use error::{Error, Result};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::ModelConfig;
pub use kernels::cycle_offset;
pub use model::Model;
pub use nn::Params;
pub use tensor::{DType, Float, Tensor};
pub use types::{GroundTruthMask, ImageTensor};
