//! Cross-layer feature pyramid network for salient object detection.
//!
//! The crate carries its own small tensor type and a tape-based reverse-mode
//! autodiff engine, a compact convolutional backbone producing a five-level
//! pyramid, cross-layer feature aggregation and distribution modules, an
//! FPN-style decoder, training with balanced BCE and Adam, and the usual
//! saliency metrics.
//!
//! ```no_run
//! use cfpn::{predict, ModelConfig, Tensor};
//!
//! let config = ModelConfig::default();
//! let params = config.init_params(0);
//! let image = Tensor::zeros(&[3, 96, 96]);
//! let pred = predict(&params, &config, &image).unwrap();
//! assert_eq!(pred.local.shape(), &[1, 96, 96]);
//! ```

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autograd;
pub mod backbone;
pub mod cfa;
pub mod cfd;
pub mod data_io;
pub mod decoder;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod params;
pub mod tensor;
pub mod training;

pub use autograd::{Gradients, Tape, Var};
pub use backbone::{BackboneConfig, FeatureMap, FeaturePyramid};
pub use cfa::CfaVariant;
pub use cfd::CfdConfig;
pub use error::{Error, Result};
pub use metrics::{evaluate, Aggregation, EvalReport};
pub use model::{forward, predict, ModelConfig, Prediction};
pub use params::{Ctx, Mode, ModelParams};
pub use tensor::Tensor;
pub use training::{train, SaliencySample, TrainConfig};
