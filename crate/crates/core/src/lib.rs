//! SAR-guided cloud removal for multispectral optical imagery.
//!
//! The crate is layered bottom-up: [`tensor`] and [`autograd`] provide a small
//! CPU tensor library with reverse-mode differentiation, [`attention`] and
//! [`blocks`] build the fusion blocks on top of it, and [`network`] assembles
//! the full model. [`data`] generates and stores paired scenes, [`metrics`]
//! scores predictions, and [`training`] with [`checkpoint`] runs and resumes
//! optimization.

pub mod attention;
pub mod autograd;
pub mod blocks;
pub mod checkpoint;
pub mod data;
pub mod error;
mod fused;
mod kernels;
pub mod layers;
pub mod metrics;
pub mod network;
pub mod params;
pub mod tensor;
pub mod training;

pub use autograd::{Gradients, Graph, Var};
pub use error::{Error, Result};
pub use network::{count_params, GlfcrModel, ModelConfig, Variant};
pub use params::{ParamId, ParamStore};
pub use tensor::{DType, Element, Tensor};
