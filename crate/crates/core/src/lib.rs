//! Gaze estimation with pure and hybrid vision transformers.
//!
//! The crate is self-contained: a dense `f64` tensor type with reverse-mode
//! autodiff ([`autodiff`]), the layers needed by the models ([`nn`],
//! [`transformer`]), the four model variants ([`models`]), an L1/Adam training
//! engine ([`train`]), angular-error metrics and a synthetic face dataset
//! ([`gaze`], [`data`]), checkpoints ([`checkpoint`]), paired ablation runs
//! ([`ablation`]) and a finite-difference gradient checker ([`gradcheck`]).

pub mod ablation;
pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gaze;
pub mod gradcheck;
mod kernels;
pub mod models;
pub mod nn;
pub mod params;
pub mod tensor;
pub mod train;
pub mod transformer;

pub use autodiff::{Gradients, Graph, Var};
pub use error::Error;
pub use params::{ParamId, ParamStore};
pub use tensor::{Tensor, TensorError};
