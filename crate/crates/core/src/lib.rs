//! Thunder: a lightweight wavelet-domain denoising network.
//!
//! The crate is organized bottom-up: a small reverse-mode autodiff engine over
//! dense NCHW tensors (`tensor`), orthonormal Haar transforms (`wavelet`), the
//! network building blocks (`blocks`), the full two-stage model (`network`),
//! training objectives and image metrics (`loss`), synthetic data and PPM I/O
//! (`data`), the optimizer/training loop/checkpoints (`train`), and cost and
//! subspace analysis tools (`analysis`).

pub mod analysis;
pub mod blocks;
pub mod data;
pub mod loss;
pub mod network;
pub mod tensor;
pub mod train;
pub mod wavelet;

pub use tensor::{Scalar, Shape, Tensor, TensorError};
