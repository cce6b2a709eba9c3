//! Differentiable center sampling for masked point-cloud pretraining.
//!
//! A learned sampler replaces farthest point sampling when picking patch
//! centers, so the centers take part in the loss and the gradient:
//!
//! 1. [`sampler`] maps each cloud onto a canonical sphere (encoder/decoder),
//!    learns a soft partition of the sphere into groups, and reuses that
//!    network with Gumbel-softmax weights to place centers on raw clouds.
//! 2. [`backbone`] is a small masked autoencoder over the resulting patches,
//!    plus a classification head.
//! 3. [`pipeline`] runs the staged training, finetuning, few-shot evaluation
//!    and baseline comparisons.
//!
//! Everything sits on the reverse-mode tape in [`tensor`]; [`geometry`]
//! holds the non-learned kernels (FPS, Chamfer, EMD, grouping).

pub mod backbone;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod io;
pub mod pipeline;
pub mod rng;
pub mod sampler;
pub mod tensor;

pub use error::{Error, Result};
