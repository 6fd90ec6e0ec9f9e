//! Side token adaptation on a neighborhood graph (STAG) for frozen
//! point-cloud Transformers.
//!
//! The crate is organised bottom-up:
//!
//! * [`matrix`] and [`tape`]: dense matrices and a reverse-mode tape whose
//!   backward pass never visits nodes that cannot reach a tunable parameter.
//! * [`geometry`]: normalization, augmentation, farthest point sampling,
//!   patch grouping and the kNN graph over patch centers.
//! * [`backbone`]: the frozen tokenizer and pre-norm Transformer.
//! * [`side`]: the side network (accumulation and modulation blocks,
//!   graph refinement functions, parameter sharing).
//! * [`train`]: prediction head, loss, AdamW, cosine schedule, fine-tuning loop.
//! * [`accounting`]: analytic parameter, FLOP and memory accounting.
//! * [`weights`]: the flat binary parameter format.

pub mod accounting;
pub mod backbone;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod matrix;
pub mod model;
pub mod params;
pub mod real;
pub mod rng;
pub mod side;
pub mod tape;
pub mod train;
pub mod weights;

pub use error::{Error, Result};
pub use matrix::Matrix;
pub use real::{Precision, Real};
pub use rng::RngStream;
