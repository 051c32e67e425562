//! Joint space-time video super-resolution.
//!
//! A low-resolution, low-frame-rate clip is treated as a cuboid, cut into
//! slice images along its three axes, and each slice set is enhanced by its
//! own feature branch. The branches are reconstructed with 3-D convolutions,
//! fused, and refined frame by frame, producing `2N - 1` frames at four
//! times the spatial resolution.
//!
//! The crate carries its own small reverse-mode autograd engine
//! ([`tensor`]) so training, evaluation and the network all run in pure
//! Rust at 64-bit precision.

pub mod cli;
pub mod error;
pub mod net;
pub mod quality;
pub mod train;
pub mod tensor;
pub mod video;

pub use error::{Error, Result};
