//! Video frame interpolation with cross-scale window attention.
//!
//! The crate is layered bottom-up:
//!
//! * [`tensor`]: dense arrays, a define-by-run autodiff tape, AdamW.
//! * [`warp`]: bilinear backward warping, reflection padding, flow rescaling.
//! * [`window`]: window partitioning for window attention and its
//!   overlapping half-scale counterpart.
//! * [`nn`]: convolution, linear and normalization layers over a parameter store.
//! * [`attention`]: window attention, cross-scale window attention, and the
//!   transformer layer/block built from them.
//! * [`flow`]: coarse flow prediction plus bilateral local refinement.
//! * [`model`]: encoder, flow, transformer UNet, synthesis, recursion.
//! * [`loss`]: reconstruction, census and distillation losses.
//! * [`erf`]: effective receptive field probes.
//! * [`synth`]: synthetic triplets with exact flows, and image metrics.
//! * [`io`]: `.flo`, PNG/PPM, checkpoints.
//! * [`cli`]: the command-line front end.

pub mod attention;
pub mod cli;
pub mod config;
pub mod erf;
pub mod error;
pub mod flow;
pub mod io;
pub mod loss;
pub mod model;
pub mod nn;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod warp;
pub mod window;

pub use error::{Error, Result};
pub use tensor::{Graph, ParamStore, Real, Tensor, Var};
