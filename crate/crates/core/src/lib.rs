//! Stochastic subnetwork extraction from frozen-weight networks.
//!
//! The weights of a network are drawn once and never trained. What is
//! trained instead is a per-connection keep distribution: every weight gets a
//! latent logit `m̂`, a binary topology is sampled from it with the Gumbel-max
//! trick on the shifted logit pair `[m̂, 0]`, and gradients reach `m̂` through
//! the straight-through Gumbel-softmax surrogate. Each prunable layer can also
//! carry a learned scalar ("smart rescale") that multiplies its masked
//! weights, or the classic inverse-keep-rate rescale.
//!
//! Module map:
//!
//! - [`autodiff`]: dense `f32` arrays and a reverse-mode tape with the
//!   handful of operators the classifiers need.
//! - [`mask`]: Gumbel noise, straight-through sampling, thresholding.
//! - [`rescale`]: smart rescale, dynamic weight rescale, signed constant.
//! - [`nn`]: masked layers, networks, reference architectures, checkpoints.
//! - [`data`]: CIFAR binary loaders, synthetic tasks, augmentation.
//! - [`train`]: run configuration, SGD with momentum, the training loop and
//!   both evaluation modes.
//! - [`harness`]: the experiment front-end behind the `supermask` binary.
//! - [`verification`]: tape-free oracles (finite differences, Monte-Carlo,
//!   compacted subnetworks), behind the default `verification` feature.
//!
//! Runnable walkthroughs live in the crate's `examples/` directory.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod harness;
pub mod mask;
pub mod nn;
pub mod rescale;
pub mod rng;
pub mod train;
#[cfg(feature = "verification")]
pub mod verification;

pub use autodiff::{DenseArray, Gradients, Tape, Var};
pub use error::{Error, Result};
pub use mask::{MaskParameters, SampledTopology, TopologySampler};
pub use nn::{MaskSource, MaskedLayer, Network, NetworkOptions};
pub use rescale::{DwrReading, RescaleState, RescaleStrategy};
pub use train::{RunConfig, TrainOutcome, TrainRecord};
