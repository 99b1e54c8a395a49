//! Spiking dictionary learning.
//!
//! A two-layer integrate-and-fire network performs non-negative sparse coding
//! at its limit points. Running it twice, without and with top-down feedback,
//! exposes the dictionary gradient in the input-layer spike rates, which lets
//! every neuron update its own row of weights from local information only.
//!
//! Module map:
//! - [`model`]: shared types and weight construction
//! - [`engine`]: fixed-step network simulation
//! - [`coding`]: sparse coding with the network
//! - [`learning`]: contrastive runs, gradients and local updates
//! - [`oracle`]: coordinate-descent solver and the SGD baseline
//! - [`data`]: image and patch I/O, preprocessing, noise
//! - [`metrics`]: consistency, symmetry, PSNR, denoising, atlases
//! - [`report`]: CSV / JSON-lines / SVG output

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod coding;
pub mod data;
pub mod engine;
pub mod error;
pub mod learning;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod oracle;
pub mod report;
pub mod rng;

pub use error::{Error, Layer, Result};
pub use model::{
    validate, weights_from_dictionary, AvgReset, Dictionary, InitScheme, NetworkWeights,
    NeuronState, PhaseSnapshot, RunConfig,
};
