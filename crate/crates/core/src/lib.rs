//! Uncertainty-aware ensemble deep kernel learning for HTTP payload
//! classification.
//!
//! The pipeline normalizes and tokenizes payloads ([`prep`]), encodes them with
//! a transformer encoder and attention pooling ([`encoder`]), passes the pooled
//! representation through a sparse variational Gaussian-process layer
//! ([`svgp`]) and a Monte-Carlo softmax head ([`base_learner`]), and finally
//! combines several independently trained base learners with an
//! uncertainty-aware attention ensemble ([`ensemble`]). [`metrics`] holds the
//! evaluation suite including the high-uncertainty-ratio / F-score curve.

pub mod autograd;
pub mod base_learner;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod encoder;
pub mod ensemble;
pub mod error;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod prediction;
pub mod prep;
pub mod svgp;
pub mod synth;

pub use error::{Error, Result};
