//! Audio beat matching: predict, per fixed-duration time unit of a music
//! track, whether a video transition belongs right after that unit.
//!
//! Pipeline: [`audio`] segments a waveform into time units, [`features`]
//! extracts per-unit descriptors, [`context`] fuses local windows,
//! [`attention`] fuses globally in linear time, and [`model`] assembles the
//! BeatX network plus comparison baselines. [`scope`] builds the Gaussian
//! label-scope loss, [`metrics`] implements hit@k evaluation, [`synth`]
//! generates labeled click-track audio and [`train`] runs training,
//! ablations and throughput benchmarks.

pub mod attention;
pub mod audio;
pub mod cli;
pub mod context;
pub mod error;
pub mod features;
mod layers;
pub mod model;
pub mod metrics;
pub mod scope;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
