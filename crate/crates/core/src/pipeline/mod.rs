//! End-to-end model assembly, data, training, evaluation and persistence.

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod io;
pub mod metrics;
pub mod model;
pub mod plot;
pub mod synth;
pub mod train;

pub use config::{Config, PsnmStreams};
pub use model::{prepare, Outputs, Prepared, Sample, Spsn};
