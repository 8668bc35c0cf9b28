//! File formats: rasters, forcings, descriptors, gauge observations, run
//! configuration and run outputs.

mod config;
mod descriptors;
mod forcing;
mod observations;
mod output;
mod raster;

pub use config::{
    BoundsConfig, DataConfig, DescriptorEntry, GaugeConfig, GaugeRole, MappingConfig, MappingKind,
    OptimizerSection, OutputConfig, RunConfig, TimeConfig, TwinSection,
};
pub use descriptors::{load_descriptors, normalize_descriptors, DescriptorStack};
pub use forcing::{load_forcings, write_forcings, ForcingSet, Storage};
pub use observations::{read_observations, write_observations, ObservationTable};
pub use output::{
    write_outputs, write_trace, GaugeHydrograph, RunOutputs, TraceRecord, WindowMetrics,
};
pub use raster::{read_raster, write_raster, Raster};

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("{what}: shape mismatch, expected {expected} got {actual}")]
    ShapeMismatch {
        what: String,
        expected: String,
        actual: String,
    },
    #[error("negative {variable} value {value} at step {step}")]
    NegativeForcing {
        variable: &'static str,
        step: usize,
        value: f64,
    },
    #[error("{variable}: dense storage is missing step {step}")]
    MissingTimestep { variable: &'static str, step: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
}

impl IoError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        IoError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, msg: impl Into<String>) -> Self {
        IoError::Parse {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }
}

/// Shortest decimal representation that parses back to the same `f64`.
pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}
