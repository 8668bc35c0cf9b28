//! Run configuration, a TOML file with sections.
//!
//! ```toml
//! seed = 7
//!
//! [data]
//! flowdir = "flowdir.asc"
//! forcing = "forcing.txt"
//! observations = "observations.csv"
//! descriptors = [{ name = "slope", path = "slope.asc" }]
//!
//! [[gauges]]
//! name = "g1"
//! row = 3
//! col = 4
//! role = "calibration"
//!
//! [mapping]
//! kind = "multi-linear"
//!
//! [bounds]
//! cp = [1e-6, 1000.0]
//!
//! [optimizer]
//! max_iterations = 250
//!
//! [time]
//! warmup = 100
//! split = 600
//!
//! [output]
//! dir = "out"
//! ```
//!
//! Relative paths are resolved against the directory holding the file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::IoError;
use crate::regio::Bounds;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MappingKind {
    Uniform,
    MultiLinear,
    Polynomial,
    Ann,
}

impl MappingKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MappingKind::Uniform => "uniform",
            MappingKind::MultiLinear => "multi-linear",
            MappingKind::Polynomial => "polynomial",
            MappingKind::Ann => "ann",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DescriptorEntry {
    pub name: String,
    pub path: PathBuf,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub flowdir: PathBuf,
    pub forcing: PathBuf,
    pub observations: PathBuf,
    #[serde(default)]
    pub descriptors: Vec<DescriptorEntry>,
    /// Cell size in metres; defaults to the flow-direction raster's cellsize.
    #[serde(default)]
    pub dx: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GaugeRole {
    Calibration,
    Validation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaugeConfig {
    pub name: String,
    pub row: usize,
    pub col: usize,
    pub role: GaugeRole,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MappingConfig {
    pub kind: MappingKind,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    /// Accept hidden layers wider than `sqrt(N_D * N_x)`.
    #[serde(default)]
    pub allow_wide_hidden: bool,
}

fn default_hidden() -> Vec<usize> {
    vec![96, 48, 16]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundsConfig {
    #[serde(default = "default_cp")]
    pub cp: [f64; 2],
    #[serde(default = "default_ct")]
    pub ct: [f64; 2],
    #[serde(default = "default_kexc")]
    pub kexc: [f64; 2],
    #[serde(default = "default_llr")]
    pub llr: [f64; 2],
}

fn default_cp() -> [f64; 2] {
    [1e-6, 1000.0]
}
fn default_ct() -> [f64; 2] {
    [1e-6, 1000.0]
}
fn default_kexc() -> [f64; 2] {
    [-50.0, 50.0]
}
fn default_llr() -> [f64; 2] {
    [1e-6, 1000.0]
}

impl Default for BoundsConfig {
    fn default() -> Self {
        Self {
            cp: default_cp(),
            ct: default_ct(),
            kexc: default_kexc(),
            llr: default_llr(),
        }
    }
}

impl BoundsConfig {
    pub fn to_bounds(&self) -> Result<Bounds, IoError> {
        Bounds::new(vec![
            (self.cp[0], self.cp[1]),
            (self.ct[0], self.ct[1]),
            (self.kexc[0], self.kexc[1]),
            (self.llr[0], self.llr[1]),
        ])
        .map_err(|e| IoError::Config(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSection {
    /// Quasi-Newton iteration budget (polynomial mappings).
    #[serde(default = "default_iters")]
    pub max_iterations: usize,
    /// Adam epoch budget (ANN mapping).
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    /// Quasi-Newton memory pairs.
    #[serde(default = "default_memory")]
    pub memory: usize,
    /// Run the global uniform search first and start from its result.
    #[serde(default = "default_true")]
    pub uniform_background: bool,
    /// Checkpoint interval of the adjoint sweep; defaults to `sqrt(nt)`.
    #[serde(default)]
    pub checkpoint_interval: Option<usize>,
}

fn default_iters() -> usize {
    250
}
fn default_epochs() -> usize {
    350
}
fn default_lr() -> f64 {
    0.003
}
fn default_memory() -> usize {
    10
}
fn default_true() -> bool {
    true
}

impl Default for OptimizerSection {
    fn default() -> Self {
        Self {
            max_iterations: default_iters(),
            epochs: default_epochs(),
            learning_rate: default_lr(),
            memory: default_memory(),
            uniform_background: true,
            checkpoint_interval: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeConfig {
    /// Steps excluded from every cost and metric.
    pub warmup: usize,
    /// First step of the validation period; the calibration period is
    /// `warmup..split`.
    pub split: usize,
    /// End of the validation period (defaults to the forcing length).
    #[serde(default)]
    pub end: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

/// Synthetic-problem settings read by the `twin` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TwinSection {
    #[serde(default = "default_twin_size")]
    pub nrows: usize,
    #[serde(default = "default_twin_size")]
    pub ncols: usize,
    #[serde(default = "default_twin_nt")]
    pub nt: usize,
    #[serde(default = "default_twin_nd")]
    pub n_descriptors: usize,
    /// `linear` or `nonlinear` truth.
    #[serde(default = "default_truth")]
    pub truth: String,
    /// Relative multiplicative noise on the observations.
    #[serde(default)]
    pub noise: f64,
    #[serde(default = "default_n_cal")]
    pub n_calibration: usize,
    #[serde(default = "default_n_val")]
    pub n_validation: usize,
    /// Cell size in metres.
    #[serde(default = "default_twin_dx")]
    pub dx: f64,
    /// Timestep in seconds.
    #[serde(default = "default_twin_dt")]
    pub dt: f64,
}

fn default_n_cal() -> usize {
    3
}
fn default_n_val() -> usize {
    1
}
fn default_twin_dx() -> f64 {
    1000.0
}
fn default_twin_dt() -> f64 {
    3600.0
}

fn default_twin_size() -> usize {
    16
}
fn default_twin_nt() -> usize {
    720
}
fn default_twin_nd() -> usize {
    3
}
fn default_truth() -> String {
    "linear".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    /// Input files; unused by twin-generation configs.
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub gauges: Vec<GaugeConfig>,
    pub mapping: MappingConfig,
    #[serde(default)]
    pub bounds: BoundsConfig,
    #[serde(default)]
    pub optimizer: OptimizerSection,
    pub time: TimeConfig,
    pub output: OutputConfig,
    #[serde(default)]
    pub twin: Option<TwinSection>,
}

impl RunConfig {
    pub fn parse(text: &str, base: &Path) -> Result<Self, IoError> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| IoError::Config(e.to_string()))?;
        cfg.resolve(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, IoError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| IoError::io(path, e))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::parse(&text, base)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() && !p.as_os_str().is_empty() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.data.flowdir);
        fix(&mut self.data.forcing);
        fix(&mut self.data.observations);
        for d in &mut self.data.descriptors {
            fix(&mut d.path);
        }
        fix(&mut self.output.dir);
    }

    fn validate(&self) -> Result<(), IoError> {
        self.bounds.to_bounds()?;
        if self.time.warmup >= self.time.split {
            return Err(IoError::Config(format!(
                "warm-up ({}) must end before the calibration period ends (split = {})",
                self.time.warmup, self.time.split
            )));
        }
        if let Some(end) = self.time.end {
            if end < self.time.split {
                return Err(IoError::Config("time.end precedes time.split".into()));
            }
        }
        if !(self.optimizer.learning_rate > 0.0) {
            return Err(IoError::Config("learning_rate must be positive".into()));
        }
        if self.optimizer.memory == 0 {
            return Err(IoError::Config("optimizer memory must be at least 1".into()));
        }
        if self.twin.is_some() {
            return Ok(());
        }
        if self.mapping.kind != MappingKind::Uniform && self.data.descriptors.is_empty() {
            return Err(IoError::Config(format!(
                "mapping `{}` needs at least one descriptor",
                self.mapping.kind.as_str()
            )));
        }
        if !self.gauges.iter().any(|g| g.role == GaugeRole::Calibration) {
            return Err(IoError::Config("no calibration gauge".into()));
        }
        Ok(())
    }

    pub fn calibration_gauges(&self) -> impl Iterator<Item = &GaugeConfig> {
        self.gauges.iter().filter(|g| g.role == GaugeRole::Calibration)
    }

    pub fn validation_gauges(&self) -> impl Iterator<Item = &GaugeConfig> {
        self.gauges.iter().filter(|g| g.role == GaugeRole::Validation)
    }
}
