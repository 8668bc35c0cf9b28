//! Run outputs: parameter and gradient rasters, hydrographs, metrics and the
//! cost-descent trace.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{fmt_f64, write_raster, IoError, Raster};
use crate::mesh::Mesh;

const NODATA: f64 = -9999.0;

/// Observed and simulated discharge at one gauge after warm-up.
#[derive(Debug, Clone, PartialEq)]
pub struct GaugeHydrograph {
    pub name: String,
    /// Index of the first row in the full horizon.
    pub start: usize,
    pub observed: Vec<f64>,
    pub simulated: Vec<f64>,
}

/// Scores of one gauge over one evaluation window.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowMetrics {
    pub window: String,
    pub gauge: String,
    /// Sample bounds within the full horizon.
    pub start: usize,
    pub end: usize,
    pub nse: Option<f64>,
    pub kge: Option<f64>,
}

/// One optimizer iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRecord {
    pub iteration: usize,
    pub cost: f64,
    pub best: f64,
    pub projected_gradient: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutputs {
    /// `(name, field over active cells)`
    pub parameters: Vec<(String, Vec<f64>)>,
    /// `(name, dJ/dtheta over active cells)`
    pub gradients: Vec<(String, Vec<f64>)>,
    pub hydrographs: Vec<GaugeHydrograph>,
    pub metrics: Vec<WindowMetrics>,
    pub trace: Vec<TraceRecord>,
    /// Serialized control, written verbatim.
    pub control: Option<String>,
}

fn write_text(path: &Path, text: &str) -> Result<(), IoError> {
    fs::File::create(path)
        .and_then(|mut f| f.write_all(text.as_bytes()))
        .map_err(|e| IoError::io(path, e))
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NaN".to_string(), fmt_f64)
}

fn field_raster(mesh: &Mesh, field: &[f64]) -> Raster {
    Raster::new(mesh.geometry().clone(), NODATA, mesh.to_grid(field, NODATA))
}

/// Iteration, cost, best-so-far and projected-gradient columns.
pub fn write_trace(path: impl AsRef<Path>, trace: &[TraceRecord]) -> Result<(), IoError> {
    let mut s = String::from("iteration,cost,best,projected_gradient\n");
    for r in trace {
        s.push_str(&format!(
            "{},{},{},{}\n",
            r.iteration,
            fmt_f64(r.cost),
            fmt_f64(r.best),
            fmt_f64(r.projected_gradient)
        ));
    }
    write_text(path.as_ref(), &s)
}

/// Writes every output file under `dir`, creating it if needed.
///
/// Layout: `<param>.asc`, `grad_<param>.asc`, `hydrograph_<gauge>.csv`,
/// `metrics.csv`, `trace.csv` and `control.txt`.
pub fn write_outputs(dir: impl AsRef<Path>, mesh: &Mesh, out: &RunOutputs) -> Result<(), IoError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| IoError::io(dir, e))?;
    for (name, field) in &out.parameters {
        write_raster(dir.join(format!("{name}.asc")), &field_raster(mesh, field))?;
    }
    for (name, field) in &out.gradients {
        write_raster(dir.join(format!("grad_{name}.asc")), &field_raster(mesh, field))?;
    }
    for h in &out.hydrographs {
        let mut s = String::from("step,observed,simulated\n");
        for (i, (o, q)) in h.observed.iter().zip(&h.simulated).enumerate() {
            s.push_str(&format!("{},{},{}\n", h.start + i, fmt_f64(*o), fmt_f64(*q)));
        }
        write_text(&dir.join(format!("hydrograph_{}.csv", h.name)), &s)?;
    }
    let mut s = String::from("window,gauge,start,end,nse,kge\n");
    for m in &out.metrics {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            m.window,
            m.gauge,
            m.start,
            m.end,
            opt(m.nse),
            opt(m.kge)
        ));
    }
    write_text(&dir.join("metrics.csv"), &s)?;
    write_trace(dir.join("trace.csv"), &out.trace)?;
    if let Some(control) = &out.control {
        write_text(&dir.join("control.txt"), control)?;
    }
    Ok(())
}
