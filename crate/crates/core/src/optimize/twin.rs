//! Synthetic twin problems: a known truth is pushed through the forward
//! model to produce the observations a calibration must explain.

use std::fs;
use std::path::{Path, PathBuf};

use rand::distributions::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::calibration::{Dataset, GaugeSpec, RunError};
use crate::hydro::{simulate, ParameterFields, StateFields, PARAM_NAMES};
use crate::io::{
    normalize_descriptors, write_forcings, write_observations, write_raster, DataConfig,
    DescriptorEntry, DescriptorStack, ForcingSet, GaugeConfig, GaugeRole, IoError,
    ObservationTable, OutputConfig, Raster, RunConfig, Storage,
};
use crate::mesh::{CellCoord, GridGeometry, Mesh};
use crate::regio::{
    inverse_sigmoid_scale, map_control, sigmoid_scale, write_control, Bounds, PolynomialControl,
    RegionalControl,
};

/// Family of the generating parameter fields.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TwinTruth {
    Uniform,
    /// Multi-linear control over every descriptor.
    Linear,
    /// Smooth non-monotone function of the first two descriptors.
    Nonlinear,
}

impl TwinTruth {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "uniform" => Some(Self::Uniform),
            "linear" => Some(Self::Linear),
            "nonlinear" => Some(Self::Nonlinear),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwinSpec {
    pub seed: u64,
    pub nrows: usize,
    pub ncols: usize,
    pub nt: usize,
    pub n_descriptors: usize,
    pub truth: TwinTruth,
    /// Standard deviation of the multiplicative observation noise.
    pub noise: f64,
    pub n_calibration: usize,
    pub n_validation: usize,
    pub dx: f64,
    pub dt: f64,
    pub bounds: Bounds,
}

impl Default for TwinSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            nrows: 16,
            ncols: 16,
            nt: 720,
            n_descriptors: 3,
            truth: TwinTruth::Linear,
            noise: 0.0,
            n_calibration: 3,
            n_validation: 1,
            dx: 1000.0,
            dt: 3600.0,
            bounds: Bounds::hydro_default(),
        }
    }
}

impl TwinSpec {
    pub fn from_config(cfg: &RunConfig) -> Result<Self, RunError> {
        let t = cfg
            .twin
            .as_ref()
            .ok_or_else(|| RunError::Input("config has no [twin] section".into()))?;
        let truth = TwinTruth::parse(&t.truth)
            .ok_or_else(|| RunError::Input(format!("unknown twin truth `{}`", t.truth)))?;
        Ok(Self {
            seed: cfg.seed,
            nrows: t.nrows,
            ncols: t.ncols,
            nt: t.nt,
            n_descriptors: t.n_descriptors,
            truth,
            noise: t.noise,
            n_calibration: t.n_calibration,
            n_validation: t.n_validation,
            dx: t.dx,
            dt: t.dt,
            bounds: cfg.bounds.to_bounds()?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct TwinProblem {
    pub spec: TwinSpec,
    pub dataset: Dataset,
    pub truth_params: ParameterFields,
    /// Generating control for uniform and linear truths.
    pub truth_control: Option<RegionalControl>,
    /// Noise-free discharge at each gauge.
    pub clean: Vec<Vec<f64>>,
}

/// Typical hourly parameter values the truths vary around.
const REFERENCE: [f64; 4] = [200.0, 80.0, -0.5, 60.0];

/// Spread of the truth around [`REFERENCE`], in sigmoid space.
const SPREAD: [f64; 4] = [1.0, 1.0, 0.02, 1.0];

/// Bounds whose sigmoid-space centre is the reference parameter set.
///
/// Positive parameters get `(1e-6, 2 * reference)`, the exchange term keeps
/// the default symmetric range. A freshly initialized network then starts
/// near the truth's mean level instead of the middle of a wide default box.
pub fn centred_bounds() -> Bounds {
    Bounds::new(vec![
        (1e-6, 2.0 * REFERENCE[0]),
        (1e-6, 2.0 * REFERENCE[1]),
        (-50.0, 50.0),
        (1e-6, 2.0 * REFERENCE[3]),
    ])
    .expect("reference is positive")
}

/// Strictly downhill D8 directions towards a single outlet on the south edge.
fn synthetic_flowdir(rng: &mut ChaCha8Rng, nrows: usize, ncols: usize) -> Vec<i64> {
    let outlet = ((nrows - 1) as f64, (ncols / 2) as f64);
    let jitter = Uniform::new(0.0, 0.3);
    let z: Vec<f64> = (0..nrows * ncols)
        .map(|i| {
            let (r, c) = ((i / ncols) as f64, (i % ncols) as f64);
            ((r - outlet.0).powi(2) + (c - outlet.1).powi(2)).sqrt() + jitter.sample(rng)
        })
        .collect();
    let offsets: [(i64, i64); 8] = [(-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1)];
    let mut codes = vec![0i64; nrows * ncols];
    let outlet_flat = (nrows - 1) * ncols + ncols / 2;
    for i in 0..nrows * ncols {
        if i == outlet_flat {
            continue;
        }
        let (r, c) = ((i / ncols) as i64, (i % ncols) as i64);
        let mut best = (0.0, 0i64);
        for (k, (dr, dc)) in offsets.iter().enumerate() {
            let (nr, nc) = (r + dr, c + dc);
            if nr < 0 || nc < 0 || nr >= nrows as i64 || nc >= ncols as i64 {
                continue;
            }
            let j = nr as usize * ncols + nc as usize;
            let dist = if dr.abs() + dc.abs() == 2 { 2f64.sqrt() } else { 1.0 };
            let slope = (z[i] - z[j]) / dist;
            if slope > best.0 {
                best = (slope, k as i64 + 1);
            }
        }
        codes[i] = best.1;
    }
    codes
}

/// Sum of a few low-frequency waves over the grid.
fn smooth_field(rng: &mut ChaCha8Rng, mesh: &Mesh) -> Vec<f64> {
    let (nr, nc) = (mesh.nrows() as f64, mesh.ncols() as f64);
    let waves: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            (
                rng.gen_range(0.2..1.0),
                rng.gen_range(-1.5..1.5),
                rng.gen_range(-1.5..1.5),
                rng.gen_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    (0..mesh.n_cells())
        .map(|k| {
            let c = mesh.coord(k);
            let (y, x) = (c.row as f64 / nr, c.col as f64 / nc);
            waves
                .iter()
                .map(|&(a, kx, ky, ph)| a * (std::f64::consts::PI * (kx * x + ky * y) + ph).sin())
                .sum()
        })
        .collect()
}

/// Moving Gaussian storms over a diurnal evaporation cycle.
fn synthetic_forcing(rng: &mut ChaCha8Rng, mesh: &Mesh, spec: &TwinSpec) -> Result<ForcingSet, IoError> {
    let n = mesh.n_cells();
    let (nr, nc) = (mesh.nrows() as f64, mesh.ncols() as f64);
    let hours = spec.dt / 3600.0;
    let mut rain = vec![vec![0.0; n]; spec.nt];
    let mut t = rng.gen_range(0..(24.0 / hours).ceil() as usize + 1);
    while t < spec.nt {
        let duration = ((rng.gen_range(6.0..20.0)) / hours).ceil() as usize;
        let peak = rng.gen_range(2.0..8.0) * hours;
        let radius = rng.gen_range(0.3..0.7) * nr.max(nc);
        let (r0, c0) = (rng.gen_range(-0.2..1.2) * nr, rng.gen_range(-0.2..1.2) * nc);
        let (vr, vc) = (rng.gen_range(-0.6..0.6) * hours, rng.gen_range(-0.6..0.6) * hours);
        for s in 0..duration.min(spec.nt - t) {
            let phase = (std::f64::consts::PI * (s as f64 + 0.5) / duration as f64).sin();
            let (rc, cc) = (r0 + vr * s as f64, c0 + vc * s as f64);
            for (k, v) in rain[t + s].iter_mut().enumerate() {
                let cell = mesh.coord(k);
                let d2 = (cell.row as f64 - rc).powi(2) + (cell.col as f64 - cc).powi(2);
                let p = peak * phase * (-d2 / (2.0 * radius * radius)).exp();
                if p > 1e-3 {
                    *v += p;
                }
            }
        }
        t += duration + ((rng.gen_range(24.0..96.0)) / hours).ceil() as usize;
    }
    let pet: Vec<Vec<f64>> = (0..spec.nt)
        .map(|t| {
            let hour = (t as f64 * hours) % 24.0;
            let e = 0.25 * hours * (std::f64::consts::PI * (hour - 6.0) / 12.0).sin().max(0.0);
            vec![e; n]
        })
        .collect();
    let dense = ForcingSet::new(spec.dt, spec.nt, n, Storage::Dense(rain), Storage::Dense(pet))?;
    Ok(dense.to_sparse())
}

fn truth_fields(
    rng: &mut ChaCha8Rng,
    spec: &TwinSpec,
    desc: &[Vec<f64>],
    n_cells: usize,
) -> Result<(ParameterFields, Option<RegionalControl>), RunError> {
    let b = &spec.bounds;
    for (k, &v) in REFERENCE.iter().enumerate() {
        if !b.contains(k, v) {
            return Err(RunError::Input(format!(
                "twin bounds must contain the reference {} = {v}",
                PARAM_NAMES[k]
            )));
        }
    }
    match spec.truth {
        TwinTruth::Uniform => {
            let c = RegionalControl::Uniform(REFERENCE.to_vec());
            Ok((map_control(&c, desc, b, n_cells)?, Some(c)))
        }
        TwinTruth::Linear => {
            let nd = desc.len();
            let mut p = PolynomialControl::zeros(4, nd, true);
            for k in 0..4 {
                let (l, u) = b.get(k);
                for d in 0..nd {
                    p.coef[k * nd + d] = SPREAD[k] * rng.gen_range(-1.0..1.0);
                }
                let mean_shift: f64 = (0..nd).map(|d| 0.5 * p.coef[k * nd + d]).sum();
                p.intercept[k] = inverse_sigmoid_scale(REFERENCE[k], l, u) - mean_shift;
            }
            let c = RegionalControl::Polynomial(p);
            Ok((map_control(&c, desc, b, n_cells)?, Some(c)))
        }
        TwinTruth::Nonlinear => {
            if desc.len() < 2 {
                return Err(RunError::Input("nonlinear truth needs two descriptors".into()));
            }
            let centre: Vec<(f64, f64)> = (0..4)
                .map(|_| (rng.gen_range(0.3..0.7), rng.gen_range(0.3..0.7)))
                .collect();
            let fields = std::array::from_fn(|k| {
                let (l, u) = b.get(k);
                let z0 = inverse_sigmoid_scale(REFERENCE[k], l, u);
                let (c1, c2) = centre[k];
                (0..n_cells)
                    .map(|x| {
                        let (d1, d2) = (desc[0][x], desc[1][x]);
                        let bump = (-((d1 - c1).powi(2) + (d2 - c2).powi(2)) / 0.08).exp();
                        sigmoid_scale(z0 + 1.6 * SPREAD[k] * (bump - 0.4), l, u)
                    })
                    .collect()
            });
            Ok((ParameterFields::new(fields), None))
        }
    }
}

/// Largest non-overlapping sub-catchments within an area window.
fn select_gauges(mesh: &Mesh, count: usize) -> Vec<usize> {
    let n = mesh.n_cells();
    let area = mesh.drainage_area();
    let (lo, hi) = ((n / 25).max(2), (n / 5).max(3));
    let mut candidates: Vec<usize> = (0..n).filter(|&k| (lo..=hi).contains(&area[k])).collect();
    candidates.sort_by(|&a, &b| area[b].cmp(&area[a]).then(a.cmp(&b)));
    let mut taken = vec![false; n];
    let mut chosen = Vec::new();
    for k in candidates {
        if chosen.len() == count {
            break;
        }
        let mask = &mesh.delineate(&[mesh.coord(k)]).expect("active cell")[0];
        let mut covers_downstream = false;
        let mut d = mesh.downstream(k);
        while let Some(c) = d {
            covers_downstream |= taken[c];
            d = mesh.downstream(c);
        }
        if covers_downstream || mask.iter().zip(&taken).any(|(m, t)| *m && *t) {
            continue;
        }
        for (t, m) in taken.iter_mut().zip(mask) {
            *t |= *m;
        }
        chosen.push(k);
    }
    chosen
}

/// Deterministic synthetic problem for `spec`.
pub fn twin_generate(spec: &TwinSpec) -> Result<TwinProblem, RunError> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let geometry = GridGeometry::new(spec.nrows, spec.ncols, spec.dx);
    let codes = synthetic_flowdir(&mut rng, spec.nrows, spec.ncols);
    let mesh = Mesh::build(geometry, &codes, &vec![true; spec.nrows * spec.ncols], spec.dx)?;

    let names: Vec<String> = (1..=spec.n_descriptors).map(|d| format!("d{d}")).collect();
    let raw: Vec<Vec<f64>> = (0..spec.n_descriptors).map(|_| smooth_field(&mut rng, &mesh)).collect();
    let descriptors = normalize_descriptors(DescriptorStack::from_raw(names, raw));

    let forcing = synthetic_forcing(&mut rng, &mesh, spec)?;
    let (truth_params, truth_control) =
        truth_fields(&mut rng, spec, &descriptors.normalized, mesh.n_cells())?;

    let n_gauges = spec.n_calibration + spec.n_validation;
    let cells = select_gauges(&mesh, n_gauges);
    if cells.len() < n_gauges {
        return Err(RunError::Input(format!(
            "grid fits only {} separate gauged catchments, {n_gauges} requested",
            cells.len()
        )));
    }
    let sim = simulate(
        &mesh,
        &truth_params,
        &forcing,
        &StateFields::initial(&truth_params),
        &cells,
    );
    let clean = sim.discharge;
    let observed: Vec<Vec<f64>> = clean
        .iter()
        .map(|q| {
            q.iter()
                .map(|&v| {
                    if spec.noise > 0.0 {
                        let e: f64 = rng.sample(StandardNormal);
                        (v * (1.0 + spec.noise * e)).max(0.0)
                    } else {
                        v
                    }
                })
                .collect()
        })
        .collect();

    let gauges: Vec<GaugeSpec> = cells
        .iter()
        .enumerate()
        .map(|(i, &k)| GaugeSpec {
            name: format!("g{}", i + 1),
            cell: mesh.coord(k),
            role: if i < spec.n_calibration {
                GaugeRole::Calibration
            } else {
                GaugeRole::Validation
            },
        })
        .collect();
    let observations = ObservationTable {
        times: (0..spec.nt).map(|t| t.to_string()).collect(),
        names: gauges.iter().map(|g| g.name.clone()).collect(),
        series: observed,
    };
    Ok(TwinProblem {
        spec: spec.clone(),
        dataset: Dataset {
            mesh,
            forcing,
            descriptors,
            observations,
            gauges,
        },
        truth_params,
        truth_control,
        clean,
    })
}

fn field_raster(mesh: &Mesh, field: &[f64]) -> Raster {
    Raster::new(mesh.geometry().clone(), -9999.0, mesh.to_grid(field, -9999.0))
}

/// Writes the problem's inputs, its truth, and a ready-to-run config
/// `calibrate.toml` into `dir`.
///
/// `template` provides mapping, bounds, optimizer and time settings; file
/// references in the written config are relative to `dir`.
pub fn write_twin(problem: &TwinProblem, template: &RunConfig, dir: &Path) -> Result<PathBuf, RunError> {
    fs::create_dir_all(dir).map_err(|e| IoError::io(dir, e))?;
    let data = &problem.dataset;
    let mesh = &data.mesh;
    let codes: Vec<f64> = (0..mesh.geometry().len())
        .map(|flat| f64::from(mesh.flowdir(mesh.geometry().coord(flat))))
        .collect();
    write_raster(
        dir.join("flowdir.asc"),
        &Raster::new(mesh.geometry().clone(), -9999.0, codes),
    )?;
    write_forcings(dir.join("forcing.txt"), mesh, &data.forcing)?;
    write_observations(dir.join("observations.csv"), &data.observations)?;
    let mut entries = Vec::new();
    for (name, layer) in data.descriptors.names.iter().zip(&data.descriptors.raw) {
        let file = format!("{name}.asc");
        write_raster(dir.join(&file), &field_raster(mesh, layer))?;
        entries.push(DescriptorEntry {
            name: name.clone(),
            path: PathBuf::from(file),
        });
    }
    for (name, field) in PARAM_NAMES.iter().zip(&problem.truth_params.fields) {
        write_raster(dir.join(format!("truth_{name}.asc")), &field_raster(mesh, field))?;
    }
    if let Some(c) = &problem.truth_control {
        let path = dir.join("truth_control.txt");
        fs::write(&path, write_control(c)).map_err(|e| IoError::io(&path, e))?;
    }

    let mut cfg = template.clone();
    cfg.twin = None;
    cfg.data = DataConfig {
        flowdir: "flowdir.asc".into(),
        forcing: "forcing.txt".into(),
        observations: "observations.csv".into(),
        descriptors: entries,
        dx: None,
    };
    cfg.gauges = data
        .gauges
        .iter()
        .map(|g| GaugeConfig {
            name: g.name.clone(),
            row: g.cell.row,
            col: g.cell.col,
            role: g.role,
        })
        .collect();
    cfg.output = OutputConfig {
        dir: "calibration".into(),
    };
    let path = dir.join("calibrate.toml");
    fs::write(&path, cfg.to_toml()).map_err(|e| IoError::io(&path, e))?;
    Ok(path)
}

/// Cell of gauge `name` in a generated problem.
pub fn gauge_cell(problem: &TwinProblem, name: &str) -> Option<CellCoord> {
    problem
        .dataset
        .gauges
        .iter()
        .find(|g| g.name == name)
        .map(|g| g.cell)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::nse;

    fn small() -> TwinSpec {
        TwinSpec {
            nrows: 10,
            ncols: 10,
            nt: 240,
            ..TwinSpec::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = twin_generate(&small()).unwrap();
        let b = twin_generate(&small()).unwrap();
        assert_eq!(a.dataset.observations, b.dataset.observations);
        assert_eq!(a.truth_params, b.truth_params);
        assert_eq!(a.dataset.forcing, b.dataset.forcing);
        let c = twin_generate(&TwinSpec { seed: 1, ..small() }).unwrap();
        assert_ne!(a.dataset.observations, c.dataset.observations);
    }

    #[test]
    fn gauges_are_separate_catchments() {
        let p = twin_generate(&small()).unwrap();
        let coords: Vec<CellCoord> = p.dataset.gauges.iter().map(|g| g.cell).collect();
        let masks = p.dataset.mesh.delineate(&coords).unwrap();
        for k in 0..p.dataset.mesh.n_cells() {
            assert!(masks.iter().filter(|m| m[k]).count() <= 1);
        }
        assert_eq!(p.dataset.gauges.len(), 4);
    }

    #[test]
    fn truth_scores_perfectly_without_noise() {
        let p = twin_generate(&small()).unwrap();
        for (q, o) in p.clean.iter().zip(&p.dataset.observations.series) {
            assert_eq!(q, o);
            assert_eq!(nse(q, o).unwrap(), 1.0);
        }
    }

    #[test]
    fn noise_floor() {
        let p = twin_generate(&TwinSpec { noise: 0.1, ..small() }).unwrap();
        for (q, o) in p.clean.iter().zip(&p.dataset.observations.series) {
            let s = nse(q, o).unwrap();
            assert!(s < 1.0 && s > 0.9, "{s}");
        }
    }

    #[test]
    fn storms_are_stored_sparsely() {
        let p = twin_generate(&small()).unwrap();
        let f = &p.dataset.forcing;
        assert!(f.stored_rain_grids() < f.nt());
        assert!(f.stored_rain_grids() > 0);
    }
}
