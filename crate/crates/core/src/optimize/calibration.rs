use std::path::Path;

use log::info;
use thiserror::Error;

use super::{
    adam_train, global_uniform_search, quasi_newton_bounded, OptimTrace, OptimizeError,
    OptimizerConfig, SbsConfig, Termination,
};
use crate::adjoint::{cost, grad_theta, CheckpointPlan, CostGradientFields, HydroProblem};
use crate::cost::{kge, nse, CostSpec};
use crate::hydro::{simulate, ParameterFields, StateFields, PARAM_NAMES};
use crate::io::{
    load_descriptors, load_forcings, read_observations, read_raster, write_outputs,
    DescriptorStack, ForcingSet, GaugeHydrograph, GaugeRole, IoError, MappingKind,
    ObservationTable, RunConfig, RunOutputs, WindowMetrics,
};
use crate::mesh::{CellCoord, Gauge, GaugeSet, Mesh, MeshError};
use crate::regio::{
    check_hidden_widths, init_control, map_control, vjp, write_control, Bounds, ControlShape,
    RegioError, RegionalControl,
};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Regio(#[from] RegioError),
    #[error(transparent)]
    Optimize(#[from] OptimizeError),
    #[error("{0}")]
    Input(String),
}

impl RunError {
    /// `1` for unusable inputs, `2` for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Optimize(_) => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaugeSpec {
    pub name: String,
    pub cell: CellCoord,
    pub role: GaugeRole,
}

/// Everything a calibration run reads.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub mesh: Mesh,
    pub forcing: ForcingSet,
    pub descriptors: DescriptorStack,
    pub observations: ObservationTable,
    pub gauges: Vec<GaugeSpec>,
}

impl Dataset {
    /// Gauges of one role with observations truncated to `..end`.
    pub fn gauge_set(&self, role: GaugeRole, end: usize) -> Result<GaugeSet, RunError> {
        let mut gauges = Vec::new();
        for g in self.gauges.iter().filter(|g| g.role == role) {
            let series = self.observations.column(&g.name).ok_or_else(|| {
                RunError::Input(format!("no observations for gauge `{}`", g.name))
            })?;
            if series.len() < end {
                return Err(RunError::Input(format!(
                    "gauge `{}` has {} observations, need {end}",
                    g.name,
                    series.len()
                )));
            }
            gauges.push(Gauge {
                name: g.name.clone(),
                cell: g.cell,
                observed: series[..end].to_vec(),
                weight: 0.0,
            });
        }
        Ok(GaugeSet::equally_weighted(&self.mesh, gauges, Some(end))?)
    }
}

/// Warm-up, calibration period `warmup..split`, validation period
/// `split..end`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowPlan {
    pub warmup: usize,
    pub split: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSettings {
    pub kind: MappingKind,
    pub hidden: Vec<usize>,
    pub allow_wide_hidden: bool,
    pub bounds: Bounds,
    pub seed: u64,
    pub max_iterations: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub memory: usize,
    pub uniform_background: bool,
    pub checkpoint_interval: Option<usize>,
    pub windows: WindowPlan,
    pub sbs: SbsConfig,
}

impl CalibrationSettings {
    pub fn from_config(cfg: &RunConfig, nt: usize) -> Result<Self, RunError> {
        let end = cfg.time.end.unwrap_or(nt);
        if end > nt {
            return Err(RunError::Input(format!(
                "time.end = {end} exceeds the forcing length {nt}"
            )));
        }
        Ok(Self {
            kind: cfg.mapping.kind,
            hidden: cfg.mapping.hidden.clone(),
            allow_wide_hidden: cfg.mapping.allow_wide_hidden,
            bounds: cfg.bounds.to_bounds()?,
            seed: cfg.seed,
            max_iterations: cfg.optimizer.max_iterations,
            epochs: cfg.optimizer.epochs,
            learning_rate: cfg.optimizer.learning_rate,
            memory: cfg.optimizer.memory,
            uniform_background: cfg.optimizer.uniform_background,
            checkpoint_interval: cfg.optimizer.checkpoint_interval,
            windows: WindowPlan {
                warmup: cfg.time.warmup,
                split: cfg.time.split,
                end,
            },
            sbs: SbsConfig::default(),
        })
    }
}

/// Calibration cost as a function of a flattened control.
pub struct ControlObjective<'a> {
    pub problem: HydroProblem<'a>,
    pub descriptors: &'a [Vec<f64>],
    pub bounds: &'a Bounds,
    pub template: RegionalControl,
    pub plan: CheckpointPlan,
}

impl ControlObjective<'_> {
    pub fn params(&self, flat: &[f64]) -> Result<ParameterFields, OptimizeError> {
        let control = self.template.with_flat(flat)?;
        Ok(map_control(
            &control,
            self.descriptors,
            self.bounds,
            self.problem.mesh.n_cells(),
        )?)
    }

    pub fn value(&self, flat: &[f64]) -> Result<f64, OptimizeError> {
        Ok(cost(&self.problem, &self.params(flat)?)?)
    }

    /// `J` and `dJ/drho`.
    pub fn value_and_grad(&self, flat: &[f64]) -> Result<(f64, Vec<f64>), OptimizeError> {
        let control = self.template.with_flat(flat)?;
        let params = map_control(
            &control,
            self.descriptors,
            self.bounds,
            self.problem.mesh.n_cells(),
        )?;
        let g = grad_theta(&self.problem, &params, self.plan)?;
        let grad = vjp(&control, self.descriptors, self.bounds, &g.gradient)?;
        Ok((g.value, grad))
    }
}

#[derive(Debug, Clone)]
pub struct CalibrationOutcome {
    pub control: RegionalControl,
    pub params: ParameterFields,
    /// Result of the uniform search, when it ran.
    pub background: Option<Vec<f64>>,
    pub trace: OptimTrace,
    pub termination: Option<Termination>,
    /// Calibration cost at the final control.
    pub cost: f64,
    /// `dJ/dtheta` of the calibration cost at the final control.
    pub gradient: CostGradientFields,
    pub metrics: Vec<WindowMetrics>,
    pub hydrographs: Vec<GaugeHydrograph>,
}

impl CalibrationOutcome {
    pub fn metric(&self, window: &str, gauge: &str) -> Option<&WindowMetrics> {
        self.metrics
            .iter()
            .find(|m| m.window == window && m.gauge == gauge)
    }

    pub fn to_outputs(&self) -> RunOutputs {
        let names = PARAM_NAMES.iter().map(|s| s.to_string());
        RunOutputs {
            parameters: names
                .clone()
                .zip(self.params.fields.iter().cloned())
                .collect(),
            gradients: names.zip(self.gradient.fields.iter().cloned()).collect(),
            hydrographs: self.hydrographs.clone(),
            metrics: self.metrics.clone(),
            trace: self.trace.to_records(),
            control: Some(write_control(&self.control)),
        }
    }
}

/// Reads the flow directions, forcings, observations and descriptors named
/// in `cfg`.
pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset, RunError> {
    if cfg.data.flowdir.as_os_str().is_empty() {
        return Err(RunError::Input("config has no [data] section".into()));
    }
    let fd = read_raster(&cfg.data.flowdir)?;
    let active = fd.data_mask();
    let codes: Vec<i64> = fd
        .values
        .iter()
        .zip(&active)
        .map(|(&v, &a)| {
            if !a {
                Ok(0)
            } else if v.fract() == 0.0 {
                Ok(v as i64)
            } else {
                Err(RunError::Input(format!("non-integer flow direction {v}")))
            }
        })
        .collect::<Result<_, _>>()?;
    let dx = cfg.data.dx.unwrap_or(fd.geometry.cellsize);
    let mesh = Mesh::build(fd.geometry.clone(), &codes, &active, dx)?;
    let forcing = load_forcings(&cfg.data.forcing, &mesh)?;
    let observations = read_observations(&cfg.data.observations)?;
    let entries: Vec<(String, &Path)> = cfg
        .data
        .descriptors
        .iter()
        .map(|d| (d.name.clone(), d.path.as_path()))
        .collect();
    let descriptors = load_descriptors(&entries, &mesh)?;
    let gauges = cfg
        .gauges
        .iter()
        .map(|g| GaugeSpec {
            name: g.name.clone(),
            cell: CellCoord::new(g.row, g.col),
            role: g.role,
        })
        .collect();
    Ok(Dataset {
        mesh,
        forcing,
        descriptors,
        observations,
        gauges,
    })
}

fn control_shape(kind: MappingKind, settings: &CalibrationSettings, n_desc: usize) -> ControlShape {
    match kind {
        MappingKind::Uniform => ControlShape::Uniform,
        MappingKind::MultiLinear => ControlShape::Polynomial {
            n_descriptors: n_desc,
            linear: true,
        },
        MappingKind::Polynomial => ControlShape::Polynomial {
            n_descriptors: n_desc,
            linear: false,
        },
        MappingKind::Ann => ControlShape::Mlp {
            n_descriptors: n_desc,
            hidden: settings.hidden.clone(),
        },
    }
}

/// Calibrates the configured mapping and scores it over every window.
pub fn calibrate(data: &Dataset, settings: &CalibrationSettings) -> Result<CalibrationOutcome, RunError> {
    calibrate_from(data, settings, None)
}

/// Like [`calibrate`], starting from `start` instead of the default
/// initialization. `start` with a zero budget only scores the control.
pub fn calibrate_from(
    data: &Dataset,
    settings: &CalibrationSettings,
    start: Option<RegionalControl>,
) -> Result<CalibrationOutcome, RunError> {
    let w = settings.windows;
    if !(w.warmup < w.split && w.split <= w.end && w.end <= data.forcing.nt()) {
        return Err(RunError::Input(format!(
            "invalid windows warmup={} split={} end={} for {} steps",
            w.warmup,
            w.split,
            w.end,
            data.forcing.nt()
        )));
    }
    let n_desc = data.descriptors.n_descriptors();
    let desc = &data.descriptors.normalized;
    if settings.kind != MappingKind::Uniform && n_desc == 0 {
        return Err(RunError::Input("mapping needs descriptors".into()));
    }
    if settings.kind == MappingKind::Ann {
        check_hidden_widths(
            &settings.hidden,
            n_desc,
            data.mesh.n_cells(),
            settings.allow_wide_hidden,
        )?;
    }

    let forcing = data.forcing.window(0, w.split);
    let gauges = data.gauge_set(GaugeRole::Calibration, w.split)?;
    if gauges.is_empty() {
        return Err(RunError::Input("no calibration gauge".into()));
    }
    let spec = CostSpec::equal_weights(gauges.len(), w.warmup, w.split);
    let problem = HydroProblem {
        mesh: &data.mesh,
        forcing: &forcing,
        gauges: &gauges,
        spec: &spec,
    };
    let plan = CheckpointPlan::new(
        settings
            .checkpoint_interval
            .unwrap_or_else(|| CheckpointPlan::sqrt(w.split).interval),
    );
    let bounds = &settings.bounds;
    let objective = |template: RegionalControl| ControlObjective {
        problem,
        descriptors: desc,
        bounds,
        template,
        plan,
    };

    let mut background = None;
    let mut trace = OptimTrace::default();
    let mut termination = None;
    let control = if let Some(c) = start {
        let expected = init_control(&control_shape(settings.kind, settings, n_desc), 0, &bounds.midpoints(), bounds)?;
        if c.kind() != expected.kind() || c.dim() != expected.dim() {
            return Err(RunError::Input(format!(
                "control of kind `{}` with {} values does not match the configured `{}` mapping",
                c.kind().as_str(),
                c.dim(),
                settings.kind.as_str()
            )));
        }
        c
    } else {
        let needs_search = settings.kind == MappingKind::Uniform
            || (settings.uniform_background && settings.kind != MappingKind::Ann);
        let bg = if needs_search {
            let obj = objective(RegionalControl::Uniform(bounds.midpoints()));
            let r = global_uniform_search(
                |x| obj.value(x),
                bounds.pairs(),
                &bounds.midpoints(),
                &settings.sbs,
            )?;
            info!("uniform search: J = {:.6} after {} evaluations", r.value, r.evaluations);
            background = Some(r.x.clone());
            r.x
        } else {
            bounds.midpoints()
        };
        let init = init_control(&control_shape(settings.kind, settings, n_desc), settings.seed, &bg, bounds)?;
        match settings.kind {
            MappingKind::Uniform => init,
            MappingKind::MultiLinear | MappingKind::Polynomial => {
                let obj = objective(init.clone());
                let cfg = OptimizerConfig {
                    memory: settings.memory,
                    ..OptimizerConfig::quasi_newton(settings.max_iterations)
                };
                let r = quasi_newton_bounded(
                    |x| obj.value_and_grad(x),
                    &init.flatten(),
                    &init.coordinate_bounds(bounds),
                    &cfg,
                    |_, _| {},
                )?;
                info!(
                    "quasi-Newton: J = {:.6} after {} iterations ({:?})",
                    r.value, r.iterations, r.termination
                );
                trace = r.trace;
                termination = Some(r.termination);
                init.with_flat(&r.x)?
            }
            MappingKind::Ann => {
                let obj = objective(init.clone());
                let cfg = OptimizerConfig::adam(settings.epochs, settings.learning_rate);
                let r = adam_train(|x| obj.value_and_grad(x), &init.flatten(), &cfg)?;
                info!("adam: best J = {:.6} over {} epochs", r.value, r.iterations);
                trace = r.trace;
                termination = Some(r.termination);
                init.with_flat(&r.x)?
            }
        }
    };

    let params = map_control(&control, desc, bounds, data.mesh.n_cells())?;
    let g = grad_theta(&problem, &params, plan).map_err(OptimizeError::from)?;
    let (metrics, hydrographs) = evaluate_windows(data, &params, w)?;
    Ok(CalibrationOutcome {
        control,
        params,
        background,
        trace,
        termination,
        cost: g.value,
        gradient: g.gradient,
        metrics,
        hydrographs,
    })
}

/// NSE and KGE per gauge over the four evaluation windows, and the
/// post-warm-up hydrographs.
///
/// `Cal`: calibration gauges, calibration period. `S_Val`: validation
/// gauges, calibration period. `T_Val`: calibration gauges, validation
/// period. `S-T_Val`: validation gauges, validation period.
pub fn evaluate_windows(
    data: &Dataset,
    params: &ParameterFields,
    w: WindowPlan,
) -> Result<(Vec<WindowMetrics>, Vec<GaugeHydrograph>), RunError> {
    let forcing = data.forcing.window(0, w.end);
    let mut cells = Vec::new();
    let mut observed = Vec::new();
    for g in &data.gauges {
        cells.push(
            data.mesh
                .compact_index(g.cell)
                .ok_or(MeshError::GaugeOffGrid(g.cell))?,
        );
        let series = data
            .observations
            .column(&g.name)
            .ok_or_else(|| RunError::Input(format!("no observations for gauge `{}`", g.name)))?;
        if series.len() < w.end {
            return Err(RunError::Input(format!("gauge `{}` series too short", g.name)));
        }
        observed.push(&series[..w.end]);
    }
    let sim = simulate(
        &data.mesh,
        params,
        &forcing,
        &StateFields::initial(params),
        &cells,
    );

    let windows = [
        ("Cal", GaugeRole::Calibration, w.warmup, w.split),
        ("S_Val", GaugeRole::Validation, w.warmup, w.split),
        ("T_Val", GaugeRole::Calibration, w.split, w.end),
        ("S-T_Val", GaugeRole::Validation, w.split, w.end),
    ];
    let mut metrics = Vec::new();
    for (name, role, start, end) in windows {
        if start >= end {
            continue;
        }
        for (i, g) in data.gauges.iter().enumerate() {
            if g.role != role {
                continue;
            }
            let s = &sim.discharge[i][start..end];
            let o = &observed[i][start..end];
            metrics.push(WindowMetrics {
                window: name.to_string(),
                gauge: g.name.clone(),
                start,
                end,
                nse: nse(s, o).ok(),
                kge: kge(s, o).ok(),
            });
        }
    }
    let hydrographs = data
        .gauges
        .iter()
        .enumerate()
        .map(|(i, g)| GaugeHydrograph {
            name: g.name.clone(),
            start: w.warmup,
            observed: observed[i][w.warmup..].to_vec(),
            simulated: sim.discharge[i][w.warmup..].to_vec(),
        })
        .collect();
    Ok((metrics, hydrographs))
}

/// Loads the configured inputs, calibrates, and writes every output under
/// the configured directory.
pub fn run_calibration(cfg: &RunConfig) -> Result<CalibrationOutcome, RunError> {
    let data = load_dataset(cfg)?;
    let settings = CalibrationSettings::from_config(cfg, data.forcing.nt())?;
    let outcome = calibrate(&data, &settings)?;
    write_outputs(&cfg.output.dir, &data.mesh, &outcome.to_outputs())?;
    Ok(outcome)
}

/// Scores a stored control without optimizing and writes the outputs.
pub fn run_validation(cfg: &RunConfig, control: RegionalControl) -> Result<CalibrationOutcome, RunError> {
    let data = load_dataset(cfg)?;
    let settings = CalibrationSettings::from_config(cfg, data.forcing.nt())?;
    let outcome = calibrate_from(&data, &settings, Some(control))?;
    write_outputs(&cfg.output.dir, &data.mesh, &outcome.to_outputs())?;
    Ok(outcome)
}
