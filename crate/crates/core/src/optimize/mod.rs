//! Calibration algorithms and the end-to-end calibration driver.
//!
//! * [`global_uniform_search`]: derivative-free coordinate search for the
//!   spatially uniform control.
//! * [`quasi_newton_bounded`]: projected limited-memory BFGS for polynomial
//!   controls.
//! * [`adam_train`]: full-batch Adam for MLP controls.

mod calibration;
mod twin;

pub use calibration::{
    calibrate, evaluate_windows, load_dataset, run_calibration, CalibrationOutcome,
    CalibrationSettings, ControlObjective, Dataset, GaugeSpec, RunError, WindowPlan, calibrate_from, run_validation,
};
pub use twin::{centred_bounds, gauge_cell, twin_generate, write_twin, TwinProblem, TwinSpec, TwinTruth};

use std::time::{Duration, Instant};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::adjoint::AdjointError;
use crate::cost::CostError;
use crate::io::TraceRecord;
use crate::regio::RegioError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimizeError {
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error(transparent)]
    Adjoint(#[from] AdjointError),
    #[error(transparent)]
    Regio(#[from] RegioError),
    #[error("non-finite gradient at iteration {iteration}")]
    NonFiniteGradient { iteration: usize },
    #[error("non-finite cost at iteration {iteration}")]
    NonFiniteCost { iteration: usize },
    #[error("starting point has {actual} coordinates, bounds have {expected}")]
    DimensionMismatch { expected: usize, actual: usize },
}

/// Which algorithm calibrates a control.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    GlobalUniform,
    QuasiNewtonBounded,
    Adam,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    /// Iterations (quasi-Newton) or epochs (Adam).
    pub max_iterations: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
    /// Stored correction pairs.
    pub memory: usize,
    /// Relative cost-decrease threshold.
    pub ftol: f64,
    /// Projected-gradient sup-norm threshold.
    pub gtol: f64,
}

impl OptimizerConfig {
    pub fn quasi_newton(max_iterations: usize) -> Self {
        Self {
            kind: OptimizerKind::QuasiNewtonBounded,
            max_iterations,
            ..Self::default()
        }
    }

    pub fn adam(epochs: usize, learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            max_iterations: epochs,
            learning_rate,
            ..Self::default()
        }
    }
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::QuasiNewtonBounded,
            max_iterations: 250,
            learning_rate: 0.003,
            beta1: 0.9,
            beta2: 0.999,
            eps_adam: 1e-8,
            memory: 10,
            ftol: f64::EPSILON * 1e6,
            gtol: 1e-12,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub cost: f64,
    pub best: f64,
    /// Sup-norm of the projected gradient.
    pub projected_gradient: f64,
    /// SHA-256 of the control's little-endian bytes, hex encoded.
    pub control_hash: String,
    /// Time since the optimizer started; never written to output files.
    pub elapsed: Duration,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct OptimTrace {
    pub records: Vec<IterationRecord>,
}

impl OptimTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn costs(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.cost).collect()
    }

    pub fn to_records(&self) -> Vec<TraceRecord> {
        self.records
            .iter()
            .map(|r| TraceRecord {
                iteration: r.iteration,
                cost: r.cost,
                best: r.best,
                projected_gradient: r.projected_gradient,
            })
            .collect()
    }

    fn push(&mut self, iteration: usize, cost: f64, pg: f64, x: &[f64], start: Instant) {
        let best = self
            .records
            .last()
            .map_or(cost, |r| r.best.min(cost));
        self.records.push(IterationRecord {
            iteration,
            cost,
            best,
            projected_gradient: pg,
            control_hash: control_hash(x),
            elapsed: start.elapsed(),
        });
    }
}

pub fn control_hash(x: &[f64]) -> String {
    let mut h = Sha256::new();
    for v in x {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Why an optimizer stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    MaxIterations,
    CostDecrease,
    ProjectedGradient,
    LineSearchFailure,
}

#[derive(Debug, Clone)]
pub struct OptimResult {
    /// Final iterate, or the best iterate for Adam.
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub termination: Termination,
    pub trace: OptimTrace,
}

fn project(x: &mut [f64], bounds: &[(f64, f64)]) {
    for (v, &(lo, hi)) in x.iter_mut().zip(bounds) {
        *v = v.clamp(lo, hi);
    }
}

/// `|| x - P(x - g) ||_inf`.
pub fn projected_gradient_norm(x: &[f64], g: &[f64], bounds: &[(f64, f64)]) -> f64 {
    x.iter()
        .zip(g)
        .zip(bounds)
        .map(|((&xi, &gi), &(lo, hi))| (xi - (xi - gi).clamp(lo, hi)).abs())
        .fold(0.0, f64::max)
}

fn check_dim(x: &[f64], bounds: &[(f64, f64)]) -> Result<(), OptimizeError> {
    if x.len() != bounds.len() {
        return Err(OptimizeError::DimensionMismatch {
            expected: bounds.len(),
            actual: x.len(),
        });
    }
    Ok(())
}

/// Settings of the coordinate search.
#[derive(Debug, Clone, PartialEq)]
pub struct SbsConfig {
    /// First step in normalized coordinates.
    pub initial_step: f64,
    /// Search stops once the step falls below this.
    pub min_step: f64,
    /// Passes restarted from the incumbent with a fresh step.
    pub restarts: usize,
    /// Distance kept from each bound, in normalized coordinates.
    pub margin: f64,
    /// Points per coordinate of the coarse scan run before refinement;
    /// 0 or 1 refines from `start` directly.
    pub grid_levels: usize,
}

impl Default for SbsConfig {
    fn default() -> Self {
        Self {
            initial_step: 0.1,
            min_step: 1e-6,
            restarts: 3,
            margin: 1e-6,
            grid_levels: 3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SbsResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub evaluations: usize,
}

/// Derivative-free step-by-step search over a box.
///
/// Works in coordinates normalized to `[0, 1]` per bound. A coarse grid
/// scan picks the starting point when it beats `start`. Each coordinate
/// is moved by `+step` then `-step` and keeps moving while the cost drops;
/// the step halves after a cycle without improvement. The pass repeats
/// `restarts` times from the incumbent.
pub fn global_uniform_search<F>(
    mut cost: F,
    bounds: &[(f64, f64)],
    start: &[f64],
    cfg: &SbsConfig,
) -> Result<SbsResult, OptimizeError>
where
    F: FnMut(&[f64]) -> Result<f64, OptimizeError>,
{
    check_dim(start, bounds)?;
    let lo = cfg.margin;
    let hi = 1.0 - cfg.margin;
    let to_x = |u: &[f64]| -> Vec<f64> {
        u.iter()
            .zip(bounds)
            .map(|(&ui, &(l, h))| l + (h - l) * ui)
            .collect()
    };
    let mut u: Vec<f64> = start
        .iter()
        .zip(bounds)
        .map(|(&x, &(l, h))| ((x - l) / (h - l)).clamp(lo, hi))
        .collect();
    let mut evaluations = 0;
    let mut eval = |u: &[f64], evaluations: &mut usize| -> Result<f64, OptimizeError> {
        *evaluations += 1;
        let v = cost(&to_x(u))?;
        Ok(if v.is_nan() { f64::INFINITY } else { v })
    };
    let mut best = eval(&u, &mut evaluations)?;
    if cfg.grid_levels > 1 {
        // cell-centred levels; ties keep the earlier point, so the scan is deterministic
        let levels: Vec<f64> = (0..cfg.grid_levels)
            .map(|i| ((i as f64 + 0.5) / cfg.grid_levels as f64).clamp(lo, hi))
            .collect();
        let total = cfg.grid_levels.pow(u.len() as u32);
        let mut point = vec![0.0; u.len()];
        for mut index in 0..total {
            for p in point.iter_mut() {
                *p = levels[index % cfg.grid_levels];
                index /= cfg.grid_levels;
            }
            let v = eval(&point, &mut evaluations)?;
            if v < best {
                best = v;
                u.copy_from_slice(&point);
            }
        }
    }
    for _ in 0..cfg.restarts.max(1) {
        let mut step = cfg.initial_step;
        while step >= cfg.min_step {
            let mut improved = false;
            for i in 0..u.len() {
                for dir in [1.0, -1.0] {
                    loop {
                        let cand = (u[i] + dir * step).clamp(lo, hi);
                        if cand == u[i] {
                            break;
                        }
                        let saved = u[i];
                        u[i] = cand;
                        let v = eval(&u, &mut evaluations)?;
                        if v < best {
                            best = v;
                            improved = true;
                        } else {
                            u[i] = saved;
                            break;
                        }
                    }
                }
            }
            if !improved {
                step *= 0.5;
            }
        }
    }
    Ok(SbsResult {
        x: to_x(&u),
        value: best,
        evaluations,
    })
}

struct Memory {
    s: Vec<Vec<f64>>,
    y: Vec<Vec<f64>>,
    cap: usize,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl Memory {
    fn push(&mut self, s: Vec<f64>, y: Vec<f64>) {
        if self.s.len() == self.cap {
            self.s.remove(0);
            self.y.remove(0);
        }
        self.s.push(s);
        self.y.push(y);
    }

    fn clear(&mut self) {
        self.s.clear();
        self.y.clear();
    }

    /// `-H g` on the free coordinates, zero elsewhere.
    fn direction(&self, g: &[f64], free: &[bool]) -> Vec<f64> {
        let mask = |v: &[f64]| -> Vec<f64> {
            v.iter().zip(free).map(|(&x, &f)| if f { x } else { 0.0 }).collect()
        };
        let mut q = mask(g);
        let n = self.s.len();
        let mut a = vec![0.0; n];
        let mut rho = vec![0.0; n];
        let mut sm = Vec::with_capacity(n);
        let mut ym = Vec::with_capacity(n);
        for j in 0..n {
            sm.push(mask(&self.s[j]));
            ym.push(mask(&self.y[j]));
            let sy = dot(&sm[j], &ym[j]);
            rho[j] = if sy > 0.0 { 1.0 / sy } else { 0.0 };
        }
        for j in (0..n).rev() {
            a[j] = rho[j] * dot(&sm[j], &q);
            for (qi, yi) in q.iter_mut().zip(&ym[j]) {
                *qi -= a[j] * yi;
            }
        }
        if n > 0 {
            let yy = dot(&ym[n - 1], &ym[n - 1]);
            let sy = dot(&sm[n - 1], &ym[n - 1]);
            if yy > 0.0 && sy > 0.0 {
                let gamma = sy / yy;
                q.iter_mut().for_each(|v| *v *= gamma);
            }
        }
        for j in 0..n {
            let b = rho[j] * dot(&ym[j], &q);
            for (qi, si) in q.iter_mut().zip(&sm[j]) {
                *qi += (a[j] - b) * si;
            }
        }
        q.iter_mut().for_each(|v| *v = -*v);
        q
    }
}

const ARMIJO_C1: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 40;

/// Projected limited-memory BFGS on a box.
///
/// Stops at the first of: `cfg.max_iterations` iterations; relative cost
/// decrease `(J_i - J_{i+1}) / max(|J_i|, |J_{i+1}|, 1) <= cfg.ftol`;
/// projected-gradient sup-norm `<= cfg.gtol`. A line search that cannot
/// decrease the cost ends the run with [`Termination::LineSearchFailure`]
/// and the best iterate. `observe` sees every accepted iterate.
pub fn quasi_newton_bounded<F, O>(
    mut f: F,
    x0: &[f64],
    bounds: &[(f64, f64)],
    cfg: &OptimizerConfig,
    mut observe: O,
) -> Result<OptimResult, OptimizeError>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>), OptimizeError>,
    O: FnMut(usize, &[f64]),
{
    check_dim(x0, bounds)?;
    let start = Instant::now();
    let mut x = x0.to_vec();
    project(&mut x, bounds);
    let (mut fx, mut g) = f(&x)?;
    if !fx.is_finite() {
        return Err(OptimizeError::NonFiniteCost { iteration: 0 });
    }
    if g.iter().any(|v| !v.is_finite()) {
        return Err(OptimizeError::NonFiniteGradient { iteration: 0 });
    }
    observe(0, &x);
    let mut trace = OptimTrace::default();
    let mut mem = Memory {
        s: Vec::new(),
        y: Vec::new(),
        cap: cfg.memory.max(1),
    };
    let mut termination = Termination::MaxIterations;
    let mut iterations = 0;

    while iterations < cfg.max_iterations {
        if projected_gradient_norm(&x, &g, bounds) <= cfg.gtol {
            termination = Termination::ProjectedGradient;
            break;
        }
        let free: Vec<bool> = x
            .iter()
            .zip(&g)
            .zip(bounds)
            .map(|((&xi, &gi), &(lo, hi))| !((xi <= lo && gi > 0.0) || (xi >= hi && gi < 0.0)))
            .collect();

        let mut accepted = None;
        for attempt in 0..2 {
            let mut d = mem.direction(&g, &free);
            let mut slope = dot(&g, &d);
            if attempt == 1 || !(slope < 0.0) {
                mem.clear();
                d = mem.direction(&g, &free);
                slope = dot(&g, &d);
            }
            if !(slope < 0.0) {
                break;
            }
            let dmax = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let mut t = if mem.s.is_empty() { (1.0 / dmax).min(1.0) } else { 1.0 };
            for _ in 0..MAX_BACKTRACKS {
                let mut xn: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + t * di).collect();
                project(&mut xn, bounds);
                let step: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
                let decrease = dot(&g, &step);
                if decrease < 0.0 {
                    let (fn_, gn) = f(&xn)?;
                    if fn_.is_finite() && fn_ <= fx + ARMIJO_C1 * decrease {
                        if gn.iter().any(|v| !v.is_finite()) {
                            return Err(OptimizeError::NonFiniteGradient {
                                iteration: iterations + 1,
                            });
                        }
                        accepted = Some((xn, fn_, gn, step));
                        break;
                    }
                }
                t *= 0.5;
            }
            if accepted.is_some() || mem.s.is_empty() {
                break;
            }
        }

        let Some((xn, fn_, gn, s)) = accepted else {
            termination = Termination::LineSearchFailure;
            break;
        };
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        if dot(&s, &y) > f64::EPSILON * dot(&y, &y) {
            mem.push(s, y);
        }
        let rel = (fx - fn_) / fx.abs().max(fn_.abs()).max(1.0);
        x = xn;
        fx = fn_;
        g = gn;
        iterations += 1;
        trace.push(iterations, fx, projected_gradient_norm(&x, &g, bounds), &x, start);
        observe(iterations, &x);
        if rel <= cfg.ftol {
            termination = Termination::CostDecrease;
            break;
        }
    }

    Ok(OptimResult {
        x,
        value: fx,
        iterations,
        termination,
        trace,
    })
}

/// First and second moment estimates of Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    /// One element-wise step:
    /// `m = b1 m + (1 - b1) g`, `v = b2 v + (1 - b2) g^2`,
    /// `x -= lr m / ((1 - b1) (sqrt(v / (1 - b2)) + eps))`.
    pub fn update(&mut self, x: &mut [f64], g: &[f64], cfg: &OptimizerConfig) {
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        for i in 0..x.len() {
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g[i];
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g[i] * g[i];
            x[i] -= cfg.learning_rate * self.m[i]
                / ((1.0 - b1) * ((self.v[i] / (1.0 - b2)).sqrt() + cfg.eps_adam));
        }
    }
}

/// Full-batch Adam, one [`AdamState::update`] per epoch.
///
/// Returns the iterate with the lowest recorded cost.
pub fn adam_train<F>(mut f: F, x0: &[f64], cfg: &OptimizerConfig) -> Result<OptimResult, OptimizeError>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>), OptimizeError>,
{
    let start = Instant::now();
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut state = AdamState::new(n);
    let mut trace = OptimTrace::default();
    let mut best = (f64::INFINITY, x.clone());
    for epoch in 0..cfg.max_iterations {
        let (j, g) = f(&x)?;
        if g.iter().any(|v| !v.is_finite()) {
            return Err(OptimizeError::NonFiniteGradient { iteration: epoch });
        }
        if !j.is_finite() {
            return Err(OptimizeError::NonFiniteCost { iteration: epoch });
        }
        let gmax = g.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        trace.push(epoch, j, gmax, &x, start);
        if j < best.0 {
            best = (j, x.clone());
        }
        state.update(&mut x, &g, cfg);
    }
    let (value, x) = if cfg.max_iterations == 0 {
        (f64::NAN, x)
    } else {
        (best.0, best.1)
    };
    Ok(OptimResult {
        x,
        value,
        iterations: cfg.max_iterations,
        termination: Termination::MaxIterations,
        trace,
    })
}
