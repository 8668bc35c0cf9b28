//! Reverse-mode gradient of the calibration cost with respect to the
//! parameter fields.
//!
//! The adjoint differentiates the discrete forward scheme of [`crate::hydro`]
//! exactly. The forward trajectory is stored at checkpoints only; each
//! segment is recomputed from its checkpoint during the reverse sweep, which
//! reproduces the original states bit for bit, so the gradient does not
//! depend on the checkpoint interval.

use thiserror::Error;

use crate::cost::{multi_gauge_cost, CostError, CostEvaluation, CostSpec};
use crate::hydro::{
    cell_step, cell_step_adjoint, discharge_factor, release_fraction_derivative, simulate,
    CellState, ParameterFields, StateFields, Stepper, CP, CT, INITIAL_FILL, LLR, N_PARAMS,
};
use crate::io::ForcingSet;
use crate::mesh::{GaugeSet, Mesh};
use crate::regio::Bounds;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdjointError {
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error("finite-difference step for parameter {param} at cell {cell} leaves the bounds")]
    StepOutOfBounds { param: usize, cell: usize },
}

/// Everything the cost depends on besides the parameter fields.
#[derive(Debug, Clone, Copy)]
pub struct HydroProblem<'a> {
    pub mesh: &'a Mesh,
    pub forcing: &'a ForcingSet,
    pub gauges: &'a GaugeSet,
    pub spec: &'a CostSpec,
}

/// `dJ/dtheta` for every parameter at every active cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CostGradientFields {
    pub fields: [Vec<f64>; N_PARAMS],
}

impl CostGradientFields {
    pub fn zeros(n_cells: usize) -> Self {
        Self {
            fields: std::array::from_fn(|_| vec![0.0; n_cells]),
        }
    }

    pub fn field(&self, p: usize) -> &[f64] {
        &self.fields[p]
    }

    pub fn dot(&self, v: &ParameterFields) -> f64 {
        self.fields
            .iter()
            .zip(&v.fields)
            .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| x * y))
            .sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.fields
            .iter()
            .flatten()
            .fold(0.0, |m: f64, v| m.max(v.abs()))
    }
}

/// Forward state storage for the reverse sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CheckpointPlan {
    pub interval: usize,
}

impl CheckpointPlan {
    pub fn new(interval: usize) -> Self {
        Self {
            interval: interval.max(1),
        }
    }

    /// Interval `ceil(sqrt(nt))`.
    pub fn sqrt(nt: usize) -> Self {
        Self::new((nt as f64).sqrt().ceil() as usize)
    }
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub cost: CostEvaluation,
    /// Discharge at each gauge over the horizon (m³/s).
    pub discharge: Vec<Vec<f64>>,
}

fn evaluate_discharge(
    problem: &HydroProblem<'_>,
    discharge: Vec<Vec<f64>>,
) -> Result<Evaluation, CostError> {
    let obs: Vec<&[f64]> = problem.gauges.gauges().iter().map(|g| g.observed.as_slice()).collect();
    let cost = multi_gauge_cost(&discharge, &obs, problem.spec)?;
    Ok(Evaluation { cost, discharge })
}

/// Forward run and cost.
pub fn evaluate(problem: &HydroProblem<'_>, params: &ParameterFields) -> Result<Evaluation, CostError> {
    let out = simulate(
        problem.mesh,
        params,
        problem.forcing,
        &StateFields::initial(params),
        problem.gauges.cells(),
    );
    evaluate_discharge(problem, out.discharge)
}

/// Cost value only.
pub fn cost(problem: &HydroProblem<'_>, params: &ParameterFields) -> Result<f64, CostError> {
    evaluate(problem, params).map(|e| e.cost.value)
}

#[derive(Debug, Clone)]
pub struct Gradient {
    pub value: f64,
    pub evaluation: Evaluation,
    pub gradient: CostGradientFields,
}

/// Cost and its exact gradient with respect to every parameter field.
pub fn grad_theta(
    problem: &HydroProblem<'_>,
    params: &ParameterFields,
    plan: CheckpointPlan,
) -> Result<Gradient, CostError> {
    let mesh = problem.mesh;
    let forcing = problem.forcing;
    let n = mesh.n_cells();
    let nt = forcing.nt();
    let k = plan.interval.max(1);

    // forward sweep, keeping one state per segment
    let mut stepper = Stepper::new(mesh, params, forcing);
    let factor = discharge_factor(mesh.dx(), forcing.dt());
    let gauge_cells = problem.gauges.cells();
    let mut state = StateFields::initial(params);
    let mut checkpoints = Vec::with_capacity(nt.div_ceil(k));
    let mut discharge = vec![Vec::with_capacity(nt); gauge_cells.len()];
    for t in 0..nt {
        if t % k == 0 {
            checkpoints.push(state.clone());
        }
        stepper.step(t, &mut state);
        for (series, &c) in discharge.iter_mut().zip(gauge_cells) {
            series.push(stepper.release()[c] * factor);
        }
    }
    let evaluation = evaluate_discharge(problem, discharge)?;
    let sens = &evaluation.cost.sensitivities;

    let alpha = stepper.alpha().to_vec();
    let mut hp_b = vec![0.0; n];
    let mut ht_b = vec![0.0; n];
    let mut hr_b = vec![0.0; n];
    let mut grad = CostGradientFields::zeros(n);
    let mut alpha_b = vec![0.0; n];

    let mut runoff = vec![0.0; n];
    let mut stored = vec![0.0; n];
    let mut inflow = vec![0.0; n];
    let mut stored_b = vec![0.0; n];
    let mut release_seed = vec![0.0; n];
    let mut segment: Vec<StateFields> = Vec::with_capacity(k);

    for (seg, checkpoint) in checkpoints.iter().enumerate().rev() {
        let t0 = seg * k;
        let t1 = (t0 + k).min(nt);
        segment.clear();
        let mut s = checkpoint.clone();
        for t in t0..t1 {
            segment.push(s.clone());
            stepper.step(t, &mut s);
        }

        for t in (t0..t1).rev() {
            let before = &segment[t - t0];
            let rain = forcing.rain(t);
            let pet = forcing.pet(t);
            for c in 0..n {
                let st = CellState {
                    hp: before.hp[c],
                    ht: before.ht[c],
                };
                runoff[c] = cell_step(rain[c], pet[c], &params.cell(c), st).0;
            }
            inflow.iter_mut().for_each(|v| *v = 0.0);
            for &c in mesh.order() {
                stored[c] = before.hr[c] + runoff[c] + inflow[c];
                if let Some(d) = mesh.downstream(c) {
                    inflow[d] += alpha[c] * stored[c];
                }
            }

            release_seed.iter_mut().for_each(|v| *v = 0.0);
            for (g, &c) in gauge_cells.iter().enumerate() {
                release_seed[c] += sens[g][t] * factor;
            }
            for &c in mesh.order().iter().rev() {
                let mut rel_b = release_seed[c];
                if let Some(d) = mesh.downstream(c) {
                    rel_b += stored_b[d];
                }
                stored_b[c] = alpha[c] * rel_b + (1.0 - alpha[c]) * hr_b[c];
                alpha_b[c] += stored[c] * (rel_b - hr_b[c]);
            }

            for c in 0..n {
                hr_b[c] = stored_b[c];
                let mut tb = [0.0; 3];
                let st_b = cell_step_adjoint(
                    rain[c],
                    pet[c],
                    &params.cell(c),
                    CellState {
                        hp: before.hp[c],
                        ht: before.ht[c],
                    },
                    stored_b[c],
                    CellState {
                        hp: hp_b[c],
                        ht: ht_b[c],
                    },
                    &mut tb,
                );
                hp_b[c] = st_b.hp;
                ht_b[c] = st_b.ht;
                for p in 0..3 {
                    grad.fields[p][c] += tb[p];
                }
            }
        }
    }

    let dt = forcing.dt();
    for c in 0..n {
        grad.fields[CP][c] += INITIAL_FILL * hp_b[c];
        grad.fields[CT][c] += INITIAL_FILL * ht_b[c];
        grad.fields[LLR][c] += alpha_b[c] * release_fraction_derivative(params.fields[LLR][c], dt);
    }

    Ok(Gradient {
        value: evaluation.cost.value,
        evaluation,
        gradient: grad,
    })
}

/// Central-difference gradient of an arbitrary cost of the parameter fields.
///
/// `steps[p]` is the perturbation of parameter `p`; every perturbed value
/// must stay strictly within `bounds`. Costs `2 * N_PARAMS * n_cells`
/// evaluations.
pub fn fd_gradient_with<F>(
    mut cost: F,
    params: &ParameterFields,
    steps: [f64; N_PARAMS],
    bounds: &Bounds,
) -> Result<CostGradientFields, AdjointError>
where
    F: FnMut(&ParameterFields) -> Result<f64, CostError>,
{
    let n = params.n_cells();
    let mut grad = CostGradientFields::zeros(n);
    let mut work = params.clone();
    for p in 0..N_PARAMS {
        let (lo, hi) = bounds.get(p);
        let h = steps[p];
        for c in 0..n {
            let v = params.fields[p][c];
            if !(v - h > lo && v + h < hi) {
                return Err(AdjointError::StepOutOfBounds { param: p, cell: c });
            }
            work.fields[p][c] = v + h;
            let up = cost(&work)?;
            work.fields[p][c] = v - h;
            let down = cost(&work)?;
            work.fields[p][c] = v;
            grad.fields[p][c] = (up - down) / (2.0 * h);
        }
    }
    Ok(grad)
}

/// Central differences of the calibration cost, step `h_rel * (u - l)`.
pub fn fd_gradient(
    problem: &HydroProblem<'_>,
    params: &ParameterFields,
    h_rel: f64,
    bounds: &Bounds,
) -> Result<CostGradientFields, AdjointError> {
    let steps = std::array::from_fn(|p| {
        let (lo, hi) = bounds.get(p);
        h_rel * (hi - lo)
    });
    fd_gradient_with(|th| cost(problem, th), params, steps, bounds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fd_of_quadratic_stub() {
        let target = ParameterFields::uniform([3.0, -1.0, 0.5, 7.0], 4);
        let mut params = ParameterFields::uniform([1.0, 2.0, -0.5, 4.0], 4);
        params.fields[0][2] = 5.5;
        let quad = |th: &ParameterFields| -> Result<f64, CostError> {
            Ok(th
                .fields
                .iter()
                .zip(&target.fields)
                .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)))
                .sum())
        };
        let bounds = Bounds::new(vec![(-100.0, 100.0); 4]).unwrap();
        let g = fd_gradient_with(quad, &params, [1e-3; 4], &bounds).unwrap();
        for p in 0..4 {
            for c in 0..4 {
                let exact = 2.0 * (params.fields[p][c] - target.fields[p][c]);
                assert!((g.fields[p][c] - exact).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn fd_step_must_stay_inside_bounds() {
        let params = ParameterFields::uniform([1.0, 1.0, 1.0, 1.0], 1);
        let bounds = Bounds::new(vec![(0.0, 1.5); 4]).unwrap();
        let err = fd_gradient_with(|_| Ok(0.0), &params, [0.6, 0.1, 0.1, 0.1], &bounds).unwrap_err();
        assert_eq!(err, AdjointError::StepOutOfBounds { param: 0, cell: 0 });
    }

    #[test]
    fn sqrt_plan() {
        assert_eq!(CheckpointPlan::sqrt(200).interval, 15);
        assert_eq!(CheckpointPlan::sqrt(0).interval, 1);
    }
}
