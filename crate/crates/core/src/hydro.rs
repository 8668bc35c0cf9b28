//! Forward distributed rainfall-runoff model.
//!
//! Each active cell runs GR-style production, percolation, exchange and
//! transfer operators; the resulting runoff is routed along the D8 graph
//! through one linear reservoir per cell, in topological order, so upstream
//! releases reach downstream stores within the same step.
//!
//! All fluxes are mm per step over one cell; discharge is converted to m³/s
//! with `dx² · 1e-3 / dt`.

use crate::io::ForcingSet;
use crate::mesh::Mesh;

/// Number of hydrological parameters.
pub const N_PARAMS: usize = 4;

/// Parameter names in storage order.
pub const PARAM_NAMES: [&str; N_PARAMS] = ["cp", "ct", "kexc", "llr"];

pub const CP: usize = 0;
pub const CT: usize = 1;
pub const KEXC: usize = 2;
pub const LLR: usize = 3;

/// Fraction of effective rainfall entering the transfer store.
const TRANSFER_SPLIT: f64 = 0.9;
const PERC_COEF: f64 = 4.0 / 9.0;
const EXCHANGE_EXP: f64 = 3.5;
/// Initial store fill relative to capacity.
pub const INITIAL_FILL: f64 = 0.01;

/// Spatial parameter fields over the active cells.
///
/// Storage order is [`PARAM_NAMES`]: production capacity `cp` (mm),
/// transfer capacity `ct` (mm), exchange coefficient `kexc` (mm/dt) and
/// linear routing time `llr` (min).
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterFields {
    pub fields: [Vec<f64>; N_PARAMS],
}

impl ParameterFields {
    pub fn new(fields: [Vec<f64>; N_PARAMS]) -> Self {
        Self { fields }
    }

    pub fn uniform(values: [f64; N_PARAMS], n_cells: usize) -> Self {
        Self {
            fields: values.map(|v| vec![v; n_cells]),
        }
    }

    pub fn n_cells(&self) -> usize {
        self.fields[0].len()
    }

    pub fn cell(&self, k: usize) -> CellParams {
        CellParams {
            cp: self.fields[CP][k],
            ct: self.fields[CT][k],
            kexc: self.fields[KEXC][k],
            llr: self.fields[LLR][k],
        }
    }

    pub fn field(&self, p: usize) -> &[f64] {
        &self.fields[p]
    }

    pub fn field_mut(&mut self, p: usize) -> &mut [f64] {
        &mut self.fields[p]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellParams {
    pub cp: f64,
    pub ct: f64,
    pub kexc: f64,
    pub llr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CellState {
    /// Production store level (mm).
    pub hp: f64,
    /// Transfer store level (mm).
    pub ht: f64,
}

/// Store levels over the active cells.
#[derive(Debug, Clone, PartialEq)]
pub struct StateFields {
    pub hp: Vec<f64>,
    pub ht: Vec<f64>,
    /// Routing store content (mm over one cell).
    pub hr: Vec<f64>,
}

impl StateFields {
    /// Stores one percent full, routing stores empty.
    pub fn initial(params: &ParameterFields) -> Self {
        Self {
            hp: params.fields[CP].iter().map(|c| INITIAL_FILL * c).collect(),
            ht: params.fields[CT].iter().map(|c| INITIAL_FILL * c).collect(),
            hr: vec![0.0; params.n_cells()],
        }
    }

    pub fn zeros(n_cells: usize) -> Self {
        Self {
            hp: vec![0.0; n_cells],
            ht: vec![0.0; n_cells],
            hr: vec![0.0; n_cells],
        }
    }

    /// Total water held in all stores (mm summed over cells).
    pub fn total_storage(&self) -> f64 {
        self.hp.iter().chain(&self.ht).chain(&self.hr).sum()
    }
}

/// One step of the pixel operators; returns the runoff (mm) handed to routing
/// and the updated stores.
pub fn cell_step(p: f64, e: f64, theta: &CellParams, state: CellState) -> (f64, CellState) {
    let CellParams { cp, ct, kexc, .. } = *theta;
    let CellState { hp, ht } = state;

    let pn = (p - e).max(0.0);
    let en = (e - p).max(0.0);

    let r = hp / cp;
    let tp = (pn / cp).tanh();
    let ps = cp * (1.0 - r * r) * tp / (1.0 + r * tp);
    let te = (en / cp).tanh();
    let es = hp * (2.0 - r) * te / (1.0 + (1.0 - r) * te);
    let h1 = (hp + ps - es).clamp(0.0, cp);

    let r1 = h1 / cp;
    let w = (PERC_COEF * r1).powi(4);
    let hp_new = h1 * (1.0 + w).powf(-0.25);
    let perc = h1 - hp_new;

    let pr = pn - ps + perc;
    let f = kexc * (ht / ct).powf(EXCHANGE_EXP);

    let h3 = (ht + TRANSFER_SPLIT * pr + f).max(0.0);
    let y = h3 / ct;
    let ht_new = h3 * (1.0 + y.powi(4)).powf(-0.25);
    let qt = h3 - ht_new;
    let qd = ((1.0 - TRANSFER_SPLIT) * pr + f).max(0.0);

    (qt + qd, CellState { hp: hp_new, ht: ht_new })
}

/// Adjoint of [`cell_step`].
///
/// Given the adjoints of the outputs (runoff, updated `hp`, updated `ht`),
/// returns the adjoints of the input stores and accumulates parameter
/// adjoints `[cp, ct, kexc]` into `theta_bar`.
pub fn cell_step_adjoint(
    p: f64,
    e: f64,
    theta: &CellParams,
    state: CellState,
    runoff_bar: f64,
    out_bar: CellState,
    theta_bar: &mut [f64; 3],
) -> CellState {
    let CellParams { cp, ct, kexc, .. } = *theta;
    let CellState { hp, ht } = state;

    // forward recomputation
    let pn = (p - e).max(0.0);
    let en = (e - p).max(0.0);
    let r = hp / cp;
    let tp = (pn / cp).tanh();
    let num_p = (1.0 - r * r) * tp;
    let den_p = 1.0 + r * tp;
    let ps = cp * num_p / den_p;
    let te = (en / cp).tanh();
    let num_e = hp * (2.0 - r) * te;
    let den_e = 1.0 + (1.0 - r) * te;
    let es = num_e / den_e;
    let h1_raw = hp + ps - es;
    let h1 = h1_raw.clamp(0.0, cp);
    let r1 = h1 / cp;
    let w = (PERC_COEF * r1).powi(4);
    let psi = (1.0 + w).powf(-0.25);
    let x = ht / ct;
    let f = kexc * x.powf(EXCHANGE_EXP);
    let h1_pr = pn - ps + h1 - h1 * psi;
    let a = ht + TRANSFER_SPLIT * h1_pr + f;
    let h3 = a.max(0.0);
    let y = h3 / ct;
    let y4 = y.powi(4);
    let phi = (1.0 + y4).powf(-0.25);
    let qd_arg = (1.0 - TRANSFER_SPLIT) * h1_pr + f;

    let (mut cp_b, mut ct_b, mut k_b) = (0.0, 0.0, 0.0);
    let mut hp_b = 0.0;
    let mut ht_b = 0.0;

    // runoff = qt + qd
    let qt_b = runoff_bar;
    let qd_b = runoff_bar;
    let mut pr_b = 0.0;
    let mut f_b = 0.0;
    if qd_arg > 0.0 {
        pr_b += (1.0 - TRANSFER_SPLIT) * qd_b;
        f_b += qd_b;
    }
    // qt = h3 - ht_new
    let mut h3_b = qt_b;
    let htn_b = out_bar.ht - qt_b;
    // ht_new = h3 * phi(h3 / ct)
    h3_b += htn_b * phi / (1.0 + y4);
    ct_b += htn_b * y4 * y * phi / (1.0 + y4);
    if a > 0.0 {
        ht_b += h3_b;
        pr_b += TRANSFER_SPLIT * h3_b;
        f_b += h3_b;
    }
    // f = kexc * (ht / ct)^3.5
    k_b += f_b * x.powf(EXCHANGE_EXP);
    let x_b = f_b * kexc * EXCHANGE_EXP * x.powf(EXCHANGE_EXP - 1.0);
    ht_b += x_b / ct;
    ct_b -= x_b * x / ct;
    // pr = pn - ps + perc, perc = h1 - hp_new
    let mut ps_b = -pr_b;
    let mut h1_b = pr_b;
    let hpn_b = out_bar.hp - pr_b;
    // hp_new = h1 * psi(h1 / cp)
    h1_b += hpn_b * psi / (1.0 + w);
    cp_b += hpn_b * r1 * w * psi / (1.0 + w);
    // h1 = clamp(hp + ps - es, 0, cp)
    let mut es_b = 0.0;
    if h1_raw > cp {
        cp_b += h1_b;
    } else if h1_raw > 0.0 {
        hp_b += h1_b;
        ps_b += h1_b;
        es_b -= h1_b;
    }
    // ps = cp * (1 - r^2) tp / (1 + r tp)
    let dps_dr = cp * (-2.0 * r * tp * den_p - num_p * tp) / (den_p * den_p);
    let dps_dtp = cp * (1.0 - r * r) / (den_p * den_p);
    let mut r_b = ps_b * dps_dr;
    let tp_b = ps_b * dps_dtp;
    cp_b += ps_b * num_p / den_p;
    cp_b += tp_b * (1.0 - tp * tp) * (-pn / (cp * cp));
    // es = hp (2 - r) te / (1 + (1 - r) te)
    hp_b += es_b * (2.0 - r) * te / den_e;
    r_b += es_b * (-hp * te * den_e + num_e * te) / (den_e * den_e);
    let te_b = es_b * (hp * (2.0 - r) * den_e - num_e * (1.0 - r)) / (den_e * den_e);
    cp_b += te_b * (1.0 - te * te) * (-en / (cp * cp));
    // r = hp / cp
    hp_b += r_b / cp;
    cp_b -= r_b * r / cp;

    theta_bar[0] += cp_b;
    theta_bar[1] += ct_b;
    theta_bar[2] += k_b;
    CellState { hp: hp_b, ht: ht_b }
}

/// Per-step release fraction of a linear reservoir with time constant
/// `llr` minutes.
pub fn release_fraction(llr: f64, dt: f64) -> f64 {
    -(-dt / (60.0 * llr)).exp_m1()
}

/// `d release_fraction / d llr`.
pub fn release_fraction_derivative(llr: f64, dt: f64) -> f64 {
    let u = dt / (60.0 * llr);
    -(-u).exp() * u / llr
}

/// Routes local runoff through the reservoir cascade.
///
/// On return `release[k]` holds the volume (mm over one cell) leaving cell
/// `k` this step and `hr` the updated stores. `inflow` is scratch space.
pub fn route_step(
    mesh: &Mesh,
    runoff: &[f64],
    alpha: &[f64],
    hr: &mut [f64],
    release: &mut [f64],
    inflow: &mut [f64],
) {
    inflow.iter_mut().for_each(|v| *v = 0.0);
    for &k in mesh.order() {
        let stored = hr[k] + runoff[k] + inflow[k];
        let out = alpha[k] * stored;
        release[k] = out;
        hr[k] = stored - out;
        if let Some(d) = mesh.downstream(k) {
            inflow[d] += out;
        }
    }
}

/// Volume-per-step (mm over a cell) to discharge (m³/s) factor.
pub fn discharge_factor(dx: f64, dt: f64) -> f64 {
    dx * dx * 1e-3 / dt
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationOutput {
    /// `discharge[i][t]` (m³/s) at the i-th requested cell.
    pub discharge: Vec<Vec<f64>>,
    pub final_state: StateFields,
}

/// Stepper over a forcing series; callers drive it one step at a time.
pub struct Stepper<'a> {
    mesh: &'a Mesh,
    params: &'a ParameterFields,
    forcing: &'a ForcingSet,
    alpha: Vec<f64>,
    runoff: Vec<f64>,
    release: Vec<f64>,
    inflow: Vec<f64>,
}

impl<'a> Stepper<'a> {
    pub fn new(mesh: &'a Mesh, params: &'a ParameterFields, forcing: &'a ForcingSet) -> Self {
        let n = mesh.n_cells();
        assert_eq!(params.n_cells(), n, "parameter fields do not conform to the mesh");
        assert_eq!(forcing.n_cells(), n, "forcings do not conform to the mesh");
        let alpha = params.fields[LLR]
            .iter()
            .map(|&l| release_fraction(l, forcing.dt()))
            .collect();
        Self {
            mesh,
            params,
            forcing,
            alpha,
            runoff: vec![0.0; n],
            release: vec![0.0; n],
            inflow: vec![0.0; n],
        }
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    /// Advances `state` by step `t`; released volumes are then available
    /// through [`Stepper::release`], local runoff through [`Stepper::runoff`].
    pub fn step(&mut self, t: usize, state: &mut StateFields) {
        let rain = self.forcing.rain(t);
        let pet = self.forcing.pet(t);
        for k in 0..self.mesh.n_cells() {
            let (q, s) = cell_step(
                rain[k],
                pet[k],
                &self.params.cell(k),
                CellState {
                    hp: state.hp[k],
                    ht: state.ht[k],
                },
            );
            self.runoff[k] = q;
            state.hp[k] = s.hp;
            state.ht[k] = s.ht;
        }
        route_step(
            self.mesh,
            &self.runoff,
            &self.alpha,
            &mut state.hr,
            &mut self.release,
            &mut self.inflow,
        );
    }

    pub fn release(&self) -> &[f64] {
        &self.release
    }

    pub fn runoff(&self) -> &[f64] {
        &self.runoff
    }
}

/// Runs the model over the whole forcing horizon and records discharge at
/// the requested compact cells.
pub fn simulate(
    mesh: &Mesh,
    params: &ParameterFields,
    forcing: &ForcingSet,
    initial: &StateFields,
    at_cells: &[usize],
) -> SimulationOutput {
    let mut state = initial.clone();
    let mut stepper = Stepper::new(mesh, params, forcing);
    let factor = discharge_factor(mesh.dx(), forcing.dt());
    let mut discharge = vec![Vec::with_capacity(forcing.nt()); at_cells.len()];
    for t in 0..forcing.nt() {
        stepper.step(t, &mut state);
        for (series, &k) in discharge.iter_mut().zip(at_cells) {
            series.push(stepper.release()[k] * factor);
        }
    }
    SimulationOutput {
        discharge,
        final_state: state,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::GridGeometry;

    const THETA: CellParams = CellParams {
        cp: 250.0,
        ct: 80.0,
        kexc: 1.5,
        llr: 30.0,
    };

    #[test]
    fn dry_empty_cell_is_inert() {
        let (q, s) = cell_step(0.0, 0.0, &THETA, CellState::default());
        assert_eq!(q, 0.0);
        assert_eq!(s, CellState::default());
    }

    #[test]
    fn water_balance_without_exchange_or_evaporation() {
        for &(hp, ht) in &[(0.0, 0.0), (10.0, 3.0), (200.0, 70.0), (249.0, 79.0)] {
            let theta = CellParams { kexc: 0.0, ..THETA };
            let (q, s) = cell_step(10.0, 0.0, &theta, CellState { hp, ht });
            let storage_gain = (s.hp - hp) + (s.ht - ht);
            assert!((10.0 - q - storage_gain).abs() < 1e-9, "hp={hp} ht={ht}");
        }
    }

    #[test]
    fn full_transfer_store_exchange_equals_kexc() {
        let theta = CellParams { kexc: 2.0, ..THETA };
        let state = CellState { hp: 0.0, ht: theta.ct };
        // with no rain and an empty production store the direct branch
        // carries exactly the exchange flux
        let (q, s) = cell_step(0.0, 0.0, &theta, state);
        let h3 = theta.ct + 2.0;
        let expected_qt = h3 - h3 * (1.0 + (h3 / theta.ct).powi(4)).powf(-0.25);
        assert!((q - (expected_qt + 2.0)).abs() < 1e-12);
        assert!((s.ht - (h3 - expected_qt)).abs() < 1e-12);
    }

    #[test]
    fn cell_adjoint_matches_finite_differences() {
        let cases = [
            (12.0, 0.5, CellState { hp: 80.0, ht: 20.0 }),
            (0.0, 0.3, CellState { hp: 120.0, ht: 55.0 }),
            (3.0, 0.0, CellState { hp: 1.0, ht: 0.5 }),
        ];
        let outputs = |p: f64, e: f64, th: &CellParams, s: CellState| {
            let (q, n) = cell_step(p, e, th, s);
            // arbitrary fixed output weighting
            0.7 * q + 0.3 * n.hp - 0.45 * n.ht
        };
        for (p, e, state) in cases {
            let mut tb = [0.0; 3];
            let sb = cell_step_adjoint(p, e, &THETA, state, 0.7, CellState { hp: 0.3, ht: -0.45 }, &mut tb);
            let h = 1e-6;
            let fd = |f: &dyn Fn(f64) -> f64| (f(h) - f(-h)) / (2.0 * h);
            let d_cp = fd(&|d| outputs(p, e, &CellParams { cp: THETA.cp + d, ..THETA }, state));
            let d_ct = fd(&|d| outputs(p, e, &CellParams { ct: THETA.ct + d, ..THETA }, state));
            let d_k = fd(&|d| outputs(p, e, &CellParams { kexc: THETA.kexc + d, ..THETA }, state));
            let d_hp = fd(&|d| outputs(p, e, &THETA, CellState { hp: state.hp + d, ..state }));
            let d_ht = fd(&|d| outputs(p, e, &THETA, CellState { ht: state.ht + d, ..state }));
            for (a, f) in [(tb[0], d_cp), (tb[1], d_ct), (tb[2], d_k), (sb.hp, d_hp), (sb.ht, d_ht)] {
                assert!((a - f).abs() <= 1e-7 * (1.0 + f.abs()), "adjoint {a} vs fd {f}");
            }
        }
    }

    fn chain3() -> Mesh {
        Mesh::build(GridGeometry::new(1, 3, 1000.0), &[3, 3, 3], &[true; 3], 1000.0).unwrap()
    }

    #[test]
    fn pass_through_limit() {
        let mesh = Mesh::build(GridGeometry::new(1, 1, 100.0), &[0], &[true], 100.0).unwrap();
        let alpha = [release_fraction(1e-9, 3600.0)];
        assert_eq!(alpha[0], 1.0);
        let mut hr = [0.0];
        let mut release = [0.0];
        route_step(&mesh, &[4.0], &alpha, &mut hr, &mut release, &mut [0.0]);
        assert_eq!(release[0], 4.0);
        let q = release[0] * discharge_factor(100.0, 3600.0);
        assert!((q - 4.0 * 1e-3 * 100.0 * 100.0 / 3600.0).abs() < 1e-15);
    }

    #[test]
    fn impulse_cascade_matches_closed_form() {
        // With release fraction a on every cell, the outlet release after an
        // impulse V at the head cell at step 0 is the three-stage cascade
        // response: sum over i+j+k = n of a^3 (1-a)^n multiplicities
        // C(n+2, 2).
        let mesh = chain3();
        let a = 0.3;
        let alpha = [a; 3];
        let mut hr = [0.0; 3];
        let mut rel = [0.0; 3];
        let mut scratch = [0.0; 3];
        for n in 0..30usize {
            let runoff = if n == 0 { [1.0, 0.0, 0.0] } else { [0.0; 3] };
            route_step(&mesh, &runoff, &alpha, &mut hr, &mut rel, &mut scratch);
            let mult = ((n + 2) * (n + 1) / 2) as f64;
            let expected = mult * a.powi(3) * (1.0 - a).powi(n as i32);
            assert!((rel[2] - expected).abs() < 1e-15, "step {n}: {} vs {expected}", rel[2]);
        }
    }

    #[test]
    fn zero_runoff_routes_nothing() {
        let mesh = chain3();
        let mut hr = [0.0; 3];
        let mut rel = [1.0; 3];
        route_step(&mesh, &[0.0; 3], &[0.5; 3], &mut hr, &mut rel, &mut [0.0; 3]);
        assert_eq!(rel, [0.0; 3]);
    }

    #[test]
    fn quiet_catchment_stays_quiet() {
        let mesh = chain3();
        let params = ParameterFields::uniform([300.0, 50.0, 0.0, 60.0], 3);
        let forcing = ForcingSet::dense(3600.0, vec![vec![0.0; 3]; 24], vec![vec![0.0; 3]; 24]).unwrap();
        let out = simulate(&mesh, &params, &forcing, &StateFields::zeros(3), &[2]);
        assert!(out.discharge[0].iter().all(|&q| q == 0.0));
    }
}
