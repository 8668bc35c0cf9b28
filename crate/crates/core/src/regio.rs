//! Regional mappings from descriptor layers to parameter fields.
//!
//! Three control kinds are supported: a spatially uniform vector, a bounded
//! multivariate polynomial (multi-linear when exponents are pinned to one)
//! and a per-cell multilayer perceptron. Each provides a forward map and an
//! exact vector-Jacobian product.

use std::fmt::Write as _;

use log::warn;
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::adjoint::CostGradientFields;
use crate::hydro::{ParameterFields, N_PARAMS};
use crate::io::MappingKind;

/// Interval for free polynomial exponents.
pub const BETA_RANGE: (f64, f64) = (0.5, 2.0);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RegioError {
    #[error("bounds for parameter {index} are not ordered: ({lo}, {hi})")]
    InvalidBounds { index: usize, lo: f64, hi: f64 },
    #[error("{what}: expected {expected}, got {actual}")]
    ShapeMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("descriptor {descriptor} is negative at cell {cell} under a fractional exponent")]
    NegativeBase { descriptor: usize, cell: usize },
    #[error("background value {value} for parameter {param} lies outside its bounds")]
    BackgroundOutOfBounds { param: usize, value: f64 },
    #[error("hidden width {width} exceeds sqrt(N_D * N_x) = {limit:.2}")]
    HiddenTooWide { width: usize, limit: f64 },
    #[error("control file: {0}")]
    Parse(String),
}

/// Per-parameter open intervals `(l_k, u_k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Bounds {
    pairs: Vec<(f64, f64)>,
}

impl Bounds {
    pub fn new(pairs: Vec<(f64, f64)>) -> Result<Self, RegioError> {
        for (index, &(lo, hi)) in pairs.iter().enumerate() {
            if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(RegioError::InvalidBounds { index, lo, hi });
            }
        }
        Ok(Self { pairs })
    }

    /// `cp, ct in (1e-6, 1000)`, `kexc in (-50, 50)`, `llr in (1e-6, 1000)`.
    pub fn hydro_default() -> Self {
        Self {
            pairs: vec![(1e-6, 1000.0), (1e-6, 1000.0), (-50.0, 50.0), (1e-6, 1000.0)],
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn get(&self, k: usize) -> (f64, f64) {
        self.pairs[k]
    }

    pub fn pairs(&self) -> &[(f64, f64)] {
        &self.pairs
    }

    pub fn midpoints(&self) -> Vec<f64> {
        self.pairs.iter().map(|&(l, u)| 0.5 * (l + u)).collect()
    }

    pub fn contains(&self, k: usize, v: f64) -> bool {
        let (l, u) = self.pairs[k];
        l < v && v < u
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `l + (u - l) / (1 + exp(-z))`, kept strictly inside `(l, u)` once the
/// sigmoid saturates in floating point.
pub fn sigmoid_scale(z: f64, l: f64, u: f64) -> f64 {
    scale_open(sigmoid(z), l, u)
}

fn scale_open(s: f64, l: f64, u: f64) -> f64 {
    (l + (u - l) * s).clamp(l.next_up(), u.next_down())
}

/// `ln((y - l) / (u - y))`.
pub fn inverse_sigmoid_scale(y: f64, l: f64, u: f64) -> f64 {
    ((y - l) / (u - y)).ln()
}

pub fn sigmoid_scale_derivative(z: f64, l: f64, u: f64) -> f64 {
    let s = sigmoid(z);
    (u - l) * s * (1.0 - s)
}

/// Coefficients of `theta_k = s_k(a_k0 + sum_d a_kd D_d^b_kd)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolynomialControl {
    pub n_params: usize,
    pub n_descriptors: usize,
    /// Exponents pinned to one.
    pub linear: bool,
    /// `intercept[k]`
    pub intercept: Vec<f64>,
    /// `coef[k * n_descriptors + d]`
    pub coef: Vec<f64>,
    /// `exponent[k * n_descriptors + d]`, all ones in linear mode
    pub exponent: Vec<f64>,
}

impl PolynomialControl {
    pub fn zeros(n_params: usize, n_descriptors: usize, linear: bool) -> Self {
        Self {
            n_params,
            n_descriptors,
            linear,
            intercept: vec![0.0; n_params],
            coef: vec![0.0; n_params * n_descriptors],
            exponent: vec![1.0; n_params * n_descriptors],
        }
    }

    fn per_param(&self) -> usize {
        1 + self.n_descriptors * if self.linear { 1 } else { 2 }
    }
}

/// Dense layer with `weights[o * n_in + i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpLayer {
    pub n_in: usize,
    pub n_out: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl MlpLayer {
    pub fn zeros(n_in: usize, n_out: usize) -> Self {
        Self {
            n_in,
            n_out,
            weights: vec![0.0; n_in * n_out],
            bias: vec![0.0; n_out],
        }
    }

    pub fn n_weights(&self) -> usize {
        self.n_in * self.n_out + self.n_out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpControl {
    pub layers: Vec<MlpLayer>,
}

impl MlpControl {
    /// Zero network with widths `[n_in, hidden.., n_out]`.
    pub fn zeros(sizes: &[usize]) -> Self {
        Self {
            layers: sizes.windows(2).map(|w| MlpLayer::zeros(w[0], w[1])).collect(),
        }
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s: Vec<usize> = self.layers.first().map(|l| l.n_in).into_iter().collect();
        s.extend(self.layers.iter().map(|l| l.n_out));
        s
    }

    pub fn layer_counts(&self) -> Vec<usize> {
        self.layers.iter().map(MlpLayer::n_weights).collect()
    }

    pub fn n_inputs(&self) -> usize {
        self.layers.first().map_or(0, |l| l.n_in)
    }

    pub fn n_outputs(&self) -> usize {
        self.layers.last().map_or(0, |l| l.n_out)
    }
}

/// Parameter count of a dense network with widths `sizes`.
pub fn mlp_parameter_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

/// Regional control vector.
#[derive(Debug, Clone, PartialEq)]
pub enum RegionalControl {
    Uniform(Vec<f64>),
    Polynomial(PolynomialControl),
    Mlp(MlpControl),
}

impl RegionalControl {
    pub fn kind(&self) -> MappingKind {
        match self {
            RegionalControl::Uniform(_) => MappingKind::Uniform,
            RegionalControl::Polynomial(p) if p.linear => MappingKind::MultiLinear,
            RegionalControl::Polynomial(_) => MappingKind::Polynomial,
            RegionalControl::Mlp(_) => MappingKind::Ann,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            RegionalControl::Uniform(v) => v.len(),
            RegionalControl::Polynomial(p) => p.n_params * p.per_param(),
            RegionalControl::Mlp(m) => m.layer_counts().iter().sum(),
        }
    }

    /// All scalars in canonical order.
    ///
    /// Polynomial: per parameter `[a_k0, (a_kd, b_kd) for d]`, exponents
    /// omitted in linear mode. MLP: per layer, weights row-major then biases.
    pub fn flatten(&self) -> Vec<f64> {
        match self {
            RegionalControl::Uniform(v) => v.clone(),
            RegionalControl::Polynomial(p) => {
                let mut out = Vec::with_capacity(self.dim());
                for k in 0..p.n_params {
                    out.push(p.intercept[k]);
                    for d in 0..p.n_descriptors {
                        let j = k * p.n_descriptors + d;
                        out.push(p.coef[j]);
                        if !p.linear {
                            out.push(p.exponent[j]);
                        }
                    }
                }
                out
            }
            RegionalControl::Mlp(m) => {
                let mut out = Vec::with_capacity(self.dim());
                for l in &m.layers {
                    out.extend_from_slice(&l.weights);
                    out.extend_from_slice(&l.bias);
                }
                out
            }
        }
    }

    /// Copy of `self` with scalars taken from `flat`.
    pub fn with_flat(&self, flat: &[f64]) -> Result<Self, RegioError> {
        if flat.len() != self.dim() {
            return Err(RegioError::ShapeMismatch {
                what: "flat control",
                expected: self.dim(),
                actual: flat.len(),
            });
        }
        let mut out = self.clone();
        let mut it = flat.iter().copied();
        match &mut out {
            RegionalControl::Uniform(v) => v.iter_mut().for_each(|x| *x = it.next().unwrap()),
            RegionalControl::Polynomial(p) => {
                for k in 0..p.n_params {
                    p.intercept[k] = it.next().unwrap();
                    for d in 0..p.n_descriptors {
                        let j = k * p.n_descriptors + d;
                        p.coef[j] = it.next().unwrap();
                        if !p.linear {
                            p.exponent[j] = it.next().unwrap();
                        }
                    }
                }
            }
            RegionalControl::Mlp(m) => {
                for l in &mut m.layers {
                    l.weights.iter_mut().for_each(|x| *x = it.next().unwrap());
                    l.bias.iter_mut().for_each(|x| *x = it.next().unwrap());
                }
            }
        }
        Ok(out)
    }

    /// Box constraints on each flat coordinate.
    ///
    /// Uniform values lie within the parameter bounds, free exponents within
    /// [`BETA_RANGE`]; everything else is unbounded.
    pub fn coordinate_bounds(&self, bounds: &Bounds) -> Vec<(f64, f64)> {
        let free = (f64::NEG_INFINITY, f64::INFINITY);
        match self {
            RegionalControl::Uniform(v) => (0..v.len()).map(|k| bounds.get(k)).collect(),
            RegionalControl::Polynomial(p) => {
                let mut out = Vec::with_capacity(self.dim());
                for _ in 0..p.n_params {
                    out.push(free);
                    for _ in 0..p.n_descriptors {
                        out.push(free);
                        if !p.linear {
                            out.push(BETA_RANGE);
                        }
                    }
                }
                out
            }
            RegionalControl::Mlp(_) => vec![free; self.dim()],
        }
    }
}

fn check_descriptors(descriptors: &[Vec<f64>], n_desc: usize, n_cells: usize) -> Result<(), RegioError> {
    if descriptors.len() != n_desc {
        return Err(RegioError::ShapeMismatch {
            what: "descriptor layers",
            expected: n_desc,
            actual: descriptors.len(),
        });
    }
    for layer in descriptors {
        if layer.len() != n_cells {
            return Err(RegioError::ShapeMismatch {
                what: "descriptor cells",
                expected: n_cells,
                actual: layer.len(),
            });
        }
    }
    Ok(())
}

fn check_param_count(n: usize, bounds: &Bounds) -> Result<(), RegioError> {
    if n != N_PARAMS || bounds.len() != N_PARAMS {
        return Err(RegioError::ShapeMismatch {
            what: "parameter count",
            expected: N_PARAMS,
            actual: if n != N_PARAMS { n } else { bounds.len() },
        });
    }
    Ok(())
}

/// Broadcasts `values` to every cell.
pub fn map_uniform(values: &[f64], n_cells: usize) -> Result<ParameterFields, RegioError> {
    if values.len() != N_PARAMS {
        return Err(RegioError::ShapeMismatch {
            what: "uniform control",
            expected: N_PARAMS,
            actual: values.len(),
        });
    }
    Ok(ParameterFields::uniform(
        std::array::from_fn(|k| values[k]),
        n_cells,
    ))
}

#[inline]
fn power(base: f64, beta: f64) -> f64 {
    if beta == 1.0 {
        base
    } else {
        base.powf(beta)
    }
}

fn polynomial_z(
    p: &PolynomialControl,
    descriptors: &[Vec<f64>],
    k: usize,
    cell: usize,
) -> f64 {
    let mut z = p.intercept[k];
    for (d, layer) in descriptors.iter().enumerate() {
        let j = k * p.n_descriptors + d;
        z += p.coef[j] * power(layer[cell], if p.linear { 1.0 } else { p.exponent[j] });
    }
    z
}

pub fn map_polynomial(
    descriptors: &[Vec<f64>],
    control: &PolynomialControl,
    bounds: &Bounds,
) -> Result<ParameterFields, RegioError> {
    check_param_count(control.n_params, bounds)?;
    let n_cells = descriptors.first().map_or(0, Vec::len);
    check_descriptors(descriptors, control.n_descriptors, n_cells)?;
    if !control.linear {
        for (d, layer) in descriptors.iter().enumerate() {
            let fractional = (0..control.n_params)
                .any(|k| control.exponent[k * control.n_descriptors + d] != 1.0);
            if let Some(cell) = layer.iter().position(|&v| v < 0.0).filter(|_| fractional) {
                return Err(RegioError::NegativeBase { descriptor: d, cell });
            }
        }
    }
    let fields = std::array::from_fn(|k| {
        let (l, u) = bounds.get(k);
        (0..n_cells)
            .map(|c| sigmoid_scale(polynomial_z(control, descriptors, k, c), l, u))
            .collect()
    });
    Ok(ParameterFields::new(fields))
}

/// Per-cell activations: `pre[j]` before and `post[j]` after each layer's
/// nonlinearity.
struct Activations {
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
}

fn mlp_forward(net: &MlpControl, input: &[f64]) -> Activations {
    let n_layers = net.layers.len();
    let mut pre = Vec::with_capacity(n_layers);
    let mut post: Vec<Vec<f64>> = Vec::with_capacity(n_layers);
    for (j, layer) in net.layers.iter().enumerate() {
        let x = if j == 0 { input } else { &post[j - 1] };
        let z: Vec<f64> = (0..layer.n_out)
            .map(|o| {
                let row = &layer.weights[o * layer.n_in..(o + 1) * layer.n_in];
                layer.bias[o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect();
        let a = if j + 1 == n_layers {
            z.iter().map(|&v| sigmoid(v)).collect()
        } else {
            z.iter().map(|&v| v.max(0.0)).collect()
        };
        pre.push(z);
        post.push(a);
    }
    Activations { pre, post }
}

fn check_mlp(net: &MlpControl, n_desc: usize, bounds: &Bounds) -> Result<(), RegioError> {
    check_param_count(net.n_outputs(), bounds)?;
    for w in net.layers.windows(2) {
        if w[0].n_out != w[1].n_in {
            return Err(RegioError::ShapeMismatch {
                what: "layer width",
                expected: w[0].n_out,
                actual: w[1].n_in,
            });
        }
    }
    for l in &net.layers {
        if l.weights.len() != l.n_in * l.n_out || l.bias.len() != l.n_out {
            return Err(RegioError::ShapeMismatch {
                what: "layer parameters",
                expected: l.n_weights(),
                actual: l.weights.len() + l.bias.len(),
            });
        }
    }
    if net.n_inputs() != n_desc {
        return Err(RegioError::ShapeMismatch {
            what: "network input width",
            expected: n_desc,
            actual: net.n_inputs(),
        });
    }
    Ok(())
}

fn cell_input(descriptors: &[Vec<f64>], cell: usize) -> Vec<f64> {
    descriptors.iter().map(|layer| layer[cell]).collect()
}

pub fn map_mlp(
    descriptors: &[Vec<f64>],
    control: &MlpControl,
    bounds: &Bounds,
) -> Result<ParameterFields, RegioError> {
    check_mlp(control, descriptors.len(), bounds)?;
    let n_cells = descriptors.first().map_or(0, Vec::len);
    check_descriptors(descriptors, descriptors.len(), n_cells)?;
    let mut fields: [Vec<f64>; N_PARAMS] = std::array::from_fn(|_| Vec::with_capacity(n_cells));
    for c in 0..n_cells {
        let act = mlp_forward(control, &cell_input(descriptors, c));
        let out = act.post.last().expect("non-empty network");
        for (k, field) in fields.iter_mut().enumerate() {
            let (l, u) = bounds.get(k);
            field.push(scale_open(out[k], l, u));
        }
    }
    Ok(ParameterFields::new(fields))
}

/// Parameter fields for any control kind.
pub fn map_control(
    control: &RegionalControl,
    descriptors: &[Vec<f64>],
    bounds: &Bounds,
    n_cells: usize,
) -> Result<ParameterFields, RegioError> {
    match control {
        RegionalControl::Uniform(v) => map_uniform(v, n_cells),
        RegionalControl::Polynomial(p) => map_polynomial(descriptors, p, bounds),
        RegionalControl::Mlp(m) => map_mlp(descriptors, m, bounds),
    }
}

/// `(d theta / d rho)^T grad`, flattened in [`RegionalControl::flatten`] order.
pub fn vjp(
    control: &RegionalControl,
    descriptors: &[Vec<f64>],
    bounds: &Bounds,
    grad: &CostGradientFields,
) -> Result<Vec<f64>, RegioError> {
    match control {
        RegionalControl::Uniform(v) => {
            if v.len() != N_PARAMS {
                return Err(RegioError::ShapeMismatch {
                    what: "uniform control",
                    expected: N_PARAMS,
                    actual: v.len(),
                });
            }
            Ok(grad.fields.iter().map(|f| f.iter().sum()).collect())
        }
        RegionalControl::Polynomial(p) => {
            check_param_count(p.n_params, bounds)?;
            let n_cells = grad.fields[0].len();
            check_descriptors(descriptors, p.n_descriptors, n_cells)?;
            let mut out = Vec::with_capacity(control.dim());
            for k in 0..p.n_params {
                let (l, u) = bounds.get(k);
                let zbar: Vec<f64> = (0..n_cells)
                    .map(|c| {
                        let z = polynomial_z(p, descriptors, k, c);
                        grad.fields[k][c] * sigmoid_scale_derivative(z, l, u)
                    })
                    .collect();
                out.push(zbar.iter().sum());
                for (d, layer) in descriptors.iter().enumerate() {
                    let j = k * p.n_descriptors + d;
                    let beta = if p.linear { 1.0 } else { p.exponent[j] };
                    out.push(
                        zbar.iter()
                            .zip(layer)
                            .map(|(zb, &x)| zb * power(x, beta))
                            .sum(),
                    );
                    if !p.linear {
                        out.push(
                            zbar.iter()
                                .zip(layer)
                                .map(|(zb, &x)| {
                                    if x > 0.0 {
                                        zb * p.coef[j] * power(x, beta) * x.ln()
                                    } else {
                                        0.0
                                    }
                                })
                                .sum(),
                        );
                    }
                }
            }
            Ok(out)
        }
        RegionalControl::Mlp(net) => {
            check_mlp(net, descriptors.len(), bounds)?;
            let n_cells = grad.fields[0].len();
            check_descriptors(descriptors, descriptors.len(), n_cells)?;
            let mut gw: Vec<MlpLayer> = net
                .layers
                .iter()
                .map(|l| MlpLayer::zeros(l.n_in, l.n_out))
                .collect();
            let n_layers = net.layers.len();
            for c in 0..n_cells {
                let input = cell_input(descriptors, c);
                let act = mlp_forward(net, &input);
                let out = &act.post[n_layers - 1];
                let mut delta: Vec<f64> = (0..N_PARAMS)
                    .map(|k| {
                        let (l, u) = bounds.get(k);
                        grad.fields[k][c] * (u - l) * out[k] * (1.0 - out[k])
                    })
                    .collect();
                for j in (0..n_layers).rev() {
                    let layer = &net.layers[j];
                    let x = if j == 0 { &input } else { &act.post[j - 1] };
                    let g = &mut gw[j];
                    for o in 0..layer.n_out {
                        let dz = delta[o];
                        if dz == 0.0 {
                            continue;
                        }
                        g.bias[o] += dz;
                        let row = &mut g.weights[o * layer.n_in..(o + 1) * layer.n_in];
                        for (w, v) in row.iter_mut().zip(x) {
                            *w += dz * v;
                        }
                    }
                    if j > 0 {
                        let below = &act.pre[j - 1];
                        delta = (0..layer.n_in)
                            .map(|i| {
                                if below[i] > 0.0 {
                                    (0..layer.n_out)
                                        .map(|o| layer.weights[o * layer.n_in + i] * delta[o])
                                        .sum()
                                } else {
                                    0.0
                                }
                            })
                            .collect();
                    }
                }
            }
            Ok(RegionalControl::Mlp(MlpControl { layers: gw }).flatten())
        }
    }
}

/// Checks hidden widths against `sqrt(n_descriptors * n_cells)`.
///
/// With `allow_wide` an oversized layer only logs a warning.
pub fn check_hidden_widths(
    hidden: &[usize],
    n_descriptors: usize,
    n_cells: usize,
    allow_wide: bool,
) -> Result<(), RegioError> {
    let limit = ((n_descriptors * n_cells) as f64).sqrt();
    for &width in hidden {
        if width as f64 > limit {
            if allow_wide {
                warn!("hidden width {width} exceeds sqrt(N_D * N_x) = {limit:.2}");
            } else {
                return Err(RegioError::HiddenTooWide { width, limit });
            }
        }
    }
    Ok(())
}

/// Architecture requested for [`init_control`].
#[derive(Debug, Clone, PartialEq)]
pub enum ControlShape {
    Uniform,
    Polynomial { n_descriptors: usize, linear: bool },
    Mlp { n_descriptors: usize, hidden: Vec<usize> },
}

/// Starting control.
///
/// Uniform and polynomial controls reproduce `background` everywhere; MLP
/// weights use Xavier uniform initialization from `seed` with zero biases.
pub fn init_control(
    shape: &ControlShape,
    seed: u64,
    background: &[f64],
    bounds: &Bounds,
) -> Result<RegionalControl, RegioError> {
    let check_background = || -> Result<(), RegioError> {
        check_param_count(background.len(), bounds)?;
        for (param, &value) in background.iter().enumerate() {
            if !bounds.contains(param, value) {
                return Err(RegioError::BackgroundOutOfBounds { param, value });
            }
        }
        Ok(())
    };
    match shape {
        ControlShape::Uniform => {
            check_background()?;
            Ok(RegionalControl::Uniform(background.to_vec()))
        }
        ControlShape::Polynomial {
            n_descriptors,
            linear,
        } => {
            check_background()?;
            let mut p = PolynomialControl::zeros(N_PARAMS, *n_descriptors, *linear);
            for (k, &v) in background.iter().enumerate() {
                let (l, u) = bounds.get(k);
                p.intercept[k] = inverse_sigmoid_scale(v, l, u);
            }
            Ok(RegionalControl::Polynomial(p))
        }
        ControlShape::Mlp {
            n_descriptors,
            hidden,
        } => {
            let mut sizes = vec![*n_descriptors];
            sizes.extend_from_slice(hidden);
            sizes.push(bounds.len());
            let mut net = MlpControl::zeros(&sizes);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for layer in &mut net.layers {
                let limit = (6.0 / (layer.n_in + layer.n_out) as f64).sqrt();
                let dist = Uniform::new_inclusive(-limit, limit);
                layer.weights.iter_mut().for_each(|w| *w = dist.sample(&mut rng));
            }
            Ok(RegionalControl::Mlp(net))
        }
    }
}

/// Text form: kind tag, shape header, one scalar per line.
pub fn write_control(control: &RegionalControl) -> String {
    let mut s = String::new();
    writeln!(s, "kind {}", control.kind().as_str()).unwrap();
    match control {
        RegionalControl::Uniform(v) => writeln!(s, "shape {}", v.len()).unwrap(),
        RegionalControl::Polynomial(p) => {
            writeln!(s, "shape {} {}", p.n_params, p.n_descriptors).unwrap()
        }
        RegionalControl::Mlp(m) => {
            let sizes: Vec<String> = m.sizes().iter().map(usize::to_string).collect();
            writeln!(s, "shape {}", sizes.join(" ")).unwrap()
        }
    }
    let flat = control.flatten();
    writeln!(s, "values {}", flat.len()).unwrap();
    for v in flat {
        writeln!(s, "{v:.16e}").unwrap();
    }
    s
}

pub fn parse_control(text: &str) -> Result<RegionalControl, RegioError> {
    let bad = |m: &str| RegioError::Parse(m.to_string());
    let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
    let header = |line: Option<&str>, key: &str| -> Result<Vec<String>, RegioError> {
        let line = line.ok_or_else(|| bad(&format!("missing `{key}` line")))?;
        let mut it = line.split_whitespace();
        if it.next() != Some(key) {
            return Err(bad(&format!("expected `{key}` line, got `{line}`")));
        }
        Ok(it.map(str::to_string).collect())
    };
    let kind = header(lines.next(), "kind")?;
    let shape: Vec<usize> = header(lines.next(), "shape")?
        .iter()
        .map(|v| v.parse().map_err(|_| bad("shape must be integers")))
        .collect::<Result<_, _>>()?;
    let count: usize = header(lines.next(), "values")?
        .first()
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| bad("bad values count"))?;
    let values: Vec<f64> = lines
        .map(|l| l.parse().map_err(|_| bad(&format!("bad number `{l}`"))))
        .collect::<Result<_, _>>()?;
    if values.len() != count {
        return Err(RegioError::ShapeMismatch {
            what: "control values",
            expected: count,
            actual: values.len(),
        });
    }
    let template = match (kind.first().map(String::as_str), shape.as_slice()) {
        (Some("uniform"), &[n]) => RegionalControl::Uniform(vec![0.0; n]),
        (Some("multi-linear"), &[k, d]) => {
            RegionalControl::Polynomial(PolynomialControl::zeros(k, d, true))
        }
        (Some("polynomial"), &[k, d]) => {
            RegionalControl::Polynomial(PolynomialControl::zeros(k, d, false))
        }
        (Some("ann"), sizes) if sizes.len() >= 2 => RegionalControl::Mlp(MlpControl::zeros(sizes)),
        _ => return Err(bad("unknown kind or shape")),
    };
    template.with_flat(&values)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_bounds() -> Bounds {
        Bounds::new(vec![(0.0, 1000.0), (0.0, 1000.0), (-50.0, 50.0), (1.0, 100.0)]).unwrap()
    }

    #[test]
    fn sigmoid_midpoint_and_limits() {
        assert_eq!(sigmoid_scale(0.0, 0.0, 1000.0), 500.0);
        assert!(sigmoid_scale(40.0, 0.0, 1000.0) < 1000.0);
        assert!(sigmoid_scale(-800.0, 1e-6, 1000.0) > 1e-6);
    }

    #[test]
    fn sigmoid_round_trip() {
        // the inverse amplifies the rounding of s(z) by roughly e^|z|
        for i in 0..=240 {
            let z = -30.0 + 0.25 * i as f64;
            let back = inverse_sigmoid_scale(sigmoid_scale(z, -2.0, 5.0), -2.0, 5.0);
            let tol = 1e-12_f64.max(8.0 * f64::EPSILON * (1.0 + z.abs().exp()));
            assert!((back - z).abs() <= tol, "z={z} back={back}");
        }
    }

    #[test]
    fn bounds_reject_unordered() {
        assert!(matches!(
            Bounds::new(vec![(1.0, 1.0)]),
            Err(RegioError::InvalidBounds { index: 0, .. })
        ));
    }

    #[test]
    fn flat_sizes() {
        let lin = PolynomialControl::zeros(4, 7, true);
        assert_eq!(RegionalControl::Polynomial(lin).dim(), 32);
        let free = PolynomialControl::zeros(4, 7, false);
        assert_eq!(RegionalControl::Polynomial(free).dim(), 60);
        let net = MlpControl::zeros(&[7, 96, 48, 16, 4]);
        assert_eq!(net.layer_counts(), vec![768, 4656, 784, 68]);
        assert_eq!(RegionalControl::Mlp(net).dim(), 6276);
        assert_eq!(mlp_parameter_count(&[7, 96, 48, 16, 4]), 6276);
    }

    #[test]
    fn background_initialization_reproduces_uniform_field() {
        let b = unit_bounds();
        let bg = [300.0, 42.0, -3.5, 17.0];
        let d = vec![vec![0.0, 0.5, 1.0], vec![1.0, 0.2, 0.0]];
        for linear in [true, false] {
            let shape = ControlShape::Polynomial {
                n_descriptors: 2,
                linear,
            };
            let c = init_control(&shape, 0, &bg, &b).unwrap();
            let f = map_control(&c, &d, &b, 3).unwrap();
            for k in 0..4 {
                for &v in f.field(k) {
                    assert!((v - bg[k]).abs() <= 1e-12 * bg[k].abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn midpoint_background_gives_zero_intercepts() {
        let b = unit_bounds();
        let shape = ControlShape::Polynomial {
            n_descriptors: 1,
            linear: true,
        };
        match init_control(&shape, 0, &b.midpoints(), &b).unwrap() {
            RegionalControl::Polynomial(p) => assert!(p.intercept.iter().all(|&a| a == 0.0)),
            _ => unreachable!(),
        }
    }

    #[test]
    fn out_of_bounds_background() {
        let b = unit_bounds();
        let err = init_control(&ControlShape::Uniform, 0, &[2000.0, 1.0, 0.0, 2.0], &b);
        assert_eq!(
            err,
            Err(RegioError::BackgroundOutOfBounds {
                param: 0,
                value: 2000.0
            })
        );
    }

    #[test]
    fn squared_descriptor_pre_activation() {
        let b = Bounds::new(vec![(-1e3, 1e3); 4]).unwrap();
        let xs = vec![0.0, 0.25, 0.5, 1.0];
        let mut p = PolynomialControl::zeros(4, 1, false);
        p.intercept[0] = 0.3;
        p.coef[0] = 1.0;
        p.exponent[0] = 2.0;
        let f = map_polynomial(&[xs.clone()], &p, &b).unwrap();
        for (c, &x) in xs.iter().enumerate() {
            let z = inverse_sigmoid_scale(f.field(0)[c], -1e3, 1e3);
            assert!((z - (0.3 + x * x)).abs() < 1e-9);
        }
    }

    #[test]
    fn linear_mode_matches_unit_exponents_bit_exactly() {
        let b = unit_bounds();
        let d = vec![vec![0.1, 0.7, 0.0], vec![0.9, 0.3, 1.0]];
        let mut lin = PolynomialControl::zeros(4, 2, true);
        lin.intercept = vec![0.3, -1.2, 0.5, 2.0];
        lin.coef = vec![0.4, -0.8, 1.1, 0.2, -0.6, 0.9, 1.7, -2.0];
        let mut free = lin.clone();
        free.linear = false;
        let a = map_polynomial(&d, &lin, &b).unwrap();
        let c = map_polynomial(&d, &free, &b).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn negative_base_with_fractional_exponent() {
        let b = unit_bounds();
        let mut p = PolynomialControl::zeros(4, 1, false);
        p.exponent[0] = 0.5;
        let err = map_polynomial(&[vec![0.2, -0.1]], &p, &b).unwrap_err();
        assert_eq!(err, RegioError::NegativeBase { descriptor: 0, cell: 1 });
    }

    #[test]
    fn zero_network_maps_to_midpoints() {
        let b = unit_bounds();
        let net = MlpControl::zeros(&[2, 5, 4]);
        let f = map_mlp(&[vec![0.1, 0.9], vec![0.4, 0.2]], &net, &b).unwrap();
        for k in 0..4 {
            let (l, u) = b.get(k);
            assert!(f.field(k).iter().all(|&v| v == 0.5 * (l + u)));
        }
    }

    #[test]
    fn mlp_shape_errors() {
        let b = unit_bounds();
        let net = MlpControl::zeros(&[3, 5, 4]);
        assert!(matches!(
            map_mlp(&[vec![0.1], vec![0.4]], &net, &b),
            Err(RegioError::ShapeMismatch { .. })
        ));
        let net = MlpControl::zeros(&[2, 5, 3]);
        assert!(matches!(
            map_mlp(&[vec![0.1], vec![0.4]], &net, &b),
            Err(RegioError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn uniform_vjp_sums() {
        let mut g = CostGradientFields::zeros(3);
        g.fields[0] = vec![1.0, 2.0, 3.5];
        g.fields[3] = vec![-1.0, 0.0, 0.25];
        let c = RegionalControl::Uniform(vec![1.0; 4]);
        let out = vjp(&c, &[], &unit_bounds(), &g).unwrap();
        assert_eq!(out, vec![6.5, 0.0, 0.0, -0.75]);
    }

    #[test]
    fn linear_vjp_two_cell_symbolic() {
        let b = unit_bounds();
        let d = vec![vec![0.2, 0.8]];
        let mut p = PolynomialControl::zeros(4, 1, true);
        p.intercept = vec![0.1, -0.3, 0.2, 0.0];
        p.coef = vec![0.5, 1.0, -2.0, 0.7];
        let mut g = CostGradientFields::zeros(2);
        for k in 0..4 {
            g.fields[k] = vec![1.0 + k as f64, -0.5 * k as f64 + 0.25];
        }
        let c = RegionalControl::Polynomial(p.clone());
        let out = vjp(&c, &d, &b, &g).unwrap();
        for k in 0..4 {
            let (l, u) = b.get(k);
            let mut e0 = 0.0;
            let mut e1 = 0.0;
            for x in 0..2 {
                let z = p.intercept[k] + p.coef[k] * d[0][x];
                let s = 1.0 / (1.0 + (-z).exp());
                let ds = (u - l) * s * (1.0 - s);
                e0 += g.fields[k][x] * ds;
                e1 += g.fields[k][x] * ds * d[0][x];
            }
            assert!((out[2 * k] - e0).abs() < 1e-10 * e0.abs().max(1.0));
            assert!((out[2 * k + 1] - e1).abs() < 1e-10 * e1.abs().max(1.0));
        }
    }

    #[test]
    fn xavier_moments() {
        let b = Bounds::hydro_default();
        let shape = ControlShape::Mlp {
            n_descriptors: 200,
            hidden: vec![300],
        };
        let c = init_control(&shape, 7, &[], &b).unwrap();
        let RegionalControl::Mlp(net) = c else { unreachable!() };
        let w = &net.layers[0].weights;
        assert!(w.len() >= 50_000);
        let n = w.len() as f64;
        let mean = w.iter().sum::<f64>() / n;
        let var = w.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let expected: f64 = 2.0 / 500.0;
        assert!(mean.abs() < 0.05 * expected.sqrt());
        assert!((var - expected).abs() < 0.05 * expected);
        assert!(net.layers.iter().all(|l| l.bias.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn xavier_is_deterministic() {
        let b = Bounds::hydro_default();
        let shape = ControlShape::Mlp {
            n_descriptors: 3,
            hidden: vec![8, 4],
        };
        let a = init_control(&shape, 11, &[], &b).unwrap();
        assert_eq!(a, init_control(&shape, 11, &[], &b).unwrap());
        assert_ne!(a, init_control(&shape, 12, &[], &b).unwrap());
    }

    #[test]
    fn hidden_width_guardrail() {
        assert!(check_hidden_widths(&[10], 4, 25, false).is_ok());
        assert!(matches!(
            check_hidden_widths(&[11], 4, 25, false),
            Err(RegioError::HiddenTooWide { width: 11, .. })
        ));
        assert!(check_hidden_widths(&[11], 4, 25, true).is_ok());
    }

    #[test]
    fn control_text_round_trip() {
        let b = Bounds::hydro_default();
        let shape = ControlShape::Mlp {
            n_descriptors: 3,
            hidden: vec![5],
        };
        let controls = vec![
            RegionalControl::Uniform(vec![0.1, 1.0 / 3.0, -7.25e-12, 999.999]),
            RegionalControl::Polynomial(PolynomialControl {
                n_params: 4,
                n_descriptors: 1,
                linear: false,
                intercept: vec![0.1, 0.2, 0.3, std::f64::consts::PI],
                coef: vec![1e-300, -2.0, 3.0, 4.0],
                exponent: vec![0.5, 1.0, 2.0, 1.2345678901234567],
            }),
            init_control(&shape, 3, &[], &b).unwrap(),
        ];
        for c in controls {
            let text = write_control(&c);
            assert_eq!(parse_control(&text).unwrap(), c);
        }
    }
}
