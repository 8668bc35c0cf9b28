//! Calibration cost and validation metrics.
//!
//! The calibration cost is the weighted sum over gauges of `1 - NSE`. Missing
//! observations (see [`crate::mesh::is_missing`]) drop the paired step from
//! every sum, the observed mean included. KGE uses population standard
//! deviations.

use std::ops::Range;

use log::warn;
use thiserror::Error;

use crate::mesh::is_missing;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CostError {
    #[error("observations are constant or missing (gauge {gauge})")]
    DegenerateObservations { gauge: usize },
    #[error("every gauge has degenerate observations")]
    AllGaugesDegenerate,
    #[error("baseline score is zero")]
    ZeroBaseline,
    #[error("event window {0:?} is empty")]
    EmptyEvent(Range<usize>),
    #[error("series lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("cost weights must sum to one, got {0}")]
    InvalidWeights(f64),
    #[error("evaluation window {start}..{end} exceeds horizon {nt}")]
    WindowOutOfRange { start: usize, end: usize, nt: usize },
}

fn pairs<'a>(sim: &'a [f64], obs: &'a [f64]) -> impl Iterator<Item = (f64, f64)> + 'a {
    sim.iter()
        .zip(obs)
        .filter(|(_, o)| !is_missing(**o))
        .map(|(s, o)| (*s, *o))
}

fn check_len(sim: &[f64], obs: &[f64]) -> Result<(), CostError> {
    if sim.len() != obs.len() {
        return Err(CostError::LengthMismatch(sim.len(), obs.len()));
    }
    Ok(())
}

/// Observed mean and sum of squared deviations over non-missing steps.
fn observed_spread(obs: &[f64]) -> Option<(f64, f64)> {
    let valid: Vec<f64> = obs.iter().copied().filter(|o| !is_missing(*o)).collect();
    if valid.len() < 2 {
        return None;
    }
    let mean = valid.iter().sum::<f64>() / valid.len() as f64;
    let ss: f64 = valid.iter().map(|o| (o - mean) * (o - mean)).sum();
    (ss > 0.0).then_some((mean, ss))
}

/// Nash-Sutcliffe efficiency, in `(-inf, 1]`.
pub fn nse(sim: &[f64], obs: &[f64]) -> Result<f64, CostError> {
    check_len(sim, obs)?;
    let (_, ss) = observed_spread(obs).ok_or(CostError::DegenerateObservations { gauge: 0 })?;
    let err: f64 = pairs(sim, obs).map(|(s, o)| (o - s) * (o - s)).sum();
    Ok(1.0 - err / ss)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KgeComponents {
    /// Pearson correlation.
    pub r: f64,
    /// Mean ratio `mean(sim) / mean(obs)`.
    pub beta: f64,
    /// Variability ratio `std(sim) / std(obs)`.
    pub alpha: f64,
}

pub fn kge_components(sim: &[f64], obs: &[f64]) -> Result<KgeComponents, CostError> {
    check_len(sim, obs)?;
    let p: Vec<(f64, f64)> = pairs(sim, obs).collect();
    let degenerate = CostError::DegenerateObservations { gauge: 0 };
    if p.len() < 2 {
        return Err(degenerate);
    }
    let n = p.len() as f64;
    let ms = p.iter().map(|x| x.0).sum::<f64>() / n;
    let mo = p.iter().map(|x| x.1).sum::<f64>() / n;
    let vs = p.iter().map(|x| (x.0 - ms).powi(2)).sum::<f64>() / n;
    let vo = p.iter().map(|x| (x.1 - mo).powi(2)).sum::<f64>() / n;
    let cov = p.iter().map(|x| (x.0 - ms) * (x.1 - mo)).sum::<f64>() / n;
    if mo == 0.0 || vo <= 0.0 {
        return Err(degenerate);
    }
    let r = if vs > 0.0 { cov / (vs * vo).sqrt() } else { 0.0 };
    Ok(KgeComponents {
        r,
        beta: ms / mo,
        alpha: (vs / vo).sqrt(),
    })
}

/// KGE with component weights `a` (summing to one).
pub fn kge_weighted(sim: &[f64], obs: &[f64], a: [f64; 3]) -> Result<f64, CostError> {
    let c = kge_components(sim, obs)?;
    let dist = a[0] * (c.r - 1.0).powi(2) + a[1] * (c.beta - 1.0).powi(2) + a[2] * (c.alpha - 1.0).powi(2);
    Ok(1.0 - dist)
}

/// KGE with equal component weights.
pub fn kge(sim: &[f64], obs: &[f64]) -> Result<f64, CostError> {
    kge_weighted(sim, obs, [1.0 / 3.0; 3])
}

/// Relative improvement `(a - b) / |b|` of score `a` over baseline `b`.
pub fn improvement_rate(nse_a: f64, nse_b: f64) -> Result<f64, CostError> {
    if nse_b == 0.0 {
        return Err(CostError::ZeroBaseline);
    }
    Ok((nse_a - nse_b) / nse_b.abs())
}

/// Weights and evaluation window of the multi-gauge cost.
#[derive(Debug, Clone, PartialEq)]
pub struct CostSpec {
    pub weights: Vec<f64>,
    /// First evaluated step (end of warm-up).
    pub start: usize,
    /// One past the last evaluated step.
    pub end: usize,
}

impl CostSpec {
    pub fn equal_weights(n_gauges: usize, start: usize, end: usize) -> Self {
        Self {
            weights: vec![1.0 / n_gauges as f64; n_gauges],
            start,
            end,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostEvaluation {
    pub value: f64,
    /// `1 - NSE` per gauge, `None` for excluded gauges.
    pub per_gauge: Vec<Option<f64>>,
    /// Weights after renormalization over evaluable gauges.
    pub effective_weights: Vec<f64>,
    /// `dJ/dQ_g(t)` over the full horizon, zero outside the window and on
    /// missing steps.
    pub sensitivities: Vec<Vec<f64>>,
}

/// `J = sum_g w_g (1 - NSE_g)` over `spec.start..spec.end` together with its
/// derivative with respect to every simulated discharge value.
///
/// Gauges with degenerate observations are dropped and the remaining weights
/// renormalized.
pub fn multi_gauge_cost(
    sim: &[Vec<f64>],
    obs: &[&[f64]],
    spec: &CostSpec,
) -> Result<CostEvaluation, CostError> {
    let n = sim.len();
    if obs.len() != n || spec.weights.len() != n {
        return Err(CostError::LengthMismatch(n, obs.len().min(spec.weights.len())));
    }
    if n > 1 {
        let sum: f64 = spec.weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(CostError::InvalidWeights(sum));
        }
    }
    let mut per_gauge = vec![None; n];
    let mut spreads = vec![None; n];
    for g in 0..n {
        check_len(&sim[g], obs[g])?;
        let nt = sim[g].len();
        if spec.start > spec.end || spec.end > nt {
            return Err(CostError::WindowOutOfRange {
                start: spec.start,
                end: spec.end,
                nt,
            });
        }
        let o = &obs[g][spec.start..spec.end];
        let s = &sim[g][spec.start..spec.end];
        match observed_spread(o) {
            Some((_, ss)) => {
                let err: f64 = pairs(s, o).map(|(s, o)| (o - s) * (o - s)).sum();
                per_gauge[g] = Some(err / ss);
                spreads[g] = Some(ss);
            }
            None => warn!("gauge {g}: degenerate observations, excluded from the cost"),
        }
    }
    let live: f64 = (0..n).filter(|&g| per_gauge[g].is_some()).map(|g| spec.weights[g]).sum();
    if per_gauge.iter().all(Option::is_none) {
        return Err(if n == 1 {
            CostError::DegenerateObservations { gauge: 0 }
        } else {
            CostError::AllGaugesDegenerate
        });
    }
    let effective_weights: Vec<f64> = (0..n)
        .map(|g| if per_gauge[g].is_some() { spec.weights[g] / live } else { 0.0 })
        .collect();
    let value = (0..n)
        .filter_map(|g| per_gauge[g].map(|j| effective_weights[g] * j))
        .sum();
    let sensitivities = (0..n)
        .map(|g| {
            let mut d = vec![0.0; sim[g].len()];
            if let Some(ss) = spreads[g] {
                let w = effective_weights[g];
                for t in spec.start..spec.end {
                    let o = obs[g][t];
                    if !is_missing(o) {
                        d[t] = 2.0 * w * (sim[g][t] - o) / ss;
                    }
                }
            }
            d
        })
        .collect();
    Ok(CostEvaluation {
        value,
        per_gauge,
        effective_weights,
        sensitivities,
    })
}

/// Relative errors of flood-event signatures for one event.
#[derive(Debug, Clone, PartialEq)]
pub struct EventSignatures {
    pub window: Range<usize>,
    /// Runoff coefficient error, `None` when the event had no rainfall.
    pub erc: Option<f64>,
    /// Mean event flow error.
    pub eff: f64,
    /// Peak flow error.
    pub epf: f64,
}

/// Catchment context needed for runoff coefficients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EventContext {
    /// Catchment area (m²).
    pub area: f64,
    /// Timestep (s).
    pub dt: f64,
}

fn rel_err(sim: f64, obs: f64) -> f64 {
    (sim - obs).abs() / obs.abs()
}

/// Per-event relative errors of runoff coefficient, mean flow and peak flow.
///
/// `rain` is the catchment-average rainfall (mm per step). Missing observed
/// steps are skipped in both series.
pub fn flood_signatures(
    sim: &[f64],
    obs: &[f64],
    rain: &[f64],
    events: &[Range<usize>],
    ctx: EventContext,
) -> Result<Vec<EventSignatures>, CostError> {
    check_len(sim, obs)?;
    check_len(rain, obs)?;
    events
        .iter()
        .map(|ev| {
            if ev.start >= ev.end || ev.end > obs.len() {
                return Err(CostError::EmptyEvent(ev.clone()));
            }
            let p: Vec<(f64, f64)> = pairs(&sim[ev.clone()], &obs[ev.clone()]).collect();
            if p.is_empty() {
                return Err(CostError::EmptyEvent(ev.clone()));
            }
            let peak_s = p.iter().map(|x| x.0).fold(f64::NEG_INFINITY, f64::max);
            let peak_o = p.iter().map(|x| x.1).fold(f64::NEG_INFINITY, f64::max);
            let vol_s: f64 = p.iter().map(|x| x.0).sum();
            let vol_o: f64 = p.iter().map(|x| x.1).sum();
            let n = p.len() as f64;
            let rain_vol: f64 = rain[ev.clone()].iter().sum::<f64>() * 1e-3 * ctx.area;
            let erc = if rain_vol > 0.0 {
                let rc_s = vol_s * ctx.dt / rain_vol;
                let rc_o = vol_o * ctx.dt / rain_vol;
                Some(rel_err(rc_s, rc_o))
            } else {
                warn!("event {ev:?}: no rainfall, runoff coefficient skipped");
                None
            };
            Ok(EventSignatures {
                window: ev.clone(),
                erc,
                eff: rel_err(vol_s / n, vol_o / n),
                epf: rel_err(peak_s, peak_o),
            })
        })
        .collect()
}

/// Linear-interpolation quantile of the non-missing values.
pub fn quantile(values: &[f64], q: f64) -> Option<f64> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| !is_missing(*x)).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

/// Settings of the simplified threshold segmentation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segmentation {
    pub start_quantile: f64,
    pub end_quantile: f64,
    /// Consecutive steps below the end threshold that close an event.
    pub recession_steps: usize,
    pub min_length: usize,
    /// Events separated by fewer steps are merged.
    pub merge_gap: usize,
}

impl Default for Segmentation {
    fn default() -> Self {
        Self {
            start_quantile: 0.9,
            end_quantile: 0.5,
            recession_steps: 24,
            min_length: 12,
            merge_gap: 12,
        }
    }
}

/// Simplified flood-event segmentation on observed discharge within `window`.
///
/// An event opens when discharge exceeds the start quantile and closes once it
/// has stayed below the end quantile for `recession_steps` steps.
pub fn segment_events(obs: &[f64], window: Range<usize>, seg: Segmentation) -> Vec<Range<usize>> {
    let w = &obs[window.clone()];
    let (Some(q_hi), Some(q_lo)) = (quantile(w, seg.start_quantile), quantile(w, seg.end_quantile)) else {
        return Vec::new();
    };
    let mut raw: Vec<Range<usize>> = Vec::new();
    let mut open: Option<usize> = None;
    let mut below = 0;
    for (i, &q) in w.iter().enumerate() {
        let missing = is_missing(q);
        match open {
            None => {
                if !missing && q > q_hi {
                    open = Some(i);
                    below = 0;
                }
            }
            Some(s) => {
                if !missing && q <= q_lo {
                    below += 1;
                } else {
                    below = 0;
                }
                if below >= seg.recession_steps {
                    raw.push(s..i + 1);
                    open = None;
                }
            }
        }
    }
    if let Some(s) = open {
        raw.push(s..w.len());
    }
    let mut merged: Vec<Range<usize>> = Vec::new();
    for ev in raw {
        match merged.last_mut() {
            Some(last) if ev.start - last.end < seg.merge_gap => last.end = ev.end,
            _ => merged.push(ev),
        }
    }
    merged
        .into_iter()
        .filter(|e| e.len() >= seg.min_length)
        .map(|e| e.start + window.start..e.end + window.start)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::MISSING;

    #[test]
    fn nse_examples() {
        let obs = [1.0, 2.0, 3.0];
        assert_eq!(nse(&obs, &obs).unwrap(), 1.0);
        assert_eq!(nse(&[2.0; 3], &obs).unwrap(), 0.0);
        assert_eq!(nse(&[1.0, 2.0, 5.0], &obs).unwrap(), -1.0);
        assert_eq!(
            nse(&[1.0; 3], &[4.0; 3]),
            Err(CostError::DegenerateObservations { gauge: 0 })
        );
    }

    #[test]
    fn kge_examples() {
        let obs = [1.0, 3.0, 2.0, 5.0, 4.0];
        assert_eq!(kge(&obs, &obs).unwrap(), 1.0);

        let doubled: Vec<f64> = obs.iter().map(|o| 2.0 * o).collect();
        let c = kge_components(&doubled, &obs).unwrap();
        assert_eq!((c.r, c.beta, c.alpha), (1.0, 2.0, 2.0));
        let a = [0.5, 0.3, 0.2];
        assert!((1.0 - kge_weighted(&doubled, &obs, a).unwrap() - (a[1] + a[2])).abs() < 1e-15);

        let shifted: Vec<f64> = obs.iter().map(|o| o + 1.5).collect();
        let c = kge_components(&shifted, &obs).unwrap();
        assert!((c.r - 1.0).abs() < 1e-15 && (c.alpha - 1.0).abs() < 1e-15);
        assert!((c.beta - (1.0 + 1.5 / 3.0)).abs() < 1e-15);
        let dist = 1.0 - kge_weighted(&shifted, &obs, a).unwrap();
        assert!((dist - a[1] * 0.25).abs() < 1e-15);
    }

    #[test]
    fn improvement_examples() {
        assert!((improvement_rate(0.6, 0.5).unwrap() - 0.2).abs() < 1e-15);
        assert_eq!(improvement_rate(0.5, -0.5).unwrap(), 2.0);
        assert_eq!(improvement_rate(0.7, 0.7).unwrap(), 0.0);
        assert_eq!(improvement_rate(0.7, 0.0), Err(CostError::ZeroBaseline));
    }

    #[test]
    fn single_gauge_cost_is_one_minus_nse() {
        let obs = vec![1.0, 2.0, 3.0];
        let sim = vec![vec![1.0, 2.0, 5.0]];
        let c = multi_gauge_cost(&sim, &[&obs], &CostSpec::equal_weights(1, 0, 3)).unwrap();
        assert_eq!(c.value, 2.0);
    }

    #[test]
    fn two_gauges_average() {
        // J*_1 = 0.2, J*_2 = 0.4 by construction: obs spread 2, errors 0.4 and 0.8
        let obs = vec![1.0, 2.0, 3.0];
        let s1 = vec![1.0, 2.0, 3.0 + 0.4f64.sqrt()];
        let s2 = vec![1.0, 2.0, 3.0 + 0.8f64.sqrt()];
        let c = multi_gauge_cost(&[s1, s2], &[&obs, &obs], &CostSpec::equal_weights(2, 0, 3)).unwrap();
        assert!((c.per_gauge[0].unwrap() - 0.2).abs() < 1e-15);
        assert!((c.value - 0.3).abs() < 1e-15);
        let perfect = multi_gauge_cost(
            &[obs.clone(), obs.clone()],
            &[&obs, &obs],
            &CostSpec::equal_weights(2, 0, 3),
        )
        .unwrap();
        assert_eq!(perfect.value, 0.0);
    }

    #[test]
    fn degenerate_gauge_dropped_and_renormalized() {
        let obs = vec![1.0, 2.0, 3.0];
        let flat = vec![2.0; 3];
        let sim = vec![vec![1.0, 2.0, 5.0], vec![0.0; 3]];
        let c = multi_gauge_cost(&sim, &[&obs, &flat], &CostSpec::equal_weights(2, 0, 3)).unwrap();
        assert_eq!(c.effective_weights, vec![1.0, 0.0]);
        assert_eq!(c.value, 2.0);
        assert_eq!(
            multi_gauge_cost(&sim, &[&flat, &flat], &CostSpec::equal_weights(2, 0, 3)),
            Err(CostError::AllGaugesDegenerate)
        );
    }

    #[test]
    fn sensitivities_match_finite_differences() {
        let obs = vec![0.5, 1.0, MISSING, 3.0, 2.0];
        let sim = vec![0.7, 0.8, 1.0, 2.5, 2.2];
        let spec = CostSpec::equal_weights(1, 1, 5);
        let base = multi_gauge_cost(&[sim.clone()], &[&obs], &spec).unwrap();
        for t in 0..5 {
            let h = 1e-6;
            let mut up = sim.clone();
            up[t] += h;
            let mut dn = sim.clone();
            dn[t] -= h;
            let fd = (multi_gauge_cost(&[up], &[&obs], &spec).unwrap().value
                - multi_gauge_cost(&[dn], &[&obs], &spec).unwrap().value)
                / (2.0 * h);
            assert!((fd - base.sensitivities[0][t]).abs() < 1e-8, "t={t}");
        }
        assert_eq!(base.sensitivities[0][0], 0.0);
        assert_eq!(base.sensitivities[0][2], 0.0);
    }

    #[test]
    fn signatures_under_scaling() {
        let obs = vec![1.0, 4.0, 9.0, 3.0];
        let rain = vec![5.0, 2.0, 0.0, 0.0];
        let ctx = EventContext { area: 1e6, dt: 3600.0 };
        let same = flood_signatures(&obs, &obs, &rain, &[0..4], ctx).unwrap();
        assert_eq!((same[0].erc, same[0].eff, same[0].epf), (Some(0.0), 0.0, 0.0));
        let doubled: Vec<f64> = obs.iter().map(|o| 2.0 * o).collect();
        let s = flood_signatures(&doubled, &obs, &rain, &[0..4], ctx).unwrap();
        assert_eq!((s[0].erc, s[0].eff, s[0].epf), (Some(1.0), 1.0, 1.0));
        let dry = flood_signatures(&doubled, &obs, &rain, &[2..4], ctx).unwrap();
        assert_eq!(dry[0].erc, None);
        assert_eq!(
            flood_signatures(&obs, &obs, &rain, &[2..2], ctx),
            Err(CostError::EmptyEvent(2..2))
        );
    }

    #[test]
    fn segmentation_finds_isolated_flood() {
        let mut q = vec![1.0; 200];
        for (i, v) in q.iter_mut().enumerate().skip(50).take(20) {
            *v = 10.0 + (i as f64 - 60.0).abs();
        }
        let events = segment_events(&q, 0..200, Segmentation::default());
        assert_eq!(events.len(), 1);
        assert_eq!(events[0].start, 50);
        // closes after 24 consecutive steps below the median
        assert_eq!(events[0].end, 70 + 24);
    }
}
