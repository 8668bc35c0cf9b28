use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regiohydro::adjoint::{cost, grad_theta, CheckpointPlan, HydroProblem};
use regiohydro::cost::CostSpec;
use regiohydro::hydro::{cell_step, route_step, simulate, CellParams, CellState, ParameterFields, StateFields};
use regiohydro::io::{ForcingSet, GaugeRole};
use regiohydro::optimize::{twin_generate, Dataset, TwinSpec};
use regiohydro::regio::Bounds;

fn twin(nrows: usize, nt: usize, seed: u64) -> Dataset {
    let spec = TwinSpec {
        seed,
        nrows,
        ncols: nrows,
        nt,
        n_calibration: 2,
        n_validation: 0,
        ..TwinSpec::default()
    };
    twin_generate(&spec).unwrap().dataset
}

fn random_params(n: usize, rng: &mut ChaCha8Rng) -> ParameterFields {
    let bounds = Bounds::hydro_default();
    ParameterFields::new(std::array::from_fn(|k| {
        let (l, u) = bounds.get(k);
        (0..n).map(|_| l + (u - l) * rng.gen_range(0.05..0.95)).collect()
    }))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn stores_stay_within_capacity(
        cp in 1e-3f64..2000.0,
        ct in 1e-3f64..2000.0,
        kexc in -50.0f64..50.0,
        fp in 0.0f64..=1.0,
        ft in 0.0f64..=1.0,
        p in prop_oneof![Just(0.0), 0.0f64..200.0],
        e in prop_oneof![Just(0.0), 0.0f64..20.0],
    ) {
        let theta = CellParams { cp, ct, kexc, llr: 60.0 };
        let (q, s) = cell_step(p, e, &theta, CellState { hp: fp * cp, ht: ft * ct });
        prop_assert!(q.is_finite() && q >= 0.0);
        prop_assert!((0.0..=cp).contains(&s.hp), "hp {} cp {}", s.hp, cp);
        prop_assert!((0.0..=ct).contains(&s.ht), "ht {} ct {}", s.ht, ct);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn forcing_dense_sparse_dense_is_identity(
        nt in 1usize..40,
        n in 1usize..12,
        wet in 0.0f64..1.0,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rain: Vec<Vec<f64>> = (0..nt)
            .map(|_| {
                let storm = rng.gen::<f64>() < wet;
                (0..n).map(|_| if storm { rng.gen_range(0.0..30.0) } else { 0.0 }).collect()
            })
            .collect();
        let pet: Vec<Vec<f64>> = (0..nt).map(|_| (0..n).map(|_| rng.gen_range(0.0..0.5)).collect()).collect();
        let dense = ForcingSet::dense(3600.0, rain, pet).unwrap();
        let back = dense.to_sparse().to_dense();
        prop_assert_eq!(&back, &dense);
        for t in 0..nt {
            prop_assert!(back.rain(t).iter().zip(dense.rain(t)).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn discharge_ignores_future_rain(seed in any::<u64>(), cut in 5usize..55, bump in 0.5f64..40.0) {
        let data = twin(6, 60, seed % 4);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = random_params(data.mesh.n_cells(), &mut rng);
        let n = data.mesh.n_cells();
        let mut rain: Vec<Vec<f64>> = (0..60).map(|t| data.forcing.rain(t).to_vec()).collect();
        let pet: Vec<Vec<f64>> = (0..60).map(|t| data.forcing.pet(t).to_vec()).collect();
        let base = ForcingSet::dense(data.forcing.dt(), rain.clone(), pet.clone()).unwrap();
        for row in rain.iter_mut().skip(cut) {
            for v in row.iter_mut() {
                *v += bump;
            }
        }
        let later = ForcingSet::dense(data.forcing.dt(), rain, pet).unwrap();
        let cells: Vec<usize> = (0..n).collect();
        let init = StateFields::initial(&params);
        let a = simulate(&data.mesh, &params, &base, &init, &cells);
        let b = simulate(&data.mesh, &params, &later, &init, &cells);
        for (sa, sb) in a.discharge.iter().zip(&b.discharge) {
            prop_assert!(sa[..cut].iter().zip(&sb[..cut]).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        let outlet = data.mesh.main_outlet();
        prop_assert!(a.discharge[outlet][cut..] != b.discharge[outlet][cut..]);
    }

    #[test]
    fn routing_is_linear_in_runoff(seed in any::<u64>()) {
        let data = twin(7, 2, seed % 4);
        let mesh = &data.mesh;
        let n = mesh.n_cells();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let runoff: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..10.0)).collect();
        let alpha: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..1.0)).collect();
        let hr0: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..5.0)).collect();
        let release = |scale: f64| {
            let scaled: Vec<f64> = runoff.iter().map(|r| scale * r).collect();
            let (mut hr, mut out, mut scratch) = (hr0.clone(), vec![0.0; n], vec![0.0; n]);
            route_step(mesh, &scaled, &alpha, &mut hr, &mut out, &mut scratch);
            out
        };
        let (zero, one, two) = (release(0.0), release(1.0), release(2.0));
        for k in 0..n {
            let (d1, d2) = (one[k] - zero[k], two[k] - zero[k]);
            prop_assert!((d2 - 2.0 * d1).abs() <= 1e-12 * d2.abs().max(1.0));
        }
    }
}

fn problem_parts(nrows: usize, nt: usize, seed: u64) -> (Dataset, regiohydro::mesh::GaugeSet, CostSpec) {
    let data = twin(nrows, nt, seed);
    let gauges = data.gauge_set(GaugeRole::Calibration, nt).unwrap();
    let spec = CostSpec::equal_weights(gauges.len(), 5, nt);
    (data, gauges, spec)
}

#[test]
fn checkpoint_interval_leaves_gradient_bit_identical() {
    let (data, gauges, spec) = problem_parts(8, 130, 2);
    let problem = HydroProblem {
        mesh: &data.mesh,
        forcing: &data.forcing,
        gauges: &gauges,
        spec: &spec,
    };
    let params = random_params(data.mesh.n_cells(), &mut ChaCha8Rng::seed_from_u64(1));
    let reference = grad_theta(&problem, &params, CheckpointPlan::new(1)).unwrap();
    for interval in [8, 64, 130, 500] {
        let g = grad_theta(&problem, &params, CheckpointPlan::new(interval)).unwrap();
        assert_eq!(g.value.to_bits(), reference.value.to_bits());
        for p in 0..4 {
            let same = g.gradient.fields[p]
                .iter()
                .zip(&reference.gradient.fields[p])
                .all(|(a, b)| a.to_bits() == b.to_bits());
            assert!(same, "interval {interval} param {p}");
        }
    }
}

#[test]
fn gradient_vanishes_outside_gauged_catchments() {
    let (data, gauges, spec) = problem_parts(12, 120, 1);
    let problem = HydroProblem {
        mesh: &data.mesh,
        forcing: &data.forcing,
        gauges: &gauges,
        spec: &spec,
    };
    let gauged = gauges.gauged();
    assert!(gauged.iter().any(|g| !g), "test needs ungauged cells");
    let params = random_params(data.mesh.n_cells(), &mut ChaCha8Rng::seed_from_u64(3));
    let g = grad_theta(&problem, &params, CheckpointPlan::sqrt(120)).unwrap();
    for p in 0..4 {
        for (k, &v) in g.gradient.fields[p].iter().enumerate() {
            if !gauged[k] {
                assert_eq!(v, 0.0, "param {p} cell {k}");
            }
        }
    }
    let inside = (0..data.mesh.n_cells()).filter(|&k| gauged[k] && g.gradient.fields[0][k] != 0.0).count();
    assert!(inside > 0);
}

#[test]
fn gradient_agrees_with_directional_differences() {
    let (data, gauges, spec) = problem_parts(6, 80, 0);
    let problem = HydroProblem {
        mesh: &data.mesh,
        forcing: &data.forcing,
        gauges: &gauges,
        spec: &spec,
    };
    let bounds = Bounds::hydro_default();
    let n = data.mesh.n_cells();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let params = random_params(n, &mut rng);
        let g = grad_theta(&problem, &params, CheckpointPlan::sqrt(80)).unwrap();
        // direction scaled per parameter to its bound width
        let v: [Vec<f64>; 4] = std::array::from_fn(|k| {
            let (l, u) = bounds.get(k);
            (0..n).map(|_| (u - l) * rng.gen_range(-1.0..1.0)).collect()
        });
        let analytic: f64 = (0..4)
            .map(|k| g.gradient.fields[k].iter().zip(&v[k]).map(|(a, b)| a * b).sum::<f64>())
            .sum();
        let shifted = |s: f64| {
            ParameterFields::new(std::array::from_fn(|k| {
                params.fields[k].iter().zip(&v[k]).map(|(p, d)| p + s * d).collect()
            }))
        };
        // best agreement over a short step ladder: large steps may cross a
        // store clamp, small ones drown in round-off when the product cancels
        let best = [1e-4, 3e-5, 1e-5, 3e-6, 1e-6]
            .iter()
            .map(|&eps| {
                let up = cost(&problem, &shifted(eps)).unwrap();
                let down = cost(&problem, &shifted(-eps)).unwrap();
                let numeric = (up - down) / (2.0 * eps);
                (analytic - numeric).abs() / analytic.abs().max(numeric.abs())
            })
            .fold(f64::INFINITY, f64::min);
        worst = worst.max(best);
    }
    assert!(worst < 1e-5, "worst relative mismatch {worst:e}");
}
