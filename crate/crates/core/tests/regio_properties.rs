use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regiohydro::adjoint::CostGradientFields;
use regiohydro::regio::{
    init_control, map_control, vjp, Bounds, ControlShape, PolynomialControl, RegionalControl,
};

fn descriptors(n_desc: usize, n_cells: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..n_desc)
        .map(|_| (0..n_cells).map(|_| rng.gen::<f64>()).collect())
        .collect()
}

fn random_control(kind: usize, n_desc: usize, rng: &mut ChaCha8Rng, bounds: &Bounds) -> RegionalControl {
    match kind {
        0 => RegionalControl::Uniform(
            (0..4)
                .map(|k| {
                    let (l, u) = bounds.get(k);
                    l + (u - l) * rng.gen_range(0.1..0.9)
                })
                .collect(),
        ),
        1 | 2 => {
            let mut p = PolynomialControl::zeros(4, n_desc, kind == 1);
            p.intercept.iter_mut().for_each(|v| *v = rng.gen_range(-2.0..2.0));
            p.coef.iter_mut().for_each(|v| *v = rng.gen_range(-2.0..2.0));
            if kind == 2 {
                p.exponent.iter_mut().for_each(|v| *v = rng.gen_range(0.6..1.9));
            }
            RegionalControl::Polynomial(p)
        }
        _ => {
            let mut control = init_control(
                &ControlShape::Mlp {
                    n_descriptors: n_desc,
                    hidden: vec![6, 5],
                },
                rng.gen(),
                &[],
                bounds,
            )
            .unwrap();
            // zero biases would park whole layers exactly on the ReLU kink
            if let RegionalControl::Mlp(m) = &mut control {
                for layer in &mut m.layers {
                    layer.bias.iter_mut().for_each(|b| *b = rng.gen_range(-0.5..0.5));
                }
            }
            control
        }
    }
}

/// `<vjp(g), d> ~ <g, theta(rho + h d) - theta(rho - h d)> / 2h` for random
/// `g` and `d`, 100 trials per mapping kind.
#[test]
fn vjp_matches_directional_differences() {
    let bounds = Bounds::hydro_default();
    let names = ["uniform", "linear", "polynomial", "mlp"];
    for (kind, name) in names.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(40 + kind as u64);
        let mut worst = 0.0f64;
        for _ in 0..100 {
            let n_cells = rng.gen_range(1..30);
            let desc = descriptors(3, n_cells, &mut rng);
            let control = random_control(kind, 3, &mut rng, &bounds);
            let grad = CostGradientFields {
                fields: std::array::from_fn(|_| (0..n_cells).map(|_| rng.gen_range(-1.0..1.0)).collect()),
            };
            let rho = control.flatten();
            let dir: Vec<f64> = rho
                .iter()
                .map(|r| rng.gen_range(-1.0..1.0) * r.abs().max(1.0))
                .collect();
            let analytic: f64 = vjp(&control, &desc, &bounds, &grad)
                .unwrap()
                .iter()
                .zip(&dir)
                .map(|(a, b)| a * b)
                .sum();
            let h = 1e-6;
            let at = |s: f64| {
                let x: Vec<f64> = rho.iter().zip(&dir).map(|(r, d)| r + s * d).collect();
                map_control(&control.with_flat(&x).unwrap(), &desc, &bounds, n_cells).unwrap()
            };
            let (up, down) = (at(h), at(-h));
            let numeric: f64 = (0..4)
                .map(|k| {
                    (0..n_cells)
                        .map(|c| grad.fields[k][c] * (up.fields[k][c] - down.fields[k][c]))
                        .sum::<f64>()
                })
                .sum::<f64>()
                / (2.0 * h);
            let scale = analytic.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((analytic - numeric).abs() / scale);
        }
        assert!(worst < 1e-5, "{name}: {worst:e}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mapped_fields_stay_strictly_inside(seed in any::<u64>(), kind in 0usize..4, spread in 0.1f64..80.0) {
        let bounds = Bounds::new(vec![(1e-6, 1000.0), (10.0, 20.0), (-50.0, 50.0), (0.5, 3.0)]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let desc = descriptors(2, 25, &mut rng);
        let mut rho = random_control(kind, 2, &mut rng, &bounds).flatten();
        let control = random_control(kind, 2, &mut rng, &bounds);
        if kind != 0 {
            let box_bounds = control.coordinate_bounds(&bounds);
            for (v, &(l, u)) in rho.iter_mut().zip(&box_bounds) {
                let z = *v * spread;
                *v = if l.is_finite() { z.clamp(l, u) } else { z };
            }
        }
        let f = map_control(&control.with_flat(&rho).unwrap(), &desc, &bounds, 25).unwrap();
        for k in 0..4 {
            for &v in &f.fields[k] {
                prop_assert!(bounds.contains(k, v), "param {} value {}", k, v);
            }
        }
    }

    #[test]
    fn cell_permutation_commutes_with_mapping(seed in any::<u64>(), kind in 1usize..4) {
        let bounds = Bounds::hydro_default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 20;
        let desc = descriptors(3, n, &mut rng);
        let control = random_control(kind, 3, &mut rng, &bounds);
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let shuffled: Vec<Vec<f64>> = desc.iter().map(|l| perm.iter().map(|&p| l[p]).collect()).collect();
        let a = map_control(&control, &desc, &bounds, n).unwrap();
        let b = map_control(&control, &shuffled, &bounds, n).unwrap();
        for k in 0..4 {
            for (i, &p) in perm.iter().enumerate() {
                prop_assert_eq!(b.fields[k][i].to_bits(), a.fields[k][p].to_bits());
            }
        }
    }
}
