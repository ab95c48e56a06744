use oseen::asymptotics::fit_decay;
use oseen::fields::{make_datum, DatumKind, Grid, GridConfig, GridField};
use oseen::kernels::OseenTensors;
use oseen::output::{fmt17, RunConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

fn point(d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-4.0f64..4.0, d).prop_filter("away from the origin", |x| x.iter().map(|v| v * v).sum::<f64>() > 0.01)
}

fn rel(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().map(|v| v.abs()).fold(1e-300, f64::max);
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kernel_is_symmetric(d in 2usize..=4, seed in any::<u64>(), t in 0.05f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect();
        prop_assume!(x.iter().any(|v| v.abs() > 0.1));
        let k = OseenTensors::new(d).unwrap().oseen_k(&x, t).unwrap();
        for j in 0..d {
            for m in 0..d {
                prop_assert!((k[j * d + m] - k[m * d + j]).abs() <= 1e-13 * k.iter().map(|v| v.abs()).fold(1e-300, f64::max));
            }
        }
    }

    #[test]
    fn kernel_scaling(x in point(3), t in 0.1f64..4.0, lam in 0.3f64..3.0) {
        let k = OseenTensors::new(3).unwrap();
        let base = k.oseen_k(&x, t).unwrap();
        let xs: Vec<f64> = x.iter().map(|v| lam * v).collect();
        let scaled: Vec<f64> = k.oseen_k(&xs, lam * lam * t).unwrap().iter().map(|v| v * lam.powi(3)).collect();
        prop_assert!(rel(&scaled, &base) <= 1e-12);
    }

    #[test]
    fn homogeneous_kernels_have_their_degree(x in point(2), lam in 0.2f64..5.0) {
        let k = OseenTensors::new(2).unwrap();
        let xs: Vec<f64> = x.iter().map(|v| lam * v).collect();
        let k0: Vec<f64> = k.k_homog(&xs).unwrap().iter().map(|v| v * lam * lam).collect();
        prop_assert!(rel(&k0, &k.k_homog(&x).unwrap()) <= 1e-12);
        let f0: Vec<f64> = k.f_homog(&xs).unwrap().iter().map(|v| v * lam.powi(3)).collect();
        prop_assert!(rel(&f0, &k.f_homog(&x).unwrap()) <= 1e-12);
    }

    #[test]
    fn heat_flow_is_linear_in_the_datum(x in point(2), t in 0.1f64..10.0, c in 0.1f64..3.0) {
        let a = make_datum(DatumKind::Anisotropic2d, 0.05).unwrap();
        let ca = a.rescaled(c).unwrap();
        let lhs = ca.heat_exact(&x, t).unwrap();
        let rhs: Vec<f64> = a.heat_exact(&x, t).unwrap().iter().map(|v| c * v).collect();
        prop_assert!(rel(&lhs, &rhs) <= 1e-12);
    }

    #[test]
    fn heat_flow_is_self_similar(x in point(2), t in 0.1f64..10.0) {
        let a = make_datum(DatumKind::Anisotropic2d, 0.05).unwrap();
        let s = t.sqrt();
        let xi: Vec<f64> = x.iter().map(|v| v / s).collect();
        let lhs = a.heat_exact(&x, t).unwrap();
        let rhs: Vec<f64> = a.heat_exact(&xi, 1.0).unwrap().iter().map(|v| v / s).collect();
        prop_assert!(rel(&lhs, &rhs) <= 1e-10);
    }

    #[test]
    fn datum_is_homogeneous_of_degree_minus_one(x in point(3), lam in 0.2f64..5.0) {
        let a = make_datum(DatumKind::Rotational3d, 0.1).unwrap();
        let xs: Vec<f64> = x.iter().map(|v| lam * v).collect();
        let lhs: Vec<f64> = a.eval(&xs).unwrap().iter().map(|v| v * lam).collect();
        prop_assert!(rel(&lhs, &a.eval(&x).unwrap()) <= 1e-12);
    }

    #[test]
    fn power_law_fit_recovers_the_exponent(p in 1.5f64..5.0, c in 1e-6f64..1e3, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples: Vec<(f64, f64)> = (0..24)
            .map(|k| {
                let r = 10.0 * 10f64.powf(k as f64 / 23.0);
                (r, c * r.powf(-p) * (1.0 + rng.gen_range(-0.01..0.01)))
            })
            .collect();
        let fit = fit_decay(&samples, false).unwrap();
        prop_assert!((fit.exponent + p).abs() < 0.02, "{} vs {}", fit.exponent, -p);
    }

    #[test]
    fn floats_survive_seventeen_digits(v in any::<f64>().prop_filter("finite", |v| v.is_finite())) {
        prop_assert_eq!(fmt17(v).parse::<f64>().unwrap(), v);
    }

    #[test]
    fn config_text_round_trips(r_min in 1e-3f64..1.0, n in 4usize..500, tol in 1e-14f64..1e-3) {
        let mut c = RunConfig::default();
        c.set("grid.r_min", r_min);
        c.set("grid.n_radial", n);
        c.set("solver.tol", tol);
        let back = RunConfig::parse(&c.to_text()).unwrap();
        prop_assert_eq!(&back, &c);
        prop_assert_eq!(back.tol().unwrap(), Some(tol));
    }

    #[test]
    fn field_combination_is_linear(alpha in -3.0f64..3.0, beta in -3.0f64..3.0) {
        let g = Arc::new(Grid::new(2, GridConfig { r_min: 0.1, r_max: 20.0, n_radial: 8, n_angular: 8 }).unwrap());
        let f = GridField::from_fn(g.clone(), |x| vec![x[0], x[1] * x[1]]);
        let h = GridField::from_fn(g, |x| vec![1.0 / (1.0 + x[1].abs()), x[0].sin()]);
        let s = f.axpby(alpha, &h, beta);
        for (k, v) in s.values.iter().enumerate() {
            prop_assert!((v - (alpha * f.values[k] + beta * h.values[k])).abs() <= 1e-12 * (1.0 + v.abs()));
        }
    }
}
