use abs_core::acquisition::{descent_direction, prob_descent};
use abs_core::gpcore::{ConstantMean, GpModel, KernelHyper};
use abs_core::nalgebra::{DMatrix, DVector};
use abs_core::search::{ars_update, run, Algorithm, SearchConfig};
use abs_core::{PolicyParams, ReturnScaler, StateNormalizer};
use proptest::prelude::*;

fn points(dim: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-1.0..1.0f64, dim), 1..8)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gradient_covariance_is_symmetric_psd(
        xs in points(3),
        theta in prop::collection::vec(-1.0..1.0f64, 3),
        ls in prop::collection::vec(0.1..2.0f64, 3),
        seed in 0u64..1000,
    ) {
        let hyper = KernelHyper::new(1.3, 0.05, ls).unwrap();
        let ys: Vec<f64> = (0..xs.len()).map(|i| ((i as u64 + seed) as f64).sin()).collect();
        let model = GpModel::condition(xs, &ys, &hyper).unwrap();
        let post = model.gradient_posterior(&theta, &ConstantMean(0.0));
        let cov = &post.cov;
        prop_assert!((cov - cov.transpose()).amax() < 1e-10);
        let eig = cov.clone().symmetric_eigen();
        prop_assert!(eig.eigenvalues.min() > -1e-9, "{}", eig.eigenvalues);
        // Conditioning never increases the prior gradient variance.
        for i in 0..3 {
            prop_assert!(cov[(i, i)] <= hyper.signal_var / hyper.lengthscales[i].powi(2) + 1e-9);
        }
    }

    #[test]
    fn ascent_direction_is_unit_and_best_among_axes(
        mean in prop::collection::vec(-3.0..3.0f64, 3),
        diag in prop::collection::vec(0.1..5.0f64, 3),
    ) {
        prop_assume!(mean.iter().map(|m| m * m).sum::<f64>() > 1e-6);
        let post = abs_core::gpcore::GradientPosterior {
            mean: DVector::from_vec(mean),
            cov: DMatrix::from_diagonal(&DVector::from_vec(diag)),
        };
        let nu = descent_direction(&post).unwrap();
        prop_assert!((nu.norm() - 1.0).abs() < 1e-12);
        let best = prob_descent(&nu, &post);
        for i in 0..3 {
            for s in [-1.0, 1.0] {
                let mut e = DVector::zeros(3);
                e[i] = s;
                prop_assert!(prob_descent(&e, &post) <= best + 1e-12);
            }
        }
    }

    #[test]
    fn scaler_maps_range_onto_unit_interval(vs in prop::collection::vec(-1e3..1e3f64, 2..20)) {
        let mut s = ReturnScaler::new();
        vs.iter().for_each(|&v| s.observe(v));
        let (lo, hi) = s.range().unwrap();
        prop_assume!(hi - lo > 1e-9);
        prop_assert!((s.scale(lo) + 1.0).abs() < 1e-9);
        prop_assert!((s.scale(hi) - 1.0).abs() < 1e-9);
        for &v in &vs {
            prop_assert!((s.unscale(s.scale(v)) - v).abs() < 1e-9 * (1.0 + v.abs()));
        }
    }

    #[test]
    fn ars_update_is_antisymmetric_in_the_returns(
        dirs in prop::collection::vec(prop::collection::vec(-1.0..1.0f64, 2), 4),
        rp in prop::collection::vec(-5.0..5.0f64, 4),
        rm in prop::collection::vec(-5.0..5.0f64, 4),
    ) {
        // Swapping r+ and r- keeps the ranking and σ_R, and negates the step.
        let a = ars_update(&dirs, &rp, &rm, 2, 0.1);
        let b = ars_update(&dirs, &rm, &rp, 2, 0.1);
        match (a, b) {
            (Some(a), Some(b)) => {
                for (x, y) in a.iter().zip(&b) {
                    prop_assert!((x + y).abs() < 1e-12);
                }
            }
            (None, None) => {}
            _ => prop_assert!(false, "only one side skipped"),
        }
    }

    #[test]
    fn affine_policy_reproduces_normalized_actions(
        states in prop::collection::vec(prop::collection::vec(-2.0..2.0f64, 2), 2..10),
        x in prop::collection::vec(-1.0..1.0f64, 2),
        probe in prop::collection::vec(-2.0..2.0f64, 2),
    ) {
        let mut n = StateNormalizer::new(2);
        states.iter().for_each(|s| n.observe(s));
        let p = PolicyParams::from_flat(1, 2, x.clone()).unwrap();
        let (k, c) = n.affine_policy(&p);
        let z = n.apply(&probe);
        let direct = x[0] * z[0] + x[1] * z[1];
        let affine = (k * DVector::from_vec(probe))[0] + c[0];
        prop_assert!((direct - affine).abs() < 1e-9 * (1.0 + direct.abs()));
    }
}

fn quick(algorithm: Algorithm, seed: u64) -> SearchConfig {
    SearchConfig {
        algorithm,
        iterations: 3,
        acquisitions: 2,
        critic_steps: 5,
        ensemble_size: 2,
        gp_restarts: 2,
        acquisition_restarts: 2,
        ars_directions: 2,
        ars_top: 2,
        seed,
        ..Default::default()
    }
}

#[test]
fn histories_are_consistent_for_every_algorithm() {
    for algorithm in [Algorithm::Abs, Algorithm::Mpd, Algorithm::Ars] {
        let cfg = quick(algorithm, 3);
        let mut streamed = Vec::new();
        let h = run(&cfg, &mut |row| {
            streamed.push(*row);
            Ok(())
        })
        .unwrap();
        assert_eq!(h.rows.len(), cfg.total_episodes(), "{algorithm:?}");
        assert_eq!(streamed.len(), h.rows.len());
        let horizon = 100;
        let mut best = f64::NEG_INFINITY;
        for (i, row) in h.rows.iter().enumerate() {
            assert_eq!(row.episode, i as u64 + 1);
            assert_eq!(row.env_steps, (i as u64 + 1) * horizon);
            best = best.max(row.return_hat);
            assert_eq!(row.best_return, best);
            assert_eq!(row.wall_ms, 0);
        }
        let last = h.final_snapshot().unwrap();
        assert_eq!(last.episodes, h.rows.len() as u64);
    }
}
