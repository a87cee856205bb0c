use mvgps::balance::{balance_report, BalanceScope};
use mvgps::dose_response::{fit_dose_response, predict_surface, Formula};
use mvgps::geometry::{bounding_box, convex_hull, trimmed_hull};
use mvgps::gps::{evaluate_weights, fit_mvgps, fit_univariate_gps, trim_weights, Dataset, Method, MvgpsOptions, WeightSet};
use mvgps::simulation::{builtin_scenario, generate, Scenario};
use mvgps::stats::{effective_sample_size, fit_least_squares, sample_quantile, weighted_pearson, DesignMatrix};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn weights(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01f64..10.0, n)
}

fn values(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-100.0f64..100.0, n)
}

fn points(max: usize) -> impl Strategy<Value = Vec<[f64; 2]>> {
    prop::collection::vec((-50.0f64..50.0, -50.0f64..50.0).prop_map(|(a, b)| [a, b]), 3..max)
}

fn matrix(p: &[[f64; 2]]) -> DMatrix<f64> {
    DMatrix::from_fn(p.len(), 2, |i, j| p[i][j])
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

fn m3(seed: u64, n: usize) -> Dataset {
    let cfg = builtin_scenario(Scenario::M3, 0.3, n).unwrap();
    generate(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ess_is_scale_invariant_and_bounded(w in weights(30), c in 0.001f64..1000.0) {
        let scaled: Vec<f64> = w.iter().map(|v| v * c).collect();
        let a = effective_sample_size(&w).unwrap();
        prop_assert!(close(a, effective_sample_size(&scaled).unwrap(), 1e-12));
        prop_assert!(a <= 30.0 + 1e-9);
    }

    #[test]
    fn pearson_is_affine_invariant(
        x in values(25), y in values(25), w in weights(25),
        a in 0.1f64..10.0, b in -5.0f64..5.0, c in 0.1f64..10.0,
    ) {
        if let Ok(r) = weighted_pearson(&x, &y, &w) {
            let x2: Vec<f64> = x.iter().map(|v| a * v + b).collect();
            let w2: Vec<f64> = w.iter().map(|v| v * c).collect();
            let r2 = weighted_pearson(&x2, &y, &w2).unwrap();
            prop_assert!((r - r2).abs() < 1e-9);
            prop_assert!((-1.0..=1.0).contains(&r));
        }
    }

    #[test]
    fn least_squares_ignores_weight_scale(y in values(12), w in weights(12), c in 0.01f64..100.0) {
        let design = DesignMatrix::from_rows(vec!["(Intercept)".into(), "x".into()], 12, |i, row| {
            row[0] = 1.0;
            row[1] = (i as f64).sin() * 3.0 + i as f64 * 0.1;
        }).unwrap();
        let scaled: Vec<f64> = w.iter().map(|v| v * c).collect();
        let a = fit_least_squares(&design, &y, &w).unwrap();
        let b = fit_least_squares(&design, &y, &scaled).unwrap();
        for (u, v) in a.coefficients.iter().zip(&b.coefficients) {
            prop_assert!(close(*u, *v, 1e-10));
        }
    }

    #[test]
    fn quantiles_are_monotone(x in values(20), p in 0.0f64..1.0, q in 0.0f64..1.0) {
        let (lo, hi) = if p <= q { (p, q) } else { (q, p) };
        prop_assert!(sample_quantile(&x, lo).unwrap() <= sample_quantile(&x, hi).unwrap());
        let min = x.iter().copied().fold(f64::INFINITY, f64::min);
        let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert_eq!(sample_quantile(&x, 0.0).unwrap(), min);
        prop_assert_eq!(sample_quantile(&x, 1.0).unwrap(), max);
    }

    #[test]
    fn trimming_clamps_to_quantiles(w in weights(40), q in 0.51f64..1.0) {
        let ws = WeightSet::new(w.clone(), Method::Mvgps).unwrap();
        let t = trim_weights(&ws, q).unwrap();
        let lo = sample_quantile(&w, 1.0 - q).unwrap();
        let hi = sample_quantile(&w, q).unwrap();
        for (orig, new) in w.iter().zip(t.weights()) {
            prop_assert_eq!(*new, orig.clamp(lo, hi));
        }
        prop_assert!(effective_sample_size(t.weights()).unwrap() >= effective_sample_size(&w).unwrap() - 1e-9);
    }

    #[test]
    fn hull_contains_inputs_and_ignores_order(mut p in points(40), seed in any::<u64>()) {
        let Ok(hull) = convex_hull(&matrix(&p)) else { return Ok(()); };
        for q in &p {
            prop_assert!(hull.contains(q).unwrap());
        }
        let bbox = bounding_box(&matrix(&p), 1.0).unwrap();
        for v in hull.vertices().unwrap() {
            prop_assert!(bbox.contains(v).unwrap());
        }
        prop_assert!(hull.area() <= bbox.area() + 1e-9);

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        use rand::seq::SliceRandom;
        p.shuffle(&mut rng);
        let dup: Vec<[f64; 2]> = p.iter().chain(p.iter().take(5)).copied().collect();
        prop_assert_eq!(convex_hull(&matrix(&p)).unwrap(), hull.clone());
        prop_assert_eq!(convex_hull(&matrix(&dup)).unwrap(), hull);
    }

    #[test]
    fn trimmed_regions_nest(p in points(60), q in 0.5f64..1.0) {
        let m = matrix(&p);
        let g = bounding_box(&m, 1.0).unwrap();
        let gq = bounding_box(&m, q).unwrap();
        for (inner, outer) in gq.bounds().iter().zip(g.bounds()) {
            prop_assert!(inner[0] >= outer[0] && inner[1] <= outer[1]);
        }
        if let (Ok(h), Ok(hq)) = (convex_hull(&m), trimmed_hull(&m, q)) {
            for v in hq.vertices().unwrap() {
                prop_assert!(h.contains(v).unwrap());
            }
            prop_assert!(hq.area() <= h.area() + 1e-9);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn weights_follow_row_permutation(seed in any::<u64>()) {
        let data = m3(seed, 120);
        let mut perm: Vec<usize> = (0..data.n()).collect();
        use rand::seq::SliceRandom;
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed));
        let shuffled = data.select_rows(&perm).unwrap();
        let a = evaluate_weights(&fit_mvgps(&data, &MvgpsOptions::default()).unwrap(), &data).unwrap();
        let b = evaluate_weights(&fit_mvgps(&shuffled, &MvgpsOptions::default()).unwrap(), &shuffled).unwrap();
        for (i, &r) in perm.iter().enumerate() {
            prop_assert!(close(a.weights()[r], b.weights()[i], 1e-9));
        }
    }

    #[test]
    fn single_exposure_fit_matches_univariate(seed in any::<u64>(), j in 0usize..2) {
        let data = m3(seed, 150);
        let sub = data.single_exposure(j).unwrap();
        let direct = evaluate_weights(&fit_mvgps(&sub, &MvgpsOptions::default()).unwrap(), &sub).unwrap();
        let uni = fit_univariate_gps(&data, j).unwrap();
        for (a, b) in direct.weights().iter().zip(uni.weights()) {
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
        prop_assert_eq!(uni.method(), &Method::GpsUni(j));
    }

    #[test]
    fn balance_summaries(seed in any::<u64>(), c in 0.01f64..100.0) {
        let data = m3(seed, 150);
        let ws = evaluate_weights(&fit_mvgps(&data, &MvgpsOptions::default()).unwrap(), &data).unwrap();
        let scaled = WeightSet::new(ws.weights().iter().map(|w| w * c).collect(), Method::Mvgps).unwrap();
        let a = balance_report(&data, &ws, BalanceScope::Confounders).unwrap();
        let b = balance_report(&data, &scaled, BalanceScope::Confounders).unwrap();
        prop_assert!((a.max_abs_corr - b.max_abs_corr).abs() < 1e-10);
        prop_assert!((a.avg_abs_corr - b.avg_abs_corr).abs() < 1e-10);
        prop_assert!(a.avg_abs_corr <= a.max_abs_corr);
        prop_assert!(a.max_abs_corr <= 1.0);
        prop_assert!(a.ess <= data.n() as f64 + 1e-9);
        let unweighted = balance_report(&data, &WeightSet::unweighted(data.n()), BalanceScope::AllCovariates).unwrap();
        prop_assert_eq!(unweighted.ess, data.n() as f64);
    }

    #[test]
    fn dose_response_invariants(seed in any::<u64>(), c in 0.01f64..100.0) {
        let data = m3(seed, 200);
        let ws = evaluate_weights(&fit_mvgps(&data, &MvgpsOptions::default()).unwrap(), &data).unwrap();
        let scaled = WeightSet::new(ws.weights().iter().map(|w| w * c).collect(), Method::Mvgps).unwrap();
        let hull = convex_hull(data.exposures()).unwrap();
        let a = fit_dose_response(&data, &ws, Formula::linear(), &hull).unwrap();
        let b = fit_dose_response(&data, &scaled, Formula::linear(), &hull).unwrap();
        for (u, v) in a.fit.coefficients.iter().zip(&b.fit.coefficients) {
            prop_assert!(close(*u, *v, 1e-10));
        }

        // unit weights over the full box reproduce ordinary least squares
        let bbox = bounding_box(data.exposures(), 1.0).unwrap();
        let ols = fit_dose_response(&data, &WeightSet::unweighted(data.n()), Formula::linear(), &bbox).unwrap();
        let design = DesignMatrix::from_rows(ols.fit.terms.clone(), data.n(), |i, row| {
            row[0] = 1.0;
            row[1] = data.exposures()[(i, 0)];
            row[2] = data.exposures()[(i, 1)];
        }).unwrap();
        let direct = fit_least_squares(&design, data.outcome(), &vec![1.0; data.n()]).unwrap();
        prop_assert_eq!(ols.retained, data.n());
        for (u, v) in ols.fit.coefficients.iter().zip(&direct.coefficients) {
            prop_assert!(close(*u, *v, 1e-10));
        }

        // linear surfaces are affine along segments
        let v = hull.vertices().unwrap();
        let (p, q) = (vec![v[0][0], v[0][1]], vec![v[1][0], v[1][1]]);
        let mid = vec![(p[0] + q[0]) / 2.0, (p[1] + q[1]) / 2.0];
        let y = predict_surface(&a, &[p, q, mid]).unwrap();
        prop_assert!((y[2] - (y[0] + y[1]) / 2.0).abs() < 1e-12 * (1.0 + y[2].abs()));
    }
}
