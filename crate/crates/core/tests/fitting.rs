use lanechange::indicators::{
    cluster_styles, compute_indicators, fit_line, fit_profile_ols, pearson_correlation, IndicatorConfig,
    IndicatorError, IndicatorVector, StyleProfile, BUILTIN_STYLES,
};
use lanechange::seed;
use lanechange::sim::{sample_initial_state, ScenarioConfig};
use lanechange::{Action, DecisionRecord};
use proptest::prelude::*;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

fn synthetic_records(profile: &StyleProfile, n: usize, sigma: f64, seed_: u64) -> Vec<DecisionRecord> {
    let config = ScenarioConfig::default();
    let mut rng = seed::rng_for(seed_, "synthetic-records");
    let noise = Normal::new(0.0, sigma).unwrap();
    (0..n)
        .map(|_| {
            let mut state = sample_initial_state(&config, &mut rng).unwrap();
            state.ego.v = rng.random_range(15.0..27.0);
            let r = profile.reference_values(state.ego.v);
            let ind = IndicatorVector::new(
                r.t_f + noise.sample(&mut rng),
                r.t_nf + noise.sample(&mut rng),
                r.dv_nb + noise.sample(&mut rng),
            );
            DecisionRecord::new(state, ind, Action::Change, "synthetic")
        })
        .collect()
}

#[test]
fn exact_lines_are_recovered_to_rounding() {
    let xs: Vec<f64> = (0..40).map(|i| 15.0 + 0.3 * f64::from(i)).collect();
    let ys: Vec<f64> = xs.iter().map(|x| 0.45 * x - 3.26).collect();
    let fit = fit_line(&xs, &ys).unwrap();
    assert!((fit.slope - 0.45).abs() < 1e-12);
    assert!((fit.intercept + 3.26).abs() < 1e-10);
    for style in BUILTIN_STYLES {
        let p = StyleProfile::builtin(style).unwrap();
        let fitted = fit_profile_ols(&synthetic_records(&p, 50, 0.0, 1), &IndicatorConfig::default(), style).unwrap();
        for i in 0..3 {
            assert!((fitted.a[i] - p.a[i]).abs() < 1e-10, "{style} A[{i}]");
            assert!((fitted.b[i] - p.b[i]).abs() < 1e-8, "{style} b[{i}]");
        }
    }
}

/// Closed-form least squares solved through the 2x2 normal equations.
fn normal_equations(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let (sx, sy) = (xs.iter().sum::<f64>(), ys.iter().sum::<f64>());
    let sxx: f64 = xs.iter().map(|x| x * x).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| x * y).sum();
    let det = n * sxx - sx * sx;
    ((n * sxy - sx * sy) / det, (sxx * sy - sx * sxy) / det)
}

#[test]
fn ols_matches_normal_equations_on_noisy_data() {
    let mut rng = seed::rng_for(3, "ols");
    let xs: Vec<f64> = (0..300).map(|_| rng.random_range(15.0..27.0)).collect();
    let ys: Vec<f64> = xs.iter().map(|x| 0.2 * x + 1.0 + rng.random_range(-1.0..1.0)).collect();
    let fit = fit_line(&xs, &ys).unwrap();
    let (a, b) = normal_equations(&xs, &ys);
    assert!((fit.slope - a).abs() < 1e-9);
    assert!((fit.intercept - b).abs() < 1e-7);
}

#[test]
fn monte_carlo_recovery_within_tolerance() {
    for style in BUILTIN_STYLES {
        let p = StyleProfile::builtin(style).unwrap();
        let mut worst_a = 0.0_f64;
        let mut worst_b = 0.0_f64;
        for rep in 0..20 {
            let recs = synthetic_records(&p, 500, 0.1, 100 + rep);
            let f = fit_profile_ols(&recs, &IndicatorConfig::default(), style).unwrap();
            for i in 0..3 {
                worst_a = worst_a.max((f.a[i] - p.a[i]).abs());
                worst_b = worst_b.max((f.b[i] - p.b[i]).abs());
            }
        }
        assert!(worst_a <= 0.02, "{style}: slope error {worst_a}");
        assert!(worst_b <= 0.4, "{style}: intercept error {worst_b}");
    }
}

#[test]
fn degenerate_designs_are_rejected() {
    assert_eq!(fit_line(&[20.0], &[1.0]).unwrap_err(), IndicatorError::DegenerateDesign(1));
    assert_eq!(fit_line(&[20.0, 20.0, 20.0], &[1.0, 2.0, 3.0]).unwrap_err(), IndicatorError::DegenerateDesign(1));
    assert!(matches!(fit_line(&[1.0, 2.0], &[1.0]), Err(IndicatorError::LengthMismatch(2, 1))));
}

#[test]
fn correlation_of_perfect_line_is_one() {
    let xs: Vec<f64> = (0..30).map(f64::from).collect();
    let up: Vec<f64> = xs.iter().map(|x| 2.0 * x + 1.0).collect();
    let down: Vec<f64> = xs.iter().map(|x| -x).collect();
    assert!((pearson_correlation(&xs, &up).unwrap().r - 1.0).abs() < 1e-12);
    assert!((pearson_correlation(&xs, &down).unwrap().r + 1.0).abs() < 1e-12);
    assert!(pearson_correlation(&xs, &up).unwrap().p_value < 1e-10);
}

#[test]
fn correlation_p_value_matches_tabulated_critical_value() {
    // n = 12, r = 0.576 is the two-sided 5% critical value (df = 10).
    let xs: Vec<f64> = (0..12).map(f64::from).collect();
    let noise = [0.9, -1.3, 0.4, 1.7, -2.0, 0.3, -0.6, 1.1, -1.4, 0.2, 1.9, -0.8];
    let mut scale = 1.0;
    for _ in 0..200 {
        let ys: Vec<f64> = xs.iter().zip(noise).map(|(x, e)| 0.1 * x + scale * e).collect();
        let c = pearson_correlation(&xs, &ys).unwrap();
        if (c.r - 0.576).abs() < 0.005 {
            assert!((c.p_value - 0.05).abs() < 0.004, "r {} p {}", c.r, c.p_value);
            return;
        }
        scale *= if c.r > 0.576 { 1.01 } else { 0.99 };
    }
    panic!("did not reach r = 0.576");
}

fn three_clouds(per: usize, seed_: u64) -> (Vec<[f64; 3]>, Vec<usize>) {
    let centers = [[3.0, 4.0, -6.0], [6.0, 6.0, 0.0], [9.0, 8.0, 6.0]];
    let mut rng = seed::rng_for(seed_, "clouds");
    let noise = Normal::new(0.0, 0.3).unwrap();
    let mut pts = Vec::new();
    let mut truth = Vec::new();
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..per {
            pts.push(std::array::from_fn(|d| center[d] + noise.sample(&mut rng)));
            truth.push(c);
        }
    }
    (pts, truth)
}

#[test]
fn kmeans_separates_well_separated_clouds() {
    let (pts, truth) = three_clouds(40, 1);
    let c = cluster_styles(&pts, 3, &mut seed::rng_for(1, "kmeans")).unwrap();
    // Clusters are ordered by ascending t_f, which matches the cloud order.
    assert_eq!(c.assignments, truth);
    assert_eq!(c.label(0), "aggressive");
    assert_eq!(c.label(2), "defensive");
    assert!(c.degenerate.iter().all(|d| !d));
}

#[test]
fn kmeans_is_invariant_to_input_order() {
    let (pts, _) = three_clouds(25, 2);
    let base = cluster_styles(&pts, 3, &mut seed::rng_for(9, "kmeans")).unwrap();
    let mut rng = seed::rng_for(4, "perm");
    for _ in 0..5 {
        let mut perm: Vec<usize> = (0..pts.len()).collect();
        for i in (1..perm.len()).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let shuffled: Vec<[f64; 3]> = perm.iter().map(|&i| pts[i]).collect();
        let c = cluster_styles(&shuffled, 3, &mut seed::rng_for(9, "kmeans")).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            assert_eq!(c.assignments[k], base.assignments[i]);
        }
        assert_eq!(c.centroids, base.centroids);
    }
}

#[test]
fn kmeans_rejects_too_many_clusters() {
    let err = cluster_styles(&[[0.0; 3], [1.0; 3]], 3, &mut seed::rng_for(0, "k")).unwrap_err();
    assert_eq!(err, IndicatorError::TooManyClusters { k: 3, n: 2 });
}

#[test]
fn indicators_match_hand_computed_ttc() {
    let config = ScenarioConfig::default();
    let mut state = sample_initial_state(&config, &mut seed::rng_for(0, "x")).unwrap();
    state.ego.v = 25.0;
    state.front.x = 40.0;
    state.front.v = 20.0;
    state.target_front = Some(lanechange::sim::VehicleState::new(30.0, 27.0));
    state.target_behind = Some(lanechange::sim::VehicleState::new(-20.0, 21.0));
    let ind = compute_indicators(&state, &config);
    assert_eq!(ind.t_f, 8.0);
    assert_eq!(ind.t_nf, 99.0);
    assert_eq!(ind.dv_nb, 4.0);
    assert!(ind.dv_nb_relevant);
    state.target_behind = Some(lanechange::sim::VehicleState::new(-150.0, 21.0));
    assert!(!compute_indicators(&state, &config).dv_nb_relevant);
    state.target_front = None;
    assert!(compute_indicators(&state, &config).t_nf_missing());
}

proptest! {
    #[test]
    fn reference_lines_are_affine(v1 in 0.0..40.0f64, v2 in 0.0..40.0f64, lambda in 0.0..1.0f64) {
        for style in BUILTIN_STYLES {
            let p = StyleProfile::builtin(style).unwrap();
            let mix = p.reference_values(lambda * v1 + (1.0 - lambda) * v2).as_array();
            let (a, b) = (p.reference_values(v1).as_array(), p.reference_values(v2).as_array());
            for i in 0..3 {
                prop_assert!((mix[i] - (lambda * a[i] + (1.0 - lambda) * b[i])).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn sampled_indicators_are_bounded(seed_ in any::<u64>()) {
        let config = ScenarioConfig::default();
        let s = sample_initial_state(&config, &mut seed::rng_for(seed_, "p")).unwrap();
        let ind = compute_indicators(&s, &config);
        prop_assert!(ind.t_f > 0.0 && ind.t_f <= 99.0);
        prop_assert!(ind.t_nf > 0.0 && ind.t_nf <= 99.0);
        prop_assert!(ind.dv_nb.abs() <= 30.0);
        let rec = DecisionRecord::new(s, ind, Action::Keep, "p");
        prop_assert!(rec.validate(&config).is_ok());
    }
}
