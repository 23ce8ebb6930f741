use carnot::group::{self, Group, Point};
use carnot::metric::{ball_sample, calibrate_measure, control_distance, heisenberg_ball_volume, unit_ball_volume, ControlOptions};
use proptest::prelude::*;

fn coords(dim: usize, r: f64) -> impl Strategy<Value = Point<f64>> {
    prop::collection::vec(-r..r, dim).prop_map(Point::new)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn heisenberg_distance_is_a_metric(x in coords(3, 2.0), y in coords(3, 2.0), z in coords(3, 2.0)) {
        let g = Group::<f64>::heisenberg(1);
        let (xy, yz, xz) = (g.distance(&x, &y), g.distance(&y, &z), g.distance(&x, &z));
        prop_assert!(xz <= (xy + yz) * (1.0 + 1e-12) + 1e-12);
        prop_assert!((xy - g.distance(&y, &x)).abs() <= 1e-10 * (1.0 + xy));
        prop_assert!(g.distance(&x, &x) <= 1e-12);
    }

    #[test]
    fn h2_triangle_inequality(x in coords(5, 1.5), y in coords(5, 1.5), z in coords(5, 1.5)) {
        let g = Group::<f64>::heisenberg(2);
        prop_assert!(g.distance(&x, &z) <= (g.distance(&x, &y) + g.distance(&y, &z)) * (1.0 + 1e-12) + 1e-12);
    }

    #[test]
    fn distance_is_left_invariant_and_homogeneous(
        x in coords(3, 1.0),
        y in coords(3, 1.0),
        a in coords(3, 1.0),
        lambda in 0.1f64..5.0,
    ) {
        let g = Group::<f64>::heisenberg(1);
        let d = g.distance(&x, &y);
        let moved = g.distance(&g.multiply(&a, &x), &g.multiply(&a, &y));
        prop_assert!((moved - d).abs() <= 1e-9 * (1.0 + d));
        let scaled = g.distance(&g.dilate(lambda, &x), &g.dilate(lambda, &y));
        prop_assert!((scaled - lambda * d).abs() <= 1e-9 * (1.0 + lambda * d));
    }

    #[test]
    fn box_norm_bounds_the_distance(x in coords(3, 3.0)) {
        let g = Group::<f64>::heisenberg(1);
        let c = g.calibration();
        let d = g.norm(&x);
        let b = g.box_norm(&x);
        prop_assert!(g.distance_lower_bound(&x) <= d * (1.0 + 1e-12));
        // The sampled constants are estimates, so allow a small excursion.
        prop_assert!(d >= 0.95 * c.c1 * b && d <= 1.05 * c.c2 * b);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn engel_triangle_inequality(x in coords(4, 0.7), y in coords(4, 0.7), z in coords(4, 0.7)) {
        let g = Group::<f64>::engel();
        let (xy, yz, xz) = (g.distance(&x, &y), g.distance(&y, &z), g.distance(&x, &z));
        // Optimizer distances are upper bounds within their refinement tolerance.
        prop_assert!(xz <= (xy + yz) * (1.0 + 1e-3) + 1e-9);
    }
}

#[test]
fn control_optimizer_agrees_with_heisenberg_closed_form() {
    let g = Group::<f64>::heisenberg(1);
    for target in [Point::from([0.3, -0.4, 0.2]), Point::from([0.0, 0.0, 1.0]), Point::from([1.0, 0.5, -0.7])] {
        let sol = control_distance(&g, &target, &ControlOptions::default()).unwrap();
        let exact = g.norm(&target);
        assert!((sol.upper - exact).abs() <= 0.01 * exact, "{} vs {exact}", sol.upper);
        assert!(sol.lower <= exact * (1.0 + 1e-12));
    }
}

#[test]
fn measure_scales_with_the_homogeneous_dimension() {
    let g = Group::<f64>::heisenberg(1);
    let unit = g.ball(g.identity(), 1.0);
    let base = group::measure(&g, &unit, 200_000, 1).unwrap();
    for lambda in [0.5, 3.0] {
        let ball = g.ball(Point::from([0.4, -1.0, 2.0]), lambda);
        let est = group::measure(&g, &ball, 200_000, 2).unwrap();
        let target = lambda.powi(4) * base.value;
        let se = est.std_error + lambda.powi(4) * base.std_error;
        assert!((est.value - target).abs() <= 4.0 * se, "{} vs {target} (se {se})", est.value);
    }
}

#[test]
fn heisenberg_normalization_matches_monte_carlo() {
    let g = Group::<f64>::heisenberg(1);
    let v = unit_ball_volume(&g, 400_000, 3);
    let exact = heisenberg_ball_volume(1);
    assert!((v.value - exact).abs() <= 3.0 * v.std_error, "{} vs {exact} (se {})", v.value, v.std_error);
    let c = calibrate_measure(&g, 400_000, 4);
    assert!((c.value - g.calibration().measure_norm).abs() <= 3.0 * c.std_error);
}

#[test]
fn ball_samples_stay_inside_and_are_prefix_stable() {
    let g = Group::<f64>::heisenberg(1);
    let ball = g.ball(Point::from([0.2, 0.3, -0.1]), 0.7);
    let long = ball_sample(&ball, 3000, 9);
    let short = ball_sample(&ball, 1200, 9);
    assert_eq!(&long[..1200], &short[..]);
    assert!(long.iter().all(|p| ball.contains_point(p)));
}
