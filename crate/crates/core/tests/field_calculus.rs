use std::sync::Arc;

use carnot::field::{line_restriction, metric_derivative, Domain, FieldExpr, Monomial, ScalarField, Window};
use carnot::group::{Group, Point};
use carnot::maps::{Dilation, Identity};
use proptest::prelude::*;

fn h1() -> Group<f64> {
    Group::heisenberg(1)
}

fn poly(g: &Group<f64>) -> ScalarField<f64> {
    let m = |c: f64, e: [u32; 3]| Monomial { coefficient: c, exponents: e.to_vec() };
    ScalarField::new(g, FieldExpr::Polynomial(vec![m(1.0, [2, 0, 0]), m(-1.5, [0, 1, 1]), m(0.5, [1, 0, 1]), m(2.0, [0, 1, 0])]))
}

fn pt() -> impl Strategy<Value = Point<f64>> {
    prop::collection::vec(-1.0f64..1.0, 3).prop_map(Point::new)
}

#[test]
fn vertical_coordinate_has_the_heisenberg_frame_gradient() {
    let g = h1();
    let z = ScalarField::coordinate(&g, 2);
    let x = Point::from([0.4, -0.6, 1.2]);
    let gr = z.horizontal_gradient(&x, 1e-3).gradient;
    assert!((gr[0] - 0.3).abs() < 1e-12 && (gr[1] - 0.2).abs() < 1e-12, "{gr:?}");
    let fd = z.numeric_gradient(&x, 1e-3).gradient;
    assert!((fd[0] - 0.3).abs() < 1e-9 && (fd[1] - 0.2).abs() < 1e-9, "{fd:?}");
}

#[test]
fn seminorm_of_a_horizontal_coordinate_is_the_measure() {
    let g = h1();
    let omega = Domain::ball(&g, g.identity(), 1.0);
    let s = ScalarField::coordinate(&g, 0).seminorm(&omega, 1.0);
    assert!((s.value - 1.0).abs() < 1e-12, "{s:?}");
    let s = ScalarField::coordinate(&g, 1).seminorm(&omega, f64::INFINITY);
    assert_eq!(s.value, 1.0);
}

#[test]
fn line_restriction_follows_the_flow() {
    let g = h1();
    let u = poly(&g);
    let base = Point::from([0.0, 0.3, -0.2]);
    let w = Window { start: -0.5, end: 0.5, count: 11 };
    let vals = line_restriction(&g, 0, &base, w, |p| u.eval(p)).unwrap();
    for (t, v) in vals {
        assert!((v - u.eval(&g.flow(0, t, &base))).abs() < 1e-15);
    }
    assert!(line_restriction(&g, 0, &Point::from([0.1, 0.0, 0.0]), w, |p| u.eval(p)).is_err());
}

#[test]
fn metric_derivatives_of_identity_and_dilation() {
    let g = h1();
    let x = Point::from([0.2, 0.1, -0.3]);
    for j in 0..2 {
        assert!((metric_derivative(&Identity { group: g.clone() }, j, &x, 1e-3) - 1.0).abs() < 1e-6);
        assert!((metric_derivative(&Dilation { group: g.clone(), lambda: 3.0 }, j, &x, 1e-3) - 3.0).abs() < 1e-6);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn polynomial_tree_gradient_matches_finite_differences(x in pt()) {
        let u = poly(&h1());
        let tree = u.horizontal_gradient(&x, 1e-3).gradient;
        let fd = u.numeric_gradient(&x, 1e-3).gradient;
        for (a, b) in tree.iter().zip(&fd) {
            prop_assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn smooth_composition_follows_the_chain_rule(x in pt()) {
        let u = poly(&h1());
        let sq = u.compose_smooth("square", |v| v * v, Some(Arc::new(|v: f64| 2.0 * v)));
        let v = u.eval(&x);
        let gu = u.horizontal_gradient(&x, 1e-3).gradient;
        let gs = sq.horizontal_gradient(&x, 1e-3).gradient;
        for (a, b) in gs.iter().zip(&gu) {
            prop_assert!((a - 2.0 * v * b).abs() <= 1e-12 * (1.0 + a.abs()));
        }
        let numeric = u.compose_smooth("square", |v| v * v, None).horizontal_gradient(&x, 1e-3).gradient;
        for (a, b) in gs.iter().zip(&numeric) {
            prop_assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn lattice_identities(x in pt()) {
        let u = poly(&h1());
        let gu = u.horizontal_gradient(&x, 1e-4).gradient;
        let sum = u.pos_part().add(&u.neg_part().scale(-1.0));
        prop_assert_eq!(sum.eval(&x), u.eval(&x));
        let ga = u.abs_val().horizontal_gradient(&x, 1e-4).gradient;
        for (a, b) in ga.iter().zip(&gu) {
            prop_assert!((a.abs() - b.abs()).abs() < 1e-15);
        }
    }

    #[test]
    fn seminorm_of_cutoff_is_monotone_in_the_level(m1 in 0.05f64..2.0, factor in 1.0f64..3.0) {
        let g = h1();
        let omega = Domain::ball(&g, g.identity(), 1.0);
        let nodes = omega.samples_with(carnot::field::Quadrature { samples: 500, seed: 1 });
        let u = poly(&g);
        let a = u.cutoff(m1).seminorm_on(&omega, &nodes, 2.0).value;
        let b = u.cutoff(m1 * factor).seminorm_on(&omega, &nodes, 2.0).value;
        let full = u.seminorm_on(&omega, &nodes, 2.0).value;
        prop_assert!(a <= b && b <= full);
    }
}
