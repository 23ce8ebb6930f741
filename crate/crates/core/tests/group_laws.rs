use carnot::group::{Group, Point};
use num_rational::Ratio;
use proptest::prelude::*;

type Q = Ratio<i64>;

fn rational() -> impl Strategy<Value = Q> {
    (-6i64..=6, 1i64..=4).prop_map(|(n, d)| Q::new(n, d))
}

fn point(dim: usize) -> impl Strategy<Value = Point<Q>> {
    prop::collection::vec(rational(), dim).prop_map(Point::new)
}

fn groups() -> Vec<Group<Q>> {
    vec![Group::heisenberg(1), Group::heisenberg(2), Group::engel(), Group::abelian(3)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn multiplication_is_associative_exactly(
        k in 0usize..4,
        a in point(5),
        b in point(5),
        c in point(5),
    ) {
        let g = &groups()[k];
        let cut = |p: &Point<Q>| Point::new(p.coords()[..g.dim()].iter().copied());
        let (a, b, c) = (cut(&a), cut(&b), cut(&c));
        prop_assert_eq!(g.multiply(&g.multiply(&a, &b), &c), g.multiply(&a, &g.multiply(&b, &c)));
    }

    #[test]
    fn engel_inverse_and_identity(a in point(4)) {
        let g = Group::<Q>::engel();
        prop_assert!(g.multiply(&a, &g.inverse(&a)).is_identity());
        prop_assert!(g.multiply(&g.inverse(&a), &a).is_identity());
        prop_assert_eq!(g.multiply(&g.identity(), &a), a.clone());
    }

    #[test]
    fn dilations_are_automorphisms(a in point(4), b in point(4), s in rational(), t in rational()) {
        let g = Group::<Q>::engel();
        prop_assert_eq!(g.dilate(s, &g.multiply(&a, &b)), g.multiply(&g.dilate(s, &a), &g.dilate(s, &b)));
        prop_assert_eq!(g.dilate(s, &g.dilate(t, &a)), g.dilate(s * t, &a));
    }

    #[test]
    fn heisenberg_dilations_are_automorphisms(a in point(5), b in point(5), s in rational()) {
        let g = Group::<Q>::heisenberg(2);
        prop_assert_eq!(g.dilate(s, &g.multiply(&a, &b)), g.multiply(&g.dilate(s, &a), &g.dilate(s, &b)));
    }

    #[test]
    fn flows_form_one_parameter_groups(x in point(4), s in rational(), t in rational(), j in 0usize..2) {
        let g = Group::<Q>::engel();
        prop_assert_eq!(g.flow(j, s, &g.flow(j, t, &x)), g.flow(j, s + t, &x));
        prop_assert_eq!(g.flow(j, Q::from_integer(0), &x), x);
    }

    #[test]
    fn closed_form_and_bch_agree_on_heisenberg(a in point(3), b in point(3)) {
        let g = Group::<Q>::heisenberg(1);
        prop_assert_eq!(g.multiply(&a, &b), g.bch(&a, &b));
    }
}

#[test]
fn float_and_exact_laws_agree() {
    let gq = Group::<Q>::engel();
    let gf = Group::<f64>::engel();
    let a = [Q::new(1, 2), Q::new(-3, 4), Q::new(2, 1), Q::new(1, 3)];
    let b = [Q::new(-1, 1), Q::new(1, 4), Q::new(0, 1), Q::new(5, 2)];
    let exact = gq.multiply(&Point::new(a), &Point::new(b));
    let float = gf.multiply(
        &Point::new(a.iter().map(|v| *v.numer() as f64 / *v.denom() as f64)),
        &Point::new(b.iter().map(|v| *v.numer() as f64 / *v.denom() as f64)),
    );
    for (e, f) in exact.coords().iter().zip(float.coords()) {
        assert!((*e.numer() as f64 / *e.denom() as f64 - f).abs() < 1e-14);
    }
}
