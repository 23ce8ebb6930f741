//! Acceptance suite: ten end-to-end criteria, one PASS/FAIL line each.
//!
//! Runs without the libtest harness so the summary lines are always shown.

use std::panic::{self, AssertUnwindSafe};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use carnot::exponent::Exponent;
use carnot::field::{Domain, FieldExpr, Monomial, ScalarField};
use carnot::group::{self, Group, Point};
use carnot::lipschitz::{
    family_generate, horizontal_functional, map_stencil, mcshane_extend, refine, shifted, sym,
    sym_piecewise, validate_lipschitz, validation_pairs, FamilyOptions, OpenSetSpec,
};
use carnot::linalg::Matrix;
use carnot::maps::{
    distortion_kp, finite_distortion_check, pansu_extend, spatial_jacobian, Constant, Dilation, GroupMap,
    LeftTranslation, LinearHomomorphism, RadialSquash, Verdict,
};
use carnot::metric::{control_distance, ControlOptions};
use carnot::operator::{
    disjoint_ball_pairs, quasi_additivity_check, verify_prop_qinf, verify_theorem_lip, verify_theorem_sobolev,
    NodeSet, NormVerdict, PhiOptions, VerifyOptions,
};
use rand::{Rng, SeedableRng};

type Outcome = Result<String, String>;

fn h1() -> Group<f64> {
    Group::heisenberg(1)
}

fn unit_ball(g: &Group<f64>) -> Domain<f64> {
    Domain::ball(g, g.identity(), 1.0)
}

fn check(ok: bool, msg: String) -> Outcome {
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

/// The dilation verdict is shared by criteria 1 and 4.
fn dilation_verdict() -> &'static (NormVerdict, Duration) {
    static CELL: OnceLock<(NormVerdict, Duration)> = OnceLock::new();
    CELL.get_or_init(|| {
        let g = h1();
        let phi = Dilation { group: g.clone(), lambda: 2.0 };
        let opts = VerifyOptions::default().with_seed(11);
        let t = Instant::now();
        let v = verify_theorem_sobolev(&phi, &unit_ball(&g), Exponent::integer(8), Exponent::integer(4), &opts)
            .expect("dilation verdict");
        (v, t.elapsed())
    })
}

fn criterion_1() -> Outcome {
    let (v, elapsed) = dilation_verdict();
    let root2 = 2f64.sqrt();
    let analytic_ok = (v.analytic / root2 - 1.0).abs() <= 0.02;
    let estimate_ok = v.estimate >= 0.9 * root2;
    let time_ok = elapsed.as_secs_f64() < 60.0;
    let witness = v.witnesses[0].function.as_ref().map(|w| w.kind.clone()).unwrap_or_default();
    check(
        analytic_ok && estimate_ok && time_ok,
        format!(
            "analytic {:.6} (target {root2:.6}), estimate {:.6} (>= {:.6}), witness {witness}, {:.1}s",
            v.analytic,
            v.estimate,
            0.9 * root2,
            elapsed.as_secs_f64()
        ),
    )
}

fn criterion_2() -> Outcome {
    let g = h1();
    let omega = unit_ball(&g);
    let phi = LeftTranslation { group: g.clone(), by: Point::from([0.3, -0.2, 0.15]) };
    let (p, q) = (Exponent::integer(8), Exponent::integer(4));
    let nodes = NodeSet::domain(&omega, 20_000, 5);
    let report = distortion_kp(&phi, &omega, p, q, &nodes.blocks[0].nodes).map_err(|e| e.to_string())?;
    let worst = report.per_sample.iter().map(|s| (s.kp - 1.0).abs()).fold(0.0, f64::max);
    let v = verify_theorem_sobolev(&phi, &omega, p, q, &VerifyOptions::default().with_seed(12))
        .map_err(|e| e.to_string())?;
    let expected = omega.measure().powf(1.0 / 8.0);
    let ra = v.analytic / expected;
    let re = v.estimate / expected;
    check(
        worst <= 1e-3 && (0.9..=1.02).contains(&ra) && (0.9..=1.02).contains(&re),
        format!("max |K_p - 1| = {worst:.2e}; analytic/|Omega|^(1/8) = {ra:.5}, estimate/|Omega|^(1/8) = {re:.5}"),
    )
}

fn criterion_3() -> Outcome {
    let g = h1();
    let omega = unit_ball(&g);
    let id = carnot::maps::Identity { group: g.clone() };
    let opts = VerifyOptions::default().with_seed(13);
    let v = verify_theorem_lip(&id, &omega, Exponent::integer(2), &opts).map_err(|e| e.to_string())?;
    let expected = omega.measure().sqrt();
    let analytic_ok = (v.analytic / expected - 1.0).abs() <= 0.05;
    let ratio = v.estimate / v.analytic;
    let phi_ok = (0.9..=1.02).contains(&ratio);
    let qid = verify_prop_qinf(&id, &omega, &opts).map_err(|e| e.to_string())?;
    let lambda = 2.5;
    let dl = Dilation { group: g.clone(), lambda };
    let qdl = verify_prop_qinf(&dl, &omega, &opts).map_err(|e| e.to_string())?;
    let near = |x: f64, t: f64| (x / t - 1.0).abs() <= 0.05;
    let qinf_ok = near(qid.analytic, 1.0) && near(qid.estimate, 1.0) && near(qdl.analytic, lambda) && near(qdl.estimate, lambda);
    check(
        analytic_ok && phi_ok && qinf_ok,
        format!(
            "q=2: analytic {:.5} (target {expected:.5}), Phi^1/q / analytic = {ratio:.5}; \
             q=inf: id {:.4}/{:.4}, dilation({lambda}) {:.4}/{:.4}",
            v.analytic, qid.analytic, qid.estimate, qdl.analytic, qdl.estimate
        ),
    )
}

fn criterion_4() -> Outcome {
    let (v, _) = dilation_verdict();
    let bounds: Vec<_> = v.witnesses.iter().filter(|w| w.set.starts_with('U') && !w.set.ends_with("density")).collect();
    let densities: Vec<_> = v.witnesses.iter().filter(|w| w.set.ends_with("density")).collect();
    let bounds_ok = bounds.len() == 5 && bounds.iter().all(|w| w.estimate <= w.analytic);
    let dens_ok =
        densities.len() == 5 && densities.iter().all(|w| ((w.estimate - w.analytic) / w.analytic).abs() <= 0.10);
    let worst_margin = bounds.iter().map(|w| w.estimate / w.analytic).fold(0.0, f64::max);
    let worst_density = densities.iter().map(|w| ((w.estimate - w.analytic) / w.analytic).abs()).fold(0.0, f64::max);
    check(
        bounds_ok && dens_ok,
        format!(
            "{} sub-balls: max Phi^/int K^sigma = {worst_margin:.4}; max density error {worst_density:.2e}",
            bounds.len()
        ),
    )
}

fn criterion_5() -> Outcome {
    let g = h1();
    let d2 = Dilation { group: g.clone(), lambda: 2.0 };
    let x = Point::from([0.1, -0.2, 0.05]);
    let sj = spatial_jacobian(&d2, &x, &[0.2, 0.1], 200_000, 3).map_err(|e| e.to_string())?;
    let jac_ok = (sj.smallest / 16.0 - 1.0).abs() <= 0.05;
    let pd = pansu_extend(&g, &g, &Matrix::diagonal(&[2.0, 2.0])).map_err(|e| e.to_string())?;
    let det_ok = (pd.determinant - 16.0).abs() <= 1e-10;

    let engel = Group::<f64>::engel();
    let rot = |a: f64| Matrix::from_rows(&[vec![a.cos(), -a.sin()], vec![a.sin(), a.cos()]]);
    let zoo: Vec<(&str, &Group<f64>, Matrix<f64>)> = vec![
        ("H1 dilation", &g, Matrix::diagonal(&[2.0, 2.0])),
        ("H1 rotation", &g, rot(0.7)),
        ("H1 shear", &g, Matrix::from_rows(&[vec![1.0, 0.0], vec![0.8, 1.0]])),
        ("H1 anisotropic", &g, Matrix::diagonal(&[3.0, 0.5])),
        ("Engel dilation", &engel, Matrix::diagonal(&[2.0, 2.0])),
        ("Engel diagonal", &engel, Matrix::diagonal(&[1.5, -0.5])),
    ];
    let mut worst: f64 = 0.0;
    for (name, grp, a) in &zoo {
        let r = pansu_extend(grp, grp, a).map_err(|e| format!("{name}: {e}"))?;
        worst = worst.max(r.residual);
    }
    let shear = LinearHomomorphism::shear(&g, 0.8).map_err(|e| e.to_string())?;
    worst = worst.max(shear.pansu.residual);
    check(
        jac_ok && det_ok && worst < 1e-8,
        format!(
            "spatial Jacobian {:.4} (se {:.3}); Pansu det {:.12}; max residual {worst:.1e} over {} automorphisms",
            sj.smallest,
            sj.errors.last().copied().unwrap_or(0.0),
            pd.determinant,
            zoo.len() + 1
        ),
    )
}

fn criterion_6() -> Outcome {
    let g = h1();
    let mut lines = Vec::new();
    let mut ok = true;
    for (k, r) in [0.5, 1.0, 2.0].into_iter().enumerate() {
        let ball = g.ball(g.identity(), r);
        let est = group::measure(&g, &ball, 400_000, 40 + k as u64).map_err(|e| e.to_string())?;
        let z = (est.value - r.powi(4)).abs() / est.std_error;
        ok &= z <= 3.0;
        lines.push(format!("r={r}: {:.4} ({z:.2} se)", est.value));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
    let mut closed: f64 = 0.0;
    let mut control: f64 = 0.0;
    let engel = Group::<f64>::engel();
    for _ in 0..20 {
        let x = Point::new((0..3).map(|_| rng.gen_range(-1.0..1.0)));
        let t: f64 = rng.gen_range(-2.0..2.0);
        let j = rng.gen_range(0..2);
        let y = g.flow(j, t, &x);
        closed = closed.max((g.distance(&y, &x) - t.abs()).abs());
        let sol = control_distance(&g, &g.between(&x, &y), &ControlOptions::default()).map_err(|e| e.to_string())?;
        control = control.max((sol.upper / t.abs() - 1.0).abs());
        let xe = Point::new((0..4).map(|_| rng.gen_range(-1.0..1.0)));
        let ye = engel.flow(j, t, &xe);
        let sol = control_distance(&engel, &engel.between(&xe, &ye), &ControlOptions::default())
            .map_err(|e| e.to_string())?;
        control = control.max((sol.upper / t.abs() - 1.0).abs());
    }
    ok &= closed <= 1e-6 && control <= 0.01;
    let mut violations = 0;
    for _ in 0..1000 {
        let p: Vec<Point<f64>> = (0..3).map(|_| Point::new((0..3).map(|_| rng.gen_range(-2.0..2.0)))).collect();
        let (ab, bc, ac) = (g.distance(&p[0], &p[1]), g.distance(&p[1], &p[2]), g.distance(&p[0], &p[2]));
        if ac > (ab + bc) * (1.0 + 1e-12) + 1e-12 {
            violations += 1;
        }
    }
    ok &= violations == 0;
    check(
        ok,
        format!(
            "{}; axis error closed form {closed:.1e}, control {control:.1e}; triangle violations {violations}/1000",
            lines.join(", ")
        ),
    )
}

fn criterion_7() -> Outcome {
    let g = h1();
    let omega = unit_ball(&g);
    let mono = |c: f64, e: [u32; 3]| Monomial { coefficient: c, exponents: e.to_vec() };
    let u = ScalarField::new(
        &g,
        FieldExpr::Polynomial(vec![mono(4.0, [1, 0, 0]), mono(-2.0, [0, 1, 0]), mono(3.0, [0, 0, 1]), mono(1.0, [1, 1, 0])]),
    );
    let m = 1.5;
    let cases: Vec<(&str, ScalarField<f64>, Box<dyn Fn(f64) -> f64>)> = vec![
        ("u+", u.pos_part(), Box::new(|v| if v > 0.0 { 1.0 } else { 0.0 })),
        ("u-", u.neg_part(), Box::new(|v| if v < 0.0 { -1.0 } else { 0.0 })),
        ("|u|", u.abs_val(), Box::new(|v: f64| if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 })),
        ("cut", u.cutoff(m), Box::new(move |v: f64| if v.abs() < m { 1.0 } else { 0.0 })),
        (
            "|cut(u+ - u-)|",
            u.pos_part().add(&u.neg_part().scale(-1.0)).cutoff(m).abs_val(),
            Box::new(move |v: f64| if v.abs() < m { v.signum() } else { 0.0 }),
        ),
    ];
    let nodes = omega.samples_with(carnot::field::Quadrature { samples: 2000, seed: 7 });
    let h = 1e-4;
    let mut exact_fail = 0;
    let mut fd_err: f64 = 0.0;
    for x in &nodes {
        let v = u.eval(x);
        let gu = u.horizontal_gradient(x, h).gradient;
        for (_, f, factor) in &cases {
            let gf = f.horizontal_gradient(x, h).gradient;
            let s = factor(v);
            if gf.iter().zip(&gu).any(|(a, b)| *a != s * b) {
                exact_fail += 1;
            }
            if v.abs() > 0.02 && (v.abs() - m).abs() > 0.02 {
                let fd = f.numeric_gradient(x, h).gradient;
                for (a, b) in gf.iter().zip(&fd) {
                    fd_err = fd_err.max((a - b).abs());
                }
            }
        }
    }
    let semis: Vec<f64> = [1.0, 2.0, 4.0, 8.0].iter().map(|&m| u.cutoff(m).seminorm_on(&omega, &nodes, 2.0).value).collect();
    let full = u.seminorm_on(&omega, &nodes, 2.0).value;
    let monotone = semis.windows(2).all(|w| w[0] <= w[1]) && semis[3] <= full;
    let converged = (semis[3] - full).abs() <= 1e-12 * full;
    check(
        exact_fail == 0 && fd_err <= 1e-4 && monotone && converged,
        format!(
            "tree mismatches {exact_fail}; max |tree - FD| {fd_err:.1e}; seminorm of cut_M for M=1,2,4,8: \
             {:.4} {:.4} {:.4} {:.4} -> {full:.4}",
            semis[0], semis[1], semis[2], semis[3]
        ),
    )
}

fn criterion_8() -> Outcome {
    let g = h1();
    let c = g.identity();
    let pairs = validation_pairs(&g, &c, 2.5, 10_000, 8);
    let sets = vec![
        ("whole", OpenSetSpec::Whole),
        ("ball", OpenSetSpec::Ball { center: Point::from([0.2, 0.1, -0.1]), radius: 0.8 }),
        (
            "union",
            OpenSetSpec::Union(vec![(Point::from([-0.9, 0.0, 0.0]), 0.4), (Point::from([0.9, 0.0, 0.2]), 0.5)]),
        ),
    ];
    let mut total = 0;
    let mut violations = 0;
    let mut worst: f64 = 0.0;
    for (k, (_, v)) in sets.iter().enumerate() {
        let opts = FamilyOptions::new(carnot::lipschitz::DEFAULT_BUDGET, 80 + k as u64).with_hint(c.clone(), 1.5);
        for u in family_generate(&g, v, &opts) {
            let r = validate_lipschitz(&g, &u, &pairs);
            total += 1;
            violations += r.violations;
            worst = worst.max(r.worst_excess);
        }
    }

    let mut sym_err: f64 = 0.0;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(88);
    for _ in 0..100_000 {
        let m: f64 = rng.gen_range(0.01..10.0);
        let t: f64 = rng.gen_range(-m..m);
        sym_err = sym_err.max((sym(m, t) - sym_piecewise(m, t)).abs() / m);
    }

    let phi = Dilation { group: g.clone(), lambda: 2.0 };
    let theta = [0.6, 0.8];
    let base = horizontal_functional(&g, &theta);
    let center = Point::from([0.1, 0.0, 0.0]);
    let u = shifted(&base, base.eval(&center));
    let v = OpenSetSpec::Ball { center: center.clone(), radius: 1.0 };
    let refined = refine(&g, &u, &v, 0.01).map_err(|e| e.to_string())?;
    let mut refine_err: f64 = 0.0;
    for x in g.ball(g.identity(), 0.5).sample(2000, 9) {
        let st = map_stencil(&phi, &x, 1e-4);
        let norm = |gr: &[f64]| gr.iter().map(|a| a * a).sum::<f64>().sqrt();
        refine_err = refine_err.max((norm(&u.jet(&st).1) - norm(&refined.function.jet(&st).1)).abs());
    }

    let pts = g.ball(g.identity(), 1.0).sample(12, 10);
    let vals: Vec<f64> = pts.iter().map(|p| 0.7 * g.norm(p) + 0.2 * (p.coords()[0])).collect();
    let ext = mcshane_extend(&g, &pts, &vals, 1.0).map_err(|e| e.to_string())?;
    let interp = pts.iter().zip(&vals).map(|(p, &f)| (ext.eval(p) - f).abs()).fold(0.0, f64::max);
    let bound = validate_lipschitz(&g, &ext, &pairs);
    check(
        violations == 0 && sym_err <= 4.0 * f64::EPSILON && refine_err <= 1e-6 && interp == 0.0 && bound.passed(),
        format!(
            "{total} functions x {} pairs: {violations} violations (worst excess {worst:.1e}); sym error {sym_err:.1e}; \
             refine gradient error {refine_err:.1e} ({} folds); McShane interpolation error {interp:.1e}, \
             max quotient {:.4}",
            pairs.len(),
            refined.iterations,
            bound.max_quotient
        ),
    )
}

fn criterion_9() -> Outcome {
    let g = h1();
    let opts = PhiOptions { budget: 64, samples: 4000, screen: 512, top: 8, seed: 9 };
    let maps: Vec<(&str, Box<dyn GroupMap<f64>>)> = vec![
        ("identity", Box::new(carnot::maps::Identity { group: g.clone() })),
        ("dilation", Box::new(Dilation { group: g.clone(), lambda: 2.0 })),
    ];
    let pairs = disjoint_ball_pairs(&g, &g.identity(), 1.0, 10, (0.1, 0.3), 0.05, 99);
    let mut passed = 0;
    let mut total = 0;
    for (_, phi) in &maps {
        for (k, pair) in pairs.iter().enumerate() {
            let mut o = opts;
            o.seed = opts.seed + k as u64;
            let qa = quasi_additivity_check(phi.as_ref(), 1.0, pair, 1e-4, &o).map_err(|e| e.to_string())?;
            total += 1;
            if qa.pass {
                passed += 1;
            }
        }
    }
    check(passed == total && total == 20, format!("{passed}/{total} ball pairs satisfy sum <= union exactly"))
}

fn criterion_10() -> Outcome {
    let g = h1();
    let omega = unit_ball(&g);
    let nodes = omega.samples_with(carnot::field::Quadrature { samples: 2000, seed: 10 });
    let dil = finite_distortion_check(&Dilation { group: g.clone(), lambda: 2.0 }, &omega, &nodes);
    let tr = finite_distortion_check(&LeftTranslation { group: g.clone(), by: Point::from([0.5, 0.5, 0.5]) }, &omega, &nodes);
    let proj = LinearHomomorphism::projection(&g).map_err(|e| e.to_string())?;
    let pr = finite_distortion_check(&proj, &omega, &nodes);
    let cst = finite_distortion_check(&Constant { source: g.clone(), target: g.clone(), value: g.identity() }, &omega, &nodes);
    let r2 = Group::<f64>::abelian(2);
    let dom2 = Domain::ball(&r2, r2.identity(), 1.0);
    let n2 = dom2.samples_with(carnot::field::Quadrature { samples: 2000, seed: 10 });
    let sq = finite_distortion_check(&RadialSquash::new(2, 0.5), &dom2, &n2);
    let ok = dil.verdict == Verdict::Pass
        && tr.verdict == Verdict::Pass
        && pr.verdict == Verdict::Fail
        && pr.violations.len() == nodes.len()
        && cst.verdict == Verdict::Pass
        && sq.verdict == Verdict::Pass;
    check(
        ok,
        format!(
            "dilation {:?}, translation {:?}, constant {:?}, radial squash {:?}; projection {:?} with {} violating \
             samples (worst |D_h| {:.3})",
            dil.verdict,
            tr.verdict,
            cst.verdict,
            sq.verdict,
            pr.verdict,
            pr.violations.len(),
            pr.worst
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("1 sobolev norm equality on dilations", criterion_1),
        ("2 sobolev norm equality on translations", criterion_2),
        ("3 lipschitz norm equality on the identity", criterion_3),
        ("4 sub-ball densities", criterion_4),
        ("5 pansu and jacobian coherence", criterion_5),
        ("6 measure and metric", criterion_6),
        ("7 chain rules", criterion_7),
        ("8 lipschitz lab", criterion_8),
        ("9 quasi-additivity", criterion_9),
        ("10 finite distortion fixtures", criterion_10),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let t = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(msg) => println!("PASS criterion {name} [{secs:.1}s]: {msg}"),
            Err(msg) => {
                failed += 1;
                println!("FAIL criterion {name} [{secs:.1}s]: {msg}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
