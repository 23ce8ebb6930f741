//! The verification suites run by `carnot run`.

use carnot::exponent::Exponent;
use carnot::field::{Domain, Quadrature, ScalarField, Shape};
use carnot::group::{CoordBox, Group, Law, Point};
use carnot::lipschitz::{family_generate, validate_lipschitz, validation_pairs, FamilyOptions, OpenSetSpec};
use carnot::maps::{distortion_kp, DistortionReport, SharedMap, Verdict};
use carnot::mc;
use carnot::metric::{control_distance, ControlOptions};
use carnot::operator::{
    verify_prop_qinf, verify_theorem_lip, verify_theorem_sobolev, NodeSet, NormVerdict, PhiOptions, VerifyOptions,
};
use serde_json::{json, Value};

use crate::config::{invalid, Budgets, ConfigError, Suite};

/// Relative tolerance of metric checks on groups whose distance is an
/// optimizer upper bound.
const OPTIMIZED_METRIC_TOLERANCE: f64 = 1e-3;

/// Metric suite triples on optimizer groups are this many times fewer.
const OPTIMIZED_METRIC_THINNING: usize = 16;

pub struct Context {
    pub group: Group<f64>,
    pub domain: Domain<f64>,
    pub map: SharedMap<f64>,
    pub field: ScalarField<f64>,
    pub p: Exponent,
    pub q: Exponent,
    pub budgets: Budgets,
    pub seed: u64,
}

pub struct Outcome {
    pub pass: bool,
    pub result: Value,
    /// Per-sample distortion table for the CSV.
    pub distortion: Option<DistortionReport>,
}

impl Outcome {
    fn new(pass: bool, result: Value) -> Self {
        Self { pass, result, distortion: None }
    }
}

impl Context {
    /// Checks that need the built objects, before anything runs.
    pub fn preflight(&self, suites: &[Suite]) -> Result<(), ConfigError> {
        let norm_suites = [Suite::LipschitzNorm, Suite::SobolevNorm, Suite::SupNorm];
        let ball = match &self.domain.shape {
            Shape::Ball(b) => Some(b),
            Shape::Box(_) => None,
        };
        for s in suites {
            if norm_suites.contains(s) && ball.is_none() {
                return Err(invalid(format!("suite {} needs a ball domain", s.name())));
            }
        }
        if self.map.source() != &self.group {
            return Err(invalid("map source differs from the configured group"));
        }
        if suites.contains(&Suite::SobolevNorm) {
            let b = ball.expect("checked above");
            if self.map.image_ball(&b.center, b.radius).is_none() {
                return Err(invalid(format!(
                    "suite theorem-5.1 needs a map whose image of the domain is a known ball; `{}` has none",
                    self.map.name()
                )));
            }
        }
        Ok(())
    }

    pub fn run(&self, suite: Suite) -> Result<Outcome, String> {
        match suite {
            Suite::GroupAxioms => Ok(self.group_axioms()),
            Suite::Metric => self.metric(),
            Suite::FieldCalculus => Ok(self.field_calculus()),
            Suite::LipschitzLab => Ok(self.lipschitz_lab()),
            Suite::Distortion => self.distortion(),
            Suite::LipschitzNorm => {
                verdict(verify_theorem_lip(self.map.as_ref(), &self.domain, self.q, &self.verify_options()))
            }
            Suite::SobolevNorm => verdict(verify_theorem_sobolev(
                self.map.as_ref(),
                &self.domain,
                self.p,
                self.q,
                &self.verify_options(),
            )),
            Suite::SupNorm => verdict(verify_prop_qinf(self.map.as_ref(), &self.domain, &self.verify_options())),
        }
    }

    pub fn verify_options(&self) -> VerifyOptions {
        let b = &self.budgets;
        VerifyOptions {
            phi: PhiOptions { budget: b.family, samples: b.samples, screen: b.screen, top: b.top, seed: self.seed },
            quadrature: b.quadrature,
            sub_balls: b.sub_balls,
            ..VerifyOptions::default()
        }
    }

    fn bounding_box(&self) -> CoordBox<f64> {
        match &self.domain.shape {
            Shape::Ball(b) => self.group.ball_box(&b.center, b.radius),
            Shape::Box(b) => b.clone(),
        }
    }

    /// Center and radius of a ball containing the domain.
    fn enclosing_ball(&self) -> (Point<f64>, f64) {
        match &self.domain.shape {
            Shape::Ball(b) => (b.center.clone(), b.radius),
            Shape::Box(b) => {
                let mid: Vec<f64> = b.lo.iter().zip(&b.hi).map(|(l, h)| 0.5 * (l + h)).collect();
                let mid = Point::new(mid);
                let r = self.group.distance(&mid, &Point::new(b.lo.clone()))
                    .max(self.group.distance(&mid, &Point::new(b.hi.clone())));
                (mid, r)
            }
        }
    }

    /// Points of the bounding box; the algebraic checks need no membership.
    fn box_points(&self, n: usize, seed: u64) -> Vec<Point<f64>> {
        let b = self.bounding_box();
        mc::generate(n, seed, |rng| b.sample(rng))
    }

    fn group_axioms(&self) -> Outcome {
        let g = &self.group;
        let pts = self.box_points(3 * self.budgets.checks, self.seed);
        let (lambda, s) = (1.7, 0.6);
        let mut worst = [0.0f64; 4];
        let mut pass = true;
        for t in pts.chunks_exact(3) {
            let (a, b, c) = (&t[0], &t[1], &t[2]);
            let scale = t.iter().flat_map(|p| p.coords().iter()).fold(1.0f64, |m, v| m.max(v.abs()));
            let tol = 1e-12 * scale.powi(g.step() as i32 + 1) * 100.0;
            let errs = [
                g.multiply(&g.multiply(a, b), c).max_abs_diff(&g.multiply(a, &g.multiply(b, c))),
                g.multiply(a, &g.inverse(a)).max_abs_diff(&g.identity())
                    .max(g.multiply(&g.inverse(a), a).max_abs_diff(&g.identity())),
                g.dilate(lambda, &g.multiply(a, b)).max_abs_diff(&g.multiply(&g.dilate(lambda, a), &g.dilate(lambda, b))),
                g.dilate(s, &g.dilate(lambda, a)).max_abs_diff(&g.dilate(s * lambda, a)),
            ];
            for (w, e) in worst.iter_mut().zip(errs) {
                *w = w.max(e);
                pass &= e <= tol;
            }
        }
        Outcome::new(
            pass,
            json!({
                "triples": pts.len() / 3,
                "max_associativity_error": worst[0],
                "max_inverse_error": worst[1],
                "max_dilation_homomorphism_error": worst[2],
                "max_dilation_group_error": worst[3],
            }),
        )
    }

    fn metric(&self) -> Result<Outcome, String> {
        let g = &self.group;
        let optimized = g.law() == Law::Bch;
        let (n, tol) = if optimized {
            ((self.budgets.checks / OPTIMIZED_METRIC_THINNING).max(3), OPTIMIZED_METRIC_TOLERANCE)
        } else {
            (self.budgets.checks, 1e-9)
        };
        let pts = self.box_points(3 * n, self.seed ^ 0x3e7);
        let lambda = 1.5;
        let d = |x: &Point<f64>, y: &Point<f64>| g.try_distance(x, y).map_err(|e| e.to_string());
        let mut worst = json!({});
        let (mut tri, mut sym, mut inv, mut hom, mut lower) = (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64);
        for t in pts.chunks_exact(3) {
            let (a, b, c) = (&t[0], &t[1], &t[2]);
            let (ab, bc, ac) = (d(a, b)?, d(b, c)?, d(a, c)?);
            tri = tri.max((ac - ab - bc) / (ab + bc).max(1e-300));
            sym = sym.max((d(b, a)? - ab).abs() / ab.max(1e-300));
            inv = inv.max((d(&g.multiply(c, a), &g.multiply(c, b))? - ab).abs() / ab.max(1e-300));
            hom = hom.max((d(&g.dilate(lambda, a), &g.dilate(lambda, b))? - lambda * ab).abs() / (lambda * ab).max(1e-300));
            let x = g.between(a, b);
            lower = lower.max((g.distance_lower_bound(&x) - ab) / ab.max(1e-300));
        }
        let mut pass = tri <= tol && sym <= tol && inv <= tol && hom <= tol && lower <= tol;
        if let Law::Heisenberg { .. } = g.law() {
            // The optimizer against the closed form.
            let mut control = 0.0f64;
            for x in pts.iter().take(5) {
                let exact = g.norm(x);
                let sol = control_distance(g, x, &ControlOptions::default()).map_err(|e| e.to_string())?;
                control = control.max((sol.upper - exact).abs() / exact.max(1e-300));
            }
            pass &= control <= OPTIMIZED_METRIC_TOLERANCE;
            worst["control_vs_closed_form"] = json!(control);
        }
        worst["triangle_excess"] = json!(tri);
        worst["symmetry"] = json!(sym);
        worst["left_invariance"] = json!(inv);
        worst["homogeneity"] = json!(hom);
        worst["lower_bound_excess"] = json!(lower);
        Ok(Outcome::new(
            pass,
            json!({ "triples": n, "tolerance": tol, "distance": if optimized { "control optimizer" } else { "closed form" },
                    "max_relative": worst }),
        ))
    }

    fn field_calculus(&self) -> Outcome {
        let f = &self.field;
        let nodes = self.domain.samples_with(Quadrature { samples: self.budgets.checks, seed: self.seed ^ 0xf1e1d });
        let h = self.domain.default_step();
        let mut grad_err = 0.0f64;
        let mut lattice_err = 0.0f64;
        let (pos, neg, abs) = (f.pos_part(), f.neg_part(), f.abs_val());
        for x in &nodes {
            let tree = f.horizontal_gradient(x, h);
            let fd = f.numeric_gradient(x, h);
            let scale = tree.norm().max(1.0);
            let e = tree.gradient.iter().zip(&fd.gradient).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / scale;
            grad_err = grad_err.max(e);
            let u = f.eval(x);
            let (up, un, ua) = (pos.eval(x), neg.eval(x), abs.eval(x));
            lattice_err = lattice_err.max((up - un - u).abs()).max((up + un - ua).abs());
        }
        let qf = self.q.to_f64();
        let seminorm = f.seminorm_on(&self.domain, &nodes, qf);
        let pass = grad_err <= 1e-4 && lattice_err <= 1e-12;
        Outcome::new(
            pass,
            json!({
                "field": format!("{:?}", f.expr),
                "points": nodes.len(),
                "max_tree_vs_difference_gradient": grad_err,
                "max_lattice_identity_error": lattice_err,
                "gradient_seminorm": seminorm,
            }),
        )
    }

    fn lipschitz_lab(&self) -> Outcome {
        let y = self.map.target();
        let (c, r) = self.enclosing_ball();
        let (c, r) = if y == &self.group { (c, r) } else { (y.identity(), r) };
        let opts = FamilyOptions::new(self.budgets.family, self.seed).with_hint(c.clone(), r);
        let family = family_generate(y, &OpenSetSpec::Whole, &opts);
        let pairs = validation_pairs(y, &c, r, self.budgets.checks, self.seed ^ 0x1a5);
        let mut violating = Vec::new();
        let mut max_quotient = 0.0f64;
        let mut kinds = std::collections::BTreeMap::<String, usize>::new();
        for u in &family {
            *kinds.entry(u.provenance.kind.clone()).or_default() += 1;
            let v = validate_lipschitz(y, u, &pairs);
            max_quotient = max_quotient.max(v.max_quotient);
            if !v.passed() || u.lip > 1.0 + 1e-12 {
                violating.push(json!({ "function": u.describe(), "validation": v }));
            }
        }
        Outcome::new(
            violating.is_empty() && !family.is_empty(),
            json!({
                "family_size": family.len(),
                "pairs": pairs.len(),
                "kinds": kinds,
                "max_difference_quotient": max_quotient,
                "violations": violating,
            }),
        )
    }

    fn distortion(&self) -> Result<Outcome, String> {
        let nodes = NodeSet::domain(&self.domain, self.budgets.samples, self.seed);
        let pts: Vec<Point<f64>> = nodes.blocks.iter().flat_map(|b| b.nodes.iter().cloned()).collect();
        let report = distortion_kp(self.map.as_ref(), &self.domain, self.p, self.q, &pts).map_err(|e| e.to_string())?;
        let pass = report.finite_distortion.verdict == Verdict::Pass;
        let result = serde_json::to_value(&report).map_err(|e| e.to_string())?;
        Ok(Outcome { pass, result, distortion: Some(report) })
    }
}

fn verdict(v: Result<NormVerdict, carnot::operator::OperatorError>) -> Result<Outcome, String> {
    let v = v.map_err(|e| e.to_string())?;
    let pass = v.pass;
    Ok(Outcome::new(pass, serde_json::to_value(&v).map_err(|e| e.to_string())?))
}
