//! The set function `Phi`, its derivative, and norm verifiers for the
//! composition operator `u -> u o phi`.
//!
//! `Phi(V)` is a supremum over admissible 1-Lipschitz functions, so every
//! estimate here is a lower bound realized by an explicit witness. Integrals
//! over families are accumulated in fixed point (`2^-40` units per node), so
//! sums over disjoint pieces compare exactly.

use rand::Rng as _;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::exponent::{sigma, Exponent, ExponentError};
use crate::field::Domain;
use crate::group::{Group, Point};
use crate::lipschitz::{
    disjoint_sum_refined, family_generate, horizontal_directions, horizontal_functional, identity_stencil, map_stencil,
    FamilyOptions, LipTestFunction, OpenSetSpec, Provenance, Stencil, DEFAULT_BUDGET,
};
use crate::maps::{distortion_at, distortion_kp, horizontal_differential, linear_intercept, GroupMap, MapError};
use crate::mc;
use crate::scalar::{lit, to_f64, Real};

/// Accepted relative shortfall of an estimate below the analytic value.
pub const GAP_TOL: f64 = 0.10;
/// Accepted relative excess of an estimate above the analytic value.
pub const QUAD_TOL: f64 = 0.02;

const FIXED_SCALE: f64 = (1u64 << 40) as f64;

#[derive(Debug, Error)]
pub enum OperatorError {
    #[error(transparent)]
    Exponent(#[from] ExponentError),
    #[error(transparent)]
    Map(#[from] MapError),
    #[error("the image of the domain under `{0}` is not a known ball")]
    NoImageBall(String),
    #[error("the domain must be a ball")]
    NotBall,
    #[error("exponent q must be finite for this estimator")]
    InfiniteQ,
}

/// Quadrature nodes in blocks of equal weight `measure / len`.
#[derive(Clone, Debug)]
pub struct NodeBlock<T> {
    pub nodes: Vec<Point<T>>,
    pub measure: f64,
}

/// A weighted quadrature rule made of blocks.
#[derive(Clone, Debug, Default)]
pub struct NodeSet<T> {
    pub blocks: Vec<NodeBlock<T>>,
}

impl<T: Real> NodeSet<T> {
    pub fn ball(g: &Group<T>, center: &Point<T>, r: T, samples: usize, seed: u64) -> Self {
        let ball = g.ball(center.clone(), r);
        Self { blocks: vec![NodeBlock { nodes: ball.sample(samples, seed), measure: to_f64(ball.measure()) }] }
    }

    pub fn domain(d: &Domain<T>, samples: usize, seed: u64) -> Self {
        Self {
            blocks: vec![NodeBlock {
                nodes: d.samples_with(crate::field::Quadrature { samples, seed }),
                measure: to_f64(d.measure()),
            }],
        }
    }

    pub fn concat(mut self, other: Self) -> Self {
        self.blocks.extend(other.blocks);
        self
    }

    /// The first `k` nodes of every block, with block measures unchanged.
    pub fn prefix(&self, k: usize) -> Self {
        Self {
            blocks: self
                .blocks
                .iter()
                .map(|b| NodeBlock { nodes: b.nodes[..k.min(b.nodes.len())].to_vec(), measure: b.measure })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.blocks.iter().map(|b| b.nodes.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn measure(&self) -> f64 {
        self.blocks.iter().map(|b| b.measure).sum()
    }
}

/// Stencils of a map at every node, with node weights.
pub struct Prepared<T> {
    blocks: Vec<(Vec<Stencil<Point<T>, T>>, f64)>,
}

impl<T: Real> Prepared<T> {
    /// Stencils of `phi` at the nodes.
    pub fn map(phi: &dyn GroupMap<T>, nodes: &NodeSet<T>, h: T) -> Self {
        Self::build(nodes, |x| map_stencil(phi, x, h))
    }

    /// Stencils of the identity of `g` at the nodes.
    pub fn identity(g: &Group<T>, nodes: &NodeSet<T>, h: T) -> Self {
        Self::build(nodes, |x| identity_stencil(g, x, h))
    }

    fn build(nodes: &NodeSet<T>, f: impl Fn(&Point<T>) -> Stencil<Point<T>, T> + Sync) -> Self {
        let blocks = nodes
            .blocks
            .iter()
            .map(|b| {
                let w = if b.nodes.is_empty() { 0.0 } else { b.measure / b.nodes.len() as f64 };
                (b.nodes.par_iter().map(&f).collect(), w)
            })
            .collect();
        Self { blocks }
    }

    fn norms<'a>(&'a self, u: &'a LipTestFunction<T, Point<T>>) -> impl Iterator<Item = (f64, Vec<f64>)> + 'a {
        self.blocks.iter().map(move |(st, w)| {
            let v: Vec<f64> = st
                .par_iter()
                .map(|s| {
                    let (_, g) = u.jet(s);
                    to_f64(g.iter().map(|&x| x * x).sum::<T>().sqrt())
                })
                .collect();
            (*w, v)
        })
    }

    /// `int |grad_h (u o phi)|^q` in fixed point units of `2^-40`.
    pub fn fixed_integral(&self, u: &LipTestFunction<T, Point<T>>, q: f64) -> i128 {
        self.norms(u)
            .map(|(w, v)| v.iter().map(|&n| (w * n.powf(q) * FIXED_SCALE).round() as i128).sum::<i128>())
            .sum()
    }

    /// Sample maximum of `|grad_h (u o phi)|`.
    pub fn ess_sup(&self, u: &LipTestFunction<T, Point<T>>) -> f64 {
        self.norms(u).flat_map(|(_, v)| v).fold(0.0, f64::max)
    }
}

pub fn fixed_to_f64(v: i128) -> f64 {
    v as f64 / FIXED_SCALE
}

/// Settings of the `Phi` estimators.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct PhiOptions {
    pub budget: usize,
    /// Quadrature nodes per block.
    pub samples: usize,
    /// Nodes per block for screening the family.
    pub screen: usize,
    /// Screened candidates evaluated on all nodes.
    pub top: usize,
    pub seed: u64,
}

impl Default for PhiOptions {
    fn default() -> Self {
        Self { budget: DEFAULT_BUDGET, samples: 20_000, screen: 1024, top: 8, seed: 0 }
    }
}

impl PhiOptions {
    pub fn scaled(mut self, factor: f64) -> Self {
        let s = |n: usize| ((n as f64 * factor).round() as usize).max(1);
        self.budget = s(self.budget);
        self.samples = s(self.samples);
        self.screen = s(self.screen).min(self.samples);
        self
    }
}

/// Lower estimate of a set function value with its witness.
#[derive(Clone, Debug, Serialize)]
pub struct SetFunctionEstimate {
    pub value: f64,
    #[serde(skip)]
    pub fixed: i128,
    pub family_size: usize,
    pub evaluated: usize,
    pub witness: Option<Provenance>,
    #[serde(skip)]
    pub witness_index: Option<usize>,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

/// Indices of the screened candidates: the `top` best by `score`, then `forced`.
fn candidates(scores: &[f64], top: usize, forced: usize) -> Vec<usize> {
    let n = scores.len();
    let mut idx: Vec<usize> = (0..n - forced).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(top);
    idx.extend(n - forced..n);
    idx.sort_unstable();
    idx.dedup();
    idx
}

/// `max_u int_Omega |grad_h (u o phi)|^q` over `family` and `forced`.
///
/// All members are screened on a prefix of the nodes; the best `top` and
/// every forced member are then integrated on all nodes.
pub fn phi_estimate_with<T: Real>(
    phi: &dyn GroupMap<T>,
    family: &[LipTestFunction<T, Point<T>>],
    forced: &[LipTestFunction<T, Point<T>>],
    q: f64,
    nodes: &NodeSet<T>,
    h: T,
    opts: &PhiOptions,
) -> SetFunctionEstimate {
    let all: Vec<&LipTestFunction<T, Point<T>>> = family.iter().chain(forced).collect();
    let mut est = SetFunctionEstimate {
        value: 0.0,
        fixed: 0,
        family_size: all.len(),
        evaluated: 0,
        witness: None,
        witness_index: None,
        seed: opts.seed,
        warning: None,
    };
    if all.is_empty() {
        est.warning = Some("empty family".into());
        return est;
    }
    let picks: Vec<usize> = if family.len() > opts.top {
        let screen = Prepared::map(phi, &nodes.prefix(opts.screen), h);
        let scores: Vec<f64> = all.iter().map(|u| fixed_to_f64(screen.fixed_integral(u, q))).collect();
        candidates(&scores, opts.top, forced.len())
    } else {
        (0..all.len()).collect()
    };
    let prep = Prepared::map(phi, nodes, h);
    for &i in &picks {
        let v = prep.fixed_integral(all[i], q);
        if est.witness.is_none() || v > est.fixed {
            est.fixed = v;
            est.witness = Some(all[i].provenance.clone());
            est.witness_index = Some(i);
        }
    }
    est.evaluated = picks.len();
    est.value = fixed_to_f64(est.fixed);
    est
}

fn family_opts<T: Real>(opts: &PhiOptions, hint: Option<(Point<T>, T)>) -> FamilyOptions<T> {
    let mut f = FamilyOptions::new(opts.budget, opts.seed);
    f.hint = hint;
    f
}

/// `Phi^(V)` for `Phi(V) = sup int_Omega |grad_h (u o phi)|^q` over
/// 1-Lipschitz `u` with `dist(spt u, Y \ V) > 0`, integrated on `nodes`.
pub fn phi_estimate<T: Real>(
    phi: &dyn GroupMap<T>,
    v: &OpenSetSpec<Point<T>, T>,
    q: f64,
    nodes: &NodeSet<T>,
    h: T,
    opts: &PhiOptions,
    hint: Option<(Point<T>, T)>,
) -> SetFunctionEstimate {
    let family = family_generate(phi.target(), v, &family_opts(opts, hint));
    phi_estimate_with(phi, &family, &[], q, nodes, h, opts)
}

/// Supremum of `||grad (u o phi)||_{L_q(Omega)} / ||grad u||_{L_p(Omega')}`.
#[derive(Clone, Debug, Serialize)]
pub struct RatioEstimate {
    pub p: Exponent,
    pub q: Exponent,
    pub sigma: Exponent,
    /// Best ratio.
    pub ratio: f64,
    /// `ratio^sigma`, or the ratio itself when `sigma = inf`.
    pub value: f64,
    pub family_size: usize,
    pub evaluated: usize,
    pub witness: Option<Provenance>,
    pub seed: u64,
}

/// Node sets and steps for a ratio estimate.
pub struct RatioSetup<'a, T> {
    /// Nodes of the source set, integrated through `phi`.
    pub numerator: &'a NodeSet<T>,
    pub numerator_step: T,
    /// Nodes of the target set for `||grad u||_{L_p}`.
    pub denominator: &'a NodeSet<T>,
    pub denominator_step: T,
}

fn ratio_of<T: Real>(
    num: &Prepared<T>,
    den: &Prepared<T>,
    u: &LipTestFunction<T, Point<T>>,
    p: Exponent,
    q: Exponent,
) -> f64 {
    let qf = q.to_f64();
    let top = if q.is_infinite() { num.ess_sup(u) } else { fixed_to_f64(num.fixed_integral(u, qf)).powf(1.0 / qf) };
    let bottom = if p.is_infinite() {
        den.ess_sup(u)
    } else {
        fixed_to_f64(den.fixed_integral(u, p.to_f64())).powf(1.0 / p.to_f64())
    };
    if bottom > 0.0 {
        top / bottom
    } else {
        0.0
    }
}

/// `Phi^(V) = (sup_u ratio)^sigma` over the family of `V`.
pub fn phi_ratio_estimate<T: Real>(
    phi: &dyn GroupMap<T>,
    v: &OpenSetSpec<Point<T>, T>,
    p: Exponent,
    q: Exponent,
    setup: &RatioSetup<'_, T>,
    opts: &PhiOptions,
    hint: Option<(Point<T>, T)>,
) -> Result<RatioEstimate, OperatorError> {
    let s = sigma(p, q)?;
    let family = family_generate(phi.target(), v, &family_opts(opts, hint));
    let mut out = RatioEstimate {
        p,
        q,
        sigma: s,
        ratio: 0.0,
        value: 0.0,
        family_size: family.len(),
        evaluated: 0,
        witness: None,
        seed: opts.seed,
    };
    if family.is_empty() {
        return Ok(out);
    }
    let tg = phi.target();
    let picks: Vec<usize> = if family.len() > opts.top {
        let num = Prepared::map(phi, &setup.numerator.prefix(opts.screen), setup.numerator_step);
        let den = Prepared::identity(tg, &setup.denominator.prefix(opts.screen), setup.denominator_step);
        let scores: Vec<f64> = family.iter().map(|u| ratio_of(&num, &den, u, p, q)).collect();
        candidates(&scores, opts.top, 0)
    } else {
        (0..family.len()).collect()
    };
    let num = Prepared::map(phi, setup.numerator, setup.numerator_step);
    let den = Prepared::identity(tg, setup.denominator, setup.denominator_step);
    for &i in &picks {
        let r = ratio_of(&num, &den, &family[i], p, q);
        if out.witness.is_none() || r > out.ratio {
            out.ratio = r;
            out.witness = Some(family[i].provenance.clone());
        }
    }
    out.evaluated = picks.len();
    out.value = if s.is_infinite() { out.ratio } else { out.ratio.powf(s.to_f64()) };
    Ok(out)
}

/// Result of [`quasi_additivity_check`].
#[derive(Clone, Debug, Serialize)]
pub struct QuasiAdditivity {
    pub parts: Vec<f64>,
    pub sum: f64,
    pub union: f64,
    /// `sum_j Phi^(V_j) <= Phi^(union)` in exact fixed point arithmetic.
    pub pass: bool,
    pub union_witness: Option<Provenance>,
}

/// Checks `sum_j Phi^(V_j) <= Phi^(V_1 u ... u V_k)` for images
/// `V_j = phi(B(c_j, r_j))` of disjoint balls.
///
/// Every estimate integrates on the same nodes, one block per source ball.
/// The union family contains disjoint sums of the best witnesses of the
/// parts, so the inequality holds exactly when the pieces are separated.
pub fn quasi_additivity_check<T: Real>(
    phi: &dyn GroupMap<T>,
    q: f64,
    source_balls: &[(Point<T>, T)],
    h: T,
    opts: &PhiOptions,
) -> Result<QuasiAdditivity, OperatorError> {
    let g = phi.source();
    let tg = phi.target();
    let mut nodes = NodeSet::default();
    let mut images = Vec::new();
    for (k, (c, r)) in source_balls.iter().enumerate() {
        nodes = nodes.concat(NodeSet::ball(g, c, *r, opts.samples, opts.seed.wrapping_add(k as u64 + 1)));
        images.push(phi.image_ball(c, *r).ok_or_else(|| OperatorError::NoImageBall(phi.name()))?);
    }
    let mut parts = Vec::new();
    let mut fixed_sum: i128 = 0;
    let mut best: Vec<Vec<LipTestFunction<T, Point<T>>>> = Vec::new();
    for (k, (c, r)) in images.iter().enumerate() {
        let v = OpenSetSpec::Ball { center: c.clone(), radius: *r };
        let mut fo = family_opts(opts, None);
        fo.seed = opts.seed.wrapping_add(101 * (k as u64 + 1));
        let family = family_generate(tg, &v, &fo);
        let est = phi_estimate_with(phi, &family, &[], q, &nodes, h, opts);
        fixed_sum += est.fixed;
        parts.push(est.value);
        best.push(est.witness_index.map(|i| vec![family[i].clone()]).unwrap_or_default());
    }
    // Disjoint sums of the part witnesses, folded left.
    let mut forced: Vec<LipTestFunction<T, Point<T>>> = Vec::new();
    if let Some(first) = best.first().and_then(|b| b.first()).cloned() {
        let mut acc = first;
        let mut ok = true;
        for b in best.iter().skip(1) {
            match b.first() {
                Some(u) => match disjoint_sum_refined(tg, &acc, u) {
                    Ok(s) => acc = s,
                    Err(_) => ok = false,
                },
                None => {}
            }
        }
        if ok {
            forced.push(acc);
        }
    }
    let union = OpenSetSpec::Union(images.clone());
    let mut fo = family_opts(opts, None);
    fo.seed = opts.seed.wrapping_add(7);
    let family = family_generate(tg, &union, &fo);
    let est = phi_estimate_with(phi, &family, &forced, q, &nodes, h, opts);
    Ok(QuasiAdditivity {
        parts,
        sum: fixed_to_f64(fixed_sum),
        union: est.value,
        pass: fixed_sum <= est.fixed,
        union_witness: est.witness,
    })
}

/// Ratio sequence `Phi(B(x, r)) / |B(x, r)|` and its limit.
#[derive(Clone, Debug, Serialize)]
pub struct SetDerivative {
    pub radii: Vec<f64>,
    pub ratios: Vec<f64>,
    pub smallest: f64,
    pub extrapolated: f64,
}

/// `Phi'(x)` from balls of the given radii, `set_fn(x, r) = Phi(B(x, r))`.
pub fn set_derivative<T: Real>(
    g: &Group<T>,
    set_fn: impl Fn(&Point<T>, T) -> f64,
    x: &Point<T>,
    radii: &[T],
) -> SetDerivative {
    let nu = g.homogeneous_dim() as i32;
    let ratios: Vec<f64> = radii.iter().map(|&r| set_fn(x, r) / to_f64(r).powi(nu)).collect();
    let rf: Vec<f64> = radii.iter().map(|&r| to_f64(r)).collect();
    let smallest = rf
        .iter()
        .zip(&ratios)
        .fold((f64::INFINITY, f64::NAN), |b, (&r, &v)| if r < b.0 { (r, v) } else { b })
        .1;
    let extrapolated = linear_intercept(&rf, &ratios).unwrap_or(smallest);
    SetDerivative { radii: rf, ratios, smallest, extrapolated }
}

/// `U -> int_U f` by Monte Carlo on balls.
pub fn integral_set_function<T: Real>(
    g: &Group<T>,
    f: impl Fn(&Point<T>) -> f64 + Sync,
    samples: usize,
    seed: u64,
) -> impl Fn(&Point<T>, T) -> f64 {
    let g = g.clone();
    move |x, r| {
        let ball = g.ball(x.clone(), r);
        let nodes = ball.sample(samples, seed);
        let m: mc::Moments<f64> = mc::moments(&nodes, &f);
        m.mean() * to_f64(ball.measure())
    }
}

/// Pointwise upper gradient estimate with the metric-derivative sandwich
/// `max_j m_j <= |grad_0 phi| <= (sum_j m_j^2)^{1/2}`.
#[derive(Clone, Debug, Serialize)]
pub struct UpperGradient {
    pub value: f64,
    pub lower: f64,
    pub upper: f64,
    pub witness: Option<Provenance>,
}

/// Horizontal functionals in `directions` unit directions.
pub fn functional_family<T: Real>(tg: &Group<T>, directions: usize) -> Vec<LipTestFunction<T, Point<T>>> {
    horizontal_directions::<T>(tg.horizontal_dim(), directions, 0).iter().map(|d| horizontal_functional(tg, d)).collect()
}

/// `max_u |grad_h (u o phi)(x)| / Lip(u)` over `family`.
pub fn upper_gradient_estimate<T: Real>(
    phi: &dyn GroupMap<T>,
    x: &Point<T>,
    family: &[LipTestFunction<T, Point<T>>],
    h: T,
) -> UpperGradient {
    let st = map_stencil(phi, x, h);
    let mut value = 0.0;
    let mut witness = None;
    for u in family {
        let (_, g) = u.jet(&st);
        let n = to_f64(g.iter().map(|&v| v * v).sum::<T>().sqrt() / u.lip);
        if n > value || witness.is_none() {
            value = n;
            witness = Some(u.provenance.clone());
        }
    }
    let m: Vec<f64> = (0..phi.source().horizontal_dim())
        .map(|j| to_f64(crate::field::metric_derivative(phi, j, x, h)))
        .collect();
    let lower = m.iter().copied().fold(0.0, f64::max);
    let upper = m.iter().map(|v| v * v).sum::<f64>().sqrt();
    UpperGradient { value, lower, upper, witness }
}

/// A set-level witness.
#[derive(Clone, Debug, Serialize)]
pub struct Witness {
    pub set: String,
    pub analytic: f64,
    pub estimate: f64,
    pub function: Option<Provenance>,
    pub pass: bool,
}

/// Comparison of an analytic norm with an estimator lower bound.
#[derive(Clone, Debug, Serialize)]
pub struct NormVerdict {
    pub theorem: String,
    pub map: String,
    pub p: Option<Exponent>,
    pub q: Exponent,
    pub sigma: Option<Exponent>,
    pub analytic: f64,
    pub estimate: f64,
    /// `(analytic - estimate) / analytic`.
    pub gap: f64,
    pub witnesses: Vec<Witness>,
    pub pass: bool,
}

/// Tolerances and budgets of the verifiers.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct VerifyOptions {
    pub phi: PhiOptions,
    /// Quadrature nodes for analytic sides.
    pub quadrature: usize,
    pub gap_tol: f64,
    pub quad_tol: f64,
    pub sub_balls: usize,
    /// Radii of the sub-balls are drawn from this range.
    pub sub_ball_radii: (f64, f64),
    /// Directions of the functional family for upper gradients.
    pub directions: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            phi: PhiOptions::default(),
            quadrature: 100_000,
            gap_tol: GAP_TOL,
            quad_tol: QUAD_TOL,
            sub_balls: 5,
            sub_ball_radii: (0.1, 0.3),
            directions: 16,
        }
    }
}

impl VerifyOptions {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.phi.seed = seed;
        self
    }

    fn within(&self, analytic: f64, estimate: f64) -> bool {
        if analytic == 0.0 {
            return estimate.abs() <= 1e-12;
        }
        let r = estimate / analytic;
        r >= 1.0 - self.gap_tol && r <= 1.0 + self.quad_tol
    }
}

fn relative_gap(analytic: f64, estimate: f64) -> f64 {
    if analytic == 0.0 {
        0.0
    } else {
        (analytic - estimate) / analytic
    }
}

/// Seeded balls `B(c_i, r_i)` inside `B(center, radius)`, `r_i` drawn from `radii`.
pub fn sub_balls<T: Real>(
    g: &Group<T>,
    center: &Point<T>,
    radius: T,
    count: usize,
    radii: (f64, f64),
    seed: u64,
) -> Vec<(Point<T>, T)> {
    let mut rng = mc::chunk_rng(seed ^ 0xba11, 0);
    (0..count)
        .map(|k| {
            let r = lit::<T>(rng.gen_range(radii.0..radii.1)).min(radius * lit(0.5));
            let inner = g.ball(center.clone(), radius - r);
            let c = inner.sample(1, seed.wrapping_add(31 * k as u64 + 5)).remove(0);
            (c, r)
        })
        .collect()
}

/// Seeded pairs of disjoint balls inside `B(center, radius)` with a gap of
/// at least `gap` between them.
pub fn disjoint_ball_pairs<T: Real>(
    g: &Group<T>,
    center: &Point<T>,
    radius: T,
    count: usize,
    radii: (f64, f64),
    gap: T,
    seed: u64,
) -> Vec<[(Point<T>, T); 2]> {
    let mut out = Vec::new();
    let mut attempt = 0u64;
    while out.len() < count {
        let b = sub_balls(g, center, radius, 2, radii, seed.wrapping_add(attempt * 977));
        attempt += 1;
        if g.distance(&b[0].0, &b[1].0) > b[0].1 + b[1].1 + gap {
            out.push([b[0].clone(), b[1].clone()]);
        }
    }
    out
}

fn domain_ball<T: Real>(d: &Domain<T>) -> Result<(Point<T>, T), OperatorError> {
    match &d.shape {
        crate::field::Shape::Ball(b) => Ok((b.center.clone(), b.radius)),
        crate::field::Shape::Box(_) => Err(OperatorError::NotBall),
    }
}

/// Norm equality `|| |grad_0 phi| ||_{L_q(U)} = Phi(phi(U))^{1/q}` on `Omega`
/// and seeded sub-balls; `q = inf` dispatches to [`verify_prop_qinf`].
pub fn verify_theorem_lip<T: Real>(
    phi: &dyn GroupMap<T>,
    omega: &Domain<T>,
    q: Exponent,
    opts: &VerifyOptions,
) -> Result<NormVerdict, OperatorError> {
    if q.is_infinite() {
        return verify_prop_qinf(phi, omega, opts);
    }
    let qf = q.to_f64();
    let g = phi.source();
    let (c0, r0) = domain_ball(omega)?;
    let h = omega.default_step();
    let funcs = functional_family(phi.target(), opts.directions);
    let mut sets = vec![("Omega".to_string(), c0.clone(), r0)];
    for (k, (c, r)) in sub_balls(g, &c0, r0, opts.sub_balls, opts.sub_ball_radii, opts.phi.seed).into_iter().enumerate() {
        sets.push((format!("U{k}"), c, r));
    }
    let mut witnesses = Vec::new();
    for (k, (name, c, r)) in sets.iter().enumerate() {
        let samples = if k == 0 { opts.quadrature } else { opts.phi.samples };
        let nodes = NodeSet::ball(g, c, *r, samples, opts.phi.seed.wrapping_add(k as u64));
        let ug: Vec<f64> =
            nodes.blocks[0].nodes.par_iter().map(|x| upper_gradient_estimate(phi, x, &funcs, h).value).collect();
        let integral = ug.iter().map(|v| v.powf(qf)).sum::<f64>() / ug.len() as f64 * nodes.measure();
        let analytic = integral.powf(1.0 / qf);
        let v = match phi.image_ball(c, *r) {
            Some((ic, ir)) => OpenSetSpec::Ball { center: ic, radius: ir },
            None if k == 0 => OpenSetSpec::Whole,
            None => continue,
        };
        let phi_nodes = if k == 0 { nodes.prefix(opts.phi.samples) } else { nodes };
        let est = phi_estimate(phi, &v, qf, &phi_nodes, h, &opts.phi, None);
        let estimate = est.value.powf(1.0 / qf);
        witnesses.push(Witness {
            set: name.clone(),
            analytic,
            estimate,
            function: est.witness,
            pass: opts.within(analytic, estimate),
        });
    }
    let (analytic, estimate) = (witnesses[0].analytic, witnesses[0].estimate);
    Ok(NormVerdict {
        theorem: "lipschitz-norm".into(),
        map: phi.name(),
        p: None,
        q,
        sigma: None,
        analytic,
        estimate,
        gap: relative_gap(analytic, estimate),
        pass: witnesses.iter().all(|w| w.pass),
        witnesses,
    })
}

/// `q = inf`: sample max of the upper gradient against the family sup of
/// `ess sup |grad_h (u o phi)| / Lip(u)`.
pub fn verify_prop_qinf<T: Real>(
    phi: &dyn GroupMap<T>,
    omega: &Domain<T>,
    opts: &VerifyOptions,
) -> Result<NormVerdict, OperatorError> {
    let g = phi.source();
    let (c0, r0) = domain_ball(omega)?;
    let h = omega.default_step();
    let nodes = NodeSet::ball(g, &c0, r0, opts.phi.samples, opts.phi.seed);
    let funcs = functional_family(phi.target(), opts.directions);
    let analytic = nodes.blocks[0]
        .nodes
        .par_iter()
        .map(|x| upper_gradient_estimate(phi, x, &funcs, h).value)
        .reduce(|| 0.0, f64::max);
    let hint = phi.image_ball(&c0, r0).or_else(|| Some((phi.eval(&c0), r0)));
    let family = family_generate(phi.target(), &OpenSetSpec::Whole, &family_opts(&opts.phi, hint));
    let screen = Prepared::map(phi, &nodes.prefix(opts.phi.screen), h);
    let scores: Vec<f64> = family.iter().map(|u| screen.ess_sup(u) / to_f64(u.lip)).collect();
    let picks = if family.len() > opts.phi.top { candidates(&scores, opts.phi.top, 0) } else { (0..family.len()).collect() };
    let prep = Prepared::map(phi, &nodes, h);
    let mut estimate = 0.0;
    let mut witness = None;
    for i in picks {
        let v = prep.ess_sup(&family[i]) / to_f64(family[i].lip);
        if v > estimate {
            estimate = v;
            witness = Some(family[i].provenance.clone());
        }
    }
    let pass = opts.within(analytic, estimate);
    Ok(NormVerdict {
        theorem: "lipschitz-norm-qinf".into(),
        map: phi.name(),
        p: None,
        q: Exponent::Infinite,
        sigma: None,
        analytic,
        estimate,
        gap: relative_gap(analytic, estimate),
        witnesses: vec![Witness { set: "Omega".into(), analytic, estimate, function: witness, pass }],
        pass,
    })
}

/// Norm equality `||phi*|| = ||K_p||_{L_sigma(Omega)}` with the sub-ball
/// density checks `int_U K_p^sigma >= Phi^(phi(U))` and
/// `(int K_p^sigma)'(x) = K_p(x)^sigma`.
pub fn verify_theorem_sobolev<T: Real>(
    phi: &dyn GroupMap<T>,
    omega: &Domain<T>,
    p: Exponent,
    q: Exponent,
    opts: &VerifyOptions,
) -> Result<NormVerdict, OperatorError> {
    if q.is_infinite() {
        return Err(OperatorError::InfiniteQ);
    }
    let s = sigma(p, q)?;
    let g = phi.source();
    let tg = phi.target();
    let (c0, r0) = domain_ball(omega)?;
    let (ic, ir) = phi.image_ball(&c0, r0).ok_or_else(|| OperatorError::NoImageBall(phi.name()))?;
    let h = omega.default_step();
    let image = Domain::ball(tg, ic.clone(), ir);
    let h_target = image.default_step();

    let quad = NodeSet::domain(omega, opts.quadrature, opts.phi.seed);
    let report = distortion_kp(phi, omega, p, q, &quad.blocks[0].nodes)?;
    let analytic = report.kp_norm;

    let num = NodeSet::ball(g, &c0, r0, opts.phi.samples, opts.phi.seed.wrapping_add(1));
    let den = NodeSet::ball(tg, &ic, ir, opts.phi.samples, opts.phi.seed.wrapping_add(2));
    let setup = RatioSetup { numerator: &num, numerator_step: h, denominator: &den, denominator_step: h_target };
    let est = phi_ratio_estimate(phi, &OpenSetSpec::Whole, p, q, &setup, &opts.phi, Some((ic.clone(), ir)))?;
    let estimate = est.ratio;
    let mut witnesses = vec![Witness {
        set: "Omega".into(),
        analytic,
        estimate,
        function: est.witness,
        pass: opts.within(analytic, estimate),
    }];

    if let Exponent::Finite(_) = s {
        let sf = s.to_f64();
        let kp_sigma = |x: &Point<T>| distortion_at(phi, x, p, h).kp.powf(sf);
        for (k, (c, r)) in sub_balls(g, &c0, r0, opts.sub_balls, opts.sub_ball_radii, opts.phi.seed).into_iter().enumerate() {
            let Some((vc, vr)) = phi.image_ball(&c, r) else { continue };
            let seed = opts.phi.seed.wrapping_add(10 + k as u64);
            let un = NodeSet::ball(g, &c, r, opts.phi.samples, seed);
            let ud = NodeSet::ball(tg, &vc, vr, opts.phi.samples, seed.wrapping_add(1000));
            let vals: Vec<f64> = un.blocks[0].nodes.par_iter().map(kp_sigma).collect();
            let integral = vals.iter().sum::<f64>() / vals.len() as f64 * un.measure();
            let setup =
                RatioSetup { numerator: &un, numerator_step: h, denominator: &ud, denominator_step: h_target };
            let v = OpenSetSpec::Ball { center: vc, radius: vr };
            let mut po = opts.phi;
            po.seed = seed;
            let e = phi_ratio_estimate(phi, &v, p, q, &setup, &po, None)?;
            witnesses.push(Witness {
                set: format!("U{k}"),
                analytic: integral,
                estimate: e.value,
                function: e.witness,
                pass: e.value <= integral,
            });
            let sd = set_derivative(
                g,
                integral_set_function(g, kp_sigma, opts.phi.screen.max(256), seed.wrapping_add(2000)),
                &c,
                &[lit(0.05)],
            );
            let density = kp_sigma(&c);
            let ok = density > 0.0 && ((sd.smallest - density) / density).abs() <= 0.10 || density == 0.0 && sd.smallest == 0.0;
            witnesses.push(Witness {
                set: format!("U{k} density"),
                analytic: density,
                estimate: sd.smallest,
                function: None,
                pass: ok,
            });
        }
    }
    Ok(NormVerdict {
        theorem: "sobolev-norm".into(),
        map: phi.name(),
        p: Some(p),
        q,
        sigma: Some(s),
        analytic,
        estimate,
        gap: relative_gap(analytic, estimate),
        pass: witnesses.iter().all(|w| w.pass),
        witnesses,
    })
}

/// `|D_h phi|` at `x`, the pointwise upper gradient of a map between
/// Carnot groups.
pub fn horizontal_norm<T: Real>(phi: &dyn GroupMap<T>, x: &Point<T>, h: T) -> f64 {
    to_f64(horizontal_differential(phi, x, h, None).norm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maps::{Constant, Dilation, Identity};
    use approx::assert_relative_eq;

    fn h1() -> Group<f64> {
        Group::heisenberg(1)
    }

    fn small() -> PhiOptions {
        PhiOptions { budget: 24, samples: 2000, screen: 256, top: 4, seed: 3 }
    }

    #[test]
    fn empty_set_has_zero_phi() {
        let g = h1();
        let id = Identity { group: g.clone() };
        let nodes = NodeSet::ball(&g, &g.identity(), 1.0, 500, 1);
        let e = phi_estimate(&id, &OpenSetSpec::Empty, 1.0, &nodes, 1e-4, &small(), None);
        assert_eq!(e.value, 0.0);
        assert!(e.warning.is_some());
    }

    #[test]
    fn identity_phi_of_whole_space_is_measure() {
        let g = h1();
        let id = Identity { group: g.clone() };
        let nodes = NodeSet::ball(&g, &g.identity(), 1.0, 2000, 1);
        let e = phi_estimate(&id, &OpenSetSpec::Whole, 1.0, &nodes, 1e-4, &small(), None);
        assert!(e.value >= 1.0 - 1e-9, "{}", e.value);
    }

    #[test]
    fn set_derivative_of_measure_and_pullback() {
        let g = h1();
        let x = Point::from([0.1, 0.0, 0.2]);
        let m = set_derivative(&g, |_, r: f64| r.powi(4), &x, &[0.2, 0.1, 0.05]);
        assert_relative_eq!(m.extrapolated, 1.0, epsilon = 1e-12);
        let pull = set_derivative(&g, |_, r: f64| (2.0 * r).powi(4), &x, &[0.2, 0.1]);
        assert_relative_eq!(pull.smallest, 16.0, epsilon = 1e-12);
    }

    #[test]
    fn set_derivative_of_density() {
        let g = h1();
        let f = integral_set_function(&g, |p: &Point<f64>| p.coords()[0].powi(2), 20000, 4);
        let d = set_derivative(&g, f, &Point::from([1.0, 0.0, 0.0]), &[0.1, 0.05]);
        assert!((d.smallest - 1.0).abs() < 0.05, "{d:?}");
    }

    #[test]
    fn upper_gradients() {
        let g = h1();
        let funcs = functional_family(&g, 16);
        let x = Point::from([0.2, -0.1, 0.3]);
        let id = upper_gradient_estimate(&Identity { group: g.clone() }, &x, &funcs, 1e-4);
        assert_relative_eq!(id.value, 1.0, epsilon = 1e-8);
        let d = upper_gradient_estimate(&Dilation { group: g.clone(), lambda: 3.0 }, &x, &funcs, 1e-4);
        assert_relative_eq!(d.value, 3.0, epsilon = 1e-7);
        assert!(d.lower <= 3.0 + 1e-6 && d.upper >= 3.0 - 1e-6);
        let c = Constant { source: g.clone(), target: g.clone(), value: g.identity() };
        assert_eq!(upper_gradient_estimate(&c, &x, &funcs, 1e-4).value, 0.0);
    }

    #[test]
    fn candidates_keep_forced_members() {
        assert_eq!(candidates(&[0.1, 0.5, 0.3, 0.0], 2, 1), vec![1, 2, 3]);
    }
}
