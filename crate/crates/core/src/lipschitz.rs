//! Lipschitz test functions on metric targets.
//!
//! A [`LipTestFunction`] is an expression tree over 1-Lipschitz leaves
//! (distances, horizontal coordinates, interior depths) combined with
//! operations that do not increase the Lipschitz constant: scaling by
//! `|c| <= 1`, minima, maxima, the fold `sym_M`, shifts of positive parts,
//! and sums of functions with well separated supports.
//!
//! Gradients of `u o phi` are computed on a [`Stencil`] of images of `phi`:
//! leaves are differenced with a Richardson pair, inner nodes apply the
//! chain rule with branches chosen by the value at the stencil center.

use std::fmt;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::Serialize;
use serde_json::json;
use smallvec::smallvec;
use thiserror::Error;

use crate::field::Gradient;
use crate::group::{Group, Point};
use crate::maps::GroupMap;
use crate::mc;
use crate::metric::ball_cover_sample;
use crate::scalar::{lit, to_f64, Real};

/// Relative slack allowed by the pairwise validator.
pub const VALIDATION_SLACK: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LipschitzError {
    #[error("distance matrix is not square")]
    NotSquare,
    #[error("d({i},{j}) = {value} is negative or not finite")]
    Negative { i: usize, j: usize, value: f64 },
    #[error("d({i},{i}) = {value} is not zero")]
    Diagonal { i: usize, value: f64 },
    #[error("d({i},{j}) != d({j},{i})")]
    NotSymmetric { i: usize, j: usize },
    #[error("triangle inequality fails for ({i}, {j}, {k})")]
    Triangle { i: usize, j: usize, k: usize },
    #[error("values violate the Lipschitz bound on pair ({i}, {j}): |f_i - f_j| = {gap:e} > L d = {bound:e}")]
    PairViolation { i: usize, j: usize, gap: f64, bound: f64 },
    #[error("a bump needs a set with nonempty exterior; use unconstrained test functions on the whole space")]
    WholeSpace,
    #[error("parameter `{0}` must be positive")]
    NonPositive(&'static str),
    #[error("no bound on sup |u| is known over the given set")]
    Unbounded,
    #[error("sup |u| <= {sup:e} exceeds the admissible bound {bound:e}")]
    BoundTooLarge { sup: f64, bound: f64 },
    #[error("summands need support metadata")]
    NoSupport,
    #[error("value lists differ in length: {0} points, {1} values")]
    Length(usize, usize),
}

/// A metric space `(Y, d)`.
pub trait MetricTarget<T: Real>: Clone + Send + Sync + 'static {
    type Point: Clone + fmt::Debug + Send + Sync + 'static;
    fn distance(&self, a: &Self::Point, b: &Self::Point) -> T;
}

impl<T: Real> MetricTarget<T> for Group<T> {
    type Point = Point<T>;
    fn distance(&self, a: &Point<T>, b: &Point<T>) -> T {
        Group::distance(self, a, b)
    }
}

/// A finite metric space given by its distance matrix; points are indices.
#[derive(Clone, Debug)]
pub struct FiniteMetric<T> {
    d: Arc<Vec<Vec<T>>>,
}

impl<T: Real> FiniteMetric<T> {
    /// Checks the metric axioms exhaustively, triangle inequality included.
    pub fn new(d: Vec<Vec<T>>) -> Result<Self, LipschitzError> {
        let n = d.len();
        if d.iter().any(|r| r.len() != n) {
            return Err(LipschitzError::NotSquare);
        }
        let scale = d.iter().flatten().fold(T::zero(), |m, &v| m.max(v.abs()));
        let tol = scale * lit(1e-12);
        for i in 0..n {
            if d[i][i] != T::zero() {
                return Err(LipschitzError::Diagonal { i, value: to_f64(d[i][i]) });
            }
            for j in 0..n {
                if !(d[i][j] >= T::zero()) || !d[i][j].is_finite() {
                    return Err(LipschitzError::Negative { i, j, value: to_f64(d[i][j]) });
                }
                if d[i][j] != d[j][i] {
                    return Err(LipschitzError::NotSymmetric { i, j });
                }
            }
        }
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    if d[i][k] > d[i][j] + d[j][k] + tol {
                        return Err(LipschitzError::Triangle { i, j, k });
                    }
                }
            }
        }
        Ok(Self { d: Arc::new(d) })
    }

    pub fn len(&self) -> usize {
        self.d.len()
    }

    pub fn is_empty(&self) -> bool {
        self.d.is_empty()
    }
}

impl<T: Real> MetricTarget<T> for FiniteMetric<T> {
    type Point = usize;
    fn distance(&self, a: &usize, b: &usize) -> T {
        self.d[*a][*b]
    }
}

/// An open subset `V` of a metric target.
#[derive(Clone, Debug)]
pub enum OpenSetSpec<P, T> {
    Empty,
    Whole,
    Ball { center: P, radius: T },
    Union(Vec<(P, T)>),
}

impl<P: Clone, T: Real> OpenSetSpec<P, T> {
    /// Balls with positive radius; empty for `Empty` and `Whole`.
    pub fn balls(&self) -> Vec<(P, T)> {
        let all = match self {
            OpenSetSpec::Empty | OpenSetSpec::Whole => vec![],
            OpenSetSpec::Ball { center, radius } => vec![(center.clone(), *radius)],
            OpenSetSpec::Union(b) => b.clone(),
        };
        all.into_iter().filter(|(_, r)| *r > T::zero()).collect()
    }

    pub fn is_whole(&self) -> bool {
        matches!(self, OpenSetSpec::Whole)
    }

    pub fn is_empty(&self) -> bool {
        !self.is_whole() && self.balls().is_empty()
    }

    /// Largest radius among the balls.
    pub fn max_radius(&self) -> T {
        self.balls().iter().fold(T::zero(), |m, b| m.max(b.1))
    }

    /// `max_i (r_i - d(y, c_i))^+`, a 1-Lipschitz lower bound of
    /// `dist(y, Y \ V)` that is exact for balls in geodesic spaces and
    /// vanishes off `V`. `None` for the whole space, where the distance to
    /// the empty exterior is infinite.
    pub fn interior_depth<Y: MetricTarget<T, Point = P>>(&self, y: &Y, p: &P) -> Option<T> {
        if self.is_whole() {
            return None;
        }
        Some(self.balls().iter().fold(T::zero(), |m, (c, r)| m.max(*r - y.distance(p, c))))
    }

    pub fn contains<Y: MetricTarget<T, Point = P>>(&self, y: &Y, p: &P) -> bool {
        self.interior_depth(y, p).is_none_or(|d| d > T::zero())
    }
}

/// `K_delta = { y : dist(y, Y \ V) > delta }`, with balls shrunk by `delta`.
pub fn inner_set<P: Clone, T: Real>(v: &OpenSetSpec<P, T>, delta: T) -> OpenSetSpec<P, T> {
    match v {
        OpenSetSpec::Whole => OpenSetSpec::Whole,
        OpenSetSpec::Empty => OpenSetSpec::Empty,
        _ => {
            let balls: Vec<(P, T)> =
                v.balls().into_iter().map(|(c, r)| (c, r - delta)).filter(|(_, r)| *r > T::zero()).collect();
            match balls.len() {
                0 => OpenSetSpec::Empty,
                1 => {
                    let (center, radius) = balls.into_iter().next().unwrap();
                    OpenSetSpec::Ball { center, radius }
                }
                _ => OpenSetSpec::Union(balls),
            }
        }
    }
}

/// Images of `phi` needed for a horizontal gradient at `x`: the center and,
/// per direction, the flows by `+h, -h, +h/2, -h/2`.
#[derive(Clone, Debug)]
pub struct Stencil<P, T> {
    pub center: P,
    pub arms: Vec<[P; 4]>,
    pub h: T,
}

/// Stencil of `phi` at `x`.
pub fn map_stencil<T: Real>(phi: &dyn GroupMap<T>, x: &Point<T>, h: T) -> Stencil<Point<T>, T> {
    let g = phi.source();
    let half = h / lit(2.0);
    let arms = (0..g.horizontal_dim())
        .map(|i| [h, -h, half, -half].map(|s| phi.eval(&g.flow(i, s, x))))
        .collect();
    Stencil { center: phi.eval(x), arms, h }
}

/// Stencil of the identity of `g` at `x`.
pub fn identity_stencil<T: Real>(g: &Group<T>, x: &Point<T>, h: T) -> Stencil<Point<T>, T> {
    let half = h / lit(2.0);
    let arms = (0..g.horizontal_dim()).map(|i| [h, -h, half, -half].map(|s| g.flow(i, s, x))).collect();
    Stencil { center: x.clone(), arms, h }
}

pub type LeafFn<T, P> = Arc<dyn Fn(&P) -> T + Send + Sync>;
pub type OutsideFn<P> = Arc<dyn Fn(&P) -> bool + Send + Sync>;

/// Construction tree of a Lipschitz function.
#[derive(Clone)]
pub enum LipExpr<T, P> {
    Const(T),
    Leaf(LeafFn<T, P>),
    Scale(T, Box<LipExpr<T, P>>),
    Sum(Vec<LipExpr<T, P>>),
    Max(Vec<LipExpr<T, P>>),
    Min(Vec<LipExpr<T, P>>),
    /// `sym_M(t) = |M - |t - M/2|| - M/2`.
    Sym(T, Box<LipExpr<T, P>>),
    /// `max(t - eps, 0)`.
    ShiftPos(T, Box<LipExpr<T, P>>),
    /// Zero wherever the predicate holds; used for support pruning.
    Supported(OutsideFn<P>, Box<LipExpr<T, P>>),
}

/// `sym_M(t) = |M - |t - M/2|| - M/2`.
pub fn sym<T: Real>(m: T, t: T) -> T {
    let half = m / lit(2.0);
    (m - (t - half).abs()).abs() - half
}

/// The piecewise form of `sym_M`: `-t - M` below `-M/2`, `t` in the middle,
/// `M - t` above `M/2`.
pub fn sym_piecewise<T: Real>(m: T, t: T) -> T {
    let half = m / lit(2.0);
    if t < -half {
        -t - m
    } else if t <= half {
        t
    } else {
        m - t
    }
}

/// Slope of `sym_M` at `t`, always `+1` or `-1`.
fn sym_slope<T: Real>(m: T, t: T) -> T {
    let a = t - m / lit(2.0);
    let b = m - a.abs();
    let sa = if a > T::zero() { -T::one() } else { T::one() };
    let sb = if b < T::zero() { -T::one() } else { T::one() };
    sa * sb
}

impl<T: Real, P> LipExpr<T, P> {
    pub fn eval(&self, p: &P) -> T {
        match self {
            LipExpr::Const(c) => *c,
            LipExpr::Leaf(f) => f(p),
            LipExpr::Scale(c, u) => *c * u.eval(p),
            LipExpr::Sum(us) => us.iter().fold(T::zero(), |s, u| s + u.eval(p)),
            LipExpr::Max(us) => us.iter().map(|u| u.eval(p)).fold(T::neg_infinity(), T::max),
            LipExpr::Min(us) => us.iter().map(|u| u.eval(p)).fold(T::infinity(), T::min),
            LipExpr::Sym(m, u) => sym(*m, u.eval(p)),
            LipExpr::ShiftPos(e, u) => (u.eval(p) - *e).max(T::zero()),
            LipExpr::Supported(out, u) => {
                if out(p) {
                    T::zero()
                } else {
                    u.eval(p)
                }
            }
        }
    }

    /// Value and horizontal gradient on a stencil.
    pub fn jet(&self, st: &Stencil<P, T>) -> (T, Gradient<T>) {
        let n = st.arms.len();
        match self {
            LipExpr::Const(c) => (*c, smallvec![T::zero(); n]),
            LipExpr::Leaf(f) => {
                let v = f(&st.center);
                let (h, three, four) = (st.h, lit::<T>(3.0), lit::<T>(4.0));
                let g = st
                    .arms
                    .iter()
                    .map(|a| {
                        let coarse = (f(&a[0]) - f(&a[1])) / (h + h);
                        let fine = (f(&a[2]) - f(&a[3])) / h;
                        (four * fine - coarse) / three
                    })
                    .collect();
                (v, g)
            }
            LipExpr::Scale(c, u) => {
                let (v, g) = u.jet(st);
                (*c * v, g.iter().map(|&x| *c * x).collect())
            }
            LipExpr::Sum(us) => {
                let mut v = T::zero();
                let mut g: Gradient<T> = smallvec![T::zero(); n];
                for u in us {
                    let (a, b) = u.jet(st);
                    v = v + a;
                    for (x, y) in g.iter_mut().zip(&b) {
                        *x = *x + *y;
                    }
                }
                (v, g)
            }
            LipExpr::Max(us) | LipExpr::Min(us) => {
                let is_max = matches!(self, LipExpr::Max(_));
                let mut best = 0;
                let mut bv = us[0].eval(&st.center);
                for (i, u) in us.iter().enumerate().skip(1) {
                    let v = u.eval(&st.center);
                    if (is_max && v > bv) || (!is_max && v < bv) {
                        best = i;
                        bv = v;
                    }
                }
                us[best].jet(st)
            }
            LipExpr::Sym(m, u) => {
                let (v, g) = u.jet(st);
                let s = sym_slope(*m, v);
                (sym(*m, v), g.iter().map(|&x| s * x).collect())
            }
            LipExpr::ShiftPos(e, u) => {
                let (v, g) = u.jet(st);
                if v - *e > T::zero() {
                    (v - *e, g)
                } else {
                    (T::zero(), smallvec![T::zero(); n])
                }
            }
            LipExpr::Supported(out, u) => {
                if out(&st.center) {
                    (T::zero(), smallvec![T::zero(); n])
                } else {
                    u.jet(st)
                }
            }
        }
    }
}

/// How a test function was built.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Provenance {
    pub kind: String,
    pub params: serde_json::Value,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub children: Vec<Provenance>,
}

impl Provenance {
    pub fn leaf(kind: &str, params: serde_json::Value) -> Self {
        Self { kind: kind.into(), params, children: vec![] }
    }

    pub fn node(kind: &str, params: serde_json::Value, children: Vec<Provenance>) -> Self {
        Self { kind: kind.into(), params, children }
    }
}

/// Support metadata: `spt u` lies in the union of the closed balls, at
/// distance at least `separation` from the exterior of the open set the
/// function was built for.
#[derive(Clone, Debug)]
pub struct SupportInfo<P, T> {
    pub separation: T,
    pub balls: Vec<(P, T)>,
}

/// A Lipschitz function with a certified bound.
#[derive(Clone)]
pub struct LipTestFunction<T, P> {
    pub expr: LipExpr<T, P>,
    pub lip: T,
    /// Certified `sup |u|` over the whole target, when known.
    pub sup_bound: Option<T>,
    pub support: Option<SupportInfo<P, T>>,
    pub provenance: Provenance,
}

impl<T: fmt::Debug, P: fmt::Debug> fmt::Debug for LipTestFunction<T, P> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LipTestFunction")
            .field("kind", &self.provenance.kind)
            .field("lip", &self.lip)
            .field("sup_bound", &self.sup_bound)
            .field("support", &self.support)
            .finish()
    }
}

impl<T: Real, P> LipTestFunction<T, P> {
    pub fn eval(&self, p: &P) -> T {
        self.expr.eval(p)
    }

    pub fn jet(&self, st: &Stencil<P, T>) -> (T, Gradient<T>) {
        self.expr.jet(st)
    }

    pub fn name(&self) -> String {
        self.provenance.kind.clone()
    }

    /// JSON description for reports.
    pub fn describe(&self) -> serde_json::Value {
        json!({
            "provenance": self.provenance,
            "lip": to_f64(self.lip),
            "sup_bound": self.sup_bound.map(to_f64),
            "separation": self.support.as_ref().map(|s| to_f64(s.separation)),
        })
    }
}

fn pruned<T: Real, Y: MetricTarget<T>>(
    y: &Y,
    balls: &[(Y::Point, T)],
    inner: LipExpr<T, Y::Point>,
) -> LipExpr<T, Y::Point> {
    let y = y.clone();
    let balls = balls.to_vec();
    let margin: T = lit(1e-9);
    let outside: OutsideFn<Y::Point> = Arc::new(move |p| {
        balls.iter().all(|(c, r)| y.distance(p, c) > *r * (T::one() + margin) + lit(1e-12))
    });
    LipExpr::Supported(outside, Box::new(inner))
}

/// `u(y) = d(y, z)`.
pub fn distance_function<T: Real, Y: MetricTarget<T>>(y: &Y, z: Y::Point) -> LipTestFunction<T, Y::Point> {
    let t = y.clone();
    let zc = z.clone();
    LipTestFunction {
        expr: LipExpr::Leaf(Arc::new(move |p| t.distance(p, &zc))),
        lip: T::one(),
        sup_bound: None,
        support: None,
        provenance: Provenance::leaf("distance", json!({ "to": format!("{z:?}") })),
    }
}

/// `u(y) = <theta, y_h> / |theta|` on the horizontal coordinates `y_h`.
///
/// The horizontal projection of a Carnot group onto its first layer is a
/// 1-Lipschitz homomorphism, so these are 1-Lipschitz.
pub fn horizontal_functional<T: Real>(g: &Group<T>, theta: &[T]) -> LipTestFunction<T, Point<T>> {
    let norm = theta.iter().map(|&v| v * v).sum::<T>().sqrt();
    let th: Vec<T> = theta.iter().map(|&v| v / norm).collect();
    let n = g.horizontal_dim();
    let axis = th.iter().position(|&v| v == T::one()).filter(|_| th.iter().filter(|&&v| v != T::zero()).count() == 1);
    let thc = th.clone();
    let kind = match axis {
        Some(k) => Provenance::leaf("coordinate", json!({ "index": k })),
        None => Provenance::leaf("horizontal-functional", json!({ "theta": th.iter().map(|&v| to_f64(v)).collect::<Vec<_>>() })),
    };
    LipTestFunction {
        expr: LipExpr::Leaf(Arc::new(move |p: &Point<T>| {
            p.coords()[..n].iter().zip(&thc).fold(T::zero(), |s, (&a, &b)| s + a * b)
        })),
        lip: T::one(),
        sup_bound: None,
        support: None,
        provenance: kind,
    }
}

/// The `k`-th horizontal coordinate.
pub fn coordinate_function<T: Real>(g: &Group<T>, k: usize) -> LipTestFunction<T, Point<T>> {
    let mut th = vec![T::zero(); g.horizontal_dim()];
    th[k] = T::one();
    horizontal_functional(g, &th)
}

/// `u - c`.
pub fn shifted<T: Real, P: Clone>(u: &LipTestFunction<T, P>, c: T) -> LipTestFunction<T, P> {
    LipTestFunction {
        expr: LipExpr::Sum(vec![u.expr.clone(), LipExpr::Const(-c)]),
        lip: u.lip,
        sup_bound: None,
        support: None,
        provenance: Provenance::node("shift", json!({ "by": to_f64(c) }), vec![u.provenance.clone()]),
    }
}

fn depth_leaf<T: Real, Y: MetricTarget<T>>(y: &Y, v: &OpenSetSpec<Y::Point, T>) -> LipExpr<T, Y::Point> {
    let t = y.clone();
    let balls = v.balls();
    LipExpr::Leaf(Arc::new(move |p| balls.iter().fold(T::zero(), |m, (c, r)| m.max(*r - t.distance(p, c)))))
}

fn shrunk<P: Clone, T: Real>(v: &OpenSetSpec<P, T>, by: T) -> Vec<(P, T)> {
    v.balls().into_iter().map(|(c, r)| (c, (r - by).max(T::zero()))).collect()
}

/// `u^eps_W(y) = max(dist(y, Y \ W) - eps, 0)`, with support at distance
/// at least `eps` from `Y \ W`.
pub fn shaved_bump<T: Real, Y: MetricTarget<T>>(
    y: &Y,
    w: &OpenSetSpec<Y::Point, T>,
    eps: T,
) -> Result<LipTestFunction<T, Y::Point>, LipschitzError> {
    if !(eps > T::zero()) {
        return Err(LipschitzError::NonPositive("eps"));
    }
    if w.is_whole() {
        return Err(LipschitzError::WholeSpace);
    }
    let balls = shrunk(w, eps);
    let inner = LipExpr::ShiftPos(eps, Box::new(depth_leaf(y, w)));
    Ok(LipTestFunction {
        expr: pruned(y, &balls, inner),
        lip: T::one(),
        sup_bound: Some((w.max_radius() - eps).max(T::zero())),
        support: Some(SupportInfo { separation: eps, balls }),
        provenance: Provenance::leaf("shaved-bump", json!({ "eps": to_f64(eps), "balls": w.balls().len() })),
    })
}

/// `sym_M o u`; needs the certified `sup |u| <= M`.
pub fn symmetrize<T: Real, P: Clone>(u: &LipTestFunction<T, P>, m: T) -> Result<LipTestFunction<T, P>, LipschitzError> {
    let sup = u.sup_bound.ok_or(LipschitzError::Unbounded)?;
    if sup > m {
        return Err(LipschitzError::BoundTooLarge { sup: to_f64(sup), bound: to_f64(m) });
    }
    Ok(sym_unchecked(u, m, Some(m / lit(2.0))))
}

fn sym_unchecked<T: Real, P: Clone>(u: &LipTestFunction<T, P>, m: T, bound: Option<T>) -> LipTestFunction<T, P> {
    LipTestFunction {
        expr: LipExpr::Sym(m, Box::new(u.expr.clone())),
        lip: u.lip,
        sup_bound: bound,
        support: u.support.clone(),
        provenance: Provenance::node("sym", json!({ "M": to_f64(m) }), vec![u.provenance.clone()]),
    }
}

/// Result of [`refine`].
#[derive(Clone, Debug)]
pub struct Refined<T, P> {
    pub function: LipTestFunction<T, P>,
    pub iterations: u32,
    /// Bound on `sup_V |u|` after refinement.
    pub bound: T,
}

/// Iterates `sym` with halving levels until `sup_V |u| <= delta`, using
/// `ceil(log2(M / delta))` folds. `M` is the certified global bound when
/// known, else `max_i |u(c_i)| + L r_i` over the balls of `V`.
pub fn refine<T: Real, Y: MetricTarget<T>>(
    y: &Y,
    u: &LipTestFunction<T, Y::Point>,
    v: &OpenSetSpec<Y::Point, T>,
    delta: T,
) -> Result<Refined<T, Y::Point>, LipschitzError> {
    if !(delta > T::zero()) {
        return Err(LipschitzError::NonPositive("delta"));
    }
    let (m, global) = match u.sup_bound {
        Some(s) => (s, true),
        None => {
            if v.is_whole() {
                return Err(LipschitzError::Unbounded);
            }
            let _ = y;
            let m = v.balls().iter().fold(T::zero(), |acc, (c, r)| acc.max(u.eval(c).abs() + u.lip * *r));
            (m, false)
        }
    };
    let mut iterations = 0u32;
    let mut level = m;
    let mut f = u.clone();
    while level > delta {
        f = sym_unchecked(&f, level, None);
        level = level / lit(2.0);
        iterations += 1;
    }
    f.sup_bound = if global { Some(level) } else { None };
    if iterations > 0 {
        f.provenance = Provenance::node(
            "refine",
            json!({ "delta": to_f64(delta), "iterations": iterations }),
            vec![u.provenance.clone()],
        );
    }
    Ok(Refined { function: f, iterations, bound: level })
}

/// `clamp(u, -w, w)` with `w = (dist(y, Y \ V) - delta)^+`: equal to `u` on
/// `K_{2 delta}` when `|u| <= delta` on `V`, zero off `K_delta`, and
/// 1-Lipschitz whenever `u` is, as a min/max of 1-Lipschitz functions.
///
/// `bound_on_v` is a known bound for `|u|` on `V`.
pub fn annulus_cutoff<T: Real, Y: MetricTarget<T>>(
    y: &Y,
    u: &LipTestFunction<T, Y::Point>,
    v: &OpenSetSpec<Y::Point, T>,
    delta: T,
    bound_on_v: Option<T>,
) -> Result<LipTestFunction<T, Y::Point>, LipschitzError> {
    if !(delta > T::zero()) {
        return Err(LipschitzError::NonPositive("delta"));
    }
    if v.is_whole() {
        return Err(LipschitzError::WholeSpace);
    }
    if u.lip > T::one() {
        return Err(LipschitzError::BoundTooLarge { sup: to_f64(u.lip), bound: 1.0 });
    }
    let w = LipExpr::ShiftPos(delta, Box::new(depth_leaf(y, v)));
    let clamp = LipExpr::Max(vec![
        LipExpr::Scale(-T::one(), Box::new(w.clone())),
        LipExpr::Min(vec![u.expr.clone(), w]),
    ]);
    let balls = shrunk(v, delta);
    let cap = (v.max_radius() - delta).max(T::zero());
    Ok(LipTestFunction {
        expr: pruned(y, &balls, clamp),
        lip: T::one(),
        sup_bound: Some(bound_on_v.map_or(cap, |b| b.min(cap))),
        support: Some(SupportInfo { separation: delta, balls }),
        provenance: Provenance::node("annulus-cutoff", json!({ "delta": to_f64(delta) }), vec![u.provenance.clone()]),
    })
}

/// [`refine`] to `delta` followed by [`annulus_cutoff`] at `delta`.
pub fn refine_and_cut<T: Real, Y: MetricTarget<T>>(
    y: &Y,
    u: &LipTestFunction<T, Y::Point>,
    v: &OpenSetSpec<Y::Point, T>,
    delta: T,
) -> Result<LipTestFunction<T, Y::Point>, LipschitzError> {
    let r = refine(y, u, v, delta)?;
    annulus_cutoff(y, &r.function, v, delta, Some(r.bound))
}

/// `cut_M u = max(-M, min(u, M))`.
pub fn cut<T: Real, P: Clone>(u: &LipTestFunction<T, P>, m: T) -> LipTestFunction<T, P> {
    LipTestFunction {
        expr: LipExpr::Max(vec![LipExpr::Const(-m), LipExpr::Min(vec![u.expr.clone(), LipExpr::Const(m)])]),
        lip: u.lip,
        sup_bound: Some(u.sup_bound.map_or(m, |s| s.min(m))),
        support: u.support.clone(),
        provenance: Provenance::node("cut", json!({ "M": to_f64(m) }), vec![u.provenance.clone()]),
    }
}

/// McShane extension `f~(y) = min_i (f_i + L d(y, s_i))`.
pub fn mcshane_extend<T: Real, Y: MetricTarget<T>>(
    y: &Y,
    points: &[Y::Point],
    values: &[T],
    l: T,
) -> Result<LipTestFunction<T, Y::Point>, LipschitzError> {
    if points.len() != values.len() {
        return Err(LipschitzError::Length(points.len(), values.len()));
    }
    if !(l > T::zero()) {
        return Err(LipschitzError::NonPositive("L"));
    }
    for i in 0..points.len() {
        for j in 0..points.len() {
            let d = y.distance(&points[j], &points[i]);
            let gap = values[i] - values[j];
            if gap > l * d * (T::one() + lit(1e-12)) {
                return Err(LipschitzError::PairViolation { i, j, gap: to_f64(gap), bound: to_f64(l * d) });
            }
        }
    }
    let terms = points
        .iter()
        .zip(values)
        .map(|(s, &f)| {
            let t = y.clone();
            let s = s.clone();
            LipExpr::Sum(vec![LipExpr::Const(f), LipExpr::Scale(l, Box::new(LipExpr::Leaf(Arc::new(move |p| t.distance(p, &s)))))])
        })
        .collect();
    Ok(LipTestFunction {
        expr: LipExpr::Min(terms),
        lip: l,
        sup_bound: None,
        support: None,
        provenance: Provenance::leaf("mcshane", json!({ "points": points.len(), "L": to_f64(l) })),
    })
}

/// Certified lower bound of the distance between the supports.
pub fn support_gap<T: Real, Y: MetricTarget<T>>(y: &Y, a: &SupportInfo<Y::Point, T>, b: &SupportInfo<Y::Point, T>) -> T {
    let mut gap = T::infinity();
    for (c1, r1) in &a.balls {
        for (c2, r2) in &b.balls {
            gap = gap.min(y.distance(c1, c2) - *r1 - *r2);
        }
    }
    gap
}

/// `u_1 + u_2` for supports at distance `r` with `|u_i| <= r/2`.
pub fn disjoint_sum<T: Real, Y: MetricTarget<T>>(
    y: &Y,
    u1: &LipTestFunction<T, Y::Point>,
    u2: &LipTestFunction<T, Y::Point>,
) -> Result<LipTestFunction<T, Y::Point>, LipschitzError> {
    let (s1, s2) = match (&u1.support, &u2.support) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(LipschitzError::NoSupport),
    };
    let r = support_gap(y, s1, s2);
    if !(r > T::zero()) {
        return Err(LipschitzError::NonPositive("support gap"));
    }
    let half = r / lit(2.0);
    for u in [u1, u2] {
        let sup = u.sup_bound.ok_or(LipschitzError::Unbounded)?;
        if sup > half {
            return Err(LipschitzError::BoundTooLarge { sup: to_f64(sup), bound: to_f64(half) });
        }
        if u.lip > T::one() {
            return Err(LipschitzError::BoundTooLarge { sup: to_f64(u.lip), bound: 1.0 });
        }
    }
    let mut balls = s1.balls.clone();
    balls.extend(s2.balls.iter().cloned());
    Ok(LipTestFunction {
        expr: LipExpr::Sum(vec![u1.expr.clone(), u2.expr.clone()]),
        lip: T::one(),
        sup_bound: Some(u1.sup_bound.unwrap().max(u2.sup_bound.unwrap())),
        support: Some(SupportInfo { separation: s1.separation.min(s2.separation), balls }),
        provenance: Provenance::node(
            "disjoint-sum",
            json!({ "gap": to_f64(r) }),
            vec![u1.provenance.clone(), u2.provenance.clone()],
        ),
    })
}

/// [`disjoint_sum`] after refining both summands to `sup <= r/2`.
///
/// Refinement keeps zeros and changes gradients only by sign, so the
/// gradient magnitudes of the sum equal those of the original summands.
pub fn disjoint_sum_refined<T: Real, Y: MetricTarget<T>>(
    y: &Y,
    u1: &LipTestFunction<T, Y::Point>,
    u2: &LipTestFunction<T, Y::Point>,
) -> Result<LipTestFunction<T, Y::Point>, LipschitzError> {
    let (s1, s2) = match (&u1.support, &u2.support) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(LipschitzError::NoSupport),
    };
    let half = support_gap(y, s1, s2) / lit(2.0);
    if !(half > T::zero()) {
        return Err(LipschitzError::NonPositive("support gap"));
    }
    let a = refine(y, u1, &OpenSetSpec::Empty, half)?.function;
    let b = refine(y, u2, &OpenSetSpec::Empty, half)?.function;
    disjoint_sum(y, &a, &b)
}

/// Outcome of the pairwise validator.
#[derive(Clone, Debug, Serialize)]
pub struct Validation {
    pub pairs: usize,
    pub max_quotient: f64,
    pub violations: usize,
    /// Worst excess `|u(a) - u(b)| - L d(a, b)` in units of `L d`.
    pub worst_excess: f64,
}

impl Validation {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

/// Checks `|u(a) - u(b)| <= L d(a, b) (1 + 1e-9)` on every pair.
pub fn validate_lipschitz<T: Real, Y: MetricTarget<T>>(
    y: &Y,
    u: &LipTestFunction<T, Y::Point>,
    pairs: &[(Y::Point, Y::Point)],
) -> Validation {
    let slack: T = lit(VALIDATION_SLACK);
    let mut out = Validation { pairs: pairs.len(), max_quotient: 0.0, violations: 0, worst_excess: 0.0 };
    for (a, b) in pairs {
        let d = y.distance(a, b);
        let gap = (u.eval(a) - u.eval(b)).abs();
        if d > T::zero() {
            out.max_quotient = out.max_quotient.max(to_f64(gap / d));
        }
        let bound = u.lip * d;
        if gap > bound * (T::one() + slack) {
            out.violations += 1;
            let rel = if bound > T::zero() { to_f64((gap - bound) / bound) } else { f64::INFINITY };
            out.worst_excess = out.worst_excess.max(rel);
        }
    }
    out
}

/// Validation pairs in `B(center, r)` of a group: half independent uniform
/// pairs, half close pairs `(a, a exp(v))` with `|v|` from `1e-3 r` to `0.1 r`.
pub fn validation_pairs<T: Real>(g: &Group<T>, center: &Point<T>, r: T, count: usize, seed: u64) -> Vec<(Point<T>, Point<T>)> {
    let pts = g.ball(center.clone(), r).sample(count + count / 2 + 1, seed);
    let mut out = Vec::with_capacity(count);
    let far = count / 2;
    for i in 0..far {
        out.push((pts[2 * i].clone(), pts[2 * i + 1].clone()));
    }
    let close = count - far;
    let offsets = mc::generate(close, seed ^ 0x5eed, |rng| {
        let scale = 10f64.powf(rng.gen_range(-3.0..-1.0));
        let v: Vec<f64> = (0..g.dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        (scale, v)
    });
    for (k, (scale, v)) in offsets.into_iter().enumerate() {
        let a = pts[(2 * far + k) % pts.len()].clone();
        let v = Point::new(v.into_iter().map(lit::<T>));
        let n = g.box_norm(&v).max(lit(1e-300));
        let step = g.dilate(r * lit::<T>(scale) / n, &v);
        let b = g.multiply(&a, &step);
        out.push((a, b));
    }
    out
}

/// Options of [`family_generate`].
#[derive(Clone, Debug)]
pub struct FamilyOptions<T> {
    pub budget: usize,
    pub seed: u64,
    /// Largest farthest-point net.
    pub net_size: usize,
    /// Number of horizontal directions, coordinate axes included.
    pub directions: usize,
    /// Points per McShane extension.
    pub mcshane_points: usize,
    /// Region for nets and composites when `V` is the whole space.
    pub hint: Option<(Point<T>, T)>,
}

impl<T: Real> FamilyOptions<T> {
    pub fn new(budget: usize, seed: u64) -> Self {
        Self { budget, seed, net_size: 64, directions: 16, mcshane_points: 8, hint: None }
    }

    pub fn with_hint(mut self, center: Point<T>, radius: T) -> Self {
        self.hint = Some((center, radius));
        self
    }
}

/// McShane members of families for proper subsets; they are costly to
/// evaluate and rarely the best witness.
pub const MAX_MCSHANE_CUTOFFS: usize = 16;

/// Default family budget.
pub const DEFAULT_BUDGET: usize = 256;

/// Refinement levels relative to the radius of `V`.
pub const CUTOFF_LEVELS: [f64; 4] = [0.005, 0.01, 0.02, 0.05];

/// Unit horizontal directions: the coordinate axes, then evenly spaced
/// angles in the `(x_1, x_2)` plane or seeded random directions.
pub fn horizontal_directions<T: Real>(n: usize, count: usize, seed: u64) -> Vec<Vec<T>> {
    let mut out: Vec<Vec<T>> = (0..n.min(count))
        .map(|k| (0..n).map(|i| if i == k { T::one() } else { T::zero() }).collect())
        .collect();
    if out.len() >= count {
        return out;
    }
    if n == 2 {
        let step = std::f64::consts::PI / count as f64;
        for k in 1..count {
            if 2 * k == count {
                continue;
            }
            let a = step * k as f64;
            out.push(vec![lit(a.cos()), lit(a.sin())]);
            if out.len() == count {
                break;
            }
        }
    } else if n > 2 {
        let extra = mc::generate(count - out.len(), seed, |rng| {
            let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            v
        });
        for v in extra {
            let len = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            out.push(v.into_iter().map(|x| lit(x / len)).collect());
        }
    }
    out
}

/// Farthest-point net of size at most `k` from samples of the balls,
/// spread with the cheap homogeneous box norm.
pub fn farthest_point_net<T: Real>(g: &Group<T>, balls: &[(Point<T>, T)], k: usize, seed: u64) -> Vec<Point<T>> {
    if balls.is_empty() || k == 0 {
        return vec![];
    }
    let per = (32 * k).div_ceil(balls.len());
    let mut cand = Vec::new();
    for (i, (c, r)) in balls.iter().enumerate() {
        cand.extend(ball_cover_sample(&g.ball(c.clone(), *r), per, seed.wrapping_add(i as u64)));
    }
    let mut net = vec![balls[0].0.clone()];
    let mut gap: Vec<T> = cand.iter().map(|p| g.box_norm(&g.between(&net[0], p))).collect();
    while net.len() < k {
        let (idx, best) = gap.iter().enumerate().fold((0, T::neg_infinity()), |b, (i, &v)| if v > b.1 { (i, v) } else { b });
        if !(best > T::zero()) {
            break;
        }
        let p = cand[idx].clone();
        for (q, d) in cand.iter().zip(gap.iter_mut()) {
            *d = d.min(g.box_norm(&g.between(&p, q)));
        }
        net.push(p);
    }
    net
}

fn mcshane_on_subsets<T: Real>(
    g: &Group<T>,
    net: &[Point<T>],
    opts: &FamilyOptions<T>,
    count: usize,
) -> Vec<LipTestFunction<T, Point<T>>> {
    let mut out = Vec::new();
    let m = opts.mcshane_points.min(net.len());
    if m < 2 {
        return out;
    }
    let mut rng = mc::chunk_rng(opts.seed ^ 0x3c5a, 0);
    for _ in 0..count {
        let mut idx: Vec<usize> = (0..net.len()).collect();
        idx.shuffle(&mut rng);
        let pts: Vec<Point<T>> = idx[..m].iter().map(|&i| net[i].clone()).collect();
        let mut dmin = T::infinity();
        for i in 0..m {
            for j in (i + 1)..m {
                dmin = dmin.min(g.distance(&pts[i], &pts[j]));
            }
        }
        let s = dmin / lit(2.0);
        let vals: Vec<T> = (0..m).map(|_| if rng.gen::<bool>() { s } else { -s }).collect();
        if let Ok(f) = mcshane_extend(g, &pts, &vals, T::one()) {
            out.push(f);
        }
    }
    out
}

/// A deterministic, prefix-stable family of certified 1-Lipschitz
/// functions. For `V = Y` it has no support constraints; otherwise every
/// member has positive separation from `Y \ V`.
pub fn family_generate<T: Real>(
    g: &Group<T>,
    v: &OpenSetSpec<Point<T>, T>,
    opts: &FamilyOptions<T>,
) -> Vec<LipTestFunction<T, Point<T>>> {
    let budget = opts.budget;
    let mut out: Vec<LipTestFunction<T, Point<T>>> = Vec::new();
    if budget == 0 || v.is_empty() {
        return out;
    }
    let n = g.horizontal_dim();
    let dirs = horizontal_directions::<T>(n, opts.directions, opts.seed);
    let full = |out: &Vec<LipTestFunction<T, Point<T>>>| out.len() >= budget;
    if v.is_whole() {
        let (c, r) = opts.hint.clone().unwrap_or((g.identity(), T::one()));
        for d in &dirs {
            out.push(horizontal_functional(g, d));
        }
        out.truncate(budget);
        if full(&out) {
            return out;
        }
        let hint = OpenSetSpec::Ball { center: c.clone(), radius: r };
        for k in 0..n {
            let u = shifted(&coordinate_function(g, k), g.layer(&c, 0)[k]);
            out.push(cut(&u, r / lit(2.0)));
            if let Ok(f) = refine(g, &u, &hint, r / lit(4.0)) {
                out.push(f.function);
            }
        }
        if full(&out) {
            out.truncate(budget);
            return out;
        }
        let net = farthest_point_net(g, &[(c.clone(), r)], opts.net_size, opts.seed);
        for z in &net {
            out.push(distance_function(g, z.clone()));
        }
        if full(&out) {
            out.truncate(budget);
            return out;
        }
        let remaining = budget.saturating_sub(out.len());
        let mcs = mcshane_on_subsets(g, &net, opts, remaining.div_ceil(2));
        out.extend(mcs);
        for z in &net {
            if full(&out) {
                break;
            }
            out.push(cut(&distance_function(g, z.clone()), r));
        }
        out.truncate(budget);
        return out;
    }
    let r = v.max_radius();
    let balls = v.balls();
    for &lvl in &CUTOFF_LEVELS {
        if let Ok(f) = shaved_bump(g, v, r * lit(lvl)) {
            out.push(f);
        }
    }
    for d in &dirs {
        let u = horizontal_functional(g, d);
        let u = shifted(&u, u.eval(&balls[0].0));
        for &lvl in &CUTOFF_LEVELS {
            if let Ok(f) = refine_and_cut(g, &u, v, r * lit(lvl)) {
                out.push(f);
            }
        }
        if full(&out) {
            break;
        }
    }
    if full(&out) {
        out.truncate(budget);
        return out;
    }
    let net = farthest_point_net(g, &balls, opts.net_size.min(16), opts.seed);
    for z in &net {
        if let Ok(f) = refine_and_cut(g, &distance_function(g, z.clone()), v, r * lit(0.01)) {
            out.push(f);
        }
    }
    let remaining = budget.saturating_sub(out.len()).min(MAX_MCSHANE_CUTOFFS);
    for m in mcshane_on_subsets(g, &net, opts, remaining) {
        if let Ok(f) = refine_and_cut(g, &m, v, r * lit(0.01)) {
            out.push(f);
        }
    }
    out.truncate(budget);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn h1() -> Group<f64> {
        Group::heisenberg(1)
    }

    #[test]
    fn finite_metric_validation() {
        assert!(FiniteMetric::new(vec![vec![0.0, 1.0], vec![1.0, 0.0]]).is_ok());
        assert!(matches!(
            FiniteMetric::new(vec![vec![0.0, 1.0], vec![2.0, 0.0]]),
            Err(LipschitzError::NotSymmetric { .. })
        ));
        let bad = vec![vec![0.0, 1.0, 3.0], vec![1.0, 0.0, 1.0], vec![3.0, 1.0, 0.0]];
        assert!(matches!(FiniteMetric::new(bad), Err(LipschitzError::Triangle { .. })));
    }

    #[test]
    fn distance_on_axis() {
        let g = h1();
        let u = distance_function(&g, g.identity());
        assert_eq!(u.eval(&g.identity()), 0.0);
        for t in [-1.5, 0.3, 2.0] {
            assert_relative_eq!(u.eval(&Point::from([t, 0.0, 0.0])), t.abs(), epsilon = 1e-12);
        }
    }

    #[test]
    fn sym_branches() {
        assert_relative_eq!(sym(1.0, 0.75), 0.25, epsilon = 1e-15);
        assert_relative_eq!(sym(1.0, 0.3), 0.3, epsilon = 1e-15);
        assert_relative_eq!(sym(1.0, -0.75), -0.25, epsilon = 1e-15);
        for k in -100..=100 {
            let t = k as f64 / 100.0;
            assert!((sym(1.0, t) - sym_piecewise(1.0, t)).abs() <= f64::EPSILON);
        }
    }

    #[test]
    fn refine_iteration_counts() {
        let g = h1();
        let mut u = coordinate_function(&g, 0);
        u.sup_bound = Some(8.0);
        assert_eq!(refine(&g, &u, &OpenSetSpec::Whole, 1.0).unwrap().iterations, 3);
        u.sup_bound = Some(0.5);
        let r = refine(&g, &u, &OpenSetSpec::Whole, 1.0).unwrap();
        assert_eq!(r.iterations, 0);
        assert_eq!(r.function.eval(&Point::from([0.3, 0.0, 0.0])), 0.3);
    }

    #[test]
    fn shaved_bump_center_and_errors() {
        let g = h1();
        let w = OpenSetSpec::Ball { center: g.identity(), radius: 1.0 };
        let u = shaved_bump(&g, &w, 0.1).unwrap();
        assert_relative_eq!(u.eval(&g.identity()), 0.9, epsilon = 1e-12);
        assert_eq!(u.eval(&Point::from([0.95, 0.0, 0.0])), 0.0);
        assert!(matches!(shaved_bump(&g, &OpenSetSpec::Whole, 0.1), Err(LipschitzError::WholeSpace)));
    }

    #[test]
    fn inner_sets() {
        let g = h1();
        let v = OpenSetSpec::Ball { center: g.identity(), radius: 1.0 };
        match inner_set(&v, 0.25) {
            OpenSetSpec::Ball { radius, .. } => assert_eq!(radius, 0.75),
            other => panic!("{other:?}"),
        }
        assert!(inner_set(&v, 1.0).is_empty());
    }

    #[test]
    fn mcshane_single_point_and_violation() {
        let g = h1();
        let a = Point::from([0.1, 0.2, 0.0]);
        let f = mcshane_extend(&g, &[a.clone()], &[0.7], 2.0).unwrap();
        let y = Point::from([0.5, -0.1, 0.3]);
        assert_relative_eq!(f.eval(&y), 0.7 + 2.0 * g.distance(&y, &a), epsilon = 1e-14);
        let b = Point::from([0.2, 0.2, 0.0]);
        assert!(matches!(
            mcshane_extend(&g, &[a, b], &[0.0, 1.0], 1.0),
            Err(LipschitzError::PairViolation { .. })
        ));
    }

    #[test]
    fn jet_of_coordinate_and_cutoff() {
        let g = h1();
        let x = Point::from([0.2, 0.1, 0.05]);
        let st = identity_stencil(&g, &x, 1e-4);
        let (v, gr) = coordinate_function(&g, 0).jet(&st);
        assert_eq!(v, 0.2);
        assert_relative_eq!(gr[0], 1.0, epsilon = 1e-10);
        assert!(gr[1].abs() < 1e-10);
        let c = cut(&coordinate_function(&g, 0), 0.0);
        let (v, gr) = c.jet(&st);
        assert_eq!(v, 0.0);
        assert!(gr.iter().all(|&x| x == 0.0));
    }
}
