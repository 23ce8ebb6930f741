//! Horizontal calculus on scalar fields.
//!
//! Fields are construction trees. Gradients of composite nodes follow the
//! chain rules for `F(u)`, `u^+`, `u^-`, `|u|` and the cutoff `cut_M u`, so
//! only leaves are ever differentiated numerically. Numerical derivatives
//! are central differences along the flows `x exp(t X_j)` with a Richardson
//! pair `(h, h/2)`.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use crate::group::{CoordBox, Group, Point, Region};
use crate::maps::GroupMap;
use crate::mc::{self, Estimate, Moments};
use crate::metric::CcBall;
use crate::scalar::{lit, to_f64, Real};

/// Relative step used when no explicit step is given.
pub const DEFAULT_RELATIVE_STEP: f64 = 1e-4;

/// Default Monte Carlo quadrature size.
pub const DEFAULT_QUADRATURE_SAMPLES: usize = 100_000;

pub type Gradient<T> = SmallVec<[T; 8]>;

/// Monte Carlo quadrature settings.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Quadrature {
    pub samples: usize,
    pub seed: u64,
}

impl Default for Quadrature {
    fn default() -> Self {
        Self { samples: DEFAULT_QUADRATURE_SAMPLES, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub enum Shape<T> {
    Ball(CcBall<T>),
    Box(CoordBox<T>),
}

/// A bounded open set of a group with its quadrature rule.
#[derive(Clone, Debug)]
pub struct Domain<T> {
    pub group: Group<T>,
    pub shape: Shape<T>,
    pub quadrature: Quadrature,
}

impl<T: Real> Domain<T> {
    pub fn ball(group: &Group<T>, center: Point<T>, radius: T) -> Self {
        Self { group: group.clone(), shape: Shape::Ball(group.ball(center, radius)), quadrature: Quadrature::default() }
    }

    pub fn coord_box(group: &Group<T>, b: CoordBox<T>) -> Self {
        Self { group: group.clone(), shape: Shape::Box(b), quadrature: Quadrature::default() }
    }

    pub fn with_quadrature(mut self, q: Quadrature) -> Self {
        self.quadrature = q;
        self
    }

    pub fn contains(&self, x: &Point<T>) -> bool {
        match &self.shape {
            Shape::Ball(b) => b.contains_point(x),
            Shape::Box(b) => b.contains_point(x),
        }
    }

    /// Normalized Haar measure.
    pub fn measure(&self) -> T {
        match &self.shape {
            Shape::Ball(b) => b.measure(),
            Shape::Box(b) => b.volume() * self.group.measure_norm(),
        }
    }

    /// CC diameter, exact for balls and the corner-to-corner distance for boxes.
    pub fn diameter(&self) -> T {
        match &self.shape {
            Shape::Ball(b) => b.radius + b.radius,
            Shape::Box(b) => self.group.distance(&Point::new(b.lo.clone()), &Point::new(b.hi.clone())),
        }
    }

    /// Default finite-difference step.
    pub fn default_step(&self) -> T {
        self.diameter() * lit(DEFAULT_RELATIVE_STEP)
    }

    /// Haar-uniform quadrature nodes.
    pub fn samples(&self) -> Vec<Point<T>> {
        self.samples_with(self.quadrature)
    }

    pub fn samples_with(&self, q: Quadrature) -> Vec<Point<T>> {
        match &self.shape {
            Shape::Ball(b) => b.sample(q.samples, q.seed),
            Shape::Box(b) => mc::generate(q.samples, q.seed, |rng| b.sample(rng)),
        }
    }

    /// `int_Omega f` against normalized measure.
    pub fn integrate(&self, nodes: &[Point<T>], f: impl Fn(&Point<T>) -> T + Sync) -> Estimate<T> {
        let m: Moments<T> = mc::moments(nodes, f);
        m.scaled(self.measure())
    }
}

impl<T: Real> Region<T> for Domain<T> {
    fn contains(&self, x: &Point<T>) -> bool {
        Domain::contains(self, x)
    }
    fn bounding_box(&self) -> Option<CoordBox<T>> {
        match &self.shape {
            Shape::Ball(b) => b.bounding_box(),
            Shape::Box(b) => Some(b.clone()),
        }
    }
}

/// Components of the left-invariant field `X_i` at `x` in exponential
/// coordinates: `e_i + [x, e_i]/2 + [x, [x, e_i]]/12`.
pub fn left_invariant_field<T: Real>(g: &Group<T>, i: usize, x: &Point<T>) -> Gradient<T> {
    let mut e = vec![T::zero(); g.dim()];
    e[i] = T::one();
    let xe = g.bracket(x.coords(), &e);
    let xxe = g.bracket(x.coords(), &xe);
    let twelfth: T = lit(1.0 / 12.0);
    (0..g.dim()).map(|k| e[k] + xe[k] / lit(2.0) + twelfth * xxe[k]).collect()
}

type RealFn<T> = Arc<dyn Fn(T) -> T + Send + Sync>;
type PointFn<T> = Arc<dyn Fn(&Point<T>) -> T + Send + Sync>;
type PointGradFn<T> = Arc<dyn Fn(&Point<T>) -> Gradient<T> + Send + Sync>;

/// A monomial `c * prod x_k^{e_k}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Monomial<T> {
    pub coefficient: T,
    pub exponents: Vec<u32>,
}

/// Construction tree of a scalar field.
#[derive(Clone)]
pub enum FieldExpr<T> {
    Constant(T),
    /// Exponential coordinate `x_k`.
    Coordinate(usize),
    /// Polynomial in exponential coordinates.
    Polynomial(Vec<Monomial<T>>),
    /// `d_cc(x, center)`.
    DistanceTo(Point<T>),
    /// `(1 - d_cc(x, center) / radius)^+`.
    Bump { center: Point<T>, radius: T },
    /// Arbitrary rule, with an optional horizontal gradient.
    Closure { name: String, f: PointFn<T>, gradient: Option<PointGradFn<T>> },
    Scale(T, Box<FieldExpr<T>>),
    Sum(Box<FieldExpr<T>>, Box<FieldExpr<T>>),
    /// `u^+ = max(u, 0)`.
    PosPart(Box<FieldExpr<T>>),
    /// `u^- = max(-u, 0)`.
    NegPart(Box<FieldExpr<T>>),
    Abs(Box<FieldExpr<T>>),
    /// `u` where `|u| < M`, `sgn(u) M` elsewhere.
    Cutoff(T, Box<FieldExpr<T>>),
    /// `F(u)` with optional `F'`.
    Compose { name: String, f: RealFn<T>, df: Option<RealFn<T>>, inner: Box<FieldExpr<T>> },
}

impl<T: fmt::Debug> fmt::Debug for FieldExpr<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FieldExpr::Constant(c) => write!(f, "{c:?}"),
            FieldExpr::Coordinate(k) => write!(f, "x{k}"),
            FieldExpr::Polynomial(m) => write!(f, "poly({} terms)", m.len()),
            FieldExpr::DistanceTo(p) => write!(f, "d(., {p:?})"),
            FieldExpr::Bump { center, radius } => write!(f, "bump({center:?}, {radius:?})"),
            FieldExpr::Closure { name, .. } => write!(f, "{name}"),
            FieldExpr::Scale(c, u) => write!(f, "{c:?}*({u:?})"),
            FieldExpr::Sum(a, b) => write!(f, "({a:?} + {b:?})"),
            FieldExpr::PosPart(u) => write!(f, "({u:?})^+"),
            FieldExpr::NegPart(u) => write!(f, "({u:?})^-"),
            FieldExpr::Abs(u) => write!(f, "|{u:?}|"),
            FieldExpr::Cutoff(m, u) => write!(f, "cut_{m:?}({u:?})"),
            FieldExpr::Compose { name, inner, .. } => write!(f, "{name}({inner:?})"),
        }
    }
}

/// Result of a numerical directional derivative.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Derivative<T> {
    /// Richardson value `(4 D(h/2) - D(h)) / 3`.
    pub value: T,
    pub coarse: T,
    pub fine: T,
    /// `|D(h/2) - D(h)| / 3`.
    pub error: T,
    /// The centered stencil left the domain and a one-sided rule was used.
    pub one_sided: bool,
}

/// Horizontal gradient with bookkeeping.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientResult<T> {
    pub gradient: Gradient<T>,
    /// Some leaf needed a one-sided stencil.
    pub one_sided: bool,
}

impl<T: Real> GradientResult<T> {
    pub fn norm(&self) -> T {
        self.gradient.iter().map(|&g| g * g).sum::<T>().sqrt()
    }
}

/// A scalar field on a group, optionally restricted to a domain.
#[derive(Clone, Debug)]
pub struct ScalarField<T> {
    pub group: Group<T>,
    pub expr: FieldExpr<T>,
    pub domain: Option<Domain<T>>,
}

/// Derivative of `f` along `X_j` at `x`, by `f(x exp(t X_j))`.
pub fn flow_derivative<T: Real>(
    g: &Group<T>,
    f: &dyn Fn(&Point<T>) -> T,
    j: usize,
    x: &Point<T>,
    h: T,
    domain: Option<&Domain<T>>,
) -> Derivative<T> {
    let inside = |p: &Point<T>| domain.is_none_or(|d| d.contains(p));
    let at = |t: T| g.flow(j, t, x);
    let (p1, m1) = (at(h), at(-h));
    if inside(&p1) && inside(&m1) {
        let half = h / lit(2.0);
        let coarse = (f(&p1) - f(&m1)) / (h + h);
        let fine = (f(&at(half)) - f(&at(-half))) / h;
        let four: T = lit(4.0);
        let three: T = lit(3.0);
        return Derivative { value: (four * fine - coarse) / three, coarse, fine, error: (fine - coarse).abs() / three, one_sided: false };
    }
    // Second-order one-sided rule towards the side that stays inside.
    let s = if inside(&p1) { h } else { -h };
    let f0 = f(x);
    let rule = |s: T| (lit::<T>(-3.0) * f0 + lit::<T>(4.0) * f(&at(s)) - f(&at(s + s))) / (s + s);
    let coarse = rule(s);
    let fine = rule(s / lit(2.0));
    Derivative {
        value: (lit::<T>(4.0) * fine - coarse) / lit(3.0),
        coarse,
        fine,
        error: (fine - coarse).abs() / lit(3.0),
        one_sided: true,
    }
}

fn monomial_value<T: Real>(m: &Monomial<T>, x: &[T]) -> T {
    m.exponents.iter().zip(x).fold(m.coefficient, |acc, (&e, &v)| acc * v.powi(e as i32))
}

fn monomial_partial<T: Real>(m: &Monomial<T>, x: &[T], k: usize) -> T {
    let e = m.exponents.get(k).copied().unwrap_or(0);
    if e == 0 {
        return T::zero();
    }
    let mut acc = m.coefficient * lit(e as f64);
    for (i, (&ei, &v)) in m.exponents.iter().zip(x).enumerate() {
        let p = if i == k { ei - 1 } else { ei };
        acc = acc * v.powi(p as i32);
    }
    acc
}

fn sgn<T: Real>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

fn indicator<T: Real>(b: bool) -> T {
    if b {
        T::one()
    } else {
        T::zero()
    }
}

impl<T: Real> FieldExpr<T> {
    pub fn eval(&self, g: &Group<T>, x: &Point<T>) -> T {
        match self {
            FieldExpr::Constant(c) => *c,
            FieldExpr::Coordinate(k) => x.coords()[*k],
            FieldExpr::Polynomial(ms) => ms.iter().map(|m| monomial_value(m, x.coords())).sum(),
            FieldExpr::DistanceTo(p) => g.distance(x, p),
            FieldExpr::Bump { center, radius } => (T::one() - g.distance(x, center) / *radius).max(T::zero()),
            FieldExpr::Closure { f, .. } => f(x),
            FieldExpr::Scale(c, u) => *c * u.eval(g, x),
            FieldExpr::Sum(a, b) => a.eval(g, x) + b.eval(g, x),
            FieldExpr::PosPart(u) => u.eval(g, x).max(T::zero()),
            FieldExpr::NegPart(u) => (-u.eval(g, x)).max(T::zero()),
            FieldExpr::Abs(u) => u.eval(g, x).abs(),
            FieldExpr::Cutoff(m, u) => {
                let v = u.eval(g, x);
                if v.abs() < *m {
                    v
                } else {
                    sgn(v) * *m
                }
            }
            FieldExpr::Compose { f, inner, .. } => f(inner.eval(g, x)),
        }
    }

    /// Value and horizontal gradient via the construction tree.
    pub fn eval_gradient(&self, g: &Group<T>, x: &Point<T>, h: T, domain: Option<&Domain<T>>) -> (T, GradientResult<T>) {
        let n = g.horizontal_dim();
        let zero = || GradientResult { gradient: SmallVec::from_elem(T::zero(), n), one_sided: false };
        let scale = |c: T, mut r: GradientResult<T>| {
            for v in r.gradient.iter_mut() {
                *v = c * *v;
            }
            r
        };
        match self {
            FieldExpr::Constant(c) => (*c, zero()),
            FieldExpr::Coordinate(k) => {
                let grad = (0..n).map(|i| left_invariant_field(g, i, x)[*k]).collect();
                (x.coords()[*k], GradientResult { gradient: grad, one_sided: false })
            }
            FieldExpr::Polynomial(ms) => {
                let euclid: Vec<T> =
                    (0..g.dim()).map(|k| ms.iter().map(|m| monomial_partial(m, x.coords(), k)).sum()).collect();
                let grad = (0..n)
                    .map(|i| left_invariant_field(g, i, x).iter().zip(&euclid).map(|(&a, &b)| a * b).sum())
                    .collect();
                (self.eval(g, x), GradientResult { gradient: grad, one_sided: false })
            }
            FieldExpr::Closure { f, gradient: Some(grad), .. } => {
                (f(x), GradientResult { gradient: grad(x), one_sided: false })
            }
            FieldExpr::DistanceTo(_) | FieldExpr::Bump { .. } | FieldExpr::Closure { gradient: None, .. } => {
                let f = |p: &Point<T>| self.eval(g, p);
                let mut one_sided = false;
                let grad = (0..n)
                    .map(|j| {
                        let d = flow_derivative(g, &f, j, x, h, domain);
                        one_sided |= d.one_sided;
                        d.value
                    })
                    .collect();
                (f(x), GradientResult { gradient: grad, one_sided })
            }
            FieldExpr::Scale(c, u) => {
                let (v, r) = u.eval_gradient(g, x, h, domain);
                (*c * v, scale(*c, r))
            }
            FieldExpr::Sum(a, b) => {
                let (va, ra) = a.eval_gradient(g, x, h, domain);
                let (vb, rb) = b.eval_gradient(g, x, h, domain);
                let grad = ra.gradient.iter().zip(&rb.gradient).map(|(&p, &q)| p + q).collect();
                (va + vb, GradientResult { gradient: grad, one_sided: ra.one_sided || rb.one_sided })
            }
            FieldExpr::PosPart(u) => {
                let (v, r) = u.eval_gradient(g, x, h, domain);
                (v.max(T::zero()), scale(indicator(v > T::zero()), r))
            }
            FieldExpr::NegPart(u) => {
                let (v, r) = u.eval_gradient(g, x, h, domain);
                ((-v).max(T::zero()), scale(-indicator::<T>(v < T::zero()), r))
            }
            FieldExpr::Abs(u) => {
                let (v, r) = u.eval_gradient(g, x, h, domain);
                (v.abs(), scale(sgn(v), r))
            }
            FieldExpr::Cutoff(m, u) => {
                let (v, r) = u.eval_gradient(g, x, h, domain);
                let inside = v.abs() < *m;
                (if inside { v } else { sgn(v) * *m }, scale(indicator(inside), r))
            }
            FieldExpr::Compose { f, df, inner, .. } => {
                let (v, r) = inner.eval_gradient(g, x, h, domain);
                let d = match df {
                    Some(df) => df(v),
                    None => {
                        let e = lit::<T>(1e-6) * v.abs().max(T::one());
                        (f(v + e) - f(v - e)) / (e + e)
                    }
                };
                (f(v), scale(d, r))
            }
        }
    }
}

/// Seminorm `|| |grad_h u| ||_{L_q}` with its quadrature error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Seminorm {
    /// `f64::INFINITY` for the sup norm.
    pub q: f64,
    pub value: f64,
    pub error: f64,
    pub samples: usize,
}

impl<T: Real> ScalarField<T> {
    pub fn new(group: &Group<T>, expr: FieldExpr<T>) -> Self {
        Self { group: group.clone(), expr, domain: None }
    }

    pub fn coordinate(group: &Group<T>, k: usize) -> Self {
        Self::new(group, FieldExpr::Coordinate(k))
    }

    pub fn constant(group: &Group<T>, c: T) -> Self {
        Self::new(group, FieldExpr::Constant(c))
    }

    pub fn closure(group: &Group<T>, name: &str, f: impl Fn(&Point<T>) -> T + Send + Sync + 'static) -> Self {
        Self::new(group, FieldExpr::Closure { name: name.into(), f: Arc::new(f), gradient: None })
    }

    /// Restricts the field to a domain; stencils then stay inside it.
    pub fn on(mut self, domain: Domain<T>) -> Self {
        self.domain = Some(domain);
        self
    }

    fn wrap(&self, expr: FieldExpr<T>) -> Self {
        Self { group: self.group.clone(), expr, domain: self.domain.clone() }
    }

    pub fn eval(&self, x: &Point<T>) -> T {
        self.expr.eval(&self.group, x)
    }

    pub fn default_step(&self) -> T {
        self.domain.as_ref().map_or(lit(DEFAULT_RELATIVE_STEP), |d| d.default_step())
    }

    /// Numerical `X_j u(x)` of the whole field, ignoring the tree.
    pub fn horizontal_derivative(&self, j: usize, x: &Point<T>, h: T) -> Derivative<T> {
        flow_derivative(&self.group, &|p| self.eval(p), j, x, h, self.domain.as_ref())
    }

    /// Numerical horizontal gradient of the whole field.
    pub fn numeric_gradient(&self, x: &Point<T>, h: T) -> GradientResult<T> {
        let mut one_sided = false;
        let gradient = (0..self.group.horizontal_dim())
            .map(|j| {
                let d = self.horizontal_derivative(j, x, h);
                one_sided |= d.one_sided;
                d.value
            })
            .collect();
        GradientResult { gradient, one_sided }
    }

    /// Horizontal gradient through the construction tree.
    pub fn horizontal_gradient(&self, x: &Point<T>, h: T) -> GradientResult<T> {
        self.expr.eval_gradient(&self.group, x, h, self.domain.as_ref()).1
    }

    pub fn gradient_norm(&self, x: &Point<T>) -> T {
        self.horizontal_gradient(x, self.default_step()).norm()
    }

    /// `|| |grad_h u| ||_{L_q(domain)}` by Monte Carlo; `q = inf` is the sample max.
    pub fn seminorm(&self, domain: &Domain<T>, q: f64) -> Seminorm {
        let nodes = domain.samples();
        self.seminorm_on(domain, &nodes, q)
    }

    /// Seminorm on given quadrature nodes of `domain`.
    pub fn seminorm_on(&self, domain: &Domain<T>, nodes: &[Point<T>], q: f64) -> Seminorm {
        let h = domain.default_step();
        let grads: Vec<T> = {
            use rayon::prelude::*;
            nodes.par_iter().map(|x| self.expr.eval_gradient(&self.group, x, h, Some(domain)).1.norm()).collect()
        };
        seminorm_from_magnitudes(domain, &grads, q)
    }

    pub fn scale(&self, c: T) -> Self {
        self.wrap(FieldExpr::Scale(c, Box::new(self.expr.clone())))
    }

    pub fn add(&self, other: &Self) -> Self {
        self.wrap(FieldExpr::Sum(Box::new(self.expr.clone()), Box::new(other.expr.clone())))
    }

    pub fn pos_part(&self) -> Self {
        self.wrap(FieldExpr::PosPart(Box::new(self.expr.clone())))
    }

    pub fn neg_part(&self) -> Self {
        self.wrap(FieldExpr::NegPart(Box::new(self.expr.clone())))
    }

    pub fn abs_val(&self) -> Self {
        self.wrap(FieldExpr::Abs(Box::new(self.expr.clone())))
    }

    pub fn cutoff(&self, m: T) -> Self {
        self.wrap(FieldExpr::Cutoff(m, Box::new(self.expr.clone())))
    }

    /// `F(u)`; pass `df` to use the chain rule with an exact `F'`.
    pub fn compose_smooth(
        &self,
        name: &str,
        f: impl Fn(T) -> T + Send + Sync + 'static,
        df: Option<Arc<dyn Fn(T) -> T + Send + Sync>>,
    ) -> Self {
        self.wrap(FieldExpr::Compose { name: name.into(), f: Arc::new(f), df, inner: Box::new(self.expr.clone()) })
    }
}

/// Turns sampled gradient magnitudes into an `L_q` seminorm over `domain`.
pub fn seminorm_from_magnitudes<T: Real>(domain: &Domain<T>, mags: &[T], q: f64) -> Seminorm {
    if q.is_infinite() {
        let max = mags.iter().fold(0.0f64, |m, &v| m.max(to_f64(v)));
        return Seminorm { q, value: max, error: 0.0, samples: mags.len() };
    }
    let qq: T = lit(q);
    let est = domain.integrate_values(mags, |&v| v.powf(qq));
    let integral = to_f64(est.value);
    let value = integral.max(0.0).powf(1.0 / q);
    let error = if integral > 0.0 { value / (q * integral) * to_f64(est.std_error) } else { 0.0 };
    Seminorm { q, value, error, samples: mags.len() }
}

impl<T: Real> Domain<T> {
    /// `|Omega| * mean f(v)` over precomputed per-node values.
    pub fn integrate_values<X: Sync>(&self, values: &[X], f: impl Fn(&X) -> T + Sync) -> Estimate<T> {
        mc::moments(values, f).scaled(self.measure())
    }
}

/// Window `[start, end]` sampled at `count` equally spaced parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Window<T> {
    pub start: T,
    pub end: T,
    pub count: usize,
}

impl<T: Real> Window<T> {
    pub fn parameters(&self) -> Vec<T> {
        if self.count <= 1 {
            return vec![self.start];
        }
        let step = (self.end - self.start) / lit((self.count - 1) as f64);
        (0..self.count).map(|i| self.start + step * lit(i as f64)).collect()
    }
}

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum LineError {
    #[error("base point has x_{j} = {value}, not on the hyperplane x_{j} = 0")]
    OffHyperplane { j: usize, value: f64 },
}

/// Samples `t -> f(exp(t X_j)(base))` for `base` on the hyperplane `{x_j = 0}`.
pub fn line_restriction<T: Real, R>(
    g: &Group<T>,
    j: usize,
    base: &Point<T>,
    window: Window<T>,
    f: impl Fn(&Point<T>) -> R,
) -> Result<Vec<(T, R)>, LineError> {
    let v = base.coords()[j];
    if v.abs() > T::epsilon() * lit(16.0) {
        return Err(LineError::OffHyperplane { j, value: to_f64(v) });
    }
    Ok(window.parameters().into_iter().map(|t| (t, f(&g.flow(j, t, base)))).collect())
}

/// Metric derivative `m_{X_j} phi(x)` from the difference quotients at
/// `h` and `h/2`, extrapolated linearly: `2 q(h/2) - q(h)`.
pub fn metric_derivative<T: Real>(phi: &dyn GroupMap<T>, j: usize, x: &Point<T>, h: T) -> T {
    let g = phi.source();
    let tg = phi.target();
    let fx = phi.eval(x);
    let quotient = |s: T| {
        let forward = tg.distance(&phi.eval(&g.flow(j, s, x)), &fx) / s;
        let backward = tg.distance(&phi.eval(&g.flow(j, -s, x)), &fx) / s;
        (forward + backward) / lit(2.0)
    };
    let coarse = quotient(h);
    let fine = quotient(h / lit(2.0));
    (fine + fine - coarse).max(T::zero())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn h1() -> Group<f64> {
        Group::heisenberg(1)
    }

    #[test]
    fn symbolic_fields_of_heisenberg() {
        let g = h1();
        let x = Point::from([0.3, -0.7, 0.2]);
        let z = ScalarField::coordinate(&g, 2);
        let grad = z.horizontal_gradient(&x, 1e-4).gradient;
        assert_relative_eq!(grad[0], 0.35, epsilon = 1e-15);
        assert_relative_eq!(grad[1], 0.15, epsilon = 1e-15);
        let num = z.numeric_gradient(&x, 1e-3).gradient;
        assert_relative_eq!(num[0], 0.35, epsilon = 1e-10);
        assert_relative_eq!(num[1], 0.15, epsilon = 1e-10);
        let x1 = ScalarField::coordinate(&g, 0);
        assert_eq!(x1.horizontal_gradient(&x, 1e-4).gradient.as_slice(), &[1.0, 0.0]);
    }

    #[test]
    fn constant_field_has_zero_gradient() {
        let g = h1();
        let c = ScalarField::constant(&g, 3.5);
        let x = Point::from([0.1, 0.2, 0.3]);
        assert_eq!(c.horizontal_gradient(&x, 1e-4).norm(), 0.0);
        assert_eq!(c.horizontal_derivative(0, &x, 1e-4).value, 0.0);
    }

    #[test]
    fn cutoff_of_constant() {
        let g = h1();
        let u = ScalarField::constant(&g, 5.0).cutoff(2.0);
        assert_eq!(u.eval(&g.identity()), 2.0);
        let u = ScalarField::constant(&g, -5.0).cutoff(2.0);
        assert_eq!(u.eval(&g.identity()), -2.0);
    }

    #[test]
    fn one_sided_stencil_is_flagged() {
        let g = h1();
        let dom = Domain::ball(&g, g.identity(), 1.0);
        let u = ScalarField::coordinate(&g, 0).on(dom);
        let edge = Point::from([1.0 - 1e-6, 0.0, 0.0]);
        let d = u.horizontal_derivative(0, &edge, 1e-3);
        assert!(d.one_sided);
        assert_relative_eq!(d.value, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn line_restriction_of_coordinate() {
        let g = h1();
        let base = Point::from([0.0, 0.4, -0.1]);
        let w = Window { start: -1.0, end: 1.0, count: 5 };
        let samples = line_restriction(&g, 0, &base, w, |p| p.coords()[0]).unwrap();
        for (t, v) in samples {
            assert_eq!(v, t);
        }
        assert!(line_restriction(&g, 0, &Point::from([0.2, 0.0, 0.0]), w, |p| p.coords()[0]).is_err());
    }

    #[test]
    fn polynomial_gradient_matches_numeric() {
        let g = h1();
        // x^2 y + 3 z^2
        let p = ScalarField::new(
            &g,
            FieldExpr::Polynomial(vec![
                Monomial { coefficient: 1.0, exponents: vec![2, 1, 0] },
                Monomial { coefficient: 3.0, exponents: vec![0, 0, 2] },
            ]),
        );
        let x = Point::from([0.4, -0.3, 0.25]);
        let exact = p.horizontal_gradient(&x, 1e-4).gradient;
        let num = p.numeric_gradient(&x, 1e-3).gradient;
        for k in 0..2 {
            assert_relative_eq!(exact[k], num[k], max_relative = 1e-8);
        }
    }
}
