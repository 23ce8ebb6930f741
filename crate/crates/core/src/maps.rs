//! Maps between Carnot groups and their differentials.
//!
//! Euclidean targets are abelian groups. Horizontal differentials are taken
//! with left-logarithmic differencing, `log(phi(x)^{-1} phi(x exp(t X_i)))`,
//! so the result is expressed in the left-invariant frame at `phi(x)`.
//! Matrices of linear maps from the source algebra to the target algebra
//! have one column per source basis vector.

use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;
use thiserror::Error;

use crate::exponent::{sigma, Exponent, ExponentError};
use crate::field::Domain;
use crate::group::{CoordBox, Group, Point, Region};
use crate::linalg::Matrix;
use crate::mc::{self, Estimate};
use crate::metric::CcBall;
use crate::scalar::{lit, to_f64, Real};

/// Below this `|det D^phi|` the distortion is set to zero.
pub const DET_THRESHOLD: f64 = 1e-10;

/// Largest `|D_h phi|` tolerated on the Jacobian zero set.
pub const FINITE_DISTORTION_TOLERANCE: f64 = 1e-6;

/// Homomorphism residual below which a linear map counts as exact.
pub const HOMOMORPHISM_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MapError {
    #[error("layer-1 block must be {rows} x {cols}, got {got_rows} x {got_cols}")]
    BlockShape { rows: usize, cols: usize, got_rows: usize, got_cols: usize },
    #[error("linear map is not a Lie algebra homomorphism (residual {0:e})")]
    NotHomomorphism(f64),
    #[error("map `{0}` has no inverse; image membership is unavailable")]
    NoInverse(String),
    #[error("source and target groups differ")]
    GroupMismatch,
    #[error(transparent)]
    Exponent(#[from] ExponentError),
}

/// A map `phi` from a source group to a target group.
pub trait GroupMap<T: Real>: Send + Sync {
    fn name(&self) -> String;

    /// Parameters for reports.
    fn params(&self) -> serde_json::Value {
        json!({})
    }

    fn source(&self) -> &Group<T>;

    fn target(&self) -> &Group<T>;

    fn eval(&self, x: &Point<T>) -> Point<T>;

    fn inverse(&self, _y: &Point<T>) -> Option<Point<T>> {
        None
    }

    fn has_inverse(&self) -> bool {
        false
    }

    /// Lipschitz constant in the CC metrics, when known.
    fn lipschitz(&self) -> Option<T> {
        None
    }

    /// Lipschitz constant of the inverse, when known.
    fn inverse_lipschitz(&self) -> Option<T> {
        None
    }

    /// `phi(B(center, r))` when it is itself a ball.
    fn image_ball(&self, _center: &Point<T>, _r: T) -> Option<(Point<T>, T)> {
        None
    }
}

pub type SharedMap<T> = Arc<dyn GroupMap<T>>;

/// The identity of a group.
#[derive(Clone, Debug)]
pub struct Identity<T> {
    pub group: Group<T>,
}

impl<T: Real> GroupMap<T> for Identity<T> {
    fn name(&self) -> String {
        "identity".into()
    }
    fn source(&self) -> &Group<T> {
        &self.group
    }
    fn target(&self) -> &Group<T> {
        &self.group
    }
    fn eval(&self, x: &Point<T>) -> Point<T> {
        x.clone()
    }
    fn inverse(&self, y: &Point<T>) -> Option<Point<T>> {
        Some(y.clone())
    }
    fn has_inverse(&self) -> bool {
        true
    }
    fn lipschitz(&self) -> Option<T> {
        Some(T::one())
    }
    fn inverse_lipschitz(&self) -> Option<T> {
        Some(T::one())
    }
    fn image_ball(&self, c: &Point<T>, r: T) -> Option<(Point<T>, T)> {
        Some((c.clone(), r))
    }
}

/// `x -> g x`.
#[derive(Clone, Debug)]
pub struct LeftTranslation<T> {
    pub group: Group<T>,
    pub by: Point<T>,
}

impl<T: Real> GroupMap<T> for LeftTranslation<T> {
    fn name(&self) -> String {
        "left-translation".into()
    }
    fn params(&self) -> serde_json::Value {
        json!({ "by": self.by.coords().iter().map(|&c| to_f64(c)).collect::<Vec<_>>() })
    }
    fn source(&self) -> &Group<T> {
        &self.group
    }
    fn target(&self) -> &Group<T> {
        &self.group
    }
    fn eval(&self, x: &Point<T>) -> Point<T> {
        self.group.multiply(&self.by, x)
    }
    fn inverse(&self, y: &Point<T>) -> Option<Point<T>> {
        Some(self.group.between(&self.by, y))
    }
    fn has_inverse(&self) -> bool {
        true
    }
    fn lipschitz(&self) -> Option<T> {
        Some(T::one())
    }
    fn inverse_lipschitz(&self) -> Option<T> {
        Some(T::one())
    }
    fn image_ball(&self, c: &Point<T>, r: T) -> Option<(Point<T>, T)> {
        Some((self.eval(c), r))
    }
}

/// `delta_lambda`.
#[derive(Clone, Debug)]
pub struct Dilation<T> {
    pub group: Group<T>,
    pub lambda: T,
}

impl<T: Real> GroupMap<T> for Dilation<T> {
    fn name(&self) -> String {
        "dilation".into()
    }
    fn params(&self) -> serde_json::Value {
        json!({ "lambda": to_f64(self.lambda) })
    }
    fn source(&self) -> &Group<T> {
        &self.group
    }
    fn target(&self) -> &Group<T> {
        &self.group
    }
    fn eval(&self, x: &Point<T>) -> Point<T> {
        self.group.dilate(self.lambda, x)
    }
    fn inverse(&self, y: &Point<T>) -> Option<Point<T>> {
        Some(self.group.dilate(T::one() / self.lambda, y))
    }
    fn has_inverse(&self) -> bool {
        true
    }
    fn lipschitz(&self) -> Option<T> {
        Some(self.lambda)
    }
    fn inverse_lipschitz(&self) -> Option<T> {
        Some(T::one() / self.lambda)
    }
    fn image_ball(&self, c: &Point<T>, r: T) -> Option<(Point<T>, T)> {
        Some((self.eval(c), self.lambda * r))
    }
}

/// A group homomorphism, linear in exponential coordinates.
#[derive(Clone, Debug)]
pub struct LinearHomomorphism<T> {
    pub label: String,
    pub pansu: PansuDifferential<T>,
    source: Group<T>,
    target: Group<T>,
    inverse: Option<Matrix<T>>,
}

impl<T: Real> LinearHomomorphism<T> {
    /// Extends a layer-1 block to the unique graded homomorphism; fails when
    /// the extension is inconsistent.
    pub fn from_horizontal(label: &str, source: &Group<T>, target: &Group<T>, a: Matrix<T>) -> Result<Self, MapError> {
        let pansu = pansu_extend(source, target, &a)?;
        if to_f64(pansu.residual) > HOMOMORPHISM_TOLERANCE {
            return Err(MapError::NotHomomorphism(to_f64(pansu.residual)));
        }
        let inverse = if source.dim() == target.dim() && pansu.determinant != T::zero() {
            pansu.matrix.inverse()
        } else {
            None
        };
        Ok(Self { label: label.into(), pansu, source: source.clone(), target: target.clone(), inverse })
    }

    /// Heisenberg shear `(x, y, z) -> (x, y + a x, z)`.
    pub fn shear(group: &Group<T>, a: T) -> Result<Self, MapError> {
        let n = group.horizontal_dim();
        let mut m = Matrix::identity(n);
        if n >= 2 {
            m[(1, 0)] = a;
        }
        Self::from_horizontal("shear", group, group, m)
    }

    /// `(x, y, z) -> (x, 0, 0)` on `H^1`: a homomorphism with vanishing
    /// Jacobian and nonzero horizontal differential.
    pub fn projection(group: &Group<T>) -> Result<Self, MapError> {
        let n = group.horizontal_dim();
        let mut m = Matrix::zeros(n, n);
        m[(0, 0)] = T::one();
        Self::from_horizontal("projection", group, group, m)
    }
}

impl<T: Real> GroupMap<T> for LinearHomomorphism<T> {
    fn name(&self) -> String {
        self.label.clone()
    }
    fn params(&self) -> serde_json::Value {
        json!({ "horizontal_block": self.pansu.blocks[0].to_rows().iter()
            .map(|r| r.iter().map(|&v| to_f64(v)).collect::<Vec<_>>()).collect::<Vec<_>>() })
    }
    fn source(&self) -> &Group<T> {
        &self.source
    }
    fn target(&self) -> &Group<T> {
        &self.target
    }
    fn eval(&self, x: &Point<T>) -> Point<T> {
        Point::new(self.pansu.matrix.mul_vec(x.coords()))
    }
    fn inverse(&self, y: &Point<T>) -> Option<Point<T>> {
        self.inverse.as_ref().map(|m| Point::new(m.mul_vec(y.coords())))
    }
    fn has_inverse(&self) -> bool {
        self.inverse.is_some()
    }
    fn lipschitz(&self) -> Option<T> {
        Some(self.pansu.blocks[0].spectral_norm())
    }
    fn inverse_lipschitz(&self) -> Option<T> {
        let inv = self.pansu.blocks[0].inverse()?;
        self.inverse.as_ref().map(|_| inv.spectral_norm())
    }
}

/// Radial squash of `R^n`: `x -> max(|x| - a, 0) x / |x|`, flat on `B(0, a)`.
#[derive(Clone, Debug)]
pub struct RadialSquash<T> {
    pub group: Group<T>,
    pub inner_radius: T,
}

impl<T: Real> RadialSquash<T> {
    pub fn new(n: usize, inner_radius: T) -> Self {
        Self { group: Group::abelian(n), inner_radius }
    }
}

impl<T: Real> GroupMap<T> for RadialSquash<T> {
    fn name(&self) -> String {
        "radial-squash".into()
    }
    fn params(&self) -> serde_json::Value {
        json!({ "inner_radius": to_f64(self.inner_radius) })
    }
    fn source(&self) -> &Group<T> {
        &self.group
    }
    fn target(&self) -> &Group<T> {
        &self.group
    }
    fn eval(&self, x: &Point<T>) -> Point<T> {
        let r = x.coords().iter().map(|&v| v * v).sum::<T>().sqrt();
        if r <= self.inner_radius {
            return self.group.identity();
        }
        let s = (r - self.inner_radius) / r;
        x.map(|v| v * s)
    }
    fn lipschitz(&self) -> Option<T> {
        Some(T::one())
    }
}

/// The constant map.
#[derive(Clone, Debug)]
pub struct Constant<T> {
    pub source: Group<T>,
    pub target: Group<T>,
    pub value: Point<T>,
}

impl<T: Real> GroupMap<T> for Constant<T> {
    fn name(&self) -> String {
        "constant".into()
    }
    fn source(&self) -> &Group<T> {
        &self.source
    }
    fn target(&self) -> &Group<T> {
        &self.target
    }
    fn eval(&self, _x: &Point<T>) -> Point<T> {
        self.value.clone()
    }
    fn lipschitz(&self) -> Option<T> {
        Some(T::zero())
    }
}

/// `second o first`.
#[derive(Clone)]
pub struct Compose<T> {
    pub first: SharedMap<T>,
    pub second: SharedMap<T>,
}

impl<T: Real> Compose<T> {
    pub fn new(first: SharedMap<T>, second: SharedMap<T>) -> Result<Self, MapError> {
        if first.target() != second.source() {
            return Err(MapError::GroupMismatch);
        }
        Ok(Self { first, second })
    }
}

impl<T: Real> GroupMap<T> for Compose<T> {
    fn name(&self) -> String {
        format!("{} o {}", self.second.name(), self.first.name())
    }
    fn params(&self) -> serde_json::Value {
        json!({ "first": { "name": self.first.name(), "params": self.first.params() },
                "second": { "name": self.second.name(), "params": self.second.params() } })
    }
    fn source(&self) -> &Group<T> {
        self.first.source()
    }
    fn target(&self) -> &Group<T> {
        self.second.target()
    }
    fn eval(&self, x: &Point<T>) -> Point<T> {
        self.second.eval(&self.first.eval(x))
    }
    fn inverse(&self, y: &Point<T>) -> Option<Point<T>> {
        self.first.inverse(&self.second.inverse(y)?)
    }
    fn has_inverse(&self) -> bool {
        self.first.has_inverse() && self.second.has_inverse()
    }
    fn lipschitz(&self) -> Option<T> {
        Some(self.first.lipschitz()? * self.second.lipschitz()?)
    }
    fn inverse_lipschitz(&self) -> Option<T> {
        Some(self.first.inverse_lipschitz()? * self.second.inverse_lipschitz()?)
    }
    fn image_ball(&self, c: &Point<T>, r: T) -> Option<(Point<T>, T)> {
        let (c1, r1) = self.first.image_ball(c, r)?;
        self.second.image_ball(&c1, r1)
    }
}

/// Horizontal differential `D_h phi(x)` (target rows, source columns).
#[derive(Clone, Debug)]
pub struct HorizontalDifferential<T> {
    pub matrix: Matrix<T>,
    /// Spectral norm of `matrix`.
    pub norm: T,
    pub step: T,
    /// Richardson error estimate, max over entries.
    pub error: T,
    pub one_sided: bool,
}

/// Constant `C` in `|D_h phi| <= |D^phi| <= C |D_h phi|`.
///
/// A graded homomorphism with layer-1 block `A` maps each horizontal curve
/// of length `L` to one of length at most `|A| L`, so its CC operator norm
/// is at most `|A|`; horizontal unit vectors attain `|A|`.
pub const SANDWICH_CONSTANT: f64 = 1.0;

/// Layer-1 part of `log(a^{-1} b)`.
fn horizontal_increment<T: Real>(tg: &Group<T>, a: &Point<T>, b: &Point<T>) -> Vec<T> {
    tg.layer(&tg.between(a, b), 0).to_vec()
}

/// `D_h phi(x)` by central left-logarithmic differences with a Richardson
/// pair; one-sided near the boundary of `domain`.
pub fn horizontal_differential<T: Real>(
    phi: &dyn GroupMap<T>,
    x: &Point<T>,
    h: T,
    domain: Option<&Domain<T>>,
) -> HorizontalDifferential<T> {
    let g = phi.source();
    let tg = phi.target();
    let n = g.horizontal_dim();
    let m = tg.horizontal_dim();
    let fx = phi.eval(x);
    let inside = |p: &Point<T>| domain.is_none_or(|d| d.contains(p));
    let mut coarse = Matrix::zeros(m, n);
    let mut fine = Matrix::zeros(m, n);
    let mut one_sided = false;
    for i in 0..n {
        let inc = |t: T| horizontal_increment(tg, &fx, &phi.eval(&g.flow(i, t, x)));
        let p = g.flow(i, h, x);
        let q = g.flow(i, -h, x);
        let (c, f) = if inside(&p) && inside(&q) {
            let (a, b) = (inc(h), inc(-h));
            let (a2, b2) = (inc(h / lit(2.0)), inc(-h / lit(2.0)));
            let c: Vec<T> = a.iter().zip(&b).map(|(&u, &v)| (u - v) / (h + h)).collect();
            let f: Vec<T> = a2.iter().zip(&b2).map(|(&u, &v)| (u - v) / h).collect();
            (c, f)
        } else {
            one_sided = true;
            let s = if inside(&p) { h } else { -h };
            let rule = |s: T| -> Vec<T> {
                let (a, b) = (inc(s), inc(s + s));
                a.iter().zip(&b).map(|(&u, &v)| (lit::<T>(4.0) * u - v) / (s + s)).collect()
            };
            (rule(s), rule(s / lit(2.0)))
        };
        for r in 0..m {
            coarse[(r, i)] = c[r];
            fine[(r, i)] = f[r];
        }
    }
    let matrix = Matrix::from_fn(m, n, |r, c| (lit::<T>(4.0) * fine[(r, c)] - coarse[(r, c)]) / lit(3.0));
    let error = fine.sub(&coarse).max_abs() / lit(3.0);
    let norm = matrix.spectral_norm();
    HorizontalDifferential { matrix, norm, step: h, error, one_sided }
}

/// Graded extension of a layer-1 block.
#[derive(Clone, Debug)]
pub struct PansuDifferential<T> {
    /// Layer blocks `g_i -> g~_i`; zero rows when the target has fewer layers.
    pub blocks: Vec<Matrix<T>>,
    /// Full block-diagonal matrix, target dimension by source dimension.
    pub matrix: Matrix<T>,
    /// Max over basis pairs of `|D[X, Y] - [DX, DY]|`.
    pub residual: T,
    pub determinant: T,
    /// Why the determinant is zero by convention, if it is.
    pub det_reason: Option<String>,
}

impl<T: Real> PansuDifferential<T> {
    pub fn apply(&self, v: &[T]) -> Vec<T> {
        self.matrix.mul_vec(v)
    }

    pub fn horizontal_norm(&self) -> T {
        self.blocks[0].spectral_norm()
    }
}

/// Solves the layer blocks from `[D X_a, D X_b] = D [X_a, X_b]` by least
/// squares over all spanning bracket pairs and reports the residual.
pub fn pansu_extend<T: Real>(g: &Group<T>, tg: &Group<T>, a: &Matrix<T>) -> Result<PansuDifferential<T>, MapError> {
    let (n, m) = (g.horizontal_dim(), tg.horizontal_dim());
    if a.rows() != m || a.cols() != n {
        return Err(MapError::BlockShape { rows: m, cols: n, got_rows: a.rows(), got_cols: a.cols() });
    }
    let mut full = Matrix::zeros(tg.dim(), g.dim());
    for r in 0..m {
        for c in 0..n {
            full[(tg.layer_range(0).start + r, c)] = a[(r, c)];
        }
    }
    let mut blocks = vec![a.clone()];
    for layer in 1..g.step() {
        let src = g.layer_range(layer);
        let tgt_rows = if layer < tg.step() { tg.layer_dims()[layer] } else { 0 };
        if tgt_rows == 0 {
            blocks.push(Matrix::zeros(0, src.len()));
            continue;
        }
        let tgt = tg.layer_range(layer);
        let mut c_rows = Vec::new();
        let mut r_rows = Vec::new();
        for ia in g.layer_range(0) {
            for ib in g.layer_range(layer - 1) {
                let mut ea = vec![T::zero(); g.dim()];
                let mut eb = vec![T::zero(); g.dim()];
                ea[ia] = T::one();
                eb[ib] = T::one();
                let br = g.bracket(&ea, &eb);
                let c: Vec<T> = src.clone().map(|k| br[k]).collect();
                if c.iter().all(|&v| v == T::zero()) {
                    continue;
                }
                let da = full.mul_vec(&ea);
                let db = full.mul_vec(&eb);
                let img = tg.bracket(&da, &db);
                c_rows.push(c);
                r_rows.push(tgt.clone().map(|k| img[k]).collect::<Vec<T>>());
            }
        }
        let cm = Matrix::from_rows(&c_rows);
        let rm = Matrix::from_rows(&r_rows);
        let bt = cm.least_squares(&rm).unwrap_or_else(|| Matrix::zeros(src.len(), tgt.len()));
        let block = bt.transpose();
        for r in 0..tgt.len() {
            for c in 0..src.len() {
                full[(tgt.start + r, src.start + c)] = block[(r, c)];
            }
        }
        blocks.push(block);
    }
    // Full homomorphism residual over all basis pairs.
    let mut residual = T::zero();
    for i in 0..g.dim() {
        for j in (i + 1)..g.dim() {
            let mut ei = vec![T::zero(); g.dim()];
            let mut ej = vec![T::zero(); g.dim()];
            ei[i] = T::one();
            ej[j] = T::one();
            let lhs = full.mul_vec(&g.bracket(&ei, &ej));
            let rhs = tg.bracket(&full.mul_vec(&ei), &full.mul_vec(&ej));
            for k in 0..tg.dim() {
                residual = residual.max((lhs[k] - rhs[k]).abs());
            }
        }
    }
    let (determinant, det_reason) = if g.layer_dims() != tg.layer_dims() {
        (T::zero(), Some(format!("layer dimensions {:?} and {:?} differ", g.layer_dims(), tg.layer_dims())))
    } else {
        (blocks.iter().fold(T::one(), |acc, b| acc * b.determinant()), None)
    };
    Ok(PansuDifferential { blocks, matrix: full, residual, determinant, det_reason })
}

/// Sampled lower estimate of the CC operator norm
/// `sup { d(0, exp D^phi X) : d(0, exp X) = 1 }`.
pub fn pansu_operator_norm_estimate<T: Real>(
    g: &Group<T>,
    tg: &Group<T>,
    pansu: &PansuDifferential<T>,
    samples: usize,
    seed: u64,
) -> T {
    let dirs = mc::generate(samples, seed, |rng| {
        use rand::Rng as _;
        Point::new((0..g.dim()).map(|_| lit::<T>(rng.gen_range(-1.0..1.0))))
    });
    let mut best = T::zero();
    // Horizontal basis vectors first, then random unit-sphere points.
    let basis = (0..g.horizontal_dim()).map(|j| g.horizontal(j, T::one()));
    for v in basis.chain(dirs) {
        let r = g.norm(&v);
        if r <= T::zero() {
            continue;
        }
        let unit = g.dilate(T::one() / r, &v);
        best = best.max(tg.norm(&Point::new(pansu.apply(unit.coords()))));
    }
    best
}

/// Ratio sequence `|phi(B(x, r))| / |B(x, r)|` over shrinking radii.
#[derive(Clone, Debug, Serialize)]
pub struct SpatialJacobian {
    pub radii: Vec<f64>,
    pub ratios: Vec<f64>,
    pub errors: Vec<f64>,
    /// Ratio at the smallest radius.
    pub smallest: f64,
    /// Intercept of a linear fit in `r`.
    pub extrapolated: f64,
}

struct ImageRegion<'a, T: Real> {
    map: &'a dyn GroupMap<T>,
    ball: CcBall<T>,
    bbox: CoordBox<T>,
}

impl<T: Real> Region<T> for ImageRegion<'_, T> {
    fn contains(&self, y: &Point<T>) -> bool {
        self.map.inverse(y).is_some_and(|x| self.ball.contains_point(&x))
    }
    fn bounding_box(&self) -> Option<CoordBox<T>> {
        Some(self.bbox.clone())
    }
}

/// Coordinate box containing `phi(B(x, r))`: exact when the image is a ball,
/// otherwise the hull of mapped ball samples inflated by 10% per side.
pub fn image_box<T: Real>(phi: &dyn GroupMap<T>, x: &Point<T>, r: T, seed: u64) -> CoordBox<T> {
    if let Some((c, s)) = phi.image_ball(x, r) {
        return phi.target().ball_box(&c, s);
    }
    let pts = phi.source().ball(x.clone(), r).sample(4096, seed);
    let dim = phi.target().dim();
    let mut lo = vec![T::infinity(); dim];
    let mut hi = vec![T::neg_infinity(); dim];
    for p in pts.iter().map(|p| phi.eval(p)) {
        for k in 0..dim {
            lo[k] = lo[k].min(p.coords()[k]);
            hi[k] = hi[k].max(p.coords()[k]);
        }
    }
    for k in 0..dim {
        let pad = (hi[k] - lo[k]) * lit(0.1) + lit(1e-12);
        lo[k] = lo[k] - pad;
        hi[k] = hi[k] + pad;
    }
    CoordBox::new(lo, hi)
}

/// Spatial derivative `J(x, phi)` by image-ball measures; needs an inverse.
pub fn spatial_jacobian<T: Real>(
    phi: &dyn GroupMap<T>,
    x: &Point<T>,
    radii: &[T],
    samples: usize,
    seed: u64,
) -> Result<SpatialJacobian, MapError> {
    if !phi.has_inverse() {
        return Err(MapError::NoInverse(phi.name()));
    }
    let g = phi.source();
    let tg = phi.target();
    let mut ratios = Vec::new();
    let mut errors = Vec::new();
    for (i, &r) in radii.iter().enumerate() {
        let region = ImageRegion { map: phi, ball: g.ball(x.clone(), r), bbox: image_box(phi, x, r, seed) };
        let est = crate::group::measure(tg, &region, samples, seed.wrapping_add(i as u64))
            .expect("image region is bounded");
        let ball = r.powi(g.homogeneous_dim() as i32);
        ratios.push(to_f64(est.value / ball));
        errors.push(to_f64(est.std_error / ball));
    }
    let rf: Vec<f64> = radii.iter().map(|&r| to_f64(r)).collect();
    let smallest = rf
        .iter()
        .zip(&ratios)
        .fold((f64::INFINITY, f64::NAN), |best, (&r, &v)| if r < best.0 { (r, v) } else { best })
        .1;
    let extrapolated = linear_intercept(&rf, &ratios).unwrap_or(smallest);
    Ok(SpatialJacobian { radii: rf, ratios, errors, smallest, extrapolated })
}

/// Intercept of the least-squares line through `(x_i, y_i)`.
pub fn linear_intercept(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    if x.len() < 2 {
        return y.first().copied();
    }
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Some(my);
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    Some(my - sxy / sxx * mx)
}

/// Pointwise distortion data at one sample.
#[derive(Clone, Debug, Serialize)]
pub struct DistortionSample {
    pub point: Vec<f64>,
    pub dh_norm: f64,
    /// Bound on the discretization error of `dh_norm`.
    pub dh_error: f64,
    pub det: f64,
    pub kp: f64,
    pub thresholded: bool,
}

#[derive(Clone, Debug, Serialize, PartialEq, Eq)]
pub enum Verdict {
    #[serde(rename = "PASS")]
    Pass,
    #[serde(rename = "FAIL")]
    Fail,
}

#[derive(Clone, Debug, Serialize)]
pub struct FiniteDistortion {
    pub verdict: Verdict,
    /// Largest `|D_h phi|` on the sampled zero set.
    pub worst: f64,
    /// Samples in the zero set whose `|D_h phi|` exceeds the tolerance by more
    /// than its discretization error.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub violations: Vec<DistortionSample>,
}

/// Distortion statistics of a map over a domain.
#[derive(Clone, Debug, Serialize)]
pub struct DistortionReport {
    pub p: Exponent,
    pub q: Exponent,
    pub sigma: Exponent,
    pub samples: usize,
    #[serde(rename = "Kp_norm")]
    pub kp_norm: f64,
    #[serde(rename = "Kp_norm_error")]
    pub kp_norm_error: f64,
    pub finite_distortion: FiniteDistortion,
    pub thresholded_count: usize,
    #[serde(skip)]
    pub per_sample: Vec<DistortionSample>,
}

impl DistortionReport {
    /// CSV rows: coordinates, `|D_h phi|`, det, `K_p`.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let dim = self.per_sample.first().map_or(0, |s| s.point.len());
        let mut header: Vec<String> = (0..dim).map(|i| format!("x{i}")).collect();
        header.extend(["dh_norm", "dh_error", "det", "kp", "thresholded"].map(String::from));
        out.write_record(&header)?;
        for s in &self.per_sample {
            let mut row: Vec<String> = s.point.iter().map(|v| format!("{v:e}")).collect();
            row.push(format!("{:e}", s.dh_norm));
            row.push(format!("{:e}", s.dh_error));
            row.push(format!("{:e}", s.det));
            row.push(format!("{:e}", s.kp));
            row.push(s.thresholded.to_string());
            out.write_record(&row)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Pointwise `K_p` with differential data.
pub fn distortion_at<T: Real>(phi: &dyn GroupMap<T>, x: &Point<T>, p: Exponent, h: T) -> DistortionSample {
    let dh = horizontal_differential(phi, x, h, None);
    let det = pansu_extend(phi.source(), phi.target(), &dh.matrix)
        .map(|pd| to_f64(pd.determinant))
        .unwrap_or(0.0);
    let dh_norm = to_f64(dh.norm);
    // Entrywise Richardson error to a spectral-norm error via Frobenius.
    let dh_error = to_f64(dh.error) * ((dh.matrix.rows() * dh.matrix.cols()) as f64).sqrt();
    let thresholded = det.abs() < DET_THRESHOLD;
    let kp = if thresholded {
        0.0
    } else {
        match p {
            Exponent::Finite(_) => dh_norm / det.abs().powf(1.0 / p.to_f64()),
            Exponent::Infinite => dh_norm,
        }
    };
    DistortionSample { point: x.coords().iter().map(|&c| to_f64(c)).collect(), dh_norm, dh_error, det, kp, thresholded }
}

/// `K_p` over `samples` of `domain` and its `L_sigma` norm, `1/sigma = 1/q - 1/p`.
pub fn distortion_kp<T: Real>(
    phi: &dyn GroupMap<T>,
    domain: &Domain<T>,
    p: Exponent,
    q: Exponent,
    samples: &[Point<T>],
) -> Result<DistortionReport, MapError> {
    let s = sigma(p, q)?;
    let h = domain.default_step();
    let per_sample: Vec<DistortionSample> = samples.par_iter().map(|x| distortion_at(phi, x, p, h)).collect();
    let (kp_norm, kp_norm_error) = lsigma_norm(domain, &per_sample.iter().map(|d| d.kp).collect::<Vec<_>>(), s);
    let finite_distortion = finite_distortion_from(&per_sample);
    let thresholded_count = per_sample.iter().filter(|d| d.thresholded).count();
    Ok(DistortionReport {
        p,
        q,
        sigma: s,
        samples: samples.len(),
        kp_norm,
        kp_norm_error,
        finite_distortion,
        thresholded_count,
        per_sample,
    })
}

/// `(int_Omega v^sigma)^{1/sigma}` with delta-method error; max for `sigma = inf`.
pub fn lsigma_norm<T: Real>(domain: &Domain<T>, values: &[f64], s: Exponent) -> (f64, f64) {
    match s {
        Exponent::Infinite => (values.iter().fold(0.0, |m: f64, &v| m.max(v)), 0.0),
        Exponent::Finite(_) => {
            let sf = s.to_f64();
            let est: Estimate<f64> = mc::moments(values, |&v| v.powf(sf)).scaled(to_f64(domain.measure()));
            let value = est.value.max(0.0).powf(1.0 / sf);
            let err = if est.value > 0.0 { value / (sf * est.value) * est.std_error } else { 0.0 };
            (value, err)
        }
    }
}

fn finite_distortion_from(samples: &[DistortionSample]) -> FiniteDistortion {
    let zero_set: Vec<&DistortionSample> = samples.iter().filter(|d| d.thresholded).collect();
    let worst = zero_set.iter().fold(0.0f64, |m, d| m.max(d.dh_norm));
    let violations: Vec<DistortionSample> =
        zero_set.into_iter().filter(|d| d.dh_norm - d.dh_error > FINITE_DISTORTION_TOLERANCE).cloned().collect();
    let verdict = if violations.is_empty() { Verdict::Pass } else { Verdict::Fail };
    FiniteDistortion { verdict, worst, violations }
}

/// Finite-distortion verdict over `samples`.
pub fn finite_distortion_check<T: Real>(phi: &dyn GroupMap<T>, domain: &Domain<T>, samples: &[Point<T>]) -> FiniteDistortion {
    let h = domain.default_step();
    let per: Vec<DistortionSample> =
        samples.par_iter().map(|x| distortion_at(phi, x, Exponent::integer(1), h)).collect();
    finite_distortion_from(&per)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn h1() -> Group<f64> {
        Group::heisenberg(1)
    }

    #[test]
    fn dilation_differential() {
        let g = h1();
        let phi = Dilation { group: g.clone(), lambda: 2.0 };
        let d = horizontal_differential(&phi, &Point::from([0.3, -0.2, 0.1]), 1e-4, None);
        assert!(d.matrix.sub(&Matrix::diagonal(&[2.0, 2.0])).max_abs() < 1e-9);
        let t = LeftTranslation { group: g.clone(), by: Point::from([1.0, 2.0, -0.5]) };
        let d = horizontal_differential(&t, &Point::from([0.3, -0.2, 0.1]), 1e-4, None);
        assert!(d.matrix.sub(&Matrix::identity(2)).max_abs() < 1e-9);
    }

    #[test]
    fn pansu_of_diagonal_block() {
        let g = h1();
        let pd = pansu_extend(&g, &g, &Matrix::diagonal(&[2.0, 2.0])).unwrap();
        assert_relative_eq!(pd.blocks[1][(0, 0)], 4.0, epsilon = 1e-14);
        assert_relative_eq!(pd.determinant, 16.0, epsilon = 1e-10);
        assert!(pd.residual < 1e-14);
        let id = pansu_extend(&g, &g, &Matrix::identity(2)).unwrap();
        assert_eq!(id.determinant, 1.0);
        let zero = pansu_extend(&g, &g, &Matrix::zeros(2, 2)).unwrap();
        assert_eq!(zero.determinant, 0.0);
        assert_eq!(zero.matrix.max_abs(), 0.0);
    }

    #[test]
    fn mismatched_layers_give_zero_determinant() {
        let g = h1();
        let r3 = Group::<f64>::abelian(2);
        let pd = pansu_extend(&g, &r3, &Matrix::identity(2)).unwrap();
        assert_eq!(pd.determinant, 0.0);
        assert!(pd.det_reason.is_some());
        assert!(matches!(pansu_extend(&g, &g, &Matrix::identity(3)), Err(MapError::BlockShape { .. })));
    }

    #[test]
    fn shear_is_an_automorphism() {
        let g = h1();
        let s = LinearHomomorphism::shear(&g, 0.7).unwrap();
        assert!(s.pansu.residual < 1e-12);
        assert_relative_eq!(s.pansu.determinant, 1.0, epsilon = 1e-12);
        let a = Point::from([0.2, 0.5, -0.3]);
        let b = Point::from([-0.4, 0.1, 0.8]);
        let lhs = s.eval(&g.multiply(&a, &b));
        let rhs = g.multiply(&s.eval(&a), &s.eval(&b));
        assert!(lhs.max_abs_diff(&rhs) < 1e-14);
        let back = s.inverse(&s.eval(&a)).unwrap();
        assert!(back.max_abs_diff(&a) < 1e-12);
    }

    #[test]
    fn homomorphism_residual_separates_quotient_from_inclusion() {
        // The quotient Engel -> H^1 extends; the inclusion H^1 -> Engel does not.
        let e = Group::<f64>::engel();
        let h = h1();
        assert!(LinearHomomorphism::from_horizontal("quotient", &e, &h, Matrix::identity(2)).is_ok());
        assert!(matches!(
            LinearHomomorphism::from_horizontal("inclusion", &h, &e, Matrix::identity(2)),
            Err(MapError::NotHomomorphism(_))
        ));
    }

    #[test]
    fn distortion_samples() {
        let g = h1();
        let phi = Dilation { group: g.clone(), lambda: 2.0 };
        let s = distortion_at(&phi, &Point::from([0.1, 0.2, 0.3]), Exponent::integer(8), 1e-4);
        assert_relative_eq!(s.kp, 2f64.sqrt(), max_relative = 1e-8);
        let c = Constant { source: g.clone(), target: g.clone(), value: Point::from([1.0, 0.0, 0.0]) };
        let s = distortion_at(&c, &Point::from([0.1, 0.2, 0.3]), Exponent::integer(8), 1e-4);
        assert_eq!(s.kp, 0.0);
        assert!(s.thresholded);
    }

    #[test]
    fn intercept_of_line() {
        assert_relative_eq!(linear_intercept(&[0.1, 0.2, 0.3], &[1.1, 1.2, 1.3]).unwrap(), 1.0, epsilon = 1e-12);
    }
}
