//! Carnot groups in exponential coordinates of the first kind.
//!
//! A point is the coordinate vector of its logarithm in a graded basis
//! `X_{ij}` (layer `i`, slot `j`), so the identity is `0` and inversion is
//! negation. The product comes from the Baker-Campbell-Hausdorff series,
//! which is a finite sum for nilpotent algebras; it is written out through
//! degree three, so descriptors of step above three are rejected.

use std::fmt;
use std::sync::{Arc, OnceLock};

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use smallvec::SmallVec;
use thiserror::Error;

use crate::linalg::Matrix;
use crate::mc::{self, Estimate, Moments};
use crate::metric::Calibration;
use crate::scalar::{int, lit, to_f64, Real, Scalar};

/// Residual allowed in the Jacobi identity and antisymmetry checks.
pub const STRUCTURE_TOLERANCE: f64 = 1e-12;

/// Largest step handled by the truncated BCH product.
pub const MAX_STEP: usize = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GroupError {
    #[error("step {0} is not supported (the BCH product is implemented through step {MAX_STEP})")]
    UnsupportedStep(usize),
    #[error("layer dimensions must be non-empty and positive, got {0:?}")]
    BadLayers(Vec<usize>),
    #[error("structure constant {field}: index {index} out of range for dimension {dim}")]
    IndexOutOfRange { field: String, index: usize, dim: usize },
    #[error("structure constant {field}: duplicate entry")]
    Duplicate { field: String },
    #[error("antisymmetry violated for [X{i}, X{j}] (residual {residual:e})")]
    Antisymmetry { i: usize, j: usize, residual: f64 },
    #[error("grading violated: [X{i}, X{j}] has a component along X{k} outside layer {expected}")]
    Grading { i: usize, j: usize, k: usize, expected: usize },
    #[error("Jacobi identity violated for (X{i}, X{j}, X{l}) (residual {residual:e})")]
    Jacobi { i: usize, j: usize, l: usize, residual: f64 },
    #[error("layer {layer} is not generated by brackets with the first layer (rank {rank} < {dim})")]
    NotStratified { layer: usize, rank: usize, dim: usize },
    #[error("point has {got} coordinates, group dimension is {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("region has no bounding box; measure needs a bounded region")]
    Unbounded,
    #[error("invalid descriptor: {0}")]
    Descriptor(String),
}

/// A point of the group, identified with its exponential coordinates.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Point<T> {
    coords: SmallVec<[T; 8]>,
}

impl<T: Scalar> Point<T> {
    pub fn new(coords: impl IntoIterator<Item = T>) -> Self {
        Self { coords: coords.into_iter().collect() }
    }

    pub fn zeros(dim: usize) -> Self {
        Self { coords: SmallVec::from_elem(T::zero(), dim) }
    }

    pub fn coords(&self) -> &[T] {
        &self.coords
    }

    pub fn coords_mut(&mut self) -> &mut [T] {
        &mut self.coords
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn is_identity(&self) -> bool {
        self.coords.iter().all(|c| *c == T::zero())
    }

    /// Sup norm of the coordinate difference.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.coords.iter().zip(&other.coords).map(|(&a, &b)| to_f64(a - b).abs()).fold(0.0, f64::max)
    }

    pub fn map<U: Scalar>(&self, f: impl Fn(T) -> U) -> Point<U> {
        Point { coords: self.coords.iter().map(|&c| f(c)).collect() }
    }
}

impl<T: fmt::Debug> fmt::Debug for Point<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.coords.iter()).finish()
    }
}

impl<T: Scalar> From<Vec<T>> for Point<T> {
    fn from(v: Vec<T>) -> Self {
        Self::new(v)
    }
}

impl<T: Scalar, const N: usize> From<[T; N]> for Point<T> {
    fn from(v: [T; N]) -> Self {
        Self::new(v)
    }
}

/// A Lie algebra element split into its layers.
#[derive(Clone, Debug, PartialEq)]
pub struct GradedVector<T> {
    pub layers: Vec<Vec<T>>,
}

impl<T: Scalar> GradedVector<T> {
    pub fn horizontal(&self) -> &[T] {
        &self.layers[0]
    }

    pub fn flatten(&self) -> Vec<T> {
        self.layers.iter().flatten().copied().collect()
    }
}

/// How the product is evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Law {
    Abelian,
    /// Closed form on `(x, y, z)` with `z` last.
    Heisenberg { k: usize },
    /// Truncated BCH series over the structure constants.
    Bch,
}

/// One nonzero structure constant `c^k_{ij}`, `[X_i, X_j] = ... + c X_k`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructureConstant<T> {
    pub i: usize,
    pub j: usize,
    pub k: usize,
    pub value: T,
}

struct Inner<T> {
    name: String,
    layer_dims: Vec<usize>,
    offsets: Vec<usize>,
    layer_of: Vec<usize>,
    /// Both orderings of every nonzero bracket.
    brackets: Vec<StructureConstant<T>>,
    law: Law,
    layer_bounds: OnceLock<Vec<f64>>,
    calibration: OnceLock<Calibration>,
}

/// Descriptor of a stratified nilpotent group.
#[derive(Clone)]
pub struct Group<T> {
    inner: Arc<Inner<T>>,
}

impl<T> fmt::Debug for Group<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Group")
            .field("name", &self.inner.name)
            .field("layer_dims", &self.inner.layer_dims)
            .field("law", &self.inner.law)
            .finish()
    }
}

impl<T: Scalar> PartialEq for Group<T> {
    fn eq(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.inner, &other.inner)
            || (self.inner.layer_dims == other.inner.layer_dims && self.inner.brackets == other.inner.brackets)
    }
}

impl<T: Scalar> Group<T> {
    /// Validates and builds a descriptor from the upper-triangular or full
    /// list of structure constants in the graded basis (layer 1 first).
    pub fn new(
        name: impl Into<String>,
        layer_dims: Vec<usize>,
        constants: Vec<StructureConstant<T>>,
    ) -> Result<Self, GroupError> {
        Self::with_law(name.into(), layer_dims, constants, None)
    }

    fn with_law(
        name: String,
        layer_dims: Vec<usize>,
        constants: Vec<StructureConstant<T>>,
        law: Option<Law>,
    ) -> Result<Self, GroupError> {
        if layer_dims.is_empty() || layer_dims.contains(&0) {
            return Err(GroupError::BadLayers(layer_dims));
        }
        if layer_dims.len() > MAX_STEP {
            return Err(GroupError::UnsupportedStep(layer_dims.len()));
        }
        let dim: usize = layer_dims.iter().sum();
        let mut offsets = Vec::with_capacity(layer_dims.len());
        let mut layer_of = Vec::with_capacity(dim);
        let mut acc = 0;
        for (l, &n) in layer_dims.iter().enumerate() {
            offsets.push(acc);
            acc += n;
            layer_of.extend(std::iter::repeat_n(l, n));
        }

        let mut dense = vec![T::zero(); dim * dim * dim];
        let mut seen = vec![false; dim * dim * dim];
        let at = |i: usize, j: usize, k: usize| (i * dim + j) * dim + k;
        for (n, c) in constants.iter().enumerate() {
            for (field, idx) in [("i", c.i), ("j", c.j), ("k", c.k)] {
                if idx >= dim {
                    return Err(GroupError::IndexOutOfRange {
                        field: format!("structure_constants[{n}].{field}"),
                        index: idx,
                        dim,
                    });
                }
            }
            let slot = at(c.i, c.j, c.k);
            if seen[slot] {
                return Err(GroupError::Duplicate { field: format!("structure_constants[{n}]") });
            }
            seen[slot] = true;
            dense[slot] = c.value;
        }
        // Complete the antisymmetric partner of entries given one way only.
        for i in 0..dim {
            for j in 0..dim {
                for k in 0..dim {
                    if seen[at(i, j, k)] && !seen[at(j, i, k)] {
                        dense[at(j, i, k)] = -dense[at(i, j, k)];
                        seen[at(j, i, k)] = true;
                    }
                }
            }
        }
        for i in 0..dim {
            for j in 0..dim {
                for k in 0..dim {
                    let r = to_f64(dense[at(i, j, k)] + dense[at(j, i, k)]).abs();
                    if r > STRUCTURE_TOLERANCE {
                        return Err(GroupError::Antisymmetry { i, j, residual: r });
                    }
                    if dense[at(i, j, k)] != T::zero() && layer_of[k] != layer_of[i] + layer_of[j] + 1 {
                        return Err(GroupError::Grading { i, j, k, expected: layer_of[i] + layer_of[j] + 2 });
                    }
                }
            }
        }

        let mut brackets = Vec::new();
        for i in 0..dim {
            for j in 0..dim {
                for k in 0..dim {
                    let v = dense[at(i, j, k)];
                    if v != T::zero() {
                        brackets.push(StructureConstant { i, j, k, value: v });
                    }
                }
            }
        }

        let law = law.unwrap_or(if brackets.is_empty() { Law::Abelian } else { Law::Bch });
        let group = Self {
            inner: Arc::new(Inner {
                name,
                layer_dims,
                offsets,
                layer_of,
                brackets,
                law,
                layer_bounds: OnceLock::new(),
                calibration: OnceLock::new(),
            }),
        };
        group.check_jacobi()?;
        group.check_stratified()?;
        Ok(group)
    }

    fn check_jacobi(&self) -> Result<(), GroupError> {
        let n = self.dim();
        let e = |i: usize| {
            let mut v = vec![T::zero(); n];
            v[i] = T::one();
            v
        };
        for i in 0..n {
            for j in (i + 1)..n {
                for l in (j + 1)..n {
                    let (xi, xj, xl) = (e(i), e(j), e(l));
                    let a = self.bracket(&self.bracket(&xi, &xj), &xl);
                    let b = self.bracket(&self.bracket(&xj, &xl), &xi);
                    let c = self.bracket(&self.bracket(&xl, &xi), &xj);
                    let residual =
                        (0..n).map(|k| to_f64(a[k] + b[k] + c[k]).abs()).fold(0.0, f64::max);
                    if residual > STRUCTURE_TOLERANCE {
                        return Err(GroupError::Jacobi { i, j, l, residual });
                    }
                }
            }
        }
        Ok(())
    }

    fn check_stratified(&self) -> Result<(), GroupError> {
        for layer in 1..self.step() {
            let rows: Vec<Vec<f64>> = (0..self.layer_dims()[0])
                .flat_map(|a| self.layer_range(layer - 1).map(move |b| (a, b)))
                .map(|(a, b)| {
                    let mut v = vec![0.0; self.layer_dims()[layer]];
                    for c in self.inner.brackets.iter().filter(|c| c.i == a && c.j == b) {
                        v[c.k - self.inner.offsets[layer]] += to_f64(c.value);
                    }
                    v
                })
                .collect();
            let m = Matrix::from_rows(&rows);
            let gram = m.transpose().matmul(&m);
            let ev = gram.symmetric_eigenvalues();
            let top = ev.first().copied().unwrap_or(0.0);
            let rank = ev.iter().filter(|&&x| x > 1e-10 * top.max(1e-300)).count();
            let dim = self.layer_dims()[layer];
            if rank < dim {
                return Err(GroupError::NotStratified { layer: layer + 1, rank, dim });
            }
        }
        Ok(())
    }

    /// Euclidean space viewed as the step-one group.
    pub fn abelian(n: usize) -> Self {
        Self::with_law(format!("abelian-{n}"), vec![n], Vec::new(), Some(Law::Abelian))
            .expect("abelian descriptor is valid")
    }

    /// Heisenberg group of dimension `2k + 1` with `[X_i, Y_i] = Z`.
    pub fn heisenberg(k: usize) -> Self {
        assert!(k >= 1, "Heisenberg group needs k >= 1");
        let constants = (0..k).map(|i| StructureConstant { i, j: k + i, k: 2 * k, value: T::one() }).collect();
        Self::with_law(format!("heisenberg-{k}"), vec![2 * k, 1], constants, Some(Law::Heisenberg { k }))
            .expect("Heisenberg descriptor is valid")
    }

    /// Engel group: `[X1, X2] = X3`, `[X1, X3] = X4`, layers `(2, 1, 1)`.
    pub fn engel() -> Self {
        let constants = vec![
            StructureConstant { i: 0, j: 1, k: 2, value: T::one() },
            StructureConstant { i: 0, j: 2, k: 3, value: T::one() },
        ];
        Self::with_law("engel".into(), vec![2, 1, 1], constants, None).expect("Engel descriptor is valid")
    }

    pub fn name(&self) -> &str {
        &self.inner.name
    }

    pub fn law(&self) -> Law {
        self.inner.law
    }

    pub fn step(&self) -> usize {
        self.inner.layer_dims.len()
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.inner.layer_dims
    }

    /// Topological dimension `N`.
    pub fn dim(&self) -> usize {
        self.inner.layer_of.len()
    }

    /// Dimension `n` of the horizontal layer.
    pub fn horizontal_dim(&self) -> usize {
        self.inner.layer_dims[0]
    }

    /// Homogeneous dimension `sum_i i * n_i`.
    pub fn homogeneous_dim(&self) -> usize {
        self.inner.layer_dims.iter().enumerate().map(|(i, n)| (i + 1) * n).sum()
    }

    /// Zero-based layer of a basis index.
    pub fn layer_of(&self, index: usize) -> usize {
        self.inner.layer_of[index]
    }

    /// Basis indices of a zero-based layer.
    pub fn layer_range(&self, layer: usize) -> std::ops::Range<usize> {
        let start = self.inner.offsets[layer];
        start..start + self.inner.layer_dims[layer]
    }

    /// Growth constants `a_i` with `|x_i| <= a_i d_cc(0, x)^i` per layer.
    pub fn layer_bounds(&self) -> &[f64] {
        self.inner.layer_bounds.get_or_init(|| crate::metric::layer_bounds(self))
    }

    pub fn structure_constants(&self) -> &[StructureConstant<T>] {
        &self.inner.brackets
    }

    /// Coefficient `c^k_{ij}`.
    pub fn structure_constant(&self, i: usize, j: usize, k: usize) -> T {
        self.inner
            .brackets
            .iter()
            .find(|c| c.i == i && c.j == j && c.k == k)
            .map_or_else(T::zero, |c| c.value)
    }

    pub fn identity(&self) -> Point<T> {
        Point::zeros(self.dim())
    }

    pub fn check(&self, p: &Point<T>) -> Result<(), GroupError> {
        if p.dim() == self.dim() {
            Ok(())
        } else {
            Err(GroupError::Dimension { expected: self.dim(), got: p.dim() })
        }
    }

    /// Basis vector `X_j` of the horizontal layer scaled by `t`.
    pub fn horizontal(&self, j: usize, t: T) -> Point<T> {
        let mut p = self.identity();
        p.coords[j] = t;
        p
    }

    /// Point with the given horizontal part and zero higher layers.
    pub fn horizontal_point(&self, h: &[T]) -> Point<T> {
        assert_eq!(h.len(), self.horizontal_dim());
        let mut p = self.identity();
        p.coords[..h.len()].copy_from_slice(h);
        p
    }

    pub fn layer<'a>(&self, p: &'a Point<T>, layer: usize) -> &'a [T] {
        &p.coords[self.layer_range(layer)]
    }

    pub fn graded(&self, p: &Point<T>) -> GradedVector<T> {
        GradedVector { layers: (0..self.step()).map(|l| self.layer(p, l).to_vec()).collect() }
    }

    /// Lie bracket of two algebra elements in graded coordinates.
    pub fn bracket(&self, a: &[T], b: &[T]) -> SmallVec<[T; 8]> {
        let mut out: SmallVec<[T; 8]> = SmallVec::from_elem(T::zero(), self.dim());
        for c in &self.inner.brackets {
            let ai = a[c.i];
            let bj = b[c.j];
            if ai != T::zero() && bj != T::zero() {
                out[c.k] = out[c.k] + c.value * ai * bj;
            }
        }
        out
    }

    /// Group product `a * b`.
    pub fn multiply(&self, a: &Point<T>, b: &Point<T>) -> Point<T> {
        debug_assert_eq!(a.dim(), self.dim());
        debug_assert_eq!(b.dim(), self.dim());
        match self.inner.law {
            Law::Abelian => Point { coords: a.coords.iter().zip(&b.coords).map(|(&x, &y)| x + y).collect() },
            Law::Heisenberg { k } => {
                let (x, y) = (&a.coords, &b.coords);
                let mut out: SmallVec<[T; 8]> = x.iter().zip(y).map(|(&p, &q)| p + q).collect();
                let mut area = T::zero();
                for i in 0..k {
                    area = area + x[i] * y[k + i] - y[i] * x[k + i];
                }
                out[2 * k] = out[2 * k] + area / int(2);
                Point { coords: out }
            }
            Law::Bch => self.bch(a, b),
        }
    }

    /// BCH product through degree three; exact for step at most three.
    pub fn bch(&self, a: &Point<T>, b: &Point<T>) -> Point<T> {
        let n = self.dim();
        let mut out: SmallVec<[T; 8]> = a.coords.iter().zip(&b.coords).map(|(&x, &y)| x + y).collect();
        if self.step() >= 2 {
            let ab = self.bracket(&a.coords, &b.coords);
            let half = T::one() / int(2);
            for k in 0..n {
                out[k] = out[k] + half * ab[k];
            }
            if self.step() >= 3 {
                let aab = self.bracket(&a.coords, &ab);
                let bab = self.bracket(&b.coords, &ab);
                let twelfth = T::one() / int(12);
                for k in 0..n {
                    out[k] = out[k] + twelfth * (aab[k] - bab[k]);
                }
            }
        }
        Point { coords: out }
    }

    pub fn inverse(&self, a: &Point<T>) -> Point<T> {
        Point { coords: a.coords.iter().map(|&x| -x).collect() }
    }

    /// `a^{-1} * b`, the left-invariant displacement from `a` to `b`.
    pub fn between(&self, a: &Point<T>, b: &Point<T>) -> Point<T> {
        self.multiply(&self.inverse(a), b)
    }

    /// Dilation, layer `i` (one-based) scaled by `lambda^i`.
    pub fn dilate(&self, lambda: T, a: &Point<T>) -> Point<T> {
        let mut out = a.clone();
        let mut factor = T::one();
        for layer in 0..self.step() {
            factor = factor * lambda;
            for idx in self.layer_range(layer) {
                out.coords[idx] = out.coords[idx] * factor;
            }
        }
        out
    }

    /// `exp(t X_j)(x) = x * exp(t X_j)`; the fields are left invariant.
    pub fn flow(&self, j: usize, t: T, x: &Point<T>) -> Point<T> {
        self.multiply(x, &self.horizontal(j, t))
    }

    /// Projection onto the hyperplane `{x_j = 0}` along the integral line of `X_j`.
    pub fn project_to_hyperplane(&self, j: usize, x: &Point<T>) -> Point<T> {
        self.flow(j, -x.coords[j], x)
    }
}

impl<T: Real> Group<T> {
    /// Calibration data; built-ins carry exact or cached values, other
    /// descriptors are calibrated by Monte Carlo on first use.
    pub fn calibration(&self) -> &Calibration {
        self.inner.calibration.get_or_init(|| crate::metric::calibrate(self, &crate::metric::CalibrationOptions::for_group(self)))
    }

    /// Calibration data if it has been computed or installed already.
    pub fn calibration_if_ready(&self) -> Option<&Calibration> {
        self.inner.calibration.get()
    }

    /// Installs calibration data (e.g. loaded from a descriptor file).
    /// Returns `false` when the group was already calibrated.
    pub fn set_calibration(&self, c: Calibration) -> bool {
        self.inner.calibration.set(c).is_ok()
    }

    /// `c_G` with normalized measure `= c_G * Lebesgue`.
    pub fn measure_norm(&self) -> T {
        lit(self.calibration().measure_norm)
    }

    /// Exponential coordinates converted to another real type.
    pub fn cast<U: Real>(&self) -> Group<U> {
        let constants = self
            .inner
            .brackets
            .iter()
            .map(|c| StructureConstant { i: c.i, j: c.j, k: c.k, value: lit::<U>(to_f64(c.value)) })
            .collect();
        let g = Group::with_law(self.inner.name.clone(), self.inner.layer_dims.clone(), constants, Some(self.inner.law))
            .expect("cast of a valid descriptor");
        if let Some(c) = self.inner.calibration.get() {
            g.set_calibration(c.clone());
        }
        g
    }
}

/// A coordinate box `[lo, hi]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CoordBox<T> {
    pub lo: Vec<T>,
    pub hi: Vec<T>,
}

impl<T: Real> CoordBox<T> {
    pub fn new(lo: Vec<T>, hi: Vec<T>) -> Self {
        assert_eq!(lo.len(), hi.len());
        Self { lo, hi }
    }

    /// Box centered at `c` with per-coordinate half widths.
    pub fn centered(c: &[T], half: &[T]) -> Self {
        Self {
            lo: c.iter().zip(half).map(|(&c, &h)| c - h).collect(),
            hi: c.iter().zip(half).map(|(&c, &h)| c + h).collect(),
        }
    }

    pub fn volume(&self) -> T {
        self.lo.iter().zip(&self.hi).map(|(&l, &h)| (h - l).max(T::zero())).fold(T::one(), |a, b| a * b)
    }

    pub fn contains_point(&self, x: &Point<T>) -> bool {
        x.coords().iter().zip(self.lo.iter().zip(&self.hi)).all(|(&v, (&l, &h))| v >= l && v <= h)
    }

    pub fn sample(&self, rng: &mut mc::Rng) -> Point<T> {
        Point::new(self.lo.iter().zip(&self.hi).map(|(&l, &h)| {
            let u: f64 = rng.gen();
            l + (h - l) * lit(u)
        }))
    }

    pub fn union(&self, other: &Self) -> Self {
        Self {
            lo: self.lo.iter().zip(&other.lo).map(|(&a, &b)| a.min(b)).collect(),
            hi: self.hi.iter().zip(&other.hi).map(|(&a, &b)| a.max(b)).collect(),
        }
    }
}

/// A region described by an indicator and a bounding coordinate box.
pub trait Region<T: Real>: Sync {
    fn contains(&self, x: &Point<T>) -> bool;
    /// `None` for unbounded regions.
    fn bounding_box(&self) -> Option<CoordBox<T>>;
}

impl<T: Real> Region<T> for CoordBox<T> {
    fn contains(&self, x: &Point<T>) -> bool {
        self.contains_point(x)
    }
    fn bounding_box(&self) -> Option<CoordBox<T>> {
        Some(self.clone())
    }
}

/// `Region` from a closure and a box.
pub struct IndicatorRegion<T, F> {
    pub indicator: F,
    pub bbox: Option<CoordBox<T>>,
}

impl<T: Real, F: Fn(&Point<T>) -> bool + Sync> Region<T> for IndicatorRegion<T, F> {
    fn contains(&self, x: &Point<T>) -> bool {
        (self.indicator)(x)
    }
    fn bounding_box(&self) -> Option<CoordBox<T>> {
        self.bbox.clone()
    }
}

/// Image of a region under `delta_lambda`.
pub struct Dilated<'a, T: Real> {
    pub group: &'a Group<T>,
    pub lambda: T,
    pub region: &'a dyn Region<T>,
}

impl<T: Real> Region<T> for Dilated<'_, T> {
    fn contains(&self, x: &Point<T>) -> bool {
        self.region.contains(&self.group.dilate(T::one() / self.lambda, x))
    }
    fn bounding_box(&self) -> Option<CoordBox<T>> {
        let b = self.region.bounding_box()?;
        let lo = Point::new(b.lo.clone());
        let hi = Point::new(b.hi.clone());
        Some(CoordBox::new(
            self.group.dilate(self.lambda, &lo).coords().to_vec(),
            self.group.dilate(self.lambda, &hi).coords().to_vec(),
        ))
    }
}

/// Image of a region under left translation `x -> g x`.
pub struct Translated<'a, T: Real> {
    pub group: &'a Group<T>,
    pub by: Point<T>,
    pub region: &'a dyn Region<T>,
}

impl<T: Real> Region<T> for Translated<'_, T> {
    fn contains(&self, x: &Point<T>) -> bool {
        self.region.contains(&self.group.between(&self.by, x))
    }
    fn bounding_box(&self) -> Option<CoordBox<T>> {
        Some(translate_box(self.group, &self.by, &self.region.bounding_box()?))
    }
}

#[derive(Clone, Copy, Debug)]
struct Interval<T> {
    lo: T,
    hi: T,
}

impl<T: Real> Interval<T> {
    fn point(v: T) -> Self {
        Self { lo: v, hi: v }
    }
    fn add(self, o: Self) -> Self {
        Self { lo: self.lo + o.lo, hi: self.hi + o.hi }
    }
    fn sub(self, o: Self) -> Self {
        Self { lo: self.lo - o.hi, hi: self.hi - o.lo }
    }
    fn mul(self, o: Self) -> Self {
        let c = [self.lo * o.lo, self.lo * o.hi, self.hi * o.lo, self.hi * o.hi];
        Self {
            lo: c.iter().copied().fold(T::infinity(), T::min),
            hi: c.iter().copied().fold(T::neg_infinity(), T::max),
        }
    }
    fn scale(self, s: T) -> Self {
        self.mul(Self::point(s))
    }
}

fn interval_bracket<T: Real>(g: &Group<T>, a: &[Interval<T>], b: &[Interval<T>]) -> Vec<Interval<T>> {
    let mut out = vec![Interval::point(T::zero()); g.dim()];
    for c in g.structure_constants() {
        out[c.k] = out[c.k].add(a[c.i].mul(b[c.j]).scale(c.value));
    }
    out
}

/// Bounding box of `g * B` by interval evaluation of the BCH product.
pub fn translate_box<T: Real>(group: &Group<T>, by: &Point<T>, b: &CoordBox<T>) -> CoordBox<T> {
    let a: Vec<Interval<T>> = by.coords().iter().map(|&v| Interval::point(v)).collect();
    let x: Vec<Interval<T>> = b.lo.iter().zip(&b.hi).map(|(&lo, &hi)| Interval { lo, hi }).collect();
    let mut out: Vec<Interval<T>> = a.iter().zip(&x).map(|(p, q)| p.add(*q)).collect();
    if group.step() >= 2 {
        let ax = interval_bracket(group, &a, &x);
        for k in 0..out.len() {
            out[k] = out[k].add(ax[k].scale(lit(0.5)));
        }
        if group.step() >= 3 {
            let aax = interval_bracket(group, &a, &ax);
            let xax = interval_bracket(group, &x, &ax);
            for k in 0..out.len() {
                out[k] = out[k].add(aax[k].sub(xax[k]).scale(lit(1.0 / 12.0)));
            }
        }
    }
    CoordBox::new(out.iter().map(|i| i.lo).collect(), out.iter().map(|i| i.hi).collect())
}

/// Normalized Haar measure of a bounded region by rejection sampling in
/// its bounding box. Deterministic for a fixed seed.
pub fn measure<T: Real>(
    group: &Group<T>,
    region: &dyn Region<T>,
    samples: usize,
    seed: u64,
) -> Result<Estimate<T>, GroupError> {
    Ok(lebesgue_volume(region, samples, seed)?.scale_by(group.measure_norm()))
}

/// Lebesgue volume of a bounded region by rejection sampling.
pub fn lebesgue_volume<T: Real>(region: &dyn Region<T>, samples: usize, seed: u64) -> Result<Estimate<T>, GroupError> {
    let bbox = region.bounding_box().ok_or(GroupError::Unbounded)?;
    let hits: Vec<T> = mc::generate(samples, seed, |rng| {
        if region.contains(&bbox.sample(rng)) {
            T::one()
        } else {
            T::zero()
        }
    });
    let m: Moments<T> = mc::moments(&hits, |&h| h);
    Ok(m.scaled(bbox.volume()))
}

impl<T: Real> Estimate<T> {
    pub fn scale_by(self, s: T) -> Self {
        Estimate { value: self.value * s, std_error: self.std_error * s.abs(), samples: self.samples }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_rational::Ratio;

    type Q = Ratio<i64>;

    fn q(n: i64) -> Q {
        Ratio::from_integer(n)
    }

    #[test]
    fn heisenberg_product_examples() {
        let h = Group::<f64>::heisenberg(1);
        let p = h.multiply(&Point::from([1.0, 0.0, 0.0]), &Point::from([0.0, 1.0, 0.0]));
        assert_eq!(p.coords(), &[1.0, 1.0, 0.5]);
        let a = Point::from([1.0, 0.0, 0.0]);
        assert!(h.multiply(&a, &Point::from([-1.0, 0.0, 0.0])).is_identity());
        assert_eq!(h.multiply(&a, &h.identity()), a);
    }

    #[test]
    fn bch_agrees_with_heisenberg_closed_form() {
        let h = Group::<Q>::heisenberg(2);
        let a = Point::new([q(1), q(-2), q(3), q(5), q(7)]);
        let b = Point::new([q(-4), q(2), q(1), q(0), q(-1)]);
        assert_eq!(h.multiply(&a, &b), h.bch(&a, &b));
    }

    #[test]
    fn inverse_and_dilation_examples() {
        let h = Group::<f64>::heisenberg(1);
        assert_eq!(h.inverse(&Point::from([1.0, 2.0, 3.0])).coords(), &[-1.0, -2.0, -3.0]);
        assert!(h.inverse(&h.identity()).coords().iter().all(|&c| c == 0.0));
        assert_eq!(h.dilate(2.0, &Point::from([1.0, 1.0, 1.0])).coords(), &[2.0, 2.0, 4.0]);
        let a = Point::from([0.3, -0.2, 0.9]);
        assert_eq!(h.dilate(1.0, &a), a);
    }

    #[test]
    fn flow_examples() {
        let h = Group::<f64>::heisenberg(1);
        assert_eq!(h.flow(0, 0.7, &h.identity()).coords(), &[0.7, 0.0, 0.0]);
        assert_eq!(h.flow(1, 1.0, &Point::from([1.0, 0.0, 0.0])).coords(), &[1.0, 1.0, 0.5]);
        let x = Point::from([0.1, 0.2, 0.3]);
        let p = h.project_to_hyperplane(0, &x);
        assert_eq!(p.coords()[0], 0.0);
        assert!(h.flow(0, 0.1, &p).max_abs_diff(&x) < 1e-15);
    }

    #[test]
    fn engel_is_step_three_and_exact_over_rationals() {
        let e = Group::<Q>::engel();
        assert_eq!(e.step(), 3);
        assert_eq!(e.homogeneous_dim(), 2 + 2 + 3);
        let a = Point::new([q(1), q(2), q(-1), q(3)]);
        let b = Point::new([q(-2), q(1), q(4), q(0)]);
        let c = Point::new([q(0), q(-3), q(1), q(1)]);
        let left = e.multiply(&e.multiply(&a, &b), &c);
        let right = e.multiply(&a, &e.multiply(&b, &c));
        assert_eq!(left, right);
        assert!(e.multiply(&a, &e.inverse(&a)).is_identity());
    }

    #[test]
    fn descriptor_validation() {
        let bad_jacobi = Group::<f64>::new(
            "bad",
            vec![3, 1],
            vec![StructureConstant { i: 0, j: 1, k: 3, value: 1.0 }, StructureConstant { i: 1, j: 0, k: 3, value: 0.5 }],
        );
        assert!(matches!(bad_jacobi, Err(GroupError::Antisymmetry { .. })));
        let grading = Group::<f64>::new("g", vec![2, 1], vec![StructureConstant { i: 0, j: 2, k: 1, value: 1.0 }]);
        assert!(matches!(grading, Err(GroupError::Grading { .. })));
        let step4 = Group::<f64>::new("s4", vec![2, 1, 1, 1], vec![]);
        assert!(matches!(step4, Err(GroupError::UnsupportedStep(4))));
        let unstratified = Group::<f64>::new("u", vec![2, 1], vec![]);
        assert!(matches!(unstratified, Err(GroupError::NotStratified { .. })));
        let out = Group::<f64>::new("o", vec![2, 1], vec![StructureConstant { i: 0, j: 5, k: 2, value: 1.0 }]);
        assert!(matches!(out, Err(GroupError::IndexOutOfRange { .. })));
        assert!(matches!(Group::<f64>::new("e", vec![], vec![]), Err(GroupError::BadLayers(_))));
    }

    #[test]
    fn jacobi_violation_detected() {
        // Step three with [X1,X2]=X3, [X1,X3]=X4, [X2,X3]=X4 is a valid
        // algebra; breaking it needs a bracket that fails Jacobi, e.g. two
        // layer-two generators with inconsistent brackets.
        let c = |i, j, k, v| StructureConstant { i, j, k, value: v };
        let ok = Group::<f64>::new("ok", vec![2, 1, 1], vec![c(0, 1, 2, 1.0), c(0, 2, 3, 1.0), c(1, 2, 3, 1.0)]);
        assert!(ok.is_ok());
        let bad = Group::<f64>::new(
            "bad",
            vec![3, 3, 1],
            vec![c(0, 1, 3, 1.0), c(0, 2, 4, 1.0), c(1, 2, 5, 1.0), c(0, 5, 6, 1.0), c(1, 4, 6, 1.0), c(2, 3, 6, 1.0)],
        );
        assert!(matches!(bad, Err(GroupError::Jacobi { .. })), "{bad:?}");
    }

    #[test]
    fn homogeneous_dimensions() {
        assert_eq!(Group::<f64>::heisenberg(1).homogeneous_dim(), 4);
        assert_eq!(Group::<f64>::heisenberg(3).homogeneous_dim(), 8);
        assert_eq!(Group::<f64>::abelian(5).homogeneous_dim(), 5);
    }

    #[test]
    fn translated_box_contains_translated_points() {
        let g = Group::<f64>::engel();
        let b = CoordBox::new(vec![-1.0, -0.5, -0.2, -0.1], vec![1.0, 0.5, 0.3, 0.2]);
        let by = Point::from([0.4, -0.3, 0.2, 0.5]);
        let tb = translate_box(&g, &by, &b);
        let mut rng = mc::chunk_rng(1, 0);
        for _ in 0..2000 {
            let x = b.sample(&mut rng);
            assert!(tb.contains_point(&g.multiply(&by, &x)));
        }
    }
}
