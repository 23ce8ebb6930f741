//! Carnot-Caratheodory distance, metric balls and ball sampling.
//!
//! Abelian groups use the Euclidean norm. Heisenberg groups use the
//! geodesic closed form: geodesics from the identity project to circular
//! arcs, and with `w` half the swept angle the ratio `|z| / |h|^2` equals
//! `mu(w) = (2w - sin 2w) / (8 sin^2 w)`, which is increasing on `[0, pi)`.
//! Other groups run a control optimizer over piecewise-constant horizontal
//! controls and report an upper bound, bracketed from below by the layer
//! growth bounds `|x_i| <= a_i d^i`.

use std::num::NonZeroUsize;
use std::sync::OnceLock;

use lru::LruCache;
use parking_lot::Mutex;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use smallvec::SmallVec;
use thiserror::Error;

use crate::group::{translate_box, CoordBox, Group, Law, Point, Region};
use crate::linalg::Matrix;
use crate::mc::{self, Estimate};
use crate::scalar::{lit, to_f64, Real, Scalar};

/// Tolerance of the Heisenberg arc-parameter solve.
pub const GEODESIC_TOLERANCE: f64 = 1e-12;

/// Capacity of the per-group memo of optimizer distances.
pub const DISTANCE_CACHE_CAPACITY: usize = 1 << 20;

/// Ball membership trusts a 16-segment path length beyond this multiple of
/// the radius; such paths are within about 1% of the refined optimum.
pub const COARSE_REJECT_FACTOR: f64 = 1.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("control optimizer did not converge; distance lies in [{lower}, {upper}]")]
    NotConverged { lower: f64, upper: f64 },
}

/// Group constants used for bounding boxes, pruning and normalization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    /// `c_G` with normalized measure `= c_G * Lebesgue`.
    pub measure_norm: f64,
    /// Standard error of `measure_norm` (zero when computed by quadrature).
    pub measure_norm_error: f64,
    /// `a_i` with `|x_i| <= a_i d_cc(0, x)^i` for every layer `i`; the unit
    /// ball lies in the box with these half widths per layer.
    pub layer_bounds: Vec<f64>,
    /// Sampled `min d_cc / box_norm`.
    pub c1: f64,
    /// Sampled `max d_cc / box_norm`.
    pub c2: f64,
    /// Samples used for `c1` and `c2`.
    pub equivalence_samples: usize,
    /// How `measure_norm` was obtained.
    pub method: String,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationOptions {
    /// Monte Carlo samples for the unit-ball volume when no closed form applies.
    pub volume_samples: usize,
    /// Samples for the box-norm equivalence constants.
    pub equivalence_samples: usize,
    pub seed: u64,
}

impl CalibrationOptions {
    /// Defaults by law: full sample counts for closed-form distances,
    /// reduced counts where every distance is an optimizer run.
    pub fn for_group<T: Real>(g: &Group<T>) -> Self {
        match g.law() {
            Law::Abelian | Law::Heisenberg { .. } => {
                Self { volume_samples: 1_000_000, equivalence_samples: 10_000, seed: 0x5eed }
            }
            Law::Bch => Self { volume_samples: 20_000, equivalence_samples: 500, seed: 0x5eed },
        }
    }
}

/// Volume of the Euclidean unit ball in `R^n`.
pub fn euclidean_ball_volume(n: usize) -> f64 {
    let mut v = [1.0, 2.0];
    for m in 2..=n {
        let next = 2.0 * std::f64::consts::PI / m as f64 * v[m % 2];
        v[m % 2] = next;
    }
    v[n % 2]
}

/// Lebesgue volume of the unit CC ball of `H^k` by quadrature of its
/// boundary profile `rho = sin w / w`, `z = (2w - sin 2w) / (8 w^2)`.
pub fn heisenberg_ball_volume(k: usize) -> f64 {
    use std::f64::consts::PI;
    // Surface area of the unit sphere in R^{2k}: 2 pi^k / (k - 1)!.
    let sphere = 2.0 * PI.powi(k as i32) / (1..k).map(|i| i as f64).product::<f64>();
    let integrand = |w: f64| {
        if w == 0.0 {
            return 0.0;
        }
        let (s, c) = w.sin_cos();
        let rho = s / w;
        let drho = (w * c - s) / (w * w);
        let z = (2.0 * w - (2.0 * w).sin()) / (8.0 * w * w);
        z * rho.powi(2 * k as i32 - 1) * drho.abs()
    };
    // Composite Simpson over w in [0, pi].
    let panels = 20_000;
    let h = PI / panels as f64;
    let mut sum = integrand(0.0) + integrand(PI);
    for i in 1..panels {
        let w = i as f64 * h;
        sum += if i % 2 == 1 { 4.0 } else { 2.0 } * integrand(w);
    }
    2.0 * sphere * sum * h / 3.0
}

/// Bound `beta` with `|[a, b]| <= beta |a| |b|` for `a` in layer `la`, `b` in layer `lb`.
fn bracket_bound<T: Scalar>(g: &Group<T>, la: usize, lb: usize) -> f64 {
    let mut sq = 0.0;
    for c in g.structure_constants() {
        if g.layer_of(c.i) == la && g.layer_of(c.j) == lb {
            sq += to_f64(c.value).powi(2);
        }
    }
    sq.sqrt()
}

/// Layer growth constants `a_i` with `|x_i| <= a_i L^i` at the end of a
/// horizontal curve of length `L` from the identity.
pub(crate) fn layer_bounds<T: Scalar>(g: &Group<T>) -> Vec<f64> {
    match g.law() {
        Law::Abelian => vec![1.0],
        // The z-extent of the unit ball is attained at swept angle pi.
        Law::Heisenberg { .. } => vec![1.0, 1.0 / (2.0 * std::f64::consts::PI)],
        Law::Bch => {
            // Along the path x' = u + [x, u]/2 + [x, [x, u]]/12 with |u| = 1:
            // |x_1| <= s, |x_2| <= b11 s^2 / 4 and
            // |x_3| <= (b12 b11 / 8 + b11 b11' / 12) s^3 / 3.
            let b11 = bracket_bound(g, 0, 0);
            let mut out = vec![1.0];
            if g.step() >= 2 {
                out.push(b11 / 4.0);
            }
            if g.step() >= 3 {
                let b12 = bracket_bound(g, 0, 1);
                out.push(b12 * b11 * (1.0 / 8.0 + 1.0 / 12.0) / 3.0);
            }
            out
        }
    }
}

/// `mu(w) = (2w - sin 2w) / (8 sin^2 w)` and its derivative.
fn mu_and_derivative<T: Real>(w: T) -> (T, T) {
    let n = two_w_minus_sin(w);
    let (s, c) = w.sin_cos();
    let eight: T = lit(8.0);
    let mu = n / (eight * s * s);
    let dmu = lit::<T>(0.5) - n * c / (lit::<T>(4.0) * s * s * s);
    (mu, dmu)
}

/// `2w - sin 2w` without cancellation for small `w`.
fn two_w_minus_sin<T: Real>(w: T) -> T {
    if w < lit(0.25) {
        // sum_{n>=1} (-1)^{n+1} (2w)^{2n+1} / (2n+1)!
        let x = w + w;
        let x2 = x * x;
        let mut term = x * x2 / lit(6.0);
        let mut sum = term;
        for n in 2..8 {
            let d = (2 * n) as f64 * (2 * n + 1) as f64;
            term = -term * x2 / lit(d);
            sum = sum + term;
        }
        sum
    } else {
        w + w - (w + w).sin()
    }
}

/// Solves `mu(w) = t` on `[0, pi)` by safeguarded Newton.
fn solve_arc_parameter<T: Real>(t: T) -> T {
    let pi: T = lit(std::f64::consts::PI);
    let tol = lit::<T>(GEODESIC_TOLERANCE).max(T::epsilon() * lit(4.0));
    let (mut lo, mut hi) = (T::zero(), pi);
    let mut w = if t < lit(0.1) {
        t * lit(6.0)
    } else {
        // mu(w) ~ pi / (8 (pi - w)^2) near pi.
        (pi - (pi / (lit::<T>(8.0) * t)).sqrt()).max(lit(0.5))
    };
    w = w.min(pi * lit(0.999_999_999)).max(T::zero());
    for _ in 0..200 {
        let (mu, dmu) = mu_and_derivative(w);
        let f = mu - t;
        if f == T::zero() {
            break;
        }
        if f > T::zero() {
            hi = w;
        } else {
            lo = w;
        }
        let mut next = w - f / dmu;
        if !(next > lo && next < hi) || !next.is_finite() {
            next = (lo + hi) / lit(2.0);
        }
        let scale = w.min(pi - w);
        let done = (next - w).abs() <= tol * scale || hi - lo <= tol * scale;
        w = next;
        if done {
            break;
        }
    }
    w
}

/// CC distance from the identity in `H^k`, `p = (x, y, z)`.
pub fn heisenberg_norm<T: Real>(p: &[T]) -> T {
    let (h, z) = p.split_at(p.len() - 1);
    let z = z[0].abs();
    let rho2: T = h.iter().map(|&v| v * v).sum();
    let rho = rho2.sqrt();
    let four_pi_z = lit::<T>(4.0 * std::f64::consts::PI) * z;
    if z == T::zero() {
        return rho;
    }
    if rho2 <= z * lit(1e-14) {
        return (four_pi_z + rho2).sqrt();
    }
    let t = z / rho2;
    let w = solve_arc_parameter(t);
    if w < T::one() {
        if w == T::zero() {
            rho
        } else {
            rho * w / w.sin()
        }
    } else {
        (lit::<T>(8.0) * w * w * z / two_w_minus_sin(w)).sqrt()
    }
}

/// Piecewise-constant horizontal controls on `K` equal subintervals of `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizontalPath<T> {
    /// `K` rows of `n` horizontal control components.
    pub controls: Vec<Vec<T>>,
}

impl<T: Real> HorizontalPath<T> {
    pub fn segments(&self) -> usize {
        self.controls.len()
    }

    /// `int |u(t)| dt = sum |u_k| / K`.
    pub fn length(&self) -> T {
        let k: T = lit(self.controls.len() as f64);
        self.controls.iter().map(|u| u.iter().map(|&v| v * v).sum::<T>().sqrt()).sum::<T>() / k
    }

    /// `int |u(t)|^2 dt`.
    pub fn energy(&self) -> T {
        let k: T = lit(self.controls.len() as f64);
        self.controls.iter().map(|u| u.iter().map(|&v| v * v).sum::<T>()).sum::<T>() / k
    }

    /// Vertices of the path started at `start`, `K + 1` points.
    pub fn vertices(&self, g: &Group<T>, start: &Point<T>) -> Vec<Point<T>> {
        let k: T = lit(self.controls.len() as f64);
        let mut out = Vec::with_capacity(self.controls.len() + 1);
        let mut x = start.clone();
        out.push(x.clone());
        for u in &self.controls {
            let step: Vec<T> = u.iter().map(|&v| v / k).collect();
            x = g.multiply(&x, &g.horizontal_point(&step));
            out.push(x.clone());
        }
        out
    }

    /// Endpoint of the path started at `start`: the composition of the segment flows.
    pub fn endpoint(&self, g: &Group<T>, start: &Point<T>) -> Point<T> {
        self.vertices(g, start).pop().expect("path has a start point")
    }

    /// Same curve with every segment split in two.
    pub fn refined(&self) -> Self {
        Self { controls: self.controls.iter().flat_map(|u| [u.clone(), u.clone()]).collect() }
    }
}

/// Settings of the generic control optimizer.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlOptions {
    pub initial_segments: usize,
    pub max_segments: usize,
    /// Endpoint residual required for a path to count as reaching the target.
    pub endpoint_tolerance: f64,
    /// Relative change in length between refinements that stops refinement.
    pub refinement_tolerance: f64,
    pub max_iterations: usize,
}

impl Default for ControlOptions {
    fn default() -> Self {
        Self {
            initial_segments: 32,
            max_segments: 512,
            endpoint_tolerance: 1e-6,
            refinement_tolerance: 1e-4,
            max_iterations: 60,
        }
    }
}

/// Outcome of a control optimization.
#[derive(Clone, Debug)]
pub struct ControlSolution<T> {
    pub path: HorizontalPath<T>,
    /// Length of the best path, an upper bound for the distance.
    pub upper: T,
    /// Certified lower bound from the layer growth constants.
    pub lower: T,
    pub endpoint_error: T,
}

fn flatten<T: Copy>(p: &HorizontalPath<T>) -> Vec<T> {
    p.controls.iter().flatten().copied().collect()
}

fn unflatten<T: Copy>(v: &[T], n: usize) -> HorizontalPath<T> {
    HorizontalPath { controls: v.chunks(n).map(|c| c.to_vec()).collect() }
}

fn residual<T: Real>(g: &Group<T>, path: &HorizontalPath<T>, target: &Point<T>) -> Vec<T> {
    let e = path.endpoint(g, &g.identity());
    e.coords().iter().zip(target.coords()).map(|(&a, &b)| a - b).collect()
}

fn norm<T: Real>(v: &[T]) -> T {
    v.iter().map(|&x| x * x).sum::<T>().sqrt()
}

/// `a + s b` on coordinate slices.
fn axpy<T: Real>(a: &[T], s: T, b: &[T]) -> SmallVec<[T; 8]> {
    a.iter().zip(b).map(|(&x, &y)| x + s * y).collect()
}

/// Exact Jacobian of the endpoint map with respect to the controls.
///
/// With suffix products `R_k`, perturbing segment `k` by `w` moves the
/// endpoint `E` to `E exp(e Ad_{R_k^{-1}} dexp_{v_k} w)`, and the logarithm
/// of `E exp(e z)` moves by `z + [E, z]/2 + [E, [E, z]]/12`. Every series
/// terminates at step three.
fn endpoint_jacobian<T: Real>(g: &Group<T>, path: &HorizontalPath<T>) -> Matrix<f64> {
    let k = path.segments();
    let n = g.horizontal_dim();
    let inv_k = T::one() / lit(k as f64);
    let steps: Vec<Point<T>> =
        path.controls.iter().map(|u| g.horizontal_point(&u.iter().map(|&c| c * inv_k).collect::<Vec<_>>())).collect();
    let mut suffix = vec![g.identity(); k + 1];
    for i in (0..k).rev() {
        suffix[i] = g.multiply(&steps[i], &suffix[i + 1]);
    }
    let e = suffix[0].coords().to_vec();
    let half: T = lit(0.5);
    let mut jac = Matrix::<f64>::zeros(g.dim(), k * n);
    for (i, v) in steps.iter().enumerate() {
        let r = suffix[i + 1].coords();
        for j in 0..n {
            let mut w = vec![T::zero(); g.dim()];
            w[j] = inv_k;
            // dexp: w - [v, w]/2 + [v, [v, w]]/6
            let vw = g.bracket(v.coords(), &w);
            let vvw = g.bracket(v.coords(), &vw);
            let mut eta = axpy(&w, -half, &vw);
            eta = axpy(&eta, lit(1.0 / 6.0), &vvw);
            // Ad_{exp(-r)}: eta - [r, eta] + [r, [r, eta]]/2
            let re = g.bracket(r, &eta);
            let rre = g.bracket(r, &re);
            let mut zeta = axpy(&eta, -T::one(), &re);
            zeta = axpy(&zeta, half, &rre);
            // d log(E exp(z)): z + [E, z]/2 + [E, [E, z]]/12
            let ez = g.bracket(&e, &zeta);
            let eez = g.bracket(&e, &ez);
            let mut col = axpy(&zeta, half, &ez);
            col = axpy(&col, lit(1.0 / 12.0), &eez);
            for (row, &c) in col.iter().enumerate() {
                jac[(row, i * n + j)] = to_f64(c);
            }
        }
    }
    jac
}

/// Damped minimum-norm Gauss-Newton on `min energy s.t. endpoint = target`.
fn solve_controls<T: Real>(
    g: &Group<T>,
    start: HorizontalPath<T>,
    target: &Point<T>,
    opts: &ControlOptions,
    scale: T,
) -> (HorizontalPath<T>, T) {
    let n = g.horizontal_dim();
    let mut u = flatten(&start);
    let tol: T = lit::<T>(opts.endpoint_tolerance * 1e-3) * scale.max(lit(1e-300));
    let mut c = residual(g, &unflatten(&u, n), target);
    let mut cn = norm(&c);
    for _ in 0..opts.max_iterations {
        let dim = g.dim();
        let jac = endpoint_jacobian(g, &unflatten(&u, n));
        let uf: Vec<f64> = u.iter().map(|&x| to_f64(x)).collect();
        let cf: Vec<f64> = c.iter().map(|&x| to_f64(x)).collect();
        let ju = jac.mul_vec(&uf);
        let rhs: Vec<f64> = ju.iter().zip(&cf).map(|(a, b)| a - b).collect();
        let mut jjt = jac.matmul(&jac.transpose());
        let eps = 1e-12 * (1.0 + jjt.max_abs());
        for r in 0..dim {
            jjt[(r, r)] += eps;
        }
        let rhs = Matrix::from_rows(&rhs.iter().map(|&v| vec![v]).collect::<Vec<_>>());
        let Some(lambda) = jjt.solve(&rhs) else { break };
        let lambda: Vec<f64> = (0..dim).map(|r| lambda[(r, 0)]).collect();
        let target_u = jac.transpose().mul_vec(&lambda);
        // Backtrack on the residual when far from feasibility.
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let trial: Vec<T> =
                u.iter().zip(&target_u).map(|(&x, &t)| x + lit::<T>(alpha) * (lit::<T>(t) - x)).collect();
            let tc = residual(g, &unflatten(&trial, n), target);
            let tn = norm(&tc);
            if tn.is_finite() && (tn < cn || tn <= tol || cn <= tol * lit(10.0)) {
                u = trial;
                c = tc;
                cn = tn;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            if let Some((trial, tc, tn)) = feasibility_step(g, &jac, &u, &cf, cn, target) {
                u = trial;
                c = tc;
                cn = tn;
                accepted = true;
            }
            if !accepted {
                break;
            }
            continue;
        }
        if cn <= tol && alpha == 1.0 {
            // Converged feasibility with an undamped step: energy is stationary.
            let step: f64 = target_u.iter().zip(&uf).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            if step <= 1e-9 * (1.0 + to_f64(norm(&u))) {
                break;
            }
        }
    }
    // Polish feasibility; Gauss-Newton on the constraints alone converges fast.
    for _ in 0..30 {
        if cn <= tol {
            break;
        }
        let jac = endpoint_jacobian(g, &unflatten(&u, n));
        let cf: Vec<f64> = c.iter().map(|&x| to_f64(x)).collect();
        match feasibility_step(g, &jac, &u, &cf, cn, target) {
            Some((trial, tc, tn)) => {
                u = trial;
                c = tc;
                cn = tn;
            }
            None => break,
        }
    }
    (unflatten(&u, n), cn)
}

/// Levenberg-Marquardt step `-J^T (J J^T + mu I)^{-1} c` that lowers the residual.
fn feasibility_step<T: Real>(
    g: &Group<T>,
    jac: &Matrix<f64>,
    u: &[T],
    c: &[f64],
    cn: T,
    target: &Point<T>,
) -> Option<(Vec<T>, Vec<T>, T)> {
    let n = g.horizontal_dim();
    let dim = g.dim();
    let jjt = jac.matmul(&jac.transpose());
    let mut mu = 1e-10 * (1.0 + jjt.max_abs());
    let rc = Matrix::from_rows(&c.iter().map(|&v| vec![v]).collect::<Vec<_>>());
    for _ in 0..12 {
        let mut m = jjt.clone();
        for r in 0..dim {
            m[(r, r)] += mu;
        }
        if let Some(y) = m.solve(&rc) {
            let y: Vec<f64> = (0..dim).map(|r| y[(r, 0)]).collect();
            let du = jac.transpose().mul_vec(&y);
            let trial: Vec<T> = u.iter().zip(&du).map(|(&x, &d)| x - lit::<T>(d)).collect();
            let tc = residual(g, &unflatten(&trial, n), target);
            let tn = norm(&tc);
            if tn.is_finite() && tn < cn {
                return Some((trial, tc, tn));
            }
        }
        mu *= 10.0;
    }
    None
}

/// Seeded random control paths around the straight horizontal line.
fn random_paths<T: Real>(g: &Group<T>, target: &Point<T>, k: usize, count: usize, amp: f64, seed: u64) -> Vec<HorizontalPath<T>> {
    let h = g.layer(target, 0).to_vec();
    let scale = to_f64(g.box_norm(target)).max(1e-12);
    let mut rng = mc::chunk_rng(seed, 0);
    (0..count)
        .map(|_| HorizontalPath {
            controls: (0..k).map(|_| h.iter().map(|&a| a + lit::<T>(amp * scale * rng.gen_range(-1.0..1.0))).collect()).collect(),
        })
        .collect()
}

fn starting_paths<T: Real>(g: &Group<T>, target: &Point<T>, k: usize) -> Vec<HorizontalPath<T>> {
    let n = g.horizontal_dim();
    let h = g.layer(target, 0).to_vec();
    let scale = to_f64(g.box_norm(target)).max(1e-12);
    let mut starts = Vec::new();
    let line = |t: f64, extra: &dyn Fn(f64) -> Vec<f64>| -> Vec<T> {
        let e = extra(t);
        h.iter().zip(e).map(|(&a, b)| a + lit::<T>(b)).collect()
    };
    let tau = 2.0 * std::f64::consts::PI;
    let planes: Vec<(usize, usize)> =
        (0..n).flat_map(|a| ((a + 1)..n).map(move |b| (a, b))).take(4).collect();
    let mk = |f: &dyn Fn(f64) -> Vec<f64>| HorizontalPath {
        controls: (0..k).map(|i| line((i as f64 + 0.5) / k as f64, f)).collect(),
    };
    starts.push(mk(&|_| vec![0.0; n]));
    for &(a, b) in &planes {
        for sign in [1.0, -1.0] {
            for freq in [1.0, 2.0] {
                let amp = 2.0 * scale;
                starts.push(mk(&|t| {
                    let mut v = vec![0.0; n];
                    v[a] = amp * (freq * tau * t).cos();
                    v[b] = sign * amp * (freq * tau * t).sin();
                    v
                }));
            }
        }
    }
    starts.extend(random_paths(g, target, k, 2, 2.0, 0xc0ffee));
    starts
}

/// Runs the multi-start control optimizer from the identity to `target`.
pub fn control_distance<T: Real>(
    g: &Group<T>,
    target: &Point<T>,
    opts: &ControlOptions,
) -> Result<ControlSolution<T>, MetricError> {
    let lower = g.distance_lower_bound(target);
    if target.is_identity() {
        return Ok(ControlSolution {
            path: HorizontalPath { controls: vec![vec![T::zero(); g.horizontal_dim()]; opts.initial_segments] },
            upper: T::zero(),
            lower: T::zero(),
            endpoint_error: T::zero(),
        });
    }
    let scale = g.box_norm(target).max(lit(1e-300));
    let ok = lit::<T>(opts.endpoint_tolerance) * scale.max(T::one()).min(scale * lit(1e6));
    let mut best: Option<(HorizontalPath<T>, T, T)> = None;
    for start in starting_paths(g, target, opts.initial_segments) {
        let (path, err) = solve_controls(g, start, target, opts, scale);
        if err <= ok {
            let len = path.length();
            if best.as_ref().is_none_or(|b| len < b.1) {
                best = Some((path, len, err));
            }
        }
    }
    if best.is_none() {
        // Harder targets: more seeded restarts at several amplitudes.
        for (i, amp) in [1.0, 4.0, 8.0].into_iter().enumerate() {
            for start in random_paths(g, target, opts.initial_segments, 4, amp, 0xbad5eed + i as u64) {
                let (path, err) = solve_controls(g, start, target, opts, scale);
                if err <= ok {
                    let len = path.length();
                    if best.as_ref().is_none_or(|b| len < b.1) {
                        best = Some((path, len, err));
                    }
                }
            }
        }
    }
    let Some((mut path, mut len, mut err)) = best else {
        return Err(MetricError::NotConverged { lower: to_f64(lower), upper: f64::INFINITY });
    };
    while path.segments() < opts.max_segments {
        let (p2, e2) = solve_controls(g, path.refined(), target, opts, scale);
        if e2 > ok {
            break;
        }
        let l2 = p2.length();
        let change = to_f64((len - l2).abs() / len.max(lit(1e-300)));
        path = p2;
        len = l2.min(len);
        err = e2;
        if change < opts.refinement_tolerance {
            break;
        }
    }
    Ok(ControlSolution { path, upper: len, lower, endpoint_error: err })
}

type CacheKey = SmallVec<[u64; 8]>;

fn distance_cache() -> &'static Mutex<LruCache<CacheKey, f64>> {
    static CACHE: OnceLock<Mutex<LruCache<CacheKey, f64>>> = OnceLock::new();
    CACHE.get_or_init(|| {
        Mutex::new(LruCache::new(NonZeroUsize::new(DISTANCE_CACHE_CAPACITY).expect("nonzero capacity")))
    })
}

fn cache_key<T: Real>(g: &Group<T>, v: &Point<T>) -> CacheKey {
    let mut key: CacheKey = SmallVec::new();
    key.push(g.structure_fingerprint());
    key.extend(v.coords().iter().map(|&c| to_f64(c).to_bits()));
    key
}

impl<T: Real> Group<T> {
    /// `max_{ij} |x_ij|^{1/i}`.
    pub fn box_norm(&self, x: &Point<T>) -> T {
        let mut best = T::zero();
        for layer in 0..self.step() {
            let inv: T = lit(1.0 / (layer + 1) as f64);
            for &c in self.layer(x, layer) {
                best = best.max(c.abs().powf(inv));
            }
        }
        best
    }

    /// `max_i (|x_i| / a_i)^{1/i}`, a lower bound for `d_cc(0, x)`.
    pub fn distance_lower_bound(&self, x: &Point<T>) -> T {
        let bounds = self.layer_bounds();
        let mut best = T::zero();
        for layer in 0..self.step() {
            let n = norm(self.layer(x, layer));
            let a = lit::<T>(bounds[layer]);
            if n > T::zero() {
                best = best.max((n / a).powf(lit(1.0 / (layer + 1) as f64)));
            }
        }
        best
    }

    /// `d_cc(0, x)`; errors only when the generic optimizer fails.
    pub fn try_norm(&self, x: &Point<T>) -> Result<T, MetricError> {
        match self.law() {
            Law::Abelian => Ok(norm(x.coords())),
            Law::Heisenberg { .. } => Ok(heisenberg_norm(x.coords())),
            Law::Bch => {
                if (1..self.step()).all(|l| self.layer(x, l).iter().all(|&c| c == T::zero())) {
                    // Straight horizontal segments are geodesics.
                    return Ok(norm(self.layer(x, 0)));
                }
                let key = cache_key(self, x);
                if let Some(&d) = distance_cache().lock().get(&key) {
                    return Ok(lit(d));
                }
                let sol = control_distance(self, x, &ControlOptions::default())?;
                distance_cache().lock().put(key, to_f64(sol.upper));
                Ok(sol.upper)
            }
        }
    }

    /// `d_cc(0, x)`. For generic groups a failed optimization falls back to
    /// the certified lower bound; use [`Group::try_norm`] to observe failures.
    pub fn norm(&self, x: &Point<T>) -> T {
        self.try_norm(x).unwrap_or_else(|_| self.distance_lower_bound(x))
    }

    /// `d_cc(0, x) < r`, deciding by the certified lower bound and, for
    /// generic groups, by the length of a coarse feasible path before
    /// running the full optimizer. A coarse length above
    /// `COARSE_REJECT_FACTOR * r` rejects without refinement.
    pub fn norm_below(&self, x: &Point<T>, r: T) -> bool {
        if self.distance_lower_bound(x) >= r {
            return false;
        }
        if self.law() == Law::Bch && !x.is_identity() {
            if let Some(&d) = distance_cache().lock().get(&cache_key(self, x)) {
                return lit::<T>(d) < r;
            }
            let coarse = ControlOptions { initial_segments: 16, max_segments: 16, ..ControlOptions::default() };
            if let Ok(s) = control_distance(self, x, &coarse) {
                if s.upper < r {
                    return true;
                }
                if s.upper >= r * lit(COARSE_REJECT_FACTOR) {
                    return false;
                }
            }
        }
        self.norm(x) < r
    }

    /// `d_cc(x, y) = |x^{-1} y|`.
    pub fn try_distance(&self, x: &Point<T>, y: &Point<T>) -> Result<T, MetricError> {
        self.try_norm(&self.between(x, y))
    }

    pub fn distance(&self, x: &Point<T>, y: &Point<T>) -> T {
        self.norm(&self.between(x, y))
    }

    /// Coordinate box containing `B(center, r)`.
    pub fn ball_box(&self, center: &Point<T>, r: T) -> CoordBox<T> {
        let half = self.origin_ball_half_widths(r);
        let zero = vec![T::zero(); self.dim()];
        let b = CoordBox::centered(&zero, &half);
        if center.is_identity() {
            b
        } else {
            translate_box(self, center, &b)
        }
    }

    fn origin_ball_half_widths(&self, r: T) -> Vec<T> {
        let bounds = self.layer_bounds();
        let mut half = Vec::with_capacity(self.dim());
        for layer in 0..self.step() {
            let w = lit::<T>(bounds[layer]) * r.powi(layer as i32 + 1);
            half.extend(std::iter::repeat_n(w, self.layer_dims()[layer]));
        }
        half
    }

    pub fn ball(&self, center: Point<T>, radius: T) -> CcBall<T> {
        CcBall { group: self.clone(), center, radius }
    }

    /// Key identifying the structure constants for memoization.
    pub(crate) fn structure_fingerprint(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        self.layer_dims().hash(&mut h);
        for c in self.structure_constants() {
            (c.i, c.j, c.k, to_f64(c.value).to_bits()).hash(&mut h);
        }
        h.finish()
    }
}

/// Open CC ball `B(center, radius)`.
#[derive(Clone, Debug)]
pub struct CcBall<T> {
    pub group: Group<T>,
    pub center: Point<T>,
    pub radius: T,
}

impl<T: Real> CcBall<T> {
    pub fn contains_point(&self, x: &Point<T>) -> bool {
        let v = self.group.between(&self.center, x);
        self.group.norm_below(&v, self.radius)
    }

    /// Normalized measure `r^nu`.
    pub fn measure(&self) -> T {
        self.radius.powi(self.group.homogeneous_dim() as i32)
    }

    /// `n` points uniform for Haar measure on the ball.
    pub fn sample(&self, n: usize, seed: u64) -> Vec<Point<T>> {
        ball_sample(self, n, seed)
    }
}

impl<T: Real> Region<T> for CcBall<T> {
    fn contains(&self, x: &Point<T>) -> bool {
        self.contains_point(x)
    }
    fn bounding_box(&self) -> Option<CoordBox<T>> {
        Some(self.group.ball_box(&self.center, self.radius))
    }
}

/// `n` i.i.d. Haar-uniform points of `ball` by rejection from the bounding box
/// of the centered ball, left translated to the center. Chunk `k` of the
/// output comes from random stream `k`, so outputs are prefix stable.
pub fn ball_sample<T: Real>(ball: &CcBall<T>, n: usize, seed: u64) -> Vec<Point<T>> {
    let g = &ball.group;
    let zero = vec![T::zero(); g.dim()];
    let bbox = CoordBox::centered(&zero, &g.origin_ball_half_widths(ball.radius));
    let chunks = n.div_ceil(mc::CHUNK);
    let parts: Vec<Vec<Point<T>>> = {
        use rayon::prelude::*;
        (0..chunks)
            .into_par_iter()
            .map(|k| {
                let mut rng = mc::chunk_rng(seed, k as u64);
                let want = mc::CHUNK.min(n - k * mc::CHUNK);
                let mut out = Vec::with_capacity(want);
                while out.len() < want {
                    let v = bbox.sample(&mut rng);
                    if g.norm_below(&v, ball.radius) {
                        out.push(if ball.center.is_identity() { v } else { g.multiply(&ball.center, &v) });
                    }
                }
                out
            })
            .collect()
    };
    parts.into_iter().flatten().collect()
}

/// `n` spread points for nets over `ball`: exact Haar samples when the
/// distance has a closed form, otherwise uniform points of the ball's
/// coordinate box that pass the certified lower-bound test, which avoids an
/// optimizer run per candidate.
pub fn ball_cover_sample<T: Real>(ball: &CcBall<T>, n: usize, seed: u64) -> Vec<Point<T>> {
    let g = &ball.group;
    if g.law() != Law::Bch {
        return ball_sample(ball, n, seed);
    }
    let zero = vec![T::zero(); g.dim()];
    let bbox = CoordBox::centered(&zero, &g.origin_ball_half_widths(ball.radius));
    let mut rng = mc::chunk_rng(seed, 0);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let v = bbox.sample(&mut rng);
        if g.distance_lower_bound(&v) < ball.radius {
            out.push(g.multiply(&ball.center, &v));
        }
    }
    out
}

/// Computes calibration data for a group.
pub fn calibrate<T: Real>(g: &Group<T>, opts: &CalibrationOptions) -> Calibration {
    let bounds = g.layer_bounds().to_vec();
    let (measure_norm, measure_norm_error, method) = match g.law() {
        Law::Abelian => (1.0 / euclidean_ball_volume(g.dim()), 0.0, "closed form".to_string()),
        Law::Heisenberg { k } => (1.0 / heisenberg_ball_volume(k), 0.0, "boundary quadrature".to_string()),
        Law::Bch => {
            let est = unit_ball_volume_mc(g, &bounds, opts.volume_samples, opts.seed);
            let v = to_f64(est.value);
            let se = to_f64(est.std_error);
            (1.0 / v, se / (v * v), format!("monte carlo ({} samples)", opts.volume_samples))
        }
    };
    let (c1, c2) = equivalence_constants_with(g, &bounds, opts.equivalence_samples, opts.seed ^ 0xb0c5);
    Calibration {
        measure_norm,
        measure_norm_error,
        layer_bounds: bounds,
        c1,
        c2,
        equivalence_samples: opts.equivalence_samples,
        method,
        seed: opts.seed,
    }
}

/// Distance from the identity during calibration, before the group's own
/// calibration (and so its lower bound) is available.
fn calibration_norm<T: Real>(g: &Group<T>, bounds: &[f64], x: &Point<T>) -> Option<f64> {
    match g.law() {
        Law::Abelian => Some(to_f64(norm(x.coords()))),
        Law::Heisenberg { .. } => Some(to_f64(heisenberg_norm(x.coords()))),
        Law::Bch => {
            let opts = ControlOptions { initial_segments: 16, max_segments: 64, ..ControlOptions::default() };
            let lb = (0..g.step())
                .map(|l| (to_f64(norm(g.layer(x, l))) / bounds[l]).powf(1.0 / (l + 1) as f64))
                .fold(0.0, f64::max);
            if lb >= 1.0 {
                return Some(lb);
            }
            control_distance_with_bounds(g, x, &opts, lb)
        }
    }
}

fn control_distance_with_bounds<T: Real>(g: &Group<T>, x: &Point<T>, opts: &ControlOptions, lb: f64) -> Option<f64> {
    if (1..g.step()).all(|l| g.layer(x, l).iter().all(|&c| c == T::zero())) {
        return Some(to_f64(norm(g.layer(x, 0))));
    }
    let scale = g.box_norm(x).max(lit(1e-300));
    let ok = lit::<T>(opts.endpoint_tolerance) * scale.max(T::one());
    let mut best: Option<f64> = None;
    for start in starting_paths(g, x, opts.initial_segments) {
        let (path, err) = solve_controls(g, start, x, opts, scale);
        if err <= ok {
            let len = to_f64(path.length()).max(lb);
            best = Some(best.map_or(len, |b: f64| b.min(len)));
        }
    }
    best
}

fn unit_ball_volume_mc<T: Real>(g: &Group<T>, bounds: &[f64], samples: usize, seed: u64) -> Estimate<T> {
    let mut half = Vec::new();
    for (l, &a) in bounds.iter().enumerate() {
        half.extend(std::iter::repeat_n(lit::<T>(a), g.layer_dims()[l]));
    }
    let zero = vec![T::zero(); g.dim()];
    let bbox = CoordBox::centered(&zero, &half);
    let hits: Vec<T> = mc::generate(samples, seed, |rng| {
        let v = bbox.sample(rng);
        match calibration_norm(g, bounds, &v) {
            Some(d) if d < 1.0 => T::one(),
            _ => T::zero(),
        }
    });
    mc::moments(&hits, |&h| h).scaled(bbox.volume())
}

fn equivalence_constants_with<T: Real>(g: &Group<T>, bounds: &[f64], samples: usize, seed: u64) -> (f64, f64) {
    let mut half = Vec::new();
    for (l, &a) in bounds.iter().enumerate() {
        half.extend(std::iter::repeat_n(lit::<T>(a), g.layer_dims()[l]));
    }
    let zero = vec![T::zero(); g.dim()];
    let bbox = CoordBox::centered(&zero, &half);
    let ratios: Vec<Option<f64>> = mc::generate(samples, seed, |rng| {
        let v = bbox.sample(rng);
        let b = to_f64(g.box_norm(&v));
        if b == 0.0 {
            return None;
        }
        calibration_norm(g, bounds, &v).map(|d| d / b)
    });
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for r in ratios.into_iter().flatten() {
        lo = lo.min(r);
        hi = hi.max(r);
    }
    if !lo.is_finite() {
        lo = 0.0;
    }
    (lo, hi)
}

/// Monte Carlo Lebesgue volume of the unit ball with the group's own distance.
pub fn unit_ball_volume<T: Real>(g: &Group<T>, samples: usize, seed: u64) -> Estimate<T> {
    unit_ball_volume_mc(g, g.layer_bounds(), samples, seed)
}

/// Recomputes `c_G` by Monte Carlo, for reproducibility checks.
pub fn calibrate_measure<T: Real>(g: &Group<T>, samples: usize, seed: u64) -> Estimate<T> {
    let v = unit_ball_volume(g, samples, seed);
    let inv = T::one() / v.value;
    Estimate { value: inv, std_error: v.std_error * inv * inv, samples: v.samples }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn euclidean_volumes() {
        assert_relative_eq!(euclidean_ball_volume(1), 2.0);
        assert_relative_eq!(euclidean_ball_volume(2), std::f64::consts::PI, epsilon = 1e-15);
        assert_relative_eq!(euclidean_ball_volume(3), 4.0 / 3.0 * std::f64::consts::PI, epsilon = 1e-14);
    }

    #[test]
    fn heisenberg_volume_constant() {
        assert_relative_eq!(heisenberg_ball_volume(1), 0.825_875_762_209_175, epsilon = 1e-12);
    }

    #[test]
    fn arc_parameter_inverts_mu() {
        for &t in &[1e-9, 1e-4, 0.01, 0.1, 0.5, 1.0, 10.0, 1e4, 1e8] {
            let w: f64 = solve_arc_parameter(t);
            let (mu, _) = mu_and_derivative(w);
            assert_relative_eq!(mu, t, max_relative = 1e-9);
        }
    }

    #[test]
    fn heisenberg_norm_special_cases() {
        let pi = std::f64::consts::PI;
        assert_eq!(heisenberg_norm(&[0.3, 0.4, 0.0]), 0.5);
        assert_relative_eq!(heisenberg_norm(&[0.0, 0.0, 0.7]), 2.0 * (pi * 0.7f64).sqrt(), epsilon = 1e-14);
        // Swept angle pi: rho = 2/pi, z = 1/(2 pi) on the unit sphere.
        assert_relative_eq!(heisenberg_norm(&[2.0 / pi, 0.0, 1.0 / (2.0 * pi)]), 1.0, epsilon = 1e-10);
        // Continuity towards the z-axis.
        let near = heisenberg_norm(&[1e-9, 0.0, 0.7]);
        assert_relative_eq!(near, 2.0 * (pi * 0.7f64).sqrt(), epsilon = 1e-8);
    }

    #[test]
    fn refined_path_has_same_endpoint_and_length() {
        let g = Group::<f64>::heisenberg(1);
        let p = HorizontalPath { controls: vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.5]] };
        let e1 = p.endpoint(&g, &g.identity());
        let r = p.refined();
        assert!(r.endpoint(&g, &g.identity()).max_abs_diff(&e1) < 1e-15);
        assert_relative_eq!(r.length(), p.length(), epsilon = 1e-15);
    }
}

#[cfg(test)]
mod optimizer_tests {
    use super::*;

    #[test]
    fn control_optimizer_matches_heisenberg_closed_form() {
        let g = Group::<f64>::heisenberg(1);
        let opts = ControlOptions::default();
        for p in [[0.0, 0.0, 0.3], [0.5, -0.2, 0.1], [0.1, 0.7, -0.4], [0.8, 0.0, 0.0]] {
            let p = Point::from(p);
            let exact = heisenberg_norm(p.coords());
            let sol = control_distance(&g, &p, &opts).unwrap();
            let rel = (sol.upper - exact) / exact;
            assert!(rel > -1e-6 && rel < 0.01, "{p:?}: {} vs {exact}", sol.upper);
            assert!(sol.lower <= exact * (1.0 + 1e-12));
            assert!(sol.path.endpoint(&g, &g.identity()).max_abs_diff(&p) < 1e-6);
        }
    }

    #[test]
    fn engel_distance_is_bracketed() {
        let g = Group::<f64>::engel();
        let p = Point::from([0.2, 0.1, 0.05, 0.02]);
        let sol = control_distance(&g, &p, &ControlOptions::default()).unwrap();
        assert!(sol.lower <= sol.upper);
        assert!(sol.path.endpoint(&g, &g.identity()).max_abs_diff(&p) < 1e-6);
        let axis = g.distance(&g.identity(), &g.horizontal(0, 0.3));
        assert!((axis - 0.3).abs() < 1e-15);
    }
}

#[cfg(test)]
mod jacobian_tests {
    use super::*;

    #[test]
    fn analytic_jacobian_matches_finite_differences() {
        let g = Group::<f64>::engel();
        let path = HorizontalPath { controls: vec![vec![0.3, -0.2], vec![0.5, 0.1], vec![-0.4, 0.6], vec![0.2, 0.2]] };
        let jac = endpoint_jacobian(&g, &path);
        let h = 1e-6;
        let u = flatten(&path);
        for col in 0..u.len() {
            let mut up = u.clone();
            let mut dn = u.clone();
            up[col] += h;
            dn[col] -= h;
            let ep = unflatten(&up, 2).endpoint(&g, &g.identity());
            let em = unflatten(&dn, 2).endpoint(&g, &g.identity());
            for r in 0..g.dim() {
                let fd = (ep.coords()[r] - em.coords()[r]) / (2.0 * h);
                assert!((fd - jac[(r, col)]).abs() < 1e-8, "({r},{col}): {fd} vs {}", jac[(r, col)]);
            }
        }
    }
}
