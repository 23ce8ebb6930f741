//! Deterministic Monte Carlo plumbing.
//!
//! Randomness is counter based: work is cut into fixed chunks and chunk `k`
//! draws from ChaCha stream `k` of the run seed. Reductions are performed
//! per chunk and then folded in chunk order, so results do not depend on
//! how many worker threads rayon happens to use.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::scalar::{lit, to_f64, Real};

/// Items per chunk for both generation and reduction.
pub const CHUNK: usize = 1024;

pub type Rng = ChaCha8Rng;

pub fn chunk_rng(seed: u64, chunk: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chunk);
    rng
}

/// Draws `n` items, chunk `k` using stream `k`.
pub fn generate<R, F>(n: usize, seed: u64, draw: F) -> Vec<R>
where
    R: Send,
    F: Fn(&mut Rng) -> R + Sync,
{
    let chunks = n.div_ceil(CHUNK);
    let parts: Vec<Vec<R>> = (0..chunks)
        .into_par_iter()
        .map(|k| {
            let mut rng = chunk_rng(seed, k as u64);
            let len = CHUNK.min(n - k * CHUNK);
            (0..len).map(|_| draw(&mut rng)).collect()
        })
        .collect();
    parts.into_iter().flatten().collect()
}

/// Parallel fold over `items` whose chunk partials are merged in order.
pub fn fold_chunks<X, A, I, F, M>(items: &[X], init: I, fold: F, merge: M) -> A
where
    X: Sync,
    A: Send,
    I: Fn() -> A + Sync,
    F: Fn(&mut A, &X) + Sync,
    M: Fn(&mut A, A),
{
    let partials: Vec<A> = items
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut acc = init();
            for x in chunk {
                fold(&mut acc, x);
            }
            acc
        })
        .collect();
    let mut total = init();
    for p in partials {
        merge(&mut total, p);
    }
    total
}

/// Running first and second moments.
#[derive(Clone, Copy, Debug, Default)]
pub struct Moments<T> {
    pub count: usize,
    pub sum: T,
    pub sum_sq: T,
    pub max: T,
}

impl<T: Real> Moments<T> {
    pub fn new() -> Self {
        Self { count: 0, sum: T::zero(), sum_sq: T::zero(), max: T::neg_infinity() }
    }

    pub fn push(&mut self, x: T) {
        self.count += 1;
        self.sum = self.sum + x;
        self.sum_sq = self.sum_sq + x * x;
        self.max = self.max.max(x);
    }

    pub fn merge(&mut self, other: Self) {
        self.count += other.count;
        self.sum = self.sum + other.sum;
        self.sum_sq = self.sum_sq + other.sum_sq;
        self.max = self.max.max(other.max);
    }

    pub fn mean(&self) -> T {
        if self.count == 0 {
            T::zero()
        } else {
            self.sum / lit(self.count as f64)
        }
    }

    /// Standard error of the mean.
    pub fn std_error(&self) -> T {
        if self.count < 2 {
            return T::zero();
        }
        let n: T = lit(self.count as f64);
        let mean = self.mean();
        let var = ((self.sum_sq / n - mean * mean) * n / (n - T::one())).max(T::zero());
        (var / n).sqrt()
    }

    /// `scale * mean` with its standard error.
    pub fn scaled(&self, scale: T) -> Estimate<T> {
        Estimate { value: scale * self.mean(), std_error: scale.abs() * self.std_error(), samples: self.count }
    }
}

/// Sum and moments of `f` over `items`, deterministic in chunk order.
pub fn moments<X, T, F>(items: &[X], f: F) -> Moments<T>
where
    X: Sync,
    T: Real,
    F: Fn(&X) -> T + Sync,
{
    fold_chunks(items, Moments::new, |m, x| m.push(f(x)), |a, b| a.merge(b))
}

/// A Monte Carlo estimate with its standard error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Estimate<T> {
    pub value: T,
    pub std_error: T,
    pub samples: usize,
}

impl<T: Real> Estimate<T> {
    pub fn exact(value: T) -> Self {
        Self { value, std_error: T::zero(), samples: 0 }
    }

    /// True when `other` lies within `k` combined standard errors.
    pub fn agrees_with(&self, other: T, k: T) -> bool {
        (self.value - other).abs() <= k * self.std_error
    }

    pub fn report(&self) -> EstimateReport {
        EstimateReport { value: to_f64(self.value), std_error: to_f64(self.std_error), samples: self.samples }
    }
}

#[derive(Clone, Copy, Debug, Serialize, PartialEq)]
pub struct EstimateReport {
    pub value: f64,
    pub std_error: f64,
    pub samples: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    #[test]
    fn generation_is_thread_count_independent() {
        let draw = |r: &mut Rng| r.gen::<f64>();
        let a = generate(5000, 7, draw);
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| generate(5000, 7, draw));
        assert_eq!(a, b);
        let c = generate(5000, 8, draw);
        assert_ne!(a, c);
    }

    #[test]
    fn moments_of_constant() {
        let xs = vec![2.0f64; 3000];
        let m = moments(&xs, |&x| x);
        assert_eq!(m.mean(), 2.0);
        assert_eq!(m.std_error(), 0.0);
        assert_eq!(m.max, 2.0);
        assert_eq!(m.count, 3000);
    }

    #[test]
    fn prefix_of_larger_run_matches() {
        let draw = |r: &mut Rng| r.gen::<u32>();
        let small = generate(1500, 3, draw);
        let large = generate(4000, 3, draw);
        assert_eq!(&large[..1024], &small[..1024]);
    }
}
