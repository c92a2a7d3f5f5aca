//! Dense vector arithmetic and seeded, splittable random streams.
//!
//! Every random draw in the crate goes through [`RngState`]. A state is a
//! `(seed, stream)` pair; child streams are derived by hashing a tag into the
//! stream id, so the batch sampler, the corruption injector and the model
//! initializer never consume from the same generator.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};

pub type RealVector = Vec<f64>;

/// Returns `alpha * x + y`.
pub fn axpy(alpha: f64, x: &[f64], y: &[f64]) -> Result<RealVector> {
    ensure_len(x.len(), y.len())?;
    Ok(x.iter().zip(y).map(|(a, b)| alpha * a + b).collect())
}

/// In-place `y += alpha * x`.
pub fn axpy_in_place(alpha: f64, x: &[f64], y: &mut [f64]) -> Result<()> {
    ensure_len(y.len(), x.len())?;
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
    Ok(())
}

pub fn sub(x: &[f64], y: &[f64]) -> Result<RealVector> {
    ensure_len(x.len(), y.len())?;
    Ok(x.iter().zip(y).map(|(a, b)| a - b).collect())
}

pub fn scale(alpha: f64, x: &[f64]) -> RealVector {
    x.iter().map(|v| alpha * v).collect()
}

pub fn dot(x: &[f64], y: &[f64]) -> Result<f64> {
    ensure_len(x.len(), y.len())?;
    Ok(x.iter().zip(y).map(|(a, b)| a * b).sum())
}

/// Euclidean norm. Fails on NaN or infinite entries.
pub fn norm2(x: &[f64]) -> Result<f64> {
    if let Some(pos) = x.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite entry at index {pos}")));
    }
    Ok(norm2_unchecked(x))
}

pub(crate) fn norm2_unchecked(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn all_finite(x: &[f64]) -> bool {
    x.iter().all(|v| v.is_finite())
}

/// A reproducible random stream identified by `(seed, stream)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
}

/// Stream tags for the independent consumers of randomness.
pub mod streams {
    pub const INIT: u64 = 0x494e_4954;
    pub const BATCH: u64 = 0x4241_5443;
    pub const CORRUPT: u64 = 0x434f_5252;
    pub const DATA: u64 = 0x4441_5441;
    pub const POOL: u64 = 0x504f_4f4c;
    pub const HOLDOUT: u64 = 0x484f_4c44;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self { seed, stream: 0 }
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        Self { seed, stream }
    }

    /// Derives an independent child stream. Same parent and tag always give
    /// the same child.
    pub fn split(&self, tag: u64) -> Self {
        Self {
            seed: self.seed,
            stream: splitmix64(self.stream ^ splitmix64(tag)),
        }
    }

    /// Fresh generator positioned at the start of this stream.
    pub fn generator(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng
    }
}

/// Uniform draw in `[0, 1)` with 53 bits of precision.
pub fn uniform01<R: RngCore>(rng: &mut R) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Box–Muller standard-normal generator over any bit source.
pub struct BoxMuller<R> {
    rng: R,
    spare: Option<f64>,
}

impl<R: RngCore> BoxMuller<R> {
    pub fn new(rng: R) -> Self {
        Self { rng, spare: None }
    }

    pub fn next_standard(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        // 1 - U lies in (0, 1], so the log is finite.
        let u1 = 1.0 - uniform01(&mut self.rng);
        let u2 = uniform01(&mut self.rng);
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn into_inner(self) -> R {
        self.rng
    }
}

/// `n` i.i.d. draws from N(0, sigma²).
pub fn gaussian_draw(rng: &RngState, n: usize, sigma: f64) -> Result<RealVector> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::Parameter(format!(
            "sigma must be finite and non-negative, got {sigma}"
        )));
    }
    if n == 0 {
        return Err(Error::Parameter("gaussian_draw needs n > 0".into()));
    }
    let mut gen = BoxMuller::new(rng.generator());
    Ok((0..n).map(|_| sigma * gen.next_standard()).collect())
}

/// Uniform sample of `k` distinct elements of `items`, in draw order.
pub fn choose_without_replacement<T: Copy>(rng: &RngState, items: &[T], k: usize) -> Vec<T> {
    let mut pool = items.to_vec();
    let mut gen = rng.generator();
    let k = k.min(pool.len());
    // Partial Fisher–Yates.
    for i in 0..k {
        let j = gen.random_range(i..pool.len());
        pool.swap(i, j);
    }
    pool.truncate(k);
    pool
}

/// Uniformly random permutation of `0..n`.
pub fn permutation(rng: &RngState, n: usize) -> Vec<usize> {
    let ids: Vec<usize> = (0..n).collect();
    choose_without_replacement(rng, &ids, n)
}

/// Ranks with ties sharing their average rank (1-based).
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Spearman rank correlation; `None` when undefined.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    pearson(&average_ranks(xs), &average_ranks(ys))
}

/// Mean and sample standard deviation (`n - 1` denominator, 0 for n < 2).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
