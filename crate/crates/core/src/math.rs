//! Flat parameter-vector arithmetic, seeded RNG streams and the scalar
//! statistics the aggregators are built from.
//!
//! Non-finite values pass through untouched; only the aggregation layer
//! decides what to do with them.

use std::cmp::Ordering;
use std::ops::Index;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};

/// A flat model parameter (or update) vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Self {
        ParamVector(values)
    }

    pub fn zeros(dim: usize) -> Self {
        ParamVector(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// True iff every entry is finite.
    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub(crate) fn check_dim(&self, other: &ParamVector) -> Result<()> {
        if self.dim() != other.dim() {
            return Err(FedError::DimensionMismatch {
                expected: self.dim(),
                actual: other.dim(),
            });
        }
        Ok(())
    }

    /// Elementwise `self - other`.
    pub fn sub(&self, other: &ParamVector) -> Result<ParamVector> {
        self.check_dim(other)?;
        Ok(ParamVector(
            self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect(),
        ))
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(values: Vec<f64>) -> Self {
        ParamVector(values)
    }
}

impl Index<usize> for ParamVector {
    type Output = f64;

    fn index(&self, idx: usize) -> &f64 {
        &self.0[idx]
    }
}

/// A deterministic random stream identified by `(seed, stream_id)`.
///
/// Backed by ChaCha8 with the stream id mapped onto the cipher's stream
/// word, so distinct ids never share keystream.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        RngStream {
            seed,
            stream_id,
            rng,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.random()
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    /// Uniform draw in `[low, high]`.
    pub fn uniform_range(&mut self, low: f64, high: f64) -> f64 {
        low + (high - low) * self.uniform()
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    /// Uniform index in `[0, n)`; `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// `alpha * x + y`.
pub fn axpy(alpha: f64, x: &ParamVector, y: &ParamVector) -> Result<ParamVector> {
    x.check_dim(y)?;
    Ok(ParamVector(
        x.0.iter().zip(&y.0).map(|(a, b)| alpha * a + b).collect(),
    ))
}

/// Squared Euclidean distance.
pub fn sq_euclidean(x: &ParamVector, y: &ParamVector) -> Result<f64> {
    x.check_dim(y)?;
    Ok(x.0
        .iter()
        .zip(&y.0)
        .map(|(a, b)| {
            let diff = a - b;
            diff * diff
        })
        .sum())
}

/// Total order on floats used for every coordinate sort: numeric order,
/// `-0.0 == 0.0`, NaN after everything.
pub fn nan_last_cmp(a: &f64, b: &f64) -> Ordering {
    match (a.is_nan(), b.is_nan()) {
        (false, false) => a.partial_cmp(b).unwrap_or(Ordering::Equal),
        (false, true) => Ordering::Less,
        (true, false) => Ordering::Greater,
        (true, true) => Ordering::Equal,
    }
}

/// The values at coordinate `j` across all vectors, sorted ascending.
/// The sort is stable, so equal values keep their input order.
pub fn coordwise_sorted(vectors: &[&ParamVector], j: usize) -> Result<Vec<f64>> {
    let first = vectors.first().ok_or(FedError::Empty("vector list"))?;
    for v in &vectors[1..] {
        first.check_dim(v)?;
    }
    if j >= first.dim() {
        return Err(FedError::InvalidArgument(format!(
            "coordinate {j} out of range for dimension {}",
            first.dim()
        )));
    }
    let mut column: Vec<f64> = vectors.iter().map(|v| v.0[j]).collect();
    column.sort_by(nan_last_cmp);
    Ok(column)
}

/// `d` independent draws from `N(mu, sigma^2)`.
pub fn gaussian_sample(rng: &mut RngStream, mu: f64, sigma: f64, d: usize) -> Result<ParamVector> {
    if sigma.is_nan() || sigma < 0.0 {
        return Err(FedError::InvalidArgument(format!(
            "sigma must be non-negative, got {sigma}"
        )));
    }
    Ok(ParamVector(
        (0..d).map(|_| mu + sigma * rng.standard_normal()).collect(),
    ))
}

/// Unweighted mean of equal-dimension vectors, computed as the first
/// vector plus the mean deviation from it. Identical inputs therefore
/// reproduce the shared vector exactly.
pub(crate) fn mean_of(vectors: &[&ParamVector]) -> Result<ParamVector> {
    let weights = vec![1.0; vectors.len()];
    weighted_mean_of(vectors, &weights)
}

/// Weighted mean with weights normalised to sum to one, using the same
/// shifted accumulation as [`mean_of`].
pub(crate) fn weighted_mean_of(vectors: &[&ParamVector], weights: &[f64]) -> Result<ParamVector> {
    let base = *vectors.first().ok_or(FedError::Empty("vector list"))?;
    for v in &vectors[1..] {
        base.check_dim(v)?;
    }
    let total: f64 = weights.iter().sum();
    let mut out = base.0.clone();
    for (j, slot) in out.iter_mut().enumerate() {
        let shift = base.0[j];
        let acc: f64 = vectors
            .iter()
            .zip(weights)
            .map(|(v, w)| (w / total) * (v.0[j] - shift))
            .sum();
        *slot = shift + acc;
    }
    Ok(out.into())
}
