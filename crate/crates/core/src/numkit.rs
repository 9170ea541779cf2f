//! Dense vector arithmetic, seeded randomness, norm clipping and a
//! finite-difference gradient oracle.
//!
//! Everything here is 64-bit floating point. [`ParamVector`] never holds a
//! NaN or infinity: every constructor and arithmetic operation checks its
//! output.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Flat parameter or update vector with L2 semantics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self(values))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn l2_norm(&self) -> f64 {
        l2_norm(self)
    }

    fn check_dim(&self, other: &ParamVector) -> Result<()> {
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: other.dim(),
            });
        }
        Ok(())
    }

    pub fn add(&self, other: &ParamVector) -> Result<ParamVector> {
        self.check_dim(other)?;
        ParamVector::new(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }

    pub fn sub(&self, other: &ParamVector) -> Result<ParamVector> {
        self.check_dim(other)?;
        ParamVector::new(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }

    pub fn scale(&self, factor: f64) -> Result<ParamVector> {
        ParamVector::new(self.0.iter().map(|a| a * factor).collect())
    }

    /// `self + alpha * other`
    pub fn axpy(&self, alpha: f64, other: &ParamVector) -> Result<ParamVector> {
        self.check_dim(other)?;
        ParamVector::new(self.0.iter().zip(&other.0).map(|(a, b)| a + alpha * b).collect())
    }
}

impl TryFrom<Vec<f64>> for ParamVector {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        ParamVector::new(values)
    }
}

impl From<ParamVector> for Vec<f64> {
    fn from(v: ParamVector) -> Self {
        v.0
    }
}

impl AsRef<[f64]> for ParamVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Euclidean norm, scaled to avoid overflow on large entries.
pub fn l2_norm(v: &ParamVector) -> f64 {
    slice_norm(v.as_slice())
}

pub(crate) fn slice_norm(values: &[f64]) -> f64 {
    let max = values.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    if max == 0.0 {
        return 0.0;
    }
    let sum: f64 = values.iter().map(|x| (x / max) * (x / max)).sum();
    max * sum.sqrt()
}

/// Scales `v` by `min(1, bound / ||v||)`. The zero vector is returned
/// unchanged, and a vector already inside the ball is returned bit-for-bit.
pub fn clip_norm(v: &ParamVector, bound: f64) -> Result<ParamVector> {
    if !bound.is_finite() || bound <= 0.0 {
        return Err(Error::invalid("bound", format!("must be positive, got {bound}")));
    }
    let norm = l2_norm(v);
    if norm <= bound {
        return Ok(v.clone());
    }
    let factor = bound / norm;
    let mut scaled: Vec<f64> = v.as_slice().iter().map(|x| x * factor).collect();
    // Rounding in `x * factor` can leave the norm a few ulps above the bound.
    let mut out_norm = slice_norm(&scaled);
    while out_norm > bound {
        let shrink = bound / out_norm * (1.0 - f64::EPSILON);
        scaled.iter_mut().for_each(|x| *x *= shrink);
        out_norm = slice_norm(&scaled);
    }
    ParamVector::new(scaled)
}

/// `dim` i.i.d. draws from N(0, sigma^2).
pub fn gaussian_noise(dim: usize, sigma: f64, rng: &mut RandomSource) -> Result<ParamVector> {
    if !sigma.is_finite() || sigma < 0.0 {
        return Err(Error::invalid("sigma", format!("must be non-negative, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(ParamVector::zeros(dim));
    }
    ParamVector::new((0..dim).map(|_| sigma * rng.standard_normal()).collect())
}

/// Central-difference gradient estimate `(f(v + h e_i) - f(v - h e_i)) / 2h`.
pub fn finite_diff_grad<F>(f: F, v: &ParamVector, h: f64) -> ParamVector
where
    F: Fn(&ParamVector) -> f64,
{
    let mut probe = v.as_slice().to_vec();
    let grad = (0..v.dim())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let plus = f(&ParamVector(probe.clone()));
            probe[i] = orig - h;
            let minus = f(&ParamVector(probe.clone()));
            probe[i] = orig;
            (plus - minus) / (2.0 * h)
        })
        .collect();
    ParamVector(grad)
}

/// Deterministic, splittable random stream.
///
/// A stream is identified by a 32-byte key; [`RandomSource::child`] derives
/// a new key by hashing the parent key with a label, so child streams depend
/// only on the derivation path and never on draw order.
#[derive(Debug, Clone)]
pub struct RandomSource {
    key: [u8; 32],
    rng: ChaCha20Rng,
}

impl RandomSource {
    pub fn new(seed: u64) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(b"p3sgd/root");
        hasher.update(seed.to_le_bytes());
        Self::from_key(hasher.finalize().into())
    }

    fn from_key(key: [u8; 32]) -> Self {
        Self {
            key,
            rng: ChaCha20Rng::from_seed(key),
        }
    }

    pub fn child(&self, label: impl AsRef<[u8]>) -> Self {
        let label = label.as_ref();
        let mut hasher = Sha256::new();
        hasher.update(self.key);
        hasher.update((label.len() as u64).to_le_bytes());
        hasher.update(label);
        Self::from_key(hasher.finalize().into())
    }

    pub fn child_u64(&self, label: u64) -> Self {
        self.child(label.to_le_bytes())
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// Uniform draw from `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        p >= 1.0 || self.uniform() < p
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

impl RngCore for RandomSource {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}
