//! Linear-softmax categorical policy over forecast bins.
//!
//! A prompt is mapped to a centered, hashed bag-of-words vector `φ`. The
//! policy is `π(k | prompt) = softmax(b + B W φ)_k` over 101 bins standing
//! for the forecasts 0.00, 0.01, ..., 1.00, where `b` holds fixed per-bin
//! base logits and the columns of `B` are a few smooth shapes over the bins,
//! so one preference between two bins informs every bin in between.
//! Log-probabilities and their gradients are exact.

use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::records::write_atomic;

pub const NUM_BINS: usize = 101;

/// Bin index nearest to a probability in `[0, 1]`.
pub fn bin_of(probability: f64) -> usize {
    ((probability.clamp(0.0, 1.0) * (NUM_BINS - 1) as f64).round() as usize).min(NUM_BINS - 1)
}

pub fn bin_value(bin: usize) -> f64 {
    bin as f64 / (NUM_BINS - 1) as f64
}

/// 64-bit FNV-1a. Stable across platforms and releases, unlike the std
/// hasher.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn nonzero(phi: &[f64]) -> Vec<(usize, f64)> {
    phi.iter().copied().enumerate().filter(|&(_, x)| x != 0.0).collect()
}

/// Which part of a prompt the features are read from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureScope {
    Prompt,
    /// The block after `News Summaries:` up to the next blank line; the
    /// whole prompt when there is no such block.
    #[default]
    News,
}

pub const NEWS_HEADER: &str = "News Summaries:";

impl FeatureScope {
    pub fn select<'t>(&self, prompt: &'t str) -> &'t str {
        match self {
            FeatureScope::Prompt => prompt,
            FeatureScope::News => match prompt.split_once(NEWS_HEADER) {
                Some((_, rest)) => rest.split_once("\n\n").map_or(rest, |(news, _)| news),
                None => prompt,
            },
        }
    }
}

/// Hashed bag-of-words features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureSpec {
    /// Number of hash buckets, which is also the feature dimension.
    pub buckets: usize,
    pub scope: FeatureScope,
}

impl Default for FeatureSpec {
    fn default() -> Self {
        FeatureSpec {
            buckets: 64,
            scope: FeatureScope::News,
        }
    }
}

impl FeatureSpec {
    pub fn dim(&self) -> usize {
        self.buckets
    }

    /// Presence (0 or 1) per bucket over the non-numeric tokens,
    /// L2-normalized. Counts would let words repeated in every summary, such
    /// as the question's own subject, drown out the rest.
    pub fn features(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0f64; self.dim()];
        if self.buckets == 0 {
            return v;
        }
        for token in self
            .scope
            .select(text)
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty() && !t.chars().all(|c| c.is_ascii_digit()))
        {
            let token = token.to_lowercase();
            v[(fnv1a(token.as_bytes()) % self.buckets as u64) as usize] = 1.0;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v
    }
}

/// Shape functions over the bin values: a tilt towards 1 and a spread
/// towards the extremes.
pub const NUM_SHAPES: usize = 2;

fn shapes(bin: usize) -> [f64; NUM_SHAPES] {
    let u = 2.0 * bin_value(bin) - 1.0;
    [u, u * u - 1.0 / 3.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyPolicy {
    pub features: FeatureSpec,
    /// Subtracted from the hashed features of every prompt.
    pub center: Vec<f64>,
    /// Per-bin base logits. Held fixed during training.
    pub bias: Vec<f64>,
    /// Row-major `NUM_SHAPES x features.dim()`.
    pub weights: Vec<f64>,
}

impl ToyPolicy {
    pub fn zeros(features: FeatureSpec) -> Self {
        ToyPolicy {
            features,
            center: vec![0.0; features.dim()],
            bias: vec![0.0; NUM_BINS],
            weights: vec![0.0; NUM_SHAPES * features.dim()],
        }
    }

    /// Feature weights zero, base logits set to `ln(prior_k)`. `prior` need
    /// not be normalized but must be positive.
    pub fn from_prior(features: FeatureSpec, prior: &[f64; NUM_BINS]) -> Self {
        let mut p = Self::zeros(features);
        p.bias = prior.iter().map(|w| w.ln()).collect();
        p
    }

    fn shape_scores(&self, phi: &[f64]) -> [f64; NUM_SHAPES] {
        let dim = self.features.dim();
        debug_assert_eq!(phi.len(), dim);
        let nz = nonzero(phi);
        let mut s = [0.0; NUM_SHAPES];
        for (m, sm) in s.iter_mut().enumerate() {
            let row = &self.weights[m * dim..(m + 1) * dim];
            *sm = nz.iter().map(|&(j, x)| row[j] * x).sum();
        }
        s
    }

    /// `z_k = b_k + Σ_m B_m(k) · (W_m · φ)`.
    pub fn logits(&self, phi: &[f64]) -> [f64; NUM_BINS] {
        let s = self.shape_scores(phi);
        let mut z = [0.0; NUM_BINS];
        for (k, zk) in z.iter_mut().enumerate() {
            *zk = self.bias[k] + shapes(k).iter().zip(&s).map(|(b, s)| b * s).sum::<f64>();
        }
        z
    }

    pub fn log_probs(&self, phi: &[f64]) -> [f64; NUM_BINS] {
        let mut z = self.logits(phi);
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        z.iter_mut().for_each(|v| *v -= lse);
        z
    }

    pub fn probs(&self, phi: &[f64]) -> [f64; NUM_BINS] {
        let mut p = self.log_probs(phi);
        p.iter_mut().for_each(|v| *v = v.exp());
        p
    }

    /// Expected forecast `Σ π_k · k/100`.
    pub fn mean_forecast(&self, phi: &[f64]) -> f64 {
        self.probs(phi)
            .iter()
            .enumerate()
            .map(|(k, p)| p * bin_value(k))
            .sum::<f64>()
            .clamp(0.0, 1.0)
    }

    /// Centered features of a prompt, the input every other method takes.
    pub fn phi(&self, prompt: &str) -> Vec<f64> {
        let mut v = self.features.features(prompt);
        v.iter_mut().zip(&self.center).for_each(|(x, c)| *x -= c);
        v
    }

    pub fn forecast_prompt(&self, prompt: &str) -> f64 {
        self.mean_forecast(&self.phi(prompt))
    }

    /// Adds `scale · ∂ log π(bin | φ) / ∂W` into `grad`.
    ///
    /// `∂ log π_k / ∂W_m = (B_m(k) - E_π[B_m]) φ`.
    pub fn accumulate_log_prob_grad(&self, phi: &[f64], bin: usize, scale: f64, grad: &mut [f64]) {
        let dim = self.features.dim();
        let probs = self.probs(phi);
        let mut expected = [0.0; NUM_SHAPES];
        for (k, pk) in probs.iter().enumerate() {
            for (e, b) in expected.iter_mut().zip(shapes(k)) {
                *e += pk * b;
            }
        }
        let nz = nonzero(phi);
        for (m, (b, e)) in shapes(bin).iter().zip(expected).enumerate() {
            let coef = scale * (b - e);
            let row = &mut grad[m * dim..(m + 1) * dim];
            for &(i, x) in &nz {
                row[i] += coef * x;
            }
        }
    }

    pub fn save(&self, path: &Path) -> io::Result<()> {
        let mut bytes = serde_json::to_vec(self).map_err(io::Error::other)?;
        bytes.push(b'\n');
        write_atomic(path, &bytes)
    }

    pub fn load(path: &Path) -> io::Result<Self> {
        let p: ToyPolicy = serde_json::from_slice(&std::fs::read(path)?).map_err(io::Error::other)?;
        if p.weights.len() != NUM_SHAPES * p.features.dim() || p.bias.len() != NUM_BINS || p.center.len() != p.features.dim() {
            return Err(io::Error::new(
                io::ErrorKind::InvalidData,
                format!(
                    "policy has {} weights and {} biases, expected {} and {NUM_BINS}",
                    p.weights.len(),
                    p.bias.len(),
                    NUM_SHAPES * p.features.dim()
                ),
            ));
        }
        Ok(p)
    }
}
