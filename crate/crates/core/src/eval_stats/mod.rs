//! Forecast scoring and the statistics reported alongside it.
//!
//! Brier scores, descriptive statistics with normal-approximation
//! intervals, Welch (or pooled) t-tests, Benjamini-Hochberg adjustment and
//! the two accuracy buckets (score above 0.5, score below 0.05).

mod bh;
mod report;
pub mod special;
mod ttest;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::question_store::Outcome;

pub use bh::bh_adjust;
pub use report::{report, write_report, EvalReport, PairwiseTest};
pub use ttest::{one_sample_t_test, t_test, t_test_with, TTest, TTestKind};

/// Normal 97.5% quantile used for the reported intervals.
pub const Z_95: f64 = 1.96;
/// Per-question Brier scores strictly above this count as very inaccurate.
pub const VERY_INACCURATE: f64 = 0.5;
/// Per-question Brier scores strictly below this count as very accurate.
pub const VERY_ACCURATE: f64 = 0.05;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("empty_sample: no records to score")]
    EmptySample,
    #[error("insufficient_sample: need at least 2 values, got {0}")]
    InsufficientSample(usize),
    #[error("degenerate_test: both samples have zero variance and equal means")]
    DegenerateTest,
    #[error("invalid_p_value: {0} is not in [0, 1]")]
    InvalidPValue(f64),
    #[error("invalid_probability: {0} is not in [0, 1]")]
    InvalidProbability(f64),
    #[error("unaligned_samples: tags {a} and {b} cover different question sets")]
    UnalignedSamples { a: String, b: String },
    #[error("no model tags given")]
    NoModels,
}

impl StatsError {
    pub fn code(&self) -> &'static str {
        match self {
            StatsError::EmptySample => "empty_sample",
            StatsError::InsufficientSample(_) => "insufficient_sample",
            StatsError::DegenerateTest => "degenerate_test",
            StatsError::InvalidPValue(_) => "invalid_p_value",
            StatsError::InvalidProbability(_) => "invalid_probability",
            StatsError::UnalignedSamples { .. } => "unaligned_samples",
            StatsError::NoModels => "no_models",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastRecord {
    pub question_id: String,
    pub probability: f64,
    pub outcome: Outcome,
    pub model_tag: String,
}

impl ForecastRecord {
    pub fn squared_error(&self) -> f64 {
        let d = self.probability - self.outcome.as_f64();
        d * d
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Descriptive {
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation (n - 1 denominator).
    pub sd: f64,
    pub sem: f64,
    pub ci95: (f64, f64),
}

impl Descriptive {
    /// Builds the interval from already-known summary values, e.g. the
    /// printed rows of a published table.
    pub fn from_summary(n: usize, mean: f64, sd: f64) -> Self {
        let sem = sd / (n as f64).sqrt();
        Descriptive {
            n,
            mean,
            sd,
            sem,
            ci95: (mean - Z_95 * sem, mean + Z_95 * sem),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bucket {
    /// Score strictly below [`VERY_ACCURATE`].
    VeryAccurate,
    Middle,
    /// Score strictly above [`VERY_INACCURATE`].
    VeryInaccurate,
}

impl Bucket {
    pub fn of(score: f64) -> Bucket {
        if score > VERY_INACCURATE {
            Bucket::VeryInaccurate
        } else if score < VERY_ACCURATE {
            Bucket::VeryAccurate
        } else {
            Bucket::Middle
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BrierSummary {
    pub n: usize,
    pub mean: f64,
    pub sd: f64,
    pub sem: f64,
    pub ci95: (f64, f64),
    pub frac_above_half: f64,
    pub frac_below_0_05: f64,
    /// Per-question squared errors in input order.
    #[serde(skip)]
    pub scores: Vec<f64>,
}

/// Compensated (Neumaier) sum.
pub(crate) fn stable_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Mean with one refinement pass, so a constant sample returns its value
/// exactly.
pub(crate) fn mean(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let m = stable_sum(values.iter().copied()) / n;
    m + stable_sum(values.iter().map(|v| v - m)) / n
}

/// Sample variance (n - 1 denominator), two-pass.
pub(crate) fn sample_variance(values: &[f64]) -> f64 {
    let m = mean(values);
    stable_sum(values.iter().map(|v| (v - m) * (v - m))) / (values.len() - 1) as f64
}

pub fn descriptive(scores: &[f64]) -> Result<Descriptive, StatsError> {
    if scores.len() < 2 {
        return Err(StatsError::InsufficientSample(scores.len()));
    }
    let m = mean(scores);
    let sd = sample_variance(scores).sqrt();
    Ok(Descriptive::from_summary(scores.len(), m, sd))
}

/// Brier summary of a set of forecasts.
///
/// A single record has no observable spread; its sd, sem and interval
/// width are reported as zero.
pub fn brier(records: &[ForecastRecord]) -> Result<BrierSummary, StatsError> {
    if records.is_empty() {
        return Err(StatsError::EmptySample);
    }
    if let Some(r) = records
        .iter()
        .find(|r| !(0.0..=1.0).contains(&r.probability))
    {
        return Err(StatsError::InvalidProbability(r.probability));
    }
    let scores: Vec<f64> = records.iter().map(ForecastRecord::squared_error).collect();
    let n = scores.len();
    let d = if n >= 2 {
        descriptive(&scores)?
    } else {
        Descriptive::from_summary(1, scores[0], 0.0)
    };
    let frac = |b: Bucket| scores.iter().filter(|s| Bucket::of(**s) == b).count() as f64 / n as f64;
    Ok(BrierSummary {
        n,
        mean: d.mean,
        sd: d.sd,
        sem: d.sem,
        ci95: d.ci95,
        frac_above_half: frac(Bucket::VeryInaccurate),
        frac_below_0_05: frac(Bucket::VeryAccurate),
        scores,
    })
}
