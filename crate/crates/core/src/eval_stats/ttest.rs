use serde::{Deserialize, Serialize};

use super::special::student_t_two_sided;
use super::{mean, sample_variance, StatsError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TTestKind {
    /// Unequal variances, Welch-Satterthwaite degrees of freedom.
    #[default]
    Welch,
    /// Pooled variance, `na + nb - 2` degrees of freedom.
    Pooled,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t_statistic: f64,
    pub df: f64,
    /// Two-sided.
    pub p_value: f64,
}

/// Welch two-sample t-test.
pub fn t_test(a: &[f64], b: &[f64]) -> Result<TTest, StatsError> {
    t_test_with(a, b, TTestKind::Welch)
}

pub fn t_test_with(a: &[f64], b: &[f64], kind: TTestKind) -> Result<TTest, StatsError> {
    for s in [a, b] {
        if s.len() < 2 {
            return Err(StatsError::InsufficientSample(s.len()));
        }
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (ma, mb) = (mean(a), mean(b));
    let (va, vb) = (sample_variance(a), sample_variance(b));
    let diff = ma - mb;

    let (se2, df) = match kind {
        TTestKind::Welch => {
            let (qa, qb) = (va / na, vb / nb);
            let se2 = qa + qb;
            let df = se2 * se2 / (qa * qa / (na - 1.0) + qb * qb / (nb - 1.0));
            (se2, df)
        }
        TTestKind::Pooled => {
            let df = na + nb - 2.0;
            let sp2 = ((na - 1.0) * va + (nb - 1.0) * vb) / df;
            (sp2 * (1.0 / na + 1.0 / nb), df)
        }
    };

    if se2 == 0.0 {
        if diff == 0.0 {
            return Err(StatsError::DegenerateTest);
        }
        return Ok(TTest {
            t_statistic: diff.signum() * f64::INFINITY,
            df: na + nb - 2.0,
            p_value: 0.0,
        });
    }

    let t = diff / se2.sqrt();
    Ok(TTest {
        t_statistic: t,
        df,
        p_value: student_t_two_sided(t, df),
    })
}

/// One-sample t-test of `mean(a) = mu`, `n - 1` degrees of freedom.
pub fn one_sample_t_test(a: &[f64], mu: f64) -> Result<TTest, StatsError> {
    if a.len() < 2 {
        return Err(StatsError::InsufficientSample(a.len()));
    }
    let n = a.len() as f64;
    let diff = mean(a) - mu;
    let se2 = sample_variance(a) / n;
    let df = n - 1.0;
    if se2 == 0.0 {
        if diff == 0.0 {
            return Err(StatsError::DegenerateTest);
        }
        return Ok(TTest {
            t_statistic: diff.signum() * f64::INFINITY,
            df,
            p_value: 0.0,
        });
    }
    let t = diff / se2.sqrt();
    Ok(TTest {
        t_statistic: t,
        df,
        p_value: student_t_two_sided(t, df),
    })
}
