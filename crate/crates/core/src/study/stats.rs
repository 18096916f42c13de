//! One-sample t-test on paired differences.

use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;

use super::StudyError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StatResult {
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation (n − 1 denominator).
    pub sd: f64,
    /// Infinite when every difference is the same nonzero value.
    pub t: f64,
    /// Two-sided.
    pub p: f64,
}

impl StatResult {
    pub fn df(&self) -> usize {
        self.n - 1
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn sample_sd(xs: &[f64]) -> f64 {
    let m = mean(xs);
    let ss: f64 = xs.iter().map(|x| (x - m).powi(2)).sum();
    (ss / (xs.len() - 1) as f64).sqrt()
}

/// Two-sided tail probability of Student's t with `df` degrees of freedom:
/// `P(|T| ≥ |t|) = I_{df/(df+t²)}(df/2, 1/2)`.
pub fn t_two_sided_p(t: f64, df: f64) -> f64 {
    if t.is_infinite() {
        return 0.0;
    }
    let x = df / (df + t * t);
    beta_reg(df / 2.0, 0.5, x).clamp(0.0, 1.0)
}

/// Tests the null hypothesis that the mean difference is zero.
///
/// With zero spread the result is `t = 0, p = 1` for a zero mean and
/// `t = ±∞, p = 0` otherwise.
pub fn paired_t(differences: &[f64]) -> Result<StatResult, StudyError> {
    let n = differences.len();
    if n < 2 {
        return Err(StudyError::DegenerateSample { n });
    }
    let m = mean(differences);
    let sd = sample_sd(differences);
    let (t, p) = if sd == 0.0 {
        if m == 0.0 {
            (0.0, 1.0)
        } else {
            (f64::INFINITY.copysign(m), 0.0)
        }
    } else {
        let t = m / (sd / (n as f64).sqrt());
        (t, t_two_sided_p(t, (n - 1) as f64))
    };
    Ok(StatResult { n, mean: m, sd, t, p })
}

/// Paired test on `treatment[i] − baseline[i]`.
pub fn paired_t_two(treatment: &[f64], baseline: &[f64]) -> Result<StatResult, StudyError> {
    if treatment.len() != baseline.len() {
        return Err(StudyError::DegenerateSample {
            n: treatment.len().min(baseline.len()),
        });
    }
    let d: Vec<f64> = treatment.iter().zip(baseline).map(|(a, b)| a - b).collect();
    paired_t(&d)
}
