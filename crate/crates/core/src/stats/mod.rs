//! Paired sign-flip permutation test and paired t-test.

mod special;

pub use special::{ln_gamma, regularized_incomplete_beta, student_t_two_sided_p};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, streams};

/// Largest pair count enumerated exhaustively (2^20 sign patterns).
pub const EXHAUSTIVE_MAX_N: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TestMethod {
    PermutationExhaustive { patterns: u64 },
    PermutationMonteCarlo { resamples: usize },
    TTest { df: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatTestResult {
    pub statistic: f64,
    pub p_value: f64,
    pub n: usize,
    pub method: TestMethod,
}

fn differences(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!("paired samples differ in length: {} vs {}", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::invalid("paired tests need at least two pairs"));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    if d.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("paired differences".into()));
    }
    Ok(d)
}

/// `|m| >= |observed|` up to rounding relative to the data scale.
fn at_least_as_extreme(m: f64, observed: f64, scale: f64) -> bool {
    m.abs() >= observed.abs() - 1e-12 * scale
}

/// Two-tailed paired test on `mean(a - b)` under random sign flips of the
/// differences. Exhaustive when `n <= 20`, otherwise `resamples` seeded flips
/// with `p = (count + 1) / (resamples + 1)`, the identity counted once.
pub fn paired_permutation_test(a: &[f64], b: &[f64], resamples: usize, seed: u64) -> Result<StatTestResult> {
    let d = differences(a, b)?;
    let n = d.len();
    let observed = d.iter().sum::<f64>() / n as f64;
    let scale = d.iter().map(|x| x.abs()).sum::<f64>() / n as f64;

    if n <= EXHAUSTIVE_MAX_N {
        let patterns = 1u64 << n;
        let mut count = 0u64;
        for mask in 0..patterns {
            let s: f64 = d.iter().enumerate().map(|(i, &x)| if mask >> i & 1 == 1 { -x } else { x }).sum();
            if at_least_as_extreme(s / n as f64, observed, scale) {
                count += 1;
            }
        }
        return Ok(StatTestResult {
            statistic: observed,
            p_value: count as f64 / patterns as f64,
            n,
            method: TestMethod::PermutationExhaustive { patterns },
        });
    }

    if resamples == 0 {
        return Err(Error::invalid("Monte Carlo permutation test needs resamples >= 1"));
    }
    Ok(monte_carlo(&d, resamples, seed))
}

fn monte_carlo(d: &[f64], resamples: usize, seed: u64) -> StatTestResult {
    let n = d.len();
    let observed = d.iter().sum::<f64>() / n as f64;
    let scale = d.iter().map(|x| x.abs()).sum::<f64>() / n as f64;
    let mut rng = rng::stream(seed, streams::PERMUTATION);
    let mut count = 0usize;
    for _ in 0..resamples {
        let s: f64 = d.iter().map(|&x| if rng.random::<bool>() { -x } else { x }).sum();
        if at_least_as_extreme(s / n as f64, observed, scale) {
            count += 1;
        }
    }
    StatTestResult {
        statistic: observed,
        p_value: (count + 1) as f64 / (resamples + 1) as f64,
        n,
        method: TestMethod::PermutationMonteCarlo { resamples },
    }
}

/// Monte Carlo sign-flip test regardless of `n`; used to check the sampler
/// against exhaustive enumeration.
pub fn paired_permutation_test_sampled(a: &[f64], b: &[f64], resamples: usize, seed: u64) -> Result<StatTestResult> {
    let d = differences(a, b)?;
    if resamples == 0 {
        return Err(Error::invalid("Monte Carlo permutation test needs resamples >= 1"));
    }
    Ok(monte_carlo(&d, resamples, seed))
}

/// `t = mean(d) / (sd(d) / sqrt(n))` with `n - 1` degrees of freedom and a
/// two-sided p-value from the Student t distribution.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<StatTestResult> {
    let d = differences(a, b)?;
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    if !(var > 0.0) {
        return Err(Error::invalid("differences have zero variance"));
    }
    let t = mean / (var / n).sqrt();
    let df = d.len() - 1;
    Ok(StatTestResult {
        statistic: t,
        p_value: student_t_two_sided_p(t, df as f64),
        n: d.len(),
        method: TestMethod::TTest { df },
    })
}
