//! Ternarization of a weight vector: find `alpha >= 0` and codes in
//! `{-1, 0, +1}` minimizing `||W - alpha * codes||^2`.
//!
//! Codes come from the threshold function: `+1` above `delta`, `-1` below
//! `-delta`, `0` when `|w| <= delta`. For a fixed threshold the best scale is
//! the mean magnitude over the support set `{i : |w_i| > delta}`, which turns
//! the problem into maximizing `(sum of support magnitudes)^2 / |support|`
//! over `delta`. [`ternarize_exact`] solves that by scanning sorted
//! magnitudes; [`ternarize_heuristic`] uses `delta = 0.7 * mean(|W|)`.
//!
//! All sums are accumulated in `f64`; the score is flat near its maximum and
//! `f32` prefix sums over 10^5 weights move the argmax noticeably.

use num_bigint::BigUint;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{sample_normal, sample_uniform, DenseTensor, Rng, Shape, TensorError};

/// Largest input [`brute_force_oracle`] accepts (3^16 code vectors).
pub const ORACLE_MAX_LEN: usize = 16;

/// Multiplier of `mean(|W|)` in the rule-of-thumb threshold.
pub const HEURISTIC_FACTOR: f64 = 0.7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuantError {
    #[error("weight vector is empty")]
    EmptyWeights,
    #[error("all weights are zero; no positive threshold exists")]
    AllZeroWeights,
    #[error("threshold {delta} leaves an empty support set")]
    DegenerateSupport { delta: f32 },
    #[error("threshold must be positive and finite, got {0}")]
    InvalidThreshold(f32),
    #[error("scale factor must be non-negative and finite, got {0}")]
    InvalidAlpha(f32),
    #[error("length mismatch: {weights} weights vs {codes} codes")]
    LengthMismatch { weights: usize, codes: usize },
    #[error("oracle enumerates 3^n code vectors; n = {0} exceeds the limit of {ORACLE_MAX_LEN}")]
    OracleTooLarge(usize),
    #[error("template counting supports 2 or 3 states, got {0}")]
    UnsupportedStates(u32),
    #[error("distribution check needs at least 10000 samples, got {0}")]
    TooFewSamples(usize),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// A ternary weight code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(i8)]
pub enum TernaryCode {
    Neg = -1,
    Zero = 0,
    Pos = 1,
}

impl TernaryCode {
    pub fn value(self) -> i8 {
        self as i8
    }

    pub fn as_f32(self) -> f32 {
        f32::from(self.value())
    }

    pub fn from_i8(v: i8) -> Option<Self> {
        match v {
            -1 => Some(Self::Neg),
            0 => Some(Self::Zero),
            1 => Some(Self::Pos),
            _ => None,
        }
    }

    /// `+1` for non-negative input, `-1` otherwise (`sign(0) := +1`).
    pub fn sign_of(w: f32) -> Self {
        if w < 0.0 {
            Self::Neg
        } else {
            Self::Pos
        }
    }

    pub fn negate(self) -> Self {
        match self {
            Self::Neg => Self::Pos,
            Self::Zero => Self::Zero,
            Self::Pos => Self::Neg,
        }
    }
}

/// Result of a threshold solver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TernarySolution {
    pub alpha: f32,
    pub delta: f32,
    pub codes: Vec<TernaryCode>,
    /// `sum_i (w_i - alpha * codes_i)^2`
    pub objective: f64,
}

impl TernarySolution {
    pub fn nonzero(&self) -> usize {
        self.codes.iter().filter(|&&c| c != TernaryCode::Zero).count()
    }
}

/// Result of [`brute_force_oracle`]. The optimal pattern is not assumed to
/// be threshold-realizable, so there is no `delta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleSolution {
    pub alpha: f32,
    pub codes: Vec<TernaryCode>,
    pub objective: f64,
}

/// Sign codes plus a scale (the binary-weight baseline).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinarySolution {
    pub alpha: f32,
    /// Only `Pos` and `Neg`.
    pub codes: Vec<TernaryCode>,
    pub objective: f64,
}

/// Support set statistics for a threshold.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct SupportSet {
    pub indices: Vec<usize>,
    pub abs_sum: f64,
    pub residual: f64,
}

impl SupportSet {
    pub fn new(weights: &[f32], delta: f32) -> Self {
        let mut indices = Vec::new();
        let mut abs_sum = 0.0f64;
        let mut residual = 0.0f64;
        for (i, &w) in weights.iter().enumerate() {
            if w.abs() > delta {
                indices.push(i);
                abs_sum += f64::from(w.abs());
            } else {
                residual += f64::from(w) * f64::from(w);
            }
        }
        Self {
            indices,
            abs_sum,
            residual,
        }
    }

    pub fn count(&self) -> usize {
        self.indices.len()
    }
}

pub fn objective(weights: &[f32], alpha: f32, codes: &[TernaryCode]) -> Result<f64, QuantError> {
    if weights.len() != codes.len() {
        return Err(QuantError::LengthMismatch {
            weights: weights.len(),
            codes: codes.len(),
        });
    }
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(QuantError::InvalidAlpha(alpha));
    }
    Ok(objective_unchecked(weights, f64::from(alpha), codes))
}

fn objective_unchecked(weights: &[f32], alpha: f64, codes: &[TernaryCode]) -> f64 {
    weights
        .iter()
        .zip(codes)
        .map(|(&w, &c)| {
            let r = f64::from(w) - alpha * f64::from(c.value());
            r * r
        })
        .sum()
}

pub fn ternarize_threshold(weights: &[f32], delta: f32) -> Result<Vec<TernaryCode>, QuantError> {
    check_delta(delta)?;
    Ok(threshold_codes(weights, delta))
}

fn threshold_codes(weights: &[f32], delta: f32) -> Vec<TernaryCode> {
    weights
        .iter()
        .map(|&w| {
            if w > delta {
                TernaryCode::Pos
            } else if w < -delta {
                TernaryCode::Neg
            } else {
                TernaryCode::Zero
            }
        })
        .collect()
}

fn check_delta(delta: f32) -> Result<(), QuantError> {
    if delta > 0.0 && delta.is_finite() {
        Ok(())
    } else {
        Err(QuantError::InvalidThreshold(delta))
    }
}

/// Mean magnitude over `{i : |w_i| > delta}`.
pub fn optimal_alpha(weights: &[f32], delta: f32) -> Result<f32, QuantError> {
    check_delta(delta)?;
    let support = SupportSet::new(weights, delta);
    if support.count() == 0 {
        return Err(QuantError::DegenerateSupport { delta });
    }
    Ok((support.abs_sum / support.count() as f64) as f32)
}

fn check_nonzero(weights: &[f32]) -> Result<(), QuantError> {
    if weights.is_empty() {
        return Err(QuantError::EmptyWeights);
    }
    if weights.iter().all(|&w| w == 0.0) {
        return Err(QuantError::AllZeroWeights);
    }
    Ok(())
}

/// Threshold `0.7 * mean(|W|)`, then the optimal scale for it.
pub fn ternarize_heuristic(weights: &[f32]) -> Result<TernarySolution, QuantError> {
    check_nonzero(weights)?;
    let mean_abs =
        weights.iter().map(|&w| f64::from(w.abs())).sum::<f64>() / weights.len() as f64;
    let delta = (HEURISTIC_FACTOR * mean_abs) as f32;
    if delta <= 0.0 {
        // mean |W| underflows to zero in f32 only for subnormal-sized weights
        return Err(QuantError::AllZeroWeights);
    }
    solution_for_threshold(weights, delta)
}

fn solution_for_threshold(weights: &[f32], delta: f32) -> Result<TernarySolution, QuantError> {
    let alpha = optimal_alpha(weights, delta)?;
    let codes = threshold_codes(weights, delta);
    let objective = objective_unchecked(weights, f64::from(alpha), &codes);
    Ok(TernarySolution {
        alpha,
        delta,
        codes,
        objective,
    })
}

/// Threshold strictly between `upper` and `lower` magnitudes such that
/// exactly the weights with `|w| >= upper` survive, or `None` if no positive
/// `f32` threshold separates them.
fn separating_threshold(upper: f32, lower: f32) -> Option<f32> {
    debug_assert!(upper > lower);
    let mid = lower + (upper - lower) * 0.5;
    // |w| == delta maps to zero, so `lower` itself is a valid threshold when
    // no float lies strictly between the two magnitudes.
    let delta = if mid > lower && mid < upper { mid } else { lower };
    (delta > 0.0).then_some(delta)
}

/// Global maximizer of `(sum_{support} |w|)^2 / |support|` over thresholds.
///
/// Magnitudes are sorted descending; every prefix that ends strictly above
/// the next magnitude is a realizable support. Score ties go to the smaller
/// prefix. The reported threshold is the midpoint of the bracketing pair.
pub fn ternarize_exact(weights: &[f32]) -> Result<TernarySolution, QuantError> {
    check_nonzero(weights)?;
    let mut mags: Vec<f32> = weights.iter().map(|w| w.abs()).collect();
    mags.sort_unstable_by(|a, b| b.total_cmp(a));

    let mut best: Option<(f64, usize, f32)> = None;
    let mut prefix = 0.0f64;
    for k in 1..=mags.len() {
        prefix += f64::from(mags[k - 1]);
        let next = mags.get(k).copied().unwrap_or(0.0);
        if mags[k - 1] <= next {
            continue;
        }
        let Some(delta) = separating_threshold(mags[k - 1], next) else {
            continue;
        };
        let score = prefix * prefix / k as f64;
        if best.is_none_or(|(s, _, _)| score > s) {
            best = Some((score, k, delta));
        }
    }
    let (_, k, delta) = best.ok_or(QuantError::AllZeroWeights)?;
    let sol = solution_for_threshold(weights, delta)?;
    debug_assert_eq!(sol.nonzero(), k);
    Ok(sol)
}

/// Exhaustive minimization of the objective over all `3^n` code vectors.
///
/// For each code vector the scale is the clipped least-squares fit
/// `max(0, sum w_i c_i / sum c_i^2)`. Independent of the threshold
/// machinery; used to check [`ternarize_exact`].
pub fn brute_force_oracle(weights: &[f32]) -> Result<OracleSolution, QuantError> {
    let n = weights.len();
    if n > ORACLE_MAX_LEN {
        return Err(QuantError::OracleTooLarge(n));
    }
    let w: Vec<f64> = weights.iter().map(|&v| f64::from(v)).collect();
    let total_sq: f64 = w.iter().map(|v| v * v).sum();
    // digits[i] in {0, 1, 2} stands for code {0, +1, -1}
    let mut digits = vec![0u8; n];
    let mut best_j = f64::INFINITY;
    let mut best_digits = digits.clone();
    let mut best_alpha = 0.0f64;
    loop {
        let mut dot = 0.0f64;
        let mut count = 0usize;
        for (d, &wi) in digits.iter().zip(&w) {
            match d {
                1 => {
                    dot += wi;
                    count += 1;
                }
                2 => {
                    dot -= wi;
                    count += 1;
                }
                _ => {}
            }
        }
        let alpha = if count == 0 {
            0.0
        } else {
            (dot / count as f64).max(0.0)
        };
        // ||w - a c||^2 = ||w||^2 - 2 a (w.c) + a^2 ||c||^2
        let j = total_sq - 2.0 * alpha * dot + alpha * alpha * count as f64;
        if j < best_j {
            best_j = j;
            best_digits.copy_from_slice(&digits);
            best_alpha = alpha;
        }
        // base-3 increment
        let mut i = 0;
        loop {
            if i == n {
                let codes: Vec<TernaryCode> = best_digits
                    .iter()
                    .map(|d| match d {
                        1 => TernaryCode::Pos,
                        2 => TernaryCode::Neg,
                        _ => TernaryCode::Zero,
                    })
                    .collect();
                let alpha = best_alpha as f32;
                let objective = objective_unchecked(weights, f64::from(alpha), &codes);
                return Ok(OracleSolution {
                    alpha,
                    codes,
                    objective,
                });
            }
            digits[i] += 1;
            if digits[i] < 3 {
                break;
            }
            digits[i] = 0;
            i += 1;
        }
    }
}

/// Sign codes with `sign(0) := +1` and `alpha = mean(|W|)`.
pub fn binarize_sign(weights: &[f32]) -> Result<BinarySolution, QuantError> {
    if weights.is_empty() {
        return Err(QuantError::EmptyWeights);
    }
    let alpha =
        (weights.iter().map(|&w| f64::from(w.abs())).sum::<f64>() / weights.len() as f64) as f32;
    let codes: Vec<TernaryCode> = weights.iter().map(|&w| TernaryCode::sign_of(w)).collect();
    let objective = objective_unchecked(weights, f64::from(alpha), &codes);
    Ok(BinarySolution {
        alpha,
        codes,
        objective,
    })
}

/// Number of distinct filters with `states` levels per weight.
pub fn template_count(filter: &Shape, states: u32) -> Result<BigUint, QuantError> {
    if !(2..=3).contains(&states) {
        return Err(QuantError::UnsupportedStates(states));
    }
    let n = filter.numel();
    let mut count = BigUint::from(1u32);
    for _ in 0..n {
        count *= states;
    }
    Ok(count)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distribution {
    /// Uniform on `[-param, param]`.
    Uniform,
    /// `N(0, param^2)`.
    Normal,
}

impl Distribution {
    /// Closed-form threshold prediction: `a/3` for uniform, `0.6 sigma` for
    /// normal.
    pub fn predicted_delta(self, param: f32) -> f64 {
        match self {
            Distribution::Uniform => f64::from(param) / 3.0,
            Distribution::Normal => 0.6 * f64::from(param),
        }
    }

    pub fn sample(self, rng: &mut Rng, n: usize, param: f32) -> Result<DenseTensor, QuantError> {
        let shape = Shape::new([n])?;
        Ok(match self {
            Distribution::Uniform => sample_uniform(rng, shape, param)?,
            Distribution::Normal => sample_normal(rng, shape, param)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleReport {
    pub distribution: Distribution,
    pub param: f32,
    pub n: usize,
    pub delta_exact: f64,
    pub delta_predicted: f64,
    pub delta_heuristic: f64,
    pub objective_exact: f64,
    pub objective_heuristic: f64,
    /// `objective_heuristic / objective_exact`, never below 1.
    pub objective_ratio: f64,
}

/// Samples `n` weights and compares the exact optimal threshold with the
/// closed-form prediction for that distribution.
pub fn validate_distribution_rule(
    dist: Distribution,
    param: f32,
    n: usize,
    rng: &mut Rng,
) -> Result<RuleReport, QuantError> {
    if n < 10_000 {
        return Err(QuantError::TooFewSamples(n));
    }
    let w = dist.sample(rng, n, param)?;
    let exact = ternarize_exact(w.data())?;
    let heuristic = ternarize_heuristic(w.data())?;
    Ok(RuleReport {
        distribution: dist,
        param,
        n,
        delta_exact: f64::from(exact.delta),
        delta_predicted: dist.predicted_delta(param),
        delta_heuristic: f64::from(heuristic.delta),
        objective_exact: exact.objective,
        objective_heuristic: heuristic.objective,
        objective_ratio: heuristic.objective / exact.objective,
    })
}
