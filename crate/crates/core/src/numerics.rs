//! Numerically stable softmax / log-sum-exp / cross-entropy, plus a central
//! finite-difference gradient used as the test oracle for every closed-form
//! gradient in the crate.
//!
//! All arithmetic is `f64`; the gradient checks run at 1e-6 relative error.

use crate::error::{Error, Result};

/// Default step for central differences.
pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Class scores for one ROI over `C` foreground classes plus background.
///
/// The background class is the last entry (index `C`).
#[derive(Debug, Clone, PartialEq)]
pub struct LogitVector(Vec<f64>);

impl LogitVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::invalid(format!(
                "logit vector needs at least 2 entries (one foreground class plus background), got {}",
                values.len()
            )));
        }
        check_finite(&values)?;
        Ok(LogitVector(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Index of the background class.
    pub fn background(&self) -> usize {
        self.0.len() - 1
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl AsRef<[f64]> for LogitVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// A categorical distribution produced by [`stable_softmax`].
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// Lowest index attaining the maximum probability.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

impl AsRef<[f64]> for ProbVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

fn check_finite(x: &[f64]) -> Result<()> {
    if let Some(i) = x.iter().position(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("non-finite value {} at index {i}", x[i])));
    }
    Ok(())
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate().skip(1) {
        if v > x[best] {
            best = i;
        }
    }
    best
}

fn max_of(x: &[f64]) -> f64 {
    x.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// `log Σ exp(x_t)` with the maximum shifted out.
pub fn log_sum_exp(x: &[f64]) -> Result<f64> {
    if x.is_empty() {
        return Err(Error::invalid("log_sum_exp of an empty vector"));
    }
    check_finite(x)?;
    let (m, log_s) = shifted_log_sum(x);
    Ok(m + log_s)
}

// (max, log Σ exp(x - max)) for a non-empty finite slice.
fn shifted_log_sum(x: &[f64]) -> (f64, f64) {
    let m = max_of(x);
    let s: f64 = x.iter().map(|&v| (v - m).exp()).sum();
    (m, s.ln())
}

/// Softmax with max-subtraction.
pub fn stable_softmax(x: &[f64]) -> Result<ProbVector> {
    if x.len() < 2 {
        return Err(Error::invalid(format!(
            "softmax needs at least 2 entries, got {}",
            x.len()
        )));
    }
    check_finite(x)?;
    let m = max_of(x);
    let mut out: Vec<f64> = x.iter().map(|&v| (v - m).exp()).collect();
    let s: f64 = out.iter().sum();
    for v in &mut out {
        *v /= s;
    }
    Ok(ProbVector(out))
}

/// `-log softmax(x)[target]`, evaluated as `lse(x) - x[target]`.
pub fn cross_entropy_from_logits(x: &[f64], target: usize) -> Result<f64> {
    if target >= x.len() {
        return Err(Error::IndexOutOfRange {
            index: target,
            len: x.len(),
        });
    }
    check_finite(x)?;
    // Stay in shifted coordinates so a dominant target keeps its tiny loss.
    let (m, log_s) = shifted_log_sum(x);
    Ok((log_s - (x[target] - m)).max(0.0))
}

/// Central finite-difference gradient of `f` at `x`.
pub fn finite_diff_grad<F>(f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::invalid(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let up = f(&probe)?;
        probe[i] = orig - h;
        let down = f(&probe)?;
        probe[i] = orig;
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

/// Relative error with a small absolute floor so that components that are
/// (near) zero on both sides do not blow up the ratio.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Denominator floor used by [`relative_error`].
pub const REL_ERR_FLOOR: f64 = 1e-3;

/// Largest [`relative_error`] over paired components.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}
