//! Pearson correlation with a two-sided t-test.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use super::labels::{hallucination_rates, score_cells, LabeledItem, Metric};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("inputs have different lengths ({0} and {1})")]
    LengthMismatch(usize, usize),
    #[error("need at least 3 points, got {0}")]
    TooFew(usize),
    #[error("correlation undefined for constant input")]
    Constant,
    #[error("input contains a non-finite value")]
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PearsonResult {
    pub r: f64,
    /// Two-sided p-value of the t-test with n - 2 degrees of freedom.
    pub p: f64,
    pub n: usize,
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<PearsonResult, StatsError> {
    if x.len() != y.len() {
        return Err(StatsError::LengthMismatch(x.len(), y.len()));
    }
    let n = x.len();
    if n < 3 {
        return Err(StatsError::TooFew(n));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(StatsError::Constant);
    }
    let r = (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0);
    let df = (n - 2) as f64;
    let p = if r.abs() == 1.0 {
        0.0
    } else {
        let t = r * (df / (1.0 - r * r)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).expect("df > 0");
        (2.0 * dist.sf(t.abs())).min(1.0)
    };
    Ok(PearsonResult { r, p, n })
}

/// Correlation between explanation hallucination rate and action-prediction
/// accuracy across (behavior, representation) aggregates.
pub fn hallucination_action_correlation(items: &[LabeledItem]) -> Result<PearsonResult, StatsError> {
    let cells = score_cells(items);
    let mut x = Vec::new();
    let mut y = Vec::new();
    for h in hallucination_rates(items) {
        let Some(rate) = h.explanation else { continue };
        let (num, den) = cells
            .iter()
            .filter(|c| c.metric == Metric::Action && c.key.behavior == h.behavior && c.key.br_kind == h.br_kind)
            .fold((0, 0), |(n, d), c| (n + c.numerator, d + c.denominator));
        if den > 0 {
            x.push(rate.value());
            y.push(num as f64 / den as f64);
        }
    }
    pearson(&x, &y)
}
