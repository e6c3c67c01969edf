//! Complementary personalization reward.
//!
//! Each indicator contributes a piecewise-linear reward of its absolute
//! error `e` against the style reference:
//!
//! ```text
//!            CHANGE                 KEEP
//! [0, m]     1                      0
//! (m, n)     (n - e) / (n - m)      (e - m) / (n - m)
//! [n, inf)   0                      1
//! ```
//!
//! so the two actions' rewards always sum to 1 per indicator and to 3 in
//! total.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::indicators::IndicatorVector;
use crate::sim::Action;

#[derive(Debug, Error, PartialEq)]
pub enum RewardError {
    #[error("indicator {index}: need 0 <= m < n, got m = {m}, n = {n}")]
    InvalidBand { index: usize, m: f64, n: f64 },
    #[error("error must be finite and nonnegative, got {0}")]
    InvalidError(f64),
}

/// Error band per indicator, ordered `(t_f, t_nf, dv_nb)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardParams {
    /// Maximum acceptable error.
    pub m: [f64; 3],
    /// Maximum effective error.
    pub n: [f64; 3],
}

impl Default for RewardParams {
    fn default() -> Self {
        Self {
            m: [0.2, 0.2, 0.5],
            n: [2.0, 2.0, 5.0],
        }
    }
}

impl RewardParams {
    pub fn validate(&self) -> Result<(), RewardError> {
        for index in 0..3 {
            check_band(index, self.m[index], self.n[index])?;
        }
        Ok(())
    }
}

fn check_band(index: usize, m: f64, n: f64) -> Result<(), RewardError> {
    if m.is_finite() && n.is_finite() && 0.0 <= m && m < n {
        Ok(())
    } else {
        Err(RewardError::InvalidBand { index, m, n })
    }
}

pub fn absolute_error(actual: f64, reference: f64) -> f64 {
    (actual - reference).abs()
}

fn change_reward(e: f64, m: f64, n: f64) -> f64 {
    if e <= m {
        1.0
    } else if e >= n {
        0.0
    } else {
        (n - e) / (n - m)
    }
}

fn reward_unchecked(e: f64, action: Action, m: f64, n: f64) -> f64 {
    let change = change_reward(e, m, n);
    match action {
        Action::Change => change,
        Action::Keep => 1.0 - change,
    }
}

/// Reward in `[0, 1]` of a single indicator with absolute error `e`.
pub fn indicator_reward(e: f64, action: Action, m: f64, n: f64) -> Result<f64, RewardError> {
    check_band(0, m, n)?;
    if !(e.is_finite() && e >= 0.0) {
        return Err(RewardError::InvalidError(e));
    }
    Ok(reward_unchecked(e, action, m, n))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_f: f64,
    pub r_nf: f64,
    pub r_nb: f64,
    /// `r_f + r_nf + r_nb`.
    pub total: f64,
}

impl RewardBreakdown {
    fn from_terms(r: [f64; 3]) -> Self {
        Self {
            r_f: r[0],
            r_nf: r[1],
            r_nb: r[2],
            total: r[0] + r[1] + r[2],
        }
    }
}

/// Total reward of `action` given actual indicators and the style reference.
///
/// Missing or irrelevant indicators contribute zero error under both actions.
pub fn total_reward(
    indicators: &IndicatorVector,
    references: &IndicatorVector,
    action: Action,
    params: &RewardParams,
) -> Result<RewardBreakdown, RewardError> {
    params.validate()?;
    let errors = indicators.errors_against(references);
    let mut terms = [0.0; 3];
    for i in 0..3 {
        if !(errors[i].is_finite()) {
            return Err(RewardError::InvalidError(errors[i]));
        }
        terms[i] = reward_unchecked(errors[i], action, params.m[i], params.n[i]);
    }
    Ok(RewardBreakdown::from_terms(terms))
}

/// Rewards of both actions at once, `(change, keep)`.
pub fn reward_pair(
    indicators: &IndicatorVector,
    references: &IndicatorVector,
    params: &RewardParams,
) -> Result<(RewardBreakdown, RewardBreakdown), RewardError> {
    Ok((
        total_reward(indicators, references, Action::Change, params)?,
        total_reward(indicators, references, Action::Keep, params)?,
    ))
}
