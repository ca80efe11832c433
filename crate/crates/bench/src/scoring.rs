//! Decathlon-style scoring and the efficiency-normalized variants.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Score of a perfect domain.
pub const PERFECT: f64 = 1000.0;

#[derive(Debug, Error, PartialEq)]
pub enum ScoreError {
    #[error("domain {index}: baseline error must be positive, got {e_max}")]
    DegenerateBaseline { index: usize, e_max: f64 },
    #[error("domain {index}: error {error} outside [0, 1]")]
    ErrorOutOfRange { index: usize, error: f64 },
    #[error("{what} must be positive, got {value}")]
    NonPositive { what: &'static str, value: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainScore {
    pub error: f64,
    pub e_max: f64,
    pub alpha: f64,
    pub partial: f64,
    /// Baseline error above 1 (kept uncapped).
    pub baseline_flagged: bool,
}

/// `alpha = 1000 / e_max^2`, `partial = alpha * max(0, e_max - error)^2`.
pub fn domain_score(index: usize, error: f64, e_max: f64) -> Result<DomainScore, ScoreError> {
    if !(0.0..=1.0).contains(&error) {
        return Err(ScoreError::ErrorOutOfRange { index, error });
    }
    if !(e_max > 0.0) {
        return Err(ScoreError::DegenerateBaseline { index, e_max });
    }
    let alpha = PERFECT / (e_max * e_max);
    // same as alpha * gap^2, but exactly PERFECT at zero error
    let ratio = (e_max - error).max(0.0) / e_max;
    Ok(DomainScore { error, e_max, alpha, partial: PERFECT * ratio * ratio, baseline_flagged: e_max > 1.0 })
}

/// Per-domain scores and their sum, from `(error, e_max)` pairs.
pub fn decathlon_score(results: &[(f64, f64)]) -> Result<(Vec<DomainScore>, f64), ScoreError> {
    let scores =
        results.iter().enumerate().map(|(i, &(e, m))| domain_score(i, e, m)).collect::<Result<Vec<_>, _>>()?;
    let total = scores.iter().map(|s| s.partial).sum();
    Ok((scores, total))
}

/// Twice the fine-tuning error, uncapped.
pub fn baseline_error(finetune_error: f64) -> f64 {
    2.0 * finetune_error
}

/// `(S / rel_flop, S / rel_params)`.
pub fn efficiency_scores(score: f64, rel_flop: f64, rel_params: f64) -> Result<(f64, f64), ScoreError> {
    if !(rel_flop > 0.0) {
        return Err(ScoreError::NonPositive { what: "relative FLOP", value: rel_flop });
    }
    if !(rel_params > 0.0) {
        return Err(ScoreError::NonPositive { what: "relative parameters", value: rel_params });
    }
    Ok((score / rel_flop, score / rel_params))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTotals {
    #[serde(rename = "S")]
    pub score: f64,
    pub rel_flop: f64,
    pub rel_params: f64,
    #[serde(rename = "S_O")]
    pub score_per_op: f64,
    #[serde(rename = "S_P")]
    pub score_per_param: f64,
}

impl ScoreTotals {
    pub fn new(score: f64, rel_flop: f64, rel_params: f64) -> Result<Self, ScoreError> {
        let (so, sp) = efficiency_scores(score, rel_flop, rel_params)?;
        Ok(ScoreTotals { score, rel_flop, rel_params, score_per_op: so, score_per_param: sp })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn worked_example() {
        let s = domain_score(0, 0.2, 0.4).unwrap();
        assert!((s.alpha - 6250.0).abs() < 1e-9);
        assert!((s.partial - 250.0).abs() < 1e-9);
    }

    #[test]
    fn perfect_and_zero() {
        assert_eq!(domain_score(0, 0.0, 0.37).unwrap().partial, PERFECT);
        assert_eq!(domain_score(0, 0.37, 0.37).unwrap().partial, 0.0);
        assert_eq!(domain_score(0, 0.9, 0.37).unwrap().partial, 0.0);
    }

    #[test]
    fn degenerate_inputs() {
        assert!(matches!(domain_score(3, 0.1, 0.0), Err(ScoreError::DegenerateBaseline { index: 3, .. })));
        assert!(matches!(domain_score(0, 1.5, 0.5), Err(ScoreError::ErrorOutOfRange { .. })));
        assert!(efficiency_scores(1.0, 0.0, 1.0).is_err());
        assert!(efficiency_scores(1.0, 1.0, -1.0).is_err());
    }

    #[test]
    fn baseline_doubles_uncapped() {
        assert_eq!(baseline_error(0.2), 0.4);
        assert_eq!(baseline_error(0.0), 0.0);
        let s = domain_score(0, 0.1, baseline_error(0.6)).unwrap();
        assert!(s.baseline_flagged);
    }

    #[test]
    fn feature_row() {
        assert_eq!(efficiency_scores(544.0, 1.0, 1.0).unwrap(), (544.0, 544.0));
    }

    proptest! {
        #[test]
        fn score_is_nonincreasing_in_error(e in 0.0f64..1.0, d in 0.0f64..1.0, m in 0.01f64..1.5) {
            let lo = domain_score(0, e, m).unwrap().partial;
            let hi = domain_score(0, (e + d).min(1.0), m).unwrap().partial;
            prop_assert!(hi <= lo);
            prop_assert!((0.0..=PERFECT).contains(&lo));
        }

        #[test]
        fn total_is_sum_of_partials(pairs in prop::collection::vec((0.0f64..1.0, 0.01f64..1.0), 1..10)) {
            let (scores, total) = decathlon_score(&pairs).unwrap();
            prop_assert_eq!(total, scores.iter().map(|s| s.partial).sum::<f64>());
        }
    }
}
