//! Evaluation harness: ID-based splits, ROC-AUC, confidence intervals and the
//! paired t-test used to compare modalities across resampled splits.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::Real;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("need at least {min} ids to split, got {got}")]
    TooFewIds { min: usize, got: usize },
    #[error("labels contain a single class; AUC is undefined")]
    SingleClass,
    #[error("scores and labels have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("paired samples have different lengths ({0} vs {1})")]
    PairLengthMismatch(usize, usize),
    #[error("need at least {min} values, got {got}")]
    TooFewValues { min: usize, got: usize },
}

/// Disjoint train / validation / test id sets produced by [`split_by_id`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
}

fn round_half_up(x: Real) -> usize {
    (x + 0.5).floor() as usize
}

/// Seeded shuffle of the ids; the first 20% (rounded half-up) become the test
/// set, then 20% of the remainder become validation, the rest train.
pub fn split_by_id(ids: &[String], seed: u64) -> Result<SplitAssignment, EvalError> {
    if ids.len() < 5 {
        return Err(EvalError::TooFewIds { min: 5, got: ids.len() });
    }
    let mut shuffled: Vec<String> = ids.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shuffled.shuffle(&mut rng);
    let n = shuffled.len();
    let n_test = round_half_up(0.2 * n as Real);
    let n_val = round_half_up(0.2 * (n - n_test) as Real);
    let test = shuffled[..n_test].to_vec();
    let validation = shuffled[n_test..n_test + n_val].to_vec();
    let train = shuffled[n_test + n_val..].to_vec();
    Ok(SplitAssignment { train, validation, test, seed })
}

/// Area under the ROC curve as the rank statistic
/// (concordant pairs + tie credit) / (positives x negatives), via one sort.
pub fn auc(scores: &[Real], labels: &[u8]) -> Result<Real, EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch(scores.len(), labels.len()));
    }
    let pos = labels.iter().filter(|&&y| y == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(EvalError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    // average ranks over tied score groups, then the Mann-Whitney identity
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // ranks are 1-based; ties share the average rank of the group
        let avg_rank = ((i + 1) + j) as Real / 2.0;
        for &idx in &order[i..j] {
            if labels[idx] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }
    let u = rank_sum_pos - (pos * (pos + 1)) as Real / 2.0;
    Ok(u / (pos as Real * neg as Real))
}

/// Outcome of a two-sided paired t-test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTestResult {
    pub t: Real,
    pub df: usize,
    pub p: Real,
    /// Set when the differences had zero variance, so `t` is not finite.
    pub degenerate_variance: bool,
}

/// Two-sided paired t-test on per-split metric pairs.
pub fn paired_t_test(a: &[Real], b: &[Real]) -> Result<TTestResult, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::PairLengthMismatch(a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(EvalError::TooFewValues { min: 2, got: a.len() });
    }
    let n = a.len();
    let d: Vec<Real> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<Real>() / n as Real;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<Real>() / (n - 1) as Real;
    let df = n - 1;
    if var == 0.0 {
        return Ok(if mean == 0.0 {
            TTestResult { t: 0.0, df, p: 1.0, degenerate_variance: true }
        } else {
            let t = if mean > 0.0 { Real::INFINITY } else { Real::NEG_INFINITY };
            TTestResult { t, df, p: 0.0, degenerate_variance: true }
        });
    }
    let t = mean / (var.sqrt() / (n as Real).sqrt());
    let dist = StudentsT::new(0.0, 1.0, df as Real).expect("valid t distribution");
    let p = 2.0 * (1.0 - dist.cdf(t.abs()));
    Ok(TTestResult { t, df, p, degenerate_variance: false })
}

/// Mean and t-based 95% half-width (`t_{0.975, n-1} * sd / sqrt(n)`).
pub fn confidence_interval(values: &[Real]) -> Result<(Real, Real), EvalError> {
    let n = values.len();
    if n < 2 {
        return Err(EvalError::TooFewValues { min: 2, got: n });
    }
    let mean = values.iter().sum::<Real>() / n as Real;
    let var = values.iter().map(|x| (x - mean).powi(2)).sum::<Real>() / (n - 1) as Real;
    if var == 0.0 {
        return Ok((mean, 0.0));
    }
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as Real).expect("valid t distribution");
    let q = dist.inverse_cdf(0.975);
    Ok((mean, q * var.sqrt() / (n as Real).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("id{i:05}")).collect()
    }

    #[test]
    fn split_sizes_small() {
        let s = split_by_id(&ids(100), 7).unwrap();
        assert_eq!(s.test.len(), 20);
        assert_eq!(s.validation.len(), 16);
        assert_eq!(s.train.len(), 64);
    }

    #[test]
    fn split_sizes_cohort_scale() {
        let s = split_by_id(&ids(42_984), 0).unwrap();
        assert_eq!(s.test.len(), 8_597);
        assert_eq!(s.validation.len(), 6_877);
        assert_eq!(s.train.len(), 27_510);
    }

    #[test]
    fn split_deterministic_and_disjoint() {
        let all = ids(53);
        let a = split_by_id(&all, 3).unwrap();
        let b = split_by_id(&all, 3).unwrap();
        assert_eq!(a, b);
        let mut seen: Vec<&String> =
            a.train.iter().chain(&a.validation).chain(&a.test).collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 53);
    }

    #[test]
    fn split_rejects_tiny_input() {
        assert!(split_by_id(&ids(4), 0).is_err());
    }

    #[test]
    fn auc_perfect_ranking() {
        let a = auc(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0]).unwrap();
        assert_eq!(a, 1.0);
    }

    #[test]
    fn auc_all_ties_is_half() {
        let a = auc(&[0.3; 6], &[1, 0, 1, 0, 0, 1]).unwrap();
        assert_eq!(a, 0.5);
    }

    #[test]
    fn auc_mixed_example() {
        let a = auc(&[0.9, 0.8, 0.3, 0.2], &[1, 0, 1, 0]).unwrap();
        assert!((a - 0.75).abs() < 1e-12);
    }

    #[test]
    fn auc_single_class_rejected() {
        assert!(auc(&[0.1, 0.2], &[1, 1]).is_err());
    }

    #[test]
    fn t_test_closed_form() {
        let b = [0.0; 5];
        let a = [0.02, 0.03, 0.01, 0.02, 0.02];
        let r = paired_t_test(&a, &b).unwrap();
        assert_eq!(r.df, 4);
        assert!((r.t - 6.324555).abs() < 1e-3, "t = {}", r.t);
        assert!(r.p < 0.01);
    }

    #[test]
    fn t_test_identical_samples() {
        let a = [0.5, 0.6, 0.7];
        let r = paired_t_test(&a, &a).unwrap();
        assert_eq!(r.t, 0.0);
        assert_eq!(r.p, 1.0);
    }

    #[test]
    fn t_test_antisymmetric() {
        let a = [0.71, 0.69, 0.74, 0.70];
        let b = [0.66, 0.70, 0.69, 0.68];
        let ab = paired_t_test(&a, &b).unwrap();
        let ba = paired_t_test(&b, &a).unwrap();
        assert!((ab.t + ba.t).abs() < 1e-12);
        assert!((ab.p - ba.p).abs() < 1e-12);
    }

    #[test]
    fn t_test_degenerate_nonzero_mean() {
        let a = [1.5, 2.5, 3.5];
        let b = [1.0, 2.0, 3.0];
        let r = paired_t_test(&a, &b).unwrap();
        assert!(r.degenerate_variance);
        assert_eq!(r.p, 0.0);
        assert!(r.t.is_infinite() && r.t > 0.0);
    }

    #[test]
    fn ci_constant_values() {
        let (mean, hw) = confidence_interval(&[0.4; 5]).unwrap();
        assert_eq!(mean, 0.4);
        assert_eq!(hw, 0.0);
    }

    #[test]
    fn ci_five_sample_quantile() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        let sd = (v.iter().map(|x| (x - 3.0) * (x - 3.0)).sum::<Real>() / 4.0).sqrt();
        let (mean, hw) = confidence_interval(&v).unwrap();
        assert_eq!(mean, 3.0);
        assert!((hw - 2.776445 * sd / 5.0_f64.sqrt()).abs() < 1e-4, "hw = {hw}");
    }

    #[test]
    fn ci_translation_invariance() {
        let v = [0.2, 0.4, 0.3, 0.5];
        let shifted: Vec<Real> = v.iter().map(|x| x + 10.0).collect();
        let (m1, h1) = confidence_interval(&v).unwrap();
        let (m2, h2) = confidence_interval(&shifted).unwrap();
        assert!((m2 - m1 - 10.0).abs() < 1e-12);
        assert!((h2 - h1).abs() < 1e-12);
    }
}
