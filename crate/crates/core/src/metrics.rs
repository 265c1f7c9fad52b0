//! Point and rank metrics for evaluation reports.

use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest input scored by direct pair enumeration; longer inputs use the
/// merge-sort count.
pub const EXHAUSTIVE_LIMIT: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricError {
    #[error("sequences have lengths {left} and {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("need at least {needed} values, got {got}")]
    TooShort { got: usize, needed: usize },
    #[error("value at index {index} is not finite")]
    NonFinite { index: usize },
    #[error("every value in the {which} sequence is tied; the correlation is undefined")]
    AllTied { which: &'static str },
    #[error("weight at index {index} is negative")]
    NegativeWeight { index: usize },
    #[error("all weights are zero")]
    ZeroWeights,
    #[error("all targets are zero under the given weights")]
    ZeroTargets,
}

/// Flat evaluation record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mse: f64,
    pub mae: f64,
    pub kendall_tau: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weighted_r2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spearman_sigma_error: Option<f64>,
}

fn check_pair(a: &[f64], b: &[f64], needed: usize) -> Result<(), MetricError> {
    if a.len() != b.len() {
        return Err(MetricError::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    if a.len() < needed {
        return Err(MetricError::TooShort { got: a.len(), needed });
    }
    for s in [a, b] {
        if let Some(index) = s.iter().position(|v| !v.is_finite()) {
            return Err(MetricError::NonFinite { index });
        }
    }
    Ok(())
}

/// Mean squared error; same arithmetic as the L2 pointwise loss.
pub fn mse(pred: &[f64], target: &[f64]) -> Result<f64, MetricError> {
    check_pair(pred, target, 1)?;
    let sum: f64 = pred
        .iter()
        .zip(target)
        .map(|(p, y)| {
            let r = p - y;
            r * r
        })
        .sum();
    Ok(sum / pred.len() as f64)
}

/// Mean absolute error; same arithmetic as the L1 pointwise loss.
pub fn mae(pred: &[f64], target: &[f64]) -> Result<f64, MetricError> {
    check_pair(pred, target, 1)?;
    let sum: f64 = pred.iter().zip(target).map(|(p, y)| libm::fabs(p - y)).sum();
    Ok(sum / pred.len() as f64)
}

fn tied_pairs(sorted: &[f64]) -> u64 {
    let mut total = 0u64;
    let mut run = 1u64;
    for w in sorted.windows(2) {
        if w[0] == w[1] {
            run += 1;
        } else {
            total += run * (run - 1) / 2;
            run = 1;
        }
    }
    total + run * (run - 1) / 2
}

fn tau_b(n: usize, score: i64, ties_a: u64, ties_b: u64) -> Result<f64, MetricError> {
    let n0 = (n as u64) * (n as u64 - 1) / 2;
    if ties_a == n0 {
        return Err(MetricError::AllTied { which: "first" });
    }
    if ties_b == n0 {
        return Err(MetricError::AllTied { which: "second" });
    }
    let denom = libm::sqrt((n0 - ties_a) as f64 * (n0 - ties_b) as f64);
    Ok(score as f64 / denom)
}

/// Kendall's tau-b with tie correction.
pub fn kendall_tau(a: &[f64], b: &[f64]) -> Result<f64, MetricError> {
    check_pair(a, b, 2)?;
    if a.len() <= EXHAUSTIVE_LIMIT {
        kendall_exhaustive(a, b)
    } else {
        kendall_merge(a, b)
    }
}

pub(crate) fn kendall_exhaustive(a: &[f64], b: &[f64]) -> Result<f64, MetricError> {
    let n = a.len();
    let (mut score, mut ties_a, mut ties_b) = (0i64, 0u64, 0u64);
    for i in 0..n {
        for j in i + 1..n {
            let da = a[i].partial_cmp(&a[j]).unwrap_or(Ordering::Equal);
            let db = b[i].partial_cmp(&b[j]).unwrap_or(Ordering::Equal);
            ties_a += (da == Ordering::Equal) as u64;
            ties_b += (db == Ordering::Equal) as u64;
            score += (da as i64) * (db as i64);
        }
    }
    tau_b(n, score, ties_a, ties_b)
}

/// Knight's O(n log n) count: sort by (a, b), then count the inversions of
/// b by merge sort.
pub(crate) fn kendall_merge(a: &[f64], b: &[f64]) -> Result<f64, MetricError> {
    let n = a.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&i, &j| a[i].total_cmp(&a[j]).then(b[i].total_cmp(&b[j])));
    let sa: Vec<f64> = idx.iter().map(|&i| a[i]).collect();
    let mut sb: Vec<f64> = idx.iter().map(|&i| b[i]).collect();

    let ties_a = tied_pairs(&sa);
    let mut joint = 0u64;
    let mut run = 1u64;
    for k in 1..n {
        if sa[k] == sa[k - 1] && sb[k] == sb[k - 1] {
            run += 1;
        } else {
            joint += run * (run - 1) / 2;
            run = 1;
        }
    }
    joint += run * (run - 1) / 2;

    let swaps = merge_count(&mut sb);
    let ties_b = tied_pairs(&sb);
    let n0 = (n as u64) * (n as u64 - 1) / 2;
    let score = n0 as i64 - ties_a as i64 - ties_b as i64 + joint as i64 - 2 * swaps as i64;
    tau_b(n, score, ties_a, ties_b)
}

/// Sorts `v` ascending and returns the number of strict inversions.
fn merge_count(v: &mut [f64]) -> u64 {
    let n = v.len();
    let mut buf = vec![0.0; n];
    let mut swaps = 0u64;
    let mut width = 1;
    while width < n {
        let mut lo = 0;
        while lo < n {
            let mid = (lo + width).min(n);
            let hi = (lo + 2 * width).min(n);
            let (mut i, mut j, mut k) = (lo, mid, lo);
            while i < mid && j < hi {
                if v[j] < v[i] {
                    swaps += (mid - i) as u64;
                    buf[k] = v[j];
                    j += 1;
                } else {
                    buf[k] = v[i];
                    i += 1;
                }
                k += 1;
            }
            buf[k..k + mid - i].copy_from_slice(&v[i..mid]);
            k += mid - i;
            buf[k..k + hi - j].copy_from_slice(&v[j..hi]);
            v[lo..hi].copy_from_slice(&buf[lo..hi]);
            lo = hi;
        }
        width *= 2;
    }
    swaps
}

/// `1 - sum(w (y - pred)^2) / sum(w y^2)`.
pub fn weighted_r2(pred: &[f64], target: &[f64], weights: &[f64]) -> Result<f64, MetricError> {
    check_pair(pred, target, 1)?;
    check_pair(weights, target, 1)?;
    if let Some(index) = weights.iter().position(|&w| w < 0.0) {
        return Err(MetricError::NegativeWeight { index });
    }
    if weights.iter().all(|&w| w == 0.0) {
        return Err(MetricError::ZeroWeights);
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for ((&p, &y), &w) in pred.iter().zip(target).zip(weights) {
        num += w * (y - p) * (y - p);
        den += w * y * y;
    }
    if den == 0.0 {
        return Err(MetricError::ZeroTargets);
    }
    Ok(1.0 - num / den)
}

/// Ranks starting at 1, ties sharing their average rank.
fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut ranks = vec![0.0; v.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && v[idx[end]] == v[idx[start]] {
            end += 1;
        }
        let rank = (start + end + 1) as f64 / 2.0;
        for &i in &idx[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Result<f64, MetricError> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 {
        return Err(MetricError::AllTied { which: "first" });
    }
    if sbb == 0.0 {
        return Err(MetricError::AllTied { which: "second" });
    }
    Ok((sab / libm::sqrt(saa * sbb)).clamp(-1.0, 1.0))
}

/// Spearman rank correlation: Pearson correlation of average ranks.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64, MetricError> {
    check_pair(a, b, 2)?;
    pearson(&average_ranks(a), &average_ranks(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn kendall_examples() {
        assert_eq!(kendall_tau(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
        assert_eq!(kendall_tau(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 1.0);
        assert!((kendall_tau(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn kendall_errors() {
        assert_eq!(
            kendall_tau(&[1.0], &[1.0]),
            Err(MetricError::TooShort { got: 1, needed: 2 })
        );
        assert_eq!(
            kendall_tau(&[2.0, 2.0, 2.0], &[1.0, 2.0, 3.0]),
            Err(MetricError::AllTied { which: "first" })
        );
        assert!(matches!(
            kendall_tau(&[1.0, 2.0], &[1.0]),
            Err(MetricError::LengthMismatch { .. })
        ));
        assert!(matches!(
            kendall_tau(&[1.0, f64::NAN], &[1.0, 2.0]),
            Err(MetricError::NonFinite { index: 1 })
        ));
    }

    #[test]
    fn kendall_large_input_uses_merge_count() {
        let n = EXHAUSTIVE_LIMIT + 1;
        let a: Vec<f64> = (0..n).map(|i| (i % 97) as f64).collect();
        let b: Vec<f64> = (0..n).map(|i| ((i * 31) % 101) as f64).collect();
        let fast = kendall_tau(&a, &b).unwrap();
        let slow = kendall_exhaustive(&a, &b).unwrap();
        assert!((fast - slow).abs() < 1e-12);
    }

    #[test]
    fn weighted_r2_examples() {
        let y = [1.0, -2.0, 0.5];
        assert_eq!(weighted_r2(&y, &y, &[1.0, 2.0, 0.5]).unwrap(), 1.0);
        assert_eq!(weighted_r2(&[0.0; 3], &y, &[1.0, 2.0, 0.5]).unwrap(), 0.0);
        assert_eq!(weighted_r2(&[0.0, 0.0], &[1.0, -1.0], &[1.0, 1.0]).unwrap(), 0.0);
        assert_eq!(weighted_r2(&y, &y, &[0.0; 3]), Err(MetricError::ZeroWeights));
        assert_eq!(weighted_r2(&[1.0], &[0.0], &[1.0]), Err(MetricError::ZeroTargets));
        assert_eq!(
            weighted_r2(&y, &y, &[1.0, -1.0, 1.0]),
            Err(MetricError::NegativeWeight { index: 1 })
        );
    }

    #[test]
    fn weighted_r2_split_record() {
        let pred = [0.4, 1.2, -0.3];
        let y = [0.5, 1.0, -1.0];
        let w = [1.0, 2.0, 3.0];
        let base = weighted_r2(&pred, &y, &w).unwrap();
        // record 1 duplicated with its weight split in two
        let split = weighted_r2(&[0.4, 1.2, -0.3, 1.2], &[0.5, 1.0, -1.0, 1.0], &[1.0, 1.5, 3.0, 0.5]).unwrap();
        assert!((base - split).abs() < 1e-15);
    }

    #[test]
    fn spearman_examples() {
        let a = [0.5, 1.0, 2.0, 3.5];
        let sq: Vec<f64> = a.iter().map(|v| v * v).collect();
        assert_eq!(spearman(&a, &sq).unwrap(), 1.0);
        let neg: Vec<f64> = a.iter().map(|v| -v).collect();
        assert_eq!(spearman(&a, &neg).unwrap(), -1.0);
        assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap() - 0.8).abs() < 1e-15);
        assert!(spearman(&[1.0, 1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn average_ranks_share_ties() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn point_metrics_match_pointwise_losses() {
        use crate::graph::Graph;
        use crate::losses::{pointwise_loss, RegressionKind};
        use crate::tensor::Tensor;
        let pred = [0.1, -2.0, 3.3, 0.7];
        let y = [0.0, 1.5, 3.0, -0.2];
        for (kind, metric) in [
            (RegressionKind::L2, mse as fn(&[f64], &[f64]) -> _),
            (RegressionKind::L1, mae),
        ] {
            let mut g = Graph::new();
            let p = g.parameter(Tensor::vector(pred.to_vec()));
            let l = pointwise_loss(&mut g, p, &Tensor::vector(y.to_vec()), kind).unwrap();
            assert_eq!(
                g.value(l).item().unwrap().to_bits(),
                metric(&pred, &y).unwrap().to_bits()
            );
        }
    }

    proptest! {
        #[test]
        fn kendall_symmetric_and_rank_invariant(
            v in proptest::collection::vec((-5i32..5, -5i32..5), 2..40)
        ) {
            let a: Vec<f64> = v.iter().map(|p| p.0 as f64).collect();
            let b: Vec<f64> = v.iter().map(|p| p.1 as f64).collect();
            let ab = kendall_tau(&a, &b);
            prop_assume!(ab.is_ok());
            let ab = ab.unwrap();
            prop_assert_eq!(ab, kendall_tau(&b, &a).unwrap());
            let cubed: Vec<f64> = a.iter().map(|x| x * x * x + 2.0 * x).collect();
            prop_assert!((ab - kendall_tau(&cubed, &b).unwrap()).abs() < 1e-15);
            prop_assert!((ab - kendall_merge(&a, &b).unwrap()).abs() < 1e-12);
            prop_assert!(ab.abs() <= 1.0);
        }
    }
}
