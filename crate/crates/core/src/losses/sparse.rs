use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use super::pairwise::{confidence_entry, finish, lane_values};
use super::{check_shape, check_variances, LossError, LossSpec, PairType};
use crate::graph::{Graph, NodeId};
use crate::rng::{self, Purpose};
use crate::tensor::Tensor;

/// Identifies the keep-set of one batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SparseKey {
    pub mask_seed: u64,
    pub batch_index: u64,
}

/// Candidate pairs `(i, j)` of an `n`-row axis kept independently with
/// probability `keep`, in row-major order.
///
/// Gaps between kept pairs are drawn from the geometric law, so the cost is
/// proportional to the number of kept pairs rather than to `n^2`.
pub fn sparse_pairs(n: usize, keep: f64, key: SparseKey) -> Vec<(u32, u32)> {
    let total = n * n;
    let pair = |c: usize| ((c / n) as u32, (c % n) as u32);
    if keep >= 1.0 {
        return (0..total).map(pair).collect();
    }
    let mut rng = rng::stream(key.mask_seed, Purpose::SparseMask, key.batch_index);
    let ln_drop = libm::log1p(-keep);
    let mut out = Vec::with_capacity((total as f64 * keep * 1.1) as usize + 16);
    let mut pos = 0usize;
    while pos < total {
        let u: f64 = rng.random();
        let skip = libm::floor(libm::log1p(-u) / ln_drop);
        if !(skip < (total - pos) as f64) {
            break;
        }
        pos += skip as usize;
        out.push(pair(pos));
        pos += 1;
    }
    out
}

/// Confidence-weighted pairwise loss restricted to a random keep-set of
/// candidate pairs shared by all lanes.
///
/// With `keep_fraction = 1` this is bit-identical to the dense loss: pairs
/// are visited in the same order and each weight is computed by the same
/// arithmetic.
pub fn scprl_loss(
    g: &mut Graph,
    pred: NodeId,
    target: &[f64],
    sigma2: &[f64],
    lanes: usize,
    spec: &LossSpec,
    key: SparseKey,
) -> Result<NodeId, LossError> {
    let keep = spec.keep_fraction;
    if !(keep > 0.0 && keep <= 1.0) {
        return Err(LossError::InvalidSpec("keep_fraction must be in (0, 1]"));
    }
    check_shape("pairwise predictions", &[g.value(pred).len()], &[target.len()])?;
    check_shape("pairwise variances", &[sigma2.len()], &[target.len()])?;
    check_variances(sigma2)?;
    if lanes == 0 || !target.len().is_multiple_of(lanes) {
        return Err(LossError::Shape {
            what: "pairwise lanes",
            left: vec![target.len()],
            right: vec![lanes],
        });
    }
    let n = target.len() / lanes;
    let kept = sparse_pairs(n, keep, key);

    let mut terms = Vec::with_capacity(lanes);
    let mut d = 0;
    for k in 0..lanes {
        let y = lane_values(target, lanes, k);
        let s = lane_values(sigma2, lanes, k);
        let smin = s.iter().copied().fold(f64::INFINITY, f64::min);
        let smax = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        // rounding is monotone, so these are the extremes of the full matrix
        let (umin, umax) = (smin + smin, smax + smax);
        let mut pairs = Vec::new();
        let mut dy = Vec::new();
        let mut weights = Vec::new();
        for &(i, j) in &kept {
            let diff = y[i as usize] - y[j as usize];
            if diff > spec.theta {
                pairs.push((i, j));
                dy.push(diff);
                weights.push(confidence_entry(s[i as usize] + s[j as usize], umin, umax));
            }
        }
        d += pairs.len();
        let mask: Arc<[bool]> = vec![true; pairs.len()].into();
        let ds = g.pair_diff_lane(pred, lanes, k, pairs.into())?;
        let dy = g.constant(Tensor::vector(dy));
        let r = g.sub(ds, dy)?;
        let e = match spec.pair_type {
            PairType::Mae => g.abs(r)?,
            PairType::Rmse => g.square(r)?,
        };
        terms.push(g.masked_weighted_sum(e, mask, weights.into())?);
    }
    finish(g, &terms, d, spec.pair_type)
}
