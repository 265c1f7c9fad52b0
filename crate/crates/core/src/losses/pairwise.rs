use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use super::{check_shape, check_variances, LossError, LossSpec, PairType};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

/// Boolean `n x n` pair-validity matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct HingeMask {
    n: usize,
    bits: Arc<[bool]>,
    count: usize,
}

impl HingeMask {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.n + j]
    }

    /// Number of true entries.
    pub fn count(&self) -> usize {
        self.count
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }
}

/// Real `n x n` matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SquareMatrix {
    n: usize,
    values: Arc<[f64]>,
}

impl SquareMatrix {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn filled(n: usize, value: f64) -> Self {
        Self {
            n,
            values: vec![value; n * n].into(),
        }
    }
}

pub(crate) fn lane_values(flat: &[f64], lanes: usize, lane: usize) -> Vec<f64> {
    flat.iter().skip(lane).step_by(lanes).copied().collect()
}

/// `M[i][j]` holds iff `y[i] - y[j] > theta`.
pub fn hinge_mask(y: &[f64], theta: f64) -> HingeMask {
    let n = y.len();
    let mut count = 0;
    let mut bits = Vec::with_capacity(n * n);
    for &yi in y {
        for &yj in y {
            let keep = yi - yj > theta;
            count += keep as usize;
            bits.push(keep);
        }
    }
    HingeMask {
        n,
        bits: bits.into(),
        count,
    }
}

/// `U[i][j] = sigma2[i] + sigma2[j]`.
pub fn uncertainty_matrix(sigma2: &[f64]) -> Result<SquareMatrix, LossError> {
    check_variances(sigma2)?;
    let n = sigma2.len();
    let mut values = Vec::with_capacity(n * n);
    for &a in sigma2 {
        values.extend(sigma2.iter().map(|&b| a + b));
    }
    Ok(SquareMatrix {
        n,
        values: values.into(),
    })
}

/// Confidence of one pair given the extremes of its uncertainty matrix.
#[inline]
pub(crate) fn confidence_entry(u: f64, min: f64, max: f64) -> f64 {
    if max == min {
        1.0
    } else {
        2.0 * (max - u) / (max - min)
    }
}

/// Inverse min-max rescaling of `U` onto `[0, 2]`; constant `U` maps to 1.
pub fn confidence_matrix(u: &SquareMatrix) -> SquareMatrix {
    let min = u.values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = u.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    SquareMatrix {
        n: u.n,
        values: u.values.iter().map(|&v| confidence_entry(v, min, max)).collect(),
    }
}

/// Masks and weights for every lane of one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct PairwiseContext {
    pub lanes: usize,
    /// Rows on the pair axis.
    pub n: usize,
    pub masks: Vec<HingeMask>,
    /// Empty when unweighted.
    pub uncertainty: Vec<SquareMatrix>,
    /// Empty when unweighted.
    pub confidence: Vec<SquareMatrix>,
    /// Pairs contributing to the loss, over all lanes.
    pub d: usize,
}

impl PairwiseContext {
    pub fn new(target: &[f64], sigma2: Option<&[f64]>, lanes: usize, theta: f64) -> Result<Self, LossError> {
        if lanes == 0 || !target.len().is_multiple_of(lanes) {
            return Err(LossError::Shape {
                what: "pairwise lanes",
                left: vec![target.len()],
                right: vec![lanes],
            });
        }
        let n = target.len() / lanes;
        let masks: Vec<HingeMask> = (0..lanes)
            .map(|k| hinge_mask(&lane_values(target, lanes, k), theta))
            .collect();
        let (mut uncertainty, mut confidence) = (Vec::new(), Vec::new());
        if let Some(s2) = sigma2 {
            check_shape("pairwise variances", &[s2.len()], &[target.len()])?;
            for k in 0..lanes {
                let u = uncertainty_matrix(&lane_values(s2, lanes, k))?;
                confidence.push(confidence_matrix(&u));
                uncertainty.push(u);
            }
        }
        let d = masks.iter().map(HingeMask::count).sum();
        Ok(Self {
            lanes,
            n,
            masks,
            uncertainty,
            confidence,
            d,
        })
    }
}

fn target_diffs(target: &[f64], lanes: usize, lane: usize) -> Tensor {
    let y = lane_values(target, lanes, lane);
    let mut out = Vec::with_capacity(y.len() * y.len());
    for &yi in &y {
        out.extend(y.iter().map(|&yj| yi - yj));
    }
    Tensor::from_parts(vec![y.len(), y.len()], out)
}

/// Weighted sum of per-pair penalties over one lane's masked pairs.
#[allow(clippy::too_many_arguments)]
fn lane_term(
    g: &mut Graph,
    pred: NodeId,
    target: &[f64],
    lanes: usize,
    lane: usize,
    mask: &HingeMask,
    weights: Arc<[f64]>,
    pair_type: PairType,
) -> Result<NodeId, LossError> {
    let ds = g.outer_diff_lane(pred, lanes, lane)?;
    let dy = g.constant(target_diffs(target, lanes, lane));
    let r = g.sub(ds, dy)?;
    let e = match pair_type {
        PairType::Mae => g.abs(r)?,
        PairType::Rmse => g.square(r)?,
    };
    Ok(g.masked_weighted_sum(e, mask.bits.clone(), weights)?)
}

/// Sums lane terms and normalizes by `d`; 0 when no pair contributes.
pub(crate) fn finish(g: &mut Graph, terms: &[NodeId], d: usize, pair_type: PairType) -> Result<NodeId, LossError> {
    if d == 0 {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    let count = g.constant(Tensor::scalar(d as f64));
    let mean = g.div(total, count)?;
    Ok(match pair_type {
        PairType::Mae => mean,
        PairType::Rmse => g.sqrt(mean)?,
    })
}

fn check_pred(g: &Graph, pred: NodeId, target: &[f64]) -> Result<(), LossError> {
    let len = g.value(pred).len();
    check_shape("pairwise predictions", &[len], &[target.len()])
}

/// Dense pairwise loss over `lanes` interleaved variates, weighted by
/// confidence when variances are given.
pub fn pairwise_loss(
    g: &mut Graph,
    pred: NodeId,
    target: &[f64],
    sigma2: Option<&[f64]>,
    lanes: usize,
    theta: f64,
    pair_type: PairType,
) -> Result<NodeId, LossError> {
    check_pred(g, pred, target)?;
    let ctx = PairwiseContext::new(target, sigma2, lanes, theta)?;
    let ones: Arc<[f64]> = if ctx.confidence.is_empty() {
        vec![1.0; ctx.n * ctx.n].into()
    } else {
        Arc::from(Vec::new())
    };
    let mut terms = Vec::with_capacity(lanes);
    for k in 0..lanes {
        let weights = match ctx.confidence.get(k) {
            Some(c) => c.values.clone(),
            None => ones.clone(),
        };
        terms.push(lane_term(g, pred, target, lanes, k, &ctx.masks[k], weights, pair_type)?);
    }
    finish(g, &terms, ctx.d, pair_type)
}

/// Unweighted pairwise loss over a single column.
pub fn prl_loss(
    g: &mut Graph,
    pred: NodeId,
    target: &[f64],
    mask: &HingeMask,
    pair_type: PairType,
) -> Result<NodeId, LossError> {
    cprl_loss(
        g,
        pred,
        target,
        mask,
        &SquareMatrix::filled(target.len(), 1.0),
        pair_type,
    )
}

/// Confidence-weighted pairwise loss over a single column.
pub fn cprl_loss(
    g: &mut Graph,
    pred: NodeId,
    target: &[f64],
    mask: &HingeMask,
    confidence: &SquareMatrix,
    pair_type: PairType,
) -> Result<NodeId, LossError> {
    check_pred(g, pred, target)?;
    check_shape("hinge mask", &[mask.n], &[target.len()])?;
    check_shape("confidence matrix", &[confidence.n], &[target.len()])?;
    let term = lane_term(g, pred, target, 1, 0, mask, confidence.values.clone(), pair_type)?;
    finish(g, &[term], mask.count, pair_type)
}

fn columns(target: &Tensor) -> Result<(usize, usize), LossError> {
    target.dims2().ok_or_else(|| LossError::Shape {
        what: "targets must be [rows, columns]",
        left: target.shape().to_vec(),
        right: vec![0, 0],
    })
}

/// Multi-task loss on `[B, N]`: pairs within each target column, one global
/// normalizer.
pub fn mcprl_loss(
    g: &mut Graph,
    pred: NodeId,
    target: &Tensor,
    sigma2: &Tensor,
    spec: &LossSpec,
) -> Result<NodeId, LossError> {
    mtcprl_loss(g, pred, target, sigma2, 1, spec)
}

/// Time-series loss on `[B, T * N]`: pairs within each variate over the
/// flattened row and step axes.
pub fn mtcprl_loss(
    g: &mut Graph,
    pred: NodeId,
    target: &Tensor,
    sigma2: &Tensor,
    horizon: usize,
    spec: &LossSpec,
) -> Result<NodeId, LossError> {
    let (_, cols) = columns(target)?;
    check_shape("predictions", g.value(pred).shape(), target.shape())?;
    check_shape("variances", sigma2.shape(), target.shape())?;
    if horizon == 0 || cols == 0 || cols % horizon != 0 {
        return Err(LossError::InvalidSpec(
            "target column count must be a multiple of the horizon",
        ));
    }
    pairwise_loss(
        g,
        pred,
        target.values(),
        Some(sigma2.values()),
        cols / horizon,
        spec.theta,
        spec.pair_type,
    )
}
