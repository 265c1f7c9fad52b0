//! Pointwise, pairwise and likelihood losses, recorded on a [`Graph`].
//!
//! Every loss takes its predictions as a graph node so gradients reach the
//! network, and its labels (and variances, where used) as plain values. The
//! variances that weight pairwise terms are always read as constants: no
//! gradient flows from a pairwise loss back into the network that produced
//! them.
//!
//! Multi-column predictions are row-major `[B, columns]`. A pairwise loss
//! over `lanes` variates reads the buffer as interleaved lanes, so the
//! multi-task case is `[B, N]` with `lanes = N` and the time-series case is
//! `[B, T * N]` (time-major within a row) with `lanes = N`.

mod pairwise;
mod sparse;

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{Graph, GraphError, NodeId};
use crate::tensor::Tensor;

pub use pairwise::{
    confidence_matrix, cprl_loss, hinge_mask, mcprl_loss, mtcprl_loss, pairwise_loss, prl_loss, uncertainty_matrix,
    HingeMask, PairwiseContext, SquareMatrix,
};
pub use sparse::{scprl_loss, sparse_pairs, SparseKey};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LossError {
    #[error("{what}: shape {left:?} does not match {right:?}")]
    Shape {
        what: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("loss over an empty batch")]
    EmptyBatch,
    #[error("invalid loss spec: {0}")]
    InvalidSpec(&'static str),
    #[error("variance at index {index} is {value}, must be positive")]
    NonPositiveVariance { index: usize, value: f64 },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairType {
    /// Mean absolute deviation of pair differences.
    #[default]
    Mae,
    /// Root of the mean squared deviation of pair differences.
    Rmse,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegressionKind {
    #[default]
    L2,
    L1,
    Huber {
        #[serde(default = "default_delta")]
        delta: f64,
    },
}

fn default_delta() -> f64 {
    1.0
}

/// How the target columns are grouped into pairwise variates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// One target column.
    #[default]
    Single,
    /// Pairs within each target column.
    MultiTask,
    /// `horizon` steps of N variates per row; pairs within each variate
    /// across both rows and steps.
    TimeSeries { horizon: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSpec {
    #[serde(default)]
    pub pair_type: PairType,
    #[serde(default)]
    pub reg_kind: RegressionKind,
    pub alpha: f64,
    #[serde(default)]
    pub theta: f64,
    #[serde(default)]
    pub mode: LossMode,
    /// Fraction of candidate pairs kept by the sparse variant; 1 is dense.
    #[serde(default = "one")]
    pub keep_fraction: f64,
}

fn one() -> f64 {
    1.0
}

impl LossSpec {
    pub fn new(alpha: f64) -> Self {
        Self {
            pair_type: PairType::Mae,
            reg_kind: RegressionKind::L2,
            alpha,
            theta: 0.0,
            mode: LossMode::Single,
            keep_fraction: 1.0,
        }
    }

    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(LossError::InvalidSpec("alpha must be a non-negative number"));
        }
        if !(self.theta >= 0.0 && self.theta.is_finite()) {
            return Err(LossError::InvalidSpec("theta must be a non-negative number"));
        }
        if !(self.keep_fraction > 0.0 && self.keep_fraction <= 1.0) {
            return Err(LossError::InvalidSpec("keep_fraction must be in (0, 1]"));
        }
        if let RegressionKind::Huber { delta } = self.reg_kind {
            if !(delta > 0.0 && delta.is_finite()) {
                return Err(LossError::InvalidSpec("huber delta must be positive"));
            }
        }
        if self.mode == (LossMode::TimeSeries { horizon: 0 }) {
            return Err(LossError::InvalidSpec("time-series horizon must be at least 1"));
        }
        Ok(())
    }

    /// Number of pairwise variates for `columns` target columns.
    pub fn lanes(&self, columns: usize) -> Result<usize, LossError> {
        match self.mode {
            LossMode::Single if columns == 1 => Ok(1),
            LossMode::Single => Err(LossError::InvalidSpec("single mode needs exactly one target column")),
            LossMode::MultiTask => Ok(columns),
            LossMode::TimeSeries { horizon } if horizon > 0 && columns.is_multiple_of(horizon) => Ok(columns / horizon),
            LossMode::TimeSeries { .. } => Err(LossError::InvalidSpec(
                "target column count must be a multiple of the horizon",
            )),
        }
    }
}

pub(crate) fn check_shape(what: &'static str, left: &[usize], right: &[usize]) -> Result<(), LossError> {
    if left != right {
        return Err(LossError::Shape {
            what,
            left: left.to_vec(),
            right: right.to_vec(),
        });
    }
    Ok(())
}

pub(crate) fn check_variances(sigma2: &[f64]) -> Result<(), LossError> {
    match sigma2.iter().enumerate().find(|(_, &v)| !(v > 0.0)) {
        Some((index, &value)) => Err(LossError::NonPositiveVariance { index, value }),
        None => Ok(()),
    }
}

/// Mean per-entry penalty of `pred - target`.
pub fn pointwise_loss(g: &mut Graph, pred: NodeId, target: &Tensor, kind: RegressionKind) -> Result<NodeId, LossError> {
    check_shape("pointwise loss", g.value(pred).shape(), target.shape())?;
    if target.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let y = g.constant(target.clone());
    let r = g.sub(pred, y)?;
    let per_entry = match kind {
        RegressionKind::L2 => g.square(r)?,
        RegressionKind::L1 => g.abs(r)?,
        RegressionKind::Huber { delta } => {
            // 0.5 c^2 + delta (|r| - |c|) with c = clamp(r, -delta, delta)
            let c = g.clamp(r, -delta, delta)?;
            let c2 = g.square(c)?;
            let quad = g.scale(c2, 0.5)?;
            let abs_r = g.abs(r)?;
            let abs_c = g.abs(c)?;
            let excess = g.sub(abs_r, abs_c)?;
            let lin = g.scale(excess, delta)?;
            g.add(quad, lin)?
        }
    };
    Ok(g.mean(per_entry)?)
}

/// Gaussian negative log-likelihood, `mean((y - mu)^2 / (2 sigma2) + ln(sigma2) / 2)`.
pub fn nll_loss(g: &mut Graph, mu: NodeId, sigma2: NodeId, target: &Tensor) -> Result<NodeId, LossError> {
    check_shape("nll mean", g.value(mu).shape(), target.shape())?;
    check_shape("nll variance", g.value(sigma2).shape(), target.shape())?;
    if target.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    check_variances(g.value(sigma2).values())?;
    let y = g.constant(target.clone());
    let r = g.sub(mu, y)?;
    let r2 = g.square(r)?;
    let ratio = g.div(r2, sigma2)?;
    let fit = g.scale(ratio, 0.5)?;
    let log_var = g.ln(sigma2)?;
    let spread = g.scale(log_var, 0.5)?;
    let per_entry = g.add(fit, spread)?;
    Ok(g.mean(per_entry)?)
}

/// Scalars of one combined training step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AdaprlLoss {
    /// Drives the main network: pointwise plus `alpha` times pairwise.
    pub main: NodeId,
    /// Drives the auxiliary network: NLL.
    pub aux: NodeId,
    pub pointwise: NodeId,
    /// Absent when `alpha` is 0.
    pub pairwise: Option<NodeId>,
}

/// Main and auxiliary objectives from one forward pass.
///
/// The variances are detached before they weight any pair. With
/// `keep_fraction < 1` the pairwise term is the sparse variant keyed by
/// `sparse`.
pub fn adaprl_loss(
    g: &mut Graph,
    pred: NodeId,
    mu: NodeId,
    sigma2: NodeId,
    target: &Tensor,
    spec: &LossSpec,
    sparse: SparseKey,
) -> Result<AdaprlLoss, LossError> {
    spec.validate()?;
    let pointwise = pointwise_loss(g, pred, target, spec.reg_kind)?;
    let aux = nll_loss(g, mu, sigma2, target)?;
    let columns = target.shape().get(1).copied().unwrap_or(1);
    let lanes = spec.lanes(columns)?;
    if spec.alpha == 0.0 {
        return Ok(AdaprlLoss {
            main: pointwise,
            aux,
            pointwise,
            pairwise: None,
        });
    }
    let detached = g.detach(sigma2)?;
    let s2: Vec<f64> = g.value(detached).values().to_vec();
    let pair = if spec.keep_fraction < 1.0 {
        scprl_loss(g, pred, target.values(), &s2, lanes, spec, sparse)?
    } else {
        pairwise_loss(g, pred, target.values(), Some(&s2), lanes, spec.theta, spec.pair_type)?
    };
    let weighted = g.scale(pair, spec.alpha)?;
    let main = g.add(pointwise, weighted)?;
    Ok(AdaprlLoss {
        main,
        aux,
        pointwise,
        pairwise: Some(pair),
    })
}

#[cfg(test)]
mod tests;
