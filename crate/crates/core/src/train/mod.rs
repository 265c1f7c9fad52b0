//! Minibatch training of the main and auxiliary networks.
//!
//! Every step runs both networks on one shuffled minibatch, builds the main
//! objective (pointwise plus weighted pairwise, variances detached) and the
//! auxiliary NLL objective from the same forward pass, then applies one Adam
//! update to the main parameters followed by one to the auxiliary
//! parameters. Validation MSE of the main network is checked after every
//! epoch; the best epoch's parameters are restored at the end.

mod adam;

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Batch, Dataset};
use crate::graph::{Gradients, Graph, GraphError, NodeId};
use crate::losses::{adaprl_loss, pointwise_loss, LossError, LossSpec, SparseKey};
use crate::metrics::{self, MetricError, MetricReport};
use crate::model::{ModelError, ModelPair, Network};
use crate::rng::{self, Purpose};
use crate::tensor::Tensor;

pub use adam::{adam_step, AdamConfig, AdamState};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(&'static str),
    #[error("{which} split has no rows")]
    EmptySplit { which: &'static str },
    #[error("non-finite loss at step {step} (epoch {epoch}): main {main_loss}, aux {aux_loss}")]
    NonFiniteLoss {
        step: u64,
        epoch: usize,
        main_loss: f64,
        aux_loss: f64,
    },
    #[error("non-finite validation MSE after epoch {epoch}")]
    NonFiniteValidation { epoch: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

impl From<GraphError> for TrainError {
    fn from(e: GraphError) -> Self {
        TrainError::Loss(LossError::Graph(e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub loss: LossSpec,
    /// Drives shuffling and sparse pair masks; set by the caller.
    #[serde(skip)]
    pub seed: u64,
    #[serde(default)]
    pub adam: AdamConfig,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config("learning_rate must be positive"));
        }
        if self.epochs == 0 {
            return Err(TrainError::Config("epochs must be at least 1"));
        }
        if self.batch_size < 2 {
            return Err(TrainError::Config("batch_size must be at least 2"));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.epsilon > 0.0) {
            return Err(TrainError::Config("adam constants out of range"));
        }
        self.loss.validate()?;
        Ok(())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    /// 1-based.
    pub epoch: usize,
    /// 0-based, counted across epochs.
    pub step: u64,
    pub main_loss: f64,
    pub aux_loss: f64,
    /// Present on the last step of each epoch.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub valid_mse: Option<f64>,
}

/// Patience counter on a metric to minimize.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: usize,
    pub wait: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Improved,
    Continue,
    Stop,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            wait: 0,
        }
    }

    /// Records the metric of 1-based `epoch`. Only a strict decrease counts
    /// as an improvement; training stops once `patience` epochs in a row
    /// fail to improve (a patience of 0 behaves like 1).
    pub fn update(&mut self, epoch: usize, value: f64) -> Verdict {
        if value < self.best {
            self.best = value;
            self.best_epoch = epoch;
            self.wait = 0;
            return Verdict::Improved;
        }
        self.wait += 1;
        if self.wait >= self.patience.max(1) {
            Verdict::Stop
        } else {
            Verdict::Continue
        }
    }
}

/// Result of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Parameters of the best validation epoch.
    pub model: ModelPair,
    pub main_opt: AdamState,
    pub aux_opt: AdamState,
    pub epochs_completed: usize,
    pub best_epoch: usize,
    pub best_valid_mse: f64,
    pub stopped_early: bool,
    pub log: Vec<LogRecord>,
}

/// Row order of every minibatch of one epoch.
pub fn epoch_batches(rows: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..rows).collect();
    order.shuffle(&mut rng::stream(seed, Purpose::Shuffle, epoch as u64));
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

fn grads_of<'a>(grads: &'a Gradients, ids: &[NodeId]) -> Vec<&'a Tensor> {
    ids.iter()
        .map(|id| grads.get(*id).expect("every parameter has a gradient"))
        .collect()
}

fn step_network(net: &mut Network, grads: &Gradients, ids: &[NodeId], opt: &mut AdamState, cfg: &TrainConfig) {
    let g = grads_of(grads, ids);
    adam_step(&mut net.params_mut(), &g, opt, cfg.learning_rate, &cfg.adam);
}

fn check_inputs(cfg: &TrainConfig, model: &ModelPair, train: &Dataset, valid: &Dataset) -> Result<(), TrainError> {
    cfg.validate()?;
    model.config.check_dataset(train)?;
    model.config.check_dataset(valid)?;
    if train.rows() == 0 {
        return Err(TrainError::EmptySplit { which: "training" });
    }
    if valid.rows() == 0 {
        return Err(TrainError::EmptySplit { which: "validation" });
    }
    cfg.loss.lanes(model.config.outputs())?;
    Ok(())
}

fn valid_mse(model: &ModelPair, valid: &Dataset) -> Result<f64, TrainError> {
    let batch = valid.full_batch();
    let pred = model.predict_main(&batch)?;
    Ok(metrics::mse(&pred, batch.targets.values()).unwrap_or(f64::NAN))
}

/// Shared epoch loop: `step` runs one minibatch and returns its two losses.
fn run_epochs(
    cfg: &TrainConfig,
    mut model: ModelPair,
    train: &Dataset,
    valid: &Dataset,
    mut step: impl FnMut(&mut ModelPair, &mut AdamState, &mut AdamState, &Batch, u64) -> Result<(f64, f64), TrainError>,
    observer: &mut dyn FnMut(&ModelPair, &LogRecord),
) -> Result<TrainState, TrainError> {
    check_inputs(cfg, &model, train, valid)?;
    let mut main_opt = AdamState::new(&model.main.params());
    let mut aux_opt = AdamState::new(&model.aux.params());
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = model.clone();
    let mut log = Vec::new();
    let mut global = 0u64;
    let mut epochs_completed = 0;
    let mut stopped_early = false;
    for epoch in 1..=cfg.epochs {
        for rows in epoch_batches(train.rows(), cfg.batch_size, cfg.seed, epoch) {
            let batch = train.batch(&rows);
            let (main_loss, aux_loss) = step(&mut model, &mut main_opt, &mut aux_opt, &batch, global)?;
            if !(main_loss.is_finite() && aux_loss.is_finite()) {
                return Err(TrainError::NonFiniteLoss {
                    step: global,
                    epoch,
                    main_loss,
                    aux_loss,
                });
            }
            let record = LogRecord {
                epoch,
                step: global,
                main_loss,
                aux_loss,
                valid_mse: None,
            };
            observer(&model, &record);
            log.push(record);
            global += 1;
        }
        let mse = valid_mse(&model, valid)?;
        if !mse.is_finite() {
            return Err(TrainError::NonFiniteValidation { epoch });
        }
        if let Some(last) = log.last_mut() {
            last.valid_mse = Some(mse);
        }
        epochs_completed = epoch;
        match stopper.update(epoch, mse) {
            Verdict::Improved => best = model.clone(),
            Verdict::Continue => {}
            Verdict::Stop => {
                stopped_early = epoch < cfg.epochs;
                break;
            }
        }
    }
    Ok(TrainState {
        model: best,
        main_opt,
        aux_opt,
        epochs_completed,
        best_epoch: stopper.best_epoch,
        best_valid_mse: stopper.best,
        stopped_early,
        log,
    })
}

/// Trains both networks; see the module docs.
pub fn fit(cfg: &TrainConfig, model: ModelPair, train: &Dataset, valid: &Dataset) -> Result<TrainState, TrainError> {
    fit_observed(cfg, model, train, valid, &mut |_, _| {})
}

/// [`fit`] with a callback after every optimizer step.
pub fn fit_observed(
    cfg: &TrainConfig,
    model: ModelPair,
    train: &Dataset,
    valid: &Dataset,
    observer: &mut dyn FnMut(&ModelPair, &LogRecord),
) -> Result<TrainState, TrainError> {
    let step =
        |model: &mut ModelPair, main_opt: &mut AdamState, aux_opt: &mut AdamState, batch: &Batch, global: u64| {
            let mut g = Graph::new();
            let main = model.forward_main(&mut g, batch)?;
            let aux = model.forward_aux(&mut g, batch)?;
            let key = SparseKey {
                mask_seed: cfg.seed,
                batch_index: global,
            };
            let loss = adaprl_loss(&mut g, main.pred, aux.mu, aux.sigma2, &batch.targets, &cfg.loss, key)?;
            let values = (g.value(loss.main).values()[0], g.value(loss.aux).values()[0]);
            if !(values.0.is_finite() && values.1.is_finite()) {
                return Ok(values);
            }
            let main_grads = g.backward(loss.main)?;
            let aux_grads = g.backward(loss.aux)?;
            step_network(&mut model.main, &main_grads, &main.params, main_opt, cfg);
            step_network(&mut model.aux, &aux_grads, &aux.params, aux_opt, cfg);
            Ok(values)
        };
    run_epochs(cfg, model, train, valid, step, observer)
}

/// Reference trainer with the pointwise loss only: the main network alone,
/// no auxiliary forward pass and no pairwise term. The auxiliary network is
/// returned untouched and the log's `aux_loss` is 0.
pub fn fit_pointwise(
    cfg: &TrainConfig,
    model: ModelPair,
    train: &Dataset,
    valid: &Dataset,
) -> Result<TrainState, TrainError> {
    let step = |model: &mut ModelPair, main_opt: &mut AdamState, _: &mut AdamState, batch: &Batch, _: u64| {
        let mut g = Graph::new();
        let main = model.forward_main(&mut g, batch)?;
        let loss = pointwise_loss(&mut g, main.pred, &batch.targets, cfg.loss.reg_kind)?;
        let value = g.value(loss).values()[0];
        if !value.is_finite() {
            return Ok((value, 0.0));
        }
        let grads = g.backward(loss)?;
        step_network(&mut model.main, &grads, &main.params, main_opt, cfg);
        Ok((value, 0.0))
    };
    run_epochs(cfg, model, train, valid, step, &mut |_, _| {})
}

/// Metrics plus per-row outputs of both networks, row-major `[rows, d_t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: MetricReport,
    pub pred: Vec<f64>,
    pub mu: Vec<f64>,
    /// Square root of the predicted variance.
    pub sigma: Vec<f64>,
}

/// Scores the main network's predictions and exports the auxiliary mean and
/// standard deviation.
///
/// Kendall's tau is averaged over target columns; a column where it is
/// undefined (fewer than two rows, or all values tied) contributes 0.
pub fn evaluate(model: &ModelPair, ds: &Dataset) -> Result<Evaluation, TrainError> {
    model.config.check_dataset(ds)?;
    if ds.rows() == 0 {
        return Err(TrainError::EmptySplit { which: "evaluation" });
    }
    let batch = ds.full_batch();
    let p = model.predict(&batch)?;
    let y = batch.targets.values();
    let d_t = model.config.outputs();
    let mse = metrics::mse(&p.pred, y)?;
    let mae = metrics::mae(&p.pred, y)?;
    let mut tau = 0.0;
    for k in 0..d_t {
        let pk: Vec<f64> = p.pred.iter().skip(k).step_by(d_t).copied().collect();
        let yk: Vec<f64> = y.iter().skip(k).step_by(d_t).copied().collect();
        tau += metrics::kendall_tau(&pk, &yk).unwrap_or(0.0);
    }
    let weighted_r2 = match ds.weights() {
        Some(w) => {
            let wide: Vec<f64> = w.iter().flat_map(|&v| core::iter::repeat_n(v, d_t)).collect();
            metrics::weighted_r2(&p.pred, y, &wide).ok()
        }
        None => None,
    };
    let sigma: Vec<f64> = p.sigma2.iter().map(|&v| libm::sqrt(v)).collect();
    let abs_err: Vec<f64> = p.pred.iter().zip(y).map(|(a, b)| libm::fabs(a - b)).collect();
    let spearman_sigma_error = metrics::spearman(&sigma, &abs_err).ok();
    Ok(Evaluation {
        report: MetricReport {
            mse,
            mae,
            kendall_tau: tau / d_t as f64,
            weighted_r2,
            spearman_sigma_error,
        },
        pred: p.pred,
        mu: p.mu,
        sigma,
    })
}
