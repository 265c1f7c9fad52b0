//! The main regression network and its auxiliary probabilistic twin.
//!
//! Both networks share one architecture: categorical columns go through
//! learned embedding tables, the embeddings and numeric columns feed a relu
//! MLP, and linear heads produce the outputs. The main network has a single
//! head of width `d_t`. The auxiliary network has two heads of width `d_t`
//! (mean and raw log-variance), which together form one output layer of
//! width `2 d_t`.
//!
//! The first layer keeps one weight block per input group instead of one
//! matrix over the concatenated input; the sum of the block products is the
//! same affine map.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Batch, ColumnKind, Dataset};
use crate::graph::{Graph, GraphError, NodeId};
use crate::rng::{self, Purpose, Rng};
use crate::tensor::Tensor;

/// Raw log-variance is clamped to this symmetric range before `exp`.
pub const LOG_VARIANCE_BOUND: f64 = 10.0;
const EMBEDDING_STD: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(&'static str),
    #[error("batch layout mismatch: expected {expected}, got {actual}")]
    Layout { expected: String, actual: String },
    #[error("column `{column}`: code {code} is outside the vocabulary of {vocabulary}")]
    OutOfVocabulary {
        column: String,
        code: u32,
        vocabulary: usize,
    },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoricalInput {
    pub name: String,
    pub vocabulary: Vec<String>,
}

/// Input layout and layer widths shared by both networks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub numeric: Vec<String>,
    pub categorical: Vec<CategoricalInput>,
    pub targets: Vec<String>,
    pub embedding_dim: usize,
    pub hidden: Vec<usize>,
}

impl MlpConfig {
    /// Layout read off a dataset's schema.
    pub fn for_dataset(ds: &Dataset, embedding_dim: usize, hidden: Vec<usize>) -> Self {
        Self {
            numeric: ds.numeric_columns().map(|c| c.name().into()).collect(),
            categorical: ds
                .categorical_columns()
                .map(|c| CategoricalInput {
                    name: c.name().into(),
                    vocabulary: c.codes().map(|(_, v)| v.to_vec()).unwrap_or_default(),
                })
                .collect(),
            targets: ds.target_columns().map(|c| c.name().into()).collect(),
            embedding_dim,
            hidden,
        }
    }

    pub fn outputs(&self) -> usize {
        self.targets.len()
    }

    pub fn input_width(&self) -> usize {
        self.numeric.len() + self.categorical.len() * self.embedding_dim
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.targets.is_empty() {
            return Err(ModelError::Config("at least one target is required"));
        }
        if !self.categorical.is_empty() && self.embedding_dim == 0 {
            return Err(ModelError::Config("embedding width must be at least 1"));
        }
        if self.categorical.iter().any(|c| c.vocabulary.is_empty()) {
            return Err(ModelError::Config("vocabulary sizes must be at least 1"));
        }
        if self.input_width() == 0 {
            return Err(ModelError::Config("model has no inputs"));
        }
        if self.hidden.contains(&0) {
            return Err(ModelError::Config("hidden widths must be at least 1"));
        }
        Ok(())
    }

    /// Checks that `ds` has the columns this layout was built for.
    pub fn check_dataset(&self, ds: &Dataset) -> Result<(), ModelError> {
        let names = |kind| -> Vec<String> {
            ds.columns()
                .iter()
                .filter(|c| c.kind() == kind)
                .map(|c| c.name().into())
                .collect()
        };
        let cats: Vec<String> = self.categorical.iter().map(|c| c.name.clone()).collect();
        for (kind, expected) in [
            (ColumnKind::Numeric, &self.numeric),
            (ColumnKind::Categorical, &cats),
            (ColumnKind::Target, &self.targets),
        ] {
            let actual = names(kind);
            if &actual != expected {
                return Err(ModelError::Layout {
                    expected: format!("{kind:?} columns {expected:?}"),
                    actual: format!("{actual:?}"),
                });
            }
        }
        Ok(())
    }
}

/// Affine layer over one or more input blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// One `[block width, out]` matrix per input block.
    pub blocks: Vec<Tensor>,
    /// `[1, out]`.
    pub bias: Tensor,
}

impl Dense {
    fn glorot(in_widths: &[usize], out: usize, fan_out: usize, rng: &mut Rng) -> Self {
        let fan_in: usize = in_widths.iter().sum();
        let limit = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
        let blocks = in_widths
            .iter()
            .map(|&w| {
                let v = (0..w * out).map(|_| rng.random_range(-limit..=limit)).collect();
                Tensor::from_parts(vec![w, out], v)
            })
            .collect();
        Self {
            blocks,
            bias: Tensor::zeros(vec![1, out]),
        }
    }

    fn out(&self) -> usize {
        self.bias.shape()[1]
    }
}

/// One parameter set: embeddings, hidden layers and output heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub embeddings: Vec<Tensor>,
    pub hidden: Vec<Dense>,
    pub heads: Vec<Dense>,
}

impl Network {
    fn init(config: &MlpConfig, head_widths: &[usize], rng: &mut Rng) -> Self {
        let embed = Normal::new(0.0, EMBEDDING_STD).expect("valid std");
        let embeddings = config
            .categorical
            .iter()
            .map(|c| {
                let v = (0..c.vocabulary.len() * config.embedding_dim)
                    .map(|_| embed.sample(rng))
                    .collect();
                Tensor::from_parts(vec![c.vocabulary.len(), config.embedding_dim], v)
            })
            .collect();
        let mut widths = input_blocks(config);
        let mut hidden = Vec::with_capacity(config.hidden.len());
        for &h in &config.hidden {
            hidden.push(Dense::glorot(&widths, h, h, rng));
            widths = vec![h];
        }
        let fan_out: usize = head_widths.iter().sum();
        let heads = head_widths
            .iter()
            .map(|&w| Dense::glorot(&widths, w, fan_out, rng))
            .collect();
        Self {
            embeddings,
            hidden,
            heads,
        }
    }

    /// Parameters in canonical order, paired with stable names.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, e) in self.embeddings.iter().enumerate() {
            out.push((format!("embedding.{i}"), e));
        }
        for (prefix, layers) in [("hidden", &self.hidden), ("head", &self.heads)] {
            for (l, d) in layers.iter().enumerate() {
                for (b, w) in d.blocks.iter().enumerate() {
                    out.push((format!("{prefix}.{l}.block.{b}"), w));
                }
                out.push((format!("{prefix}.{l}.bias"), &d.bias));
            }
        }
        out
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.named_params().into_iter().map(|(_, t)| t).collect()
    }

    /// Mutable parameters, same order as [`Network::params`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self.embeddings.iter_mut().collect();
        for d in self.hidden.iter_mut().chain(self.heads.iter_mut()) {
            out.extend(d.blocks.iter_mut());
            out.push(&mut d.bias);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    /// Records the forward pass; returns one output node per head and the
    /// parameter nodes in canonical order.
    fn forward(
        &self,
        config: &MlpConfig,
        g: &mut Graph,
        batch: &Batch,
    ) -> Result<(Vec<NodeId>, Vec<NodeId>), ModelError> {
        check_batch(config, batch)?;
        let params: Vec<NodeId> = self.params().into_iter().map(|t| g.parameter(t.clone())).collect();
        let rows = batch.len();
        let mut cursor = 0usize;
        let mut next = || {
            let id = params[cursor];
            cursor += 1;
            id
        };

        let mut inputs = Vec::new();
        if !config.numeric.is_empty() {
            inputs.push(g.constant(batch.numeric.clone()));
        }
        for (col, codes) in config.categorical.iter().zip(&batch.categorical) {
            let vocab = col.vocabulary.len();
            let mut onehot = vec![0.0; rows * vocab];
            for (r, &c) in codes.iter().enumerate() {
                onehot[r * vocab + c as usize] = 1.0;
            }
            let onehot = g.constant(Tensor::from_parts(vec![rows, vocab], onehot));
            let table = next();
            inputs.push(g.matmul(onehot, table)?);
        }
        let ones = g.constant(Tensor::filled(vec![rows, 1], 1.0));

        let affine = |g: &mut Graph, layer: &Dense, inputs: &[NodeId], next: &mut dyn FnMut() -> NodeId| {
            let mut acc: Option<NodeId> = None;
            for &x in inputs {
                let w = next();
                let p = g.matmul(x, w)?;
                acc = Some(match acc {
                    Some(a) => g.add(a, p)?,
                    None => p,
                });
            }
            let b = next();
            let bias = g.matmul(ones, b)?;
            debug_assert_eq!(g.value(bias).shape(), &[rows, layer.out()]);
            Ok::<NodeId, GraphError>(match acc {
                Some(a) => g.add(a, bias)?,
                None => bias,
            })
        };

        for layer in &self.hidden {
            let z = affine(g, layer, &inputs, &mut next)?;
            inputs = vec![g.relu(z)?];
        }
        let mut outputs = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            outputs.push(affine(g, head, &inputs, &mut next)?);
        }
        Ok((outputs, params))
    }
}

fn input_blocks(config: &MlpConfig) -> Vec<usize> {
    let mut w = Vec::new();
    if !config.numeric.is_empty() {
        w.push(config.numeric.len());
    }
    w.extend(config.categorical.iter().map(|_| config.embedding_dim));
    w
}

fn check_batch(config: &MlpConfig, batch: &Batch) -> Result<(), ModelError> {
    let num_cols = batch.numeric.shape().get(1).copied().unwrap_or(0);
    if num_cols != config.numeric.len() || batch.categorical.len() != config.categorical.len() {
        return Err(ModelError::Layout {
            expected: format!(
                "{} numeric and {} categorical columns",
                config.numeric.len(),
                config.categorical.len()
            ),
            actual: format!("{num_cols} numeric and {} categorical columns", batch.categorical.len()),
        });
    }
    for (col, codes) in config.categorical.iter().zip(&batch.categorical) {
        if let Some(&code) = codes.iter().find(|&&c| c as usize >= col.vocabulary.len()) {
            return Err(ModelError::OutOfVocabulary {
                column: col.name.clone(),
                code,
                vocabulary: col.vocabulary.len(),
            });
        }
    }
    Ok(())
}

/// Output of the main network on a batch.
#[derive(Debug, Clone)]
pub struct MainForward {
    /// `[B, d_t]` point predictions.
    pub pred: NodeId,
    pub params: Vec<NodeId>,
}

/// Output of the auxiliary network on a batch.
#[derive(Debug, Clone)]
pub struct AuxForward {
    /// `[B, d_t]` predicted means.
    pub mu: NodeId,
    /// `[B, d_t]` unclamped log-variances.
    pub raw_log_var: NodeId,
    /// `[B, d_t]` variances, `exp(clamp(raw_log_var))`.
    pub sigma2: NodeId,
    pub params: Vec<NodeId>,
}

/// Plain-value predictions of both networks.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub pred: Vec<f64>,
    pub mu: Vec<f64>,
    pub sigma2: Vec<f64>,
}

/// Main network (point estimates) and auxiliary network (mean, variance).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelPair {
    pub config: MlpConfig,
    pub main: Network,
    pub aux: Network,
}

impl ModelPair {
    /// Glorot-uniform weights, zero biases, N(0, 0.01^2) embeddings.
    pub fn init(config: MlpConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let d_t = config.outputs();
        let main = Network::init(&config, &[d_t], &mut rng::stream(seed, Purpose::Init, 0));
        let aux = Network::init(&config, &[d_t, d_t], &mut rng::stream(seed, Purpose::Init, 1));
        Ok(Self { config, main, aux })
    }

    pub fn forward_main(&self, g: &mut Graph, batch: &Batch) -> Result<MainForward, ModelError> {
        let (out, params) = self.main.forward(&self.config, g, batch)?;
        Ok(MainForward { pred: out[0], params })
    }

    pub fn forward_aux(&self, g: &mut Graph, batch: &Batch) -> Result<AuxForward, ModelError> {
        let (out, params) = self.aux.forward(&self.config, g, batch)?;
        let clamped = g.clamp(out[1], -LOG_VARIANCE_BOUND, LOG_VARIANCE_BOUND)?;
        let sigma2 = g.exp(clamped)?;
        Ok(AuxForward {
            mu: out[0],
            raw_log_var: out[1],
            sigma2,
            params,
        })
    }

    /// Runs both networks outside of training.
    pub fn predict(&self, batch: &Batch) -> Result<Prediction, ModelError> {
        let mut g = Graph::new();
        let main = self.forward_main(&mut g, batch)?;
        let aux = self.forward_aux(&mut g, batch)?;
        Ok(Prediction {
            pred: g.value(main.pred).values().to_vec(),
            mu: g.value(aux.mu).values().to_vec(),
            sigma2: g.value(aux.sigma2).values().to_vec(),
        })
    }

    /// Main-network predictions only.
    pub fn predict_main(&self, batch: &Batch) -> Result<Vec<f64>, ModelError> {
        let mut g = Graph::new();
        let main = self.forward_main(&mut g, batch)?;
        Ok(g.value(main.pred).values().to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::fixtures::mixed;
    use crate::data::{Column, ColumnKind, Dataset};

    fn affine_config() -> MlpConfig {
        MlpConfig {
            numeric: vec!["x".into()],
            categorical: Vec::new(),
            targets: vec!["y".into()],
            embedding_dim: 0,
            hidden: Vec::new(),
        }
    }

    fn xy(x: &[f64]) -> Dataset {
        Dataset::new(vec![
            Column::real("x", ColumnKind::Numeric, x.to_vec()),
            Column::real("y", ColumnKind::Target, vec![0.0; x.len()]),
        ])
        .unwrap()
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = MlpConfig::for_dataset(&mixed(6), 3, vec![5, 4]);
        assert_eq!(
            ModelPair::init(cfg.clone(), 42).unwrap(),
            ModelPair::init(cfg.clone(), 42).unwrap()
        );
        assert_ne!(
            ModelPair::init(cfg.clone(), 42).unwrap(),
            ModelPair::init(cfg, 43).unwrap()
        );
    }

    #[test]
    fn biases_start_at_zero() {
        let cfg = MlpConfig::for_dataset(&mixed(6), 3, vec![5, 4]);
        let pair = ModelPair::init(cfg, 1).unwrap();
        for net in [&pair.main, &pair.aux] {
            for (name, t) in net.named_params() {
                if name.ends_with("bias") {
                    assert!(t.values().iter().all(|&v| v == 0.0), "{name}");
                }
            }
        }
    }

    #[test]
    fn glorot_bounds_respected() {
        let cfg = MlpConfig::for_dataset(&mixed(6), 3, vec![8]);
        let pair = ModelPair::init(cfg, 9).unwrap();
        // first hidden layer: fan_in = 1 + 3, fan_out = 8
        let limit = libm::sqrt(6.0 / 12.0);
        for w in &pair.main.hidden[0].blocks {
            assert!(w.values().iter().all(|v| v.abs() <= limit));
        }
        // aux heads share fan_out = 2 d_t = 2
        let limit = libm::sqrt(6.0 / 10.0);
        assert!(pair
            .aux
            .heads
            .iter()
            .all(|h| h.blocks[0].values().iter().all(|v| v.abs() <= limit)));
    }

    #[test]
    fn degenerate_model_is_affine() {
        let mut pair = ModelPair::init(affine_config(), 3).unwrap();
        pair.main.heads[0].blocks[0] = Tensor::new(vec![1, 1], vec![2.0]).unwrap();
        pair.main.heads[0].bias = Tensor::new(vec![1, 1], vec![0.5]).unwrap();
        let ds = xy(&[1.0, -2.0, 0.0]);
        assert_eq!(pair.predict_main(&ds.full_batch()).unwrap(), vec![2.5, -3.5, 0.5]);

        pair.main.heads[0].blocks[0] = Tensor::new(vec![1, 1], vec![0.0]).unwrap();
        pair.main.heads[0].bias = Tensor::new(vec![1, 1], vec![7.0]).unwrap();
        assert_eq!(pair.predict_main(&ds.full_batch()).unwrap(), vec![7.0; 3]);
    }

    #[test]
    fn empty_batch_gives_empty_output() {
        let pair = ModelPair::init(MlpConfig::for_dataset(&mixed(6), 2, vec![3]), 3).unwrap();
        let mut g = Graph::new();
        let out = pair.forward_main(&mut g, &mixed(6).batch(&[])).unwrap();
        assert_eq!(g.value(out.pred).shape(), &[0, 1]);
    }

    #[test]
    fn outputs_finite() {
        let ds = mixed(30);
        let pair = ModelPair::init(MlpConfig::for_dataset(&ds, 4, vec![16, 8]), 5).unwrap();
        let p = pair.predict(&ds.full_batch()).unwrap();
        assert!(p.pred.iter().chain(&p.mu).chain(&p.sigma2).all(|v| v.is_finite()));
        assert!(p.sigma2.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn variance_head_clamps() {
        let mut pair = ModelPair::init(affine_config(), 3).unwrap();
        let ds = xy(&[1.0]);
        for (raw, expected) in [(0.0, 1.0), (-50.0, libm::exp(-10.0)), (50.0, libm::exp(10.0))] {
            pair.aux.heads[1].blocks[0] = Tensor::new(vec![1, 1], vec![0.0]).unwrap();
            pair.aux.heads[1].bias = Tensor::new(vec![1, 1], vec![raw]).unwrap();
            let p = pair.predict(&ds.full_batch()).unwrap();
            assert_eq!(p.sigma2, vec![expected]);
        }
    }

    #[test]
    fn out_of_vocabulary_names_column() {
        let ds = mixed(6);
        let pair = ModelPair::init(MlpConfig::for_dataset(&ds, 2, vec![3]), 3).unwrap();
        let mut batch = ds.batch(&[0, 1]);
        batch.categorical[0][1] = 9;
        let mut g = Graph::new();
        let err = pair.forward_main(&mut g, &batch).unwrap_err();
        assert_eq!(
            err,
            ModelError::OutOfVocabulary {
                column: "c".into(),
                code: 9,
                vocabulary: 3
            }
        );
    }

    #[test]
    fn networks_do_not_share_gradients() {
        let ds = mixed(8);
        let pair = ModelPair::init(MlpConfig::for_dataset(&ds, 2, vec![4]), 3).unwrap();
        let mut g = Graph::new();
        let batch = ds.full_batch();
        let main = pair.forward_main(&mut g, &batch).unwrap();
        let aux = pair.forward_aux(&mut g, &batch).unwrap();
        let root = g.sum(main.pred).unwrap();
        let grads = g.backward(root).unwrap();
        for p in &aux.params {
            assert!(grads.get(*p).unwrap().values().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = affine_config();
        cfg.hidden = vec![0];
        assert!(ModelPair::init(cfg, 0).is_err());
        let mut cfg = affine_config();
        cfg.targets.clear();
        assert!(ModelPair::init(cfg, 0).is_err());
    }

    #[test]
    fn dataset_layout_check() {
        let ds = mixed(5);
        let cfg = MlpConfig::for_dataset(&ds, 2, vec![]);
        assert!(cfg.check_dataset(&ds).is_ok());
        assert!(matches!(cfg.check_dataset(&xy(&[1.0])), Err(ModelError::Layout { .. })));
    }
}
