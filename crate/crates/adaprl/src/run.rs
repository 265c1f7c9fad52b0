//! One training run: data preparation, fitting and evaluation.

use std::borrow::Cow;

use adaprl_core::data::{
    corrupt_columns, inject_label_noise, split_random, subsample, synth_heteroscedastic, CorruptionSpec, Dataset,
    NoiseSpec, QuantileBinner, SynthSpec,
};
use adaprl_core::model::{MlpConfig, ModelPair};
use adaprl_core::train::{evaluate, fit, Evaluation, TrainState};

use crate::config::{DataSource, RunConfig, SweepSpec};
use crate::csvio;
use crate::error::AppError;

/// Rows before splitting: loaded once from CSV, or generated per seed.
pub enum Source {
    Loaded(Dataset),
    Synthetic { n: usize, d_numeric: usize, noise: bool },
}

impl Source {
    pub fn open(cfg: &RunConfig) -> Result<Self, AppError> {
        Ok(match &cfg.data {
            DataSource::Csv { path, schema } => Source::Loaded(csvio::load_csv(path, schema)?),
            &DataSource::Synthetic { n, d_numeric, noise } => Source::Synthetic { n, d_numeric, noise },
        })
    }

    pub fn dataset(&self, seed: u64) -> Result<Cow<'_, Dataset>, AppError> {
        Ok(match self {
            Source::Loaded(ds) => Cow::Borrowed(ds),
            &Source::Synthetic { n, d_numeric, noise } => Cow::Owned(
                synth_heteroscedastic(SynthSpec {
                    n,
                    d_numeric,
                    seed,
                    noise,
                })?
                .dataset,
            ),
        })
    }
}

/// Fully resolved settings of one run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub alpha: f64,
    pub keep_fraction: f64,
    pub label_noise: u32,
    pub corruption: u32,
    pub data_fraction: f64,
}

impl Point {
    pub fn from_config(cfg: &RunConfig) -> Self {
        Self {
            alpha: cfg.train.loss.alpha,
            keep_fraction: cfg.train.loss.keep_fraction,
            label_noise: cfg.perturb.label_noise,
            corruption: cfg.perturb.corruption,
            data_fraction: cfg.perturb.data_fraction,
        }
    }

    /// This point with one sweep axis set to `value`.
    pub fn at(mut self, sweep: &SweepSpec, value: f64) -> Self {
        match sweep {
            SweepSpec::Alpha(_) => self.alpha = value,
            SweepSpec::Sparsity(_) => self.keep_fraction = value,
            SweepSpec::Noise(_) => self.label_noise = value as u32,
            SweepSpec::Corruption(_) => self.corruption = value as u32,
            SweepSpec::DataFraction(_) => self.data_fraction = value,
        }
        self
    }

    /// The matched pointwise baseline.
    pub fn baseline(self) -> Self {
        Self {
            alpha: 0.0,
            keep_fraction: 1.0,
            ..self
        }
    }
}

/// Splits after every perturbation and transform.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub train: Dataset,
    /// Unperturbed validation rows, used for early stopping.
    pub valid_clean: Dataset,
    pub valid: Dataset,
    pub test: Dataset,
    pub binners: Vec<QuantileBinner>,
}

pub fn prepare(cfg: &RunConfig, ds: &Dataset, point: &Point, seed: u64) -> Result<Prepared, AppError> {
    let (mut train, valid_clean, test_clean) = split_random(ds, cfg.split, seed)?;
    if point.data_fraction < 1.0 {
        train = subsample(&train, point.data_fraction, seed)?;
    }
    train = inject_label_noise(
        &train,
        NoiseSpec {
            level: point.label_noise,
            seed,
        },
    );
    let (mut valid, mut test) = if point.corruption > 0 {
        corrupt_columns(
            &valid_clean,
            &test_clean,
            CorruptionSpec {
                column_fraction: cfg.perturb.corrupt_column_fraction,
                level: point.corruption,
                seed,
            },
        )?
    } else {
        (valid_clean.clone(), test_clean)
    };
    let mut valid_clean = valid_clean;
    let mut binners = Vec::new();
    for col in &cfg.quantile_bins {
        let b = QuantileBinner::fit(&train, col, QuantileBinner::DEFAULT_BINS)?;
        for ds in [&mut train, &mut valid_clean, &mut valid, &mut test] {
            *ds = b.apply(ds)?;
        }
        binners.push(b);
    }
    Ok(Prepared {
        train,
        valid_clean,
        valid,
        test,
        binners,
    })
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub state: TrainState,
    pub valid: Evaluation,
    pub test: Evaluation,
}

pub fn train_point(cfg: &RunConfig, data: &Prepared, point: &Point, seed: u64) -> Result<RunOutcome, AppError> {
    let mlp = MlpConfig::for_dataset(&data.train, cfg.model.embedding_dim, cfg.model.hidden.clone());
    let model = ModelPair::init(mlp, seed)?;
    let mut tc = cfg.train;
    tc.seed = seed;
    tc.loss.alpha = point.alpha;
    tc.loss.keep_fraction = point.keep_fraction;
    let state = fit(&tc, model, &data.train, &data.valid_clean)?;
    let valid = evaluate(&state.model, &data.valid)?;
    let test = evaluate(&state.model, &data.test)?;
    Ok(RunOutcome { state, valid, test })
}
