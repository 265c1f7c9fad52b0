//! Tabular datasets and the transforms applied to them before training.
//!
//! Storage is column-major. Numeric, target and weight columns hold reals;
//! categorical columns hold integer codes into a per-column vocabulary.
//! Every transform returns a new dataset and leaves its input untouched.

mod binning;
mod perturb;
mod synth;

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

pub use binning::QuantileBinner;
pub use perturb::{
    corrupt_columns, corruption_plan, inject_label_noise, split_random, subsample, CorruptionPlan, CorruptionSpec,
    NoiseSpec, SplitFractions,
};
pub use synth::{synth_heteroscedastic, SynthSpec, SyntheticData};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DataError {
    #[error("column `{column}` has {actual} rows, expected {expected}")]
    LengthMismatch {
        column: String,
        expected: usize,
        actual: usize,
    },
    #[error("column `{column}`: code {code} is outside a vocabulary of {vocabulary}")]
    CodeOutOfRange {
        column: String,
        code: u32,
        vocabulary: usize,
    },
    #[error("column `{column}` is declared {kind:?} but holds the wrong kind of data")]
    KindMismatch { column: String, kind: ColumnKind },
    #[error("duplicate column name `{0}`")]
    DuplicateColumn(String),
    #[error("dataset needs at least one target column")]
    NoTarget,
    #[error("at most one weight column is allowed")]
    MultipleWeights,
    #[error("unknown column `{0}`")]
    UnknownColumn(String),
    #[error("{what} must be in {range}, got {value}")]
    InvalidFraction {
        what: &'static str,
        range: &'static str,
        value: f64,
    },
    #[error("need at least {needed} rows, got {rows}")]
    TooFewRows { rows: usize, needed: usize },
    #[error("corruption level {0} is above 10")]
    LevelOutOfRange(u32),
    #[error("{0}")]
    Invalid(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Numeric,
    Categorical,
    Target,
    Weight,
}

/// Name and kind of one column.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    pub kind: ColumnKind,
}

impl ColumnSpec {
    pub fn new(name: impl Into<String>, kind: ColumnKind) -> Self {
        Self {
            name: name.into(),
            kind,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ColumnData {
    Real(Vec<f64>),
    Codes { codes: Vec<u32>, vocabulary: Vec<String> },
}

impl ColumnData {
    pub fn len(&self) -> usize {
        match self {
            ColumnData::Real(v) => v.len(),
            ColumnData::Codes { codes, .. } => codes.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn select(&self, rows: &[usize]) -> Self {
        match self {
            ColumnData::Real(v) => ColumnData::Real(rows.iter().map(|&r| v[r]).collect()),
            ColumnData::Codes { codes, vocabulary } => ColumnData::Codes {
                codes: rows.iter().map(|&r| codes[r]).collect(),
                vocabulary: vocabulary.clone(),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Column {
    pub spec: ColumnSpec,
    pub data: ColumnData,
}

impl Column {
    pub fn real(name: impl Into<String>, kind: ColumnKind, values: Vec<f64>) -> Self {
        Self {
            spec: ColumnSpec::new(name, kind),
            data: ColumnData::Real(values),
        }
    }

    pub fn categorical(name: impl Into<String>, codes: Vec<u32>, vocabulary: Vec<String>) -> Self {
        Self {
            spec: ColumnSpec::new(name, ColumnKind::Categorical),
            data: ColumnData::Codes { codes, vocabulary },
        }
    }

    pub fn name(&self) -> &str {
        &self.spec.name
    }

    pub fn kind(&self) -> ColumnKind {
        self.spec.kind
    }

    pub fn reals(&self) -> Option<&[f64]> {
        match &self.data {
            ColumnData::Real(v) => Some(v),
            ColumnData::Codes { .. } => None,
        }
    }

    pub fn codes(&self) -> Option<(&[u32], &[String])> {
        match &self.data {
            ColumnData::Codes { codes, vocabulary } => Some((codes, vocabulary)),
            ColumnData::Real(_) => None,
        }
    }

    fn is_feature(&self) -> bool {
        matches!(self.kind(), ColumnKind::Numeric | ColumnKind::Categorical)
    }
}

/// An immutable table of records.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    columns: Vec<Column>,
    rows: usize,
}

/// Rows of a dataset laid out for a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `[B, numeric columns]`.
    pub numeric: Tensor,
    /// One code vector per categorical column.
    pub categorical: Vec<Vec<u32>>,
    /// `[B, target columns]`.
    pub targets: Tensor,
    pub weights: Option<Vec<f64>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.targets.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Dataset {
    pub fn new(columns: Vec<Column>) -> Result<Self, DataError> {
        let rows = columns.first().map(|c| c.data.len()).unwrap_or(0);
        let mut targets = 0;
        let mut weights = 0;
        for (i, c) in columns.iter().enumerate() {
            if columns[..i].iter().any(|o| o.name() == c.name()) {
                return Err(DataError::DuplicateColumn(c.name().into()));
            }
            if c.data.len() != rows {
                return Err(DataError::LengthMismatch {
                    column: c.name().into(),
                    expected: rows,
                    actual: c.data.len(),
                });
            }
            let kind_ok = matches!(
                (&c.data, c.kind()),
                (ColumnData::Codes { .. }, ColumnKind::Categorical)
                    | (
                        ColumnData::Real(_),
                        ColumnKind::Numeric | ColumnKind::Target | ColumnKind::Weight
                    )
            );
            if !kind_ok {
                return Err(DataError::KindMismatch {
                    column: c.name().into(),
                    kind: c.kind(),
                });
            }
            if let ColumnData::Codes { codes, vocabulary } = &c.data {
                if let Some(&code) = codes.iter().find(|&&code| code as usize >= vocabulary.len()) {
                    return Err(DataError::CodeOutOfRange {
                        column: c.name().into(),
                        code,
                        vocabulary: vocabulary.len(),
                    });
                }
            }
            match c.kind() {
                ColumnKind::Target => targets += 1,
                ColumnKind::Weight => weights += 1,
                _ => {}
            }
        }
        if targets == 0 {
            return Err(DataError::NoTarget);
        }
        if weights > 1 {
            return Err(DataError::MultipleWeights);
        }
        Ok(Self { columns, rows })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn column(&self, name: &str) -> Option<&Column> {
        self.columns.iter().find(|c| c.name() == name)
    }

    pub fn schema(&self) -> Vec<ColumnSpec> {
        self.columns.iter().map(|c| c.spec.clone()).collect()
    }

    fn of_kind(&self, kind: ColumnKind) -> impl Iterator<Item = &Column> {
        self.columns.iter().filter(move |c| c.kind() == kind)
    }

    pub fn numeric_columns(&self) -> impl Iterator<Item = &Column> {
        self.of_kind(ColumnKind::Numeric)
    }

    pub fn categorical_columns(&self) -> impl Iterator<Item = &Column> {
        self.of_kind(ColumnKind::Categorical)
    }

    pub fn target_columns(&self) -> impl Iterator<Item = &Column> {
        self.of_kind(ColumnKind::Target)
    }

    /// Numeric and categorical columns, in schema order.
    pub fn feature_columns(&self) -> impl Iterator<Item = &Column> {
        self.columns.iter().filter(|c| c.is_feature())
    }

    pub fn target_count(&self) -> usize {
        self.target_columns().count()
    }

    pub fn weights(&self) -> Option<&[f64]> {
        self.of_kind(ColumnKind::Weight).next().and_then(Column::reals)
    }

    /// Targets as a row-major `rows x targets` buffer.
    pub fn target_matrix(&self) -> Vec<f64> {
        let cols: Vec<&[f64]> = self.target_columns().filter_map(Column::reals).collect();
        let mut out = Vec::with_capacity(self.rows * cols.len());
        for r in 0..self.rows {
            out.extend(cols.iter().map(|c| c[r]));
        }
        out
    }

    /// New dataset holding `rows` (in the given order, repeats allowed).
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Self {
            columns: self
                .columns
                .iter()
                .map(|c| Column {
                    spec: c.spec.clone(),
                    data: c.data.select(rows),
                })
                .collect(),
            rows: rows.len(),
        }
    }

    /// Replaces column data by name; used by the perturbation transforms.
    pub(crate) fn with_column_data(&self, name: &str, data: ColumnData) -> Self {
        let mut out = self.clone();
        if let Some(c) = out.columns.iter_mut().find(|c| c.name() == name) {
            c.data = data;
        }
        out
    }

    pub(crate) fn replace_column(&self, column: Column) -> Self {
        let mut out = self.clone();
        if let Some(c) = out.columns.iter_mut().find(|c| c.name() == column.name()) {
            *c = column;
        }
        out
    }

    /// Gathers `rows` into model-ready tensors.
    pub fn batch(&self, rows: &[usize]) -> Batch {
        let b = rows.len();
        let numeric: Vec<&[f64]> = self.numeric_columns().filter_map(Column::reals).collect();
        let mut num = Vec::with_capacity(b * numeric.len());
        for &r in rows {
            num.extend(numeric.iter().map(|c| c[r]));
        }
        let categorical = self
            .categorical_columns()
            .filter_map(Column::codes)
            .map(|(codes, _)| rows.iter().map(|&r| codes[r]).collect())
            .collect();
        let targets: Vec<&[f64]> = self.target_columns().filter_map(Column::reals).collect();
        let mut tgt = Vec::with_capacity(b * targets.len());
        for &r in rows {
            tgt.extend(targets.iter().map(|c| c[r]));
        }
        let weights = self.weights().map(|w| rows.iter().map(|&r| w[r]).collect());
        Batch {
            numeric: Tensor::from_parts(alloc::vec![b, numeric.len()], num),
            categorical,
            targets: Tensor::from_parts(alloc::vec![b, targets.len()], tgt),
            weights,
        }
    }

    /// Batch over every row, in order.
    pub fn full_batch(&self) -> Batch {
        let rows: Vec<usize> = (0..self.rows).collect();
        self.batch(&rows)
    }
}
