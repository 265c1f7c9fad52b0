use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{Column, ColumnKind, DataError, Dataset};

/// Equal-frequency binning of one numeric column into a categorical one.
///
/// Edges are fitted on one dataset (the training split) and then applied to
/// any dataset with the same column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileBinner {
    pub column: String,
    /// Interior edges, non-decreasing; `bins - 1` of them.
    pub edges: Vec<f64>,
}

impl QuantileBinner {
    pub const DEFAULT_BINS: usize = 16;

    pub fn fit(ds: &Dataset, column: &str, bins: usize) -> Result<Self, DataError> {
        if bins < 2 {
            return Err(DataError::Invalid("quantile binning needs at least two bins"));
        }
        let col = ds
            .column(column)
            .filter(|c| c.kind() == ColumnKind::Numeric)
            .ok_or_else(|| DataError::UnknownColumn(column.into()))?;
        let mut v = col.reals().expect("numeric columns are real").to_vec();
        if v.is_empty() {
            return Err(DataError::TooFewRows { rows: 0, needed: 1 });
        }
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let edges = (1..bins).map(|i| v[(i * n / bins).min(n - 1)]).collect();
        Ok(Self {
            column: column.into(),
            edges,
        })
    }

    pub fn bins(&self) -> usize {
        self.edges.len() + 1
    }

    /// Bin index of `x`: the number of edges less than or equal to it.
    pub fn code(&self, x: f64) -> u32 {
        self.edges.partition_point(|&e| e <= x) as u32
    }

    /// Replaces the numeric column with its categorical bin codes.
    pub fn apply(&self, ds: &Dataset) -> Result<Dataset, DataError> {
        let col = ds
            .column(&self.column)
            .filter(|c| c.kind() == ColumnKind::Numeric)
            .ok_or_else(|| DataError::UnknownColumn(self.column.clone()))?;
        let codes = col
            .reals()
            .expect("numeric columns are real")
            .iter()
            .map(|&x| self.code(x))
            .collect();
        let vocabulary = (0..self.bins()).map(|i| format!("bin{i}")).collect();
        Ok(ds.replace_column(Column::categorical(self.column.clone(), codes, vocabulary)))
    }
}
