use alloc::vec::Vec;

use rand::seq::{index, SliceRandom};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{ColumnData, DataError, Dataset};
use crate::rng::{self, Purpose};

/// Train / validation / test proportions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFractions {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.8,
            valid: 0.1,
            test: 0.1,
        }
    }
}

/// Seeded shuffle followed by a contiguous cut.
///
/// Validation and test sizes are `floor(fraction * rows)`; the remainder goes
/// to training.
pub fn split_random(
    ds: &Dataset,
    fractions: SplitFractions,
    seed: u64,
) -> Result<(Dataset, Dataset, Dataset), DataError> {
    let SplitFractions { train, valid, test } = fractions;
    for (what, v) in [
        ("train fraction", train),
        ("valid fraction", valid),
        ("test fraction", test),
    ] {
        if !(v > 0.0 && v <= 1.0) {
            return Err(DataError::InvalidFraction {
                what,
                range: "(0, 1]",
                value: v,
            });
        }
    }
    let total = train + valid + test;
    if libm::fabs(total - 1.0) > 1e-9 {
        return Err(DataError::InvalidFraction {
            what: "sum of split fractions",
            range: "1 +/- 1e-9",
            value: total,
        });
    }
    let n = ds.rows();
    if n < 3 {
        return Err(DataError::TooFewRows { rows: n, needed: 3 });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, Purpose::Split, 0));
    let n_valid = libm::floor(valid * n as f64) as usize;
    let n_test = libm::floor(test * n as f64) as usize;
    let n_train = n - n_valid - n_test;
    let (tr, rest) = order.split_at(n_train);
    let (va, te) = rest.split_at(n_valid);
    Ok((ds.select_rows(tr), ds.select_rows(va), ds.select_rows(te)))
}

/// Additive Gaussian label noise at level `k`: std `0.2 k std(y)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub level: u32,
    pub seed: u64,
}

/// Adds zero-mean Gaussian noise to every target column.
///
/// The noise scale of each column uses the population standard deviation of
/// that column before noise is added.
pub fn inject_label_noise(ds: &Dataset, spec: NoiseSpec) -> Dataset {
    if spec.level == 0 {
        return ds.clone();
    }
    let mut rng = rng::stream(spec.seed, Purpose::LabelNoise, spec.level as u64);
    let mut out = ds.clone();
    let names: Vec<_> = ds
        .target_columns()
        .map(|c| c.name().into())
        .collect::<Vec<alloc::string::String>>();
    for name in names {
        let y = ds
            .column(&name)
            .and_then(|c| c.reals())
            .expect("target columns are real");
        let scale = 0.2 * spec.level as f64 * population_std(y);
        let noise = Normal::new(0.0, scale).expect("scale is finite and non-negative");
        let noisy = y.iter().map(|&v| v + noise.sample(&mut rng)).collect();
        out = out.with_column_data(&name, ColumnData::Real(noisy));
    }
    out
}

pub(crate) fn population_std(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    libm::sqrt(v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n)
}

/// Test-time corruption: shuffle a fraction of feature columns within a
/// fraction (`10 * level` percent) of rows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    #[serde(default = "default_column_fraction")]
    pub column_fraction: f64,
    pub level: u32,
    pub seed: u64,
}

fn default_column_fraction() -> f64 {
    0.2
}

/// Which columns and rows a corruption touches.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorruptionPlan {
    /// Names of the selected feature columns.
    pub columns: Vec<alloc::string::String>,
    /// Selected row indices of the validation set (sorted).
    pub valid_rows: Vec<usize>,
    /// Selected row indices of the test set (sorted).
    pub test_rows: Vec<usize>,
}

/// Draws the corruption plan without applying it.
///
/// Columns depend only on the seed, so every level of a sweep corrupts the
/// same columns. Rows are drawn per level and per dataset.
pub fn corruption_plan(valid: &Dataset, test: &Dataset, spec: CorruptionSpec) -> Result<CorruptionPlan, DataError> {
    if spec.level > 10 {
        return Err(DataError::LevelOutOfRange(spec.level));
    }
    if !(0.0..=1.0).contains(&spec.column_fraction) {
        return Err(DataError::InvalidFraction {
            what: "column fraction",
            range: "[0, 1]",
            value: spec.column_fraction,
        });
    }
    let features: Vec<_> = valid
        .feature_columns()
        .map(|c| alloc::string::String::from(c.name()))
        .collect();
    let n_cols = (libm::ceil(spec.column_fraction * features.len() as f64 - 1e-9) as usize).min(features.len());
    let mut col_rng = rng::stream(spec.seed, Purpose::Corruption, 0);
    let mut picked = index::sample(&mut col_rng, features.len(), n_cols).into_vec();
    picked.sort_unstable();
    let columns = picked.into_iter().map(|i| features[i].clone()).collect();

    let rows_for = |ds: &Dataset, which: u64| {
        let n = ds.rows();
        let count = (spec.level as usize * n) / 10;
        let mut r = rng::stream(spec.seed, Purpose::Corruption, ((spec.level as u64) << 8) | which);
        let mut rows = index::sample(&mut r, n, count).into_vec();
        rows.sort_unstable();
        rows
    };
    Ok(CorruptionPlan {
        columns,
        valid_rows: rows_for(valid, 1),
        test_rows: rows_for(test, 2),
    })
}

/// Applies [`corruption_plan`]: each selected column has its values permuted
/// among the selected rows. Values are never resampled.
pub fn corrupt_columns(valid: &Dataset, test: &Dataset, spec: CorruptionSpec) -> Result<(Dataset, Dataset), DataError> {
    let plan = corruption_plan(valid, test, spec)?;
    let apply = |ds: &Dataset, rows: &[usize], which: u64| {
        let mut out = ds.clone();
        let mut r = rng::stream(
            spec.seed,
            Purpose::Corruption,
            ((spec.level as u64) << 8) | (which + 16),
        );
        for name in &plan.columns {
            let mut perm: Vec<usize> = rows.to_vec();
            perm.shuffle(&mut r);
            let data = match &ds.column(name).expect("plan columns exist").data {
                ColumnData::Real(v) => {
                    let mut v2 = v.clone();
                    for (&dst, &src) in rows.iter().zip(&perm) {
                        v2[dst] = v[src];
                    }
                    ColumnData::Real(v2)
                }
                ColumnData::Codes { codes, vocabulary } => {
                    let mut c2 = codes.clone();
                    for (&dst, &src) in rows.iter().zip(&perm) {
                        c2[dst] = codes[src];
                    }
                    ColumnData::Codes {
                        codes: c2,
                        vocabulary: vocabulary.clone(),
                    }
                }
            };
            out = out.with_column_data(name, data);
        }
        out
    };
    Ok((apply(valid, &plan.valid_rows, 1), apply(test, &plan.test_rows, 2)))
}

/// Uniform sample without replacement of `ceil(fraction * rows)` rows, kept in
/// their original order.
pub fn subsample(ds: &Dataset, fraction: f64, seed: u64) -> Result<Dataset, DataError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(DataError::InvalidFraction {
            what: "subsample fraction",
            range: "(0, 1]",
            value: fraction,
        });
    }
    let n = ds.rows();
    let count = (libm::ceil(fraction * n as f64 - 1e-9) as usize).min(n);
    let mut rows = index::sample(&mut rng::stream(seed, Purpose::Subsample, 0), n, count).into_vec();
    rows.sort_unstable();
    Ok(ds.select_rows(&rows))
}
