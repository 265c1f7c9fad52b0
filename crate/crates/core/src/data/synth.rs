use alloc::format;
use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Column, ColumnKind, DataError, Dataset};
use crate::rng::{self, Purpose};

const HIDDEN: usize = 16;
/// Smallest noise scale; the largest is ten times this.
pub const SIGMA_FLOOR: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n: usize,
    pub d_numeric: usize,
    pub seed: u64,
    /// When false the targets equal the noiseless mean exactly.
    #[serde(default = "yes")]
    pub noise: bool,
}

fn yes() -> bool {
    true
}

/// A generated dataset plus the hidden truth used to produce it.
///
/// The truth vectors are not columns of `dataset`; training never sees them.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub dataset: Dataset,
    /// `f*(x)` per row.
    pub mean: Vec<f64>,
    /// `sigma*(x)` per row.
    pub std: Vec<f64>,
}

/// Heteroscedastic regression data.
///
/// `x ~ U(-1, 1)^d`, `y = f*(x) + sigma*(x) eps` where `f*` is a fixed random
/// two-layer tanh network drawn from the seed and
/// `sigma*(x) = 0.1 * 10^((x_0 + 1) / 2)` covers a tenfold range.
pub fn synth_heteroscedastic(spec: SynthSpec) -> Result<SyntheticData, DataError> {
    if spec.n == 0 {
        return Err(DataError::TooFewRows { rows: 0, needed: 1 });
    }
    if spec.d_numeric == 0 {
        return Err(DataError::Invalid("synthetic data needs at least one numeric column"));
    }
    let d = spec.d_numeric;
    let mut net_rng = rng::stream(spec.seed, Purpose::Synthetic, 0);
    let in_scale = 1.5 / libm::sqrt(d as f64);
    let w: Vec<f64> = (0..HIDDEN * d)
        .map(|_| in_scale * Distribution::<f64>::sample(&StandardNormal, &mut net_rng))
        .collect();
    let b: Vec<f64> = (0..HIDDEN).map(|_| net_rng.random_range(-1.0..1.0)).collect();
    let out_scale = 2.0 / libm::sqrt(HIDDEN as f64);
    let a: Vec<f64> = (0..HIDDEN)
        .map(|_| out_scale * Distribution::<f64>::sample(&StandardNormal, &mut net_rng))
        .collect();

    let mut rng = rng::stream(spec.seed, Purpose::Synthetic, 1);
    let mut xs: Vec<Vec<f64>> = (0..d).map(|_| Vec::with_capacity(spec.n)).collect();
    let mut ys = Vec::with_capacity(spec.n);
    let mut mean = Vec::with_capacity(spec.n);
    let mut std = Vec::with_capacity(spec.n);
    let mut x = alloc::vec![0.0; d];
    for _ in 0..spec.n {
        for v in x.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        let f = (0..HIDDEN)
            .map(|h| {
                let z: f64 = b[h] + (0..d).map(|j| w[h * d + j] * x[j]).sum::<f64>();
                a[h] * libm::tanh(z)
            })
            .sum::<f64>();
        let s = SIGMA_FLOOR * libm::pow(10.0, (x[0] + 1.0) / 2.0);
        let eps: f64 = StandardNormal.sample(&mut rng);
        let y = if spec.noise { f + s * eps } else { f };
        for (col, &v) in xs.iter_mut().zip(&x) {
            col.push(v);
        }
        ys.push(y);
        mean.push(f);
        std.push(s);
    }
    let mut columns: Vec<Column> = xs
        .into_iter()
        .enumerate()
        .map(|(j, v)| Column::real(format!("x{j}"), ColumnKind::Numeric, v))
        .collect();
    columns.push(Column::real("y", ColumnKind::Target, ys));
    Ok(SyntheticData {
        dataset: Dataset::new(columns)?,
        mean,
        std,
    })
}
