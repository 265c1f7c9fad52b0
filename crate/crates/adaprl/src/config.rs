//! Run configuration files.

use std::fs;
use std::path::{Path, PathBuf};

use adaprl_core::data::{ColumnKind, ColumnSpec, SplitFractions};
use adaprl_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::AppError;

/// Where the rows come from. Exactly one source per config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Csv {
        /// Relative paths resolve against the config file's directory.
        path: PathBuf,
        schema: Vec<ColumnSpec>,
    },
    Synthetic {
        n: usize,
        d_numeric: usize,
        #[serde(default = "yes")]
        noise: bool,
    },
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub hidden: Vec<usize>,
    #[serde(default = "default_embedding")]
    pub embedding_dim: usize,
}

fn default_embedding() -> usize {
    8
}

/// Perturbations applied to a single run; sweeps override one of them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Perturbation {
    /// Label-noise level on the training split.
    #[serde(default)]
    pub label_noise: u32,
    /// Corruption level on the validation and test splits.
    #[serde(default)]
    pub corruption: u32,
    #[serde(default = "default_column_fraction")]
    pub corrupt_column_fraction: f64,
    /// Fraction of the training split kept.
    #[serde(default = "one")]
    pub data_fraction: f64,
}

fn default_column_fraction() -> f64 {
    0.2
}

fn one() -> f64 {
    1.0
}

impl Default for Perturbation {
    fn default() -> Self {
        Self {
            label_noise: 0,
            corruption: 0,
            corrupt_column_fraction: default_column_fraction(),
            data_fraction: 1.0,
        }
    }
}

/// One experiment axis and its grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepSpec {
    Alpha(Vec<f64>),
    /// Keep fractions of the sparse pairwise loss.
    Sparsity(Vec<f64>),
    Noise(Vec<u32>),
    Corruption(Vec<u32>),
    DataFraction(Vec<f64>),
}

impl SweepSpec {
    pub fn name(&self) -> &'static str {
        match self {
            SweepSpec::Alpha(_) => "alpha",
            SweepSpec::Sparsity(_) => "sparsity",
            SweepSpec::Noise(_) => "noise",
            SweepSpec::Corruption(_) => "corruption",
            SweepSpec::DataFraction(_) => "data_fraction",
        }
    }

    pub fn values(&self) -> Vec<f64> {
        match self {
            SweepSpec::Alpha(v) | SweepSpec::Sparsity(v) | SweepSpec::DataFraction(v) => v.clone(),
            SweepSpec::Noise(v) | SweepSpec::Corruption(v) => v.iter().map(|&k| k as f64).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    pub seed: u64,
    pub data: DataSource,
    #[serde(default)]
    pub split: SplitFractions,
    /// Numeric columns turned into 16 equal-frequency bins.
    #[serde(default)]
    pub quantile_bins: Vec<String>,
    pub model: ModelSection,
    pub train: TrainConfig,
    #[serde(default)]
    pub perturb: Perturbation,
    #[serde(default)]
    pub sweep: Option<SweepSpec>,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
}

fn default_repeats() -> usize {
    5
}

fn default_output() -> PathBuf {
    PathBuf::from("runs")
}

fn config_error(key: &str, what: impl std::fmt::Display) -> AppError {
    AppError::Config(format!("`{key}` {what}"))
}

fn check_fraction(key: &str, v: f64) -> Result<(), AppError> {
    if v > 0.0 && v <= 1.0 {
        Ok(())
    } else {
        Err(config_error(key, format_args!("must be in (0, 1], got {v}")))
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, AppError> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| AppError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; the raw bytes are returned for run stamping.
    pub fn load(path: &Path) -> Result<(Self, Vec<u8>), AppError> {
        let bytes = fs::read(path).map_err(|e| AppError::Config(format!("cannot read {}: {e}", path.display())))?;
        let text =
            std::str::from_utf8(&bytes).map_err(|e| AppError::Config(format!("{}: not UTF-8: {e}", path.display())))?;
        let mut cfg = Self::parse(text).map_err(|e| match e {
            AppError::Config(m) => AppError::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        if let DataSource::Csv { path: csv, .. } = &mut cfg.data {
            if csv.is_relative() {
                *csv = path.parent().unwrap_or(Path::new("")).join(&*csv);
            }
        }
        Ok((cfg, bytes))
    }

    pub fn validate(&self) -> Result<(), AppError> {
        if self.name.is_empty()
            || !self
                .name
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
        {
            return Err(config_error(
                "name",
                "must be non-empty and use only letters, digits, '-' and '_'",
            ));
        }
        match &self.data {
            DataSource::Csv { schema, .. } => {
                for (i, c) in schema.iter().enumerate() {
                    if schema[..i].iter().any(|d| d.name == c.name) {
                        return Err(config_error(
                            "data.csv.schema",
                            format_args!("lists `{}` twice", c.name),
                        ));
                    }
                }
                for b in &self.quantile_bins {
                    if !schema.iter().any(|c| &c.name == b && c.kind == ColumnKind::Numeric) {
                        return Err(config_error(
                            "quantile_bins",
                            format_args!("names `{b}`, which is not a numeric column"),
                        ));
                    }
                }
            }
            DataSource::Synthetic { n, d_numeric, .. } => {
                if *n == 0 || *d_numeric == 0 {
                    return Err(config_error("data.synthetic", "needs n >= 1 and d_numeric >= 1"));
                }
                for b in &self.quantile_bins {
                    let known = b
                        .strip_prefix('x')
                        .and_then(|i| i.parse::<usize>().ok())
                        .is_some_and(|i| i < *d_numeric);
                    if !known {
                        return Err(config_error(
                            "quantile_bins",
                            format_args!("names `{b}`, which is not a numeric column"),
                        ));
                    }
                }
            }
        }
        if self.model.hidden.contains(&0) {
            return Err(config_error("model.hidden", "widths must be at least 1"));
        }
        if self.model.embedding_dim == 0 {
            return Err(config_error("model.embedding_dim", "must be at least 1"));
        }
        self.train
            .validate()
            .map_err(|e| AppError::Config(format!("train: {e}")))?;
        let p = &self.perturb;
        if p.corruption > 10 {
            return Err(config_error("perturb.corruption", "must be at most 10"));
        }
        check_fraction("perturb.corrupt_column_fraction", p.corrupt_column_fraction)?;
        check_fraction("perturb.data_fraction", p.data_fraction)?;
        if self.repeats == 0 {
            return Err(config_error("repeats", "must be at least 1"));
        }
        if let Some(s) = &self.sweep {
            let key = format!("sweep.{}", s.name());
            let values = s.values();
            if values.is_empty() {
                return Err(config_error(&key, "grid is empty"));
            }
            for v in values {
                match s {
                    SweepSpec::Alpha(_) if !(v >= 0.0 && v.is_finite()) => {
                        return Err(config_error(&key, format_args!("values must be non-negative, got {v}")))
                    }
                    SweepSpec::Sparsity(_) | SweepSpec::DataFraction(_) => check_fraction(&key, v)?,
                    SweepSpec::Corruption(_) if v > 10.0 => {
                        return Err(config_error(&key, "levels must be at most 10"))
                    }
                    _ => {}
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"{
        "name": "demo",
        "seed": 3,
        "data": {"synthetic": {"n": 200, "d_numeric": 3}},
        "model": {"hidden": [8]},
        "train": {"learning_rate": 0.01, "epochs": 2, "batch_size": 32, "patience": 3, "loss": {"alpha": 0.1}}
    }"#;

    #[test]
    fn defaults_fill_in() {
        let c = RunConfig::parse(BASE).unwrap();
        assert_eq!(c.repeats, 5);
        assert_eq!(c.model.embedding_dim, 8);
        assert_eq!(c.split, SplitFractions::default());
        assert_eq!(c.perturb, Perturbation::default());
        assert!(c.sweep.is_none());
    }

    #[test]
    fn missing_key_is_named() {
        let text = BASE.replace(r#""learning_rate": 0.01, "#, "");
        let e = RunConfig::parse(&text).unwrap_err();
        assert_eq!(e.exit_code(), 1);
        assert!(e.to_string().contains("learning_rate"), "{e}");
    }

    #[test]
    fn unknown_key_is_named() {
        let text = BASE.replace(r#""epochs": 2"#, r#""epochs": 2, "epoch": 3"#);
        let e = RunConfig::parse(&text).unwrap_err().to_string();
        assert!(e.contains("`epoch`"), "{e}");
    }

    #[test]
    fn one_source_only() {
        let text = BASE.replace(
            r#"{"synthetic": {"n": 200, "d_numeric": 3}}"#,
            r#"{"synthetic": {"n": 200, "d_numeric": 3}, "csv": {"path": "a.csv", "schema": []}}"#,
        );
        assert!(RunConfig::parse(&text).is_err());
    }

    #[test]
    fn sweep_grids() {
        let text = BASE.replace(r#""name""#, r#""sweep": {"noise": [0, 2]}, "name""#);
        let s = RunConfig::parse(&text).unwrap().sweep.unwrap();
        assert_eq!((s.name(), s.values()), ("noise", vec![0.0, 2.0]));
        let text = BASE.replace(r#""name""#, r#""sweep": {"sparsity": [0.0]}, "name""#);
        let e = RunConfig::parse(&text).unwrap_err().to_string();
        assert!(e.contains("sweep.sparsity"), "{e}");
    }

    #[test]
    fn semantic_checks_name_keys() {
        let text = BASE.replace("0.01", "-1");
        assert!(RunConfig::parse(&text)
            .unwrap_err()
            .to_string()
            .contains("learning_rate"));
        let text = BASE.replace(r#""demo""#, r#""a/b""#);
        assert!(RunConfig::parse(&text).unwrap_err().to_string().contains("`name`"));
    }
}
