//! CSV ingestion and prediction export.
//!
//! Rows are reported by their line number in the file, so the header is row 1
//! and the first record is row 2.

use std::collections::HashMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use adaprl_core::data::{Column, ColumnKind, ColumnSpec, Dataset, QuantileBinner};
use adaprl_core::model::{MlpConfig, Prediction};
use csv::{ReaderBuilder, StringRecord};

use crate::error::AppError;

struct Table {
    header: Vec<String>,
    /// `(line, record)` pairs.
    rows: Vec<(u64, StringRecord)>,
}

fn read_table<R: Read>(reader: R) -> Result<Table, AppError> {
    let mut rdr = ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(reader);
    let mut records = rdr.records();
    let header = match records.next() {
        None => return Err(AppError::Data("empty file: no header row".into())),
        Some(r) => r.map_err(csv_error)?,
    };
    let header: Vec<String> = header.iter().map(str::to_owned).collect();
    let mut rows = Vec::new();
    for rec in records {
        let rec = rec.map_err(csv_error)?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != header.len() {
            return Err(AppError::Data(format!(
                "row {line}: expected {} fields, found {}",
                header.len(),
                rec.len()
            )));
        }
        rows.push((line, rec));
    }
    if rows.is_empty() {
        return Err(AppError::Data("file has a header but no data rows".into()));
    }
    Ok(Table { header, rows })
}

fn csv_error(e: csv::Error) -> AppError {
    let at = e.position().map(|p| format!("row {}: ", p.line())).unwrap_or_default();
    AppError::Data(format!("{at}{e}"))
}

fn parse_real(cell: &str, line: u64, column: &str) -> Result<f64, AppError> {
    let v: f64 = cell.trim().parse().map_err(|_| {
        AppError::Data(format!(
            "row {line}, column {column}: cannot parse `{cell}` as a number"
        ))
    })?;
    if !v.is_finite() {
        return Err(AppError::Data(format!(
            "row {line}, column {column}: non-finite value `{cell}`"
        )));
    }
    Ok(v)
}

impl Table {
    fn reals(&self, idx: usize) -> Result<Vec<f64>, AppError> {
        let name = &self.header[idx];
        self.rows
            .iter()
            .map(|(line, r)| parse_real(&r[idx], *line, name))
            .collect()
    }

    /// Codes in order of first appearance.
    fn categories(&self, idx: usize) -> (Vec<u32>, Vec<String>) {
        let mut vocab: Vec<String> = Vec::new();
        let mut seen: HashMap<&str, u32> = HashMap::new();
        let codes = self
            .rows
            .iter()
            .map(|(_, r)| {
                let cell = &r[idx];
                *seen.entry(cell).or_insert_with(|| {
                    vocab.push(cell.to_owned());
                    (vocab.len() - 1) as u32
                })
            })
            .collect();
        (codes, vocab)
    }
}

/// Reads a CSV whose header must list exactly the schema's column names, in
/// order.
pub fn read_csv<R: Read>(reader: R, schema: &[ColumnSpec]) -> Result<Dataset, AppError> {
    let table = read_table(reader)?;
    let expected: Vec<&str> = schema.iter().map(|c| c.name.as_str()).collect();
    if table.header != expected {
        return Err(AppError::Data(format!(
            "header [{}] does not match schema [{}]",
            table.header.join(", "),
            expected.join(", ")
        )));
    }
    let mut columns = Vec::with_capacity(schema.len());
    for (idx, spec) in schema.iter().enumerate() {
        columns.push(match spec.kind {
            ColumnKind::Categorical => {
                let (codes, vocab) = table.categories(idx);
                Column::categorical(spec.name.clone(), codes, vocab)
            }
            kind => Column::real(spec.name.clone(), kind, table.reals(idx)?),
        });
    }
    Ok(Dataset::new(columns)?)
}

pub fn load_csv(path: &Path, schema: &[ColumnSpec]) -> Result<Dataset, AppError> {
    let file = File::open(path).map_err(|e| AppError::Data(format!("cannot open {}: {e}", path.display())))?;
    read_csv(file, schema).map_err(|e| match e {
        AppError::Data(m) => AppError::Data(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Reads prediction inputs laid out for `config`.
///
/// Columns are found by name and extra columns are ignored. Categories map
/// through the training vocabularies; columns listed in `binners` are read as
/// numbers and binned. Target columns are filled with zeros.
pub fn read_features<R: Read>(reader: R, config: &MlpConfig, binners: &[QuantileBinner]) -> Result<Dataset, AppError> {
    let table = read_table(reader)?;
    let mut index = HashMap::new();
    for (i, name) in table.header.iter().enumerate() {
        if index.insert(name.as_str(), i).is_some() {
            return Err(AppError::Data(format!("duplicate column `{name}` in header")));
        }
    }
    let find = |name: &str| {
        index
            .get(name)
            .copied()
            .ok_or_else(|| AppError::Data(format!("input is missing column `{name}` required by the checkpoint")))
    };
    let mut columns = Vec::new();
    for name in &config.numeric {
        columns.push(Column::real(
            name.clone(),
            ColumnKind::Numeric,
            table.reals(find(name)?)?,
        ));
    }
    for cat in &config.categorical {
        let idx = find(&cat.name)?;
        let codes = if let Some(b) = binners.iter().find(|b| b.column == cat.name) {
            table.reals(idx)?.into_iter().map(|x| b.code(x)).collect()
        } else {
            let lookup: HashMap<&str, u32> = cat
                .vocabulary
                .iter()
                .enumerate()
                .map(|(i, v)| (v.as_str(), i as u32))
                .collect();
            table
                .rows
                .iter()
                .map(|(line, r)| {
                    lookup.get(&r[idx]).copied().ok_or_else(|| {
                        AppError::Data(format!(
                            "row {line}, column {}: category `{}` was not seen in training",
                            cat.name, &r[idx]
                        ))
                    })
                })
                .collect::<Result<_, _>>()?
        };
        columns.push(Column::categorical(cat.name.clone(), codes, cat.vocabulary.clone()));
    }
    let rows = table.rows.len();
    for t in &config.targets {
        columns.push(Column::real(t.clone(), ColumnKind::Target, vec![0.0; rows]));
    }
    let ds = Dataset::new(columns)?;
    config.check_dataset(&ds)?;
    Ok(ds)
}

/// Writes one row per input row: index, then prediction, mean, standard
/// deviation and the one-sigma band for each target.
pub fn write_predictions<W: Write>(writer: W, targets: &[String], p: &Prediction) -> Result<(), csv::Error> {
    let t = targets.len();
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["row".to_owned()];
    for name in targets {
        for suffix in ["pred", "mu", "sigma", "lower", "upper"] {
            header.push(format!("{name}_{suffix}"));
        }
    }
    w.write_record(&header)?;
    for (row, ((pred, mu), s2)) in p.pred.chunks(t).zip(p.mu.chunks(t)).zip(p.sigma2.chunks(t)).enumerate() {
        let mut rec = vec![row.to_string()];
        for j in 0..t {
            let sigma = s2[j].sqrt();
            for v in [pred[j], mu[j], sigma, mu[j] - sigma, mu[j] + sigma] {
                rec.push(v.to_string());
            }
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
