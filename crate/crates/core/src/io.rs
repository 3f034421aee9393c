//! CSV input for bivariate samples and JSON input for bandwidths and models.

use std::fs::File;
use std::io::Read;
use std::path::Path;

use nalgebra::DMatrix;
use serde::Deserialize;

use crate::density_models::MixtureDensity;
use crate::error::{Error, Result};
use crate::kde::{Bandwidth, DataSet};

/// A sample read from `x,y[,label]` CSV.
#[derive(Clone, Debug)]
pub struct Sample {
    pub data: DataSet,
    pub labels: Option<Vec<u8>>,
}

/// Reads a two-column CSV with an optional third `label` column.
///
/// A header row is detected when the first row does not parse as numbers. Errors
/// name the offending line.
pub fn read_sample<R: Read>(reader: R) -> Result<Sample> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .flexible(true)
        .from_reader(reader);
    let mut values = Vec::new();
    let mut labels = Vec::new();
    let mut width = None;
    for (k, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| Error::Csv(e.to_string()))?;
        let line = record.position().map_or(k as u64 + 1, |p| p.line());
        if record.iter().all(str::is_empty) {
            continue;
        }
        let parsed: Vec<Option<f64>> = record.iter().map(|s| s.parse::<f64>().ok()).collect();
        if k == 0 && parsed.iter().all(Option::is_none) {
            width = Some(record.len());
            continue;
        }
        let w = *width.get_or_insert(record.len());
        if record.len() != w {
            return Err(Error::Csv(format!("line {line}: expected {w} fields, found {}", record.len())));
        }
        if !(2..=3).contains(&w) {
            return Err(Error::Csv(format!(
                "line {line}: expected columns x,y[,label], found {w} field{}",
                if w == 1 { "" } else { "s" }
            )));
        }
        for (c, v) in parsed.iter().take(2).enumerate() {
            match v {
                Some(v) if v.is_finite() => values.push(*v),
                _ => {
                    return Err(Error::Csv(format!(
                        "line {line}: column {} is not a finite number: {:?}",
                        c + 1,
                        &record[c]
                    )))
                }
            }
        }
        if w == 3 {
            let label = match record[2].parse::<u8>() {
                Ok(v @ (0 | 1)) => v,
                _ => {
                    return Err(Error::Csv(format!(
                        "line {line}: label must be 0 or 1, found {:?}",
                        &record[2]
                    )))
                }
            };
            labels.push(label);
        }
    }
    if values.is_empty() {
        return Err(Error::Csv("no data rows".into()));
    }
    Ok(Sample {
        data: DataSet::new(values, 2)?,
        labels: (width == Some(3)).then_some(labels),
    })
}

pub fn read_sample_file(path: &Path) -> Result<Sample> {
    let file = File::open(path).map_err(|e| Error::Csv(format!("{}: {e}", path.display())))?;
    read_sample(file).map_err(|e| match e {
        Error::Csv(msg) => Error::Csv(format!("{}: {msg}", path.display())),
        other => other,
    })
}

#[derive(Deserialize)]
#[serde(untagged)]
enum MatrixJson {
    Rows(Vec<Vec<f64>>),
    Object {
        #[serde(rename = "H")]
        h: Vec<Vec<f64>>,
    },
}

/// Parses a bandwidth written either as a bare row array or as an object with an
/// `"H"` field, such as the output of bandwidth selection.
pub fn parse_bandwidth_json(text: &str) -> Result<Bandwidth> {
    let rows = match serde_json::from_str::<MatrixJson>(text)? {
        MatrixJson::Rows(r) | MatrixJson::Object { h: r } => r,
    };
    let d = rows.len();
    if d == 0 || rows.iter().any(|r| r.len() != d) {
        return Err(Error::InvalidBandwidth("bandwidth must be a square matrix".into()));
    }
    Bandwidth::full(DMatrix::from_fn(d, d, |i, j| rows[i][j]))
}

/// Resolves a builtin model name or a path to a mixture JSON file.
pub fn load_model(spec: &str) -> Result<MixtureDensity> {
    match MixtureDensity::builtin(spec) {
        Ok(m) => Ok(m),
        Err(_) => {
            let text = std::fs::read_to_string(spec)
                .map_err(|e| Error::InvalidModel(format!("{spec:?} is neither a builtin model nor a readable file: {e}")))?;
            MixtureDensity::from_json(&text)
        }
    }
}
