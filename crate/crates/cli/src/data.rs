//! Dataset files: a CSV table plus a JSON spec assigning column roles.

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use mvgps::gps::{Dataset, Method, PolyTerm, WeightSet};
use nalgebra::DMatrix;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::manifest::{manifest_path, RunManifest};
use crate::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub outcome: String,
    pub exposures: Vec<String>,
    /// One list of covariate columns per exposure, in exposure order.
    pub confounders: Vec<Vec<String>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub polynomials: Vec<PolynomialSpec>,
    /// Extra covariate columns to load, e.g. for balance checks on
    /// non-confounders.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub covariates: Vec<String>,
}

/// Adds powers `2..=degree` of `column` to the propensity model of `exposure`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolynomialSpec {
    pub column: String,
    pub degree: u32,
    pub exposure: String,
}

#[derive(Debug, Clone)]
pub struct LoadedData {
    pub dataset: Dataset,
    pub poly_terms: Vec<PolyTerm>,
    pub spec: DatasetSpec,
}

pub fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| CliError::io(path, e))
}

pub fn create(path: &Path) -> Result<File> {
    File::create(path).map_err(|e| CliError::io(path, e))
}

/// Parses a JSON file, reporting the path of the offending field.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let mut de = serde_json::Deserializer::from_reader(BufReader::new(open(path)?));
    serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let field = e.path().to_string();
        CliError::Input(format!("{}: at `{field}`: {}", path.display(), e.inner()))
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Input(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// `dir/stem.csv` -> `dir/stem.<suffix>`.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn parse_cell(raw: &str, column: &str, row: usize) -> Result<f64> {
    let s = raw.trim();
    if s.is_empty() || s.eq_ignore_ascii_case("na") || s.eq_ignore_ascii_case("nan") {
        return Err(CliError::Input(format!("column `{column}`: missing value at row {row}")));
    }
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(CliError::Input(format!("column `{column}`: `{s}` at row {row} is not a finite number"))),
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.exposures.is_empty() {
            return Err(CliError::Input("spec lists no exposures".into()));
        }
        if self.confounders.len() != self.exposures.len() {
            return Err(CliError::Input(format!(
                "spec has {} confounder lists for {} exposures",
                self.confounders.len(),
                self.exposures.len()
            )));
        }
        Ok(())
    }

    /// Covariate columns in order of first mention.
    pub fn covariate_columns(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        let mentioned = self
            .confounders
            .iter()
            .flatten()
            .chain(self.polynomials.iter().map(|p| &p.column))
            .chain(&self.covariates);
        for c in mentioned {
            if !out.contains(c) {
                out.push(c.clone());
            }
        }
        out
    }
}

pub fn load_dataset(data: &Path, spec_path: &Path) -> Result<LoadedData> {
    let spec: DatasetSpec = read_json(spec_path)?;
    spec.validate()?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(open(data)?);
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let locate = |name: &str| {
        header.iter().position(|h| h == name).ok_or_else(|| {
            CliError::Input(format!("column `{name}` not found in {}", data.display()))
        })
    };

    let covariates = spec.covariate_columns();
    let mut columns: Vec<String> = vec![spec.outcome.clone()];
    columns.extend(spec.exposures.iter().cloned());
    columns.extend(covariates.iter().cloned());
    let index: Vec<usize> = columns.iter().map(|c| locate(c)).collect::<Result<_>>()?;

    let mut values: Vec<Vec<f64>> = vec![Vec::new(); columns.len()];
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        for ((col, &i), name) in values.iter_mut().zip(&index).zip(&columns) {
            let raw = record.get(i).ok_or_else(|| {
                CliError::Input(format!("column `{name}`: row {} is too short", r + 1))
            })?;
            col.push(parse_cell(raw, name, r + 1)?);
        }
    }
    let n = values[0].len();
    if n == 0 {
        return Err(CliError::Input(format!("{} has no data rows", data.display())));
    }

    let m = spec.exposures.len();
    let p = covariates.len();
    let exposures = DMatrix::from_fn(n, m, |i, j| values[1 + j][i]);
    let covariate_matrix = DMatrix::from_fn(n, p, |i, k| values[1 + m + k][i]);
    let cov_index = |name: &str| covariates.iter().position(|c| c == name).expect("listed covariate");
    let sets: Vec<Vec<usize>> = spec
        .confounders
        .iter()
        .map(|set| set.iter().map(|c| cov_index(c)).collect())
        .collect();
    let dataset = Dataset::new(values[0].clone(), exposures, covariate_matrix, sets)?.with_names(
        spec.outcome.clone(),
        spec.exposures.clone(),
        covariates.clone(),
    )?;

    let poly_terms = spec
        .polynomials
        .iter()
        .map(|t| {
            let exposure = spec.exposures.iter().position(|e| e == &t.exposure).ok_or_else(|| {
                CliError::Input(format!("polynomial term names unknown exposure `{}`", t.exposure))
            })?;
            if t.degree < 2 {
                return Err(CliError::Input(format!(
                    "polynomial term on `{}` needs degree >= 2",
                    t.column
                )));
            }
            Ok(PolyTerm {
                exposure,
                covariate: cov_index(&t.column),
                degree: t.degree,
            })
        })
        .collect::<Result<_>>()?;
    Ok(LoadedData {
        dataset,
        poly_terms,
        spec,
    })
}

/// Writes `row_id,weight` with 1-based row ids.
pub fn write_weights(path: &Path, weights: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(["row_id", "weight"])?;
    for (i, v) in weights.iter().enumerate() {
        w.write_record([(i + 1).to_string(), mvgps::format_float(*v)])?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Reads a weight CSV and the method recorded in its manifest, if any.
pub fn read_weights(path: &Path, n: usize) -> Result<WeightSet> {
    let mut reader = csv::Reader::from_reader(open(path)?);
    let header = reader.headers()?.clone();
    let col = header.iter().position(|h| h == "weight").ok_or_else(|| {
        CliError::Input(format!("{}: no `weight` column", path.display()))
    })?;
    let mut weights = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        let raw = record.get(col).unwrap_or("");
        weights.push(parse_cell(raw, "weight", r + 1)?);
    }
    if weights.len() != n {
        return Err(CliError::Input(format!(
            "{}: {} weights for {n} data rows",
            path.display(),
            weights.len()
        )));
    }

    let (method, trim) = match std::fs::metadata(manifest_path(path)) {
        Ok(_) => {
            let m: RunManifest = read_json(&manifest_path(path))?;
            let method = m.config.get("method").and_then(|v| v.as_str()).and_then(|s| s.parse().ok());
            let trim = m.config.get("trim").and_then(|v| v.as_f64());
            (method, trim)
        }
        Err(_) => (None, None),
    };
    let method = method.unwrap_or_else(|| {
        Method::Custom(path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default())
    });
    Ok(WeightSet::new(weights, method)?.with_trim_q(trim))
}
