//! Covariate balance diagnostics: weighted exposure–covariate correlations,
//! their maximum and mean absolute values, and the effective sample size.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format_float;
use crate::gps::{Dataset, Method, WeightSet};
use crate::stats::{effective_sample_size, weighted_pearson};

/// Which covariate columns are paired with every exposure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BalanceScope {
    /// Union of all declared confounder sets.
    #[default]
    Confounders,
    AllCovariates,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairCorrelation {
    pub exposure: usize,
    pub covariate: usize,
    pub exposure_name: String,
    pub covariate_name: String,
    /// `None` when a column has zero weighted variance.
    pub value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceReport {
    pub pairs: Vec<PairCorrelation>,
    pub max_abs_corr: f64,
    pub avg_abs_corr: f64,
    pub ess: f64,
    pub method: Method,
    pub method_label: String,
    pub trim_q: Option<f64>,
    pub scope: BalanceScope,
    pub undefined_pairs: usize,
    /// Polynomial covariate columns that entered the table.
    pub expanded_terms: Vec<String>,
}

/// Weighted Pearson correlation of every exposure with every covariate in
/// `scope`, summarized over the defined pairs.
pub fn balance_report(data: &Dataset, ws: &WeightSet, scope: BalanceScope) -> Result<BalanceReport> {
    let n = data.n();
    if ws.len() != n {
        return Err(Error::Shape(format!(
            "{} weights for {n} dataset rows",
            ws.len()
        )));
    }
    let columns: Vec<usize> = match scope {
        BalanceScope::Confounders => data.confounder_union(),
        BalanceScope::AllCovariates => (0..data.n_covariates()).collect(),
    };
    if columns.is_empty() {
        return Err(Error::MetricUndefined("no covariates in balance scope".into()));
    }
    let w = ws.weights();
    let mut pairs = Vec::with_capacity(data.n_exposures() * columns.len());
    for j in 0..data.n_exposures() {
        for &k in &columns {
            let value = match weighted_pearson(data.exposure(j), data.covariate(k), w) {
                Ok(r) => Some(r),
                Err(Error::UndefinedCorrelation) => None,
                Err(e) => return Err(e),
            };
            pairs.push(PairCorrelation {
                exposure: j,
                covariate: k,
                exposure_name: data.exposure_names()[j].clone(),
                covariate_name: data.covariate_names()[k].clone(),
                value,
            });
        }
    }
    let defined: Vec<f64> = pairs.iter().filter_map(|p| p.value.map(f64::abs)).collect();
    if defined.is_empty() {
        return Err(Error::MetricUndefined(
            "every exposure-covariate correlation is undefined".into(),
        ));
    }
    let max_abs_corr = defined.iter().copied().fold(0.0, f64::max);
    let avg_abs_corr = defined.iter().sum::<f64>() / defined.len() as f64;
    let expanded_terms = columns
        .iter()
        .map(|&k| &data.covariate_names()[k])
        .filter(|name| name.contains('^'))
        .cloned()
        .collect();
    Ok(BalanceReport {
        undefined_pairs: pairs.len() - defined.len(),
        pairs,
        max_abs_corr,
        avg_abs_corr,
        ess: effective_sample_size(w)?,
        method: ws.method().clone(),
        method_label: ws.method().table_label(data.exposure_names()),
        trim_q: ws.trim_q(),
        scope,
        expanded_terms,
    })
}

impl BalanceReport {
    /// One row per pair: `exposure,covariate,corr`; undefined pairs leave
    /// `corr` empty.
    pub fn write_pairs_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["exposure", "covariate", "corr"])?;
        for p in &self.pairs {
            let value = p.value.map(format_float).unwrap_or_default();
            w.write_record([p.exposure_name.as_str(), p.covariate_name.as_str(), value.as_str()])?;
        }
        w.flush().map_err(|e| Error::Csv(e.to_string()))?;
        Ok(())
    }
}

/// Summary table with columns Max Abs. Corr., Avg. Abs. Corr., ESS and
/// Method; correlations to two decimals, ESS rounded to an integer.
pub fn format_balance_table(reports: &[BalanceReport]) -> String {
    let mut out = String::from("| Max Abs. Corr. | Avg. Abs. Corr. | ESS | Method |\n");
    out.push_str("|---|---|---|---|\n");
    for r in reports {
        out.push_str(&format!(
            "| {:.2} | {:.2} | {:.0} | {} |\n",
            r.max_abs_corr, r.avg_abs_corr, r.ess, r.method_label
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn data() -> Dataset {
        let d1 = [0.5, 1.2, -0.3, 2.2, 0.1, -1.0, 0.7, 1.9];
        let d2 = [1.0, -0.5, 0.3, 0.8, -1.4, 0.2, 0.6, -0.1];
        let x1 = [0.2, 0.9, -0.4, 1.5, 0.0, -0.8, 0.1, 1.1];
        let x2 = [1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 1.0];
        let x3 = [3.0, 1.0, 4.0, 1.0, 5.0, 9.0, 2.0, 6.0];
        let mut exposures = DMatrix::zeros(8, 2);
        exposures.column_mut(0).copy_from_slice(&d1);
        exposures.column_mut(1).copy_from_slice(&d2);
        let mut covariates = DMatrix::zeros(8, 3);
        covariates.column_mut(0).copy_from_slice(&x1);
        covariates.column_mut(1).copy_from_slice(&x2);
        covariates.column_mut(2).copy_from_slice(&x3);
        Dataset::new(vec![0.0; 8], exposures, covariates, vec![vec![0], vec![1]]).unwrap()
    }

    #[test]
    fn identity_weights_match_pearson() {
        let data = data();
        let ws = WeightSet::unweighted(8);
        let report = balance_report(&data, &ws, BalanceScope::Confounders).unwrap();
        assert_eq!(report.pairs.len(), 4);
        for p in &report.pairs {
            let (x, y) = (data.exposure(p.exposure), data.covariate(p.covariate));
            let mx = x.iter().sum::<f64>() / 8.0;
            let my = y.iter().sum::<f64>() / 8.0;
            let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
            let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
            let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
            assert!((p.value.unwrap() - sxy / (sxx * syy).sqrt()).abs() < 1e-12);
        }
        assert_eq!(report.ess, 8.0);
        assert!(report.avg_abs_corr <= report.max_abs_corr);
        assert_eq!(report.method_label, "Unweighted");

        let all = balance_report(&data, &ws, BalanceScope::AllCovariates).unwrap();
        assert_eq!(all.pairs.len(), 6);
    }

    #[test]
    fn undefined_pairs_are_excluded() {
        let data = data();
        // only units with x2 = 1 carry weight, which makes x2 constant
        let w: Vec<f64> = data
            .covariate(1)
            .iter()
            .map(|v| if *v == 1.0 { 1.0 } else { 1e-300 })
            .collect();
        let ws = WeightSet::new(w, Method::Custom("mask".into())).unwrap();
        let report = balance_report(&data, &ws, BalanceScope::AllCovariates).unwrap();
        assert_eq!(report.undefined_pairs, 2);
        let defined: Vec<f64> = report.pairs.iter().filter_map(|p| p.value).collect();
        assert_eq!(defined.len(), 4);
        let max = defined.iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert_eq!(report.max_abs_corr, max);
    }

    #[test]
    fn rescaling_weights_keeps_summaries() {
        let data = data();
        let w = vec![0.5, 1.5, 2.0, 0.7, 1.1, 0.9, 3.0, 0.4];
        let a = WeightSet::new(w.clone(), Method::Mvgps).unwrap();
        let b = WeightSet::new(w.iter().map(|v| v * 37.0).collect(), Method::Mvgps).unwrap();
        let ra = balance_report(&data, &a, BalanceScope::Confounders).unwrap();
        let rb = balance_report(&data, &b, BalanceScope::Confounders).unwrap();
        assert!((ra.max_abs_corr - rb.max_abs_corr).abs() < 1e-12);
        assert!((ra.avg_abs_corr - rb.avg_abs_corr).abs() < 1e-12);
        assert!((ra.ess - rb.ess).abs() < 1e-9);
        assert!(ra.ess < 8.0);
    }

    #[test]
    fn length_mismatch() {
        let err = balance_report(&data(), &WeightSet::unweighted(3), BalanceScope::Confounders);
        assert!(matches!(err, Err(Error::Shape(_))));
    }

    #[test]
    fn table_layout() {
        let data = data();
        let report = balance_report(&data, &WeightSet::unweighted(8), BalanceScope::Confounders).unwrap();
        let table = format_balance_table(&[report]);
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines[0], "| Max Abs. Corr. | Avg. Abs. Corr. | ESS | Method |");
        assert!(lines[2].ends_with("| 8 | Unweighted |"));
    }
}
