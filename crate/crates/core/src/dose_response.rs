//! Weighted least-squares dose-response surfaces over an estimable region.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format_float;
use crate::geometry::{region_grid, Region};
use crate::gps::{Dataset, Method, WeightSet, INTERCEPT};
use crate::stats::{effective_sample_size, fit_least_squares, DesignMatrix, LinearFit};

/// Exposure design of the outcome model. An intercept is always included.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Formula {
    /// One linear term per exposure.
    pub linear: bool,
    /// Products of every pair of exposures.
    pub interaction: bool,
    /// Highest power of each exposure; powers `2..=degree` are added.
    pub degree: u32,
}

impl Default for Formula {
    fn default() -> Self {
        Self::linear()
    }
}

impl Formula {
    pub fn linear() -> Self {
        Self {
            linear: true,
            interaction: false,
            degree: 1,
        }
    }

    pub fn with_interaction() -> Self {
        Self {
            interaction: true,
            ..Self::linear()
        }
    }

    pub fn terms(&self, exposure_names: &[String]) -> Vec<String> {
        let m = exposure_names.len();
        let mut terms = vec![INTERCEPT.to_string()];
        if self.linear {
            terms.extend(exposure_names.iter().cloned());
        }
        for power in 2..=self.degree {
            terms.extend(exposure_names.iter().map(|n| format!("{n}^{power}")));
        }
        if self.interaction {
            for a in 0..m {
                for b in a + 1..m {
                    terms.push(format!("{}:{}", exposure_names[a], exposure_names[b]));
                }
            }
        }
        terms
    }

    pub fn row(&self, d: &[f64]) -> Vec<f64> {
        let m = d.len();
        let mut row = vec![1.0];
        if self.linear {
            row.extend_from_slice(d);
        }
        for power in 2..=self.degree {
            row.extend(d.iter().map(|v| v.powi(power as i32)));
        }
        if self.interaction {
            for a in 0..m {
                for b in a + 1..m {
                    row.push(d[a] * d[b]);
                }
            }
        }
        row
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoseResponseFit {
    pub formula: Formula,
    pub fit: LinearFit,
    pub region: Region,
    pub method: Method,
    pub trim_q: Option<f64>,
    /// Units inside the region that entered the fit.
    pub retained: usize,
    /// Effective sample size of the retained weights.
    pub ess: f64,
    pub exposure_names: Vec<String>,
}

impl DoseResponseFit {
    /// Prediction at `d` without the region check.
    pub fn evaluate(&self, d: &[f64]) -> f64 {
        self.fit.predict(&self.formula.row(d))
    }
}

/// Weighted least squares of the outcome on the exposure design, using only
/// units whose exposures lie in `region`.
pub fn fit_dose_response(
    data: &Dataset,
    ws: &WeightSet,
    formula: Formula,
    region: &Region,
) -> Result<DoseResponseFit> {
    let n = data.n();
    if ws.len() != n {
        return Err(Error::Shape(format!("{} weights for {n} dataset rows", ws.len())));
    }
    if formula.degree == 0 {
        return Err(Error::InvalidConfig("formula degree must be at least 1".into()));
    }
    let m = data.n_exposures();
    if region.dimension() != m {
        return Err(Error::Shape(format!(
            "region has dimension {}, dataset has {m} exposures",
            region.dimension()
        )));
    }
    let mut rows = Vec::new();
    for i in 0..n {
        if region.contains(&data.exposure_row(i))? {
            rows.push(i);
        }
    }
    let terms = formula.terms(data.exposure_names());
    let required = terms.len() + 1;
    if rows.len() < required {
        return Err(Error::InsufficientSupport {
            retained: rows.len(),
            required,
        });
    }
    let design = DesignMatrix::from_rows(terms, rows.len(), |r, out| {
        out.copy_from_slice(&formula.row(&data.exposure_row(rows[r])));
    })?;
    let y: Vec<f64> = rows.iter().map(|&i| data.outcome()[i]).collect();
    let w: Vec<f64> = rows.iter().map(|&i| ws.weights()[i]).collect();
    let fit = fit_least_squares(&design, &y, &w)?;
    Ok(DoseResponseFit {
        formula,
        fit,
        region: region.clone(),
        method: ws.method().clone(),
        trim_q: ws.trim_q(),
        retained: rows.len(),
        ess: effective_sample_size(&w)?,
        exposure_names: data.exposure_names().to_vec(),
    })
}

/// Fitted surface at each point; points outside the fit region are refused.
pub fn predict_surface(fit: &DoseResponseFit, points: &[Vec<f64>]) -> Result<Vec<f64>> {
    points
        .iter()
        .map(|p| {
            if fit.region.contains(p)? {
                Ok(fit.evaluate(p))
            } else {
                Err(Error::Extrapolation(p.clone()))
            }
        })
        .collect()
}

/// `Σ_j |α_j − α̂_j|` over the linear exposure coefficients.
pub fn total_abs_bias(fit: &DoseResponseFit, true_alpha: &[f64]) -> Result<f64> {
    if true_alpha.len() != fit.exposure_names.len() {
        return Err(Error::Shape(format!(
            "{} true effects for {} exposures",
            true_alpha.len(),
            fit.exposure_names.len()
        )));
    }
    fit.exposure_names
        .iter()
        .zip(true_alpha)
        .map(|(name, truth)| {
            fit.fit
                .coefficient(name)
                .map(|est| (est - truth).abs())
                .ok_or_else(|| Error::MetricUndefined(format!("formula has no linear term for `{name}`")))
        })
        .sum()
}

/// Root mean squared difference between the fitted surface and the linear
/// truth `αᵀd` over `count` grid points of `region`.
pub fn rmse_on_region(fit: &DoseResponseFit, truth: &[f64], region: &Region, count: usize) -> Result<f64> {
    if truth.len() != fit.exposure_names.len() {
        return Err(Error::Shape(format!(
            "{} true effects for {} exposures",
            truth.len(),
            fit.exposure_names.len()
        )));
    }
    rmse_on_region_with(fit, |d| d.iter().zip(truth).map(|(a, b)| a * b).sum(), region, count)
}

/// [`rmse_on_region`] against an arbitrary true mean response.
pub fn rmse_on_region_with<F>(fit: &DoseResponseFit, truth: F, region: &Region, count: usize) -> Result<f64>
where
    F: Fn(&[f64]) -> f64,
{
    if region.dimension() != fit.exposure_names.len() {
        return Err(Error::Shape(format!(
            "region has dimension {}, fit has {} exposures",
            region.dimension(),
            fit.exposure_names.len()
        )));
    }
    let grid = region_grid(region, count)?;
    let sse: f64 = grid
        .iter()
        .map(|d| (truth(d) - fit.evaluate(d)).powi(2))
        .sum();
    Ok((sse / grid.len() as f64).sqrt())
}

/// Writes `d1,...,dm,yhat` rows for the given points.
pub fn write_surface_csv<W: Write>(fit: &DoseResponseFit, points: &[Vec<f64>], out: W) -> Result<()> {
    let values = predict_surface(fit, points)?;
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = (1..=fit.exposure_names.len()).map(|j| format!("d{j}")).collect();
    header.push("yhat".into());
    w.write_record(&header)?;
    for (p, y) in points.iter().zip(values) {
        let mut rec: Vec<String> = p.iter().copied().map(format_float).collect();
        rec.push(format_float(y));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::Csv(e.to_string()))?;
    Ok(())
}
