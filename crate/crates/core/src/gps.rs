//! Multivariate generalized propensity score weights.
//!
//! The joint exposure densities in the weight `f(D) / f(D | C₁..C_m)` are
//! factorized into chains of univariate normal conditionals. Exposure `j` in
//! the denominator chain conditions on its own confounder set and on the
//! exposures that precede it in the chosen order; the numerator chain
//! conditions on the preceding exposures only. Each conditional is fit by
//! least squares.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::{
    self, column, fit_least_squares, normal_log_pdf, DesignMatrix, LinearFit,
};

pub const INTERCEPT: &str = "(Intercept)";

/// Observed data: outcome, exposures and covariates, with the confounder set
/// of each exposure given as covariate column indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    outcome: Vec<f64>,
    exposures: DMatrix<f64>,
    covariates: DMatrix<f64>,
    confounder_sets: Vec<Vec<usize>>,
    outcome_name: String,
    exposure_names: Vec<String>,
    covariate_names: Vec<String>,
}

impl Dataset {
    /// Builds a dataset with default column names `Y`, `D1..Dm`, `X1..XP`.
    pub fn new(
        outcome: Vec<f64>,
        exposures: DMatrix<f64>,
        covariates: DMatrix<f64>,
        confounder_sets: Vec<Vec<usize>>,
    ) -> Result<Self> {
        let exposure_names = (1..=exposures.ncols()).map(|j| format!("D{j}")).collect();
        let covariate_names = (1..=covariates.ncols()).map(|k| format!("X{k}")).collect();
        let data = Self {
            outcome,
            exposures,
            covariates,
            confounder_sets,
            outcome_name: "Y".into(),
            exposure_names,
            covariate_names,
        };
        data.validate()?;
        Ok(data)
    }

    pub fn with_names(
        mut self,
        outcome: impl Into<String>,
        exposures: Vec<String>,
        covariates: Vec<String>,
    ) -> Result<Self> {
        if exposures.len() != self.n_exposures() || covariates.len() != self.n_covariates() {
            return Err(Error::Shape(format!(
                "{} exposure and {} covariate names for {} exposures and {} covariates",
                exposures.len(),
                covariates.len(),
                self.n_exposures(),
                self.n_covariates()
            )));
        }
        self.outcome_name = outcome.into();
        self.exposure_names = exposures;
        self.covariate_names = covariates;
        Ok(self)
    }

    fn validate(&self) -> Result<()> {
        let n = self.outcome.len();
        if n == 0 {
            return Err(Error::EmptyInput);
        }
        if self.exposures.ncols() == 0 {
            return Err(Error::EmptyExposures);
        }
        if self.exposures.nrows() != n || self.covariates.nrows() != n {
            return Err(Error::Shape(format!(
                "outcome has {n} rows, exposures {}, covariates {}",
                self.exposures.nrows(),
                self.covariates.nrows()
            )));
        }
        if self.confounder_sets.len() != self.exposures.ncols() {
            return Err(Error::InvalidDataset(format!(
                "{} confounder sets for {} exposures",
                self.confounder_sets.len(),
                self.exposures.ncols()
            )));
        }
        let all_finite = self.outcome.iter().all(|v| v.is_finite())
            && self.exposures.iter().all(|v| v.is_finite())
            && self.covariates.iter().all(|v| v.is_finite());
        if !all_finite {
            return Err(Error::InvalidDataset("non-finite values".into()));
        }
        let p = self.covariates.ncols();
        for set in &self.confounder_sets {
            for &k in set {
                if k >= p {
                    return Err(Error::IndexOutOfRange {
                        what: "confounder column",
                        index: k,
                        len: p,
                    });
                }
                let col = column(&self.covariates, k);
                let first = col[0];
                if col.iter().all(|&v| v == first) {
                    return Err(Error::InvalidDataset(format!(
                        "confounder `{}` has zero variance",
                        self.covariate_names[k]
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.outcome.len()
    }

    pub fn n_exposures(&self) -> usize {
        self.exposures.ncols()
    }

    pub fn n_covariates(&self) -> usize {
        self.covariates.ncols()
    }

    pub fn outcome(&self) -> &[f64] {
        &self.outcome
    }

    pub fn exposures(&self) -> &DMatrix<f64> {
        &self.exposures
    }

    pub fn covariates(&self) -> &DMatrix<f64> {
        &self.covariates
    }

    pub fn exposure(&self, j: usize) -> &[f64] {
        column(&self.exposures, j)
    }

    pub fn covariate(&self, k: usize) -> &[f64] {
        column(&self.covariates, k)
    }

    pub fn exposure_row(&self, i: usize) -> Vec<f64> {
        self.exposures.row(i).iter().copied().collect()
    }

    pub fn covariate_row(&self, i: usize) -> Vec<f64> {
        self.covariates.row(i).iter().copied().collect()
    }

    pub fn confounder_sets(&self) -> &[Vec<usize>] {
        &self.confounder_sets
    }

    pub fn confounders(&self, j: usize) -> &[usize] {
        &self.confounder_sets[j]
    }

    /// Sorted union of all confounder sets.
    pub fn confounder_union(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self.confounder_sets.iter().flatten().copied().collect();
        all.sort_unstable();
        all.dedup();
        all
    }

    pub fn outcome_name(&self) -> &str {
        &self.outcome_name
    }

    pub fn exposure_names(&self) -> &[String] {
        &self.exposure_names
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    /// New dataset holding the given rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        let n = self.n();
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::IndexOutOfRange {
                what: "row",
                index: bad,
                len: n,
            });
        }
        let pick = |m: &DMatrix<f64>| DMatrix::from_fn(rows.len(), m.ncols(), |i, j| m[(rows[i], j)]);
        let data = Self {
            outcome: rows.iter().map(|&r| self.outcome[r]).collect(),
            exposures: pick(&self.exposures),
            covariates: pick(&self.covariates),
            confounder_sets: self.confounder_sets.clone(),
            outcome_name: self.outcome_name.clone(),
            exposure_names: self.exposure_names.clone(),
            covariate_names: self.covariate_names.clone(),
        };
        data.validate()?;
        Ok(data)
    }

    /// The one-exposure dataset for exposure `j` and its confounder set. All
    /// covariate columns are kept so indices stay valid.
    pub fn single_exposure(&self, j: usize) -> Result<Self> {
        self.check_exposure(j)?;
        Ok(Self {
            outcome: self.outcome.clone(),
            exposures: DMatrix::from_column_slice(self.n(), 1, self.exposure(j)),
            covariates: self.covariates.clone(),
            confounder_sets: vec![self.confounder_sets[j].clone()],
            outcome_name: self.outcome_name.clone(),
            exposure_names: vec![self.exposure_names[j].clone()],
            covariate_names: self.covariate_names.clone(),
        })
    }

    pub(crate) fn check_exposure(&self, j: usize) -> Result<()> {
        if j >= self.n_exposures() {
            return Err(Error::IndexOutOfRange {
                what: "exposure",
                index: j,
                len: self.n_exposures(),
            });
        }
        Ok(())
    }

    /// Appends the powers declared by `terms` as covariate columns named
    /// `<column>^<power>` and adds them to the matching confounder sets.
    /// Columns that already exist under that name are reused.
    pub fn with_polynomials(&self, terms: &[PolyTerm]) -> Result<Self> {
        let mut out = self.clone();
        for term in terms {
            out.check_exposure(term.exposure)?;
            if term.covariate >= self.n_covariates() {
                return Err(Error::IndexOutOfRange {
                    what: "covariate",
                    index: term.covariate,
                    len: self.n_covariates(),
                });
            }
            for power in 2..=term.degree {
                let name = format!("{}^{}", self.covariate_names[term.covariate], power);
                let idx = match out.covariate_names.iter().position(|c| *c == name) {
                    Some(idx) => idx,
                    None => {
                        let base = self.covariate(term.covariate);
                        let values: Vec<f64> = base.iter().map(|v| v.powi(power as i32)).collect();
                        let p = out.covariates.ncols();
                        out.covariates = out.covariates.clone().insert_column(p, 0.0);
                        out.covariates.column_mut(p).copy_from_slice(&values);
                        out.covariate_names.push(name);
                        p
                    }
                };
                let set = &mut out.confounder_sets[term.exposure];
                if !set.contains(&idx) {
                    set.push(idx);
                }
            }
        }
        out.validate()?;
        Ok(out)
    }
}

/// A polynomial confounder term: powers `2..=degree` of covariate `covariate`
/// enter the propensity model of exposure `exposure`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolyTerm {
    pub exposure: usize,
    pub covariate: usize,
    pub degree: u32,
}

/// One univariate normal conditional in a factorized density.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalModel {
    pub exposure: usize,
    pub covariates: Vec<usize>,
    pub prior_exposures: Vec<usize>,
    pub intercept: bool,
    pub fit: LinearFit,
}

impl ConditionalModel {
    fn design_names(
        data_exposures: &[String],
        data_covariates: &[String],
        covariates: &[usize],
        prior: &[usize],
        intercept: bool,
    ) -> Vec<String> {
        let mut names = Vec::with_capacity(covariates.len() + prior.len() + 1);
        if intercept {
            names.push(INTERCEPT.to_string());
        }
        names.extend(covariates.iter().map(|&k| data_covariates[k].clone()));
        names.extend(prior.iter().map(|&j| data_exposures[j].clone()));
        names
    }

    fn fill_row(&self, exposures: &[f64], covariates: &[f64], row: &mut Vec<f64>) {
        row.clear();
        if self.intercept {
            row.push(1.0);
        }
        row.extend(self.covariates.iter().map(|&k| covariates[k]));
        row.extend(self.prior_exposures.iter().map(|&j| exposures[j]));
    }

    pub fn mean(&self, exposures: &[f64], covariates: &[f64]) -> f64 {
        let mut row = Vec::new();
        self.fill_row(exposures, covariates, &mut row);
        self.fit.predict(&row)
    }

    pub fn log_density(&self, exposures: &[f64], covariates: &[f64]) -> Result<f64> {
        if self.fit.residual_sd <= 0.0 {
            return Err(Error::DegenerateDensity(
                self.fit.terms.first().cloned().unwrap_or_default(),
            ));
        }
        normal_log_pdf(
            exposures[self.exposure],
            self.mean(exposures, covariates),
            self.fit.residual_sd,
        )
    }

    fn estimate(
        data: &Dataset,
        exposure: usize,
        covariates: Vec<usize>,
        prior_exposures: Vec<usize>,
        intercept: bool,
    ) -> Result<Self> {
        let names = Self::design_names(
            data.exposure_names(),
            data.covariate_names(),
            &covariates,
            &prior_exposures,
            intercept,
        );
        if names.is_empty() {
            return Err(Error::InvalidConfig(format!(
                "model for `{}` has no terms; enable the intercept",
                data.exposure_names()[exposure]
            )));
        }
        let design = DesignMatrix::from_rows(names, data.n(), |i, row| {
            let mut c = 0;
            if intercept {
                row[0] = 1.0;
                c = 1;
            }
            for &k in &covariates {
                row[c] = data.covariates()[(i, k)];
                c += 1;
            }
            for &j in &prior_exposures {
                row[c] = data.exposures()[(i, j)];
                c += 1;
            }
        })?;
        let fit = fit_least_squares(&design, data.exposure(exposure), &vec![1.0; data.n()])?;
        if fit.residual_sd <= 0.0 {
            return Err(Error::DegenerateDensity(data.exposure_names()[exposure].clone()));
        }
        Ok(Self {
            exposure,
            covariates,
            prior_exposures,
            intercept,
            fit,
        })
    }
}

/// Fitted numerator and denominator chains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensityFit {
    pub order: Vec<usize>,
    pub denominator: Vec<ConditionalModel>,
    pub numerator: Vec<ConditionalModel>,
    pub design_transforms: Vec<PolyTerm>,
}

impl PropensityFit {
    pub fn log_numerator(&self, exposures: &[f64]) -> Result<f64> {
        self.numerator
            .iter()
            .map(|m| m.log_density(exposures, &[]))
            .sum()
    }

    pub fn log_denominator(&self, exposures: &[f64], covariates: &[f64]) -> Result<f64> {
        self.denominator
            .iter()
            .map(|m| m.log_density(exposures, covariates))
            .sum()
    }

    /// Marginal exposure density implied by the numerator chain.
    pub fn numerator_density(&self, exposures: &[f64]) -> Result<f64> {
        Ok(self.log_numerator(exposures)?.exp())
    }

    /// Conditional exposure density given one unit's covariates.
    pub fn denominator_density(&self, exposures: &[f64], covariates: &[f64]) -> Result<f64> {
        Ok(self.log_denominator(exposures, covariates)?.exp())
    }

    pub fn log_weight(&self, exposures: &[f64], covariates: &[f64]) -> Result<f64> {
        let numerator: f64 = self
            .numerator
            .iter()
            .map(|m| m.log_density(exposures, covariates))
            .sum::<Result<f64>>()?;
        Ok(numerator - self.log_denominator(exposures, covariates)?)
    }

    fn max_covariate_index(&self) -> Option<usize> {
        self.denominator
            .iter()
            .chain(&self.numerator)
            .flat_map(|m| m.covariates.iter().copied())
            .max()
    }
}

/// Options for [`fit_mvgps`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MvgpsOptions {
    /// Factorization order; `None` uses column order.
    pub order: Option<Vec<usize>>,
    pub poly_terms: Vec<PolyTerm>,
    pub intercept: bool,
}

impl Default for MvgpsOptions {
    fn default() -> Self {
        Self {
            order: None,
            poly_terms: Vec::new(),
            intercept: true,
        }
    }
}

impl MvgpsOptions {
    pub fn with_order(order: Vec<usize>) -> Self {
        Self {
            order: Some(order),
            ..Self::default()
        }
    }
}

fn resolve_order(order: Option<&[usize]>, m: usize) -> Result<Vec<usize>> {
    let order = order.map(<[usize]>::to_vec).unwrap_or_else(|| (0..m).collect());
    let mut seen = vec![false; m];
    for &j in &order {
        if j >= m || seen[j] {
            return Err(Error::InvalidConfig(format!(
                "order {order:?} is not a permutation of 0..{m}"
            )));
        }
        seen[j] = true;
    }
    if order.len() != m {
        return Err(Error::InvalidConfig(format!(
            "order {order:?} is not a permutation of 0..{m}"
        )));
    }
    Ok(order)
}

/// Fits the numerator and denominator conditional chains by least squares.
pub fn fit_mvgps(data: &Dataset, options: &MvgpsOptions) -> Result<PropensityFit> {
    let m = data.n_exposures();
    if m == 0 {
        return Err(Error::EmptyExposures);
    }
    let order = resolve_order(options.order.as_deref(), m)?;
    let expanded;
    let data = if options.poly_terms.is_empty() {
        data
    } else {
        expanded = data.with_polynomials(&options.poly_terms)?;
        &expanded
    };

    let mut denominator = Vec::with_capacity(m);
    let mut numerator = Vec::with_capacity(m);
    for (pos, &j) in order.iter().enumerate() {
        let prior = order[..pos].to_vec();
        denominator.push(ConditionalModel::estimate(
            data,
            j,
            data.confounders(j).to_vec(),
            prior.clone(),
            options.intercept,
        )?);
        numerator.push(ConditionalModel::estimate(
            data,
            j,
            Vec::new(),
            prior,
            options.intercept,
        )?);
    }
    Ok(PropensityFit {
        order,
        denominator,
        numerator,
        design_transforms: options.poly_terms.clone(),
    })
}

/// Weight label recording which method produced a [`WeightSet`].
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Method {
    Mvgps,
    /// Univariate normal GPS for one exposure (zero-based index).
    GpsUni(usize),
    /// Entropy balancing for one exposure (zero-based index).
    Entropy(usize),
    Unweighted,
    /// Weights supplied from outside the library.
    Custom(String),
}

impl Method {
    /// Row label in the layout of a published balance table, e.g. `PS (D1)`.
    pub fn table_label(&self, exposure_names: &[String]) -> String {
        let name = |j: &usize| {
            exposure_names
                .get(*j)
                .cloned()
                .unwrap_or_else(|| format!("D{}", j + 1))
        };
        match self {
            Method::Mvgps => "mvGPS".into(),
            Method::GpsUni(j) => format!("PS ({})", name(j)),
            Method::Entropy(j) => format!("Entropy ({})", name(j)),
            Method::Unweighted => "Unweighted".into(),
            Method::Custom(s) => s.clone(),
        }
    }

    /// Exposure targeted by a univariate method.
    pub fn exposure(&self) -> Option<usize> {
        match self {
            Method::GpsUni(j) | Method::Entropy(j) => Some(*j),
            _ => None,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Mvgps => f.write_str("mvGPS"),
            Method::GpsUni(j) => write!(f, "gps_uni({})", j + 1),
            Method::Entropy(j) => write!(f, "entropy({})", j + 1),
            Method::Unweighted => f.write_str("unweighted"),
            Method::Custom(s) => f.write_str(s),
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    /// Accepts `mvgps`, `unweighted`, `gps-uni:<j>`, `entropy:<j>` and the
    /// display forms `gps_uni(<j>)`, `entropy(<j>)`, with one-based `j`.
    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        let indexed = |rest: &str| -> Result<usize> {
            let j: usize = rest
                .trim_end_matches(')')
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("bad exposure index in method `{s}`")))?;
            if j == 0 {
                return Err(Error::InvalidConfig(format!(
                    "exposure indices are one-based in method `{s}`"
                )));
            }
            Ok(j - 1)
        };
        match lower.as_str() {
            "mvgps" => Ok(Method::Mvgps),
            "unweighted" => Ok(Method::Unweighted),
            _ => {
                for prefix in ["gps-uni:", "gps_uni(", "ps:"] {
                    if let Some(rest) = lower.strip_prefix(prefix) {
                        return Ok(Method::GpsUni(indexed(rest)?));
                    }
                }
                for prefix in ["entropy:", "entropy("] {
                    if let Some(rest) = lower.strip_prefix(prefix) {
                        return Ok(Method::Entropy(indexed(rest)?));
                    }
                }
                Err(Error::InvalidConfig(format!("unknown method `{s}`")))
            }
        }
    }
}

impl From<Method> for String {
    fn from(m: Method) -> Self {
        m.to_string()
    }
}

impl TryFrom<String> for Method {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// Per-unit weights with provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightSet {
    weights: Vec<f64>,
    method: Method,
    trim_q: Option<f64>,
}

impl WeightSet {
    pub fn new(weights: Vec<f64>, method: Method) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::EmptyInput);
        }
        if let Some((i, w)) = weights
            .iter()
            .enumerate()
            .find(|(_, w)| !(w.is_finite() && **w > 0.0))
        {
            return Err(Error::InvalidWeights(format!(
                "weight {i} is {w}; weights must be finite and positive"
            )));
        }
        Ok(Self {
            weights,
            method,
            trim_q: None,
        })
    }

    pub fn unweighted(n: usize) -> Self {
        Self {
            weights: vec![1.0; n],
            method: Method::Unweighted,
            trim_q: None,
        }
    }

    /// Records the trim level of weights that were trimmed elsewhere.
    pub fn with_trim_q(mut self, q: Option<f64>) -> Self {
        self.trim_q = q;
        self
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn method(&self) -> &Method {
        &self.method
    }

    pub fn trim_q(&self) -> Option<f64> {
        self.trim_q
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn into_weights(self) -> Vec<f64> {
        self.weights
    }
}

/// Evaluates `w_i = Π numerator / Π denominator` at each unit's observed
/// exposures and covariates.
pub fn evaluate_weights(fit: &PropensityFit, data: &Dataset) -> Result<WeightSet> {
    let m = data.n_exposures();
    if fit.order.len() != m || fit.denominator.len() != m || fit.numerator.len() != m {
        return Err(Error::Shape(format!(
            "fit has {} exposures, dataset has {m}",
            fit.order.len()
        )));
    }
    let expanded;
    let data = if fit.design_transforms.is_empty() {
        data
    } else {
        expanded = data.with_polynomials(&fit.design_transforms)?;
        &expanded
    };
    if let Some(k) = fit.max_covariate_index() {
        if k >= data.n_covariates() {
            return Err(Error::IndexOutOfRange {
                what: "covariate",
                index: k,
                len: data.n_covariates(),
            });
        }
    }
    let mut weights = Vec::with_capacity(data.n());
    for i in 0..data.n() {
        let d = data.exposure_row(i);
        let c = data.covariate_row(i);
        weights.push(fit.log_weight(&d, &c)?.exp());
    }
    WeightSet::new(weights, Method::Mvgps)
}

/// Winsorizes weights to `[Q(w, 1 − q), Q(w, q)]`. Weights are not
/// renormalized afterwards.
pub fn trim_weights(ws: &WeightSet, q: f64) -> Result<WeightSet> {
    if !(q > 0.5 && q <= 1.0) {
        return Err(Error::InvalidTrim(q));
    }
    let mut out = ws.clone();
    out.trim_q = Some(q);
    if q == 1.0 {
        return Ok(out);
    }
    let mut sorted = ws.weights.clone();
    sorted.sort_by(f64::total_cmp);
    let lo = stats::quantile_sorted(&sorted, 1.0 - q)?;
    let hi = stats::quantile_sorted(&sorted, q)?;
    for w in &mut out.weights {
        *w = w.clamp(lo, hi);
    }
    Ok(out)
}

/// Univariate normal GPS weights for exposure `j`, using only its own
/// confounder set.
pub fn fit_univariate_gps(data: &Dataset, j: usize) -> Result<WeightSet> {
    fit_univariate_gps_with(data, j, &MvgpsOptions::default())
}

/// [`fit_univariate_gps`] with polynomial terms and intercept control taken
/// from `options`; terms for other exposures are ignored.
pub fn fit_univariate_gps_with(data: &Dataset, j: usize, options: &MvgpsOptions) -> Result<WeightSet> {
    let sub = data.single_exposure(j)?;
    let sub_options = MvgpsOptions {
        order: None,
        poly_terms: options
            .poly_terms
            .iter()
            .filter(|t| t.exposure == j)
            .map(|t| PolyTerm { exposure: 0, ..*t })
            .collect(),
        intercept: options.intercept,
    };
    let fit = fit_mvgps(&sub, &sub_options)?;
    let ws = evaluate_weights(&fit, &sub)?;
    WeightSet::new(ws.into_weights(), Method::GpsUni(j))
}
