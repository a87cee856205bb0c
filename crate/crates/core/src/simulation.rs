//! Data-generating scenarios for the bivariate exposure simulation:
//! `X ~ N(0, Σ_X)`, `D | X ~ N(βX, Σ_{D|X})`, `Y | D, X ~ N(α_Xᵀ X + α_Dᵀ D, σ_Y²)`.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gps::{ConditionalModel, Dataset, PropensityFit, INTERCEPT};
use crate::stats::{psd_cholesky, sample_mvn, LinearFit};

const N_COVARIATES: usize = 10;

/// The three built-in confounding structures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Scenario {
    /// No common confounding.
    M1,
    /// Partially common confounding.
    M2,
    /// Common confounding.
    M3,
}

impl Scenario {
    pub const ALL: [Scenario; 3] = [Scenario::M1, Scenario::M2, Scenario::M3];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Exposure coefficient rows `β₁`, `β₂` and covariate outcome effects.
    fn coefficients(self) -> ([[f64; N_COVARIATES]; 2], [f64; N_COVARIATES]) {
        match self {
            Scenario::M1 => (
                [
                    [1.0, 0.5, 0.25, 0.1, 0.75, 0.0, 0.0, 0.0, 0.0, 0.0],
                    [0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.5, 0.25, 0.1, 0.75],
                ],
                [0.0, 0.5, 0.0, 1.0, 0.0, 0.2, 0.0, 0.0, 1.0, 0.0],
            ),
            Scenario::M2 => (
                [
                    [0.0, 0.0, 1.0, 0.5, 0.25, 0.1, 0.75, 0.0, 0.0, 0.0],
                    [0.0, 0.0, 0.0, 0.0, 1.0, 0.5, 0.25, 0.1, 0.75, 0.0],
                ],
                [0.0, 0.0, 0.5, 0.0, 0.0, 1.0, 0.2, 0.0, 1.0, 0.0],
            ),
            Scenario::M3 => (
                [
                    [1.0, 0.5, 0.25, 0.1, 0.75, 0.0, 0.0, 0.0, 0.0, 0.0],
                    [0.8, 0.8, 0.05, 0.4, 0.55, 0.0, 0.0, 0.0, 0.0, 0.0],
                ],
                [0.5, 0.0, 1.0, 0.2, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            ),
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scenario::M1 => "M1",
            Scenario::M2 => "M2",
            Scenario::M3 => "M3",
        })
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "M1" => Ok(Scenario::M1),
            "M2" => Ok(Scenario::M2),
            "M3" => Ok(Scenario::M3),
            _ => Err(Error::UnknownScenario(s.to_string())),
        }
    }
}

impl From<Scenario> for String {
    fn from(s: Scenario) -> Self {
        s.to_string()
    }
}

impl TryFrom<String> for Scenario {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// Full parameterization of a simulated population. Matrices are stored
/// row-major; covariate indices are zero-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub name: String,
    /// `m × P` exposure coefficients.
    pub beta: Vec<Vec<f64>>,
    pub alpha_x: Vec<f64>,
    pub alpha_d: Vec<f64>,
    /// `P × P` covariate covariance.
    pub sigma_x: Vec<Vec<f64>>,
    pub cond_sd: Vec<f64>,
    /// Common correlation of every pair of exposures given the covariates.
    pub cond_rho: f64,
    pub sigma_y: f64,
    pub n: usize,
    pub confounder_sets: Vec<Vec<usize>>,
}

fn to_matrix(rows: &[Vec<f64>], ncols: usize, what: &str) -> Result<DMatrix<f64>> {
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::InvalidConfig(format!("{what} rows must have {ncols} entries")));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

impl ScenarioConfig {
    pub fn n_exposures(&self) -> usize {
        self.beta.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.alpha_x.len()
    }

    pub fn beta_matrix(&self) -> Result<DMatrix<f64>> {
        to_matrix(&self.beta, self.n_covariates(), "beta")
    }

    pub fn sigma_x_matrix(&self) -> Result<DMatrix<f64>> {
        let p = self.n_covariates();
        if self.sigma_x.len() != p {
            return Err(Error::InvalidConfig(format!("sigma_x must be {p} × {p}")));
        }
        to_matrix(&self.sigma_x, p, "sigma_x")
    }

    /// `Σ_{D|X}` with `cond_sd` on the diagonal scale and `cond_rho` off it.
    pub fn cond_cov(&self) -> DMatrix<f64> {
        let m = self.cond_sd.len();
        DMatrix::from_fn(m, m, |a, b| {
            let r = if a == b { 1.0 } else { self.cond_rho };
            r * self.cond_sd[a] * self.cond_sd[b]
        })
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.n_exposures();
        let p = self.n_covariates();
        if m == 0 {
            return Err(Error::EmptyExposures);
        }
        if self.n == 0 {
            return Err(Error::InvalidConfig("n must be at least 1".into()));
        }
        if self.alpha_d.len() != m || self.cond_sd.len() != m || self.confounder_sets.len() != m {
            return Err(Error::InvalidConfig(format!(
                "alpha_d, cond_sd and confounder_sets need one entry per exposure ({m})"
            )));
        }
        self.beta_matrix()?;
        if !(self.cond_rho > -1.0 && self.cond_rho < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "cond_rho {} must lie in (-1, 1)",
                self.cond_rho
            )));
        }
        if self.cond_sd.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidConfig("cond_sd entries must be positive".into()));
        }
        if !(self.sigma_y >= 0.0 && self.sigma_y.is_finite()) {
            return Err(Error::InvalidConfig("sigma_y must be non-negative".into()));
        }
        if self.cond_cov().cholesky().is_none() {
            return Err(Error::InvalidConfig(
                "conditional exposure covariance is not positive definite".into(),
            ));
        }
        psd_cholesky(&self.sigma_x_matrix()?)?;
        for set in &self.confounder_sets {
            if let Some(&k) = set.iter().find(|&&k| k >= p) {
                return Err(Error::IndexOutOfRange {
                    what: "confounder column",
                    index: k,
                    len: p,
                });
            }
        }
        Ok(())
    }
}

/// Columns with nonzero exposure coefficient and nonzero outcome effect.
pub fn derived_confounder_sets(beta: &[Vec<f64>], alpha_x: &[f64]) -> Vec<Vec<usize>> {
    beta.iter()
        .map(|row| {
            (0..alpha_x.len())
                .filter(|&k| row[k] != 0.0 && alpha_x[k] != 0.0)
                .collect()
        })
        .collect()
}

/// Built-in scenario with `Σ_X = 0.8 I + 0.2 J`, conditional exposure SDs of
/// 2, outcome SD 4 and unit treatment effects.
pub fn builtin_scenario(scenario: Scenario, cond_rho: f64, n: usize) -> Result<ScenarioConfig> {
    let (beta, alpha_x) = scenario.coefficients();
    let beta: Vec<Vec<f64>> = beta.iter().map(|r| r.to_vec()).collect();
    let sigma_x = (0..N_COVARIATES)
        .map(|a| (0..N_COVARIATES).map(|b| if a == b { 1.0 } else { 0.2 }).collect())
        .collect();
    let cfg = ScenarioConfig {
        name: scenario.to_string(),
        confounder_sets: derived_confounder_sets(&beta, &alpha_x),
        beta,
        alpha_x: alpha_x.to_vec(),
        alpha_d: vec![1.0, 1.0],
        sigma_x,
        cond_sd: vec![2.0, 2.0],
        cond_rho,
        sigma_y: 4.0,
        n,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// `Σ_D = Σ_{D|X} + β Σ_X βᵀ` and the correlation of the first two exposures
/// it implies.
pub fn implied_marginal_cov(cfg: &ScenarioConfig) -> Result<(DMatrix<f64>, f64)> {
    cfg.validate()?;
    if cfg.n_exposures() < 2 {
        return Err(Error::InvalidConfig(
            "marginal correlation needs at least two exposures".into(),
        ));
    }
    let beta = cfg.beta_matrix()?;
    let cov = cfg.cond_cov() + &beta * cfg.sigma_x_matrix()? * beta.transpose();
    let cov = (&cov + cov.transpose()) * 0.5;
    let rho = cov[(0, 1)] / (cov[(0, 0)] * cov[(1, 1)]).sqrt();
    Ok((cov, rho))
}

/// Draws one dataset. Covariates, then conditional exposure noise, then
/// outcome noise are drawn in that order from `rng`.
pub fn generate<R: Rng + ?Sized>(cfg: &ScenarioConfig, rng: &mut R) -> Result<Dataset> {
    cfg.validate()?;
    let n = cfg.n;
    let p = cfg.n_covariates();
    let m = cfg.n_exposures();
    let x = sample_mvn(&vec![0.0; p], &cfg.sigma_x_matrix()?, n, rng)?;
    let e = sample_mvn(&vec![0.0; m], &cfg.cond_cov(), n, rng)?;
    let d = &x * cfg.beta_matrix()?.transpose() + e;
    let mean_y = &x * DVector::from_column_slice(&cfg.alpha_x) + &d * DVector::from_column_slice(&cfg.alpha_d);
    let y: Vec<f64> = mean_y
        .iter()
        .map(|mu| {
            let z: f64 = rng.sample(StandardNormal);
            mu + cfg.sigma_y * z
        })
        .collect();
    Dataset::new(y, d, x, cfg.confounder_sets.clone())
}

/// Exact Gaussian conditional of `target` given `given`, from a joint
/// covariance: regression coefficients and residual SD.
fn gaussian_conditional(joint: &DMatrix<f64>, target: usize, given: &[usize]) -> Result<(Vec<f64>, f64)> {
    let var = joint[(target, target)];
    if given.is_empty() {
        return Ok((Vec::new(), var.sqrt()));
    }
    let k = given.len();
    let s_gg = DMatrix::from_fn(k, k, |a, b| joint[(given[a], given[b])]);
    let s_gt = DVector::from_fn(k, |a, _| joint[(given[a], target)]);
    let chol = s_gg.cholesky().ok_or(Error::CovarianceNotPsd)?;
    let coef = chol.solve(&s_gt);
    let resid = var - s_gt.dot(&coef);
    if !(resid > 0.0) {
        return Err(Error::CovarianceNotPsd);
    }
    Ok((coef.iter().copied().collect(), resid.sqrt()))
}

/// Numerator and denominator chains built from the population parameters
/// rather than estimated. Each denominator link conditions on the union of
/// all confounder sets and on the preceding exposures, so the product is the
/// exact conditional density `f(D | C₁ ∪ … ∪ C_m)`.
pub fn true_propensity_fit(cfg: &ScenarioConfig, order: Option<&[usize]>) -> Result<PropensityFit> {
    cfg.validate()?;
    let m = cfg.n_exposures();
    let p = cfg.n_covariates();
    let order: Vec<usize> = order.map(<[usize]>::to_vec).unwrap_or_else(|| (0..m).collect());
    let mut sorted = order.clone();
    sorted.sort_unstable();
    if sorted != (0..m).collect::<Vec<_>>() {
        return Err(Error::InvalidConfig(format!(
            "order {order:?} is not a permutation of 0..{m}"
        )));
    }

    // joint covariance of (X, D)
    let sx = cfg.sigma_x_matrix()?;
    let beta = cfg.beta_matrix()?;
    let cov_dx = &beta * &sx;
    let sd = cfg.cond_cov() + &cov_dx * beta.transpose();
    let mut joint = DMatrix::zeros(p + m, p + m);
    joint.view_mut((0, 0), (p, p)).copy_from(&sx);
    joint.view_mut((p, 0), (m, p)).copy_from(&cov_dx);
    joint.view_mut((0, p), (p, m)).copy_from(&cov_dx.transpose());
    joint.view_mut((p, p), (m, m)).copy_from(&sd);

    let mut union: Vec<usize> = cfg.confounder_sets.iter().flatten().copied().collect();
    union.sort_unstable();
    union.dedup();
    let exposure_name = |j: usize| format!("D{}", j + 1);
    let covariate_name = |k: usize| format!("X{}", k + 1);

    let link = |j: usize, covariates: &[usize], prior: &[usize]| -> Result<ConditionalModel> {
        let given: Vec<usize> = covariates
            .iter()
            .copied()
            .chain(prior.iter().map(|&q| p + q))
            .collect();
        let (coef, sd) = gaussian_conditional(&joint, p + j, &given)?;
        let mut terms = vec![INTERCEPT.to_string()];
        terms.extend(covariates.iter().map(|&k| covariate_name(k)));
        terms.extend(prior.iter().map(|&q| exposure_name(q)));
        let mut coefficients = vec![0.0];
        coefficients.extend(coef);
        Ok(ConditionalModel {
            exposure: j,
            covariates: covariates.to_vec(),
            prior_exposures: prior.to_vec(),
            intercept: true,
            fit: LinearFit::from_parameters(terms, coefficients, sd),
        })
    };

    let mut denominator = Vec::with_capacity(m);
    let mut numerator = Vec::with_capacity(m);
    for (pos, &j) in order.iter().enumerate() {
        let prior = &order[..pos];
        denominator.push(link(j, &union, prior)?);
        numerator.push(link(j, &[], prior)?);
    }
    Ok(PropensityFit {
        order,
        denominator,
        numerator,
        design_transforms: Vec::new(),
    })
}
