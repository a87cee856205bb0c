//! Weighted moments, quantiles, Gaussian densities, multivariate normal
//! sampling and weighted least squares.
//!
//! Every other module builds on these routines. They are pure functions over
//! borrowed inputs; random sampling takes an explicit generator.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Relative tolerance used when deciding that a design column carries no new
/// information, and when admitting singular covariance matrices.
pub const RANK_TOL: f64 = 1e-10;

/// A value vector paired with nonnegative weights.
#[derive(Debug, Clone, Copy)]
pub struct WeightedSample<'a> {
    values: &'a [f64],
    weights: &'a [f64],
    total: f64,
}

impl<'a> WeightedSample<'a> {
    pub fn new(values: &'a [f64], weights: &'a [f64]) -> Result<Self> {
        if values.len() != weights.len() {
            return Err(Error::Shape(format!(
                "{} values but {} weights",
                values.len(),
                weights.len()
            )));
        }
        let total = weight_total(weights)?;
        Ok(Self {
            values,
            weights,
            total,
        })
    }

    pub fn values(&self) -> &'a [f64] {
        self.values
    }

    pub fn weights(&self) -> &'a [f64] {
        self.weights
    }

    pub fn total_weight(&self) -> f64 {
        self.total
    }

    pub fn mean(&self) -> f64 {
        dot(self.values, self.weights) / self.total
    }
}

/// Checks that weights are finite and nonnegative with a positive sum, and
/// returns the sum.
pub fn weight_total(weights: &[f64]) -> Result<f64> {
    if weights.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut total = 0.0;
    for (i, &w) in weights.iter().enumerate() {
        if !w.is_finite() || w < 0.0 {
            return Err(Error::InvalidWeights(format!(
                "weight {i} is {w}; weights must be finite and nonnegative"
            )));
        }
        total += w;
    }
    if total <= 0.0 {
        return Err(Error::DegenerateWeights);
    }
    Ok(total)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn weighted_mean(values: &[f64], weights: &[f64]) -> Result<f64> {
    Ok(WeightedSample::new(values, weights)?.mean())
}

/// Weighted Pearson correlation with all moments normalized by the weight total.
pub fn weighted_pearson(x: &[f64], y: &[f64], weights: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!(
            "x has {} entries, y has {}",
            x.len(),
            y.len()
        )));
    }
    let sx = WeightedSample::new(x, weights)?;
    let total = sx.total_weight();
    let mx = sx.mean();
    let my = dot(y, weights) / total;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for ((&xi, &yi), &wi) in x.iter().zip(y).zip(weights) {
        let dx = xi - mx;
        let dy = yi - my;
        sxy += wi * dx * dy;
        sxx += wi * dx * dx;
        syy += wi * dy * dy;
    }
    let (vx, vy) = (sxx / total, syy / total);
    if vx <= f64::EPSILON * f64::EPSILON * (1.0 + mx * mx)
        || vy <= f64::EPSILON * f64::EPSILON * (1.0 + my * my)
    {
        return Err(Error::UndefinedCorrelation);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Kish effective sample size, `(Σw)² / Σw²`.
pub fn effective_sample_size(weights: &[f64]) -> Result<f64> {
    let total = weight_total(weights)?;
    let sq: f64 = weights.iter().map(|w| w * w).sum();
    Ok(total * total / sq)
}

/// Sample quantile using linear interpolation between order statistics at
/// position `(n - 1) p` (zero-based), the "type 7" rule.
pub fn sample_quantile(x: &[f64], p: f64) -> Result<f64> {
    if x.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut sorted = x.to_vec();
    sorted.sort_by(f64::total_cmp);
    quantile_sorted(&sorted, p)
}

/// [`sample_quantile`] on data that is already sorted ascending.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> Result<f64> {
    if sorted.is_empty() {
        return Err(Error::EmptyInput);
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidProbability(p));
    }
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = h - lo as f64;
    Ok(sorted[lo] + frac * (sorted[hi] - sorted[lo]))
}

pub fn normal_pdf(x: f64, mean: f64, sd: f64) -> Result<f64> {
    Ok(normal_log_pdf(x, mean, sd)?.exp())
}

pub fn normal_log_pdf(x: f64, mean: f64, sd: f64) -> Result<f64> {
    if !(sd > 0.0) || !sd.is_finite() {
        return Err(Error::InvalidScale(sd));
    }
    let z = (x - mean) / sd;
    Ok(-0.5 * z * z - sd.ln() - LN_SQRT_2PI)
}

/// A design matrix with one name per column.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    names: Vec<String>,
    matrix: DMatrix<f64>,
}

impl DesignMatrix {
    pub fn new(names: Vec<String>, matrix: DMatrix<f64>) -> Result<Self> {
        if names.len() != matrix.ncols() {
            return Err(Error::Shape(format!(
                "{} column names for {} columns",
                names.len(),
                matrix.ncols()
            )));
        }
        Ok(Self { names, matrix })
    }

    /// Builds a design from rows produced by `row`, one per observation.
    pub fn from_rows<F>(names: Vec<String>, n: usize, mut row: F) -> Result<Self>
    where
        F: FnMut(usize, &mut [f64]),
    {
        let p = names.len();
        let mut matrix = DMatrix::zeros(n, p);
        let mut buf = vec![0.0; p];
        for i in 0..n {
            row(i, &mut buf);
            for (j, v) in buf.iter().enumerate() {
                matrix[(i, j)] = *v;
            }
        }
        Ok(Self { names, matrix })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn nrows(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.matrix.ncols()
    }
}

/// Result of a (weighted) Gaussian least-squares fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub terms: Vec<String>,
    pub coefficients: Vec<f64>,
    /// Maximum-likelihood residual scale, `sqrt(Σ w r² / Σ w)`.
    pub residual_sd: f64,
    /// Set when the residuals vanish; `residual_sd` is then exactly zero.
    pub exact: bool,
    pub n_obs: usize,
    pub design_rank: usize,
}

impl LinearFit {
    /// A fit with known parameters rather than estimated ones.
    pub fn from_parameters(terms: Vec<String>, coefficients: Vec<f64>, residual_sd: f64) -> Self {
        let rank = coefficients.len();
        Self {
            terms,
            coefficients,
            residual_sd,
            exact: residual_sd == 0.0,
            n_obs: 0,
            design_rank: rank,
        }
    }

    pub fn predict(&self, row: &[f64]) -> f64 {
        dot(&self.coefficients, row)
    }

    pub fn coefficient(&self, term: &str) -> Option<f64> {
        self.terms
            .iter()
            .position(|t| t == term)
            .map(|i| self.coefficients[i])
    }
}

/// Minimizes `Σ wᵢ (yᵢ − xᵢᵀb)²` by a QR factorization of the row-scaled
/// design. A column whose component orthogonal to the preceding columns is
/// below [`RANK_TOL`] of its norm is reported as the cause of singularity.
pub fn fit_least_squares(
    design: &DesignMatrix,
    response: &[f64],
    weights: &[f64],
) -> Result<LinearFit> {
    let (n, p) = (design.nrows(), design.ncols());
    if response.len() != n || weights.len() != n {
        return Err(Error::Shape(format!(
            "design has {n} rows, response {} and weights {}",
            response.len(),
            weights.len()
        )));
    }
    if p == 0 {
        return Err(Error::Shape("design has no columns".into()));
    }
    let total = weight_total(weights)?;
    let roots: Vec<f64> = weights.iter().map(|w| w.sqrt()).collect();

    let mut scaled = design.matrix().clone();
    for (i, r) in roots.iter().enumerate() {
        scaled.row_mut(i).scale_mut(*r);
    }
    let column_norms: Vec<f64> = (0..p).map(|j| scaled.column(j).norm()).collect();
    let positive_rows = weights.iter().filter(|w| **w > 0.0).count();
    if positive_rows < p {
        return Err(Error::SingularDesign {
            column: design.names()[positive_rows.min(p - 1)].clone(),
        });
    }

    let y = DVector::from_iterator(n, response.iter().zip(&roots).map(|(y, r)| y * r));
    let qr = scaled.qr();
    let r = qr.r();
    for j in 0..p {
        if column_norms[j] == 0.0 || r[(j, j)].abs() <= RANK_TOL * column_norms[j] {
            return Err(Error::SingularDesign {
                column: design.names()[j].clone(),
            });
        }
    }
    let qty = qr.q().transpose() * &y;
    let beta = r
        .solve_upper_triangular(&qty)
        .ok_or_else(|| Error::SingularDesign {
            column: design.names()[p - 1].clone(),
        })?;

    let fitted = design.matrix() * &beta;
    let mut rss = 0.0;
    let mut scale = 0.0;
    for i in 0..n {
        let r = response[i] - fitted[i];
        rss += weights[i] * r * r;
        scale += weights[i] * response[i] * response[i];
    }
    let mut residual_sd = (rss / total).sqrt();
    let exact = residual_sd <= 1e-12 * (scale / total).sqrt().max(f64::MIN_POSITIVE);
    if exact {
        residual_sd = 0.0;
    }
    Ok(LinearFit {
        terms: design.names().to_vec(),
        coefficients: beta.iter().copied().collect(),
        residual_sd,
        exact,
        n_obs: n,
        design_rank: p,
    })
}

/// Lower-triangular factor `L` with `L Lᵀ = cov` for a symmetric positive
/// semidefinite matrix. Pivots below `RANK_TOL × max diagonal` are treated as
/// zero, which admits exactly singular covariances.
pub fn psd_cholesky(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let k = cov.nrows();
    if cov.ncols() != k {
        return Err(Error::Shape(format!(
            "covariance is {}x{}, expected square",
            k,
            cov.ncols()
        )));
    }
    if cov.iter().any(|v| !v.is_finite()) {
        return Err(Error::CovarianceNotPsd);
    }
    let max_diag = (0..k).map(|i| cov[(i, i)]).fold(0.0, f64::max);
    let tol = RANK_TOL * max_diag;
    for i in 0..k {
        for j in 0..i {
            if (cov[(i, j)] - cov[(j, i)]).abs() > RANK_TOL * max_diag.max(1.0) {
                return Err(Error::CovarianceNotPsd);
            }
        }
    }

    let mut l = DMatrix::<f64>::zeros(k, k);
    for j in 0..k {
        let pivot = cov[(j, j)] - (0..j).map(|s| l[(j, s)] * l[(j, s)]).sum::<f64>();
        if pivot < -tol {
            return Err(Error::CovarianceNotPsd);
        }
        if pivot <= tol {
            // A zero pivot forces the rest of its column to vanish.
            for i in (j + 1)..k {
                let r = cov[(i, j)] - (0..j).map(|s| l[(i, s)] * l[(j, s)]).sum::<f64>();
                let schur_ii = cov[(i, i)] - (0..j).map(|s| l[(i, s)] * l[(i, s)]).sum::<f64>();
                let bound = ((pivot.max(0.0) + tol) * (schur_ii.max(0.0) + tol)).sqrt();
                if r.abs() > bound * (1.0 + 1e-8) + f64::MIN_POSITIVE {
                    return Err(Error::CovarianceNotPsd);
                }
            }
            continue;
        }
        let diag = pivot.sqrt();
        l[(j, j)] = diag;
        for i in (j + 1)..k {
            let r = cov[(i, j)] - (0..j).map(|s| l[(i, s)] * l[(j, s)]).sum::<f64>();
            l[(i, j)] = r / diag;
        }
    }
    Ok(l)
}

/// Draws `n` rows from `N(mean, cov)`. Rows are generated in order, each from
/// `k` consecutive standard normals, so the output depends only on the
/// generator state.
pub fn sample_mvn<R: Rng + ?Sized>(
    mean: &[f64],
    cov: &DMatrix<f64>,
    n: usize,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    let k = mean.len();
    if cov.nrows() != k {
        return Err(Error::Shape(format!(
            "mean has {k} entries, covariance is {}x{}",
            cov.nrows(),
            cov.ncols()
        )));
    }
    let l = psd_cholesky(cov)?;
    let mut out = DMatrix::zeros(n, k);
    let mut z = vec![0.0; k];
    for i in 0..n {
        for zj in z.iter_mut() {
            *zj = rng.sample(StandardNormal);
        }
        for a in 0..k {
            let mut v = mean[a];
            for b in 0..=a {
                v += l[(a, b)] * z[b];
            }
            out[(i, a)] = v;
        }
    }
    Ok(out)
}

/// Contiguous view of column `j` of a column-major matrix.
pub fn column(m: &DMatrix<f64>, j: usize) -> &[f64] {
    let n = m.nrows();
    &m.as_slice()[j * n..(j + 1) * n]
}
