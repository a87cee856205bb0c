//! Entropy balancing for one continuous exposure.
//!
//! Weights minimize `Σ w log w` subject to `Σ w = n` and zero weighted means
//! of the standardized confounders, the standardized exposure and their
//! products. The problem is solved through its dual, which minimizes
//! `log mean exp(λ·g_i)` over `λ`; the primal weights are `w_i = n p_i` with
//! `p ∝ exp(λ·g_i)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gps::{Dataset, Method, WeightSet};
use crate::stats::RANK_TOL;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntropyOptions {
    pub max_iter: usize,
    /// Convergence threshold on the largest constraint residual, in
    /// standardized units.
    pub tol: f64,
}

impl Default for EntropyOptions {
    fn default() -> Self {
        Self {
            max_iter: 200,
            tol: 1e-8,
        }
    }
}

/// Converged solution with solver diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct EntropySolution {
    pub weights: WeightSet,
    pub iterations: usize,
    pub max_violation: f64,
    pub dual: Vec<f64>,
}

struct Constraints {
    names: Vec<String>,
    g: DMatrix<f64>,
}

fn standardize(values: &[f64], name: &str) -> Result<Vec<f64>> {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let scale = mean.abs().max(1.0);
    if var.sqrt() <= RANK_TOL * scale {
        return Err(Error::SingularDesign {
            column: name.to_string(),
        });
    }
    let sd = var.sqrt();
    Ok(values.iter().map(|v| (v - mean) / sd).collect())
}

fn build_constraints(data: &Dataset, j: usize) -> Result<Constraints> {
    let n = data.n();
    let d_name = &data.exposure_names()[j];
    let d = standardize(data.exposure(j), d_name)?;
    let conf = data.confounders(j);
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(2 * conf.len() + 1);
    let mut names = Vec::with_capacity(2 * conf.len() + 1);
    let mut standardized = Vec::with_capacity(conf.len());
    for &k in conf {
        let c_name = &data.covariate_names()[k];
        let c = standardize(data.covariate(k), c_name)?;
        names.push(c_name.clone());
        cols.push(c.clone());
        standardized.push((c_name, c));
    }
    names.push(d_name.clone());
    cols.push(d.clone());
    for (c_name, c) in &standardized {
        names.push(format!("{d_name}:{c_name}"));
        cols.push(c.iter().zip(&d).map(|(a, b)| a * b).collect());
    }
    let g = DMatrix::from_fn(n, cols.len(), |i, k| cols[k][i]);
    check_rank(&g, &names)?;
    Ok(Constraints { names, g })
}

fn check_rank(g: &DMatrix<f64>, names: &[String]) -> Result<()> {
    let n = g.nrows();
    if n < g.ncols() + 1 {
        return Err(Error::SingularDesign {
            column: names[n.saturating_sub(1).min(names.len() - 1)].clone(),
        });
    }
    let mut centered = g.clone();
    for mut col in centered.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
    let norms: Vec<f64> = centered.column_iter().map(|c| c.norm()).collect();
    let r = centered.qr().r();
    for (k, name) in names.iter().enumerate() {
        if r[(k, k)].abs() <= RANK_TOL * norms[k].max(f64::MIN_POSITIVE) || norms[k] == 0.0 {
            return Err(Error::SingularDesign {
                column: name.clone(),
            });
        }
    }
    Ok(())
}

/// Dual objective, normalized probabilities and their moments at `lambda`.
struct DualState {
    objective: f64,
    probs: Vec<f64>,
}

fn dual_state(g: &DMatrix<f64>, lambda: &DVector<f64>) -> DualState {
    let scores = g * lambda;
    let max = scores.max();
    let mut probs: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = probs.iter().sum();
    for p in &mut probs {
        *p /= total;
    }
    let objective = max + (total / g.nrows() as f64).ln();
    DualState { objective, probs }
}

fn moments(g: &DMatrix<f64>, probs: &[f64]) -> DVector<f64> {
    let mut grad = DVector::zeros(g.ncols());
    for (i, p) in probs.iter().enumerate() {
        grad.axpy(*p, &g.row(i).transpose(), 1.0);
    }
    grad
}

fn hessian(g: &DMatrix<f64>, probs: &[f64], grad: &DVector<f64>) -> DMatrix<f64> {
    let k = g.ncols();
    let mut h = DMatrix::zeros(k, k);
    for (i, p) in probs.iter().enumerate() {
        let row = g.row(i).transpose();
        h.ger(*p, &row, &row, 1.0);
    }
    h.ger(-1.0, grad, grad, 1.0);
    h
}

fn newton_direction(h: DMatrix<f64>, grad: &DVector<f64>) -> Option<DVector<f64>> {
    let rhs = -grad;
    if let Some(chol) = h.clone().cholesky() {
        return Some(chol.solve(&rhs));
    }
    h.svd(true, true).solve(&rhs, 1e-12).ok()
}

/// Entropy balancing weights for exposure `j` against its confounder set.
pub fn entropy_balance(data: &Dataset, j: usize, options: &EntropyOptions) -> Result<WeightSet> {
    entropy_balance_detailed(data, j, options).map(|s| s.weights)
}

/// [`entropy_balance`] returning iteration count, final violation and dual
/// vector alongside the weights.
pub fn entropy_balance_detailed(
    data: &Dataset,
    j: usize,
    options: &EntropyOptions,
) -> Result<EntropySolution> {
    data.check_exposure(j)?;
    if options.max_iter == 0 || !(options.tol > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "entropy balancing needs max_iter ≥ 1 and tol > 0, got {} and {}",
            options.max_iter, options.tol
        )));
    }
    let Constraints { names, g } = build_constraints(data, j)?;
    let n = data.n();
    let floor = -(n as f64).ln();
    let mut lambda = DVector::zeros(g.ncols());
    let mut state = dual_state(&g, &lambda);
    let mut violation = f64::INFINITY;

    for iter in 0..=options.max_iter {
        let grad = moments(&g, &state.probs);
        violation = grad.amax();
        if violation < options.tol {
            let weights: Vec<f64> = state.probs.iter().map(|p| p * n as f64).collect();
            return Ok(EntropySolution {
                weights: WeightSet::new(weights, Method::Entropy(j))?,
                iterations: iter,
                max_violation: violation,
                dual: lambda.iter().copied().collect(),
            });
        }
        if state.objective < floor - 1e-9 {
            return Err(infeasible(&names, &grad));
        }
        if iter == options.max_iter {
            break;
        }
        let h = hessian(&g, &state.probs, &grad);
        let Some(step) = newton_direction(h, &grad) else {
            return Err(infeasible(&names, &grad));
        };
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let candidate = &lambda + &step * t;
            let next = dual_state(&g, &candidate);
            if next.objective.is_finite() && next.objective <= state.objective {
                accepted = Some((candidate, next));
                break;
            }
            t *= 0.5;
        }
        match accepted {
            Some((candidate, next)) => {
                lambda = candidate;
                state = next;
            }
            None => break,
        }
    }
    Err(Error::NoConvergence {
        iterations: options.max_iter,
        violation,
    })
}

fn infeasible(names: &[String], grad: &DVector<f64>) -> Error {
    let (k, _) = grad.iamax_full();
    Error::Infeasible(format!(
        "no positive weights zero the moments; worst constraint `{}`",
        names[k]
    ))
}
