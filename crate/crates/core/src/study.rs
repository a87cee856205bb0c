//! Monte Carlo study driver: scenarios × conditional correlations × methods
//! × trim levels, repeated and averaged.
//!
//! Repetition `r` of scenario `s` at grid point `k` draws from a ChaCha8
//! stream selected by `(s, k, r)` under the master seed, so results do not
//! depend on scheduling or on the number of worker threads.

use std::fmt;
use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::balance::{balance_report, BalanceScope};
use crate::dose_response::{fit_dose_response, rmse_on_region, total_abs_bias, Formula};
use crate::entropy::{entropy_balance, EntropyOptions};
use crate::error::{Error, Result};
use crate::format_float;
use crate::geometry::trimmed_hull;
use crate::gps::{evaluate_weights, fit_mvgps, fit_univariate_gps, trim_weights, Dataset, Method, MvgpsOptions, WeightSet};
use crate::simulation::{builtin_scenario, generate, implied_marginal_cov, Scenario};

/// Share of failed repetitions above which a cell is flagged.
pub const FAILURE_FLAG_RATE: f64 = 0.10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    pub scenarios: Vec<Scenario>,
    pub rho_grid: Vec<f64>,
    pub methods: Vec<Method>,
    pub trim_levels: Vec<f64>,
    pub reps: usize,
    pub master_seed: u64,
    #[serde(default = "default_grid_points")]
    pub grid_points: usize,
    #[serde(default = "default_n")]
    pub n: usize,
}

fn default_grid_points() -> usize {
    500
}

fn default_n() -> usize {
    200
}

impl StudyConfig {
    /// Every method arm of the bivariate study.
    pub fn all_methods() -> Vec<Method> {
        vec![
            Method::Mvgps,
            Method::GpsUni(0),
            Method::GpsUni(1),
            Method::Entropy(0),
            Method::Entropy(1),
            Method::Unweighted,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.scenarios.is_empty()
            || self.rho_grid.is_empty()
            || self.methods.is_empty()
            || self.trim_levels.is_empty()
        {
            return Err(Error::InvalidConfig(
                "scenarios, rho_grid, methods and trim_levels must be non-empty".into(),
            ));
        }
        if self.reps == 0 {
            return Err(Error::InvalidConfig("reps must be at least 1".into()));
        }
        if self.grid_points == 0 {
            return Err(Error::InvalidConfig("grid_points must be at least 1".into()));
        }
        if self.scenarios.len() > u16::MAX as usize
            || self.rho_grid.len() > u16::MAX as usize
            || self.reps > u32::MAX as usize
        {
            return Err(Error::InvalidConfig("study grid too large for stream derivation".into()));
        }
        for &q in &self.trim_levels {
            if !(q > 0.5 && q <= 1.0) {
                return Err(Error::InvalidTrim(q));
            }
        }
        for m in &self.methods {
            match m {
                Method::Custom(s) => {
                    return Err(Error::InvalidConfig(format!("method `{s}` cannot be simulated")))
                }
                Method::GpsUni(j) | Method::Entropy(j) if *j >= 2 => {
                    return Err(Error::IndexOutOfRange {
                        what: "exposure",
                        index: *j,
                        len: 2,
                    })
                }
                _ => {}
            }
        }
        for s in &self.scenarios {
            for &rho in &self.rho_grid {
                builtin_scenario(*s, rho, self.n)?;
            }
        }
        Ok(())
    }

    /// RNG for one repetition.
    pub fn stream(&self, scenario: usize, rho: usize, rep: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.master_seed);
        rng.set_stream(((scenario as u64) << 48) | ((rho as u64) << 32) | rep as u64);
        rng
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    MaxAbsCorr,
    AvgAbsCorr,
    Ess,
    TotalAbsBias,
    Rmse,
}

impl Metric {
    pub const ALL: [Metric; 5] = [
        Metric::MaxAbsCorr,
        Metric::AvgAbsCorr,
        Metric::Ess,
        Metric::TotalAbsBias,
        Metric::Rmse,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::MaxAbsCorr => "max_abs_corr",
            Metric::AvgAbsCorr => "avg_abs_corr",
            Metric::Ess => "ess",
            Metric::TotalAbsBias => "total_abs_bias",
            Metric::Rmse => "rmse",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Metric values of one method at one trim level in one repetition, in
/// [`Metric::ALL`] order.
pub type MetricValues = [f64; 5];

/// Outcome of a single repetition: one entry per (method, trim level), in
/// configuration order.
#[derive(Debug, Clone, PartialEq)]
pub struct RepetitionOutcome {
    pub cells: Vec<Result<MetricValues>>,
}

fn method_weights(data: &Dataset, method: &Method) -> Result<WeightSet> {
    match method {
        Method::Mvgps => evaluate_weights(&fit_mvgps(data, &MvgpsOptions::default())?, data),
        Method::GpsUni(j) => fit_univariate_gps(data, *j),
        Method::Entropy(j) => entropy_balance(data, *j, &EntropyOptions::default()),
        Method::Unweighted => Ok(WeightSet::unweighted(data.n())),
        Method::Custom(s) => Err(Error::InvalidConfig(format!("method `{s}` cannot be simulated"))),
    }
}

fn cell_metrics(
    data: &Dataset,
    ws: &WeightSet,
    region: &Result<crate::geometry::Region>,
    alpha_d: &[f64],
    grid_points: usize,
) -> Result<MetricValues> {
    let report = balance_report(data, ws, BalanceScope::Confounders)?;
    let region = region.as_ref().map_err(Clone::clone)?;
    let fit = fit_dose_response(data, ws, Formula::linear(), region)?;
    Ok([
        report.max_abs_corr,
        report.avg_abs_corr,
        report.ess,
        total_abs_bias(&fit, alpha_d)?,
        rmse_on_region(&fit, alpha_d, region, grid_points)?,
    ])
}

/// Runs every method and trim level on one simulated dataset. Balance and
/// ESS use the full sample; the outcome model uses units inside `H_q`, with
/// `q` equal to the weight trim level.
pub fn run_repetition(cfg: &StudyConfig, scenario: usize, rho: usize, rep: usize) -> RepetitionOutcome {
    let n_cells = cfg.methods.len() * cfg.trim_levels.len();
    let fail_all = |e: Error| RepetitionOutcome {
        cells: vec![Err(e); n_cells],
    };
    let scenario_cfg = match builtin_scenario(cfg.scenarios[scenario], cfg.rho_grid[rho], cfg.n) {
        Ok(c) => c,
        Err(e) => return fail_all(e),
    };
    let mut rng = cfg.stream(scenario, rho, rep);
    let data = match generate(&scenario_cfg, &mut rng) {
        Ok(d) => d,
        Err(e) => return fail_all(e),
    };
    let regions: Vec<Result<crate::geometry::Region>> = cfg
        .trim_levels
        .iter()
        .map(|&q| trimmed_hull(data.exposures(), q))
        .collect();
    let mut cells = Vec::with_capacity(n_cells);
    for method in &cfg.methods {
        let base = method_weights(&data, method);
        for (t, &q) in cfg.trim_levels.iter().enumerate() {
            let cell = base
                .as_ref()
                .map_err(Clone::clone)
                .and_then(|ws| trim_weights(ws, q))
                .and_then(|ws| cell_metrics(&data, &ws, &regions[t], &scenario_cfg.alpha_d, cfg.grid_points));
            cells.push(cell);
        }
    }
    RepetitionOutcome { cells }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub scenario: Scenario,
    pub cond_rho: f64,
    pub marginal_rho: f64,
    pub method: Method,
    pub trim_q: f64,
    pub metric: Metric,
    /// Mean over successful repetitions; `None` when every repetition failed.
    pub value: Option<f64>,
    pub reps: usize,
    pub failures: usize,
}

impl StudyRow {
    pub fn flagged(&self) -> bool {
        let total = self.reps + self.failures;
        total > 0 && self.failures as f64 > FAILURE_FLAG_RATE * total as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyResult {
    pub rows: Vec<StudyRow>,
}

/// Runs the study on a pool of `jobs` worker threads (`0` uses the rayon
/// default).
pub fn run_study(cfg: &StudyConfig, jobs: usize) -> Result<StudyResult> {
    cfg.validate()?;
    let tasks: Vec<(usize, usize, usize)> = (0..cfg.scenarios.len())
        .flat_map(|s| (0..cfg.rho_grid.len()).flat_map(move |k| (0..cfg.reps).map(move |r| (s, k, r))))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    let outcomes: Vec<RepetitionOutcome> = pool.install(|| {
        tasks
            .par_iter()
            .map(|&(s, k, r)| run_repetition(cfg, s, k, r))
            .collect()
    });

    let mut rows = Vec::new();
    let per_cell = cfg.reps;
    for (s, &scenario) in cfg.scenarios.iter().enumerate() {
        for (k, &rho) in cfg.rho_grid.iter().enumerate() {
            let (_, marginal_rho) = implied_marginal_cov(&builtin_scenario(scenario, rho, cfg.n)?)?;
            let start = (s * cfg.rho_grid.len() + k) * per_cell;
            let block = &outcomes[start..start + per_cell];
            for (mi, method) in cfg.methods.iter().enumerate() {
                for (t, &q) in cfg.trim_levels.iter().enumerate() {
                    let c = mi * cfg.trim_levels.len() + t;
                    let mut sums = [0.0; 5];
                    let mut ok = 0;
                    for outcome in block {
                        if let Ok(values) = &outcome.cells[c] {
                            for (acc, v) in sums.iter_mut().zip(values) {
                                *acc += v;
                            }
                            ok += 1;
                        }
                    }
                    for (metric, sum) in Metric::ALL.iter().zip(sums) {
                        rows.push(StudyRow {
                            scenario,
                            cond_rho: rho,
                            marginal_rho,
                            method: method.clone(),
                            trim_q: q,
                            metric: *metric,
                            value: (ok > 0).then(|| sum / ok as f64),
                            reps: ok,
                            failures: per_cell - ok,
                        });
                    }
                }
            }
        }
    }
    Ok(StudyResult { rows })
}

impl StudyResult {
    pub fn flagged(&self) -> impl Iterator<Item = &StudyRow> {
        self.rows.iter().filter(|r| r.flagged())
    }

    /// Mean value of one metric for one cell.
    pub fn value(&self, scenario: Scenario, cond_rho: f64, method: &Method, trim_q: f64, metric: Metric) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| {
                r.scenario == scenario
                    && r.cond_rho == cond_rho
                    && &r.method == method
                    && r.trim_q == trim_q
                    && r.metric == metric
            })
            .and_then(|r| r.value)
    }

    /// Long-format table, one row per cell and metric.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "scenario",
            "cond_rho",
            "marginal_rho",
            "method",
            "trim_q",
            "metric",
            "value",
            "reps",
            "failures",
        ])?;
        for r in &self.rows {
            w.write_record([
                r.scenario.to_string(),
                r.cond_rho.to_string(),
                format_float(r.marginal_rho),
                r.method.to_string(),
                r.trim_q.to_string(),
                r.metric.to_string(),
                r.value.map(format_float).unwrap_or_default(),
                r.reps.to_string(),
                r.failures.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::Csv(e.to_string()))?;
        Ok(())
    }

    /// Plot-ready table of one metric keyed by scenario, correlation,
    /// method and trim level.
    pub fn write_metric_csv<W: Write>(&self, metric: Metric, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["scenario", "cond_rho", "marginal_rho", "method", "trim_q", "value"])?;
        for r in self.rows.iter().filter(|r| r.metric == metric) {
            w.write_record([
                r.scenario.to_string(),
                r.cond_rho.to_string(),
                format_float(r.marginal_rho),
                r.method.to_string(),
                r.trim_q.to_string(),
                r.value.map(format_float).unwrap_or_default(),
            ])?;
        }
        w.flush().map_err(|e| Error::Csv(e.to_string()))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(methods: Vec<Method>, reps: usize) -> StudyConfig {
        StudyConfig {
            scenarios: vec![Scenario::M1],
            rho_grid: vec![0.0],
            methods,
            trim_levels: vec![1.0],
            reps,
            master_seed: 11,
            grid_points: 50,
            n: 200,
        }
    }

    #[test]
    fn single_repetition_equals_pipeline() {
        let cfg = small(vec![Method::Unweighted], 1);
        let result = run_study(&cfg, 1).unwrap();
        assert_eq!(result.rows.len(), 5);
        let direct = run_repetition(&cfg, 0, 0, 0).cells[0].clone().unwrap();
        for (row, v) in result.rows.iter().zip(direct) {
            assert_eq!(row.value, Some(v));
            assert_eq!(row.reps, 1);
        }
        assert_eq!(result.value(Scenario::M1, 0.0, &Method::Unweighted, 1.0, Metric::Ess), Some(200.0));
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let mut cfg = small(vec![Method::Mvgps, Method::Entropy(1)], 4);
        cfg.trim_levels = vec![1.0, 0.95];
        let a = run_study(&cfg, 1).unwrap();
        let b = run_study(&cfg, 3).unwrap();
        assert_eq!(a, b);
        let mut buf_a = Vec::new();
        let mut buf_b = Vec::new();
        a.write_csv(&mut buf_a).unwrap();
        b.write_csv(&mut buf_b).unwrap();
        assert_eq!(buf_a, buf_b);
    }

    #[test]
    fn config_validation() {
        let mut cfg = small(vec![Method::GpsUni(2)], 1);
        assert!(matches!(cfg.validate(), Err(Error::IndexOutOfRange { .. })));
        cfg.methods = vec![Method::Mvgps];
        cfg.trim_levels = vec![0.4];
        assert_eq!(cfg.validate(), Err(Error::InvalidTrim(0.4)));
        cfg.trim_levels = vec![];
        assert!(matches!(cfg.validate(), Err(Error::InvalidConfig(_))));

        let json = r#"{"scenarios":["M1"],"rho_grid":[0.0],"methods":["mvGPS","gps_uni(2)","entropy(1)","unweighted"],
            "trim_levels":[1.0],"reps":2,"master_seed":1}"#;
        let parsed: StudyConfig = serde_json::from_str(json).unwrap();
        assert_eq!(parsed.methods[1], Method::GpsUni(1));
        assert_eq!((parsed.n, parsed.grid_points), (200, 500));
    }
}
