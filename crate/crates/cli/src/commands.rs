use std::fs;
use std::io::BufWriter;
use std::path::Path;

use mvgps::balance::{balance_report, format_balance_table, BalanceReport};
use mvgps::dose_response::{fit_dose_response, write_surface_csv, Formula};
use mvgps::entropy::{entropy_balance, EntropyOptions};
use mvgps::geometry::{bounding_box, convex_hull, region_grid, trimmed_hull, write_vertices_csv, Region};
use mvgps::gps::{
    evaluate_weights, fit_mvgps, fit_univariate_gps_with, trim_weights, Dataset, Method, MvgpsOptions, WeightSet,
};
use mvgps::simulation::{builtin_scenario, generate, implied_marginal_cov, true_propensity_fit, ScenarioConfig};
use mvgps::study::{run_study, Metric, StudyConfig};
use mvgps::{format_float, Error};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use crate::args::{
    BalanceArgs, FormulaKind, HullArgs, RegionKind, ScenarioArgs, SimulateArgs, StudyArgs, SurfaceArgs, WeightsArgs,
};
use crate::data::{create, load_dataset, read_json, read_weights, sibling, write_json, write_weights, DatasetSpec};
use crate::manifest::{manifest_path, RunManifest};
use crate::{CliError, Result};

/// Plot-ready study tables, one per metric.
pub const FIGURE_FILES: [(Metric, &str); 5] = [
    (Metric::MaxAbsCorr, "fig4_max_abs_corr.csv"),
    (Metric::AvgAbsCorr, "fig5_avg_abs_corr.csv"),
    (Metric::TotalAbsBias, "fig6_total_abs_bias.csv"),
    (Metric::Ess, "fig7_ess.csv"),
    (Metric::Rmse, "fig8_rmse.csv"),
];

fn writer(path: &Path) -> Result<BufWriter<fs::File>> {
    Ok(BufWriter::new(create(path)?))
}

fn check_exposure(data: &Dataset, j: usize) -> Result<()> {
    if j >= data.n_exposures() {
        return Err(Error::IndexOutOfRange {
            what: "exposure",
            index: j + 1,
            len: data.n_exposures(),
        }
        .into());
    }
    Ok(())
}

pub fn estimate_weights(args: &WeightsArgs) -> Result<WeightSet> {
    let loaded = load_dataset(&args.input.data, &args.input.spec)?;
    let data = &loaded.dataset;
    let order = match &args.order {
        Some(order) => {
            if order.contains(&0) {
                return Err(CliError::Input("--order positions are 1-based".into()));
            }
            Some(order.iter().map(|j| j - 1).collect())
        }
        None => None,
    };
    if order.is_some() && args.method != Method::Mvgps {
        return Err(CliError::Input("--order applies to --method mvgps only".into()));
    }
    let options = MvgpsOptions {
        order,
        poly_terms: loaded.poly_terms.clone(),
        intercept: true,
    };
    let ws = match &args.method {
        Method::Mvgps => evaluate_weights(&fit_mvgps(data, &options)?, data)?,
        Method::GpsUni(j) => {
            check_exposure(data, *j)?;
            fit_univariate_gps_with(data, *j, &options)?
        }
        Method::Entropy(j) => {
            check_exposure(data, *j)?;
            let expanded = data.with_polynomials(&loaded.poly_terms)?;
            let opts = EntropyOptions {
                max_iter: args.max_iter,
                tol: args.tol,
            };
            entropy_balance(&expanded, *j, &opts)?
        }
        Method::Unweighted => WeightSet::unweighted(data.n()),
        Method::Custom(name) => return Err(CliError::Input(format!("unknown method `{name}`"))),
    };
    match args.trim {
        Some(q) => Ok(trim_weights(&ws, q)?),
        None => Ok(ws),
    }
}

pub fn weights(args: &WeightsArgs) -> Result<()> {
    let mut manifest = RunManifest::start(
        "weights",
        json!({
            "method": args.method.to_string(),
            "trim": args.trim,
            "order": args.order,
            "max_iter": args.max_iter,
            "tol": args.tol,
        }),
    );
    manifest.input(&args.input.data)?;
    manifest.input(&args.input.spec)?;
    let ws = estimate_weights(args)?;
    write_weights(&args.output, ws.weights())?;
    manifest.output(&args.output);
    manifest.finish(&manifest_path(&args.output))
}

pub fn balance_reports(args: &BalanceArgs) -> Result<Vec<BalanceReport>> {
    if args.weights.is_empty() && !args.unweighted {
        return Err(CliError::Input("give at least one --weights file or --unweighted".into()));
    }
    let loaded = load_dataset(&args.input.data, &args.input.spec)?;
    let data = loaded.dataset.with_polynomials(&loaded.poly_terms)?;
    let mut sets = Vec::new();
    for path in &args.weights {
        sets.push(read_weights(path, data.n())?);
    }
    if args.unweighted {
        sets.push(WeightSet::unweighted(data.n()));
    }
    sets.iter()
        .map(|ws| Ok(balance_report(&data, ws, args.scope.into())?))
        .collect()
}

fn write_pairs(path: &Path, reports: &[BalanceReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer(path)?);
    w.write_record(["method", "exposure", "covariate", "corr"])?;
    for r in reports {
        for p in &r.pairs {
            w.write_record([
                r.method.to_string(),
                p.exposure_name.clone(),
                p.covariate_name.clone(),
                p.value.map(format_float).unwrap_or_default(),
            ])?;
        }
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn balance(args: &BalanceArgs) -> Result<()> {
    let mut manifest = RunManifest::start(
        "balance",
        json!({
            "weights": args.weights.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
            "unweighted": args.unweighted,
            "scope": format!("{:?}", args.scope),
        }),
    );
    manifest.input(&args.input.data)?;
    manifest.input(&args.input.spec)?;
    for p in &args.weights {
        manifest.input(p)?;
    }
    let reports = balance_reports(args)?;
    let mut expanded: Vec<&String> = reports.iter().flat_map(|r| &r.expanded_terms).collect();
    expanded.dedup();
    if !expanded.is_empty() {
        let names: Vec<&str> = expanded.iter().map(|s| s.as_str()).collect();
        println!("Polynomial terms included: {}", names.join(", "));
    }
    print!("{}", format_balance_table(&reports));
    write_json(&args.output, &reports)?;
    manifest.output(&args.output);
    if let Some(pairs) = &args.pairs {
        write_pairs(pairs, &reports)?;
        manifest.output(pairs);
    }
    manifest.finish(&manifest_path(&args.output))
}

pub fn build_region(exposures: &nalgebra::DMatrix<f64>, kind: RegionKind, q: f64) -> Result<Region> {
    Ok(match kind {
        RegionKind::Box => bounding_box(exposures, q)?,
        RegionKind::Hull if q >= 1.0 => convex_hull(exposures)?,
        RegionKind::Hull => trimmed_hull(exposures, q)?,
    })
}

#[derive(Debug, Serialize)]
struct CoefficientReport<'a> {
    terms: &'a [String],
    estimates: &'a [f64],
    residual_sd: f64,
    retained: usize,
    ess: f64,
    method: String,
    trim_q: Option<f64>,
    region: &'a Region,
}

pub fn surface(args: &SurfaceArgs) -> Result<()> {
    let mut manifest = RunManifest::start(
        "surface",
        json!({
            "weights": args.weights.as_ref().map(|p| p.display().to_string()),
            "region": format!("{:?}", args.region).to_lowercase(),
            "q": args.q,
            "formula": format!("{:?}", args.formula).to_lowercase(),
            "interaction": args.interaction,
            "degree": args.degree,
            "grid": args.grid,
        }),
    );
    manifest.input(&args.input.data)?;
    manifest.input(&args.input.spec)?;
    let loaded = load_dataset(&args.input.data, &args.input.spec)?;
    let data = &loaded.dataset;
    let ws = match &args.weights {
        Some(p) => {
            manifest.input(p)?;
            read_weights(p, data.n())?
        }
        None => WeightSet::unweighted(data.n()),
    };
    if args.degree == 0 {
        return Err(CliError::Input("--degree must be at least 1".into()));
    }
    let formula = Formula {
        linear: true,
        interaction: args.interaction || args.formula == FormulaKind::Interaction,
        degree: args.degree,
    };
    let region = build_region(data.exposures(), args.region, args.q)?;
    let fit = fit_dose_response(data, &ws, formula, &region)?;
    let points = region_grid(&region, args.grid)?;
    write_surface_csv(&fit, &points, writer(&args.output)?)?;
    manifest.output(&args.output);

    let coef_path = args.coefficients.clone().unwrap_or_else(|| sibling(&args.output, "coefficients.json"));
    let report = CoefficientReport {
        terms: &fit.fit.terms,
        estimates: &fit.fit.coefficients,
        residual_sd: fit.fit.residual_sd,
        retained: fit.retained,
        ess: fit.ess,
        method: fit.method.to_string(),
        trim_q: fit.trim_q,
        region: &fit.region,
    };
    write_json(&coef_path, &report)?;
    manifest.output(&coef_path);
    manifest.finish(&manifest_path(&args.output))
}

pub fn hull(args: &HullArgs) -> Result<()> {
    let mut manifest = RunManifest::start("hull", json!({ "q": args.q }));
    manifest.input(&args.input.data)?;
    manifest.input(&args.input.spec)?;
    let loaded = load_dataset(&args.input.data, &args.input.spec)?;
    let region = build_region(loaded.dataset.exposures(), RegionKind::Hull, args.q)?;
    write_vertices_csv(&region, writer(&args.output)?)?;
    println!("vertices: {}", region.vertices().map_or(0, <[_]>::len));
    println!("area: {}", format_float(region.area()));
    manifest.output(&args.output);
    manifest.finish(&manifest_path(&args.output))
}

pub fn study(args: &StudyArgs) -> Result<()> {
    let mut cfg: StudyConfig = read_json(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.master_seed = seed;
    }
    cfg.validate().map_err(|e| CliError::Input(format!("{}: {e}", args.config.display())))?;
    let config = serde_json::to_value(&cfg).map_err(|e| CliError::Input(e.to_string()))?;
    let mut manifest = RunManifest::start(
        "study",
        json!({
            "study": config,
            "jobs": args.jobs,
            "balance_sample": "full sample",
            "outcome_region": "trimmed convex hull at the weight trim level",
        }),
    )
    .seed(cfg.master_seed);
    manifest.input(&args.config)?;

    let result = run_study(&cfg, args.jobs)?;
    fs::create_dir_all(&args.output_dir).map_err(|e| CliError::io(&args.output_dir, e))?;
    let long = args.output_dir.join("study.csv");
    result.write_csv(writer(&long)?)?;
    manifest.output(&long);
    for (metric, name) in FIGURE_FILES {
        let path = args.output_dir.join(name);
        result.write_metric_csv(metric, writer(&path)?)?;
        manifest.output(&path);
    }
    for row in result.flagged() {
        eprintln!(
            "warning: {} rho={} {} q={} {}: {} of {} repetitions failed",
            row.scenario,
            row.cond_rho,
            row.method,
            row.trim_q,
            row.metric,
            row.failures,
            row.reps + row.failures
        );
    }
    manifest.finish(&args.output_dir.join("manifest.json"))
}

pub fn scenario(args: &ScenarioArgs) -> Result<()> {
    let cfg = builtin_scenario(args.name, args.rho, args.n)?;
    let text = serde_json::to_string_pretty(&cfg).map_err(|e| CliError::Input(e.to_string()))?;
    match &args.output {
        Some(path) => write_json(path, &cfg),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn resolve_scenario(args: &SimulateArgs) -> Result<ScenarioConfig> {
    let mut cfg = match (&args.scenario, &args.config) {
        (Some(s), None) => builtin_scenario(*s, args.rho.unwrap_or(0.0), args.n.unwrap_or(200))?,
        (None, Some(path)) => {
            let mut cfg: ScenarioConfig = read_json(path)?;
            if let Some(rho) = args.rho {
                cfg.cond_rho = rho;
            }
            cfg
        }
        _ => return Err(CliError::Input("give exactly one of --scenario or --config".into())),
    };
    if let Some(n) = args.n {
        cfg.n = n;
    }
    cfg.validate().map_err(|e| CliError::Input(e.to_string()))?;
    Ok(cfg)
}

pub fn simulate(args: &SimulateArgs) -> Result<()> {
    let cfg = resolve_scenario(args)?;
    let config = serde_json::to_value(&cfg).map_err(|e| CliError::Input(e.to_string()))?;
    let (_, marginal_rho) = implied_marginal_cov(&cfg)?;
    let mut manifest =
        RunManifest::start("simulate", json!({ "scenario": config, "marginal_rho": marginal_rho })).seed(args.seed);
    if let Some(p) = &args.config {
        manifest.input(p)?;
    }
    let data = generate(&cfg, &mut ChaCha8Rng::seed_from_u64(args.seed))?;

    let mut w = csv::Writer::from_writer(writer(&args.output)?);
    let mut header = vec![data.outcome_name().to_string()];
    header.extend(data.exposure_names().iter().cloned());
    header.extend(data.covariate_names().iter().cloned());
    w.write_record(&header)?;
    for i in 0..data.n() {
        let mut row = vec![format_float(data.outcome()[i])];
        row.extend(data.exposure_row(i).into_iter().map(format_float));
        row.extend(data.covariate_row(i).into_iter().map(format_float));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| CliError::io(&args.output, e))?;
    drop(w);
    manifest.output(&args.output);

    let names = data.covariate_names();
    let spec = DatasetSpec {
        outcome: data.outcome_name().to_string(),
        exposures: data.exposure_names().to_vec(),
        confounders: data
            .confounder_sets()
            .iter()
            .map(|set| set.iter().map(|&k| names[k].clone()).collect())
            .collect(),
        polynomials: Vec::new(),
        covariates: names.to_vec(),
    };
    let spec_path = sibling(&args.output, "spec.json");
    write_json(&spec_path, &spec)?;
    manifest.output(&spec_path);

    if let Some(path) = &args.true_weights {
        let ws = evaluate_weights(&true_propensity_fit(&cfg, None)?, &data)?;
        write_weights(path, ws.weights())?;
        let mut wm = RunManifest::start(
            "simulate",
            json!({ "method": ws.method().to_string(), "trim": null, "true_parameters": true }),
        )
        .seed(args.seed);
        wm.output(path);
        wm.finish(&manifest_path(path))?;
        manifest.output(path);
    }
    manifest.finish(&manifest_path(&args.output))
}
