//! Command-line front end: estimation on real panels, cross-validation,
//! Monte Carlo sweeps, oracle computation, and report/plot emission.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use scm_relax::baselines::{solve_fspda, solve_penalized, solve_scm, PenaltyKind};
use scm_relax::divergence::Divergence;
use scm_relax::moments::{compute_moments, eta_bar};
use scm_relax::oracle::{
    oracle_weights_g, oracle_weights_l2, GroupStructure, OracleError, OracleInputs,
};
use scm_relax::panel::{
    destandardize_weights, load_panel_csv, reconstruct_levels, standardize, yoy_growth, PanelData,
};
use scm_relax::simulation::{run_experiment, DgpConfig, GroupMode, KMode, Method};
use scm_relax::solver::{solve_relaxation, SolveStatus};
use scm_relax::tuning::{cv_select_eta, cv_select_lambda};

#[derive(Parser)]
#[command(name = "scm-relax", about = "SCM-relaxation estimators, baselines, and Monte Carlo")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Estimate a synthetic-control counterfactual on a panel CSV.
    Estimate(EstimateArgs),
    /// Run a Monte Carlo experiment.
    Simulate(SimulateArgs),
    /// Compute oracle weights from a loadings/membership JSON.
    Oracle(OracleArgs),
    /// Cross-validate the tuning parameter for a method.
    Cv(CvArgs),
}

#[derive(Args)]
struct EstimateArgs {
    /// Panel CSV: first column time labels, remaining columns units.
    #[arg(long)]
    data: PathBuf,
    /// Unit label of the treated series.
    #[arg(long)]
    treated: String,
    /// Time label of the FIRST treated period.
    #[arg(long = "treatment-time")]
    treatment_time: String,
    /// scm | lasso | ridge | fspda | l2 | el | entropy | cr:<gamma>
    #[arg(long, default_value = "l2")]
    method: String,
    /// Fixed tuning value (eta for relaxations, lambda for lasso/ridge).
    #[arg(long)]
    eta: Option<f64>,
    /// Select the tuning value by cross-validation (default when --eta absent).
    #[arg(long)]
    cv: bool,
    #[arg(long)]
    standardize: bool,
    /// Growth-transform the panel with this lag before estimating.
    #[arg(long)]
    yoy: Option<usize>,
    /// Report the counterfactual in levels (meaningful with --yoy).
    #[arg(long)]
    levels: bool,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, default_value_t = 50)]
    j: usize,
    #[arg(long, default_value_t = 50)]
    t0: usize,
    #[arg(long, default_value_t = 50)]
    t1: usize,
    /// lt | eq | gt: K below, equal to, or above r.
    #[arg(long = "k-mode", default_value = "lt")]
    k_mode: String,
    /// exact | approx group structure.
    #[arg(long, default_value = "exact")]
    mode: String,
    #[arg(long, default_value_t = 100)]
    reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Comma-separated subset of scm,lasso,ridge,fspda,l2,el,entropy.
    #[arg(long, default_value = "scm,lasso,ridge,fspda,l2,el,entropy")]
    methods: String,
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Worker threads (0 = library default).
    #[arg(long, default_value_t = 0)]
    workers: usize,
    /// Run all 27 Table-1 configurations.
    #[arg(long = "full-sweep")]
    full_sweep: bool,
}

#[derive(Args)]
struct OracleArgs {
    /// JSON with lambda_co, lambda0, omega_f_hat, membership, k.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct CvArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    treated: String,
    #[arg(long = "treatment-time")]
    treatment_time: String,
    #[arg(long, default_value = "l2")]
    method: String,
    #[arg(long = "grid-size", default_value_t = 20)]
    grid_size: usize,
    #[arg(long)]
    standardize: bool,
    #[arg(long)]
    yoy: Option<usize>,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

struct CliError {
    kind: String,
    message: String,
}

impl CliError {
    fn new(kind: &str, message: impl ToString) -> Self {
        CliError {
            kind: kind.to_string(),
            message: message.to_string(),
        }
    }
}

impl<E: std::error::Error> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError::new("module_error", e)
    }
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Estimate(a) => cmd_estimate(&a),
        Cmd::Simulate(a) => cmd_simulate(&a),
        Cmd::Oracle(a) => cmd_oracle(&a),
        Cmd::Cv(a) => cmd_cv(&a),
    };
    if let Err(e) = result {
        eprintln!(
            "{}",
            json!({"error": {"kind": e.kind, "message": e.message}})
        );
        std::process::exit(1);
    }
}

enum EstMethod {
    Scm,
    Penalized(PenaltyKind),
    Fspda,
    Relax(Divergence),
}

fn parse_method(s: &str) -> Result<EstMethod, CliError> {
    if let Some(g) = s.strip_prefix("cr:") {
        let gamma: f64 = g
            .parse()
            .map_err(|_| CliError::new("invalid_flag", format!("bad cr parameter '{g}'")))?;
        return Ok(EstMethod::Relax(Divergence::CressieRead(gamma)));
    }
    match s {
        "scm" => Ok(EstMethod::Scm),
        "lasso" => Ok(EstMethod::Penalized(PenaltyKind::Lasso)),
        "ridge" => Ok(EstMethod::Penalized(PenaltyKind::Ridge)),
        "fspda" => Ok(EstMethod::Fspda),
        "l2" => Ok(EstMethod::Relax(Divergence::L2)),
        "el" => Ok(EstMethod::Relax(Divergence::El)),
        "entropy" => Ok(EstMethod::Relax(Divergence::Entropy)),
        other => Err(CliError::new(
            "invalid_flag",
            format!("unknown method '{other}'"),
        )),
    }
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::new("io_error", e))?;
    fs::write(dir.join(name), contents).map_err(|e| CliError::new("io_error", e))
}

/// Fitted weights/predictions on the estimation-scale panel.
struct Fit {
    /// Control weights (regression coefficients for fsPDA).
    weights: Vec<f64>,
    /// Intercept (nonzero only for fsPDA).
    intercept: f64,
    /// Predicted counterfactual for every period of the estimation panel.
    predictions: Vec<f64>,
    /// Extra method metadata for weights.json.
    meta: serde_json::Value,
}

fn fit_estimation(
    method: &EstMethod,
    panel: &PanelData,
    eta: Option<f64>,
) -> Result<Fit, CliError> {
    let tol = 1e-8;
    let m = compute_moments(panel)?;
    let t = panel.t0() + panel.t1();
    let predict_w = |w: &[f64]| (0..t).map(|ti| panel.combine(w, ti)).collect::<Vec<f64>>();
    match method {
        EstMethod::Scm => {
            let s = solve_scm(&m, tol)?;
            Ok(Fit {
                predictions: predict_w(&s.w),
                meta: json!({"method": "scm", "non_unique": s.non_unique,
                             "kkt_residual": s.kkt_residual}),
                weights: s.w,
                intercept: 0.0,
            })
        }
        EstMethod::Penalized(kind) => {
            let lambda = match eta {
                Some(l) => l,
                None => cv_select_lambda(panel, *kind, 20)?.chosen,
            };
            let w = solve_penalized(&m, *kind, lambda, tol)?;
            let name = match kind {
                PenaltyKind::Lasso => "lasso",
                PenaltyKind::Ridge => "ridge",
            };
            Ok(Fit {
                predictions: predict_w(&w),
                meta: json!({"method": name, "lambda": lambda}),
                weights: w,
                intercept: 0.0,
            })
        }
        EstMethod::Fspda => {
            let cap = panel
                .num_controls()
                .min(panel.t0().saturating_sub(2))
                .min(10)
                .max(1);
            let fit = solve_fspda(panel, cap)?;
            let mut weights = vec![0.0; panel.num_controls()];
            for (i, &u) in fit.selected.iter().enumerate() {
                weights[u] = fit.coefficients[i];
            }
            let predictions = (0..t).map(|ti| fit.predict(panel, ti)).collect();
            Ok(Fit {
                weights,
                intercept: fit.intercept,
                predictions,
                meta: json!({"method": "fspda", "selected": fit.selected,
                             "intercept": fit.intercept}),
            })
        }
        EstMethod::Relax(d) => {
            let chosen_eta = match eta {
                Some(e) => e,
                None => cv_select_eta(panel, d, 20)?.chosen,
            };
            let sol = solve_relaxation(&m, d, chosen_eta, tol)?;
            if sol.status != SolveStatus::Converged {
                return Err(CliError::new(
                    "solver_not_converged",
                    format!("solver finished with status {}", sol.status.as_str()),
                ));
            }
            let mut meta = sol.to_json();
            meta["method"] = json!("relaxation");
            Ok(Fit {
                predictions: predict_w(&sol.w),
                weights: sol.w,
                intercept: 0.0,
                meta,
            })
        }
    }
}

/// Hand-emitted static SVG line chart: observed vs counterfactual with a
/// vertical marker at the first treated period.
fn render_svg(observed: &[f64], predicted: &[f64], t0: usize) -> String {
    let (w, h, ml, mr, mt, mb) = (800.0, 400.0, 55.0, 15.0, 15.0, 35.0);
    let n = observed.len().max(2);
    let lo = observed
        .iter()
        .chain(predicted)
        .cloned()
        .fold(f64::INFINITY, f64::min);
    let hi = observed
        .iter()
        .chain(predicted)
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    let x = |i: usize| ml + (w - ml - mr) * i as f64 / (n - 1) as f64;
    let y = |v: f64| h - mb - (h - mt - mb) * (v - lo) / span;
    let pts = |s: &[f64]| {
        s.iter()
            .enumerate()
            .map(|(i, &v)| format!("{:.2},{:.2}", x(i), y(v)))
            .collect::<Vec<_>>()
            .join(" ")
    };
    let tx = x(t0.min(n - 1));
    format!(
        concat!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" ",
            "viewBox=\"0 0 {w} {h}\">\n",
            "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n",
            "<line x1=\"{ml}\" y1=\"{yb}\" x2=\"{xr}\" y2=\"{yb}\" stroke=\"black\"/>\n",
            "<line x1=\"{ml}\" y1=\"{mt}\" x2=\"{ml}\" y2=\"{yb}\" stroke=\"black\"/>\n",
            "<line x1=\"{tx}\" y1=\"{mt}\" x2=\"{tx}\" y2=\"{yb}\" stroke=\"gray\" ",
            "stroke-dasharray=\"4 3\"/>\n",
            "<text x=\"{lx}\" y=\"{ly0}\" font-size=\"12\" fill=\"steelblue\">observed</text>\n",
            "<text x=\"{lx}\" y=\"{ly1}\" font-size=\"12\" fill=\"firebrick\">counterfactual</text>\n",
            "<text x=\"8\" y=\"{mid}\" font-size=\"11\" transform=\"rotate(-90 10 {mid})\">outcome</text>\n",
            "<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"1.5\" points=\"{p_obs}\"/>\n",
            "<polyline fill=\"none\" stroke=\"firebrick\" stroke-width=\"1.5\" points=\"{p_hat}\"/>\n",
            "</svg>\n"
        ),
        w = w,
        h = h,
        ml = ml,
        mt = mt,
        yb = h - mb,
        xr = w - mr,
        tx = tx,
        lx = w - 160.0,
        ly0 = mt + 16.0,
        ly1 = mt + 32.0,
        mid = h / 2.0,
        p_obs = pts(observed),
        p_hat = pts(predicted),
    )
}

fn cmd_estimate(a: &EstimateArgs) -> Result<(), CliError> {
    if a.eta.is_some() && a.cv {
        return Err(CliError::new("invalid_flag", "--eta and --cv are exclusive"));
    }
    let method = parse_method(&a.method)?;
    let raw = load_panel_csv(&a.data, &a.treated, &a.treatment_time)?;
    let lag = a.yoy.unwrap_or(0);
    let working = if let Some(l) = a.yoy {
        yoy_growth(&raw, l)?
    } else {
        raw.clone()
    };
    let (est_panel, scales) = if a.standardize {
        let (p, s) = standardize(&working)?;
        (p, Some(s))
    } else {
        (working.clone(), None)
    };

    let fit = fit_estimation(&method, &est_panel, a.eta)?;
    // map back to the raw (working) scale
    let (weights, intercept, predictions) = match &scales {
        Some(s) => {
            let w = destandardize_weights(&fit.weights, s)?;
            let preds = fit.predictions.iter().map(|p| p * s.sigma0).collect();
            (w, fit.intercept * s.sigma0, preds)
        }
        None => (fit.weights, fit.intercept, fit.predictions),
    };
    // weight-based methods predict identically after destandardization; the
    // fsPDA intercept is handled through the rescaled predictions above
    let _ = intercept;

    let t0 = working.t0();
    let t1 = working.t1();
    // output scale: growth (working) by default; levels when requested
    let (out_observed, out_predicted, out_labels) = if a.levels && a.yoy.is_some() {
        let obs_levels: Vec<f64> = (0..raw.t0() + raw.t1()).map(|t| raw.treated(t)).collect();
        let post_growth: Vec<f64> = predictions[t0..].to_vec();
        let post_levels = reconstruct_levels(&post_growth, &obs_levels, raw.t0(), lag)?;
        // growth-panel period i maps to raw period i + lag, whose growth
        // base is the observed level at raw period i
        let mut pred_levels: Vec<f64> = (0..t0)
            .map(|i| (1.0 + predictions[i]) * obs_levels[i])
            .collect();
        pred_levels.extend(post_levels);
        let observed: Vec<f64> = (lag..raw.t0() + raw.t1()).map(|t| raw.treated(t)).collect();
        debug_assert_eq!(observed.len(), t0 + t1);
        (
            observed,
            pred_levels,
            working.time_labels().to_vec(),
        )
    } else {
        let observed: Vec<f64> = (0..t0 + t1).map(|t| working.treated(t)).collect();
        (observed, predictions.clone(), working.time_labels().to_vec())
    };

    // empirical risks on the estimation scale
    let pre_risk: f64 = (0..t0)
        .map(|t| {
            let e = predictions[t] - working.treated(t);
            e * e
        })
        .sum::<f64>()
        / t0 as f64;
    let post_risk: f64 = (t0..t0 + t1)
        .map(|t| {
            let e = predictions[t] - working.treated(t);
            e * e
        })
        .sum::<f64>()
        / t1 as f64;

    let ate_path: Vec<f64> = (t0..t0 + t1)
        .map(|t| out_observed[t] - out_predicted[t])
        .collect();
    let sum_obs: f64 = (t0..t0 + t1).map(|t| out_observed[t]).sum();
    let sum_gap: f64 = ate_path.iter().sum();
    let cumulative_effect_ratio = if sum_obs != 0.0 {
        sum_gap / sum_obs
    } else {
        f64::NAN
    };

    // artifacts
    let unit_labels: Vec<&str> = working.unit_labels()[1..].iter().map(|s| s.as_str()).collect();
    let weights_json = json!({
        "units": unit_labels,
        "weights": weights,
        "details": fit.meta,
    });
    write_file(&a.out, "weights.json", &serde_json::to_string_pretty(&weights_json).unwrap())?;

    let mut cf = String::from("time,observed,predicted,gap\n");
    for i in 0..out_labels.len() {
        cf.push_str(&format!(
            "{},{:.12e},{:.12e},{:.12e}\n",
            out_labels[i],
            out_observed[i],
            out_predicted[i],
            out_observed[i] - out_predicted[i]
        ));
    }
    write_file(&a.out, "counterfactual.csv", &cf)?;

    let summary = json!({
        "r_t0": pre_risk,
        "r_t1": post_risk,
        "ate_path": ate_path,
        "ate_mean": sum_gap / t1 as f64,
        "cumulative_effect_ratio": cumulative_effect_ratio,
        "treatment_time": a.treatment_time,
        "method": a.method,
    });
    write_file(&a.out, "summary.json", &serde_json::to_string_pretty(&summary).unwrap())?;
    write_file(&a.out, "gap.svg", &render_svg(&out_observed, &out_predicted, t0))?;
    Ok(())
}

fn parse_methods(spec: &str) -> Result<Vec<Method>, CliError> {
    let mut out = Vec::new();
    for tok in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let m = Method::parse(tok)
            .ok_or_else(|| CliError::new("invalid_flag", format!("unknown method '{tok}'")))?;
        if !out.contains(&m) {
            out.push(m);
        }
    }
    if out.is_empty() {
        return Err(CliError::new("invalid_flag", "--methods is empty"));
    }
    Ok(out)
}

fn cmd_simulate(a: &SimulateArgs) -> Result<(), CliError> {
    let k_mode = match a.k_mode.as_str() {
        "lt" => KMode::Lt,
        "eq" => KMode::Eq,
        "gt" => KMode::Gt,
        other => {
            return Err(CliError::new(
                "invalid_flag",
                format!("--k-mode must be lt|eq|gt, got '{other}'"),
            ))
        }
    };
    let mode = match a.mode.as_str() {
        "exact" => GroupMode::Exact,
        "approx" => GroupMode::Approximate,
        other => {
            return Err(CliError::new(
                "invalid_flag",
                format!("--mode must be exact|approx, got '{other}'"),
            ))
        }
    };
    let methods = parse_methods(&a.methods)?;
    if a.workers > 0 {
        // ignore the error if a global pool already exists
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(a.workers)
            .build_global();
    }
    let run_one = |j: usize, t0: usize, km: KMode, stem: &str| -> Result<(), CliError> {
        let mut cfg = DgpConfig::standard(j, t0, km, mode, a.seed);
        cfg.t1 = a.t1;
        let report = run_experiment(&cfg, a.reps, &methods)?;
        write_file(&a.out, &format!("{stem}.csv"), &report.to_csv())?;
        write_file(
            &a.out,
            &format!("{stem}.json"),
            &serde_json::to_string_pretty(&report.to_json()).unwrap(),
        )?;
        Ok(())
    };
    if a.full_sweep {
        for &j in &[50usize, 100, 200] {
            for &t0 in &[j / 2, j, 2 * j] {
                for (km, tag) in [(KMode::Lt, "lt"), (KMode::Eq, "eq"), (KMode::Gt, "gt")] {
                    run_one(j, t0, km, &format!("report_j{j}_t{t0}_{tag}"))?;
                }
            }
        }
        Ok(())
    } else {
        run_one(a.j, a.t0, k_mode, "report")
    }
}

fn json_matrix(v: &serde_json::Value, name: &str) -> Result<Vec<Vec<f64>>, CliError> {
    serde_json::from_value(v.get(name).cloned().unwrap_or(serde_json::Value::Null))
        .map_err(|e| CliError::new("invalid_input", format!("field '{name}': {e}")))
}

fn cmd_oracle(a: &OracleArgs) -> Result<(), CliError> {
    let text = fs::read_to_string(&a.input).map_err(|e| CliError::new("io_error", e))?;
    let v: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| CliError::new("invalid_input", e))?;
    let lambda_co = json_matrix(&v, "lambda_co")?;
    let omega = json_matrix(&v, "omega_f_hat")?;
    let lambda0: Vec<f64> = serde_json::from_value(
        v.get("lambda0").cloned().unwrap_or(serde_json::Value::Null),
    )
    .map_err(|e| CliError::new("invalid_input", format!("field 'lambda0': {e}")))?;
    let membership: Vec<usize> = serde_json::from_value(
        v.get("membership").cloned().unwrap_or(serde_json::Value::Null),
    )
    .map_err(|e| CliError::new("invalid_input", format!("field 'membership': {e}")))?;
    let k = v.get("k").and_then(|x| x.as_u64()).unwrap_or(0) as usize;

    let kk = lambda_co.len();
    let r = lambda0.len();
    let to_mat = |rows: &Vec<Vec<f64>>, nr: usize, nc: usize, name: &str| {
        if rows.len() != nr || rows.iter().any(|row| row.len() != nc) {
            return Err(CliError::new(
                "invalid_input",
                format!("'{name}' must be {nr}x{nc}"),
            ));
        }
        Ok(nalgebra::DMatrix::from_fn(nr, nc, |i, j| rows[i][j]))
    };
    let lam = to_mat(&lambda_co, kk, r, "lambda_co")?;
    let om = to_mat(&omega, r, r, "omega_f_hat")?;
    let groups = GroupStructure::new(membership, k)?;
    let inp = OracleInputs::new(lam, nalgebra::DVector::from_vec(lambda0), om, groups)?;

    let out = match oracle_weights_l2(&inp) {
        Ok(o) => o.to_json(),
        Err(OracleError::BoundaryOracle { .. }) => {
            let (w, w_g) = oracle_weights_g(&inp, &Divergence::L2, 1e-9)?;
            let pinned: Vec<usize> = w_g
                .iter()
                .enumerate()
                .filter(|(_, &x)| x < 1e-8)
                .map(|(i, _)| i + 1)
                .collect();
            json!({"w": w, "w_g": w_g, "gamma": serde_json::Value::Null,
                   "case_tag": "numeric_boundary_fallback", "pinned_groups": pinned})
        }
        Err(e) => return Err(e.into()),
    };
    write_file(&a.out, "oracle.json", &serde_json::to_string_pretty(&out).unwrap())
}

fn cmd_cv(a: &CvArgs) -> Result<(), CliError> {
    let method = parse_method(&a.method)?;
    let raw = load_panel_csv(&a.data, &a.treated, &a.treatment_time)?;
    let working = if let Some(l) = a.yoy {
        yoy_growth(&raw, l)?
    } else {
        raw
    };
    let panel = if a.standardize {
        standardize(&working)?.0
    } else {
        working
    };
    let (result, kind) = match method {
        EstMethod::Relax(d) => (cv_select_eta(&panel, &d, a.grid_size)?, "eta"),
        EstMethod::Penalized(k) => (cv_select_lambda(&panel, k, a.grid_size)?, "lambda"),
        _ => {
            return Err(CliError::new(
                "invalid_flag",
                "cv applies to l2|el|entropy|cr:<g>|lasso|ridge",
            ))
        }
    };
    let m = compute_moments(&panel)?;
    let mut out = result.to_json();
    out["parameter"] = json!(kind);
    out["eta_bar"] = json!(eta_bar(&m).eta_bar);
    write_file(&a.out, "cv.json", &serde_json::to_string_pretty(&out).unwrap())
}
