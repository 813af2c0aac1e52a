//! Monte Carlo engine: grouped factor-model DGP (exact and approximate
//! group structures), the full method comparison, and the prediction-error
//! and weight-distance ratio metrics.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use rayon::prelude::*;
use thiserror::Error;

use crate::baselines::{solve_fspda, solve_penalized, solve_scm, FspdaFit, PenaltyKind};
use crate::divergence::Divergence;
use crate::moments::compute_moments;
use crate::oracle::{
    oracle_counterfactual, oracle_weights_g, oracle_weights_l2, GroupStructure, OracleError,
    OracleInputs,
};
use crate::panel::PanelData;
use crate::solver::{check_feasibility, solve_relaxation};
use crate::tuning::{cv_select_eta, cv_select_lambda, fold_blocks, n_folds_for};

#[derive(Debug, Error)]
pub enum SimulationError {
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error("replication {rep} failed: {message}")]
    Replication { rep: usize, message: String },
    #[error("weight vector length {got} does not match {expected} controls")]
    DimensionMismatch { got: usize, expected: usize },
}

/// Exact or approximate group structure for the control loadings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupMode {
    Exact,
    Approximate,
}

/// How K relates to r in the Table 1 design.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KMode {
    /// K = ⌊0.8 r⌋
    Lt,
    /// K = r
    Eq,
    /// K = ⌊1.2 r⌋ + 1
    Gt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Method {
    Scm,
    Lasso,
    Ridge,
    Fspda,
    L2Relax,
    ElRelax,
    EntropyRelax,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Scm => "scm",
            Method::Lasso => "lasso",
            Method::Ridge => "ridge",
            Method::Fspda => "fspda",
            Method::L2Relax => "l2_relax",
            Method::ElRelax => "el_relax",
            Method::EntropyRelax => "entropy_relax",
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        match s {
            "scm" => Some(Method::Scm),
            "lasso" => Some(Method::Lasso),
            "ridge" => Some(Method::Ridge),
            "fspda" => Some(Method::Fspda),
            "l2" | "l2_relax" => Some(Method::L2Relax),
            "el" | "el_relax" => Some(Method::ElRelax),
            "entropy" | "entropy_relax" => Some(Method::EntropyRelax),
            _ => None,
        }
    }

    pub const ALL: [Method; 7] = [
        Method::Scm,
        Method::Lasso,
        Method::Ridge,
        Method::Fspda,
        Method::L2Relax,
        Method::ElRelax,
        Method::EntropyRelax,
    ];
}

/// DGP parameters following the simulation protocol.
#[derive(Debug, Clone)]
pub struct DgpConfig {
    pub j: usize,
    pub t0: usize,
    /// Post-treatment length, 50 in the published design.
    pub t1: usize,
    pub r: usize,
    pub k: usize,
    pub ar_coef: f64,
    /// Variance of each core loading entry, 3/r by default.
    pub loading_var: f64,
    /// Half-width of the uniform perturbation on the treated loadings.
    pub lambda0_noise: f64,
    /// Half-width of the approximate-group loading perturbation.
    pub group_noise: f64,
    pub mode: GroupMode,
    pub seed: u64,
}

impl DgpConfig {
    /// Standard configuration for given panel dimensions: r = ⌊log T0⌋ and
    /// K chosen by `k_mode`.
    pub fn standard(j: usize, t0: usize, k_mode: KMode, mode: GroupMode, seed: u64) -> Self {
        let r = ((t0 as f64).ln().floor() as usize).max(1);
        let k = match k_mode {
            KMode::Lt => ((0.8 * r as f64).floor() as usize).max(1),
            KMode::Eq => r,
            KMode::Gt => (1.2 * r as f64).floor() as usize + 1,
        };
        let rf = r as f64;
        DgpConfig {
            j,
            t0,
            t1: 50,
            r,
            k,
            ar_coef: 0.5,
            loading_var: 3.0 / rf,
            lambda0_noise: 0.1 / rf.sqrt(),
            group_noise: 0.2 / rf.sqrt(),
            mode,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), SimulationError> {
        if self.r < 1 {
            return Err(SimulationError::InvalidConfig("r must be >= 1".into()));
        }
        if self.k < 2 {
            return Err(SimulationError::InvalidConfig(
                "k must be >= 2: the oracle group weights draw K - 1 Dirichlet entries".into(),
            ));
        }
        if self.t0 < 4 {
            return Err(SimulationError::InvalidConfig("t0 must be >= 4".into()));
        }
        if self.t1 < 1 {
            return Err(SimulationError::InvalidConfig("t1 must be >= 1".into()));
        }
        if self.j < self.k {
            return Err(SimulationError::InvalidConfig(format!(
                "j = {} must be at least k = {}",
                self.j, self.k
            )));
        }
        if !(self.ar_coef.abs() < 1.0) {
            return Err(SimulationError::InvalidConfig(
                "ar_coef must lie in (-1, 1)".into(),
            ));
        }
        for (name, v) in [
            ("loading_var", self.loading_var),
            ("lambda0_noise", self.lambda0_noise),
            ("group_noise", self.group_noise),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(SimulationError::InvalidConfig(format!(
                    "{name} must be a nonnegative finite number"
                )));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "j": self.j,
            "t0": self.t0,
            "t1": self.t1,
            "r": self.r,
            "k": self.k,
            "ar_coef": self.ar_coef,
            "loading_var": self.loading_var,
            "lambda0_noise": self.lambda0_noise,
            "group_noise": self.group_noise,
            "mode": match self.mode { GroupMode::Exact => "exact", GroupMode::Approximate => "approx" },
            "seed": self.seed,
        })
    }
}

/// One simulated data set plus the structural quantities that produced it.
#[derive(Debug, Clone)]
pub struct SimulatedInstance {
    /// Untreated potential outcomes, treated unit in column 0.
    pub panel: PanelData,
    pub oracle: OracleInputs,
    /// Dirichlet group weights with the first entry exactly zero.
    pub w_star_g: Vec<f64>,
    /// T × r factor paths.
    pub factors: DMatrix<f64>,
    /// T × (J+1) idiosyncratic errors, kept for debugging.
    pub errors: DMatrix<f64>,
}

/// Structural draw held fixed across replications for a given seed.
struct Structure {
    lambda_co: DMatrix<f64>,
    lambda0: DVector<f64>,
    /// Per-unit control loadings (J × r): Z Λ^co, plus Ξ in approximate mode.
    lambda_controls: DMatrix<f64>,
    groups: GroupStructure,
    w_star_g: Vec<f64>,
}

/// Near-equal group sizes: ⌊J/K⌋ each with the remainder spread over the
/// first groups.
fn group_membership(j: usize, k: usize) -> Vec<usize> {
    let base = j / k;
    let extra = j % k;
    let mut membership = Vec::with_capacity(j);
    for g in 0..k {
        let len = base + usize::from(g < extra);
        membership.extend(std::iter::repeat(g + 1).take(len));
    }
    membership
}

/// SplitMix64 finalizer, used to hash the replication index into a
/// per-replication RNG stream.
fn hash_rep(rep: u64) -> u64 {
    let mut z = rep.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn draw_structure(cfg: &DgpConfig) -> Result<Structure, SimulationError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (k, r, j) = (cfg.k, cfg.r, cfg.j);
    let sd = cfg.loading_var.sqrt();
    let lambda_co =
        DMatrix::from_fn(k, r, |_, _| sd * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng));
    let membership = group_membership(j, k);
    let groups = GroupStructure::new(membership.clone(), k)
        .map_err(|e| SimulationError::InvalidConfig(e.to_string()))?;

    // w*_G: first entry zero, the rest symmetric Dirichlet(1) (normalized
    // unit-rate exponentials).
    let mut w_star_g = vec![0.0; k];
    let mut tail: Vec<f64> = (0..k - 1)
        .map(|_| <Exp1 as Distribution<f64>>::sample(&Exp1, &mut rng))
        .collect();
    let s: f64 = tail.iter().sum();
    tail.iter_mut().for_each(|x| *x /= s);
    w_star_g[1..].copy_from_slice(&tail);

    let wg = DVector::from_column_slice(&w_star_g);
    let eps = DVector::from_fn(r, |_, _| rng.gen_range(-cfg.lambda0_noise..=cfg.lambda0_noise));
    let lambda0 = lambda_co.transpose() * &wg + eps;

    let mut lambda_controls = DMatrix::from_fn(j, r, |a, b| lambda_co[(membership[a] - 1, b)]);
    if cfg.mode == GroupMode::Approximate {
        for v in lambda_controls.iter_mut() {
            *v += rng.gen_range(-cfg.group_noise..=cfg.group_noise);
        }
    }
    Ok(Structure {
        lambda_co,
        lambda0,
        lambda_controls,
        groups,
        w_star_g,
    })
}

/// Mutually independent AR(1) factor paths, each initialized at the
/// stationary distribution N(0, 1/(1 - ar^2)).
fn simulate_factors(rng: &mut ChaCha8Rng, t: usize, r: usize, ar: f64) -> DMatrix<f64> {
    let mut f = DMatrix::zeros(t, r);
    let stat_sd = (1.0 / (1.0 - ar * ar)).sqrt();
    for l in 0..r {
        let mut prev = stat_sd * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng);
        for ti in 0..t {
            let u: f64 = <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng);
            prev = ar * prev + u;
            f[(ti, l)] = prev;
        }
    }
    f
}

/// Generates the replication `rep` of the configured DGP. The loadings,
/// group structure, and oracle group weights depend only on `cfg.seed`;
/// factors and idiosyncratic errors are redrawn per replication.
pub fn generate_instance(cfg: &DgpConfig, rep: usize) -> Result<SimulatedInstance, SimulationError> {
    cfg.validate()?;
    let st = draw_structure(cfg)?;
    let t = cfg.t0 + cfg.t1;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ hash_rep(rep as u64));
    let factors = simulate_factors(&mut rng, t, cfg.r, cfg.ar_coef);
    let errors = DMatrix::from_fn(t, cfg.j + 1, |_, _| {
        <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
    });

    let mut outcomes = DMatrix::zeros(t, cfg.j + 1);
    for ti in 0..t {
        let f_t = factors.row(ti);
        outcomes[(ti, 0)] = f_t.dot(&st.lambda0.transpose()) + errors[(ti, 0)];
        for u in 0..cfg.j {
            outcomes[(ti, u + 1)] = f_t.dot(&st.lambda_controls.row(u)) + errors[(ti, u + 1)];
        }
    }
    let unit_labels: Vec<String> = std::iter::once("treated".to_string())
        .chain((1..=cfg.j).map(|u| format!("control{u}")))
        .collect();
    let time_labels: Vec<String> = (1..=t).map(|ti| format!("t{ti}")).collect();
    let panel = PanelData::new(outcomes, cfg.t0, cfg.t1, unit_labels, time_labels)
        .map_err(|e| SimulationError::InvalidConfig(e.to_string()))?;

    // Ω̂_F from the pre-treatment factor paths.
    let f_pre = factors.rows(0, cfg.t0);
    let omega = f_pre.transpose() * f_pre / cfg.t0 as f64;
    let oracle = OracleInputs::new(st.lambda_co, st.lambda0, omega, st.groups)
        .map_err(|e| SimulationError::InvalidConfig(format!("oracle inputs: {e}")))?;

    Ok(SimulatedInstance {
        panel,
        oracle,
        w_star_g: st.w_star_g,
        factors,
        errors,
    })
}

/// Which window `empirical_risk` averages over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Window {
    Pre,
    Post,
}

/// Mean squared fit error T^{-1} Σ_t (w'y_t - y_{0t})^2 over the chosen
/// window.
pub fn empirical_risk(w: &[f64], panel: &PanelData, window: Window) -> Result<f64, SimulationError> {
    if w.len() != panel.num_controls() {
        return Err(SimulationError::DimensionMismatch {
            got: w.len(),
            expected: panel.num_controls(),
        });
    }
    let (lo, hi) = match window {
        Window::Pre => (0, panel.t0()),
        Window::Post => (panel.t0(), panel.t0() + panel.t1()),
    };
    let mut acc = 0.0;
    for t in lo..hi {
        let e = panel.combine(w, t) - panel.treated(t);
        acc += e * e;
    }
    Ok(acc / (hi - lo) as f64)
}

/// Per-method averaged ratios relative to the SCM benchmark.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodSummary {
    pub pred_ratio: f64,
    pub l1_ratio: f64,
    pub l2_ratio: f64,
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub per_method: BTreeMap<String, MethodSummary>,
    pub n_reps: usize,
    pub config: DgpConfig,
}

impl ExperimentReport {
    pub fn to_json(&self) -> serde_json::Value {
        let methods: serde_json::Map<String, serde_json::Value> = self
            .per_method
            .iter()
            .map(|(m, s)| {
                (
                    m.clone(),
                    serde_json::json!({
                        "pred_ratio": s.pred_ratio,
                        "l1_ratio": s.l1_ratio,
                        "l2_ratio": s.l2_ratio,
                    }),
                )
            })
            .collect();
        serde_json::json!({
            "per_method": methods,
            "n_reps": self.n_reps,
            "config": self.config.to_json(),
        })
    }

    /// RFC-4180-style CSV, one row per method.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,pred_ratio,l1_ratio,l2_ratio\n");
        for (m, s) in &self.per_method {
            out.push_str(&format!(
                "{m},{:.17e},{:.17e},{:.17e}\n",
                s.pred_ratio, s.l1_ratio, s.l2_ratio
            ));
        }
        out
    }
}

/// Oracle target weights: closed form when interior, numeric fallback on
/// the boundary, and a minimal-eta relaxation fallback when the exact
/// balancing system admits no simplex solution.
fn oracle_target(inp: &OracleInputs) -> Result<Vec<f64>, String> {
    match oracle_weights_l2(inp) {
        Ok(o) => Ok(o.w),
        Err(OracleError::BoundaryOracle { .. }) | Err(OracleError::SingularCore) => {
            match oracle_weights_g(inp, &Divergence::L2, 1e-9) {
                Ok((w, _)) => Ok(w),
                Err(_) => oracle_min_eta(inp),
            }
        }
        Err(e) => Err(e.to_string()),
    }
}

fn oracle_min_eta(inp: &OracleInputs) -> Result<Vec<f64>, String> {
    let m = inp.expanded_moments();
    let cert = check_feasibility(&m, 0.0).map_err(|e| e.to_string())?;
    let eta = cert.eta_min * (1.0 + 1e-6) + 1e-12;
    solve_relaxation(&m, &Divergence::L2, eta, 1e-9)
        .map(|s| s.w)
        .map_err(|e| e.to_string())
}

/// Cross-validates `max_terms` for fsPDA with the same contiguous-block
/// fold protocol as the other methods, then fits on the full pre-treatment
/// window.
fn fit_fspda_cv(panel: &PanelData) -> Result<FspdaFit, String> {
    let t0 = panel.t0();
    let j = panel.num_controls();
    let cap = j.min(t0.saturating_sub(2)).min(10).max(1);
    let n_folds = n_folds_for(t0);
    let blocks = fold_blocks(t0, n_folds);
    let mut best = (1usize, f64::INFINITY);
    for max_terms in 1..=cap {
        let mut acc = 0.0;
        let mut ok = true;
        for f in 0..n_folds {
            let train: Vec<usize> = (0..n_folds)
                .filter(|&g| g != f)
                .flat_map(|g| blocks[g].iter().cloned())
                .collect();
            let sub = match panel.subset_pre(&train) {
                Ok(s) => s,
                Err(_) => {
                    ok = false;
                    break;
                }
            };
            let cap_f = max_terms.min(sub.num_controls().min(sub.t0().saturating_sub(2)));
            let fit = match solve_fspda(&sub, cap_f.max(1)) {
                Ok(fit) => fit,
                Err(_) => {
                    ok = false;
                    break;
                }
            };
            let mut mse = 0.0;
            for &t in &blocks[f] {
                let e = panel.treated(t) - fit.predict(panel, t);
                mse += e * e;
            }
            acc += mse / blocks[f].len() as f64;
        }
        if ok {
            let mean = acc / n_folds as f64;
            if mean <= best.1 {
                best = (max_terms, mean);
            }
        }
    }
    solve_fspda(panel, best.0).map_err(|e| e.to_string())
}

struct MethodFit {
    /// Control-unit weight (or coefficient) vector, length J.
    weights: Vec<f64>,
    /// Counterfactual prediction over post-treatment periods.
    prediction: Vec<f64>,
}

fn fit_method(method: Method, panel: &PanelData) -> Result<MethodFit, String> {
    let tol = 1e-8;
    let m = compute_moments(panel).map_err(|e| e.to_string())?;
    let t0 = panel.t0();
    let post: Vec<usize> = (t0..t0 + panel.t1()).collect();
    let weighted = |w: &[f64]| post.iter().map(|&t| panel.combine(w, t)).collect::<Vec<f64>>();
    match method {
        Method::Scm => {
            let s = solve_scm(&m, tol).map_err(|e| e.to_string())?;
            let prediction = weighted(&s.w);
            Ok(MethodFit {
                weights: s.w,
                prediction,
            })
        }
        Method::Lasso | Method::Ridge => {
            let kind = if method == Method::Lasso {
                PenaltyKind::Lasso
            } else {
                PenaltyKind::Ridge
            };
            let cv = cv_select_lambda(panel, kind, 20).map_err(|e| e.to_string())?;
            let w = solve_penalized(&m, kind, cv.chosen, tol).map_err(|e| e.to_string())?;
            let prediction = weighted(&w);
            Ok(MethodFit {
                weights: w,
                prediction,
            })
        }
        Method::Fspda => {
            let fit = fit_fspda_cv(panel)?;
            let mut weights = vec![0.0; panel.num_controls()];
            for (i, &u) in fit.selected.iter().enumerate() {
                weights[u] = fit.coefficients[i];
            }
            let prediction = post.iter().map(|&t| fit.predict(panel, t)).collect();
            Ok(MethodFit {
                weights,
                prediction,
            })
        }
        Method::L2Relax | Method::ElRelax | Method::EntropyRelax => {
            let d = match method {
                Method::L2Relax => Divergence::L2,
                Method::ElRelax => Divergence::El,
                _ => Divergence::Entropy,
            };
            let cv = cv_select_eta(panel, &d, 20).map_err(|e| e.to_string())?;
            let sol = solve_relaxation(&m, &d, cv.chosen, tol).map_err(|e| e.to_string())?;
            let prediction = weighted(&sol.w);
            Ok(MethodFit {
                weights: sol.w,
                prediction,
            })
        }
    }
}

fn norm_diff(a: &[f64], b: &[f64], p: u8) -> f64 {
    match p {
        1 => a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum(),
        _ => a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt(),
    }
}

struct RepMetrics {
    per_method: Vec<(Method, [f64; 3])>,
}

fn run_replication(cfg: &DgpConfig, rep: usize, methods: &[Method]) -> Result<RepMetrics, String> {
    let inst = generate_instance(cfg, rep).map_err(|e| e.to_string())?;
    let w_star = oracle_target(&inst.oracle)?;
    let y_star = oracle_counterfactual(&w_star, &inst.panel).map_err(|e| e.to_string())?;

    // SCM benchmark always needed for normalization.
    let scm = fit_method(Method::Scm, &inst.panel)?;
    let scm_pred_err: f64 = scm
        .prediction
        .iter()
        .zip(&y_star)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let scm_l1 = norm_diff(&scm.weights, &w_star, 1);
    let scm_l2 = norm_diff(&scm.weights, &w_star, 2);

    let mut per_method = Vec::with_capacity(methods.len());
    for &method in methods {
        if method == Method::Scm {
            per_method.push((method, [1.0, 1.0, 1.0]));
            continue;
        }
        let fit = fit_method(method, &inst.panel)?;
        let pred_err: f64 = fit
            .prediction
            .iter()
            .zip(&y_star)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        per_method.push((
            method,
            [
                pred_err / scm_pred_err,
                norm_diff(&fit.weights, &w_star, 1) / scm_l1,
                norm_diff(&fit.weights, &w_star, 2) / scm_l2,
            ],
        ));
    }
    Ok(RepMetrics { per_method })
}

/// Runs `n_reps` replications of the configured experiment for the given
/// methods and averages the ratios. Replications are independent and run in
/// parallel; results are reduced in replication order, so reports are
/// byte-identical for any worker count. A failed replication aborts the
/// experiment with its index.
pub fn run_experiment(
    cfg: &DgpConfig,
    n_reps: usize,
    methods: &[Method],
) -> Result<ExperimentReport, SimulationError> {
    cfg.validate()?;
    if n_reps == 0 {
        return Err(SimulationError::InvalidConfig("n_reps must be positive".into()));
    }
    if methods.is_empty() {
        return Err(SimulationError::InvalidConfig("methods must be nonempty".into()));
    }
    let results: Vec<Result<RepMetrics, String>> = (0..n_reps)
        .into_par_iter()
        .map(|rep| run_replication(cfg, rep, methods))
        .collect();
    let mut sums: BTreeMap<Method, [f64; 3]> = BTreeMap::new();
    for (rep, res) in results.into_iter().enumerate() {
        let metrics = res.map_err(|message| SimulationError::Replication { rep, message })?;
        for (method, vals) in metrics.per_method {
            let e = sums.entry(method).or_insert([0.0; 3]);
            for i in 0..3 {
                e[i] += vals[i];
            }
        }
    }
    let per_method = sums
        .into_iter()
        .map(|(m, s)| {
            (
                m.as_str().to_string(),
                MethodSummary {
                    pred_ratio: s[0] / n_reps as f64,
                    l1_ratio: s[1] / n_reps as f64,
                    l2_ratio: s[2] / n_reps as f64,
                },
            )
        })
        .collect();
    Ok(ExperimentReport {
        per_method,
        n_reps,
        config: cfg.clone(),
    })
}
