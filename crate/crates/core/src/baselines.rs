//! Comparator estimators: canonical SCM, its unconstrained closed form,
//! simplex-constrained Lasso/Ridge shrunk toward equal weights, and the
//! forward-selection panel-data approach (fsPDA).

use crate::ipm::{
    barrier_minimize, nnls, IpmError, IpmOptions, IpmProblem, QuadObjective, SmoothObjective,
};
use crate::moments::MomentPair;
use crate::panel::PanelData;
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("moment matrix is numerically singular (condition number above 1e12)")]
    SingularMoment,
    #[error("rank-deficient regression design in forward selection")]
    RankDeficientDesign,
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("numerical failure: {0}")]
    NumericalFailure(String),
}

impl From<IpmError> for BaselineError {
    fn from(e: IpmError) -> Self {
        BaselineError::NumericalFailure(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PenaltyKind {
    Lasso,
    Ridge,
}

/// Canonical SCM weights with diagnostics.
#[derive(Debug, Clone)]
pub struct ScmSolution {
    /// Simplex weights; entries within 1e-10 of zero are exact zeros.
    pub w: Vec<f64>,
    /// Set when the moment matrix is singular and the reported weights are
    /// the minimum-norm minimizer (Tikhonov limit).
    pub non_unique: bool,
    /// Independently recomputed KKT residual of the simplex QP.
    pub kkt_residual: f64,
}

/// Stationarity residual of the simplex QP `min w'Q w + c'w` at `w`:
/// fits multipliers for binding nonnegativity constraints and the simplex
/// equality by nonnegative least squares.
fn simplex_qp_residual(grad: &DVector<f64>, w: &[f64]) -> f64 {
    let j = w.len();
    let act_tol = 1e-6 * (1.0 + grad.amax());
    let mut cols: Vec<DVector<f64>> = Vec::new();
    for (i, &wi) in w.iter().enumerate() {
        if wi.abs() <= act_tol {
            let mut c = DVector::zeros(j);
            c[i] = -1.0;
            cols.push(c);
        }
    }
    cols.push(DVector::from_element(j, 1.0));
    cols.push(DVector::from_element(j, -1.0));
    let a = DMatrix::from_columns(&cols);
    let b = -grad;
    let lam = nnls(&a, &b, 10 * cols.len() + 100);
    (&a * lam - b).amax()
}

fn clamp_simplex(raw: &DVector<f64>, j: usize) -> Vec<f64> {
    let mut w: Vec<f64> = (0..j)
        .map(|i| if raw[i].abs() <= 1e-10 { 0.0 } else { raw[i] })
        .collect();
    let s: f64 = w.iter().sum();
    if s > 0.0 {
        for x in &mut w {
            *x /= s;
        }
    }
    w
}

/// Solves the simplex QP `min w'Q w + c'w` with the barrier method.
fn solve_simplex_qp(q: DMatrix<f64>, c: DVector<f64>, tol: f64) -> Result<DVector<f64>, BaselineError> {
    let j = c.len();
    let obj = QuadObjective { q, c };
    let a_in = -DMatrix::<f64>::identity(j, j);
    let b_in = DVector::zeros(j);
    let a_eq = DMatrix::from_element(1, j, 1.0);
    let b_eq = DVector::from_element(1, 1.0);
    let p = IpmProblem {
        obj: &obj,
        a_in: &a_in,
        b_in: &b_in,
        a_eq: &a_eq,
        b_eq: &b_eq,
    };
    let opts = IpmOptions {
        gap_tol: tol * 1e-3,
        ..IpmOptions::default()
    };
    let r = barrier_minimize(&p, DVector::from_element(j, 1.0 / j as f64), &opts, None)?;
    if !r.converged {
        return Err(BaselineError::NumericalFailure(
            "simplex QP barrier did not converge".into(),
        ));
    }
    Ok(polish_qp(&obj.q, &obj.c, &r.x).unwrap_or(r.x))
}

/// Active-set refinement of a barrier iterate for the simplex QP: pins the
/// near-zero coordinates, solves the equality-constrained QP on the free
/// face exactly, and accepts the result only if it is primal feasible and
/// the pinned multipliers are dual feasible.
fn polish_qp(q: &DMatrix<f64>, c: &DVector<f64>, x: &DVector<f64>) -> Option<DVector<f64>> {
    let j = c.len();
    let free: Vec<usize> = (0..j).filter(|&i| x[i] > 1e-6).collect();
    let nf = free.len();
    if nf == 0 {
        return None;
    }
    // KKT system on the face: 2 Q_FF w_F - nu 1 = -c_F, 1' w_F = 1.
    let mut kkt = DMatrix::zeros(nf + 1, nf + 1);
    let mut rhs = DVector::zeros(nf + 1);
    for (r, &i) in free.iter().enumerate() {
        for (cl, &k) in free.iter().enumerate() {
            kkt[(r, cl)] = 2.0 * q[(i, k)];
        }
        kkt[(r, nf)] = -1.0;
        kkt[(nf, r)] = 1.0;
        rhs[r] = -c[i];
    }
    rhs[nf] = 1.0;
    let sol = kkt
        .clone()
        .lu()
        .solve(&rhs)
        .or_else(|| kkt.full_piv_lu().solve(&rhs))?;
    let nu = sol[nf];
    let mut w = DVector::zeros(j);
    for (r, &i) in free.iter().enumerate() {
        if sol[r] < -1e-12 {
            return None;
        }
        w[i] = sol[r].max(0.0);
    }
    let grad = 2.0 * (q * &w) + c;
    for i in 0..j {
        if x[i] <= 1e-6 && grad[i] - nu < -1e-9 * (1.0 + grad.amax()) {
            return None;
        }
    }
    Some(w)
}

/// Canonical SCM: `argmin_{w in simplex} w' sigma_hat w - 2 upsilon_hat' w`.
/// A singular moment matrix is regularized by a vanishing ridge, which
/// selects the minimum-norm minimizer; the result is flagged non-unique.
pub fn solve_scm(m: &MomentPair, tol: f64) -> Result<ScmSolution, BaselineError> {
    if !(tol > 0.0 && tol <= 1e-2) {
        return Err(BaselineError::InvalidInput(format!(
            "tol must lie in (0, 1e-2], got {tol}"
        )));
    }
    let j = m.j;
    let svd = m.sigma_hat.clone().svd(false, false);
    let smax = svd.singular_values.amax();
    let smin = svd.singular_values.min();
    let non_unique = smin <= 1e-10 * smax || smax == 0.0;
    let mut q = m.sigma_hat.clone();
    if non_unique {
        let ridge = 1e-10 * (1.0 + smax);
        for i in 0..j {
            q[(i, i)] += ridge;
        }
    }
    let x = solve_simplex_qp(q, -2.0 * &m.upsilon_hat, tol)?;
    let w = clamp_simplex(&x, j);
    let grad = 2.0 * (&m.sigma_hat * DVector::from_column_slice(&w)) - 2.0 * &m.upsilon_hat;
    let kkt_residual = simplex_qp_residual(&grad, &w);
    Ok(ScmSolution {
        w,
        non_unique,
        kkt_residual,
    })
}

/// Closed-form sum-to-one least-squares weights ignoring nonnegativity:
/// `w = sigma_hat^{-1}(upsilon_hat - gamma 1)` with
/// `gamma = (1' sigma_hat^{-1} upsilon_hat - 1) / (1' sigma_hat^{-1} 1)`.
pub fn scm_closed_form_unconstrained(m: &MomentPair) -> Result<(Vec<f64>, f64), BaselineError> {
    let j = m.j;
    let svd = m.sigma_hat.clone().svd(true, true);
    let smax = svd.singular_values.amax();
    let smin = svd.singular_values.min();
    if smax == 0.0 || smin < 1e-12 * smax || smax / smin > 1e12 {
        return Err(BaselineError::SingularMoment);
    }
    let ones = DVector::from_element(j, 1.0);
    let si_u = svd
        .solve(&m.upsilon_hat, 0.0)
        .map_err(|e| BaselineError::NumericalFailure(e.to_string()))?;
    let si_1 = svd
        .solve(&ones, 0.0)
        .map_err(|e| BaselineError::NumericalFailure(e.to_string()))?;
    let gamma = (ones.dot(&si_u) - 1.0) / ones.dot(&si_1);
    let w = &si_u - &si_1 * gamma;
    Ok((w.iter().cloned().collect(), gamma))
}

/// Huber smoothing of `|u|` with knee `delta`.
fn huber(u: f64, delta: f64) -> f64 {
    if u.abs() <= delta {
        u * u / (2.0 * delta)
    } else {
        u.abs() - delta / 2.0
    }
}

fn huber_d1(u: f64, delta: f64) -> f64 {
    if u.abs() <= delta {
        u / delta
    } else {
        u.signum()
    }
}

fn huber_d2(u: f64, delta: f64) -> f64 {
    if u.abs() <= delta {
        1.0 / delta
    } else {
        0.0
    }
}

/// Smoothed Lasso objective `w'Qw + c'w + lambda sum h_delta(w_j - 1/J)`.
struct LassoObjective {
    q: DMatrix<f64>,
    c: DVector<f64>,
    lambda: f64,
    delta: f64,
}

impl SmoothObjective for LassoObjective {
    fn eval(&self, x: &DVector<f64>) -> f64 {
        let j = x.len() as f64;
        let quad = (x.transpose() * &self.q * x)[(0, 0)] + self.c.dot(x);
        let pen: f64 = x.iter().map(|&xi| huber(xi - 1.0 / j, self.delta)).sum();
        quad + self.lambda * pen
    }
    fn grad(&self, x: &DVector<f64>) -> DVector<f64> {
        let j = x.len() as f64;
        let mut g = &self.q * x * 2.0 + &self.c;
        for i in 0..x.len() {
            g[i] += self.lambda * huber_d1(x[i] - 1.0 / j, self.delta);
        }
        g
    }
    fn hess(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let j = x.len() as f64;
        let mut h = &self.q * 2.0;
        for i in 0..x.len() {
            h[(i, i)] += self.lambda * huber_d2(x[i] - 1.0 / j, self.delta);
        }
        h
    }
}

/// Penalized SCM over the simplex: `T0^{-1}||y0 - Yw||^2 + lambda * pen`
/// with `pen = ||w - 1/J||_1` (Lasso, Huber-smoothed) or `||w - 1/J||_2^2`
/// (Ridge). In moment form the fit term is `w' sigma_hat w - 2 upsilon_hat' w`
/// up to a constant.
pub fn solve_penalized(
    m: &MomentPair,
    kind: PenaltyKind,
    lambda: f64,
    tol: f64,
) -> Result<Vec<f64>, BaselineError> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(BaselineError::InvalidInput(format!(
            "lambda must be a finite nonnegative real, got {lambda}"
        )));
    }
    if lambda == 0.0 {
        return Ok(solve_scm(m, tol)?.w);
    }
    let j = m.j;
    match kind {
        PenaltyKind::Ridge => {
            // w'(Sigma + lambda I)w - 2(Upsilon + lambda/J)'w + const
            let mut q = m.sigma_hat.clone();
            for i in 0..j {
                q[(i, i)] += lambda;
            }
            let c = -2.0 * (&m.upsilon_hat + DVector::from_element(j, lambda / j as f64));
            let x = solve_simplex_qp(q, c, tol)?;
            Ok(clamp_simplex(&x, j))
        }
        PenaltyKind::Lasso => {
            // smoothing continuation: re-solve with a sharper Huber knee,
            // warm-starting from the previous solution pulled slightly
            // into the interior
            let a_in = -DMatrix::<f64>::identity(j, j);
            let b_in = DVector::zeros(j);
            let a_eq = DMatrix::from_element(1, j, 1.0);
            let b_eq = DVector::from_element(1, 1.0);
            let mut x = DVector::from_element(j, 1.0 / j as f64);
            for delta in [1e-4, 1e-6, 1e-8] {
                let obj = LassoObjective {
                    q: m.sigma_hat.clone(),
                    c: -2.0 * &m.upsilon_hat,
                    lambda,
                    delta,
                };
                let p = IpmProblem {
                    obj: &obj,
                    a_in: &a_in,
                    b_in: &b_in,
                    a_eq: &a_eq,
                    b_eq: &b_eq,
                };
                let x0 = x.map(|xi| 0.999 * xi + 0.001 / j as f64);
                let opts = IpmOptions {
                    gap_tol: tol * 1e-3,
                    ..IpmOptions::default()
                };
                let r = barrier_minimize(&p, x0, &opts, None)?;
                x = r.x;
            }
            Ok(clamp_simplex(&x, j))
        }
    }
}

/// 20-point logarithmic lambda grid spanning `[1e-4, 1e2]` scaled by the
/// mean diagonal of the moment matrix.
pub fn lambda_grid(m: &MomentPair, n: usize) -> Vec<f64> {
    let scale = m.sigma_hat.diagonal().mean().max(f64::MIN_POSITIVE);
    (0..n)
        .map(|i| {
            let f = if n == 1 { 0.5 } else { i as f64 / (n - 1) as f64 };
            scale * 10f64.powf(-4.0 + 6.0 * f)
        })
        .collect()
}

/// Forward-selection PDA fit: greedily selected control indices (0-based
/// within the donor pool) and the unconstrained OLS coefficients.
#[derive(Debug, Clone)]
pub struct FspdaFit {
    pub selected: Vec<usize>,
    pub coefficients: Vec<f64>,
    pub intercept: f64,
    /// In-sample residual sum of squares at each selection step.
    pub rss_path: Vec<f64>,
}

impl FspdaFit {
    /// Predicted counterfactual at period `t`.
    pub fn predict(&self, panel: &PanelData, t: usize) -> f64 {
        let controls = panel.controls_at(t);
        self.intercept
            + self
                .selected
                .iter()
                .zip(&self.coefficients)
                .map(|(&j, &c)| c * controls[j])
                .sum::<f64>()
    }
}

/// OLS of y on an intercept plus the chosen control columns over the
/// pre-treatment window; returns (intercept, coefficients, rss).
fn ols_fit(
    panel: &PanelData,
    chosen: &[usize],
) -> Result<(f64, Vec<f64>, f64), BaselineError> {
    let t0 = panel.t0();
    let k = chosen.len();
    let mut x = DMatrix::zeros(t0, k + 1);
    let mut y = DVector::zeros(t0);
    for t in 0..t0 {
        x[(t, 0)] = 1.0;
        let controls = panel.controls_at(t);
        for (c, &jidx) in chosen.iter().enumerate() {
            x[(t, c + 1)] = controls[jidx];
        }
        y[t] = panel.treated(t);
    }
    let svd = x.clone().svd(true, true);
    let smax = svd.singular_values.amax();
    if smax == 0.0 || svd.singular_values.min() < 1e-10 * smax {
        return Err(BaselineError::RankDeficientDesign);
    }
    let beta = svd
        .solve(&y, 0.0)
        .map_err(|e| BaselineError::NumericalFailure(e.to_string()))?;
    let resid = &y - &x * &beta;
    let rss = resid.dot(&resid);
    Ok((beta[0], beta.iter().skip(1).cloned().collect(), rss))
}

/// Greedy forward selection of controls by residual-sum-of-squares
/// reduction, stopped by BIC = T0 log(RSS/T0) + k log(T0) or `max_terms`.
pub fn solve_fspda(panel: &PanelData, max_terms: usize) -> Result<FspdaFit, BaselineError> {
    let j = panel.num_controls();
    let t0 = panel.t0();
    if max_terms == 0 || max_terms > j.min(t0.saturating_sub(2)) {
        return Err(BaselineError::InvalidInput(format!(
            "max_terms must lie in [1, min(J, T0-2)] = [1, {}], got {max_terms}",
            j.min(t0.saturating_sub(2))
        )));
    }
    let t0f = t0 as f64;
    let bic = |rss: f64, k: usize| t0f * (rss.max(1e-300) / t0f).ln() + k as f64 * t0f.ln();

    let mut chosen: Vec<usize> = Vec::new();
    let mut fit = ols_fit(panel, &chosen)?;
    let mut best_bic = bic(fit.2, 0);
    let mut rss_path = vec![fit.2];

    while chosen.len() < max_terms {
        let mut best: Option<(usize, (f64, Vec<f64>, f64))> = None;
        for cand in 0..j {
            if chosen.contains(&cand) {
                continue;
            }
            let mut trial = chosen.clone();
            trial.push(cand);
            // collinear candidates are skipped, not fatal
            if let Ok(f) = ols_fit(panel, &trial) {
                if best.as_ref().map(|(_, b)| f.2 < b.2).unwrap_or(true) {
                    best = Some((cand, f));
                }
            }
        }
        let Some((cand, f)) = best else {
            break;
        };
        let cand_bic = bic(f.2, chosen.len() + 1);
        if cand_bic >= best_bic && !chosen.is_empty() {
            break;
        }
        if cand_bic < best_bic {
            best_bic = cand_bic;
        }
        chosen.push(cand);
        rss_path.push(f.2);
        fit = f;
    }
    if chosen.is_empty() {
        // BIC rejected even the best single regressor; keep it anyway so the
        // method always produces a usable fit (one term minimum).
        let mut best: Option<(usize, (f64, Vec<f64>, f64))> = None;
        for cand in 0..j {
            if let Ok(f) = ols_fit(panel, &[cand]) {
                if best.as_ref().map(|(_, b)| f.2 < b.2).unwrap_or(true) {
                    best = Some((cand, f));
                }
            }
        }
        let (cand, f) = best.ok_or(BaselineError::RankDeficientDesign)?;
        chosen.push(cand);
        rss_path.push(f.2);
        fit = f;
    }
    Ok(FspdaFit {
        selected: chosen,
        intercept: fit.0,
        coefficients: fit.1,
        rss_path,
    })
}
