//! The g-SCM-relaxation solver: minimize `sum_j g(w_j)` over the simplex
//! subject to the relaxed first-order-condition band
//! `|| sigma_hat w - upsilon_hat + gamma 1 ||_inf <= eta`.
//!
//! The band is rewritten as 2J affine inequalities in (w, gamma) and solved
//! with the log-barrier machinery in [`crate::ipm`]. Three regimes:
//!
//! * `eta >= eta_bar`: equal weights are feasible and minimize any symmetric
//!   strictly convex separable objective, so the answer is `1/J` in closed
//!   form.
//! * `0 < eta < eta_bar`: a phase-I min-s program produces a strictly
//!   feasible starting point (or an infeasibility certificate), then the
//!   barrier method solves the band-constrained program.
//! * `eta = 0`: the band collapses to equalities; the (typically
//!   rank-deficient) system is reduced by SVD and the barrier runs over the
//!   nonnegativity constraints only, started from a Chebyshev-center point.

use crate::divergence::{divergence_value, Divergence, DivergenceError};
use crate::ipm::{
    barrier_minimize, nnls, IpmError, IpmOptions, IpmProblem, LinearObjective, SmoothObjective,
};
use crate::moments::{eta_bar, MomentPair};
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("feasible set is empty: eta = {eta:.6e} < eta_min = {} ", .certificate.eta_min)]
    InfeasibleRelaxation {
        eta: f64,
        certificate: FeasibilityCertificate,
    },
    #[error("numerical failure: {0}")]
    NumericalFailure(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Divergence(#[from] DivergenceError),
}

impl From<IpmError> for SolverError {
    fn from(e: IpmError) -> Self {
        SolverError::NumericalFailure(e.to_string())
    }
}

/// Result of the auxiliary min-s feasibility program.
#[derive(Debug, Clone)]
pub struct FeasibilityCertificate {
    /// Smallest band radius for which the feasible set is nonempty.
    pub eta_min: f64,
    /// Weights attaining (within solver tolerance) the radius `eta_min`.
    pub witness_w: Vec<f64>,
    pub witness_gamma: f64,
    /// Whether the queried radius admits a feasible point.
    pub feasible: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Converged,
    Infeasible,
    MaxIterations,
}

impl SolveStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            SolveStatus::Converged => "converged",
            SolveStatus::Infeasible => "infeasible",
            SolveStatus::MaxIterations => "max_iterations",
        }
    }
}

/// Independently recomputed KKT residuals for a candidate solution.
#[derive(Debug, Clone, Copy)]
pub struct KktReport {
    /// Infinity norm of the Lagrangian gradient after fitting nonnegative
    /// multipliers to the band faces and nonnegativity constraints.
    pub stationarity: f64,
    /// Worst violation of the simplex and band constraints.
    pub primal: f64,
    /// Largest product multiplier x slack.
    pub complementary_slackness: f64,
    pub max_residual: f64,
    pub passed: bool,
}

#[derive(Debug, Clone)]
pub struct RelaxationSolution {
    /// Weights on the simplex. Under L2, entries within 1e-10 of zero are
    /// reported as exact zeros (the raw iterate is kept in `raw_w`).
    pub w: Vec<f64>,
    pub gamma: f64,
    pub eta: f64,
    /// `sum_j g(w_j)`.
    pub objective: f64,
    pub kkt: KktReport,
    pub status: SolveStatus,
    /// Total Newton steps taken.
    pub iterations: usize,
    pub divergence: Divergence,
    /// The unclamped interior-point iterate.
    pub raw_w: Vec<f64>,
}

impl RelaxationSolution {
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "w": self.w,
            "gamma": self.gamma,
            "eta": self.eta,
            "objective": self.objective,
            "status": self.status.as_str(),
            "kkt_max_residual": self.kkt.max_residual,
        })
    }
}

/// Separable objective `sum_{i < nw} g(x_i)` over a possibly longer variable
/// vector (the trailing coordinates — gamma — enter the objective linearly
/// with coefficient zero).
struct SeparableObjective {
    d: Divergence,
    nw: usize,
}

impl SmoothObjective for SeparableObjective {
    fn eval(&self, x: &DVector<f64>) -> f64 {
        let mut s = 0.0;
        for i in 0..self.nw {
            let xi = x[i];
            // Outside L2, keep the line search away from nonpositive
            // weights where gradients or values degenerate.
            if xi <= 0.0 && self.d != Divergence::L2 {
                return f64::INFINITY;
            }
            s += self.d.g(xi);
        }
        s
    }
    fn grad(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(x.len(), |i, _| {
            if i < self.nw {
                self.d.dg(x[i])
            } else {
                0.0
            }
        })
    }
    fn hess(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let mut h = DMatrix::zeros(x.len(), x.len());
        for i in 0..self.nw {
            h[(i, i)] = self.d.d2g(x[i]);
        }
        h
    }
}

fn validate(m: &MomentPair, d: &Divergence, eta: f64, tol: f64) -> Result<(), SolverError> {
    if !(eta >= 0.0) || !eta.is_finite() {
        return Err(SolverError::InvalidInput(format!(
            "eta must be a finite nonnegative real, got {eta}"
        )));
    }
    if !(tol > 0.0 && tol <= 1e-2) {
        return Err(SolverError::InvalidInput(format!(
            "tol must lie in (0, 1e-2], got {tol}"
        )));
    }
    if let Divergence::CressieRead(g) = d {
        if !(-1.0..=1.0).contains(g) || g.is_nan() {
            return Err(DivergenceError::InvalidParameter(*g).into());
        }
    }
    if m.j == 0 {
        return Err(SolverError::InvalidInput("empty donor pool".into()));
    }
    Ok(())
}

/// Solves the g-SCM-relaxation program at band radius `eta`.
pub fn solve_relaxation(
    m: &MomentPair,
    d: &Divergence,
    eta: f64,
    tol: f64,
) -> Result<RelaxationSolution, SolverError> {
    solve_relaxation_custom(m, d, eta, tol, 1.0, 10.0)
}

/// Same program with explicit barrier parameters; used by tests to confirm
/// that different central paths reach the same (unique) minimizer.
pub(crate) fn solve_relaxation_custom(
    m: &MomentPair,
    d: &Divergence,
    eta: f64,
    tol: f64,
    t_init: f64,
    mu: f64,
) -> Result<RelaxationSolution, SolverError> {
    validate(m, d, eta, tol)?;
    let j = m.j;
    let eb = eta_bar(m);

    // Equal weights are feasible at eta >= eta_bar and minimize any
    // symmetric strictly convex separable objective over the simplex.
    if eta >= eb.eta_bar {
        let w = vec![1.0 / j as f64; j];
        return finish(m, d, eta, tol, w, eb.gamma_star, 0, true);
    }

    if eta == 0.0 {
        return solve_equality(m, d, tol, t_init, mu);
    }

    // Phase I: find a strictly feasible start (or certify infeasibility).
    let p1 = phase_one(m, Some(eta), tol, &eb)?;
    let v = m.band_residual(&p1.w, p1.gamma);
    let s_true = v.amax();
    if s_true >= eta {
        let certificate = FeasibilityCertificate {
            eta_min: p1.s_opt,
            witness_w: p1.w.clone(),
            witness_gamma: p1.gamma,
            feasible: false,
        };
        return Err(SolverError::InfeasibleRelaxation { eta, certificate });
    }

    // Phase II: barrier solve of the band-constrained program in (w, gamma).
    let n = j + 1;
    let mut a_in = DMatrix::zeros(3 * j, n);
    let mut b_in = DVector::zeros(3 * j);
    for r in 0..j {
        for c in 0..j {
            a_in[(r, c)] = m.sigma_hat[(r, c)];
            a_in[(j + r, c)] = -m.sigma_hat[(r, c)];
        }
        a_in[(r, j)] = 1.0;
        a_in[(j + r, j)] = -1.0;
        a_in[(2 * j + r, r)] = -1.0;
        b_in[r] = m.upsilon_hat[r] + eta;
        b_in[j + r] = eta - m.upsilon_hat[r];
    }
    let a_eq = {
        let mut a = DMatrix::zeros(1, n);
        for c in 0..j {
            a[(0, c)] = 1.0;
        }
        a
    };
    let b_eq = DVector::from_element(1, 1.0);

    let obj = SeparableObjective { d: *d, nw: j };
    let p = IpmProblem {
        obj: &obj,
        a_in: &a_in,
        b_in: &b_in,
        a_eq: &a_eq,
        b_eq: &b_eq,
    };
    let mut x0 = DVector::zeros(n);
    for i in 0..j {
        x0[i] = p1.w[i];
    }
    x0[j] = p1.gamma;
    let opts = IpmOptions {
        gap_tol: tol * 1e-3,
        t_init,
        mu,
        ..IpmOptions::default()
    };
    let r = barrier_minimize(&p, x0, &opts, None)?;
    let w: Vec<f64> = (0..j).map(|i| r.x[i]).collect();
    finish(m, d, eta, tol, w, r.x[j], r.newton_steps, r.converged)
}

struct PhaseOne {
    w: Vec<f64>,
    gamma: f64,
    /// Value of the s-variable at the final iterate (upper bound on eta_min;
    /// equal to eta_min within the barrier gap when run to convergence).
    s_opt: f64,
}

/// Min-s linear program over (w, gamma, s): the auxiliary feasibility
/// problem. With `eta_target` set, the run stops as soon as the iterate is
/// comfortably inside the target band.
fn phase_one(
    m: &MomentPair,
    eta_target: Option<f64>,
    tol: f64,
    eb: &crate::moments::EtaBar,
) -> Result<PhaseOne, SolverError> {
    let j = m.j;
    let n = j + 2;
    let mut a_in = DMatrix::zeros(3 * j, n);
    let mut b_in = DVector::zeros(3 * j);
    for r in 0..j {
        for c in 0..j {
            a_in[(r, c)] = m.sigma_hat[(r, c)];
            a_in[(j + r, c)] = -m.sigma_hat[(r, c)];
        }
        a_in[(r, j)] = 1.0;
        a_in[(j + r, j)] = -1.0;
        a_in[(r, j + 1)] = -1.0;
        a_in[(j + r, j + 1)] = -1.0;
        a_in[(2 * j + r, r)] = -1.0;
        b_in[r] = m.upsilon_hat[r];
        b_in[j + r] = -m.upsilon_hat[r];
    }
    let a_eq = {
        let mut a = DMatrix::zeros(1, n);
        for c in 0..j {
            a[(0, c)] = 1.0;
        }
        a
    };
    let b_eq = DVector::from_element(1, 1.0);
    let obj = LinearObjective {
        c: DVector::from_fn(n, |i, _| if i == n - 1 { 1.0 } else { 0.0 }),
    };
    let p = IpmProblem {
        obj: &obj,
        a_in: &a_in,
        b_in: &b_in,
        a_eq: &a_eq,
        b_eq: &b_eq,
    };
    let mut x0 = DVector::from_element(n, 1.0 / j as f64);
    x0[j] = eb.gamma_star;
    x0[j + 1] = eb.eta_bar + 1.0;

    let opts = IpmOptions {
        gap_tol: (1e-10 * (1.0 + eb.eta_bar)).min(tol * 1e-2),
        ..IpmOptions::default()
    };
    let exit = eta_target.map(|eta| {
        let thresh = eta * (1.0 - 1e-3);
        move |x: &DVector<f64>| x[n - 1] < thresh
    });
    let r = match &exit {
        Some(cb) => barrier_minimize(&p, x0, &opts, Some(cb))?,
        None => barrier_minimize(&p, x0, &opts, None)?,
    };
    if !r.converged && !r.early_exit {
        return Err(SolverError::NumericalFailure(
            "phase-I feasibility program did not converge".into(),
        ));
    }
    Ok(PhaseOne {
        w: (0..j).map(|i| r.x[i]).collect(),
        gamma: r.x[j],
        s_opt: r.x[j + 1],
    })
}

/// Solves the auxiliary program min s over (w, gamma, s) with w on the
/// simplex and `|| sigma_hat w - upsilon_hat + gamma 1 ||_inf <= s`;
/// the queried `eta` is feasible iff it is at least the optimal s.
pub fn check_feasibility(m: &MomentPair, eta: f64) -> Result<FeasibilityCertificate, SolverError> {
    if !(eta >= 0.0) {
        return Err(SolverError::InvalidInput(format!(
            "eta must be nonnegative, got {eta}"
        )));
    }
    let eb = eta_bar(m);
    let p1 = phase_one(m, None, 1e-8, &eb)?;
    let v = m.band_residual(&p1.w, p1.gamma);
    let eta_min = v.amax();
    Ok(FeasibilityCertificate {
        feasible: eta + 1e-9 * (1.0 + eb.eta_bar) >= eta_min,
        eta_min,
        witness_w: p1.w,
        witness_gamma: p1.gamma,
    })
}

/// The eta = 0 program: band equalities `sigma_hat w - upsilon_hat + gamma 1
/// = 0` plus the simplex. The stacked equality system is rank-reduced by SVD
/// (the moment matrix is typically singular here), a Chebyshev-center LP
/// finds a strictly positive starting point, and the barrier runs over the
/// nonnegativity constraints only.
fn solve_equality(
    m: &MomentPair,
    d: &Divergence,
    tol: f64,
    t_init: f64,
    mu: f64,
) -> Result<RelaxationSolution, SolverError> {
    let j = m.j;
    let n = j + 1;
    // E = [sigma_hat 1; 1' 0], f = [upsilon_hat; 1].
    let mut e = DMatrix::zeros(n, n);
    e.view_mut((0, 0), (j, j)).copy_from(&m.sigma_hat);
    for r in 0..j {
        e[(r, j)] = 1.0;
        e[(j, r)] = 1.0;
    }
    let mut f = DVector::zeros(n);
    f.rows_mut(0, j).copy_from(&m.upsilon_hat);
    f[j] = 1.0;

    // E is symmetric; the symmetric eigendecomposition is markedly more
    // robust than the general SVD on rank-deficient inputs.
    let eig = e.clone().symmetric_eigen();
    let emax = eig.eigenvalues.iter().fold(0.0f64, |a, &x| a.max(x.abs()));
    let cutoff = 1e-12 * emax;
    // indices of range (|lambda| > cutoff) and null directions
    let range_idx: Vec<usize> = (0..n).filter(|&i| eig.eigenvalues[i].abs() > cutoff).collect();
    let null_idx: Vec<usize> = (0..n).filter(|&i| eig.eigenvalues[i].abs() <= cutoff).collect();
    let rank = range_idx.len();
    let mut x_p = DVector::zeros(n);
    for &k in &range_idx {
        let qk = eig.eigenvectors.column(k);
        x_p += qk * (qk.dot(&f) / eig.eigenvalues[k]);
    }

    // Consistency of the affine system (ignoring nonnegativity).
    let resid = (&e * &x_p - &f).amax();
    if resid > 1e-8 * (1.0 + f.amax()) {
        let certificate = check_feasibility(m, 0.0)?;
        return Err(SolverError::InfeasibleRelaxation {
            eta: 0.0,
            certificate,
        });
    }

    // Orthonormal null-space basis of E; the barrier below works entirely
    // in these coordinates so the equalities hold by construction.
    let nn = n - rank;
    let null = DMatrix::from_fn(n, nn, |r, c| eig.eigenvectors[(r, null_idx[c])]);

    let z_start = if nn == 0 {
        // The affine system pins (w, gamma) uniquely.
        let wmin = (0..j).map(|i| x_p[i]).fold(f64::INFINITY, f64::min);
        if wmin < -1e-10 {
            let certificate = check_feasibility(m, 0.0)?;
            return Err(SolverError::InfeasibleRelaxation {
                eta: 0.0,
                certificate,
            });
        }
        let w: Vec<f64> = (0..j).map(|i| x_p[i].max(0.0)).collect();
        return finish(m, d, 0.0, tol, w, x_p[j], 0, true);
    } else {
        // Chebyshev-style LP in y = (z, margin): maximize the smallest
        // weight of x_p + N z. A positive optimum yields an interior start.
        let ny = nn + 1;
        let mut a_in = DMatrix::zeros(j, ny);
        let mut b_in = DVector::zeros(j);
        for r in 0..j {
            for c in 0..nn {
                a_in[(r, c)] = -null[(r, c)];
            }
            a_in[(r, nn)] = 1.0;
            b_in[r] = x_p[r];
        }
        let obj = LinearObjective {
            c: DVector::from_fn(ny, |i, _| if i == nn { -1.0 } else { 0.0 }),
        };
        let a_eq0 = DMatrix::zeros(0, ny);
        let b_eq0 = DVector::zeros(0);
        let p = IpmProblem {
            obj: &obj,
            a_in: &a_in,
            b_in: &b_in,
            a_eq: &a_eq0,
            b_eq: &b_eq0,
        };
        let mut y0 = DVector::zeros(ny);
        y0[nn] = (0..j).map(|i| x_p[i]).fold(f64::INFINITY, f64::min) - 1.0;
        let interior = 1e-2 / j as f64;
        let cb = move |y: &DVector<f64>| y[nn] > interior;
        let r = barrier_minimize(&p, y0, &IpmOptions::default(), Some(&cb))?;
        let margin = r.x[nn];
        if margin <= 1e-10 {
            if r.converged {
                // The affine system is consistent but admits no strictly
                // positive weights; minimizing over a lower-dimensional face
                // is out of scope for the barrier scheme.
                return Err(SolverError::NumericalFailure(format!(
                    "feasible set at eta = 0 has no strictly positive point (margin {margin:.3e})"
                )));
            }
            return Err(SolverError::NumericalFailure(
                "interior-start LP for eta = 0 did not converge".into(),
            ));
        }
        r.x.rows(0, nn).into_owned()
    };

    // Barrier over w > 0 in null-space coordinates x = x_p + N z. Working
    // in z keeps every iterate exactly on the equality manifold; a KKT
    // formulation loses the equalities to roundoff once the barrier
    // parameter dwarfs the constraint rows.
    let obj = ReducedObjective {
        inner: SeparableObjective { d: *d, nw: j },
        x_p: &x_p,
        null: &null,
    };
    // w_i > 0  <=>  -(N z)_i <= x_p_i
    let a_in = DMatrix::from_fn(j, nn, |r, c| -null[(r, c)]);
    let b_in = DVector::from_fn(j, |r, _| x_p[r]);
    let p = IpmProblem {
        obj: &obj,
        a_in: &a_in,
        b_in: &b_in,
        a_eq: &DMatrix::zeros(0, nn),
        b_eq: &DVector::zeros(0),
    };
    let opts = IpmOptions {
        gap_tol: tol * 1e-3,
        t_init,
        mu,
        ..IpmOptions::default()
    };
    let r = barrier_minimize(&p, z_start, &opts, None)?;
    let x = &x_p + &null * &r.x;
    let w: Vec<f64> = (0..j).map(|i| x[i]).collect();
    finish(m, d, 0.0, tol, w, x[j], r.newton_steps, r.converged)
}

/// Objective composed with the affine map `x = x_p + N z`.
struct ReducedObjective<'a> {
    inner: SeparableObjective,
    x_p: &'a DVector<f64>,
    null: &'a DMatrix<f64>,
}

impl SmoothObjective for ReducedObjective<'_> {
    fn eval(&self, z: &DVector<f64>) -> f64 {
        self.inner.eval(&(self.x_p + self.null * z))
    }
    fn grad(&self, z: &DVector<f64>) -> DVector<f64> {
        self.null.transpose() * self.inner.grad(&(self.x_p + self.null * z))
    }
    fn hess(&self, z: &DVector<f64>) -> DMatrix<f64> {
        let x = self.x_p + self.null * z;
        self.null.transpose() * self.inner.hess(&x) * self.null
    }
}

/// Newton refinement on the active-constraint equality system. The barrier
/// iterate is accurate to roughly the square root of the duality gap near
/// boundary solutions; re-solving the first-order conditions with the
/// active set fixed recovers full floating-point accuracy. The caller keeps
/// the refined point only if the independent KKT check improves.
fn polish_active_set(
    m: &MomentPair,
    d: &Divergence,
    eta: f64,
    w: &[f64],
    gamma: f64,
) -> Option<(Vec<f64>, f64)> {
    let j = m.j;
    let v = m.band_residual(w, gamma);
    let scale = 1.0 + m.sigma_hat.amax() + m.upsilon_hat.amax() + eta;
    let act = 1e-5 * scale;

    let pinned: Vec<bool> = if d.log_domain() {
        vec![false; j]
    } else {
        w.iter().map(|&x| x <= 1e-6).collect()
    };
    let free: Vec<usize> = (0..j).filter(|&i| !pinned[i]).collect();
    let nf = free.len();
    if nf == 0 {
        return None;
    }

    // Rows: active band faces and the simplex equality, over (w_free, gamma).
    let mut rows: Vec<(DVector<f64>, f64)> = Vec::new();
    for a in 0..j {
        if eta - v[a] <= act {
            let mut r = DVector::zeros(nf + 1);
            for (c, &i) in free.iter().enumerate() {
                r[c] = m.sigma_hat[(a, i)];
            }
            r[nf] = 1.0;
            rows.push((r, m.upsilon_hat[a] + eta));
        }
        if eta + v[a] <= act {
            let mut r = DVector::zeros(nf + 1);
            for (c, &i) in free.iter().enumerate() {
                r[c] = m.sigma_hat[(a, i)];
            }
            r[nf] = 1.0;
            rows.push((r, m.upsilon_hat[a] - eta));
        }
    }
    {
        let mut r = DVector::zeros(nf + 1);
        for c in 0..nf {
            r[c] = 1.0;
        }
        rows.push((r, 1.0));
    }
    let nr = rows.len();
    let a_full = DMatrix::from_fn(nr, nf + 1, |r, c| rows[r].0[c]);
    let b_full = DVector::from_fn(nr, |r, _| rows[r].1);

    // Rank-reduce the (often redundant) active system through the Gram
    // matrix: the symmetric eigendecomposition is robust where the general
    // SVD can silently misconverge on rank-deficient inputs, and the
    // residual checks below catch any precision lost to squaring.
    let gram = a_full.transpose() * &a_full;
    let gb = a_full.transpose() * &b_full;
    let eig = gram.symmetric_eigen();
    let emax = eig.eigenvalues.iter().fold(0.0f64, |a, &x| a.max(x.abs()));
    if emax == 0.0 {
        return None;
    }
    let cutoff = 1e-20 * emax;
    let range_idx: Vec<usize> = (0..nf + 1)
        .filter(|&i| eig.eigenvalues[i] > cutoff)
        .collect();
    let rank = range_idx.len();
    let mut x_ls = DVector::zeros(nf + 1);
    for &k in &range_idx {
        let vk = eig.eigenvectors.column(k);
        x_ls += vk * (vk.dot(&gb) / eig.eigenvalues[k]);
    }
    if (&a_full * &x_ls - &b_full).amax() > 1e-8 * scale {
        return None;
    }
    // orthonormal row-space basis; rhs expressed through the consistent
    // least-squares solution
    let a_red = DMatrix::from_fn(rank, nf + 1, |r, c| eig.eigenvectors[(c, range_idx[r])]);
    let b_red = &a_red * &x_ls;

    let mut x = DVector::zeros(nf + 1);
    for (c, &i) in free.iter().enumerate() {
        x[c] = w[i];
    }
    x[nf] = gamma;

    for _ in 0..50 {
        let mut grad = DVector::zeros(nf + 1);
        let mut h = DMatrix::zeros(nf + 1, nf + 1);
        for c in 0..nf {
            if d.log_domain() && x[c] <= 0.0 {
                return None;
            }
            grad[c] = d.dg(x[c].max(1e-12));
            h[(c, c)] = d.d2g(x[c].max(1e-12)) + 1e-14;
        }
        h[(nf, nf)] = 1e-14;
        let dim = nf + 1 + rank;
        let mut kkt = DMatrix::zeros(dim, dim);
        kkt.view_mut((0, 0), (nf + 1, nf + 1)).copy_from(&h);
        kkt.view_mut((0, nf + 1), (nf + 1, rank))
            .copy_from(&a_red.transpose());
        kkt.view_mut((nf + 1, 0), (rank, nf + 1)).copy_from(&a_red);
        let mut rhs = DVector::zeros(dim);
        rhs.rows_mut(0, nf + 1).copy_from(&(-&grad));
        rhs.rows_mut(nf + 1, rank)
            .copy_from(&(&b_red - &a_red * &x));
        let sol = kkt
            .clone()
            .lu()
            .solve(&rhs)
            .or_else(|| kkt.full_piv_lu().solve(&rhs))?;
        let dx = sol.rows(0, nf + 1).into_owned();
        // keep log-domain iterates strictly positive
        let mut alpha = 1.0f64;
        if d.log_domain() {
            for c in 0..nf {
                if dx[c] < 0.0 {
                    alpha = alpha.min(-0.9 * x[c] / dx[c]).max(0.0);
                }
            }
        }
        x += &dx * alpha;
        if dx.amax() * alpha <= 1e-14 * (1.0 + x.amax()) {
            break;
        }
    }

    if (&a_red * &x - &b_red).amax() > 1e-9 * scale {
        return None;
    }
    let mut w_out = vec![0.0; j];
    for (c, &i) in free.iter().enumerate() {
        let wi = x[c];
        if wi < -1e-9 || (d.log_domain() && wi <= 0.0) {
            return None;
        }
        w_out[i] = wi.max(0.0);
    }
    Some((w_out, x[nf]))
}

/// Assembles the solution: active-set polish, L2 zero-clamping, objective,
/// KKT self-check.
fn finish(
    m: &MomentPair,
    d: &Divergence,
    eta: f64,
    tol: f64,
    raw_w: Vec<f64>,
    gamma: f64,
    iterations: usize,
    converged: bool,
) -> Result<RelaxationSolution, SolverError> {
    let base = assemble(m, d, eta, tol, raw_w, gamma, iterations, converged)?;
    if let Some((pw, pg)) = polish_active_set(m, d, eta, &base.raw_w, base.gamma) {
        if let Ok(polished) = assemble(m, d, eta, tol, pw, pg, iterations, converged) {
            if polished.kkt.max_residual <= base.kkt.max_residual {
                return Ok(polished);
            }
        }
    }
    Ok(base)
}

fn assemble(
    m: &MomentPair,
    d: &Divergence,
    eta: f64,
    tol: f64,
    raw_w: Vec<f64>,
    gamma: f64,
    iterations: usize,
    converged: bool,
) -> Result<RelaxationSolution, SolverError> {
    let w = if *d == Divergence::L2 {
        let mut w: Vec<f64> = raw_w
            .iter()
            .map(|&x| if x.abs() <= 1e-10 { 0.0 } else { x })
            .collect();
        let s: f64 = w.iter().sum();
        if s > 0.0 {
            for x in &mut w {
                *x /= s;
            }
        }
        w
    } else {
        raw_w.clone()
    };
    let objective = divergence_value(d, &w)?;
    let mut sol = RelaxationSolution {
        w,
        gamma,
        eta,
        objective,
        kkt: KktReport {
            stationarity: f64::INFINITY,
            primal: f64::INFINITY,
            complementary_slackness: f64::INFINITY,
            max_residual: f64::INFINITY,
            passed: false,
        },
        status: if converged {
            SolveStatus::Converged
        } else {
            SolveStatus::MaxIterations
        },
        iterations,
        divergence: *d,
        raw_w,
    };
    sol.kkt = verify_kkt(&sol, m, tol);
    Ok(sol)
}

/// Recomputes the KKT residuals of a candidate solution from scratch:
/// primal feasibility, stationarity of the Lagrangian (with multipliers
/// refit by nonnegative least squares over the band faces, nonnegativity
/// constraints, and the free simplex multiplier), and complementary
/// slackness. Independent of the solve path.
pub fn verify_kkt(sol: &RelaxationSolution, m: &MomentPair, tol: f64) -> KktReport {
    let j = m.j;
    let w = &sol.w;
    let v = m.band_residual(w, sol.gamma);

    let sum_err = (w.iter().sum::<f64>() - 1.0).abs();
    let neg = w.iter().fold(0.0f64, |a, &x| a.max(-x));
    let band = v.iter().fold(0.0f64, |a, &x| a.max(x.abs() - sol.eta));
    let primal = sum_err.max(neg).max(band.max(0.0));

    // Stationarity target: -grad of the objective, over variables (w, gamma).
    let mut b = DVector::zeros(j + 1);
    for i in 0..j {
        b[i] = -sol.divergence.dg(w[i].max(if sol.divergence.log_domain() {
            f64::MIN_POSITIVE
        } else {
            0.0
        }));
    }

    // Multiplier columns for ACTIVE constraints only (complementary
    // slackness sets inactive multipliers to zero): band faces with slack
    // within act_tol, binding nonnegativity constraints, and the sign-split
    // free multiplier of the simplex equality.
    let fit = |act_tol: f64| -> (f64, f64) {
        let mut cols: Vec<DVector<f64>> = Vec::new();
        // (slack, index into cols) pairs for the complementarity check
        let mut active: Vec<(f64, usize)> = Vec::new();
        for i in 0..j {
            let s_plus = (sol.eta - v[i]).max(0.0);
            let s_minus = (sol.eta + v[i]).max(0.0);
            if s_plus <= act_tol {
                let mut c = DVector::zeros(j + 1);
                for rr in 0..j {
                    c[rr] = m.sigma_hat[(rr, i)];
                }
                c[j] = 1.0;
                active.push((s_plus, cols.len()));
                cols.push(c);
            }
            if s_minus <= act_tol {
                let mut c = DVector::zeros(j + 1);
                for rr in 0..j {
                    c[rr] = -m.sigma_hat[(rr, i)];
                }
                c[j] = -1.0;
                active.push((s_minus, cols.len()));
                cols.push(c);
            }
            if w[i].abs() <= act_tol {
                let mut c = DVector::zeros(j + 1);
                c[i] = -1.0;
                active.push((w[i].max(0.0), cols.len()));
                cols.push(c);
            }
        }
        let mut ones = DVector::zeros(j + 1);
        for rr in 0..j {
            ones[rr] = 1.0;
        }
        cols.push(ones.clone());
        cols.push(-ones);
        let a = DMatrix::from_columns(&cols);
        let lam = nnls(&a, &b, 10 * cols.len() + 100);
        let stationarity = (&a * &lam - &b).amax();
        let mut comp = 0.0f64;
        for &(slack, idx) in &active {
            comp = comp.max(lam[idx] * slack);
        }
        (stationarity, comp)
    };
    // A tight admission threshold avoids spurious complementarity residuals
    // from multipliers assigned to barely-active constraints; the loose
    // threshold covers iterates whose active set is only resolved to
    // sqrt(gap) accuracy. Report the better of the two fits.
    let scale = 1.0 + m.sigma_hat.amax() + m.upsilon_hat.amax();
    let (s_tight, c_tight) = fit(1e-9 * scale);
    let (stationarity, comp) = if s_tight.max(c_tight) <= tol {
        (s_tight, c_tight)
    } else {
        let (s_loose, c_loose) = fit(1e-3 * scale);
        if s_tight.max(c_tight) <= s_loose.max(c_loose) {
            (s_tight, c_tight)
        } else {
            (s_loose, c_loose)
        }
    };

    let max_residual = primal.max(stationarity).max(comp);
    KktReport {
        stationarity,
        primal,
        complementary_slackness: comp,
        max_residual,
        passed: max_residual <= tol,
    }
}
