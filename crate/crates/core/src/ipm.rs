//! Small dense barrier method for smooth convex programs with affine
//! inequalities and equalities. Every solver in this crate reduces to
//!
//! ```text
//!     minimize    f(x)
//!     subject to  A_in x <= b_in,   A_eq x = b_eq
//! ```
//!
//! with a log-barrier on the inequalities and equality-constrained Newton
//! steps. Problems are small (a few hundred variables), so everything is
//! dense and factorized from scratch each step.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IpmError {
    #[error("starting point is not strictly feasible (slack {0} at constraint {1})")]
    InfeasibleStart(f64, usize),
    #[error("numerical failure: {0}")]
    NumericalFailure(String),
}

/// Smooth convex objective with dense derivatives.
pub trait SmoothObjective {
    fn eval(&self, x: &DVector<f64>) -> f64;
    fn grad(&self, x: &DVector<f64>) -> DVector<f64>;
    fn hess(&self, x: &DVector<f64>) -> DMatrix<f64>;
}

/// `x' Q x + c' x` with symmetric `Q`.
pub struct QuadObjective {
    pub q: DMatrix<f64>,
    pub c: DVector<f64>,
}

impl SmoothObjective for QuadObjective {
    fn eval(&self, x: &DVector<f64>) -> f64 {
        (x.transpose() * &self.q * x)[(0, 0)] + self.c.dot(x)
    }
    fn grad(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.q * x * 2.0 + &self.c
    }
    fn hess(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        &self.q * 2.0
    }
}

/// `c' x`.
pub struct LinearObjective {
    pub c: DVector<f64>,
}

impl SmoothObjective for LinearObjective {
    fn eval(&self, x: &DVector<f64>) -> f64 {
        self.c.dot(x)
    }
    fn grad(&self, _x: &DVector<f64>) -> DVector<f64> {
        self.c.clone()
    }
    fn hess(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::zeros(self.c.len(), self.c.len())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct IpmOptions {
    /// Target duality gap `m / t`.
    pub gap_tol: f64,
    pub max_barrier_stages: usize,
    pub max_newton_steps: usize,
    pub t_init: f64,
    /// Barrier reduction factor.
    pub mu: f64,
}

impl Default for IpmOptions {
    fn default() -> Self {
        IpmOptions {
            gap_tol: 1e-9,
            max_barrier_stages: 200,
            max_newton_steps: 50,
            t_init: 1.0,
            mu: 10.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct IpmResult {
    pub x: DVector<f64>,
    /// Multipliers for the inequality rows, `1 / (t s_i)`.
    pub ineq_duals: DVector<f64>,
    /// Multipliers for the equality rows.
    pub eq_duals: DVector<f64>,
    /// Final barrier gap `m / t`.
    pub gap: f64,
    pub newton_steps: usize,
    /// Stationarity residual of the final central-path point.
    pub stationarity: f64,
    /// True when the run stopped on the caller's early-exit predicate
    /// rather than on the gap criterion.
    pub early_exit: bool,
    /// False when the stage budget ran out before reaching the target gap.
    pub converged: bool,
}

pub struct IpmProblem<'a> {
    pub obj: &'a dyn SmoothObjective,
    pub a_in: &'a DMatrix<f64>,
    pub b_in: &'a DVector<f64>,
    pub a_eq: &'a DMatrix<f64>,
    pub b_eq: &'a DVector<f64>,
}

impl IpmProblem<'_> {
    fn slacks(&self, x: &DVector<f64>) -> DVector<f64> {
        self.b_in - self.a_in * x
    }

    fn barrier_value(&self, x: &DVector<f64>, t: f64) -> f64 {
        let s = self.slacks(x);
        if s.iter().any(|&si| si <= 0.0) {
            return f64::INFINITY;
        }
        t * self.obj.eval(x) - s.iter().map(|si| si.ln()).sum::<f64>()
    }
}

/// Barrier method from a strictly feasible `x0`. The optional `early_exit`
/// predicate is checked after every centering stage and stops the run with
/// the current iterate (used by phase-I solves that only need a point good
/// enough for the next phase).
pub fn barrier_minimize(
    p: &IpmProblem,
    x0: DVector<f64>,
    opts: &IpmOptions,
    early_exit: Option<&dyn Fn(&DVector<f64>) -> bool>,
) -> Result<IpmResult, IpmError> {
    let n = x0.len();
    let m = p.a_in.nrows();
    let n_eq = p.a_eq.nrows();
    debug_assert_eq!(p.a_in.ncols(), n);
    debug_assert_eq!(p.b_in.len(), m);

    let s0 = p.slacks(&x0);
    if let Some((i, &si)) = s0.iter().enumerate().find(|(_, &si)| si <= 0.0) {
        return Err(IpmError::InfeasibleStart(si, i));
    }

    let mut x = x0;
    let mut t = opts.t_init;
    let mut total_newton = 0usize;
    let mut stationarity = f64::INFINITY;

    for _stage in 0..opts.max_barrier_stages {
        // Centering: equality-constrained Newton on t f(x) - sum log s.
        for _step in 0..opts.max_newton_steps {
            let s = p.slacks(&x);
            let d1 = s.map(|si| 1.0 / si);
            let d2 = s.map(|si| 1.0 / (si * si));

            let grad_t = p.obj.grad(&x) * t + p.a_in.transpose() * &d1;
            let mut h = p.obj.hess(&x) * t;
            // A' diag(d2) A, built by scaling rows of A.
            let mut a_scaled = p.a_in.clone();
            for i in 0..m {
                let w = d2[i];
                for jcol in 0..n {
                    a_scaled[(i, jcol)] *= w;
                }
            }
            h += p.a_in.transpose() * a_scaled;
            let ridge = 1e-12 * (1.0 + h.diagonal().amax());
            for i in 0..n {
                h[(i, i)] += ridge;
            }

            // KKT system [H A_eq'; A_eq 0] [dx; nu] = [-grad_t; 0].
            let dim = n + n_eq;
            let mut kkt = DMatrix::zeros(dim, dim);
            kkt.view_mut((0, 0), (n, n)).copy_from(&h);
            if n_eq > 0 {
                kkt.view_mut((0, n), (n, n_eq))
                    .copy_from(&p.a_eq.transpose());
                kkt.view_mut((n, 0), (n_eq, n)).copy_from(p.a_eq);
            }
            let mut rhs = DVector::zeros(dim);
            rhs.rows_mut(0, n).copy_from(&(-&grad_t));
            if n_eq > 0 {
                // correct any drift off the equality manifold
                rhs.rows_mut(n, n_eq).copy_from(&(p.b_eq - p.a_eq * &x));
            }

            let sol = kkt
                .clone()
                .lu()
                .solve(&rhs)
                .or_else(|| kkt.full_piv_lu().solve(&rhs))
                .ok_or_else(|| IpmError::NumericalFailure("singular KKT system".into()))?;
            let dx = sol.rows(0, n).into_owned();
            let nu = sol.rows(n, n_eq).into_owned();
            total_newton += 1;

            let decrement = -grad_t.dot(&dx);
            stationarity = residual_inf(&grad_t, p.a_eq, &nu) / t;
            if !decrement.is_finite() {
                return Err(IpmError::NumericalFailure("non-finite Newton step".into()));
            }
            // Suboptimality of the centering subproblem in f-units is
            // decrement / (2t); keep it well under the barrier gap.
            if decrement / 2.0 <= 1e-2 * opts.gap_tol * t.max(1.0) {
                break;
            }

            // Fraction-to-boundary step limit, then Armijo backtracking.
            let adx = p.a_in * &dx;
            let mut alpha_max = f64::INFINITY;
            for i in 0..m {
                if adx[i] > 0.0 {
                    alpha_max = alpha_max.min(s[i] / adx[i]);
                }
            }
            let mut alpha = (0.995 * alpha_max).min(1.0);
            let phi0 = p.barrier_value(&x, t);
            let slope = grad_t.dot(&dx);
            let mut ok = false;
            for _ in 0..60 {
                let cand = &x + &dx * alpha;
                let phi = p.barrier_value(&cand, t);
                if phi.is_finite() && phi <= phi0 + 0.01 * alpha * slope {
                    x = cand;
                    ok = true;
                    break;
                }
                alpha *= 0.5;
            }
            if !ok {
                // Stalled line search: the iterate is as centered as the
                // arithmetic allows at this t.
                break;
            }
        }

        if let Some(cb) = early_exit {
            if cb(&x) {
                let s = p.slacks(&x);
                return Ok(IpmResult {
                    ineq_duals: s.map(|si| 1.0 / (t * si)),
                    eq_duals: DVector::zeros(n_eq),
                    x,
                    gap: m as f64 / t,
                    newton_steps: total_newton,
                    stationarity,
                    early_exit: true,
                    converged: true,
                });
            }
        }

        if m as f64 / t <= opts.gap_tol {
            let s = p.slacks(&x);
            let d1 = s.map(|si| 1.0 / si);
            let grad_t = p.obj.grad(&x) * t + p.a_in.transpose() * &d1;
            let nu = eq_dual_fit(&grad_t, p.a_eq);
            let stat = residual_inf(&grad_t, p.a_eq, &nu) / t;
            return Ok(IpmResult {
                ineq_duals: s.map(|si| 1.0 / (t * si)),
                eq_duals: nu / t,
                x,
                gap: m as f64 / t,
                newton_steps: total_newton,
                stationarity: stat,
                early_exit: false,
                converged: true,
            });
        }
        t *= opts.mu;
    }
    // Stage budget exhausted: hand back the best iterate so the caller can
    // report a non-converged solution instead of losing it.
    let s = p.slacks(&x);
    Ok(IpmResult {
        ineq_duals: s.map(|si| 1.0 / (t * si)),
        eq_duals: DVector::zeros(n_eq),
        x,
        gap: m as f64 / t,
        newton_steps: total_newton,
        stationarity,
        early_exit: false,
        converged: false,
    })
}

/// Least-squares fit of equality multipliers: min over nu of
/// `|| grad + A_eq' nu ||`.
fn eq_dual_fit(grad: &DVector<f64>, a_eq: &DMatrix<f64>) -> DVector<f64> {
    let p = a_eq.nrows();
    if p == 0 {
        return DVector::zeros(0);
    }
    let at = a_eq.transpose();
    let gram = a_eq * &at;
    let rhs = -(a_eq * grad);
    gram.clone()
        .lu()
        .solve(&rhs)
        .or_else(|| gram.full_piv_lu().solve(&rhs))
        .unwrap_or_else(|| DVector::zeros(p))
}

fn residual_inf(grad: &DVector<f64>, a_eq: &DMatrix<f64>, nu: &DVector<f64>) -> f64 {
    let r = if a_eq.nrows() > 0 {
        grad + a_eq.transpose() * nu
    } else {
        grad.clone()
    };
    r.amax()
}

/// Nonnegative least squares, Lawson-Hanson active set.
/// Minimizes `|| A x - b ||_2` subject to `x >= 0`.
pub fn nnls(a: &DMatrix<f64>, b: &DVector<f64>, max_iter: usize) -> DVector<f64> {
    let n = a.ncols();
    let mut x = DVector::zeros(n);
    let mut passive: Vec<bool> = vec![false; n];
    let tol = 1e-12 * (1.0 + b.amax()) * (1.0 + a.amax());

    for _ in 0..max_iter {
        let w = a.transpose() * (b - a * &x);
        let mut best = None;
        for j in 0..n {
            if !passive[j] && w[j] > tol {
                if best.map(|(_, wv)| w[j] > wv).unwrap_or(true) {
                    best = Some((j, w[j]));
                }
            }
        }
        let Some((jstar, _)) = best else {
            return x;
        };
        passive[jstar] = true;

        loop {
            let idx: Vec<usize> = (0..n).filter(|&j| passive[j]).collect();
            let ap = a.select_columns(idx.iter());
            let z = ap
                .clone()
                .svd(true, true)
                .solve(b, 1e-12)
                .unwrap_or_else(|_| DVector::zeros(idx.len()));
            if z.iter().all(|&zi| zi > 0.0) {
                x.fill(0.0);
                for (k, &j) in idx.iter().enumerate() {
                    x[j] = z[k];
                }
                break;
            }
            // step back to the boundary and drop the blocking coordinate
            let mut alpha = f64::INFINITY;
            for (k, &j) in idx.iter().enumerate() {
                if z[k] <= 0.0 {
                    let xj = x[j];
                    let denom = xj - z[k];
                    if denom > 0.0 {
                        alpha = alpha.min(xj / denom);
                    }
                }
            }
            if !alpha.is_finite() {
                alpha = 0.0;
            }
            for (k, &j) in idx.iter().enumerate() {
                x[j] += alpha * (z[k] - x[j]);
                if x[j] <= tol {
                    x[j] = 0.0;
                    passive[j] = false;
                }
            }
        }
    }
    x
}
