//! Cross-validation selection of the relaxation band width eta and of the
//! penalty weight lambda for the penalized baselines.

use thiserror::Error;

use crate::baselines::{lambda_grid, solve_penalized, PenaltyKind};
use crate::divergence::Divergence;
use crate::moments::{compute_moments, eta_bar, MomentPair};
use crate::panel::{PanelData, PanelError};
use crate::solver::{check_feasibility, solve_relaxation};

#[derive(Debug, Error)]
pub enum TuningError {
    #[error("need at least {needed} pre-treatment periods, got {got}")]
    TooFewPeriods { needed: usize, got: usize },
    #[error("invalid tuning input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Panel(#[from] PanelError),
}

/// Outcome of a cross-validation sweep.
#[derive(Debug, Clone)]
pub struct CvResult {
    /// Candidate tuning values, ascending.
    pub grid: Vec<f64>,
    /// Validation MSE, `fold_errors[grid_index][fold]`; infeasible fits are
    /// `+inf`.
    pub fold_errors: Vec<Vec<f64>>,
    /// Selected tuning value.
    pub chosen: f64,
    pub chosen_index: usize,
    /// 2 when t0 < 50, else 4.
    pub n_folds: usize,
}

impl CvResult {
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "grid": self.grid,
            "fold_errors": self.fold_errors,
            "chosen": self.chosen,
            "chosen_index": self.chosen_index,
            "n_folds": self.n_folds,
        })
    }
}

/// Contiguous time-block folds over the pre-treatment window; block lengths
/// differ by at most one. Contiguity is a deliberate choice for serially
/// dependent data.
pub(crate) fn fold_blocks(t0: usize, n_folds: usize) -> Vec<Vec<usize>> {
    let base = t0 / n_folds;
    let extra = t0 % n_folds;
    let mut blocks = Vec::with_capacity(n_folds);
    let mut start = 0usize;
    for f in 0..n_folds {
        let len = base + usize::from(f < extra);
        blocks.push((start..start + len).collect());
        start += len;
    }
    blocks
}

pub(crate) fn n_folds_for(t0: usize) -> usize {
    if t0 < 50 {
        2
    } else {
        4
    }
}

/// Mean squared prediction error of weights `w` on the held-out rows.
fn held_out_mse(panel: &PanelData, w: &[f64], rows: &[usize]) -> f64 {
    let mut acc = 0.0;
    for &t in rows {
        let e = panel.treated(t) - panel.combine(w, t);
        acc += e * e;
    }
    acc / rows.len() as f64
}

struct FoldContext {
    moments: MomentPair,
    holdout: Vec<usize>,
    eta_bar: f64,
}

fn build_folds(panel: &PanelData, n_folds: usize) -> Result<Vec<FoldContext>, TuningError> {
    let t0 = panel.t0();
    let blocks = fold_blocks(t0, n_folds);
    let mut folds = Vec::with_capacity(n_folds);
    for f in 0..n_folds {
        let train: Vec<usize> = (0..n_folds)
            .filter(|&g| g != f)
            .flat_map(|g| blocks[g].iter().cloned())
            .collect();
        let sub = panel.subset_pre(&train)?;
        let moments = compute_moments(&sub)?;
        let eb = eta_bar(&moments).eta_bar;
        folds.push(FoldContext {
            moments,
            holdout: blocks[f].clone(),
            eta_bar: eb,
        });
    }
    Ok(folds)
}

/// Selects the minimizer of the mean fold error, breaking ties toward the
/// larger tuning value. `mask[i] = false` disqualifies a grid point.
fn select(grid: &[f64], fold_errors: &[Vec<f64>], mask: &[bool]) -> (usize, f64) {
    let mut chosen_index = grid.len() - 1;
    let mut best = f64::INFINITY;
    for (i, errs) in fold_errors.iter().enumerate() {
        if !mask[i] {
            continue;
        }
        let mean = errs.iter().sum::<f64>() / errs.len() as f64;
        if mean <= best {
            best = mean;
            chosen_index = i;
        }
    }
    (chosen_index, grid[chosen_index])
}

/// Cross-validates the band width eta for `solve_relaxation` on a linear
/// grid spanning [0, eta_bar] (endpoints included). Each fold refits the
/// moments on the complement blocks and rescales each candidate by the
/// ratio of the fold's eta_bar to the full-sample eta_bar; candidates below
/// a fold's minimal feasible eta receive infinite fold error. The chosen
/// value is always feasible on the full sample.
pub fn cv_select_eta(
    panel: &PanelData,
    d: &Divergence,
    grid_size: usize,
) -> Result<CvResult, TuningError> {
    let t0 = panel.t0();
    if t0 < 8 {
        return Err(TuningError::TooFewPeriods { needed: 8, got: t0 });
    }
    if grid_size == 0 {
        return Err(TuningError::InvalidInput("grid_size must be positive".into()));
    }
    let full_m = compute_moments(panel)?;
    let full_eb = eta_bar(&full_m).eta_bar;
    let grid: Vec<f64> = if grid_size == 1 {
        vec![full_eb]
    } else {
        (0..grid_size)
            .map(|i| full_eb * i as f64 / (grid_size - 1) as f64)
            .collect()
    };
    let eta_min_full = check_feasibility(&full_m, 0.0)
        .map(|c| c.eta_min)
        .unwrap_or(0.0);

    let n_folds = n_folds_for(t0);
    let folds = build_folds(panel, n_folds)?;
    let tol = 1e-8;

    let mut fold_errors = vec![vec![f64::INFINITY; n_folds]; grid.len()];
    for (f, fc) in folds.iter().enumerate() {
        let ratio = if full_eb > 0.0 { fc.eta_bar / full_eb } else { 1.0 };
        for (i, &eta) in grid.iter().enumerate() {
            let eta_f = eta * ratio;
            match solve_relaxation(&fc.moments, d, eta_f, tol) {
                Ok(sol) => {
                    fold_errors[i][f] = held_out_mse(panel, &sol.w, &fc.holdout);
                }
                Err(_) => {} // infeasible or failed fit: keep +inf
            }
        }
    }
    // The chosen value must be feasible on the full sample.
    let mask: Vec<bool> = grid
        .iter()
        .map(|&g| g + 1e-9 * (1.0 + full_eb) >= eta_min_full)
        .collect();
    let (chosen_index, chosen) = select(&grid, &fold_errors, &mask);
    Ok(CvResult {
        grid,
        fold_errors,
        chosen,
        chosen_index,
        n_folds,
    })
}

/// Cross-validates the penalty weight for the Lasso/Ridge baselines over
/// the baseline module's log-spaced lambda grid, with the same fold
/// protocol as `cv_select_eta`.
pub fn cv_select_lambda(
    panel: &PanelData,
    kind: PenaltyKind,
    grid_size: usize,
) -> Result<CvResult, TuningError> {
    let t0 = panel.t0();
    if t0 < 8 {
        return Err(TuningError::TooFewPeriods { needed: 8, got: t0 });
    }
    if grid_size == 0 {
        return Err(TuningError::InvalidInput("grid_size must be positive".into()));
    }
    let full_m = compute_moments(panel)?;
    let grid = lambda_grid(&full_m, grid_size);
    let n_folds = n_folds_for(t0);
    let folds = build_folds(panel, n_folds)?;
    let tol = 1e-8;

    let mut fold_errors = vec![vec![f64::INFINITY; n_folds]; grid.len()];
    for (f, fc) in folds.iter().enumerate() {
        for (i, &lambda) in grid.iter().enumerate() {
            if let Ok(w) = solve_penalized(&fc.moments, kind, lambda, tol) {
                fold_errors[i][f] = held_out_mse(panel, &w, &fc.holdout);
            }
        }
    }
    let mask = vec![true; grid.len()];
    let (chosen_index, chosen) = select(&grid, &fold_errors, &mask);
    Ok(CvResult {
        grid,
        fold_errors,
        chosen,
        chosen_index,
        n_folds,
    })
}
