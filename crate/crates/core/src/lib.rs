//! Synthetic-control weight estimation by divergence minimization under a
//! relaxed first-order-condition band, with oracle weight formulas for
//! grouped factor models, baseline estimators, cross-validation, and a
//! Monte Carlo harness.

pub mod baselines;
pub mod divergence;
pub mod ipm;
pub mod moments;
pub mod oracle;
pub mod panel;
pub mod simulation;
pub mod solver;
pub mod tuning;

pub use divergence::{divergence_gradient, divergence_value, Divergence};
pub use moments::{compute_moments, eta_bar, MomentPair};
pub use panel::{
    destandardize_weights, load_panel_csv, reconstruct_levels, standardize, yoy_growth, PanelData,
    ScaleVector,
};
pub use oracle::{
    oracle_counterfactual, oracle_weights_g, oracle_weights_l2, GroupStructure, OracleInputs,
    OracleWeights,
};
pub use simulation::{
    empirical_risk, generate_instance, run_experiment, DgpConfig, ExperimentReport, GroupMode,
    KMode, Method, SimulatedInstance, Window,
};
pub use solver::{check_feasibility, solve_relaxation, verify_kkt, RelaxationSolution};
pub use tuning::{cv_select_eta, cv_select_lambda, CvResult};
