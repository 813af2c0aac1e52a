//! Oracle weights for the grouped factor model: closed forms for the L2
//! objective in all three identification cases, a numeric solve for general
//! divergences, and the oracle counterfactual.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::divergence::Divergence;
use crate::moments::MomentPair;
use crate::panel::PanelData;
use crate::solver::{solve_relaxation, SolveStatus, SolverError};

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("invalid oracle input: {0}")]
    InvalidInput(String),
    #[error("core moment matrix is singular")]
    SingularCore,
    #[error(
        "closed-form oracle weight is negative (min {min_weight:.3e}); the interior premise \
         fails — use the numeric divergence oracle"
    )]
    BoundaryOracle { min_weight: f64 },
    #[error("loading matrix is rank deficient")]
    RankDeficient,
    #[error("oracle feasible set is empty: lambda0 is not representable")]
    InfeasibleOracle,
    #[error("numeric oracle solve failed: {0}")]
    Solver(#[from] SolverError),
}

/// Latent group membership: encodes the J×K indicator matrix Z with
/// Z_{jk} = 1 exactly when unit j belongs to group k.
#[derive(Debug, Clone)]
pub struct GroupStructure {
    membership: Vec<usize>,
    k: usize,
}

impl GroupStructure {
    /// `membership` holds 1-based group indices in `[1, k]`; every group
    /// must be nonempty.
    pub fn new(membership: Vec<usize>, k: usize) -> Result<Self, OracleError> {
        if k == 0 || membership.is_empty() {
            return Err(OracleError::InvalidInput(
                "need at least one group and one unit".into(),
            ));
        }
        let mut counts = vec![0usize; k];
        for &g in &membership {
            if g == 0 || g > k {
                return Err(OracleError::InvalidInput(format!(
                    "group index {g} outside [1, {k}]"
                )));
            }
            counts[g - 1] += 1;
        }
        if counts.iter().any(|&c| c == 0) {
            return Err(OracleError::InvalidInput("every group must be nonempty".into()));
        }
        Ok(Self { membership, k })
    }

    pub fn j(&self) -> usize {
        self.membership.len()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Zero-based group index of unit `j`.
    pub fn group_of(&self, j: usize) -> usize {
        self.membership[j] - 1
    }

    /// Group sizes J_k (the diagonal of Z'Z).
    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0usize; self.k];
        for &g in &self.membership {
            s[g - 1] += 1;
        }
        s
    }

    pub fn membership(&self) -> &[usize] {
        &self.membership
    }
}

/// Known structural quantities from which the oracle weights are computed.
#[derive(Debug, Clone)]
pub struct OracleInputs {
    /// K×r core loading matrix.
    pub lambda_co: DMatrix<f64>,
    /// Treated-unit loadings (length r).
    pub lambda0: DVector<f64>,
    /// r×r factor second-moment matrix, symmetric positive definite.
    pub omega_f_hat: DMatrix<f64>,
    pub groups: GroupStructure,
}

impl OracleInputs {
    pub fn new(
        lambda_co: DMatrix<f64>,
        lambda0: DVector<f64>,
        omega_f_hat: DMatrix<f64>,
        groups: GroupStructure,
    ) -> Result<Self, OracleError> {
        let k = groups.k();
        let r = lambda0.len();
        if lambda_co.nrows() != k || lambda_co.ncols() != r {
            return Err(OracleError::InvalidInput(format!(
                "lambda_co is {}x{}, expected {k}x{r}",
                lambda_co.nrows(),
                lambda_co.ncols()
            )));
        }
        if omega_f_hat.nrows() != r || omega_f_hat.ncols() != r {
            return Err(OracleError::InvalidInput("omega_f_hat must be r x r".into()));
        }
        if (&omega_f_hat - omega_f_hat.transpose()).amax() > 1e-10 * (1.0 + omega_f_hat.amax()) {
            return Err(OracleError::InvalidInput("omega_f_hat must be symmetric".into()));
        }
        let eig = omega_f_hat.clone().symmetric_eigen();
        if eig.eigenvalues.min() <= 1e-12 {
            return Err(OracleError::InvalidInput(
                "omega_f_hat must be positive definite (min eigenvalue > 1e-12)".into(),
            ));
        }
        let sv = lambda_co.clone().svd(false, false).singular_values;
        let need = k.min(r);
        let smax = sv.amax();
        if smax == 0.0 || sv.iter().filter(|&&s| s > 1e-10 * smax).count() < need {
            return Err(OracleError::RankDeficient);
        }
        Ok(Self {
            lambda_co,
            lambda0,
            omega_f_hat,
            groups,
        })
    }

    /// Core moments: Σ̂^co = Λ^co Ω̂_F Λ^co′ and Υ̂^co = Λ^co Ω̂_F λ0.
    pub fn core_moments(&self) -> (DMatrix<f64>, DVector<f64>) {
        let lo = &self.lambda_co * &self.omega_f_hat;
        (&lo * self.lambda_co.transpose(), &lo * &self.lambda0)
    }

    /// Expanded per-unit moments Σ̂* = ZΣ̂^co Z′ and Υ̂* = ZΥ̂^co.
    pub fn expanded_moments(&self) -> MomentPair {
        let (sc, uc) = self.core_moments();
        let j = self.groups.j();
        let sigma = DMatrix::from_fn(j, j, |a, b| {
            sc[(self.groups.group_of(a), self.groups.group_of(b))]
        });
        let upsilon = DVector::from_fn(j, |a, _| uc[self.groups.group_of(a)]);
        MomentPair::new(sigma, upsilon, 1)
    }
}

/// Which Appendix A.1 branch produced the closed form.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleCase {
    /// K ≤ r: the core moment matrix is invertible.
    KLeR,
    /// K > r with 1_K inside the column space of Λ^co.
    KGtRInColumnSpace,
    /// K > r with 1_K outside the column space of Λ^co.
    KGtROutOfColumnSpace,
}

impl OracleCase {
    pub fn as_str(&self) -> &'static str {
        match self {
            OracleCase::KLeR => "k_le_r",
            OracleCase::KGtRInColumnSpace => "k_gt_r_in_column_space",
            OracleCase::KGtROutOfColumnSpace => "k_gt_r_out_of_column_space",
        }
    }
}

/// L2 oracle weights.
#[derive(Debug, Clone)]
pub struct OracleWeights {
    /// Per-unit weights, length J.
    pub w: Vec<f64>,
    /// Group-total weights, length K.
    pub w_g: Vec<f64>,
    /// Intercept γ*.
    pub gamma: f64,
    pub case_tag: OracleCase,
}

impl OracleWeights {
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "w": self.w,
            "w_g": self.w_g,
            "gamma": self.gamma,
            "case_tag": self.case_tag.as_str(),
        })
    }
}

fn sym_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.amax();
    let smin = svd.singular_values.min();
    if smax == 0.0 || smin < 1e-12 * smax {
        return None;
    }
    svd.solve(b, 0.0).ok()
}

/// Closed-form L2 oracle weights for all three identification cases. Errors
/// with `BoundaryOracle` when any closed-form weight is negative, in which
/// case the interiority premise of the closed forms fails and the caller
/// must fall back to `oracle_weights_g`.
pub fn oracle_weights_l2(inp: &OracleInputs) -> Result<OracleWeights, OracleError> {
    let k = inp.groups.k();
    let r = inp.lambda0.len();
    let sizes = inp.groups.sizes();
    let j = inp.groups.j() as f64;
    let ones_k = DVector::from_element(k, 1.0);

    let (w_g, gamma, case_tag) = if k <= r {
        let (sc, uc) = inp.core_moments();
        let si_u = sym_solve(&sc, &uc).ok_or(OracleError::SingularCore)?;
        let si_1 = sym_solve(&sc, &ones_k).ok_or(OracleError::SingularCore)?;
        let gamma = (ones_k.dot(&si_u) - 1.0) / ones_k.dot(&si_1);
        (&si_u - &si_1 * gamma, gamma, OracleCase::KLeR)
    } else {
        // d = pseudo-inverse of Λ^co applied to 1_K; the least-squares
        // residual decides the column-space dichotomy.
        let svd = inp.lambda_co.clone().svd(true, true);
        let smax = svd.singular_values.amax();
        let d = svd
            .solve(&ones_k, 1e-12 * smax)
            .map_err(|e| OracleError::InvalidInput(e.to_string()))?;
        let resid = (&inp.lambda_co * &d - &ones_k).norm() / (k as f64).sqrt();
        let omega_inv_d =
            sym_solve(&inp.omega_f_hat, &d).ok_or(OracleError::SingularCore)?;
        // Z'Z = diag(J_k); s = Z'1_J is the vector of group sizes.
        let zz = DMatrix::from_fn(k, k, |a, b| if a == b { sizes[a] as f64 } else { 0.0 });
        let s = DVector::from_fn(k, |a, _| sizes[a] as f64);

        if resid <= 1e-8 {
            // Case 1: 1_K in the column space; γ* from the collapsed
            // constraint, then the minimum-norm solve over the r effective
            // constraints.
            let gamma = (d.dot(&inp.lambda0) - 1.0) / d.dot(&omega_inv_d);
            let rhs = &inp.lambda0 - &omega_inv_d * gamma;
            let zzl = &zz * &inp.lambda_co;
            let gram = inp.lambda_co.transpose() * &zzl;
            let mu1 = sym_solve(&gram, &rhs).ok_or(OracleError::RankDeficient)?;
            (&zzl * &mu1, gamma, OracleCase::KGtRInColumnSpace)
        } else {
            // Case 2. With 1_K outside the column space of Λ^co, the
            // original balancing constraint Σ̂^co w_G - Υ̂^co + γ1_K = 0
            // splits along col(Λ^co) and its orthogonal complement; the
            // orthogonal component reads γ(I - P)1_K = 0 and forces γ* = 0.
            // (The collapsed system Λ^co′w_G + γb = λ0 alone would leave a
            // spurious γ direction and an infeasible minimizer.) With γ* = 0
            // the balancing multiplier and weights follow the same
            // M_Z / M_J structure as the free-γ derivation.
            let zmz = &zz - &s * s.transpose() / j; // Z' M_J Z
            let gram = inp.lambda_co.transpose() * &zmz * &inp.lambda_co;
            let c0 = &inp.lambda0 - inp.lambda_co.transpose() * &s / j;
            let mu1 = sym_solve(&gram, &c0).ok_or(OracleError::RankDeficient)?;
            // w_G* = Z'Z (M_Z Λ^co μ1 + 1_K / J), M_Z Λ^co = Λ^co - 1_K s'Λ^co / J
            let lm = &inp.lambda_co * &mu1;
            let inner = &lm - &ones_k * (s.dot(&lm) / j) + &ones_k / j;
            (&zz * inner, 0.0, OracleCase::KGtROutOfColumnSpace)
        }
    };

    let w: Vec<f64> = inp
        .groups
        .membership()
        .iter()
        .map(|&g| w_g[g - 1] / sizes[g - 1] as f64)
        .collect();
    let min_weight = w.iter().cloned().fold(f64::INFINITY, f64::min);
    if min_weight < -1e-10 {
        return Err(OracleError::BoundaryOracle { min_weight });
    }
    Ok(OracleWeights {
        w,
        w_g: w_g.iter().cloned().collect(),
        gamma,
        case_tag,
    })
}

/// Numeric oracle weights for a general divergence: solves the relaxation
/// at η = 0 on the exact expanded moments. Honors nonnegativity, so it is
/// also the fallback when the L2 closed form hits the simplex boundary.
pub fn oracle_weights_g(
    inp: &OracleInputs,
    d: &Divergence,
    tol: f64,
) -> Result<(Vec<f64>, Vec<f64>), OracleError> {
    let m = inp.expanded_moments();
    let sol = solve_relaxation(&m, d, 0.0, tol).map_err(|e| match e {
        SolverError::InfeasibleRelaxation { .. } => OracleError::InfeasibleOracle,
        other => OracleError::Solver(other),
    })?;
    if sol.status == SolveStatus::Infeasible {
        return Err(OracleError::InfeasibleOracle);
    }
    let k = inp.groups.k();
    let mut w_g = vec![0.0; k];
    for (j, &wj) in sol.w.iter().enumerate() {
        w_g[inp.groups.group_of(j)] += wj;
    }
    Ok((sol.w, w_g))
}

/// Oracle synthetic control over the post-treatment window:
/// y^{N,*}_{0t} = Σ_j w*_j y_{jt}.
pub fn oracle_counterfactual(w_star: &[f64], panel: &PanelData) -> Result<Vec<f64>, OracleError> {
    if w_star.len() != panel.num_controls() {
        return Err(OracleError::InvalidInput(format!(
            "weight length {} does not match {} controls",
            w_star.len(),
            panel.num_controls()
        )));
    }
    let t0 = panel.t0();
    Ok((t0..t0 + panel.t1())
        .map(|t| panel.combine(w_star, t))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn rand_inputs(
        rng: &mut ChaCha8Rng,
        k: usize,
        r: usize,
        sizes: &[usize],
        force_ones_in_col: bool,
    ) -> OracleInputs {
        let mut membership = Vec::new();
        for (g, &n) in sizes.iter().enumerate() {
            membership.extend(std::iter::repeat(g + 1).take(n));
        }
        let groups = GroupStructure::new(membership, k).unwrap();
        let mut lambda_co = DMatrix::from_fn(k, r, |_, _| rng.gen_range(-1.0..1.0));
        if force_ones_in_col {
            for a in 0..k {
                lambda_co[(a, 0)] = 1.0;
            }
        }
        // Ω̂_F = A A' + I: symmetric positive definite.
        let a = DMatrix::from_fn(r, r, |_, _| rng.gen_range(-0.5..0.5));
        let omega = &a * a.transpose() + DMatrix::identity(r, r);
        // λ0 from interior group sums keeps the closed form interior with
        // high probability.
        let mut wg = DVector::from_fn(k, |_, _| rng.gen_range(0.5..1.5));
        wg /= wg.sum();
        let lambda0 = lambda_co.transpose() * &wg;
        OracleInputs::new(lambda_co, lambda0, omega, groups).unwrap()
    }

    #[test]
    fn single_group_gives_equal_weights() {
        let groups = GroupStructure::new(vec![1; 5], 1).unwrap();
        let lambda_co = DMatrix::from_row_slice(1, 2, &[0.7, -0.3]);
        let lambda0 = lambda_co.transpose() * DVector::from_element(1, 1.0);
        let inp =
            OracleInputs::new(lambda_co, lambda0, DMatrix::identity(2, 2), groups).unwrap();
        let o = oracle_weights_l2(&inp).unwrap();
        for &wi in &o.w {
            assert_abs_diff_eq!(wi, 0.2, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(o.gamma, 0.0, epsilon = 1e-10);
        assert_eq!(o.case_tag, OracleCase::KLeR);
    }

    #[test]
    fn symmetric_two_groups_split_evenly() {
        let groups = GroupStructure::new(vec![1, 1, 2, 2], 2).unwrap();
        let lambda_co = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let lambda0 = DVector::from_column_slice(&[0.5, 0.5]);
        let inp =
            OracleInputs::new(lambda_co, lambda0, DMatrix::identity(2, 2), groups).unwrap();
        let o = oracle_weights_l2(&inp).unwrap();
        assert_abs_diff_eq!(o.w_g[0], 0.5, epsilon = 1e-10);
        assert_abs_diff_eq!(o.w_g[1], 0.5, epsilon = 1e-10);
    }

    #[test]
    fn closed_form_matches_numeric_k_le_r() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let inp = rand_inputs(&mut rng, 3, 5, &[2, 3, 2], false);
            let o = oracle_weights_l2(&inp).unwrap();
            let (w_num, _) = oracle_weights_g(&inp, &Divergence::L2, 1e-9).unwrap();
            for (a, b) in o.w.iter().zip(&w_num) {
                assert!((a - b).abs() < 1e-6, "closed {a} vs numeric {b}");
            }
            // feasibility of the closed form on the expanded moments
            let m = inp.expanded_moments();
            let v = m.band_residual(&o.w, o.gamma);
            assert!(v.amax() < 1e-8);
        }
    }

    #[test]
    fn case2_satisfies_constraints_and_matches_numeric() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..5 {
            let inp = rand_inputs(&mut rng, 5, 3, &[2, 2, 1, 2, 3], false);
            let o = oracle_weights_l2(&inp).unwrap();
            assert_eq!(o.case_tag, OracleCase::KGtROutOfColumnSpace);
            // constraint system: Λ^co' w_G + γ b = λ0 and 1'w_G = 1
            let svd = inp.lambda_co.clone().svd(true, true);
            let d = svd
                .solve(&DVector::from_element(5, 1.0), 1e-12 * svd.singular_values.amax())
                .unwrap();
            let b = sym_solve(&inp.omega_f_hat, &d).unwrap();
            let wg = DVector::from_column_slice(&o.w_g);
            let res = inp.lambda_co.transpose() * &wg + &b * o.gamma - &inp.lambda0;
            assert!(res.amax() < 1e-10, "constraint residual {}", res.amax());
            assert_abs_diff_eq!(wg.sum(), 1.0, epsilon = 1e-10);
            let (w_num, _) = oracle_weights_g(&inp, &Divergence::L2, 1e-9).unwrap();
            for (a, b) in o.w.iter().zip(&w_num) {
                assert!((a - b).abs() < 1e-6, "closed {a} vs numeric {b}");
            }
        }
    }

    #[test]
    fn case1_column_space_dispatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let inp = rand_inputs(&mut rng, 5, 3, &[2, 2, 2, 2, 2], true);
        let o = oracle_weights_l2(&inp).unwrap();
        assert_eq!(o.case_tag, OracleCase::KGtRInColumnSpace);
        let (w_num, _) = oracle_weights_g(&inp, &Divergence::L2, 1e-9).unwrap();
        for (a, b) in o.w.iter().zip(&w_num) {
            assert!((a - b).abs() < 1e-6, "closed {a} vs numeric {b}");
        }
    }

    #[test]
    fn within_group_equality_and_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let inp = rand_inputs(&mut rng, 4, 6, &[3, 2, 4, 2], false);
        let o = oracle_weights_l2(&inp).unwrap();
        assert_abs_diff_eq!(o.w.iter().sum::<f64>(), 1.0, epsilon = 1e-10);
        for i in 0..o.w.len() {
            for j in 0..o.w.len() {
                if inp.groups.group_of(i) == inp.groups.group_of(j) {
                    assert!((o.w[i] - o.w[j]).abs() <= 1e-8);
                }
            }
        }
    }

    #[test]
    fn boundary_sign_patterns_across_divergences() {
        // K = 3 > r = 1 under-identified family: the feasible group weights
        // form a segment with interior points, the L2 minimum sits at its
        // boundary endpoint (third group zero), and log-domain divergences
        // stay strictly interior.
        let groups = GroupStructure::new(vec![1, 1, 2, 2, 3, 3], 3).unwrap();
        let lambda_co = DMatrix::from_row_slice(3, 1, &[1.0, 2.0, 3.0]);
        let lambda0 = DVector::from_element(1, 1.05);
        let inp =
            OracleInputs::new(lambda_co, lambda0, DMatrix::identity(1, 1), groups).unwrap();
        let (w_l2, wg_l2) = oracle_weights_g(&inp, &Divergence::L2, 1e-9).unwrap();
        let (w_el, _) = oracle_weights_g(&inp, &Divergence::El, 1e-9).unwrap();
        let (w_ent, _) = oracle_weights_g(&inp, &Divergence::Entropy, 1e-9).unwrap();
        assert!(wg_l2[2].abs() < 1e-6, "L2 boundary group weight {}", wg_l2[2]);
        assert!(w_l2.iter().sum::<f64>() > 0.999);
        assert!(w_el.iter().all(|&x| x > 0.0));
        assert!(w_ent.iter().all(|&x| x > 0.0));
    }

    #[test]
    fn counterfactual_matches_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t0 = 4;
        let t1 = 3;
        let y = DMatrix::from_fn(t0 + t1, 4, |_, _| rng.gen_range(-2.0..2.0));
        let panel = PanelData::new(
            y.clone(),
            t0,
            t1,
            (0..4).map(|i| format!("u{i}")).collect(),
            (0..t0 + t1).map(|t| format!("t{t}")).collect(),
        )
        .unwrap();
        let w = [0.2, 0.5, 0.3];
        let cf = oracle_counterfactual(&w, &panel).unwrap();
        assert_eq!(cf.len(), t1);
        for (p, t) in (t0..t0 + t1).enumerate() {
            let mut s = 0.0;
            for (jj, &wj) in w.iter().enumerate() {
                s += wj * y[(t, jj + 1)];
            }
            assert_abs_diff_eq!(cf[p], s, epsilon = 1e-14);
        }
        assert!(oracle_counterfactual(&[0.5, 0.5], &panel).is_err());
    }

    #[test]
    fn selection_weights_return_single_unit_series() {
        let t0 = 3;
        let y = DMatrix::from_row_slice(5, 3, &[
            1.0, 2.0, 3.0, //
            1.1, 2.1, 3.1, //
            1.2, 2.2, 3.2, //
            1.3, 2.3, 3.3, //
            1.4, 2.4, 3.4,
        ]);
        let panel = PanelData::new(
            y,
            t0,
            2,
            vec!["y0".into(), "a".into(), "b".into()],
            (0..5).map(|t| format!("t{t}")).collect(),
        )
        .unwrap();
        let cf = oracle_counterfactual(&[1.0, 0.0], &panel).unwrap();
        assert_eq!(cf, vec![2.3, 2.4]);
    }

    #[test]
    fn invalid_inputs_rejected() {
        assert!(GroupStructure::new(vec![1, 3], 2).is_err());
        assert!(GroupStructure::new(vec![1, 1], 2).is_err());
        let groups = GroupStructure::new(vec![1, 2], 2).unwrap();
        // non-positive-definite omega
        let res = OracleInputs::new(
            DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]),
            DVector::from_column_slice(&[0.5, 0.5]),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]),
            groups.clone(),
        );
        assert!(res.is_err());
        // rank-deficient loadings
        let res = OracleInputs::new(
            DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]),
            DVector::from_column_slice(&[0.5, 0.5]),
            DMatrix::identity(2, 2),
            groups,
        );
        assert!(matches!(res, Err(OracleError::RankDeficient)));
    }
}
