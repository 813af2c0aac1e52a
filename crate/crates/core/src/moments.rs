//! Cross-moment inputs for the weight solvers.

use crate::panel::{PanelData, PanelError};
use nalgebra::{DMatrix, DVector};

/// Uncentered pre-treatment cross moments: `sigma_hat = Y'Y / T0` over the
/// controls and `upsilon_hat = Y'y_0 / T0` against the treated unit.
#[derive(Debug, Clone)]
pub struct MomentPair {
    pub sigma_hat: DMatrix<f64>,
    pub upsilon_hat: DVector<f64>,
    pub j: usize,
    pub t0: usize,
    pub standardized: bool,
}

impl MomentPair {
    pub fn new(sigma_hat: DMatrix<f64>, upsilon_hat: DVector<f64>, t0: usize) -> Self {
        let j = upsilon_hat.len();
        assert_eq!(sigma_hat.nrows(), j);
        assert_eq!(sigma_hat.ncols(), j);
        // kill rounding asymmetry so downstream solvers can assume symmetry
        let sym = (&sigma_hat + sigma_hat.transpose()) * 0.5;
        MomentPair {
            sigma_hat: sym,
            upsilon_hat,
            j,
            t0,
            standardized: false,
        }
    }

    /// Band residual `sigma_hat w - upsilon_hat + gamma 1`.
    pub fn band_residual(&self, w: &[f64], gamma: f64) -> DVector<f64> {
        let wv = DVector::from_column_slice(w);
        &self.sigma_hat * wv - &self.upsilon_hat + DVector::from_element(self.j, gamma)
    }

    pub fn to_json(&self) -> serde_json::Value {
        let rows: Vec<Vec<f64>> = (0..self.j)
            .map(|i| (0..self.j).map(|k| self.sigma_hat[(i, k)]).collect())
            .collect();
        serde_json::json!({
            "sigma_hat": rows,
            "upsilon_hat": self.upsilon_hat.as_slice(),
            "j": self.j,
            "t0": self.t0,
            "standardized": self.standardized,
        })
    }
}

/// Computes the moment pair from a panel's pre-treatment rows.
pub fn compute_moments(panel: &PanelData) -> Result<MomentPair, PanelError> {
    let t0 = panel.t0();
    if t0 < 2 {
        return Err(PanelError::TooFewPeriods { needed: 2, got: t0 });
    }
    let j = panel.num_controls();
    let outcomes = panel.outcomes();
    // Y is t0 x J (controls only); y0 the treated column.
    let y = outcomes.view((0, 1), (t0, j)).into_owned();
    let y0 = outcomes.view((0, 0), (t0, 1)).into_owned();
    let sigma = y.transpose() * &y / t0 as f64;
    let upsilon = (y.transpose() * y0).column(0).into_owned() / t0 as f64;
    Ok(MomentPair::new(sigma, upsilon, t0))
}

/// Result of the analytic eta-bar computation.
#[derive(Debug, Clone, Copy)]
pub struct EtaBar {
    /// Smallest band radius at which equal weights become feasible.
    pub eta_bar: f64,
    /// The minimizing shift `gamma* = -(max v + min v) / 2`.
    pub gamma_star: f64,
}

/// `eta_bar = min_gamma || sigma_hat 1/J - upsilon_hat + gamma 1 ||_inf`,
/// solved in closed form as half the range of `v = sigma_hat 1/J - upsilon_hat`.
pub fn eta_bar(m: &MomentPair) -> EtaBar {
    let ones = DVector::from_element(m.j, 1.0 / m.j as f64);
    let v = &m.sigma_hat * ones - &m.upsilon_hat;
    let vmax = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let vmin = v.iter().cloned().fold(f64::INFINITY, f64::min);
    EtaBar {
        eta_bar: (vmax - vmin) / 2.0,
        gamma_star: -(vmax + vmin) / 2.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::PanelData;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn panel_from_rows(rows: &[&[f64]], t0: usize) -> PanelData {
        let ncols = rows[0].len();
        let m = DMatrix::from_fn(rows.len(), ncols, |t, j| rows[t][j]);
        PanelData::new(
            m,
            t0,
            rows.len() - t0,
            (0..ncols).map(|j| format!("u{j}")).collect(),
            (0..rows.len()).map(|t| format!("t{t}")).collect(),
        )
        .unwrap()
    }

    #[test]
    fn identity_block_moments() {
        // y0 = (1,1), controls rows (1,0),(0,1)
        let p = panel_from_rows(&[&[1.0, 1.0, 0.0], &[1.0, 0.0, 1.0]], 2);
        let m = compute_moments(&p).unwrap();
        assert_relative_eq!(m.sigma_hat[(0, 0)], 0.5, epsilon = 1e-15);
        assert_relative_eq!(m.sigma_hat[(1, 1)], 0.5, epsilon = 1e-15);
        assert_relative_eq!(m.sigma_hat[(0, 1)], 0.0, epsilon = 1e-15);
        assert_relative_eq!(m.upsilon_hat[0], 0.5, epsilon = 1e-15);
        assert_relative_eq!(m.upsilon_hat[1], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn zero_controls_zero_moments() {
        let p = panel_from_rows(&[&[1.0, 0.0, 0.0], &[2.0, 0.0, 0.0]], 2);
        let m = compute_moments(&p).unwrap();
        assert_eq!(m.sigma_hat.iter().cloned().fold(0.0, f64::max), 0.0);
        assert_eq!(m.upsilon_hat.iter().cloned().fold(0.0, f64::max), 0.0);
    }

    /// Naive double-loop summation as an independent oracle for the moments.
    #[test]
    fn moments_match_naive_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let t0 = 5;
        let j = 3;
        let m = DMatrix::from_fn(t0, j + 1, |_, _| rng.gen::<f64>() * 2.0 - 1.0);
        let p = PanelData::new(
            m.clone(),
            t0,
            0,
            (0..=j).map(|c| format!("u{c}")).collect(),
            (0..t0).map(|t| format!("t{t}")).collect(),
        )
        .unwrap();
        let mp = compute_moments(&p).unwrap();
        for a in 0..j {
            for b in 0..j {
                let mut s = 0.0;
                for t in 0..t0 {
                    s += m[(t, a + 1)] * m[(t, b + 1)];
                }
                assert_relative_eq!(mp.sigma_hat[(a, b)], s / t0 as f64, epsilon = 1e-14);
            }
            let mut s = 0.0;
            for t in 0..t0 {
                s += m[(t, a + 1)] * m[(t, 0)];
            }
            assert_relative_eq!(mp.upsilon_hat[a], s / t0 as f64, epsilon = 1e-14);
        }
    }

    #[test]
    fn eta_bar_two_vector_midrange() {
        // construct moments so that v = sigma 1/J - upsilon = (1, 3)
        let sigma = DMatrix::identity(2, 2) * 2.0;
        let upsilon = DVector::from_column_slice(&[0.0, -2.0]);
        let m = MomentPair::new(sigma, upsilon, 10);
        let e = eta_bar(&m);
        assert_relative_eq!(e.eta_bar, 1.0, epsilon = 1e-15);
        assert_relative_eq!(e.gamma_star, -2.0, epsilon = 1e-15);
    }

    #[test]
    fn eta_bar_constant_vector_is_zero() {
        let sigma = DMatrix::identity(3, 3) * 3.0;
        let upsilon = DVector::from_element(3, 1.0);
        let m = MomentPair::new(sigma, upsilon, 10);
        assert_relative_eq!(eta_bar(&m).eta_bar, 0.0, epsilon = 1e-15);
    }

    /// One-dimensional grid search over gamma as the independent oracle.
    #[test]
    fn eta_bar_matches_grid_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let j = 6;
        let a = DMatrix::from_fn(j, j, |_, _| rng.gen::<f64>() - 0.5);
        let sigma = &a * a.transpose();
        let upsilon = DVector::from_fn(j, |_, _| rng.gen::<f64>() - 0.5);
        let m = MomentPair::new(sigma, upsilon, 10);
        let e = eta_bar(&m);

        let ones = DVector::from_element(j, 1.0 / j as f64);
        let v = &m.sigma_hat * ones - &m.upsilon_hat;
        let mut best = f64::INFINITY;
        let mut g = -10.0;
        while g <= 10.0 {
            let norm = v.iter().map(|x| (x + g).abs()).fold(0.0, f64::max);
            if norm < best {
                best = norm;
            }
            g += 1e-5;
        }
        assert_relative_eq!(e.eta_bar, best, epsilon = 1e-4);
    }

    /// Equal weights at gamma* attain the eta-bar norm exactly.
    #[test]
    fn equal_weights_attain_eta_bar() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..20 {
            let j = rng.gen_range(2..8);
            let a = DMatrix::from_fn(j, j, |_, _| rng.gen::<f64>() - 0.5);
            let sigma = &a * a.transpose();
            let upsilon = DVector::from_fn(j, |_, _| rng.gen::<f64>() - 0.5);
            let m = MomentPair::new(sigma, upsilon, 10);
            let e = eta_bar(&m);
            let w = vec![1.0 / j as f64; j];
            let norm = m
                .band_residual(&w, e.gamma_star)
                .iter()
                .map(|x| x.abs())
                .fold(0.0, f64::max);
            assert_relative_eq!(norm, e.eta_bar, epsilon = 1e-12);
        }
    }
}
