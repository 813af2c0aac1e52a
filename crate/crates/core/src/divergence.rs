//! Divergence objectives for the relaxation program.
//!
//! Each weight vector is scored by `sum_j g(w_j)` where `g` is a strictly
//! convex per-coordinate penalty. Supported choices: squared weights,
//! negative log (empirical likelihood), entropy, and the Cressie-Read
//! family which interpolates between them.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum DivergenceError {
    /// A log-domain divergence was evaluated at a nonpositive weight.
    #[error("weight {index} = {value} outside the divergence domain")]
    DomainViolation { index: usize, value: f64 },
    /// Cressie-Read parameter outside [-1, 1].
    #[error("Cressie-Read parameter {0} outside [-1, 1]")]
    InvalidParameter(f64),
}

/// Choice of objective `g` for the relaxation program.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Divergence {
    /// `g(x) = x^2`.
    L2,
    /// `g(x) = -log x` (empirical likelihood).
    El,
    /// `g(x) = x log x`.
    Entropy,
    /// `g(x) = (x^{gamma+1} - 1) / [gamma (gamma+1)]` for `gamma` in (-1, 0) or (0, 1].
    CressieRead(f64),
}

impl Divergence {
    /// Normalizes the Cressie-Read limits: gamma = 0 is entropy and
    /// gamma = -1 is EL, where the generic formula degenerates to 0/0.
    pub fn cressie_read(gamma: f64) -> Result<Self, DivergenceError> {
        if !(-1.0..=1.0).contains(&gamma) || gamma.is_nan() {
            return Err(DivergenceError::InvalidParameter(gamma));
        }
        if gamma == 0.0 {
            Ok(Divergence::Entropy)
        } else if gamma == -1.0 {
            Ok(Divergence::El)
        } else {
            Ok(Divergence::CressieRead(gamma))
        }
    }

    /// Whether the objective requires strictly positive weights.
    pub fn log_domain(&self) -> bool {
        match self {
            Divergence::L2 => false,
            Divergence::El | Divergence::Entropy => true,
            Divergence::CressieRead(g) => *g < 0.0,
        }
    }

    /// `g(x)`. Entropy uses the continuous extension `0 log 0 = 0`.
    pub fn g(&self, x: f64) -> f64 {
        match self {
            Divergence::L2 => x * x,
            Divergence::El => -x.ln(),
            Divergence::Entropy => {
                if x == 0.0 {
                    0.0
                } else {
                    x * x.ln()
                }
            }
            Divergence::CressieRead(g) => (x.powf(g + 1.0) - 1.0) / (g * (g + 1.0)),
        }
    }

    /// `g'(x)`.
    pub fn dg(&self, x: f64) -> f64 {
        match self {
            Divergence::L2 => 2.0 * x,
            Divergence::El => -1.0 / x,
            Divergence::Entropy => 1.0 + x.ln(),
            Divergence::CressieRead(g) => x.powf(*g) / g,
        }
    }

    /// `g''(x)`.
    pub fn d2g(&self, x: f64) -> f64 {
        match self {
            Divergence::L2 => 2.0,
            Divergence::El => 1.0 / (x * x),
            Divergence::Entropy => 1.0 / x,
            Divergence::CressieRead(g) => x.powf(g - 1.0),
        }
    }

    fn check_domain(&self, w: &[f64], for_gradient: bool) -> Result<(), DivergenceError> {
        // Entropy's value extends to 0 but its gradient does not, and the
        // CR gradient x^{gamma-1} blows up at 0 for gamma < 1.
        let needs_positive = match self {
            Divergence::L2 => false,
            Divergence::El => true,
            Divergence::Entropy => for_gradient,
            Divergence::CressieRead(g) => *g < 0.0 || (for_gradient && *g < 1.0),
        };
        for (j, &x) in w.iter().enumerate() {
            let bad = if needs_positive { x <= 0.0 } else { x < 0.0 };
            if bad || x.is_nan() {
                return Err(DivergenceError::DomainViolation { index: j, value: x });
            }
        }
        Ok(())
    }
}

/// `sum_j g(w_j)`.
pub fn divergence_value(d: &Divergence, w: &[f64]) -> Result<f64, DivergenceError> {
    d.check_domain(w, false)?;
    Ok(w.iter().map(|&x| d.g(x)).sum())
}

/// Componentwise gradient `g'(w_j)`.
pub fn divergence_gradient(d: &Divergence, w: &[f64]) -> Result<Vec<f64>, DivergenceError> {
    d.check_domain(w, true)?;
    Ok(w.iter().map(|&x| d.dg(x)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn l2_value_and_gradient_at_equal_weights() {
        let w = vec![0.25; 4];
        let v = divergence_value(&Divergence::L2, &w).unwrap();
        assert_relative_eq!(v, 0.25, epsilon = 1e-15);
        let g = divergence_gradient(&Divergence::L2, &w).unwrap();
        for gj in g {
            assert_relative_eq!(gj, 0.5, epsilon = 1e-15);
        }
    }

    #[test]
    fn entropy_extension_at_zero() {
        let v = divergence_value(&Divergence::Entropy, &[1.0, 0.0, 0.0]).unwrap();
        assert_eq!(v, 0.0);
        // gradient is undefined at 0
        let err = divergence_gradient(&Divergence::Entropy, &[1.0, 0.0, 0.0]);
        assert!(matches!(
            err,
            Err(DivergenceError::DomainViolation { index: 1, .. })
        ));
    }

    #[test]
    fn el_rejects_nonpositive_weights() {
        assert!(divergence_value(&Divergence::El, &[0.5, 0.0]).is_err());
        assert!(divergence_value(&Divergence::El, &[0.5, -0.1]).is_err());
    }

    #[test]
    fn cressie_read_limits_dispatch() {
        assert_eq!(Divergence::cressie_read(0.0).unwrap(), Divergence::Entropy);
        assert_eq!(Divergence::cressie_read(-1.0).unwrap(), Divergence::El);
        assert!(matches!(
            Divergence::cressie_read(0.5).unwrap(),
            Divergence::CressieRead(_)
        ));
        assert!(Divergence::cressie_read(1.5).is_err());
    }

    #[test]
    fn cressie_read_at_one_matches_l2_up_to_affine() {
        // g(x) = (x^2 - 1)/2 under gamma = 1, so 2*g(x) + 1 = x^2.
        let d = Divergence::cressie_read(1.0).unwrap();
        for &x in &[0.1, 0.37, 0.9, 1.4] {
            assert_relative_eq!(2.0 * d.g(x) + 1.0, x * x, epsilon = 1e-14);
            assert_relative_eq!(2.0 * d.dg(x), 2.0 * x, epsilon = 1e-14);
        }
    }

    /// Central finite differences as an independent check on the gradient.
    #[test]
    fn gradient_matches_finite_differences() {
        let divs = [
            Divergence::L2,
            Divergence::El,
            Divergence::Entropy,
            Divergence::CressieRead(0.5),
            Divergence::CressieRead(-0.5),
        ];
        let h = 1e-6;
        for d in &divs {
            for &x in &[0.05, 0.2, 0.5, 0.95] {
                let fd = (d.g(x + h) - d.g(x - h)) / (2.0 * h);
                assert_relative_eq!(d.dg(x), fd, max_relative = 1e-6);
            }
        }
    }
}
