//! Smooth cutoff (bump) function and the resonance weight built from it.
//!
//! The bump is even, identically 1 on [-1, 1], identically 0 outside
//! [-2, 2], and C-infinity in between, built from the standard exp(-1/t)
//! mollifier. The resonance weight of a move evaluates the bump, rescaled by
//! the resonance width `delta^-gamma`, on the level shift `Delta_rho E`.

use crate::moves::{self, Move};
use serde::{Deserialize, Serialize};

/// Smooth transition s(t): 0 for t <= 0, 1 for t >= 1, C-infinity, built as
/// sigma(t) / (sigma(t) + sigma(1-t)) with sigma(t) = exp(-1/t).
fn smooth_step(t: f64) -> f64 {
    if t <= 0.0 {
        0.0
    } else if t >= 1.0 {
        1.0
    } else {
        let a = (-1.0 / t).exp();
        let b = (-1.0 / (1.0 - t)).exp();
        a / (a + b)
    }
}

/// The smooth even bump function.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct CutoffFunction;

impl CutoffFunction {
    /// Evaluate the bump at `x`.
    pub fn xi(&self, x: f64) -> f64 {
        let ax = x.abs();
        if ax <= 1.0 {
            1.0
        } else if ax >= 2.0 {
            0.0
        } else {
            smooth_step(2.0 - ax)
        }
    }

    /// Evaluate the bump rescaled to plateau radius `a`: `xi(x / a)`.
    pub fn xi_scaled(&self, a: f64, x: f64) -> f64 {
        self.xi(x / a)
    }

    /// Integral of the unscaled bump over the real line. By the symmetry
    /// s(t) + s(1-t) = 1 of the transition, the shoulders integrate to
    /// exactly half their width, so the integral is 2 + 2 * (1/2) = 3.
    pub fn integral(&self) -> f64 {
        3.0
    }

    /// Integral of the rescaled bump: `3 a`.
    pub fn integral_scaled(&self, a: f64) -> f64 {
        3.0 * a
    }
}

/// Resonance weight: bump of width `delta^-gamma` applied to level shifts.
#[derive(Debug, Clone, Copy)]
pub struct ResonanceCutoff {
    pub bump: CutoffFunction,
    /// Plateau radius `a = delta^-gamma`.
    pub width: f64,
}

impl ResonanceCutoff {
    pub fn new(delta: f64, gamma: f64) -> Self {
        ResonanceCutoff {
            bump: CutoffFunction,
            width: delta.powf(-gamma),
        }
    }

    /// Resonance weight of a move at an integer configuration:
    /// `zeta_rho(eta) = xi_{delta^-gamma}(Delta_rho E(eta))`.
    pub fn zeta(&self, rho: &Move, eta: &[i64]) -> f64 {
        self.bump
            .xi_scaled(self.width, moves::delta_e(rho, eta) as f64)
    }

    /// Resonance weight at a real point of occupation space.
    pub fn zeta_real(&self, rho: &Move, eta: &[f64]) -> f64 {
        self.bump.xi_scaled(self.width, moves::delta_e_real(rho, eta))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn plateau_and_support() {
        let f = CutoffFunction;
        for x in [0.0, 0.5, -1.0, 1.0, 0.999] {
            assert_eq!(f.xi(x), 1.0, "plateau at {x}");
        }
        for x in [2.0, -2.0, 2.5, 10.0] {
            assert_eq!(f.xi(x), 0.0, "support at {x}");
        }
        for x in [1.2, 1.5, 1.9, -1.3] {
            let v = f.xi(x);
            assert!(v > 0.0 && v < 1.0, "shoulder at {x}: {v}");
        }
    }

    #[test]
    fn smoothness_and_symmetry() {
        let f = CutoffFunction;
        // Even function.
        for x in [0.3, 1.3, 1.7, 1.95] {
            assert_abs_diff_eq!(f.xi(x), f.xi(-x), epsilon = 1e-15);
        }
        // Monotone decreasing on the shoulder.
        let mut last = 1.0;
        for k in 0..100 {
            let x = 1.0 + (k as f64) / 99.0;
            let v = f.xi(x);
            assert!(v <= last + 1e-15);
            last = v;
        }
        // The symmetric construction puts the midpoint value exactly at 1/2.
        assert_abs_diff_eq!(f.xi(1.5), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn integral_closed_form() {
        // Composite Simpson on [0,2] against the closed form 3 = 2*(1+1/2).
        let f = CutoffFunction;
        let n = 40_000;
        let h = 2.0 / n as f64;
        let mut acc = f.xi(0.0) + f.xi(2.0);
        for k in 1..n {
            let w = if k % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * f.xi(k as f64 * h);
        }
        let integral = 2.0 * acc * h / 3.0; // even function: double the half-line
        assert_abs_diff_eq!(integral, f.integral(), epsilon = 1e-9);
    }

    /// Scaled evaluation: width 3, level shift 4.5 lands on the shoulder at
    /// 1.5, whose value is exactly 1/2 for the symmetric mollifier.
    #[test]
    fn zeta_shoulder_value() {
        let cut = ResonanceCutoff {
            bump: CutoffFunction,
            width: 3.0,
        };
        // rho=(1,0), eta=(2,0): Delta E = 2*2 + 1 = 5 -> xi(5/3) in (0,1).
        let z = cut.zeta(&vec![1, 0], &[2, 0]);
        assert!(z > 0.0 && z < 1.0);
        // Direct shoulder check at 1.5.
        assert_abs_diff_eq!(cut.bump.xi_scaled(3.0, 4.5), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn zeta_symmetric_under_reversal() {
        // zeta_{-rho}(eta + rho) = zeta_rho(eta): the weight seen from the
        // target configuration of the reversed move matches.
        let cut = ResonanceCutoff::new(0.3, 0.75);
        let rho: Move = vec![1, -1, 0];
        let eta = [4i64, 1, 2];
        let shifted: Vec<i64> = eta
            .iter()
            .zip(rho.iter())
            .map(|(&n, &v)| n + v as i64)
            .collect();
        let back: Move = rho.iter().map(|&v| -v).collect();
        assert_abs_diff_eq!(
            cut.zeta(&rho, &eta),
            cut.zeta(&back, &shifted),
            epsilon = 1e-15
        );
    }
}
