//! Smoothed indicator of the good (non-resonant) set around a site.
//!
//! The indicator is one minus the convolution of the resonant-zone
//! characteristic function with a normalized product kernel. Zone
//! membership reads only a finite window of coordinates, so the
//! convolution reduces to an integral over the window; it is evaluated
//! either by tensor-product Gauss-Legendre quadrature or by seeded Monte
//! Carlo, both deterministic.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cutoff::CutoffFunction;
use crate::error::{Error, Result};
use crate::geometry::{GeometryParams, ResonantZone};
use crate::moves::Move;

/// How the window convolution is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum QuadratureSpec {
    /// Tensor-product Gauss-Legendre with this many nodes per window
    /// coordinate; construction fails if the grid exceeds `max_evals`.
    TensorGauss {
        nodes_per_coord: usize,
        max_evals: usize,
    },
    /// Kernel-distributed Monte Carlo offsets from a seeded stream.
    MonteCarlo { samples: usize, seed: u64 },
}

impl Default for QuadratureSpec {
    fn default() -> Self {
        QuadratureSpec::TensorGauss {
            nodes_per_coord: 8,
            max_evals: QuadratureSpec::DEFAULT_BUDGET,
        }
    }
}

impl QuadratureSpec {
    pub const DEFAULT_BUDGET: usize = 2_000_000;
    pub const DEFAULT_MC_SAMPLES: usize = 100_000;

    /// Number of grid evaluations a tensor rule needs on a window, if it
    /// fits in a `usize`.
    pub fn tensor_evals(nodes_per_coord: usize, window_len: usize) -> Option<usize> {
        let mut total: usize = 1;
        for _ in 0..window_len {
            total = total.checked_mul(nodes_per_coord)?;
        }
        Some(total)
    }

    /// The default tensor rule when it fits the budget, Monte Carlo above.
    pub fn auto(window_len: usize, seed: u64) -> QuadratureSpec {
        match QuadratureSpec::tensor_evals(8, window_len) {
            Some(evals) if evals <= QuadratureSpec::DEFAULT_BUDGET => QuadratureSpec::default(),
            _ => QuadratureSpec::MonteCarlo {
                samples: QuadratureSpec::DEFAULT_MC_SAMPLES,
                seed,
            },
        }
    }
}

/// Gauss-Legendre nodes and weights on (-1, 1), weights summing to 2.
fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (p, dp) = legendre_with_derivative(n, x);
            let step = p / dp;
            x -= step;
            if step.abs() < 1e-15 {
                break;
            }
        }
        let (_, dp) = legendre_with_derivative(n, x);
        nodes[i] = x;
        weights[i] = 2.0 / ((1.0 - x * x) * dp * dp);
    }
    (nodes, weights)
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    debug_assert!(n >= 1);
    let (mut prev, mut cur) = (1.0f64, x);
    for k in 2..=n {
        let next = ((2 * k - 1) as f64 * x * cur - (k - 1) as f64 * prev) / k as f64;
        prev = cur;
        cur = next;
    }
    let derivative = n as f64 * (x * cur - prev) / (x * x - 1.0);
    (cur, derivative)
}

/// Evaluates the smoothed indicator of one resonant zone.
#[derive(Debug, Clone)]
pub struct IndicatorEvaluator {
    zone: ResonantZone,
    quadrature: QuadratureSpec,
    width: f64,
    bump: CutoffFunction,
    /// Per-coordinate offsets and normalized weights (tensor rule only).
    offsets_1d: Vec<f64>,
    weights_1d: Vec<f64>,
}

impl IndicatorEvaluator {
    pub fn new(
        zone: ResonantZone,
        params: &GeometryParams,
        quadrature: QuadratureSpec,
    ) -> Result<IndicatorEvaluator> {
        params.validate()?;
        let width = params.width();
        let bump = CutoffFunction::default();
        let (offsets_1d, weights_1d) = match quadrature {
            QuadratureSpec::TensorGauss {
                nodes_per_coord,
                max_evals,
            } => {
                if nodes_per_coord < 2 {
                    return Err(Error::config("tensor rule needs at least 2 nodes"));
                }
                match QuadratureSpec::tensor_evals(nodes_per_coord, zone.window().len()) {
                    Some(evals) if evals <= max_evals => {}
                    _ => {
                        return Err(Error::capacity(format!(
                            "tensor quadrature needs {nodes_per_coord}^{} evaluations, budget is {max_evals}",
                            zone.window().len()
                        )));
                    }
                }
                let (base_nodes, base_weights) = gauss_legendre(nodes_per_coord);
                let offsets: Vec<f64> = base_nodes.iter().map(|&t| 2.0 * width * t).collect();
                let mut weights: Vec<f64> = base_weights
                    .iter()
                    .zip(&offsets)
                    .map(|(&g, &z)| g * bump.xi_scaled(width, z))
                    .collect();
                let total: f64 = weights.iter().sum();
                for w in weights.iter_mut() {
                    *w /= total;
                }
                (offsets, weights)
            }
            QuadratureSpec::MonteCarlo { samples, .. } => {
                if samples == 0 {
                    return Err(Error::config("Monte Carlo rule needs at least 1 sample"));
                }
                (Vec::new(), Vec::new())
            }
        };
        Ok(IndicatorEvaluator {
            zone,
            quadrature,
            width,
            bump,
            offsets_1d,
            weights_1d,
        })
    }

    /// Build the zone around `x` and wrap it in an evaluator.
    pub fn around(
        x: usize,
        params: &GeometryParams,
        n_sites: usize,
        quadrature: QuadratureSpec,
    ) -> Result<IndicatorEvaluator> {
        let zone = ResonantZone::build(x, params, n_sites)?;
        IndicatorEvaluator::new(zone, params, quadrature)
    }

    pub fn zone(&self) -> &ResonantZone {
        &self.zone
    }

    pub fn quadrature(&self) -> QuadratureSpec {
        self.quadrature
    }

    /// Sites the indicator reads.
    pub fn window(&self) -> &[usize] {
        self.zone.window()
    }

    /// Visit every quadrature offset (indexed by window position) with its
    /// weight; the visitor returns `false` to stop early.
    fn visit_offsets(&self, mut visit: impl FnMut(&[f64], f64) -> bool) {
        let len = self.zone.window().len();
        match self.quadrature {
            QuadratureSpec::TensorGauss {
                nodes_per_coord, ..
            } => {
                let mut digits = vec![0usize; len];
                let mut offset = vec![self.offsets_1d[0]; len];
                loop {
                    let weight: f64 = digits.iter().map(|&d| self.weights_1d[d]).product();
                    if !visit(&offset, weight) {
                        return;
                    }
                    // Advance the odometer.
                    let mut k = 0;
                    loop {
                        if k == len {
                            return;
                        }
                        digits[k] += 1;
                        if digits[k] < nodes_per_coord {
                            offset[k] = self.offsets_1d[digits[k]];
                            break;
                        }
                        digits[k] = 0;
                        offset[k] = self.offsets_1d[0];
                        k += 1;
                    }
                }
            }
            QuadratureSpec::MonteCarlo { samples, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let weight = 1.0 / samples as f64;
                let mut offset = vec![0.0; len];
                for _ in 0..samples {
                    for slot in offset.iter_mut() {
                        // Rejection sampling from the kernel density.
                        loop {
                            let z = rng.gen_range(-2.0 * self.width..2.0 * self.width);
                            let u: f64 = rng.gen();
                            if u <= self.bump.xi_scaled(self.width, z) {
                                *slot = z;
                                break;
                            }
                        }
                    }
                    if !visit(&offset, weight) {
                        return;
                    }
                }
            }
        }
    }

    /// The indicator value: the kernel mass lying outside the zone,
    /// normalized by the accumulated mass so the all-outside and
    /// all-inside cases return exactly 1 and 0.
    pub fn theta(&self, eta: &[f64]) -> f64 {
        let window = self.zone.window();
        let mut point = eta.to_vec();
        let mut inside = 0.0;
        let mut outside = 0.0;
        let mut hint = 0usize;
        self.visit_offsets(|offset, weight| {
            for (k, &site) in window.iter().enumerate() {
                point[site] = eta[site] + offset[k];
            }
            if self.zone.contains_hinted(&point, &mut hint) {
                inside += weight;
            } else {
                outside += weight;
            }
            true
        });
        if outside == 0.0 {
            return 0.0;
        }
        if inside == 0.0 {
            return 1.0;
        }
        (outside / (inside + outside)).clamp(0.0, 1.0)
    }

    /// True iff some quadrature node escapes the zone (hence theta > 0;
    /// every node carries positive kernel density).
    pub fn theta_positive(&self, eta: &[f64]) -> bool {
        let window = self.zone.window();
        let mut point = eta.to_vec();
        let mut found = false;
        let mut hint = 0usize;
        self.visit_offsets(|offset, weight| {
            debug_assert!(weight > 0.0);
            for (k, &site) in window.iter().enumerate() {
                point[site] = eta[site] + offset[k];
            }
            if !self.zone.contains_hinted(&point, &mut hint) {
                found = true;
                return false;
            }
            true
        });
        found
    }

    /// True iff some quadrature node lands inside the zone (hence
    /// theta < 1); the complement of a full-weight average.
    pub fn theta_below_one(&self, eta: &[f64]) -> bool {
        let window = self.zone.window();
        let mut point = eta.to_vec();
        let mut found = false;
        let mut hint = 0usize;
        self.visit_offsets(|offset, weight| {
            debug_assert!(weight > 0.0);
            for (k, &site) in window.iter().enumerate() {
                point[site] = eta[site] + offset[k];
            }
            if self.zone.contains_hinted(&point, &mut hint) {
                found = true;
                return false;
            }
            true
        });
        found
    }

    /// `theta(a) - theta(b)` evaluated with shared offsets, so pointwise
    /// equal zone memberships give an exact zero.
    pub fn difference(&self, eta_a: &[f64], eta_b: &[f64]) -> f64 {
        let window = self.zone.window();
        let mut point_a = eta_a.to_vec();
        let mut point_b = eta_b.to_vec();
        let mut acc = 0.0;
        let mut hint_a = 0usize;
        let mut hint_b = 0usize;
        self.visit_offsets(|offset, weight| {
            for (k, &site) in window.iter().enumerate() {
                point_a[site] = eta_a[site] + offset[k];
                point_b[site] = eta_b[site] + offset[k];
            }
            let inside_a = self.zone.contains_hinted(&point_a, &mut hint_a);
            let inside_b = self.zone.contains_hinted(&point_b, &mut hint_b);
            if inside_a != inside_b {
                // theta counts outside mass: a outside, b inside -> +w.
                acc += if inside_b { weight } else { -weight };
            }
            true
        });
        acc
    }

    /// Discrete derivative `theta(eta + rho) - theta(eta)` along a move,
    /// with shared offsets.
    pub fn discrete_derivative(&self, eta: &[f64], rho: &Move) -> f64 {
        let shifted: Vec<f64> = eta
            .iter()
            .zip(rho.iter())
            .map(|(e, &m)| e + m as f64)
            .collect();
        self.difference(&shifted, eta)
    }
}

/// One-shot indicator value around a site.
pub fn theta(
    eta: &[f64],
    x: usize,
    params: &GeometryParams,
    n_sites: usize,
    quadrature: QuadratureSpec,
) -> Result<f64> {
    Ok(IndicatorEvaluator::around(x, params, n_sites, quadrature)?.theta(eta))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> GeometryParams {
        GeometryParams::new(64.0, 0.3, 0.75, 2, 1, 1).unwrap()
    }

    /// A far-away point: every move's inner product is enormous, at any
    /// offset within the kernel box.
    fn far_point(n: usize, w: f64) -> Vec<f64> {
        (0..n).map(|i| 1e9 * w * 3.0f64.powi(i as i32)).collect()
    }

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        let (x, w) = gauss_legendre(6);
        let total: f64 = w.iter().sum();
        assert!((total - 2.0).abs() < 1e-12);
        // Degree-11 monomials are exact for a 6-point rule.
        for k in [2usize, 4, 8, 10] {
            let got: f64 = x.iter().zip(&w).map(|(&xi, &wi)| wi * xi.powi(k as i32)).sum();
            let exact = 2.0 / (k as f64 + 1.0);
            assert!((got - exact).abs() < 1e-12, "x^{k}: {got} vs {exact}");
        }
    }

    #[test]
    fn kernel_avoiding_points_have_theta_one() {
        let n = 6;
        let p = params();
        let eval = IndicatorEvaluator::around(2, &p, n, QuadratureSpec::default()).unwrap();
        let eta = far_point(n, p.width());
        assert_eq!(eval.theta(&eta), 1.0);
        assert!(eval.theta_positive(&eta));
        // Monte Carlo agrees exactly here: every sample is outside.
        let mc = IndicatorEvaluator::around(
            2,
            &p,
            n,
            QuadratureSpec::MonteCarlo {
                samples: 2_000,
                seed: 5,
            },
        )
        .unwrap();
        assert_eq!(mc.theta(&eta), 1.0);
    }

    #[test]
    fn deep_resonant_points_have_theta_zero() {
        let n = 6;
        let p = params();
        let eval = IndicatorEvaluator::around(2, &p, n, QuadratureSpec::default()).unwrap();
        // Exactly multi-resonant with the hop pair at the anchor; every
        // kernel offset stays well inside the first flattening threshold.
        let eta = vec![4.0; n];
        assert_eq!(eval.theta(&eta), 0.0);
        assert!(!eval.theta_positive(&eta));
        let mc = IndicatorEvaluator::around(
            2,
            &p,
            n,
            QuadratureSpec::MonteCarlo {
                samples: 2_000,
                seed: 6,
            },
        )
        .unwrap();
        assert_eq!(mc.theta(&eta), 0.0);
    }

    #[test]
    fn boundary_point_refinements_agree() {
        let n = 4;
        let p = params();
        let w = p.width();
        // Sit exactly on the boundary of the single-site resonance slab at
        // the anchor; all other coordinates are far away, so the indicator
        // marginalizes to one coordinate and every even-node rule returns
        // one half exactly.
        let mut eta = far_point(n, w);
        eta[2] = p.l * w;
        let mut values = Vec::new();
        for nodes in [6usize, 8, 16] {
            let spec = QuadratureSpec::TensorGauss {
                nodes_per_coord: nodes,
                max_evals: 2_000_000,
            };
            let eval = IndicatorEvaluator::around(2, &p, n, spec).unwrap();
            values.push(eval.theta(&eta));
        }
        for pair in values.windows(2) {
            assert!(
                (pair[0] - pair[1]).abs() < 1e-3,
                "refinements disagree: {values:?}"
            );
        }
        assert!((values[0] - 0.5).abs() < 1e-6, "half-mass point: {values:?}");
    }

    #[test]
    fn quadrature_budget_is_enforced() {
        let n = 6;
        let p = params();
        let spec = QuadratureSpec::TensorGauss {
            nodes_per_coord: 8,
            max_evals: 1_000,
        };
        assert!(matches!(
            IndicatorEvaluator::around(2, &p, n, spec),
            Err(Error::Capacity(_))
        ));
        // The automatic policy switches to Monte Carlo for huge windows.
        assert!(matches!(
            QuadratureSpec::auto(40, 1),
            QuadratureSpec::MonteCarlo { .. }
        ));
        assert!(matches!(
            QuadratureSpec::auto(5, 1),
            QuadratureSpec::TensorGauss { .. }
        ));
    }

    #[test]
    fn monte_carlo_is_deterministic_and_consistent() {
        let n = 6;
        let p = params();
        let w = p.width();
        let mut eta = far_point(n, w);
        eta[2] = p.l * w;
        let spec = QuadratureSpec::MonteCarlo {
            samples: 20_000,
            seed: 11,
        };
        let eval = IndicatorEvaluator::around(2, &p, n, spec).unwrap();
        let a = eval.theta(&eta);
        let b = eval.theta(&eta);
        assert_eq!(a.to_bits(), b.to_bits());
        assert!((a - 0.5).abs() < 0.05, "MC half-mass estimate {a}");
    }

    #[test]
    fn theta_ignores_coordinates_outside_the_window() {
        let n = 12;
        let p = params();
        let spec = QuadratureSpec::TensorGauss {
            nodes_per_coord: 2,
            max_evals: 2_000_000,
        };
        let eval = IndicatorEvaluator::around(1, &p, n, spec).unwrap();
        let outside: Vec<usize> = (0..n)
            .filter(|s| !eval.window().contains(s))
            .collect();
        assert!(
            outside.len() >= 2,
            "need exterior sites for the permutation test"
        );
        let mut eta = far_point(n, p.width());
        eta[1] = 0.4 * p.width();
        let base = eval.theta(&eta);
        // Swap two exterior coordinates.
        let mut permuted = eta.clone();
        permuted.swap(outside[0], outside[1]);
        assert_eq!(base.to_bits(), eval.theta(&permuted).to_bits());
    }

    #[test]
    fn shared_offsets_give_exact_zero_differences() {
        let n = 6;
        let p = params();
        let eval = IndicatorEvaluator::around(2, &p, n, QuadratureSpec::default()).unwrap();
        let w = p.width();
        let far = far_point(n, w);
        let deep = vec![4.0; n];
        // Same point, and pairs with pointwise-equal memberships.
        assert_eq!(eval.difference(&far, &far), 0.0);
        let mut far_shift = far.clone();
        for v in far_shift.iter_mut() {
            *v += 0.3 * w;
        }
        assert_eq!(eval.difference(&far, &far_shift), 0.0);
        let deep_shift: Vec<f64> = deep.iter().map(|v| v + 0.1).collect();
        assert_eq!(eval.difference(&deep, &deep_shift), 0.0);
        // A genuinely different pair is nonzero.
        let boundary = {
            let mut e = far.clone();
            e[2] = p.l * w;
            e
        };
        assert!(eval.difference(&far, &boundary) > 0.4);
    }
}
