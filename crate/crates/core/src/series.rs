//! Truncated formal power series in the density parameter with local
//! operators as coefficients.
//!
//! All products and commutators are truncated back to the declared order,
//! so series algebra stays finite. A series can also be collapsed to a
//! single operator at a numeric value of the expansion parameter.

use num_complex::Complex64;

use crate::localop::LocalOp;

/// `sum_k mu^k coeffs[k]`, truncated at `truncation` (inclusive).
#[derive(Clone, Debug)]
pub struct OperatorSeries {
    truncation: usize,
    coeffs: Vec<LocalOp>,
}

impl OperatorSeries {
    /// The zero series truncated at order `l`.
    pub fn zero(n_sites: usize, delta: f64, l: usize) -> Self {
        OperatorSeries {
            truncation: l,
            coeffs: (0..=l).map(|_| LocalOp::zero(n_sites, delta)).collect(),
        }
    }

    /// Series with the given coefficients (padded with zeros up to `l`;
    /// anything beyond `l` is dropped).
    pub fn from_coeffs(n_sites: usize, delta: f64, l: usize, coeffs: Vec<LocalOp>) -> Self {
        let mut s = Self::zero(n_sites, delta, l);
        for (k, c) in coeffs.into_iter().enumerate() {
            if k <= l {
                assert_eq!(c.n_sites(), n_sites);
                s.coeffs[k] = c;
            }
        }
        s
    }

    /// `mu^k * op` as a series truncated at `l`.
    pub fn monomial(k: usize, op: LocalOp, l: usize) -> Self {
        let (n, d) = (op.n_sites(), op.delta());
        let mut s = Self::zero(n, d, l);
        if k <= l {
            s.coeffs[k] = op;
        }
        s
    }

    pub fn truncation(&self) -> usize {
        self.truncation
    }

    pub fn coeff(&self, k: usize) -> &LocalOp {
        &self.coeffs[k]
    }

    pub fn coeffs(&self) -> &[LocalOp] {
        &self.coeffs
    }

    pub fn n_sites(&self) -> usize {
        self.coeffs[0].n_sites()
    }

    pub fn delta(&self) -> f64 {
        self.coeffs[0].delta()
    }

    /// Re-truncate to order `l` (drops coefficients above `l`, pads below).
    pub fn truncate(&self, l: usize) -> Self {
        let mut s = Self::zero(self.n_sites(), self.delta(), l);
        for k in 0..=l.min(self.truncation) {
            s.coeffs[k] = self.coeffs[k].clone();
        }
        s
    }

    pub fn add(&self, other: &OperatorSeries) -> Self {
        assert_eq!(self.truncation, other.truncation);
        let coeffs = self
            .coeffs
            .iter()
            .zip(other.coeffs.iter())
            .map(|(a, b)| a.add(b))
            .collect();
        OperatorSeries {
            truncation: self.truncation,
            coeffs,
        }
    }

    pub fn scale(&self, c: Complex64) -> Self {
        OperatorSeries {
            truncation: self.truncation,
            coeffs: self.coeffs.iter().map(|a| a.scale(c)).collect(),
        }
    }

    pub fn scale_real(&self, c: f64) -> Self {
        self.scale(Complex64::new(c, 0.0))
    }

    /// Coefficient-wise product with truncation:
    /// `(fg)_m = sum_{i+j=m} f_i g_j` for `m <= l`.
    pub fn compose(&self, other: &OperatorSeries) -> Self {
        assert_eq!(self.truncation, other.truncation);
        let l = self.truncation;
        let mut out = Self::zero(self.n_sites(), self.delta(), l);
        for m in 0..=l {
            let mut acc = LocalOp::zero(self.n_sites(), self.delta());
            for i in 0..=m {
                let (a, b) = (&self.coeffs[i], &other.coeffs[m - i]);
                if a.is_zero() || b.is_zero() {
                    continue;
                }
                acc = acc.add(&a.compose(b));
            }
            out.coeffs[m] = acc;
        }
        out
    }

    /// Coefficient-wise commutator with truncation.
    pub fn commutator(&self, other: &OperatorSeries) -> Self {
        assert_eq!(self.truncation, other.truncation);
        let l = self.truncation;
        let mut out = Self::zero(self.n_sites(), self.delta(), l);
        for m in 0..=l {
            let mut acc = LocalOp::zero(self.n_sites(), self.delta());
            for i in 0..=m {
                let (a, b) = (&self.coeffs[i], &other.coeffs[m - i]);
                if a.is_zero() || b.is_zero() {
                    continue;
                }
                acc = acc.add(&a.commutator(b));
            }
            out.coeffs[m] = acc;
        }
        out
    }

    pub fn adjoint(&self) -> Self {
        OperatorSeries {
            truncation: self.truncation,
            coeffs: self.coeffs.iter().map(|a| a.adjoint()).collect(),
        }
    }

    /// Collapse at a numeric parameter value: `sum_k mu^k coeffs[k]`.
    pub fn eval_at(&self, mu: f64) -> LocalOp {
        let mut acc = LocalOp::zero(self.n_sites(), self.delta());
        let mut p = 1.0;
        for c in &self.coeffs {
            if !c.is_zero() {
                acc = acc.add(&c.scale_real(p));
            }
            p *= mu;
        }
        acc
    }

    /// Largest climb among coefficients (bound for buffered comparisons).
    pub fn climb(&self) -> i64 {
        self.coeffs.iter().map(|c| c.climb()).max().unwrap_or(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{ChainGeometry, TruncatedFockSpace, DEFAULT_MAX_DIM};
    use crate::matrix::{max_abs, max_abs_diff_on};

    fn space(n_sites: usize, n_max: u32) -> TruncatedFockSpace {
        TruncatedFockSpace::new(
            ChainGeometry::new_any(n_sites).unwrap(),
            n_max,
            DEFAULT_MAX_DIM,
        )
        .unwrap()
    }

    #[test]
    fn truncation_drops_high_orders() {
        let d = LocalOp::interaction(2, 0.5);
        let v = LocalOp::hopping(2, 0.5, 1.0);
        let s = OperatorSeries::from_coeffs(
            2,
            0.5,
            2,
            vec![LocalOp::identity(2, 0.5), d.clone(), v.clone()],
        );
        let t = s.truncate(1);
        assert_eq!(t.truncation(), 1);
        assert!(!t.coeff(1).is_zero());
        // Evaluation of the truncated series has no second-order part.
        let sp = space(2, 4);
        let (m_full, _) = s.eval_at(1.0).to_matrix(&sp);
        let (m_trunc, _) = t.eval_at(1.0).to_matrix(&sp);
        let (vm, _) = v.to_matrix(&sp);
        let diff = m_full.to_dense() - m_trunc.to_dense();
        assert!(max_abs(&(diff - vm.to_dense())) < 1e-13);
    }

    #[test]
    fn self_commutator_vanishes() {
        let d = LocalOp::interaction(2, 0.5);
        let v = LocalOp::hopping(2, 0.5, 0.8);
        let s = OperatorSeries::from_coeffs(2, 0.5, 2, vec![d, v]);
        let c = s.commutator(&s);
        let sp = space(2, 5);
        let keep = sp.buffered_indices(c.climb());
        for k in 0..=2 {
            let (m, _) = c.coeff(k).to_matrix(&sp);
            let z = nalgebra::DMatrix::zeros(sp.dim(), sp.dim());
            assert!(
                max_abs_diff_on(&m.to_dense(), &z, &keep) < 1e-12,
                "order {k}"
            );
        }
    }

    #[test]
    fn composition_is_associative() {
        let d = LocalOp::interaction(2, 0.5);
        let v = LocalOp::hopping(2, 0.5, 0.8);
        let a = OperatorSeries::from_coeffs(2, 0.5, 2, vec![d.clone(), v.clone()]);
        let b = OperatorSeries::from_coeffs(2, 0.5, 2, vec![v.clone(), d.clone()]);
        let c = OperatorSeries::from_coeffs(2, 0.5, 2, vec![LocalOp::identity(2, 0.5), v]);
        let left = a.compose(&b).compose(&c);
        let right = a.compose(&b.compose(&c));
        let sp = space(2, 6);
        let mu = 0.3;
        let (lm, _) = left.eval_at(mu).to_matrix(&sp);
        let (rm, _) = right.eval_at(mu).to_matrix(&sp);
        let keep = sp.buffered_indices(left.climb().max(right.climb()));
        assert!(!keep.is_empty());
        assert!(max_abs_diff_on(&lm.to_dense(), &rm.to_dense(), &keep) < 1e-10);
    }
}
