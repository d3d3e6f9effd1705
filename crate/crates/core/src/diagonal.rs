//! Window-limited diagonal functions of the occupation numbers.
//!
//! A diagonal function reads only the sites in its window; the window is
//! tracked so that compositions stay local and so that memoization can key
//! on the window occupations alone. Values are complex: most physical
//! coefficients are real but the current operators carry a factor i.

use dashmap::DashMap;
use num_complex::Complex64;
use std::sync::Arc;

/// Cap on memo entries per function; beyond this, lookups still work but new
/// values are no longer inserted (keeps unbounded Monte Carlo runs in check).
const MEMO_CAP: usize = 1 << 21;

type EvalFn = dyn Fn(&[i64]) -> Complex64 + Send + Sync;

/// A diagonal operator symbol: a function of the occupation configuration
/// that reads only the sites in `window`.
#[derive(Clone)]
pub struct DiagonalFn {
    window: Arc<[usize]>,
    eval: Arc<EvalFn>,
}

impl std::fmt::Debug for DiagonalFn {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DiagonalFn")
            .field("window", &self.window)
            .finish_non_exhaustive()
    }
}

fn sorted_union(a: &[usize], b: &[usize]) -> Arc<[usize]> {
    let mut v: Vec<usize> = a.iter().chain(b.iter()).copied().collect();
    v.sort_unstable();
    v.dedup();
    v.into()
}

impl DiagonalFn {
    /// Constant function; empty window.
    pub fn constant(c: Complex64) -> Self {
        DiagonalFn {
            window: Arc::from([] as [usize; 0]),
            eval: Arc::new(move |_| c),
        }
    }

    /// Real constant.
    pub fn real_constant(c: f64) -> Self {
        Self::constant(Complex64::new(c, 0.0))
    }

    /// Function reading the given window. The window must contain every site
    /// the closure reads; it is deduplicated and sorted here.
    pub fn from_fn<F>(window: Vec<usize>, f: F) -> Self
    where
        F: Fn(&[i64]) -> Complex64 + Send + Sync + 'static,
    {
        let mut w = window;
        w.sort_unstable();
        w.dedup();
        DiagonalFn {
            window: w.into(),
            eval: Arc::new(f),
        }
    }

    /// Real-valued function on one site.
    pub fn on_site<F>(site: usize, f: F) -> Self
    where
        F: Fn(i64) -> f64 + Send + Sync + 'static,
    {
        DiagonalFn {
            window: Arc::from([site]),
            eval: Arc::new(move |eta| Complex64::new(f(eta[site]), 0.0)),
        }
    }

    /// Evaluate at a full configuration.
    pub fn eval(&self, eta: &[i64]) -> Complex64 {
        (self.eval)(eta)
    }

    /// Sites this function reads (sorted, deduplicated).
    pub fn window(&self) -> &[usize] {
        &self.window
    }

    /// Pointwise sum.
    pub fn add(&self, other: &DiagonalFn) -> DiagonalFn {
        let (f, g) = (self.clone(), other.clone());
        DiagonalFn {
            window: sorted_union(&self.window, &other.window),
            eval: Arc::new(move |eta| f.eval(eta) + g.eval(eta)),
        }
    }

    /// Pointwise product.
    pub fn mul(&self, other: &DiagonalFn) -> DiagonalFn {
        let (f, g) = (self.clone(), other.clone());
        DiagonalFn {
            window: sorted_union(&self.window, &other.window),
            eval: Arc::new(move |eta| f.eval(eta) * g.eval(eta)),
        }
    }

    /// Scalar multiple.
    pub fn scale(&self, c: Complex64) -> DiagonalFn {
        let f = self.clone();
        DiagonalFn {
            window: self.window.clone(),
            eval: Arc::new(move |eta| c * f.eval(eta)),
        }
    }

    /// Complex conjugate.
    pub fn conj(&self) -> DiagonalFn {
        let f = self.clone();
        DiagonalFn {
            window: self.window.clone(),
            eval: Arc::new(move |eta| f.eval(eta).conj()),
        }
    }

    /// Shifted evaluation `eta -> f(eta + rho)`. The window is unchanged
    /// (the shift is constant); only occupations inside the window matter.
    pub fn shift(&self, rho: &[i16]) -> DiagonalFn {
        let f = self.clone();
        let rho: Vec<i64> = rho.iter().map(|&v| v as i64).collect();
        DiagonalFn {
            window: self.window.clone(),
            eval: Arc::new(move |eta| {
                let shifted: Vec<i64> =
                    eta.iter().zip(rho.iter()).map(|(&n, &v)| n + v).collect();
                f.eval(&shifted)
            }),
        }
    }

    /// Discrete derivative along a move: `(D_rho f)(eta) = f(eta+rho) - f(eta)`.
    /// The window grows by the support of the move (a conservative union).
    pub fn discrete_derivative(&self, rho: &[i16]) -> DiagonalFn {
        let shifted = self.shift(rho);
        let f = self.clone();
        let supp: Vec<usize> = crate::moves::support(rho);
        DiagonalFn {
            window: sorted_union(&self.window, &supp),
            eval: Arc::new(move |eta| shifted.eval(eta) - f.eval(eta)),
        }
    }

    /// Memoized wrapper keyed on the window occupations. Values are pure, so
    /// concurrent races at worst recompute the same number.
    pub fn memoized(&self) -> DiagonalFn {
        // Memoizing a constant or empty-window function is pointless.
        if self.window.is_empty() {
            return self.clone();
        }
        let f = self.clone();
        let window = self.window.clone();
        let cache: DashMap<Box<[i64]>, Complex64> = DashMap::new();
        DiagonalFn {
            window: self.window.clone(),
            eval: Arc::new(move |eta| {
                let key: Box<[i64]> = window.iter().map(|&x| eta[x]).collect();
                if let Some(v) = cache.get(&key) {
                    return *v;
                }
                let v = f.eval(eta);
                if cache.len() < MEMO_CAP {
                    cache.insert(key, v);
                }
                v
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn c(re: f64) -> Complex64 {
        Complex64::new(re, 0.0)
    }

    #[test]
    fn window_bookkeeping() {
        let a = DiagonalFn::on_site(2, |n| n as f64);
        let b = DiagonalFn::on_site(0, |n| (n * n) as f64);
        let s = a.add(&b);
        assert_eq!(s.window(), &[0, 2]);
        assert_abs_diff_eq!(s.eval(&[3, 9, 5]).re, 5.0 + 9.0, epsilon = 1e-15);
        let p = a.mul(&b);
        assert_abs_diff_eq!(p.eval(&[3, 9, 5]).re, 45.0, epsilon = 1e-15);
    }

    #[test]
    fn discrete_derivative_of_square() {
        // f(eta) = eta_0^2, rho = (1, -1): D f = (eta_0+1)^2 - eta_0^2.
        let f = DiagonalFn::on_site(0, |n| (n * n) as f64);
        let d = f.discrete_derivative(&[1, -1]);
        assert_abs_diff_eq!(d.eval(&[3, 7]).re, 16.0 - 9.0, epsilon = 1e-15);
        // Window grew by the support of the move.
        assert_eq!(d.window(), &[0, 1]);
    }

    #[test]
    fn shift_reads_same_window() {
        let f = DiagonalFn::on_site(1, |n| n as f64);
        let s = f.shift(&[5, 2]);
        assert_eq!(s.window(), &[1]);
        assert_abs_diff_eq!(s.eval(&[0, 10]).re, 12.0, epsilon = 1e-15);
    }

    #[test]
    fn memoized_agrees_and_counts_window_only() {
        let f = DiagonalFn::from_fn(vec![0, 2], |eta| c((eta[0] * 10 + eta[2]) as f64));
        let m = f.memoized();
        for eta in [[1i64, 99, 3], [2, -5, 0], [1, 0, 3]] {
            assert_abs_diff_eq!(m.eval(&eta).re, f.eval(&eta).re, epsilon = 1e-15);
        }
    }
}
