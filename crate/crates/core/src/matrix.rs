//! Dense and sparse operator matrices on the truncated Fock space.
//!
//! Oracle computations at desk dimensions (a few thousand) run dense through
//! nalgebra; Hamiltonians for Krylov time stepping stay in CSR form. Complex
//! entries throughout — Hamiltonians are real symmetric, currents pick up a
//! factor i and become imaginary antisymmetric.

use crate::error::{Error, Result};
use nalgebra::DMatrix;
use num_complex::Complex64;
use std::fmt::Write as _;

/// Dense complex matrix alias used by the oracles.
pub type CMat = DMatrix<Complex64>;

/// Compressed sparse row matrix with complex entries.
#[derive(Debug, Clone)]
pub struct CsrMatrix {
    pub dim: usize,
    /// Row pointer array of length `dim + 1`.
    pub indptr: Vec<usize>,
    /// Column indices, sorted within each row.
    pub cols: Vec<u32>,
    /// Entry values, aligned with `cols`.
    pub vals: Vec<Complex64>,
}

impl CsrMatrix {
    /// Build from (row, col, value) triplets; duplicates are summed and
    /// negligible entries dropped.
    pub fn from_triplets(dim: usize, mut triplets: Vec<(usize, usize, Complex64)>) -> Self {
        triplets.sort_unstable_by_key(|&(r, c, _)| (r, c));
        let mut indptr = vec![0usize; dim + 1];
        let mut cols = Vec::with_capacity(triplets.len());
        let mut vals: Vec<Complex64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            debug_assert!(r < dim && c < dim);
            if last == Some((r, c)) {
                *vals.last_mut().unwrap() += v;
            } else {
                indptr[r + 1] += 1;
                cols.push(c as u32);
                vals.push(v);
                last = Some((r, c));
            }
        }
        for r in 0..dim {
            indptr[r + 1] += indptr[r];
        }
        CsrMatrix {
            dim,
            indptr,
            cols,
            vals,
        }
    }

    /// Number of stored entries.
    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    /// y = A x.
    pub fn apply(&self, x: &[Complex64], y: &mut [Complex64]) {
        debug_assert_eq!(x.len(), self.dim);
        debug_assert_eq!(y.len(), self.dim);
        for r in 0..self.dim {
            let mut acc = Complex64::new(0.0, 0.0);
            for k in self.indptr[r]..self.indptr[r + 1] {
                acc += self.vals[k] * x[self.cols[k] as usize];
            }
            y[r] = acc;
        }
    }

    /// Dense copy.
    pub fn to_dense(&self) -> CMat {
        let mut m = CMat::zeros(self.dim, self.dim);
        for r in 0..self.dim {
            for k in self.indptr[r]..self.indptr[r + 1] {
                m[(r, self.cols[k] as usize)] += self.vals[k];
            }
        }
        m
    }

    /// True when all entries are real up to `tol`.
    pub fn is_real(&self, tol: f64) -> bool {
        self.vals.iter().all(|v| v.im.abs() <= tol)
    }

    /// Largest |entry(A) - entry(A†)| over all index pairs.
    pub fn hermiticity_defect(&self) -> f64 {
        // Cheap route through the dense copy is fine at oracle dimensions;
        // for large matrices walk the pattern instead.
        let mut defect: f64 = 0.0;
        let m = self.to_dense();
        for r in 0..self.dim {
            for c in r..self.dim {
                defect = defect.max((m[(r, c)] - m[(c, r)].conj()).norm());
            }
        }
        defect
    }
}

/// Operator matrix: sparse or dense storage behind one interface.
#[derive(Debug, Clone)]
pub struct OperatorMatrix {
    storage: Storage,
}

#[derive(Debug, Clone)]
enum Storage {
    Dense(CMat),
    Sparse(CsrMatrix),
}

impl OperatorMatrix {
    pub fn from_dense(m: CMat) -> Self {
        assert_eq!(m.nrows(), m.ncols());
        OperatorMatrix {
            storage: Storage::Dense(m),
        }
    }

    pub fn from_sparse(m: CsrMatrix) -> Self {
        OperatorMatrix {
            storage: Storage::Sparse(m),
        }
    }

    pub fn dim(&self) -> usize {
        match &self.storage {
            Storage::Dense(m) => m.nrows(),
            Storage::Sparse(m) => m.dim,
        }
    }

    pub fn zeros(dim: usize) -> Self {
        OperatorMatrix::from_sparse(CsrMatrix::from_triplets(dim, Vec::new()))
    }

    /// Dense view (copies when sparse).
    pub fn to_dense(&self) -> CMat {
        match &self.storage {
            Storage::Dense(m) => m.clone(),
            Storage::Sparse(m) => m.to_dense(),
        }
    }

    /// Sparse view (copies when dense).
    pub fn to_sparse(&self) -> CsrMatrix {
        match &self.storage {
            Storage::Sparse(m) => m.clone(),
            Storage::Dense(m) => {
                let mut triplets = Vec::new();
                for r in 0..m.nrows() {
                    for c in 0..m.ncols() {
                        let v = m[(r, c)];
                        if v.norm_sqr() > 0.0 {
                            triplets.push((r, c, v));
                        }
                    }
                }
                CsrMatrix::from_triplets(m.nrows(), triplets)
            }
        }
    }

    pub fn as_sparse(&self) -> Option<&CsrMatrix> {
        match &self.storage {
            Storage::Sparse(m) => Some(m),
            Storage::Dense(_) => None,
        }
    }

    /// y = A x.
    pub fn apply(&self, x: &[Complex64], y: &mut [Complex64]) {
        match &self.storage {
            Storage::Sparse(m) => m.apply(x, y),
            Storage::Dense(m) => {
                for r in 0..m.nrows() {
                    let mut acc = Complex64::new(0.0, 0.0);
                    for c in 0..m.ncols() {
                        acc += m[(r, c)] * x[c];
                    }
                    y[r] = acc;
                }
            }
        }
    }

    /// Largest |entry(A) - entry(A†)|; zero for a self-adjoint operator.
    pub fn hermiticity_defect(&self) -> f64 {
        match &self.storage {
            Storage::Sparse(m) => m.hermiticity_defect(),
            Storage::Dense(m) => {
                let mut d: f64 = 0.0;
                for r in 0..m.nrows() {
                    for c in r..m.ncols() {
                        d = d.max((m[(r, c)] - m[(c, r)].conj()).norm());
                    }
                }
                d
            }
        }
    }

    /// Largest |entry(A) + entry(A†)|; zero for a skew-adjoint operator.
    pub fn skewness_defect(&self) -> f64 {
        let m = self.to_dense();
        let mut d: f64 = 0.0;
        for r in 0..m.nrows() {
            for c in r..m.ncols() {
                d = d.max((m[(r, c)] + m[(c, r)].conj()).norm());
            }
        }
        d
    }

    /// Extract the real part as a dense real matrix, checking that imaginary
    /// parts are negligible.
    pub fn to_dense_real(&self, tol: f64) -> Result<DMatrix<f64>> {
        let m = self.to_dense();
        let mut out = DMatrix::<f64>::zeros(m.nrows(), m.ncols());
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                let v = m[(r, c)];
                if v.im.abs() > tol {
                    return Err(Error::numerical(format!(
                        "matrix expected real, found imaginary part {:.3e} at ({r},{c})",
                        v.im
                    )));
                }
                out[(r, c)] = v.re;
            }
        }
        Ok(out)
    }
}

/// Largest absolute entry of a dense matrix.
pub fn max_abs(m: &CMat) -> f64 {
    m.iter().map(|v| v.norm()).fold(0.0, f64::max)
}

/// Largest absolute entry of the difference A - B.
pub fn max_abs_diff(a: &CMat, b: &CMat) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let mut d: f64 = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        d = d.max((x - y).norm());
    }
    d
}

/// Dense commutator [A, B] = AB - BA.
pub fn commutator(a: &CMat, b: &CMat) -> CMat {
    a * b - b * a
}

/// Largest absolute entry of A - B restricted to rows and columns in `keep`.
pub fn max_abs_diff_on(a: &CMat, b: &CMat, keep: &[usize]) -> f64 {
    let mut d: f64 = 0.0;
    for &r in keep {
        for &c in keep {
            d = d.max((a[(r, c)] - b[(r, c)]).norm());
        }
    }
    d
}

/// Format a float with 17 significant digits, the fixed CSV convention.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Serialize a matrix to coordinate CSV: `row,col,re,im` with one line per
/// stored entry, 17 significant digits, LF line endings.
pub fn matrix_to_coordinate_csv(m: &OperatorMatrix) -> String {
    let csr = m.to_sparse();
    let mut out = String::from("row,col,re,im\n");
    for r in 0..csr.dim {
        for k in csr.indptr[r]..csr.indptr[r + 1] {
            let v = csr.vals[k];
            let _ = writeln!(
                out,
                "{},{},{},{}",
                r,
                csr.cols[k],
                fmt_f64(v.re),
                fmt_f64(v.im)
            );
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn csr_roundtrip_and_apply() {
        let t = vec![
            (0, 1, c(2.0, 0.0)),
            (1, 0, c(2.0, 0.0)),
            (0, 1, c(1.0, 0.0)), // duplicate sums
            (2, 2, c(0.0, 1.0)),
        ];
        let m = CsrMatrix::from_triplets(3, t);
        assert_eq!(m.nnz(), 3);
        let x = vec![c(1.0, 0.0), c(1.0, 0.0), c(1.0, 0.0)];
        let mut y = vec![c(0.0, 0.0); 3];
        m.apply(&x, &mut y);
        assert_abs_diff_eq!(y[0].re, 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(y[1].re, 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(y[2].im, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn adjoint_defects() {
        let herm = CsrMatrix::from_triplets(
            2,
            vec![(0, 1, c(1.0, 2.0)), (1, 0, c(1.0, -2.0))],
        );
        assert_abs_diff_eq!(
            OperatorMatrix::from_sparse(herm).hermiticity_defect(),
            0.0,
            epsilon = 1e-15
        );
        let skew = CsrMatrix::from_triplets(
            2,
            vec![(0, 1, c(1.0, 0.0)), (1, 0, c(-1.0, 0.0))],
        );
        assert_abs_diff_eq!(
            OperatorMatrix::from_sparse(skew).skewness_defect(),
            0.0,
            epsilon = 1e-15
        );
    }

    #[test]
    fn coordinate_csv_format() {
        let m = OperatorMatrix::from_sparse(CsrMatrix::from_triplets(
            2,
            vec![(0, 0, c(1.5, 0.0)), (1, 0, c(0.0, -0.25))],
        ));
        let csv = matrix_to_coordinate_csv(&m);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "row,col,re,im");
        assert!(lines[1].starts_with("0,0,1.5000000000000000e0,"));
        assert!(lines[2].starts_with("1,0,0.0000000000000000e0,-2.5000000000000000e-1"));
    }
}
