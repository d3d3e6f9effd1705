//! Time evolution on truncated spaces and the dynamics experiments.
//!
//! The Hamiltonians here conserve the total particle number, so the
//! truncated space splits into number sectors whose blocks are
//! eigendecomposed independently; Heisenberg evolution, time integrals,
//! and time derivatives then act entrywise in each block's eigenbasis.
//! A dense full-space evolver and a Krylov stepper cover operators and
//! states that do not fit the sector fast path.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::collections::HashMap;

use crate::current::{bare_observable_tail, CurrentDecomposition};
use crate::error::{Error, Result};
use crate::gibbs::GibbsSampler;
use crate::lattice::{ChainGeometry, TruncatedFockSpace};
use crate::localop::LocalOp;
use crate::matrix::CMat;

/// Dense complex column vector over a truncated space.
pub type CVec = DVector<Complex64>;

const I: Complex64 = Complex64::new(0.0, 1.0);

/// Maximum allowed orthonormality defect of an eigenvector matrix.
const EIGEN_UNITARITY_TOL: f64 = 1e-9;

/// Apply a local operator to a dense state vector, column by column.
/// Targets outside the space are dropped, matching the truncated matrix.
pub fn apply_local(op: &LocalOp, space: &TruncatedFockSpace, x: &CVec) -> CVec {
    let mut y = CVec::zeros(space.dim());
    for j in 0..space.dim() {
        let xj = x[j];
        if xj == Complex64::new(0.0, 0.0) {
            continue;
        }
        let eta = space.config_at(j);
        for (target, amp) in op.column(&eta) {
            if let Some(i) = space.index_of(&target) {
                y[i] += amp * xj;
            }
        }
    }
    y
}

/// Eigendecomposition of a Hermitian matrix: unitary `v` and real
/// eigenvalues, with an exact fast path for diagonal input so that
/// coupling-free Hamiltonians evolve without rounding noise.
fn hermitian_eigen(m: &CMat) -> Result<(CMat, Vec<f64>)> {
    let d = m.nrows();
    let scale = m.iter().map(|v| v.norm()).fold(0.0f64, f64::max);
    let mut defect = 0.0f64;
    for j in 0..d {
        for k in 0..d {
            defect = defect.max((m[(j, k)] - m[(k, j)].conj()).norm());
        }
    }
    if defect > 1e-10 * (1.0 + scale) {
        return Err(Error::numerical(format!(
            "matrix is not self-adjoint: defect {defect:.3e}"
        )));
    }
    let diagonal = (0..d).all(|j| {
        (0..d).all(|k| j == k || m[(j, k)] == Complex64::new(0.0, 0.0))
    });
    if diagonal {
        let lam: Vec<f64> = (0..d).map(|j| m[(j, j)].re).collect();
        return Ok((CMat::identity(d, d), lam));
    }
    let eig = m.clone().symmetric_eigen();
    let v = eig.eigenvectors;
    let lam: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    let mut ortho = 0.0f64;
    let gram = v.adjoint() * &v;
    for j in 0..d {
        for k in 0..d {
            let want = if j == k { 1.0 } else { 0.0 };
            ortho = ortho.max((gram[(j, k)] - Complex64::new(want, 0.0)).norm());
        }
    }
    if ortho > EIGEN_UNITARITY_TOL {
        return Err(Error::numerical(format!(
            "eigenvector orthonormality defect {ortho:.3e}"
        )));
    }
    Ok((v, lam))
}

// ---------------------------------------------------------------------------
// Number sectors
// ---------------------------------------------------------------------------

/// Partition of a truncated space into total-occupation sectors.
pub struct NumberSectors {
    /// Global basis indices per sector, ascending within each sector.
    sectors: Vec<Vec<usize>>,
    /// Global index -> (sector, position within sector).
    locate: Vec<(u32, u32)>,
}

impl NumberSectors {
    pub fn build(space: &TruncatedFockSpace) -> NumberSectors {
        let mut by_total: HashMap<i64, Vec<usize>> = HashMap::new();
        for j in 0..space.dim() {
            let total: i64 = space.config_at(j).iter().sum();
            by_total.entry(total).or_default().push(j);
        }
        let mut totals: Vec<i64> = by_total.keys().copied().collect();
        totals.sort_unstable();
        let sectors: Vec<Vec<usize>> = totals.iter().map(|t| by_total[t].clone()).collect();
        let mut locate = vec![(0u32, 0u32); space.dim()];
        for (s, idx) in sectors.iter().enumerate() {
            for (p, &j) in idx.iter().enumerate() {
                locate[j] = (s as u32, p as u32);
            }
        }
        NumberSectors { sectors, locate }
    }

    pub fn len(&self) -> usize {
        self.sectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sectors.is_empty()
    }

    pub fn indices(&self, sector: usize) -> &[usize] {
        &self.sectors[sector]
    }
}

/// A number-conserving operator stored as one dense block per sector.
#[derive(Clone)]
pub struct SectorMatrix {
    blocks: Vec<CMat>,
}

impl SectorMatrix {
    /// Extract the sector blocks of a local operator. Fails if any
    /// nonzero element crosses sectors, i.e. the operator does not
    /// conserve the particle number. Targets outside the space are
    /// dropped, matching the truncated dense matrix.
    pub fn from_local(
        op: &LocalOp,
        space: &TruncatedFockSpace,
        sectors: &NumberSectors,
    ) -> Result<SectorMatrix> {
        let mut blocks: Vec<CMat> = sectors
            .sectors
            .iter()
            .map(|idx| CMat::zeros(idx.len(), idx.len()))
            .collect();
        for (s, idx) in sectors.sectors.iter().enumerate() {
            for (pos, &j) in idx.iter().enumerate() {
                let eta = space.config_at(j);
                for (target, amp) in op.column(&eta) {
                    let Some(i) = space.index_of(&target) else {
                        continue;
                    };
                    let (ts, tp) = sectors.locate[i];
                    if ts as usize != s {
                        return Err(Error::config(format!(
                            "operator does not conserve particle number: \
                             element between totals of sectors {s} and {ts}"
                        )));
                    }
                    blocks[s][(tp as usize, pos)] += amp;
                }
            }
        }
        Ok(SectorMatrix { blocks })
    }

    pub fn zeros_like(&self) -> SectorMatrix {
        SectorMatrix {
            blocks: self
                .blocks
                .iter()
                .map(|b| CMat::zeros(b.nrows(), b.ncols()))
                .collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.blocks
            .iter()
            .flat_map(|b| b.iter())
            .map(|v| v.norm())
            .fold(0.0, f64::max)
    }

    pub fn scale(&self, c: Complex64) -> SectorMatrix {
        SectorMatrix {
            blocks: self.blocks.iter().map(|b| b.map(|v| v * c)).collect(),
        }
    }

    pub fn add(&self, other: &SectorMatrix) -> SectorMatrix {
        assert_eq!(self.blocks.len(), other.blocks.len());
        SectorMatrix {
            blocks: self
                .blocks
                .iter()
                .zip(&other.blocks)
                .map(|(a, b)| a + b)
                .collect(),
        }
    }

    pub fn sub(&self, other: &SectorMatrix) -> SectorMatrix {
        assert_eq!(self.blocks.len(), other.blocks.len());
        SectorMatrix {
            blocks: self
                .blocks
                .iter()
                .zip(&other.blocks)
                .map(|(a, b)| a - b)
                .collect(),
        }
    }

    /// i [A, B], the matrix-level commutator scaled by the imaginary unit.
    pub fn i_commutator(&self, other: &SectorMatrix) -> SectorMatrix {
        assert_eq!(self.blocks.len(), other.blocks.len());
        SectorMatrix {
            blocks: self
                .blocks
                .iter()
                .zip(&other.blocks)
                .map(|(a, b)| (a * b - b * a).map(|v| v * I))
                .collect(),
        }
    }

    /// Scatter the blocks back into a dense full-space matrix.
    pub fn to_dense(&self, sectors: &NumberSectors, dim: usize) -> CMat {
        let mut m = CMat::zeros(dim, dim);
        for (s, idx) in sectors.sectors.iter().enumerate() {
            let b = &self.blocks[s];
            for (p, &j) in idx.iter().enumerate() {
                for (q, &i) in idx.iter().enumerate() {
                    m[(i, j)] = b[(q, p)];
                }
            }
        }
        m
    }
}

// ---------------------------------------------------------------------------
// Sector evolver
// ---------------------------------------------------------------------------

struct EigBlock {
    v: CMat,
    lam: Vec<f64>,
}

/// Exact Heisenberg evolution generated by a number-conserving
/// self-adjoint local operator, one eigendecomposition per sector.
pub struct SectorEvolver {
    sectors: NumberSectors,
    blocks: Vec<EigBlock>,
    dim: usize,
}

impl SectorEvolver {
    pub fn new(space: &TruncatedFockSpace, h: &LocalOp) -> Result<SectorEvolver> {
        let sectors = NumberSectors::build(space);
        let hm = SectorMatrix::from_local(h, space, &sectors)?;
        let blocks = hm
            .blocks
            .par_iter()
            .map(|b| {
                let (v, lam) = hermitian_eigen(b)?;
                Ok(EigBlock { v, lam })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SectorEvolver {
            sectors,
            blocks,
            dim: space.dim(),
        })
    }

    pub fn sectors(&self) -> &NumberSectors {
        &self.sectors
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Largest orthonormality defect among the sector eigenbases; the
    /// propagator inherits this as its unitarity defect at every time.
    pub fn unitarity_defect(&self) -> f64 {
        self.blocks
            .iter()
            .map(|b| {
                let d = b.v.nrows();
                let gram = b.v.adjoint() * &b.v;
                let mut worst = 0.0f64;
                for j in 0..d {
                    for k in 0..d {
                        let want = if j == k { 1.0 } else { 0.0 };
                        worst = worst.max((gram[(j, k)] - Complex64::new(want, 0.0)).norm());
                    }
                }
                worst
            })
            .fold(0.0, f64::max)
    }

    /// Conjugate an observable into the eigenbasis, block by block.
    pub fn rotate(&self, o: &SectorMatrix) -> SectorMatrix {
        SectorMatrix {
            blocks: self
                .blocks
                .iter()
                .zip(&o.blocks)
                .map(|(e, b)| e.v.adjoint() * b * &e.v)
                .collect(),
        }
    }

    /// Conjugate back from the eigenbasis.
    pub fn unrotate(&self, a: &SectorMatrix) -> SectorMatrix {
        SectorMatrix {
            blocks: self
                .blocks
                .iter()
                .zip(&a.blocks)
                .map(|(e, b)| &e.v * b * e.v.adjoint())
                .collect(),
        }
    }

    /// Heisenberg-evolved observable at time `t`, given its eigenbasis
    /// form: entries pick up the phase e^{i (lam_j - lam_k) t}.
    pub fn evolved_rotated(&self, a: &SectorMatrix, t: f64) -> SectorMatrix {
        SectorMatrix {
            blocks: self
                .blocks
                .iter()
                .zip(&a.blocks)
                .map(|(e, b)| phase_map(&e.lam, b, t, |ph, v| ph * v))
                .collect(),
        }
    }

    /// Convenience: rotate, evolve, unrotate.
    pub fn evolved(&self, o: &SectorMatrix, t: f64) -> SectorMatrix {
        self.unrotate(&self.evolved_rotated(&self.rotate(o), t))
    }

    /// Time integral of the evolved observable over [0, t] in the
    /// eigenbasis, by adaptive Simpson quadrature on matrix elements.
    pub fn integrate_rotated(&self, a: &SectorMatrix, t: f64, tol: f64) -> Result<SectorMatrix> {
        let blocks = self
            .blocks
            .par_iter()
            .zip(&a.blocks)
            .map(|(e, b)| simpson_block(&e.lam, b, t, tol))
            .collect::<Result<Vec<_>>>()?;
        Ok(SectorMatrix { blocks })
    }

    /// Closed-form time integral of the evolved observable over [0, t]
    /// in the eigenbasis; the quadrature oracle.
    pub fn exact_integral_rotated(&self, a: &SectorMatrix, t: f64) -> SectorMatrix {
        SectorMatrix {
            blocks: self
                .blocks
                .iter()
                .zip(&a.blocks)
                .map(|(e, b)| {
                    let d = b.nrows();
                    let mut out = b.clone();
                    for j in 0..d {
                        for k in 0..d {
                            let w = e.lam[j] - e.lam[k];
                            let factor = if w == 0.0 {
                                Complex64::new(t, 0.0)
                            } else {
                                ((I * w * t).exp() - 1.0) / (I * w)
                            };
                            out[(j, k)] *= factor;
                        }
                    }
                    out
                })
                .collect(),
        }
    }

    /// Seven-point central finite difference of the evolved observable
    /// at time `t`, in the eigenbasis. The sixth-order stencil keeps the
    /// combined truncation and rounding error of each entry a couple of
    /// orders below the sum-rule tolerance at moderate spectral widths.
    pub fn derivative_rotated(&self, a: &SectorMatrix, t: f64, h: f64) -> SectorMatrix {
        let f = |s: f64| self.evolved_rotated(a, s);
        let c = |x: f64| Complex64::new(x, 0.0);
        let num = f(t + 3.0 * h)
            .sub(&f(t - 3.0 * h))
            .add(&f(t - 2.0 * h).sub(&f(t + 2.0 * h)).scale(c(9.0)))
            .add(&f(t + h).sub(&f(t - h)).scale(c(45.0)));
        num.scale(c(1.0 / (60.0 * h)))
    }

    /// Exact Gibbs-state expectation of (O(t) - O(0))^2 for a
    /// self-adjoint observable given in eigenbasis form: the weighted sum
    /// of squared column norms of (E(t) - 1) .o A over the basis states.
    pub fn quench_second_moment(&self, a: &SectorMatrix, weights: &[f64], t: f64) -> f64 {
        self.blocks
            .par_iter()
            .zip(&a.blocks)
            .zip(&self.sectors.sectors)
            .map(|((e, b), idx)| {
                let delta = phase_map(&e.lam, b, t, |ph, v| (ph - 1.0) * v);
                if delta.iter().all(|v| *v == Complex64::new(0.0, 0.0)) {
                    return 0.0;
                }
                let p = delta * e.v.adjoint();
                idx.iter()
                    .enumerate()
                    .map(|(pos, &j)| weights[j] * p.column(pos).norm_squared())
                    .sum::<f64>()
            })
            .sum()
    }

    /// Exact Gibbs-state second moment of a self-adjoint observable in
    /// eigenbasis form: the weighted sum of squared column norms of A.
    pub fn second_moment(&self, a: &SectorMatrix, weights: &[f64]) -> f64 {
        self.blocks
            .iter()
            .zip(&a.blocks)
            .zip(&self.sectors.sectors)
            .map(|((e, b), idx)| {
                let p = b * e.v.adjoint();
                idx.iter()
                    .enumerate()
                    .map(|(pos, &j)| weights[j] * p.column(pos).norm_squared())
                    .sum::<f64>()
            })
            .sum()
    }
}

/// Map a block entrywise with the evolution phase e^{i (l_j - l_k) t}.
fn phase_map(
    lam: &[f64],
    b: &CMat,
    t: f64,
    f: impl Fn(Complex64, Complex64) -> Complex64,
) -> CMat {
    let d = b.nrows();
    let mut out = b.clone();
    for j in 0..d {
        for k in 0..d {
            let ph = (I * (lam[j] - lam[k]) * t).exp();
            out[(j, k)] = f(ph, b[(j, k)]);
        }
    }
    out
}

/// Adaptive Simpson quadrature of the eigenbasis integrand
/// F(s)_{jk} = e^{i (l_j - l_k) s} A_{jk} over [0, t], with a max-entry
/// error budget of `tol` for the whole interval.
fn simpson_block(lam: &[f64], a: &CMat, t: f64, tol: f64) -> Result<CMat> {
    if t == 0.0 {
        return Ok(CMat::zeros(a.nrows(), a.ncols()));
    }
    let eval = |s: f64| phase_map(lam, a, s, |ph, v| ph * v);
    let f0 = eval(0.0);
    let fm = eval(0.5 * t);
    let f1 = eval(t);
    let whole = simpson_rule(&f0, &fm, &f1, t);
    adaptive_step(&eval, 0.0, t, &f0, &fm, &f1, whole, tol, 48)
}

fn simpson_rule(f0: &CMat, fm: &CMat, f1: &CMat, width: f64) -> CMat {
    let mut out = f0 + f1;
    out += fm.map(|v| v * 4.0);
    out.map(|v| v * (width / 6.0))
}

#[allow(clippy::too_many_arguments)]
fn adaptive_step(
    eval: &impl Fn(f64) -> CMat,
    s0: f64,
    s1: f64,
    f0: &CMat,
    fm: &CMat,
    f1: &CMat,
    whole: CMat,
    tol: f64,
    depth: usize,
) -> Result<CMat> {
    let m = 0.5 * (s0 + s1);
    let lm = eval(0.5 * (s0 + m));
    let rm = eval(0.5 * (m + s1));
    let left = simpson_rule(f0, &lm, fm, m - s0);
    let right = simpson_rule(fm, &rm, f1, s1 - m);
    let refined = &left + &right;
    let err = (&refined - &whole)
        .iter()
        .map(|v| v.norm())
        .fold(0.0f64, f64::max)
        / 15.0;
    if err <= tol || depth == 0 {
        if depth == 0 && err > tol {
            return Err(Error::numerical(format!(
                "time-integral quadrature stalled at error {err:.3e} > {tol:.1e}"
            )));
        }
        // Richardson correction of the composite rule.
        return Ok(&refined + (&refined - &whole).map(|v| v / 15.0));
    }
    let half = 0.5 * tol;
    let l = adaptive_step(eval, s0, m, f0, &lm, fm, left, half, depth - 1)?;
    let r = adaptive_step(eval, m, s1, fm, &rm, f1, right, half, depth - 1)?;
    Ok(l + r)
}

// ---------------------------------------------------------------------------
// Dense full-space evolver
// ---------------------------------------------------------------------------

/// Exact dense evolver over the whole truncated space: one
/// eigendecomposition, then propagators and Heisenberg conjugations at
/// arbitrary times. Suited to small dimensions; the sector evolver is
/// the fast path for number-conserving generators.
pub struct TimeEvolver {
    v: CMat,
    lam: Vec<f64>,
}

impl TimeEvolver {
    pub fn dense(h: &CMat) -> Result<TimeEvolver> {
        let (v, lam) = hermitian_eigen(h)?;
        Ok(TimeEvolver { v, lam })
    }

    /// The unitary e^{-i H t}.
    pub fn propagator(&self, t: f64) -> CMat {
        let d = self.lam.len();
        let mut phases = CMat::zeros(d, d);
        for j in 0..d {
            phases[(j, j)] = (-I * self.lam[j] * t).exp();
        }
        &self.v * phases * self.v.adjoint()
    }

    /// Schroedinger propagation of a state vector.
    pub fn propagate(&self, psi: &CVec, t: f64) -> CVec {
        self.propagator(t) * psi
    }

    /// Heisenberg evolution O(t) = e^{i H t} O e^{-i H t}.
    pub fn evolve_heisenberg(&self, o: &CMat, t: f64) -> CMat {
        let a = self.v.adjoint() * o * &self.v;
        let evolved = phase_map(&self.lam, &a, t, |ph, v| ph * v);
        &self.v * evolved * self.v.adjoint()
    }

    /// Max-entry defect of U(t)† U(t) - Id.
    pub fn unitarity_defect(&self, t: f64) -> f64 {
        let u = self.propagator(t);
        let gram = u.adjoint() * &u;
        let d = gram.nrows();
        let mut worst = 0.0f64;
        for j in 0..d {
            for k in 0..d {
                let want = if j == k { 1.0 } else { 0.0 };
                worst = worst.max((gram[(j, k)] - Complex64::new(want, 0.0)).norm());
            }
        }
        worst
    }
}

/// One-shot Heisenberg evolution of a dense observable.
pub fn evolve_heisenberg(o: &CMat, h: &CMat, t: f64) -> Result<CMat> {
    Ok(TimeEvolver::dense(h)?.evolve_heisenberg(o, t))
}

// ---------------------------------------------------------------------------
// Krylov stepper
// ---------------------------------------------------------------------------

/// Lanczos propagation of state vectors under a self-adjoint local
/// operator, for spaces too large to eigendecompose. Steps subdivide
/// themselves until the local error estimate and the norm drift are
/// both within tolerance.
pub struct KrylovEvolver<'a> {
    op: &'a LocalOp,
    space: &'a TruncatedFockSpace,
    krylov_dim: usize,
    step: f64,
    tol: f64,
}

impl<'a> KrylovEvolver<'a> {
    pub fn new(op: &'a LocalOp, space: &'a TruncatedFockSpace) -> KrylovEvolver<'a> {
        KrylovEvolver {
            op,
            space,
            krylov_dim: 30,
            step: 0.1,
            tol: 1e-10,
        }
    }

    pub fn with_step(mut self, step: f64) -> Self {
        self.step = step;
        self
    }

    /// Propagate psi to e^{-i H t} psi.
    pub fn propagate(&self, psi: &CVec, t: f64) -> Result<CVec> {
        let mut cur = psi.clone();
        let mut remaining = t;
        while remaining != 0.0 {
            let dt = remaining.signum() * remaining.abs().min(self.step);
            cur = self.step_vector(&cur, dt, 24)?;
            remaining -= dt;
        }
        Ok(cur)
    }

    fn step_vector(&self, v0: &CVec, dt: f64, depth: usize) -> Result<CVec> {
        let norm0 = v0.norm();
        if norm0 == 0.0 {
            return Ok(v0.clone());
        }
        let m = self.krylov_dim.min(self.space.dim());
        let mut basis: Vec<CVec> = vec![v0 / Complex64::new(norm0, 0.0)];
        let mut alpha: Vec<f64> = Vec::new();
        let mut beta: Vec<f64> = Vec::new();
        let mut exhausted = false;
        for j in 0..m {
            let mut w = apply_local(self.op, self.space, &basis[j]);
            let a = basis[j].dotc(&w).re;
            alpha.push(a);
            w -= &basis[j] * Complex64::new(a, 0.0);
            if j > 0 {
                w -= &basis[j - 1] * Complex64::new(beta[j - 1], 0.0);
            }
            // Full reorthogonalization keeps the basis clean.
            for v in &basis {
                let c = v.dotc(&w);
                w -= v * c;
            }
            let b = w.norm();
            if b < 1e-13 {
                exhausted = true;
                break;
            }
            beta.push(b);
            if j + 1 < m {
                basis.push(w / Complex64::new(b, 0.0));
            }
        }
        let k = alpha.len();
        // Tridiagonal T in the Krylov basis; its exponential via a small
        // real symmetric eigendecomposition.
        let mut tmat = DMatrix::<f64>::zeros(k, k);
        for j in 0..k {
            tmat[(j, j)] = alpha[j];
            if j + 1 < k {
                tmat[(j, j + 1)] = beta[j];
                tmat[(j + 1, j)] = beta[j];
            }
        }
        let eig = tmat.symmetric_eigen();
        let mut y = vec![Complex64::new(0.0, 0.0); k];
        for (j, yj) in y.iter_mut().enumerate() {
            let mut acc = Complex64::new(0.0, 0.0);
            for p in 0..k {
                let ph = (-I * eig.eigenvalues[p] * dt).exp();
                acc += Complex64::new(eig.eigenvectors[(j, p)] * eig.eigenvectors[(0, p)], 0.0)
                    * ph;
            }
            *yj = acc * norm0;
        }
        // Residual estimate: weight that would flow to the next basis
        // vector. An exhausted basis is exact.
        let est = if exhausted || k < self.krylov_dim.min(self.space.dim()) {
            0.0
        } else {
            beta.last().copied().unwrap_or(0.0) * y[k - 1].norm() * dt.abs()
        };
        if est > self.tol {
            if depth == 0 {
                return Err(Error::numerical(format!(
                    "Krylov step failed to converge: estimate {est:.3e}"
                )));
            }
            let half = self.step_vector(v0, 0.5 * dt, depth - 1)?;
            return self.step_vector(&half, 0.5 * dt, depth - 1);
        }
        let mut out = CVec::zeros(v0.len());
        for (j, vb) in basis.iter().enumerate() {
            out += vb * y[j];
        }
        let drift = (out.norm() - norm0).abs();
        if drift > 1e-9 * (1.0 + norm0) {
            if depth == 0 {
                return Err(Error::numerical(format!(
                    "Krylov norm drift {drift:.3e} at step {dt:.3e}"
                )));
            }
            let half = self.step_vector(v0, 0.5 * dt, depth - 1)?;
            return self.step_vector(&half, 0.5 * dt, depth - 1);
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Experiment plumbing
// ---------------------------------------------------------------------------

/// One experiment observation; `mu` is empty for state-independent rows.
#[derive(Debug, Clone, Serialize)]
pub struct ExperimentRow {
    pub t: f64,
    pub mu: Option<f64>,
    pub g: f64,
    pub observable: String,
    pub value: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Provenance {
    /// Content hash of the serialized plan.
    pub params_hash: String,
    pub seed: u64,
    /// Gibbs weight above the occupation cap (worst grid point).
    pub truncation_loss: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentResult {
    pub rows: Vec<ExperimentRow>,
    pub provenance: Provenance,
}

/// SHA-256 hex digest of a serializable plan.
pub fn params_hash<T: Serialize>(plan: &T) -> String {
    let json = serde_json::to_string(plan).expect("plan serialization cannot fail");
    let mut hasher = Sha256::new();
    hasher.update(json.as_bytes());
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Product-Gibbs weight of every basis state of the space; sums to one
/// exactly because the per-site law is normalized on the truncated range.
pub fn gibbs_weights(space: &TruncatedFockSpace, mu: f64) -> Result<Vec<f64>> {
    let sampler = GibbsSampler::new(mu, space.n_max(), 0)?;
    Ok((0..space.dim())
        .map(|j| {
            space
                .config_at(j)
                .iter()
                .map(|&n| sampler.site_probability(n))
                .product()
        })
        .collect())
}

fn sort_rows(rows: &mut [ExperimentRow]) {
    rows.sort_by(|a, b| {
        a.observable
            .cmp(&b.observable)
            .then(
                a.mu.unwrap_or(f64::NEG_INFINITY)
                    .total_cmp(&b.mu.unwrap_or(f64::NEG_INFINITY)),
            )
            .then(a.t.total_cmp(&b.t))
            .then(a.g.total_cmp(&b.g))
    });
}

// ---------------------------------------------------------------------------
// Interval-energy (quench) experiment
// ---------------------------------------------------------------------------

/// Plan for the interval-energy drift experiment: evolve the energy of
/// the sites right of `a1` and not right of `a2`, and track the exact
/// Gibbs second moment of its drift together with the sum rule that
/// balances the drift against the two boundary currents.
#[derive(Debug, Clone, Serialize)]
pub struct QuenchPlan {
    pub n_sites: usize,
    pub n_max: u32,
    /// Interval boundaries (a1, a2) with a1 < a2: the energy observable
    /// is the tail difference H_{>a1} - H_{>a2}.
    pub interval: (usize, usize),
    pub g: f64,
    pub mu_grid: Vec<f64>,
    pub t_grid: Vec<f64>,
    /// Central finite-difference step for the sum-rule residual.
    pub fd_step: f64,
    pub max_dim: usize,
}

/// Exact-trace interval-energy drift and sum-rule residuals.
///
/// Rows:
/// - `interval_quench`: the Gibbs expectation of (H_I(t) - H_I(0))^2,
///   one row per (mu, t), exact trace so stderr is zero.
/// - `sum_rule_residual`: max-entry difference between the seven-point
///   finite difference of the evolved interval energy and the evolved
///   boundary-current difference i[H, H_I], one row per t.
pub fn quench_experiment(plan: &QuenchPlan) -> Result<ExperimentResult> {
    let (a1, a2) = plan.interval;
    if a1 >= a2 || a2 + 1 >= plan.n_sites {
        return Err(Error::config(
            "quench interval needs a1 < a2 with a live bond right of a2",
        ));
    }
    if plan.fd_step <= 0.0 {
        return Err(Error::config("finite-difference step must be positive"));
    }
    let geometry = ChainGeometry::new_any(plan.n_sites)?;
    let space = TruncatedFockSpace::new(geometry, plan.n_max, plan.max_dim)?;
    let h = LocalOp::bose_hubbard(plan.n_sites, plan.g);
    let h_i = bare_observable_tail(plan.n_sites, plan.g, a1)
        .sub(&bare_observable_tail(plan.n_sites, plan.g, a2));

    let evolver = SectorEvolver::new(&space, &h)?;
    let h_i_blocks = SectorMatrix::from_local(&h_i, &space, evolver.sectors())?;
    let h_blocks = SectorMatrix::from_local(&h, &space, evolver.sectors())?;
    let m = evolver.rotate(&h_i_blocks);
    // The boundary-current difference at matrix level: the generator of
    // the interval energy's motion on the truncated space.
    let j_rotated = evolver.rotate(&h_blocks.i_commutator(&h_i_blocks));

    let mut rows: Vec<ExperimentRow> = Vec::new();

    // Sum-rule residuals, one per grid time (state-independent).
    let residuals: Vec<(f64, f64)> = plan
        .t_grid
        .par_iter()
        .map(|&t| {
            let fd = evolver.derivative_rotated(&m, t, plan.fd_step);
            let want = evolver.evolved_rotated(&j_rotated, t);
            let diff = evolver.unrotate(&fd.sub(&want));
            (t, diff.max_abs())
        })
        .collect();
    for (t, r) in residuals {
        rows.push(ExperimentRow {
            t,
            mu: None,
            g: plan.g,
            observable: "sum_rule_residual".to_string(),
            value: r,
            stderr: 0.0,
        });
    }

    // Exact quench moments per (mu, t).
    let mut worst_loss = 0.0f64;
    for &mu in &plan.mu_grid {
        let weights = gibbs_weights(&space, mu)?;
        let sampler = GibbsSampler::new(mu, space.n_max(), 0)?;
        worst_loss = worst_loss.max(sampler.cap_weight());
        let values: Vec<(f64, f64)> = plan
            .t_grid
            .par_iter()
            .map(|&t| (t, evolver.quench_second_moment(&m, &weights, t)))
            .collect();
        for (t, v) in values {
            rows.push(ExperimentRow {
                t,
                mu: Some(mu),
                g: plan.g,
                observable: "interval_quench".to_string(),
                value: v,
                stderr: 0.0,
            });
        }
    }

    sort_rows(&mut rows);
    Ok(ExperimentResult {
        rows,
        provenance: Provenance {
            params_hash: params_hash(plan),
            seed: 0,
            truncation_loss: worst_loss,
        },
    })
}

/// Time-averaged interval quench from an experiment's rows at one mu.
pub fn time_averaged_quench(result: &ExperimentResult, mu: f64) -> Option<f64> {
    let vals: Vec<f64> = result
        .rows
        .iter()
        .filter(|r| r.observable == "interval_quench" && r.mu == Some(mu))
        .map(|r| r.value)
        .collect();
    if vals.is_empty() {
        None
    } else {
        Some(vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

// ---------------------------------------------------------------------------
// Integrated-current experiment
// ---------------------------------------------------------------------------

/// Plan for the time-integrated current identity. Times are in the
/// reduced clock (evolution generated by the reduced Hamiltonian);
/// operators and observables are the reduced ones, with physical-scale
/// companions reported where the rescaling is exact.
#[derive(Debug, Clone, Serialize)]
pub struct IntegratedCurrentPlan {
    pub t_grid: Vec<f64>,
    /// Per-element tolerance of the adaptive Simpson time integral.
    pub simpson_tol: f64,
}

/// Verify the time-integrated current identity on the buffered subspace:
/// the integral of the evolved current over [0, t] equals the evolved
/// observable increment plus the coupling-power-weighted integral of the
/// evolved remainder.
///
/// Rows:
/// - `integrated_identity_residual`: max entry of the identity defect on
///   buffered matrix elements, per t (reduced scale).
/// - `boundary_term`: Gibbs expectation of the squared physical
///   observable increment, per (mu, t).
/// - `boundary_bound`: four times the static second moment, the
///   Cauchy-Schwarz ceiling for every boundary_term row.
pub fn integrated_current_experiment(
    decomp: &CurrentDecomposition,
    space: &TruncatedFockSpace,
    plan: &IntegratedCurrentPlan,
) -> Result<ExperimentResult> {
    let model = *decomp.model();
    let n = space.n_sites();
    if n != decomp.current().n_sites() {
        return Err(Error::config(
            "integrated-current space and decomposition disagree on the chain length",
        ));
    }
    let mu = model.mu;
    let h = LocalOp::reduced_hamiltonian(n, &model);
    let evolver = SectorEvolver::new(space, &h)?;
    let sectors = evolver.sectors();

    let j_blocks = SectorMatrix::from_local(decomp.current(), space, sectors)?;
    let u_blocks = SectorMatrix::from_local(decomp.u_hat(), space, sectors)?;
    let g_blocks = SectorMatrix::from_local(decomp.g_hat(), space, sectors)?;

    let ja = evolver.rotate(&j_blocks);
    let ua = evolver.rotate(&u_blocks);
    let ga = evolver.rotate(&g_blocks);

    let buffer = decomp.current().climb().max(decomp.u_hat().climb()).max(
        decomp.g_hat().climb().max(h.climb()),
    );
    let buffered = space.buffered_indices(buffer);
    if buffered.is_empty() {
        return Err(Error::config(
            "no buffered states left for the integrated identity",
        ));
    }
    let mu_pow = mu.powi(decomp.n0() as i32 + 1);

    let weights = gibbs_weights(space, mu)?;
    // Physical-scale observable: the reduced one carries mu^2.
    let phys_scale = mu.powi(-4);
    let static_bound = 4.0 * evolver.second_moment(&ua, &weights) * phys_scale;

    let mut rows: Vec<ExperimentRow> = Vec::new();
    let dim = space.dim();
    let per_t: Vec<(f64, f64, f64)> = plan
        .t_grid
        .par_iter()
        .map(|&t| -> Result<(f64, f64, f64)> {
            let int_j = evolver.integrate_rotated(&ja, t, plan.simpson_tol)?;
            let int_g = evolver.integrate_rotated(&ga, t, plan.simpson_tol)?;
            let delta_u = evolver
                .evolved_rotated(&ua, t)
                .sub(&ua);
            let defect = int_j.sub(&delta_u).sub(&int_g.scale(Complex64::new(mu_pow, 0.0)));
            let dense = evolver.unrotate(&defect).to_dense(sectors, dim);
            let mut worst = 0.0f64;
            for &r in &buffered {
                for &c in &buffered {
                    worst = worst.max(dense[(r, c)].norm());
                }
            }
            let boundary = evolver.quench_second_moment(&ua, &weights, t) * phys_scale;
            Ok((t, worst, boundary))
        })
        .collect::<Result<Vec<_>>>()?;

    for (t, residual, boundary) in per_t {
        rows.push(ExperimentRow {
            t,
            mu: None,
            g: model.g,
            observable: "integrated_identity_residual".to_string(),
            value: residual,
            stderr: 0.0,
        });
        rows.push(ExperimentRow {
            t,
            mu: Some(mu),
            g: model.g,
            observable: "boundary_term".to_string(),
            value: boundary,
            stderr: 0.0,
        });
        rows.push(ExperimentRow {
            t,
            mu: Some(mu),
            g: model.g,
            observable: "boundary_bound".to_string(),
            value: static_bound,
            stderr: 0.0,
        });
    }

    let sampler = GibbsSampler::new(mu, space.n_max(), 0)?;
    sort_rows(&mut rows);
    Ok(ExperimentResult {
        rows,
        provenance: Provenance {
            params_hash: params_hash(plan),
            seed: 0,
            truncation_loss: sampler.cap_weight(),
        },
    })
}

