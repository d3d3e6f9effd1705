//! Local operators in move-decomposed form.
//!
//! An operator is stored as a sum over moves `rho` of `A_rho * b_rho` where
//! `b_rho` is a diagonal function applied at the source configuration and
//! `A_rho` is the fixed ladder amplitude of the move. Concretely the matrix
//! elements are
//!
//! ```text
//!     <eta + rho | f | eta> = A_rho(eta) * b_rho(eta),
//! ```
//!
//! with `A_rho(eta) = delta^{|rho|_1 / 2} * prod_x amp(eta_x, rho_x)` and
//! `amp(n, k)` the square root of the rising factorial `(n+1)...(n+k)` for
//! raising moves (`k > 0`) and of the falling factorial `n(n-1)...(n+k+1)`
//! for lowering moves (`k < 0`). The amplitude vanishes exactly when the
//! move would leave the nonnegative occupations, which encodes all
//! normal-ordering bookkeeping numerically: compositions simply sum over
//! intermediate configurations with zero-amplitude paths dropping out.
//!
//! The scale factor `delta^{1/2}` per ladder step corresponds to working
//! with the reduced ladders `alpha = delta^{1/2} a`; passing `delta = 1`
//! recovers the bare operators.

use num_complex::Complex64;
use std::collections::{BTreeMap, BTreeSet};

use crate::cutoff::ResonanceCutoff;
use crate::diagonal::DiagonalFn;
use crate::error::{Error, Result};
use crate::lattice::{LossTally, ModelParams, TruncatedFockSpace};
use crate::matrix::{CsrMatrix, OperatorMatrix};
use crate::moves::{self, Move};

/// Single-site ladder amplitude factor (squared under the final square
/// root): rising factorial for raising moves, falling factorial for
/// lowering moves, zero whenever the path leaves the nonnegative integers.
fn site_amplitude_sq(n: i64, k: i64) -> f64 {
    if n < 0 {
        return 0.0;
    }
    if k >= 0 {
        let mut p = 1.0;
        for j in 1..=k {
            p *= (n + j) as f64;
        }
        p
    } else {
        if n + k < 0 {
            return 0.0;
        }
        let mut p = 1.0;
        for j in 0..(-k) {
            p *= (n - j) as f64;
        }
        p
    }
}

/// Occupation part of the move amplitude (no `delta` factor):
/// `prod_x amp(eta_x, rho_x)`.
pub fn occupancy_amplitude(rho: &[i16], eta: &[i64]) -> f64 {
    let mut p = 1.0;
    for (x, &k) in rho.iter().enumerate() {
        if k != 0 {
            p *= site_amplitude_sq(eta[x], k as i64);
            if p == 0.0 {
                return 0.0;
            }
        }
    }
    p.sqrt()
}

/// One composition path `left ∘ right` contributing to the move
/// `left_move + right_move`.
struct Pair {
    left_move: Move,
    right_move: Move,
    left: DiagonalFn,
    right: DiagonalFn,
    /// `delta^{(|rho|_1 + |rho'|_1 - |sigma|_1)/2}` times an overall sign.
    weight: f64,
}

/// A local operator as a finite sum of moves with diagonal coefficients.
#[derive(Clone)]
pub struct LocalOp {
    n_sites: usize,
    delta: f64,
    climb: i64,
    terms: BTreeMap<Move, DiagonalFn>,
}

impl std::fmt::Debug for LocalOp {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LocalOp")
            .field("n_sites", &self.n_sites)
            .field("delta", &self.delta)
            .field("climb", &self.climb)
            .field("num_terms", &self.terms.len())
            .finish()
    }
}

fn atom_climb<'a>(moves: impl Iterator<Item = &'a Move>) -> i64 {
    moves.map(|rho| moves::climb(rho)).max().unwrap_or(0)
}

impl LocalOp {
    /// The zero operator.
    pub fn zero(n_sites: usize, delta: f64) -> Self {
        LocalOp {
            n_sites,
            delta,
            climb: 0,
            terms: BTreeMap::new(),
        }
    }

    /// The identity.
    pub fn identity(n_sites: usize, delta: f64) -> Self {
        let mut op = Self::zero(n_sites, delta);
        op.terms
            .insert(vec![0; n_sites], DiagonalFn::real_constant(1.0));
        op
    }

    /// Build from explicit `(move, coefficient)` terms. Duplicate moves are
    /// folded by pointwise addition.
    pub fn from_terms(n_sites: usize, delta: f64, terms: Vec<(Move, DiagonalFn)>) -> Self {
        let mut op = Self::zero(n_sites, delta);
        for (rho, b) in terms {
            assert_eq!(rho.len(), n_sites, "move length must equal n_sites");
            op.insert_term(rho, b);
        }
        op.climb = atom_climb(op.terms.keys());
        op
    }

    fn insert_term(&mut self, rho: Move, b: DiagonalFn) {
        match self.terms.remove(&rho) {
            Some(old) => {
                self.terms.insert(rho, old.add(&b));
            }
            None => {
                self.terms.insert(rho, b);
            }
        }
    }

    pub fn n_sites(&self) -> usize {
        self.n_sites
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// Upper bound on how far intermediate configurations of this
    /// expression reach above a source configuration. The matrix of the
    /// expression on a truncated space agrees with its exact action on the
    /// buffered configurations `max_x eta_x <= n_max - climb`.
    pub fn climb(&self) -> i64 {
        self.climb
    }

    pub fn num_terms(&self) -> usize {
        self.terms.len()
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn terms(&self) -> impl Iterator<Item = (&Move, &DiagonalFn)> {
        self.terms.iter()
    }

    pub fn term(&self, rho: &[i16]) -> Option<&DiagonalFn> {
        self.terms.get(rho)
    }

    /// Smallest radius `r` such that every term's footprint (move support
    /// plus coefficient window) fits inside a ball `B(x, r)` around some
    /// site. Nested commutators grow this slowly; a configured cap on it
    /// guards against runaway term growth.
    pub fn range(&self) -> u32 {
        self.terms
            .iter()
            .map(|(rho, b)| {
                let mut lo = usize::MAX;
                let mut hi = 0usize;
                for x in moves::support(rho).into_iter().chain(b.window().iter().copied()) {
                    lo = lo.min(x);
                    hi = hi.max(x);
                }
                if lo == usize::MAX {
                    0
                } else {
                    ((hi - lo + 1) / 2) as u32
                }
            })
            .max()
            .unwrap_or(0)
    }

    /// Sites an operator can touch: union of move supports and coefficient
    /// windows.
    pub fn footprint(&self) -> Vec<usize> {
        let mut s: BTreeSet<usize> = BTreeSet::new();
        for (rho, b) in &self.terms {
            s.extend(moves::support(rho));
            s.extend(b.window().iter().copied());
        }
        s.into_iter().collect()
    }

    /// Full move amplitude `A_rho(eta)` including the `delta` power.
    pub fn amplitude(&self, rho: &[i16], eta: &[i64]) -> f64 {
        let occ = occupancy_amplitude(rho, eta);
        if occ == 0.0 {
            return 0.0;
        }
        occ * self.delta.powf(moves::l1(rho) as f64 * 0.5)
    }

    /// Matrix element `<eta + rho | f | eta>`.
    pub fn eval_element(&self, rho: &[i16], eta: &[i64]) -> Complex64 {
        match self.terms.get(rho) {
            None => Complex64::new(0.0, 0.0),
            Some(b) => {
                let a = self.amplitude(rho, eta);
                if a == 0.0 {
                    Complex64::new(0.0, 0.0)
                } else {
                    b.eval(eta) * a
                }
            }
        }
    }

    /// Diagonal matrix element `<eta | f | eta>`.
    pub fn diag_at(&self, eta: &[i64]) -> Complex64 {
        let zero_move = vec![0i16; self.n_sites];
        self.eval_element(&zero_move, eta)
    }

    /// All nonzero matrix elements out of a source configuration, as
    /// `(target, value)` pairs. No truncation is applied.
    pub fn column(&self, eta: &[i64]) -> Vec<(Vec<i64>, Complex64)> {
        let mut out = Vec::new();
        for (rho, b) in &self.terms {
            let a = self.amplitude(rho, eta);
            if a == 0.0 {
                continue;
            }
            let v = b.eval(eta) * a;
            if v.norm_sqr() == 0.0 {
                continue;
            }
            let target: Vec<i64> = eta
                .iter()
                .zip(rho.iter())
                .map(|(&n, &k)| n + k as i64)
                .collect();
            out.push((target, v));
        }
        out
    }

    /// Scalar multiple.
    pub fn scale(&self, c: Complex64) -> LocalOp {
        let terms = self
            .terms
            .iter()
            .map(|(rho, b)| (rho.clone(), b.scale(c)))
            .collect();
        LocalOp {
            n_sites: self.n_sites,
            delta: self.delta,
            climb: self.climb,
            terms,
        }
    }

    pub fn scale_real(&self, c: f64) -> LocalOp {
        self.scale(Complex64::new(c, 0.0))
    }

    /// Sum of two operators on the same chain and scale.
    pub fn add(&self, other: &LocalOp) -> LocalOp {
        assert_eq!(self.n_sites, other.n_sites);
        assert_eq!(self.delta, other.delta);
        let mut out = self.clone();
        for (rho, b) in &other.terms {
            out.insert_term(rho.clone(), b.clone());
        }
        out.climb = self.climb.max(other.climb);
        out
    }

    pub fn sub(&self, other: &LocalOp) -> LocalOp {
        self.add(&other.scale_real(-1.0))
    }

    /// Hermitian adjoint: term `(rho, b)` maps to `(-rho, conj b(. - rho))`.
    pub fn adjoint(&self) -> LocalOp {
        let mut terms: BTreeMap<Move, DiagonalFn> = BTreeMap::new();
        for (rho, b) in &self.terms {
            let neg = moves::neg(rho);
            let nb = b.shift(&neg).conj();
            terms.insert(neg, nb);
        }
        let climb = self.climb.max(atom_climb(terms.keys()));
        LocalOp {
            n_sites: self.n_sites,
            delta: self.delta,
            climb,
            terms,
        }
    }

    /// Memoize every coefficient function (worth doing on operators that
    /// will be evaluated many times, e.g. after nested commutators).
    pub fn memoized(&self) -> LocalOp {
        let terms = self
            .terms
            .iter()
            .map(|(rho, b)| (rho.clone(), b.memoized()))
            .collect();
        LocalOp {
            n_sites: self.n_sites,
            delta: self.delta,
            climb: self.climb,
            terms,
        }
    }

    fn assemble(
        n_sites: usize,
        delta: f64,
        climb: i64,
        buckets: BTreeMap<Move, Vec<Pair>>,
    ) -> LocalOp {
        let mut terms: BTreeMap<Move, DiagonalFn> = BTreeMap::new();
        for (sigma, pairs) in buckets {
            let mut window: Vec<usize> = Vec::new();
            for p in &pairs {
                window.extend(moves::support(&p.left_move));
                window.extend(moves::support(&p.right_move));
                window.extend(p.left.window().iter().copied());
                window.extend(p.right.window().iter().copied());
            }
            let sig = sigma.clone();
            let f = DiagonalFn::from_fn(window, move |eta| {
                let mut acc = Complex64::new(0.0, 0.0);
                for p in &pairs {
                    let shifted: Vec<i64> = eta
                        .iter()
                        .zip(p.right_move.iter())
                        .map(|(&n, &k)| n + k as i64)
                        .collect();
                    let a_left = occupancy_amplitude(&p.left_move, &shifted);
                    if a_left == 0.0 {
                        continue;
                    }
                    let a_right = occupancy_amplitude(&p.right_move, eta);
                    if a_right == 0.0 {
                        continue;
                    }
                    let a_sig = occupancy_amplitude(&sig, eta);
                    if a_sig == 0.0 {
                        continue;
                    }
                    let ratio = a_left * a_right / a_sig;
                    acc += p.left.eval(&shifted) * p.right.eval(eta) * (p.weight * ratio);
                }
                acc
            });
            terms.insert(sigma, f);
        }
        LocalOp {
            n_sites,
            delta,
            climb,
            terms,
        }
    }

    /// `delta^{(|l|_1 + |r|_1 - |l + r|_1)/2}` — always an integer power,
    /// since the l1 norm of a sum has the same parity as the sum of norms.
    fn pair_delta_power(delta: f64, l: &[i16], r: &[i16]) -> f64 {
        let excess = moves::l1(l) + moves::l1(r) - moves::l1(&moves::add(l, r));
        debug_assert!(excess >= 0 && excess % 2 == 0);
        delta.powi((excess / 2) as i32)
    }

    /// Operator product `self * other` (other acts first).
    pub fn compose(&self, other: &LocalOp) -> LocalOp {
        assert_eq!(self.n_sites, other.n_sites);
        assert_eq!(self.delta, other.delta);
        let mut buckets: BTreeMap<Move, Vec<Pair>> = BTreeMap::new();
        for (rho, b) in &self.terms {
            for (rho_p, c) in &other.terms {
                let sigma = moves::add(rho, rho_p);
                let weight = Self::pair_delta_power(self.delta, rho, rho_p);
                buckets.entry(sigma).or_default().push(Pair {
                    left_move: rho.clone(),
                    right_move: rho_p.clone(),
                    left: b.clone(),
                    right: c.clone(),
                    weight,
                });
            }
        }
        Self::assemble(
            self.n_sites,
            self.delta,
            self.climb + other.climb,
            buckets,
        )
    }

    /// Commutator `[self, other]`, with exact pruning of term pairs whose
    /// site footprints are disjoint (those commute identically).
    pub fn commutator(&self, other: &LocalOp) -> LocalOp {
        assert_eq!(self.n_sites, other.n_sites);
        assert_eq!(self.delta, other.delta);
        let mut buckets: BTreeMap<Move, Vec<Pair>> = BTreeMap::new();
        for (rho, b) in &self.terms {
            let mut left_sites: BTreeSet<usize> = moves::support(rho).into_iter().collect();
            left_sites.extend(b.window().iter().copied());
            for (rho_p, c) in &other.terms {
                let disjoint = moves::support(rho_p)
                    .iter()
                    .all(|x| !left_sites.contains(x))
                    && c.window().iter().all(|x| !left_sites.contains(x));
                if disjoint {
                    continue;
                }
                let sigma = moves::add(rho, rho_p);
                let weight = Self::pair_delta_power(self.delta, rho, rho_p);
                let bucket = buckets.entry(sigma).or_default();
                bucket.push(Pair {
                    left_move: rho.clone(),
                    right_move: rho_p.clone(),
                    left: b.clone(),
                    right: c.clone(),
                    weight,
                });
                bucket.push(Pair {
                    left_move: rho_p.clone(),
                    right_move: rho.clone(),
                    left: c.clone(),
                    right: b.clone(),
                    weight: -weight,
                });
            }
        }
        Self::assemble(
            self.n_sites,
            self.delta,
            self.climb + other.climb,
            buckets,
        )
    }

    /// Resonant part: each coefficient is multiplied by the smooth
    /// indicator of near-resonance for its move; the zero move (where the
    /// indicator is identically one) is kept unchanged.
    pub fn resonant_part(&self, cutoff: &ResonanceCutoff) -> LocalOp {
        let cut = *cutoff;
        let terms = self
            .terms
            .iter()
            .map(|(rho, b)| {
                if moves::support(rho).is_empty() {
                    return (rho.clone(), b.clone());
                }
                let z = zeta_fn(&cut, rho);
                (rho.clone(), b.mul(&z))
            })
            .collect();
        LocalOp {
            n_sites: self.n_sites,
            delta: self.delta,
            climb: self.climb,
            terms,
        }
    }

    /// Complement of the resonant part; the zero move drops out entirely.
    pub fn nonresonant_part(&self, cutoff: &ResonanceCutoff) -> LocalOp {
        self.sub(&self.resonant_part(cutoff))
    }

    /// Solve `[D, U] = (Id - R) self` for `U`, where `D` is the diagonal
    /// interaction part of the reduced Hamiltonian and `R` the resonant
    /// projection. Termwise,
    ///
    /// ```text
    ///     u_rho(eta) = b_rho(eta) * (1 - zeta_rho(eta)) / (delta^2 * dE_rho(eta)),
    /// ```
    ///
    /// which is well defined because `1 - zeta` vanishes identically on the
    /// plateau `|dE| <= delta^{-gamma}` containing all small denominators.
    /// The identity holds exactly on the whole truncated space because `D`
    /// is diagonal.
    pub fn kam_solve(&self, cutoff: &ResonanceCutoff) -> Result<LocalOp> {
        if !(cutoff.width > 1.0) {
            return Err(Error::config(
                "resonance width must exceed 1 so the cutoff plateau covers dE = 0",
            ));
        }
        let dsq = self.delta * self.delta;
        let cut = *cutoff;
        let mut terms: BTreeMap<Move, DiagonalFn> = BTreeMap::new();
        for (rho, b) in &self.terms {
            let supp = moves::support(rho);
            if supp.is_empty() {
                continue; // diagonal part is fully resonant
            }
            let r = rho.clone();
            let bb = b.clone();
            let mut window: Vec<usize> = b.window().to_vec();
            window.extend(supp);
            let u = DiagonalFn::from_fn(window, move |eta| {
                let one_minus = 1.0 - cut.zeta(&r, eta);
                if one_minus == 0.0 {
                    return Complex64::new(0.0, 0.0);
                }
                let de = moves::delta_e(&r, eta) as f64;
                bb.eval(eta) * (one_minus / (dsq * de))
            });
            terms.insert(rho.clone(), u);
        }
        Ok(LocalOp {
            n_sites: self.n_sites,
            delta: self.delta,
            climb: self.climb,
            terms,
        })
    }

    /// Assemble the matrix on a truncated space. Moves that climb past the
    /// occupation cap are tallied as truncation loss, moves that would go
    /// below zero occupation have exactly zero amplitude.
    pub fn to_matrix(&self, space: &TruncatedFockSpace) -> (OperatorMatrix, LossTally) {
        assert_eq!(space.geometry().n_sites(), self.n_sites);
        let mut trips: Vec<(usize, usize, Complex64)> = Vec::new();
        let mut tally = LossTally::default();
        for (j, eta) in space.iter().enumerate() {
            for (rho, b) in &self.terms {
                let a = self.amplitude(rho, &eta);
                if a == 0.0 {
                    continue;
                }
                let v = b.eval(&eta) * a;
                if v.norm_sqr() == 0.0 {
                    continue;
                }
                let target: Vec<i64> = eta
                    .iter()
                    .zip(rho.iter())
                    .map(|(&n, &k)| n + k as i64)
                    .collect();
                match space.index_of(&target) {
                    Some(i) => trips.push((i, j, v)),
                    None => tally.record(v.norm()),
                }
            }
        }
        (
            OperatorMatrix::from_sparse(CsrMatrix::from_triplets(space.dim(), trips)),
            tally,
        )
    }

    // ----- model builders -------------------------------------------------

    /// Diagonal interaction at one site: `(delta N_x)^2`.
    pub fn interaction_site(n_sites: usize, delta: f64, x: usize) -> LocalOp {
        let dsq = delta * delta;
        Self::from_terms(
            n_sites,
            delta,
            vec![(
                vec![0; n_sites],
                DiagonalFn::on_site(x, move |n| dsq * (n * n) as f64),
            )],
        )
    }

    /// Total diagonal interaction `sum_x (delta N_x)^2`.
    pub fn interaction(n_sites: usize, delta: f64) -> LocalOp {
        let dsq = delta * delta;
        let window: Vec<usize> = (0..n_sites).collect();
        Self::from_terms(
            n_sites,
            delta,
            vec![(
                vec![0; n_sites],
                DiagonalFn::from_fn(window, move |eta| {
                    let s: i64 = eta.iter().map(|&n| n * n).sum();
                    Complex64::new(dsq * s as f64, 0.0)
                }),
            )],
        )
    }

    /// Hopping on the bond `(x, x+1)` with the reduced ladders:
    /// `g (alpha*_x alpha_{x+1} + alpha_x alpha*_{x+1})`.
    pub fn hopping_bond(n_sites: usize, delta: f64, g: f64, x: usize) -> LocalOp {
        assert!(x + 1 < n_sites, "bond ({x}, {}) out of range", x + 1);
        if g == 0.0 {
            return Self::zero(n_sites, delta);
        }
        let mut right = vec![0i16; n_sites];
        right[x] = 1;
        right[x + 1] = -1;
        let left = moves::neg(&right);
        Self::from_terms(
            n_sites,
            delta,
            vec![
                (right, DiagonalFn::real_constant(g)),
                (left, DiagonalFn::real_constant(g)),
            ],
        )
    }

    /// Total hopping `sum_x g (alpha*_x alpha_{x+1} + h.c.)`.
    pub fn hopping(n_sites: usize, delta: f64, g: f64) -> LocalOp {
        let mut op = Self::zero(n_sites, delta);
        for x in 0..n_sites - 1 {
            op = op.add(&Self::hopping_bond(n_sites, delta, g, x));
        }
        op
    }

    /// Reduced Hamiltonian `h = d + mu v` at the model parameters
    /// (`delta` is taken from the parameters as well).
    pub fn reduced_hamiltonian(n_sites: usize, params: &ModelParams) -> LocalOp {
        let d = Self::interaction(n_sites, params.delta);
        let v = Self::hopping(n_sites, params.delta, params.g);
        d.add(&v.scale_real(params.mu))
    }

    /// Bare Bose-Hubbard Hamiltonian (`delta = 1`).
    pub fn bose_hubbard(n_sites: usize, g: f64) -> LocalOp {
        let d = Self::interaction(n_sites, 1.0);
        let v = Self::hopping(n_sites, 1.0, g);
        d.add(&v)
    }

    /// Total particle number (diagonal).
    pub fn number_total(n_sites: usize, delta: f64) -> LocalOp {
        let window: Vec<usize> = (0..n_sites).collect();
        Self::from_terms(
            n_sites,
            delta,
            vec![(
                vec![0; n_sites],
                DiagonalFn::from_fn(window, |eta| {
                    Complex64::new(eta.iter().sum::<i64>() as f64, 0.0)
                }),
            )],
        )
    }
}

/// The smooth near-resonance indicator for a fixed move, as a diagonal
/// function with window equal to the move support.
pub fn zeta_fn(cutoff: &ResonanceCutoff, rho: &[i16]) -> DiagonalFn {
    let cut = *cutoff;
    let r: Move = rho.to_vec();
    DiagonalFn::from_fn(moves::support(rho), move |eta| {
        Complex64::new(cut.zeta(&r, eta), 0.0)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{build_bose_hubbard, build_reduced_hamiltonian, ChainGeometry};
    use crate::matrix::{commutator, max_abs, max_abs_diff, max_abs_diff_on};
    use approx::assert_abs_diff_eq;

    fn space(n_sites: usize, n_max: u32) -> TruncatedFockSpace {
        TruncatedFockSpace::new(ChainGeometry::new_any(n_sites).unwrap(), n_max, crate::lattice::DEFAULT_MAX_DIM).unwrap()
    }

    #[test]
    fn amplitudes_match_ladder_rules() {
        let op = LocalOp::identity(2, 1.0);
        // a*_0 a_1 on |2, 3>: sqrt(3) * sqrt(3).
        assert_abs_diff_eq!(op.amplitude(&[1, -1], &[2, 3]), 3.0, epsilon = 1e-15);
        // Lowering past zero vanishes.
        assert_eq!(op.amplitude(&[-1, 0], &[0, 5]), 0.0);
        // Two-step raise: sqrt((n+1)(n+2)).
        assert_abs_diff_eq!(
            op.amplitude(&[2, 0], &[3, 0]),
            (4.0f64 * 5.0).sqrt(),
            epsilon = 1e-15
        );
        // Reduced scale: one ladder step per site -> delta^1.
        let red = LocalOp::identity(2, 0.25);
        assert_abs_diff_eq!(red.amplitude(&[1, -1], &[2, 3]), 0.25 * 3.0, epsilon = 1e-15);
    }

    #[test]
    fn amplitude_positive_iff_target_valid() {
        let op = LocalOp::identity(3, 0.5);
        let eta = [1i64, 0, 2];
        for rho in crate::moves::move_set(3, 1) {
            let target_ok = eta
                .iter()
                .zip(rho.iter())
                .all(|(&n, &k)| n + k as i64 >= 0);
            let a = op.amplitude(&rho, &eta);
            assert_eq!(a > 0.0, target_ok, "move {rho:?}");
        }
    }

    #[test]
    fn reduced_hamiltonian_matches_direct_assembly() {
        let geom = ChainGeometry::new(3).unwrap();
        let sp = TruncatedFockSpace::new(geom, 4, crate::lattice::DEFAULT_MAX_DIM).unwrap();
        let params = ModelParams {
            g: 0.7,
            mu: 0.35,
            delta: 0.35,
            gamma: 0.75,
        };
        let (direct, loss_direct) = build_reduced_hamiltonian(&sp, &params);
        let op = LocalOp::reduced_hamiltonian(3, &params);
        let (m, loss_op) = op.to_matrix(&sp);
        assert_abs_diff_eq!(
            max_abs_diff(&m.to_dense(), &direct.to_dense()),
            0.0,
            epsilon = 1e-14
        );
        assert_eq!(loss_direct.count, loss_op.count);
        assert_abs_diff_eq!(
            loss_direct.max_amplitude,
            loss_op.max_amplitude,
            epsilon = 1e-14
        );
    }

    #[test]
    fn bare_hamiltonian_matches_direct_assembly() {
        let geom = ChainGeometry::new(3).unwrap();
        let sp = TruncatedFockSpace::new(geom, 3, crate::lattice::DEFAULT_MAX_DIM).unwrap();
        let (direct, _) = build_bose_hubbard(&sp, 0.4);
        let op = LocalOp::bose_hubbard(3, 0.4);
        let (m, _) = op.to_matrix(&sp);
        assert_abs_diff_eq!(
            max_abs_diff(&m.to_dense(), &direct.to_dense()),
            0.0,
            epsilon = 1e-14
        );
    }

    #[test]
    fn compose_matches_matrix_product_on_buffered_states() {
        let sp = space(2, 6);
        let v = LocalOp::hopping(2, 0.5, 0.8);
        let prod = v.compose(&v);
        assert_eq!(prod.climb(), 2);
        let (pm, _) = prod.to_matrix(&sp);
        let (vm, _) = v.to_matrix(&sp);
        let dense = vm.to_dense();
        let expected = &dense * &dense;
        let keep = sp.buffered_indices(prod.climb());
        assert!(!keep.is_empty());
        assert!(max_abs_diff_on(&pm.to_dense(), &expected, &keep) < 1e-12);
    }

    #[test]
    fn compose_handles_occupation_dependent_coefficients() {
        // Left factor with an occupation-dependent coefficient exercises the
        // shifted evaluation inside the composition sum.
        let sp = space(2, 5);
        let mut t = vec![0i16; 2];
        t[0] = 1;
        t[1] = -1;
        let f = LocalOp::from_terms(
            2,
            1.0,
            vec![(t.clone(), DiagonalFn::on_site(0, |n| (n * n + 1) as f64))],
        );
        let g = LocalOp::from_terms(
            2,
            1.0,
            vec![(moves::neg(&t), DiagonalFn::on_site(1, |n| (2 * n + 3) as f64))],
        );
        let prod = f.compose(&g);
        let (pm, _) = prod.to_matrix(&sp);
        let (fm, _) = f.to_matrix(&sp);
        let (gm, _) = g.to_matrix(&sp);
        let expected = fm.to_dense() * gm.to_dense();
        let keep = sp.buffered_indices(prod.climb());
        assert!(max_abs_diff_on(&pm.to_dense(), &expected, &keep) < 1e-12);
    }

    #[test]
    fn commutator_matches_matrix_commutator_on_buffered_states() {
        let sp = space(3, 5);
        let params = ModelParams {
            g: 0.9,
            mu: 0.3,
            delta: 0.3,
            gamma: 0.75,
        };
        let d = LocalOp::interaction(3, params.delta);
        let v = LocalOp::hopping(3, params.delta, params.g);
        let dv = d.commutator(&v);
        assert_eq!(dv.climb(), 1);
        let (cm, _) = dv.to_matrix(&sp);
        let (dm, _) = d.to_matrix(&sp);
        let (vm, _) = v.to_matrix(&sp);
        let expected = commutator(&dm.to_dense(), &vm.to_dense());
        let keep = sp.buffered_indices(dv.climb());
        assert!(max_abs_diff_on(&cm.to_dense(), &expected, &keep) < 1e-12);

        // Second order: [v, [d, v]] against dense arithmetic.
        let vdv = v.commutator(&dv);
        let expected2 = commutator(&vm.to_dense(), &expected);
        let (cm2, _) = vdv.to_matrix(&sp);
        let keep2 = sp.buffered_indices(vdv.climb());
        assert!(!keep2.is_empty());
        assert!(max_abs_diff_on(&cm2.to_dense(), &expected2, &keep2) < 1e-11);
    }

    #[test]
    fn disjoint_supports_prune_to_zero() {
        let a = LocalOp::hopping_bond(5, 0.4, 1.0, 0);
        let b = LocalOp::hopping_bond(5, 0.4, 1.0, 3);
        let c = a.commutator(&b);
        assert!(c.is_zero());
    }

    #[test]
    fn adjoint_matches_conjugate_transpose_on_full_space() {
        let sp = space(2, 5);
        // Non-normal operator with a complex, occupation-dependent
        // coefficient.
        let mut t = vec![0i16; 2];
        t[0] = 1;
        t[1] = -1;
        let f = LocalOp::from_terms(
            2,
            0.6,
            vec![(
                t,
                DiagonalFn::from_fn(vec![1], |eta| Complex64::new(eta[1] as f64, 1.5)),
            )],
        );
        let (fm, _) = f.to_matrix(&sp);
        let (am, _) = f.adjoint().to_matrix(&sp);
        assert_abs_diff_eq!(
            max_abs_diff(&am.to_dense(), &fm.to_dense().adjoint()),
            0.0,
            epsilon = 1e-14
        );
        // Involution.
        let (aam, _) = f.adjoint().adjoint().to_matrix(&sp);
        assert_abs_diff_eq!(
            max_abs_diff(&aam.to_dense(), &fm.to_dense()),
            0.0,
            epsilon = 1e-14
        );
    }

    #[test]
    fn hopping_is_self_adjoint() {
        let v = LocalOp::hopping(3, 0.3, 0.7);
        let sp = space(3, 4);
        let (vm, _) = v.adjoint().sub(&v).to_matrix(&sp);
        assert!(max_abs(&vm.to_dense()) < 1e-14);
    }

    #[test]
    fn resonant_split_is_exact_partition() {
        let params = ModelParams {
            g: 0.6,
            mu: 0.3,
            delta: 0.3,
            gamma: 0.75,
        };
        let cutoff = ResonanceCutoff::new(params.delta, params.gamma);
        let v = LocalOp::hopping(3, params.delta, params.g);
        let sp = space(3, 5);
        let (vm, _) = v.to_matrix(&sp);
        let (rm, _) = v.resonant_part(&cutoff).to_matrix(&sp);
        let (nm, _) = v.nonresonant_part(&cutoff).to_matrix(&sp);
        assert!(max_abs_diff(&(rm.to_dense() + nm.to_dense()), &vm.to_dense()) < 1e-13);
    }

    #[test]
    fn kam_solve_satisfies_homological_equation_on_full_space() {
        let params = ModelParams {
            g: 0.8,
            mu: 0.3,
            delta: 0.3,
            gamma: 0.75,
        };
        let cutoff = ResonanceCutoff::new(params.delta, params.gamma);
        let sp = space(3, 5);
        let d = LocalOp::interaction(3, params.delta);
        let v = LocalOp::hopping(3, params.delta, params.g);
        let u = v.kam_solve(&cutoff).unwrap();

        let (dm, _) = d.to_matrix(&sp);
        let (um, _) = u.to_matrix(&sp);
        let (vm, _) = v.to_matrix(&sp);
        let (rm, _) = v.resonant_part(&cutoff).to_matrix(&sp);

        // [D, U] = V - R(V): exact on every retained matrix element because
        // D is diagonal.
        let lhs = commutator(&dm.to_dense(), &um.to_dense());
        let rhs = vm.to_dense() - rm.to_dense();
        assert!(max_abs_diff(&lhs, &rhs) < 1e-12);

        // The generator of a self-adjoint input is skew-adjoint.
        let skew = u.adjoint().add(&u);
        let (sm, _) = skew.to_matrix(&sp);
        assert!(max_abs(&sm.to_dense()) < 1e-13);
    }

    #[test]
    fn kam_solve_rejects_narrow_cutoff() {
        let v = LocalOp::hopping(3, 0.3, 0.5);
        // A width below one leaves integer resonances outside the plateau,
        // where the divided difference is no longer well defined.
        let cutoff = ResonanceCutoff::new(1.5, 0.75);
        assert!(cutoff.width < 1.0);
        assert!(v.kam_solve(&cutoff).is_err());
    }

    #[test]
    fn column_agrees_with_matrix_column() {
        let sp = space(2, 6);
        let v = LocalOp::hopping(2, 0.5, 1.1);
        let (vm, _) = v.to_matrix(&sp);
        let dense = vm.to_dense();
        let eta = vec![2i64, 3];
        let j = sp.index_of(&eta).unwrap();
        let col = v.column(&eta);
        assert_eq!(col.len(), 2);
        for (target, val) in col {
            let i = sp.index_of(&target).unwrap();
            assert_abs_diff_eq!((dense[(i, j)] - val).norm(), 0.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn climb_bookkeeping() {
        let v = LocalOp::hopping(3, 0.4, 1.0);
        assert_eq!(v.climb(), 1);
        assert_eq!(v.compose(&v).climb(), 2);
        assert_eq!(v.commutator(&v.compose(&v)).climb(), 3);
        assert_eq!(v.add(&v).climb(), 1);
        let d = LocalOp::interaction(3, 0.4);
        assert_eq!(d.climb(), 0);
    }
}
