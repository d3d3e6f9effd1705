//! Chain geometry, truncated Fock space and Hamiltonian assembly.
//!
//! The chain has an odd number of sites labelled `-(N-1)/2 ..= (N-1)/2` in
//! all input/output, while internally sites are indexed `0..N`. Occupation
//! configurations are stored as bare integer vectors; every power of the
//! density scale `delta` is applied explicitly in the formulas that need it.

use crate::error::{Error, Result};
use crate::matrix::{CsrMatrix, OperatorMatrix};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

/// One-dimensional chain with free boundary conditions and an odd number of
/// sites. Handles the centered site labels used in I/O.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChainGeometry {
    n_sites: usize,
}

impl ChainGeometry {
    /// Create a chain with `n_sites` sites; `n_sites` must be odd.
    pub fn new(n_sites: usize) -> Result<Self> {
        if n_sites == 0 || n_sites % 2 == 0 {
            return Err(Error::config(format!(
                "chain length must be odd and positive, got {n_sites}"
            )));
        }
        Ok(ChainGeometry { n_sites })
    }

    /// Create a chain of any positive length. Physical runs use odd chains;
    /// this constructor exists for oracle spaces (two-site commutation
    /// checks and similar) where the oddness convention is irrelevant.
    pub fn new_any(n_sites: usize) -> Result<Self> {
        if n_sites == 0 {
            return Err(Error::config("chain length must be positive"));
        }
        Ok(ChainGeometry { n_sites })
    }

    /// Number of sites.
    pub fn n_sites(&self) -> usize {
        self.n_sites
    }

    /// Centered label of an internal site index (I/O convention).
    pub fn centered_label(&self, site: usize) -> i64 {
        site as i64 - (self.n_sites as i64 - 1) / 2
    }

    /// Internal site index of a centered label, if it lies on the chain.
    pub fn site_of_label(&self, label: i64) -> Option<usize> {
        let idx = label + (self.n_sites as i64 - 1) / 2;
        if idx >= 0 && (idx as usize) < self.n_sites {
            Some(idx as usize)
        } else {
            None
        }
    }

    /// Internal indices of the ball of radius `r` around `center`, clipped to
    /// the chain.
    pub fn ball(&self, center: usize, r: usize) -> std::ops::Range<usize> {
        let lo = center.saturating_sub(r);
        let hi = (center + r + 1).min(self.n_sites);
        lo..hi
    }
}

/// Occupation configuration: one occupation number per site.
///
/// Stored as `i64` so that shifted configurations appearing inside discrete
/// derivatives can be represented before validity checks; physical
/// configurations are entrywise non-negative.
pub type Config = Vec<i64>;

/// Returns true when every occupation number is non-negative.
pub fn config_is_physical(eta: &[i64]) -> bool {
    eta.iter().all(|&n| n >= 0)
}

/// Sum of squared occupation numbers: the eigenvalue `E(eta)` of the bare
/// interaction term (per unit of the squared density scale).
pub fn energy_e(eta: &[i64]) -> i64 {
    eta.iter().map(|&n| n * n).sum()
}

/// Model parameters of the chain.
///
/// `delta` is the density scale used to form reduced operators, `mu` the
/// chemical potential of the Gibbs state, `g` the hopping strength and
/// `gamma` the cutoff exponent (the resonance width is `delta^-gamma`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelParams {
    pub g: f64,
    pub mu: f64,
    pub delta: f64,
    pub gamma: f64,
}

impl ModelParams {
    /// Validate ranges: `mu > 0`, `delta in (0, 1)`, `gamma in (1/2, 1)`.
    pub fn validate(&self) -> Result<()> {
        if !(self.mu > 0.0) {
            return Err(Error::config(format!("mu must be positive, got {}", self.mu)));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::config(format!(
                "delta must lie in (0,1), got {}",
                self.delta
            )));
        }
        if !(self.gamma > 0.5 && self.gamma < 1.0) {
            return Err(Error::config(format!(
                "gamma must lie in (1/2,1), got {}",
                self.gamma
            )));
        }
        if !self.g.is_finite() {
            return Err(Error::config("g must be finite"));
        }
        Ok(())
    }

    /// Complementary exponent `gamma' = 1 - gamma`.
    pub fn gamma_prime(&self) -> f64 {
        1.0 - self.gamma
    }

    /// Resonance width `delta^-gamma`.
    pub fn resonance_width(&self) -> f64 {
        self.delta.powf(-self.gamma)
    }

    /// Diagonalization depth prescribed for a target decay order `n0`:
    /// `ceil((n0 + 4 - gamma) / (1 - 2 gamma'))`.
    pub fn n1_prescribed(&self, n0: u32) -> u32 {
        let gp = self.gamma_prime();
        ((n0 as f64 + 4.0 - self.gamma) / (1.0 - 2.0 * gp)).ceil() as u32
    }

    /// Cluster size prescribed for a target decay order `n0`:
    /// `ceil((10 + 2 n0) / gamma')`.
    pub fn n2_prescribed(&self, n0: u32) -> u32 {
        ((10.0 + 2.0 * n0 as f64) / self.gamma_prime()).ceil() as u32
    }
}

/// Truncated Fock space: all configurations with per-site occupation at most
/// `n_max`, enumerated lexicographically with site 0 varying fastest.
#[derive(Debug, Clone)]
pub struct TruncatedFockSpace {
    geometry: ChainGeometry,
    n_max: i64,
    dim: usize,
}

/// Dimension guard default: dense work above this size is refused unless the
/// caller raises the cap explicitly.
pub const DEFAULT_MAX_DIM: usize = 20_000;

impl TruncatedFockSpace {
    /// Create the space, checking `(n_max+1)^N` against `max_dim`.
    pub fn new(geometry: ChainGeometry, n_max: u32, max_dim: usize) -> Result<Self> {
        let n = geometry.n_sites() as u32;
        let dim_u128 = (n_max as u128 + 1).checked_pow(n).ok_or_else(|| {
            Error::capacity(format!("(n_max+1)^N overflows: n_max={n_max}, N={n}"))
        })?;
        if dim_u128 > max_dim as u128 {
            return Err(Error::capacity(format!(
                "space dimension {dim_u128} exceeds cap {max_dim} (n_max={n_max}, N={n})"
            )));
        }
        Ok(TruncatedFockSpace {
            geometry,
            n_max: n_max as i64,
            dim: dim_u128 as usize,
        })
    }

    pub fn geometry(&self) -> &ChainGeometry {
        &self.geometry
    }

    pub fn n_sites(&self) -> usize {
        self.geometry.n_sites()
    }

    pub fn n_max(&self) -> i64 {
        self.n_max
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// True when `eta` lies in the space (non-negative, capped, right length).
    pub fn contains(&self, eta: &[i64]) -> bool {
        eta.len() == self.n_sites() && eta.iter().all(|&n| n >= 0 && n <= self.n_max)
    }

    /// Lexicographic index of a configuration (site 0 fastest).
    pub fn index_of(&self, eta: &[i64]) -> Option<usize> {
        if !self.contains(eta) {
            return None;
        }
        let base = (self.n_max + 1) as usize;
        let mut idx = 0usize;
        let mut stride = 1usize;
        for &n in eta {
            idx += n as usize * stride;
            stride *= base;
        }
        Some(idx)
    }

    /// Configuration at a given index.
    pub fn config_at(&self, mut index: usize) -> Config {
        assert!(index < self.dim, "index {index} out of range {}", self.dim);
        let base = (self.n_max + 1) as usize;
        let mut eta = vec![0i64; self.n_sites()];
        for slot in eta.iter_mut() {
            *slot = (index % base) as i64;
            index /= base;
        }
        eta
    }

    /// Iterate over all configurations in index order.
    pub fn iter(&self) -> impl Iterator<Item = Config> + '_ {
        (0..self.dim).map(move |i| self.config_at(i))
    }

    /// Buffered subspace indices: configurations whose maximal occupation is
    /// at most `n_max - buffer`. Matrix identities that involve operator
    /// products hold exactly on these states.
    pub fn buffered_indices(&self, buffer: i64) -> Vec<usize> {
        let cap = self.n_max - buffer;
        (0..self.dim)
            .filter(|&i| self.config_at(i).iter().all(|&n| n <= cap))
            .collect()
    }
}

/// Ladder operator kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ladder {
    /// Annihilation: `a |n> = sqrt(n) |n-1>`.
    Lower,
    /// Creation: `a* |n> = sqrt(n+1) |n+1>`.
    Raise,
}

/// Apply a single bare ladder operator at `site` to a basis configuration.
///
/// Returns the image configuration and amplitude, `Ok(None)` when the state
/// is annihilated (lowering from 0), and `Err` when raising would leave the
/// truncated space — the caller decides whether that is a tallied truncation
/// loss or a hard error.
pub fn apply_ladder(
    space: &TruncatedFockSpace,
    eta: &[i64],
    site: usize,
    kind: Ladder,
) -> std::result::Result<Option<(Config, f64)>, TruncationLoss> {
    debug_assert!(space.contains(eta));
    let mut out = eta.to_vec();
    match kind {
        Ladder::Lower => {
            let n = out[site];
            if n == 0 {
                return Ok(None);
            }
            out[site] = n - 1;
            Ok(Some((out, (n as f64).sqrt())))
        }
        Ladder::Raise => {
            let n = out[site];
            if n + 1 > space.n_max() {
                return Err(TruncationLoss {
                    site,
                    amplitude: ((n + 1) as f64).sqrt(),
                });
            }
            out[site] = n + 1;
            Ok(Some((out, ((n + 1) as f64).sqrt())))
        }
    }
}

/// A matrix element lost to the occupation cap.
#[derive(Debug, Clone, Copy)]
pub struct TruncationLoss {
    pub site: usize,
    pub amplitude: f64,
}

/// Running tally of matrix elements dropped at the occupation cap.
#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct LossTally {
    /// Number of dropped elements.
    pub count: u64,
    /// Largest dropped amplitude magnitude.
    pub max_amplitude: f64,
}

impl LossTally {
    pub fn record(&mut self, amplitude: f64) {
        self.count += 1;
        if amplitude.abs() > self.max_amplitude {
            self.max_amplitude = amplitude.abs();
        }
    }
}

/// Assemble the Bose-Hubbard Hamiltonian
/// `H = sum_x N_x^2 + g sum_{x<N-1} (a*_x a_{x+1} + a_x a*_{x+1})`
/// on the truncated space, together with the truncation-loss tally of the
/// hopping elements dropped at the occupation cap.
pub fn build_bose_hubbard(space: &TruncatedFockSpace, g: f64) -> (OperatorMatrix, LossTally) {
    build_chain_hamiltonian(space, 1.0, g)
}

/// Assemble the reduced Hamiltonian `h = d + mu v` where `d_x = (delta N_x)^2`
/// and `v_x = g (alpha*_x alpha_{x+1} + alpha_x alpha*_{x+1})` with
/// `alpha = sqrt(delta) a`. At `delta = mu` this equals `mu^2` times the
/// Bose-Hubbard Hamiltonian.
pub fn build_reduced_hamiltonian(
    space: &TruncatedFockSpace,
    params: &ModelParams,
) -> (OperatorMatrix, LossTally) {
    // d(eta) = delta^2 E(eta); hopping weight mu * g * delta.
    build_chain_hamiltonian(
        space,
        params.delta * params.delta,
        params.mu * params.g * params.delta,
    )
}

/// Shared assembly: `diag_scale * E(eta)` on the diagonal plus
/// `hop_weight * (a*_x a_{x+1} + a_x a*_{x+1})` on each bond, as a sparse
/// real-symmetric matrix.
fn build_chain_hamiltonian(
    space: &TruncatedFockSpace,
    diag_scale: f64,
    hop_weight: f64,
) -> (OperatorMatrix, LossTally) {
    let dim = space.dim();
    let n_sites = space.n_sites();
    let mut loss = LossTally::default();
    let mut triplets: Vec<(usize, usize, Complex64)> = Vec::with_capacity(dim * (n_sites + 1));
    for idx in 0..dim {
        let eta = space.config_at(idx);
        let diag = diag_scale * energy_e(&eta) as f64;
        if diag != 0.0 {
            triplets.push((idx, idx, Complex64::new(diag, 0.0)));
        }
        // Hopping: both directions written out explicitly so the matrix is
        // symmetric entry by entry.
        for x in 0..n_sites.saturating_sub(1) {
            for (from, to) in [(x + 1, x), (x, x + 1)] {
                // a*_to a_from acting on eta.
                let n_from = eta[from];
                if n_from == 0 {
                    continue;
                }
                let n_to = eta[to];
                let amp = hop_weight * ((n_from as f64) * (n_to as f64 + 1.0)).sqrt();
                if n_to + 1 > space.n_max() {
                    loss.record(amp);
                    continue;
                }
                let mut out = eta.clone();
                out[from] -= 1;
                out[to] += 1;
                let out_idx = space.index_of(&out).expect("image stays in space");
                triplets.push((out_idx, idx, Complex64::new(amp, 0.0)));
            }
        }
    }
    let csr = CsrMatrix::from_triplets(dim, triplets);
    (OperatorMatrix::from_sparse(csr), loss)
}

/// Total particle number operator as a diagonal matrix.
pub fn build_number_operator(space: &TruncatedFockSpace) -> OperatorMatrix {
    let dim = space.dim();
    let triplets = (0..dim)
        .map(|idx| {
            let eta = space.config_at(idx);
            let n: i64 = eta.iter().sum();
            (idx, idx, Complex64::new(n as f64, 0.0))
        })
        .collect();
    OperatorMatrix::from_sparse(CsrMatrix::from_triplets(dim, triplets))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn chain_rejects_even_length() {
        assert!(ChainGeometry::new(4).is_err());
        assert!(ChainGeometry::new(0).is_err());
        assert!(ChainGeometry::new(5).is_ok());
    }

    #[test]
    fn centered_labels_roundtrip() {
        let geo = ChainGeometry::new(5).unwrap();
        let labels: Vec<i64> = (0..5).map(|s| geo.centered_label(s)).collect();
        assert_eq!(labels, vec![-2, -1, 0, 1, 2]);
        for s in 0..5 {
            assert_eq!(geo.site_of_label(geo.centered_label(s)), Some(s));
        }
        assert_eq!(geo.site_of_label(3), None);
    }

    /// Index arithmetic on N=3, n_max=4: (2,0,1) -> 2 + 0*5 + 1*25 = 27.
    #[test]
    fn index_of_matches_mixed_radix() {
        let geo = ChainGeometry::new(3).unwrap();
        let space = TruncatedFockSpace::new(geo, 4, DEFAULT_MAX_DIM).unwrap();
        assert_eq!(space.dim(), 125);
        assert_eq!(space.index_of(&[2, 0, 1]), Some(27));
        assert_eq!(space.config_at(27), vec![2, 0, 1]);
        for idx in 0..space.dim() {
            assert_eq!(space.index_of(&space.config_at(idx)), Some(idx));
        }
    }

    #[test]
    fn two_site_enumeration_contract() {
        // N=2 spaces appear in oracle tests; enumeration keeps site 0 fastest.
        let geo = ChainGeometry::new_any(2).unwrap();
        let space = TruncatedFockSpace::new(geo, 1, DEFAULT_MAX_DIM).unwrap();
        let configs: Vec<Config> = space.iter().collect();
        assert_eq!(
            configs,
            vec![vec![0, 0], vec![1, 0], vec![0, 1], vec![1, 1]]
        );
    }

    #[test]
    fn ladder_amplitudes() {
        let geo = ChainGeometry::new(3).unwrap();
        let space = TruncatedFockSpace::new(geo, 4, DEFAULT_MAX_DIM).unwrap();
        // a* on n=3 gives sqrt(4).
        let (out, amp) = apply_ladder(&space, &[3, 0, 0], 0, Ladder::Raise)
            .unwrap()
            .unwrap();
        assert_eq!(out, vec![4, 0, 0]);
        assert_abs_diff_eq!(amp, 2.0, epsilon = 1e-15);
        // a on 0 annihilates.
        assert!(apply_ladder(&space, &[0, 1, 0], 0, Ladder::Lower)
            .unwrap()
            .is_none());
        // a on n=4 gives sqrt(4).
        let (out, amp) = apply_ladder(&space, &[4, 0, 0], 0, Ladder::Lower)
            .unwrap()
            .unwrap();
        assert_eq!(out, vec![3, 0, 0]);
        assert_abs_diff_eq!(amp, 2.0, epsilon = 1e-15);
        // Raising at the cap is a truncation loss with amplitude sqrt(5).
        let err = apply_ladder(&space, &[4, 0, 0], 0, Ladder::Raise).unwrap_err();
        assert_abs_diff_eq!(err.amplitude, 5f64.sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn capacity_cap_enforced() {
        let geo = ChainGeometry::new(7).unwrap();
        assert!(matches!(
            TruncatedFockSpace::new(geo, 9, DEFAULT_MAX_DIM),
            Err(Error::Capacity(_))
        ));
    }

    #[test]
    fn params_validation() {
        let ok = ModelParams {
            g: 0.5,
            mu: 0.3,
            delta: 0.3,
            gamma: 0.75,
        };
        assert!(ok.validate().is_ok());
        assert!(ModelParams { gamma: 0.4, ..ok }.validate().is_err());
        assert!(ModelParams { gamma: 1.0, ..ok }.validate().is_err());
        assert!(ModelParams { mu: 0.0, ..ok }.validate().is_err());
        assert!(ModelParams { delta: 1.0, ..ok }.validate().is_err());
    }

    /// Forced arithmetic of the prescribed depths at n0=1, gamma=3/4.
    #[test]
    fn prescribed_depths() {
        let p = ModelParams {
            g: 0.5,
            mu: 0.3,
            delta: 0.3,
            gamma: 0.75,
        };
        assert_eq!(p.n1_prescribed(1), 9); // ceil(4.25 / 0.5)
        assert_eq!(p.n2_prescribed(1), 48); // ceil(12 / 0.25)
    }
}
