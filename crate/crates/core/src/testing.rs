//! Deterministic random-instance generators shared by verification suites.
//!
//! Everything here is seeded explicitly so that failures replay exactly.

use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diagonal::DiagonalFn;
use crate::localop::LocalOp;
use crate::moves;

/// Fresh deterministic generator.
pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Bounded smooth coefficient on the given window:
/// `c0 + c1 * cos(sum_x k_x eta_x + phase)` with random constants.
pub fn random_coefficient(window: Vec<usize>, rng: &mut ChaCha8Rng) -> DiagonalFn {
    let c0: f64 = rng.gen_range(-1.0..1.0);
    let c1: f64 = rng.gen_range(-1.0..1.0);
    let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let ks: Vec<(usize, f64)> = window
        .iter()
        .map(|&x| (x, rng.gen_range(-0.7..0.7)))
        .collect();
    DiagonalFn::from_fn(window, move |eta| {
        let arg: f64 = ks.iter().map(|&(x, k)| k * eta[x] as f64).sum::<f64>() + phase;
        Complex64::new(c0 + c1 * arg.cos(), 0.0)
    })
}

/// Random class-S operator: moves drawn from the range-`r` move set
/// (plus optionally a diagonal term), each with a bounded smooth
/// coefficient reading the move support and one extra site.
pub fn random_local_op(
    n_sites: usize,
    delta: f64,
    r: u32,
    num_moves: usize,
    include_diagonal: bool,
    rng: &mut ChaCha8Rng,
) -> LocalOp {
    let pool = moves::move_set(n_sites, r);
    let mut terms: Vec<(moves::Move, DiagonalFn)> = Vec::new();
    let picks: Vec<_> = pool
        .choose_multiple(rng, num_moves.min(pool.len()))
        .cloned()
        .collect();
    for rho in picks {
        let mut window = moves::support(&rho);
        window.push(rng.gen_range(0..n_sites));
        terms.push((rho, random_coefficient(window, rng)));
    }
    if include_diagonal {
        let window = vec![rng.gen_range(0..n_sites)];
        terms.push((vec![0; n_sites], random_coefficient(window, rng)));
    }
    LocalOp::from_terms(n_sites, delta, terms)
}

/// Random self-adjoint class-S operator (`f + f†` of a random draw).
pub fn random_self_adjoint_op(
    n_sites: usize,
    delta: f64,
    r: u32,
    num_moves: usize,
    rng: &mut ChaCha8Rng,
) -> LocalOp {
    let f = random_local_op(n_sites, delta, r, num_moves, true, rng);
    f.add(&f.adjoint()).scale_real(0.5)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{ChainGeometry, TruncatedFockSpace, DEFAULT_MAX_DIM};
    use crate::matrix::max_abs;

    #[test]
    fn self_adjoint_draw_is_self_adjoint() {
        let mut rng = rng(7);
        let f = random_self_adjoint_op(3, 0.4, 1, 3, &mut rng);
        let sp = TruncatedFockSpace::new(
            ChainGeometry::new_any(3).unwrap(),
            4,
            DEFAULT_MAX_DIM,
        )
        .unwrap();
        let (m, _) = f.sub(&f.adjoint()).to_matrix(&sp);
        assert!(max_abs(&m.to_dense()) < 1e-14);
    }

    #[test]
    fn draws_are_seed_deterministic() {
        let f1 = random_local_op(3, 0.4, 1, 2, true, &mut rng(42));
        let f2 = random_local_op(3, 0.4, 1, 2, true, &mut rng(42));
        let eta = vec![2i64, 1, 3];
        for (rho, b) in f1.terms() {
            let other = f2.term(rho).expect("same moves under same seed");
            assert_eq!(b.eval(&eta), other.eval(&eta));
        }
    }
}
