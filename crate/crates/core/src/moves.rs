//! Occupation moves: integer vectors describing how an operator monomial
//! shifts a configuration.
//!
//! A move of range `r` has entries bounded by `r` in absolute value and its
//! support contained in a ball of radius `r` around some site. Moves are the
//! index set of the local operator algebra and of the resonance geometry.

use std::collections::BTreeSet;

/// A move: per-site occupation shift. Plain vector so it can key ordered maps.
pub type Move = Vec<i16>;

/// Sites where the move is non-zero.
pub fn support(rho: &[i16]) -> Vec<usize> {
    rho.iter()
        .enumerate()
        .filter_map(|(x, &v)| (v != 0).then_some(x))
        .collect()
}

/// l1 norm.
pub fn l1(rho: &[i16]) -> i64 {
    rho.iter().map(|&v| (v as i64).abs()).sum()
}

/// Squared l2 norm.
pub fn l2_sq(rho: &[i16]) -> i64 {
    rho.iter().map(|&v| (v as i64) * (v as i64)).sum()
}

/// l-infinity norm.
pub fn linf(rho: &[i16]) -> i64 {
    rho.iter().map(|&v| (v as i64).abs()).max().unwrap_or(0)
}

/// Largest positive entry: how far the move can raise a single occupation.
pub fn climb(rho: &[i16]) -> i64 {
    rho.iter().map(|&v| v as i64).max().unwrap_or(0).max(0)
}

/// Entrywise negation.
pub fn neg(rho: &[i16]) -> Move {
    rho.iter().map(|&v| -v).collect()
}

/// Entrywise sum.
pub fn add(a: &[i16], b: &[i16]) -> Move {
    a.iter().zip(b.iter()).map(|(&x, &y)| x + y).collect()
}

/// Dot product with an integer configuration.
pub fn dot_config(rho: &[i16], eta: &[i64]) -> i64 {
    rho.iter()
        .zip(eta.iter())
        .map(|(&v, &n)| v as i64 * n)
        .sum()
}

/// Dot product with a real vector.
pub fn dot_real(rho: &[i16], eta: &[f64]) -> f64 {
    rho.iter()
        .zip(eta.iter())
        .map(|(&v, &n)| v as f64 * n)
        .sum()
}

/// Membership in the range-`r` move set: non-zero, entries bounded by `r`,
/// support inside a radius-`r` ball centered on a chain site.
pub fn in_move_set(rho: &[i16], r: u32) -> bool {
    if rho.iter().all(|&v| v == 0) {
        return false;
    }
    if linf(rho) > r as i64 {
        return false;
    }
    let supp = support(rho);
    let lo = supp[0];
    let hi = *supp.last().unwrap();
    if hi - lo > 2 * r as usize {
        return false;
    }
    // A center with supp within distance r always exists on the chain when
    // the diameter fits: the midpoint rounded down is between lo and hi.
    true
}

/// Enumerate the full move set of range `r` on `n_sites` sites, sorted
/// lexicographically (deterministic order).
pub fn move_set(n_sites: usize, r: u32) -> Vec<Move> {
    move_set_in_window(n_sites, r, 0..n_sites)
}

/// Enumerate moves of range `r` whose support lies inside `window`
/// (a contiguous internal-index range), sorted lexicographically.
pub fn move_set_in_window(
    n_sites: usize,
    r: u32,
    window: std::ops::Range<usize>,
) -> Vec<Move> {
    let mut seen: BTreeSet<Move> = BTreeSet::new();
    let width = 2 * r as usize + 1;
    let ri = r as i16;
    for center in window.clone() {
        let lo = center.saturating_sub(r as usize).max(window.start);
        let hi = (center + r as usize + 1).min(window.end).min(n_sites);
        if lo >= hi {
            continue;
        }
        let span = hi - lo;
        debug_assert!(span <= width);
        // Odometer over entries -r..=r on the span.
        let mut digits = vec![-ri; span];
        loop {
            if digits.iter().any(|&v| v != 0) {
                let mut mv = vec![0i16; n_sites];
                mv[lo..hi].copy_from_slice(&digits);
                if in_move_set(&mv, r) {
                    seen.insert(mv);
                }
            }
            // Increment odometer.
            let mut k = 0;
            loop {
                if k == span {
                    break;
                }
                if digits[k] < ri {
                    digits[k] += 1;
                    break;
                }
                digits[k] = -ri;
                k += 1;
            }
            if k == span {
                break;
            }
        }
    }
    seen.into_iter().collect()
}

/// Resonance level shift: `E(eta + rho) - E(eta) = 2 eta . rho + |rho|^2`
/// for integer configurations.
pub fn delta_e(rho: &[i16], eta: &[i64]) -> i64 {
    2 * dot_config(rho, eta) + l2_sq(rho)
}

/// Same, for real points in occupation space.
pub fn delta_e_real(rho: &[i16], eta: &[f64]) -> f64 {
    2.0 * dot_real(rho, eta) + l2_sq(rho) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Brute-force reference: all vectors with entries in [-r, r], non-zero,
    /// support diameter at most 2r.
    fn brute_force(n_sites: usize, r: u32) -> Vec<Move> {
        let ri = r as i16;
        let mut out = BTreeSet::new();
        let total = (2 * r as usize + 1).pow(n_sites as u32);
        for code in 0..total {
            let mut c = code;
            let mut mv = vec![0i16; n_sites];
            for slot in mv.iter_mut() {
                *slot = (c % (2 * r as usize + 1)) as i16 - ri;
                c /= 2 * r as usize + 1;
            }
            if mv.iter().all(|&v| v == 0) {
                continue;
            }
            let supp = support(&mv);
            if supp.last().unwrap() - supp[0] <= 2 * r as usize {
                out.insert(mv);
            }
        }
        out.into_iter().collect()
    }

    #[test]
    fn move_set_matches_brute_force() {
        for (n, r) in [(5usize, 2u32), (4, 1), (6, 1), (3, 2)] {
            let got = move_set(n, r);
            let want = brute_force(n, r);
            assert_eq!(got, want, "n={n} r={r}");
        }
    }

    /// Every range-r move satisfies |rho|_2 <= 2 r^2.
    #[test]
    fn l2_bound() {
        for r in 1..=3u32 {
            for mv in move_set(9, r) {
                let l2 = (l2_sq(&mv) as f64).sqrt();
                assert!(
                    l2 <= 2.0 * (r * r) as f64 + 1e-12,
                    "move {mv:?} violates the l2 bound at r={r}"
                );
            }
        }
    }

    #[test]
    fn delta_e_examples() {
        // eta=(3,1), rho=(-1,1): E goes from 10 to 8.
        assert_eq!(delta_e(&[-1, 1], &[3, 1]), -2);
        // eta=(5,5), rho=(1,-1): 2 eta.rho = 0, |rho|^2 = 2.
        assert_eq!(delta_e(&[1, -1], &[5, 5]), 2);
    }

    #[test]
    fn delta_e_matches_direct_difference() {
        let etas = [[3i64, 1, 0], [5, 5, 2], [0, 7, 1]];
        let rhos = [[-1i16, 1, 0], [1, -1, 1], [0, 2, -1]];
        for eta in &etas {
            for rho in &rhos {
                let shifted: Vec<i64> = eta
                    .iter()
                    .zip(rho.iter())
                    .map(|(&n, &v)| n + v as i64)
                    .collect();
                let direct: i64 = shifted.iter().map(|&n| n * n).sum::<i64>()
                    - eta.iter().map(|&n| n * n).sum::<i64>();
                assert_eq!(delta_e(rho, eta), direct);
            }
        }
    }

    #[test]
    fn window_restricted_enumeration() {
        let all = move_set(7, 1);
        let windowed = move_set_in_window(7, 1, 2..5);
        for mv in &windowed {
            assert!(all.contains(mv));
            let supp = support(mv);
            assert!(supp.iter().all(|&x| (2..5).contains(&x)));
        }
        // Single nearest-neighbor hops inside the window must be present.
        let mut hop = vec![0i16; 7];
        hop[2] = 1;
        hop[3] = -1;
        assert!(windowed.contains(&hop));
    }
}
