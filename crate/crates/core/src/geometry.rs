//! Resonance geometry: clusters of moves, flattened-cylinder sets,
//! resonant zones, multi-resonant sets, and the broadened zones used by the
//! moment estimates.
//!
//! Everything here works on real occupation-space points; integer
//! configurations embed. A cluster's flattened cylinder depends only on the
//! span of its moves, which the implementation exploits by deduplicating
//! membership tests by canonical span. Exact integer linear algebra decides
//! ranks and span equality; floating point enters only through projections.

use std::collections::{BTreeMap, BTreeSet};
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moves::{self, Move};

/// Scales and ranges of the geometric construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometryParams {
    /// Flattening scale; thresholds grow like powers of this.
    pub l: f64,
    pub delta: f64,
    pub gamma: f64,
    /// Largest cluster size considered (and the rank demanded of the
    /// broadened-zone move families).
    pub n2: usize,
    /// Search radius entering the zone windows.
    pub n3: usize,
    /// Move range.
    pub r: u32,
    /// Cap on enumerated clusters per anchor before giving up.
    pub max_clusters: usize,
}

impl GeometryParams {
    pub fn new(l: f64, delta: f64, gamma: f64, n2: usize, n3: usize, r: u32) -> Result<Self> {
        let params = GeometryParams {
            l,
            delta,
            gamma,
            n2,
            n3,
            r,
            max_clusters: 200_000,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.l > 1.0) {
            return Err(Error::config(format!(
                "flattening scale must exceed 1, got {}",
                self.l
            )));
        }
        if self.n2 < 1 || self.n3 < 1 {
            return Err(Error::config("n2 and n3 must be at least 1"));
        }
        if self.r < 1 {
            return Err(Error::config("move range must be at least 1"));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::config(format!(
                "delta must lie in (0, 1), got {}",
                self.delta
            )));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::config(format!(
                "gamma must lie in (0, 1), got {}",
                self.gamma
            )));
        }
        Ok(())
    }

    /// Resonance width `delta^-gamma`.
    pub fn width(&self) -> f64 {
        self.delta.powf(-self.gamma)
    }

    /// Default resonance-budget constant for the invariance and extension
    /// suites: `8 r^2 + 2`, the worst inner product a kernel-shifted
    /// resonant point can accumulate.
    pub fn k_default(&self) -> f64 {
        8.0 * (self.r * self.r) as f64 + 2.0
    }

    /// Threshold `L^{n2+1} delta^-gamma` for multi-resonant membership.
    pub fn multi_resonance_threshold(&self) -> f64 {
        self.l.powi(self.n2 as i32 + 1) * self.width()
    }
}

/// Chain ball `B(x, radius)` clipped to the lattice, as an index range.
pub fn ball(x: usize, radius: usize, n_sites: usize) -> Range<usize> {
    x.saturating_sub(radius)..(x + radius + 1).min(n_sites)
}

// ---------------------------------------------------------------------------
// Exact integer linear algebra on moves.
// ---------------------------------------------------------------------------

fn gcd(a: i128, b: i128) -> i128 {
    let (mut a, mut b) = (a.abs(), b.abs());
    while b != 0 {
        let t = a % b;
        a = b;
        b = t;
    }
    a
}

/// Reduce a row to its primitive integer form with positive leading entry.
fn make_primitive(row: &mut [i128]) {
    let mut g = 0i128;
    for &v in row.iter() {
        g = gcd(g, v);
    }
    if g > 1 {
        for v in row.iter_mut() {
            *v /= g;
        }
    }
    if let Some(&lead) = row.iter().find(|&&v| v != 0) {
        if lead < 0 {
            for v in row.iter_mut() {
                *v = -*v;
            }
        }
    }
}

/// Fraction-free Gauss-Jordan elimination. Returns the canonical reduced
/// row basis of the row space: primitive integer rows with positive leading
/// entries, sorted by pivot column. Two generating sets span the same
/// subspace iff they reduce to the same basis.
pub fn row_space_basis(rows: &[Vec<i128>]) -> Vec<Vec<i128>> {
    let mut mat: Vec<Vec<i128>> = rows
        .iter()
        .filter(|r| r.iter().any(|&v| v != 0))
        .cloned()
        .collect();
    if mat.is_empty() {
        return Vec::new();
    }
    let cols = mat[0].len();
    let mut pivot_row = 0usize;
    for col in 0..cols {
        let Some(found) = (pivot_row..mat.len()).find(|&i| mat[i][col] != 0) else {
            continue;
        };
        mat.swap(pivot_row, found);
        make_primitive(&mut mat[pivot_row]);
        let pivot = mat[pivot_row][col];
        for i in 0..mat.len() {
            if i == pivot_row || mat[i][col] == 0 {
                continue;
            }
            let factor = mat[i][col];
            for j in 0..cols {
                mat[i][j] = mat[i][j] * pivot - mat[pivot_row][j] * factor;
            }
            make_primitive(&mut mat[i]);
        }
        pivot_row += 1;
        if pivot_row == mat.len() {
            break;
        }
    }
    mat.truncate(pivot_row);
    for row in mat.iter_mut() {
        make_primitive(row);
    }
    mat.sort_by_key(|row| row.iter().position(|&v| v != 0).unwrap_or(cols));
    mat
}

fn moves_as_rows(mvs: &[&Move]) -> Vec<Vec<i128>> {
    mvs.iter()
        .map(|m| m.iter().map(|&v| v as i128).collect())
        .collect()
}

/// Exact rank of a set of moves.
pub fn integer_rank(mvs: &[&Move]) -> usize {
    row_space_basis(&moves_as_rows(mvs)).len()
}

/// Canonical key identifying the span of a set of moves.
pub fn span_key(mvs: &[&Move]) -> Vec<Vec<i128>> {
    row_space_basis(&moves_as_rows(mvs))
}

/// All `k`-element index subsets of `0..n`, visited in lexicographic order.
fn for_each_subset(n: usize, k: usize, mut visit: impl FnMut(&[usize])) {
    if k > n {
        return;
    }
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        visit(&idx);
        // Advance the odometer.
        let mut i = k;
        loop {
            if i == 0 {
                return;
            }
            i -= 1;
            if idx[i] != i + n - k {
                break;
            }
            if i == 0 {
                return;
            }
        }
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

// ---------------------------------------------------------------------------
// Orthonormal span bases and projections.
// ---------------------------------------------------------------------------

const SPAN_RESIDUAL_TOL: f64 = 1e-9;

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Orthonormal basis of the span of a family of real vectors.
#[derive(Debug, Clone)]
pub struct SpanBasis {
    n_sites: usize,
    vectors: Vec<Vec<f64>>,
}

impl SpanBasis {
    /// Gram-Schmidt with a second orthogonalization pass; vectors that are
    /// (numerically) dependent on the previous ones are dropped.
    pub fn from_vectors(vs: &[Vec<f64>], n_sites: usize) -> SpanBasis {
        let mut basis: Vec<Vec<f64>> = Vec::new();
        for v in vs {
            let mut u = v.clone();
            for _ in 0..2 {
                for e in &basis {
                    let c = dot(&u, e);
                    for (ui, ei) in u.iter_mut().zip(e) {
                        *ui -= c * ei;
                    }
                }
            }
            let norm = norm2(&u);
            if norm > 1e-10 * norm2(v).max(1.0) {
                for ui in u.iter_mut() {
                    *ui /= norm;
                }
                basis.push(u);
            }
        }
        SpanBasis {
            n_sites,
            vectors: basis,
        }
    }

    pub fn from_moves(mvs: &[Move], n_sites: usize) -> SpanBasis {
        let vs: Vec<Vec<f64>> = mvs
            .iter()
            .map(|m| m.iter().map(|&v| v as f64).collect())
            .collect();
        SpanBasis::from_vectors(&vs, n_sites)
    }

    fn from_integer_rows(rows: &[Vec<i128>], n_sites: usize) -> SpanBasis {
        let vs: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| r.iter().map(|&v| v as f64).collect())
            .collect();
        SpanBasis::from_vectors(&vs, n_sites)
    }

    pub fn dim(&self) -> usize {
        self.vectors.len()
    }

    pub fn n_sites(&self) -> usize {
        self.n_sites
    }

    pub fn vectors(&self) -> &[Vec<f64>] {
        &self.vectors
    }

    /// Orthogonal projection onto the span.
    pub fn project(&self, eta: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_sites];
        for e in &self.vectors {
            let c = dot(eta, e);
            for (oi, ei) in out.iter_mut().zip(e) {
                *oi += c * ei;
            }
        }
        out
    }

    /// `|eta - P eta|_2`: distance to the span.
    pub fn residual(&self, eta: &[f64]) -> f64 {
        let p = self.project(eta);
        eta.iter()
            .zip(&p)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    pub fn contains_vector(&self, eta: &[f64], tol: f64) -> bool {
        self.residual(eta) <= tol
    }
}

/// Real embedding of a move.
pub fn move_as_real(rho: &[i16]) -> Vec<f64> {
    rho.iter().map(|&v| v as f64).collect()
}

// ---------------------------------------------------------------------------
// Clusters.
// ---------------------------------------------------------------------------

/// True iff the moves are linearly independent, their supports percolate
/// (the support-intersection graph is connected), and at least one support
/// sits inside `B(x, 4r)`.
pub fn is_cluster(mvs: &[Move], x: usize, r: u32, n_sites: usize) -> bool {
    if mvs.is_empty() {
        return false;
    }
    let refs: Vec<&Move> = mvs.iter().collect();
    if integer_rank(&refs) != mvs.len() {
        return false;
    }
    // Percolation: breadth-first search on the support-intersection graph.
    let supports: Vec<BTreeSet<usize>> = mvs
        .iter()
        .map(|m| moves::support(m).into_iter().collect())
        .collect();
    let mut seen = vec![false; mvs.len()];
    let mut stack = vec![0usize];
    seen[0] = true;
    while let Some(i) = stack.pop() {
        for j in 0..mvs.len() {
            if !seen[j] && supports[i].intersection(&supports[j]).next().is_some() {
                seen[j] = true;
                stack.push(j);
            }
        }
    }
    if seen.iter().any(|&s| !s) {
        return false;
    }
    // Anchoring.
    let anchor_window = ball(x, 4 * r as usize, n_sites);
    mvs.iter()
        .any(|m| moves::support(m).iter().all(|&s| anchor_window.contains(&s)))
}

/// A cluster of moves anchored at a site, with its orthonormal span basis.
#[derive(Debug, Clone)]
pub struct ResonanceCluster {
    anchor: usize,
    moves: Vec<Move>,
    basis: SpanBasis,
}

impl ResonanceCluster {
    pub fn new(mvs: Vec<Move>, anchor: usize, r: u32, n_sites: usize) -> Result<Self> {
        if !is_cluster(&mvs, anchor, r, n_sites) {
            return Err(Error::config(
                "moves do not form a cluster around the anchor",
            ));
        }
        let basis = SpanBasis::from_moves(&mvs, n_sites);
        debug_assert_eq!(basis.dim(), mvs.len());
        Ok(ResonanceCluster {
            anchor,
            moves: mvs,
            basis,
        })
    }

    pub fn p(&self) -> usize {
        self.moves.len()
    }

    pub fn anchor(&self) -> usize {
        self.anchor
    }

    pub fn moves(&self) -> &[Move] {
        &self.moves
    }

    pub fn basis(&self) -> &SpanBasis {
        &self.basis
    }

    /// Union of the member supports.
    pub fn support(&self) -> BTreeSet<usize> {
        self.moves
            .iter()
            .flat_map(|m| moves::support(m))
            .collect()
    }
}

/// Projection of a point onto the intersection of the member hyperplanes:
/// the point minus its span component.
pub fn project_onto_intersection(eta: &[f64], cluster: &ResonanceCluster) -> Vec<f64> {
    let span_part = cluster.basis.project(eta);
    eta.iter().zip(&span_part).map(|(a, b)| a - b).collect()
}

// ---------------------------------------------------------------------------
// Flattened cylinders.
// ---------------------------------------------------------------------------

/// Prepared membership test for one flattened cylinder. Membership depends
/// on the cluster only through its span, so one of these serves every
/// cluster with the same span. The conditions are evaluated in the
/// equivalent inner form: with `s = P_span(eta)`, membership requires
/// `|s|_2 <= L^p w` and `|s - P_F s|_2 <= (L^p - L^{p'}) w` for every
/// proper subspace `F` spanned by range-r moves inside the span.
#[derive(Debug, Clone)]
pub struct BSet {
    p: usize,
    basis: SpanBasis,
    first_threshold: f64,
    /// Distinct proper subspans with their flattening thresholds.
    subsets: Vec<(SpanBasis, f64)>,
    /// The range-r moves lying in the span (the flattening directions).
    span_moves: Vec<Move>,
    /// Cheap rejection tests: sparse cluster moves with their threshold
    /// times move norm. `|rho . eta| > L^p w |rho|_2` for a span move
    /// already implies the first condition fails.
    rejectors: Vec<(Vec<(usize, f64)>, f64)>,
}

const MAX_SPAN_MOVES: usize = 512;

impl BSet {
    pub fn build(cluster: &ResonanceCluster, params: &GeometryParams, n_sites: usize) -> Result<BSet> {
        params.validate()?;
        let p = cluster.p();
        let w = params.width();
        let lp = params.l.powi(p as i32);
        let support = cluster.support();
        let lo = *support.iter().next().unwrap();
        let hi = *support.iter().last().unwrap();
        let pool = moves::move_set_in_window(n_sites, params.r, lo..hi + 1);
        let span_moves: Vec<Move> = pool
            .into_iter()
            .filter(|m| cluster.basis.contains_vector(&move_as_real(m), SPAN_RESIDUAL_TOL))
            .collect();
        if span_moves.len() > MAX_SPAN_MOVES {
            return Err(Error::capacity(format!(
                "span contains {} range-{} moves, enumeration cap is {MAX_SPAN_MOVES}",
                span_moves.len(),
                params.r
            )));
        }
        let mut spans: BTreeMap<Vec<Vec<i128>>, usize> = BTreeMap::new();
        let refs: Vec<&Move> = span_moves.iter().collect();
        for k in 1..p {
            for_each_subset(refs.len(), k, |idx| {
                let subset: Vec<&Move> = idx.iter().map(|&i| refs[i]).collect();
                let key = span_key(&subset);
                if key.len() == k {
                    spans.insert(key, k);
                }
            });
        }
        let subsets: Vec<(SpanBasis, f64)> = spans
            .into_iter()
            .map(|(rows, dim)| {
                let basis = SpanBasis::from_integer_rows(&rows, n_sites);
                debug_assert_eq!(basis.dim(), dim);
                (basis, (lp - params.l.powi(dim as i32)) * w)
            })
            .collect();
        let rejectors = cluster
            .moves
            .iter()
            .map(|m| {
                let entries: Vec<(usize, f64)> = m
                    .iter()
                    .enumerate()
                    .filter(|(_, &v)| v != 0)
                    .map(|(site, &v)| (site, v as f64))
                    .collect();
                let norm = (moves::l2_sq(m) as f64).sqrt();
                (entries, lp * w * norm)
            })
            .collect();
        Ok(BSet {
            p,
            basis: cluster.basis.clone(),
            first_threshold: lp * w,
            subsets,
            span_moves,
            rejectors,
        })
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn basis(&self) -> &SpanBasis {
        &self.basis
    }

    /// The norm bound on the span component.
    pub fn first_threshold(&self) -> f64 {
        self.first_threshold
    }

    /// Range-r moves lying in the span.
    pub fn span_moves(&self) -> &[Move] {
        &self.span_moves
    }

    pub fn contains(&self, eta: &[f64]) -> bool {
        for (entries, bound) in &self.rejectors {
            let mut d = 0.0;
            for &(site, coeff) in entries {
                d += coeff * eta[site];
            }
            if d.abs() > *bound {
                return false;
            }
        }
        let s = self.basis.project(eta);
        if norm2(&s) > self.first_threshold {
            return false;
        }
        self.subsets.iter().all(|(f, threshold)| {
            let pf = f.project(&s);
            let mut resid = 0.0;
            for (a, b) in s.iter().zip(&pf) {
                let d = a - b;
                resid += d * d;
            }
            resid.sqrt() <= *threshold
        })
    }

    /// Signed worst slack over all membership inequalities: how far the
    /// most violated condition exceeds its threshold (negative inside).
    pub fn violation(&self, eta: &[f64]) -> f64 {
        let s = self.basis.project(eta);
        let mut worst = norm2(&s) - self.first_threshold;
        for (f, threshold) in &self.subsets {
            let pf = f.project(&s);
            let mut resid = 0.0;
            for (a, b) in s.iter().zip(&pf) {
                let d = a - b;
                resid += d * d;
            }
            worst = worst.max(resid.sqrt() - threshold);
        }
        worst
    }
}

/// Membership of a point in the flattened cylinder of one cluster.
pub fn in_b(eta: &[f64], cluster: &ResonanceCluster, params: &GeometryParams) -> Result<bool> {
    let b = BSet::build(cluster, params, cluster.basis.n_sites())?;
    Ok(b.contains(eta))
}

// ---------------------------------------------------------------------------
// Resonant zones.
// ---------------------------------------------------------------------------

/// The resonant zone around one site: the union of the flattened cylinders
/// of all clusters of size up to `n2`, plus the size-`n2` cluster list that
/// defines the multi-resonant subset.
#[derive(Debug, Clone)]
pub struct ResonantZone {
    anchor: usize,
    n_sites: usize,
    window: Vec<usize>,
    b_sets: Vec<BSet>,
    /// One representative cluster per distinct span, aligned with `b_sets`.
    representatives: Vec<ResonanceCluster>,
    multi_clusters: Vec<Vec<Move>>,
    multi_threshold: f64,
}

impl ResonantZone {
    /// Enumerate all clusters around `x` (breadth-first over
    /// support-intersecting moves, capped by `params.max_clusters`),
    /// deduplicate their spans, and prepare the membership tests.
    pub fn build(x: usize, params: &GeometryParams, n_sites: usize) -> Result<ResonantZone> {
        params.validate()?;
        let r = params.r as usize;
        let pool_window = ball(x, params.n3 + 4 * r + params.n2 * r, n_sites);
        let pool = moves::move_set_in_window(n_sites, params.r, pool_window);
        let supports: Vec<BTreeSet<usize>> = pool
            .iter()
            .map(|m| moves::support(m).into_iter().collect())
            .collect();
        let anchor_window = ball(x, 4 * r, n_sites);
        let seeds: Vec<usize> = (0..pool.len())
            .filter(|&i| supports[i].iter().all(|&s| anchor_window.contains(&s)))
            .collect();

        let mut discovered: BTreeSet<Vec<usize>> = BTreeSet::new();
        let mut frontier: Vec<Vec<usize>> = Vec::new();
        for &i in &seeds {
            let c = vec![i];
            if discovered.insert(c.clone()) {
                frontier.push(c);
            }
        }
        while let Some(cluster_idx) = frontier.pop() {
            if discovered.len() > params.max_clusters {
                return Err(Error::capacity(format!(
                    "more than {} clusters around site {x}",
                    params.max_clusters
                )));
            }
            if cluster_idx.len() == params.n2 {
                continue;
            }
            let union: BTreeSet<usize> = cluster_idx
                .iter()
                .flat_map(|&i| supports[i].iter().copied())
                .collect();
            let members: Vec<&Move> = cluster_idx.iter().map(|&i| &pool[i]).collect();
            for j in 0..pool.len() {
                if cluster_idx.binary_search(&j).is_ok() {
                    continue;
                }
                if supports[j].intersection(&union).next().is_none() {
                    continue;
                }
                let mut extended = members.clone();
                extended.push(&pool[j]);
                if integer_rank(&extended) != extended.len() {
                    continue;
                }
                let mut key = cluster_idx.clone();
                let pos = key.binary_search(&j).unwrap_err();
                key.insert(pos, j);
                if discovered.insert(key.clone()) {
                    frontier.push(key);
                }
            }
        }

        let mut span_to_cluster: BTreeMap<Vec<Vec<i128>>, Vec<usize>> = BTreeMap::new();
        let mut multi_clusters = Vec::new();
        for cluster_idx in &discovered {
            let members: Vec<&Move> = cluster_idx.iter().map(|&i| &pool[i]).collect();
            span_to_cluster
                .entry(span_key(&members))
                .or_insert_with(|| cluster_idx.clone());
            if cluster_idx.len() == params.n2 {
                multi_clusters.push(members.iter().map(|m| (*m).clone()).collect());
            }
        }
        let mut b_sets = Vec::with_capacity(span_to_cluster.len());
        let mut representatives = Vec::with_capacity(span_to_cluster.len());
        let mut window: BTreeSet<usize> = BTreeSet::new();
        for cluster_idx in span_to_cluster.values() {
            let mvs: Vec<Move> = cluster_idx.iter().map(|&i| pool[i].clone()).collect();
            let cluster = ResonanceCluster::new(mvs, x, params.r, n_sites)?;
            window.extend(cluster.support());
            b_sets.push(BSet::build(&cluster, params, n_sites)?);
            representatives.push(cluster);
        }
        Ok(ResonantZone {
            anchor: x,
            n_sites,
            window: window.into_iter().collect(),
            b_sets,
            representatives,
            multi_clusters,
            multi_threshold: params.multi_resonance_threshold(),
        })
    }

    pub fn anchor(&self) -> usize {
        self.anchor
    }

    pub fn n_sites(&self) -> usize {
        self.n_sites
    }

    /// Sites the membership predicate reads.
    pub fn window(&self) -> &[usize] {
        &self.window
    }

    pub fn b_sets(&self) -> &[BSet] {
        &self.b_sets
    }

    /// Representative clusters, one per distinct span, aligned with
    /// [`ResonantZone::b_sets`].
    pub fn clusters(&self) -> &[ResonanceCluster] {
        &self.representatives
    }

    /// Number of size-`n2` clusters backing the multi-resonant test.
    pub fn num_multi_clusters(&self) -> usize {
        self.multi_clusters.len()
    }

    /// Membership in the resonant zone.
    pub fn contains(&self, eta: &[f64]) -> bool {
        self.b_sets.iter().any(|b| b.contains(eta))
    }

    /// Membership with a caller-kept hint: the cylinder that contained
    /// the previous point is tried first, which makes sweeps over nearby
    /// points (quadrature grids) close to one membership test each.
    pub fn contains_hinted(&self, eta: &[f64], hint: &mut usize) -> bool {
        if let Some(b) = self.b_sets.get(*hint) {
            if b.contains(eta) {
                return true;
            }
        }
        for (i, b) in self.b_sets.iter().enumerate() {
            if i != *hint && b.contains(eta) {
                *hint = i;
                return true;
            }
        }
        false
    }

    /// Membership in the multi-resonant subset: some size-`n2` cluster has
    /// all its moves nearly resonant.
    pub fn in_multi_resonant(&self, eta: &[f64]) -> bool {
        self.multi_clusters.iter().any(|mvs| {
            mvs.iter()
                .all(|m| moves::dot_real(m, eta).abs() <= self.multi_threshold)
        })
    }
}

/// Membership in the resonant zone around `x` (builds the zone; use
/// [`ResonantZone`] directly in hot loops).
pub fn in_r(eta: &[f64], x: usize, params: &GeometryParams, n_sites: usize) -> Result<bool> {
    Ok(ResonantZone::build(x, params, n_sites)?.contains(eta))
}

/// Membership in the multi-resonant set around `x`.
pub fn in_s(eta: &[f64], x: usize, params: &GeometryParams, n_sites: usize) -> Result<bool> {
    Ok(ResonantZone::build(x, params, n_sites)?.in_multi_resonant(eta))
}

// ---------------------------------------------------------------------------
// Broadened zones.
// ---------------------------------------------------------------------------

/// Prepared membership test for the broadened zone at one bond: the point
/// must make `n2` linearly independent moves supported in `B(a, 2 n3)`
/// nearly resonant; the widened variant asks for the Euclidean
/// `s`-neighbourhood of the point to meet that set.
#[derive(Debug, Clone)]
pub struct ZPredicate {
    n2: usize,
    threshold: f64,
    moves: Vec<Move>,
    norms: Vec<f64>,
}

const MAX_Z_SUBSETS: usize = 200_000;

impl ZPredicate {
    pub fn build(a: usize, params: &GeometryParams, n_sites: usize) -> Result<ZPredicate> {
        params.validate()?;
        let window = ball(a, 2 * params.n3, n_sites);
        let mvs = moves::move_set_in_window(n_sites, params.r, window);
        let norms = mvs
            .iter()
            .map(|m| (moves::l2_sq(m) as f64).sqrt())
            .collect();
        Ok(ZPredicate {
            n2: params.n2,
            threshold: params.multi_resonance_threshold(),
            moves: mvs,
            norms,
        })
    }

    pub fn moves(&self) -> &[Move] {
        &self.moves
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    /// Membership in the zone itself.
    pub fn contains(&self, eta: &[f64]) -> bool {
        let resonant: Vec<&Move> = self
            .moves
            .iter()
            .filter(|m| moves::dot_real(m, eta).abs() <= self.threshold)
            .collect();
        resonant.len() >= self.n2 && integer_rank(&resonant) >= self.n2
    }

    /// True iff the Euclidean ball of radius `s` around the point meets
    /// the zone: some independent `n2`-family of window moves admits a
    /// point within distance `s` satisfying all its resonance slabs.
    pub fn within_distance(&self, eta: &[f64], s: f64) -> Result<bool> {
        if s < 0.0 {
            return Err(Error::config("broadening radius must be non-negative"));
        }
        // Only moves whose slab comes within `s` of the point can take part.
        let candidates: Vec<usize> = (0..self.moves.len())
            .filter(|&i| {
                moves::dot_real(&self.moves[i], eta).abs()
                    <= self.threshold + s * self.norms[i]
            })
            .collect();
        if candidates.len() < self.n2 {
            return Ok(false);
        }
        let cand_refs: Vec<&Move> = candidates.iter().map(|&i| &self.moves[i]).collect();
        if integer_rank(&cand_refs) < self.n2 {
            return Ok(false);
        }
        let mut count = 0usize;
        let mut hit = false;
        let mut overflow = false;
        for_each_subset(candidates.len(), self.n2, |idx| {
            if hit || overflow {
                return;
            }
            count += 1;
            if count > MAX_Z_SUBSETS {
                overflow = true;
                return;
            }
            let subset: Vec<&Move> = idx.iter().map(|&i| cand_refs[i]).collect();
            if integer_rank(&subset) != self.n2 {
                return;
            }
            if slab_distance(eta, &subset, self.threshold) <= s {
                hit = true;
            }
        });
        if overflow {
            return Err(Error::capacity(format!(
                "more than {MAX_Z_SUBSETS} move families in the broadened-zone search"
            )));
        }
        Ok(hit)
    }
}

/// Euclidean distance from a point to the intersection of resonance slabs
/// `{v : |rho_j . v| <= threshold}` of linearly independent moves. The
/// constraint set is a cylinder over a parallelotope in the span, so the
/// distance is computed in the span: exactly for one or two moves, by
/// alternating projections otherwise.
pub fn slab_distance(eta: &[f64], mvs: &[&Move], threshold: f64) -> f64 {
    let n = eta.len();
    let violations: Vec<f64> = mvs
        .iter()
        .map(|m| {
            let d = moves::dot_real(m, eta).abs();
            (d - threshold).max(0.0)
        })
        .collect();
    if violations.iter().all(|&v| v == 0.0) {
        return 0.0;
    }
    match mvs.len() {
        1 => violations[0] / (moves::l2_sq(mvs[0]) as f64).sqrt(),
        2 => {
            let owned: Vec<Move> = vec![mvs[0].clone(), mvs[1].clone()];
            let basis = SpanBasis::from_moves(&owned, n);
            debug_assert_eq!(basis.dim(), 2);
            let e = basis.vectors();
            let q = [dot(&basis.project(eta), &e[0]), dot(&basis.project(eta), &e[1])];
            let g = [
                [dot(&move_as_real(mvs[0]), &e[0]), dot(&move_as_real(mvs[0]), &e[1])],
                [dot(&move_as_real(mvs[1]), &e[0]), dot(&move_as_real(mvs[1]), &e[1])],
            ];
            distance_to_parallelogram(q, g, threshold)
        }
        _ => dykstra_distance(eta, mvs, threshold),
    }
}

/// Distance from a planar point to `{v : |g_j . v| <= t, j = 1, 2}`.
fn distance_to_parallelogram(q: [f64; 2], g: [[f64; 2]; 2], t: f64) -> f64 {
    let det = g[0][0] * g[1][1] - g[0][1] * g[1][0];
    debug_assert!(det.abs() > 1e-12);
    // Vertices solve g_1 . v = s_1 t, g_2 . v = s_2 t.
    let vertex = |s1: f64, s2: f64| -> [f64; 2] {
        [
            (s1 * t * g[1][1] - s2 * t * g[0][1]) / det,
            (g[0][0] * s2 * t - g[1][0] * s1 * t) / det,
        ]
    };
    let corners = [
        vertex(1.0, 1.0),
        vertex(1.0, -1.0),
        vertex(-1.0, -1.0),
        vertex(-1.0, 1.0),
    ];
    // Edges connect corners that share one sign: consecutive entries above.
    let mut best = f64::INFINITY;
    for i in 0..4 {
        let a = corners[i];
        let b = corners[(i + 1) % 4];
        best = best.min(point_segment_distance(q, a, b));
    }
    best
}

fn point_segment_distance(q: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let aq = [q[0] - a[0], q[1] - a[1]];
    let len_sq = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len_sq > 0.0 {
        ((aq[0] * ab[0] + aq[1] * ab[1]) / len_sq).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let c = [a[0] + t * ab[0], a[1] + t * ab[1]];
    ((q[0] - c[0]).powi(2) + (q[1] - c[1]).powi(2)).sqrt()
}

/// Alternating-projection (Dykstra) distance to an intersection of slabs;
/// used for families of three or more moves where no closed form is coded.
fn dykstra_distance(eta: &[f64], mvs: &[&Move], threshold: f64) -> f64 {
    let n = eta.len();
    let mut x: Vec<f64> = eta.to_vec();
    let mut increments = vec![vec![0.0; n]; mvs.len()];
    for _ in 0..500 {
        let mut moved = 0.0f64;
        for (j, m) in mvs.iter().enumerate() {
            let mut y: Vec<f64> = x.iter().zip(&increments[j]).map(|(a, b)| a + b).collect();
            let d = moves::dot_real(m, &y);
            let excess = d.abs() - threshold;
            if excess > 0.0 {
                let scale = excess * d.signum() / moves::l2_sq(m) as f64;
                for (yi, &mi) in y.iter_mut().zip(m.iter()) {
                    *yi -= scale * mi as f64;
                }
            }
            for i in 0..n {
                let inc = x[i] + increments[j][i] - y[i];
                moved = moved.max((increments[j][i] - inc).abs());
                increments[j][i] = inc;
                x[i] = y[i];
            }
        }
        if moved < 1e-12 {
            break;
        }
    }
    eta.iter()
        .zip(&x)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

/// Membership in the broadened zone at bond `a`.
pub fn in_z(eta: &[f64], a: usize, params: &GeometryParams, n_sites: usize) -> Result<bool> {
    Ok(ZPredicate::build(a, params, n_sites)?.contains(eta))
}

/// Membership in the widened zone: the radius-`s` ball meets the zone.
pub fn in_z_s(
    eta: &[f64],
    a: usize,
    s: f64,
    params: &GeometryParams,
    n_sites: usize,
) -> Result<bool> {
    ZPredicate::build(a, params, n_sites)?.within_distance(eta, s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testing;
    use rand::Rng;

    fn desk_params(n2: usize) -> GeometryParams {
        GeometryParams::new(64.0, 0.3, 0.75, n2, 1, 1).unwrap()
    }

    fn hop(n: usize, x: usize) -> Move {
        let mut m = vec![0i16; n];
        m[x] = 1;
        m[x + 1] = -1;
        m
    }

    #[test]
    fn integer_rank_and_span_keys() {
        let a: Move = vec![1, 0, 0];
        let b: Move = vec![0, 1, 0];
        let c: Move = vec![1, 1, 0];
        assert_eq!(integer_rank(&[&a, &b]), 2);
        assert_eq!(integer_rank(&[&a, &b, &c]), 2);
        let two_a: Move = vec![2, 0, 0];
        assert_eq!(integer_rank(&[&a, &two_a]), 1);
        // Same span, different generators -> same canonical key.
        let d: Move = vec![1, -1, 0];
        assert_eq!(span_key(&[&a, &b]), span_key(&[&c, &d]));
        let neg_a: Move = vec![-1, 0, 0];
        assert_eq!(span_key(&[&a]), span_key(&[&neg_a]));
        assert_eq!(span_key(&[&a]), span_key(&[&two_a]));
        assert_ne!(span_key(&[&a]), span_key(&[&b]));
    }

    #[test]
    fn projection_examples() {
        // Single move (1,1): projecting (2,0) onto its hyperplane.
        let cluster =
            ResonanceCluster::new(vec![vec![1, 1]], 0, 1, 2).unwrap();
        let p = project_onto_intersection(&[2.0, 0.0], &cluster);
        assert!((p[0] - 1.0).abs() < 1e-12 && (p[1] + 1.0).abs() < 1e-12);
        // The move itself projects to zero.
        let p = project_onto_intersection(&[1.0, 1.0], &cluster);
        assert!(norm2(&p) < 1e-12);
    }

    #[test]
    fn projection_residual_is_orthogonal_and_in_span() {
        let n = 6;
        let mvs = vec![hop(n, 1), hop(n, 2)];
        let cluster = ResonanceCluster::new(mvs.clone(), 2, 1, n).unwrap();
        let mut rng = testing::rng(3);
        for _ in 0..50 {
            let eta: Vec<f64> = (0..n).map(|_| rng.gen_range(-10.0..10.0)).collect();
            let proj = project_onto_intersection(&eta, &cluster);
            for m in &mvs {
                assert!(moves::dot_real(m, &proj).abs() < 1e-10);
            }
            let diff: Vec<f64> = eta.iter().zip(&proj).map(|(a, b)| a - b).collect();
            assert!(cluster.basis().residual(&diff) < 1e-10);
        }
    }

    #[test]
    fn cluster_recognition() {
        let n = 7;
        // A nearest-neighbor hop at the bond is a cluster by itself.
        assert!(is_cluster(&[hop(n, 3)], 3, 1, n));
        // Disjoint separated supports fail percolation.
        assert!(!is_cluster(&[hop(n, 0), hop(n, 4)], 2, 1, n));
        // Dependent moves fail the rank condition.
        let double: Move = hop(n, 3).iter().map(|&v| v * 2).collect();
        assert!(!is_cluster(&[hop(n, 3), double], 3, 2, n));
        // Percolating independent pair anchored at the middle.
        assert!(is_cluster(&[hop(n, 3), hop(n, 4)], 3, 1, n));
    }

    #[test]
    fn exact_multi_resonance_is_inside_for_any_scale() {
        let n = 6;
        let cluster = ResonanceCluster::new(vec![hop(n, 2), hop(n, 3)], 2, 1, n).unwrap();
        // eta orthogonal to both moves: constant vector.
        let eta = vec![3.5; n];
        for l in [1.01, 2.0, 64.0] {
            let params = GeometryParams::new(l, 0.3, 0.75, 2, 1, 1).unwrap();
            assert!(in_b(&eta, &cluster, &params).unwrap(), "scale {l}");
        }
    }

    #[test]
    fn single_move_membership_reduces_to_one_inequality() {
        let n = 4;
        let params = desk_params(2);
        let cluster = ResonanceCluster::new(vec![hop(n, 1)], 1, 1, n).unwrap();
        let rho = hop(n, 1);
        let norm = (moves::l2_sq(&rho) as f64).sqrt();
        let bound = params.l * params.width();
        let mut rng = testing::rng(5);
        for _ in 0..200 {
            let eta: Vec<f64> = (0..n)
                .map(|_| rng.gen_range(-3.0 * bound..3.0 * bound))
                .collect();
            let expected = moves::dot_real(&rho, &eta).abs() / norm <= bound;
            assert_eq!(in_b(&eta, &cluster, &params).unwrap(), expected);
        }
    }

    /// Independent slow oracle: enumerate every linearly independent subset
    /// of the in-span moves directly (no span deduplication) and evaluate
    /// the textbook form of both conditions.
    fn slow_in_b(eta: &[f64], cluster: &ResonanceCluster, params: &GeometryParams) -> bool {
        let n = cluster.basis().n_sites();
        let p = cluster.p();
        let w = params.width();
        let full = cluster.basis();
        let eta_minus_full: Vec<f64> = {
            let pr = full.project(eta);
            eta.iter().zip(&pr).map(|(a, b)| a - b).collect()
        };
        let span_dist = norm2(
            &eta.iter()
                .zip(&eta_minus_full)
                .map(|(a, b)| a - b)
                .collect::<Vec<_>>(),
        );
        if span_dist > params.l.powi(p as i32) * w {
            return false;
        }
        let support = cluster.support();
        let lo = *support.iter().next().unwrap();
        let hi = *support.iter().last().unwrap();
        let pool: Vec<Move> = moves::move_set_in_window(n, params.r, lo..hi + 1)
            .into_iter()
            .filter(|m| full.contains_vector(&move_as_real(m), SPAN_RESIDUAL_TOL))
            .collect();
        let refs: Vec<&Move> = pool.iter().collect();
        let mut ok = true;
        for k in 1..p {
            for_each_subset(refs.len(), k, |idx| {
                if !ok {
                    return;
                }
                let subset: Vec<&Move> = idx.iter().map(|&i| refs[i]).collect();
                if integer_rank(&subset) != k {
                    return;
                }
                let owned: Vec<Move> = subset.iter().map(|m| (*m).clone()).collect();
                let fb = SpanBasis::from_moves(&owned, n);
                // P(eta, subset intersection) - P(eta, full intersection).
                let p_sub: Vec<f64> = {
                    let pr = fb.project(eta);
                    eta.iter().zip(&pr).map(|(a, b)| a - b).collect()
                };
                let diff: Vec<f64> = p_sub
                    .iter()
                    .zip(&eta_minus_full)
                    .map(|(a, b)| a - b)
                    .collect();
                if norm2(&diff) > (params.l.powi(p as i32) - params.l.powi(k as i32)) * w {
                    ok = false;
                }
            });
        }
        ok
    }

    #[test]
    fn membership_matches_subset_enumeration_oracle() {
        let n = 6;
        let params = desk_params(2);
        let cluster = ResonanceCluster::new(vec![hop(n, 2), hop(n, 3)], 2, 1, n).unwrap();
        let b = BSet::build(&cluster, &params, n).unwrap();
        let scale = params.l.powi(2) * params.width();
        let mut rng = testing::rng(7);
        let mut inside = 0;
        for _ in 0..400 {
            // Mix of scales so both branches of the test are exercised.
            let amp = scale * rng.gen_range(0.1..1.5f64);
            let eta: Vec<f64> = (0..n).map(|_| rng.gen_range(-amp..amp)).collect();
            let fast = b.contains(&eta);
            let slow = slow_in_b(&eta, &cluster, &params);
            assert_eq!(fast, slow);
            inside += fast as usize;
        }
        assert!(inside > 0, "oracle comparison never sampled the inside");
    }

    #[test]
    fn membership_is_a_cylinder_over_the_span() {
        let n = 6;
        let params = desk_params(2);
        let cluster = ResonanceCluster::new(vec![hop(n, 1), hop(n, 2)], 1, 1, n).unwrap();
        let b = BSet::build(&cluster, &params, n).unwrap();
        let mut rng = testing::rng(11);
        let scale = params.l.powi(2) * params.width();
        for _ in 0..100 {
            let eta: Vec<f64> = (0..n)
                .map(|_| rng.gen_range(-1.5 * scale..1.5 * scale))
                .collect();
            // A shift orthogonal to the span: u minus its span component.
            let u: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0 * scale..5.0 * scale)).collect();
            let pu = cluster.basis().project(&u);
            let shifted: Vec<f64> = eta
                .iter()
                .zip(u.iter().zip(&pu))
                .map(|(e, (ui, pi))| e + ui - pi)
                .collect();
            assert_eq!(b.contains(&eta), b.contains(&shifted));
        }
    }

    #[test]
    fn zone_membership_matches_cluster_sweep() {
        let n = 5;
        let params = desk_params(2);
        let zone = ResonantZone::build(2, &params, n).unwrap();
        // Independent oracle: enumerate clusters by brute force over all
        // move subsets of size one and two, test each cylinder directly.
        let pool = moves::move_set(n, 1);
        let mut rng = testing::rng(13);
        let scale = params.l.powi(2) * params.width();
        for _ in 0..60 {
            let amp = scale * rng.gen_range(0.2..1.2f64);
            let eta: Vec<f64> = (0..n).map(|_| rng.gen_range(-amp..amp)).collect();
            let mut expected = false;
            'sweep: for i in 0..pool.len() {
                if is_cluster(std::slice::from_ref(&pool[i]), 2, 1, n) {
                    let c = ResonanceCluster::new(vec![pool[i].clone()], 2, 1, n).unwrap();
                    if in_b(&eta, &c, &params).unwrap() {
                        expected = true;
                        break 'sweep;
                    }
                }
                for j in i + 1..pool.len() {
                    let mvs = vec![pool[i].clone(), pool[j].clone()];
                    if is_cluster(&mvs, 2, 1, n) {
                        let c = ResonanceCluster::new(mvs, 2, 1, n).unwrap();
                        if in_b(&eta, &c, &params).unwrap() {
                            expected = true;
                            break 'sweep;
                        }
                    }
                }
            }
            assert_eq!(zone.contains(&eta), expected);
        }
    }

    #[test]
    fn far_points_are_outside_the_zone() {
        let n = 5;
        let params = desk_params(2);
        let zone = ResonantZone::build(2, &params, n).unwrap();
        // A point whose inner product with every window move is huge.
        let big = 1e6 * params.l.powi(2) * params.width();
        let eta: Vec<f64> = (0..n).map(|i| big * 3.0f64.powi(i as i32)).collect();
        assert!(!zone.contains(&eta));
        assert!(!zone.in_multi_resonant(&eta));
    }

    #[test]
    fn exact_multi_resonance_is_in_s() {
        let n = 6;
        let params = desk_params(2);
        let eta = vec![7.0; n];
        assert!(in_s(&eta, 2, &params, n).unwrap());
    }

    #[test]
    fn zero_is_in_z_and_single_directions_are_not() {
        let n = 6;
        let params = desk_params(2);
        assert!(in_z(&vec![0.0; n], 2, &params, n).unwrap());
        // One resonant direction only: start from a generic far point and
        // cancel a single move's inner product.
        let big = 1e7;
        let mut eta: Vec<f64> = (0..n).map(|i| big * (1.3f64).powi(i as i32 + 1)).collect();
        let rho = hop(n, 2);
        let d = moves::dot_real(&rho, &eta) / moves::l2_sq(&rho) as f64;
        for (e, &m) in eta.iter_mut().zip(rho.iter()) {
            *e -= d * m as f64;
        }
        assert!((moves::dot_real(&rho, &eta)).abs() < 1e-6);
        assert!(!in_z(&eta, 2, &params, n).unwrap());
    }

    #[test]
    fn z_membership_matches_brute_force_subsets() {
        let n = 5;
        let params = desk_params(2);
        let z = ZPredicate::build(2, &params, n).unwrap();
        let mut rng = testing::rng(17);
        let scale = params.multi_resonance_threshold();
        let mut hits = 0;
        let mut misses = 0;
        // Three amplitude regimes: deep inside, mixed, far outside.
        let mut amps: Vec<f64> = Vec::new();
        amps.extend((0..60).map(|_| rng.gen_range(0.05..1.0) * scale));
        amps.extend((0..80).map(|_| rng.gen_range(5.0..40.0) * scale));
        amps.extend((0..60).map(|_| rng.gen_range(100.0..1000.0) * scale));
        for amp in amps {
            let eta: Vec<f64> = (0..n).map(|_| rng.gen_range(-amp..amp)).collect();
            // Oracle: any independent pair of window moves both resonant.
            let mut expected = false;
            for i in 0..z.moves.len() {
                for j in i + 1..z.moves.len() {
                    let (a, b) = (&z.moves[i], &z.moves[j]);
                    if moves::dot_real(a, &eta).abs() <= scale
                        && moves::dot_real(b, &eta).abs() <= scale
                        && integer_rank(&[a, b]) == 2
                    {
                        expected = true;
                    }
                }
            }
            assert_eq!(z.contains(&eta), expected);
            hits += expected as usize;
            misses += !expected as usize;
        }
        assert!(hits > 0 && misses > 0, "sweep must see both outcomes");
    }

    #[test]
    fn widened_zone_distance_has_exact_witness() {
        let n = 6;
        let params = desk_params(2);
        let z = ZPredicate::build(2, &params, n).unwrap();
        let t = params.multi_resonance_threshold();
        let rho1 = hop(n, 2);
        let rho2 = hop(n, 3);
        let d = 3.7;
        let sqrt2 = 2.0f64.sqrt();
        // Generic far-away base point, then a span correction pinning the
        // two inner products: rho1 at distance d beyond its slab, rho2 at
        // zero. Every other window move keeps a huge inner product.
        let mut eta: Vec<f64> = (0..n).map(|i| 1e9 * ((i + 1) as f64).powi(3)).collect();
        let target1 = t + d * sqrt2;
        let r1 = target1 - moves::dot_real(&rho1, &eta);
        let r2 = -moves::dot_real(&rho2, &eta);
        // Gram matrix of (rho1, rho2) is [[2, -1], [-1, 2]].
        let (a, b) = ((2.0 * r1 + r2) / 3.0, (r1 + 2.0 * r2) / 3.0);
        for i in 0..n {
            eta[i] += a * rho1[i] as f64 + b * rho2[i] as f64;
        }
        assert!((moves::dot_real(&rho1, &eta) - target1).abs() < 1e-3);
        assert!(moves::dot_real(&rho2, &eta).abs() < 1e-3);
        // Sanity: candidates are only rho1, rho2, and their combinations.
        let s_max = d * 1.01;
        for m in z.moves() {
            let dot = moves::dot_real(m, &eta).abs();
            let combo = [&rho1, &rho2]
                .iter()
                .any(|r| span_key(&[m, r]).len() < 2)
                || span_key(&[m]) == span_key(&[&moves::add(&rho1, &rho2)]);
            assert!(
                combo || dot > t + s_max * (moves::l2_sq(m) as f64).sqrt() + 1.0,
                "unexpected near-resonant move {m:?}"
            );
        }
        assert!(!z.contains(&eta));
        assert!(!z.within_distance(&eta, d * 0.99).unwrap());
        assert!(z.within_distance(&eta, d * 1.01).unwrap());
        // A point moved back inside the slab pair is within any radius.
        let excess = (moves::dot_real(&rho1, &eta) - t + 1.0) / 2.0;
        let eta_in: Vec<f64> = eta
            .iter()
            .zip(rho1.iter())
            .map(|(v, &m)| v - excess * m as f64)
            .collect();
        assert!(z.contains(&eta_in));
        assert!(z.within_distance(&eta_in, 0.0).unwrap());
    }

    #[test]
    fn slab_distance_agrees_with_alternating_projections() {
        let n = 6;
        let rho1 = hop(n, 1);
        let rho2 = hop(n, 3);
        let mut rng = testing::rng(19);
        for _ in 0..50 {
            let eta: Vec<f64> = (0..n).map(|_| rng.gen_range(-30.0..30.0)).collect();
            let t = rng.gen_range(0.5..5.0);
            let exact = slab_distance(&eta, &[&rho1, &rho2], t);
            let iterative = dykstra_distance(&eta, &[&rho1, &rho2], t);
            assert!(
                (exact - iterative).abs() < 1e-6,
                "exact {exact} vs iterative {iterative}"
            );
        }
    }

    #[test]
    fn enumeration_caps_produce_capacity_errors() {
        let mut params = desk_params(2);
        params.max_clusters = 3;
        assert!(matches!(
            ResonantZone::build(2, &params, 6),
            Err(Error::Capacity(_))
        ));
    }
}
