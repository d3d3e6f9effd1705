//! Energy currents across a cut bond and their decomposition into a
//! bounded piece and a small remainder.
//!
//! The observable energy right of a bond changes only through the current
//! flowing across the cut. Splitting the resonant Hamiltonian with
//! state-dependent weights — supported where the near-resonance indicators
//! of the sites around the cut allow it — produces a decomposition
//! `j_a = i ad_h u_a + mu^{n0+1} g_a` in which `u_a` stays bounded and the
//! remainder `g_a` carries a high power of the coupling. The split weights,
//! the two operators, the cancellation property that makes the construction
//! work, and the Monte Carlo moment estimates behind the scaling claims all
//! live here.

use std::sync::Arc;

use dashmap::DashMap;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::Serialize;

use crate::diagonal::DiagonalFn;
use crate::error::{Error, Result};
use crate::geometry::{ball, GeometryParams, ZPredicate};
use crate::gibbs::{self, mean_and_stderr, ExpectationMode, GibbsSampler};
use crate::indicator::{IndicatorEvaluator, QuadratureSpec};
use crate::kam::{KamSeed, KamState};
use crate::lattice::{Config, ModelParams, TruncatedFockSpace};
use crate::localop::LocalOp;
use crate::matrix;
use crate::series::OperatorSeries;

/// Cap on the shared indicator-vector cache (entries).
const THETA_MEMO_CAP: usize = 1 << 20;

// ---------------------------------------------------------------------------
// Split weights
// ---------------------------------------------------------------------------

/// Pointwise values of the state-dependent weights that split the resonant
/// Hamiltonian at the bond `(a, a+1)`: one weight per site of the window
/// `B(a, n3)` plus the weight of the fallback branch (written `*`) used
/// when every site near the cut is deeply resonant.
#[derive(Debug, Clone, Serialize)]
pub struct SplitWeights {
    pub a: usize,
    /// The window `B(a, n3)`, ascending.
    pub sites: Vec<usize>,
    /// Weights aligned with `sites`.
    pub site_weights: Vec<f64>,
    pub star_weight: f64,
    pub normalizer: f64,
}

/// The raw weight formula from indicator values: with `P = prod theta`,
/// `S = sum theta` and `Q = prod (1 - theta)`, the normalizer is
/// `N = P + (1-P) S + Q`, the site weights are
/// `(P [x = a] + (1-P) theta_x) / N` and the fallback weight is `Q / N`.
fn weight_components(thetas: &[f64], center: usize) -> (Vec<f64>, f64, f64) {
    let prod: f64 = thetas.iter().product();
    let comp: f64 = thetas.iter().map(|t| 1.0 - t).product();
    let sum: f64 = thetas.iter().sum();
    let normalizer = prod + (1.0 - prod) * sum + comp;
    let site_weights: Vec<f64> = thetas
        .iter()
        .enumerate()
        .map(|(k, &t)| {
            let kron = if k == center { prod } else { 0.0 };
            (kron + (1.0 - prod) * t) / normalizer
        })
        .collect();
    (site_weights, comp / normalizer, normalizer)
}

impl SplitWeights {
    /// Evaluate the weights from indicator values `theta_y`, `y` running
    /// over `B(a, n3)` in ascending order.
    pub fn from_thetas(a: usize, sites: &[usize], thetas: &[f64]) -> SplitWeights {
        assert_eq!(sites.len(), thetas.len());
        let center = sites
            .iter()
            .position(|&s| s == a)
            .expect("cut site must lie in its own window");
        let (site_weights, star_weight, normalizer) = weight_components(thetas, center);
        SplitWeights {
            a,
            sites: sites.to_vec(),
            site_weights,
            star_weight,
            normalizer,
        }
    }

    /// Partition-of-unity defect `|sum + star - 1|`.
    pub fn partition_defect(&self) -> f64 {
        let total: f64 = self.site_weights.iter().sum::<f64>() + self.star_weight;
        (total - 1.0).abs()
    }
}

// ---------------------------------------------------------------------------
// The weight field: indicator evaluators and the weight diagonals
// ---------------------------------------------------------------------------

/// Shared indicator evaluators for every site of the split window, with a
/// cache keyed on the union read-window occupations: each weight diagonal
/// built from these values triggers the full indicator sweep once per
/// distinct local configuration, however many operator terms it feeds.
struct ThetaBank {
    sites: Vec<usize>,
    evaluators: Vec<IndicatorEvaluator>,
    window: Vec<usize>,
    cache: DashMap<Vec<i64>, Arc<Vec<f64>>>,
}

impl ThetaBank {
    fn thetas_int(&self, eta: &[i64]) -> Arc<Vec<f64>> {
        let key: Vec<i64> = self.window.iter().map(|&s| eta[s]).collect();
        if let Some(hit) = self.cache.get(&key) {
            return hit.clone();
        }
        let real: Vec<f64> = eta.iter().map(|&n| n as f64).collect();
        let vals = Arc::new(self.thetas_real(&real));
        if self.cache.len() < THETA_MEMO_CAP {
            self.cache.insert(key, vals.clone());
        }
        vals
    }

    fn thetas_real(&self, eta: &[f64]) -> Vec<f64> {
        self.evaluators.iter().map(|e| e.theta(eta)).collect()
    }
}

/// The operator-side weight machinery at a cut: one diagonal per window
/// site plus the fallback diagonal, all reading a shared indicator cache.
pub struct WeightField {
    a: usize,
    bank: Arc<ThetaBank>,
    site_diagonals: Vec<DiagonalFn>,
    star_diagonal: DiagonalFn,
}

impl WeightField {
    pub fn build(
        a: usize,
        params: &GeometryParams,
        n_sites: usize,
        quadrature: QuadratureSpec,
    ) -> Result<WeightField> {
        params.validate()?;
        if a >= n_sites {
            return Err(Error::config(format!(
                "cut site {a} outside a chain of {n_sites} sites"
            )));
        }
        let sites: Vec<usize> = ball(a, params.n3, n_sites).collect();
        let mut evaluators = Vec::with_capacity(sites.len());
        let mut window_set = std::collections::BTreeSet::new();
        for &y in &sites {
            let e = IndicatorEvaluator::around(y, params, n_sites, quadrature)?;
            window_set.extend(e.window().iter().copied());
            evaluators.push(e);
        }
        let window: Vec<usize> = window_set.into_iter().collect();
        let bank = Arc::new(ThetaBank {
            sites: sites.clone(),
            evaluators,
            window: window.clone(),
            cache: DashMap::new(),
        });
        let center = sites
            .iter()
            .position(|&s| s == a)
            .expect("cut site must lie in its own window");
        let site_diagonals: Vec<DiagonalFn> = (0..sites.len())
            .map(|idx| {
                let b = bank.clone();
                DiagonalFn::from_fn(window.clone(), move |eta| {
                    let th = b.thetas_int(eta);
                    let (w, _, _) = weight_components(&th, center);
                    Complex64::new(w[idx], 0.0)
                })
                .memoized()
            })
            .collect();
        let b = bank.clone();
        let star_diagonal = DiagonalFn::from_fn(window.clone(), move |eta| {
            let th = b.thetas_int(eta);
            let (_, star, _) = weight_components(&th, center);
            Complex64::new(star, 0.0)
        })
        .memoized();
        Ok(WeightField {
            a,
            bank,
            site_diagonals,
            star_diagonal,
        })
    }

    pub fn a(&self) -> usize {
        self.a
    }

    /// The window `B(a, n3)`, ascending.
    pub fn sites(&self) -> &[usize] {
        &self.bank.sites
    }

    /// Union of the sites all indicators read.
    pub fn window(&self) -> &[usize] {
        &self.bank.window
    }

    /// Indicator values at an integer configuration (cached).
    pub fn thetas(&self, eta: &[i64]) -> Vec<f64> {
        self.bank.thetas_int(eta).as_ref().clone()
    }

    /// The split weights at an integer configuration.
    pub fn weights_at(&self, eta: &[i64]) -> SplitWeights {
        let th = self.bank.thetas_int(eta);
        SplitWeights::from_thetas(self.a, &self.bank.sites, &th)
    }

    /// The split weights at a real configuration (uncached).
    pub fn weights_at_real(&self, eta: &[f64]) -> SplitWeights {
        let th = self.bank.thetas_real(eta);
        SplitWeights::from_thetas(self.a, &self.bank.sites, &th)
    }

    /// True iff some indicator in the window sees a near-resonance, i.e.
    /// `theta_x(eta) < 1` for some `x` in `B(a, n3)`.
    pub fn sees_resonance(&self, eta: &[f64]) -> bool {
        self.bank.evaluators.iter().any(|e| e.theta_below_one(eta))
    }

    fn diag_for(&self, idx: usize) -> &DiagonalFn {
        &self.site_diagonals[idx]
    }

    fn star_diag(&self) -> &DiagonalFn {
        &self.star_diagonal
    }
}

// ---------------------------------------------------------------------------
// Site-resolved resonant series and the weighted split
// ---------------------------------------------------------------------------

/// The resonant Hamiltonian of one site as a series: its diagonal seed at
/// order zero plus the site- and bond-seeded resonant coefficients, each
/// bond `(y-1, y)` assigned to its right site `y`.
pub fn site_resonant_series(kam: &KamState, y: usize) -> OperatorSeries {
    let n = kam.n_sites();
    let delta = kam.params().delta;
    let depth = kam.depth();
    let mut coeffs = vec![LocalOp::interaction_site(n, delta, y)];
    for k in 1..=depth {
        let mut c = LocalOp::zero(n, delta);
        for (idx, seed) in kam.seeds().iter().enumerate() {
            let owner = match *seed {
                KamSeed::Site(x) => x,
                KamSeed::Bond(x) => x + 1,
            };
            if owner == y {
                c = c.add(kam.seeded_resonant(k, idx));
            }
        }
        coeffs.push(c);
    }
    OperatorSeries::from_coeffs(n, delta, depth, coeffs)
}

/// Sum of the per-site resonant series over `y > x`.
pub fn tail_resonant_series(kam: &KamState, x: usize) -> OperatorSeries {
    let mut acc = OperatorSeries::zero(kam.n_sites(), kam.params().delta, kam.depth());
    for y in (x + 1)..kam.n_sites() {
        acc = acc.add(&site_resonant_series(kam, y));
    }
    acc
}

/// Sum of the per-site resonant series over `y <= x`.
pub fn head_resonant_series(kam: &KamState, x: usize) -> OperatorSeries {
    let mut acc = OperatorSeries::zero(kam.n_sites(), kam.params().delta, kam.depth());
    for y in 0..=x {
        acc = acc.add(&site_resonant_series(kam, y));
    }
    acc
}

/// The two halves of the weighted split of the resonant Hamiltonian.
pub struct ResonantSplit {
    /// Weighted sum of head partial sums (`<= x` branches).
    pub below: OperatorSeries,
    /// Weighted sum of tail partial sums (`> x` branches).
    pub above: OperatorSeries,
}

/// Wrap a diagonal into an operator so it can enter products.
fn diag_op(n_sites: usize, delta: f64, f: &DiagonalFn) -> LocalOp {
    LocalOp::from_terms(n_sites, delta, vec![(vec![0; n_sites], f.clone())])
}

/// Symmetrized product `(f w + w f) / 2` of an operator with a weight
/// diagonal. The one-sided product would spoil self-adjointness of the
/// split (the weights do not commute with the off-diagonal resonant
/// terms); the symmetrized form keeps every identity used downstream,
/// since the weights still sum to one pointwise and the cancellation
/// argument applies to both factor orders by skew-symmetry.
fn jordan(f: &LocalOp, w: &LocalOp) -> LocalOp {
    f.compose(w).add(&w.compose(f)).scale_real(0.5)
}

fn assemble_split(kam: &KamState, field: &WeightField) -> (ResonantSplit, Vec<OperatorSeries>) {
    let n = kam.n_sites();
    let delta = kam.params().delta;
    let depth = kam.depth();
    let a = field.a();
    let sites = field.sites();

    let tails: Vec<OperatorSeries> = sites
        .iter()
        .map(|&x| tail_resonant_series(kam, x))
        .collect();
    let heads: Vec<OperatorSeries> = sites
        .iter()
        .map(|&x| head_resonant_series(kam, x))
        .collect();
    let center = sites.iter().position(|&s| s == a).expect("window holds a");

    let star = diag_op(n, delta, field.star_diag());
    let mut above = OperatorSeries::zero(n, delta, depth);
    let mut below = OperatorSeries::zero(n, delta, depth);
    for k in 0..=depth {
        let mut up = LocalOp::zero(n, delta);
        let mut down = LocalOp::zero(n, delta);
        for idx in 0..sites.len() {
            let w = diag_op(n, delta, field.diag_for(idx));
            up = up.add(&jordan(tails[idx].coeff(k), &w));
            down = down.add(&jordan(heads[idx].coeff(k), &w));
        }
        up = up.add(&jordan(tails[center].coeff(k), &star));
        down = down.add(&jordan(heads[center].coeff(k), &star));
        above = above.add(&OperatorSeries::monomial(k, up, depth));
        below = below.add(&OperatorSeries::monomial(k, down, depth));
    }
    (ResonantSplit { below, above }, tails)
}

/// The weighted split of the resonant Hamiltonian at the cut of the weight
/// field. The two halves sum back to the full resonant series.
pub fn split_resonant_hamiltonian(kam: &KamState, field: &WeightField) -> ResonantSplit {
    assemble_split(kam, field).0
}

// ---------------------------------------------------------------------------
// Current operators
// ---------------------------------------------------------------------------

/// Observable tail `h^O_{>a}`: interaction terms of the sites right of the
/// cut plus the hopping of every bond whose right site lies right of the
/// cut, at the model's coupling order.
pub fn observable_tail(n_sites: usize, params: &ModelParams, a: usize) -> LocalOp {
    let delta = params.delta;
    let mut op = LocalOp::zero(n_sites, delta);
    for y in (a + 1)..n_sites {
        op = op.add(&LocalOp::interaction_site(n_sites, delta, y));
    }
    let mut hops = LocalOp::zero(n_sites, delta);
    for x in a..n_sites.saturating_sub(1) {
        hops = hops.add(&LocalOp::hopping_bond(n_sites, delta, params.g, x));
    }
    op.add(&hops.scale_real(params.mu))
}

/// Observable tail of the bare Hamiltonian (unit coupling scale).
pub fn bare_observable_tail(n_sites: usize, g: f64, a: usize) -> LocalOp {
    let mut op = LocalOp::zero(n_sites, 1.0);
    for y in (a + 1)..n_sites {
        op = op.add(&LocalOp::interaction_site(n_sites, 1.0, y));
    }
    for x in a..n_sites.saturating_sub(1) {
        op = op.add(&LocalOp::hopping_bond(n_sites, 1.0, g, x));
    }
    op
}

/// The reduced current across the bond `(a, a+1)`:
/// `j_a = i [h, h^O_{>a}]`, the rate of change of the energy right of the
/// cut. Only terms straddling the cut survive the commutator.
pub fn current_operator(n_sites: usize, params: &ModelParams, a: usize) -> Result<LocalOp> {
    params.validate()?;
    if a + 1 >= n_sites {
        return Err(Error::config(format!(
            "bond ({a}, {}) outside a chain of {n_sites} sites",
            a + 1
        )));
    }
    let h = LocalOp::reduced_hamiltonian(n_sites, params);
    let tail = observable_tail(n_sites, params, a);
    Ok(h.commutator(&tail).scale(Complex64::new(0.0, 1.0)))
}

/// The current of the bare Hamiltonian across `(a, a+1)`.
pub fn bare_current_operator(n_sites: usize, g: f64, a: usize) -> Result<LocalOp> {
    if a + 1 >= n_sites {
        return Err(Error::config(format!(
            "bond ({a}, {}) outside a chain of {n_sites} sites",
            a + 1
        )));
    }
    let h = LocalOp::bose_hubbard(n_sites, g);
    let tail = bare_observable_tail(n_sites, g, a);
    Ok(h.commutator(&tail).scale(Complex64::new(0.0, 1.0)))
}

// ---------------------------------------------------------------------------
// The decomposition
// ---------------------------------------------------------------------------

/// How the centering constant (the Gibbs average subtracted from `u_a`) is
/// computed.
pub enum CenteringMode<'a> {
    /// Weighted trace over a truncated space; exact for that trace.
    TruncatedTrace(&'a TruncatedFockSpace),
    /// Monte Carlo average with a dedicated seed.
    MonteCarlo { samples: usize, seed: u64 },
}

/// The centering constant with its error accounting.
#[derive(Debug, Clone, Serialize)]
pub struct CenteringReport {
    pub value: f64,
    pub stderr: f64,
    pub truncation_loss: f64,
    pub n_samples: usize,
    pub mode: &'static str,
}

/// A prescribed-versus-used parameter stamp.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct PrescribedUsed {
    pub prescribed: u32,
    pub used: usize,
}

impl PrescribedUsed {
    pub fn overridden(&self) -> bool {
        self.prescribed as usize != self.used
    }
}

/// The full current decomposition at a cut bond: the bounded piece `u_a`,
/// the remainder `g_a`, the current itself, and everything needed to check
/// the construction (split halves, evaluated tails, weight field).
pub struct CurrentDecomposition {
    a: usize,
    n0: u32,
    n1: PrescribedUsed,
    n2: PrescribedUsed,
    n3: usize,
    model: ModelParams,
    geometry: GeometryParams,
    locality_radius: usize,
    field: WeightField,
    split: ResonantSplit,
    /// `sum_{y > x} h_tilde_y` at the coupling, aligned with `field.sites()`.
    tails_eval: Vec<LocalOp>,
    h_tilde_eval: LocalOp,
    observable_tail: LocalOp,
    transformed_tail: LocalOp,
    u_hat: LocalOp,
    g_hat: LocalOp,
    j_hat: LocalOp,
    centering: CenteringReport,
}

/// Build the decomposition at the cut `(a, a+1)` from a completed
/// diagonalization. The geometry fixes the split window and the indicator
/// zones; `n0` is the target decay order whose prescriptions are stamped
/// next to the values actually used.
pub fn build_decomposition(
    kam: &KamState,
    geometry: &GeometryParams,
    a: usize,
    n0: u32,
    quadrature: QuadratureSpec,
    centering: CenteringMode,
) -> Result<CurrentDecomposition> {
    let n = kam.n_sites();
    let params = *kam.params();
    if a + 1 >= n {
        return Err(Error::config(format!(
            "bond ({a}, {}) outside a chain of {n} sites",
            a + 1
        )));
    }
    if (params.delta - geometry.delta).abs() > 1e-12
        || (params.gamma - geometry.gamma).abs() > 1e-12
    {
        return Err(Error::config(
            "model and geometry disagree on the coupling or the width exponent",
        ));
    }
    let mu = params.mu;
    let field = WeightField::build(a, geometry, n, quadrature)?;
    let (split, tail_series) = assemble_split(kam, &field);

    let transformed_tail = kam.inverse_series(&split.above).eval_at(mu).memoized();
    let obs_tail = observable_tail(n, &params, a);
    let diff = obs_tail.sub(&transformed_tail);
    let centering = center_of(&diff, mu, centering)?;
    let u_hat = diff
        .sub(&LocalOp::identity(n, params.delta).scale_real(centering.value))
        .memoized();

    let rf = kam.inverse_series(&split.above);
    let ad = kam.resonant_series().commutator(&split.above);
    let main = kam.inverse_series(&ad).eval_at(mu);
    let remainder = kam
        .hopping()
        .commutator(rf.coeff(kam.depth()))
        .scale_real(mu.powi(kam.depth() as i32 + 1));
    let g_hat = main
        .add(&remainder)
        .scale(Complex64::new(0.0, 1.0))
        .scale_real(mu.powi(-(n0 as i32 + 1)))
        .memoized();

    let j_hat = current_operator(n, &params, a)?;
    let h_tilde_eval = kam.resonant_series().eval_at(mu).memoized();
    let tails_eval: Vec<LocalOp> = tail_series
        .iter()
        .map(|t| t.eval_at(mu).memoized())
        .collect();

    Ok(CurrentDecomposition {
        a,
        n0,
        n1: PrescribedUsed {
            prescribed: params.n1_prescribed(n0),
            used: kam.depth(),
        },
        n2: PrescribedUsed {
            prescribed: params.n2_prescribed(n0),
            used: geometry.n2,
        },
        n3: geometry.n3,
        model: params,
        geometry: geometry.clone(),
        locality_radius: geometry.n3 + (geometry.n2 + 9) * geometry.r as usize,
        field,
        split,
        tails_eval,
        h_tilde_eval,
        observable_tail: obs_tail,
        transformed_tail,
        u_hat,
        g_hat,
        j_hat,
        centering,
    })
}

fn center_of(op: &LocalOp, mu: f64, mode: CenteringMode) -> Result<CenteringReport> {
    match mode {
        CenteringMode::TruncatedTrace(space) => {
            let e = gibbs::expectation(op, mu, space.n_max(), ExpectationMode::TruncatedTrace(space))?;
            Ok(CenteringReport {
                value: e.value,
                stderr: 0.0,
                truncation_loss: e.truncation_loss,
                n_samples: e.n_samples,
                mode: "truncated-trace",
            })
        }
        CenteringMode::MonteCarlo { samples, seed } => {
            let e = gibbs::expectation(
                op,
                mu,
                gibbs::recommended_cap(mu),
                ExpectationMode::MonteCarlo { samples, seed },
            )?;
            Ok(CenteringReport {
                value: e.value,
                stderr: e.stderr,
                truncation_loss: e.truncation_loss,
                n_samples: e.n_samples,
                mode: "monte-carlo",
            })
        }
    }
}

/// Serializable summary of a decomposition build.
#[derive(Debug, Clone, Serialize)]
pub struct DecompositionSummary {
    pub a: usize,
    pub n0: u32,
    pub n1: PrescribedUsed,
    pub n2: PrescribedUsed,
    pub n3: usize,
    pub gamma: f64,
    pub mu: f64,
    pub delta: f64,
    pub g: f64,
    pub locality_radius: usize,
    pub centering: CenteringReport,
    pub u_terms: usize,
    pub g_terms: usize,
    pub u_range: u32,
    pub g_range: u32,
}

impl CurrentDecomposition {
    pub fn a(&self) -> usize {
        self.a
    }

    pub fn n0(&self) -> u32 {
        self.n0
    }

    pub fn n1(&self) -> PrescribedUsed {
        self.n1
    }

    pub fn n2(&self) -> PrescribedUsed {
        self.n2
    }

    pub fn model(&self) -> &ModelParams {
        &self.model
    }

    pub fn geometry(&self) -> &GeometryParams {
        &self.geometry
    }

    /// Stamped locality radius `n3 + (n2 + 9) r`.
    pub fn locality_radius(&self) -> usize {
        self.locality_radius
    }

    pub fn field(&self) -> &WeightField {
        &self.field
    }

    pub fn split(&self) -> &ResonantSplit {
        &self.split
    }

    pub fn u_hat(&self) -> &LocalOp {
        &self.u_hat
    }

    pub fn g_hat(&self) -> &LocalOp {
        &self.g_hat
    }

    /// The reduced current at the cut.
    pub fn current(&self) -> &LocalOp {
        &self.j_hat
    }

    pub fn centering(&self) -> &CenteringReport {
        &self.centering
    }

    /// Physical-scale bounded piece, `mu^{-2} u_a`.
    pub fn u_rescaled(&self) -> LocalOp {
        self.u_hat.scale_real(self.model.mu.powi(-2))
    }

    /// Physical-scale remainder, `mu^{-4} g_a`.
    pub fn g_rescaled(&self) -> LocalOp {
        self.g_hat.scale_real(self.model.mu.powi(-4))
    }

    /// The resonant Hamiltonian at the coupling.
    pub fn h_tilde(&self) -> &LocalOp {
        &self.h_tilde_eval
    }

    /// The transformed tail `T_{n1}(R h_tilde_{>a})` at the coupling.
    pub fn transformed_tail(&self) -> &LocalOp {
        &self.transformed_tail
    }

    /// The observable tail `h^O_{>a}`.
    pub fn observable_tail(&self) -> &LocalOp {
        &self.observable_tail
    }

    /// `[h_tilde, sum_{y > x} h_tilde_y]` at the coupling for the window
    /// site of the given index.
    pub fn tail_commutator(&self, idx: usize) -> LocalOp {
        self.h_tilde_eval
            .commutator(&self.tails_eval[idx])
            .memoized()
    }

    /// `ad_{h_tilde} h_tilde_{>a}` of the weighted split, at the coupling.
    pub fn weighted_tail_commutator(&self) -> LocalOp {
        self.h_tilde_eval
            .commutator(&self.split.above.eval_at(self.model.mu))
            .memoized()
    }

    /// Max-norm defect of `h_below + h_above = h_tilde` on a matrix space.
    pub fn split_defect(&self, space: &TruncatedFockSpace) -> f64 {
        let sum = self
            .split
            .below
            .add(&self.split.above)
            .eval_at(self.model.mu);
        let (sm, _) = sum.to_matrix(space);
        let (hm, _) = self.h_tilde_eval.to_matrix(space);
        matrix::max_abs_diff(&sm.to_dense(), &hm.to_dense())
    }

    /// Residual of `j_a = i ad_h u_a + mu^{n0+1} g_a` over the buffered
    /// subspace of the given matrix space, with the number of states kept.
    pub fn identity_residual(&self, space: &TruncatedFockSpace) -> (f64, usize) {
        let n = self.u_hat.n_sites();
        let h = LocalOp::reduced_hamiltonian(n, &self.model);
        let rhs = h
            .commutator(&self.u_hat)
            .scale(Complex64::new(0.0, 1.0))
            .add(&self.g_hat.scale_real(self.model.mu.powi(self.n0 as i32 + 1)));
        let buffer = self.j_hat.climb().max(rhs.climb());
        let (jm, _) = self.j_hat.to_matrix(space);
        let (rm, _) = rhs.to_matrix(space);
        let keep = space.buffered_indices(buffer);
        (
            matrix::max_abs_diff_on(&jm.to_dense(), &rm.to_dense(), &keep),
            keep.len(),
        )
    }

    pub fn summary(&self) -> DecompositionSummary {
        DecompositionSummary {
            a: self.a,
            n0: self.n0,
            n1: self.n1,
            n2: self.n2,
            n3: self.n3,
            gamma: self.model.gamma,
            mu: self.model.mu,
            delta: self.model.delta,
            g: self.model.g,
            locality_radius: self.locality_radius,
            centering: self.centering.clone(),
            u_terms: self.u_hat.terms().count(),
            g_terms: self.g_hat.terms().count(),
            u_range: self.u_hat.range(),
            g_range: self.g_hat.range(),
        }
    }
}

/// Euclidean norm of one column of an operator: `|f P_eta|`.
pub fn column_norm(op: &LocalOp, eta: &[i64]) -> f64 {
    op.column(eta)
        .iter()
        .map(|(_, v)| v.norm_sqr())
        .sum::<f64>()
        .sqrt()
}

// ---------------------------------------------------------------------------
// Cancellation suite
// ---------------------------------------------------------------------------

/// A sampled failure of the cancellation property.
#[derive(Debug, Clone, Serialize)]
pub struct CancellationViolation {
    pub eta: Config,
    pub x: usize,
    pub weight: f64,
    pub column_norm: f64,
}

/// A sampled configuration whose weighted commutator column is nonzero yet
/// lies outside the exceptional set.
#[derive(Debug, Clone, Serialize)]
pub struct ZContainmentViolation {
    pub eta: Config,
    pub column_norm: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CancellationReport {
    pub samples: usize,
    /// Pairs `(eta, x)` carrying positive weight, hence actually checked.
    pub checked: usize,
    /// Pairs skipped because the weight vanished (no claim made).
    pub skipped: usize,
    pub tolerance: f64,
    pub max_checked_norm: f64,
    pub violations: Vec<CancellationViolation>,
    /// Largest weighted-commutator column norm seen outside the
    /// exceptional set (must stay below the tolerance).
    pub max_norm_outside_z: f64,
    pub z_violations: Vec<ZContainmentViolation>,
}

impl CancellationReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty() && self.z_violations.is_empty()
    }
}

impl CurrentDecomposition {
    /// Sample configurations from the Gibbs measure and check that wherever
    /// a site weight is positive, the commutator of the resonant
    /// Hamiltonian with that site's tail kills the configuration; also
    /// check that every nonzero column of the weighted tail commutator
    /// lies inside the exceptional set.
    pub fn verify_cancellation(
        &self,
        sampler: &GibbsSampler,
        samples: usize,
        tolerance: f64,
    ) -> Result<CancellationReport> {
        let n = self.u_hat.n_sites();
        let k_ops: Vec<LocalOp> = (0..self.field.sites().len())
            .map(|idx| self.tail_commutator(idx))
            .collect();
        let weighted = self.weighted_tail_commutator();
        let zpred = ZPredicate::build(self.a, &self.geometry, n)?;

        struct SampleOutcome {
            checked: usize,
            skipped: usize,
            max_checked: f64,
            max_outside: f64,
            violations: Vec<CancellationViolation>,
            z_violations: Vec<ZContainmentViolation>,
        }

        let outcomes: Vec<SampleOutcome> = (0..samples)
            .into_par_iter()
            .map(|s| {
                let mut rng = sampler.rng(s as u64);
                let eta = sampler.sample_config(n, &mut rng);
                let real: Vec<f64> = eta.iter().map(|&v| v as f64).collect();
                let weights = self.field.weights_at(&eta);
                let mut out = SampleOutcome {
                    checked: 0,
                    skipped: 0,
                    max_checked: 0.0,
                    max_outside: 0.0,
                    violations: Vec::new(),
                    z_violations: Vec::new(),
                };
                for (idx, &x) in self.field.sites().iter().enumerate() {
                    let w = weights.site_weights[idx];
                    if w > 0.0 {
                        out.checked += 1;
                        let norm = column_norm(&k_ops[idx], &eta);
                        out.max_checked = out.max_checked.max(norm);
                        if norm > tolerance {
                            out.violations.push(CancellationViolation {
                                eta: eta.clone(),
                                x,
                                weight: w,
                                column_norm: norm,
                            });
                        }
                    } else {
                        out.skipped += 1;
                    }
                }
                let gnorm = column_norm(&weighted, &eta);
                if gnorm > tolerance && !zpred.contains(&real) {
                    out.max_outside = gnorm;
                    out.z_violations.push(ZContainmentViolation {
                        eta: eta.clone(),
                        column_norm: gnorm,
                    });
                }
                out
            })
            .collect();

        let mut report = CancellationReport {
            samples,
            checked: 0,
            skipped: 0,
            tolerance,
            max_checked_norm: 0.0,
            violations: Vec::new(),
            max_norm_outside_z: 0.0,
            z_violations: Vec::new(),
        };
        for o in outcomes {
            report.checked += o.checked;
            report.skipped += o.skipped;
            report.max_checked_norm = report.max_checked_norm.max(o.max_checked);
            report.max_norm_outside_z = report.max_norm_outside_z.max(o.max_outside);
            report.violations.extend(o.violations);
            report.z_violations.extend(o.z_violations);
        }
        Ok(report)
    }
}

// ---------------------------------------------------------------------------
// Moment estimates
// ---------------------------------------------------------------------------

/// Plan for the Monte Carlo moment sweep: one decomposition per grid point
/// with the coupling tied to the chemical potential.
#[derive(Debug, Clone, Serialize)]
pub struct MomentPlan {
    pub n_sites: usize,
    pub a: usize,
    pub n0: u32,
    pub depth: usize,
    pub range_cap: u32,
    pub g: f64,
    pub gamma: f64,
    pub l: f64,
    pub n2: usize,
    pub n3: usize,
    pub r: u32,
    pub mu_grid: Vec<f64>,
    pub samples: usize,
    pub seed: u64,
    pub quadrature: QuadratureSpec,
    /// Broadening radius for the exceptional-set probability.
    pub zs_radius: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct MomentRow {
    pub mu: f64,
    pub observable: String,
    pub estimate: f64,
    pub stderr: f64,
    pub n_samples: usize,
}

/// A fitted log-log slope next to its predicted exponent; `fitted` is
/// absent when fewer than two grid points had positive estimates.
#[derive(Debug, Clone, Serialize)]
pub struct SlopeFit {
    pub observable: String,
    pub fitted: Option<f64>,
    pub predicted: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct MomentTable {
    pub rows: Vec<MomentRow>,
    pub slopes: Vec<SlopeFit>,
    /// True when some slope could not be fitted from the available data.
    pub partial: bool,
    pub plan: MomentPlan,
}

/// Least-squares slope of `ln y` against `ln x` over the points with
/// positive `y`.
fn log_log_slope(points: &[(f64, f64)]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = points
        .iter()
        .filter(|(x, y)| *x > 0.0 && *y > 0.0)
        .map(|&(x, y)| (x.ln(), y.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx == 0.0 {
        return None;
    }
    Some(sxy / sxx)
}

/// Monte Carlo estimates of the second moments of `u_a` and `g_a`, the
/// mean of `g_a`, and the probabilities of the near-resonance event and
/// the broadened exceptional set, over a grid of chemical potentials with
/// the coupling tied (`delta = mu`). Physical-scale rows are the reduced
/// rows rescaled by the exact power of the coupling.
pub fn moment_estimates(plan: &MomentPlan) -> Result<MomentTable> {
    if plan.mu_grid.is_empty() {
        return Err(Error::config("moment sweep needs a non-empty grid"));
    }
    if plan.samples < 2 {
        return Err(Error::config("moment sweep needs at least two samples"));
    }
    let mut rows: Vec<MomentRow> = Vec::new();
    let mut w_points: Vec<(f64, f64)> = Vec::new();
    let mut z_points: Vec<(f64, f64)> = Vec::new();

    for (gi, &mu) in plan.mu_grid.iter().enumerate() {
        let params = ModelParams {
            g: plan.g,
            mu,
            delta: mu,
            gamma: plan.gamma,
        };
        let geometry = GeometryParams::new(plan.l, mu, plan.gamma, plan.n2, plan.n3, plan.r)?;
        let kam = KamState::build(plan.n_sites, &params, plan.depth, plan.range_cap)?;
        let centering_seed = plan.seed ^ 0x9e37_79b9_7f4a_7c15 ^ gi as u64;
        let decomp = build_decomposition(
            &kam,
            &geometry,
            plan.a,
            plan.n0,
            plan.quadrature,
            CenteringMode::MonteCarlo {
                samples: plan.samples,
                seed: centering_seed,
            },
        )?;
        let zpred = ZPredicate::build(plan.a, &geometry, plan.n_sites)?;
        let sampler = GibbsSampler::new(mu, gibbs::recommended_cap(mu), plan.seed.wrapping_add(gi as u64))?;

        let per_sample: Vec<[f64; 5]> = (0..plan.samples)
            .into_par_iter()
            .map(|s| {
                let mut rng = sampler.rng(s as u64);
                let eta = sampler.sample_config(plan.n_sites, &mut rng);
                let real: Vec<f64> = eta.iter().map(|&v| v as f64).collect();
                let u_col = column_norm(decomp.u_hat(), &eta);
                let g_col = column_norm(decomp.g_hat(), &eta);
                let g_diag = decomp.g_hat().diag_at(&eta).re;
                let in_w = decomp.field().sees_resonance(&real);
                let in_zs = zpred.within_distance(&real, plan.zs_radius).unwrap_or(false);
                [
                    u_col * u_col,
                    g_col * g_col,
                    g_diag,
                    if in_w { 1.0 } else { 0.0 },
                    if in_zs { 1.0 } else { 0.0 },
                ]
            })
            .collect();

        let names = ["u_sq", "g_sq", "g_mean", "p_w", "p_z_s"];
        let mut estimates = [0.0f64; 5];
        let mut stderrs = [0.0f64; 5];
        for (k, name) in names.iter().enumerate() {
            let vals: Vec<f64> = per_sample.iter().map(|v| v[k]).collect();
            let (est, se) = mean_and_stderr(&vals);
            estimates[k] = est;
            stderrs[k] = se;
            rows.push(MomentRow {
                mu,
                observable: (*name).to_string(),
                estimate: est,
                stderr: se,
                n_samples: plan.samples,
            });
        }
        // Physical-scale companions: exact rescalings of the reduced rows.
        for (k, name, scale) in [(0, "u_sq_rescaled", mu.powi(-4)), (1, "g_sq_rescaled", mu.powi(-8))] {
            rows.push(MomentRow {
                mu,
                observable: name.to_string(),
                estimate: estimates[k] * scale,
                stderr: stderrs[k] * scale,
                n_samples: plan.samples,
            });
        }
        w_points.push((mu, estimates[3]));
        z_points.push((mu, estimates[4]));
    }

    let gamma_prime = 1.0 - plan.gamma;
    let slopes = vec![
        SlopeFit {
            observable: "p_w".to_string(),
            fitted: log_log_slope(&w_points),
            predicted: gamma_prime,
        },
        SlopeFit {
            observable: "p_z_s".to_string(),
            fitted: log_log_slope(&z_points),
            predicted: plan.n2 as f64 * gamma_prime,
        },
    ];
    let partial = slopes.iter().any(|s| s.fitted.is_none());
    Ok(MomentTable {
        rows,
        slopes,
        partial,
        plan: plan.clone(),
    })
}

// ---------------------------------------------------------------------------
// Event-probability sweep
// ---------------------------------------------------------------------------

/// Plan for the factorized event-probability sweep: no operator build,
/// only the resonance-weight field and the exceptional-set predicate.
#[derive(Debug, Clone, Serialize)]
pub struct ProbabilityPlan {
    pub n_sites: usize,
    pub a: usize,
    pub gamma: f64,
    pub l: f64,
    pub n2: usize,
    pub n3: usize,
    pub r: u32,
    pub mu_grid: Vec<f64>,
    pub samples: usize,
    pub seed: u64,
    pub quadrature: QuadratureSpec,
    /// Broadening radius for the exceptional-set probability.
    pub zs_radius: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ProbabilityTable {
    pub rows: Vec<MomentRow>,
    pub slopes: Vec<SlopeFit>,
    /// True when some slope could not be fitted from the available data.
    pub partial: bool,
    pub plan: ProbabilityPlan,
}

impl ProbabilityTable {
    /// Fitted slope for the named observable, when one was fitted.
    pub fn slope(&self, observable: &str) -> Option<f64> {
        self.slopes
            .iter()
            .find(|s| s.observable == observable)
            .and_then(|s| s.fitted)
    }
}

/// Occupation-only estimates of the two event probabilities over a grid
/// of chemical potentials with the coupling tied (`delta = mu`): the
/// probability that the weight field sees a resonance anywhere on its
/// window, and the probability of landing within `zs_radius` of the
/// multi-resonant exceptional set. Configurations are sampled site by
/// site and never touch an operator, so the grid can reach couplings far
/// below what an operator build would allow; occupations up to ~1e15
/// stay exactly representable.
pub fn probability_sweep(plan: &ProbabilityPlan) -> Result<ProbabilityTable> {
    if plan.mu_grid.is_empty() {
        return Err(Error::config("probability sweep needs a non-empty grid"));
    }
    if plan.samples < 2 {
        return Err(Error::config("probability sweep needs at least two samples"));
    }
    let mut rows: Vec<MomentRow> = Vec::new();
    let mut w_points: Vec<(f64, f64)> = Vec::new();
    let mut z_points: Vec<(f64, f64)> = Vec::new();

    for (gi, &mu) in plan.mu_grid.iter().enumerate() {
        let geometry = GeometryParams::new(plan.l, mu, plan.gamma, plan.n2, plan.n3, plan.r)?;
        let field = WeightField::build(plan.a, &geometry, plan.n_sites, plan.quadrature)?;
        let zpred = ZPredicate::build(plan.a, &geometry, plan.n_sites)?;
        let sampler = GibbsSampler::new(
            mu,
            gibbs::recommended_cap(mu),
            plan.seed.wrapping_add(gi as u64),
        )?;

        let events: Vec<[f64; 2]> = (0..plan.samples)
            .into_par_iter()
            .map(|s| {
                let mut rng = sampler.rng(s as u64);
                let eta = sampler.sample_config(plan.n_sites, &mut rng);
                let real: Vec<f64> = eta.iter().map(|&v| v as f64).collect();
                let in_w = field.sees_resonance(&real);
                let in_zs = zpred.within_distance(&real, plan.zs_radius).unwrap_or(false);
                [u8::from(in_w) as f64, u8::from(in_zs) as f64]
            })
            .collect();

        for (k, name) in ["p_w", "p_z_s"].iter().enumerate() {
            let vals: Vec<f64> = events.iter().map(|v| v[k]).collect();
            let (est, se) = mean_and_stderr(&vals);
            rows.push(MomentRow {
                mu,
                observable: (*name).to_string(),
                estimate: est,
                stderr: se,
                n_samples: plan.samples,
            });
            if k == 0 {
                w_points.push((mu, est));
            } else {
                z_points.push((mu, est));
            }
        }
    }

    let gamma_prime = 1.0 - plan.gamma;
    let slopes = vec![
        SlopeFit {
            observable: "p_w".to_string(),
            fitted: log_log_slope(&w_points),
            predicted: gamma_prime,
        },
        SlopeFit {
            observable: "p_z_s".to_string(),
            fitted: log_log_slope(&z_points),
            predicted: plan.n2 as f64 * gamma_prime,
        },
    ];
    let partial = slopes.iter().any(|s| s.fitted.is_none());
    Ok(ProbabilityTable {
        rows,
        slopes,
        partial,
        plan: plan.clone(),
    })
}
