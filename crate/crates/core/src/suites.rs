//! Randomized property suites for the geometry layer: the subspace
//! proximity inequality, invariance of flattened cylinders along in-span
//! resonant moves, cylinder extension by a new cluster move, and the
//! sampled checks of the indicator-stability proposition.
//!
//! Suites are deterministic: each trial draws from its own stream of a
//! counter-mode generator seeded by the master seed, so reports are
//! reproducible and trials parallelize freely.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cutoff::ResonanceCutoff;
use crate::error::{Error, Result};
use crate::geometry::{
    ball, integer_rank, is_cluster, move_as_real, BSet, GeometryParams, ResonanceCluster,
    ResonantZone, SpanBasis,
};
use crate::indicator::{IndicatorEvaluator, QuadratureSpec};
use crate::lattice::ModelParams;
use crate::moves::{self, Move};

/// Shared knobs of the three lemma suites.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub n_sites: usize,
    pub anchor: usize,
    pub trials: usize,
    pub seed: u64,
    /// Resonance budget for the conditioned inner product; defaults to
    /// the worst kernel-shifted value `8 r^2 + 2`.
    pub k_budget: Option<f64>,
    /// Shift samples per invariance trial (besides the endpoints).
    pub shifts_per_trial: usize,
}

impl SuiteConfig {
    pub fn new(n_sites: usize, anchor: usize, trials: usize, seed: u64) -> SuiteConfig {
        SuiteConfig {
            n_sites,
            anchor,
            trials,
            seed,
            k_budget: None,
            shifts_per_trial: 8,
        }
    }

    fn validate(&self, params: &GeometryParams) -> Result<()> {
        params.validate()?;
        if self.trials == 0 {
            return Err(Error::config("suites need at least one trial"));
        }
        if self.anchor >= self.n_sites {
            return Err(Error::config("anchor outside the lattice"));
        }
        Ok(())
    }

    fn k(&self, params: &GeometryParams) -> f64 {
        self.k_budget.unwrap_or_else(|| params.k_default())
    }
}

/// A failed trial with everything needed to rerun it in isolation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Counterexample {
    pub suite: String,
    pub n_sites: usize,
    pub anchor: usize,
    pub params: GeometryParams,
    pub eta: Vec<f64>,
    pub cluster: Vec<Move>,
    pub extra_move: Option<Move>,
    pub shift: Option<f64>,
    pub detail: String,
}

/// Outcome of one suite run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: String,
    pub n_sites: usize,
    pub anchor: usize,
    pub trials: usize,
    pub violations: usize,
    /// Largest proximity constant seen (proximity suite only).
    pub max_constant: Option<f64>,
    /// Tightest margin by which a satisfied inequality held.
    pub min_margin: Option<f64>,
    /// Largest amount by which a violated inequality failed (0 if none).
    pub max_violation: f64,
    /// Total sampling attempts across trials.
    pub attempts: usize,
    pub seed: u64,
    pub params: GeometryParams,
    /// At most [`MAX_STORED_COUNTEREXAMPLES`] failing instances.
    pub counterexamples: Vec<Counterexample>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

pub const MAX_STORED_COUNTEREXAMPLES: usize = 16;
const ATTEMPT_CAP: usize = 5_000;
/// A proximity ratio beyond this counts as an unbounded constant.
const PROXIMITY_CONSTANT_CAP: f64 = 1e12;

fn trial_rng(seed: u64, trial: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial as u64 + 1);
    rng
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Random point with coordinates uniform at a log-uniform scale.
fn random_point(n: usize, width: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let exponent: f64 = rng.gen_range(-1.0..2.5);
    let amp = width * 10.0f64.powf(exponent);
    (0..n).map(|_| rng.gen_range(-amp..amp)).collect()
}

// ---------------------------------------------------------------------------
// Suite 1: subspace proximity.
// ---------------------------------------------------------------------------

struct ProximityOutcome {
    constant: f64,
    attempts: usize,
    counterexample: Option<Counterexample>,
}

/// For independent moves `rho_1..rho_{p+1}` and any point, the distance to
/// the intersection of all p+1 hyperplanes is controlled by the last inner
/// product plus the distance to the intersection of the first p. The suite
/// samples instances, reports the largest constant, and flags unbounded
/// ratios as counterexamples.
pub fn proximity_suite(params: &GeometryParams, config: &SuiteConfig) -> Result<SuiteReport> {
    config.validate(params)?;
    let n = config.n_sites;
    let r = params.r as usize;
    let window = ball(config.anchor, params.n3 + 4 * r + params.n2 * r, n);
    let pool = moves::move_set_in_window(n, params.r, window);
    if pool.is_empty() {
        return Err(Error::config("no moves in the suite window"));
    }
    let width = params.width();
    let outcomes: Vec<ProximityOutcome> = (0..config.trials)
        .into_par_iter()
        .map(|trial| {
            let mut rng = trial_rng(config.seed, trial);
            let p = rng.gen_range(1..=params.n2);
            // Draw an independent family of p + 1 moves.
            let mut attempts = 0usize;
            let mut family: Vec<&Move> = Vec::new();
            while family.len() < p + 1 && attempts < ATTEMPT_CAP {
                attempts += 1;
                let candidate = &pool[rng.gen_range(0..pool.len())];
                family.push(candidate);
                if integer_rank(&family) != family.len() {
                    family.pop();
                }
            }
            if family.len() < p + 1 {
                return ProximityOutcome {
                    constant: 0.0,
                    attempts,
                    counterexample: None,
                };
            }
            let eta = random_point(n, width, &mut rng);
            let base: Vec<Move> = family[..p].iter().map(|m| (*m).clone()).collect();
            let last = family[p].clone();
            let (constant, violation) = proximity_instance(&eta, &base, &last, n);
            let counterexample = violation.then(|| Counterexample {
                suite: "proximity".into(),
                n_sites: n,
                anchor: config.anchor,
                params: params.clone(),
                eta: eta.clone(),
                cluster: base.clone(),
                extra_move: Some(last.clone()),
                shift: None,
                detail: "proximity ratio exceeded the boundedness cap".into(),
            });
            ProximityOutcome {
                constant,
                attempts,
                counterexample,
            }
        })
        .collect();

    let mut report = SuiteReport {
        suite: "proximity".into(),
        n_sites: n,
        anchor: config.anchor,
        trials: config.trials,
        violations: 0,
        max_constant: Some(0.0),
        min_margin: None,
        max_violation: 0.0,
        attempts: 0,
        seed: config.seed,
        params: params.clone(),
        counterexamples: Vec::new(),
    };
    for outcome in outcomes {
        report.attempts += outcome.attempts;
        let best = report.max_constant.get_or_insert(0.0);
        *best = best.max(outcome.constant);
        if let Some(cx) = outcome.counterexample {
            report.violations += 1;
            if report.counterexamples.len() < MAX_STORED_COUNTEREXAMPLES {
                report.counterexamples.push(cx);
            }
        }
    }
    Ok(report)
}

/// Returns the proximity constant of one instance and whether it blew up.
fn proximity_instance(eta: &[f64], base: &[Move], last: &Move, n: usize) -> (f64, bool) {
    let full: Vec<Move> = base
        .iter()
        .cloned()
        .chain(std::iter::once(last.clone()))
        .collect();
    let full_basis = SpanBasis::from_moves(&full, n);
    let base_basis = SpanBasis::from_moves(base, n);
    let numerator = norm2(&full_basis.project(eta));
    let denominator = moves::dot_real(last, eta).abs() + norm2(&base_basis.project(eta));
    if numerator <= 1e-9 * (1.0 + norm2(eta)) {
        return (0.0, false);
    }
    if denominator <= numerator / PROXIMITY_CONSTANT_CAP {
        return (f64::INFINITY, true);
    }
    (numerator / denominator, false)
}

// ---------------------------------------------------------------------------
// Samplers shared by the invariance and extension suites.
// ---------------------------------------------------------------------------

/// A random point of the flattened cylinder, with its span component
/// having the prescribed inner product with `conditioned` (when given).
/// Retries until the subset conditions hold; returns the attempt count.
fn sample_in_b(
    b: &BSet,
    conditioned: Option<(&Move, f64)>,
    width: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<f64>, usize)> {
    let n = b.basis().n_sites();
    let scale = b.first_threshold();
    for attempt in 1..=ATTEMPT_CAP {
        // Cylinder junk orthogonal to the span.
        let raw: Vec<f64> = (0..n)
            .map(|_| rng.gen_range(-50.0 * width..50.0 * width))
            .collect();
        let raw_span = b.basis().project(&raw);
        let mut eta: Vec<f64> = raw.iter().zip(&raw_span).map(|(a, b)| a - b).collect();
        // Span component.
        match conditioned {
            Some((rho, target)) => {
                let rho_real = move_as_real(rho);
                let rho_norm_sq = moves::l2_sq(rho) as f64;
                // Directions within the span orthogonal to rho.
                let perp_raw: Vec<Vec<f64>> = b
                    .basis()
                    .vectors()
                    .iter()
                    .map(|e| {
                        let c = moves::dot_real(rho, e) / rho_norm_sq;
                        e.iter()
                            .zip(&rho_real)
                            .map(|(ei, ri)| ei - c * ri)
                            .collect()
                    })
                    .collect();
                let perp = SpanBasis::from_vectors(&perp_raw, n);
                for f in perp.vectors() {
                    let c = rng.gen_range(-scale..scale);
                    for (x, fi) in eta.iter_mut().zip(f) {
                        *x += c * fi;
                    }
                }
                // The inner product with rho is exactly `target` now: the
                // junk and the perp directions are orthogonal to it.
                for (x, ri) in eta.iter_mut().zip(&rho_real) {
                    *x += target / rho_norm_sq * ri;
                }
            }
            None => {
                for e in b.basis().vectors() {
                    let c = rng.gen_range(-scale..scale);
                    for (x, ei) in eta.iter_mut().zip(e) {
                        *x += c * ei;
                    }
                }
            }
        }
        if b.contains(&eta) {
            return Ok((eta, attempt));
        }
    }
    Err(Error::numerical(
        "cylinder sampler starved: no in-set point found within the attempt cap",
    ))
}

// ---------------------------------------------------------------------------
// Suite 2: invariance of cylinders along in-span resonant moves.
// ---------------------------------------------------------------------------

struct MembershipOutcome {
    attempts: usize,
    checks: usize,
    min_margin: f64,
    max_violation: f64,
    counterexamples: Vec<Counterexample>,
}

/// Points of a flattened cylinder stay inside when shifted along any
/// in-span range-r move with a small inner product, for shifts up to the
/// resonance width.
pub fn invariance_suite(params: &GeometryParams, config: &SuiteConfig) -> Result<SuiteReport> {
    config.validate(params)?;
    let n = config.n_sites;
    let zone = ResonantZone::build(config.anchor, params, n)?;
    if zone.b_sets().is_empty() {
        return Err(Error::config("no cylinders around the anchor"));
    }
    let width = params.width();
    let k = config.k(params);
    let outcomes: Result<Vec<MembershipOutcome>> = (0..config.trials)
        .into_par_iter()
        .map(|trial| {
            let mut rng = trial_rng(config.seed, trial);
            let pick = rng.gen_range(0..zone.b_sets().len());
            let b = &zone.b_sets()[pick];
            let cluster = &zone.clusters()[pick];
            let rho = &b.span_moves()[rng.gen_range(0..b.span_moves().len())];
            let target = rng.gen_range(-k * width..k * width);
            let (eta, attempts) = sample_in_b(b, Some((rho, target)), width, &mut rng)?;
            let mut outcome = MembershipOutcome {
                attempts,
                checks: 0,
                min_margin: f64::INFINITY,
                max_violation: 0.0,
                counterexamples: Vec::new(),
            };
            let mut shifts: Vec<f64> = vec![0.0, width, -width];
            shifts.extend((0..config.shifts_per_trial).map(|_| rng.gen_range(-width..width)));
            for t in shifts {
                let shifted: Vec<f64> = eta
                    .iter()
                    .zip(rho.iter())
                    .map(|(x, &m)| x + t * m as f64)
                    .collect();
                let v = b.violation(&shifted);
                outcome.checks += 1;
                if v > 0.0 {
                    outcome.max_violation = outcome.max_violation.max(v);
                    outcome.counterexamples.push(Counterexample {
                        suite: "invariance".into(),
                        n_sites: n,
                        anchor: config.anchor,
                        params: params.clone(),
                        eta: eta.clone(),
                        cluster: cluster.moves().to_vec(),
                        extra_move: Some(rho.clone()),
                        shift: Some(t),
                        detail: format!("shifted point violates the cylinder by {v:.6e}"),
                    });
                } else {
                    outcome.min_margin = outcome.min_margin.min(-v);
                }
            }
            Ok(outcome)
        })
        .collect();
    aggregate_membership("invariance", params, config, outcomes?)
}

// ---------------------------------------------------------------------------
// Suite 3: extension of cylinders by a new cluster move.
// ---------------------------------------------------------------------------

/// A point of a p-cylinder whose inner product with a rank-increasing
/// cluster extension move is small lies in the (p+1)-cylinder.
pub fn extension_suite(params: &GeometryParams, config: &SuiteConfig) -> Result<SuiteReport> {
    config.validate(params)?;
    let n = config.n_sites;
    let zone = ResonantZone::build(config.anchor, params, n)?;
    let r = params.r as usize;
    let window = ball(config.anchor, params.n3 + 4 * r + params.n2 * r, n);
    let pool = moves::move_set_in_window(n, params.r, window);
    // Precompute which representative clusters extend, and by which moves.
    let mut extendable: Vec<(usize, Vec<usize>)> = Vec::new();
    for (ci, cluster) in zone.clusters().iter().enumerate() {
        if cluster.p() >= params.n2 {
            continue;
        }
        let support = cluster.support();
        let mut followers = Vec::new();
        for (mi, m) in pool.iter().enumerate() {
            if !moves::support(m).iter().any(|s| support.contains(s)) {
                continue;
            }
            let mut extended: Vec<Move> = cluster.moves().to_vec();
            extended.push(m.clone());
            let refs: Vec<&Move> = extended.iter().collect();
            if integer_rank(&refs) != extended.len() {
                continue;
            }
            if is_cluster(&extended, config.anchor, params.r, n) {
                followers.push(mi);
            }
        }
        if !followers.is_empty() {
            extendable.push((ci, followers));
        }
    }
    if extendable.is_empty() {
        return Err(Error::config(
            "no extendable clusters around the anchor (n2 too small?)",
        ));
    }
    let width = params.width();
    let k = config.k(params);
    let outcomes: Result<Vec<MembershipOutcome>> = (0..config.trials)
        .into_par_iter()
        .map(|trial| {
            let mut rng = trial_rng(config.seed, trial);
            let (ci, followers) = &extendable[rng.gen_range(0..extendable.len())];
            let cluster = &zone.clusters()[*ci];
            let b = &zone.b_sets()[*ci];
            let rho = &pool[followers[rng.gen_range(0..followers.len())]];
            let (mut eta, attempts) = sample_in_b(b, None, width, &mut rng)?;
            // Pin the inner product with the extension move by shifting
            // along its component orthogonal to the span; the base
            // membership only reads the span component, so it is intact.
            let rho_real = move_as_real(rho);
            let p_rho = b.basis().project(&rho_real);
            let d: Vec<f64> = rho_real.iter().zip(&p_rho).map(|(a, b)| a - b).collect();
            let d_norm_sq: f64 = d.iter().map(|x| x * x).sum();
            debug_assert!(d_norm_sq > 1e-12);
            let target = rng.gen_range(-k * width..k * width);
            let alpha = (target - moves::dot_real(rho, &eta)) / d_norm_sq;
            for (x, di) in eta.iter_mut().zip(&d) {
                *x += alpha * di;
            }
            debug_assert!(b.contains(&eta), "orthogonal shift must preserve the base");
            let mut extended_moves: Vec<Move> = cluster.moves().to_vec();
            extended_moves.push(rho.clone());
            let extended_cluster =
                ResonanceCluster::new(extended_moves, config.anchor, params.r, n)?;
            let extended = BSet::build(&extended_cluster, params, n)?;
            let v = extended.violation(&eta);
            let mut outcome = MembershipOutcome {
                attempts,
                checks: 1,
                min_margin: f64::INFINITY,
                max_violation: 0.0,
                counterexamples: Vec::new(),
            };
            if v > 0.0 {
                outcome.max_violation = v;
                outcome.counterexamples.push(Counterexample {
                    suite: "extension".into(),
                    n_sites: n,
                    anchor: config.anchor,
                    params: params.clone(),
                    eta: eta.clone(),
                    cluster: cluster.moves().to_vec(),
                    extra_move: Some(rho.clone()),
                    shift: None,
                    detail: format!("extended cylinder misses the point by {v:.6e}"),
                });
            } else {
                outcome.min_margin = -v;
            }
            Ok(outcome)
        })
        .collect();
    aggregate_membership("extension", params, config, outcomes?)
}

fn aggregate_membership(
    suite: &str,
    params: &GeometryParams,
    config: &SuiteConfig,
    outcomes: Vec<MembershipOutcome>,
) -> Result<SuiteReport> {
    let mut report = SuiteReport {
        suite: suite.into(),
        n_sites: config.n_sites,
        anchor: config.anchor,
        trials: config.trials,
        violations: 0,
        max_constant: None,
        min_margin: Some(f64::INFINITY),
        max_violation: 0.0,
        attempts: 0,
        seed: config.seed,
        params: params.clone(),
        counterexamples: Vec::new(),
    };
    for outcome in outcomes {
        report.attempts += outcome.attempts;
        report.violations += outcome.counterexamples.len();
        report.max_violation = report.max_violation.max(outcome.max_violation);
        let margin = report.min_margin.get_or_insert(f64::INFINITY);
        *margin = margin.min(outcome.min_margin);
        for cx in outcome.counterexamples {
            if report.counterexamples.len() < MAX_STORED_COUNTEREXAMPLES {
                report.counterexamples.push(cx);
            }
        }
    }
    Ok(report)
}

/// Re-run the check a counterexample records; true iff it still fails.
pub fn replay_counterexample(cx: &Counterexample) -> Result<bool> {
    match cx.suite.as_str() {
        "proximity" => {
            let last = cx
                .extra_move
                .clone()
                .ok_or_else(|| Error::config("proximity replay needs the last move"))?;
            let (_, violated) = proximity_instance(&cx.eta, &cx.cluster, &last, cx.n_sites);
            Ok(violated)
        }
        "invariance" => {
            let rho = cx
                .extra_move
                .clone()
                .ok_or_else(|| Error::config("invariance replay needs the move"))?;
            let t = cx
                .shift
                .ok_or_else(|| Error::config("invariance replay needs the shift"))?;
            let cluster = ResonanceCluster::new(
                cx.cluster.clone(),
                cx.anchor,
                cx.params.r,
                cx.n_sites,
            )?;
            let b = BSet::build(&cluster, &cx.params, cx.n_sites)?;
            if !b.contains(&cx.eta) {
                return Ok(false);
            }
            let shifted: Vec<f64> = cx
                .eta
                .iter()
                .zip(rho.iter())
                .map(|(x, &m)| x + t * m as f64)
                .collect();
            Ok(!b.contains(&shifted))
        }
        "extension" => {
            let rho = cx
                .extra_move
                .clone()
                .ok_or_else(|| Error::config("extension replay needs the move"))?;
            let cluster = ResonanceCluster::new(
                cx.cluster.clone(),
                cx.anchor,
                cx.params.r,
                cx.n_sites,
            )?;
            let b = BSet::build(&cluster, &cx.params, cx.n_sites)?;
            if !b.contains(&cx.eta) {
                return Ok(false);
            }
            let mut extended_moves = cx.cluster.clone();
            extended_moves.push(rho);
            let extended_cluster =
                ResonanceCluster::new(extended_moves, cx.anchor, cx.params.r, cx.n_sites)?;
            let extended = BSet::build(&extended_cluster, &cx.params, cx.n_sites)?;
            Ok(!extended.contains(&cx.eta))
        }
        other => Err(Error::config(format!("unknown suite '{other}'"))),
    }
}

// ---------------------------------------------------------------------------
// Indicator-stability checks on sampled configurations.
// ---------------------------------------------------------------------------

/// Prepared context for the two sampled indicator-stability checks around
/// one site: resonance-freeness wherever the indicator is positive, and
/// invariance of the indicator along resonant moves away from the
/// multi-resonant set.
pub struct StabilityContext {
    evaluator: IndicatorEvaluator,
    cutoff: ResonanceCutoff,
    /// Moves anchored at the site (support within `B(x, 4r)`).
    anchored: Vec<Move>,
    /// Moves whose support meets the indicator window.
    window_moves: Vec<Move>,
}

/// A sampled configuration failing the positivity check.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PositivityViolation {
    pub eta: Vec<i64>,
    pub rho: Move,
    pub zeta: f64,
}

/// A sampled configuration failing the invariance check.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DerivativeViolation {
    pub eta: Vec<i64>,
    pub rho: Move,
    pub zeta: f64,
    pub derivative: f64,
}

impl StabilityContext {
    pub fn new(
        x: usize,
        geometry: &GeometryParams,
        model: &ModelParams,
        n_sites: usize,
        quadrature: QuadratureSpec,
    ) -> Result<StabilityContext> {
        model.validate()?;
        if (geometry.delta - model.delta).abs() > 1e-12
            || (geometry.gamma - model.gamma).abs() > 1e-12
        {
            return Err(Error::config(
                "geometry and model must agree on delta and gamma",
            ));
        }
        let evaluator = IndicatorEvaluator::around(x, geometry, n_sites, quadrature)?;
        let r = geometry.r as usize;
        let anchored = moves::move_set_in_window(n_sites, geometry.r, ball(x, 4 * r, n_sites));
        let window = evaluator.window();
        let (lo, hi) = (
            window.first().copied().unwrap_or(x),
            window.last().copied().unwrap_or(x),
        );
        let hull = lo.saturating_sub(2 * r)..(hi + 2 * r + 1).min(n_sites);
        let window_moves: Vec<Move> = moves::move_set_in_window(n_sites, geometry.r, hull)
            .into_iter()
            .filter(|m| moves::support(m).iter().any(|s| window.contains(s)))
            .collect();
        Ok(StabilityContext {
            evaluator,
            cutoff: ResonanceCutoff::new(model.delta, model.gamma),
            anchored,
            window_moves,
        })
    }

    pub fn evaluator(&self) -> &IndicatorEvaluator {
        &self.evaluator
    }

    /// Positivity check: a positive indicator forces every anchored move
    /// to be non-resonant. Returns the violation if the configuration has
    /// a resonant anchored move while the indicator is positive.
    pub fn check_positivity(&self, eta: &[i64]) -> Option<PositivityViolation> {
        let resonant = self
            .anchored
            .iter()
            .map(|m| (m, self.cutoff.zeta(m, eta)))
            .find(|(_, z)| *z != 0.0)?;
        let eta_real: Vec<f64> = eta.iter().map(|&v| v as f64).collect();
        if self.evaluator.theta_positive(&eta_real) {
            Some(PositivityViolation {
                eta: eta.to_vec(),
                rho: resonant.0.clone(),
                zeta: resonant.1,
            })
        } else {
            None
        }
    }

    /// Invariance check: away from the multi-resonant set, the indicator
    /// is flat along every resonant move, to the given tolerance. Returns
    /// all violations for this configuration (none when the configuration
    /// is multi-resonant, where jumps are allowed).
    pub fn check_invariance(&self, eta: &[i64], tol: f64) -> Vec<DerivativeViolation> {
        let eta_real: Vec<f64> = eta.iter().map(|&v| v as f64).collect();
        if self.evaluator.zone().in_multi_resonant(&eta_real) {
            return Vec::new();
        }
        let mut violations = Vec::new();
        for rho in &self.window_moves {
            let zeta = self.cutoff.zeta(rho, eta);
            if zeta == 0.0 {
                continue;
            }
            let derivative = self.evaluator.discrete_derivative(&eta_real, rho);
            if derivative.abs() > tol {
                violations.push(DerivativeViolation {
                    eta: eta.to_vec(),
                    rho: rho.clone(),
                    zeta,
                    derivative,
                });
            }
        }
        violations
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desk_params() -> GeometryParams {
        GeometryParams::new(64.0, 0.3, 0.75, 2, 1, 1).unwrap()
    }

    #[test]
    fn proximity_constants_stay_bounded() {
        let params = desk_params();
        let config = SuiteConfig::new(6, 2, 500, 41);
        let report = proximity_suite(&params, &config).unwrap();
        assert!(report.passed(), "violations: {:?}", report.counterexamples);
        let c = report.max_constant.unwrap();
        assert!(c.is_finite() && c > 0.0, "constant {c}");
    }

    #[test]
    fn invariance_holds_at_large_scale() {
        let params = desk_params();
        let config = SuiteConfig::new(6, 2, 500, 43);
        let report = invariance_suite(&params, &config).unwrap();
        assert!(report.passed(), "violations: {:?}", report.counterexamples);
        assert!(report.min_margin.unwrap() > 0.0);
        assert_eq!(report.max_violation, 0.0);
    }

    #[test]
    fn extension_holds_at_large_scale() {
        let params = desk_params();
        let config = SuiteConfig::new(6, 2, 500, 47);
        let report = extension_suite(&params, &config).unwrap();
        assert!(report.passed(), "violations: {:?}", report.counterexamples);
        assert!(report.min_margin.unwrap() > 0.0);
    }

    #[test]
    fn suites_are_deterministic() {
        let params = desk_params();
        let config = SuiteConfig::new(6, 2, 120, 53);
        let a = invariance_suite(&params, &config).unwrap();
        let b = invariance_suite(&params, &config).unwrap();
        assert_eq!(a.min_margin, b.min_margin);
        assert_eq!(a.attempts, b.attempts);
        let pa = proximity_suite(&params, &config).unwrap();
        let pb = proximity_suite(&params, &config).unwrap();
        assert_eq!(pa.max_constant, pb.max_constant);
    }

    #[test]
    fn replay_reproduces_a_fabricated_failure() {
        let params = desk_params();
        let n = 6;
        let hop: Move = {
            let mut m = vec![0i16; n];
            m[2] = 1;
            m[3] = -1;
            m
        };
        // The origin is in every cylinder; a giant shift leaves it.
        let cx = Counterexample {
            suite: "invariance".into(),
            n_sites: n,
            anchor: 2,
            params: params.clone(),
            eta: vec![0.0; n],
            cluster: vec![hop.clone()],
            extra_move: Some(hop.clone()),
            shift: Some(1e9),
            detail: "fabricated".into(),
        };
        assert!(replay_counterexample(&cx).unwrap());
        // A legal shift does not reproduce.
        let fine = Counterexample {
            shift: Some(0.5 * params.width()),
            ..cx.clone()
        };
        assert!(!replay_counterexample(&fine).unwrap());
        // Unknown suites error out.
        let unknown = Counterexample {
            suite: "nonsense".into(),
            ..cx
        };
        assert!(replay_counterexample(&unknown).is_err());
    }

    #[test]
    fn stability_checks_pass_on_crafted_configurations() {
        let geometry = desk_params();
        let model = ModelParams {
            g: 0.6,
            mu: 0.3,
            delta: 0.3,
            gamma: 0.75,
        };
        let n = 5;
        let quad = QuadratureSpec::TensorGauss {
            nodes_per_coord: 4,
            max_evals: 2_000_000,
        };
        let ctx = StabilityContext::new(2, &geometry, &model, n, quad).unwrap();
        // Constant occupations: deeply multi-resonant, indicator zero,
        // hops resonant -> positivity must hold via theta = 0.
        let flat = vec![3i64; n];
        assert!(ctx.check_positivity(&flat).is_none());
        // Multi-resonant configurations are exempt from the invariance
        // check by definition.
        assert!(ctx.check_invariance(&flat, 1e-3).is_empty());
        // Empty lattice is multi-resonant too (all inner products zero).
        assert!(ctx.check_invariance(&vec![0i64; n], 1e-3).is_empty());
        // Far-spread configuration: nothing resonant, indicator one, both
        // checks pass trivially. Cubes, not squares: 9 + 16 = 25 would
        // hand the move (0,0,1,1,-1) an exact resonance.
        let spread: Vec<i64> = (0..n)
            .map(|i| 1_000_000 * (i as i64 + 1).pow(3))
            .collect();
        assert!(ctx.check_positivity(&spread).is_none());
        assert!(ctx.check_invariance(&spread, 1e-3).is_empty());
        assert!(ctx
            .evaluator()
            .theta_positive(&spread.iter().map(|&v| v as f64).collect::<Vec<_>>()));
    }

    #[test]
    fn stability_checks_on_single_resonance_configurations() {
        let geometry = desk_params();
        let model = ModelParams {
            g: 0.6,
            mu: 0.3,
            delta: 0.3,
            gamma: 0.75,
        };
        let n = 5;
        let quad = QuadratureSpec::TensorGauss {
            nodes_per_coord: 4,
            max_evals: 2_000_000,
        };
        let ctx = StabilityContext::new(2, &geometry, &model, n, quad).unwrap();
        // One small occupation among far-spread ones: the single-site
        // moves at site 0 are resonant and nothing else is, and the
        // spacing keeps the point out of the multi-resonant set, so the
        // flatness of the indicator along those moves is actually tested.
        let eta = vec![0i64, 2_000_000, 5_000_000, 9_000_000, 14_000_000];
        let eta_real: Vec<f64> = eta.iter().map(|&v| v as f64).collect();
        assert!(!ctx.evaluator().zone().in_multi_resonant(&eta_real));
        assert!(ctx.check_positivity(&eta).is_none());
        assert!(ctx.check_invariance(&eta, 1e-3).is_empty());
    }
}
