//! Grand-canonical Gibbs sampling and expectations.
//!
//! The measure factorizes over sites with the per-site law
//! `p(n) ∝ e^{-mu n}` on `{0, …, n_max}` — a truncated geometric
//! distribution. Sampling uses the exact inverse CDF; expectations come in
//! three modes: exact summation for diagonal observables with a small
//! window, a weighted trace over a truncated Fock space, and Monte Carlo
//! over sampled configurations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::lattice::{Config, TruncatedFockSpace};
use crate::localop::LocalOp;

/// Evaluation budget guard for the exact diagonal mode.
const EXACT_DIAGONAL_MAX_EVALS: usize = 20_000_000;

/// Per-site i.i.d. sampler of the factorized Gibbs measure.
#[derive(Debug, Clone, Serialize)]
pub struct GibbsSampler {
    mu: f64,
    n_max: i64,
    seed: u64,
}

/// Cap rule keeping the per-site weight above the cap below `e^{-3}`.
pub fn recommended_cap(mu: f64) -> i64 {
    (3.0 / mu).ceil() as i64 + 4
}

/// Mean of the untruncated geometric law, `1 / (e^mu - 1)`.
pub fn unbounded_mean(mu: f64) -> f64 {
    1.0 / (mu.exp() - 1.0)
}

impl GibbsSampler {
    pub fn new(mu: f64, n_max: i64, seed: u64) -> Result<GibbsSampler> {
        if !(mu > 0.0) {
            return Err(Error::config(format!(
                "chemical potential must be positive, got {mu}"
            )));
        }
        if n_max < 1 {
            return Err(Error::config("occupancy cap must be at least 1"));
        }
        Ok(GibbsSampler { mu, n_max, seed })
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn n_max(&self) -> i64 {
        self.n_max
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Untruncated probability mass sitting above the cap (per site).
    pub fn cap_weight(&self) -> f64 {
        (-self.mu * (self.n_max + 1) as f64).exp()
    }

    /// Exact per-site probability of occupancy `n`.
    pub fn site_probability(&self, n: i64) -> f64 {
        if n < 0 || n > self.n_max {
            return 0.0;
        }
        let one_minus_q = -(-self.mu).exp_m1();
        one_minus_q * (-self.mu * n as f64).exp() / (1.0 - self.cap_weight())
    }

    /// Exact mean of the truncated law.
    pub fn mean_occupancy(&self) -> f64 {
        (0..=self.n_max)
            .map(|n| n as f64 * self.site_probability(n))
            .sum()
    }

    /// A generator for the given stream; streams are independent, so trials
    /// and samples can be assigned one stream each and run in parallel.
    pub fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }

    /// One site occupancy by inverse CDF.
    pub fn sample_site(&self, rng: &mut ChaCha8Rng) -> i64 {
        let total = 1.0 - self.cap_weight();
        let u: f64 = rng.gen_range(0.0..1.0);
        // Solve 1 - e^{-mu (n+1)} >= u * total for the smallest n; ln_1p
        // keeps the inversion accurate at very small mu, where occupancies
        // reach 1/mu and the naive logarithm would lose the leading digits.
        let n = ((-(u * total)).ln_1p() / -self.mu - 1.0).ceil() as i64;
        n.clamp(0, self.n_max)
    }

    /// One full configuration.
    pub fn sample_config(&self, n_sites: usize, rng: &mut ChaCha8Rng) -> Config {
        (0..n_sites).map(|_| self.sample_site(rng)).collect()
    }

    /// Occupancy histogram over many samples, one stream per sample.
    pub fn histogram(&self, samples: usize) -> Vec<usize> {
        let mut counts = vec![0usize; self.n_max as usize + 1];
        for s in 0..samples {
            let mut rng = self.rng(s as u64);
            counts[self.sample_site(&mut rng) as usize] += 1;
        }
        counts
    }
}

/// Chi-square statistic of an occupancy histogram against the sampler's
/// exact law, merging the tail so every bin keeps an expected count of at
/// least `min_expected`. Returns the statistic and the degrees of freedom.
pub fn chi_square_statistic(
    sampler: &GibbsSampler,
    counts: &[usize],
    min_expected: f64,
) -> Result<(f64, usize)> {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::config("empty histogram"));
    }
    // Aggregate bins from the tail until each group is well populated.
    let mut groups: Vec<(f64, f64)> = Vec::new(); // (observed, expected)
    let mut acc_obs = 0.0;
    let mut acc_exp = 0.0;
    for n in (0..counts.len()).rev() {
        acc_obs += counts[n] as f64;
        acc_exp += sampler.site_probability(n as i64) * total as f64;
        if acc_exp >= min_expected {
            groups.push((acc_obs, acc_exp));
            acc_obs = 0.0;
            acc_exp = 0.0;
        }
    }
    if acc_exp > 0.0 {
        match groups.last_mut() {
            Some(last) => {
                last.0 += acc_obs;
                last.1 += acc_exp;
            }
            None => groups.push((acc_obs, acc_exp)),
        }
    }
    if groups.len() < 2 {
        return Err(Error::config(
            "histogram too coarse for a chi-square test after merging",
        ));
    }
    let statistic: f64 = groups
        .iter()
        .map(|(o, e)| (o - e) * (o - e) / e)
        .sum();
    Ok((statistic, groups.len() - 1))
}

/// How an expectation value is computed.
#[derive(Debug, Clone, Copy)]
pub enum ExpectationMode<'a> {
    /// Exact nested summation over the diagonal window with an adaptive
    /// per-site cap; only valid for diagonal observables.
    ExactDiagonal,
    /// Weighted trace over the given truncated space.
    TruncatedTrace(&'a TruncatedFockSpace),
    /// Monte Carlo over sampled configurations, one stream per sample.
    MonteCarlo { samples: usize, seed: u64 },
}

/// An expectation estimate with its error accounting.
#[derive(Debug, Clone, Serialize)]
pub struct Expectation {
    pub value: f64,
    /// Statistical error (Monte Carlo only; 0 for the exact modes).
    pub stderr: f64,
    /// Probability mass ignored by truncation (trace and exact modes).
    pub truncation_loss: f64,
    pub n_samples: usize,
}

/// Pairwise (cascade) summation: deterministic and accurate independent of
/// how the values were produced.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        n => {
            let (a, b) = values.split_at(n / 2);
            pairwise_sum(a) + pairwise_sum(b)
        }
    }
}

/// Mean and standard error of a sample vector via pairwise sums.
pub fn mean_and_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = pairwise_sum(values) / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let sq: Vec<f64> = values.iter().map(|v| (v - mean) * (v - mean)).collect();
    let var = pairwise_sum(&sq) / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Gibbs expectation of an operator in the requested mode. Only diagonal
/// matrix elements contribute to the average, so the observable is read
/// through its diagonal coefficient; the exact mode insists the operator
/// has no off-diagonal part at all, as a guard against accidental misuse.
pub fn expectation(
    op: &LocalOp,
    mu: f64,
    n_max: i64,
    mode: ExpectationMode,
) -> Result<Expectation> {
    if !(mu > 0.0) {
        return Err(Error::config("chemical potential must be positive"));
    }
    match mode {
        ExpectationMode::ExactDiagonal => {
            let off_diagonal = op.terms().any(|(rho, _)| rho.iter().any(|&v| v != 0));
            if off_diagonal {
                return Err(Error::config(
                    "exact-diagonal expectation requires a diagonal observable",
                ));
            }
            let zero = vec![0i16; op.n_sites()];
            let window: Vec<usize> = match op.term(&zero) {
                Some(f) => f.window().to_vec(),
                None => Vec::new(),
            };
            exact_diagonal_expectation(op, mu, n_max, &window)
        }
        ExpectationMode::TruncatedTrace(space) => {
            let mut weights = Vec::with_capacity(space.dim());
            let mut values = Vec::with_capacity(space.dim());
            for eta in space.iter() {
                let w = (-mu * eta.iter().sum::<i64>() as f64).exp();
                weights.push(w);
                values.push(w * op.diag_at(&eta).re);
            }
            let z = pairwise_sum(&weights);
            let value = pairwise_sum(&values) / z;
            let per_site = 1.0 - (-mu * (space.n_max() + 1) as f64).exp();
            let truncation_loss = 1.0 - per_site.powi(space.n_sites() as i32);
            Ok(Expectation {
                value,
                stderr: 0.0,
                truncation_loss,
                n_samples: space.dim(),
            })
        }
        ExpectationMode::MonteCarlo { samples, seed } => {
            if samples == 0 {
                return Err(Error::config("Monte Carlo expectation needs samples"));
            }
            let sampler = GibbsSampler::new(mu, n_max, seed)?;
            let n_sites = op.n_sites();
            let values: Vec<f64> = (0..samples)
                .into_par_iter()
                .map(|s| {
                    let mut rng = sampler.rng(s as u64);
                    let eta = sampler.sample_config(n_sites, &mut rng);
                    op.diag_at(&eta).re
                })
                .collect();
            let (value, stderr) = mean_and_stderr(&values);
            Ok(Expectation {
                value,
                stderr,
                truncation_loss: sampler.cap_weight(),
                n_samples: samples,
            })
        }
    }
}

/// Nested exact summation of a diagonal observable over its window, all
/// other sites integrating out exactly. The cap is chosen from the
/// tolerance target; the reported loss is the window-tail mass bound.
fn exact_diagonal_expectation(
    op: &LocalOp,
    mu: f64,
    n_max: i64,
    window: &[usize],
) -> Result<Expectation> {
    // Constants and empty windows: the expectation is the value itself.
    if window.is_empty() {
        let value = op.diag_at(&vec![0; op.n_sites()]).re;
        return Ok(Expectation {
            value,
            stderr: 0.0,
            truncation_loss: 0.0,
            n_samples: 1,
        });
    }
    let cap = n_max.max(recommended_cap(mu) * 4);
    let evals = ((cap + 1) as f64).powi(window.len() as i32);
    if evals > EXACT_DIAGONAL_MAX_EVALS as f64 {
        return Err(Error::capacity(format!(
            "exact diagonal expectation needs {evals:.1e} evaluations over a \
             {}-site window, budget is {EXACT_DIAGONAL_MAX_EVALS}",
            window.len()
        )));
    }
    let norm = -(-mu).exp_m1(); // untruncated per-site normalization
    let mut eta = vec![0i64; op.n_sites()];
    let mut acc: Vec<f64> = Vec::new();
    let mut digits = vec![0i64; window.len()];
    loop {
        for (d, &site) in digits.iter().zip(window) {
            eta[site] = *d;
        }
        let weight: f64 = digits
            .iter()
            .map(|&n| norm * (-mu * n as f64).exp())
            .product();
        acc.push(weight * op.diag_at(&eta).re);
        // Odometer.
        let mut k = 0;
        loop {
            if k == digits.len() {
                break;
            }
            if digits[k] < cap {
                digits[k] += 1;
                break;
            }
            digits[k] = 0;
            k += 1;
        }
        if k == digits.len() {
            break;
        }
    }
    let cap_mass = (-mu * (cap + 1) as f64).exp();
    let tail = 1.0 - (1.0 - cap_mass).powi(window.len() as i32);
    Ok(Expectation {
        value: pairwise_sum(&acc),
        stderr: 0.0,
        truncation_loss: tail,
        n_samples: acc.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diagonal::DiagonalFn;
    use crate::lattice::ChainGeometry;
    use approx::assert_abs_diff_eq;
    use num_complex::Complex64;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn number_site(n_sites: usize, x: usize) -> LocalOp {
        LocalOp::from_terms(
            n_sites,
            1.0,
            vec![(
                vec![0i16; n_sites],
                DiagonalFn::on_site(x, |n| n as f64),
            )],
        )
    }

    #[test]
    fn site_law_is_normalized_and_truncated_geometric() {
        let sampler = GibbsSampler::new(0.35, 25, 7).unwrap();
        let total: f64 = (0..=25).map(|n| sampler.site_probability(n)).sum();
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-12);
        let ratio = sampler.site_probability(5) / sampler.site_probability(4);
        assert_abs_diff_eq!(ratio, (-0.35f64).exp(), epsilon = 1e-12);
        assert_eq!(sampler.site_probability(26), 0.0);
        assert_eq!(sampler.site_probability(-1), 0.0);
    }

    #[test]
    fn geometric_mean_at_log_two_is_one() {
        // mu = ln 2 gives mean 1/(2-1) = 1 for the untruncated law.
        assert_abs_diff_eq!(unbounded_mean(2.0f64.ln()), 1.0, epsilon = 1e-12);
        // A cap of 40 leaves a tail below 1e-12.
        let sampler = GibbsSampler::new(2.0f64.ln(), 40, 3).unwrap();
        assert_abs_diff_eq!(sampler.mean_occupancy(), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn sampler_mean_matches_closed_form_within_three_sigma() {
        let mu = 0.1;
        let sampler = GibbsSampler::new(mu, 200, 11).unwrap();
        let samples = 100_000usize;
        let values: Vec<f64> = (0..samples)
            .map(|s| {
                let mut rng = sampler.rng(s as u64);
                sampler.sample_site(&mut rng) as f64
            })
            .collect();
        let (mean, stderr) = mean_and_stderr(&values);
        // 1/(e^0.1 - 1) = 9.5083…; cap 200 leaves a ~2e-9 tail.
        let exact = sampler.mean_occupancy();
        assert_abs_diff_eq!(exact, unbounded_mean(mu), epsilon = 1e-6);
        assert!(
            (mean - exact).abs() <= 3.0 * stderr,
            "mean {mean} vs exact {exact} with stderr {stderr}"
        );
        // Occupancy scales like 1/mu.
        assert!(exact > 0.8 / mu && exact < 1.2 / mu);
    }

    #[test]
    fn histogram_passes_chi_square_against_the_exact_law() {
        let sampler = GibbsSampler::new(0.4, 30, 5).unwrap();
        let counts = sampler.histogram(100_000);
        let (statistic, dof) = chi_square_statistic(&sampler, &counts, 5.0).unwrap();
        let dist = ChiSquared::new(dof as f64).unwrap();
        let p = 1.0 - dist.cdf(statistic);
        assert!(p > 0.01, "chi-square p-value {p} (statistic {statistic}, dof {dof})");
    }

    #[test]
    fn sampling_is_deterministic_per_stream() {
        let sampler = GibbsSampler::new(0.3, 40, 17).unwrap();
        let mut a = sampler.rng(5);
        let mut b = sampler.rng(5);
        assert_eq!(sampler.sample_config(6, &mut a), sampler.sample_config(6, &mut b));
        let mut c = sampler.rng(6);
        // Different streams give different draws (overwhelmingly).
        let x: Vec<Config> = (0..4).map(|_| sampler.sample_config(6, &mut a)).collect();
        let y: Vec<Config> = (0..4).map(|_| sampler.sample_config(6, &mut c)).collect();
        assert_ne!(x, y);
    }

    #[test]
    fn identity_averages_to_one_in_all_modes() {
        let op = LocalOp::identity(4, 1.0);
        let exact = expectation(&op, 0.5, 30, ExpectationMode::ExactDiagonal).unwrap();
        assert_eq!(exact.value, 1.0);
        let geometry = ChainGeometry::new_any(4).unwrap();
        let space = TruncatedFockSpace::new(geometry, 5, 10_000).unwrap();
        let trace = expectation(&op, 0.5, 30, ExpectationMode::TruncatedTrace(&space)).unwrap();
        assert_abs_diff_eq!(trace.value, 1.0, epsilon = 1e-12);
        let mc = expectation(
            &op,
            0.5,
            30,
            ExpectationMode::MonteCarlo { samples: 50, seed: 1 },
        )
        .unwrap();
        assert_eq!(mc.value, 1.0);
        assert_eq!(mc.stderr, 0.0);
    }

    #[test]
    fn number_operator_expectation_matches_geometric_series() {
        let op = number_site(3, 1);
        let exact = expectation(&op, 2.0f64.ln(), 40, ExpectationMode::ExactDiagonal).unwrap();
        assert_abs_diff_eq!(exact.value, 1.0, epsilon = 1e-9);
        assert!(exact.truncation_loss < 1e-9);
        // The truncated trace agrees once the space covers the mass.
        let geometry = ChainGeometry::new_any(3).unwrap();
        let space = TruncatedFockSpace::new(geometry, 25, 20_000).unwrap();
        let trace = expectation(
            &op,
            2.0f64.ln(),
            25,
            ExpectationMode::TruncatedTrace(&space),
        )
        .unwrap();
        assert_abs_diff_eq!(trace.value, 1.0, epsilon = 1e-6);
    }

    #[test]
    fn interaction_energy_matches_per_site_second_moment() {
        // With g = 0 the Hamiltonian is a sum of per-site diagonal terms,
        // so its average is n_sites times the per-site average.
        let n = 3;
        let mu = 0.7;
        let h = LocalOp::bose_hubbard(n, 0.0);
        let got = expectation(&h, mu, 80, ExpectationMode::ExactDiagonal).unwrap();
        let single = LocalOp::bose_hubbard(1, 0.0);
        let per_site = expectation(&single, mu, 80, ExpectationMode::ExactDiagonal).unwrap();
        assert_abs_diff_eq!(got.value, n as f64 * per_site.value, epsilon = 1e-10);
        // Cross-check against a directly assembled series for the per-site law.
        let q = (-mu).exp();
        let z: f64 = (0..200).map(|k| q.powi(k)).sum();
        let brute: f64 = (0..200)
            .map(|k| (k as f64) * (k as f64) * q.powi(k))
            .sum::<f64>()
            / z;
        assert_abs_diff_eq!(per_site.value, brute, epsilon = 1e-8);
    }

    #[test]
    fn exact_mode_rejects_off_diagonal_observables() {
        let op = LocalOp::hopping(3, 1.0, 0.5);
        let err = expectation(&op, 0.5, 20, ExpectationMode::ExactDiagonal);
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn exact_mode_budget_is_enforced() {
        // A diagonal observable reading a 6-site window at small mu blows
        // past the evaluation budget.
        let window: Vec<usize> = (0..6).collect();
        let f = DiagonalFn::from_fn(window, |eta| {
            Complex64::new(eta.iter().sum::<i64>() as f64, 0.0)
        });
        let op = LocalOp::from_terms(6, 1.0, vec![(vec![0i16; 6], f)]);
        let err = expectation(&op, 0.05, 400, ExpectationMode::ExactDiagonal);
        assert!(matches!(err, Err(Error::Capacity(_))));
    }

    #[test]
    fn cap_rule_keeps_tail_small() {
        for &mu in &[0.1, 0.3, 0.8, 2.0] {
            let cap = recommended_cap(mu);
            let sampler = GibbsSampler::new(mu, cap, 0).unwrap();
            assert!(sampler.cap_weight() < (-3.0f64).exp());
        }
    }
}
