//! Unbiased stochastic truncation of infinite series.
//!
//! Both truncation schemes estimate a convergent sum `S = sum_j phi_j` from a
//! finite, random number of term evaluations while keeping `E[S_hat] = S`:
//!
//! * Russian roulette: walk the series with per-step continuation
//!   probabilities `q_j`; stop at `tau = inf{k >= 1 : U_k >= q_k}` and return
//!   `phi_0 + sum_{j=1}^{tau-1} phi_j / P_j`, where `P_j = prod_{l<=j} q_l` is
//!   the probability that term `j` survives to be included.
//! * Single-term weighted truncation: draw one index `k ~ q_k` and return
//!   `phi_k / q_k`.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::logspace::KahanSum;
use crate::rngstream::Rng;

/// Default maximum number of weighted terms before a forced (biased) stop.
pub const DEFAULT_SAFETY_CAP: usize = 10_000;

/// Continuation probabilities for the roulette stopping time.
#[derive(Debug, Clone, PartialEq)]
pub enum ScheduleKind {
    /// One continuation probability used at every step.
    ConstantQ,
    /// Explicit per-step probabilities; the last entry repeats beyond the list.
    PerStepQ,
}

#[derive(Debug, Clone)]
pub struct RouletteSchedule {
    pub kind: ScheduleKind,
    q: Vec<f64>,
    pub safety_cap: usize,
}

impl RouletteSchedule {
    pub fn constant(q: f64) -> Result<Self> {
        Self::validate_q(q)?;
        Ok(RouletteSchedule { kind: ScheduleKind::ConstantQ, q: vec![q], safety_cap: DEFAULT_SAFETY_CAP })
    }

    /// Per-step probabilities `q_1, q_2, ...`; the last one repeats forever.
    pub fn per_step(q: Vec<f64>) -> Result<Self> {
        if q.is_empty() {
            return Err(Error::InvalidSchedule("per-step schedule needs at least one q".into()));
        }
        for &v in &q {
            Self::validate_q(v)?;
        }
        Ok(RouletteSchedule { kind: ScheduleKind::PerStepQ, q, safety_cap: DEFAULT_SAFETY_CAP })
    }

    pub fn with_safety_cap(mut self, cap: usize) -> Result<Self> {
        if cap == 0 {
            return Err(Error::InvalidSchedule("safety_cap must be >= 1".into()));
        }
        self.safety_cap = cap;
        Ok(self)
    }

    fn validate_q(q: f64) -> Result<()> {
        if !(q > 0.0 && q <= 1.0) {
            return Err(Error::InvalidSchedule(format!("q = {q} outside (0, 1]")));
        }
        Ok(())
    }

    /// Continuation probability `q_j` for step `j >= 1`.
    pub fn continuation(&self, j: usize) -> f64 {
        debug_assert!(j >= 1);
        self.q[(j - 1).min(self.q.len() - 1)]
    }

    /// Survival probability `p_n = P(tau >= n) = prod_{j=1}^{n-1} q_j` (so `p_1 = 1`).
    pub fn survival(&self, n: usize) -> f64 {
        (1..n).map(|j| self.continuation(j)).product()
    }
}

/// Result of one stochastic truncation.
#[derive(Debug, Clone, PartialEq)]
pub struct TruncationOutcome {
    /// The estimate `S_hat`.
    pub value: f64,
    /// Weighted terms consumed beyond `phi_0` (roulette: `tau - 1`;
    /// single-term: the sampled index `k`).
    pub terms_used: usize,
    /// True when the safety cap forced the stop; the result is then biased.
    pub capped: bool,
    /// Raw terms, retained only when requested (diagnostics).
    pub term_values: Option<Vec<f64>>,
}

/// A sequential stream of series terms `phi_0, phi_1, ...`.
///
/// `next_term` is called with strictly increasing indices starting at 0 and
/// may consume fresh randomness; repeated evaluation from the same RNG state
/// must be deterministic.
pub trait TermStream {
    fn next_term(&mut self, index: usize, rng: &mut Rng) -> Result<f64>;
}

impl<F> TermStream for F
where
    F: FnMut(usize, &mut Rng) -> f64,
{
    fn next_term(&mut self, index: usize, rng: &mut Rng) -> Result<f64> {
        Ok(self(index, rng))
    }
}

/// Russian roulette truncation. `E[S_hat] = sum_j phi_j` whenever the term
/// expectations are the true series terms.
pub fn roulette_truncate<S: TermStream>(
    stream: &mut S,
    schedule: &RouletteSchedule,
    rng: &mut Rng,
) -> Result<TruncationOutcome> {
    roulette_truncate_impl(stream, schedule, rng, false)
}

/// As [`roulette_truncate`] but retains the raw terms for diagnostics.
pub fn roulette_truncate_traced<S: TermStream>(
    stream: &mut S,
    schedule: &RouletteSchedule,
    rng: &mut Rng,
) -> Result<TruncationOutcome> {
    roulette_truncate_impl(stream, schedule, rng, true)
}

fn roulette_truncate_impl<S: TermStream>(
    stream: &mut S,
    schedule: &RouletteSchedule,
    rng: &mut Rng,
    trace: bool,
) -> Result<TruncationOutcome> {
    let phi0 = stream.next_term(0, rng)?;
    let mut sum = KahanSum::new();
    sum.add(phi0);
    let mut terms = if trace { Some(vec![phi0]) } else { None };

    let mut inclusion = 1.0; // P_j = prod_{l<=j} q_l
    let mut j = 0usize;
    let mut capped = false;
    loop {
        let q = schedule.continuation(j + 1);
        let u: f64 = rng.gen();
        if u >= q {
            break; // tau = j + 1
        }
        if j + 1 >= schedule.safety_cap {
            capped = true;
            break;
        }
        j += 1;
        inclusion *= q;
        let phi = stream.next_term(j, rng)?;
        if let Some(t) = terms.as_mut() {
            t.push(phi);
        }
        let weighted = phi / inclusion;
        if !weighted.is_finite() {
            return Err(Error::EstimatorOverflow { index: j, survival: inclusion });
        }
        sum.add(weighted);
    }

    let value = sum.value();
    if !value.is_finite() {
        return Err(Error::EstimatorOverflow { index: j, survival: inclusion });
    }
    Ok(TruncationOutcome { value, terms_used: j, capped, term_values: terms })
}

/// Discrete index distributions for single-term weighted truncation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum IndexDistribution {
    /// `q_k = (1 - p) p^k` on `k >= 0`.
    Geometric { p: f64 },
    /// `q_k = lambda^k exp(-lambda) / k!` on `k >= 0`.
    Poisson { lambda: f64 },
    /// Poisson conditioned on `k >= 1`: `q_k = lambda^k / (k! (exp(lambda) - 1))`.
    ZeroTruncatedPoisson { lambda: f64 },
}

impl IndexDistribution {
    pub fn validate(&self) -> Result<()> {
        match *self {
            IndexDistribution::Geometric { p } => {
                if !(p > 0.0 && p < 1.0) {
                    return Err(Error::InvalidSchedule(format!("geometric p = {p} outside (0,1)")));
                }
            }
            IndexDistribution::Poisson { lambda } | IndexDistribution::ZeroTruncatedPoisson { lambda } => {
                if !(lambda > 0.0 && lambda.is_finite()) {
                    return Err(Error::InvalidSchedule(format!("lambda = {lambda} not positive")));
                }
            }
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut Rng) -> usize {
        match *self {
            IndexDistribution::Geometric { p } => {
                // inverse CDF: k = floor(ln U / ln p)
                let u: f64 = rng.gen();
                (u.ln() / p.ln()).floor() as usize
            }
            IndexDistribution::Poisson { lambda } => sample_poisson(lambda, rng),
            IndexDistribution::ZeroTruncatedPoisson { lambda } => loop {
                let k = sample_poisson(lambda, rng);
                if k >= 1 {
                    return k;
                }
            },
        }
    }

    pub fn pmf(&self, k: usize) -> f64 {
        match *self {
            IndexDistribution::Geometric { p } => (1.0 - p) * p.powi(k as i32),
            IndexDistribution::Poisson { lambda } => {
                (k as f64 * lambda.ln() - lambda - ln_factorial(k)).exp()
            }
            IndexDistribution::ZeroTruncatedPoisson { lambda } => {
                if k == 0 {
                    0.0
                } else {
                    (k as f64 * lambda.ln() - ln_factorial(k)).exp() / lambda.exp_m1()
                }
            }
        }
    }
}

fn sample_poisson(lambda: f64, rng: &mut Rng) -> usize {
    // Knuth's product method; fine for the small lambdas used here.
    let l = (-lambda).exp();
    let mut k = 0usize;
    let mut p = 1.0;
    loop {
        p *= rng.gen::<f64>();
        if p <= l {
            return k;
        }
        k += 1;
    }
}

pub fn ln_factorial(k: usize) -> f64 {
    (1..=k).map(|i| (i as f64).ln()).sum()
}

/// Single-term weighted truncation: draw `k ~ q_k`, return `phi_k / q_k`.
pub fn single_term_truncate<S: TermStream>(
    stream: &mut S,
    index_probs: IndexDistribution,
    rng: &mut Rng,
) -> Result<TruncationOutcome> {
    index_probs.validate()?;
    let k = index_probs.sample(rng);
    let qk = index_probs.pmf(k);
    if qk <= 0.0 {
        return Err(Error::InvalidSchedule(format!("sampled index {k} has zero probability")));
    }
    // streams are sequential: walk the terms up to the sampled index
    let mut phi_k = 0.0;
    for j in 0..=k {
        phi_k = stream.next_term(j, rng)?;
    }
    let value = phi_k / qk;
    if !value.is_finite() {
        return Err(Error::EstimatorOverflow { index: k, survival: qk });
    }
    Ok(TruncationOutcome { value, terms_used: k, capped: false, term_values: None })
}

/// Expected number of steps `E[tau]` truncated at `horizon`:
/// the partial sum of survival probabilities `sum_{n=1}^{horizon} p_n`.
pub fn expected_cost(schedule: &RouletteSchedule, horizon: usize) -> f64 {
    let mut total = 0.0;
    let mut p = 1.0;
    for n in 1..=horizon {
        total += p;
        p *= schedule.continuation(n);
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rngstream::substream;
    use approx::assert_relative_eq;

    #[test]
    fn zero_tail_is_exact() {
        let mut stream = |j: usize, _: &mut Rng| if j == 0 { 1.0 } else { 0.0 };
        let schedule = RouletteSchedule::constant(0.9).unwrap();
        for i in 0..32 {
            let mut rng = substream(7, "zero-tail", i);
            let out = roulette_truncate(&mut stream, &schedule, &mut rng).unwrap();
            assert_eq!(out.value, 1.0);
            assert!(!out.capped);
        }
    }

    #[test]
    fn single_term_zero_variance_when_weights_match_terms() {
        // phi_k = 0.5^k, q_k = (1-p) p^k with p = 0.5: estimate is 2.0 for every k
        let dist = IndexDistribution::Geometric { p: 0.5 };
        let mut stream = |j: usize, _: &mut Rng| 0.5f64.powi(j as i32);
        for i in 0..64 {
            let mut rng = substream(11, "zero-var", i);
            let out = single_term_truncate(&mut stream, dist, &mut rng).unwrap();
            assert_relative_eq!(out.value, 2.0, max_relative = 1e-12);
        }
    }

    #[test]
    fn single_term_two_point_check() {
        // phi_0 = 3 and zero tail; under Geometric(p) with q_0 = 1 - p = 0.25,
        // a draw of k = 0 must return 12.0 and any other k returns 0.
        let dist = IndexDistribution::Geometric { p: 0.75 };
        let mut stream = |j: usize, _: &mut Rng| if j == 0 { 3.0 } else { 0.0 };
        let mut sum = 0.0;
        let n = 200_000;
        for i in 0..n {
            let mut rng = substream(13, "two-point", i);
            let out = single_term_truncate(&mut stream, dist, &mut rng).unwrap();
            if out.terms_used == 0 {
                assert_relative_eq!(out.value, 12.0, max_relative = 1e-12);
            } else {
                assert_eq!(out.value, 0.0);
            }
            sum += out.value;
        }
        // mean over draws -> 3.0; SE = sqrt(q0 * 12^2 - 9)/sqrt(n) ~ 0.0164
        let mean = sum / n as f64;
        assert!((mean - 3.0).abs() < 3.0 * 0.0164, "mean {mean}");
    }

    #[test]
    fn expected_cost_geometric() {
        let s = RouletteSchedule::constant(0.5).unwrap();
        let expect = 2.0 - 2f64.powi(-49);
        assert!((expected_cost(&s, 50) - expect).abs() < 1e-12);
    }

    #[test]
    fn expected_cost_near_certain_continuation() {
        let s = RouletteSchedule::constant(1.0 - 1e-12).unwrap();
        assert_relative_eq!(expected_cost(&s, 10), 10.0, epsilon = 1e-9);
    }

    #[test]
    fn expected_cost_per_step_hand_recurrence() {
        // q = (0.9, 0.5, 0.1), last repeats: p = 1, 0.9, 0.45, 0.045, 0.0045, ...
        let s = RouletteSchedule::per_step(vec![0.9, 0.5, 0.1]).unwrap();
        let mut expect = 1.0 + 0.9 + 0.45;
        let mut p = 0.045;
        for _ in 0..7 {
            expect += p;
            p *= 0.1;
        }
        assert_relative_eq!(expected_cost(&s, 10), expect, epsilon = 1e-14);
    }

    #[test]
    fn expected_cost_monotone_in_horizon() {
        let s = RouletteSchedule::per_step(vec![0.7, 0.3]).unwrap();
        let mut prev = 0.0;
        for h in 1..30 {
            let c = expected_cost(&s, h);
            assert!(c >= prev);
            prev = c;
        }
    }

    #[test]
    fn cap_is_observable() {
        let mut stream = |_: usize, _: &mut Rng| 1e-3;
        let schedule = RouletteSchedule::constant(1.0).unwrap().with_safety_cap(5).unwrap();
        let mut rng = substream(3, "cap", 0);
        let out = roulette_truncate(&mut stream, &schedule, &mut rng).unwrap();
        assert!(out.capped);
        assert!(out.terms_used < 5);
    }

    #[test]
    fn overflow_is_an_error_not_a_saturation() {
        let mut stream = |j: usize, _: &mut Rng| if j == 0 { 0.0 } else { f64::MAX };
        let schedule = RouletteSchedule::constant(0.999).unwrap();
        // find a seed whose first roulette step continues
        let mut rng = substream(5, "overflow", 0);
        let mut failed = false;
        for _ in 0..64 {
            match roulette_truncate(&mut stream, &schedule, &mut rng) {
                Err(Error::EstimatorOverflow { .. }) => {
                    failed = true;
                    break;
                }
                Ok(out) => assert_eq!(out.terms_used, 0),
                Err(e) => panic!("unexpected error {e}"),
            }
        }
        assert!(failed);
    }

    #[test]
    fn determinism_bit_identical() {
        let schedule = RouletteSchedule::constant(0.6).unwrap();
        let mut s1 = |j: usize, rng: &mut Rng| 0.7f64.powi(j as i32) * rng.gen::<f64>();
        let mut s2 = |j: usize, rng: &mut Rng| 0.7f64.powi(j as i32) * rng.gen::<f64>();
        let mut r1 = substream(99, "det", 0);
        let mut r2 = substream(99, "det", 0);
        let a = roulette_truncate(&mut s1, &schedule, &mut r1).unwrap();
        let b = roulette_truncate(&mut s2, &schedule, &mut r2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_truncated_poisson_pmf_sums_to_one() {
        let d = IndexDistribution::ZeroTruncatedPoisson { lambda: 1.0 };
        assert_eq!(d.pmf(0), 0.0);
        let total: f64 = (1..40).map(|k| d.pmf(k)).sum();
        assert_relative_eq!(total, 1.0, epsilon = 1e-12);
    }
}
