//! Signed unbiased likelihood estimators.
//!
//! A likelihood `p(y|theta) = f(y;theta) / Z(theta)` with intractable `Z` is
//! estimated from i.i.d. unbiased draws `Z_hat_i` of `Z` by expanding the
//! reciprocal (geometric series) or an exponential auxiliary representation
//! into an infinite series, then truncating the series unbiasedly with the
//! machinery in [`crate::truncation`]. The result may be negative; it is
//! carried as a [`SignedValue`] and the sign problem is handled downstream
//! by the chain and its sign-corrected summaries.

use crate::error::{Error, Result};
use crate::logspace::SignedValue;
use crate::rngstream::Rng;
use crate::truncation::{
    roulette_truncate, single_term_truncate, IndexDistribution, RouletteSchedule, TermStream,
    TruncationOutcome,
};

/// A source of i.i.d. unbiased partition-function draws for a fixed
/// parameter point, in log space.
pub trait NormalizerSource {
    fn draw_log_z(&self, rng: &mut Rng) -> Result<f64>;
}

impl<F> NormalizerSource for F
where
    F: Fn(&mut Rng) -> Result<f64>,
{
    fn draw_log_z(&self, rng: &mut Rng) -> Result<f64> {
        self(rng)
    }
}

/// How the infinite series is truncated.
#[derive(Debug, Clone)]
pub enum TruncationPolicy {
    /// Russian roulette over the whole series.
    Roulette(RouletteSchedule),
    /// `1 +` a single importance-weighted tail term `phi_k / q_k` with
    /// `k ~ q` supported on `k >= 1`. The leading 1 is kept deterministic so
    /// small correction terms cannot make the estimate wildly negative.
    SingleTermTail(IndexDistribution),
}

impl TruncationPolicy {
    fn apply<S: TermStream>(&self, stream: &mut S, rng: &mut Rng) -> Result<TruncationOutcome> {
        match self {
            TruncationPolicy::Roulette(schedule) => roulette_truncate(stream, schedule, rng),
            TruncationPolicy::SingleTermTail(dist) => {
                if dist.pmf(0) > 0.0 {
                    return Err(Error::InvalidSchedule(
                        "single-term tail truncation needs an index distribution on k >= 1 \
                         (use a zero-truncated one)"
                            .into(),
                    ));
                }
                let mut out = single_term_truncate(stream, *dist, rng)?;
                out.value += 1.0;
                Ok(out)
            }
        }
    }
}

/// Cost and diagnostic counters for one estimate.
#[derive(Debug, Clone, Copy, Default)]
pub struct EstimateStats {
    /// Series terms consumed beyond the leading one.
    pub terms_used: usize,
    /// Partition-function draws consumed.
    pub n_normalizer_draws: usize,
    /// A truncation safety cap fired (estimate biased; surfaced, not hidden).
    pub capped: bool,
}

/// Tilting of the series: approximate normaliser `Z_tilde`, multiplier `c`,
/// and the optional exponent split for scaling-and-squaring.
#[derive(Debug, Clone, Copy)]
pub struct TiltingPlan {
    /// `log Z_tilde(theta)`.
    pub log_z_tilde: f64,
    /// Series multiplier `c(theta)` in `(0, 1]` under the pilot rule.
    pub c: f64,
    /// Number of factors the exponent is split into (1 = no splitting).
    pub exponent_split: usize,
    /// Log-space shift `U` used with splitting.
    pub shift: f64,
    /// Pilot estimate of `kappa = 1 - c * mean(Z_hat) / Z_tilde`.
    pub kappa_hat: f64,
    /// Pilot `E[Z_hat^2] / E[Z_hat]^2`, kept so the convergence condition
    /// `c < 2 Z_tilde E[Z_hat] / E[Z_hat^2]` can be re-checked on fresh draws.
    pub moment_ratio: f64,
}

impl TiltingPlan {
    /// A plan that trusts `log_z` exactly: `c = 1`, no splitting.
    pub fn exact(log_z: f64) -> Self {
        TiltingPlan {
            log_z_tilde: log_z,
            c: 1.0,
            exponent_split: 1,
            shift: 0.0,
            kappa_hat: 0.0,
            moment_ratio: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.log_z_tilde.is_finite() || !(self.c > 0.0) || self.exponent_split == 0 {
            return Err(Error::InvalidParameter(format!(
                "invalid tilting plan: log_z_tilde={}, c={}, exponent_split={}",
                self.log_z_tilde, self.c, self.exponent_split
            )));
        }
        Ok(())
    }
}

/// Builds a [`TiltingPlan`] from a pilot run of the source.
///
/// `Z_tilde` is the pilot mean. `c` is the largest value in `(0, 1]` whose
/// pilot per-term decay rate (root mean square of the series factor) stays
/// at or below `kappa_target`, within a safety margin of the sufficient
/// condition `c < 2 Z_tilde E[Z_hat] / E[Z_hat^2]` evaluated on pilot
/// moments. With `Z_tilde` the pilot mean this gives `kappa_hat = 1 - c`,
/// which meets `kappa_target` whenever the source noise allows.
pub fn choose_tilting<S: NormalizerSource + ?Sized>(
    source: &S,
    pilot_draws: usize,
    kappa_target: f64,
    split: bool,
    rng: &mut Rng,
) -> Result<TiltingPlan> {
    if pilot_draws < 2 {
        return Err(Error::InvalidParameter("choose_tilting needs pilot_draws >= 2".into()));
    }
    if !(kappa_target > 0.0 && kappa_target < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "kappa_target must lie in (0, 1), got {kappa_target}"
        )));
    }
    let mut logs = Vec::with_capacity(pilot_draws);
    for _ in 0..pilot_draws {
        logs.push(source.draw_log_z(rng)?);
    }
    let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY || m.is_nan() {
        return Err(Error::DegenerateSource("pilot draws are all zero or NaN".into()));
    }
    // moments on the scale-free shifted draws w_i = Z_hat_i / max
    let mut mean_w = 0.0;
    let mut meansq_w = 0.0;
    for &l in &logs {
        let w = (l - m).exp();
        mean_w += w;
        meansq_w += w * w;
    }
    mean_w /= pilot_draws as f64;
    meansq_w /= pilot_draws as f64;
    if mean_w == 0.0 {
        return Err(Error::DegenerateSource("pilot draws underflowed to zero".into()));
    }
    let log_z_tilde = m + mean_w.ln();
    let moment_ratio = meansq_w / (mean_w * mean_w);
    plan_from_moments(log_z_tilde, moment_ratio, kappa_target, split)
}

/// Builds a plan from already-estimated moments (`Z_tilde` and
/// `E[Z_hat^2]/E[Z_hat]^2` with `E[Z_hat]` taken equal to `Z_tilde`).
///
/// The series factor is `1 - c Z_hat / Z_tilde` with second moment
/// `r(c) = 1 - 2c + c^2 moment_ratio`; `r(c)` is the squared per-term decay
/// rate, so `c` is the largest value with `r(c) <= kappa_target^2` (sign
/// stability and fast decay), subject to the sufficient condition
/// `c < 2 / moment_ratio` (finite expectation). For sources too noisy to
/// reach the target decay, `c = 1/moment_ratio` minimises `r(c)`; the mean
/// factor `1 - c` then exceeds `kappa_target` and the plan records that
/// honestly rather than violating the convergence condition.
pub fn plan_from_moments(
    log_z_tilde: f64,
    moment_ratio: f64,
    kappa_target: f64,
    split: bool,
) -> Result<TiltingPlan> {
    if !(moment_ratio >= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "moment_ratio must be >= 1 (Jensen), got {moment_ratio}"
        )));
    }
    let disc = 1.0 - moment_ratio * (1.0 - kappa_target * kappa_target);
    let c = if disc >= 0.0 {
        ((1.0 + disc.sqrt()) / moment_ratio).min(0.95 * 2.0 / moment_ratio).min(1.0)
    } else {
        1.0 / moment_ratio
    };
    let kappa_hat = 1.0 - c;
    let (exponent_split, shift) = if split {
        (log_z_tilde.abs().ceil().max(1.0) as usize, log_z_tilde)
    } else {
        (1, 0.0)
    };
    let plan = TiltingPlan { log_z_tilde, c, exponent_split, shift, kappa_hat, moment_ratio };
    plan.validate()?;
    Ok(plan)
}

struct GeometricStream<'a, S: NormalizerSource + ?Sized> {
    source: &'a S,
    log_c: f64,
    log_z_tilde: f64,
    prod: f64,
    draws: usize,
}

impl<S: NormalizerSource + ?Sized> TermStream for GeometricStream<'_, S> {
    fn next_term(&mut self, index: usize, rng: &mut Rng) -> Result<f64> {
        if index == 0 {
            self.prod = 1.0;
            return Ok(1.0);
        }
        let lz = self.source.draw_log_z(rng)?;
        self.draws += 1;
        // factor 1 - c Z_hat / Z_tilde, O(1) when the tilting is sane
        let x = self.log_c + lz - self.log_z_tilde;
        self.prod *= -x.exp_m1();
        Ok(self.prod)
    }
}

/// Geometric-series signed estimate of the likelihood `f(y;theta)/Z(theta)`:
/// `[exp(unnorm_loglik) c / Z_tilde] * [1 + sum_n prod_{i<=n}(1 - c Z_hat_i / Z_tilde)]`.
///
/// Unbiased over all randomness whenever `|kappa| < 1`; the huge prefactor
/// stays in log space, only the O(1) series lives in linear arithmetic.
pub fn geometric_estimate<S: NormalizerSource + ?Sized>(
    unnorm_loglik: f64,
    plan: &TiltingPlan,
    source: &S,
    policy: &TruncationPolicy,
    rng: &mut Rng,
) -> Result<(SignedValue, EstimateStats)> {
    plan.validate()?;
    let mut stream = GeometricStream {
        source,
        log_c: plan.c.ln(),
        log_z_tilde: plan.log_z_tilde,
        prod: 1.0,
        draws: 0,
    };
    let out = policy.apply(&mut stream, rng)?;
    let value = SignedValue::from_log(unnorm_loglik + plan.c.ln() - plan.log_z_tilde)
        .mul(SignedValue::from_real(out.value));
    Ok((
        value,
        EstimateStats {
            terms_used: out.terms_used,
            n_normalizer_draws: stream.draws,
            capped: out.capped,
        },
    ))
}

/// The auxiliary variable `nu ~ Exponential(Z(theta))`, held in log space
/// because realistic rates `Z_tilde` overflow linear `f64`.
#[derive(Debug, Clone, Copy)]
pub struct ExponentialAuxiliary {
    pub log_nu: f64,
}

impl ExponentialAuxiliary {
    /// Draws `nu ~ Exponential(rate e^{log_rate})` via inversion.
    pub fn sample(log_rate: f64, rng: &mut Rng) -> Self {
        use rand::Rng as _;
        let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        ExponentialAuxiliary { log_nu: (-u.ln()).ln() - log_rate }
    }

    /// Log density of this `nu` under `Exponential(rate e^{log_rate})`.
    pub fn log_density(&self, log_rate: f64) -> f64 {
        log_rate - (self.log_nu + log_rate).exp()
    }
}

struct ExponentialStream<'a, S: NormalizerSource + ?Sized> {
    source: &'a S,
    log_z_tilde: f64,
    /// `nu * Z_tilde`, O(1) when `nu` is proposed at rate `Z_tilde`.
    nu_z_tilde: f64,
    prod: f64,
    draws: usize,
}

impl<S: NormalizerSource + ?Sized> TermStream for ExponentialStream<'_, S> {
    fn next_term(&mut self, index: usize, rng: &mut Rng) -> Result<f64> {
        if index == 0 {
            self.prod = 1.0;
            return Ok(1.0);
        }
        let lz = self.source.draw_log_z(rng)?;
        self.draws += 1;
        // term ratio: nu (Z_tilde - Z_hat_i) / n = nu Z_tilde (1 - Z_hat_i/Z_tilde) / n
        let factor = self.nu_z_tilde * (-(lz - self.log_z_tilde).exp_m1()) / index as f64;
        self.prod *= factor;
        Ok(self.prod)
    }
}

/// The Maclaurin correction series of the exponential auxiliary method:
/// `1 + sum_n (nu^n / n!) prod_{i<=n} (Z_tilde - Z_hat_i)`, truncated
/// unbiasedly. Factorial growth keeps the full series absolutely convergent
/// for any `nu`.
pub fn exponential_series<S: NormalizerSource + ?Sized>(
    aux: ExponentialAuxiliary,
    plan: &TiltingPlan,
    source: &S,
    policy: &TruncationPolicy,
    rng: &mut Rng,
) -> Result<(SignedValue, EstimateStats)> {
    plan.validate()?;
    let nu_z_tilde = (aux.log_nu + plan.log_z_tilde).exp();
    if !nu_z_tilde.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "nu * Z_tilde overflows: log_nu = {}, log_z_tilde = {}",
            aux.log_nu, plan.log_z_tilde
        )));
    }
    let mut stream = ExponentialStream {
        source,
        log_z_tilde: plan.log_z_tilde,
        nu_z_tilde,
        prod: 1.0,
        draws: 0,
    };
    let out = policy.apply(&mut stream, rng)?;
    Ok((
        SignedValue::from_real(out.value),
        EstimateStats {
            terms_used: out.terms_used,
            n_normalizer_draws: stream.draws,
            capped: out.capped,
        },
    ))
}

/// Exponential auxiliary-variable estimate of the joint density in
/// `(theta, nu)`: `exp(unnorm_loglik - nu Z_tilde) * series`, unbiased for
/// `f(y;theta) exp(-nu Z(theta))`.
pub fn exponential_estimate<S: NormalizerSource + ?Sized>(
    unnorm_loglik: f64,
    aux: ExponentialAuxiliary,
    plan: &TiltingPlan,
    source: &S,
    policy: &TruncationPolicy,
    rng: &mut Rng,
) -> Result<(SignedValue, EstimateStats)> {
    let (series, stats) = exponential_series(aux, plan, source, policy, rng)?;
    let nu_z_tilde = (aux.log_nu + plan.log_z_tilde).exp();
    Ok((SignedValue::from_log(unnorm_loglik - nu_z_tilde).mul(series), stats))
}

/// Scaling-and-squaring estimate of `exp(L - U)` from unbiased draws of
/// `L - U`: the product of `n_factors` independent roulette-truncated
/// Maclaurin series, each estimating `exp((L - U) / n_factors)`.
pub fn scaled_exponential_estimate(
    shifted_loglik_source: &mut dyn FnMut(&mut Rng) -> Result<f64>,
    n_factors: usize,
    schedule: &RouletteSchedule,
    rng: &mut Rng,
) -> Result<(SignedValue, EstimateStats)> {
    if n_factors == 0 {
        return Err(Error::InvalidParameter("n_factors must be >= 1".into()));
    }
    let e = n_factors as f64;
    let mut total = SignedValue::one();
    let mut stats = EstimateStats::default();
    for factor in 0..n_factors {
        let mut prod = 1.0f64;
        let mut draws = 0usize;
        let mut stream = |index: usize, r: &mut Rng| -> Result<f64> {
            if index == 0 {
                prod = 1.0;
                return Ok(1.0);
            }
            let v = shifted_loglik_source(r)?;
            draws += 1;
            prod *= (v / e) / index as f64;
            Ok(prod)
        };
        // closures returning Result need the explicit adapter below
        struct Fallible<F>(F);
        impl<F: FnMut(usize, &mut Rng) -> Result<f64>> TermStream for Fallible<F> {
            fn next_term(&mut self, index: usize, rng: &mut Rng) -> Result<f64> {
                (self.0)(index, rng)
            }
        }
        let out = roulette_truncate(&mut Fallible(&mut stream), schedule, rng).map_err(|e| {
            Error::ChainAborted { iteration: factor, source: Box::new(e) }
        })?;
        total = total.mul(SignedValue::from_real(out.value));
        stats.terms_used += out.terms_used;
        stats.n_normalizer_draws += draws;
        stats.capped |= out.capped;
    }
    Ok((total, stats))
}
