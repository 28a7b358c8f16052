//! Signed pseudo-marginal Metropolis-Hastings.
//!
//! The chain targets the absolute measure: acceptance compares estimate
//! magnitudes `|p_hat|` only, the sign of each retained estimate rides along
//! and is applied afterwards through the sign-corrected expectation
//! `I_hat = sum sigma_k h_k / sum sigma_k`. On rejection the retained
//! estimate is propagated unchanged; re-estimating it would break the
//! exact-approximate argument.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::estimators::EstimateStats;
use crate::logspace::SignedValue;
use crate::rngstream::Rng;

/// One iteration of chain state as persisted to CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainRecord {
    pub theta: Vec<f64>,
    /// `log |p_hat|` of the currently retained estimate.
    pub log_abs_estimate: f64,
    /// Sign of the retained estimate.
    pub sign: i8,
    pub accepted: bool,
    /// Truncation terms consumed by this iteration's estimator call.
    pub n_terms: usize,
    /// Normaliser draws consumed by this iteration's estimator call.
    pub n_normalizer_draws: usize,
    /// Log of the exponential auxiliary variable, when that method is live.
    pub log_aux_nu: Option<f64>,
}

/// A fresh signed likelihood estimate at a parameter point.
pub type Estimator<'a> = dyn FnMut(&[f64], &mut Rng) -> Result<(SignedValue, EstimateStats)> + 'a;

/// One Metropolis-Hastings step on the absolute measure.
///
/// `log_proposal_ratio(theta, theta_prop)` must return
/// `log q(theta | theta_prop) - log q(theta_prop | theta)` (zero for a
/// symmetric kernel). A sign-zero fresh estimate is re-drawn once with fresh
/// randomness before use; `sign_resamples` counts such events.
pub fn pm_mh_step(
    current: &ChainRecord,
    propose: &mut dyn FnMut(&[f64], &mut Rng) -> Vec<f64>,
    log_proposal_ratio: &dyn Fn(&[f64], &[f64]) -> f64,
    log_prior: &dyn Fn(&[f64]) -> f64,
    estimator: &mut Estimator,
    sign_resamples: &mut usize,
    rng: &mut Rng,
) -> Result<ChainRecord> {
    let theta_prop = propose(&current.theta, rng);
    let lp_prop = log_prior(&theta_prop);
    if lp_prop == f64::NEG_INFINITY {
        return Ok(ChainRecord { accepted: false, n_terms: 0, n_normalizer_draws: 0, ..current.clone() });
    }
    let (mut fresh, mut stats) = estimator(&theta_prop, rng)?;
    if fresh.sign == 0 {
        *sign_resamples += 1;
        let (again, again_stats) = estimator(&theta_prop, rng)?;
        fresh = again;
        stats.terms_used += again_stats.terms_used;
        stats.n_normalizer_draws += again_stats.n_normalizer_draws;
        stats.capped |= again_stats.capped;
    }
    // acceptance uses |p_hat| only; the sign never enters
    let log_alpha = fresh.log_magnitude - current.log_abs_estimate + lp_prop
        - log_prior(&current.theta)
        + log_proposal_ratio(&current.theta, &theta_prop);
    let u: f64 = rng.gen();
    if u.ln() < log_alpha {
        Ok(ChainRecord {
            theta: theta_prop,
            log_abs_estimate: fresh.log_magnitude,
            sign: fresh.sign,
            accepted: true,
            n_terms: stats.terms_used,
            n_normalizer_draws: stats.n_normalizer_draws,
            log_aux_nu: None,
        })
    } else {
        Ok(ChainRecord {
            accepted: false,
            n_terms: stats.terms_used,
            n_normalizer_draws: stats.n_normalizer_draws,
            ..current.clone()
        })
    }
}

/// Chain driver configuration.
#[derive(Debug, Clone)]
pub struct ChainConfig {
    pub n_iters: usize,
    pub burn_in: usize,
    /// Initial random-walk standard deviation (shared across coordinates).
    pub init_scale: f64,
    /// Acceptance rate targeted by burn-in adaptation.
    pub target_accept: f64,
    /// Adapt the scale during burn-in; it is always frozen afterwards so the
    /// post-burn-in kernel is a fixed Metropolis-Hastings kernel.
    pub adapt: bool,
}

impl Default for ChainConfig {
    fn default() -> Self {
        ChainConfig { n_iters: 0, burn_in: 0, init_scale: 0.1, target_accept: 0.4, adapt: true }
    }
}

/// A completed run.
#[derive(Debug, Clone)]
pub struct ChainOutput {
    pub records: Vec<ChainRecord>,
    pub final_scale: f64,
    pub negative_count: usize,
    pub total_normalizer_draws: usize,
    pub sign_resamples: usize,
    pub accept_count: usize,
}

/// Runs a Gaussian random-walk pseudo-marginal chain.
///
/// Estimator failures abort with the iteration index attached.
pub fn run_chain(
    init: Vec<f64>,
    config: &ChainConfig,
    log_prior: &dyn Fn(&[f64]) -> f64,
    estimator: &mut Estimator,
    rng: &mut Rng,
) -> Result<ChainOutput> {
    if config.burn_in > config.n_iters {
        return Err(Error::InvalidParameter(format!(
            "burn_in {} exceeds n_iters {}",
            config.burn_in, config.n_iters
        )));
    }
    let mut sign_resamples = 0usize;
    let mut out = ChainOutput {
        records: Vec::with_capacity(config.n_iters),
        final_scale: config.init_scale,
        negative_count: 0,
        total_normalizer_draws: 0,
        sign_resamples: 0,
        accept_count: 0,
    };
    if config.n_iters == 0 {
        return Ok(out);
    }
    if log_prior(&init) == f64::NEG_INFINITY {
        return Err(Error::InvalidParameter("chain initialised outside the prior support".into()));
    }
    let (init_est, init_stats) =
        estimator(&init, rng).map_err(|e| Error::ChainAborted { iteration: 0, source: Box::new(e) })?;
    let mut current = ChainRecord {
        theta: init,
        log_abs_estimate: init_est.log_magnitude,
        sign: init_est.sign,
        accepted: false,
        n_terms: init_stats.terms_used,
        n_normalizer_draws: init_stats.n_normalizer_draws,
        log_aux_nu: None,
    };
    out.total_normalizer_draws += init_stats.n_normalizer_draws;

    let mut log_scale = config.init_scale.ln();
    for iter in 0..config.n_iters {
        let scale = log_scale.exp();
        let mut propose = |theta: &[f64], r: &mut Rng| -> Vec<f64> {
            theta
                .iter()
                .map(|&t| {
                    let z: f64 = StandardNormal.sample(r);
                    t + scale * z
                })
                .collect()
        };
        let record = pm_mh_step(
            &current,
            &mut propose,
            &|_, _| 0.0,
            log_prior,
            estimator,
            &mut sign_resamples,
            rng,
        )
        .map_err(|e| Error::ChainAborted { iteration: iter, source: Box::new(e) })?;
        if config.adapt && iter < config.burn_in {
            // Robbins-Monro on the log scale, frozen at the end of burn-in;
            // clamped to init * e^{+-3} so a jammed pseudo-marginal chain
            // (stuck on one overestimated likelihood) cannot collapse the
            // proposal to zero width
            let gain = (iter as f64 + 1.0).powf(-0.6);
            let acc = if record.accepted { 1.0 } else { 0.0 };
            let center = config.init_scale.ln();
            log_scale =
                (log_scale + gain * (acc - config.target_accept)).clamp(center - 3.0, center + 3.0);
        }
        if record.accepted {
            out.accept_count += 1;
        }
        if record.sign < 0 {
            out.negative_count += 1;
        }
        out.total_normalizer_draws += record.n_normalizer_draws;
        current = record.clone();
        out.records.push(record);
    }
    out.final_scale = log_scale.exp();
    out.sign_resamples = sign_resamples;
    Ok(out)
}

/// Sign-corrected expectation of `h(theta)` with the asymptotic-variance
/// approximation and the severity diagnostics.
#[derive(Debug, Clone, Copy)]
pub struct SignCorrectedSummary {
    /// `I_hat = sum sigma h / sum sigma`.
    pub estimate: f64,
    /// Mean sign; small magnitudes signal a severe sign problem.
    pub r_hat: f64,
    /// Lag-window estimate of the autocorrelation sum of `h * sigma`.
    pub v_hat: f64,
    /// Approximate variance of `I_hat` (already divided by `n`).
    pub variance: f64,
    pub ess: f64,
    pub negative_fraction: f64,
}

/// Computes the sign-corrected summary over `(h(theta_k), sigma_k)` pairs.
pub fn sign_corrected_expectation(
    chain: &[ChainRecord],
    h: &dyn Fn(&[f64]) -> f64,
) -> Result<SignCorrectedSummary> {
    if chain.is_empty() {
        return Err(Error::EmptyChain);
    }
    let n = chain.len() as f64;
    let mut sum_sigma = 0.0;
    let mut sum_h_sigma = 0.0;
    let mut sum_h2_sigma = 0.0;
    let mut negatives = 0usize;
    let mut g = Vec::with_capacity(chain.len());
    for rec in chain {
        let s = f64::from(rec.sign);
        let hv = h(&rec.theta);
        sum_sigma += s;
        sum_h_sigma += hv * s;
        sum_h2_sigma += hv * hv * s;
        if rec.sign < 0 {
            negatives += 1;
        }
        g.push(hv * s);
    }
    if sum_sigma == 0.0 {
        return Err(Error::DegenerateSigns);
    }
    let estimate = sum_h_sigma / sum_sigma;
    let r_hat = sum_sigma / n;
    let h2_corrected = sum_h2_sigma / sum_sigma;
    let plain_var = (h2_corrected - estimate * estimate).max(0.0);
    let v_hat = lag_window_autocorr_sum(&g);
    let sigma_sq_h = plain_var * v_hat / (r_hat * r_hat);
    let variance = sigma_sq_h / n;
    // n * plain-variance / sigma^2(h) collapses to n r^2 / V
    let ess = if sigma_sq_h > 0.0 { (n * plain_var / sigma_sq_h).clamp(1.0, n) } else { n };
    Ok(SignCorrectedSummary {
        estimate,
        r_hat,
        v_hat,
        variance,
        ess,
        negative_fraction: negatives as f64 / n,
    })
}

/// Tukey-Hanning lag-window estimate of `1 + 2 sum_k rho_k` for a series;
/// window width = twice the first lag where the autocorrelation drops
/// below 0.05.
fn lag_window_autocorr_sum(series: &[f64]) -> f64 {
    let n = series.len();
    let mean = series.iter().sum::<f64>() / n as f64;
    let gamma0: f64 = series.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
    if gamma0 <= 0.0 || n < 4 {
        return 1.0;
    }
    let rho = |k: usize| -> f64 {
        let mut s = 0.0;
        for i in 0..n - k {
            s += (series[i] - mean) * (series[i + k] - mean);
        }
        s / (n as f64 * gamma0)
    };
    let max_lag = n / 2;
    let mut cutoff = max_lag;
    for k in 1..max_lag {
        if rho(k) < 0.05 {
            cutoff = (2 * k).min(max_lag);
            break;
        }
    }
    let mut total = 1.0;
    for k in 1..=cutoff {
        let w = 0.5 * (1.0 + (std::f64::consts::PI * k as f64 / cutoff as f64).cos());
        total += 2.0 * w * rho(k);
    }
    total.max(0.0)
}

/// Effective sample size via the Geyer initial-positive-sequence truncation
/// of the autocorrelation sum; clamped to `[1, n]`. Zero-variance series
/// return `n` by convention.
pub fn ess(series: &[f64]) -> Result<f64> {
    let n = series.len();
    if n < 10 {
        return Err(Error::InvalidParameter(format!("ess needs at least 10 points, got {n}")));
    }
    let mean = series.iter().sum::<f64>() / n as f64;
    let gamma0: f64 = series.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
    if gamma0 <= 0.0 {
        return Ok(n as f64);
    }
    let rho = |k: usize| -> f64 {
        if k >= n {
            return 0.0;
        }
        let mut s = 0.0;
        for i in 0..n - k {
            s += (series[i] - mean) * (series[i + k] - mean);
        }
        s / (n as f64 * gamma0)
    };
    // Geyer: sum consecutive-lag pairs while their sum stays positive
    let mut tau = -1.0;
    let mut m = 0usize;
    loop {
        let pair = rho(2 * m) + rho(2 * m + 1);
        if pair <= 0.0 || 2 * m + 1 >= n {
            break;
        }
        tau += 2.0 * pair;
        m += 1;
    }
    let tau = tau.max(1.0);
    Ok((n as f64 / tau).clamp(1.0, n as f64))
}
