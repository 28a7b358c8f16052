//! Unbiased normalising-constant estimators.
//!
//! Both annealed importance sampling (AIS) and the sequential Monte Carlo
//! (SMC) variant operate on a geometric bridge `gamma_t(x) = exp(t * l(x))`
//! between a tractable base distribution (`t = 0`) and the target (`t = 1`),
//! where `l` is the model's unnormalised log likelihood. Each returns an
//! unbiased estimate of `Z = sum_x exp(l(x))`, reported as `log Z_hat`.
//!
//! Determinism: a call consumes exactly one `u64` from the caller's RNG and
//! derives per-particle substreams from it, so estimates are reproducible
//! and independent of thread scheduling under `rayon`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::logspace::log_mean_exp;
use crate::rngstream::{substream, Rng};
use rand::Rng as _;

/// A model that can be annealed from a tractable base to its target.
pub trait AnnealedModel: Sync {
    type State: Clone + Send;

    /// Draws from the base distribution (`t = 0`).
    fn sample_base(&self, rng: &mut Rng) -> Self::State;

    /// `log Z_0` of the base distribution.
    fn log_base_z(&self) -> f64;

    /// Unnormalised log likelihood `l(x)` tempered by the bridge.
    fn unnorm_loglik(&self, state: &Self::State) -> f64;

    /// Applies `n_updates` MCMC updates invariant for `gamma_t`.
    fn tempered_update(&self, state: &mut Self::State, t: f64, n_updates: usize, rng: &mut Rng);
}

/// Shared configuration for the annealing estimators.
#[derive(Debug, Clone)]
pub struct AnnealingConfig {
    pub n_particles: usize,
    /// Strictly increasing temperatures in `(0, 1]`, ending at exactly 1.
    pub temperatures: Vec<f64>,
    /// Single-site (or model-appropriate) updates per temperature.
    pub updates_per_temp: usize,
}

impl AnnealingConfig {
    pub fn new(n_particles: usize, temperatures: Vec<f64>, updates_per_temp: usize) -> Result<Self> {
        if n_particles == 0 {
            return Err(Error::InvalidSchedule("need at least one particle".into()));
        }
        if temperatures.is_empty() {
            return Err(Error::InvalidSchedule("empty temperature schedule".into()));
        }
        let mut prev = 0.0;
        for &t in &temperatures {
            if !(t > prev && t <= 1.0) {
                return Err(Error::InvalidSchedule(format!(
                    "temperatures must be strictly increasing in (0, 1], got {t} after {prev}"
                )));
            }
            prev = t;
        }
        if *temperatures.last().unwrap() != 1.0 {
            return Err(Error::InvalidSchedule("schedule must end at t = 1".into()));
        }
        Ok(AnnealingConfig { n_particles, temperatures, updates_per_temp })
    }

    /// Evenly spaced schedule `1/T, 2/T, ..., 1`.
    pub fn uniform(n_particles: usize, n_temps: usize, updates_per_temp: usize) -> Result<Self> {
        let temps = (1..=n_temps).map(|s| s as f64 / n_temps as f64).collect();
        Self::new(n_particles, temps, updates_per_temp)
    }
}

/// Substream for particle `i` at annealing stage `stage` (stage 0 = base draw).
fn particle_stream(seed: u64, n_particles: usize, stage: usize, i: usize) -> Rng {
    substream(seed, "particle", (stage * n_particles + i) as u64)
}

/// Annealed importance sampling estimate of `log Z`.
///
/// Particle trajectories are fully independent, so they run in parallel;
/// the substream layout keeps the result identical to a serial run.
pub fn ais_log_z<M: AnnealedModel>(model: &M, config: &AnnealingConfig, rng: &mut Rng) -> Result<f64> {
    let log_weights = ais_log_weights(model, config, rng)?;
    Ok(model.log_base_z() + log_mean_exp(&log_weights))
}

/// Per-particle AIS log importance weights (without the `log Z_0` offset).
pub fn ais_log_weights<M: AnnealedModel>(
    model: &M,
    config: &AnnealingConfig,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    let seed: u64 = rng.gen();
    let n = config.n_particles;
    let log_weights: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut x = {
                let mut r = particle_stream(seed, n, 0, i);
                model.sample_base(&mut r)
            };
            let mut logw = 0.0;
            let mut t_prev = 0.0;
            for (s, &t) in config.temperatures.iter().enumerate() {
                logw += (t - t_prev) * model.unnorm_loglik(&x);
                let mut r = particle_stream(seed, n, s + 1, i);
                model.tempered_update(&mut x, t, config.updates_per_temp, &mut r);
                t_prev = t;
            }
            logw
        })
        .collect();
    for (i, &w) in log_weights.iter().enumerate() {
        if w.is_nan() || w == f64::INFINITY {
            return Err(Error::NonFiniteWeight { particle: i, stage: config.temperatures.len() });
        }
    }
    Ok(log_weights)
}

/// Diagnostics from an SMC run.
#[derive(Debug, Clone, Copy)]
pub struct SmcOutcome {
    pub log_z: f64,
    pub resample_count: usize,
    /// Smallest effective sample size seen across stages.
    pub min_ess: f64,
}

/// SMC estimate of `log Z` with carried log weights and multinomial
/// resampling when `ESS < ess_threshold * n_particles`.
///
/// With `ess_threshold = 0` no resampling ever triggers and the computation
/// reduces bit-for-bit to [`ais_log_z`].
pub fn smc_log_z<M: AnnealedModel>(
    model: &M,
    config: &AnnealingConfig,
    ess_threshold: f64,
    rng: &mut Rng,
) -> Result<SmcOutcome> {
    if !(0.0..=1.0).contains(&ess_threshold) {
        return Err(Error::InvalidParameter(format!(
            "ess_threshold must lie in [0, 1], got {ess_threshold}"
        )));
    }
    let seed: u64 = rng.gen();
    let n = config.n_particles;
    let mut particles: Vec<M::State> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut r = particle_stream(seed, n, 0, i);
            model.sample_base(&mut r)
        })
        .collect();
    let mut log_weights = vec![0.0f64; n];
    let mut log_z_accum = 0.0;
    let mut resample_count = 0usize;
    let mut min_ess = n as f64;
    let mut t_prev = 0.0;
    for (s, &t) in config.temperatures.iter().enumerate() {
        for (i, (x, logw)) in particles.iter().zip(log_weights.iter_mut()).enumerate() {
            *logw += (t - t_prev) * model.unnorm_loglik(x);
            if logw.is_nan() || *logw == f64::INFINITY {
                return Err(Error::NonFiniteWeight { particle: i, stage: s });
            }
        }
        let ess = effective_particles(&log_weights);
        min_ess = min_ess.min(ess);
        if ess < ess_threshold * n as f64 {
            if log_weights.iter().all(|w| *w == f64::NEG_INFINITY) {
                return Err(Error::Degeneracy { stage: s });
            }
            log_z_accum += log_mean_exp(&log_weights);
            let mut r = substream(seed, "resample", s as u64);
            particles = multinomial_resample(&particles, &log_weights, &mut r);
            log_weights.fill(0.0);
            resample_count += 1;
        }
        particles
            .par_iter_mut()
            .enumerate()
            .for_each(|(i, x)| {
                let mut r = particle_stream(seed, n, s + 1, i);
                model.tempered_update(x, t, config.updates_per_temp, &mut r);
            });
        t_prev = t;
    }
    let log_z = model.log_base_z() + log_z_accum + log_mean_exp(&log_weights);
    Ok(SmcOutcome { log_z, resample_count, min_ess })
}

/// Plain importance sampling estimate of `log Z`.
///
/// Draws `x_i` from the proposal and averages `exp(target(x_i) - log_g(x_i))`
/// in log space; unbiased for `Z` in linear space whenever the proposal
/// covers the target's support.
pub fn is_log_z<S>(
    mut sample: impl FnMut(&mut Rng) -> S,
    log_g: impl Fn(&S) -> f64,
    unnorm_logdensity: impl Fn(&S) -> f64,
    n: usize,
    rng: &mut Rng,
) -> Result<f64> {
    if n == 0 {
        return Err(Error::InvalidParameter("importance sampling needs n >= 1".into()));
    }
    let mut log_ratios = Vec::with_capacity(n);
    for i in 0..n {
        let x = sample(rng);
        let lr = unnorm_logdensity(&x) - log_g(&x);
        if lr.is_nan() || lr == f64::INFINITY {
            return Err(Error::NonFiniteWeight { particle: i, stage: 0 });
        }
        log_ratios.push(lr);
    }
    Ok(log_mean_exp(&log_ratios))
}

/// `(sum w)^2 / sum w^2` computed stably in log space.
pub fn effective_particles(log_weights: &[f64]) -> f64 {
    let m = log_weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return 0.0;
    }
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for &lw in log_weights {
        let w = (lw - m).exp();
        sum += w;
        sum_sq += w * w;
    }
    sum * sum / sum_sq
}

fn multinomial_resample<S: Clone>(particles: &[S], log_weights: &[f64], rng: &mut Rng) -> Vec<S> {
    let m = log_weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut cumulative = Vec::with_capacity(log_weights.len());
    let mut acc = 0.0;
    for &lw in log_weights {
        acc += (lw - m).exp();
        cumulative.push(acc);
    }
    let total = acc;
    (0..particles.len())
        .map(|_| {
            let u: f64 = rng.gen::<f64>() * total;
            let k = cumulative.partition_point(|&c| c < u).min(particles.len() - 1);
            particles[k].clone()
        })
        .collect()
}
