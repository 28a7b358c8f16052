//! End-to-end experiment execution: data loading, method-arm estimator
//! assembly, chain runs, and summary construction.

use std::collections::HashMap;
use std::path::Path;
use std::time::Instant;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use rrmc::bingham::{self, BinghamParams, BinghamZSource, SpherePoint};
use rrmc::estimators::{
    choose_tilting, exponential_series, geometric_estimate, plan_from_moments, EstimateStats,
    ExponentialAuxiliary, NormalizerSource, TiltingPlan, TruncationPolicy,
};
use rrmc::logspace::log_mean_exp;
use rrmc::ising::{
    exchange_step, transfer_matrix_log_z, ExchangeSampler, InferredParam,
    IsingLattice, IsingParams,
};
use rrmc::logspace::SignedValue;
use rrmc::normalizers::{ais_log_z, AnnealingConfig};
use rrmc::pm_mcmc::{
    run_chain, sign_corrected_expectation, ChainConfig, ChainOutput, ChainRecord,
};
use rrmc::rngstream::{substream, Rng};
use rrmc::truncation::{IndexDistribution, RouletteSchedule};

use crate::config::{EstimatorBlock, ExperimentConfig, Method, Model};

/// Persisted run summary (`schema` versions the JSON layout).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Summary {
    pub schema: u32,
    pub model: String,
    pub method: String,
    pub seed: u64,
    pub n_iters: usize,
    pub burn_in: usize,
    /// Sign-corrected posterior mean of theta.
    pub mean: f64,
    /// Sign-corrected posterior standard deviation of theta.
    pub sd: f64,
    /// Monte Carlo variance of `mean` (already divided by chain length).
    pub mean_variance: f64,
    pub ess: f64,
    pub r_hat: f64,
    pub negative_fraction: f64,
    pub acceptance_rate: f64,
    pub sign_resamples: usize,
    pub total_normalizer_draws: usize,
    pub final_scale: f64,
    pub wall_time_secs: f64,
    pub config_digest: String,
    pub dataset_sha256: String,
}

pub struct RunOutcome {
    pub records: Vec<ChainRecord>,
    pub summary: Summary,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let out = h.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

fn load_dataset_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).with_context(|| format!("cannot read dataset {}", path.display()))
}

pub fn load_bingham_points(path: &Path) -> Result<Vec<SpherePoint>> {
    let bytes = load_dataset_bytes(path)?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_reader(bytes.as_slice());
    let mut points = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.with_context(|| format!("bad CSV row {i}"))?;
        if rec.len() != 3 {
            anyhow::bail!("row {i}: expected 3 coordinates, got {}", rec.len());
        }
        let mut v = [0.0f64; 3];
        for (j, field) in rec.iter().enumerate() {
            v[j] = field.trim().parse().with_context(|| format!("row {i} field {j}"))?;
        }
        points.push(SpherePoint::from_unnormalized(v)?);
    }
    if points.is_empty() {
        anyhow::bail!("empty Bingham dataset {}", path.display());
    }
    Ok(points)
}

/// Continuation probability for the roulette arms: `max(q_min, pilot |kappa|)`
/// following the rule of thumb `q = alpha` for terms decaying like `alpha^k`,
/// widened by three pilot standard deviations of the series factor
/// `1 - c Z_hat / Z_tilde`. The roulette weight divides the first retained
/// term by `q`, so the estimate goes negative roughly when that factor drops
/// below `-q`; keeping `q` three factor-sds past the mean factor makes
/// negative signs rare (rate ~ `q * Phi(-(q + kappa) / sd)`) at an expected
/// series length of `1/(1-q)`.
fn roulette_q(plan: &TiltingPlan, est: &EstimatorBlock) -> f64 {
    // c E[Z_hat] / Z_tilde = 1 - kappa_hat whether Z_tilde is the pilot mean
    // or a strict bound, so this is the factor sd in both regimes
    let scale = 1.0 - plan.kappa_hat;
    let factor_sd = (scale * scale * (plan.moment_ratio - 1.0)).max(0.0).sqrt();
    est.q_min.max(plan.kappa_hat.abs() + 3.0 * factor_sd).min(0.95)
}

fn truncation_policy(
    method: Method,
    plan: &TiltingPlan,
    est: &EstimatorBlock,
) -> Result<TruncationPolicy> {
    Ok(match method {
        Method::PoissonGeometric => TruncationPolicy::SingleTermTail(
            IndexDistribution::ZeroTruncatedPoisson { lambda: est.poisson_lambda },
        ),
        _ => {
            // when the mean factor kappa is substantial (loose Z_tilde, e.g.
            // a strict bound), evaluate the head of the series
            // deterministically down to ~2% residual mass and roulette only
            // the tail; truncation randomness otherwise dominates the
            // estimate variance at ~kappa^2/q per term
            let kappa = plan.kappa_hat.abs().min(0.95);
            let mut qs = Vec::new();
            if kappa > 0.1 {
                let head = (0.02f64.ln() / kappa.ln()).ceil() as usize;
                qs.resize(head.min(20), 1.0);
            }
            qs.push(roulette_q(plan, est));
            TruncationPolicy::Roulette(
                RouletteSchedule::per_step(qs)?.with_safety_cap(est.safety_cap)?,
            )
        }
    })
}

/// Per-cell pilot dispersion estimates, built from a dedicated pilot RNG
/// substream per cell so cache misses never perturb the chain's randomness.
///
/// Only the dispersion (`E[Z_hat^2]/E[Z_hat]^2`) is cached per cell: it
/// varies slowly with theta. `Z_tilde` itself moves fast (for Ising,
/// `d log Z / d theta` is the expected edge statistic, so `log Z` shifts by
/// more than 1 across a cell), so it is re-estimated from fresh draws at
/// every proposal; the estimator stays unbiased for any `Z_tilde`, but a
/// stale one sends the series factors far from zero and the magnitudes
/// ratchet.
struct PilotTable {
    width: f64,
    seed: u64,
    moment_ratios: HashMap<i64, f64>,
    bound_plans: HashMap<i64, TiltingPlan>,
}

impl PilotTable {
    fn new(width: f64, seed: u64) -> Self {
        PilotTable { width, seed, moment_ratios: HashMap::new(), bound_plans: HashMap::new() }
    }

    fn cell_moment_ratio<S: NormalizerSource>(
        &mut self,
        theta: f64,
        source: &S,
        pilot_draws: usize,
    ) -> rrmc::Result<f64> {
        let cell = (theta / self.width).floor() as i64;
        if let Some(&mr) = self.moment_ratios.get(&cell) {
            return Ok(mr);
        }
        let mut rng = substream(self.seed, "pilot", cell as u64);
        let plan = choose_tilting(source, pilot_draws, 0.5, false, &mut rng)?;
        self.moment_ratios.insert(cell, plan.moment_ratio);
        Ok(plan.moment_ratio)
    }

    /// Fresh per-proposal plan: `Z_tilde` from `z_tilde_draws` new draws at
    /// this exact theta, dispersion from the cell cache inflated by the
    /// `Z_tilde` noise (`1 + 1/m` on the squared coefficient of variation).
    fn fresh_plan<S: NormalizerSource>(
        &mut self,
        theta: f64,
        source: &S,
        est: &EstimatorBlock,
        rng: &mut Rng,
    ) -> rrmc::Result<(TiltingPlan, usize)> {
        let mr = self.cell_moment_ratio(theta, source, est.pilot_draws)?;
        // A Z_tilde undershooting log Z by more than ln(2/c) pushes every
        // series factor past magnitude 1 and the partial products ratchet
        // up; scale the draw count with the cell dispersion so the log
        // noise of the average stays ~0.15 even where single draws are bad.
        let noise_draws = (mr.max(1.0).ln() / 0.02).ceil() as usize;
        let m = est.z_tilde_draws.max(1).max(noise_draws.min(50));
        let mut logs = Vec::with_capacity(m);
        for _ in 0..m {
            logs.push(source.draw_log_z(rng)?);
        }
        let log_z_tilde = log_mean_exp(&logs);
        let mr_eff = 1.0 + (mr - 1.0) * (1.0 + 1.0 / m as f64);
        let plan = plan_from_moments(log_z_tilde, mr_eff, est.kappa_target, false)?;
        Ok((plan, m))
    }

    /// Bound-tilted variant: the certified bound `4 pi` replaces the pilot
    /// mean as `Z_tilde`, keeping every series factor non-negative; the
    /// pilot supplies `kappa_hat` (mean factor, which drives `q`) and the
    /// dispersion. Valid for every theta, so the plan is cached per cell.
    fn bound_plan_for<S: NormalizerSource>(
        &mut self,
        theta: f64,
        source: &S,
        pilot_draws: usize,
    ) -> rrmc::Result<TiltingPlan> {
        let cell = (theta / self.width).floor() as i64;
        if let Some(p) = self.bound_plans.get(&cell) {
            return Ok(*p);
        }
        let mut rng = substream(self.seed, "pilot", cell as u64);
        let mut logs = Vec::with_capacity(pilot_draws);
        for _ in 0..pilot_draws {
            logs.push(source.draw_log_z(&mut rng)?);
        }
        let log_bound = bingham::FOUR_PI.ln();
        let mean: f64 =
            logs.iter().map(|l| (l - log_bound).exp()).sum::<f64>() / pilot_draws as f64;
        let meansq: f64 =
            logs.iter().map(|l| (2.0 * (l - log_bound)).exp()).sum::<f64>() / pilot_draws as f64;
        let plan = TiltingPlan {
            log_z_tilde: log_bound,
            c: 1.0,
            exponent_split: 1,
            shift: 0.0,
            kappa_hat: 1.0 - mean,
            moment_ratio: meansq / (mean * mean),
        };
        self.bound_plans.insert(cell, plan);
        Ok(plan)
    }
}

pub fn run_experiment(cfg: &ExperimentConfig, raw_config: &[u8]) -> Result<RunOutcome> {
    cfg.validate()?;
    let start = Instant::now();
    let config_digest = sha256_hex(raw_config);

    let (output, dataset_sha256) = match cfg.model {
        Model::Ising => run_ising(cfg)?,
        Model::Bingham => run_bingham(cfg)?,
    };

    let tail = &output.records[cfg.burn_in..];
    let (mean, sd, mean_variance, ess, r_hat, negative_fraction) = if tail.is_empty() {
        (f64::NAN, f64::NAN, f64::NAN, f64::NAN, f64::NAN, f64::NAN)
    } else {
        let first = sign_corrected_expectation(tail, &|t| t[0])?;
        let second = sign_corrected_expectation(tail, &|t| t[0] * t[0])?;
        let var = (second.estimate - first.estimate * first.estimate).max(0.0);
        (
            first.estimate,
            var.sqrt(),
            first.variance,
            first.ess,
            first.r_hat,
            first.negative_fraction,
        )
    };

    let summary = Summary {
        schema: 1,
        model: format!("{:?}", cfg.model).to_lowercase(),
        method: cfg.method.name().to_string(),
        seed: cfg.seed,
        n_iters: cfg.n_iters,
        burn_in: cfg.burn_in,
        mean,
        sd,
        mean_variance,
        ess,
        r_hat,
        negative_fraction,
        acceptance_rate: if cfg.n_iters > 0 {
            output.accept_count as f64 / cfg.n_iters as f64
        } else {
            f64::NAN
        },
        sign_resamples: output.sign_resamples,
        total_normalizer_draws: output.total_normalizer_draws,
        final_scale: output.final_scale,
        wall_time_secs: start.elapsed().as_secs_f64(),
        config_digest,
        dataset_sha256,
    };
    Ok(RunOutcome { records: output.records, summary })
}

fn run_ising(cfg: &ExperimentConfig) -> Result<(ChainOutput, String)> {
    let block = cfg.ising.as_ref().expect("validated");
    let bytes = load_dataset_bytes(&block.data_path)?;
    let digest = sha256_hex(&bytes);
    let data = IsingLattice::from_text(std::str::from_utf8(&bytes).context("lattice not UTF-8")?)?;
    if data.side() != block.n {
        anyhow::bail!("dataset is {0}x{0} but config says {1}x{1}", data.side(), block.n);
    }
    let n = block.n;
    let alpha = block.alpha;
    let ss = data.sum_spins() as f64;
    let se = data.sum_edges() as f64;
    let log_f = move |theta: f64| alpha * ss + theta * se;
    let (lo, hi) = (block.prior_lo, block.prior_hi);
    let log_prior =
        move |t: &[f64]| if (lo..=hi).contains(&t[0]) { 0.0 } else { f64::NEG_INFINITY };

    let chain_cfg = ChainConfig {
        n_iters: cfg.n_iters,
        burn_in: cfg.burn_in,
        init_scale: cfg.proposal.init_scale,
        target_accept: cfg.proposal.target_accept,
        adapt: cfg.proposal.adapt,
    };
    let mut rng = substream(cfg.seed, "chain", 0);
    let est_block = cfg.estimator.clone();
    let acfg = AnnealingConfig::uniform(
        est_block.ais_particles,
        est_block.ais_temps,
        est_block.sweeps_per_temp,
    )?;
    let method = cfg.method;

    let output = match method {
        Method::ExactReference => {
            let mut estimator = move |theta: &[f64], _: &mut Rng| {
                let params = IsingParams::new(alpha, theta[0]);
                let log_z = transfer_matrix_log_z(n, params)?;
                Ok((SignedValue::from_log(log_f(theta[0]) - log_z), EstimateStats::default()))
            };
            run_chain(vec![block.init_theta], &chain_cfg, &log_prior, &mut estimator, &mut rng)?
        }
        Method::RouletteGeometric | Method::PoissonGeometric => {
            let mut table = PilotTable::new(est_block.pilot_cell_width, cfg.seed);
            let mut estimator = move |theta: &[f64], r: &mut Rng| {
                let params = IsingParams::new(alpha, theta[0]);
                let source = |rr: &mut Rng| ais_log_z(&(n, params), &acfg, rr);
                let (plan, m) = table.fresh_plan(theta[0], &source, &est_block, r)?;
                let policy = truncation_policy(method, &plan, &est_block)
                    .map_err(|e| rrmc::Error::InvalidParameter(e.to_string()))?;
                let (value, mut stats) =
                    geometric_estimate(log_f(theta[0]), &plan, &source, &policy, r)?;
                stats.n_normalizer_draws += m;
                Ok((value, stats))
            };
            run_chain(vec![block.init_theta], &chain_cfg, &log_prior, &mut estimator, &mut rng)?
        }
        Method::ExponentialSeries => {
            let mut table = PilotTable::new(est_block.pilot_cell_width, cfg.seed);
            let mut estimator = move |theta: &[f64], r: &mut Rng| {
                let params = IsingParams::new(alpha, theta[0]);
                let source = |rr: &mut Rng| ais_log_z(&(n, params), &acfg, rr);
                let (plan, m) = table.fresh_plan(theta[0], &source, &est_block, r)?;
                let policy = truncation_policy(method, &plan, &est_block)
                    .map_err(|e| rrmc::Error::InvalidParameter(e.to_string()))?;
                // nu' ~ Exponential(Z_tilde(theta')) refreshed per proposal;
                // with that proposal the exp(-nu Z_tilde) prefactor cancels
                // in the Hastings ratio and the effective estimate is
                // f * series / Z_tilde
                let aux = ExponentialAuxiliary::sample(plan.log_z_tilde, r);
                let (series, mut stats) = exponential_series(aux, &plan, &source, &policy, r)?;
                stats.n_normalizer_draws += m;
                Ok((
                    SignedValue::from_log(log_f(theta[0]) - plan.log_z_tilde).mul(series),
                    stats,
                ))
            };
            run_chain(vec![block.init_theta], &chain_cfg, &log_prior, &mut estimator, &mut rng)?
        }
        Method::ExchangeExact | Method::ExchangeApprox => {
            let sampler = if method == Method::ExchangeExact {
                ExchangeSampler::Exact { budget: block.cftp_budget }
            } else {
                ExchangeSampler::Gibbs { steps: block.exchange_gibbs_steps }
            };
            run_exchange(cfg, &data, sampler, &log_prior, &mut rng)?
        }
    };
    Ok((output, digest))
}

/// Exchange arms have no likelihood estimate; records carry sign +1 and a
/// zero log magnitude so the CSV schema stays uniform.
fn run_exchange(
    cfg: &ExperimentConfig,
    data: &IsingLattice,
    sampler: ExchangeSampler,
    log_prior: &dyn Fn(&[f64]) -> f64,
    rng: &mut Rng,
) -> Result<ChainOutput> {
    let block = cfg.ising.as_ref().expect("validated");
    let fixed = IsingParams::new(block.alpha, 0.0);
    let mut theta = block.init_theta;
    let mut log_scale = cfg.proposal.init_scale.ln();
    let mut out = ChainOutput {
        records: Vec::with_capacity(cfg.n_iters),
        final_scale: cfg.proposal.init_scale,
        negative_count: 0,
        total_normalizer_draws: 0,
        sign_resamples: 0,
        accept_count: 0,
    };
    let prior1 = |t: f64| log_prior(&[t]);
    for iter in 0..cfg.n_iters {
        let scale = log_scale.exp();
        let (next, accepted) = exchange_step(
            theta,
            data,
            InferredParam::Beta,
            fixed,
            sampler,
            scale,
            &prior1,
            rng,
        )?;
        if cfg.proposal.adapt && iter < cfg.burn_in {
            // same clamped Robbins-Monro rule as the pseudo-marginal chain
            let gain = (iter as f64 + 1.0).powf(-0.6);
            let acc = if accepted { 1.0 } else { 0.0 };
            let center = cfg.proposal.init_scale.ln();
            log_scale = (log_scale + gain * (acc - cfg.proposal.target_accept))
                .clamp(center - 3.0, center + 3.0);
        }
        theta = next;
        if accepted {
            out.accept_count += 1;
        }
        out.records.push(ChainRecord {
            theta: vec![theta],
            log_abs_estimate: 0.0,
            sign: 1,
            accepted,
            n_terms: 0,
            n_normalizer_draws: 0,
            log_aux_nu: None,
        });
    }
    out.final_scale = log_scale.exp();
    Ok(out)
}

fn run_bingham(cfg: &ExperimentConfig) -> Result<(ChainOutput, String)> {
    let block = cfg.bingham.as_ref().expect("validated");
    let bytes = load_dataset_bytes(&block.data_path)?;
    let digest = sha256_hex(&bytes);
    let data = load_bingham_points(&block.data_path)?;
    let (lo, hi) = (block.prior_lo, block.prior_hi);
    let log_prior =
        move |t: &[f64]| if (lo..=hi).contains(&t[0]) { 0.0 } else { f64::NEG_INFINITY };
    let chain_cfg = ChainConfig {
        n_iters: cfg.n_iters,
        burn_in: cfg.burn_in,
        init_scale: cfg.proposal.init_scale,
        target_accept: cfg.proposal.target_accept,
        adapt: cfg.proposal.adapt,
    };
    let mut rng = substream(cfg.seed, "chain", 0);
    let est_block = cfg.estimator.clone();
    let method = cfg.method;
    let n_is = block.n_is;
    let mut table = PilotTable::new(est_block.pilot_cell_width, cfg.seed);

    // likelihood of n points: product of n independent reciprocal series
    // estimates, each unbiased for f(y_i)/Z, hence unbiased for the product
    let mut estimator = move |theta: &[f64], r: &mut Rng| {
        let params = BinghamParams::new(0.0, theta[0].min(0.0))?;
        let source = BinghamZSource { params, n_is };
        let plan = table.bound_plan_for(theta[0], &source, est_block.pilot_draws)?;
        let policy = truncation_policy(method, &plan, &est_block)
            .map_err(|e| rrmc::Error::InvalidParameter(e.to_string()))?;
        let mut total = SignedValue::one();
        let mut stats = EstimateStats::default();
        for &y in &data {
            let log_f_i = bingham::unnorm_logdensity(y, params);
            let (v, s) = match method {
                Method::ExponentialSeries => {
                    let aux = ExponentialAuxiliary::sample(plan.log_z_tilde, r);
                    let (series, s) = exponential_series(aux, &plan, &source, &policy, r)?;
                    (SignedValue::from_log(log_f_i - plan.log_z_tilde).mul(series), s)
                }
                _ => geometric_estimate(log_f_i, &plan, &source, &policy, r)?,
            };
            total = total.mul(v);
            stats.terms_used += s.terms_used;
            stats.n_normalizer_draws += s.n_normalizer_draws;
            stats.capped |= s.capped;
        }
        Ok((total, stats))
    };
    let output =
        run_chain(vec![block.init_theta], &chain_cfg, &log_prior, &mut estimator, &mut rng)?;
    Ok((output, digest))
}
