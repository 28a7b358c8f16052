//! Experiment configuration: a TOML (or JSON) file, fully validated before
//! any computation starts. Unknown keys are rejected to catch config drift.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Model {
    Ising,
    Bingham,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    RouletteGeometric,
    PoissonGeometric,
    ExponentialSeries,
    ExchangeExact,
    ExchangeApprox,
    ExactReference,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::RouletteGeometric => "roulette_geometric",
            Method::PoissonGeometric => "poisson_geometric",
            Method::ExponentialSeries => "exponential_series",
            Method::ExchangeExact => "exchange_exact",
            Method::ExchangeApprox => "exchange_approx",
            Method::ExactReference => "exact_reference",
        }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct IsingBlock {
    /// Lattice side length.
    pub n: usize,
    /// Fixed external field; the chain infers the coupling beta.
    #[serde(default)]
    pub alpha: f64,
    /// Lattice text fixture (header n, rows of +/-).
    pub data_path: PathBuf,
    #[serde(default = "default_ising_prior_lo")]
    pub prior_lo: f64,
    #[serde(default = "default_ising_prior_hi")]
    pub prior_hi: f64,
    #[serde(default = "default_ising_init")]
    pub init_theta: f64,
    /// Gibbs steps for the approximate Exchange arm.
    #[serde(default = "default_exchange_gibbs_steps")]
    pub exchange_gibbs_steps: usize,
    #[serde(default = "default_cftp_budget")]
    pub cftp_budget: u64,
}

fn default_ising_prior_lo() -> f64 {
    0.0
}
fn default_ising_prior_hi() -> f64 {
    1.0
}
fn default_ising_init() -> f64 {
    0.3
}
fn default_exchange_gibbs_steps() -> usize {
    50_000
}
fn default_cftp_budget() -> u64 {
    rrmc::ising::CFTP_DEFAULT_BUDGET
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct BinghamBlock {
    /// CSV fixture of unit vectors, one `x,y,z` row per point.
    pub data_path: PathBuf,
    #[serde(default = "default_bingham_prior_lo")]
    pub prior_lo: f64,
    #[serde(default)]
    pub prior_hi: f64,
    #[serde(default = "default_bingham_init")]
    pub init_theta: f64,
    /// Uniform-sphere importance samples per normaliser draw.
    #[serde(default = "default_bingham_n_is")]
    pub n_is: usize,
}

fn default_bingham_prior_lo() -> f64 {
    -5.0
}
fn default_bingham_init() -> f64 {
    -1.0
}
fn default_bingham_n_is() -> usize {
    100
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorBlock {
    /// AIS particles per normaliser draw.
    pub ais_particles: usize,
    /// Equally spaced temperatures.
    pub ais_temps: usize,
    pub sweeps_per_temp: usize,
    pub pilot_draws: usize,
    pub kappa_target: f64,
    /// Floor on the roulette continuation probability.
    pub q_min: f64,
    /// Index distribution mean for the single-term (Poisson) arm.
    pub poisson_lambda: f64,
    pub safety_cap: usize,
    /// Width of the theta cells sharing one pilot dispersion estimate.
    pub pilot_cell_width: f64,
    /// Fresh normaliser draws averaged into Z_tilde at each proposal.
    pub z_tilde_draws: usize,
}

impl Default for EstimatorBlock {
    fn default() -> Self {
        EstimatorBlock {
            ais_particles: 100,
            ais_temps: 1000,
            sweeps_per_temp: 1,
            pilot_draws: 10,
            kappa_target: 0.5,
            q_min: 0.05,
            poisson_lambda: 1.0,
            safety_cap: rrmc::truncation::DEFAULT_SAFETY_CAP,
            pilot_cell_width: 0.05,
            z_tilde_draws: 2,
        }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProposalBlock {
    pub init_scale: f64,
    pub target_accept: f64,
    pub adapt: bool,
}

impl Default for ProposalBlock {
    fn default() -> Self {
        ProposalBlock { init_scale: 0.1, target_accept: 0.4, adapt: true }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: Model,
    pub method: Method,
    pub n_iters: usize,
    pub burn_in: usize,
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub ising: Option<IsingBlock>,
    #[serde(default)]
    pub bingham: Option<BinghamBlock>,
    #[serde(default)]
    pub estimator: EstimatorBlock,
    #[serde(default)]
    pub proposal: ProposalBlock,
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<(Self, Vec<u8>)> {
        let raw = std::fs::read(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let text = std::str::from_utf8(&raw).context("config is not UTF-8")?;
        let cfg: ExperimentConfig = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(text).context("invalid JSON config")?
        } else {
            toml::from_str(text).context("invalid TOML config")?
        };
        cfg.validate()?;
        Ok((cfg, raw))
    }

    pub fn validate(&self) -> Result<()> {
        if self.burn_in > self.n_iters {
            bail!("burn_in {} exceeds n_iters {}", self.burn_in, self.n_iters);
        }
        match self.model {
            Model::Ising => {
                let b = self.ising.as_ref().context("model = ising requires an [ising] block")?;
                if b.n == 0 {
                    bail!("ising.n must be >= 1");
                }
                if b.prior_hi <= b.prior_lo {
                    bail!("ising prior interval is empty");
                }
                if !(b.prior_lo..=b.prior_hi).contains(&b.init_theta) {
                    bail!("ising.init_theta outside the prior support");
                }
            }
            Model::Bingham => {
                let b = self
                    .bingham
                    .as_ref()
                    .context("model = bingham requires a [bingham] block")?;
                if b.prior_hi <= b.prior_lo {
                    bail!("bingham prior interval is empty");
                }
                if !(b.prior_lo..=b.prior_hi).contains(&b.init_theta) {
                    bail!("bingham.init_theta outside the prior support");
                }
                if b.n_is == 0 {
                    bail!("bingham.n_is must be >= 1");
                }
                if matches!(self.method, Method::ExchangeExact | Method::ExchangeApprox) {
                    bail!("exchange methods are only implemented for the ising model");
                }
                if self.method == Method::ExactReference {
                    bail!("exact_reference is only implemented for the ising model");
                }
            }
        }
        let e = &self.estimator;
        if e.ais_particles == 0 || e.ais_temps == 0 || e.sweeps_per_temp == 0 {
            bail!("estimator ladder sizes must be >= 1");
        }
        if e.pilot_draws < 2 {
            bail!("estimator.pilot_draws must be >= 2");
        }
        if !(e.kappa_target > 0.0 && e.kappa_target < 1.0) {
            bail!("estimator.kappa_target must lie in (0, 1)");
        }
        if !(e.q_min > 0.0 && e.q_min < 1.0) {
            bail!("estimator.q_min must lie in (0, 1)");
        }
        if !(e.poisson_lambda > 0.0) {
            bail!("estimator.poisson_lambda must be positive");
        }
        if e.pilot_cell_width <= 0.0 {
            bail!("estimator.pilot_cell_width must be positive");
        }
        if !(self.proposal.init_scale > 0.0) {
            bail!("proposal.init_scale must be positive");
        }
        if !(self.proposal.target_accept > 0.0 && self.proposal.target_accept < 1.0) {
            bail!("proposal.target_accept must lie in (0, 1)");
        }
        Ok(())
    }
}
