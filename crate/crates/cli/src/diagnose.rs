//! Recomputes sign-corrected diagnostics from a persisted chain CSV.

use std::path::Path;

use anyhow::Result;
use serde::Serialize;

use rrmc::pm_mcmc::sign_corrected_expectation;

use crate::output::read_chain_csv;

#[derive(Debug, Serialize)]
pub struct Diagnostics {
    pub n_records: usize,
    pub burn_in: usize,
    pub mean: f64,
    pub sd: f64,
    pub mean_variance: f64,
    pub ess: f64,
    pub r_hat: f64,
    pub v_hat: f64,
    pub negative_fraction: f64,
    pub acceptance_rate: f64,
    pub mean_terms_per_iter: f64,
    pub mean_normalizer_draws_per_iter: f64,
}

pub fn diagnose_chain(path: &Path, burn_in: usize) -> Result<Diagnostics> {
    let records = read_chain_csv(path)?;
    if burn_in >= records.len() {
        anyhow::bail!("burn-in {burn_in} >= chain length {}", records.len());
    }
    let tail = &records[burn_in..];
    let first = sign_corrected_expectation(tail, &|t| t[0])?;
    let second = sign_corrected_expectation(tail, &|t| t[0] * t[0])?;
    let var = (second.estimate - first.estimate * first.estimate).max(0.0);
    let n = tail.len() as f64;
    Ok(Diagnostics {
        n_records: records.len(),
        burn_in,
        mean: first.estimate,
        sd: var.sqrt(),
        mean_variance: first.variance,
        ess: first.ess,
        r_hat: first.r_hat,
        v_hat: first.v_hat,
        negative_fraction: first.negative_fraction,
        acceptance_rate: tail.iter().filter(|r| r.accepted).count() as f64 / n,
        mean_terms_per_iter: tail.iter().map(|r| r.n_terms as f64).sum::<f64>() / n,
        mean_normalizer_draws_per_iter: tail
            .iter()
            .map(|r| r.n_normalizer_draws as f64)
            .sum::<f64>()
            / n,
    })
}
