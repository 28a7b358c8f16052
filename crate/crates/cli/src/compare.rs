//! Cross-method comparison of run summaries over a shared dataset.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::Result;

use crate::output::read_summary_json;
use crate::runner::Summary;

pub struct Comparison {
    pub summaries: Vec<Summary>,
    /// `(i, j, z)` for every pair, `z = (m_i - m_j) / sqrt(v_i + v_j)` with
    /// each `v` the stored Monte Carlo variance of that run's mean.
    pub z_scores: Vec<(usize, usize, f64)>,
}

pub fn compare_summaries(paths: &[&Path]) -> Result<Comparison> {
    if paths.len() < 2 {
        anyhow::bail!("need at least two summaries to compare");
    }
    let summaries: Vec<Summary> =
        paths.iter().map(|p| read_summary_json(p)).collect::<Result<_>>()?;
    let digest = &summaries[0].dataset_sha256;
    for (s, p) in summaries.iter().zip(paths) {
        if &s.dataset_sha256 != digest {
            anyhow::bail!(
                "{}: dataset digest {} does not match {} — runs are not comparable",
                p.display(),
                s.dataset_sha256,
                digest
            );
        }
    }
    let mut z_scores = Vec::new();
    for i in 0..summaries.len() {
        for j in (i + 1)..summaries.len() {
            let denom = (summaries[i].mean_variance + summaries[j].mean_variance).sqrt();
            let z = (summaries[i].mean - summaries[j].mean) / denom;
            z_scores.push((i, j, z));
        }
    }
    Ok(Comparison { summaries, z_scores })
}

pub fn render(cmp: &Comparison) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<22} {:>10} {:>10} {:>10} {:>8} {:>10} {:>8}",
        "method", "mean", "sd", "ess", "r_hat", "neg_frac", "accept"
    );
    for sum in &cmp.summaries {
        let _ = writeln!(
            s,
            "{:<22} {:>10.5} {:>10.5} {:>10.1} {:>8.4} {:>10.5} {:>8.3}",
            sum.method,
            sum.mean,
            sum.sd,
            sum.ess,
            sum.r_hat,
            sum.negative_fraction,
            sum.acceptance_rate
        );
    }
    let _ = writeln!(s, "\npairwise z-scores of posterior means:");
    for &(i, j, z) in &cmp.z_scores {
        let flag = if z.abs() > 3.0 { "  <-- disagreement" } else { "" };
        let _ = writeln!(
            s,
            "  {} vs {}: z = {:+.3}{}",
            cmp.summaries[i].method, cmp.summaries[j].method, z, flag
        );
    }
    s
}
