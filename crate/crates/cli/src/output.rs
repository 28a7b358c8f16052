//! Chain CSV and summary JSON persistence with a fixed, versioned layout.

use std::path::Path;

use anyhow::{Context, Result};
use rrmc::pm_mcmc::ChainRecord;

use crate::runner::Summary;

/// Fixed leading columns; `theta` columns are inserted after `iter`.
const FIXED_COLUMNS: [&str; 6] =
    ["sign", "log_abs_estimate", "accepted", "n_terms", "n_normalizer_draws", "log_aux_nu"];

pub fn write_chain_csv(path: &Path, records: &[ChainRecord]) -> Result<()> {
    let dim = records.first().map_or(1, |r| r.theta.len());
    let mut w = csv::Writer::from_path(path)
        .with_context(|| format!("cannot create {}", path.display()))?;
    let mut header = vec!["iter".to_string()];
    header.extend((0..dim).map(|d| format!("theta{d}")));
    header.extend(FIXED_COLUMNS.iter().map(|s| s.to_string()));
    w.write_record(&header)?;
    for (i, rec) in records.iter().enumerate() {
        let mut row = vec![i.to_string()];
        row.extend(rec.theta.iter().map(|t| t.to_string()));
        row.push(rec.sign.to_string());
        row.push(rec.log_abs_estimate.to_string());
        row.push(u8::from(rec.accepted).to_string());
        row.push(rec.n_terms.to_string());
        row.push(rec.n_normalizer_draws.to_string());
        row.push(rec.log_aux_nu.map_or(String::new(), |v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_chain_csv(path: &Path) -> Result<Vec<ChainRecord>> {
    let mut rdr = csv::Reader::from_path(path)
        .with_context(|| format!("cannot read {}", path.display()))?;
    let header = rdr.headers()?.clone();
    let dim = header.iter().filter(|h| h.starts_with("theta")).count();
    if dim == 0 {
        anyhow::bail!("{}: no theta columns", path.display());
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.with_context(|| format!("row {i}"))?;
        let get = |name: &str| -> Result<&str> {
            header
                .iter()
                .position(|h| h == name)
                .and_then(|j| rec.get(j))
                .with_context(|| format!("row {i}: missing column {name}"))
        };
        let mut theta = Vec::with_capacity(dim);
        for d in 0..dim {
            theta.push(get(&format!("theta{d}"))?.parse()?);
        }
        let nu = get("log_aux_nu")?;
        out.push(ChainRecord {
            theta,
            log_abs_estimate: get("log_abs_estimate")?.parse()?,
            sign: get("sign")?.parse()?,
            accepted: get("accepted")? == "1",
            n_terms: get("n_terms")?.parse()?,
            n_normalizer_draws: get("n_normalizer_draws")?.parse()?,
            log_aux_nu: if nu.is_empty() { None } else { Some(nu.parse()?) },
        });
    }
    Ok(out)
}

pub fn write_summary_json(path: &Path, summary: &Summary) -> Result<()> {
    let json = serde_json::to_string_pretty(summary)?;
    std::fs::write(path, json + "\n")
        .with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

pub fn read_summary_json(path: &Path) -> Result<Summary> {
    let bytes =
        std::fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
    Ok(serde_json::from_slice(&bytes)?)
}
