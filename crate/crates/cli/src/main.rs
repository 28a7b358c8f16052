use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use rrmc::ising::{cftp_sample_budget, IsingParams, CFTP_DEFAULT_BUDGET};
use rrmc::rngstream::substream;

use rrmc_cli::compare::{compare_summaries, render};
use rrmc_cli::config::ExperimentConfig;
use rrmc_cli::diagnose::diagnose_chain;
use rrmc_cli::output::{write_chain_csv, write_summary_json};
use rrmc_cli::runner::{run_experiment, sha256_hex};

#[derive(Parser)]
#[command(name = "rrmc", about = "Pseudo-marginal MCMC with unbiased likelihood estimates")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment described by a TOML/JSON config.
    Run {
        config: PathBuf,
        /// Override the output directory from the config.
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Compare summary JSON files produced over the same dataset.
    Compare { summaries: Vec<PathBuf> },
    /// Recompute diagnostics from a chain CSV.
    Diagnose {
        chain: PathBuf,
        #[arg(long, default_value_t = 0)]
        burn_in: usize,
    },
    /// Simulate Fisher-Bingham data on the unit sphere (normal form,
    /// lambda1 = lambda2 = 0).
    BinghamSimulate {
        #[arg(long)]
        lambda3: f64,
        #[arg(long, default_value_t = 20)]
        n_points: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw an exact Ising configuration via coupling from the past.
    IsingSimulate {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0.0)]
        alpha: f64,
        #[arg(long)]
        beta: f64,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = CFTP_DEFAULT_BUDGET)]
        budget: u64,
    },
}

/// Exit codes: 0 ok, 2 configuration/IO, 3 numerical failure, 4 CFTP
/// non-coalescence.
fn classify(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<rrmc::Error>() {
            return classify_rrmc(e);
        }
    }
    2
}

fn classify_rrmc(err: &rrmc::Error) -> u8 {
    match err {
        rrmc::Error::CoalescenceFailure { .. } => 4,
        rrmc::Error::ChainAborted { source, .. } => classify_rrmc(source),
        _ => 3,
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { config, output_dir } => {
            let (mut cfg, raw) = ExperimentConfig::from_path(&config)?;
            if let Some(dir) = output_dir {
                cfg.output_dir = dir;
            }
            std::fs::create_dir_all(&cfg.output_dir)
                .with_context(|| format!("cannot create {}", cfg.output_dir.display()))?;
            let outcome = run_experiment(&cfg, &raw)?;
            let stem = format!("{}_{}", outcome.summary.model, outcome.summary.method);
            let chain_path = cfg.output_dir.join(format!("{stem}_chain.csv"));
            let summary_path = cfg.output_dir.join(format!("{stem}_summary.json"));
            write_chain_csv(&chain_path, &outcome.records)?;
            write_summary_json(&summary_path, &outcome.summary)?;
            println!(
                "{}: mean = {:.6}, sd = {:.6}, ess = {:.1}, r_hat = {:.4}, neg = {:.5}, accept = {:.3}",
                outcome.summary.method,
                outcome.summary.mean,
                outcome.summary.sd,
                outcome.summary.ess,
                outcome.summary.r_hat,
                outcome.summary.negative_fraction,
                outcome.summary.acceptance_rate,
            );
            println!("chain:   {}", chain_path.display());
            println!("summary: {}", summary_path.display());
        }
        Command::Compare { summaries } => {
            let paths: Vec<&std::path::Path> = summaries.iter().map(|p| p.as_path()).collect();
            let cmp = compare_summaries(&paths)?;
            print!("{}", render(&cmp));
        }
        Command::Diagnose { chain, burn_in } => {
            let diag = diagnose_chain(&chain, burn_in)?;
            println!("{}", serde_json::to_string_pretty(&diag)?);
        }
        Command::BinghamSimulate { lambda3, n_points, seed, out } => {
            let params = rrmc::bingham::BinghamParams::new(0.0, lambda3)?;
            let mut rng = substream(seed, "bingham-data", 0);
            let points = rrmc::bingham::simulate_bingham_data(params, n_points, &mut rng);
            let mut text = String::new();
            for p in points {
                let [a, b, c] = p.coords();
                text.push_str(&format!("{a},{b},{c}\n"));
            }
            std::fs::write(&out, &text)
                .with_context(|| format!("cannot write {}", out.display()))?;
            println!("wrote {} (sha256 {})", out.display(), sha256_hex(text.as_bytes()));
        }
        Command::IsingSimulate { n, alpha, beta, seed, out, budget } => {
            let mut rng = substream(seed, "cftp-data", 0);
            let lattice = cftp_sample_budget(n, IsingParams::new(alpha, beta), budget, &mut rng)?;
            let text = lattice.to_text();
            std::fs::write(&out, &text)
                .with_context(|| format!("cannot write {}", out.display()))?;
            println!("wrote {} (sha256 {})", out.display(), sha256_hex(text.as_bytes()));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(classify(&err))
        }
    }
}
