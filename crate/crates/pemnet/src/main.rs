//! `pemnet` command line: build a perception embedding map from synthesized
//! measurement logs and evaluate the beamforming case studies on it.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pemnet::bf::Scheme;
use pemnet::cli::{cmd_build_pem, cmd_eval_gridize, cmd_eval_mcbf, cmd_eval_rxbeam, exit_code};
use pemnet::config::RunConfig;
use pemnet::Result;

#[derive(Parser)]
#[command(name = "pemnet", version, about = "Perception embedding map simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to output_dir from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides scenario.rng_seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate datasets, build the PEM, and serialize it.
    BuildPem {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Multi-cell beamforming sweep over the configured antenna counts.
    EvalMcbf {
        #[command(flatten)]
        common: CommonArgs,
        /// Directory holding a PEM built from the same config.
        #[arg(long)]
        pem: PathBuf,
        /// Overrides bf.n_trials.
        #[arg(long)]
        trials: Option<usize>,
        /// Comma-separated scheme subset, e.g. MCBF_IDEAL,PCBF_CONV.
        #[arg(long)]
        schemes: Option<String>,
    },
    /// Receive beamspace comparison against the DFT baseline.
    EvalRxbeam {
        #[command(flatten)]
        common: CommonArgs,
        /// Directory holding a PEM built from the same config.
        #[arg(long)]
        pem: PathBuf,
    },
    /// Beam-space gridization purity against withheld truth tags.
    EvalGridize {
        #[command(flatten)]
        common: CommonArgs,
    },
}

fn load_config(common: &CommonArgs) -> Result<(RunConfig, PathBuf)> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.scenario.rng_seed = seed;
    }
    let out = common.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.output_dir));
    Ok((cfg, out))
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::BuildPem { common } => {
            let (cfg, out) = load_config(&common)?;
            cmd_build_pem(&cfg, &out)
        }
        Command::EvalMcbf { common, pem, trials, schemes } => {
            let (mut cfg, out) = load_config(&common)?;
            if let Some(n) = trials {
                cfg.bf.n_trials = n;
            }
            let schemes: Vec<Scheme> = match schemes {
                Some(list) => list
                    .split(',')
                    .map(|s| Scheme::parse(s.trim()))
                    .collect::<Result<_>>()?,
                None => Scheme::ALL.to_vec(),
            };
            cmd_eval_mcbf(&cfg, &pem, &out, &schemes)
        }
        Command::EvalRxbeam { common, pem } => {
            let (cfg, out) = load_config(&common)?;
            cmd_eval_rxbeam(&cfg, &pem, &out)
        }
        Command::EvalGridize { common } => {
            let (cfg, out) = load_config(&common)?;
            cmd_eval_gridize(&cfg, &out)
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err) as u8)
        }
    }
}
