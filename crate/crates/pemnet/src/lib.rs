//! Perception embedding map (PEM) simulator and library.
//!
//! A PEM is a site-specific, queryable database that maps a space-time
//! feature `(z, t)` — grid identity plus timestamp — to large-scale channel
//! knowledge (the per-grid angular power spectrum, kept in a channel
//! knowledge map) and traffic demand (per-grid periodic regression models,
//! kept in a data traffic map). The crate synthesizes standard-style
//! multi-beam RSRP measurement reports and traffic logs over a configurable
//! multi-cell scenario, builds the PEM from them, and evaluates two
//! optimization case studies on top of it:
//!
//! * overhead-aware multi-cell coordinated beamforming ([`bf`]), comparing
//!   conventional pilot-based CSI acquisition against PEM-assisted CSI with
//!   far fewer pilot symbols, scored by effective sum rate;
//! * occurrence-weighted receive beamspace design ([`rxbeam`]), where the
//!   dominant eigenmodes of a traffic-weighted covariance are compared
//!   against a fixed DFT beam subset.
//!
//! The `pemnet` binary exposes the pipeline as subcommands: `build-pem`,
//! `eval-mcbf`, `eval-rxbeam`, `eval-gridize`. All randomness flows through
//! explicitly seeded generators so every command is reproducible byte for
//! byte from `(config, seed)`.

pub mod bf;
pub mod ckm;
pub mod cli;
pub mod config;
pub mod dtm;
pub mod env;
pub mod meas;
pub mod pem;
pub mod rxbeam;
pub mod stf;

/// Deterministic generator used throughout the crate. Independent substreams
/// (per trial, per dataset) come from [`substream`].
pub type SimRng = rand_chacha::ChaCha8Rng;

/// Derives an independent, reproducible RNG substream from a master seed.
///
/// ChaCha streams are statistically independent for distinct `stream` ids,
/// so concurrent or reordered consumers cannot perturb each other's draws.
pub fn substream(seed: u64, stream: u64) -> SimRng {
    use rand::SeedableRng;
    let mut rng = SimRng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// RNG stream ids: the reproducibility contract between dataset generation,
/// PEM builds, and experiment trials. Keying the measurement stream by n_tx
/// lets the antenna sweep rebuild the exact dataset a standalone build used.
pub mod streams {
    pub const PROFILES: u64 = 1;
    pub const TRAFFIC: u64 = 2;
    pub const GRIDIZE: u64 = 3;

    pub fn mr(n_tx: usize) -> u64 {
        0x100 + n_tx as u64
    }

    pub fn trial(n_tx: usize, trial: usize) -> u64 {
        0x1_0000_0000 + (n_tx as u64) * 0x10_0000 + trial as u64
    }
}

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("empty measurement")]
    EmptyMeasurement,
    #[error("uninterpolatable: cell {cell} has no measured grids in interval {interval}")]
    Uninterpolatable { cell: usize, interval: usize },
    #[error("no demand: all predicted traffic means are zero")]
    NoDemand,
    #[error("unknown grid id {0}")]
    UnknownGrid(usize),
    #[error("solver failure: {0}")]
    Solver(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

/// Formats an `f64` so that parsing the string recovers the exact bits.
/// Rust's `Display` for floats is shortest-round-trip, which is what the
/// byte-determinism checks on CSV output rely on.
pub fn fmt_f64(x: f64) -> String {
    format!("{x}")
}
