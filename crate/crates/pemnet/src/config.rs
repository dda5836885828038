//! Run configuration: one TOML document drives scenario generation, PEM
//! construction, and both case studies.
//!
//! The effective config (after CLI overrides) is hashed with SHA-256 and the
//! hex digest is stamped into every output file, so byte-level reproducibility
//! is always checkable against `(config, seed)`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::env::{ScenarioConfig, TrafficGroundTruth};
use crate::meas::MrSampling;
use crate::{Error, Result};

/// CKM construction parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CkmParams {
    /// Angular bins per transmit antenna: N_a = na_factor * n_tx.
    pub na_factor: usize,
    /// Beams per transmit antenna in the measurement codebook: M = beam_factor * n_tx.
    pub beam_factor: usize,
    /// l1 weight relative to the peak correlation ||A^T r||_inf.
    pub lambda_rel: f64,
    /// Relative objective-decrease stopping tolerance.
    pub tol: f64,
    pub max_iters: usize,
    /// Gaussian kernel bandwidth for spatial interpolation, meters.
    pub bandwidth_m: f64,
    /// APS time-interval length, hours.
    pub interval_h: f64,
}

/// DTM fitting parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DtmParams {
    pub harmonics: usize,
    pub ridge: f64,
}

/// Traffic log synthesis parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrafficSampling {
    pub horizon_h: f64,
    pub sample_every_h: f64,
}

/// Multi-cell beamforming experiment parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BfParams {
    /// Symbols per coherence period.
    pub n0: usize,
    pub n_tx_list: Vec<usize>,
    pub n_trials: usize,
    /// Variance of pilot estimation noise, watts (shared by all CSI modes).
    pub pilot_noise_var: f64,
    /// Evaluation timestamp, hours.
    pub eval_time_h: f64,
    pub wmmse_max_iters: usize,
    pub wmmse_tol: f64,
}

/// Receive beamspace experiment parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RxbeamParams {
    pub d_list: Vec<usize>,
    pub eval_time_h: f64,
}

/// Beam-space gridization experiment parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StfParams {
    pub n_virtual: usize,
    pub max_iters: usize,
    pub floor_db: f64,
}

/// Top-level run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub output_dir: String,
    pub scenario: ScenarioConfig,
    pub traffic: TrafficGroundTruth,
    pub traffic_sampling: TrafficSampling,
    pub measurement: MrSampling,
    pub ckm: CkmParams,
    pub dtm: DtmParams,
    pub bf: BfParams,
    pub rxbeam: RxbeamParams,
    pub stf: StfParams,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        self.traffic.validate()?;
        self.measurement.validate()?;
        if self.ckm.na_factor < 1 || self.ckm.beam_factor < 1 {
            return Err(Error::Config("na_factor and beam_factor must be at least 1".into()));
        }
        if !(self.ckm.interval_h > 0.0) {
            return Err(Error::Config("ckm.interval_h must be positive".into()));
        }
        if !(self.ckm.bandwidth_m > 0.0) {
            return Err(Error::Config("ckm.bandwidth_m must be positive".into()));
        }
        if !(self.traffic_sampling.horizon_h > 0.0 && self.traffic_sampling.sample_every_h > 0.0) {
            return Err(Error::Config("traffic sampling horizon and step must be positive".into()));
        }
        if self.bf.n0 == 0 {
            return Err(Error::Config("bf.n0 must be positive".into()));
        }
        if self.bf.n_trials == 0 {
            return Err(Error::Config("bf.n_trials must be positive".into()));
        }
        for &n_tx in &self.bf.n_tx_list {
            if n_tx < self.scenario.n_paths {
                return Err(Error::Config(format!(
                    "bf.n_tx_list entry {n_tx} is below n_paths = {}",
                    self.scenario.n_paths
                )));
            }
            let n1_max = self.scenario.bs_positions.len() * n_tx;
            if n1_max > self.bf.n0 {
                return Err(Error::Config(format!(
                    "n0 = {} cannot cover the conventional pilot count C*n_tx = {n1_max}",
                    self.bf.n0
                )));
            }
        }
        for &d in &self.rxbeam.d_list {
            if d == 0 || d > self.scenario.n_tx {
                return Err(Error::Config(format!(
                    "rxbeam dimension {d} outside 1..={}",
                    self.scenario.n_tx
                )));
            }
        }
        if self.stf.n_virtual == 0 {
            return Err(Error::Config("stf.n_virtual must be at least 1".into()));
        }
        if !(self.stf.floor_db < 0.0) {
            return Err(Error::Config("stf.floor_db must be negative".into()));
        }
        Ok(())
    }

    /// Loads and validates a TOML config file.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("bad config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// SHA-256 hex digest of the canonical serialized config. Computed on the
    /// effective config, i.e. after any CLI overrides are applied.
    pub fn config_hash(&self) -> String {
        let text = toml::to_string(self).expect("config serializes");
        sha256_hex(text.as_bytes())
    }

    /// Digest over only the fields that determine a built PEM: the scenario,
    /// traffic ground truth, sampling policies, and CKM/DTM parameters.
    /// Experiment knobs (trial counts, scheme lists) may differ between the
    /// build and an evaluation without invalidating the map.
    pub fn pem_hash(&self) -> String {
        let mut text = String::new();
        text.push_str(&toml::to_string(&self.scenario).expect("config serializes"));
        text.push_str("\n--\n");
        text.push_str(&toml::to_string(&self.traffic).expect("config serializes"));
        text.push_str("\n--\n");
        text.push_str(&toml::to_string(&self.traffic_sampling).expect("config serializes"));
        text.push_str("\n--\n");
        text.push_str(&toml::to_string(&self.measurement).expect("config serializes"));
        text.push_str("\n--\n");
        text.push_str(&toml::to_string(&self.ckm).expect("config serializes"));
        text.push_str("\n--\n");
        text.push_str(&toml::to_string(&self.dtm).expect("config serializes"));
        sha256_hex(text.as_bytes())
    }

    /// Copy with a different antenna count (used by the n_tx sweep).
    pub fn with_n_tx(&self, n_tx: usize) -> RunConfig {
        let mut cfg = self.clone();
        cfg.scenario.n_tx = n_tx;
        cfg
    }

    /// Measurement codebook size for the current scenario.
    pub fn m_beams(&self) -> usize {
        self.ckm.beam_factor * self.scenario.n_tx
    }

    /// Angular grid size for the current scenario.
    pub fn n_angles(&self) -> usize {
        self.ckm.na_factor * self.scenario.n_tx
    }

    /// Three-cell demo: boundary BSs facing the area center, hotspot traffic
    /// near the cell edges.
    pub fn mcbf_demo() -> RunConfig {
        RunConfig {
            output_dir: "runs/mcbf".into(),
            scenario: ScenarioConfig {
                area_width: 150.0,
                area_height: 150.0,
                grid_size: 10.0,
                bs_positions: vec![[0.0, 0.0], [150.0, 0.0], [75.0, 150.0]],
                n_tx: 16,
                n_paths: 4,
                n_ues: 36,
                tx_power: 1.0,
                noise_power: 1e-12,
                pathloss_exponent: 3.0,
                pathloss_ref_db: 30.0,
                rng_seed: 1,
            },
            traffic: TrafficGroundTruth {
                gmm_means: vec![[75.0, 40.0], [40.0, 85.0], [110.0, 85.0]],
                gmm_covs: vec![
                    [[350.0, 0.0], [0.0, 350.0]],
                    [[250.0, 40.0], [40.0, 250.0]],
                    [[250.0, -40.0], [-40.0, 250.0]],
                ],
                gmm_weights: vec![0.4, 0.3, 0.3],
                amp_base: 1.0,
                amp_peak: 3.0,
                amp_period_h: 24.0,
                noise_std: 2e-5,
            },
            traffic_sampling: TrafficSampling { horizon_h: 72.0, sample_every_h: 1.0 },
            measurement: MrSampling {
                records_per_grid_mean: 3.0,
                coverage_fraction: 1.0,
                n_snapshots: 200,
                meas_noise_std: 0.0,
                horizon_h: 72.0,
            },
            ckm: CkmParams {
                na_factor: 4,
                beam_factor: 2,
                lambda_rel: 1e-3,
                tol: 1e-9,
                max_iters: 1200,
                bandwidth_m: 20.0,
                interval_h: 72.0,
            },
            dtm: DtmParams { harmonics: 2, ridge: 1e-6 },
            bf: BfParams {
                n0: 500,
                n_tx_list: vec![8, 16, 32, 64],
                n_trials: 50,
                pilot_noise_var: 1e-10,
                eval_time_h: 6.0,
                wmmse_max_iters: 100,
                wmmse_tol: 1e-5,
            },
            rxbeam: RxbeamParams { d_list: vec![2, 4, 8], eval_time_h: 6.0 },
            stf: StfParams { n_virtual: 16, max_iters: 100, floor_db: -30.0 },
        }
    }

    /// Single corner BS over a 150 m x 150 m area with three dense user
    /// clusters; the receive beamspace demo.
    pub fn rxbeam_demo() -> RunConfig {
        let mut cfg = RunConfig::mcbf_demo();
        cfg.output_dir = "runs/rxbeam".into();
        cfg.scenario.bs_positions = vec![[0.0, 0.0]];
        cfg.scenario.n_tx = 16;
        cfg.scenario.n_ues = 36;
        cfg.traffic = TrafficGroundTruth {
            gmm_means: vec![[35.0, 105.0], [95.0, 55.0], [120.0, 120.0]],
            gmm_covs: vec![
                [[150.0, 0.0], [0.0, 150.0]],
                [[150.0, 30.0], [30.0, 150.0]],
                [[120.0, 0.0], [0.0, 120.0]],
            ],
            gmm_weights: vec![0.4, 0.35, 0.25],
            amp_base: 1.0,
            amp_peak: 3.0,
            amp_period_h: 24.0,
            noise_std: 2e-5,
        };
        cfg.bf.n_tx_list = vec![8, 16];
        cfg.bf.n_trials = 5;
        cfg
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
