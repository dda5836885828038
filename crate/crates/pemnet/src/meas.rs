//! Standard-style multi-beam RSRP measurement synthesis.
//!
//! Each record mimics a measurement report: a vector of per-beam received
//! powers averaged over fading snapshots, tagged with the measured cell, a
//! timestamp, and (when known) the true grid. A location-free view with the
//! grid tag withheld feeds the beam-space gridization experiment.

use std::f64::consts::PI;
use std::io::Write;

use nalgebra::DVector;
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::env::{realize_channel, GridMap, PathProfile, PathProfiles, ScenarioConfig};
use crate::{fmt_f64, Error, Result, SimRng};

/// A set of unit-norm transmit/receive beams.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamCodebook {
    pub beams: Vec<DVector<Complex64>>,
}

impl BeamCodebook {
    pub fn m_beams(&self) -> usize {
        self.beams.len()
    }

    pub fn n_tx(&self) -> usize {
        self.beams.first().map_or(0, |b| b.len())
    }
}

/// DFT codebook with beams uniform in sin-angle space:
/// beam m = n^{-1/2} [exp(i pi n u_m)]_n, u_m = -1 + (2m+1)/M.
pub fn dft_codebook(n_tx: usize, m_beams: usize) -> BeamCodebook {
    assert!(n_tx >= 1 && m_beams >= 1);
    let scale = 1.0 / (n_tx as f64).sqrt();
    let beams = (0..m_beams)
        .map(|m| {
            let u = -1.0 + (2.0 * m as f64 + 1.0) / m_beams as f64;
            DVector::from_fn(n_tx, |n, _| Complex64::from_polar(scale, PI * n as f64 * u))
        })
        .collect();
    BeamCodebook { beams }
}

/// One measurement report row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RsrpRecord {
    pub record_id: u64,
    pub cell_id: usize,
    /// `None` marks an UNKNOWN location tag (the MR case: no UE coordinates).
    pub grid_id: Option<usize>,
    pub time_h: f64,
    pub n_snapshots: usize,
    /// Per-beam linear received powers, watts.
    pub rsrp: Vec<f64>,
}

/// Sampling policy for the synthesized MR dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MrSampling {
    /// Poisson mean of records per covered (cell, grid) pair, clipped below at 1.
    pub records_per_grid_mean: f64,
    /// Probability that a grid produces any records at all.
    pub coverage_fraction: f64,
    /// Fading snapshots averaged into one record.
    pub n_snapshots: usize,
    /// Std of additive per-beam measurement noise, watts.
    pub meas_noise_std: f64,
    /// Timestamps are uniform over [0, horizon_h).
    pub horizon_h: f64,
}

impl MrSampling {
    pub fn validate(&self) -> Result<()> {
        if !(self.coverage_fraction > 0.0 && self.coverage_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "coverage_fraction must be in (0, 1], got {}",
                self.coverage_fraction
            )));
        }
        if self.n_snapshots < 1 {
            return Err(Error::Config("n_snapshots must be at least 1".into()));
        }
        if !(self.horizon_h > 0.0) {
            return Err(Error::Config("horizon_h must be positive".into()));
        }
        if !(self.records_per_grid_mean >= 0.0) {
            return Err(Error::Config("records_per_grid_mean must be non-negative".into()));
        }
        Ok(())
    }
}

/// Multi-beam RSRP of one link: per-beam average of |b^H h|^2 over snapshots
/// plus clipped Gaussian measurement noise.
pub fn synthesize_rsrp(
    profile: &PathProfile,
    codebook: &BeamCodebook,
    n_snapshots: usize,
    meas_noise_std: f64,
    rng: &mut SimRng,
) -> Vec<f64> {
    let m = codebook.m_beams();
    let n_tx = codebook.n_tx();
    let mut rsrp = vec![0.0; m];
    for _ in 0..n_snapshots {
        let h = realize_channel(profile, n_tx, rng);
        for (i, b) in codebook.beams.iter().enumerate() {
            rsrp[i] += b.dotc(&h).norm_sqr();
        }
    }
    for v in &mut rsrp {
        *v /= n_snapshots as f64;
    }
    if meas_noise_std > 0.0 {
        let noise = Normal::new(0.0, meas_noise_std).expect("finite noise std");
        for v in &mut rsrp {
            *v = (*v + noise.sample(rng)).max(0.0);
        }
    }
    rsrp
}

/// Expected RSRP of a link: sum_p beta_p |b_m^H a(theta_p)|^2 per beam.
pub fn expected_rsrp(profile: &PathProfile, codebook: &BeamCodebook) -> Vec<f64> {
    let n_tx = codebook.n_tx();
    codebook
        .beams
        .iter()
        .map(|b| {
            profile
                .angles
                .iter()
                .zip(&profile.powers)
                .map(|(&theta, &beta)| {
                    let s = theta.sin();
                    let a = DVector::from_fn(n_tx, |n, _| {
                        Complex64::from_polar(1.0, PI * n as f64 * s)
                    });
                    beta * b.dotc(&a).norm_sqr()
                })
                .sum()
        })
        .collect()
}

/// Synthesizes the MR dataset: a Bernoulli(coverage) subset of grids produces
/// records; each covered grid reports every cell's beams (serving and
/// neighbors, as MR does) with a Poisson record count clipped below at one.
pub fn generate_mr_dataset(
    config: &ScenarioConfig,
    grid_map: &GridMap,
    profiles: &PathProfiles,
    codebook: &BeamCodebook,
    sampling: &MrSampling,
    rng: &mut SimRng,
) -> Result<Vec<RsrpRecord>> {
    sampling.validate()?;
    let covered: Vec<usize> = (0..grid_map.n_grids())
        .filter(|_| rng.gen::<f64>() < sampling.coverage_fraction)
        .collect();
    let poisson = if sampling.records_per_grid_mean > 0.0 {
        Some(Poisson::new(sampling.records_per_grid_mean).map_err(|e| Error::Config(e.to_string()))?)
    } else {
        None
    };
    let mut records = Vec::new();
    let mut next_id = 0u64;
    for &gid in &covered {
        for cell in 0..config.n_cells() {
            let count = poisson
                .as_ref()
                .map_or(1usize, |p| (p.sample(rng) as usize).max(1));
            for _ in 0..count {
                let time_h = rng.gen_range(0.0..sampling.horizon_h);
                let rsrp = synthesize_rsrp(
                    profiles.get(cell, gid),
                    codebook,
                    sampling.n_snapshots,
                    sampling.meas_noise_std,
                    rng,
                );
                records.push(RsrpRecord {
                    record_id: next_id,
                    cell_id: cell,
                    grid_id: Some(gid),
                    time_h,
                    n_snapshots: sampling.n_snapshots,
                    rsrp,
                });
                next_id += 1;
            }
        }
    }
    Ok(records)
}

/// UNKNOWN-tagged copy of a dataset (grid truth withheld).
pub fn location_free_view(records: &[RsrpRecord]) -> Vec<RsrpRecord> {
    records
        .iter()
        .map(|r| RsrpRecord { grid_id: None, ..r.clone() })
        .collect()
}

/// Writes the dataset CSV: record_id, cell_id, grid_id (-1 if unknown),
/// time_h, n_snapshots, rsrp_0..rsrp_{M-1}.
pub fn write_mr_csv<W: Write>(out: &mut W, records: &[RsrpRecord], config_hash: &str) -> Result<()> {
    let m = records.first().map_or(0, |r| r.rsrp.len());
    writeln!(out, "# config_hash={config_hash}")?;
    let mut header = String::from("record_id,cell_id,grid_id,time_h,n_snapshots");
    for i in 0..m {
        header.push_str(&format!(",rsrp_{i}"));
    }
    writeln!(out, "{header}")?;
    for r in records {
        let gid = r.grid_id.map_or(-1i64, |g| g as i64);
        let mut line = format!(
            "{},{},{},{},{}",
            r.record_id,
            r.cell_id,
            gid,
            fmt_f64(r.time_h),
            r.n_snapshots
        );
        for v in &r.rsrp {
            line.push(',');
            line.push_str(&fmt_f64(*v));
        }
        writeln!(out, "{line}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{build_grid_map, generate_path_profiles, steering_vector};
    use crate::substream;
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    fn test_config() -> ScenarioConfig {
        ScenarioConfig {
            area_width: 150.0,
            area_height: 150.0,
            grid_size: 10.0,
            bs_positions: vec![[0.0, 0.0], [150.0, 0.0], [75.0, 150.0]],
            n_tx: 8,
            n_paths: 4,
            n_ues: 36,
            tx_power: 1.0,
            noise_power: 1e-12,
            pathloss_exponent: 3.0,
            pathloss_ref_db: 30.0,
            rng_seed: 7,
        }
    }

    #[test]
    fn dft_2x2_is_orthogonal() {
        let cb = dft_codebook(2, 2);
        let ip = cb.beams[0].dotc(&cb.beams[1]).norm();
        assert!(ip < 1e-12);
        for b in &cb.beams {
            assert_relative_eq!(b.norm(), 1.0, max_relative = 1e-12);
        }
    }

    #[test]
    fn dft_4x4_gram_is_identity() {
        let cb = dft_codebook(4, 4);
        for i in 0..4 {
            for j in 0..4 {
                let g = cb.beams[i].dotc(&cb.beams[j]);
                let want = if i == j { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(g.norm(), want, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn oversampled_dft_has_unit_norm_and_overlap() {
        // Direct Gram computation oracle for the 4x8 codebook.
        let cb = dft_codebook(4, 8);
        assert_eq!(cb.m_beams(), 8);
        for b in &cb.beams {
            assert_relative_eq!(b.norm(), 1.0, max_relative = 1e-12);
        }
        for m in 0..7 {
            let overlap = cb.beams[m].dotc(&cb.beams[m + 1]).norm();
            assert!(overlap > 0.0, "adjacent beams {m},{} have zero overlap", m + 1);
        }
    }

    #[test]
    fn single_path_at_beam_direction_is_exact() {
        // With one path the per-snapshot power is phase-free, so any snapshot
        // count gives the closed form exactly: beta * |b^H a|^2.
        let n_tx = 4;
        let cb = dft_codebook(n_tx, n_tx);
        let u1 = -1.0 + 3.0 / n_tx as f64; // beam 1 direction
        let theta = u1.asin();
        let beta = 2.5e-9;
        let profile = PathProfile { angles: vec![theta], powers: vec![beta], delays: vec![0.0] };
        let rsrp = synthesize_rsrp(&profile, &cb, 3, 0.0, &mut substream(1, 0));
        let a = steering_vector(theta, n_tx).unwrap();
        for (m, b) in cb.beams.iter().enumerate() {
            let want = beta * b.dotc(&a).norm_sqr();
            assert_relative_eq!(rsrp[m], want, max_relative = 1e-9);
            if m == 1 {
                assert_relative_eq!(want, beta * n_tx as f64, max_relative = 1e-9);
            }
        }
    }

    #[test]
    fn zero_power_profile_gives_zero_rsrp() {
        let profile = PathProfile { angles: vec![0.1], powers: vec![0.0], delays: vec![0.0] };
        let cb = dft_codebook(4, 8);
        let rsrp = synthesize_rsrp(&profile, &cb, 5, 0.0, &mut substream(1, 0));
        assert!(rsrp.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn snapshot_average_approaches_expectation() {
        // Monte-Carlo oracle at 1e4 snapshots: max relative deviation <= 5%.
        let profile = PathProfile {
            angles: vec![-0.6, 0.05, 0.3, 0.8],
            powers: vec![4e-9, 2e-9, 3e-9, 1e-9],
            delays: vec![0.0; 4],
        };
        let cb = dft_codebook(8, 16);
        let rsrp = synthesize_rsrp(&profile, &cb, 10_000, 0.0, &mut substream(2, 0));
        let expect = expected_rsrp(&profile, &cb);
        let peak = expect.iter().cloned().fold(0.0, f64::max);
        for (got, want) in rsrp.iter().zip(&expect) {
            // Beams with negligible power are dominated by cross-path noise;
            // compare against the peak to keep the ratio meaningful.
            if *want > 1e-3 * peak {
                assert_relative_eq!(got, want, max_relative = 0.05);
            }
        }
    }

    #[test]
    fn full_coverage_reports_every_grid() {
        let cfg = test_config();
        let gm = build_grid_map(&cfg).unwrap();
        let profiles = generate_path_profiles(&cfg, &gm, &mut substream(cfg.rng_seed, 0));
        let cb = dft_codebook(cfg.n_tx, 2 * cfg.n_tx);
        let sampling = MrSampling {
            records_per_grid_mean: 1.0,
            coverage_fraction: 1.0,
            n_snapshots: 2,
            meas_noise_std: 0.0,
            horizon_h: 24.0,
        };
        let records =
            generate_mr_dataset(&cfg, &gm, &profiles, &cb, &sampling, &mut substream(1, 1)).unwrap();
        let mut seen = vec![false; gm.n_grids()];
        for r in &records {
            seen[r.grid_id.unwrap()] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn partial_coverage_within_binomial_band() {
        let cfg = test_config();
        let gm = build_grid_map(&cfg).unwrap();
        let profiles = generate_path_profiles(&cfg, &gm, &mut substream(cfg.rng_seed, 0));
        let cb = dft_codebook(cfg.n_tx, 2 * cfg.n_tx);
        let sampling = MrSampling {
            records_per_grid_mean: 1.0,
            coverage_fraction: 0.6,
            n_snapshots: 1,
            meas_noise_std: 0.0,
            horizon_h: 24.0,
        };
        let records =
            generate_mr_dataset(&cfg, &gm, &profiles, &cb, &sampling, &mut substream(1, 2)).unwrap();
        let mut seen = vec![false; gm.n_grids()];
        for r in &records {
            seen[r.grid_id.unwrap()] = true;
        }
        let covered = seen.iter().filter(|&&s| s).count() as f64;
        let n = gm.n_grids() as f64;
        let mean = 0.6 * n;
        let sigma = (n * 0.6 * 0.4).sqrt();
        assert!((covered - mean).abs() <= 3.0 * sigma, "covered {covered} of {n}");
    }

    #[test]
    fn dataset_bytes_deterministic_under_seed() {
        let cfg = test_config();
        let gm = build_grid_map(&cfg).unwrap();
        let profiles = generate_path_profiles(&cfg, &gm, &mut substream(cfg.rng_seed, 0));
        let cb = dft_codebook(cfg.n_tx, 2 * cfg.n_tx);
        let sampling = MrSampling {
            records_per_grid_mean: 2.0,
            coverage_fraction: 0.8,
            n_snapshots: 2,
            meas_noise_std: 1e-12,
            horizon_h: 24.0,
        };
        let mut bufs = Vec::new();
        for _ in 0..2 {
            let records =
                generate_mr_dataset(&cfg, &gm, &profiles, &cb, &sampling, &mut substream(9, 3))
                    .unwrap();
            let mut buf = Vec::new();
            write_mr_csv(&mut buf, &records, "deadbeef").unwrap();
            bufs.push(buf);
        }
        assert_eq!(bufs[0], bufs[1]);
    }

    #[test]
    fn location_free_view_withholds_grid() {
        let r = RsrpRecord {
            record_id: 0,
            cell_id: 1,
            grid_id: Some(12),
            time_h: 0.5,
            n_snapshots: 4,
            rsrp: vec![1.0, 2.0],
        };
        let v = location_free_view(&[r.clone()]);
        assert_eq!(v[0].grid_id, None);
        assert_eq!(v[0].rsrp, r.rsrp);
    }
}
