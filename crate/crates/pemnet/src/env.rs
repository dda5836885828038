//! Synthetic physical world: geometry, grids, multipath channels, and
//! ground-truth spatial-temporal traffic.
//!
//! The coverage area is a rectangle tiled into uniform square grids, each
//! assigned to its nearest base station. Every (cell, grid) link carries a
//! fixed multipath profile — angles, mean path powers, delays — from which
//! block-fading channel realizations are drawn. Traffic volume is a Gaussian
//! mixture over space modulated by a rectified daily sinusoid.

use std::f64::consts::PI;

use nalgebra::DVector;
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::{Error, Result, SimRng};

/// 2-D point in meters.
pub type Point = [f64; 2];

pub fn dist(a: Point, b: Point) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Speed of light, m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Maximum excess delay of a non-LOS path, seconds.
pub const MAX_EXCESS_DELAY_S: f64 = 1e-6;

/// Scenario geometry and radio parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    /// Coverage area width, meters. Must be a positive multiple of `grid_size`.
    pub area_width: f64,
    /// Coverage area height, meters. Must be a positive multiple of `grid_size`.
    pub area_height: f64,
    /// Square grid edge, meters.
    pub grid_size: f64,
    /// Base station positions, meters.
    pub bs_positions: Vec<Point>,
    /// Transmit antennas per base station (uniform linear array).
    pub n_tx: usize,
    /// Propagation paths per (cell, grid) link.
    pub n_paths: usize,
    /// Total active user count placed per evaluation snapshot.
    pub n_ues: usize,
    /// Per-cell transmit power budget, watts.
    pub tx_power: f64,
    /// Receiver noise power, watts.
    pub noise_power: f64,
    /// Log-distance pathloss exponent.
    pub pathloss_exponent: f64,
    /// Pathloss at the 1 m reference distance, dB.
    pub pathloss_ref_db: f64,
    /// Master seed; all randomness derives from it.
    pub rng_seed: u64,
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if !(self.grid_size > 0.0) {
            return err(format!("grid_size must be positive, got {}", self.grid_size));
        }
        for (name, v) in [("area_width", self.area_width), ("area_height", self.area_height)] {
            if !(v > 0.0) {
                return err(format!("{name} must be positive, got {v}"));
            }
            let ratio = v / self.grid_size;
            if (ratio - ratio.round()).abs() > 1e-9 * ratio.max(1.0) {
                return err(format!("{name} = {v} is not a multiple of grid_size = {}", self.grid_size));
            }
        }
        if self.bs_positions.is_empty() {
            return err("at least one base station is required".into());
        }
        if self.n_paths < 1 {
            return err("n_paths must be at least 1".into());
        }
        if self.n_tx < self.n_paths {
            return err(format!("n_tx = {} must be >= n_paths = {}", self.n_tx, self.n_paths));
        }
        if !(self.tx_power > 0.0) {
            return err(format!("tx_power must be positive, got {}", self.tx_power));
        }
        if !(self.noise_power > 0.0) {
            return err(format!("noise_power must be positive, got {}", self.noise_power));
        }
        Ok(())
    }

    pub fn n_cells(&self) -> usize {
        self.bs_positions.len()
    }

    pub fn area_center(&self) -> Point {
        [self.area_width / 2.0, self.area_height / 2.0]
    }

    /// Boresight (broadside) direction of a BS array: the unit vector toward
    /// the area center, or +x if the BS sits exactly at the center.
    pub fn boresight(&self, cell: usize) -> Point {
        let bs = self.bs_positions[cell];
        let c = self.area_center();
        let d = [c[0] - bs[0], c[1] - bs[1]];
        let n = (d[0] * d[0] + d[1] * d[1]).sqrt();
        if n < 1e-12 {
            [1.0, 0.0]
        } else {
            [d[0] / n, d[1] / n]
        }
    }

    /// Signed angle of `p` as seen from cell `cell`, measured from the array
    /// broadside, clamped into the open interval (-pi/2, pi/2). Points behind
    /// the array fold onto the near endpoint; the default scenarios place BSs
    /// on the area boundary facing inward so nothing is behind them.
    pub fn los_angle(&self, cell: usize, p: Point) -> f64 {
        let bs = self.bs_positions[cell];
        let b = self.boresight(cell);
        let d = [p[0] - bs[0], p[1] - bs[1]];
        let n = (d[0] * d[0] + d[1] * d[1]).sqrt();
        if n < 1e-12 {
            return 0.0;
        }
        let u = [d[0] / n, d[1] / n];
        // atan2 of the cross/dot products gives the signed angle from boresight.
        let cross = b[0] * u[1] - b[1] * u[0];
        let dot = b[0] * u[0] + b[1] * u[1];
        let ang = cross.atan2(dot);
        let lim = PI / 2.0 - 1e-3;
        ang.clamp(-lim, lim)
    }
}

/// Uniform rectangular tiling of the coverage area.
#[derive(Debug, Clone, PartialEq)]
pub struct GridMap {
    pub n_x: usize,
    pub n_y: usize,
    pub grid_size: f64,
    /// Tile midpoints, row-major (index = iy * n_x + ix).
    pub centers: Vec<Point>,
    /// Nearest-BS assignment per grid, ties to the lowest BS index.
    pub cell_of_grid: Vec<usize>,
    pub n_cells: usize,
}

impl GridMap {
    pub fn n_grids(&self) -> usize {
        self.centers.len()
    }

    /// (ix, iy) coordinates of a grid id.
    pub fn grid_xy(&self, gid: usize) -> (usize, usize) {
        (gid % self.n_x, gid / self.n_x)
    }

    /// Grid ids belonging to one cell, ascending.
    pub fn grids_of_cell(&self, cell: usize) -> Vec<usize> {
        (0..self.n_grids()).filter(|&g| self.cell_of_grid[g] == cell).collect()
    }

    /// Grid id containing a point, if inside the area.
    pub fn grid_of_point(&self, p: Point) -> Option<usize> {
        let ix = (p[0] / self.grid_size).floor() as isize;
        let iy = (p[1] / self.grid_size).floor() as isize;
        if ix < 0 || iy < 0 || ix >= self.n_x as isize || iy >= self.n_y as isize {
            None
        } else {
            Some(iy as usize * self.n_x + ix as usize)
        }
    }
}

/// Ground-truth multipath profile of one (cell, grid) link.
///
/// `angles[0]` is the geometric line-of-sight bearing; the rest are uniform
/// over the array's field of view. Powers are linear mean path gains at unit
/// transmit power and sum to the log-distance pathloss gain. Delays are
/// carried as metadata only and never estimated.
#[derive(Debug, Clone, PartialEq)]
pub struct PathProfile {
    pub angles: Vec<f64>,
    pub powers: Vec<f64>,
    pub delays: Vec<f64>,
}

impl PathProfile {
    pub fn n_paths(&self) -> usize {
        self.angles.len()
    }

    pub fn total_power(&self) -> f64 {
        self.powers.iter().sum()
    }
}

/// Profiles for every (cell, grid) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PathProfiles {
    per_cell: Vec<Vec<PathProfile>>,
}

impl PathProfiles {
    pub fn get(&self, cell: usize, grid: usize) -> &PathProfile {
        &self.per_cell[cell][grid]
    }

    pub fn n_cells(&self) -> usize {
        self.per_cell.len()
    }
}

/// Ground-truth spatial-temporal traffic field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrafficGroundTruth {
    /// Gaussian mixture component means, meters.
    pub gmm_means: Vec<Point>,
    /// 2x2 covariance matrices, m^2, row-major [[a, b], [c, d]].
    pub gmm_covs: Vec<[[f64; 2]; 2]>,
    /// Mixture weights; non-negative, sum to 1.
    pub gmm_weights: Vec<f64>,
    /// Daily amplitude: base + peak * max(0, sin(2 pi t / period)).
    pub amp_base: f64,
    pub amp_peak: f64,
    pub amp_period_h: f64,
    /// Additive Gaussian noise on sampled volumes.
    pub noise_std: f64,
}

impl TrafficGroundTruth {
    pub fn validate(&self) -> Result<()> {
        let k = self.gmm_means.len();
        if k == 0 || self.gmm_covs.len() != k || self.gmm_weights.len() != k {
            return Err(Error::Config("GMM means/covs/weights must be non-empty and equal length".into()));
        }
        let sum: f64 = self.gmm_weights.iter().sum();
        if self.gmm_weights.iter().any(|&w| w < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("GMM weights must be non-negative and sum to 1, got sum {sum}")));
        }
        for c in &self.gmm_covs {
            let det = c[0][0] * c[1][1] - c[0][1] * c[1][0];
            if (c[0][1] - c[1][0]).abs() > 1e-12 || c[0][0] <= 0.0 || det <= 0.0 {
                return Err(Error::Config("GMM covariances must be symmetric positive definite".into()));
            }
        }
        if !(self.amp_period_h > 0.0) {
            return Err(Error::Config("amp_period_h must be positive".into()));
        }
        Ok(())
    }

    /// Time-of-day amplitude factor.
    pub fn amplitude(&self, t_hours: f64) -> f64 {
        self.amp_base + self.amp_peak * (2.0 * PI * t_hours / self.amp_period_h).sin().max(0.0)
    }

    /// Mixture density at a point (integrates to 1 over the plane).
    pub fn density(&self, p: Point) -> f64 {
        let mut acc = 0.0;
        for ((mu, cov), w) in self.gmm_means.iter().zip(&self.gmm_covs).zip(&self.gmm_weights) {
            let dx = p[0] - mu[0];
            let dy = p[1] - mu[1];
            let det = cov[0][0] * cov[1][1] - cov[0][1] * cov[1][0];
            let q = (cov[1][1] * dx * dx - 2.0 * cov[0][1] * dx * dy + cov[0][0] * dy * dy) / det;
            acc += w * (-0.5 * q).exp() / (2.0 * PI * det.sqrt());
        }
        acc
    }
}

/// Half-wavelength ULA steering vector: entry m = exp(i pi m sin theta).
pub fn steering_vector(theta: f64, n_tx: usize) -> Result<DVector<Complex64>> {
    if n_tx < 1 {
        return Err(Error::Domain("steering vector needs at least one antenna".into()));
    }
    if !(theta > -PI / 2.0 && theta < PI / 2.0) {
        return Err(Error::Domain(format!(
            "steering angle {theta} outside the open interval (-pi/2, pi/2)"
        )));
    }
    let s = theta.sin();
    Ok(DVector::from_fn(n_tx, |m, _| Complex64::from_polar(1.0, PI * m as f64 * s)))
}

/// Tiles the area and assigns every grid to its nearest BS.
pub fn build_grid_map(config: &ScenarioConfig) -> Result<GridMap> {
    config.validate()?;
    let n_x = (config.area_width / config.grid_size).round() as usize;
    let n_y = (config.area_height / config.grid_size).round() as usize;
    let mut centers = Vec::with_capacity(n_x * n_y);
    for iy in 0..n_y {
        for ix in 0..n_x {
            centers.push([
                (ix as f64 + 0.5) * config.grid_size,
                (iy as f64 + 0.5) * config.grid_size,
            ]);
        }
    }
    let cell_of_grid = centers
        .iter()
        .map(|&c| {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (i, &bs) in config.bs_positions.iter().enumerate() {
                let d = dist(c, bs);
                if d < best_d {
                    best_d = d;
                    best = i;
                }
            }
            best
        })
        .collect();
    Ok(GridMap {
        n_x,
        n_y,
        grid_size: config.grid_size,
        centers,
        cell_of_grid,
        n_cells: config.n_cells(),
    })
}

/// Log-distance pathloss gain at distance `d` meters (clipped below 1 m).
pub fn pathloss_gain(config: &ScenarioConfig, d: f64) -> f64 {
    let d = d.max(1.0);
    let loss_db = config.pathloss_ref_db + 10.0 * config.pathloss_exponent * d.log10();
    10f64.powf(-loss_db / 10.0)
}

/// Draws the multipath profile of every (cell, grid) link.
///
/// Path 0 takes the geometric LOS bearing and delay d/c; remaining paths get
/// uniform angles and a uniform excess delay. Path power fractions follow a
/// symmetric Dirichlet(1) and sum to the pathloss gain.
pub fn generate_path_profiles(
    config: &ScenarioConfig,
    grid_map: &GridMap,
    rng: &mut SimRng,
) -> PathProfiles {
    let n_p = config.n_paths;
    let lim = PI / 2.0 - 1e-9;
    let mut per_cell = Vec::with_capacity(config.n_cells());
    for cell in 0..config.n_cells() {
        let bs = config.bs_positions[cell];
        let mut profiles = Vec::with_capacity(grid_map.n_grids());
        for gid in 0..grid_map.n_grids() {
            let center = grid_map.centers[gid];
            let d = dist(bs, center);
            let gain = pathloss_gain(config, d);

            let mut angles = Vec::with_capacity(n_p);
            angles.push(config.los_angle(cell, center));
            for _ in 1..n_p {
                angles.push(rng.gen_range(-lim..lim));
            }

            // Dirichlet(1,...,1) via normalized exponentials.
            let mut fracs: Vec<f64> = (0..n_p).map(|_| -rng.gen::<f64>().max(1e-300).ln()).collect();
            let total: f64 = fracs.iter().sum();
            for f in &mut fracs {
                *f *= gain / total;
            }

            let los_delay = d.max(1.0) / SPEED_OF_LIGHT;
            let mut delays = Vec::with_capacity(n_p);
            delays.push(los_delay);
            for _ in 1..n_p {
                delays.push(los_delay + rng.gen_range(0.0..MAX_EXCESS_DELAY_S));
            }

            profiles.push(PathProfile { angles, powers: fracs, delays });
        }
        per_cell.push(profiles);
    }
    PathProfiles { per_cell }
}

/// One block-fading realization h = sum_p sqrt(beta_p) e^{i phi_p} a(theta_p)
/// with i.i.d. uniform phases.
pub fn realize_channel(profile: &PathProfile, n_tx: usize, rng: &mut SimRng) -> DVector<Complex64> {
    let mut h = DVector::<Complex64>::zeros(n_tx);
    for (p, (&theta, &beta)) in profile.angles.iter().zip(&profile.powers).enumerate() {
        let _ = p;
        let phi = rng.gen_range(0.0..2.0 * PI);
        let g = Complex64::from_polar(beta.sqrt(), phi);
        let s = theta.sin();
        for m in 0..n_tx {
            h[m] += g * Complex64::from_polar(1.0, PI * m as f64 * s);
        }
    }
    h
}

/// Mean covariance sum_p beta_p a(theta_p) a(theta_p)^H of a profile.
pub fn profile_covariance(profile: &PathProfile, n_tx: usize) -> nalgebra::DMatrix<Complex64> {
    let mut r = nalgebra::DMatrix::<Complex64>::zeros(n_tx, n_tx);
    for (&theta, &beta) in profile.angles.iter().zip(&profile.powers) {
        let s = theta.sin();
        let a = DVector::from_fn(n_tx, |m, _| Complex64::from_polar(1.0, PI * m as f64 * s));
        for i in 0..n_tx {
            for j in 0..n_tx {
                r[(i, j)] += beta * a[i] * a[j].conj();
            }
        }
    }
    r
}

/// Samples the traffic volume at a grid center and time: the GMM density
/// scaled by the daily amplitude plus Gaussian noise, clipped at zero.
pub fn traffic_volume(tg: &TrafficGroundTruth, grid_center: Point, t_hours: f64, rng: &mut SimRng) -> f64 {
    let mean = tg.amplitude(t_hours) * tg.density(grid_center);
    let noise = if tg.noise_std > 0.0 {
        Normal::new(0.0, tg.noise_std).expect("noise_std is finite").sample(rng)
    } else {
        0.0
    };
    (mean + noise).max(0.0)
}

/// Places `n_ues` users i.i.d. over grids by the occurrence weights, uniform
/// within each tile.
pub fn place_active_users(
    occurrence: &[f64],
    n_ues: usize,
    grid_map: &GridMap,
    rng: &mut SimRng,
) -> Result<Vec<(usize, Point)>> {
    if occurrence.len() != grid_map.n_grids() {
        return Err(Error::Domain(format!(
            "occurrence has {} weights for {} grids",
            occurrence.len(),
            grid_map.n_grids()
        )));
    }
    let sum: f64 = occurrence.iter().sum();
    if occurrence.iter().any(|&w| w < 0.0) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Domain(format!(
            "occurrence weights must be a probability simplex (sum = {sum})"
        )));
    }
    let mut cdf = Vec::with_capacity(occurrence.len());
    let mut acc = 0.0;
    for &w in occurrence {
        acc += w;
        cdf.push(acc);
    }
    let mut placements = Vec::with_capacity(n_ues);
    for _ in 0..n_ues {
        let u = rng.gen::<f64>() * sum;
        let gid = cdf.partition_point(|&c| c < u).min(occurrence.len() - 1);
        let center = grid_map.centers[gid];
        let half = grid_map.grid_size / 2.0;
        let pos = [
            center[0] + rng.gen_range(-half..half),
            center[1] + rng.gen_range(-half..half),
        ];
        placements.push((gid, pos));
    }
    Ok(placements)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use crate::substream;

    pub(crate) fn test_config() -> ScenarioConfig {
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
    fn steering_broadside_is_all_ones() {
        let a = steering_vector(0.0, 4).unwrap();
        for m in 0..4 {
            assert_abs_diff_eq!(a[m].re, 1.0, epsilon = 1e-15);
            assert_abs_diff_eq!(a[m].im, 0.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn steering_single_antenna_is_one() {
        let a = steering_vector(PI / 2.0 - 1e-9, 1).unwrap();
        assert_eq!(a.len(), 1);
        assert_abs_diff_eq!(a[0].re, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn steering_pi_over_six_gives_i() {
        // sin(pi/6) = 1/2, so entry 1 is exp(i pi/2) = i.
        let a = steering_vector(PI / 6.0, 2).unwrap();
        assert_abs_diff_eq!(a[0].re, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(a[1].re, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(a[1].im, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn steering_rejects_out_of_domain() {
        assert!(steering_vector(PI / 2.0, 4).is_err());
        assert!(steering_vector(-2.0, 4).is_err());
    }

    #[test]
    fn grid_map_150m_area_has_225_grids() {
        let gm = build_grid_map(&test_config()).unwrap();
        assert_eq!((gm.n_x, gm.n_y), (15, 15));
        assert_eq!(gm.n_grids(), 225);
    }

    #[test]
    fn grid_map_single_tile() {
        let mut cfg = test_config();
        cfg.area_width = 10.0;
        cfg.area_height = 10.0;
        cfg.bs_positions = vec![[0.0, 0.0]];
        let gm = build_grid_map(&cfg).unwrap();
        assert_eq!(gm.n_grids(), 1);
        assert_eq!(gm.centers[0], [5.0, 5.0]);
    }

    #[test]
    fn grid_assignment_prefers_nearest_bs() {
        let mut cfg = test_config();
        cfg.area_width = 110.0;
        cfg.area_height = 10.0;
        cfg.bs_positions = vec![[0.0, 0.0], [100.0, 0.0]];
        let gm = build_grid_map(&cfg).unwrap();
        let gid = gm.grid_of_point([10.0, 0.1]).unwrap();
        assert_eq!(gm.cell_of_grid[gid], 0);
    }

    #[test]
    fn profiles_have_n_paths_entries_and_pathloss_total() {
        let cfg = test_config();
        let gm = build_grid_map(&cfg).unwrap();
        let mut rng = substream(cfg.rng_seed, 0);
        let profiles = generate_path_profiles(&cfg, &gm, &mut rng);
        let p = profiles.get(0, 0);
        assert_eq!(p.n_paths(), 4);
        assert_eq!(p.powers.len(), 4);
        assert_eq!(p.delays.len(), 4);
        assert!(p.powers.iter().all(|&b| b > 0.0));
        let d = dist(cfg.bs_positions[0], gm.centers[0]);
        assert_relative_eq!(p.total_power(), pathloss_gain(&cfg, d), max_relative = 1e-12);
        // LOS path carries the geometric bearing and delay.
        assert_abs_diff_eq!(p.angles[0], cfg.los_angle(0, gm.centers[0]), epsilon = 1e-15);
        assert_relative_eq!(p.delays[0], d / SPEED_OF_LIGHT, max_relative = 1e-12);
        for q in 1..4 {
            assert!(p.delays[q] >= p.delays[0] && p.delays[q] <= p.delays[0] + MAX_EXCESS_DELAY_S);
        }
    }

    #[test]
    fn pathloss_at_reference_distance() {
        let mut cfg = test_config();
        cfg.pathloss_ref_db = 30.0;
        cfg.pathloss_exponent = 3.0;
        assert_relative_eq!(pathloss_gain(&cfg, 1.0), 1e-3, max_relative = 1e-12);
        // Distances are clipped below at 1 m.
        assert_relative_eq!(pathloss_gain(&cfg, 0.2), 1e-3, max_relative = 1e-12);
    }

    #[test]
    fn pathloss_monotone_in_distance() {
        let cfg = test_config();
        let mut prev = pathloss_gain(&cfg, 1.0);
        for i in 1..200 {
            let g = pathloss_gain(&cfg, 1.0 + i as f64);
            assert!(g <= prev);
            prev = g;
        }
    }

    #[test]
    fn profiles_deterministic_under_seed() {
        let cfg = test_config();
        let gm = build_grid_map(&cfg).unwrap();
        let a = generate_path_profiles(&cfg, &gm, &mut substream(cfg.rng_seed, 0));
        let b = generate_path_profiles(&cfg, &gm, &mut substream(cfg.rng_seed, 0));
        assert_eq!(a, b);
    }

    #[test]
    fn single_path_channel_norm_is_n_tx() {
        let profile = PathProfile { angles: vec![0.0], powers: vec![1.0], delays: vec![0.0] };
        let mut rng = substream(1, 0);
        let h = realize_channel(&profile, 6, &mut rng);
        assert_relative_eq!(h.norm_squared(), 6.0, max_relative = 1e-12);
        for m in 0..6 {
            assert_relative_eq!(h[m].norm(), 1.0, max_relative = 1e-12);
        }
    }

    #[test]
    fn channel_energy_matches_total_power() {
        // Monte-Carlo oracle: E||h||^2 = n_tx * sum(beta) within 2%.
        let profile = PathProfile {
            angles: vec![-0.7, 0.1, 0.4, 1.0],
            powers: vec![0.5, 1.2, 0.3, 0.8],
            delays: vec![0.0; 4],
        };
        let n_tx = 4;
        let mut rng = substream(42, 0);
        let n = 100_000;
        let mut acc = 0.0;
        for _ in 0..n {
            acc += realize_channel(&profile, n_tx, &mut rng).norm_squared();
        }
        let expected = n_tx as f64 * profile.total_power();
        assert_relative_eq!(acc / n as f64, expected, max_relative = 0.02);
    }

    #[test]
    fn channel_covariance_matches_profile_covariance() {
        // E[h h^H] over 1e5 draws vs the closed form, 5% Frobenius.
        let profile = PathProfile {
            angles: vec![-0.5, 0.3, 0.9],
            powers: vec![1.0, 0.6, 0.2],
            delays: vec![0.0; 3],
        };
        let n_tx = 4;
        let mut rng = substream(3, 0);
        let n = 100_000;
        let mut sample = nalgebra::DMatrix::<Complex64>::zeros(n_tx, n_tx);
        for _ in 0..n {
            let h = realize_channel(&profile, n_tx, &mut rng);
            for i in 0..n_tx {
                for j in 0..n_tx {
                    sample[(i, j)] += h[i] * h[j].conj();
                }
            }
        }
        sample /= Complex64::new(n as f64, 0.0);
        let truth = profile_covariance(&profile, n_tx);
        let err = (&sample - &truth).norm() / truth.norm();
        assert!(err <= 0.05, "relative Frobenius error {err}");
    }

    #[test]
    fn consecutive_realizations_differ() {
        let profile = PathProfile { angles: vec![0.2], powers: vec![1.0], delays: vec![0.0] };
        let mut rng = substream(5, 0);
        let h1 = realize_channel(&profile, 4, &mut rng);
        let h2 = realize_channel(&profile, 4, &mut rng);
        assert!((h1 - h2).norm() > 1e-6);
    }

    pub(crate) fn test_traffic() -> TrafficGroundTruth {
        TrafficGroundTruth {
            gmm_means: vec![[40.0, 40.0], [110.0, 60.0]],
            gmm_covs: vec![[[200.0, 0.0], [0.0, 200.0]], [[150.0, 20.0], [20.0, 150.0]]],
            gmm_weights: vec![0.6, 0.4],
            amp_base: 1.0,
            amp_peak: 3.0,
            amp_period_h: 24.0,
            noise_std: 0.0,
        }
    }

    #[test]
    fn traffic_peaks_at_component_mean() {
        let tg = test_traffic();
        let mut rng = substream(1, 0);
        let t = 0.0; // amp = base
        let v = traffic_volume(&tg, [40.0, 40.0], t, &mut rng);
        // Density at the first mean: w0 / (2 pi sqrt(det)) + tail of component 1.
        let d = tg.density([40.0, 40.0]);
        assert_relative_eq!(v, tg.amp_base * d, max_relative = 1e-12);
    }

    #[test]
    fn traffic_noiseless_is_deterministic() {
        let tg = test_traffic();
        let v1 = traffic_volume(&tg, [50.0, 50.0], 3.0, &mut substream(1, 0));
        let v2 = traffic_volume(&tg, [50.0, 50.0], 3.0, &mut substream(2, 7));
        assert_eq!(v1, v2);
    }

    #[test]
    fn traffic_riemann_sum_tracks_amplitude() {
        // Numeric integration oracle: sum over a fine tiling of density*area
        // approaches 1, so total volume approaches amp(t) within 5%.
        let tg = test_traffic();
        let cfg = test_config();
        let gm = build_grid_map(&ScenarioConfig { grid_size: 2.5, ..cfg }).unwrap();
        let mut rng = substream(1, 0);
        for &t in &[0.0, 6.0] {
            let total: f64 = gm
                .centers
                .iter()
                .map(|&c| traffic_volume(&tg, c, t, &mut rng) * gm.grid_size * gm.grid_size)
                .sum();
            assert_relative_eq!(total, tg.amplitude(t), max_relative = 0.05);
        }
    }

    #[test]
    fn users_land_in_the_only_weighted_grid() {
        let cfg = test_config();
        let gm = build_grid_map(&cfg).unwrap();
        let mut w = vec![0.0; gm.n_grids()];
        w[17] = 1.0;
        let placed = place_active_users(&w, 36, &gm, &mut substream(1, 0)).unwrap();
        assert_eq!(placed.len(), 36);
        assert!(placed.iter().all(|&(g, _)| g == 17));
        for &(g, p) in &placed {
            let c = gm.centers[g];
            assert!((p[0] - c[0]).abs() <= gm.grid_size / 2.0);
            assert!((p[1] - c[1]).abs() <= gm.grid_size / 2.0);
        }
    }

    #[test]
    fn user_placement_matches_multinomial_band() {
        let mut cfg = test_config();
        cfg.area_width = 50.0;
        cfg.area_height = 50.0;
        let gm = build_grid_map(&cfg).unwrap();
        let g = gm.n_grids();
        let w = vec![1.0 / g as f64; g];
        let n = 100_000usize;
        let placed = place_active_users(&w, n, &gm, &mut substream(11, 0)).unwrap();
        let mut counts = vec![0usize; g];
        for &(gid, _) in &placed {
            counts[gid] += 1;
        }
        let p = 1.0 / g as f64;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for &c in &counts {
            assert!((c as f64 - n as f64 * p).abs() <= 3.0 * sigma, "count {c} outside 3 sigma");
        }
    }

    #[test]
    fn rejects_unnormalized_occurrence() {
        let cfg = test_config();
        let gm = build_grid_map(&cfg).unwrap();
        let w = vec![0.5; gm.n_grids()];
        assert!(place_active_users(&w, 5, &gm, &mut substream(1, 0)).is_err());
    }

    #[test]
    fn config_validation_catches_bad_fields() {
        let mut cfg = test_config();
        cfg.grid_size = -1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = test_config();
        cfg.area_width = 149.0;
        assert!(cfg.validate().is_err());
        let mut cfg = test_config();
        cfg.n_tx = 2; // below n_paths
        assert!(cfg.validate().is_err());
    }
}
