//! Channel knowledge map: per-grid angular power spectra recovered from
//! multi-beam RSRP, spatial interpolation for unmeasured grids, and
//! covariance reconstruction.
//!
//! The measurement model is linear: the expected RSRP of beam m equals
//! sum_n |b_m^H a(theta_n)|^2 p_n over a discretized angular grid, so APS
//! recovery is a non-negative sparse reconstruction solved here by projected
//! gradient on the l1-regularized least-squares objective.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::env::{dist, GridMap};
use crate::meas::BeamCodebook;
use crate::{Error, Result};

/// Angular discretization uniform in sin space: theta_n = asin(-1 + (2n+1)/N).
#[derive(Debug, Clone, PartialEq)]
pub struct AngularGrid {
    pub angles: Vec<f64>,
}

impl AngularGrid {
    pub fn new(n_angles: usize) -> Self {
        assert!(n_angles >= 1);
        let angles = (0..n_angles)
            .map(|n| (-1.0 + (2.0 * n as f64 + 1.0) / n_angles as f64).asin())
            .collect();
        AngularGrid { angles }
    }

    pub fn n_angles(&self) -> usize {
        self.angles.len()
    }

    /// Index of the bin nearest to `theta` in sin space.
    pub fn nearest_bin(&self, theta: f64) -> usize {
        let n = self.n_angles() as f64;
        let idx = ((theta.sin() + 1.0) * n / 2.0 - 0.5).round();
        (idx.max(0.0) as usize).min(self.n_angles() - 1)
    }
}

/// Non-negative power weights over the angular grid; the CKM payload.
#[derive(Debug, Clone, PartialEq)]
pub struct ApsEstimate {
    pub weights: Vec<f64>,
    pub grid_id: usize,
    pub time_interval: usize,
}

/// Whether an entry came from direct measurements or spatial interpolation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Measured,
    Interpolated,
}

impl Provenance {
    pub fn label(self) -> &'static str {
        match self {
            Provenance::Measured => "measured",
            Provenance::Interpolated => "interpolated",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "measured" => Ok(Provenance::Measured),
            "interpolated" => Ok(Provenance::Interpolated),
            other => Err(Error::Parse(format!("unknown provenance '{other}'"))),
        }
    }
}

/// Per-site APS store keyed by (cell, grid, interval).
///
/// Every cell keeps its own view of every grid — the channel from BS c to
/// grid g exists whether or not c serves g, and the cross-cell entries feed
/// leakage estimation in the beamforming case study.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CkmStore {
    entries: BTreeMap<(usize, usize, usize), (ApsEstimate, Provenance)>,
}

impl CkmStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, cell: usize, aps: ApsEstimate, provenance: Provenance) {
        self.entries.insert((cell, aps.grid_id, aps.time_interval), (aps, provenance));
    }

    pub fn get(&self, cell: usize, grid: usize, interval: usize) -> Option<&(ApsEstimate, Provenance)> {
        self.entries.get(&(cell, grid, interval))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&(usize, usize, usize), &(ApsEstimate, Provenance))> {
        self.entries.iter()
    }

    /// Grid ids with a measured entry for (cell, interval), ascending.
    pub fn measured_grids(&self, cell: usize, interval: usize) -> Vec<usize> {
        self.entries
            .iter()
            .filter(|(&(c, _, i), &(_, p))| c == cell && i == interval && p == Provenance::Measured)
            .map(|(&(_, g, _), _)| g)
            .collect()
    }

    pub fn count_by_provenance(&self, provenance: Provenance) -> usize {
        self.entries.values().filter(|(_, p)| *p == provenance).count()
    }
}

/// LSCM dictionary A with A[m][n] = |b_m^H a(theta_n)|^2.
pub fn build_beam_dictionary(codebook: &BeamCodebook, angular_grid: &AngularGrid) -> DMatrix<f64> {
    let m = codebook.m_beams();
    let n = angular_grid.n_angles();
    let n_tx = codebook.n_tx();
    let mut a = DMatrix::<f64>::zeros(m, n);
    for (j, &theta) in angular_grid.angles.iter().enumerate() {
        let s = theta.sin();
        let steer = DVector::from_fn(n_tx, |k, _| Complex64::from_polar(1.0, PI * k as f64 * s));
        for (i, b) in codebook.beams.iter().enumerate() {
            a[(i, j)] = b.dotc(&steer).norm_sqr();
        }
    }
    a
}

/// Shared pieces of the recovery problem that depend only on the dictionary:
/// the Gram matrix and a safe upper bound on the gradient Lipschitz constant.
#[derive(Debug, Clone)]
pub struct DictionaryOperator {
    pub gram: DMatrix<f64>,
    pub lipschitz: f64,
}

impl DictionaryOperator {
    pub fn new(a: &DMatrix<f64>) -> Result<Self> {
        if a.iter().all(|&v| v == 0.0) {
            return Err(Error::Solver("zero dictionary".into()));
        }
        let gram = a.transpose() * a;
        // Power iteration for the largest eigenvalue of A^T A, padded by 1%
        // so the 1/L step keeps the descent guarantee.
        let n = gram.ncols();
        let mut v = DVector::from_element(n, 1.0 / (n as f64).sqrt());
        let mut lambda = 0.0;
        for _ in 0..200 {
            let w = &gram * &v;
            let norm = w.norm();
            if norm == 0.0 {
                break;
            }
            let next = w / norm;
            let new_lambda = (&gram * &next).dot(&next);
            let done = (new_lambda - lambda).abs() <= 1e-13 * new_lambda.abs();
            v = next;
            lambda = new_lambda;
            if done {
                break;
            }
        }
        if lambda <= 0.0 {
            return Err(Error::Solver("dictionary has no spectral mass".into()));
        }
        Ok(DictionaryOperator { gram, lipschitz: 1.01 * lambda })
    }
}

/// Projected-gradient solve of min_{p >= 0} 0.5 ||A p - r||^2 + lambda 1^T p.
#[derive(Debug, Clone)]
pub struct ApsRecovery {
    pub weights: Vec<f64>,
    /// Objective value after each iteration, starting at p = 0. Exactly
    /// non-increasing: the solver stops rather than accept an uphill step.
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
}

/// Recovers APS weights from one RSRP vector. `lambda` is the absolute l1
/// weight; `tol` bounds the relative objective decrease at which to stop.
pub fn recover_aps(
    rsrp: &[f64],
    dictionary: &DMatrix<f64>,
    lambda: f64,
    tol: f64,
    max_iters: usize,
) -> Result<ApsRecovery> {
    let op = DictionaryOperator::new(dictionary)?;
    recover_aps_with_operator(rsrp, dictionary, &op, lambda, tol, max_iters)
}

/// Same as [`recover_aps`] with the dictionary-dependent pieces precomputed;
/// the PEM build reuses one operator across every grid.
pub fn recover_aps_with_operator(
    rsrp: &[f64],
    dictionary: &DMatrix<f64>,
    op: &DictionaryOperator,
    lambda: f64,
    tol: f64,
    max_iters: usize,
) -> Result<ApsRecovery> {
    if rsrp.len() != dictionary.nrows() {
        return Err(Error::Domain(format!(
            "rsrp length {} does not match dictionary rows {}",
            rsrp.len(),
            dictionary.nrows()
        )));
    }
    if rsrp.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::Domain("rsrp entries must be finite and non-negative".into()));
    }
    if lambda < 0.0 {
        return Err(Error::Domain("lambda must be non-negative".into()));
    }
    let n = dictionary.ncols();
    let r = DVector::from_column_slice(rsrp);
    let atr = dictionary.transpose() * &r;
    let rr = 0.5 * r.norm_squared();
    let step = 1.0 / op.lipschitz;

    let objective = |p: &DVector<f64>, gp: &DVector<f64>| -> f64 {
        0.5 * p.dot(gp) - atr.dot(p) + rr + lambda * p.sum()
    };

    let mut p = DVector::<f64>::zeros(n);
    let mut gp = DVector::<f64>::zeros(n); // gram * p
    let mut f = objective(&p, &gp);
    let mut trace = vec![f];
    let mut iterations = 0;
    for _ in 0..max_iters {
        let mut candidate = DVector::<f64>::zeros(n);
        for i in 0..n {
            let grad = gp[i] - atr[i];
            candidate[i] = (p[i] - step * (grad + lambda)).max(0.0);
        }
        let gp_new = &op.gram * &candidate;
        let f_new = objective(&candidate, &gp_new);
        if f_new > f {
            // Numerical floor reached; keep the last certified iterate.
            break;
        }
        let decrease = f - f_new;
        p = candidate;
        gp = gp_new;
        f = f_new;
        trace.push(f);
        iterations += 1;
        if decrease <= tol * f.abs().max(f64::MIN_POSITIVE) {
            break;
        }
    }
    Ok(ApsRecovery { weights: p.iter().copied().collect(), objective_trace: trace, iterations })
}

/// Gaussian-kernel interpolation of an unmeasured grid from the measured
/// grids of the same cell and time interval. A grid that is itself measured
/// returns its own entry unchanged.
pub fn interpolate_aps(
    store: &CkmStore,
    cell: usize,
    target_grid: usize,
    interval: usize,
    grid_map: &GridMap,
    bandwidth: f64,
) -> Result<ApsEstimate> {
    if let Some((aps, Provenance::Measured)) = store.get(cell, target_grid, interval) {
        return Ok(aps.clone());
    }
    let neighbors = store.measured_grids(cell, interval);
    if neighbors.is_empty() {
        return Err(Error::Uninterpolatable { cell, interval });
    }
    let target = grid_map.centers[target_grid];
    let mut weights = Vec::with_capacity(neighbors.len());
    let mut total = 0.0;
    for &g in &neighbors {
        let d = dist(target, grid_map.centers[g]);
        let w = (-d * d / (2.0 * bandwidth * bandwidth)).exp();
        weights.push(w);
        total += w;
    }
    if total <= 0.0 {
        // All kernel weights underflowed; fall back to the nearest neighbor.
        let nearest = neighbors
            .iter()
            .copied()
            .min_by(|&a, &b| {
                let da = dist(target, grid_map.centers[a]);
                let db = dist(target, grid_map.centers[b]);
                da.partial_cmp(&db).expect("finite distances")
            })
            .expect("non-empty neighbors");
        let (aps, _) = store.get(cell, nearest, interval).expect("measured entry exists");
        return Ok(ApsEstimate { grid_id: target_grid, ..aps.clone() });
    }
    let n_angles = store
        .get(cell, neighbors[0], interval)
        .map(|(a, _)| a.weights.len())
        .expect("measured entry exists");
    let mut blended = vec![0.0; n_angles];
    for (&g, &w) in neighbors.iter().zip(&weights) {
        let (aps, _) = store.get(cell, g, interval).expect("measured entry exists");
        for (b, &v) in blended.iter_mut().zip(&aps.weights) {
            *b += (w / total) * v;
        }
    }
    Ok(ApsEstimate { weights: blended, grid_id: target_grid, time_interval: interval })
}

/// Covariance reconstruction R = sum_n p_n a(theta_n) a(theta_n)^H.
/// Hermitian by construction; trace = n_tx * sum(p).
pub fn aps_to_covariance(weights: &[f64], angular_grid: &AngularGrid, n_tx: usize) -> DMatrix<Complex64> {
    assert_eq!(weights.len(), angular_grid.n_angles());
    let mut r = DMatrix::<Complex64>::zeros(n_tx, n_tx);
    for (&p, &theta) in weights.iter().zip(&angular_grid.angles) {
        if p == 0.0 {
            continue;
        }
        let s = theta.sin();
        let a = DVector::from_fn(n_tx, |m, _| Complex64::from_polar(1.0, PI * m as f64 * s));
        for i in 0..n_tx {
            for j in 0..n_tx {
                r[(i, j)] += p * a[i] * a[j].conj();
            }
        }
    }
    r
}

/// Default l1 weight for a measurement: a small fraction of the peak
/// correlation, so the penalty scales with the data.
pub fn default_lambda(rsrp: &[f64], dictionary: &DMatrix<f64>, rel: f64) -> f64 {
    let r = DVector::from_column_slice(rsrp);
    let atr = dictionary.transpose() * r;
    rel * atr.amax()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{build_grid_map, steering_vector, ScenarioConfig};
    use crate::meas::dft_codebook;
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    fn scenario() -> ScenarioConfig {
        ScenarioConfig {
            area_width: 100.0,
            area_height: 100.0,
            grid_size: 10.0,
            bs_positions: vec![[0.0, 0.0]],
            n_tx: 8,
            n_paths: 4,
            n_ues: 10,
            tx_power: 1.0,
            noise_power: 1e-12,
            pathloss_exponent: 3.0,
            pathloss_ref_db: 30.0,
            rng_seed: 1,
        }
    }

    #[test]
    fn angular_grid_is_increasing_and_in_domain() {
        let g = AngularGrid::new(32);
        for w in g.angles.windows(2) {
            assert!(w[1] > w[0]);
        }
        assert!(g.angles[0] > -PI / 2.0 && *g.angles.last().unwrap() < PI / 2.0);
    }

    #[test]
    fn dictionary_diagonal_for_matched_dft() {
        // Beams and dictionary share the sin-space grid when M = N_a = n_tx,
        // so DFT orthogonality makes A = n_tx * I.
        let n = 4;
        let cb = dft_codebook(n, n);
        let ag = AngularGrid::new(n);
        let a = build_beam_dictionary(&cb, &ag);
        for i in 0..n {
            for j in 0..n {
                let want = if i == j { n as f64 } else { 0.0 };
                assert_abs_diff_eq!(a[(i, j)], want, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn dictionary_single_antenna_is_all_ones() {
        let cb = dft_codebook(1, 3);
        let ag = AngularGrid::new(5);
        let a = build_beam_dictionary(&cb, &ag);
        for v in a.iter() {
            assert_abs_diff_eq!(*v, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn dictionary_matches_elementwise_oracle() {
        let cb = dft_codebook(4, 4);
        let ag = AngularGrid::new(16);
        let a = build_beam_dictionary(&cb, &ag);
        for (j, &theta) in ag.angles.iter().enumerate() {
            let steer = steering_vector(theta, 4).unwrap();
            for (i, b) in cb.beams.iter().enumerate() {
                let mut dot = Complex64::new(0.0, 0.0);
                for k in 0..4 {
                    dot += b[k].conj() * steer[k];
                }
                assert_relative_eq!(a[(i, j)], dot.norm_sqr(), max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn recovery_concentrates_on_active_bin() {
        let n_tx = 8;
        let cb = dft_codebook(n_tx, 2 * n_tx);
        let ag = AngularGrid::new(4 * n_tx);
        let a = build_beam_dictionary(&cb, &ag);
        let bin = 13;
        let rsrp: Vec<f64> = a.column(bin).iter().copied().collect();
        let lambda = default_lambda(&rsrp, &a, 1e-4);
        let rec = recover_aps(&rsrp, &a, lambda, 1e-12, 5000).unwrap();
        let total: f64 = rec.weights.iter().sum();
        let near: f64 = (bin.saturating_sub(1)..=bin + 1).map(|i| rec.weights[i]).sum();
        assert!(near / total >= 0.95, "mass near bin: {}", near / total);
    }

    #[test]
    fn recovery_of_zero_rsrp_is_zero() {
        let cb = dft_codebook(4, 8);
        let ag = AngularGrid::new(16);
        let a = build_beam_dictionary(&cb, &ag);
        let rec = recover_aps(&vec![0.0; 8], &a, 1e-6, 1e-12, 100).unwrap();
        assert!(rec.weights.iter().all(|&w| w == 0.0));
    }

    #[test]
    fn four_path_on_grid_residual_is_small() {
        let n_tx = 8;
        let cb = dft_codebook(n_tx, 2 * n_tx);
        let ag = AngularGrid::new(4 * n_tx);
        let a = build_beam_dictionary(&cb, &ag);
        let mut p_true = vec![0.0; ag.n_angles()];
        for (&bin, &pw) in [3usize, 11, 20, 29].iter().zip(&[1.0e-9, 0.5e-9, 2.0e-9, 0.8e-9]) {
            p_true[bin] = pw;
        }
        let rsrp: Vec<f64> = {
            let p = DVector::from_column_slice(&p_true);
            (&a * p).iter().copied().collect()
        };
        let rec = recover_aps(&rsrp, &a, default_lambda(&rsrp, &a, 1e-6), 0.0, 20_000).unwrap();
        let fitted = &a * DVector::from_column_slice(&rec.weights);
        let r = DVector::from_column_slice(&rsrp);
        let err = (&fitted - &r).norm() / r.norm();
        assert!(err <= 1e-3, "normalized residual {err}");
    }

    #[test]
    fn recovery_objective_monotone() {
        let cb = dft_codebook(8, 16);
        let ag = AngularGrid::new(32);
        let a = build_beam_dictionary(&cb, &ag);
        let rsrp: Vec<f64> = (0..16).map(|i| 1e-9 * (1.0 + (i as f64 * 0.7).sin().abs())).collect();
        let rec = recover_aps(&rsrp, &a, default_lambda(&rsrp, &a, 1e-3), 1e-14, 3000).unwrap();
        for w in rec.objective_trace.windows(2) {
            assert!(w[1] <= w[0], "objective increased: {} -> {}", w[0], w[1]);
        }
        assert!(rec.weights.iter().all(|&w| w >= 0.0));
    }

    #[test]
    fn recovery_scales_linearly() {
        // Homogeneity: scaling rsrp and lambda by c scales the solution by c.
        let cb = dft_codebook(4, 8);
        let ag = AngularGrid::new(16);
        let a = build_beam_dictionary(&cb, &ag);
        let rsrp: Vec<f64> = (0..8).map(|i| 1e-10 * (i as f64 + 0.5)).collect();
        let lambda = default_lambda(&rsrp, &a, 1e-3);
        let rec1 = recover_aps(&rsrp, &a, lambda, 1e-13, 2000).unwrap();
        let c = 3.5;
        let scaled: Vec<f64> = rsrp.iter().map(|&v| c * v).collect();
        let rec2 = recover_aps(&scaled, &a, c * lambda, 1e-13, 2000).unwrap();
        for (w1, w2) in rec1.weights.iter().zip(&rec2.weights) {
            assert_abs_diff_eq!(c * w1, *w2, epsilon = 1e-9 * c);
        }
    }

    #[test]
    fn zero_dictionary_is_an_error() {
        let a = DMatrix::<f64>::zeros(4, 8);
        assert!(matches!(recover_aps(&vec![1.0; 4], &a, 0.0, 1e-9, 10), Err(Error::Solver(_))));
    }

    fn store_with(entries: &[(usize, Vec<f64>)], interval: usize) -> CkmStore {
        let mut store = CkmStore::new();
        for (gid, w) in entries {
            store.insert(
                0,
                ApsEstimate { weights: w.clone(), grid_id: *gid, time_interval: interval },
                Provenance::Measured,
            );
        }
        store
    }

    #[test]
    fn interpolation_returns_measured_entry_exactly() {
        let gm = build_grid_map(&scenario()).unwrap();
        let store = store_with(&[(0, vec![1.0, 2.0]), (5, vec![3.0, 4.0])], 0);
        let aps = interpolate_aps(&store, 0, 0, 0, &gm, 20.0).unwrap();
        assert_eq!(aps.weights, vec![1.0, 2.0]);
    }

    #[test]
    fn interpolation_averages_equidistant_neighbors() {
        let gm = build_grid_map(&scenario()).unwrap();
        // Grids 0 and 2 sit symmetrically around grid 1 on the same row.
        let store = store_with(&[(0, vec![2.0, 0.0]), (2, vec![0.0, 4.0])], 0);
        let aps = interpolate_aps(&store, 0, 1, 0, &gm, 15.0).unwrap();
        assert_abs_diff_eq!(aps.weights[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(aps.weights[1], 2.0, epsilon = 1e-12);
    }

    #[test]
    fn interpolation_beats_nearest_neighbor_on_smooth_field() {
        // Hold-one-out oracle on a smooth synthetic APS field.
        let gm = build_grid_map(&scenario()).unwrap();
        let field = |gid: usize| -> Vec<f64> {
            let c = gm.centers[gid];
            vec![1.0 + 0.01 * c[0], 2.0 + 0.01 * c[1], 0.5 + 0.005 * (c[0] + c[1])]
        };
        let mut interp_err = 0.0;
        let mut nn_err = 0.0;
        for held in 0..gm.n_grids() {
            let mut store = CkmStore::new();
            for g in 0..gm.n_grids() {
                if g != held {
                    store.insert(
                        0,
                        ApsEstimate { weights: field(g), grid_id: g, time_interval: 0 },
                        Provenance::Measured,
                    );
                }
            }
            let truth = field(held);
            let got = interpolate_aps(&store, 0, held, 0, &gm, 12.0).unwrap();
            interp_err += truth
                .iter()
                .zip(&got.weights)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            let nearest = (0..gm.n_grids())
                .filter(|&g| g != held)
                .min_by(|&a, &b| {
                    dist(gm.centers[held], gm.centers[a])
                        .partial_cmp(&dist(gm.centers[held], gm.centers[b]))
                        .unwrap()
                })
                .unwrap();
            let nn = field(nearest);
            nn_err += truth.iter().zip(&nn).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        }
        assert!(interp_err <= nn_err, "interp {interp_err} vs nn {nn_err}");
    }

    #[test]
    fn interpolation_without_neighbors_fails() {
        let gm = build_grid_map(&scenario()).unwrap();
        let store = CkmStore::new();
        assert!(matches!(
            interpolate_aps(&store, 0, 3, 0, &gm, 10.0),
            Err(Error::Uninterpolatable { .. })
        ));
    }

    #[test]
    fn covariance_of_single_bin_is_rank_one() {
        let ag = AngularGrid::new(8);
        let mut w = vec![0.0; 8];
        w[3] = 1.0;
        let r = aps_to_covariance(&w, &ag, 4);
        let tr: f64 = (0..4).map(|i| r[(i, i)].re).sum();
        assert_relative_eq!(tr, 4.0, max_relative = 1e-12);
        let eig = r.symmetric_eigen();
        let mut ev: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        ev.sort_by(|a, b| b.partial_cmp(a).unwrap());
        assert_relative_eq!(ev[0], 4.0, max_relative = 1e-9);
        for &e in &ev[1..] {
            assert_abs_diff_eq!(e, 0.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn covariance_of_zero_aps_is_zero() {
        let ag = AngularGrid::new(8);
        let r = aps_to_covariance(&vec![0.0; 8], &ag, 4);
        assert!(r.iter().all(|c| c.norm() == 0.0));
    }

    #[test]
    fn covariance_is_hermitian_psd() {
        let ag = AngularGrid::new(16);
        let w: Vec<f64> = (0..16).map(|i| ((i * 7 + 3) % 5) as f64 * 0.1).collect();
        let r = aps_to_covariance(&w, &ag, 6);
        for i in 0..6 {
            for j in 0..6 {
                let d = r[(i, j)] - r[(j, i)].conj();
                assert!(d.norm() <= 1e-12);
            }
        }
        let tr: f64 = (0..6).map(|i| r[(i, i)].re).sum();
        let eig = r.symmetric_eigen();
        for &e in eig.eigenvalues.iter() {
            assert!(e >= -1e-9 * tr);
        }
    }
}
