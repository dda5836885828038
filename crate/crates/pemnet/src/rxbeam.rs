//! Occurrence-weighted receive beamspace design.
//!
//! The map supplies each grid's covariance and occurrence probability; their
//! weighted sum is the expected uplink covariance, whose dominant eigenmodes
//! form the receive beamspace. The DFT reference keeps the d beams of the
//! orthogonal n_tx-beam codebook that capture the most weighted energy, which
//! is the strongest fixed-codebook competitor since orthogonal-beam captures
//! add up.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::ckm::{aps_to_covariance, AngularGrid};
use crate::config::RunConfig;
use crate::meas::dft_codebook;
use crate::pem::Pem;
use crate::{Error, Result};

/// Orthonormal receive subspace: columns are the beams.
#[derive(Debug, Clone)]
pub struct Beamspace {
    pub columns: DMatrix<Complex64>,
}

impl Beamspace {
    pub fn dimension(&self) -> usize {
        self.columns.ncols()
    }

    /// Largest deviation of the Gram matrix from identity.
    pub fn orthonormality_defect(&self) -> f64 {
        let g = self.columns.adjoint() * &self.columns;
        let d = self.dimension();
        let mut defect = 0.0f64;
        for i in 0..d {
            for j in 0..d {
                let want = if i == j { Complex64::new(1.0, 0.0) } else { Complex64::new(0.0, 0.0) };
                defect = defect.max((g[(i, j)] - want).norm());
            }
        }
        defect
    }
}

/// Occurrence-weighted covariance R_w = sum_g q_g(t) R_g over the given
/// cell's CKM view.
pub fn weighted_covariance(pem: &Pem, cell: usize, t_hours: f64) -> Result<DMatrix<Complex64>> {
    let n_tx = pem.cfg.scenario.n_tx;
    let occ = pem.occurrence(t_hours)?;
    let interval = pem.interval_of(t_hours);
    let mut r_w = DMatrix::<Complex64>::zeros(n_tx, n_tx);
    for g in 0..pem.grid_map.n_grids() {
        if occ[g] == 0.0 {
            continue;
        }
        let (aps, _) = pem
            .ckm
            .get(cell, g, interval)
            .ok_or(Error::UnknownGrid(g))?;
        let r = aps_to_covariance(&aps.weights, &pem.angular_grid, n_tx);
        r_w += r * Complex64::new(occ[g], 0.0);
    }
    Ok(r_w)
}

/// Eigenvalues and eigenvectors of a Hermitian matrix, sorted descending,
/// with each eigenvector's first significant entry rotated to be real
/// positive so the output is deterministic up to the eigensolver.
pub fn sorted_hermitian_eigen(r: &DMatrix<Complex64>) -> (Vec<f64>, Vec<DVector<Complex64>>) {
    let eig = r.clone().symmetric_eigen();
    let n = r.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).expect("finite eigenvalues").then(a.cmp(&b))
    });
    let mut values = Vec::with_capacity(n);
    let mut vectors = Vec::with_capacity(n);
    for &i in &order {
        values.push(eig.eigenvalues[i]);
        let mut v: DVector<Complex64> = eig.eigenvectors.column(i).into_owned();
        if let Some(lead) = v.iter().find(|c| c.norm() > 1e-12) {
            let phase = lead / Complex64::new(lead.norm(), 0.0);
            v = v.map(|c| c * phase.conj());
        }
        vectors.push(v);
    }
    (values, vectors)
}

/// Top-d eigenmodes of the weighted covariance.
pub fn dominant_beamspace(r_w: &DMatrix<Complex64>, d: usize) -> Result<Beamspace> {
    let n_tx = r_w.nrows();
    if d == 0 || d > n_tx {
        return Err(Error::Domain(format!("beamspace dimension {d} outside 1..={n_tx}")));
    }
    let (_, vectors) = sorted_hermitian_eigen(r_w);
    let mut columns = DMatrix::<Complex64>::zeros(n_tx, d);
    for (j, v) in vectors.iter().take(d).enumerate() {
        columns.set_column(j, v);
    }
    Ok(Beamspace { columns })
}

/// Fraction of a grid's channel energy captured by the subspace:
/// trace(V^H R V) / trace(R).
pub fn capture_ratio(beamspace: &Beamspace, aps_weights: &[f64], angular_grid: &AngularGrid) -> Result<f64> {
    if aps_weights.iter().all(|&w| w == 0.0) {
        return Err(Error::Domain("capture ratio of a zero APS is undefined".into()));
    }
    let n_tx = beamspace.columns.nrows();
    let r = aps_to_covariance(aps_weights, angular_grid, n_tx);
    let trace: f64 = (0..n_tx).map(|i| r[(i, i)].re).sum();
    Ok(captured_energy(beamspace, &r) / trace)
}

/// trace(V^H R V), the subspace energy of a covariance.
pub fn captured_energy(beamspace: &Beamspace, r: &DMatrix<Complex64>) -> f64 {
    let m = beamspace.columns.adjoint() * r * &beamspace.columns;
    (0..m.nrows()).map(|i| m[(i, i)].re).sum()
}

/// The d beams of the orthogonal n_tx-point DFT codebook with the highest
/// individual weighted capture — the best d-subset, since orthogonal beams'
/// captures are additive.
pub fn best_dft_subspace(r_w: &DMatrix<Complex64>, d: usize) -> Result<Beamspace> {
    let n_tx = r_w.nrows();
    if d == 0 || d > n_tx {
        return Err(Error::Domain(format!("beamspace dimension {d} outside 1..={n_tx}")));
    }
    let codebook = dft_codebook(n_tx, n_tx);
    let mut scored: Vec<(usize, f64)> = codebook
        .beams
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let rb = r_w * b;
            (i, b.dotc(&rb).re)
        })
        .collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite captures").then(a.0.cmp(&b.0)));
    let mut columns = DMatrix::<Complex64>::zeros(n_tx, d);
    for (j, &(i, _)) in scored.iter().take(d).enumerate() {
        columns.set_column(j, &codebook.beams[i]);
    }
    Ok(Beamspace { columns })
}

/// Per-grid comparison row.
#[derive(Debug, Clone)]
pub struct RxbeamGridRow {
    pub grid_x_m: f64,
    pub grid_y_m: f64,
    pub occurrence: f64,
    pub capture_pem: f64,
    pub capture_dft: f64,
}

/// One beamspace dimension's outcome. The summary captures are energy
/// fractions of the occurrence-weighted covariance, so the eigen design is
/// optimal for its own map by Ky Fan's principle.
#[derive(Debug, Clone)]
pub struct RxbeamOutcome {
    pub d: usize,
    pub n_tx: usize,
    pub mean_capture_pem: f64,
    pub mean_capture_dft: f64,
    pub rows: Vec<RxbeamGridRow>,
}

/// Runs the beamspace comparison for one subspace dimension on a built map.
pub fn run_rxbeam_experiment(cfg: &RunConfig, pem: &Pem, d: usize) -> Result<RxbeamOutcome> {
    let t = cfg.rxbeam.eval_time_h;
    let cell = 0;
    let r_w = weighted_covariance(pem, cell, t)?;
    let v_pem = dominant_beamspace(&r_w, d)?;
    let v_dft = best_dft_subspace(&r_w, d)?;

    let occ = pem.occurrence(t)?;
    let interval = pem.interval_of(t);
    let mut rows = Vec::with_capacity(pem.grid_map.n_grids());
    for g in 0..pem.grid_map.n_grids() {
        let (aps, _) = pem.ckm.get(cell, g, interval).ok_or(Error::UnknownGrid(g))?;
        let center = pem.grid_map.centers[g];
        rows.push(RxbeamGridRow {
            grid_x_m: center[0],
            grid_y_m: center[1],
            occurrence: occ[g],
            capture_pem: capture_ratio(&v_pem, &aps.weights, &pem.angular_grid)?,
            capture_dft: capture_ratio(&v_dft, &aps.weights, &pem.angular_grid)?,
        });
    }

    let total: f64 = (0..r_w.nrows()).map(|i| r_w[(i, i)].re).sum();
    Ok(RxbeamOutcome {
        d,
        n_tx: cfg.scenario.n_tx,
        mean_capture_pem: captured_energy(&v_pem, &r_w) / total,
        mean_capture_dft: captured_energy(&v_dft, &r_w) / total,
        rows,
    })
}
