//! Spatial-feature embedding from location-free RSRP fingerprints.
//!
//! Measurement reports carry no coordinates, so the spatial feature is
//! inferred from the beam-space shape of the RSRP vector: peak-normalized dB
//! fingerprints strip the transmit-power and pathloss offset, leaving the
//! angular structure, and Lloyd clustering partitions the fingerprint space
//! into virtual grids.

use rand::Rng;

use crate::meas::RsrpRecord;
use crate::{Error, Result, SimRng};

/// Fitted beam-space gridization: virtual grids are centroids in
/// fingerprint space.
#[derive(Debug, Clone, PartialEq)]
pub struct GridizationModel {
    pub centroids: Vec<Vec<f64>>,
    pub n_virtual: usize,
    /// Fingerprint floor used during fitting; assignments reuse it.
    pub floor_db: f64,
}

/// Fit outcome: the model, per-record assignments, and the within-cluster
/// sum-of-squares after each Lloyd assignment step.
#[derive(Debug, Clone)]
pub struct Gridization {
    pub model: GridizationModel,
    pub assignments: Vec<usize>,
    pub objective_trace: Vec<f64>,
}

/// Peak-normalized dB fingerprint: f_m = max(10 log10(r_m / max_m' r_m'), floor).
/// Scale-invariant by construction; the peak entry is exactly 0 dB.
pub fn fingerprint(record: &RsrpRecord, floor_db: f64) -> Result<Vec<f64>> {
    let peak = record.rsrp.iter().cloned().fold(0.0f64, f64::max);
    if peak <= 0.0 {
        return Err(Error::EmptyMeasurement);
    }
    Ok(record
        .rsrp
        .iter()
        .map(|&r| {
            if r <= 0.0 {
                floor_db
            } else {
                (10.0 * (r / peak).log10()).max(floor_db)
            }
        })
        .collect())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest_centroid(f: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = 0usize;
    let mut best_d = f64::INFINITY;
    for (i, c) in centroids.iter().enumerate() {
        let d = sq_dist(f, c);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    (best, best_d)
}

/// Lloyd clustering of fingerprints into `n_virtual` virtual grids.
///
/// Farthest-point initialization from a seeded random start; empty clusters
/// are re-seeded to the point farthest from its assigned centroid. The
/// objective is non-increasing across iterations and the loop stops as soon
/// as assignments stabilize or `max_iters` is reached.
pub fn gridize(
    records: &[RsrpRecord],
    n_virtual: usize,
    max_iters: usize,
    floor_db: f64,
    rng: &mut SimRng,
) -> Result<Gridization> {
    if n_virtual == 0 {
        return Err(Error::Domain("n_virtual must be at least 1".into()));
    }
    if records.len() < n_virtual {
        return Err(Error::Domain(format!(
            "need at least {} records for {} virtual grids, got {}",
            n_virtual,
            n_virtual,
            records.len()
        )));
    }
    let points: Vec<Vec<f64>> = records
        .iter()
        .map(|r| fingerprint(r, floor_db))
        .collect::<Result<_>>()?;
    let n = points.len();

    // Farthest-point init.
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(n_virtual);
    centroids.push(points[rng.gen_range(0..n)].clone());
    while centroids.len() < n_virtual {
        let far = (0..n)
            .max_by(|&i, &j| {
                let di = nearest_centroid(&points[i], &centroids).1;
                let dj = nearest_centroid(&points[j], &centroids).1;
                di.partial_cmp(&dj).expect("finite distances")
            })
            .expect("non-empty points");
        centroids.push(points[far].clone());
    }

    let dim = points[0].len();
    let mut assignments = vec![0usize; n];
    let mut objective_trace = Vec::new();
    for _ in 0..max_iters.max(1) {
        // Assignment step.
        let mut changed = false;
        let mut objective = 0.0;
        for (i, f) in points.iter().enumerate() {
            let (a, d) = nearest_centroid(f, &centroids);
            if assignments[i] != a {
                changed = true;
            }
            assignments[i] = a;
            objective += d;
        }
        objective_trace.push(objective);
        if !changed && objective_trace.len() > 1 {
            break;
        }

        // Update step.
        let mut sums = vec![vec![0.0; dim]; n_virtual];
        let mut counts = vec![0usize; n_virtual];
        for (f, &a) in points.iter().zip(&assignments) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(f) {
                *s += v;
            }
        }
        for k in 0..n_virtual {
            if counts[k] == 0 {
                // Re-seed to the point farthest from its assigned centroid.
                let far = (0..n)
                    .max_by(|&i, &j| {
                        let di = sq_dist(&points[i], &centroids[assignments[i]]);
                        let dj = sq_dist(&points[j], &centroids[assignments[j]]);
                        di.partial_cmp(&dj).expect("finite distances")
                    })
                    .expect("non-empty points");
                centroids[k] = points[far].clone();
            } else {
                for (c, s) in centroids[k].iter_mut().zip(&sums[k]) {
                    *c = s / counts[k] as f64;
                }
            }
        }
    }

    Ok(Gridization {
        model: GridizationModel { centroids, n_virtual, floor_db },
        assignments,
        objective_trace,
    })
}

/// Virtual grid id of a record: nearest centroid, ties to the lowest id.
pub fn assign_stf(record: &RsrpRecord, model: &GridizationModel) -> Result<usize> {
    let f = fingerprint(record, model.floor_db)?;
    Ok(nearest_centroid(&f, &model.centroids).0)
}

/// Clustering purity against withheld truth tags: the fraction of records
/// whose cluster's majority truth label matches their own.
pub fn purity(assignments: &[usize], truth: &[usize], n_clusters: usize) -> f64 {
    assert_eq!(assignments.len(), truth.len());
    if assignments.is_empty() {
        return 0.0;
    }
    let n_truth = truth.iter().copied().max().unwrap_or(0) + 1;
    let mut table = vec![vec![0usize; n_truth]; n_clusters];
    for (&a, &t) in assignments.iter().zip(truth) {
        table[a][t] += 1;
    }
    let majority: usize = table.iter().map(|row| row.iter().copied().max().unwrap_or(0)).sum();
    majority as f64 / assignments.len() as f64
}
