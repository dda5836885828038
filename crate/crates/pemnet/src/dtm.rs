//! Data traffic map: per-grid temporal regression with uncertainty and
//! occurrence-probability fields.
//!
//! Traffic volume is modeled per grid by ridge regression on Fourier
//! features of the daily and weekly periods. The model yields a point
//! prediction plus a homoscedastic residual variance, and the normalized
//! per-grid means at a query time form the user occurrence simplex.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const PERIOD_DAY_H: f64 = 24.0;
pub const PERIOD_WEEK_H: f64 = 168.0;

/// One BS-side traffic aggregate for a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrafficRecord {
    pub grid_id: usize,
    pub time_h: f64,
    pub volume: f64,
    pub active_count: usize,
}

/// Per-grid periodic regression: intercept plus `harmonics` sin/cos pairs of
/// the daily and weekly periods (coefficient length 1 + 4H).
#[derive(Debug, Clone, PartialEq)]
pub struct TrafficModel {
    pub coefficients: Vec<f64>,
    pub residual_var: f64,
    pub harmonics: usize,
    pub ridge_weight: f64,
}

impl TrafficModel {
    /// Model for a grid with no observations: predicts zero demand.
    pub fn zero() -> Self {
        TrafficModel { coefficients: vec![0.0], residual_var: 0.0, harmonics: 0, ridge_weight: 0.0 }
    }
}

/// Feature row [1, sin(2 pi k t/24), cos(2 pi k t/24), sin(2 pi k t/168),
/// cos(2 pi k t/168)] for k = 1..H.
pub fn features(t_hours: f64, harmonics: usize) -> Vec<f64> {
    let mut f = Vec::with_capacity(1 + 4 * harmonics);
    f.push(1.0);
    for k in 1..=harmonics {
        let wd = 2.0 * PI * k as f64 * t_hours / PERIOD_DAY_H;
        let ww = 2.0 * PI * k as f64 * t_hours / PERIOD_WEEK_H;
        f.push(wd.sin());
        f.push(wd.cos());
        f.push(ww.sin());
        f.push(ww.cos());
    }
    f
}

/// Ridge-regularized least squares on the periodic features of one grid's
/// records. Falls back to the mean-only model (H = 0) when there are fewer
/// records than coefficients.
pub fn fit_traffic_model(
    records: &[TrafficRecord],
    harmonics: usize,
    ridge_weight: f64,
) -> Result<TrafficModel> {
    if records.is_empty() {
        return Err(Error::Domain("cannot fit a traffic model on zero records".into()));
    }
    let h = if records.len() >= 1 + 4 * harmonics { harmonics } else { 0 };
    let dim = 1 + 4 * h;
    let n = records.len();
    let mut x = DMatrix::<f64>::zeros(n, dim);
    let mut y = DVector::<f64>::zeros(n);
    for (i, r) in records.iter().enumerate() {
        let f = features(r.time_h, h);
        for (j, v) in f.iter().enumerate() {
            x[(i, j)] = *v;
        }
        y[i] = r.volume;
    }
    let mut gram = x.transpose() * &x;
    for j in 0..dim {
        gram[(j, j)] += ridge_weight;
    }
    let rhs = x.transpose() * &y;
    let beta = match nalgebra::linalg::Cholesky::new(gram.clone()) {
        Some(chol) => chol.solve(&rhs),
        None => gram
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::Solver("singular normal equations in traffic fit".into()))?,
    };
    let residual = &y - &x * &beta;
    let residual_var = residual.norm_squared() / n as f64;
    Ok(TrafficModel {
        coefficients: beta.iter().copied().collect(),
        residual_var,
        harmonics: h,
        ridge_weight,
    })
}

/// Point prediction (clipped at zero) and homoscedastic variance.
pub fn predict_traffic(model: &TrafficModel, t_hours: f64) -> (f64, f64) {
    let f = features(t_hours, model.harmonics);
    let mean: f64 = f.iter().zip(&model.coefficients).map(|(a, b)| a * b).sum();
    (mean.max(0.0), model.residual_var)
}

/// Per-grid occurrence probabilities at time t: predicted means normalized
/// over the site. Errors with `NoDemand` when every mean is zero.
pub fn occurrence_map(models: &[TrafficModel], t_hours: f64) -> Result<Vec<f64>> {
    let means: Vec<f64> = models.iter().map(|m| predict_traffic(m, t_hours).0).collect();
    let total: f64 = means.iter().sum();
    if total <= 0.0 {
        return Err(Error::NoDemand);
    }
    Ok(means.into_iter().map(|m| m / total).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::TrafficGroundTruth;
    use crate::substream;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use rand::Rng;

    fn rec(grid_id: usize, time_h: f64, volume: f64) -> TrafficRecord {
        TrafficRecord { grid_id, time_h, volume, active_count: 0 }
    }

    #[test]
    fn constant_volume_fits_intercept() {
        // Sample across full daily and weekly periods so the feature matrix
        // is well conditioned and the ridge perturbation stays at 1e-6 scale.
        let v = 4.2;
        let records: Vec<TrafficRecord> = (0..200).map(|i| rec(0, i as f64 * 1.7, v)).collect();
        let m = fit_traffic_model(&records, 2, 1e-6).unwrap();
        assert_relative_eq!(m.coefficients[0], v, max_relative = 1e-6);
        for &c in &m.coefficients[1..] {
            assert!(c.abs() <= 1e-6 * v, "harmonic {c} too large");
        }
        assert!(m.residual_var <= 1e-10);
        let (mean, _) = predict_traffic(&m, 1234.5);
        assert_relative_eq!(mean, v, max_relative = 1e-5);
    }

    #[test]
    fn daily_sinusoid_is_in_feature_span() {
        let amp = 2.0;
        let records: Vec<TrafficRecord> = (0..100)
            .map(|i| {
                let t = i as f64 * 0.37;
                rec(0, t, 5.0 + amp * (2.0 * PI * t / 24.0).sin())
            })
            .collect();
        let m = fit_traffic_model(&records, 1, 1e-12).unwrap();
        let rmse = m.residual_var.sqrt();
        assert!(rmse <= 1e-6 * amp, "training RMSE {rmse}");
    }

    #[test]
    fn falls_back_to_mean_when_underdetermined() {
        let records = vec![rec(0, 0.0, 1.0), rec(0, 1.0, 3.0)];
        let m = fit_traffic_model(&records, 3, 1e-9).unwrap();
        assert_eq!(m.harmonics, 0);
        assert_eq!(m.coefficients.len(), 1);
        assert_relative_eq!(m.coefficients[0], 2.0, max_relative = 1e-6);
    }

    #[test]
    fn empty_records_error() {
        assert!(fit_traffic_model(&[], 1, 1e-6).is_err());
    }

    #[test]
    fn backtest_beats_intercept_baseline() {
        // Rectified-sinusoid ground truth plus noise: the periodic model must
        // beat the intercept-only predictor on held-out samples.
        let tg = TrafficGroundTruth {
            gmm_means: vec![[50.0, 50.0]],
            gmm_covs: vec![[[400.0, 0.0], [0.0, 400.0]]],
            gmm_weights: vec![1.0],
            amp_base: 1.0,
            amp_peak: 4.0,
            amp_period_h: 24.0,
            noise_std: 0.0,
        };
        let center = [55.0, 50.0];
        let mut rng = substream(21, 0);
        let noise_std = 0.1 * tg.density(center) * (tg.amp_base + tg.amp_peak);
        let sample = |t: f64, rng: &mut crate::SimRng| {
            (tg.amplitude(t) * tg.density(center) + rng.gen_range(-1.0..1.0) * noise_std).max(0.0)
        };
        let train: Vec<TrafficRecord> =
            (0..200).map(|i| rec(0, i as f64 * 0.7, sample(i as f64 * 0.7, &mut rng))).collect();
        let test: Vec<TrafficRecord> = (0..100)
            .map(|i| rec(0, 140.0 + i as f64 * 0.31, sample(140.0 + i as f64 * 0.31, &mut rng)))
            .collect();
        let fitted = fit_traffic_model(&train, 3, 1e-6).unwrap();
        let baseline = fit_traffic_model(&train, 0, 1e-6).unwrap();
        let rmse = |m: &TrafficModel| -> f64 {
            (test
                .iter()
                .map(|r| {
                    let (p, _) = predict_traffic(m, r.time_h);
                    (p - r.volume) * (p - r.volume)
                })
                .sum::<f64>()
                / test.len() as f64)
                .sqrt()
        };
        assert!(rmse(&fitted) < rmse(&baseline));
    }

    #[test]
    fn prediction_is_daily_periodic_without_weekly_terms() {
        let mut m = fit_traffic_model(
            &(0..50).map(|i| rec(0, i as f64, 2.0 + (2.0 * PI * i as f64 / 24.0).cos())).collect::<Vec<_>>(),
            1,
            1e-9,
        )
        .unwrap();
        // Zero the weekly pair, keep the daily pair.
        m.coefficients[3] = 0.0;
        m.coefficients[4] = 0.0;
        for t in [0.3, 7.7, 13.1] {
            let (a, _) = predict_traffic(&m, t);
            let (b, _) = predict_traffic(&m, t + 24.0);
            assert_abs_diff_eq!(a, b, epsilon = 1e-9);
        }
    }

    #[test]
    fn prediction_tracks_known_generator() {
        let tg = TrafficGroundTruth {
            gmm_means: vec![[30.0, 30.0]],
            gmm_covs: vec![[[300.0, 0.0], [0.0, 300.0]]],
            gmm_weights: vec![1.0],
            amp_base: 2.0,
            amp_peak: 3.0,
            amp_period_h: 24.0,
            noise_std: 0.0,
        };
        let center = [30.0, 30.0];
        let records: Vec<TrafficRecord> = (0..400)
            .map(|i| {
                let t = i as f64 * 0.35;
                rec(0, t, tg.amplitude(t) * tg.density(center))
            })
            .collect();
        let m = fit_traffic_model(&records, 3, 1e-9).unwrap();
        for t in [2.0, 5.5, 9.0, 15.0] {
            let truth = tg.amplitude(t) * tg.density(center);
            let (p, _) = predict_traffic(&m, t);
            if truth > 0.1 * tg.density(center) * (tg.amp_base + tg.amp_peak) {
                assert_relative_eq!(p, truth, max_relative = 0.1);
            }
        }
    }

    #[test]
    fn occurrence_single_grid_is_one() {
        let m = fit_traffic_model(&[rec(0, 0.0, 3.0)], 0, 1e-9).unwrap();
        let occ = occurrence_map(&[m], 5.0).unwrap();
        assert_abs_diff_eq!(occ[0], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn occurrence_splits_equally_for_equal_models() {
        let m1 = fit_traffic_model(&(0..10).map(|i| rec(0, i as f64, 2.0)).collect::<Vec<_>>(), 0, 1e-9).unwrap();
        let m2 = m1.clone();
        let occ = occurrence_map(&[m1, m2], 3.0).unwrap();
        assert_abs_diff_eq!(occ[0], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(occ[1], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn occurrence_is_simplex_and_zero_models_contribute_nothing() {
        let m1 = fit_traffic_model(&[rec(0, 0.0, 1.0)], 0, 1e-9).unwrap();
        let m2 = TrafficModel::zero();
        let m3 = fit_traffic_model(&[rec(2, 0.0, 3.0)], 0, 1e-9).unwrap();
        let occ = occurrence_map(&[m1, m2, m3], 1.0).unwrap();
        assert_abs_diff_eq!(occ.iter().sum::<f64>(), 1.0, epsilon = 1e-9);
        assert_eq!(occ[1], 0.0);
    }

    #[test]
    fn occurrence_errors_on_zero_demand() {
        let models = vec![TrafficModel::zero(), TrafficModel::zero()];
        assert!(matches!(occurrence_map(&models, 0.0), Err(Error::NoDemand)));
    }

    #[test]
    fn training_residual_non_increasing_in_harmonics() {
        let mut rng = substream(33, 0);
        let records: Vec<TrafficRecord> = (0..300)
            .map(|i| {
                let t = i as f64 * 0.41;
                let v = 3.0
                    + 1.5 * (2.0 * PI * t / 24.0).sin().max(0.0)
                    + 0.1 * rng.gen_range(-1.0..1.0);
                rec(0, t, v)
            })
            .collect();
        let mut prev = f64::INFINITY;
        for h in 0..4 {
            let m = fit_traffic_model(&records, h, 1e-12).unwrap();
            assert!(m.residual_var <= prev + 1e-12, "residual rose at H={h}");
            prev = m.residual_var;
        }
    }
}
