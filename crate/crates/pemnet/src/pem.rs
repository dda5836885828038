//! The composed site database: channel knowledge map plus data traffic map,
//! queryable by (grid id, time).
//!
//! Building a PEM groups measurement reports by (cell, grid, interval),
//! recovers one APS per group, interpolates every unmeasured grid from the
//! measured grids of the same cell, and fits one traffic model per grid.
//! The result is immutable: queries are pure reads and a rebuild returns a
//! fresh value.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::ckm::{
    aps_to_covariance, build_beam_dictionary, default_lambda, interpolate_aps,
    recover_aps_with_operator, AngularGrid, ApsEstimate, CkmStore, DictionaryOperator, Provenance,
};
use crate::config::RunConfig;
use crate::dtm::{fit_traffic_model, occurrence_map, predict_traffic, TrafficModel, TrafficRecord};
use crate::env::{build_grid_map, GridMap};
use crate::meas::{dft_codebook, RsrpRecord};
use crate::{fmt_f64, Error, Result};

/// Build provenance stamped into the serialized map.
#[derive(Debug, Clone, PartialEq)]
pub struct BuildMeta {
    pub seed: u64,
    pub config_hash: String,
    pub n_intervals: usize,
}

/// The perception embedding map.
#[derive(Debug, Clone, PartialEq)]
pub struct Pem {
    pub cfg: RunConfig,
    pub grid_map: GridMap,
    pub angular_grid: AngularGrid,
    pub ckm: CkmStore,
    /// One traffic model per grid; grids without records hold the zero model.
    pub dtm: Vec<TrafficModel>,
    pub meta: BuildMeta,
}

/// One query response: channel knowledge and traffic knowledge for (z, t).
#[derive(Debug, Clone)]
pub struct PemResponse {
    pub aps: ApsEstimate,
    pub covariance: DMatrix<Complex64>,
    pub traffic_mean: f64,
    pub traffic_var: f64,
    pub occurrence_weight: f64,
    pub provenance: Provenance,
}

/// Bookkeeping from one build, for the build report.
#[derive(Debug, Clone, PartialEq)]
pub struct BuildReport {
    pub n_grids: usize,
    pub n_cells: usize,
    pub n_intervals: usize,
    pub n_mr_records: usize,
    pub n_traffic_records: usize,
    pub measured_entries: usize,
    pub interpolated_entries: usize,
    /// Measured / interpolated split per cell (summed over intervals).
    pub per_cell_measured: Vec<usize>,
    pub per_cell_interpolated: Vec<usize>,
    /// Relative l2 fit residual ||A p - r|| / ||r|| over measured groups.
    pub aps_residual_mean: f64,
    pub aps_residual_max: f64,
    pub dtm_grids_with_records: usize,
    /// Mean training RMSE over grids that had traffic records.
    pub dtm_train_rmse_mean: f64,
}

/// Builds a PEM from measurement and traffic datasets.
///
/// Only truth-tagged records (known grid) enter the CKM; the location-free
/// view is the gridization experiment's input, not the map's. An empty
/// traffic dataset is allowed and yields zero-demand models everywhere, so
/// occurrence queries report `NoDemand`.
pub fn build_pem(
    cfg: &RunConfig,
    mr: &[RsrpRecord],
    traffic: &[TrafficRecord],
) -> Result<(Pem, BuildReport)> {
    cfg.validate()?;
    let grid_map = build_grid_map(&cfg.scenario)?;
    let m_beams = cfg.m_beams();
    let angular_grid = AngularGrid::new(cfg.n_angles());
    let codebook = dft_codebook(cfg.scenario.n_tx, m_beams);
    let dictionary = build_beam_dictionary(&codebook, &angular_grid);
    let operator = DictionaryOperator::new(&dictionary)?;

    let tagged: Vec<&RsrpRecord> = mr.iter().filter(|r| r.grid_id.is_some()).collect();
    if tagged.is_empty() {
        return Err(Error::Domain("no localized measurement records to build from".into()));
    }
    for r in &tagged {
        if r.rsrp.len() != m_beams {
            return Err(Error::Domain(format!(
                "record {} has {} beams, codebook has {m_beams}",
                r.record_id,
                r.rsrp.len()
            )));
        }
        if r.grid_id.unwrap() >= grid_map.n_grids() || r.cell_id >= grid_map.n_cells {
            return Err(Error::Domain(format!("record {} is tagged outside the scenario", r.record_id)));
        }
    }

    let interval_h = cfg.ckm.interval_h;
    let max_t = tagged.iter().map(|r| r.time_h).fold(0.0f64, f64::max);
    let n_intervals = (max_t / interval_h).floor() as usize + 1;

    // Group by (cell, grid, interval) and average the RSRP vectors.
    let mut groups: BTreeMap<(usize, usize, usize), (Vec<f64>, usize)> = BTreeMap::new();
    for r in &tagged {
        let interval = ((r.time_h / interval_h).floor() as usize).min(n_intervals - 1);
        let key = (r.cell_id, r.grid_id.unwrap(), interval);
        let entry = groups.entry(key).or_insert_with(|| (vec![0.0; m_beams], 0));
        for (acc, v) in entry.0.iter_mut().zip(&r.rsrp) {
            *acc += v;
        }
        entry.1 += 1;
    }

    let mut ckm = CkmStore::new();
    let mut residuals = Vec::with_capacity(groups.len());
    for (&(cell, grid, interval), (sum, count)) in &groups {
        let mean: Vec<f64> = sum.iter().map(|v| v / *count as f64).collect();
        let lambda = default_lambda(&mean, &dictionary, cfg.ckm.lambda_rel);
        let rec = recover_aps_with_operator(
            &mean,
            &dictionary,
            &operator,
            lambda,
            cfg.ckm.tol,
            cfg.ckm.max_iters,
        )?;
        let r_norm = DVector::from_column_slice(&mean).norm();
        if r_norm > 0.0 {
            let fitted = &dictionary * DVector::from_column_slice(&rec.weights);
            let resid = (fitted - DVector::from_column_slice(&mean)).norm() / r_norm;
            residuals.push(resid);
        }
        ckm.insert(
            cell,
            ApsEstimate { weights: rec.weights, grid_id: grid, time_interval: interval },
            Provenance::Measured,
        );
    }

    // Fill every unmeasured (cell, grid, interval) by spatial interpolation.
    let mut per_cell_measured = vec![0usize; grid_map.n_cells];
    let mut per_cell_interpolated = vec![0usize; grid_map.n_cells];
    for cell in 0..grid_map.n_cells {
        for interval in 0..n_intervals {
            let measured = ckm.measured_grids(cell, interval);
            if measured.is_empty() {
                return Err(Error::Uninterpolatable { cell, interval });
            }
            per_cell_measured[cell] += measured.len();
            for grid in 0..grid_map.n_grids() {
                if ckm.get(cell, grid, interval).is_none() {
                    let aps =
                        interpolate_aps(&ckm, cell, grid, interval, &grid_map, cfg.ckm.bandwidth_m)?;
                    ckm.insert(cell, aps, Provenance::Interpolated);
                    per_cell_interpolated[cell] += 1;
                }
            }
        }
    }

    // Traffic models per grid.
    let mut by_grid: BTreeMap<usize, Vec<TrafficRecord>> = BTreeMap::new();
    for r in traffic {
        if r.grid_id >= grid_map.n_grids() {
            return Err(Error::Domain(format!("traffic record tagged with unknown grid {}", r.grid_id)));
        }
        by_grid.entry(r.grid_id).or_default().push(r.clone());
    }
    let mut dtm = Vec::with_capacity(grid_map.n_grids());
    let mut rmse_sum = 0.0;
    let mut fitted_grids = 0usize;
    for grid in 0..grid_map.n_grids() {
        match by_grid.get(&grid) {
            Some(records) => {
                let model = fit_traffic_model(records, cfg.dtm.harmonics, cfg.dtm.ridge)?;
                rmse_sum += model.residual_var.sqrt();
                fitted_grids += 1;
                dtm.push(model);
            }
            None => dtm.push(TrafficModel::zero()),
        }
    }

    let measured_entries = ckm.count_by_provenance(Provenance::Measured);
    let interpolated_entries = ckm.count_by_provenance(Provenance::Interpolated);
    let report = BuildReport {
        n_grids: grid_map.n_grids(),
        n_cells: grid_map.n_cells,
        n_intervals,
        n_mr_records: mr.len(),
        n_traffic_records: traffic.len(),
        measured_entries,
        interpolated_entries,
        per_cell_measured,
        per_cell_interpolated,
        aps_residual_mean: if residuals.is_empty() {
            0.0
        } else {
            residuals.iter().sum::<f64>() / residuals.len() as f64
        },
        aps_residual_max: residuals.iter().cloned().fold(0.0, f64::max),
        dtm_grids_with_records: fitted_grids,
        dtm_train_rmse_mean: if fitted_grids == 0 { 0.0 } else { rmse_sum / fitted_grids as f64 },
    };

    let meta = BuildMeta {
        seed: cfg.scenario.rng_seed,
        config_hash: cfg.config_hash(),
        n_intervals,
    };
    Ok((Pem { cfg: cfg.clone(), grid_map, angular_grid, ckm, dtm, meta }, report))
}

impl Pem {
    /// Interval index containing t, clamped to the built range.
    pub fn interval_of(&self, t_hours: f64) -> usize {
        let idx = (t_hours.max(0.0) / self.cfg.ckm.interval_h).floor() as usize;
        idx.min(self.meta.n_intervals - 1)
    }

    /// Occurrence simplex over all grids at time t.
    pub fn occurrence(&self, t_hours: f64) -> Result<Vec<f64>> {
        occurrence_map(&self.dtm, t_hours)
    }

    /// Environment knowledge for grid `z` at time `t`, seen from its serving
    /// cell.
    pub fn query(&self, z: usize, t_hours: f64) -> Result<PemResponse> {
        if z >= self.grid_map.n_grids() {
            return Err(Error::UnknownGrid(z));
        }
        self.query_for_cell(self.grid_map.cell_of_grid[z], z, t_hours)
    }

    /// Environment knowledge for grid `z` at time `t` from an explicit cell's
    /// view; cross-cell views feed leakage estimation.
    pub fn query_for_cell(&self, cell: usize, z: usize, t_hours: f64) -> Result<PemResponse> {
        if z >= self.grid_map.n_grids() {
            return Err(Error::UnknownGrid(z));
        }
        if cell >= self.grid_map.n_cells {
            return Err(Error::Domain(format!("unknown cell {cell}")));
        }
        let interval = self.interval_of(t_hours);
        let (aps, provenance) = self
            .ckm
            .get(cell, z, interval)
            .ok_or_else(|| Error::Domain(format!("missing CKM entry ({cell}, {z}, {interval})")))?;
        let covariance = aps_to_covariance(&aps.weights, &self.angular_grid, self.cfg.scenario.n_tx);
        let (traffic_mean, traffic_var) = predict_traffic(&self.dtm[z], t_hours);
        let occurrence_weight = self.occurrence(t_hours)?[z];
        Ok(PemResponse {
            aps: aps.clone(),
            covariance,
            traffic_mean,
            traffic_var,
            occurrence_weight,
            provenance: *provenance,
        })
    }

    /// Full batch reconstruction from new datasets; `self` is untouched.
    pub fn rebuild(&self, mr: &[RsrpRecord], traffic: &[TrafficRecord]) -> Result<Pem> {
        Ok(build_pem(&self.cfg, mr, traffic)?.0)
    }

    /// Serializes the map into a directory: ckm.csv, dtm.csv, meta.txt.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let hash = &self.meta.config_hash;

        let mut ckm_out = BufWriter::new(fs::File::create(dir.join("ckm.csv"))?);
        writeln!(ckm_out, "# config_hash={hash}")?;
        let mut header = String::from("cell_id,grid_id,interval,provenance");
        for i in 0..self.angular_grid.n_angles() {
            header.push_str(&format!(",p_{i}"));
        }
        writeln!(ckm_out, "{header}")?;
        for (&(cell, grid, interval), (aps, prov)) in self.ckm.iter() {
            let mut line = format!("{cell},{grid},{interval},{}", prov.label());
            for w in &aps.weights {
                line.push(',');
                line.push_str(&fmt_f64(*w));
            }
            writeln!(ckm_out, "{line}")?;
        }
        ckm_out.flush()?;

        let mut dtm_out = BufWriter::new(fs::File::create(dir.join("dtm.csv"))?);
        writeln!(dtm_out, "# config_hash={hash}")?;
        writeln!(dtm_out, "grid_id,harmonics,residual_var,ridge_weight,coef_0..")?;
        for (grid, model) in self.dtm.iter().enumerate() {
            let mut line = format!(
                "{grid},{},{},{}",
                model.harmonics,
                fmt_f64(model.residual_var),
                fmt_f64(model.ridge_weight)
            );
            for c in &model.coefficients {
                line.push(',');
                line.push_str(&fmt_f64(*c));
            }
            writeln!(dtm_out, "{line}")?;
        }
        dtm_out.flush()?;

        let mut meta_out = BufWriter::new(fs::File::create(dir.join("meta.txt"))?);
        writeln!(meta_out, "seed={}", self.meta.seed)?;
        writeln!(meta_out, "config_hash={hash}")?;
        writeln!(meta_out, "pem_hash={}", self.cfg.pem_hash())?;
        writeln!(meta_out, "n_grids={}", self.grid_map.n_grids())?;
        writeln!(meta_out, "n_intervals={}", self.meta.n_intervals)?;
        writeln!(meta_out, "n_cells={}", self.grid_map.n_cells)?;
        writeln!(meta_out, "n_angles={}", self.angular_grid.n_angles())?;
        meta_out.flush()?;
        Ok(())
    }

    /// Loads a serialized map, checking that it was built from `cfg`.
    pub fn load(dir: &Path, cfg: &RunConfig) -> Result<Pem> {
        cfg.validate()?;
        let meta_text = fs::read_to_string(dir.join("meta.txt"))?;
        let mut meta_kv = BTreeMap::new();
        for line in meta_text.lines() {
            if let Some((k, v)) = line.split_once('=') {
                meta_kv.insert(k.to_string(), v.to_string());
            }
        }
        let stored_hash = meta_kv
            .get("config_hash")
            .ok_or_else(|| Error::Parse("meta.txt lacks config_hash".into()))?
            .clone();
        let stored_pem_hash = meta_kv
            .get("pem_hash")
            .ok_or_else(|| Error::Parse("meta.txt lacks pem_hash".into()))?
            .clone();
        if stored_pem_hash != cfg.pem_hash() {
            return Err(Error::Config(format!(
                "PEM at {} was built from a different scenario (hash {stored_pem_hash})",
                dir.display()
            )));
        }
        let seed = parse_field::<u64>(&meta_kv, "seed")?;
        let n_intervals = parse_field::<usize>(&meta_kv, "n_intervals")?;

        let grid_map = build_grid_map(&cfg.scenario)?;
        let angular_grid = AngularGrid::new(cfg.n_angles());

        let mut ckm = CkmStore::new();
        for line in data_lines(&fs::read_to_string(dir.join("ckm.csv"))?) {
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 4 + angular_grid.n_angles() {
                return Err(Error::Parse(format!("bad ckm.csv row: {line}")));
            }
            let cell = parse_num::<usize>(parts[0])?;
            let grid = parse_num::<usize>(parts[1])?;
            let interval = parse_num::<usize>(parts[2])?;
            let prov = Provenance::parse(parts[3])?;
            let weights = parts[4..]
                .iter()
                .map(|s| parse_num::<f64>(s))
                .collect::<Result<Vec<f64>>>()?;
            ckm.insert(cell, ApsEstimate { weights, grid_id: grid, time_interval: interval }, prov);
        }

        let mut dtm = vec![TrafficModel::zero(); grid_map.n_grids()];
        for line in data_lines(&fs::read_to_string(dir.join("dtm.csv"))?) {
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() < 5 {
                return Err(Error::Parse(format!("bad dtm.csv row: {line}")));
            }
            let grid = parse_num::<usize>(parts[0])?;
            let harmonics = parse_num::<usize>(parts[1])?;
            let residual_var = parse_num::<f64>(parts[2])?;
            let ridge_weight = parse_num::<f64>(parts[3])?;
            let coefficients = parts[4..]
                .iter()
                .map(|s| parse_num::<f64>(s))
                .collect::<Result<Vec<f64>>>()?;
            if grid >= dtm.len() {
                return Err(Error::Parse(format!("dtm.csv grid {grid} out of range")));
            }
            dtm[grid] = TrafficModel { coefficients, residual_var, harmonics, ridge_weight };
        }

        Ok(Pem {
            cfg: cfg.clone(),
            grid_map,
            angular_grid,
            ckm,
            dtm,
            meta: BuildMeta { seed, config_hash: stored_hash, n_intervals },
        })
    }
}

fn data_lines(text: &str) -> impl Iterator<Item = &str> {
    text.lines().filter(|l| !l.is_empty() && !l.starts_with('#')).skip(1)
}

fn parse_num<T: std::str::FromStr>(s: &str) -> Result<T> {
    s.parse::<T>().map_err(|_| Error::Parse(format!("cannot parse '{s}'")))
}

fn parse_field<T: std::str::FromStr>(kv: &BTreeMap<String, String>, key: &str) -> Result<T> {
    kv.get(key)
        .ok_or_else(|| Error::Parse(format!("meta.txt lacks {key}")))
        .and_then(|v| parse_num::<T>(v))
}
