//! Overhead-aware multi-cell coordinated beamforming case study.
//!
//! Six schemes share one network realization per trial. Conventional schemes
//! spend pilot symbols per transmit antenna to estimate channels; PEM-based
//! schemes pull each link's dominant directions from the map and only
//! estimate the per-path complex gains, cutting the pilot count from n_tx to
//! n_p per link. All schemes are scored by the effective sum rate
//! ESR = (n0 - n1)/n0 * sum_k log2(1 + gamma_k), with SINRs always computed
//! on the true channels so estimation error acts only through the beams.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand_distr::{Distribution, Normal};

use crate::config::RunConfig;
use crate::env::{
    build_grid_map, generate_path_profiles, place_active_users, realize_channel, traffic_volume,
};
use crate::meas::{dft_codebook, generate_mr_dataset};
use crate::pem::{build_pem, Pem};
use crate::dtm::TrafficRecord;
use crate::{streams, substream, Error, Result, SimRng};

/// Beamforming scheme under evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scheme {
    McbfIdeal,
    McbfConv,
    PcbfConv,
    PemnetMcbf,
    PemnetPcbf,
    PemnetSalinr,
}

impl Scheme {
    pub const ALL: [Scheme; 6] = [
        Scheme::McbfIdeal,
        Scheme::McbfConv,
        Scheme::PcbfConv,
        Scheme::PemnetMcbf,
        Scheme::PemnetPcbf,
        Scheme::PemnetSalinr,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Scheme::McbfIdeal => "MCBF_IDEAL",
            Scheme::McbfConv => "MCBF_CONV",
            Scheme::PcbfConv => "PCBF_CONV",
            Scheme::PemnetMcbf => "PEMNET_MCBF",
            Scheme::PemnetPcbf => "PEMNET_PCBF",
            Scheme::PemnetSalinr => "PEMNET_SALINR",
        }
    }

    pub fn parse(s: &str) -> Result<Scheme> {
        Scheme::ALL
            .into_iter()
            .find(|v| v.label() == s)
            .ok_or_else(|| Error::Config(format!("unknown scheme '{s}'")))
    }

    /// Pilot symbols consumed per coherence period.
    pub fn pilot_symbols(self, n_cells: usize, n_tx: usize, n_paths: usize) -> usize {
        match self {
            Scheme::McbfIdeal => 0,
            Scheme::McbfConv => n_cells * n_tx,
            Scheme::PcbfConv => n_tx,
            Scheme::PemnetMcbf => n_cells * n_paths,
            Scheme::PemnetPcbf | Scheme::PemnetSalinr => n_paths,
        }
    }

    fn estimates_cross_cell(self) -> bool {
        matches!(self, Scheme::McbfIdeal | Scheme::McbfConv | Scheme::PemnetMcbf)
    }
}

/// One network realization: user placements and true channels from every
/// cell to every user.
#[derive(Debug, Clone)]
pub struct NetworkInstance {
    /// Serving cell per user.
    pub serving: Vec<usize>,
    /// Grid id per user.
    pub grids: Vec<usize>,
    /// True channels, indexed [user][cell].
    pub channels: Vec<Vec<DVector<Complex64>>>,
    pub n_cells: usize,
    pub power_budget: f64,
    pub noise_power: f64,
}

impl NetworkInstance {
    pub fn n_users(&self) -> usize {
        self.serving.len()
    }

    pub fn cell_users(&self, cell: usize) -> Vec<usize> {
        (0..self.n_users()).filter(|&k| self.serving[k] == cell).collect()
    }
}

/// Estimated channels; `None` marks links a scheme does not estimate.
#[derive(Debug, Clone)]
pub struct CsiEstimate {
    pub channels: Vec<Vec<Option<DVector<Complex64>>>>,
    pub n1: usize,
}

fn complex_noise(var: f64, rng: &mut SimRng) -> Complex64 {
    if var <= 0.0 {
        return Complex64::new(0.0, 0.0);
    }
    let comp = Normal::new(0.0, (var / 2.0).sqrt()).expect("finite variance");
    Complex64::new(comp.sample(rng), comp.sample(rng))
}

/// Per-scheme channel estimation.
///
/// Conventional modes observe the true channel plus white estimation noise.
/// PEM modes take the n_p strongest APS bins of the link's grid as angle
/// hypotheses, project the true channel onto those steering vectors through
/// noisy pilots, and solve a small least-squares problem for the path gains.
pub fn estimate_csi(
    instance: &NetworkInstance,
    scheme: Scheme,
    pem: &Pem,
    pilot_noise_var: f64,
    t_hours: f64,
    rng: &mut SimRng,
) -> Result<CsiEstimate> {
    let n_tx = instance.channels[0][0].len();
    let n_paths = pem.cfg.scenario.n_paths;
    let n1 = scheme.pilot_symbols(instance.n_cells, n_tx, n_paths);
    let mut channels: Vec<Vec<Option<DVector<Complex64>>>> =
        vec![vec![None; instance.n_cells]; instance.n_users()];

    for k in 0..instance.n_users() {
        for cell in 0..instance.n_cells {
            if !scheme.estimates_cross_cell() && cell != instance.serving[k] {
                continue;
            }
            let h = &instance.channels[k][cell];
            let est = match scheme {
                Scheme::McbfIdeal => h.clone(),
                Scheme::McbfConv | Scheme::PcbfConv => {
                    DVector::from_fn(n_tx, |m, _| h[m] + complex_noise(pilot_noise_var, rng))
                }
                _ => pem_channel_estimate(pem, cell, instance.grids[k], t_hours, h, pilot_noise_var, rng)?,
            };
            channels[k][cell] = Some(est);
        }
    }
    Ok(CsiEstimate { channels, n1 })
}

fn pem_channel_estimate(
    pem: &Pem,
    cell: usize,
    grid: usize,
    t_hours: f64,
    h_true: &DVector<Complex64>,
    pilot_noise_var: f64,
    rng: &mut SimRng,
) -> Result<DVector<Complex64>> {
    let n_tx = h_true.len();
    let n_paths = pem.cfg.scenario.n_paths;
    let interval = pem.interval_of(t_hours);
    let (aps, _) = pem
        .ckm
        .get(cell, grid, interval)
        .ok_or(Error::UnknownGrid(grid))?;

    // n_p strongest bins, ties to the lower index.
    let mut order: Vec<usize> = (0..aps.weights.len()).collect();
    order.sort_by(|&a, &b| {
        aps.weights[b].partial_cmp(&aps.weights[a]).expect("finite weights").then(a.cmp(&b))
    });
    let bins: Vec<usize> = order.into_iter().take(n_paths).collect();

    let mut steering = DMatrix::<Complex64>::zeros(n_tx, bins.len());
    for (j, &bin) in bins.iter().enumerate() {
        let s = pem.angular_grid.angles[bin].sin();
        for m in 0..n_tx {
            steering[(m, j)] = Complex64::from_polar(1.0, std::f64::consts::PI * m as f64 * s);
        }
    }

    // One noisy projection per hypothesized path, then LS for the gains.
    let mut y = DVector::<Complex64>::zeros(bins.len());
    for j in 0..bins.len() {
        let a_j = steering.column(j);
        let mut proj = Complex64::new(0.0, 0.0);
        for m in 0..n_tx {
            proj += a_j[m].conj() * h_true[m];
        }
        y[j] = proj + complex_noise(pilot_noise_var, rng);
    }
    let gram = steering.adjoint() * &steering;
    let gains = gram
        .lu()
        .solve(&y)
        .ok_or_else(|| Error::Solver("degenerate steering set in PEM CSI estimation".into()))?;
    Ok(&steering * gains)
}

/// One cooperation-scope WMMSE problem: `channels[k][c]` is the estimated
/// channel from local cell c to local user k; `serving[k]` is k's local cell.
#[derive(Debug, Clone)]
pub struct CoopProblem {
    pub channels: Vec<Vec<DVector<Complex64>>>,
    pub serving: Vec<usize>,
    pub n_cells: usize,
    pub power: f64,
    pub noise: f64,
}

/// WMMSE output: beamformers in local user order plus the surrogate sum-rate
/// trace, which is non-decreasing by construction.
#[derive(Debug, Clone)]
pub struct WmmseOutput {
    pub beamformers: Vec<DVector<Complex64>>,
    pub surrogate_trace: Vec<f64>,
    pub iterations: usize,
}

fn sum_rate_for(channels: &[Vec<DVector<Complex64>>], serving: &[usize], beams: &[DVector<Complex64>], noise: f64) -> f64 {
    let k_total = serving.len();
    let mut rate = 0.0;
    for k in 0..k_total {
        let mut signal = 0.0;
        let mut interference = 0.0;
        for j in 0..k_total {
            let gain = channels[k][serving[j]].dotc(&beams[j]).norm_sqr();
            if j == k {
                signal = gain;
            } else {
                interference += gain;
            }
        }
        rate += (1.0 + signal / (interference + noise)).log2();
    }
    rate
}

/// Iterative weighted-MMSE sum-rate beamforming with per-cell power
/// constraints enforced by bisection on the dual variable.
///
/// Initialization is matched filtering at an equal per-user power split. The
/// solver stops when the surrogate's relative gain drops below `tol`, when
/// `max_iters` is reached, or at the numerical floor (a non-improving step is
/// discarded, keeping the reported trace monotone).
pub fn wmmse_beamforming(prob: &CoopProblem, max_iters: usize, tol: f64) -> Result<WmmseOutput> {
    let k_total = prob.serving.len();
    if k_total == 0 {
        return Ok(WmmseOutput { beamformers: Vec::new(), surrogate_trace: Vec::new(), iterations: 0 });
    }
    let n_tx = prob.channels[0][0].len();
    let users_of: Vec<Vec<usize>> =
        (0..prob.n_cells).map(|c| (0..k_total).filter(|&k| prob.serving[k] == c).collect()).collect();

    // Matched-filter start at equal power split within each cell.
    let mut beams: Vec<DVector<Complex64>> = Vec::with_capacity(k_total);
    for k in 0..k_total {
        let h = &prob.channels[k][prob.serving[k]];
        let norm = h.norm();
        if norm <= 0.0 {
            return Err(Error::Domain(format!("user {k} has a zero channel estimate")));
        }
        let k_c = users_of[prob.serving[k]].len() as f64;
        beams.push(h.clone().unscale(norm).scale((prob.power / k_c).sqrt()));
    }

    let mut current = sum_rate_for(&prob.channels, &prob.serving, &beams, prob.noise);
    let mut trace = vec![current];
    let mut iterations = 0;

    for _ in 0..max_iters {
        // MMSE receivers and weights on the estimated channels.
        let mut u = vec![Complex64::new(0.0, 0.0); k_total];
        let mut w = vec![0.0f64; k_total];
        for k in 0..k_total {
            let mut denom = prob.noise;
            let mut direct = Complex64::new(0.0, 0.0);
            for j in 0..k_total {
                let t = prob.channels[k][prob.serving[j]].dotc(&beams[j]);
                denom += t.norm_sqr();
                if j == k {
                    direct = t;
                }
            }
            u[k] = direct / denom;
            let mse = 1.0 - direct.norm_sqr() / denom;
            w[k] = 1.0 / mse.max(1e-300);
        }

        // Per-cell transmit update under the power budget.
        let mut candidate = beams.clone();
        for c in 0..prob.n_cells {
            if users_of[c].is_empty() {
                continue;
            }
            let mut phi = DMatrix::<Complex64>::zeros(n_tx, n_tx);
            for k in 0..k_total {
                let alpha = w[k] * u[k].norm_sqr();
                if alpha == 0.0 {
                    continue;
                }
                let h = &prob.channels[k][c];
                for i in 0..n_tx {
                    for j in 0..n_tx {
                        phi[(i, j)] += alpha * h[i] * h[j].conj();
                    }
                }
            }
            let deltas: Vec<DVector<Complex64>> = users_of[c]
                .iter()
                .map(|&k| prob.channels[k][c].clone() * (u[k] * Complex64::new(w[k], 0.0)))
                .collect();
            let solved = solve_power_constrained(&phi, &deltas, prob.power)?;
            for (slot, v) in users_of[c].iter().zip(solved) {
                candidate[*slot] = v;
            }
        }

        let next = sum_rate_for(&prob.channels, &prob.serving, &candidate, prob.noise);
        if next < current {
            // Numerical floor; keep the certified iterate.
            break;
        }
        beams = candidate;
        let gain = next - current;
        current = next;
        trace.push(current);
        iterations += 1;
        if gain <= tol * current.abs().max(1e-12) {
            break;
        }
    }

    Ok(WmmseOutput { beamformers: beams, surrogate_trace: trace, iterations })
}

/// Solves v_j = (Phi + mu I)^-1 d_j with mu >= 0 chosen so the total power
/// sum_j ||v_j||^2 meets the cell budget (complementary slackness: mu = 0
/// when the unconstrained solution already fits).
fn solve_power_constrained(
    phi: &DMatrix<Complex64>,
    deltas: &[DVector<Complex64>],
    power: f64,
) -> Result<Vec<DVector<Complex64>>> {
    let eig = phi.clone().symmetric_eigen();
    let lambdas = &eig.eigenvalues;
    let q = &eig.eigenvectors;
    let n = phi.nrows();

    // Coefficients |q_i^H d_j|^2 make power(mu) a cheap scalar function.
    let coeffs: Vec<DVector<f64>> = deltas
        .iter()
        .map(|d| {
            let proj = q.adjoint() * d;
            DVector::from_fn(n, |i, _| proj[i].norm_sqr())
        })
        .collect();
    let power_at = |mu: f64| -> f64 {
        coeffs
            .iter()
            .map(|c| (0..n).map(|i| c[i] / (lambdas[i] + mu).powi(2)).sum::<f64>())
            .sum()
    };

    let total_delta_sq: f64 = coeffs.iter().map(|c| c.sum()).sum();
    if total_delta_sq == 0.0 {
        return Ok(deltas.iter().map(|d| DVector::zeros(d.len())).collect());
    }

    let lambda_min = lambdas.iter().cloned().fold(f64::INFINITY, f64::min);
    let lambda_max = lambdas.iter().cloned().fold(0.0f64, f64::max);
    let mu = if lambda_min > 1e-13 * lambda_max.max(1.0) && power_at(0.0) <= power {
        0.0
    } else {
        let mut lo = 0.0f64;
        // At hi, power <= sum ||d||^2 / hi^2 = power budget.
        let mut hi = (total_delta_sq / power).sqrt();
        let width0 = hi;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if power_at(mid) > power {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= 1e-15 * width0 {
                break;
            }
        }
        let achieved = power_at(hi);
        if achieved > power * (1.0 + 1e-6) || achieved < power * (1.0 - 1e-3) {
            return Err(Error::Solver(format!(
                "power bisection failed: budget {power}, achieved {achieved}, mu in [{lo}, {hi}]"
            )));
        }
        hi
    };

    let solved = deltas
        .iter()
        .map(|d| {
            let proj = q.adjoint() * d;
            let scaled = DVector::from_fn(n, |i, _| proj[i] / Complex64::new(lambdas[i] + mu, 0.0));
            q * scaled
        })
        .collect();
    Ok(solved)
}

/// Expected interference covariance leaked from `observer_cell` toward the
/// likely-active grids of `victim_cell`, inferred purely from the map:
/// L = E[n_victim] * sum_g qtilde_g R_g with occurrence renormalized within
/// the victim cell and R_g taken from the observer's CKM view.
pub fn leakage_covariance(
    pem: &Pem,
    observer_cell: usize,
    victim_cell: usize,
    t_hours: f64,
) -> Result<DMatrix<Complex64>> {
    let n_tx = pem.cfg.scenario.n_tx;
    let occ = pem.occurrence(t_hours)?;
    let victim_grids = pem.grid_map.grids_of_cell(victim_cell);
    let mass: f64 = victim_grids.iter().map(|&g| occ[g]).sum();
    let mut l = DMatrix::<Complex64>::zeros(n_tx, n_tx);
    if mass <= 0.0 {
        return Ok(l);
    }
    let expected_users = pem.cfg.scenario.n_ues as f64 * mass;
    let interval = pem.interval_of(t_hours);
    for &g in &victim_grids {
        let q_tilde = occ[g] / mass;
        if q_tilde == 0.0 {
            continue;
        }
        let (aps, _) = pem
            .ckm
            .get(observer_cell, g, interval)
            .ok_or(Error::UnknownGrid(g))?;
        let r = crate::ckm::aps_to_covariance(&aps.weights, &pem.angular_grid, n_tx);
        l += r * Complex64::new(expected_users * q_tilde, 0.0);
    }
    Ok(l)
}

/// Regularized signal-to-leakage beamformer executed per cell with no
/// inter-BS message exchange: v_k is the leakage-loaded MMSE direction of
/// its estimated channel, scaled to an equal power split.
pub fn slnr_beamforming(
    intra_channels: &[DVector<Complex64>],
    leakage: &DMatrix<Complex64>,
    power: f64,
    noise: f64,
) -> Result<Vec<DVector<Complex64>>> {
    let k_c = intra_channels.len();
    if k_c == 0 {
        return Err(Error::Domain("SLNR beamforming needs at least one served user".into()));
    }
    let n_tx = intra_channels[0].len();
    let loading = noise * k_c as f64 / power;
    let per_user_power = power / k_c as f64;
    let mut base = leakage.clone();
    for i in 0..n_tx {
        base[(i, i)] += Complex64::new(loading, 0.0);
    }
    let mut beams = Vec::with_capacity(k_c);
    for k in 0..k_c {
        let mut m = base.clone();
        for (j, h) in intra_channels.iter().enumerate() {
            if j == k {
                continue;
            }
            for a in 0..n_tx {
                for b in 0..n_tx {
                    m[(a, b)] += h[a] * h[b].conj();
                }
            }
        }
        let chol = nalgebra::linalg::Cholesky::new(m)
            .ok_or_else(|| Error::Solver("SLNR matrix lost positive definiteness".into()))?;
        let dir = chol.solve(&intra_channels[k]);
        let norm = dir.norm();
        if norm <= 0.0 {
            return Err(Error::Solver("SLNR direction collapsed to zero".into()));
        }
        beams.push(dir.unscale(norm).scale(per_user_power.sqrt()));
    }
    Ok(beams)
}

/// Per-user SINR on the true channels, all interferers included.
pub fn true_sinrs(instance: &NetworkInstance, beams: &[DVector<Complex64>]) -> Vec<f64> {
    let k_total = instance.n_users();
    (0..k_total)
        .map(|k| {
            let mut signal = 0.0;
            let mut interference = 0.0;
            for j in 0..k_total {
                let gain = instance.channels[k][instance.serving[j]].dotc(&beams[j]).norm_sqr();
                if j == k {
                    signal = gain;
                } else {
                    interference += gain;
                }
            }
            signal / (interference + instance.noise_power)
        })
        .collect()
}

/// Evaluation knobs shared across schemes.
#[derive(Debug, Clone, Copy)]
pub struct EvalParams {
    pub n0: usize,
    pub pilot_noise_var: f64,
    pub eval_time_h: f64,
    pub wmmse_max_iters: usize,
    pub wmmse_tol: f64,
}

/// One scheme's scores on one network instance.
#[derive(Debug, Clone)]
pub struct EvalResult {
    pub scheme: Scheme,
    pub n1: usize,
    pub sinr: Vec<f64>,
    pub sum_rate: f64,
    pub esr: f64,
}

/// Runs one scheme end to end: estimate CSI, design beams over the scheme's
/// cooperation scope, score with true channels.
pub fn evaluate_scheme(
    instance: &NetworkInstance,
    scheme: Scheme,
    pem: &Pem,
    params: &EvalParams,
    rng: &mut SimRng,
) -> Result<EvalResult> {
    let csi = estimate_csi(instance, scheme, pem, params.pilot_noise_var, params.eval_time_h, rng)?;
    if csi.n1 > params.n0 {
        return Err(Error::Domain(format!(
            "pilot count n1 = {} exceeds the coherence budget n0 = {}",
            csi.n1, params.n0
        )));
    }

    let k_total = instance.n_users();
    let mut beams: Vec<Option<DVector<Complex64>>> = vec![None; k_total];
    match scheme {
        Scheme::McbfIdeal | Scheme::McbfConv | Scheme::PemnetMcbf => {
            let channels: Vec<Vec<DVector<Complex64>>> = (0..k_total)
                .map(|k| {
                    (0..instance.n_cells)
                        .map(|c| csi.channels[k][c].clone().expect("joint scheme estimates all links"))
                        .collect()
                })
                .collect();
            let prob = CoopProblem {
                channels,
                serving: instance.serving.clone(),
                n_cells: instance.n_cells,
                power: instance.power_budget,
                noise: instance.noise_power,
            };
            let out = wmmse_beamforming(&prob, params.wmmse_max_iters, params.wmmse_tol)?;
            for (k, v) in out.beamformers.into_iter().enumerate() {
                beams[k] = Some(v);
            }
        }
        Scheme::PcbfConv | Scheme::PemnetPcbf => {
            for c in 0..instance.n_cells {
                let users = instance.cell_users(c);
                if users.is_empty() {
                    continue;
                }
                let channels: Vec<Vec<DVector<Complex64>>> = users
                    .iter()
                    .map(|&k| vec![csi.channels[k][c].clone().expect("serving link estimated")])
                    .collect();
                let prob = CoopProblem {
                    channels,
                    serving: vec![0; users.len()],
                    n_cells: 1,
                    power: instance.power_budget,
                    noise: instance.noise_power,
                };
                let out = wmmse_beamforming(&prob, params.wmmse_max_iters, params.wmmse_tol)?;
                for (&k, v) in users.iter().zip(out.beamformers) {
                    beams[k] = Some(v);
                }
            }
        }
        Scheme::PemnetSalinr => {
            for c in 0..instance.n_cells {
                let users = instance.cell_users(c);
                if users.is_empty() {
                    continue;
                }
                let intra: Vec<DVector<Complex64>> = users
                    .iter()
                    .map(|&k| csi.channels[k][c].clone().expect("serving link estimated"))
                    .collect();
                let n_tx = intra[0].len();
                let mut leakage = DMatrix::<Complex64>::zeros(n_tx, n_tx);
                for v in 0..instance.n_cells {
                    if v != c {
                        leakage += leakage_covariance(pem, c, v, params.eval_time_h)?;
                    }
                }
                let cell_beams =
                    slnr_beamforming(&intra, &leakage, instance.power_budget, instance.noise_power)?;
                for (&k, v) in users.iter().zip(cell_beams) {
                    beams[k] = Some(v);
                }
            }
        }
    }

    let beams: Vec<DVector<Complex64>> = beams
        .into_iter()
        .map(|b| b.ok_or_else(|| Error::Solver("a user was left without a beamformer".into())))
        .collect::<Result<_>>()?;
    let sinr = true_sinrs(instance, &beams);
    let sum_rate: f64 = sinr.iter().map(|&g| (1.0 + g).log2()).sum();
    let esr = (params.n0 - csi.n1) as f64 / params.n0 as f64 * sum_rate;
    Ok(EvalResult { scheme, n1: csi.n1, sinr, sum_rate, esr })
}

/// One row of the per-trial results table.
#[derive(Debug, Clone)]
pub struct McbfTrialRow {
    pub scheme: Scheme,
    pub n_tx: usize,
    pub trial: usize,
    pub n1: usize,
    pub sum_rate: f64,
    pub esr: f64,
}

/// Per-(scheme, n_tx) aggregate.
#[derive(Debug, Clone)]
pub struct McbfSummaryRow {
    pub scheme: Scheme,
    pub n_tx: usize,
    pub mean_esr: f64,
    pub stderr_esr: f64,
    pub mean_sum_rate: f64,
    pub n_trials: usize,
}

#[derive(Debug, Clone, Default)]
pub struct McbfResults {
    pub rows: Vec<McbfTrialRow>,
    pub summaries: Vec<McbfSummaryRow>,
}

impl McbfResults {
    pub fn summary(&self, scheme: Scheme, n_tx: usize) -> Option<&McbfSummaryRow> {
        self.summaries.iter().find(|s| s.scheme == scheme && s.n_tx == n_tx)
    }

    /// Standard error of the mean paired ESR difference a - b over shared
    /// trials; the right scale for ordering claims on a common instance set.
    pub fn paired_esr_gap(&self, a: Scheme, b: Scheme, n_tx: usize) -> Option<(f64, f64)> {
        let pick = |s: Scheme| -> Vec<f64> {
            let mut v: Vec<(usize, f64)> = self
                .rows
                .iter()
                .filter(|r| r.scheme == s && r.n_tx == n_tx)
                .map(|r| (r.trial, r.esr))
                .collect();
            v.sort_by_key(|&(t, _)| t);
            v.into_iter().map(|(_, e)| e).collect()
        };
        let va = pick(a);
        let vb = pick(b);
        if va.is_empty() || va.len() != vb.len() {
            return None;
        }
        let diffs: Vec<f64> = va.iter().zip(&vb).map(|(x, y)| x - y).collect();
        let n = diffs.len() as f64;
        let mean = diffs.iter().sum::<f64>() / n;
        let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n - 1.0).max(1.0);
        Some((mean, (var / n).sqrt()))
    }
}

/// Generates the BS-side traffic log from the ground-truth field: one sample
/// per grid per `sample_every_h`, with an occupancy count drawn around the
/// grid's density share.
pub fn generate_traffic_records(cfg: &RunConfig, rng: &mut SimRng) -> Result<Vec<TrafficRecord>> {
    let gm = build_grid_map(&cfg.scenario)?;
    let densities: Vec<f64> = gm.centers.iter().map(|&c| cfg.traffic.density(c)).collect();
    let total_density: f64 = densities.iter().sum();
    let mut records = Vec::new();
    let mut t = 0.0;
    while t < cfg.traffic_sampling.horizon_h {
        for g in 0..gm.n_grids() {
            let volume = traffic_volume(&cfg.traffic, gm.centers[g], t, rng);
            let share = if total_density > 0.0 { densities[g] / total_density } else { 0.0 };
            let mean_count = cfg.scenario.n_ues as f64 * share;
            let active_count = if mean_count > 0.0 {
                rand_distr::Poisson::new(mean_count)
                    .map_err(|e| Error::Domain(e.to_string()))?
                    .sample(rng) as usize
            } else {
                0
            };
            records.push(TrafficRecord { grid_id: g, time_h: t, volume, active_count });
        }
        t += cfg.traffic_sampling.sample_every_h;
    }
    Ok(records)
}

/// Builds one network instance: users placed by the PEM occurrence map,
/// channels realized from the ground-truth profiles.
pub fn draw_instance(
    cfg: &RunConfig,
    grid_map: &crate::env::GridMap,
    profiles: &crate::env::PathProfiles,
    occurrence: &[f64],
    rng: &mut SimRng,
) -> Result<NetworkInstance> {
    let placements = place_active_users(occurrence, cfg.scenario.n_ues, grid_map, rng)?;
    let n_cells = cfg.scenario.n_cells();
    let mut serving = Vec::with_capacity(placements.len());
    let mut grids = Vec::with_capacity(placements.len());
    let mut channels = Vec::with_capacity(placements.len());
    for (gid, _) in placements {
        serving.push(grid_map.cell_of_grid[gid]);
        grids.push(gid);
        let per_cell: Vec<DVector<Complex64>> = (0..n_cells)
            .map(|c| realize_channel(profiles.get(c, gid), cfg.scenario.n_tx, rng))
            .collect();
        channels.push(per_cell);
    }
    Ok(NetworkInstance {
        serving,
        grids,
        channels,
        n_cells,
        power_budget: cfg.scenario.tx_power,
        noise_power: cfg.scenario.noise_power,
    })
}

/// Full antenna sweep: for each n_tx, rebuild the measurement layer and the
/// PEM, then score every requested scheme over `n_trials` shared instances.
/// `preloaded` short-circuits the PEM build when its antenna count matches.
pub fn run_mcbf_experiment(
    cfg: &RunConfig,
    schemes: &[Scheme],
    preloaded: Option<&Pem>,
) -> Result<McbfResults> {
    cfg.validate()?;
    if schemes.is_empty() {
        return Err(Error::Config("no schemes requested".into()));
    }
    let seed = cfg.scenario.rng_seed;
    let traffic = generate_traffic_records(cfg, &mut substream(seed, streams::TRAFFIC))?;
    let mut results = McbfResults::default();

    for &n_tx in &cfg.bf.n_tx_list {
        let cfg_n = cfg.with_n_tx(n_tx);
        let grid_map = build_grid_map(&cfg_n.scenario)?;
        let profiles =
            generate_path_profiles(&cfg_n.scenario, &grid_map, &mut substream(seed, streams::PROFILES));

        let pem_owned;
        let pem: &Pem = match preloaded {
            Some(p) if p.cfg.scenario.n_tx == n_tx && p.cfg.pem_hash() == cfg_n.pem_hash() => p,
            _ => {
                let codebook = dft_codebook(n_tx, cfg_n.m_beams());
                let mr = generate_mr_dataset(
                    &cfg_n.scenario,
                    &grid_map,
                    &profiles,
                    &codebook,
                    &cfg_n.measurement,
                    &mut substream(seed, streams::mr(n_tx)),
                )?;
                pem_owned = build_pem(&cfg_n, &mr, &traffic)?.0;
                &pem_owned
            }
        };

        let occurrence = pem.occurrence(cfg.bf.eval_time_h)?;
        let params = EvalParams {
            n0: cfg.bf.n0,
            pilot_noise_var: cfg.bf.pilot_noise_var,
            eval_time_h: cfg.bf.eval_time_h,
            wmmse_max_iters: cfg.bf.wmmse_max_iters,
            wmmse_tol: cfg.bf.wmmse_tol,
        };

        let mut per_scheme: Vec<Vec<(f64, f64)>> = vec![Vec::new(); schemes.len()];
        for trial in 0..cfg.bf.n_trials {
            let mut rng = substream(seed, streams::trial(n_tx, trial));
            let instance = draw_instance(&cfg_n, &grid_map, &profiles, &occurrence, &mut rng)?;
            for (si, &scheme) in schemes.iter().enumerate() {
                let eval = evaluate_scheme(&instance, scheme, pem, &params, &mut rng)?;
                results.rows.push(McbfTrialRow {
                    scheme,
                    n_tx,
                    trial,
                    n1: eval.n1,
                    sum_rate: eval.sum_rate,
                    esr: eval.esr,
                });
                per_scheme[si].push((eval.esr, eval.sum_rate));
            }
        }

        for (si, &scheme) in schemes.iter().enumerate() {
            let vals = &per_scheme[si];
            let n = vals.len() as f64;
            let mean_esr = vals.iter().map(|v| v.0).sum::<f64>() / n;
            let mean_sum_rate = vals.iter().map(|v| v.1).sum::<f64>() / n;
            let var =
                vals.iter().map(|v| (v.0 - mean_esr) * (v.0 - mean_esr)).sum::<f64>() / (n - 1.0).max(1.0);
            results.summaries.push(McbfSummaryRow {
                scheme,
                n_tx,
                mean_esr,
                stderr_esr: (var / n).sqrt(),
                mean_sum_rate,
                n_trials: vals.len(),
            });
        }
    }
    Ok(results)
}
