use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use pemnet::bf::*;
use pemnet::config::RunConfig;
use pemnet::env::*;
use pemnet::meas::*;
use pemnet::pem::build_pem;
use pemnet::{streams, substream};

fn main() {
    let mut cfg = RunConfig::mcbf_demo();
    cfg.scenario.n_tx = 8;
    cfg.scenario.noise_power = 1e-12;
    cfg.bf.pilot_noise_var = 1e-8;
    cfg.measurement.n_snapshots = 1000;
    cfg.traffic.gmm_means = vec![[55.0, 45.0], [95.0, 45.0], [75.0, 95.0]];
    cfg.traffic.gmm_covs = vec![[[200.0, 0.0], [0.0, 200.0]]; 3];
    cfg.traffic.gmm_weights = vec![0.34, 0.33, 0.33];
    let seed = cfg.scenario.rng_seed;
    let gm = build_grid_map(&cfg.scenario).unwrap();
    let profiles = generate_path_profiles(&cfg.scenario, &gm, &mut substream(seed, streams::PROFILES));
    let cb = dft_codebook(8, cfg.m_beams());
    let mr = generate_mr_dataset(&cfg.scenario, &gm, &profiles, &cb, &cfg.measurement, &mut substream(seed, streams::mr(8))).unwrap();
    let traffic = generate_traffic_records(&cfg, &mut substream(seed, streams::TRAFFIC)).unwrap();
    let pem = build_pem(&cfg, &mr, &traffic).unwrap().0;
    let occ = pem.occurrence(cfg.bf.eval_time_h).unwrap();
    let params = EvalParams { n0: 500, pilot_noise_var: cfg.bf.pilot_noise_var, eval_time_h: cfg.bf.eval_time_h, wmmse_max_iters: 100, wmmse_tol: 1e-5 };

    let mut agg = vec![0.0f64; 8];
    let trials = 10;
    for t in 0..trials {
        let mut rng = substream(seed, streams::trial(8, t));
        let inst = draw_instance(&cfg, &gm, &profiles, &occ, &mut rng).unwrap();
        // Same CSI noise stream for both schemes via fresh rng clones.
        let mut r1 = rng.clone();
        let mut r2 = rng.clone();
        let pcbf = evaluate_scheme(&inst, Scheme::PemnetPcbf, &pem, &params, &mut r1).unwrap();
        let sal = evaluate_scheme(&inst, Scheme::PemnetSalinr, &pem, &params, &mut r2).unwrap();

        // Reconstruct beams to inspect cross-interference: recompute via estimate_csi path is messy;
        // instead use SINR decomposition from eval: intra vs cross needs beams. Recompute quickly:
        for (si, scheme) in [Scheme::PemnetPcbf, Scheme::PemnetSalinr].iter().enumerate() {
            let mut rr = rng.clone();
            let csi = estimate_csi(&inst, *scheme, &pem, params.pilot_noise_var, params.eval_time_h, &mut rr).unwrap();
            let mut beams: Vec<DVector<Complex64>> = vec![DVector::zeros(8); inst.n_users()];
            for c in 0..inst.n_cells {
                let users = inst.cell_users(c);
                if users.is_empty() { continue; }
                let intra: Vec<DVector<Complex64>> = users.iter().map(|&k| csi.channels[k][c].clone().unwrap()).collect();
                let cell_beams = if *scheme == Scheme::PemnetSalinr {
                    let mut leak = DMatrix::<Complex64>::zeros(8, 8);
                    for v in 0..inst.n_cells { if v != c { leak += leakage_covariance(&pem, c, v, params.eval_time_h).unwrap(); } }
                    slnr_beamforming(&intra, &leak, inst.power_budget, inst.noise_power).unwrap()
                } else {
                    let prob = CoopProblem { channels: intra.iter().map(|h| vec![h.clone()]).collect(), serving: vec![0; users.len()], n_cells: 1, power: inst.power_budget, noise: inst.noise_power };
                    wmmse_beamforming(&prob, 100, 1e-5).unwrap().beamformers
                };
                for (&k, v) in users.iter().zip(cell_beams) { beams[k] = v; }
            }
            // intra vs cross interference and signal
            let (mut sig, mut intra_i, mut cross_i) = (0.0, 0.0, 0.0);
            let mut pw: Vec<f64> = Vec::new();
            for k in 0..inst.n_users() {
                for j in 0..inst.n_users() {
                    let g = inst.channels[k][inst.serving[j]].dotc(&beams[j]).norm_sqr();
                    if j == k { sig += g; }
                    else if inst.serving[j] == inst.serving[k] { intra_i += g; }
                    else { cross_i += g; }
                }
                pw.push(beams[k].norm_squared());
            }
            pw.sort_by(|a, b| b.partial_cmp(a).unwrap());
            let k_tot = inst.n_users() as f64;
            agg[si * 4 + 0] += sig / k_tot;
            agg[si * 4 + 1] += intra_i / k_tot;
            agg[si * 4 + 2] += cross_i / k_tot;
            agg[si * 4 + 3] += pw[..(pw.len() / 3)].iter().sum::<f64>() / pw.iter().sum::<f64>();
        }
        if t == 0 {
            println!("trial0 rates: pcbf {:.2} sal {:.2}", pcbf.sum_rate, sal.sum_rate);
        }
    }
    let n = trials as f64;
    for (name, base) in [("PCBF ", 0), ("SALNR", 4)] {
        println!("{name}: signal {:.3e}  intra_int {:.3e}  cross_int {:.3e}  top1/3 power share {:.2}",
            agg[base] / n, agg[base + 1] / n, agg[base + 2] / n, agg[base + 3] / n);
    }
}
