// Scratch closed-loop smoke run (not part of the deliverable).
use std::time::Instant;
use vanmpc_core::estimator::EstimatorConfig;
use vanmpc_core::harness::{artificial_uncertainty_suite, compute_metrics, run_single_mode};
use vanmpc_core::planner::{OcpConfig, PlannerMode};
use vanmpc_core::plant::PlantConfig;

fn main() {
    let which: Vec<String> = std::env::args().skip(1).collect();
    let suite = artificial_uncertainty_suite();
    let ocp = OcpConfig::default();
    let est = EstimatorConfig::default();
    let plant = PlantConfig::default();
    for sc in &suite {
        if !which.is_empty() && !which.contains(&sc.name) {
            continue;
        }
        println!("== scenario {} ==", sc.name);
        for mode in PlannerMode::ALL {
            let t0 = Instant::now();
            let rec = run_single_mode(sc, mode, &ocp, &est, &plant).unwrap();
            let dt = t0.elapsed().as_secs_f64();
            let m = compute_metrics(&rec, sc.true_profile_known);
            let iters: usize = rec.rows.iter().map(|r| r.sqp_iterations).sum();
            let maxg = rec.rows.iter().map(|r| r.gamma[0]).fold(0.0f64, f64::max);
            println!(
                "{:9} t_r={:?} d_m={:.4} d_mr={:?} d_fp={:.3} e_rmsv={:?} t_re={:?} e_rmser={:?} div={} [{}s {} iters g1max {:.2}]",
                mode.name(), m.t_r, m.d_m,
                m.d_mr.map(|v| (v * 1e4).round() / 1e4),
                m.d_fp,
                m.e_rmsv.map(|v| (v * 1e4).round() / 1e4),
                m.t_re,
                m.e_rmser.map(|v| (v * 1e4).round() / 1e4),
                rec.diverged, (dt * 100.0).round() / 100.0, iters, maxg,
            );
        }
    }
}
