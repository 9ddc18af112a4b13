// Scratch trace of early estimator behavior (not part of the deliverable).
use vanmpc_core::estimator::EstimatorConfig;
use vanmpc_core::harness::{artificial_uncertainty_suite, run_single_mode};
use vanmpc_core::planner::PlannerMode;
use vanmpc_core::planner::OcpConfig;
use vanmpc_core::plant::PlantConfig;

fn main() {
    let suite = artificial_uncertainty_suite();
    let sc = &suite[2]; // flat_xi04
    for mode in [PlannerMode::AnSmall, PlannerMode::AnLarge, PlannerMode::Van] {
        let rec = run_single_mode(sc, mode, &OcpConfig::default(), &EstimatorConfig::default(), &PlantConfig::default()).unwrap();
        println!("-- {} --", mode.name());
        for r in rec.rows.iter().step_by(5).take(60) {
            println!(
                "t={:4.1} dist={:6.3} dv_hat={:7.4} dv_true={:7.4} rel={:?} g1={:4.2} zeta={:5.2} ee_x={:8.5} er_x={:8.5} er_y={:8.5}",
                r.time, r.distance, r.delta_hat[0], r.delta_true[0],
                r.rel_err_v.map(|v| (v*100.0).round()/100.0), r.gamma[0], r.zeta_mean[0],
                r.e_e[0], r.e_r[0], r.e_r[1],
            );
        }
    }
}
