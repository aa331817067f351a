//! Checks a conic solution with the backward/forward sweep: losses, bus
//! voltages and the per-branch cone gap.

use gridloss::acpf::{SweepOptions, tightness_report, verify_solution};
use gridloss::conic::{SolverOptions, solve_continuous};
use gridloss::distflow::{BuildOptions, DgConfig, build_stage1, extract_placement};
use gridloss::grid;
use gridloss::load::ZipCoefficients;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let net = grid::ieee15()?.to_per_unit()?;
    let zip = ZipCoefficients::uniform(0.1, 0.3, 0.6);
    let dg = DgConfig::from_kva(&net, 2, 2100.0).with_candidates(vec![4, 6]);
    let model = build_stage1(&net, &zip, &dg, &BuildOptions::default())?;
    let problem = model.with_fixed_buses(&[4, 6])?;
    let sol = solve_continuous(&problem, &SolverOptions::default())?;
    let placement = extract_placement(&sol, &model)?;

    let v = verify_solution(&net, &zip, &placement, &SweepOptions::default())?;
    println!(
        "SOCP {:.4} kW, sweep {:.4} kW, relative error {:.2e}, {} sweep iterations",
        v.socp_losses_kw, v.sweep_losses_kw, v.rel_error, v.iterations
    );
    println!("largest |V| difference {:.2e} p.u.", v.max_voltage_delta);

    let t = tightness_report(&sol, &model);
    for g in &t.gaps {
        println!("{:>3} -> {:<3} gap {:.2e}", g.from, g.to, g.gap);
    }
    println!("tight: {} (max {:.2e})", t.is_tight(), t.max_gap);
    Ok(())
}
