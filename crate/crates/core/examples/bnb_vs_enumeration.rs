//! Branch-and-bound against exhaustive enumeration for two units on the
//! 15-bus feeder.

use gridloss::acpf::timed;
use gridloss::conic::{BnbOptions, SolverOptions, enumerate_subsets, solve_mixed};
use gridloss::distflow::{BuildOptions, DgConfig, build_stage1, extract_placement};
use gridloss::grid;
use gridloss::load::ZipCoefficients;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let net = grid::ieee15()?.to_per_unit()?;
    let zip = ZipCoefficients::uniform(0.1, 0.3, 0.6);
    let dg = DgConfig::from_kva(&net, 2, 2100.0);
    let model = build_stage1(&net, &zip, &dg, &BuildOptions::default())?;

    let (bnb, t_bnb) = timed(|| solve_mixed(&model.problem, &BnbOptions::default()));
    let bnb = bnb?;
    let placement = extract_placement(&bnb.solution, &model)?;
    println!(
        "branch-and-bound: {:?}, {:.4} kW, {} nodes, {:.3} s",
        placement.dg_buses(),
        placement.predicted_losses_kw,
        bnb.stats.nodes,
        t_bnb
    );

    let (en, t_en) = timed(|| {
        enumerate_subsets(
            |subset| model.with_fixed_placement(subset),
            model.dgs.len(),
            2,
            10_000,
            &SolverOptions::default(),
        )
    });
    let en = en?;
    let ids = model.dg_bus_ids();
    let buses: Vec<usize> = en.subset.iter().map(|&k| ids[k]).collect();
    println!(
        "enumeration:      {:?}, {:.4} kW, {} solves, {:.3} s",
        buses,
        en.solution.objective_value * net.base().kw_per_pu(),
        en.solves,
        t_en
    );
    Ok(())
}
