//! Builds a small feeder from in-memory tables and places one DG unit on it.

use gridloss::acpf::{SweepOptions, verify_solution};
use gridloss::conic::{BnbOptions, solve_mixed};
use gridloss::distflow::{BuildOptions, DgConfig, build_stage1, extract_placement};
use gridloss::grid::{FeederConfig, parse_feeder_from_readers};
use gridloss::load::ZipCoefficients;

const BUSES: &str = "\
id,p_load_kw,q_load_kvar,v_min_pu,v_max_pu
1,0,0,0.95,1.05
2,300,150,0.95,1.05
3,250,120,0.95,1.05
4,400,200,0.95,1.05
5,150,60,0.95,1.05
";

const BRANCHES: &str = "\
from,to,r_ohm,x_ohm,i_max_a
1,2,0.8,0.6,
2,3,1.1,0.7,
2,4,0.9,0.9,
4,5,1.4,0.8,
";

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = FeederConfig {
        base_kv: 11.0,
        base_mva: 1.0,
        slack_bus: 1,
    };
    let net =
        parse_feeder_from_readers(BUSES.as_bytes(), BRANCHES.as_bytes(), cfg)?.to_per_unit()?;
    let zip = ZipCoefficients::default();
    let dg = DgConfig::from_kva(&net, 1, 800.0);
    let model = build_stage1(&net, &zip, &dg, &BuildOptions::default())?;
    let mixed = solve_mixed(&model.problem, &BnbOptions::default())?;
    let placement = extract_placement(&mixed.solution, &model)?;
    let v = verify_solution(&net, &zip, &placement, &SweepOptions::default())?;
    println!(
        "DG at bus {:?}: {:.2} kW, losses {:.4} kW (swept {:.4})",
        placement.dg_buses(),
        placement.dgs[0].p_kw,
        placement.predicted_losses_kw,
        v.sweep_losses_kw
    );
    Ok(())
}
