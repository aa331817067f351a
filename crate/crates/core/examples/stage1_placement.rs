//! Loss-minimizing DG placement on the 15-bus feeder for one to four units,
//! each checked against a reference placement when the config lists one.

use gridloss::study::Study;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let study = Study::bundled("ieee15")?;
    for n in 1..=4 {
        let s1 = study.stage1(n)?;
        let stats = s1.bnb.as_ref().expect("stage 1 runs branch-and-bound");
        println!(
            "n = {n}: buses {:?}, {:.3} kW (swept {:.3}), {} nodes",
            s1.solution.dg_buses(),
            s1.solution.predicted_losses_kw,
            s1.verification.sweep_losses_kw,
            stats.nodes
        );
        for d in &s1.solution.dgs {
            println!("    bus {:>2}: {:8.2} kW", d.bus, d.p_kw);
        }
        if let Some(reference) = study.config().reference_placements.get(&n) {
            let fixed = study.stage1_fixed(reference)?;
            println!(
                "    reference {:?}: {:.3} kW",
                reference, fixed.solution.predicted_losses_kw
            );
        }
    }
    Ok(())
}
