//! Reactive dispatch for the four-unit 15-bus placement, and the voltage
//! profile before and after.

use gridloss::study::Study;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let study = Study::bundled("ieee15")?;
    let base = study.base_case()?;
    let s1 = study.stage1(4)?;
    let s2 = study.stage2(&s1.solution)?;

    println!(
        "losses: {:.3} kW base, {:.3} kW stage 1, {:.3} kW stage 2",
        base.solution.predicted_losses_kw,
        s1.solution.predicted_losses_kw,
        s2.solution.predicted_losses_kw
    );
    for d in &s2.solution.dgs {
        println!("bus {:>2}: {:8.2} kW {:8.2} kvar", d.bus, d.p_kw, d.q_kvar);
    }
    println!("{:>4} {:>8} {:>8}", "bus", "base", "stage 2");
    for (k, bus) in study.network().buses().iter().enumerate() {
        println!(
            "{:>4} {:>8.4} {:>8.4}",
            bus.id,
            base.power_flow().v_mag(k),
            s2.power_flow().v_mag(k)
        );
    }
    Ok(())
}
