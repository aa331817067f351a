//! Power flow of the 33-bus feeder without DG: the sweep with constant-power
//! and ZIP loads, and the conic relaxation of the same case.

use gridloss::acpf::{SweepOptions, backward_forward_sweep, timed};
use gridloss::grid;
use gridloss::load::ZipCoefficients;
use gridloss::study::Study;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let net = grid::ieee33()?.to_per_unit()?;

    let (pf, secs) = timed(|| {
        backward_forward_sweep(
            &net,
            &[],
            &ZipCoefficients::constant_power(),
            &SweepOptions::default(),
        )
    });
    let pf = pf?;
    println!(
        "constant power: {:.3} kW losses, {} iterations, {:.1} ms",
        pf.total_losses_kw,
        pf.iterations,
        secs * 1e3
    );

    let study = Study::bundled("ieee33")?;
    let zip = study.config().zip;
    let pf = backward_forward_sweep(&net, &[], &zip, &SweepOptions::default())?;
    println!(
        "ZIP ({}, {}, {}): {:.3} kW losses, v_min {:.4} p.u.",
        zip.z_p,
        zip.i_p,
        zip.p_p,
        pf.total_losses_kw,
        pf.min_voltage()
    );
    println!("buses below v_min: {:?}", pf.buses_below_limit(&net));

    let base = study.base_case()?;
    println!(
        "SOCP: {:.3} kW predicted, {:.3} kW swept, max cone gap {:.2e}",
        base.solution.predicted_losses_kw,
        base.verification.sweep_losses_kw,
        base.tightness.max_gap
    );
    Ok(())
}
