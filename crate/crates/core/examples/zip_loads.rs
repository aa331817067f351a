//! The ZIP load model next to its ZP linearization, and how the load mix
//! moves the 33-bus base-case losses.

use gridloss::acpf::{SweepOptions, backward_forward_sweep};
use gridloss::grid;
use gridloss::load::{ZipCoefficients, linearize_to_zp};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let zip = ZipCoefficients::uniform(0.4, 0.3, 0.3);
    let zp = linearize_to_zp(&zip)?;
    println!("{:>6} {:>10} {:>10}", "|V|", "ZIP", "ZP");
    for k in 0..=6 {
        let v = 0.90 + 0.025 * k as f64;
        println!(
            "{v:>6.3} {:>10.6} {:>10.6}",
            zip.active_power(1.0, v),
            zp.active_power(1.0, v * v)
        );
    }

    let net = grid::ieee33()?.to_per_unit()?;
    for (z, i, p) in [
        (0.0, 0.0, 1.0),
        (0.3, 0.3, 0.4),
        (0.4, 0.3, 0.3),
        (1.0, 0.0, 0.0),
    ] {
        let pf = backward_forward_sweep(
            &net,
            &[],
            &ZipCoefficients::uniform(z, i, p),
            &SweepOptions::default(),
        )?;
        println!(
            "Z {z:.1} I {i:.1} P {p:.1}: {:.3} kW, v_min {:.4}",
            pf.total_losses_kw,
            pf.min_voltage()
        );
    }
    Ok(())
}
