//! Raises each 15-bus load by half in turn and compares the loss increase
//! with and without the optimized DG fleet. Output files go to a temporary
//! directory.

use gridloss::study::{OutputOptions, Study, cmd_load_study};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let study = Study::bundled("ieee15")?;
    let out = OutputOptions::new(std::env::temp_dir().join("gridloss-load-study"));
    let ls = cmd_load_study(&study, 1.5, &out)?;
    println!("placement {:?}", ls.placement);
    println!("{:>4} {:>10} {:>10}", "bus", "ΔL no DG", "ΔL DG");
    for r in &ls.rows {
        println!(
            "{:>4} {:>10.4} {:>10.4}",
            r.bus, r.delta_nodg_kw, r.delta_opt_kw
        );
    }
    if let Some(w) = ls.worst() {
        println!(
            "worst bus {}: {:.3} kW without DG, {:.3} kW with DG",
            w.bus, w.delta_nodg_kw, w.delta_opt_kw
        );
    }
    println!("files in {}", out.out_dir.display());
    Ok(())
}
