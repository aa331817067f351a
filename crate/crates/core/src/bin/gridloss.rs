use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use gridloss::study::{
    OutputOptions, ReportRow, Study, StudyError, StudyReport, cmd_base, cmd_load_study, cmd_stage1,
    cmd_stage2,
};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Command {
    Base,
    Stage1,
    Stage2,
    Loadstudy,
}

/// Loss-minimizing DG placement and dispatch on radial feeders.
#[derive(Debug, Parser)]
#[command(name = "gridloss", version)]
struct Cli {
    command: Command,
    /// Study config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
    /// Fleet sizes, e.g. `1,2,3`.
    #[arg(long, value_delimiter = ',')]
    n_dg: Option<Vec<usize>>,
    /// Load multiplier for `loadstudy`; overrides the config.
    #[arg(long)]
    factor: Option<f64>,
    /// Placements file for `stage2`; defaults to `<out>/placements.json`.
    #[arg(long)]
    placements: Option<PathBuf>,
    /// Also write SVG figures.
    #[arg(long)]
    svg: bool,
}

fn print_rows(report: &StudyReport) {
    println!(
        "{:<14} {:>4} {:<22} {:>12} {:>12} {:>10} {:>8} {:>10}",
        "scenario", "n", "buses", "predicted", "swept", "rel_err", "v_min", "tightness"
    );
    for r in &report.rows {
        print_row(r);
    }
}

fn print_row(r: &ReportRow) {
    let buses = r
        .dg_buses
        .iter()
        .map(|b| b.to_string())
        .collect::<Vec<_>>()
        .join(" ");
    println!(
        "{:<14} {:>4} {:<22} {:>12.4} {:>12.4} {:>10.2e} {:>8.4} {:>10.2e}",
        r.scenario,
        r.n_dg,
        buses,
        r.predicted_losses_kw(),
        r.sweep_losses_kw,
        r.rel_error,
        r.min_voltage_pu,
        r.max_tightness_gap
    );
    if let (Some(nodes), Some(gap)) = (r.bnb_nodes, r.bnb_gap) {
        println!("{:<14} branch-and-bound: {nodes} nodes, gap {gap:.2e}", "");
    }
}

fn run(cli: Cli) -> Result<(), StudyError> {
    let mut study = Study::load(&cli.config)?;
    if let Some(f) = cli.factor {
        study.config_mut().loadstudy.factor = f;
    }
    let out = OutputOptions::new(&cli.out).with_svg(cli.svg);
    match cli.command {
        Command::Base => print_rows(&cmd_base(&study, &out)?),
        Command::Stage1 => {
            let ns = cli.n_dg.unwrap_or_else(|| study.config().n_dg_list());
            let report = cmd_stage1(&study, &ns, &out)?;
            print_rows(&report);
            for r in report
                .rows
                .iter()
                .filter(|r| r.scenario.ends_with("_reference"))
            {
                if let Some(opt) = report.row(&r.scenario.replace("_reference", "_stage1")) {
                    println!(
                        "n = {}: optimum {:?} at {:.4} kW, reference {:?} at {:.4} kW ({:+.4} kW)",
                        r.n_dg,
                        opt.dg_buses,
                        opt.predicted_losses_kw(),
                        r.dg_buses,
                        r.predicted_losses_kw(),
                        r.predicted_losses_kw() - opt.predicted_losses_kw()
                    );
                }
            }
        }
        Command::Stage2 => {
            let report = cmd_stage2(&study, cli.n_dg.as_deref(), cli.placements.as_deref(), &out)?;
            print_rows(&report);
        }
        Command::Loadstudy => {
            let factor = study.config().loadstudy.factor;
            let ls = cmd_load_study(&study, factor, &out)?;
            print_rows(&ls.report);
            println!("placement {:?}, load factor {factor}", ls.placement);
            println!("{:>5} {:>12} {:>12}", "bus", "dL_nodg_kW", "dL_opt_kW");
            for r in &ls.rows {
                println!(
                    "{:>5} {:>12.4} {:>12.4}",
                    r.bus, r.delta_nodg_kw, r.delta_opt_kw
                );
            }
            if let Some(w) = ls.worst() {
                println!(
                    "worst bus {}: {:.4} kW without DG, {:.4} kW with DG",
                    w.bus, w.delta_nodg_kw, w.delta_opt_kw
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
