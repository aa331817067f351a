//! Study driver behind the `gridloss` binary.
//!
//! A [`Study`] pairs a [`StudyConfig`] with the feeder it names. Its methods
//! run single scenarios (base case, Stage 1 for one fleet size, Stage 2 for
//! one placement) and return the conic solution together with the sweep
//! verification and the cone-tightness report. The `cmd_*` functions run
//! whole experiments and write their output files:
//!
//! * `report.csv`: one [`ReportRow`] per scenario, sorted by scenario id;
//! * `voltages_<scenario>.csv`: swept voltage profile per scenario;
//! * `placements.json` / `placements.csv`: Stage-1 results;
//! * `loadstudy.csv`: per-bus loss increase for the load study;
//! * `fig_<name>.svg` when SVG output is requested.

mod config;
mod report;
pub mod svg;

use std::fs::{self, File};
use std::io::{self, BufWriter};
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use thiserror::Error;

pub use config::{
    BnbSection, DgSection, FeederPaths, Limits, LoadStudySection, Stage1Section, StudyConfig,
    SweepSection, VerificationSection,
};
pub use report::{
    LOAD_STUDY_HEADER, LoadStudyRow, PlacementFile, REPORT_HEADER, ReportRow, StudyReport,
    write_load_study_csv,
};

use crate::acpf::{
    PowerFlowResult, SweepError, SweepOptions, TightnessReport, Verification,
    backward_forward_sweep, tightness_report, verify_solution,
};
use crate::conic::{BnbStats, ConicError, SolveStatus, solve_continuous, solve_mixed};
use crate::distflow::{
    BuildError, BuildOptions, DgConfig, DgSchedule, DispatchSolution, PlacementSolution,
    SolutionRecord, build_stage1, build_stage2, extract_dispatch, extract_placement,
};
use crate::grid::{FeederNetwork, GridError, parse_feeder};
use svg::{LineChart, Series};

#[derive(Debug, Error)]
pub enum StudyError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Build(#[from] BuildError),
    #[error(transparent)]
    Conic(#[from] ConicError),
    #[error(transparent)]
    Sweep(#[from] SweepError),
    #[error("{scenario}: {message}")]
    Solve { scenario: String, message: String },
    #[error(
        "{path}: placements were computed on a different network (hash {found}, expected {expected})"
    )]
    StalePlacement {
        path: PathBuf,
        found: String,
        expected: String,
    },
    #[error("verification: {0}")]
    Verification(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl StudyError {
    /// 2 for configuration and input problems, 3 for solve failures, 4 for a
    /// verification mismatch.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::Grid(_) | Self::StalePlacement { .. } | Self::Io { .. } => 2,
            Self::Build(e) => match e {
                BuildError::NotOptimal(_) | BuildError::Fractional { .. } => 3,
                _ => 2,
            },
            Self::Conic(_) | Self::Sweep(_) | Self::Solve { .. } => 3,
            Self::Verification(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, StudyError>;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StudyError + '_ {
    move |source| StudyError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> StudyError + '_ {
    move |e| StudyError::Io {
        path: path.to_path_buf(),
        source: io::Error::other(e),
    }
}

/// A conic solution with its sweep verification and tightness certificate.
#[derive(Debug, Clone)]
pub struct Checked<S> {
    pub solution: S,
    pub tightness: TightnessReport,
    pub verification: Verification,
    pub bnb: Option<BnbStats>,
}

impl<S> Checked<S> {
    pub fn power_flow(&self) -> &PowerFlowResult {
        self.verification
            .power_flow
            .as_ref()
            .expect("verify_solution keeps the power flow")
    }
}

/// Configured feeder plus everything needed to run scenarios on it.
#[derive(Debug, Clone)]
pub struct Study {
    config: StudyConfig,
    network: FeederNetwork,
    network_hash: String,
}

impl Study {
    pub fn new(config: StudyConfig) -> Result<Self> {
        let f = &config.feeder;
        let mut network = parse_feeder(
            config.resolve(&f.buses),
            config.resolve(&f.branches),
            config.resolve(&f.config),
        )?;
        match (config.limits.v_min_pu, config.limits.v_max_pu) {
            (Some(lo), Some(hi)) => network = network.with_voltage_limits(lo, hi)?,
            (None, None) => {}
            _ => {
                return Err(StudyError::Config(
                    "limits.v_min_pu and limits.v_max_pu must be given together".into(),
                ));
            }
        }
        let network_hash = network_hash(&network)?;
        let network = network.to_per_unit()?;
        Ok(Self {
            config,
            network,
            network_hash,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::new(StudyConfig::load(path)?)
    }

    /// Study config shipped with a bundled feeder (`"ieee15"`, `"ieee33"`).
    pub fn bundled(name: &str) -> Result<Self> {
        Self::load(crate::grid::data_dir().join(name).join("study.json"))
    }

    pub fn config(&self) -> &StudyConfig {
        &self.config
    }

    pub fn config_mut(&mut self) -> &mut StudyConfig {
        &mut self.config
    }

    /// The feeder in per-unit.
    pub fn network(&self) -> &FeederNetwork {
        &self.network
    }

    /// SHA-256 of the feeder tables and bases, used to reject stale
    /// placement files.
    pub fn network_hash(&self) -> &str {
        &self.network_hash
    }

    pub fn dg_config(&self, n_dg: usize) -> DgConfig {
        let dg = DgConfig::from_kva(&self.network, n_dg, self.config.dg.s_dg_max_kva);
        match &self.config.dg.candidate_buses {
            Some(c) => dg.with_candidates(c.clone()),
            None => dg,
        }
    }

    pub fn build_options(&self) -> BuildOptions {
        BuildOptions {
            allow_q: self.config.stage1.allow_q,
            enforce_voltage_limits: true,
            slack_v_pu: self.config.limits.slack_v_pu,
        }
    }

    pub fn sweep_options(&self) -> SweepOptions {
        SweepOptions {
            tol: self.config.sweep.tol,
            max_iter: self.config.sweep.max_iter,
            slack_v_pu: self.config.limits.slack_v_pu,
        }
    }

    /// Plain sweep of `network` without DG.
    pub fn sweep(&self, network: &FeederNetwork) -> Result<PowerFlowResult> {
        let pf = backward_forward_sweep(network, &[], &self.config.zip, &self.sweep_options())?;
        if !pf.converged {
            return Err(SweepError::NotConverged {
                iterations: pf.iterations,
                last_update: pf.last_update,
            }
            .into());
        }
        Ok(pf)
    }

    /// No-DG power flow: the SOCP with an empty fleet and no voltage window,
    /// checked by the sweep.
    pub fn base_case(&self) -> Result<Checked<PlacementSolution>> {
        self.base_case_on(&self.network)
    }

    pub fn base_case_on(&self, network: &FeederNetwork) -> Result<Checked<PlacementSolution>> {
        let opts = BuildOptions {
            enforce_voltage_limits: false,
            ..self.build_options()
        };
        let model = build_stage1(network, &self.config.zip, &self.dg_config(0), &opts)?;
        let solution = solve_continuous(&model.problem, &self.config.solver)?;
        require_optimal("base case", solution.status, solution.message.as_deref())?;
        let placement = extract_placement(&solution, &model)?;
        self.check(
            network,
            placement,
            tightness_report(&solution, &model),
            None,
        )
    }

    /// Stage 1 for `n_dg` units by branch-and-bound. `n_dg = 0` is the base
    /// case.
    pub fn stage1(&self, n_dg: usize) -> Result<Checked<PlacementSolution>> {
        if n_dg == 0 {
            return self.base_case();
        }
        let model = build_stage1(
            &self.network,
            &self.config.zip,
            &self.dg_config(n_dg),
            &self.build_options(),
        )?;
        let mixed = solve_mixed(&model.problem, &self.config.bnb_options())?;
        let mut solution = mixed.solution;
        let usable = solution.status == SolveStatus::Optimal
            || (mixed.stats.budget_exhausted && solution.objective_value.is_finite());
        if !usable {
            require_optimal(
                &format!("stage 1, n_dg = {n_dg}"),
                solution.status,
                solution.message.as_deref(),
            )?;
        }
        // A budget-limited incumbent is still a valid placement; its gap is
        // carried in the stats and the report row.
        solution.status = SolveStatus::Optimal;
        let placement = extract_placement(&solution, &model)?;
        let tightness = tightness_report(&solution, &model);
        self.check(&self.network, placement, tightness, Some(mixed.stats))
    }

    /// Stage 1 with the placement fixed to `buses`; only the active outputs
    /// are optimized.
    pub fn stage1_fixed(&self, buses: &[usize]) -> Result<Checked<PlacementSolution>> {
        let model = build_stage1(
            &self.network,
            &self.config.zip,
            &self.dg_config(buses.len()),
            &self.build_options(),
        )?;
        let problem = model.with_fixed_buses(buses)?;
        let solution = solve_continuous(&problem, &self.config.solver)?;
        require_optimal(
            &format!("stage 1 fixed at {buses:?}"),
            solution.status,
            solution.message.as_deref(),
        )?;
        let placement = extract_placement(&solution, &model)?;
        self.check(
            &self.network,
            placement,
            tightness_report(&solution, &model),
            None,
        )
    }

    /// Stage 2 reactive dispatch for a fixed placement.
    pub fn stage2(&self, placement: &PlacementSolution) -> Result<Checked<DispatchSolution>> {
        self.stage2_on(&self.network, placement)
    }

    pub fn stage2_on(
        &self,
        network: &FeederNetwork,
        placement: &PlacementSolution,
    ) -> Result<Checked<DispatchSolution>> {
        let dg = self.dg_config(placement.dgs.len());
        let model = build_stage2(
            network,
            &self.config.zip,
            placement,
            &dg,
            &self.build_options(),
        )?;
        let solution = solve_continuous(&model.problem, &self.config.solver)?;
        require_optimal(
            &format!("stage 2 at {:?}", placement.dg_buses()),
            solution.status,
            solution.message.as_deref(),
        )?;
        let dispatch = extract_dispatch(&solution, &model)?;
        self.check(network, dispatch, tightness_report(&solution, &model), None)
    }

    fn check<S: DgSchedule>(
        &self,
        network: &FeederNetwork,
        solution: S,
        tightness: TightnessReport,
        bnb: Option<BnbStats>,
    ) -> Result<Checked<S>> {
        let verification =
            verify_solution(network, &self.config.zip, &solution, &self.sweep_options())?;
        Ok(Checked {
            solution,
            tightness,
            verification,
            bnb,
        })
    }

    /// Report row for a checked solution. Stage-2 rows pass the Stage-1
    /// losses of the placement they started from.
    pub fn row<S: DgSchedule>(
        &self,
        scenario: impl Into<String>,
        checked: &Checked<S>,
        stage1_losses_kw: Option<f64>,
    ) -> ReportRow {
        let dgs = checked.solution.setpoints();
        let predicted = checked.solution.predicted_losses_kw();
        let (losses_stage1_kw, losses_stage2_kw) = match stage1_losses_kw {
            Some(s1) => (Some(s1), Some(predicted)),
            None => (Some(predicted), None),
        };
        ReportRow {
            scenario: scenario.into(),
            n_dg: dgs.len(),
            dg_buses: dgs.iter().map(|d| d.bus).collect(),
            p_supply_kw: dgs.iter().map(|d| d.p_kw).collect(),
            q_supply_kvar: dgs.iter().map(|d| d.q_kvar).collect(),
            losses_stage1_kw,
            losses_stage2_kw,
            sweep_losses_kw: checked.verification.sweep_losses_kw,
            rel_error: checked.verification.rel_error,
            min_voltage_pu: checked.verification.sweep_min_voltage,
            max_tightness_gap: checked.tightness.max_gap,
            buses_below_vmin: checked.power_flow().buses_below_limit(&self.network),
            bnb_nodes: checked.bnb.as_ref().map(|s| s.nodes),
            bnb_gap: checked.bnb.as_ref().map(|s| s.gap),
        }
    }

    /// Reads `placements.json`, rejecting files computed on another network.
    pub fn read_placements(&self, path: &Path) -> Result<PlacementFile> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let file: PlacementFile = serde_json::from_str(&text)
            .map_err(|e| StudyError::Config(format!("{}: {e}", path.display())))?;
        if file.network_hash != self.network_hash {
            return Err(StudyError::StalePlacement {
                path: path.to_path_buf(),
                found: file.network_hash,
                expected: self.network_hash.clone(),
            });
        }
        Ok(file)
    }

    fn empty_placements(&self) -> PlacementFile {
        PlacementFile {
            network_hash: self.network_hash.clone(),
            s_dg_max_kva: self.config.dg.s_dg_max_kva,
            placements: Vec::new(),
        }
    }
}

fn require_optimal(scenario: &str, status: SolveStatus, message: Option<&str>) -> Result<()> {
    if status == SolveStatus::Optimal {
        return Ok(());
    }
    Err(StudyError::Solve {
        scenario: scenario.to_string(),
        message: format!(
            "{status:?}{}",
            message.map(|m| format!(": {m}")).unwrap_or_default()
        ),
    })
}

/// SHA-256 over the physical bus table, branch table and bases.
pub fn network_hash(network: &FeederNetwork) -> Result<String> {
    let physical = if network.is_per_unit() {
        network.to_physical()?
    } else {
        network.clone()
    };
    let mut buses = Vec::new();
    physical.write_buses_csv(&mut buses)?;
    let mut branches = Vec::new();
    physical.write_branches_csv(&mut branches)?;
    let cfg = physical.feeder_config();
    let mut h = Sha256::new();
    h.update(&buses);
    h.update(&branches);
    h.update(format!("{}|{}|{}", cfg.base_kv, cfg.base_mva, cfg.slack_bus).as_bytes());
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

/// Where a command writes and whether it draws figures.
#[derive(Debug, Clone)]
pub struct OutputOptions {
    pub out_dir: PathBuf,
    pub svg: bool,
}

impl OutputOptions {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        Self {
            out_dir: out_dir.into(),
            svg: false,
        }
    }

    pub fn with_svg(mut self, svg: bool) -> Self {
        self.svg = svg;
        self
    }

    fn prepare(&self) -> Result<()> {
        fs::create_dir_all(&self.out_dir).map_err(io_err(&self.out_dir))
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    fn create(&self, name: &str) -> Result<(PathBuf, BufWriter<File>)> {
        let path = self.path(name);
        let file = File::create(&path).map_err(io_err(&path))?;
        Ok((path, BufWriter::new(file)))
    }

    fn write_report(&self, report: &StudyReport) -> Result<()> {
        let (path, w) = self.create("report.csv")?;
        report.write_csv(w).map_err(csv_err(&path))
    }

    fn write_voltages(
        &self,
        scenario: &str,
        network: &FeederNetwork,
        pf: &PowerFlowResult,
    ) -> Result<()> {
        let (path, w) = self.create(&format!("voltages_{scenario}.csv"))?;
        pf.write_voltage_csv(network, w).map_err(csv_err(&path))
    }

    fn write_svg(&self, name: &str, chart: &LineChart) -> Result<()> {
        if !self.svg {
            return Ok(());
        }
        let path = self.path(&format!("fig_{name}.svg"));
        fs::write(&path, chart.render()).map_err(io_err(&path))
    }

    fn write_placements(&self, file: &PlacementFile) -> Result<()> {
        let path = self.path("placements.json");
        let text = serde_json::to_string_pretty(file)
            .map_err(|e| StudyError::Config(format!("serializing placements: {e}")))?;
        fs::write(&path, text + "\n").map_err(io_err(&path))?;

        let (path, w) = self.create("placements.csv")?;
        let mut w = csv::Writer::from_writer(w);
        let write = |w: &mut csv::Writer<_>| -> csv::Result<()> {
            w.write_record([
                "n_dg",
                "dg_buses",
                "p_supply_kw",
                "losses_kw",
                "tightness_max",
            ])?;
            for p in &file.placements {
                w.write_record([
                    p.dg_buses.len().to_string(),
                    p.dg_buses
                        .iter()
                        .map(|b| b.to_string())
                        .collect::<Vec<_>>()
                        .join(" "),
                    p.p_supply_kw
                        .iter()
                        .map(|x| format!("{x:.3}"))
                        .collect::<Vec<_>>()
                        .join(" "),
                    format!("{:.6}", p.losses_kw),
                    format!("{:.3e}", p.tightness_max),
                ])?;
            }
            w.flush()?;
            Ok(())
        };
        write(&mut w).map_err(csv_err(&path))
    }
}

/// Scenario id of a row: sorts by fleet size, then stage.
pub fn scenario_id(n_dg: usize, kind: &str) -> String {
    format!("n{n_dg:02}_{kind}")
}

pub const BASE_SCENARIO: &str = "n00_base";

fn profile(network: &FeederNetwork, pf: &PowerFlowResult) -> Vec<(f64, f64)> {
    let mut pts: Vec<(f64, f64)> = network
        .buses()
        .iter()
        .zip(&pf.v)
        .map(|(b, v)| (b.id as f64, v.norm()))
        .collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    pts
}

fn v_min_line(network: &FeederNetwork) -> Option<f64> {
    network.buses().iter().map(|b| b.v_min).reduce(f64::max)
}

fn check_verification(report: &StudyReport, max_rel_error: f64) -> Result<()> {
    let bad: Vec<String> = report
        .rows
        .iter()
        .filter(|r| !(r.rel_error <= max_rel_error))
        .map(|r| format!("{} ({:.3e})", r.scenario, r.rel_error))
        .collect();
    if bad.is_empty() {
        Ok(())
    } else {
        Err(StudyError::Verification(format!(
            "SOCP and sweep losses differ by more than {max_rel_error:.3e} in {}",
            bad.join(", ")
        )))
    }
}

/// No-DG base case.
pub fn cmd_base(study: &Study, out: &OutputOptions) -> Result<StudyReport> {
    out.prepare()?;
    let base = study.base_case()?;
    let mut report = StudyReport::default();
    report.push(study.row(BASE_SCENARIO, &base, None));
    out.write_report(&report)?;
    out.write_voltages(BASE_SCENARIO, study.network(), base.power_flow())?;
    out.write_svg(
        "voltages_base",
        &LineChart {
            title: "Base case voltage profile".into(),
            x_label: "bus".into(),
            y_label: "|V| (p.u.)".into(),
            series: vec![Series::new(
                "no DG",
                profile(study.network(), base.power_flow()),
            )],
            hline: v_min_line(study.network()),
        },
    )?;
    check_verification(&report, study.config().verification.max_rel_error)?;
    Ok(report)
}

/// Stage-1 placement for every fleet size in `n_dg_list`. Results are merged
/// into `placements.json` in the output directory.
pub fn cmd_stage1(study: &Study, n_dg_list: &[usize], out: &OutputOptions) -> Result<StudyReport> {
    out.prepare()?;
    let mut report = StudyReport::default();
    let mut placements = match study.read_placements(&out.path("placements.json")) {
        Ok(file) => file,
        Err(_) => study.empty_placements(),
    };
    let mut ns = n_dg_list.to_vec();
    ns.sort_unstable();
    ns.dedup();
    let network = study.network();
    for &n in &ns {
        if n == 0 {
            let base = study.base_case()?;
            report.push(study.row(BASE_SCENARIO, &base, None));
            out.write_voltages(BASE_SCENARIO, network, base.power_flow())?;
            continue;
        }
        let s1 = study.stage1(n)?;
        let id = scenario_id(n, "stage1");
        report.push(study.row(&id, &s1, None));
        out.write_voltages(&id, network, s1.power_flow())?;
        placements.upsert(SolutionRecord::new(&s1.solution, s1.tightness.max_gap));

        if let Some(reference) = study.config().reference_placements.get(&n) {
            let mut reference = reference.clone();
            reference.sort_unstable();
            if reference != s1.solution.dg_buses() {
                let fixed = study.stage1_fixed(&reference)?;
                let id = scenario_id(n, "reference");
                report.push(study.row(&id, &fixed, None));
                out.write_voltages(&id, network, fixed.power_flow())?;
            }
        }
    }
    out.write_report(&report)?;
    out.write_placements(&placements)?;
    let stage1: Vec<&ReportRow> = report
        .rows
        .iter()
        .filter(|r| r.scenario == BASE_SCENARIO || r.scenario.ends_with("_stage1"))
        .collect();
    out.write_svg(
        "losses_stage1",
        &LineChart {
            title: "Stage 1 losses".into(),
            x_label: "number of DG units".into(),
            y_label: "losses (kW)".into(),
            series: vec![
                Series::new(
                    "SOCP",
                    stage1
                        .iter()
                        .map(|r| (r.n_dg as f64, r.predicted_losses_kw()))
                        .collect(),
                ),
                Series::new(
                    "sweep",
                    stage1
                        .iter()
                        .map(|r| (r.n_dg as f64, r.sweep_losses_kw))
                        .collect(),
                ),
            ],
            hline: None,
        },
    )?;
    check_verification(&report, study.config().verification.max_rel_error)?;
    Ok(report)
}

/// Placement for `n_dg` units: from the placement file when it has one,
/// otherwise solved now and added to the file.
fn placement_for(
    study: &Study,
    n_dg: usize,
    file: &mut PlacementFile,
) -> Result<(PlacementSolution, f64)> {
    if let Some(record) = file.get(n_dg) {
        let placement = PlacementSolution::from_record(record, study.network())?;
        return Ok((placement, record.losses_kw));
    }
    let s1 = study.stage1(n_dg)?;
    file.upsert(SolutionRecord::new(&s1.solution, s1.tightness.max_gap));
    let losses = s1.solution.predicted_losses_kw;
    Ok((s1.solution, losses))
}

fn load_or_new_placements(study: &Study, path: &Path) -> Result<PlacementFile> {
    if path.exists() {
        study.read_placements(path)
    } else {
        Ok(study.empty_placements())
    }
}

/// Stage-2 dispatch for the placements in `placements` (default:
/// `placements.json` in the output directory). `n_dg_list = None` takes every
/// saved placement, or `dg.n_dg` when nothing is saved.
pub fn cmd_stage2(
    study: &Study,
    n_dg_list: Option<&[usize]>,
    placements: Option<&Path>,
    out: &OutputOptions,
) -> Result<StudyReport> {
    out.prepare()?;
    let default_path = out.path("placements.json");
    let path = placements.unwrap_or(&default_path);
    let mut file = load_or_new_placements(study, path)?;
    let mut ns: Vec<usize> = match n_dg_list {
        Some(ns) => ns.to_vec(),
        None if file.placements.is_empty() => vec![study.config().dg.n_dg],
        None => file.placements.iter().map(|p| p.dg_buses.len()).collect(),
    };
    ns.retain(|&n| n > 0);
    ns.sort_unstable();
    ns.dedup();

    let network = study.network();
    let mut report = StudyReport::default();
    let base = study.base_case()?;
    report.push(study.row(BASE_SCENARIO, &base, None));
    out.write_voltages(BASE_SCENARIO, network, base.power_flow())?;
    let mut profiles = vec![Series::new("no DG", profile(network, base.power_flow()))];
    for &n in &ns {
        let (placement, stage1_losses) = placement_for(study, n, &mut file)?;
        let s2 = study.stage2(&placement)?;
        let id = scenario_id(n, "stage2");
        report.push(study.row(&id, &s2, Some(stage1_losses)));
        out.write_voltages(&id, network, s2.power_flow())?;
        profiles.push(Series::new(
            format!("{n} DG"),
            profile(network, s2.power_flow()),
        ));
    }
    out.write_report(&report)?;
    out.write_placements(&file)?;
    let rows: Vec<&ReportRow> = report.rows.iter().filter(|r| r.n_dg > 0).collect();
    out.write_svg(
        "losses_stage2",
        &LineChart {
            title: "Stage 1 and Stage 2 losses".into(),
            x_label: "number of DG units".into(),
            y_label: "losses (kW)".into(),
            series: vec![
                Series::new(
                    "stage 1",
                    rows.iter()
                        .map(|r| (r.n_dg as f64, r.losses_stage1_kw.unwrap_or(f64::NAN)))
                        .collect(),
                ),
                Series::new(
                    "stage 2",
                    rows.iter()
                        .map(|r| (r.n_dg as f64, r.predicted_losses_kw()))
                        .collect(),
                ),
            ],
            hline: None,
        },
    )?;
    out.write_svg(
        "voltages_stage2",
        &LineChart {
            title: "Voltage profiles after Stage 2".into(),
            x_label: "bus".into(),
            y_label: "|V| (p.u.)".into(),
            series: profiles,
            hline: v_min_line(network),
        },
    )?;
    check_verification(&report, study.config().verification.max_rel_error)?;
    Ok(report)
}

/// Outcome of [`cmd_load_study`].
#[derive(Debug, Clone)]
pub struct LoadStudyReport {
    pub factor: f64,
    pub placement: Vec<usize>,
    pub rows: Vec<LoadStudyRow>,
    /// Bus with the largest no-DG loss increase.
    pub worst_bus: Option<usize>,
    /// Base case, optimized system at base load, and both systems with the
    /// worst bus perturbed.
    pub report: StudyReport,
}

impl LoadStudyReport {
    pub fn worst(&self) -> Option<&LoadStudyRow> {
        self.worst_bus
            .and_then(|b| self.rows.iter().find(|r| r.bus == b))
    }
}

/// Raises each load bus in turn by `factor` and compares the loss increase
/// without DG against the optimized system (Stage-1 placement and active
/// output from base load, reactive output re-dispatched for the new load
/// unless `loadstudy.freeze_q` is set). Losses are the swept ones.
///
/// On a failed scenario the rows computed so far are still written.
pub fn cmd_load_study(study: &Study, factor: f64, out: &OutputOptions) -> Result<LoadStudyReport> {
    if !(factor.is_finite() && factor > 0.0) {
        return Err(StudyError::Config(format!(
            "load factor must be > 0, got {factor}"
        )));
    }
    out.prepare()?;
    let network = study.network();
    let cfg = study.config();
    let n = cfg.dg.n_dg;

    let placements_path = out.path("placements.json");
    let mut file = load_or_new_placements(study, &placements_path)?;
    let (placement, stage1_losses) = placement_for(study, n, &mut file)?;
    out.write_placements(&file)?;

    let base = study.base_case()?;
    let optimized = study.stage2(&placement)?;
    let mut report = StudyReport::default();
    report.push(study.row(BASE_SCENARIO, &base, None));
    let opt_id = scenario_id(n, "stage2");
    report.push(study.row(&opt_id, &optimized, Some(stage1_losses)));

    let buses: Vec<usize> = match &cfg.loadstudy.buses {
        Some(b) => b.clone(),
        None => network
            .buses()
            .iter()
            .filter(|b| b.has_load())
            .map(|b| b.id)
            .collect(),
    };

    let nodg_before = base.verification.sweep_losses_kw;
    let opt_before = optimized.verification.sweep_losses_kw;
    let opt_socp_before = optimized.solution.predicted_losses_kw;

    let mut rows = Vec::with_capacity(buses.len());
    let outcome = (|| -> Result<()> {
        for &bus in &buses {
            let scaled = network.with_scaled_load(bus, factor)?;
            let nodg = study.sweep(&scaled)?;
            let (opt_losses, opt_socp, opt_vmin, opt_gap) = if cfg.loadstudy.freeze_q {
                let v = verify_solution(
                    &scaled,
                    &cfg.zip,
                    &optimized.solution,
                    &study.sweep_options(),
                )?;
                (
                    v.sweep_losses_kw,
                    opt_socp_before,
                    v.sweep_min_voltage,
                    optimized.tightness.max_gap,
                )
            } else {
                let s2 = study.stage2_on(&scaled, &placement)?;
                (
                    s2.verification.sweep_losses_kw,
                    s2.solution.predicted_losses_kw,
                    s2.verification.sweep_min_voltage,
                    s2.tightness.max_gap,
                )
            };
            rows.push(LoadStudyRow {
                bus,
                losses_nodg_kw: nodg.total_losses_kw,
                delta_nodg_kw: nodg.total_losses_kw - nodg_before,
                losses_opt_kw: opt_losses,
                delta_opt_kw: opt_losses - opt_before,
                socp_delta_opt_kw: opt_socp - opt_socp_before,
                min_voltage_nodg_pu: nodg.min_voltage(),
                min_voltage_opt_pu: opt_vmin,
                max_tightness_gap_opt: opt_gap,
            });
        }
        Ok(())
    })();

    let (path, w) = out.create("loadstudy.csv")?;
    write_load_study_csv(&rows, w).map_err(csv_err(&path))?;
    outcome?;

    let worst_bus = rows
        .iter()
        .reduce(|a, b| {
            if b.delta_nodg_kw > a.delta_nodg_kw {
                b
            } else {
                a
            }
        })
        .map(|r| r.bus);
    if let Some(bus) = worst_bus {
        let scaled = network.with_scaled_load(bus, factor)?;
        let nodg = study.base_case_on(&scaled)?;
        let id = format!("ls_b{bus:02}_nodg");
        report.push(study.row(&id, &nodg, None));
        out.write_voltages(&id, &scaled, nodg.power_flow())?;
        let opt = study.stage2_on(&scaled, &placement)?;
        let id = format!("ls_b{bus:02}_opt");
        report.push(study.row(&id, &opt, Some(stage1_losses)));
        out.write_voltages(&id, &scaled, opt.power_flow())?;
        out.write_svg(
            "voltages_loadstudy",
            &LineChart {
                title: format!("Bus {bus} load x{factor}"),
                x_label: "bus".into(),
                y_label: "|V| (p.u.)".into(),
                series: vec![
                    Series::new("no DG", profile(&scaled, nodg.power_flow())),
                    Series::new(format!("{n} DG"), profile(&scaled, opt.power_flow())),
                ],
                hline: v_min_line(network),
            },
        )?;
    }
    out.write_report(&report)?;
    out.write_svg(
        "loadstudy",
        &LineChart {
            title: format!("Loss increase with one bus at x{factor}"),
            x_label: "bus".into(),
            y_label: "ΔL (kW)".into(),
            series: vec![
                Series::new(
                    "no DG",
                    rows.iter()
                        .map(|r| (r.bus as f64, r.delta_nodg_kw))
                        .collect(),
                ),
                Series::new(
                    format!("{n} DG"),
                    rows.iter()
                        .map(|r| (r.bus as f64, r.delta_opt_kw))
                        .collect(),
                ),
            ],
            hline: None,
        },
    )?;
    check_verification(&report, cfg.verification.max_rel_error)?;
    Ok(LoadStudyReport {
        factor,
        placement: placement.dg_buses(),
        rows,
        worst_bus,
        report,
    })
}
