use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::distflow::SolutionRecord;

/// One scenario of a study: a fleet size and placement with its predicted
/// and verified losses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub scenario: String,
    pub n_dg: usize,
    pub dg_buses: Vec<usize>,
    pub p_supply_kw: Vec<f64>,
    pub q_supply_kvar: Vec<f64>,
    pub losses_stage1_kw: Option<f64>,
    pub losses_stage2_kw: Option<f64>,
    pub sweep_losses_kw: f64,
    /// Conic prediction against the sweep, for whichever stage the row holds.
    pub rel_error: f64,
    pub min_voltage_pu: f64,
    pub max_tightness_gap: f64,
    pub buses_below_vmin: Vec<usize>,
    pub bnb_nodes: Option<usize>,
    pub bnb_gap: Option<f64>,
}

impl ReportRow {
    /// Conic losses of the stage this row reports.
    pub fn predicted_losses_kw(&self) -> f64 {
        self.losses_stage2_kw
            .or(self.losses_stage1_kw)
            .unwrap_or(f64::NAN)
    }
}

pub const REPORT_HEADER: [&str; 14] = [
    "scenario",
    "n_dg",
    "dg_buses",
    "p_supply_kw",
    "q_supply_kvar",
    "losses_stage1_kw",
    "losses_stage2_kw",
    "sweep_losses_kw",
    "rel_error",
    "min_voltage_pu",
    "max_tightness_gap",
    "buses_below_vmin",
    "bnb_nodes",
    "bnb_gap",
];

fn join<T>(xs: &[T], f: impl Fn(&T) -> String) -> String {
    xs.iter().map(f).collect::<Vec<_>>().join(" ")
}

fn opt<T>(x: Option<T>, f: impl Fn(T) -> String) -> String {
    x.map(f).unwrap_or_default()
}

/// Rows of one command, kept sorted by scenario id.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub rows: Vec<ReportRow>,
}

impl StudyReport {
    pub fn push(&mut self, row: ReportRow) {
        let at = self
            .rows
            .partition_point(|r| r.scenario.as_str() <= row.scenario.as_str());
        self.rows.insert(at, row);
    }

    pub fn row(&self, scenario: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.scenario == scenario)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(REPORT_HEADER)?;
        for r in &self.rows {
            w.write_record([
                r.scenario.clone(),
                r.n_dg.to_string(),
                join(&r.dg_buses, |b| b.to_string()),
                join(&r.p_supply_kw, |p| format!("{p:.3}")),
                join(&r.q_supply_kvar, |q| format!("{q:.3}")),
                opt(r.losses_stage1_kw, |x| format!("{x:.6}")),
                opt(r.losses_stage2_kw, |x| format!("{x:.6}")),
                format!("{:.6}", r.sweep_losses_kw),
                format!("{:.3e}", r.rel_error),
                format!("{:.6}", r.min_voltage_pu),
                format!("{:.3e}", r.max_tightness_gap),
                join(&r.buses_below_vmin, |b| b.to_string()),
                opt(r.bnb_nodes, |n| n.to_string()),
                opt(r.bnb_gap, |g| format!("{g:.3e}")),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Contents of `placements.json`: Stage-1 results tied to the network they
/// were computed on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacementFile {
    pub network_hash: String,
    pub s_dg_max_kva: f64,
    pub placements: Vec<SolutionRecord>,
}

impl PlacementFile {
    pub fn get(&self, n_dg: usize) -> Option<&SolutionRecord> {
        self.placements.iter().find(|p| p.dg_buses.len() == n_dg)
    }

    /// Inserts or replaces the record for its fleet size, keeping the list
    /// ordered by fleet size.
    pub fn upsert(&mut self, record: SolutionRecord) {
        let n = record.dg_buses.len();
        match self
            .placements
            .binary_search_by_key(&n, |p| p.dg_buses.len())
        {
            Ok(k) => self.placements[k] = record,
            Err(k) => self.placements.insert(k, record),
        }
    }
}

/// Per-bus outcome of the load-increase study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadStudyRow {
    pub bus: usize,
    pub losses_nodg_kw: f64,
    pub delta_nodg_kw: f64,
    pub losses_opt_kw: f64,
    pub delta_opt_kw: f64,
    /// ΔL predicted by the Stage-2 SOCP (equal to the sweep ΔL up to the
    /// ZP approximation).
    pub socp_delta_opt_kw: f64,
    pub min_voltage_nodg_pu: f64,
    pub min_voltage_opt_pu: f64,
    /// Largest cone gap of the re-dispatch (of the base-load dispatch when
    /// reactive output is frozen).
    pub max_tightness_gap_opt: f64,
}

pub const LOAD_STUDY_HEADER: [&str; 9] = [
    "bus",
    "losses_nodg_kw",
    "delta_nodg_kw",
    "losses_opt_kw",
    "delta_opt_kw",
    "socp_delta_opt_kw",
    "min_voltage_nodg_pu",
    "min_voltage_opt_pu",
    "max_tightness_gap_opt",
];

pub fn write_load_study_csv<W: Write>(rows: &[LoadStudyRow], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(LOAD_STUDY_HEADER)?;
    for r in rows {
        w.write_record([
            r.bus.to_string(),
            format!("{:.6}", r.losses_nodg_kw),
            format!("{:.6}", r.delta_nodg_kw),
            format!("{:.6}", r.losses_opt_kw),
            format!("{:.6}", r.delta_opt_kw),
            format!("{:.6}", r.socp_delta_opt_kw),
            format!("{:.6}", r.min_voltage_nodg_pu),
            format!("{:.6}", r.min_voltage_opt_pu),
            format!("{:.3e}", r.max_tightness_gap_opt),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(scenario: &str) -> ReportRow {
        ReportRow {
            scenario: scenario.into(),
            n_dg: 2,
            dg_buses: vec![3, 6],
            p_supply_kw: vec![720.0, 420.25],
            q_supply_kvar: vec![0.0, 0.0],
            losses_stage1_kw: Some(31.5),
            losses_stage2_kw: None,
            sweep_losses_kw: 31.49,
            rel_error: 3e-4,
            min_voltage_pu: 0.98,
            max_tightness_gap: 1e-9,
            buses_below_vmin: vec![],
            bnb_nodes: Some(53),
            bnb_gap: Some(0.0),
        }
    }

    #[test]
    fn rows_stay_sorted_by_scenario() {
        let mut report = StudyReport::default();
        for id in ["n02_stage1", "n00_base", "n01_stage1", "n01_stage2"] {
            report.push(row(id));
        }
        let ids: Vec<&str> = report.rows.iter().map(|r| r.scenario.as_str()).collect();
        assert_eq!(ids, ["n00_base", "n01_stage1", "n01_stage2", "n02_stage1"]);
    }

    #[test]
    fn csv_lists_are_space_separated_and_options_blank() {
        let mut report = StudyReport::default();
        report.push(row("n02_stage1"));
        let mut buf = Vec::new();
        report.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let line = text.lines().nth(1).unwrap();
        assert_eq!(
            line,
            "n02_stage1,2,3 6,720.000 420.250,0.000 0.000,31.500000,,31.490000,3.000e-4,0.980000,1.000e-9,,53,0.000e0"
        );
    }

    #[test]
    fn placement_upsert_replaces_same_size() {
        let rec = |buses: Vec<usize>, loss: f64| SolutionRecord {
            p_supply_kw: vec![1.0; buses.len()],
            q_supply_kvar: vec![0.0; buses.len()],
            dg_buses: buses,
            losses_kw: loss,
            tightness_max: 0.0,
        };
        let mut file = PlacementFile {
            network_hash: "x".into(),
            s_dg_max_kva: 1.0,
            placements: vec![],
        };
        file.upsert(rec(vec![4, 6], 2.0));
        file.upsert(rec(vec![3], 3.0));
        file.upsert(rec(vec![3, 6], 1.0));
        assert_eq!(file.placements.len(), 2);
        assert_eq!(file.get(2).unwrap().dg_buses, vec![3, 6]);
        assert_eq!(file.placements[0].dg_buses, vec![3]);
    }
}
