//! Exact AC power flow for radial feeders by backward/forward sweep.
//!
//! This is the independent check on the conic models: loads follow the full
//! ZIP law at the present voltage magnitude (not the ZP linearization), DG
//! units are constant-power injections, and the fixed point is iterated from
//! a flat start until the largest voltage update is below tolerance.

use std::io::Write;
use std::time::Instant;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conic::ConicSolution;
use crate::distflow::{DgSchedule, DistflowModel};
use crate::grid::FeederNetwork;
use crate::load::{LoadModelError, ZipCoefficients};

#[derive(Debug, Error)]
pub enum SweepError {
    #[error("network must be converted to per-unit first")]
    NotPerUnit,
    #[error("injection at unknown bus {0}")]
    UnknownBus(usize),
    #[error("sweep did not converge in {iterations} iterations (last update {last_update:.3e})")]
    NotConverged { iterations: usize, last_update: f64 },
    #[error(transparent)]
    Load(#[from] LoadModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepOptions {
    /// Convergence threshold on the largest voltage update (p.u.).
    pub tol: f64,
    pub max_iter: usize,
    pub slack_v_pu: f64,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 200,
            slack_v_pu: 1.0,
        }
    }
}

/// Fixed complex injection at a bus (p.u., generator convention).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Injection {
    pub bus: usize,
    pub power: Complex64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PowerFlowResult {
    /// Complex voltage per bus position.
    pub v: Vec<Complex64>,
    /// Current per branch position, parent → child.
    pub branch_current: Vec<Complex64>,
    /// Sending-end complex power per branch position.
    pub branch_flow: Vec<Complex64>,
    /// Demand actually drawn per bus position at the final voltages.
    pub load: Vec<Complex64>,
    pub total_losses_pu: f64,
    pub total_losses_kw: f64,
    pub iterations: usize,
    pub converged: bool,
    pub last_update: f64,
}

impl PowerFlowResult {
    /// |V| at position `index` of `network.buses()`.
    pub fn v_mag(&self, index: usize) -> f64 {
        self.v[index].norm()
    }

    /// |V| at bus `id`.
    pub fn v_mag_of(&self, network: &FeederNetwork, id: usize) -> Option<f64> {
        network.index_of(id).map(|k| self.v_mag(k))
    }

    pub fn min_voltage(&self) -> f64 {
        self.v
            .iter()
            .map(|v| v.norm())
            .fold(f64::INFINITY, f64::min)
    }

    /// Power drawn from the slack bus through its outgoing branches.
    pub fn slack_injection(&self, network: &FeederNetwork) -> Complex64 {
        let slack = network.slack_index();
        let topo = network.topology();
        topo.children(slack)
            .iter()
            .map(|&c| self.branch_flow[topo.parent_branch(c).unwrap()])
            .sum::<Complex64>()
            + self.load[slack]
    }

    /// Buses (ids) whose voltage magnitude is below their `v_min`.
    pub fn buses_below_limit(&self, network: &FeederNetwork) -> Vec<usize> {
        network
            .buses()
            .iter()
            .enumerate()
            .filter(|(k, b)| self.v[*k].norm() < b.v_min)
            .map(|(_, b)| b.id)
            .collect()
    }
}

/// Runs the sweep. The result is returned even when the iteration limit is
/// hit; check `converged`.
pub fn backward_forward_sweep(
    network: &FeederNetwork,
    injections: &[Injection],
    zip: &ZipCoefficients,
    opts: &SweepOptions,
) -> Result<PowerFlowResult, SweepError> {
    if !network.is_per_unit() {
        return Err(SweepError::NotPerUnit);
    }
    zip.validate()?;
    let buses = network.buses();
    let n = buses.len();
    let topo = network.topology();
    let slack = network.slack_index();

    let mut generation = vec![Complex64::new(0.0, 0.0); n];
    for inj in injections {
        let k = network
            .index_of(inj.bus)
            .ok_or(SweepError::UnknownBus(inj.bus))?;
        generation[k] += inj.power;
    }
    let models: Vec<ZipCoefficients> = buses.iter().map(|b| b.zip.unwrap_or(*zip)).collect();
    for m in &models {
        m.validate()?;
    }
    let z: Vec<Complex64> = network
        .branches()
        .iter()
        .map(|b| Complex64::new(b.r, b.x))
        .collect();

    let v0 = Complex64::new(opts.slack_v_pu, 0.0);
    let mut v = vec![v0; n];
    let mut load = vec![Complex64::new(0.0, 0.0); n];
    let mut current = vec![Complex64::new(0.0, 0.0); network.branches().len()];
    let mut node_current = vec![Complex64::new(0.0, 0.0); n];
    let mut iterations = 0;
    let mut last_update = f64::INFINITY;
    let mut converged = false;

    while iterations < opts.max_iter {
        iterations += 1;
        for k in 0..n {
            let vm = v[k].norm();
            let b = &buses[k];
            load[k] = Complex64::new(
                models[k].active_power(b.p_load, vm),
                models[k].reactive_power(b.q_load, vm),
            );
            node_current[k] = ((load[k] - generation[k]) / v[k]).conj();
        }
        // backward: leaves first
        for &j in topo.order().iter().rev() {
            let Some(k) = topo.parent_branch(j) else {
                continue;
            };
            let mut i = node_current[j];
            for &c in topo.children(j) {
                i += current[topo.parent_branch(c).unwrap()];
            }
            current[k] = i;
        }
        // forward: root first
        last_update = 0.0;
        for &j in topo.order() {
            let (Some(p), Some(k)) = (topo.parent(j), topo.parent_branch(j)) else {
                continue;
            };
            let updated = v[p] - z[k] * current[k];
            last_update = last_update.max((updated - v[j]).norm());
            v[j] = updated;
        }
        if last_update < opts.tol {
            converged = true;
            break;
        }
    }
    debug_assert!(v[slack] == v0);

    // Refresh demand and currents at the final voltages so that balances hold.
    for k in 0..n {
        let vm = v[k].norm();
        let b = &buses[k];
        load[k] = Complex64::new(
            models[k].active_power(b.p_load, vm),
            models[k].reactive_power(b.q_load, vm),
        );
    }
    let mut flow = vec![Complex64::new(0.0, 0.0); network.branches().len()];
    let mut losses = 0.0;
    for (k, br) in network.branches().iter().enumerate() {
        losses += current[k].norm_sqr() * br.r;
    }
    for &j in topo.order() {
        let (Some(p), Some(k)) = (topo.parent(j), topo.parent_branch(j)) else {
            continue;
        };
        flow[k] = v[p] * current[k].conj();
    }

    Ok(PowerFlowResult {
        v,
        branch_current: current,
        branch_flow: flow,
        load,
        total_losses_pu: losses,
        total_losses_kw: losses * network.base().kw_per_pu(),
        iterations,
        converged,
        last_update,
    })
}

/// Sweep with DG outputs taken from a schedule.
pub fn sweep_schedule(
    network: &FeederNetwork,
    zip: &ZipCoefficients,
    schedule: &impl DgSchedule,
    opts: &SweepOptions,
) -> Result<PowerFlowResult, SweepError> {
    let injections: Vec<Injection> = schedule
        .setpoints()
        .iter()
        .map(|d| Injection {
            bus: d.bus,
            power: Complex64::new(d.p_pu, d.q_pu),
        })
        .collect();
    backward_forward_sweep(network, &injections, zip, opts)
}

/// Conic prediction versus sweep outcome for the same DG setpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verification {
    pub socp_losses_kw: f64,
    pub sweep_losses_kw: f64,
    /// `|socp − sweep| / max(sweep, 1e-9)`.
    pub rel_error: f64,
    /// `(bus id, |V|sweep − √v²socp)` per bus.
    pub voltage_deltas: Vec<(usize, f64)>,
    pub max_voltage_delta: f64,
    pub sweep_min_voltage: f64,
    pub iterations: usize,
    #[serde(skip)]
    pub power_flow: Option<PowerFlowResult>,
}

/// Re-runs the solution through the exact sweep with full ZIP loads.
pub fn verify_solution(
    network: &FeederNetwork,
    zip_full: &ZipCoefficients,
    solution: &impl DgSchedule,
    opts: &SweepOptions,
) -> Result<Verification, SweepError> {
    let pf = sweep_schedule(network, zip_full, solution, opts)?;
    if !pf.converged {
        return Err(SweepError::NotConverged {
            iterations: pf.iterations,
            last_update: pf.last_update,
        });
    }
    let socp = solution.predicted_losses_kw();
    let sweep = pf.total_losses_kw;
    let mut voltage_deltas = Vec::new();
    for &(id, v_sq) in &solution.detail().v_sq {
        let k = network.index_of(id).ok_or(SweepError::UnknownBus(id))?;
        voltage_deltas.push((id, pf.v[k].norm() - v_sq.max(0.0).sqrt()));
    }
    let max_voltage_delta = voltage_deltas.iter().map(|d| d.1.abs()).fold(0.0, f64::max);
    Ok(Verification {
        socp_losses_kw: socp,
        sweep_losses_kw: sweep,
        rel_error: (socp - sweep).abs() / sweep.max(1e-9),
        voltage_deltas,
        max_voltage_delta,
        sweep_min_voltage: pf.min_voltage(),
        iterations: pf.iterations,
        power_flow: Some(pf),
    })
}

pub const TIGHTNESS_FLAG: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BranchGap {
    pub from: usize,
    pub to: usize,
    pub gap: f64,
}

/// How far each branch cone is from equality at a conic optimum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TightnessReport {
    /// `l − (P² + Q²)/v_from` per branch.
    pub gaps: Vec<BranchGap>,
    pub max_gap: f64,
    /// Branch `(from, to)` attaining `max_gap`.
    pub argmax: Option<(usize, usize)>,
    /// Branches whose gap exceeds [`TIGHTNESS_FLAG`].
    pub not_tight: Vec<(usize, usize)>,
}

impl TightnessReport {
    pub fn is_tight(&self) -> bool {
        self.not_tight.is_empty()
    }
}

pub fn tightness_report(solution: &ConicSolution, model: &DistflowModel) -> TightnessReport {
    let buses = model.network().buses();
    let mut gaps = Vec::with_capacity(model.branches.len());
    for b in &model.branches {
        let l = solution.value(b.l);
        let p = solution.value(b.p);
        let q = solution.value(b.q);
        let v = solution.value(model.v_sq[b.from]);
        gaps.push(BranchGap {
            from: buses[b.from].id,
            to: buses[b.to].id,
            gap: l - (p * p + q * q) / v,
        });
    }
    let mut max_gap = f64::NEG_INFINITY;
    let mut argmax = None;
    for g in &gaps {
        if g.gap > max_gap {
            max_gap = g.gap;
            argmax = Some((g.from, g.to));
        }
    }
    let not_tight = gaps
        .iter()
        .filter(|g| g.gap > TIGHTNESS_FLAG)
        .map(|g| (g.from, g.to))
        .collect();
    TightnessReport {
        gaps,
        max_gap: if argmax.is_some() { max_gap } else { 0.0 },
        argmax,
        not_tight,
    }
}

/// Summary record written next to the per-bus and per-branch tables.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerFlowSummary {
    pub losses_kw: f64,
    pub iterations: usize,
    pub converged: bool,
    pub max_tightness_gap: Option<f64>,
}

impl PowerFlowResult {
    pub fn summary(&self, max_tightness_gap: Option<f64>) -> PowerFlowSummary {
        PowerFlowSummary {
            losses_kw: self.total_losses_kw,
            iterations: self.iterations,
            converged: self.converged,
            max_tightness_gap,
        }
    }

    /// `bus,v_mag_pu,v_ang_deg`, one row per bus in network order.
    pub fn write_voltage_csv<W: Write>(&self, network: &FeederNetwork, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["bus", "v_mag_pu", "v_ang_deg"])?;
        for (bus, v) in network.buses().iter().zip(&self.v) {
            w.write_record([
                bus.id.to_string(),
                format!("{:.8}", v.norm()),
                format!("{:.6}", v.arg().to_degrees()),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// `from,to,i_pu,p_kw_loss`, one row per branch oriented away from the slack.
    pub fn write_branch_csv<W: Write>(&self, network: &FeederNetwork, out: W) -> csv::Result<()> {
        let topo = network.topology();
        let buses = network.buses();
        let kw = network.base().kw_per_pu();
        let mut child = vec![0; network.branches().len()];
        for &j in topo.order() {
            if let Some(k) = topo.parent_branch(j) {
                child[k] = j;
            }
        }
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["from", "to", "i_pu", "p_kw_loss"])?;
        for (k, br) in network.branches().iter().enumerate() {
            let j = child[k];
            let i = topo.parent(j).expect("branch child has a parent");
            let current = self.branch_current[k].norm();
            w.write_record([
                buses[i].id.to_string(),
                buses[j].id.to_string(),
                format!("{current:.8}"),
                format!("{:.6}", current * current * br.r * kw),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Wall-clock helper used by the study commands and the acceptance suite.
pub fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed().as_secs_f64())
}
