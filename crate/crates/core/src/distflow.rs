//! Branch-flow (DistFlow) models for DG placement and reactive dispatch.
//!
//! Every non-slack bus `j` is fed by exactly one branch `k = (i, j)` in the
//! slack-rooted tree. Per branch the model carries the squared current
//! `l_k`, and the sending-end flows `P_k`, `Q_k`; per bus the squared voltage
//! `v_j`. The constraints are
//!
//! ```text
//! P_k = P0_j (αp v_j + βp) − p_j + r_k l_k + Σ_{c ∈ children(j)} P_c
//! Q_k = Q0_j (αq v_j + βq) − q_j + x_k l_k + Σ_{c ∈ children(j)} Q_c
//! v_j = v_i + (r_k² + x_k²) l_k − 2 (r_k P_k + x_k Q_k)
//! ‖(2 P_k, 2 Q_k, l_k − v_i)‖ ≤ l_k + v_i
//! ```
//!
//! with `Σ r_k l_k` minimized. Stage 1 adds a binary `a_j` per candidate bus,
//! the capacity cone `‖(p_j, q_j)‖ ≤ a_j S` and `Σ a_j = N`; `q_j` is held at
//! zero unless `allow_q` is set. Stage 2 fixes placement and active output and
//! optimizes `q_j` within the remaining capacity.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conic::{ConicProblem, ConicSolution, LinExpr, SolveStatus, VarId};
use crate::grid::FeederNetwork;
use crate::load::{LoadModelError, ZipCoefficients, linearize_to_zp};

#[derive(Debug, Error)]
pub enum BuildError {
    #[error("network must be converted to per-unit first")]
    NotPerUnit,
    #[error("{n_dg} DG units requested but only {candidates} candidate buses")]
    TooManyDgs { n_dg: usize, candidates: usize },
    #[error("bus {0} is not a placement candidate")]
    NotCandidate(usize),
    #[error("DG capacity must be positive, got {0}")]
    BadCapacity(f64),
    #[error("active setpoint {p} p.u. at bus {bus} exceeds capacity {s_max} p.u.")]
    SetpointAboveCapacity { bus: usize, p: f64, s_max: f64 },
    #[error("placement has {got} units, DG config expects {expected}")]
    PlacementSize { got: usize, expected: usize },
    #[error("solution status is {0:?}, expected optimal")]
    NotOptimal(SolveStatus),
    #[error("placement binary at bus {bus} is fractional ({value})")]
    Fractional { bus: usize, value: f64 },
    #[error(transparent)]
    Load(#[from] LoadModelError),
}

/// DG fleet description. `s_dg_max` is in p.u. of the network base.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgConfig {
    pub n_dg: usize,
    pub s_dg_max: f64,
    /// Allowed placement buses (ids), ascending.
    pub candidate_buses: Vec<usize>,
}

impl DgConfig {
    /// Candidates default to every non-slack bus.
    pub fn new(network: &FeederNetwork, n_dg: usize, s_dg_max: f64) -> Self {
        Self {
            n_dg,
            s_dg_max,
            candidate_buses: network.non_slack_ids(),
        }
    }

    /// Capacity given in kVA, converted with the network's base.
    pub fn from_kva(network: &FeederNetwork, n_dg: usize, s_dg_max_kva: f64) -> Self {
        Self::new(network, n_dg, s_dg_max_kva / network.base().kw_per_pu())
    }

    pub fn with_candidates(mut self, mut buses: Vec<usize>) -> Self {
        buses.sort_unstable();
        buses.dedup();
        self.candidate_buses = buses;
        self
    }

    pub fn with_n_dg(&self, n_dg: usize) -> Self {
        Self {
            n_dg,
            ..self.clone()
        }
    }

    fn check(&self, network: &FeederNetwork) -> Result<(), BuildError> {
        if !(self.s_dg_max.is_finite() && self.s_dg_max > 0.0) {
            return Err(BuildError::BadCapacity(self.s_dg_max));
        }
        for &bus in &self.candidate_buses {
            if bus == network.slack_bus() || network.index_of(bus).is_none() {
                return Err(BuildError::NotCandidate(bus));
            }
        }
        if self.n_dg > self.candidate_buses.len() {
            return Err(BuildError::TooManyDgs {
                n_dg: self.n_dg,
                candidates: self.candidate_buses.len(),
            });
        }
        Ok(())
    }
}

/// Model switches that are not part of the DG description.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BuildOptions {
    /// Let Stage 1 co-optimize reactive output.
    pub allow_q: bool,
    /// Apply the per-bus `[v_min², v_max²]` window. Off for plain power-flow
    /// solves such as the no-DG base case.
    pub enforce_voltage_limits: bool,
    pub slack_v_pu: f64,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self {
            allow_q: false,
            enforce_voltage_limits: true,
            slack_v_pu: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BranchVars {
    /// Upstream and downstream bus positions.
    pub from: usize,
    pub to: usize,
    pub l: VarId,
    pub p: VarId,
    pub q: VarId,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DgVars {
    /// Position in `network.buses()`, not the bus id.
    pub bus_index: usize,
    pub a: Option<VarId>,
    pub p: VarId,
    pub q: Option<VarId>,
}

/// A built conic problem together with the variable layout needed to read
/// engineering quantities back out of a solution.
#[derive(Debug, Clone)]
pub struct DistflowModel {
    pub problem: ConicProblem,
    network: FeederNetwork,
    /// Squared voltage per bus position.
    pub v_sq: Vec<VarId>,
    /// Per branch position, oriented parent → child.
    pub branches: Vec<BranchVars>,
    pub dgs: Vec<DgVars>,
    /// Equality rows for the active and reactive balance of each branch.
    pub balance_rows: Vec<(usize, usize)>,
}

impl DistflowModel {
    pub fn network(&self) -> &FeederNetwork {
        &self.network
    }

    pub fn placement_binaries(&self) -> Vec<VarId> {
        self.dgs.iter().filter_map(|d| d.a).collect()
    }

    /// Bus id of each entry of `dgs`.
    pub fn dg_bus_ids(&self) -> Vec<usize> {
        let buses = self.network.buses();
        self.dgs.iter().map(|d| buses[d.bus_index].id).collect()
    }

    /// Copy with the placement fixed: `a = 1` exactly at the listed candidate
    /// positions (indices into `dgs`).
    pub fn with_fixed_placement(&self, chosen: &[usize]) -> ConicProblem {
        let mut p = self.problem.clone();
        for (k, d) in self.dgs.iter().enumerate() {
            if let Some(a) = d.a {
                p.fix(a, if chosen.contains(&k) { 1.0 } else { 0.0 });
            }
        }
        p
    }

    /// Copy of the problem restricted to the given DG buses (ids).
    pub fn with_fixed_buses(&self, buses: &[usize]) -> Result<ConicProblem, BuildError> {
        let mut chosen = Vec::with_capacity(buses.len());
        for &bus in buses {
            let k = self
                .dgs
                .iter()
                .position(|d| self.network.buses()[d.bus_index].id == bus)
                .ok_or(BuildError::NotCandidate(bus))?;
            chosen.push(k);
        }
        Ok(self.with_fixed_placement(&chosen))
    }

    fn detail(&self, solution: &ConicSolution) -> SolutionDetail {
        let net = &self.network;
        let kw = net.base().kw_per_pu();
        SolutionDetail {
            v_sq: net
                .buses()
                .iter()
                .zip(&self.v_sq)
                .map(|(b, &v)| (b.id, solution.value(v)))
                .collect(),
            branches: self
                .branches
                .iter()
                .map(|b| BranchSolution {
                    from: net.buses()[b.from].id,
                    to: net.buses()[b.to].id,
                    l_pu: solution.value(b.l),
                    p_pu: solution.value(b.p),
                    q_pu: solution.value(b.q),
                })
                .collect(),
            objective_pu: solution.objective_value,
            losses_kw: (solution.objective_value * kw).max(0.0),
        }
    }

    fn setpoint(&self, d: &DgVars, solution: &ConicSolution) -> DgSetpoint {
        let kw = self.network.base().kw_per_pu();
        let p_pu = solution.value(d.p);
        let q_pu = d.q.map_or(0.0, |q| solution.value(q));
        DgSetpoint {
            bus: self.network.buses()[d.bus_index].id,
            p_pu,
            q_pu,
            p_kw: p_pu * kw,
            q_kvar: q_pu * kw,
        }
    }
}

/// Active/reactive output of one DG unit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DgSetpoint {
    pub bus: usize,
    pub p_pu: f64,
    pub q_pu: f64,
    pub p_kw: f64,
    pub q_kvar: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BranchSolution {
    pub from: usize,
    pub to: usize,
    pub l_pu: f64,
    pub p_pu: f64,
    pub q_pu: f64,
}

/// Full variable readout of a solved model.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SolutionDetail {
    /// `(bus id, v²)` in network bus order.
    pub v_sq: Vec<(usize, f64)>,
    pub branches: Vec<BranchSolution>,
    pub objective_pu: f64,
    pub losses_kw: f64,
}

impl SolutionDetail {
    pub fn min_voltage(&self) -> f64 {
        self.v_sq
            .iter()
            .map(|&(_, v)| v.max(0.0).sqrt())
            .fold(f64::INFINITY, f64::min)
    }
}

/// Stage-1 result: where the units sit and how much active power they give.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacementSolution {
    /// Sorted by bus id.
    pub dgs: Vec<DgSetpoint>,
    pub predicted_losses_kw: f64,
    pub detail: SolutionDetail,
}

impl PlacementSolution {
    pub fn dg_buses(&self) -> Vec<usize> {
        self.dgs.iter().map(|d| d.bus).collect()
    }
}

/// Stage-2 result: reactive setpoints on top of a fixed placement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispatchSolution {
    pub dgs: Vec<DgSetpoint>,
    pub predicted_losses_kw: f64,
    pub detail: SolutionDetail,
}

/// Flat JSON form of a placement or dispatch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolutionRecord {
    pub dg_buses: Vec<usize>,
    pub p_supply_kw: Vec<f64>,
    pub q_supply_kvar: Vec<f64>,
    pub losses_kw: f64,
    pub tightness_max: f64,
}

impl SolutionRecord {
    pub fn new(schedule: &impl DgSchedule, tightness_max: f64) -> Self {
        let dgs = schedule.setpoints();
        Self {
            dg_buses: dgs.iter().map(|d| d.bus).collect(),
            p_supply_kw: dgs.iter().map(|d| d.p_kw).collect(),
            q_supply_kvar: dgs.iter().map(|d| d.q_kvar).collect(),
            losses_kw: schedule.predicted_losses_kw(),
            tightness_max,
        }
    }
}

impl PlacementSolution {
    /// Rebuilds the setpoints of a saved record against `network`'s base.
    /// The variable readout is not stored, so `detail` is left empty.
    pub fn from_record(
        record: &SolutionRecord,
        network: &FeederNetwork,
    ) -> Result<Self, BuildError> {
        let kw = network.base().kw_per_pu();
        let n = record.dg_buses.len();
        if record.p_supply_kw.len() != n || record.q_supply_kvar.len() != n {
            return Err(BuildError::PlacementSize {
                got: record.p_supply_kw.len().min(record.q_supply_kvar.len()),
                expected: n,
            });
        }
        let mut dgs = Vec::with_capacity(n);
        for k in 0..n {
            let bus = record.dg_buses[k];
            if bus == network.slack_bus() || network.index_of(bus).is_none() {
                return Err(BuildError::NotCandidate(bus));
            }
            dgs.push(DgSetpoint {
                bus,
                p_pu: record.p_supply_kw[k] / kw,
                q_pu: record.q_supply_kvar[k] / kw,
                p_kw: record.p_supply_kw[k],
                q_kvar: record.q_supply_kvar[k],
            });
        }
        dgs.sort_by_key(|d| d.bus);
        Ok(Self {
            dgs,
            predicted_losses_kw: record.losses_kw,
            detail: SolutionDetail::default(),
        })
    }
}

/// Anything that fixes DG outputs and predicts the resulting losses.
pub trait DgSchedule {
    fn setpoints(&self) -> &[DgSetpoint];
    fn predicted_losses_kw(&self) -> f64;
    fn detail(&self) -> &SolutionDetail;
}

impl DgSchedule for PlacementSolution {
    fn setpoints(&self) -> &[DgSetpoint] {
        &self.dgs
    }
    fn predicted_losses_kw(&self) -> f64 {
        self.predicted_losses_kw
    }
    fn detail(&self) -> &SolutionDetail {
        &self.detail
    }
}

impl DgSchedule for DispatchSolution {
    fn setpoints(&self) -> &[DgSetpoint] {
        &self.dgs
    }
    fn predicted_losses_kw(&self) -> f64 {
        self.predicted_losses_kw
    }
    fn detail(&self) -> &SolutionDetail {
        &self.detail
    }
}

/// Shared network part of both stages: flows, voltages, balances, cones.
/// `dg_terms[j]` holds the DG variables injecting at bus position `j`.
fn build_network_part(
    problem: &mut ConicProblem,
    network: &FeederNetwork,
    zip: &ZipCoefficients,
    opts: &BuildOptions,
    dg_at: &dyn Fn(usize) -> Option<(VarId, Option<VarId>)>,
) -> Result<(Vec<VarId>, Vec<BranchVars>, Vec<(usize, usize)>), BuildError> {
    if !network.is_per_unit() {
        return Err(BuildError::NotPerUnit);
    }
    zip.validate()?;
    let topo = network.topology();
    let buses = network.buses();
    let slack = network.slack_index();

    let v_sq: Vec<VarId> = buses
        .iter()
        .enumerate()
        .map(|(k, b)| {
            if k == slack {
                let v = opts.slack_v_pu * opts.slack_v_pu;
                problem.add_var(format!("v[{}]", b.id), v, v)
            } else if opts.enforce_voltage_limits {
                problem.add_var(format!("v[{}]", b.id), b.v_min * b.v_min, b.v_max * b.v_max)
            } else {
                problem.add_var(format!("v[{}]", b.id), 0.0, f64::INFINITY)
            }
        })
        .collect();

    // Branch variables, indexed by branch position.
    let mut by_branch: Vec<Option<BranchVars>> = vec![None; network.branches().len()];
    for &j in topo.order() {
        let (Some(i), Some(k)) = (topo.parent(j), topo.parent_branch(j)) else {
            continue;
        };
        let tag = format!("{}-{}", buses[i].id, buses[j].id);
        let br = &network.branches()[k];
        by_branch[k] = Some(BranchVars {
            from: i,
            to: j,
            l: problem.add_var(format!("l[{tag}]"), 0.0, br.i_max_sq()),
            p: problem.add_free_var(format!("P[{tag}]")),
            q: problem.add_free_var(format!("Q[{tag}]")),
        });
    }
    let branch_vars: Vec<BranchVars> = by_branch.into_iter().map(Option::unwrap).collect();

    let mut objective = LinExpr::default();
    let mut balance_rows = Vec::with_capacity(branch_vars.len());
    for (k, bv) in branch_vars.iter().enumerate() {
        let br = &network.branches()[k];
        let j = bv.to;
        let bus = &buses[j];
        let zp = linearize_to_zp(&bus.zip.unwrap_or(*zip))?;
        if br.r != 0.0 {
            objective.terms.push((bv.l, br.r));
        }

        let children = topo.children(j);
        let dg = dg_at(j);

        let mut p_row = vec![
            (bv.p, 1.0),
            (bv.l, -br.r),
            (v_sq[j], -bus.p_load * zp.alpha_p),
        ];
        let mut q_row = vec![
            (bv.q, 1.0),
            (bv.l, -br.x),
            (v_sq[j], -bus.q_load * zp.alpha_q),
        ];
        for &c in children {
            let cb = &branch_vars[topo.parent_branch(c).expect("child has a parent branch")];
            p_row.push((cb.p, -1.0));
            q_row.push((cb.q, -1.0));
        }
        if let Some((p, q)) = dg {
            p_row.push((p, 1.0));
            if let Some(q) = q {
                q_row.push((q, 1.0));
            }
        }
        let rp = problem.add_equality(p_row, bus.p_load * zp.beta_p);
        let rq = problem.add_equality(q_row, bus.q_load * zp.beta_q);
        balance_rows.push((rp, rq));

        let z_sq = br.r * br.r + br.x * br.x;
        problem.add_equality(
            vec![
                (v_sq[j], 1.0),
                (v_sq[bv.from], -1.0),
                (bv.l, -z_sq),
                (bv.p, 2.0 * br.r),
                (bv.q, 2.0 * br.x),
            ],
            0.0,
        );

        problem.add_cone(
            vec![
                LinExpr::term(bv.p, 2.0),
                LinExpr::term(bv.q, 2.0),
                LinExpr::var(bv.l).plus(v_sq[bv.from], -1.0),
            ],
            LinExpr::var(bv.l).plus(v_sq[bv.from], 1.0),
        );
    }
    problem.set_objective(objective);
    Ok((v_sq, branch_vars, balance_rows))
}

/// Stage-1 placement MISOCP. `n_dg = 0` yields the plain power-flow SOCP.
pub fn build_stage1(
    network: &FeederNetwork,
    zip: &ZipCoefficients,
    dg: &DgConfig,
    opts: &BuildOptions,
) -> Result<DistflowModel, BuildError> {
    if !network.is_per_unit() {
        return Err(BuildError::NotPerUnit);
    }
    dg.check(network)?;
    let mut problem = ConicProblem::new();

    let mut dgs = Vec::new();
    if dg.n_dg > 0 {
        for &bus in &dg.candidate_buses {
            let j = network.index_of(bus).expect("checked candidate");
            let a = problem.add_binary(format!("a[{bus}]"));
            let p = problem.add_var(format!("p_dg[{bus}]"), 0.0, dg.s_dg_max);
            let q = opts
                .allow_q
                .then(|| problem.add_var(format!("q_dg[{bus}]"), -dg.s_dg_max, dg.s_dg_max));
            dgs.push(DgVars {
                bus_index: j,
                a: Some(a),
                p,
                q,
            });
        }
    }
    let lookup = dgs.clone();
    let dg_at = move |j: usize| lookup.iter().find(|d| d.bus_index == j).map(|d| (d.p, d.q));
    let (v_sq, branches, balance_rows) =
        build_network_part(&mut problem, network, zip, opts, &dg_at)?;

    if !dgs.is_empty() {
        for d in &dgs {
            let a = d.a.expect("stage 1 units carry a binary");
            let mut vector = vec![LinExpr::var(d.p)];
            if let Some(q) = d.q {
                vector.push(LinExpr::var(q));
            }
            problem.add_cone(vector, LinExpr::term(a, dg.s_dg_max));
        }
        problem.add_equality(
            dgs.iter().map(|d| (d.a.unwrap(), 1.0)).collect(),
            dg.n_dg as f64,
        );
    }

    Ok(DistflowModel {
        problem,
        network: network.clone(),
        v_sq,
        branches,
        dgs,
        balance_rows,
    })
}

/// Stage-2 reactive dispatch SOCP for a fixed placement and active output.
pub fn build_stage2(
    network: &FeederNetwork,
    zip: &ZipCoefficients,
    placement: &PlacementSolution,
    dg: &DgConfig,
    opts: &BuildOptions,
) -> Result<DistflowModel, BuildError> {
    if !network.is_per_unit() {
        return Err(BuildError::NotPerUnit);
    }
    dg.check(network)?;
    if placement.dgs.len() != dg.n_dg {
        return Err(BuildError::PlacementSize {
            got: placement.dgs.len(),
            expected: dg.n_dg,
        });
    }
    let mut problem = ConicProblem::new();
    let mut dgs = Vec::new();
    for unit in &placement.dgs {
        if !dg.candidate_buses.contains(&unit.bus) {
            return Err(BuildError::NotCandidate(unit.bus));
        }
        let j = network
            .index_of(unit.bus)
            .ok_or(BuildError::NotCandidate(unit.bus))?;
        let s = dg.s_dg_max;
        // Solver round-off may put p a hair above capacity.
        if unit.p_pu > s * (1.0 + 1e-7) || unit.p_pu < 0.0 {
            return Err(BuildError::SetpointAboveCapacity {
                bus: unit.bus,
                p: unit.p_pu,
                s_max: s,
            });
        }
        let p_fixed = unit.p_pu.min(s);
        let p = problem.add_var(format!("p_dg[{}]", unit.bus), p_fixed, p_fixed);
        let q_max = (s * s - p_fixed * p_fixed).max(0.0).sqrt();
        let q = problem.add_var(format!("q_dg[{}]", unit.bus), -q_max, q_max);
        dgs.push(DgVars {
            bus_index: j,
            a: None,
            p,
            q: Some(q),
        });
    }
    let lookup = dgs.clone();
    let dg_at = move |j: usize| lookup.iter().find(|d| d.bus_index == j).map(|d| (d.p, d.q));
    let (v_sq, branches, balance_rows) =
        build_network_part(&mut problem, network, zip, opts, &dg_at)?;
    Ok(DistflowModel {
        problem,
        network: network.clone(),
        v_sq,
        branches,
        dgs,
        balance_rows,
    })
}

const INTEGRALITY_TOL: f64 = 1e-6;

/// Reads the placement and setpoints from a solved Stage-1 model.
pub fn extract_placement(
    solution: &ConicSolution,
    model: &DistflowModel,
) -> Result<PlacementSolution, BuildError> {
    if solution.status != SolveStatus::Optimal {
        return Err(BuildError::NotOptimal(solution.status));
    }
    let mut dgs = Vec::new();
    for d in &model.dgs {
        let on = match d.a {
            Some(a) => {
                let value = solution.value(a);
                if (value - 1.0).abs() <= INTEGRALITY_TOL {
                    true
                } else if value.abs() <= INTEGRALITY_TOL {
                    false
                } else {
                    return Err(BuildError::Fractional {
                        bus: model.network.buses()[d.bus_index].id,
                        value,
                    });
                }
            }
            None => true,
        };
        if on {
            dgs.push(model.setpoint(d, solution));
        }
    }
    dgs.sort_by_key(|d| d.bus);
    let detail = model.detail(solution);
    Ok(PlacementSolution {
        dgs,
        predicted_losses_kw: detail.losses_kw,
        detail,
    })
}

/// Reads the reactive dispatch from a solved Stage-2 model.
pub fn extract_dispatch(
    solution: &ConicSolution,
    model: &DistflowModel,
) -> Result<DispatchSolution, BuildError> {
    if solution.status != SolveStatus::Optimal {
        return Err(BuildError::NotOptimal(solution.status));
    }
    let mut dgs: Vec<DgSetpoint> = model
        .dgs
        .iter()
        .map(|d| model.setpoint(d, solution))
        .collect();
    dgs.sort_by_key(|d| d.bus);
    let detail = model.detail(solution);
    Ok(DispatchSolution {
        dgs,
        predicted_losses_kw: detail.losses_kw,
        detail,
    })
}
