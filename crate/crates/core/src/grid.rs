//! Radial feeder data model.
//!
//! A [`FeederNetwork`] is read from two CSV tables plus a small JSON document
//! holding the per-unit bases and the slack bus. Construction validates that
//! the branch set is a spanning tree rooted at the slack bus, and the derived
//! [`Topology`] (parent and children maps, breadth-first order) is stored with
//! the network. Networks are immutable once built; the `with_*` helpers return
//! modified copies.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::fmt;
use std::fs::File;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::load::ZipCoefficients;

/// Columns every `buses.csv` must carry, in this order.
pub const BUS_HEADER: [&str; 5] = ["id", "p_load_kw", "q_load_kvar", "v_min_pu", "v_max_pu"];
/// Optional per-bus ZIP override columns.
pub const BUS_ZIP_COLUMNS: [&str; 6] = ["z_p", "i_p", "p_p", "z_q", "i_q", "p_q"];
/// Columns every `branches.csv` must carry, in this order.
pub const BRANCH_HEADER: [&str; 5] = ["from", "to", "r_ohm", "x_ohm", "i_max_a"];

#[derive(Debug, Error)]
pub enum GridError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{file}: line {line}: {message}")]
    Csv {
        file: String,
        line: u64,
        message: String,
    },
    #[error("{file}: line {line}, field `{field}`: {message}")]
    Schema {
        file: String,
        line: u64,
        field: String,
        message: String,
    },
    #[error("feeder config: {0}")]
    Config(String),
    #[error("{file}: line {line}: duplicate bus id {id}")]
    DuplicateBus { file: String, line: u64, id: usize },
    #[error("{file}: line {line}, field `{field}`: unknown bus {bus}")]
    DanglingEndpoint {
        file: String,
        line: u64,
        field: String,
        bus: usize,
    },
    #[error("slack bus {0} is not among the buses")]
    MissingSlack(usize),
    #[error("branches form a cycle through buses {0:?}")]
    Cycle(Vec<usize>),
    #[error("buses {0:?} are not connected to the slack bus")]
    Disconnected(Vec<usize>),
    #[error("network is already in per-unit")]
    AlreadyPerUnit,
    #[error("network is not in per-unit")]
    NotPerUnit,
    #[error("unknown bus {0}")]
    UnknownBus(usize),
}

pub type Result<T> = std::result::Result<T, GridError>;

/// One bus. Loads are kW/kvar in physical units and p.u. after conversion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BusRecord {
    pub id: usize,
    pub p_load: f64,
    pub q_load: f64,
    pub v_min: f64,
    pub v_max: f64,
    /// Per-bus ZIP override; `None` uses the feeder-wide coefficients.
    pub zip: Option<ZipCoefficients>,
}

impl BusRecord {
    pub fn new(id: usize, p_load: f64, q_load: f64) -> Self {
        Self {
            id,
            p_load,
            q_load,
            v_min: 0.95,
            v_max: 1.05,
            zip: None,
        }
    }

    pub fn has_load(&self) -> bool {
        self.p_load != 0.0 || self.q_load != 0.0
    }
}

/// One line section. Impedances are ohms in physical units, p.u. after conversion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchRecord {
    pub from_bus: usize,
    pub to_bus: usize,
    pub r: f64,
    pub x: f64,
    /// Ampacity in A (or p.u.); `None` means unconstrained.
    pub i_max: Option<f64>,
}

impl BranchRecord {
    pub fn new(from_bus: usize, to_bus: usize, r: f64, x: f64) -> Self {
        Self {
            from_bus,
            to_bus,
            r,
            x,
            i_max: None,
        }
    }

    /// Squared ampacity, `+inf` when unconstrained.
    pub fn i_max_sq(&self) -> f64 {
        self.i_max.map_or(f64::INFINITY, |i| i * i)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerUnitBase {
    /// Line-to-line base voltage, kV.
    pub base_kv: f64,
    /// Three-phase base power, MVA.
    pub base_mva: f64,
}

impl PerUnitBase {
    pub fn new(base_kv: f64, base_mva: f64) -> Result<Self> {
        if !(base_kv.is_finite() && base_kv > 0.0 && base_mva.is_finite() && base_mva > 0.0) {
            return Err(GridError::Config(format!(
                "bases must be strictly positive (base_kv = {base_kv}, base_mva = {base_mva})"
            )));
        }
        Ok(Self { base_kv, base_mva })
    }

    /// Impedance base in ohms.
    pub fn z_base(&self) -> f64 {
        self.base_kv * self.base_kv / self.base_mva
    }

    /// Current base in kA.
    pub fn i_base_ka(&self) -> f64 {
        self.base_mva / (3f64.sqrt() * self.base_kv)
    }

    /// kW per p.u. of power.
    pub fn kw_per_pu(&self) -> f64 {
        self.base_mva * 1000.0
    }
}

/// Contents of the feeder JSON document.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeederConfig {
    pub base_kv: f64,
    pub base_mva: f64,
    #[serde(default = "default_slack")]
    pub slack_bus: usize,
}

fn default_slack() -> usize {
    1
}

/// Slack-rooted tree structure derived from the branch list. All indices are
/// positions in the owning network's bus and branch vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    parent: Vec<Option<usize>>,
    parent_branch: Vec<Option<usize>>,
    children: Vec<Vec<usize>>,
    order: Vec<usize>,
}

impl Topology {
    pub fn parent(&self, bus: usize) -> Option<usize> {
        self.parent[bus]
    }

    /// Branch connecting `bus` to its parent.
    pub fn parent_branch(&self, bus: usize) -> Option<usize> {
        self.parent_branch[bus]
    }

    pub fn children(&self, bus: usize) -> &[usize] {
        &self.children[bus]
    }

    /// Breadth-first order from the slack bus.
    pub fn order(&self) -> &[usize] {
        &self.order
    }
}

/// Checks that `branches` form a spanning tree over `buses` rooted at
/// `slack_bus` and derives the parent/children maps.
pub fn validate_radial(
    buses: &[BusRecord],
    branches: &[BranchRecord],
    slack_bus: usize,
) -> Result<Topology> {
    let index: HashMap<usize, usize> = buses.iter().enumerate().map(|(k, b)| (b.id, k)).collect();
    let slack = *index
        .get(&slack_bus)
        .ok_or(GridError::MissingSlack(slack_bus))?;
    let n = buses.len();

    // adjacency: (neighbour, branch)
    let mut adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
    for (k, br) in branches.iter().enumerate() {
        let f = *index
            .get(&br.from_bus)
            .ok_or(GridError::UnknownBus(br.from_bus))?;
        let t = *index
            .get(&br.to_bus)
            .ok_or(GridError::UnknownBus(br.to_bus))?;
        adj[f].push((t, k));
        adj[t].push((f, k));
    }
    for list in &mut adj {
        list.sort_by_key(|&(nb, _)| buses[nb].id);
    }

    if let Some(cycle) = find_cycle(&adj) {
        let mut ids: Vec<usize> = cycle.into_iter().map(|k| buses[k].id).collect();
        ids.sort_unstable();
        return Err(GridError::Cycle(ids));
    }

    let mut parent = vec![None; n];
    let mut parent_branch = vec![None; n];
    let mut children = vec![Vec::new(); n];
    let mut seen = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut queue = VecDeque::from([slack]);
    seen[slack] = true;
    while let Some(u) = queue.pop_front() {
        order.push(u);
        for &(v, k) in &adj[u] {
            if !seen[v] {
                seen[v] = true;
                parent[v] = Some(u);
                parent_branch[v] = Some(k);
                children[u].push(v);
                queue.push_back(v);
            }
        }
    }
    if order.len() != n {
        let mut missing: Vec<usize> = (0..n).filter(|&k| !seen[k]).map(|k| buses[k].id).collect();
        missing.sort_unstable();
        return Err(GridError::Disconnected(missing));
    }

    Ok(Topology {
        parent,
        parent_branch,
        children,
        order,
    })
}

/// Returns the bus indices on some cycle of the undirected multigraph, if any.
fn find_cycle(adj: &[Vec<(usize, usize)>]) -> Option<Vec<usize>> {
    let n = adj.len();
    let mut state = vec![0u8; n]; // 0 unvisited, 1 on stack, 2 done
    let mut via = vec![usize::MAX; n]; // branch used to enter
    let mut up = vec![usize::MAX; n];
    for root in 0..n {
        if state[root] != 0 {
            continue;
        }
        let mut stack = vec![(root, 0usize)];
        state[root] = 1;
        while let Some(&mut (u, ref mut next)) = stack.last_mut() {
            if *next < adj[u].len() {
                let (v, k) = adj[u][*next];
                *next += 1;
                if k == via[u] {
                    continue;
                }
                match state[v] {
                    0 => {
                        state[v] = 1;
                        via[v] = k;
                        up[v] = u;
                        stack.push((v, 0));
                    }
                    1 => {
                        let mut cycle = vec![u];
                        let mut w = u;
                        while w != v {
                            w = up[w];
                            cycle.push(w);
                        }
                        return Some(cycle);
                    }
                    _ => {}
                }
            } else {
                state[u] = 2;
                stack.pop();
            }
        }
    }
    None
}

/// A validated radial feeder.
#[derive(Debug, Clone, PartialEq)]
pub struct FeederNetwork {
    buses: Vec<BusRecord>,
    branches: Vec<BranchRecord>,
    slack_bus: usize,
    base: PerUnitBase,
    per_unit: bool,
    topology: Topology,
}

impl FeederNetwork {
    /// Builds a network in physical units, validating records and radiality.
    pub fn new(
        buses: Vec<BusRecord>,
        branches: Vec<BranchRecord>,
        slack_bus: usize,
        base: PerUnitBase,
    ) -> Result<Self> {
        let mut ids = HashMap::new();
        for (k, bus) in buses.iter().enumerate() {
            check_bus(bus, "buses", k as u64 + 1)?;
            if ids.insert(bus.id, k).is_some() {
                return Err(GridError::DuplicateBus {
                    file: "buses".into(),
                    line: k as u64 + 1,
                    id: bus.id,
                });
            }
        }
        for (k, br) in branches.iter().enumerate() {
            check_branch(br, "branches", k as u64 + 1)?;
            for (field, bus) in [("from", br.from_bus), ("to", br.to_bus)] {
                if !ids.contains_key(&bus) {
                    return Err(GridError::DanglingEndpoint {
                        file: "branches".into(),
                        line: k as u64 + 1,
                        field: field.into(),
                        bus,
                    });
                }
            }
        }
        let topology = validate_radial(&buses, &branches, slack_bus)?;
        Ok(Self {
            buses,
            branches,
            slack_bus,
            base,
            per_unit: false,
            topology,
        })
    }

    pub fn buses(&self) -> &[BusRecord] {
        &self.buses
    }

    pub fn branches(&self) -> &[BranchRecord] {
        &self.branches
    }

    pub fn slack_bus(&self) -> usize {
        self.slack_bus
    }

    /// Position of the slack bus in [`buses`](Self::buses).
    pub fn slack_index(&self) -> usize {
        self.topology.order[0]
    }

    pub fn base(&self) -> PerUnitBase {
        self.base
    }

    pub fn is_per_unit(&self) -> bool {
        self.per_unit
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn index_of(&self, id: usize) -> Option<usize> {
        self.buses.iter().position(|b| b.id == id)
    }

    pub fn bus(&self, id: usize) -> Option<&BusRecord> {
        self.buses.iter().find(|b| b.id == id)
    }

    /// Parent bus id of `id`, `None` for the slack bus.
    pub fn parent_of(&self, id: usize) -> Option<usize> {
        let k = self.index_of(id)?;
        self.topology.parent(k).map(|p| self.buses[p].id)
    }

    /// Children bus ids of `id` in ascending order.
    pub fn children_of(&self, id: usize) -> Vec<usize> {
        self.index_of(id)
            .map(|k| {
                self.topology
                    .children(k)
                    .iter()
                    .map(|&c| self.buses[c].id)
                    .collect()
            })
            .unwrap_or_default()
    }

    /// Bus ids in breadth-first order from the slack bus.
    pub fn depth_order(&self) -> Vec<usize> {
        self.topology
            .order()
            .iter()
            .map(|&k| self.buses[k].id)
            .collect()
    }

    /// Non-slack bus ids in ascending order.
    pub fn non_slack_ids(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self
            .buses
            .iter()
            .map(|b| b.id)
            .filter(|&id| id != self.slack_bus)
            .collect();
        ids.sort_unstable();
        ids
    }

    /// Converts impedances, loads and ampacities to per-unit.
    pub fn to_per_unit(&self) -> Result<Self> {
        if self.per_unit {
            return Err(GridError::AlreadyPerUnit);
        }
        let z = self.base.z_base();
        let s = self.base.kw_per_pu();
        let i = self.base.i_base_ka() * 1000.0;
        Ok(self.rescaled(1.0 / z, 1.0 / s, 1.0 / i, true))
    }

    /// Inverse of [`to_per_unit`](Self::to_per_unit).
    pub fn to_physical(&self) -> Result<Self> {
        if !self.per_unit {
            return Err(GridError::NotPerUnit);
        }
        let z = self.base.z_base();
        let s = self.base.kw_per_pu();
        let i = self.base.i_base_ka() * 1000.0;
        Ok(self.rescaled(z, s, i, false))
    }

    fn rescaled(&self, z: f64, s: f64, i: f64, per_unit: bool) -> Self {
        let mut out = self.clone();
        for bus in &mut out.buses {
            bus.p_load *= s;
            bus.q_load *= s;
        }
        for br in &mut out.branches {
            br.r *= z;
            br.x *= z;
            br.i_max = br.i_max.map(|v| v * i);
        }
        out.per_unit = per_unit;
        out
    }

    /// Copy with the demand of bus `id` multiplied by `factor`.
    pub fn with_scaled_load(&self, id: usize, factor: f64) -> Result<Self> {
        let k = self.index_of(id).ok_or(GridError::UnknownBus(id))?;
        let mut out = self.clone();
        out.buses[k].p_load *= factor;
        out.buses[k].q_load *= factor;
        Ok(out)
    }

    /// Copy with every bus's demand multiplied by `factor`.
    pub fn with_uniform_load_scale(&self, factor: f64) -> Self {
        let mut out = self.clone();
        for bus in &mut out.buses {
            bus.p_load *= factor;
            bus.q_load *= factor;
        }
        out
    }

    /// Copy with the same voltage window applied to every bus.
    pub fn with_voltage_limits(&self, v_min: f64, v_max: f64) -> Result<Self> {
        if !(v_min > 0.0 && v_min < v_max) {
            return Err(GridError::Config(format!(
                "invalid voltage window [{v_min}, {v_max}]"
            )));
        }
        let mut out = self.clone();
        for bus in &mut out.buses {
            bus.v_min = v_min;
            bus.v_max = v_max;
        }
        Ok(out)
    }

    /// Total demand (same units as the bus records).
    pub fn total_load(&self) -> (f64, f64) {
        self.buses
            .iter()
            .fold((0.0, 0.0), |(p, q), b| (p + b.p_load, q + b.q_load))
    }

    /// Writes the bus table in the `buses.csv` schema. Physical units only.
    pub fn write_buses_csv<W: Write>(&self, out: W) -> Result<()> {
        if self.per_unit {
            return Err(GridError::AlreadyPerUnit);
        }
        let with_zip = self.buses.iter().any(|b| b.zip.is_some());
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<&str> = BUS_HEADER.to_vec();
        if with_zip {
            header.extend(BUS_ZIP_COLUMNS);
        }
        w.write_record(&header).map_err(csv_write_err)?;
        for b in &self.buses {
            let mut row = vec![
                b.id.to_string(),
                fmt_float(b.p_load),
                fmt_float(b.q_load),
                fmt_float(b.v_min),
                fmt_float(b.v_max),
            ];
            if with_zip {
                match &b.zip {
                    Some(z) => {
                        row.extend([z.z_p, z.i_p, z.p_p, z.z_q, z.i_q, z.p_q].map(fmt_float))
                    }
                    None => row.extend(std::iter::repeat_n(String::new(), 6)),
                }
            }
            w.write_record(&row).map_err(csv_write_err)?;
        }
        w.flush().map_err(|e| csv_write_err(e.into()))
    }

    /// Writes the branch table in the `branches.csv` schema. Physical units only.
    pub fn write_branches_csv<W: Write>(&self, out: W) -> Result<()> {
        if self.per_unit {
            return Err(GridError::AlreadyPerUnit);
        }
        let mut w = csv::Writer::from_writer(out);
        w.write_record(BRANCH_HEADER).map_err(csv_write_err)?;
        for br in &self.branches {
            w.write_record([
                br.from_bus.to_string(),
                br.to_bus.to_string(),
                fmt_float(br.r),
                fmt_float(br.x),
                br.i_max.map(fmt_float).unwrap_or_default(),
            ])
            .map_err(csv_write_err)?;
        }
        w.flush().map_err(|e| csv_write_err(e.into()))
    }

    pub fn feeder_config(&self) -> FeederConfig {
        FeederConfig {
            base_kv: self.base.base_kv,
            base_mva: self.base.base_mva,
            slack_bus: self.slack_bus,
        }
    }
}

impl fmt::Display for FeederNetwork {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} buses, {} branches, slack {}, {} kV / {} MVA{}",
            self.buses.len(),
            self.branches.len(),
            self.slack_bus,
            self.base.base_kv,
            self.base.base_mva,
            if self.per_unit { " (p.u.)" } else { "" }
        )
    }
}

// Shortest representation that parses back to the same f64.
fn fmt_float(v: f64) -> String {
    format!("{v:?}")
}

fn csv_write_err(e: csv::Error) -> GridError {
    GridError::Csv {
        file: "<output>".into(),
        line: 0,
        message: e.to_string(),
    }
}

fn check_bus(bus: &BusRecord, file: &str, line: u64) -> Result<()> {
    let bad = |field: &str, message: String| {
        Err(GridError::Schema {
            file: file.into(),
            line,
            field: field.into(),
            message,
        })
    };
    if !(bus.p_load.is_finite() && bus.p_load >= 0.0) {
        return bad(
            "p_load_kw",
            format!("must be finite and >= 0, got {}", bus.p_load),
        );
    }
    if !bus.q_load.is_finite() {
        return bad("q_load_kvar", format!("must be finite, got {}", bus.q_load));
    }
    if !(bus.v_min > 0.0) {
        return bad("v_min_pu", format!("must be > 0, got {}", bus.v_min));
    }
    if !(bus.v_max > bus.v_min && bus.v_max.is_finite()) {
        return bad(
            "v_max_pu",
            format!("must exceed v_min_pu ({}), got {}", bus.v_min, bus.v_max),
        );
    }
    if let Some(zip) = &bus.zip {
        if let Err(e) = zip.validate() {
            return bad("z_p", e.to_string());
        }
    }
    Ok(())
}

fn check_branch(br: &BranchRecord, file: &str, line: u64) -> Result<()> {
    let bad = |field: &str, message: String| {
        Err(GridError::Schema {
            file: file.into(),
            line,
            field: field.into(),
            message,
        })
    };
    if br.from_bus == br.to_bus {
        return bad(
            "to",
            format!("branch connects bus {} to itself", br.from_bus),
        );
    }
    if !(br.r.is_finite() && br.r >= 0.0) {
        return bad("r_ohm", format!("must be finite and >= 0, got {}", br.r));
    }
    if !(br.x.is_finite() && br.x >= 0.0) {
        return bad("x_ohm", format!("must be finite and >= 0, got {}", br.x));
    }
    if br.r == 0.0 && br.x == 0.0 {
        return bad("r_ohm", "r and x are both zero".into());
    }
    if let Some(i) = br.i_max {
        if !(i.is_finite() && i > 0.0) {
            return bad("i_max_a", format!("must be > 0 when present, got {i}"));
        }
    }
    Ok(())
}

/// Reads a feeder from its bus table, branch table and JSON config.
pub fn parse_feeder(
    bus_file: impl AsRef<Path>,
    branch_file: impl AsRef<Path>,
    config: impl AsRef<Path>,
) -> Result<FeederNetwork> {
    let cfg = read_feeder_config(config.as_ref())?;
    let bus_path = bus_file.as_ref();
    let branch_path = branch_file.as_ref();
    let buses = read_buses(open(bus_path)?, &bus_path.display().to_string())?;
    let branches = read_branches(open(branch_path)?, &branch_path.display().to_string())?;
    from_records(
        buses,
        branches,
        cfg,
        &bus_path.display().to_string(),
        &branch_path.display().to_string(),
    )
}

/// Like [`parse_feeder`] but from in-memory readers.
pub fn parse_feeder_from_readers<B: io::Read, R: io::Read>(
    buses: B,
    branches: R,
    config: FeederConfig,
) -> Result<FeederNetwork> {
    let buses = read_buses(buses, "buses.csv")?;
    let branches = read_branches(branches, "branches.csv")?;
    from_records(buses, branches, config, "buses.csv", "branches.csv")
}

pub fn read_feeder_config(path: &Path) -> Result<FeederConfig> {
    let file = open(path)?;
    let cfg: FeederConfig = serde_json::from_reader(io::BufReader::new(file))
        .map_err(|e| GridError::Config(format!("{}: {e}", path.display())))?;
    PerUnitBase::new(cfg.base_kv, cfg.base_mva)?;
    Ok(cfg)
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|source| GridError::Io {
        path: path.to_path_buf(),
        source,
    })
}

type Located<T> = Vec<(u64, T)>;

fn from_records(
    buses: Located<BusRecord>,
    branches: Located<BranchRecord>,
    cfg: FeederConfig,
    bus_file: &str,
    branch_file: &str,
) -> Result<FeederNetwork> {
    let base = PerUnitBase::new(cfg.base_kv, cfg.base_mva)?;
    // Re-run the record checks here so errors carry file and line.
    let mut seen = BTreeSet::new();
    for (line, bus) in &buses {
        check_bus(bus, bus_file, *line)?;
        if !seen.insert(bus.id) {
            return Err(GridError::DuplicateBus {
                file: bus_file.into(),
                line: *line,
                id: bus.id,
            });
        }
    }
    if !seen.contains(&cfg.slack_bus) {
        return Err(GridError::MissingSlack(cfg.slack_bus));
    }
    for (line, br) in &branches {
        check_branch(br, branch_file, *line)?;
        for (field, bus) in [("from", br.from_bus), ("to", br.to_bus)] {
            if !seen.contains(&bus) {
                return Err(GridError::DanglingEndpoint {
                    file: branch_file.into(),
                    line: *line,
                    field: field.into(),
                    bus,
                });
            }
        }
    }
    FeederNetwork::new(
        buses.into_iter().map(|(_, b)| b).collect(),
        branches.into_iter().map(|(_, b)| b).collect(),
        cfg.slack_bus,
        base,
    )
}

fn csv_reader<R: io::Read>(input: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .flexible(false)
        .from_reader(input)
}

fn header_positions(
    headers: &csv::StringRecord,
    required: &[&str],
    file: &str,
) -> Result<Vec<usize>> {
    required
        .iter()
        .map(|name| {
            headers
                .iter()
                .position(|h| h == *name)
                .ok_or_else(|| GridError::Schema {
                    file: file.into(),
                    line: 1,
                    field: (*name).into(),
                    message: "missing column".into(),
                })
        })
        .collect()
}

struct Row<'a> {
    record: &'a csv::StringRecord,
    file: &'a str,
    line: u64,
}

impl Row<'_> {
    fn raw(&self, col: usize) -> &str {
        self.record.get(col).unwrap_or("")
    }

    fn err(&self, field: &str, message: String) -> GridError {
        GridError::Schema {
            file: self.file.into(),
            line: self.line,
            field: field.into(),
            message,
        }
    }

    fn float(&self, col: usize, field: &str) -> Result<f64> {
        let s = self.raw(col);
        s.parse::<f64>()
            .map_err(|_| self.err(field, format!("expected a number, got {s:?}")))
    }

    fn opt_float(&self, col: usize, field: &str) -> Result<Option<f64>> {
        if self.raw(col).is_empty() {
            Ok(None)
        } else {
            self.float(col, field).map(Some)
        }
    }

    fn bus_id(&self, col: usize, field: &str) -> Result<usize> {
        let s = self.raw(col);
        s.parse::<usize>()
            .map_err(|_| self.err(field, format!("expected a bus index, got {s:?}")))
    }
}

fn read_rows<R: io::Read, T>(
    input: R,
    file: &str,
    required: &[&str],
    mut parse: impl FnMut(&Row, &[usize], &csv::StringRecord) -> Result<T>,
) -> Result<Located<T>> {
    let mut rdr = csv_reader(input);
    let headers = rdr
        .headers()
        .map_err(|e| GridError::Csv {
            file: file.into(),
            line: e.position().map_or(1, |p| p.line()),
            message: e.to_string(),
        })?
        .clone();
    let cols = header_positions(&headers, required, file)?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let record = rec.map_err(|e| GridError::Csv {
            file: file.into(),
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let row = Row {
            record: &record,
            file,
            line,
        };
        out.push((line, parse(&row, &cols, &headers)?));
    }
    Ok(out)
}

fn read_buses<R: io::Read>(input: R, file: &str) -> Result<Located<BusRecord>> {
    read_rows(input, file, &BUS_HEADER, |row, cols, headers| {
        let zip_cols: Vec<Option<usize>> = BUS_ZIP_COLUMNS
            .iter()
            .map(|name| headers.iter().position(|h| h == *name))
            .collect();
        let mut zip_vals = [None; 6];
        for (k, col) in zip_cols.iter().enumerate() {
            if let Some(c) = col {
                zip_vals[k] = row.opt_float(*c, BUS_ZIP_COLUMNS[k])?;
            }
        }
        let zip = match zip_vals.iter().filter(|v| v.is_some()).count() {
            0 => None,
            6 => {
                let [z_p, i_p, p_p, z_q, i_q, p_q] = zip_vals.map(Option::unwrap);
                Some(ZipCoefficients {
                    z_p,
                    i_p,
                    p_p,
                    z_q,
                    i_q,
                    p_q,
                })
            }
            _ => {
                return Err(row.err("z_p", "ZIP override needs all six columns filled".into()));
            }
        };
        Ok(BusRecord {
            id: row.bus_id(cols[0], BUS_HEADER[0])?,
            p_load: row.float(cols[1], BUS_HEADER[1])?,
            q_load: row.float(cols[2], BUS_HEADER[2])?,
            v_min: row.float(cols[3], BUS_HEADER[3])?,
            v_max: row.float(cols[4], BUS_HEADER[4])?,
            zip,
        })
    })
}

fn read_branches<R: io::Read>(input: R, file: &str) -> Result<Located<BranchRecord>> {
    read_rows(input, file, &BRANCH_HEADER, |row, cols, _| {
        Ok(BranchRecord {
            from_bus: row.bus_id(cols[0], BRANCH_HEADER[0])?,
            to_bus: row.bus_id(cols[1], BRANCH_HEADER[1])?,
            r: row.float(cols[2], BRANCH_HEADER[2])?,
            x: row.float(cols[3], BRANCH_HEADER[3])?,
            i_max: row.opt_float(cols[4], BRANCH_HEADER[4])?,
        })
    })
}

/// Directory holding the bundled feeder fixtures.
pub fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data")
}

/// Bundled IEEE 33-bus feeder (Baran-Wu data, 12.66 kV / 10 MVA).
pub fn ieee33() -> Result<FeederNetwork> {
    bundled("ieee33")
}

/// Bundled IEEE 15-bus feeder (11 kV / 100 kVA).
pub fn ieee15() -> Result<FeederNetwork> {
    bundled("ieee15")
}

fn bundled(name: &str) -> Result<FeederNetwork> {
    let dir = data_dir().join(name);
    parse_feeder(
        dir.join("buses.csv"),
        dir.join("branches.csv"),
        dir.join("feeder.json"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain(n: usize) -> FeederNetwork {
        let buses = (1..=n).map(|id| BusRecord::new(id, 10.0, 5.0)).collect();
        let branches = (1..n)
            .map(|k| BranchRecord::new(k, k + 1, 0.1, 0.2))
            .collect();
        FeederNetwork::new(buses, branches, 1, PerUnitBase::new(11.0, 1.0).unwrap()).unwrap()
    }

    #[test]
    fn ieee33_shape() {
        let net = ieee33().unwrap();
        assert_eq!(net.buses().len(), 33);
        assert_eq!(net.branches().len(), 32);
        assert_eq!(net.slack_bus(), 1);
        assert_eq!(net.parent_of(6), Some(5));
        assert_eq!(net.children_of(6), vec![7, 26]);
        let (p, q) = net.total_load();
        assert!((p - 3715.0).abs() < 1e-9 && (q - 2300.0).abs() < 1e-9);
    }

    #[test]
    fn ieee15_shape() {
        let net = ieee15().unwrap();
        assert_eq!(net.buses().len(), 15);
        assert_eq!(net.branches().len(), 14);
        assert_eq!(net.slack_bus(), 1);
        assert_eq!(net.children_of(2), vec![3, 6, 9]);
    }

    #[test]
    fn two_bus_feeder() {
        let buses =
            "id,p_load_kw,q_load_kvar,v_min_pu,v_max_pu\n1,0,0,0.95,1.05\n2,100,0,0.95,1.05\n";
        let branches = "from,to,r_ohm,x_ohm,i_max_a\n1,2,0.1,0.1,\n";
        let cfg = FeederConfig {
            base_kv: 11.0,
            base_mva: 1.0,
            slack_bus: 1,
        };
        let net = parse_feeder_from_readers(buses.as_bytes(), branches.as_bytes(), cfg).unwrap();
        assert_eq!(net.branches().len(), 1);
        assert_eq!(net.branches()[0].i_max, None);
        assert_eq!(net.branches()[0].i_max_sq(), f64::INFINITY);
    }

    #[test]
    fn chain_depth_order() {
        assert_eq!(chain(3).depth_order(), vec![1, 2, 3]);
    }

    #[test]
    fn triangle_is_a_cycle() {
        let buses = (1..=3).map(|id| BusRecord::new(id, 0.0, 0.0)).collect();
        let branches = vec![
            BranchRecord::new(1, 2, 0.1, 0.1),
            BranchRecord::new(2, 3, 0.1, 0.1),
            BranchRecord::new(3, 1, 0.1, 0.1),
        ];
        let err = FeederNetwork::new(buses, branches, 1, PerUnitBase::new(1.0, 1.0).unwrap())
            .unwrap_err();
        match err {
            GridError::Cycle(ids) => assert_eq!(ids, vec![1, 2, 3]),
            other => panic!("expected cycle, got {other}"),
        }
    }

    #[test]
    fn disconnected_buses_listed() {
        let buses = (1..=4).map(|id| BusRecord::new(id, 0.0, 0.0)).collect();
        let branches = vec![
            BranchRecord::new(1, 2, 0.1, 0.1),
            BranchRecord::new(3, 4, 0.1, 0.1),
        ];
        let err = FeederNetwork::new(buses, branches, 1, PerUnitBase::new(1.0, 1.0).unwrap())
            .unwrap_err();
        assert!(matches!(err, GridError::Disconnected(ids) if ids == vec![3, 4]));
    }

    #[test]
    fn parallel_branches_are_a_cycle() {
        let buses = (1..=2).map(|id| BusRecord::new(id, 0.0, 0.0)).collect();
        let branches = vec![
            BranchRecord::new(1, 2, 0.1, 0.1),
            BranchRecord::new(2, 1, 0.2, 0.1),
        ];
        let err = FeederNetwork::new(buses, branches, 1, PerUnitBase::new(1.0, 1.0).unwrap())
            .unwrap_err();
        assert!(matches!(err, GridError::Cycle(ids) if ids == vec![1, 2]));
    }

    #[test]
    fn reversed_branch_orientation_is_accepted() {
        let buses = (1..=3).map(|id| BusRecord::new(id, 1.0, 0.0)).collect();
        let branches = vec![
            BranchRecord::new(2, 1, 0.1, 0.1),
            BranchRecord::new(3, 2, 0.1, 0.1),
        ];
        let net =
            FeederNetwork::new(buses, branches, 1, PerUnitBase::new(1.0, 1.0).unwrap()).unwrap();
        assert_eq!(net.parent_of(3), Some(2));
    }

    #[test]
    fn parse_errors_carry_location() {
        let cfg = FeederConfig {
            base_kv: 11.0,
            base_mva: 1.0,
            slack_bus: 1,
        };
        let branches = "from,to,r_ohm,x_ohm,i_max_a\n1,2,0.1,0.1,\n";

        let dup = "id,p_load_kw,q_load_kvar,v_min_pu,v_max_pu\n1,0,0,0.95,1.05\n1,1,0,0.95,1.05\n";
        let err = parse_feeder_from_readers(dup.as_bytes(), branches.as_bytes(), cfg).unwrap_err();
        assert!(
            matches!(err, GridError::DuplicateBus { line: 3, id: 1, .. }),
            "{err}"
        );

        let bad =
            "id,p_load_kw,q_load_kvar,v_min_pu,v_max_pu\n1,0,0,0.95,1.05\n2,abc,0,0.95,1.05\n";
        let err = parse_feeder_from_readers(bad.as_bytes(), branches.as_bytes(), cfg).unwrap_err();
        assert!(
            matches!(&err, GridError::Schema { line: 3, field, .. } if field == "p_load_kw"),
            "{err}"
        );

        let ok = "id,p_load_kw,q_load_kvar,v_min_pu,v_max_pu\n1,0,0,0.95,1.05\n2,1,0,0.95,1.05\n";
        let dangling = "from,to,r_ohm,x_ohm,i_max_a\n1,7,0.1,0.1,\n";
        let err = parse_feeder_from_readers(ok.as_bytes(), dangling.as_bytes(), cfg).unwrap_err();
        assert!(
            matches!(&err, GridError::DanglingEndpoint { line: 2, bus: 7, field, .. } if field == "to"),
            "{err}"
        );

        let no_slack = FeederConfig {
            slack_bus: 9,
            ..cfg
        };
        let err =
            parse_feeder_from_readers(ok.as_bytes(), branches.as_bytes(), no_slack).unwrap_err();
        assert!(matches!(err, GridError::MissingSlack(9)));

        let missing_col = "id,p_load_kw,q_load_kvar,v_min_pu\n1,0,0,0.95\n";
        let err = parse_feeder_from_readers(missing_col.as_bytes(), branches.as_bytes(), cfg)
            .unwrap_err();
        assert!(matches!(&err, GridError::Schema { field, .. } if field == "v_max_pu"));
    }

    #[test]
    fn zip_override_columns() {
        let buses = "id,p_load_kw,q_load_kvar,v_min_pu,v_max_pu,z_p,i_p,p_p,z_q,i_q,p_q\n\
                     1,0,0,0.95,1.05,,,,,,\n\
                     2,10,5,0.95,1.05,1,0,0,0,0,1\n";
        let branches = "from,to,r_ohm,x_ohm,i_max_a\n1,2,0.1,0.1,200\n";
        let cfg = FeederConfig {
            base_kv: 11.0,
            base_mva: 1.0,
            slack_bus: 1,
        };
        let net = parse_feeder_from_readers(buses.as_bytes(), branches.as_bytes(), cfg).unwrap();
        assert!(net.buses()[0].zip.is_none());
        assert_eq!(net.buses()[1].zip.unwrap().z_p, 1.0);
        assert_eq!(net.branches()[0].i_max, Some(200.0));
    }

    #[test]
    fn per_unit_conversion() {
        let net = ieee33().unwrap();
        let pu = net.to_per_unit().unwrap();
        let z_base = 12.66f64 * 12.66 / 10.0;
        assert!((z_base - 16.02756).abs() < 1e-5);
        assert!((pu.branches()[0].r - 0.0922 / z_base).abs() < 1e-15);
        assert!((pu.branches()[0].r - 0.005753).abs() < 1e-6);
        // 100 kW at 10 MVA
        assert!((pu.bus(2).unwrap().p_load - 0.01).abs() < 1e-15);
        assert!(matches!(pu.to_per_unit(), Err(GridError::AlreadyPerUnit)));
        assert!(matches!(net.to_physical(), Err(GridError::NotPerUnit)));
    }

    #[test]
    fn zero_resistance_maps_to_zero() {
        let buses = (1..=2).map(|id| BusRecord::new(id, 1.0, 0.0)).collect();
        let mut br = BranchRecord::new(1, 2, 0.0, 0.3);
        br.i_max = Some(100.0);
        let net =
            FeederNetwork::new(buses, vec![br], 1, PerUnitBase::new(11.0, 1.0).unwrap()).unwrap();
        let pu = net.to_per_unit().unwrap();
        assert_eq!(pu.branches()[0].r, 0.0);
        let i_base_a = 1000.0 / (3f64.sqrt() * 11.0);
        assert!((pu.branches()[0].i_max.unwrap() - 100.0 / i_base_a).abs() < 1e-12);
    }

    #[test]
    fn invalid_records_rejected() {
        let base = PerUnitBase::new(1.0, 1.0).unwrap();
        let buses = || {
            (1..=2)
                .map(|id| BusRecord::new(id, 1.0, 0.0))
                .collect::<Vec<_>>()
        };
        let err = FeederNetwork::new(buses(), vec![BranchRecord::new(1, 2, 0.0, 0.0)], 1, base)
            .unwrap_err();
        assert!(matches!(err, GridError::Schema { .. }));
        let err = FeederNetwork::new(buses(), vec![BranchRecord::new(1, 2, -0.1, 0.1)], 1, base)
            .unwrap_err();
        assert!(matches!(err, GridError::Schema { .. }));
        let mut b = buses();
        b[1].v_max = 0.9;
        let err =
            FeederNetwork::new(b, vec![BranchRecord::new(1, 2, 0.1, 0.1)], 1, base).unwrap_err();
        assert!(matches!(&err, GridError::Schema { field, .. } if field == "v_max_pu"));
        assert!(PerUnitBase::new(0.0, 1.0).is_err());
    }

    #[test]
    fn scaled_load_copy() {
        let net = chain(3);
        let scaled = net.with_scaled_load(2, 1.5).unwrap();
        assert_eq!(scaled.bus(2).unwrap().p_load, 15.0);
        assert_eq!(scaled.bus(3).unwrap().p_load, 10.0);
        assert_eq!(net.bus(2).unwrap().p_load, 10.0);
    }
}
