//! Invariant checks shared by the property tests and the acceptance suite.
//! Each returns `Err` with a description of the first violation.

#![allow(dead_code, clippy::neg_cmp_op_on_partial_ord)]

use gridloss::acpf::{Injection, SweepOptions, backward_forward_sweep};
use gridloss::conic::{
    BnbOptions, ConicSolution, SolverOptions, enumerate_subsets, solve_continuous, solve_mixed,
};
use gridloss::distflow::{
    BuildOptions, DgConfig, DgSchedule, DistflowModel, build_stage1, build_stage2,
    extract_dispatch, extract_placement,
};
use gridloss::grid::{
    BranchRecord, BusRecord, FeederNetwork, PerUnitBase, parse_feeder_from_readers,
};
use gridloss::load::{ZipCoefficients, ZipWeights, linearize_to_zp, zip_power, zp_power};
use num_complex::Complex64;
use proptest::prelude::*;
use proptest::test_runner::RngSeed;
use std::time::{Duration, Instant};

pub type Check = Result<(), String>;

macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err(format!($($arg)+));
        }
    };
}

/// Fixed-seed proptest configuration; no regression files.
pub fn config(cases: u32) -> ProptestConfig {
    ProptestConfig {
        cases,
        rng_seed: RngSeed::Fixed(0x6772_6964),
        failure_persistence: None,
        ..ProptestConfig::default()
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

/// Radial feeder with bus `k + 2` hanging off bus `parents[k] + 1`.
pub fn tree_feeder(parents: &[usize], loads: &[(f64, f64)], imp: &[(f64, f64)]) -> FeederNetwork {
    let mut buses = vec![BusRecord::new(1, 0.0, 0.0)];
    let mut branches = Vec::new();
    for (k, &p) in parents.iter().enumerate() {
        let mut b = BusRecord::new(k + 2, loads[k].0, loads[k].1);
        b.v_min = 0.8;
        b.v_max = 1.2;
        buses.push(b);
        branches.push(BranchRecord::new(p + 1, k + 2, imp[k].0, imp[k].1));
    }
    buses[0].v_min = 0.8;
    buses[0].v_max = 1.2;
    FeederNetwork::new(buses, branches, 1, PerUnitBase::new(11.0, 1.0).unwrap()).unwrap()
}

/// Small random radial feeders in physical units: 11 kV, 1 MVA base.
pub fn arb_feeder(max_buses: usize) -> impl Strategy<Value = FeederNetwork> {
    (2..=max_buses)
        .prop_flat_map(|n| {
            let parents: Vec<_> = (0..n - 1).map(|k| 0..=k).collect();
            (
                parents,
                prop::collection::vec((0.0..300.0f64, -50.0..150.0f64), n - 1),
                prop::collection::vec((0.05..1.5f64, 0.05..1.5f64), n - 1),
            )
        })
        .prop_map(|(p, l, z)| tree_feeder(&p, &l, &z))
}

/// ZIP mixes with nonnegative weights on both channels.
pub fn arb_zip() -> impl Strategy<Value = ZipCoefficients> {
    let channel = (0.0..1.0f64, 0.0..1.0f64).prop_map(|(a, b)| {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        (lo, hi - lo, 1.0 - hi)
    });
    (channel.clone(), channel).prop_map(|((z_p, i_p, p_p), (z_q, i_q, p_q))| ZipCoefficients {
        z_p,
        i_p,
        p_p,
        z_q,
        i_q,
        p_q,
    })
}

pub fn check_round_trip(net: &FeederNetwork) -> Check {
    let mut buses = Vec::new();
    let mut branches = Vec::new();
    net.write_buses_csv(&mut buses).map_err(|e| e.to_string())?;
    net.write_branches_csv(&mut branches)
        .map_err(|e| e.to_string())?;
    let back = parse_feeder_from_readers(&buses[..], &branches[..], net.feeder_config())
        .map_err(|e| e.to_string())?;
    ensure!(
        back.buses() == net.buses(),
        "bus records differ after round trip"
    );
    ensure!(
        back.branches() == net.branches(),
        "branch records differ after round trip"
    );
    ensure!(
        back.feeder_config() == net.feeder_config(),
        "feeder config differs"
    );
    ensure!(back == *net, "networks differ after round trip");
    Ok(())
}

pub fn check_per_unit(net: &FeederNetwork) -> Check {
    let back = net
        .to_per_unit()
        .and_then(|pu| pu.to_physical())
        .map_err(|e| e.to_string())?;
    let close = |a: f64, b: f64| a == b || rel(a, b) <= 1e-12;
    for (a, b) in net.buses().iter().zip(back.buses()) {
        ensure!(
            close(a.p_load, b.p_load) && close(a.q_load, b.q_load),
            "bus {}: load {} {} -> {} {}",
            a.id,
            a.p_load,
            a.q_load,
            b.p_load,
            b.q_load
        );
    }
    for (a, b) in net.branches().iter().zip(back.branches()) {
        ensure!(
            close(a.r, b.r) && close(a.x, b.x),
            "branch {}-{}: impedance changed",
            a.from_bus,
            a.to_bus
        );
        match (a.i_max, b.i_max) {
            (Some(x), Some(y)) => ensure!(close(x, y), "branch {}-{}: i_max", a.from_bus, a.to_bus),
            (None, None) => {}
            _ => return Err("i_max presence changed".into()),
        }
    }
    Ok(())
}

pub fn check_tree(net: &FeederNetwork) -> Check {
    let n = net.buses().len();
    ensure!(
        net.branches().len() == n - 1,
        "{} branches for {n} buses",
        net.branches().len()
    );
    let mut seen = vec![false; n];
    let mut stack = vec![net.slack_index()];
    while let Some(k) = stack.pop() {
        ensure!(!seen[k], "bus position {k} reached twice");
        seen[k] = true;
        stack.extend(net.topology().children(k));
    }
    ensure!(
        seen.iter().all(|&s| s),
        "some bus is unreachable from the slack"
    );
    Ok(())
}

fn weights(z: &ZipCoefficients) -> (ZipWeights, ZipWeights) {
    (z.active(), z.reactive())
}

/// Exactness at nominal voltage and the ZP error bound on a dense grid over
/// [0.95, 1.05].
pub fn check_zp_bound(zip: &ZipCoefficients) -> Check {
    let zp = linearize_to_zp(zip).map_err(|e| e.to_string())?;
    let (wp, wq) = weights(zip);
    for (w, a, b) in [(wp, zp.alpha_p, zp.beta_p), (wq, zp.alpha_q, zp.beta_q)] {
        let nominal = zip_power(1.0, w, 1.0).map_err(|e| e.to_string())?;
        ensure!(
            (zp_power(1.0, a, b, 1.0) - 1.0).abs() <= 1e-12,
            "ZP is not exact at 1 p.u."
        );
        ensure!((nominal - 1.0).abs() <= 1e-12, "ZIP is not exact at 1 p.u.");
        for k in 0..=1000 {
            let v = 0.95 + 0.1 * k as f64 / 1000.0;
            let exact = zip_power(1.0, w, v).map_err(|e| e.to_string())?;
            let err = (zp_power(1.0, a, b, v * v) - exact).abs();
            ensure!(err <= 0.005, "ZP error {err:.3e} at |V| = {v}");
        }
    }
    Ok(())
}

/// Finite-difference slope of the ZP demand is the same everywhere.
pub fn check_affinity(zip: &ZipCoefficients, p0: f64) -> Check {
    let zp = linearize_to_zp(zip).map_err(|e| e.to_string())?;
    let f = |v_sq: f64| zp.active_power(p0, v_sq);
    let slope = |a: f64, b: f64| (f(b) - f(a)) / (b - a);
    let s0 = slope(0.8, 0.9);
    for (a, b) in [(0.9, 1.0), (1.0, 1.1), (1.1, 1.21), (0.81, 1.2)] {
        let s = slope(a, b);
        ensure!(
            (s - s0).abs() <= 1e-9 * (1.0 + s0.abs()),
            "slope {s} on [{a}, {b}] against {s0}"
        );
    }
    Ok(())
}

/// Slack injection equals demand plus losses minus generation.
pub fn check_energy_balance(
    net: &FeederNetwork,
    zip: &ZipCoefficients,
    injections: &[Injection],
) -> Check {
    let pf = backward_forward_sweep(net, injections, zip, &SweepOptions::default())
        .map_err(|e| e.to_string())?;
    ensure!(pf.converged, "sweep did not converge");
    let demand: Complex64 = pf.load.iter().sum();
    let generation: Complex64 = injections.iter().map(|i| i.power).sum();
    let losses = net
        .branches()
        .iter()
        .zip(&pf.branch_current)
        .map(|(b, i)| Complex64::new(b.r, b.x) * i.norm_sqr())
        .sum::<Complex64>();
    let slack = pf.slack_injection(net);
    let miss = slack - (demand + losses - generation);
    ensure!(
        miss.norm() <= 1e-8,
        "energy balance off by {:.3e} p.u.",
        miss.norm()
    );
    ensure!(
        (pf.total_losses_pu - losses.re).abs() <= 1e-12 * (1.0 + losses.re),
        "reported losses differ from Σ|I|²r"
    );
    Ok(())
}

/// Sweep voltages satisfy the DistFlow voltage-drop equation branch by branch
/// when loads are constant power.
pub fn check_voltage_drop_identity(net: &FeederNetwork) -> Check {
    let pf = backward_forward_sweep(
        net,
        &[],
        &ZipCoefficients::constant_power(),
        &SweepOptions::default(),
    )
    .map_err(|e| e.to_string())?;
    ensure!(pf.converged, "sweep did not converge");
    let topo = net.topology();
    for &j in topo.order() {
        let (Some(i), Some(k)) = (topo.parent(j), topo.parent_branch(j)) else {
            continue;
        };
        let br = &net.branches()[k];
        let s = pf.branch_flow[k];
        let v_i = pf.v[i].norm_sqr();
        let v_j = pf.v[j].norm_sqr();
        let l = pf.branch_current[k].norm_sqr();
        let rhs = v_i - 2.0 * (br.r * s.re + br.x * s.im) + (br.r * br.r + br.x * br.x) * l;
        ensure!(
            (v_j - rhs).abs() <= 1e-10,
            "branch {}-{}: residual {:.3e}",
            br.from_bus,
            br.to_bus,
            (v_j - rhs).abs()
        );
    }
    Ok(())
}

/// Without DG and with nonnegative loads |V| never rises going downstream.
pub fn check_voltage_ordering(net: &FeederNetwork, zip: &ZipCoefficients) -> Check {
    let pf = backward_forward_sweep(net, &[], zip, &SweepOptions::default())
        .map_err(|e| e.to_string())?;
    let topo = net.topology();
    for &j in topo.order() {
        if let Some(i) = topo.parent(j) {
            ensure!(
                pf.v[j].norm() <= pf.v[i].norm() + 1e-12,
                "|V| rises from position {i} to {j}"
            );
        }
    }
    Ok(())
}

fn same_bits(a: &ConicSolution, b: &ConicSolution) -> bool {
    a.status == b.status
        && a.objective_value.to_bits() == b.objective_value.to_bits()
        && a.values
            .iter()
            .zip(&b.values)
            .all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Balance rows, DG capacity and the voltage window at a solution.
pub fn check_solution_feasible(
    model: &DistflowModel,
    sol: &ConicSolution,
    dg: &DgConfig,
    voltage_window: bool,
) -> Check {
    let x = &sol.values;
    for (k, row) in model.problem.equalities().iter().enumerate() {
        let lhs: f64 = row.terms.iter().map(|&(v, c)| c * x[v.index()]).sum();
        ensure!(
            (lhs - row.rhs).abs() <= 1e-8,
            "equality row {k} off by {:.3e} p.u.",
            (lhs - row.rhs).abs()
        );
    }
    for d in &model.dgs {
        let p = sol.value(d.p);
        let q = d.q.map(|q| sol.value(q)).unwrap_or(0.0);
        ensure!(
            p * p + q * q <= dg.s_dg_max * dg.s_dg_max + 1e-9,
            "DG at position {} exceeds capacity",
            d.bus_index
        );
    }
    if voltage_window {
        for (bus, &v) in model.network().buses().iter().zip(&model.v_sq) {
            let v_sq = sol.value(v);
            ensure!(
                v_sq >= bus.v_min * bus.v_min - 1e-9 && v_sq <= bus.v_max * bus.v_max + 1e-9,
                "bus {}: v² = {v_sq} outside the window",
                bus.id
            );
        }
    }
    Ok(())
}

pub struct Stage1Check {
    pub buses: Vec<usize>,
    pub stage1_kw: f64,
    pub stage2_kw: f64,
}

/// Stage 1 then Stage 2 on a per-unit network: feasibility of both,
/// relaxation bound, stage ordering and bitwise determinism.
pub fn check_two_stage(
    net: &FeederNetwork,
    zip: &ZipCoefficients,
    dg: &DgConfig,
) -> Result<Stage1Check, String> {
    let opts = BuildOptions::default();
    let model = build_stage1(net, zip, dg, &opts).map_err(|e| e.to_string())?;
    let bnb = BnbOptions::default();
    let run = solve_mixed(&model.problem, &bnb).map_err(|e| e.to_string())?;
    ensure!(
        run.solution.is_optimal(),
        "stage 1: {:?}",
        run.solution.status
    );
    let again = solve_mixed(&model.problem, &bnb).map_err(|e| e.to_string())?;
    ensure!(
        same_bits(&run.solution, &again.solution),
        "stage 1 is not deterministic"
    );
    ensure!(
        run.stats.root_bound
            <= run.solution.objective_value + 1e-7 * run.solution.objective_value.abs() + 1e-9,
        "relaxation bound {} above the optimum {}",
        run.stats.root_bound,
        run.solution.objective_value
    );
    check_solution_feasible(&model, &run.solution, dg, true)?;
    let placement = extract_placement(&run.solution, &model).map_err(|e| e.to_string())?;
    ensure!(
        placement.dgs.len() == dg.n_dg,
        "placement has {} units",
        placement.dgs.len()
    );
    ensure!(placement.predicted_losses_kw >= 0.0, "negative losses");

    let m2 = build_stage2(net, zip, &placement, dg, &opts).map_err(|e| e.to_string())?;
    let s2 = solve_continuous(&m2.problem, &SolverOptions::default()).map_err(|e| e.to_string())?;
    ensure!(s2.is_optimal(), "stage 2: {:?} {:?}", s2.status, s2.message);
    check_solution_feasible(&m2, &s2, dg, true)?;
    let dispatch = extract_dispatch(&s2, &m2).map_err(|e| e.to_string())?;
    let (l1, l2) = (
        placement.predicted_losses_kw,
        dispatch.predicted_losses_kw(),
    );
    ensure!(
        l2 <= l1 * (1.0 + 1e-7) + 1e-9,
        "stage 2 losses {l2} above stage 1 {l1}"
    );
    Ok(Stage1Check {
        buses: placement.dg_buses(),
        stage1_kw: l1,
        stage2_kw: l2,
    })
}

/// Branch-and-bound and exhaustive enumeration pick the same set with
/// objectives within 1e-7 relative. Returns the enumeration's solve count.
pub fn check_bnb_matches_enumeration(
    net: &FeederNetwork,
    zip: &ZipCoefficients,
    dg: &DgConfig,
) -> Result<(usize, Duration), String> {
    check_bnb_matches_enumeration_with(net, zip, dg, &BuildOptions::default())
}

/// Returns the number of enumerated solves and the enumeration time.
pub fn check_bnb_matches_enumeration_with(
    net: &FeederNetwork,
    zip: &ZipCoefficients,
    dg: &DgConfig,
    opts: &BuildOptions,
) -> Result<(usize, Duration), String> {
    let model = build_stage1(net, zip, dg, opts).map_err(|e| e.to_string())?;
    let bnb = solve_mixed(&model.problem, &BnbOptions::default()).map_err(|e| e.to_string())?;
    ensure!(
        bnb.solution.is_optimal(),
        "branch-and-bound: {:?}",
        bnb.solution.status
    );
    let placed = extract_placement(&bnb.solution, &model).map_err(|e| e.to_string())?;
    let start = Instant::now();
    let en = enumerate_subsets(
        |s| model.with_fixed_placement(s),
        model.dgs.len(),
        dg.n_dg,
        10_000,
        &SolverOptions::default(),
    )
    .map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let ids = model.dg_bus_ids();
    let en_buses: Vec<usize> = en.subset.iter().map(|&k| ids[k]).collect();
    let (a, b) = (bnb.solution.objective_value, en.solution.objective_value);
    ensure!(rel(a, b) <= 1e-7, "objectives {a} and {b} differ");
    ensure!(
        placed.dg_buses() == en_buses,
        "branch-and-bound chose {:?}, enumeration {:?}",
        placed.dg_buses(),
        en_buses
    );
    Ok((en.solves, elapsed))
}

/// Independent power-flow oracle: direct load flow on the dense matrix
/// `D[j][m] = Σ z_b` over branches shared by the slack paths of `j` and `m`,
/// iterating `V = V0 − D·I(V)`. ZIP demand is evaluated here from the raw
/// weights. Returns voltages per bus position, losses in p.u. and iterations.
pub fn dlf_power_flow(
    net: &FeederNetwork,
    zip: &ZipCoefficients,
    injections: &[Injection],
    v0: f64,
) -> (Vec<Complex64>, f64, usize) {
    let n = net.buses().len();
    let topo = net.topology();
    let paths: Vec<Vec<usize>> = (0..n)
        .map(|j| {
            let mut path = Vec::new();
            let mut k = j;
            while let (Some(p), Some(b)) = (topo.parent(k), topo.parent_branch(k)) {
                path.push(b);
                k = p;
            }
            path
        })
        .collect();
    let z: Vec<Complex64> = net
        .branches()
        .iter()
        .map(|b| Complex64::new(b.r, b.x))
        .collect();
    let mut d = vec![vec![Complex64::new(0.0, 0.0); n]; n];
    for j in 0..n {
        for m in 0..n {
            d[j][m] = paths[j]
                .iter()
                .filter(|b| paths[m].contains(b))
                .map(|&b| z[b])
                .sum();
        }
    }
    let mut generation = vec![Complex64::new(0.0, 0.0); n];
    for inj in injections {
        generation[net.index_of(inj.bus).unwrap()] += inj.power;
    }
    let demand = |k: usize, vm: f64| {
        let b = &net.buses()[k];
        let w = |z: f64, i: f64, p: f64| z * vm * vm + i * vm + p;
        Complex64::new(
            b.p_load * w(zip.z_p, zip.i_p, zip.p_p),
            b.q_load * w(zip.z_q, zip.i_q, zip.p_q),
        )
    };
    let mut v = vec![Complex64::new(v0, 0.0); n];
    let mut current = vec![Complex64::new(0.0, 0.0); n];
    let mut iterations = 0;
    loop {
        iterations += 1;
        for k in 0..n {
            current[k] = ((demand(k, v[k].norm()) - generation[k]) / v[k]).conj();
        }
        let mut change: f64 = 0.0;
        let next: Vec<Complex64> = (0..n)
            .map(|j| {
                Complex64::new(v0, 0.0) - (0..n).map(|m| d[j][m] * current[m]).sum::<Complex64>()
            })
            .collect();
        for j in 0..n {
            change = change.max((next[j] - v[j]).norm());
        }
        v = next;
        if change < 1e-13 || iterations >= 500 {
            break;
        }
    }
    for k in 0..n {
        current[k] = ((demand(k, v[k].norm()) - generation[k]) / v[k]).conj();
    }
    let losses = net
        .branches()
        .iter()
        .enumerate()
        .map(|(b, br)| {
            let i: Complex64 = (0..n)
                .filter(|&m| paths[m].contains(&b))
                .map(|m| current[m])
                .sum();
            br.r * i.norm_sqr()
        })
        .sum();
    (v, losses, iterations)
}

/// The sweep and the direct load-flow oracle agree on voltages and losses.
pub fn check_sweep_matches_oracle(
    net: &FeederNetwork,
    zip: &ZipCoefficients,
    injections: &[Injection],
) -> Check {
    let pf = backward_forward_sweep(net, injections, zip, &SweepOptions::default())
        .map_err(|e| e.to_string())?;
    ensure!(pf.converged, "sweep did not converge");
    let (v, losses, _) = dlf_power_flow(net, zip, injections, 1.0);
    for (k, (a, b)) in pf.v.iter().zip(&v).enumerate() {
        ensure!(
            (a - b).norm() <= 1e-8,
            "voltage at position {k}: {a} vs oracle {b}"
        );
    }
    ensure!(
        (pf.total_losses_pu - losses).abs() <= 1e-8 * (1.0 + losses),
        "losses {} vs oracle {losses}",
        pf.total_losses_pu
    );
    Ok(())
}

/// Sweep invariants on a physical feeder with DG injections `(p, q)` in p.u.
/// spread over the non-slack buses.
pub fn check_sweep_case(net: &FeederNetwork, zip: &ZipCoefficients, dgs: &[(f64, f64)]) -> Check {
    let pu = net.to_per_unit().map_err(|e| e.to_string())?;
    let n = pu.buses().len();
    let injections: Vec<Injection> = dgs
        .iter()
        .enumerate()
        .map(|(k, &(p, q))| Injection {
            bus: pu.buses()[1 + k % (n - 1)].id,
            power: Complex64::new(p, q),
        })
        .collect();
    check_energy_balance(&pu, zip, &injections)?;
    check_sweep_matches_oracle(&pu, zip, &injections)?;
    check_voltage_drop_identity(&pu)?;
    if pu
        .buses()
        .iter()
        .all(|b| b.p_load >= 0.0 && b.q_load >= 0.0)
    {
        check_voltage_ordering(&pu, zip)?;
    }
    Ok(())
}
