use std::cmp::Ordering;
use std::collections::BinaryHeap;

use itertools::Itertools;
use serde::{Deserialize, Serialize};

use super::continuous::solve_continuous;
use super::{ConicError, ConicProblem, ConicSolution, SolveStatus, SolverOptions, VarId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branching {
    /// Branch on the binary closest to 0.5; ties go to the lowest index.
    #[default]
    MostFractional,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BnbOptions {
    pub rel_gap: f64,
    pub max_nodes: usize,
    pub branching: Branching,
    /// Distance from {0, 1} below which a relaxed binary counts as integral.
    pub integrality_tol: f64,
    pub solver: SolverOptions,
}

impl Default for BnbOptions {
    fn default() -> Self {
        Self {
            rel_gap: 1e-6,
            max_nodes: 200_000,
            branching: Branching::MostFractional,
            integrality_tol: 1e-6,
            solver: SolverOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BnbStats {
    /// Relaxations solved, including the root and incumbent polishing.
    pub nodes: usize,
    pub root_bound: f64,
    /// Smallest bound among unexplored nodes at termination (incumbent value
    /// when the tree was exhausted).
    pub best_bound: f64,
    /// `(incumbent − best_bound) / |incumbent|`.
    pub gap: f64,
    pub budget_exhausted: bool,
    pub incumbent_updates: usize,
    /// Node relaxations that stopped short of the tolerances.
    pub inexact_nodes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixedSolution {
    pub solution: ConicSolution,
    pub stats: BnbStats,
}

struct Node {
    bound: f64,
    id: usize,
    fixings: Vec<(usize, f64)>,
}

// Min-heap on (bound, creation order).
impl Ord for Node {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .bound
            .total_cmp(&self.bound)
            .then_with(|| other.id.cmp(&self.id))
    }
}

impl PartialOrd for Node {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl PartialEq for Node {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Node {}

struct Incumbent {
    solution: ConicSolution,
    /// Indices (into the binary list) set to one.
    ones: Vec<usize>,
}

fn tie_tol(obj: f64) -> f64 {
    1e-9 * obj.abs() + 1e-15
}

/// Strictly better objective, or an objective tie broken by the
/// lexicographically smaller set of active binaries.
fn improves(obj: f64, ones: &[usize], inc: Option<&Incumbent>) -> bool {
    match inc {
        None => true,
        Some(inc) => {
            let best = inc.solution.objective_value;
            if obj < best - tie_tol(best) {
                true
            } else if obj <= best + tie_tol(best) {
                ones < inc.ones.as_slice()
            } else {
                false
            }
        }
    }
}

/// Right-hand side of an equality whose terms are exactly the binaries with
/// unit coefficients (a cardinality constraint), if the model has one.
fn cardinality(problem: &ConicProblem) -> Option<usize> {
    let mut bins: Vec<usize> = problem.binaries().iter().map(|b| b.0).collect();
    bins.sort_unstable();
    problem.equalities().iter().find_map(|row| {
        if row.terms.len() != bins.len() || row.terms.iter().any(|&(_, c)| c != 1.0) {
            return None;
        }
        let mut cols: Vec<usize> = row.terms.iter().map(|(v, _)| v.0).collect();
        cols.sort_unstable();
        (cols == bins).then(|| row.rhs.round().max(0.0) as usize)
    })
}

fn with_fixings(problem: &ConicProblem, fixings: &[(usize, f64)]) -> ConicProblem {
    let mut p = problem.clone();
    let bins = problem.binaries();
    for &(k, value) in fixings {
        p.fix(bins[k], value);
    }
    p
}

/// Solves `problem` with every binary fixed to `ones`/zero.
fn solve_fixed(
    problem: &ConicProblem,
    ones: &[usize],
    opts: &SolverOptions,
) -> Result<ConicSolution, ConicError> {
    let fixings: Vec<(usize, f64)> = (0..problem.binaries().len())
        .map(|k| (k, if ones.contains(&k) { 1.0 } else { 0.0 }))
        .collect();
    solve_continuous(&with_fixings(problem, &fixings), opts)
}

fn is_integral(values: &[f64], bins: &[VarId], tol: f64) -> bool {
    bins.iter()
        .all(|b| values[b.0].abs() <= tol || (values[b.0] - 1.0).abs() <= tol)
}

fn rounded_ones(values: &[f64], bins: &[VarId]) -> Vec<usize> {
    (0..bins.len())
        .filter(|&k| values[bins[k].0] > 0.5)
        .collect()
}

/// Branch-and-bound over the binaries of `problem` with best-bound node
/// selection (ties by creation order).
///
/// Every incumbent is re-solved with all binaries fixed, so its values and
/// objective match a direct solve of that fixed problem exactly.
pub fn solve_mixed(problem: &ConicProblem, opts: &BnbOptions) -> Result<MixedSolution, ConicError> {
    problem.validate()?;
    let bins = problem.binaries().to_vec();
    if bins.is_empty() {
        return Err(ConicError::NoBinaries);
    }
    let mut stats = BnbStats::default();
    let mut incumbent: Option<Incumbent> = None;

    let root = solve_continuous(problem, &opts.solver)?;
    stats.nodes += 1;
    match root.status {
        SolveStatus::Infeasible | SolveStatus::Unbounded => {
            stats.root_bound = if root.status == SolveStatus::Unbounded {
                f64::NEG_INFINITY
            } else {
                f64::INFINITY
            };
            stats.best_bound = stats.root_bound;
            return Ok(MixedSolution {
                solution: root,
                stats,
            });
        }
        SolveStatus::ToleranceNotMet => stats.inexact_nodes += 1,
        SolveStatus::Optimal => {}
    }
    stats.root_bound = root.objective_value;

    // Rounding heuristic: the k largest relaxed binaries.
    if let Some(k) = cardinality(problem) {
        let mut order: Vec<usize> = (0..bins.len()).collect();
        order.sort_by(|&a, &b| {
            root.values[bins[b].0]
                .total_cmp(&root.values[bins[a].0])
                .then(a.cmp(&b))
        });
        let mut ones: Vec<usize> = order.into_iter().take(k).collect();
        ones.sort_unstable();
        let sol = solve_fixed(problem, &ones, &opts.solver)?;
        stats.nodes += 1;
        if sol.is_optimal() {
            stats.incumbent_updates += 1;
            incumbent = Some(Incumbent {
                solution: sol,
                ones,
            });
        }
    }

    let mut next_id = 0usize;
    let mut heap = BinaryHeap::new();
    heap.push(Node {
        bound: root.objective_value,
        id: next_id,
        fixings: Vec::new(),
    });
    next_id += 1;
    let mut root_solution = Some(root);

    let pruned = |bound: f64, inc: &Option<Incumbent>| match inc {
        Some(inc) => {
            let best = inc.solution.objective_value;
            bound >= best - opts.rel_gap * best.abs()
        }
        None => false,
    };

    while let Some(node) = heap.pop() {
        if pruned(node.bound, &incumbent) {
            heap.clear();
            break;
        }
        if stats.nodes >= opts.max_nodes {
            stats.budget_exhausted = true;
            heap.push(node);
            break;
        }
        let relaxed = match root_solution.take() {
            Some(s) => s,
            None => {
                stats.nodes += 1;
                solve_continuous(&with_fixings(problem, &node.fixings), &opts.solver)?
            }
        };
        let bound = match relaxed.status {
            SolveStatus::Infeasible | SolveStatus::Unbounded => continue,
            SolveStatus::ToleranceNotMet => {
                stats.inexact_nodes += 1;
                node.bound
            }
            SolveStatus::Optimal => relaxed.objective_value.max(node.bound),
        };
        if pruned(bound, &incumbent) {
            continue;
        }

        if is_integral(&relaxed.values, &bins, opts.integrality_tol) {
            let ones = rounded_ones(&relaxed.values, &bins);
            let polished = solve_fixed(problem, &ones, &opts.solver)?;
            stats.nodes += 1;
            if polished.is_optimal()
                && improves(polished.objective_value, &ones, incumbent.as_ref())
            {
                stats.incumbent_updates += 1;
                incumbent = Some(Incumbent {
                    solution: polished,
                    ones,
                });
            }
            continue;
        }

        let branch = match opts.branching {
            Branching::MostFractional => most_fractional(&relaxed.values, &bins, &node.fixings),
        };
        let Some(k) = branch else { continue };
        for value in [1.0, 0.0] {
            let mut fixings = node.fixings.clone();
            fixings.push((k, value));
            heap.push(Node {
                bound,
                id: next_id,
                fixings,
            });
            next_id += 1;
        }
    }

    let open_bound = heap.iter().map(|n| n.bound).fold(f64::INFINITY, f64::min);
    match incumbent {
        Some(inc) => {
            let best = inc.solution.objective_value;
            stats.best_bound = open_bound.min(best);
            stats.gap = ((best - stats.best_bound) / best.abs().max(f64::MIN_POSITIVE)).max(0.0);
            let mut solution = inc.solution;
            if stats.budget_exhausted && stats.gap > opts.rel_gap {
                solution.status = SolveStatus::ToleranceNotMet;
                solution.message = Some(format!(
                    "node budget exhausted with relative gap {:.3e}",
                    stats.gap
                ));
            }
            Ok(MixedSolution { solution, stats })
        }
        None => {
            stats.best_bound = open_bound;
            stats.gap = f64::INFINITY;
            let status = if stats.budget_exhausted {
                SolveStatus::ToleranceNotMet
            } else {
                SolveStatus::Infeasible
            };
            Ok(MixedSolution {
                solution: ConicSolution {
                    status,
                    values: vec![f64::NAN; problem.num_vars()],
                    objective_value: f64::NAN,
                    residuals: Default::default(),
                    iterations: 0,
                    message: Some(if stats.budget_exhausted {
                        "node budget exhausted before any integer-feasible point".into()
                    } else {
                        "every branch is infeasible".into()
                    }),
                },
                stats,
            })
        }
    }
}

fn most_fractional(values: &[f64], bins: &[VarId], fixed: &[(usize, f64)]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (k, b) in bins.iter().enumerate() {
        if fixed.iter().any(|&(f, _)| f == k) {
            continue;
        }
        let v = values[b.0];
        let frac = v.min(1.0 - v);
        if frac <= 0.0 {
            continue;
        }
        if best.is_none_or(|(_, f)| frac > f) {
            best = Some((k, frac));
        }
    }
    best.map(|(k, _)| k)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnumerationResult {
    /// Chosen candidate positions, ascending.
    pub subset: Vec<usize>,
    pub solution: ConicSolution,
    /// Number of continuous solves performed.
    pub solves: usize,
}

fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i as u128 + 1))
}

/// Exhaustive search over every `k`-subset of `0..n`: `build(subset)` must
/// return the problem with the placement fixed. Returns the best subset,
/// the lexicographically smallest one on objective ties.
pub fn enumerate_subsets<F>(
    mut build: F,
    n: usize,
    k: usize,
    budget: usize,
    opts: &SolverOptions,
) -> Result<EnumerationResult, ConicError>
where
    F: FnMut(&[usize]) -> ConicProblem,
{
    let needed = binomial(n, k);
    if needed > budget as u128 {
        return Err(ConicError::BudgetExceeded { needed, budget });
    }
    let mut best: Option<(Vec<usize>, ConicSolution)> = None;
    let mut solves = 0;
    for subset in (0..n).combinations(k) {
        let sol = solve_continuous(&build(&subset), opts)?;
        solves += 1;
        if !sol.is_optimal() {
            continue;
        }
        let better = match &best {
            None => true,
            // combinations() is lexicographic, so ties keep the earlier subset
            Some((_, b)) => sol.objective_value < b.objective_value - tie_tol(b.objective_value),
        };
        if better {
            best = Some((subset, sol));
        }
    }
    let (subset, solution) = best.ok_or(ConicError::NoFeasibleSubset)?;
    Ok(EnumerationResult {
        subset,
        solution,
        solves,
    })
}
