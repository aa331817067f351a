use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettingsBuilder, DefaultSolution, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};
use serde::{Deserialize, Serialize};

use super::{ConicError, ConicProblem, ConicSolution, Residuals, SolveStatus};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    /// Scaled primal feasibility tolerance.
    pub tol_feas: f64,
    /// Relative duality-gap tolerance.
    pub tol_gap: f64,
    pub max_iter: u32,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol_feas: 1e-8,
            tol_gap: 1e-8,
            max_iter: 200,
        }
    }
}

/// Constraint rows in the backend's `A x + s = b, s ∈ K` form.
#[derive(Default)]
struct Rows {
    i: Vec<usize>,
    j: Vec<usize>,
    v: Vec<f64>,
    b: Vec<f64>,
}

impl Rows {
    fn push(&mut self, terms: impl IntoIterator<Item = (usize, f64)>, rhs: f64) {
        let row = self.b.len();
        for (col, coef) in terms {
            if coef != 0.0 {
                self.i.push(row);
                self.j.push(col);
                self.v.push(coef);
            }
        }
        self.b.push(rhs);
    }

    fn len(&self) -> usize {
        self.b.len()
    }
}

/// Backend settings tried in order until one meets the tolerances.
struct BackendVariant {
    equilibrate: bool,
    regularization: f64,
}

const BACKEND_VARIANTS: [BackendVariant; 3] = [
    BackendVariant {
        equilibrate: true,
        regularization: 1e-8,
    },
    BackendVariant {
        equilibrate: true,
        regularization: 1e-10,
    },
    BackendVariant {
        equilibrate: false,
        regularization: 1e-8,
    },
];

fn is_certificate(status: SolverStatus) -> bool {
    matches!(
        status,
        SolverStatus::PrimalInfeasible
            | SolverStatus::AlmostPrimalInfeasible
            | SolverStatus::DualInfeasible
            | SolverStatus::AlmostDualInfeasible
    )
}

/// Substitutes fixed variables into `expr`: returns the remaining
/// `(column, coef)` terms and the folded constant.
fn reduce(
    terms: &[(super::VarId, f64)],
    constant: f64,
    column: &[Option<usize>],
    fixed: &[f64],
) -> (Vec<(usize, f64)>, f64) {
    let mut out = Vec::with_capacity(terms.len());
    let mut c = constant;
    for &(v, coef) in terms {
        match column[v.0] {
            Some(col) => out.push((col, coef)),
            None => c += coef * fixed[v.0],
        }
    }
    (out, c)
}

/// Solves the continuous relaxation of `problem` (binaries are treated as
/// continuous variables within their bounds).
///
/// Fixed variables are substituted before the backend sees the problem, and a
/// cone whose bound collapses to the constant zero becomes a set of
/// equalities. The interior-point backend runs at a tenth of the requested
/// tolerances on an objective scaled to unit magnitude; the returned status is
/// `Optimal` only if the residuals recomputed on the original data also meet
/// `opts`.
///
/// When the backend converges with the equalities and bounds met but the
/// cones or the gap still out of tolerance (typical at degenerate optima where
/// a flow and its loss both vanish), the violated cones are tightened by a
/// multiple of their violation and the problem is re-solved, up to
/// [`CONE_RETRIES`] times.
pub fn solve_continuous(
    problem: &ConicProblem,
    opts: &SolverOptions,
) -> Result<ConicSolution, ConicError> {
    problem.validate()?;
    let (mut best, mut converged) = solve_once(problem, opts)?;
    let mut tightened = problem.clone();
    let mut margin = 2.0;
    for _ in 0..CONE_RETRIES {
        let r = &best.residuals;
        let repairable = best.status == SolveStatus::ToleranceNotMet
            && converged
            && r.equality <= opts.tol_feas
            && r.bound <= opts.tol_feas
            && (r.cone > opts.tol_feas || r.gap > opts.tol_gap);
        if !repairable {
            break;
        }
        for (cone, orig) in tightened.cones.iter_mut().zip(problem.cones()) {
            let v = orig.violation(&best.values);
            if v > 0.0 {
                cone.bound.constant -= margin * v;
            }
        }
        let (retry, ok) = solve_once(&tightened, opts)?;
        converged = ok;
        let mut residuals = problem.residuals(&retry.values);
        residuals.gap = retry.residuals.gap;
        let within = residuals.max_primal() <= opts.tol_feas && residuals.gap <= opts.tol_gap;
        best = ConicSolution {
            status: if within && ok {
                SolveStatus::Optimal
            } else {
                SolveStatus::ToleranceNotMet
            },
            objective_value: problem.objective().eval(&retry.values),
            message: (!(within && ok)).then(|| {
                format!("residuals {residuals:?} exceed tolerances after cone tightening")
            }),
            residuals,
            iterations: best.iterations + retry.iterations,
            values: retry.values,
        };
        margin *= 2.0;
    }
    Ok(best)
}

/// Re-solves allowed for cone tightening.
pub const CONE_RETRIES: usize = 3;

/// One backend solve. The flag is true when the backend reached (almost)
/// optimality, whether or not the original residuals meet `opts`.
fn solve_once(
    problem: &ConicProblem,
    opts: &SolverOptions,
) -> Result<(ConicSolution, bool), ConicError> {
    let vars = problem.variables();

    let mut column = vec![None; vars.len()];
    let mut fixed = vec![0.0; vars.len()];
    let mut free = Vec::new();
    for (k, var) in vars.iter().enumerate() {
        if var.lower == var.upper {
            fixed[k] = var.lower;
        } else {
            column[k] = Some(free.len());
            free.push(k);
        }
    }
    let n = free.len();
    if n == 0 {
        return Ok((evaluate_fixed(problem, fixed, opts), true));
    }

    let mut rows = Rows::default();
    let mut cones = Vec::new();
    let mut socs = Vec::new();

    for row in problem.equalities() {
        let (terms, c) = reduce(&row.terms, 0.0, &column, &fixed);
        if terms.is_empty() && (row.rhs - c).abs() <= opts.tol_feas * 0.1 {
            continue;
        }
        rows.push(terms, row.rhs - c);
    }
    for cone in problem.cones() {
        let (bound, d) = reduce(&cone.bound.terms, cone.bound.constant, &column, &fixed);
        let entries: Vec<_> = cone
            .vector
            .iter()
            .map(|e| reduce(&e.terms, e.constant, &column, &fixed))
            .collect();
        if bound.is_empty() && d == 0.0 {
            // ‖u‖ ≤ 0 pins every entry to zero.
            for (terms, c) in entries {
                if terms.is_empty() && c == 0.0 {
                    continue;
                }
                rows.push(terms, -c);
            }
        } else {
            socs.push((bound, d, entries));
        }
    }
    if rows.len() > 0 {
        cones.push(SupportedConeT::ZeroConeT(rows.len()));
    }

    let start = rows.len();
    for (col, &k) in free.iter().enumerate() {
        let var = &vars[k];
        if var.lower.is_finite() {
            // lower - x <= 0
            rows.push([(col, -1.0)], -var.lower);
        }
        if var.upper.is_finite() {
            rows.push([(col, 1.0)], var.upper);
        }
    }
    if rows.len() > start {
        cones.push(SupportedConeT::NonnegativeConeT(rows.len() - start));
    }

    for (bound, d, entries) in socs {
        // s = b - A x, with s[0] the bound and s[1..] the vector entries.
        rows.push(bound.into_iter().map(|(c, v)| (c, -v)), d);
        let dim = entries.len() + 1;
        for (terms, c) in entries {
            rows.push(terms.into_iter().map(|(col, v)| (col, -v)), c);
        }
        cones.push(SupportedConeT::SecondOrderConeT(dim));
    }

    let m = rows.len();
    let a = CscMatrix::new_from_triplets(m, n, rows.i, rows.j, rows.v);
    let p = CscMatrix::zeros((n, n));
    let (objective, _) = reduce(
        &problem.objective().terms,
        problem.objective().constant,
        &column,
        &fixed,
    );
    let mut q = vec![0.0; n];
    for (col, c) in objective {
        q[col] += c;
    }
    let cmax = q.iter().fold(0.0f64, |m, c| m.max(c.abs()));
    let obj_scale = if cmax > 0.0 { 1.0 / cmax } else { 1.0 };
    for c in &mut q {
        *c *= obj_scale;
    }

    type Attempt = (DefaultSolution<f64>, Vec<f64>, Residuals, bool, f64);
    let mut attempt: Option<Attempt> = None;
    for variant in &BACKEND_VARIANTS {
        let settings = DefaultSettingsBuilder::default()
            .verbose(false)
            .max_iter(opts.max_iter)
            .tol_feas(opts.tol_feas * 0.1)
            .tol_gap_abs(opts.tol_gap * 0.1)
            .tol_gap_rel(opts.tol_gap * 0.1)
            .presolve_enable(false)
            .max_threads(1)
            .equilibrate_enable(variant.equilibrate)
            .static_regularization_constant(variant.regularization)
            .build()
            .map_err(|e| ConicError::Backend(format!("{e:?}")))?;
        let mut solver = DefaultSolver::new(&p, &q, &a, &rows.b, &cones, settings)
            .map_err(|e| ConicError::Backend(format!("{e:?}")))?;
        solver.solve();
        let sol = solver.solution;

        let mut values = fixed.clone();
        for (col, &k) in free.iter().enumerate() {
            values[k] = sol.x[col];
        }
        let mut residuals = problem.residuals(&values);
        residuals.gap = (sol.obj_val - sol.obj_val_dual).abs()
            / (1.0 + sol.obj_val.abs().min(sol.obj_val_dual.abs()));
        let within = residuals.max_primal() <= opts.tol_feas && residuals.gap <= opts.tol_gap;
        let converged = matches!(
            sol.status,
            SolverStatus::Solved | SolverStatus::AlmostSolved
        );
        let certificate = is_certificate(sol.status);
        let score = if converged {
            (residuals.max_primal() / opts.tol_feas).max(residuals.gap / opts.tol_gap)
        } else {
            f64::INFINITY
        };
        let done = within && converged || certificate;
        if done || attempt.as_ref().is_none_or(|a: &Attempt| score < a.4) {
            attempt = Some((sol, values, residuals, within, score));
        }
        if done {
            break;
        }
    }
    let (sol, values, residuals, within, _) = attempt.expect("at least one backend variant");
    let converged = matches!(
        sol.status,
        SolverStatus::Solved | SolverStatus::AlmostSolved
    );
    let objective_value = problem.objective().eval(&values);
    let (status, message) = match sol.status {
        SolverStatus::Solved | SolverStatus::AlmostSolved if within => (SolveStatus::Optimal, None),
        st @ (SolverStatus::Solved | SolverStatus::AlmostSolved) => (
            SolveStatus::ToleranceNotMet,
            Some(format!(
                "backend reported {st:?} but residuals {residuals:?} exceed tolerances"
            )),
        ),
        SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => {
            let norm = sol.z.iter().map(|z| z * z).sum::<f64>().sqrt();
            (
                SolveStatus::Infeasible,
                Some(format!(
                    "primal infeasibility certificate: dual ray with ‖z‖ = {norm:.3e}, bᵀz < 0"
                )),
            )
        }
        SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => (
            SolveStatus::Unbounded,
            Some("dual infeasibility certificate: improving primal ray".into()),
        ),
        other => (
            SolveStatus::ToleranceNotMet,
            Some(format!(
                "backend stopped with {other:?}; returning last iterate"
            )),
        ),
    };

    let solution = ConicSolution {
        status,
        values,
        objective_value,
        residuals,
        iterations: sol.iterations,
        message,
    };
    Ok((solution, converged))
}

/// Every variable is fixed: nothing to optimize, only feasibility to check.
fn evaluate_fixed(problem: &ConicProblem, values: Vec<f64>, opts: &SolverOptions) -> ConicSolution {
    let residuals = problem.residuals(&values);
    let feasible = residuals.max_primal() <= opts.tol_feas;
    ConicSolution {
        status: if feasible {
            SolveStatus::Optimal
        } else {
            SolveStatus::Infeasible
        },
        objective_value: problem.objective().eval(&values),
        values,
        residuals,
        iterations: 0,
        message: (!feasible).then(|| "all variables fixed at an infeasible point".to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::super::{ConicProblem, LinExpr};
    use super::*;

    #[test]
    fn smallest_cone_point() {
        // min x  s.t. ‖(1, y)‖ ≤ x
        let mut p = ConicProblem::new();
        let x = p.add_free_var("x");
        let y = p.add_free_var("y");
        p.set_objective(LinExpr::var(x));
        p.add_cone(
            vec![LinExpr::constant(1.0), LinExpr::var(y)],
            LinExpr::var(x),
        );
        let s = solve_continuous(&p, &SolverOptions::default()).unwrap();
        assert_eq!(s.status, SolveStatus::Optimal);
        assert!((s.value(x) - 1.0).abs() < 1e-7);
        assert!(s.value(y).abs() < 1e-6);
    }

    #[test]
    fn maximize_over_unit_disc() {
        let mut p = ConicProblem::new();
        let x = p.add_free_var("x");
        let y = p.add_free_var("y");
        p.set_objective(LinExpr::term(x, -1.0).plus(y, -1.0));
        p.add_cone(
            vec![LinExpr::var(x), LinExpr::var(y)],
            LinExpr::constant(1.0),
        );
        let s = solve_continuous(&p, &SolverOptions::default()).unwrap();
        assert_eq!(s.status, SolveStatus::Optimal);
        let h = 0.5f64.sqrt();
        assert!((s.objective_value + 2f64.sqrt()).abs() < 1e-7);
        assert!((s.value(x) - h).abs() < 1e-6 && (s.value(y) - h).abs() < 1e-6);
    }

    #[test]
    fn contradictory_equality_is_infeasible() {
        let mut p = ConicProblem::new();
        let x = p.add_free_var("x");
        p.add_equality(vec![(x, 1.0)], 2.0);
        p.add_cone(
            vec![LinExpr::var(x), LinExpr::constant(0.0)],
            LinExpr::constant(1.0),
        );
        let s = solve_continuous(&p, &SolverOptions::default()).unwrap();
        assert_eq!(s.status, SolveStatus::Infeasible);
        assert!(s.message.unwrap().contains("certificate"));
    }

    #[test]
    fn unbounded_below() {
        let mut p = ConicProblem::new();
        let x = p.add_free_var("x");
        let y = p.add_free_var("y");
        p.set_objective(LinExpr::var(x));
        p.add_cone(vec![LinExpr::var(y)], LinExpr::term(x, -1.0));
        let s = solve_continuous(&p, &SolverOptions::default()).unwrap();
        assert_eq!(s.status, SolveStatus::Unbounded);
    }

    #[test]
    fn fixed_variables_are_substituted() {
        // x fixed at 0 collapses ‖y‖ ≤ x to y = 0.
        let mut p = ConicProblem::new();
        let x = p.add_var("x", 0.0, 0.0);
        let y = p.add_free_var("y");
        let z = p.add_var("z", -1.0, 1.0);
        p.set_objective(LinExpr::term(y, -1.0).plus(z, 1.0));
        p.add_cone(vec![LinExpr::var(y)], LinExpr::term(x, 2.0));
        let s = solve_continuous(&p, &SolverOptions::default()).unwrap();
        assert_eq!(s.status, SolveStatus::Optimal);
        assert_eq!(s.value(x), 0.0);
        assert!(s.value(y).abs() < 1e-9);
        assert!((s.value(z) + 1.0).abs() < 1e-7);
    }

    #[test]
    fn all_fixed_problem_is_evaluated() {
        let mut p = ConicProblem::new();
        let x = p.add_var("x", 0.5, 0.5);
        p.set_objective(LinExpr::term(x, 3.0));
        p.add_cone(vec![LinExpr::var(x)], LinExpr::constant(1.0));
        let s = solve_continuous(&p, &SolverOptions::default()).unwrap();
        assert_eq!(s.status, SolveStatus::Optimal);
        assert_eq!(s.objective_value, 1.5);

        p.add_cone(vec![LinExpr::var(x)], LinExpr::constant(0.25));
        let s = solve_continuous(&p, &SolverOptions::default()).unwrap();
        assert_eq!(s.status, SolveStatus::Infeasible);
    }

    #[test]
    fn repeated_solves_are_bit_identical() {
        let mut p = ConicProblem::new();
        let x = p.add_var("x", -3.0, 3.0);
        let y = p.add_var("y", 0.0, 2.0);
        p.set_objective(LinExpr::term(x, 0.3).plus(y, -1.0));
        p.add_cone(
            vec![LinExpr::var(x), LinExpr::var(y)],
            LinExpr::constant(1.5),
        );
        let a = solve_continuous(&p, &SolverOptions::default()).unwrap();
        let b = solve_continuous(&p, &SolverOptions::default()).unwrap();
        assert_eq!(a.values, b.values);
        assert_eq!(a.objective_value.to_bits(), b.objective_value.to_bits());
    }
}
