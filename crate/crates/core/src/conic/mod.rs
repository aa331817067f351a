//! Second-order cone programs with optional binary variables.
//!
//! [`ConicProblem`] is a small modelling layer: named scalar variables with
//! bounds, a linear objective (always minimized), sparse linear equalities and
//! cones of the form `‖A x + b‖₂ ≤ c·x + d`. Continuous problems go through
//! [`solve_continuous`]; problems with binaries through [`solve_mixed`]
//! (branch-and-bound) or, for cardinality-constrained placements,
//! [`enumerate_subsets`].

mod continuous;
mod mixed;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use continuous::{SolverOptions, solve_continuous};
pub use mixed::{
    BnbOptions, BnbStats, Branching, EnumerationResult, MixedSolution, enumerate_subsets,
    solve_mixed,
};

#[derive(Debug, Error)]
pub enum ConicError {
    #[error("variable index {0} is out of range")]
    UnknownVariable(usize),
    #[error("variable `{name}` has bounds [{lower}, {upper}]")]
    BadBounds {
        name: String,
        lower: f64,
        upper: f64,
    },
    #[error("binary variable `{0}` must have bounds within [0, 1]")]
    BadBinary(String),
    #[error("non-finite coefficient in {0}")]
    NonFinite(String),
    #[error("problem has no binary variables")]
    NoBinaries,
    #[error("enumeration needs {needed} solves, budget is {budget}")]
    BudgetExceeded { needed: u128, budget: usize },
    #[error("no candidate subset is feasible")]
    NoFeasibleSubset,
    #[error("conic backend rejected the problem: {0}")]
    Backend(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct VarId(pub usize);

impl VarId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Variable {
    pub name: String,
    pub lower: f64,
    pub upper: f64,
}

/// Affine expression `Σ coef·x + constant`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LinExpr {
    pub terms: Vec<(VarId, f64)>,
    pub constant: f64,
}

impl LinExpr {
    pub fn constant(c: f64) -> Self {
        Self {
            terms: Vec::new(),
            constant: c,
        }
    }

    pub fn var(v: VarId) -> Self {
        Self::term(v, 1.0)
    }

    pub fn term(v: VarId, coef: f64) -> Self {
        Self {
            terms: vec![(v, coef)],
            constant: 0.0,
        }
    }

    pub fn plus(mut self, v: VarId, coef: f64) -> Self {
        self.terms.push((v, coef));
        self
    }

    pub fn plus_constant(mut self, c: f64) -> Self {
        self.constant += c;
        self
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.terms.iter().map(|&(v, c)| c * x[v.0]).sum::<f64>() + self.constant
    }

    /// Largest magnitude among the evaluated terms and the constant.
    fn magnitude(&self, x: &[f64]) -> f64 {
        self.terms
            .iter()
            .map(|&(v, c)| (c * x[v.0]).abs())
            .fold(self.constant.abs(), f64::max)
    }
}

/// `Σ coef·x = rhs`.
#[derive(Debug, Clone, PartialEq)]
pub struct Equality {
    pub terms: Vec<(VarId, f64)>,
    pub rhs: f64,
}

/// `‖vector‖₂ ≤ bound`.
#[derive(Debug, Clone, PartialEq)]
pub struct SecondOrderCone {
    pub vector: Vec<LinExpr>,
    pub bound: LinExpr,
}

impl SecondOrderCone {
    /// `‖vector(x)‖ − bound(x)`; positive means violated.
    pub fn violation(&self, x: &[f64]) -> f64 {
        let norm = self
            .vector
            .iter()
            .map(|e| e.eval(x).powi(2))
            .sum::<f64>()
            .sqrt();
        norm - self.bound.eval(x)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConicProblem {
    variables: Vec<Variable>,
    objective: LinExpr,
    equalities: Vec<Equality>,
    cones: Vec<SecondOrderCone>,
    binaries: Vec<VarId>,
}

impl ConicProblem {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_var(&mut self, name: impl Into<String>, lower: f64, upper: f64) -> VarId {
        self.variables.push(Variable {
            name: name.into(),
            lower,
            upper,
        });
        VarId(self.variables.len() - 1)
    }

    pub fn add_free_var(&mut self, name: impl Into<String>) -> VarId {
        self.add_var(name, f64::NEG_INFINITY, f64::INFINITY)
    }

    pub fn add_binary(&mut self, name: impl Into<String>) -> VarId {
        let v = self.add_var(name, 0.0, 1.0);
        self.binaries.push(v);
        v
    }

    pub fn add_equality(&mut self, terms: Vec<(VarId, f64)>, rhs: f64) -> usize {
        self.equalities.push(Equality { terms, rhs });
        self.equalities.len() - 1
    }

    pub fn add_cone(&mut self, vector: Vec<LinExpr>, bound: LinExpr) -> usize {
        self.cones.push(SecondOrderCone { vector, bound });
        self.cones.len() - 1
    }

    pub fn set_objective(&mut self, objective: LinExpr) {
        self.objective = objective;
    }

    pub fn set_bounds(&mut self, v: VarId, lower: f64, upper: f64) {
        let var = &mut self.variables[v.0];
        var.lower = lower;
        var.upper = upper;
    }

    pub fn fix(&mut self, v: VarId, value: f64) {
        self.set_bounds(v, value, value);
    }

    pub fn variables(&self) -> &[Variable] {
        &self.variables
    }

    pub fn variable(&self, v: VarId) -> &Variable {
        &self.variables[v.0]
    }

    pub fn find(&self, name: &str) -> Option<VarId> {
        self.variables
            .iter()
            .position(|v| v.name == name)
            .map(VarId)
    }

    pub fn objective(&self) -> &LinExpr {
        &self.objective
    }

    pub fn equalities(&self) -> &[Equality] {
        &self.equalities
    }

    pub fn cones(&self) -> &[SecondOrderCone] {
        &self.cones
    }

    pub fn binaries(&self) -> &[VarId] {
        &self.binaries
    }

    pub fn num_vars(&self) -> usize {
        self.variables.len()
    }

    /// Checks references, bounds and coefficients.
    pub fn validate(&self) -> Result<(), ConicError> {
        let n = self.variables.len();
        let check_ref = |v: VarId| {
            if v.0 < n {
                Ok(())
            } else {
                Err(ConicError::UnknownVariable(v.0))
            }
        };
        let check_expr = |e: &LinExpr, what: &str| -> Result<(), ConicError> {
            if !e.constant.is_finite() {
                return Err(ConicError::NonFinite(what.into()));
            }
            for &(v, c) in &e.terms {
                check_ref(v)?;
                if !c.is_finite() {
                    return Err(ConicError::NonFinite(what.into()));
                }
            }
            Ok(())
        };
        for var in &self.variables {
            if var.lower.is_nan()
                || var.upper.is_nan()
                || var.lower > var.upper
                || var.lower == f64::INFINITY
                || var.upper == f64::NEG_INFINITY
            {
                return Err(ConicError::BadBounds {
                    name: var.name.clone(),
                    lower: var.lower,
                    upper: var.upper,
                });
            }
        }
        for &b in &self.binaries {
            check_ref(b)?;
            let var = &self.variables[b.0];
            if var.lower < 0.0 || var.upper > 1.0 {
                return Err(ConicError::BadBinary(var.name.clone()));
            }
        }
        check_expr(&self.objective, "objective")?;
        for (k, row) in self.equalities.iter().enumerate() {
            let what = format!("equality {k}");
            if !row.rhs.is_finite() {
                return Err(ConicError::NonFinite(what));
            }
            for &(v, c) in &row.terms {
                check_ref(v)?;
                if !c.is_finite() {
                    return Err(ConicError::NonFinite(what));
                }
            }
        }
        for (k, cone) in self.cones.iter().enumerate() {
            let what = format!("cone {k}");
            check_expr(&cone.bound, &what)?;
            for e in &cone.vector {
                check_expr(e, &what)?;
            }
        }
        Ok(())
    }

    /// Evaluates every constraint family at `x`.
    pub fn residuals(&self, x: &[f64]) -> Residuals {
        let scale = 1.0 + x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut r = Residuals::default();
        for row in &self.equalities {
            let lhs: f64 = row.terms.iter().map(|&(v, c)| c * x[v.0]).sum();
            let mag = row
                .terms
                .iter()
                .map(|&(v, c)| (c * x[v.0]).abs())
                .fold(row.rhs.abs(), f64::max);
            r.equality = r.equality.max((lhs - row.rhs).abs() / (1.0 + mag));
        }
        for (var, &xv) in self.variables.iter().zip(x) {
            let viol = (var.lower - xv).max(xv - var.upper).max(0.0);
            r.bound = r.bound.max(viol / scale);
        }
        for cone in &self.cones {
            let mag = cone
                .vector
                .iter()
                .map(|e| e.magnitude(x))
                .fold(cone.bound.magnitude(x), f64::max);
            r.cone = r.cone.max(cone.violation(x).max(0.0) / (1.0 + mag));
        }
        r
    }
}

/// Plain-text dump, one line per variable, row and cone.
impl fmt::Display for ConicProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let expr = |e: &LinExpr| {
            let mut s: Vec<String> = e
                .terms
                .iter()
                .map(|(v, c)| format!("{c:?}*x{}", v.0))
                .collect();
            if e.constant != 0.0 || s.is_empty() {
                s.push(format!("{:?}", e.constant));
            }
            s.join(" + ")
        };
        for (k, v) in self.variables.iter().enumerate() {
            let kind = if self.binaries.contains(&VarId(k)) {
                "bin"
            } else {
                "var"
            };
            writeln!(f, "{kind} x{k} {} [{:?}, {:?}]", v.name, v.lower, v.upper)?;
        }
        writeln!(f, "min {}", expr(&self.objective))?;
        for (k, row) in self.equalities.iter().enumerate() {
            let lhs = expr(&LinExpr {
                terms: row.terms.clone(),
                constant: 0.0,
            });
            writeln!(f, "eq {k}: {lhs} = {:?}", row.rhs)?;
        }
        for (k, cone) in self.cones.iter().enumerate() {
            let parts: Vec<String> = cone.vector.iter().map(expr).collect();
            writeln!(
                f,
                "soc {k}: ||{}|| <= {}",
                parts.join("; "),
                expr(&cone.bound)
            )?;
        }
        Ok(())
    }
}

/// Constraint violations, each scaled by `1 +` the magnitude of the terms
/// involved. `gap` is the relative primal-dual objective gap.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Residuals {
    pub equality: f64,
    pub bound: f64,
    pub cone: f64,
    pub gap: f64,
}

impl Residuals {
    pub fn max_primal(&self) -> f64 {
        self.equality.max(self.bound).max(self.cone)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    Unbounded,
    ToleranceNotMet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConicSolution {
    pub status: SolveStatus,
    pub values: Vec<f64>,
    pub objective_value: f64,
    pub residuals: Residuals,
    pub iterations: u32,
    /// Backend note, e.g. the infeasibility certificate summary.
    pub message: Option<String>,
}

impl ConicSolution {
    pub fn is_optimal(&self) -> bool {
        self.status == SolveStatus::Optimal
    }

    pub fn value(&self, v: VarId) -> f64 {
        self.values[v.0]
    }
}
