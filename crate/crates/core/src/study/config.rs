use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::StudyError;
use crate::conic::{BnbOptions, Branching, SolverOptions};
use crate::load::ZipCoefficients;

/// Feeder file locations. Relative paths resolve against the config file's
/// directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeederPaths {
    pub buses: PathBuf,
    pub branches: PathBuf,
    pub config: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DgSection {
    /// Fleet size used by `stage2` and `loadstudy`, and the top of the
    /// default `stage1` sweep.
    pub n_dg: usize,
    pub s_dg_max_kva: f64,
    /// Defaults to every non-slack bus.
    #[serde(default)]
    pub candidate_buses: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage1Section {
    pub allow_q: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Limits {
    /// When set, replaces every bus's `v_min_pu` from the bus table.
    pub v_min_pu: Option<f64>,
    pub v_max_pu: Option<f64>,
    pub slack_v_pu: f64,
}

impl Default for Limits {
    fn default() -> Self {
        Self {
            v_min_pu: None,
            v_max_pu: None,
            slack_v_pu: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BnbSection {
    pub rel_gap: f64,
    pub max_nodes: usize,
    pub branching: Branching,
}

impl Default for BnbSection {
    fn default() -> Self {
        let d = BnbOptions::default();
        Self {
            rel_gap: d.rel_gap,
            max_nodes: d.max_nodes,
            branching: d.branching,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoadStudySection {
    pub factor: f64,
    /// Keep the base-load reactive setpoints instead of re-solving Stage 2
    /// for every perturbed load.
    pub freeze_q: bool,
    /// Buses to perturb; defaults to every bus with nonzero demand.
    pub buses: Option<Vec<usize>>,
}

impl Default for LoadStudySection {
    fn default() -> Self {
        Self {
            factor: 1.5,
            freeze_q: false,
            buses: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerificationSection {
    /// Largest accepted `|socp − sweep| / sweep` before a run exits with
    /// a verification failure.
    pub max_rel_error: f64,
}

impl Default for VerificationSection {
    fn default() -> Self {
        Self {
            max_rel_error: 0.02,
        }
    }
}

/// One JSON document driving every study command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    #[serde(default)]
    pub name: Option<String>,
    pub feeder: FeederPaths,
    #[serde(default)]
    pub zip: ZipCoefficients,
    pub dg: DgSection,
    /// Fleet sizes for `stage1`; defaults to `1..=dg.n_dg`.
    #[serde(default)]
    pub sweep_n_dg: Option<Vec<usize>>,
    #[serde(default)]
    pub stage1: Stage1Section,
    #[serde(default)]
    pub limits: Limits,
    #[serde(default)]
    pub solver: SolverOptions,
    #[serde(default)]
    pub bnb: BnbSection,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub loadstudy: LoadStudySection,
    #[serde(default)]
    pub verification: VerificationSection,
    /// Placements to compare against, keyed by fleet size. `stage1` solves
    /// each with the placement fixed and reports it next to the optimum.
    #[serde(default)]
    pub reference_placements: BTreeMap<usize, Vec<usize>>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl StudyConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, StudyError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| StudyError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)
            .map_err(|e| StudyError::Config(format!("{}: {e}", path.display())))?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<Self, StudyError> {
        let cfg: Self =
            serde_json::from_str(text).map_err(|e| StudyError::Config(e.to_string()))?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    /// Fleet sizes swept by `stage1` when none are given on the command line.
    pub fn n_dg_list(&self) -> Vec<usize> {
        self.sweep_n_dg
            .clone()
            .unwrap_or_else(|| (1..=self.dg.n_dg).collect())
    }

    pub fn bnb_options(&self) -> BnbOptions {
        BnbOptions {
            rel_gap: self.bnb.rel_gap,
            max_nodes: self.bnb.max_nodes,
            branching: self.bnb.branching,
            solver: self.solver,
            ..BnbOptions::default()
        }
    }

    fn check(&self) -> Result<(), StudyError> {
        let bad = |m: String| Err(StudyError::Config(m));
        self.zip
            .validate()
            .map_err(|e| StudyError::Config(format!("zip: {e}")))?;
        if !(self.dg.s_dg_max_kva.is_finite() && self.dg.s_dg_max_kva > 0.0) {
            return bad(format!(
                "dg.s_dg_max_kva must be > 0, got {}",
                self.dg.s_dg_max_kva
            ));
        }
        if !(self.loadstudy.factor.is_finite() && self.loadstudy.factor > 0.0) {
            return bad(format!(
                "loadstudy.factor must be > 0, got {}",
                self.loadstudy.factor
            ));
        }
        if !(self.solver.tol_feas > 0.0 && self.solver.tol_gap > 0.0) {
            return bad("solver tolerances must be > 0".into());
        }
        if !(self.bnb.rel_gap >= 0.0) || self.bnb.max_nodes == 0 {
            return bad("bnb.rel_gap must be >= 0 and bnb.max_nodes >= 1".into());
        }
        if !(self.limits.slack_v_pu > 0.0) {
            return bad(format!(
                "limits.slack_v_pu must be > 0, got {}",
                self.limits.slack_v_pu
            ));
        }
        if !(self.verification.max_rel_error >= 0.0) {
            return bad("verification.max_rel_error must be >= 0".into());
        }
        Ok(())
    }
}
