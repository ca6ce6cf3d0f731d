//! The JSON run configuration shared by every command.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{validate_support, TailSpec};
use crate::genericity::{DetRule, GenericityOptions, DEFAULT_A_CAP, DEFAULT_BUDGET};
use crate::lattice::{TruncBox, Weight};
use crate::newton::{DiophantineParams, IterateOptions, KappaMode, PStepOptions, Problem, SolverPath};
use crate::oracle::digest;

pub const SCHEMA: &str = "v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    /// Optional; checked against `j_list` when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d: Option<usize>,
    pub p: u32,
    pub j_list: Vec<Vec<i64>>,
    pub a: Vec<f64>,
    pub delta: f64,
    /// `None` is `H = 0`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tail: Option<TailSpec>,
    /// Overall phase constant `m` added to the diagonal.
    #[serde(default)]
    pub phase: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScalesConfig {
    pub n0_scale: i64,
    pub s: f64,
    pub ratio: i64,
    pub max_steps: usize,
}

impl Default for ScalesConfig {
    fn default() -> Self {
        let it = IterateOptions::default();
        Self {
            n0_scale: it.n0_scale,
            s: it.s,
            ratio: it.ratio,
            max_steps: it.max_steps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DioConfig {
    pub kappa_mode: KappaMode,
    /// Defaults to `2b + 1.5`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma_exp: Option<f64>,
    pub n_check: i64,
}

impl Default for DioConfig {
    fn default() -> Self {
        Self {
            kappa_mode: KappaMode::Calibrate,
            gamma_exp: None,
            n_check: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    pub residual_tol: f64,
    pub dio: DioConfig,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            residual_tol: 1e-12,
            dio: DioConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Budgets {
    pub a_cap: usize,
    /// Node cap for the P-step unknowns.
    pub box_cap: usize,
    pub genericity_budget: u128,
}

impl Default for Budgets {
    fn default() -> Self {
        Self {
            a_cap: DEFAULT_A_CAP,
            box_cap: PStepOptions::default().reach_cap,
            genericity_budget: DEFAULT_BUDGET,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenericityConfig {
    pub rule: DetRule,
    pub mu: i64,
    /// `solve` refuses non-generic supports unless this is off.
    pub require_generic: bool,
}

impl Default for GenericityConfig {
    fn default() -> Self {
        Self {
            rule: DetRule::Literal,
            mu: 0,
            require_generic: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub path: SolverPath,
    pub dense_max: usize,
    pub cross_check: bool,
    pub weight: Weight,
    /// Time samples for the grid residual written with a solution.
    pub grid_t_samples: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        let p = PStepOptions::default();
        Self {
            path: p.path,
            dense_max: p.dense_max,
            cross_check: false,
            weight: p.weight,
            grid_t_samples: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub deltas: Vec<f64>,
    /// Amplitude vectors; defaults to the problem's `a`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub amplitudes: Vec<Vec<f64>>,
    #[serde(default = "default_h")]
    pub jacobian_h: f64,
}

fn default_h() -> f64 {
    1e-4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ResonanceConfig {
    pub n_radius: i64,
    pub j_radius: i64,
    pub mu: i64,
    pub cubic_dump: bool,
}

impl Default for ResonanceConfig {
    fn default() -> Self {
        Self {
            n_radius: 8,
            j_radius: 6,
            mu: 0,
            cubic_dump: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema: String,
    pub problem: ProblemConfig,
    #[serde(default)]
    pub scales: ScalesConfig,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub budgets: Budgets,
    #[serde(default)]
    pub genericity: GenericityConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSpec>,
    #[serde(default)]
    pub resonance: ResonanceConfig,
    #[serde(default)]
    pub seed: u64,
    /// Worker threads for fan-out commands; 0 lets the pool decide.
    #[serde(default)]
    pub workers: usize,
    #[serde(default = "default_out")]
    pub output_dir: PathBuf,
}

fn default_out() -> PathBuf {
    PathBuf::from("qpnls-out")
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema != SCHEMA {
            return Err(Error::Config(format!("schema must be \"{SCHEMA}\", got \"{}\"", self.schema)));
        }
        let pr = &self.problem;
        let d = validate_support(&pr.j_list).map_err(|e| Error::Config(e.to_string()))?;
        let b = pr.j_list.len();
        if pr.b.is_some_and(|x| x != b) || pr.d.is_some_and(|x| x != d) {
            return Err(Error::Config(format!("b, d do not match j_list ({b}, {d})")));
        }
        if b > 4 || pr.p > 4 || pr.p == 0 {
            return Err(Error::Config("need 1 <= p <= 4 and b <= 4".into()));
        }
        if pr.a.len() != b {
            return Err(Error::Config(format!("{} amplitudes for {b} modes", pr.a.len())));
        }
        if let Some(t) = &pr.tail {
            t.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        if self.scales.ratio < 1 || self.scales.n0_scale < 1 {
            return Err(Error::Config("scales.ratio and scales.n0_scale must be at least 1".into()));
        }
        if let Some(g) = self.tolerances.dio.gamma_exp {
            DiophantineParams::new(1.0, g, self.tolerances.dio.n_check, b).map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        digest(self)
    }

    pub fn tail(&self) -> TailSpec {
        self.problem.tail.clone().unwrap_or_else(TailSpec::none)
    }

    pub fn problem(&self) -> Problem {
        Problem {
            j_list: self.problem.j_list.clone(),
            a: self.problem.a.clone(),
            delta: self.problem.delta,
            p: self.problem.p,
            tail: self.tail(),
            phase: self.problem.phase,
        }
    }

    pub fn genericity_options(&self) -> GenericityOptions {
        GenericityOptions {
            mu: self.genericity.mu,
            a_cap: self.budgets.a_cap,
            budget: self.budgets.genericity_budget,
            rule: self.genericity.rule,
            permutation_seed: None,
        }
    }

    pub fn pstep_options(&self) -> PStepOptions {
        PStepOptions {
            path: self.solver.path,
            dense_max: self.solver.dense_max,
            reach_cap: self.budgets.box_cap,
            weight: self.solver.weight,
            ..PStepOptions::default()
        }
    }

    pub fn iterate_options(&self) -> IterateOptions {
        IterateOptions {
            n0_scale: self.scales.n0_scale,
            s: self.scales.s,
            ratio: self.scales.ratio,
            max_steps: self.scales.max_steps,
            residual_tol: self.tolerances.residual_tol,
            kappa_mode: self.tolerances.dio.kappa_mode,
            gamma_exp: self.tolerances.dio.gamma_exp,
            n_check: self.tolerances.dio.n_check,
            require_generic: self.genericity.require_generic,
            genericity: self.genericity_options(),
            pstep: self.pstep_options(),
            cross_check: self.solver.cross_check,
        }
    }

    pub fn resonance_box(&self) -> TruncBox {
        TruncBox::new(self.resonance.n_radius, self.resonance.j_radius)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{"schema": "v1", "problem": {"p": 1, "j_list": [[1]], "a": [0.5], "delta": 0.1}}"#;

    #[test]
    fn minimal_config_round_trips() {
        let c = RunConfig::from_json(MINIMAL).unwrap();
        assert_eq!(c.scales.ratio, 2);
        assert!(c.genericity.require_generic);
        let back = RunConfig::from_json(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.digest(), c.digest());
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(RunConfig::from_json("{").is_err());
        assert!(RunConfig::from_json(&MINIMAL.replace("v1", "v2")).is_err());
        assert!(RunConfig::from_json(&MINIMAL.replace("[0.5]", "[0.5, 0.5]")).is_err());
        assert!(RunConfig::from_json(&MINIMAL.replace("\"p\": 1", "\"p\": 1, \"b\": 2")).is_err());
        assert!(RunConfig::from_json(&MINIMAL.replace("\"schema\"", "\"extra\": 1, \"schema\"")).is_err());
    }

    #[test]
    fn digest_tracks_content() {
        let a = RunConfig::from_json(MINIMAL).unwrap();
        let b = RunConfig::from_json(&MINIMAL.replace("0.1", "0.2")).unwrap();
        assert_ne!(a.digest(), b.digest());
    }
}
