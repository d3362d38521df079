//! Run configuration read by the CLI. Every object rejects unknown keys.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::density::QuantRule;
use crate::error::{Error, Result};
use crate::solver::SolveConfig;
use crate::structures::{FbmSpec, Payoff, PdSdeSpec, PortfolioSpec};

fn one() -> f64 {
    1.0
}

fn one_usize() -> usize {
    1
}

fn twelve() -> usize {
    12
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Problem {
    PdSde {
        epsilon_k: f64,
        #[serde(default = "one")]
        horizon: f64,
        payoff: Payoff,
        model: PdSdeSpec,
    },
    Fbm {
        epsilon_k: f64,
        #[serde(default = "one")]
        horizon: f64,
        payoff: Payoff,
        model: FbmSpec,
    },
    Portfolio {
        epsilon_k: f64,
        /// Defaults to power utility with the model's `gamma`.
        #[serde(default)]
        payoff: Option<Payoff>,
        model: PortfolioSpec,
        /// Series terms of the stage objective used for refinement and the
        /// stage-argmax policy.
        #[serde(default = "twelve")]
        stage_terms: usize,
    },
}

impl Problem {
    pub fn epsilon_k(&self) -> f64 {
        match self {
            Problem::PdSde { epsilon_k, .. } | Problem::Fbm { epsilon_k, .. } | Problem::Portfolio { epsilon_k, .. } => *epsilon_k,
        }
    }

    pub fn horizon(&self) -> f64 {
        match self {
            Problem::PdSde { horizon, .. } | Problem::Fbm { horizon, .. } => *horizon,
            Problem::Portfolio { model, .. } => model.horizon,
        }
    }

    pub fn payoff(&self) -> Payoff {
        match self {
            Problem::PdSde { payoff, .. } | Problem::Fbm { payoff, .. } => payoff.clone(),
            Problem::Portfolio { payoff, model, .. } => payoff.clone().unwrap_or(Payoff::Power { gamma: model.gamma }),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let e = self.epsilon_k();
        if !(e > 0.0 && e.is_finite()) {
            return Err(Error::config(format!("problem.epsilon_k must be positive, got {e}")));
        }
        if !(self.horizon() > 0.0) {
            return Err(Error::config("problem.horizon must be positive"));
        }
        self.payoff().validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ControlSpec {
    /// The tree policy from a solution table (`--policy`).
    Policy,
    Constant { value: Vec<f64> },
    /// Greedy maximizer of the closed-form stage objective.
    StageArgmax {
        #[serde(default)]
        refine: bool,
    },
}

fn default_control() -> ControlSpec {
    ControlSpec::Policy
}

fn default_paths() -> usize {
    10_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateConfig {
    #[serde(default = "default_paths")]
    pub paths: usize,
    #[serde(default)]
    pub antithetic: bool,
    /// Skeleton steps per rollout; defaults to the solve depth.
    #[serde(default)]
    pub steps: Option<usize>,
    #[serde(default = "default_control")]
    pub control: ControlSpec,
    /// Re-solve at `2Q` to report the nearest-atom projection slack.
    #[serde(default)]
    pub q_slack: bool,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self { paths: default_paths(), antithetic: false, steps: None, control: default_control(), q_slack: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub epsilons: Vec<f64>,
}

fn default_skeleton_paths() -> usize {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SkeletonRun {
    #[serde(default = "one")]
    pub epsilon_k: f64,
    #[serde(default = "one_usize")]
    pub dim: usize,
    #[serde(default = "one")]
    pub horizon: f64,
    /// Steps per path; defaults to `d·⌈T/ε²⌉`.
    #[serde(default)]
    pub steps: Option<usize>,
    #[serde(default = "default_skeleton_paths")]
    pub paths: usize,
}

impl Default for SkeletonRun {
    fn default() -> Self {
        Self { epsilon_k: 1.0, dim: 1, horizon: 1.0, steps: None, paths: default_skeleton_paths() }
    }
}

fn default_q() -> usize {
    8
}

fn default_rule() -> QuantRule {
    QuantRule::Quantile
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelRun {
    #[serde(default = "one")]
    pub epsilon_k: f64,
    /// Elapsed time since each coordinate's last hit; its length is `d`.
    #[serde(default = "zero_lag")]
    pub lags: Vec<f64>,
    #[serde(default = "default_q")]
    pub q: usize,
    #[serde(default = "default_rule")]
    pub rule: QuantRule,
}

fn zero_lag() -> Vec<f64> {
    vec![0.0]
}

impl Default for KernelRun {
    fn default() -> Self {
        Self { epsilon_k: 1.0, lags: zero_lag(), q: default_q(), rule: default_rule() }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub problem: Option<Problem>,
    #[serde(default)]
    pub solve: Option<SolveConfig>,
    #[serde(default)]
    pub evaluate: Option<EvaluateConfig>,
    #[serde(default)]
    pub sweep: Option<SweepConfig>,
    #[serde(default)]
    pub skeleton: Option<SkeletonRun>,
    #[serde(default)]
    pub kernel: Option<KernelRun>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::config(format!("config: {e}")))?;
        if let Some(p) = &cfg.problem {
            p.validate()?;
        }
        if let Some(s) = &cfg.solve {
            s.validate()?;
        }
        Ok(cfg)
    }

    /// Reads the file and returns the parsed config with its raw bytes.
    pub fn load(path: &Path) -> Result<(Self, Vec<u8>)> {
        let bytes = std::fs::read(path).map_err(|e| Error::Io { path: path.display().to_string(), source: e })?;
        let text = std::str::from_utf8(&bytes).map_err(|_| Error::config(format!("{} is not UTF-8", path.display())))?;
        let cfg = Self::parse(text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        Ok((cfg, bytes))
    }

    pub fn problem(&self) -> Result<&Problem> {
        self.problem.as_ref().ok_or_else(|| Error::config("config needs a `problem` section"))
    }

    pub fn solve(&self) -> Result<&SolveConfig> {
        self.solve.as_ref().ok_or_else(|| Error::config("config needs a `solve` section"))
    }
}
