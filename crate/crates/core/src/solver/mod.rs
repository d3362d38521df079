//! Backward dynamic programming over the discretized history tree.

mod dp;
pub(crate) mod tree;

use serde::{Deserialize, Serialize};

use crate::density::QuantRule;
use crate::error::{Error, Result};
use crate::skeleton::default_steps;
use crate::structures::Payoff;

pub use dp::{HjbResidual, backward_dp, extract_policy_control, hamiltonian, hjb_residual, leaf_values, policy_value, vertical_gradient, Solution};
pub use tree::{build_tree, NoiseState, Tree, TreeNode};

/// Finite subset of the action box `[-bound, bound]^dim`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ActionGrid {
    points: Vec<Vec<f64>>,
    bound: f64,
    spacing: f64,
}

impl ActionGrid {
    /// `n` equally spaced points per dimension over `[-bound, bound]`, in
    /// lexicographic order. A single point sits at the origin.
    pub fn uniform(bound: f64, n: usize, dim: usize) -> Result<Self> {
        if !(bound > 0.0 && bound.is_finite()) || n == 0 || dim == 0 {
            return Err(Error::config("action grid needs bound > 0, points >= 1 and dim >= 1"));
        }
        let axis: Vec<f64> = if n == 1 {
            vec![0.0]
        } else {
            (0..n).map(|i| if 2 * i + 1 == n { 0.0 } else { -bound + 2.0 * bound * i as f64 / (n - 1) as f64 }).collect()
        };
        let spacing = if n == 1 { 2.0 * bound } else { 2.0 * bound / (n - 1) as f64 };
        let mut points = vec![Vec::new()];
        for _ in 0..dim {
            points = points.into_iter().flat_map(|p| axis.iter().map(move |&a| [p.clone(), vec![a]].concat())).collect();
        }
        Ok(Self { points, bound, spacing })
    }

    /// Explicit one-dimensional grid.
    pub fn explicit(values: &[f64], bound: f64) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::config("action grid: values must not be empty"));
        }
        if values.iter().any(|v| !(v.abs() <= bound)) {
            return Err(Error::config(format!("action grid: values must lie in [-{bound}, {bound}]")));
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let spacing = sorted.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max);
        Ok(Self { points: values.iter().map(|&v| vec![v]).collect(), bound, spacing })
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActionGridConfig {
    #[serde(default = "one")]
    pub bound: f64,
    #[serde(default)]
    pub points: Option<usize>,
    #[serde(default = "one_usize")]
    pub dim: usize,
    /// Explicit one-dimensional action values; overrides `points`.
    #[serde(default)]
    pub values: Option<Vec<f64>>,
}

impl ActionGridConfig {
    pub fn build(&self) -> Result<ActionGrid> {
        match (&self.values, self.points) {
            (Some(v), _) => {
                if self.dim != 1 {
                    return Err(Error::config("actions.values needs dim = 1"));
                }
                ActionGrid::explicit(v, self.bound)
            }
            (None, Some(n)) => ActionGrid::uniform(self.bound, n, self.dim),
            (None, None) => Err(Error::config("actions: give either points or values")),
        }
    }
}

fn one() -> f64 {
    1.0
}

fn one_usize() -> usize {
    1
}

fn default_budget() -> f64 {
    0.01
}

fn default_state_bin() -> f64 {
    1e-3
}

fn default_max_nodes() -> usize {
    5_000_000
}

fn default_rule() -> QuantRule {
    QuantRule::Quantile
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolveConfig {
    /// Tree depth; defaults to `d·⌈T/ε²⌉`.
    #[serde(default)]
    pub depth: Option<usize>,
    /// Kernel time nodes per step.
    pub q: usize,
    #[serde(default = "default_rule")]
    pub rule: QuantRule,
    pub actions: ActionGridConfig,
    /// Total optimality budget `ε`, spent as `ε/m` per stage.
    #[serde(default = "default_budget")]
    pub epsilon_total: f64,
    #[serde(default)]
    pub collapse: bool,
    /// Relative state bin width for merging.
    #[serde(default = "default_state_bin")]
    pub state_bin: f64,
    /// Time and lag bin width for merging; defaults to `ε²/4`.
    #[serde(default)]
    pub time_bin: Option<f64>,
    /// Add a golden-section refined action at nodes whose structure has a
    /// closed-form stage objective.
    #[serde(default)]
    pub refine: bool,
    #[serde(default = "default_max_nodes")]
    pub max_nodes: usize,
}

impl SolveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.q == 0 {
            return Err(Error::config("solve.q must be >= 1"));
        }
        if !(self.epsilon_total > 0.0) {
            return Err(Error::config("solve.epsilon_total must be positive"));
        }
        if !(self.state_bin > 0.0) {
            return Err(Error::config("solve.state_bin must be positive"));
        }
        if matches!(self.time_bin, Some(b) if !(b > 0.0)) {
            return Err(Error::config("solve.time_bin must be positive"));
        }
        self.actions.build().map(|_| ())
    }

    pub fn depth_for(&self, epsilon: f64, dim: usize, horizon: f64) -> usize {
        self.depth.unwrap_or_else(|| default_steps(epsilon, dim, horizon))
    }
}

/// Terms of the reported optimality certificate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Certificate {
    /// The configured total budget `ε`.
    pub epsilon_budget: f64,
    /// Per-stage argmax slack `ε/m`.
    pub stage_slack: f64,
    /// `L·h^γ` from the payoff's Hölder bound and the grid spacing.
    pub grid_term: f64,
    /// `m·(ε/m) + L·h^γ`.
    pub certified: f64,
}

pub fn certify(cfg: &SolveConfig, depth: usize, grid: &ActionGrid, payoff: &Payoff) -> Certificate {
    let m = depth.max(1) as f64;
    let (l, g) = payoff.holder();
    let stage_slack = cfg.epsilon_total / m;
    let grid_term = l * grid.spacing().powf(g);
    Certificate { epsilon_budget: cfg.epsilon_total, stage_slack, grid_term, certified: m * stage_slack + grid_term }
}
