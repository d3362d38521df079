//! Controlled state structures driven by the skeleton: a path-dependent SDE
//! Euler scheme, an fBm-driven drift-control model and the portfolio
//! wealth process.

pub mod fbm;
pub mod pd_sde;
pub mod portfolio;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::skeleton::SignVec;

pub use fbm::{FbmKernel, FbmSpec, FbmStructure};
pub use pd_sde::{PdSdeSpec, PdSdeStructure};
pub use portfolio::{PortfolioSpec, PortfolioStructure};

/// Piecewise-constant state path: `values[n]` holds from `times[n]` on.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepPath {
    pub times: Vec<f64>,
    pub values: Vec<Vec<f64>>,
}

impl StepPath {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Right-continuous value at time `t`.
    pub fn value_at(&self, t: f64) -> &[f64] {
        let n = self.times.partition_point(|&s| s <= t).max(1);
        &self.values[n - 1]
    }

    pub fn terminal(&self) -> &[f64] {
        self.values.last().expect("a path always holds its initial value")
    }
}

/// Bin widths used when merging states.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bins {
    /// Relative width for positive state variables (absolute for others).
    pub state: f64,
    /// Width for elapsed time.
    pub time: f64,
}

/// A controlled structure evolving one skeleton step at a time.
pub trait StateStructure: Sync + Send {
    type State: Clone + Send + Sync;

    fn noise_dim(&self) -> usize;
    fn state_dim(&self) -> usize;
    fn epsilon(&self) -> f64;
    fn initial_state(&self) -> Self::State;

    /// Advances by one step. Depends on the current action and on earlier
    /// actions stored in `state` only.
    fn step(&self, state: &Self::State, action: &[f64], delta_t: f64, sign: SignVec) -> Result<Self::State>;

    /// The state path so far as a step function.
    fn path(&self, state: &Self::State) -> StepPath;

    /// Key and representative for merging equivalent states, when the
    /// structure has a finite-dimensional sufficient statistic.
    fn collapse(&self, _state: &Self::State, _bins: &Bins) -> Option<(Vec<i64>, Self::State)> {
        None
    }

    /// Closed-form one-stage objective used to refine the action grid.
    fn stage_objective(&self, _state: &Self::State, _action: &[f64]) -> Option<Result<f64>> {
        None
    }

    /// States with equal keys share the same stage objective.
    fn stage_cache_key(&self, _state: &Self::State) -> Option<Vec<u64>> {
        None
    }
}

/// Runs a sequence of (action, Δt, sign) triples from the initial state.
pub fn run_structure<S: StateStructure>(s: &S, actions: &[Vec<f64>], steps: &[(f64, SignVec)]) -> Result<S::State> {
    let mut state = s.initial_state();
    for (a, (dt, sign)) in actions.iter().zip(steps) {
        state = s.step(&state, a, *dt, *sign)?;
    }
    Ok(state)
}

/// Payoff functional applied to the frozen state path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Payoff {
    /// `x_T^γ / γ` of the first component.
    Power { gamma: f64 },
    /// `scale · x_T` of the first component.
    Terminal {
        #[serde(default = "one")]
        scale: f64,
    },
    Constant { value: f64 },
    /// `min(max(x_T - strike, 0), cap)`.
    Call { strike: f64, cap: f64 },
    /// `amplitude · sgn(s)|s|^exponent` with `s = sin(frequency·x_T + phase)`.
    Holder { amplitude: f64, frequency: f64, phase: f64, exponent: f64 },
    /// `min(max_t x(t), cap)` of the first component.
    RunningMax { cap: f64 },
}

fn one() -> f64 {
    1.0
}

impl Payoff {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::config(format!("payoff: {m}")));
        match *self {
            Payoff::Power { gamma } if !(gamma > 0.0 && gamma < 1.0) => bad("gamma must lie in (0, 1)"),
            Payoff::Call { cap, .. } if !(cap > 0.0) => bad("cap must be positive"),
            Payoff::Holder { exponent, .. } if !(exponent > 0.0 && exponent <= 1.0) => {
                bad("exponent must lie in (0, 1]")
            }
            _ => Ok(()),
        }
    }

    pub fn eval(&self, path: &StepPath) -> Result<f64> {
        let x = path.terminal()[0];
        let v = match *self {
            Payoff::Power { gamma } => {
                if !(x > 0.0) {
                    return Err(Error::Evaluation { step: path.len() - 1, message: format!("power payoff at {x}") });
                }
                x.powf(gamma) / gamma
            }
            Payoff::Terminal { scale } => scale * x,
            Payoff::Constant { value } => value,
            Payoff::Call { strike, cap } => (x - strike).max(0.0).min(cap),
            Payoff::Holder { amplitude, frequency, phase, exponent } => {
                let s = (frequency * x + phase).sin();
                amplitude * s.signum() * s.abs().powf(exponent)
            }
            Payoff::RunningMax { cap } => path.values.iter().map(|v| v[0]).fold(f64::NEG_INFINITY, f64::max).min(cap),
        };
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Evaluation { step: path.len() - 1, message: format!("payoff evaluated to {v}") })
        }
    }

    /// Whether the payoff depends only on the terminal value.
    pub fn is_terminal(&self) -> bool {
        !matches!(self, Payoff::RunningMax { .. })
    }

    /// `(L, γ)` with `|ξ(x) - ξ(y)| <= L |x - y|^γ` in the state variable.
    pub fn holder(&self) -> (f64, f64) {
        match *self {
            Payoff::Power { gamma } => (1.0 / gamma, gamma),
            Payoff::Terminal { scale } => (scale.abs(), 1.0),
            Payoff::Constant { .. } => (0.0, 1.0),
            Payoff::Call { .. } | Payoff::RunningMax { .. } => (1.0, 1.0),
            Payoff::Holder { amplitude, frequency, exponent, .. } => {
                (amplitude.abs() * 2f64.powf(1.0 - exponent) * frequency.abs().powf(exponent), exponent)
            }
        }
    }
}

/// Scalar coefficient functional of time, the path so far and the action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Coefficient {
    Constant { value: f64 },
    /// `state·x(t) + action·a + time·t + constant`.
    Linear {
        #[serde(default)]
        state: f64,
        #[serde(default)]
        action: f64,
        #[serde(default)]
        time: f64,
        #[serde(default)]
        constant: f64,
    },
    /// `strength·(max_{s<=t} x(s) - x(t)) + action·a`.
    RunningMaxDrift {
        strength: f64,
        #[serde(default)]
        action: f64,
    },
}

impl Coefficient {
    /// Evaluates on component `i` of a path given by `values[0..=n]`.
    pub fn eval(&self, t: f64, values: &[Vec<f64>], i: usize, action: f64) -> f64 {
        let x = values.last().map_or(0.0, |v| v[i]);
        match *self {
            Coefficient::Constant { value } => value,
            Coefficient::Linear { state, action: b, time, constant } => state * x + b * action + time * t + constant,
            Coefficient::RunningMaxDrift { strength, action: b } => {
                let m = values.iter().map(|v| v[i]).fold(f64::NEG_INFINITY, f64::max);
                strength * (m - x) + b * action
            }
        }
    }

    /// Sup of `|coefficient|` over states with `|x| <= radius`, times in
    /// `[0, horizon]` and actions in `[-bound, bound]`.
    pub fn local_bound(&self, radius: f64, horizon: f64, bound: f64) -> f64 {
        match *self {
            Coefficient::Constant { value } => value.abs(),
            Coefficient::Linear { state, action, time, constant } => {
                state.abs() * radius + action.abs() * bound + time.abs() * horizon + constant.abs()
            }
            Coefficient::RunningMaxDrift { strength, action } => 2.0 * strength.abs() * radius + action.abs() * bound,
        }
    }
}

fn check_finite(v: f64, step: usize, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Evaluation { step, message: format!("{what} evaluated to {v}") })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path(vals: &[f64]) -> StepPath {
        StepPath { times: (0..vals.len()).map(|i| i as f64).collect(), values: vals.iter().map(|v| vec![*v]).collect() }
    }

    #[test]
    fn step_path_lookup() {
        let p = path(&[1.0, 2.0, 3.0]);
        assert_eq!(p.value_at(0.0), &[1.0]);
        assert_eq!(p.value_at(1.5), &[2.0]);
        assert_eq!(p.value_at(9.0), &[3.0]);
    }

    #[test]
    fn payoffs() {
        let p = path(&[1.0, 4.0]);
        assert!((Payoff::Power { gamma: 0.5 }.eval(&p).unwrap() - 4.0).abs() < 1e-15);
        assert_eq!(Payoff::Call { strike: 3.0, cap: 0.5 }.eval(&p).unwrap(), 0.5);
        assert_eq!(Payoff::RunningMax { cap: 10.0 }.eval(&path(&[1.0, 5.0, 2.0])).unwrap(), 5.0);
        assert!(Payoff::Power { gamma: 0.5 }.eval(&path(&[-1.0])).is_err());
        assert!(Payoff::Power { gamma: 1.5 }.validate().is_err());
    }

    #[test]
    fn holder_payoff_respects_its_constant() {
        let f = Payoff::Holder { amplitude: 0.7, frequency: 3.0, phase: 0.2, exponent: 0.5 };
        let (l, g) = f.holder();
        for (x, y) in [(0.0, 0.01), (1.0, 1.3), (-0.4, 0.9)] {
            let d = (f.eval(&path(&[x])).unwrap() - f.eval(&path(&[y])).unwrap()).abs();
            assert!(d <= l * (x - y).abs().powf(g) + 1e-15);
        }
    }

    #[test]
    fn strict_configs() {
        assert!(serde_json::from_str::<Payoff>(r#"{"kind":"power","gamma":0.5}"#).is_ok());
        assert!(serde_json::from_str::<Payoff>(r#"{"kind":"power","gamma":0.5,"gama":1}"#).is_err());
        assert!(serde_json::from_str::<Coefficient>(r#"{"kind":"linear","state":0.1}"#).is_ok());
        assert!(serde_json::from_str::<Coefficient>(r#"{"kind":"linear","sate":0.1}"#).is_err());
        assert!(serde_json::from_str::<Coefficient>(r#"{"kind":"quadratic"}"#).is_err());
    }

    #[test]
    fn running_max_drift() {
        let c = Coefficient::RunningMaxDrift { strength: 2.0, action: 1.0 };
        assert_eq!(c.eval(0.0, &[vec![1.0], vec![3.0], vec![2.0]], 0, 0.5), 2.5);
    }
}
