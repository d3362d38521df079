//! Euler scheme for a path-dependent SDE on the skeleton's random partition.
//!
//! The drift is evaluated at the previous skeleton time on the current path
//! with the current action. The diffusion column of the coordinate that
//! fires is evaluated at that coordinate's previous hit time, on the path
//! frozen there, with the action chosen at that hit.

use serde::{Deserialize, Serialize};

use super::{check_finite, Coefficient, StateStructure, StepPath};
use crate::error::{Error, Result};
use crate::skeleton::SignVec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PdSdeSpec {
    pub x0: Vec<f64>,
    #[serde(default = "one_dim")]
    pub noise_dim: usize,
    /// One drift coefficient per state component.
    pub drift: Vec<Coefficient>,
    /// One diffusion factor per state component.
    pub diffusion: Vec<Coefficient>,
    /// `n × d` loadings; row `i` spreads component `i`'s diffusion factor
    /// over the noise coordinates. Defaults to all ones for a scalar state
    /// and to the identity pattern otherwise.
    #[serde(default)]
    pub mixing: Option<Vec<Vec<f64>>>,
}

fn one_dim() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq)]
pub struct PdSdeState {
    times: Vec<f64>,
    values: Vec<Vec<f64>>,
    actions: Vec<Vec<f64>>,
    /// Per coordinate, the index into `times` of its last hit (0 = start).
    last_hit: Vec<usize>,
}

impl PdSdeState {
    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn actions(&self) -> &[Vec<f64>] {
        &self.actions
    }

    pub fn last_hit(&self) -> &[usize] {
        &self.last_hit
    }

    pub fn current(&self) -> &[f64] {
        self.values.last().expect("initial value present")
    }
}

#[derive(Debug, Clone)]
pub struct PdSdeStructure {
    spec: PdSdeSpec,
    epsilon: f64,
    mixing: Vec<Vec<f64>>,
}

impl PdSdeStructure {
    pub fn new(spec: PdSdeSpec, epsilon: f64) -> Result<Self> {
        let n = spec.x0.len();
        let d = spec.noise_dim;
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::config(format!("epsilon must be positive, got {epsilon}")));
        }
        if n == 0 || d == 0 {
            return Err(Error::config("pd_sde needs x0 and noise_dim >= 1"));
        }
        if spec.drift.len() != n || spec.diffusion.len() != n {
            return Err(Error::config(format!("pd_sde: drift and diffusion need {n} entries each")));
        }
        let mixing = match &spec.mixing {
            Some(m) => {
                if m.len() != n || m.iter().any(|r| r.len() != d) {
                    return Err(Error::config(format!("pd_sde: mixing must be {n} x {d}")));
                }
                m.clone()
            }
            None => (0..n).map(|i| (0..d).map(|j| if n == 1 || i == j { 1.0 } else { 0.0 }).collect()).collect(),
        };
        Ok(Self { spec, epsilon, mixing })
    }

    pub fn spec(&self) -> &PdSdeSpec {
        &self.spec
    }
}

fn action_component(a: &[f64], i: usize) -> f64 {
    if a.is_empty() {
        0.0
    } else {
        a[i % a.len()]
    }
}

impl StateStructure for PdSdeStructure {
    type State = PdSdeState;

    fn noise_dim(&self) -> usize {
        self.spec.noise_dim
    }

    fn state_dim(&self) -> usize {
        self.spec.x0.len()
    }

    fn epsilon(&self) -> f64 {
        self.epsilon
    }

    fn initial_state(&self) -> PdSdeState {
        PdSdeState {
            times: vec![0.0],
            values: vec![self.spec.x0.clone()],
            actions: Vec::new(),
            last_hit: vec![0; self.spec.noise_dim],
        }
    }

    fn step(&self, s: &PdSdeState, action: &[f64], delta_t: f64, sign: SignVec) -> Result<PdSdeState> {
        let q = s.times.len();
        let j = sign.coord();
        if j >= self.spec.noise_dim {
            return Err(Error::domain(format!("sign vector coordinate {j} out of range")));
        }
        let t_prev = s.times[q - 1];
        let p = s.last_hit[j];
        let frozen = &s.values[..=p];
        let lag_action: &[f64] = if p == q - 1 { action } else { &s.actions[p] };
        let x = s.current();
        let mut next = Vec::with_capacity(x.len());
        for (i, xi) in x.iter().enumerate() {
            let drift = self.spec.drift[i].eval(t_prev, &s.values, i, action_component(action, i));
            let diff = self.spec.diffusion[i].eval(s.times[p], frozen, i, action_component(lag_action, i));
            let v = xi + drift * delta_t + diff * self.mixing[i][j] * self.epsilon * sign.sign_f64();
            next.push(check_finite(v, q, "pd_sde state")?);
        }
        let mut out = s.clone();
        out.times.push(t_prev + delta_t);
        out.values.push(next);
        out.actions.push(action.to_vec());
        out.last_hit[j] = q;
        Ok(out)
    }

    fn path(&self, s: &PdSdeState) -> StepPath {
        StepPath { times: s.times.clone(), values: s.values.clone() }
    }
}
