//! Wealth process of a constant-rebalancing portfolio on the skeleton, kept
//! in log space, and its closed-form one-stage objective.

use std::f64::consts::{FRAC_2_PI, PI};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{check_finite, Bins, StateStructure, StepPath};
use crate::density::{self, SeriesTruncation};
use crate::error::{Error, Result};
use crate::quadrature::{self, Tolerance};
use crate::skeleton::SignVec;

/// Deterministic coefficient `value + slope·t`; a bare number is constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TimeCoef {
    Constant(f64),
    Affine(AffineCoef),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AffineCoef {
    pub value: f64,
    #[serde(default)]
    pub slope: f64,
}

impl TimeCoef {
    pub fn at(&self, t: f64) -> f64 {
        match *self {
            TimeCoef::Constant(v) => v,
            TimeCoef::Affine(AffineCoef { value, slope }) => value + slope * t,
        }
    }

    pub fn varies(&self) -> bool {
        matches!(*self, TimeCoef::Affine(AffineCoef { slope, .. }) if slope != 0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PortfolioSpec {
    pub r: f64,
    pub alpha: TimeCoef,
    pub sigma: TimeCoef,
    /// Utility exponent in `(0, 1)`.
    pub gamma: f64,
    pub x0: f64,
    #[serde(default = "one")]
    pub horizon: f64,
}

fn one() -> f64 {
    1.0
}

impl PortfolioSpec {
    pub fn merton(&self) -> Result<f64> {
        let s = self.sigma.at(0.0);
        if s == 0.0 {
            return Err(Error::domain("Merton fraction needs sigma != 0"));
        }
        Ok(((self.alpha.at(0.0) - self.r) / ((1.0 - self.gamma) * s * s)).clamp(-1.0, 1.0))
    }
}

/// One point of the wealth path, shared by every later state built on it.
#[derive(Debug, PartialEq)]
struct Point {
    time: f64,
    log_wealth: f64,
    prev: Option<Arc<Point>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PortfolioState {
    elapsed: f64,
    head: Arc<Point>,
    len: usize,
}

impl PortfolioState {
    pub fn elapsed(&self) -> f64 {
        self.elapsed
    }

    pub fn log_wealth(&self) -> f64 {
        self.head.log_wealth
    }

    pub fn wealth(&self) -> f64 {
        self.log_wealth().exp()
    }

    /// `(time, log wealth)` from the start to now.
    pub fn log_path(&self) -> Vec<(f64, f64)> {
        let mut out = Vec::with_capacity(self.len);
        let mut p = Some(&self.head);
        while let Some(pt) = p {
            out.push((pt.time, pt.log_wealth));
            p = pt.prev.as_ref();
        }
        out.reverse();
        out
    }
}

#[derive(Debug, Clone)]
pub struct PortfolioStructure {
    spec: PortfolioSpec,
    epsilon: f64,
    stage_terms: usize,
}

impl PortfolioStructure {
    pub fn new(spec: PortfolioSpec, epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::config(format!("epsilon must be positive, got {epsilon}")));
        }
        if !(spec.x0 > 0.0) {
            return Err(Error::config("portfolio: x0 must be positive"));
        }
        if !(spec.gamma > 0.0 && spec.gamma < 1.0) {
            return Err(Error::config("portfolio: gamma must lie in (0, 1)"));
        }
        if !(spec.horizon > 0.0) {
            return Err(Error::config("portfolio: horizon must be positive"));
        }
        for t in [0.0, spec.horizon] {
            if spec.sigma.at(t) == 0.0 {
                return Err(Error::config("portfolio: sigma must not vanish"));
            }
        }
        Ok(Self { spec, epsilon, stage_terms: 12 })
    }

    /// Series terms used by the stage objective when refining actions.
    pub fn with_stage_terms(mut self, n: usize) -> Self {
        self.stage_terms = n.max(1);
        self
    }

    pub fn spec(&self) -> &PortfolioSpec {
        &self.spec
    }

    /// Exponent rate `p(a)` at elapsed time `t`.
    pub fn rate(&self, a: f64, t: f64) -> f64 {
        let g = self.spec.gamma;
        let s = self.spec.sigma.at(t);
        g * (a * (self.spec.alpha.at(t) - self.spec.r) + self.spec.r) - 0.5 * g * a * a * s * s
    }

    fn stage_prefactor(&self, a: f64, t: f64) -> f64 {
        (self.spec.gamma * self.spec.sigma.at(t) * self.epsilon * a).cosh() / self.spec.gamma
    }

    /// Upper limit in unit time and the integrand's exponential rate.
    fn stage_range(&self, a: f64, t: f64, truncate: bool) -> Result<(f64, f64)> {
        let e2 = self.epsilon * self.epsilon;
        let k = self.rate(a, t) * e2;
        if k >= PI * PI / 8.0 {
            return Err(Error::numerical(format!("stage integral diverges at a = {a}")));
        }
        let cutoff = 45.0 / (PI * PI / 8.0 - k) + 1.0;
        let upper = if truncate { ((self.spec.horizon - t) / e2).min(cutoff) } else { cutoff };
        Ok((upper, k))
    }

    fn stage_integral<F: Fn(f64) -> f64>(&self, a: f64, t: f64, truncate: bool, f: F, tol: Tolerance) -> Result<f64> {
        let (upper, k) = self.stage_range(a, t, truncate)?;
        if upper <= 0.0 {
            return Ok(0.0);
        }
        let pts: Vec<f64> = if upper > FRAC_2_PI { vec![0.0, FRAC_2_PI, upper] } else { vec![0.0, upper] };
        let v = quadrature::integrate_pieces(|u| (k * u).exp() * f(u), &pts, tol)?;
        Ok(self.stage_prefactor(a, t) * v)
    }

    /// `g(a)` at elapsed time `t`: the one-stage expected growth factor of
    /// `x^γ/γ`, restricted to steps ending before the horizon when
    /// `truncate` is set, with the density replaced by its `n`-term
    /// partial sum when `n_terms` is given.
    pub fn stage_g(&self, a: f64, t: f64, n_terms: Option<usize>, truncate: bool) -> Result<f64> {
        let tol = Tolerance::new(1e-15, 1e-12);
        match n_terms {
            None => self.stage_integral(a, t, truncate, density::density, tol),
            Some(n) => {
                let tr = SeriesTruncation::new(n)?;
                self.stage_integral(a, t, truncate, |u| density::f_tau(u, tr).unwrap_or(0.0), tol)
            }
        }
    }

    /// `g(a) - g_n(a)` computed from the omitted series terms, accurate far
    /// below the rounding level of `g`.
    pub fn stage_gap(&self, a: f64, t: f64, n: usize, truncate: bool) -> Result<f64> {
        self.stage_integral(a, t, truncate, |u| density::truncation_remainder(u, n), Tolerance::new(0.0, 1e-9))
    }

    /// Closed-form bound on `sup_a |g - g_n|` over `|a| <= bound`:
    /// `max cosh / γ · e^{max(p,0)·T} · (2e^{-(2n+1)²/2} + 4/(π(2n+1)) e^{-πn²-πn-π/4})`.
    pub fn stage_gap_bound(&self, n: usize, bound: f64) -> f64 {
        let c = (2 * n + 1) as f64;
        let nn = n as f64;
        let series = 2.0 * (-c * c / 2.0).exp() + 4.0 / (PI * c) * (-PI * nn * nn - PI * nn - PI / 4.0).exp();
        let pmax = [-bound, 0.0, bound].iter().map(|&a| self.rate(a, 0.0)).fold(0.0, f64::max);
        self.stage_prefactor(bound, 0.0) * (pmax * self.spec.horizon).exp() * series
    }
}

impl StateStructure for PortfolioStructure {
    type State = PortfolioState;

    fn noise_dim(&self) -> usize {
        1
    }

    fn state_dim(&self) -> usize {
        1
    }

    fn epsilon(&self) -> f64 {
        self.epsilon
    }

    fn initial_state(&self) -> PortfolioState {
        PortfolioState { elapsed: 0.0, head: Arc::new(Point { time: 0.0, log_wealth: self.spec.x0.ln(), prev: None }), len: 1 }
    }

    fn step(&self, s: &PortfolioState, action: &[f64], delta_t: f64, sign: SignVec) -> Result<PortfolioState> {
        if sign.coord() != 0 {
            return Err(Error::domain("the portfolio structure has a single noise coordinate"));
        }
        let a = action.first().copied().unwrap_or(0.0);
        let t = s.elapsed;
        let sig = self.spec.sigma.at(t);
        let growth = (a * (self.spec.alpha.at(t) - self.spec.r) + self.spec.r) * delta_t - 0.5 * a * a * sig * sig * delta_t
            + a * sig * self.epsilon * sign.sign_f64();
        let lw = check_finite(s.log_wealth() + growth, s.len, "log wealth")?;
        let elapsed = t + delta_t;
        Ok(PortfolioState { elapsed, head: Arc::new(Point { time: elapsed, log_wealth: lw, prev: Some(s.head.clone()) }), len: s.len + 1 })
    }

    fn path(&self, s: &PortfolioState) -> StepPath {
        let (times, values) = s.log_path().into_iter().map(|(t, l)| (t, vec![l.exp()])).unzip();
        StepPath { times, values }
    }

    fn collapse(&self, s: &PortfolioState, bins: &Bins) -> Option<(Vec<i64>, PortfolioState)> {
        let w = bins.state.ln_1p();
        let k = (s.log_wealth() / w).round();
        let mut rep = s.clone();
        rep.head = Arc::new(Point { time: s.head.time, log_wealth: k * w, prev: s.head.prev.clone() });
        let mut key = vec![k as i64];
        if self.spec.alpha.varies() || self.spec.sigma.varies() {
            let kt = (s.elapsed / bins.time).round();
            key.push(kt as i64);
            rep.elapsed = kt * bins.time;
        }
        Some((key, rep))
    }

    fn stage_objective(&self, s: &PortfolioState, action: &[f64]) -> Option<Result<f64>> {
        let a = action.first().copied().unwrap_or(0.0);
        Some(self.stage_g(a, s.elapsed, Some(self.stage_terms), false))
    }

    fn stage_cache_key(&self, s: &PortfolioState) -> Option<Vec<u64>> {
        let varies = self.spec.alpha.varies() || self.spec.sigma.varies();
        Some(if varies { vec![s.elapsed.to_bits()] } else { Vec::new() })
    }
}
