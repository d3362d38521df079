//! Fractional Brownian motion built from the skeleton through a Volterra
//! kernel acting on the Brownian path, and the drift-control structure it
//! drives.
//!
//! With `c = H - 1/2`, `p = 1/c` and `d' = c·d_H`,
//!
//! ```text
//! ρ(t,s) = d' s^{-H-1/2} [ ∫_0^{(t-s)^c} (s + w^p)^c dw  -  t^{H+1/2} (t-s)^{H-3/2} ]
//! ```
//!
//! which is the kernel with its inner integral rewritten by `u = s + w^p`,
//! a substitution that makes the integrand smooth. The kernel is
//! homogeneous, `ρ(λt, λs) = λ^{H-3/2} ρ(t,s)`, so its tail integrals
//! `R(t,a) = ∫_a^t ρ(t,s) ds = t^c R1(a/t)` and
//! `P(t,a) = ∫_a^t ρ(t,s) s ds = t^{H+1/2} P1(a/t)` follow from two
//! one-variable functions, tabulated once per `H` with Hermite interpolation.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{check_finite, Coefficient, StateStructure, StepPath};
use crate::error::{Error, Result};
use crate::quadrature::{self, Tolerance};
use crate::skeleton::{SignVec, SkeletonPath};

const X_MIN: f64 = 1e-12;
const X_SPLIT: f64 = 0.5;
const N_LOW: usize = 1400;
const N_HIGH: usize = 500;
const INNER_TOL: Tolerance = Tolerance::new(1e-16, 1e-13);

/// Cubic Hermite interpolant on a uniform grid.
#[derive(Debug, Clone)]
struct Table {
    x0: f64,
    h: f64,
    f: Vec<f64>,
    df: Vec<f64>,
}

impl Table {
    fn eval(&self, x: f64) -> f64 {
        let n = self.f.len();
        let u = ((x - self.x0) / self.h).clamp(0.0, (n - 1) as f64);
        let k = (u.floor() as usize).min(n - 2);
        let s = u - k as f64;
        let (s2, s3) = (s * s, s * s * s);
        let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
        let h10 = s3 - 2.0 * s2 + s;
        let h01 = -2.0 * s3 + 3.0 * s2;
        let h11 = s3 - s2;
        h00 * self.f[k] + h10 * self.h * self.df[k] + h01 * self.f[k + 1] + h11 * self.h * self.df[k + 1]
    }
}

/// Shape tables for one Hurst index, computed with `d' = 1`.
#[derive(Debug)]
struct Shape {
    hurst: f64,
    /// `R1` and `P1` against `y = ln x` on `[ln X_MIN, ln X_SPLIT]`.
    r_low: Table,
    p_low: Table,
    /// `R1` and `P1` against `v = (1-x)^c` on `[0, (1-X_SPLIT)^c]`.
    r_high: Table,
    p_high: Table,
}

fn check_hurst(h: f64) -> Result<()> {
    if h > 0.5 && h < 1.0 {
        Ok(())
    } else {
        Err(Error::config(format!("Hurst index must lie in (1/2, 1), got {h}")))
    }
}

/// `∫_0^{(t-s)^c} (s + w^p)^c dw`.
fn inner(c: f64, t: f64, s: f64) -> Result<f64> {
    let p = 1.0 / c;
    let v = (t - s).powf(c);
    if !(v > 0.0) {
        return Ok(0.0);
    }
    let knee = s.powf(c);
    let pts: Vec<f64> = if knee > 0.0 && knee < v { vec![0.0, knee, v] } else { vec![0.0, v] };
    quadrature::integrate_pieces(|w| (s + w.powf(p)).powf(c), &pts, INNER_TOL)
}

impl Shape {
    fn build(hurst: f64) -> Result<Self> {
        let c = hurst - 0.5;
        let p = 1.0 / c;
        let (gx, gw) = quadrature::gauss_legendre(16);
        // Unit-d' kernel at t = 1.
        let rho1 = |x: f64| -> Result<f64> { Ok(x.powf(-hurst - 0.5) * (inner(c, 1.0, x)? - (1.0 - x).powf(hurst - 1.5))) };
        let dr_dv = |v: f64| -> Result<f64> {
            let x = 1.0 - v.powf(p);
            let j = if v > 0.0 { inner(c, 1.0, x)? * v.powf(p - 1.0) } else { 0.0 };
            Ok(x.powf(-hurst - 0.5) * p * (j - 1.0))
        };
        let dr_dy = |y: f64| -> Result<f64> {
            let x = y.exp();
            Ok(-rho1(x)? * x)
        };

        // Near x = 1, in v, accumulating from v = 0 where R1 = P1 = 0.
        let v_max = (1.0 - X_SPLIT).powf(c);
        let hv = v_max / N_HIGH as f64;
        let cells: Vec<(f64, f64)> = (0..N_HIGH)
            .into_par_iter()
            .map(|k| -> Result<(f64, f64)> {
                let (a, b) = (k as f64 * hv, (k + 1) as f64 * hv);
                let mut r = 0.0;
                let mut q = 0.0;
                for (x, w) in gx.iter().zip(&gw) {
                    let v = 0.5 * (a + b) + 0.5 * (b - a) * x;
                    let d = dr_dv(v)? * 0.5 * (b - a) * w;
                    r += d;
                    q += d * (1.0 - v.powf(p));
                }
                Ok((r, q))
            })
            .collect::<Result<_>>()?;
        let node_d: Vec<f64> = (0..=N_HIGH).into_par_iter().map(|k| dr_dv(k as f64 * hv)).collect::<Result<_>>()?;
        let mut rf = vec![0.0];
        let mut pf = vec![0.0];
        for (dr, dp) in &cells {
            rf.push(rf.last().unwrap() + dr);
            pf.push(pf.last().unwrap() + dp);
        }
        let pdf: Vec<f64> = node_d.iter().enumerate().map(|(k, d)| d * (1.0 - (k as f64 * hv).powf(p))).collect();
        let r_high = Table { x0: 0.0, h: hv, f: rf, df: node_d };
        let p_high = Table { x0: 0.0, h: hv, f: pf, df: pdf };

        // Below the split, in y = ln x, accumulating downwards.
        let (y0, y1) = (X_MIN.ln(), X_SPLIT.ln());
        let hy = (y1 - y0) / N_LOW as f64;
        let cells: Vec<(f64, f64)> = (0..N_LOW)
            .into_par_iter()
            .map(|k| -> Result<(f64, f64)> {
                let (a, b) = (y0 + k as f64 * hy, y0 + (k + 1) as f64 * hy);
                let mut r = 0.0;
                let mut q = 0.0;
                for (x, w) in gx.iter().zip(&gw) {
                    let y = 0.5 * (a + b) + 0.5 * (b - a) * x;
                    let d = dr_dy(y)? * 0.5 * (b - a) * w;
                    r += d;
                    q += d * y.exp();
                }
                Ok((r, q))
            })
            .collect::<Result<_>>()?;
        let node_d: Vec<f64> = (0..=N_LOW).into_par_iter().map(|k| dr_dy(y0 + k as f64 * hy)).collect::<Result<_>>()?;
        let mut rf = vec![0.0; N_LOW + 1];
        let mut pf = vec![0.0; N_LOW + 1];
        rf[N_LOW] = *r_high.f.last().unwrap();
        pf[N_LOW] = *p_high.f.last().unwrap();
        for k in (0..N_LOW).rev() {
            rf[k] = rf[k + 1] - cells[k].0;
            pf[k] = pf[k + 1] - cells[k].1;
        }
        let pdf: Vec<f64> = node_d.iter().enumerate().map(|(k, d)| d * (y0 + k as f64 * hy).exp()).collect();
        let r_low = Table { x0: y0, h: hy, f: rf, df: node_d };
        let p_low = Table { x0: y0, h: hy, f: pf, df: pdf };
        Ok(Self { hurst, r_low, p_low, r_high, p_high })
    }

    fn r1(&self, x: f64) -> f64 {
        let c = self.hurst - 0.5;
        if x >= 1.0 {
            0.0
        } else if x >= X_SPLIT {
            self.r_high.eval((1.0 - x).powf(c))
        } else if x >= X_MIN {
            self.r_low.eval(x.ln())
        } else {
            self.r_low.f[0] * (x / X_MIN).powf(-c)
        }
    }

    fn p1(&self, x: f64) -> f64 {
        let c = self.hurst - 0.5;
        if x >= 1.0 {
            0.0
        } else if x >= X_SPLIT {
            self.p_high.eval((1.0 - x).powf(c))
        } else if x >= X_MIN {
            self.p_low.eval(x.ln())
        } else {
            self.p_low.f[0]
        }
    }
}

fn shape(hurst: f64) -> Result<Arc<Shape>> {
    static CACHE: OnceLock<Mutex<HashMap<u64, Arc<Shape>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(s) = cache.lock().expect("shape cache").get(&hurst.to_bits()) {
        return Ok(s.clone());
    }
    let s = Arc::new(Shape::build(hurst)?);
    cache.lock().expect("shape cache").insert(hurst.to_bits(), s.clone());
    Ok(s)
}

/// The Volterra kernel for one `(H, d_H)`.
#[derive(Debug, Clone)]
pub struct FbmKernel {
    hurst: f64,
    d_h: f64,
    shape: Arc<Shape>,
}

impl FbmKernel {
    pub fn new(hurst: f64, d_h: f64) -> Result<Self> {
        check_hurst(hurst)?;
        if !(d_h > 0.0 && d_h.is_finite()) {
            return Err(Error::config(format!("d_H must be positive, got {d_h}")));
        }
        Ok(Self { hurst, d_h, shape: shape(hurst)? })
    }

    /// Kernel with `d_H` chosen so that the limit has `Var B_H(1) = 1`.
    pub fn unit_variance(hurst: f64) -> Result<Self> {
        let k = Self::new(hurst, 1.0)?;
        let v = k.variance_at_one()?;
        Self::new(hurst, 1.0 / v.sqrt())
    }

    pub fn hurst(&self) -> f64 {
        self.hurst
    }

    pub fn d_h(&self) -> f64 {
        self.d_h
    }

    fn scale(&self) -> f64 {
        (self.hurst - 0.5) * self.d_h
    }

    /// `ρ_H(t, s)` by direct quadrature, for `0 < s < t`.
    pub fn rho(&self, t: f64, s: f64) -> Result<f64> {
        if !(s > 0.0 && s < t) {
            return Err(Error::domain(format!("rho needs 0 < s < t, got s={s}, t={t}")));
        }
        let h = self.hurst;
        let bracket = inner(h - 0.5, t, s)? - t.powf(h + 0.5) * (t - s).powf(h - 1.5);
        Ok(self.scale() * s.powf(-h - 0.5) * bracket)
    }

    /// `∫_a^t ρ(t,s) ds` for `0 < a`; zero when `a >= t`.
    pub fn tail(&self, t: f64, a: f64) -> f64 {
        if a >= t {
            return 0.0;
        }
        self.scale() * t.powf(self.hurst - 0.5) * self.shape.r1(a / t)
    }

    /// `∫_a^t ρ(t,s) s ds` for `0 <= a`; zero when `a >= t`.
    pub fn tail_moment(&self, t: f64, a: f64) -> f64 {
        if a >= t {
            return 0.0;
        }
        self.scale() * t.powf(self.hurst + 0.5) * self.shape.p1(a / t)
    }

    /// `Var B_H(1) = ∫_0^1 (∫_u^1 ρ(1,s) ds)^2 du`.
    pub fn variance_at_one(&self) -> Result<f64> {
        let tol = Tolerance::new(1e-14, 1e-11);
        let low = quadrature::integrate(|y| self.tail(1.0, y.exp()).powi(2) * y.exp(), X_MIN.ln(), X_SPLIT.ln(), tol)?.value;
        let high = quadrature::integrate(|x| self.tail(1.0, x).powi(2), X_SPLIT, 1.0, tol)?.value;
        let c = self.hurst - 0.5;
        let lead = self.tail(1.0, X_MIN) * X_MIN.powf(c);
        let below = lead * lead * X_MIN.powf(1.0 - 2.0 * c) / (1.0 - 2.0 * c);
        Ok(low + high + below)
    }

    /// `B^k_H(t) = ∫_0^t ρ(t,s) A(s) ds` for a step function `A` equal to
    /// `levels[i]` on `[times[i], times[i+1])`, with `times[0] = 0` and
    /// `levels[0] = 0`.
    pub fn apply_to_steps(&self, times: &[f64], levels: &[f64], t: f64) -> f64 {
        let mut acc = 0.0;
        for i in 1..times.len() {
            if times[i] >= t {
                break;
            }
            let next = times.get(i + 1).map_or(t, |&s| s.min(t));
            acc += levels[i] * (self.tail(t, times[i]) - self.tail(t, next));
        }
        acc
    }

    /// `W^k_H` on a time grid: `B^k_H` frozen at the last skeleton time.
    pub fn fbm_from_skeleton(&self, path: &SkeletonPath, t_grid: &[f64]) -> Vec<f64> {
        let (times, levels) = skeleton_levels(path);
        t_grid
            .iter()
            .map(|&t| {
                let n = times.partition_point(|&s| s <= t).max(1) - 1;
                if n == 0 {
                    0.0
                } else {
                    self.apply_to_steps(&times, &levels, times[n])
                }
            })
            .collect()
    }

    /// The kernel applied to the piecewise-linear interpolation of a fine
    /// Brownian path `b[i]` at `i·dt`, evaluated at `t = n·dt`.
    pub fn apply_to_linear(&self, b: &[f64], dt: f64, n: usize) -> f64 {
        let t = n as f64 * dt;
        let mut acc = 0.0;
        let mut r_prev = f64::NAN;
        let mut p_prev = self.tail_moment(t, 0.0);
        for j in 0..n {
            let s_next = (j + 1) as f64 * dt;
            let (r_next, p_next) = (self.tail(t, s_next), self.tail_moment(t, s_next));
            let slope = (b[j + 1] - b[j]) / dt;
            if j == 0 {
                acc += slope * (p_prev - p_next);
            } else {
                let dr = r_prev - r_next;
                acc += b[j] * dr + slope * ((p_prev - p_next) - j as f64 * dt * dr);
            }
            r_prev = r_next;
            p_prev = p_next;
        }
        acc
    }
}

/// Skeleton hitting times and the level of `A` right after each.
pub fn skeleton_levels(path: &SkeletonPath) -> (Vec<f64>, Vec<f64>) {
    let mut times = vec![0.0];
    let mut levels = vec![0.0];
    for (k, s) in path.steps().iter().enumerate() {
        times.push(path.time(k + 1));
        levels.push(levels[k] + path.epsilon() * s.sign.sign_f64());
    }
    (times, levels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FbmSpec {
    pub hurst: f64,
    pub sigma: f64,
    pub drift: Coefficient,
    pub x0: f64,
    /// Kernel constant; ignored when `unit_variance` is set.
    #[serde(default = "one")]
    pub d_h: f64,
    /// Pick `d_H` so that the limit has unit variance at time 1.
    #[serde(default)]
    pub unit_variance: bool,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq)]
pub struct FbmState {
    times: Vec<f64>,
    levels: Vec<f64>,
    fbm: Vec<f64>,
    values: Vec<f64>,
}

impl FbmState {
    pub fn fbm(&self) -> &[f64] {
        &self.fbm
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

#[derive(Debug, Clone)]
pub struct FbmStructure {
    spec: FbmSpec,
    epsilon: f64,
    kernel: FbmKernel,
}

impl FbmStructure {
    pub fn new(spec: FbmSpec, epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::config(format!("epsilon must be positive, got {epsilon}")));
        }
        let kernel = if spec.unit_variance { FbmKernel::unit_variance(spec.hurst)? } else { FbmKernel::new(spec.hurst, spec.d_h)? };
        Ok(Self { spec, epsilon, kernel })
    }

    pub fn kernel(&self) -> &FbmKernel {
        &self.kernel
    }
}

impl StateStructure for FbmStructure {
    type State = FbmState;

    fn noise_dim(&self) -> usize {
        1
    }

    fn state_dim(&self) -> usize {
        1
    }

    fn epsilon(&self) -> f64 {
        self.epsilon
    }

    fn initial_state(&self) -> FbmState {
        FbmState { times: vec![0.0], levels: vec![0.0], fbm: vec![0.0], values: vec![self.spec.x0] }
    }

    fn step(&self, s: &FbmState, action: &[f64], delta_t: f64, sign: SignVec) -> Result<FbmState> {
        if sign.coord() != 0 {
            return Err(Error::domain("the fBm structure has a single noise coordinate"));
        }
        let m = s.times.len();
        let t_prev = s.times[m - 1];
        let t = t_prev + delta_t;
        let mut out = s.clone();
        out.times.push(t);
        let w = self.kernel.apply_to_steps(&out.times, &s.levels, t);
        let hist: Vec<Vec<f64>> = s.values.iter().map(|&v| vec![v]).collect();
        let drift = self.spec.drift.eval(t_prev, &hist, 0, action.first().copied().unwrap_or(0.0));
        let x = s.values[m - 1] + drift * delta_t + self.spec.sigma * (w - s.fbm[m - 1]);
        out.levels.push(s.levels[m - 1] + self.epsilon * sign.sign_f64());
        out.fbm.push(w);
        out.values.push(check_finite(x, m, "fbm state")?);
        Ok(out)
    }

    fn path(&self, s: &FbmState) -> StepPath {
        StepPath { times: s.times.clone(), values: s.values.iter().map(|&v| vec![v]).collect() }
    }
}
