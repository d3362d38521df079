//! Exit time τ of standard Brownian motion from `[-1, 1]`.
//!
//! Two alternating series represent the density:
//!
//! ```text
//! small time:  f(x) = 2/sqrt(2πx³) · Σ (-1)^n (2n+1) exp(-(2n+1)²/(2x))
//! large time:  f(x) = π/2 · Σ (-1)^n (2n+1) exp(-π² x (2n+1)² / 8)
//! ```
//!
//! The small-time form is used below `2/π` and the large-time form from
//! `2/π` on. Integrating term by term gives closed forms for the CDF (via
//! `erfc` on the small-time side) and for the first moment, so no cached
//! interpolant is needed. A step of a skeleton with jump size ε lasts
//! `ε²·τ` in law.

use std::f64::consts::{FRAC_2_PI, PI};

use rand::Rng;
use rand_distr::Open01;
use serde::{Deserialize, Serialize};
use libm::erfc;

use crate::error::{Error, Result};
use crate::quadrature::{self, Tolerance};
use crate::rng;

/// Switch point between the two series.
pub const CROSSOVER: f64 = FRAC_2_PI;

/// Below this the small-time leading term is treated as zero.
const UNDERFLOW: f64 = 1e-300;
const MAX_TERMS: usize = 200;

/// Number of terms kept in a partial sum of either series.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeriesTruncation {
    n_terms: usize,
}

impl SeriesTruncation {
    pub fn new(n_terms: usize) -> Result<Self> {
        if n_terms == 0 {
            return Err(Error::config("series truncation needs at least one term"));
        }
        Ok(Self { n_terms })
    }

    pub fn n_terms(&self) -> usize {
        self.n_terms
    }

    pub fn crossover(&self) -> f64 {
        CROSSOVER
    }
}

fn check_positive(x: f64) -> Result<()> {
    if x > 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(Error::domain(format!("exit-time density needs x > 0, got {x}")))
    }
}

#[inline]
fn small_term(x: f64, l: usize) -> f64 {
    let c = (2 * l + 1) as f64;
    c * (-c * c / (2.0 * x)).exp()
}

#[inline]
fn large_term(x: f64, l: usize) -> f64 {
    let c = (2 * l + 1) as f64;
    c * (-PI * PI * x * c * c / 8.0).exp()
}

#[inline]
fn small_prefactor(x: f64) -> f64 {
    2.0 / (2.0 * PI * x * x * x).sqrt()
}

fn sign(l: usize) -> f64 {
    if l.is_multiple_of(2) {
        1.0
    } else {
        -1.0
    }
}

/// Partial sum of the small-time series over terms `0..n`.
pub fn small_time_series(x: f64, n: usize) -> f64 {
    let lead = small_prefactor(x) * small_term(x, 0);
    if !(lead >= UNDERFLOW) {
        return 0.0;
    }
    let s: f64 = (0..n).map(|l| sign(l) * small_term(x, l)).sum();
    small_prefactor(x) * s
}

/// Partial sum of the large-time series over terms `0..n`.
pub fn large_time_series(x: f64, n: usize) -> f64 {
    let s: f64 = (0..n).map(|l| sign(l) * large_term(x, l)).sum();
    0.5 * PI * s
}

/// `n`-term partial sum, choosing the series by the crossover.
pub fn f_tau(x: f64, trunc: SeriesTruncation) -> Result<f64> {
    check_positive(x)?;
    Ok(if x < CROSSOVER {
        small_time_series(x, trunc.n_terms)
    } else {
        large_time_series(x, trunc.n_terms)
    })
}

/// Density summed until terms stop contributing; zero for `x <= 0`.
pub fn density(x: f64) -> f64 {
    if !(x > 0.0) {
        return 0.0;
    }
    if x.is_infinite() {
        return 0.0;
    }
    if x < CROSSOVER {
        let pre = small_prefactor(x);
        if !(pre * small_term(x, 0) >= UNDERFLOW) {
            return 0.0;
        }
        pre * converged_sum(|l| small_term(x, l))
    } else {
        0.5 * PI * converged_sum(|l| large_term(x, l))
    }
}

fn converged_sum<T: Fn(usize) -> f64>(term: T) -> f64 {
    let mut s = 0.0;
    for l in 0..MAX_TERMS {
        let t = term(l);
        s += sign(l) * t;
        if t <= 1e-18 * s.abs() {
            break;
        }
    }
    s
}

/// Alternating-series bound on `|f(x) - f_{τ,n-1}(x)|`, where `f_{τ,n-1}`
/// keeps `n` terms; the first omitted term's magnitude.
pub fn truncation_bound(x: f64, n: usize) -> Result<f64> {
    check_positive(x)?;
    if n == 0 {
        return Err(Error::config("truncation bound needs n >= 1"));
    }
    Ok(if x < CROSSOVER {
        small_prefactor(x) * small_term(x, n)
    } else {
        0.5 * PI * large_term(x, n)
    })
}

/// Smallest `n` whose truncation bound at `x` is at most `delta`.
pub fn terms_for_tolerance(x: f64, delta: f64) -> Result<usize> {
    for n in 1..=MAX_TERMS {
        if truncation_bound(x, n)? <= delta {
            return Ok(n);
        }
    }
    Err(Error::numerical(format!(
        "no truncation below {delta:e} at x = {x} within {MAX_TERMS} terms"
    )))
}

/// `f(x) - f_{τ,n-1}(x)` summed directly from the omitted terms, accurate
/// even when the difference is far below the density's rounding level.
pub fn truncation_remainder(x: f64, n: usize) -> f64 {
    if !(x > 0.0) {
        return 0.0;
    }
    let (pre, term): (f64, Box<dyn Fn(usize) -> f64>) = if x < CROSSOVER {
        (small_prefactor(x), Box::new(move |l| small_term(x, l)))
    } else {
        (0.5 * PI, Box::new(move |l| large_term(x, l)))
    };
    let mut s = 0.0;
    for l in n..n + MAX_TERMS {
        let t = term(l);
        s += sign(l) * t;
        if t <= 1e-18 * s.abs() || t == 0.0 {
            break;
        }
    }
    pre * s
}

/// `P(τ <= x)`.
pub fn cdf(x: f64) -> f64 {
    if !(x > 0.0) {
        return 0.0;
    }
    if x < CROSSOVER {
        let r = 1.0 / (2.0 * x).sqrt();
        2.0 * converged_sum(|l| erfc((2 * l + 1) as f64 * r))
    } else {
        1.0 - survival(x)
    }
}

/// `P(τ > x)`, computed without cancellation on the large-time side.
pub fn survival(x: f64) -> f64 {
    if !(x > 0.0) {
        return 1.0;
    }
    if x.is_infinite() {
        return 0.0;
    }
    if x < CROSSOVER {
        1.0 - cdf(x)
    } else {
        4.0 / PI * converged_sum(|l| large_term(x, l) / ((2 * l + 1) * (2 * l + 1)) as f64)
    }
}

/// `∫_0^x t f(t) dt`, closed form term by term.
pub fn partial_mean(x: f64) -> f64 {
    if !(x > 0.0) {
        return 0.0;
    }
    if x < CROSSOVER {
        // ∫_0^x t^{-1/2} e^{-a/t} dt = 2√x e^{-a/x} - 2√(πa) erfc(√(a/x))
        let k = 2.0 / (2.0 * PI).sqrt();
        let s = converged_sum(|l| {
            let c = (2 * l + 1) as f64;
            let a = 0.5 * c * c;
            let v = 2.0 * x.sqrt() * (-a / x).exp() - 2.0 * (PI * a).sqrt() * erfc((a / x).sqrt());
            c * v.max(0.0)
        });
        k * s
    } else {
        1.0 - upper_mean(x)
    }
}

/// `∫_x^∞ t f(t) dt`.
pub fn upper_mean(x: f64) -> f64 {
    if !(x > 0.0) {
        return 1.0;
    }
    if x.is_infinite() {
        return 0.0;
    }
    if x < CROSSOVER {
        return 1.0 - partial_mean(x);
    }
    let s = converged_sum(|l| {
        let c = (2 * l + 1) as f64;
        let lam = PI * PI * c * c / 8.0;
        c * (-lam * x).exp() * (x / lam + 1.0 / (lam * lam))
    });
    0.5 * PI * s
}

/// Quantile function of τ, accurate to well below 1e-10.
pub fn inverse_cdf(u: f64) -> Result<f64> {
    if !(u > 0.0 && u < 1.0) {
        return Err(Error::domain(format!("inverse CDF needs 0 < u < 1, got {u}")));
    }
    if u <= 0.5 {
        // Leading-term asymptotics: u/2 ≈ erfc(z) ≈ exp(-z²)/(z√π), x = 1/(2z²).
        let mut z: f64 = 1.0;
        for _ in 0..4 {
            z = (-(0.5 * u * PI.sqrt() * z).ln()).max(0.25).sqrt();
        }
        let guess = 1.0 / (2.0 * z * z);
        newton_monotone(|x| cdf(x) - u, 1.0, guess)
    } else {
        let tail = 1.0 - u;
        inverse_survival(tail)
    }
}

/// Solves `survival(x) = p` for `0 < p < 1`.
pub fn inverse_survival(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::domain(format!("inverse survival needs 0 < p < 1, got {p}")));
    }
    if p >= 0.5 {
        return inverse_cdf(1.0 - p);
    }
    let guess = (-8.0 / (PI * PI) * (PI * p / 4.0).ln()).max(CROSSOVER);
    newton_monotone(|x| p - survival(x), 1.0, guess)
}

/// Newton iteration on an increasing `h` (derivative `slope·f(x)`), kept
/// inside a bisection bracket.
fn newton_monotone<H: Fn(f64) -> f64>(h: H, slope: f64, guess: f64) -> Result<f64> {
    let (mut lo, mut hi) = (1e-5, 200.0);
    let mut x = guess.clamp(lo, hi);
    for _ in 0..200 {
        let hx = h(x);
        if hx == 0.0 {
            return Ok(x);
        }
        if hx < 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        let d = slope * density(x);
        let mut next = if d > 0.0 { x - hx / d } else { f64::NAN };
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if (next - x).abs() <= 1e-15 * x || hi - lo <= 1e-15 * hi {
            return Ok(next);
        }
        x = next;
    }
    Err(Error::numerical("exit-time quantile iteration did not converge"))
}

/// One draw of τ by inversion.
pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u: f64 = rng.sample(Open01);
    inverse_cdf(u).expect("open-interval uniform is always invertible")
}

/// One draw of τ from a fresh stream keyed by `seed`.
pub fn sample_tau(seed: u64) -> f64 {
    sample(&mut rng::stream_rng(seed, 0))
}

/// Smallest `x` with `P(τ > x) <= tail`.
pub fn tail_cutoff(tail: f64) -> Result<f64> {
    inverse_survival(tail)
}

/// Density of the first inter-arrival time `ε²·τ` of a skeleton with jump
/// size ε.
pub fn scale_to_t1(x: f64, epsilon: f64) -> Result<f64> {
    check_positive(x)?;
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::config(format!("epsilon must be positive, got {epsilon}")));
    }
    let e2 = epsilon * epsilon;
    Ok(density(x / e2) / e2)
}

// ====================================================================
// Quantization
// ====================================================================

/// Finite support approximation of a law on `(0, ∞)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Quantization {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl Quantization {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(x, w)| x * w).sum()
    }

    pub fn expect<H: Fn(f64) -> f64>(&self, h: H) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(x, w)| w * h(*x)).sum()
    }

    fn validate(self) -> Result<Self> {
        let mass: f64 = self.weights.iter().sum();
        if (mass - 1.0).abs() > 1e-12 {
            return Err(Error::numerical(format!("quantization mass {mass} differs from 1")));
        }
        if self.weights.iter().any(|w| !(*w > 0.0)) {
            return Err(Error::numerical("quantization produced a non-positive weight"));
        }
        if self.nodes.windows(2).any(|w| !(w[1] > w[0])) || self.nodes.first().is_some_and(|x| !(*x > 0.0)) {
            return Err(Error::numerical("quantization nodes are not positive and strictly increasing"));
        }
        Ok(self)
    }
}

/// How a law is reduced to finitely many atoms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuantRule {
    /// Conditional means of `Q` equal-probability slices.
    Quantile,
    /// `Q`-point Gaussian rule for the law, tail mass folded into the last node.
    Gauss,
}

/// A law on `(0, ∞)` given by density and survival function.
pub trait PositiveLaw {
    fn density(&self, x: f64) -> f64;
    fn survival(&self, x: f64) -> f64;

    /// Solves `survival(x) = p`.
    fn inverse_survival(&self, p: f64) -> Result<f64> {
        let mut hi = 1.0;
        while self.survival(hi) > p {
            hi *= 2.0;
            if hi > 1e6 {
                return Err(Error::numerical("survival function does not decay"));
            }
        }
        quadrature::find_root(|x| self.survival(x) - p, 0.0, hi, 1e-15)
    }

    /// `E[X; a < X <= b]`; `b` may be infinite.
    fn truncated_mean(&self, a: f64, b: f64) -> Result<f64> {
        let upper = if b.is_finite() { b } else { self.inverse_survival(1e-18)?.max(a) };
        let tail = if b.is_finite() { b * self.survival(b) } else { 0.0 };
        let integral = quadrature::integrate(|x| self.survival(x), a, upper, Tolerance::new(1e-15, 1e-12))?.value;
        Ok(a * self.survival(a) - tail + integral)
    }
}

/// The unit exit time itself.
#[derive(Debug, Clone, Copy, Default)]
pub struct ExitTime;

impl PositiveLaw for ExitTime {
    fn density(&self, x: f64) -> f64 {
        density(x)
    }

    fn survival(&self, x: f64) -> f64 {
        survival(x)
    }

    fn inverse_survival(&self, p: f64) -> Result<f64> {
        inverse_survival(p)
    }

    fn truncated_mean(&self, a: f64, b: f64) -> Result<f64> {
        Ok(if a >= 0.5 { upper_mean(a) - upper_mean(b) } else { partial_mean(b) - partial_mean(a) })
    }
}

/// Survival level at which Gaussian rules truncate the support.
pub const TAIL_MASS: f64 = 1e-12;

/// Discretizes any positive law with `q` atoms.
pub fn quantize_law<L: PositiveLaw + ?Sized>(law: &L, q: usize, rule: QuantRule) -> Result<Quantization> {
    if q == 0 {
        return Err(Error::config("quantization needs Q >= 1"));
    }
    match rule {
        QuantRule::Quantile => {
            let mut edges = vec![0.0];
            for i in 1..q {
                edges.push(law.inverse_survival(1.0 - i as f64 / q as f64)?);
            }
            edges.push(f64::INFINITY);
            let nodes = edges
                .windows(2)
                .map(|w| law.truncated_mean(w[0], w[1]).map(|m| m * q as f64))
                .collect::<Result<Vec<_>>>()?;
            Quantization { nodes, weights: vec![1.0 / q as f64; q] }.validate()
        }
        QuantRule::Gauss => {
            let cutoff = law.inverse_survival(TAIL_MASS)?;
            let (gx, gw) = quadrature::gauss_legendre(24);
            let panels = 96usize;
            let mut xs = Vec::with_capacity(panels * gx.len());
            let mut ws = Vec::with_capacity(panels * gx.len());
            for p in 0..panels {
                // Quadratic clustering towards the origin.
                let lo = cutoff * (p as f64 / panels as f64).powi(2);
                let hi = cutoff * ((p + 1) as f64 / panels as f64).powi(2);
                for (x, w) in gx.iter().zip(&gw) {
                    let t = 0.5 * (lo + hi) + 0.5 * (hi - lo) * x;
                    let d = law.density(t);
                    if d > 0.0 {
                        xs.push(t);
                        ws.push(0.5 * (hi - lo) * w * d);
                    }
                }
            }
            let (nodes, mut weights) = quadrature::gauss_for_measure(&xs, &ws, q)?;
            let folded: f64 = weights.iter().sum();
            *weights.last_mut().expect("q >= 1") += 1.0 - folded;
            Quantization { nodes, weights }.validate()
        }
    }
}

/// Discretizes the unit exit time.
pub fn quantize_tau(q: usize, rule: QuantRule) -> Result<Quantization> {
    quantize_law(&ExitTime, q, rule)
}
