//! One-step transition law of the skeleton given its history.
//!
//! Given the lags `Δ^λ` (time since coordinate λ last fired), each
//! coordinate's current waiting time is an exit time conditioned to exceed
//! its lag, independently across coordinates, and the exit sign is a fair
//! coin independent of the time. The next step is the first of these
//! residual clocks to ring. In unit time `u = t/ε²`, with `δ = Δ/ε²`, `f`
//! the exit density and `S` its survival function,
//!
//! ```text
//! P(ΔT ∈ (a,b), coordinate j, sign ℓ)
//!     = ½ ∫_{a/ε²}^{b/ε²} f(u+δ_j)/S(δ_j) · Π_{λ≠j} S(u+δ_λ)/S(δ_λ) du.
//! ```
//!
//! For `d = 1` the lag is always zero and this is `½·P(ε²τ ∈ (a,b))`.

use std::f64::consts::FRAC_2_PI;

use serde::Serialize;

use crate::density::{self, PositiveLaw, QuantRule};
use crate::error::{Error, Result};
use crate::quadrature::{self, Tolerance};
use crate::skeleton::SignVec;

const KERNEL_TOL: Tolerance = Tolerance::new(1e-14, 1e-10);
/// Residual-minimum survival below which integrands are cut off.
const RESIDUAL_TAIL: f64 = 1e-17;

/// Target event for [`kernel_prob`].
#[derive(Debug, Clone, PartialEq)]
pub struct KernelQuery {
    pub lags: Vec<f64>,
    pub coord: usize,
    pub sign: i8,
    /// `(a, b)` in time units; `b` may be infinite.
    pub interval: (f64, f64),
}

impl KernelQuery {
    fn validate(&self) -> Result<()> {
        if self.lags.is_empty() {
            return Err(Error::config("kernel query needs at least one lag"));
        }
        if self.lags.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::domain(format!("lags must be finite and nonnegative: {:?}", self.lags)));
        }
        if self.coord >= self.lags.len() {
            return Err(Error::domain(format!("coordinate {} out of range", self.coord)));
        }
        if self.sign != 1 && self.sign != -1 {
            return Err(Error::domain("sign must be +1 or -1"));
        }
        let (a, b) = self.interval;
        if !(a >= 0.0 && b > a) {
            return Err(Error::domain(format!("interval ({a}, {b}) must satisfy 0 <= a < b")));
        }
        Ok(())
    }
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if epsilon > 0.0 && epsilon.is_finite() {
        Ok(())
    } else {
        Err(Error::config(format!("epsilon must be positive, got {epsilon}")))
    }
}

/// Law of the first residual clock to ring, in unit time.
#[derive(Debug, Clone)]
pub struct ResidualMin {
    deltas: Vec<f64>,
    s0: Vec<f64>,
}

impl ResidualMin {
    /// `deltas` are lags in unit time.
    pub fn new(deltas: &[f64]) -> Result<Self> {
        let s0: Vec<f64> = deltas.iter().map(|&d| density::survival(d)).collect();
        if s0.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::numerical(format!("lag so large that its survival underflows: {deltas:?}")));
        }
        Ok(Self { deltas: deltas.to_vec(), s0 })
    }

    pub fn dim(&self) -> usize {
        self.deltas.len()
    }

    /// Conditional survival of coordinate `l`'s residual clock.
    fn ratio(&self, l: usize, u: f64) -> f64 {
        density::survival(u + self.deltas[l]) / self.s0[l]
    }

    /// Sub-density of "coordinate `j` rings first at `u`".
    pub fn first_density(&self, j: usize, u: f64) -> f64 {
        let mut v = density::density(u + self.deltas[j]) / self.s0[j];
        for l in 0..self.dim() {
            if l != j {
                v *= self.ratio(l, u);
            }
        }
        v
    }

    /// Hazard of coordinate `j`'s residual clock at `u`.
    pub fn hazard(&self, j: usize, u: f64) -> f64 {
        let s = density::survival(u + self.deltas[j]);
        if s > 0.0 {
            density::density(u + self.deltas[j]) / s
        } else {
            0.0
        }
    }

    /// Probability that coordinate `j` rings first with `u ∈ (a, b)`.
    pub fn first_prob(&self, j: usize, a: f64, b: f64) -> Result<f64> {
        let hi = b.min(self.inverse_survival(RESIDUAL_TAIL)?);
        if hi <= a {
            return Ok(0.0);
        }
        let mut pts = vec![a];
        let mut kinks: Vec<f64> =
            self.deltas.iter().map(|d| FRAC_2_PI - d).filter(|&k| k > a && k < hi).collect();
        kinks.sort_by(f64::total_cmp);
        pts.extend(kinks);
        pts.push(hi);
        quadrature::integrate_pieces(|u| self.first_density(j, u), &pts, KERNEL_TOL)
    }
}

impl PositiveLaw for ResidualMin {
    fn density(&self, u: f64) -> f64 {
        if !(u >= 0.0) {
            return 0.0;
        }
        (0..self.dim()).map(|j| self.first_density(j, u)).sum()
    }

    fn survival(&self, u: f64) -> f64 {
        if !(u > 0.0) {
            return 1.0;
        }
        (0..self.dim()).map(|l| self.ratio(l, u)).product()
    }
}

/// Probability of the query event under the competing-risks law.
pub fn kernel_prob(q: &KernelQuery, epsilon: f64) -> Result<f64> {
    q.validate()?;
    check_epsilon(epsilon)?;
    let e2 = epsilon * epsilon;
    let (a, b) = (q.interval.0 / e2, q.interval.1 / e2);
    if q.lags.len() == 1 {
        // History-free: half the exit-time mass of the interval.
        let mass = if a >= 1.0 { density::survival(a) - density::survival(b) } else { density::cdf(b) - density::cdf(a) };
        return Ok(0.5 * mass);
    }
    let deltas: Vec<f64> = q.lags.iter().map(|l| l / e2).collect();
    let law = ResidualMin::new(&deltas)?;
    Ok(0.5 * law.first_prob(q.coord, a, b)?)
}

/// The closed product form for `d > 1`: an interval factor from the target
/// coordinate's own residual law times a first-to-fire factor built from a
/// double integral against the product of the other coordinates' densities.
/// The inner integral is done analytically. Kept for comparison: it agrees
/// with [`kernel_prob`] on `(0, ∞)` marginals when `d = 2` but not on finite
/// intervals, and it does not normalize for `d > 2`.
pub fn kernel_prob_product(q: &KernelQuery, epsilon: f64) -> Result<f64> {
    q.validate()?;
    check_epsilon(epsilon)?;
    let d = q.lags.len();
    if d == 1 {
        return kernel_prob(q, epsilon);
    }
    let e2 = epsilon * epsilon;
    let (a, b) = (q.interval.0 / e2, q.interval.1 / e2);
    let deltas: Vec<f64> = q.lags.iter().map(|l| l / e2).collect();
    let j = q.coord;
    let sj = density::survival(deltas[j]);
    let interval_factor = (density::survival(a + deltas[j]) - density::survival(b + deltas[j])) / sj;
    // f_k(t) = ε⁻² f(t/ε²); each of the d-1 densities contributes ε⁻² and dt = ε² du.
    let scale = e2.powi(2 - d as i32);
    let integrand = |u: f64| {
        let mut v = sj - density::survival(u + deltas[j]);
        for (l, dl) in deltas.iter().enumerate() {
            if l != j {
                v *= density::density(u + dl);
            }
        }
        v
    };
    let hi = density::tail_cutoff(RESIDUAL_TAIL)?;
    let num = quadrature::integrate_pieces(integrand, &[0.0, FRAC_2_PI, hi], KERNEL_TOL)? * scale;
    let den: f64 = deltas.iter().map(|&dl| density::survival(dl)).product();
    Ok(0.5 * interval_factor * num / den)
}

/// One support point of a discretized kernel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Atom {
    pub delta_t: f64,
    pub sign: SignVec,
    pub weight: f64,
}

/// Finite support approximation of the one-step law.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiscretizedKernel {
    atoms: Vec<Atom>,
}

impl DiscretizedKernel {
    fn from_atoms(mut atoms: Vec<Atom>) -> Result<Self> {
        atoms.retain(|a| a.weight > 0.0);
        let mass: f64 = atoms.iter().map(|a| a.weight).sum();
        if !(mass > 0.0 && mass.is_finite()) {
            return Err(Error::numerical("discretized kernel has no mass"));
        }
        if (mass - 1.0).abs() > 1e-6 {
            return Err(Error::numerical(format!("discretized kernel mass {mass} is far from 1")));
        }
        for a in &mut atoms {
            a.weight /= mass;
        }
        Ok(Self { atoms })
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn mass(&self) -> f64 {
        self.atoms.iter().map(|a| a.weight).sum()
    }

    pub fn expect<H: Fn(&Atom) -> f64>(&self, h: H) -> f64 {
        self.atoms.iter().map(|a| a.weight * h(a)).sum()
    }

    /// Atom closest in time to `delta_t` among those with this sign vector.
    pub fn nearest(&self, delta_t: f64, sign: SignVec) -> Option<usize> {
        self.atoms
            .iter()
            .enumerate()
            .filter(|(_, a)| a.sign == sign)
            .min_by(|x, y| (x.1.delta_t - delta_t).abs().total_cmp(&(y.1.delta_t - delta_t).abs()))
            .map(|(i, _)| i)
    }
}

/// Discretizes the one-step law with `q` time nodes per coordinate. Quantile
/// atoms are ordered by slice then coordinate, Gauss atoms by coordinate then
/// node, and sign `+1` precedes `-1` within each pair.
pub fn discretize_kernel(lags: &[f64], epsilon: f64, q: usize, rule: QuantRule) -> Result<DiscretizedKernel> {
    check_epsilon(epsilon)?;
    if q == 0 {
        return Err(Error::config("kernel discretization needs Q >= 1"));
    }
    if lags.is_empty() || lags.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
        return Err(Error::domain(format!("lags must be finite and nonnegative: {lags:?}")));
    }
    let e2 = epsilon * epsilon;
    let d = lags.len();
    let mut atoms = Vec::with_capacity(2 * d * q);
    let mut push = |t: f64, j: usize, w: f64| -> Result<()> {
        for s in [1i8, -1] {
            atoms.push(Atom { delta_t: e2 * t, sign: SignVec::new(j, s)?, weight: 0.5 * w });
        }
        Ok(())
    };
    if d == 1 {
        let qz = density::quantize_tau(q, rule)?;
        for (x, w) in qz.nodes.iter().zip(&qz.weights) {
            push(*x, 0, *w)?;
        }
        return DiscretizedKernel::from_atoms(atoms);
    }
    let deltas: Vec<f64> = lags.iter().map(|l| l / e2).collect();
    let law = ResidualMin::new(&deltas)?;
    let qz = density::quantize_law(&law, q, rule)?;
    match rule {
        QuantRule::Quantile => {
            let mut edges = vec![0.0];
            for i in 1..q {
                edges.push(law.inverse_survival(1.0 - i as f64 / q as f64)?);
            }
            edges.push(f64::INFINITY);
            for (i, x) in qz.nodes.iter().enumerate() {
                for j in 0..d {
                    push(*x, j, law.first_prob(j, edges[i], edges[i + 1])?)?;
                }
            }
        }
        QuantRule::Gauss => {
            // One Gaussian rule per coordinate's first-to-fire sub-measure.
            let cutoff = law.inverse_survival(density::TAIL_MASS)?;
            let (gx, gw) = quadrature::gauss_legendre(24);
            let panels = 96usize;
            let mut xs = Vec::with_capacity(panels * gx.len());
            let mut base = Vec::with_capacity(panels * gx.len());
            for p in 0..panels {
                let lo = cutoff * (p as f64 / panels as f64).powi(2);
                let hi = cutoff * ((p + 1) as f64 / panels as f64).powi(2);
                for (x, w) in gx.iter().zip(&gw) {
                    xs.push(0.5 * (lo + hi) + 0.5 * (hi - lo) * x);
                    base.push(0.5 * (hi - lo) * w);
                }
            }
            for j in 0..d {
                let pj = law.first_prob(j, 0.0, f64::INFINITY)?;
                if !(pj > 0.0) {
                    continue;
                }
                let ws: Vec<f64> = xs.iter().zip(&base).map(|(x, b)| b * law.first_density(j, *x) / pj).collect();
                let (nodes, mut weights) = quadrature::gauss_for_measure(&xs, &ws, q)?;
                let folded: f64 = weights.iter().sum();
                *weights.last_mut().expect("q >= 1") += 1.0 - folded;
                for (x, w) in nodes.iter().zip(&weights) {
                    push(*x, j, pj * w)?;
                }
            }
        }
    }
    DiscretizedKernel::from_atoms(atoms)
}
