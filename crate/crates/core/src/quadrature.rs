//! Numerical integration and one-dimensional search helpers.
//!
//! Adaptive 15-point Gauss–Kronrod with interval bisection, fixed
//! Gauss–Legendre panels, Gaussian rules for arbitrary discrete measures
//! (Stieltjes procedure plus Golub–Welsch), bracketed root finding and
//! golden-section maximisation.

use std::sync::OnceLock;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

// Kronrod abscissae and weights for the 7/15 pair, positive half only.
const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

/// Absolute and relative targets for adaptive quadrature. The run stops once
/// the error estimate is below `max(abs, rel·|value|)`.
#[derive(Debug, Clone, Copy)]
pub struct Tolerance {
    pub abs: f64,
    pub rel: f64,
}

impl Tolerance {
    pub const fn new(abs: f64, rel: f64) -> Self {
        Self { abs, rel }
    }
}

impl Default for Tolerance {
    fn default() -> Self {
        Self::new(1e-13, 1e-10)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Estimate {
    pub value: f64,
    pub error: f64,
    pub intervals: usize,
}

const MAX_INTERVALS: usize = 4000;

fn kronrod15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let center = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let fc = f(center);
    let mut res_g = fc * WG[3];
    let mut res_k = fc * WGK[7];
    let mut res_abs = WGK[7] * fc.abs();
    let mut fv1 = [0.0; 7];
    let mut fv2 = [0.0; 7];
    for j in 0..7 {
        let dx = half * XGK[j];
        let f1 = f(center - dx);
        let f2 = f(center + dx);
        fv1[j] = f1;
        fv2[j] = f2;
        res_k += WGK[j] * (f1 + f2);
        res_abs += WGK[j] * (f1.abs() + f2.abs());
        if j % 2 == 1 {
            res_g += WG[j / 2] * (f1 + f2);
        }
    }
    let mean = 0.5 * res_k;
    let mut res_asc = WGK[7] * (fc - mean).abs();
    for j in 0..7 {
        res_asc += WGK[j] * ((fv1[j] - mean).abs() + (fv2[j] - mean).abs());
    }
    let h = half.abs();
    let (res_abs, res_asc) = (res_abs * h, res_asc * h);
    let mut err = ((res_k - res_g) * half).abs();
    if res_asc != 0.0 && err != 0.0 {
        err = res_asc * (200.0 * err / res_asc).powf(1.5).min(1.0);
    }
    if res_abs > f64::MIN_POSITIVE / (50.0 * f64::EPSILON) {
        err = err.max(50.0 * f64::EPSILON * res_abs);
    }
    (res_k * half, err)
}

/// Adaptive Gauss–Kronrod integration of `f` over the finite interval `[a, b]`.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, tol: Tolerance) -> Result<Estimate> {
    if !(a.is_finite() && b.is_finite()) {
        return Err(Error::domain(format!("integration limits must be finite, got [{a}, {b}]")));
    }
    if a == b {
        return Ok(Estimate { value: 0.0, error: 0.0, intervals: 0 });
    }
    let (v, e) = kronrod15(&f, a, b);
    let mut segs = vec![(a, b, v, e)];
    let mut total = v;
    let mut err = e;
    loop {
        if !total.is_finite() {
            return Err(Error::numerical(format!("non-finite integrand on [{a}, {b}]")));
        }
        if err <= tol.abs.max(tol.rel * total.abs()) {
            return Ok(Estimate { value: total, error: err, intervals: segs.len() });
        }
        if segs.len() >= MAX_INTERVALS {
            return Err(Error::numerical(format!(
                "quadrature on [{a}, {b}] did not converge: value {total:e}, error estimate {err:e} after {} intervals",
                segs.len()
            )));
        }
        let (idx, _) = segs
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, s)| if s.3 > acc.1 { (i, s.3) } else { acc });
        let (lo, hi, v0, e0) = segs.swap_remove(idx);
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            // Interval can no longer be split; accept what we have.
            return Ok(Estimate { value: total, error: err, intervals: segs.len() + 1 });
        }
        let (v1, e1) = kronrod15(&f, lo, mid);
        let (v2, e2) = kronrod15(&f, mid, hi);
        total += v1 + v2 - v0;
        err += e1 + e2 - e0;
        segs.push((lo, mid, v1, e1));
        segs.push((mid, hi, v2, e2));
        // Periodically resum to stop drift in the running totals.
        if segs.len() % 64 == 0 {
            total = segs.iter().map(|s| s.2).sum();
            err = segs.iter().map(|s| s.3).sum();
        }
    }
}

/// Integrates over consecutive breakpoints, e.g. to isolate kinks.
pub fn integrate_pieces<F: Fn(f64) -> f64>(f: F, points: &[f64], tol: Tolerance) -> Result<f64> {
    let mut total = 0.0;
    for w in points.windows(2) {
        if w[1] > w[0] {
            total += integrate(&f, w[0], w[1], tol)?.value;
        }
    }
    Ok(total)
}

/// Gauss–Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1, "Gauss-Legendre rule needs at least one node");
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    let nf = n as f64;
    for i in 0..m {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p1, mut p2) = (1.0, 0.0);
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = ((2.0 * jf + 1.0) * z * p2 - jf * p3) / (jf + 1.0);
            }
            dp = nf * (z * p1 - p2) / (z * z - 1.0);
            let dz = p1 / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = 2.0 / ((1.0 - z * z) * dp * dp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

/// Cached 64-point Gauss–Legendre rule.
pub fn gauss_legendre_64() -> &'static (Vec<f64>, Vec<f64>) {
    static RULE: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    RULE.get_or_init(|| gauss_legendre(64))
}

/// Applies a fixed rule on `[a, b]` split into `panels` equal pieces.
pub fn composite<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, panels: usize, rule: &(Vec<f64>, Vec<f64>)) -> f64 {
    let h = (b - a) / panels as f64;
    let mut total = 0.0;
    for p in 0..panels {
        let lo = a + h * p as f64;
        let c = lo + 0.5 * h;
        let mut s = 0.0;
        for (x, w) in rule.0.iter().zip(&rule.1) {
            s += w * f(c + 0.5 * h * x);
        }
        total += 0.5 * h * s;
    }
    total
}

/// Gauss–Legendre panels on `[a, b]`, doubling the panel count until the
/// relative change drops below `rel`.
pub fn panel_doubling<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, rel: f64, max_panels: usize) -> Result<f64> {
    let rule = gauss_legendre_64();
    let mut panels = 1;
    let mut prev = composite(&f, a, b, panels, rule);
    loop {
        panels *= 2;
        let cur = composite(&f, a, b, panels, rule);
        if (cur - prev).abs() <= rel * cur.abs() || cur == prev {
            return Ok(cur);
        }
        if panels >= max_panels {
            return Err(Error::numerical(format!(
                "panel doubling on [{a}, {b}] stalled at {panels} panels (last change {:e})",
                (cur - prev).abs()
            )));
        }
        prev = cur;
    }
}

/// Gaussian rule with `n` nodes for the discrete measure `Σ w_i δ_{x_i}`,
/// via the orthonormal Stieltjes recurrence and the Golub–Welsch eigenproblem.
pub fn gauss_for_measure(xs: &[f64], ws: &[f64], n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if n == 0 || xs.len() < n || xs.len() != ws.len() {
        return Err(Error::config(format!(
            "cannot build a {n}-node rule from a {}-point measure",
            xs.len()
        )));
    }
    let mass: f64 = ws.iter().sum();
    if !(mass > 0.0) {
        return Err(Error::numerical("measure has no mass"));
    }
    let npts = xs.len();
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut q = vec![1.0 / mass.sqrt(); npts];
    let mut alpha = Vec::with_capacity(n);
    let mut beta = Vec::with_capacity(n);
    for k in 0..n {
        let a: f64 = (0..npts).map(|i| ws[i] * xs[i] * q[i] * q[i]).sum();
        alpha.push(a);
        basis.push(q.clone());
        if k + 1 == n {
            break;
        }
        let mut r: Vec<f64> = (0..npts).map(|i| xs[i] * q[i]).collect();
        // Full reorthogonalisation against the previous basis vectors.
        for _ in 0..2 {
            for b in &basis {
                let c: f64 = (0..npts).map(|i| ws[i] * r[i] * b[i]).sum();
                for i in 0..npts {
                    r[i] -= c * b[i];
                }
            }
        }
        let norm = (0..npts).map(|i| ws[i] * r[i] * r[i]).sum::<f64>().sqrt();
        if !(norm > 0.0) {
            return Err(Error::numerical(format!("Stieltjes recurrence broke down at degree {}", k + 1)));
        }
        beta.push(norm);
        q = r.into_iter().map(|v| v / norm).collect();
    }
    let mut jac = DMatrix::<f64>::zeros(n, n);
    for k in 0..n {
        jac[(k, k)] = alpha[k];
        if k + 1 < n {
            jac[(k, k + 1)] = beta[k];
            jac[(k + 1, k)] = beta[k];
        }
    }
    let eig = SymmetricEigen::new(jac);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let v0 = eig.eigenvectors[(0, i)];
            (eig.eigenvalues[i], mass * v0 * v0)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(pairs.into_iter().unzip())
}

/// Root of a continuous `f` with a sign change on `[lo, hi]`, by bisection
/// accelerated with regula falsi (Illinois variant).
pub fn find_root<F: Fn(f64) -> f64>(f: F, mut lo: f64, mut hi: f64, xtol: f64) -> Result<f64> {
    let mut flo = f(lo);
    let mut fhi = f(hi);
    if flo == 0.0 {
        return Ok(lo);
    }
    if fhi == 0.0 {
        return Ok(hi);
    }
    if flo.signum() == fhi.signum() {
        return Err(Error::numerical(format!(
            "root not bracketed on [{lo}, {hi}]: f = ({flo:e}, {fhi:e})"
        )));
    }
    let mut side = 0i8;
    for _ in 0..500 {
        let mut x = (lo * fhi - hi * flo) / (fhi - flo);
        if !(x > lo && x < hi) {
            x = 0.5 * (lo + hi);
        }
        let fx = f(x);
        if fx == 0.0 {
            return Ok(x);
        }
        if fx.signum() == flo.signum() {
            lo = x;
            flo = fx;
            if side == -1 {
                fhi *= 0.5;
            }
            side = -1;
        } else {
            hi = x;
            fhi = fx;
            if side == 1 {
                flo *= 0.5;
            }
            side = 1;
        }
        if hi - lo <= xtol * (1.0 + lo.abs()) {
            return Ok(0.5 * (lo + hi));
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Maximiser of a unimodal `f` on `[lo, hi]` by golden-section search.
/// Returns `(argmax, max)`.
pub fn golden_section_max<F: Fn(f64) -> f64>(f: F, mut lo: f64, mut hi: f64, xtol: f64) -> (f64, f64) {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - inv_phi * (hi - lo);
    let mut x2 = lo + inv_phi * (hi - lo);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    while hi - lo > xtol {
        if f1 >= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - inv_phi * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + inv_phi * (hi - lo);
            f2 = f(x2);
        }
    }
    if f1 >= f2 {
        (x1, f1)
    } else {
        (x2, f2)
    }
}

/// Pairwise (cascade) summation; the result depends only on the slice order.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 32 {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}
