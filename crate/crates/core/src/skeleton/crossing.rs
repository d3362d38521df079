//! Reference sampler that builds skeletons from simulated Brownian paths.
//!
//! A Brownian path is simulated on a fine uniform grid and level crossings
//! of the moving band `level ± ε` are read off, with the crossing time
//! interpolated linearly inside the grid cell. This is slow and carries a
//! grid bias, so it only serves as an independent oracle for the direct
//! sampler and for coupled convergence checks.

use rand::Rng;
use rand_distr::StandardNormal;

use super::{SignVec, SkeletonPath, Step};
use crate::error::Result;

/// Brownian path on the grid `k·dt`, one row per coordinate.
#[derive(Debug, Clone)]
pub struct BrownianGrid {
    pub dt: f64,
    pub values: Vec<Vec<f64>>,
}

impl BrownianGrid {
    pub fn simulate<R: Rng + ?Sized>(dim: usize, dt: f64, n: usize, rng: &mut R) -> Self {
        let sd = dt.sqrt();
        let values = (0..dim)
            .map(|_| {
                let mut v = Vec::with_capacity(n + 1);
                let mut x = 0.0;
                v.push(x);
                for _ in 0..n {
                    let z: f64 = rng.sample(StandardNormal);
                    x += sd * z;
                    v.push(x);
                }
                v
            })
            .collect();
        Self { dt, values }
    }

    pub fn len(&self) -> usize {
        self.values.first().map_or(0, |v| v.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn time(&self, i: usize) -> f64 {
        i as f64 * self.dt
    }

    /// Piecewise-linear interpolation of coordinate `j` at time `t`.
    pub fn interpolate(&self, j: usize, t: f64) -> f64 {
        let v = &self.values[j];
        let x = t / self.dt;
        let i = (x.floor() as usize).min(v.len() - 2);
        let w = x - i as f64;
        v[i] + w * (v[i + 1] - v[i])
    }
}

/// Crossing events `(time, sign)` of one coordinate's path for jump size ε.
pub fn crossings(path: &[f64], dt: f64, epsilon: f64) -> Vec<(f64, i8)> {
    let mut out = Vec::new();
    let mut level = 0i64;
    for i in 1..path.len() {
        let (x0, x1) = (path[i - 1], path[i]);
        loop {
            let up = (level + 1) as f64 * epsilon;
            let down = (level - 1) as f64 * epsilon;
            let (barrier, s) = if x1 >= up {
                (up, 1i8)
            } else if x1 <= down {
                (down, -1i8)
            } else {
                break;
            };
            let frac = if x1 != x0 { ((barrier - x0) / (x1 - x0)).clamp(0.0, 1.0) } else { 1.0 };
            out.push(((i - 1) as f64 * dt + frac * dt, s));
            level += i64::from(s);
        }
    }
    out
}

/// Skeleton read off a simulated grid path, keeping at most `max_steps`
/// merged events (all of them when `None`).
pub fn skeleton_from_grid(grid: &BrownianGrid, epsilon: f64, max_steps: Option<usize>) -> Result<SkeletonPath> {
    let mut events: Vec<(f64, usize, i8)> = Vec::new();
    for (j, v) in grid.values.iter().enumerate() {
        events.extend(crossings(v, grid.dt, epsilon).into_iter().map(|(t, s)| (t, j, s)));
    }
    events.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    if let Some(m) = max_steps {
        events.truncate(m);
    }
    let mut steps = Vec::with_capacity(events.len());
    let mut prev = 0.0;
    for (t, j, s) in events {
        if t > prev {
            steps.push(Step { delta_t: t - prev, sign: SignVec::new(j, s)? });
            prev = t;
        }
    }
    SkeletonPath::new(epsilon, grid.values.len(), steps)
}

/// One exit time of a standard Brownian motion from `[-1, 1]` by grid
/// simulation with step `dt`. With `bridge` set, a Brownian-bridge test
/// inside each cell catches excursions the grid would miss, which removes
/// most of the discrete-monitoring delay.
pub fn exit_time_by_simulation<R: Rng + ?Sized>(dt: f64, bridge: bool, rng: &mut R) -> (f64, i8) {
    let sd = dt.sqrt();
    let mut x = 0.0f64;
    let mut t = 0.0;
    loop {
        let z: f64 = rng.sample(StandardNormal);
        let y = x + sd * z;
        t += dt;
        if y >= 1.0 {
            return (t - dt * (y - 1.0) / (y - x), 1);
        }
        if y <= -1.0 {
            return (t - dt * (-1.0 - y) / (x - y), -1);
        }
        if bridge {
            let p_up = (-2.0 * (1.0 - x) * (1.0 - y) / dt).exp();
            let p_dn = (-2.0 * (1.0 + x) * (1.0 + y) / dt).exp();
            let u: f64 = rng.gen();
            if u < p_up {
                return (t - 0.5 * dt, 1);
            }
            if u < p_up + p_dn {
                return (t - 0.5 * dt, -1);
            }
        }
        x = y;
    }
}
