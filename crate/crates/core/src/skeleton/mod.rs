//! Hitting-time skeleton of a d-dimensional Brownian motion.
//!
//! Coordinate `j` moves by `±ε` each time it travels distance ε from its
//! previous level; the waiting times are i.i.d. `ε²·τ`. The skeleton is the
//! merge of all coordinates' events in time order, each step carrying its
//! inter-arrival time and a unit sign vector naming the coordinate that fired.

pub mod crossing;

use std::io::Write;

use rand::Rng;
use serde::Serialize;

use crate::density;
use crate::error::{Error, Result};
use crate::rng;

/// Sampling parameters for one skeleton.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SkeletonConfig {
    pub epsilon: f64,
    pub dim: usize,
    pub horizon: f64,
    pub n_steps: usize,
}

impl SkeletonConfig {
    /// Uses the default step count `d·⌈T/ε²⌉`.
    pub fn new(epsilon: f64, dim: usize, horizon: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::config(format!("epsilon must be positive, got {epsilon}")));
        }
        if dim == 0 {
            return Err(Error::config("dimension d must be at least 1"));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::config(format!("horizon must be positive, got {horizon}")));
        }
        let n_steps = default_steps(epsilon, dim, horizon);
        Ok(Self { epsilon, dim, horizon, n_steps })
    }

    pub fn with_steps(mut self, n_steps: usize) -> Result<Self> {
        if n_steps == 0 {
            return Err(Error::config("n_steps must be at least 1"));
        }
        self.n_steps = n_steps;
        Ok(self)
    }
}

/// `d·⌈T/ε²⌉`, guarded against rounding just above an integer.
pub fn default_steps(epsilon: f64, dim: usize, horizon: f64) -> usize {
    let raw = horizon / (epsilon * epsilon);
    let nearest = raw.round();
    let per_coord = if (raw - nearest).abs() <= 1e-9 * nearest.max(1.0) { nearest } else { raw.ceil() };
    dim * (per_coord.max(1.0) as usize)
}

/// Unit vector with a single `±1` entry, stored compactly. Coordinates are
/// zero-based throughout the crate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct SignVec {
    coord: usize,
    sign: i8,
}

impl SignVec {
    pub fn new(coord: usize, sign: i8) -> Result<Self> {
        if sign != 1 && sign != -1 {
            return Err(Error::domain(format!("sign must be +1 or -1, got {sign}")));
        }
        Ok(Self { coord, sign })
    }

    pub fn coord(&self) -> usize {
        self.coord
    }

    pub fn sign(&self) -> i8 {
        self.sign
    }

    pub fn sign_f64(&self) -> f64 {
        f64::from(self.sign)
    }

    pub fn flipped(&self) -> Self {
        Self { coord: self.coord, sign: -self.sign }
    }

    pub fn to_dense(&self, dim: usize) -> Vec<i8> {
        let mut v = vec![0; dim];
        v[self.coord] = self.sign;
        v
    }

    pub fn from_dense(v: &[i8]) -> Result<Self> {
        let (coord, sign) = aleph(v)?;
        Ok(Self { coord, sign })
    }
}

/// Reads off `(coordinate, sign)` of a dense sign vector.
pub fn aleph(v: &[i8]) -> Result<(usize, i8)> {
    let mut found = None;
    for (j, &s) in v.iter().enumerate() {
        match s {
            0 => {}
            1 | -1 if found.is_none() => found = Some((j, s)),
            _ => return Err(Error::domain(format!("malformed sign vector {v:?}"))),
        }
    }
    found.ok_or_else(|| Error::domain(format!("sign vector {v:?} has no nonzero entry")))
}

/// One skeleton event.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Step {
    pub delta_t: f64,
    pub sign: SignVec,
}

/// A realized skeleton.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonPath {
    epsilon: f64,
    dim: usize,
    steps: Vec<Step>,
    cum_times: Vec<f64>,
    per_coordinate_times: Vec<Vec<f64>>,
}

impl SkeletonPath {
    /// Builds a path from inter-arrival times; cumulative times are running sums.
    pub fn new(epsilon: f64, dim: usize, steps: Vec<Step>) -> Result<Self> {
        let mut cum = Vec::with_capacity(steps.len());
        let mut t = 0.0;
        for s in &steps {
            t += s.delta_t;
            cum.push(t);
        }
        Self::with_times(epsilon, dim, steps, cum)
    }

    fn with_times(epsilon: f64, dim: usize, steps: Vec<Step>, cum_times: Vec<f64>) -> Result<Self> {
        if !(epsilon > 0.0) || dim == 0 {
            return Err(Error::config("skeleton needs epsilon > 0 and d >= 1"));
        }
        let mut per = vec![Vec::new(); dim];
        let mut prev = 0.0;
        for (i, (s, &t)) in steps.iter().zip(&cum_times).enumerate() {
            if !(s.delta_t > 0.0 && s.delta_t.is_finite()) {
                return Err(Error::domain(format!("step {} has non-positive delta_t {}", i + 1, s.delta_t)));
            }
            if s.sign.coord >= dim {
                return Err(Error::domain(format!("step {} names coordinate {} >= d", i + 1, s.sign.coord)));
            }
            if !(t > prev) {
                return Err(Error::domain(format!("cumulative time not increasing at step {}", i + 1)));
            }
            prev = t;
            per[s.sign.coord].push(t);
        }
        Ok(Self { epsilon, dim, steps, cum_times, per_coordinate_times: per })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn steps(&self) -> &[Step] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// `T_n` for `n = 1..=len`.
    pub fn cum_times(&self) -> &[f64] {
        &self.cum_times
    }

    pub fn per_coordinate_times(&self) -> &[Vec<f64>] {
        &self.per_coordinate_times
    }

    /// Time of step `n` (zero for `n = 0`).
    pub fn time(&self, n: usize) -> f64 {
        if n == 0 {
            0.0
        } else {
            self.cum_times[n - 1]
        }
    }

    /// Number of steps with `T_n <= t`.
    pub fn steps_until(&self, t: f64) -> usize {
        self.cum_times.partition_point(|&s| s <= t)
    }

    /// Integer level of coordinate `j` after `n` steps.
    pub fn level(&self, j: usize, n: usize) -> i64 {
        self.steps[..n].iter().filter(|s| s.sign.coord == j).map(|s| i64::from(s.sign.sign)).sum()
    }

    /// Right-continuous value of the jump process `A^j` at time `t`.
    pub fn reconstruct_a(&self, j: usize, t: f64) -> Result<f64> {
        if j >= self.dim {
            return Err(Error::domain(format!("coordinate {j} out of range for d = {}", self.dim)));
        }
        if !(t >= 0.0) {
            return Err(Error::domain(format!("time must be nonnegative, got {t}")));
        }
        Ok(self.level(j, self.steps_until(t)) as f64 * self.epsilon)
    }

    /// First `n` steps as a new path.
    pub fn truncated(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self::with_times(self.epsilon, self.dim, self.steps[..n].to_vec(), self.cum_times[..n].to_vec())
            .expect("prefix of a valid path is valid")
    }

    /// Same times with every sign reversed; equal in law to the original.
    pub fn flipped(&self) -> Self {
        let steps = self.steps.iter().map(|s| Step { delta_t: s.delta_t, sign: s.sign.flipped() }).collect();
        Self::with_times(self.epsilon, self.dim, steps, self.cum_times.clone()).expect("valid path")
    }

    /// CSV with columns `step_index, delta_t, coord, sign, cum_time`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
        let io = |e: csv::Error| Error::Io { path: "<skeleton csv>".into(), source: e.into() };
        w.write_record(["step_index", "delta_t", "coord", "sign", "cum_time"]).map_err(io)?;
        for (i, (s, t)) in self.steps.iter().zip(&self.cum_times).enumerate() {
            w.write_record([
                (i + 1).to_string(),
                crate::io::fmt_f64(s.delta_t),
                s.sign.coord.to_string(),
                s.sign.sign.to_string(),
                crate::io::fmt_f64(*t),
            ])
            .map_err(io)?;
        }
        w.flush().map_err(|e| Error::Io { path: "<skeleton csv>".into(), source: e })?;
        Ok(())
    }
}

/// Draws a skeleton: per coordinate i.i.d. `(ε²τ, ±1)` events from the
/// stream `(seed, j)`, merged in time order. On an exact time tie the lower
/// coordinate fires first.
pub fn sample_skeleton(cfg: &SkeletonConfig, seed: u64) -> Result<SkeletonPath> {
    if !(cfg.epsilon > 0.0) || cfg.dim == 0 || cfg.n_steps == 0 {
        return Err(Error::config("skeleton config needs epsilon > 0, d >= 1, n_steps >= 1"));
    }
    let e2 = cfg.epsilon * cfg.epsilon;
    let mut rngs: Vec<_> = (0..cfg.dim).map(|j| rng::stream_rng(seed, j as u64)).collect();
    let mut draw = |j: usize| -> (f64, i8) {
        let r = &mut rngs[j];
        let dt = e2 * density::sample(r);
        let s = if r.gen::<bool>() { 1 } else { -1 };
        (dt, s)
    };
    if cfg.dim == 1 {
        let steps: Vec<Step> = (0..cfg.n_steps)
            .map(|_| {
                let (dt, s) = draw(0);
                Step { delta_t: dt, sign: SignVec { coord: 0, sign: s } }
            })
            .collect();
        return SkeletonPath::new(cfg.epsilon, 1, steps);
    }
    let mut next: Vec<(f64, i8)> = (0..cfg.dim).map(&mut draw).collect();
    let mut steps = Vec::with_capacity(cfg.n_steps);
    let mut times = Vec::with_capacity(cfg.n_steps);
    let mut now = 0.0;
    while steps.len() < cfg.n_steps {
        let mut j = 0;
        for c in 1..cfg.dim {
            if next[c].0 < next[j].0 {
                j = c;
            }
        }
        let (t, s) = next[j];
        let dt = t - now;
        if !(dt > 0.0) {
            return Err(Error::numerical(format!("coincident hitting times at t = {t}")));
        }
        steps.push(Step { delta_t: dt, sign: SignVec { coord: j, sign: s } });
        times.push(t);
        now = t;
        let (d, s2) = draw(j);
        next[j] = (t + d, s2);
    }
    SkeletonPath::with_times(cfg.epsilon, cfg.dim, steps, times)
}

/// Index (1-based) of the last step whose active coordinate is `lambda`,
/// or 0 if there is none.
pub fn last_hit_index(signs: &[SignVec], lambda: usize) -> usize {
    signs.iter().rposition(|s| s.coord == lambda).map_or(0, |i| i + 1)
}

/// Elapsed-time bookkeeping of a step history.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Elapsed {
    /// Total time `t_n`.
    pub total: f64,
    /// Time of each coordinate's last hit.
    pub last_hit: Vec<f64>,
    /// `t_n` minus the last-hit time, per coordinate.
    pub lags: Vec<f64>,
}

pub fn elapsed_times(steps: &[Step], dim: usize) -> Elapsed {
    let mut total = 0.0;
    let mut last_hit = vec![0.0; dim];
    for s in steps {
        total += s.delta_t;
        last_hit[s.sign.coord] = total;
    }
    let lags = last_hit.iter().map(|&h| total - h).collect();
    Elapsed { total, last_hit, lags }
}

/// One decision-and-noise triple of a controlled history.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HistoryEntry {
    pub action: Vec<f64>,
    pub delta_t: f64,
    pub sign: SignVec,
}

/// A history of actions interleaved with skeleton steps.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct History {
    entries: Vec<HistoryEntry>,
}

impl History {
    pub fn new() -> Self {
        Self::default()
    }

    /// Validates that every action lies in `[-bound, bound]^m`.
    pub fn from_entries(entries: Vec<HistoryEntry>, bound: f64) -> Result<Self> {
        for (i, e) in entries.iter().enumerate() {
            if !(e.delta_t > 0.0) {
                return Err(Error::domain(format!("history entry {} has delta_t {}", i + 1, e.delta_t)));
            }
            if e.action.iter().any(|a| !(a.abs() <= bound)) {
                return Err(Error::domain(format!("history entry {} action outside the action box", i + 1)));
            }
        }
        Ok(Self { entries })
    }

    pub fn push(&mut self, e: HistoryEntry) {
        self.entries.push(e);
    }

    pub fn entries(&self) -> &[HistoryEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Prefix of length `n`.
    pub fn prefix(&self, n: usize) -> Self {
        Self { entries: self.entries[..n.min(self.len())].to_vec() }
    }

    pub fn steps(&self) -> Vec<Step> {
        self.entries.iter().map(|e| Step { delta_t: e.delta_t, sign: e.sign }).collect()
    }

    pub fn signs(&self) -> Vec<SignVec> {
        self.entries.iter().map(|e| e.sign).collect()
    }
}
