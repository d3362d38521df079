//! Forward Monte Carlo evaluation of controls and the independent oracles
//! used to check the solver.

use std::collections::HashMap;
use std::sync::Mutex;

use rayon::prelude::*;
use serde::Serialize;

use crate::density::QuantRule;
use crate::error::{Error, Result};
use crate::kernel::discretize_kernel;
use crate::quadrature::pairwise_sum;
use crate::rng::derive_seed;
use crate::skeleton::{sample_skeleton, SkeletonConfig, SkeletonPath, Step};
use crate::solver::tree::refine_action;
use crate::solver::{backward_dp, build_tree, certify, policy_value, ActionGrid, Solution, SolveConfig, Tree};
use crate::structures::portfolio::PortfolioState;
use crate::structures::{Payoff, PortfolioSpec, StateStructure, StepPath};

/// An adapted control: the action for step `n` sees the first `n` steps of
/// the skeleton and the state they produced.
pub trait Control<S: StateStructure>: Sync {
    fn action(&self, s: &S, n: usize, history: &[Step], state: &S::State) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstantControl(pub Vec<f64>);

impl<S: StateStructure> Control<S> for ConstantControl {
    fn action(&self, _: &S, _: usize, _: &[Step], _: &S::State) -> Result<Vec<f64>> {
        Ok(self.0.clone())
    }
}

/// Replays a solved tree policy, projecting each realized step onto the
/// nearest kernel atom of the current node.
pub struct TreePolicyControl<'a, T> {
    pub tree: &'a Tree<T>,
    pub solution: &'a Solution,
}

impl<S: StateStructure> Control<S> for TreePolicyControl<'_, S::State> {
    fn action(&self, _: &S, n: usize, history: &[Step], _: &S::State) -> Result<Vec<f64>> {
        let tree = self.tree;
        let policy = &self.solution.policy;
        let last = n.min(tree.depth().max(1) - 1);
        let mut node = 0;
        for (i, step) in history.iter().take(last).enumerate() {
            let a = policy[i][node];
            let k = tree
                .kernel(i, node)
                .nearest(step.delta_t, step.sign)
                .ok_or_else(|| Error::domain(format!("no kernel atom matches step {i}")))?;
            node = tree.child(i, node, a, k);
        }
        if tree.depth() == 0 {
            return Ok(vec![0.0; tree.grid().dim()]);
        }
        Ok(tree.action(last, node, policy[last][node]).to_vec())
    }
}

/// Samples a user control `u(t, path so far)` at each step start and clamps
/// it componentwise to `[-bound, bound]`.
pub struct FnControl<F> {
    pub f: F,
    pub bound: f64,
}

pub fn project_control<F>(f: F, bound: f64) -> FnControl<F> {
    FnControl { f, bound }
}

impl<S, F> Control<S> for FnControl<F>
where
    S: StateStructure,
    F: Fn(f64, &StepPath) -> Vec<f64> + Sync,
{
    fn action(&self, s: &S, _: usize, history: &[Step], state: &S::State) -> Result<Vec<f64>> {
        let t: f64 = history.iter().map(|st| st.delta_t).sum();
        Ok((self.f)(t, &s.path(state)).into_iter().map(|v| v.clamp(-self.bound, self.bound)).collect())
    }
}

/// Maximizes the structure's closed-form stage objective at every step.
/// Results are memoized by the structure's stage cache key.
pub struct StageArgmaxControl {
    grid: ActionGrid,
    refine: bool,
    cache: Mutex<HashMap<Vec<u64>, Vec<f64>>>,
}

impl StageArgmaxControl {
    pub fn new(grid: ActionGrid, refine: bool) -> Self {
        Self { grid, refine, cache: Mutex::new(HashMap::new()) }
    }

    fn argmax<S: StateStructure>(&self, s: &S, state: &S::State) -> Result<Vec<f64>> {
        let mut best: Option<(f64, &[f64])> = None;
        for p in self.grid.points() {
            let v = s
                .stage_objective(state, p)
                .ok_or_else(|| Error::config("this structure has no closed-form stage objective"))??;
            if best.is_none_or(|b| v > b.0) {
                best = Some((v, p));
            }
        }
        let (_, grid_best) = best.ok_or_else(|| Error::config("empty action grid"))?;
        if self.refine {
            if let Some(a) = refine_action(s, state, &self.grid)? {
                return Ok(a);
            }
        }
        Ok(grid_best.to_vec())
    }
}

impl<S: StateStructure> Control<S> for StageArgmaxControl {
    fn action(&self, s: &S, _: usize, _: &[Step], state: &S::State) -> Result<Vec<f64>> {
        let Some(key) = s.stage_cache_key(state) else {
            return self.argmax(s, state);
        };
        if let Some(a) = self.cache.lock().expect("cache lock").get(&key) {
            return Ok(a.clone());
        }
        let a = self.argmax(s, state)?;
        self.cache.lock().expect("cache lock").insert(key, a.clone());
        Ok(a)
    }
}

/// Skeleton draws used by rollouts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RolloutSpec {
    pub steps: usize,
    pub horizon: f64,
}

#[derive(Debug, Clone)]
pub struct Rollout<T> {
    pub skeleton: SkeletonPath,
    pub actions: Vec<Vec<f64>>,
    pub state: T,
    pub payoff: f64,
}

fn run_on<S: StateStructure, C: Control<S> + ?Sized>(s: &S, control: &C, payoff: &Payoff, sk: SkeletonPath) -> Result<Rollout<S::State>> {
    let mut state = s.initial_state();
    let mut actions = Vec::with_capacity(sk.len());
    for (n, step) in sk.steps().iter().enumerate() {
        let a = control.action(s, n, &sk.steps()[..n], &state)?;
        state = s.step(&state, &a, step.delta_t, step.sign)?;
        actions.push(a);
    }
    let payoff = payoff.eval(&s.path(&state))?;
    Ok(Rollout { skeleton: sk, actions, state, payoff })
}

fn skeleton_for<S: StateStructure>(s: &S, spec: RolloutSpec, seed: u64) -> Result<SkeletonPath> {
    let cfg = SkeletonConfig::new(s.epsilon(), s.noise_dim(), spec.horizon)?.with_steps(spec.steps)?;
    sample_skeleton(&cfg, seed)
}

/// One path under `control`; the payoff is taken on the frozen path after
/// `spec.steps` skeleton steps.
pub fn rollout<S: StateStructure, C: Control<S> + ?Sized>(
    s: &S,
    control: &C,
    payoff: &Payoff,
    spec: RolloutSpec,
    seed: u64,
) -> Result<Rollout<S::State>> {
    run_on(s, control, payoff, skeleton_for(s, spec, seed)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct McEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// Independent samples (antithetic pairs count once).
    pub samples: usize,
}

/// Mean payoff over `n` paths with seeds derived from `seed` per path
/// index. With `antithetic`, path `i` is paired with its sign flip and the
/// pair average counts as one sample.
pub fn mc_value<S: StateStructure, C: Control<S> + ?Sized>(
    s: &S,
    control: &C,
    payoff: &Payoff,
    spec: RolloutSpec,
    n: usize,
    seed: u64,
    antithetic: bool,
) -> Result<McEstimate> {
    if n < 2 {
        return Err(Error::config("mc_value needs at least 2 paths"));
    }
    let samples: Vec<f64> = (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let sk = skeleton_for(s, spec, derive_seed(seed, i))?;
            if antithetic {
                let flipped = sk.flipped();
                let a = run_on(s, control, payoff, sk)?.payoff;
                let b = run_on(s, control, payoff, flipped)?.payoff;
                Ok(0.5 * (a + b))
            } else {
                Ok(run_on(s, control, payoff, sk)?.payoff)
            }
        })
        .collect::<Result<_>>()?;
    Ok(summarize(&samples))
}

pub fn summarize(samples: &[f64]) -> McEstimate {
    let n = samples.len() as f64;
    let mean = pairwise_sum(samples) / n;
    let sq: Vec<f64> = samples.iter().map(|x| (x - mean) * (x - mean)).collect();
    let var = if samples.len() > 1 { pairwise_sum(&sq) / (n - 1.0) } else { 0.0 };
    let se = (var / n).sqrt();
    McEstimate { mean, std_error: se, ci_low: mean - 1.96 * se, ci_high: mean + 1.96 * se, samples: samples.len() }
}

/// Independent optimum over the finite tree: plain recursion from the root
/// re-running the structure along every branch, with kernels rebuilt from
/// the lags. Refuses when more than `1e7` leaves would be visited.
pub fn enumerate_oracle<S: StateStructure>(s: &S, cfg: &SolveConfig, depth: usize, payoff: &Payoff) -> Result<f64> {
    let grid = cfg.actions.build()?;
    let d = s.noise_dim();
    let root = discretize_kernel(&vec![0.0; d], s.epsilon(), cfg.q, cfg.rule)?;
    let leaves = ((grid.len() * root.len()) as f64).powi(depth as i32);
    if leaves > 1e7 {
        return Err(Error::ResourceCap(format!("enumeration would visit {leaves:.3e} leaves, cap is 1e7")));
    }
    let ctx = Enum { s, grid: &grid, payoff, q: cfg.q, rule: cfg.rule, depth };
    ctx.value(&s.initial_state(), &vec![0.0; d], 0.0, 0)
}

struct Enum<'a, S> {
    s: &'a S,
    grid: &'a ActionGrid,
    payoff: &'a Payoff,
    q: usize,
    rule: QuantRule,
    depth: usize,
}

impl<S: StateStructure> Enum<'_, S> {
    fn value(&self, state: &S::State, last_hit: &[f64], t: f64, n: usize) -> Result<f64> {
        if n == self.depth {
            return self.payoff.eval(&self.s.path(state));
        }
        let lags: Vec<f64> = last_hit.iter().map(|h| (t - h).max(0.0)).collect();
        let lags = if lags.len() == 1 { vec![0.0] } else { lags };
        let ker = discretize_kernel(&lags, self.s.epsilon(), self.q, self.rule)?;
        let mut best = f64::NEG_INFINITY;
        for a in self.grid.points() {
            let mut v = 0.0;
            for atom in ker.atoms() {
                let next = self.s.step(state, a, atom.delta_t, atom.sign)?;
                let mut hit = last_hit.to_vec();
                hit[atom.sign.coord()] = t + atom.delta_t;
                v += atom.weight * self.value(&next, &hit, t + atom.delta_t, n + 1)?;
            }
            if v > best {
                best = v;
            }
        }
        Ok(best)
    }
}

/// Values of every tree-adapted deterministic policy, by folding children's
/// value lists. Refuses above `cap` policies.
pub fn adapted_policy_values<T: Sync>(tree: &Tree<T>, leaves: &[f64], cap: usize) -> Result<Vec<f64>> {
    fn go<T>(tree: &Tree<T>, leaves: &[f64], n: usize, i: usize, cap: usize) -> Result<Vec<f64>> {
        if n == tree.depth() {
            return Ok(vec![leaves[i]]);
        }
        let ker = tree.kernel(n, i);
        let mut out = Vec::new();
        for a in 0..tree.n_actions(n, i) {
            let mut acc = vec![0.0];
            for (k, atom) in ker.atoms().iter().enumerate() {
                let child = go(tree, leaves, n + 1, tree.child(n, i, a, k), cap)?;
                if acc.len() * child.len() > cap {
                    return Err(Error::ResourceCap(format!("more than {cap} adapted policies")));
                }
                acc = acc.iter().flat_map(|x| child.iter().map(move |c| x + atom.weight * c)).collect();
            }
            out.extend(acc);
            if out.len() > cap {
                return Err(Error::ResourceCap(format!("more than {cap} adapted policies")));
            }
        }
        Ok(out)
    }
    go(tree, leaves, 0, 0, cap)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MertonOracle {
    /// `clip((α - r)/((1 - γ)σ²), [-1, 1])`.
    pub fraction: f64,
    /// Best constant grid action and its value on the tree.
    pub best_constant: f64,
    pub best_constant_value: f64,
    /// Value of every constant grid action, in grid order.
    pub constant_values: Vec<f64>,
}

/// Merton fraction plus a constant-control grid search over the same tree.
pub fn merton_oracle(spec: &PortfolioSpec, tree: &Tree<PortfolioState>, leaves: &[f64]) -> Result<MertonOracle> {
    if spec.alpha.varies() || spec.sigma.varies() {
        return Err(Error::config("the Merton reference needs constant coefficients"));
    }
    let fraction = spec.merton()?;
    let grid = tree.grid();
    let constant_values: Vec<f64> = (0..grid.len()).map(|a| policy_value(tree, leaves, |_, _| a)[0][0]).collect();
    let mut best = 0;
    for (a, v) in constant_values.iter().enumerate() {
        if *v > constant_values[best] {
            best = a;
        }
    }
    Ok(MertonOracle { fraction, best_constant: grid.points()[best][0], best_constant_value: constant_values[best], constant_values })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub epsilon: f64,
    pub depth: usize,
    pub root_value: f64,
    pub certified: f64,
    pub root_action: Vec<f64>,
    pub nodes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    /// `|v_{i+1} - v_i|` for consecutive rows.
    pub differences: Vec<f64>,
    /// Whether the differences shrink monotonically.
    pub stabilizing: bool,
}

/// Solves the problem built by `make` at each ε and tabulates root values.
pub fn convergence_sweep<S, F>(make: F, epsilons: &[f64], cfg: &SolveConfig, horizon: f64, payoff: &Payoff) -> Result<SweepReport>
where
    S: StateStructure,
    F: Fn(f64) -> Result<S>,
{
    let mut rows = Vec::with_capacity(epsilons.len());
    for &eps in epsilons {
        let s = make(eps)?;
        let depth = cfg.depth_for(eps, s.noise_dim(), horizon);
        let tree = build_tree(&s, cfg, depth)?;
        let sol = backward_dp(&s, &tree, payoff)?;
        let cert = certify(cfg, depth, tree.grid(), payoff);
        let root_action = if depth == 0 { Vec::new() } else { tree.action(0, 0, sol.policy[0][0]).to_vec() };
        rows.push(SweepRow { epsilon: eps, depth, root_value: sol.value(), certified: cert.certified, root_action, nodes: tree.node_count() });
    }
    let differences: Vec<f64> = rows.windows(2).map(|w| (w[1].root_value - w[0].root_value).abs()).collect();
    let stabilizing = differences.windows(2).all(|w| w[1] < w[0]);
    Ok(SweepReport { rows, differences, stabilizing })
}

/// `|V(Q) - V(2Q)|` at the root given `base = V(Q)`; the bias budget for
/// nearest-atom projection.
pub fn q_slack<S: StateStructure>(s: &S, cfg: &SolveConfig, depth: usize, payoff: &Payoff, base: f64) -> Result<f64> {
    let mut fine = cfg.clone();
    fine.q = 2 * cfg.q;
    let tree = build_tree(s, &fine, depth)?;
    Ok((backward_dp(s, &tree, payoff)?.value() - base).abs())
}

/// Map from node label to index within layer `n`, used to load policy tables.
pub fn label_index<T>(tree: &Tree<T>, n: usize) -> HashMap<String, usize> {
    (0..tree.layer(n).len()).map(|i| (tree.node_label(n, i), i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver::ActionGridConfig;
    use crate::structures::portfolio::TimeCoef;
    use crate::structures::{Coefficient, PdSdeSpec, PdSdeStructure, PortfolioStructure};

    fn cfg(q: usize, points: usize) -> SolveConfig {
        SolveConfig {
            depth: None,
            q,
            rule: QuantRule::Quantile,
            actions: ActionGridConfig { bound: 1.0, points: Some(points), dim: 1, values: None },
            epsilon_total: 0.01,
            collapse: false,
            state_bin: 1e-3,
            time_bin: None,
            refine: false,
            max_nodes: 5_000_000,
        }
    }

    fn merton_spec(alpha: f64) -> PortfolioSpec {
        PortfolioSpec { r: 0.03, alpha: TimeCoef::Constant(alpha), sigma: TimeCoef::Constant(0.3), gamma: 0.5, x0: 1.0, horizon: 1.0 }
    }

    fn walk(drift_action: f64, diffusion: f64, d: usize, eps: f64) -> PdSdeStructure {
        PdSdeStructure::new(
            PdSdeSpec {
                x0: vec![0.0],
                noise_dim: d,
                drift: vec![Coefficient::Linear { state: 0.0, action: drift_action, time: 0.0, constant: 0.0 }],
                diffusion: vec![Coefficient::Constant { value: diffusion }],
                mixing: None,
            },
            eps,
        )
        .unwrap()
    }

    const SPEC: RolloutSpec = RolloutSpec { steps: 9, horizon: 1.0 };

    #[test]
    fn zero_control_grows_at_the_riskless_rate() {
        let p = PortfolioStructure::new(merton_spec(0.05), 1.0 / 3.0).unwrap();
        let payoff = Payoff::Power { gamma: 0.5 };
        let r = rollout(&p, &ConstantControl(vec![0.0]), &payoff, SPEC, 17).unwrap();
        let t = r.skeleton.time(9);
        let want = (0.03 * t).exp().powf(0.5) / 0.5;
        assert!((r.payoff - want).abs() < 1e-14 * want);
        let again = rollout(&p, &ConstantControl(vec![0.0]), &payoff, SPEC, 17).unwrap();
        assert_eq!(r.payoff.to_bits(), again.payoff.to_bits());
    }

    #[test]
    fn noiseless_payoff_has_zero_error() {
        let s = walk(0.0, 0.0, 1, 0.5);
        let m = mc_value(&s, &ConstantControl(vec![0.3]), &Payoff::Terminal { scale: 1.0 }, SPEC, 100, 1, false).unwrap();
        assert_eq!(m.std_error, 0.0);
        assert_eq!(m.ci_low, m.ci_high);
    }

    #[test]
    fn error_bars_follow_the_square_root_law() {
        let s = walk(0.0, 1.0, 1, 0.5);
        let pay = Payoff::Terminal { scale: 1.0 };
        let a = mc_value(&s, &ConstantControl(vec![0.0]), &pay, SPEC, 4000, 3, false).unwrap();
        let b = mc_value(&s, &ConstantControl(vec![0.0]), &pay, SPEC, 16000, 4, false).unwrap();
        let ratio = (a.ci_high - a.ci_low) / (b.ci_high - b.ci_low);
        assert!((ratio - 2.0).abs() < 0.4, "{ratio}");
    }

    #[test]
    fn antithetic_mean_agrees_with_plain() {
        let p = PortfolioStructure::new(merton_spec(0.05), 1.0 / 3.0).unwrap();
        let pay = Payoff::Power { gamma: 0.5 };
        let c = ConstantControl(vec![0.8]);
        let plain = mc_value(&p, &c, &pay, SPEC, 20000, 5, false).unwrap();
        let anti = mc_value(&p, &c, &pay, SPEC, 20000, 6, true).unwrap();
        assert!((plain.mean - anti.mean).abs() < 3.0 * plain.std_error.hypot(anti.std_error));
        assert!(anti.std_error < plain.std_error);
    }

    #[test]
    fn enumeration_matches_dp() {
        let s = walk(1.0, 0.7, 1, 0.5);
        let c = cfg(2, 3);
        let pay = Payoff::Holder { amplitude: 1.0, frequency: 1.7, phase: 0.4, exponent: 0.6 };
        let tree = build_tree(&s, &c, 3).unwrap();
        let dp = backward_dp(&s, &tree, &pay).unwrap().value();
        let oracle = enumerate_oracle(&s, &c, 3, &pay).unwrap();
        assert!((dp - oracle).abs() < 1e-12, "{dp} {oracle}");
        assert_eq!(enumerate_oracle(&s, &c, 3, &Payoff::Constant { value: 0.0 }).unwrap(), 0.0);
    }

    #[test]
    fn enumeration_matches_dp_in_two_dimensions() {
        let s = walk(1.0, 0.7, 2, 0.5);
        let c = cfg(2, 2);
        let pay = Payoff::Call { strike: 0.1, cap: 0.6 };
        let tree = build_tree(&s, &c, 2).unwrap();
        let dp = backward_dp(&s, &tree, &pay).unwrap().value();
        assert!((dp - enumerate_oracle(&s, &c, 2, &pay).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn one_step_enumeration_is_the_best_expectation() {
        let s = walk(1.0, 0.7, 1, 0.5);
        let c = cfg(2, 3);
        let pay = Payoff::Call { strike: 0.0, cap: 1.0 };
        let ker = crate::kernel::discretize_kernel(&[0.0], 0.5, 2, QuantRule::Quantile).unwrap();
        let best = [-1.0, 0.0, 1.0]
            .iter()
            .map(|&a| ker.expect(|at| pay.eval(&s.path(&s.step(&s.initial_state(), &[a], at.delta_t, at.sign).unwrap())).unwrap()))
            .fold(f64::NEG_INFINITY, f64::max);
        assert!((enumerate_oracle(&s, &c, 1, &pay).unwrap() - best).abs() < 1e-15);
    }

    #[test]
    fn dp_dominates_every_adapted_policy() {
        let s = walk(1.0, 0.7, 1, 0.5);
        let c = cfg(2, 3);
        let pay = Payoff::Holder { amplitude: 1.0, frequency: 2.3, phase: 0.1, exponent: 0.5 };
        let tree = build_tree(&s, &c, 2).unwrap();
        let sol = backward_dp(&s, &tree, &pay).unwrap();
        let all = adapted_policy_values(&tree, &sol.values[2], 2000).unwrap();
        assert_eq!(all.len(), 3 * 3usize.pow(4));
        let best = all.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert!((best - sol.value()).abs() < 1e-12);
        assert!(all.iter().all(|v| *v <= sol.value() + 1e-12));
        assert!(adapted_policy_values(&tree, &sol.values[2], 100).is_err());
    }

    #[test]
    fn merton_references() {
        let p = PortfolioStructure::new(merton_spec(0.05), 0.5).unwrap();
        let pay = Payoff::Power { gamma: 0.5 };
        let tree = build_tree(&p, &cfg(2, 5), 3).unwrap();
        let leaves = crate::solver::leaf_values(&p, &tree, &pay).unwrap();
        let m = merton_oracle(p.spec(), &tree, &leaves).unwrap();
        assert!((m.fraction - 0.02 / 0.045).abs() < 1e-15);
        assert_eq!(m.constant_values.len(), 5);
        assert_eq!(merton_oracle(&merton_spec(0.03), &tree, &leaves).unwrap().fraction, 0.0);
        assert_eq!(merton_oracle(&merton_spec(0.5), &tree, &leaves).unwrap().fraction, 1.0);
        let dp = backward_dp(&p, &tree, &pay).unwrap().value();
        assert!(m.best_constant_value <= dp + 1e-15);
    }

    #[test]
    fn projected_controls() {
        let s = walk(1.0, 1.0, 1, 0.5);
        let pay = Payoff::Terminal { scale: 1.0 };
        let c = project_control(|_: f64, _: &StepPath| vec![0.3], 1.0);
        let r = rollout(&s, &c, &pay, SPEC, 2).unwrap();
        assert!(r.actions.iter().all(|a| a == &[0.3]));
        let c = project_control(|_: f64, _: &StepPath| vec![2.0], 1.0);
        assert!(rollout(&s, &c, &pay, SPEC, 2).unwrap().actions.iter().all(|a| a == &[1.0]));
        let c = project_control(|t: f64, _: &StepPath| vec![t], 1.0);
        let r = rollout(&s, &c, &pay, RolloutSpec { steps: 3, horizon: 1.0 }, 2).unwrap();
        assert_eq!(r.actions[0], vec![0.0]);
        assert_eq!(r.actions[1], vec![r.skeleton.time(1).min(1.0)]);
        assert_eq!(r.actions[2], vec![r.skeleton.time(2).min(1.0)]);
    }

    #[test]
    fn tree_policy_rollout_replays_the_extracted_actions() {
        let p = PortfolioStructure::new(merton_spec(0.05), 0.5).unwrap();
        let pay = Payoff::Power { gamma: 0.5 };
        let tree = build_tree(&p, &cfg(2, 5), 4).unwrap();
        let sol = backward_dp(&p, &tree, &pay).unwrap();
        let ctl = TreePolicyControl { tree: &tree, solution: &sol };
        let r = rollout(&p, &ctl, &pay, RolloutSpec { steps: 4, horizon: 1.0 }, 8).unwrap();
        let direct = crate::solver::extract_policy_control(&tree, &sol, &r.skeleton).unwrap();
        assert_eq!(r.actions, direct);
    }

    #[test]
    fn noiseless_sweep_is_flat() {
        let mut c = cfg(1, 1);
        c.actions = ActionGridConfig { bound: 1.0, points: None, dim: 1, values: Some(vec![1.0]) };
        let rep = convergence_sweep(|e| Ok(walk(1.0, 0.0, 1, e)), &[1.0, 0.5, 1.0 / 3.0], &c, 1.0, &Payoff::Terminal { scale: 1.0 }).unwrap();
        for row in &rep.rows {
            assert!((row.root_value - 1.0).abs() < 1e-9, "{row:?}");
        }
    }

    #[test]
    fn stage_argmax_policy_is_near_merton() {
        let p = PortfolioStructure::new(merton_spec(0.05), 1.0 / 3.0).unwrap();
        let ctl = StageArgmaxControl::new(ActionGrid::uniform(1.0, 41, 1).unwrap(), true);
        let a = Control::<PortfolioStructure>::action(&ctl, &p, 0, &[], &p.initial_state()).unwrap();
        assert!((a[0] - 0.444).abs() < 0.05, "{a:?}");
    }
}
