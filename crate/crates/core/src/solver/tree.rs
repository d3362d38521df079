//! Eager layered history tree over discretized kernel atoms.

use std::cell::RefCell;
use std::collections::HashMap;

use rayon::prelude::*;

use super::{ActionGrid, SolveConfig};
use crate::error::{Error, Result};
use crate::kernel::{discretize_kernel, DiscretizedKernel};
use crate::quadrature;
use crate::skeleton::SignVec;
use crate::structures::{Bins, StateStructure};

/// Skeleton bookkeeping carried by each node.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseState {
    pub elapsed: f64,
    pub last_hit: Vec<f64>,
}

impl NoiseState {
    fn new(dim: usize) -> Self {
        Self { elapsed: 0.0, last_hit: vec![0.0; dim] }
    }

    pub fn lags(&self) -> Vec<f64> {
        self.last_hit.iter().map(|h| (self.elapsed - h).max(0.0)).collect()
    }

    fn advance(&self, delta_t: f64, sign: SignVec) -> Self {
        let mut out = self.clone();
        out.elapsed += delta_t;
        out.last_hit[sign.coord()] = out.elapsed;
        out
    }
}

#[derive(Debug, Clone)]
pub struct TreeNode<S> {
    pub state: S,
    pub noise: NoiseState,
    /// First parent and the (action, atom) pair that led here.
    pub parent: Option<usize>,
    pub via: Option<(usize, usize)>,
    pub sign: Option<SignVec>,
    pub delta_t: f64,
    pub key: Option<Vec<i64>>,
    pub kernel: usize,
    /// Refined action appended after the grid.
    pub extra: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct Tree<S> {
    layers: Vec<Vec<TreeNode<S>>>,
    /// Per inner layer: offsets into `children`, one per node plus an end.
    child_start: Vec<Vec<usize>>,
    children: Vec<Vec<u32>>,
    kernels: Vec<DiscretizedKernel>,
    grid: ActionGrid,
    epsilon: f64,
    collapsed: bool,
}

impl<S> Tree<S> {
    pub fn depth(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn layer(&self, n: usize) -> &[TreeNode<S>] {
        &self.layers[n]
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        self.layers.iter().map(Vec::len).collect()
    }

    pub fn node_count(&self) -> usize {
        self.layers.iter().map(Vec::len).sum()
    }

    pub fn grid(&self) -> &ActionGrid {
        &self.grid
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn collapsed(&self) -> bool {
        self.collapsed
    }

    pub fn kernel(&self, n: usize, i: usize) -> &DiscretizedKernel {
        &self.kernels[self.layers[n][i].kernel]
    }

    pub fn n_actions(&self, n: usize, i: usize) -> usize {
        self.grid.len() + usize::from(self.layers[n][i].extra.is_some())
    }

    pub fn action(&self, n: usize, i: usize, a: usize) -> &[f64] {
        if a < self.grid.len() {
            &self.grid.points()[a]
        } else {
            self.layers[n][i].extra.as_deref().expect("action index within the node's set")
        }
    }

    /// Child index in layer `n+1` of node `i` under action `a` and atom `k`.
    pub fn child(&self, n: usize, i: usize, a: usize, k: usize) -> usize {
        let atoms = self.kernel(n, i).len();
        self.children[n][self.child_start[n][i] + a * atoms + k] as usize
    }

    /// The (action, atom) choices leading from the root to node `i` of layer `n`.
    pub fn route(&self, n: usize, i: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(n);
        let (mut layer, mut node) = (n, i);
        while let (Some(p), Some(v)) = (self.layers[layer][node].parent, self.layers[layer][node].via) {
            out.push(v);
            layer -= 1;
            node = p;
        }
        out.reverse();
        out
    }

    /// Stable text label of a node: its merge key when collapsed, its route otherwise.
    pub fn node_label(&self, n: usize, i: usize) -> String {
        if n == 0 {
            return "root".into();
        }
        match &self.layers[n][i].key {
            Some(k) => k.iter().map(i64::to_string).collect::<Vec<_>>().join(":"),
            None => self.route(n, i).iter().map(|(a, k)| format!("{a}.{k}")).collect::<Vec<_>>().join("/"),
        }
    }
}

const PARENT_CHUNK: usize = 256;

struct Child<S> {
    state: S,
    noise: NoiseState,
    parent: usize,
    via: (usize, usize),
    atom: crate::kernel::Atom,
    key: Option<Vec<i64>>,
}

impl<S> Child<S> {
    fn into_node(self) -> TreeNode<S> {
        TreeNode {
            state: self.state,
            noise: self.noise,
            parent: Some(self.parent),
            via: Some(self.via),
            sign: Some(self.atom.sign),
            delta_t: self.atom.delta_t,
            key: self.key,
            kernel: 0,
            extra: None,
        }
    }
}

/// Number of nodes of the full tree with `b` branches per node.
fn projected_nodes(b: usize, depth: usize) -> f64 {
    (0..=depth).map(|n| (b as f64).powi(n as i32)).sum()
}

/// Grid maximizer of the stage objective polished by golden section on the
/// neighbouring interval, if that beats every grid point.
pub(crate) fn refine_action<S: StateStructure>(s: &S, state: &S::State, grid: &ActionGrid) -> Result<Option<Vec<f64>>> {
    if grid.dim() != 1 || grid.len() < 2 {
        return Ok(None);
    }
    let obj = |a: f64| -> Result<Option<f64>> { s.stage_objective(state, &[a]).transpose() };
    let mut vals = Vec::with_capacity(grid.len());
    for p in grid.points() {
        match obj(p[0])? {
            Some(v) => vals.push(v),
            None => return Ok(None),
        }
    }
    let mut best = 0;
    for (i, v) in vals.iter().enumerate() {
        if *v > vals[best] {
            best = i;
        }
    }
    let xs: Vec<f64> = grid.points().iter().map(|p| p[0]).collect();
    let lo = xs[best.saturating_sub(1)].min(xs[best]);
    let hi = xs[(best + 1).min(xs.len() - 1)].max(xs[best]);
    let failure = RefCell::new(None);
    let (x, fx) = quadrature::golden_section_max(
        |a| match obj(a) {
            Ok(Some(v)) => v,
            Ok(None) => f64::NEG_INFINITY,
            Err(e) => {
                failure.borrow_mut().get_or_insert(e);
                f64::NEG_INFINITY
            }
        },
        lo,
        hi,
        1e-10,
    );
    if let Some(e) = failure.into_inner() {
        return Err(e);
    }
    if fx > vals[best] && !xs.contains(&x) {
        Ok(Some(vec![x]))
    } else {
        Ok(None)
    }
}

/// Builds the layered tree down to `depth`. With `cfg.collapse` and a
/// structure that exposes a sufficient statistic, children with equal keys
/// merge into the first one created, snapped to its bin representative.
pub fn build_tree<S: StateStructure>(s: &S, cfg: &SolveConfig, depth: usize) -> Result<Tree<S::State>> {
    cfg.validate()?;
    let grid = cfg.actions.build()?;
    let d = s.noise_dim();
    let eps = s.epsilon();
    let bins = Bins { state: cfg.state_bin, time: cfg.time_bin.unwrap_or(0.25 * eps * eps) };
    let root = s.initial_state();
    let collapse = cfg.collapse && s.collapse(&root, &bins).is_some();
    let branches = (grid.len() + usize::from(cfg.refine)) * 2 * d * cfg.q;
    if !collapse {
        let projected = projected_nodes(branches, depth);
        if projected > cfg.max_nodes as f64 {
            return Err(Error::ResourceCap(format!(
                "full tree of depth {depth} with {branches} branches per node needs about {projected:.3e} nodes, cap is {}",
                cfg.max_nodes
            )));
        }
    }

    let mut kernels: Vec<DiscretizedKernel> = Vec::new();
    let mut kernel_index: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut layers: Vec<Vec<TreeNode<S::State>>> = vec![vec![TreeNode {
        state: root,
        noise: NoiseState::new(d),
        parent: None,
        via: None,
        sign: None,
        delta_t: 0.0,
        key: None,
        kernel: 0,
        extra: None,
    }]];
    let mut child_start = Vec::with_capacity(depth);
    let mut children = Vec::with_capacity(depth);
    let mut refine_cache: HashMap<Vec<u64>, Option<Vec<f64>>> = HashMap::new();

    for n in 0..depth {
        // Kernels for this layer, computed once per distinct lag vector.
        let lag_keys: Vec<Vec<u64>> = layers[n]
            .iter()
            .map(|node| if d == 1 { Vec::new() } else { node.noise.lags().iter().map(|l| l.to_bits()).collect() })
            .collect();
        let mut missing: Vec<Vec<u64>> = Vec::new();
        for k in &lag_keys {
            if !kernel_index.contains_key(k) && !missing.contains(k) {
                missing.push(k.clone());
            }
        }
        let fresh: Vec<DiscretizedKernel> = missing
            .par_iter()
            .map(|k| {
                let lags: Vec<f64> = if d == 1 { vec![0.0] } else { k.iter().map(|b| f64::from_bits(*b)).collect() };
                discretize_kernel(&lags, eps, cfg.q, cfg.rule)
            })
            .collect::<Result<_>>()?;
        for (k, ker) in missing.into_iter().zip(fresh) {
            kernel_index.insert(k, kernels.len());
            kernels.push(ker);
        }
        for (node, k) in layers[n].iter_mut().zip(&lag_keys) {
            node.kernel = kernel_index[k];
        }

        // Refined actions.
        if cfg.refine {
            let keys: Vec<Option<Vec<u64>>> = layers[n].iter().map(|node| s.stage_cache_key(&node.state)).collect();
            let mut todo: Vec<usize> = Vec::new();
            let mut seen: Vec<&Vec<u64>> = Vec::new();
            for (i, k) in keys.iter().enumerate() {
                match k {
                    Some(k) if refine_cache.contains_key(k) || seen.contains(&k) => {}
                    Some(k) => {
                        seen.push(k);
                        todo.push(i);
                    }
                    None => todo.push(i),
                }
            }
            let layer = &layers[n];
            let found: Vec<Option<Vec<f64>>> =
                todo.par_iter().map(|&i| refine_action(s, &layer[i].state, &grid)).collect::<Result<_>>()?;
            let mut direct: HashMap<usize, Option<Vec<f64>>> = HashMap::new();
            for (&i, f) in todo.iter().zip(found) {
                match &keys[i] {
                    Some(k) => {
                        refine_cache.insert(k.clone(), f);
                    }
                    None => {
                        direct.insert(i, f);
                    }
                }
            }
            for (i, node) in layers[n].iter_mut().enumerate() {
                node.extra = match &keys[i] {
                    Some(k) => refine_cache[k].clone(),
                    None => direct.remove(&i).flatten(),
                };
            }
        }

        // Children, in node, action, atom order. Parents are expanded in
        // chunks so that merged layers never hold all raw children at once.
        let layer = &layers[n];
        let kern = &kernels;
        let grid_ref = &grid;
        let expand = |i: usize, node: &TreeNode<S::State>| -> Result<Vec<Child<S::State>>> {
            let ker = &kern[node.kernel];
            let n_act = grid_ref.len() + usize::from(node.extra.is_some());
            let mut out = Vec::with_capacity(n_act * ker.len());
            for a in 0..n_act {
                let action: &[f64] = if a < grid_ref.len() { &grid_ref.points()[a] } else { node.extra.as_deref().unwrap() };
                for (k, atom) in ker.atoms().iter().enumerate() {
                    let state = s.step(&node.state, action, atom.delta_t, atom.sign)?;
                    let mut noise = node.noise.advance(atom.delta_t, atom.sign);
                    let (state, key) = if collapse {
                        let (mut key, rep) = s.collapse(&state, &bins).expect("collapse available");
                        if d > 1 {
                            for (l, lag) in noise.lags().iter().enumerate() {
                                let kb = (lag / bins.time).round();
                                key.push(kb as i64);
                                noise.last_hit[l] = noise.elapsed - kb * bins.time;
                            }
                        }
                        (rep, Some(key))
                    } else {
                        (state, None)
                    };
                    out.push(Child { state, noise, parent: i, via: (a, k), atom: *atom, key });
                }
            }
            Ok(out)
        };

        let mut starts = Vec::with_capacity(layer.len() + 1);
        let mut links: Vec<u32> = Vec::new();
        let mut next: Vec<TreeNode<S::State>> = Vec::new();
        let mut index: HashMap<Vec<i64>, u32> = HashMap::new();
        for (c, parents) in layer.chunks(PARENT_CHUNK).enumerate() {
            let batches: Vec<Vec<Child<S::State>>> = parents
                .par_iter()
                .enumerate()
                .map(|(off, node)| expand(c * PARENT_CHUNK + off, node))
                .collect::<Result<_>>()?;
            for batch in batches {
                starts.push(links.len());
                for child in batch {
                    let id = match &child.key {
                        Some(key) => match index.get(key) {
                            Some(&id) => id,
                            None => {
                                let id = next.len() as u32;
                                index.insert(key.clone(), id);
                                next.push(child.into_node());
                                id
                            }
                        },
                        None => {
                            next.push(child.into_node());
                            (next.len() - 1) as u32
                        }
                    };
                    links.push(id);
                }
                if next.len() > cfg.max_nodes {
                    return Err(Error::ResourceCap(format!(
                        "layer {} exceeds {} nodes; widen the bins or reduce the depth",
                        n + 1,
                        cfg.max_nodes
                    )));
                }
            }
        }
        starts.push(links.len());
        child_start.push(starts);
        children.push(links);
        layers.push(next);
    }
    if kernels.is_empty() {
        kernels.push(discretize_kernel(&vec![0.0; d], eps, cfg.q, cfg.rule)?);
    }
    Ok(Tree { layers, child_start, children, kernels, grid, epsilon: eps, collapsed: collapse })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver::ActionGridConfig;
    use crate::structures::portfolio::TimeCoef;
    use crate::structures::{PortfolioSpec, PortfolioStructure};

    pub(crate) fn small_cfg(q: usize, points: usize) -> SolveConfig {
        SolveConfig {
            depth: None,
            q,
            rule: crate::density::QuantRule::Quantile,
            actions: ActionGridConfig { bound: 1.0, points: Some(points), dim: 1, values: None },
            epsilon_total: 0.01,
            collapse: false,
            state_bin: 1e-3,
            time_bin: None,
            refine: false,
            max_nodes: 5_000_000,
        }
    }

    fn merton(eps: f64) -> PortfolioStructure {
        PortfolioStructure::new(
            PortfolioSpec { r: 0.03, alpha: TimeCoef::Constant(0.05), sigma: TimeCoef::Constant(0.3), gamma: 0.5, x0: 1.0, horizon: 1.0 },
            eps,
        )
        .unwrap()
    }

    #[test]
    fn full_tree_counts() {
        let t = build_tree(&merton(0.5), &small_cfg(2, 3), 3).unwrap();
        assert_eq!(t.layer_sizes(), vec![1, 12, 144, 1728]);
        assert_eq!(t.route(3, 1727), vec![(2, 3), (2, 3), (2, 3)]);
    }

    #[test]
    fn refuses_oversized_trees() {
        let mut cfg = small_cfg(8, 41);
        cfg.max_nodes = 1000;
        match build_tree(&merton(0.5), &cfg, 4) {
            Err(Error::ResourceCap(m)) => assert!(m.contains("nodes")),
            other => panic!("{:?}", other.map(|t| t.node_count())),
        }
    }

    #[test]
    fn collapse_bounds_layer_growth() {
        let mut cfg = small_cfg(4, 11);
        cfg.collapse = true;
        let t = build_tree(&merton(0.5), &cfg, 6).unwrap();
        assert!(t.collapsed());
        let sizes = t.layer_sizes();
        // Log wealth moves by at most 0.15 + drift per step, so layers stay within a few hundred bins.
        assert!(sizes.iter().all(|&n| n < 2000), "{sizes:?}");
        assert!(sizes[6] < 88usize.pow(6));
    }

    #[test]
    fn refinement_adds_one_action_near_the_stage_optimum() {
        let mut cfg = small_cfg(2, 5);
        cfg.refine = true;
        let t = build_tree(&merton(1.0 / 3.0), &cfg, 1).unwrap();
        let extra = t.layer(0)[0].extra.as_ref().unwrap()[0];
        assert!((extra - 0.444).abs() < 0.05, "{extra}");
        assert_eq!(t.n_actions(0, 0), 6);
        assert_eq!(t.layer_sizes()[1], 6 * 4);
    }
}
