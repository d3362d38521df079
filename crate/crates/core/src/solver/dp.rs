//! Backward induction, policy folding and the discrete derivatives on the tree.

use rayon::prelude::*;

use super::tree::Tree;
use crate::error::{Error, Result};
use crate::skeleton::SkeletonPath;
use crate::structures::{Payoff, StateStructure};

/// Values per layer and, for inner layers, the chosen action index per node.
#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub values: Vec<Vec<f64>>,
    pub policy: Vec<Vec<usize>>,
}

impl Solution {
    pub fn value(&self) -> f64 {
        self.values[0][0]
    }
}

fn action_value<S>(tree: &Tree<S>, next: &[f64], n: usize, i: usize, a: usize) -> f64 {
    let ker = tree.kernel(n, i);
    ker.atoms().iter().enumerate().map(|(k, atom)| atom.weight * next[tree.child(n, i, a, k)]).sum()
}

/// Leaf values of the payoff on each leaf's frozen state path.
pub fn leaf_values<S: StateStructure>(s: &S, tree: &Tree<S::State>, payoff: &Payoff) -> Result<Vec<f64>> {
    let depth = tree.depth();
    tree.layer(depth)
        .par_iter()
        .enumerate()
        .map(|(i, node)| {
            payoff.eval(&s.path(&node.state)).map_err(|e| match e {
                Error::Evaluation { step, message } => {
                    Error::Evaluation { step, message: format!("{message} at leaf with route {:?}", tree.route(depth, i)) }
                }
                other => other,
            })
        })
        .collect()
}

/// Maximizes over the node's action set at every layer. Ties go to the
/// lowest action index.
pub fn backward_dp<S: StateStructure>(s: &S, tree: &Tree<S::State>, payoff: &Payoff) -> Result<Solution> {
    let depth = tree.depth();
    let mut values = vec![Vec::new(); depth + 1];
    let mut policy = vec![Vec::new(); depth];
    values[depth] = leaf_values(s, tree, payoff)?;
    for n in (0..depth).rev() {
        let next = &values[n + 1];
        let rows: Vec<(f64, usize)> = (0..tree.layer(n).len())
            .into_par_iter()
            .map(|i| {
                let mut best = (f64::NEG_INFINITY, 0);
                for a in 0..tree.n_actions(n, i) {
                    let v = action_value(tree, next, n, i, a);
                    if v > best.0 {
                        best = (v, a);
                    }
                }
                best
            })
            .collect();
        if let Some(i) = rows.iter().position(|r| !r.0.is_finite()) {
            return Err(Error::numerical(format!("non-finite value at layer {n}, node {i}")));
        }
        values[n] = rows.iter().map(|r| r.0).collect();
        policy[n] = rows.iter().map(|r| r.1).collect();
    }
    Ok(Solution { values, policy })
}

/// Value of a fixed feedback choice `choose(n, node) -> action index`.
pub fn policy_value<S, F>(tree: &Tree<S>, leaves: &[f64], choose: F) -> Vec<Vec<f64>>
where
    S: Sync,
    F: Fn(usize, usize) -> usize + Sync,
{
    let depth = tree.depth();
    let mut values = vec![Vec::new(); depth + 1];
    values[depth] = leaves.to_vec();
    for n in (0..depth).rev() {
        let next = &values[n + 1];
        values[n] = (0..tree.layer(n).len()).into_par_iter().map(|i| action_value(tree, next, n, i, choose(n, i))).collect();
    }
    values
}

/// `Σ_k w_k (F_{n+1}(child) - F_n(node)) / ε²` under action `a`.
pub fn hamiltonian<S>(tree: &Tree<S>, f_n: &[f64], f_next: &[f64], n: usize, i: usize, a: usize) -> f64 {
    let e2 = tree.epsilon() * tree.epsilon();
    (action_value(tree, f_next, n, i, a) - f_n[i] * tree.kernel(n, i).mass()) / e2
}

/// Extremes of the Hamiltonian over all solved nodes.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct HjbResidual {
    /// Largest `|sup_a U V|` over nodes.
    pub sup_abs: f64,
    /// Largest `U V` over all nodes and actions.
    pub max_any: f64,
}

pub fn hjb_residual<S: Sync>(tree: &Tree<S>, sol: &Solution) -> HjbResidual {
    let mut out = HjbResidual { sup_abs: 0.0, max_any: f64::NEG_INFINITY };
    for n in 0..tree.depth() {
        let rows: Vec<(f64, f64)> = (0..tree.layer(n).len())
            .into_par_iter()
            .map(|i| {
                let us: Vec<f64> =
                    (0..tree.n_actions(n, i)).map(|a| hamiltonian(tree, &sol.values[n], &sol.values[n + 1], n, i, a)).collect();
                let sup = us.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                (sup.abs(), sup)
            })
            .collect();
        for (a, m) in rows {
            out.sup_abs = out.sup_abs.max(a);
            out.max_any = out.max_any.max(m);
        }
    }
    out
}

/// `(F_n(node) - F_{n-1}(parent)) / (ε·sign)` when the step into the node
/// moved coordinate `j`, and zero otherwise.
pub fn vertical_gradient<S>(tree: &Tree<S>, f_n: &[f64], f_prev: &[f64], n: usize, i: usize, j: usize) -> f64 {
    let node = &tree.layer(n)[i];
    match (node.parent, node.sign) {
        (Some(p), Some(sign)) if sign.coord() == j => (f_n[i] - f_prev[p]) / (tree.epsilon() * sign.sign_f64()),
        _ => 0.0,
    }
}

/// Actions the tree policy prescribes along a realized skeleton, matching
/// each step to the nearest atom of the current node's kernel. Steps past
/// the tree depth reuse the last action.
pub fn extract_policy_control<S>(tree: &Tree<S>, sol: &Solution, path: &SkeletonPath) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(path.len());
    let mut node = 0;
    for (n, step) in path.steps().iter().enumerate() {
        if n >= tree.depth() {
            let last = out.last().cloned().unwrap_or_else(|| tree.action(0, 0, sol.policy[0][0]).to_vec());
            out.push(last);
            continue;
        }
        let a = sol.policy[n][node];
        out.push(tree.action(n, node, a).to_vec());
        let k = tree
            .kernel(n, node)
            .nearest(step.delta_t, step.sign)
            .ok_or_else(|| Error::domain(format!("no kernel atom matches step {n}")))?;
        node = tree.child(n, node, a, k);
    }
    Ok(out)
}
