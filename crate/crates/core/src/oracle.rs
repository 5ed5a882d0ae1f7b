//! Brute-force mixture-of-subtrees semantics.
//!
//! Everything here is deliberately independent of the message-passing code:
//! subtrees are enumerated explicitly and each tree distribution is summed
//! over its joint domain. Exponential, and only meant for verification.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::evidence::Evidence;
use crate::fixtures::random_distribution;
use crate::model::{NodeId, NodeKind, Spgm, SpgmBuilder, VarId};

pub const DEFAULT_SUBTREE_LIMIT: usize = 10_000;
pub const JOINT_LIMIT: u128 = 1 << 20;

/// One factor of a tree distribution: `P(var | parent)` or `P(var)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Factor {
    pub node: NodeId,
    pub var: VarId,
    pub states: usize,
    pub parent: Option<(VarId, usize)>,
    /// Row-major, `parent_states x states` (one row for unary factors).
    pub table: Vec<f64>,
}

/// A subtree: one child chosen at every reachable sum node.
#[derive(Clone, Debug, PartialEq)]
pub struct Subtree {
    pub choice: BTreeMap<NodeId, usize>,
    pub nodes: Vec<NodeId>,
    pub edges: Vec<(NodeId, NodeId)>,
    pub z: Vec<(VarId, usize)>,
    pub lambda: f64,
    pub factors: Vec<Factor>,
}

impl Subtree {
    /// Model variables of the tree distribution.
    pub fn x_scope(&self) -> BTreeSet<VarId> {
        self.factors.iter().map(|f| f.var).collect()
    }

    /// True when the induced graph is a tree rooted at its first node.
    pub fn is_tree(&self) -> bool {
        let distinct: BTreeSet<NodeId> = self.nodes.iter().copied().collect();
        if distinct.len() != self.nodes.len() || self.edges.len() + 1 != self.nodes.len() {
            return false;
        }
        let mut indegree: BTreeMap<NodeId, usize> = BTreeMap::new();
        for &(_, c) in &self.edges {
            *indegree.entry(c).or_default() += 1;
        }
        indegree.values().all(|&d| d == 1) && !indegree.contains_key(&self.nodes[0])
    }
}

/// All subtrees, ordered lexicographically by their choice vectors.
pub fn enumerate_subtrees(spgm: &Spgm, limit: usize) -> Result<Vec<Subtree>> {
    spgm.ensure_valid()?;
    let mut choices = vec![BTreeMap::new()];
    expand(spgm, spgm.root(), &mut choices, limit)?;
    let mut keyed: Vec<(Vec<(NodeId, usize)>, BTreeMap<NodeId, usize>)> = choices
        .into_iter()
        .map(|c| (c.iter().map(|(&n, &k)| (n, k)).collect(), c))
        .collect();
    keyed.sort_by(|a, b| a.0.cmp(&b.0));
    keyed.dedup_by(|a, b| a.0 == b.0);
    Ok(keyed
        .into_iter()
        .map(|(_, c)| build_subtree(spgm, c))
        .collect())
}

/// Extends every partial choice map so that all sum nodes reachable from
/// `node` under it are fixed.
fn expand(
    spgm: &Spgm,
    node: NodeId,
    choices: &mut Vec<BTreeMap<NodeId, usize>>,
    limit: usize,
) -> Result<()> {
    let n = &spgm.nodes()[node.0];
    match &n.kind {
        NodeKind::Vnode { .. } | NodeKind::Product => {
            for &c in &n.children {
                expand(spgm, c, choices, limit)?;
            }
        }
        NodeKind::SumObserved { .. } | NodeKind::SumUnobserved { .. } => {
            let mut out = Vec::new();
            for partial in choices.drain(..) {
                let options: Vec<usize> = match partial.get(&node) {
                    Some(&k) => vec![k],
                    None => (0..n.children.len()).collect(),
                };
                for k in options {
                    let mut branch = vec![partial.clone()];
                    branch[0].insert(node, k);
                    expand(spgm, n.children[k], &mut branch, limit)?;
                    out.extend(branch);
                    if out.len() > limit {
                        return Err(Error::SubtreeLimit { limit });
                    }
                }
            }
            *choices = out;
        }
    }
    if choices.len() > limit {
        return Err(Error::SubtreeLimit { limit });
    }
    Ok(())
}

fn build_subtree(spgm: &Spgm, choice: BTreeMap<NodeId, usize>) -> Subtree {
    let mut st = Subtree {
        choice,
        nodes: Vec::new(),
        edges: Vec::new(),
        z: Vec::new(),
        lambda: 1.0,
        factors: Vec::new(),
    };
    // (node, parent in the induced graph, nearest Vnode ancestor)
    let mut stack = vec![(spgm.root(), None::<NodeId>, None::<NodeId>)];
    while let Some((id, parent, vparent)) = stack.pop() {
        st.nodes.push(id);
        if let Some(p) = parent {
            st.edges.push((p, id));
        }
        let node = &spgm.nodes()[id.0];
        match &node.kind {
            NodeKind::Vnode { var } => {
                let states = spgm.variables()[var.0].domain;
                let (parent_var, table) = match vparent {
                    None => (None, spgm.unary()[&id].clone()),
                    Some(s) => {
                        let svar = spgm.nodes()[s.0].kind.var().unwrap();
                        (
                            Some((svar, spgm.variables()[svar.0].domain)),
                            spgm.pairwise()[&(s, id)].values().to_vec(),
                        )
                    }
                };
                st.factors.push(Factor {
                    node: id,
                    var: *var,
                    states,
                    parent: parent_var,
                    table,
                });
                for &c in node.children.iter().rev() {
                    stack.push((c, Some(id), Some(id)));
                }
            }
            NodeKind::Product => {
                for &c in node.children.iter().rev() {
                    stack.push((c, Some(id), vparent));
                }
            }
            NodeKind::SumObserved { var, weights } => {
                let k = st.choice[&id];
                st.lambda *= weights[k];
                st.z.push((*var, k));
                stack.push((node.children[k], Some(id), vparent));
            }
            NodeKind::SumUnobserved { weights } => {
                let k = st.choice[&id];
                st.lambda *= weights[k];
                stack.push((node.children[k], Some(id), vparent));
            }
        }
    }
    st
}

/// `λ_τ · [z_τ] · Σ_{free x} P_τ(x)`, by direct summation.
pub fn subtree_eval(subtree: &Subtree, evidence: &Evidence) -> Result<f64> {
    for &(z, k) in &subtree.z {
        if evidence.get(z).is_some_and(|s| s != k) {
            return Ok(0.0);
        }
    }
    let vars: Vec<(VarId, usize)> = subtree.factors.iter().map(|f| (f.var, f.states)).collect();
    let free: Vec<(VarId, usize)> = vars
        .iter()
        .copied()
        .filter(|(v, _)| evidence.get(*v).is_none())
        .collect();
    let count: u128 = free.iter().map(|&(_, d)| d as u128).product();
    if count > JOINT_LIMIT {
        return Err(Error::JointLimit {
            count,
            limit: JOINT_LIMIT,
        });
    }
    let mut assign: BTreeMap<VarId, usize> = vars
        .iter()
        .filter_map(|&(v, _)| evidence.get(v).map(|s| (v, s)))
        .collect();
    let mut counter = vec![0usize; free.len()];
    let mut total = 0.0;
    loop {
        for (i, &(v, _)) in free.iter().enumerate() {
            assign.insert(v, counter[i]);
        }
        let mut p = 1.0;
        for f in &subtree.factors {
            let row = f.parent.map_or(0, |(pv, _)| assign[&pv]);
            p *= f.table[row * f.states + assign[&f.var]];
        }
        total += p;
        // odometer increment
        let mut i = 0;
        while i < free.len() {
            counter[i] += 1;
            if counter[i] < free[i].1 {
                break;
            }
            counter[i] = 0;
            i += 1;
        }
        if i == free.len() {
            break;
        }
    }
    Ok(subtree.lambda * total)
}

/// Ground-truth value: the sum of every subtree's value.
pub fn mixture_eval(spgm: &Spgm, evidence: &Evidence, limit: usize) -> Result<f64> {
    let subtrees = enumerate_subtrees(spgm, limit)?;
    mixture_eval_subtrees(&subtrees, evidence)
}

pub fn mixture_eval_subtrees(subtrees: &[Subtree], evidence: &Evidence) -> Result<f64> {
    let mut total = 0.0;
    for st in subtrees {
        total += subtree_eval(st, evidence)?;
    }
    Ok(total)
}

/// Stacked model with `levels` observed sums of `children` Vnode branches
/// each. Branches of one level all lead into the next sum; the last level
/// leads into a shared leaf Vnode.
pub fn stacked_generator(children: usize, levels: usize, seed: u64) -> Result<Spgm> {
    if children == 0 || levels == 0 {
        return Err(Error::invalid("stacked model needs at least one child and one level"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = SpgmBuilder::new();
    let xs: Vec<VarId> = (0..=levels).map(|l| b.model_var(format!("X{l}"), 2)).collect();
    let zs: Vec<VarId> = (0..levels)
        .map(|l| b.context_var(format!("Z{l}"), children))
        .collect();

    let terminal = b.vnode(xs[levels], None);
    let mut below = terminal;
    let mut level_vnodes: Vec<Vec<NodeId>> = vec![Vec::new(); levels];
    for l in (0..levels).rev() {
        let vnodes: Vec<NodeId> = (0..children).map(|_| b.vnode(xs[l], Some(below))).collect();
        below = b.observed_sum(zs[l], random_distribution(&mut rng, children), vnodes.clone());
        level_vnodes[l] = vnodes;
    }
    let root = below;
    for &v in &level_vnodes[0] {
        b.unary(v, random_distribution(&mut rng, 2));
    }
    for l in 0..levels {
        let next: Vec<NodeId> = if l + 1 < levels {
            level_vnodes[l + 1].clone()
        } else {
            vec![terminal]
        };
        for &p in &level_vnodes[l] {
            for &c in &next {
                let rows = vec![random_distribution(&mut rng, 2), random_distribution(&mut rng, 2)];
                b.cpt(p, c, &rows)?;
            }
        }
    }
    b.build_valid(root)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    #[test]
    fn e1_has_two_subtrees() {
        let e1 = fixtures::e1();
        let st = enumerate_subtrees(&e1.spgm, DEFAULT_SUBTREE_LIMIT).unwrap();
        assert_eq!(st.len(), 2);
        assert_eq!(st[0].z, vec![(e1.z1, 0)]);
        assert_eq!(st[1].z, vec![(e1.z1, 1)]);
        assert!(st.iter().all(Subtree::is_tree));
    }

    #[test]
    fn subtree_values() {
        let e1 = fixtures::e1();
        let st = enumerate_subtrees(&e1.spgm, DEFAULT_SUBTREE_LIMIT).unwrap();
        let z1 = Evidence::new().with(e1.z1, 1);
        assert_eq!(subtree_eval(&st[0], &z1).unwrap(), 0.0);
        let ab = Evidence::new().with(e1.a, 0).with(e1.b, 0);
        assert!((subtree_eval(&st[0], &ab).unwrap() - 0.378).abs() < 1e-15);
        assert!((subtree_eval(&st[1], &Evidence::new()).unwrap() - 0.3).abs() < 1e-15);
    }

    #[test]
    fn e1_mixture_values() {
        let e1 = fixtures::e1();
        let ab = Evidence::new().with(e1.a, 0).with(e1.b, 0);
        let v = mixture_eval(&e1.spgm, &ab, DEFAULT_SUBTREE_LIMIT).unwrap();
        assert!((v - 0.468).abs() < 1e-15);
        let all = mixture_eval(&e1.spgm, &Evidence::new(), DEFAULT_SUBTREE_LIMIT).unwrap();
        assert!((all - 1.0).abs() < 1e-12);
        let z = Evidence::new().with(e1.z1, 1);
        let v = mixture_eval(&e1.spgm, &z, DEFAULT_SUBTREE_LIMIT).unwrap();
        assert!((v - 0.3).abs() < 1e-15);
    }

    #[test]
    fn tree_model_has_one_subtree() {
        let chain = fixtures::random_chain(4, 3);
        assert_eq!(enumerate_subtrees(&chain, 10).unwrap().len(), 1);
    }

    #[test]
    fn limit_is_enforced() {
        let s = stacked_generator(3, 4, 0).unwrap();
        assert!(matches!(
            enumerate_subtrees(&s, 50),
            Err(Error::SubtreeLimit { limit: 50 })
        ));
    }

    #[test]
    fn stacked_counts() {
        // Branching `children` times at each of `levels` sums gives
        // children^levels subtrees.
        for (m, k, subtrees) in [(2, 3, 8), (1, 5, 1), (3, 2, 9)] {
            let s = stacked_generator(m, k, 11).unwrap();
            assert_eq!(s.edge_count(), 2 * m * k);
            assert_eq!(enumerate_subtrees(&s, DEFAULT_SUBTREE_LIMIT).unwrap().len(), subtrees);
        }
    }

    #[test]
    fn lambdas_sum_to_one_and_scopes_match() {
        for seed in 0..20 {
            let spgm = fixtures::random_spgm(seed, &fixtures::RandomSpgmConfig::default());
            let st = enumerate_subtrees(&spgm, DEFAULT_SUBTREE_LIMIT).unwrap();
            let total: f64 = st.iter().map(|s| s.lambda).sum();
            assert!((total - 1.0).abs() < 1e-9);
            let full: BTreeSet<VarId> = spgm.model_variables().into_iter().collect();
            for s in &st {
                assert!(s.is_tree());
                assert_eq!(s.x_scope(), full);
                assert!(s.lambda > 0.0 && s.lambda <= 1.0);
            }
        }
    }
}
