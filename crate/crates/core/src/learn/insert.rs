use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::inference::Evaluator;
use crate::model::{Node, NodeId, NodeKind, Receiver, Spgm, VarId};

use super::stats::{Compact, MutualInfoMatrix, RootedTree};
use super::WeightMode;

/// Where each variable of the base tree lives in a learned model. Following
/// branch 0 of every unobserved sum from the root visits the base tree once.
struct Layout {
    vnode: Vec<NodeId>,
    /// Node standing for the variable's subtree: its Vnode or the sum above it.
    entry: Vec<NodeId>,
    /// Node and child slot referencing `entry`; `None` for the model root.
    holder: Vec<Option<(NodeId, usize)>>,
    spine: Vec<bool>,
}

const NONE: NodeId = NodeId(usize::MAX);

fn layout(spgm: &Spgm, n: usize) -> Result<Layout> {
    let nodes = spgm.nodes();
    let mut out = Layout {
        vnode: vec![NONE; n],
        entry: vec![NONE; n],
        holder: vec![None; n],
        spine: vec![false; nodes.len()],
    };
    let bad = || Error::invalid("model was not produced by edge insertion on the given base tree");
    let mut stack: Vec<(NodeId, Option<(NodeId, usize)>, bool)> = vec![(spgm.root(), None, false)];
    while let Some((id, holder, under_sum)) = stack.pop() {
        let node = &nodes[id.0];
        out.spine[id.0] = true;
        match &node.kind {
            NodeKind::SumUnobserved { .. } => {
                let first = *node.children.first().ok_or_else(bad)?;
                let x = nodes[first.0].kind.var().filter(|_| nodes[first.0].kind.is_vnode());
                let x = x.ok_or_else(bad)?.0;
                if under_sum || x >= n || out.entry[x] != NONE {
                    return Err(bad());
                }
                out.entry[x] = id;
                out.holder[x] = holder;
                stack.push((first, Some((id, 0)), true));
            }
            NodeKind::Vnode { var } => {
                let x = var.0;
                if x >= n || out.vnode[x] != NONE {
                    return Err(bad());
                }
                out.vnode[x] = id;
                if !under_sum {
                    out.entry[x] = id;
                    out.holder[x] = holder;
                }
                if let Some(&c) = node.children.first() {
                    stack.push((c, Some((id, 0)), false));
                }
            }
            NodeKind::Product => {
                for (i, &c) in node.children.iter().enumerate() {
                    stack.push((c, Some((id, i)), false));
                }
            }
            NodeKind::SumObserved { .. } => return Err(bad()),
        }
    }
    if out.vnode.contains(&NONE) {
        return Err(bad());
    }
    Ok(out)
}

/// The tree obtained from the base tree by adding `(u, v)` and dropping the
/// weakest other edge of the cycle this closes.
#[derive(Clone, Debug)]
pub(crate) struct Swap {
    pub apex: usize,
    pub cycle: Vec<usize>,
    /// Removed base-tree edge as `(parent, child)`.
    pub removed: (usize, usize),
    pub parent: Vec<Option<usize>>,
}

impl Swap {
    pub fn new(tree: &RootedTree, mi: &MutualInfoMatrix, u: usize, v: usize) -> Swap {
        let (mut a, mut b) = (u, v);
        let mut side_u = vec![u];
        let mut side_v = vec![v];
        while a != b {
            if tree.depth[a] >= tree.depth[b] {
                a = tree.parent[a].expect("non-root");
                side_u.push(a);
            } else {
                b = tree.parent[b].expect("non-root");
                side_v.push(b);
            }
        }
        let apex = a;
        side_u.pop();
        side_v.pop();
        // edges are named by their child endpoint; ties drop the larger pair
        let key = |x: usize| {
            let p = tree.parent[x].expect("non-root");
            (mi.get(x, p), std::cmp::Reverse((x.min(p), x.max(p))))
        };
        let t = side_u
            .iter()
            .chain(&side_v)
            .copied()
            .min_by(|&x, &y| {
                let (ix, px) = key(x);
                let (iy, py) = key(y);
                ix.total_cmp(&iy).then(px.cmp(&py))
            })
            .expect("cycle has a base-tree edge");
        let mut parent = tree.parent.clone();
        let (chain, other) = if side_u.contains(&t) { (&side_u, v) } else { (&side_v, u) };
        let mut prev = other;
        for &x in chain {
            parent[x] = Some(prev);
            prev = x;
            if x == t {
                break;
            }
        }
        let mut cycle: Vec<usize> = side_u.iter().chain(&side_v).copied().collect();
        cycle.push(apex);
        cycle.sort_unstable();
        Swap {
            apex,
            cycle,
            removed: (tree.parent[t].expect("non-root"), t),
            parent,
        }
    }

    fn children_of(&self, tree: &RootedTree, x: usize) -> Vec<usize> {
        let mut out: Vec<usize> = tree.children[x]
            .iter()
            .chain(&self.cycle)
            .copied()
            .filter(|&y| self.parent[y] == Some(x))
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }
}

fn undirected(a: usize, b: usize) -> (usize, usize) {
    (a.min(b), a.max(b))
}

/// Vnodes reachable from `start` without passing through another Vnode.
fn frontier(nodes: &[Node], start: NodeId) -> Vec<NodeId> {
    let mut out = Vec::new();
    let mut stack = vec![start];
    let mut seen = BTreeSet::new();
    while let Some(id) = stack.pop() {
        if !seen.insert(id) {
            continue;
        }
        if nodes[id.0].kind.is_vnode() {
            out.push(id);
        } else {
            stack.extend(nodes[id.0].children.iter().copied());
        }
    }
    out
}

/// Variable pairs joined inside the branch rooted at `start`, which is off
/// the base spine.
fn branch_edges(nodes: &[Node], spine: &[bool], start: NodeId) -> BTreeSet<(usize, usize)> {
    let mut edges = BTreeSet::new();
    let mut stack = vec![start];
    let mut seen = BTreeSet::new();
    while let Some(id) = stack.pop() {
        if spine[id.0] || !seen.insert(id) {
            continue;
        }
        let node = &nodes[id.0];
        if let NodeKind::Vnode { var } = node.kind {
            if let Some(&c) = node.children.first() {
                for b in frontier(nodes, c) {
                    let w = nodes[b.0].kind.var().expect("vnode").0;
                    edges.insert(undirected(var.0, w));
                    stack.push(b);
                }
            }
        } else {
            stack.extend(node.children.iter().copied());
        }
    }
    edges
}

/// Branch-defining edges of an apex sum: the inserted edge of every branch
/// after the first.
fn inserted_edges(
    nodes: &[Node],
    spine: &[bool],
    tree: &RootedTree,
    q: NodeId,
) -> Vec<(usize, usize)> {
    nodes[q.0].children[1..]
        .iter()
        .filter_map(|&c| {
            branch_edges(nodes, spine, c)
                .into_iter()
                .find(|&(a, b)| !tree.has_edge(a, b))
        })
        .collect()
}

fn mi_weights(
    tree: &RootedTree,
    mi: &MutualInfoMatrix,
    edges: &[(usize, usize)],
) -> Vec<f64> {
    let alpha = mi.alpha();
    let base = edges
        .iter()
        .map(|&(a, b)| {
            let (p, c) = Swap::new(tree, mi, a, b).removed;
            mi.get(p, c)
        })
        .fold(0.0, f64::max);
    let mut w: Vec<f64> = std::iter::once(alpha + base)
        .chain(edges.iter().map(|&(a, b)| alpha + mi.get(a, b)))
        .collect();
    let total: f64 = w.iter().sum();
    if total > 0.0 && total.is_finite() {
        w.iter_mut().for_each(|x| *x /= total);
    } else {
        let k = w.len() as f64;
        w.iter_mut().for_each(|x| *x = 1.0 / k);
    }
    w
}

/// Weighted log-likelihood of the data as a function of one sum node's
/// weights. The density is affine in them, `P = Σ_j w_j A_j + B`, so the
/// terms are probed once and the EM updates run on the cached values.
struct AffineSum {
    weights: Vec<f64>,
    offset: Vec<f64>,
    a: Vec<Vec<f64>>,
    b: Vec<f64>,
}

impl AffineSum {
    fn probe(spgm: &Spgm, q: NodeId, data: &Compact) -> Result<Self> {
        let k = spgm.nodes()[q.0].children.len();
        let mut eval = Evaluator::new(spgm)?;
        let mut logs = Vec::with_capacity(k);
        let mut probe = vec![0.0; k];
        for j in 0..k {
            probe.iter_mut().for_each(|x| *x = 0.0);
            probe[j] = 1.0;
            eval.set_sum_weights(q, &probe);
            logs.push(eval.log_values(&data.data)?);
        }
        probe.iter_mut().for_each(|x| *x = 0.0);
        eval.set_sum_weights(q, &probe);
        let rest = eval.log_values(&data.data)?;
        let n = data.weights.len();
        let mut weights = data.weights.clone();
        let mut offset = vec![0.0; n];
        let mut a = vec![vec![0.0; k]; n];
        let mut b = vec![0.0; n];
        for i in 0..n {
            let m = logs.iter().map(|l| l[i]).fold(f64::NEG_INFINITY, f64::max);
            if m == f64::NEG_INFINITY {
                weights[i] = 0.0;
                continue;
            }
            offset[i] = m;
            b[i] = (rest[i] - m).exp();
            for j in 0..k {
                a[i][j] = ((logs[j][i] - m).exp() - b[i]).max(0.0);
            }
        }
        Ok(AffineSum {
            weights,
            offset,
            a,
            b,
        })
    }

    fn density(&self, i: usize, w: &[f64]) -> f64 {
        self.b[i] + self.a[i].iter().zip(w).map(|(a, w)| a * w).sum::<f64>()
    }

    fn log_likelihood(&self, w: &[f64]) -> f64 {
        (0..self.weights.len())
            .filter(|&i| self.weights[i] > 0.0)
            .map(|i| self.weights[i] * (self.offset[i] + self.density(i, w).ln()))
            .sum()
    }

    /// EM on the sum weights from `start`; never worse than `fallback`.
    fn fit(&self, start: Vec<f64>, fallback: Vec<f64>) -> Vec<f64> {
        const MAX_ITERS: usize = 200;
        let mut w = start;
        let mut ll = self.log_likelihood(&w);
        for _ in 0..MAX_ITERS {
            let mut beta = vec![0.0; w.len()];
            for i in 0..self.weights.len() {
                if self.weights[i] == 0.0 {
                    continue;
                }
                let p = self.density(i, &w);
                if p <= 0.0 {
                    continue;
                }
                for (j, bj) in beta.iter_mut().enumerate() {
                    *bj += self.weights[i] * w[j] * self.a[i][j] / p;
                }
            }
            let total: f64 = beta.iter().sum();
            if !(total > 0.0 && total.is_finite()) {
                break;
            }
            let next: Vec<f64> = beta.iter().map(|b| b / total).collect();
            let next_ll = self.log_likelihood(&next);
            let gain = next_ll - ll;
            w = next;
            ll = next_ll;
            if gain.abs() <= 1e-10 * ll.abs().max(1.0) {
                break;
            }
        }
        if ll.is_nan() || ll < self.log_likelihood(&fallback) {
            fallback
        } else {
            w
        }
    }
}

/// Adds the tree obtained by inserting `(u, v)` into the base tree. Returns
/// `None` when that tree is already one of the branches.
pub(crate) fn insert(
    spgm: &Spgm,
    tree: &RootedTree,
    edge: (usize, usize),
    mi: &MutualInfoMatrix,
    mode: WeightMode,
    data: &Compact,
) -> Result<Option<Spgm>> {
    let n = tree.len();
    let (u, v) = edge;
    if u >= n || v >= n || u == v {
        return Err(Error::invalid(format!("invalid edge ({u}, {v}) over {n} variables")));
    }
    if tree.has_edge(u, v) {
        return Err(Error::EdgeInTree(u.min(v), u.max(v)));
    }
    let lay = layout(spgm, n)?;
    let swap = Swap::new(tree, mi, u, v);
    let w = swap.apex;
    let existing = match spgm.nodes()[lay.entry[w].0].kind {
        NodeKind::SumUnobserved { .. } => Some(lay.entry[w]),
        _ => None,
    };
    let mut branch_edges_before = Vec::new();
    if let Some(q) = existing {
        branch_edges_before = inserted_edges(spgm.nodes(), &lay.spine, tree, q);
        if branch_edges_before.contains(&undirected(u, v)) {
            return Ok(None);
        }
    }

    let (variables, mut nodes, mut root, mut pairwise, mut unary) = spgm.clone().into_parts();
    let mut copy = vec![NONE; n];
    for &x in &swap.cycle {
        nodes.push(Node {
            kind: NodeKind::Vnode { var: VarId(x) },
            children: Vec::new(),
        });
        copy[x] = NodeId(nodes.len() - 1);
    }
    for &x in &swap.cycle {
        let kids: Vec<NodeId> = swap
            .children_of(tree, x)
            .into_iter()
            .map(|c| if copy[c] != NONE { copy[c] } else { lay.entry[c] })
            .collect();
        let child = match kids.len() {
            0 => None,
            1 => Some(kids[0]),
            _ => {
                nodes.push(Node {
                    kind: NodeKind::Product,
                    children: kids,
                });
                Some(NodeId(nodes.len() - 1))
            }
        };
        nodes[copy[x].0].children = child.into_iter().collect();
    }

    let (q, old) = match existing {
        Some(q) => {
            let node = &mut nodes[q.0];
            node.children.push(copy[w]);
            let w = node.kind.weights_mut().expect("sum");
            let old = w.clone();
            w.push(0.0);
            (q, old)
        }
        None => {
            nodes.push(Node {
                kind: NodeKind::SumUnobserved {
                    weights: vec![1.0, 0.0],
                },
                children: vec![lay.vnode[w], copy[w]],
            });
            let q = NodeId(nodes.len() - 1);
            match lay.holder[w] {
                Some((h, slot)) => nodes[h.0].children[slot] = q,
                None => root = q,
            }
            (q, vec![1.0])
        }
    };

    let mut out = Spgm::from_parts(variables, nodes, root, pairwise.clone(), unary.clone());
    let receivers = out.receivers()?;
    for (i, node) in out.nodes().iter().enumerate() {
        let NodeKind::Vnode { var } = node.kind else {
            continue;
        };
        let id = NodeId(i);
        for r in &receivers[i] {
            match *r {
                Receiver::Root => {
                    unary.entry(id).or_insert_with(|| mi.marginal(var.0));
                }
                Receiver::Vnode(p) => {
                    let pv = out.nodes()[p.0].kind.var().expect("vnode").0;
                    pairwise
                        .entry((p, id))
                        .or_insert_with(|| mi.conditional(pv, var.0));
                }
            }
        }
    }
    let (variables, mut nodes, root, _, _) = out.into_parts();

    let k = old.len();
    let start: Vec<f64> = old
        .iter()
        .map(|x| x * k as f64 / (k + 1) as f64)
        .chain(std::iter::once(1.0 / (k + 1) as f64))
        .collect();
    let weights = match mode {
        WeightMode::MiProportional => {
            let mut edges = branch_edges_before;
            edges.push(undirected(u, v));
            mi_weights(tree, mi, &edges)
        }
        WeightMode::Em => {
            *nodes[q.0].kind.weights_mut().expect("sum") = start.clone();
            out = Spgm::from_parts(variables.clone(), nodes.clone(), root, pairwise.clone(), unary.clone());
            let affine = AffineSum::probe(&out, q, data)?;
            let fallback = old.iter().copied().chain(std::iter::once(0.0)).collect();
            affine.fit(start, fallback)
        }
    };
    *nodes[q.0].kind.weights_mut().expect("sum") = weights;
    out = Spgm::from_parts(variables, nodes, root, pairwise, unary);
    out.ensure_valid()?;
    Ok(Some(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Dataset;

    fn chain_mi() -> (MutualInfoMatrix, RootedTree) {
        // MI(A,B) > MI(B,C) > MI(A,C)
        let mut rows = Vec::new();
        let pattern: [(u8, u8, u8, usize); 8] = [
            (0, 0, 0, 30),
            (1, 1, 1, 30),
            (0, 0, 1, 8),
            (1, 1, 0, 8),
            (0, 1, 1, 6),
            (1, 0, 0, 6),
            (0, 1, 0, 1),
            (1, 0, 1, 1),
        ];
        for (a, b, c, n) in pattern {
            for _ in 0..n {
                rows.push(vec![a, b, c]);
            }
        }
        let data = Dataset::from_rows(&rows).unwrap();
        let w = vec![1.0; data.len()];
        let mi = MutualInfoMatrix::compute(&data, &w, &[2, 2, 2], 0.0).unwrap();
        let tree = RootedTree::from_edges(3, &[(0, 1), (1, 2)]).unwrap();
        (mi, tree)
    }

    #[test]
    fn swap_drops_weakest_cycle_edge() {
        let (mi, tree) = chain_mi();
        assert!(mi.get(0, 1) > mi.get(1, 2) && mi.get(1, 2) > mi.get(0, 2));
        let s = Swap::new(&tree, &mi, 0, 2);
        assert_eq!(s.removed, (1, 2));
        assert_eq!(s.apex, 0);
        assert_eq!(s.parent, vec![None, Some(0), Some(0)]);
    }
}
