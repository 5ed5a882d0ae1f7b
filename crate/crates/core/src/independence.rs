//! Independence queries from directed path structure.
//!
//! [`independence_query`] reports two things: the plain path criterion
//! (no surviving directed path, or every surviving path passes a Vnode for
//! the conditioning variable) and a verdict that is only `true` when the
//! independence is guaranteed. The guarantee additionally requires that no
//! free mixture couples two query variables and that every common-cause
//! trek between `A` and `B` is blocked, which the path criterion alone
//! does not check.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::evidence::Evidence;
use crate::model::{NodeId, NodeKind, Scopes, Spgm, VarId, VarKind};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DirectedPathSet {
    pub paths: Vec<Vec<NodeId>>,
}

impl DirectedPathSet {
    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IndependenceAnswer {
    /// Independence is guaranteed by the model structure.
    pub independent: bool,
    /// The path criterion alone holds.
    pub path_criterion: bool,
    /// Directed paths between `A` and `B` (both directions) that survive the
    /// context.
    pub surviving_paths: u128,
    /// Surviving paths without a Vnode for the conditioning variable.
    pub unblocked_paths: u128,
}

fn check_model_var(spgm: &Spgm, var: VarId) -> Result<()> {
    let v = spgm.variable(var)?;
    if v.kind != VarKind::Model {
        return Err(Error::invalid(format!("{} is not a model variable", v.name)));
    }
    Ok(())
}

fn check_context(spgm: &Spgm, context: &Evidence) -> Result<()> {
    context.check(spgm.variables())?;
    for (var, _) in context.iter() {
        if spgm.variables()[var.0].kind != VarKind::Context {
            return Err(Error::invalid(format!(
                "context assigns model variable {}",
                spgm.variables()[var.0].name
            )));
        }
    }
    Ok(())
}

fn label(spgm: &Spgm, node: NodeId) -> Option<VarId> {
    match spgm.nodes()[node.0].kind {
        NodeKind::Vnode { var } => Some(var),
        _ => None,
    }
}

/// Children kept under the context: an observed sum whose variable is fixed
/// keeps only the selected child.
fn kept_children(spgm: &Spgm, node: NodeId, context: &Evidence) -> Vec<(usize, NodeId)> {
    let n = &spgm.nodes()[node.0];
    match &n.kind {
        NodeKind::SumObserved { var, .. } => match context.get(*var) {
            Some(k) => n.children.get(k).map(|&c| (k, c)).into_iter().collect(),
            None => n.children.iter().copied().enumerate().collect(),
        },
        _ => n.children.iter().copied().enumerate().collect(),
    }
}

/// All directed paths from a Vnode labeled `a` to a Vnode labeled `b`.
pub fn directed_paths(spgm: &Spgm, a: VarId, b: VarId) -> Result<DirectedPathSet> {
    contextual_paths(spgm, a, b, &Evidence::new())
}

/// Directed paths inside the part of the model the context leaves
/// reachable from the root: observed sums whose variable is fixed keep only
/// the selected child.
pub fn contextual_paths(
    spgm: &Spgm,
    a: VarId,
    b: VarId,
    context: &Evidence,
) -> Result<DirectedPathSet> {
    check_model_var(spgm, a)?;
    check_model_var(spgm, b)?;
    check_context(spgm, context)?;
    spgm.topological_order()?;
    if spgm.root().0 >= spgm.nodes().len() {
        return Err(Error::UnknownNode(spgm.root()));
    }
    let seen = reachable(spgm, context);
    let mut out = DirectedPathSet::default();
    for (i, _) in spgm.nodes().iter().enumerate() {
        if !seen[i] || label(spgm, NodeId(i)) != Some(a) {
            continue;
        }
        let mut path = vec![NodeId(i)];
        walk(spgm, b, context, &mut path, &mut out.paths);
    }
    Ok(out)
}

fn walk(
    spgm: &Spgm,
    b: VarId,
    context: &Evidence,
    path: &mut Vec<NodeId>,
    out: &mut Vec<Vec<NodeId>>,
) {
    let node = *path.last().unwrap();
    for (_, c) in kept_children(spgm, node, context) {
        path.push(c);
        if label(spgm, c) == Some(b) {
            out.push(path.clone());
        }
        walk(spgm, b, context, path, out);
        path.pop();
    }
}

/// Number of context-surviving directed paths from `a`-Vnodes to
/// `b`-Vnodes; with `avoid`, only paths without a Vnode labeled `avoid`.
fn count_paths(
    spgm: &Spgm,
    order: &[NodeId],
    a: VarId,
    b: VarId,
    avoid: Option<VarId>,
    context: &Evidence,
    seen: &[bool],
) -> u128 {
    // to_b[n]: paths from n (exclusive) down to a b-Vnode
    let mut to_b = vec![0u128; spgm.nodes().len()];
    for &id in order {
        let mut total = 0u128;
        for (_, c) in kept_children(spgm, id, context) {
            let via = match label(spgm, c) {
                Some(v) if Some(v) == avoid => 0,
                Some(v) if v == b => 1u128.saturating_add(to_b[c.0]),
                _ => to_b[c.0],
            };
            total = total.saturating_add(via);
        }
        to_b[id.0] = total;
    }
    order
        .iter()
        .filter(|id| seen[id.0] && label(spgm, **id) == Some(a))
        .fold(0u128, |acc, id| acc.saturating_add(to_b[id.0]))
}

/// Independence of `a` and `b`, optionally given `given`, under a context
/// over Z variables.
pub fn independence_query(
    spgm: &Spgm,
    a: VarId,
    b: VarId,
    given: Option<VarId>,
    context: &Evidence,
) -> Result<IndependenceAnswer> {
    check_model_var(spgm, a)?;
    check_model_var(spgm, b)?;
    if let Some(c) = given {
        check_model_var(spgm, c)?;
        if c == a || c == b {
            return Err(Error::invalid("conditioning variable must differ from A and B"));
        }
    }
    if a == b {
        return Err(Error::invalid("query variables must be distinct"));
    }
    check_context(spgm, context)?;
    spgm.ensure_valid()?;
    let order = spgm.topological_order()?;
    let seen = reachable(spgm, context);

    let surviving = count_paths(spgm, &order, a, b, None, context, &seen)
        .saturating_add(count_paths(spgm, &order, b, a, None, context, &seen));
    let unblocked = match given {
        None => surviving,
        Some(c) => count_paths(spgm, &order, a, b, Some(c), context, &seen)
            .saturating_add(count_paths(spgm, &order, b, a, Some(c), context, &seen)),
    };
    let path_criterion = unblocked == 0;

    let independent = path_criterion
        && !mixture_couples(spgm, &order, a, b, given, context, &seen)
        && !unblocked_trek(spgm, &order, a, b, given, context, &seen);

    Ok(IndependenceAnswer {
        independent,
        path_criterion,
        surviving_paths: surviving,
        unblocked_paths: unblocked,
    })
}

/// Nodes reachable from the root once the context has pruned observed sums.
fn reachable(spgm: &Spgm, context: &Evidence) -> Vec<bool> {
    let mut seen = vec![false; spgm.nodes().len()];
    let mut stack = vec![spgm.root()];
    seen[spgm.root().0] = true;
    while let Some(id) = stack.pop() {
        for (_, c) in kept_children(spgm, id, context) {
            if !seen[c.0] {
                seen[c.0] = true;
                stack.push(c);
            }
        }
    }
    seen
}

/// True when a reachable sum that the context leaves free has two or more
/// query variables in its scope. Such a latent choice can correlate them
/// regardless of the tree structure of each branch.
fn mixture_couples(
    spgm: &Spgm,
    order: &[NodeId],
    a: VarId,
    b: VarId,
    given: Option<VarId>,
    context: &Evidence,
    seen: &[bool],
) -> bool {
    let scopes = Scopes::compute(spgm).expect("valid model");
    let query: BTreeSet<VarId> = [Some(a), Some(b), given].into_iter().flatten().collect();
    order.iter().any(|&id| {
        let free = match &spgm.nodes()[id.0].kind {
            NodeKind::SumUnobserved { .. } => true,
            NodeKind::SumObserved { var, .. } => context.get(*var).is_none(),
            _ => false,
        };
        free && seen[id.0] && query.iter().filter(|&&v| scopes.contains(id, v)).count() >= 2
    })
}

/// True when some Vnode reaches both an `a`-Vnode and a `b`-Vnode along
/// context-surviving paths that avoid `given`-Vnodes. In any single tree the
/// path between `a` and `b` is such a trek.
fn unblocked_trek(
    spgm: &Spgm,
    order: &[NodeId],
    a: VarId,
    b: VarId,
    given: Option<VarId>,
    context: &Evidence,
    seen: &[bool],
) -> bool {
    let n = spgm.nodes().len();
    let mut reach_a = vec![false; n];
    let mut reach_b = vec![false; n];
    for &id in order {
        let lab = label(spgm, id);
        if lab.is_some() && lab == given {
            continue;
        }
        let kids = kept_children(spgm, id, context);
        reach_a[id.0] = lab == Some(a) || kids.iter().any(|(_, c)| reach_a[c.0]);
        reach_b[id.0] = lab == Some(b) || kids.iter().any(|(_, c)| reach_b[c.0]);
    }
    order
        .iter()
        .any(|&id| seen[id.0] && label(spgm, id).is_some() && reach_a[id.0] && reach_b[id.0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::model::SpgmBuilder;

    #[test]
    fn e1_paths() {
        let e1 = fixtures::e1();
        assert_eq!(directed_paths(&e1.spgm, e1.a, e1.b).unwrap().len(), 2);
        assert!(directed_paths(&e1.spgm, e1.b, e1.a).unwrap().is_empty());
        let ctx = Evidence::new().with(e1.z1, 0);
        let p = contextual_paths(&e1.spgm, e1.a, e1.b, &ctx).unwrap();
        assert_eq!(p.paths, vec![vec![e1.spgm.root(), e1.sum, e1.b_first]]);
        let ans = independence_query(&e1.spgm, e1.a, e1.b, None, &Evidence::new()).unwrap();
        assert!(!ans.independent && !ans.path_criterion);
        assert_eq!(ans.surviving_paths, 2);
    }

    #[test]
    fn chain_is_separated_by_middle() {
        let chain = fixtures::random_chain(3, 1);
        let (x0, x1, x2) = (VarId(0), VarId(1), VarId(2));
        let ans = independence_query(&chain, x0, x2, Some(x1), &Evidence::new()).unwrap();
        assert!(ans.independent && ans.path_criterion);
        assert_eq!(ans.surviving_paths, 1);
        let ans = independence_query(&chain, x0, x2, None, &Evidence::new()).unwrap();
        assert!(!ans.independent);
    }

    #[test]
    fn product_branches_have_no_paths() {
        let mut b = SpgmBuilder::new();
        let x = b.model_var("X", 2);
        let y = b.model_var("Y", 2);
        let nx = b.vnode(x, None);
        let ny = b.vnode(y, None);
        let p = b.product(vec![nx, ny]);
        b.unary(nx, vec![0.5, 0.5]).unary(ny, vec![0.3, 0.7]);
        let spgm = b.build(p);
        assert!(directed_paths(&spgm, x, y).unwrap().is_empty());
        let ans = independence_query(&spgm, x, y, None, &Evidence::new()).unwrap();
        assert!(ans.independent);
    }

    #[test]
    fn common_cause_is_not_reported_independent() {
        // A with children B and C under a product: no directed B-C path,
        // yet B and C are dependent through A.
        let mut b = SpgmBuilder::new();
        let a = b.model_var("A", 2);
        let bv = b.model_var("B", 2);
        let c = b.model_var("C", 2);
        let nb = b.vnode(bv, None);
        let nc = b.vnode(c, None);
        let p = b.product(vec![nb, nc]);
        let na = b.vnode(a, Some(p));
        b.unary(na, vec![0.5, 0.5]);
        b.cpt(na, nb, &[vec![0.9, 0.1], vec![0.1, 0.9]]).unwrap();
        b.cpt(na, nc, &[vec![0.8, 0.2], vec![0.3, 0.7]]).unwrap();
        let spgm = b.build(na);
        let ans = independence_query(&spgm, bv, c, None, &Evidence::new()).unwrap();
        assert!(ans.path_criterion);
        assert!(!ans.independent);
        let ans = independence_query(&spgm, bv, c, Some(a), &Evidence::new()).unwrap();
        assert!(ans.independent);
    }

    #[test]
    fn e2_context_selects_chain() {
        let e2 = fixtures::e2();
        let ctx = Evidence::new().with(e2.z1, 0);
        let ans = independence_query(&e2.spgm, e2.a, e2.c, Some(e2.b), &ctx).unwrap();
        assert!(ans.independent, "{ans:?}");
        let other = Evidence::new().with(e2.z1, 1);
        let ans = independence_query(&e2.spgm, e2.a, e2.c, Some(e2.b), &other).unwrap();
        assert!(!ans.independent);
        let ans = independence_query(&e2.spgm, e2.a, e2.c, Some(e2.b), &Evidence::new()).unwrap();
        assert!(!ans.independent);
    }

    #[test]
    fn context_can_prune_every_branch() {
        // Z1 picks either A -> product{B, S} or product{A, B, S}, where S
        // is a shared sum over D labeled by Z2.
        let mut b = SpgmBuilder::new();
        let a = b.model_var("A", 2);
        let bv = b.model_var("B", 2);
        let d = b.model_var("D", 2);
        let z1 = b.context_var("Z1", 2);
        let z2 = b.context_var("Z2", 2);
        let d1 = b.vnode(d, None);
        let d2 = b.vnode(d, None);
        let shared = b.observed_sum(z2, vec![0.5, 0.5], vec![d1, d2]);
        let b1 = b.vnode(bv, None);
        let p1 = b.product(vec![b1, shared]);
        let a1 = b.vnode(a, Some(p1));
        let a2 = b.vnode(a, None);
        let b2 = b.vnode(bv, None);
        let p2 = b.product(vec![a2, b2, shared]);
        let root = b.observed_sum(z1, vec![0.5, 0.5], vec![a1, p2]);
        b.unary(a1, vec![0.5, 0.5]).unary(a2, vec![0.5, 0.5]).unary(b2, vec![0.5, 0.5]);
        b.unary(d1, vec![0.5, 0.5]).unary(d2, vec![0.2, 0.8]);
        b.cpt(a1, b1, &[vec![0.9, 0.1], vec![0.1, 0.9]]).unwrap();
        b.cpt(a1, d1, &[vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap();
        b.cpt(a1, d2, &[vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap();
        let spgm = b.build(root);
        assert!(crate::model::validate(&spgm).is_valid(), "{}", crate::model::validate(&spgm));
        assert_eq!(directed_paths(&spgm, a, bv).unwrap().len(), 1);
        let ctx = Evidence::new().with(z1, 0).with(z2, 1);
        let got = contextual_paths(&spgm, a, bv, &ctx).unwrap();
        assert_eq!(got.paths, vec![vec![a1, p1, b1]]);
        let ctx = Evidence::new().with(z1, 1).with(z2, 0);
        assert!(contextual_paths(&spgm, a, bv, &ctx).unwrap().is_empty());
        let ans = independence_query(&spgm, a, bv, None, &ctx).unwrap();
        assert!(ans.independent);
        assert_eq!(ans.surviving_paths, 0);
    }

    #[test]
    fn context_rejects_model_variables() {
        let e1 = fixtures::e1();
        let ctx = Evidence::new().with(e1.a, 0);
        assert!(contextual_paths(&e1.spgm, e1.a, e1.b, &ctx).is_err());
        assert!(independence_query(&e1.spgm, e1.a, e1.a, None, &Evidence::new()).is_err());
    }
}
