//! SPGM representation: variables, nodes, parameters and the structural
//! analyses everything else is built on (topological order, receivers,
//! scopes, validation).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use fixedbitset::FixedBitSet;

use crate::error::{Error, Result};

/// Absolute tolerance on the sum of every stochastic vector.
pub const STOCHASTIC_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VarId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

impl fmt::Display for VarId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "v{}", self.0)
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum VarKind {
    /// Model variable (X), carried by Vnodes.
    Model,
    /// Context variable (Z), carried by observed sum nodes.
    Context,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Variable {
    pub name: String,
    pub kind: VarKind,
    pub domain: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum NodeKind {
    Vnode { var: VarId },
    SumObserved { var: VarId, weights: Vec<f64> },
    SumUnobserved { weights: Vec<f64> },
    Product,
}

impl NodeKind {
    pub fn is_vnode(&self) -> bool {
        matches!(self, NodeKind::Vnode { .. })
    }

    pub fn is_sum(&self) -> bool {
        matches!(
            self,
            NodeKind::SumObserved { .. } | NodeKind::SumUnobserved { .. }
        )
    }

    /// Variable attached to the node: X for Vnodes, Z for observed sums.
    pub fn var(&self) -> Option<VarId> {
        match self {
            NodeKind::Vnode { var } | NodeKind::SumObserved { var, .. } => Some(*var),
            _ => None,
        }
    }

    pub fn weights(&self) -> Option<&[f64]> {
        match self {
            NodeKind::SumObserved { weights, .. } | NodeKind::SumUnobserved { weights } => {
                Some(weights)
            }
            _ => None,
        }
    }

    pub(crate) fn weights_mut(&mut self) -> Option<&mut Vec<f64>> {
        match self {
            NodeKind::SumObserved { weights, .. } | NodeKind::SumUnobserved { weights } => {
                Some(weights)
            }
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Node {
    pub kind: NodeKind,
    /// Ordered children; sum weight `k` belongs to `children[k]`.
    pub children: Vec<NodeId>,
}

/// Conditional table `P(child | parent)`, one row per parent state.
#[derive(Clone, Debug, PartialEq)]
pub struct Cpt {
    parent_states: usize,
    child_states: usize,
    values: Vec<f64>,
}

impl Cpt {
    pub fn new(parent_states: usize, child_states: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != parent_states * child_states {
            return Err(Error::invalid(format!(
                "conditional table of shape {parent_states}x{child_states} needs {} values, got {}",
                parent_states * child_states,
                values.len()
            )));
        }
        Ok(Cpt {
            parent_states,
            child_states,
            values,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let child_states = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != child_states) {
            return Err(Error::invalid("ragged conditional table rows"));
        }
        Cpt::new(rows.len(), child_states, rows.concat())
    }

    pub fn parent_states(&self) -> usize {
        self.parent_states
    }

    pub fn child_states(&self) -> usize {
        self.child_states
    }

    #[inline]
    pub fn get(&self, parent: usize, child: usize) -> f64 {
        self.values[parent * self.child_states + child]
    }

    pub fn row(&self, parent: usize) -> &[f64] {
        &self.values[parent * self.child_states..(parent + 1) * self.child_states]
    }

    pub(crate) fn row_mut(&mut self, parent: usize) -> &mut [f64] {
        &mut self.values[parent * self.child_states..(parent + 1) * self.child_states]
    }

    /// Row-major values.
    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Destination of a message: a Vnode parent or the fictitious top-level sink.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Receiver {
    Root,
    Vnode(NodeId),
}

/// A sum-product graphical model.
///
/// Construction accepts any candidate structure; [`validate`] reports every
/// violated condition and the evaluators refuse invalid models.
#[derive(Clone, Debug, PartialEq)]
pub struct Spgm {
    variables: Vec<Variable>,
    nodes: Vec<Node>,
    root: NodeId,
    pairwise: BTreeMap<(NodeId, NodeId), Cpt>,
    unary: BTreeMap<NodeId, Vec<f64>>,
}

impl Spgm {
    pub fn from_parts(
        variables: Vec<Variable>,
        nodes: Vec<Node>,
        root: NodeId,
        pairwise: BTreeMap<(NodeId, NodeId), Cpt>,
        unary: BTreeMap<NodeId, Vec<f64>>,
    ) -> Self {
        Spgm {
            variables,
            nodes,
            root,
            pairwise,
            unary,
        }
    }

    #[allow(clippy::type_complexity)]
    pub(crate) fn into_parts(
        self,
    ) -> (
        Vec<Variable>,
        Vec<Node>,
        NodeId,
        BTreeMap<(NodeId, NodeId), Cpt>,
        BTreeMap<NodeId, Vec<f64>>,
    ) {
        (self.variables, self.nodes, self.root, self.pairwise, self.unary)
    }

    pub fn variables(&self) -> &[Variable] {
        &self.variables
    }

    pub fn variable(&self, id: VarId) -> Result<&Variable> {
        self.variables
            .get(id.0)
            .ok_or_else(|| Error::UnknownVariable(id.to_string()))
    }

    pub fn var_by_name(&self, name: &str) -> Option<VarId> {
        self.variables
            .iter()
            .position(|v| v.name == name)
            .map(VarId)
    }

    /// Model (X) variables in declaration order; dataset column `i` maps to
    /// the `i`-th entry.
    pub fn model_variables(&self) -> Vec<VarId> {
        self.vars_of_kind(VarKind::Model)
    }

    pub fn context_variables(&self) -> Vec<VarId> {
        self.vars_of_kind(VarKind::Context)
    }

    fn vars_of_kind(&self, kind: VarKind) -> Vec<VarId> {
        self.variables
            .iter()
            .enumerate()
            .filter(|(_, v)| v.kind == kind)
            .map(|(i, _)| VarId(i))
            .collect()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> Result<&Node> {
        self.nodes.get(id.0).ok_or(Error::UnknownNode(id))
    }

    pub fn root(&self) -> NodeId {
        self.root
    }

    pub fn pairwise(&self) -> &BTreeMap<(NodeId, NodeId), Cpt> {
        &self.pairwise
    }

    pub fn unary(&self) -> &BTreeMap<NodeId, Vec<f64>> {
        &self.unary
    }

    pub fn cpt(&self, parent: NodeId, child: NodeId) -> Option<&Cpt> {
        self.pairwise.get(&(parent, child))
    }

    pub fn edge_count(&self) -> usize {
        self.nodes.iter().map(|n| n.children.len()).sum()
    }

    pub(crate) fn cpt_mut(&mut self, parent: NodeId, child: NodeId) -> Option<&mut Cpt> {
        self.pairwise.get_mut(&(parent, child))
    }

    pub(crate) fn unary_mut(&mut self, node: NodeId) -> Option<&mut Vec<f64>> {
        self.unary.get_mut(&node)
    }

    pub(crate) fn sum_weights_mut(&mut self, node: NodeId) -> Option<&mut Vec<f64>> {
        self.nodes.get_mut(node.0)?.kind.weights_mut()
    }

    /// Nodes ordered children-first. Fails on dangling child ids or cycles.
    pub fn topological_order(&self) -> Result<Vec<NodeId>> {
        let n = self.nodes.len();
        for node in &self.nodes {
            if let Some(c) = node.children.iter().find(|c| c.0 >= n) {
                return Err(Error::UnknownNode(*c));
            }
        }
        // 0 = unvisited, 1 = on stack, 2 = done
        let mut state = vec![0u8; n];
        let mut order = Vec::with_capacity(n);
        for start in 0..n {
            if state[start] != 0 {
                continue;
            }
            let mut stack: Vec<(usize, usize)> = vec![(start, 0)];
            state[start] = 1;
            while let Some(&mut (v, ref mut next)) = stack.last_mut() {
                let children = &self.nodes[v].children;
                if *next < children.len() {
                    let c = children[*next].0;
                    *next += 1;
                    match state[c] {
                        0 => {
                            state[c] = 1;
                            stack.push((c, 0));
                        }
                        1 => return Err(Error::Cycle(NodeId(c))),
                        _ => {}
                    }
                } else {
                    state[v] = 2;
                    order.push(NodeId(v));
                    stack.pop();
                }
            }
        }
        Ok(order)
    }

    /// Parent lists for every node.
    pub fn parents(&self) -> Vec<Vec<NodeId>> {
        let mut parents = vec![Vec::new(); self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            for c in &node.children {
                if let Some(p) = parents.get_mut(c.0) {
                    p.push(NodeId(i));
                }
            }
        }
        parents
    }

    /// Receivers of every node's messages. Nodes not reachable from the root
    /// get an empty set.
    pub fn receivers(&self) -> Result<Vec<BTreeSet<Receiver>>> {
        let order = self.topological_order()?;
        if self.root.0 >= self.nodes.len() {
            return Err(Error::UnknownNode(self.root));
        }
        let mut receivers = vec![BTreeSet::new(); self.nodes.len()];
        receivers[self.root.0].insert(Receiver::Root);
        for &id in order.iter().rev() {
            if receivers[id.0].is_empty() {
                continue;
            }
            let node = &self.nodes[id.0];
            let passed: BTreeSet<Receiver> = if node.kind.is_vnode() {
                std::iter::once(Receiver::Vnode(id)).collect()
            } else {
                receivers[id.0].clone()
            };
            for c in &node.children {
                receivers[c.0].extend(passed.iter().copied());
            }
        }
        Ok(receivers)
    }

    /// Largest number of messages any node sends (vparents plus the root sink).
    pub fn max_receivers(&self) -> Result<usize> {
        Ok(self.receivers()?.iter().map(BTreeSet::len).max().unwrap_or(0))
    }
}

/// Vparents of `node`: Vnodes with a directed path to `node` that has no
/// intermediate Vnode.
pub fn vparents(spgm: &Spgm, node: NodeId) -> Result<BTreeSet<NodeId>> {
    spgm.node(node)?;
    let receivers = spgm.receivers()?;
    Ok(receivers[node.0]
        .iter()
        .filter_map(|r| match r {
            Receiver::Vnode(v) => Some(*v),
            Receiver::Root => None,
        })
        .collect())
}

/// Per-node scope bitsets over all variables, computed bottom-up once.
#[derive(Clone, Debug)]
pub struct Scopes {
    bits: Vec<FixedBitSet>,
    kinds: Vec<VarKind>,
}

impl Scopes {
    pub fn compute(spgm: &Spgm) -> Result<Scopes> {
        let order = spgm.topological_order()?;
        let nvars = spgm.variables.len();
        let mut bits = vec![FixedBitSet::with_capacity(nvars); spgm.nodes.len()];
        for id in order {
            let node = &spgm.nodes[id.0];
            let mut set = FixedBitSet::with_capacity(nvars);
            if let Some(v) = node.kind.var() {
                if v.0 < nvars {
                    set.insert(v.0);
                }
            }
            for c in &node.children {
                set.union_with(&bits[c.0]);
            }
            bits[id.0] = set;
        }
        Ok(Scopes {
            bits,
            kinds: spgm.variables.iter().map(|v| v.kind).collect(),
        })
    }

    pub fn bits(&self, node: NodeId) -> &FixedBitSet {
        &self.bits[node.0]
    }

    pub fn contains(&self, node: NodeId, var: VarId) -> bool {
        self.bits[node.0].contains(var.0)
    }

    fn of_kind(&self, node: NodeId, kind: VarKind) -> BTreeSet<VarId> {
        self.bits[node.0]
            .ones()
            .filter(|&v| self.kinds[v] == kind)
            .map(VarId)
            .collect()
    }

    pub fn x_scope(&self, node: NodeId) -> BTreeSet<VarId> {
        self.of_kind(node, VarKind::Model)
    }

    pub fn z_scope(&self, node: NodeId) -> BTreeSet<VarId> {
        self.of_kind(node, VarKind::Context)
    }
}

/// `(X-scope, Z-scope)` of a node.
pub fn scope(spgm: &Spgm, node: NodeId) -> Result<(BTreeSet<VarId>, BTreeSet<VarId>)> {
    spgm.node(node)?;
    let scopes = Scopes::compute(spgm)?;
    Ok((scopes.x_scope(node), scopes.z_scope(node)))
}

/// A violated structural or parametric condition.
#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    RootOutOfRange { root: NodeId },
    DanglingChild { node: NodeId, child: NodeId },
    UnknownVariable { node: NodeId, var: VarId },
    WrongVariableKind { node: NodeId, var: VarId },
    DomainTooSmall { var: VarId, domain: usize },
    Cycle { node: NodeId },
    RootHasParent { root: NodeId },
    Unreachable { node: NodeId },
    VnodeTooManyChildren { node: NodeId, count: usize },
    NoChildren { node: NodeId },
    WeightArity { node: NodeId, expected: usize, found: usize },
    WeightsNotStochastic { node: NodeId, sum: f64 },
    ContextDomainMismatch { node: NodeId, var: VarId, domain: usize, children: usize },
    ContextReused { var: VarId, nodes: Vec<NodeId> },
    VnodeVariableInChildScope { node: NodeId, child: NodeId },
    SumScopeMismatch { node: NodeId, first: NodeId, other: NodeId },
    ContextInChildScope { node: NodeId, child: NodeId },
    ProductScopeOverlap { node: NodeId, first: NodeId, other: NodeId },
    MissingCpt { parent: NodeId, child: NodeId },
    UnexpectedCpt { parent: NodeId, child: NodeId },
    CptShape { parent: NodeId, child: NodeId, expected: (usize, usize), found: (usize, usize) },
    CptRowNotStochastic { parent: NodeId, child: NodeId, row: usize, sum: f64 },
    MissingUnary { node: NodeId },
    UnexpectedUnary { node: NodeId },
    UnaryShape { node: NodeId, expected: usize, found: usize },
    UnaryNotStochastic { node: NodeId, sum: f64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use Violation::*;
        match self {
            RootOutOfRange { root } => write!(f, "root {root} does not exist"),
            DanglingChild { node, child } => write!(f, "{node} references missing child {child}"),
            UnknownVariable { node, var } => write!(f, "{node} references unknown variable {var}"),
            WrongVariableKind { node, var } => {
                write!(f, "{node} carries {var} of the wrong kind (Vnodes need X, observed sums need Z)")
            }
            DomainTooSmall { var, domain } => write!(f, "{var} has domain size {domain}"),
            Cycle { node } => write!(f, "directed cycle through {node}"),
            RootHasParent { root } => write!(f, "root {root} has an incoming edge"),
            Unreachable { node } => write!(f, "{node} is not reachable from the root"),
            VnodeTooManyChildren { node, count } => {
                write!(f, "Vnode has >1 child: {node} has {count}")
            }
            NoChildren { node } => write!(f, "sum/product node {node} has no children"),
            WeightArity { node, expected, found } => {
                write!(f, "{node} has {found} weights for {expected} children")
            }
            WeightsNotStochastic { node, sum } => {
                write!(f, "weights of {node} are not a distribution (sum {sum})")
            }
            ContextDomainMismatch { node, var, domain, children } => write!(
                f,
                "context {var} on {node} has domain {domain} but the node has {children} children"
            ),
            ContextReused { var, nodes } => {
                write!(f, "context {var} labels several sum nodes: {nodes:?}")
            }
            VnodeVariableInChildScope { node, child } => {
                write!(f, "variable of Vnode {node} appears in the scope of its child {child}")
            }
            SumScopeMismatch { node, first, other } => {
                write!(f, "children {first} and {other} of sum {node} have different scopes")
            }
            ContextInChildScope { node, child } => {
                write!(f, "context of {node} appears in the scope of child {child}")
            }
            ProductScopeOverlap { node, first, other } => {
                write!(f, "children {first} and {other} of product {node} have overlapping scopes")
            }
            MissingCpt { parent, child } => write!(f, "missing conditional table ({parent}, {child})"),
            UnexpectedCpt { parent, child } => {
                write!(f, "conditional table ({parent}, {child}) has no matching vparent relation")
            }
            CptShape { parent, child, expected, found } => write!(
                f,
                "conditional table ({parent}, {child}) has shape {}x{}, expected {}x{}",
                found.0, found.1, expected.0, expected.1
            ),
            CptRowNotStochastic { parent, child, row, sum } => write!(
                f,
                "row {row} of conditional table ({parent}, {child}) sums to {sum}"
            ),
            MissingUnary { node } => write!(f, "top-level Vnode {node} has no unary distribution"),
            UnexpectedUnary { node } => write!(f, "{node} has a unary distribution but is not top-level"),
            UnaryShape { node, expected, found } => {
                write!(f, "unary distribution of {node} has {found} entries, expected {expected}")
            }
            UnaryNotStochastic { node, sum } => {
                write!(f, "unary distribution of {node} sums to {sum}")
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return write!(f, "valid");
        }
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                write!(f, "; ")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

fn stochastic_sum(values: &[f64]) -> Option<f64> {
    let sum: f64 = values.iter().sum();
    let ok = values.iter().all(|v| v.is_finite() && *v >= 0.0)
        && (sum - 1.0).abs() <= STOCHASTIC_TOL;
    (!ok).then_some(sum)
}

/// Checks every SPGM condition; an empty report means the model is valid.
pub fn validate(spgm: &Spgm) -> ValidationReport {
    let mut out = Vec::new();
    let n = spgm.nodes.len();

    if spgm.root.0 >= n {
        out.push(Violation::RootOutOfRange { root: spgm.root });
    }
    for (i, node) in spgm.nodes.iter().enumerate() {
        let id = NodeId(i);
        for &c in &node.children {
            if c.0 >= n {
                out.push(Violation::DanglingChild { node: id, child: c });
            }
        }
        if let Some(var) = node.kind.var() {
            match spgm.variables.get(var.0) {
                None => out.push(Violation::UnknownVariable { node: id, var }),
                Some(v) => {
                    let expected = if node.kind.is_vnode() {
                        VarKind::Model
                    } else {
                        VarKind::Context
                    };
                    if v.kind != expected {
                        out.push(Violation::WrongVariableKind { node: id, var });
                    }
                }
            }
        }
    }
    for (i, v) in spgm.variables.iter().enumerate() {
        let min = if v.kind == VarKind::Model { 2 } else { 1 };
        if v.domain < min {
            out.push(Violation::DomainTooSmall {
                var: VarId(i),
                domain: v.domain,
            });
        }
    }
    if !out.is_empty() {
        return ValidationReport { violations: out };
    }

    // Local node conditions.
    let mut context_owner: BTreeMap<VarId, Vec<NodeId>> = BTreeMap::new();
    for (i, node) in spgm.nodes.iter().enumerate() {
        let id = NodeId(i);
        match &node.kind {
            NodeKind::Vnode { .. } => {
                if node.children.len() > 1 {
                    out.push(Violation::VnodeTooManyChildren {
                        node: id,
                        count: node.children.len(),
                    });
                }
            }
            kind => {
                if node.children.is_empty() {
                    out.push(Violation::NoChildren { node: id });
                }
                if let Some(w) = kind.weights() {
                    if w.len() != node.children.len() {
                        out.push(Violation::WeightArity {
                            node: id,
                            expected: node.children.len(),
                            found: w.len(),
                        });
                    } else if let Some(sum) = stochastic_sum(w) {
                        out.push(Violation::WeightsNotStochastic { node: id, sum });
                    }
                }
                if let NodeKind::SumObserved { var, .. } = kind {
                    context_owner.entry(*var).or_default().push(id);
                    let domain = spgm.variables[var.0].domain;
                    if domain != node.children.len() {
                        out.push(Violation::ContextDomainMismatch {
                            node: id,
                            var: *var,
                            domain,
                            children: node.children.len(),
                        });
                    }
                }
            }
        }
    }
    for (var, nodes) in context_owner {
        if nodes.len() > 1 {
            out.push(Violation::ContextReused { var, nodes });
        }
    }

    let order = match spgm.topological_order() {
        Ok(o) => o,
        Err(Error::Cycle(node)) => {
            out.push(Violation::Cycle { node });
            return ValidationReport { violations: out };
        }
        Err(_) => return ValidationReport { violations: out },
    };
    if spgm.root.0 >= n {
        return ValidationReport { violations: out };
    }

    let parents = spgm.parents();
    if !parents[spgm.root.0].is_empty() {
        out.push(Violation::RootHasParent { root: spgm.root });
    }
    let receivers = spgm.receivers().expect("acyclic graph with a valid root");
    for (i, r) in receivers.iter().enumerate() {
        if r.is_empty() {
            out.push(Violation::Unreachable { node: NodeId(i) });
        }
    }

    let scopes = Scopes::compute(spgm).expect("acyclic graph");
    for &id in &order {
        let node = &spgm.nodes[id.0];
        match &node.kind {
            NodeKind::Vnode { var } => {
                if let Some(&c) = node.children.first() {
                    if scopes.contains(c, *var) {
                        out.push(Violation::VnodeVariableInChildScope { node: id, child: c });
                    }
                }
            }
            NodeKind::SumObserved { .. } | NodeKind::SumUnobserved { .. } => {
                if let Some((&first, rest)) = node.children.split_first() {
                    for &other in rest {
                        if scopes.bits(first) != scopes.bits(other) {
                            out.push(Violation::SumScopeMismatch {
                                node: id,
                                first,
                                other,
                            });
                        }
                    }
                }
                if let NodeKind::SumObserved { var, .. } = &node.kind {
                    for &c in &node.children {
                        if scopes.contains(c, *var) {
                            out.push(Violation::ContextInChildScope { node: id, child: c });
                        }
                    }
                }
            }
            NodeKind::Product => {
                for (a, &first) in node.children.iter().enumerate() {
                    for &other in &node.children[a + 1..] {
                        if !scopes.bits(first).is_disjoint(scopes.bits(other)) {
                            out.push(Violation::ProductScopeOverlap {
                                node: id,
                                first,
                                other,
                            });
                        }
                    }
                }
            }
        }
    }

    // Parameters.
    let mut expected_pairs = BTreeSet::new();
    let mut expected_unary = BTreeSet::new();
    for (i, node) in spgm.nodes.iter().enumerate() {
        let NodeKind::Vnode { var } = node.kind else {
            continue;
        };
        let id = NodeId(i);
        let child_states = spgm.variables[var.0].domain;
        for r in &receivers[i] {
            match *r {
                Receiver::Root => {
                    expected_unary.insert(id);
                    match spgm.unary.get(&id) {
                        None => out.push(Violation::MissingUnary { node: id }),
                        Some(p) if p.len() != child_states => out.push(Violation::UnaryShape {
                            node: id,
                            expected: child_states,
                            found: p.len(),
                        }),
                        Some(p) => {
                            if let Some(sum) = stochastic_sum(p) {
                                out.push(Violation::UnaryNotStochastic { node: id, sum });
                            }
                        }
                    }
                }
                Receiver::Vnode(parent) => {
                    expected_pairs.insert((parent, id));
                    let parent_states = match spgm.nodes[parent.0].kind {
                        NodeKind::Vnode { var } => spgm.variables[var.0].domain,
                        _ => unreachable!("receivers are Vnodes"),
                    };
                    match spgm.pairwise.get(&(parent, id)) {
                        None => out.push(Violation::MissingCpt { parent, child: id }),
                        Some(cpt) => {
                            let found = (cpt.parent_states, cpt.child_states);
                            if found != (parent_states, child_states) {
                                out.push(Violation::CptShape {
                                    parent,
                                    child: id,
                                    expected: (parent_states, child_states),
                                    found,
                                });
                                continue;
                            }
                            for row in 0..parent_states {
                                if let Some(sum) = stochastic_sum(cpt.row(row)) {
                                    out.push(Violation::CptRowNotStochastic {
                                        parent,
                                        child: id,
                                        row,
                                        sum,
                                    });
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    for &(parent, child) in spgm.pairwise.keys() {
        if !expected_pairs.contains(&(parent, child)) {
            out.push(Violation::UnexpectedCpt { parent, child });
        }
    }
    for &node in spgm.unary.keys() {
        if !expected_unary.contains(&node) {
            out.push(Violation::UnexpectedUnary { node });
        }
    }

    ValidationReport { violations: out }
}

impl Spgm {
    /// Returns `Err(InvalidModel)` unless the model passes [`validate`].
    pub fn ensure_valid(&self) -> Result<()> {
        let report = validate(self);
        if report.is_valid() {
            Ok(())
        } else {
            Err(Error::InvalidModel(report))
        }
    }
}

/// Incremental constructor; children must be created before their parents.
#[derive(Clone, Debug, Default)]
pub struct SpgmBuilder {
    variables: Vec<Variable>,
    nodes: Vec<Node>,
    pairwise: BTreeMap<(NodeId, NodeId), Cpt>,
    unary: BTreeMap<NodeId, Vec<f64>>,
}

impl SpgmBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn variable(&mut self, name: impl Into<String>, kind: VarKind, domain: usize) -> VarId {
        self.variables.push(Variable {
            name: name.into(),
            kind,
            domain,
        });
        VarId(self.variables.len() - 1)
    }

    pub fn model_var(&mut self, name: impl Into<String>, domain: usize) -> VarId {
        self.variable(name, VarKind::Model, domain)
    }

    pub fn context_var(&mut self, name: impl Into<String>, domain: usize) -> VarId {
        self.variable(name, VarKind::Context, domain)
    }

    pub fn node(&mut self, kind: NodeKind, children: Vec<NodeId>) -> NodeId {
        self.nodes.push(Node { kind, children });
        NodeId(self.nodes.len() - 1)
    }

    pub fn vnode(&mut self, var: VarId, child: Option<NodeId>) -> NodeId {
        self.node(NodeKind::Vnode { var }, child.into_iter().collect())
    }

    pub fn observed_sum(&mut self, var: VarId, weights: Vec<f64>, children: Vec<NodeId>) -> NodeId {
        self.node(NodeKind::SumObserved { var, weights }, children)
    }

    pub fn unobserved_sum(&mut self, weights: Vec<f64>, children: Vec<NodeId>) -> NodeId {
        self.node(NodeKind::SumUnobserved { weights }, children)
    }

    pub fn product(&mut self, children: Vec<NodeId>) -> NodeId {
        self.node(NodeKind::Product, children)
    }

    /// Conditional table given as one row per parent state.
    pub fn cpt(&mut self, parent: NodeId, child: NodeId, rows: &[Vec<f64>]) -> Result<&mut Self> {
        self.pairwise.insert((parent, child), Cpt::from_rows(rows)?);
        Ok(self)
    }

    pub fn cpt_table(&mut self, parent: NodeId, child: NodeId, cpt: Cpt) -> &mut Self {
        self.pairwise.insert((parent, child), cpt);
        self
    }

    pub fn unary(&mut self, node: NodeId, probs: Vec<f64>) -> &mut Self {
        self.unary.insert(node, probs);
        self
    }

    pub fn variables(&self) -> &[Variable] {
        &self.variables
    }

    pub fn node_kind(&self, id: NodeId) -> &NodeKind {
        &self.nodes[id.0].kind
    }

    pub fn build(self, root: NodeId) -> Spgm {
        Spgm::from_parts(self.variables, self.nodes, root, self.pairwise, self.unary)
    }

    /// Builds and validates.
    pub fn build_valid(self, root: NodeId) -> Result<Spgm> {
        let spgm = self.build(root);
        spgm.ensure_valid()?;
        Ok(spgm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    #[test]
    fn single_vnode_is_valid() {
        let mut b = SpgmBuilder::new();
        let a = b.model_var("A", 2);
        let n = b.vnode(a, None);
        b.unary(n, vec![0.5, 0.5]);
        assert!(validate(&b.build(n)).is_valid());
    }

    #[test]
    fn vnode_with_two_children_is_flagged() {
        let mut b = SpgmBuilder::new();
        let a = b.model_var("A", 2);
        let bv = b.model_var("B", 2);
        let c = b.model_var("C", 2);
        let nb = b.vnode(bv, None);
        let nc = b.vnode(c, None);
        let na = b.node(NodeKind::Vnode { var: a }, vec![nb, nc]);
        b.unary(na, vec![0.5, 0.5]);
        let report = validate(&b.build(na));
        assert!(report
            .violations
            .iter()
            .any(|v| matches!(v, Violation::VnodeTooManyChildren { count: 2, .. })));
        assert!(report.to_string().contains("Vnode has >1 child"));
    }

    #[test]
    fn product_with_overlapping_children_is_flagged() {
        let mut b = SpgmBuilder::new();
        let bv = b.model_var("B", 2);
        let b1 = b.vnode(bv, None);
        let b2 = b.vnode(bv, None);
        let p = b.product(vec![b1, b2]);
        b.unary(b1, vec![0.5, 0.5]).unary(b2, vec![0.5, 0.5]);
        let spgm = b.build(p);
        let scopes = Scopes::compute(&spgm).unwrap();
        assert_eq!(scopes.x_scope(b1), scopes.x_scope(b2));
        let report = validate(&spgm);
        assert_eq!(
            report.violations,
            vec![Violation::ProductScopeOverlap {
                node: p,
                first: b1,
                other: b2
            }]
        );
    }

    #[test]
    fn leaf_scope_is_its_own_variable() {
        let e1 = fixtures::e1();
        let (x, z) = scope(&e1.spgm, e1.b_first).unwrap();
        assert_eq!(x, BTreeSet::from([e1.b]));
        assert!(z.is_empty());
    }

    #[test]
    fn e1_root_scope() {
        let e1 = fixtures::e1();
        let (x, z) = scope(&e1.spgm, e1.spgm.root()).unwrap();
        assert_eq!(x, BTreeSet::from([e1.a, e1.b]));
        assert_eq!(z, BTreeSet::from([e1.z1]));
    }

    #[test]
    fn scope_of_context_sum_in_two_level_example() {
        // Sum node over Z2 whose children cover {D, E, F}.
        let mut b = SpgmBuilder::new();
        let d = b.model_var("D", 2);
        let e = b.model_var("E", 2);
        let f = b.model_var("F", 2);
        let z2 = b.context_var("Z2", 2);
        let nf = b.vnode(f, None);
        let ne = b.vnode(e, Some(nf));
        let nd = b.vnode(d, Some(ne));
        let nf2 = b.vnode(f, None);
        let ne2 = b.vnode(e, None);
        let p = b.product(vec![ne2, nf2]);
        let nd2 = b.vnode(d, Some(p));
        let s = b.observed_sum(z2, vec![0.5, 0.5], vec![nd, nd2]);
        let spgm = b.build(s);
        let (x, zs) = scope(&spgm, s).unwrap();
        assert_eq!(x, BTreeSet::from([d, e, f]));
        assert_eq!(zs, BTreeSet::from([z2]));
    }

    #[test]
    fn unknown_node_is_an_error() {
        let e1 = fixtures::e1();
        assert!(matches!(
            scope(&e1.spgm, NodeId(99)),
            Err(Error::UnknownNode(NodeId(99)))
        ));
        assert!(vparents(&e1.spgm, NodeId(99)).is_err());
    }

    #[test]
    fn vparents_of_root_and_chain() {
        let mut b = SpgmBuilder::new();
        let a = b.model_var("A", 2);
        let bv = b.model_var("B", 2);
        let nb = b.vnode(bv, None);
        let p = b.product(vec![nb]);
        let na = b.vnode(a, Some(p));
        let spgm = b.build(na);
        assert!(vparents(&spgm, na).unwrap().is_empty());
        assert_eq!(vparents(&spgm, nb).unwrap(), BTreeSet::from([na]));
    }

    #[test]
    fn vparents_through_shared_child() {
        // A -> sum -> {B1, B2}, both B copies share child C.
        let mut b = SpgmBuilder::new();
        let a = b.model_var("A", 2);
        let bv = b.model_var("B", 2);
        let c = b.model_var("C", 2);
        let nc = b.vnode(c, None);
        let b1 = b.vnode(bv, Some(nc));
        let b2 = b.vnode(bv, Some(nc));
        let s = b.unobserved_sum(vec![0.5, 0.5], vec![b1, b2]);
        let na = b.vnode(a, Some(s));
        let spgm = b.build(na);
        assert_eq!(vparents(&spgm, nc).unwrap(), BTreeSet::from([b1, b2]));
        assert_eq!(vparents(&spgm, s).unwrap(), BTreeSet::from([na]));
    }

    #[test]
    fn validation_flags_parameter_problems() {
        let mut e1 = fixtures::e1();
        let key = (e1.spgm.root(), e1.b_first);
        e1.spgm.cpt_mut(key.0, key.1).unwrap().row_mut(0)[0] = 0.95;
        let report = validate(&e1.spgm);
        assert!(matches!(
            report.violations.as_slice(),
            [Violation::CptRowNotStochastic { row: 0, .. }]
        ));
    }

    #[test]
    fn validation_flags_missing_tables_and_cycles() {
        let mut b = SpgmBuilder::new();
        let a = b.model_var("A", 2);
        let na = b.vnode(a, None);
        let report = validate(&b.clone().build(na));
        assert_eq!(report.violations, vec![Violation::MissingUnary { node: na }]);

        let mut b = SpgmBuilder::new();
        let p = b.node(NodeKind::Product, vec![NodeId(1)]);
        b.node(NodeKind::Product, vec![p]);
        let report = validate(&b.build(p));
        assert!(matches!(report.violations[..], [Violation::Cycle { .. }]));
    }

    #[test]
    fn context_domain_must_match_children() {
        let mut b = SpgmBuilder::new();
        let x = b.model_var("X", 2);
        let z = b.context_var("Z", 3);
        let n1 = b.vnode(x, None);
        let n2 = b.vnode(x, None);
        let s = b.observed_sum(z, vec![0.5, 0.5], vec![n1, n2]);
        b.unary(n1, vec![0.5, 0.5]).unary(n2, vec![0.5, 0.5]);
        let report = validate(&b.build(s));
        assert!(matches!(
            report.violations[..],
            [Violation::ContextDomainMismatch { domain: 3, children: 2, .. }]
        ));
    }

    #[test]
    fn random_models_satisfy_scope_properties() {
        for seed in 0..30 {
            let spgm = fixtures::random_spgm(seed, &fixtures::RandomSpgmConfig::default());
            assert!(validate(&spgm).is_valid(), "seed {seed}: {}", validate(&spgm));
            let scopes = Scopes::compute(&spgm).unwrap();
            for (i, node) in spgm.nodes().iter().enumerate() {
                for c in &node.children {
                    // monotone: parent scope contains child scope
                    assert!(scopes.bits(*c).is_subset(scopes.bits(NodeId(i))));
                }
            }
            // Only-Vnode trees: vparents are exactly tree parents.
            let receivers = spgm.receivers().unwrap();
            assert_eq!(receivers[spgm.root().0].iter().next(), Some(&Receiver::Root));
        }
    }
}
