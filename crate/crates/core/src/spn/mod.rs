//! Explicit sum-product networks compiled from SPGMs.
//!
//! Every sum node points at a parameter vector. Sum nodes that point at the
//! same vector share their weights, which is how CPT rows and SPGM sum
//! weights stay tied when the circuit is trained.

mod compile;
mod em;
pub mod format;

use fixedbitset::FixedBitSet;

use crate::error::{Error, Result};
use crate::evidence::{Evidence, FREE};
use crate::inference::{Density, Domain};
use crate::model::{NodeId, VarId, VarKind, Variable};
use crate::numeric::{log_add, safe_ln};
use crate::dataset::Dataset;

pub use compile::{apply_params, compile, compile_mixture};
pub use em::{em_step_weighted, spn_em_step, spn_log_likelihood};
pub use format::{emit_circuit, parse_circuit, CIRCUIT_HEADER};

#[derive(Clone, Debug, PartialEq)]
pub enum SpnNode {
    Sum { children: Vec<usize>, param: usize },
    Product { children: Vec<usize> },
    Indicator { var: VarId, state: usize },
    Constant(f64),
}

impl SpnNode {
    pub fn children(&self) -> &[usize] {
        match self {
            SpnNode::Sum { children, .. } | SpnNode::Product { children } => children,
            _ => &[],
        }
    }
}

/// Where a parameter vector came from in the source model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamSource {
    SumWeights(NodeId),
    Cpt { parent: NodeId, child: NodeId, row: usize },
    Unary(NodeId),
    Mixture,
    Free,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    /// Mixture component the vector belongs to (0 for single models).
    pub component: usize,
    pub source: ParamSource,
    pub values: Vec<f64>,
}

/// A sum-product network. Children always have smaller ids than their
/// parents, so node order is a topological order.
#[derive(Clone, Debug, PartialEq)]
pub struct Spn {
    variables: Vec<Variable>,
    nodes: Vec<SpnNode>,
    root: usize,
    params: Vec<ParamVector>,
}

impl Spn {
    pub fn new(
        variables: Vec<Variable>,
        nodes: Vec<SpnNode>,
        root: usize,
        params: Vec<ParamVector>,
    ) -> Result<Self> {
        if root >= nodes.len() {
            return Err(Error::invalid(format!("root {root} out of range")));
        }
        for (i, node) in nodes.iter().enumerate() {
            if node.children().iter().any(|&c| c >= i) {
                return Err(Error::invalid(format!(
                    "node {i} has a child that does not precede it"
                )));
            }
            match node {
                SpnNode::Sum { children, param } => {
                    let p = params
                        .get(*param)
                        .ok_or_else(|| Error::invalid(format!("node {i} uses missing parameter {param}")))?;
                    if p.values.len() != children.len() {
                        return Err(Error::invalid(format!(
                            "node {i} has {} children but parameter {param} has {} values",
                            children.len(),
                            p.values.len()
                        )));
                    }
                }
                SpnNode::Product { children } if children.is_empty() => {
                    return Err(Error::invalid(format!("product {i} has no children")));
                }
                SpnNode::Indicator { var, state } => {
                    let v = variables
                        .get(var.0)
                        .ok_or_else(|| Error::UnknownVariable(var.to_string()))?;
                    if *state >= v.domain {
                        return Err(Error::StateOutOfDomain {
                            var: *var,
                            state: *state,
                            domain: v.domain,
                        });
                    }
                }
                _ => {}
            }
        }
        for (i, p) in params.iter().enumerate() {
            if p.values.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
                return Err(Error::invalid(format!("parameter {i} has a negative or non-finite weight")));
            }
        }
        Ok(Spn {
            variables,
            nodes,
            root,
            params,
        })
    }

    pub fn variables(&self) -> &[Variable] {
        &self.variables
    }

    pub fn nodes(&self) -> &[SpnNode] {
        &self.nodes
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn params(&self) -> &[ParamVector] {
        &self.params
    }

    /// Replaces a parameter vector's values; every sum using it changes.
    pub fn set_param(&mut self, index: usize, values: Vec<f64>) -> Result<()> {
        let p = self
            .params
            .get_mut(index)
            .ok_or_else(|| Error::invalid(format!("no parameter {index}")))?;
        if values.len() != p.values.len() {
            return Err(Error::invalid("parameter length mismatch"));
        }
        p.values = values;
        Ok(())
    }

    pub fn edge_count(&self) -> usize {
        self.nodes.iter().map(|n| n.children().len()).sum()
    }

    /// Sum-edge groups carrying one shared weight: `(sum node, child slot)`
    /// pairs, one group per (parameter vector, slot).
    pub fn share_groups(&self) -> Vec<Vec<(usize, usize)>> {
        let mut groups: Vec<Vec<Vec<(usize, usize)>>> = self
            .params
            .iter()
            .map(|p| vec![Vec::new(); p.values.len()])
            .collect();
        for (i, node) in self.nodes.iter().enumerate() {
            if let SpnNode::Sum { children, param } = node {
                for k in 0..children.len() {
                    groups[*param][k].push((i, k));
                }
            }
        }
        groups.into_iter().flatten().filter(|g| !g.is_empty()).collect()
    }

    /// Sum nodes using each parameter vector.
    pub fn sums_of_param(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.params.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            if let SpnNode::Sum { param, .. } = node {
                out[*param].push(i);
            }
        }
        out
    }

    pub fn count_indicators_of(&self, kind: VarKind) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n, SpnNode::Indicator { var, .. } if self.variables[var.0].kind == kind))
            .count()
    }

    /// Variable-scope bitsets of every node.
    pub fn scopes(&self) -> Vec<FixedBitSet> {
        let n = self.variables.len();
        let mut out: Vec<FixedBitSet> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let mut s = FixedBitSet::with_capacity(n);
            match node {
                SpnNode::Indicator { var, .. } => s.insert(var.0),
                other => {
                    for &c in other.children() {
                        s.union_with(&out[c]);
                    }
                }
            }
            out.push(s);
        }
        out
    }

    /// Checks completeness and decomposability; returns a description of the
    /// first violation.
    pub fn check_structure(&self) -> std::result::Result<(), String> {
        let scopes = self.scopes();
        for (i, node) in self.nodes.iter().enumerate() {
            match node {
                SpnNode::Sum { children, .. } => {
                    if let Some((&first, rest)) = children.split_first() {
                        if let Some(&c) = rest.iter().find(|&&c| scopes[c] != scopes[first]) {
                            return Err(format!("sum {i}: children {first} and {c} differ in scope"));
                        }
                    }
                }
                SpnNode::Product { children } => {
                    let mut seen = FixedBitSet::with_capacity(self.variables.len());
                    for &c in children {
                        if !seen.is_disjoint(&scopes[c]) {
                            return Err(format!("product {i}: child {c} overlaps its siblings"));
                        }
                        seen.union_with(&scopes[c]);
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub(crate) fn log_params(&self) -> Vec<Vec<f64>> {
        self.params
            .iter()
            .map(|p| p.values.iter().map(|&w| safe_ln(w)).collect())
            .collect()
    }

    pub(crate) fn model_var_ids(&self) -> Vec<usize> {
        self.variables
            .iter()
            .enumerate()
            .filter(|(_, v)| v.kind == VarKind::Model)
            .map(|(i, _)| i)
            .collect()
    }

    fn forward_linear(&self, ev: &[u32], vals: &mut [f64]) {
        for (i, node) in self.nodes.iter().enumerate() {
            vals[i] = match node {
                SpnNode::Sum { children, param } => {
                    let w = &self.params[*param].values;
                    children.iter().zip(w).map(|(&c, &w)| w * vals[c]).sum()
                }
                SpnNode::Product { children } => children.iter().map(|&c| vals[c]).product(),
                SpnNode::Indicator { var, state } => {
                    let s = ev[var.0];
                    if s == FREE || s as usize == *state {
                        1.0
                    } else {
                        0.0
                    }
                }
                SpnNode::Constant(v) => *v,
            };
        }
    }

    pub(crate) fn forward_log(&self, ev: &[u32], logw: &[Vec<f64>], vals: &mut [f64]) {
        for (i, node) in self.nodes.iter().enumerate() {
            vals[i] = match node {
                SpnNode::Sum { children, param } => {
                    let w = &logw[*param];
                    let mut max = f64::NEG_INFINITY;
                    for (k, &c) in children.iter().enumerate() {
                        max = max.max(w[k] + vals[c]);
                    }
                    if max.is_finite() {
                        let mut acc = 0.0;
                        for (k, &c) in children.iter().enumerate() {
                            acc += (w[k] + vals[c] - max).exp();
                        }
                        max + acc.ln()
                    } else {
                        max
                    }
                }
                SpnNode::Product { children } => children.iter().map(|&c| vals[c]).sum(),
                SpnNode::Indicator { var, state } => {
                    let s = ev[var.0];
                    if s == FREE || s as usize == *state {
                        0.0
                    } else {
                        f64::NEG_INFINITY
                    }
                }
                SpnNode::Constant(v) => safe_ln(*v),
            };
        }
    }

    /// Log-domain derivatives of the root with respect to every node value.
    pub(crate) fn backward_log(&self, logw: &[Vec<f64>], vals: &[f64], der: &mut [f64]) {
        der.fill(f64::NEG_INFINITY);
        der[self.root] = 0.0;
        for i in (0..=self.root).rev() {
            let d = der[i];
            if d == f64::NEG_INFINITY {
                continue;
            }
            match &self.nodes[i] {
                SpnNode::Sum { children, param } => {
                    let w = &logw[*param];
                    for (k, &c) in children.iter().enumerate() {
                        der[c] = log_add(der[c], d + w[k]);
                    }
                }
                SpnNode::Product { children } => {
                    let mut finite = 0.0;
                    let mut zeros = 0;
                    for &c in children {
                        if vals[c] == f64::NEG_INFINITY {
                            zeros += 1;
                        } else {
                            finite += vals[c];
                        }
                    }
                    for &c in children {
                        let siblings = match (zeros, vals[c] == f64::NEG_INFINITY) {
                            (0, _) => finite - vals[c],
                            (1, true) => finite,
                            _ => f64::NEG_INFINITY,
                        };
                        der[c] = log_add(der[c], d + siblings);
                    }
                }
                _ => {}
            }
        }
    }

    fn backward_linear(&self, vals: &[f64], der: &mut [f64]) {
        der.fill(0.0);
        der[self.root] = 1.0;
        let mut prefix = Vec::new();
        for i in (0..=self.root).rev() {
            let d = der[i];
            if d == 0.0 {
                continue;
            }
            match &self.nodes[i] {
                SpnNode::Sum { children, param } => {
                    let w = &self.params[*param].values;
                    for (k, &c) in children.iter().enumerate() {
                        der[c] += d * w[k];
                    }
                }
                SpnNode::Product { children } => {
                    // siblings product via prefix and suffix products
                    prefix.clear();
                    let mut acc = 1.0;
                    for &c in children {
                        prefix.push(acc);
                        acc *= vals[c];
                    }
                    let mut suffix = 1.0;
                    for (k, &c) in children.iter().enumerate().rev() {
                        der[c] += d * prefix[k] * suffix;
                        suffix *= vals[c];
                    }
                }
                _ => {}
            }
        }
    }

    /// Root value when node `node`'s value is shifted by `delta` before its
    /// parents are computed.
    pub fn evaluate_perturbed(&self, evidence: &Evidence, node: usize, delta: f64) -> Result<f64> {
        let ev = evidence.dense(&self.variables)?;
        let mut vals = vec![0.0; self.nodes.len()];
        // Recompute in order, applying the shift as soon as the node is done.
        for i in 0..self.nodes.len() {
            self.forward_linear_one(i, &ev, &mut vals);
            if i == node {
                vals[i] += delta;
            }
        }
        Ok(vals[self.root])
    }

    fn forward_linear_one(&self, i: usize, ev: &[u32], vals: &mut [f64]) {
        vals[i] = match &self.nodes[i] {
            SpnNode::Sum { children, param } => {
                let w = &self.params[*param].values;
                children.iter().zip(w).map(|(&c, &w)| w * vals[c]).sum()
            }
            SpnNode::Product { children } => children.iter().map(|&c| vals[c]).product(),
            SpnNode::Indicator { var, state } => {
                let s = ev[var.0];
                f64::from(u8::from(s == FREE || s as usize == *state))
            }
            SpnNode::Constant(v) => *v,
        };
    }
}

/// Root value of the circuit under the evidence.
pub fn spn_evaluate(spn: &Spn, evidence: &Evidence, domain: Domain) -> Result<f64> {
    Ok(spn_node_values(spn, evidence, domain)?[spn.root])
}

/// Values of every node under the evidence.
pub fn spn_node_values(spn: &Spn, evidence: &Evidence, domain: Domain) -> Result<Vec<f64>> {
    let ev = evidence.dense(&spn.variables)?;
    let mut vals = vec![0.0; spn.nodes.len()];
    match domain {
        Domain::Linear => spn.forward_linear(&ev, &mut vals),
        Domain::Log => spn.forward_log(&ev, &spn.log_params(), &mut vals),
    }
    Ok(vals)
}

/// `∂S/∂S_q` for every node `q`, in the linear domain.
pub fn spn_derivatives(spn: &Spn, evidence: &Evidence) -> Result<Vec<f64>> {
    let vals = spn_node_values(spn, evidence, Domain::Linear)?;
    let mut der = vec![0.0; spn.nodes.len()];
    spn.backward_linear(&vals, &mut der);
    Ok(der)
}

impl Density for Spn {
    fn n_model_vars(&self) -> usize {
        self.model_var_ids().len()
    }

    fn log_densities(&self, data: &Dataset) -> Result<Vec<f64>> {
        em::log_values(self, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::inference::evaluate;

    pub(crate) fn coin(weights: [f64; 2]) -> Spn {
        let variables = vec![Variable {
            name: "A".into(),
            kind: VarKind::Model,
            domain: 2,
        }];
        let nodes = vec![
            SpnNode::Indicator { var: VarId(0), state: 0 },
            SpnNode::Indicator { var: VarId(0), state: 1 },
            SpnNode::Sum {
                children: vec![0, 1],
                param: 0,
            },
        ];
        let params = vec![ParamVector {
            component: 0,
            source: ParamSource::Free,
            values: weights.to_vec(),
        }];
        Spn::new(variables, nodes, 2, params).unwrap()
    }

    #[test]
    fn single_sum_evaluation() {
        let spn = coin([0.5, 0.5]);
        let ev = Evidence::new().with(VarId(0), 1);
        assert_eq!(spn_evaluate(&spn, &ev, Domain::Linear).unwrap(), 0.5);
        assert!((spn_evaluate(&spn, &ev, Domain::Log).unwrap() - 0.5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn derivative_of_root_and_leaves() {
        let spn = coin([0.3, 0.7]);
        let d = spn_derivatives(&spn, &Evidence::new()).unwrap();
        assert_eq!(d[2], 1.0);
        assert!((d[0] - 0.3).abs() < 1e-15);
        assert!((d[1] - 0.7).abs() < 1e-15);
    }

    #[test]
    fn compiled_e1_matches_inference() {
        let e1 = fixtures::e1();
        let spn = compile(&e1.spgm).unwrap();
        let ev = Evidence::new().with(e1.a, 0).with(e1.b, 0).with(e1.z1, 0);
        assert!((spn_evaluate(&spn, &ev, Domain::Linear).unwrap() - 0.378).abs() < 1e-15);
        assert!((spn_evaluate(&spn, &Evidence::new(), Domain::Linear).unwrap() - 1.0).abs() < 1e-15);
        let ab = Evidence::new().with(e1.a, 0).with(e1.b, 0);
        let v = spn_evaluate(&spn, &ab, Domain::Linear).unwrap();
        assert!((v - evaluate(&e1.spgm, &ab, Domain::Linear).unwrap()).abs() < 1e-15);
        assert!((v - 0.468).abs() < 1e-15);
    }

    #[test]
    fn compiled_e1_golden_size() {
        let spn = compile(&fixtures::e1().spgm).unwrap();
        assert_eq!(spn.nodes().len(), 19);
        assert_eq!(spn.edge_count(), 26);
        assert!(spn.check_structure().is_ok());
    }

    #[test]
    fn single_vnode_compiles_to_one_sum() {
        let mut b = crate::model::SpgmBuilder::new();
        let a = b.model_var("A", 3);
        let n = b.vnode(a, None);
        b.unary(n, vec![0.2, 0.3, 0.5]);
        let spn = compile(&b.build(n)).unwrap();
        assert_eq!(spn.nodes().len(), 4);
        assert!(matches!(&spn.nodes()[spn.root()], SpnNode::Sum { children, .. } if children.len() == 3));
    }

    #[test]
    fn tree_model_has_no_context_indicators() {
        let spn = compile(&fixtures::random_chain(5, 2)).unwrap();
        assert_eq!(spn.count_indicators_of(VarKind::Context), 0);
    }

    #[test]
    fn derivatives_match_finite_differences_on_e1() {
        let e1 = fixtures::e1();
        let spn = compile(&e1.spgm).unwrap();
        let ev = Evidence::new().with(e1.b, 1);
        let d = spn_derivatives(&spn, &ev).unwrap();
        let h = 1e-6;
        for q in 0..spn.nodes().len() {
            let fd = (spn.evaluate_perturbed(&ev, q, h).unwrap()
                - spn.evaluate_perturbed(&ev, q, -h).unwrap())
                / (2.0 * h);
            assert!((fd - d[q]).abs() <= 1e-5 * d[q].abs().max(1e-5), "node {q}: {fd} vs {}", d[q]);
        }
    }

    #[test]
    fn share_groups_cover_every_sum_edge() {
        let spn = compile(&fixtures::e1().spgm).unwrap();
        let grouped: usize = spn.share_groups().iter().map(Vec::len).sum();
        let sum_edges: usize = spn
            .nodes()
            .iter()
            .filter(|n| matches!(n, SpnNode::Sum { .. }))
            .map(|n| n.children().len())
            .sum();
        assert_eq!(grouped, sum_edges);
    }
}
