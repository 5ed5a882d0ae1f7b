//! Exact evaluation by memoized message passing.
//!
//! An [`Evaluator`] flattens the model into one operation per
//! `(sender, receiver)` message, ordered children-first, so a full
//! evaluation is a single linear sweep over a scratch buffer.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::evidence::{Evidence, FREE};
use crate::model::{NodeId, NodeKind, Receiver, Spgm, VarId, Variable};
use crate::numeric::safe_ln;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Domain {
    Linear,
    #[default]
    Log,
}

/// Rows per parallel work item. Fixed so results do not depend on the
/// thread count.
const ROW_CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Mode {
    Sum,
    LogSum,
    LogMax,
}

#[derive(Clone, Debug)]
enum Op {
    Vnode {
        var: usize,
        states: usize,
        table: usize,
        child: Option<usize>,
    },
    Sum {
        context: Option<usize>,
        weights: usize,
        children: (usize, usize),
    },
    Product {
        children: (usize, usize),
    },
}

#[derive(Clone, Debug)]
struct Slot {
    node: NodeId,
    receiver: Receiver,
    offset: usize,
    len: usize,
}

/// Messages computed during one evaluation, keyed by `(sender, receiver)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MessageTable {
    pub entries: BTreeMap<(NodeId, Receiver), Vec<f64>>,
    pub domain: Domain,
    /// Number of distinct messages computed.
    pub message_count: usize,
}

/// Precompiled message schedule for one model.
#[derive(Clone, Debug)]
pub struct Evaluator {
    variables: Vec<Variable>,
    model_vars: Vec<usize>,
    ops: Vec<Op>,
    slots: Vec<Slot>,
    child_ops: Vec<usize>,
    lin: Vec<f64>,
    log: Vec<f64>,
    buffer_len: usize,
    root: usize,
    node_count: usize,
}

impl Evaluator {
    /// Validates the model and builds the schedule.
    pub fn new(spgm: &Spgm) -> Result<Self> {
        spgm.ensure_valid()?;
        let order = spgm.topological_order()?;
        let receivers = spgm.receivers()?;
        let domain_of = |node: NodeId| match spgm.nodes()[node.0].kind {
            NodeKind::Vnode { var } => spgm.variables()[var.0].domain,
            _ => unreachable!("receivers are Vnodes"),
        };

        let mut ops = Vec::new();
        let mut slots: Vec<Slot> = Vec::new();
        let mut child_ops = Vec::new();
        let mut lin = Vec::new();
        let mut index: HashMap<(NodeId, Receiver), usize> = HashMap::new();
        let mut buffer_len = 0;

        for id in order {
            let node = &spgm.nodes()[id.0];
            for &r in &receivers[id.0] {
                let len = match r {
                    Receiver::Root => 1,
                    Receiver::Vnode(s) => domain_of(s),
                };
                let op = match &node.kind {
                    NodeKind::Vnode { var } => {
                        let states = spgm.variables()[var.0].domain;
                        let table = lin.len();
                        match r {
                            Receiver::Root => lin.extend_from_slice(&spgm.unary()[&id]),
                            Receiver::Vnode(s) => {
                                lin.extend_from_slice(spgm.pairwise()[&(s, id)].values())
                            }
                        }
                        let child = node
                            .children
                            .first()
                            .map(|c| index[&(*c, Receiver::Vnode(id))]);
                        Op::Vnode {
                            var: var.0,
                            states,
                            table,
                            child,
                        }
                    }
                    NodeKind::SumObserved { .. } | NodeKind::SumUnobserved { .. } => {
                        let weights = lin.len();
                        lin.extend_from_slice(node.kind.weights().unwrap());
                        let start = child_ops.len();
                        child_ops.extend(node.children.iter().map(|c| index[&(*c, r)]));
                        Op::Sum {
                            context: node.kind.var().map(|v| v.0),
                            weights,
                            children: (start, child_ops.len()),
                        }
                    }
                    NodeKind::Product => {
                        let start = child_ops.len();
                        child_ops.extend(node.children.iter().map(|c| index[&(*c, r)]));
                        Op::Product {
                            children: (start, child_ops.len()),
                        }
                    }
                };
                index.insert((id, r), ops.len());
                ops.push(op);
                slots.push(Slot {
                    node: id,
                    receiver: r,
                    offset: buffer_len,
                    len,
                });
                buffer_len += len;
            }
        }
        let log = lin.iter().map(|&p| safe_ln(p)).collect();
        let root = index[&(spgm.root(), Receiver::Root)];
        Ok(Evaluator {
            variables: spgm.variables().to_vec(),
            model_vars: spgm.model_variables().iter().map(|v| v.0).collect(),
            ops,
            slots,
            child_ops,
            lin,
            log,
            buffer_len,
            root,
            node_count: spgm.nodes().len(),
        })
    }

    /// Number of distinct messages per evaluation.
    pub fn message_count(&self) -> usize {
        self.ops.len()
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn variables(&self) -> &[Variable] {
        &self.variables
    }

    /// Number of model variables (dataset columns).
    pub fn n_model_vars(&self) -> usize {
        self.model_vars.len()
    }

    pub fn buffer_len(&self) -> usize {
        self.buffer_len
    }

    pub fn evaluate(&self, evidence: &Evidence, domain: Domain) -> Result<f64> {
        let ev = evidence.dense(&self.variables)?;
        let mut buf = vec![0.0; self.buffer_len];
        Ok(self.evaluate_dense(&ev, domain, &mut buf))
    }

    /// Evaluates on dense evidence using a caller-provided scratch buffer of
    /// at least [`buffer_len`](Self::buffer_len) entries.
    pub fn evaluate_dense(&self, ev: &[u32], domain: Domain, buf: &mut [f64]) -> f64 {
        let mode = match domain {
            Domain::Linear => Mode::Sum,
            Domain::Log => Mode::LogSum,
        };
        self.run(ev, mode, buf);
        buf[self.slots[self.root].offset]
    }

    pub fn evaluate_with_table(
        &self,
        evidence: &Evidence,
        domain: Domain,
    ) -> Result<(f64, MessageTable)> {
        let ev = evidence.dense(&self.variables)?;
        let mut buf = vec![0.0; self.buffer_len];
        let value = self.evaluate_dense(&ev, domain, &mut buf);
        let entries = self
            .slots
            .iter()
            .map(|s| {
                (
                    (s.node, s.receiver),
                    buf[s.offset..s.offset + s.len].to_vec(),
                )
            })
            .collect();
        Ok((
            value,
            MessageTable {
                entries,
                domain,
                message_count: self.ops.len(),
            },
        ))
    }

    /// Natural log of the maximizing completion's value.
    pub fn map_log(&self, evidence: &Evidence) -> Result<f64> {
        let ev = evidence.dense(&self.variables)?;
        let mut buf = vec![0.0; self.buffer_len];
        self.run(&ev, Mode::LogMax, &mut buf);
        Ok(buf[self.slots[self.root].offset])
    }

    /// MAP value together with one maximizing completion of the evidence.
    /// Ties go to the lowest state, then the lowest child.
    pub fn map_assignment(&self, evidence: &Evidence) -> Result<(f64, Evidence)> {
        let ev = evidence.dense(&self.variables)?;
        let mut buf = vec![0.0; self.buffer_len];
        self.run(&ev, Mode::LogMax, &mut buf);
        let best = buf[self.slots[self.root].offset];
        let mut assignment = evidence.clone();
        if best == f64::NEG_INFINITY {
            return Ok((0.0, assignment));
        }
        let mut stack = vec![(self.root, 0usize)];
        while let Some((op, j)) = stack.pop() {
            match &self.ops[op] {
                Op::Vnode {
                    var,
                    states,
                    table,
                    child,
                } => {
                    let row = table + j * states;
                    let mut arg = None;
                    let mut top = f64::NEG_INFINITY;
                    for k in 0..*states {
                        if !allowed(&ev, *var, k) {
                            continue;
                        }
                        let t = self.log[row + k] + child.map_or(0.0, |c| buf[self.off(c) + k]);
                        if arg.is_none() || t > top {
                            top = t;
                            arg = Some(k);
                        }
                    }
                    let k = arg.expect("at least one admissible state");
                    assignment.set(VarId(*var), k);
                    if let Some(c) = child {
                        stack.push((*c, k));
                    }
                }
                Op::Sum {
                    context,
                    weights,
                    children,
                } => {
                    let mut arg = None;
                    let mut top = f64::NEG_INFINITY;
                    for (k, &c) in self.child_ops[children.0..children.1].iter().enumerate() {
                        if context.is_some_and(|z| !allowed(&ev, z, k)) {
                            continue;
                        }
                        let t = self.log[weights + k] + buf[self.off(c) + j];
                        if arg.is_none() || t > top {
                            top = t;
                            arg = Some((k, c));
                        }
                    }
                    let (k, c) = arg.expect("at least one admissible child");
                    if let Some(z) = context {
                        assignment.set(VarId(*z), k);
                    }
                    stack.push((c, j));
                }
                Op::Product { children } => {
                    for &c in self.child_ops[children.0..children.1].iter().rev() {
                        stack.push((c, j));
                    }
                }
            }
        }
        Ok((best.exp(), assignment))
    }

    #[inline]
    fn off(&self, op: usize) -> usize {
        self.slots[op].offset
    }

    fn run(&self, ev: &[u32], mode: Mode, buf: &mut [f64]) {
        for (i, op) in self.ops.iter().enumerate() {
            let Slot { offset, len, .. } = self.slots[i];
            match op {
                Op::Vnode {
                    var,
                    states,
                    table,
                    child,
                } => {
                    let child = child.map(|c| self.off(c));
                    let obs = ev[*var];
                    for j in 0..len {
                        let row = table + j * states;
                        let v = if obs != FREE {
                            let k = obs as usize;
                            let c = child.map(|c| buf[c + k]);
                            match mode {
                                Mode::Sum => self.lin[row + k] * c.unwrap_or(1.0),
                                _ => self.log[row + k] + c.unwrap_or(0.0),
                            }
                        } else {
                            match mode {
                                Mode::Sum => (0..*states)
                                    .map(|k| self.lin[row + k] * child.map_or(1.0, |c| buf[c + k]))
                                    .sum(),
                                Mode::LogSum => log_sum(*states, |k| {
                                    self.log[row + k] + child.map_or(0.0, |c| buf[c + k])
                                }),
                                Mode::LogMax => (0..*states)
                                    .map(|k| self.log[row + k] + child.map_or(0.0, |c| buf[c + k]))
                                    .fold(f64::NEG_INFINITY, f64::max),
                            }
                        };
                        buf[offset + j] = v;
                    }
                }
                Op::Sum {
                    context,
                    weights,
                    children,
                } => {
                    let kids = &self.child_ops[children.0..children.1];
                    let fixed = context.map(|z| ev[z]).filter(|&s| s != FREE);
                    for j in 0..len {
                        let v = if let Some(k) = fixed {
                            let k = k as usize;
                            let c = buf[self.off(kids[k]) + j];
                            match mode {
                                Mode::Sum => self.lin[weights + k] * c,
                                _ => self.log[weights + k] + c,
                            }
                        } else {
                            match mode {
                                Mode::Sum => kids
                                    .iter()
                                    .enumerate()
                                    .map(|(k, &c)| self.lin[weights + k] * buf[self.off(c) + j])
                                    .sum(),
                                Mode::LogSum => log_sum(kids.len(), |k| {
                                    self.log[weights + k] + buf[self.off(kids[k]) + j]
                                }),
                                Mode::LogMax => kids
                                    .iter()
                                    .enumerate()
                                    .map(|(k, &c)| self.log[weights + k] + buf[self.off(c) + j])
                                    .fold(f64::NEG_INFINITY, f64::max),
                            }
                        };
                        buf[offset + j] = v;
                    }
                }
                Op::Product { children } => {
                    let kids = &self.child_ops[children.0..children.1];
                    for j in 0..len {
                        let v = match mode {
                            Mode::Sum => kids.iter().map(|&c| buf[self.off(c) + j]).product(),
                            _ => kids.iter().map(|&c| buf[self.off(c) + j]).sum(),
                        };
                        buf[offset + j] = v;
                    }
                }
            }
        }
    }

    /// Overrides the weights of one sum node in every op it produced. The
    /// weights are not checked, so non-stochastic probes are allowed.
    pub(crate) fn set_sum_weights(&mut self, node: NodeId, w: &[f64]) {
        for (i, slot) in self.slots.iter().enumerate() {
            if slot.node != node {
                continue;
            }
            if let Op::Sum { weights, .. } = self.ops[i] {
                for (k, &x) in w.iter().enumerate() {
                    self.lin[weights + k] = x;
                    self.log[weights + k] = safe_ln(x);
                }
            }
        }
    }

    /// Fills dense evidence from a dataset row (model variables only).
    #[inline]
    pub fn fill_row(&self, row: &[u8], ev: &mut [u32]) {
        for (&v, &s) in self.model_vars.iter().zip(row) {
            ev[v] = u32::from(s);
        }
    }

    /// `ln P(x)` for every row, in row order.
    pub fn log_values(&self, data: &Dataset) -> Result<Vec<f64>> {
        self.check_arity(data)?;
        let rows: Vec<&[u8]> = data.rows().collect();
        Ok(rows
            .par_chunks(ROW_CHUNK)
            .flat_map_iter(|chunk| {
                let mut ev = vec![FREE; self.variables.len()];
                let mut buf = vec![0.0; self.buffer_len];
                chunk
                    .iter()
                    .map(|row| {
                        self.fill_row(row, &mut ev);
                        self.evaluate_dense(&ev, Domain::Log, &mut buf)
                    })
                    .collect::<Vec<_>>()
            })
            .collect())
    }

    fn check_arity(&self, data: &Dataset) -> Result<()> {
        if data.n_vars() != self.model_vars.len() {
            return Err(Error::Arity {
                row: 0,
                expected: self.model_vars.len(),
                found: data.n_vars(),
            });
        }
        Ok(())
    }
}

#[inline]
fn allowed(ev: &[u32], var: usize, state: usize) -> bool {
    ev[var] == FREE || ev[var] as usize == state
}

/// Log-sum-exp over `n` lazily computed terms without allocating.
#[inline]
fn log_sum(n: usize, term: impl Fn(usize) -> f64) -> f64 {
    let mut max = f64::NEG_INFINITY;
    for k in 0..n {
        max = max.max(term(k));
    }
    if !max.is_finite() {
        return max;
    }
    let mut acc = 0.0;
    for k in 0..n {
        acc += (term(k) - max).exp();
    }
    max + acc.ln()
}

/// Anything that assigns a log density to every row of a dataset.
pub trait Density {
    fn n_model_vars(&self) -> usize;
    fn log_densities(&self, data: &Dataset) -> Result<Vec<f64>>;
}

impl Density for Evaluator {
    fn n_model_vars(&self) -> usize {
        self.model_vars.len()
    }

    fn log_densities(&self, data: &Dataset) -> Result<Vec<f64>> {
        self.log_values(data)
    }
}

impl Density for Spgm {
    fn n_model_vars(&self) -> usize {
        self.model_variables().len()
    }

    fn log_densities(&self, data: &Dataset) -> Result<Vec<f64>> {
        Evaluator::new(self)?.log_values(data)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogLikelihood {
    pub total: f64,
    pub mean: f64,
}

/// Total and mean `ln P(x)` over the rows, summed in row order.
pub fn log_likelihood<D: Density + ?Sized>(model: &D, data: &Dataset) -> Result<LogLikelihood> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let values = model.log_densities(data)?;
    sum_log_values(&values)
}

pub(crate) fn sum_log_values(values: &[f64]) -> Result<LogLikelihood> {
    if values.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut total = 0.0;
    for (row, &v) in values.iter().enumerate() {
        if v == f64::NEG_INFINITY {
            return Err(Error::ZeroProbability { row });
        }
        total += v;
    }
    Ok(LogLikelihood {
        total,
        mean: total / values.len() as f64,
    })
}

/// `P(Y = y)` (or its log), marginalizing every unassigned variable.
pub fn evaluate(spgm: &Spgm, evidence: &Evidence, domain: Domain) -> Result<f64> {
    Evaluator::new(spgm)?.evaluate(evidence, domain)
}

pub fn evaluate_with_table(
    spgm: &Spgm,
    evidence: &Evidence,
    domain: Domain,
) -> Result<(f64, MessageTable)> {
    Evaluator::new(spgm)?.evaluate_with_table(evidence, domain)
}

/// Value of the maximizing completion of the evidence.
pub fn map_value(spgm: &Spgm, evidence: &Evidence) -> Result<f64> {
    Ok(Evaluator::new(spgm)?.map_log(evidence)?.exp())
}

pub fn map_assignment(spgm: &Spgm, evidence: &Evidence) -> Result<(f64, Evidence)> {
    Evaluator::new(spgm)?.map_assignment(evidence)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1.0)
    }

    #[test]
    fn e1_marginals() {
        let e1 = fixtures::e1();
        let full = Evidence::new().with(e1.a, 0).with(e1.b, 0).with(e1.z1, 0);
        for domain in [Domain::Linear, Domain::Log] {
            let v = evaluate(&e1.spgm, &full, domain).unwrap();
            let v = if domain == Domain::Log { v.exp() } else { v };
            assert!(close(v, 0.378), "{v}");
        }
        assert!(close(evaluate(&e1.spgm, &Evidence::new(), Domain::Linear).unwrap(), 1.0));
        let ab = Evidence::new().with(e1.a, 0).with(e1.b, 0);
        assert!(close(evaluate(&e1.spgm, &ab, Domain::Linear).unwrap(), 0.468));
    }

    #[test]
    fn e1_map() {
        let e1 = fixtures::e1();
        assert!(close(map_value(&e1.spgm, &Evidence::new()).unwrap(), 0.378));
        let a1 = Evidence::new().with(e1.a, 1);
        assert!(close(map_value(&e1.spgm, &a1).unwrap(), 0.224));
        let (v, arg) = map_assignment(&e1.spgm, &Evidence::new()).unwrap();
        assert!(close(v, 0.378));
        assert_eq!(
            arg,
            Evidence::new().with(e1.a, 0).with(e1.b, 0).with(e1.z1, 0)
        );
        let (_, arg) = map_assignment(&e1.spgm, &a1).unwrap();
        assert_eq!(arg, a1.clone().with(e1.b, 1).with(e1.z1, 0));
    }

    #[test]
    fn fully_observed_map_equals_marginal() {
        let e1 = fixtures::e1();
        let full = Evidence::new().with(e1.a, 1).with(e1.b, 0).with(e1.z1, 1);
        let m = map_value(&e1.spgm, &full).unwrap();
        let p = evaluate(&e1.spgm, &full, Domain::Linear).unwrap();
        assert!(close(m, p));
    }

    #[test]
    fn zero_probability_evidence_is_not_an_error() {
        let mut b = crate::model::SpgmBuilder::new();
        let a = b.model_var("A", 2);
        let n = b.vnode(a, None);
        b.unary(n, vec![1.0, 0.0]);
        let spgm = b.build(n);
        let ev = Evidence::new().with(a, 1);
        assert_eq!(evaluate(&spgm, &ev, Domain::Linear).unwrap(), 0.0);
        assert_eq!(evaluate(&spgm, &ev, Domain::Log).unwrap(), f64::NEG_INFINITY);
        let d = Dataset::from_rows(&[vec![0], vec![1]]).unwrap();
        assert!(matches!(
            log_likelihood(&spgm, &d),
            Err(Error::ZeroProbability { row: 1 })
        ));
    }

    #[test]
    fn log_likelihood_of_single_row() {
        let e1 = fixtures::e1();
        let d = Dataset::from_rows(&[vec![0, 0]]).unwrap();
        let ll = log_likelihood(&e1.spgm, &d).unwrap();
        assert!((ll.total - 0.468f64.ln()).abs() < 1e-12);
        assert!((ll.total - -0.759287).abs() < 1e-6);
        let d2 = Dataset::from_rows(&[vec![0, 0], vec![0, 0]]).unwrap();
        let ll2 = log_likelihood(&e1.spgm, &d2).unwrap();
        assert_eq!(ll2.total, 2.0 * ll.total);
        let empty = Dataset::new(2, vec![]).unwrap();
        assert!(matches!(log_likelihood(&e1.spgm, &empty), Err(Error::EmptyDataset)));
        let wide = Dataset::from_rows(&[vec![0, 0, 0]]).unwrap();
        assert!(matches!(log_likelihood(&e1.spgm, &wide), Err(Error::Arity { .. })));
    }

    #[test]
    fn invalid_model_is_rejected() {
        let mut b = crate::model::SpgmBuilder::new();
        let a = b.model_var("A", 2);
        let n = b.vnode(a, None);
        let spgm = b.build(n);
        assert!(matches!(
            evaluate(&spgm, &Evidence::new(), Domain::Log),
            Err(Error::InvalidModel(_))
        ));
    }

    #[test]
    fn message_table_has_one_entry_per_message() {
        let e1 = fixtures::e1();
        let (_, table) = evaluate_with_table(&e1.spgm, &Evidence::new(), Domain::Linear).unwrap();
        // A->ROOT, Z1->A, B1->A, B2->A
        assert_eq!(table.message_count, 4);
        assert_eq!(table.entries.len(), 4);
        let m = &table.entries[&(e1.b_first, Receiver::Vnode(e1.spgm.root()))];
        assert_eq!(m, &vec![1.0, 1.0]);
    }
}
