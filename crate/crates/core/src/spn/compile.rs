use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::model::{NodeId, NodeKind, Receiver, Spgm, VarId};

use super::{ParamSource, ParamVector, Spn, SpnNode};

/// Shared arena for one or more compiled models.
struct Arena {
    nodes: Vec<SpnNode>,
    params: Vec<ParamVector>,
    indicators: HashMap<(VarId, usize), usize>,
}

impl Arena {
    fn push(&mut self, node: SpnNode) -> usize {
        self.nodes.push(node);
        self.nodes.len() - 1
    }

    fn indicator(&mut self, var: VarId, state: usize) -> usize {
        if let Some(&id) = self.indicators.get(&(var, state)) {
            return id;
        }
        let id = self.push(SpnNode::Indicator { var, state });
        self.indicators.insert((var, state), id);
        id
    }

    fn param(&mut self, component: usize, source: ParamSource, values: Vec<f64>) -> usize {
        self.params.push(ParamVector {
            component,
            source,
            values,
        });
        self.params.len() - 1
    }

    /// Compiles one SPGM; returns the node computing its root message.
    fn model(&mut self, spgm: &Spgm, component: usize) -> Result<usize> {
        spgm.ensure_valid()?;
        let order = spgm.topological_order()?;
        let receivers = spgm.receivers()?;
        let domain_of = |n: NodeId| match spgm.nodes()[n.0].kind {
            NodeKind::Vnode { var } => spgm.variables()[var.0].domain,
            _ => 1,
        };
        // (sender, receiver, receiver state) -> SPN node
        let mut message: HashMap<(NodeId, Receiver, usize), usize> = HashMap::new();
        // (Vnode, own state) -> [X]_k times incoming child message
        let mut state_term: HashMap<(NodeId, usize), usize> = HashMap::new();
        let mut sum_param: HashMap<NodeId, usize> = HashMap::new();

        for id in order {
            let node = &spgm.nodes()[id.0];
            for &r in &receivers[id.0] {
                let len = match r {
                    Receiver::Root => 1,
                    Receiver::Vnode(s) => domain_of(s),
                };
                for j in 0..len {
                    let out = match &node.kind {
                        NodeKind::Vnode { var } => {
                            let states = spgm.variables()[var.0].domain;
                            let children: Vec<usize> = (0..states)
                                .map(|k| match node.children.first() {
                                    None => self.indicator(*var, k),
                                    Some(&c) => *state_term.entry((id, k)).or_insert_with(|| {
                                        let ind = self.indicator(*var, k);
                                        let incoming = message[&(c, Receiver::Vnode(id), k)];
                                        self.push(SpnNode::Product {
                                            children: vec![ind, incoming],
                                        })
                                    }),
                                })
                                .collect();
                            let (source, values) = match r {
                                Receiver::Root => {
                                    (ParamSource::Unary(id), spgm.unary()[&id].clone())
                                }
                                Receiver::Vnode(s) => (
                                    ParamSource::Cpt {
                                        parent: s,
                                        child: id,
                                        row: j,
                                    },
                                    spgm.pairwise()[&(s, id)].row(j).to_vec(),
                                ),
                            };
                            let param = self.param(component, source, values);
                            self.push(SpnNode::Sum { children, param })
                        }
                        NodeKind::SumObserved { var, weights } => {
                            let param = *sum_param.entry(id).or_insert_with(|| {
                                self.param(component, ParamSource::SumWeights(id), weights.clone())
                            });
                            let children: Vec<usize> = node
                                .children
                                .iter()
                                .enumerate()
                                .map(|(k, &c)| {
                                    let ind = self.indicator(*var, k);
                                    let incoming = message[&(c, r, j)];
                                    self.push(SpnNode::Product {
                                        children: vec![ind, incoming],
                                    })
                                })
                                .collect();
                            self.push(SpnNode::Sum { children, param })
                        }
                        NodeKind::SumUnobserved { weights } => {
                            let param = *sum_param.entry(id).or_insert_with(|| {
                                self.param(component, ParamSource::SumWeights(id), weights.clone())
                            });
                            let children = node.children.iter().map(|&c| message[&(c, r, j)]).collect();
                            self.push(SpnNode::Sum { children, param })
                        }
                        NodeKind::Product => {
                            let children = node.children.iter().map(|&c| message[&(c, r, j)]).collect();
                            self.push(SpnNode::Product { children })
                        }
                    };
                    message.insert((id, r, j), out);
                }
            }
        }
        Ok(message[&(spgm.root(), Receiver::Root, 0)])
    }
}

/// Compiles a valid SPGM into an equivalent SPN.
pub fn compile(spgm: &Spgm) -> Result<Spn> {
    let mut arena = Arena {
        nodes: Vec::new(),
        params: Vec::new(),
        indicators: HashMap::new(),
    };
    let root = arena.model(spgm, 0)?;
    Spn::new(spgm.variables().to_vec(), arena.nodes, root, arena.params)
}

/// Compiles a mixture into one SPN with a top sum over the components;
/// parameter vectors are tagged with their component index.
pub fn compile_mixture(components: &[Spgm], lambdas: &[f64]) -> Result<Spn> {
    if components.is_empty() || components.len() != lambdas.len() {
        return Err(Error::invalid("mixture needs one weight per component"));
    }
    let variables = components[0].variables().to_vec();
    if components.iter().any(|c| c.variables() != variables.as_slice()) {
        return Err(Error::invalid("mixture components must share their variables"));
    }
    let mut arena = Arena {
        nodes: Vec::new(),
        params: Vec::new(),
        indicators: HashMap::new(),
    };
    let mut roots = Vec::with_capacity(components.len());
    for (k, c) in components.iter().enumerate() {
        roots.push(arena.model(c, k)?);
    }
    let param = arena.param(0, ParamSource::Mixture, lambdas.to_vec());
    let root = arena.push(SpnNode::Sum {
        children: roots,
        param,
    });
    Spn::new(variables, arena.nodes, root, arena.params)
}

/// Copies the parameters of `component` back into the SPGM they were
/// compiled from.
pub fn apply_params(spn: &Spn, spgm: &Spgm, component: usize) -> Result<Spgm> {
    let mut out = spgm.clone();
    for p in spn.params().iter().filter(|p| p.component == component) {
        let target: Option<&mut [f64]> = match p.source {
            ParamSource::SumWeights(n) => out.sum_weights_mut(n).map(|w| w.as_mut_slice()),
            ParamSource::Cpt { parent, child, row } => out
                .cpt_mut(parent, child)
                .filter(|c| row < c.parent_states())
                .map(|c| c.row_mut(row)),
            ParamSource::Unary(n) => out.unary_mut(n).map(|u| u.as_mut_slice()),
            ParamSource::Mixture | ParamSource::Free => continue,
        };
        let target = target.ok_or_else(|| {
            Error::invalid(format!("parameter source {:?} does not exist in the model", p.source))
        })?;
        if target.len() != p.values.len() {
            return Err(Error::invalid(format!("parameter {:?} has the wrong length", p.source)));
        }
        target.copy_from_slice(&p.values);
    }
    Ok(out)
}
