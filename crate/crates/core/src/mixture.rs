use rayon::prelude::*;

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::inference::{Density, Evaluator};
use crate::model::{Node, NodeId, NodeKind, Spgm};
use crate::numeric::{log_sum_exp, safe_ln};

/// Convex combination of SPGMs over the same variables.
#[derive(Clone, Debug, PartialEq)]
pub struct SpgmMixture {
    pub components: Vec<Spgm>,
    pub lambdas: Vec<f64>,
}

impl SpgmMixture {
    pub fn new(components: Vec<Spgm>, lambdas: Vec<f64>) -> Result<Self> {
        let m = SpgmMixture {
            components,
            lambdas,
        };
        m.check()?;
        Ok(m)
    }

    pub fn single(spgm: Spgm) -> Self {
        SpgmMixture {
            components: vec![spgm],
            lambdas: vec![1.0],
        }
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn check(&self) -> Result<()> {
        if self.components.is_empty() || self.components.len() != self.lambdas.len() {
            return Err(Error::invalid("mixture needs one weight per component"));
        }
        if self.lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::invalid("mixture weights must be non-negative"));
        }
        let total: f64 = self.lambdas.iter().sum();
        if (total - 1.0).abs() > crate::model::STOCHASTIC_TOL {
            return Err(Error::invalid(format!("mixture weights sum to {total}")));
        }
        let vars = self.components[0].variables();
        if self.components.iter().any(|c| c.variables() != vars) {
            return Err(Error::invalid("mixture components must share their variables"));
        }
        for c in &self.components {
            c.ensure_valid()?;
        }
        Ok(())
    }

    pub fn evaluators(&self) -> Result<Vec<Evaluator>> {
        self.components.iter().map(Evaluator::new).collect()
    }

    /// One model equal to the mixture: an unobserved sum over disjoint
    /// copies of the components. A single component is returned as is.
    /// Components with observed sums cannot be merged, since each context
    /// variable may label only one sum.
    pub fn merged(&self) -> Result<Spgm> {
        self.check()?;
        if self.components.len() == 1 {
            return Ok(self.components[0].clone());
        }
        let mut nodes = Vec::new();
        let mut pairwise = std::collections::BTreeMap::new();
        let mut unary = std::collections::BTreeMap::new();
        let mut roots = Vec::with_capacity(self.components.len());
        for c in &self.components {
            let offset = nodes.len();
            let shift = |id: NodeId| NodeId(id.0 + offset);
            nodes.extend(c.nodes().iter().map(|n| Node {
                kind: n.kind.clone(),
                children: n.children.iter().map(|&ch| shift(ch)).collect(),
            }));
            for (&(p, ch), cpt) in c.pairwise() {
                pairwise.insert((shift(p), shift(ch)), cpt.clone());
            }
            for (&n, u) in c.unary() {
                unary.insert(shift(n), u.clone());
            }
            roots.push(shift(c.root()));
        }
        let root = NodeId(nodes.len());
        nodes.push(Node {
            kind: NodeKind::SumUnobserved {
                weights: self.lambdas.clone(),
            },
            children: roots,
        });
        let spgm = Spgm::from_parts(self.components[0].variables().to_vec(), nodes, root, pairwise, unary);
        spgm.ensure_valid()?;
        Ok(spgm)
    }

    /// Per-component log densities, `[component][row]`.
    pub fn component_log_values(&self, data: &Dataset) -> Result<Vec<Vec<f64>>> {
        let evals = self.evaluators()?;
        evals.par_iter().map(|e| e.log_values(data)).collect()
    }
}

/// `ln Σ_k λ_k P_k(x)` per row from per-component log densities.
pub fn combine_log_values(lambdas: &[f64], per_component: &[Vec<f64>]) -> Vec<f64> {
    let n = per_component.first().map_or(0, Vec::len);
    let log_lambda: Vec<f64> = lambdas.iter().map(|&l| safe_ln(l)).collect();
    let mut terms = vec![0.0; lambdas.len()];
    (0..n)
        .map(|i| {
            for (k, t) in terms.iter_mut().enumerate() {
                *t = log_lambda[k] + per_component[k][i];
            }
            log_sum_exp(&terms)
        })
        .collect()
}

impl Density for SpgmMixture {
    fn n_model_vars(&self) -> usize {
        self.components[0].model_variables().len()
    }

    fn log_densities(&self, data: &Dataset) -> Result<Vec<f64>> {
        Ok(combine_log_values(&self.lambdas, &self.component_log_values(data)?))
    }
}
