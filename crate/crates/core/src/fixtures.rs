//! Small reference models and a seeded generator of random valid SPGMs,
//! shared by unit tests, integration tests and benchmarks.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};

use crate::dataset::Dataset;
use crate::model::{NodeId, NodeKind, Receiver, Spgm, SpgmBuilder, VarId};
use crate::oracle;

/// Root Vnode A over an observed sum Z1 selecting between two leaf Vnodes
/// for B with different tables.
#[derive(Clone, Debug)]
pub struct E1 {
    pub spgm: Spgm,
    pub a: VarId,
    pub b: VarId,
    pub z1: VarId,
    pub sum: NodeId,
    pub b_first: NodeId,
    pub b_second: NodeId,
}

pub fn e1() -> E1 {
    let mut b = SpgmBuilder::new();
    let a = b.model_var("A", 2);
    let bv = b.model_var("B", 2);
    let z1 = b.context_var("Z1", 2);
    let b1 = b.vnode(bv, None);
    let b2 = b.vnode(bv, None);
    let sum = b.observed_sum(z1, vec![0.7, 0.3], vec![b1, b2]);
    let na = b.vnode(a, Some(sum));
    b.unary(na, vec![0.6, 0.4]);
    b.cpt(na, b1, &[vec![0.9, 0.1], vec![0.2, 0.8]]).unwrap();
    b.cpt(na, b2, &[vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap();
    E1 {
        spgm: b.build(na),
        a,
        b: bv,
        z1,
        sum,
        b_first: b1,
        b_second: b2,
    }
}

/// Root observed sum Z1: branch 0 is the chain A -> B -> C, branch 1 is
/// A' with B' and C' as children of a product.
#[derive(Clone, Debug)]
pub struct E2 {
    pub spgm: Spgm,
    pub a: VarId,
    pub b: VarId,
    pub c: VarId,
    pub z1: VarId,
}

pub fn e2() -> E2 {
    let mut b = SpgmBuilder::new();
    let a = b.model_var("A", 2);
    let bv = b.model_var("B", 2);
    let c = b.model_var("C", 2);
    let z1 = b.context_var("Z1", 2);

    let nc = b.vnode(c, None);
    let nb = b.vnode(bv, Some(nc));
    let na = b.vnode(a, Some(nb));

    let nc2 = b.vnode(c, None);
    let nb2 = b.vnode(bv, None);
    let prod = b.product(vec![nb2, nc2]);
    let na2 = b.vnode(a, Some(prod));

    let root = b.observed_sum(z1, vec![0.4, 0.6], vec![na, na2]);
    b.unary(na, vec![0.3, 0.7]);
    b.cpt(na, nb, &[vec![0.8, 0.2], vec![0.25, 0.75]]).unwrap();
    b.cpt(nb, nc, &[vec![0.6, 0.4], vec![0.1, 0.9]]).unwrap();
    b.unary(na2, vec![0.5, 0.5]);
    b.cpt(na2, nb2, &[vec![0.9, 0.1], vec![0.3, 0.7]]).unwrap();
    b.cpt(na2, nc2, &[vec![0.2, 0.8], vec![0.7, 0.3]]).unwrap();
    E2 {
        spgm: b.build(root),
        a,
        b: bv,
        c,
        z1,
    }
}

/// Chain `X0 -> X1 -> ... -> X{n-1}` with random binary tables.
pub fn random_chain(n: usize, seed: u64) -> Spgm {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = SpgmBuilder::new();
    let vars: Vec<VarId> = (0..n).map(|i| b.model_var(format!("X{i}"), 2)).collect();
    let mut child = None;
    let mut nodes = Vec::new();
    for &v in vars.iter().rev() {
        let id = b.vnode(v, child);
        nodes.push(id);
        child = Some(id);
    }
    nodes.reverse();
    b.unary(nodes[0], random_distribution(&mut rng, 2));
    for w in nodes.windows(2) {
        let rows: Vec<Vec<f64>> = (0..2).map(|_| random_distribution(&mut rng, 2)).collect();
        b.cpt(w[0], w[1], &rows).unwrap();
    }
    b.build(nodes[0])
}

/// Dirichlet(1) sample.
pub fn random_distribution<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n)
        .map(|_| {
            let e: f64 = Exp1.sample(rng);
            e + 1e-3
        })
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / total).collect()
}

#[derive(Clone, Debug)]
pub struct RandomSpgmConfig {
    pub min_vars: usize,
    pub max_vars: usize,
    pub max_domain: usize,
    pub max_observed_sums: usize,
    pub max_sums: usize,
    pub max_subtrees: usize,
}

impl Default for RandomSpgmConfig {
    fn default() -> Self {
        RandomSpgmConfig {
            min_vars: 2,
            max_vars: 8,
            max_domain: 2,
            max_observed_sums: 3,
            max_sums: 5,
            max_subtrees: 40,
        }
    }
}

struct Gen<'a> {
    rng: ChaCha8Rng,
    b: SpgmBuilder,
    cfg: &'a RandomSpgmConfig,
    sums: usize,
    observed: usize,
}

impl Gen<'_> {
    /// Builds a node whose X-scope is `vars` plus the scope of `tail`.
    fn node(&mut self, vars: &[VarId], tail: Option<NodeId>, allow_z: bool) -> NodeId {
        if vars.is_empty() {
            return tail.expect("empty scope needs a tail");
        }
        let can_sum = self.sums < self.cfg.max_sums;
        let can_product = vars.len() >= 2 || tail.is_some();
        let roll: f64 = self.rng.random();
        if can_sum && roll < 0.3 {
            return self.sum(vars, tail, allow_z);
        }
        if can_product && roll < 0.5 {
            return self.product(vars, tail, allow_z);
        }
        let i = self.rng.random_range(0..vars.len());
        let var = vars[i];
        let rest: Vec<VarId> = vars.iter().copied().filter(|&v| v != var).collect();
        let child = if rest.is_empty() {
            tail
        } else {
            Some(self.node(&rest, tail, allow_z))
        };
        self.b.vnode(var, child)
    }

    fn product(&mut self, vars: &[VarId], tail: Option<NodeId>, allow_z: bool) -> NodeId {
        let mut vars = vars.to_vec();
        vars.shuffle(&mut self.rng);
        let parts = if vars.len() >= 2 {
            self.rng.random_range(2..=vars.len().min(3))
        } else {
            1
        };
        let mut groups: Vec<Vec<VarId>> = vec![Vec::new(); parts];
        for (i, v) in vars.into_iter().enumerate() {
            let g = if i < parts { i } else { self.rng.random_range(0..parts) };
            groups[g].push(v);
        }
        let tail_slot = tail.map(|_| self.rng.random_range(0..=parts));
        let mut children = Vec::new();
        for (g, group) in groups.iter().enumerate() {
            let t = if tail_slot == Some(g) { tail } else { None };
            children.push(self.node(group, t, allow_z));
        }
        if tail_slot == Some(parts) {
            children.push(tail.unwrap());
        }
        self.b.product(children)
    }

    fn sum(&mut self, vars: &[VarId], tail: Option<NodeId>, allow_z: bool) -> NodeId {
        self.sums += 1;
        let mut vars = vars.to_vec();
        vars.shuffle(&mut self.rng);
        // Branch-specific part is non-empty; the rest is shared by all branches.
        let specific = self.rng.random_range(1..=vars.len());
        let (own, shared) = vars.split_at(specific);
        let shared_tail = if shared.is_empty() {
            tail
        } else {
            Some(self.node(shared, tail, allow_z))
        };
        let k = self.rng.random_range(2..=3);
        let children: Vec<NodeId> = (0..k)
            .map(|_| self.node(own, shared_tail, false))
            .collect();
        let weights = random_distribution(&mut self.rng, k);
        if allow_z && self.observed < self.cfg.max_observed_sums && self.rng.random_bool(0.6) {
            self.observed += 1;
            let z = self.b.context_var(format!("Z{}", self.observed), k);
            self.b.observed_sum(z, weights, children)
        } else {
            self.b.unobserved_sum(weights, children)
        }
    }
}

/// Random valid SPGM with a bounded number of subtrees.
pub fn random_spgm(seed: u64, cfg: &RandomSpgmConfig) -> Spgm {
    for attempt in 0u64.. {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9).wrapping_add(attempt));
        let n = rng.random_range(cfg.min_vars..=cfg.max_vars);
        let mut b = SpgmBuilder::new();
        let vars: Vec<VarId> = (0..n)
            .map(|i| {
                let d = rng.random_range(2..=cfg.max_domain.max(2));
                b.model_var(format!("X{i}"), d)
            })
            .collect();
        let mut g = Gen {
            rng,
            b,
            cfg,
            sums: 0,
            observed: 0,
        };
        let root = g.node(&vars, None, true);
        let mut rng = g.rng;
        let spgm = fill_parameters(g.b.build(root), &mut rng);
        if !crate::model::validate(&spgm).is_valid() {
            continue;
        }
        match oracle::enumerate_subtrees(&spgm, cfg.max_subtrees) {
            Ok(_) => return spgm,
            Err(_) => continue,
        }
    }
    unreachable!()
}

/// Replaces all tables with random ones matching the structure.
pub fn fill_parameters<R: Rng + ?Sized>(spgm: Spgm, rng: &mut R) -> Spgm {
    let receivers = match spgm.receivers() {
        Ok(r) => r,
        Err(_) => return spgm,
    };
    let mut b = SpgmBuilder::new();
    for v in spgm.variables() {
        b.variable(v.name.clone(), v.kind, v.domain);
    }
    for node in spgm.nodes() {
        let kind = match &node.kind {
            NodeKind::SumObserved { var, .. } => NodeKind::SumObserved {
                var: *var,
                weights: random_distribution(rng, node.children.len()),
            },
            NodeKind::SumUnobserved { .. } => NodeKind::SumUnobserved {
                weights: random_distribution(rng, node.children.len()),
            },
            other => other.clone(),
        };
        b.node(kind, node.children.clone());
    }
    let domain = |n: NodeId| match spgm.nodes()[n.0].kind {
        NodeKind::Vnode { var } => spgm.variables()[var.0].domain,
        _ => 0,
    };
    for (i, recv) in receivers.iter().enumerate() {
        let id = NodeId(i);
        if !spgm.nodes()[i].kind.is_vnode() {
            continue;
        }
        let dt = domain(id);
        for r in recv {
            match *r {
                Receiver::Root => {
                    b.unary(id, random_distribution(rng, dt));
                }
                Receiver::Vnode(s) => {
                    let rows: Vec<Vec<f64>> =
                        (0..domain(s)).map(|_| random_distribution(rng, dt)).collect();
                    b.cpt(s, id, &rows).expect("rectangular rows");
                }
            }
        }
    }
    b.build(spgm.root())
}

/// Random partial evidence over all variables; each variable is observed
/// with probability `p_observe`.
pub fn random_evidence<R: Rng + ?Sized>(
    spgm: &Spgm,
    rng: &mut R,
    p_observe: f64,
) -> crate::evidence::Evidence {
    let mut ev = crate::evidence::Evidence::new();
    for (i, v) in spgm.variables().iter().enumerate() {
        if rng.random_bool(p_observe) {
            ev.set(VarId(i), rng.random_range(0..v.domain));
        }
    }
    ev
}

/// Full assignment over every variable.
pub fn random_full_evidence<R: Rng + ?Sized>(spgm: &Spgm, rng: &mut R) -> crate::evidence::Evidence {
    random_evidence(spgm, rng, 1.0)
}

/// Ancestral sample from a binary tree network: `parent[i] < i` for every
/// non-root variable, `flip[i]` the probability of differing from the parent
/// and `root_one` the probability that variable 0 is 1.
fn sample_tree<R: Rng + ?Sized>(rng: &mut R, parent: &[usize], flip: &[f64], root_one: f64) -> Vec<u8> {
    let mut row = vec![0u8; parent.len()];
    row[0] = u8::from(rng.random::<f64>() < root_one);
    for i in 1..parent.len() {
        let differ = rng.random::<f64>() < flip[i];
        row[i] = row[parent[i]] ^ u8::from(differ);
    }
    row
}

/// Rows drawn from a random tree-structured distribution over binary
/// variables.
pub fn random_tree_data(n_vars: usize, rows: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let parent: Vec<usize> = (0..n_vars).map(|i| if i == 0 { 0 } else { rng.random_range(0..i) }).collect();
    let flip: Vec<f64> = (0..n_vars).map(|_| rng.random_range(0.05..0.45)).collect();
    let root_one = rng.random_range(0.2..0.8);
    let values: Vec<Vec<u8>> = (0..rows).map(|_| sample_tree(&mut rng, &parent, &flip, root_one)).collect();
    Dataset::from_rows(&values).expect("rectangular rows")
}

/// Rows from an even mixture of two tree distributions with different
/// structures and opposite biases.
pub fn two_cluster_data(n_vars: usize, rows: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chain: Vec<usize> = (0..n_vars).map(|i| i.saturating_sub(1)).collect();
    let star: Vec<usize> = vec![0; n_vars];
    let low = vec![0.05; n_vars];
    let high = vec![0.9; n_vars];
    let values: Vec<Vec<u8>> = (0..rows)
        .map(|_| {
            if rng.random::<bool>() {
                sample_tree(&mut rng, &chain, &low, 0.1)
            } else {
                sample_tree(&mut rng, &star, &high, 0.9)
            }
        })
        .collect();
    Dataset::from_rows(&values).expect("rectangular rows")
}
