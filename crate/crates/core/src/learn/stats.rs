use std::collections::HashMap;

use rayon::prelude::*;

use crate::dataset::{Dataset, WeightedDataset};
use crate::error::{Error, Result};
use crate::inference::Evaluator;
use crate::model::{Cpt, NodeId, Spgm, SpgmBuilder};

/// Distinct rows with summed weights; zero-weight rows are dropped.
#[derive(Clone, Debug)]
pub(crate) struct Compact {
    pub data: Dataset,
    pub weights: Vec<f64>,
    pub total: f64,
}

impl Compact {
    pub fn new(data: &WeightedDataset) -> Result<Self> {
        Self::from_rows(data.rows(), data.weights(), data.n_vars())
    }

    pub fn from_rows<'a>(
        rows: impl Iterator<Item = &'a [u8]>,
        weights: &[f64],
        n_vars: usize,
    ) -> Result<Self> {
        let mut index: HashMap<&[u8], usize> = HashMap::new();
        let mut values = Vec::new();
        let mut acc: Vec<f64> = Vec::new();
        for (row, &w) in rows.zip(weights) {
            if w <= 0.0 {
                continue;
            }
            let id = *index.entry(row).or_insert_with(|| {
                values.extend_from_slice(row);
                acc.push(0.0);
                acc.len() - 1
            });
            acc[id] += w;
        }
        if acc.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let total = acc.iter().sum();
        Ok(Compact {
            data: Dataset::new(n_vars, values)?,
            weights: acc,
            total,
        })
    }

    /// `Σ w_i ln P(x_i)`.
    pub fn log_likelihood(&self, eval: &Evaluator) -> Result<f64> {
        Ok(weighted_sum(&self.weights, &eval.log_values(&self.data)?))
    }
}

pub(crate) fn weighted_sum(weights: &[f64], logs: &[f64]) -> f64 {
    weights
        .iter()
        .zip(logs)
        .map(|(&w, &l)| if w == 0.0 { 0.0 } else { w * l })
        .sum()
}

/// Pairwise mutual information with the smoothed weighted statistics it was
/// computed from.
#[derive(Clone, Debug)]
pub struct MutualInfoMatrix {
    domains: Vec<usize>,
    alpha: f64,
    total: f64,
    values: Vec<f64>,
    singles: Vec<Vec<f64>>,
    /// Raw weighted joint counts for `s < t`, row-major `d_s × d_t`.
    joints: Vec<Vec<f64>>,
}

fn pair_index(n: usize, s: usize, t: usize) -> usize {
    debug_assert!(s < t && t < n);
    s * n - s * (s + 1) / 2 + (t - s - 1)
}

impl MutualInfoMatrix {
    pub(crate) fn compute(
        rows: &Dataset,
        weights: &[f64],
        domains: &[usize],
        alpha: f64,
    ) -> Result<Self> {
        let n = rows.n_vars();
        if rows.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::EmptyDataset);
        }
        let mut singles: Vec<Vec<f64>> = domains.iter().map(|&d| vec![0.0; d]).collect();
        for (row, &w) in rows.rows().zip(weights) {
            for (s, &x) in row.iter().enumerate() {
                singles[s][x as usize] += w;
            }
        }
        let pairs: Vec<(usize, usize)> = (0..n)
            .flat_map(|s| (s + 1..n).map(move |t| (s, t)))
            .collect();
        let joints: Vec<Vec<f64>> = pairs
            .par_iter()
            .map(|&(s, t)| {
                let dt = domains[t];
                let mut table = vec![0.0; domains[s] * dt];
                for (row, &w) in rows.rows().zip(weights) {
                    table[row[s] as usize * dt + row[t] as usize] += w;
                }
                table
            })
            .collect();
        let mut mi = MutualInfoMatrix {
            domains: domains.to_vec(),
            alpha,
            total,
            values: vec![0.0; n * n],
            singles,
            joints,
        };
        for &(s, t) in &pairs {
            let v = mi.pair_information(s, t);
            mi.values[s * n + t] = v;
            mi.values[t * n + s] = v;
        }
        Ok(mi)
    }

    fn pair_information(&self, s: usize, t: usize) -> f64 {
        let joint = self.joint(s, t);
        let (ds, dt) = (self.domains[s], self.domains[t]);
        let ps: Vec<f64> = (0..ds).map(|j| joint[j * dt..(j + 1) * dt].iter().sum()).collect();
        let pt: Vec<f64> = (0..dt).map(|k| (0..ds).map(|j| joint[j * dt + k]).sum()).collect();
        let mut total = 0.0;
        for j in 0..ds {
            for k in 0..dt {
                let p = joint[j * dt + k];
                if p > 0.0 {
                    total += p * (p / (ps[j] * pt[k])).ln();
                }
            }
        }
        total.max(0.0)
    }

    pub fn n_vars(&self) -> usize {
        self.domains.len()
    }

    pub fn domains(&self) -> &[usize] {
        &self.domains
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// `𝕀(s, t)`; zero on the diagonal.
    pub fn get(&self, s: usize, t: usize) -> f64 {
        self.values[s * self.n_vars() + t]
    }

    fn raw_joint(&self, s: usize, t: usize) -> (Vec<f64>, usize, usize) {
        let n = self.n_vars();
        let (ds, dt) = (self.domains[s], self.domains[t]);
        if s < t {
            (self.joints[pair_index(n, s, t)].clone(), ds, dt)
        } else {
            let src = &self.joints[pair_index(n, t, s)];
            let mut out = vec![0.0; ds * dt];
            for j in 0..ds {
                for k in 0..dt {
                    out[j * dt + k] = src[k * ds + j];
                }
            }
            (out, ds, dt)
        }
    }

    /// Smoothed joint `P̄(s = j, t = k)`, row-major over `s`.
    pub fn joint(&self, s: usize, t: usize) -> Vec<f64> {
        let (raw, ds, dt) = self.raw_joint(s, t);
        let denom = self.total + (ds * dt) as f64 * self.alpha;
        raw.into_iter().map(|c| (c + self.alpha) / denom).collect()
    }

    /// Smoothed marginal `P̄(s)`.
    pub fn marginal(&self, s: usize) -> Vec<f64> {
        let d = self.domains[s];
        let denom = self.total + d as f64 * self.alpha;
        self.singles[s].iter().map(|c| (c + self.alpha) / denom).collect()
    }

    /// Smoothed conditional `P̄(child | parent)`; rows without mass are uniform.
    pub fn conditional(&self, parent: usize, child: usize) -> Cpt {
        let (raw, dp, dc) = self.raw_joint(parent, child);
        let mut values = Vec::with_capacity(dp * dc);
        for j in 0..dp {
            let row = &raw[j * dc..(j + 1) * dc];
            let denom: f64 = row.iter().sum::<f64>() + dc as f64 * self.alpha;
            if denom > 0.0 {
                values.extend(row.iter().map(|c| (c + self.alpha) / denom));
            } else {
                values.extend(std::iter::repeat_n(1.0 / dc as f64, dc));
            }
        }
        Cpt::new(dp, dc, values).expect("shape matches")
    }
}

/// Per-column domain sizes: at least 2, otherwise one more than the largest
/// value seen.
pub(crate) fn domains_of_rows<'a>(rows: impl Iterator<Item = &'a [u8]>, n_vars: usize) -> Vec<usize> {
    let mut d = vec![2usize; n_vars];
    for row in rows {
        for (s, &x) in row.iter().enumerate() {
            d[s] = d[s].max(x as usize + 1);
        }
    }
    d
}

/// Mutual information of every variable pair under the weighted empirical
/// distribution, smoothed with add-`data.alpha` on joint counts.
pub fn mutual_information(data: &WeightedDataset) -> Result<MutualInfoMatrix> {
    let domains = domains_of_rows(data.rows(), data.n_vars());
    let compact = Compact::new(data)?;
    MutualInfoMatrix::compute(&compact.data, &compact.weights, &domains, data.alpha)
}

/// Undirected spanning tree rooted at variable 0.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RootedTree {
    pub parent: Vec<Option<usize>>,
    pub children: Vec<Vec<usize>>,
    pub depth: Vec<usize>,
}

impl RootedTree {
    /// Orients `edges` away from variable 0; children are kept in id order.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        if edges.len() + 1 != n {
            return Err(Error::invalid("a spanning tree needs n - 1 edges"));
        }
        let mut adj = vec![Vec::new(); n];
        for &(a, b) in edges {
            if a >= n || b >= n || a == b {
                return Err(Error::invalid(format!("invalid tree edge ({a}, {b})")));
            }
            adj[a].push(b);
            adj[b].push(a);
        }
        for a in &mut adj {
            a.sort_unstable();
        }
        let mut parent = vec![None; n];
        let mut depth = vec![0; n];
        let mut seen = vec![false; n];
        let mut children = vec![Vec::new(); n];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(x) = stack.pop() {
            for &y in &adj[x] {
                if !seen[y] {
                    seen[y] = true;
                    parent[y] = Some(x);
                    depth[y] = depth[x] + 1;
                    children[x].push(y);
                    stack.push(y);
                }
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::invalid("edges do not span all variables"));
        }
        Ok(RootedTree {
            parent,
            children,
            depth,
        })
    }

    pub fn len(&self) -> usize {
        self.parent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parent.is_empty()
    }

    /// Undirected edges as `(min, max)`, sorted.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut e: Vec<(usize, usize)> = self
            .parent
            .iter()
            .enumerate()
            .filter_map(|(c, p)| p.map(|p| (p.min(c), p.max(c))))
            .collect();
        e.sort_unstable();
        e
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.parent[a] == Some(b) || self.parent[b] == Some(a)
    }

    /// Recovers the tree encoded by a model built with [`tree_spgm`].
    pub fn of_spgm(spgm: &Spgm) -> Result<Self> {
        let n = spgm.model_variables().len();
        let var_of = |id: NodeId| spgm.nodes()[id.0].kind.var().map(|v| v.0);
        let mut edges = Vec::with_capacity(n.saturating_sub(1));
        for &(p, c) in spgm.pairwise().keys() {
            match (var_of(p), var_of(c)) {
                (Some(a), Some(b)) => edges.push((a.min(b), a.max(b))),
                _ => return Err(Error::invalid("conditional table between non-Vnodes")),
            }
        }
        edges.sort_unstable();
        edges.dedup();
        RootedTree::from_edges(n, &edges)
    }
}

/// Kruskal's maximum spanning tree. Ties prefer the lexicographically
/// smaller `(min, max)` pair.
pub fn max_spanning_tree(mi: &MutualInfoMatrix) -> Vec<(usize, usize)> {
    let n = mi.n_vars();
    let mut edges: Vec<(usize, usize)> = (0..n)
        .flat_map(|s| (s + 1..n).map(move |t| (s, t)))
        .collect();
    edges.sort_by(|a, b| {
        mi.get(b.0, b.1)
            .total_cmp(&mi.get(a.0, a.1))
            .then_with(|| a.cmp(b))
    });
    let mut uf: Vec<usize> = (0..n).collect();
    fn find(uf: &mut [usize], mut x: usize) -> usize {
        while uf[x] != x {
            uf[x] = uf[uf[x]];
            x = uf[x];
        }
        x
    }
    let mut tree = Vec::with_capacity(n.saturating_sub(1));
    for (s, t) in edges {
        let (a, b) = (find(&mut uf, s), find(&mut uf, t));
        if a != b {
            uf[a.max(b)] = a.min(b);
            tree.push((s, t));
            if tree.len() + 1 == n {
                break;
            }
        }
    }
    tree.sort_unstable();
    tree
}

/// Model of a rooted tree with the smoothed empirical tables of `mi`:
/// one Vnode per variable, a product wherever a variable has several
/// children.
pub fn tree_spgm(mi: &MutualInfoMatrix, tree: &RootedTree) -> Result<Spgm> {
    let mut b = SpgmBuilder::new();
    for (i, &d) in mi.domains().iter().enumerate() {
        b.model_var(format!("X{i}"), d);
    }
    let mut vnode = vec![NodeId(usize::MAX); tree.len()];
    // children before parents
    let mut order = Vec::with_capacity(tree.len());
    let mut stack = vec![0usize];
    while let Some(x) = stack.pop() {
        order.push(x);
        stack.extend(tree.children[x].iter().copied());
    }
    for &x in order.iter().rev() {
        let kids: Vec<NodeId> = tree.children[x].iter().map(|&c| vnode[c]).collect();
        let child = match kids.len() {
            0 => None,
            1 => Some(kids[0]),
            _ => Some(b.product(kids)),
        };
        vnode[x] = b.vnode(crate::model::VarId(x), child);
    }
    for (c, p) in tree.parent.iter().enumerate() {
        if let Some(p) = *p {
            b.cpt_table(vnode[p], vnode[c], mi.conditional(p, c));
        }
    }
    b.unary(vnode[0], mi.marginal(0));
    b.build_valid(vnode[0])
}

/// Chow-Liu tree of the weighted data, rooted at variable 0.
pub fn chow_liu(data: &WeightedDataset) -> Result<Spgm> {
    if data.n_vars() < 2 {
        return Err(Error::invalid("a tree needs at least two variables"));
    }
    let mi = mutual_information(data)?;
    let tree = RootedTree::from_edges(mi.n_vars(), &max_spanning_tree(&mi))?;
    tree_spgm(&mi, &tree)
}
