//! Brute-force helpers shared by the integration suites.

#![allow(dead_code)]

use std::collections::BTreeMap;

use spgm::oracle::{mixture_eval, DEFAULT_SUBTREE_LIMIT};
use spgm::{Dataset, Evidence, Spgm, VarId};

/// Every assignment of the listed variables, as evidence.
pub fn assignments(spgm: &Spgm, vars: &[VarId]) -> Vec<Evidence> {
    let mut out = vec![Evidence::new()];
    for &v in vars {
        let d = spgm.variables()[v.0].domain;
        out = out
            .into_iter()
            .flat_map(|ev| (0..d).map(move |s| ev.clone().with(v, s)))
            .collect();
    }
    out
}

fn joint(spgm: &Spgm, base: &Evidence, pairs: &[(VarId, usize)]) -> f64 {
    let mut ev = base.clone();
    for &(v, s) in pairs {
        ev.set(v, s);
    }
    mixture_eval(spgm, &ev, DEFAULT_SUBTREE_LIMIT).expect("enumerable model")
}

/// Largest deviation of `P(a, b | c, z)` from `P(a | c, z) P(b | c, z)`
/// over all states with positive conditioning mass, from the subtree
/// mixture.
pub fn factorization_gap(spgm: &Spgm, a: VarId, b: VarId, given: Option<VarId>, context: &Evidence) -> f64 {
    let dom = |v: VarId| spgm.variables()[v.0].domain;
    let given_states: Vec<Option<usize>> = match given {
        Some(c) => (0..dom(c)).map(Some).collect(),
        None => vec![None],
    };
    let mut gap: f64 = 0.0;
    for cs in given_states {
        let mut base = context.clone();
        if let (Some(c), Some(s)) = (given, cs) {
            base.set(c, s);
        }
        let mass = joint(spgm, &base, &[]);
        if mass <= 1e-12 {
            continue;
        }
        for x in 0..dom(a) {
            let pa = joint(spgm, &base, &[(a, x)]) / mass;
            for y in 0..dom(b) {
                let pb = joint(spgm, &base, &[(b, y)]) / mass;
                let pab = joint(spgm, &base, &[(a, x), (b, y)]) / mass;
                gap = gap.max((pab - pa * pb).abs());
            }
        }
    }
    gap
}

/// All labeled spanning trees on `n` vertices, decoded from Prüfer codes.
pub fn spanning_trees(n: usize) -> Vec<Vec<(usize, usize)>> {
    assert!(n >= 2);
    if n == 2 {
        return vec![vec![(0, 1)]];
    }
    let mut codes: Vec<Vec<usize>> = vec![vec![]];
    for _ in 0..n - 2 {
        codes = codes
            .into_iter()
            .flat_map(|c| {
                (0..n).map(move |x| {
                    let mut c = c.clone();
                    c.push(x);
                    c
                })
            })
            .collect();
    }
    codes
        .iter()
        .map(|code| {
            let mut degree = vec![1usize; n];
            for &x in code {
                degree[x] += 1;
            }
            let mut edges = Vec::with_capacity(n - 1);
            for &x in code {
                let leaf = (0..n).find(|&i| degree[i] == 1).unwrap();
                edges.push((leaf, x));
                degree[leaf] -= 1;
                degree[x] -= 1;
            }
            let rest: Vec<usize> = (0..n).filter(|&i| degree[i] == 1).collect();
            edges.push((rest[0], rest[1]));
            edges
        })
        .collect()
}

/// Mean log-likelihood of the maximum-likelihood tree network with the
/// given undirected edges, computed from raw counts.
pub fn ml_tree_mean_ll(data: &Dataset, edges: &[(usize, usize)]) -> f64 {
    let n = data.n_vars();
    let mut adj = vec![Vec::new(); n];
    for &(a, b) in edges {
        adj[a].push(b);
        adj[b].push(a);
    }
    let mut parent = vec![usize::MAX; n];
    let mut seen = vec![false; n];
    let mut stack = vec![0];
    seen[0] = true;
    while let Some(v) = stack.pop() {
        for &w in &adj[v] {
            if !seen[w] {
                seen[w] = true;
                parent[w] = v;
                stack.push(w);
            }
        }
    }
    let rows = data.len() as f64;
    let mut total = 0.0;
    let mut singles: BTreeMap<u8, f64> = BTreeMap::new();
    for r in data.rows() {
        *singles.entry(r[0]).or_default() += 1.0;
    }
    total += singles.values().map(|&c| c * (c / rows).ln()).sum::<f64>();
    for v in 1..n {
        let p = parent[v];
        let mut pair: BTreeMap<(u8, u8), f64> = BTreeMap::new();
        let mut par: BTreeMap<u8, f64> = BTreeMap::new();
        for r in data.rows() {
            *pair.entry((r[p], r[v])).or_default() += 1.0;
            *par.entry(r[p]).or_default() += 1.0;
        }
        total += pair.iter().map(|(&(x, _), &c)| c * (c / par[&x]).ln()).sum::<f64>();
    }
    total / rows
}
