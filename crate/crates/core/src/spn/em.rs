use rayon::prelude::*;

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::evidence::FREE;
use crate::inference::{sum_log_values, LogLikelihood};

use super::{Spn, SpnNode};

const ROW_CHUNK: usize = 256;

fn check_arity(spn: &Spn, data: &Dataset) -> Result<Vec<usize>> {
    let model_vars = spn.model_var_ids();
    if data.n_vars() != model_vars.len() {
        return Err(Error::Arity {
            row: 0,
            expected: model_vars.len(),
            found: data.n_vars(),
        });
    }
    Ok(model_vars)
}

pub(super) fn log_values(spn: &Spn, data: &Dataset) -> Result<Vec<f64>> {
    let model_vars = check_arity(spn, data)?;
    let logw = spn.log_params();
    let rows: Vec<&[u8]> = data.rows().collect();
    Ok(rows
        .par_chunks(ROW_CHUNK)
        .flat_map_iter(|chunk| {
            let mut ev = vec![FREE; spn.variables.len()];
            let mut vals = vec![0.0; spn.nodes.len()];
            chunk
                .iter()
                .map(|row| {
                    for (&v, &s) in model_vars.iter().zip(row.iter()) {
                        ev[v] = u32::from(s);
                    }
                    spn.forward_log(&ev, &logw, &mut vals);
                    vals[spn.root]
                })
                .collect::<Vec<_>>()
        })
        .collect())
}

/// Log-likelihood of the rows under the circuit.
pub fn spn_log_likelihood(spn: &Spn, data: &Dataset) -> Result<LogLikelihood> {
    sum_log_values(&log_values(spn, data)?)
}

/// One EM update with unit sample weights and no smoothing.
pub fn spn_em_step(spn: &Spn, data: &Dataset) -> Result<Spn> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let weights = vec![1.0; data.len()];
    Ok(em_step_weighted(spn, data, &weights, 0.0)?.0)
}

/// One EM update with per-row weights. Expected counts of every sum edge are
/// pooled over the sums sharing a parameter vector; `pseudo_count` is added
/// to each pooled count before normalizing. Returns the updated circuit and
/// the weighted log-likelihood of the input circuit.
pub fn em_step_weighted(
    spn: &Spn,
    data: &Dataset,
    weights: &[f64],
    pseudo_count: f64,
) -> Result<(Spn, f64)> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if weights.len() != data.len() {
        return Err(Error::invalid("one weight per row is required"));
    }
    let model_vars = check_arity(spn, data)?;
    let logw = spn.log_params();

    let mut edge_offset = vec![usize::MAX; spn.nodes.len()];
    let mut edges = 0;
    for (i, node) in spn.nodes.iter().enumerate() {
        if let SpnNode::Sum { children, .. } = node {
            edge_offset[i] = edges;
            edges += children.len();
        }
    }

    let rows: Vec<(usize, &[u8])> = data.rows().enumerate().collect();
    let partials: Vec<Result<(Vec<f64>, f64)>> = rows
        .par_chunks(ROW_CHUNK)
        .map(|chunk| {
            let mut ev = vec![FREE; spn.variables.len()];
            let mut vals = vec![0.0; spn.nodes.len()];
            let mut der = vec![0.0; spn.nodes.len()];
            let mut beta = vec![0.0; edges];
            let mut ll = 0.0;
            for &(row, x) in chunk {
                let w = weights[row];
                for (&v, &s) in model_vars.iter().zip(x.iter()) {
                    ev[v] = u32::from(s);
                }
                spn.forward_log(&ev, &logw, &mut vals);
                let root = vals[spn.root];
                if root == f64::NEG_INFINITY {
                    return Err(Error::ZeroProbability { row });
                }
                if w == 0.0 {
                    continue;
                }
                ll += w * root;
                spn.backward_log(&logw, &vals, &mut der);
                for (i, node) in spn.nodes.iter().enumerate() {
                    if let SpnNode::Sum { children, param } = node {
                        let d = der[i];
                        if d == f64::NEG_INFINITY {
                            continue;
                        }
                        let lw = &logw[*param];
                        let base = edge_offset[i];
                        for (k, &c) in children.iter().enumerate() {
                            let t = lw[k] + d + vals[c] - root;
                            if t > f64::NEG_INFINITY {
                                beta[base + k] += w * t.exp();
                            }
                        }
                    }
                }
            }
            Ok((beta, ll))
        })
        .collect();

    let mut beta = vec![0.0; edges];
    let mut ll = 0.0;
    for part in partials {
        let (b, l) = part?;
        for (acc, x) in beta.iter_mut().zip(&b) {
            *acc += x;
        }
        ll += l;
    }

    let mut out = spn.clone();
    for (p, sums) in spn.sums_of_param().iter().enumerate() {
        if sums.is_empty() {
            continue;
        }
        let k = spn.params[p].values.len();
        let mut pooled = vec![pseudo_count; k];
        for &s in sums {
            for (slot, acc) in pooled.iter_mut().enumerate() {
                *acc += beta[edge_offset[s] + slot];
            }
        }
        let total: f64 = pooled.iter().sum();
        if total > 0.0 && total.is_finite() {
            out.params[p].values = pooled.into_iter().map(|b| b / total).collect();
        }
    }
    Ok((out, ll))
}

#[cfg(test)]
mod tests {
    use super::super::tests::coin;
    use super::super::{ParamSource, ParamVector, Spn, SpnNode};
    use super::*;
    use crate::model::{VarId, VarKind, Variable};

    #[test]
    fn single_sum_em_gives_frequencies() {
        let spn = coin([0.5, 0.5]);
        let data = Dataset::from_rows(&[vec![0], vec![0], vec![1]]).unwrap();
        let next = spn_em_step(&spn, &data).unwrap();
        let w = &next.params()[0].values;
        assert!((w[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((w[1] - 1.0 / 3.0).abs() < 1e-15);
        let again = spn_em_step(&next, &data).unwrap();
        for (a, b) in again.params()[0].values.iter().zip(w) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn shared_weights_pool_counts() {
        // Two variables with one shared weight vector: counts pool over both.
        let variables: Vec<Variable> = ["A", "B"]
            .iter()
            .map(|n| Variable {
                name: n.to_string(),
                kind: VarKind::Model,
                domain: 2,
            })
            .collect();
        let nodes = vec![
            SpnNode::Indicator { var: VarId(0), state: 0 },
            SpnNode::Indicator { var: VarId(0), state: 1 },
            SpnNode::Indicator { var: VarId(1), state: 0 },
            SpnNode::Indicator { var: VarId(1), state: 1 },
            SpnNode::Sum { children: vec![0, 1], param: 0 },
            SpnNode::Sum { children: vec![2, 3], param: 0 },
            SpnNode::Product { children: vec![4, 5] },
        ];
        let params = vec![ParamVector {
            component: 0,
            source: ParamSource::Free,
            values: vec![0.5, 0.5],
        }];
        let spn = Spn::new(variables, nodes, 6, params).unwrap();
        let data = Dataset::from_rows(&[vec![0, 0], vec![0, 1], vec![0, 0]]).unwrap();
        let next = spn_em_step(&spn, &data).unwrap();
        // five zeros and one one across both variables
        let w = &next.params()[0].values;
        assert!((w[0] - 5.0 / 6.0).abs() < 1e-15);
        assert!((w[1] - 1.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn zero_probability_row_is_reported() {
        let spn = coin([1.0, 0.0]);
        let data = Dataset::from_rows(&[vec![0], vec![1]]).unwrap();
        assert!(matches!(
            spn_em_step(&spn, &data),
            Err(Error::ZeroProbability { row: 1 })
        ));
        let empty = Dataset::new(1, vec![]).unwrap();
        assert!(matches!(spn_em_step(&spn, &empty), Err(Error::EmptyDataset)));
    }
}
