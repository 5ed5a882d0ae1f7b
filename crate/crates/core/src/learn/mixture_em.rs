use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use rayon::prelude::*;

use crate::dataset::{Dataset, WeightedDataset};
use crate::error::{Error, Result};
use crate::inference::Evaluator;
use crate::mixture::{combine_log_values, SpgmMixture};
use crate::model::Spgm;
use crate::numeric::safe_ln;

use super::stats::weighted_sum;
use super::{learn_spgm, LearnConfig};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EmConfig {
    pub max_iters: usize,
    /// Stop once the relative training log-likelihood gain drops below this.
    pub tol: f64,
    pub seed: u64,
    pub learn: LearnConfig,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            max_iters: 100,
            tol: 1e-4,
            seed: 1,
            learn: LearnConfig::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct MixtureFit {
    pub mixture: SpgmMixture,
    /// Training mean log-likelihood after initialization and every iteration.
    pub trace: Vec<f64>,
    /// Validation mean log-likelihood at the same points, if a split was given.
    pub valid_trace: Vec<f64>,
    pub iterations: usize,
    /// Iteration whose model was returned (0 = initialization).
    pub selected: usize,
    /// Proposed component updates refused because they lowered the
    /// component's weighted log-likelihood.
    pub rejected: usize,
    pub reseeded: usize,
    /// Edge insertions of each returned component.
    pub insertions: Vec<usize>,
}

/// `γ[i][k]`: posterior probability of component `k` for row `i`.
pub fn responsibilities(mixture: &SpgmMixture, data: &Dataset) -> Result<Vec<Vec<f64>>> {
    let logs = mixture.component_log_values(data)?;
    Ok(posterior(&mixture.lambdas, &logs))
}

fn posterior(lambdas: &[f64], logs: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let log_lambda: Vec<f64> = lambdas.iter().map(|&l| safe_ln(l)).collect();
    let n = logs.first().map_or(0, Vec::len);
    (0..n)
        .map(|i| {
            let terms: Vec<f64> = (0..lambdas.len()).map(|k| log_lambda[k] + logs[k][i]).collect();
            let top = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if top == f64::NEG_INFINITY {
                return vec![0.0; lambdas.len()];
            }
            let scaled: Vec<f64> = terms.iter().map(|t| (t - top).exp()).collect();
            let total: f64 = scaled.iter().sum();
            scaled.iter().map(|s| s / total).collect()
        })
        .collect()
}

struct Fitted {
    spgm: Spgm,
    logs: Vec<f64>,
    insertions: usize,
}

fn fit_component(unique: &Dataset, weights: Vec<f64>, learn: &LearnConfig) -> Result<Fitted> {
    let data = WeightedDataset::new(unique, weights, learn.alpha)?;
    let learned = learn_spgm(&data, learn)?;
    let logs = Evaluator::new(&learned.spgm)?.log_values(unique)?;
    Ok(Fitted {
        spgm: learned.spgm,
        logs,
        insertions: learned.inserted.len(),
    })
}

/// Sample weights of `n` rows folded onto their distinct rows, scaled to sum
/// to `n`.
fn fold(raw: &[f64], of_row: &[usize], n_unique: usize) -> Vec<f64> {
    let total: f64 = raw.iter().sum();
    let scale = raw.len() as f64 / total;
    let mut out = vec![0.0; n_unique];
    for (&w, &u) in raw.iter().zip(of_row) {
        out[u] += w * scale;
    }
    out
}

fn dirichlet_weights(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.sample::<f64, _>(Exp1)).collect()
}

fn bootstrap_weights(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = vec![0.0; n];
    for _ in 0..n {
        counts[rng.random_range(0..n)] += 1.0;
    }
    counts
}

fn mixture_ll(counts: &[f64], lambdas: &[f64], logs: &[Vec<f64>]) -> f64 {
    weighted_sum(counts, &combine_log_values(lambdas, logs))
}

/// EM over a mixture of `k` SPGMs. Every M-step relearns each component
/// from its responsibility-weighted data and keeps the proposal only if it
/// does not lower that component's weighted log-likelihood, so the training
/// log-likelihood never decreases. With a validation split the iterate with
/// the best validation log-likelihood is returned.
pub fn em_mixture(
    train: &Dataset,
    k: usize,
    config: &EmConfig,
    valid: Option<&Dataset>,
) -> Result<MixtureFit> {
    if k == 0 {
        return Err(Error::invalid("a mixture needs at least one component"));
    }
    if train.len() < k {
        return Err(Error::invalid(format!(
            "{} rows cannot support {k} components",
            train.len()
        )));
    }
    let n = train.len();
    let compressed = train.compress();
    let unique = &compressed.unique;
    let counts = &compressed.counts;
    let learn = &config.learn;

    let init: Vec<Result<Fitted>> = (0..k)
        .into_par_iter()
        .map(|c| {
            let raw = if k == 1 {
                vec![1.0; n]
            } else {
                dirichlet_weights(config.seed.wrapping_add(c as u64), n)
            };
            fit_component(unique, fold(&raw, &compressed.of_row, unique.len()), learn)
        })
        .collect();
    let mut components = Vec::with_capacity(k);
    let mut logs = Vec::with_capacity(k);
    let mut insertions = Vec::with_capacity(k);
    for f in init {
        let f = f?;
        components.push(f.spgm);
        logs.push(f.logs);
        insertions.push(f.insertions);
    }
    let mut lambdas = vec![1.0 / k as f64; k];

    let valid_ll = |components: &[Spgm], lambdas: &[f64]| -> Result<Option<f64>> {
        let Some(v) = valid else { return Ok(None) };
        let per: Vec<Vec<f64>> = components
            .par_iter()
            .map(|c| Evaluator::new(c)?.log_values(v))
            .collect::<Result<_>>()?;
        let values = combine_log_values(lambdas, &per);
        Ok(Some(values.iter().sum::<f64>() / v.len() as f64))
    };

    let mut ll = mixture_ll(counts, &lambdas, &logs);
    let mut trace = vec![ll / n as f64];
    let mut valid_trace = Vec::new();
    let mut best: Option<(f64, usize, Vec<Spgm>, Vec<f64>, Vec<usize>)> = None;
    if let Some(v) = valid_ll(&components, &lambdas)? {
        valid_trace.push(v);
        best = Some((v, 0, components.clone(), lambdas.clone(), insertions.clone()));
    }
    let mut rejected = 0;
    let mut reseeded = 0;
    let mut iterations = 0;

    for it in 1..=config.max_iters {
        iterations = it;
        let gamma = posterior(&lambdas, &logs);
        let weights: Vec<Vec<f64>> = (0..k)
            .map(|c| gamma.iter().zip(counts).map(|(g, &m)| m * g[c]).collect())
            .collect();
        let mass: Vec<f64> = weights.iter().map(|w| w.iter().sum()).collect();
        let mut next_lambdas: Vec<f64> = mass.iter().map(|m| m / n as f64).collect();

        let proposals: Vec<Result<(Fitted, bool)>> = (0..k)
            .into_par_iter()
            .map(|c| {
                if mass[c] <= 0.0 {
                    let seed = config
                        .seed
                        .wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul((it * k + c + 1) as u64));
                    let raw = bootstrap_weights(seed, n);
                    let f = fit_component(unique, fold(&raw, &compressed.of_row, unique.len()), learn)?;
                    return Ok((f, true));
                }
                let f = fit_component(unique, weights[c].clone(), learn)?;
                Ok((f, false))
            })
            .collect();

        let mut revived = Vec::new();
        for (c, p) in proposals.into_iter().enumerate() {
            let (f, reseed) = p?;
            if reseed {
                log::warn!("component {c} lost all mass at iteration {it}; reseeded from a bootstrap sample");
                reseeded += 1;
                components[c] = f.spgm;
                logs[c] = f.logs;
                insertions[c] = f.insertions;
                revived.push(c);
                continue;
            }
            let old = weighted_sum(&weights[c], &logs[c]);
            let new = weighted_sum(&weights[c], &f.logs);
            if new >= old - 1e-12 * old.abs().max(1.0) {
                components[c] = f.spgm;
                logs[c] = f.logs;
                insertions[c] = f.insertions;
            } else {
                rejected += 1;
            }
        }
        let mut next_ll = mixture_ll(counts, &next_lambdas, &logs);
        for c in revived {
            // a reseeded component only gets mass if that does not hurt
            let mut trial: Vec<f64> = next_lambdas.iter().map(|l| l * (1.0 - 1.0 / k as f64)).collect();
            trial[c] += 1.0 / k as f64;
            let trial_ll = mixture_ll(counts, &trial, &logs);
            if trial_ll >= next_ll {
                next_lambdas = trial;
                next_ll = trial_ll;
            }
        }
        lambdas = next_lambdas;
        trace.push(next_ll / n as f64);
        if let Some(v) = valid_ll(&components, &lambdas)? {
            valid_trace.push(v);
            if best.as_ref().is_none_or(|b| v > b.0) {
                best = Some((v, it, components.clone(), lambdas.clone(), insertions.clone()));
            }
        }
        let gain = next_ll - ll;
        ll = next_ll;
        if gain <= config.tol * ll.abs() {
            break;
        }
    }

    let (selected, components, lambdas, insertions) = match best {
        Some((_, it, c, l, i)) => (it, c, l, i),
        None => (iterations, components, lambdas, insertions),
    };
    let lambdas = normalized(lambdas);
    Ok(MixtureFit {
        mixture: SpgmMixture::new(components, lambdas)?,
        trace,
        valid_trace,
        iterations,
        selected,
        rejected,
        reseeded,
        insertions,
    })
}

fn normalized(mut l: Vec<f64>) -> Vec<f64> {
    let total: f64 = l.iter().sum();
    l.iter_mut().for_each(|x| *x /= total);
    l
}
