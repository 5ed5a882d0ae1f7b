use crate::dataset::Dataset;
use crate::error::Result;
use crate::inference::Density;
use crate::mixture::SpgmMixture;
use crate::spn::{apply_params, compile_mixture, em_step_weighted, ParamSource, Spn};

use super::stats::weighted_sum;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FineTuneConfig {
    pub max_iters: usize,
    /// Stop once the relative validation (or training) gain drops below this.
    pub tol: f64,
    /// Added to every pooled expected count before normalizing.
    pub pseudo_count: f64,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        FineTuneConfig {
            max_iters: 30,
            tol: 1e-4,
            pseudo_count: 0.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FineTuned {
    pub mixture: SpgmMixture,
    /// Training mean log-likelihood of every iterate, starting with the input.
    pub trace: Vec<f64>,
    pub valid_trace: Vec<f64>,
    pub iterations: usize,
    pub selected: usize,
}

fn mean_ll(spn: &Spn, data: &Dataset) -> Result<f64> {
    let logs = spn.log_densities(data)?;
    Ok(logs.iter().sum::<f64>() / data.len() as f64)
}

/// Maps the parameters of a circuit compiled by `compile_mixture` back onto
/// the mixture it was compiled from.
pub(crate) fn mixture_from_spn(spn: &Spn, template: &SpgmMixture) -> Result<SpgmMixture> {
    let components = template
        .components
        .iter()
        .enumerate()
        .map(|(k, c)| apply_params(spn, c, k))
        .collect::<Result<Vec<_>>>()?;
    let lambdas = spn
        .params()
        .iter()
        .find(|p| p.source == ParamSource::Mixture)
        .map_or_else(|| template.lambdas.clone(), |p| p.values.clone());
    SpgmMixture::new(components, lambdas)
}

/// Parameter-only EM on the compiled mixture, updating the mixing weights
/// through the top sum and every CPT and sum weight through its share
/// group. With a validation split the best iterate on it is returned.
pub fn fine_tune(
    mixture: &SpgmMixture,
    train: &Dataset,
    valid: Option<&Dataset>,
    config: &FineTuneConfig,
) -> Result<FineTuned> {
    mixture.check()?;
    let compressed = train.compress();
    let n = train.len() as f64;
    let mut current = compile_mixture(&mixture.components, &mixture.lambdas)?;
    let mut trace = Vec::new();
    let mut valid_trace = Vec::new();
    let mut best: Option<(f64, usize, Spn)> = None;
    if let Some(v) = valid {
        let s = mean_ll(&current, v)?;
        valid_trace.push(s);
        best = Some((s, 0, current.clone()));
    }
    let mut iterations = 0;
    for it in 1..=config.max_iters {
        let (next, ll) = em_step_weighted(
            &current,
            &compressed.unique,
            &compressed.counts,
            config.pseudo_count,
        )?;
        trace.push(ll / n);
        iterations = it;
        current = next;
        let stop = match (valid, best.as_mut()) {
            (Some(v), Some(b)) => {
                let s = mean_ll(&current, v)?;
                valid_trace.push(s);
                let prev = b.0;
                if s > prev {
                    *b = (s, it, current.clone());
                }
                s - prev <= config.tol * prev.abs()
            }
            _ => {
                let t = trace.len();
                t >= 2 && trace[t - 1] - trace[t - 2] <= config.tol * trace[t - 1].abs()
            }
        };
        if stop {
            break;
        }
    }
    let logs = current.log_densities(&compressed.unique)?;
    trace.push(weighted_sum(&compressed.counts, &logs) / n);
    let (selected, spn) = match best {
        Some((_, it, spn)) => (it, spn),
        None => (iterations, current),
    };
    Ok(FineTuned {
        mixture: mixture_from_spn(&spn, mixture)?,
        trace,
        valid_trace,
        iterations,
        selected,
    })
}
