//! Structure and parameter learning: weighted Chow-Liu trees, edge insertion
//! into shared-structure tree mixtures, EM over mixtures of SPGMs and
//! parameter fine-tuning on the compiled circuit.

mod fine_tune;
mod insert;
mod mixture_em;
mod stats;

use std::fmt;
use std::str::FromStr;

use crate::dataset::WeightedDataset;
use crate::error::{Error, Result};
use crate::inference::Evaluator;
use crate::model::Spgm;

pub use fine_tune::{fine_tune, FineTuneConfig, FineTuned};
pub use mixture_em::{em_mixture, responsibilities, EmConfig, MixtureFit};
pub use stats::{
    chow_liu, max_spanning_tree, mutual_information, tree_spgm, MutualInfoMatrix, RootedTree,
};

pub(crate) use stats::Compact;

/// How the weights of an apex sum are set after an insertion.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum WeightMode {
    /// Optimal weights for the data with everything else fixed.
    Em,
    /// Proportional to `alpha` plus the mutual information of each branch's
    /// defining edge.
    #[default]
    MiProportional,
}

impl FromStr for WeightMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "em" => Ok(WeightMode::Em),
            "mi-proportional" | "mi" => Ok(WeightMode::MiProportional),
            other => Err(Error::invalid(format!(
                "unknown weight mode `{other}` (expected `em` or `mi-proportional`)"
            ))),
        }
    }
}

impl fmt::Display for WeightMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WeightMode::Em => "em",
            WeightMode::MiProportional => "mi-proportional",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LearnConfig {
    pub max_insertions: usize,
    pub weight_mode: WeightMode,
    pub alpha: f64,
}

impl Default for LearnConfig {
    fn default() -> Self {
        LearnConfig {
            max_insertions: 60,
            weight_mode: WeightMode::MiProportional,
            alpha: 1e-3,
        }
    }
}

/// Insertions stop once the mean log-likelihood gained over this many
/// insertions falls below [`MIN_WINDOW_GAIN`].
pub const STOP_WINDOW: usize = 5;
pub const MIN_WINDOW_GAIN: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct LearnedSpgm {
    pub spgm: Spgm,
    pub base_tree: Spgm,
    /// Weighted mean log-likelihood of the tree, then after every insertion.
    pub trace: Vec<f64>,
    pub inserted: Vec<(usize, usize)>,
}

/// Adds the maximum spanning tree containing `edge` to a model grown from
/// `base_tree`, sharing every part the two trees have in common.
pub fn insert_edge(
    spgm: &Spgm,
    base_tree: &Spgm,
    edge: (usize, usize),
    mi: &MutualInfoMatrix,
    weight_mode: WeightMode,
    data: &WeightedDataset,
) -> Result<Spgm> {
    let tree = RootedTree::of_spgm(base_tree)?;
    let compact = Compact::new(data)?;
    Ok(insert::insert(spgm, &tree, edge, mi, weight_mode, &compact)?.unwrap_or_else(|| spgm.clone()))
}

/// Chow-Liu initialization followed by edge insertions in order of
/// decreasing mutual information.
pub fn learn_spgm(data: &WeightedDataset, config: &LearnConfig) -> Result<LearnedSpgm> {
    if data.n_vars() < 2 {
        return Err(Error::invalid("learning needs at least two variables"));
    }
    if !(config.alpha.is_finite() && config.alpha >= 0.0) {
        return Err(Error::invalid("alpha must be finite and non-negative"));
    }
    let domains = stats::domains_of_rows(data.rows(), data.n_vars());
    let compact = Compact::new(data)?;
    let mi = MutualInfoMatrix::compute(&compact.data, &compact.weights, &domains, config.alpha)?;
    let tree = RootedTree::from_edges(mi.n_vars(), &max_spanning_tree(&mi))?;
    let base_tree = tree_spgm(&mi, &tree)?;
    let mean_ll = |s: &Spgm| -> Result<f64> {
        Ok(compact.log_likelihood(&Evaluator::new(s)?)? / compact.total)
    };

    let mut spgm = base_tree.clone();
    let mut trace = vec![mean_ll(&spgm)?];
    let mut inserted = Vec::new();
    let n = mi.n_vars();
    let mut queue: Vec<(usize, usize)> = (0..n)
        .flat_map(|s| (s + 1..n).map(move |t| (s, t)))
        .filter(|&(s, t)| !tree.has_edge(s, t))
        .collect();
    queue.sort_by(|a, b| mi.get(b.0, b.1).total_cmp(&mi.get(a.0, a.1)).then_with(|| a.cmp(b)));

    for edge in queue {
        if inserted.len() >= config.max_insertions {
            break;
        }
        let Some(next) = insert::insert(&spgm, &tree, edge, &mi, config.weight_mode, &compact)? else {
            continue;
        };
        spgm = next;
        trace.push(mean_ll(&spgm)?);
        inserted.push(edge);
        let t = trace.len();
        if t > STOP_WINDOW && trace[t - 1] - trace[t - 1 - STOP_WINDOW] < MIN_WINDOW_GAIN {
            break;
        }
    }
    Ok(LearnedSpgm {
        spgm,
        base_tree,
        trace,
        inserted,
    })
}

#[cfg(test)]
mod tests;
