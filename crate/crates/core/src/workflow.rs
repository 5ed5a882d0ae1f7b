//! Two-phase training run: mixture EM over learned SPGMs, then optional
//! parameter fine-tuning, with a one-line metrics report.

use serde::Serialize;

use crate::dataset::DatasetTriple;
use crate::error::Result;
use crate::inference::log_likelihood;
use crate::learn::{em_mixture, fine_tune, EmConfig, FineTuneConfig, LearnConfig, WeightMode};
use crate::mixture::SpgmMixture;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RunConfig {
    pub max_insertions: usize,
    pub mixture_size: usize,
    pub alpha: f64,
    pub seed: u64,
    pub weight_mode: WeightMode,
    pub tol: f64,
    pub max_iters: usize,
    pub fine_tune: bool,
    /// Worker threads; `None` uses every available core.
    pub threads: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            max_insertions: 60,
            mixture_size: 10,
            alpha: 1e-3,
            seed: 1,
            weight_mode: WeightMode::MiProportional,
            tol: 1e-4,
            max_iters: 100,
            fine_tune: false,
            threads: None,
        }
    }
}

impl RunConfig {
    pub fn em_config(&self) -> EmConfig {
        EmConfig {
            max_iters: self.max_iters,
            tol: self.tol,
            seed: self.seed,
            learn: LearnConfig {
                max_insertions: self.max_insertions,
                weight_mode: self.weight_mode,
                alpha: self.alpha,
            },
        }
    }

    pub fn fine_tune_config(&self) -> FineTuneConfig {
        FineTuneConfig {
            max_iters: self.max_iters,
            tol: self.tol,
            pseudo_count: self.alpha,
        }
    }
}

/// Everything reported about a run except timing, so that repeated runs
/// produce identical reports.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Metrics {
    pub dataset: String,
    pub n_vars: usize,
    pub seed: u64,
    pub mixture_size: usize,
    pub max_insertions: usize,
    pub alpha: f64,
    pub weight_mode: String,
    pub tol: f64,
    pub max_iters: usize,
    pub fine_tune: bool,
    pub em_iterations: usize,
    pub em_selected: usize,
    pub rejected_updates: usize,
    pub reseeded: usize,
    pub fine_tune_iterations: usize,
    pub insertions: Vec<usize>,
    pub train_ll: f64,
    pub valid_ll: f64,
    pub test_ll: f64,
}

impl Metrics {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("metrics serialize")
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub mixture: SpgmMixture,
    pub metrics: Metrics,
}

pub fn train(data: &DatasetTriple, config: &RunConfig) -> Result<TrainOutcome> {
    let fit = em_mixture(
        &data.train,
        config.mixture_size,
        &config.em_config(),
        Some(&data.valid),
    )?;
    log::info!(
        "mixture EM: {} iterations, selected {}, train LL {:?}",
        fit.iterations,
        fit.selected,
        fit.trace.last()
    );
    let (mixture, fine_tune_iterations) = if config.fine_tune {
        let tuned = fine_tune(
            &fit.mixture,
            &data.train,
            Some(&data.valid),
            &config.fine_tune_config(),
        )?;
        log::info!("fine-tune: {} iterations, selected {}", tuned.iterations, tuned.selected);
        (tuned.mixture, tuned.iterations)
    } else {
        (fit.mixture, 0)
    };
    let metrics = Metrics {
        dataset: data.name.clone(),
        n_vars: data.n_vars(),
        seed: config.seed,
        mixture_size: config.mixture_size,
        max_insertions: config.max_insertions,
        alpha: config.alpha,
        weight_mode: config.weight_mode.to_string(),
        tol: config.tol,
        max_iters: config.max_iters,
        fine_tune: config.fine_tune,
        em_iterations: fit.iterations,
        em_selected: fit.selected,
        rejected_updates: fit.rejected,
        reseeded: fit.reseeded,
        fine_tune_iterations,
        insertions: fit.insertions,
        train_ll: log_likelihood(&mixture, &data.train)?.mean,
        valid_ll: log_likelihood(&mixture, &data.valid)?.mean,
        test_ll: log_likelihood(&mixture, &data.test)?.mean,
    };
    Ok(TrainOutcome { mixture, metrics })
}
