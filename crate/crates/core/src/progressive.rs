//! Progressive training: grow the source sample batch by batch and stop once
//! the target validation risk stops improving.

use crate::error::{Error, Result};
use crate::estimators::{fit_hps, HpsSolution, SearchConfig};
use crate::model::Dataset;
use crate::rng::stream;
use crate::scalar::Scalar;
use rand::seq::SliceRandom;
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    RiskIncrease,
    ThresholdReached,
    Exhausted,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProgressiveConfig<T: Scalar> {
    pub batches: usize,
    /// Stop once the validation risk is at or below this value.
    pub threshold: Option<T>,
    /// Consecutive stage-over-stage increases tolerated before stopping.
    pub patience: usize,
    pub search: SearchConfig,
}

impl<T: Scalar> ProgressiveConfig<T> {
    pub fn new(batches: usize) -> Self {
        ProgressiveConfig { batches, threshold: None, patience: 1, search: SearchConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProgressiveTrace<T: Scalar> {
    /// Cumulative source sizes of the visited stages.
    pub stage_sizes: Vec<usize>,
    /// Validation mean squared error at each visited stage.
    pub stage_risks: Vec<T>,
    /// Fitted output-layer ratio at each visited stage.
    pub stage_ratios: Vec<T>,
    /// Number of stages run.
    pub stop_stage: usize,
    /// Index of the stage whose estimator is returned.
    pub best_stage: usize,
    pub stop_reason: StopReason,
}

impl<T: Scalar> ProgressiveTrace<T> {
    /// Source size at the stage where training stopped.
    pub fn stop_size(&self) -> usize {
        self.stage_sizes[self.stop_stage - 1]
    }
}

/// Runs progressive HPS. Source rows are shuffled with `seed` and split into
/// `cfg.batches` nearly equal batches; stage `i` fits HPS on the first `i`
/// batches plus all of `d2_train`. The estimator of the best visited stage is returned.
pub fn progressive_hps<T: Scalar>(
    d1: &Dataset<T>,
    d2_train: &Dataset<T>,
    d2_val: &Dataset<T>,
    cfg: &ProgressiveConfig<T>,
    seed: u64,
) -> Result<(ProgressiveTrace<T>, HpsSolution<T>)> {
    let n1 = d1.n();
    if cfg.batches == 0 || n1 == 0 {
        return Err(Error::InvalidInput("progressive training needs at least one batch and one source row".into()));
    }
    if cfg.patience == 0 {
        return Err(Error::InvalidInput("patience must be at least 1".into()));
    }
    let batches = cfg.batches.min(n1);
    let mut order: Vec<usize> = (0..n1).collect();
    order.shuffle(&mut stream(seed, u64::MAX));

    let mut sizes = Vec::new();
    let mut risks = Vec::new();
    let mut ratios = Vec::new();
    let mut best: Option<(usize, HpsSolution<T>)> = None;
    let mut rises = 0;
    let mut reason = StopReason::Exhausted;
    for stage in 1..=batches {
        let size = stage * n1 / batches;
        let source = d1.select_rows(&order[..size]);
        let sol = fit_hps(&source, d2_train, &cfg.search)?;
        let risk = d2_val.mse(&sol.beta_hat);
        let increased = risks.last().is_some_and(|prev: &T| risk > *prev);
        sizes.push(size);
        risks.push(risk);
        ratios.push(sol.a_hat);
        if best.as_ref().is_none_or(|(i, _)| risk < risks[*i]) {
            best = Some((stage - 1, sol));
        }
        rises = if increased { rises + 1 } else { 0 };
        if rises >= cfg.patience {
            reason = StopReason::RiskIncrease;
            break;
        }
        if cfg.threshold.is_some_and(|tau| risk <= tau) {
            reason = StopReason::ThresholdReached;
            break;
        }
    }
    let (best_stage, solution) = best.expect("at least one stage runs");
    let stop_stage = sizes.len();
    Ok((ProgressiveTrace { stage_sizes: sizes, stage_risks: risks, stage_ratios: ratios, stop_stage, best_stage, stop_reason: reason }, solution))
}
