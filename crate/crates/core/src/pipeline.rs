//! Search, threshold and retrain in one call.

use serde::{Deserialize, Serialize};

use crate::bilevel::{meta_search, SearchConfig, SearchOutcome};
use crate::error::Result;
use crate::harness::{split, CostLedger, Dataset, Stopwatch};
use crate::model::{Metrics, Network};
use crate::rankselect::{decide_ranks, retrain, RankDecision, RetrainConfig, RetrainOutcome};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AutoLoraConfig {
    pub search: SearchConfig,
    /// Fraction of the downstream training data used for weight updates;
    /// the rest is the validation set for the selection logits.
    pub split_ratio: f64,
    pub retrain: RetrainConfig,
}

#[derive(Clone, Debug)]
pub struct AutoLoraRun {
    pub search: SearchOutcome,
    pub decisions: Vec<RankDecision>,
    pub retrain: RetrainOutcome,
    pub train: Metrics,
    pub val: Metrics,
    pub test: Metrics,
    /// Search and retraining only.
    pub ledger: CostLedger,
}

impl AutoLoraRun {
    pub fn ranks(&self) -> Vec<usize> {
        self.decisions.iter().map(|d| d.rank).collect()
    }
}

/// Attaches selection-weighted updates to `pretrained`, searches the logits
/// on a split of `downstream`, thresholds them, and retrains the chosen ranks
/// on all of `downstream`.
pub fn run_autolora(pretrained: &Network, downstream: &Dataset, test: &Dataset, cfg: &AutoLoraConfig) -> Result<AutoLoraRun> {
    let timings = cfg.search.record_timings;
    let (d_tr, d_val) = split(downstream, cfg.split_ratio, cfg.search.seed)?;
    let net = pretrained.attach_lora(cfg.search.seed)?;

    let clock = Stopwatch::start(timings);
    let search = meta_search(net, &d_tr, &d_val, &cfg.search)?;
    let mut ledger = CostLedger::new();
    ledger.record("search", search.trajectory.grad_evals, clock.elapsed_ms());

    let decisions = decide_ranks(&search.net)?;
    let merged = d_tr.concat(&d_val)?;
    let clock = Stopwatch::start(timings);
    let retrained = retrain(&search.net, &decisions, &merged, &cfg.retrain)?;
    ledger.record("retrain", retrained.training.grad_evals, clock.elapsed_ms());

    Ok(AutoLoraRun {
        train: retrained.net.evaluate(&d_tr)?,
        val: retrained.net.evaluate(&d_val)?,
        test: retrained.net.evaluate(test)?,
        search,
        decisions,
        retrain: retrained,
        ledger,
    })
}
