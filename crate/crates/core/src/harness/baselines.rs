//! Uniform-rank grid search and full finetuning.

use serde::{Deserialize, Serialize};

use super::cost::{CostLedger, Stopwatch};
use super::dataset::Dataset;
use crate::error::{Error, Result};
use crate::model::{Metrics, Network, Trainable};
use crate::train::{train, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum TrialStatus {
    Ok { train_loss: f64, test: Metrics },
    Failed { message: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridTrial {
    pub rank: usize,
    pub trainable_parameters: usize,
    pub grad_evals: u64,
    pub wall_ms: f64,
    #[serde(flatten)]
    pub status: TrialStatus,
}

impl GridTrial {
    pub fn test_loss(&self) -> Option<f64> {
        match &self.status {
            TrialStatus::Ok { test, .. } => Some(test.loss),
            TrialStatus::Failed { .. } => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    /// `None` only when every trial failed.
    pub best_rank: Option<usize>,
    /// One trial per distinct rank, ascending by rank.
    pub trials: Vec<GridTrial>,
    pub ledger: CostLedger,
}

impl GridResult {
    pub fn best(&self) -> Option<&GridTrial> {
        let r = self.best_rank?;
        self.trials.iter().find(|t| t.rank == r)
    }
}

/// Builds the network a grid trial trains at a given uniform rank.
pub trait NetFactory: Sync {
    fn build(&self, rank: usize) -> Result<Network>;
}

impl<F> NetFactory for F
where
    F: Fn(usize) -> Result<Network> + Sync,
{
    fn build(&self, rank: usize) -> Result<Network> {
        self(rank)
    }
}

/// Factory placing a uniform-rank update without selection on every LoRA layer
/// of a pretrained plain network.
pub fn uniform_rank_factory(pretrained: &Network, seed: u64) -> impl Fn(usize) -> Result<Network> + Sync + '_ {
    move |rank| {
        let layers = pretrained.spec().lora_mask.iter().filter(|&&m| m).count();
        pretrained.attach_fixed_rank(&vec![rank; layers], seed)
    }
}

fn run_trial(
    factory: &dyn NetFactory,
    rank: usize,
    d_tr: &Dataset,
    d_test: &Dataset,
    cfg: &TrainConfig,
    timings: bool,
) -> GridTrial {
    let clock = Stopwatch::start(timings);
    let mut trainable_parameters = 0;
    let mut grad_evals = 0;
    let status = (|| {
        let mut net = factory.build(rank)?;
        trainable_parameters = net.parameter_count(Trainable::WEIGHTS);
        let outcome = train(&mut net, Trainable::WEIGHTS, d_tr, cfg);
        grad_evals = match &outcome {
            Ok(o) => o.grad_evals,
            Err(Error::Training { step, .. }) => *step as u64 + 1,
            Err(_) => 0,
        };
        let outcome = outcome?;
        Ok::<_, Error>(TrialStatus::Ok {
            train_loss: outcome.final_loss,
            test: net.evaluate(d_test)?,
        })
    })()
    .unwrap_or_else(|e| TrialStatus::Failed { message: e.to_string() });
    GridTrial {
        rank,
        trainable_parameters,
        grad_evals,
        wall_ms: clock.elapsed_ms(),
        status,
    }
}

/// Trains one uniform-rank model per distinct rank and keeps the one with
/// the lowest test loss (ties go to the smaller rank). Failed trials are
/// recorded and skipped. `jobs` worker threads share the trials; the result
/// does not depend on `jobs` or on the order of `ranks`.
pub fn grid_search(
    factory: &dyn NetFactory,
    ranks: &[usize],
    d_tr: &Dataset,
    d_test: &Dataset,
    cfg: &TrainConfig,
    jobs: usize,
    timings: bool,
) -> Result<GridResult> {
    let mut ranks = ranks.to_vec();
    ranks.sort_unstable();
    ranks.dedup();
    if ranks.is_empty() {
        return Err(Error::Domain("grid search needs at least one rank".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Domain(format!("worker pool: {e}")))?;
    let trials: Vec<GridTrial> = pool.install(|| {
        use rayon::prelude::*;
        ranks
            .par_iter()
            .map(|&r| run_trial(factory, r, d_tr, d_test, cfg, timings))
            .collect()
    });

    let mut ledger = CostLedger::new();
    for t in &trials {
        ledger.record(format!("grid_rank_{}", t.rank), t.grad_evals, t.wall_ms);
    }
    let best_rank = trials
        .iter()
        .filter_map(|t| t.test_loss().map(|l| (t.rank, l)))
        .fold(None, |best: Option<(usize, f64)>, (r, l)| match best {
            Some((_, bl)) if bl <= l => best,
            _ => Some((r, l)),
        })
        .map(|(r, _)| r);
    Ok(GridResult {
        best_rank,
        trials,
        ledger,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FullFinetuneResult {
    pub train: Metrics,
    pub test: Metrics,
    pub trainable_parameters: usize,
    pub total_parameters: usize,
    pub ledger: CostLedger,
    #[serde(skip)]
    pub net: Option<Network>,
}

/// Merges any low-rank updates and trains every weight of the network.
pub fn full_finetune(
    net: &Network,
    d_tr: &Dataset,
    d_test: &Dataset,
    cfg: &TrainConfig,
    timings: bool,
) -> Result<FullFinetuneResult> {
    let clock = Stopwatch::start(timings);
    let mut merged = net.merged()?;
    let outcome = train(&mut merged, Trainable::FULL, d_tr, cfg)?;
    let mut ledger = CostLedger::new();
    ledger.record("full_finetune", outcome.grad_evals, clock.elapsed_ms());
    Ok(FullFinetuneResult {
        train: merged.evaluate(d_tr)?,
        test: merged.evaluate(d_test)?,
        trainable_parameters: merged.parameter_count(Trainable::FULL),
        total_parameters: merged.total_parameter_count(),
        ledger,
        net: Some(merged),
    })
}
