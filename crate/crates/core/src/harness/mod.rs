//! Synthetic tasks, data handling, baselines and cost accounting.

mod baselines;
mod cost;
mod dataset;
mod planted;

pub use baselines::{
    full_finetune, grid_search, uniform_rank_factory, FullFinetuneResult, GridResult, GridTrial, NetFactory,
    TrialStatus,
};
pub use cost::{CostLedger, PhaseCost, Stopwatch};
pub use dataset::{load_csv, split, split_indices, write_csv, CsvSchema, Dataset, Labels};
pub use planted::{make_planted_task, PlantedTask, PlantedTaskSpec, RELATIVE_NORM};
