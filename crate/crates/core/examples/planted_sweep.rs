//! Runs search, retraining and (optionally) the uniform-rank grid on the
//! planted suite and prints per-seed ranks and losses.
//!
//! ```text
//! cargo run --release --example planted_sweep -- seeds=5 lr_a=1e-2 a_opt=adam grid=true
//! cargo run --release --example planted_sweep -- oracle=true
//! ```
//!
//! Keys: seeds, eta, lr_w, lr_a, w_opt, a_opt, mode, epochs, patience,
//! retrain_lr, retrain_epochs, init, grid, oracle.

use std::collections::BTreeMap;
use std::str::FromStr;

use lorank_core::bilevel::SearchConfig;
use lorank_core::harness::{grid_search, make_planted_task, uniform_rank_factory, PlantedTaskSpec};
use lorank_core::model::Trainable;
use lorank_core::pipeline::{run_autolora, AutoLoraConfig};
use lorank_core::rankselect::RetrainConfig;
use lorank_core::train::{train, OptimizerKind, TrainConfig};

struct Args(BTreeMap<String, String>);

impl Args {
    fn get<T: FromStr>(&self, key: &str, default: T) -> T
    where
        T::Err: std::fmt::Debug,
    {
        self.0
            .get(key)
            .map(|v| v.parse().unwrap_or_else(|e| panic!("bad value for {key}: {e:?}")))
            .unwrap_or(default)
    }
}

fn main() {
    let args = Args(
        std::env::args()
            .skip(1)
            .map(|a| {
                let (k, v) = a.split_once('=').unwrap_or_else(|| panic!("expected key=value, got {a}"));
                (k.to_string(), v.to_string())
            })
            .collect(),
    );
    let (mut hits, mut total, mut ratios) = (0, 0, Vec::new());
    for seed in 0..args.get("seeds", 5u64) {
        let spec = PlantedTaskSpec::default_suite(seed);
        let task = make_planted_task(&spec).unwrap();
        let retrain = TrainConfig {
            epochs: args.get("retrain_epochs", 50),
            batch_size: 16,
            lr: args.get("retrain_lr", 1e-4),
            optimizer: OptimizerKind::Adam,
            seed,
        };

        if args.get("oracle", false) {
            let mut line = format!("seed {seed}");
            for ranks in [[1, 3, 6], [1, 1, 1], [2, 2, 2], [3, 3, 3], [1, 3, 8], [8, 8, 8]] {
                let mut net = task.pretrained.attach_fixed_rank(&ranks, seed).unwrap();
                train(&mut net, Trainable::WEIGHTS, &task.downstream_train, &retrain).unwrap();
                line += &format!("  {ranks:?} {:.5}", net.evaluate(&task.downstream_test).unwrap().loss);
            }
            println!("{line}");
            continue;
        }

        let cfg = AutoLoraConfig {
            search: SearchConfig {
                eta: args.get("eta", 1e-4),
                lr_w: args.get("lr_w", 1e-4),
                lr_a: args.get("lr_a", 1e-3),
                max_meta_epochs: args.get("epochs", 50),
                patience: args.get("patience", 5),
                hypergrad_mode: args.get("mode", Default::default()),
                weight_optimizer: args.get("w_opt", OptimizerKind::Sgd),
                selection_optimizer: args.get("a_opt", OptimizerKind::Sgd),
                seed,
                ..SearchConfig::default()
            },
            split_ratio: 0.5,
            retrain: RetrainConfig {
                init: args.get("init", Default::default()),
                train: retrain.clone(),
            },
        };
        let run = run_autolora(&task.pretrained, &task.downstream_train, &task.downstream_test, &cfg).unwrap();
        for (k, t) in run.ranks().iter().zip(&spec.true_ranks) {
            total += 1;
            hits += (k.abs_diff(*t) <= 1) as usize;
        }
        let mut line = format!(
            "seed {seed} ranks {:?} test {:.5} epochs {} evals {}",
            run.ranks(),
            run.test.loss,
            run.search.trajectory.epochs.len(),
            run.ledger.total_grad_evals()
        );
        if args.get("grid", false) {
            let g = grid_search(
                &uniform_rank_factory(&task.pretrained, seed),
                &(1..=8).collect::<Vec<_>>(),
                &task.downstream_train,
                &task.downstream_test,
                &retrain,
                1,
                false,
            )
            .unwrap();
            let best = g.best().and_then(|t| t.test_loss()).unwrap();
            ratios.push(run.test.loss / best);
            line += &format!("  grid best rank {:?} loss {best:.5} ratio {:.3}", g.best_rank, run.test.loss / best);
        }
        println!("{line}");
    }
    if total > 0 {
        println!("within one of the planted rank: {hits}/{total}");
    }
    if !ratios.is_empty() {
        ratios.sort_by(f64::total_cmp);
        println!("median test-loss ratio to grid: {:.3}", ratios[ratios.len() / 2]);
    }
}
