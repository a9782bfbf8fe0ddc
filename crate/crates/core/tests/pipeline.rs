use lorank_core::bilevel::{lookahead_step, meta_search, HypergradMode, SearchConfig, StopReason};
use lorank_core::harness::{
    full_finetune, grid_search, make_planted_task, split, uniform_rank_factory, PlantedTask, PlantedTaskSpec,
};
use lorank_core::lora::ConstraintMode;
use lorank_core::model::{LayerWeight, NetworkSpec, Task, Trainable};
use lorank_core::numerics::{seeded_rng, Tensor};
use lorank_core::pipeline::{run_autolora, AutoLoraConfig};
use lorank_core::rankselect::{decide_ranks, rebuild_fixed_rank, retrain, RetrainConfig, RetrainInit};
use lorank_core::train::{OptimizerKind, TrainConfig};

fn small_task(seed: u64) -> PlantedTask {
    let mut network = NetworkSpec::mlp(vec![6, 10, 10, 2], Task::Regression { outputs: 2 });
    network.k_init = 4;
    make_planted_task(&PlantedTaskSpec {
        network,
        true_ranks: vec![1, 3],
        perturbation_scale: 1.0,
        n_pretrain: 128,
        n_downstream: 96,
        n_test: 64,
        noise: 0.0,
        pretrain_steps: 100,
        pretrain_lr: 0.05,
        seed,
    })
    .unwrap()
}

fn train_cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 16,
        lr: 1e-2,
        optimizer: OptimizerKind::Adam,
        seed: 0,
    }
}

fn search_cfg() -> SearchConfig {
    SearchConfig {
        eta: 1e-3,
        lr_w: 1e-2,
        lr_a: 1e-2,
        max_meta_epochs: 15,
        weight_optimizer: OptimizerKind::Adam,
        selection_optimizer: OptimizerKind::Adam,
        ..SearchConfig::default()
    }
}

#[test]
fn default_search_on_the_suite_lowers_validation_loss() {
    let task = make_planted_task(&PlantedTaskSpec::default_suite(0)).unwrap();
    let (d_tr, d_val) = split(&task.downstream_train, 0.5, 0).unwrap();
    let net = task.pretrained.attach_lora(0).unwrap();
    let cfg = SearchConfig::default();
    let out = meta_search(net.clone(), &d_tr, &d_val, &cfg).unwrap();
    let t = &out.trajectory;
    assert!(!out.diverged());
    assert!(t.epochs.last().unwrap().val_loss < t.initial_val_loss);
    for (i, e) in t.epochs.iter().enumerate() {
        assert_eq!(e.epoch, i);
        assert_eq!(e.alphas.len(), 3);
        assert_eq!(e.wall_ms, 0.0);
    }
    // 8 train batches plus 8 validation batches at 3 evaluations each.
    assert_eq!(t.grad_evals, t.epochs.len() as u64 * (8 + 8 * 3));
    assert_eq!(meta_search(net, &d_tr, &d_val, &cfg).unwrap().trajectory, *t);
}

#[test]
fn zero_epochs_leave_the_logits_alone() {
    let task = small_task(0);
    let (d_tr, d_val) = split(&task.downstream_train, 0.5, 0).unwrap();
    let net = task.pretrained.attach_lora(0).unwrap();
    let cfg = SearchConfig {
        max_meta_epochs: 0,
        ..search_cfg()
    };
    let out = meta_search(net.clone(), &d_tr, &d_val, &cfg).unwrap();
    assert!(out.trajectory.epochs.is_empty());
    assert_eq!(out.trajectory.grad_evals, 0);
    assert_eq!(out.net, net);
    assert!(out.betas.values().all(|b| b.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn lookahead_touches_only_the_weights() {
    let task = small_task(6);
    let mut net = task.pretrained.attach_lora(6).unwrap();
    let mut rng = seeded_rng(6, 1);
    for id in net.param_ids(Trainable::SEARCH) {
        let t = net.param_mut(id).unwrap();
        *t = Tensor::randn(t.rows(), t.cols(), 0.3, &mut rng);
    }
    let stepped = lookahead_step(&net, &task.downstream_train, 0.1).unwrap();
    assert_eq!(stepped.betas(), net.betas());
    for i in net.lora_layers() {
        let (a, b) = (net.lora(i).unwrap(), stepped.lora(i).unwrap());
        assert_eq!(a.w_tilde(), b.w_tilde());
        assert_ne!(a.u(), b.u());
    }
}

#[test]
fn hypergradient_modes_all_run_and_share_the_weight_path() {
    let task = small_task(1);
    let (d_tr, d_val) = split(&task.downstream_train, 0.5, 0).unwrap();
    let net = task.pretrained.attach_lora(1).unwrap();
    let mut costs = Vec::new();
    for mode in [HypergradMode::Exact, HypergradMode::DartsFd, HypergradMode::FirstOrder] {
        let cfg = SearchConfig {
            hypergrad_mode: mode,
            max_meta_epochs: 2,
            ..search_cfg()
        };
        let out = meta_search(net.clone(), &d_tr, &d_val, &cfg).unwrap();
        assert_eq!(out.trajectory.stop, StopReason::MaxEpochs);
        costs.push(out.trajectory.grad_evals);
    }
    assert_eq!(costs, [2 * (3 + 9), 2 * (3 + 12), 2 * (3 + 3)]);
}

#[test]
fn warm_rebuild_with_everything_kept_reproduces_the_soft_network() {
    let task = small_task(2);
    let mut net = task.pretrained.attach_lora(2).unwrap();
    let mut rng = seeded_rng(9, 0);
    for id in net.param_ids(Trainable::WEIGHTS) {
        let t = net.param_mut(id).unwrap();
        *t = t.add(&Tensor::randn(t.rows(), t.cols(), 0.1, &mut rng)).unwrap();
    }
    // Zero logits: uniform weights, so every component reaches 1/k.
    let decisions = decide_ranks(&net).unwrap();
    assert!(decisions.iter().all(|d| d.rank == 4));
    let warm = rebuild_fixed_rank(&net, &decisions, RetrainInit::Warm, 0).unwrap();
    let (_, soft) = net.predict(&task.downstream_test).unwrap();
    let (_, hard) = warm.predict(&task.downstream_test).unwrap();
    assert!(soft.sub(&hard).unwrap().max_abs() < 1e-12);
    assert!(warm.betas().is_empty());

    let fresh = rebuild_fixed_rank(&net, &decisions, RetrainInit::Fresh, 0).unwrap();
    assert_eq!(fresh.evaluate(&task.downstream_test).unwrap(), task.pretrained.evaluate(&task.downstream_test).unwrap());
}

#[test]
fn sigmoid_rank_zero_becomes_a_plain_layer() {
    let task = small_task(3);
    let mut net = task.pretrained.attach_lora(3).unwrap();
    net.set_constraint(ConstraintMode::Sigmoid);
    for i in net.lora_layers() {
        let b = net.param_mut(lorank_core::model::ParamId::Beta(i)).unwrap();
        *b = Tensor::filled(b.rows(), b.cols(), if i == 0 { -5.0 } else { 5.0 });
    }
    let decisions = decide_ranks(&net).unwrap();
    assert_eq!(decisions.iter().map(|d| d.rank).collect::<Vec<_>>(), [0, 4]);
    let cfg = RetrainConfig {
        init: RetrainInit::Fresh,
        train: train_cfg(2),
    };
    let out = retrain(&net, &decisions, &task.downstream_train, &cfg).unwrap();
    assert!(matches!(out.net.body()[0].weight, LayerWeight::Plain(_)));
    assert_eq!(out.net.lora(1).unwrap().rank(), 4);
    assert!(out.final_metrics.loss < out.initial.loss);
}

#[test]
fn autolora_is_deterministic_and_charges_search_plus_retrain() {
    let task = small_task(4);
    let cfg = AutoLoraConfig {
        search: SearchConfig {
            max_meta_epochs: 3,
            ..search_cfg()
        },
        split_ratio: 0.5,
        retrain: RetrainConfig {
            init: RetrainInit::Fresh,
            train: train_cfg(4),
        },
    };
    let a = run_autolora(&task.pretrained, &task.downstream_train, &task.downstream_test, &cfg).unwrap();
    let b = run_autolora(&task.pretrained, &task.downstream_train, &task.downstream_test, &cfg).unwrap();
    assert_eq!(a.ranks(), b.ranks());
    assert_eq!(a.test, b.test);
    assert_eq!(a.search.trajectory, b.search.trajectory);
    let phases: Vec<&str> = a.ledger.phases.iter().map(|p| p.phase.as_str()).collect();
    assert_eq!(phases, ["search", "retrain"]);
    assert_eq!(a.ledger.grad_evals_of("search"), a.search.trajectory.grad_evals);
    assert_eq!(a.ledger.grad_evals_of("retrain"), 4 * 6);
    assert_eq!(a.ranks().len(), 2);
}

#[test]
fn grid_ledger_bounds() {
    let task = small_task(5);
    let ranks = [1, 2, 3, 4];
    let g = grid_search(
        &uniform_rank_factory(&task.pretrained, 5),
        &ranks,
        &task.downstream_train,
        &task.downstream_test,
        &train_cfg(3),
        2,
        false,
    )
    .unwrap();
    let min_trial = g.trials.iter().map(|t| t.grad_evals).min().unwrap();
    assert!(g.ledger.total_grad_evals() >= ranks.len() as u64 * min_trial);
    let params: Vec<usize> = g.trials.iter().map(|t| t.trainable_parameters).collect();
    assert!(params.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn full_finetune_is_within_ten_percent_of_uniform_lora_on_the_suite() {
    let task = make_planted_task(&PlantedTaskSpec::default_suite(1)).unwrap();
    let cfg = TrainConfig {
        epochs: 50,
        batch_size: 16,
        lr: 1e-4,
        optimizer: OptimizerKind::Adam,
        seed: 1,
    };
    let full = full_finetune(&task.pretrained, &task.downstream_train, &task.downstream_test, &cfg, false).unwrap();
    assert_eq!(full.trainable_parameters, full.total_parameters);
    let g = grid_search(
        &uniform_rank_factory(&task.pretrained, 1),
        &[8],
        &task.downstream_train,
        &task.downstream_test,
        &cfg,
        1,
        false,
    )
    .unwrap();
    let lora = g.trials[0].test_loss().unwrap();
    assert!(full.test.loss <= 1.1 * lora, "full {} vs uniform rank 8 {}", full.test.loss, lora);
}
