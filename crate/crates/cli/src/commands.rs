use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::ArgMatches;
use lorank_core::bilevel::StopReason;
use lorank_core::harness::{
    full_finetune, grid_search, load_csv, make_planted_task, split, uniform_rank_factory, CostLedger, Dataset,
};
use lorank_core::model::{pretrain, Network, Trainable};
use lorank_core::persistio::{
    emit_report, load_checkpoint, load_report, save_checkpoint, trajectory_csv_path, write_trajectory_csv,
    Checkpoint, ParameterCounts, ReportMetrics, RunReport,
};
use lorank_core::pipeline::run_autolora;
use lorank_core::rankselect::{decide_ranks, retrain};
use serde_json::Value;

use crate::config::{self, RunConfig, TaskSource};
use crate::{layered_values, CliError};

/// Relative agreement required by `repro`.
const REPRO_TOL: f64 = 1e-12;

struct TaskData {
    pretrained: Network,
    downstream: Dataset,
    test: Dataset,
}

fn load_task(cfg: &RunConfig) -> Result<TaskData, CliError> {
    match &cfg.source {
        TaskSource::Planted(spec) => {
            let t = make_planted_task(spec)?;
            Ok(TaskData {
                pretrained: t.pretrained,
                downstream: t.downstream_train,
                test: t.downstream_test,
            })
        }
        TaskSource::Csv {
            train,
            test,
            pretrained,
            schema,
            ..
        } => {
            if pretrained.as_os_str().is_empty() {
                return Err(CliError::usage("`task.pretrained` is required when `task.source = csv`"));
            }
            let ckpt = load_checkpoint(pretrained)?;
            if ckpt.net.spec() != &cfg.network {
                return Err(CliError::usage(format!(
                    "{} was saved for a different model.* configuration",
                    pretrained.display()
                )));
            }
            Ok(TaskData {
                pretrained: ckpt.net,
                downstream: load_csv(train, schema)?,
                test: load_csv(test, schema)?,
            })
        }
    }
}

fn echo_json(echo: &BTreeMap<String, String>) -> serde_json::Map<String, Value> {
    echo.iter().map(|(k, v)| (k.clone(), Value::String(v.clone()))).collect()
}

/// Output of one subcommand before anything is written.
struct Outcome {
    report: RunReport,
    checkpoints: Vec<(&'static str, Checkpoint)>,
    /// Set when the run finished but the result signals a numeric failure.
    failure: Option<CliError>,
}

fn new_report(command: &str, cfg: &RunConfig) -> RunReport {
    RunReport::new(command, cfg.seed, echo_json(&cfg.echo))
}

fn checkpoint(cfg: &RunConfig, net: Network) -> Checkpoint {
    Checkpoint {
        seed: cfg.seed,
        config: Value::Object(echo_json(&cfg.echo)),
        net,
    }
}

fn execute(command: &str, cfg: &RunConfig, jobs: usize, input: Option<&Path>) -> Result<Outcome, CliError> {
    let mut report = new_report(command, cfg);
    let mut checkpoints = Vec::new();
    let mut failure = None;
    let timings = cfg.autolora.search.record_timings;
    let started = std::time::SystemTime::now();
    match command {
        "pretrain" => {
            let net = match &cfg.source {
                TaskSource::Planted(_) => load_task(cfg)?.pretrained,
                TaskSource::Csv { pretrain: path, schema, .. } => {
                    let data = load_csv(path, schema)?;
                    let net = pretrain(&cfg.network, &data, cfg.pretrain_steps, cfg.pretrain_lr, cfg.seed)?;
                    report.metrics.train = Some(net.evaluate(&data)?);
                    net
                }
            };
            report.parameters = ParameterCounts {
                trainable: net.parameter_count(Trainable::FULL),
                total: net.total_parameter_count(),
            };
            checkpoints.push(("pretrained", checkpoint(cfg, net)));
        }
        "search" => {
            let task = load_task(cfg)?;
            let run = run_autolora(&task.pretrained, &task.downstream, &task.test, &cfg.autolora)?;
            if let StopReason::Diverged { epoch, message } = &run.search.trajectory.stop {
                failure = Some(CliError::numeric(
                    "diverged",
                    format!("search diverged in meta-epoch {epoch}: {message}"),
                ));
            }
            report.trajectory = Some(run.search.trajectory.clone());
            report.ranks = run.ranks();
            report.decisions = run.decisions.clone();
            report.metrics = ReportMetrics {
                train: Some(run.train),
                val: Some(run.val),
                test: Some(run.test),
            };
            report.ledger = run.ledger.clone();
            report.parameters = ParameterCounts {
                trainable: run.retrain.net.parameter_count(Trainable::WEIGHTS),
                total: run.retrain.net.total_parameter_count(),
            };
            if cfg.run_grid {
                let factory = uniform_rank_factory(&task.pretrained, cfg.seed);
                report.grid = Some(grid_search(
                    &factory,
                    &cfg.grid_ranks,
                    &task.downstream,
                    &task.test,
                    &cfg.baseline_train(),
                    jobs,
                    timings,
                )?);
            }
            if cfg.run_fullft {
                report.full_finetune = Some(full_finetune(
                    &task.pretrained,
                    &task.downstream,
                    &task.test,
                    &cfg.baseline_train(),
                    timings,
                )?);
            }
            checkpoints.push(("searched", checkpoint(cfg, run.search.net)));
            checkpoints.push(("retrained", checkpoint(cfg, run.retrain.net)));
        }
        "retrain" => {
            let path = input.ok_or_else(|| CliError::usage("retrain needs --checkpoint"))?;
            let searched = load_checkpoint(path)?.net;
            let task = load_task(cfg)?;
            let (d_tr, d_val) = split(&task.downstream, cfg.autolora.split_ratio, cfg.seed)?;
            let merged = d_tr.concat(&d_val)?;
            let decisions = decide_ranks(&searched)?;
            let out = retrain(&searched, &decisions, &merged, &cfg.autolora.retrain)?;
            report.ranks = decisions.iter().map(|d| d.rank).collect();
            report.decisions = decisions;
            report.metrics = ReportMetrics {
                train: Some(out.net.evaluate(&d_tr)?),
                val: Some(out.net.evaluate(&d_val)?),
                test: Some(out.net.evaluate(&task.test)?),
            };
            let mut ledger = CostLedger::new();
            ledger.record("retrain", out.training.grad_evals, 0.0);
            report.ledger = ledger;
            report.parameters = ParameterCounts {
                trainable: out.net.parameter_count(Trainable::WEIGHTS),
                total: out.net.total_parameter_count(),
            };
            report
                .extra
                .insert("checkpoint".into(), Value::String(path.display().to_string()));
            checkpoints.push(("retrained", checkpoint(cfg, out.net)));
        }
        "grid" => {
            let task = load_task(cfg)?;
            let factory = uniform_rank_factory(&task.pretrained, cfg.seed);
            let g = grid_search(
                &factory,
                &cfg.grid_ranks,
                &task.downstream,
                &task.test,
                &cfg.baseline_train(),
                jobs,
                timings,
            )?;
            let best = g.best().ok_or_else(|| CliError::numeric("training", "every grid trial failed"))?;
            let layers = cfg.network.lora_mask.iter().filter(|&&m| m).count();
            report.ranks = vec![best.rank; layers];
            if let lorank_core::harness::TrialStatus::Ok { test, .. } = &best.status {
                report.metrics.test = Some(*test);
            }
            report.parameters = ParameterCounts {
                trainable: best.trainable_parameters,
                total: task.pretrained.total_parameter_count(),
            };
            report.ledger = g.ledger.clone();
            report.grid = Some(g);
        }
        "fullft" => {
            let task = load_task(cfg)?;
            let mut r = full_finetune(&task.pretrained, &task.downstream, &task.test, &cfg.baseline_train(), timings)?;
            report.metrics.train = Some(r.train);
            report.metrics.test = Some(r.test);
            report.ledger = r.ledger.clone();
            report.parameters = ParameterCounts {
                trainable: r.trainable_parameters,
                total: r.total_parameters,
            };
            if let Some(net) = r.net.take() {
                checkpoints.push(("fullft", checkpoint(cfg, net)));
            }
            report.full_finetune = Some(r);
        }
        other => return Err(CliError::usage(format!("`{other}` cannot be re-run"))),
    }
    if timings {
        let ms = |t: std::time::SystemTime| t.duration_since(std::time::UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0);
        report.timestamps = Some(lorank_core::persistio::Timestamps {
            started_unix_ms: ms(started),
            finished_unix_ms: ms(std::time::SystemTime::now()),
        });
    }
    Ok(Outcome {
        report,
        checkpoints,
        failure,
    })
}

fn run_config(m: &ArgMatches, base: BTreeMap<String, String>, seed_fallback: Option<u64>) -> Result<RunConfig, CliError> {
    let (file, flags) = layered_values(m)?;
    let mut layered = base;
    layered.extend(file);
    let values = config::resolve(&layered, &flags)?;
    let seed = m
        .get_one::<u64>("seed")
        .copied()
        .or(seed_fallback)
        .unwrap_or(0);
    config::build(values, seed, m.get_one::<String>("out").map(PathBuf::from))
}

fn write_outcome(command: &str, cfg: &RunConfig, outcome: Outcome) -> Result<(), CliError> {
    let dir = &cfg.out_dir;
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::usage(format!("cannot create output directory {}: {e}", dir.display())))?;
    let report_path = dir.join(format!("{command}.json"));
    emit_report(&outcome.report, &report_path)?;
    for (name, ckpt) in &outcome.checkpoints {
        save_checkpoint(dir.join(format!("{name}.alra")), ckpt)?;
    }
    print_summary(&outcome.report);
    println!("wrote {}", report_path.display());
    match outcome.failure {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

fn print_summary(r: &RunReport) {
    if !r.ranks.is_empty() {
        let ranks: Vec<String> = r.ranks.iter().map(usize::to_string).collect();
        println!("ranks {}", ranks.join(","));
    }
    for (name, m) in [("train", &r.metrics.train), ("val", &r.metrics.val), ("test", &r.metrics.test)] {
        if let Some(m) = m {
            match m.accuracy {
                Some(a) => println!("{name}_loss {} {name}_accuracy {a}", m.loss),
                None => println!("{name}_loss {}", m.loss),
            }
        }
    }
    if !r.ledger.phases.is_empty() {
        println!("grad_evals {}", r.ledger.total_grad_evals());
    }
}

/// Base values stored in a checkpoint's config echo, if it has one.
fn echo_of(ckpt: &Checkpoint) -> BTreeMap<String, String> {
    match &ckpt.config {
        Value::Object(m) => m
            .iter()
            .filter(|(k, _)| config::default_of(k).is_some())
            .filter_map(|(k, v)| v.as_str().map(|s| (k.clone(), s.to_string())))
            .collect(),
        _ => BTreeMap::new(),
    }
}

pub(crate) fn dispatch(m: &ArgMatches) -> Result<(), CliError> {
    let (command, sub) = m.subcommand().expect("subcommand required");
    match command {
        "pretrain" | "search" | "grid" | "fullft" => {
            if matches!(command, "search" | "grid") && sub.get_one::<u64>("seed").is_none() {
                return Err(CliError::usage(format!("`{command}` requires --seed")));
            }
            let cfg = run_config(sub, BTreeMap::new(), None)?;
            let jobs = *sub.get_one::<usize>("jobs").expect("default");
            let outcome = execute(command, &cfg, jobs, None)?;
            write_outcome(command, &cfg, outcome)
        }
        "retrain" => {
            let path = PathBuf::from(sub.get_one::<String>("checkpoint").expect("required"));
            let ckpt = load_checkpoint(&path)?;
            let cfg = run_config(sub, echo_of(&ckpt), Some(ckpt.seed))?;
            let outcome = execute(command, &cfg, 1, Some(&path))?;
            write_outcome(command, &cfg, outcome)
        }
        "eval" => {
            let path = PathBuf::from(sub.get_one::<String>("checkpoint").expect("required"));
            let ckpt = load_checkpoint(&path)?;
            let cfg = run_config(sub, echo_of(&ckpt), Some(ckpt.seed))?;
            let task = load_task(&cfg)?;
            let metrics = serde_json::json!({
                "checkpoint": path.display().to_string(),
                "downstream": ckpt.net.evaluate(&task.downstream)?,
                "test": ckpt.net.evaluate(&task.test)?,
                "trainable_parameters": ckpt.net.parameter_count(Trainable::SEARCH),
                "total_parameters": ckpt.net.total_parameter_count(),
            });
            println!("{}", serde_json::to_string_pretty(&metrics).expect("plain JSON"));
            Ok(())
        }
        "report" => {
            let path = PathBuf::from(sub.get_one::<String>("report").expect("required"));
            let r = load_report(&path)?;
            print!("{}", render_rank_table(&r));
            if let Some(t) = &r.trajectory {
                let csv_path = match sub.get_one::<String>("out") {
                    Some(dir) => {
                        std::fs::create_dir_all(dir)
                            .map_err(|e| CliError::usage(format!("cannot create output directory {dir}: {e}")))?;
                        let name = trajectory_csv_path(&path);
                        PathBuf::from(dir).join(name.file_name().expect("file name"))
                    }
                    None => trajectory_csv_path(&path),
                };
                write_trajectory_csv(t, &csv_path)?;
                println!("wrote {}", csv_path.display());
            }
            Ok(())
        }
        "repro" => {
            let path = PathBuf::from(sub.get_one::<String>("report").expect("required"));
            let jobs = *sub.get_one::<usize>("jobs").expect("default");
            repro(&path, jobs)
        }
        _ => unreachable!("clap rejects unknown subcommands"),
    }
}

pub(crate) fn render_rank_table(r: &RunReport) -> String {
    let mut s = format!("command {}  seed {}\n", r.command, r.seed);
    if r.decisions.is_empty() {
        let ranks: Vec<String> = r.ranks.iter().map(usize::to_string).collect();
        s += &format!("ranks {}\n", ranks.join(","));
    } else {
        s += &format!("{:<6} {:<5} {:<10} {:<18} alpha\n", "layer", "rank", "threshold", "kept");
        for d in &r.decisions {
            let kept: Vec<String> = d.kept.iter().map(usize::to_string).collect();
            let alpha: Vec<String> = d.alpha.values().iter().map(|a| format!("{a:.4}")).collect();
            s += &format!(
                "{:<6} {:<5} {:<10.4} {:<18} {}\n",
                d.layer,
                d.rank,
                d.threshold,
                kept.join(","),
                alpha.join(" ")
            );
        }
    }
    if let Some(t) = &r.metrics.test {
        s += &format!("test_loss {}\n", t.loss);
    }
    s
}

/// Every reported loss and accuracy, labelled.
fn numbers(r: &RunReport) -> Vec<(String, f64)> {
    let mut out = Vec::new();
    for (name, m) in [("train", &r.metrics.train), ("val", &r.metrics.val), ("test", &r.metrics.test)] {
        if let Some(m) = m {
            out.push((format!("metrics.{name}.loss"), m.loss));
            if let Some(a) = m.accuracy {
                out.push((format!("metrics.{name}.accuracy"), a));
            }
        }
    }
    if let Some(t) = &r.trajectory {
        out.push(("trajectory.initial_train_loss".into(), t.initial_train_loss));
        out.push(("trajectory.initial_val_loss".into(), t.initial_val_loss));
        for e in &t.epochs {
            out.push((format!("trajectory[{}].train_loss", e.epoch), e.train_loss));
            out.push((format!("trajectory[{}].val_loss", e.epoch), e.val_loss));
        }
    }
    if let Some(g) = &r.grid {
        for t in &g.trials {
            if let Some(l) = t.test_loss() {
                out.push((format!("grid.rank_{}.test_loss", t.rank), l));
            }
        }
    }
    if let Some(f) = &r.full_finetune {
        out.push(("full_finetune.train_loss".into(), f.train.loss));
        out.push(("full_finetune.test_loss".into(), f.test.loss));
    }
    out
}

fn agree(a: f64, b: f64) -> bool {
    a == b || (a - b).abs() <= REPRO_TOL * a.abs().max(b.abs()).max(1.0)
}

/// Differences between an original report and its re-run, one line each.
pub(crate) fn compare_reports(original: &RunReport, rerun: &RunReport) -> Vec<String> {
    let mut diffs = Vec::new();
    if original.ranks != rerun.ranks {
        diffs.push(format!("ranks {:?} != {:?}", original.ranks, rerun.ranks));
    }
    let a = numbers(original);
    let b: BTreeMap<String, f64> = numbers(rerun).into_iter().collect();
    if a.len() != b.len() {
        diffs.push(format!("{} reported numbers != {} re-run numbers", a.len(), b.len()));
    }
    for (label, x) in a {
        match b.get(&label) {
            Some(&y) if agree(x, y) => {}
            Some(&y) => diffs.push(format!("{label} {x} != {y}")),
            None => diffs.push(format!("{label} missing from re-run")),
        }
    }
    if let (Some(g1), Some(g2)) = (&original.grid, &rerun.grid) {
        if g1.best_rank != g2.best_rank {
            diffs.push(format!("grid best rank {:?} != {:?}", g1.best_rank, g2.best_rank));
        }
    }
    diffs
}

fn repro(path: &Path, jobs: usize) -> Result<(), CliError> {
    let original = load_report(path)?;
    let base: BTreeMap<String, String> = original
        .config
        .iter()
        .map(|(k, v)| {
            v.as_str()
                .map(|s| (k.clone(), s.to_string()))
                .ok_or_else(|| CliError::usage(format!("config echo entry `{k}` is not a string")))
        })
        .collect::<Result<_, _>>()?;
    let values = config::resolve(&base, &BTreeMap::new())?;
    let cfg = config::build(values, original.seed, Some(PathBuf::from(".")))?;
    let input = original.extra.get("checkpoint").and_then(Value::as_str).map(PathBuf::from);
    let rerun = execute(&original.command, &cfg, jobs, input.as_deref())?;
    let diffs = compare_reports(&original, &rerun.report);
    if diffs.is_empty() {
        println!("MATCH");
        Ok(())
    } else {
        for d in &diffs {
            println!("DIFF {d}");
        }
        println!("MISMATCH");
        Err(CliError::numeric("mismatch", format!("{} values differ from {}", diffs.len(), path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn comparison_tolerance() {
        let mut a = RunReport::new("search", 0, serde_json::Map::new());
        a.ranks = vec![2, 3];
        a.metrics.test = Some(lorank_core::model::Metrics {
            loss: 0.25,
            accuracy: None,
        });
        let mut b = a.clone();
        assert!(compare_reports(&a, &b).is_empty());
        b.metrics.test.as_mut().unwrap().loss = 0.25 + 1e-14;
        assert!(compare_reports(&a, &b).is_empty());
        b.metrics.test.as_mut().unwrap().loss = 0.25 + 1e-9;
        assert_eq!(compare_reports(&a, &b).len(), 1);
        b = a.clone();
        b.ranks = vec![2, 4];
        assert!(compare_reports(&a, &b)[0].starts_with("ranks"));
    }
}
