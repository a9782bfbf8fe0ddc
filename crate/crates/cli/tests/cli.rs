use std::path::Path;
use std::process::{Command, Output};

use lorank_cli::config::KEYS;
use lorank_core::persistio::load_report;

const FAST: [&str; 6] = ["--search.max_meta_epochs", "2", "--retrain.epochs", "2", "--grid.ranks", "1,2"];

fn lorank(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lorank"))
        .args(args)
        .current_dir(cwd)
        .env_remove("LORANK_OUT")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn with_fast<'a>(args: &[&'a str]) -> Vec<&'a str> {
    let mut v = args.to_vec();
    v.extend(FAST);
    v
}

#[test]
fn help_lists_every_key_with_default() {
    let dir = tempfile::tempdir().unwrap();
    let top = stdout(&lorank(&["--help"], dir.path()));
    let sub = stdout(&lorank(&["search", "--help"], dir.path()));
    for (key, default, _) in KEYS {
        let shown = if default.is_empty() { "\"\"" } else { default };
        assert!(
            top.lines().any(|l| l.split_whitespace().collect::<Vec<_>>()[..].starts_with(&[key, "default", shown])),
            "top-level help misses {key}"
        );
        assert!(sub.contains(&format!("--{key} <VALUE>")), "search help misses --{key}");
        assert!(sub.contains(&format!("[default: {shown}]")), "search help misses default of {key}");
    }
}

#[test]
fn usage_errors_exit_one_with_prefixed_line() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("bad.cfg"), "# comment\nsearch.lr_w = 0.1\nsearch.lr_ww = 3\n").unwrap();
    let cases: [(&[&str], &str); 5] = [
        (&["search", "--config", "bad.cfg", "--seed", "1"], "search.lr_ww"),
        (&["search"], "--seed"),
        (&["grid"], "--seed"),
        (&["search", "--seed", "1", "--model.k_init", "eight"], "model.k_init"),
        (&["frobnicate"], "frobnicate"),
    ];
    for (args, needle) in cases {
        let o = lorank(args, d);
        assert_eq!(o.status.code(), Some(1), "{args:?}");
        let err = stderr(&o);
        assert_eq!(err.lines().count(), 1, "{err}");
        assert!(err.starts_with("lorank:error:usage: "), "{err}");
        assert!(err.contains(needle), "{err}");
    }
    assert!(!d.join("runs").exists());
}

#[test]
fn divergence_exits_two_and_keeps_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let o = lorank(
        &with_fast(&["search", "--seed", "0", "--search.lr_w", "1000", "--out", "out"]),
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("lorank:error:diverged: "));
    let r = load_report(dir.path().join("out/search.json")).unwrap();
    assert_eq!(r.ranks.len(), 3);
}

#[test]
fn search_is_byte_reproducible_and_config_file_is_layered_under_flags() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("planted.cfg"), "search.max_meta_epochs = 2\nretrain.epochs = 7 # overridden\n").unwrap();
    for out in ["a", "b"] {
        let o = lorank(
            &["search", "--config", "planted.cfg", "--seed", "7", "--retrain.epochs", "2", "--out", out],
            d,
        );
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    for f in ["search.json", "search.trajectory.csv", "searched.alra", "retrained.alra"] {
        assert_eq!(std::fs::read(d.join("a").join(f)).unwrap(), std::fs::read(d.join("b").join(f)).unwrap(), "{f}");
    }
    let r = load_report(d.join("a/search.json")).unwrap();
    assert_eq!(r.config["retrain.epochs"], "2");
    assert_eq!(r.config["search.max_meta_epochs"], "2");
    assert_eq!(r.trajectory.as_ref().unwrap().epochs.len(), 2);
    assert_eq!(r.ranks.len(), r.decisions.len());
    assert!(r.timestamps.is_none());
}

#[test]
fn out_precedence_flag_env_config() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let run = |extra: &[&str], env: Option<&str>| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_lorank"));
        c.args(["fullft", "--retrain.epochs", "1"]).args(extra).current_dir(d).env_remove("LORANK_OUT");
        if let Some(e) = env {
            c.env("LORANK_OUT", e);
        }
        assert!(c.output().unwrap().status.success());
    };
    run(&["--output.dir", "cfgdir"], None);
    assert!(d.join("cfgdir/fullft.json").exists());
    run(&["--output.dir", "cfgdir2"], Some("envdir"));
    assert!(d.join("envdir/fullft.json").exists() && !d.join("cfgdir2").exists());
    run(&["--out", "flagdir"], Some("envdir2"));
    assert!(d.join("flagdir/fullft.json").exists() && !d.join("envdir2").exists());
}

#[test]
fn report_repro_eval_and_retrain() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = lorank(&with_fast(&["search", "--seed", "3", "--baselines.grid", "true", "--out", "r"]), d);
    assert!(o.status.success(), "{}", stderr(&o));

    let o = lorank(&["report", "r/search.json", "--out", "plots"], d);
    assert!(o.status.success());
    let table = stdout(&o);
    let rows: Vec<&str> = table.lines().filter(|l| l.split_whitespace().next().is_some_and(|w| w.parse::<usize>().is_ok())).collect();
    assert_eq!(rows.len(), 3, "{table}");
    assert!(table.contains("layer") && table.contains("rank") && table.contains("alpha"));
    let csv = std::fs::read_to_string(d.join("plots/search.trajectory.csv")).unwrap();
    assert!(csv.starts_with("epoch,train_loss,val_loss,wall_ms,alpha_0_0,"));
    assert_eq!(csv.lines().count(), 3);

    let o = lorank(&["repro", "r/search.json"], d);
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    assert_eq!(stdout(&o).trim(), "MATCH");
    assert!(!d.join("runs").exists());

    let o = lorank(&["eval", "--checkpoint", "r/retrained.alra"], d);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let r = load_report(d.join("r/search.json")).unwrap();
    assert_eq!(v["test"]["loss"].as_f64().unwrap(), r.metrics.test.unwrap().loss);

    let o = lorank(&["retrain", "--checkpoint", "r/searched.alra", "--retrain.init", "warm", "--out", "w"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    let w = load_report(d.join("w/retrain.json")).unwrap();
    assert_eq!(w.ranks, r.ranks);
    assert_eq!(w.config["retrain.init"], "warm");
    assert_eq!(w.config["retrain.epochs"], "2");
    let o = lorank(&["repro", "w/retrain.json"], d);
    assert_eq!(stdout(&o).trim(), "MATCH");
}

#[test]
fn grid_jobs_do_not_change_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for (jobs, out) in [("1", "one"), ("3", "three")] {
        let o = lorank(&["grid", "--seed", "2", "--retrain.epochs", "2", "--grid.ranks", "3,1,2", "--jobs", jobs, "--out", out], d);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let a = std::fs::read(d.join("one/grid.json")).unwrap();
    assert_eq!(a, std::fs::read(d.join("three/grid.json")).unwrap());
    let r = load_report(d.join("one/grid.json")).unwrap();
    let g = r.grid.unwrap();
    assert_eq!(g.trials.iter().map(|t| t.rank).collect::<Vec<_>>(), [1, 2, 3]);
    assert_eq!(r.ranks, vec![g.best_rank.unwrap(); 3]);
}

#[test]
fn csv_source_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut train = String::from("x0,x1,x2,label\n");
    let mut test = train.clone();
    for i in 0..40 {
        let (a, b, c) = ((i % 7) as f64 * 0.3 - 1.0, (i % 5) as f64 * 0.25, ((i * 3) % 11) as f64 * 0.1 - 0.5);
        let line = format!("{a},{b},{c},{}\n", 0.5 * a - b + 0.25 * c);
        if i % 4 == 0 {
            test += &line;
        } else {
            train += &line;
        }
    }
    std::fs::write(d.join("train.csv"), train).unwrap();
    std::fs::write(d.join("test.csv"), test).unwrap();
    std::fs::write(
        d.join("csv.cfg"),
        "task.source = csv\ntask.train_csv = train.csv\ntask.test_csv = test.csv\ntask.features = x0,x1,x2\n\
         task.pretrained = base/pretrained.alra\nmodel.layer_dims = 3,6,6,1\nmodel.k_init = 3\n\
         pretrain.steps = 20\nsearch.batch_size = 8\n",
    )
    .unwrap();
    let o = lorank(&["pretrain", "--config", "csv.cfg", "--out", "base"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = lorank(&with_fast(&["search", "--config", "csv.cfg", "--seed", "1", "--out", "s"]), d);
    assert!(o.status.success(), "{}", stderr(&o));
    let r = load_report(d.join("s/search.json")).unwrap();
    assert_eq!(r.ranks.len(), 2);
    assert!(r.ranks.iter().all(|&k| (1..=3).contains(&k)));

    std::fs::write(d.join("broken.csv"), "x0,x1,x2,label\n1,2,oops,4\n").unwrap();
    let o = lorank(&["fullft", "--config", "csv.cfg", "--task.train_csv", "broken.csv"], d);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("oops"), "{}", stderr(&o));
}
