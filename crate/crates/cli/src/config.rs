//! Flat `key = value` configuration with dotted keys.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use lorank_core::bilevel::SearchConfig;
use lorank_core::harness::{CsvSchema, PlantedTaskSpec};
use lorank_core::model::{NetworkKind, NetworkSpec, Task};
use lorank_core::pipeline::AutoLoraConfig;
use lorank_core::rankselect::RetrainConfig;
use lorank_core::train::TrainConfig;

use crate::CliError;

/// Every accepted key, its default and a one-line description.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("output.dir", "runs", "directory for reports and checkpoints"),
    ("task.source", "planted", "planted | csv"),
    ("task.train_csv", "", "downstream training data (csv source)"),
    ("task.test_csv", "", "downstream test data (csv source)"),
    ("task.pretrain_csv", "", "pretraining data for `pretrain` (csv source)"),
    ("task.features", "", "comma-separated feature columns"),
    ("task.label", "label", "label column"),
    ("task.pretrained", "", "pretrained checkpoint (csv source)"),
    ("planted.true_ranks", "1,3,6", "planted rank per LoRA layer"),
    ("planted.scale", "1", "perturbation scale (x 0.1 x layer norm)"),
    ("planted.n_pretrain", "512", "pretraining examples"),
    ("planted.n_downstream", "256", "downstream training examples"),
    ("planted.n_test", "256", "downstream test examples"),
    ("planted.noise", "0", "label noise standard deviation"),
    ("pretrain.steps", "300", "full-batch pretraining steps"),
    ("pretrain.lr", "0.05", "pretraining step size"),
    ("model.kind", "mlp", "mlp | tiny_attention"),
    ("model.layer_dims", "16,24,24,24,4", "layer widths; tiny_attention: d_model,d_ffn,output"),
    ("model.seq_len", "1", "tokens per example (tiny_attention)"),
    ("model.task", "regression", "regression | classification"),
    ("model.lora_mask", "default", "default, or one 0/1 flag per body linear"),
    ("model.k_init", "8", "initial rank budget per LoRA layer"),
    ("model.init_std", "0.02", "standard deviation of the initial U"),
    ("search.eta", "0.0001", "lookahead step size"),
    ("search.lr_w", "0.0001", "weight learning rate"),
    ("search.lr_a", "0.001", "selection learning rate"),
    ("search.batch_size", "16", "minibatch size"),
    ("search.max_meta_epochs", "50", "meta-epoch limit"),
    ("search.patience", "5", "epochs without validation improvement before stopping"),
    ("search.hypergrad_mode", "exact", "exact | darts_fd | first_order"),
    ("search.constraint_mode", "softmax", "softmax | sigmoid | none"),
    ("search.schedule", "paired", "paired | interleaved"),
    ("search.weight_optimizer", "sgd", "sgd | adam"),
    ("search.selection_optimizer", "sgd", "sgd | adam"),
    ("search.split_ratio", "0.5", "training share of the downstream data"),
    ("search.record_timings", "false", "record wall-clock times (breaks byte-identical reports)"),
    ("retrain.init", "fresh", "fresh | warm"),
    ("retrain.epochs", "50", "retraining and baseline epochs"),
    ("retrain.batch_size", "16", "retraining and baseline minibatch size"),
    ("retrain.lr", "0.0001", "retraining and baseline learning rate"),
    ("retrain.optimizer", "adam", "sgd | adam"),
    ("grid.ranks", "1,2,3,4,5,6,7,8", "candidate uniform ranks"),
    ("baselines.grid", "false", "also run the grid baseline in `search`"),
    ("baselines.fullft", "false", "also run full finetuning in `search`"),
];

pub fn default_of(key: &str) -> Option<&'static str> {
    KEYS.iter().find(|(k, _, _)| *k == key).map(|(_, d, _)| *d)
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_config_text(text: &str, origin: &str) -> Result<BTreeMap<String, String>, CliError> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::usage(format!("{origin}:{}: expected `key = value`", n + 1)))?;
        let k = k.trim();
        if default_of(k).is_none() {
            return Err(CliError::usage(format!("{origin}:{}: unknown config key `{k}`", n + 1)));
        }
        out.insert(k.to_string(), v.trim().to_string());
    }
    Ok(out)
}

pub fn read_config_file(path: &Path) -> Result<BTreeMap<String, String>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
    parse_config_text(&text, &path.display().to_string())
}

/// Every key with its effective value: defaults, then `file`, then `flags`.
pub fn resolve(
    file: &BTreeMap<String, String>,
    flags: &BTreeMap<String, String>,
) -> Result<BTreeMap<String, String>, CliError> {
    let mut out: BTreeMap<String, String> = KEYS.iter().map(|(k, d, _)| (k.to_string(), d.to_string())).collect();
    for (k, v) in file.iter().chain(flags) {
        if !out.contains_key(k) {
            return Err(CliError::usage(format!("unknown config key `{k}`")));
        }
        out.insert(k.clone(), v.clone());
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub enum TaskSource {
    Planted(PlantedTaskSpec),
    Csv {
        train: PathBuf,
        test: PathBuf,
        pretrain: PathBuf,
        pretrained: PathBuf,
        schema: CsvSchema,
    },
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub source: TaskSource,
    pub network: NetworkSpec,
    pub autolora: AutoLoraConfig,
    pub grid_ranks: Vec<usize>,
    pub run_grid: bool,
    pub run_fullft: bool,
    pub pretrain_steps: usize,
    pub pretrain_lr: f64,
    /// Resolved key/value pairs, echoed into reports.
    pub echo: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn baseline_train(&self) -> TrainConfig {
        self.autolora.retrain.train.clone()
    }
}

struct Values<'a>(&'a BTreeMap<String, String>);

impl Values<'_> {
    fn raw(&self, key: &str) -> &str {
        self.0.get(key).map(String::as_str).expect("resolved config has every key")
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<T, CliError>
    where
        T::Err: Display,
    {
        let raw = self.raw(key);
        raw.parse()
            .map_err(|e| CliError::usage(format!("invalid value `{raw}` for `{key}`: {e}")))
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>, CliError>
    where
        T::Err: Display,
    {
        let raw = self.raw(key);
        if raw.is_empty() {
            return Ok(Vec::new());
        }
        raw.split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|e| CliError::usage(format!("invalid entry `{s}` in `{key}`: {e}")))
            })
            .collect()
    }
}

pub fn build(values: BTreeMap<String, String>, seed: u64, out_override: Option<PathBuf>) -> Result<RunConfig, CliError> {
    let v = Values(&values);
    let kind: NetworkKind = v.get("model.kind")?;
    let dims: Vec<usize> = v.list("model.layer_dims")?;
    let outputs = *dims
        .last()
        .ok_or_else(|| CliError::usage("`model.layer_dims` must not be empty"))?;
    let task = match v.raw("model.task") {
        "regression" => Task::Regression { outputs },
        "classification" => Task::Classification { num_classes: outputs },
        other => {
            return Err(CliError::usage(format!(
                "invalid value `{other}` for `model.task`: expected regression | classification"
            )))
        }
    };
    let mut network = match kind {
        NetworkKind::Mlp => NetworkSpec::mlp(dims.clone(), task),
        NetworkKind::TinyAttention => {
            if dims.len() != 3 {
                return Err(CliError::usage("tiny_attention needs `model.layer_dims = d_model,d_ffn,output`"));
            }
            NetworkSpec::tiny_attention(dims[0], dims[1], v.get("model.seq_len")?, task)
        }
    };
    network.k_init = v.get("model.k_init")?;
    network.init_std = v.get("model.init_std")?;
    if v.raw("model.lora_mask") != "default" {
        network.lora_mask = v
            .list::<u8>("model.lora_mask")?
            .into_iter()
            .map(|b| b != 0)
            .collect();
    }
    network.validate().map_err(CliError::from)?;

    let source = match v.raw("task.source") {
        "planted" => TaskSource::Planted(PlantedTaskSpec {
            network: network.clone(),
            true_ranks: v.list("planted.true_ranks")?,
            perturbation_scale: v.get("planted.scale")?,
            n_pretrain: v.get("planted.n_pretrain")?,
            n_downstream: v.get("planted.n_downstream")?,
            n_test: v.get("planted.n_test")?,
            noise: v.get("planted.noise")?,
            pretrain_steps: v.get("pretrain.steps")?,
            pretrain_lr: v.get("pretrain.lr")?,
            seed,
        }),
        "csv" => {
            let path = |key: &str| -> Result<PathBuf, CliError> {
                match v.raw(key) {
                    "" => Err(CliError::usage(format!("`{key}` is required when `task.source = csv`"))),
                    p => Ok(PathBuf::from(p)),
                }
            };
            let train = path("task.train_csv")?;
            let pretrain = match v.raw("task.pretrain_csv") {
                "" => train.clone(),
                p => PathBuf::from(p),
            };
            let features: Vec<String> = v.list("task.features")?;
            if features.is_empty() {
                return Err(CliError::usage("`task.features` is required when `task.source = csv`"));
            }
            TaskSource::Csv {
                test: path("task.test_csv")?,
                pretrained: PathBuf::from(v.raw("task.pretrained")),
                pretrain,
                train,
                schema: CsvSchema {
                    features,
                    label: v.raw("task.label").to_string(),
                    classification: matches!(task, Task::Classification { .. }),
                },
            }
        }
        other => {
            return Err(CliError::usage(format!(
                "invalid value `{other}` for `task.source`: expected planted | csv"
            )))
        }
    };

    let search = SearchConfig {
        eta: v.get("search.eta")?,
        lr_w: v.get("search.lr_w")?,
        lr_a: v.get("search.lr_a")?,
        batch_size: v.get("search.batch_size")?,
        max_meta_epochs: v.get("search.max_meta_epochs")?,
        patience: v.get("search.patience")?,
        hypergrad_mode: v.get("search.hypergrad_mode")?,
        constraint_mode: v.get("search.constraint_mode")?,
        schedule: v.get("search.schedule")?,
        weight_optimizer: v.get("search.weight_optimizer")?,
        selection_optimizer: v.get("search.selection_optimizer")?,
        seed,
        record_timings: v.get("search.record_timings")?,
    };
    search.validate().map_err(CliError::from)?;
    let retrain = RetrainConfig {
        init: v.get("retrain.init")?,
        train: TrainConfig {
            epochs: v.get("retrain.epochs")?,
            batch_size: v.get("retrain.batch_size")?,
            lr: v.get("retrain.lr")?,
            optimizer: v.get("retrain.optimizer")?,
            seed,
        },
    };
    if retrain.train.batch_size == 0 {
        return Err(CliError::usage("`retrain.batch_size` must be at least 1"));
    }
    let split_ratio: f64 = v.get("search.split_ratio")?;
    let grid_ranks: Vec<usize> = v.list("grid.ranks")?;

    let out_dir = out_override
        .or_else(|| std::env::var_os("LORANK_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(v.raw("output.dir")));
    Ok(RunConfig {
        seed,
        out_dir,
        source,
        network,
        autolora: AutoLoraConfig {
            search,
            split_ratio,
            retrain,
        },
        grid_ranks,
        run_grid: v.get("baselines.grid")?,
        run_fullft: v.get("baselines.fullft")?,
        pretrain_steps: v.get("pretrain.steps")?,
        pretrain_lr: v.get("pretrain.lr")?,
        echo: values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn comments_and_dotted_keys() {
        let m = parse_config_text("# hi\nmodel.layer_dims = 8,16,16,4  # trailing\n\nsearch.eta=0.5\n", "t").unwrap();
        assert_eq!(m["model.layer_dims"], "8,16,16,4");
        assert_eq!(m["search.eta"], "0.5");
    }

    #[test]
    fn unknown_key_is_named() {
        let e = parse_config_text("search.etaa = 1", "t").unwrap_err();
        assert!(e.message.contains("search.etaa"));
        let e = resolve(&BTreeMap::new(), &[("nope".to_string(), "1".to_string())].into()).unwrap_err();
        assert!(e.message.contains("`nope`"));
    }

    #[test]
    fn flags_override_file() {
        let file = parse_config_text("search.lr_a = 0.5", "t").unwrap();
        let flags = [("search.lr_a".to_string(), "0.25".to_string())].into();
        let r = resolve(&file, &flags).unwrap();
        assert_eq!(r["search.lr_a"], "0.25");
        assert_eq!(r["search.lr_w"], "0.0001");
    }

    #[test]
    fn defaults_build() {
        let cfg = build(resolve(&BTreeMap::new(), &BTreeMap::new()).unwrap(), 3, Some("x".into())).unwrap();
        assert_eq!(cfg.autolora.search, SearchConfig { seed: 3, ..SearchConfig::default() });
        assert_eq!(cfg.network.k_init, 8);
        assert_eq!(cfg.grid_ranks, (1..=8).collect::<Vec<_>>());
        match cfg.source {
            TaskSource::Planted(spec) => assert_eq!(spec, PlantedTaskSpec::default_suite(3)),
            TaskSource::Csv { .. } => panic!("default source is planted"),
        }
    }

    #[test]
    fn bad_value_is_reported() {
        let flags = [("search.hypergrad_mode".to_string(), "magic".to_string())].into();
        let e = build(resolve(&BTreeMap::new(), &flags).unwrap(), 0, None).unwrap_err();
        assert!(e.message.contains("search.hypergrad_mode"));
    }
}
