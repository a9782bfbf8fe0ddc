//! `lorank`: search, retrain, baselines and reproduction from the command line.

mod commands;
pub mod config;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;

use clap::{Arg, ArgAction, ArgMatches, Command};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_NUMERIC: i32 = 2;

/// A failure with its exit code and a stable kind tag.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub kind: &'static str,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_USAGE,
            kind: "usage",
            message: message.into(),
        }
    }

    pub fn numeric(kind: &'static str, message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_NUMERIC,
            kind,
            message: message.into(),
        }
    }
}

impl From<lorank_core::Error> for CliError {
    fn from(e: lorank_core::Error) -> Self {
        use lorank_core::Error as E;
        let code = match e {
            E::Numeric(_) | E::Training { .. } => EXIT_NUMERIC,
            _ => EXIT_USAGE,
        };
        CliError {
            code,
            kind: e.kind(),
            message: e.to_string(),
        }
    }
}

impl fmt::Display for CliError {
    /// One line: `lorank:error:<kind>: <message>`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let msg = self.message.replace(['\n', '\r'], " ");
        write!(f, "lorank:error:{}: {}", self.kind, msg.trim())
    }
}

fn keys_help() -> String {
    let mut s = String::from("Config keys (`--config` file lines `key = value`, or `--key value` flags):\n");
    for (k, d, help) in config::KEYS {
        let d = if d.is_empty() { "\"\"" } else { d };
        s += &format!("  {k:<28} default {d:<18} {help}\n");
    }
    s
}

fn common_args(cmd: Command) -> Command {
    let mut cmd = cmd
        .arg(Arg::new("config").long("config").value_name("FILE").help("plain-text key = value configuration"))
        .arg(
            Arg::new("seed")
                .long("seed")
                .value_name("N")
                .value_parser(clap::value_parser!(u64))
                .help("seed for data, initialization and batching"),
        )
        .arg(
            Arg::new("jobs")
                .long("jobs")
                .value_name("N")
                .value_parser(clap::value_parser!(usize))
                .default_value("1")
                .help("worker threads for grid trials"),
        )
        .arg(Arg::new("out").long("out").value_name("DIR").help("output directory (overrides LORANK_OUT and output.dir)"));
    for (k, d, help) in config::KEYS {
        let d = if d.is_empty() { "\"\"" } else { d };
        cmd = cmd.arg(
            Arg::new(*k)
                .long(*k)
                .value_name("VALUE")
                .action(ArgAction::Set)
                .help(format!("{help} [default: {d}]")),
        );
    }
    cmd
}

fn checkpoint_arg(cmd: Command) -> Command {
    cmd.arg(
        Arg::new("checkpoint")
            .long("checkpoint")
            .value_name("FILE")
            .required(true)
            .help("checkpoint to start from"),
    )
}

pub fn app() -> Command {
    let report_arg = || Arg::new("report").value_name("REPORT").required(true).help("run report (JSON)");
    Command::new("lorank")
        .about("Per-layer LoRA rank search by bilevel optimization of selection weights")
        .subcommand_required(true)
        .after_help(keys_help())
        .subcommand(common_args(Command::new("pretrain").about("pretrain the frozen base network and save it")))
        .subcommand(common_args(
            Command::new("search").about("search selection weights, threshold ranks and retrain (requires --seed)"),
        ))
        .subcommand(checkpoint_arg(common_args(
            Command::new("retrain").about("threshold a searched checkpoint and retrain at the chosen ranks"),
        )))
        .subcommand(common_args(Command::new("grid").about("uniform-rank grid-search baseline (requires --seed)")))
        .subcommand(common_args(Command::new("fullft").about("full-finetuning baseline")))
        .subcommand(checkpoint_arg(common_args(Command::new("eval").about("evaluate a checkpoint on the task data"))))
        .subcommand(
            Command::new("report")
                .about("print the per-layer rank table of a report and write its trajectory CSV")
                .arg(report_arg())
                .arg(Arg::new("out").long("out").value_name("DIR").help("where to write the trajectory CSV")),
        )
        .subcommand(
            Command::new("repro")
                .about("re-run a report's configuration and compare the numbers")
                .arg(report_arg())
                .arg(
                    Arg::new("jobs")
                        .long("jobs")
                        .value_name("N")
                        .value_parser(clap::value_parser!(usize))
                        .default_value("1"),
                ),
        )
}

/// Config values from `--config` and per-key flags of a subcommand.
pub(crate) fn layered_values(m: &ArgMatches) -> Result<(BTreeMap<String, String>, BTreeMap<String, String>), CliError> {
    let file = match m.get_one::<String>("config") {
        Some(p) => config::read_config_file(&PathBuf::from(p))?,
        None => BTreeMap::new(),
    };
    let flags = config::KEYS
        .iter()
        .filter_map(|(k, _, _)| m.get_one::<String>(k).map(|v| (k.to_string(), v.clone())))
        .collect();
    Ok((file, flags))
}

/// Runs the CLI and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match app().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return EXIT_OK;
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("{}", CliError::usage(first.to_string()));
            return EXIT_USAGE;
        }
    };
    match commands::dispatch(&matches) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("{e}");
            e.code
        }
    }
}
