//! `dverec <train|evaluate|recommend|stats> [--config PATH] [--key value ...]`

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Arg, ArgMatches};
use thiserror::Error;

use crate::config::{flag_name, Command, RunConfig, KEYS};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("numeric: {0}")]
    Numeric(String),
    #[error("mismatch: {0}")]
    Mismatch(String),
    #[error("unknown id: {0}")]
    UnknownId(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Data(_) | CliError::Io { .. } => 2,
            CliError::Numeric(_) => 3,
            CliError::Mismatch(_) => 4,
            CliError::UnknownId(_) => 5,
        }
    }
}

const COMMANDS: [(Command, &str); 4] = [
    (Command::Train, "train a model and write checkpoint, split manifest and log"),
    (Command::Evaluate, "score a checkpoint on the test side of its split"),
    (Command::Recommend, "top-k unseen items for one user"),
    (Command::Stats, "interaction counts per period as CSV"),
];

fn cli() -> clap::Command {
    let mut app = clap::Command::new("dverec")
        .about("Dynamic variational embedding recommender")
        .subcommand_required(true)
        .arg_required_else_help(true);
    for (cmd, about) in COMMANDS {
        let mut sub = clap::Command::new(cmd.name()).about(about).arg(
            Arg::new("config")
                .long("config")
                .value_name("PATH")
                .help("key=value file; flags override it"),
        );
        for k in KEYS.iter().filter(|k| k.commands.contains(&cmd)) {
            let help = if k.default.is_empty() {
                k.help.to_string()
            } else {
                format!("{} [default: {}]", k.help, k.default)
            };
            sub = sub.arg(Arg::new(k.name).long(flag_name(k.name)).value_name("VALUE").help(help));
        }
        app = app.subcommand(sub);
    }
    app
}

fn resolve(command: Command, m: &ArgMatches) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::defaults(command);
    if let Some(path) = m.get_one::<String>("config") {
        cfg.merge_file(path.as_ref())?;
    }
    for k in KEYS.iter().filter(|k| k.commands.contains(&command)) {
        if let Some(v) = m.get_one::<String>(k.name) {
            cfg.set(k.name, v)?;
        }
    }
    Ok(cfg)
}

/// Parses arguments, runs one subcommand and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    let matches = match cli().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand required");
    let command = COMMANDS
        .iter()
        .map(|c| c.0)
        .find(|c| c.name() == name)
        .expect("registered subcommand");
    let result = resolve(command, sub).and_then(|cfg| commands::dispatch(&cfg));
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
