//! Flat `key=value` run configuration shared by config files and flags.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Train,
    Evaluate,
    Recommend,
    Stats,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Evaluate => "evaluate",
            Command::Recommend => "recommend",
            Command::Stats => "stats",
        }
    }
}

pub struct KeySpec {
    pub name: &'static str,
    /// Empty when the key has no default.
    pub default: &'static str,
    pub help: &'static str,
    pub commands: &'static [Command],
}

use Command::*;

const T: &[Command] = &[Train];
const E: &[Command] = &[Evaluate];
const R: &[Command] = &[Recommend];
const S: &[Command] = &[Stats];

pub const KEYS: &[KeySpec] = &[
    KeySpec { name: "data", default: "", help: "interaction log (.dat with `::` fields, or .csv with header)", commands: &[Train, Evaluate, Recommend, Stats] },
    KeySpec { name: "output", default: "", help: "output directory (train: required; evaluate: defaults to the checkpoint's directory)", commands: &[Train, Evaluate] },
    KeySpec { name: "seed", default: "0", help: "rng seed for init, splits, negatives and noise", commands: &[Train, Evaluate, Recommend] },
    KeySpec { name: "task", default: "explicit", help: "explicit (ratings, squared loss) or implicit (binary, logistic loss)", commands: T },
    KeySpec { name: "time_scheme", default: "calendar_month", help: "equal_width, equal_count or calendar_month", commands: T },
    KeySpec { name: "time_bins", default: "12", help: "number of bins for equal_width and equal_count", commands: T },
    KeySpec { name: "train_fraction", default: "0.75", help: "chronological train share (explicit)", commands: T },
    KeySpec { name: "n_negatives", default: "100", help: "sampled negatives per held-out user (implicit)", commands: T },
    KeySpec { name: "epochs", default: "20", help: "total training epochs", commands: T },
    KeySpec { name: "batch_size", default: "256", help: "examples per optimizer step", commands: T },
    KeySpec { name: "neg_ratio", default: "4", help: "negatives per positive in implicit training, 3..=5", commands: T },
    KeySpec { name: "allow_neg_ratio_override", default: "false", help: "permit neg_ratio outside 3..=5", commands: T },
    KeySpec { name: "learning_rate", default: "0.001", help: "optimizer step size", commands: T },
    KeySpec { name: "weight_decay", default: "0", help: "L2 penalty on every parameter", commands: T },
    KeySpec { name: "optimizer", default: "adam", help: "adam or sgd", commands: T },
    KeySpec { name: "checkpoint_every", default: "0", help: "also save a checkpoint every N epochs (0 disables)", commands: T },
    KeySpec { name: "resume", default: "", help: "checkpoint to continue training from", commands: T },
    KeySpec { name: "dim", default: "16", help: "embedding dimension R", commands: T },
    KeySpec { name: "variance_hidden_dim", default: "16", help: "width of the per-node variance input", commands: T },
    KeySpec { name: "variance_mlp_dim", default: "16", help: "hidden width of the variance head", commands: T },
    KeySpec { name: "lstm_hidden_dim", default: "16", help: "LSTM hidden size", commands: T },
    KeySpec { name: "g", default: "square", help: "variance activation: relu, abs or square", commands: T },
    KeySpec { name: "variance_mode", default: "dynamic", help: "dynamic (LSTM over bins) or static", commands: T },
    KeySpec { name: "tower_dims", default: "64,32,16", help: "comma-separated hidden widths of the interaction tower", commands: T },
    KeySpec { name: "precision", default: "f32", help: "f32 or f64 arithmetic", commands: T },
    KeySpec { name: "checkpoint", default: "", help: "trained model file", commands: &[Evaluate, Recommend] },
    KeySpec { name: "split", default: "", help: "split manifest written by train", commands: E },
    KeySpec { name: "k", default: "10", help: "cut-off for HR@k / NDCG@k, or list length", commands: &[Evaluate, Recommend] },
    KeySpec { name: "ndcg", default: "single_relevant", help: "single_relevant or paper_eq7", commands: E },
    KeySpec { name: "time_policy", default: "continue", help: "continue or freeze past the last trained bin", commands: &[Evaluate, Recommend] },
    KeySpec { name: "user", default: "", help: "raw user id", commands: R },
    KeySpec { name: "mode", default: "mean", help: "mean or sample embeddings", commands: R },
    KeySpec { name: "samples", default: "0", help: "draws per item in sample mode; adds a score std column", commands: R },
    KeySpec { name: "bin", default: "", help: "time bin to score at (default: the last bin)", commands: R },
    KeySpec { name: "group_by", default: "item", help: "item or user", commands: S },
    KeySpec { name: "id", default: "", help: "raw id to count (default: every record)", commands: S },
    KeySpec { name: "granularity", default: "month", help: "day, month or year", commands: S },
    KeySpec { name: "out", default: "", help: "CSV output path (default: stdout)", commands: S },
];

pub fn spec(name: &str) -> Option<&'static KeySpec> {
    KEYS.iter().find(|k| k.name == name)
}

pub fn flag_name(key: &str) -> String {
    key.replace('_', "-")
}

/// Resolved settings for one subcommand.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub command: Command,
    values: BTreeMap<String, String>,
    /// Keys set by a file or flag rather than defaulted.
    explicit: Vec<String>,
}

impl RunConfig {
    pub fn defaults(command: Command) -> Self {
        let values = KEYS
            .iter()
            .filter(|k| k.commands.contains(&command) && !k.default.is_empty())
            .map(|k| (k.name.to_string(), k.default.to_string()))
            .collect();
        Self {
            command,
            values,
            explicit: Vec::new(),
        }
    }

    /// Sets a key; unknown keys are rejected, keys of other commands ignored.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let Some(spec) = spec(key) else {
            return Err(CliError::Config(format!("unknown key {key:?}")));
        };
        if spec.commands.contains(&self.command) {
            self.values.insert(key.to_string(), value.to_string());
            if !self.explicit.iter().any(|k| k == key) {
                self.explicit.push(key.to_string());
            }
        }
        Ok(())
    }

    pub fn merge_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("{}:{}: expected key=value", path.display(), n + 1)))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| CliError::Config(format!("{}:{}: {e}", path.display(), n + 1)))?;
        }
        Ok(())
    }

    pub fn is_explicit(&self, key: &str) -> bool {
        self.explicit.iter().any(|k| k == key)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str).filter(|v| !v.is_empty())
    }

    pub fn get<V: FromStr>(&self, key: &str) -> Result<V, CliError>
    where
        V::Err: std::fmt::Display,
    {
        let raw = self.require(key)?;
        raw.parse()
            .map_err(|e| CliError::Config(format!("--{} {raw:?}: {e}", flag_name(key))))
    }

    pub fn get_opt<V: FromStr>(&self, key: &str) -> Result<Option<V>, CliError>
    where
        V::Err: std::fmt::Display,
    {
        self.raw(key).map(|_| self.get(key)).transpose()
    }

    pub fn require(&self, key: &str) -> Result<&str, CliError> {
        self.raw(key)
            .ok_or_else(|| CliError::Config(format!("--{} is required", flag_name(key))))
    }

    pub fn path(&self, key: &str) -> Result<PathBuf, CliError> {
        Ok(PathBuf::from(self.require(key)?))
    }

    pub fn bool(&self, key: &str) -> Result<bool, CliError> {
        match self.require(key)? {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            other => Err(CliError::Config(format!("--{} {other:?}: expected true or false", flag_name(key)))),
        }
    }

    pub fn usize_list(&self, key: &str) -> Result<Vec<usize>, CliError> {
        self.require(key)?
            .split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|e| CliError::Config(format!("--{} {s:?}: {e}", flag_name(key))))
            })
            .collect()
    }
}
