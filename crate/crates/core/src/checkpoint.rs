//! Single-file model container.
//!
//! A text header of `key=value` lines (magic and version first, terminated
//! by `end`) followed by named little-endian f32 arrays, each written as
//! `u32 name_len, name, u32 rank, rank x u32 dims, data`.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::data::{BinScheme, IdMap, TimeBins};
use crate::dve::{GActivation, VarianceMode};
use crate::model::{DveModel, ModelConfig, ModelError, Task};
use crate::tensor::{Optimizer, OptimizerKind, ParamStore, Precision, Tensor};

pub const MAGIC: &str = "dverec-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("unsupported checkpoint version {found} (expected {FORMAT_VERSION})")]
    Version { found: String },
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

fn fmt_err(msg: impl Into<String>) -> CheckpointError {
    CheckpointError::Format(msg.into())
}

/// Everything needed to score, evaluate or resume training.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: DveModel,
    pub optimizer: Optimizer,
    pub users: IdMap,
    pub items: IdMap,
    pub bins: TimeBins,
    pub seed: u64,
    /// Training epochs completed.
    pub epoch: usize,
    /// Last bin holding training data.
    pub train_horizon: usize,
}

fn precision_str(p: Precision) -> &'static str {
    match p {
        Precision::F32 => "f32",
        Precision::F64 => "f64",
    }
}

fn join<T: ToString>(xs: impl IntoIterator<Item = T>) -> String {
    xs.into_iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl Checkpoint {
    fn header(&self) -> String {
        let c = &self.model.config;
        let mut h = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(h, "{k}={v}");
        };
        kv("format", MAGIC.into());
        kv("version", FORMAT_VERSION.to_string());
        kv("task", c.task.as_str().into());
        kv("n_users", c.n_users.to_string());
        kv("n_items", c.n_items.to_string());
        kv("dim", c.dim.to_string());
        kv("variance_hidden_dim", c.variance_hidden_dim.to_string());
        kv("variance_mlp_dim", c.variance_mlp_dim.to_string());
        kv("lstm_hidden_dim", c.lstm_hidden_dim.to_string());
        kv("g", c.g.as_str().into());
        kv("variance_mode", c.variance_mode.as_str().into());
        kv("tower_dims", join(&c.tower_dims));
        kv("n_bins", c.n_bins.to_string());
        kv("precision", precision_str(c.precision).into());
        kv("time_scheme", self.bins.scheme.as_str().into());
        kv("bin_starts", join(self.bins.starts()));
        kv("seed", self.seed.to_string());
        kv("epoch", self.epoch.to_string());
        kv("train_horizon", self.train_horizon.to_string());
        match self.optimizer.kind() {
            OptimizerKind::Sgd => kv("optimizer", "sgd".into()),
            OptimizerKind::Adam { beta1, beta2, eps } => {
                kv("optimizer", "adam".into());
                kv("adam_beta1", beta1.to_string());
                kv("adam_beta2", beta2.to_string());
                kv("adam_eps", eps.to_string());
            }
        }
        kv("learning_rate", self.optimizer.learning_rate.to_string());
        kv("weight_decay", self.optimizer.weight_decay.to_string());
        kv("optimizer_steps", self.optimizer.step_count().to_string());
        kv("user_ids", self.users.raw_ids().join(","));
        kv("item_ids", self.items.raw_ids().join(","));
        kv("arrays", self.arrays().len().to_string());
        h.push_str("end\n");
        h
    }

    fn arrays(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = self.model.params.iter().map(|(n, t)| (n.to_string(), t)).collect();
        let (m, v) = self.optimizer.moments();
        let names: Vec<&str> = self.model.params.iter().map(|(n, _)| n).collect();
        for (n, t) in names.iter().zip(m) {
            out.push((format!("adam.m.{n}"), t));
        }
        for (n, t) in names.iter().zip(v) {
            out.push((format!("adam.v.{n}"), t));
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.header().into_bytes();
        for (name, t) in self.arrays() {
            out.extend((name.len() as u32).to_le_bytes());
            out.extend(name.as_bytes());
            out.extend((t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend((d as u32).to_le_bytes());
            }
            for &x in t.data() {
                out.extend((x as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let mut next_line = || -> Result<&str> {
            let rest = &bytes[pos..];
            let nl = rest.iter().position(|&b| b == b'\n').ok_or_else(|| fmt_err("truncated header"))?;
            pos += nl + 1;
            std::str::from_utf8(&rest[..nl]).map_err(|_| fmt_err("header is not UTF-8"))
        };
        if next_line()? != format!("format={MAGIC}") {
            return Err(fmt_err("not a dverec checkpoint"));
        }
        let version = next_line()?;
        match version.strip_prefix("version=") {
            Some(v) if v == FORMAT_VERSION.to_string() => {}
            Some(v) => return Err(CheckpointError::Version { found: v.to_string() }),
            None => return Err(CheckpointError::Version { found: version.to_string() }),
        }
        let mut kv: HashMap<String, String> = HashMap::new();
        loop {
            let line = next_line()?;
            if line == "end" {
                break;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| fmt_err(format!("header line {line:?}")))?;
            kv.insert(k.to_string(), v.to_string());
        }
        let get = |k: &str| kv.get(k).map(String::as_str).ok_or_else(|| fmt_err(format!("missing header key {k}")));
        fn parse<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| fmt_err(format!("bad value {v:?} for {k}")))
        }
        let num = |k: &str| -> Result<usize> { parse(k, get(k)?) };
        let list = |k: &str| -> Result<Vec<String>> {
            let v = get(k)?;
            Ok(if v.is_empty() { Vec::new() } else { v.split(',').map(str::to_string).collect() })
        };
        let precision = match get("precision")? {
            "f32" => Precision::F32,
            "f64" => Precision::F64,
            other => return Err(fmt_err(format!("precision {other:?}"))),
        };
        let config = ModelConfig {
            task: get("task")?.parse::<Task>().map_err(fmt_err)?,
            n_users: num("n_users")?,
            n_items: num("n_items")?,
            dim: num("dim")?,
            variance_hidden_dim: num("variance_hidden_dim")?,
            variance_mlp_dim: num("variance_mlp_dim")?,
            lstm_hidden_dim: num("lstm_hidden_dim")?,
            g: get("g")?.parse::<GActivation>().map_err(fmt_err)?,
            variance_mode: get("variance_mode")?.parse::<VarianceMode>().map_err(fmt_err)?,
            tower_dims: list("tower_dims")?.iter().map(|d| parse("tower_dims", d)).collect::<Result<_>>()?,
            n_bins: num("n_bins")?,
            precision,
        };
        let scheme = get("time_scheme")?.parse::<BinScheme>().map_err(fmt_err)?;
        let starts: Vec<i64> = list("bin_starts")?.iter().map(|s| parse("bin_starts", s)).collect::<Result<_>>()?;
        let bins = TimeBins::from_starts(scheme, starts).map_err(|e| fmt_err(e.to_string()))?;
        if bins.n_bins() != config.n_bins {
            return Err(fmt_err("bin boundaries disagree with n_bins"));
        }
        let users = IdMap::from_raw(list("user_ids")?).map_err(|e| fmt_err(e.to_string()))?;
        let items = IdMap::from_raw(list("item_ids")?).map_err(|e| fmt_err(e.to_string()))?;
        if users.len() != config.n_users || items.len() != config.n_items {
            return Err(fmt_err("id maps disagree with model dimensions"));
        }
        let kind = match get("optimizer")? {
            "sgd" => OptimizerKind::Sgd,
            "adam" => OptimizerKind::Adam {
                beta1: parse("adam_beta1", get("adam_beta1")?)?,
                beta2: parse("adam_beta2", get("adam_beta2")?)?,
                eps: parse("adam_eps", get("adam_eps")?)?,
            },
            other => return Err(fmt_err(format!("optimizer {other:?}"))),
        };
        let n_arrays = num("arrays")?;

        let mut arrays = Vec::with_capacity(n_arrays);
        for _ in 0..n_arrays {
            let (name, t) = read_array(bytes, &mut pos)?;
            arrays.push((name, t));
        }
        if pos != bytes.len() {
            return Err(fmt_err(format!("{} trailing bytes", bytes.len() - pos)));
        }
        let mut params = ParamStore::new();
        let mut first = Vec::new();
        let mut second = Vec::new();
        for (name, t) in arrays {
            if let Some(n) = name.strip_prefix("adam.m.") {
                check_moment(&params, n, &t)?;
                first.push(t);
            } else if let Some(n) = name.strip_prefix("adam.v.") {
                check_moment(&params, n, &t)?;
                second.push(t);
            } else {
                if params.find(&name).is_some() {
                    return Err(fmt_err(format!("duplicate array {name}")));
                }
                params.add(name, t);
            }
        }
        let model = DveModel::from_params(config, params)?;
        let mut optimizer = Optimizer::new(kind, parse("learning_rate", get("learning_rate")?)?, &model.params, precision);
        optimizer.weight_decay = parse("weight_decay", get("weight_decay")?)?;
        optimizer
            .restore(parse("optimizer_steps", get("optimizer_steps")?)?, first, second)
            .map_err(|e| fmt_err(e.to_string()))?;
        Ok(Self {
            model,
            optimizer,
            users,
            items,
            bins,
            seed: parse("seed", get("seed")?)?,
            epoch: num("epoch")?,
            train_horizon: num("train_horizon")?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }

    pub fn fingerprint(&self) -> String {
        crate::data::id_maps_fingerprint(&self.users, &self.items)
    }
}

fn check_moment(params: &ParamStore, name: &str, t: &Tensor) -> Result<()> {
    let id = params.find(name).ok_or_else(|| fmt_err(format!("moment for unknown parameter {name}")))?;
    if params.get(id).shape() != t.shape() {
        return Err(fmt_err(format!("moment shape mismatch for {name}")));
    }
    Ok(())
}

fn read_u32(bytes: &[u8], pos: &mut usize) -> Result<u32> {
    let end = *pos + 4;
    let b = bytes.get(*pos..end).ok_or_else(|| fmt_err("truncated array section"))?;
    *pos = end;
    Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
}

fn read_array(bytes: &[u8], pos: &mut usize) -> Result<(String, Tensor)> {
    let len = read_u32(bytes, pos)? as usize;
    let raw = bytes.get(*pos..*pos + len).ok_or_else(|| fmt_err("truncated array name"))?;
    *pos += len;
    let name = String::from_utf8(raw.to_vec()).map_err(|_| fmt_err("array name is not UTF-8"))?;
    let rank = read_u32(bytes, pos)? as usize;
    if rank == 0 || rank > 8 {
        return Err(fmt_err(format!("array {name} has rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u32(bytes, pos)? as usize);
    }
    let count: usize = shape.iter().product();
    let raw = bytes
        .get(*pos..*pos + 4 * count)
        .ok_or_else(|| fmt_err(format!("truncated data for {name}")))?;
    *pos += 4 * count;
    let data = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    let t = Tensor::new(shape, data).map_err(|e| fmt_err(format!("{name}: {e}")))?;
    Ok((name, t))
}
