//! Subcommand bodies. Each returns its result so tests can drive them
//! without a process boundary.

use std::collections::HashSet;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use dverec_core::checkpoint::{Checkpoint, CheckpointError};
use dverec_core::data::{
    bin_timestamps, chrono_split, id_maps_tsv, index_with_bins, interaction_counts, leave_one_out,
    read_interactions, BinScheme, BinnedDataset, BinnedRecord, DataError, Granularity, GroupBy, ParsedLog,
    SplitKind, SplitManifest,
};
use dverec_core::dve::{EmbeddingMode, GActivation, VarianceMode};
use dverec_core::eval::{
    evaluate_ranking, evaluate_rmse, global_mean_baseline, reports_json, reports_tsv, MetricReport, NdcgFormula,
};
use dverec_core::model::{DveModel, ModelConfig, ModelError, Task, TimePolicy};
use dverec_core::tensor::{OptimizerKind, Precision};
use dverec_core::train::{global_mean, TrainConfig, TrainError, Trainer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{Command, RunConfig};
use crate::CliError;

/// Stream reserved for the leave-one-out negative draw.
const SPLIT_STREAM: u64 = u64::MAX;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const SPLIT_FILE: &str = "split.tsv";
pub const IDMAP_FILE: &str = "idmap.tsv";
pub const LOG_FILE: &str = "train.log";
pub const METRICS_TSV: &str = "metrics.tsv";
pub const METRICS_JSON: &str = "metrics.json";
const LOCK_FILE: &str = ".dverec.lock";

pub fn dispatch(cfg: &RunConfig) -> Result<(), CliError> {
    match cfg.command {
        Command::Train => {
            let s = cmd_train(cfg)?;
            match s.final_loss {
                Some(l) => println!("final loss\t{l:.6}"),
                None => println!("no epochs run"),
            }
            println!("checkpoint\t{}", s.checkpoint.display());
        }
        Command::Evaluate => {
            for r in cmd_evaluate(cfg)? {
                println!("{}\t{:.6}", r.label(), r.value);
            }
        }
        Command::Recommend => {
            let recs = cmd_recommend(cfg)?;
            write_recommendations(io::stdout().lock(), &recs).map_err(|e| stdout_err(e.into()))?;
        }
        Command::Stats => {
            let rows = cmd_stats(cfg)?;
            match cfg.raw("out") {
                Some(p) => {
                    let path = PathBuf::from(p);
                    let f = File::create(&path).map_err(|source| CliError::Io { path: path.clone(), source })?;
                    write_counts(f, &rows).map_err(|source| CliError::Io { path, source })?;
                }
                None => write_counts(io::stdout().lock(), &rows).map_err(stdout_err)?,
            }
        }
    }
    Ok(())
}

fn stdout_err(source: io::Error) -> CliError {
    CliError::Io {
        path: PathBuf::from("<stdout>"),
        source,
    }
}

fn data_err(e: DataError) -> CliError {
    match e {
        DataError::UnknownId(id) => CliError::UnknownId(id),
        other => CliError::Data(other.to_string()),
    }
}

fn model_err(e: ModelError) -> CliError {
    match e {
        ModelError::Tensor(t) => CliError::Numeric(t.to_string()),
        other => CliError::Data(other.to_string()),
    }
}

fn train_err(e: TrainError) -> CliError {
    match e {
        TrainError::NonFiniteLoss { .. } => CliError::Numeric(e.to_string()),
        TrainError::Config(m) => CliError::Config(m),
        TrainError::Io { path, source } => CliError::Io { path, source },
        TrainError::Model(m) => model_err(m),
    }
}

fn checkpoint_err(e: CheckpointError) -> CliError {
    match e {
        CheckpointError::Io { path, source } => CliError::Io { path, source },
        CheckpointError::Version { .. } => CliError::Mismatch(e.to_string()),
        other => CliError::Data(other.to_string()),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Exclusive claim on an output directory, released on drop.
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|source| CliError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => Err(CliError::Config(format!(
                "{} is in use by another run (remove {} if stale)",
                dir.display(),
                path.display()
            ))),
            Err(source) => Err(CliError::Io { path, source }),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

pub fn load_log(path: &Path) -> Result<ParsedLog, CliError> {
    let log = read_interactions(path).map_err(data_err)?;
    if log.malformed > 0 {
        log::warn!("{}: skipped {} malformed lines", path.display(), log.malformed);
    }
    if log.records.is_empty() {
        return Err(CliError::Data(format!("{}: no interactions", path.display())));
    }
    Ok(log)
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub split: PathBuf,
    pub log: PathBuf,
    pub final_loss: Option<f64>,
    pub epochs: usize,
}

fn model_config(cfg: &RunConfig, task: Task, ds: &BinnedDataset) -> Result<ModelConfig, CliError> {
    let mut m = ModelConfig::new(task, ds.n_users(), ds.n_items(), ds.n_bins());
    m.dim = cfg.get("dim")?;
    m.variance_hidden_dim = cfg.get("variance_hidden_dim")?;
    m.variance_mlp_dim = cfg.get("variance_mlp_dim")?;
    m.lstm_hidden_dim = cfg.get("lstm_hidden_dim")?;
    m.g = cfg.get::<GActivation>("g")?;
    m.variance_mode = cfg.get::<VarianceMode>("variance_mode")?;
    m.tower_dims = cfg.usize_list("tower_dims")?;
    m.precision = match cfg.require("precision")? {
        "f32" => Precision::F32,
        "f64" => Precision::F64,
        other => return Err(CliError::Config(format!("--precision {other:?}: expected f32 or f64"))),
    };
    Ok(m)
}

fn train_config(cfg: &RunConfig, task: Task, seed: u64) -> Result<TrainConfig, CliError> {
    let mut t = TrainConfig::new(task, seed);
    t.epochs = cfg.get("epochs")?;
    t.batch_size = cfg.get("batch_size")?;
    t.neg_ratio = cfg.get("neg_ratio")?;
    t.allow_neg_ratio_override = cfg.bool("allow_neg_ratio_override")?;
    t.learning_rate = cfg.get("learning_rate")?;
    t.weight_decay = cfg.get("weight_decay")?;
    t.optimizer = match cfg.require("optimizer")? {
        "adam" => OptimizerKind::adam(),
        "sgd" => OptimizerKind::Sgd,
        other => return Err(CliError::Config(format!("--optimizer {other:?}: expected adam or sgd"))),
    };
    t.checkpoint_every = cfg.get("checkpoint_every")?;
    Ok(t)
}

pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary, CliError> {
    let task: Task = cfg.get("task")?;
    let seed: u64 = cfg.get("seed")?;
    let scheme: BinScheme = cfg.get("time_scheme")?;
    let n_bins: usize = cfg.get("time_bins")?;
    let tc = train_config(cfg, task, seed)?;
    if task == Task::Explicit && cfg.is_explicit("neg_ratio") {
        log::warn!("--neg-ratio only applies to implicit feedback; ignored");
    }
    tc.validate().map_err(train_err)?;
    let data = cfg.path("data")?;
    let out = cfg.path("output")?;

    let log = load_log(&data)?;
    let _lock = OutputLock::acquire(&out)?;
    let ds = bin_timestamps(&log.records, n_bins, scheme).map_err(data_err)?;
    let split = match task {
        Task::Explicit => {
            let frac: f64 = cfg.get("train_fraction")?;
            SplitKind::Chrono(chrono_split(&ds.records, frac).map_err(|e| CliError::Config(e.to_string()))?)
        }
        Task::Implicit => {
            let n_neg: usize = cfg.get("n_negatives")?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(SPLIT_STREAM);
            let s = leave_one_out(&ds, n_neg, &mut rng).map_err(data_err)?;
            if !s.excluded_users.is_empty() {
                log::warn!("{} users with a single interaction excluded", s.excluded_users.len());
            }
            if !s.shrunk_users.is_empty() {
                log::warn!("{} users had fewer than {n_neg} eligible negatives", s.shrunk_users.len());
            }
            SplitKind::LeaveOneOut(s)
        }
    };
    let manifest = SplitManifest {
        fingerprint: ds.fingerprint(),
        n_records: ds.records.len(),
        seed,
        split,
    };
    let split_path = out.join(SPLIT_FILE);
    write_file(&split_path, manifest.to_text().as_bytes())?;
    write_file(&out.join(IDMAP_FILE), id_maps_tsv(&ds.users, &ds.items).as_bytes())?;

    let train_idx = match &manifest.split {
        SplitKind::Chrono(s) => &s.train,
        SplitKind::LeaveOneOut(s) => &s.train,
    };
    let train: Vec<BinnedRecord> = train_idx.iter().map(|&i| ds.records[i]).collect();
    let horizon = train.iter().map(|r| r.bin).max().unwrap_or(1);

    let log_path = out.join(LOG_FILE);
    let (mut trainer, log_file) = match cfg.raw("resume") {
        Some(p) => {
            let ck = Checkpoint::load(Path::new(p)).map_err(checkpoint_err)?;
            if ck.fingerprint() != ds.fingerprint() || ck.bins != ds.bins {
                return Err(CliError::Mismatch(format!("{p} was trained on different data or bins")));
            }
            if ck.model.config.task != task {
                return Err(CliError::Mismatch(format!("{p} holds a {} model", ck.model.config.task)));
            }
            let t = Trainer::resume(ck.model, ck.optimizer, ck.epoch, tc, &train).map_err(train_err)?;
            let f = OpenOptions::new().create(true).append(true).open(&log_path);
            (t, f)
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut model = DveModel::new(model_config(cfg, task, &ds)?, &mut rng).map_err(model_err)?;
            if task == Task::Explicit {
                model.set_output_bias(global_mean(&train));
            }
            let t = Trainer::new(model, tc, &train).map_err(train_err)?;
            (t, File::create(&log_path))
        }
    };
    let mut log_file = log_file.map_err(|source| CliError::Io {
        path: log_path.clone(),
        source,
    })?;

    let snapshot = |t: &Trainer| Checkpoint {
        model: t.model.clone(),
        optimizer: t.optimizer.clone(),
        users: ds.users.clone(),
        items: ds.items.clone(),
        bins: ds.bins.clone(),
        seed,
        epoch: t.epoch,
        train_horizon: horizon,
    };
    let every = trainer.config.checkpoint_every;
    let reports = trainer
        .fit(|t, r| {
            writeln!(log_file, "{}", r.log_line()).map_err(|source| TrainError::Io {
                path: log_path.clone(),
                source,
            })?;
            log::info!("{}", r.log_line());
            if every > 0 && r.epoch % every == 0 {
                let p = out.join(format!("checkpoint-epoch{}.bin", r.epoch));
                snapshot(t).save(&p).map_err(|e| match e {
                    CheckpointError::Io { path, source } => TrainError::Io { path, source },
                    other => TrainError::Config(other.to_string()),
                })?;
            }
            Ok(())
        })
        .map_err(train_err)?;
    let ck_path = out.join(CHECKPOINT_FILE);
    snapshot(&trainer).save(&ck_path).map_err(checkpoint_err)?;
    Ok(TrainSummary {
        checkpoint: ck_path,
        split: split_path,
        log: log_path,
        final_loss: reports.last().map(|r| r.loss),
        epochs: trainer.epoch,
    })
}

/// Rebuilds the indexed dataset under the checkpoint's bins and checks it
/// against both the checkpoint and the manifest.
fn consistent_dataset(ck: &Checkpoint, manifest: &SplitManifest, data: &Path) -> Result<BinnedDataset, CliError> {
    if manifest.fingerprint != ck.fingerprint() {
        return Err(CliError::Mismatch("split manifest and checkpoint have different id maps".into()));
    }
    let log = load_log(data)?;
    let ds = index_with_bins(&log.records, ck.bins.clone());
    if ds.fingerprint() != manifest.fingerprint || ds.records.len() != manifest.n_records {
        return Err(CliError::Mismatch(format!("{} is not the data this split was made from", data.display())));
    }
    Ok(ds)
}

pub fn cmd_evaluate(cfg: &RunConfig) -> Result<Vec<MetricReport>, CliError> {
    let ck_path = cfg.path("checkpoint")?;
    let ck = Checkpoint::load(&ck_path).map_err(checkpoint_err)?;
    let split_path = cfg.path("split")?;
    let text = fs::read_to_string(&split_path).map_err(|source| CliError::Io {
        path: split_path.clone(),
        source,
    })?;
    let manifest = SplitManifest::parse(&text).map_err(data_err)?;
    let ds = consistent_dataset(&ck, &manifest, &cfg.path("data")?)?;
    let policy: TimePolicy = cfg.get("time_policy")?;
    let model = &ck.model;
    let check_idx = |idx: &[usize]| {
        if idx.iter().any(|&i| i >= ds.records.len()) {
            return Err(CliError::Mismatch("split references records beyond the data".into()));
        }
        Ok(())
    };
    let mut reports = match (model.config.task, &manifest.split) {
        (Task::Explicit, SplitKind::Chrono(s)) => {
            check_idx(&s.train)?;
            check_idx(&s.test)?;
            let rmse = evaluate_rmse(model, &ds, &s.test, policy, ck.train_horizon).map_err(model_err)?;
            let base = global_mean_baseline(&ds, &s.train, &s.test).map_err(model_err)?;
            let baseline = MetricReport {
                metric: "RMSE_GLOBAL_MEAN".into(),
                value: base,
                ..rmse.clone()
            };
            vec![rmse, baseline]
        }
        (Task::Implicit, SplitKind::LeaveOneOut(s)) => {
            check_idx(&s.cases.iter().map(|c| c.record).collect::<Vec<_>>())?;
            let k: usize = cfg.get("k")?;
            if k == 0 || s.cases.iter().any(|c| k > c.negatives.len() + 1) {
                return Err(CliError::Config(format!("--k {k} exceeds the candidate list")));
            }
            let formula: NdcgFormula = cfg.get("ndcg")?;
            let (hr, nd) =
                evaluate_ranking(model, &ds, s, k, formula, policy, ck.train_horizon).map_err(model_err)?;
            vec![hr, nd]
        }
        (task, _) => {
            let wanted = match task {
                Task::Explicit => "chronological",
                Task::Implicit => "leave-one-out",
            };
            return Err(CliError::Mismatch(format!("{task} checkpoints are scored on a {wanted} split")));
        }
    };
    for r in &mut reports {
        r.seed = Some(ck.seed);
    }
    let out = match cfg.raw("output") {
        Some(p) => PathBuf::from(p),
        None => ck_path.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    let _lock = OutputLock::acquire(&out)?;
    write_file(&out.join(METRICS_TSV), reports_tsv(&reports).as_bytes())?;
    write_file(&out.join(METRICS_JSON), reports_json(&reports).as_bytes())?;
    Ok(reports)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Recommendation {
    pub item: String,
    pub score: f64,
    /// Spread over `samples` draws in sample mode.
    pub std: Option<f64>,
}

pub fn cmd_recommend(cfg: &RunConfig) -> Result<Vec<Recommendation>, CliError> {
    let ck = Checkpoint::load(&cfg.path("checkpoint")?).map_err(checkpoint_err)?;
    let raw_user = cfg.require("user")?;
    let user = ck
        .users
        .get(raw_user)
        .ok_or_else(|| CliError::UnknownId(format!("user {raw_user:?} not in checkpoint")))?;
    let log = load_log(&cfg.path("data")?)?;
    let seen: HashSet<usize> = log
        .records
        .iter()
        .filter(|r| r.user == raw_user)
        .filter_map(|r| ck.items.get(&r.item))
        .collect();
    let k: usize = cfg.get("k")?;
    let mode: EmbeddingMode = cfg.get("mode")?;
    let policy: TimePolicy = cfg.get("time_policy")?;
    let bin = cfg.get_opt::<usize>("bin")?.unwrap_or(ck.model.config.n_bins);
    let bin = policy.resolve(bin, ck.train_horizon);
    ck.model
        .check_bin(bin)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let samples: usize = cfg.get("samples")?;
    let seed: u64 = cfg.get("seed")?;
    let candidates: Vec<usize> = (0..ck.model.config.n_items).filter(|i| !seen.contains(i)).collect();
    if candidates.is_empty() {
        return Ok(Vec::new());
    }
    let users = vec![user; candidates.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draws = if mode == EmbeddingMode::Sample { samples.max(1) } else { 1 };
    let mut runs = Vec::with_capacity(draws);
    for _ in 0..draws {
        runs.push(
            ck.model
                .score_pairs(&users, &candidates, bin, mode, &mut rng)
                .map_err(model_err)?,
        );
    }
    let mut scored: Vec<(usize, f64, Option<f64>)> = candidates
        .iter()
        .enumerate()
        .map(|(j, &item)| {
            let vals: Vec<f64> = runs.iter().map(|r| r[j]).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let std = (mode == EmbeddingMode::Sample && samples > 0).then(|| {
                (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64).sqrt()
            });
            (item, mean, std)
        })
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let explicit = ck.model.config.task == Task::Explicit;
    Ok(scored
        .into_iter()
        .take(k)
        .map(|(item, score, std)| Recommendation {
            item: ck.items.raw(item).unwrap_or_default().to_string(),
            score: if explicit { score.clamp(1.0, 5.0) } else { score },
            std,
        })
        .collect())
}

pub fn write_recommendations(w: impl Write, recs: &[Recommendation]) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let with_std = recs.iter().any(|r| r.std.is_some());
    if with_std {
        out.write_record(["rank", "item", "score", "std"])?;
    } else {
        out.write_record(["rank", "item", "score"])?;
    }
    for (i, r) in recs.iter().enumerate() {
        let mut row = vec![(i + 1).to_string(), r.item.clone(), format!("{:.6}", r.score)];
        if with_std {
            row.push(format!("{:.6}", r.std.unwrap_or(0.0)));
        }
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}

pub fn cmd_stats(cfg: &RunConfig) -> Result<Vec<(String, usize)>, CliError> {
    let log = load_log(&cfg.path("data")?)?;
    let group: GroupBy = cfg.get("group_by")?;
    let granularity: Granularity = cfg.get("granularity")?;
    let id = cfg.raw("id");
    interaction_counts(&log.records, id.map(|i| (group, i)), granularity).map_err(|e| match e {
        DataError::UnknownId(_) => CliError::UnknownId(format!(
            "no {} with id {:?}",
            match group {
                GroupBy::User => "user",
                GroupBy::Item => "item",
            },
            id.unwrap_or_default()
        )),
        other => data_err(other),
    })
}

pub fn write_counts(w: impl Write, rows: &[(String, usize)]) -> io::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["period", "count"])?;
    for (p, c) in rows {
        out.write_record([p.as_str(), &c.to_string()])?;
    }
    out.flush()
}
