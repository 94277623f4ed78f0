//! Losses, negative sampling and the chronological epoch loop.

use std::collections::HashSet;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::data::{sample_excluding, BinnedRecord};
use crate::dve::{DveSideParams, EmbeddingMode, LstmCarry, NodeEmbeddingState, SideBatch};
use crate::eval::compensated_sum;
use crate::model::{DveModel, ModelError, Task};
use crate::tensor::{Graph, NodeId, Optimizer, OptimizerKind, ParamStore, Precision, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(
        "non-finite loss in epoch {epoch}, bin {bin}, batch {batch}; users {users:?}, items {items:?}"
    )]
    NonFiniteLoss {
        epoch: usize,
        bin: usize,
        batch: usize,
        users: Vec<usize>,
        items: Vec<usize>,
    },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid training configuration: {0}")]
    Config(String),
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Model(e.into())
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Negative-to-positive ratio band for implicit training.
pub const NEG_RATIO_BAND: (usize, usize) = (3, 5);
/// Bounds applied to predicted probabilities before taking logs.
pub const BCE_CLAMP: (f64, f64) = (1e-7, 1.0 - 1e-7);

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub task: Task,
    pub epochs: usize,
    pub batch_size: usize,
    pub neg_ratio: usize,
    /// Permits a ratio outside [`NEG_RATIO_BAND`] (with a warning).
    pub allow_neg_ratio_override: bool,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub checkpoint_every: usize,
}

impl TrainConfig {
    pub fn new(task: Task, seed: u64) -> Self {
        Self {
            task,
            epochs: 20,
            batch_size: 256,
            neg_ratio: 4,
            allow_neg_ratio_override: false,
            learning_rate: 1e-3,
            weight_decay: 0.0,
            optimizer: OptimizerKind::adam(),
            seed,
            checkpoint_every: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config(format!("learning rate {} must be finite and >= 0", self.learning_rate)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(TrainError::Config(format!("weight decay {} must be finite and >= 0", self.weight_decay)));
        }
        if self.task == Task::Implicit {
            let (lo, hi) = NEG_RATIO_BAND;
            if self.neg_ratio == 0 {
                return Err(TrainError::Config("neg_ratio must be positive".into()));
            }
            if !(lo..=hi).contains(&self.neg_ratio) {
                if !self.allow_neg_ratio_override {
                    return Err(TrainError::Config(format!(
                        "neg_ratio {} outside {lo}..={hi}; set the override flag to use it anyway",
                        self.neg_ratio
                    )));
                }
                log::warn!("neg_ratio {} outside {lo}..={hi}", self.neg_ratio);
            }
        }
        Ok(())
    }
}

fn check_pair(preds: &[f64], labels: &[f64]) -> Result<()> {
    if preds.is_empty() || preds.len() != labels.len() {
        return Err(TensorError::InvalidArgument(format!(
            "loss needs equal non-empty inputs, got {} and {}",
            preds.len(),
            labels.len()
        ))
        .into());
    }
    Ok(())
}

/// Sum of squared residuals.
pub fn squared_loss(preds: &[f64], labels: &[f64]) -> Result<f64> {
    check_pair(preds, labels)?;
    Ok(compensated_sum(preds.iter().zip(labels).map(|(p, y)| (y - p) * (y - p))))
}

/// Summed negative log-likelihood of binary labels.
pub fn bce_loss(preds: &[f64], labels: &[f64]) -> Result<f64> {
    check_pair(preds, labels)?;
    if let Some(y) = labels.iter().find(|&&y| y != 0.0 && y != 1.0) {
        return Err(TensorError::InvalidArgument(format!("label {y} is not 0 or 1")).into());
    }
    let terms = preds.iter().zip(labels).map(|(&p, &y)| {
        let p = p.clamp(BCE_CLAMP.0, BCE_CLAMP.1);
        -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
    });
    Ok(compensated_sum(terms))
}

fn squared_loss_node(g: &mut Graph, pred: NodeId, labels: NodeId) -> crate::tensor::Result<NodeId> {
    let d = g.sub(pred, labels)?;
    let d = g.square(d)?;
    g.sum(d)
}

fn bce_loss_node(g: &mut Graph, pred: NodeId, labels: &Tensor) -> crate::tensor::Result<NodeId> {
    let p = g.clamp(pred, BCE_CLAMP.0, BCE_CLAMP.1)?;
    let lp = g.ln(p)?;
    let q = g.scale(p, -1.0)?;
    let q = g.add_scalar(q, 1.0)?;
    let lq = g.ln(q)?;
    let y = g.constant(labels.clone());
    let not_y = g.constant(labels.map(|v| 1.0 - v));
    let a = g.mul(y, lp)?;
    let b = g.mul(not_y, lq)?;
    let t = g.add(a, b)?;
    let s = g.sum(t)?;
    g.scale(s, -1.0)
}

/// Draws `neg_ratio` distinct items the user never interacted with in
/// training. The flag is set when fewer are eligible.
pub fn sample_negatives(
    positives: &HashSet<usize>,
    n_items: usize,
    neg_ratio: usize,
    rng: &mut impl Rng,
) -> (Vec<usize>, bool) {
    sample_excluding(positives, n_items, neg_ratio, rng)
}

/// One supervised example.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Example {
    pub user: usize,
    pub item: usize,
    pub bin: usize,
    pub label: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochReport {
    /// 1-based.
    pub epoch: usize,
    pub loss: f64,
    /// Index `t - 1` holds bin `t`.
    pub per_bin: Vec<f64>,
    pub n_examples: usize,
    /// Positives whose user had too few eligible negatives.
    pub short_negatives: usize,
    pub seconds: f64,
}

impl EpochReport {
    /// `epoch<TAB>loss<TAB>seconds`
    pub fn log_line(&self) -> String {
        format!("{}\t{:.6}\t{:.3}", self.epoch, self.loss, self.seconds)
    }
}

/// Train-side interactions grouped by bin.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub by_bin: Vec<Vec<BinnedRecord>>,
    pub positives: Vec<HashSet<usize>>,
    pub n_items: usize,
}

impl TrainData {
    pub fn new(records: &[BinnedRecord], n_users: usize, n_items: usize, n_bins: usize) -> Result<Self> {
        let mut by_bin = vec![Vec::new(); n_bins];
        let mut positives = vec![HashSet::new(); n_users];
        for r in records {
            if r.bin == 0 || r.bin > n_bins {
                return Err(ModelError::BinOutOfRange { bin: r.bin, n_bins }.into());
            }
            if r.user >= n_users {
                return Err(ModelError::UnknownUser(r.user).into());
            }
            if r.item >= n_items {
                return Err(ModelError::UnknownItem(r.item).into());
            }
            by_bin[r.bin - 1].push(*r);
            positives[r.user].insert(r.item);
        }
        Ok(Self {
            by_bin,
            positives,
            n_items,
        })
    }

    pub fn n_records(&self) -> usize {
        self.by_bin.iter().map(Vec::len).sum()
    }
}

/// Mean label of the given records; the starting output bias for ratings.
pub fn global_mean(records: &[BinnedRecord]) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    compensated_sum(records.iter().map(|r| r.value)) / records.len() as f64
}

/// Latest LSTM carry per node, advanced lazily with the current parameters.
#[derive(Debug, Clone)]
pub struct StateCache {
    states: Vec<NodeEmbeddingState>,
}

impl StateCache {
    pub fn new(n_nodes: usize, hidden: usize) -> Self {
        Self {
            states: (0..n_nodes)
                .map(|node| NodeEmbeddingState {
                    node,
                    bin: 0,
                    carry: LstmCarry::zeros(hidden),
                    sigma2: 0.0,
                })
                .collect(),
        }
    }

    /// Brings every listed node to `bin` advances and returns their carries.
    /// Nodes already past `bin` are returned as they are.
    pub fn carries_at(
        &mut self,
        side: &DveSideParams,
        params: &ParamStore,
        nodes: &[usize],
        bin: usize,
        precision: Precision,
    ) -> Result<Vec<LstmCarry>> {
        loop {
            let behind: Vec<usize> = nodes.iter().copied().filter(|&n| self.states[n].bin < bin).collect();
            if behind.is_empty() {
                break;
            }
            let snapshot: Vec<NodeEmbeddingState> = behind.iter().map(|&n| self.states[n].clone()).collect();
            for s in side.advance_many(params, &snapshot, precision)? {
                let n = s.node;
                self.states[n] = s;
            }
        }
        Ok(nodes.iter().map(|&n| self.states[n].carry.clone()).collect())
    }
}

/// Owns the model, optimizer and epoch counter across `fit` calls.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: DveModel,
    pub optimizer: Optimizer,
    pub config: TrainConfig,
    /// Epochs completed so far.
    pub epoch: usize,
    data: TrainData,
}

impl Trainer {
    pub fn new(model: DveModel, config: TrainConfig, train: &[BinnedRecord]) -> Result<Self> {
        let optimizer = Optimizer::new(config.optimizer, config.learning_rate, &model.params, model.config.precision);
        Self::resume(model, optimizer, 0, config, train)
    }

    /// Continues from a saved optimizer state after `epoch` completed epochs.
    pub fn resume(
        model: DveModel,
        mut optimizer: Optimizer,
        epoch: usize,
        config: TrainConfig,
        train: &[BinnedRecord],
    ) -> Result<Self> {
        config.validate()?;
        if config.task != model.config.task {
            return Err(TrainError::Config(format!(
                "training task {} does not match model task {}",
                config.task, model.config.task
            )));
        }
        optimizer.learning_rate = config.learning_rate;
        optimizer.weight_decay = config.weight_decay;
        let data = TrainData::new(train, model.config.n_users, model.config.n_items, model.config.n_bins)?;
        if data.n_records() == 0 {
            return Err(TrainError::Config("no training records".into()));
        }
        Ok(Self {
            model,
            optimizer,
            config,
            epoch,
            data,
        })
    }

    fn epoch_rng(&self, epoch: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(epoch as u64);
        rng
    }

    /// Examples of one bin, with fresh negatives for implicit feedback.
    fn bin_examples(&self, bin: usize, rng: &mut ChaCha8Rng, short: &mut usize) -> Vec<Example> {
        let recs = &self.data.by_bin[bin - 1];
        let mut out = Vec::with_capacity(recs.len() * (1 + self.config.neg_ratio));
        for r in recs {
            match self.config.task {
                Task::Explicit => out.push(Example {
                    user: r.user,
                    item: r.item,
                    bin,
                    label: r.value,
                }),
                Task::Implicit => {
                    out.push(Example {
                        user: r.user,
                        item: r.item,
                        bin,
                        label: 1.0,
                    });
                    let (negs, was_short) =
                        sample_negatives(&self.data.positives[r.user], self.data.n_items, self.config.neg_ratio, rng);
                    if was_short {
                        *short += 1;
                    }
                    out.extend(negs.into_iter().map(|item| Example {
                        user: r.user,
                        item,
                        bin,
                        label: 0.0,
                    }));
                }
            }
        }
        out.shuffle(rng);
        out
    }

    /// One pass over the training bins in ascending order.
    pub fn train_epoch(&mut self) -> Result<EpochReport> {
        let start = Instant::now();
        let epoch = self.epoch + 1;
        let mut rng = self.epoch_rng(epoch);
        let prec = self.model.config.precision;
        let dim = self.model.config.dim;
        let dynamic = self.model.user.lstm.is_some();
        let hidden = self.model.config.lstm_hidden_dim;
        let mut user_cache = StateCache::new(self.model.config.n_users, hidden);
        let mut item_cache = StateCache::new(self.model.config.n_items, hidden);
        let n_bins = self.model.config.n_bins;
        let mut per_bin = vec![0.0; n_bins];
        let mut short = 0usize;
        let mut n_examples = 0usize;
        for bin in 1..=n_bins {
            if self.data.by_bin[bin - 1].is_empty() {
                continue;
            }
            let examples = self.bin_examples(bin, &mut rng, &mut short);
            n_examples += examples.len();
            let mut bin_losses = Vec::new();
            for (b, batch) in examples.chunks(self.config.batch_size).enumerate() {
                let users: Vec<usize> = batch.iter().map(|e| e.user).collect();
                let items: Vec<usize> = batch.iter().map(|e| e.item).collect();
                let mut ub = SideBatch::new(users.clone());
                let mut ib = SideBatch::new(items.clone());
                if dynamic {
                    let uc = user_cache.carries_at(&self.model.user, &self.model.params, &ub.unique, bin - 1, prec)?;
                    let ic = item_cache.carries_at(&self.model.item, &self.model.params, &ib.unique, bin - 1, prec)?;
                    ub = ub.with_carry(uc);
                    ib = ib.with_carry(ic);
                }
                let draw = |rows: usize, rng: &mut ChaCha8Rng| -> Result<Tensor> {
                    let data = (0..rows * dim).map(|_| prec.round(StandardNormal.sample(rng))).collect();
                    Ok(Tensor::matrix(rows, dim, data)?)
                };
                let un = draw(batch.len(), &mut rng)?;
                let inn = draw(batch.len(), &mut rng)?;
                let labels = Tensor::column(batch.iter().map(|e| e.label).collect());

                let mut g = Graph::new(prec);
                let bound = self.model.params.bind(&mut g);
                let out = self.model.forward(&mut g, &bound, &ub, &ib, EmbeddingMode::Sample, Some((&un, &inn)))?;
                let loss = match self.config.task {
                    Task::Explicit => {
                        let y = g.constant(labels);
                        squared_loss_node(&mut g, out.scores, y)?
                    }
                    Task::Implicit => bce_loss_node(&mut g, out.scores, &labels)?,
                };
                let value = g.value(loss).item();
                if !value.is_finite() {
                    return Err(TrainError::NonFiniteLoss {
                        epoch,
                        bin,
                        batch: b,
                        users,
                        items,
                    });
                }
                let mut grads = g.backward(loss)?;
                let grads: Vec<Option<Tensor>> = bound.iter().map(|&n| grads.take(n)).collect();
                self.optimizer.step(&mut self.model.params, &grads)?;
                bin_losses.push(value);
            }
            per_bin[bin - 1] = compensated_sum(bin_losses);
        }
        if short > 0 {
            log::warn!("epoch {epoch}: {short} positives had fewer than {} eligible negatives", self.config.neg_ratio);
        }
        self.epoch = epoch;
        Ok(EpochReport {
            epoch,
            loss: compensated_sum(per_bin.iter().copied()),
            per_bin,
            n_examples,
            short_negatives: short,
            seconds: start.elapsed().as_secs_f64(),
        })
    }

    /// Runs epochs until `config.epochs` have completed in total. The hook
    /// sees the trainer after every epoch, e.g. to checkpoint or log.
    pub fn fit(
        &mut self,
        mut on_epoch: impl FnMut(&Trainer, &EpochReport) -> Result<()>,
    ) -> Result<Vec<EpochReport>> {
        let mut log = Vec::new();
        while self.epoch < self.config.epochs {
            let report = self.train_epoch()?;
            on_epoch(self, &report)?;
            log.push(report);
        }
        Ok(log)
    }

    pub fn data(&self) -> &TrainData {
        &self.data
    }

    pub fn into_model(self) -> DveModel {
        self.model
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn squared_loss_examples() {
        assert_eq!(squared_loss(&[3.0], &[3.0]).unwrap(), 0.0);
        assert_eq!(squared_loss(&[0.0, 1.0], &[1.0, 1.0]).unwrap(), 1.0);
        assert!(squared_loss(&[], &[]).is_err());
    }

    #[test]
    fn bce_loss_examples() {
        assert!((bce_loss(&[0.5], &[1.0]).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!(bce_loss(&[1.0], &[1.0]).unwrap() < 1e-6);
        let two = bce_loss(&[0.9, 0.1], &[1.0, 0.0]).unwrap();
        assert!((two - 0.2107).abs() < 1e-4, "{two}");
        assert!(bce_loss(&[0.5], &[0.5]).is_err());
    }

    #[test]
    fn tape_losses_match_pure_losses() {
        let preds = vec![0.2, 0.7, 0.999_999_99];
        let labels = vec![0.0, 1.0, 1.0];
        let mut g = Graph::new(Precision::F64);
        let p = g.constant(Tensor::column(preds.clone()));
        let l = bce_loss_node(&mut g, p, &Tensor::column(labels.clone())).unwrap();
        assert!((g.value(l).item() - bce_loss(&preds, &labels).unwrap()).abs() < 1e-12);
        let y = g.constant(Tensor::column(labels.clone()));
        let s = squared_loss_node(&mut g, p, y).unwrap();
        assert!((g.value(s).item() - squared_loss(&preds, &labels).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn forced_negative_set() {
        let pos: HashSet<usize> = [0, 1, 2].into_iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (mut n, short) = sample_negatives(&pos, 5, 2, &mut rng);
        n.sort_unstable();
        assert_eq!(n, vec![3, 4]);
        assert!(!short);
        let all: HashSet<usize> = (0..5).collect();
        let (n, short) = sample_negatives(&all, 5, 2, &mut rng);
        assert!(n.is_empty() && short);
    }

    #[test]
    fn neg_ratio_band_enforced() {
        let mut c = TrainConfig::new(Task::Implicit, 0);
        c.neg_ratio = 7;
        assert!(c.validate().is_err());
        c.allow_neg_ratio_override = true;
        assert!(c.validate().is_ok());
        let mut e = TrainConfig::new(Task::Explicit, 0);
        e.neg_ratio = 7;
        assert!(e.validate().is_ok());
    }

    fn tiny(task: Task) -> (DveModel, Vec<BinnedRecord>) {
        let mut cfg = ModelConfig::new(task, 2, 3, 2);
        cfg.dim = 4;
        cfg.variance_hidden_dim = 3;
        cfg.variance_mlp_dim = 3;
        cfg.lstm_hidden_dim = 3;
        cfg.tower_dims = vec![8, 4];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = DveModel::new(cfg, &mut rng).unwrap();
        let recs = vec![
            BinnedRecord { user: 0, item: 0, value: 4.0, timestamp: 0, bin: 1 },
            BinnedRecord { user: 1, item: 1, value: 2.0, timestamp: 1, bin: 1 },
            BinnedRecord { user: 0, item: 2, value: 5.0, timestamp: 2, bin: 2 },
        ];
        (model, recs)
    }

    #[test]
    fn zero_epochs_is_noop() {
        let (model, recs) = tiny(Task::Explicit);
        let mut c = TrainConfig::new(Task::Explicit, 1);
        c.epochs = 0;
        let mut t = Trainer::new(model.clone(), c, &recs).unwrap();
        let log = t.fit(|_, _| Ok(())).unwrap();
        assert!(log.is_empty());
        assert_eq!(t.model, model);
    }

    #[test]
    fn seeded_runs_match_bitwise() {
        let run = || {
            let (model, recs) = tiny(Task::Implicit);
            let mut c = TrainConfig::new(Task::Implicit, 9);
            c.epochs = 3;
            c.allow_neg_ratio_override = true;
            c.neg_ratio = 1;
            let mut t = Trainer::new(model, c, &recs).unwrap();
            let log = t.fit(|_, _| Ok(())).unwrap();
            (t.model.params, log.iter().map(|r| r.loss).collect::<Vec<_>>())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn task_mismatch_rejected() {
        let (model, recs) = tiny(Task::Explicit);
        assert!(Trainer::new(model, TrainConfig::new(Task::Implicit, 0), &recs).is_err());
    }
}
