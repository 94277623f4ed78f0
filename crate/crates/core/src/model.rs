//! Full recommender: user and item DVE sides feeding the NCF tower.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::dve::{
    sample_embedding, DveSideParams, EmbeddingConfig, EmbeddingMode, GActivation, SideBatch, SideOutput,
    VarianceMode,
};
use crate::ncf::{NcfTower, OutputHead};
use crate::tensor::{Graph, NodeId, ParamId, ParamStore, Precision, Tensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("unknown user index {0}")]
    UnknownUser(usize),
    #[error("unknown item index {0}")]
    UnknownItem(usize),
    #[error("time bin {bin} outside 1..={n_bins}")]
    BinOutOfRange { bin: usize, n_bins: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Task {
    Explicit,
    Implicit,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Explicit => "explicit",
            Task::Implicit => "implicit",
        }
    }

    pub fn head(self) -> OutputHead {
        match self {
            Task::Explicit => OutputHead::Identity,
            Task::Implicit => OutputHead::Logistic,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "explicit" => Ok(Task::Explicit),
            "implicit" => Ok(Task::Implicit),
            other => Err(format!("unknown task {other:?} (explicit, implicit)")),
        }
    }
}

/// How a bin past the last trained bin is handled when sampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum TimePolicy {
    /// Keep advancing the recurrence up to the requested bin.
    #[default]
    Continue,
    /// Use the state at the last trained bin.
    Freeze,
}

impl TimePolicy {
    pub fn resolve(self, bin: usize, train_horizon: usize) -> usize {
        match self {
            TimePolicy::Continue => bin,
            TimePolicy::Freeze => bin.min(train_horizon.max(1)),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TimePolicy::Continue => "continue",
            TimePolicy::Freeze => "freeze",
        }
    }
}

impl FromStr for TimePolicy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "continue" => Ok(TimePolicy::Continue),
            "freeze" => Ok(TimePolicy::Freeze),
            other => Err(format!("unknown time policy {other:?} (continue, freeze)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub task: Task,
    pub n_users: usize,
    pub n_items: usize,
    pub dim: usize,
    pub variance_hidden_dim: usize,
    pub variance_mlp_dim: usize,
    pub lstm_hidden_dim: usize,
    pub g: GActivation,
    pub variance_mode: VarianceMode,
    pub tower_dims: Vec<usize>,
    pub n_bins: usize,
    pub precision: Precision,
}

impl ModelConfig {
    pub fn new(task: Task, n_users: usize, n_items: usize, n_bins: usize) -> Self {
        Self {
            task,
            n_users,
            n_items,
            dim: 16,
            variance_hidden_dim: 16,
            variance_mlp_dim: 16,
            lstm_hidden_dim: 16,
            g: GActivation::Square,
            variance_mode: VarianceMode::Dynamic,
            tower_dims: vec![64, 32, 16],
            n_bins,
            precision: Precision::F32,
        }
    }

    pub fn side(&self, n_nodes: usize) -> EmbeddingConfig {
        EmbeddingConfig {
            n_nodes,
            dim: self.dim,
            variance_hidden_dim: self.variance_hidden_dim,
            variance_mlp_dim: self.variance_mlp_dim,
            lstm_hidden_dim: self.lstm_hidden_dim,
            g: self.g,
            mode: self.variance_mode,
        }
    }
}

/// Score of one (user, item, bin) triple.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub user: usize,
    pub item: usize,
    pub bin: usize,
    pub score: f64,
    pub mode: EmbeddingMode,
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    /// `rows x 1`
    pub scores: NodeId,
    pub user: SideOutput,
    pub item: SideOutput,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DveModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub user: DveSideParams,
    pub item: DveSideParams,
    pub tower: NcfTower,
}

impl DveModel {
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Self, ModelError> {
        if config.n_bins == 0 {
            return Err(TensorError::InvalidArgument("model needs at least one time bin".into()).into());
        }
        let mut params = ParamStore::new();
        let user = DveSideParams::init("user", config.side(config.n_users), &mut params, rng)?;
        let item = DveSideParams::init("item", config.side(config.n_items), &mut params, rng)?;
        let tower = NcfTower::init(2 * config.dim, &config.tower_dims, config.task.head(), &mut params, rng)?;
        for id in params.ids().collect::<Vec<_>>() {
            config.precision.round_slice(params.get_mut(id).data_mut());
        }
        Ok(Self {
            config,
            params,
            user,
            item,
            tower,
        })
    }

    /// Rebuilds handles over a parameter store loaded from disk.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self, ModelError> {
        let user = DveSideParams::locate("user", config.side(config.n_users), &params)?;
        let item = DveSideParams::locate("item", config.side(config.n_items), &params)?;
        let tower = NcfTower::locate(2 * config.dim, &config.tower_dims, config.task.head(), &params)?;
        let expected = 2 * (6 + if config.variance_mode == VarianceMode::Dynamic { 3 } else { 0 })
            + 2 * (config.tower_dims.len() + 1);
        if params.len() != expected {
            return Err(TensorError::InvalidState(format!(
                "checkpoint holds {} parameters, model needs {expected}",
                params.len()
            ))
            .into());
        }
        Ok(Self {
            config,
            params,
            user,
            item,
            tower,
        })
    }

    /// Every parameter on either variance path.
    pub fn variance_params(&self) -> Vec<ParamId> {
        let mut v = self.user.variance_params();
        v.extend(self.item.variance_params());
        v
    }

    pub fn set_output_bias(&mut self, value: f64) {
        let b = self.tower.output.bias;
        self.params.get_mut(b).data_mut()[0] = self.config.precision.round(value);
    }

    pub fn check_bin(&self, bin: usize) -> Result<(), ModelError> {
        if bin == 0 || bin > self.config.n_bins {
            return Err(ModelError::BinOutOfRange {
                bin,
                n_bins: self.config.n_bins,
            });
        }
        Ok(())
    }

    fn check_ids(&self, users: &[usize], items: &[usize]) -> Result<(), ModelError> {
        if let Some(&u) = users.iter().find(|&&u| u >= self.config.n_users) {
            return Err(ModelError::UnknownUser(u));
        }
        if let Some(&i) = items.iter().find(|&&i| i >= self.config.n_items) {
            return Err(ModelError::UnknownItem(i));
        }
        Ok(())
    }

    /// Records the full forward pass on the tape.
    ///
    /// In sample mode `noise` holds the user and item `rows x R` draws, and
    /// dynamic sides need carries at the previous bin in their batches.
    pub fn forward(
        &self,
        graph: &mut Graph,
        bound: &[NodeId],
        users: &SideBatch,
        items: &SideBatch,
        mode: EmbeddingMode,
        noise: Option<(&Tensor, &Tensor)>,
    ) -> Result<ForwardOutput, ModelError> {
        if users.rows.len() != items.rows.len() {
            return Err(TensorError::InvalidArgument(format!(
                "{} users for {} items",
                users.rows.len(),
                items.rows.len()
            ))
            .into());
        }
        self.check_ids(&users.unique, &items.unique)?;
        let user = self.user.embed(graph, bound, users, mode, noise.map(|n| n.0))?;
        let item = self.item.embed(graph, bound, items, mode, noise.map(|n| n.1))?;
        let scores = self.tower.interact_nodes(graph, bound, user.embedding, item.embedding)?;
        Ok(ForwardOutput { scores, user, item })
    }

    /// Scores (user, item) pairs at `bin` without recording gradients.
    ///
    /// Mean mode ignores the variance path entirely and does not touch `rng`.
    pub fn score_pairs(
        &self,
        users: &[usize],
        items: &[usize],
        bin: usize,
        mode: EmbeddingMode,
        rng: &mut impl Rng,
    ) -> Result<Vec<f64>, ModelError> {
        if users.len() != items.len() {
            return Err(TensorError::InvalidArgument("users and items differ in length".into()).into());
        }
        if users.is_empty() {
            return Ok(Vec::new());
        }
        self.check_bin(bin)?;
        self.check_ids(users, items)?;
        let dim = self.config.dim;
        let prec = self.config.precision;
        let mut features = |side: &DveSideParams, nodes: &[usize]| -> Result<Tensor, ModelError> {
            let table = self.params.get(side.mean);
            let mut data = Vec::with_capacity(nodes.len() * dim);
            match mode {
                EmbeddingMode::Mean => {
                    for &n in nodes {
                        data.extend_from_slice(table.row_slice(n));
                    }
                }
                EmbeddingMode::Sample => {
                    let batch = SideBatch::new(nodes.to_vec());
                    let states = side.states_at(&self.params, &batch.unique, bin, prec)?;
                    for (&n, &slot) in nodes.iter().zip(&batch.slot) {
                        let eps: Vec<f64> = (0..dim).map(|_| prec.round(StandardNormal.sample(rng))).collect();
                        let w = sample_embedding(table.row_slice(n), states[slot].sigma2, &eps, mode)?;
                        data.extend(w.into_iter().map(|x| prec.round(x)));
                    }
                }
            }
            Ok(Tensor::matrix(nodes.len(), dim, data)?)
        };
        let w = features(&self.user, users)?;
        let q = features(&self.item, items)?;
        let mut g = Graph::new(prec);
        let bound = self.params.bind_subset(&mut g, &self.tower.params());
        let wn = g.constant(w);
        let qn = g.constant(q);
        let s = self.tower.interact_nodes(&mut g, &bound, wn, qn)?;
        Ok(g.value(s).data().to_vec())
    }

    pub fn predict(
        &self,
        user: usize,
        item: usize,
        bin: usize,
        mode: EmbeddingMode,
        rng: &mut impl Rng,
    ) -> Result<Prediction, ModelError> {
        let score = self.score_pairs(&[user], &[item], bin, mode, rng)?[0];
        Ok(Prediction {
            user,
            item,
            bin,
            score,
            mode,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy(task: Task, mode: VarianceMode) -> DveModel {
        let mut cfg = ModelConfig::new(task, 4, 5, 3);
        cfg.dim = 3;
        cfg.variance_hidden_dim = 2;
        cfg.variance_mlp_dim = 2;
        cfg.lstm_hidden_dim = 2;
        cfg.tower_dims = vec![4, 3];
        cfg.variance_mode = mode;
        cfg.precision = Precision::F64;
        DveModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap()
    }

    fn zero_variance(m: &mut DveModel) {
        for id in m.variance_params() {
            let shape = m.params.get(id).shape().to_vec();
            *m.params.get_mut(id) = Tensor::zeros(&shape);
        }
    }

    #[test]
    fn zero_variance_sample_equals_mean() {
        for mode in [VarianceMode::Static, VarianceMode::Dynamic] {
            let mut m = toy(Task::Explicit, mode);
            zero_variance(&mut m);
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            for u in 0..4 {
                for i in 0..5 {
                    for t in 1..=3 {
                        let a = m.predict(u, i, t, EmbeddingMode::Sample, &mut rng).unwrap();
                        let b = m.predict(u, i, t, EmbeddingMode::Mean, &mut rng).unwrap();
                        assert_eq!(a.score, b.score);
                    }
                }
            }
        }
    }

    #[test]
    fn seeded_sampling_is_deterministic() {
        let m = toy(Task::Implicit, VarianceMode::Dynamic);
        let a = m.predict(1, 2, 3, EmbeddingMode::Sample, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = m.predict(1, 2, 3, EmbeddingMode::Sample, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn logistic_scores_in_open_interval() {
        let m = toy(Task::Implicit, VarianceMode::Static);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let users: Vec<usize> = (0..20).map(|k| k % 4).collect();
        let items: Vec<usize> = (0..20).map(|k| k % 5).collect();
        for s in m.score_pairs(&users, &items, 2, EmbeddingMode::Sample, &mut rng).unwrap() {
            assert!(s > 0.0 && s < 1.0);
        }
    }

    #[test]
    fn lookup_and_range_errors() {
        let m = toy(Task::Explicit, VarianceMode::Dynamic);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(
            m.predict(4, 0, 1, EmbeddingMode::Mean, &mut rng).unwrap_err(),
            ModelError::UnknownUser(4)
        );
        assert_eq!(
            m.predict(0, 7, 1, EmbeddingMode::Mean, &mut rng).unwrap_err(),
            ModelError::UnknownItem(7)
        );
        assert_eq!(
            m.predict(0, 0, 4, EmbeddingMode::Mean, &mut rng).unwrap_err(),
            ModelError::BinOutOfRange { bin: 4, n_bins: 3 }
        );
    }

    #[test]
    fn mean_scoring_matches_tape_forward() {
        let m = toy(Task::Explicit, VarianceMode::Dynamic);
        let users = vec![0, 1, 3, 3];
        let items = vec![4, 0, 2, 1];
        let fast = m
            .score_pairs(&users, &items, 1, EmbeddingMode::Mean, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        let mut g = Graph::new(Precision::F64);
        let bound = m.params.bind(&mut g);
        let out = m
            .forward(
                &mut g,
                &bound,
                &SideBatch::new(users),
                &SideBatch::new(items),
                EmbeddingMode::Mean,
                None,
            )
            .unwrap();
        assert_eq!(g.value(out.scores).data(), &fast[..]);
    }

    #[test]
    fn from_params_round_trip() {
        let m = toy(Task::Implicit, VarianceMode::Dynamic);
        let again = DveModel::from_params(m.config.clone(), m.params.clone()).unwrap();
        assert_eq!(again, m);
        let mut other = m.config.clone();
        other.dim = 4;
        assert!(DveModel::from_params(other, m.params.clone()).is_err());
    }

    #[test]
    fn freeze_policy_caps_bins() {
        assert_eq!(TimePolicy::Freeze.resolve(9, 4), 4);
        assert_eq!(TimePolicy::Freeze.resolve(2, 4), 2);
        assert_eq!(TimePolicy::Continue.resolve(9, 4), 9);
    }
}
