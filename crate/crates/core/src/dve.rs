//! Dynamic variational embedding layers.
//!
//! A node's embedding at bin `t` is `w = mu + sqrt(sigma2(t)) * eps` where
//! `mu` is the node's row of the mean table and `sigma2` comes from the
//! variance path. The static path maps the node's variance-table row
//! through a small dense network and the non-negative activation `g`. The
//! dynamic path feeds the same row into an LSTM once per bin and maps the
//! hidden state through the dense network instead.
//!
//! Tables are stored node-major (`n x R`): row `i` of the mean table is the
//! column `W1 u_i` of the column-major formulation.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::tensor::{Graph, NodeId, ParamId, ParamStore, Precision, Result, Tensor, TensorError};

/// Output activation of the variance network; each is non-negative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GActivation {
    Relu,
    Abs,
    Square,
}

impl GActivation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            GActivation::Relu => x.max(0.0),
            GActivation::Abs => x.abs(),
            GActivation::Square => x * x,
        }
    }

    pub fn record(self, graph: &mut Graph, x: NodeId) -> Result<NodeId> {
        match self {
            GActivation::Relu => graph.relu(x),
            GActivation::Abs => graph.abs(x),
            GActivation::Square => graph.square(x),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            GActivation::Relu => "relu",
            GActivation::Abs => "abs",
            GActivation::Square => "square",
        }
    }
}

impl fmt::Display for GActivation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GActivation {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "relu" => Ok(GActivation::Relu),
            "abs" => Ok(GActivation::Abs),
            "square" => Ok(GActivation::Square),
            other => Err(format!("unknown activation {other:?} (relu, abs, square)")),
        }
    }
}

/// Which variance path feeds the sampling step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum VarianceMode {
    Static,
    Dynamic,
}

impl VarianceMode {
    pub fn as_str(self) -> &'static str {
        match self {
            VarianceMode::Static => "static",
            VarianceMode::Dynamic => "dynamic",
        }
    }
}

impl FromStr for VarianceMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "static" => Ok(VarianceMode::Static),
            "dynamic" => Ok(VarianceMode::Dynamic),
            other => Err(format!("unknown variance mode {other:?} (static, dynamic)")),
        }
    }
}

/// Whether an embedding draws noise or returns its mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EmbeddingMode {
    Sample,
    Mean,
}

impl FromStr for EmbeddingMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "sample" => Ok(EmbeddingMode::Sample),
            "mean" => Ok(EmbeddingMode::Mean),
            other => Err(format!("unknown embedding mode {other:?} (sample, mean)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmbeddingConfig {
    pub n_nodes: usize,
    pub dim: usize,
    /// Width of the variance table row (`W2 u_i`).
    pub variance_hidden_dim: usize,
    /// Hidden width of the dense layer between the variance input and `g`.
    pub variance_mlp_dim: usize,
    pub lstm_hidden_dim: usize,
    pub g: GActivation,
    pub mode: VarianceMode,
}

impl EmbeddingConfig {
    pub fn new(n_nodes: usize, dim: usize) -> Self {
        Self {
            n_nodes,
            dim,
            variance_hidden_dim: 16,
            variance_mlp_dim: 16,
            lstm_hidden_dim: 16,
            g: GActivation::Square,
            mode: VarianceMode::Dynamic,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n_nodes", self.n_nodes),
            ("dim", self.dim),
            ("variance_hidden_dim", self.variance_hidden_dim),
            ("variance_mlp_dim", self.variance_mlp_dim),
            ("lstm_hidden_dim", self.lstm_hidden_dim),
        ] {
            if v == 0 {
                return Err(TensorError::InvalidArgument(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }

    fn head_input_dim(&self) -> usize {
        match self.mode {
            VarianceMode::Static => self.variance_hidden_dim,
            VarianceMode::Dynamic => self.lstm_hidden_dim,
        }
    }
}

/// Binary identity vector of length `n_nodes`.
pub fn one_hot(node: usize, n_nodes: usize) -> Result<Vec<f64>> {
    if node >= n_nodes {
        return Err(TensorError::IndexOutOfRange {
            op: "one_hot",
            index: node,
            len: n_nodes,
        });
    }
    let mut v = vec![0.0; n_nodes];
    v[node] = 1.0;
    Ok(v)
}

/// Input, forget, candidate and output gate weights packed side by side.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LstmParams {
    /// `in x 4H`
    pub w_x: ParamId,
    /// `H x 4H`
    pub w_h: ParamId,
    /// `1 x 4H`
    pub bias: ParamId,
    pub hidden: usize,
}

/// Parameter handles for one node set (users or items).
#[derive(Debug, Clone, PartialEq)]
pub struct DveSideParams {
    pub config: EmbeddingConfig,
    /// `n x R`, row `i` is the mean embedding of node `i`.
    pub mean: ParamId,
    /// `n x variance_hidden_dim`
    pub var_in: ParamId,
    pub var_hidden_w: ParamId,
    pub var_hidden_b: ParamId,
    pub var_out_w: ParamId,
    pub var_out_b: ParamId,
    pub lstm: Option<LstmParams>,
}

/// LSTM carry of one node.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmCarry {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl LstmCarry {
    pub fn zeros(hidden: usize) -> Self {
        Self {
            h: vec![0.0; hidden],
            c: vec![0.0; hidden],
        }
    }
}

/// Snapshot of a node's variance state after `bin` advances.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeEmbeddingState {
    pub node: usize,
    pub bin: usize,
    pub carry: LstmCarry,
    pub sigma2: f64,
}

pub(crate) fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Tensor::matrix(rows, cols, data).expect("positive dims")
}

/// Uniform in `±1/sqrt(fan_in)`.
pub(crate) fn fan_in_uniform(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let bound = 1.0 / (rows as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Tensor::matrix(rows, cols, data).expect("positive dims")
}

pub const EMBEDDING_INIT_STD: f64 = 0.01;

impl DveSideParams {
    /// Registers a freshly initialized side under `prefix` (e.g. `user`).
    pub fn init(prefix: &str, config: EmbeddingConfig, params: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let EmbeddingConfig {
            n_nodes: n,
            dim,
            variance_hidden_dim: vh,
            variance_mlp_dim: vm,
            lstm_hidden_dim: lh,
            ..
        } = config;
        let mean = params.add(format!("{prefix}.mean"), gaussian(n, dim, EMBEDDING_INIT_STD, rng));
        let var_in = params.add(format!("{prefix}.var_in"), gaussian(n, vh, EMBEDDING_INIT_STD, rng));
        let lstm = match config.mode {
            VarianceMode::Static => None,
            VarianceMode::Dynamic => Some(LstmParams {
                w_x: params.add(format!("{prefix}.lstm.w_x"), fan_in_uniform(vh, 4 * lh, rng)),
                w_h: params.add(format!("{prefix}.lstm.w_h"), fan_in_uniform(lh, 4 * lh, rng)),
                bias: params.add(format!("{prefix}.lstm.b"), Tensor::zeros(&[1, 4 * lh])),
                hidden: lh,
            }),
        };
        let head_in = config.head_input_dim();
        let var_hidden_w = params.add(format!("{prefix}.var_hidden.w"), fan_in_uniform(head_in, vm, rng));
        let var_hidden_b = params.add(format!("{prefix}.var_hidden.b"), Tensor::zeros(&[1, vm]));
        // small output weights keep the initial noise below the mean scale
        let var_out_w = params.add(format!("{prefix}.var_out.w"), gaussian(vm, 1, EMBEDDING_INIT_STD, rng));
        let var_out_b = params.add(format!("{prefix}.var_out.b"), Tensor::zeros(&[1, 1]));
        Ok(Self {
            config,
            mean,
            var_in,
            var_hidden_w,
            var_hidden_b,
            var_out_w,
            var_out_b,
            lstm,
        })
    }

    /// Re-resolves handles by name in a store that was loaded from disk.
    pub fn locate(prefix: &str, config: EmbeddingConfig, params: &ParamStore) -> Result<Self> {
        let find = |suffix: &str| {
            params
                .find(&format!("{prefix}.{suffix}"))
                .ok_or_else(|| TensorError::InvalidState(format!("missing parameter {prefix}.{suffix}")))
        };
        let lstm = match config.mode {
            VarianceMode::Static => None,
            VarianceMode::Dynamic => Some(LstmParams {
                w_x: find("lstm.w_x")?,
                w_h: find("lstm.w_h")?,
                bias: find("lstm.b")?,
                hidden: config.lstm_hidden_dim,
            }),
        };
        let side = Self {
            config,
            mean: find("mean")?,
            var_in: find("var_in")?,
            var_hidden_w: find("var_hidden.w")?,
            var_hidden_b: find("var_hidden.b")?,
            var_out_w: find("var_out.w")?,
            var_out_b: find("var_out.b")?,
            lstm,
        };
        let expect = |id: ParamId, shape: &[usize]| -> Result<()> {
            if params.get(id).shape() != shape {
                return Err(TensorError::InvalidState(format!(
                    "{} has shape {:?}, expected {:?}",
                    params.name(id),
                    params.get(id).shape(),
                    shape
                )));
            }
            Ok(())
        };
        let c = config;
        expect(side.mean, &[c.n_nodes, c.dim])?;
        expect(side.var_in, &[c.n_nodes, c.variance_hidden_dim])?;
        expect(side.var_hidden_w, &[c.head_input_dim(), c.variance_mlp_dim])?;
        expect(side.var_out_w, &[c.variance_mlp_dim, 1])?;
        if let Some(l) = side.lstm {
            expect(l.w_x, &[c.variance_hidden_dim, 4 * c.lstm_hidden_dim])?;
            expect(l.w_h, &[c.lstm_hidden_dim, 4 * c.lstm_hidden_dim])?;
        }
        Ok(side)
    }

    /// Every handle on the variance path.
    pub fn variance_params(&self) -> Vec<ParamId> {
        let mut v = vec![
            self.var_in,
            self.var_hidden_w,
            self.var_hidden_b,
            self.var_out_w,
            self.var_out_b,
        ];
        if let Some(l) = self.lstm {
            v.extend([l.w_x, l.w_h, l.bias]);
        }
        v
    }

    fn check_node(&self, node: usize) -> Result<()> {
        if node >= self.config.n_nodes {
            return Err(TensorError::IndexOutOfRange {
                op: "embedding lookup",
                index: node,
                len: self.config.n_nodes,
            });
        }
        Ok(())
    }

    /// `mu` for one node.
    pub fn mean_embedding(&self, params: &ParamStore, node: usize) -> Result<Vec<f64>> {
        self.check_node(node)?;
        Ok(params.get(self.mean).row_slice(node).to_vec())
    }

    /// `g(W3 W2 u_i)` on the static path.
    pub fn static_variance(&self, params: &ParamStore, node: usize) -> Result<f64> {
        if self.config.mode != VarianceMode::Static {
            return Err(TensorError::InvalidState("static_variance on a dynamic side".into()));
        }
        self.check_node(node)?;
        let mut g = Graph::new(Precision::F64);
        let x = g.constant(Tensor::row(params.get(self.var_in).row_slice(node).to_vec()));
        let head = HeadNodes::constants(self, params, &mut g);
        let s = self.record_head(&mut g, &head, x)?;
        Ok(g.value(s).item())
    }

    /// State before any advance: zero carry.
    pub fn initial_state(&self, params: &ParamStore, node: usize) -> Result<NodeEmbeddingState> {
        self.check_node(node)?;
        let mut states = self.initial_states(params, &[node], Precision::F64)?;
        Ok(states.pop().expect("one state"))
    }

    pub fn initial_states(&self, params: &ParamStore, nodes: &[usize], precision: Precision) -> Result<Vec<NodeEmbeddingState>> {
        for &n in nodes {
            self.check_node(n)?;
        }
        if nodes.is_empty() {
            return Ok(Vec::new());
        }
        let sigma2 = match self.config.mode {
            VarianceMode::Static => {
                let mut out = Vec::with_capacity(nodes.len());
                for chunk in nodes.chunks(1024) {
                    out.extend(self.static_variances(params, chunk, precision)?);
                }
                out
            }
            VarianceMode::Dynamic => {
                let mut g = Graph::new(precision);
                let head = HeadNodes::constants(self, params, &mut g);
                let h = g.constant(Tensor::zeros(&[1, self.config.lstm_hidden_dim]));
                let s = self.record_head(&mut g, &head, h)?;
                vec![g.value(s).item(); nodes.len()]
            }
        };
        let hidden = self.lstm.map_or(0, |l| l.hidden);
        Ok(nodes
            .iter()
            .zip(sigma2)
            .map(|(&node, sigma2)| NodeEmbeddingState {
                node,
                bin: 0,
                carry: LstmCarry::zeros(hidden),
                sigma2,
            })
            .collect())
    }

    fn static_variances(&self, params: &ParamStore, nodes: &[usize], precision: Precision) -> Result<Vec<f64>> {
        let mut g = Graph::new(precision);
        let head = HeadNodes::constants(self, params, &mut g);
        let table = params.get(self.var_in);
        let rows: Vec<f64> = nodes.iter().flat_map(|&n| table.row_slice(n).iter().copied()).collect();
        let x = g.constant(Tensor::matrix(nodes.len(), table.cols(), rows)?);
        let s = self.record_head(&mut g, &head, x)?;
        Ok(g.value(s).data().to_vec())
    }

    /// One bin forward for a single node. The input state is not modified.
    pub fn advance_variance(&self, params: &ParamStore, state: &NodeEmbeddingState) -> Result<NodeEmbeddingState> {
        let mut next = self.advance_many(params, std::slice::from_ref(state), Precision::F64)?;
        Ok(next.pop().expect("one state"))
    }

    /// Batched [`advance_variance`](Self::advance_variance), forward only.
    pub fn advance_many(
        &self,
        params: &ParamStore,
        states: &[NodeEmbeddingState],
        precision: Precision,
    ) -> Result<Vec<NodeEmbeddingState>> {
        if states.is_empty() {
            return Ok(Vec::new());
        }
        for s in states {
            self.check_node(s.node)?;
        }
        let Some(lstm) = self.lstm else {
            // the static path does not depend on the bin
            let nodes: Vec<usize> = states.iter().map(|s| s.node).collect();
            let sig = self.static_variances(params, &nodes, precision)?;
            return Ok(states
                .iter()
                .zip(sig)
                .map(|(s, sigma2)| NodeEmbeddingState {
                    node: s.node,
                    bin: s.bin + 1,
                    carry: s.carry.clone(),
                    sigma2,
                })
                .collect());
        };
        let k = states.len();
        let hd = lstm.hidden;
        let mut g = Graph::new(precision);
        let table = params.get(self.var_in);
        let xs: Vec<f64> = states.iter().flat_map(|s| table.row_slice(s.node).iter().copied()).collect();
        let x = g.constant(Tensor::matrix(k, table.cols(), xs)?);
        let h = g.constant(Tensor::matrix(k, hd, states.iter().flat_map(|s| s.carry.h.iter().copied()).collect())?);
        let c = g.constant(Tensor::matrix(k, hd, states.iter().flat_map(|s| s.carry.c.iter().copied()).collect())?);
        let w_x = g.constant(params.get(lstm.w_x).clone());
        let w_h = g.constant(params.get(lstm.w_h).clone());
        let b = g.constant(params.get(lstm.bias).clone());
        let (h2, c2) = lstm_step(&mut g, h, c, x, w_x, w_h, b)?;
        let head = HeadNodes::constants(self, params, &mut g);
        let s = self.record_head(&mut g, &head, h2)?;
        let (hv, cv, sv) = (g.value(h2), g.value(c2), g.value(s));
        Ok(states
            .iter()
            .enumerate()
            .map(|(r, st)| NodeEmbeddingState {
                node: st.node,
                bin: st.bin + 1,
                carry: LstmCarry {
                    h: hv.row_slice(r).to_vec(),
                    c: cv.row_slice(r).to_vec(),
                },
                sigma2: sv.data()[r],
            })
            .collect())
    }

    /// State after `bin` advances from zero.
    pub fn state_at(&self, params: &ParamStore, node: usize, bin: usize, precision: Precision) -> Result<NodeEmbeddingState> {
        let mut s = self.initial_states(params, &[node], precision)?.pop().expect("one state");
        for _ in 0..bin {
            s = self.advance_many(params, std::slice::from_ref(&s), precision)?.pop().expect("one state");
        }
        Ok(s)
    }

    /// Batched [`state_at`](Self::state_at).
    pub fn states_at(&self, params: &ParamStore, nodes: &[usize], bin: usize, precision: Precision) -> Result<Vec<NodeEmbeddingState>> {
        let mut states = self.initial_states(params, nodes, precision)?;
        for _ in 0..bin {
            states = self.advance_many(params, &states, precision)?;
        }
        Ok(states)
    }

    fn record_head(&self, graph: &mut Graph, head: &HeadNodes, input: NodeId) -> Result<NodeId> {
        let hid = graph.matmul(input, head.hidden_w)?;
        let hid = graph.add(hid, head.hidden_b)?;
        let hid = graph.relu(hid)?;
        let pre = graph.matmul(hid, head.out_w)?;
        let pre = graph.add(pre, head.out_b)?;
        self.config.g.record(graph, pre)
    }

    /// Records this side's embeddings for a batch on the tape.
    ///
    /// `bound` maps every [`ParamId`] of the store to its leaf. `noise` is
    /// a `rows x R` tensor of standard normal draws, required in sample mode.
    pub fn embed(
        &self,
        graph: &mut Graph,
        bound: &[NodeId],
        batch: &SideBatch,
        mode: EmbeddingMode,
        noise: Option<&Tensor>,
    ) -> Result<SideOutput> {
        for &n in &batch.unique {
            self.check_node(n)?;
        }
        let mu = graph.gather_rows(bound[self.mean.index()], batch.rows.clone())?;
        if mode == EmbeddingMode::Mean {
            return Ok(SideOutput {
                embedding: mu,
                sigma2: None,
                carry: None,
            });
        }
        let noise = noise.ok_or_else(|| TensorError::InvalidArgument("sample mode needs noise".into()))?;
        if noise.shape() != [batch.rows.len(), self.config.dim] {
            return Err(TensorError::ShapeMismatch {
                op: "sample_embedding",
                lhs: vec![batch.rows.len(), self.config.dim],
                rhs: noise.shape().to_vec(),
            });
        }
        let head = HeadNodes::bound(self, bound);
        let (sigma2_rows, sigma2_out, carry) = match self.lstm {
            None => {
                let x = graph.gather_rows(bound[self.var_in.index()], batch.rows.clone())?;
                let s = self.record_head(graph, &head, x)?;
                (s, s, None)
            }
            Some(lstm) => {
                let k = batch.unique.len();
                let hd = lstm.hidden;
                let carries = batch
                    .carry
                    .as_ref()
                    .ok_or_else(|| TensorError::InvalidArgument("dynamic side needs carries".into()))?;
                let h = graph.constant(Tensor::matrix(k, hd, carries.iter().flat_map(|c| c.h.iter().copied()).collect())?);
                let c = graph.constant(Tensor::matrix(k, hd, carries.iter().flat_map(|c| c.c.iter().copied()).collect())?);
                let x = graph.gather_rows(bound[self.var_in.index()], batch.unique.clone())?;
                let (h2, c2) = lstm_step(
                    graph,
                    h,
                    c,
                    x,
                    bound[lstm.w_x.index()],
                    bound[lstm.w_h.index()],
                    bound[lstm.bias.index()],
                )?;
                let s = self.record_head(graph, &head, h2)?;
                let rows = graph.gather_rows(s, batch.slot.clone())?;
                (rows, s, Some((h2, c2)))
            }
        };
        let eps = graph.constant(noise.clone());
        let embedding = sample_embedding_node(graph, mu, sigma2_rows, eps)?;
        Ok(SideOutput {
            embedding,
            sigma2: Some(sigma2_out),
            carry,
        })
    }
}

struct HeadNodes {
    hidden_w: NodeId,
    hidden_b: NodeId,
    out_w: NodeId,
    out_b: NodeId,
}

impl HeadNodes {
    fn constants(side: &DveSideParams, params: &ParamStore, g: &mut Graph) -> Self {
        Self {
            hidden_w: g.constant(params.get(side.var_hidden_w).clone()),
            hidden_b: g.constant(params.get(side.var_hidden_b).clone()),
            out_w: g.constant(params.get(side.var_out_w).clone()),
            out_b: g.constant(params.get(side.var_out_b).clone()),
        }
    }

    fn bound(side: &DveSideParams, bound: &[NodeId]) -> Self {
        Self {
            hidden_w: bound[side.var_hidden_w.index()],
            hidden_b: bound[side.var_hidden_b.index()],
            out_w: bound[side.var_out_w.index()],
            out_b: bound[side.var_out_b.index()],
        }
    }
}

/// Node ids of one side of a batch, with per-unique-node LSTM carries at
/// the previous bin when the side is dynamic.
#[derive(Debug, Clone, PartialEq)]
pub struct SideBatch {
    pub rows: Vec<usize>,
    pub unique: Vec<usize>,
    /// Position in `unique` of each row.
    pub slot: Vec<usize>,
    pub carry: Option<Vec<LstmCarry>>,
}

impl SideBatch {
    pub fn new(rows: Vec<usize>) -> Self {
        let mut index = HashMap::new();
        let mut unique = Vec::new();
        let slot = rows
            .iter()
            .map(|&n| {
                *index.entry(n).or_insert_with(|| {
                    unique.push(n);
                    unique.len() - 1
                })
            })
            .collect();
        Self {
            rows,
            unique,
            slot,
            carry: None,
        }
    }

    pub fn with_carry(mut self, carry: Vec<LstmCarry>) -> Self {
        assert_eq!(carry.len(), self.unique.len());
        self.carry = Some(carry);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SideOutput {
    /// `rows x R`
    pub embedding: NodeId,
    /// Per-row on the static path, per-unique-node on the dynamic path.
    pub sigma2: Option<NodeId>,
    /// New `(h, c)` per unique node on the dynamic path.
    pub carry: Option<(NodeId, NodeId)>,
}

/// One LSTM cell step over `k` rows.
///
/// Gate columns of `w_x`, `w_h` and `bias` are packed as input, forget,
/// candidate, output.
pub fn lstm_step(
    graph: &mut Graph,
    h: NodeId,
    c: NodeId,
    x: NodeId,
    w_x: NodeId,
    w_h: NodeId,
    bias: NodeId,
) -> Result<(NodeId, NodeId)> {
    let hd = graph.value(h).cols();
    if graph.value(w_h).shape() != [hd, 4 * hd] || graph.value(c).shape() != graph.value(h).shape() {
        return Err(TensorError::ShapeMismatch {
            op: "lstm_step",
            lhs: graph.value(h).shape().to_vec(),
            rhs: graph.value(w_h).shape().to_vec(),
        });
    }
    let zx = graph.matmul(x, w_x)?;
    let zh = graph.matmul(h, w_h)?;
    let z = graph.add(zx, zh)?;
    let z = graph.add(z, bias)?;
    let i = graph.slice_cols(z, 0, hd)?;
    let i = graph.sigmoid(i)?;
    let f = graph.slice_cols(z, hd, 2 * hd)?;
    let f = graph.sigmoid(f)?;
    let cand = graph.slice_cols(z, 2 * hd, 3 * hd)?;
    let cand = graph.tanh(cand)?;
    let o = graph.slice_cols(z, 3 * hd, 4 * hd)?;
    let o = graph.sigmoid(o)?;
    let fc = graph.mul(f, c)?;
    let ic = graph.mul(i, cand)?;
    let c2 = graph.add(fc, ic)?;
    let tc = graph.tanh(c2)?;
    let h2 = graph.mul(o, tc)?;
    Ok((h2, c2))
}

/// `mu + sqrt(sigma2) * eps` on the tape; `sigma2` is `rows x 1`.
pub fn sample_embedding_node(graph: &mut Graph, mu: NodeId, sigma2: NodeId, eps: NodeId) -> Result<NodeId> {
    let sd = graph.sqrt(sigma2)?;
    let z = graph.mul(eps, sd)?;
    graph.add(mu, z)
}

/// Reparameterized draw `mu + sqrt(sigma2) * eps`, or `mu` in mean mode.
pub fn sample_embedding(mu: &[f64], sigma2: f64, eps: &[f64], mode: EmbeddingMode) -> Result<Vec<f64>> {
    if !(sigma2 >= 0.0) {
        return Err(TensorError::InvalidState(format!("negative variance {sigma2}")));
    }
    match mode {
        EmbeddingMode::Mean => Ok(mu.to_vec()),
        EmbeddingMode::Sample => {
            if eps.len() != mu.len() {
                return Err(TensorError::ShapeMismatch {
                    op: "sample_embedding",
                    lhs: vec![mu.len()],
                    rhs: vec![eps.len()],
                });
            }
            let sd = sigma2.sqrt();
            Ok(mu.iter().zip(eps).map(|(m, e)| m + sd * e).collect())
        }
    }
}
