//! Interaction tower: `phi_out(phi_M(... phi_1(w ++ q)))`.

use std::str::FromStr;

use rand::Rng;

use crate::dve::fan_in_uniform;
use crate::tensor::{Graph, NodeId, ParamId, ParamStore, Precision, Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OutputHead {
    /// Unbounded score, used for ratings.
    Identity,
    /// Logistic score in (0, 1), used for implicit feedback.
    Logistic,
}

impl FromStr for OutputHead {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "identity" => Ok(OutputHead::Identity),
            "logistic" => Ok(OutputHead::Logistic),
            other => Err(format!("unknown output head {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenseLayer {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl DenseLayer {
    fn record(&self, graph: &mut Graph, bound: &[NodeId], x: NodeId) -> Result<NodeId> {
        let y = graph.matmul(x, bound[self.weight.index()])?;
        graph.add(y, bound[self.bias.index()])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NcfTower {
    pub input_dim: usize,
    pub hidden: Vec<DenseLayer>,
    pub output: DenseLayer,
    pub head: OutputHead,
}

impl NcfTower {
    /// `layer_dims` are the widths of `phi_1..phi_M`; at least one is required.
    pub fn init(
        input_dim: usize,
        layer_dims: &[usize],
        head: OutputHead,
        params: &mut ParamStore,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if layer_dims.is_empty() || layer_dims.contains(&0) || input_dim == 0 {
            return Err(TensorError::InvalidArgument(format!(
                "tower needs at least one positive layer width, got {layer_dims:?}"
            )));
        }
        let mut fan_in = input_dim;
        let mut hidden = Vec::with_capacity(layer_dims.len());
        for (i, &width) in layer_dims.iter().enumerate() {
            hidden.push(DenseLayer {
                weight: params.add(format!("tower.{i}.w"), fan_in_uniform(fan_in, width, rng)),
                bias: params.add(format!("tower.{i}.b"), Tensor::zeros(&[1, width])),
            });
            fan_in = width;
        }
        let output = DenseLayer {
            weight: params.add("tower.out.w", fan_in_uniform(fan_in, 1, rng)),
            bias: params.add("tower.out.b", Tensor::zeros(&[1, 1])),
        };
        Ok(Self {
            input_dim,
            hidden,
            output,
            head,
        })
    }

    pub fn locate(input_dim: usize, layer_dims: &[usize], head: OutputHead, params: &ParamStore) -> Result<Self> {
        let find = |name: String, shape: [usize; 2]| -> Result<ParamId> {
            let id = params
                .find(&name)
                .ok_or_else(|| TensorError::InvalidState(format!("missing parameter {name}")))?;
            if params.get(id).shape() != shape {
                return Err(TensorError::InvalidState(format!(
                    "{name} has shape {:?}, expected {shape:?}",
                    params.get(id).shape()
                )));
            }
            Ok(id)
        };
        let mut fan_in = input_dim;
        let mut hidden = Vec::new();
        for (i, &width) in layer_dims.iter().enumerate() {
            hidden.push(DenseLayer {
                weight: find(format!("tower.{i}.w"), [fan_in, width])?,
                bias: find(format!("tower.{i}.b"), [1, width])?,
            });
            fan_in = width;
        }
        let output = DenseLayer {
            weight: find("tower.out.w".into(), [fan_in, 1])?,
            bias: find("tower.out.b".into(), [1, 1])?,
        };
        Ok(Self {
            input_dim,
            hidden,
            output,
            head,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.hidden
            .iter()
            .chain(std::iter::once(&self.output))
            .flat_map(|l| [l.weight, l.bias])
            .collect()
    }

    /// Tower over pre-concatenated features (`rows x input_dim`); returns
    /// `rows x 1` scores after the head.
    pub fn record(&self, graph: &mut Graph, bound: &[NodeId], x: NodeId) -> Result<NodeId> {
        let width = graph.value(x).cols();
        if width != self.input_dim {
            return Err(TensorError::ShapeMismatch {
                op: "interact",
                lhs: vec![self.input_dim],
                rhs: graph.value(x).shape().to_vec(),
            });
        }
        let mut h = x;
        for layer in &self.hidden {
            h = layer.record(graph, bound, h)?;
            h = graph.relu(h)?;
        }
        let out = self.output.record(graph, bound, h)?;
        match self.head {
            OutputHead::Identity => Ok(out),
            OutputHead::Logistic => graph.sigmoid(out),
        }
    }

    /// Concatenates user and item features and runs the tower.
    pub fn interact_nodes(&self, graph: &mut Graph, bound: &[NodeId], w: NodeId, q: NodeId) -> Result<NodeId> {
        let x = graph.concat(&[w, q])?;
        self.record(graph, bound, x)
    }

    /// Score for a single pair of feature vectors.
    pub fn interact(&self, params: &ParamStore, w: &[f64], q: &[f64]) -> Result<f64> {
        if w.len() + q.len() != self.input_dim || w.len() != q.len() {
            return Err(TensorError::ShapeMismatch {
                op: "interact",
                lhs: vec![self.input_dim],
                rhs: vec![w.len(), q.len()],
            });
        }
        let mut g = Graph::new(Precision::F64);
        let bound = params.bind_frozen(&mut g);
        let wn = g.constant(Tensor::row(w.to_vec()));
        let qn = g.constant(Tensor::row(q.to_vec()));
        let s = self.interact_nodes(&mut g, &bound, wn, qn)?;
        Ok(g.value(s).item())
    }
}
