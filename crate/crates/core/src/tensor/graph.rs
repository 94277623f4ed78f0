use super::{Precision, Result, Tensor, TensorError};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Differentiable operations understood by the tape.
///
/// Binary elementwise ops (`Add`, `Sub`, `Mul`) accept a right operand with
/// the same shape as the left, a `[1, c]` row, an `[r, 1]` column, or a
/// single value; the right operand is broadcast against the left.
#[derive(Debug, Clone, PartialEq)]
pub enum OpKind {
    MatMul,
    Add,
    Sub,
    Mul,
    /// Concatenate along the last axis.
    Concat,
    GatherRows(Vec<usize>),
    SliceCols { start: usize, end: usize },
    Relu,
    Abs,
    Square,
    Sigmoid,
    Tanh,
    /// Square root with the derivative evaluated at `max(x, 1e-12)` so that
    /// it stays finite at zero. Forward values are exact.
    Sqrt,
    Ln,
    Scale(f64),
    AddScalar(f64),
    /// Clamp into `[lo, hi]`; the gradient is zero outside the interval.
    Clamp { lo: f64, hi: f64 },
    Sum,
    Mean,
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Concat => "concat",
            OpKind::GatherRows(_) => "gather_row",
            OpKind::SliceCols { .. } => "slice_cols",
            OpKind::Relu => "relu",
            OpKind::Abs => "abs",
            OpKind::Square => "square",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::Sqrt => "sqrt",
            OpKind::Ln => "ln",
            OpKind::Scale(_) => "scale",
            OpKind::AddScalar(_) => "add_scalar",
            OpKind::Clamp { .. } => "clamp",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
        }
    }
}

/// Floor applied inside the derivative of `Sqrt`.
pub const SQRT_GRAD_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    Row,
    Col,
    Scalar,
}

#[derive(Debug, Clone)]
struct Node {
    kind: Option<OpKind>,
    inputs: Vec<NodeId>,
    broadcast: Broadcast,
    value: Tensor,
    requires_grad: bool,
}

/// Append-only tape. Inputs of every node precede it, so the node order is
/// a topological order.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    precision: Precision,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

impl Graph {
    pub fn new(precision: Precision) -> Self {
        Self {
            nodes: Vec::new(),
            precision,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, mut value: Tensor, requires_grad: bool) -> NodeId {
        self.precision.round_slice(value.data_mut());
        self.push(None, Vec::new(), Broadcast::Same, value, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, true)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(
        &mut self,
        kind: Option<OpKind>,
        inputs: Vec<NodeId>,
        broadcast: Broadcast,
        value: Tensor,
        requires_grad: bool,
    ) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            kind,
            inputs,
            broadcast,
            value,
            requires_grad,
        });
        id
    }

    fn check_ids(&self, inputs: &[NodeId]) -> Result<()> {
        for id in inputs {
            if id.0 >= self.nodes.len() {
                return Err(TensorError::InvalidArgument(format!(
                    "node {} is not on this graph",
                    id.0
                )));
            }
        }
        Ok(())
    }

    /// Records one op. Generic entry point behind the named helpers below.
    pub fn apply(&mut self, kind: OpKind, inputs: &[NodeId]) -> Result<NodeId> {
        self.check_ids(inputs)?;
        let arity_ok = match kind {
            OpKind::MatMul | OpKind::Add | OpKind::Sub | OpKind::Mul => inputs.len() == 2,
            OpKind::Concat => !inputs.is_empty(),
            _ => inputs.len() == 1,
        };
        if !arity_ok {
            return Err(TensorError::InvalidArgument(format!(
                "{} got {} inputs",
                kind.name(),
                inputs.len()
            )));
        }
        let mut broadcast = Broadcast::Same;
        let mut value = match &kind {
            OpKind::MatMul => {
                let (a, b) = (self.value(inputs[0]), self.value(inputs[1]));
                if a.shape().len() != 2 || b.shape().len() != 2 || a.cols() != b.rows() {
                    return Err(shape_err("matmul", a, b));
                }
                let (m, k, n) = (a.rows(), a.cols(), b.cols());
                Tensor::new(vec![m, n], matmul(a.data(), b.data(), m, k, n))?
            }
            OpKind::Add | OpKind::Sub | OpKind::Mul => {
                let (a, b) = (self.value(inputs[0]), self.value(inputs[1]));
                broadcast = broadcast_kind(kind.name(), a, b)?;
                let f: fn(f64, f64) -> f64 = match kind {
                    OpKind::Add => |x, y| x + y,
                    OpKind::Sub => |x, y| x - y,
                    _ => |x, y| x * y,
                };
                elementwise(a, b, broadcast, f)
            }
            OpKind::Concat => self.concat_value(inputs)?,
            OpKind::GatherRows(idx) => {
                let a = self.value(inputs[0]);
                if a.shape().len() != 2 {
                    return Err(TensorError::InvalidArgument(format!(
                        "gather_row expects a matrix, got {:?}",
                        a.shape()
                    )));
                }
                if idx.is_empty() {
                    return Err(TensorError::InvalidArgument(
                        "gather_row with no indices".into(),
                    ));
                }
                let c = a.cols();
                let mut data = Vec::with_capacity(idx.len() * c);
                for &i in idx {
                    if i >= a.rows() {
                        return Err(TensorError::IndexOutOfRange {
                            op: "gather_row",
                            index: i,
                            len: a.rows(),
                        });
                    }
                    data.extend_from_slice(a.row_slice(i));
                }
                Tensor::new(vec![idx.len(), c], data)?
            }
            OpKind::SliceCols { start, end } => {
                let a = self.value(inputs[0]);
                let c = a.cols();
                if a.shape().len() != 2 || start >= end || *end > c {
                    return Err(TensorError::InvalidArgument(format!(
                        "slice_cols {start}..{end} of {:?}",
                        a.shape()
                    )));
                }
                let mut data = Vec::with_capacity(a.rows() * (end - start));
                for r in 0..a.rows() {
                    data.extend_from_slice(&a.row_slice(r)[*start..*end]);
                }
                Tensor::new(vec![a.rows(), end - start], data)?
            }
            OpKind::Relu => self.value(inputs[0]).map(|x| x.max(0.0)),
            OpKind::Abs => self.value(inputs[0]).map(f64::abs),
            OpKind::Square => self.value(inputs[0]).map(|x| x * x),
            OpKind::Sigmoid => self.value(inputs[0]).map(sigmoid),
            OpKind::Tanh => self.value(inputs[0]).map(f64::tanh),
            OpKind::Sqrt => self.value(inputs[0]).map(f64::sqrt),
            OpKind::Ln => self.value(inputs[0]).map(f64::ln),
            OpKind::Scale(s) => {
                let s = *s;
                self.value(inputs[0]).map(|x| x * s)
            }
            OpKind::AddScalar(s) => {
                let s = *s;
                self.value(inputs[0]).map(|x| x + s)
            }
            OpKind::Clamp { lo, hi } => {
                let (lo, hi) = (*lo, *hi);
                if !(lo <= hi) {
                    return Err(TensorError::InvalidArgument(format!(
                        "clamp bounds {lo} > {hi}"
                    )));
                }
                self.value(inputs[0]).map(|x| x.clamp(lo, hi))
            }
            OpKind::Sum => Tensor::scalar(self.value(inputs[0]).data().iter().sum()),
            OpKind::Mean => {
                let a = self.value(inputs[0]);
                Tensor::scalar(a.data().iter().sum::<f64>() / a.len() as f64)
            }
        };
        self.precision.round_slice(value.data_mut());
        let requires_grad = inputs.iter().any(|&i| self.nodes[i.0].requires_grad);
        Ok(self.push(Some(kind), inputs.to_vec(), broadcast, value, requires_grad))
    }

    fn concat_value(&self, inputs: &[NodeId]) -> Result<Tensor> {
        let first = self.value(inputs[0]);
        let rank = first.shape().len();
        let rows = first.rows();
        let mut total = 0;
        for &id in inputs {
            let t = self.value(id);
            if t.shape().len() != rank || rank > 2 || t.rows() != rows {
                return Err(shape_err("concat", first, t));
            }
            total += t.cols();
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &id in inputs {
                data.extend_from_slice(self.value(id).row_slice(r));
            }
        }
        let shape = if rank == 1 {
            vec![total]
        } else {
            vec![rows, total]
        };
        Tensor::new(shape, data)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(OpKind::MatMul, &[a, b])
    }
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Add, &[a, b])
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Mul, &[a, b])
    }
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        self.apply(OpKind::Concat, parts)
    }
    pub fn gather_rows(&mut self, a: NodeId, rows: Vec<usize>) -> Result<NodeId> {
        self.apply(OpKind::GatherRows(rows), &[a])
    }
    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        self.apply(OpKind::SliceCols { start, end }, &[a])
    }
    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Relu, &[a])
    }
    pub fn abs(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Abs, &[a])
    }
    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Square, &[a])
    }
    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Sigmoid, &[a])
    }
    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Tanh, &[a])
    }
    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Sqrt, &[a])
    }
    pub fn ln(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Ln, &[a])
    }
    pub fn scale(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        self.apply(OpKind::Scale(s), &[a])
    }
    pub fn add_scalar(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        self.apply(OpKind::AddScalar(s), &[a])
    }
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        self.apply(OpKind::Clamp { lo, hi }, &[a])
    }
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Sum, &[a])
    }
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Mean, &[a])
    }

    /// Reverse sweep from a scalar loss. Every leaf that requires a gradient
    /// receives one, zero-filled when the loss does not depend on it.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        self.check_ids(&[loss])?;
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(TensorError::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::filled(lv.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            let Some(kind) = &node.kind else { continue };
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let contributions = self.input_grads(node, kind, &g)?;
            for (input, contrib) in node.inputs.iter().zip(contributions) {
                let Some(mut contrib) = contrib else { continue };
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                self.precision.round_slice(contrib.data_mut());
                if let Some(acc) = &mut grads[input.0] {
                    for (a, c) in acc.data_mut().iter_mut().zip(contrib.data()) {
                        *a += c;
                    }
                    self.precision.round_slice(acc.data_mut());
                } else {
                    grads[input.0] = Some(contrib);
                }
            }
            // keep the gradient for inspection of interior nodes
            grads[idx] = Some(g);
        }
        for (idx, node) in self.nodes.iter().enumerate() {
            if node.kind.is_none() && node.requires_grad && grads[idx].is_none() {
                grads[idx] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads })
    }

    fn input_grads(&self, node: &Node, kind: &OpKind, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let x = |i: usize| self.value(node.inputs[i]);
        let needs = |i: usize| self.nodes[node.inputs[i].0].requires_grad;
        let out = &node.value;
        let unary = |f: &dyn Fn(f64, f64, f64) -> f64| -> Vec<Option<Tensor>> {
            // f(input, output, upstream)
            let a = x(0);
            let data = a
                .data()
                .iter()
                .zip(out.data())
                .zip(g.data())
                .map(|((&xi, &yi), &gi)| f(xi, yi, gi))
                .collect();
            vec![Some(Tensor {
                shape: a.shape().to_vec(),
                data,
            })]
        };
        Ok(match kind {
            OpKind::MatMul => {
                let (a, b) = (x(0), x(1));
                let (m, k, n) = (a.rows(), a.cols(), b.cols());
                let ga = needs(0).then(|| Tensor {
                    shape: vec![m, k],
                    data: matmul_nt(g.data(), b.data(), m, n, k),
                });
                let gb = needs(1).then(|| Tensor {
                    shape: vec![k, n],
                    data: matmul_tn(a.data(), g.data(), m, k, n),
                });
                vec![ga, gb]
            }
            OpKind::Add | OpKind::Sub => {
                let ga = needs(0).then(|| g.clone());
                let gb = needs(1).then(|| {
                    let mut r = reduce_to(g, x(1).shape(), node.broadcast);
                    if matches!(kind, OpKind::Sub) {
                        r.data.iter_mut().for_each(|v| *v = -*v);
                    }
                    r
                });
                vec![ga, gb]
            }
            OpKind::Mul => {
                let (a, b) = (x(0), x(1));
                let ga = needs(0).then(|| elementwise(g, b, node.broadcast, |gi, bi| gi * bi));
                let gb = needs(1).then(|| {
                    let prod = Tensor {
                        shape: g.shape.clone(),
                        data: g.data().iter().zip(a.data()).map(|(gi, ai)| gi * ai).collect(),
                    };
                    reduce_to(&prod, b.shape(), node.broadcast)
                });
                vec![ga, gb]
            }
            OpKind::Concat => {
                let rows = out.rows();
                let total = out.cols();
                let mut offset = 0;
                let mut res = Vec::with_capacity(node.inputs.len());
                for (i, _) in node.inputs.iter().enumerate() {
                    let part = x(i);
                    let c = part.cols();
                    if needs(i) {
                        let mut data = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            data.extend_from_slice(&g.data()[r * total + offset..r * total + offset + c]);
                        }
                        res.push(Some(Tensor {
                            shape: part.shape().to_vec(),
                            data,
                        }));
                    } else {
                        res.push(None);
                    }
                    offset += c;
                }
                res
            }
            OpKind::GatherRows(idx) => {
                let a = x(0);
                let mut acc = Tensor::zeros(a.shape());
                let c = a.cols();
                for (r, &i) in idx.iter().enumerate() {
                    let src = &g.data()[r * c..(r + 1) * c];
                    for (d, s) in acc.row_slice_mut(i).iter_mut().zip(src) {
                        *d += s;
                    }
                }
                vec![Some(acc)]
            }
            OpKind::SliceCols { start, end } => {
                let a = x(0);
                let mut acc = Tensor::zeros(a.shape());
                let w = end - start;
                for r in 0..a.rows() {
                    acc.row_slice_mut(r)[*start..*end].copy_from_slice(&g.data()[r * w..(r + 1) * w]);
                }
                vec![Some(acc)]
            }
            OpKind::Relu => unary(&|xi, _, gi| if xi > 0.0 { gi } else { 0.0 }),
            OpKind::Abs => unary(&|xi, _, gi| {
                if xi > 0.0 {
                    gi
                } else if xi < 0.0 {
                    -gi
                } else {
                    0.0
                }
            }),
            OpKind::Square => unary(&|xi, _, gi| 2.0 * xi * gi),
            OpKind::Sigmoid => unary(&|_, yi, gi| yi * (1.0 - yi) * gi),
            OpKind::Tanh => unary(&|_, yi, gi| (1.0 - yi * yi) * gi),
            OpKind::Sqrt => unary(&|xi, _, gi| 0.5 * gi / xi.max(SQRT_GRAD_FLOOR).sqrt()),
            OpKind::Ln => unary(&|xi, _, gi| gi / xi),
            OpKind::Scale(s) => unary(&|_, _, gi| gi * s),
            OpKind::AddScalar(_) => vec![Some(g.clone())],
            OpKind::Clamp { lo, hi } => unary(&|xi, _, gi| if xi >= *lo && xi <= *hi { gi } else { 0.0 }),
            OpKind::Sum => {
                let a = x(0);
                vec![Some(Tensor::filled(a.shape(), g.item()))]
            }
            OpKind::Mean => {
                let a = x(0);
                vec![Some(Tensor::filled(a.shape(), g.item() / a.len() as f64))]
            }
        })
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn broadcast_kind(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Broadcast> {
    if a.shape() == b.shape() {
        return Ok(Broadcast::Same);
    }
    if b.len() == 1 {
        return Ok(Broadcast::Scalar);
    }
    if a.shape().len() == 2 && b.shape().len() == 2 {
        if b.rows() == 1 && b.cols() == a.cols() {
            return Ok(Broadcast::Row);
        }
        if b.cols() == 1 && b.rows() == a.rows() {
            return Ok(Broadcast::Col);
        }
    }
    Err(shape_err(op, a, b))
}

fn elementwise(a: &Tensor, b: &Tensor, bc: Broadcast, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let c = a.cols();
    let data = match bc {
        Broadcast::Same => a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
        Broadcast::Scalar => {
            let y = b.item();
            a.data().iter().map(|&x| f(x, y)).collect()
        }
        Broadcast::Row => a
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, b.data()[i % c]))
            .collect(),
        Broadcast::Col => a
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, b.data()[i / c]))
            .collect(),
    };
    Tensor {
        shape: a.shape().to_vec(),
        data,
    }
}

fn reduce_to(g: &Tensor, shape: &[usize], bc: Broadcast) -> Tensor {
    let c = g.cols();
    let mut out = Tensor::zeros(shape);
    match bc {
        Broadcast::Same => return g.clone(),
        Broadcast::Scalar => out.data[0] = g.data().iter().sum(),
        Broadcast::Row => {
            for (i, v) in g.data().iter().enumerate() {
                out.data[i % c] += v;
            }
        }
        Broadcast::Col => {
            for (i, v) in g.data().iter().enumerate() {
                out.data[i / c] += v;
            }
        }
    }
    out
}

/// `a[m,k] · b[k,n]`
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `g[m,n] · bᵀ` where `b` is `[k,n]`.
fn matmul_nt(g: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `aᵀ · g` where `a` is `[m,k]` and `g` is `[m,n]`.
fn matmul_tn(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
    out
}
