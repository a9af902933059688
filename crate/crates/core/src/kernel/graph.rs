use std::fmt;
use std::str::FromStr;

use super::tensor::{cosine_matrix, dot, l2_normalize, row_norm, softmax_rows, Tensor};
use super::KernelError;

/// Index of a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Discriminant of a recorded op, used for reporting and fault injection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Affine,
    Add,
    Mul,
    MulScalar,
    ScaleShift,
    Tanh,
    Exp,
    Log,
    Sigmoid,
    Clamp,
    L2Normalize,
    CosineMatrix,
    SoftmaxRows,
    Diag,
    RowSum,
    Sum,
    Mean,
    GatherRows,
    ConcatCols,
    Detach,
}

impl OpKind {
    /// Every op that carries a backward rule.
    pub const DIFFERENTIABLE: [OpKind; 19] = [
        OpKind::Affine,
        OpKind::Add,
        OpKind::Mul,
        OpKind::MulScalar,
        OpKind::ScaleShift,
        OpKind::Tanh,
        OpKind::Exp,
        OpKind::Log,
        OpKind::Sigmoid,
        OpKind::Clamp,
        OpKind::L2Normalize,
        OpKind::CosineMatrix,
        OpKind::SoftmaxRows,
        OpKind::Diag,
        OpKind::RowSum,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::GatherRows,
        OpKind::ConcatCols,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Affine => "affine",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::MulScalar => "mul_scalar",
            OpKind::ScaleShift => "scale_shift",
            OpKind::Tanh => "tanh",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Clamp => "clamp",
            OpKind::L2Normalize => "l2_normalize",
            OpKind::CosineMatrix => "cosine_matrix",
            OpKind::SoftmaxRows => "softmax_rows",
            OpKind::Diag => "diag",
            OpKind::RowSum => "row_sum",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::GatherRows => "gather_rows",
            OpKind::ConcatCols => "concat_cols",
            OpKind::Detach => "detach",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = KernelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        std::iter::once(OpKind::Leaf)
            .chain(OpKind::DIFFERENTIABLE)
            .chain(std::iter::once(OpKind::Detach))
            .find(|k| k.name() == s)
            .ok_or_else(|| KernelError::UnknownOp(s.to_string()))
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Affine,
    Add,
    Mul,
    MulScalar,
    ScaleShift { scale: f64 },
    Tanh,
    Exp,
    Log,
    Sigmoid,
    Clamp { lo: f64, hi: f64 },
    L2Normalize,
    CosineMatrix,
    SoftmaxRows,
    Diag,
    RowSum,
    Sum,
    Mean,
    GatherRows(Vec<usize>),
    ConcatCols,
    Detach,
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Affine => OpKind::Affine,
            Op::Add => OpKind::Add,
            Op::Mul => OpKind::Mul,
            Op::MulScalar => OpKind::MulScalar,
            Op::ScaleShift { .. } => OpKind::ScaleShift,
            Op::Tanh => OpKind::Tanh,
            Op::Exp => OpKind::Exp,
            Op::Log => OpKind::Log,
            Op::Sigmoid => OpKind::Sigmoid,
            Op::Clamp { .. } => OpKind::Clamp,
            Op::L2Normalize => OpKind::L2Normalize,
            Op::CosineMatrix => OpKind::CosineMatrix,
            Op::SoftmaxRows => OpKind::SoftmaxRows,
            Op::Diag => OpKind::Diag,
            Op::RowSum => OpKind::RowSum,
            Op::Sum => OpKind::Sum,
            Op::Mean => OpKind::Mean,
            Op::GatherRows(_) => OpKind::GatherRows,
            Op::ConcatCols => OpKind::ConcatCols,
            Op::Detach => OpKind::Detach,
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
    trainable: bool,
}

/// An eagerly evaluated computation record.
///
/// Values are computed as ops are added, so node insertion order is a
/// topological order and [`Graph::backward`] simply walks it in reverse.
#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
    zero_rows: usize,
    clamp_hits: usize,
    fault: Option<OpKind>,
}

/// Gradients of a scalar loss with respect to every node that it reaches.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `id`, or zeros shaped like `like` when the loss does not
    /// depend on it.
    pub fn get_or_zeros(&self, id: NodeId, like: &Tensor) -> Tensor {
        self.get(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.rows(), like.cols()))
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> KernelError {
    KernelError::Shape {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::raw(t.rows(), t.cols(), t.data().iter().map(|&x| f(x)).collect())
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::raw(
        a.rows(),
        a.cols(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k, m) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let ai = a.row_slice(i);
        let oi = &mut out[i * m..(i + 1) * m];
        for (p, &aip) in ai.iter().enumerate().take(k) {
            if aip == 0.0 {
                continue;
            }
            for (o, &bpj) in oi.iter_mut().zip(b.row_slice(p)) {
                *o += aip * bpj;
            }
        }
    }
    Tensor::raw(n, m, out)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Flips the sign of every gradient contribution emitted by ops of `kind`.
    /// Exists to prove that gradient checks catch broken backward rules.
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn op_kind(&self, id: NodeId) -> OpKind {
        self.nodes[id.0].op.kind()
    }

    /// Number of all-zero rows seen by `l2_normalize` so far.
    pub fn zero_rows(&self) -> usize {
        self.zero_rows
    }

    /// Number of entries pinned by `clamp` so far.
    pub fn clamp_hits(&self) -> usize {
        self.clamp_hits
    }

    pub fn trainable(&self) -> Vec<NodeId> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.trainable)
            .map(|(i, _)| NodeId(i))
            .collect()
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor) -> Result<NodeId, KernelError> {
        if !value.is_finite() {
            return Err(KernelError::NonFinite { op: op.kind().name() });
        }
        self.nodes.push(Node {
            op,
            inputs,
            value,
            trainable: false,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> NodeId {
        let id = self.constant(t);
        self.nodes[id.0].trainable = true;
        id
    }

    /// Non-trainable leaf. Gradients still reach it and can be read back.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            value: t,
            trainable: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// `x·W + b` with `b` a single row broadcast over the rows of `x`.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, KernelError> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if xv.cols() != wv.rows() {
            return Err(shape_err("affine", xv, wv));
        }
        if bv.rows() != 1 || bv.cols() != wv.cols() {
            return Err(shape_err("affine", wv, bv));
        }
        let mut out = matmul(xv, wv);
        let m = out.cols();
        for (k, o) in out.data_mut().iter_mut().enumerate() {
            *o += bv.data()[k % m];
        }
        self.push(Op::Affine, vec![x, w, b], out)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, KernelError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err("add", av, bv));
        }
        let out = zip(av, bv, |x, y| x + y);
        self.push(Op::Add, vec![a, b], out)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, KernelError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err("mul", av, bv));
        }
        let out = zip(av, bv, |x, y| x * y);
        self.push(Op::Mul, vec![a, b], out)
    }

    /// Multiplies every entry of `a` by the `1×1` node `s`.
    pub fn mul_scalar(&mut self, a: NodeId, s: NodeId) -> Result<NodeId, KernelError> {
        let (av, sv) = (self.value(a), self.value(s));
        if !sv.is_scalar() {
            return Err(shape_err("mul_scalar", av, sv));
        }
        let k = sv.item();
        let out = map(av, |x| x * k);
        self.push(Op::MulScalar, vec![a, s], out)
    }

    /// `scale·a + shift` with constant coefficients.
    pub fn scale_shift(&mut self, a: NodeId, scale: f64, shift: f64) -> Result<NodeId, KernelError> {
        let out = map(self.value(a), |x| scale * x + shift);
        self.push(Op::ScaleShift { scale }, vec![a], out)
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId, KernelError> {
        let out = map(self.value(a), f64::tanh);
        self.push(Op::Tanh, vec![a], out)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId, KernelError> {
        let out = map(self.value(a), f64::exp);
        self.push(Op::Exp, vec![a], out)
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId, KernelError> {
        if self.value(a).data().iter().any(|&x| x <= 0.0) {
            return Err(KernelError::NonFinite { op: "log" });
        }
        let out = map(self.value(a), f64::ln);
        self.push(Op::Log, vec![a], out)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId, KernelError> {
        let out = map(self.value(a), sigmoid);
        self.push(Op::Sigmoid, vec![a], out)
    }

    /// Clamps into `[lo, hi]`; pinned entries pass no gradient and are counted.
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId, KernelError> {
        let av = self.value(a);
        let hits = av.data().iter().filter(|&&x| x < lo || x > hi).count();
        let out = map(av, |x| x.clamp(lo, hi));
        self.clamp_hits += hits;
        self.push(Op::Clamp { lo, hi }, vec![a], out)
    }

    /// Row-wise unit normalization. Zero rows map to zero rows and bump
    /// [`Graph::zero_rows`].
    pub fn l2_normalize(&mut self, a: NodeId) -> Result<NodeId, KernelError> {
        let n = l2_normalize(self.value(a));
        self.zero_rows += n.zero_rows.len();
        self.push(Op::L2Normalize, vec![a], n.tensor)
    }

    /// `A·Bᵀ`; cosine similarities when both inputs have unit rows.
    pub fn cosine_matrix(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, KernelError> {
        let out = cosine_matrix(self.value(a), self.value(b))?;
        self.push(Op::CosineMatrix, vec![a, b], out)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId, KernelError> {
        let out = softmax_rows(self.value(a))?;
        self.push(Op::SoftmaxRows, vec![a], out)
    }

    /// Diagonal of a square matrix as an `n×1` column.
    pub fn diag(&mut self, a: NodeId) -> Result<NodeId, KernelError> {
        let av = self.value(a);
        if av.rows() != av.cols() {
            return Err(shape_err("diag", av, av));
        }
        let n = av.rows();
        let out = Tensor::raw(n, 1, (0..n).map(|i| av.get(i, i)).collect());
        self.push(Op::Diag, vec![a], out)
    }

    /// Sum of each row as an `n×1` column.
    pub fn row_sum(&mut self, a: NodeId) -> Result<NodeId, KernelError> {
        let av = self.value(a);
        let out = Tensor::raw(
            av.rows(),
            1,
            (0..av.rows()).map(|i| av.row_slice(i).iter().sum()).collect(),
        );
        self.push(Op::RowSum, vec![a], out)
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, KernelError> {
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Op::Sum, vec![a], Tensor::scalar(s))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId, KernelError> {
        let av = self.value(a);
        if av.is_empty() {
            return Err(KernelError::Empty { op: "mean" });
        }
        let s: f64 = av.data().iter().sum();
        let m = s / av.len() as f64;
        self.push(Op::Mean, vec![a], Tensor::scalar(m))
    }

    /// Selects rows by index (repeats allowed).
    pub fn gather_rows(&mut self, a: NodeId, indices: &[usize]) -> Result<NodeId, KernelError> {
        let av = self.value(a);
        let c = av.cols();
        let mut out = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= av.rows() {
                return Err(KernelError::Index {
                    index: i,
                    rows: av.rows(),
                });
            }
            out.extend_from_slice(av.row_slice(i));
        }
        let out = Tensor::raw(indices.len(), c, out);
        self.push(Op::GatherRows(indices.to_vec()), vec![a], out)
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, KernelError> {
        let rows = parts
            .first()
            .map(|&p| self.value(p).rows())
            .ok_or(KernelError::Empty { op: "concat_cols" })?;
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(shape_err("concat_cols", self.value(parts[0]), self.value(p)));
            }
        }
        for i in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row_slice(i));
            }
        }
        self.push(Op::ConcatCols, parts.to_vec(), Tensor::raw(rows, total, out))
    }

    /// Identity in the forward pass; blocks all gradient flow backward.
    pub fn detach(&mut self, a: NodeId) -> Result<NodeId, KernelError> {
        let out = self.value(a).clone();
        self.push(Op::Detach, vec![a], out)
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, KernelError> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(KernelError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf | Op::Detach) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let contribs = self.local_grads(node, &g);
            // keep gradients of interior nodes readable for callers
            grads[idx] = Some(g);
            let flip = self.fault == Some(node.op.kind());
            for (input, mut c) in node.inputs.iter().zip(contribs) {
                if flip {
                    c.data_mut().iter_mut().for_each(|x| *x = -*x);
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.data_mut().iter_mut().zip(c.data()).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(c),
                }
            }
        }
        Ok(Gradients { grads })
    }

    // Vector-Jacobian products for one node, one tensor per input.
    fn local_grads(&self, node: &Node, g: &Tensor) -> Vec<Tensor> {
        let inp = |k: usize| self.value(node.inputs[k]);
        let y = &node.value;
        match &node.op {
            Op::Leaf | Op::Detach => Vec::new(),
            Op::Affine => {
                let (x, w) = (inp(0), inp(1));
                let dx = matmul(g, &w.transpose());
                let dw = matmul(&x.transpose(), g);
                let m = g.cols();
                let mut db = vec![0.0; m];
                for i in 0..g.rows() {
                    for (d, v) in db.iter_mut().zip(g.row_slice(i)) {
                        *d += v;
                    }
                }
                vec![dx, dw, Tensor::raw(1, m, db)]
            }
            Op::Add => vec![g.clone(), g.clone()],
            Op::Mul => vec![zip(g, inp(1), |a, b| a * b), zip(g, inp(0), |a, b| a * b)],
            Op::MulScalar => {
                let (a, s) = (inp(0), inp(1).item());
                let ds = dot(g.data(), a.data());
                vec![map(g, |x| x * s), Tensor::scalar(ds)]
            }
            Op::ScaleShift { scale } => vec![map(g, |x| x * scale)],
            Op::Tanh => vec![zip(g, y, |d, t| d * (1.0 - t * t))],
            Op::Exp => vec![zip(g, y, |d, e| d * e)],
            Op::Log => vec![zip(g, inp(0), |d, x| d / x)],
            Op::Sigmoid => vec![zip(g, y, |d, s| d * s * (1.0 - s))],
            Op::Clamp { lo, hi } => {
                let x = inp(0);
                vec![zip(g, x, |d, v| if v < *lo || v > *hi { 0.0 } else { d })]
            }
            Op::L2Normalize => {
                let x = inp(0);
                let c = x.cols();
                let mut out = vec![0.0; x.len()];
                for i in 0..x.rows() {
                    let norm = row_norm(x.row_slice(i));
                    if norm == 0.0 {
                        continue;
                    }
                    let yi = y.row_slice(i);
                    let gi = g.row_slice(i);
                    let proj = dot(yi, gi);
                    for j in 0..c {
                        out[i * c + j] = (gi[j] - yi[j] * proj) / norm;
                    }
                }
                vec![Tensor::raw(x.rows(), c, out)]
            }
            Op::CosineMatrix => {
                let (a, b) = (inp(0), inp(1));
                vec![matmul(g, b), matmul(&g.transpose(), a)]
            }
            Op::SoftmaxRows => {
                let c = y.cols();
                let mut out = vec![0.0; y.len()];
                for i in 0..y.rows() {
                    let yi = y.row_slice(i);
                    let gi = g.row_slice(i);
                    let s = dot(yi, gi);
                    for j in 0..c {
                        out[i * c + j] = yi[j] * (gi[j] - s);
                    }
                }
                vec![Tensor::raw(y.rows(), c, out)]
            }
            Op::Diag => {
                let n = g.rows();
                let mut out = Tensor::zeros(n, n);
                for i in 0..n {
                    out.data_mut()[i * n + i] = g.data()[i];
                }
                vec![out]
            }
            Op::RowSum => {
                let x = inp(0);
                let c = x.cols();
                let out = (0..x.len()).map(|k| g.data()[k / c]).collect();
                vec![Tensor::raw(x.rows(), c, out)]
            }
            Op::Sum => {
                let x = inp(0);
                vec![map(x, |_| g.item())]
            }
            Op::Mean => {
                let x = inp(0);
                let d = g.item() / x.len() as f64;
                vec![map(x, |_| d)]
            }
            Op::GatherRows(indices) => {
                let x = inp(0);
                let c = x.cols();
                let mut out = Tensor::zeros(x.rows(), c);
                for (r, &i) in indices.iter().enumerate() {
                    let dst = &mut out.data_mut()[i * c..(i + 1) * c];
                    for (d, v) in dst.iter_mut().zip(g.row_slice(r)) {
                        *d += v;
                    }
                }
                vec![out]
            }
            Op::ConcatCols => {
                let mut offset = 0;
                let mut outs = Vec::with_capacity(node.inputs.len());
                for k in 0..node.inputs.len() {
                    let part = inp(k);
                    let pc = part.cols();
                    let mut out = Vec::with_capacity(part.len());
                    for i in 0..g.rows() {
                        out.extend_from_slice(&g.row_slice(i)[offset..offset + pc]);
                    }
                    outs.push(Tensor::raw(part.rows(), pc, out));
                    offset += pc;
                }
                outs
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
