use super::tensor::{matmul_at_into, matmul_bt_into, matmul_into};
use super::{Tensor, TensorError};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Identifies a model parameter by group and position within the group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamRef {
    pub group: usize,
    pub index: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Relu(NodeId),
    SliceCols {
        src: NodeId,
        start: usize,
    },
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    Embedding {
        table: NodeId,
        ids: Vec<usize>,
    },
    Sum(NodeId),
    Mean(NodeId),
    SoftmaxCrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    SquaredError {
        pred: NodeId,
        targets: Vec<f64>,
    },
    MaxOverTime {
        steps: Vec<NodeId>,
        argmax: Vec<usize>,
    },
    MeanOverTime {
        steps: Vec<NodeId>,
        valid: Vec<Vec<bool>>,
        counts: Vec<f64>,
    },
    Masked {
        src: NodeId,
        mask: Vec<f64>,
    },
    Blend {
        a: NodeId,
        b: NodeId,
        take_a: Vec<bool>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording of one forward computation.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and backward is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(ParamRef, NodeId)>,
    grads: Option<Vec<Option<Tensor>>>,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize), TensorError> {
    t.dims2().ok_or_else(|| TensorError::ShapeMismatch {
        op,
        lhs: t.shape().to_vec(),
        rhs: vec![],
    })
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

// Only nodes on a requires_grad path get buffers.
fn slot<'a>(
    nodes: &[Node],
    grads: &'a mut [Option<Vec<f64>>],
    id: NodeId,
) -> Option<&'a mut Vec<f64>> {
    let n = &nodes[id.0];
    if !n.requires_grad {
        return None;
    }
    Some(grads[id.0].get_or_insert_with(|| vec![0.0; n.value.numel()]))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
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

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Gradient of the loss with respect to `id`, available after backward.
    /// Nodes the loss does not depend on report `None`.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.as_ref()?.get(id.0)?.as_ref()
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push_leaf(value, false)
    }

    /// Leaf that receives a gradient.
    pub fn variable(&mut self, value: Tensor) -> NodeId {
        self.push_leaf(value, true)
    }

    /// Leaf bound to a model parameter. Frozen parameters enter as constants.
    pub fn param(&mut self, key: ParamRef, value: &Tensor, requires_grad: bool) -> NodeId {
        let id = self.push_leaf(value.clone(), requires_grad);
        self.params.push((key, id));
        id
    }

    /// Gradients of every bound parameter that took part in the loss.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamRef, &Tensor)> + '_ {
        self.params
            .iter()
            .filter_map(move |&(k, id)| self.grad(id).map(|g| (k, g)))
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push(
        &mut self,
        name: &'static str,
        value: Tensor,
        op: Op,
        inputs: &[NodeId],
    ) -> Result<NodeId, TensorError> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = matrix("matmul", av)?;
        let (k2, n) = matrix("matmul", bv)?;
        if k != k2 {
            return Err(mismatch("matmul", av, bv));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(av.data(), bv.data(), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        self.push("matmul", value, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let av = self.value(a);
        let (r, c) = matrix("transpose", av)?;
        let src = av.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let value = Tensor::new(vec![c, r], out)?;
        self.push("transpose", value, Op::Transpose(a), &[a])
    }

    fn zip_same(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(mismatch(name, av, bv));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        self.push(name, value, op, &[a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `a[r,c] + bias` where `bias` holds `c` values; the only broadcast.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId, TensorError> {
        let (av, bv) = (self.value(a), self.value(bias));
        let (_, c) = matrix("add_row", av)?;
        let bias_ok =
            matches!(bv.shape(), [n] if *n == c) || matches!(bv.shape(), [1, n] if *n == c);
        if !bias_ok {
            return Err(mismatch("add_row", av, bv));
        }
        let b = bv.data();
        let data = av
            .data()
            .chunks(c)
            .flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        self.push("add_row", value, Op::AddRow(a, bias), &[a, bias])
    }

    fn map(
        &mut self,
        name: &'static str,
        a: NodeId,
        f: impl Fn(f64) -> f64,
        op: Op,
    ) -> Result<NodeId, TensorError> {
        let av = self.value(a);
        let data = av.data().iter().map(|x| f(*x)).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        self.push(name, value, op, &[a])
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> Result<NodeId, TensorError> {
        self.map("scale", a, |x| x * s, Op::Scale(a, s))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        self.map("tanh", a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        self.map("sigmoid", a, sigmoid, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        self.map("relu", a, |x| x.max(0.0), Op::Relu(a))
    }

    /// Elementwise product with a fixed mask. Dropout passes a mask whose
    /// kept entries are already scaled by `1 / (1 - p)`.
    pub fn masked(&mut self, a: NodeId, mask: &Tensor) -> Result<NodeId, TensorError> {
        let av = self.value(a);
        if av.shape() != mask.shape() {
            return Err(mismatch("dropout", av, mask));
        }
        let data = av
            .data()
            .iter()
            .zip(mask.data())
            .map(|(x, m)| x * m)
            .collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let op = Op::Masked {
            src: a,
            mask: mask.data().to_vec(),
        };
        self.push("dropout", value, op, &[a])
    }

    /// Row-wise select: row `r` comes from `a` when `take_a[r]`, else from `b`.
    pub fn blend_rows(
        &mut self,
        a: NodeId,
        b: NodeId,
        take_a: &[bool],
    ) -> Result<NodeId, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(mismatch("blend_rows", av, bv));
        }
        let (r, c) = matrix("blend_rows", av)?;
        if take_a.len() != r {
            return Err(TensorError::ShapeMismatch {
                op: "blend_rows",
                lhs: av.shape().to_vec(),
                rhs: vec![take_a.len()],
            });
        }
        let mut data = Vec::with_capacity(r * c);
        for (i, &t) in take_a.iter().enumerate() {
            data.extend_from_slice(if t { av.row(i) } else { bv.row(i) });
        }
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let op = Op::Blend {
            a,
            b,
            take_a: take_a.to_vec(),
        };
        self.push("blend_rows", value, op, &[a, b])
    }

    pub fn slice_cols(
        &mut self,
        a: NodeId,
        start: usize,
        len: usize,
    ) -> Result<NodeId, TensorError> {
        let av = self.value(a);
        let (r, c) = matrix("slice_cols", av)?;
        if len == 0 || start + len > c {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_cols",
                index: start + len,
                bound: c,
            });
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&av.row(i)[start..start + len]);
        }
        let value = Tensor::new(vec![r, len], data)?;
        self.push("slice_cols", value, Op::SliceCols { src: a, start }, &[a])
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, TensorError> {
        let first = *parts
            .first()
            .ok_or(TensorError::Empty { op: "concat_cols" })?;
        let (r, _) = matrix("concat_cols", self.value(first))?;
        let mut total = 0;
        for &p in parts {
            let (pr, pc) = matrix("concat_cols", self.value(p))?;
            if pr != r {
                return Err(mismatch("concat_cols", self.value(first), self.value(p)));
            }
            total += pc;
        }
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let value = Tensor::new(vec![r, total], data)?;
        self.push("concat_cols", value, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId, TensorError> {
        let first = *parts
            .first()
            .ok_or(TensorError::Empty { op: "concat_rows" })?;
        let (_, c) = matrix("concat_rows", self.value(first))?;
        let mut rows = 0;
        for &p in parts {
            let (pr, pc) = matrix("concat_rows", self.value(p))?;
            if pc != c {
                return Err(mismatch("concat_rows", self.value(first), self.value(p)));
            }
            rows += pr;
        }
        let mut data = Vec::with_capacity(rows * c);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::new(vec![rows, c], data)?;
        self.push("concat_rows", value, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Gathers rows of `table[V,E]` for each id, giving `[ids.len(), E]`.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId, TensorError> {
        if ids.is_empty() {
            return Err(TensorError::Empty { op: "embedding" });
        }
        let tv = self.value(table);
        let (v, e) = matrix("embedding", tv)?;
        let mut data = Vec::with_capacity(ids.len() * e);
        for &id in ids {
            if id >= v {
                return Err(TensorError::IndexOutOfRange {
                    op: "embedding",
                    index: id,
                    bound: v,
                });
            }
            data.extend_from_slice(tv.row(id));
        }
        let value = Tensor::new(vec![ids.len(), e], data)?;
        let op = Op::Embedding {
            table,
            ids: ids.to_vec(),
        };
        self.push("embedding", value, op, &[table])
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let s = self.value(a).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let av = self.value(a);
        let s = av.data().iter().sum::<f64>() / av.numel() as f64;
        self.push("mean", Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Mean cross-entropy of row-wise softmax over `logits[N,C]`.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[usize],
    ) -> Result<NodeId, TensorError> {
        let lv = self.value(logits);
        let (n, c) = matrix("softmax_cross_entropy", lv)?;
        if targets.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "softmax_cross_entropy",
                lhs: lv.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let mut probs = vec![0.0; n * c];
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            if t >= c {
                return Err(TensorError::IndexOutOfRange {
                    op: "softmax_cross_entropy",
                    index: t,
                    bound: c,
                });
            }
            let row = lv.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (p, x) in probs[i * c..(i + 1) * c].iter_mut().zip(row) {
                *p = (x - max).exp();
                z += *p;
            }
            for p in &mut probs[i * c..(i + 1) * c] {
                *p /= z;
            }
            loss += z.ln() - (row[t] - max);
        }
        let value = Tensor::scalar(loss / n as f64);
        let op = Op::SoftmaxCrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs,
        };
        self.push("softmax_cross_entropy", value, op, &[logits])
    }

    /// Mean squared error between `pred` (N values) and `targets`.
    pub fn squared_error(&mut self, pred: NodeId, targets: &[f64]) -> Result<NodeId, TensorError> {
        let pv = self.value(pred);
        if pv.numel() != targets.len() {
            return Err(TensorError::ShapeMismatch {
                op: "squared_error",
                lhs: pv.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let n = targets.len() as f64;
        let s: f64 = pv
            .data()
            .iter()
            .zip(targets)
            .map(|(p, t)| (p - t) * (p - t))
            .sum();
        let op = Op::SquaredError {
            pred,
            targets: targets.to_vec(),
        };
        self.push("squared_error", Tensor::scalar(s / n), op, &[pred])
    }

    fn check_steps(
        &self,
        op: &'static str,
        steps: &[NodeId],
        valid: &[Vec<bool>],
    ) -> Result<(usize, usize), TensorError> {
        let first = *steps.first().ok_or(TensorError::Empty { op })?;
        let (b, h) = matrix(op, self.value(first))?;
        if valid.len() != steps.len() || valid.iter().any(|v| v.len() != b) {
            return Err(TensorError::InvalidArgument(format!(
                "{op}: validity mask must be {} x {b}",
                steps.len()
            )));
        }
        for &s in steps {
            if self.value(s).shape() != self.value(first).shape() {
                return Err(mismatch(op, self.value(first), self.value(s)));
            }
        }
        for r in 0..b {
            if !valid.iter().any(|v| v[r]) {
                return Err(TensorError::Empty { op });
            }
        }
        Ok((b, h))
    }

    /// Elementwise max over time steps, skipping positions where
    /// `valid[t][row]` is false. Each step is `[B,H]`.
    pub fn max_over_time(
        &mut self,
        steps: &[NodeId],
        valid: &[Vec<bool>],
    ) -> Result<NodeId, TensorError> {
        let (b, h) = self.check_steps("max_over_time", steps, valid)?;
        let mut out = vec![f64::NEG_INFINITY; b * h];
        let mut argmax = vec![0usize; b * h];
        for (t, &s) in steps.iter().enumerate() {
            let sv = self.value(s).data();
            for (r, _) in valid[t].iter().enumerate().filter(|(_, ok)| **ok) {
                for j in 0..h {
                    let k = r * h + j;
                    if sv[k] > out[k] {
                        out[k] = sv[k];
                        argmax[k] = t;
                    }
                }
            }
        }
        let value = Tensor::new(vec![b, h], out)?;
        let op = Op::MaxOverTime {
            steps: steps.to_vec(),
            argmax,
        };
        self.push("max_over_time", value, op, steps)
    }

    /// Elementwise mean over valid time steps; each row divides by its own
    /// count of valid steps.
    pub fn mean_over_time(
        &mut self,
        steps: &[NodeId],
        valid: &[Vec<bool>],
    ) -> Result<NodeId, TensorError> {
        let (b, h) = self.check_steps("mean_over_time", steps, valid)?;
        let counts: Vec<f64> = (0..b)
            .map(|r| valid.iter().filter(|v| v[r]).count() as f64)
            .collect();
        let mut out = vec![0.0; b * h];
        for (t, &s) in steps.iter().enumerate() {
            let sv = self.value(s).data();
            for r in 0..b {
                if valid[t][r] {
                    for j in 0..h {
                        out[r * h + j] += sv[r * h + j];
                    }
                }
            }
        }
        for r in 0..b {
            for j in 0..h {
                out[r * h + j] /= counts[r];
            }
        }
        let value = Tensor::new(vec![b, h], out)?;
        let op = Op::MeanOverTime {
            steps: steps.to_vec(),
            valid: valid.to_vec(),
            counts,
        };
        self.push("mean_over_time", value, op, steps)
    }

    /// Reverse sweep from a scalar loss. May run once per graph.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), TensorError> {
        if self.grads.is_some() {
            return Err(TensorError::BackwardTwice);
        }
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: lv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let out = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| {
                g.filter(|_| n.requires_grad)
                    .map(|g| Tensor::new(n.value.shape().to_vec(), g).expect("gradient shape"))
            })
            .collect();
        self.grads = Some(out);
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let node = &nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k) = av.dims2().unwrap();
                let n = bv.cols();
                if let Some(ga) = slot(nodes, grads, *a) {
                    matmul_bt_into(g, bv.data(), ga, m, n, k);
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    matmul_at_into(av.data(), g, gb, m, k, n);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = nodes[a.0].value.dims2().unwrap();
                if let Some(ga) = slot(nodes, grads, *a) {
                    for ii in 0..r {
                        for j in 0..c {
                            ga[ii * c + j] += g[j * r + ii];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                if let Some(ga) = slot(nodes, grads, *a) {
                    for ((x, gy), bb) in ga.iter_mut().zip(g).zip(bv) {
                        *x += gy * bb;
                    }
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    for ((x, gy), aa) in gb.iter_mut().zip(g).zip(av) {
                        *x += gy * aa;
                    }
                }
            }
            Op::AddRow(a, bias) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = slot(nodes, grads, *bias) {
                    let c = gb.len();
                    for row in g.chunks(c) {
                        gb.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y * s);
                }
            }
            Op::Tanh(a) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    for ((x, gy), y) in ga.iter_mut().zip(g).zip(out) {
                        *x += gy * (1.0 - y * y);
                    }
                }
            }
            Op::Sigmoid(a) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    for ((x, gy), y) in ga.iter_mut().zip(g).zip(out) {
                        *x += gy * y * (1.0 - y);
                    }
                }
            }
            Op::Relu(a) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    for ((x, gy), y) in ga.iter_mut().zip(g).zip(out) {
                        if *y > 0.0 {
                            *x += gy;
                        }
                    }
                }
            }
            Op::Masked { src, mask } => {
                if let Some(ga) = slot(nodes, grads, *src) {
                    for ((x, gy), m) in ga.iter_mut().zip(g).zip(mask) {
                        *x += gy * m;
                    }
                }
            }
            Op::Blend { a, b, take_a } => {
                let c = node.value.cols();
                if let Some(ga) = slot(nodes, grads, *a) {
                    for (r, _) in take_a.iter().enumerate().filter(|(_, t)| **t) {
                        for j in r * c..(r + 1) * c {
                            ga[j] += g[j];
                        }
                    }
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    for (r, _) in take_a.iter().enumerate().filter(|(_, t)| !**t) {
                        for j in r * c..(r + 1) * c {
                            gb[j] += g[j];
                        }
                    }
                }
            }
            Op::SliceCols { src, start } => {
                let c = nodes[src.0].value.cols();
                let len = node.value.cols();
                if let Some(ga) = slot(nodes, grads, *src) {
                    for (r, row) in g.chunks(len).enumerate() {
                        let dst = &mut ga[r * c + start..r * c + start + len];
                        dst.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut offset = 0;
                for p in parts {
                    let pc = nodes[p.0].value.cols();
                    if let Some(gp) = slot(nodes, grads, *p) {
                        for (r, dst) in gp.chunks_mut(pc).enumerate() {
                            let src = &g[r * total + offset..r * total + offset + pc];
                            dst.iter_mut().zip(src).for_each(|(x, y)| *x += y);
                        }
                    }
                    offset += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = nodes[p.0].value.numel();
                    if let Some(gp) = slot(nodes, grads, *p) {
                        gp.iter_mut()
                            .zip(&g[offset..offset + n])
                            .for_each(|(x, y)| *x += y);
                    }
                    offset += n;
                }
            }
            Op::Embedding { table, ids } => {
                let e = node.value.cols();
                if let Some(gt) = slot(nodes, grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut gt[id * e..(id + 1) * e];
                        dst.iter_mut()
                            .zip(&g[r * e..(r + 1) * e])
                            .for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::Mean(a) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    let n = ga.len() as f64;
                    ga.iter_mut().for_each(|x| *x += g[0] / n);
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                probs,
            } => {
                if let Some(gl) = slot(nodes, grads, *logits) {
                    let n = targets.len();
                    let c = probs.len() / n;
                    let s = g[0] / n as f64;
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            gl[r * c + j] += s * (probs[r * c + j] - onehot);
                        }
                    }
                }
            }
            Op::SquaredError { pred, targets } => {
                let pv = nodes[pred.0].value.data();
                if let Some(gp) = slot(nodes, grads, *pred) {
                    let s = 2.0 * g[0] / targets.len() as f64;
                    for ((x, p), t) in gp.iter_mut().zip(pv).zip(targets) {
                        *x += s * (p - t);
                    }
                }
            }
            Op::MaxOverTime { steps, argmax } => {
                for (t, s) in steps.iter().enumerate() {
                    if let Some(gs) = slot(nodes, grads, *s) {
                        for (k, &am) in argmax.iter().enumerate() {
                            if am == t {
                                gs[k] += g[k];
                            }
                        }
                    }
                }
            }
            Op::MeanOverTime {
                steps,
                valid,
                counts,
            } => {
                let h = node.value.cols();
                for (t, s) in steps.iter().enumerate() {
                    if let Some(gs) = slot(nodes, grads, *s) {
                        for (r, cnt) in counts.iter().enumerate() {
                            if valid[t][r] {
                                for j in r * h..(r + 1) * h {
                                    gs[j] += g[j] / cnt;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}
