//! Dense tensors and a recorded-operation graph for reverse-mode autodiff.
//!
//! The [`Graph`] owns a tape of executed primitives. Every operation clones or
//! produces plain [`Tensor`] values, so tensors themselves stay `Send` and can
//! move freely between threads; the tape is strictly single-threaded.
//!
//! Gradient semantics: [`Graph::backward`] runs one reverse sweep over a fresh
//! set of pass-local buffers and then adds the result into each node's
//! persistent accumulator. Calling `backward` twice on the same graph without
//! [`Graph::zero_grad`] therefore yields exactly twice the single-pass
//! gradient, which is what lets composite losses be differentiated term by
//! term.

use crate::error::{Error, Result};

/// Element width of a tensor. Computation always runs in `f64`; tensors with
/// [`DType::F32`] have every stored forward value rounded through `f32`, and
/// checkpoints store their payload at the matching width. Gradient buffers
/// stay 64-bit in both cases.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn byte_width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
    }

    pub fn parse(s: &str) -> Option<DType> {
        match s {
            "f32" => Some(DType::F32),
            "f64" => Some(DType::F64),
            _ => None,
        }
    }
}

/// Dense row-major array with shape, dtype, and a lazily allocated gradient
/// buffer. `product(shape) == data.len()` holds at all times.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    dtype: DType,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Rank {
                op: "tensor_new",
                expected: "product(shape) == data length",
                got: shape,
            });
        }
        let t = Tensor {
            shape,
            data,
            dtype: DType::F64,
            requires_grad: false,
            grad: None,
        };
        t.debug_check_finite("tensor_new")?;
        Ok(t)
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
            dtype: DType::F64,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::new(vec![1], vec![v]).expect("scalar shape is consistent")
    }

    /// 2-D constructor from rows; every row must have the same width.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Tensor> {
        let n = rows.len();
        let m = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(n * m);
        for r in rows {
            if r.len() != m {
                return Err(Error::dim("from_rows", &[n, m], &[r.len()]));
            }
            data.extend_from_slice(r);
        }
        Tensor::new(vec![n, m], data)
    }

    pub fn with_requires_grad(mut self) -> Tensor {
        self.requires_grad = true;
        self
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    /// Converts the tensor's dtype, rounding stored values when narrowing.
    pub fn with_dtype(mut self, dtype: DType) -> Tensor {
        self.dtype = dtype;
        if dtype == DType::F32 {
            for v in &mut self.data {
                *v = *v as f32 as f64;
            }
        }
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Single stored value of a scalar tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::Rank {
                op: "item",
                expected: "scalar (one element)",
                got: self.shape.clone(),
            });
        }
        Ok(self.data[0])
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Adds `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::dim("accumulate_grad", &self.shape, &[g.len()]));
        }
        let buf = self.grad.get_or_insert_with(|| vec![0.0; g.len()]);
        for (b, v) in buf.iter_mut().zip(g) {
            *b += v;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// NaN/Inf detection, active only when debug assertions are compiled in.
    fn debug_check_finite(&self, context: &str) -> Result<()> {
        if cfg!(debug_assertions) && self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: context.to_string(),
            });
        }
        Ok(())
    }

    fn round_to_dtype(&mut self) {
        if self.dtype == DType::F32 {
            for v in &mut self.data {
                *v = *v as f32 as f64;
            }
        }
    }
}

/// Whether an operation runs with batch statistics (updating running state)
/// or with frozen running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running batchnorm statistics, owned by the layer that uses them.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BnStats {
    pub fn fresh(width: usize) -> BnStats {
        BnStats {
            mean: vec![0.0; width],
            var: vec![1.0; width],
        }
    }
}

pub type NodeId = usize;

enum Op {
    Leaf,
    Detach,
    Matmul {
        a: NodeId,
        b: NodeId,
    },
    Transpose {
        a: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
        broadcast_b: bool,
    },
    Sub {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        a: NodeId,
        c: f64,
    },
    Sum {
        a: NodeId,
    },
    Mean {
        a: NodeId,
    },
    Relu {
        a: NodeId,
    },
    Softmax {
        a: NodeId,
        cols: usize,
    },
    LogSoftmax {
        a: NodeId,
        cols: usize,
    },
    /// Saved values cover both modes: `xhat` is the normalized input and
    /// `inv_std` the per-column 1/sqrt(var+eps) actually used; `train`
    /// selects the coupled backward formula.
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    NllFromLogProbs {
        logp: NodeId,
        labels: Vec<usize>,
    },
    NegCosineRows {
        s: NodeId,
        t: NodeId,
    },
    FrobeniusDiff {
        a: NodeId,
        b: NodeId,
    },
}

impl Op {
    fn inputs(&self) -> Vec<NodeId> {
        match *self {
            Op::Leaf => vec![],
            Op::Detach => vec![],
            Op::Matmul { a, b } => vec![a, b],
            Op::Transpose { a } => vec![a],
            Op::Add { a, b, .. } => vec![a, b],
            Op::Sub { a, b } => vec![a, b],
            Op::Mul { a, b } => vec![a, b],
            Op::Scale { a, .. } => vec![a],
            Op::Sum { a } => vec![a],
            Op::Mean { a } => vec![a],
            Op::Relu { a } => vec![a],
            Op::Softmax { a, .. } => vec![a],
            Op::LogSoftmax { a, .. } => vec![a],
            Op::BatchNorm { x, gamma, beta, .. } => vec![x, gamma, beta],
            Op::NllFromLogProbs { logp, .. } => vec![logp],
            Op::NegCosineRows { s, t } => vec![s, t],
            Op::FrobeniusDiff { a, b } => vec![a, b],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    /// True when the node's value depends on some requires-grad leaf.
    needs_grad: bool,
    /// Persistent gradient accumulator; `backward` adds into it.
    accum: Option<Vec<f64>>,
}

/// Tape of executed operations. Node ids are indices into the tape, so every
/// node's inputs precede it and one reverse sweep visits each node once.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Frobenius norm of the elementwise difference, shared by the graph op and
/// the classifier-distance analytics so the two agree bit-exactly.
pub(crate) fn frobenius_diff_kernel(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        acc += d * d;
    }
    acc.sqrt()
}

impl Graph {
    pub fn new() -> Graph {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    /// Accumulated gradient of a node, if any backward pass has reached it.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id].accum.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.accum = None;
        }
    }

    /// Registers a tensor as a graph input, cloning its current value. The
    /// clone keeps the tensor's `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor) -> NodeId {
        let needs = t.requires_grad();
        self.push(t.clone(), Op::Leaf, needs)
    }

    /// Registers a tensor as a constant input regardless of its flag.
    pub fn leaf_constant(&mut self, t: &Tensor) -> NodeId {
        let mut v = t.clone();
        v.set_requires_grad(false);
        self.push(v, Op::Leaf, false)
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            accum: None,
        });
        self.nodes.len() - 1
    }

    fn result(&mut self, mut value: Tensor, op: Op) -> Result<NodeId> {
        let needs = op
            .inputs()
            .iter()
            .any(|&i| self.nodes[i].needs_grad);
        value.round_to_dtype();
        value.debug_check_finite(op_name(&op))?;
        Ok(self.push(value, op, needs))
    }

    fn out_dtype(&self, ids: &[NodeId]) -> DType {
        if ids
            .iter()
            .any(|&i| self.nodes[i].value.dtype() == DType::F32)
        {
            DType::F32
        } else {
            DType::F64
        }
    }

    /// Copies a value while blocking gradient flow into its producer.
    pub fn detach(&mut self, a: NodeId) -> NodeId {
        let mut v = self.nodes[a].value.clone();
        v.set_requires_grad(false);
        self.push(v, Op::Detach, false)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape2(a, "matmul")?, self.shape2(b, "matmul")?);
        if sa.1 != sb.0 {
            return Err(Error::dim(
                "matmul",
                self.nodes[a].value.shape(),
                self.nodes[b].value.shape(),
            ));
        }
        let (n, k, m) = (sa.0, sa.1, sb.1);
        let mut out = vec![0.0; n * m];
        mm_nn(
            self.nodes[a].value.data(),
            self.nodes[b].value.data(),
            n,
            k,
            m,
            &mut out,
        );
        let dt = self.out_dtype(&[a, b]);
        let value = Tensor::new(vec![n, m], out)?.with_dtype(dt);
        self.result(value, Op::Matmul { a, b })
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let (n, m) = self.shape2(a, "transpose")?;
        let src = self.nodes[a].value.data();
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[j * n + i] = src[i * m + j];
            }
        }
        let dt = self.out_dtype(&[a]);
        let value = Tensor::new(vec![m, n], out)?.with_dtype(dt);
        self.result(value, Op::Transpose { a })
    }

    /// Elementwise addition. Shapes must be equal, or `b` may match `a`'s
    /// shape with the leading batch dimension removed (bias broadcast).
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.nodes[a].value.shape().to_vec();
        let sb = self.nodes[b].value.shape().to_vec();
        let broadcast_b = sa != sb;
        if broadcast_b && (sa.len() < 2 || sa[1..] != sb[..]) {
            return Err(Error::dim("add", &sa, &sb));
        }
        let da = self.nodes[a].value.data();
        let db = self.nodes[b].value.data();
        let mut out = Vec::with_capacity(da.len());
        if broadcast_b {
            let stride = db.len();
            for (i, v) in da.iter().enumerate() {
                out.push(v + db[i % stride]);
            }
        } else {
            out.extend(da.iter().zip(db).map(|(x, y)| x + y));
        }
        let dt = self.out_dtype(&[a, b]);
        let value = Tensor::new(sa, out)?.with_dtype(dt);
        self.result(value, Op::Add { a, b, broadcast_b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.ew2(a, b, "sub", |x, y| x - y, |a, b| Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.ew2(a, b, "mul", |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    fn ew2(
        &mut self,
        a: NodeId,
        b: NodeId,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: impl Fn(NodeId, NodeId) -> Op,
    ) -> Result<NodeId> {
        let sa = self.nodes[a].value.shape().to_vec();
        let sb = self.nodes[b].value.shape();
        if sa != sb {
            return Err(Error::dim(name, &sa, sb));
        }
        let out: Vec<f64> = self.nodes[a]
            .value
            .data()
            .iter()
            .zip(self.nodes[b].value.data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let dt = self.out_dtype(&[a, b]);
        let value = Tensor::new(sa, out)?.with_dtype(dt);
        self.result(value, op(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let sa = self.nodes[a].value.shape().to_vec();
        let out: Vec<f64> = self.nodes[a].value.data().iter().map(|x| x * c).collect();
        let dt = self.out_dtype(&[a]);
        let value = Tensor::new(sa, out)?.with_dtype(dt);
        self.result(value, Op::Scale { a, c })
    }

    /// Sum of all elements, producing a scalar of shape `[1]`.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s: f64 = self.nodes[a].value.data().iter().sum();
        let dt = self.out_dtype(&[a]);
        let value = Tensor::scalar(s).with_dtype(dt);
        self.result(value, Op::Sum { a })
    }

    /// Mean of all elements, producing a scalar of shape `[1]`.
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let d = self.nodes[a].value.data();
        if d.is_empty() {
            return Err(Error::Rank {
                op: "mean",
                expected: "at least one element",
                got: self.nodes[a].value.shape().to_vec(),
            });
        }
        let s: f64 = d.iter().sum();
        let dt = self.out_dtype(&[a]);
        let value = Tensor::scalar(s / d.len() as f64).with_dtype(dt);
        self.result(value, Op::Mean { a })
    }

    /// max(0, x) elementwise; the subgradient at exactly 0 is 0.
    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let sa = self.nodes[a].value.shape().to_vec();
        let out: Vec<f64> = self.nodes[a]
            .value
            .data()
            .iter()
            .map(|&x| if x > 0.0 { x } else { 0.0 })
            .collect();
        let dt = self.out_dtype(&[a]);
        let value = Tensor::new(sa, out)?.with_dtype(dt);
        self.result(value, Op::Relu { a })
    }

    /// Rowwise softmax over the last dimension of an `[n, C]` tensor,
    /// computed with max-subtraction for stability.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let (n, c) = self.shape2(a, "softmax")?;
        let mut out = vec![0.0; n * c];
        softmax_rows(self.nodes[a].value.data(), n, c, &mut out);
        let dt = self.out_dtype(&[a]);
        let value = Tensor::new(vec![n, c], out)?.with_dtype(dt);
        self.result(value, Op::Softmax { a, cols: c })
    }

    /// Rowwise `x - logsumexp(x)`.
    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let (n, c) = self.shape2(a, "log_softmax")?;
        let src = self.nodes[a].value.data();
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            let row = &src[i * c..(i + 1) * c];
            let lse = logsumexp(row);
            for j in 0..c {
                out[i * c + j] = row[j] - lse;
            }
        }
        let dt = self.out_dtype(&[a]);
        let value = Tensor::new(vec![n, c], out)?.with_dtype(dt);
        self.result(value, Op::LogSoftmax { a, cols: c })
    }

    /// 1-D batch normalization over an `[n, h]` input with learnable scale
    /// and shift. Train mode normalizes by biased batch statistics and folds
    /// them into `state` with the given momentum (the running variance update
    /// uses the unbiased estimate); eval mode normalizes by `state`.
    pub fn batchnorm1d(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        state: &mut BnStats,
        mode: Mode,
        momentum: f64,
        eps: f64,
    ) -> Result<NodeId> {
        let (n, h) = self.shape2(x, "batchnorm1d")?;
        for id in [gamma, beta] {
            if self.nodes[id].value.shape() != [h] {
                return Err(Error::Dimension {
                    op: "batchnorm1d",
                    lhs: vec![n, h],
                    rhs: self.nodes[id].value.shape().to_vec(),
                });
            }
        }
        if state.mean.len() != h || state.var.len() != h {
            return Err(Error::dim("batchnorm1d", &[h], &[state.mean.len()]));
        }
        let train = mode == Mode::Train;
        if train && n < 2 {
            return Err(Error::BatchSize {
                op: "batchnorm1d",
                got: n,
                min: 2,
            });
        }
        let dt = self.out_dtype(&[x, gamma, beta]);
        let xd = self.nodes[x].value.data();
        let (mut mean, mut var) = (vec![0.0; h], vec![0.0; h]);
        if train {
            for j in 0..h {
                let mut m = 0.0;
                for i in 0..n {
                    m += xd[i * h + j];
                }
                m /= n as f64;
                let mut v = 0.0;
                for i in 0..n {
                    let d = xd[i * h + j] - m;
                    v += d * d;
                }
                mean[j] = m;
                var[j] = v / n as f64;
            }
            // Running stats live at the op's dtype so checkpoints of 32-bit
            // models store them without loss.
            let keep = |v: f64| match dt {
                DType::F32 => v as f32 as f64,
                DType::F64 => v,
            };
            for j in 0..h {
                let unbiased = var[j] * n as f64 / (n as f64 - 1.0);
                state.mean[j] = keep((1.0 - momentum) * state.mean[j] + momentum * mean[j]);
                state.var[j] = keep((1.0 - momentum) * state.var[j] + momentum * unbiased);
            }
        } else {
            mean.copy_from_slice(&state.mean);
            var.copy_from_slice(&state.var);
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; n * h];
        for i in 0..n {
            for j in 0..h {
                xhat[i * h + j] = (xd[i * h + j] - mean[j]) * inv_std[j];
            }
        }
        let gd = self.nodes[gamma].value.data();
        let bd = self.nodes[beta].value.data();
        let mut out = vec![0.0; n * h];
        for i in 0..n {
            for j in 0..h {
                out[i * h + j] = gd[j] * xhat[i * h + j] + bd[j];
            }
        }
        let value = Tensor::new(vec![n, h], out)?.with_dtype(dt);
        self.result(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
        )
    }

    /// Mean over the batch of `-logp[i, labels[i]]`; the fused gather behind
    /// hard-label cross-entropy.
    pub fn nll_from_log_probs(&mut self, logp: NodeId, labels: &[usize]) -> Result<NodeId> {
        let (n, c) = self.shape2(logp, "nll_from_log_probs")?;
        if labels.len() != n {
            return Err(Error::dim("nll_from_log_probs", &[n, c], &[labels.len()]));
        }
        let d = self.nodes[logp].value.data();
        let mut acc = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            if y >= c {
                return Err(Error::Label {
                    label: y,
                    classes: c,
                });
            }
            acc -= d[i * c + y];
        }
        let dt = self.out_dtype(&[logp]);
        let value = Tensor::scalar(acc / n as f64).with_dtype(dt);
        self.result(
            value,
            Op::NllFromLogProbs {
                logp,
                labels: labels.to_vec(),
            },
        )
    }

    /// Mean over rows of the negative cosine similarity between matching rows
    /// of two `[n, C]` tensors. The denominator is clamped at 1e-12 so
    /// degenerate zero rows stay finite.
    pub fn neg_cosine_rows(&mut self, s: NodeId, t: NodeId) -> Result<NodeId> {
        let (n, c) = self.shape2(s, "neg_cosine_rows")?;
        if self.nodes[t].value.shape() != [n, c] {
            return Err(Error::dim(
                "neg_cosine_rows",
                &[n, c],
                self.nodes[t].value.shape(),
            ));
        }
        let sd = self.nodes[s].value.data();
        let td = self.nodes[t].value.data();
        let mut acc = 0.0;
        for i in 0..n {
            let (dot, ns, nt) = row_dot_norms(&sd[i * c..(i + 1) * c], &td[i * c..(i + 1) * c]);
            acc -= dot / (ns * nt).max(COSINE_EPS);
        }
        let dt = self.out_dtype(&[s, t]);
        let value = Tensor::scalar(acc / n as f64).with_dtype(dt);
        self.result(value, Op::NegCosineRows { s, t })
    }

    /// sqrt of the summed squared elementwise difference. At zero distance
    /// the subgradient 0 is used.
    pub fn frobenius_diff(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.nodes[a].value.shape().to_vec();
        if sa != self.nodes[b].value.shape() {
            return Err(Error::dim("frobenius_diff", &sa, self.nodes[b].value.shape()));
        }
        let v = frobenius_diff_kernel(self.nodes[a].value.data(), self.nodes[b].value.data());
        let dt = self.out_dtype(&[a, b]);
        let value = Tensor::scalar(v).with_dtype(dt);
        self.result(value, Op::FrobeniusDiff { a, b })
    }

    fn shape2(&self, id: NodeId, op: &'static str) -> Result<(usize, usize)> {
        let s = self.nodes[id].value.shape();
        if s.len() != 2 {
            return Err(Error::Rank {
                op,
                expected: "2-D tensor",
                got: s.to_vec(),
            });
        }
        Ok((s[0], s[1]))
    }

    /// Input values of every relu node, in creation order. Gradient checking
    /// uses these to skip coordinates near the kink.
    pub fn relu_input_snapshots(&self) -> Vec<Vec<f64>> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu { a } => Some(self.nodes[a].value.data().to_vec()),
                _ => None,
            })
            .collect()
    }

    /// Reverse sweep from a scalar loss node. Runs on pass-local buffers and
    /// then adds into each node's persistent accumulator, so repeated calls
    /// accumulate until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss].value.numel() != 1 {
            return Err(Error::Rank {
                op: "backward",
                expected: "scalar loss",
                got: self.nodes[loss].value.shape().to_vec(),
            });
        }
        let mut pass: Vec<Option<Vec<f64>>> = (0..=loss).map(|_| None).collect();
        pass[loss] = Some(vec![1.0]);
        for id in (0..=loss).rev() {
            let Some(g) = pass[id].take() else {
                continue;
            };
            self.propagate(id, &g, &mut pass);
            let node = &mut self.nodes[id];
            let accum = node
                .accum
                .get_or_insert_with(|| vec![0.0; node.value.numel()]);
            for (a, v) in accum.iter_mut().zip(&g) {
                *a += v;
            }
        }
        Ok(())
    }

    fn propagate(&self, id: NodeId, g: &[f64], pass: &mut [Option<Vec<f64>>]) {
        let add_into = |pass: &mut [Option<Vec<f64>>], target: NodeId, contrib: Vec<f64>| {
            match &mut pass[target] {
                Some(buf) => {
                    for (b, v) in buf.iter_mut().zip(&contrib) {
                        *b += v;
                    }
                }
                slot => *slot = Some(contrib),
            }
        };
        let needs = |i: NodeId| self.nodes[i].needs_grad;
        match &self.nodes[id].op {
            Op::Leaf | Op::Detach => {}
            &Op::Matmul { a, b } => {
                let (n, k) = (self.nodes[a].value.shape()[0], self.nodes[a].value.shape()[1]);
                let m = self.nodes[b].value.shape()[1];
                if needs(a) {
                    let mut da = vec![0.0; n * k];
                    mm_nt(g, self.nodes[b].value.data(), n, m, k, &mut da);
                    add_into(pass, a, da);
                }
                if needs(b) {
                    let mut db = vec![0.0; k * m];
                    mm_tn(self.nodes[a].value.data(), g, n, k, m, &mut db);
                    add_into(pass, b, db);
                }
            }
            &Op::Transpose { a } => {
                if needs(a) {
                    let s = self.nodes[id].value.shape();
                    let (m, n) = (s[0], s[1]);
                    let mut da = vec![0.0; n * m];
                    for i in 0..m {
                        for j in 0..n {
                            da[j * m + i] = g[i * n + j];
                        }
                    }
                    add_into(pass, a, da);
                }
            }
            &Op::Add { a, b, broadcast_b } => {
                if needs(a) {
                    add_into(pass, a, g.to_vec());
                }
                if needs(b) {
                    if broadcast_b {
                        let stride = self.nodes[b].value.numel();
                        let mut db = vec![0.0; stride];
                        for (i, v) in g.iter().enumerate() {
                            db[i % stride] += v;
                        }
                        add_into(pass, b, db);
                    } else {
                        add_into(pass, b, g.to_vec());
                    }
                }
            }
            &Op::Sub { a, b } => {
                if needs(a) {
                    add_into(pass, a, g.to_vec());
                }
                if needs(b) {
                    add_into(pass, b, g.iter().map(|v| -v).collect());
                }
            }
            &Op::Mul { a, b } => {
                if needs(a) {
                    let db = self.nodes[b].value.data();
                    add_into(pass, a, g.iter().zip(db).map(|(v, y)| v * y).collect());
                }
                if needs(b) {
                    let da = self.nodes[a].value.data();
                    add_into(pass, b, g.iter().zip(da).map(|(v, x)| v * x).collect());
                }
            }
            &Op::Scale { a, c } => {
                if needs(a) {
                    add_into(pass, a, g.iter().map(|v| v * c).collect());
                }
            }
            &Op::Sum { a } => {
                if needs(a) {
                    add_into(pass, a, vec![g[0]; self.nodes[a].value.numel()]);
                }
            }
            &Op::Mean { a } => {
                if needs(a) {
                    let n = self.nodes[a].value.numel();
                    add_into(pass, a, vec![g[0] / n as f64; n]);
                }
            }
            &Op::Relu { a } => {
                if needs(a) {
                    let x = self.nodes[a].value.data();
                    add_into(
                        pass,
                        a,
                        g.iter()
                            .zip(x)
                            .map(|(v, &xi)| if xi > 0.0 { *v } else { 0.0 })
                            .collect(),
                    );
                }
            }
            &Op::Softmax { a, cols } => {
                if needs(a) {
                    let p = self.nodes[id].value.data();
                    let n = p.len() / cols;
                    let mut da = vec![0.0; p.len()];
                    for i in 0..n {
                        let row = i * cols;
                        let mut dot = 0.0;
                        for j in 0..cols {
                            dot += g[row + j] * p[row + j];
                        }
                        for j in 0..cols {
                            da[row + j] = p[row + j] * (g[row + j] - dot);
                        }
                    }
                    add_into(pass, a, da);
                }
            }
            &Op::LogSoftmax { a, cols } => {
                if needs(a) {
                    let out = self.nodes[id].value.data();
                    let n = out.len() / cols;
                    let mut da = vec![0.0; out.len()];
                    for i in 0..n {
                        let row = i * cols;
                        let gsum: f64 = g[row..row + cols].iter().sum();
                        for j in 0..cols {
                            da[row + j] = g[row + j] - out[row + j].exp() * gsum;
                        }
                    }
                    add_into(pass, a, da);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let (x, gamma, beta, train) = (*x, *gamma, *beta, *train);
                let h = inv_std.len();
                let n = xhat.len() / h;
                let gd = self.nodes[gamma].value.data();
                if needs(beta) {
                    let mut db = vec![0.0; h];
                    for i in 0..n {
                        for j in 0..h {
                            db[j] += g[i * h + j];
                        }
                    }
                    add_into(pass, beta, db);
                }
                if needs(gamma) {
                    let mut dg = vec![0.0; h];
                    for i in 0..n {
                        for j in 0..h {
                            dg[j] += g[i * h + j] * xhat[i * h + j];
                        }
                    }
                    add_into(pass, gamma, dg);
                }
                if needs(x) {
                    let mut dx = vec![0.0; n * h];
                    if train {
                        // Coupled formula: batch statistics depend on x.
                        for j in 0..h {
                            let mut sum_dxhat = 0.0;
                            let mut sum_dxhat_xhat = 0.0;
                            for i in 0..n {
                                let dxhat = g[i * h + j] * gd[j];
                                sum_dxhat += dxhat;
                                sum_dxhat_xhat += dxhat * xhat[i * h + j];
                            }
                            for i in 0..n {
                                let dxhat = g[i * h + j] * gd[j];
                                dx[i * h + j] = inv_std[j] / n as f64
                                    * (n as f64 * dxhat
                                        - sum_dxhat
                                        - xhat[i * h + j] * sum_dxhat_xhat);
                            }
                        }
                    } else {
                        for i in 0..n {
                            for j in 0..h {
                                dx[i * h + j] = g[i * h + j] * gd[j] * inv_std[j];
                            }
                        }
                    }
                    add_into(pass, x, dx);
                }
            }
            Op::NllFromLogProbs { logp, labels } => {
                let logp = *logp;
                if needs(logp) {
                    let c = self.nodes[logp].value.shape()[1];
                    let n = labels.len();
                    let mut d = vec![0.0; n * c];
                    for (i, &y) in labels.iter().enumerate() {
                        d[i * c + y] = -g[0] / n as f64;
                    }
                    add_into(pass, logp, d);
                }
            }
            &Op::NegCosineRows { s, t } => {
                let sd = self.nodes[s].value.data();
                let td = self.nodes[t].value.data();
                let c = self.nodes[s].value.shape()[1];
                let n = sd.len() / c;
                let scale = -g[0] / n as f64;
                for (side, other, node) in [(sd, td, s), (td, sd, t)] {
                    if !needs(node) {
                        continue;
                    }
                    let mut d = vec![0.0; side.len()];
                    for i in 0..n {
                        let a = &side[i * c..(i + 1) * c];
                        let b = &other[i * c..(i + 1) * c];
                        let (dot, na, nb) = row_dot_norms(a, b);
                        let den = (na * nb).max(COSINE_EPS);
                        let cos = dot / den;
                        let clamped = na * nb < COSINE_EPS;
                        // d cos/d a = b/den - cos * a/|a|^2 (den unclamped);
                        // with a clamped denominator the norm term vanishes.
                        let self_coeff = if clamped || na == 0.0 {
                            0.0
                        } else {
                            cos / (na * na)
                        };
                        for j in 0..c {
                            d[i * c + j] = scale * (b[j] / den - self_coeff * a[j]);
                        }
                    }
                    add_into(pass, node, d);
                }
            }
            &Op::FrobeniusDiff { a, b } => {
                let v = self.nodes[id].value.data()[0];
                if v > 0.0 {
                    let da = self.nodes[a].value.data();
                    let db = self.nodes[b].value.data();
                    if needs(a) {
                        add_into(
                            pass,
                            a,
                            da.iter()
                                .zip(db)
                                .map(|(x, y)| g[0] * (x - y) / v)
                                .collect(),
                        );
                    }
                    if needs(b) {
                        add_into(
                            pass,
                            b,
                            da.iter()
                                .zip(db)
                                .map(|(x, y)| -g[0] * (x - y) / v)
                                .collect(),
                        );
                    }
                }
            }
        }
    }
}

const COSINE_EPS: f64 = 1e-12;

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Detach => "detach",
        Op::Matmul { .. } => "matmul",
        Op::Transpose { .. } => "transpose",
        Op::Add { .. } => "add",
        Op::Sub { .. } => "sub",
        Op::Mul { .. } => "mul",
        Op::Scale { .. } => "scale",
        Op::Sum { .. } => "sum",
        Op::Mean { .. } => "mean",
        Op::Relu { .. } => "relu",
        Op::Softmax { .. } => "softmax",
        Op::LogSoftmax { .. } => "log_softmax",
        Op::BatchNorm { .. } => "batchnorm1d",
        Op::NllFromLogProbs { .. } => "nll_from_log_probs",
        Op::NegCosineRows { .. } => "neg_cosine_rows",
        Op::FrobeniusDiff { .. } => "frobenius_diff",
    }
}

fn row_dot_norms(a: &[f64], b: &[f64]) -> (f64, f64, f64) {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    (dot, na.sqrt(), nb.sqrt())
}

pub(crate) fn softmax_rows(src: &[f64], n: usize, c: usize, out: &mut [f64]) {
    for i in 0..n {
        let row = &src[i * c..(i + 1) * c];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for j in 0..c {
            let e = (row[j] - max).exp();
            out[i * c + j] = e;
            denom += e;
        }
        for j in 0..c {
            out[i * c + j] /= denom;
        }
    }
}

pub(crate) fn logsumexp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

// a [n,k] * b [k,m] -> out [n,m]
fn mm_nn(a: &[f64], b: &[f64], n: usize, k: usize, m: usize, out: &mut [f64]) {
    for i in 0..n {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            let orow = &mut out[i * m..(i + 1) * m];
            for j in 0..m {
                orow[j] += av * brow[j];
            }
        }
    }
}

// a [n,m] * b^T [m,k] -> out [n,k]   (b stored [k,m])
fn mm_nt(a: &[f64], b: &[f64], n: usize, m: usize, k: usize, out: &mut [f64]) {
    for i in 0..n {
        let arow = &a[i * m..(i + 1) * m];
        for j in 0..k {
            let brow = &b[j * m..(j + 1) * m];
            let mut acc = 0.0;
            for p in 0..m {
                acc += arow[p] * brow[p];
            }
            out[i * k + j] = acc;
        }
    }
}

// a^T [k,n] * b [n,m] -> out [k,m]   (a stored [n,k])
fn mm_tn(a: &[f64], b: &[f64], n: usize, k: usize, m: usize, out: &mut [f64]) {
    for p in 0..n {
        let brow = &b[p * m..(p + 1) * m];
        for i in 0..k {
            let av = a[p * k + i];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * m..(i + 1) * m];
            for j in 0..m {
                orow[j] += av * brow[j];
            }
        }
    }
}

/// Compares the autodiff gradient of a scalar-valued tensor function against
/// central finite differences and returns the max relative error, with the
/// denominator clamped at 1e-8.
///
/// `build` must be pure: it is re-invoked for every perturbed evaluation and
/// must construct any auxiliary state (for example batchnorm running stats)
/// fresh on each call. Coordinates whose perturbation lands within 1e-3 of a
/// relu kink, or crosses one, are skipped; the returned count tells how many
/// coordinates were actually compared.
pub fn finite_diff_check<F>(build: F, point: &Tensor, h: f64) -> Result<FiniteDiffReport>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    let eval = |t: &Tensor| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut g = Graph::new();
        let x = g.leaf(t);
        let out = build(&mut g, x)?;
        Ok((g.value(out).item()?, g.relu_input_snapshots()))
    };

    let mut base = point.clone();
    base.set_requires_grad(true);
    let mut g = Graph::new();
    let x = g.leaf(&base);
    let out = build(&mut g, x)?;
    if g.value(out).numel() != 1 {
        return Err(Error::Rank {
            op: "finite_diff_check",
            expected: "scalar-valued function",
            got: g.value(out).shape().to_vec(),
        });
    }
    g.backward(out)?;
    let analytic = g.grad(x).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; point.numel()]);
    let base_relu = g.relu_input_snapshots();

    let mut max_rel = 0.0_f64;
    let mut checked = 0usize;
    for i in 0..point.numel() {
        let mut plus = point.clone();
        plus.data_mut()[i] += h;
        let mut minus = point.clone();
        minus.data_mut()[i] -= h;
        let (fp, relu_p) = eval(&plus)?;
        let (fm, relu_m) = eval(&minus)?;
        if near_relu_kink(&base_relu, &relu_p, &relu_m) {
            continue;
        }
        let numeric = (fp - fm) / (2.0 * h);
        let rel = (numeric - analytic[i]).abs() / analytic[i].abs().max(1e-8);
        max_rel = max_rel.max(rel);
        checked += 1;
    }
    Ok(FiniteDiffReport {
        max_rel_error: max_rel,
        checked_coords: checked,
        total_coords: point.numel(),
    })
}

/// Outcome of [`finite_diff_check`].
#[derive(Clone, Copy, Debug)]
pub struct FiniteDiffReport {
    pub max_rel_error: f64,
    pub checked_coords: usize,
    pub total_coords: usize,
}

/// A coordinate sits near a kink when a relu input element that reacts to the
/// perturbation is within 1e-3 of zero at any evaluation or changes sign
/// between them.
fn near_relu_kink(base: &[Vec<f64>], plus: &[Vec<f64>], minus: &[Vec<f64>]) -> bool {
    const KINK_ZONE: f64 = 1e-3;
    for ((b, p), m) in base.iter().zip(plus).zip(minus) {
        for ((&vb, &vp), &vm) in b.iter().zip(p).zip(m) {
            let depends = vp != vm || vp != vb;
            if !depends {
                continue;
            }
            if vb.abs() <= KINK_ZONE || vp.abs() <= KINK_ZONE || vm.abs() <= KINK_ZONE {
                return true;
            }
            if vp.signum() != vm.signum() {
                return true;
            }
        }
    }
    false
}
