//! Reverse-mode differentiation over a recorded trace of primitive ops.
//!
//! A [`Trace`] owns every value produced during a forward pass. Nodes are
//! appended in evaluation order, so index order is a topological order and
//! [`Trace::backward`] simply walks the node list in reverse.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeometry};
use crate::tensor::{sign, Tensor};

/// Lower clamp applied to probabilities before taking logs in the KL term.
pub const PROB_FLOOR: f32 = 1e-12;

/// Tolerance on probability row sums accepted by [`Trace::kl_divergence`].
pub const ROW_SUM_TOLERANCE: f32 = 1e-5;

static NEXT_TRACE_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId {
    trace: u64,
    index: usize,
}

impl NodeId {
    pub fn index(self) -> usize {
        self.index
    }
}

/// How a per-example loss is reduced over the batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

impl Reduction {
    fn factor(self, batch: usize) -> f32 {
        match self {
            Reduction::Mean => 1.0 / batch as f32,
            Reduction::Sum => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    MatMul,
    AddBias,
    Add,
    Scale,
    Conv2d,
    Relu,
    Flatten,
    Softmax,
    CrossEntropy,
    KlDivergence,
    L1Distance,
    CwMargin,
}

impl OpKind {
    pub const ALL: [OpKind; 12] = [
        OpKind::MatMul,
        OpKind::AddBias,
        OpKind::Add,
        OpKind::Scale,
        OpKind::Conv2d,
        OpKind::Relu,
        OpKind::Flatten,
        OpKind::Softmax,
        OpKind::CrossEntropy,
        OpKind::KlDivergence,
        OpKind::L1Distance,
        OpKind::CwMargin,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::AddBias => "add_bias",
            OpKind::Add => "add",
            OpKind::Scale => "scale",
            OpKind::Conv2d => "conv2d",
            OpKind::Relu => "relu",
            OpKind::Flatten => "flatten",
            OpKind::Softmax => "softmax",
            OpKind::CrossEntropy => "softmax_cross_entropy",
            OpKind::KlDivergence => "kl_divergence",
            OpKind::L1Distance => "l1_feature_distance",
            OpKind::CwMargin => "cw_margin",
        }
    }

    pub fn parse(name: &str) -> Option<OpKind> {
        OpKind::ALL.into_iter().find(|k| k.name() == name)
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Scale(NodeId, f32),
    Conv2d {
        input: NodeId,
        weight: NodeId,
        padding: usize,
    },
    Relu(NodeId),
    Flatten(NodeId),
    Softmax(NodeId),
    CrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        reduction: Reduction,
    },
    Kl {
        p: NodeId,
        q: NodeId,
        reduction: Reduction,
    },
    L1 {
        a: NodeId,
        b: NodeId,
        reduction: Reduction,
    },
    CwMargin {
        logits: NodeId,
        labels: Vec<usize>,
        reduction: Reduction,
    },
}

impl Op {
    fn kind(&self) -> Option<OpKind> {
        Some(match self {
            Op::Leaf => return None,
            Op::MatMul(..) => OpKind::MatMul,
            Op::AddBias(..) => OpKind::AddBias,
            Op::Add(..) => OpKind::Add,
            Op::Scale(..) => OpKind::Scale,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Relu(..) => OpKind::Relu,
            Op::Flatten(..) => OpKind::Flatten,
            Op::Softmax(..) => OpKind::Softmax,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::Kl { .. } => OpKind::KlDivergence,
            Op::L1 { .. } => OpKind::L1Distance,
            Op::CwMargin { .. } => OpKind::CwMargin,
        })
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::AddBias(a, b) | Op::Add(a, b) => vec![*a, *b],
            Op::Scale(a, _) | Op::Relu(a) | Op::Flatten(a) | Op::Softmax(a) => vec![*a],
            Op::Conv2d { input, weight, .. } => vec![*input, *weight],
            Op::CrossEntropy { logits, .. } | Op::CwMargin { logits, .. } => vec![*logits],
            Op::Kl { p, q, .. } => vec![*p, *q],
            Op::L1 { a, b, .. } => vec![*a, *b],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Ordered record of the primitive operations of one forward pass.
#[derive(Debug)]
pub struct Trace {
    id: u64,
    nodes: Vec<Node>,
    fault: Option<OpKind>,
}

impl Default for Trace {
    fn default() -> Self {
        Self::new()
    }
}

impl Trace {
    pub fn new() -> Self {
        Self {
            id: NEXT_TRACE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            fault: None,
        }
    }

    /// A trace whose backward rule for `kind` is deliberately wrong.
    /// Exists so the gradient checker can demonstrate that it notices.
    #[doc(hidden)]
    pub fn with_fault(kind: OpKind) -> Self {
        let mut t = Self::new();
        t.fault = Some(kind);
        t
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, id: NodeId) -> Result<&Node> {
        if id.trace != self.id {
            return Err(Error::UnknownNode(id.index));
        }
        self.nodes.get(id.index).ok_or(Error::UnknownNode(id.index))
    }

    fn val(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.index].value
    }

    pub fn value(&self, id: NodeId) -> Result<&Tensor> {
        Ok(&self.node(id)?.value)
    }

    /// A differentiable leaf (parameter or marked input).
    pub fn leaf(&mut self, value: Tensor) -> Result<NodeId> {
        value.check_finite("leaf")?;
        Ok(self.push_raw(Op::Leaf, value, true))
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<NodeId> {
        value.check_finite("constant")?;
        Ok(self.push_raw(Op::Leaf, value, false))
    }

    /// Copies the current value of `id` into a gradient-free leaf.
    pub fn detach(&mut self, id: NodeId) -> Result<NodeId> {
        let value = self.node(id)?.value.clone();
        Ok(self.push_raw(Op::Leaf, value, false))
    }

    fn push_raw(&mut self, op: Op, value: Tensor, needs_grad: bool) -> NodeId {
        let index = self.nodes.len();
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        NodeId {
            trace: self.id,
            index,
        }
    }

    fn push(&mut self, op: Op) -> Result<NodeId> {
        for input in op.inputs() {
            self.node(input)?;
        }
        let value = eval(&op, |id| self.val(id))?;
        let kind = op.kind().expect("non-leaf");
        value.check_finite(kind.name())?;
        let needs_grad = op.inputs().iter().any(|i| self.nodes[i.index].needs_grad);
        Ok(self.push_raw(op, value, needs_grad))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::MatMul(a, b))
    }

    /// Adds a bias of length `shape[1]` broadcast over every other axis.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        self.push(Op::AddBias(x, bias))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Add(a, b))
    }

    pub fn scale(&mut self, x: NodeId, factor: f32) -> Result<NodeId> {
        self.push(Op::Scale(x, factor))
    }

    /// `a + factor·b`, the shape of every composite loss here.
    pub fn add_scaled(&mut self, a: NodeId, b: NodeId, factor: f32) -> Result<NodeId> {
        let scaled = self.scale(b, factor)?;
        self.add(a, scaled)
    }

    /// Stride-1 convolution with `padding` zeros on every border.
    pub fn conv2d(&mut self, input: NodeId, weight: NodeId, padding: usize) -> Result<NodeId> {
        self.push(Op::Conv2d {
            input,
            weight,
            padding,
        })
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Relu(x))
    }

    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Flatten(x))
    }

    pub fn softmax(&mut self, logits: NodeId) -> Result<NodeId> {
        self.push(Op::Softmax(logits))
    }

    pub fn softmax_cross_entropy(
        &mut self,
        logits: NodeId,
        labels: &[usize],
        reduction: Reduction,
    ) -> Result<NodeId> {
        self.push(Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            reduction,
        })
    }

    /// `KL(p ‖ q)` between probability rows, logs taken on `[1e-12, 1]`-clamped entries.
    pub fn kl_divergence(&mut self, p: NodeId, q: NodeId, reduction: Reduction) -> Result<NodeId> {
        self.push(Op::Kl { p, q, reduction })
    }

    /// Mean absolute difference per example, reduced over the batch.
    pub fn l1_distance(&mut self, a: NodeId, b: NodeId, reduction: Reduction) -> Result<NodeId> {
        self.push(Op::L1 { a, b, reduction })
    }

    /// `max_{i≠y} z_i − z_y` per example.
    pub fn cw_margin(
        &mut self,
        logits: NodeId,
        labels: &[usize],
        reduction: Reduction,
    ) -> Result<NodeId> {
        self.push(Op::CwMargin {
            logits,
            labels: labels.to_vec(),
            reduction,
        })
    }

    /// Replaces the value of a leaf and recomputes every downstream node.
    pub fn set_leaf(&mut self, id: NodeId, value: Tensor) -> Result<()> {
        let node = self.node(id)?;
        if !matches!(node.op, Op::Leaf) {
            return Err(Error::shape("set_leaf", "node is not a leaf"));
        }
        node.value.expect_same_shape("set_leaf", &value)?;
        value.check_finite("set_leaf")?;
        self.nodes[id.index].value = value;
        for i in id.index + 1..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let v = eval(&self.nodes[i].op, |n| &self.nodes[n.index].value)?;
            self.nodes[i].value = v;
        }
        Ok(())
    }

    /// Recomputes every non-leaf node from the recorded inputs.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match node.op {
                Op::Leaf => node.value.clone(),
                ref op => eval(op, |n| &values[n.index])?,
            };
            values.push(v);
        }
        Ok(values)
    }

    pub fn values(&self) -> impl Iterator<Item = &Tensor> {
        self.nodes.iter().map(|n| &n.value)
    }

    /// Discrete state of every non-smooth point in the trace: relu input
    /// signs, L1 difference signs, the strongest CW rival per row and which
    /// KL entries sit on the probability floor. A finite-difference probe
    /// that changes this signature straddled a kink.
    pub fn kink_signature(&self) -> Vec<i64> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => sig.extend(self.val(*x).data().iter().map(|&v| i64::from(v > 0.0))),
                Op::L1 { a, b, .. } => sig.extend(
                    self.val(*a)
                        .data()
                        .iter()
                        .zip(self.val(*b).data())
                        .map(|(&x, &y)| sign(x - y) as i64),
                ),
                Op::CwMargin { logits, labels, .. } => {
                    let z = self.val(*logits);
                    sig.extend(
                        labels
                            .iter()
                            .enumerate()
                            .map(|(r, &y)| strongest_rival(z.row(r), y) as i64),
                    );
                }
                Op::Kl { p, q, .. } => {
                    for t in [self.val(*p), self.val(*q)] {
                        sig.extend(t.data().iter().map(|&v| i64::from(v >= PROB_FLOOR)));
                    }
                }
                _ => {}
            }
        }
        sig
    }

    /// Kinds of every recorded op, in order.
    pub fn op_kinds(&self) -> Vec<OpKind> {
        self.nodes.iter().filter_map(|n| n.op.kind()).collect()
    }

    /// Gradients of the scalar `root` with respect to every node.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        let root_node = self.node(root)?;
        if root_node.value.len() != 1 {
            return Err(Error::NonScalarRoot(root_node.value.shape().to_vec()));
        }
        self.backward_with(root, Tensor::filled(root_node.value.shape(), 1.0))
    }

    /// Vector-Jacobian product: gradients of `Σ seed ⊙ value(node)`.
    pub fn backward_with(&self, root: NodeId, seed: Tensor) -> Result<Gradients> {
        let root_node = self.node(root)?;
        root_node.value.expect_same_shape("backward", &seed)?;
        crate::counters::record_backward();
        let mut grads: Vec<Option<Tensor>> = vec![None; root.index + 1];
        grads[root.index] = Some(seed);

        for i in (0..=root.index).rev() {
            let Some(upstream) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[i] = Some(upstream);
                continue;
            }
            let mut contributions = self.vjp(node, &upstream);
            if let (Some(fault), Some(kind)) = (self.fault, node.op.kind()) {
                if fault == kind {
                    for (_, g) in contributions.iter_mut() {
                        *g = g.map(|v| v * 1.05 + 1e-3);
                    }
                }
            }
            for (input, g) in contributions {
                if !self.nodes[input.index].needs_grad {
                    continue;
                }
                accumulate(&mut grads[input.index], g);
            }
            // Interior nodes keep their gradient for inspection.
            grads[i] = Some(upstream);
        }
        Ok(Gradients {
            trace: self.id,
            grads,
        })
    }

    /// Vector-Jacobian products of one node with respect to its inputs.
    fn vjp(&self, node: &Node, dy: &Tensor) -> Vec<(NodeId, Tensor)> {
        let out = &node.value;
        match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                let da = kernels::matmul_b_transposed(dy.data(), bv.data(), m, n, k);
                let mut db = vec![0.0; k * n];
                kernels::matmul_a_transposed_acc(&mut db, av.data(), dy.data(), m, k, n);
                vec![(*a, tensor_like(av, da)), (*b, tensor_like(bv, db))]
            }
            Op::AddBias(x, b) => {
                let xv = self.val(*x);
                let channels = xv.shape()[1];
                let inner: usize = xv.shape()[2..].iter().product();
                let mut db = vec![0.0f32; channels];
                for (idx, &g) in dy.data().iter().enumerate() {
                    db[(idx / inner) % channels] += g;
                }
                vec![(*x, dy.clone()), (*b, tensor_like(self.val(*b), db))]
            }
            Op::Add(a, b) => vec![(*a, dy.clone()), (*b, dy.clone())],
            Op::Scale(x, f) => vec![(*x, dy.map(|g| g * f))],
            Op::Conv2d {
                input,
                weight,
                padding,
            } => {
                let (iv, wv) = (self.val(*input), self.val(*weight));
                let geom = conv_geometry(iv, wv, *padding);
                let (batch, out_ch) = (iv.shape()[0], wv.shape()[0]);
                let (rows, cols) = (geom.col_rows(), geom.col_cols());
                let img_len = iv.row_len();
                let mut dx = vec![0.0f32; iv.len()];
                let mut dw = vec![0.0f32; wv.len()];
                for b in 0..batch {
                    let dy_img = &dy.data()[b * out_ch * cols..(b + 1) * out_ch * cols];
                    let col = geom.im2col(iv.row(b));
                    // dW[out×rows] += dY[out×cols] · colᵀ
                    let dw_img = kernels::matmul_b_transposed(dy_img, &col, out_ch, cols, rows);
                    for (d, v) in dw.iter_mut().zip(dw_img) {
                        *d += v;
                    }
                    // dcol[rows×cols] = Wᵀ · dY
                    let mut dcol = vec![0.0f32; rows * cols];
                    kernels::matmul_a_transposed_acc(
                        &mut dcol,
                        wv.data(),
                        dy_img,
                        out_ch,
                        rows,
                        cols,
                    );
                    geom.col2im_acc(&dcol, &mut dx[b * img_len..(b + 1) * img_len]);
                }
                vec![
                    (*input, tensor_like(iv, dx)),
                    (*weight, tensor_like(wv, dw)),
                ]
            }
            Op::Relu(x) => {
                let xv = self.val(*x);
                let dx = xv
                    .data()
                    .iter()
                    .zip(dy.data())
                    .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                    .collect();
                vec![(*x, tensor_like(xv, dx))]
            }
            Op::Flatten(x) => {
                let xv = self.val(*x);
                vec![(*x, tensor_like(xv, dy.data().to_vec()))]
            }
            Op::Softmax(z) => {
                let c = out.shape()[1];
                let mut dz = vec![0.0f32; out.len()];
                for r in 0..out.batch() {
                    let s = out.row(r);
                    let g = &dy.data()[r * c..(r + 1) * c];
                    let dot: f32 = s.iter().zip(g).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dz[r * c + j] = s[j] * (g[j] - dot);
                    }
                }
                vec![(*z, tensor_like(self.val(*z), dz))]
            }
            Op::CrossEntropy {
                logits,
                labels,
                reduction,
            } => {
                let zv = self.val(*logits);
                let c = zv.shape()[1];
                let scale = reduction.factor(zv.batch()) * dy.item();
                let mut dz = vec![0.0f32; zv.len()];
                for (r, &label) in labels.iter().enumerate() {
                    let row = &mut dz[r * c..(r + 1) * c];
                    kernels::softmax_row(zv.row(r), row);
                    row[label] -= 1.0;
                    for v in row.iter_mut() {
                        *v *= scale;
                    }
                }
                vec![(*logits, tensor_like(zv, dz))]
            }
            Op::Kl { p, q, reduction } => {
                let (pv, qv) = (self.val(*p), self.val(*q));
                let scale = reduction.factor(pv.batch()) * dy.item();
                let dp = pv
                    .data()
                    .iter()
                    .zip(qv.data())
                    .map(|(&pc, &qc)| {
                        let live = if pc >= PROB_FLOOR { 1.0 } else { 0.0 };
                        scale * (clamp_prob(pc).ln() + live - clamp_prob(qc).ln())
                    })
                    .collect();
                let dq = pv
                    .data()
                    .iter()
                    .zip(qv.data())
                    .map(|(&pc, &qc)| {
                        if qc >= PROB_FLOOR {
                            -scale * pc / clamp_prob(qc)
                        } else {
                            0.0
                        }
                    })
                    .collect();
                vec![(*p, tensor_like(pv, dp)), (*q, tensor_like(qv, dq))]
            }
            Op::L1 { a, b, reduction } => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let scale = reduction.factor(av.batch()) / av.row_len() as f32 * dy.item();
                let da: Vec<f32> = av
                    .data()
                    .iter()
                    .zip(bv.data())
                    .map(|(&x, &y)| scale * sign(x - y))
                    .collect();
                let db = da.iter().map(|v| -v).collect();
                vec![(*a, tensor_like(av, da)), (*b, tensor_like(bv, db))]
            }
            Op::CwMargin {
                logits,
                labels,
                reduction,
            } => {
                let zv = self.val(*logits);
                let c = zv.shape()[1];
                let scale = reduction.factor(zv.batch()) * dy.item();
                let mut dz = vec![0.0f32; zv.len()];
                for (r, &label) in labels.iter().enumerate() {
                    let rival = strongest_rival(zv.row(r), label);
                    dz[r * c + rival] += scale;
                    dz[r * c + label] -= scale;
                }
                vec![(*logits, tensor_like(zv, dz))]
            }
        }
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(existing) => {
            for (e, v) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += v;
            }
        }
        None => *slot = Some(g),
    }
}

fn tensor_like(like: &Tensor, data: Vec<f32>) -> Tensor {
    Tensor::new(like.shape().to_vec(), data).expect("gradient shaped like its input")
}

fn clamp_prob(v: f32) -> f32 {
    v.clamp(PROB_FLOOR, 1.0)
}

/// Index of the largest logit other than `label`; first index wins ties.
pub(crate) fn strongest_rival(row: &[f32], label: usize) -> usize {
    let mut best: Option<usize> = None;
    for (j, &v) in row.iter().enumerate() {
        if j == label {
            continue;
        }
        if best.is_none_or(|b| v > row[b]) {
            best = Some(j);
        }
    }
    best.expect("at least two classes")
}

fn conv_geometry(input: &Tensor, weight: &Tensor, padding: usize) -> ConvGeometry {
    ConvGeometry {
        in_channels: input.shape()[1],
        height: input.shape()[2],
        width: input.shape()[3],
        kernel: weight.shape()[2],
        padding,
    }
}

fn check_labels(op: &'static str, logits: &Tensor, labels: &[usize]) -> Result<()> {
    if logits.rank() != 2 {
        return Err(Error::shape(
            op,
            format!("logits must be B×C, got {:?}", logits.shape()),
        ));
    }
    let (batch, classes) = (logits.shape()[0], logits.shape()[1]);
    if classes < 2 {
        return Err(Error::shape(
            op,
            format!("need at least 2 classes, got {classes}"),
        ));
    }
    if labels.len() != batch {
        return Err(Error::shape(
            op,
            format!("{} labels for batch of {batch}", labels.len()),
        ));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    Ok(())
}

pub(crate) fn check_probabilities(what: &'static str, p: &Tensor) -> Result<()> {
    if p.rank() != 2 {
        return Err(Error::shape(
            what,
            format!("expected B×C, got {:?}", p.shape()),
        ));
    }
    for r in 0..p.batch() {
        let row = p.row(r);
        let sum: f32 = row.iter().sum();
        if (sum - 1.0).abs() > ROW_SUM_TOLERANCE || row.iter().any(|&v| v < 0.0) {
            return Err(Error::NotAProbability { what, row: r, sum });
        }
    }
    Ok(())
}

fn reduce(per_example: impl Iterator<Item = f32>, batch: usize, reduction: Reduction) -> Tensor {
    let total: f32 = per_example.sum();
    Tensor::scalar(total * reduction.factor(batch))
}

/// Forward rule of every primitive.
fn eval<'a>(op: &Op, val: impl Fn(NodeId) -> &'a Tensor) -> Result<Tensor> {
    match op {
        Op::Leaf => unreachable!("leaves carry their own value"),
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            if av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[0] {
                return Err(Error::shape(
                    "matmul",
                    format!("{:?} × {:?}", av.shape(), bv.shape()),
                ));
            }
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            Tensor::new(vec![m, n], kernels::matmul(av.data(), bv.data(), m, k, n))
        }
        Op::AddBias(x, b) => {
            let (xv, bv) = (val(*x), val(*b));
            if xv.rank() < 2 || bv.rank() != 1 || bv.len() != xv.shape()[1] {
                return Err(Error::shape(
                    "add_bias",
                    format!("bias {:?} against input {:?}", bv.shape(), xv.shape()),
                ));
            }
            let channels = xv.shape()[1];
            let inner: usize = xv.shape()[2..].iter().product();
            let data = xv
                .data()
                .iter()
                .enumerate()
                .map(|(idx, &v)| v + bv.data()[(idx / inner) % channels])
                .collect();
            Tensor::new(xv.shape().to_vec(), data)
        }
        Op::Add(a, b) => val(*a).zip_map(val(*b), |x, y| x + y),
        Op::Scale(x, f) => Ok(val(*x).map(|v| v * f)),
        Op::Conv2d {
            input,
            weight,
            padding,
        } => {
            let (iv, wv) = (val(*input), val(*weight));
            if iv.rank() != 4
                || wv.rank() != 4
                || iv.shape()[1] != wv.shape()[1]
                || wv.shape()[2] != wv.shape()[3]
                || iv.shape()[2] + 2 * padding < wv.shape()[2]
                || iv.shape()[3] + 2 * padding < wv.shape()[3]
            {
                return Err(Error::shape(
                    "conv2d",
                    format!(
                        "input {:?}, kernel {:?}, padding {padding}",
                        iv.shape(),
                        wv.shape()
                    ),
                ));
            }
            let geom = conv_geometry(iv, wv, *padding);
            let (batch, out_ch) = (iv.shape()[0], wv.shape()[0]);
            let (rows, cols) = (geom.col_rows(), geom.col_cols());
            let mut data = Vec::with_capacity(batch * out_ch * cols);
            for b in 0..batch {
                let col = geom.im2col(iv.row(b));
                data.extend(kernels::matmul(wv.data(), &col, out_ch, rows, cols));
            }
            Tensor::new(
                vec![batch, out_ch, geom.out_height(), geom.out_width()],
                data,
            )
        }
        Op::Relu(x) => Ok(val(*x).map(|v| if v > 0.0 { v } else { 0.0 })),
        Op::Flatten(x) => {
            let xv = val(*x);
            if xv.rank() < 2 {
                return Err(Error::shape("flatten", format!("rank {} input", xv.rank())));
            }
            xv.reshape(vec![xv.batch(), xv.row_len()])
        }
        Op::Softmax(z) => {
            let zv = val(*z);
            if zv.rank() != 2 {
                return Err(Error::shape(
                    "softmax",
                    format!("expected B×C, got {:?}", zv.shape()),
                ));
            }
            let c = zv.shape()[1];
            let mut data = vec![0.0f32; zv.len()];
            for r in 0..zv.batch() {
                kernels::softmax_row(zv.row(r), &mut data[r * c..(r + 1) * c]);
            }
            Tensor::new(zv.shape().to_vec(), data)
        }
        Op::CrossEntropy {
            logits,
            labels,
            reduction,
        } => {
            let zv = val(*logits);
            check_labels("softmax_cross_entropy", zv, labels)?;
            let per = labels
                .iter()
                .enumerate()
                .map(|(r, &y)| kernels::cross_entropy_row(zv.row(r), y));
            Ok(reduce(per, zv.batch(), *reduction))
        }
        Op::Kl { p, q, reduction } => {
            let (pv, qv) = (val(*p), val(*q));
            pv.expect_same_shape("kl_divergence", qv)?;
            check_probabilities("kl_divergence p", pv)?;
            check_probabilities("kl_divergence q", qv)?;
            let c = pv.shape()[1];
            let per = (0..pv.batch()).map(|r| {
                let (pr, qr) = (pv.row(r), qv.row(r));
                (0..c)
                    .map(|j| pr[j] * (clamp_prob(pr[j]).ln() - clamp_prob(qr[j]).ln()))
                    .sum::<f32>()
            });
            Ok(reduce(per, pv.batch(), *reduction))
        }
        Op::L1 { a, b, reduction } => {
            let (av, bv) = (val(*a), val(*b));
            av.expect_same_shape("l1_feature_distance", bv)?;
            let d = av.row_len() as f32;
            let per = (0..av.batch()).map(|r| {
                av.row(r)
                    .iter()
                    .zip(bv.row(r))
                    .map(|(x, y)| (x - y).abs())
                    .sum::<f32>()
                    / d
            });
            Ok(reduce(per, av.batch(), *reduction))
        }
        Op::CwMargin {
            logits,
            labels,
            reduction,
        } => {
            let zv = val(*logits);
            check_labels("cw_margin", zv, labels)?;
            let per = labels.iter().enumerate().map(|(r, &y)| {
                let row = zv.row(r);
                row[strongest_rival(row, y)] - row[y]
            });
            Ok(reduce(per, zv.batch(), *reduction))
        }
    }
}

/// Gradients produced by one backward pass.
#[derive(Debug)]
pub struct Gradients {
    trace: u64,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `node`; `None` when `node` was not reachable from the root.
    pub fn get(&self, node: NodeId) -> Option<&Tensor> {
        if node.trace != self.trace {
            return None;
        }
        self.grads.get(node.index).and_then(Option::as_ref)
    }

    /// Gradient for a leaf, zeros when unreachable.
    pub fn wrt(&self, trace: &Trace, node: NodeId) -> Result<Tensor> {
        let value = trace.value(node)?;
        Ok(self
            .get(node)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(value.shape())))
    }
}
