//! Dynamically built computation graph with reverse-mode differentiation.
//!
//! Nodes are evaluated eagerly as they are appended, so node ids are a
//! topological order. `backward` walks ids in reverse and accumulates
//! input gradients in consumer-id order.

use std::collections::BTreeMap;
use std::fmt;

use super::kernels::{self, ConvGeom, PoolGeom};
use crate::error::{Error, Result};
use crate::tensor::{Array, Float};

pub type NodeId = usize;

/// The operation kinds a [`Graph`] node can hold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Input,
    Parameter,
    Linear,
    Conv2d,
    SkipConv2d,
    Embedding,
    SkipEmbedding,
    Relu,
    MaxPool2d,
    AvgPool2d,
    Flatten,
    Add,
    MeanSeq,
    SoftmaxXent,
    Detach,
}

impl OpKind {
    pub const ALL: [OpKind; 15] = [
        OpKind::Input,
        OpKind::Parameter,
        OpKind::Linear,
        OpKind::Conv2d,
        OpKind::SkipConv2d,
        OpKind::Embedding,
        OpKind::SkipEmbedding,
        OpKind::Relu,
        OpKind::MaxPool2d,
        OpKind::AvgPool2d,
        OpKind::Flatten,
        OpKind::Add,
        OpKind::MeanSeq,
        OpKind::SoftmaxXent,
        OpKind::Detach,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Input => "input",
            OpKind::Parameter => "parameter",
            OpKind::Linear => "linear",
            OpKind::Conv2d => "conv2d",
            OpKind::SkipConv2d => "skip_conv2d",
            OpKind::Embedding => "embedding",
            OpKind::SkipEmbedding => "skip_embedding",
            OpKind::Relu => "relu",
            OpKind::MaxPool2d => "maxpool2d",
            OpKind::AvgPool2d => "avgpool2d",
            OpKind::Flatten => "flatten",
            OpKind::Add => "add",
            OpKind::MeanSeq => "mean_seq",
            OpKind::SoftmaxXent => "softmax_xent",
            OpKind::Detach => "detach",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Whether kernels may split independent output chunks across threads.
/// Both modes produce bit-identical values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExecMode {
    #[default]
    Sequential,
    Parallel,
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Parameter,
    Linear,
    Conv2d {
        geom: ConvGeom,
    },
    SkipConv2d {
        geom: ConvGeom,
        keep_rows: Vec<usize>,
        keep_cols: Vec<usize>,
        full: (usize, usize),
        gathered: Vec<usize>,
    },
    Embedding {
        ids: Vec<usize>,
    },
    SkipEmbedding {
        ids: Vec<usize>,
    },
    Relu,
    MaxPool2d {
        argmax: Vec<usize>,
    },
    AvgPool2d {
        geom: PoolGeom,
    },
    Flatten,
    Add,
    MeanSeq,
    SoftmaxXent {
        labels: Vec<usize>,
        probs: Vec<usize>,
    },
    Detach,
}

#[derive(Debug, Clone)]
enum Value<F> {
    Float(Array<F>),
    Index { shape: Vec<usize>, ids: Vec<usize> },
}

#[derive(Debug, Clone)]
struct Node<F> {
    kind: OpKind,
    op: Op,
    inputs: Vec<NodeId>,
    value: Value<F>,
    requires_grad: bool,
}

/// Gradients keyed by node id, for every parameter node and every input
/// node that requires a gradient. Parameters not reachable from the loss
/// (or reachable only through detach) hold all-zero gradients.
#[derive(Debug, Clone)]
pub struct GradStore<F> {
    grads: BTreeMap<NodeId, Array<F>>,
}

impl<F: Float> GradStore<F> {
    pub fn get(&self, id: NodeId) -> Option<&Array<F>> {
        self.grads.get(&id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&NodeId, &Array<F>)> {
        self.grads.iter()
    }

    pub fn into_map(self) -> BTreeMap<NodeId, Array<F>> {
        self.grads
    }
}

#[derive(Debug, Clone, Default)]
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
    // float buffers saved for backward, indexed by Op::SoftmaxXent::probs etc.
    saved: Vec<Vec<F>>,
    mode: ExecMode,
}

fn check_sorted_unique(set: &[usize], bound: usize, what: &str) -> Result<()> {
    if set.is_empty() {
        return Err(Error::arg(format!("{what} must be non-empty")));
    }
    for w in set.windows(2) {
        if w[0] >= w[1] {
            return Err(Error::arg(format!("{what} must be strictly increasing")));
        }
    }
    if let Some(&bad) = set.iter().find(|&&i| i >= bound) {
        return Err(Error::index(format!("{what} index {bad} out of range 0..{bound}")));
    }
    Ok(())
}

impl<F: Float> Graph<F> {
    pub fn new(mode: ExecMode) -> Self {
        Graph {
            nodes: Vec::new(),
            saved: Vec::new(),
            mode,
        }
    }

    fn parallel(&self) -> bool {
        self.mode == ExecMode::Parallel
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn kind(&self, id: NodeId) -> OpKind {
        self.nodes[id].kind
    }

    pub fn inputs(&self, id: NodeId) -> &[NodeId] {
        &self.nodes[id].inputs
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    fn node(&self, id: NodeId) -> Result<&Node<F>> {
        self.nodes
            .get(id)
            .ok_or_else(|| Error::index(format!("unknown node {id}")))
    }

    /// Float value of a node.
    pub fn value(&self, id: NodeId) -> Result<&Array<F>> {
        match &self.node(id)?.value {
            Value::Float(a) => Ok(a),
            Value::Index { .. } => Err(Error::arg(format!("node {id} holds token ids"))),
        }
    }

    pub fn scalar(&self, id: NodeId) -> Result<F> {
        let v = self.value(id)?;
        if v.numel() != 1 {
            return Err(Error::arg(format!("node {id} is not scalar: {:?}", v.shape)));
        }
        Ok(v.data[0])
    }

    /// Per-row class probabilities computed by a softmax_xent node.
    pub fn probabilities(&self, id: NodeId) -> Result<&[F]> {
        match &self.node(id)?.op {
            Op::SoftmaxXent { probs, .. } => Ok(&self.saved[probs[0]]),
            _ => Err(Error::arg(format!("node {id} is not softmax_xent"))),
        }
    }

    fn index_value(&self, id: NodeId) -> Result<(&[usize], &[usize])> {
        match &self.node(id)?.value {
            Value::Index { shape, ids } => Ok((shape, ids)),
            Value::Float(_) => Err(Error::arg(format!("node {id} is not a token-id input"))),
        }
    }

    fn push(&mut self, kind: OpKind, op: Op, inputs: Vec<NodeId>, value: Value<F>) -> NodeId {
        let requires_grad = match kind {
            OpKind::Detach | OpKind::Input | OpKind::Parameter => false,
            _ => inputs.iter().any(|&i| self.nodes[i].requires_grad),
        };
        self.nodes.push(Node {
            kind,
            op,
            inputs,
            value,
            requires_grad,
        });
        self.nodes.len() - 1
    }

    fn float(&self, id: NodeId, what: &str) -> Result<&Array<F>> {
        self.value(id)
            .map_err(|_| Error::arg(format!("{what}: node {id} must hold floats")))
    }

    pub fn input(&mut self, value: Array<F>, requires_grad: bool) -> NodeId {
        let id = self.push(OpKind::Input, Op::Input, vec![], Value::Float(value));
        self.nodes[id].requires_grad = requires_grad;
        id
    }

    /// Integer token-id input; ids must be non-negative.
    pub fn input_ids(&mut self, shape: Vec<usize>, ids: &[i64]) -> Result<NodeId> {
        let n: usize = shape.iter().product();
        if n != ids.len() {
            return Err(Error::shape(format!("id shape {shape:?} does not hold {} ids", ids.len())));
        }
        let ids = ids
            .iter()
            .map(|&i| usize::try_from(i).map_err(|_| Error::index(format!("negative token id {i}"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(self.push(OpKind::Input, Op::Input, vec![], Value::Index { shape, ids }))
    }

    pub fn parameter(&mut self, value: Array<F>) -> NodeId {
        let id = self.push(OpKind::Parameter, Op::Parameter, vec![], Value::Float(value));
        self.nodes[id].requires_grad = true;
        id
    }

    /// Frozen parameter: participates in forward but receives no gradient.
    pub fn constant(&mut self, value: Array<F>) -> NodeId {
        self.push(OpKind::Parameter, Op::Parameter, vec![], Value::Float(value))
    }

    /// Affine map over the last axis: `[.., in] -> [.., out]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let xv = self.float(x, "linear")?;
        let wv = self.float(w, "linear weight")?;
        let bv = self.float(b, "linear bias")?;
        if wv.shape.len() != 2 {
            return Err(Error::shape(format!("linear weight must be 2-D, got {:?}", wv.shape)));
        }
        let (out_f, in_f) = (wv.shape[0], wv.shape[1]);
        if bv.shape != [out_f] {
            return Err(Error::shape(format!("linear bias {:?} != [{out_f}]", bv.shape)));
        }
        if xv.shape.last() != Some(&in_f) {
            return Err(Error::shape(format!(
                "linear expects last dim {in_f}, got input {:?}",
                xv.shape
            )));
        }
        let rows = xv.numel() / in_f;
        let y = kernels::linear_forward(&xv.data, rows, in_f, &wv.data, &bv.data, out_f, self.parallel());
        let mut shape = xv.shape.clone();
        *shape.last_mut().unwrap() = out_f;
        let value = Array::new(shape, y)?;
        Ok(self.push(OpKind::Linear, Op::Linear, vec![x, w, b], Value::Float(value)))
    }

    fn conv_geom(&self, x: NodeId, k: NodeId, b: NodeId, stride: usize, padding: usize) -> Result<ConvGeom> {
        let xs = &self.float(x, "conv2d")?.shape;
        let ks = &self.float(k, "conv2d kernel")?.shape;
        let bs = &self.float(b, "conv2d bias")?.shape;
        if xs.len() != 4 {
            return Err(Error::shape(format!("conv2d input must be [N,C,H,W], got {xs:?}")));
        }
        if ks.len() != 4 {
            return Err(Error::shape(format!("conv2d kernel must be [Co,Ci,kH,kW], got {ks:?}")));
        }
        if ks[1] != xs[1] {
            return Err(Error::shape(format!(
                "conv2d kernel expects {} input channels, input has {}",
                ks[1], xs[1]
            )));
        }
        if bs.as_slice() != [ks[0]] {
            return Err(Error::shape(format!("conv2d bias {bs:?} != [{}]", ks[0])));
        }
        if stride == 0 {
            return Err(Error::arg("conv2d stride must be >= 1"));
        }
        if ks[2] > xs[2] + 2 * padding || ks[3] > xs[3] + 2 * padding {
            return Err(Error::shape(format!(
                "conv2d kernel {}x{} exceeds padded input {}x{}",
                ks[2],
                ks[3],
                xs[2] + 2 * padding,
                xs[3] + 2 * padding
            )));
        }
        Ok(ConvGeom {
            batch: xs[0],
            in_channels: xs[1],
            height: xs[2],
            width: xs[3],
            out_channels: ks[0],
            kernel_h: ks[2],
            kernel_w: ks[3],
            stride,
            padding,
        })
    }

    pub fn conv2d(&mut self, x: NodeId, k: NodeId, b: NodeId, stride: usize, padding: usize) -> Result<NodeId> {
        let geom = self.conv_geom(x, k, b, stride, padding)?;
        let y = kernels::conv2d_forward(
            &geom,
            &self.value(x)?.data,
            &self.value(k)?.data,
            &self.value(b)?.data,
            self.parallel(),
        );
        let value = Array::new(vec![geom.batch, geom.out_channels, geom.out_h(), geom.out_w()], y)?;
        Ok(self.push(OpKind::Conv2d, Op::Conv2d { geom }, vec![x, k, b], Value::Float(value)))
    }

    /// Convolution over the sub-grid `x[:, :, keep_rows, keep_cols]`; the
    /// complementary rows and columns are skipped entirely.
    pub fn skip_conv2d(
        &mut self,
        x: NodeId,
        k: NodeId,
        b: NodeId,
        keep_rows: &[usize],
        keep_cols: &[usize],
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let xv = self.float(x, "skip_conv2d")?;
        if xv.shape.len() != 4 {
            return Err(Error::shape(format!("skip_conv2d input must be [N,C,H,W], got {:?}", xv.shape)));
        }
        let (n, c, h, w) = (xv.shape[0], xv.shape[1], xv.shape[2], xv.shape[3]);
        check_sorted_unique(keep_rows, h, "keep_rows")?;
        check_sorted_unique(keep_cols, w, "keep_cols")?;
        let gathered = kernels::gather_grid(&xv.data, n * c, h, w, keep_rows, keep_cols);
        // Geometry of the dense convolution on the gathered grid.
        let sub = Array::new(vec![n, c, keep_rows.len(), keep_cols.len()], gathered)?;
        let ks = &self.float(k, "skip_conv2d kernel")?.shape;
        let bs = &self.float(b, "skip_conv2d bias")?.shape;
        if ks.len() != 4 || ks[1] != c || bs.as_slice() != [ks[0]] {
            return Err(Error::shape(format!(
                "skip_conv2d kernel {ks:?}/bias {bs:?} incompatible with {c} input channels"
            )));
        }
        if stride == 0 {
            return Err(Error::arg("skip_conv2d stride must be >= 1"));
        }
        if ks[2] > keep_rows.len() + 2 * padding || ks[3] > keep_cols.len() + 2 * padding {
            return Err(Error::shape("skip_conv2d kernel exceeds the kept grid"));
        }
        let geom = ConvGeom {
            batch: n,
            in_channels: c,
            height: keep_rows.len(),
            width: keep_cols.len(),
            out_channels: ks[0],
            kernel_h: ks[2],
            kernel_w: ks[3],
            stride,
            padding,
        };
        let y = kernels::conv2d_forward(&geom, &sub.data, &self.value(k)?.data, &self.value(b)?.data, self.parallel());
        let value = Array::new(vec![n, geom.out_channels, geom.out_h(), geom.out_w()], y)?;
        let slot = self.saved.len();
        self.saved.push(sub.data);
        let op = Op::SkipConv2d {
            geom,
            keep_rows: keep_rows.to_vec(),
            keep_cols: keep_cols.to_vec(),
            full: (h, w),
            gathered: vec![slot],
        };
        Ok(self.push(OpKind::SkipConv2d, op, vec![x, k, b], Value::Float(value)))
    }

    fn lookup(&mut self, kind: OpKind, ids_node: NodeId, table: NodeId, ids: Vec<usize>, shape: Vec<usize>) -> Result<NodeId> {
        let tv = self.float(table, "embedding table")?;
        if tv.shape.len() != 2 {
            return Err(Error::shape(format!("embedding table must be [V,E], got {:?}", tv.shape)));
        }
        let (vocab, dim) = (tv.shape[0], tv.shape[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::index(format!("token id {bad} outside vocabulary of {vocab}")));
        }
        let y = kernels::embedding_forward(&ids, &tv.data, dim);
        let mut out_shape = shape;
        out_shape.push(dim);
        let value = Array::new(out_shape, y)?;
        let op = match kind {
            OpKind::Embedding => Op::Embedding { ids },
            _ => Op::SkipEmbedding { ids },
        };
        Ok(self.push(kind, op, vec![ids_node, table], Value::Float(value)))
    }

    /// Table lookup: ids `[.., L]` -> `[.., L, E]`.
    pub fn embedding(&mut self, ids: NodeId, table: NodeId) -> Result<NodeId> {
        let (shape, values) = self.index_value(ids)?;
        let (shape, values) = (shape.to_vec(), values.to_vec());
        self.lookup(OpKind::Embedding, ids, table, values, shape)
    }

    /// Lookup that ignores the positions in `skip` along the last axis.
    pub fn skip_embedding(&mut self, ids: NodeId, table: NodeId, skip: &[usize]) -> Result<NodeId> {
        let (shape, values) = self.index_value(ids)?;
        let len = *shape.last().ok_or_else(|| Error::shape("token ids need a sequence axis"))?;
        for w in skip.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::arg("skip positions must be strictly increasing"));
            }
        }
        if let Some(&bad) = skip.iter().find(|&&p| p >= len) {
            return Err(Error::index(format!("skip position {bad} outside sequence of {len}")));
        }
        if skip.len() >= len {
            return Err(Error::arg("skip positions cover the whole sequence"));
        }
        let keep: Vec<usize> = (0..len).filter(|p| skip.binary_search(p).is_err()).collect();
        let rows = values.len() / len;
        let mut kept = Vec::with_capacity(rows * keep.len());
        for r in 0..rows {
            kept.extend(keep.iter().map(|&p| values[r * len + p]));
        }
        let mut out_shape = shape.to_vec();
        *out_shape.last_mut().unwrap() = keep.len();
        self.lookup(OpKind::SkipEmbedding, ids, table, kept, out_shape)
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.float(x, "relu")?;
        let value = Array::new(xv.shape.clone(), kernels::relu_forward(&xv.data))?;
        Ok(self.push(OpKind::Relu, Op::Relu, vec![x], Value::Float(value)))
    }

    fn pool_geom(&self, x: NodeId, size: usize) -> Result<PoolGeom> {
        let xs = &self.float(x, "pool")?.shape;
        if xs.len() != 4 {
            return Err(Error::shape(format!("pooling input must be [N,C,H,W], got {xs:?}")));
        }
        if size == 0 || size > xs[2] || size > xs[3] {
            return Err(Error::shape(format!("pool size {size} invalid for {}x{}", xs[2], xs[3])));
        }
        Ok(PoolGeom {
            planes: xs[0] * xs[1],
            height: xs[2],
            width: xs[3],
            size,
        })
    }

    pub fn maxpool2d(&mut self, x: NodeId, size: usize) -> Result<NodeId> {
        let g = self.pool_geom(x, size)?;
        let xv = self.value(x)?;
        let (y, argmax) = kernels::maxpool_forward(&g, &xv.data);
        let shape = vec![xv.shape[0], xv.shape[1], g.out_h(), g.out_w()];
        let value = Array::new(shape, y)?;
        Ok(self.push(OpKind::MaxPool2d, Op::MaxPool2d { argmax }, vec![x], Value::Float(value)))
    }

    pub fn avgpool2d(&mut self, x: NodeId, size: usize) -> Result<NodeId> {
        let geom = self.pool_geom(x, size)?;
        let xv = self.value(x)?;
        let y = kernels::avgpool_forward(&geom, &xv.data);
        let shape = vec![xv.shape[0], xv.shape[1], geom.out_h(), geom.out_w()];
        let value = Array::new(shape, y)?;
        Ok(self.push(OpKind::AvgPool2d, Op::AvgPool2d { geom }, vec![x], Value::Float(value)))
    }

    /// `[N, ..] -> [N, prod(..)]`.
    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.float(x, "flatten")?;
        let n = *xv.shape.first().ok_or_else(|| Error::shape("flatten needs a batch axis"))?;
        let value = Array::new(vec![n, xv.numel() / n], xv.data.clone())?;
        Ok(self.push(OpKind::Flatten, Op::Flatten, vec![x], Value::Float(value)))
    }

    /// Elementwise sum of equally shaped nodes, accumulated in argument order.
    pub fn add(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let (&first, rest) = xs
            .split_first()
            .ok_or_else(|| Error::arg("add needs at least one input"))?;
        let mut acc = self.float(first, "add")?.clone();
        for &x in rest {
            let v = self.float(x, "add")?;
            if v.shape != acc.shape {
                return Err(Error::shape(format!("add shape mismatch: {:?} vs {:?}", acc.shape, v.shape)));
            }
            for (a, &b) in acc.data.iter_mut().zip(&v.data) {
                *a = *a + b;
            }
        }
        Ok(self.push(OpKind::Add, Op::Add, xs.to_vec(), Value::Float(acc)))
    }

    /// Mean over the sequence axis: `[N, L, E] -> [N, E]`.
    pub fn mean_seq(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.float(x, "mean_seq")?;
        if xv.shape.len() != 3 {
            return Err(Error::shape(format!("mean_seq input must be [N,L,E], got {:?}", xv.shape)));
        }
        let (n, l, e) = (xv.shape[0], xv.shape[1], xv.shape[2]);
        let value = Array::new(vec![n, e], kernels::mean_seq_forward(&xv.data, n, l, e))?;
        Ok(self.push(OpKind::MeanSeq, Op::MeanSeq, vec![x], Value::Float(value)))
    }

    /// Mean softmax cross-entropy of `[N, K]` logits against labels.
    pub fn softmax_xent(&mut self, logits: NodeId, labels: &[i64]) -> Result<NodeId> {
        let zv = self.float(logits, "softmax_xent")?;
        if zv.shape.len() != 2 || zv.shape[0] != labels.len() {
            return Err(Error::shape(format!(
                "softmax_xent expects [{}, K] logits, got {:?}",
                labels.len(),
                zv.shape
            )));
        }
        let classes = zv.shape[1];
        let labels = labels
            .iter()
            .map(|&y| {
                usize::try_from(y)
                    .ok()
                    .filter(|&y| y < classes)
                    .ok_or_else(|| Error::index(format!("label {y} outside 0..{classes}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let (loss, probs) = kernels::softmax_xent_forward(&zv.data, labels.len(), classes, &labels);
        let slot = self.saved.len();
        self.saved.push(probs);
        let value = Array::new(vec![1], vec![loss])?;
        let op = Op::SoftmaxXent {
            labels,
            probs: vec![slot],
        };
        Ok(self.push(OpKind::SoftmaxXent, op, vec![logits], Value::Float(value)))
    }

    /// Identity in forward; blocks all gradient flow to `x`.
    pub fn detach(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.float(x, "detach")?.clone();
        Ok(self.push(OpKind::Detach, Op::Detach, vec![x], Value::Float(v)))
    }

    /// Reverse-mode gradients of a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<GradStore<F>> {
        let lv = self.value(loss)?;
        if lv.numel() != 1 {
            return Err(Error::arg(format!("loss must be scalar, got shape {:?}", lv.shape)));
        }
        let mut grads: Vec<Option<Vec<F>>> = vec![None; self.nodes.len()];
        if self.nodes[loss].requires_grad {
            grads[loss] = Some(vec![F::one()]);
        }
        for id in (0..=loss).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || node.inputs.is_empty() {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            for (input, contribution) in self.local_backward(id, &g)? {
                if !self.nodes[input].requires_grad {
                    continue;
                }
                match &mut grads[input] {
                    slot @ None => *slot = Some(contribution),
                    Some(acc) => {
                        for (a, c) in acc.iter_mut().zip(&contribution) {
                            *a = *a + *c;
                        }
                    }
                }
            }
            // keep the consumed gradient for non-leaf inspection
            grads[id] = Some(g);
        }
        let mut out = BTreeMap::new();
        for (id, node) in self.nodes.iter().enumerate() {
            let leaf = match node.kind {
                OpKind::Parameter => node.requires_grad,
                OpKind::Input => node.requires_grad,
                _ => false,
            };
            if !leaf {
                continue;
            }
            let shape = match &node.value {
                Value::Float(a) => a.shape.clone(),
                Value::Index { .. } => continue,
            };
            let data = grads[id].take().unwrap_or_else(|| vec![F::zero(); shape.iter().product()]);
            out.insert(id, Array::new(shape, data)?);
        }
        Ok(GradStore { grads: out })
    }

    /// Contributions of node `id`'s output gradient to each of its inputs.
    fn local_backward(&self, id: NodeId, g: &[F]) -> Result<Vec<(NodeId, Vec<F>)>> {
        let node = &self.nodes[id];
        let inp = &node.inputs;
        let need = |i: usize| self.nodes[inp[i]].requires_grad;
        let par = self.parallel();
        let out = match &node.op {
            Op::Input | Op::Parameter | Op::Detach => vec![],
            Op::Linear => {
                let x = self.value(inp[0])?;
                let w = self.value(inp[1])?;
                let (out_f, in_f) = (w.shape[0], w.shape[1]);
                let rows = x.numel() / in_f;
                let lg = kernels::linear_backward(&x.data, rows, in_f, &w.data, out_f, g, need(0), par);
                let mut v = Vec::with_capacity(3);
                if let Some(dx) = lg.input {
                    v.push((inp[0], dx));
                }
                v.push((inp[1], lg.weight));
                v.push((inp[2], lg.bias));
                v
            }
            Op::Conv2d { geom } => {
                let x = self.value(inp[0])?;
                let k = self.value(inp[1])?;
                let cg = kernels::conv2d_backward(geom, &x.data, &k.data, g, need(0), par);
                let mut v = Vec::with_capacity(3);
                if let Some(dx) = cg.input {
                    v.push((inp[0], dx));
                }
                v.push((inp[1], cg.kernel));
                v.push((inp[2], cg.bias));
                v
            }
            Op::SkipConv2d {
                geom,
                keep_rows,
                keep_cols,
                full,
                gathered,
            } => {
                let sub = &self.saved[gathered[0]];
                let k = self.value(inp[1])?;
                let cg = kernels::conv2d_backward(geom, sub, &k.data, g, need(0), par);
                let mut v = Vec::with_capacity(3);
                if let Some(dsub) = cg.input {
                    let planes = geom.batch * geom.in_channels;
                    let dx = kernels::scatter_grid(&dsub, planes, full.0, full.1, keep_rows, keep_cols);
                    v.push((inp[0], dx));
                }
                v.push((inp[1], cg.kernel));
                v.push((inp[2], cg.bias));
                v
            }
            Op::Embedding { ids } | Op::SkipEmbedding { ids } => {
                let t = self.value(inp[1])?;
                vec![(inp[1], kernels::embedding_backward(ids, g, t.shape[0], t.shape[1]))]
            }
            Op::Relu => {
                let x = self.value(inp[0])?;
                vec![(inp[0], kernels::relu_backward(&x.data, g))]
            }
            Op::MaxPool2d { argmax } => {
                let x = self.value(inp[0])?;
                vec![(inp[0], kernels::maxpool_backward(x.numel(), argmax, g))]
            }
            Op::AvgPool2d { geom } => vec![(inp[0], kernels::avgpool_backward(geom, g))],
            Op::Flatten => vec![(inp[0], g.to_vec())],
            Op::Add => inp.iter().map(|&i| (i, g.to_vec())).collect(),
            Op::MeanSeq => {
                let s = &self.value(inp[0])?.shape;
                vec![(inp[0], kernels::mean_seq_backward(g, s[0], s[1], s[2]))]
            }
            Op::SoftmaxXent { labels, probs } => {
                let z = self.value(inp[0])?;
                let p = &self.saved[probs[0]];
                vec![(inp[0], kernels::softmax_xent_backward(p, z.shape[0], z.shape[1], labels, g[0]))]
            }
        };
        Ok(out)
    }
}
