//! Serializable model graph shared by the augmenter, trainer and extractor.

pub mod archive;
pub mod exec;
pub mod io;
pub mod params;

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::engine::OpKind;
use crate::error::{Error, Result};

pub use exec::{head_losses, Forward, NetInput, Network};
pub use io::{arch_digest, deserialize_model, model_to_bytes, read_structure, serialize_model};
pub use params::{init_params, param_count, ParamKey, ParamStore};

pub const FORMAT_VERSION: &str = "amalgam-ir/1";

/// Shape of one model input sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "modality", rename_all = "snake_case")]
pub enum InputSpec {
    Image {
        channels: usize,
        height: usize,
        width: usize,
    },
    Text {
        length: usize,
        vocab: usize,
    },
    Vector {
        features: usize,
    },
}

impl InputSpec {
    /// Per-sample shape of the input tensor.
    pub fn sample_shape(&self) -> Vec<usize> {
        match *self {
            InputSpec::Image {
                channels,
                height,
                width,
            } => vec![channels, height, width],
            InputSpec::Text { length, .. } => vec![length],
            InputSpec::Vector { features } => vec![features],
        }
    }
}

/// Layer kind plus its typed hyperparameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "hyperparams", rename_all = "snake_case")]
pub enum LayerOp {
    Input,
    Linear {
        in_features: usize,
        out_features: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    SkipConv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        keep_rows: Vec<usize>,
        keep_cols: Vec<usize>,
    },
    Embedding {
        vocab: usize,
        dim: usize,
    },
    SkipEmbedding {
        vocab: usize,
        dim: usize,
        skip_positions: Vec<usize>,
    },
    Relu,
    #[serde(rename = "maxpool2d")]
    MaxPool2d {
        size: usize,
    },
    #[serde(rename = "avgpool2d")]
    AvgPool2d {
        size: usize,
    },
    Flatten,
    Add,
    MeanSeq,
}

impl LayerOp {
    pub fn kind(&self) -> OpKind {
        match self {
            LayerOp::Input => OpKind::Input,
            LayerOp::Linear { .. } => OpKind::Linear,
            LayerOp::Conv2d { .. } => OpKind::Conv2d,
            LayerOp::SkipConv2d { .. } => OpKind::SkipConv2d,
            LayerOp::Embedding { .. } => OpKind::Embedding,
            LayerOp::SkipEmbedding { .. } => OpKind::SkipEmbedding,
            LayerOp::Relu => OpKind::Relu,
            LayerOp::MaxPool2d { .. } => OpKind::MaxPool2d,
            LayerOp::AvgPool2d { .. } => OpKind::AvgPool2d,
            LayerOp::Flatten => OpKind::Flatten,
            LayerOp::Add => OpKind::Add,
            LayerOp::MeanSeq => OpKind::MeanSeq,
        }
    }

    /// Named parameter shapes implied by the hyperparameters.
    pub fn param_shapes(&self) -> BTreeMap<String, Vec<usize>> {
        let mut m = BTreeMap::new();
        match *self {
            LayerOp::Linear {
                in_features,
                out_features,
            } => {
                m.insert("weight".into(), vec![out_features, in_features]);
                m.insert("bias".into(), vec![out_features]);
            }
            LayerOp::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            }
            | LayerOp::SkipConv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => {
                m.insert("weight".into(), vec![out_channels, in_channels, kernel, kernel]);
                m.insert("bias".into(), vec![out_channels]);
            }
            LayerOp::Embedding { vocab, dim } | LayerOp::SkipEmbedding { vocab, dim, .. } => {
                m.insert("weight".into(), vec![vocab, dim]);
            }
            _ => {}
        }
        m
    }

    /// The plain counterpart of a skip-input layer (identity for others).
    pub fn without_skip(&self) -> LayerOp {
        match *self {
            LayerOp::SkipConv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                ..
            } => LayerOp::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            },
            LayerOp::SkipEmbedding { vocab, dim, .. } => LayerOp::Embedding { vocab, dim },
            ref other => other.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub id: String,
    #[serde(flatten)]
    pub op: LayerOp,
    pub param_shapes: BTreeMap<String, Vec<usize>>,
}

impl LayerSpec {
    pub fn new(id: impl Into<String>, op: LayerOp) -> Self {
        let param_shapes = op.param_shapes();
        LayerSpec {
            id: id.into(),
            op,
            param_shapes,
        }
    }

    pub fn kind(&self) -> OpKind {
        self.op.kind()
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes.values().map(|s| s.iter().product::<usize>()).sum()
    }
}

/// Directed edge. With `grad_stop` the source value is detached before
/// use; with `adapter` it is passed through that projection layer first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeSpec {
    pub src: String,
    pub dst: String,
    pub grad_stop: bool,
    pub adapter: Option<String>,
}

impl EdgeSpec {
    pub fn plain(src: impl Into<String>, dst: impl Into<String>) -> Self {
        EdgeSpec {
            src: src.into(),
            dst: dst.into(),
            grad_stop: false,
            adapter: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelGraph {
    pub version: String,
    pub input_spec: InputSpec,
    pub layers: Vec<LayerSpec>,
    pub edges: Vec<EdgeSpec>,
    pub heads: Vec<String>,
}

/// Result of validating a graph: derived structure used by consumers.
#[derive(Debug, Clone)]
pub struct GraphInfo {
    pub index: HashMap<String, usize>,
    pub input: usize,
    /// Layers evaluated in order (excludes edge adapters).
    pub order: Vec<usize>,
    /// Incoming edge indices per layer, in edge-list order.
    pub incoming: Vec<Vec<usize>>,
    pub adapters: BTreeSet<usize>,
    /// Per-sample output shape of every layer.
    pub shapes: Vec<Vec<usize>>,
}

impl ModelGraph {
    pub fn new(input_spec: InputSpec) -> Self {
        ModelGraph {
            version: FORMAT_VERSION.to_string(),
            input_spec,
            layers: Vec::new(),
            edges: Vec::new(),
            heads: Vec::new(),
        }
    }

    /// Builds a single-chain model: input followed by `ops` in order, with
    /// the last layer as the only head.
    pub fn sequential(input_spec: InputSpec, input_id: &str, ops: Vec<(String, LayerOp)>) -> Result<Self> {
        let mut g = ModelGraph::new(input_spec);
        g.layers.push(LayerSpec::new(input_id, LayerOp::Input));
        let mut prev = input_id.to_string();
        for (id, op) in ops {
            g.layers.push(LayerSpec::new(id.clone(), op));
            g.edges.push(EdgeSpec::plain(prev, id.clone()));
            prev = id;
        }
        g.heads.push(prev);
        g.validate()?;
        Ok(g)
    }

    pub fn layer(&self, id: &str) -> Option<&LayerSpec> {
        self.layers.iter().find(|l| l.id == id)
    }

    pub fn param_count(&self) -> usize {
        param_count(self)
    }

    /// Checks every structural invariant and derives evaluation order and shapes.
    pub fn validate(&self) -> Result<GraphInfo> {
        if self.version != FORMAT_VERSION {
            return Err(Error::graph(format!(
                "unsupported format version `{}` (expected `{FORMAT_VERSION}`)",
                self.version
            )));
        }
        let mut index = HashMap::new();
        for (i, l) in self.layers.iter().enumerate() {
            if index.insert(l.id.clone(), i).is_some() {
                return Err(Error::graph(format!("duplicate layer id `{}`", l.id)));
            }
            if l.param_shapes != l.op.param_shapes() {
                return Err(Error::graph(format!(
                    "layer `{}` param_shapes {:?} inconsistent with its hyperparameters",
                    l.id, l.param_shapes
                )));
            }
        }
        let inputs: Vec<usize> = (0..self.layers.len())
            .filter(|&i| self.layers[i].op == LayerOp::Input)
            .collect();
        let [input] = inputs[..] else {
            return Err(Error::graph(format!("expected exactly one input layer, found {}", inputs.len())));
        };

        let lookup = |id: &str, what: &str| -> Result<usize> {
            index
                .get(id)
                .copied()
                .ok_or_else(|| Error::graph(format!("{what} references unknown layer id `{id}`")))
        };

        let n = self.layers.len();
        let mut incoming = vec![Vec::new(); n];
        let mut adapters = BTreeSet::new();
        let mut succ = vec![Vec::new(); n];
        for (e, edge) in self.edges.iter().enumerate() {
            let s = lookup(&edge.src, "edge source")?;
            let d = lookup(&edge.dst, "edge destination")?;
            if let Some(a) = &edge.adapter {
                let a = lookup(a, "edge adapter")?;
                if !matches!(self.layers[a].op, LayerOp::Linear { .. } | LayerOp::Conv2d { .. }) {
                    return Err(Error::graph(format!(
                        "adapter `{}` must be a linear or conv2d layer",
                        self.layers[a].id
                    )));
                }
                if !adapters.insert(a) {
                    return Err(Error::graph(format!("adapter `{}` used by more than one edge", self.layers[a].id)));
                }
            }
            incoming[d].push(e);
            succ[s].push(d);
        }
        for &a in &adapters {
            if !incoming[a].is_empty() || !succ[a].is_empty() || a == input {
                return Err(Error::graph(format!(
                    "adapter `{}` may not be an edge endpoint",
                    self.layers[a].id
                )));
            }
        }
        for (i, l) in self.layers.iter().enumerate() {
            if adapters.contains(&i) {
                continue;
            }
            let arity = incoming[i].len();
            let ok = match l.op {
                LayerOp::Input => arity == 0,
                LayerOp::Add => arity >= 2,
                _ => arity == 1,
            };
            if !ok {
                return Err(Error::graph(format!(
                    "layer `{}` ({}) has {arity} incoming edges",
                    l.id,
                    l.kind()
                )));
            }
        }

        // Kahn's algorithm, smallest declaration index first.
        let mut indeg: Vec<usize> = incoming.iter().map(Vec::len).collect();
        let mut ready: BTreeSet<usize> = (0..n).filter(|&i| indeg[i] == 0 && !adapters.contains(&i)).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(i) = ready.pop_first() {
            order.push(i);
            for &d in &succ[i] {
                indeg[d] -= 1;
                if indeg[d] == 0 {
                    ready.insert(d);
                }
            }
        }
        if order.len() + adapters.len() != n {
            return Err(Error::graph("graph contains a cycle"));
        }

        let mut shapes: Vec<Vec<usize>> = vec![Vec::new(); n];
        for &i in &order {
            let layer = &self.layers[i];
            let ins: Vec<Vec<usize>> = incoming[i]
                .iter()
                .map(|&e| {
                    let edge = &self.edges[e];
                    let src_shape = shapes[index[&edge.src]].clone();
                    match &edge.adapter {
                        Some(a) => {
                            let a = &self.layers[index[a]];
                            infer_shape(&a.op, &[src_shape], &self.input_spec)
                                .map_err(|m| Error::graph(format!("adapter `{}` on edge {e}: {m}", a.id)))
                        }
                        None => Ok(src_shape),
                    }
                })
                .collect::<Result<_>>()?;
            shapes[i] = infer_shape(&layer.op, &ins, &self.input_spec)
                .map_err(|m| Error::graph(format!("layer `{}`: {m}", layer.id)))?;
        }
        for &a in &adapters {
            let edge = self.edges.iter().find(|e| e.adapter.as_deref() == Some(&self.layers[a].id)).unwrap();
            let src = &shapes[index[&edge.src]];
            shapes[a] = infer_shape(&self.layers[a].op, std::slice::from_ref(src), &self.input_spec)
                .map_err(|m| Error::graph(format!("adapter `{}`: {m}", self.layers[a].id)))?;
        }

        if self.heads.is_empty() {
            return Err(Error::graph("model has no output heads"));
        }
        let mut head_shape: Option<&Vec<usize>> = None;
        for h in &self.heads {
            let i = lookup(h, "head")?;
            let s = &shapes[i];
            if s.len() != 1 {
                return Err(Error::graph(format!("head `{h}` must produce [K] logits, got {s:?}")));
            }
            match head_shape {
                None => head_shape = Some(s),
                Some(prev) if prev != s => {
                    return Err(Error::graph(format!("head `{h}` shape {s:?} differs from {prev:?}")))
                }
                _ => {}
            }
        }

        Ok(GraphInfo {
            index,
            input,
            order,
            incoming,
            adapters,
            shapes,
        })
    }

    /// Number of classes produced by every head.
    pub fn num_classes(&self) -> Result<usize> {
        let info = self.validate()?;
        Ok(info.shapes[info.index[&self.heads[0]]][0])
    }
}

fn single(ins: &[Vec<usize>]) -> std::result::Result<&Vec<usize>, String> {
    match ins {
        [one] => Ok(one),
        _ => Err(format!("expected one input, got {}", ins.len())),
    }
}

fn conv_out(len: usize, kernel: usize, stride: usize, padding: usize) -> std::result::Result<usize, String> {
    if stride == 0 {
        return Err("stride must be >= 1".into());
    }
    if kernel == 0 || kernel > len + 2 * padding {
        return Err(format!("kernel {kernel} exceeds padded extent {}", len + 2 * padding));
    }
    Ok((len + 2 * padding - kernel) / stride + 1)
}

fn check_set(set: &[usize], bound: usize, what: &str) -> std::result::Result<(), String> {
    if set.windows(2).any(|w| w[0] >= w[1]) {
        return Err(format!("{what} must be strictly increasing"));
    }
    if let Some(&bad) = set.iter().find(|&&i| i >= bound) {
        return Err(format!("{what} index {bad} out of range 0..{bound}"));
    }
    Ok(())
}

/// Per-sample output shape of `op` applied to inputs of the given shapes.
pub fn infer_shape(op: &LayerOp, ins: &[Vec<usize>], spec: &InputSpec) -> std::result::Result<Vec<usize>, String> {
    let text_input = matches!(spec, InputSpec::Text { .. });
    match op {
        LayerOp::Input => Ok(spec.sample_shape()),
        LayerOp::Linear {
            in_features,
            out_features,
        } => {
            let x = single(ins)?;
            if x.last() != Some(in_features) {
                return Err(format!("linear expects last dim {in_features}, got {x:?}"));
            }
            let mut s = x.clone();
            *s.last_mut().unwrap() = *out_features;
            Ok(s)
        }
        LayerOp::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        } => {
            let x = single(ins)?;
            if x.len() != 3 || x[0] != *in_channels {
                return Err(format!("conv2d expects [{in_channels}, H, W], got {x:?}"));
            }
            Ok(vec![
                *out_channels,
                conv_out(x[1], *kernel, *stride, *padding)?,
                conv_out(x[2], *kernel, *stride, *padding)?,
            ])
        }
        LayerOp::SkipConv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            keep_rows,
            keep_cols,
        } => {
            let x = single(ins)?;
            if x.len() != 3 || x[0] != *in_channels {
                return Err(format!("skip_conv2d expects [{in_channels}, H, W], got {x:?}"));
            }
            if keep_rows.is_empty() || keep_cols.is_empty() {
                return Err("keep sets must be non-empty".into());
            }
            check_set(keep_rows, x[1], "keep_rows")?;
            check_set(keep_cols, x[2], "keep_cols")?;
            Ok(vec![
                *out_channels,
                conv_out(keep_rows.len(), *kernel, *stride, *padding)?,
                conv_out(keep_cols.len(), *kernel, *stride, *padding)?,
            ])
        }
        LayerOp::Embedding { dim, .. } => {
            let x = single(ins)?;
            if !text_input || x.len() != 1 {
                return Err(format!("embedding expects a token sequence, got {x:?}"));
            }
            Ok(vec![x[0], *dim])
        }
        LayerOp::SkipEmbedding {
            dim, skip_positions, ..
        } => {
            let x = single(ins)?;
            if !text_input || x.len() != 1 {
                return Err(format!("skip_embedding expects a token sequence, got {x:?}"));
            }
            check_set(skip_positions, x[0], "skip_positions")?;
            if skip_positions.len() >= x[0] {
                return Err("skip_positions cover the whole sequence".into());
            }
            Ok(vec![x[0] - skip_positions.len(), *dim])
        }
        LayerOp::Relu => Ok(single(ins)?.clone()),
        LayerOp::MaxPool2d { size } | LayerOp::AvgPool2d { size } => {
            let x = single(ins)?;
            if x.len() != 3 || *size == 0 || *size > x[1] || *size > x[2] {
                return Err(format!("pool size {size} invalid for {x:?}"));
            }
            Ok(vec![x[0], x[1] / size, x[2] / size])
        }
        LayerOp::Flatten => Ok(vec![single(ins)?.iter().product()]),
        LayerOp::Add => {
            let first = ins.first().ok_or("add needs inputs")?;
            if ins.iter().any(|s| s != first) {
                return Err(format!("add inputs have different shapes: {ins:?}"));
            }
            Ok(first.clone())
        }
        LayerOp::MeanSeq => {
            let x = single(ins)?;
            if x.len() != 2 {
                return Err(format!("mean_seq expects [L, E], got {x:?}"));
            }
            Ok(vec![x[1]])
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mlp() -> ModelGraph {
        ModelGraph::sequential(
            InputSpec::Vector { features: 10 },
            "x",
            vec![
                ("fc1".into(), LayerOp::Linear { in_features: 10, out_features: 5 }),
                ("act".into(), LayerOp::Relu),
                ("fc2".into(), LayerOp::Linear { in_features: 5, out_features: 3 }),
            ],
        )
        .unwrap()
    }

    #[test]
    fn layer_json_shape() {
        let l = LayerSpec::new("p", LayerOp::MaxPool2d { size: 2 });
        let v = serde_json::to_value(&l).unwrap();
        assert_eq!(v["kind"], "maxpool2d");
        assert_eq!(v["hyperparams"]["size"], 2);
        let back: LayerSpec = serde_json::from_value(v).unwrap();
        assert_eq!(back, l);
        let r: LayerSpec = serde_json::from_value(serde_json::to_value(LayerSpec::new("r", LayerOp::Relu)).unwrap()).unwrap();
        assert_eq!(r.op, LayerOp::Relu);
    }

    #[test]
    fn shapes_and_order() {
        let g = mlp();
        let info = g.validate().unwrap();
        assert_eq!(info.order, vec![0, 1, 2, 3]);
        assert_eq!(info.shapes[3], vec![3]);
        assert_eq!(g.num_classes().unwrap(), 3);
    }

    #[test]
    fn dangling_edge_names_the_id() {
        let mut g = mlp();
        g.edges.push(EdgeSpec::plain("fc1", "ghost"));
        let err = g.validate().unwrap_err().to_string();
        assert!(err.contains("ghost"), "{err}");
    }

    #[test]
    fn cycles_and_arity_are_rejected() {
        let mut g = mlp();
        g.edges.push(EdgeSpec::plain("fc2", "act"));
        assert!(g.validate().is_err());

        let mut g = mlp();
        g.layers[2].param_shapes.insert("bias".into(), vec![1]);
        assert!(g.validate().is_err());
    }

    #[test]
    fn heads_must_agree() {
        let mut g = mlp();
        g.heads.push("act".into());
        assert!(g.validate().is_err());
    }

    #[test]
    fn version_is_checked() {
        let mut g = mlp();
        g.version = "amalgam-ir/0".into();
        assert!(g.validate().unwrap_err().to_string().contains("version"));
    }
}
