//! Evaluates a [`ModelGraph`] on the autodiff tape.

use std::collections::{BTreeMap, BTreeSet};

use super::{GraphInfo, InputSpec, LayerOp, ModelGraph, ParamKey, ParamStore};
use crate::engine::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::{Array, Float};

/// Batched model input.
#[derive(Debug, Clone)]
pub enum NetInput<F> {
    /// `[N, C, H, W]` images or `[N, features]` vectors.
    Dense { value: Array<F>, requires_grad: bool },
    /// `[N, L]` token ids.
    Tokens { batch: usize, ids: Vec<i64> },
}

impl<F: Float> NetInput<F> {
    pub fn dense(value: Array<F>) -> Self {
        NetInput::Dense {
            value,
            requires_grad: false,
        }
    }

    pub fn batch(&self) -> usize {
        match self {
            NetInput::Dense { value, .. } => value.shape.first().copied().unwrap_or(0),
            NetInput::Tokens { batch, .. } => *batch,
        }
    }
}

/// Node ids produced by one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub input: NodeId,
    pub params: BTreeMap<ParamKey, NodeId>,
    /// Output node per layer index; `None` for adapters and unreachable layers.
    pub layers: Vec<Option<NodeId>>,
    /// Logit nodes `[N, K]`, in head order.
    pub heads: Vec<NodeId>,
}

/// A validated graph ready for repeated evaluation.
#[derive(Debug, Clone)]
pub struct Network {
    graph: ModelGraph,
    info: GraphInfo,
}

impl Network {
    pub fn new(graph: ModelGraph) -> Result<Self> {
        let info = graph.validate()?;
        Ok(Network { graph, info })
    }

    pub fn graph(&self) -> &ModelGraph {
        &self.graph
    }

    pub fn info(&self) -> &GraphInfo {
        &self.info
    }

    pub fn num_classes(&self) -> usize {
        self.info.shapes[self.info.index[&self.graph.heads[0]]][0]
    }

    /// Records the forward pass on `g`. Parameters in `frozen` are bound as
    /// constants and receive no gradient.
    pub fn forward<F: Float>(
        &self,
        g: &mut Graph<F>,
        params: &ParamStore,
        input: NetInput<F>,
        frozen: &BTreeSet<ParamKey>,
    ) -> Result<Forward> {
        let batch = input.batch();
        if batch == 0 {
            return Err(Error::shape("empty batch"));
        }
        let input_node = match (&self.graph.input_spec, input) {
            (InputSpec::Text { length, .. }, NetInput::Tokens { batch, ids }) => {
                if ids.len() != batch * length {
                    return Err(Error::shape(format!(
                        "expected {batch}x{length} token ids, got {}",
                        ids.len()
                    )));
                }
                g.input_ids(vec![batch, *length], &ids)?
            }
            (InputSpec::Text { .. }, NetInput::Dense { .. }) => {
                return Err(Error::arg("text model needs token-id input"))
            }
            (spec, NetInput::Dense { value, requires_grad }) => {
                let mut want = vec![batch];
                want.extend(spec.sample_shape());
                if value.shape != want {
                    return Err(Error::shape(format!("model expects input {want:?}, got {:?}", value.shape)));
                }
                g.input(value, requires_grad)
            }
            (_, NetInput::Tokens { .. }) => return Err(Error::arg("dense model cannot take token ids")),
        };

        let mut param_nodes = BTreeMap::new();
        for (key, t) in params.iter() {
            let a = Array::<F>::from_tensor(t)?;
            let id = if frozen.contains(key) {
                g.constant(a)
            } else {
                g.parameter(a)
            };
            param_nodes.insert(key.clone(), id);
        }
        let p = |layer: &str, name: &str| -> Result<NodeId> {
            param_nodes
                .get(&ParamKey::new(layer, name))
                .copied()
                .ok_or_else(|| Error::arg(format!("missing parameter {layer}/{name}")))
        };

        let mut out: Vec<Option<NodeId>> = vec![None; self.graph.layers.len()];
        out[self.info.input] = Some(input_node);
        for &li in &self.info.order {
            if li == self.info.input {
                continue;
            }
            let mut ins = Vec::with_capacity(self.info.incoming[li].len());
            for &e in &self.info.incoming[li] {
                let edge = &self.graph.edges[e];
                let mut v = out[self.info.index[&edge.src]].ok_or_else(|| Error::internal("source evaluated late"))?;
                if edge.grad_stop {
                    v = g.detach(v)?;
                }
                if let Some(a) = &edge.adapter {
                    let layer = &self.graph.layers[self.info.index[a]];
                    v = apply(g, &layer.op, &layer.id, &[v], &p)?;
                }
                ins.push(v);
            }
            let layer = &self.graph.layers[li];
            out[li] = Some(apply(g, &layer.op, &layer.id, &ins, &p)?);
        }
        let heads = self
            .graph
            .heads
            .iter()
            .map(|h| out[self.info.index[h]].ok_or_else(|| Error::internal(format!("head `{h}` not evaluated"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Forward {
            input: input_node,
            params: param_nodes,
            layers: out,
            heads,
        })
    }
}

/// Per-head mean cross-entropy nodes and their unweighted sum.
pub fn head_losses<F: Float>(g: &mut Graph<F>, heads: &[NodeId], labels: &[i64]) -> Result<(Vec<NodeId>, NodeId)> {
    let losses = heads
        .iter()
        .map(|&h| g.softmax_xent(h, labels))
        .collect::<Result<Vec<_>>>()?;
    let total = match losses[..] {
        [one] => one,
        _ => g.add(&losses)?,
    };
    Ok((losses, total))
}

fn apply<F: Float>(
    g: &mut Graph<F>,
    op: &LayerOp,
    id: &str,
    ins: &[NodeId],
    p: &impl Fn(&str, &str) -> Result<NodeId>,
) -> Result<NodeId> {
    let x = ins[0];
    match op {
        LayerOp::Input => Err(Error::internal("input layer applied as an op")),
        LayerOp::Linear { .. } => g.linear(x, p(id, "weight")?, p(id, "bias")?),
        LayerOp::Conv2d { stride, padding, .. } => g.conv2d(x, p(id, "weight")?, p(id, "bias")?, *stride, *padding),
        LayerOp::SkipConv2d {
            stride,
            padding,
            keep_rows,
            keep_cols,
            ..
        } => g.skip_conv2d(x, p(id, "weight")?, p(id, "bias")?, keep_rows, keep_cols, *stride, *padding),
        LayerOp::Embedding { .. } => g.embedding(x, p(id, "weight")?),
        LayerOp::SkipEmbedding { skip_positions, .. } => g.skip_embedding(x, p(id, "weight")?, skip_positions),
        LayerOp::Relu => g.relu(x),
        LayerOp::MaxPool2d { size } => g.maxpool2d(x, *size),
        LayerOp::AvgPool2d { size } => g.avgpool2d(x, *size),
        LayerOp::Flatten => g.flatten(x),
        LayerOp::Add => g.add(ins),
        LayerOp::MeanSeq => g.mean_seq(x),
    }
    .map_err(|e| match e {
        Error::Shape(m) => Error::shape(format!("layer `{id}`: {m}")),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::ExecMode;
    use crate::ir::{init_params, EdgeSpec, LayerSpec};

    fn tiny() -> ModelGraph {
        ModelGraph::sequential(
            InputSpec::Vector { features: 3 },
            "x",
            vec![("fc".into(), LayerOp::Linear { in_features: 3, out_features: 2 })],
        )
        .unwrap()
    }

    #[test]
    fn linear_forward_matches_hand_computation() {
        let graph = tiny();
        let mut params = init_params(&graph, 1).unwrap();
        let w = params.param("fc", "weight").unwrap().as_f32().unwrap().to_vec();
        params.insert(
            ParamKey::new("fc", "bias"),
            crate::tensor::Tensor::from_f32(vec![2], vec![0.5, -0.5]).unwrap(),
        );
        let net = Network::new(graph).unwrap();
        let mut g = Graph::<f32>::new(ExecMode::Sequential);
        let x = Array::new(vec![1, 3], vec![1.0f32, 2.0, 3.0]).unwrap();
        let f = net.forward(&mut g, &params, NetInput::dense(x), &BTreeSet::new()).unwrap();
        let y = &g.value(f.heads[0]).unwrap().data;
        for o in 0..2 {
            let want = w[o * 3] + 2.0 * w[o * 3 + 1] + 3.0 * w[o * 3 + 2] + [0.5, -0.5][o];
            assert!((y[o] - want).abs() < 1e-6);
        }
    }

    #[test]
    fn grad_stop_edge_isolates_source() {
        // x -> a -> head0 ; a -(stop, adapter)-> sum <- b <- x ; sum -> head1
        let mut graph = ModelGraph::new(InputSpec::Vector { features: 2 });
        let lin = |i, o| LayerOp::Linear { in_features: i, out_features: o };
        graph.layers.push(LayerSpec::new("x", LayerOp::Input));
        graph.layers.push(LayerSpec::new("a", lin(2, 2)));
        graph.layers.push(LayerSpec::new("b", lin(2, 2)));
        graph.layers.push(LayerSpec::new("ad", lin(2, 2)));
        graph.layers.push(LayerSpec::new("sum", LayerOp::Add));
        graph.edges.push(EdgeSpec::plain("x", "a"));
        graph.edges.push(EdgeSpec::plain("x", "b"));
        graph.edges.push(EdgeSpec {
            src: "a".into(),
            dst: "sum".into(),
            grad_stop: true,
            adapter: Some("ad".into()),
        });
        graph.edges.push(EdgeSpec::plain("b", "sum"));
        graph.heads = vec!["a".into(), "sum".into()];
        let params = init_params(&graph, 4).unwrap();
        let net = Network::new(graph).unwrap();
        let mut g = Graph::<f64>::new(ExecMode::Sequential);
        let x = Array::new(vec![1, 2], vec![0.3, -0.8]).unwrap();
        let f = net.forward(&mut g, &params, NetInput::dense(x), &BTreeSet::new()).unwrap();
        // loss on the second head only
        let l = g.softmax_xent(f.heads[1], &[1]).unwrap();
        let grads = g.backward(l).unwrap();
        let ga = grads.get(f.params[&ParamKey::new("a", "weight")]).unwrap();
        assert!(ga.data.iter().all(|&v| v == 0.0));
        let gad = grads.get(f.params[&ParamKey::new("ad", "weight")]).unwrap();
        assert!(gad.data.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn wrong_input_shape_is_rejected() {
        let net = Network::new(tiny()).unwrap();
        let params = init_params(net.graph(), 0).unwrap();
        let mut g = Graph::<f32>::new(ExecMode::Sequential);
        let x = Array::new(vec![1, 4], vec![0.0f32; 4]).unwrap();
        assert!(net.forward(&mut g, &params, NetInput::dense(x), &BTreeSet::new()).is_err());
    }
}
