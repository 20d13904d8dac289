use std::collections::BTreeMap;
use std::fmt;

use rand::distr::{Distribution, Uniform};

use super::{LayerOp, ModelGraph};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{DType, Tensor};

/// `(layer id, parameter name)`; rendered as `layer/name` in archives.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamKey {
    pub layer: String,
    pub name: String,
}

impl ParamKey {
    pub fn new(layer: impl Into<String>, name: impl Into<String>) -> Self {
        ParamKey {
            layer: layer.into(),
            name: name.into(),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let (layer, name) = s
            .rsplit_once('/')
            .ok_or_else(|| Error::arg(format!("parameter name `{s}` is not of the form layer/name")))?;
        Ok(ParamKey::new(layer, name))
    }
}

impl fmt::Display for ParamKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.layer, self.name)
    }
}

/// All trainable tensors of a model, iterated in key order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<ParamKey, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key: ParamKey, t: Tensor) -> Option<Tensor> {
        self.tensors.insert(key, t)
    }

    pub fn get(&self, key: &ParamKey) -> Option<&Tensor> {
        self.tensors.get(key)
    }

    pub fn param(&self, layer: &str, name: &str) -> Option<&Tensor> {
        self.tensors.get(&ParamKey::new(layer, name))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamKey, &Tensor)> {
        self.tensors.iter()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn layer<'a>(&'a self, layer: &'a str) -> impl Iterator<Item = (&'a ParamKey, &'a Tensor)> + 'a {
        self.tensors.iter().filter(move |(k, _)| k.layer == layer)
    }

    pub fn as_map(&self) -> &BTreeMap<ParamKey, Tensor> {
        &self.tensors
    }

    pub fn as_map_mut(&mut self) -> &mut BTreeMap<ParamKey, Tensor> {
        &mut self.tensors
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Bitwise equality of every tensor.
    pub fn bit_eq(&self, other: &ParamStore) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((ka, a), (kb, b))| ka == kb && a.bit_eq(b))
    }

    /// Checks that the store covers exactly the graph's parameter shapes.
    pub fn validate(&self, graph: &ModelGraph) -> Result<()> {
        let mut expected = 0;
        for layer in &graph.layers {
            for (name, shape) in &layer.param_shapes {
                expected += 1;
                let key = ParamKey::new(&layer.id, name);
                let t = self
                    .get(&key)
                    .ok_or_else(|| Error::arg(format!("missing parameter {key}")))?;
                if t.shape() != shape.as_slice() {
                    return Err(Error::shape(format!(
                        "parameter {key} has shape {:?}, expected {shape:?}",
                        t.shape()
                    )));
                }
                if !t.dtype().is_float() {
                    return Err(Error::arg(format!("parameter {key} must be floating, got {}", t.dtype())));
                }
            }
        }
        if expected != self.len() {
            let extra = self
                .tensors
                .keys()
                .find(|k| graph.layer(&k.layer).is_none_or(|l| !l.param_shapes.contains_key(&k.name)))
                .map(ToString::to_string)
                .unwrap_or_default();
            return Err(Error::arg(format!("parameter store has unexpected entry {extra}")));
        }
        Ok(())
    }
}

/// Sum of all parameter-shape products.
pub fn param_count(graph: &ModelGraph) -> usize {
    graph.layers.iter().map(|l| l.param_count()).sum()
}

pub(crate) fn fan_in(op: &LayerOp) -> usize {
    match *op {
        LayerOp::Linear { in_features, .. } => in_features,
        LayerOp::Conv2d {
            in_channels, kernel, ..
        }
        | LayerOp::SkipConv2d {
            in_channels, kernel, ..
        } => in_channels * kernel * kernel,
        LayerOp::Embedding { dim, .. } | LayerOp::SkipEmbedding { dim, .. } => dim,
        _ => 1,
    }
}

/// Weights of one layer drawn from `U(-sqrt(1/fan_in), +sqrt(1/fan_in))`;
/// biases zero. Each layer id owns a named stream under `seed`.
pub(crate) fn init_layer(store: &mut ParamStore, id: &str, op: &LayerOp, seed: u64) -> Result<()> {
    let shapes = op.param_shapes();
    if shapes.is_empty() {
        return Ok(());
    }
    let bound = (1.0 / fan_in(op) as f64).sqrt() as f32;
    let dist = Uniform::new(-bound, bound).map_err(|e| Error::internal(e.to_string()))?;
    let mut rng = rng::stream(seed, &format!("init/{id}"));
    // weight first, then bias: fixed draw order within the stream
    let weight_shape = &shapes["weight"];
    let n: usize = weight_shape.iter().product();
    let w: Vec<f32> = (0..n).map(|_| dist.sample(&mut rng)).collect();
    store.insert(ParamKey::new(id, "weight"), Tensor::from_f32(weight_shape.clone(), w)?);
    if let Some(b) = shapes.get("bias") {
        store.insert(ParamKey::new(id, "bias"), Tensor::zeros(b.clone(), DType::F32)?);
    }
    Ok(())
}

/// Deterministic float32 initialization of every parameter in the graph.
pub fn init_params(graph: &ModelGraph, seed: u64) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    for layer in &graph.layers {
        init_layer(&mut store, &layer.id, &layer.op, seed)?;
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::InputSpec;

    fn linear(i: usize, o: usize) -> ModelGraph {
        ModelGraph::sequential(
            InputSpec::Vector { features: i },
            "in",
            vec![("fc".into(), LayerOp::Linear { in_features: i, out_features: o })],
        )
        .unwrap()
    }

    #[test]
    fn count_linear_and_empty() {
        assert_eq!(param_count(&linear(10, 5)), 55);
        assert_eq!(param_count(&ModelGraph::new(InputSpec::Vector { features: 1 })), 0);
    }

    #[test]
    fn init_is_deterministic_with_zero_bias() {
        let g = linear(8, 4);
        let a = init_params(&g, 11).unwrap();
        let b = init_params(&g, 11).unwrap();
        assert!(a.bit_eq(&b));
        assert!(!a.bit_eq(&init_params(&g, 12).unwrap()));
        assert!(a.param("fc", "bias").unwrap().as_f32().unwrap().iter().all(|&v| v == 0.0));
        a.validate(&g).unwrap();
    }

    #[test]
    fn weight_mean_within_three_sigma() {
        let g = linear(100, 100);
        let p = init_params(&g, 3).unwrap();
        let w = p.param("fc", "weight").unwrap().as_f32().unwrap();
        assert_eq!(w.len(), 10_000);
        let b = (1.0f64 / 100.0).sqrt();
        // U(-b, b) has variance b^2/3; the sample mean has sd b/sqrt(3n).
        let sd = b / (3.0 * w.len() as f64).sqrt();
        let mean = w.iter().map(|&v| v as f64).sum::<f64>() / w.len() as f64;
        assert!(mean.abs() < 3.0 * sd, "mean {mean} vs 3sd {}", 3.0 * sd);
        assert!(w.iter().all(|&v| (v as f64).abs() <= b));
    }

    #[test]
    fn adding_layers_keeps_existing_init() {
        let small = linear(6, 3);
        let mut big = small.clone();
        big.layers.insert(1, crate::ir::LayerSpec::new("other", LayerOp::Linear { in_features: 6, out_features: 6 }));
        let a = init_params(&small, 5).unwrap();
        let b = init_params(&big, 5).unwrap();
        for (k, t) in a.iter() {
            assert!(b.get(k).unwrap().bit_eq(t));
        }
    }

    #[test]
    fn validate_reports_missing_and_extra() {
        let g = linear(3, 2);
        let mut p = init_params(&g, 0).unwrap();
        p.insert(ParamKey::new("ghost", "weight"), Tensor::zeros(vec![1], DType::F32).unwrap());
        assert!(p.validate(&g).unwrap_err().to_string().contains("ghost"));
        let empty = ParamStore::new();
        assert!(empty.validate(&g).is_err());
    }
}
