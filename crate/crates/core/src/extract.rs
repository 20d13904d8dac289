//! Recovers the original model from a trained augmented one.

use std::time::Instant;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::ir::{arch_digest, ModelGraph, ParamKey, ParamStore};
use crate::secret::SecretBundle;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExtractReport {
    pub layers_copied: usize,
    pub param_count: usize,
    /// Whether `original_def` hashes to the digest recorded at augmentation.
    pub architecture_match: bool,
    pub elapsed_ms: f64,
}

/// Copies the mapped layers' tensors out of `aug_params` into a store for
/// `original_def`. Skip-input layers map to their plain counterparts.
/// Nothing is returned unless every layer maps cleanly.
pub fn extract(
    aug: &ModelGraph,
    aug_params: &ParamStore,
    bundle: &SecretBundle,
    original_def: &ModelGraph,
) -> Result<(ParamStore, ExtractReport)> {
    let start = Instant::now();
    let err = |layer: &str, message: String| Error::Extraction {
        layer: layer.to_string(),
        message,
    };
    let mut out = ParamStore::new();
    let mut copied = 0;
    for layer in &original_def.layers {
        let mapped = bundle
            .layer_map
            .get(&layer.id)
            .ok_or_else(|| err(&layer.id, "not covered by the secret's layer map".into()))?;
        let target = aug
            .layer(mapped)
            .ok_or_else(|| err(&layer.id, format!("mapped layer `{mapped}` missing from the augmented model")))?;
        if target.op.without_skip() != layer.op {
            return Err(err(
                &layer.id,
                format!("kind/hyperparameters differ: original {:?}, augmented {:?}", layer.op, target.op),
            ));
        }
        for name in layer.param_shapes.keys() {
            let t = aug_params
                .param(mapped, name)
                .ok_or_else(|| err(&layer.id, format!("augmented parameters lack {mapped}/{name}")))?;
            out.insert(ParamKey::new(&layer.id, name), t.clone());
        }
        copied += 1;
    }
    out.validate(original_def).map_err(|e| err("*", e.to_string()))?;
    let architecture_match = match &bundle.original_arch_sha256 {
        Some(h) => *h == arch_digest(original_def)?,
        None => false,
    };
    let report = ExtractReport {
        layers_copied: copied,
        param_count: out.numel(),
        architecture_match,
        elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
    };
    Ok((out, report))
}

/// Replaces the parameters of `layers` with `pretrained` values.
pub fn apply_pretrained(model: &ModelGraph, params: &ParamStore, pretrained: &ParamStore, layers: &[String]) -> Result<ParamStore> {
    let mut out = params.clone();
    for id in layers {
        let spec = model
            .layer(id)
            .ok_or_else(|| Error::arg(format!("layer `{id}` not in model")))?;
        for (name, shape) in &spec.param_shapes {
            let key = ParamKey::new(id, name);
            let t = pretrained
                .get(&key)
                .ok_or_else(|| Error::arg(format!("pretrained weights lack {key}")))?;
            if t.shape() != shape.as_slice() || t.dtype() != params.get(&key).map_or(t.dtype(), |p| p.dtype()) {
                return Err(Error::arg(format!(
                    "pretrained {key} has shape {:?}, model expects {shape:?}",
                    t.shape()
                )));
            }
            out.insert(key, t.clone());
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::{augment_model, plan_subnets};
    use crate::ir::{init_params, InputSpec, LayerOp};

    fn mlp() -> ModelGraph {
        ModelGraph::sequential(
            InputSpec::Vector { features: 6 },
            "x",
            vec![
                ("a".into(), LayerOp::Linear { in_features: 6, out_features: 12 }),
                ("r".into(), LayerOp::Relu),
                ("b".into(), LayerOp::Linear { in_features: 12, out_features: 3 }),
            ],
        )
        .unwrap()
    }

    #[test]
    fn extract_after_augment_is_identity() {
        let g = mlp();
        let p = init_params(&g, 4).unwrap();
        let a = augment_model(&g, &p, &plan_subnets(&g, 0.75, 2, 1).unwrap(), None).unwrap();
        let (q, rep) = extract(&a.graph, &a.params, &a.bundle, &g).unwrap();
        assert!(q.bit_eq(&p));
        assert!(rep.architecture_match);
        assert_eq!(rep.layers_copied, 4);
        assert_eq!(rep.param_count, g.param_count());
    }

    #[test]
    fn wrong_bundle_fails() {
        let g = mlp();
        let p = init_params(&g, 4).unwrap();
        let a = augment_model(&g, &p, &plan_subnets(&g, 0.75, 2, 1).unwrap(), None).unwrap();
        let b = augment_model(&g, &p, &plan_subnets(&g, 0.75, 2, 2).unwrap(), None).unwrap();
        assert!(matches!(extract(&a.graph, &a.params, &b.bundle, &g), Err(Error::Extraction { .. })));
    }

    #[test]
    fn pretrained_subsets() {
        let g = mlp();
        let p = init_params(&g, 1).unwrap();
        let q = init_params(&g, 2).unwrap();
        assert!(apply_pretrained(&g, &p, &q, &[]).unwrap().bit_eq(&p));
        let all: Vec<String> = vec!["a".into(), "b".into()];
        assert!(apply_pretrained(&g, &p, &q, &all).unwrap().bit_eq(&q));
        let part = apply_pretrained(&g, &p, &q, &["a".into()]).unwrap();
        assert!(part.param("a", "weight").unwrap().bit_eq(q.param("a", "weight").unwrap()));
        assert!(part.param("b", "weight").unwrap().bit_eq(p.param("b", "weight").unwrap()));
        // apply -> augment -> extract keeps the pretrained values
        let a = augment_model(&g, &part, &plan_subnets(&g, 0.5, 1, 3).unwrap(), None).unwrap();
        assert!(extract(&a.graph, &a.params, &a.bundle, &g).unwrap().0.bit_eq(&part));
    }
}
