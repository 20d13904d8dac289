//! Small reference models and synthetic datasets.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{Dataset, DatasetMeta, Modality};
use crate::error::Result;
use crate::ir::{InputSpec, LayerOp, ModelGraph};
use crate::rng;
use crate::tensor::Tensor;

fn conv(i: usize, o: usize, k: usize) -> LayerOp {
    LayerOp::Conv2d {
        in_channels: i,
        out_channels: o,
        kernel: k,
        stride: 1,
        padding: 0,
    }
}

fn linear(i: usize, o: usize) -> LayerOp {
    LayerOp::Linear {
        in_features: i,
        out_features: o,
    }
}

fn chain(spec: InputSpec, ops: Vec<(&str, LayerOp)>) -> ModelGraph {
    ModelGraph::sequential(spec, "input", ops.into_iter().map(|(n, op)| (n.to_string(), op)).collect())
        .expect("fixture graphs are valid")
}

/// Two conv and two linear layers over 28×28 grayscale, 10 classes
/// (61,322 parameters).
pub fn lenet_mini() -> ModelGraph {
    chain(
        InputSpec::Image {
            channels: 1,
            height: 28,
            width: 28,
        },
        vec![
            ("conv1", conv(1, 6, 5)),
            ("relu1", LayerOp::Relu),
            ("pool1", LayerOp::MaxPool2d { size: 2 }),
            ("conv2", conv(6, 16, 5)),
            ("relu2", LayerOp::Relu),
            ("pool2", LayerOp::MaxPool2d { size: 2 }),
            ("flatten", LayerOp::Flatten),
            ("fc1", linear(256, 220)),
            ("relu3", LayerOp::Relu),
            ("fc2", linear(220, 10)),
        ],
    )
}

/// Embedding, mean over positions, linear classifier.
pub fn text_classifier(vocab: usize, length: usize, dim: usize, classes: usize) -> ModelGraph {
    chain(
        InputSpec::Text { length, vocab },
        vec![
            ("embed", LayerOp::Embedding { vocab, dim }),
            ("pool", LayerOp::MeanSeq),
            ("fc", linear(dim, classes)),
        ],
    )
}

/// One conv and one linear layer over 14×14 grayscale, 10 classes. No
/// activation, so gradients are smooth in the input.
pub fn tiny_cnn() -> ModelGraph {
    chain(
        InputSpec::Image {
            channels: 1,
            height: 14,
            width: 14,
        },
        vec![
            ("conv", conv(1, 4, 3)),
            ("flatten", LayerOp::Flatten),
            ("fc", linear(576, 10)),
        ],
    )
}

/// Digit-like images: each class is a fixed set of bright strokes, each
/// sample a jittered copy with pixel noise. Values lie in [0, 1].
pub fn synthetic_images(n: usize, side: usize, classes: usize, seed: u64) -> Result<Dataset> {
    let mut tr = rng::stream(seed, "fixture/templates");
    let templates: Vec<Vec<f32>> = (0..classes)
        .map(|_| {
            let mut t = vec![0f32; side * side];
            for _ in 0..3 {
                let (r0, c0) = (tr.random_range(2..side - 2), tr.random_range(2..side - 2));
                let (dr, dc) = (tr.random_range(-1i64..=1), tr.random_range(-1i64..=1));
                for s in 0..side as i64 / 2 {
                    let (r, c) = (r0 as i64 + dr * s, c0 as i64 + dc * s);
                    if (0..side as i64).contains(&r) && (0..side as i64).contains(&c) {
                        t[r as usize * side + c as usize] = 1.0;
                    }
                }
            }
            t
        })
        .collect();
    let mut r = rng::stream(seed, "fixture/samples");
    let noise = Normal::new(0.0f32, 0.15).expect("valid normal");
    let mut samples = Vec::with_capacity(n * side * side);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let y = r.random_range(0..classes);
        let (sr, sc) = (r.random_range(-1i64..=1), r.random_range(-1i64..=1));
        for row in 0..side as i64 {
            for col in 0..side as i64 {
                let (tr_, tc) = (row - sr, col - sc);
                let base = if (0..side as i64).contains(&tr_) && (0..side as i64).contains(&tc) {
                    templates[y][tr_ as usize * side + tc as usize]
                } else {
                    0.0
                };
                samples.push((base + noise.sample(&mut r)).clamp(0.0, 1.0));
            }
        }
        labels.push(y as i64);
    }
    Dataset::new(
        Tensor::from_f32(vec![n, 1, side, side], samples)?,
        Tensor::from_i64(vec![n], labels)?,
        DatasetMeta {
            modality: Modality::Image,
            num_classes: classes,
            vocab: None,
            value_range: Some([0.0, 1.0]),
        },
    )
}

/// Token sequences where each class favours its own slice of the vocabulary.
pub fn synthetic_text(n: usize, length: usize, vocab: usize, classes: usize, seed: u64) -> Result<Dataset> {
    let mut r = rng::stream(seed, "fixture/text");
    let slice = vocab / classes;
    let mut ids = Vec::with_capacity(n * length);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let y = r.random_range(0..classes);
        for _ in 0..length {
            let tok = if r.random_bool(0.5) {
                y * slice + r.random_range(0..slice)
            } else {
                r.random_range(0..vocab)
            };
            ids.push(tok as i64);
        }
        labels.push(y as i64);
    }
    Dataset::new(
        Tensor::from_i64(vec![n, length], ids)?,
        Tensor::from_i64(vec![n], labels)?,
        DatasetMeta {
            modality: Modality::Text,
            num_classes: classes,
            vocab: Some(vocab),
            value_range: None,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixture_sizes() {
        assert_eq!(lenet_mini().param_count(), 61_322);
        assert_eq!(tiny_cnn().param_count(), 4 * 9 + 4 + 5760 + 10);
        assert_eq!(text_classifier(1000, 20, 32, 4).param_count(), 32_000 + 132);
        assert_eq!(lenet_mini().num_classes().unwrap(), 10);
    }

    #[test]
    fn datasets_are_seeded() {
        let a = synthetic_images(20, 28, 10, 3).unwrap();
        let b = synthetic_images(20, 28, 10, 3).unwrap();
        assert!(a.samples().bit_eq(b.samples()));
        assert_eq!(a.sample_shape(), &[1, 28, 28]);
        assert!(a.samples().as_f32().unwrap().iter().all(|v| (0.0..=1.0).contains(v)));
        let t = synthetic_text(20, 20, 1000, 4, 3).unwrap();
        assert!(t.samples().as_i64().unwrap().iter().all(|v| (0..1000).contains(v)));
        assert!(t.labels().iter().all(|y| (0..4).contains(y)));
    }
}
