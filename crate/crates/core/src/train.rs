//! Minibatch SGD over every head of a model.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;

use crate::data::Dataset;
use crate::engine::{sgd_step, ExecMode, Graph};
use crate::error::{Error, Result};
use crate::ir::{head_losses, ModelGraph, Network, ParamKey, ParamStore};
use crate::rng;
use crate::tensor::Float;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Sequential kernels. Parallel mode produces the same bits but is
    /// labelled as such in the log.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            lr: 0.001,
            batch_size: 128,
            seed: 0,
            deterministic: true,
        }
    }
}

impl TrainConfig {
    fn check(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::arg(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::arg("epochs and batch size must be at least 1"));
        }
        Ok(())
    }

    pub fn mode(&self) -> ExecMode {
        if self.deterministic {
            ExecMode::Sequential
        } else {
            ExecMode::Parallel
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss_total: f64,
    pub loss_heads: Vec<f64>,
    pub acc_heads: Vec<f64>,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsLog {
    pub heads: usize,
    pub mode: ExecMode,
    pub records: Vec<StepRecord>,
}

impl MetricsLog {
    fn render(&self, with_wall: bool) -> String {
        let mut s = String::new();
        if self.mode == ExecMode::Parallel {
            s.push_str("# exec=parallel\n");
        }
        s.push_str("epoch,step,loss_total");
        for h in 0..self.heads {
            write!(s, ",loss_h{h}").unwrap();
        }
        for h in 0..self.heads {
            write!(s, ",acc_h{h}").unwrap();
        }
        s.push_str(if with_wall { ",wall_ms\n" } else { "\n" });
        for r in &self.records {
            write!(s, "{},{},{}", r.epoch, r.step, r.loss_total).unwrap();
            for v in r.loss_heads.iter().chain(&r.acc_heads) {
                write!(s, ",{v}").unwrap();
            }
            if with_wall {
                write!(s, ",{:.3}", r.wall_ms).unwrap();
            }
            s.push('\n');
        }
        s
    }

    pub fn to_csv(&self) -> String {
        self.render(true)
    }

    /// The CSV without the wall-clock column: identical across repeated
    /// runs with the same inputs.
    pub fn to_csv_reproducible(&self) -> String {
        self.render(false)
    }

    /// Mean `loss_total` per epoch.
    pub fn epoch_losses(&self) -> Vec<f64> {
        let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for r in &self.records {
            let e = sums.entry(r.epoch).or_default();
            e.0 += r.loss_total;
            e.1 += 1;
        }
        sums.values().map(|(s, n)| s / *n as f64).collect()
    }
}

fn check_data(graph: &ModelGraph, data: &Dataset) -> Result<()> {
    if data.sample_shape() != graph.input_spec.sample_shape().as_slice() {
        return Err(Error::shape(format!(
            "dataset samples {:?} do not match model input {:?}",
            data.sample_shape(),
            graph.input_spec.sample_shape()
        )));
    }
    let is_text = matches!(graph.input_spec, crate::ir::InputSpec::Text { .. });
    if is_text != (data.modality() == crate::data::Modality::Text) {
        return Err(Error::arg("dataset modality does not match the model input"));
    }
    Ok(())
}

/// Sample order for one epoch.
pub fn epoch_permutation(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, &format!("epoch/{epoch}")));
    idx
}

fn argmax<F: Float>(row: &[F]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

fn accuracy<F: Float>(logits: &[F], classes: usize, labels: &[i64]) -> usize {
    logits
        .chunks(classes)
        .zip(labels)
        .filter(|(row, &y)| argmax(row) as i64 == y)
        .count()
}

/// Trains every parameter on the summed per-head cross-entropy.
pub fn train(graph: &ModelGraph, params: &ParamStore, data: &Dataset, cfg: &TrainConfig) -> Result<(ParamStore, MetricsLog)> {
    cfg.check()?;
    check_data(graph, data)?;
    params.validate(graph)?;
    let net = Network::new(graph.clone())?;
    let classes = net.num_classes();
    let mut params = params.clone();
    let mut log = MetricsLog {
        heads: graph.heads.len(),
        mode: cfg.mode(),
        records: Vec::new(),
    };
    let start = Instant::now();
    let no_frozen = BTreeSet::new();
    for epoch in 0..cfg.epochs {
        let order = epoch_permutation(cfg.seed, epoch, data.len());
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut g = Graph::<f32>::new(cfg.mode());
            let (input, labels) = data.batch::<f32>(batch)?;
            let fwd = net.forward(&mut g, &params, input, &no_frozen)?;
            let (losses, total) = head_losses(&mut g, &fwd.heads, &labels)?;
            let loss_total = g.scalar(total)? as f64;
            if !loss_total.is_finite() {
                return Err(Error::Training {
                    epoch,
                    step,
                    message: format!("non-finite loss {loss_total}"),
                });
            }
            let grads = g.backward(total)?;
            let mut gmap: BTreeMap<ParamKey, _> = BTreeMap::new();
            for (key, &node) in &fwd.params {
                let grad = grads
                    .get(node)
                    .ok_or_else(|| Error::internal(format!("no gradient for {key}")))?;
                gmap.insert(key.clone(), grad.to_tensor());
            }
            sgd_step(params.as_map_mut(), &gmap, cfg.lr).map_err(|e| Error::Training {
                epoch,
                step,
                message: e.to_string(),
            })?;
            let loss_heads = losses
                .iter()
                .map(|&l| g.scalar(l).map(|v| v as f64))
                .collect::<Result<Vec<_>>>()?;
            let acc_heads = fwd
                .heads
                .iter()
                .map(|&h| Ok(accuracy(&g.value(h)?.data, classes, &labels) as f64 / labels.len() as f64))
                .collect::<Result<Vec<_>>>()?;
            log.records.push(StepRecord {
                epoch,
                step,
                loss_total,
                loss_heads,
                acc_heads,
                wall_ms: start.elapsed().as_secs_f64() * 1e3,
            });
        }
    }
    Ok((params, log))
}

/// Mean cross-entropy and top-1 accuracy of one head over `data`.
pub fn evaluate(graph: &ModelGraph, params: &ParamStore, data: &Dataset, head_index: usize) -> Result<(f64, f64)> {
    check_data(graph, data)?;
    if head_index >= graph.heads.len() {
        return Err(Error::index(format!("head {head_index} outside 0..{}", graph.heads.len())));
    }
    if data.is_empty() {
        return Err(Error::arg("cannot evaluate on an empty dataset"));
    }
    let net = Network::new(graph.clone())?;
    let classes = net.num_classes();
    let (mut loss_sum, mut correct) = (0.0f64, 0usize);
    let idx: Vec<usize> = (0..data.len()).collect();
    for batch in idx.chunks(256) {
        let mut g = Graph::<f32>::new(ExecMode::Sequential);
        let (input, labels) = data.batch::<f32>(batch)?;
        let fwd = net.forward(&mut g, params, input, &BTreeSet::new())?;
        let head = fwd.heads[head_index];
        let l = g.softmax_xent(head, &labels)?;
        loss_sum += g.scalar(l)? as f64 * batch.len() as f64;
        correct += accuracy(&g.value(head)?.data, classes, &labels);
    }
    let n = data.len() as f64;
    Ok((loss_sum / n, correct as f64 / n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{DatasetMeta, Modality};
    use crate::ir::{init_params, InputSpec, LayerOp};
    use crate::tensor::Tensor;

    fn vec_data(x: Vec<f32>, y: Vec<i64>, f: usize, k: usize) -> Dataset {
        let n = y.len();
        // vectors are stored as 1x1xF images
        Dataset::new(
            Tensor::from_f32(vec![n, 1, 1, f], x).unwrap(),
            Tensor::from_i64(vec![n], y).unwrap(),
            DatasetMeta {
                modality: Modality::Image,
                num_classes: k,
                vocab: None,
                value_range: Some([-10.0, 10.0]),
            },
        )
        .unwrap()
    }

    fn flat_model(f: usize, k: usize) -> ModelGraph {
        ModelGraph::sequential(
            InputSpec::Image {
                channels: 1,
                height: 1,
                width: f,
            },
            "x",
            vec![
                ("flat".into(), LayerOp::Flatten),
                ("fc".into(), LayerOp::Linear { in_features: f, out_features: k }),
            ],
        )
        .unwrap()
    }

    #[test]
    fn one_step_matches_finite_difference() {
        let g = flat_model(3, 2);
        let p = init_params(&g, 5).unwrap();
        let d = vec_data(vec![0.5, -1.0, 2.0], vec![1], 3, 2);
        let cfg = TrainConfig {
            epochs: 1,
            lr: 0.1,
            batch_size: 1,
            seed: 0,
            deterministic: true,
        };
        let (q, _) = train(&g, &p, &d, &cfg).unwrap();
        // f64 central differences of the loss at the initial weights
        let w0: Vec<f64> = p.param("fc", "weight").unwrap().to_f64_vec();
        let x = [0.5, -1.0, 2.0];
        let loss = |w: &[f64]| {
            let z: Vec<f64> = (0..2).map(|o| (0..3).map(|i| w[o * 3 + i] * x[i]).sum()).collect();
            let m = z[0].max(z[1]);
            let lse = m + ((z[0] - m).exp() + (z[1] - m).exp()).ln();
            lse - z[1]
        };
        let w1 = q.param("fc", "weight").unwrap().to_f64_vec();
        for i in 0..6 {
            let h = 1e-5;
            let (mut a, mut b) = (w0.clone(), w0.clone());
            a[i] += h;
            b[i] -= h;
            let grad = (loss(&a) - loss(&b)) / (2.0 * h);
            let want = w0[i] - 0.1 * grad;
            assert!((w1[i] - want).abs() <= 1e-4 * want.abs().max(1e-3), "{i}: {} vs {want}", w1[i]);
        }
    }

    #[test]
    fn tiny_lr_changes_nothing() {
        let g = flat_model(3, 2);
        let mut p = init_params(&g, 5).unwrap();
        // non-zero biases: an exactly zero parameter would move by -lr*g
        p.insert(ParamKey::new("fc", "bias"), Tensor::from_f32(vec![2], vec![0.25, -0.5]).unwrap());
        let d = vec_data(vec![0.5, -1.0, 2.0, 1.0, 1.0, 1.0], vec![1, 0], 3, 2);
        let cfg = TrainConfig {
            epochs: 2,
            lr: 1e-30,
            batch_size: 1,
            ..Default::default()
        };
        let (q, _) = train(&g, &p, &d, &cfg).unwrap();
        assert!(q.bit_eq(&p));
        assert!(train(&g, &p, &d, &TrainConfig { lr: 0.0, ..cfg }).is_err());
    }

    #[test]
    fn separable_pair_reaches_full_accuracy() {
        let g = flat_model(1, 2);
        let p = init_params(&g, 0).unwrap();
        let d = vec_data(vec![-1.0, 1.0], vec![0, 1], 1, 2);
        let cfg = TrainConfig {
            epochs: 200,
            lr: 0.5,
            batch_size: 2,
            ..Default::default()
        };
        let (q, log) = train(&g, &p, &d, &cfg).unwrap();
        let (loss, acc) = evaluate(&g, &q, &d, 0).unwrap();
        assert_eq!(acc, 1.0);
        assert!(loss < 0.1);
        assert_eq!(evaluate(&g, &q, &d, 0).unwrap(), (loss, acc));
        let e = log.epoch_losses();
        assert!(e[0] > e[e.len() - 1]);
    }

    #[test]
    fn log_format_and_reproducibility() {
        let g = flat_model(2, 3);
        let p = init_params(&g, 0).unwrap();
        let d = vec_data(vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6], vec![0, 1, 2], 2, 3);
        let cfg = TrainConfig {
            epochs: 2,
            lr: 0.1,
            batch_size: 2,
            ..Default::default()
        };
        let (_, a) = train(&g, &p, &d, &cfg).unwrap();
        let (_, b) = train(&g, &p, &d, &cfg).unwrap();
        assert_eq!(a.to_csv_reproducible(), b.to_csv_reproducible());
        let csv = a.to_csv();
        assert!(csv.starts_with("epoch,step,loss_total,loss_h0,acc_h0,wall_ms\n"));
        assert_eq!(csv.lines().count(), 1 + 4);
        let (_, par) = train(&g, &p, &d, &TrainConfig { deterministic: false, ..cfg }).unwrap();
        assert!(par.to_csv().starts_with("# exec=parallel\n"));
    }

    #[test]
    fn bad_shapes_rejected() {
        let g = flat_model(3, 2);
        let p = init_params(&g, 0).unwrap();
        let d = vec_data(vec![0.0; 4], vec![0, 1], 2, 2);
        assert!(train(&g, &p, &d, &TrainConfig::default()).is_err());
        assert!(evaluate(&g, &p, &vec_data(vec![0.0; 3], vec![0], 3, 2), 1).is_err());
    }
}
