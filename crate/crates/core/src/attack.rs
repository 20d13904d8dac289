//! Gradient-leakage attacks: iDLG label inference and DLG input
//! reconstruction by gradient matching.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::Rng;

use crate::data::PositionSecret;
use crate::engine::{ExecMode, Graph};
use crate::error::{Error, Result};
use crate::ir::{head_losses, LayerOp, ModelGraph, NetInput, Network, ParamKey, ParamStore};
use crate::rng;
use crate::tensor::{Array, Tensor};

/// Parameter gradients observed by the attacker, keyed by parameter.
pub type ParamGrads = BTreeMap<ParamKey, Array<f64>>;

#[derive(Debug, Clone, PartialEq)]
pub struct AttackConfig {
    pub iterations: usize,
    /// Initial (and maximum) descent step.
    pub step: f64,
    pub seed: u64,
    pub target_index: usize,
    /// Central finite-difference step over dummy input cells.
    pub fd_step: f64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            iterations: 200,
            step: 1.0,
            seed: 0,
            target_index: 0,
            fd_step: 1e-4,
        }
    }
}

impl AttackConfig {
    fn check(&self) -> Result<()> {
        if self.iterations == 0 || !(self.step > 0.0) || !(self.fd_step > 0.0) {
            return Err(Error::arg("attack needs iterations >= 1 and positive step sizes"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackResult {
    pub reconstruction: Tensor,
    pub label: i64,
    /// Objective before each iteration.
    pub history: Vec<f64>,
    /// Against the ground-truth original cells.
    pub mse: f64,
    pub iterations: usize,
}

impl AttackResult {
    pub fn history_csv(&self) -> String {
        let mut s = String::from("iteration,objective\n");
        for (i, v) in self.history.iter().enumerate() {
            writeln!(s, "{i},{v}").unwrap();
        }
        s
    }
}

/// Gradients of the summed head losses for one sample `x` (`[C, H, W]`).
pub fn sample_grads(net: &Network, params: &ParamStore, x: &Array<f64>, label: i64) -> Result<ParamGrads> {
    let mut g = Graph::<f64>::new(ExecMode::Sequential);
    let mut shape = vec![1];
    shape.extend(&x.shape);
    let input = NetInput::dense(Array::new(shape, x.data.clone())?);
    let fwd = net.forward(&mut g, params, input, &BTreeSet::new())?;
    let (_, total) = head_losses(&mut g, &fwd.heads, &[label])?;
    let grads = g.backward(total)?;
    fwd.params
        .iter()
        .map(|(k, &node)| {
            let a = grads
                .get(node)
                .ok_or_else(|| Error::internal(format!("no gradient for {k}")))?;
            Ok((k.clone(), a.clone()))
        })
        .collect()
}

/// Label of a single-sample gradient: the only negative entry of the
/// head's bias gradient.
pub fn idlg_label(victim: &ParamGrads, model: &ModelGraph, head_index: usize) -> Result<i64> {
    let head = model
        .heads
        .get(head_index)
        .ok_or_else(|| Error::index(format!("head {head_index} outside 0..{}", model.heads.len())))?;
    let layer = model.layer(head).ok_or_else(|| Error::arg(format!("head `{head}` missing")))?;
    if !matches!(layer.op, LayerOp::Linear { .. }) {
        return Err(Error::arg(format!("head `{head}` is not a linear layer")));
    }
    let bias = victim
        .get(&ParamKey::new(head, "bias"))
        .ok_or_else(|| Error::arg(format!("no bias gradient for head `{head}`")))?;
    idlg_from_bias(&bias.data)
}

pub fn idlg_from_bias(bias_grad: &[f64]) -> Result<i64> {
    let neg: Vec<usize> = (0..bias_grad.len()).filter(|&i| bias_grad[i] < 0.0).collect();
    match neg[..] {
        [y] => Ok(y as i64),
        _ => Err(Error::Ambiguous(format!(
            "{} negative bias-gradient entries, expected exactly one",
            neg.len()
        ))),
    }
}

fn distance(a: &ParamGrads, b: &ParamGrads) -> f64 {
    a.iter()
        .map(|(k, x)| {
            let y = &b[k];
            x.data.iter().zip(&y.data).map(|(p, q)| (p - q) * (p - q)).sum::<f64>()
        })
        .sum()
}

struct Objective<'a> {
    net: &'a Network,
    params: &'a ParamStore,
    victim: &'a ParamGrads,
    label: i64,
    shape: Vec<usize>,
}

impl Objective<'_> {
    fn eval(&self, x: &[f64]) -> Result<f64> {
        let a = Array::new(self.shape.clone(), x.to_vec())?;
        Ok(distance(&sample_grads(self.net, self.params, &a, self.label)?, self.victim))
    }

    fn fd_gradient(&self, x: &mut [f64], h: f64) -> Result<Vec<f64>> {
        let mut d = vec![0.0; x.len()];
        for i in 0..x.len() {
            let v = x[i];
            x[i] = v + h;
            let up = self.eval(x)?;
            x[i] = v - h;
            let down = self.eval(x)?;
            x[i] = v;
            d[i] = (up - down) / (2.0 * h);
        }
        Ok(d)
    }
}

/// Ground truth an attack is scored against.
#[derive(Debug, Clone, Copy)]
pub struct AttackTarget<'a> {
    /// The real sample, in the attacked model's input shape.
    pub truth: &'a Tensor,
    /// When set, only the kept cells count towards the MSE.
    pub region: Option<&'a PositionSecret>,
    /// Replaces the seeded uniform dummy.
    pub init: Option<&'a Tensor>,
}

impl<'a> AttackTarget<'a> {
    pub fn new(truth: &'a Tensor) -> Self {
        AttackTarget {
            truth,
            region: None,
            init: None,
        }
    }
}

/// Reconstructs one input from `victim` gradients by descending
/// ‖∇θL(x̂, label) − victim‖², halving the step until the objective does
/// not increase.
pub fn dlg_reconstruct(
    model: &ModelGraph,
    params: &ParamStore,
    victim: &ParamGrads,
    label: i64,
    cfg: &AttackConfig,
    target: AttackTarget<'_>,
) -> Result<AttackResult> {
    cfg.check()?;
    let AttackTarget { truth, region, init } = target;
    let net = Network::new(model.clone())?;
    let shape = model.input_spec.sample_shape();
    if truth.shape() != shape.as_slice() {
        return Err(Error::shape(format!(
            "ground truth {:?} does not match model input {shape:?}",
            truth.shape()
        )));
    }
    let mut x: Vec<f64> = match init {
        Some(t) => Array::<f64>::from_tensor(t)?.data,
        None => {
            let mut r = rng::stream(cfg.seed, "attack/init");
            (0..shape.iter().product::<usize>()).map(|_| r.random::<f64>()).collect()
        }
    };
    if x.len() != truth.numel() {
        return Err(Error::shape("initial dummy does not match model input"));
    }
    let obj = Objective {
        net: &net,
        params,
        victim,
        label,
        shape: shape.clone(),
    };
    let mut history = Vec::with_capacity(cfg.iterations);
    let mut f = obj.eval(&x)?;
    let mut step = cfg.step;
    for it in 0..cfg.iterations {
        if !f.is_finite() {
            return Err(Error::Attack {
                iterations: it,
                message: format!("objective became {f}; history {history:?}"),
            });
        }
        history.push(f);
        let d = obj.fd_gradient(&mut x, cfg.fd_step)?;
        let mut accepted = false;
        for _ in 0..40 {
            let cand: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a - step * b).collect();
            let fc = obj.eval(&cand)?;
            if fc <= f {
                x = cand;
                f = fc;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if accepted {
            step = (step * 2.0).min(cfg.step);
        }
    }
    let t = Array::<f64>::from_tensor(truth)?.data;
    let cells: Vec<usize> = match region {
        None => (0..t.len()).collect(),
        Some(secret) => {
            let plane: usize = shape[shape.len().saturating_sub(2)..].iter().product();
            let kept = secret.kept_cells();
            (0..t.len() / plane).flat_map(|c| kept.iter().map(move |&k| c * plane + k)).collect()
        }
    };
    let mse = cells.iter().map(|&i| (x[i] - t[i]).powi(2)).sum::<f64>() / cells.len() as f64;
    Ok(AttackResult {
        reconstruction: Tensor::from_f64(shape, x)?,
        label,
        iterations: history.len(),
        history,
        mse,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{synthetic_images, tiny_cnn};
    use crate::ir::init_params;

    fn sample(i: usize) -> (Array<f64>, i64) {
        let d = synthetic_images(i + 1, 14, 10, 7).unwrap();
        let x = Array::<f64>::from_tensor(d.samples()).unwrap();
        let n = 14 * 14;
        (Array::new(vec![1, 14, 14], x.data[i * n..(i + 1) * n].to_vec()).unwrap(), d.labels()[i])
    }

    #[test]
    fn bias_sign_rule() {
        assert_eq!(idlg_from_bias(&[0.2, -0.7, 0.5]).unwrap(), 1);
        assert_eq!(idlg_from_bias(&[0.2 * 3.0, -0.7 * 3.0, 0.5 * 3.0]).unwrap(), 1);
        assert!(matches!(idlg_from_bias(&[0.0, 0.0]), Err(Error::Ambiguous(_))));
    }

    #[test]
    fn idlg_recovers_labels() {
        let g = tiny_cnn();
        let net = Network::new(g.clone()).unwrap();
        for i in 0..20 {
            let p = init_params(&g, i as u64).unwrap();
            let (x, _) = sample(i);
            let y = (i % 10) as i64;
            let grads = sample_grads(&net, &p, &x, y).unwrap();
            assert_eq!(idlg_label(&grads, &g, 0).unwrap(), y);
        }
    }

    #[test]
    fn true_input_is_a_fixed_point() {
        let g = tiny_cnn();
        let p = init_params(&g, 1).unwrap();
        let (x, y) = sample(0);
        let victim = sample_grads(&Network::new(g.clone()).unwrap(), &p, &x, y).unwrap();
        let truth = x.to_tensor();
        let cfg = AttackConfig {
            iterations: 2,
            ..Default::default()
        };
        let target = AttackTarget {
            init: Some(&truth),
            ..AttackTarget::new(&truth)
        };
        let r = dlg_reconstruct(&g, &p, &victim, y, &cfg, target).unwrap();
        assert!(r.history[0] < 1e-20);
        assert!(r.mse < 1e-12);
        assert_eq!(r.history.len(), r.iterations);
    }

    #[test]
    fn objective_never_increases_and_is_seeded() {
        let g = tiny_cnn();
        let p = init_params(&g, 1).unwrap();
        let (x, y) = sample(1);
        let victim = sample_grads(&Network::new(g.clone()).unwrap(), &p, &x, y).unwrap();
        let cfg = AttackConfig {
            iterations: 5,
            ..Default::default()
        };
        let truth = x.to_tensor();
        let a = dlg_reconstruct(&g, &p, &victim, y, &cfg, AttackTarget::new(&truth)).unwrap();
        assert!(a.history.windows(2).all(|w| w[1] <= w[0]));
        let b = dlg_reconstruct(&g, &p, &victim, y, &cfg, AttackTarget::new(&truth)).unwrap();
        assert_eq!(a, b);
        assert!(a.history_csv().starts_with("iteration,objective\n0,"));
    }
}
