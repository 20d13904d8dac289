//! Central finite-difference checks of tape gradients.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{ExecMode, Graph, NodeId};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Array;

/// Outcome of [`check`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    /// Largest `|analytic − numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_err: f64,
    pub entries: usize,
}

/// Denominator floor of the relative error.
pub const REL_FLOOR: f64 = 1e-5;

/// Leaves drawn from N(0, 1) with the given shapes.
pub fn random_leaves(shapes: &[Vec<usize>], seed: u64) -> Vec<Array<f64>> {
    let mut r = rng::stream(seed, "gradcheck/leaves");
    shapes
        .iter()
        .map(|s| {
            let n = s.iter().product();
            let data = (0..n).map(|_| StandardNormal.sample(&mut r)).collect();
            Array::new(s.clone(), data).expect("shape matches data")
        })
        .collect()
}

struct Reducer {
    weight: Array<f64>,
    bias: Array<f64>,
    labels: Vec<i64>,
}

impl Reducer {
    fn new(out_shape: &[usize], seed: u64) -> Self {
        let (n, d) = match out_shape {
            [] => (1, 1),
            [n, rest @ ..] => (*n, rest.iter().product::<usize>().max(1)),
        };
        let k = 3;
        let mut r = rng::stream(seed, "gradcheck/reducer");
        let weight = (0..k * d).map(|_| StandardNormal.sample(&mut r)).collect();
        let bias = (0..k).map(|_| StandardNormal.sample(&mut r)).collect();
        Reducer {
            weight: Array::new(vec![k, d], weight).expect("reducer shape"),
            bias: Array::new(vec![k], bias).expect("reducer shape"),
            labels: (0..n).map(|_| r.random_range(0..k as i64)).collect(),
        }
    }

    /// Smooth scalar of every entry of `out`.
    fn reduce(&self, g: &mut Graph<f64>, out: NodeId) -> Result<NodeId> {
        let shape = g.value(out)?.shape.clone();
        let flat = if shape.len() == 2 { out } else { g.flatten(out)? };
        let w = g.constant(self.weight.clone());
        let b = g.constant(self.bias.clone());
        let z = g.linear(flat, w, b)?;
        g.softmax_xent(z, &self.labels)
    }
}

/// Compares reverse-mode gradients of `build`'s output with central
/// differences of step `h` over every leaf entry. `build` receives one
/// parameter node per leaf and returns the node under test. It is called
/// twice at the unperturbed leaves before any perturbed call.
pub fn check<B>(leaves: &[Array<f64>], seed: u64, h: f64, build: B) -> Result<GradCheck>
where
    B: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    check_leaves(leaves, seed, h, false, build)
}

/// [`check`] with leaves recorded as gradient-requiring inputs.
pub fn check_inputs<B>(leaves: &[Array<f64>], seed: u64, h: f64, build: B) -> Result<GradCheck>
where
    B: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    check_leaves(leaves, seed, h, true, build)
}

fn check_leaves<B>(leaves: &[Array<f64>], seed: u64, h: f64, as_inputs: bool, build: B) -> Result<GradCheck>
where
    B: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    let record = |vals: &[Array<f64>], reducer: Option<&Reducer>| -> Result<(Graph<f64>, Vec<NodeId>, NodeId)> {
        let mut g = Graph::new(ExecMode::Sequential);
        let ids: Vec<NodeId> = vals
            .iter()
            .map(|v| {
                if as_inputs {
                    g.input(v.clone(), true)
                } else {
                    g.parameter(v.clone())
                }
            })
            .collect();
        let out = build(&mut g, &ids)?;
        let loss = match reducer {
            Some(r) => r.reduce(&mut g, out)?,
            None => out,
        };
        Ok((g, ids, loss))
    };
    let (probe, _, out) = record(leaves, None)?;
    let reducer = Reducer::new(&probe.value(out)?.shape, seed);
    let (g, ids, loss) = record(leaves, Some(&reducer))?;
    let grads = g.backward(loss)?;

    let eval = |vals: &[Array<f64>]| -> Result<f64> {
        let (g, _, loss) = record(vals, Some(&reducer))?;
        g.scalar(loss)
    };
    let mut vals = leaves.to_vec();
    let mut worst = 0.0f64;
    let mut entries = 0;
    for (li, &id) in ids.iter().enumerate() {
        let analytic = grads
            .get(id)
            .ok_or_else(|| Error::internal(format!("leaf {li} has no gradient")))?
            .data
            .clone();
        for (i, &a) in analytic.iter().enumerate() {
            let v = vals[li].data[i];
            vals[li].data[i] = v + h;
            let up = eval(&vals)?;
            vals[li].data[i] = v - h;
            let down = eval(&vals)?;
            vals[li].data[i] = v;
            let n = (up - down) / (2.0 * h);
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR);
            worst = worst.max(rel);
            entries += 1;
        }
    }
    Ok(GradCheck {
        max_rel_err: worst,
        entries,
    })
}
