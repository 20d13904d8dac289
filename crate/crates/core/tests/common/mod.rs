//! Helpers shared by the integration and acceptance tests.
#![allow(dead_code)]

use std::cell::{Cell, RefCell};

use amalgam::engine::gradcheck::{check, check_inputs, random_leaves, GradCheck};
use amalgam::engine::{Graph, NodeId, OpKind};
use amalgam::rng;
use amalgam::Array;
use rand::seq::index::sample;
use rand::Rng;

pub const FD_STEP: f64 = 1e-5;
pub const SHAPES_PER_OP: usize = 5;

fn subset(r: &mut impl Rng, n: usize, k: usize) -> Vec<usize> {
    let mut v = sample(r, n, k).into_vec();
    v.sort_unstable();
    v
}

/// Max relative error of one op kind on one random shape.
pub fn check_op(kind: OpKind, case: u64) -> GradCheck {
    let mut r = rng::stream(case, &format!("opcase/{}", kind.name()));
    let seed = case * 1000 + kind as u64;
    let n = r.random_range(1..=3usize);
    let run = |shapes: &[Vec<usize>], f: &dyn Fn(&mut Graph<f64>, &[NodeId]) -> amalgam::Result<NodeId>| {
        check(&random_leaves(shapes, seed), seed, FD_STEP, f).unwrap()
    };
    match kind {
        OpKind::Input => {
            let shape = vec![n, r.random_range(1..6)];
            check_inputs(&random_leaves(&[shape], seed), seed, FD_STEP, |_, p| Ok(p[0])).unwrap()
        }
        OpKind::Parameter => run(&[vec![n, r.random_range(1..6), r.random_range(1..4)]], &|_, p| Ok(p[0])),
        OpKind::Linear => {
            let (i, o) = (r.random_range(1..7), r.random_range(1..6));
            let x = if r.random_bool(0.5) {
                vec![n, i]
            } else {
                vec![n, r.random_range(1..4), i]
            };
            run(&[x, vec![o, i], vec![o]], &|g, p| g.linear(p[0], p[1], p[2]))
        }
        OpKind::Conv2d | OpKind::SkipConv2d => {
            let (c, o, k) = (r.random_range(1..4), r.random_range(1..4), r.random_range(1..4));
            let (stride, padding) = (r.random_range(1..3), r.random_range(0..2));
            let (h, w) = (r.random_range(k..k + 4), r.random_range(k..k + 4));
            let leaves = [vec![n, c, h, w], vec![o, c, k, k], vec![o]];
            if kind == OpKind::Conv2d {
                run(&leaves, &move |g, p| g.conv2d(p[0], p[1], p[2], stride, padding))
            } else {
                let (ha, wa) = (h + r.random_range(1..4), w + r.random_range(1..4));
                let rows = subset(&mut r, ha, h);
                let cols = subset(&mut r, wa, w);
                let leaves = [vec![n, c, ha, wa], vec![o, c, k, k], vec![o]];
                run(&leaves, &move |g, p| g.skip_conv2d(p[0], p[1], p[2], &rows, &cols, stride, padding))
            }
        }
        OpKind::Embedding | OpKind::SkipEmbedding => {
            let (v, e, l) = (r.random_range(2..9), r.random_range(1..5), r.random_range(2..7));
            let ids: Vec<i64> = (0..n * l).map(|_| r.random_range(0..v as i64)).collect();
            let k = r.random_range(1..l);
            let skip = subset(&mut r, l, k);
            run(&[vec![v, e]], &move |g, p| {
                let t = g.input_ids(vec![n, l], &ids)?;
                if kind == OpKind::Embedding {
                    g.embedding(t, p[0])
                } else {
                    g.skip_embedding(t, p[0], &skip)
                }
            })
        }
        OpKind::Relu => run(&[vec![n, r.random_range(1..5), r.random_range(1..5)]], &|g, p| g.relu(p[0])),
        OpKind::MaxPool2d | OpKind::AvgPool2d => {
            let size = r.random_range(1..4);
            let shape = vec![n, r.random_range(1..3), r.random_range(size..size * 3 + 1), r.random_range(size..size * 3 + 1)];
            if kind == OpKind::MaxPool2d {
                run(&[shape], &move |g, p| g.maxpool2d(p[0], size))
            } else {
                run(&[shape], &move |g, p| g.avgpool2d(p[0], size))
            }
        }
        OpKind::Flatten => {
            let shape = vec![n, r.random_range(1..4), r.random_range(1..4), r.random_range(1..4)];
            run(&[shape], &|g, p| g.flatten(p[0]))
        }
        OpKind::Add => {
            let shape = vec![n, r.random_range(1..5)];
            let k = r.random_range(1..4);
            run(&vec![shape; k], &|g, p| g.add(p))
        }
        OpKind::MeanSeq => run(&[vec![n, r.random_range(1..6), r.random_range(1..5)]], &|g, p| g.mean_seq(p[0])),
        OpKind::SoftmaxXent => {
            let k = r.random_range(2..6);
            let labels: Vec<i64> = (0..n).map(|_| r.random_range(0..k as i64)).collect();
            run(&[vec![n, k]], &move |g, p| g.softmax_xent(p[0], &labels))
        }
        OpKind::Detach => {
            // Oracle: the detached branch is frozen at its unperturbed value.
            let shape = vec![n, r.random_range(1..5)];
            let calls = Cell::new(0usize);
            let frozen: RefCell<Option<Array<f64>>> = RefCell::new(None);
            run(&[shape.clone(), shape], &move |g, p| {
                let call = calls.get();
                calls.set(call + 1);
                let stopped = if call < 2 {
                    let d = g.detach(p[1])?;
                    *frozen.borrow_mut() = Some(g.value(d)?.clone());
                    d
                } else {
                    g.constant(frozen.borrow().clone().expect("recorded at the base point"))
                };
                let s = g.relu(p[1])?;
                g.add(&[p[0], stopped, s])
            })
        }
    }
}

/// Worst relative error per op kind over [`SHAPES_PER_OP`] shapes.
pub fn op_suite() -> Vec<(OpKind, f64)> {
    OpKind::ALL
        .iter()
        .map(|&k| {
            let worst = (0..SHAPES_PER_OP as u64).map(|c| check_op(k, c).max_rel_err).fold(0.0, f64::max);
            (k, worst)
        })
        .collect()
}
