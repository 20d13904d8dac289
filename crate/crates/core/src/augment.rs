//! Model augmenter: hides a chain model among decoy sub-networks.
//!
//! Every sub-network (the original and each decoy) starts with a
//! skip-input layer and ends in its own head. Decoys mirror the original's
//! layer kinds at reduced width, sized so the whole model has about
//! `P (1 + alpha)` parameters. Original activations may feed decoys, always
//! through a grad-stop edge with a shape adapter; nothing flows back.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{complement, NoiseConfig, NoiseKind, PositionSecret};
use crate::error::{Error, Result};
use crate::ir::params::{fan_in, init_layer};
use crate::ir::{arch_digest, infer_shape, EdgeSpec, InputSpec, LayerOp, LayerSpec, ModelGraph, ParamKey, ParamStore};
use crate::rng;
use crate::secret::{DecoyKeep, SecretBundle};
use crate::tensor::Tensor;

pub const DEFAULT_SUBNETS: usize = 3;
pub const DEFAULT_CROSS_LINKS: usize = 1;

/// Sizing of one decoy sub-network.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoyPlan {
    /// Output width per chain position (`None` for parameter-free layers).
    pub widths: Vec<Option<usize>>,
    /// Chain positions whose original output feeds this decoy.
    pub links: Vec<usize>,
    /// Parameters of the decoy including its adapters.
    pub param_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationPlan {
    pub alpha: f64,
    pub subnets: usize,
    /// `round(alpha * P)`.
    pub target: usize,
    pub budgets: Vec<usize>,
    pub decoys: Vec<DecoyPlan>,
    /// Law for decoy parameters; `Uniform` means the ordinary init law.
    pub noise: NoiseConfig,
    pub cross_link_count: usize,
    pub seed: u64,
}

impl AugmentationPlan {
    pub fn added_params(&self) -> usize {
        self.decoys.iter().map(|d| d.param_count).sum()
    }
}

/// A validated single-chain model.
struct Chain {
    /// Layer indices: input first, head last.
    idx: Vec<usize>,
    ops: Vec<LayerOp>,
    /// Per-sample output shape at each position.
    shapes: Vec<Vec<usize>>,
    classes: usize,
}

fn chain(graph: &ModelGraph) -> Result<Chain> {
    let info = graph.validate()?;
    let not_chain = |why: &str| Error::arg(format!("model augmentation needs a single-chain model: {why}"));
    if graph.heads.len() != 1 {
        return Err(not_chain("more than one head"));
    }
    if graph.edges.iter().any(|e| e.grad_stop || e.adapter.is_some()) {
        return Err(not_chain("grad-stop or adapter edges present"));
    }
    let mut next: HashMap<usize, usize> = HashMap::new();
    for e in &graph.edges {
        let (s, d) = (info.index[&e.src], info.index[&e.dst]);
        if next.insert(s, d).is_some() {
            return Err(not_chain(&format!("layer `{}` has several consumers", e.src)));
        }
    }
    let mut idx = vec![info.input];
    while let Some(&n) = next.get(idx.last().unwrap()) {
        idx.push(n);
    }
    if idx.len() != graph.layers.len() || graph.layers[*idx.last().unwrap()].id != graph.heads[0] {
        return Err(not_chain("layers do not form one path ending at the head"));
    }
    let ops: Vec<LayerOp> = idx.iter().map(|&i| graph.layers[i].op.clone()).collect();
    if ops
        .iter()
        .any(|o| matches!(o, LayerOp::SkipConv2d { .. } | LayerOp::SkipEmbedding { .. } | LayerOp::Add))
    {
        return Err(not_chain("original may not contain skip or add layers"));
    }
    let shapes = idx.iter().map(|&i| info.shapes[i].clone()).collect();
    Ok(Chain {
        idx,
        ops,
        shapes,
        classes: graph.num_classes()?,
    })
}

fn width_of(op: &LayerOp) -> Option<usize> {
    match *op {
        LayerOp::Conv2d { out_channels, .. } => Some(out_channels),
        LayerOp::Linear { out_features, .. } => Some(out_features),
        LayerOp::Embedding { dim, .. } => Some(dim),
        _ => None,
    }
}

/// Decoy ops for the given widths, with per-position output shapes.
fn decoy_ops(c: &Chain, spec: &InputSpec, widths: &[Option<usize>]) -> Result<(Vec<LayerOp>, Vec<Vec<usize>>)> {
    let last = c.ops.len() - 1;
    let mut ops = vec![LayerOp::Input];
    let mut shapes = vec![c.shapes[0].clone()];
    for i in 1..c.ops.len() {
        let prev = &shapes[i - 1];
        let w = if i == last { Some(c.classes) } else { widths[i] };
        let op = match (&c.ops[i], w) {
            (
                LayerOp::Conv2d {
                    kernel, stride, padding, ..
                },
                Some(w),
            ) => LayerOp::Conv2d {
                in_channels: prev[0],
                out_channels: w,
                kernel: *kernel,
                stride: *stride,
                padding: *padding,
            },
            (LayerOp::Linear { .. }, Some(w)) => LayerOp::Linear {
                in_features: *prev.last().unwrap(),
                out_features: w,
            },
            (LayerOp::Embedding { vocab, .. }, Some(w)) => LayerOp::Embedding { vocab: *vocab, dim: w },
            (other, _) => other.clone(),
        };
        let s = infer_shape(&op, std::slice::from_ref(prev), spec).map_err(|m| Error::internal(format!("decoy layer {i}: {m}")))?;
        ops.push(op);
        shapes.push(s);
    }
    Ok((ops, shapes))
}

/// Projection from an original activation shape to a decoy one, if the
/// two differ only in their feature axis.
fn adapter_op(orig: &[usize], decoy: &[usize]) -> Option<LayerOp> {
    match (orig, decoy) {
        ([co, ho, wo], [cd, hd, wd]) if (ho, wo) == (hd, wd) => Some(LayerOp::Conv2d {
            in_channels: *co,
            out_channels: *cd,
            kernel: 1,
            stride: 1,
            padding: 0,
        }),
        ([lo, eo], [ld, ed]) if lo == ld => Some(LayerOp::Linear {
            in_features: *eo,
            out_features: *ed,
        }),
        ([fo], [fd]) => Some(LayerOp::Linear {
            in_features: *fo,
            out_features: *fd,
        }),
        _ => None,
    }
}

fn op_params(op: &LayerOp) -> usize {
    op.param_shapes().values().map(|s| s.iter().product::<usize>()).sum()
}

fn decoy_cost(c: &Chain, spec: &InputSpec, widths: &[Option<usize>], links: &[usize]) -> Result<usize> {
    let (ops, shapes) = decoy_ops(c, spec, widths)?;
    let mut total: usize = ops.iter().map(op_params).sum();
    for &p in links {
        let a = adapter_op(&c.shapes[p], &shapes[p]).ok_or_else(|| Error::internal(format!("no adapter at position {p}")))?;
        total += op_params(&a);
    }
    Ok(total)
}

fn scaled(c: &Chain, m: f64) -> Vec<Option<usize>> {
    c.ops.iter()
        .map(|op| width_of(op).map(|w| ((w as f64 * m).round() as usize).max(1)))
        .collect()
}

/// Positions whose width may be tuned (all parameterized layers but the head).
fn tunable(c: &Chain) -> Vec<usize> {
    (1..c.ops.len() - 1).filter(|&i| width_of(&c.ops[i]).is_some()).collect()
}

/// Multiplier search: the uniform width scale whose cost is closest to `budget`.
fn fit_multiplier(c: &Chain, spec: &InputSpec, links: &[usize], budget: usize) -> Result<Vec<Option<usize>>> {
    let cost = |m: f64| decoy_cost(c, spec, &scaled(c, m), links);
    let mut hi = 1.0;
    while cost(hi)? < budget && hi < 1e6 {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if cost(mid)? < budget {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let dist = |m: f64| -> Result<usize> { Ok(cost(m)?.abs_diff(budget)) };
    let m = if dist(lo)? <= dist(hi)? { lo } else { hi };
    Ok(scaled(c, m))
}

/// Width of position `k` (others fixed) whose decoy cost is closest to
/// `goal`; cost is monotone in every width.
fn solve_width(c: &Chain, spec: &InputSpec, ws: &mut [Option<usize>], links: &[usize], k: usize, goal: usize) -> Result<usize> {
    let cost_at = |w: usize, ws: &mut [Option<usize>]| {
        ws[k] = Some(w);
        decoy_cost(c, spec, ws, links)
    };
    let (mut lo, mut hi) = (1usize, 2usize);
    while cost_at(hi, ws)? < goal && hi < 1 << 24 {
        lo = hi;
        hi *= 2;
    }
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if cost_at(mid, ws)? < goal {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let (cl, ch) = (cost_at(lo, ws)?, cost_at(hi, ws)?);
    let w = if cl.abs_diff(goal) <= ch.abs_diff(goal) { lo } else { hi };
    cost_at(w, ws)
}

/// Local search across all decoys until the summed cost stops approaching
/// `target`. A move shifts one width by up to +-3 and then re-solves
/// another width exactly.
fn refine(c: &Chain, spec: &InputSpec, decoys: &mut [DecoyPlan], target: usize) -> Result<()> {
    let tune = tunable(c);
    for d in decoys.iter_mut() {
        d.param_count = decoy_cost(c, spec, &d.widths, &d.links)?;
    }
    let mut total: usize = decoys.iter().map(|d| d.param_count).sum();
    for _ in 0..200 {
        if total == target {
            break;
        }
        let mut best: Option<(usize, usize, Vec<Option<usize>>, usize)> = None;
        for (j, d) in decoys.iter().enumerate() {
            let rest = total - d.param_count;
            let goal = target.saturating_sub(rest);
            for &i in &tune {
                for di in -3i64..=3 {
                    let ni = d.widths[i].unwrap() as i64 + di;
                    if ni < 1 {
                        continue;
                    }
                    for &k in &tune {
                        if k == i && di != 0 {
                            continue;
                        }
                        let mut ws = d.widths.clone();
                        ws[i] = Some(ni as usize);
                        let cost = solve_width(c, spec, &mut ws, &d.links, k, goal)?;
                        let new_total = rest + cost;
                        let bar = best.as_ref().map_or(total.abs_diff(target), |b| b.3.abs_diff(target));
                        if new_total.abs_diff(target) < bar {
                            best = Some((j, cost, ws, new_total));
                        }
                    }
                }
            }
        }
        match best {
            Some((j, cost, ws, new_total)) => {
                decoys[j].widths = ws;
                decoys[j].param_count = cost;
                total = new_total;
            }
            None => break,
        }
    }
    Ok(())
}

/// Sizes `s` decoys for `alpha` with default cross-linking and init law.
pub fn plan_subnets(graph: &ModelGraph, alpha: f64, s: usize, seed: u64) -> Result<AugmentationPlan> {
    plan_subnets_with(graph, alpha, s, seed, DEFAULT_CROSS_LINKS, NoiseConfig::uniform(rng::derive(seed, "decoy-noise")))
}

pub fn plan_subnets_with(
    graph: &ModelGraph,
    alpha: f64,
    s: usize,
    seed: u64,
    cross_link_count: usize,
    noise: NoiseConfig,
) -> Result<AugmentationPlan> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::arg(format!("alpha must be a finite value >= 0, got {alpha}")));
    }
    let c = chain(graph)?;
    let p = graph.param_count();
    let target = (alpha * p as f64).round() as usize;
    let mut plan = AugmentationPlan {
        alpha,
        subnets: 0,
        target,
        budgets: Vec::new(),
        decoys: Vec::new(),
        noise,
        cross_link_count,
        seed,
    };
    if alpha == 0.0 {
        return Ok(plan);
    }
    if s == 0 {
        return Err(Error::arg("at least one decoy sub-network is required when alpha > 0"));
    }
    let spec = &graph.input_spec;
    let mut r = rng::stream(seed, "plan");

    // Per-decoy budgets with +-20% jitter, summing to the target.
    let weights: Vec<f64> = (0..s).map(|_| r.random_range(0.8..1.2)).collect();
    let wsum: f64 = weights.iter().sum();
    let mut budgets: Vec<usize> = weights.iter().map(|w| (target as f64 * w / wsum).round() as usize).collect();
    let drift = budgets.iter().sum::<usize>() as i64 - target as i64;
    budgets[0] = (budgets[0] as i64 - drift).max(0) as usize;

    let minimal: Vec<Option<usize>> = c.ops.iter().map(|o| width_of(o).map(|_| 1)).collect();
    let min_cost = decoy_cost(&c, spec, &minimal, &[])?;
    if budgets.iter().any(|&b| b < min_cost) {
        return Err(Error::arg(format!(
            "alpha * P = {target} parameters cannot hold {s} decoys of at least {min_cost} parameters each; use fewer sub-networks"
        )));
    }

    let candidates: Vec<usize> = (1..c.ops.len() - 1).collect();
    for &b in &budgets {
        let widths = fit_multiplier(&c, spec, &[], b)?;
        let (_, shapes) = decoy_ops(&c, spec, &widths)?;
        // Cheapest half of the compatible positions, then a seeded pick.
        let mut costed: Vec<(usize, usize)> = candidates
            .iter()
            .filter_map(|&pos| adapter_op(&c.shapes[pos], &shapes[pos]).map(|a| (op_params(&a), pos)))
            .collect();
        costed.sort();
        let pool = costed.len().div_ceil(2).max(cross_link_count.min(costed.len()));
        let mut pool: Vec<usize> = costed[..pool].iter().map(|&(_, pos)| pos).collect();
        pool.shuffle(&mut r);
        let mut links: Vec<usize> = pool.into_iter().take(cross_link_count).collect();
        links.sort_unstable();
        let mut widths = fit_multiplier(&c, spec, &links, b)?;
        // Links chosen on the link-free fit must stay shape-compatible.
        let (_, shapes) = decoy_ops(&c, spec, &widths)?;
        if links.iter().any(|&p| adapter_op(&c.shapes[p], &shapes[p]).is_none()) {
            links.clear();
            widths = fit_multiplier(&c, spec, &links, b)?;
        }
        let param_count = decoy_cost(&c, spec, &widths, &links)?;
        plan.decoys.push(DecoyPlan {
            widths,
            links,
            param_count,
        });
    }
    refine(&c, spec, &mut plan.decoys, target)?;
    plan.subnets = s;
    plan.budgets = budgets;
    Ok(plan)
}

/// Result of [`augment_model`].
#[derive(Debug, Clone)]
pub struct Augmented {
    pub graph: ModelGraph,
    pub params: ParamStore,
    pub bundle: SecretBundle,
}

struct Proto {
    id: String,
    op: LayerOp,
}

fn skip_variant(op: &LayerOp, keep: &Keep) -> Result<LayerOp> {
    Ok(match (op, keep) {
        (
            LayerOp::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            },
            Keep::Grid { rows, cols },
        ) => LayerOp::SkipConv2d {
            in_channels: *in_channels,
            out_channels: *out_channels,
            kernel: *kernel,
            stride: *stride,
            padding: *padding,
            keep_rows: rows.clone(),
            keep_cols: cols.clone(),
        },
        (LayerOp::Embedding { vocab, dim }, Keep::Seq { skip }) => LayerOp::SkipEmbedding {
            vocab: *vocab,
            dim: *dim,
            skip_positions: skip.clone(),
        },
        (_, Keep::None) => op.clone(),
        (other, _) => {
            return Err(Error::arg(format!(
                "the first layer must be conv2d (images) or embedding (text) to skip inserted positions, found {}",
                other.kind()
            )))
        }
    })
}

enum Keep {
    Grid { rows: Vec<usize>, cols: Vec<usize> },
    Seq { skip: Vec<usize> },
    None,
}

fn random_subset(r: &mut rng::StreamRng, n: usize, k: usize) -> Vec<usize> {
    let mut v = rand::seq::index::sample(r, n, k).into_vec();
    v.sort_unstable();
    v
}

/// Weights for a decoy or adapter layer drawn from `noise`.
fn init_decoy(store: &mut ParamStore, id: &str, proto: &str, op: &LayerOp, noise: &NoiseConfig, file: &mut FileCursor) -> Result<()> {
    match noise.kind {
        NoiseKind::Uniform => {
            let mut tmp = ParamStore::new();
            init_layer(&mut tmp, proto, op, noise.seed)?;
            for (k, t) in tmp.as_map() {
                store.insert(ParamKey::new(id, &k.name), t.clone());
            }
        }
        kind => {
            let shapes = op.param_shapes();
            let Some(ws) = shapes.get("weight") else { return Ok(()) };
            let n: usize = ws.iter().product();
            let scale = noise.param.unwrap_or((1.0 / fan_in(op) as f64).sqrt());
            let mut r = rng::stream(noise.seed, &format!("decoy-init/{proto}"));
            let w: Vec<f32> = match kind {
                NoiseKind::Gaussian => {
                    let d = Normal::new(0.0, scale).map_err(|e| Error::arg(e.to_string()))?;
                    (0..n).map(|_| d.sample(&mut r) as f32).collect()
                }
                NoiseKind::Laplace => (0..n)
                    .map(|_| {
                        let u: f64 = r.random::<f64>() - 0.5;
                        (-scale * u.signum() * (1.0 - 2.0 * u.abs()).max(f64::MIN_POSITIVE).ln()) as f32
                    })
                    .collect(),
                _ => file.take(n)?.into_iter().map(|v| v as f32).collect(),
            };
            store.insert(ParamKey::new(id, "weight"), Tensor::from_f32(ws.clone(), w)?);
            if let Some(bs) = shapes.get("bias") {
                store.insert(ParamKey::new(id, "bias"), Tensor::zeros(bs.clone(), crate::tensor::DType::F32)?);
            }
        }
    }
    Ok(())
}

/// Sequential reader over the values of a parameter noise file.
struct FileCursor {
    values: Vec<f64>,
    pos: usize,
}

impl FileCursor {
    fn take(&mut self, n: usize) -> Result<Vec<f64>> {
        if self.pos + n > self.values.len() {
            return Err(Error::arg(format!(
                "parameter file holds {} values, more than that are required",
                self.values.len()
            )));
        }
        let v = self.values[self.pos..self.pos + n].to_vec();
        self.pos += n;
        Ok(v)
    }
}

/// Builds the augmented model `M'`, its parameters and the secret bundle.
pub fn augment_model(
    graph: &ModelGraph,
    params: &ParamStore,
    plan: &AugmentationPlan,
    positions: Option<&PositionSecret>,
) -> Result<Augmented> {
    let c = chain(graph)?;
    params.validate(graph)?;
    if plan.decoys.len() != plan.subnets {
        return Err(Error::arg("plan decoy count does not match its sub-network count"));
    }

    // Augmented input and the original's keep sets.
    let (aug_spec, orig_keep) = match (&graph.input_spec, positions) {
        (InputSpec::Vector { .. }, None) => (graph.input_spec.clone(), Keep::None),
        (InputSpec::Vector { .. }, Some(_)) => return Err(Error::arg("vector models take no position secret")),
        (_, None) => return Err(Error::arg("image and text models need the dataset's position secret")),
        (
            InputSpec::Image {
                channels,
                height,
                width,
            },
            Some(PositionSecret::Image {
                original,
                augmented,
                kept_rows,
                kept_cols,
                ..
            }),
        ) => {
            if [*height, *width] != *original {
                return Err(Error::arg(format!(
                    "model input {height}x{width} does not match secret dims {}x{}",
                    original[0], original[1]
                )));
            }
            (
                InputSpec::Image {
                    channels: *channels,
                    height: augmented[0],
                    width: augmented[1],
                },
                Keep::Grid {
                    rows: kept_rows.clone(),
                    cols: kept_cols.clone(),
                },
            )
        }
        (
            InputSpec::Text { length, vocab },
            Some(p @ PositionSecret::Text {
                original_len,
                augmented_len,
                ..
            }),
        ) => {
            if length != original_len {
                return Err(Error::arg(format!(
                    "model sequence length {length} does not match secret length {original_len}"
                )));
            }
            (
                InputSpec::Text {
                    length: *augmented_len,
                    vocab: *vocab,
                },
                Keep::Seq {
                    skip: p.skip_positions().unwrap(),
                },
            )
        }
        _ => return Err(Error::arg("position secret modality does not match the model input")),
    };

    let mut r = rng::stream(plan.seed, "augment");
    let mut protos: Vec<Proto> = Vec::new();
    let mut edges: Vec<EdgeSpec> = Vec::new();
    let mut proto_params = ParamStore::new();
    let orig_ids: Vec<String> = c.idx.iter().map(|&i| graph.layers[i].id.clone()).collect();
    let op_id = |s: &str| format!("o:{s}");

    // Original sub-network.
    protos.push(Proto {
        id: "input".into(),
        op: LayerOp::Input,
    });
    let mut prev = "input".to_string();
    for (pos, id) in orig_ids.iter().enumerate().skip(1) {
        let op = if pos == 1 { skip_variant(&c.ops[1], &orig_keep)? } else { c.ops[pos].clone() };
        let pid = op_id(id);
        for (k, t) in params.layer(id) {
            proto_params.insert(ParamKey::new(&pid, &k.name), t.clone());
        }
        protos.push(Proto { id: pid.clone(), op });
        edges.push(EdgeSpec::plain(prev, pid.clone()));
        prev = pid;
    }
    let mut heads = vec![prev.clone()];

    // Decoys.
    let mut file = FileCursor {
        values: match plan.noise.kind {
            NoiseKind::File => {
                let path = plan.noise.file.as_ref().ok_or_else(|| Error::arg("file noise needs a path"))?;
                crate::data::sample_noise(&plan.noise, 0, (0.0, 0.0))?;
                let a = crate::ir::archive::Archive::read(path)?;
                a.records()
                    .iter()
                    .map(|(_, t)| t)
                    .find(|t| t.dtype().is_float())
                    .map(|t| t.to_f64_vec())
                    .unwrap_or_default()
            }
            _ => Vec::new(),
        },
        pos: 0,
    };
    let mut decoy_keeps: Vec<(String, Keep)> = Vec::new();
    for (j, d) in plan.decoys.iter().enumerate() {
        let (ops, shapes) = decoy_ops(&c, &graph.input_spec, &d.widths)?;
        let mut kr = rng::stream(plan.seed, &format!("decoy/{j}/keep"));
        let keep = match (&orig_keep, &aug_spec) {
            (Keep::Grid { rows, cols }, InputSpec::Image { height, width, .. }) => Keep::Grid {
                rows: random_subset(&mut kr, *height, rows.len()),
                cols: random_subset(&mut kr, *width, cols.len()),
            },
            (Keep::Seq { skip }, InputSpec::Text { length, .. }) => Keep::Seq {
                skip: random_subset(&mut kr, *length, skip.len()),
            },
            _ => Keep::None,
        };
        let mut prev = "input".to_string();
        for pos in 1..ops.len() {
            let pid = format!("d{j}:{pos}");
            let op = if pos == 1 { skip_variant(&ops[1], &keep)? } else { ops[pos].clone() };
            init_decoy(&mut proto_params, &pid, &pid, &op, &plan.noise, &mut file)?;
            protos.push(Proto { id: pid.clone(), op });
            edges.push(EdgeSpec::plain(prev, pid.clone()));
            prev = pid;
            if d.links.contains(&pos) {
                let add = format!("d{j}:add{pos}");
                let ad = format!("d{j}:ad{pos}");
                let aop = adapter_op(&c.shapes[pos], &shapes[pos]).ok_or_else(|| {
                    Error::internal(format!("adapter shape inference failed on edge {} -> {add}", op_id(&orig_ids[pos])))
                })?;
                init_decoy(&mut proto_params, &ad, &ad, &aop, &plan.noise, &mut file)?;
                protos.push(Proto { id: ad.clone(), op: aop });
                protos.push(Proto {
                    id: add.clone(),
                    op: LayerOp::Add,
                });
                edges.push(EdgeSpec::plain(prev, add.clone()));
                edges.push(EdgeSpec {
                    src: op_id(&orig_ids[pos]),
                    dst: add.clone(),
                    grad_stop: true,
                    adapter: Some(ad),
                });
                prev = add;
            }
        }
        if let Keep::Grid { .. } | Keep::Seq { .. } = keep {
            decoy_keeps.push((format!("d{j}:1"), keep));
        }
        heads.push(prev);
    }

    // Relabel every id through a seeded permutation.
    let mut perm: Vec<usize> = (0..protos.len()).collect();
    perm.shuffle(&mut r);
    let digits = protos.len().to_string().len();
    let rename: HashMap<String, String> = protos
        .iter()
        .zip(&perm)
        .map(|(p, &k)| (p.id.clone(), format!("n{k:0digits$}")))
        .collect();

    // Random topological emission order; adapters dropped in anywhere.
    let adapters: BTreeSet<&str> = edges.iter().filter_map(|e| e.adapter.as_deref()).collect();
    let pos_of: HashMap<&str, usize> = protos.iter().enumerate().map(|(i, p)| (p.id.as_str(), i)).collect();
    let mut indeg = vec![0usize; protos.len()];
    let mut succ = vec![Vec::new(); protos.len()];
    for e in &edges {
        indeg[pos_of[e.dst.as_str()]] += 1;
        succ[pos_of[e.src.as_str()]].push(pos_of[e.dst.as_str()]);
    }
    let mut ready: Vec<usize> = (0..protos.len())
        .filter(|&i| indeg[i] == 0 && !adapters.contains(protos[i].id.as_str()))
        .collect();
    let mut order = Vec::with_capacity(protos.len());
    while !ready.is_empty() {
        let k = r.random_range(0..ready.len());
        let i = ready.swap_remove(k);
        order.push(i);
        for &d in &succ[i] {
            indeg[d] -= 1;
            if indeg[d] == 0 {
                ready.push(d);
            }
        }
    }
    for a in &adapters {
        let at = r.random_range(0..=order.len());
        order.insert(at, pos_of[a]);
    }
    let rank: HashMap<usize, usize> = order.iter().enumerate().map(|(r, &i)| (i, r)).collect();

    let mut layers = Vec::with_capacity(protos.len());
    for &i in &order {
        layers.push(LayerSpec::new(&rename[&protos[i].id], protos[i].op.clone()));
    }
    let mut edges_out: Vec<(usize, EdgeSpec)> = edges
        .iter()
        .map(|e| {
            (
                rank[&pos_of[e.dst.as_str()]],
                EdgeSpec {
                    src: rename[&e.src].clone(),
                    dst: rename[&e.dst].clone(),
                    grad_stop: e.grad_stop,
                    adapter: e.adapter.as_ref().map(|a| rename[a].clone()),
                },
            )
        })
        .collect();
    edges_out.sort_by_key(|(k, _)| *k);

    let mut head_order: Vec<usize> = (0..heads.len()).collect();
    head_order.shuffle(&mut r);
    let original_head_index = head_order.iter().position(|&h| h == 0).unwrap();

    let aug = ModelGraph {
        version: graph.version.clone(),
        input_spec: aug_spec,
        layers,
        edges: edges_out.into_iter().map(|(_, e)| e).collect(),
        heads: head_order.iter().map(|&h| rename[&heads[h]].clone()).collect(),
    };
    aug.validate().map_err(|e| Error::internal(format!("augmented graph is invalid: {e}")))?;

    let mut aug_params = ParamStore::new();
    for (k, t) in proto_params.iter() {
        aug_params.insert(ParamKey::new(&rename[&k.layer], &k.name), t.clone());
    }
    aug_params.validate(&aug)?;

    let mut bundle = SecretBundle {
        positions: positions.cloned(),
        layer_map: orig_ids
            .iter()
            .enumerate()
            .map(|(pos, id)| {
                let proto = if pos == 0 { "input".to_string() } else { op_id(id) };
                (id.clone(), rename[&proto].clone())
            })
            .collect(),
        original_head_index: Some(original_head_index),
        decoy_keep_sets: Vec::new(),
        seeds: BTreeMap::from([("model".to_string(), plan.seed), ("decoy_noise".to_string(), plan.noise.seed)]),
        original_arch_sha256: Some(arch_digest(graph)?),
    };
    for (proto, keep) in decoy_keeps {
        let (keep_rows, keep_cols, skip_positions) = match keep {
            Keep::Grid { rows, cols } => (rows, cols, Vec::new()),
            Keep::Seq { skip } => (Vec::new(), Vec::new(), skip),
            Keep::None => continue,
        };
        bundle.decoy_keep_sets.push(DecoyKeep {
            layer: rename[&proto].clone(),
            keep_rows,
            keep_cols,
            skip_positions,
        });
    }
    bundle.decoy_keep_sets.sort_by(|a, b| a.layer.cmp(&b.layer));
    Ok(Augmented {
        graph: aug,
        params: aug_params,
        bundle,
    })
}

/// Summary of [`audit_isolation`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuditReport {
    pub original_layers: usize,
    pub decoy_heads: usize,
    pub grad_stop_edges: usize,
}

/// Checks that no gradient can flow from a decoy head into an original
/// parameter: every edge leaving the original sub-network is grad-stopped,
/// no edge enters it from outside, and original-internal edges are plain.
pub fn audit_isolation(graph: &ModelGraph, bundle: &SecretBundle) -> Result<AuditReport> {
    let info = graph.validate()?;
    if let Some(missing) = bundle.layer_map.values().find(|id| !info.index.contains_key(id.as_str())) {
        return Err(Error::graph(format!("secret maps to unknown layer `{missing}`")));
    }
    // The shared input layer carries no parameters and belongs to no sub-network.
    let orig: BTreeSet<&str> = bundle
        .layer_map
        .values()
        .map(String::as_str)
        .filter(|id| graph.layers[info.index[*id]].op != LayerOp::Input)
        .collect();
    let head = bundle
        .original_head_index
        .and_then(|h| graph.heads.get(h))
        .ok_or_else(|| Error::graph("original head index out of range"))?;
    if !orig.contains(head.as_str()) {
        return Err(Error::graph("original head is not an original layer"));
    }
    let mut stops = 0;
    for e in graph.edges.iter().filter(|e| info.index[&e.src] != info.input) {
        let (s, d) = (orig.contains(e.src.as_str()), orig.contains(e.dst.as_str()));
        match (s, d) {
            (true, true) if e.grad_stop || e.adapter.is_some() => {
                return Err(Error::graph(format!("original edge {} -> {} is not plain", e.src, e.dst)))
            }
            (true, false) if !e.grad_stop => {
                return Err(Error::graph(format!(
                    "edge {} -> {} leaves the original sub-network without a grad stop",
                    e.src, e.dst
                )))
            }
            (true, false) => stops += 1,
            (false, true) => {
                return Err(Error::graph(format!("edge {} -> {} feeds an original layer", e.src, e.dst)))
            }
            _ => {}
        }
    }
    Ok(AuditReport {
        original_layers: orig.len(),
        decoy_heads: graph.heads.len() - 1,
        grad_stop_edges: stops,
    })
}

/// Keep sets of every skip-input layer in `graph`, for diagnostics.
pub fn skip_layers(graph: &ModelGraph) -> Vec<(String, Vec<usize>)> {
    graph
        .layers
        .iter()
        .filter_map(|l| match &l.op {
            LayerOp::SkipConv2d { keep_rows, .. } => Some((l.id.clone(), keep_rows.clone())),
            LayerOp::SkipEmbedding { skip_positions, .. } => Some((l.id.clone(), skip_positions.clone())),
            _ => None,
        })
        .collect()
}

/// Skipped positions along one axis for a kept set.
pub fn skipped(kept: &[usize], n: usize) -> Vec<usize> {
    complement(kept, n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_secret, Dataset, DatasetMeta, Modality};
    use crate::ir::init_params;

    fn lenet_like() -> ModelGraph {
        ModelGraph::sequential(
            InputSpec::Image {
                channels: 1,
                height: 12,
                width: 12,
            },
            "x",
            vec![
                (
                    "conv1".into(),
                    LayerOp::Conv2d {
                        in_channels: 1,
                        out_channels: 4,
                        kernel: 3,
                        stride: 1,
                        padding: 0,
                    },
                ),
                ("relu1".into(), LayerOp::Relu),
                ("pool1".into(), LayerOp::MaxPool2d { size: 2 }),
                ("flat".into(), LayerOp::Flatten),
                ("fc1".into(), LayerOp::Linear { in_features: 100, out_features: 40 }),
                ("relu2".into(), LayerOp::Relu),
                ("fc2".into(), LayerOp::Linear { in_features: 40, out_features: 5 }),
            ],
        )
        .unwrap()
    }

    fn secret_for(g: &ModelGraph, alpha: f64) -> PositionSecret {
        let InputSpec::Image { channels, height, width } = g.input_spec else { panic!() };
        let d = Dataset::new(
            Tensor::zeros(vec![1, channels, height, width], crate::tensor::DType::F32).unwrap(),
            Tensor::from_i64(vec![1], vec![0]).unwrap(),
            DatasetMeta {
                modality: Modality::Image,
                num_classes: 5,
                vocab: None,
                value_range: Some([0.0, 1.0]),
            },
        )
        .unwrap();
        make_secret(&d, alpha, 3).unwrap()
    }

    #[test]
    fn alpha_zero_has_no_decoys() {
        let g = lenet_like();
        let plan = plan_subnets(&g, 0.0, 3, 1).unwrap();
        assert!(plan.decoys.is_empty());
        let p = init_params(&g, 0).unwrap();
        let a = augment_model(&g, &p, &plan, Some(&secret_for(&g, 0.0))).unwrap();
        assert_eq!(a.graph.heads.len(), 1);
        assert_eq!(a.graph.param_count(), g.param_count());
    }

    #[test]
    fn budgets_within_two_percent() {
        let g = lenet_like();
        let p = g.param_count() as f64;
        for alpha in [0.25, 0.5, 0.75, 1.0] {
            for s in [1, 2, 3] {
                let plan = plan_subnets(&g, alpha, s, 7).unwrap();
                let added = plan.added_params() as f64;
                assert!((added - alpha * p).abs() <= 0.02 * alpha * p, "alpha {alpha} s {s}: {added} vs {}", alpha * p);
                let a = augment_model(&g, &init_params(&g, 1).unwrap(), &plan, Some(&secret_for(&g, alpha))).unwrap();
                assert_eq!(a.graph.param_count(), g.param_count() + plan.added_params());
            }
        }
    }

    #[test]
    fn too_small_budget_suggests_fewer_subnets() {
        let g = lenet_like();
        let err = plan_subnets(&g, 0.001, 3, 0).unwrap_err().to_string();
        assert!(err.contains("fewer sub-networks"), "{err}");
    }

    #[test]
    fn structure_and_isolation() {
        let g = lenet_like();
        let plan = plan_subnets(&g, 0.5, 2, 11).unwrap();
        let p = init_params(&g, 2).unwrap();
        let s = secret_for(&g, 0.5);
        let a = augment_model(&g, &p, &plan, Some(&s)).unwrap();
        assert_eq!(a.graph.heads.len(), 3);
        let rep = audit_isolation(&a.graph, &a.bundle).unwrap();
        assert_eq!(rep.decoy_heads, 2);
        assert_eq!(rep.grad_stop_edges, 2);
        // all skip layers keep 12 of 18 rows
        let skips = skip_layers(&a.graph);
        assert_eq!(skips.len(), 3);
        assert!(skips.iter().all(|(_, rows)| rows.len() == 12));
        // original values preserved under new ids
        for (orig, new) in &a.bundle.layer_map {
            for (k, t) in p.layer(orig) {
                assert!(a.params.param(new, &k.name).unwrap().bit_eq(t));
            }
        }
        // no original id survives relabeling
        let text = serde_json::to_string(&a.graph).unwrap();
        for id in ["conv1", "fc2", "relu1", "\"x\""] {
            assert!(!text.contains(id), "{id}");
        }
    }

    #[test]
    fn deterministic() {
        let g = lenet_like();
        let p = init_params(&g, 2).unwrap();
        let s = secret_for(&g, 0.25);
        let run = || {
            let plan = plan_subnets(&g, 0.25, 2, 5).unwrap();
            let a = augment_model(&g, &p, &plan, Some(&s)).unwrap();
            crate::ir::model_to_bytes(&a.graph, &a.params).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn audit_rejects_leaks() {
        let g = lenet_like();
        let plan = plan_subnets(&g, 0.5, 2, 11).unwrap();
        let a = augment_model(&g, &init_params(&g, 2).unwrap(), &plan, Some(&secret_for(&g, 0.5))).unwrap();
        let mut leaky = a.graph.clone();
        for e in &mut leaky.edges {
            e.grad_stop = false;
        }
        assert!(audit_isolation(&leaky, &a.bundle).is_err());
    }

    #[test]
    fn vector_models_need_no_secret() {
        let g = ModelGraph::sequential(
            InputSpec::Vector { features: 8 },
            "x",
            vec![
                ("a".into(), LayerOp::Linear { in_features: 8, out_features: 16 }),
                ("r".into(), LayerOp::Relu),
                ("b".into(), LayerOp::Linear { in_features: 16, out_features: 3 }),
            ],
        )
        .unwrap();
        let plan = plan_subnets(&g, 0.5, 1, 0).unwrap();
        let a = augment_model(&g, &init_params(&g, 0).unwrap(), &plan, None).unwrap();
        audit_isolation(&a.graph, &a.bundle).unwrap();
        assert!(augment_model(&g, &init_params(&g, 0).unwrap(), &plan, Some(&secret_for(&lenet_like(), 0.5))).is_err());
    }
}
