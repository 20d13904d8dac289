//! Dataset containers and the data augmenter.
//!
//! Images grow by whole inserted rows and columns, token sequences by
//! inserted positions. Positions are chosen once per dataset and recorded
//! in a [`PositionSecret`]; every inserted cell holds noise.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::distr::{Distribution, Uniform};
use rand::Rng;
use rand_distr::Normal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ir::archive::Archive;
use crate::ir::exec::NetInput;
use crate::rng;
use crate::tensor::{Array, Float, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Image,
    Text,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub modality: Modality,
    pub num_classes: usize,
    /// Token vocabulary size (text only).
    pub vocab: Option<usize>,
    /// Declared `[lo, hi]` pixel range (images only).
    pub value_range: Option<[f64; 2]>,
}

/// Samples plus labels: images `[N, C, H, W]` f32 or token ids `[N, L]` i64.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Tensor,
    labels: Tensor,
    meta: DatasetMeta,
}

impl Dataset {
    pub fn new(samples: Tensor, labels: Tensor, meta: DatasetMeta) -> Result<Self> {
        if labels.shape().len() != 1 || samples.shape().first() != labels.shape().first() {
            return Err(Error::shape(format!(
                "labels {:?} do not match samples {:?}",
                labels.shape(),
                samples.shape()
            )));
        }
        let k = meta.num_classes as i64;
        if let Some(bad) = labels.as_i64()?.iter().find(|&&y| y < 0 || y >= k) {
            return Err(Error::arg(format!("label {bad} outside 0..{k}")));
        }
        match meta.modality {
            Modality::Image => {
                if samples.shape().len() != 4 {
                    return Err(Error::shape(format!("image samples must be [N,C,H,W], got {:?}", samples.shape())));
                }
                let [lo, hi] = meta
                    .value_range
                    .ok_or_else(|| Error::arg("image dataset needs a value range"))?;
                if let Some(bad) = samples.as_f32()?.iter().find(|&&v| !(v as f64 >= lo && v as f64 <= hi)) {
                    return Err(Error::arg(format!("pixel value {bad} outside declared range [{lo}, {hi}]")));
                }
            }
            Modality::Text => {
                if samples.shape().len() != 2 {
                    return Err(Error::shape(format!("token samples must be [N,L], got {:?}", samples.shape())));
                }
                let v = meta.vocab.ok_or_else(|| Error::arg("text dataset needs a vocabulary size"))? as i64;
                if let Some(bad) = samples.as_i64()?.iter().find(|&&t| t < 0 || t >= v) {
                    return Err(Error::index(format!("token id {bad} outside vocabulary of {v}")));
                }
            }
        }
        Ok(Dataset { samples, labels, meta })
    }

    pub fn samples(&self) -> &Tensor {
        &self.samples
    }

    pub fn labels(&self) -> &[i64] {
        self.labels.as_i64().expect("labels are i64 by construction")
    }

    pub fn meta(&self) -> &DatasetMeta {
        &self.meta
    }

    pub fn modality(&self) -> Modality {
        self.meta.modality
    }

    pub fn len(&self) -> usize {
        self.samples.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Per-sample shape (`[C, H, W]` or `[L]`).
    pub fn sample_shape(&self) -> &[usize] {
        &self.samples.shape()[1..]
    }

    fn sample_len(&self) -> usize {
        self.sample_shape().iter().product()
    }

    /// Samples at `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Result<Dataset> {
        let n = self.len();
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::index(format!("sample {bad} outside 0..{n}")));
        }
        let per = self.sample_len();
        let mut shape = self.samples.shape().to_vec();
        shape[0] = idx.len();
        let samples = match self.meta.modality {
            Modality::Image => {
                let s = self.samples.as_f32()?;
                Tensor::from_f32(shape, idx.iter().flat_map(|&i| s[i * per..(i + 1) * per].iter().copied()).collect())?
            }
            Modality::Text => {
                let s = self.samples.as_i64()?;
                Tensor::from_i64(shape, idx.iter().flat_map(|&i| s[i * per..(i + 1) * per].iter().copied()).collect())?
            }
        };
        let y = self.labels();
        let labels = Tensor::from_i64(vec![idx.len()], idx.iter().map(|&i| y[i]).collect())?;
        Ok(Dataset {
            samples,
            labels,
            meta: self.meta.clone(),
        })
    }

    /// Model input and labels for the samples at `idx`.
    pub fn batch<F: Float>(&self, idx: &[usize]) -> Result<(NetInput<F>, Vec<i64>)> {
        let per = self.sample_len();
        let y = self.labels();
        let labels = idx.iter().map(|&i| y[i]).collect();
        let input = match self.meta.modality {
            Modality::Image => {
                let s = self.samples.as_f32()?;
                let mut shape = vec![idx.len()];
                shape.extend_from_slice(self.sample_shape());
                let data = idx
                    .iter()
                    .flat_map(|&i| s[i * per..(i + 1) * per].iter().map(|&v| F::from_f64(v as f64)))
                    .collect();
                NetInput::dense(Array::new(shape, data)?)
            }
            Modality::Text => {
                let s = self.samples.as_i64()?;
                NetInput::Tokens {
                    batch: idx.len(),
                    ids: idx.iter().flat_map(|&i| s[i * per..(i + 1) * per].iter().copied()).collect(),
                }
            }
        };
        Ok((input, labels))
    }

    pub fn to_archive(&self) -> Result<Archive> {
        let mut a = Archive::new();
        a.push("samples", self.samples.clone())?;
        a.push("labels", self.labels.clone())?;
        a.push_text("meta", &serde_json::to_string(&self.meta)?)?;
        Ok(a)
    }

    pub fn from_archive(a: &Archive, location: &str) -> Result<Self> {
        let need = |name: &str| {
            a.get(name)
                .ok_or_else(|| Error::load(location, format!("missing `{name}` record")))
        };
        let meta_text = a
            .text("meta")
            .ok_or_else(|| Error::load(location, "missing `meta` record"))??;
        let meta: DatasetMeta = serde_json::from_str(&meta_text).map_err(|e| Error::load(location, e.to_string()))?;
        Dataset::new(need("samples")?.clone(), need("labels")?.clone(), meta)
            .map_err(|e| Error::load(location, e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.to_archive()?.write(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Dataset::from_archive(&Archive::read(path)?, &path.display().to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Uniform,
    Gaussian,
    Laplace,
    File,
}

impl FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(NoiseKind::Uniform),
            "gaussian" => Ok(NoiseKind::Gaussian),
            "laplace" => Ok(NoiseKind::Laplace),
            "file" => Ok(NoiseKind::File),
            other => Err(Error::arg(format!(
                "unknown noise kind `{other}` (expected uniform, gaussian, laplace or file)"
            ))),
        }
    }
}

/// Source of synthetic values.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseConfig {
    pub kind: NoiseKind,
    /// σ for gaussian, scale `b` for laplace; defaults to a quarter of the range.
    pub param: Option<f64>,
    /// AMLG archive whose first floating record supplies values (kind = file).
    pub file: Option<PathBuf>,
    pub seed: u64,
}

impl NoiseConfig {
    pub fn uniform(seed: u64) -> Self {
        NoiseConfig {
            kind: NoiseKind::Uniform,
            param: None,
            file: None,
            seed,
        }
    }

    fn file_values(&self) -> Result<Option<Vec<f64>>> {
        if self.kind != NoiseKind::File {
            return Ok(None);
        }
        let path = self
            .file
            .as_ref()
            .ok_or_else(|| Error::arg("file noise needs a path"))?;
        let a = Archive::read(path)?;
        let t = a
            .records()
            .iter()
            .map(|(_, t)| t)
            .find(|t| t.dtype().is_float())
            .ok_or_else(|| Error::arg(format!("noise file {} has no floating record", path.display())))?;
        Ok(Some(t.to_f64_vec()))
    }

    fn spread(&self, lo: f64, hi: f64) -> Result<f64> {
        let p = self.param.unwrap_or((hi - lo) / 4.0);
        if !(p > 0.0 && p.is_finite()) {
            return Err(Error::arg(format!("noise parameter must be positive, got {p}")));
        }
        Ok(p)
    }
}

/// Draws `count` values from one generator stream. `sample` is the value
/// range used by the uniform kind and as the center for gaussian/laplace;
/// every value is clipped into `clip`.
fn draw(
    cfg: &NoiseConfig,
    rng: &mut rng::StreamRng,
    file: Option<&[f64]>,
    count: usize,
    sample: (f64, f64),
    clip: (f64, f64),
) -> Result<Vec<f64>> {
    let (lo, hi) = sample;
    let mid = 0.5 * (lo + hi);
    let out: Vec<f64> = match cfg.kind {
        NoiseKind::Uniform => {
            let d = Uniform::new_inclusive(lo, hi).map_err(|e| Error::arg(format!("noise range: {e}")))?;
            (0..count).map(|_| d.sample(rng)).collect()
        }
        NoiseKind::Gaussian => {
            let d = Normal::new(mid, cfg.spread(lo, hi)?).map_err(|e| Error::arg(e.to_string()))?;
            (0..count).map(|_| d.sample(rng)).collect()
        }
        NoiseKind::Laplace => {
            let b = cfg.spread(lo, hi)?;
            (0..count)
                .map(|_| {
                    // inverse CDF on u in (-1/2, 1/2)
                    let u: f64 = rng.random::<f64>() - 0.5;
                    mid - b * u.signum() * (1.0 - 2.0 * u.abs()).max(f64::MIN_POSITIVE).ln()
                })
                .collect()
        }
        NoiseKind::File => {
            let v = file.ok_or_else(|| Error::internal("file noise not loaded"))?;
            if v.len() < count {
                return Err(Error::arg(format!("noise file holds {} values, {count} required", v.len())));
            }
            v[..count].to_vec()
        }
    };
    Ok(out.into_iter().map(|x| x.clamp(clip.0, clip.1)).collect())
}

/// `count` values from `cfg`, clipped into `range`. File noise is read
/// from the start of the file.
pub fn sample_noise(cfg: &NoiseConfig, count: usize, range: (f64, f64)) -> Result<Vec<f64>> {
    if !(range.0 <= range.1) {
        return Err(Error::arg(format!("empty noise range [{}, {}]", range.0, range.1)));
    }
    let file = cfg.file_values()?;
    let mut r = rng::stream(cfg.seed, "noise");
    draw(cfg, &mut r, file.as_deref(), count, range, range)
}

/// Dataset-global record of which positions hold original values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "modality", rename_all = "snake_case")]
pub enum PositionSecret {
    Image {
        alpha: f64,
        original: [usize; 2],
        augmented: [usize; 2],
        kept_rows: Vec<usize>,
        kept_cols: Vec<usize>,
    },
    Text {
        alpha: f64,
        original_len: usize,
        augmented_len: usize,
        kept_positions: Vec<usize>,
    },
}

impl PositionSecret {
    pub fn alpha(&self) -> f64 {
        match *self {
            PositionSecret::Image { alpha, .. } | PositionSecret::Text { alpha, .. } => alpha,
        }
    }

    pub fn modality(&self) -> Modality {
        match self {
            PositionSecret::Image { .. } => Modality::Image,
            PositionSecret::Text { .. } => Modality::Text,
        }
    }

    /// Skipped positions of a text secret (complement of the kept set).
    pub fn skip_positions(&self) -> Option<Vec<usize>> {
        match self {
            PositionSecret::Text {
                augmented_len,
                kept_positions,
                ..
            } => Some(complement(kept_positions, *augmented_len)),
            PositionSecret::Image { .. } => None,
        }
    }

    /// Flat indices `(row * W_a + col)` of kept cells in one augmented plane,
    /// or kept positions for text.
    pub fn kept_cells(&self) -> Vec<usize> {
        match self {
            PositionSecret::Image {
                augmented,
                kept_rows,
                kept_cols,
                ..
            } => kept_rows
                .iter()
                .flat_map(|&r| kept_cols.iter().map(move |&c| r * augmented[1] + c))
                .collect(),
            PositionSecret::Text { kept_positions, .. } => kept_positions.clone(),
        }
    }
}

pub(crate) fn complement(kept: &[usize], n: usize) -> Vec<usize> {
    (0..n).filter(|i| kept.binary_search(i).is_err()).collect()
}

/// `round(n (1 + α))`.
pub fn augmented_len(n: usize, alpha: f64) -> usize {
    (n as f64 * (1.0 + alpha)).round() as usize
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::arg(format!("alpha must be a finite value >= 0, got {alpha}")));
    }
    Ok(())
}

/// Sorted kept indices: `n` of `n_aug`, the rest drawn uniformly as inserted.
fn choose_kept(n: usize, n_aug: usize, seed: u64, label: &str) -> Vec<usize> {
    let mut r = rng::stream(seed, label);
    let mut inserted = rand::seq::index::sample(&mut r, n_aug, n_aug - n).into_vec();
    inserted.sort_unstable();
    complement(&inserted, n_aug)
}

/// Draws a dataset-global secret for `data` without touching any sample.
pub fn make_secret(data: &Dataset, alpha: f64, seed: u64) -> Result<PositionSecret> {
    check_alpha(alpha)?;
    Ok(match data.modality() {
        Modality::Image => {
            let (h, w) = (data.sample_shape()[1], data.sample_shape()[2]);
            let (ha, wa) = (augmented_len(h, alpha), augmented_len(w, alpha));
            PositionSecret::Image {
                alpha,
                original: [h, w],
                augmented: [ha, wa],
                kept_rows: choose_kept(h, ha, seed, "positions/rows"),
                kept_cols: choose_kept(w, wa, seed, "positions/cols"),
            }
        }
        Modality::Text => {
            let l = data.sample_shape()[0];
            let la = augmented_len(l, alpha);
            PositionSecret::Text {
                alpha,
                original_len: l,
                augmented_len: la,
                kept_positions: choose_kept(l, la, seed, "positions/text"),
            }
        }
    })
}

pub fn augment_images(data: &Dataset, alpha: f64, noise: &NoiseConfig, seed: u64) -> Result<(Dataset, PositionSecret)> {
    if data.modality() != Modality::Image {
        return Err(Error::arg("augment_images needs an image dataset"));
    }
    let secret = make_secret(data, alpha, seed)?;
    Ok((apply_secret(data, &secret, noise)?, secret))
}

pub fn augment_text(data: &Dataset, alpha: f64, noise: &NoiseConfig, seed: u64) -> Result<(Dataset, PositionSecret)> {
    if data.modality() != Modality::Text {
        return Err(Error::arg("augment_text needs a text dataset"));
    }
    let secret = make_secret(data, alpha, seed)?;
    Ok((apply_secret(data, &secret, noise)?, secret))
}

pub fn augment(data: &Dataset, alpha: f64, noise: &NoiseConfig, seed: u64) -> Result<(Dataset, PositionSecret)> {
    match data.modality() {
        Modality::Image => augment_images(data, alpha, noise, seed),
        Modality::Text => augment_text(data, alpha, noise, seed),
    }
}

fn check_dims(data: &Dataset, secret: &PositionSecret, augmented: bool) -> Result<()> {
    let ok = match (secret, data.sample_shape()) {
        (
            PositionSecret::Image {
                original, augmented: a, ..
            },
            &[_, h, w],
        ) => {
            let want = if augmented { a } else { original };
            [h, w] == *want
        }
        (
            PositionSecret::Text {
                original_len,
                augmented_len,
                ..
            },
            &[l],
        ) => l == if augmented { *augmented_len } else { *original_len },
        _ => false,
    };
    if !ok {
        return Err(Error::arg(format!(
            "secret dims do not match dataset sample shape {:?}",
            data.sample_shape()
        )));
    }
    Ok(())
}

/// Augments another split (or the same data) with an existing secret.
/// Sample `n` draws its noise from its own stream, so the result does not
/// depend on evaluation order.
pub fn apply_secret(data: &Dataset, secret: &PositionSecret, noise: &NoiseConfig) -> Result<Dataset> {
    check_dims(data, secret, false)?;
    let n = data.len();
    let file = noise.file_values()?;
    match secret {
        PositionSecret::Image {
            augmented,
            kept_rows,
            kept_cols,
            ..
        } => {
            let c = data.sample_shape()[0];
            let [h, w] = [kept_rows.len(), kept_cols.len()];
            let [ha, wa] = *augmented;
            let per_noise = c * (ha * wa - h * w);
            if let Some(f) = &file {
                if f.len() < per_noise * n {
                    return Err(Error::arg(format!(
                        "noise file holds {} values, {} required",
                        f.len(),
                        per_noise * n
                    )));
                }
            }
            let [lo, hi] = data.meta.value_range.expect("validated image meta");
            let src = data.samples.as_f32()?;
            let ranges = channel_ranges(src, c, h * w);
            let mut row_src = vec![None; ha];
            kept_rows.iter().enumerate().for_each(|(i, &r)| row_src[r] = Some(i));
            let mut col_src = vec![None; wa];
            kept_cols.iter().enumerate().for_each(|(i, &cc)| col_src[cc] = Some(i));

            let mut out = vec![0f32; n * c * ha * wa];
            out.par_chunks_mut(c * ha * wa)
                .enumerate()
                .try_for_each(|(s, dst)| -> Result<()> {
                    let mut r = rng::stream(noise.seed, &format!("noise/{s}"));
                    let file_slice = file.as_deref().map(|f| &f[s * per_noise..(s + 1) * per_noise]);
                    let mut file_pos = 0;
                    for ch in 0..c {
                        let count = ha * wa - h * w;
                        let vals = match file_slice {
                            Some(f) => {
                                let v = draw(noise, &mut r, Some(&f[file_pos..]), count, ranges[ch], (lo, hi))?;
                                file_pos += count;
                                v
                            }
                            None => draw(noise, &mut r, None, count, ranges[ch], (lo, hi))?,
                        };
                        let mut vals = vals.into_iter();
                        let plane = &src[(s * c + ch) * h * w..(s * c + ch + 1) * h * w];
                        let d = &mut dst[ch * ha * wa..(ch + 1) * ha * wa];
                        for (ri, rs) in row_src.iter().enumerate() {
                            for (ci, cs) in col_src.iter().enumerate() {
                                d[ri * wa + ci] = match (rs, cs) {
                                    (Some(a), Some(b)) => plane[a * w + b],
                                    _ => vals.next().expect("noise count matches inserted cells") as f32,
                                };
                            }
                        }
                    }
                    Ok(())
                })?;
            let samples = Tensor::from_f32(vec![n, c, ha, wa], out)?;
            Dataset::new(samples, data.labels.clone(), data.meta.clone())
        }
        PositionSecret::Text {
            augmented_len,
            kept_positions,
            ..
        } => {
            let l = kept_positions.len();
            let la = *augmented_len;
            let per_noise = la - l;
            if let Some(f) = &file {
                if f.len() < per_noise * n {
                    return Err(Error::arg(format!(
                        "noise file holds {} values, {} required",
                        f.len(),
                        per_noise * n
                    )));
                }
            }
            let vocab = data.meta.vocab.expect("validated text meta");
            let top = (vocab - 1) as f64;
            let src = data.samples.as_i64()?;
            let mut pos_src = vec![None; la];
            kept_positions.iter().enumerate().for_each(|(i, &p)| pos_src[p] = Some(i));
            let mut out = vec![0i64; n * la];
            out.par_chunks_mut(la).enumerate().try_for_each(|(s, dst)| -> Result<()> {
                let mut r = rng::stream(noise.seed, &format!("noise/{s}"));
                let tokens: Vec<i64> = match noise.kind {
                    NoiseKind::Uniform => (0..per_noise).map(|_| r.random_range(0..vocab as i64)).collect(),
                    _ => {
                        let f = file.as_deref().map(|f| &f[s * per_noise..(s + 1) * per_noise]);
                        draw(noise, &mut r, f, per_noise, (0.0, top), (0.0, top))?
                            .into_iter()
                            .map(|v| v.round() as i64)
                            .collect()
                    }
                };
                let mut tokens = tokens.into_iter();
                let row = &src[s * l..(s + 1) * l];
                for (p, ps) in pos_src.iter().enumerate() {
                    dst[p] = match ps {
                        Some(i) => row[*i],
                        None => tokens.next().expect("token count matches inserted positions"),
                    };
                }
                Ok(())
            })?;
            let samples = Tensor::from_i64(vec![n, la], out)?;
            Dataset::new(samples, data.labels.clone(), data.meta.clone())
        }
    }
}

/// Empirical `[min, max]` per channel.
fn channel_ranges(src: &[f32], c: usize, plane: usize) -> Vec<(f64, f64)> {
    let mut r = vec![(f64::INFINITY, f64::NEG_INFINITY); c];
    for (i, chunk) in src.chunks(plane).enumerate() {
        let e = &mut r[i % c];
        for &v in chunk {
            e.0 = e.0.min(v as f64);
            e.1 = e.1.max(v as f64);
        }
    }
    r.into_iter()
        .map(|(lo, hi)| if lo <= hi { (lo, hi) } else { (0.0, 0.0) })
        .collect()
}

/// Keeps only the original positions recorded in `secret`.
pub fn deaugment(data: &Dataset, secret: &PositionSecret) -> Result<Dataset> {
    if data.modality() != secret.modality() {
        return Err(Error::arg("secret modality does not match dataset"));
    }
    check_dims(data, secret, true)?;
    let n = data.len();
    match secret {
        PositionSecret::Image {
            augmented,
            kept_rows,
            kept_cols,
            ..
        } => {
            let c = data.sample_shape()[0];
            let [ha, wa] = *augmented;
            let src = data.samples.as_f32()?;
            let out = crate::engine::kernels::gather_grid(src, n * c, ha, wa, kept_rows, kept_cols);
            let samples = Tensor::from_f32(vec![n, c, kept_rows.len(), kept_cols.len()], out)?;
            Dataset::new(samples, data.labels.clone(), data.meta.clone())
        }
        PositionSecret::Text {
            augmented_len,
            kept_positions,
            ..
        } => {
            let src = data.samples.as_i64()?;
            let out = src
                .chunks(*augmented_len)
                .flat_map(|row| kept_positions.iter().map(move |&p| row[p]))
                .collect();
            let samples = Tensor::from_i64(vec![n, kept_positions.len()], out)?;
            Dataset::new(samples, data.labels.clone(), data.meta.clone())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert_eq, proptest, ProptestConfig};

    pub(crate) fn images(n: usize, c: usize, h: usize, w: usize, seed: u64) -> Dataset {
        let mut r = rng::stream(seed, "test-images");
        let data: Vec<f32> = (0..n * c * h * w).map(|_| r.random::<f32>()).collect();
        let labels: Vec<i64> = (0..n).map(|i| (i % 3) as i64).collect();
        Dataset::new(
            Tensor::from_f32(vec![n, c, h, w], data).unwrap(),
            Tensor::from_i64(vec![n], labels).unwrap(),
            DatasetMeta {
                modality: Modality::Image,
                num_classes: 3,
                vocab: None,
                value_range: Some([0.0, 1.0]),
            },
        )
        .unwrap()
    }

    fn text(n: usize, l: usize, vocab: usize, seed: u64) -> Dataset {
        let mut r = rng::stream(seed, "test-text");
        let ids: Vec<i64> = (0..n * l).map(|_| r.random_range(0..vocab as i64)).collect();
        Dataset::new(
            Tensor::from_i64(vec![n, l], ids).unwrap(),
            Tensor::from_i64(vec![n], vec![0; n]).unwrap(),
            DatasetMeta {
                modality: Modality::Text,
                num_classes: 2,
                vocab: Some(vocab),
                value_range: None,
            },
        )
        .unwrap()
    }

    #[test]
    fn mnist_resolution_at_quarter() {
        let d = images(2, 1, 28, 28, 0);
        let (a, s) = augment_images(&d, 0.25, &NoiseConfig::uniform(1), 2).unwrap();
        assert_eq!(a.sample_shape(), &[1, 35, 35]);
        let PositionSecret::Image { kept_rows, kept_cols, .. } = &s else { panic!() };
        assert_eq!((kept_rows.len(), kept_cols.len()), (28, 28));
    }

    #[test]
    fn small_image_gather_inverse() {
        let d = images(3, 2, 4, 4, 5);
        let (a, s) = augment_images(&d, 0.5, &NoiseConfig::uniform(1), 9).unwrap();
        assert_eq!(a.sample_shape(), &[2, 6, 6]);
        let PositionSecret::Image { kept_rows, kept_cols, .. } = &s else { panic!() };
        // independent gather oracle
        let src = a.samples().as_f32().unwrap();
        let orig = d.samples().as_f32().unwrap();
        let mut k = 0;
        for p in 0..3 * 2 {
            for &r in kept_rows {
                for &c in kept_cols {
                    assert_eq!(src[p * 36 + r * 6 + c].to_bits(), orig[k].to_bits());
                    k += 1;
                }
            }
        }
    }

    #[test]
    fn alpha_zero_is_identity() {
        let d = images(2, 1, 5, 5, 3);
        let (a, s) = augment(&d, 0.0, &NoiseConfig::uniform(0), 0).unwrap();
        assert_eq!(a.to_archive().unwrap().to_bytes(), d.to_archive().unwrap().to_bytes());
        assert_eq!(s.kept_cells().len(), 25);
        let t = text(3, 6, 50, 1);
        let (a, _) = augment(&t, 0.0, &NoiseConfig::uniform(0), 0).unwrap();
        assert_eq!(a, t);
    }

    #[test]
    fn text_lengths_and_roundtrip() {
        let t = text(4, 20, 1000, 2);
        let (a, s) = augment_text(&t, 0.25, &NoiseConfig::uniform(3), 4).unwrap();
        assert_eq!(a.sample_shape(), &[25]);
        assert_eq!(s.skip_positions().unwrap().len(), 5);
        assert_eq!(deaugment(&a, &s).unwrap(), t);
        let t = text(10, 4, 7, 3);
        let (a, s) = augment_text(&t, 1.0, &NoiseConfig::uniform(3), 4).unwrap();
        assert_eq!(a.sample_shape(), &[8]);
        // remove-positions oracle
        let skip = s.skip_positions().unwrap();
        let ids = a.samples().as_i64().unwrap();
        let removed: Vec<i64> = ids
            .chunks(8)
            .flat_map(|row| (0..8).filter(|p| !skip.contains(p)).map(move |p| row[p]))
            .collect();
        assert_eq!(removed, t.samples().as_i64().unwrap());
    }

    #[test]
    fn deaugment_ignores_noise_cells_and_checks_dims() {
        let d = images(2, 1, 4, 4, 7);
        let (a, s) = augment(&d, 0.5, &NoiseConfig::uniform(1), 2).unwrap();
        let mut data = a.samples().as_f32().unwrap().to_vec();
        let kept: std::collections::HashSet<usize> = s.kept_cells().into_iter().collect();
        for (i, v) in data.iter_mut().enumerate() {
            if !kept.contains(&(i % 36)) {
                *v = 0.123;
            }
        }
        let corrupted = Dataset::new(Tensor::from_f32(vec![2, 1, 6, 6], data).unwrap(), a.labels.clone(), a.meta.clone()).unwrap();
        assert_eq!(deaugment(&corrupted, &s).unwrap(), d);
        assert!(deaugment(&d, &s).is_err());
    }

    #[test]
    fn noise_kinds() {
        assert!(sample_noise(&NoiseConfig::uniform(0), 0, (0.0, 1.0)).unwrap().is_empty());
        let v = sample_noise(&NoiseConfig::uniform(4), 100_000, (0.0, 1.0)).unwrap();
        assert!(v.iter().all(|&x| (0.0..=1.0).contains(&x)));
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let sd = (1.0f64 / 12.0 / v.len() as f64).sqrt();
        assert!((mean - 0.5).abs() < 3.0 * sd, "{mean}");
        let lap = NoiseConfig {
            kind: NoiseKind::Laplace,
            param: Some(5.0),
            file: None,
            seed: 1,
        };
        assert!(sample_noise(&lap, 10_000, (-1.0, 2.0)).unwrap().iter().all(|&x| (-1.0..=2.0).contains(&x)));
        assert!("poisson".parse::<NoiseKind>().is_err());
    }

    #[test]
    fn file_noise_is_sequential_and_length_checked() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("noise.amlg");
        let mut a = Archive::new();
        a.push("values", Tensor::from_f64(vec![4], vec![0.1, 0.2, 0.3, 0.4]).unwrap()).unwrap();
        a.write(&p).unwrap();
        let cfg = NoiseConfig {
            kind: NoiseKind::File,
            param: None,
            file: Some(p),
            seed: 0,
        };
        assert_eq!(sample_noise(&cfg, 3, (0.0, 1.0)).unwrap(), vec![0.1, 0.2, 0.3]);
        let d = images(1, 1, 2, 2, 0);
        // 2x2 -> 3x3 needs 5 values
        assert!(augment(&d, 0.5, &cfg, 0).is_err());
    }

    #[test]
    fn deterministic_bytes_and_split_consistency() {
        let d = images(4, 3, 6, 6, 1);
        let noise = NoiseConfig {
            kind: NoiseKind::Gaussian,
            param: Some(0.3),
            file: None,
            seed: 8,
        };
        let (a1, s1) = augment(&d, 0.5, &noise, 3).unwrap();
        let (a2, s2) = augment(&d, 0.5, &noise, 3).unwrap();
        assert_eq!(a1.to_archive().unwrap().to_bytes(), a2.to_archive().unwrap().to_bytes());
        assert_eq!(s1, s2);
        let val = images(2, 3, 6, 6, 99);
        let av = apply_secret(&val, &s1, &noise).unwrap();
        assert_eq!(deaugment(&av, &s1).unwrap(), val);
    }

    #[test]
    fn archive_roundtrip() {
        let d = text(3, 5, 9, 0);
        let back = Dataset::from_archive(&Archive::from_bytes(&d.to_archive().unwrap().to_bytes(), "m").unwrap(), "m").unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn negative_alpha_rejected() {
        assert!(augment(&images(1, 1, 3, 3, 0), -0.1, &NoiseConfig::uniform(0), 0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn roundtrip_any_alpha(alpha in 0.0f64..1.5, h in 1usize..7, w in 1usize..7, c in 1usize..3, seed in any::<u64>()) {
            let d = images(2, c, h, w, seed);
            let (a, s) = augment(&d, alpha, &NoiseConfig::uniform(seed), seed).unwrap();
            prop_assert_eq!(a.sample_shape(), &[c, augmented_len(h, alpha), augmented_len(w, alpha)][..]);
            prop_assert_eq!(deaugment(&a, &s).unwrap(), d);
        }

        #[test]
        fn text_roundtrip_any_alpha(alpha in 0.0f64..2.0, l in 1usize..30, seed in any::<u64>()) {
            let t = text(3, l, 20, seed);
            let (a, s) = augment(&t, alpha, &NoiseConfig::uniform(seed), seed).unwrap();
            prop_assert_eq!(a.sample_shape()[0], augmented_len(l, alpha));
            prop_assert_eq!(deaugment(&a, &s).unwrap(), t);
        }
    }
}
