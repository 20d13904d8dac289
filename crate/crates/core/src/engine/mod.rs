//! Dense tensor arithmetic with reverse-mode automatic differentiation.
//!
//! [`Graph`] is the batched autodiff tape used by training and attacks.
//! The free functions in this module are the per-sample entry points
//! (`[C, H, W]` images, `[L]` token sequences) on plain [`Tensor`]s.

pub mod gradcheck;
pub mod graph;
pub mod kernels;

use std::collections::BTreeMap;
use std::fmt::Display;

pub use graph::{ExecMode, GradStore, Graph, NodeId, OpKind};

use crate::error::{Error, Result};
use crate::tensor::{Array, DType, Float, Tensor, TensorData};

fn batched<F: Float>(t: &Tensor, rank: usize, what: &str) -> Result<Array<F>> {
    let mut a = Array::<F>::from_tensor(t)?;
    if a.shape.len() == rank {
        a.shape.insert(0, 1);
    } else if a.shape.len() != rank + 1 {
        return Err(Error::shape(format!(
            "{what} expects a rank-{rank} sample (or a batch of them), got {:?}",
            a.shape
        )));
    }
    Ok(a)
}

fn unbatched(mut a: Tensor, was_batched: bool) -> Result<Tensor> {
    if was_batched {
        return Ok(a);
    }
    let shape = a.shape()[1..].to_vec();
    a = a.reshape(shape)?;
    Ok(a)
}

fn conv_impl<F: Float>(
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
    keep: Option<(&[usize], &[usize])>,
) -> Result<Tensor> {
    let x = batched::<F>(input, 3, "conv2d")?;
    let mut g = Graph::<F>::new(ExecMode::Sequential);
    let xi = g.input(x, false);
    let k = g.constant(Array::from_tensor(kernel)?);
    let b = g.constant(Array::from_tensor(bias)?);
    let y = match keep {
        None => g.conv2d(xi, k, b, stride, padding)?,
        Some((rows, cols)) => g.skip_conv2d(xi, k, b, rows, cols, stride, padding)?,
    };
    unbatched(g.value(y)?.to_tensor(), input.shape().len() == 4)
}

fn float_dispatch<T>(
    dtype: DType,
    f32_path: impl FnOnce() -> Result<T>,
    f64_path: impl FnOnce() -> Result<T>,
) -> Result<T> {
    match dtype {
        DType::F32 => f32_path(),
        DType::F64 => f64_path(),
        other => Err(Error::arg(format!("expected a floating tensor, got {other}"))),
    }
}

/// Dense cross-correlation of a `[C_in, H, W]` image with a
/// `[C_out, C_in, kH, kW]` kernel. A leading batch axis is also accepted.
pub fn conv2d_forward(input: &Tensor, kernel: &Tensor, bias: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    float_dispatch(
        input.dtype(),
        || conv_impl::<f32>(input, kernel, bias, stride, padding, None),
        || conv_impl::<f64>(input, kernel, bias, stride, padding, None),
    )
}

/// Convolution that skips every row outside `keep_rows` and every column
/// outside `keep_cols` of the input grid.
pub fn skip_conv2d_forward(
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    keep_rows: &[usize],
    keep_cols: &[usize],
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let keep = Some((keep_rows, keep_cols));
    float_dispatch(
        input.dtype(),
        || conv_impl::<f32>(input, kernel, bias, stride, padding, keep),
        || conv_impl::<f64>(input, kernel, bias, stride, padding, keep),
    )
}

fn embed_impl<F: Float>(ids: &Tensor, table: &Tensor, skip: Option<&[usize]>) -> Result<Tensor> {
    let values = ids.as_i64()?;
    if ids.shape().len() != 1 {
        return Err(Error::shape(format!("token ids must be [L], got {:?}", ids.shape())));
    }
    let mut g = Graph::<F>::new(ExecMode::Sequential);
    let i = g.input_ids(vec![1, values.len()], values)?;
    let t = g.constant(Array::from_tensor(table)?);
    let y = match skip {
        None => g.embedding(i, t)?,
        Some(skip) => g.skip_embedding(i, t, skip)?,
    };
    unbatched(g.value(y)?.to_tensor(), false)
}

/// Row lookup `table[ids[i]]` for a `[L]` int64 sequence.
pub fn embedding_forward(token_ids: &Tensor, table: &Tensor) -> Result<Tensor> {
    float_dispatch(
        table.dtype(),
        || embed_impl::<f32>(token_ids, table, None),
        || embed_impl::<f64>(token_ids, table, None),
    )
}

/// Lookup that ignores the sequence positions in `skip_positions`.
pub fn skip_embedding_forward(token_ids: &Tensor, table: &Tensor, skip_positions: &[usize]) -> Result<Tensor> {
    float_dispatch(
        table.dtype(),
        || embed_impl::<f32>(token_ids, table, Some(skip_positions)),
        || embed_impl::<f64>(token_ids, table, Some(skip_positions)),
    )
}

/// Plain SGD: `theta <- theta - lr * g` for every parameter, in key order.
pub fn sgd_step<K: Ord + Display>(params: &mut BTreeMap<K, Tensor>, grads: &BTreeMap<K, Tensor>, lr: f64) -> Result<()> {
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(Error::arg(format!("learning rate must be positive, got {lr}")));
    }
    for (key, theta) in params.iter_mut() {
        let g = grads
            .get(key)
            .ok_or_else(|| Error::internal(format!("missing gradient for parameter {key}")))?;
        if g.shape() != theta.shape() {
            return Err(Error::internal(format!(
                "gradient for {key} has shape {:?}, parameter has {:?}",
                g.shape(),
                theta.shape()
            )));
        }
        match (theta.dtype(), g.data()) {
            (DType::F32, TensorData::F32(gv)) => {
                let lr = lr as f32;
                for (t, &d) in theta.as_f32_mut()?.iter_mut().zip(gv) {
                    *t -= lr * d;
                }
            }
            (DType::F64, TensorData::F64(gv)) => {
                let updated: Vec<f64> = theta
                    .as_f64()?
                    .iter()
                    .zip(gv)
                    .map(|(&t, &d)| t - lr * d)
                    .collect();
                *theta = Tensor::from_f64(theta.shape().to_vec(), updated)?;
            }
            (td, _) => {
                return Err(Error::internal(format!(
                    "dtype mismatch updating {key}: parameter {td}, gradient {}",
                    g.dtype()
                )))
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t32(shape: &[usize], v: &[f32]) -> Tensor {
        Tensor::from_f32(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn partial_identity_kernel_sums_diagonal() {
        let x = t32(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let k = t32(&[1, 1, 2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let b = t32(&[1], &[0.0]);
        let y = conv2d_forward(&x, &k, &b, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.as_f32().unwrap(), &[5.0]);
    }

    #[test]
    fn zero_kernel_gives_zero_output() {
        let x = t32(&[2, 5, 4], &(0..40).map(|i| i as f32 * 0.3 - 4.0).collect::<Vec<_>>());
        let k = Tensor::zeros(vec![3, 2, 3, 3], DType::F32).unwrap();
        let b = Tensor::zeros(vec![3], DType::F32).unwrap();
        let y = conv2d_forward(&x, &k, &b, 2, 1).unwrap();
        assert_eq!(y.shape(), &[3, 3, 2]);
        assert!(y.as_f32().unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_rejects_oversized_kernel_and_bad_channels() {
        let x = t32(&[1, 2, 2], &[1.0; 4]);
        let k = t32(&[1, 1, 3, 3], &[1.0; 9]);
        let b = t32(&[1], &[0.0]);
        assert!(matches!(conv2d_forward(&x, &k, &b, 1, 0), Err(Error::Shape(_))));
        let k2 = t32(&[1, 2, 1, 1], &[1.0; 2]);
        assert!(matches!(conv2d_forward(&x, &k2, &b, 1, 0), Err(Error::Shape(_))));
        assert!(conv2d_forward(&x, &t32(&[1, 1, 1, 1], &[1.0]), &b, 0, 0).is_err());
    }

    #[test]
    fn skip_conv_on_gathered_subgrid() {
        // 4x4 grid where rows {0,2} x cols {1,3} hold [[1,2],[3,4]].
        let mut grid = vec![9.0f32; 16];
        grid[1] = 1.0;
        grid[3] = 2.0;
        grid[2 * 4 + 1] = 3.0;
        grid[2 * 4 + 3] = 4.0;
        let x = t32(&[1, 4, 4], &grid);
        let k = t32(&[1, 1, 2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let b = t32(&[1], &[0.0]);
        let y = skip_conv2d_forward(&x, &k, &b, &[0, 2], &[1, 3], 1, 0).unwrap();
        assert_eq!(y.as_f32().unwrap(), &[5.0]);
    }

    #[test]
    fn skip_conv_validates_keep_sets() {
        let x = t32(&[1, 3, 3], &[0.0; 9]);
        let k = t32(&[1, 1, 1, 1], &[1.0]);
        let b = t32(&[1], &[0.0]);
        assert!(matches!(skip_conv2d_forward(&x, &k, &b, &[0, 3], &[0], 1, 0), Err(Error::Index(_))));
        assert!(matches!(skip_conv2d_forward(&x, &k, &b, &[], &[0], 1, 0), Err(Error::Argument(_))));
    }

    #[test]
    fn embedding_identity_table_and_repeats() {
        let table = t32(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let ids = Tensor::from_i64(vec![1], vec![0]).unwrap();
        assert_eq!(embedding_forward(&ids, &table).unwrap().as_f32().unwrap(), &[1.0, 0.0]);

        let table = t32(&[4, 3], &(0..12).map(|i| i as f32).collect::<Vec<_>>());
        let ids = Tensor::from_i64(vec![2], vec![3, 3]).unwrap();
        let y = embedding_forward(&ids, &table).unwrap();
        let v = y.as_f32().unwrap();
        assert_eq!(&v[..3], &v[3..]);

        let bad = Tensor::from_i64(vec![1], vec![4]).unwrap();
        assert!(matches!(embedding_forward(&bad, &table), Err(Error::Index(_))));
    }

    #[test]
    fn skip_embedding_drops_positions() {
        let table = t32(&[10, 2], &(0..20).map(|i| i as f32).collect::<Vec<_>>());
        let ids = Tensor::from_i64(vec![3], vec![5, 9, 2]).unwrap();
        let y = skip_embedding_forward(&ids, &table, &[1]).unwrap();
        assert_eq!(y.shape(), &[2, 2]);
        assert_eq!(y.as_f32().unwrap(), &[10.0, 11.0, 4.0, 5.0]);
        let full = skip_embedding_forward(&ids, &table, &[]).unwrap();
        assert!(full.bit_eq(&embedding_forward(&ids, &table).unwrap()));
    }

    #[test]
    fn sgd_arithmetic() {
        let mut p = BTreeMap::from([("w", t32(&[1], &[1.0]))]);
        let g = BTreeMap::from([("w", t32(&[1], &[0.5]))]);
        sgd_step(&mut p, &g, 0.1).unwrap();
        assert_eq!(p["w"].as_f32().unwrap(), &[0.95]);

        let before = p["w"].clone();
        sgd_step(&mut p, &BTreeMap::from([("w", t32(&[1], &[0.0]))]), 0.1).unwrap();
        assert!(p["w"].bit_eq(&before));

        assert!(matches!(sgd_step(&mut p, &BTreeMap::new(), 0.1), Err(Error::Internal(_))));
        assert!(sgd_step(&mut p, &g, 0.0).is_err());
    }
}
