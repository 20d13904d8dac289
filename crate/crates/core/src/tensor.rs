//! Dense row-major tensors used for storage, file I/O and the public
//! per-sample kernels. The autodiff engine works on [`Array`], the
//! dtype-generic view of the same data.

use std::fmt;

use crate::error::{Error, Result};

/// Element type of a [`Tensor`]. The discriminants are the on-disk codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum DType {
    F32 = 1,
    F64 = 2,
    I64 = 3,
    /// Raw bytes; used for text metadata records in archives.
    U8 = 4,
}

impl DType {
    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(DType::F32),
            2 => Some(DType::F64),
            3 => Some(DType::I64),
            4 => Some(DType::U8),
            _ => None,
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn size_of(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 | DType::I64 => 8,
            DType::U8 => 1,
        }
    }

    pub fn is_float(self) -> bool {
        matches!(self, DType::F32 | DType::F64)
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            DType::F32 => "float32",
            DType::F64 => "float64",
            DType::I64 => "int64",
            DType::U8 => "uint8",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I64(Vec<i64>),
    U8(Vec<u8>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::I64(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
            TensorData::I64(_) => DType::I64,
            TensorData::U8(_) => DType::U8,
        }
    }
}

/// An n-dimensional array with an optional gradient slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: TensorData,
    pub requires_grad: bool,
    grad: Option<Box<Tensor>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::shape(format!(
                "tensor dimensions must be >= 1, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} holds {numel} elements but data has {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn from_f32(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Tensor::new(shape, TensorData::F32(data))
    }

    pub fn from_f64(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        Tensor::new(shape, TensorData::F64(data))
    }

    pub fn from_i64(shape: Vec<usize>, data: Vec<i64>) -> Result<Self> {
        Tensor::new(shape, TensorData::I64(data))
    }

    pub fn from_bytes(data: Vec<u8>) -> Result<Self> {
        let len = data.len().max(1);
        let mut data = data;
        if data.is_empty() {
            // Archives cannot hold zero-sized dimensions; pad empty text.
            data.push(b' ');
        }
        Tensor::new(vec![len], TensorData::U8(data))
    }

    pub fn zeros(shape: Vec<usize>, dtype: DType) -> Result<Self> {
        let n: usize = shape.iter().product();
        let data = match dtype {
            DType::F32 => TensorData::F32(vec![0.0; n]),
            DType::F64 => TensorData::F64(vec![0.0; n]),
            DType::I64 => TensorData::I64(vec![0; n]),
            DType::U8 => TensorData::U8(vec![0; n]),
        };
        Tensor::new(shape, data)
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn grad(&self) -> Option<&Tensor> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Tensor) -> Result<()> {
        if grad.shape != self.shape {
            return Err(Error::shape(format!(
                "gradient shape {:?} does not match tensor shape {:?}",
                grad.shape, self.shape
            )));
        }
        if !grad.dtype().is_float() {
            return Err(Error::arg("gradients must have a floating dtype"));
        }
        self.grad = Some(Box::new(grad));
        Ok(())
    }

    pub fn as_f32(&self) -> Result<&[f32]> {
        match &self.data {
            TensorData::F32(v) => Ok(v),
            other => Err(Error::arg(format!("expected float32, got {}", other.dtype()))),
        }
    }

    pub fn as_f32_mut(&mut self) -> Result<&mut [f32]> {
        match &mut self.data {
            TensorData::F32(v) => Ok(v),
            other => Err(Error::arg(format!("expected float32, got {}", other.dtype()))),
        }
    }

    pub fn as_f64(&self) -> Result<&[f64]> {
        match &self.data {
            TensorData::F64(v) => Ok(v),
            other => Err(Error::arg(format!("expected float64, got {}", other.dtype()))),
        }
    }

    pub fn as_i64(&self) -> Result<&[i64]> {
        match &self.data {
            TensorData::I64(v) => Ok(v),
            other => Err(Error::arg(format!("expected int64, got {}", other.dtype()))),
        }
    }

    pub fn as_bytes(&self) -> Result<&[u8]> {
        match &self.data {
            TensorData::U8(v) => Ok(v),
            other => Err(Error::arg(format!("expected uint8, got {}", other.dtype()))),
        }
    }

    /// Values widened to f64, for floating and integer tensors alike.
    pub fn to_f64_vec(&self) -> Vec<f64> {
        match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::F64(v) => v.clone(),
            TensorData::I64(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::U8(v) => v.iter().map(|&x| x as f64).collect(),
        }
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.numel() || shape.contains(&0) {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        self.grad = None;
        Ok(self)
    }

    /// Bitwise equality of shape, dtype and payload (NaN-safe, distinguishes ±0).
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        if self.shape != other.shape {
            return false;
        }
        match (&self.data, &other.data) {
            (TensorData::F32(a), TensorData::F32(b)) => {
                a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (TensorData::F64(a), TensorData::F64(b)) => {
                a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (TensorData::I64(a), TensorData::I64(b)) => a == b,
            (TensorData::U8(a), TensorData::U8(b)) => a == b,
            _ => false,
        }
    }
}

/// Floating element types the autodiff engine can compute in.
pub trait Float:
    num_traits::Float + Default + Send + Sync + fmt::Debug + std::iter::Sum + 'static
{
    const DTYPE: DType;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn from_usize(v: usize) -> Self {
        Self::from_f64(v as f64)
    }
    fn wrap(data: Vec<Self>) -> TensorData;
    fn unwrap(data: &TensorData) -> Option<&[Self]>;
}

impl Float for f32 {
    const DTYPE: DType = DType::F32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn wrap(data: Vec<Self>) -> TensorData {
        TensorData::F32(data)
    }
    fn unwrap(data: &TensorData) -> Option<&[Self]> {
        match data {
            TensorData::F32(v) => Some(v),
            _ => None,
        }
    }
}

impl Float for f64 {
    const DTYPE: DType = DType::F64;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn wrap(data: Vec<Self>) -> TensorData {
        TensorData::F64(data)
    }
    fn unwrap(data: &TensorData) -> Option<&[Self]> {
        match data {
            TensorData::F64(v) => Some(v),
            _ => None,
        }
    }
}

/// Dtype-generic dense array: the value type flowing through the engine.
#[derive(Debug, Clone, PartialEq)]
pub struct Array<F> {
    pub shape: Vec<usize>,
    pub data: Vec<F>,
}

impl<F: Float> Array<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} holds {n} elements but data has {}",
                data.len()
            )));
        }
        Ok(Array { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Array {
            shape,
            data: vec![F::zero(); n],
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Converts a floating tensor, casting through f64 when dtypes differ.
    /// Same-dtype conversion is a plain copy and therefore bit-exact.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let data = match F::unwrap(t.data()) {
            Some(v) => v.to_vec(),
            None => match t.data() {
                TensorData::F32(v) => v.iter().map(|&x| F::from_f64(x as f64)).collect(),
                TensorData::F64(v) => v.iter().map(|&x| F::from_f64(x)).collect(),
                other => {
                    return Err(Error::arg(format!(
                        "expected a floating tensor, got {}",
                        other.dtype()
                    )))
                }
            },
        };
        Array::new(t.shape().to_vec(), data)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(self.shape.clone(), F::wrap(self.data.clone()))
            .expect("array invariants imply tensor invariants")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_mismatched_length() {
        assert!(Tensor::from_f32(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::from_f32(vec![0, 2], vec![]).is_err());
    }

    #[test]
    fn grad_must_match_shape_and_be_floating() {
        let mut t = Tensor::from_f32(vec![2], vec![1.0, 2.0]).unwrap();
        assert!(t.set_grad(Tensor::from_f32(vec![3], vec![0.0; 3]).unwrap()).is_err());
        assert!(t.set_grad(Tensor::from_i64(vec![2], vec![0; 2]).unwrap()).is_err());
        t.set_grad(Tensor::from_f32(vec![2], vec![0.5, 0.5]).unwrap())
            .unwrap();
        assert_eq!(t.grad().unwrap().as_f32().unwrap(), &[0.5, 0.5]);
    }

    #[test]
    fn bit_eq_distinguishes_signed_zero() {
        let a = Tensor::from_f32(vec![1], vec![0.0]).unwrap();
        let b = Tensor::from_f32(vec![1], vec![-0.0]).unwrap();
        assert_eq!(a, b);
        assert!(!a.bit_eq(&b));
    }

    #[test]
    fn same_dtype_array_roundtrip_is_exact() {
        let t = Tensor::from_f32(vec![3], vec![0.1, -2.5, 7.0e-20]).unwrap();
        let a = Array::<f32>::from_tensor(&t).unwrap();
        assert!(a.to_tensor().bit_eq(&t));
    }
}
