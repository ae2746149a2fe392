//! Dense row-major tensors in binary32 or binary64.
//!
//! Tensors are plain value types: shape plus a contiguous scalar buffer.
//! All arithmetic lives in [`crate::ops`]; gradients live in [`crate::tape`].

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size_bytes(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

impl std::fmt::Display for DType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DType::F32 => write!(f, "f32"),
            DType::F64 => write!(f, "f64"),
        }
    }
}

/// Scalar types a tensor can hold. Kernels are generic over this trait and
/// accumulate in f64 regardless of the storage type.
pub trait Scalar: Copy + Send + Sync + PartialEq + std::fmt::Debug + 'static {
    const DTYPE: DType;
    fn to_f64(self) -> f64;
    fn from_f64(v: f64) -> Self;
    /// Borrow the buffer of a tensor whose dtype was already checked.
    fn of(t: &Tensor) -> &[Self]
    where
        Self: Sized;
    fn of_mut(t: &mut Tensor) -> &mut [Self]
    where
        Self: Sized;
    fn tensor(shape: &[usize], values: Vec<Self>) -> Tensor
    where
        Self: Sized;
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn of(t: &Tensor) -> &[f32] {
        match &t.data {
            Data::F32(v) => v,
            _ => panic!("dtype mismatch: expected f32"),
        }
    }
    fn of_mut(t: &mut Tensor) -> &mut [f32] {
        match &mut t.data {
            Data::F32(v) => v,
            _ => panic!("dtype mismatch: expected f32"),
        }
    }
    fn tensor(shape: &[usize], values: Vec<f32>) -> Tensor {
        Tensor::from_f32(shape, values)
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v
    }
    fn of(t: &Tensor) -> &[f64] {
        match &t.data {
            Data::F64(v) => v,
            _ => panic!("dtype mismatch: expected f64"),
        }
    }
    fn of_mut(t: &mut Tensor) -> &mut [f64] {
        match &mut t.data {
            Data::F64(v) => v,
            _ => panic!("dtype mismatch: expected f64"),
        }
    }
    fn tensor(shape: &[usize], values: Vec<f64>) -> Tensor {
        Tensor::from_f64(shape, values)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Data {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl Data {
    pub fn len(&self) -> usize {
        match self {
            Data::F32(v) => v.len(),
            Data::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self {
            Data::F32(_) => DType::F32,
            Data::F64(_) => DType::F64,
        }
    }
}

/// Dense N-dimensional array (rank 1-5), row-major, homogeneous dtype.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Data,
}

pub const MAX_RANK: usize = 5;

impl Tensor {
    /// Validating constructor: rank 1-5, all extents >= 1, buffer length
    /// equal to the shape product.
    pub fn new(shape: Vec<usize>, data: Data) -> Result<Tensor> {
        if shape.is_empty() || shape.len() > MAX_RANK {
            return Err(Error::shape(
                "tensor",
                format!("rank {} outside 1..={MAX_RANK}", shape.len()),
            ));
        }
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::shape("tensor", format!("zero extent in {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} wants {numel} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize], dtype: DType) -> Tensor {
        let numel: usize = shape.iter().product();
        let data = match dtype {
            DType::F32 => Data::F32(vec![0.0; numel]),
            DType::F64 => Data::F64(vec![0.0; numel]),
        };
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn full(shape: &[usize], value: f64, dtype: DType) -> Tensor {
        let numel: usize = shape.iter().product();
        let data = match dtype {
            DType::F32 => Data::F32(vec![value as f32; numel]),
            DType::F64 => Data::F64(vec![value; numel]),
        };
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn from_f64(shape: &[usize], values: Vec<f64>) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        Tensor {
            shape: shape.to_vec(),
            data: Data::F64(values),
        }
    }

    pub fn from_f32(shape: &[usize], values: Vec<f32>) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        Tensor {
            shape: shape.to_vec(),
            data: Data::F32(values),
        }
    }

    /// Filled with values drawn from `f` in row-major order.
    pub fn generate(shape: &[usize], dtype: DType, mut f: impl FnMut() -> f64) -> Tensor {
        let numel: usize = shape.iter().product();
        let data = match dtype {
            DType::F32 => Data::F32((0..numel).map(|_| f() as f32).collect()),
            DType::F64 => Data::F64((0..numel).map(|_| f()).collect()),
        };
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn data(&self) -> &Data {
        &self.data
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.data {
            Data::F32(v) => Some(v),
            Data::F64(_) => None,
        }
    }

    pub fn as_f64(&self) -> Option<&[f64]> {
        match &self.data {
            Data::F64(v) => Some(v),
            Data::F32(_) => None,
        }
    }

    /// Element at flat index, widened to f64.
    pub fn at(&self, i: usize) -> f64 {
        match &self.data {
            Data::F32(v) => v[i] as f64,
            Data::F64(v) => v[i],
        }
    }

    pub fn set(&mut self, i: usize, value: f64) {
        match &mut self.data {
            Data::F32(v) => v[i] = value as f32,
            Data::F64(v) => v[i] = value,
        }
    }

    /// The single value of a one-element tensor.
    pub fn scalar(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "expected scalar tensor, got shape {:?}",
                self.shape
            )));
        }
        Ok(self.at(0))
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        match &self.data {
            Data::F32(v) => v.iter().map(|&x| x as f64).collect(),
            Data::F64(v) => v.clone(),
        }
    }

    /// Same buffer under a new shape with equal element count.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() || shape.is_empty() || shape.len() > MAX_RANK {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape, shape),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    /// Convert storage to the target dtype (rounding if narrowing).
    pub fn cast(&self, dtype: DType) -> Tensor {
        if self.dtype() == dtype {
            return self.clone();
        }
        let data = match (&self.data, dtype) {
            (Data::F64(v), DType::F32) => Data::F32(v.iter().map(|&x| x as f32).collect()),
            (Data::F32(v), DType::F64) => Data::F64(v.iter().map(|&x| x as f64).collect()),
            _ => unreachable!(),
        };
        Tensor {
            shape: self.shape.clone(),
            data,
        }
    }

    /// In-place `self += other` (elementwise, same shape and dtype).
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "add_assign",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        match (&mut self.data, &other.data) {
            (Data::F32(a), Data::F32(b)) => a.iter_mut().zip(b).for_each(|(x, y)| *x += y),
            (Data::F64(a), Data::F64(b)) => a.iter_mut().zip(b).for_each(|(x, y)| *x += y),
            _ => {
                return Err(Error::DTypeMismatch {
                    op: "add_assign",
                    lhs: self.dtype(),
                    rhs: other.dtype(),
                })
            }
        }
        Ok(())
    }

    pub fn fill(&mut self, value: f64) {
        match &mut self.data {
            Data::F32(v) => v.fill(value as f32),
            Data::F64(v) => v.fill(value),
        }
    }

    pub fn scale_in_place(&mut self, s: f64) {
        match &mut self.data {
            Data::F32(v) => v.iter_mut().for_each(|x| *x = (*x as f64 * s) as f32),
            Data::F64(v) => v.iter_mut().for_each(|x| *x *= s),
        }
    }

    pub fn max_abs(&self) -> f64 {
        (0..self.numel()).fold(0.0, |m, i| m.max(self.at(i).abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.numel(), other.numel(), "max_abs_diff length mismatch");
        (0..self.numel()).fold(0.0, |m, i| m.max((self.at(i) - other.at(i)).abs()))
    }

    pub fn is_finite(&self) -> bool {
        match &self.data {
            Data::F32(v) => v.iter().all(|x| x.is_finite()),
            Data::F64(v) => v.iter().all(|x| x.is_finite()),
        }
    }

    /// Little-endian raw scalar bytes, as stored in weight archives.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        match &self.data {
            Data::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            Data::F64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        }
    }

    /// Rebuild from little-endian bytes; inverse of [`Tensor::to_le_bytes`].
    pub fn from_le_bytes(shape: Vec<usize>, dtype: DType, bytes: &[u8]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if bytes.len() != numel * dtype.size_bytes() {
            return Err(Error::shape(
                "from_le_bytes",
                format!(
                    "shape {shape:?} ({dtype}) wants {} bytes, got {}",
                    numel * dtype.size_bytes(),
                    bytes.len()
                ),
            ));
        }
        let data = match dtype {
            DType::F32 => Data::F32(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            ),
            DType::F64 => Data::F64(
                bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
                    .collect(),
            ),
        };
        Tensor::new(shape, data)
    }

    /// FNV-1a over the little-endian scalar bytes.
    pub fn checksum(&self) -> u64 {
        crate::rng::fnv1a64(&self.to_le_bytes())
    }
}

/// Flat offset into a `[d0, d1]` tensor.
#[inline(always)]
pub fn idx2(shape: &[usize], i0: usize, i1: usize) -> usize {
    i0 * shape[1] + i1
}

/// Flat offset into a `[d0, d1, d2, d3]` tensor.
#[inline(always)]
pub fn idx4(shape: &[usize], i0: usize, i1: usize, i2: usize, i3: usize) -> usize {
    ((i0 * shape[1] + i1) * shape[2] + i2) * shape[3] + i3
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constructor_validates_shape() {
        assert!(Tensor::new(vec![2, 3], Data::F32(vec![0.0; 6])).is_ok());
        assert!(Tensor::new(vec![2, 3], Data::F32(vec![0.0; 5])).is_err());
        assert!(Tensor::new(vec![], Data::F32(vec![])).is_err());
        assert!(Tensor::new(vec![2, 0], Data::F32(vec![])).is_err());
        assert!(Tensor::new(vec![1; 6], Data::F32(vec![0.0])).is_err());
    }

    #[test]
    fn le_byte_round_trip_is_bitwise() {
        let t = Tensor::from_f32(&[3], vec![1.5, -0.0, f32::MIN_POSITIVE]);
        let b = t.to_le_bytes();
        let back = Tensor::from_le_bytes(vec![3], DType::F32, &b).unwrap();
        assert_eq!(t, back);
        let t64 = Tensor::from_f64(&[2], vec![std::f64::consts::PI, -1e-300]);
        let back64 =
            Tensor::from_le_bytes(vec![2], DType::F64, &t64.to_le_bytes()).unwrap();
        assert_eq!(t64, back64);
    }

    #[test]
    fn add_assign_checks_dtype() {
        let mut a = Tensor::zeros(&[2], DType::F32);
        let b = Tensor::zeros(&[2], DType::F64);
        assert!(a.add_assign(&b).is_err());
    }

    #[test]
    fn reshape_preserves_data() {
        let t = Tensor::from_f64(&[2, 3], (0..6).map(|i| i as f64).collect());
        let r = t.reshaped(&[3, 2]).unwrap();
        assert_eq!(r.shape(), &[3, 2]);
        assert_eq!(r.to_f64_vec(), t.to_f64_vec());
        assert!(t.reshaped(&[4, 2]).is_err());
    }
}
