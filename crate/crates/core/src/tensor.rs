//! Dense row-major tensors and the `UVSG` tensor file format.
//!
//! File layout: magic `UVSG`, one byte format version, one byte dtype code
//! (0 = f32, 1 = f64, 2 = u8), one byte rank, `rank` little-endian `u32`
//! extents, then the row-major payload in little-endian order.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::{DType, Scalar};

pub const MAGIC: &[u8; 4] = b"UVSG";
pub const FORMAT_VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if shape.contains(&0) {
            return Err(Error::shape(format!("zero extent in shape {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!("shape {shape:?} holds {numel} values, got {}", data.len())));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        assert!(numel > 0, "zero extent in shape {shape:?}");
        Self { shape, data: vec![value; numel] }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        assert!(numel > 0, "zero extent in shape {shape:?}");
        Self { shape, data: (0..numel).map(&mut f).collect() }
    }

    pub fn scalar(value: T) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64()).unwrap_or_else(U::nan)).collect(),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::from_usize(self.len()).unwrap()
    }

    pub fn min_max(&self) -> (T, T) {
        self.data.iter().fold((T::infinity(), T::neg_infinity()), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        assert_eq!(self.shape, other.shape, "max_abs_diff: shape mismatch");
        self.data.iter().zip(&other.data).fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    /// Fails on the first NaN or infinity.
    pub fn check_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::NonFinite(format!("{what}: element {i} is {}", self.data[i]))),
        }
    }

    /// Spatial extents `(h, w)` of a `[.., H, W]` tensor.
    pub fn hw(&self) -> (usize, usize) {
        let r = self.rank();
        assert!(r >= 2, "tensor of rank {r} has no spatial extents");
        (self.shape[r - 2], self.shape[r - 1])
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == T::zero() || v == T::one())
    }

    /// Serializes with the given payload dtype. `U8` rounds and saturates.
    pub fn encode(&self, dtype: DType) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 4 * self.rank() + dtype.size() * self.len());
        out.extend_from_slice(MAGIC);
        out.push(FORMAT_VERSION);
        out.push(dtype as u8);
        out.push(self.rank() as u8);
        for &d in &self.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        match dtype {
            DType::F32 => self.data.iter().for_each(|v| (v.as_f64() as f32).write_le(&mut out)),
            DType::F64 => self.data.iter().for_each(|v| v.as_f64().write_le(&mut out)),
            DType::U8 => self.data.iter().for_each(|v| out.push(v.as_f64().round().clamp(0.0, 255.0) as u8)),
        }
        out
    }

    /// Parses one tensor, returning it with the number of bytes consumed.
    pub fn decode(bytes: &[u8]) -> Result<(Self, usize)> {
        let fmt = |m: &str| Error::Format(m.to_string());
        if bytes.len() < 7 || &bytes[..4] != MAGIC {
            return Err(fmt("bad magic, expected UVSG"));
        }
        if bytes[4] != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported version {}", bytes[4])));
        }
        let dtype =
            DType::from_code(bytes[5]).ok_or_else(|| Error::Format(format!("unknown dtype code {}", bytes[5])))?;
        let rank = bytes[6] as usize;
        let mut off = 7;
        if bytes.len() < off + 4 * rank {
            return Err(fmt("truncated header"));
        }
        let shape: Vec<usize> = (0..rank)
            .map(|i| {
                let b = &bytes[off + 4 * i..off + 4 * i + 4];
                u32::from_le_bytes(b.try_into().unwrap()) as usize
            })
            .collect();
        off += 4 * rank;
        let numel: usize = shape.iter().product();
        let need = numel * dtype.size();
        if bytes.len() < off + need {
            return Err(fmt("truncated payload"));
        }
        let payload = &bytes[off..off + need];
        let data: Vec<T> = match dtype {
            DType::F32 => payload.chunks_exact(4).map(|c| T::from_f32(f32::read_le(c)).unwrap()).collect(),
            DType::F64 => payload.chunks_exact(8).map(|c| T::from_f64(f64::read_le(c)).unwrap()).collect(),
            DType::U8 => payload.iter().map(|&b| T::from_u8(b).unwrap()).collect(),
        };
        Ok((Self::new(shape, data)?, off + need))
    }

    pub fn save(&self, path: impl AsRef<Path>, dtype: DType) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.encode(dtype)).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let (t, used) = Self::decode(&bytes)?;
        if used != bytes.len() {
            return Err(Error::Format(format!("{}: {} trailing bytes", path.display(), bytes.len() - used)));
        }
        Ok(t)
    }
}
