use std::fmt;
use std::io::{Read, Write};
use std::iter::Sum;

use num_traits::{Float, NumAssign};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Scalar type a [`Graph`](super::Graph) computes in.
///
/// Training runs in `f32`. Gradient verification instantiates the same
/// model code at `f64` so central differences are not swamped by rounding.
pub trait Real:
    Float + NumAssign + Default + Sum + Send + Sync + fmt::Debug + fmt::Display + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn from_f32(v: f32) -> Self;
    fn as_f32(self) -> f32;
}

impl Real for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn from_f32(v: f32) -> Self {
        v
    }
    #[inline]
    fn as_f32(self) -> f32 {
        self
    }
}

impl Real for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    #[inline]
    fn from_f32(v: f32) -> Self {
        v as f64
    }
    #[inline]
    fn as_f32(self) -> f32 {
        self as f32
    }
}

pub const MAX_RANK: usize = 3;
const MAGIC: &[u8; 4] = b"EDT1";

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.len() > MAX_RANK {
        return Err(Error::shape(
            "tensor",
            format!("rank must be 1..={MAX_RANK}, got {shape:?}"),
        ));
    }
    if shape.contains(&0) {
        return Err(Error::shape(
            "tensor",
            format!("extents must be positive, got {shape:?}"),
        ));
    }
    Ok(())
}

/// Dense row-major `f32` array of rank 1..=3 with an optional gradient buffer.
///
/// `grad` is present iff the tensor requires gradients.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    grad: Option<Vec<f32>>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("requires_grad", &self.requires_grad())
            .finish_non_exhaustive()
    }
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f32>) -> Result<Self> {
        let shape = shape.into();
        check_shape(&shape)?;
        if numel(&shape) != data.len() {
            return Err(Error::shape(
                "tensor",
                format!(
                    "shape {shape:?} needs {} values, got {}",
                    numel(&shape),
                    data.len()
                ),
            ));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        check_shape(&shape)?;
        let n = numel(&shape);
        Tensor::new(shape, vec![0.0; n])
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f32) -> Result<Self> {
        let shape = shape.into();
        check_shape(&shape)?;
        let n = numel(&shape);
        Tensor::new(shape, vec![value; n])
    }

    pub fn scalar(value: f32) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            grad: None,
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> f32) -> Result<Self> {
        let shape = shape.into();
        check_shape(&shape)?;
        let data = (0..numel(&shape)).map(&mut f).collect();
        Tensor::new(shape, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Rows of a rank-2 tensor (first extent for other ranks).
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Size of the last dimension.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("rank >= 1")
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn item(&self) -> f32 {
        self.data[0]
    }

    pub fn reshaped(&self, shape: impl Into<Vec<usize>>) -> Result<Tensor> {
        let mut t = Tensor::new(shape, self.data.clone())?;
        t.grad = None;
        Ok(t)
    }

    pub fn requires_grad(&self) -> bool {
        self.grad.is_some()
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        match (on, self.grad.is_some()) {
            (true, false) => self.grad = Some(vec![0.0; self.data.len()]),
            (false, true) => self.grad = None,
            _ => {}
        }
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Adds `delta` into the gradient buffer. No-op on tensors that do not
    /// require gradients.
    pub fn accumulate_grad(&mut self, delta: &[f32]) -> Result<()> {
        let Some(g) = self.grad.as_mut() else {
            return Ok(());
        };
        if g.len() != delta.len() {
            return Err(Error::shape(
                "accumulate_grad",
                format!("grad has {} entries, delta has {}", g.len(), delta.len()),
            ));
        }
        for (a, b) in g.iter_mut().zip(delta) {
            *a += *b;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// SHA-256 over shape and raw little-endian values.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        self.hash_into(&mut h);
        hex::encode(h.finalize())
    }

    pub(crate) fn hash_into(&self, h: &mut Sha256) {
        for &d in &self.shape {
            h.update((d as u64).to_le_bytes());
        }
        for v in &self.data {
            h.update(v.to_le_bytes());
        }
    }

    /// Serializes as `EDT1`, rank (u32), extents (u32 each), then f32 values,
    /// all little-endian.
    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 4 * self.shape.len() + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.shape.len() as u32).to_le_bytes());
        for &d in &self.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Tensor> {
        let fmt_err = |detail: String| Error::Format {
            what: "tensor",
            detail,
        };
        let mut word = [0u8; 4];
        r.read_exact(&mut word)
            .map_err(|e| fmt_err(format!("truncated header: {e}")))?;
        if &word != MAGIC {
            return Err(fmt_err(format!("bad magic {:?}", word)));
        }
        r.read_exact(&mut word)
            .map_err(|e| fmt_err(format!("truncated rank: {e}")))?;
        let rank = u32::from_le_bytes(word) as usize;
        if rank == 0 || rank > MAX_RANK {
            return Err(fmt_err(format!("rank {rank} out of range")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            r.read_exact(&mut word)
                .map_err(|e| fmt_err(format!("truncated extents: {e}")))?;
            shape.push(u32::from_le_bytes(word) as usize);
        }
        check_shape(&shape)?;
        let n = numel(&shape);
        let mut bytes = vec![0u8; n * 4];
        r.read_exact(&mut bytes)
            .map_err(|e| fmt_err(format!("truncated payload: {e}")))?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Tensor::new(shape, data)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Tensor> {
        let t = Tensor::read_from(bytes)?;
        let expected = 8 + 4 * t.shape.len() + 4 * t.numel();
        if bytes.len() != expected {
            return Err(Error::Format {
                what: "tensor",
                detail: format!("{} trailing bytes", bytes.len() - expected),
            });
        }
        Ok(t)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &std::path::Path) -> Result<Tensor> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Tensor::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![], vec![]).is_err());
        assert!(Tensor::new(vec![1, 1, 1, 1], vec![0.0]).is_err());
        assert!(Tensor::new(vec![0, 3], vec![]).is_err());
    }

    #[test]
    fn serialization_layout() {
        let t = Tensor::new(vec![2, 1], vec![1.0, -2.5]).unwrap();
        let b = t.to_bytes();
        assert_eq!(&b[..4], b"EDT1");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(b[12..16].try_into().unwrap()), 1);
        assert_eq!(f32::from_le_bytes(b[16..20].try_into().unwrap()), 1.0);
        assert_eq!(b.len(), 24);
        assert_eq!(Tensor::from_bytes(&b).unwrap(), t);
    }

    #[test]
    fn tampered_magic_rejected() {
        let mut b = Tensor::scalar(1.0).to_bytes();
        b[0] = b'X';
        assert!(Tensor::from_bytes(&b).is_err());
        let b = Tensor::scalar(1.0).to_bytes();
        assert!(Tensor::from_bytes(&b[..b.len() - 1]).is_err());
    }

    #[test]
    fn grad_present_iff_requires_grad() {
        let mut t = Tensor::zeros(vec![3]).unwrap();
        assert!(t.grad().is_none());
        t.accumulate_grad(&[1.0, 1.0, 1.0]).unwrap();
        assert!(t.grad().is_none());
        t.set_requires_grad(true);
        t.accumulate_grad(&[1.0, 2.0, 3.0]).unwrap();
        t.accumulate_grad(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(t.grad().unwrap(), &[2.0, 4.0, 6.0]);
        t.set_requires_grad(false);
        assert!(t.grad().is_none());
    }

    proptest::proptest! {
        #[test]
        fn serialization_roundtrip(dims in proptest::collection::vec(1usize..5, 1..=3), seed in 0u64..1000) {
            let n: usize = dims.iter().product();
            let t = Tensor::new(dims.clone(), (0..n).map(|i| (i as f32 + seed as f32) * 0.37 - 3.0).collect()).unwrap();
            let back = Tensor::from_bytes(&t.to_bytes()).unwrap();
            proptest::prop_assert_eq!(back.to_bytes(), t.to_bytes());
        }
    }
}
