//! Dense NCHW tensors, the kernels that operate on them, and the
//! reverse-mode tape built on top.

mod autograd;
pub mod conv;
mod gemm;
pub mod loss;
pub mod norm;
pub mod ops;
pub mod pool;
pub mod resize;

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub use autograd::{backward, Var};
pub use conv::ConvGeom;
pub use loss::{LabelMap, IGNORE_INDEX};
pub use norm::BnConfig;
pub use resize::Interp;

/// Sample / channel / row / column extents.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Dims { n, c, h, w }
    }

    /// A length-`c` vector stored as `[c, 1, 1, 1]`.
    pub const fn vector(c: usize) -> Self {
        Dims::new(c, 1, 1, 1)
    }

    pub const fn scalar() -> Self {
        Dims::new(1, 1, 1, 1)
    }

    pub const fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub const fn as_array(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn with_n(self, n: usize) -> Self {
        Dims { n, ..self }
    }

    pub fn with_c(self, c: usize) -> Self {
        Dims { c, ..self }
    }

    pub fn with_hw(self, h: usize, w: usize) -> Self {
        Dims { h, w, ..self }
    }
}

impl fmt::Debug for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}, {}, {}]", self.n, self.c, self.h, self.w)
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

/// Dense row-major rank-4 array.
#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    dims: Dims,
    data: Vec<T>,
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<_> = self.data.iter().take(8).collect();
        f.debug_struct("Tensor")
            .field("dims", &self.dims)
            .field("data", &preview)
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(dims: Dims, data: Vec<T>) -> Result<Self> {
        if data.len() != dims.numel() {
            return Err(Error::shape(
                "from_vec",
                format!("{} elements for dims {dims:?}", data.len()),
            ));
        }
        Ok(Tensor { dims, data })
    }

    pub fn zeros(dims: Dims) -> Self {
        Self::full(dims, T::zero())
    }

    pub fn ones(dims: Dims) -> Self {
        Self::full(dims, T::one())
    }

    pub fn full(dims: Dims, value: T) -> Self {
        Tensor {
            dims,
            data: vec![value; dims.numel()],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self::full(Dims::scalar(), value)
    }

    pub fn vector(values: &[T]) -> Self {
        Tensor {
            dims: Dims::vector(values.len()),
            data: values.to_vec(),
        }
    }

    /// Samples `N(0, std^2)` elements.
    pub fn randn<R: Rng + ?Sized>(dims: Dims, std: f64, rng: &mut R) -> Self {
        let data = (0..dims.numel())
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::from_f64_lossy(z * std)
            })
            .collect();
        Tensor { dims, data }
    }

    /// Samples uniform elements in `[lo, hi)`.
    pub fn rand_uniform<R: Rng + ?Sized>(dims: Dims, lo: f64, hi: f64, rng: &mut R) -> Self {
        let data = (0..dims.numel())
            .map(|_| T::from_f64_lossy(rng.random_range(lo..hi)))
            .collect();
        Tensor { dims, data }
    }

    pub fn dims(&self) -> Dims {
        self.dims
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

    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.dims.c + c) * self.dims.h + h) * self.dims.w + w
    }

    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.index(n, c, h, w)]
    }

    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, value: T) {
        let i = self.index(n, c, h, w);
        self.data[i] = value;
    }

    /// The contiguous `h x w` plane for sample `n`, channel `c`.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let p = self.dims.plane();
        let start = (n * self.dims.c + c) * p;
        &self.data[start..start + p]
    }

    /// Same data, new dims with equal element count.
    pub fn reshape(self, dims: Dims) -> Result<Self> {
        Self::from_vec(dims, self.data)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims,
            data: self
                .data
                .iter()
                .map(|v| U::from_f64_lossy(v.to_f64_lossy()))
                .collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.dims != other.dims {
            return Err(Error::shape(
                "zip_map",
                format!("{:?} vs {:?}", self.dims, other.dims),
            ));
        }
        Ok(Tensor {
            dims: self.dims,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::shape(
                "add_assign",
                format!("{:?} vs {:?}", self.dims, other.dims),
            ));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.dims, other.dims, "max_abs_diff on different dims");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.to_f64_lossy() - b.to_f64_lossy()).abs())
            .fold(0.0, f64::max)
    }

    /// Copies channels `start..start + len` of every sample.
    pub fn slice_channels(&self, start: usize, len: usize) -> Result<Self> {
        let d = self.dims;
        if start + len > d.c {
            return Err(Error::shape(
                "slice_channels",
                format!("channels {start}..{} of {}", start + len, d.c),
            ));
        }
        let p = d.plane();
        let mut data = Vec::with_capacity(d.n * len * p);
        for n in 0..d.n {
            let base = (n * d.c + start) * p;
            data.extend_from_slice(&self.data[base..base + len * p]);
        }
        Ok(Tensor {
            dims: d.with_c(len),
            data,
        })
    }

    /// Stacks tensors along the channel axis.
    pub fn concat_channels(parts: &[&Tensor<T>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat_channels", "no inputs"))?;
        let d0 = first.dims;
        let mut c_total = 0;
        for t in parts {
            let d = t.dims;
            if d.n != d0.n || d.h != d0.h || d.w != d0.w {
                return Err(Error::shape(
                    "concat_channels",
                    format!("{d:?} vs {d0:?} (N, H, W must agree)"),
                ));
            }
            c_total += d.c;
        }
        let p = d0.plane();
        let mut data = Vec::with_capacity(d0.n * c_total * p);
        for n in 0..d0.n {
            for t in parts {
                let cp = t.dims.c * p;
                data.extend_from_slice(&t.data[n * cp..(n + 1) * cp]);
            }
        }
        Ok(Tensor {
            dims: d0.with_c(c_total),
            data,
        })
    }

    /// Stacks tensors with equal `[C, H, W]` along the batch axis.
    pub fn concat_batch(parts: &[&Tensor<T>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat_batch", "no inputs"))?
            .dims;
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.len()).sum());
        let mut n = 0;
        for p in parts {
            if p.dims.with_n(first.n) != first {
                return Err(Error::shape("concat_batch", format!("{:?} vs {first:?}", p.dims)));
            }
            data.extend_from_slice(&p.data);
            n += p.dims.n;
        }
        Tensor::from_vec(first.with_n(n), data)
    }

    /// Per-pixel argmax over channels, as `[N, H, W]` class indices.
    pub fn argmax_channels(&self) -> Vec<usize> {
        let d = self.dims;
        let p = d.plane();
        let mut out = vec![0usize; d.n * p];
        for n in 0..d.n {
            let mut best: Vec<T> = self.plane(n, 0).to_vec();
            let idx = &mut out[n * p..(n + 1) * p];
            for c in 1..d.c {
                for (i, &v) in self.plane(n, c).iter().enumerate() {
                    if v > best[i] {
                        best[i] = v;
                        idx[i] = c;
                    }
                }
            }
        }
        out
    }
}
