//! Dense rank-4 tensors in `(n, c, h, w)` row-major layout and a small
//! reverse-mode autodiff tape over the operations the saliency network uses.
//!
//! Everything is generic over [`Real`] so the same graph code runs at 32-bit
//! for training and at 64-bit for finite-difference checking.

mod batchnorm;
mod conv;
mod gradcheck;
mod graph;
mod ops;

pub use batchnorm::{BatchStats, BnMode, BN_EPSILON, BN_MOMENTUM};
pub use conv::ConvSpec;
pub use gradcheck::{grad_check, one_sided_slopes, EntryCheck, GradCheckReport};
pub use graph::{Graph, NodeId};
pub use ops::resize_bilinear;

use std::fmt;

use crate::error::{Error, Result};

/// Floating-point element type usable in tensors and graphs.
pub trait Real:
    num_traits::Float
    + Default
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + std::iter::Sum
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `c = a * b (+ c when accumulate)` for an `m x k` by `k x n` product.
    /// Each operand is described by (data, row stride, column stride).
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: (&[Self], usize, usize),
        b: (&[Self], usize, usize),
        c: (&mut [Self], usize, usize),
        accumulate: bool,
    );
}

fn check_extent(len: usize, rows: usize, cols: usize, rs: usize, cs: usize, what: &str) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows - 1) * rs + (cols - 1) * cs;
    assert!(last < len, "gemm operand {what} out of bounds: {last} >= {len}");
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }

            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: (&[Self], usize, usize),
                b: (&[Self], usize, usize),
                c: (&mut [Self], usize, usize),
                accumulate: bool,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                check_extent(a.0.len(), m, k, a.1, a.2, "a");
                check_extent(b.0.len(), k, n, b.1, b.2, "b");
                check_extent(c.0.len(), m, n, c.1, c.2, "c");
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: every index the kernel touches is within the extents
                // asserted above, and `c` is uniquely borrowed.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.0.as_ptr(),
                        a.1 as isize,
                        a.2 as isize,
                        b.0.as_ptr(),
                        b.1 as isize,
                        b.2 as isize,
                        beta,
                        c.0.as_mut_ptr(),
                        c.1 as isize,
                        c.2 as isize,
                    );
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// Tensor extents `(n, c, h, w)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
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

    pub const fn scalar() -> Self {
        Dims::new(1, 1, 1, 1)
    }

    pub fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn hw(&self) -> usize {
        self.h * self.w
    }

    pub fn as_array(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn with_channels(self, c: usize) -> Self {
        Dims { c, ..self }
    }

    pub fn with_hw(self, h: usize, w: usize) -> Self {
        Dims { h, w, ..self }
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c + c) * self.h + h) * self.w + w
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

/// Dense rank-4 tensor with an optional gradient slot.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    dims: Dims,
    data: Vec<T>,
    grad: Option<Vec<T>>,
}

impl<T: Real> Tensor<T> {
    pub fn new(dims: Dims, data: Vec<T>) -> Result<Self> {
        for (axis, v) in [("n", dims.n), ("c", dims.c), ("h", dims.h), ("w", dims.w)] {
            if v == 0 {
                return Err(Error::shape(axis, "extent must be positive"));
            }
        }
        if data.len() != dims.len() {
            return Err(Error::shape(
                "data",
                format!("{} values for dims {dims} (need {})", data.len(), dims.len()),
            ));
        }
        Ok(Tensor { dims, data, grad: None })
    }

    pub fn full(dims: Dims, value: T) -> Self {
        Tensor::new(dims, vec![value; dims.len()]).expect("full: dims must be positive")
    }

    pub fn zeros(dims: Dims) -> Self {
        Self::full(dims, T::zero())
    }

    pub fn scalar(value: T) -> Self {
        Self::full(Dims::scalar(), value)
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(dims.len());
        for n in 0..dims.n {
            for c in 0..dims.c {
                for h in 0..dims.h {
                    for w in 0..dims.w {
                        data.push(f(n, c, h, w));
                    }
                }
            }
        }
        Tensor::new(dims, data).expect("from_fn: dims must be positive")
    }

    pub fn dims(&self) -> Dims {
        self.dims
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Option<Vec<T>>) -> Result<()> {
        if let Some(g) = &grad {
            if g.len() != self.data.len() {
                return Err(Error::shape(
                    "grad",
                    format!("{} values for {} data entries", g.len(), self.data.len()),
                ));
            }
        }
        self.grad = grad;
        Ok(())
    }

    pub fn take_grad(&mut self) -> Option<Vec<T>> {
        self.grad.take()
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.dims.offset(n, c, h, w)]
    }

    /// Scalar value of a single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on a tensor with dims {}", self.dims);
        self.data[0]
    }

    pub fn reshape(self, dims: Dims) -> Result<Self> {
        Tensor::new(dims, self.data)
    }

    /// Contiguous slice of the sample `n`.
    pub fn sample(&self, n: usize) -> &[T] {
        let per = self.dims.c * self.dims.hw();
        &self.data[n * per..(n + 1) * per]
    }

    /// Plane `(n, c)` as a contiguous slice.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let hw = self.dims.hw();
        let start = self.dims.offset(n, c, 0, 0);
        &self.data[start..start + hw]
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims,
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
            grad: self
                .grad
                .as_ref()
                .map(|g| g.iter().map(|v| U::from_f64(v.as_f64())).collect()),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
            grad: None,
        }
    }

    /// Stacks equally-shaped tensors along the batch axis.
    pub fn stack(items: &[&Tensor<T>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::Arity("stack of zero tensors".into()))?;
        let d = first.dims;
        let mut data = Vec::with_capacity(d.len() * items.len());
        let mut n = 0;
        for t in items {
            if (t.dims.c, t.dims.h, t.dims.w) != (d.c, d.h, d.w) {
                return Err(Error::shape("c/h/w", format!("cannot stack {} with {}", t.dims, d)));
            }
            data.extend_from_slice(&t.data);
            n += t.dims.n;
        }
        Tensor::new(Dims { n, ..d }, data)
    }
}
