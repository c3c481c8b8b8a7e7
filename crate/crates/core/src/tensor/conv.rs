//! 2-D convolution and transposed convolution via im2col + gemm.

use serde::{Deserialize, Serialize};

use super::{Dims, Real};
use crate::error::{Error, Result};

/// Geometry of a (possibly transposed) 2-D convolution.
///
/// Weight layout is `(out, in, kh, kw)` for regular convolutions and
/// `(in, out, kh, kw)` for transposed ones, so that in both cases the weight
/// reshapes to the gemm operand without a permutation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: usize,
    pub transposed: bool,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel: (kernel, kernel),
            stride,
            padding,
            transposed: false,
        }
    }

    /// Same-size `k x k` convolution (`k` odd, stride 1, pad `k / 2`).
    pub fn same(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self::new(in_channels, out_channels, kernel, 1, kernel / 2)
    }

    /// Upsampling deconvolution by `factor`: kernel `2 * factor`, pad `factor / 2`.
    pub fn upsample(channels_in: usize, channels_out: usize, factor: usize) -> Self {
        ConvSpec {
            in_channels: channels_in,
            out_channels: channels_out,
            kernel: (2 * factor, 2 * factor),
            stride: factor,
            padding: factor / 2,
            transposed: true,
        }
    }

    pub fn weight_dims(&self) -> Dims {
        let (kh, kw) = self.kernel;
        if self.transposed {
            Dims::new(self.in_channels, self.out_channels, kh, kw)
        } else {
            Dims::new(self.out_channels, self.in_channels, kh, kw)
        }
    }

    /// Xavier fan-in and fan-out of the weight.
    pub fn fans(&self) -> (usize, usize) {
        let k = self.kernel.0 * self.kernel.1;
        (self.in_channels * k, self.out_channels * k)
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.stride == 0 {
            return Err(Error::Spec("stride must be positive".into()));
        }
        let (kh, kw) = self.kernel;
        if kh == 0 || kw == 0 {
            return Err(Error::Spec("kernel extent must be positive".into()));
        }
        if self.transposed {
            let out = |len: usize, k: usize| -> Result<usize> {
                let full = (len - 1) * self.stride + k;
                full.checked_sub(2 * self.padding)
                    .filter(|&v| v > 0)
                    .ok_or_else(|| Error::Spec(format!("transposed output of {len} is empty")))
            };
            Ok((out(h, kh)?, out(w, kw)?))
        } else {
            let out = |len: usize, k: usize| -> Result<usize> {
                let padded = len + 2 * self.padding;
                if padded < k {
                    return Err(Error::Spec(format!("kernel {k} exceeds padded extent {padded}")));
                }
                if !(padded - k).is_multiple_of(self.stride) {
                    return Err(Error::Spec(format!(
                        "non-integral output size for extent {len}, kernel {k}, stride {}, pad {}",
                        self.stride, self.padding
                    )));
                }
                Ok((padded - k) / self.stride + 1)
            };
            Ok((out(h, kh)?, out(w, kw)?))
        }
    }

    pub(crate) fn check_input(&self, x: Dims, weight: Dims, bias: Option<Dims>) -> Result<Dims> {
        if x.c != self.in_channels {
            return Err(Error::shape(
                "channel",
                format!("input has {} channels, conv expects {}", x.c, self.in_channels),
            ));
        }
        let want = self.weight_dims();
        if weight != want {
            let axis = if weight.n != want.n {
                "weight.0"
            } else if weight.c != want.c {
                "weight.1"
            } else {
                "weight.kernel"
            };
            return Err(Error::shape(axis, format!("weight dims {weight}, expected {want}")));
        }
        if let Some(b) = bias {
            if b.len() != self.out_channels {
                return Err(Error::shape(
                    "bias",
                    format!("bias has {} values for {} output channels", b.len(), self.out_channels),
                ));
            }
        }
        let (h, w) = self.output_hw(x.h, x.w)?;
        Ok(Dims::new(x.n, self.out_channels, h, w))
    }
}

/// The "image side" of an im2col transform: a `(c, h, w)` plane stack whose
/// patches produce a `(c*kh*kw) x (oh*ow)` column matrix.
#[derive(Clone, Copy, Debug)]
struct Patches {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Patches {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Source index along one axis, or `None` when it falls into padding.
    #[inline]
    fn src(o: usize, k: usize, stride: usize, pad: usize, len: usize) -> Option<usize> {
        let p = o * stride + k;
        if p < pad || p - pad >= len {
            None
        } else {
            Some(p - pad)
        }
    }

    fn im2col<T: Real>(&self, img: &[T], col: &mut [T]) {
        let cols = self.cols();
        let mut row = 0;
        for c in 0..self.c {
            let plane = &img[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let dst = &mut col[row * cols..(row + 1) * cols];
                    for oy in 0..self.oh {
                        let line = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        match Self::src(oy, ki, self.stride, self.pad, self.h) {
                            None => line.iter_mut().for_each(|v| *v = T::zero()),
                            Some(iy) => {
                                let src_row = &plane[iy * self.w..(iy + 1) * self.w];
                                for (ox, v) in line.iter_mut().enumerate() {
                                    *v = match Self::src(ox, kj, self.stride, self.pad, self.w) {
                                        Some(ix) => src_row[ix],
                                        None => T::zero(),
                                    };
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    /// Scatter-adds a column matrix back onto the image.
    fn col2im<T: Real>(&self, col: &[T], img: &mut [T]) {
        let cols = self.cols();
        let mut row = 0;
        for c in 0..self.c {
            let plane = &mut img[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let src = &col[row * cols..(row + 1) * cols];
                    for oy in 0..self.oh {
                        let Some(iy) = Self::src(oy, ki, self.stride, self.pad, self.h) else {
                            continue;
                        };
                        let line = &src[oy * self.ow..(oy + 1) * self.ow];
                        let dst_row = &mut plane[iy * self.w..(iy + 1) * self.w];
                        for (ox, &v) in line.iter().enumerate() {
                            if let Some(ix) = Self::src(ox, kj, self.stride, self.pad, self.w) {
                                dst_row[ix] += v;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn patches(spec: &ConvSpec, x: Dims, y: Dims) -> Patches {
    // For a transposed conv the roles swap: the output is the image side.
    let (img, cols) = if spec.transposed { (y, x) } else { (x, y) };
    Patches {
        c: img.c,
        h: img.h,
        w: img.w,
        kh: spec.kernel.0,
        kw: spec.kernel.1,
        stride: spec.stride,
        pad: spec.padding,
        oh: cols.h,
        ow: cols.w,
    }
}

pub(crate) fn conv_forward<T: Real>(
    spec: &ConvSpec,
    x: &[T],
    xd: Dims,
    weight: &[T],
    bias: Option<&[T]>,
    yd: Dims,
) -> Vec<T> {
    let p = patches(spec, xd, yd);
    let k = p.rows();
    let mut col = vec![T::zero(); k * p.cols()];
    let mut y = vec![T::zero(); yd.len()];
    let x_per = xd.c * xd.hw();
    let y_per = yd.c * yd.hw();
    for n in 0..xd.n {
        let xs = &x[n * x_per..(n + 1) * x_per];
        let ys = &mut y[n * y_per..(n + 1) * y_per];
        if spec.transposed {
            // col (K x Pin) = W^T (K x Ci) . x (Ci x Pin); y = col2im(col)
            let pin = xd.hw();
            T::gemm(k, xd.c, pin, (weight, 1, k), (xs, pin, 1), (&mut col, pin, 1), false);
            p.col2im(&col, ys);
        } else {
            // y (Co x P) = W (Co x K) . col (K x P)
            p.im2col(xs, &mut col);
            let pout = yd.hw();
            T::gemm(yd.c, k, pout, (weight, k, 1), (&col, pout, 1), (ys, pout, 1), false);
        }
    }
    if let Some(b) = bias {
        let hw = yd.hw();
        for (i, chunk) in y.chunks_mut(hw).enumerate() {
            let bv = b[i % yd.c];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
    }
    y
}

pub(crate) struct ConvGrads<T> {
    pub x: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward<T: Real>(
    spec: &ConvSpec,
    x: &[T],
    xd: Dims,
    weight: &[T],
    yd: Dims,
    dy: &[T],
    want: (bool, bool, bool),
) -> ConvGrads<T> {
    let p = patches(spec, xd, yd);
    let k = p.rows();
    let mut col = vec![T::zero(); k * p.cols()];
    let mut dcol = vec![T::zero(); k * p.cols()];
    let mut dx = want.0.then(|| vec![T::zero(); xd.len()]);
    let mut dw = want.1.then(|| vec![T::zero(); weight.len()]);
    let x_per = xd.c * xd.hw();
    let y_per = yd.c * yd.hw();
    for n in 0..xd.n {
        let xs = &x[n * x_per..(n + 1) * x_per];
        let dys = &dy[n * y_per..(n + 1) * y_per];
        if spec.transposed {
            let pin = xd.hw();
            p.im2col(dys, &mut dcol);
            if let Some(dx) = dx.as_mut() {
                // dx (Ci x Pin) = W (Ci x K) . dcol (K x Pin)
                let dxs = &mut dx[n * x_per..(n + 1) * x_per];
                T::gemm(xd.c, k, pin, (weight, k, 1), (&dcol, pin, 1), (dxs, pin, 1), false);
            }
            if let Some(dw) = dw.as_mut() {
                // dW (Ci x K) += x (Ci x Pin) . dcol^T (Pin x K)
                T::gemm(xd.c, pin, k, (xs, pin, 1), (&dcol, 1, pin), (dw, k, 1), true);
            }
        } else {
            let pout = yd.hw();
            if let Some(dw) = dw.as_mut() {
                // dW (Co x K) += dy (Co x P) . col^T (P x K)
                p.im2col(xs, &mut col);
                T::gemm(yd.c, pout, k, (dys, pout, 1), (&col, 1, pout), (dw, k, 1), true);
            }
            if let Some(dx) = dx.as_mut() {
                // dcol (K x P) = W^T (K x Co) . dy (Co x P)
                T::gemm(
                    k,
                    yd.c,
                    pout,
                    (weight, 1, k),
                    (dys, pout, 1),
                    (&mut dcol, pout, 1),
                    false,
                );
                p.col2im(&dcol, &mut dx[n * x_per..(n + 1) * x_per]);
            }
        }
    }
    let db = want.2.then(|| {
        let mut db = vec![T::zero(); yd.c];
        let hw = yd.hw();
        for (i, chunk) in dy.chunks(hw).enumerate() {
            let mut s = T::zero();
            for &v in chunk {
                s += v;
            }
            db[i % yd.c] += s;
        }
        db
    });
    ConvGrads {
        x: dx,
        weight: dw,
        bias: db,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_size_formulas() {
        assert_eq!(ConvSpec::same(1, 1, 3).output_hw(7, 5).unwrap(), (7, 5));
        assert_eq!(ConvSpec::new(1, 1, 3, 2, 1).output_hw(9, 9).unwrap(), (5, 5));
        for s in [2, 4, 8, 16] {
            assert_eq!(ConvSpec::upsample(1, 1, s).output_hw(4, 3).unwrap(), (4 * s, 3 * s));
        }
    }

    #[test]
    fn non_integral_output_is_a_spec_error() {
        let err = ConvSpec::new(1, 1, 3, 2, 0).output_hw(6, 6).unwrap_err();
        assert!(matches!(err, Error::Spec(_)));
    }

    #[test]
    fn mismatched_channels_name_the_axis() {
        let spec = ConvSpec::same(3, 4, 3);
        let err = spec
            .check_input(Dims::new(1, 2, 4, 4), spec.weight_dims(), None)
            .unwrap_err();
        assert!(matches!(err, Error::Shape { axis: "channel", .. }));
        let err = spec
            .check_input(Dims::new(1, 3, 4, 4), Dims::new(4, 3, 5, 5), None)
            .unwrap_err();
        assert!(matches!(
            err,
            Error::Shape {
                axis: "weight.kernel",
                ..
            }
        ));
    }

    #[test]
    fn transposed_weight_layout_is_in_out() {
        assert_eq!(ConvSpec::upsample(3, 5, 2).weight_dims(), Dims::new(3, 5, 4, 4));
        assert_eq!(ConvSpec::same(3, 5, 3).weight_dims(), Dims::new(5, 3, 3, 3));
    }
}
