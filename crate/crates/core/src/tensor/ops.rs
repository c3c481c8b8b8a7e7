use super::{Dims, Real, Tensor};
use crate::error::{Error, Result};

#[inline]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `ln(e^a + e^b)` without overflow.
#[inline]
pub(crate) fn log_sum_exp2<T: Real>(a: T, b: T) -> T {
    let m = a.max(b);
    m + (-(a - b).abs()).exp().ln_1p()
}

pub(crate) fn maxpool2_forward<T: Real>(x: &[T], d: Dims) -> (Vec<T>, Vec<u32>, Dims) {
    let od = d.with_hw(d.h / 2, d.w / 2);
    let mut y = Vec::with_capacity(od.len());
    let mut arg = Vec::with_capacity(od.len());
    for n in 0..d.n {
        for c in 0..d.c {
            for oy in 0..od.h {
                for ox in 0..od.w {
                    let mut best = d.offset(n, c, 2 * oy, 2 * ox);
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = d.offset(n, c, 2 * oy + dy, 2 * ox + dx);
                        if x[i] > x[best] {
                            best = i;
                        }
                    }
                    y.push(x[best]);
                    arg.push(best as u32);
                }
            }
        }
    }
    (y, arg, od)
}

/// Channel softmax; `x` has `c` channels per pixel.
pub(crate) fn softmax_channels_forward<T: Real>(x: &[T], d: Dims) -> Vec<T> {
    let hw = d.hw();
    let mut y = vec![T::zero(); x.len()];
    for n in 0..d.n {
        for p in 0..hw {
            let idx = |c: usize| (n * d.c + c) * hw + p;
            let mut m = T::neg_infinity();
            for c in 0..d.c {
                m = m.max(x[idx(c)]);
            }
            let mut z = T::zero();
            for c in 0..d.c {
                let e = (x[idx(c)] - m).exp();
                y[idx(c)] = e;
                z += e;
            }
            for c in 0..d.c {
                y[idx(c)] = y[idx(c)] / z;
            }
        }
    }
    y
}

pub(crate) fn softmax_channels_backward<T: Real>(y: &[T], d: Dims, dy: &[T]) -> Vec<T> {
    let hw = d.hw();
    let mut dx = vec![T::zero(); y.len()];
    for n in 0..d.n {
        for p in 0..hw {
            let idx = |c: usize| (n * d.c + c) * hw + p;
            let mut dot = T::zero();
            for c in 0..d.c {
                dot += y[idx(c)] * dy[idx(c)];
            }
            for c in 0..d.c {
                dx[idx(c)] = y[idx(c)] * (dy[idx(c)] - dot);
            }
        }
    }
    dx
}

/// Class-balanced two-class cross-entropy summed over all pixels and samples.
///
/// Foreground pixels are weighted by `betas[n]`, background by `1 - betas[n]`.
pub(crate) fn balanced_ce_forward<T: Real>(logits: &[T], d: Dims, target: &[u8], betas: &[T]) -> T {
    let hw = d.hw();
    let mut total = 0.0f64;
    for n in 0..d.n {
        let beta = betas[n];
        let mut sample = T::zero();
        for p in 0..hw {
            let s0 = logits[(n * 2) * hw + p];
            let s1 = logits[(n * 2 + 1) * hw + p];
            let lse = log_sum_exp2(s0, s1);
            sample += if target[n * hw + p] != 0 {
                beta * (lse - s1)
            } else {
                (T::one() - beta) * (lse - s0)
            };
        }
        total += sample.as_f64();
    }
    T::from_f64(total)
}

pub(crate) fn balanced_ce_backward<T: Real>(logits: &[T], d: Dims, target: &[u8], betas: &[T], upstream: T) -> Vec<T> {
    let hw = d.hw();
    let mut dx = vec![T::zero(); logits.len()];
    for n in 0..d.n {
        let beta = betas[n];
        for p in 0..hw {
            let i0 = (n * 2) * hw + p;
            let i1 = i0 + hw;
            let p1 = sigmoid(logits[i1] - logits[i0]);
            let p0 = T::one() - p1;
            let (w, fg) = if target[n * hw + p] != 0 {
                (beta, true)
            } else {
                (T::one() - beta, false)
            };
            let (t0, t1) = if fg {
                (T::zero(), T::one())
            } else {
                (T::one(), T::zero())
            };
            dx[i0] = upstream * w * (p0 - t0);
            dx[i1] = upstream * w * (p1 - t1);
        }
    }
    dx
}

/// Bilinear resize with half-pixel centers and edge clamping.
///
/// Used for preprocessing only; it is not recorded on any graph.
pub fn resize_bilinear<T: Real>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::shape("h/w", "resize target must be non-empty"));
    }
    let d = x.dims();
    if (d.h, d.w) == (out_h, out_w) {
        return Tensor::new(d, x.data().to_vec());
    }
    let axis = |out: usize, len: usize| -> Vec<(usize, usize, T)> {
        let scale = len as f64 / out as f64;
        (0..out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(len - 1);
                let i1 = (i0 + 1).min(len - 1);
                (i0, i1, T::from_f64(src - i0 as f64))
            })
            .collect()
    };
    let ys = axis(out_h, d.h);
    let xs = axis(out_w, d.w);
    let od = d.with_hw(out_h, out_w);
    let mut out = Vec::with_capacity(od.len());
    for n in 0..d.n {
        for c in 0..d.c {
            let plane = x.plane(n, c);
            for &(y0, y1, fy) in &ys {
                for &(x0, x1, fx) in &xs {
                    let a = plane[y0 * d.w + x0];
                    let b = plane[y0 * d.w + x1];
                    let cc = plane[y1 * d.w + x0];
                    let dd = plane[y1 * d.w + x1];
                    let top = a + (b - a) * fx;
                    let bottom = cc + (dd - cc) * fx;
                    out.push(top + (bottom - top) * fy);
                }
            }
        }
    }
    Tensor::new(od, out)
}
