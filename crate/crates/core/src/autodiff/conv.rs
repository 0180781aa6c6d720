//! Stride-1 2-D convolution kernels (NCHW, square kernels, zero padding),
//! lowered to GEMM through im2col.

use crate::tensor::{Real, Tensor};

struct Geometry {
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    k: usize,
    ho: usize,
    wo: usize,
}

fn geometry(x_shape: &[usize], w_shape: &[usize], pad: usize) -> Geometry {
    assert_eq!(x_shape.len(), 4, "conv input must be NCHW, got {x_shape:?}");
    assert_eq!(w_shape.len(), 4, "conv weight must be OIHW, got {w_shape:?}");
    assert_eq!(x_shape[1], w_shape[1], "conv channel mismatch {x_shape:?} vs {w_shape:?}");
    assert_eq!(w_shape[2], w_shape[3], "only square kernels are supported");
    let k = w_shape[2];
    let (h, w) = (x_shape[2], x_shape[3]);
    assert!(h + 2 * pad >= k && w + 2 * pad >= k, "kernel larger than padded input");
    Geometry {
        n: x_shape[0],
        ci: x_shape[1],
        h,
        w,
        co: w_shape[0],
        k,
        ho: h + 2 * pad - k + 1,
        wo: w + 2 * pad - k + 1,
    }
}

/// Valid output-column range for kernel offset `kj` (stride 1).
#[inline]
fn valid_range(kj: usize, pad: usize, w: usize, wo: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kj);
    let hi = (w + pad).saturating_sub(kj).min(wo);
    (lo, hi.max(lo))
}

/// Unfold one `[c, h, w]` image into a `[c*k*k, ho*wo]` column matrix.
pub fn im2col<T: Real>(x: &[T], c: usize, h: usize, w: usize, k: usize, pad: usize, out: &mut [T]) {
    let ho = h + 2 * pad - k + 1;
    let wo = w + 2 * pad - k + 1;
    let plane = ho * wo;
    debug_assert_eq!(out.len(), c * k * k * plane);
    for ci in 0..c {
        let src = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst_plane = &mut out[row * plane..(row + 1) * plane];
                let (lo, hi) = valid_range(kj, pad, w, wo);
                for oy in 0..ho {
                    let dst = &mut dst_plane[oy * wo..(oy + 1) * wo];
                    let iy = oy as isize + ki as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let iy = iy as usize;
                    dst[..lo].fill(T::zero());
                    dst[hi..].fill(T::zero());
                    if hi > lo {
                        let start = iy * w + lo + kj - pad;
                        dst[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                    }
                }
            }
        }
    }
}

/// Fold a column matrix back into an image, accumulating overlaps.
fn col2im<T: Real>(col: &[T], c: usize, h: usize, w: usize, k: usize, pad: usize, out: &mut [T]) {
    let ho = h + 2 * pad - k + 1;
    let wo = w + 2 * pad - k + 1;
    let plane = ho * wo;
    out.fill(T::zero());
    for ci in 0..c {
        let dst = &mut out[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src_plane = &col[row * plane..(row + 1) * plane];
                let (lo, hi) = valid_range(kj, pad, w, wo);
                if hi <= lo {
                    continue;
                }
                for oy in 0..ho {
                    let iy = oy as isize + ki as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let start = iy as usize * w + lo + kj - pad;
                    let src = &src_plane[oy * wo + lo..oy * wo + hi];
                    for (d, &s) in dst[start..start + (hi - lo)].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Real>(x: &Tensor<T>, weight: &Tensor<T>, pad: usize) -> Tensor<T> {
    let g = geometry(x.shape(), weight.shape(), pad);
    let kk = g.ci * g.k * g.k;
    let plane = g.ho * g.wo;
    let mut out = Tensor::zeros(&[g.n, g.co, g.ho, g.wo]);
    let mut col = vec![T::zero(); kk * plane];
    let xs = x.data();
    let img = g.ci * g.h * g.w;
    for n in 0..g.n {
        im2col(&xs[n * img..(n + 1) * img], g.ci, g.h, g.w, g.k, pad, &mut col);
        let dst = &mut out.data_mut()[n * g.co * plane..(n + 1) * g.co * plane];
        T::gemm(
            g.co,
            kk,
            plane,
            T::one(),
            weight.data(),
            kk as isize,
            1,
            &col,
            plane as isize,
            1,
            T::zero(),
            dst,
            plane as isize,
            1,
        );
    }
    out
}

/// Gradient of `<conv(x, w), grad_out>` with respect to `x`.
pub fn conv2d_input_grad<T: Real>(
    grad_out: &Tensor<T>,
    weight: &Tensor<T>,
    x_shape: &[usize],
    pad: usize,
) -> Tensor<T> {
    let g = geometry(x_shape, weight.shape(), pad);
    assert_eq!(grad_out.shape(), &[g.n, g.co, g.ho, g.wo], "conv output-gradient shape");
    let kk = g.ci * g.k * g.k;
    let plane = g.ho * g.wo;
    let img = g.ci * g.h * g.w;
    let mut out = Tensor::zeros(x_shape);
    let mut col = vec![T::zero(); kk * plane];
    for n in 0..g.n {
        let go = &grad_out.data()[n * g.co * plane..(n + 1) * g.co * plane];
        // col = W^T * g_n
        T::gemm(
            kk,
            g.co,
            plane,
            T::one(),
            weight.data(),
            1,
            kk as isize,
            go,
            plane as isize,
            1,
            T::zero(),
            &mut col,
            plane as isize,
            1,
        );
        col2im(&col, g.ci, g.h, g.w, g.k, pad, &mut out.data_mut()[n * img..(n + 1) * img]);
    }
    out
}

/// Gradient of `<conv(x, w), grad_out>` with respect to `w`.
pub fn conv2d_weight_grad<T: Real>(
    x: &Tensor<T>,
    grad_out: &Tensor<T>,
    w_shape: &[usize],
    pad: usize,
) -> Tensor<T> {
    let g = geometry(x.shape(), w_shape, pad);
    assert_eq!(grad_out.shape(), &[g.n, g.co, g.ho, g.wo], "conv output-gradient shape");
    let kk = g.ci * g.k * g.k;
    let plane = g.ho * g.wo;
    let img = g.ci * g.h * g.w;
    let mut out = Tensor::zeros(w_shape);
    let mut col = vec![T::zero(); kk * plane];
    for n in 0..g.n {
        im2col(&x.data()[n * img..(n + 1) * img], g.ci, g.h, g.w, g.k, pad, &mut col);
        let go = &grad_out.data()[n * g.co * plane..(n + 1) * g.co * plane];
        // dW += g_n * col^T
        T::gemm(
            g.co,
            plane,
            kk,
            T::one(),
            go,
            plane as isize,
            1,
            &col,
            1,
            plane as isize,
            T::one(),
            out.data_mut(),
            kk as isize,
            1,
        );
    }
    out
}
