//! Raw numeric kernels on row-major slices.
//!
//! Convolutions are lowered to GEMM through im2col/col2im; the tape in
//! `tape.rs` wires these into forward and backward passes.

use super::Element;
use crate::error::{Error, Result};

/// Geometry of a 2-d convolution over one image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(Error::dim("conv2d", "stride must be at least 1"));
        }
        if kh > height + 2 * padding || kw > width + 2 * padding {
            return Err(Error::dim(
                "conv2d",
                format!(
                    "kernel {kh}x{kw} larger than padded input {}x{}",
                    height + 2 * padding,
                    width + 2 * padding
                ),
            ));
        }
        Ok(ConvGeometry {
            channels,
            height,
            width,
            kh,
            kw,
            stride,
            padding,
            out_h: (height + 2 * padding - kh) / stride + 1,
            out_w: (width + 2 * padding - kw) / stride + 1,
        })
    }

    /// Rows of the column matrix: `channels * kh * kw`.
    pub fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// A 1x1, stride 1, unpadded conv needs no column matrix at all.
    /// Input row read by output row `oy` at kernel row `i`, if inside.
    #[inline]
    fn source_row(&self, oy: usize, i: usize) -> Option<usize> {
        (oy * self.stride + i).checked_sub(self.padding).filter(|&y| y < self.height)
    }

    /// Output columns `[x0, x1)` whose kernel column `j` lands inside the
    /// input.
    #[inline]
    fn valid_cols(&self, j: usize) -> (usize, usize) {
        let x0 = self.padding.saturating_sub(j).div_ceil(self.stride);
        let x1 = if self.width + self.padding > j {
            ((self.width - 1 + self.padding - j) / self.stride + 1).min(self.out_w)
        } else {
            0
        };
        (x0.min(self.out_w), x1)
    }

    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }
}

pub fn im2col<T: Element>(img: &[T], g: &ConvGeometry, col: &mut [T]) {
    let cols = g.col_cols();
    debug_assert_eq!(col.len(), g.col_rows() * cols);
    for c in 0..g.channels {
        let plane = &img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let dst = &mut col[row * cols..(row + 1) * cols];
                let (x0, x1) = g.valid_cols(j);
                for oy in 0..g.out_h {
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    let Some(y) = g.source_row(oy, i) else {
                        line.fill(T::zero());
                        continue;
                    };
                    let src = &plane[y * g.width..(y + 1) * g.width];
                    line[..x0].fill(T::zero());
                    line[x1.max(x0)..].fill(T::zero());
                    if x1 <= x0 {
                        continue;
                    }
                    let sx0 = x0 * g.stride + j - g.padding;
                    if g.stride == 1 {
                        line[x0..x1].copy_from_slice(&src[sx0..sx0 + (x1 - x0)]);
                    } else {
                        for (k, v) in line[x0..x1].iter_mut().enumerate() {
                            *v = src[sx0 + k * g.stride];
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds a column matrix back into an image (adjoint of [`im2col`]).
pub fn col2im<T: Element>(col: &[T], g: &ConvGeometry, img: &mut [T]) {
    let cols = g.col_cols();
    for c in 0..g.channels {
        let plane = &mut img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let src = &col[row * cols..(row + 1) * cols];
                let (x0, x1) = g.valid_cols(j);
                if x1 <= x0 {
                    continue;
                }
                let sx0 = x0 * g.stride + j - g.padding;
                for oy in 0..g.out_h {
                    let Some(y) = g.source_row(oy, i) else { continue };
                    let dst = &mut plane[y * g.width..(y + 1) * g.width];
                    let line = &src[oy * g.out_w + x0..oy * g.out_w + x1];
                    for (k, &v) in line.iter().enumerate() {
                        dst[sx0 + k * g.stride] += v;
                    }
                }
            }
        }
    }
}

/// `c[m,n] = a[m,k] @ b[k,n] + beta * c`
pub fn gemm_nn<T: Element>(m: usize, k: usize, n: usize, a: &[T], b: &[T], beta: T, c: &mut [T]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

/// `c[m,n] = a[k,m]^T @ b[k,n] + beta * c`
pub fn gemm_tn<T: Element>(m: usize, k: usize, n: usize, a: &[T], b: &[T], beta: T, c: &mut [T]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

/// `c[m,n] = a[m,k] @ b[n,k]^T + beta * c`
pub fn gemm_nt<T: Element>(m: usize, k: usize, n: usize, a: &[T], b: &[T], beta: T, c: &mut [T]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

/// Forward convolution. `x` is `[B,C,H,W]`, `w` is `[O,C,kh,kw]`.
pub fn conv2d_forward<T: Element>(
    x: &[T],
    batch: usize,
    g: &ConvGeometry,
    w: &[T],
    out_channels: usize,
) -> Vec<T> {
    let in_len = g.channels * g.height * g.width;
    let out_len = out_channels * g.col_cols();
    let mut out = vec![T::zero(); batch * out_len];
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); g.col_rows() * g.col_cols()]
    };
    for b in 0..batch {
        let img = &x[b * in_len..(b + 1) * in_len];
        let dst = &mut out[b * out_len..(b + 1) * out_len];
        if g.is_pointwise() {
            gemm_nn(out_channels, g.col_rows(), g.col_cols(), w, img, T::zero(), dst);
        } else {
            im2col(img, g, &mut col);
            gemm_nn(out_channels, g.col_rows(), g.col_cols(), w, &col, T::zero(), dst);
        }
    }
    out
}

/// Gradients of [`conv2d_forward`] with respect to input and kernel.
pub fn conv2d_backward<T: Element>(
    x: &[T],
    batch: usize,
    g: &ConvGeometry,
    w: &[T],
    out_channels: usize,
    grad_out: &[T],
    need_input: bool,
    need_kernel: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let in_len = g.channels * g.height * g.width;
    let out_len = out_channels * g.col_cols();
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let mut dx = need_input.then(|| vec![T::zero(); batch * in_len]);
    let mut dw = need_kernel.then(|| vec![T::zero(); w.len()]);
    let mut col = vec![T::zero(); if g.is_pointwise() { 0 } else { rows * cols }];
    // Stride-1 input gradients are a plain convolution of the output
    // gradient with the flipped, transposed kernel; cheaper than col2im.
    let flipped = (need_input && !g.is_pointwise() && g.stride == 1 && g.kh == g.kw && g.padding < g.kh)
        .then(|| {
            let gb = ConvGeometry::new(out_channels, g.out_h, g.out_w, g.kh, g.kw, 1, g.kh - 1 - g.padding)
                .expect("valid transposed geometry");
            debug_assert_eq!((gb.out_h, gb.out_w), (g.height, g.width));
            let kk = g.kh * g.kw;
            let mut wf = vec![T::zero(); w.len()];
            for o in 0..out_channels {
                for c in 0..g.channels {
                    let src = &w[(o * g.channels + c) * kk..][..kk];
                    let dst = &mut wf[(c * out_channels + o) * kk..][..kk];
                    for (d, &v) in dst.iter_mut().zip(src.iter().rev()) {
                        *d = v;
                    }
                }
            }
            (gb, wf)
        });
    let mut dcol = vec![T::zero(); if need_input && !g.is_pointwise() && flipped.is_none() { rows * cols } else { 0 }];
    for b in 0..batch {
        let gout = &grad_out[b * out_len..(b + 1) * out_len];
        let img = &x[b * in_len..(b + 1) * in_len];
        if let Some(dw) = dw.as_mut() {
            let colv: &[T] = if g.is_pointwise() {
                img
            } else {
                im2col(img, g, &mut col);
                &col
            };
            gemm_nt(out_channels, cols, rows, gout, colv, T::one(), dw);
        }
        if let Some(dx) = dx.as_mut() {
            let dst = &mut dx[b * in_len..(b + 1) * in_len];
            if g.is_pointwise() {
                gemm_tn(rows, out_channels, cols, w, gout, T::one(), dst);
            } else if let Some((gb, wf)) = &flipped {
                dst.copy_from_slice(&conv2d_forward(gout, 1, gb, wf, g.channels));
            } else {
                gemm_tn(rows, out_channels, cols, w, gout, T::zero(), &mut dcol);
                col2im(&dcol, g, dst);
            }
        }
    }
    (dx, dw)
}

/// Output spatial size of a transposed convolution.
pub fn conv_transpose_out(size: usize, k: usize, stride: usize, padding: usize, out_pad: usize) -> Option<usize> {
    ((size.checked_sub(1)?) * stride + k + out_pad).checked_sub(2 * padding)
}

/// Transposed convolution. `y` is `[B,Ci,H,W]`, `w` is `[Ci,Co,kh,kw]`.
///
/// `g` describes the *forward* convolution that maps the `[Co,Ho,Wo]`
/// output back to `[Ci,H,W]`, so `g.channels == Co` and `g.out_h == H`.
pub fn conv_transpose_forward<T: Element>(
    y: &[T],
    batch: usize,
    in_channels: usize,
    g: &ConvGeometry,
    w: &[T],
) -> Vec<T> {
    let in_len = in_channels * g.col_cols();
    let out_len = g.channels * g.height * g.width;
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let mut out = vec![T::zero(); batch * out_len];
    let mut col = vec![T::zero(); rows * cols];
    for b in 0..batch {
        let src = &y[b * in_len..(b + 1) * in_len];
        gemm_tn(rows, in_channels, cols, w, src, T::zero(), &mut col);
        col2im(&col, g, &mut out[b * out_len..(b + 1) * out_len]);
    }
    out
}

pub fn conv_transpose_backward<T: Element>(
    y: &[T],
    batch: usize,
    in_channels: usize,
    g: &ConvGeometry,
    w: &[T],
    grad_out: &[T],
    need_input: bool,
    need_kernel: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let in_len = in_channels * g.col_cols();
    let out_len = g.channels * g.height * g.width;
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let mut dy = need_input.then(|| vec![T::zero(); batch * in_len]);
    let mut dw = need_kernel.then(|| vec![T::zero(); w.len()]);
    let mut col = vec![T::zero(); rows * cols];
    for b in 0..batch {
        im2col(&grad_out[b * out_len..(b + 1) * out_len], g, &mut col);
        if let Some(dy) = dy.as_mut() {
            gemm_nn(in_channels, rows, cols, w, &col, T::zero(), &mut dy[b * in_len..(b + 1) * in_len]);
        }
        if let Some(dw) = dw.as_mut() {
            gemm_nt(in_channels, cols, rows, &y[b * in_len..(b + 1) * in_len], &col, T::one(), dw);
        }
    }
    (dy, dw)
}

/// Non-overlapping max pooling. Returns the pooled values and, for each
/// output, the flat input index it came from (first maximum in scan order).
pub fn max_pool_forward<T: Element>(x: &[T], dims: [usize; 4], window: usize) -> (Vec<T>, Vec<usize>) {
    let [b, c, h, w] = dims;
    let (oh, ow) = (h / window, w / window);
    let mut out = Vec::with_capacity(b * c * oh * ow);
    let mut arg = Vec::with_capacity(b * c * oh * ow);
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * window * w + ox * window;
                let mut best_v = x[best];
                for i in 0..window {
                    for j in 0..window {
                        let idx = base + (oy * window + i) * w + ox * window + j;
                        if x[idx] > best_v {
                            best_v = x[idx];
                            best = idx;
                        }
                    }
                }
                out.push(best_v);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

const LANES: usize = 8;

/// Sum of `f(a_i, b_i)` with independent partial accumulators so the loop
/// vectorizes. Summation order is fixed, so results are reproducible.
#[inline]
fn lane_reduce<T: Element>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); LANES];
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (xa, xb) in ca.zip(cb) {
        for k in 0..LANES {
            acc[k] += f(xa[k], xb[k]);
        }
    }
    let mut s = acc.iter().copied().sum::<T>();
    for (&x, &y) in ra.iter().zip(rb) {
        s += f(x, y);
    }
    s
}

pub fn sum<T: Element>(a: &[T]) -> T {
    lane_reduce(a, a, |x, _| x)
}

pub fn dot<T: Element>(a: &[T], b: &[T]) -> T {
    lane_reduce(a, b, |x, y| x * y)
}

/// `sum_i (a_i - m)^2`.
pub fn sq_dev_sum<T: Element>(a: &[T], m: T) -> T {
    lane_reduce(a, a, |x, _| (x - m) * (x - m))
}
