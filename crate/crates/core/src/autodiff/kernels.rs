//! Raw numeric kernels over flat `f32` slices.
//!
//! Convolutions go through im2col and a single `sgemm` call so that every
//! conv, its input adjoint and its weight gradient share one code path.

use crate::error::{Error, Result};

/// Shape bookkeeping for one 2D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if input.len() != 3 {
            return Err(Error::dim(format!("conv2d input must be [C,H,W], got {input:?}")));
        }
        if kernel.len() != 4 || kernel[2] != kernel[3] {
            return Err(Error::dim(format!(
                "conv2d kernel must be [C_out,C_in,k,k], got {kernel:?}"
            )));
        }
        if kernel[1] != input[0] {
            return Err(Error::dim(format!(
                "conv2d kernel expects {} input channels, input has {}",
                kernel[1], input[0]
            )));
        }
        if stride == 0 {
            return Err(Error::dim("conv2d stride must be >= 1"));
        }
        let (h, w, k) = (input[1], input[2], kernel[2]);
        if k > h + 2 * pad || k > w + 2 * pad {
            return Err(Error::dim(format!(
                "kernel {k} larger than padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        Ok(ConvGeom {
            c_in: input[0],
            h,
            w,
            c_out: kernel[0],
            k,
            stride,
            pad,
            h_out: (h + 2 * pad - k) / stride + 1,
            w_out: (w + 2 * pad - k) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn out_pixels(&self) -> usize {
        self.h_out * self.w_out
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.c_in, self.h, self.w]
    }

    pub fn output_shape(&self) -> [usize; 3] {
        [self.c_out, self.h_out, self.w_out]
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Source pixel for output position `o` and kernel tap `t`, or `None` in the padding.
#[inline]
fn source(o: usize, t: usize, stride: usize, pad: usize, len: usize) -> Option<usize> {
    let pos = (o * stride + t) as isize - pad as isize;
    (pos >= 0 && (pos as usize) < len).then_some(pos as usize)
}

fn im2col(x: &[f32], g: &ConvGeom) -> Vec<f32> {
    let n = g.out_pixels();
    let mut cols = vec![0.0f32; g.patch_len() * n];
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..g.h_out {
                    let Some(iy) = source(oy, ki, g.stride, g.pad, g.h) else {
                        continue;
                    };
                    let src_row = &plane[iy * g.w..(iy + 1) * g.w];
                    let dst_row = &mut dst[oy * g.w_out..(oy + 1) * g.w_out];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        if let Some(ix) = source(ox, kj, g.stride, g.pad, g.w) {
                            *d = src_row[ix];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f32], g: &ConvGeom) -> Vec<f32> {
    let n = g.out_pixels();
    let mut x = vec![0.0f32; g.c_in * g.h * g.w];
    for c in 0..g.c_in {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..g.h_out {
                    let Some(iy) = source(oy, ki, g.stride, g.pad, g.h) else {
                        continue;
                    };
                    let dst_row = &mut plane[iy * g.w..(iy + 1) * g.w];
                    let src_row = &src[oy * g.w_out..(oy + 1) * g.w_out];
                    for (ox, &v) in src_row.iter().enumerate() {
                        if let Some(ix) = source(ox, kj, g.stride, g.pad, g.w) {
                            dst_row[ix] += v;
                        }
                    }
                }
            }
        }
    }
    x
}

/// `C = A·B` with explicit row/column strides; `C` is `m×n` row-major.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    rsa: usize,
    csa: usize,
    b: &[f32],
    rsb: usize,
    csb: usize,
) -> Vec<f32> {
    let mut c = vec![0.0f32; m * n];
    if m == 0 || n == 0 || k == 0 {
        return c;
    }
    debug_assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    // SAFETY: the asserts above bound every index sgemm touches in `a` and
    // `b`; `c` is freshly allocated with m*n elements and row stride n.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

/// Cross-correlation `y[o] = Σ w[o,c,i,j]·x[c, y·s+i−p, x·s+j−p] + b[o]`.
pub fn conv2d(x: &[f32], kernel: &[f32], bias: Option<&[f32]>, g: &ConvGeom) -> Vec<f32> {
    let n = g.out_pixels();
    let kk = g.patch_len();
    let cols;
    let b_mat: &[f32] = if g.is_pointwise() {
        x
    } else {
        cols = im2col(x, g);
        &cols
    };
    let mut y = gemm(g.c_out, kk, n, kernel, kk, 1, b_mat, n, 1);
    if let Some(b) = bias {
        for (o, row) in y.chunks_mut(n).enumerate() {
            row.iter_mut().for_each(|v| *v += b[o]);
        }
    }
    y
}

/// Adjoint of [`conv2d`] with respect to its input: maps an output-shaped
/// signal back onto the input grid.
pub fn conv2d_transpose(signal: &[f32], kernel: &[f32], g: &ConvGeom) -> Vec<f32> {
    let n = g.out_pixels();
    let kk = g.patch_len();
    // W^T [kk x c_out] · signal [c_out x n]
    let dcols = gemm(kk, g.c_out, n, kernel, 1, kk, signal, n, 1);
    if g.is_pointwise() {
        dcols
    } else {
        col2im(&dcols, g)
    }
}

/// Gradient of `<dy, conv2d(x, W)>` with respect to `W`.
pub fn conv2d_weight_grad(x: &[f32], dy: &[f32], g: &ConvGeom) -> Vec<f32> {
    let n = g.out_pixels();
    let kk = g.patch_len();
    let cols;
    let x_cols: &[f32] = if g.is_pointwise() {
        x
    } else {
        cols = im2col(x, g);
        &cols
    };
    // dy [c_out x n] · cols^T [n x kk]
    gemm(g.c_out, n, kk, dy, n, 1, x_cols, 1, n)
}

/// Per-output-channel sum of a `[C, H·W]` buffer.
pub fn channel_totals(dy: &[f32], channels: usize) -> Vec<f32> {
    let n = dy.len() / channels;
    dy.chunks(n).map(|row| row.iter().sum()).collect()
}

/// `y = W·x (+ b)` for row-major `W` of shape `[m, n]`.
pub fn matvec(w: &[f32], x: &[f32], bias: Option<&[f32]>, m: usize, n: usize) -> Vec<f32> {
    (0..m)
        .map(|i| {
            let row = &w[i * n..(i + 1) * n];
            let dot: f32 = row.iter().zip(x).map(|(a, b)| a * b).sum();
            dot + bias.map_or(0.0, |b| b[i])
        })
        .collect()
}

/// `x = Wᵀ·y` for row-major `W` of shape `[m, n]`.
pub fn matvec_transpose(w: &[f32], y: &[f32], m: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; n];
    for i in 0..m {
        let yi = y[i];
        if yi == 0.0 {
            continue;
        }
        for (o, &wv) in out.iter_mut().zip(&w[i * n..(i + 1) * n]) {
            *o += wv * yi;
        }
    }
    out
}

/// Outer product `u·vᵀ` as a row-major `[u.len(), v.len()]` buffer.
pub fn outer(u: &[f32], v: &[f32]) -> Vec<f32> {
    let mut out = Vec::with_capacity(u.len() * v.len());
    for &a in u {
        out.extend(v.iter().map(|&b| a * b));
    }
    out
}

/// Shape bookkeeping for 2D max pooling.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub window: usize,
    pub stride: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl PoolGeom {
    pub fn new(input: &[usize], window: usize, stride: usize) -> Result<Self> {
        if input.len() != 3 {
            return Err(Error::dim(format!("maxpool input must be [C,H,W], got {input:?}")));
        }
        if window == 0 || stride == 0 {
            return Err(Error::dim("maxpool window and stride must be >= 1"));
        }
        if window > input[1] || window > input[2] {
            return Err(Error::dim(format!(
                "maxpool window {window} exceeds input {}x{}",
                input[1], input[2]
            )));
        }
        Ok(PoolGeom {
            c: input[0],
            h: input[1],
            w: input[2],
            window,
            stride,
            h_out: (input[1] - window) / stride + 1,
            w_out: (input[2] - window) / stride + 1,
        })
    }

    pub fn output_shape(&self) -> [usize; 3] {
        [self.c, self.h_out, self.w_out]
    }

    pub fn input_len(&self) -> usize {
        self.c * self.h * self.w
    }
}

/// Max pooling. Returns the pooled values and, per output, the flat input
/// index of the winner (first in row-major window order on ties).
pub fn maxpool(x: &[f32], g: &PoolGeom) -> (Vec<f32>, Vec<u32>) {
    let n = g.c * g.h_out * g.w_out;
    let mut out = Vec::with_capacity(n);
    let mut arg = Vec::with_capacity(n);
    for c in 0..g.c {
        let base = c * g.h * g.w;
        for oy in 0..g.h_out {
            for ox in 0..g.w_out {
                let mut best_idx = base + (oy * g.stride) * g.w + ox * g.stride;
                let mut best = x[best_idx];
                for i in 0..g.window {
                    for j in 0..g.window {
                        let idx = base + (oy * g.stride + i) * g.w + ox * g.stride + j;
                        if x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(best_idx as u32);
            }
        }
    }
    (out, arg)
}

/// Scatter-add `values[i]` into position `argmax[i]` of a zero buffer.
pub fn unpool(values: &[f32], argmax: &[u32], input_len: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; input_len];
    for (&v, &i) in values.iter().zip(argmax) {
        out[i as usize] += v;
    }
    out
}

/// Gather `x[argmax[i]]`.
pub fn gather(x: &[f32], argmax: &[u32]) -> Vec<f32> {
    argmax.iter().map(|&i| x[i as usize]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f32], w: &[f32], g: &ConvGeom) -> Vec<f32> {
        let mut y = vec![0.0; g.c_out * g.h_out * g.w_out];
        for o in 0..g.c_out {
            for oy in 0..g.h_out {
                for ox in 0..g.w_out {
                    let mut acc = 0.0;
                    for c in 0..g.c_in {
                        for i in 0..g.k {
                            for j in 0..g.k {
                                let iy = (oy * g.stride + i) as isize - g.pad as isize;
                                let ix = (ox * g.stride + j) as isize - g.pad as isize;
                                if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                    continue;
                                }
                                acc += w[((o * g.c_in + c) * g.k + i) * g.k + j]
                                    * x[(c * g.h + iy as usize) * g.w + ix as usize];
                            }
                        }
                    }
                    y[(o * g.h_out + oy) * g.w_out + ox] = acc;
                }
            }
        }
        y
    }

    fn ramp(n: usize, scale: f32) -> Vec<f32> {
        (0..n).map(|i| ((i * 7 % 11) as f32 - 5.0) * scale).collect()
    }

    #[test]
    fn conv_matches_direct_loops() {
        for &(stride, pad, k) in &[(1, 0, 3), (1, 1, 3), (2, 1, 3), (2, 0, 2), (1, 0, 1)] {
            let g = ConvGeom::new(&[2, 5, 6], &[3, 2, k, k], stride, pad).unwrap();
            let x = ramp(2 * 5 * 6, 0.1);
            let w = ramp(3 * 2 * k * k, 0.3);
            let fast = conv2d(&x, &w, None, &g);
            let slow = naive_conv(&x, &w, &g);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-5, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn transpose_is_adjoint() {
        // <conv(x), y> == <x, convT(y)>
        let g = ConvGeom::new(&[3, 7, 5], &[4, 3, 3, 3], 2, 1).unwrap();
        let x = ramp(3 * 7 * 5, 0.05);
        let w = ramp(4 * 27, 0.2);
        let y: Vec<f32> = ramp(4 * g.h_out * g.w_out, 0.1).iter().map(|v| v + 0.03).collect();
        let lhs: f32 = conv2d(&x, &w, None, &g).iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f32 = x.iter().zip(&conv2d_transpose(&y, &w, &g)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-4 * lhs.abs().max(1.0));
    }

    #[test]
    fn maxpool_first_tie_wins() {
        let g = PoolGeom::new(&[1, 2, 2], 2, 2).unwrap();
        let (v, a) = maxpool(&[3.0, 3.0, 3.0, 3.0], &g);
        assert_eq!(v, vec![3.0]);
        assert_eq!(a, vec![0]);
    }
}
