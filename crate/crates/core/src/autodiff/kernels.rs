//! Raw numeric kernels shared by the forward and backward passes.
//!
//! All matrices are row-major slices; callers validate shapes.

/// `out[m×n] += a[m×k] · b[k×n]`
pub fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×k] += g[m×n] · b[k×n]ᵀ`
pub fn matmul_nt_acc(g: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            let dot: f64 = g_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
            out[i * k + p] += dot;
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · g[m×n]`
pub fn matmul_tn_acc(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in out_row.iter_mut().zip(g_row) {
                *o += av * gv;
            }
        }
    }
}

/// Geometry of a 3×3 convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

pub const KERNEL: usize = 3;

impl ConvGeom {
    /// Output extent, or `None` when the padded input is smaller than the kernel.
    pub fn out_extent(len: usize, stride: usize, pad: usize) -> Option<usize> {
        let padded = len + 2 * pad;
        if padded < KERNEL || stride == 0 {
            return None;
        }
        Some((padded - KERNEL) / stride + 1)
    }

    fn patch_len(&self) -> usize {
        self.c_in * KERNEL * KERNEL
    }

    fn positions(&self) -> usize {
        self.h_out * self.w_out
    }

    /// Source pixel for output position `(oy, ox)` and kernel tap `(ky, kx)`.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky) as isize - self.pad as isize;
        let x = (ox * self.stride + kx) as isize - self.pad as isize;
        if y < 0 || x < 0 || y >= self.h as isize || x >= self.w as isize {
            None
        } else {
            Some((y as usize, x as usize))
        }
    }
}

/// Unfolds the input into a `[c_in·9 × h_out·w_out]` patch matrix.
pub fn im2col(input: &[f64], g: &ConvGeom) -> Vec<f64> {
    let positions = g.positions();
    let mut cols = vec![0.0; g.patch_len() * positions];
    for c in 0..g.c_in {
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = (c * KERNEL + ky) * KERNEL + kx;
                let dst = &mut cols[row * positions..(row + 1) * positions];
                for oy in 0..g.h_out {
                    for ox in 0..g.w_out {
                        if let Some((y, x)) = g.source(oy, ox, ky, kx) {
                            dst[oy * g.w_out + ox] = input[(c * g.h + y) * g.w + x];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatters patch-matrix gradients back onto the input layout.
pub fn col2im_acc(cols: &[f64], g: &ConvGeom, input_grad: &mut [f64]) {
    let positions = g.positions();
    for c in 0..g.c_in {
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = (c * KERNEL + ky) * KERNEL + kx;
                let src = &cols[row * positions..(row + 1) * positions];
                for oy in 0..g.h_out {
                    for ox in 0..g.w_out {
                        if let Some((y, x)) = g.source(oy, ox, ky, kx) {
                            input_grad[(c * g.h + y) * g.w + x] += src[oy * g.w_out + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward(input: &[f64], kernels: &[f64], g: &ConvGeom) -> Vec<f64> {
    let cols = im2col(input, g);
    let mut out = vec![0.0; g.c_out * g.positions()];
    matmul_acc(kernels, &cols, &mut out, g.c_out, g.patch_len(), g.positions());
    out
}

/// Accumulates input and kernel gradients of a convolution.
pub fn conv2d_backward(
    input: &[f64],
    kernels: &[f64],
    out_grad: &[f64],
    g: &ConvGeom,
    input_grad: Option<&mut [f64]>,
    kernel_grad: Option<&mut [f64]>,
) {
    let positions = g.positions();
    let patch = g.patch_len();
    if let Some(kg) = kernel_grad {
        let cols = im2col(input, g);
        matmul_nt_acc(out_grad, &cols, kg, g.c_out, patch, positions);
    }
    if let Some(ig) = input_grad {
        let mut dcols = vec![0.0; patch * positions];
        matmul_tn_acc(kernels, out_grad, &mut dcols, g.c_out, patch, positions);
        col2im_acc(&dcols, g, ig);
    }
}

/// Numerically stable row softmax.
pub fn softmax_rows(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let src = &x[r * cols..(r + 1) * cols];
        let dst = &mut out[r * cols..(r + 1) * cols];
        let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            total += *d;
        }
        for d in dst.iter_mut() {
            *d /= total;
        }
    }
    out
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
