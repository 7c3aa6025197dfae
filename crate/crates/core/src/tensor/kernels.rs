//! Numeric kernels behind the tape ops: GEMM and the im2col/col2im pair
//! shared by convolution and transposed convolution.

use super::{Result, TensorError};

/// `c = op(a) * op(b) + beta * c` for row-major `a` (`m x k` after `op`),
/// `b` (`k x n` after `op`) and `c` (`m x n`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert_eq!(a.len(), m * k, "gemm: lhs size");
    assert_eq!(b.len(), k * n, "gemm: rhs size");
    assert_eq!(c.len(), m * n, "gemm: output size");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if trans_a { (1, m) } else { (k, 1) };
    let (rsb, csb) = if trans_b { (1, k) } else { (n, 1) };
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
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
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a strided cross-correlation over NHWC input with
/// same-ceil padding: every output extent is `ceil(input / stride)`.
///
/// A transposed convolution reuses the geometry of the forward convolution it
/// is the adjoint of, with the roles of input and output swapped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub out_c: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride_h: usize,
    pub stride_w: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

fn same_ceil(input: usize, kernel: usize, stride: usize) -> (usize, usize) {
    let out = input.div_ceil(stride);
    let total = ((out.saturating_sub(1)) * stride + kernel).saturating_sub(input);
    (out, total / 2)
}

impl ConvGeometry {
    #[allow(clippy::too_many_arguments)]
    pub fn same_ceil(
        batch: usize,
        in_h: usize,
        in_w: usize,
        in_c: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride_h: usize,
        stride_w: usize,
        out_c: usize,
    ) -> Result<Self> {
        if kernel_h == 0 || kernel_w == 0 || stride_h == 0 || stride_w == 0 {
            return Err(TensorError::Invalid {
                op: "conv",
                msg: "kernel and stride must be positive".into(),
            });
        }
        if out_c == 0 || in_c == 0 {
            return Err(TensorError::Invalid {
                op: "conv",
                msg: "channel counts must be positive".into(),
            });
        }
        let (out_h, pad_top) = same_ceil(in_h, kernel_h, stride_h);
        let (out_w, pad_left) = same_ceil(in_w, kernel_w, stride_w);
        Ok(Self {
            batch,
            in_h,
            in_w,
            in_c,
            out_h,
            out_w,
            out_c,
            kernel_h,
            kernel_w,
            stride_h,
            stride_w,
            pad_top,
            pad_left,
        })
    }

    pub fn in_len(&self) -> usize {
        self.batch * self.in_h * self.in_w * self.in_c
    }

    pub fn out_len(&self) -> usize {
        self.batch * self.out_h * self.out_w * self.out_c
    }

    /// Number of output positions (rows of the im2col matrix).
    pub fn positions(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }

    /// Length of one im2col row (`kh * kw * cin`).
    pub fn patch(&self) -> usize {
        self.kernel_h * self.kernel_w * self.in_c
    }

    pub fn kernel_len(&self) -> usize {
        self.patch() * self.out_c
    }

    /// 1x1, stride 1: the im2col matrix is the input itself.
    fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride_h == 1 && self.stride_w == 1
    }
}

/// Unfolds `x` (NHWC, `geom.in_*`) into a `positions x patch` matrix.
pub(crate) fn im2col(x: &[f64], g: &ConvGeometry) -> Vec<f64> {
    debug_assert_eq!(x.len(), g.in_len());
    if g.is_pointwise() {
        return x.to_vec();
    }
    let patch = g.patch();
    let mut cols = vec![0.0; g.positions() * patch];
    let mut row = 0;
    for b in 0..g.batch {
        let xb = &x[b * g.in_h * g.in_w * g.in_c..(b + 1) * g.in_h * g.in_w * g.in_c];
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let dst = &mut cols[row * patch..(row + 1) * patch];
                for ky in 0..g.kernel_h {
                    let iy = (oy * g.stride_h + ky) as isize - g.pad_top as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    for kx in 0..g.kernel_w {
                        let ix = (ox * g.stride_w + kx) as isize - g.pad_left as isize;
                        if ix < 0 || ix >= g.in_w as isize {
                            continue;
                        }
                        let src = (iy as usize * g.in_w + ix as usize) * g.in_c;
                        let off = (ky * g.kernel_w + kx) * g.in_c;
                        dst[off..off + g.in_c].copy_from_slice(&xb[src..src + g.in_c]);
                    }
                }
                row += 1;
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds patch rows back into an NHWC buffer.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeometry) -> Vec<f64> {
    debug_assert_eq!(cols.len(), g.positions() * g.patch());
    if g.is_pointwise() {
        return cols.to_vec();
    }
    let patch = g.patch();
    let mut x = vec![0.0; g.in_len()];
    let mut row = 0;
    for b in 0..g.batch {
        let base = b * g.in_h * g.in_w * g.in_c;
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let src = &cols[row * patch..(row + 1) * patch];
                for ky in 0..g.kernel_h {
                    let iy = (oy * g.stride_h + ky) as isize - g.pad_top as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    for kx in 0..g.kernel_w {
                        let ix = (ox * g.stride_w + kx) as isize - g.pad_left as isize;
                        if ix < 0 || ix >= g.in_w as isize {
                            continue;
                        }
                        let dst = base + (iy as usize * g.in_w + ix as usize) * g.in_c;
                        let off = (ky * g.kernel_w + kx) * g.in_c;
                        for (d, s) in x[dst..dst + g.in_c].iter_mut().zip(&src[off..off + g.in_c]) {
                            *d += s;
                        }
                    }
                }
                row += 1;
            }
        }
    }
    x
}

/// Per-column sums of a row-major `rows x cols` matrix, accumulated into `out`.
pub(crate) fn add_col_sums(m: &[f64], cols: usize, out: &mut [f64]) {
    for row in m.chunks_exact(cols) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
}
