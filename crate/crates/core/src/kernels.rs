//! Dense kernels shared by the forward and backward passes.

/// `c = a * b` (or `c += a * b` when `accumulate`), all row-major.
///
/// `a` is logically `m x k`; when `a_t` is set it is stored as `k x m`.
/// `b` is logically `k x n`; when `b_t` is set it is stored as `n x k`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k, "gemm: lhs size");
    assert_eq!(b.len(), k * n, "gemm: rhs size");
    assert_eq!(c.len(), m * n, "gemm: output size");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above guarantee every strided access lies inside the
    // slices, and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a 2-D cross-correlation over a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    /// Rows of the unfolded input: one per `(in_channel, ky, kx)`.
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    /// Columns of the unfolded input: one per `(sample, oy, ox)`.
    pub fn columns(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }
}

/// Unfolds `x` (`[batch, cin, h, w]`) into a `patch_len x columns` matrix.
pub fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let cols = g.columns();
    let plane = g.out_h * g.out_w;
    let mut out = vec![0.0; g.patch_len() * cols];
    for ci in 0..g.in_channels {
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (ci * g.kernel_h + ky) * g.kernel_w + kx;
                let dst = &mut out[row * cols..(row + 1) * cols];
                for n in 0..g.batch {
                    let src = &x[(n * g.in_channels + ci) * g.height * g.width..][..g.height * g.width];
                    for oy in 0..g.out_h {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * g.width..][..g.width];
                        let dst_row = &mut dst[n * plane + oy * g.out_w..][..g.out_w];
                        for (ox, d) in dst_row.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.width as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatters-adds columns back into an input-shaped buffer.
pub fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let ncols = g.columns();
    let plane = g.out_h * g.out_w;
    for ci in 0..g.in_channels {
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (ci * g.kernel_h + ky) * g.kernel_w + kx;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for n in 0..g.batch {
                    let dst = &mut dx[(n * g.in_channels + ci) * g.height * g.width..][..g.height * g.width];
                    for oy in 0..g.out_h {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        let src_row = &src[n * plane + oy * g.out_w..][..g.out_w];
                        for (ox, &v) in src_row.iter().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.width as isize {
                                dst[iy as usize * g.width + ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}
