//! Low-level numeric kernels shared by the convolution operators.

/// Spatial geometry of a 2D cross-correlation over one batch item.
///
/// Padding may be asymmetric; the output extent is stored explicitly.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    /// Rows of the unfolded column matrix.
    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel_h * self.kernel_w
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// True when unfolding is the identity (1x1 kernel, stride 1, no padding).
    pub fn is_pointwise(&self) -> bool {
        self.kernel_h == 1
            && self.kernel_w == 1
            && self.stride == 1
            && self.pad_top == 0
            && self.pad_left == 0
            && self.out_h == self.height
            && self.out_w == self.width
    }
}

/// Computes `c = a·b` (or `c += a·b` when `accumulate`), where `a` is
/// logically `m×k` and `b` logically `k×n`. A `*_t` flag means the operand
/// is stored transposed (row-major `k×m` or `n×k` respectively).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
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
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above guarantee every strided access stays within
    // the three slices, and `c` does not alias `a` or `b`.
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

/// Output columns `[lo, hi)` whose input column `ox·stride + kx - pad_left`
/// falls inside `[0, width)`.
fn valid_span(g: &ConvGeom, kx: usize) -> (usize, usize) {
    let lo = if kx >= g.pad_left {
        0
    } else {
        (g.pad_left - kx).div_ceil(g.stride)
    };
    let limit = g.width + g.pad_left;
    let hi = if limit <= kx {
        0
    } else {
        ((limit - kx - 1) / g.stride + 1).min(g.out_w)
    };
    (lo.min(hi), hi)
}

/// Unfolds one `[C,H,W]` image into a `[C·kh·kw, out_h·out_w]` column matrix.
pub(crate) fn im2col(image: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let n = g.col_cols();
    debug_assert_eq!(image.len(), g.image_len());
    debug_assert_eq!(cols.len(), g.col_rows() * n);
    if n == 0 {
        return;
    }
    let plane_len = g.height * g.width;
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &image[c * plane_len..(c + 1) * plane_len];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let (lo, hi) = valid_span(g, kx);
                let dst = &mut cols[row * n..(row + 1) * n];
                for (oy, out_row) in dst.chunks_exact_mut(g.out_w).enumerate() {
                    let iy = (oy * g.stride + ky).wrapping_sub(g.pad_top);
                    if iy >= g.height || lo == hi {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy * g.width..(iy + 1) * g.width];
                    out_row[..lo].fill(0.0);
                    out_row[hi..].fill(0.0);
                    let start = lo * g.stride + kx - g.pad_left;
                    if g.stride == 1 {
                        out_row[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                    } else {
                        for (slot, &v) in out_row[lo..hi]
                            .iter_mut()
                            .zip(src[start..].iter().step_by(g.stride))
                        {
                            *slot = v;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds columns back into `[C,H,W]`.
pub(crate) fn col2im_add(cols: &[f64], g: &ConvGeom, image: &mut [f64]) {
    let n = g.col_cols();
    debug_assert_eq!(image.len(), g.image_len());
    debug_assert_eq!(cols.len(), g.col_rows() * n);
    if n == 0 {
        return;
    }
    if n == 0 {
        return;
    }
    let plane_len = g.height * g.width;
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &mut image[c * plane_len..(c + 1) * plane_len];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let (lo, hi) = valid_span(g, kx);
                let src = &cols[row * n..(row + 1) * n];
                row += 1;
                if lo == hi {
                    continue;
                }
                for (oy, col_row) in src.chunks_exact(g.out_w).enumerate() {
                    let iy = (oy * g.stride + ky).wrapping_sub(g.pad_top);
                    if iy >= g.height {
                        continue;
                    }
                    let dst = &mut plane[iy * g.width..(iy + 1) * g.width];
                    let start = lo * g.stride + kx - g.pad_left;
                    if g.stride == 1 {
                        for (d, &v) in dst[start..start + hi - lo].iter_mut().zip(&col_row[lo..hi]) {
                            *d += v;
                        }
                    } else {
                        for (d, &v) in dst[start..]
                            .iter_mut()
                            .step_by(g.stride)
                            .zip(&col_row[lo..hi])
                        {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
}
