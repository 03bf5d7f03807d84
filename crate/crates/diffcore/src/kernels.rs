//! Dense numeric kernels shared by forward and backward passes.

/// `c = beta * c + op(a) * op(b)` with row-major storage.
///
/// `op(a)` is `m x k`, `op(b)` is `k x n`. When `ta` is set, `a` is stored as
/// `k x m`; likewise `tb` means `b` is stored as `n x k`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, beta: f64, c: &mut [f64]) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above guarantee every strided access stays inside
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

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn cols(&self) -> usize {
        self.out_height() * self.out_width()
    }
}

/// Unfolds a `[C, H, W]` image into a `[C*k*k, Ho*Wo]` patch matrix.
pub(crate) fn im2col(input: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (ho, wo) = (g.out_height(), g.out_width());
    let mut cols = vec![0.0; g.rows() * g.cols()];
    let k = g.kernel;
    for c in 0..g.channels {
        let plane = &input[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let out_row = &mut dst[oy * wo..(oy + 1) * wo];
                    for (ox, out) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            *out = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: folds patch-matrix gradients back onto the image.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom, out: &mut [f64]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let k = g.kernel;
    for c in 0..g.channels {
        let plane = &mut out[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst_row[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Bilinear interpolation weights for one sample point.
///
/// Corners outside the `height x width` grid are dropped, which is the same
/// as zero padding in the forward pass and leaves them without gradient.
#[derive(Clone, Copy, Debug, Default)]
pub struct BilinearTap {
    pub index: [usize; 4],
    pub weight: [f64; 4],
    pub count: u8,
}

impl BilinearTap {
    pub fn new(y: f64, x: f64, height: usize, width: usize) -> Self {
        let mut tap = Self::default();
        if !y.is_finite() || !x.is_finite() {
            return tap;
        }
        let y0 = y.floor();
        let x0 = x.floor();
        let fy = y - y0;
        let fx = x - x0;
        let (y0, x0) = (y0 as i64, x0 as i64);
        let corners = [
            (y0, x0, (1.0 - fy) * (1.0 - fx)),
            (y0, x0 + 1, (1.0 - fy) * fx),
            (y0 + 1, x0, fy * (1.0 - fx)),
            (y0 + 1, x0 + 1, fy * fx),
        ];
        for (cy, cx, w) in corners {
            if w == 0.0 || cy < 0 || cx < 0 || cy >= height as i64 || cx >= width as i64 {
                continue;
            }
            let slot = tap.count as usize;
            tap.index[slot] = cy as usize * width + cx as usize;
            tap.weight[slot] = w;
            tap.count += 1;
        }
        tap
    }

    pub fn sample(&self, src: &[f64]) -> f64 {
        let mut acc = 0.0;
        for s in 0..self.count as usize {
            acc += self.weight[s] * src[self.index[s]];
        }
        acc
    }
}
