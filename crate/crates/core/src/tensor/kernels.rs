//! Raw numeric kernels over row-major slices. No allocation policy, no graph.
//!
//! Convolutions are stride 1 with zero padding `k / 2` (odd `k`), so spatial
//! size is preserved. The three convolution kernels are the partial
//! derivatives of the same trilinear form `<g, conv(x, w)>`, which is what lets
//! the tape differentiate them again.

/// Dimensions of an NCHW activation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Nchw {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Nchw {
    pub fn from_shape(shape: &[usize]) -> Option<Self> {
        match *shape {
            [n, c, h, w] => Some(Nchw { n, c, h, w }),
            _ => None,
        }
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn shape(&self) -> Vec<usize> {
        vec![self.n, self.c, self.h, self.w]
    }
}

/// Row ranges `(dst_start, src_start, len)` along one axis for kernel offset `d`.
#[inline]
fn span(size: usize, d: isize) -> (usize, usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (size as isize - d.max(0)).max(0) as usize;
    let len = hi.saturating_sub(lo);
    (lo, (lo as isize + d) as usize, len)
}

/// Strided `c ← a·b + beta·c` with `a: m×k`, `b: k×n`, `c: m×n` (row-major `c`).
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_strides: (isize, isize), b: &[f64], b_strides: (isize, isize), beta: f64, c: &mut [f64]) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: every index reached by the strides lies inside the given slices;
    // callers pass dense matrices whose extents match (m, k, n).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Patch matrix `[C·k·k × H·W]` of one sample. Only in-image positions are
/// written, so `cols` must start zeroed; reusing it across samples of the same
/// shape keeps the padding zeros intact.
fn im2col(x: &[f64], c: usize, h: usize, w: usize, k: usize, cols: &mut [f64]) {
    let p = (k / 2) as isize;
    let plane = h * w;
    for ci in 0..c {
        let src = &x[ci * plane..(ci + 1) * plane];
        for ky in 0..k {
            let (r0, sr0, rows) = span(h, ky as isize - p);
            for kx in 0..k {
                let (c0, sc0, len) = span(w, kx as isize - p);
                let dst = &mut cols[((ci * k + ky) * k + kx) * plane..][..plane];
                for r in 0..rows {
                    dst[(r0 + r) * w + c0..][..len].copy_from_slice(&src[(sr0 + r) * w + sc0..][..len]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch values back onto the image.
fn col2im(cols: &[f64], c: usize, h: usize, w: usize, k: usize, x: &mut [f64]) {
    let p = (k / 2) as isize;
    let plane = h * w;
    for ci in 0..c {
        let dst = &mut x[ci * plane..(ci + 1) * plane];
        for ky in 0..k {
            let (r0, sr0, rows) = span(h, ky as isize - p);
            for kx in 0..k {
                let (c0, sc0, len) = span(w, kx as isize - p);
                let src = &cols[((ci * k + ky) * k + kx) * plane..][..plane];
                for r in 0..rows {
                    let d = &mut dst[(sr0 + r) * w + sc0..][..len];
                    for (dv, sv) in d.iter_mut().zip(&src[(r0 + r) * w + c0..][..len]) {
                        *dv += sv;
                    }
                }
            }
        }
    }
}

/// `y[n,o,i,j] = Σ_{c,di,dj} x[n,c,i+di-p,j+dj-p] · w[o,c,di,dj]`.
pub fn conv2d(x: &[f64], xd: Nchw, w: &[f64], out_c: usize, k: usize) -> Vec<f64> {
    let plane = xd.plane();
    let ckk = xd.c * k * k;
    let mut y = vec![0.0; xd.n * out_c * plane];
    let mut cols = vec![0.0; ckk * plane];
    for n in 0..xd.n {
        im2col(&x[n * xd.c * plane..(n + 1) * xd.c * plane], xd.c, xd.h, xd.w, k, &mut cols);
        let yn = &mut y[n * out_c * plane..(n + 1) * out_c * plane];
        gemm(out_c, ckk, plane, w, (ckk as isize, 1), &cols, (plane as isize, 1), 0.0, yn);
    }
    y
}

/// Gradient of `<g, conv2d(x, w)>` with respect to `x`; `gd` is the output layout.
pub fn conv2d_input_grad(g: &[f64], gd: Nchw, w: &[f64], in_c: usize, k: usize) -> Vec<f64> {
    let plane = gd.plane();
    let ckk = in_c * k * k;
    let mut gx = vec![0.0; gd.n * in_c * plane];
    let mut cols = vec![0.0; ckk * plane];
    for n in 0..gd.n {
        let gn = &g[n * gd.c * plane..(n + 1) * gd.c * plane];
        // wᵀ: [ckk × out_c] read through strides of the row-major [out_c × ckk]
        gemm(ckk, gd.c, plane, w, (1, ckk as isize), gn, (plane as isize, 1), 0.0, &mut cols);
        col2im(&cols, in_c, gd.h, gd.w, k, &mut gx[n * in_c * plane..(n + 1) * in_c * plane]);
    }
    gx
}

/// Gradient of `<g, conv2d(x, w)>` with respect to `w`.
pub fn conv2d_weight_grad(x: &[f64], xd: Nchw, g: &[f64], out_c: usize, k: usize) -> Vec<f64> {
    let plane = xd.plane();
    let ckk = xd.c * k * k;
    let mut gw = vec![0.0; out_c * ckk];
    let mut cols = vec![0.0; ckk * plane];
    for n in 0..xd.n {
        im2col(&x[n * xd.c * plane..(n + 1) * xd.c * plane], xd.c, xd.h, xd.w, k, &mut cols);
        let gn = &g[n * out_c * plane..(n + 1) * out_c * plane];
        let beta = if n == 0 { 0.0 } else { 1.0 };
        gemm(out_c, plane, ckk, gn, (plane as isize, 1), &cols, (1, plane as isize), beta, &mut gw);
    }
    gw
}

/// `[m×k] · [k×n]`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    if m * n > 0 {
        gemm(m, k, n, a, (k as isize, 1), b, (n as isize, 1), 0.0, &mut out);
    }
    out
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Output extent of a 2×2 stride-2 max pool. An axis of length 1 stays 1.
pub fn pool_extent(size: usize) -> usize {
    (size / 2).max(1)
}

/// Flat source index of the max in each 2×2 window (first max wins).
pub fn maxpool2x2_argmax(x: &[f64], xd: Nchw) -> (Nchw, Vec<usize>) {
    let od = Nchw { n: xd.n, c: xd.c, h: pool_extent(xd.h), w: pool_extent(xd.w) };
    let mut idx = Vec::with_capacity(od.len());
    for nc in 0..xd.n * xd.c {
        let base = nc * xd.plane();
        for i in 0..od.h {
            for j in 0..od.w {
                let mut best = base + (2 * i) * xd.w + 2 * j;
                for di in 0..2 {
                    for dj in 0..2 {
                        let (r, c) = (2 * i + di, 2 * j + dj);
                        if r < xd.h && c < xd.w {
                            let at = base + r * xd.w + c;
                            if x[at] > x[best] {
                                best = at;
                            }
                        }
                    }
                }
                idx.push(best);
            }
        }
    }
    (od, idx)
}

/// Averaging windows of adaptive pooling from `size` to `out` bins:
/// bin `i` covers `[floor(i·size/out), ceil((i+1)·size/out))`.
pub fn adaptive_bins(size: usize, out: usize) -> Vec<(usize, usize)> {
    (0..out)
        .map(|i| {
            let start = i * size / out;
            let end = ((i + 1) * size).div_ceil(out);
            (start, end.max(start + 1))
        })
        .collect()
}
