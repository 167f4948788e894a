//! Per-sample numeric kernels behind the graph ops.

use crate::element::{matmul, Element, Mat};

/// Geometry of a square-kernel convolution from a `c × h × w` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> [usize; 2] {
        [
            (self.h + 2 * self.pad - self.k) / self.stride + 1,
            (self.w + 2 * self.pad - self.k) / self.stride + 1,
        ]
    }

    pub fn col_rows(&self) -> usize {
        self.c * self.k * self.k
    }

    pub fn col_cols(&self) -> usize {
        let [ho, wo] = self.out_hw();
        ho * wo
    }

    /// A 1×1, stride-1, unpadded convolution reads its input directly.
    pub fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Output columns `lo..hi` whose input column for kernel offset `kw` is inside the row.
fn valid_range(g: &ConvGeom, kw: usize, wo: usize) -> (usize, usize) {
    // input column is ox * stride + kw - pad
    let lo = g.pad.saturating_sub(kw).div_ceil(g.stride).min(wo);
    let hi = if g.w + g.pad > kw { ((g.w + g.pad - kw - 1) / g.stride + 1).min(wo) } else { 0 };
    (lo, hi.max(lo))
}

/// Floats per unfolded chunk; keeps the column buffer cache resident.
const CHUNK_FLOATS: usize = 1 << 17;

/// Output rows per chunk for this geometry.
fn chunk_rows(g: &ConvGeom) -> usize {
    let [_, wo] = g.out_hw();
    (CHUNK_FLOATS / (g.col_rows() * wo)).max(1)
}

/// Unfolds output rows `oy0..oy1` into a `(c·k·k) × ((oy1-oy0)·wo)` matrix.
pub(crate) fn im2col_rows<S: Element>(g: &ConvGeom, input: &[S], oy0: usize, oy1: usize, cols: &mut [S]) {
    let [_, wo] = g.out_hw();
    let p = (oy1 - oy0) * wo;
    debug_assert!(cols.len() >= g.col_rows() * p);
    for kw in 0..g.k {
        let (lo, hi) = valid_range(g, kw, wo);
        for c in 0..g.c {
            let plane = &input[c * g.h * g.w..(c + 1) * g.h * g.w];
            for kh in 0..g.k {
                let row = &mut cols[((c * g.k + kh) * g.k + kw) * p..][..p];
                for oy in oy0..oy1 {
                    let iy = (oy * g.stride + kh) as isize - g.pad as isize;
                    let out = &mut row[(oy - oy0) * wo..(oy - oy0 + 1) * wo];
                    if iy < 0 || iy >= g.h as isize {
                        out.fill(S::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    out[..lo].fill(S::zero());
                    out[hi..].fill(S::zero());
                    if g.stride == 1 {
                        let start = lo + kw - g.pad;
                        out[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                    } else {
                        for (ox, o) in out[lo..hi].iter_mut().enumerate() {
                            *o = src[(lo + ox) * g.stride + kw - g.pad];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col_rows`]: scatters the chunk back, adding into `out`.
pub(crate) fn col2im_rows<S: Element>(g: &ConvGeom, cols: &[S], oy0: usize, oy1: usize, out: &mut [S]) {
    let [_, wo] = g.out_hw();
    let p = (oy1 - oy0) * wo;
    for kw in 0..g.k {
        let (lo, hi) = valid_range(g, kw, wo);
        for c in 0..g.c {
            let plane = &mut out[c * g.h * g.w..(c + 1) * g.h * g.w];
            for kh in 0..g.k {
                let row = &cols[((c * g.k + kh) * g.k + kw) * p..][..p];
                for oy in oy0..oy1 {
                    let iy = (oy * g.stride + kh) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let src = &row[(oy - oy0) * wo + lo..(oy - oy0) * wo + hi];
                    if g.stride == 1 {
                        let start = lo + kw - g.pad;
                        for (d, &v) in dst[start..start + (hi - lo)].iter_mut().zip(src) {
                            *d += v;
                        }
                    } else {
                        for (ox, &v) in src.iter().enumerate() {
                            dst[(lo + ox) * g.stride + kw - g.pad] += v;
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
fn im2col<S: Element>(g: &ConvGeom, input: &[S], cols: &mut [S]) {
    im2col_rows(g, input, 0, g.out_hw()[0], cols)
}

#[cfg(test)]
fn col2im<S: Element>(g: &ConvGeom, cols: &[S], out: &mut [S]) {
    col2im_rows(g, cols, 0, g.out_hw()[0], out)
}

/// Row-major `rows × cols` view into a matrix with leading dimension `ld`.
fn sub<S>(data: &[S], ld: usize) -> (&[S], isize, isize) {
    (data, ld as isize, 1)
}

/// `y = W · cols(x) + b` for one sample; `w` is `cout × (c·k·k)`.
pub(crate) fn conv_forward<S: Element>(
    g: &ConvGeom,
    x: &[S],
    w: &[S],
    b: Option<&[S]>,
    cout: usize,
    y: &mut [S],
    scratch: &mut Vec<S>,
) {
    let (rows, p) = (g.col_rows(), g.col_cols());
    if g.is_pointwise() {
        matmul(Mat::new(w, cout, rows), false, Mat::new(x, rows, p), false, y, false);
    } else {
        let [ho, wo] = g.out_hw();
        let step = chunk_rows(g);
        scratch.resize(rows * step * wo, S::zero());
        for oy0 in (0..ho).step_by(step) {
            let oy1 = (oy0 + step).min(ho);
            let n = (oy1 - oy0) * wo;
            im2col_rows(g, x, oy0, oy1, scratch);
            S::gemm(cout, rows, n, sub(w, rows), sub(&scratch[..rows * n], n), S::zero(), (&mut y[oy0 * wo..], p as isize, 1));
        }
    }
    if let Some(b) = b {
        for (o, &bias) in b.iter().enumerate() {
            y[o * p..(o + 1) * p].iter_mut().for_each(|v| *v += bias);
        }
    }
}

/// Accumulates `dW += dy · cols(x)ᵀ` and, when `dx` is given, `dx += col2im(Wᵀ · dy)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward<S: Element>(
    g: &ConvGeom,
    x: &[S],
    w: &[S],
    cout: usize,
    dy: &[S],
    dw: &mut [S],
    mut dx: Option<&mut [S]>,
    scratch: &mut Vec<S>,
) {
    let (rows, p) = (g.col_rows(), g.col_cols());
    if g.is_pointwise() {
        matmul(Mat::new(dy, cout, p), false, Mat::new(x, rows, p), true, dw, true);
        if let Some(dx) = dx {
            matmul(Mat::new(w, cout, rows), true, Mat::new(dy, cout, p), false, dx, true);
        }
        return;
    }
    let [ho, wo] = g.out_hw();
    let step = chunk_rows(g);
    scratch.resize(rows * step * wo, S::zero());
    for oy0 in (0..ho).step_by(step) {
        let oy1 = (oy0 + step).min(ho);
        let n = (oy1 - oy0) * wo;
        let dyc = (&dy[oy0 * wo..], p as isize, 1);
        im2col_rows(g, x, oy0, oy1, scratch);
        // dW (cout × rows) += dy_chunk (cout × n) · colsᵀ (n × rows)
        S::gemm(cout, n, rows, dyc, (&scratch[..rows * n], 1, n as isize), S::one(), (&mut *dw, rows as isize, 1));
        if let Some(dx) = dx.as_deref_mut() {
            // dcols (rows × n) = Wᵀ (rows × cout) · dy_chunk (cout × n)
            S::gemm(rows, cout, n, (w, 1, rows as isize), dyc, S::zero(), (&mut scratch[..rows * n], n as isize, 1));
            col2im_rows(g, &scratch[..rows * n], oy0, oy1, dx);
        }
    }
}

/// Learned 2× upsampling of one sample: `y = col2im(Wᵀ · x)` where the
/// geometry `g` describes the 3×3 stride-2 convolution from `y` back to `x`
/// and `w` is `cin × (cout·9)`.
pub(crate) fn convt_forward<S: Element>(g: &ConvGeom, x: &[S], w: &[S], cin: usize, y: &mut [S], scratch: &mut Vec<S>) {
    let (rows, p) = (g.col_rows(), g.col_cols());
    let [hi, wi] = g.out_hw();
    let step = chunk_rows(g);
    scratch.resize(rows * step * wi, S::zero());
    for r0 in (0..hi).step_by(step) {
        let r1 = (r0 + step).min(hi);
        let n = (r1 - r0) * wi;
        // cols (rows × n) = Wᵀ (rows × cin) · x_chunk (cin × n)
        S::gemm(rows, cin, n, (w, 1, rows as isize), (&x[r0 * wi..], p as isize, 1), S::zero(), (&mut scratch[..rows * n], n as isize, 1));
        col2im_rows(g, &scratch[..rows * n], r0, r1, y);
    }
}

/// Accumulates `dW += x · cols(dy)ᵀ` and, when `dx` is given, sets `dx = W · cols(dy)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn convt_backward<S: Element>(
    g: &ConvGeom,
    x: &[S],
    w: &[S],
    cin: usize,
    dy: &[S],
    dw: &mut [S],
    mut dx: Option<&mut [S]>,
    scratch: &mut Vec<S>,
) {
    let (rows, p) = (g.col_rows(), g.col_cols());
    let [hi, wi] = g.out_hw();
    let step = chunk_rows(g);
    scratch.resize(rows * step * wi, S::zero());
    for r0 in (0..hi).step_by(step) {
        let r1 = (r0 + step).min(hi);
        let n = (r1 - r0) * wi;
        im2col_rows(g, dy, r0, r1, scratch);
        let cols = &scratch[..rows * n];
        // dW (cin × rows) += x_chunk (cin × n) · colsᵀ (n × rows)
        S::gemm(cin, n, rows, (&x[r0 * wi..], p as isize, 1), (cols, 1, n as isize), S::one(), (&mut *dw, rows as isize, 1));
        if let Some(dx) = dx.as_deref_mut() {
            S::gemm(cin, rows, n, (w, rows as isize, 1), (cols, n as isize, 1), S::zero(), (&mut dx[r0 * wi..], p as isize, 1));
        }
    }
}

/// 2×2 max pooling with stride 2; records the winning input offset per output.
pub(crate) fn maxpool2<S: Element>(x: &[S], c: usize, h: usize, w: usize, y: &mut [S], arg: &mut [u32]) {
    let (ho, wo) = (h / 2, w / 2);
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = (2 * oy) * w + 2 * ox;
                for idx in [(2 * oy) * w + 2 * ox + 1, (2 * oy + 1) * w + 2 * ox, (2 * oy + 1) * w + 2 * ox + 1] {
                    if plane[idx] > plane[best] {
                        best = idx;
                    }
                }
                let o = ch * ho * wo + oy * wo + ox;
                y[o] = plane[best];
                arg[o] = (ch * h * w + best) as u32;
            }
        }
    }
}
