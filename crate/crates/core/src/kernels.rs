//! Forward/adjoint kernels for the spatial operators used by the graph.
//!
//! Every function here is a plain loop over `h × w × c` buffers; the adjoint
//! of each linear operator sits next to its forward.

use crate::tensor::Float;

/// One output sample of a separable linear resampler: `(src0, src1, w0, w1)`.
pub(crate) type Tap<T> = (usize, usize, T, T);

/// Half-pixel-centre bilinear taps (`align_corners = false`), one per output index.
pub(crate) fn bilinear_taps<T: Float>(n_in: usize, n_out: usize) -> Vec<Tap<T>> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            let frac = src - i0 as f64;
            let frac = if i1 == i0 { 0.0 } else { frac };
            (i0, i1, T::c(1.0 - frac), T::c(frac))
        })
        .collect()
}

pub(crate) fn resize_forward<T: Float>(
    x: &[T],
    (h, w, c): (usize, usize, usize),
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let ty = bilinear_taps::<T>(h, oh);
    let tx = bilinear_taps::<T>(w, ow);
    let mut out = vec![T::zero(); oh * ow * c];
    for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
        for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
            let o = &mut out[(oy * ow + ox) * c..(oy * ow + ox + 1) * c];
            let corners = [
                (y0, x0, wy0 * wx0),
                (y0, x1, wy0 * wx1),
                (y1, x0, wy1 * wx0),
                (y1, x1, wy1 * wx1),
            ];
            for (yy, xx, wt) in corners {
                if wt == T::zero() {
                    continue;
                }
                let src = &x[(yy * w + xx) * c..(yy * w + xx + 1) * c];
                for (ov, &sv) in o.iter_mut().zip(src) {
                    *ov += wt * sv;
                }
            }
        }
    }
    out
}

pub(crate) fn resize_adjoint<T: Float>(
    dy: &[T],
    (h, w, c): (usize, usize, usize),
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let ty = bilinear_taps::<T>(h, oh);
    let tx = bilinear_taps::<T>(w, ow);
    let mut dx = vec![T::zero(); h * w * c];
    for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
        for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
            let g = &dy[(oy * ow + ox) * c..(oy * ow + ox + 1) * c];
            let corners = [
                (y0, x0, wy0 * wx0),
                (y0, x1, wy0 * wx1),
                (y1, x0, wy1 * wx0),
                (y1, x1, wy1 * wx1),
            ];
            for (yy, xx, wt) in corners {
                if wt == T::zero() {
                    continue;
                }
                let d = &mut dx[(yy * w + xx) * c..(yy * w + xx + 1) * c];
                for (dv, &gv) in d.iter_mut().zip(g) {
                    *dv += wt * gv;
                }
            }
        }
    }
    dx
}

/// Adaptive average-pool bins: `[floor(i·n/o), ceil((i+1)·n/o))`.
pub(crate) fn adaptive_bins(n_in: usize, n_out: usize) -> Vec<(usize, usize)> {
    (0..n_out)
        .map(|i| {
            let start = i * n_in / n_out;
            let end = ((i + 1) * n_in).div_ceil(n_out);
            (start, end.max(start + 1))
        })
        .collect()
}

pub(crate) fn adaptive_pool_forward<T: Float>(
    x: &[T],
    (h, w, c): (usize, usize, usize),
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let by = adaptive_bins(h, oh);
    let bx = adaptive_bins(w, ow);
    let mut out = vec![T::zero(); oh * ow * c];
    for (oy, &(ys, ye)) in by.iter().enumerate() {
        for (ox, &(xs, xe)) in bx.iter().enumerate() {
            let inv = T::c(1.0 / ((ye - ys) * (xe - xs)) as f64);
            let o = &mut out[(oy * ow + ox) * c..(oy * ow + ox + 1) * c];
            for yy in ys..ye {
                for xx in xs..xe {
                    let src = &x[(yy * w + xx) * c..(yy * w + xx + 1) * c];
                    for (ov, &sv) in o.iter_mut().zip(src) {
                        *ov += sv;
                    }
                }
            }
            o.iter_mut().for_each(|v| *v *= inv);
        }
    }
    out
}

pub(crate) fn adaptive_pool_adjoint<T: Float>(
    dy: &[T],
    (h, w, c): (usize, usize, usize),
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let by = adaptive_bins(h, oh);
    let bx = adaptive_bins(w, ow);
    let mut dx = vec![T::zero(); h * w * c];
    for (oy, &(ys, ye)) in by.iter().enumerate() {
        for (ox, &(xs, xe)) in bx.iter().enumerate() {
            let inv = T::c(1.0 / ((ye - ys) * (xe - xs)) as f64);
            let g = &dy[(oy * ow + ox) * c..(oy * ow + ox + 1) * c];
            for yy in ys..ye {
                for xx in xs..xe {
                    let d = &mut dx[(yy * w + xx) * c..(yy * w + xx + 1) * c];
                    for (dv, &gv) in d.iter_mut().zip(g) {
                        *dv += gv * inv;
                    }
                }
            }
        }
    }
    dx
}

/// Sliding-window mean of width `p` (stride 1, no padding) along one axis of
/// an `h × w × c` buffer. Returns the pooled buffer and its dims.
pub(crate) fn box_mean_forward<T: Float>(
    x: &[T],
    dims: (usize, usize, usize),
    axis: usize,
    p: usize,
) -> (Vec<T>, (usize, usize, usize)) {
    let (h, w, c) = dims;
    let n = [h, w, c][axis];
    let m = n - p + 1;
    let od = match axis {
        0 => (m, w, c),
        1 => (h, m, c),
        _ => (h, w, m),
    };
    let (stride, outer, inner) = axis_layout(dims, axis);
    let out_stride = axis_layout(od, axis).0;
    let inv = T::c(1.0 / p as f64);
    let mut out = vec![T::zero(); od.0 * od.1 * od.2];
    let mut line = vec![T::zero(); n];
    for o in 0..outer {
        for i in 0..inner {
            let base_in = o * n * stride + i;
            let base_out = o * m * out_stride + i;
            for (j, l) in line.iter_mut().enumerate() {
                *l = x[base_in + j * stride];
            }
            for k in 0..m {
                let mut s = T::zero();
                for &v in &line[k..k + p] {
                    s += v;
                }
                out[base_out + k * out_stride] = s * inv;
            }
        }
    }
    (out, od)
}

pub(crate) fn box_mean_adjoint<T: Float>(
    dy: &[T],
    dims: (usize, usize, usize),
    axis: usize,
    p: usize,
) -> Vec<T> {
    let (h, w, c) = dims;
    let n = [h, w, c][axis];
    let m = n - p + 1;
    let od = match axis {
        0 => (m, w, c),
        1 => (h, m, c),
        _ => (h, w, m),
    };
    let (stride, outer, inner) = axis_layout(dims, axis);
    let out_stride = axis_layout(od, axis).0;
    let inv = T::c(1.0 / p as f64);
    let mut dx = vec![T::zero(); h * w * c];
    for o in 0..outer {
        for i in 0..inner {
            let base_in = o * n * stride + i;
            let base_out = o * m * out_stride + i;
            for k in 0..m {
                let g = dy[base_out + k * out_stride] * inv;
                for j in k..k + p {
                    dx[base_in + j * stride] += g;
                }
            }
        }
    }
    dx
}

/// `(stride of axis, number of outer lines, inner extent)` for row-major h×w×c.
fn axis_layout((h, w, c): (usize, usize, usize), axis: usize) -> (usize, usize, usize) {
    match axis {
        0 => (w * c, 1, w * c),
        1 => (c, h, c),
        _ => (1, h * w, 1),
    }
}

/// Block boundaries of a `q`-way split of `n` (`floor(i·n/q)`), equal when `q | n`.
pub(crate) fn block_bounds(n: usize, q: usize) -> Vec<(usize, usize)> {
    (0..q).map(|i| (i * n / q, (i + 1) * n / q)).collect()
}

/// Strip pooling over a `q × q` block grid; output rows are, per block in
/// row-major order, the row means (over the block width) followed by the
/// column means (over the block height). Output shape `[q·(h+w), c]`.
pub(crate) fn strip_pool_forward<T: Float>(
    x: &[T],
    (_h, w, c): (usize, usize, usize),
    rows: &[(usize, usize)],
    cols: &[(usize, usize)],
) -> Vec<T> {
    let mut out = Vec::new();
    for &(r0, r1) in rows {
        for &(c0, c1) in cols {
            let inv_w = T::c(1.0 / (c1 - c0) as f64);
            for r in r0..r1 {
                let mut acc = vec![T::zero(); c];
                for cc in c0..c1 {
                    let src = &x[(r * w + cc) * c..(r * w + cc + 1) * c];
                    for (a, &s) in acc.iter_mut().zip(src) {
                        *a += s;
                    }
                }
                out.extend(acc.into_iter().map(|a| a * inv_w));
            }
            let inv_h = T::c(1.0 / (r1 - r0) as f64);
            for cc in c0..c1 {
                let mut acc = vec![T::zero(); c];
                for r in r0..r1 {
                    let src = &x[(r * w + cc) * c..(r * w + cc + 1) * c];
                    for (a, &s) in acc.iter_mut().zip(src) {
                        *a += s;
                    }
                }
                out.extend(acc.into_iter().map(|a| a * inv_h));
            }
        }
    }
    out
}

pub(crate) fn strip_pool_adjoint<T: Float>(
    dy: &[T],
    (h, w, c): (usize, usize, usize),
    rows: &[(usize, usize)],
    cols: &[(usize, usize)],
) -> Vec<T> {
    let mut dx = vec![T::zero(); h * w * c];
    let mut at = 0;
    for &(r0, r1) in rows {
        for &(c0, c1) in cols {
            let inv_w = T::c(1.0 / (c1 - c0) as f64);
            for r in r0..r1 {
                let g = &dy[at * c..(at + 1) * c];
                at += 1;
                for cc in c0..c1 {
                    let d = &mut dx[(r * w + cc) * c..(r * w + cc + 1) * c];
                    for (dv, &gv) in d.iter_mut().zip(g) {
                        *dv += gv * inv_w;
                    }
                }
            }
            let inv_h = T::c(1.0 / (r1 - r0) as f64);
            for cc in c0..c1 {
                let g = &dy[at * c..(at + 1) * c];
                at += 1;
                for r in r0..r1 {
                    let d = &mut dx[(r * w + cc) * c..(r * w + cc + 1) * c];
                    for (dv, &gv) in d.iter_mut().zip(g) {
                        *dv += gv * inv_h;
                    }
                }
            }
        }
    }
    dx
}

/// Cycle FC channel offset along one axis: `(c mod s) − ⌊s/2⌋`.
pub fn cycle_offset(c: usize, step: usize) -> isize {
    (c % step) as isize - (step / 2) as isize
}

/// Source coordinates of the cyclic gather, per channel: `(δ_m(c), δ_n(c))·d`.
pub(crate) fn cycle_offsets(
    channels: usize,
    step_h: usize,
    step_w: usize,
    dilation: usize,
) -> Vec<(isize, isize)> {
    (0..channels)
        .map(|ch| {
            let dm = cycle_offset(ch, step_h);
            let dn = cycle_offset(ch / step_h, step_w);
            (dm * dilation as isize, dn * dilation as isize)
        })
        .collect()
}

pub(crate) fn cycle_shift_forward<T: Float>(
    x: &[T],
    (h, w, c): (usize, usize, usize),
    offsets: &[(isize, isize)],
) -> Vec<T> {
    let mut out = vec![T::zero(); h * w * c];
    for m in 0..h {
        for n in 0..w {
            let o = (m * w + n) * c;
            for (ch, &(dm, dn)) in offsets.iter().enumerate() {
                let sm = m as isize + dm;
                let sn = n as isize + dn;
                if sm >= 0 && sn >= 0 && (sm as usize) < h && (sn as usize) < w {
                    out[o + ch] = x[(sm as usize * w + sn as usize) * c + ch];
                }
            }
        }
    }
    out
}

pub(crate) fn cycle_shift_adjoint<T: Float>(
    dy: &[T],
    (h, w, c): (usize, usize, usize),
    offsets: &[(isize, isize)],
) -> Vec<T> {
    let mut dx = vec![T::zero(); h * w * c];
    for m in 0..h {
        for n in 0..w {
            let o = (m * w + n) * c;
            for (ch, &(dm, dn)) in offsets.iter().enumerate() {
                let sm = m as isize + dm;
                let sn = n as isize + dn;
                if sm >= 0 && sn >= 0 && (sm as usize) < h && (sn as usize) < w {
                    dx[(sm as usize * w + sn as usize) * c + ch] += dy[o + ch];
                }
            }
        }
    }
    dx
}

/// Geometry of a dense 2-D convolution over a channels-last map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(
        (h, w, cin): (usize, usize, usize),
        (kh, kw): (usize, usize),
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        if stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
            return None;
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        Some(ConvGeom {
            h,
            w,
            cin,
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.kh * self.kw * self.cin
    }
}

/// Unfold overlapping patches into rows ordered `(ky, kx, ci)`.
pub(crate) fn im2col<T: Float>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let pl = g.patch_len();
    let mut cols = vec![T::zero(); g.oh * g.ow * pl];
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let row = &mut cols[(oy * g.ow + ox) * pl..(oy * g.ow + ox + 1) * pl];
            for ky in 0..g.kh {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy as usize >= g.h {
                    continue;
                }
                for kx in 0..g.kw {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix < 0 || ix as usize >= g.w {
                        continue;
                    }
                    let src = ((iy as usize) * g.w + ix as usize) * g.cin;
                    let dst = (ky * g.kw + kx) * g.cin;
                    row[dst..dst + g.cin].copy_from_slice(&x[src..src + g.cin]);
                }
            }
        }
    }
    cols
}

pub(crate) fn col2im<T: Float>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let pl = g.patch_len();
    let mut dx = vec![T::zero(); g.h * g.w * g.cin];
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let row = &cols[(oy * g.ow + ox) * pl..(oy * g.ow + ox + 1) * pl];
            for ky in 0..g.kh {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy as usize >= g.h {
                    continue;
                }
                for kx in 0..g.kw {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix < 0 || ix as usize >= g.w {
                        continue;
                    }
                    let dst = ((iy as usize) * g.w + ix as usize) * g.cin;
                    let src = (ky * g.kw + kx) * g.cin;
                    for (d, &s) in dx[dst..dst + g.cin].iter_mut().zip(&row[src..src + g.cin]) {
                        *d += s;
                    }
                }
            }
        }
    }
    dx
}

/// Depthwise `k × k` convolution, stride 1, symmetric zero padding `k/2`.
pub(crate) fn depthwise_forward<T: Float>(
    x: &[T],
    (h, w, c): (usize, usize, usize),
    weight: &[T],
    k: usize,
    bias: &[T],
) -> Vec<T> {
    let pad = (k / 2) as isize;
    let mut out = Vec::with_capacity(h * w * c);
    for _ in 0..h * w {
        out.extend_from_slice(bias);
    }
    for y in 0..h {
        for xx in 0..w {
            let o = (y * w + xx) * c;
            for ky in 0..k {
                let iy = y as isize + ky as isize - pad;
                if iy < 0 || iy as usize >= h {
                    continue;
                }
                for kx in 0..k {
                    let ix = xx as isize + kx as isize - pad;
                    if ix < 0 || ix as usize >= w {
                        continue;
                    }
                    let src = (iy as usize * w + ix as usize) * c;
                    let wk = &weight[(ky * k + kx) * c..(ky * k + kx + 1) * c];
                    let (o_s, x_s) = (&mut out[o..o + c], &x[src..src + c]);
                    for ((ov, &xv), &wv) in o_s.iter_mut().zip(x_s).zip(wk) {
                        *ov += xv * wv;
                    }
                }
            }
        }
    }
    out
}

/// Returns `(dx, dweight, dbias)`.
pub(crate) fn depthwise_adjoint<T: Float>(
    dy: &[T],
    x: &[T],
    (h, w, c): (usize, usize, usize),
    weight: &[T],
    k: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let pad = (k / 2) as isize;
    let mut dx = vec![T::zero(); h * w * c];
    let mut dw = vec![T::zero(); k * k * c];
    let mut db = vec![T::zero(); c];
    for y in 0..h {
        for xx in 0..w {
            let o = (y * w + xx) * c;
            let g = &dy[o..o + c];
            for (d, &gv) in db.iter_mut().zip(g) {
                *d += gv;
            }
            for ky in 0..k {
                let iy = y as isize + ky as isize - pad;
                if iy < 0 || iy as usize >= h {
                    continue;
                }
                for kx in 0..k {
                    let ix = xx as isize + kx as isize - pad;
                    if ix < 0 || ix as usize >= w {
                        continue;
                    }
                    let src = (iy as usize * w + ix as usize) * c;
                    let widx = (ky * k + kx) * c;
                    for ch in 0..c {
                        dx[src + ch] += g[ch] * weight[widx + ch];
                        dw[widx + ch] += g[ch] * x[src + ch];
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

pub(crate) fn erf(x: f64) -> f64 {
    libm::erf(x)
}
