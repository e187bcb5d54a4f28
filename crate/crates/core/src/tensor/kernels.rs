//! Loop kernels behind the graph ops. Convolution goes through im2col + GEMM.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Output extent of a sliding window, or `None` when no window position fits.
pub(crate) fn window_extent(input: usize, window: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || window == 0 || padded < window {
        return None;
    }
    Some((padded - window) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new<T: Scalar>(
        x: &Tensor<T>,
        kernel: &Tensor<T>,
        bias: &Tensor<T>,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let (n, cin, h, w) = x.dims4()?;
        let (cout, kcin, kh, kw) = kernel.dims4().map_err(|_| {
            Error::dim("conv2d", format!("kernel must be 4-D, got {:?}", kernel.shape()))
        })?;
        if kcin != cin {
            return Err(Error::dim(
                "conv2d",
                format!(
                    "input channels differ: input {:?} vs kernel {:?}",
                    x.shape(),
                    kernel.shape()
                ),
            ));
        }
        if bias.shape() != [cout] {
            return Err(Error::dim(
                "conv2d",
                format!("bias {:?} does not match kernel {:?}", bias.shape(), kernel.shape()),
            ));
        }
        if stride == 0 {
            return Err(Error::param("stride", "must be positive"));
        }
        let (ho, wo) = match (window_extent(h, kh, stride, pad), window_extent(w, kw, stride, pad)) {
            (Some(ho), Some(wo)) => (ho, wo),
            _ => {
                return Err(Error::dim(
                    "conv2d",
                    format!(
                        "kernel {:?} does not fit input {:?} with padding {pad}",
                        kernel.shape(),
                        x.shape()
                    ),
                ))
            }
        };
        Ok(ConvGeom { n, cin, h, w, cout, kh, kw, stride, pad, ho, wo })
    }

    fn patch_len(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn out_pixels(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds one image `[cin, h, w]` into `[cin*kh*kw, ho*wo]`.
fn im2col<T: Scalar>(g: &ConvGeom, image: &[T], cols: &mut [T]) {
    let p = g.out_pixels();
    for c in 0..g.cin {
        let plane = &image[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters `[cin*kh*kw, ho*wo]` back onto `[cin, h, w]`.
fn col2im_add<T: Scalar>(g: &ConvGeom, cols: &[T], image: &mut [T]) {
    let p = g.out_pixels();
    for c in 0..g.cin {
        let plane = &mut image[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    kernel: &[T],
    bias: &[T],
) -> Vec<T> {
    let p = g.out_pixels();
    let k = g.patch_len();
    let in_len = g.cin * g.h * g.w;
    let mut out = vec![T::zero(); g.n * g.cout * p];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
    for b in 0..g.n {
        let image = &x[b * in_len..(b + 1) * in_len];
        let dst = &mut out[b * g.cout * p..(b + 1) * g.cout * p];
        for (co, row) in dst.chunks_exact_mut(p).enumerate() {
            row.fill(bias[co]);
        }
        let src: &[T] = if g.is_pointwise() {
            image
        } else {
            im2col(g, image, &mut cols);
            &cols
        };
        T::gemm(g.cout, k, p, kernel, false, src, false, T::one(), dst);
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub kernel: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub(crate) fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    kernel: &[T],
    grad_out: &[T],
    need: [bool; 3],
) -> ConvGrads<T> {
    let [need_x, need_k, need_b] = need;
    let p = g.out_pixels();
    let k = g.patch_len();
    let in_len = g.cin * g.h * g.w;
    let mut dx = need_x.then(|| vec![T::zero(); x.len()]);
    let mut dk = need_k.then(|| vec![T::zero(); kernel.len()]);
    let mut db = need_b.then(|| vec![T::zero(); g.cout]);
    let mut cols = vec![T::zero(); k * p];
    for b in 0..g.n {
        let gout = &grad_out[b * g.cout * p..(b + 1) * g.cout * p];
        if let Some(db) = db.as_mut() {
            for (co, row) in gout.chunks_exact(p).enumerate() {
                db[co] += row.iter().copied().sum::<T>();
            }
        }
        let image = &x[b * in_len..(b + 1) * in_len];
        if let Some(dk) = dk.as_mut() {
            let src: &[T] = if g.is_pointwise() {
                image
            } else {
                im2col(g, image, &mut cols);
                &cols
            };
            // dK[cout, k] += gout[cout, p] * cols[k, p]^T
            T::gemm(g.cout, p, k, gout, false, src, true, T::one(), dk);
        }
        if let Some(dx) = dx.as_mut() {
            let dimg = &mut dx[b * in_len..(b + 1) * in_len];
            if g.is_pointwise() {
                T::gemm(k, g.cout, p, kernel, true, gout, false, T::one(), dimg);
            } else {
                T::gemm(k, g.cout, p, kernel, true, gout, false, T::zero(), &mut cols);
                col2im_add(g, &cols, dimg);
            }
        }
    }
    ConvGrads { input: dx, kernel: dk, bias: db }
}

/// Max pooling with implicit `-inf` padding. Returns the pooled values and,
/// for each output, the flat input index of its (first, row-major) maximum.
pub(crate) fn maxpool_forward<T: Scalar>(
    x: &Tensor<T>,
    window: usize,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let (n, c, h, w) = x.dims4()?;
    if window == 0 || stride == 0 {
        return Err(Error::param("window/stride", "must be positive"));
    }
    if pad >= window {
        return Err(Error::param("padding", "must be smaller than the window"));
    }
    let (ho, wo) = match (window_extent(h, window, stride, pad), window_extent(w, window, stride, pad)) {
        (Some(ho), Some(wo)) => (ho, wo),
        _ => {
            return Err(Error::dim(
                "maxpool2d",
                format!("window {window} has no valid position in input {:?}", x.shape()),
            ))
        }
    };
    let data = x.data();
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            let y0 = (oy * stride) as isize - pad as isize;
            for ox in 0..wo {
                let x0 = (ox * stride) as isize - pad as isize;
                let mut best = T::neg_infinity();
                let mut best_ix = usize::MAX;
                for yy in y0.max(0)..(y0 + window as isize).min(h as isize) {
                    for xx in x0.max(0)..(x0 + window as isize).min(w as isize) {
                        let ix = base + yy as usize * w + xx as usize;
                        if best_ix == usize::MAX || data[ix] > best {
                            best = data[ix];
                            best_ix = ix;
                        }
                    }
                }
                out.push(best);
                arg.push(best_ix);
            }
        }
    }
    Ok((Tensor::new(vec![n, c, ho, wo], out)?, arg))
}

/// Grid-cell boundaries `[start, end)` splitting `extent` cells beginning at
/// `start` into `cells` pieces at `round(i * extent / cells)`. A cell that
/// would be empty borrows the neighbouring boundary so every output has at
/// least one source element.
pub fn roi_cell_bounds(start: usize, extent: usize, cells: usize) -> Vec<(usize, usize)> {
    assert!(extent >= 1 && cells >= 1);
    // round(a / b) for non-negative integers, halves away from zero
    let round_div = |a: usize, b: usize| (2 * a + b) / (2 * b);
    (0..cells)
        .map(|i| {
            let mut lo = start + round_div(i * extent, cells);
            let mut hi = start + round_div((i + 1) * extent, cells);
            if lo == hi {
                if hi < start + extent {
                    hi += 1;
                } else {
                    lo -= 1;
                }
            }
            (lo, hi)
        })
        .collect()
}

/// Integer span `[start, end)` on an axis of length `len` covered by the
/// continuous interval `[lo, hi)`, or `None` when it misses the axis entirely.
pub(crate) fn roi_span(lo: f32, hi: f32, len: usize) -> Option<(usize, usize)> {
    if !(lo.is_finite() && hi.is_finite()) || hi <= 0.0 || lo >= len as f32 || hi <= lo {
        return None;
    }
    let start = (lo.floor().max(0.0) as usize).min(len - 1);
    let end = (hi.ceil() as usize).clamp(start + 1, len);
    Some((start, end))
}

/// ROI max pooling of `[1, C, H, W]` features over each `[x1, y1, x2, y2]`
/// region (feature-map coordinates). Output `[R, C, out_h, out_w]` plus the
/// flat input index feeding each output.
pub(crate) fn roi_pool_forward<T: Scalar>(
    features: &Tensor<T>,
    rois: &[[f32; 4]],
    out_h: usize,
    out_w: usize,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let (n, c, h, w) = features.dims4()?;
    if n != 1 {
        return Err(Error::dim("roi_pool", format!("expected batch 1, got {:?}", features.shape())));
    }
    if rois.is_empty() || out_h == 0 || out_w == 0 {
        return Err(Error::param("roi_pool", "needs at least one ROI and a positive output grid"));
    }
    let data = features.data();
    let mut out = Vec::with_capacity(rois.len() * c * out_h * out_w);
    let mut arg = Vec::with_capacity(out.capacity());
    for (r, roi) in rois.iter().enumerate() {
        let (xs, ys) = match (roi_span(roi[0], roi[2], w), roi_span(roi[1], roi[3], h)) {
            (Some(xs), Some(ys)) => (xs, ys),
            _ => {
                return Err(Error::Contract(format!(
                    "ROI {r} {roi:?} lies outside the {h}x{w} feature map"
                )))
            }
        };
        let rows = roi_cell_bounds(ys.0, ys.1 - ys.0, out_h);
        let cols = roi_cell_bounds(xs.0, xs.1 - xs.0, out_w);
        for ch in 0..c {
            let base = ch * h * w;
            for &(y0, y1) in &rows {
                for &(x0, x1) in &cols {
                    let mut best_ix = base + y0 * w + x0;
                    for yy in y0..y1 {
                        for xx in x0..x1 {
                            let ix = base + yy * w + xx;
                            if data[ix] > data[best_ix] {
                                best_ix = ix;
                            }
                        }
                    }
                    out.push(data[best_ix]);
                    arg.push(best_ix);
                }
            }
        }
    }
    Ok((Tensor::new(vec![rois.len(), c, out_h, out_w], out)?, arg))
}
