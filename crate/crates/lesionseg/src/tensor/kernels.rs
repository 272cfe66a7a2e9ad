//! Numeric kernels behind the tape ops. All reductions run in a fixed
//! order so results are bit-identical for any rayon thread count: work is
//! only split across independent output regions, never across a sum.

use rayon::prelude::*;

use super::Element;

/// Whether a kernel should split across threads. Results are bit-identical
/// either way (per-element reductions keep a fixed order); below this many
/// multiply-accumulates the fork/join overhead outweighs the gain.
fn parallel_worthwhile(macs: usize) -> bool {
    macs >= 16_000_000 && rayon::current_num_threads() > 1
}

pub fn relu_forward<E: Element>(x: &[E]) -> Vec<E> {
    x.iter().map(|&v| if v > E::zero() { v } else { E::zero() }).collect()
}

/// Subgradient at exactly 0 is 0.
pub fn relu_backward<E: Element>(x: &[E], gout: &[E], gx: &mut [E]) {
    for i in 0..x.len() {
        if x[i] > E::zero() {
            gx[i] += gout[i];
        }
    }
}

/// Numerically stable logistic: evaluates `exp` only of non-positive values.
pub fn sigmoid_scalar<E: Element>(v: E) -> E {
    if v >= E::zero() {
        E::one() / (E::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (E::one() + e)
    }
}

pub fn sigmoid_forward<E: Element>(x: &[E]) -> Vec<E> {
    x.iter().map(|&v| sigmoid_scalar(v)).collect()
}

pub fn sigmoid_backward<E: Element>(y: &[E], gout: &[E], gx: &mut [E]) {
    for i in 0..y.len() {
        gx[i] += gout[i] * y[i] * (E::one() - y[i]);
    }
}

pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (input + 2 * padding - kernel) / stride + 1
}

/// Unfold one image plane set into a (c*kh*kw) x (oh*ow) column matrix.
/// Out-of-range taps read as zero (zero padding).
#[allow(clippy::too_many_arguments)]
fn im2col<E: Element>(
    x: &[E],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
    col: &mut [E],
) {
    let n = oh * ow;
    debug_assert_eq!(col.len(), c * kh * kw * n);
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((ci * kh + ki) * kw + kj) * n;
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - padding as isize;
                    let dst = &mut col[row + oy * ow..row + (oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(E::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    if stride == 1 {
                        // Contiguous middle; only the borders read padding.
                        let lo = padding.saturating_sub(kj).min(ow);
                        let hi = (w + padding - kj).min(ow);
                        dst[..lo].fill(E::zero());
                        dst[hi..].fill(E::zero());
                        let off = lo + kj - padding;
                        dst[lo..hi].copy_from_slice(&src[off..off + (hi - lo)]);
                    } else {
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * stride + kj) as isize - padding as isize;
                            *d = if ix >= 0 && ix < w as isize {
                                src[ix as usize]
                            } else {
                                E::zero()
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Fold a column-matrix gradient back onto the input plane (accumulating).
#[allow(clippy::too_many_arguments)]
fn col2im<E: Element>(
    col: &[E],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
    gx: &mut [E],
) {
    let n = oh * ow;
    for ci in 0..c {
        let plane = &mut gx[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((ci * kh + ki) * kw + kj) * n;
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &col[row + oy * ow..row + (oy + 1) * ow];
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    if stride == 1 {
                        let lo = padding.saturating_sub(kj).min(ow);
                        let hi = (w + padding - kj).min(ow);
                        let off = lo + kj - padding;
                        for (d, s) in dst[off..off + (hi - lo)].iter_mut().zip(&src[lo..hi]) {
                            *d += *s;
                        }
                    } else {
                        for (ox, s) in src.iter().enumerate() {
                            let ix = (ox * stride + kj) as isize - padding as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += *s;
                            }
                        }
                    }
                }
            }
        }
    }
}

pub struct ConvDims {
    pub batch: usize,
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvDims {
    fn kdim(&self) -> usize {
        self.in_channels * self.kh * self.kw
    }
    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }
    fn in_image(&self) -> usize {
        self.in_channels * self.in_h * self.in_w
    }
}

/// Cross-correlation via im2col + a per-channel saxpy matmul.
pub fn conv2d_forward<E: Element>(x: &[E], weight: &[E], bias: Option<&[E]>, d: &ConvDims) -> Vec<E> {
    let n = d.out_plane();
    let kdim = d.kdim();
    let mut out = vec![E::zero(); d.batch * d.out_channels * n];
    let body = |(b, out_b): (usize, &mut [E])| {
        let mut col = vec![E::zero(); kdim * n];
        im2col(
            &x[b * d.in_image()..(b + 1) * d.in_image()],
            d.in_channels,
            d.in_h,
            d.in_w,
            d.kh,
            d.kw,
            d.stride,
            d.padding,
            d.out_h,
            d.out_w,
            &mut col,
        );
        for o in 0..d.out_channels {
            let row = &mut out_b[o * n..(o + 1) * n];
            if let Some(bias) = bias {
                row.fill(bias[o]);
            }
            for k in 0..kdim {
                let wv = weight[o * kdim + k];
                if wv == E::zero() {
                    continue;
                }
                let src = &col[k * n..(k + 1) * n];
                for (r, s) in row.iter_mut().zip(src) {
                    *r += wv * *s;
                }
            }
        }
    };
    if parallel_worthwhile(d.batch * d.out_channels * n * kdim) {
        out.par_chunks_mut(d.out_channels * n).enumerate().for_each(body);
    } else {
        out.chunks_mut(d.out_channels * n).enumerate().for_each(body);
    }
    out
}

/// Gradient with respect to the convolution input.
pub fn conv2d_backward_input<E: Element>(weight: &[E], gout: &[E], d: &ConvDims) -> Vec<E> {
    let n = d.out_plane();
    let kdim = d.kdim();
    let mut gx = vec![E::zero(); d.batch * d.in_image()];
    let body = |(b, gx_b): (usize, &mut [E])| {
        let gout_b = &gout[b * d.out_channels * n..(b + 1) * d.out_channels * n];
        let mut gcol = vec![E::zero(); kdim * n];
        for k in 0..kdim {
            let row = &mut gcol[k * n..(k + 1) * n];
            for o in 0..d.out_channels {
                let wv = weight[o * kdim + k];
                if wv == E::zero() {
                    continue;
                }
                let src = &gout_b[o * n..(o + 1) * n];
                for (r, s) in row.iter_mut().zip(src) {
                    *r += wv * *s;
                }
            }
        }
        col2im(
            &gcol,
            d.in_channels,
            d.in_h,
            d.in_w,
            d.kh,
            d.kw,
            d.stride,
            d.padding,
            d.out_h,
            d.out_w,
            gx_b,
        );
    };
    if parallel_worthwhile(d.batch * d.out_channels * n * kdim) {
        gx.par_chunks_mut(d.in_image()).enumerate().for_each(body);
    } else {
        gx.chunks_mut(d.in_image()).enumerate().for_each(body);
    }
    gx
}

/// Gradients with respect to weight and bias. The batch loop stays
/// sequential so per-channel accumulation order is fixed.
pub fn conv2d_backward_params<E: Element>(
    x: &[E],
    gout: &[E],
    d: &ConvDims,
    want_bias: bool,
) -> (Vec<E>, Option<Vec<E>>) {
    let n = d.out_plane();
    let kdim = d.kdim();
    let mut gw = vec![E::zero(); d.out_channels * kdim];
    let mut gb = if want_bias { Some(vec![E::zero(); d.out_channels]) } else { None };
    let mut col = vec![E::zero(); kdim * n];
    for b in 0..d.batch {
        im2col(
            &x[b * d.in_image()..(b + 1) * d.in_image()],
            d.in_channels,
            d.in_h,
            d.in_w,
            d.kh,
            d.kw,
            d.stride,
            d.padding,
            d.out_h,
            d.out_w,
            &mut col,
        );
        let gout_b = &gout[b * d.out_channels * n..(b + 1) * d.out_channels * n];
        let col_ref = &col;
        let body = |(o, gw_o): (usize, &mut [E])| {
            let g = &gout_b[o * n..(o + 1) * n];
            for (k, gwk) in gw_o.iter_mut().enumerate() {
                let src = &col_ref[k * n..(k + 1) * n];
                let mut acc = E::zero();
                for (gi, si) in g.iter().zip(src) {
                    acc += *gi * *si;
                }
                *gwk += acc;
            }
        };
        if parallel_worthwhile(d.out_channels * kdim * n) {
            gw.par_chunks_mut(kdim).enumerate().for_each(body);
        } else {
            gw.chunks_mut(kdim).enumerate().for_each(body);
        }
        if let Some(gb) = gb.as_mut() {
            for o in 0..d.out_channels {
                let g = &gout_b[o * n..(o + 1) * n];
                let mut acc = E::zero();
                for gi in g {
                    acc += *gi;
                }
                gb[o] += acc;
            }
        }
    }
    (gw, gb)
}

/// Non-overlapping k x k max pooling. Returns the pooled values and the flat
/// input index of each window's maximum; ties resolve to the first element
/// in row-major scan order.
pub fn max_pool_forward<E: Element>(
    x: &[E],
    (n, c, h, w): (usize, usize, usize, usize),
    k: usize,
) -> (Vec<E>, Vec<u32>) {
    let oh = h / k;
    let ow = w / k;
    let mut out = vec![E::zero(); n * c * oh * ow];
    let mut argmax = vec![0u32; out.len()];
    let mut oi = 0;
    for b in 0..n {
        for ci in 0..c {
            let plane = (b * c + ci) * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best_idx = plane + (oy * k) * w + ox * k;
                    let mut best = x[best_idx];
                    for ky in 0..k {
                        for kx in 0..k {
                            let idx = plane + (oy * k + ky) * w + (ox * k + kx);
                            if x[idx] > best {
                                best = x[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out[oi] = best;
                    argmax[oi] = best_idx as u32;
                    oi += 1;
                }
            }
        }
    }
    (out, argmax)
}

pub fn max_pool_backward<E: Element>(argmax: &[u32], gout: &[E], gx: &mut [E]) {
    for (i, &src) in argmax.iter().enumerate() {
        gx[src as usize] += gout[i];
    }
}

/// Nearest-neighbour 2x upsampling: each pixel replicated into a 2x2 block.
pub fn upsample2x_forward<E: Element>(x: &[E], (n, c, h, w): (usize, usize, usize, usize)) -> Vec<E> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![E::zero(); n * c * oh * ow];
    for plane in 0..n * c {
        let src = &x[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
        for y in 0..h {
            for x_ in 0..w {
                let v = src[y * w + x_];
                let base = (2 * y) * ow + 2 * x_;
                dst[base] = v;
                dst[base + 1] = v;
                dst[base + ow] = v;
                dst[base + ow + 1] = v;
            }
        }
    }
    out
}

pub fn upsample2x_backward<E: Element>(
    gout: &[E],
    (n, c, h, w): (usize, usize, usize, usize),
    gx: &mut [E],
) {
    let ow = 2 * w;
    for plane in 0..n * c {
        let src = &gout[plane * 4 * h * w..(plane + 1) * 4 * h * w];
        let dst = &mut gx[plane * h * w..(plane + 1) * h * w];
        for y in 0..h {
            for x_ in 0..w {
                let base = (2 * y) * ow + 2 * x_;
                dst[y * w + x_] += src[base] + src[base + 1] + src[base + ow] + src[base + ow + 1];
            }
        }
    }
}

/// Per-channel mean and biased variance over (batch, height, width).
pub fn bn_batch_stats<E: Element>(
    x: &[E],
    (n, c, h, w): (usize, usize, usize, usize),
) -> (Vec<E>, Vec<E>) {
    let m = E::from_f64((n * h * w) as f64);
    let mut mean = vec![E::zero(); c];
    let mut var = vec![E::zero(); c];
    for ci in 0..c {
        let mut acc = E::zero();
        for b in 0..n {
            let plane = &x[(b * c + ci) * h * w..(b * c + ci + 1) * h * w];
            for v in plane {
                acc += *v;
            }
        }
        mean[ci] = acc / m;
    }
    for ci in 0..c {
        let mu = mean[ci];
        let mut acc = E::zero();
        for b in 0..n {
            let plane = &x[(b * c + ci) * h * w..(b * c + ci + 1) * h * w];
            for v in plane {
                let d = *v - mu;
                acc += d * d;
            }
        }
        var[ci] = acc / m;
    }
    (mean, var)
}

pub fn bn_normalize<E: Element>(
    x: &[E],
    (n, c, h, w): (usize, usize, usize, usize),
    mean: &[E],
    inv_std: &[E],
    gamma: &[E],
    beta: &[E],
) -> Vec<E> {
    let mut out = vec![E::zero(); x.len()];
    for b in 0..n {
        for ci in 0..c {
            let off = (b * c + ci) * h * w;
            let (mu, is, g, be) = (mean[ci], inv_std[ci], gamma[ci], beta[ci]);
            for i in off..off + h * w {
                out[i] = (x[i] - mu) * is * g + be;
            }
        }
    }
    out
}

/// Batch-statistics backward: gradients for input, gamma and beta.
#[allow(clippy::too_many_arguments)]
pub fn bn_backward_train<E: Element>(
    x: &[E],
    (n, c, h, w): (usize, usize, usize, usize),
    mean: &[E],
    inv_std: &[E],
    gamma: &[E],
    gout: &[E],
    gx: &mut [E],
    ggamma: &mut [E],
    gbeta: &mut [E],
) {
    let m = E::from_f64((n * h * w) as f64);
    for ci in 0..c {
        let (mu, is, g) = (mean[ci], inv_std[ci], gamma[ci]);
        let mut sum_g = E::zero();
        let mut sum_gx = E::zero();
        for b in 0..n {
            let off = (b * c + ci) * h * w;
            for i in off..off + h * w {
                let xhat = (x[i] - mu) * is;
                sum_g += gout[i];
                sum_gx += gout[i] * xhat;
            }
        }
        ggamma[ci] += sum_gx;
        gbeta[ci] += sum_g;
        let mean_g = sum_g / m;
        let mean_gx = sum_gx / m;
        for b in 0..n {
            let off = (b * c + ci) * h * w;
            for i in off..off + h * w {
                let xhat = (x[i] - mu) * is;
                gx[i] += g * is * (gout[i] - mean_g - xhat * mean_gx);
            }
        }
    }
}

/// Running-statistics backward: the normalization is an affine map per
/// channel, so the input gradient is a plain scale.
#[allow(clippy::too_many_arguments)]
pub fn bn_backward_eval<E: Element>(
    x: &[E],
    (n, c, h, w): (usize, usize, usize, usize),
    mean: &[E],
    inv_std: &[E],
    gamma: &[E],
    gout: &[E],
    gx: &mut [E],
    ggamma: &mut [E],
    gbeta: &mut [E],
) {
    for ci in 0..c {
        let (mu, is, g) = (mean[ci], inv_std[ci], gamma[ci]);
        for b in 0..n {
            let off = (b * c + ci) * h * w;
            for i in off..off + h * w {
                gx[i] += gout[i] * g * is;
                ggamma[ci] += gout[i] * (x[i] - mu) * is;
                gbeta[ci] += gout[i];
            }
        }
    }
}

/// Mean over elements of `max(z,0) - t*z + ln(1 + exp(-|z|))`.
pub fn bce_with_logits_forward<E: Element>(z: &[E], t: &[E]) -> E {
    let mut acc = E::zero();
    for i in 0..z.len() {
        let zi = z[i];
        acc += zi.max(E::zero()) - t[i] * zi + (-zi.abs()).exp().ln_1p();
    }
    acc / E::from_f64(z.len() as f64)
}

pub fn bce_with_logits_backward<E: Element>(z: &[E], t: &[E], gout: E, gz: &mut [E]) {
    let scale = gout / E::from_f64(z.len() as f64);
    for i in 0..z.len() {
        gz[i] += scale * (sigmoid_scalar(z[i]) - t[i]);
    }
}
