//! Forward and backward kernels for the layers used by the matching network.
//!
//! Every kernel is a pure function: forward returns its output together with
//! whatever the backward pass needs, and backward returns input/parameter
//! gradients without touching shared state. Convolutions go through
//! im2col + GEMM.

use serde::{Deserialize, Serialize};

use crate::tensor::{matmul, matmul_nt, matmul_tn, Elem, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeom {
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub const fn new(stride: usize, pad: usize) -> Self {
        Self { stride, pad }
    }

    pub fn out_len(&self, len: usize, k: usize) -> usize {
        (len + 2 * self.pad - k) / self.stride + 1
    }

    fn is_pointwise(&self, kh: usize, kw: usize) -> bool {
        kh == 1 && kw == 1 && self.stride == 1 && self.pad == 0
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col<E: Elem>(
    src: &[E],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    g: ConvGeom,
    ho: usize,
    wo: usize,
    col: &mut [E],
) {
    let cols = ho * wo;
    for ci in 0..c {
        let plane = &src[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        out.fill(E::zero());
                        continue;
                    }
                    let line = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, o) in out.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *o = if ix < 0 || ix >= w as isize {
                            E::zero()
                        } else {
                            line[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<E: Elem>(
    col: &[E],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    g: ConvGeom,
    ho: usize,
    wo: usize,
    dst: &mut [E],
) {
    let cols = ho * wo;
    for ci in 0..c {
        let plane = &mut dst[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let src = &col[row * cols..(row + 1) * cols];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in src[oy * wo..(oy + 1) * wo].iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            line[ix as usize] += *v;
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation with zero padding. `w` is `[c_out, c_in, kh, kw]`.
pub fn conv2d<E: Elem>(x: &Tensor<E>, w: &Tensor<E>, bias: Option<&Tensor<E>>, g: ConvGeom) -> Tensor<E> {
    let [n, c, h, wd] = x.shape();
    let [co, ci, kh, kw] = w.shape();
    assert_eq!(c, ci, "conv2d channel mismatch");
    let ho = g.out_len(h, kh);
    let wo = g.out_len(wd, kw);
    let k = ci * kh * kw;
    let mut out = Tensor::zeros([n, co, ho, wo]);
    let mut col = if g.is_pointwise(kh, kw) {
        Vec::new()
    } else {
        vec![E::zero(); k * ho * wo]
    };
    for b in 0..n {
        let src: &[E] = if g.is_pointwise(kh, kw) {
            x.item(b)
        } else {
            im2col(x.item(b), c, h, wd, kh, kw, g, ho, wo, &mut col);
            &col
        };
        matmul(co, k, ho * wo, w.data(), src, E::zero(), out.item_mut(b));
    }
    if let Some(bias) = bias {
        add_channel_bias(&mut out, bias);
    }
    out
}

fn add_channel_bias<E: Elem>(out: &mut Tensor<E>, bias: &Tensor<E>) {
    let [n, co, ho, wo] = out.shape();
    let hw = ho * wo;
    for b in 0..n {
        let item = out.item_mut(b);
        for (o, bv) in bias.data().iter().enumerate().take(co) {
            for v in &mut item[o * hw..(o + 1) * hw] {
                *v += *bv;
            }
        }
    }
}

/// Gradients of [`conv2d`] with respect to its input and kernel.
pub fn conv2d_backward<E: Elem>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    dy: &Tensor<E>,
    g: ConvGeom,
    want_dx: bool,
    want_dw: bool,
) -> (Option<Tensor<E>>, Option<Tensor<E>>) {
    let [n, c, h, wd] = x.shape();
    let [co, _, kh, kw] = w.shape();
    let [_, _, ho, wo] = dy.shape();
    let k = c * kh * kw;
    let hw = ho * wo;
    let pointwise = g.is_pointwise(kh, kw);
    let mut dx = want_dx.then(|| Tensor::zeros(x.shape()));
    let mut dw = want_dw.then(|| Tensor::zeros(w.shape()));
    let mut col = vec![E::zero(); if pointwise { 0 } else { k * hw }];
    for b in 0..n {
        let dyb = dy.item(b);
        if let Some(dw) = dw.as_mut() {
            let src: &[E] = if pointwise {
                x.item(b)
            } else {
                im2col(x.item(b), c, h, wd, kh, kw, g, ho, wo, &mut col);
                &col
            };
            matmul_nt(co, hw, k, dyb, src, E::one(), dw.data_mut());
        }
        if let Some(dx) = dx.as_mut() {
            if pointwise {
                matmul_tn(k, co, hw, w.data(), dyb, E::zero(), dx.item_mut(b));
            } else {
                matmul_tn(k, co, hw, w.data(), dyb, E::zero(), &mut col);
                col2im(&col, c, h, wd, kh, kw, g, ho, wo, dx.item_mut(b));
            }
        }
    }
    (dx, dw)
}

/// Sum of `dy` over batch and space, i.e. the bias gradient, as `[1, c, 1, 1]`.
pub fn channel_sums<E: Elem>(dy: &Tensor<E>) -> Tensor<E> {
    let [n, c, h, w] = dy.shape();
    let mut out = Tensor::zeros([1, c, 1, 1]);
    for b in 0..n {
        let item = dy.item(b);
        for ch in 0..c {
            let s: E = item[ch * h * w..(ch + 1) * h * w].iter().copied().sum();
            out.data_mut()[ch] += s;
        }
    }
    out
}

/// Output length of a transposed convolution.
pub fn conv_transpose_out_len(len: usize, k: usize, g: ConvGeom, output_pad: usize) -> usize {
    (len - 1) * g.stride + k + output_pad - 2 * g.pad
}

/// Transposed convolution (adjoint of [`conv2d`]). `w` is `[c_in, c_out, kh, kw]`.
pub fn conv_transpose2d<E: Elem>(x: &Tensor<E>, w: &Tensor<E>, g: ConvGeom, output_pad: usize) -> Tensor<E> {
    let [n, c, h, wd] = x.shape();
    let [ci, co, kh, kw] = w.shape();
    assert_eq!(c, ci, "conv_transpose2d channel mismatch");
    assert!(output_pad < g.stride);
    let ho = conv_transpose_out_len(h, kh, g, output_pad);
    let wo = conv_transpose_out_len(wd, kw, g, output_pad);
    let k = co * kh * kw;
    let mut out = Tensor::zeros([n, co, ho, wo]);
    let mut col = vec![E::zero(); k * h * wd];
    for b in 0..n {
        matmul_tn(k, ci, h * wd, w.data(), x.item(b), E::zero(), &mut col);
        col2im(&col, co, ho, wo, kh, kw, g, h, wd, out.item_mut(b));
    }
    out
}

pub fn conv_transpose2d_backward<E: Elem>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    dy: &Tensor<E>,
    g: ConvGeom,
    want_dw: bool,
) -> (Tensor<E>, Option<Tensor<E>>) {
    let [n, c, h, wd] = x.shape();
    let [_, co, kh, kw] = w.shape();
    let [_, _, ho, wo] = dy.shape();
    let k = co * kh * kw;
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = want_dw.then(|| Tensor::zeros(w.shape()));
    let mut col = vec![E::zero(); k * h * wd];
    for b in 0..n {
        im2col(dy.item(b), co, ho, wo, kh, kw, g, h, wd, &mut col);
        matmul(c, k, h * wd, w.data(), &col, E::zero(), dx.item_mut(b));
        if let Some(dw) = dw.as_mut() {
            matmul_nt(c, h * wd, k, x.item(b), &col, E::one(), dw.data_mut());
        }
    }
    (dx, dw)
}

/// What batch normalization needs to run backward.
#[derive(Debug, Clone)]
pub struct NormCache<E> {
    xhat: Tensor<E>,
    inv_std: Vec<E>,
}

/// Per-channel statistics of one training batch (variance unbiased).
#[derive(Debug, Clone)]
pub struct BatchStats<E> {
    pub mean: Vec<E>,
    pub var: Vec<E>,
}

/// Batch normalization over `(n, h, w)` using the statistics of this batch.
pub fn batch_norm_train<E: Elem>(
    x: &Tensor<E>,
    gamma: &[E],
    beta: &[E],
    eps: E,
) -> (Tensor<E>, NormCache<E>, BatchStats<E>) {
    let [n, c, h, w] = x.shape();
    let hw = h * w;
    let m = n * hw;
    let mf = E::from_usize(m).unwrap();
    let mut mean = vec![E::zero(); c];
    let mut var = vec![E::zero(); c];
    for b in 0..n {
        let item = x.item(b);
        for ch in 0..c {
            mean[ch] += item[ch * hw..(ch + 1) * hw].iter().copied().sum();
        }
    }
    for v in &mut mean {
        *v = *v / mf;
    }
    for b in 0..n {
        let item = x.item(b);
        for ch in 0..c {
            let mu = mean[ch];
            var[ch] += item[ch * hw..(ch + 1) * hw]
                .iter()
                .map(|v| (*v - mu) * (*v - mu))
                .sum();
        }
    }
    let biased: Vec<E> = var.iter().map(|v| *v / mf).collect();
    let inv_std: Vec<E> = biased.iter().map(|v| E::one() / (*v + eps).sqrt()).collect();
    let mut xhat = Tensor::zeros(x.shape());
    let mut y = Tensor::zeros(x.shape());
    for b in 0..n {
        let src = x.item(b);
        let xh = xhat.item_mut(b);
        for ch in 0..c {
            for i in ch * hw..(ch + 1) * hw {
                xh[i] = (src[i] - mean[ch]) * inv_std[ch];
            }
        }
        let xh = xhat.item(b).to_vec();
        let dst = y.item_mut(b);
        for ch in 0..c {
            for i in ch * hw..(ch + 1) * hw {
                dst[i] = gamma[ch] * xh[i] + beta[ch];
            }
        }
    }
    let unbiased = if m > 1 {
        let d = E::from_usize(m - 1).unwrap();
        var.iter().map(|v| *v / d).collect()
    } else {
        biased
    };
    (
        y,
        NormCache { xhat, inv_std },
        BatchStats {
            mean,
            var: unbiased,
        },
    )
}

/// Batch normalization with stored statistics.
pub fn batch_norm_eval<E: Elem>(x: &Tensor<E>, gamma: &[E], beta: &[E], mean: &[E], var: &[E], eps: E) -> Tensor<E> {
    let [n, c, h, w] = x.shape();
    let hw = h * w;
    let mut y = x.clone();
    for b in 0..n {
        let item = y.item_mut(b);
        for ch in 0..c {
            let scale = gamma[ch] / (var[ch] + eps).sqrt();
            let shift = beta[ch] - mean[ch] * scale;
            for v in &mut item[ch * hw..(ch + 1) * hw] {
                *v = *v * scale + shift;
            }
        }
    }
    y
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn batch_norm_backward<E: Elem>(dy: &Tensor<E>, cache: &NormCache<E>, gamma: &[E]) -> (Tensor<E>, Vec<E>, Vec<E>) {
    let [n, c, h, w] = dy.shape();
    let hw = h * w;
    let mf = E::from_usize(n * hw).unwrap();
    let mut dgamma = vec![E::zero(); c];
    let mut dbeta = vec![E::zero(); c];
    for b in 0..n {
        let d = dy.item(b);
        let xh = cache.xhat.item(b);
        for ch in 0..c {
            for i in ch * hw..(ch + 1) * hw {
                dgamma[ch] += d[i] * xh[i];
                dbeta[ch] += d[i];
            }
        }
    }
    let mut dx = Tensor::zeros(dy.shape());
    for b in 0..n {
        let d = dy.item(b);
        let xh = cache.xhat.item(b);
        let out = dx.item_mut(b);
        for ch in 0..c {
            let k = gamma[ch] * cache.inv_std[ch] / mf;
            for i in ch * hw..(ch + 1) * hw {
                out[i] = k * (mf * d[i] - dbeta[ch] - xh[i] * dgamma[ch]);
            }
        }
    }
    (dx, dgamma, dbeta)
}

pub fn relu_inplace<E: Elem>(x: &mut Tensor<E>) {
    for v in x.data_mut() {
        if *v < E::zero() {
            *v = E::zero();
        }
    }
}

/// Masks `dy` by the positive support of the relu output `y`.
pub fn relu_backward_inplace<E: Elem>(dy: &mut Tensor<E>, y: &Tensor<E>) {
    for (d, v) in dy.data_mut().iter_mut().zip(y.data()) {
        if *v <= E::zero() {
            *d = E::zero();
        }
    }
}

/// Max pooling with implicit `-inf` padding. Returns the output and the flat
/// input index of every selected element.
pub fn max_pool2d<E: Elem>(x: &Tensor<E>, k: usize, g: ConvGeom) -> (Tensor<E>, Vec<u32>) {
    let [n, c, h, w] = x.shape();
    let ho = g.out_len(h, k);
    let wo = g.out_len(w, k);
    let mut y = Tensor::zeros([n, c, ho, wo]);
    let mut arg = vec![0u32; n * c * ho * wo];
    let mut o = 0;
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * h * w;
            let plane = &x.data()[base..base + h * w];
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = E::neg_infinity();
                    let mut best_i = 0usize;
                    for ky in 0..k {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let idx = iy as usize * w + ix as usize;
                            if plane[idx] > best {
                                best = plane[idx];
                                best_i = idx;
                            }
                        }
                    }
                    y.data_mut()[o] = best;
                    arg[o] = (base + best_i) as u32;
                    o += 1;
                }
            }
        }
    }
    (y, arg)
}

/// Scatters pooled gradients back to the argmax positions.
pub fn max_pool_backward<E: Elem>(dy: &Tensor<E>, arg: &[u32], in_shape: [usize; 4]) -> Tensor<E> {
    let mut dx = Tensor::zeros(in_shape);
    for (d, &i) in dy.data().iter().zip(arg) {
        dx.data_mut()[i as usize] += *d;
    }
    dx
}

/// Spatial maximum per channel, `[n, c, h, w] -> [n, c, 1, 1]`.
pub fn global_max_pool<E: Elem>(x: &Tensor<E>) -> (Tensor<E>, Vec<u32>) {
    let [n, c, h, w] = x.shape();
    let hw = h * w;
    let mut y = Tensor::zeros([n, c, 1, 1]);
    let mut arg = Vec::with_capacity(n * c);
    for (p, plane) in x.data().chunks(hw).enumerate() {
        let (mut bi, mut bv) = (0, plane[0]);
        for (i, v) in plane.iter().enumerate().skip(1) {
            if *v > bv {
                bv = *v;
                bi = i;
            }
        }
        y.data_mut()[p] = bv;
        arg.push((p * hw + bi) as u32);
    }
    (y, arg)
}

/// Scales every spatial position to unit L2 norm over channels.
/// Returns the normalized tensor and the per-position norms.
pub fn l2_normalize_channels<E: Elem>(x: &Tensor<E>, eps: E) -> (Tensor<E>, Vec<E>) {
    let [n, c, h, w] = x.shape();
    let hw = h * w;
    let mut norms = vec![E::zero(); n * hw];
    let mut y = x.clone();
    for b in 0..n {
        let item = y.item_mut(b);
        let nb = &mut norms[b * hw..(b + 1) * hw];
        for ch in 0..c {
            for (p, nv) in nb.iter_mut().enumerate() {
                let v = item[ch * hw + p];
                *nv += v * v;
            }
        }
        for nv in nb.iter_mut() {
            *nv = (*nv + eps).sqrt();
        }
        for ch in 0..c {
            for (p, nv) in nb.iter().enumerate() {
                item[ch * hw + p] = item[ch * hw + p] / *nv;
            }
        }
    }
    (y, norms)
}

pub fn l2_normalize_backward<E: Elem>(dy: &Tensor<E>, y: &Tensor<E>, norms: &[E]) -> Tensor<E> {
    let [n, c, h, w] = dy.shape();
    let hw = h * w;
    let mut dx = Tensor::zeros(dy.shape());
    for b in 0..n {
        let d = dy.item(b);
        let yb = y.item(b);
        let mut dots = vec![E::zero(); hw];
        for ch in 0..c {
            for (p, dot) in dots.iter_mut().enumerate() {
                *dot += d[ch * hw + p] * yb[ch * hw + p];
            }
        }
        let out = dx.item_mut(b);
        for ch in 0..c {
            for p in 0..hw {
                let i = ch * hw + p;
                out[i] = (d[i] - yb[i] * dots[p]) / norms[b * hw + p];
            }
        }
    }
    dx
}

/// Broadcasts `v: [n, cv, 1, 1]` over the spatial grid of `f` and
/// concatenates along channels with `v` first.
pub fn concat_broadcast<E: Elem>(v: &Tensor<E>, f: &Tensor<E>) -> Tensor<E> {
    let [n, cv, _, _] = v.shape();
    let [nf, cf, h, w] = f.shape();
    assert_eq!(n, nf, "concat_broadcast batch mismatch");
    let hw = h * w;
    let mut out = Tensor::zeros([n, cv + cf, h, w]);
    for b in 0..n {
        let vb = v.item(b).to_vec();
        let fb = f.item(b);
        let dst = out.item_mut(b);
        for (ch, val) in vb.iter().enumerate() {
            dst[ch * hw..(ch + 1) * hw].fill(*val);
        }
        dst[cv * hw..].copy_from_slice(fb);
    }
    out
}

/// Splits the concatenated gradient into `(dv, df)`.
pub fn concat_broadcast_backward<E: Elem>(d: &Tensor<E>, cv: usize) -> (Tensor<E>, Tensor<E>) {
    let [n, c, h, w] = d.shape();
    let hw = h * w;
    let mut dv = Tensor::zeros([n, cv, 1, 1]);
    let mut df = Tensor::zeros([n, c - cv, h, w]);
    for b in 0..n {
        let src = d.item(b);
        for ch in 0..cv {
            dv.item_mut(b)[ch] = src[ch * hw..(ch + 1) * hw].iter().copied().sum();
        }
        df.item_mut(b).copy_from_slice(&src[cv * hw..]);
    }
    (dv, df)
}
