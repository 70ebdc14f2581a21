//! Forward/backward primitives on flat channel-major (`C x H x W`) buffers.

use super::Real;

/// Shape of a channel-major activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(c: usize, h: usize, w: usize) -> Self {
        Shape { c, h, w }
    }

    pub const fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Valid output columns for tap `kx` of a zero-padded 3x3 ("same") filter.
#[inline]
fn col_range(w: usize, k: usize, kx: usize) -> (usize, usize) {
    let pad = k / 2;
    let lo = pad.saturating_sub(kx);
    let hi = (w + pad).saturating_sub(kx).min(w);
    (lo, hi)
}

/// Zero-padded "same" convolution (cross-correlation, as in every CNN
/// framework). `weight` is `[out_c][in_c][k][k]`.
pub fn conv_forward<T: Real>(
    input: &[T],
    shape: Shape,
    weight: &[T],
    bias: &[T],
    out_c: usize,
    k: usize,
) -> Vec<T> {
    let Shape { c: in_c, h, w } = shape;
    let pad = k / 2;
    let plane = h * w;
    let mut out = vec![T::zero(); out_c * plane];
    for oc in 0..out_c {
        let dst = &mut out[oc * plane..(oc + 1) * plane];
        dst.iter_mut().for_each(|v| *v = bias[oc]);
        for ic in 0..in_c {
            let src = &input[ic * plane..(ic + 1) * plane];
            for ky in 0..k {
                let ylo = pad.saturating_sub(ky);
                let yhi = (h + pad).saturating_sub(ky).min(h);
                for kx in 0..k {
                    let wv = weight[((oc * in_c + ic) * k + ky) * k + kx];
                    let (xlo, xhi) = col_range(w, k, kx);
                    for y in ylo..yhi {
                        let sy = y + ky - pad;
                        let drow = &mut dst[y * w + xlo..y * w + xhi];
                        let srow = &src[sy * w + xlo + kx - pad..sy * w + xhi + kx - pad];
                        for (d, s) in drow.iter_mut().zip(srow) {
                            *d += wv * *s;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradient of [`conv_forward`] w.r.t. its input; optionally accumulates the
/// weight and bias gradients.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward<T: Real>(
    input: &[T],
    shape: Shape,
    weight: &[T],
    out_c: usize,
    k: usize,
    grad_out: &[T],
    mut param_grads: Option<(&mut [T], &mut [T])>,
    need_input_grad: bool,
) -> Vec<T> {
    let Shape { c: in_c, h, w } = shape;
    let pad = k / 2;
    let plane = h * w;
    let mut grad_in = if need_input_grad {
        vec![T::zero(); in_c * plane]
    } else {
        Vec::new()
    };
    for oc in 0..out_c {
        let g = &grad_out[oc * plane..(oc + 1) * plane];
        if let Some((_, gb)) = param_grads.as_mut() {
            gb[oc] += g.iter().copied().sum::<T>();
        }
        for ic in 0..in_c {
            let src = &input[ic * plane..(ic + 1) * plane];
            for ky in 0..k {
                let ylo = pad.saturating_sub(ky);
                let yhi = (h + pad).saturating_sub(ky).min(h);
                for kx in 0..k {
                    let widx = ((oc * in_c + ic) * k + ky) * k + kx;
                    let wv = weight[widx];
                    let (xlo, xhi) = col_range(w, k, kx);
                    let mut acc = T::zero();
                    for y in ylo..yhi {
                        let sy = y + ky - pad;
                        let grow = &g[y * w + xlo..y * w + xhi];
                        let soff = sy * w + xlo + kx - pad;
                        let srow = &src[soff..soff + (xhi - xlo)];
                        if param_grads.is_some() {
                            for (a, b) in grow.iter().zip(srow) {
                                acc += *a * *b;
                            }
                        }
                        if need_input_grad {
                            let irow = &mut grad_in[ic * plane + soff..ic * plane + soff + (xhi - xlo)];
                            for (d, a) in irow.iter_mut().zip(grow) {
                                *d += wv * *a;
                            }
                        }
                    }
                    if let Some((gw, _)) = param_grads.as_mut() {
                        gw[widx] += acc;
                    }
                }
            }
        }
    }
    grad_in
}

pub fn relu_forward<T: Real>(input: &[T]) -> Vec<T> {
    input.iter().map(|v| v.max(T::zero())).collect()
}

/// Passes gradient where the pre-activation was strictly positive.
pub fn relu_backward<T: Real>(pre: &[T], grad_out: &[T]) -> Vec<T> {
    pre.iter()
        .zip(grad_out)
        .map(|(p, g)| if *p > T::zero() { *g } else { T::zero() })
        .collect()
}

/// 2x2 stride-2 max pooling. Returns the pooled map and, per output, the flat
/// input index of the (first) maximum.
pub fn maxpool_forward<T: Real>(input: &[T], shape: Shape) -> (Vec<T>, Vec<u32>) {
    let Shape { c, h, w } = shape;
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut idx = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let base = ch * h * w;
                let cands = [
                    base + 2 * y * w + 2 * x,
                    base + 2 * y * w + 2 * x + 1,
                    base + (2 * y + 1) * w + 2 * x,
                    base + (2 * y + 1) * w + 2 * x + 1,
                ];
                let mut best = cands[0];
                for &i in &cands[1..] {
                    if input[i] > input[best] {
                        best = i;
                    }
                }
                out.push(input[best]);
                idx.push(best as u32);
            }
        }
    }
    (out, idx)
}

pub fn maxpool_backward<T: Real>(argmax: &[u32], grad_out: &[T], in_len: usize) -> Vec<T> {
    let mut g = vec![T::zero(); in_len];
    for (i, go) in argmax.iter().zip(grad_out) {
        g[*i as usize] += *go;
    }
    g
}

/// `weight` is `[out][in]`.
pub fn dense_forward<T: Real>(input: &[T], weight: &[T], bias: &[T], out: usize) -> Vec<T> {
    let n = input.len();
    (0..out)
        .map(|o| {
            let row = &weight[o * n..(o + 1) * n];
            bias[o] + row.iter().zip(input).map(|(a, b)| *a * *b).sum::<T>()
        })
        .collect()
}

pub fn dense_backward<T: Real>(
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    param_grads: Option<(&mut [T], &mut [T])>,
) -> Vec<T> {
    let n = input.len();
    let mut gin = vec![T::zero(); n];
    for (o, go) in grad_out.iter().enumerate() {
        let row = &weight[o * n..(o + 1) * n];
        for (d, wv) in gin.iter_mut().zip(row) {
            *d += *wv * *go;
        }
    }
    if let Some((gw, gb)) = param_grads {
        for (o, go) in grad_out.iter().enumerate() {
            gb[o] += *go;
            for (d, x) in gw[o * n..(o + 1) * n].iter_mut().zip(input) {
                *d += *go * *x;
            }
        }
    }
    gin
}

/// Nearest-neighbour x2 upsampling.
pub fn upsample2<T: Real>(input: &[T], shape: Shape) -> Vec<T> {
    let Shape { c, h, w } = shape;
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); c * oh * ow];
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                out[(ch * oh + y) * ow + x] = input[(ch * h + y / 2) * w + x / 2];
            }
        }
    }
    out
}
