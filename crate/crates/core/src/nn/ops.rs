//! Layer kernels. All tensors are NCHW (or NF for dense), row-major.
//!
//! Backward kernels accumulate into the gradient buffers they are handed;
//! callers zero them first.

use crate::tensor::{Element, Tensor};

#[inline]
pub(crate) fn dims4<T: Element>(t: &Tensor<T>) -> [usize; 4] {
    let s = t.shape();
    [s[0], s[1], s[2], s[3]]
}

/// Output extent of a convolution along one axis.
pub fn conv_out_size(size: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Range of output columns `ox` whose input column `ox*1 + kx - pad` lies in `[0, w)`.
#[inline]
fn valid_cols(ow: usize, w: usize, kx: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kx).min(ow);
    let hi = (w + pad).saturating_sub(kx).min(ow);
    (lo, hi.max(lo))
}

pub fn conv2d_forward<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let [n, c, h, w] = dims4(input);
    let [o, _, k, _] = dims4(weight);
    let oh = conv_out_size(h, k, stride, pad).expect("validated at build time");
    let ow = conv_out_size(w, k, stride, pad).expect("validated at build time");
    let x = input.data();
    let wt = weight.data();
    let mut out = vec![T::zero(); n * o * oh * ow];

    for b in 0..n {
        let xb = &x[b * c * h * w..(b + 1) * c * h * w];
        for oc in 0..o {
            let base = (b * o + oc) * oh * ow;
            let plane = &mut out[base..base + oh * ow];
            plane.fill(bias.data()[oc]);
            for ic in 0..c {
                let xin = &xb[ic * h * w..(ic + 1) * h * w];
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = wt[((oc * c + ic) * k + ky) * k + kx];
                        if stride == 1 {
                            let (lo, hi) = valid_cols(ow, w, kx, pad);
                            if lo >= hi {
                                continue;
                            }
                            for oy in 0..oh {
                                let iy = oy as isize + ky as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let ix0 = lo + kx - pad;
                                let orow = &mut plane[oy * ow + lo..oy * ow + hi];
                                let irow = &xin[iy as usize * w + ix0..iy as usize * w + ix0 + (hi - lo)];
                                for (acc, &v) in orow.iter_mut().zip(irow) {
                                    *acc += wv * v;
                                }
                            }
                        } else {
                            for oy in 0..oh {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for ox in 0..ow {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    plane[oy * ow + ox] += wv * xin[iy as usize * w + ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[n, o, oh, ow], out).expect("conv output shape")
}

/// Accumulates input, weight and bias gradients of a convolution.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    pad: usize,
    grad_in: &mut [T],
    grad_w: &mut [T],
    grad_b: &mut [T],
) {
    let [n, c, h, w] = dims4(input);
    let [o, _, k, _] = dims4(weight);
    let [_, _, oh, ow] = dims4(grad_out);
    let x = input.data();
    let wt = weight.data();
    let go = grad_out.data();

    for b in 0..n {
        let xb = &x[b * c * h * w..(b + 1) * c * h * w];
        let gib = &mut grad_in[b * c * h * w..(b + 1) * c * h * w];
        #[allow(clippy::needless_range_loop)]
        for oc in 0..o {
            let base = (b * o + oc) * oh * ow;
            let gplane = &go[base..base + oh * ow];
            grad_b[oc] += gplane.iter().copied().sum::<T>();
            for ic in 0..c {
                let xin = &xb[ic * h * w..(ic + 1) * h * w];
                let gin = &mut gib[ic * h * w..(ic + 1) * h * w];
                for ky in 0..k {
                    for kx in 0..k {
                        let widx = ((oc * c + ic) * k + ky) * k + kx;
                        let wv = wt[widx];
                        let mut dw = T::zero();
                        if stride == 1 {
                            let (lo, hi) = valid_cols(ow, w, kx, pad);
                            if lo >= hi {
                                continue;
                            }
                            for oy in 0..oh {
                                let iy = oy as isize + ky as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let ix0 = lo + kx - pad;
                                let span = hi - lo;
                                let grow = &gplane[oy * ow + lo..oy * ow + hi];
                                let irow = &xin[iy as usize * w + ix0..iy as usize * w + ix0 + span];
                                let girow = &mut gin[iy as usize * w + ix0..iy as usize * w + ix0 + span];
                                let mut partial = T::zero();
                                for ((&g, &v), gi) in grow.iter().zip(irow).zip(girow.iter_mut()) {
                                    partial += g * v;
                                    *gi += wv * g;
                                }
                                dw += partial;
                            }
                        } else {
                            for oy in 0..oh {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for ox in 0..ow {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    let g = gplane[oy * ow + ox];
                                    let at = iy as usize * w + ix as usize;
                                    dw += g * xin[at];
                                    gin[at] += wv * g;
                                }
                            }
                        }
                        grad_w[widx] += dw;
                    }
                }
            }
        }
    }
}

pub fn dense_forward<T: Element>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Tensor<T> {
    let (n, i) = (input.shape()[0], input.shape()[1]);
    let o = weight.shape()[0];
    let mut out = Vec::with_capacity(n * o);
    for b in 0..n {
        let x = &input.data()[b * i..(b + 1) * i];
        for r in 0..o {
            let row = &weight.data()[r * i..(r + 1) * i];
            let dot: T = row.iter().zip(x).map(|(&a, &v)| a * v).sum();
            out.push(bias.data()[r] + dot);
        }
    }
    Tensor::from_vec(&[n, o], out).expect("dense output shape")
}

pub fn dense_backward<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    grad_in: &mut [T],
    grad_w: &mut [T],
    grad_b: &mut [T],
) {
    let (n, i) = (input.shape()[0], input.shape()[1]);
    let o = weight.shape()[0];
    for b in 0..n {
        let x = &input.data()[b * i..(b + 1) * i];
        let gx = &mut grad_in[b * i..(b + 1) * i];
        for r in 0..o {
            let g = grad_out.data()[b * o + r];
            grad_b[r] += g;
            let row = &weight.data()[r * i..(r + 1) * i];
            let grow = &mut grad_w[r * i..(r + 1) * i];
            for j in 0..i {
                grow[j] += g * x[j];
                gx[j] += g * row[j];
            }
        }
    }
}

/// 2x2 max pooling with stride 2. Ties resolve to the first element in
/// row-major window order.
pub fn max_pool2_forward<T: Element>(input: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = dims4(input);
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let xp = &x[plane * h * w..(plane + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let (_, v) = pool_argmax(xp, w, oy, ox);
                out.push(v);
            }
        }
    }
    Tensor::from_vec(&[n, c, oh, ow], out).expect("pool output shape")
}

#[inline]
fn pool_argmax<T: Element>(plane: &[T], w: usize, oy: usize, ox: usize) -> (usize, T) {
    let mut best = (2 * oy) * w + 2 * ox;
    let mut val = plane[best];
    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
        let at = (2 * oy + dy) * w + 2 * ox + dx;
        if plane[at] > val {
            best = at;
            val = plane[at];
        }
    }
    (best, val)
}

pub fn max_pool2_backward<T: Element>(input: &Tensor<T>, grad_out: &Tensor<T>, grad_in: &mut [T]) {
    let [n, c, h, w] = dims4(input);
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let go = grad_out.data();
    for plane in 0..n * c {
        let xp = &x[plane * h * w..(plane + 1) * h * w];
        let gp = &mut grad_in[plane * h * w..(plane + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let (at, _) = pool_argmax(xp, w, oy, ox);
                gp[at] += go[plane * oh * ow + oy * ow + ox];
            }
        }
    }
}

/// Nearest-neighbour upsampling by a factor of two.
pub fn upsample2_forward<T: Element>(input: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = dims4(input);
    let (oh, ow) = (2 * h, 2 * w);
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let xp = &x[plane * h * w..(plane + 1) * h * w];
        for oy in 0..oh {
            let row = &xp[(oy / 2) * w..(oy / 2 + 1) * w];
            for &v in row {
                out.push(v);
                out.push(v);
            }
        }
    }
    Tensor::from_vec(&[n, c, oh, ow], out).expect("upsample output shape")
}

pub fn upsample2_backward<T: Element>(grad_out: &Tensor<T>, grad_in: &mut [T]) {
    let [n, c, oh, ow] = dims4(grad_out);
    let (h, w) = (oh / 2, ow / 2);
    let go = grad_out.data();
    for plane in 0..n * c {
        let gp = &go[plane * oh * ow..(plane + 1) * oh * ow];
        let gi = &mut grad_in[plane * h * w..(plane + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                gi[(oy / 2) * w + ox / 2] += gp[oy * ow + ox];
            }
        }
    }
}

pub fn global_avg_pool_forward<T: Element>(input: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = dims4(input);
    let scale = T::from_f64(1.0 / (h * w) as f64);
    let out = input
        .data()
        .chunks(h * w)
        .map(|plane| plane.iter().copied().sum::<T>() * scale)
        .collect();
    Tensor::from_vec(&[n, c], out).expect("gap output shape")
}

pub fn global_avg_pool_backward<T: Element>(input_shape: &[usize], grad_out: &Tensor<T>, grad_in: &mut [T]) {
    let hw = input_shape[2] * input_shape[3];
    let scale = T::from_f64(1.0 / hw as f64);
    for (plane, &g) in grad_in.chunks_mut(hw).zip(grad_out.data()) {
        for v in plane {
            *v += g * scale;
        }
    }
}

/// Concatenates `b`'s channels after `a`'s.
pub fn concat_channels<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let [n, ca, h, w] = dims4(a);
    let cb = b.shape()[1];
    let mut out = Vec::with_capacity(n * (ca + cb) * h * w);
    for i in 0..n {
        out.extend_from_slice(a.item(i));
        out.extend_from_slice(b.item(i));
    }
    Tensor::from_vec(&[n, ca + cb, h, w], out).expect("concat output shape")
}

/// Splits a concatenated gradient back into its two sources, accumulating.
pub fn concat_channels_backward<T: Element>(
    grad_out: &Tensor<T>,
    channels_a: usize,
    grad_a: &mut [T],
    grad_b: &mut [T],
) {
    let [n, c, h, w] = dims4(grad_out);
    let (sa, sb) = (channels_a * h * w, (c - channels_a) * h * w);
    for i in 0..n {
        let g = grad_out.item(i);
        for (d, &s) in grad_a[i * sa..(i + 1) * sa].iter_mut().zip(&g[..sa]) {
            *d += s;
        }
        for (d, &s) in grad_b[i * sb..(i + 1) * sb].iter_mut().zip(&g[sa..]) {
            *d += s;
        }
    }
}
