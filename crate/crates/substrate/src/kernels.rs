//! Slice-level forward and backward kernels used by the tape.

use crate::Float;

/// Output extent of a 3x3, padding-1 convolution.
pub fn conv_out(extent: usize, stride: usize) -> usize {
    (extent - 1) / stride + 1
}

/// Output columns `ox` whose tap `kx` lands inside a row of width `w`.
fn valid_range(k: usize, extent: usize, out: usize, stride: usize) -> std::ops::Range<usize> {
    let lo = usize::from(k == 0);
    let hi = if extent + 1 > k {
        ((extent + 1 - k - 1) / stride + 1).min(out)
    } else {
        0
    };
    lo..hi.max(lo)
}

/// Lay out every 3x3 input patch as a column: `[ci*9 + ky*3 + kx, oy*wo + ox]`.
pub fn im2col<T: Float>(x: &[T], c: usize, h: usize, w: usize, stride: usize) -> Vec<T> {
    let (ho, wo) = (conv_out(h, stride), conv_out(w, stride));
    let p = ho * wo;
    let mut cols = vec![T::zero(); c * 9 * p];
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..3 {
            let rows = valid_range(ky, h, ho, stride);
            for kx in 0..3 {
                let xs = valid_range(kx, w, wo, stride);
                let row = &mut cols[((ci * 9) + ky * 3 + kx) * p..][..p];
                for oy in rows.clone() {
                    let src = &plane[(oy * stride + ky - 1) * w..][..w];
                    let dst = &mut row[oy * wo..][..wo];
                    if stride == 1 {
                        let off = kx as isize - 1;
                        let s0 = (xs.start as isize + off) as usize;
                        dst[xs.clone()].copy_from_slice(&src[s0..s0 + xs.len()]);
                    } else {
                        for ox in xs.clone() {
                            dst[ox] = src[ox * stride + kx - 1];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add columns back into an image.
pub fn col2im<T: Float>(cols: &[T], c: usize, h: usize, w: usize, stride: usize, out: &mut [T]) {
    let (ho, wo) = (conv_out(h, stride), conv_out(w, stride));
    let p = ho * wo;
    for ci in 0..c {
        let plane = &mut out[ci * h * w..(ci + 1) * h * w];
        for ky in 0..3 {
            let rows = valid_range(ky, h, ho, stride);
            for kx in 0..3 {
                let xs = valid_range(kx, w, wo, stride);
                let row = &cols[((ci * 9) + ky * 3 + kx) * p..][..p];
                for oy in rows.clone() {
                    let dst = &mut plane[(oy * stride + ky - 1) * w..][..w];
                    let src = &row[oy * wo..][..wo];
                    for ox in xs.clone() {
                        dst[ox * stride + kx - 1] += src[ox];
                    }
                }
            }
        }
    }
}

/// Statistics of one normalization group.
struct Moments<T> {
    mean: T,
    inv_std: T,
}

fn moments<T: Float>(xs: &[T], eps: T) -> Moments<T> {
    let n = T::from_f64(xs.len() as f64);
    let mean = xs.iter().copied().sum::<T>() / n;
    let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    Moments {
        mean,
        inv_std: T::one() / (var + eps).sqrt(),
    }
}

/// Normalize `x` of shape `[c, s]` over `groups` contiguous channel groups,
/// then apply a per-channel affine map.
pub fn group_norm<T: Float>(
    x: &[T],
    c: usize,
    s: usize,
    groups: usize,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> Vec<T> {
    let per = c / groups;
    let mut y = vec![T::zero(); x.len()];
    for g in 0..groups {
        let span = g * per * s..(g + 1) * per * s;
        let m = moments(&x[span.clone()], eps);
        for ch in g * per..(g + 1) * per {
            let (ga, be) = (gamma[ch], beta[ch]);
            for i in ch * s..(ch + 1) * s {
                y[i] = (x[i] - m.mean) * m.inv_std * ga + be;
            }
        }
    }
    y
}

/// Gradients of [`group_norm`] with respect to `(x, gamma, beta)`.
#[allow(clippy::too_many_arguments)]
pub fn group_norm_backward<T: Float>(
    x: &[T],
    dy: &[T],
    c: usize,
    s: usize,
    groups: usize,
    gamma: &[T],
    eps: T,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let per = c / groups;
    let mut dx = vec![T::zero(); x.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for g in 0..groups {
        let span = g * per * s..(g + 1) * per * s;
        let m = moments(&x[span.clone()], eps);
        let n = T::from_f64(span.len() as f64);
        let mut sum_dxhat = T::zero();
        let mut sum_dxhat_xhat = T::zero();
        for ch in g * per..(g + 1) * per {
            for i in ch * s..(ch + 1) * s {
                let xhat = (x[i] - m.mean) * m.inv_std;
                dgamma[ch] += dy[i] * xhat;
                dbeta[ch] += dy[i];
                let dxhat = dy[i] * gamma[ch];
                sum_dxhat += dxhat;
                sum_dxhat_xhat += dxhat * xhat;
            }
        }
        for ch in g * per..(g + 1) * per {
            for i in ch * s..(ch + 1) * s {
                let xhat = (x[i] - m.mean) * m.inv_std;
                let dxhat = dy[i] * gamma[ch];
                dx[i] = m.inv_std / n * (n * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Row-wise layer normalization of `x` with shape `[n, d]`.
pub fn layer_norm<T: Float>(x: &[T], d: usize, gamma: &[T], beta: &[T], eps: T) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    for (row, out) in x.chunks(d).zip(y.chunks_mut(d)) {
        let m = moments(row, eps);
        for j in 0..d {
            out[j] = (row[j] - m.mean) * m.inv_std * gamma[j] + beta[j];
        }
    }
    y
}

pub fn layer_norm_backward<T: Float>(
    x: &[T],
    dy: &[T],
    d: usize,
    gamma: &[T],
    eps: T,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut dx = vec![T::zero(); x.len()];
    let mut dgamma = vec![T::zero(); d];
    let mut dbeta = vec![T::zero(); d];
    let n = T::from_f64(d as f64);
    for ((row, drow), dxrow) in x.chunks(d).zip(dy.chunks(d)).zip(dx.chunks_mut(d)) {
        let m = moments(row, eps);
        let mut sum_dxhat = T::zero();
        let mut sum_dxhat_xhat = T::zero();
        for j in 0..d {
            let xhat = (row[j] - m.mean) * m.inv_std;
            dgamma[j] += drow[j] * xhat;
            dbeta[j] += drow[j];
            let dxhat = drow[j] * gamma[j];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
        }
        for j in 0..d {
            let xhat = (row[j] - m.mean) * m.inv_std;
            let dxhat = drow[j] * gamma[j];
            dxrow[j] = m.inv_std / n * (n * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
        }
    }
    (dx, dgamma, dbeta)
}

#[inline]
pub fn sigmoid<T: Float>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

/// Row softmax over `[n, m]`. Columns with `mask[j] == false` get probability 0;
/// a row with every column masked is all zeros.
pub fn softmax_rows<T: Float>(x: &[T], m: usize, mask: Option<&[bool]>) -> Vec<T> {
    let keep = |j: usize| mask.is_none_or(|mk| mk[j]);
    let mut y = vec![T::zero(); x.len()];
    for (row, out) in x.chunks(m).zip(y.chunks_mut(m)) {
        let mut max = T::neg_infinity();
        for j in (0..m).filter(|&j| keep(j)) {
            max = max.max(row[j]);
        }
        if max == T::neg_infinity() {
            continue;
        }
        let mut total = T::zero();
        for j in (0..m).filter(|&j| keep(j)) {
            out[j] = (row[j] - max).exp();
            total += out[j];
        }
        for v in out.iter_mut() {
            *v = *v / total;
        }
    }
    y
}
