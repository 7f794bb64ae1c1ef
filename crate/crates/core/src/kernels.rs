//! Forward and backward kernels on raw row-major buffers.
//!
//! Spatial tensors are laid out `[batch, channels, height, width]`. The
//! autodiff tape calls into these; nothing here records anything.

use crate::scalar::{gemm, Scalar};

/// Geometry of a stride-1 convolution over a batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (self.h + 2 * self.pad + 1 - self.k, self.w + 2 * self.pad + 1 - self.k)
    }

    fn patch(&self) -> usize {
        self.c_in * self.k * self.k
    }
}

/// Output columns `[lo, hi)` whose tap `kx` lands inside the input row.
#[inline]
fn valid_span(kx: usize, pad: usize, w: usize, wo: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kx).min(wo);
    let hi = (w + pad).saturating_sub(kx).min(wo).max(lo);
    (lo, hi)
}

/// Unfolds every item into columns: `cols[(c*k + ky)*k + kx][b*HW' + q]`.
fn im2col<T: Scalar>(g: &ConvGeom, input: &[T], cols: &mut [T]) {
    let (ho, wo) = g.out_hw();
    let plane = ho * wo;
    let ncols = g.batch * plane;
    debug_assert_eq!(cols.len(), g.patch() * ncols);
    for b in 0..g.batch {
        for c in 0..g.c_in {
            let src = &input[(b * g.c_in + c) * g.h * g.w..][..g.h * g.w];
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let row = (c * g.k + ky) * g.k + kx;
                    let dst = &mut cols[row * ncols + b * plane..][..plane];
                    let (lo, hi) = valid_span(kx, g.pad, g.w, wo);
                    for oy in 0..ho {
                        let out_row = &mut dst[oy * wo..(oy + 1) * wo];
                        let iy = (oy + ky).wrapping_sub(g.pad);
                        if iy >= g.h {
                            out_row.fill(T::zero());
                            continue;
                        }
                        out_row[..lo].fill(T::zero());
                        out_row[hi..].fill(T::zero());
                        let start = iy * g.w + lo + kx - g.pad;
                        out_row[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
fn col2im<T: Scalar>(g: &ConvGeom, cols: &[T], grad_in: &mut [T]) {
    let (ho, wo) = g.out_hw();
    let plane = ho * wo;
    let ncols = g.batch * plane;
    for b in 0..g.batch {
        for c in 0..g.c_in {
            let dst = &mut grad_in[(b * g.c_in + c) * g.h * g.w..][..g.h * g.w];
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let row = (c * g.k + ky) * g.k + kx;
                    let src = &cols[row * ncols + b * plane..][..plane];
                    let (lo, hi) = valid_span(kx, g.pad, g.w, wo);
                    for oy in 0..ho {
                        let iy = (oy + ky).wrapping_sub(g.pad);
                        if iy >= g.h {
                            continue;
                        }
                        let start = iy * g.w + lo + kx - g.pad;
                        let d = &mut dst[start..start + (hi - lo)];
                        for (o, &v) in d.iter_mut().zip(&src[oy * wo + lo..oy * wo + hi]) {
                            *o += v;
                        }
                    }
                }
            }
        }
    }
}

/// Batched convolution (cross-correlation) as a single matrix product over
/// all items stacked along the column axis.
pub fn conv2d_forward<T: Scalar>(g: &ConvGeom, input: &[T], weight: &[T], bias: &[T]) -> Vec<T> {
    let (ho, wo) = g.out_hw();
    let plane = ho * wo;
    let ncols = g.batch * plane;
    let mut cols = vec![T::zero(); g.patch() * ncols];
    im2col(g, input, &mut cols);
    let mut prod = vec![T::zero(); g.c_out * ncols];
    gemm(g.c_out, g.patch(), ncols, weight, false, &cols, false, &mut prod, false);
    let mut out = vec![T::zero(); g.batch * g.c_out * plane];
    for co in 0..g.c_out {
        let bval = bias[co];
        for b in 0..g.batch {
            let src = &prod[co * ncols + b * plane..][..plane];
            let dst = &mut out[(b * g.c_out + co) * plane..][..plane];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = s + bval;
            }
        }
    }
    out
}

/// Accumulates parameter gradients and, when requested, the input gradient.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    grad_input: Option<&mut [T]>,
    grad_weight: Option<&mut [T]>,
    grad_bias: Option<&mut [T]>,
) {
    let (ho, wo) = g.out_hw();
    let plane = ho * wo;
    let ncols = g.batch * plane;
    let mut gmat = vec![T::zero(); g.c_out * ncols];
    for b in 0..g.batch {
        for co in 0..g.c_out {
            gmat[co * ncols + b * plane..][..plane].copy_from_slice(&grad_out[(b * g.c_out + co) * plane..][..plane]);
        }
    }
    if let Some(gb) = grad_bias {
        for co in 0..g.c_out {
            gb[co] += gmat[co * ncols..(co + 1) * ncols].iter().copied().sum();
        }
    }
    if let Some(gw) = grad_weight {
        let mut cols = vec![T::zero(); g.patch() * ncols];
        im2col(g, input, &mut cols);
        gemm(g.c_out, ncols, g.patch(), &gmat, false, &cols, true, gw, true);
    }
    if let Some(gi) = grad_input {
        let mut dcols = vec![T::zero(); g.patch() * ncols];
        gemm(g.patch(), g.c_out, ncols, weight, true, &gmat, false, &mut dcols, false);
        col2im(g, &dcols, gi);
    }
}

/// Per-axis source indices and weights for bilinear resampling with the
/// half-pixel (align-corners = false) convention.
fn axis_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = if i0 < n_in - 1 { i0 + 1 } else { i0 };
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub fn bilinear_forward<T: Scalar>(
    input: &[T],
    planes: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<T> {
    let ty = axis_taps(h, oh);
    let tx = axis_taps(w, ow);
    let mut out = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        let src = &input[p * h * w..][..h * w];
        let dst = &mut out[p * oh * ow..][..oh * ow];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            let (ly1, ly0) = (T::lit(ly), T::lit(1.0 - ly));
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let (lx1, lx0) = (T::lit(lx), T::lit(1.0 - lx));
                let top = src[y0 * w + x0] * lx0 + src[y0 * w + x1] * lx1;
                let bot = src[y1 * w + x0] * lx0 + src[y1 * w + x1] * lx1;
                dst[oy * ow + ox] = top * ly0 + bot * ly1;
            }
        }
    }
    out
}

pub fn bilinear_backward<T: Scalar>(
    grad_out: &[T],
    planes: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
    grad_in: &mut [T],
) {
    let ty = axis_taps(h, oh);
    let tx = axis_taps(w, ow);
    for p in 0..planes {
        let src = &grad_out[p * oh * ow..][..oh * ow];
        let dst = &mut grad_in[p * h * w..][..h * w];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            let (ly1, ly0) = (T::lit(ly), T::lit(1.0 - ly));
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let (lx1, lx0) = (T::lit(lx), T::lit(1.0 - lx));
                let gv = src[oy * ow + ox];
                dst[y0 * w + x0] += gv * ly0 * lx0;
                dst[y0 * w + x1] += gv * ly0 * lx1;
                dst[y1 * w + x0] += gv * ly1 * lx0;
                dst[y1 * w + x1] += gv * ly1 * lx1;
            }
        }
    }
}

#[inline]
pub fn leaky_relu<T: Scalar>(x: T, slope: T) -> T {
    if x > T::zero() {
        x
    } else {
        x * slope
    }
}

/// Derivative of [`leaky_relu`]; the subgradient at zero is `slope`.
#[inline]
pub fn leaky_relu_grad<T: Scalar>(x: T, slope: T) -> T {
    if x > T::zero() {
        T::one()
    } else {
        slope
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Order in which the per-element mean over the batch axis is summed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Reduction {
    /// Sequential sum in input order.
    InputOrder,
    /// Each element's values are sorted and summed pairwise as offsets from
    /// their minimum: independent of batch order bit for bit, and exact when
    /// all entries agree.
    #[default]
    Sorted,
}

fn pairwise_sum<T: Scalar>(v: &[T]) -> T {
    match v.len() {
        0 => T::zero(),
        1 => v[0],
        2 => v[0] + v[1],
        n => {
            let mid = n / 2;
            pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
        }
    }
}

/// Mean over the leading axis of a `[n, rest..]` buffer.
pub fn mean_over_batch<T: Scalar>(input: &[T], n: usize, mode: Reduction) -> Vec<T> {
    let stride = input.len() / n;
    let inv = T::one() / T::from_usize(n).unwrap();
    let mut out = vec![T::zero(); stride];
    match mode {
        Reduction::InputOrder => {
            for i in 0..n {
                for (o, &v) in out.iter_mut().zip(&input[i * stride..(i + 1) * stride]) {
                    *o += v;
                }
            }
            out.iter_mut().for_each(|o| *o *= inv);
        }
        Reduction::Sorted => {
            let mut buf = vec![T::zero(); n];
            for (e, o) in out.iter_mut().enumerate() {
                for (i, b) in buf.iter_mut().enumerate() {
                    *b = input[i * stride + e];
                }
                buf.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
                // Offsets from the minimum, so equal entries average to exactly themselves.
                let lo = buf[0];
                buf.iter_mut().for_each(|b| *b -= lo);
                *o = lo + pairwise_sum(&buf) * inv;
            }
        }
    }
    out
}

/// Straightforward nested-loop convolution of a single item, used as an
/// independent oracle for [`conv2d_forward`].
pub fn conv2d_naive<T: Scalar>(g: &ConvGeom, input: &[T], weight: &[T], bias: &[T]) -> Vec<T> {
    let (ho, wo) = g.out_hw();
    let mut out = vec![T::zero(); g.batch * g.c_out * ho * wo];
    for b in 0..g.batch {
        for co in 0..g.c_out {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias[co];
                    for ci in 0..g.c_in {
                        for ky in 0..g.k {
                            for kx in 0..g.k {
                                let iy = oy as isize + ky as isize - g.pad as isize;
                                let ix = ox as isize + kx as isize - g.pad as isize;
                                if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                    continue;
                                }
                                let x = input[((b * g.c_in + ci) * g.h + iy as usize) * g.w + ix as usize];
                                let wv = weight[((co * g.c_in + ci) * g.k + ky) * g.k + kx];
                                acc += x * wv;
                            }
                        }
                    }
                    out[((b * g.c_out + co) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn im2col_conv_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(batch, c_in, h, w, c_out, k, pad) in &[
            (1, 1, 4, 4, 1, 3, 1),
            (3, 2, 8, 8, 5, 3, 1),
            (2, 4, 8, 6, 3, 1, 0),
            (1, 3, 7, 7, 2, 3, 0),
            (2, 2, 5, 5, 2, 5, 2),
        ] {
            let g = ConvGeom { batch, c_in, h, w, c_out, k, pad };
            let x = rand_vec(&mut rng, batch * c_in * h * w);
            let wt = rand_vec(&mut rng, c_out * c_in * k * k);
            let b = rand_vec(&mut rng, c_out);
            let fast = conv2d_forward(&g, &x, &wt, &b);
            let slow = conv2d_naive(&g, &x, &wt, &b);
            let err = fast.iter().zip(&slow).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-12, "{g:?}: {err}");
        }
    }

    #[test]
    fn downsample_by_two_is_average_pooling() {
        let x: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let y = bilinear_forward(&x, 1, (4, 4), (2, 2));
        assert_eq!(y, vec![2.5, 4.5, 10.5, 12.5]);
    }

    #[test]
    fn sorted_mean_ignores_batch_order() {
        let a = [0.1f32, 1e7, -1e7, 0.3, 0.2, 5.0];
        let b = [0.3f32, 0.2, 0.1, 1e7, 5.0, -1e7];
        let ma = mean_over_batch(&a, 6, Reduction::Sorted);
        let mb = mean_over_batch(&b, 6, Reduction::Sorted);
        assert_eq!(ma[0].to_bits(), mb[0].to_bits());
    }

    #[test]
    fn leaky_relu_values() {
        assert_eq!(leaky_relu(-1.0f64, 0.01), -0.01);
        assert_eq!(leaky_relu(2.0f64, 0.01), 2.0);
        assert_eq!(leaky_relu_grad(0.0f64, 0.01), 0.01);
    }
}
