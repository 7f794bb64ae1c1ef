//! Single-plane image operations shared by the synthetic generator and the
//! augmentation pipeline. Planes are row-major `h x w` slices.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Resampling rule for [`sample`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Interp {
    /// Nearest sample; preserves the set of values exactly.
    Nearest,
    Bilinear,
}

/// What a sample outside the image reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Border {
    /// Clamp coordinates to the nearest edge pixel.
    Clamp,
    /// Read zero.
    Zero,
}

/// Normalized 1-D Gaussian taps of the given radius.
pub fn gaussian_taps(sigma: f64, radius: usize) -> Vec<f64> {
    let r = radius as isize;
    let mut taps: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= s);
    taps
}

#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - m }) as usize
}

/// Separable convolution with symmetric taps and mirrored borders.
pub fn separable_filter(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let r = (taps.len() / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, &t) in taps.iter().enumerate() {
                acc += t * plane[y * w + reflect(x as isize + j as isize - r, w)];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, &t) in taps.iter().enumerate() {
                acc += t * tmp[reflect(y as isize + j as isize - r, h) * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Gaussian blur with radius `ceil(3 sigma)` unless given.
pub fn gaussian_blur(plane: &[f64], h: usize, w: usize, sigma: f64, radius: Option<usize>) -> Vec<f64> {
    let radius = radius.unwrap_or_else(|| (3.0 * sigma).ceil().max(1.0) as usize);
    separable_filter(plane, h, w, &gaussian_taps(sigma, radius))
}

#[inline]
fn read(plane: &[f64], h: usize, w: usize, y: isize, x: isize, border: Border) -> f64 {
    if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
        return plane[y as usize * w + x as usize];
    }
    match border {
        Border::Zero => 0.0,
        Border::Clamp => {
            let yc = y.clamp(0, h as isize - 1) as usize;
            let xc = x.clamp(0, w as isize - 1) as usize;
            plane[yc * w + xc]
        }
    }
}

/// Reads `plane` at fractional `(y, x)` pixel coordinates.
#[inline]
pub fn sample_at(plane: &[f64], h: usize, w: usize, y: f64, x: f64, interp: Interp, border: Border) -> f64 {
    match interp {
        Interp::Nearest => {
            // Ties round half away from zero; never produces a new value.
            read(plane, h, w, y.round() as isize, x.round() as isize, border)
        }
        Interp::Bilinear => {
            let (y0, x0) = (y.floor(), x.floor());
            let (ly, lx) = (y - y0, x - x0);
            let (yi, xi) = (y0 as isize, x0 as isize);
            let v00 = read(plane, h, w, yi, xi, border);
            if ly == 0.0 && lx == 0.0 {
                return v00;
            }
            let v01 = read(plane, h, w, yi, xi + 1, border);
            let v10 = read(plane, h, w, yi + 1, xi, border);
            let v11 = read(plane, h, w, yi + 1, xi + 1, border);
            (v00 * (1.0 - lx) + v01 * lx) * (1.0 - ly) + (v10 * (1.0 - lx) + v11 * lx) * ly
        }
    }
}

/// Per-pixel source coordinates: output pixel `(y, x)` reads `coords(y, x)`.
pub fn resample(
    plane: &[f64],
    h: usize,
    w: usize,
    interp: Interp,
    border: Border,
    coords: impl Fn(usize, usize) -> (f64, f64),
) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = coords(y, x);
            out[y * w + x] = sample_at(plane, h, w, sy, sx, interp, border);
        }
    }
    out
}

/// Backward warp `out(p) = x(p + field(p))` of every channel of a
/// `[C, H, W]` tensor; `field` is `[2, H, W]` holding `(dy, dx)` in pixels.
/// Samples outside the image clamp to the edge.
pub fn warp<T: Scalar>(x: &Tensor<T>, field: &Tensor<f64>, interp: Interp) -> Result<Tensor<T>> {
    let (h, w) = x.hw();
    if x.rank() != 3 || field.shape() != [2, h, w] {
        return Err(Error::shape(format!("warp: image {:?} with field {:?}", x.shape(), field.shape())));
    }
    let (dy, dx) = field.data().split_at(h * w);
    let mut out = Vec::with_capacity(x.len());
    for c in 0..x.shape()[0] {
        let plane: Vec<f64> = x.data()[c * h * w..(c + 1) * h * w].iter().map(|v| v.as_f64()).collect();
        let res = resample(&plane, h, w, interp, Border::Clamp, |yy, xx| {
            let i = yy * w + xx;
            (yy as f64 + dy[i], xx as f64 + dx[i])
        });
        out.extend(res.into_iter().map(T::lit));
    }
    Tensor::new(x.shape().to_vec(), out)
}

pub fn flip_horizontal(plane: &mut [f64], h: usize, w: usize) {
    for y in 0..h {
        plane[y * w..(y + 1) * w].reverse();
    }
}

pub fn flip_vertical(plane: &mut [f64], h: usize, w: usize) {
    for y in 0..h / 2 {
        for x in 0..w {
            plane.swap(y * w + x, (h - 1 - y) * w + x);
        }
    }
}

/// Squared Sobel gradient magnitude with replicated borders.
pub fn sobel_sq(plane: &[f64], h: usize, w: usize) -> Vec<f64> {
    let at = |y: isize, x: isize| read(plane, h, w, y, x, Border::Clamp);
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
            let gy = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
            out[y as usize * w + x as usize] = gx * gx + gy * gy;
        }
    }
    out
}

/// Unsharp masking against a 3x3 smoothing kernel (center weight 5, ring 1);
/// `factor > 1` sharpens. Border pixels are left unchanged.
pub fn sharpen(plane: &[f64], h: usize, w: usize, factor: f64) -> Vec<f64> {
    let mut out = plane.to_vec();
    if h < 3 || w < 3 {
        return out;
    }
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let mut s = 4.0 * plane[y * w + x];
            for dy in [-1isize, 0, 1] {
                for dx in [-1isize, 0, 1] {
                    s += plane[(y as isize + dy) as usize * w + (x as isize + dx) as usize];
                }
            }
            let smooth = s / 13.0;
            out[y * w + x] = smooth + factor * (plane[y * w + x] - smooth);
        }
    }
    out
}
