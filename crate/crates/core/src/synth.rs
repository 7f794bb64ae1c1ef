//! Procedural synthetic segmentation tasks.
//!
//! A task starts from one label map of random blobs. Each subject is a smooth
//! random warp of that map, rendered into an intensity image with per-region
//! means, pixel jitter, Gaussian noise and Perlin texture. One region id is the
//! foreground for the whole task.

use std::collections::VecDeque;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{self, Interp};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

/// Generator settings. Spatial quantities (`deform_*`, `shape_sigma`) are
/// fractions of `image_size`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub num_shapes: usize,
    pub num_subjects: usize,
    pub num_tasks: usize,
    pub image_size: usize,
    pub deform_alpha: f64,
    pub deform_sigma: f64,
    /// Range of the smoothing width of each shape's noise field.
    pub shape_sigma: [f64; 2],
    /// Range of the area fraction kept when thresholding a shape field.
    pub shape_area: [f64; 2],
    /// Minimum foreground area fraction of the base map; smaller picks retry.
    pub min_foreground: f64,
    pub fill_jitter: f64,
    pub gaussian_noise: f64,
    pub perlin_amplitude: f64,
    pub perlin_grid: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_shapes: 16,
            num_subjects: 100,
            num_tasks: 1000,
            image_size: 128,
            deform_alpha: 0.01,
            deform_sigma: 0.1,
            shape_sigma: [0.05, 0.1],
            shape_area: [0.03, 0.15],
            min_foreground: 0.015,
            fill_jitter: 0.02,
            gaussian_noise: 0.02,
            perlin_amplitude: 0.08,
            perlin_grid: 4,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// Small corpus for quick experiments: ten 32x32 tasks with stronger
    /// relative warps and larger foregrounds.
    pub fn desk() -> Self {
        Self {
            num_tasks: 10,
            image_size: 32,
            deform_alpha: 0.03,
            deform_sigma: 0.08,
            min_foreground: 0.03,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::config(format!("synth: {m}")));
        if self.num_shapes == 0 || self.num_subjects == 0 || self.num_tasks == 0 {
            return bad("counts must be positive");
        }
        if self.image_size < 16 {
            return bad("image_size must be at least 16");
        }
        if !(self.deform_alpha.is_finite()
            && self.deform_alpha >= 0.0
            && self.deform_sigma.is_finite()
            && self.deform_sigma > 0.0)
        {
            return bad("deform_alpha must be >= 0 and deform_sigma > 0");
        }
        let range_ok = |r: [f64; 2]| r[0] > 0.0 && r[1] >= r[0] && r[1].is_finite();
        if !range_ok(self.shape_sigma) || !range_ok(self.shape_area) || self.shape_area[1] > 1.0 {
            return bad("shape ranges must be positive, ordered, and areas <= 1");
        }
        if !(0.0..1.0).contains(&self.min_foreground) {
            return bad("min_foreground must be in [0, 1)");
        }
        let levels = [self.fill_jitter, self.gaussian_noise, self.perlin_amplitude];
        if levels.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return bad("noise levels must be finite and non-negative");
        }
        if self.perlin_grid < 2 {
            return bad("perlin_grid must be at least 2");
        }
        Ok(())
    }
}

/// One generated task: `(image, label)` pairs of shape `[1, S, S]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTask {
    pub id: usize,
    pub seed: u64,
    pub foreground: usize,
    pub subjects: Vec<(Tensor<f32>, Tensor<f32>)>,
}

fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn white(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| normal(rng)).collect()
}

/// Keeps the 4-connected component of `mask` that contains `seed`.
fn component(mask: &[bool], size: usize, seed: usize) -> Vec<bool> {
    let mut keep = vec![false; mask.len()];
    let mut queue = VecDeque::from([seed]);
    keep[seed] = true;
    while let Some(i) = queue.pop_front() {
        let (y, x) = (i / size, i % size);
        let mut visit = |j: usize| {
            if mask[j] && !keep[j] {
                keep[j] = true;
                queue.push_back(j);
            }
        };
        if y > 0 {
            visit(i - size);
        }
        if y + 1 < size {
            visit(i + size);
        }
        if x > 0 {
            visit(i - 1);
        }
        if x + 1 < size {
            visit(i + 1);
        }
    }
    keep
}

/// One connected blob: the component around the peak of a thresholded,
/// smoothed noise field.
fn blob(rng: &mut Rng, size: usize, sigma_px: f64, area: f64) -> Vec<bool> {
    let n = size * size;
    let field = image::gaussian_blur(&white(rng, n), size, size, sigma_px, None);
    let mut sorted = field.clone();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let keep = ((area * n as f64).round() as usize).clamp(1, n);
    let thr = sorted[keep - 1];
    let mask: Vec<bool> = field.iter().map(|&v| v >= thr).collect();
    let peak = field.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).map(|(i, _)| i).unwrap_or(0);
    component(&mask, size, peak)
}

fn label_map_with(rng: &mut Rng, num_shapes: usize, size: usize, sigma: [f64; 2], area: [f64; 2]) -> Tensor<f32> {
    const MAX_ATTEMPTS: usize = 100;
    let mut map = vec![0u32; size * size];
    for _ in 0..MAX_ATTEMPTS {
        map.iter_mut().for_each(|v| *v = 0);
        for k in 1..=num_shapes as u32 {
            let s = rng::uniform(rng, sigma[0], sigma[1]) * size as f64;
            let a = rng::uniform(rng, area[0], area[1]);
            for (m, inside) in map.iter_mut().zip(blob(rng, size, s, a)) {
                if inside {
                    *m = k;
                }
            }
        }
        let mut present = vec![false; num_shapes + 1];
        map.iter().for_each(|&v| present[v as usize] = true);
        if present[1..].iter().all(|&p| p) {
            break;
        }
    }
    // After the attempt budget the last map is kept even if a region was
    // fully covered; with sane settings this does not happen.
    Tensor::new(vec![1, size, size], map.into_iter().map(|v| v as f32).collect()).expect("label map shape")
}

/// Label map of `num_shapes` random blobs with ids `1..=num_shapes` over a
/// background of 0. Later blobs overwrite earlier ones; the whole map is
/// redrawn while any id is missing.
pub fn gen_label_map(rng: &mut Rng, num_shapes: usize, size: usize) -> Tensor<f32> {
    let d = SynthConfig::default();
    label_map_with(rng, num_shapes.max(1), size, d.shape_sigma, d.shape_area)
}

/// Smooth random displacement field `[2, S, S]` (dy, dx) in pixels. Each axis
/// is white noise blurred with stddev `sigma`, rescaled to unit pointwise
/// variance, times `alpha`.
pub fn gen_deformation(rng: &mut Rng, alpha: f64, sigma: f64, size: usize) -> Tensor<f64> {
    let n = size * size;
    if alpha == 0.0 {
        return Tensor::zeros(vec![2, size, size]);
    }
    let radius = (3.0 * sigma).ceil().max(1.0) as usize;
    let taps = image::gaussian_taps(sigma, radius);
    let norm: f64 = taps.iter().map(|t| t * t).sum();
    let mut data = Vec::with_capacity(2 * n);
    for _ in 0..2 {
        let smooth = image::separable_filter(&white(rng, n), size, size, &taps);
        data.extend(smooth.into_iter().map(|v| v / norm * alpha));
    }
    Tensor::new(vec![2, size, size], data).expect("field shape")
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Gradient-lattice noise on a `grid_scale` x `grid_scale` cell lattice.
pub fn perlin(rng: &mut Rng, size: usize, grid_scale: usize) -> Tensor<f64> {
    let g = grid_scale.max(2);
    let grads: Vec<(f64, f64)> = (0..(g + 1) * (g + 1))
        .map(|_| {
            let a = rng.random_range(0.0..std::f64::consts::TAU);
            (a.cos(), a.sin())
        })
        .collect();
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        let fy = (y as f64 + 0.5) / size as f64 * g as f64;
        let cy = (fy.floor() as usize).min(g - 1);
        let ty = fy - cy as f64;
        for x in 0..size {
            let fx = (x as f64 + 0.5) / size as f64 * g as f64;
            let cx = (fx.floor() as usize).min(g - 1);
            let tx = fx - cx as f64;
            let dot = |iy: usize, ix: usize, dy: f64, dx: f64| {
                let (gy, gx) = grads[(cy + iy) * (g + 1) + cx + ix];
                gy * dy + gx * dx
            };
            let n00 = dot(0, 0, ty, tx);
            let n01 = dot(0, 1, ty, tx - 1.0);
            let n10 = dot(1, 0, ty - 1.0, tx);
            let n11 = dot(1, 1, ty - 1.0, tx - 1.0);
            let (sy, sx) = (smoothstep(ty), smoothstep(tx));
            let top = n00 + sx * (n01 - n00);
            let bottom = n10 + sx * (n11 - n10);
            out.push((top + sy * (bottom - top)).clamp(-1.0, 1.0));
        }
    }
    Tensor::new(vec![1, size, size], out).expect("perlin shape")
}

/// One mean intensity per region id `0..=num_shapes`.
pub fn sample_region_means(rng: &mut Rng, num_shapes: usize) -> Vec<f64> {
    (0..=num_shapes).map(|_| rng.random_range(0.0..=1.0)).collect()
}

/// Renders an integer label map with the given region means plus jitter,
/// Gaussian noise and Perlin texture, clamped to `[0, 1]`.
pub fn render_with_means(
    labels: &Tensor<f32>,
    means: &[f64],
    rng: &mut Rng,
    config: &SynthConfig,
) -> Result<Tensor<f32>> {
    let (h, w) = labels.hw();
    if h != w {
        return Err(Error::shape(format!("render: non-square map {:?}", labels.shape())));
    }
    let texture = if config.perlin_amplitude > 0.0 { Some(perlin(rng, h, config.perlin_grid)) } else { None };
    let mut out = Vec::with_capacity(labels.len());
    for (i, &l) in labels.data().iter().enumerate() {
        let id = l as usize;
        if l < 0.0 || l.fract() != 0.0 || id >= means.len() {
            return Err(Error::domain(format!("render: label {l} has no region mean")));
        }
        let mut v = means[id];
        if config.fill_jitter > 0.0 {
            v += config.fill_jitter * normal(rng);
        }
        if config.gaussian_noise > 0.0 {
            v += config.gaussian_noise * normal(rng);
        }
        if let Some(t) = &texture {
            v += config.perlin_amplitude * t.data()[i];
        }
        out.push(v.clamp(0.0, 1.0) as f32);
    }
    Tensor::new(labels.shape().to_vec(), out)
}

/// Renders with fresh uniform region means.
pub fn render_intensity(labels: &Tensor<f32>, rng: &mut Rng, config: &SynthConfig) -> Result<Tensor<f32>> {
    let max = labels.data().iter().fold(0.0f32, |m, &v| m.max(v));
    let means = sample_region_means(rng, max as usize);
    render_with_means(labels, &means, rng, config)
}

/// Generates one task from `rng`.
pub fn gen_task(rng: &mut Rng, config: &SynthConfig, id: usize) -> Result<SyntheticTask> {
    config.validate()?;
    const RETRIES: usize = 10;
    let size = config.image_size;
    let alpha = config.deform_alpha * size as f64;
    let sigma = config.deform_sigma * size as f64;
    for _ in 0..=RETRIES {
        let base = label_map_with(rng, config.num_shapes, size, config.shape_sigma, config.shape_area);
        let fg = rng.random_range(1..=config.num_shapes);
        let base_area = base.data().iter().filter(|&&v| v as usize == fg).count();
        if (base_area as f64) < config.min_foreground * (size * size) as f64 {
            continue;
        }
        let means = sample_region_means(rng, config.num_shapes);
        let mut subjects = Vec::with_capacity(config.num_subjects);
        let mut empty = 0;
        for _ in 0..config.num_subjects {
            let field = gen_deformation(rng, alpha, sigma, size);
            let warped = image::warp(&base, &field, Interp::Nearest)?;
            let img = render_with_means(&warped, &means, rng, config)?;
            let lbl = warped.map(|v| if v as usize == fg { 1.0 } else { 0.0 });
            if lbl.sum() == 0.0 {
                empty += 1;
            }
            subjects.push((img, lbl));
        }
        if 2 * empty <= config.num_subjects {
            return Ok(SyntheticTask { id, seed: config.seed, foreground: fg, subjects });
        }
    }
    Err(Error::Validation(format!("synth task {id}: foreground vanished after {RETRIES} retries")))
}

/// Task `index` of the corpus defined by `config.seed`, on its own stream.
pub fn gen_task_indexed(config: &SynthConfig, index: usize) -> Result<SyntheticTask> {
    let mut rng = rng::substream(config.seed, &[index as u64]);
    gen_task(&mut rng, config, index)
}

/// Tasks `range` of the corpus, generated on `jobs` threads.
pub fn gen_corpus(config: &SynthConfig, range: std::ops::Range<usize>, jobs: usize) -> Result<Vec<SyntheticTask>> {
    config.validate()?;
    let indices: Vec<usize> = range.collect();
    let jobs = jobs.clamp(1, indices.len().max(1));
    let chunk = indices.len().div_ceil(jobs).max(1);
    let results: Vec<Result<Vec<SyntheticTask>>> = std::thread::scope(|s| {
        let handles: Vec<_> = indices
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(|&i| gen_task_indexed(config, i)).collect()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("synth worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(indices.len());
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}
