//! Episode augmentation.
//!
//! In-task augmentation perturbs each `(image, label)` pair independently.
//! Task augmentation draws one set of parameters and applies it to the query
//! and every support pair, which changes the task itself. Every sampled
//! transform is returned as plain parameters, and applying those parameters
//! again reproduces the result exactly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{self, Border, Interp};
use crate::rng::{self, bernoulli, uniform, Rng};
use crate::synth::gen_deformation;
use crate::tensor::Tensor;

use rand::{Rng as _, RngCore};
use rand_distr::{Distribution, StandardNormal};

/// `(image, label)`, both `[1, H, W]`.
pub type Pair = (Tensor<f32>, Tensor<f32>);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineAug {
    pub p: f64,
    pub degrees: [f64; 2],
    /// Shift magnitude as a fraction of the image extent, per axis.
    pub translate: [f64; 2],
    pub scale: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BrightnessContrastAug {
    pub p: f64,
    pub brightness: [f64; 2],
    pub contrast: [f64; 2],
}

/// Elastic warp; `alpha` and `sigma` are in pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElasticAug {
    pub p: f64,
    pub alpha: [f64; 2],
    pub sigma: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlurAug {
    pub p: f64,
    pub kernel: usize,
    pub sigma: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseAug {
    pub p: f64,
    pub mean: [f64; 2],
    pub variance: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SharpnessAug {
    pub p: f64,
    pub factor: f64,
}

/// Per-pair perturbations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InTaskConfig {
    pub affine: AffineAug,
    pub brightness_contrast: BrightnessContrastAug,
    pub blur: BlurAug,
    pub noise: NoiseAug,
    pub sharpness: SharpnessAug,
    pub elastic: ElasticAug,
}

/// Episode-wide transforms, applied in field order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub flip_intensities: f64,
    pub flip_labels: f64,
    pub flip: f64,
    pub sobel_edge: f64,
    pub affine: AffineAug,
    pub brightness_contrast: BrightnessContrastAug,
    pub elastic: ElasticAug,
    pub blur: BlurAug,
    pub noise: NoiseAug,
    pub sharpness: SharpnessAug,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct AugmentConfig {
    pub in_task: InTaskConfig,
    pub task: TaskConfig,
}

fn affine(p: f64) -> AffineAug {
    AffineAug { p, degrees: [0.0, 360.0], translate: [0.0, 0.2], scale: [0.8, 1.1] }
}

fn blur(p: f64) -> BlurAug {
    BlurAug { p, kernel: 5, sigma: [0.1, 1.1] }
}

fn noise(p: f64) -> NoiseAug {
    NoiseAug { p, mean: [0.0, 0.05], variance: [0.0, 0.05] }
}

impl Default for InTaskConfig {
    fn default() -> Self {
        Self {
            affine: affine(0.5),
            brightness_contrast: BrightnessContrastAug { p: 0.25, brightness: [-0.1, 0.1], contrast: [0.5, 1.5] },
            blur: blur(0.25),
            noise: noise(0.25),
            sharpness: SharpnessAug { p: 0.25, factor: 5.0 },
            elastic: ElasticAug { p: 0.8, alpha: [1.0, 2.5], sigma: [7.0, 8.0] },
        }
    }
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            flip_intensities: 0.5,
            flip_labels: 0.5,
            flip: 0.5,
            sobel_edge: 0.5,
            affine: affine(0.5),
            brightness_contrast: BrightnessContrastAug { p: 0.5, brightness: [-0.1, 0.1], contrast: [0.8, 1.2] },
            elastic: ElasticAug { p: 0.25, alpha: [1.0, 2.0], sigma: [6.0, 8.0] },
            blur: blur(0.5),
            noise: noise(0.5),
            sharpness: SharpnessAug { p: 0.5, factor: 5.0 },
        }
    }
}

impl InTaskConfig {
    fn set_probabilities(&mut self, scale: f64) {
        for p in [
            &mut self.affine.p,
            &mut self.brightness_contrast.p,
            &mut self.blur.p,
            &mut self.noise.p,
            &mut self.sharpness.p,
            &mut self.elastic.p,
        ] {
            *p *= scale;
        }
    }

    fn probabilities(&self) -> [f64; 6] {
        [self.affine.p, self.brightness_contrast.p, self.blur.p, self.noise.p, self.sharpness.p, self.elastic.p]
    }
}

impl TaskConfig {
    fn set_probabilities(&mut self, scale: f64) {
        for p in [
            &mut self.flip_intensities,
            &mut self.flip_labels,
            &mut self.flip,
            &mut self.sobel_edge,
            &mut self.affine.p,
            &mut self.brightness_contrast.p,
            &mut self.elastic.p,
            &mut self.blur.p,
            &mut self.noise.p,
            &mut self.sharpness.p,
        ] {
            *p *= scale;
        }
    }

    fn probabilities(&self) -> [f64; 10] {
        [
            self.flip_intensities,
            self.flip_labels,
            self.flip,
            self.sobel_edge,
            self.affine.p,
            self.brightness_contrast.p,
            self.elastic.p,
            self.blur.p,
            self.noise.p,
            self.sharpness.p,
        ]
    }
}

fn check_range(name: &str, r: [f64; 2]) -> Result<()> {
    if r[0].is_finite() && r[1].is_finite() && r[0] <= r[1] {
        Ok(())
    } else {
        Err(Error::config(format!("augment: {name} range {r:?} is not ordered")))
    }
}

impl AugmentConfig {
    /// Every probability set to zero.
    pub fn disabled() -> Self {
        let mut c = Self::default();
        c.in_task.set_probabilities(0.0);
        c.task.set_probabilities(0.0);
        c
    }

    /// Only in-task augmentation, at the default probabilities.
    pub fn in_task_only() -> Self {
        let mut c = Self::default();
        c.task.set_probabilities(0.0);
        c
    }

    pub fn validate(&self) -> Result<()> {
        let it = &self.in_task;
        let t = &self.task;
        let probs = it.probabilities().into_iter().chain(t.probabilities());
        for p in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("augment: probability {p} outside [0, 1]")));
            }
        }
        for (a, bc, bl, n, e) in [
            (&it.affine, &it.brightness_contrast, &it.blur, &it.noise, &it.elastic),
            (&t.affine, &t.brightness_contrast, &t.blur, &t.noise, &t.elastic),
        ] {
            check_range("degrees", a.degrees)?;
            check_range("translate", a.translate)?;
            check_range("scale", a.scale)?;
            check_range("brightness", bc.brightness)?;
            check_range("contrast", bc.contrast)?;
            check_range("blur sigma", bl.sigma)?;
            check_range("noise mean", n.mean)?;
            check_range("noise variance", n.variance)?;
            check_range("elastic alpha", e.alpha)?;
            check_range("elastic sigma", e.sigma)?;
            if a.scale[0] <= 0.0 || n.variance[0] < 0.0 || e.alpha[0] < 0.0 || e.sigma[0] <= 0.0 || bl.sigma[0] <= 0.0 {
                return Err(Error::config("augment: scale, sigmas must be positive; alpha, variance non-negative"));
            }
            if bl.kernel % 2 == 0 {
                return Err(Error::config("augment: blur kernel must be odd"));
            }
        }
        Ok(())
    }
}

/// Elastic field parameters; the field is regenerated from `seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElasticParams {
    pub alpha: f64,
    pub sigma: f64,
    pub seed: u64,
}

/// One spatial transform: affine about the image center, then an elastic warp.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeometricParams {
    pub degrees: f64,
    /// `(dy, dx)` as fractions of the image extent.
    pub translate: (f64, f64),
    pub scale: f64,
    pub elastic: Option<ElasticParams>,
}

impl GeometricParams {
    pub fn identity() -> Self {
        Self { degrees: 0.0, translate: (0.0, 0.0), scale: 1.0, elastic: None }
    }

    fn has_affine(&self) -> bool {
        self.degrees.rem_euclid(360.0) != 0.0 || self.translate != (0.0, 0.0) || self.scale != 1.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseParams {
    pub mean: f64,
    pub std: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhotometricParams {
    pub brightness: f64,
    pub contrast: f64,
    pub blur: Option<(usize, f64)>,
    pub noise: Option<NoiseParams>,
    pub sharpness: Option<f64>,
}

impl PhotometricParams {
    pub fn identity() -> Self {
        Self { brightness: 0.0, contrast: 1.0, blur: None, noise: None, sharpness: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InTaskParams {
    pub geometric: GeometricParams,
    pub photometric: PhotometricParams,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FlipAxis {
    Horizontal,
    Vertical,
}

/// Parameters of one task augmentation, in application order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskParams {
    pub flip_intensities: bool,
    pub flip_labels: bool,
    pub flip: Option<FlipAxis>,
    pub sobel_edge: bool,
    pub affine: Option<GeometricParams>,
    pub brightness_contrast: Option<(f64, f64)>,
    pub elastic: Option<ElasticParams>,
    pub blur: Option<(usize, f64)>,
    pub noise: Option<NoiseParams>,
    pub sharpness: Option<f64>,
}

fn plane(t: &Tensor<f32>) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

fn from_plane(like: &Tensor<f32>, p: Vec<f64>) -> Tensor<f32> {
    Tensor::new(like.shape().to_vec(), p.into_iter().map(|v| v as f32).collect()).expect("same shape")
}

fn check_pair(pair: &Pair) -> Result<(usize, usize)> {
    let (img, lbl) = pair;
    if img.rank() != 3 || img.shape()[0] != 1 || img.shape() != lbl.shape() {
        return Err(Error::shape(format!(
            "augment: image {:?} and label {:?} must both be [1, H, W]",
            img.shape(),
            lbl.shape()
        )));
    }
    Ok(img.hw())
}

/// Applies the same spatial transform to image (bilinear) and label (nearest).
pub fn apply_geometric(pair: &Pair, params: &GeometricParams) -> Result<Pair> {
    let (h, w) = check_pair(pair)?;
    let affine = params.has_affine();
    if !affine && params.elastic.is_none() {
        return Ok(pair.clone());
    }
    let field =
        params.elastic.as_ref().map(|e| gen_deformation(&mut rng::rng_from_seed(e.seed), e.alpha, e.sigma, h.max(w)));
    if h != w && field.is_some() {
        return Err(Error::shape("augment: elastic warp needs square images"));
    }
    let theta = params.degrees.rem_euclid(360.0).to_radians();
    let (sin, cos) = if theta == 0.0 { (0.0, 1.0) } else { theta.sin_cos() };
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (ty, tx) = (params.translate.0 * h as f64, params.translate.1 * w as f64);
    let s = params.scale;
    let coords = |y: usize, x: usize| {
        let (mut py, mut px) = (y as f64, x as f64);
        if let Some(f) = &field {
            let i = y * w + x;
            py += f.data()[i];
            px += f.data()[h * w + i];
        }
        if affine {
            // Inverse of: rotate by theta and scale about the center, then shift.
            let (ry, rx) = (py - cy - ty, px - cx - tx);
            py = cy + (cos * ry - sin * rx) / s;
            px = cx + (sin * ry + cos * rx) / s;
        }
        (py, px)
    };
    // Rotations and shifts expose empty space, which reads as zero; a pure
    // elastic warp clamps to the edge.
    let border = if affine { Border::Zero } else { Border::Clamp };
    let img = image::resample(&plane(&pair.0), h, w, Interp::Bilinear, border, coords);
    let lbl = image::resample(&plane(&pair.1), h, w, Interp::Nearest, border, coords);
    Ok((from_plane(&pair.0, img), from_plane(&pair.1, lbl)))
}

fn noise_field(p: &NoiseParams, n: usize) -> Vec<f64> {
    let mut r = rng::rng_from_seed(p.seed);
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut r);
            p.mean + p.std * z
        })
        .collect()
}

/// Brightness/contrast, then blur, noise and sharpening; clamped to `[0, 1]`.
pub fn apply_photometric(img: &Tensor<f32>, params: &PhotometricParams) -> Result<Tensor<f32>> {
    if params == &PhotometricParams::identity() {
        return Ok(img.clone());
    }
    let (h, w) = img.hw();
    let mut p: Vec<f64> =
        plane(img).into_iter().map(|x| params.contrast * (x - 0.5) + 0.5 + params.brightness).collect();
    if let Some((k, sigma)) = params.blur {
        p = image::separable_filter(&p, h, w, &image::gaussian_taps(sigma, k / 2));
    }
    if let Some(n) = &params.noise {
        p.iter_mut().zip(noise_field(n, h * w)).for_each(|(v, e)| *v += e);
    }
    if let Some(f) = params.sharpness {
        p = image::sharpen(&p, h, w, f);
    }
    p.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(from_plane(img, p))
}

/// `1 - label`.
pub fn flip_labels(label: &Tensor<f32>) -> Tensor<f32> {
    label.map(|v| 1.0 - v)
}

/// `1 - image`.
pub fn flip_intensities(img: &Tensor<f32>) -> Tensor<f32> {
    img.map(|v| 1.0 - v)
}

/// Binary map of pixels with nonzero Sobel gradient.
pub fn sobel_edge_label(label: &Tensor<f32>) -> Tensor<f32> {
    let (h, w) = label.hw();
    let e = image::sobel_sq(&plane(label), h, w);
    from_plane(label, e.into_iter().map(|v| if v > 0.0 { 1.0 } else { 0.0 }).collect())
}

fn flip(t: &Tensor<f32>, axis: FlipAxis) -> Tensor<f32> {
    let (h, w) = t.hw();
    let mut p = plane(t);
    match axis {
        FlipAxis::Horizontal => image::flip_horizontal(&mut p, h, w),
        FlipAxis::Vertical => image::flip_vertical(&mut p, h, w),
    }
    from_plane(t, p)
}

fn sample_affine(rng: &mut Rng, a: &AffineAug) -> GeometricParams {
    let t = |rng: &mut Rng| {
        let m = uniform(rng, a.translate[0], a.translate[1]);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    };
    GeometricParams {
        degrees: uniform(rng, a.degrees[0], a.degrees[1]),
        translate: (t(rng), t(rng)),
        scale: uniform(rng, a.scale[0], a.scale[1]),
        elastic: None,
    }
}

fn sample_elastic(rng: &mut Rng, e: &ElasticAug) -> ElasticParams {
    ElasticParams {
        alpha: uniform(rng, e.alpha[0], e.alpha[1]),
        sigma: uniform(rng, e.sigma[0], e.sigma[1]),
        seed: rng.next_u64(),
    }
}

fn sample_noise(rng: &mut Rng, n: &NoiseAug) -> NoiseParams {
    NoiseParams {
        mean: uniform(rng, n.mean[0], n.mean[1]),
        std: uniform(rng, n.variance[0], n.variance[1]).sqrt(),
        seed: rng.next_u64(),
    }
}

/// Draws in-task parameters. Every gate is consumed whether or not it fires,
/// so the stream position does not depend on earlier outcomes.
pub fn sample_in_task(rng: &mut Rng, c: &InTaskConfig) -> InTaskParams {
    let affine = sample_affine(rng, &c.affine);
    let use_affine = bernoulli(rng, c.affine.p);
    let elastic = sample_elastic(rng, &c.elastic);
    let use_elastic = bernoulli(rng, c.elastic.p);
    let b = uniform(rng, c.brightness_contrast.brightness[0], c.brightness_contrast.brightness[1]);
    let k = uniform(rng, c.brightness_contrast.contrast[0], c.brightness_contrast.contrast[1]);
    let use_bc = bernoulli(rng, c.brightness_contrast.p);
    let blur_sigma = uniform(rng, c.blur.sigma[0], c.blur.sigma[1]);
    let use_blur = bernoulli(rng, c.blur.p);
    let noise = sample_noise(rng, &c.noise);
    let use_noise = bernoulli(rng, c.noise.p);
    let use_sharp = bernoulli(rng, c.sharpness.p);
    let mut geometric = if use_affine { affine } else { GeometricParams::identity() };
    geometric.elastic = use_elastic.then_some(elastic);
    InTaskParams {
        geometric,
        photometric: PhotometricParams {
            brightness: if use_bc { b } else { 0.0 },
            contrast: if use_bc { k } else { 1.0 },
            blur: use_blur.then_some((c.blur.kernel, blur_sigma)),
            noise: use_noise.then_some(noise),
            sharpness: use_sharp.then_some(c.sharpness.factor),
        },
    }
}

pub fn apply_in_task(pair: &Pair, params: &InTaskParams) -> Result<Pair> {
    let (img, lbl) = apply_geometric(pair, &params.geometric)?;
    Ok((apply_photometric(&img, &params.photometric)?, lbl))
}

/// Independent geometric then photometric perturbation of one pair.
pub fn in_task_augment(pair: &Pair, rng: &mut Rng, config: &AugmentConfig) -> Result<Pair> {
    let params = sample_in_task(rng, &config.in_task);
    apply_in_task(pair, &params)
}

/// Draws one task augmentation; one Bernoulli gate per row.
pub fn sample_task(rng: &mut Rng, c: &TaskConfig) -> TaskParams {
    let flip_intensities = bernoulli(rng, c.flip_intensities);
    let flip_labels = bernoulli(rng, c.flip_labels);
    let use_flip = bernoulli(rng, c.flip);
    let axis = if rng.random_bool(0.5) { FlipAxis::Horizontal } else { FlipAxis::Vertical };
    let sobel_edge = bernoulli(rng, c.sobel_edge);
    let affine = sample_affine(rng, &c.affine);
    let use_affine = bernoulli(rng, c.affine.p);
    let b = uniform(rng, c.brightness_contrast.brightness[0], c.brightness_contrast.brightness[1]);
    let k = uniform(rng, c.brightness_contrast.contrast[0], c.brightness_contrast.contrast[1]);
    let use_bc = bernoulli(rng, c.brightness_contrast.p);
    let elastic = sample_elastic(rng, &c.elastic);
    let use_elastic = bernoulli(rng, c.elastic.p);
    let blur_sigma = uniform(rng, c.blur.sigma[0], c.blur.sigma[1]);
    let use_blur = bernoulli(rng, c.blur.p);
    let noise = sample_noise(rng, &c.noise);
    let use_noise = bernoulli(rng, c.noise.p);
    let use_sharp = bernoulli(rng, c.sharpness.p);
    TaskParams {
        flip_intensities,
        flip_labels,
        flip: use_flip.then_some(axis),
        sobel_edge,
        affine: use_affine.then_some(affine),
        brightness_contrast: use_bc.then_some((b, k)),
        elastic: use_elastic.then_some(elastic),
        blur: use_blur.then_some((c.blur.kernel, blur_sigma)),
        noise: use_noise.then_some(noise),
        sharpness: use_sharp.then_some(c.sharpness.factor),
    }
}

fn apply_task_pair(pair: &Pair, p: &TaskParams, entry: u64) -> Result<Pair> {
    check_pair(pair)?;
    let (mut img, mut lbl) = pair.clone();
    if p.flip_intensities {
        img = flip_intensities(&img);
    }
    if p.flip_labels {
        lbl = flip_labels(&lbl);
    }
    if let Some(axis) = p.flip {
        img = flip(&img, axis);
        lbl = flip(&lbl, axis);
    }
    if p.sobel_edge {
        lbl = sobel_edge_label(&lbl);
    }
    if let Some(g) = &p.affine {
        (img, lbl) = apply_geometric(&(img, lbl), &GeometricParams { elastic: None, ..g.clone() })?;
    }
    if let Some((b, k)) = p.brightness_contrast {
        img = apply_photometric(
            &img,
            &PhotometricParams { brightness: b, contrast: k, ..PhotometricParams::identity() },
        )?;
    }
    if let Some(e) = &p.elastic {
        let g = GeometricParams { elastic: Some(e.clone()), ..GeometricParams::identity() };
        (img, lbl) = apply_geometric(&(img, lbl), &g)?;
    }
    // Noise realizations differ per entry but follow from the recorded seed.
    let noise = p.noise.as_ref().map(|n| NoiseParams { seed: rng::derive_seed(n.seed, &[entry]), ..n.clone() });
    let rest = PhotometricParams { blur: p.blur, noise, sharpness: p.sharpness, ..PhotometricParams::identity() };
    img = apply_photometric(&img, &rest)?;
    Ok((img, lbl))
}

/// Applies recorded task parameters to the query (entry 0) and each support
/// pair (entries 1..).
pub fn apply_task(query: &Pair, support: &[Pair], params: &TaskParams) -> Result<(Pair, Vec<Pair>)> {
    let q = apply_task_pair(query, params, 0)?;
    let s = support
        .iter()
        .enumerate()
        .map(|(i, p)| apply_task_pair(p, params, i as u64 + 1))
        .collect::<Result<Vec<_>>>()?;
    Ok((q, s))
}

/// One task-changing transform applied consistently to the whole episode.
pub fn task_augment(
    query: &Pair,
    support: &[Pair],
    rng: &mut Rng,
    config: &AugmentConfig,
) -> Result<(Pair, Vec<Pair>, TaskParams)> {
    let params = sample_task(rng, &config.task);
    let (q, s) = apply_task(query, support, &params)?;
    Ok((q, s, params))
}
