//! The encoder-decoder segmentation network built from cross blocks.
//!
//! Encoder stage `s` runs a cross block and, except at the bottom, halves the
//! resolution of both streams. Each decoder stage doubles both streams,
//! concatenates them with the matching encoder outputs and runs a cross block.
//! A 1x1 convolution maps the final query stream to one logit per pixel.

use std::path::Path;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Padding, ParamStore, Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::kernels::{self, Reduction};
use crate::layers::{cross_block, ConvParams, CrossBlockParams};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub enc_stages: usize,
    pub dec_stages: usize,
    pub features: usize,
    pub kernel: usize,
    pub slope: f64,
    pub in_channels_query: usize,
    pub in_channels_support: usize,
    /// How the per-block mean over support entries is summed.
    pub reduction: Reduction,
    /// Reject support labels outside `{0, 1}`.
    pub strict_labels: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            enc_stages: 5,
            dec_stages: 4,
            features: 64,
            kernel: 3,
            slope: 0.01,
            in_channels_query: 1,
            in_channels_support: 2,
            reduction: Reduction::Sorted,
            strict_labels: true,
        }
    }
}

impl NetworkConfig {
    /// Same architecture with a different stage width.
    pub fn with_features(features: usize) -> Self {
        Self { features, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.enc_stages == 0 || self.dec_stages + 1 != self.enc_stages {
            return Err(Error::config(format!(
                "need dec_stages == enc_stages - 1, got {} and {}",
                self.enc_stages, self.dec_stages
            )));
        }
        if self.features == 0 {
            return Err(Error::config("features must be positive"));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::config(format!("kernel {} must be odd", self.kernel)));
        }
        if !(self.slope > 0.0 && self.slope < 1.0) {
            return Err(Error::config(format!("slope {} outside (0, 1)", self.slope)));
        }
        if self.in_channels_query != 1 || self.in_channels_support != 2 {
            return Err(Error::config("inputs are one-channel images with one-channel labels"));
        }
        Ok(())
    }

    /// Spatial extents must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.enc_stages - 1)
    }
}

/// Trainable state of the network.
#[derive(Clone, Debug, PartialEq)]
pub struct Network<T> {
    pub config: NetworkConfig,
    pub params: ParamStore<T>,
    encoder: Vec<CrossBlockParams>,
    decoder: Vec<CrossBlockParams>,
    head: ConvParams,
}

/// One labeled support example, both `[1, H, W]`.
pub type SupportPair<T> = (Tensor<T>, Tensor<T>);

impl<T: Scalar> Network<T> {
    /// Kernels uniform in `±sqrt(1 / fan_in)`, biases zero.
    pub fn init<R: Rng>(config: NetworkConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let (f, k) = (config.features, config.kernel);
        let mut encoder = Vec::with_capacity(config.enc_stages);
        for s in 0..config.enc_stages {
            let (cu, cv) = if s == 0 { (config.in_channels_query, config.in_channels_support) } else { (f, f) };
            encoder.push(CrossBlockParams::init(&mut params, &format!("enc{s}"), cu, cv, f, k, true, rng));
        }
        let mut decoder = Vec::with_capacity(config.dec_stages);
        for d in 0..config.dec_stages {
            let last = d + 1 == config.dec_stages;
            decoder.push(CrossBlockParams::init(&mut params, &format!("dec{d}"), 2 * f, 2 * f, f, k, !last, rng));
        }
        let head = ConvParams::init(&mut params, "head", f, 1, 1, rng);
        Ok(Self { config, params, encoder, decoder, head })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_elements()
    }

    pub fn new_tape(&self) -> Tape<T> {
        Tape::with_reduction(self.config.reduction)
    }

    fn check_inputs(&self, query: &Tensor<T>, support: &[SupportPair<T>]) -> Result<(usize, usize)> {
        if support.is_empty() {
            return Err(Error::domain("support set is empty"));
        }
        let (h, w) = match query.shape() {
            &[1, h, w] => (h, w),
            s => return Err(Error::shape(format!("query must be [1,H,W], got {s:?}"))),
        };
        let m = self.config.size_multiple();
        if h % m != 0 || w % m != 0 {
            return Err(Error::config(format!(
                "input {h}x{w} is not divisible by {m} ({} encoder stages)",
                self.config.enc_stages
            )));
        }
        for (i, (img, lbl)) in support.iter().enumerate() {
            if img.shape() != query.shape() || lbl.shape() != query.shape() {
                return Err(Error::shape(format!(
                    "support entry {i}: image {:?}, label {:?}, query {:?}",
                    img.shape(),
                    lbl.shape(),
                    query.shape()
                )));
            }
            if self.config.strict_labels && !lbl.is_binary() {
                return Err(Error::domain(format!("support label {i} is not binary")));
            }
        }
        Ok((h, w))
    }

    /// Records the forward pass and returns the `[1, 1, H, W]` logits.
    pub fn forward(&self, tape: &mut Tape<T>, query: &Tensor<T>, support: &[SupportPair<T>]) -> Result<Var> {
        self.forward_with(tape, &self.params, query, support)
    }

    /// Like [`Network::forward`], reading parameter values from `params`,
    /// which must share this network's layout.
    pub fn forward_with(
        &self,
        tape: &mut Tape<T>,
        params: &ParamStore<T>,
        query: &Tensor<T>,
        support: &[SupportPair<T>],
    ) -> Result<Var> {
        if params.len() != self.params.len() {
            return Err(Error::shape("forward: parameter store has a different layout"));
        }
        let (h, w) = self.check_inputs(query, support)?;
        let n = support.len();
        let mut sdata = Vec::with_capacity(n * 2 * h * w);
        for (img, lbl) in support {
            sdata.extend_from_slice(img.data());
            sdata.extend_from_slice(lbl.data());
        }
        let mut u = tape.constant(query.clone().reshape(vec![1, 1, h, w])?);
        let mut v = tape.constant(Tensor::new(vec![n, 2, h, w], sdata)?);
        let slope = T::lit(self.config.slope);

        let mut skips = Vec::with_capacity(self.encoder.len());
        let (mut ch, mut cw) = (h, w);
        for (s, blk) in self.encoder.iter().enumerate() {
            let tz = blk.theta_z.bind(tape, params);
            let tv = blk.theta_v.map(|p| p.bind(tape, params));
            let out = cross_block(tape, u, v, tz, tv, slope)?;
            let sv = out.support.expect("encoder blocks update the support");
            skips.push((out.query, sv, ch, cw));
            if s + 1 < self.encoder.len() {
                ch /= 2;
                cw /= 2;
                u = tape.resize(out.query, ch, cw)?;
                v = tape.resize(sv, ch, cw)?;
            } else {
                u = out.query;
                v = sv;
            }
        }
        for (d, blk) in self.decoder.iter().enumerate() {
            let (skip_u, skip_v, sh, sw) = skips[self.encoder.len() - 2 - d];
            let up_u = tape.resize(u, sh, sw)?;
            let up_v = tape.resize(v, sh, sw)?;
            let cu = tape.concat_channels(up_u, skip_u)?;
            let cv = tape.concat_channels(up_v, skip_v)?;
            let tz = blk.theta_z.bind(tape, params);
            let tv = blk.theta_v.map(|p| p.bind(tape, params));
            let out = cross_block(tape, cu, cv, tz, tv, slope)?;
            u = out.query;
            if let Some(sv) = out.support {
                v = sv;
            }
        }
        let head = self.head.bind(tape, params);
        tape.conv2d(u, head.weight, head.bias, Padding::Same)
    }

    /// Logits `[1, H, W]` without keeping the tape.
    pub fn predict_logits(&self, query: &Tensor<T>, support: &[SupportPair<T>]) -> Result<Tensor<T>> {
        let mut tape = self.new_tape();
        let out = self.forward(&mut tape, query, support)?;
        let (h, w) = query.hw();
        tape.value(out).clone().reshape(vec![1, h, w])
    }

    /// Sigmoid of the logits: a soft map in `(0, 1)`.
    pub fn predict_soft(&self, query: &Tensor<T>, support: &[SupportPair<T>]) -> Result<Tensor<T>> {
        Ok(self.predict_logits(query, support)?.map(kernels::sigmoid))
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint<T>> {
        Ok(Checkpoint {
            config: serde_json::to_value(&self.config)?,
            tensors: self.params.iter().map(|p| (p.name.clone(), p.value.clone())).collect(),
            extra: serde_json::Value::Null,
        })
    }

    /// Rebuilds the layout from the stored config and copies every parameter
    /// by name. Extra tensors in the checkpoint are ignored.
    pub fn from_checkpoint(ck: &Checkpoint<T>) -> Result<Self> {
        let config: NetworkConfig = serde_json::from_value(ck.config.clone())?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut net = Self::init(config, &mut rng)?;
        for p in net.params.iter_mut() {
            let t = ck.tensor(&p.name).ok_or_else(|| Error::Validation(format!("checkpoint lacks {}", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(Error::Validation(format!(
                    "{}: checkpoint shape {:?}, expected {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.clone();
        }
        Ok(net)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            config: self.config.clone(),
            params: self.params.cast(),
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
            head: self.head,
        }
    }
}

/// Finite-difference check of every parameter of a `features`-wide network
/// in 64-bit precision, on random `size x size` inputs with `support` pairs
/// and a soft Dice loss.
pub fn network_grad_check(
    size: usize,
    support: usize,
    features: usize,
    seed: u64,
    eps: f64,
) -> Result<crate::autodiff::GradCheckReport> {
    let config = NetworkConfig::with_features(features);
    config.validate()?;
    let m = config.size_multiple();
    if size == 0 || !size.is_multiple_of(m) {
        return Err(Error::config(format!("gradcheck: size {size} must be a positive multiple of {m}")));
    }
    if support == 0 {
        return Err(Error::domain("gradcheck: support must be at least 1"));
    }
    let mut rng = crate::rng::substream(seed, &[0x47]);
    let net = Network::<f64>::init(config, &mut rng)?;
    let shape = vec![1, size, size];
    let image = |rng: &mut crate::rng::Rng| Tensor::from_fn(shape.clone(), |_| rng.random_range(0.0..1.0));
    let query = image(&mut rng);
    let pairs: Vec<SupportPair<f64>> = (0..support)
        .map(|_| {
            let img = image(&mut rng);
            let lbl = Tensor::from_fn(shape.clone(), |_| if rng.random_bool(0.5) { 1.0 } else { 0.0 });
            (img, lbl)
        })
        .collect();
    let target = Tensor::from_fn(vec![1, 1, size, size], |_| if rng.random_bool(0.5) { 1.0 } else { 0.0 });
    let mut params = net.params.clone();
    crate::autodiff::grad_check(
        |tape, ps| {
            let logits = net.forward_with(tape, ps, &query, &pairs)?;
            let prob = tape.sigmoid(logits);
            let y = tape.constant(target.clone());
            tape.soft_dice_loss(prob, y, 1e-6)
        },
        &mut params,
        eps,
    )
}
