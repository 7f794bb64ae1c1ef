//! Episodic training: hierarchical task sampling, in-task and task
//! augmentation, soft Dice loss and Adam, with resumable checkpoints.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::augment::{apply_in_task, apply_task, sample_in_task, sample_task, AugmentConfig, Pair};
use crate::checkpoint::Checkpoint;
use crate::data::{sample_episode, Split, Splits, TaskArchive};
use crate::error::{Error, Result};
use crate::eval::{evaluate, InferConfig};
use crate::net::{Network, NetworkConfig};
use crate::rng::{self, Rng};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const STEP: u64 = 0x53;
const INIT: u64 = 0x49;
pub const SOFT_DICE_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub support_size: usize,
    pub batch_size: usize,
    pub max_steps: u64,
    /// Dev-split Dice every this many steps; 0 disables it.
    pub eval_every: u64,
    /// Dev queries evaluated per task.
    pub eval_subjects: usize,
    /// Checkpoint every this many steps besides the final one; 0 disables.
    pub checkpoint_every: u64,
    pub seed: u64,
    /// Seed for splitting archives without stored splits.
    pub split_seed: u64,
    pub augment: AugmentConfig,
    /// Sampling weight of each collection; uniform when absent.
    pub task_weights: Option<Vec<f64>>,
    pub network: NetworkConfig,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Record wall-clock time in the log. Turn off for byte-stable logs.
    pub log_wallclock: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            support_size: 64,
            batch_size: 1,
            max_steps: 1000,
            eval_every: 0,
            eval_subjects: 10,
            checkpoint_every: 0,
            seed: 0,
            split_seed: 0,
            augment: AugmentConfig::default(),
            task_weights: None,
            network: NetworkConfig::default(),
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            log_wallclock: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("train: learning rate {} must be positive", self.lr)));
        }
        if self.support_size == 0 || self.batch_size == 0 {
            return Err(Error::config("train: support size and batch size must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || self.eps.is_nan()
            || self.eps <= 0.0
        {
            return Err(Error::config("train: Adam betas must be in [0, 1) and eps positive"));
        }
        if let Some(w) = &self.task_weights {
            if w.iter().any(|v| !v.is_finite() || *v < 0.0) || w.iter().sum::<f64>() <= 0.0 {
                return Err(Error::config("train: task weights must be non-negative with a positive sum"));
            }
        }
        self.augment.validate()?;
        self.network.validate()
    }
}

/// A named group of tasks; sampling is uniform over groups first.
#[derive(Clone, Debug)]
pub struct Collection {
    pub name: String,
    pub tasks: Vec<TaskArchive>,
}

/// Picks a collection (uniformly, or by `weights`), then a task uniformly
/// within it. Returns `(collection, task)` indices.
pub fn sample_task_hierarchical(
    collections: &[Collection],
    weights: Option<&[f64]>,
    rng: &mut Rng,
) -> Result<(usize, usize)> {
    if collections.is_empty() || collections.iter().any(|c| c.tasks.is_empty()) {
        return Err(Error::domain("task sampling needs nonempty collections"));
    }
    let c = match weights {
        None => rng.random_range(0..collections.len()),
        Some(w) => {
            if w.len() != collections.len() {
                return Err(Error::config(format!("{} task weights for {} collections", w.len(), collections.len())));
            }
            let total: f64 = w.iter().sum();
            let mut x = rng.random_range(0.0..total);
            let mut pick = w.len() - 1;
            for (i, &wi) in w.iter().enumerate() {
                if x < wi {
                    pick = i;
                    break;
                }
                x -= wi;
            }
            pick
        }
    };
    Ok((c, rng.random_range(0..collections[c].tasks.len())))
}

/// Adam moments for each parameter, in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &crate::autodiff::ParamStore<T>, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.value.shape().to_vec())).collect();
        Self { m: zeros(), v: zeros(), step: 0, beta1, beta2, eps }
    }
}

/// One bias-corrected Adam update from the gradients held in `params`.
pub fn adam_step<T: Scalar>(
    params: &mut crate::autodiff::ParamStore<T>,
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(Error::shape(format!("adam: {} moment tensors for {} parameters", state.m.len(), params.len())));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::lit(state.beta1), T::lit(state.beta2));
    let c1 = T::lit(1.0 - state.beta1.powi(t));
    let c2 = T::lit(1.0 - state.beta2.powi(t));
    let (lr, eps) = (T::lit(lr), T::lit(state.eps));
    for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        if m.shape() != p.value.shape() {
            return Err(Error::shape(format!("adam: moment shape mismatch for {}", p.name)));
        }
        let g = p.grad.data();
        let (m, v) = (m.data_mut(), v.data_mut());
        for (i, w) in p.value.data_mut().iter_mut().enumerate() {
            m[i] = b1 * m[i] + (T::one() - b1) * g[i];
            v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            *w -= lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

/// Builds one augmented training episode for `step`; depends only on the
/// seed, step, corpus and config.
pub fn build_episode(
    collections: &[Collection],
    splits: &[Vec<Splits>],
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<(Pair, Vec<Pair>)> {
    let (c, t) = sample_task_hierarchical(collections, cfg.task_weights.as_deref(), rng)?;
    let archive = &collections[c].tasks[t];
    let ep = sample_episode(archive, &splits[c][t].support, cfg.support_size, rng)?;
    let q = apply_in_task(&ep.query, &sample_in_task(rng, &cfg.augment.in_task))?;
    let mut support = Vec::with_capacity(ep.support.len());
    for pair in &ep.support {
        support.push(apply_in_task(pair, &sample_in_task(rng, &cfg.augment.in_task))?);
    }
    let params = sample_task(rng, &cfg.augment.task);
    apply_task(&q, &support, &params)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dev_dice: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wallclock_ms: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: u64,
    pub last_loss: f64,
    pub best_dev_dice: Option<f64>,
    pub best_step: Option<u64>,
}

/// Training state: network, optimizer and step counter.
pub struct Trainer<T: Scalar> {
    pub config: TrainConfig,
    pub net: Network<T>,
    pub adam: AdamState<T>,
    pub step: u64,
    pub best_dev: Option<(f64, u64)>,
    splits: Vec<Vec<Splits>>,
}

fn splits_for(collections: &[Collection], seed: u64) -> Result<Vec<Vec<Splits>>> {
    if collections.is_empty() {
        return Err(Error::domain("training needs at least one collection"));
    }
    collections
        .iter()
        .map(|c| {
            if c.tasks.is_empty() {
                return Err(Error::domain(format!("collection {} has no tasks", c.name)));
            }
            c.tasks.iter().map(|t| t.splits_or(seed)).collect()
        })
        .collect()
}

impl<T: Scalar> Trainer<T> {
    pub fn new(config: TrainConfig, collections: &[Collection]) -> Result<Self> {
        config.validate()?;
        let net = Network::init(config.network.clone(), &mut rng::substream(config.seed, &[INIT]))?;
        let adam = AdamState::new(&net.params, config.beta1, config.beta2, config.eps);
        let splits = splits_for(collections, config.split_seed)?;
        Ok(Self { config, net, adam, step: 0, best_dev: None, splits })
    }

    /// Runs one optimizer step and returns the mean episode loss.
    pub fn train_step(&mut self, collections: &[Collection]) -> Result<f64> {
        let mut r = rng::substream(self.config.seed, &[STEP, self.step]);
        self.net.params.zero_grad();
        let mut total = 0.0;
        for _ in 0..self.config.batch_size {
            let (q, support) = build_episode(collections, &self.splits, &self.config, &mut r)?;
            let support: Vec<_> = support.iter().map(|(i, l)| (i.cast::<T>(), l.cast::<T>())).collect();
            let mut tape = self.net.new_tape();
            let logits = self.net.forward(&mut tape, &q.0.cast(), &support)?;
            let prob = tape.sigmoid(logits);
            let (h, w) = q.1.hw();
            let target = tape.constant(q.1.cast::<T>().reshape(vec![1, 1, h, w])?);
            let loss = tape.soft_dice_loss(prob, target, T::lit(SOFT_DICE_EPS))?;
            let value = tape.value(loss).item().as_f64();
            if !value.is_finite() {
                return Err(Error::Diverged { step: self.step + 1, detail: format!("loss is {value}") });
            }
            total += value;
            tape.backward(loss, &mut self.net.params)?;
        }
        let b = self.config.batch_size;
        if b > 1 {
            let inv = T::lit(1.0 / b as f64);
            self.net.params.iter_mut().for_each(|p| p.grad.data_mut().iter_mut().for_each(|g| *g *= inv));
        }
        for p in self.net.params.iter() {
            if p.grad.data().iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged {
                    step: self.step + 1,
                    detail: format!("non-finite gradient in {}", p.name),
                });
            }
        }
        adam_step(&mut self.net.params, &mut self.adam, self.config.lr)?;
        self.step += 1;
        Ok(total / b as f64)
    }

    /// Mean Dice over the first `eval_subjects` dev queries of every task.
    pub fn dev_dice(&self, collections: &[Collection]) -> Result<f64> {
        let tasks: Vec<TaskArchive> = collections
            .iter()
            .zip(&self.splits)
            .flat_map(|(c, s)| c.tasks.iter().zip(s).map(|(t, s)| TaskArchive { splits: Some(s.clone()), ..t.clone() }))
            .collect();
        let cfg = InferConfig {
            support_size: self.config.support_size,
            ensemble: 1,
            seed: self.config.seed,
            bootstrap: 1,
            split_seed: self.config.split_seed,
            limit: Some(self.config.eval_subjects),
            ..Default::default()
        };
        Ok(evaluate(&self.net, &tasks, Split::Dev, &cfg)?.mean)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint<T>> {
        let mut ck = self.net.to_checkpoint()?;
        for (p, (m, v)) in self.net.params.iter().zip(self.adam.m.iter().zip(&self.adam.v)) {
            ck.tensors.push((format!("adam.m/{}", p.name), m.clone()));
            ck.tensors.push((format!("adam.v/{}", p.name), v.clone()));
        }
        ck.extra = serde_json::json!({
            "train": self.config,
            "step": self.step,
            "adam_step": self.adam.step,
            "best_dev": self.best_dev,
            "rng": { "kind": "chacha8-substream", "seed": self.config.seed, "next_step": self.step },
        });
        Ok(ck)
    }

    /// Restores network, optimizer and step counter from a training checkpoint.
    pub fn from_checkpoint(ck: &Checkpoint<T>, collections: &[Collection]) -> Result<Self> {
        let extra = &ck.extra;
        let config: TrainConfig = serde_json::from_value(
            extra.get("train").cloned().ok_or_else(|| Error::Validation("checkpoint has no training state".into()))?,
        )?;
        let net = Network::from_checkpoint(ck)?;
        let mut adam = AdamState::new(&net.params, config.beta1, config.beta2, config.eps);
        for (i, p) in net.params.iter().enumerate() {
            for (slot, kind) in [(&mut adam.m[i], "m"), (&mut adam.v[i], "v")] {
                let name = format!("adam.{kind}/{}", p.name);
                let t = ck.tensor(&name).ok_or_else(|| Error::Validation(format!("checkpoint lacks {name}")))?;
                if t.shape() != p.value.shape() {
                    return Err(Error::Validation(format!("{name}: shape {:?}", t.shape())));
                }
                *slot = t.clone();
            }
        }
        let num = |k: &str| {
            extra.get(k).and_then(|v| v.as_u64()).ok_or_else(|| Error::Validation(format!("checkpoint lacks {k}")))
        };
        adam.step = num("adam_step")?;
        let step = num("step")?;
        let best_dev = serde_json::from_value(extra.get("best_dev").cloned().unwrap_or_default())?;
        let splits = splits_for(collections, config.split_seed)?;
        Ok(Self { config, net, adam, step, best_dev, splits })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn resume(path: impl AsRef<Path>, collections: &[Collection]) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?, collections)
    }

    /// Trains until `max_steps`, writing one JSON line per step to `log`.
    /// With `out`, writes `last.ckpt` (and `best.ckpt` when dev Dice
    /// improves) there.
    pub fn run(&mut self, collections: &[Collection], out: Option<&Path>, log: &mut dyn Write) -> Result<TrainSummary> {
        let start = Instant::now();
        let ckpt = |name: &str| out.map(|d| d.join(name));
        let mut last_loss = f64::NAN;
        while self.step < self.config.max_steps {
            last_loss = self.train_step(collections)?;
            let mut dev_dice = None;
            if self.config.eval_every > 0 && self.step.is_multiple_of(self.config.eval_every) {
                let d = self.dev_dice(collections)?;
                dev_dice = Some(d);
                if self.best_dev.is_none_or(|(b, _)| d > b) {
                    self.best_dev = Some((d, self.step));
                    if let Some(p) = ckpt("best.ckpt") {
                        self.save(p)?;
                    }
                }
            }
            let rec = LogRecord {
                step: self.step,
                loss: last_loss,
                dev_dice,
                wallclock_ms: self.config.log_wallclock.then(|| start.elapsed().as_millis() as u64),
            };
            let line = serde_json::to_string(&rec)?;
            writeln!(log, "{line}").map_err(|e| Error::io(PathBuf::from("<log>"), e))?;
            if self.config.checkpoint_every > 0 && self.step.is_multiple_of(self.config.checkpoint_every) {
                if let Some(p) = ckpt("last.ckpt") {
                    self.save(p)?;
                }
            }
        }
        log.flush().map_err(|e| Error::io(PathBuf::from("<log>"), e))?;
        if let Some(p) = ckpt("last.ckpt") {
            self.save(p)?;
        }
        Ok(TrainSummary {
            steps: self.step,
            last_loss,
            best_dev_dice: self.best_dev.map(|b| b.0),
            best_step: self.best_dev.map(|b| b.1),
        })
    }
}
