//! Ensembled inference, Dice scoring, bootstrapping and the analysis sweeps.

use std::io::Write;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{draw_support, Split, TaskArchive};
use crate::error::{Error, Result};
use crate::kernels::{mean_over_batch, Reduction};
use crate::net::Network;
use crate::rng::{self, Rng};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Stream tags keep the sweeps and evaluation on disjoint substreams.
const DRAW: u64 = 0x44;
const GRID: u64 = 0x47;
const POOL: u64 = 0x50;
const BOOT: u64 = 0x42;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferConfig {
    pub support_size: usize,
    pub ensemble: usize,
    pub threshold: f64,
    pub seed: u64,
    pub bootstrap: usize,
    /// Seed for splitting archives that carry no stored splits.
    pub split_seed: u64,
    pub jobs: usize,
    /// Evaluate only the first this-many queries of each task.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limit: Option<usize>,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            support_size: 64,
            ensemble: 5,
            threshold: 0.5,
            seed: 0,
            bootstrap: 1000,
            split_seed: 0,
            jobs: 1,
            limit: None,
        }
    }
}

impl InferConfig {
    pub fn validate(&self) -> Result<()> {
        if self.support_size == 0 || self.ensemble == 0 {
            return Err(Error::config("infer: support size and ensemble count must be at least 1"));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::config(format!("infer: threshold {} outside (0, 1)", self.threshold)));
        }
        Ok(())
    }
}

/// 1 where `soft > tau`, else 0.
pub fn threshold<T: Scalar>(soft: &Tensor<T>, tau: f64) -> Tensor<T> {
    let tau = T::lit(tau);
    soft.map(|v| if v > tau { T::one() } else { T::zero() })
}

/// Overlap of two binary masks on a 0-100 scale; two empty masks score 100.
pub fn dice_score<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("dice: {:?} vs {:?}", a.shape(), b.shape())));
    }
    if !a.is_binary() || !b.is_binary() {
        return Err(Error::domain("dice: inputs must be binary"));
    }
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (x, y) = (x == T::one(), y == T::one());
        inter += (x && y) as usize;
        na += x as usize;
        nb += y as usize;
    }
    if na + nb == 0 {
        return Ok(100.0);
    }
    Ok(100.0 * (2 * inter) as f64 / (na + nb) as f64)
}

/// `1 - (2 sum(y p) + eps) / (sum(y^2) + sum(p^2) + eps)` with `eps = 1e-6`.
pub fn soft_dice_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(format!("soft dice: {:?} vs {:?}", pred.shape(), target.shape())));
    }
    let (mut inter, mut den) = (0.0, 0.0);
    for (&p, &y) in pred.data().iter().zip(target.data()) {
        let (p, y) = (p.as_f64(), y.as_f64());
        inter += p * y;
        den += p * p + y * y;
    }
    Ok(1.0 - (2.0 * inter + 1e-6) / (den + 1e-6))
}

/// Standard deviation over `reps` resampled means of `scores`.
pub fn bootstrap_std(scores: &[f64], reps: usize, rng: &mut Rng) -> Result<f64> {
    if scores.is_empty() || reps == 0 {
        return Err(Error::domain("bootstrap: need scores and at least one repetition"));
    }
    let n = scores.len();
    let means: Vec<f64> =
        (0..reps).map(|_| (0..n).map(|_| scores[rng.random_range(0..n)]).sum::<f64>() / n as f64).collect();
    Ok(std_dev(&means))
}

/// Population standard deviation.
pub fn std_dev(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64).sqrt()
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Pixel-wise average of soft maps; exact when all maps are identical.
pub fn average_maps<T: Scalar>(maps: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = maps.first().ok_or_else(|| Error::domain("average of zero maps"))?;
    if maps.len() == 1 {
        return Ok((*first).clone());
    }
    let mut flat = Vec::with_capacity(first.len() * maps.len());
    for m in maps {
        if m.shape() != first.shape() {
            return Err(Error::shape("ensemble maps differ in shape"));
        }
        flat.extend_from_slice(m.data());
    }
    Tensor::new(first.shape().to_vec(), mean_over_batch(&flat, maps.len(), Reduction::Sorted))
}

fn support_of<T: Scalar>(archive: &TaskArchive, idx: &[usize]) -> Vec<(Tensor<T>, Tensor<T>)> {
    idx.iter()
        .map(|&i| {
            let (img, lbl) = &archive.subjects[i];
            (img.cast(), lbl.cast())
        })
        .collect()
}

/// Soft prediction from one explicit support draw.
pub fn predict_with<T: Scalar>(
    net: &Network<T>,
    query: &Tensor<f32>,
    archive: &TaskArchive,
    support: &[usize],
) -> Result<Tensor<T>> {
    net.predict_soft(&query.cast(), &support_of(archive, support))
}

/// Average of `k` predictions, each with `n` support draws (with replacement)
/// from `pool` minus `exclude`.
#[allow(clippy::too_many_arguments)]
pub fn ensemble_predict<T: Scalar>(
    net: &Network<T>,
    query: &Tensor<f32>,
    archive: &TaskArchive,
    pool: &[usize],
    exclude: Option<usize>,
    n: usize,
    k: usize,
    rng: &mut Rng,
) -> Result<Tensor<T>> {
    if k == 0 || n == 0 {
        return Err(Error::domain("ensemble: n and k must be at least 1"));
    }
    let mut maps = Vec::with_capacity(k);
    for _ in 0..k {
        let draw = draw_support(pool, exclude, n, rng)?;
        maps.push(predict_with(net, query, archive, &draw)?);
    }
    average_maps(&maps.iter().collect::<Vec<_>>())
}

/// Maps `f` over `items` on up to `jobs` threads, preserving order.
pub fn par_map<I: Sync, O: Send>(jobs: usize, items: &[I], f: impl Fn(&I) -> Result<O> + Sync) -> Result<Vec<O>> {
    if jobs <= 1 || items.len() <= 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(jobs);
    let f = &f;
    let parts: Vec<Result<Vec<O>>> = std::thread::scope(|s| {
        let hs: Vec<_> =
            items.chunks(chunk).map(|c| s.spawn(move || c.iter().map(f).collect::<Result<Vec<O>>>())).collect();
        hs.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// `(task, subject)` pairs of the query split, with each task's support pool.
struct Plan {
    queries: Vec<(usize, usize)>,
    pools: Vec<Vec<usize>>,
}

fn plan(archives: &[TaskArchive], split: Split, cfg: &InferConfig) -> Result<Plan> {
    if archives.is_empty() {
        return Err(Error::domain("evaluation needs at least one archive"));
    }
    let mut queries = Vec::new();
    let mut pools = Vec::new();
    for (t, a) in archives.iter().enumerate() {
        let s = a.splits_or(cfg.split_seed)?;
        let q = s.get(split);
        let q = &q[..cfg.limit.unwrap_or(q.len()).min(q.len())];
        queries.extend(q.iter().map(|&i| (t, i)));
        pools.push(s.support.clone());
    }
    Ok(Plan { queries, pools })
}

fn exclude_for(pool: &[usize], subject: usize) -> Option<usize> {
    pool.contains(&subject).then_some(subject)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectScore {
    pub task: String,
    pub subject: usize,
    pub dice: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: InferConfig,
    pub split: Split,
    pub scores: Vec<SubjectScore>,
    pub mean: f64,
    pub bootstrap_std: f64,
    /// Score given when prediction and target are both empty.
    pub empty_pair_dice: f64,
}

/// Soft map for prediction `j` of a query; the draw depends only on
/// `(seed, n, task, subject, j)`.
fn pooled_prediction<T: Scalar>(
    net: &Network<T>,
    archives: &[TaskArchive],
    plan: &Plan,
    q: (usize, usize),
    n: usize,
    j: usize,
    seed: u64,
) -> Result<Tensor<T>> {
    let (t, s) = q;
    let pool = &plan.pools[t];
    let mut r = rng::substream(seed, &[DRAW, n as u64, t as u64, s as u64, j as u64]);
    let draw = draw_support(pool, exclude_for(pool, s), n, &mut r)?;
    predict_with(net, &archives[t].subjects[s].0, &archives[t], &draw)
}

fn score<T: Scalar>(soft: &Tensor<T>, target: &Tensor<f32>, tau: f64) -> Result<f64> {
    dice_score(&threshold(soft, tau), &target.cast::<T>())
}

/// Ensembled Dice of every subject in `split`, with support drawn from each
/// task's support split.
pub fn evaluate<T: Scalar>(
    net: &Network<T>,
    archives: &[TaskArchive],
    split: Split,
    cfg: &InferConfig,
) -> Result<EvalReport> {
    cfg.validate()?;
    let p = plan(archives, split, cfg)?;
    let dice = par_map(cfg.jobs, &p.queries, |&q| {
        let maps = (0..cfg.ensemble)
            .map(|j| pooled_prediction(net, archives, &p, q, cfg.support_size, j, cfg.seed))
            .collect::<Result<Vec<_>>>()?;
        let soft = average_maps(&maps.iter().collect::<Vec<_>>())?;
        score(&soft, &archives[q.0].subjects[q.1].1, cfg.threshold)
    })?;
    if let Some(i) = dice.iter().position(|d| !d.is_finite()) {
        return Err(Error::NonFinite(format!("dice of query {:?}", p.queries[i])));
    }
    let scores: Vec<SubjectScore> = p
        .queries
        .iter()
        .zip(&dice)
        .map(|(&(t, s), &d)| SubjectScore { task: archives[t].name.clone(), subject: s, dice: d })
        .collect();
    let boot = bootstrap_std(&dice, cfg.bootstrap.max(1), &mut rng::substream(cfg.seed, &[BOOT]))?;
    Ok(EvalReport {
        config: cfg.clone(),
        split,
        scores,
        mean: mean(&dice),
        bootstrap_std: boot,
        empty_pair_dice: 100.0,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupportRow {
    pub n: usize,
    pub k: usize,
    pub mean: f64,
}

/// Mean test Dice at each support size, ensembling `k` predictions.
pub fn sweep_support_size<T: Scalar>(
    net: &Network<T>,
    archives: &[TaskArchive],
    ns: &[usize],
    k: usize,
    cfg: &InferConfig,
) -> Result<Vec<SupportRow>> {
    let p = plan(archives, Split::Test, cfg)?;
    let mut rows = Vec::with_capacity(ns.len());
    for &n in ns {
        let dice = par_map(cfg.jobs, &p.queries, |&q| {
            let maps =
                (0..k).map(|j| pooled_prediction(net, archives, &p, q, n, j, cfg.seed)).collect::<Result<Vec<_>>>()?;
            score(&average_maps(&maps.iter().collect::<Vec<_>>())?, &archives[q.0].subjects[q.1].1, cfg.threshold)
        })?;
        rows.push(SupportRow { n, k, mean: mean(&dice) });
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub n: usize,
    pub k: usize,
    pub mean: f64,
    pub std: f64,
}

/// For each `(n, k)`, `reps` ensembled evaluations of the test split.
///
/// Each query gets `pool` single predictions (at least `max(ks)`). Repetition
/// 0 averages the first `k`, the same maps `sweep_support_size` uses; later
/// repetitions average random `k`-subsets.
pub fn sweep_ensemble_grid<T: Scalar>(
    net: &Network<T>,
    archives: &[TaskArchive],
    ns: &[usize],
    ks: &[usize],
    reps: usize,
    pool: usize,
    cfg: &InferConfig,
) -> Result<Vec<GridRow>> {
    if reps == 0 || ks.contains(&0) {
        return Err(Error::domain("grid: reps and every k must be at least 1"));
    }
    let p = plan(archives, Split::Test, cfg)?;
    let pool = pool.max(ks.iter().copied().max().unwrap_or(1));
    let mut rows = Vec::with_capacity(ns.len() * ks.len());
    for &n in ns {
        let preds: Vec<Vec<Tensor<T>>> = par_map(cfg.jobs, &p.queries, |&q| {
            (0..pool).map(|j| pooled_prediction(net, archives, &p, q, n, j, cfg.seed)).collect()
        })?;
        for &k in ks {
            let mut rep_means = Vec::with_capacity(reps);
            for r in 0..reps {
                let mut dice = Vec::with_capacity(p.queries.len());
                for (qi, &(t, s)) in p.queries.iter().enumerate() {
                    let chosen: Vec<usize> = if r == 0 {
                        (0..k).collect()
                    } else {
                        let mut g = rng::substream(cfg.seed, &[GRID, n as u64, k as u64, r as u64, t as u64, s as u64]);
                        sample(&mut g, pool, k).into_vec()
                    };
                    let maps: Vec<&Tensor<T>> = chosen.iter().map(|&j| &preds[qi][j]).collect();
                    dice.push(score(&average_maps(&maps)?, &archives[t].subjects[s].1, cfg.threshold)?);
                }
                rep_means.push(mean(&dice));
            }
            rows.push(GridRow { n, k, mean: mean(&rep_means), std: std_dev(&rep_means) });
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LimitedRow {
    /// `None` for the full support split.
    pub pool: Option<usize>,
    pub mean: f64,
    pub std: f64,
}

/// Support restricted to random pools of each size, used whole, without
/// ensembling. A `None` size means the full support split.
pub fn sweep_limited_data<T: Scalar>(
    net: &Network<T>,
    archives: &[TaskArchive],
    pool_sizes: &[Option<usize>],
    reps: usize,
    cfg: &InferConfig,
) -> Result<Vec<LimitedRow>> {
    if reps == 0 || pool_sizes.contains(&Some(0)) {
        return Err(Error::domain("limited-data sweep: reps and pool sizes must be at least 1"));
    }
    let p = plan(archives, Split::Test, cfg)?;
    let mut rows = Vec::with_capacity(pool_sizes.len());
    for &size in pool_sizes {
        // The full pool is the same every repetition.
        let runs = if size.is_none() { 1 } else { reps };
        let mut rep_means = Vec::with_capacity(runs);
        for r in 0..runs {
            let pools: Vec<Vec<usize>> = p
                .pools
                .iter()
                .enumerate()
                .map(|(t, full)| match size {
                    None => Ok(full.clone()),
                    Some(m) if m <= full.len() => {
                        let mut g = rng::substream(cfg.seed, &[POOL, m as u64, r as u64, t as u64]);
                        Ok(sample(&mut g, full.len(), m).into_iter().map(|i| full[i]).collect())
                    }
                    Some(m) => Err(Error::domain(format!("pool size {m} exceeds support split of {}", full.len()))),
                })
                .collect::<Result<_>>()?;
            let dice = par_map(cfg.jobs, &p.queries, |&(t, s)| {
                let a = &archives[t];
                let soft = predict_with(net, &a.subjects[s].0, a, &pools[t])?;
                score(&soft, &a.subjects[s].1, cfg.threshold)
            })?;
            rep_means.push(mean(&dice));
        }
        rows.push(LimitedRow { pool: size, mean: mean(&rep_means), std: std_dev(&rep_means) });
    }
    Ok(rows)
}

pub fn support_csv(rows: &[SupportRow]) -> String {
    let mut s = String::from("n,k,mean_dice\n");
    for r in rows {
        s += &format!("{},{},{}\n", r.n, r.k, r.mean);
    }
    s
}

pub fn grid_csv(rows: &[GridRow]) -> String {
    let mut s = String::from("n,k,mean_dice,std_dice\n");
    for r in rows {
        s += &format!("{},{},{},{}\n", r.n, r.k, r.mean, r.std);
    }
    s
}

pub fn limited_csv(rows: &[LimitedRow]) -> String {
    let mut s = String::from("pool,mean_dice,std_dice\n");
    for r in rows {
        let pool = r.pool.map_or("full".to_string(), |p| p.to_string());
        s += &format!("{pool},{},{}\n", r.mean, r.std);
    }
    s
}

/// 8-bit binary PGM of a `[1, H, W]` map with values in `[0, 1]`.
pub fn write_pgm<T: Scalar>(path: impl AsRef<Path>, map: &Tensor<T>) -> Result<()> {
    let path = path.as_ref();
    let (h, w) = map.hw();
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(map.data().iter().map(|v| (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8));
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}
