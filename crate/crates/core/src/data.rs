//! Task archives, subject splits, episode sampling and intensity normalization.
//!
//! An archive is a directory holding `manifest.json` plus one `img_<i>.uvsg`
//! (f32) and one `lbl_<i>.uvsg` (u8) file per subject.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::augment::Pair;
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::scalar::DType;
use crate::synth::SyntheticTask;
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.json";

/// Disjoint subject index lists.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub support: Vec<usize>,
    pub dev: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Support,
    Dev,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "support" => Ok(Split::Support),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            _ => Err(Error::config(format!("unknown split {s:?}"))),
        }
    }
}

impl Splits {
    pub fn get(&self, split: Split) -> &[usize] {
        match split {
            Split::Support => &self.support,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }
}

/// On-disk manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub size: usize,
    pub subjects: usize,
    pub label_desc: String,
    pub seed: Option<u64>,
    pub split_seed: Option<u64>,
    pub splits: Option<Splits>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<serde_json::Value>,
}

/// One task: ordered subjects of equal square size.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskArchive {
    pub name: String,
    pub size: usize,
    pub label_desc: String,
    pub seed: Option<u64>,
    pub source: Option<serde_json::Value>,
    pub split_seed: Option<u64>,
    pub splits: Option<Splits>,
    pub subjects: Vec<Pair>,
}

impl TaskArchive {
    /// Builds an archive and checks its invariants.
    pub fn new(name: impl Into<String>, label_desc: impl Into<String>, subjects: Vec<Pair>) -> Result<Self> {
        let size = subjects.first().map(|(i, _)| i.hw().0).unwrap_or(0);
        let a = Self {
            name: name.into(),
            size,
            label_desc: label_desc.into(),
            seed: None,
            source: None,
            split_seed: None,
            splits: None,
            subjects,
        };
        a.validate()?;
        Ok(a)
    }

    pub fn from_synthetic(task: &SyntheticTask, config: &crate::synth::SynthConfig) -> Result<Self> {
        let mut a = Self::new(
            format!("synth_{:05}", task.id),
            format!("synthetic region {} of {}", task.foreground, config.num_shapes),
            task.subjects.clone(),
        )?;
        a.seed = Some(task.seed);
        a.source = Some(serde_json::json!({ "generator": "synth", "task_index": task.id, "config": config }));
        Ok(a)
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.subjects.is_empty() {
            return Err(Error::Validation(format!("archive {}: no subjects", self.name)));
        }
        for (i, (img, lbl)) in self.subjects.iter().enumerate() {
            let want = [1, self.size, self.size];
            if img.shape() != want || lbl.shape() != want {
                return Err(Error::Validation(format!(
                    "archive {}: subject {i} has shapes {:?}/{:?}, expected {want:?}",
                    self.name,
                    img.shape(),
                    lbl.shape()
                )));
            }
            if !lbl.is_binary() {
                return Err(Error::Validation(format!("archive {}: subject {i} label is not binary", self.name)));
            }
            if img.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Validation(format!("archive {}: subject {i} image outside [0, 1]", self.name)));
            }
        }
        if let Some(s) = &self.splits {
            check_partition(s, self.len()).map_err(|m| Error::Validation(format!("archive {}: {m}", self.name)))?;
        }
        Ok(())
    }

    /// Stored splits, or a fresh split under `seed`.
    pub fn splits_or(&self, seed: u64) -> Result<Splits> {
        match &self.splits {
            Some(s) => Ok(s.clone()),
            None => split_subjects(self.len(), seed),
        }
    }

    /// Assigns splits under `seed`.
    pub fn with_splits(mut self, seed: u64) -> Result<Self> {
        self.splits = Some(split_subjects(self.len(), seed)?);
        self.split_seed = Some(seed);
        Ok(self)
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            name: self.name.clone(),
            size: self.size,
            subjects: self.len(),
            label_desc: self.label_desc.clone(),
            seed: self.seed,
            split_seed: self.split_seed,
            splits: self.splits.clone(),
            source: self.source.clone(),
        }
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        self.validate()?;
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (i, (img, lbl)) in self.subjects.iter().enumerate() {
            img.save(dir.join(format!("img_{i}.uvsg")), DType::F32)?;
            lbl.save(dir.join(format!("lbl_{i}.uvsg")), DType::U8)?;
        }
        let path = dir.join(MANIFEST);
        let text = serde_json::to_string_pretty(&self.manifest())?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: Manifest = serde_json::from_str(&text)?;
        let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        let mut files = 0;
        for e in entries {
            let e = e.map_err(|e| Error::io(dir, e))?;
            let n = e.file_name();
            let n = n.to_string_lossy();
            if n.starts_with("img_") && n.ends_with(".uvsg") {
                files += 1;
            }
        }
        if files != m.subjects {
            return Err(Error::Validation(format!(
                "archive {}: manifest lists {} subjects but {files} image files exist",
                m.name, m.subjects
            )));
        }
        let mut subjects = Vec::with_capacity(m.subjects);
        for i in 0..m.subjects {
            let img = Tensor::<f32>::load(dir.join(format!("img_{i}.uvsg")))?;
            let lbl = Tensor::<f32>::load(dir.join(format!("lbl_{i}.uvsg")))?;
            subjects.push((img, lbl));
        }
        let a = Self {
            name: m.name,
            size: m.size,
            label_desc: m.label_desc,
            seed: m.seed,
            source: m.source,
            split_seed: m.split_seed,
            splits: m.splits,
            subjects,
        };
        a.validate()?;
        Ok(a)
    }
}

fn check_partition(s: &Splits, n: usize) -> std::result::Result<(), String> {
    let mut seen = vec![false; n];
    for &i in s.support.iter().chain(&s.dev).chain(&s.test) {
        if i >= n || std::mem::replace(&mut seen[i], true) {
            return Err(format!("split index {i} out of range or repeated"));
        }
    }
    if seen.iter().any(|s| !s) {
        return Err("splits do not cover every subject".into());
    }
    Ok(())
}

/// Seeded shuffle, then 60/20/20 by count. Leftover subjects go to support,
/// then dev, then test.
pub fn split_subjects(n: usize, seed: u64) -> Result<Splits> {
    if n < 3 {
        return Err(Error::domain(format!("split: need at least 3 subjects, got {n}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::rng_from_seed(seed));
    let mut sizes = [n * 6 / 10, n * 2 / 10, n * 2 / 10];
    let mut k = 0;
    while sizes.iter().sum::<usize>() < n {
        sizes[k % 3] += 1;
        k += 1;
    }
    // Tiny archives still get one subject per split.
    for j in 1..3 {
        if sizes[j] == 0 {
            sizes[j] = 1;
            sizes[0] -= 1;
        }
    }
    let test = idx.split_off(sizes[0] + sizes[1]);
    let dev = idx.split_off(sizes[0]);
    Ok(Splits { support: idx, dev, test })
}

/// A query and its support set.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub query: Pair,
    pub support: Vec<Pair>,
    pub query_index: usize,
    pub support_indices: Vec<usize>,
}

/// `n` draws with replacement from `pool` excluding `exclude`.
pub fn draw_support(pool: &[usize], exclude: Option<usize>, n: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    let candidates: Vec<usize> = pool.iter().copied().filter(|&i| Some(i) != exclude).collect();
    if candidates.is_empty() {
        return Err(Error::domain("support pool is empty after excluding the query"));
    }
    Ok((0..n).map(|_| candidates[rng.random_range(0..candidates.len())]).collect())
}

/// Query uniform from `split`; support of size `n` with replacement from the
/// rest of the split.
pub fn sample_episode(archive: &TaskArchive, split: &[usize], n: usize, rng: &mut Rng) -> Result<Episode> {
    if n == 0 {
        return Err(Error::domain("episode: support size must be at least 1"));
    }
    if split.len() < 2 {
        return Err(Error::domain(format!("episode: split of {} subjects cannot exclude the query", split.len())));
    }
    if let Some(&bad) = split.iter().find(|&&i| i >= archive.len()) {
        return Err(Error::domain(format!("episode: subject {bad} out of range")));
    }
    let query_index = split[rng.random_range(0..split.len())];
    let support_indices = draw_support(split, Some(query_index), n, rng)?;
    Ok(Episode {
        query: archive.subjects[query_index].clone(),
        support: support_indices.iter().map(|&i| archive.subjects[i].clone()).collect(),
        query_index,
        support_indices,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalize {
    MinMax,
    /// Clip to the given percentiles (0..100), then min-max.
    PercentileClip {
        lo: f64,
        hi: f64,
    },
}

/// Linear-interpolated percentile of sorted values.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let (i, f) = (pos.floor() as usize, pos.fract());
    if i + 1 < sorted.len() {
        sorted[i] + f * (sorted[i + 1] - sorted[i])
    } else {
        sorted[sorted.len() - 1]
    }
}

/// Rescales raw intensities to `[0, 1]`. A constant input maps to zeros.
pub fn normalize_image(raw: &[f64], mode: Normalize) -> Result<Vec<f64>> {
    if raw.is_empty() {
        return Err(Error::domain("normalize: empty image"));
    }
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("normalize: input".into()));
    }
    let (lo, hi) = match mode {
        Normalize::MinMax => raw.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v))),
        Normalize::PercentileClip { lo, hi } => {
            if !(0.0 <= lo && lo < hi && hi <= 100.0) {
                return Err(Error::config(format!("normalize: bad percentiles {lo}, {hi}")));
            }
            let mut s = raw.to_vec();
            s.sort_by(f64::total_cmp);
            (percentile(&s, lo), percentile(&s, hi))
        }
    };
    if hi <= lo {
        return Ok(vec![0.0; raw.len()]);
    }
    Ok(raw.iter().map(|&v| ((v.clamp(lo, hi) - lo) / (hi - lo)).clamp(0.0, 1.0)).collect())
}

/// Archive directories at `root`: `root` itself if it holds a manifest,
/// otherwise its immediate subdirectories that do, sorted by name.
pub fn archive_dirs(root: impl AsRef<Path>) -> Result<Vec<std::path::PathBuf>> {
    let root = root.as_ref();
    if root.join(MANIFEST).exists() {
        return Ok(vec![root.to_path_buf()]);
    }
    let mut dirs = Vec::new();
    for e in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let p = e.map_err(|e| Error::io(root, e))?.path();
        if p.join(MANIFEST).exists() {
            dirs.push(p);
        }
    }
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Validation(format!("no task archives under {}", root.display())));
    }
    Ok(dirs)
}

/// Loads every archive found by [`archive_dirs`].
pub fn load_collection(root: impl AsRef<Path>) -> Result<Vec<TaskArchive>> {
    archive_dirs(root)?.iter().map(TaskArchive::load).collect()
}
