use std::fs::{self, File, OpenOptions};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use crossseg::augment::AugmentConfig;
use crossseg::data::{archive_dirs, load_collection, Split, TaskArchive};
use crossseg::eval::{
    ensemble_predict, evaluate, grid_csv, limited_csv, support_csv, sweep_ensemble_grid, sweep_limited_data,
    sweep_support_size, threshold, write_pgm, InferConfig,
};
use crossseg::net::network_grad_check;
use crossseg::rng;
use crossseg::synth::{gen_corpus, SynthConfig};
use crossseg::train::{Collection, TrainConfig, Trainer};
use crossseg::{DType, Error, Network32, NetworkConfig, Result, Tensor32};

use crate::manifest::{hash_dir, hash_file, RunManifest};
use crate::{AugmentMode, EvalArgs, GradcheckArgs, PredictArgs, Preset, Sweep, SynthGenArgs, TrainArgs};

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::Io { path: p.into(), source: e })
}

fn write(path: PathBuf, text: String) -> Result<()> {
    fs::write(&path, text).map_err(|e| Error::Io { path, source: e })
}

fn hash_archives(m: &mut RunManifest, roots: &[PathBuf]) -> Result<()> {
    for root in roots {
        for dir in archive_dirs(root)? {
            let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            m.corpus_hashes.insert(name, hash_dir(&dir)?);
        }
    }
    Ok(())
}

pub fn synth_gen(a: SynthGenArgs) -> Result<ExitCode> {
    let mut cfg = match a.preset {
        Preset::Default => SynthConfig::default(),
        Preset::Desk => SynthConfig::desk(),
    };
    cfg.num_tasks = a.tasks.unwrap_or(cfg.num_tasks);
    cfg.num_subjects = a.subjects.unwrap_or(cfg.num_subjects);
    cfg.image_size = a.size.unwrap_or(cfg.image_size);
    cfg.num_shapes = a.shapes.unwrap_or(cfg.num_shapes);
    cfg.deform_alpha = a.deform_alpha.unwrap_or(cfg.deform_alpha);
    cfg.deform_sigma = a.deform_sigma.unwrap_or(cfg.deform_sigma);
    cfg.seed = a.seed;
    cfg.validate()?;
    let split_seed = a.split_seed.unwrap_or(a.seed);
    mkdir(&a.out)?;
    let tasks = gen_corpus(&cfg, a.start..a.start + cfg.num_tasks, a.jobs)?;
    let mut names = Vec::with_capacity(tasks.len());
    for t in &tasks {
        let archive = TaskArchive::from_synthetic(t, &cfg)?.with_splits(split_seed)?;
        archive.save(a.out.join(&archive.name))?;
        names.push(archive.name);
    }
    let corpus = serde_json::json!({ "config": cfg, "start": a.start, "split_seed": split_seed, "tasks": names });
    write(a.out.join("corpus.json"), serde_json::to_string_pretty(&corpus)? + "\n")?;
    let mut m = RunManifest::new("synth-gen", a.seed, corpus);
    hash_archives(&mut m, std::slice::from_ref(&a.out))?;
    m.write(&a.out)?;
    println!("wrote {} tasks to {}", names.len(), a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn load_collections(roots: &[PathBuf]) -> Result<Vec<Collection>> {
    roots.iter().map(|r| Ok(Collection { name: r.display().to_string(), tasks: load_collection(r)? })).collect()
}

fn train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut c = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Io { path: p.clone(), source: e })?;
            serde_json::from_str(&text)?
        }
        None => TrainConfig::default(),
    };
    c.support_size = a.support.unwrap_or(c.support_size);
    c.lr = a.lr.unwrap_or(c.lr);
    c.max_steps = a.steps.unwrap_or(c.max_steps);
    c.batch_size = a.batch.unwrap_or(c.batch_size);
    if let Some(f) = a.features {
        c.network.features = f;
    }
    c.eval_every = a.eval_every.unwrap_or(c.eval_every);
    c.checkpoint_every = a.checkpoint_every.unwrap_or(c.checkpoint_every);
    match a.augment {
        Some(AugmentMode::Full) => c.augment = AugmentConfig::default(),
        Some(AugmentMode::InTask) => c.augment = AugmentConfig::in_task_only(),
        Some(AugmentMode::None) => c.augment = AugmentConfig::disabled(),
        None => {}
    }
    if a.task_weights.is_some() {
        c.task_weights = a.task_weights.clone();
    }
    if let Some(s) = a.seed {
        c.seed = s;
        c.split_seed = s;
    }
    if a.no_wallclock {
        c.log_wallclock = false;
    }
    Ok(c)
}

pub fn train(a: TrainArgs) -> Result<ExitCode> {
    let collections = load_collections(&a.corpus)?;
    mkdir(&a.out)?;
    let log_path = a.out.join("train_log.jsonl");
    let (mut trainer, log_file) = match &a.resume {
        Some(ck) => {
            let mut t = Trainer::<f32>::resume(ck, &collections)?;
            if let Some(s) = a.steps {
                t.config.max_steps = s;
            }
            let f = OpenOptions::new()
                .append(true)
                .create(true)
                .open(&log_path)
                .map_err(|e| Error::Io { path: log_path.clone(), source: e })?;
            (t, f)
        }
        None => {
            let t = Trainer::<f32>::new(train_config(&a)?, &collections)?;
            let f = File::create(&log_path).map_err(|e| Error::Io { path: log_path.clone(), source: e })?;
            (t, f)
        }
    };
    let mut m = RunManifest::new("train", trainer.config.seed, serde_json::to_value(&trainer.config)?);
    hash_archives(&mut m, &a.corpus)?;
    if let Some(ck) = &a.resume {
        m.config["resumed_from"] = serde_json::Value::String(hash_file(ck)?);
    }
    let mut log = BufWriter::new(log_file);
    let summary = trainer.run(&collections, Some(&a.out), &mut log)?;
    m.checkpoint_hash = Some(hash_file(&a.out.join("last.ckpt"))?);
    m.write(&a.out)?;
    println!("{}", serde_json::to_string(&summary)?);
    Ok(ExitCode::SUCCESS)
}

fn split_arg(s: &str) -> Result<Split> {
    s.parse()
}

pub fn predict(a: PredictArgs) -> Result<ExitCode> {
    let net = Network32::load(&a.checkpoint)?;
    let archive = TaskArchive::load(&a.support_archive)?;
    let mut query = Tensor32::load(&a.query)?;
    if query.rank() == 2 {
        let s = query.shape().to_vec();
        query = query.reshape(vec![1, s[0], s[1]])?;
    }
    if query.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Validation("query image must lie in [0, 1]".into()));
    }
    let cfg =
        InferConfig { support_size: a.n, ensemble: a.k, threshold: a.threshold, seed: a.seed, ..Default::default() };
    cfg.validate()?;
    let pool: Vec<usize> = match &a.split {
        Some(s) => archive.splits_or(cfg.split_seed)?.get(split_arg(s)?).to_vec(),
        None => (0..archive.len()).collect(),
    };
    let mut r = rng::substream(a.seed, &[0x51]);
    let soft = ensemble_predict(&net, &query, &archive, &pool, None, a.n, a.k, &mut r)?;
    soft.check_finite("prediction")?;
    let hard = threshold(&soft, a.threshold);
    mkdir(&a.out)?;
    soft.save(a.out.join("soft.uvsg"), DType::F32)?;
    hard.save(a.out.join("binary.uvsg"), DType::U8)?;
    write_pgm(a.out.join("soft.pgm"), &soft)?;
    write_pgm(a.out.join("binary.pgm"), &hard)?;
    let mut m = RunManifest::new("predict", a.seed, serde_json::json!({ "infer": cfg, "split": a.split }));
    m.corpus_hashes.insert(archive.name.clone(), hash_dir(&a.support_archive)?);
    m.corpus_hashes.insert("query".into(), hash_file(&a.query)?);
    m.checkpoint_hash = Some(hash_file(&a.checkpoint)?);
    m.write(&a.out)?;
    println!("foreground pixels: {}", hard.sum());
    Ok(ExitCode::SUCCESS)
}

pub fn eval(a: EvalArgs) -> Result<ExitCode> {
    let net = Network32::load(&a.checkpoint)?;
    let mut archives = Vec::new();
    for root in &a.archive {
        archives.extend(load_collection(root)?);
    }
    let split = split_arg(&a.split)?;
    let cfg = InferConfig {
        support_size: a.n,
        ensemble: a.k,
        threshold: a.threshold,
        seed: a.seed,
        bootstrap: a.bootstrap,
        jobs: a.jobs,
        ..Default::default()
    };
    cfg.validate()?;
    mkdir(&a.out)?;
    let report = evaluate(&net, &archives, split, &cfg)?;
    write(a.out.join("report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    println!(
        "mean dice {:.3} (bootstrap std {:.3}) over {} subjects",
        report.mean,
        report.bootstrap_std,
        report.scores.len()
    );
    let mut outputs = serde_json::Map::new();
    for sweep in &a.sweep {
        match sweep {
            Sweep::SupportSize => {
                let rows = sweep_support_size(&net, &archives, &a.ns, a.k, &cfg)?;
                check_rows(rows.iter().map(|r| r.mean))?;
                write(a.out.join("support_size.csv"), support_csv(&rows))?;
                outputs.insert("support_size".into(), serde_json::to_value(&rows)?);
            }
            Sweep::EnsembleGrid => {
                let rows = sweep_ensemble_grid(&net, &archives, &a.ns, &a.ks, a.reps, a.grid_pool, &cfg)?;
                check_rows(rows.iter().flat_map(|r| [r.mean, r.std]))?;
                write(a.out.join("ensemble_grid.csv"), grid_csv(&rows))?;
                outputs.insert("ensemble_grid".into(), serde_json::to_value(&rows)?);
            }
            Sweep::LimitedData => {
                let pools = a
                    .pools
                    .iter()
                    .map(|p| match p.as_str() {
                        "full" => Ok(None),
                        s => s.parse().map(Some).map_err(|_| Error::Config(format!("bad pool size {s:?}"))),
                    })
                    .collect::<Result<Vec<_>>>()?;
                let rows = sweep_limited_data(&net, &archives, &pools, a.reps, &cfg)?;
                check_rows(rows.iter().flat_map(|r| [r.mean, r.std]))?;
                write(a.out.join("limited_data.csv"), limited_csv(&rows))?;
                outputs.insert("limited_data".into(), serde_json::to_value(&rows)?);
            }
        }
    }
    let snapshot = serde_json::json!({
        "infer": cfg,
        "split": split,
        "sweeps": outputs.keys().collect::<Vec<_>>(),
        "ns": a.ns,
        "ks": a.ks,
        "reps": a.reps,
        "grid_pool": a.grid_pool,
        "pools": a.pools,
    });
    let mut m = RunManifest::new("eval", a.seed, snapshot);
    hash_archives(&mut m, &a.archive)?;
    m.checkpoint_hash = Some(hash_file(&a.checkpoint)?);
    m.write(&a.out)?;
    Ok(ExitCode::SUCCESS)
}

fn check_rows(values: impl Iterator<Item = f64>) -> Result<()> {
    for v in values {
        if !v.is_finite() {
            return Err(Error::NonFinite("sweep produced a non-finite score".into()));
        }
    }
    Ok(())
}

pub fn gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    NetworkConfig::with_features(a.features).validate()?;
    let rep = network_grad_check(a.size, a.support, a.features, a.seed, a.eps)?;
    // Coordinates whose perturbation crosses an activation kink are skipped;
    // too many of them would leave the check vacuous.
    let passed = rep.max_rel_error < a.tolerance && 2 * rep.kinks <= rep.coordinates;
    let out = serde_json::json!({
        "size": a.size,
        "support": a.support,
        "features": a.features,
        "seed": a.seed,
        "eps": a.eps,
        "coordinates": rep.coordinates,
        "kinks": rep.kinks,
        "max_rel_error": rep.max_rel_error,
        "worst": rep.worst,
        "tolerance": a.tolerance,
        "passed": passed,
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(if passed { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}
