use crossseg::augment::{AugmentConfig, Pair};
use crossseg::data::TaskArchive;
use crossseg::rng::substream;
use crossseg::train::*;
use crossseg::{grad_check, Error, NetworkConfig, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Bright disc on a darker background; the label is the disc.
fn disc_task(name: &str, subjects: usize, size: usize, seed: u64) -> TaskArchive {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f32;
    let pairs: Vec<Pair> = (0..subjects)
        .map(|_| {
            let cy = rng.random_range(0.3..0.7) * s;
            let cx = rng.random_range(0.3..0.7) * s;
            let r = rng.random_range(0.15..0.3) * s;
            let lbl = Tensor::from_fn(vec![1, size, size], |i| {
                let (y, x) = ((i / size) as f32 + 0.5 - cy, (i % size) as f32 + 0.5 - cx);
                if y * y + x * x <= r * r {
                    1.0
                } else {
                    0.0
                }
            });
            let noise: Vec<f32> = (0..size * size).map(|_| rng.random_range(-0.05..0.05)).collect();
            let img = Tensor::from_fn(vec![1, size, size], |i| 0.2 + 0.6 * lbl.data()[i] + noise[i]);
            (img, lbl)
        })
        .collect();
    TaskArchive::new(name, "disc", pairs).unwrap()
}

fn tiny_config(seed: u64) -> TrainConfig {
    TrainConfig {
        lr: 1e-3,
        support_size: 2,
        max_steps: 6,
        seed,
        augment: AugmentConfig::default(),
        network: NetworkConfig::with_features(4),
        log_wallclock: false,
        ..Default::default()
    }
}

fn collections(size: usize) -> Vec<Collection> {
    vec![Collection { name: "discs".into(), tasks: vec![disc_task("a", 10, size, 1), disc_task("b", 10, size, 2)] }]
}

fn bits(store: &ParamStore<f32>) -> Vec<u32> {
    store.iter().flat_map(|p| p.value.data().iter().map(|v| v.to_bits())).collect()
}

#[test]
fn adam_with_zero_gradient_keeps_parameters() {
    let mut store = ParamStore::<f64>::new();
    store.add("w", Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
    let mut st = AdamState::new(&store, 0.9, 0.999, 1e-8);
    adam_step(&mut store, &mut st, 1e-2).unwrap();
    assert_eq!(store.iter().next().unwrap().value.data(), &[1.0, -2.0, 0.5]);
    assert_eq!(st.step, 1);
}

#[test]
fn first_adam_step_moves_by_learning_rate() {
    let mut store = ParamStore::<f64>::new();
    let id = store.add("w", Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
    store.get_mut(id).grad = Tensor::new(vec![3], vec![0.3, -4.0, 1e-3]).unwrap();
    let mut st = AdamState::new(&store, 0.9, 0.999, 1e-8);
    adam_step(&mut store, &mut st, 1e-2).unwrap();
    let after = store.get(id).value.data().to_vec();
    let expected = [1.0 - 1e-2, -2.0 + 1e-2, 0.5 - 1e-2];
    for (a, e) in after.iter().zip(expected) {
        assert!((a - e).abs() < 1e-7, "{a} vs {e}");
    }
    adam_step(&mut store, &mut st, 1e-2).unwrap();
    assert_eq!(st.step, 2);
}

#[test]
fn adam_rejects_mismatched_state() {
    let mut a = ParamStore::<f64>::new();
    a.add("w", Tensor::zeros(vec![2]));
    let mut st = AdamState::new(&ParamStore::<f64>::new(), 0.9, 0.999, 1e-8);
    assert!(matches!(adam_step(&mut a, &mut st, 1e-3), Err(Error::Shape(_))));
}

#[test]
fn hierarchical_sampling_is_uniform_over_collections() {
    let t = disc_task("t", 3, 4, 0);
    let cols = vec![
        Collection { name: "small".into(), tasks: vec![t.clone()] },
        Collection { name: "large".into(), tasks: vec![t; 99] },
    ];
    let mut rng = substream(5, &[1]);
    let n = 10_000;
    let mut small = 0;
    let mut seen = [false; 99];
    for _ in 0..n {
        let (c, k) = sample_task_hierarchical(&cols, None, &mut rng).unwrap();
        if c == 0 {
            small += 1;
            assert_eq!(k, 0);
        } else {
            seen[k] = true;
        }
    }
    let frac = small as f64 / n as f64;
    assert!((frac - 0.5).abs() < 0.03, "{frac}");
    assert!(seen.iter().all(|&s| s));

    let mut rng = substream(5, &[2]);
    let w = [3.0, 1.0];
    let hits = (0..n).filter(|_| sample_task_hierarchical(&cols, Some(&w), &mut rng).unwrap().0 == 0).count();
    assert!((hits as f64 / n as f64 - 0.75).abs() < 0.03);
    assert!(sample_task_hierarchical(&cols, Some(&[1.0]), &mut rng).is_err());
    assert!(sample_task_hierarchical(&[], None, &mut rng).is_err());
}

#[test]
fn soft_dice_gradient_matches_finite_differences() {
    let mut store = ParamStore::<f64>::new();
    let id = store.add("logits", Tensor::new(vec![1, 1, 2, 3], vec![0.3, -1.2, 2.0, 0.0, -0.4, 0.9]).unwrap());
    let target = Tensor::new(vec![1, 1, 2, 3], vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
    let rep = grad_check(
        |tape, p| {
            let x = tape.param(p, id);
            let s = tape.sigmoid(x);
            let y = tape.constant(target.clone());
            tape.soft_dice_loss(s, y, SOFT_DICE_EPS)
        },
        &mut store,
        1e-5,
    )
    .unwrap();
    assert!(rep.max_rel_error < 1e-5, "{rep:?}");
    assert_eq!(rep.coordinates, 6);
}

#[test]
fn config_validation() {
    assert_eq!(TrainConfig::default().lr, 1e-4);
    assert_eq!(TrainConfig::default().beta1, 0.9);
    assert_eq!(TrainConfig::default().beta2, 0.999);
    assert!(TrainConfig { lr: 0.0, ..Default::default() }.validate().is_err());
    assert!(TrainConfig { support_size: 0, ..Default::default() }.validate().is_err());
    assert!(TrainConfig { beta2: 1.0, ..Default::default() }.validate().is_err());
    assert!(TrainConfig { task_weights: Some(vec![0.0]), ..Default::default() }.validate().is_err());
    assert!(Trainer::<f32>::new(tiny_config(0), &[]).is_err());
}

#[test]
fn learns_an_easy_task() {
    let cols = vec![Collection { name: "easy".into(), tasks: vec![disc_task("easy", 20, 32, 9)] }];
    let cfg = TrainConfig {
        lr: 1e-3,
        support_size: 4,
        max_steps: 500,
        seed: 3,
        augment: AugmentConfig::disabled(),
        network: NetworkConfig::with_features(16),
        log_wallclock: false,
        ..Default::default()
    };
    let mut tr = Trainer::<f32>::new(cfg, &cols).unwrap();
    let mut log = Vec::new();
    let summary = tr.run(&cols, None, &mut log).unwrap();
    assert_eq!(summary.steps, 500);
    let losses: Vec<f64> =
        String::from_utf8(log).unwrap().lines().map(|l| serde_json::from_str::<LogRecord>(l).unwrap().loss).collect();
    assert_eq!(losses.len(), 500);
    let tail = losses[450..].iter().sum::<f64>() / 50.0;
    assert!(tail < 0.2, "mean loss over the last 50 steps {tail}");
}

#[test]
fn identical_seeds_give_identical_runs() {
    let cols = collections(16);
    let run = || {
        let mut tr = Trainer::<f32>::new(tiny_config(4), &cols).unwrap();
        let mut log = Vec::new();
        tr.run(&cols, None, &mut log).unwrap();
        (log, bits(&tr.net.params))
    };
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    let text = String::from_utf8(a.0).unwrap();
    assert!(!text.contains("wallclock"));
    assert_eq!(text.lines().count(), 6);
}

#[test]
fn resume_is_bit_exact() {
    let cols = collections(16);
    let dir = tempfile::tempdir().unwrap();
    let mut full = Trainer::<f32>::new(tiny_config(7), &cols).unwrap();
    let mut full_log = Vec::new();
    full.run(&cols, None, &mut full_log).unwrap();

    let mut first = Trainer::<f32>::new(TrainConfig { max_steps: 3, ..tiny_config(7) }, &cols).unwrap();
    let mut log = Vec::new();
    first.run(&cols, Some(dir.path()), &mut log).unwrap();
    let mut resumed = Trainer::<f32>::resume(dir.path().join("last.ckpt"), &cols).unwrap();
    assert_eq!(resumed.step, 3);
    assert_eq!(resumed.adam.step, 3);
    resumed.config.max_steps = 6;
    resumed.run(&cols, None, &mut log).unwrap();

    assert_eq!(log, full_log);
    assert_eq!(bits(&resumed.net.params), bits(&full.net.params));
    for (a, b) in resumed.adam.m.iter().zip(&full.adam.m) {
        assert_eq!(a, b);
    }
}

#[test]
fn periodic_evaluation_writes_best_checkpoint() {
    let cols = collections(16);
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig { eval_every: 3, eval_subjects: 2, checkpoint_every: 2, ..tiny_config(1) };
    let mut tr = Trainer::<f32>::new(cfg, &cols).unwrap();
    let mut log = Vec::new();
    let s = tr.run(&cols, Some(dir.path()), &mut log).unwrap();
    let d = s.best_dev_dice.unwrap();
    assert!((0.0..=100.0).contains(&d));
    assert!(matches!(s.best_step, Some(3) | Some(6)));
    assert!(dir.path().join("best.ckpt").exists());
    assert!(dir.path().join("last.ckpt").exists());
    let recs: Vec<LogRecord> =
        String::from_utf8(log).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(recs.iter().filter(|r| r.dev_dice.is_some()).count(), 2);
}

#[test]
fn nan_loss_is_reported_as_divergence() {
    let cols = collections(16);
    let mut tr = Trainer::<f32>::new(tiny_config(2), &cols).unwrap();
    for p in tr.net.params.iter_mut() {
        p.value.data_mut().iter_mut().for_each(|v| *v = f32::NAN);
    }
    match tr.train_step(&cols) {
        Err(Error::Diverged { step, .. }) => assert_eq!(step, 1),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn episodes_depend_only_on_seed_and_step() {
    let cols = collections(16);
    let tr = Trainer::<f32>::new(tiny_config(0), &cols).unwrap();
    let splits: Vec<Vec<_>> = cols.iter().map(|c| c.tasks.iter().map(|t| t.splits_or(0).unwrap()).collect()).collect();
    let a = build_episode(&cols, &splits, &tr.config, &mut substream(0, &[0x53, 4])).unwrap();
    let b = build_episode(&cols, &splits, &tr.config, &mut substream(0, &[0x53, 4])).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.1.len(), 2);
    assert!(a.1.iter().chain(std::iter::once(&a.0)).all(|(_, l)| l.is_binary()));
}
