use crossseg::data::*;
use crossseg::rng::substream;
use crossseg::synth::{gen_task_indexed, SynthConfig};
use crossseg::{DType, Error, Tensor};
use proptest::prelude::*;
use std::collections::BTreeSet;

fn archive(seed: u64, subjects: usize) -> TaskArchive {
    let cfg = SynthConfig { num_subjects: subjects, seed, ..SynthConfig::desk() };
    TaskArchive::from_synthetic(&gen_task_indexed(&cfg, 0).unwrap(), &cfg).unwrap()
}

#[test]
fn ten_subjects_split_six_two_two() {
    let s = split_subjects(10, 4).unwrap();
    assert_eq!((s.support.len(), s.dev.len(), s.test.len()), (6, 2, 2));
    assert_eq!(s, split_subjects(10, 4).unwrap());
    let all: BTreeSet<usize> = s.support.iter().chain(&s.dev).chain(&s.test).copied().collect();
    assert_eq!(all, (0..10).collect());
    assert!(matches!(split_subjects(2, 0), Err(Error::Domain(_))));
}

#[test]
fn remainder_goes_to_support_then_dev() {
    let sizes = |n| {
        let s = split_subjects(n, 0).unwrap();
        (s.support.len(), s.dev.len(), s.test.len())
    };
    assert_eq!(sizes(100), (60, 20, 20));
    assert_eq!(sizes(11), (7, 2, 2));
    assert_eq!(sizes(12), (8, 2, 2));
    assert_eq!(sizes(3), (1, 1, 1));
}

#[test]
fn episodes_exclude_the_query_and_repeat_subjects() {
    let a = archive(1, 10);
    let split: Vec<usize> = (0..10).collect();
    let mut rng = substream(1, &[]);
    let mut repeated = false;
    for _ in 0..200 {
        let e = sample_episode(&a, &split, 64, &mut rng).unwrap();
        assert_eq!(e.support.len(), 64);
        assert!(!e.support_indices.contains(&e.query_index));
        assert_eq!(e.query, a.subjects[e.query_index]);
        let distinct: BTreeSet<_> = e.support_indices.iter().collect();
        repeated |= distinct.len() < e.support_indices.len();
    }
    assert!(repeated);
    assert!(sample_episode(&a, &[3], 4, &mut rng).is_err());
    assert!(sample_episode(&a, &split, 0, &mut rng).is_err());
}

#[test]
fn episode_sampling_covers_the_split() {
    let a = archive(2, 20);
    let splits = a.splits_or(3).unwrap();
    let mut rng = substream(2, &[]);
    let mut seen = BTreeSet::new();
    for _ in 0..10_000 {
        let e = sample_episode(&a, &splits.support, 1, &mut rng).unwrap();
        seen.insert(e.query_index);
        seen.extend(e.support_indices);
    }
    assert_eq!(seen, splits.support.iter().copied().collect());
}

#[test]
fn normalization() {
    let x = vec![0.0, 0.25, 1.0, 0.5];
    assert_eq!(normalize_image(&x, Normalize::MinMax).unwrap(), x);
    assert_eq!(normalize_image(&[10.0, 20.0, 30.0], Normalize::MinMax).unwrap(), vec![0.0, 0.5, 1.0]);
    assert_eq!(normalize_image(&[7.0; 5], Normalize::MinMax).unwrap(), vec![0.0; 5]);
    let mut raw: Vec<f64> = (0..1000).map(|i| i as f64).collect();
    raw.push(1e6);
    let out = normalize_image(&raw, Normalize::PercentileClip { lo: 0.5, hi: 99.5 }).unwrap();
    assert_eq!(out[1000], 1.0);
    assert_eq!(out[0], 0.0);
    assert!((0.45..0.55).contains(&out[500]));
    assert!(normalize_image(&[], Normalize::MinMax).is_err());
}

#[test]
fn archive_round_trip_is_bit_exact() {
    let a = archive(3, 12).with_splits(5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    a.save(dir.path()).unwrap();
    let b = TaskArchive::load(dir.path()).unwrap();
    assert_eq!(a, b);
    assert_eq!(b.splits.as_ref().unwrap(), &split_subjects(12, 5).unwrap());
    let m: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    for key in ["name", "size", "subjects", "label_desc", "seed", "split_seed", "splits"] {
        assert!(m.get(key).is_some(), "{key}");
    }
    assert_eq!(load_collection(dir.path()).unwrap(), vec![b]);
}

#[test]
fn tampered_archives_are_rejected() {
    let a = archive(4, 5);
    let dir = tempfile::tempdir().unwrap();
    a.save(dir.path()).unwrap();
    let path = dir.path().join("manifest.json");
    let text = std::fs::read_to_string(&path).unwrap();
    std::fs::write(&path, text.replace("\"subjects\": 5", "\"subjects\": 6")).unwrap();
    assert!(matches!(TaskArchive::load(dir.path()), Err(Error::Validation(_))));
    std::fs::write(&path, &text).unwrap();
    let img = dir.path().join("img_2.uvsg");
    let mut bytes = std::fs::read(&img).unwrap();
    bytes[0] = b'X';
    std::fs::write(&img, &bytes).unwrap();
    assert!(matches!(TaskArchive::load(dir.path()), Err(Error::Format(_))));
    bytes[0] = b'U';
    std::fs::write(&img, &bytes).unwrap();
    Tensor::<f32>::zeros(vec![1, 16, 16]).save(dir.path().join("lbl_1.uvsg"), DType::U8).unwrap();
    assert!(TaskArchive::load(dir.path()).is_err());
}

#[test]
fn archive_invariants() {
    let img = Tensor::<f32>::zeros(vec![1, 8, 8]);
    let bad = Tensor::<f32>::full(vec![1, 8, 8], 0.5);
    assert!(TaskArchive::new("x", "y", vec![(img.clone(), bad)]).is_err());
    let other = Tensor::<f32>::zeros(vec![1, 4, 4]);
    assert!(TaskArchive::new("x", "y", vec![(img.clone(), img.clone()), (other.clone(), other)]).is_err());
    assert!(TaskArchive::new("x", "y", vec![]).is_err());
    let loud = Tensor::<f32>::full(vec![1, 8, 8], 1.5);
    assert!(TaskArchive::new("x", "y", vec![(loud, img)]).is_err());
}

#[test]
fn label_files_are_little_endian_u8() {
    let a = archive(5, 3);
    let dir = tempfile::tempdir().unwrap();
    a.save(dir.path()).unwrap();
    let bytes = std::fs::read(dir.path().join("lbl_0.uvsg")).unwrap();
    assert_eq!(&bytes[..4], b"UVSG");
    assert_eq!(bytes[5], 2);
    assert_eq!(&bytes[7..11], &1u32.to_le_bytes());
    assert_eq!(&bytes[11..15], &32u32.to_le_bytes());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn splits_partition_every_subject(n in 3usize..200, seed in any::<u64>()) {
        let s = split_subjects(n, seed).unwrap();
        let mut all: Vec<usize> = s.support.iter().chain(&s.dev).chain(&s.test).copied().collect();
        all.sort();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert!(!s.dev.is_empty() && !s.test.is_empty());
        prop_assert!(s.support.len() >= s.dev.len() && s.dev.len() >= s.test.len());
    }

    #[test]
    fn normalized_values_span_the_unit_interval(raw in prop::collection::vec(-1e3f64..1e3, 2..50)) {
        let out = normalize_image(&raw, Normalize::MinMax).unwrap();
        prop_assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
        if raw.iter().any(|&v| v != raw[0]) {
            prop_assert!(out.contains(&0.0) && out.contains(&1.0));
        }
    }
}
