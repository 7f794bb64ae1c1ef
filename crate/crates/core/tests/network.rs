use crossseg::net::network_grad_check;
use crossseg::{Error, Network, Network32, NetworkConfig, Reduction, SupportPair, Tensor, Tensor32};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny(seed: u64) -> Network32 {
    Network::init(NetworkConfig::with_features(4), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn episode(rng: &mut ChaCha8Rng, n: usize, s: usize) -> (Tensor32, Vec<SupportPair<f32>>) {
    let img = |rng: &mut ChaCha8Rng| Tensor::from_fn(vec![1, s, s], |_| rng.random::<f32>());
    let q = img(rng);
    let sup = (0..n)
        .map(|_| {
            let i = img(rng);
            let l = Tensor::from_fn(vec![1, s, s], |_| rng.random_bool(0.4) as u8 as f32);
            (i, l)
        })
        .collect();
    (q, sup)
}

#[test]
fn default_parameter_count_is_near_reported_size() {
    let net = Network32::init(NetworkConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let n = net.num_parameters();
    assert_eq!(n, 1_182_529);
    assert!((n as f64 - 1.18e6).abs() <= 0.15 * 1.18e6);
    let again = Network32::init(NetworkConfig::default(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(again.num_parameters(), n);
}

#[test]
fn same_seed_gives_identical_parameters() {
    assert_eq!(tiny(4).params, tiny(4).params);
    assert_ne!(tiny(4).params, tiny(5).params);
}

#[test]
fn init_bounds_and_zero_biases() {
    let net = tiny(6);
    for p in net.params.iter() {
        if p.name.ends_with(".bias") {
            assert!(p.value.data().iter().all(|&b| b == 0.0));
        } else {
            let s = p.value.shape();
            let bound = (1.0 / (s[1] * s[2] * s[3]) as f64).sqrt() as f32;
            assert!(p.value.data().iter().all(|w| w.abs() <= bound));
        }
    }
}

#[test]
fn output_shape_for_sizes_and_support_sizes() {
    let net = tiny(1);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (n, s) in [(1, 16), (4, 32), (2, 64), (1, 128), (64, 16)] {
        let (q, sup) = episode(&mut rng, n, s);
        assert_eq!(net.predict_logits(&q, &sup).unwrap().shape(), [1, s, s]);
    }
}

#[test]
fn rejected_inputs() {
    let net = tiny(2);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (q, sup) = episode(&mut rng, 2, 32);
    assert!(matches!(net.predict_logits(&q, &[]), Err(Error::Domain(_))));
    let (q24, sup24) = episode(&mut rng, 1, 24);
    assert!(matches!(net.predict_logits(&q24, &sup24), Err(Error::Config(_))));
    let mut bad = sup.clone();
    bad[0].1.data_mut()[0] = 0.5;
    assert!(matches!(net.predict_logits(&q, &bad), Err(Error::Domain(_))));
    let mut lax = NetworkConfig::with_features(4);
    lax.strict_labels = false;
    let lax = Network32::init(lax, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    assert!(lax.predict_logits(&q, &bad).is_ok());
    let (q16, _) = episode(&mut rng, 1, 16);
    assert!(matches!(net.predict_logits(&q16, &sup), Err(Error::Shape(_))));
}

#[test]
fn duplicated_support_matches_single_pair() {
    let net = tiny(3);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (q, sup) = episode(&mut rng, 1, 32);
    let one = net.predict_logits(&q, &sup).unwrap();
    let many = net.predict_logits(&q, &vec![sup[0].clone(); 7]).unwrap();
    assert_eq!(one, many);
}

#[test]
fn soft_predictions() {
    let net = tiny(4);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (q, sup) = episode(&mut rng, 3, 32);
    let logits = net.predict_logits(&q, &sup).unwrap();
    let soft = net.predict_soft(&q, &sup).unwrap();
    assert!(soft.data().iter().all(|&p| p > 0.0 && p < 1.0));
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits.data()[a].total_cmp(&logits.data()[b]));
    assert!(order.windows(2).all(|w| soft.data()[w[0]] <= soft.data()[w[1]]));

    let mut zero = tiny(4);
    for p in zero.params.iter_mut() {
        p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    assert!(zero.predict_soft(&q, &sup).unwrap().data().iter().all(|&p| p == 0.5));
}

#[test]
fn one_parameter_set_runs_at_three_sizes() {
    let net = Network32::init(NetworkConfig::with_features(8), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for s in [32, 64, 128] {
        let (q, sup) = episode(&mut rng, 2, s);
        let y = net.predict_soft(&q, &sup).unwrap();
        assert!(y.check_finite("soft").is_ok());
    }
}

#[test]
fn checkpoint_round_trip() {
    let net = tiny(6);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("n.ckpt");
    net.save(&p).unwrap();
    let back = Network32::load(&p).unwrap();
    assert_eq!(back.params, net.params);
    assert_eq!(back.config, net.config);
}

#[test]
fn f64_network_agrees_with_f32() {
    let net = tiny(7);
    let wide = net.cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (q, sup) = episode(&mut rng, 3, 16);
    let a = net.predict_soft(&q, &sup).unwrap();
    let sup64: Vec<SupportPair<f64>> = sup.iter().map(|(i, l)| (i.cast(), l.cast())).collect();
    let b = wide.predict_soft(&q.cast(), &sup64).unwrap();
    assert!(a.cast::<f64>().max_abs_diff(&b) < 1e-5);
}

#[test]
fn full_network_gradient_check() {
    let rep = network_grad_check(16, 2, 4, 0, 1e-3).unwrap();
    assert!(rep.max_rel_error < 1e-3, "{rep:?}");
    assert!(2 * rep.kinks <= rep.coordinates, "{rep:?}");
    assert!(matches!(network_grad_check(24, 2, 4, 0, 1e-3), Err(Error::Config(_))));
    assert_eq!(network_grad_check(16, 2, 4, 0, 1e-3).unwrap(), rep);
}

fn permutation_gap(net: &Network32, seed: u64, n: usize, s: usize) -> f32 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (q, sup) = episode(&mut rng, n, s);
    let base = net.predict_logits(&q, &sup).unwrap();
    let mut perm = sup.clone();
    perm.reverse();
    perm.rotate_left(rng.random_range(0..n));
    net.predict_logits(&q, &perm).unwrap().max_abs_diff(&base)
}

#[test]
fn support_order_does_not_matter() {
    let net = tiny(8);
    for (i, n) in [2, 3, 8].into_iter().enumerate() {
        assert_eq!(permutation_gap(&net, i as u64, n, 32), 0.0);
        assert_eq!(permutation_gap(&net, 10 + i as u64, n, 64), 0.0);
    }
    let mut cfg = NetworkConfig::with_features(4);
    cfg.reduction = Reduction::InputOrder;
    let loose = Network32::init(cfg, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
    assert!(permutation_gap(&loose, 3, 8, 32) < 1e-5);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn permutation_invariance(seed in any::<u64>(), n in 2usize..6) {
        let net = tiny(seed % 7);
        prop_assert_eq!(permutation_gap(&net, seed, n, 32), 0.0);
    }

    #[test]
    fn variable_support_size_accepted(n in 1usize..65) {
        let net = tiny(9);
        let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
        let (q, sup) = episode(&mut rng, n, 16);
        let y = net.predict_logits(&q, &sup).unwrap();
        prop_assert_eq!(y.shape(), &[1, 16, 16]);
    }
}
