use crossseg::kernels::{self, ConvGeom, Reduction};
use crossseg::{grad_check, DType, Error, Padding, ParamId, ParamStore, Tape, Tensor, Tensor64, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor64 {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Straightforward cross-correlation with zero padding, one output at a time.
fn reference_conv(x: &Tensor64, w: &Tensor64, b: &[f64], pad: usize) -> Tensor64 {
    let (c_in, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (c_out, k) = (w.shape()[0], w.shape()[2]);
    let (oh, ow) = (h + 2 * pad - k + 1, wd + 2 * pad - k + 1);
    let mut out = vec![0.0; c_out * oh * ow];
    for o in 0..c_out {
        for y in 0..oh {
            for xx in 0..ow {
                let mut acc = b[o];
                for c in 0..c_in {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = y as isize + ky as isize - pad as isize;
                            let ix = xx as isize + kx as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            acc += w.data()[((o * c_in + c) * k + ky) * k + kx]
                                * x.data()[(c * h + iy as usize) * wd + ix as usize];
                        }
                    }
                }
                out[(o * oh + y) * ow + xx] = acc;
            }
        }
    }
    Tensor::new(vec![c_out, oh, ow], out).unwrap()
}

fn conv_on_tape(x: &Tensor64, w: &Tensor64, b: &Tensor64, padding: Padding) -> crossseg::Result<Tensor64> {
    let mut t = Tape::new();
    let s = x.shape();
    let xv = t.constant(x.clone().reshape(vec![1, s[0], s[1], s[2]])?);
    let wv = t.constant(w.clone());
    let bv = t.constant(b.clone());
    let out = t.conv2d(xv, wv, bv, padding)?;
    let o = t.value(out).clone();
    let os = o.shape().to_vec();
    o.reshape(vec![os[1], os[2], os[3]])
}

#[test]
fn one_by_one_identity_kernel_copies_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = rand_t(&mut rng, &[1, 5, 6]);
    let w = Tensor::full(vec![1, 1, 1, 1], 1.0);
    let b = Tensor::zeros(vec![1]);
    assert_eq!(conv_on_tape(&x, &w, &b, Padding::Same).unwrap(), x);
}

#[test]
fn all_ones_kernel_on_constant_image() {
    let x = Tensor::full(vec![1, 4, 4], 5.0);
    let w = Tensor::full(vec![1, 1, 3, 3], 1.0);
    let out = conv_on_tape(&x, &w, &Tensor::zeros(vec![1]), Padding::Same).unwrap();
    let d = out.data();
    assert_eq!(d[5], 45.0);
    assert_eq!(d[0], 20.0);
    assert_eq!(d[15], 20.0);
    assert_eq!(d[1], 30.0);
}

#[test]
fn conv_shape_contract_and_errors() {
    let x = Tensor::zeros(vec![2, 8, 8]);
    let w = Tensor::zeros(vec![64, 2, 3, 3]);
    let out = conv_on_tape(&x, &w, &Tensor::zeros(vec![64]), Padding::Same).unwrap();
    assert_eq!(out.shape(), [64, 8, 8]);
    let valid = conv_on_tape(&x, &w, &Tensor::zeros(vec![64]), Padding::Valid).unwrap();
    assert_eq!(valid.shape(), [64, 6, 6]);
    let bad = Tensor::zeros(vec![64, 3, 3, 3]);
    assert!(matches!(conv_on_tape(&x, &bad, &Tensor::zeros(vec![64]), Padding::Same), Err(Error::Shape(_))));
    let even = Tensor::zeros(vec![4, 2, 2, 2]);
    assert!(matches!(conv_on_tape(&x, &even, &Tensor::zeros(vec![4]), Padding::Same), Err(Error::Config(_))));
}

#[test]
fn conv_matches_reference_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for &(c_in, c_out, h, w, k) in
        &[(1, 1, 3, 3, 3), (2, 3, 5, 7, 3), (4, 4, 8, 8, 3), (3, 2, 8, 6, 1), (4, 2, 8, 8, 5)]
    {
        let x = rand_t(&mut rng, &[c_in, h, w]);
        let wt = rand_t(&mut rng, &[c_out, c_in, k, k]);
        let b = rand_t(&mut rng, &[c_out]);
        let got = conv_on_tape(&x, &wt, &b, Padding::Same).unwrap();
        let want = reference_conv(&x, &wt, b.data(), k / 2);
        assert!(got.max_abs_diff(&want) < 1e-12, "{c_in} {c_out} {h} {w} {k}");
        let x32: Tensor<f32> = x.cast();
        let g = ConvGeom { batch: 1, c_in, h, w, c_out, k, pad: k / 2 };
        let got32 =
            kernels::conv2d_forward(&g, x32.data(), &wt.cast::<f32>().into_data(), &b.cast::<f32>().into_data());
        for (a, e) in got32.iter().zip(want.data()) {
            assert!((*a as f64 - e).abs() < 1e-5);
        }
    }
}

#[test]
fn concat_keeps_block_order() {
    let mut t = Tape::<f64>::new();
    let a = t.constant(Tensor::full(vec![1, 1, 4, 4], 1.0));
    let b = t.constant(Tensor::full(vec![1, 1, 4, 4], 2.0));
    let ab = t.concat_channels(a, b).unwrap();
    let ba = t.concat_channels(b, a).unwrap();
    assert_eq!(t.value(ab).shape(), [1, 2, 4, 4]);
    assert!(t.value(ab).data()[..16].iter().all(|&v| v == 1.0));
    assert!(t.value(ab).data()[16..].iter().all(|&v| v == 2.0));
    assert_ne!(t.value(ab), t.value(ba));
    let c = t.constant(Tensor::zeros(vec![1, 1, 4, 5]));
    assert!(matches!(t.concat_channels(a, c), Err(Error::Shape(_))));
}

#[test]
fn gradient_of_summed_concat_is_ones() {
    let mut ps = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    ps.add("a", rand_t(&mut rng, &[1, 1, 4, 4]));
    ps.add("b", rand_t(&mut rng, &[1, 2, 4, 4]));
    let f = |t: &mut Tape<f64>, ps: &ParamStore<f64>| {
        let a = t.param(ps, ParamId(0));
        let b = t.param(ps, ParamId(1));
        let c = t.concat_channels(a, b)?;
        Ok(t.sum(c))
    };
    let rep = grad_check(f, &mut ps, 1e-5).unwrap();
    assert!(rep.max_rel_error < 1e-8);
    assert!(ps.get(ParamId(0)).grad.data().iter().all(|&g| g == 1.0));
}

#[test]
fn leaky_relu_values() {
    let s = 0.01;
    for x in [0.0, 0.5, 3.0] {
        assert_eq!(kernels::leaky_relu(x, s), x);
    }
    assert_eq!(kernels::leaky_relu(-1.0, s), -0.01);
    assert_eq!(kernels::leaky_relu_grad(0.0, s), s);
    assert_eq!(kernels::leaky_relu_grad(2.0, s), 1.0);
}

fn resize(x: &Tensor64, oh: usize, ow: usize) -> Tensor64 {
    let mut t = Tape::new();
    let v = t.constant(x.clone());
    let r = t.resize(v, oh, ow).unwrap();
    t.value(r).clone()
}

#[test]
fn resize_identity_and_constants() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_t(&mut rng, &[1, 2, 6, 5]);
    assert_eq!(resize(&x, 6, 5), x);
    let c = Tensor::full(vec![1, 1, 4, 4], 0.37);
    for (h, w) in [(1, 1), (2, 8), (7, 3), (16, 16)] {
        assert!(resize(&c, h, w).data().iter().all(|&v| (v - 0.37).abs() < 1e-15));
    }
    let down_up = resize(&resize(&c, 2, 2), 4, 4);
    assert_eq!(down_up, c);
}

fn bilinear_oracle(src: &[[f64; 2]; 2], oh: usize, ow: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for y in 0..oh {
        for x in 0..ow {
            let sy = ((y as f64 + 0.5) * 2.0 / oh as f64 - 0.5).clamp(0.0, 1.0);
            let sx = ((x as f64 + 0.5) * 2.0 / ow as f64 - 0.5).clamp(0.0, 1.0);
            let top = src[0][0] * (1.0 - sx) + src[0][1] * sx;
            let bot = src[1][0] * (1.0 - sx) + src[1][1] * sx;
            out.push(top * (1.0 - sy) + bot * sy);
        }
    }
    out
}

#[test]
fn upsampling_matches_scalar_bilinear_formula() {
    let x = Tensor::new(vec![1, 1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
    let got = resize(&x, 4, 4);
    let want = bilinear_oracle(&[[0.0, 1.0], [2.0, 3.0]], 4, 4);
    for (g, w) in got.data().iter().zip(&want) {
        assert!((g - w).abs() < 1e-12, "{g} vs {w}");
    }
    assert_eq!(&got.data()[..4], &[0.0, 0.25, 0.75, 1.0]);
}

#[test]
fn factor_two_round_trip_preserves_the_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_t(&mut rng, &[1, 3, 8, 8]);
    let down = resize(&x, 4, 4);
    let up = resize(&x, 16, 16);
    let back = resize(&down, 8, 8);
    let m = x.mean();
    for y in [&down, &up, &back] {
        assert!((y.mean() - m).abs() < 1e-5);
    }
}

#[test]
fn batch_mean_properties() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = rand_t(&mut rng, &[1, 2, 3, 3]);
    let mut t = Tape::new();
    let xv = t.constant(x.clone());
    let m = t.mean_batch(xv).unwrap();
    assert_eq!(t.value(m), &x);
    let neg = t.constant(x.map(|v| -v));
    let both = t.stack(&[xv, neg]).unwrap();
    let z = t.mean_batch(both).unwrap();
    assert!(t.value(z).data().iter().all(|&v| v == 0.0));
    assert!(matches!(t.stack(&[]), Err(Error::Domain(_))));
}

#[test]
fn sorted_batch_mean_is_order_free() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let n = 7;
    let x: Vec<f32> = (0..n * 10).map(|_| rng.random_range(-1.0..1.0)).collect();
    let base = kernels::mean_over_batch(&x, n, Reduction::Sorted);
    let mut perm: Vec<usize> = (0..n).collect();
    for _ in 0..20 {
        for i in (1..n).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let y: Vec<f32> = perm.iter().flat_map(|&p| x[p * 10..(p + 1) * 10].to_vec()).collect();
        assert_eq!(kernels::mean_over_batch(&y, n, Reduction::Sorted), base);
    }
}

#[test]
fn backward_errors_and_accumulation() {
    let mut other = Tape::<f64>::new();
    let stray = other.constant(Tensor::scalar(1.0));
    let t = Tape::<f64>::new();
    let mut ps = ParamStore::new();
    let id = ps.add("p", Tensor::new(vec![2], vec![1.0, -2.0]).unwrap());
    assert!(matches!(t.backward(stray, &mut ps), Err(Error::State(_))));
    let mut t = Tape::new();
    let p = t.param(&ps, id);
    let sq = t.mul(p, p).unwrap();
    let l = t.sum(sq);
    t.backward(l, &mut ps).unwrap();
    t.backward(l, &mut ps).unwrap();
    assert_eq!(ps.get(id).grad.data(), &[4.0, -8.0]);
    ps.zero_grad();
    assert_eq!(ps.get(id).grad.data(), &[0.0, 0.0]);
    assert!(matches!(t.backward(sq, &mut ps), Err(Error::Shape(_))));
}

#[test]
fn grad_check_of_sum_of_squares_and_constant() {
    let mut ps = ParamStore::new();
    ps.add("p", Tensor::new(vec![4], vec![0.3, -1.1, 2.0, 0.0]).unwrap());
    let rep = grad_check(
        |t, ps| {
            let p = t.param(ps, ParamId(0));
            let sq = t.mul(p, p)?;
            Ok(t.sum(sq))
        },
        &mut ps,
        1e-5,
    )
    .unwrap();
    assert!(rep.max_rel_error < 1e-8, "{rep:?}");
    let rep = grad_check(|t, _| Ok(t.constant(Tensor::scalar(3.0))), &mut ps, 1e-5).unwrap();
    assert_eq!(rep.max_rel_error, 0.0);
    assert!(ps.get(ParamId(0)).grad.data().iter().all(|&g| g == 0.0));
}

/// Keeps values away from the leaky-ReLU kink so finite differences are valid.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor64 {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn check_op(name: &str, ps: &mut ParamStore<f64>, f: impl Fn(&mut Tape<f64>, &[Var]) -> crossseg::Result<Var>) {
    let n = ps.len();
    let rep = grad_check(
        |t, ps| {
            let vars: Vec<Var> = (0..n).map(|i| t.param(ps, ParamId(i))).collect();
            let out = f(t, &vars)?;
            // Weighted sum so that every output coordinate matters differently.
            let shape = t.value(out).shape().to_vec();
            let w = t.constant(Tensor::from_fn(shape, |i| 0.3 + (i as f64 * 0.7).sin()));
            let prod = t.mul(out, w)?;
            Ok(t.sum(prod))
        },
        ps,
        1e-5,
    )
    .unwrap();
    assert!(rep.max_rel_error < 1e-5, "{name}: {rep:?}");
}

#[test]
fn every_primitive_passes_grad_check_on_small_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut ps = ParamStore::new();
    ps.add("x", rand_t(&mut rng, &[2, 3, 4, 4]));
    ps.add("w", rand_t(&mut rng, &[2, 3, 3, 3]));
    ps.add("b", rand_t(&mut rng, &[2]));
    check_op("conv2d", &mut ps, |t, v| t.conv2d(v[0], v[1], v[2], Padding::Same));
    check_op("conv2d valid", &mut ps, |t, v| t.conv2d(v[0], v[1], v[2], Padding::Valid));

    let mut ps = ParamStore::new();
    ps.add("a", rand_t(&mut rng, &[2, 1, 4, 4]));
    ps.add("b", rand_t(&mut rng, &[2, 2, 4, 4]));
    check_op("concat", &mut ps, |t, v| t.concat_channels(v[0], v[1]));

    let mut ps = ParamStore::new();
    ps.add("u", rand_t(&mut rng, &[1, 2, 4, 4]));
    check_op("tile", &mut ps, |t, v| t.tile(v[0], 3));
    check_op("resize up", &mut ps, |t, v| t.resize(v[0], 8, 8));
    check_op("resize down", &mut ps, |t, v| t.resize(v[0], 2, 2));
    check_op("resize odd", &mut ps, |t, v| t.resize(v[0], 3, 5));
    check_op("sigmoid", &mut ps, |t, v| Ok(t.sigmoid(v[0])));
    check_op("sum", &mut ps, |t, v| Ok(t.sum(v[0])));
    check_op("mul", &mut ps, |t, v| t.mul(v[0], v[0]));

    let mut ps = ParamStore::new();
    ps.add("x", away_from_zero(&mut rng, &[3, 2, 4, 4]));
    check_op("leaky_relu", &mut ps, |t, v| Ok(t.leaky_relu(v[0], 0.01)));
    check_op("mean_batch", &mut ps, |t, v| t.mean_batch(v[0]));
    check_op("select", &mut ps, |t, v| t.select(v[0], 1));

    let mut ps = ParamStore::new();
    ps.add("a", rand_t(&mut rng, &[1, 2, 4, 4]));
    ps.add("b", rand_t(&mut rng, &[1, 2, 4, 4]));
    check_op("stack", &mut ps, |t, v| t.stack(&[v[0], v[1], v[0]]));

    let mut ps = ParamStore::new();
    ps.add("p", Tensor::from_fn(vec![1, 1, 4, 4], |_| rng.random_range(0.05..0.95)));
    let target = Tensor::from_fn(vec![1, 1, 4, 4], |i| ((i * 7) % 3 == 0) as u8 as f64);
    check_op("soft_dice", &mut ps, |t, v| {
        let y = t.constant(target.clone());
        t.soft_dice_loss(v[0], y, 1e-6)
    });
}

#[test]
fn replay_is_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = rand_t(&mut rng, &[2, 2, 8, 8]);
    let w = rand_t(&mut rng, &[3, 2, 3, 3]);
    let run = || {
        let mut t = Tape::<f64>::new();
        let xv = t.constant(x.clone());
        let wv = t.constant(w.clone());
        let bv = t.constant(Tensor::zeros(vec![3]));
        let c = t.conv2d(xv, wv, bv, Padding::Same).unwrap();
        let r = t.leaky_relu(c, 0.01);
        let m = t.mean_batch(r).unwrap();
        let d = t.resize(m, 4, 4).unwrap();
        t.value(d).clone()
    };
    assert_eq!(run(), run());
}

#[test]
fn tensor_invariants_and_nan_detection() {
    assert!(matches!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]), Err(Error::Shape(_))));
    let mut t = Tensor::<f32>::zeros(vec![2, 2]);
    assert!(t.check_finite("t").is_ok());
    t.data_mut()[3] = f32::NAN;
    assert!(matches!(t.check_finite("t"), Err(Error::NonFinite(_))));
    t.data_mut()[3] = f32::INFINITY;
    assert!(t.check_finite("t").is_err());
}

#[test]
fn tensor_file_layout() {
    let t = Tensor::<f32>::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    let b = t.encode(DType::F32);
    assert_eq!(&b[..4], b"UVSG");
    assert_eq!(b[4], 1);
    assert_eq!(b[5], 0);
    assert_eq!(b[6], 2);
    assert_eq!(&b[7..11], &2u32.to_le_bytes());
    assert_eq!(&b[11..15], &3u32.to_le_bytes());
    assert_eq!(&b[15..19], &1.0f32.to_le_bytes());
    assert_eq!(b.len(), 15 + 6 * 4);
    assert_eq!(Tensor::<f64>::from_fn(vec![1], |_| 0.5).encode(DType::F64)[5], 1);
    assert_eq!(t.encode(DType::U8)[5], 2);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("t.uvsg");
    t.save(&p, DType::F32).unwrap();
    assert_eq!(Tensor::<f32>::load(&p).unwrap(), t);
    assert_eq!(Tensor::<f32>::decode(&b).unwrap().0, t);
    let mut bad = b.clone();
    bad[0] = b'X';
    assert!(matches!(Tensor::<f32>::decode(&bad), Err(Error::Format(_))));
    assert!(Tensor::<f32>::decode(&b[..b.len() - 1]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv_agrees_with_reference(c_in in 1usize..4, c_out in 1usize..4, h in 3usize..9, w in 3usize..9, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_t(&mut rng, &[c_in, h, w]);
        let wt = rand_t(&mut rng, &[c_out, c_in, 3, 3]);
        let b = rand_t(&mut rng, &[c_out]);
        let got = conv_on_tape(&x, &wt, &b, Padding::Same).unwrap();
        prop_assert!(got.max_abs_diff(&reference_conv(&x, &wt, b.data(), 1)) < 1e-12);
    }

    #[test]
    fn resize_preserves_constants(c in -5.0f64..5.0, h in 1usize..9, w in 1usize..9, oh in 1usize..17, ow in 1usize..17) {
        let x = Tensor::full(vec![1, 1, h, w], c);
        let y = resize(&x, oh, ow);
        prop_assert!(y.data().iter().all(|v| (v - c).abs() <= 1e-12 * c.abs().max(1.0)));
    }
}
