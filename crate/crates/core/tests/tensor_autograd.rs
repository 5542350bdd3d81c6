use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ulsqueeze::arch::{ArchId, ArchSpec, Network};
use ulsqueeze::autograd::{grad_check, relative_error};
use ulsqueeze::ops::{channel_concat, channel_split, conv2d, maxpool2d, softmax};
use ulsqueeze::{backward, ConvKernel, Padding, Tape, Tensor4};

fn random(dims: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor4<f64> {
    Tensor4::from_fn(dims, |_, _, _, _| rng.random_range(-1.0..1.0))
}

/// 1×1 conv, GAP and softmax cross-entropy on a tape; returns the loss.
fn toy_loss(x: &Tensor4<f64>, w: &Tensor4<f64>, b: &Tensor4<f64>, labels: &[usize]) -> (f64, Tape<f64>) {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), false);
    let wv = tape.param("w", w.clone()).unwrap();
    let bv = tape.param("b", b.clone()).unwrap();
    let y = tape.conv2d(xv, wv, bv, 1, Padding::Valid).unwrap();
    let g = tape.global_avg_pool(y).unwrap();
    let loss = tape.softmax_cross_entropy(g, labels).unwrap();
    (tape.value(loss).data()[0], tape)
}

#[test]
fn toy_net_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random([2, 4, 4, 3], &mut rng);
    let w = random([1, 1, 3, 2], &mut rng);
    let b = random([1, 1, 1, 2], &mut rng);
    let labels = [0, 1];
    let (_, tape) = toy_loss(&x, &w, &b, &labels);
    let grads = backward(&tape, 1.0).unwrap();
    let eps = 1e-5;
    let mut worst = 0.0f64;
    for (name, base) in [("w", &w), ("b", &b)] {
        let analytic = grads.get(name).unwrap();
        for i in 0..base.len() {
            let mut plus = base.clone();
            plus.data_mut()[i] += eps;
            let mut minus = base.clone();
            minus.data_mut()[i] -= eps;
            let (lp, lm) = if name == "w" {
                (toy_loss(&x, &plus, &b, &labels).0, toy_loss(&x, &minus, &b, &labels).0)
            } else {
                (toy_loss(&x, &w, &plus, &labels).0, toy_loss(&x, &w, &minus, &labels).0)
            };
            let numeric = (lp - lm) / (2.0 * eps);
            worst = worst.max(relative_error(analytic.data()[i], numeric));
        }
    }
    assert!(worst < 1e-6, "worst {worst}");
}

#[test]
fn loss_scaling_scales_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random([2, 3, 3, 3], &mut rng);
    let w = random([1, 1, 3, 2], &mut rng);
    let b = random([1, 1, 1, 2], &mut rng);
    let (_, tape) = toy_loss(&x, &w, &b, &[1, 0]);
    let g1 = backward(&tape, 1.0).unwrap();
    let g3 = backward(&tape, 3.0).unwrap();
    for (name, t) in g1.iter() {
        let scaled = t.map(|v| 3.0 * v);
        assert!(scaled.max_abs_diff(g3.get(name).unwrap()) < 1e-6);
    }
}

#[test]
fn fused_gradient_is_probs_minus_onehot_over_n() {
    let logits = Tensor4::new([2, 1, 1, 2], vec![0.3, -1.2, 2.0, 0.5]).unwrap();
    let mut tape = Tape::<f64>::new();
    let v = tape.leaf(logits.clone(), true);
    tape.softmax_cross_entropy(v, &[1, 0]).unwrap();
    let grads = backward(&tape, 1.0).unwrap();
    let p = softmax(&logits);
    let want = [p.data()[0] / 2.0, (p.data()[1] - 1.0) / 2.0, (p.data()[2] - 1.0) / 2.0, p.data()[3] / 2.0];
    for (g, w) in grads.wrt(v).unwrap().data().iter().zip(want) {
        assert!((g - w).abs() < 1e-15);
    }
}

#[test]
fn concat_gradient_splits_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let a = random([1, 2, 2, 3], &mut rng);
    let b = random([1, 2, 2, 2], &mut rng);
    let mut tape = Tape::<f64>::new();
    let av = tape.leaf(a.clone(), true);
    let bv = tape.leaf(b.clone(), true);
    let c = tape.channel_concat(av, bv).unwrap();
    let r = tape.relu(c);
    tape.sum(r);
    let grads = backward(&tape, 1.0).unwrap();
    let mask = |t: &Tensor4<f64>| t.map(|v| if v > 0.0 { 1.0 } else { 0.0 });
    assert_eq!(grads.wrt(av).unwrap(), &mask(&a));
    assert_eq!(grads.wrt(bv).unwrap(), &mask(&b));
    let joined = channel_concat(&mask(&a), &mask(&b)).unwrap();
    let (ga, gb) = channel_split(&joined, 3).unwrap();
    assert_eq!((ga, gb), (mask(&a), mask(&b)));
}

#[test]
fn zero_network_has_zero_weight_gradients_off_the_bias_path() {
    let spec = ArchSpec::for_arch(ArchId::Variant1).with_input_size(16);
    let net = Network::<f64>::zeros(spec).unwrap();
    let x = Tensor4::<f64>::zeros([2, 16, 16, 3]);
    let grads = net
        .loss_and_grads::<ChaCha8Rng>(&x, &[0, 1], None)
        .unwrap()
        .grads;
    for (name, g) in grads.iter() {
        if name.ends_with(".weight") {
            assert!(g.data().iter().all(|&v| v == 0.0), "{name}");
        }
    }
    // every pre-activation sits on a ReLU kink, so only weights are comparable
    let report = grad_check(&net, &x, &[0, 1], 1e-5).unwrap();
    for (name, err) in &report.per_tensor {
        if name.ends_with(".weight") {
            assert_eq!(*err, 0.0, "{name}");
        }
    }
}

#[test]
fn grad_check_rejects_bad_epsilon_and_budget() {
    let spec = ArchSpec::for_arch(ArchId::Variant1).with_input_size(16);
    let net = Network::<f64>::init(spec, 0).unwrap();
    let x = Tensor4::<f64>::zeros([1, 16, 16, 3]);
    assert!(grad_check(&net, &x, &[0], 1.0).is_err());
    let big = Network::<f64>::init(ArchSpec::for_arch(ArchId::Variant3).with_input_size(16), 0).unwrap();
    assert!(matches!(grad_check(&big, &x, &[0], 1e-5), Err(ulsqueeze::Error::Usage(_))));
}

fn naive_conv(x: &Tensor4<f64>, k: &ConvKernel<f64>) -> Tensor4<f64> {
    // valid padding only
    let [n, h, w, ci] = x.dims();
    let [kh, kw, _, co] = k.weights.dims();
    let s = k.stride;
    Tensor4::from_fn([n, (h - kh) / s + 1, (w - kw) / s + 1, co], |b, i, j, o| {
        let mut acc = k.bias[o];
        for di in 0..kh {
            for dj in 0..kw {
                for c in 0..ci {
                    acc += x.at(b, i * s + di, j * s + dj, c) * k.weights.at(di, dj, c, o);
                }
            }
        }
        acc
    })
}

#[test]
fn stem_conv_shape_and_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = random([1, 130, 130, 3], &mut rng);
    let k = ConvKernel::new(random([3, 3, 3, 64], &mut rng), vec![0.1; 64], 2, Padding::Valid).unwrap();
    let y = conv2d(&x, &k).unwrap();
    assert_eq!(y.dims(), [1, 64, 64, 64]);
    assert!(y.max_abs_diff(&naive_conv(&x, &k)) < 1e-9);
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(vals in prop::collection::vec(-15.0f64..15.0, 2..40)) {
        let n = vals.len() / 2;
        let t = Tensor4::new([n, 1, 1, 2], vals[..2 * n].to_vec()).unwrap();
        let p = softmax(&t);
        for row in p.data().chunks(2) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn conv_matches_naive_valid(seed: u64, h in 3usize..9, w in 3usize..9, stride in 1usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random([1, h, w, 2], &mut rng);
        let k = ConvKernel::new(random([3, 3, 2, 3], &mut rng), vec![0.5, -0.5, 0.0], stride, Padding::Valid).unwrap();
        prop_assert!(conv2d(&x, &k).unwrap().max_abs_diff(&naive_conv(&x, &k)) < 1e-9);
    }

    #[test]
    fn maxpool_outputs_are_window_maxima(seed: u64, h in 3usize..9, w in 3usize..9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random([1, h, w, 1], &mut rng);
        let y = maxpool2d(&x, 3, 2).unwrap();
        for i in 0..y.height() {
            for j in 0..y.width() {
                let mut m = f64::NEG_INFINITY;
                for di in 0..3 {
                    for dj in 0..3 {
                        m = m.max(x.at(0, 2 * i + di, 2 * j + dj, 0));
                    }
                }
                prop_assert_eq!(y.at(0, i, j, 0), m);
            }
        }
    }

    #[test]
    fn same_padding_preserves_extent(seed: u64, h in 1usize..9, w in 1usize..9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random([1, h, w, 1], &mut rng);
        let k = ConvKernel::new(random([3, 3, 1, 1], &mut rng), vec![0.0], 1, Padding::Same).unwrap();
        prop_assert_eq!(conv2d(&x, &k).unwrap().dims(), [1, h, w, 1]);
    }
}
