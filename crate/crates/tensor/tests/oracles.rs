use dehaze_tensor::{Graph, PoolKind, Tensor};
use proptest::prelude::*;

/// Zero-padded cross-correlation written as plain nested loops.
fn conv_oracle(x: &Tensor, k: &Tensor, b: Option<&[f64]>, stride: usize, pad: usize) -> Tensor {
    let [n, cin, h, w] = x.shape().try_into().unwrap();
    let [cout, _, kh, kw] = k.shape().try_into().unwrap();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros([n, cout, oh, ow]);
    for s in 0..n {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b[co]);
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xi = ((s * cin + ci) * h + iy as usize) * w + ix as usize;
                                let ki = ((co * cin + ci) * kh + ky) * kw + kx;
                                acc += x.data()[xi] * k.data()[ki];
                            }
                        }
                    }
                    out.data_mut()[((s * cout + co) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

fn pool_oracle(x: &Tensor, kind: PoolKind, k: usize, stride: usize) -> Tensor {
    let [n, c, h, w] = x.shape().try_into().unwrap();
    let (oh, ow) = ((h - k) / stride + 1, (w - k) / stride + 1);
    Tensor::from_fn([n, c, oh, ow], |i| {
        let ox = i % ow;
        let oy = i / ow % oh;
        let plane = i / (ow * oh);
        let window = (0..k).flat_map(|ky| (0..k).map(move |kx| (ky, kx))).map(|(ky, kx)| {
            x.data()[plane * h * w + (oy * stride + ky) * w + ox * stride + kx]
        });
        match kind {
            PoolKind::Max => window.fold(f64::NEG_INFINITY, f64::max),
            PoolKind::Avg => window.sum::<f64>() / (k * k) as f64,
        }
    })
}

fn seeded(shape: &[usize], seed: u64) -> Tensor {
    let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    Tensor::from_fn(shape.to_vec(), |_| {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    })
}

#[test]
fn conv_matches_oracle_on_fixed_case() {
    let x = seeded(&[2, 3, 7, 6], 1);
    let k = seeded(&[4, 3, 3, 3], 2);
    let b = seeded(&[4], 3);
    let mut g = Graph::new();
    let (xv, kv, bv) = (g.constant(x.clone()), g.constant(k.clone()), g.constant(b.clone()));
    let y = g.conv2d(xv, kv, Some(bv), 1, 1).unwrap();
    let expected = conv_oracle(&x, &k, Some(b.data()), 1, 1);
    assert_eq!(g.shape(y), expected.shape());
    assert!(g.value(y).max_abs_diff(&expected) < 1e-12);
}

#[test]
fn global_average_matches_summation() {
    let x = seeded(&[2, 3, 5, 4], 9);
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let y = g.global_pool(v, PoolKind::Avg).unwrap();
    for plane in 0..6 {
        let s: f64 = x.data()[plane * 20..(plane + 1) * 20].iter().sum();
        assert!((g.value(y).data()[plane] - s / 20.0).abs() < 1e-14);
    }
}

#[test]
fn atmospheric_pool_chain_extents() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros([1, 1, 64, 64]));
    let p1 = g.pool2d(x, PoolKind::Max, 7, 7, 2).unwrap();
    let p2 = g.pool2d(p1, PoolKind::Max, 7, 7, 2).unwrap();
    assert_eq!(g.shape(p1), &[1, 1, 29, 29]);
    assert_eq!(g.shape(p2), &[1, 1, 12, 12]);
}

#[test]
fn group_norm_output_is_standardized() {
    let x = seeded(&[2, 8, 6, 5], 4).map(|v| 3.0 * v + 1.5);
    let mut g = Graph::new();
    let xv = g.constant(x);
    let gm = g.constant(Tensor::full([8], 1.0));
    let bt = g.constant(Tensor::zeros([8]));
    let y = g.group_norm(xv, 4, gm, bt, 1e-12).unwrap();
    let m = 2 * 30;
    for group in g.value(y).data().chunks(m) {
        let mean = group.iter().sum::<f64>() / m as f64;
        let var = group.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m as f64;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-4);
    }
}

#[test]
fn forward_and_backward_are_bitwise_deterministic() {
    let run = || {
        let mut g = Graph::new();
        let x = g.leaf(seeded(&[2, 3, 9, 9], 5));
        let k = g.leaf(seeded(&[5, 3, 3, 3], 6));
        let y = g.conv2d(x, k, None, 1, 1).unwrap();
        let r = g.relu(y);
        let p = g.pool2d(r, PoolKind::Max, 3, 3, 2).unwrap();
        let loss = g.mean(p);
        g.backward(loss).unwrap();
        (g.value(loss).data().to_vec(), g.grad(x).unwrap().to_vec(), g.grad(k).unwrap().to_vec())
    };
    let (a, b) = (run(), run());
    let bits = |v: &[f64]| v.iter().map(|f| f.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a.0), bits(&b.0));
    assert_eq!(bits(&a.1), bits(&b.1));
    assert_eq!(bits(&a.2), bits(&b.2));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv_agrees_with_nested_loops(
        n in 1usize..3, cin in 1usize..5, cout in 1usize..5,
        h in 1usize..9, w in 1usize..9, k in prop::sample::select(vec![1usize, 3, 5]),
        stride in 1usize..3, seed in any::<u64>(),
    ) {
        let pad = k / 2;
        let x = seeded(&[n, cin, h, w], seed);
        let kt = seeded(&[cout, cin, k, k], seed ^ 0x5a5a);
        let b = seeded(&[cout], seed ^ 0xa5a5);
        let mut g = Graph::new();
        let (xv, kv, bv) = (g.constant(x.clone()), g.constant(kt.clone()), g.constant(b.clone()));
        let y = g.conv2d(xv, kv, Some(bv), stride, pad).unwrap();
        let expected = conv_oracle(&x, &kt, Some(b.data()), stride, pad);
        prop_assert_eq!(g.shape(y), expected.shape());
        prop_assert!(g.value(y).max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn pooling_agrees_with_window_scan(
        c in 1usize..4, h in 3usize..12, w in 3usize..12,
        k in 1usize..4, stride in 1usize..3, seed in any::<u64>(),
        max in any::<bool>(),
    ) {
        let kind = if max { PoolKind::Max } else { PoolKind::Avg };
        let x = seeded(&[1, c, h, w], seed);
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let y = g.pool2d(v, kind, k, k, stride).unwrap();
        prop_assert!(g.value(y).max_abs_diff(&pool_oracle(&x, kind, k, stride)) < 1e-14);
    }

    #[test]
    fn clamp_output_stays_in_range(vals in prop::collection::vec(-10.0f64..10.0, 1..40)) {
        let mut g = Graph::new();
        let n = vals.len();
        let v = g.constant(Tensor::new([n], vals).unwrap());
        let c = g.clamp(v, 0.05, 1.0);
        prop_assert!(g.value(c).data().iter().all(|x| (0.05..=1.0).contains(x)));
    }

    #[test]
    fn channel_concat_then_slice_round_trips(
        parts in prop::collection::vec(1usize..4, 1..6), hw in 1usize..5, seed in any::<u64>(),
    ) {
        let mut g = Graph::new();
        let tensors: Vec<Tensor> = parts
            .iter()
            .enumerate()
            .map(|(i, &c)| seeded(&[2, c, hw, hw], seed.wrapping_add(i as u64)))
            .collect();
        let vars: Vec<_> = tensors.iter().map(|t| g.constant(t.clone())).collect();
        let cat = g.concat_channels(&vars).unwrap();
        let mut start = 0;
        for (t, &c) in tensors.iter().zip(&parts) {
            let s = g.slice_channels(cat, start, c).unwrap();
            prop_assert_eq!(g.value(s), t);
            start += c;
        }
    }
}
