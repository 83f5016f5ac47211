use dehaze_tensor::{gradcheck, gradcheck_params, Graph, ModelParams, PoolKind, Tensor, Var};

const EPS: f64 = 1e-5;

fn seeded(shape: &[usize], seed: u64) -> Tensor {
    let mut state = seed.wrapping_mul(0x9E3779B97F4A7C15) | 1;
    Tensor::from_fn(shape.to_vec(), |_| {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
    })
}

/// Sum against fixed random weights so every output coordinate matters.
fn project(g: &mut Graph, y: Var, seed: u64) -> dehaze_tensor::Result<Var> {
    let w = g.constant(seeded(g.shape(y), seed));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn assert_passes(report: dehaze_tensor::GradcheckReport) {
    assert!(report.passed(), "{report:?}");
}

#[test]
fn conv_input_kernel_and_bias() {
    let k = seeded(&[3, 2, 3, 3], 2);
    let b = seeded(&[3], 3);
    assert_passes(
        gradcheck(
            |g, x| {
                let (kv, bv) = (g.constant(k.clone()), g.constant(b.clone()));
                let y = g.conv2d(x, kv, Some(bv), 2, 1)?;
                project(g, y, 4)
            },
            &seeded(&[2, 2, 5, 6], 1),
            EPS,
            1e-5,
        )
        .unwrap(),
    );
    let mut params = ModelParams::new();
    let kid = params.add("k", k.clone());
    let bid = params.add("b", b.clone());
    let x = seeded(&[1, 2, 6, 6], 5);
    let coords: Vec<_> = (0..k.numel())
        .map(|i| (kid, i))
        .chain((0..3).map(|i| (bid, i)))
        .collect();
    assert_passes(
        gradcheck_params(
            &mut params,
            |g, bound| {
                let xv = g.constant(x.clone());
                let y = g.conv2d(xv, bound[kid], Some(bound[bid]), 1, 1)?;
                project(g, y, 6)
            },
            &coords,
            EPS,
            1e-5,
        )
        .unwrap(),
    );
}

#[test]
fn conv_relu_stack() {
    let k1 = seeded(&[4, 3, 3, 3], 11);
    let k2 = seeded(&[2, 4, 3, 3], 12);
    assert_passes(
        gradcheck(
            |g, x| {
                let (a, b) = (g.constant(k1.clone()), g.constant(k2.clone()));
                let h = g.conv2d(x, a, None, 1, 1)?;
                let h = g.relu(h);
                let y = g.conv2d(h, b, None, 1, 1)?;
                project(g, y, 13)
            },
            &seeded(&[1, 3, 6, 6], 10),
            EPS,
            1e-5,
        )
        .unwrap(),
    );
}

#[test]
fn activations() {
    // keep samples away from the relu kink
    let point = seeded(&[2, 3, 4, 4], 20).map(|v| if v.abs() < 0.05 { v + 0.2 } else { v * 3.0 });
    for act in ["relu", "sigmoid", "tanh"] {
        assert_passes(
            gradcheck(
                |g, x| {
                    let y = match act {
                        "relu" => g.relu(x),
                        "sigmoid" => g.sigmoid(x),
                        _ => g.tanh(x),
                    };
                    project(g, y, 21)
                },
                &point,
                EPS,
                1e-6,
            )
            .unwrap(),
        );
    }
    let alpha = Tensor::new([3], vec![0.25, -0.1, 0.6]).unwrap();
    assert_passes(
        gradcheck(
            |g, x| {
                let a = g.constant(alpha.clone());
                let y = g.prelu(x, a)?;
                project(g, y, 22)
            },
            &point,
            EPS,
            1e-6,
        )
        .unwrap(),
    );
}

#[test]
fn pooling_and_global_pooling() {
    // distinct values so max windows have a unique winner
    let point = Tensor::from_fn([1, 2, 9, 9], |i| ((i * 37) % 162) as f64 * 0.01);
    for kind in [PoolKind::Max, PoolKind::Avg] {
        assert_passes(
            gradcheck(
                |g, x| {
                    let y = g.pool2d(x, kind, 3, 3, 2)?;
                    project(g, y, 30)
                },
                &point,
                EPS,
                1e-5,
            )
            .unwrap(),
        );
        assert_passes(
            gradcheck(
                |g, x| {
                    let y = g.global_pool(x, kind)?;
                    project(g, y, 31)
                },
                &point,
                EPS,
                1e-5,
            )
            .unwrap(),
        );
    }
}

#[test]
fn group_norm_all_inputs() {
    let gamma = seeded(&[8], 41);
    let beta = seeded(&[8], 42);
    assert_passes(
        gradcheck(
            |g, x| {
                let (gm, bt) = (g.constant(gamma.clone()), g.constant(beta.clone()));
                let y = g.group_norm(x, 4, gm, bt, 1e-5)?;
                project(g, y, 43)
            },
            &seeded(&[2, 8, 3, 3], 40),
            EPS,
            1e-5,
        )
        .unwrap(),
    );
    let mut params = ModelParams::new();
    let gid = params.add("gamma", gamma);
    let bid = params.add("beta", beta);
    let x = seeded(&[2, 8, 3, 3], 44);
    let coords: Vec<_> = (0..8).flat_map(|i| [(gid, i), (bid, i)]).collect();
    assert_passes(
        gradcheck_params(
            &mut params,
            |g, bound| {
                let xv = g.constant(x.clone());
                let y = g.group_norm(xv, 2, bound[gid], bound[bid], 1e-5)?;
                project(g, y, 45)
            },
            &coords,
            EPS,
            1e-5,
        )
        .unwrap(),
    );
}

#[test]
fn arithmetic_and_reductions() {
    let other = seeded(&[2, 3, 2, 2], 51).map(|v| v + 2.5);
    assert_passes(
        gradcheck(
            |g, x| {
                let o = g.constant(other.clone());
                let a = g.add(x, o)?;
                let b = g.mul(a, x)?;
                let c = g.div(b, o)?;
                let d = g.sub(c, x)?;
                let e = g.scale(d, -1.7);
                let f = g.offset(e, 0.3);
                let s = g.square(f);
                let m = g.mean(s);
                let t = project(g, x, 52)?;
                g.add(m, t)
            },
            &seeded(&[2, 3, 2, 2], 50),
            EPS,
            1e-6,
        )
        .unwrap(),
    );
    let away_from_kinks = seeded(&[12], 53).map(|v| if v.abs() < 0.1 { 0.5 } else { v });
    assert_passes(
        gradcheck(
            |g, x| {
                let a = g.abs(x);
                let c = g.clamp(x, -0.05, 0.05);
                let s = g.add(a, c)?;
                project(g, s, 54)
            },
            &away_from_kinks.map(|v| if v.abs() < 0.1 { 0.5 } else { v }),
            EPS,
            1e-6,
        )
        .unwrap(),
    );
}

#[test]
fn shape_and_resampling_ops() {
    let point = seeded(&[2, 3, 5, 6], 60);
    assert_passes(
        gradcheck(
            |g, x| {
                let a = g.slice_channels(x, 1, 2)?;
                let b = g.concat_channels(&[x, a])?;
                let c = g.resize_bilinear(b, 10, 4)?;
                let d = g.reflect_pad(c, 3, 2)?;
                let e = g.crop(d, 2, 1, 9, 5)?;
                let p = g.global_pool(e, PoolKind::Avg)?;
                let q = g.broadcast_spatial(p, 3, 2)?;
                let r = project(g, q, 61)?;
                let s = project(g, e, 62)?;
                g.add(r, s)
            },
            &point,
            EPS,
            1e-6,
        )
        .unwrap(),
    );
}

#[test]
fn concat_along_leading_axis() {
    let other = seeded(&[2, 2, 3, 3], 71);
    assert_passes(
        gradcheck(
            |g, x| {
                let o = g.constant(other.clone());
                let k = g.concat(&[o, x], 0)?;
                project(g, k, 72)
            },
            &seeded(&[1, 2, 3, 3], 70),
            EPS,
            1e-6,
        )
        .unwrap(),
    );
}

#[test]
fn fixed_depthwise_filter() {
    let kernel = Tensor::from_fn([3, 3], |i| (i as f64 + 1.0) / 45.0);
    assert_passes(
        gradcheck(
            |g, x| {
                let y = g.depthwise_fixed(x, &kernel)?;
                project(g, y, 81)
            },
            &seeded(&[1, 2, 5, 5], 80),
            EPS,
            1e-6,
        )
        .unwrap(),
    );
}
