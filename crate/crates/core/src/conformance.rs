//! Finite-difference gradient conformance for every differentiable
//! primitive and for the unrolled IPUDN.

use dehaze_tensor::{
    gradcheck_at, gradcheck_params, Bound, Graph, GradcheckReport, ModelParams, ParamId, PoolKind, Tensor, TensorError, Var,
};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::estimators::{AtmosphericConfig, AtmosphericEstimator, TransmissionConfig, TransmissionEstimator};
use crate::ipudn::{Ipudn, IpudnBound, IpudnConfig};
use crate::quality::{perceptual_loss, ssim_loss_graph, FeatureExtractor, SsimConfig};

pub const TOLERANCE: f64 = 1e-4;
pub const EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckRow {
    pub name: String,
    pub report: GradcheckReport,
}

impl CheckRow {
    pub fn passed(&self) -> bool {
        self.report.passed()
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

/// Every coordinate when there are at most `limit`, else `limit` distinct
/// random ones.
fn pick(rng: &mut ChaCha8Rng, n: usize, limit: usize) -> Vec<usize> {
    if n <= limit {
        return (0..n).collect();
    }
    rand::seq::index::sample(rng, n, limit).into_vec()
}

/// Scalar `sum(x * w)` for fixed random `w`; smooth in `x`.
fn project(g: &mut Graph, x: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(&mut rng, g.shape(x), -1.0, 1.0);
    let w = g.constant(w);
    let p = g.mul(x, w)?;
    Ok(g.sum(p))
}

/// Carries a closure error through the tensor-level checker.
fn lift<T>(r: Result<T>) -> dehaze_tensor::Result<T> {
    r.map_err(|e| TensorError::Contract(e.to_string()))
}

type Build = Box<dyn Fn(&mut Graph, Var) -> Result<Var>>;

fn input_case(
    rng: &mut ChaCha8Rng,
    name: &str,
    point: Tensor,
    limit: usize,
    f: Build,
) -> Result<CheckRow> {
    let coords = pick(rng, point.numel(), limit);
    let report = gradcheck_at(|g, x| lift(f(g, x)), &point, &coords, EPS, TOLERANCE)?;
    Ok(CheckRow {
        name: name.to_owned(),
        report,
    })
}

/// Values bounded away from zero so kinks are not straddled.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Gradient checks of the tensor primitives and the image losses.
pub fn primitive_suite(seed: u64, limit: usize) -> Result<Vec<CheckRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    let k3 = random(&mut rng, &[4, 3, 3, 3], -0.5, 0.5);
    let bias = random(&mut rng, &[4], -0.5, 0.5);

    let (k, b) = (k3.clone(), bias.clone());
    let x = random(&mut rng, &[2, 3, 7, 6], -1.0, 1.0);
    rows.push(input_case(&mut rng, "conv2d input", x, limit, Box::new(move |g, x| {
        let kv = g.constant(k.clone());
        let bv = g.constant(b.clone());
        let y = g.conv2d(x, kv, Some(bv), 1, 1)?;
        project(g, y, 1)
    }))?);

    let xin = random(&mut rng, &[2, 3, 7, 6], -1.0, 1.0);
    let k = k3.clone();
    rows.push(input_case(&mut rng, "conv2d kernel (stride 2)", k, limit, Box::new(move |g, k| {
        let xv = g.constant(xin.clone());
        let y = g.conv2d(xv, k, None, 2, 1)?;
        project(g, y, 2)
    }))?);

    let xin = random(&mut rng, &[1, 3, 5, 5], -1.0, 1.0);
    let k = k3.clone();
    rows.push(input_case(&mut rng, "conv2d bias", bias, limit, Box::new(move |g, b| {
        let xv = g.constant(xin.clone());
        let kv = g.constant(k.clone());
        let y = g.conv2d(xv, kv, Some(b), 1, 0)?;
        project(g, y, 3)
    }))?);

    // distinct values keep the max unique within every window
    let perm = rand::seq::index::sample(&mut rng, 2 * 2 * 9 * 9, 2 * 2 * 9 * 9).into_vec();
    let distinct = Tensor::from_fn([2, 2, 9, 9], |i| perm[i] as f64 / 100.0);
    for (name, kind, k, s) in [
        ("max pool 3x3/2", PoolKind::Max, 3, 2),
        ("avg pool 2x2/2", PoolKind::Avg, 2, 2),
        ("max pool 7x7/2", PoolKind::Max, 7, 2),
    ] {
        rows.push(input_case(&mut rng, name, distinct.clone(), limit, Box::new(move |g, x| {
            let y = g.pool2d(x, kind, k, k, s)?;
            project(g, y, 4)
        }))?);
    }
    for (name, kind) in [("global max pool", PoolKind::Max), ("global avg pool", PoolKind::Avg)] {
        rows.push(input_case(&mut rng, name, distinct.clone(), limit, Box::new(move |g, x| {
            let y = g.global_pool(x, kind)?;
            project(g, y, 5)
        }))?);
    }

    let x = away_from_zero(&mut rng, &[1, 3, 4, 4]);
    rows.push(input_case(&mut rng, "relu", x.clone(), limit, Box::new(|g, x| {
        let y = g.relu(x);
        project(g, y, 6)
    }))?);
    rows.push(input_case(&mut rng, "sigmoid", x.clone(), limit, Box::new(|g, x| {
        let y = g.sigmoid(x);
        project(g, y, 7)
    }))?);
    rows.push(input_case(&mut rng, "tanh", x.clone(), limit, Box::new(|g, x| {
        let y = g.tanh(x);
        project(g, y, 8)
    }))?);
    let alpha = Tensor::new([3], vec![0.25, -0.1, 0.6])?;
    let a = alpha.clone();
    rows.push(input_case(&mut rng, "prelu input", x.clone(), limit, Box::new(move |g, x| {
        let av = g.constant(a.clone());
        let y = g.prelu(x, av)?;
        project(g, y, 9)
    }))?);
    let xc = x.clone();
    rows.push(input_case(&mut rng, "prelu slope", alpha, limit, Box::new(move |g, a| {
        let xv = g.constant(xc.clone());
        let y = g.prelu(xv, a)?;
        project(g, y, 10)
    }))?);

    let x = random(&mut rng, &[2, 4, 3, 3], -1.0, 1.0);
    let gamma = random(&mut rng, &[4], 0.5, 1.5);
    let beta = random(&mut rng, &[4], -0.5, 0.5);
    let (gm, bt) = (gamma.clone(), beta.clone());
    rows.push(input_case(&mut rng, "group norm input", x.clone(), limit, Box::new(move |g, x| {
        let gv = g.constant(gm.clone());
        let bv = g.constant(bt.clone());
        let y = g.group_norm(x, 2, gv, bv, 1e-5)?;
        project(g, y, 11)
    }))?);
    let (xc, bt) = (x.clone(), beta.clone());
    rows.push(input_case(&mut rng, "group norm gamma", gamma.clone(), limit, Box::new(move |g, gm| {
        let xv = g.constant(xc.clone());
        let bv = g.constant(bt.clone());
        let y = g.group_norm(xv, 2, gm, bv, 1e-5)?;
        project(g, y, 12)
    }))?);
    let (xc, gm) = (x, gamma);
    rows.push(input_case(&mut rng, "group norm beta", beta, limit, Box::new(move |g, bt| {
        let xv = g.constant(xc.clone());
        let gv = g.constant(gm.clone());
        let y = g.group_norm(xv, 2, gv, bt, 1e-5)?;
        project(g, y, 13)
    }))?);

    let other = random(&mut rng, &[1, 2, 3, 3], 0.5, 1.5);
    let x = away_from_zero(&mut rng, &[1, 2, 3, 3]);
    rows.push(input_case(&mut rng, "add sub mul div", x.clone(), limit, Box::new(move |g, x| {
        let o = g.constant(other.clone());
        let a = g.add(x, o)?;
        let s = g.sub(a, x)?;
        let m = g.mul(s, x)?;
        let d = g.div(m, o)?;
        let sq = g.square(x);
        let d = g.add(d, sq)?;
        let d = g.scale(d, 0.7);
        let d = g.offset(d, 0.1);
        project(g, d, 14)
    }))?);
    rows.push(input_case(&mut rng, "abs clamp mean", x, limit, Box::new(|g, x| {
        let a = g.abs(x);
        let c = g.clamp(x, -0.5, 0.5);
        let s = g.add(a, c)?;
        let m = g.mean(s);
        let p = project(g, s, 15)?;
        Ok(g.add(m, p)?)
    }))?);

    let x = random(&mut rng, &[2, 4, 5, 6], -1.0, 1.0);
    rows.push(input_case(&mut rng, "slice concat", x.clone(), limit, Box::new(|g, x| {
        let a = g.slice_channels(x, 0, 1)?;
        let b = g.slice_channels(x, 1, 3)?;
        let c = g.concat_channels(&[b, a, b])?;
        let s = g.concat(&[c, c], 0)?;
        project(g, s, 16)
    }))?);
    rows.push(input_case(&mut rng, "crop reflect pad", x.clone(), limit, Box::new(|g, x| {
        let p = g.reflect_pad(x, 3, 2)?;
        let c = g.crop(p, 1, 2, 5, 5)?;
        project(g, c, 17)
    }))?);
    rows.push(input_case(&mut rng, "bilinear resize", x.clone(), limit, Box::new(|g, x| {
        let up = g.resize_bilinear(x, 9, 13)?;
        let down = g.resize_bilinear(up, 4, 3)?;
        let u = project(g, up, 18)?;
        let d = project(g, down, 19)?;
        Ok(g.add(u, d)?)
    }))?);
    let a = random(&mut rng, &[2, 3, 1, 1], -1.0, 1.0);
    rows.push(input_case(&mut rng, "broadcast", a, limit, Box::new(|g, a| {
        let b = g.broadcast_spatial(a, 4, 5)?;
        project(g, b, 20)
    }))?);
    let kernel = random(&mut rng, &[3, 3], 0.0, 1.0);
    rows.push(input_case(&mut rng, "depthwise fixed", x, limit, Box::new(move |g, x| {
        let y = g.depthwise_fixed(x, &kernel)?;
        project(g, y, 21)
    }))?);

    let target = random(&mut rng, &[1, 1, 12, 12], 0.1, 0.9);
    let pred = random(&mut rng, &[1, 1, 12, 12], 0.1, 0.9);
    rows.push(input_case(&mut rng, "ssim loss", pred, limit, Box::new(move |g, p| {
        let t = g.constant(target.clone());
        ssim_loss_graph(g, p, t, &SsimConfig::default())
    }))?);
    let fe = FeatureExtractor::default();
    let gt = random(&mut rng, &[1, 3, 8, 8], 0.0, 1.0);
    let pred = random(&mut rng, &[1, 3, 8, 8], 0.0, 1.0);
    rows.push(input_case(&mut rng, "perceptual loss", pred, limit, Box::new(move |g, p| {
        let t = g.constant(gt.clone());
        let l = perceptual_loss(g, p, t, &fe)?;
        Ok(g.square(l))
    }))?);
    Ok(rows)
}

fn param_coords(rng: &mut ChaCha8Rng, params: &ModelParams, count: usize) -> Vec<(ParamId, usize)> {
    let flat: Vec<(ParamId, usize)> = params
        .ids()
        .flat_map(|id| (0..params.get(id).value.numel()).map(move |i| (id, i)))
        .collect();
    pick(rng, flat.len(), count).into_iter().map(|k| flat[k]).collect()
}

fn param_case<F>(rng: &mut ChaCha8Rng, name: &str, params: &ModelParams, count: usize, f: F) -> Result<CheckRow>
where
    F: Fn(&mut Graph, &Bound) -> Result<Var>,
{
    let coords = param_coords(rng, params, count);
    let mut p = params.clone();
    let report = gradcheck_params(&mut p, |g, b| lift(f(g, b)), &coords, EPS, TOLERANCE)?;
    Ok(CheckRow {
        name: name.to_owned(),
        report,
    })
}

/// Parameter gradients of the `steps`-step IPUDN at `size`x`size` with
/// `coords` random coordinates per network, plus the input image.
pub fn ipudn_suite(seed: u64, config: IpudnConfig, size: usize, steps: usize, coords: usize) -> Result<Vec<CheckRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = Ipudn::new(config, &mut rng)?;
    let image = random(&mut rng, &[1, 3, size, size], 0.1, 0.9);
    let t = random(&mut rng, &[1, 1, size, size], 0.2, 0.9);
    let a = random(&mut rng, &[1, 3, 1, 1], 0.6, 0.95);

    // scalar touching every step's image, transmission and airlight
    let objective = |g: &mut Graph, bound: &IpudnBound, image: Var| -> Result<Var> {
        let (tv, av) = (g.constant(t.clone()), g.constant(a.clone()));
        let u = model.unroll(g, bound, image, tv, av, steps)?;
        let mut acc = g.constant(Tensor::scalar(0.0));
        for (k, ((o, tp), ap)) in u.outputs.iter().zip(&u.t_primes).zip(&u.a_primes).enumerate() {
            for (j, v) in [*o, *tp, *ap].into_iter().enumerate() {
                let p = project(g, v, 100 + 3 * k as u64 + j as u64)?;
                let p = g.scale(p, 1.0 / g.value(v).numel() as f64);
                acc = g.add(acc, p)?;
            }
        }
        Ok(acc)
    };

    let mut rows = Vec::new();
    rows.push(param_case(&mut rng, "ipudn dehazer", model.dehazer.params(), coords, |g, b| {
        let mut bound = model.bind(g, false)?;
        bound.lstm = model.dehazer.fuse_lstm(g, b)?;
        bound.dehazer = b.clone();
        let x = g.constant(image.clone());
        objective(g, &bound, x)
    })?);
    rows.push(param_case(&mut rng, "ipudn transmission updater", model.t_updater.params(), coords, |g, b| {
        let mut bound = model.bind(g, false)?;
        bound.t_updater = b.clone();
        let x = g.constant(image.clone());
        objective(g, &bound, x)
    })?);
    rows.push(param_case(&mut rng, "ipudn atmospheric updater", model.a_updater.params(), coords, |g, b| {
        let mut bound = model.bind(g, false)?;
        bound.a_updater = b.clone();
        let x = g.constant(image.clone());
        objective(g, &bound, x)
    })?);
    let picks = pick(&mut rng, image.numel(), coords);
    let report = gradcheck_at(
        |g, x| {
            let bound = lift(model.bind(g, false))?;
            lift(objective(g, &bound, x))
        },
        &image,
        &picks,
        EPS,
        TOLERANCE,
    )?;
    rows.push(CheckRow {
        name: "ipudn input image".into(),
        report,
    });
    Ok(rows)
}

/// Parameter gradients of both estimators: transmission at `t_size`,
/// airlight at the smallest accepted input.
pub fn estimator_suite(
    seed: u64,
    transmission: TransmissionConfig,
    atmospheric: AtmosphericConfig,
    t_size: usize,
    coords: usize,
) -> Result<Vec<CheckRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let te = TransmissionEstimator::new(transmission, &mut rng)?;
    let ae = AtmosphericEstimator::new(atmospheric, &mut rng)?;
    let small = random(&mut rng, &[1, 3, t_size, t_size], 0.0, 1.0);
    let s = crate::estimators::MIN_ATMOSPHERIC_INPUT;
    let large = random(&mut rng, &[1, 3, s, s], 0.0, 1.0);
    Ok(vec![
        param_case(&mut rng, "transmission estimator", te.params(), coords, |g, b| {
            let x = g.constant(small.clone());
            let y = te.forward(g, b, x)?;
            project(g, y, 200)
        })?,
        param_case(&mut rng, "atmospheric estimator", ae.params(), coords, |g, b| {
            let x = g.constant(large.clone());
            let y = ae.forward(g, b, x)?;
            project(g, y, 201)
        })?,
    ])
}

/// Everything above at the default architecture: primitives, both
/// estimators and the six-step IPUDN at 16x16.
pub fn full_suite(seed: u64, coords: usize) -> Result<Vec<CheckRow>> {
    let mut rows = primitive_suite(seed, coords)?;
    rows.extend(estimator_suite(
        seed + 1,
        TransmissionConfig::default(),
        AtmosphericConfig::default(),
        16,
        coords,
    )?);
    rows.extend(ipudn_suite(seed + 2, IpudnConfig::default(), 16, 6, coords)?);
    Ok(rows)
}
