//! Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any
//! criterion fails. Training criteria run the full desk protocol and take
//! most of an hour on one core.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use dehaze::conformance::{full_suite, TOLERANCE};
use dehaze::ipudn::{max_channel_variance, UpdateLocality};
use dehaze::pipeline::data::{gen_scene, HazeBand};
use dehaze::pipeline::eval::{band_means, eval_suite, evaluate, EvalCase, Metrics};
use dehaze::pipeline::{
    load_checkpoint, run_ablation, save_checkpoint, train_stage1, train_stage2, train_stage3, AblationAxis,
    AblationPlan, Models, TrainConfig, Trainer,
};
use dehaze::quality::delta_e2000;
use dehaze::scattering::{dehaze_dcp, invert_scattering, synthesize_haze, transmission_from_depth, DcpConfig};
use dehaze::AtmosphericLight;
use dehaze_tensor::{Graph, PoolKind, Tensor};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[path = "common/ciede_pairs.rs"]
mod ciede_pairs;

const GRADCHECK_BUDGET: Duration = Duration::from_secs(5 * 60);
const ROUND_TRIP_TOL: f64 = 1e-9;
const ORACLE_TOL: f64 = 1e-12;
const ORACLE_INSTANCES: usize = 400;
const CIEDE_TOL: f64 = 1e-4;
const TRAINING_BUDGET: Duration = Duration::from_secs(60 * 60);
const MID_GAIN_DB: f64 = 6.0;
const DCP_GAIN_DB: f64 = 2.0;
const STAGE3_SLACK_DB: f64 = 0.1;
const ABLATION_BUDGET: Duration = Duration::from_secs(30 * 60);
const CAST_REDUCTION: f64 = 0.30;
const EVAL_SEED: u64 = 777;
const EVAL_SCENES: usize = 8;
const EVAL_SIZE: usize = 64;

type Check = Result<(bool, String), String>;

fn report(id: u8, name: &str, check: Check, took: Duration) -> bool {
    let (ok, detail) = check.unwrap_or_else(|e| (false, format!("error: {e}")));
    println!(
        "{} {id:>2} {name}: {detail} [{:.1}s]",
        if ok { "PASS" } else { "FAIL" },
        took.as_secs_f64()
    );
    ok
}

fn gradients() -> Check {
    let start = Instant::now();
    let rows = full_suite(0, 100).map_err(|e| e.to_string())?;
    let took = start.elapsed();
    let worst = rows
        .iter()
        .max_by(|a, b| a.report.max_rel_error.total_cmp(&b.report.max_rel_error))
        .ok_or("empty suite")?;
    let failed = rows.iter().filter(|r| !r.passed()).count();
    let refined: usize = rows.iter().map(|r| r.report.refined).sum();
    Ok((
        failed == 0 && took < GRADCHECK_BUDGET,
        format!(
            "{} groups, {failed} above {TOLERANCE:e}, worst {:.2e} ({}), {refined} coordinates at the refined step, {:.0}s of {}s",
            rows.len(),
            worst.report.max_rel_error,
            worst.name,
            took.as_secs_f64(),
            GRADCHECK_BUDGET.as_secs()
        ),
    ))
}

fn round_trip() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for seed in 0..100u64 {
        let scene = gen_scene(1000 + seed, EVAL_SIZE);
        let beta = rng.random_range(0.3..2.5);
        let t = transmission_from_depth(&scene.depth, beta)
            .map_err(|e| e.to_string())?
            .map(|v| v.max(0.1));
        let a = AtmosphericLight::new(
            rng.random_range(0.5..1.0),
            rng.random_range(0.5..1.0),
            rng.random_range(0.5..1.0),
        )
        .map_err(|e| e.to_string())?;
        let hazy = synthesize_haze(&scene.clean, &t, a).map_err(|e| e.to_string())?;
        let back = invert_scattering(&hazy, &t, a, 0.1).map_err(|e| e.to_string())?;
        for (x, y) in back.data().iter().zip(scene.clean.data()) {
            worst = worst.max((x - y).abs());
        }
    }
    Ok((worst < ROUND_TRIP_TOL, format!("100 scenes, max abs error {worst:.2e}")))
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

fn conv_oracle(x: &Tensor, k: &Tensor, b: &[f64], stride: usize, pad: usize) -> Vec<f64> {
    let [n, cin, h, w] = x.shape().try_into().expect("rank 4");
    let [cout, _, kh, kw] = k.shape().try_into().expect("rank 4");
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = Vec::with_capacity(n * cout * oh * ow);
    for s in 0..n {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[co];
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += x.data()[((s * cin + ci) * h + iy as usize) * w + ix as usize]
                                    * k.data()[((co * cin + ci) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

fn pool_oracle(x: &Tensor, kind: PoolKind, kh: usize, kw: usize, stride: usize) -> Vec<f64> {
    let [n, c, h, w] = x.shape().try_into().expect("rank 4");
    let (oh, ow) = ((h - kh) / stride + 1, (w - kw) / stride + 1);
    let mut out = Vec::new();
    for plane in 0..n * c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut sum = 0.0;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let v = x.data()[(plane * h + oy * stride + ky) * w + ox * stride + kx];
                        best = best.max(v);
                        sum += v;
                    }
                }
                out.push(match kind {
                    PoolKind::Max => best,
                    PoolKind::Avg => sum / (kh * kw) as f64,
                });
            }
        }
    }
    out
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn oracles() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut conv_worst, mut pool_worst): (f64, f64) = (0.0, 0.0);
    for _ in 0..ORACLE_INSTANCES {
        let d = |rng: &mut ChaCha8Rng| rng.random_range(1..=8usize);
        let (n, cin, cout, h, w) = (d(&mut rng), d(&mut rng), d(&mut rng), d(&mut rng), d(&mut rng));
        let pad = rng.random_range(0..=2usize);
        let kh = rng.random_range(1..=(h + 2 * pad).min(8));
        let kw = rng.random_range(1..=(w + 2 * pad).min(8));
        let stride = d(&mut rng);
        let x = random_tensor(&mut rng, &[n, cin, h, w]);
        let k = random_tensor(&mut rng, &[cout, cin, kh, kw]);
        let b = random_tensor(&mut rng, &[cout]);
        let mut g = Graph::new();
        let (xv, kv, bv) = (g.constant(x.clone()), g.constant(k.clone()), g.constant(b.clone()));
        let y = g.conv2d(xv, kv, Some(bv), stride, pad).map_err(|e| e.to_string())?;
        conv_worst = conv_worst.max(max_diff(g.value(y).data(), &conv_oracle(&x, &k, b.data(), stride, pad)));

        let (ph, pw) = (rng.random_range(1..=h), rng.random_range(1..=w));
        for kind in [PoolKind::Max, PoolKind::Avg] {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let y = g.pool2d(xv, kind, ph, pw, stride).map_err(|e| e.to_string())?;
            pool_worst = pool_worst.max(max_diff(g.value(y).data(), &pool_oracle(&x, kind, ph, pw, stride)));
        }
    }
    Ok((
        conv_worst <= ORACLE_TOL && pool_worst <= ORACLE_TOL,
        format!("{ORACLE_INSTANCES} instances, conv max diff {conv_worst:.1e}, pool max diff {pool_worst:.1e}"),
    ))
}

fn ciede() -> Check {
    let worst = ciede_pairs::PAIRS
        .iter()
        .map(|p| (delta_e2000([p[0], p[1], p[2]], [p[3], p[4], p[5]]) - p[6]).abs())
        .fold(0.0, f64::max);
    Ok((
        worst < CIEDE_TOL,
        format!("{} pairs, max deviation {worst:.1e}", ciede_pairs::PAIRS.len()),
    ))
}

fn global_update(label: &str, model: &Models, cases: &[EvalCase]) -> Check {
    let mut steps = 0;
    let mut worst: f64 = 0.0;
    for case in cases {
        let out = model.dehaze(&case.sample.hazy, TrainConfig::default().t1).map_err(|e| e.to_string())?;
        for s in &out.trajectory.steps {
            let da = s.delta_a.as_ref().ok_or("step without atmospheric update")?;
            worst = worst.max(max_channel_variance(da));
            steps += 1;
        }
    }
    Ok((
        worst == 0.0 && steps > 0,
        format!("{label}: {steps} steps, max per-channel variance {worst:e}"),
    ))
}

fn mean_psnr(rows: &[(HazeBand, Metrics)], bands: &[HazeBand]) -> f64 {
    let v: Vec<f64> = rows.iter().filter(|(b, _)| bands.contains(b)).map(|(_, m)| m.psnr).collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn band(rows: &[(HazeBand, Metrics)], band: HazeBand) -> Metrics {
    rows.iter().find(|(b, _)| *b == band).expect("band evaluated").1
}

struct Protocol {
    took: Duration,
    hazy: Vec<(HazeBand, Metrics)>,
    dcp: Vec<(HazeBand, Metrics)>,
    stage2: Vec<(HazeBand, Metrics)>,
    stage3: Vec<(HazeBand, Metrics)>,
    models: Models,
}

fn protocol(cases: &[EvalCase]) -> dehaze::Result<Protocol> {
    let start = Instant::now();
    let s1 = train_stage1(&TrainConfig::desk(1))?;
    let s2 = train_stage2(&TrainConfig::desk(2), s1.models)?;
    let cfg3 = TrainConfig::desk(3);
    let s3 = train_stage3(&cfg3, s2.models.clone())?;
    let took = start.elapsed();
    let run = |m: &Models| evaluate(cases, |s| Ok(m.dehaze(&s.hazy, cfg3.t1)?.image));
    Ok(Protocol {
        took,
        hazy: band_means(cases, &evaluate(cases, |s| Ok(s.hazy.clone()))?),
        dcp: band_means(
            cases,
            &evaluate(cases, |s| Ok(dehaze_dcp(&s.hazy, &DcpConfig::default())?.dehazed))?,
        ),
        stage2: band_means(cases, &run(&s2.models)?),
        stage3: band_means(cases, &run(&s3.models)?),
        models: s3.models,
    })
}

fn efficacy(p: &Protocol) -> Check {
    let gray = HazeBand::GRAY;
    let mid_gain = band(&p.stage3, HazeBand::Mid).psnr - band(&p.hazy, HazeBand::Mid).psnr;
    let (ours, dcp) = (mean_psnr(&p.stage3, &gray), mean_psnr(&p.dcp, &gray));
    let in_budget = p.took < TRAINING_BUDGET;
    Ok((
        mid_gain >= MID_GAIN_DB && ours - dcp >= DCP_GAIN_DB && in_budget,
        format!(
            "mid {:.2} dB vs hazy {:.2} dB (+{mid_gain:.2}, need {MID_GAIN_DB}); band mean {ours:.2} dB vs DCP {dcp:.2} dB (+{:.2}, need {DCP_GAIN_DB}); trained in {:.0}s of {}s",
            band(&p.stage3, HazeBand::Mid).psnr,
            band(&p.hazy, HazeBand::Mid).psnr,
            ours - dcp,
            p.took.as_secs_f64(),
            TRAINING_BUDGET.as_secs()
        ),
    ))
}

fn stage3_benefit(p: &Protocol) -> Check {
    let all = [HazeBand::Low, HazeBand::Mid, HazeBand::High, HazeBand::Cast];
    let (s2, s3) = (mean_psnr(&p.stage2, &all), mean_psnr(&p.stage3, &all));
    Ok((
        s3 > s2 && s3 >= s2 - STAGE3_SLACK_DB,
        format!("stage 3 {s3:.3} dB vs stage 2 {s2:.3} dB ({:+.3})", s3 - s2),
    ))
}

fn color_cast(p: &Protocol) -> Check {
    let (hazy, ours) = (band(&p.hazy, HazeBand::Cast).ciede2000, band(&p.stage3, HazeBand::Cast).ciede2000);
    let reduction = 1.0 - ours / hazy;
    Ok((
        reduction >= CAST_REDUCTION,
        format!(
            "CIEDE2000 {ours:.2} vs hazy {hazy:.2} ({:.1}% lower, need {:.0}%)",
            100.0 * reduction,
            100.0 * CAST_REDUCTION
        ),
    ))
}

fn pooling() -> Check {
    let start = Instant::now();
    let r = run_ablation(AblationAxis::PoolKind, &AblationPlan::desk(0), None).map_err(|e| e.to_string())?;
    let took = start.elapsed();
    let mse = |label: &str| r.row(label).and_then(|row| row.a_mse).ok_or(format!("no {label} row"));
    let (max, avg) = (mse("max")?, mse("avg")?);
    Ok((
        max < avg && took < ABLATION_BUDGET,
        format!(
            "A MSE max-pool {max:.5} vs avg-pool {avg:.5}; {:.0}s of {}s",
            took.as_secs_f64(),
            ABLATION_BUDGET.as_secs()
        ),
    ))
}

fn reduced(stage: u8) -> TrainConfig {
    TrainConfig {
        iterations: 2,
        batch_updates_per_iteration: 4,
        train_pool: 8,
        val_scenes: 2,
        seed: 9,
        ..TrainConfig::desk(stage)
    }
}

fn all_stages() -> dehaze::Result<Vec<Vec<u8>>> {
    let s1 = train_stage1(&reduced(1))?.models;
    let s2 = train_stage2(&reduced(2), s1.clone())?.models;
    let s3 = train_stage3(&reduced(3), s2.clone())?.models;
    Ok([(1, s1), (2, s2), (3, s3)]
        .iter()
        .map(|(s, m)| m.to_checkpoint(&reduced(*s)).to_bytes())
        .collect())
}

fn split_matches(cfg: TrainConfig, models: Models, at: u64, dir: &std::path::Path) -> dehaze::Result<bool> {
    let mut whole = Trainer::new(cfg.clone(), models.clone())?;
    whole.run()?;
    let mut part = Trainer::new(cfg, models)?;
    part.run_updates(at)?;
    let path = dir.join(format!("split-{at}.ckpt"));
    save_checkpoint(&path, &part.checkpoint())?;
    drop(part);
    let mut resumed = Trainer::resume(&load_checkpoint(&path)?)?;
    resumed.run()?;
    Ok(whole.checkpoint().to_bytes() == resumed.checkpoint().to_bytes()
        && whole.log().to_tsv() == resumed.log().to_tsv())
}

fn determinism() -> Check {
    let err = |e: dehaze::DehazeError| e.to_string();
    let first = all_stages().map_err(err)?;
    let second = all_stages().map_err(err)?;
    let identical = first == second;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let s1 = train_stage1(&reduced(1)).map_err(err)?.models;
    let s2 = train_stage2(&reduced(2), s1.clone()).map_err(err)?.models;
    let resumes = [
        split_matches(reduced(1), Models::new((&reduced(1)).into(), 9).map_err(err)?, 3, dir.path()),
        split_matches(reduced(2), s1, 4, dir.path()),
        split_matches(reduced(3), s2, 5, dir.path()),
    ];
    let resumed = resumes.into_iter().collect::<dehaze::Result<Vec<bool>>>().map_err(err)?;
    let ok = resumed.iter().filter(|b| **b).count();
    Ok((
        identical && ok == resumed.len(),
        format!(
            "duplicate 3-stage runs {}; {ok}/{} resumed stages bitwise equal",
            if identical { "identical" } else { "differ" },
            resumed.len()
        ),
    ))
}

/// Criteria selected by `DEHAZE_ACCEPTANCE_ONLY` (comma-separated ids);
/// all of them when unset.
fn selected() -> Vec<u8> {
    match std::env::var("DEHAZE_ACCEPTANCE_ONLY") {
        Ok(list) => list.split(',').filter_map(|s| s.trim().parse().ok()).collect(),
        Err(_) => (1..=10).collect(),
    }
}

fn main() -> ExitCode {
    let want = selected();
    let mut passed = Vec::new();
    let mut run = |id: u8, name: &str, f: &mut dyn FnMut() -> Check| {
        if want.contains(&id) {
            let start = Instant::now();
            let r = f();
            passed.push(report(id, name, r, start.elapsed()));
        }
    };
    run(1, "gradient conformance", &mut gradients);
    run(2, "physics round trip", &mut round_trip);
    run(3, "convolution and pooling oracles", &mut oracles);
    run(4, "CIEDE2000 conformance", &mut ciede);

    let bands = [HazeBand::Low, HazeBand::Mid, HazeBand::High, HazeBand::Cast];
    let trained = if [5, 6, 9].iter().any(|id| want.contains(id)) {
        Some(
            eval_suite(EVAL_SEED, EVAL_SCENES, EVAL_SIZE, &bands)
                .and_then(|cases| Ok((protocol(&cases)?, cases)))
                .map_err(|e| e.to_string()),
        )
    } else {
        None
    };
    let with_protocol = |f: fn(&Protocol) -> Check| match &trained {
        Some(Ok((p, _))) => f(p),
        Some(Err(e)) => Err(e.clone()),
        None => Err("training skipped".into()),
    };
    run(5, "desk training efficacy", &mut || with_protocol(efficacy));
    run(6, "stage-3 benefit", &mut || with_protocol(stage3_benefit));
    run(7, "pooling ablation direction", &mut pooling);
    run(8, "global atmospheric update", &mut || {
        let fresh = Models::new((&TrainConfig::default()).into(), 1).map_err(|e| e.to_string())?;
        if fresh.ipudn.config().locality != UpdateLocality::Global {
            return Err("default configuration does not use the global update".into());
        }
        let cases = eval_suite(EVAL_SEED + 1, 2, EVAL_SIZE, &bands).map_err(|e| e.to_string())?;
        let untrained = global_update("untrained", &fresh, &cases)?;
        match &trained {
            Some(Ok((p, held_out))) => {
                let tuned = global_update("trained", &p.models, held_out)?;
                Ok((untrained.0 && tuned.0, format!("{}; {}", untrained.1, tuned.1)))
            }
            _ => Ok(untrained),
        }
    });
    run(9, "color-cast handling", &mut || with_protocol(color_cast));
    run(10, "determinism and resume", &mut determinism);

    let failed = passed.iter().filter(|p| !**p).count();
    println!("{} of {} criteria passed", passed.len() - failed, passed.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
