//! Runs the three training stages at desk scale and compares the result
//! with the hazy input and the dark channel prior.
//!
//! `cargo run --release --example train_desk -- [out.ckpt] [--quick]`
//! `--quick` cuts every stage to a few iterations.

use dehaze::pipeline::data::HazeBand;
use dehaze::pipeline::eval::{band_means, eval_suite, evaluate, EvalCase, Metrics};
use dehaze::pipeline::{save_checkpoint, train_stage1, train_stage2, train_stage3, Models, TrainConfig};
use dehaze::scattering::{dehaze_dcp, DcpConfig};

fn config(stage: u8, quick: bool) -> TrainConfig {
    let mut c = TrainConfig::desk(stage);
    if quick {
        c.iterations = 2;
        c.batch_updates_per_iteration = 10;
        c.train_pool = 16;
        c.val_scenes = 2;
    }
    c
}

fn report(label: &str, cases: &[EvalCase], metrics: &[Metrics]) {
    let row: Vec<String> = band_means(cases, metrics)
        .iter()
        .map(|(b, m)| format!("{} {:.2} dB / {:.2}", b.name(), m.psnr, m.ciede2000))
        .collect();
    println!("{label:<8} {}", row.join("   "));
}

fn main() -> dehaze::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let quick = args.iter().any(|a| a == "--quick");
    let out = args.iter().find(|a| !a.starts_with("--")).cloned();

    let s1 = train_stage1(&config(1, quick))?;
    println!("stage 1 best validation {:?}", s1.log.best_validation());
    let s2 = train_stage2(&config(2, quick), s1.models)?;
    println!("stage 2 best validation {:?}", s2.log.best_validation());
    let cfg3 = config(3, quick);
    let s3 = train_stage3(&cfg3, s2.models.clone())?;
    println!("stage 3 best validation {:?}", s3.log.best_validation());

    let bands = [HazeBand::Low, HazeBand::Mid, HazeBand::High, HazeBand::Cast];
    let cases = eval_suite(777, if quick { 2 } else { 8 }, 64, &bands)?;
    let run = |m: &Models| evaluate(&cases, |s| Ok(m.dehaze(&s.hazy, cfg3.t1)?.image));
    report("hazy", &cases, &evaluate(&cases, |s| Ok(s.hazy.clone()))?);
    report("dcp", &cases, &evaluate(&cases, |s| Ok(dehaze_dcp(&s.hazy, &DcpConfig::default())?.dehazed))?);
    report("stage 2", &cases, &run(&s2.models)?);
    report("stage 3", &cases, &run(&s3.models)?);

    if let Some(path) = out {
        save_checkpoint(path.as_ref(), &s3.models.to_checkpoint(&cfg3))?;
        println!("wrote {path}");
    }
    Ok(())
}
