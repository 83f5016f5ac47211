//! Dehazes one generated image with a checkpoint and prints how the
//! airlight and transmission evolve over the recurrent steps.
//!
//! `cargo run --release --example dehaze_trace -- model.ckpt`
//! Without a checkpoint an untrained model is used.

use dehaze::pipeline::data::{gen_scene, HazySample};
use dehaze::pipeline::{load_checkpoint, Models, TrainConfig};
use dehaze::quality::psnr;
use dehaze::{AtmosphericLight, HazeParams};

fn main() -> dehaze::Result<()> {
    let (models, cfg) = match std::env::args().nth(1) {
        Some(p) => Models::from_checkpoint(&load_checkpoint(p.as_ref())?)?,
        None => {
            let cfg = TrainConfig::desk(3);
            (Models::new((&cfg).into(), 0)?, cfg)
        }
    };
    let haze = HazeParams::new(1.6, AtmosphericLight::new(0.9, 0.82, 0.6)?)?;
    let sample = HazySample::new(&gen_scene(2024, 64), haze)?;
    let out = models.dehaze(&sample.hazy, cfg.t1)?;
    println!("true airlight {:?}", sample.haze.airlight.rgb());
    println!("step  A'                        mean T'  PSNR");
    for s in std::iter::once(&out.trajectory.initial).chain(&out.trajectory.steps) {
        let a = s.airlight().rgb();
        let t_mean = s.t_prime.data().iter().sum::<f64>() / s.t_prime.pixels() as f64;
        println!(
            "{:>4}  [{:.3}, {:.3}, {:.3}]   {t_mean:.3}    {:.2}",
            s.step,
            a[0],
            a[1],
            a[2],
            psnr(&s.i_prime, &sample.clean, 1.0)?
        );
    }
    Ok(())
}
