//! Synthesizes haze on a procedural scene at the three gray bands and
//! inverts it with the true priors.

use dehaze::pipeline::data::{gen_scene, HazeBand, HazySample};
use dehaze::pipeline::eval::Metrics;
use dehaze::scattering::{invert_scattering, DEFAULT_T_FLOOR};
use dehaze::{AtmosphericLight, HazeParams};

fn main() -> dehaze::Result<()> {
    let scene = gen_scene(7, 64);
    println!("band  beta   t_min   hazy PSNR  inverted PSNR");
    for band in HazeBand::GRAY {
        let [lo, hi] = band.sampling().beta_range;
        let beta = 0.5 * (lo + hi);
        let s = HazySample::new(&scene, HazeParams::new(beta, AtmosphericLight::gray(0.85)?)?)?;
        let back = invert_scattering(&s.hazy, &s.transmission, s.haze.airlight, DEFAULT_T_FLOOR)?;
        let t_min = s.transmission.data().iter().copied().fold(f64::INFINITY, f64::min);
        println!(
            "{:<5} {beta:.2}   {t_min:.3}   {:>8.2}   {:>8.2}",
            band.name(),
            Metrics::measure(&s.hazy, &s.clean)?.psnr,
            Metrics::measure(&back, &s.clean)?.psnr,
        );
    }
    Ok(())
}
