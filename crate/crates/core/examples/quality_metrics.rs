//! PSNR, SSIM and CIEDE2000 of a hazy image and of a color-shifted copy.

use dehaze::pipeline::data::{gen_scene, HazySample};
use dehaze::pipeline::eval::Metrics;
use dehaze::{AtmosphericLight, HazeParams};

fn main() -> dehaze::Result<()> {
    let scene = gen_scene(11, 64);
    let gray = HazySample::new(&scene, HazeParams::new(1.2, AtmosphericLight::gray(0.85)?)?)?;
    let cast = HazySample::new(&scene, HazeParams::new(1.2, AtmosphericLight::new(0.85, 0.78, 0.5)?)?)?;
    for (label, img) in [("gray haze", &gray.hazy), ("yellow haze", &cast.hazy), ("clean", &scene.clean)] {
        let m = Metrics::measure(img, &scene.clean)?;
        println!("{label:<12} PSNR {:6.2}  SSIM {:.4}  CIEDE2000 {:6.2}", m.psnr, m.ssim, m.ciede2000);
    }
    Ok(())
}
