//! Dark-channel-prior dehazing on a held-out suite, per haze band.

use dehaze::pipeline::data::HazeBand;
use dehaze::pipeline::eval::{band_means, eval_suite, evaluate};
use dehaze::scattering::{dehaze_dcp, DcpConfig};

fn main() -> dehaze::Result<()> {
    let bands = [HazeBand::Low, HazeBand::Mid, HazeBand::High, HazeBand::Cast];
    let cases = eval_suite(777, 8, 64, &bands)?;
    let hazy = evaluate(&cases, |s| Ok(s.hazy.clone()))?;
    let dcp = evaluate(&cases, |s| Ok(dehaze_dcp(&s.hazy, &DcpConfig::default())?.dehazed))?;
    println!("band    hazy PSNR  CIEDE   dcp PSNR  CIEDE");
    for ((band, h), (_, d)) in band_means(&cases, &hazy).into_iter().zip(band_means(&cases, &dcp)) {
        println!(
            "{:<6}  {:>8.2}  {:>6.2}  {:>8.2}  {:>6.2}",
            band.name(),
            h.psnr,
            h.ciede2000,
            d.psnr,
            d.ciede2000
        );
    }
    Ok(())
}
