//! Held-out evaluation suites and metric aggregation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand::RngExt;
use rayon::prelude::*;

use crate::error::Result;
use crate::image::ImagePlane;
use crate::pipeline::data::{gen_scene, sample_haze_params, HazeBand, HazySample};
use crate::quality::{ciede2000, psnr, ssim, SsimConfig};

const STREAM_EVAL: u64 = 40;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalCase {
    pub band: HazeBand,
    pub sample: HazySample,
}

/// `scenes` fresh scenes per band. Scene seeds come from a stream no
/// training or validation draw uses.
pub fn eval_suite(seed: u64, scenes: usize, size: usize, bands: &[HazeBand]) -> Result<Vec<EvalCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(STREAM_EVAL);
    let mut plan = Vec::with_capacity(scenes * bands.len());
    for &band in bands {
        for _ in 0..scenes {
            let scene_seed: u64 = rng.random();
            plan.push((band, scene_seed, sample_haze_params(&mut rng, &band.sampling())?));
        }
    }
    plan.into_par_iter()
        .map(|(band, s, haze)| {
            Ok(EvalCase {
                band,
                sample: HazySample::new(&gen_scene(s, size), haze)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub psnr: f64,
    pub ssim: f64,
    pub ciede2000: f64,
}

impl Metrics {
    pub fn measure(pred: &ImagePlane, gt: &ImagePlane) -> Result<Self> {
        Ok(Metrics {
            psnr: psnr(pred, gt, 1.0)?,
            ssim: ssim(pred, gt, &SsimConfig::default())?,
            ciede2000: ciede2000(pred, gt)?,
        })
    }

    pub fn mean(items: &[Metrics]) -> Metrics {
        let n = items.len().max(1) as f64;
        let sum = |f: fn(&Metrics) -> f64| items.iter().map(f).sum::<f64>() / n;
        Metrics {
            psnr: sum(|m| m.psnr),
            ssim: sum(|m| m.ssim),
            ciede2000: sum(|m| m.ciede2000),
        }
    }
}

/// Metrics of `method` applied to the hazy image of every case.
pub fn evaluate<F>(cases: &[EvalCase], method: F) -> Result<Vec<Metrics>>
where
    F: Fn(&HazySample) -> Result<ImagePlane> + Sync,
{
    cases
        .par_iter()
        .map(|c| Metrics::measure(&method(&c.sample)?, &c.sample.clean))
        .collect()
}

/// Mean metrics per band, in order of first appearance.
pub fn band_means(cases: &[EvalCase], metrics: &[Metrics]) -> Vec<(HazeBand, Metrics)> {
    let mut bands: Vec<HazeBand> = Vec::new();
    for c in cases {
        if !bands.contains(&c.band) {
            bands.push(c.band);
        }
    }
    bands
        .into_iter()
        .map(|b| {
            let sel: Vec<Metrics> = cases
                .iter()
                .zip(metrics)
                .filter(|(c, _)| c.band == b)
                .map(|(_, m)| *m)
                .collect();
            (b, Metrics::mean(&sel))
        })
        .collect()
}
