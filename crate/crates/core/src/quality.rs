//! Training losses and evaluation metrics.

use dehaze_tensor::{Bound, Graph, ModelParams, PoolKind, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DehazeError, Result};
use crate::image::ImagePlane;
use crate::nn::Conv;

/// Reported PSNR for identical images and the ceiling for all others.
pub const PSNR_CAP: f64 = 99.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    L1,
    Mse,
    /// L1 averaged over the outputs of every time step.
    RecursiveL1,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub lambda_p: f64,
    pub kind: LossKind,
    pub perceptual: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_p: 0.8,
            kind: LossKind::L1,
            perceptual: true,
        }
    }
}

fn same_shape(g: &Graph, a: Var, b: Var, op: &'static str) -> Result<()> {
    if g.shape(a) == g.shape(b) {
        Ok(())
    } else {
        Err(DehazeError::shape(
            op,
            format!("{:?} against {:?}", g.shape(a), g.shape(b)),
        ))
    }
}

pub fn l1_loss(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    same_shape(g, a, b, "l1_loss")?;
    let d = g.sub(a, b)?;
    let d = g.abs(d);
    Ok(g.mean(d))
}

pub fn mse_loss(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    same_shape(g, a, b, "mse_loss")?;
    let d = g.sub(a, b)?;
    let d = g.square(d);
    Ok(g.mean(d))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimConfig {
    pub window: usize,
    pub sigma: f64,
    pub c1: f64,
    pub c2: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        SsimConfig {
            window: 11,
            sigma: 1.5,
            c1: 0.01f64.powi(2),
            c2: 0.03f64.powi(2),
        }
    }
}

impl SsimConfig {
    /// Normalized separable Gaussian as a `[window, window]` kernel.
    pub fn kernel(&self) -> Tensor {
        let r = (self.window / 2) as f64;
        let g1: Vec<f64> = (0..self.window)
            .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * self.sigma * self.sigma)).exp())
            .collect();
        let s: f64 = g1.iter().sum();
        let n = self.window;
        Tensor::from_fn([n, n], |i| g1[i / n] * g1[i % n] / (s * s))
    }
}

/// Mean local SSIM of two `[N, C, H, W]` tensors over valid windows,
/// averaged over channels and samples.
pub fn ssim_graph(g: &mut Graph, a: Var, b: Var, cfg: &SsimConfig) -> Result<Var> {
    same_shape(g, a, b, "ssim")?;
    if cfg.window.is_multiple_of(2) {
        return Err(DehazeError::param("ssim window", "must be odd"));
    }
    let (_, _, h, w) = g.value(a).dims4("ssim")?;
    if cfg.window > h || cfg.window > w {
        return Err(DehazeError::param(
            "ssim window",
            format!("{} exceeds image {h}x{w}", cfg.window),
        ));
    }
    let k = cfg.kernel();
    let mu_a = g.depthwise_fixed(a, &k)?;
    let mu_b = g.depthwise_fixed(b, &k)?;
    let aa = g.mul(a, a)?;
    let bb = g.mul(b, b)?;
    let ab = g.mul(a, b)?;
    let e_aa = g.depthwise_fixed(aa, &k)?;
    let e_bb = g.depthwise_fixed(bb, &k)?;
    let e_ab = g.depthwise_fixed(ab, &k)?;
    let mu_aa = g.mul(mu_a, mu_a)?;
    let mu_bb = g.mul(mu_b, mu_b)?;
    let mu_ab = g.mul(mu_a, mu_b)?;
    let var_a = g.sub(e_aa, mu_aa)?;
    let var_b = g.sub(e_bb, mu_bb)?;
    let cov = g.sub(e_ab, mu_ab)?;

    let l_num = g.scale(mu_ab, 2.0);
    let l_num = g.offset(l_num, cfg.c1);
    let c_num = g.scale(cov, 2.0);
    let c_num = g.offset(c_num, cfg.c2);
    let num = g.mul(l_num, c_num)?;
    let l_den = g.add(mu_aa, mu_bb)?;
    let l_den = g.offset(l_den, cfg.c1);
    let c_den = g.add(var_a, var_b)?;
    let c_den = g.offset(c_den, cfg.c2);
    let den = g.mul(l_den, c_den)?;
    let map = g.div(num, den)?;
    Ok(g.mean(map))
}

/// `1 - SSIM`.
pub fn ssim_loss_graph(g: &mut Graph, pred: Var, target: Var, cfg: &SsimConfig) -> Result<Var> {
    let s = ssim_graph(g, pred, target, cfg)?;
    let neg = g.scale(s, -1.0);
    Ok(g.offset(neg, 1.0))
}

pub fn ssim(a: &ImagePlane, b: &ImagePlane, cfg: &SsimConfig) -> Result<f64> {
    a.require_dims(b, "ssim")?;
    a.require_channels(b.channels(), "ssim")?;
    let mut g = Graph::new();
    let (x, y) = (g.constant(a.to_tensor()), g.constant(b.to_tensor()));
    let s = ssim_graph(&mut g, x, y, cfg)?;
    Ok(g.value(s).data()[0])
}

/// `1 - SSIM` between two single-channel maps with default constants.
pub fn ssim_loss(pred: &ImagePlane, target: &ImagePlane) -> Result<f64> {
    Ok(1.0 - ssim(pred, target, &SsimConfig::default())?)
}

/// Frozen random convnet standing in for pretrained perceptual features.
///
/// Four 3x3 conv+ReLU layers of widths 8, 16, 16, 32 with a 2x average
/// downsample after the second layer.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    seed: u64,
    params: ModelParams,
    layers: Vec<Conv>,
}

impl FeatureExtractor {
    pub const WIDTHS: [usize; 4] = [8, 16, 16, 32];
    pub const DEFAULT_SEED: u64 = 0x5EED_FEA7;

    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ModelParams::new();
        let mut cin = 3;
        let layers = Self::WIDTHS
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let layer = Conv::new(&mut params, &mut rng, &format!("phi{i}"), cin, w, 3);
                cin = w;
                layer
            })
            .collect();
        FeatureExtractor {
            seed,
            params,
            layers,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn features(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let b: Bound = g.bind_frozen(&self.params);
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, &b, h)?;
            h = g.relu(h);
            if i == 1 {
                h = g.pool2d(h, PoolKind::Avg, 2, 2, 2)?;
            }
        }
        Ok(h)
    }
}

impl Default for FeatureExtractor {
    fn default() -> Self {
        Self::new(Self::DEFAULT_SEED)
    }
}

/// Mean absolute difference of extracted features.
pub fn perceptual_loss(g: &mut Graph, pred: Var, gt: Var, fe: &FeatureExtractor) -> Result<Var> {
    same_shape(g, pred, gt, "perceptual_loss")?;
    let fp = fe.features(g, pred)?;
    let fg = fe.features(g, gt)?;
    l1_loss(g, fp, fg)
}

/// Reconstruction loss of a sequence of step outputs against `gt`.
///
/// Only the last output is supervised except for
/// [`LossKind::RecursiveL1`], whose pixel term averages every step.
pub fn total_loss(
    g: &mut Graph,
    outputs: &[Var],
    gt: Var,
    cfg: &LossConfig,
    fe: &FeatureExtractor,
) -> Result<Var> {
    let Some(&last) = outputs.last() else {
        return Err(DehazeError::param("outputs", "no step outputs to supervise"));
    };
    if !(cfg.lambda_p >= 0.0) {
        return Err(DehazeError::param("lambda_p", "must be >= 0"));
    }
    let pixel = match cfg.kind {
        LossKind::L1 => l1_loss(g, last, gt)?,
        LossKind::Mse => mse_loss(g, last, gt)?,
        LossKind::RecursiveL1 => {
            let mut acc = l1_loss(g, outputs[0], gt)?;
            for &o in &outputs[1..] {
                let l = l1_loss(g, o, gt)?;
                acc = g.add(acc, l)?;
            }
            g.scale(acc, 1.0 / outputs.len() as f64)
        }
    };
    if !cfg.perceptual || cfg.lambda_p == 0.0 {
        return Ok(pixel);
    }
    let p = perceptual_loss(g, last, gt, fe)?;
    let p = g.scale(p, cfg.lambda_p);
    Ok(g.add(pixel, p)?)
}

pub fn mse(a: &ImagePlane, b: &ImagePlane) -> Result<f64> {
    a.require_dims(b, "mse")?;
    a.require_channels(b.channels(), "mse")?;
    let n = a.data().len() as f64;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n)
}

/// Peak signal-to-noise ratio in decibels, capped at [`PSNR_CAP`].
pub fn psnr(a: &ImagePlane, b: &ImagePlane, peak: f64) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / m).log10()).min(PSNR_CAP))
}

fn srgb_to_linear(v: f64) -> f64 {
    if v <= 0.04045 {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    }
}

/// sRGB in `[0, 1]` to CIE L*a*b* under D65.
pub fn srgb_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    let [r, g, b] = rgb.map(srgb_to_linear);
    let x = 0.4124564 * r + 0.3575761 * g + 0.1804375 * b;
    let y = 0.2126729 * r + 0.7151522 * g + 0.0721750 * b;
    let z = 0.0193339 * r + 0.1191920 * g + 0.9503041 * b;
    let f = |t: f64| {
        const DELTA: f64 = 6.0 / 29.0;
        if t > DELTA.powi(3) {
            t.cbrt()
        } else {
            t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
        }
    };
    let (fx, fy, fz) = (f(x / 0.95047), f(y / 1.0), f(z / 1.08883));
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

/// CIEDE2000 colour difference of two Lab triples with unit weights.
pub fn delta_e2000(lab1: [f64; 3], lab2: [f64; 3]) -> f64 {
    use std::f64::consts::PI;
    let [l1, a1, b1] = lab1;
    let [l2, a2, b2] = lab2;
    let c_bar = ((a1 * a1 + b1 * b1).sqrt() + (a2 * a2 + b2 * b2).sqrt()) / 2.0;
    let c7 = c_bar.powi(7);
    let gfac = 0.5 * (1.0 - (c7 / (c7 + 25f64.powi(7))).sqrt());
    let (a1p, a2p) = ((1.0 + gfac) * a1, (1.0 + gfac) * a2);
    let (c1p, c2p) = ((a1p * a1p + b1 * b1).sqrt(), (a2p * a2p + b2 * b2).sqrt());
    let hue = |b: f64, a: f64| {
        if a == 0.0 && b == 0.0 {
            0.0
        } else {
            let h = b.atan2(a);
            if h < 0.0 {
                h + 2.0 * PI
            } else {
                h
            }
        }
    };
    let (h1p, h2p) = (hue(b1, a1p), hue(b2, a2p));

    let dl = l2 - l1;
    let dc = c2p - c1p;
    let dh = if c1p * c2p == 0.0 {
        0.0
    } else {
        let d = h2p - h1p;
        if d > PI {
            d - 2.0 * PI
        } else if d < -PI {
            d + 2.0 * PI
        } else {
            d
        }
    };
    let dh_big = 2.0 * (c1p * c2p).sqrt() * (dh / 2.0).sin();

    let l_bar = (l1 + l2) / 2.0;
    let c_bar_p = (c1p + c2p) / 2.0;
    let h_bar = if c1p * c2p == 0.0 {
        h1p + h2p
    } else if (h1p - h2p).abs() <= PI {
        (h1p + h2p) / 2.0
    } else if h1p + h2p < 2.0 * PI {
        (h1p + h2p + 2.0 * PI) / 2.0
    } else {
        (h1p + h2p - 2.0 * PI) / 2.0
    };
    let t = 1.0 - 0.17 * (h_bar - PI / 6.0).cos() + 0.24 * (2.0 * h_bar).cos()
        + 0.32 * (3.0 * h_bar + PI / 30.0).cos()
        - 0.20 * (4.0 * h_bar - 63f64.to_radians()).cos();
    let d_theta = 30f64.to_radians() * (-((h_bar.to_degrees() - 275.0) / 25.0).powi(2)).exp();
    let cb7 = c_bar_p.powi(7);
    let r_c = 2.0 * (cb7 / (cb7 + 25f64.powi(7))).sqrt();
    let l50 = (l_bar - 50.0).powi(2);
    let s_l = 1.0 + 0.015 * l50 / (20.0 + l50).sqrt();
    let s_c = 1.0 + 0.045 * c_bar_p;
    let s_h = 1.0 + 0.015 * c_bar_p * t;
    let r_t = -(2.0 * d_theta).sin() * r_c;
    let (tl, tc, th) = (dl / s_l, dc / s_c, dh_big / s_h);
    (tl * tl + tc * tc + th * th + r_t * tc * th).sqrt()
}

/// Mean per-pixel CIEDE2000 between two RGB images.
pub fn ciede2000(a: &ImagePlane, b: &ImagePlane) -> Result<f64> {
    a.require_channels(3, "ciede2000")?;
    b.require_channels(3, "ciede2000")?;
    a.require_dims(b, "ciede2000")?;
    let n = a.pixels();
    let px = |img: &ImagePlane, p: usize| [img.channel(0)[p], img.channel(1)[p], img.channel(2)[p]];
    let total: f64 = (0..n)
        .map(|p| delta_e2000(srgb_to_lab(px(a, p)), srgb_to_lab(px(b, p))))
        .sum();
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_examples() {
        let a = ImagePlane::filled(4, 4, 3, 0.3);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), PSNR_CAP);
        let b = a.map(|v| v + 0.1);
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-9);
        let zero = ImagePlane::filled(4, 4, 3, 0.0);
        let one = ImagePlane::filled(4, 4, 3, 1.0);
        assert!(psnr(&zero, &one, 1.0).unwrap().abs() < 1e-12);
    }

    #[test]
    fn gaussian_kernel_is_normalized_and_symmetric() {
        let k = SsimConfig::default().kernel();
        assert!((k.sum() - 1.0).abs() < 1e-14);
        assert_eq!(k.data()[0], k.data()[120]);
        assert!(k.data()[60] > k.data()[59]);
    }

    #[test]
    fn ssim_rejects_oversized_window() {
        let a = ImagePlane::filled(8, 8, 1, 0.5);
        assert!(matches!(
            ssim(&a, &a, &SsimConfig::default()),
            Err(DehazeError::Param { .. })
        ));
    }

    #[test]
    fn ciede_of_identical_images_is_zero() {
        let a = ImagePlane::from_fn(3, 3, 3, |c, y, x| ((c + y * 3 + x) % 5) as f64 / 4.0);
        assert_eq!(ciede2000(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn white_maps_to_lab_white() {
        let lab = srgb_to_lab([1.0, 1.0, 1.0]);
        assert!((lab[0] - 100.0).abs() < 1e-3);
        assert!(lab[1].abs() < 1e-2 && lab[2].abs() < 1e-2);
    }

    #[test]
    fn lambda_zero_total_loss_is_l1() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::full([1, 3, 8, 8], 0.4));
        let t = g.constant(Tensor::full([1, 3, 8, 8], 0.1));
        let cfg = LossConfig {
            lambda_p: 0.0,
            ..LossConfig::default()
        };
        let fe = FeatureExtractor::default();
        let l = total_loss(&mut g, &[p], t, &cfg, &fe).unwrap();
        assert!((g.value(l).data()[0] - 0.3).abs() < 1e-15);
    }
}
