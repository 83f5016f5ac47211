//! Haze formation `I = J t + (1 - t) A`, its closed-form inverse and the
//! dark-channel-prior baseline.

use crate::error::{DehazeError, Result};
use crate::image::{AtmosphericLight, ImagePlane};

/// Lower bound applied to transmission before dividing by it.
pub const DEFAULT_T_FLOOR: f64 = 0.05;

/// `t(x) = exp(-beta d(x))`.
pub fn transmission_from_depth(depth: &ImagePlane, beta: f64) -> Result<ImagePlane> {
    depth.require_channels(1, "transmission_from_depth")?;
    if !(beta >= 0.0) {
        return Err(DehazeError::param("beta", format!("must be >= 0, got {beta}")));
    }
    if depth.data().iter().any(|d| !(*d >= 0.0)) {
        return Err(DehazeError::param("depth", "values must be >= 0"));
    }
    Ok(depth.map(|d| (-beta * d).exp()))
}

/// Applies the scattering model per channel and clamps to `[0, 1]`.
pub fn synthesize_haze(
    clean: &ImagePlane,
    transmission: &ImagePlane,
    airlight: AtmosphericLight,
) -> Result<ImagePlane> {
    clean.require_channels(3, "synthesize_haze")?;
    transmission.require_channels(1, "synthesize_haze")?;
    clean.require_dims(transmission, "synthesize_haze")?;
    let t = transmission.channel(0);
    let a = airlight.rgb();
    let n = clean.pixels();
    let data = clean
        .data()
        .iter()
        .enumerate()
        .map(|(i, j)| {
            let (c, p) = (i / n, i % n);
            (j * t[p] + (1.0 - t[p]) * a[c]).clamp(0.0, 1.0)
        })
        .collect();
    ImagePlane::new(clean.height(), clean.width(), 3, data)
}

/// Recovers scene radiance from a hazy image given `t` and `A`.
pub fn invert_scattering(
    hazy: &ImagePlane,
    transmission: &ImagePlane,
    airlight: AtmosphericLight,
    t_floor: f64,
) -> Result<ImagePlane> {
    if !(t_floor > 0.0) {
        return Err(DehazeError::param("t_floor", format!("must be > 0, got {t_floor}")));
    }
    hazy.require_channels(3, "invert_scattering")?;
    transmission.require_channels(1, "invert_scattering")?;
    hazy.require_dims(transmission, "invert_scattering")?;
    let t = transmission.channel(0);
    let a = airlight.rgb();
    let n = hazy.pixels();
    let data = hazy
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let (c, p) = (i / n, i % n);
            ((v - a[c]) / t[p].max(t_floor) + a[c]).clamp(0.0, 1.0)
        })
        .collect();
    ImagePlane::new(hazy.height(), hazy.width(), 3, data)
}

fn check_patch(patch: usize) -> Result<()> {
    if patch % 2 == 1 {
        Ok(())
    } else {
        Err(DehazeError::param("patch", format!("must be odd, got {patch}")))
    }
}

/// Square min filter with truncated edge windows; separable since `min`
/// over a rectangle is a min of row minima.
fn min_filter(src: &[f64], h: usize, w: usize, patch: usize) -> Vec<f64> {
    let r = patch / 2;
    let mut rows = vec![0.0; h * w];
    for y in 0..h {
        let line = &src[y * w..(y + 1) * w];
        for x in 0..w {
            let (lo, hi) = (x.saturating_sub(r), (x + r).min(w - 1));
            rows[y * w + x] = line[lo..=hi].iter().copied().fold(f64::INFINITY, f64::min);
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let (lo, hi) = (y.saturating_sub(r), (y + r).min(h - 1));
        for x in 0..w {
            out[y * w + x] = (lo..=hi).map(|yy| rows[yy * w + x]).fold(f64::INFINITY, f64::min);
        }
    }
    out
}

fn channel_min(img: &ImagePlane, scale: [f64; 3]) -> Vec<f64> {
    (0..img.pixels())
        .map(|p| {
            (0..3)
                .map(|c| img.channel(c)[p] / scale[c])
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

/// Minimum over a `patch x patch` window and over channels.
pub fn dark_channel(img: &ImagePlane, patch: usize) -> Result<ImagePlane> {
    img.require_channels(3, "dark_channel")?;
    check_patch(patch)?;
    let mins = channel_min(img, [1.0; 3]);
    let data = min_filter(&mins, img.height(), img.width(), patch);
    ImagePlane::new(img.height(), img.width(), 1, data)
}

/// Mean colour of the `ceil(0.001 H W)` pixels with the brightest dark
/// channel; equal dark-channel values are taken in row-major order.
pub fn estimate_atmospheric_dcp(img: &ImagePlane, dark: &ImagePlane) -> Result<AtmosphericLight> {
    img.require_channels(3, "estimate_atmospheric_dcp")?;
    dark.require_channels(1, "estimate_atmospheric_dcp")?;
    img.require_dims(dark, "estimate_atmospheric_dcp")?;
    let n = img.pixels();
    if n == 0 {
        return Err(DehazeError::shape("estimate_atmospheric_dcp", "empty image"));
    }
    let count = (0.001 * n as f64).ceil() as usize;
    let d = dark.channel(0);
    let mut order: Vec<usize> = (0..n).collect();
    // stable sort keeps row-major order among ties
    order.sort_by(|&a, &b| d[b].total_cmp(&d[a]));
    let mut acc = [0.0; 3];
    for &p in &order[..count] {
        for (c, a) in acc.iter_mut().enumerate() {
            *a += img.channel(c)[p];
        }
    }
    Ok(AtmosphericLight::saturating(acc.map(|a| a / count as f64)))
}

/// `t = 1 - omega * dark_channel(I / A)`, clamped to `[t_floor, 1]`.
pub fn estimate_transmission_dcp(
    img: &ImagePlane,
    airlight: AtmosphericLight,
    omega: f64,
    patch: usize,
) -> Result<ImagePlane> {
    img.require_channels(3, "estimate_transmission_dcp")?;
    check_patch(patch)?;
    if !(omega > 0.0 && omega <= 1.0) {
        return Err(DehazeError::param("omega", format!("must lie in (0, 1], got {omega}")));
    }
    let a = airlight.rgb();
    if a.iter().any(|v| *v <= 0.0) {
        return Err(DehazeError::param(
            "atmospheric light",
            format!("components must be positive, got {a:?}"),
        ));
    }
    let ratio = channel_min(img, a);
    let data = min_filter(&ratio, img.height(), img.width(), patch)
        .into_iter()
        .map(|d| (1.0 - omega * d).clamp(DEFAULT_T_FLOOR, 1.0))
        .collect();
    ImagePlane::new(img.height(), img.width(), 1, data)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DcpConfig {
    pub omega: f64,
    pub patch: usize,
    pub t_floor: f64,
}

impl Default for DcpConfig {
    fn default() -> Self {
        DcpConfig {
            omega: 0.95,
            patch: 15,
            t_floor: DEFAULT_T_FLOOR,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DcpOutput {
    pub dehazed: ImagePlane,
    pub transmission: ImagePlane,
    pub airlight: AtmosphericLight,
}

/// Dark channel, airlight, transmission, inversion.
pub fn dehaze_dcp(img: &ImagePlane, cfg: &DcpConfig) -> Result<DcpOutput> {
    let dark = dark_channel(img, cfg.patch)?;
    let airlight = estimate_atmospheric_dcp(img, &dark)?;
    // a black airlight component would make I / A undefined
    let airlight = AtmosphericLight::saturating(airlight.rgb().map(|v| v.max(1e-3)));
    let transmission = estimate_transmission_dcp(img, airlight, cfg.omega, cfg.patch)?;
    let dehazed = invert_scattering(img, &transmission, airlight, cfg.t_floor)?;
    Ok(DcpOutput {
        dehazed,
        transmission,
        airlight,
    })
}
