//! Procedural scenes, haze sampling, augmentation and cropping.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DehazeError, Result};
use crate::image::{AtmosphericLight, HazeParams, ImagePlane};
use crate::scattering::{synthesize_haze, transmission_from_depth};

/// A clean image and its depth map (far = 1).
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub clean: ImagePlane,
    pub depth: ImagePlane,
}

/// Smooth random field on a coarse lattice, bilinearly interpolated.
fn value_noise(rng: &mut ChaCha8Rng, size: usize, cell: usize) -> Vec<f64> {
    let n = size / cell + 2;
    let lattice: Vec<f64> = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        let fy = y as f64 / cell as f64;
        let (y0, wy) = (fy.floor() as usize, fy.fract());
        for x in 0..size {
            let fx = x as f64 / cell as f64;
            let (x0, wx) = (fx.floor() as usize, fx.fract());
            let at = |yy: usize, xx: usize| lattice[yy * n + xx];
            let top = at(y0, x0) * (1.0 - wx) + at(y0, x0 + 1) * wx;
            let bot = at(y0 + 1, x0) * (1.0 - wx) + at(y0 + 1, x0 + 1) * wx;
            out.push(top * (1.0 - wy) + bot * wy);
        }
    }
    out
}

const GROUND: [[f64; 3]; 4] = [
    [0.16, 0.42, 0.07],
    [0.42, 0.28, 0.10],
    [0.14, 0.13, 0.12],
    [0.30, 0.36, 0.06],
];

const OBJECTS: [[f64; 3]; 9] = [
    [0.78, 0.10, 0.07],
    [0.08, 0.20, 0.72],
    [0.88, 0.70, 0.04],
    [0.07, 0.55, 0.16],
    [0.07, 0.06, 0.05],
    [0.42, 0.22, 0.06],
    [0.46, 0.08, 0.52],
    [0.05, 0.50, 0.55],
    [0.80, 0.80, 0.74],
];

/// Procedural outdoor-like scene: sky above a horizon, a textured ground
/// plane receding towards it, and coloured objects standing on the ground
/// with shadows at their base. Depth is 1 in the sky and decreases towards
/// the bottom of the frame.
pub fn gen_scene(seed: u64, size: usize) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size.max(1);
    let sf = s as f64;
    let horizon = (sf * rng.random_range(0.2..0.45)) as usize;
    let near = rng.random_range(0.03..0.12);
    let ground_far = rng.random_range(0.7..0.9);
    let ground_depth = |y: usize| {
        let u = (y - horizon) as f64 / (sf - horizon as f64).max(1.0);
        near + (ground_far - near) * (1.0 - u).powf(1.5)
    };

    let sky_level = rng.random_range(0.72..0.95);
    let sky = [
        sky_level * rng.random_range(0.82..0.98),
        sky_level * rng.random_range(0.9..1.0),
        sky_level,
    ];
    let ground = GROUND[rng.random_range(0..GROUND.len())];
    let ground_gain = rng.random_range(0.7..1.2);
    let coarse = value_noise(&mut rng, s, 8);
    let fine = value_noise(&mut rng, s, 2);

    let mut rgb = vec![[0.0f64; 3]; s * s];
    let mut depth = vec![1.0f64; s * s];
    for y in 0..s {
        for x in 0..s {
            let i = y * s + x;
            if y < horizon {
                let lift = 0.08 * y as f64 / horizon.max(1) as f64;
                rgb[i] = sky.map(|c| c + lift + 0.01 * coarse[i]);
            } else {
                let tex = 1.0 + 0.35 * coarse[i] + 0.15 * fine[i];
                rgb[i] = ground.map(|c| c * ground_gain * tex);
                depth[i] = ground_depth(y);
            }
        }
    }

    struct Obj {
        base: usize,
        top: usize,
        x0: usize,
        x1: usize,
        ellipse: bool,
        color: [f64; 3],
        depth: f64,
    }
    let count = rng.random_range(4..9);
    let mut objs: Vec<Obj> = (0..count)
        .map(|_| {
            let base = rng.random_range((horizon + 2).min(s - 1)..s);
            let nearness = (base - horizon) as f64 / (sf - horizon as f64).max(1.0);
            let height = (sf * rng.random_range(0.08..0.25) * (0.5 + nearness)).max(2.0) as usize;
            let width = (sf * rng.random_range(0.06..0.22) * (0.5 + nearness)).max(2.0) as usize;
            let cx = rng.random_range(0..s);
            let gain = rng.random_range(0.65..1.1);
            let color = OBJECTS[rng.random_range(0..OBJECTS.len())].map(|c| c * gain);
            Obj {
                base,
                top: base.saturating_sub(height),
                x0: cx.saturating_sub(width / 2),
                x1: (cx + width / 2 + 1).min(s),
                ellipse: rng.random_bool(0.4),
                color,
                depth: ground_depth(base),
            }
        })
        .collect();
    // painter's order: far objects first
    objs.sort_by(|a, b| b.depth.total_cmp(&a.depth));
    for o in &objs {
        let (cy, cx) = ((o.top + o.base) as f64 / 2.0, (o.x0 + o.x1) as f64 / 2.0);
        let (ry, rx) = (
            ((o.base - o.top) as f64 / 2.0).max(1.0),
            ((o.x1 - o.x0) as f64 / 2.0).max(1.0),
        );
        for y in o.base..(o.base + 3).min(s) {
            for x in o.x0..o.x1 {
                let i = y * s + x;
                if depth[i] >= o.depth {
                    rgb[i] = rgb[i].map(|c| c * 0.35);
                }
            }
        }
        for y in o.top..=o.base.min(s - 1) {
            for x in o.x0..o.x1 {
                if o.ellipse {
                    let (dy, dx) = ((y as f64 - cy) / ry, (x as f64 + 0.5 - cx) / rx);
                    if dy * dy + dx * dx > 1.0 {
                        continue;
                    }
                }
                let i = y * s + x;
                let shade = 1.1 - 0.25 * (y - o.top) as f64 / (o.base - o.top).max(1) as f64;
                let tex = 1.0 + 0.12 * fine[i];
                rgb[i] = o.color.map(|c| c * shade * tex);
                depth[i] = o.depth;
            }
        }
    }

    let clean = ImagePlane::from_fn(s, s, 3, |c, y, x| rgb[y * s + x][c].clamp(0.0, 1.0));
    let depth = ImagePlane::new(s, s, 1, depth).expect("sized");
    Scene { clean, depth }
}

/// Ranges used to draw random haze.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HazeSampling {
    pub beta_range: [f64; 2],
    pub a_range: [f64; 2],
    pub cast_probability: f64,
}

impl Default for HazeSampling {
    fn default() -> Self {
        HazeSampling {
            beta_range: [0.4, 2.5],
            a_range: [0.6, 1.0],
            cast_probability: 0.3,
        }
    }
}

impl HazeSampling {
    pub fn validate(&self) -> Result<()> {
        let ok = |r: [f64; 2]| r[0] <= r[1] && r[0].is_finite() && r[1].is_finite();
        if !ok(self.beta_range) || self.beta_range[0] < 0.0 {
            return Err(DehazeError::param("beta_range", format!("{:?}", self.beta_range)));
        }
        if !ok(self.a_range) || self.a_range[0] < 0.0 || self.a_range[1] > 1.0 {
            return Err(DehazeError::param("a_range", format!("{:?}", self.a_range)));
        }
        if !(0.0..=1.0).contains(&self.cast_probability) {
            return Err(DehazeError::param("cast_probability", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

fn uniform(rng: &mut impl RngExt, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..r[1])
    }
}

/// Tinted airlight: a gray level pulled down along one of three cast
/// directions (yellow, green, blue) with small per-channel jitter.
fn cast_airlight(rng: &mut impl RngExt, a_range: [f64; 2]) -> AtmosphericLight {
    const TINTS: [[f64; 3]; 3] = [[0.0, -0.1, -0.35], [-0.2, 0.0, -0.2], [-0.3, -0.1, 0.0]];
    let level = uniform(rng, a_range);
    let tint = TINTS[rng.random_range(0..TINTS.len())];
    let strength = rng.random_range(0.5..1.0);
    let rgb = [0, 1, 2].map(|c| level + strength * tint[c] + rng.random_range(-0.02..0.02));
    AtmosphericLight::saturating(rgb)
}

pub fn sample_haze_params(rng: &mut impl RngExt, cfg: &HazeSampling) -> Result<HazeParams> {
    cfg.validate()?;
    let beta = uniform(rng, cfg.beta_range);
    let cast = cfg.cast_probability > 0.0 && rng.random_bool(cfg.cast_probability);
    let airlight = if cast {
        cast_airlight(rng, cfg.a_range)
    } else {
        AtmosphericLight::gray(uniform(rng, cfg.a_range))?
    };
    HazeParams::new(beta, airlight)
}

/// Haze splits used for data generation and evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HazeBand {
    Low,
    Mid,
    High,
    Random,
    Cast,
}

impl HazeBand {
    pub const GRAY: [HazeBand; 3] = [HazeBand::Low, HazeBand::Mid, HazeBand::High];

    pub fn name(self) -> &'static str {
        match self {
            HazeBand::Low => "low",
            HazeBand::Mid => "mid",
            HazeBand::High => "high",
            HazeBand::Random => "random",
            HazeBand::Cast => "cast",
        }
    }

    pub fn parse(s: &str) -> Option<HazeBand> {
        [
            HazeBand::Low,
            HazeBand::Mid,
            HazeBand::High,
            HazeBand::Random,
            HazeBand::Cast,
        ]
        .into_iter()
        .find(|b| b.name() == s)
    }

    pub fn sampling(self) -> HazeSampling {
        let base = HazeSampling::default();
        let gray = |beta_range| HazeSampling {
            beta_range,
            cast_probability: 0.0,
            ..base
        };
        match self {
            HazeBand::Low => gray([0.4, 1.0]),
            HazeBand::Mid => gray([1.0, 1.7]),
            HazeBand::High => gray([1.7, 2.5]),
            HazeBand::Random => base,
            HazeBand::Cast => HazeSampling {
                beta_range: [0.8, 2.0],
                cast_probability: 1.0,
                ..base
            },
        }
    }
}

/// Estimated priors carried along with a sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Priors {
    pub transmission: ImagePlane,
    pub airlight: AtmosphericLight,
}

/// A scene with haze applied and its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct HazySample {
    pub clean: ImagePlane,
    pub depth: ImagePlane,
    pub transmission: ImagePlane,
    pub hazy: ImagePlane,
    pub haze: HazeParams,
    pub priors: Option<Priors>,
}

impl HazySample {
    pub fn new(scene: &Scene, haze: HazeParams) -> Result<Self> {
        let transmission = transmission_from_depth(&scene.depth, haze.beta)?;
        let hazy = synthesize_haze(&scene.clean, &transmission, haze.airlight)?;
        Ok(HazySample {
            clean: scene.clean.clone(),
            depth: scene.depth.clone(),
            transmission,
            hazy,
            haze,
            priors: None,
        })
    }

    fn map_planes(&self, f: impl Fn(&ImagePlane) -> Result<ImagePlane>) -> Result<HazySample> {
        Ok(HazySample {
            clean: f(&self.clean)?,
            depth: f(&self.depth)?,
            transmission: f(&self.transmission)?,
            hazy: f(&self.hazy)?,
            haze: self.haze,
            priors: match &self.priors {
                Some(p) => Some(Priors {
                    transmission: f(&p.transmission)?,
                    airlight: p.airlight,
                }),
                None => None,
            },
        })
    }

    pub fn crop(&self, y0: usize, x0: usize, size: usize) -> Result<HazySample> {
        self.map_planes(|p| p.crop(y0, x0, size, size))
    }
}

/// One of the eight symmetries of the square: `quarter_turns` clockwise
/// rotations applied after an optional horizontal mirror.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dihedral {
    pub quarter_turns: u8,
    pub mirror: bool,
}

impl Dihedral {
    pub const IDENTITY: Dihedral = Dihedral {
        quarter_turns: 0,
        mirror: false,
    };

    pub fn all() -> [Dihedral; 8] {
        std::array::from_fn(|k| Dihedral {
            quarter_turns: (k % 4) as u8,
            mirror: k >= 4,
        })
    }

    /// Position in [`Dihedral::all`].
    pub fn index(self) -> usize {
        self.quarter_turns as usize + if self.mirror { 4 } else { 0 }
    }

    pub fn inverse(self) -> Dihedral {
        if self.mirror {
            self
        } else {
            Dihedral {
                quarter_turns: (4 - self.quarter_turns) % 4,
                mirror: false,
            }
        }
    }

    pub fn apply(self, p: &ImagePlane) -> Result<ImagePlane> {
        let (h, w) = (p.height(), p.width());
        if self.quarter_turns % 2 == 1 && h != w {
            return Err(DehazeError::param(
                "augment",
                format!("rotation needs a square plane, got {h}x{w}"),
            ));
        }
        let mut out = p.clone();
        if self.mirror {
            out = ImagePlane::from_fn(h, w, p.channels(), |c, y, x| p.get(c, y, w - 1 - x));
        }
        for _ in 0..self.quarter_turns {
            let src = out;
            let (sh, sw) = (src.height(), src.width());
            // clockwise: out(y, x) = in(sh - 1 - x, y)
            out = ImagePlane::from_fn(sw, sh, p.channels(), |c, y, x| src.get(c, sh - 1 - x, y));
        }
        Ok(out)
    }
}

/// Applies one uniformly drawn symmetry to every plane of the sample.
pub fn augment(sample: &HazySample, rng: &mut impl RngExt) -> Result<(HazySample, Dihedral)> {
    let d = Dihedral::all()[rng.random_range(0..8)];
    Ok((sample.map_planes(|p| d.apply(p))?, d))
}

/// `count` random square windows of side `patch`, each taken from every
/// plane of the sample at the same offset.
pub fn extract_patches(
    sample: &HazySample,
    patch: usize,
    count: usize,
    rng: &mut impl RngExt,
) -> Result<Vec<HazySample>> {
    let (h, w) = (sample.hazy.height(), sample.hazy.width());
    if patch == 0 || patch > h || patch > w {
        return Err(DehazeError::param(
            "patch_size",
            format!("{patch} does not fit in {h}x{w}"),
        ));
    }
    (0..count)
        .map(|_| {
            let y0 = rng.random_range(0..=h - patch);
            let x0 = rng.random_range(0..=w - patch);
            sample.crop(y0, x0, patch)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_undoes_every_element() {
        let p = ImagePlane::from_fn(4, 4, 2, |c, y, x| (c * 16 + y * 4 + x) as f64);
        for d in Dihedral::all() {
            let there = d.apply(&p).unwrap();
            assert_eq!(d.inverse().apply(&there).unwrap(), p, "{d:?}");
        }
    }

    #[test]
    fn single_quarter_turn_is_clockwise() {
        let p = ImagePlane::from_fn(2, 2, 1, |_, y, x| (y * 2 + x) as f64);
        let r = Dihedral {
            quarter_turns: 1,
            mirror: false,
        }
        .apply(&p)
        .unwrap();
        // [[0,1],[2,3]] -> [[2,0],[3,1]]
        assert_eq!(r.data(), &[2.0, 0.0, 3.0, 1.0]);
    }

    #[test]
    fn rotation_of_rectangle_is_rejected() {
        let p = ImagePlane::filled(2, 3, 1, 0.0);
        let d = Dihedral {
            quarter_turns: 1,
            mirror: false,
        };
        assert!(d.apply(&p).is_err());
    }

    #[test]
    fn band_ranges_partition_gray_beta() {
        assert_eq!(HazeBand::Low.sampling().beta_range[1], HazeBand::Mid.sampling().beta_range[0]);
        assert_eq!(HazeBand::Mid.sampling().beta_range[1], HazeBand::High.sampling().beta_range[0]);
        assert_eq!(HazeBand::parse("cast"), Some(HazeBand::Cast));
        assert_eq!(HazeBand::parse("dense"), None);
    }
}
