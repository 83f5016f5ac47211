//! Stage-one prior estimators: a dense encoder-decoder for the
//! transmission map and a pooled convnet for channel-wise airlight.

use dehaze_tensor::{Bound, Graph, ModelParams, PoolKind, Var};
use rand::RngExt;
use serde::{Deserialize, Serialize};

use crate::error::{DehazeError, Result};
use crate::image::{AtmosphericLight, ImagePlane};
use crate::nn::{Conv, ConvNormRelu};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransmissionConfig {
    /// Channel width of each encoder level; the level count is its length.
    pub widths: Vec<usize>,
}

impl Default for TransmissionConfig {
    fn default() -> Self {
        TransmissionConfig {
            widths: vec![16, 32, 64],
        }
    }
}

#[derive(Debug, Clone)]
struct DenseBlock {
    a: Conv,
    b: Conv,
}

/// Encoder-decoder producing a transmission map in `(0, 1)`.
///
/// Each encoder level runs a two-convolution dense block (the second
/// convolution sees the level input and the first output) and halves the
/// resolution by average pooling. Each decoder level upsamples bilinearly
/// and concatenates both same-resolution encoder activations.
#[derive(Debug, Clone)]
pub struct TransmissionEstimator {
    config: TransmissionConfig,
    params: ModelParams,
    encoder: Vec<DenseBlock>,
    bottleneck: Conv,
    decoder: Vec<Conv>,
    head: Conv,
}

impl TransmissionEstimator {
    pub fn new<R: RngExt + ?Sized>(config: TransmissionConfig, rng: &mut R) -> Result<Self> {
        if config.widths.is_empty() || config.widths.contains(&0) {
            return Err(DehazeError::param("transmission widths", "need positive widths"));
        }
        let mut params = ModelParams::new();
        let mut cin = 3;
        let mut encoder = Vec::new();
        for (l, &w) in config.widths.iter().enumerate() {
            let a = Conv::new(&mut params, rng, &format!("enc{l}.a"), cin, w, 3);
            let b = Conv::new(&mut params, rng, &format!("enc{l}.b"), cin + w, w, 3);
            encoder.push(DenseBlock { a, b });
            cin = w;
        }
        let deepest = *config.widths.last().expect("non-empty");
        let bottleneck = Conv::new(&mut params, rng, "bottleneck", deepest, deepest, 3);
        let mut decoder = Vec::new();
        let mut below = deepest;
        for (l, &w) in config.widths.iter().enumerate().rev() {
            decoder.push(Conv::new(&mut params, rng, &format!("dec{l}"), below + 2 * w, w, 3));
            below = w;
        }
        let head = Conv::new(&mut params, rng, "head", config.widths[0], 1, 3);
        Ok(TransmissionEstimator {
            config,
            params,
            encoder,
            bottleneck,
            decoder,
            head,
        })
    }

    pub fn config(&self) -> &TransmissionConfig {
        &self.config
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParams {
        &mut self.params
    }

    /// Side length every input is padded to a multiple of.
    pub fn granularity(&self) -> usize {
        1 << self.config.widths.len()
    }

    /// `[N, 3, H, W]` to `[N, 1, H, W]`.
    pub fn forward(&self, g: &mut Graph, b: &Bound, image: Var) -> Result<Var> {
        let (_, c, h, w) = g.value(image).dims4("transmission estimator")?;
        if c != 3 {
            return Err(DehazeError::shape("transmission estimator", format!("{c} channels")));
        }
        let m = self.granularity();
        let (ph, pw) = ((m - h % m) % m, (m - w % m) % m);
        let mut x = if ph + pw > 0 {
            g.reflect_pad(image, ph, pw)?
        } else {
            image
        };
        let mut skips = Vec::new();
        for block in &self.encoder {
            let a = block.a.forward(g, b, x)?;
            let a = g.relu(a);
            let xa = g.concat_channels(&[x, a])?;
            let bb = block.b.forward(g, b, xa)?;
            let bb = g.relu(bb);
            skips.push((a, bb));
            x = g.pool2d(bb, PoolKind::Avg, 2, 2, 2)?;
        }
        let y = self.bottleneck.forward(g, b, x)?;
        let mut y = g.relu(y);
        for (conv, &(a, bb)) in self.decoder.iter().zip(skips.iter().rev()) {
            let s = g.shape(a);
            let (sh, sw) = (s[2], s[3]);
            let up = g.resize_bilinear(y, sh, sw)?;
            let cat = g.concat_channels(&[up, a, bb])?;
            let d = conv.forward(g, b, cat)?;
            y = g.relu(d);
        }
        let t = self.head.forward(g, b, y)?;
        let t = g.sigmoid(t);
        if ph + pw > 0 {
            Ok(g.crop(t, 0, 0, h, w)?)
        } else {
            Ok(t)
        }
    }

    pub fn estimate(&self, image: &ImagePlane) -> Result<ImagePlane> {
        image.require_channels(3, "estimate_transmission")?;
        let mut g = Graph::new();
        let b = g.bind_frozen(&self.params);
        let x = g.constant(image.to_tensor());
        let t = self.forward(&mut g, &b, x)?;
        ImagePlane::from_tensor(g.value(t), 0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AtmosphericConfig {
    /// Width of each conv pair; pairs are separated by 7x7 stride-2 max pools.
    pub widths: Vec<usize>,
    pub groups: usize,
    pub global_pool: PoolChoice,
}

/// Serializable mirror of [`PoolKind`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolChoice {
    Max,
    Avg,
}

impl From<PoolChoice> for PoolKind {
    fn from(p: PoolChoice) -> PoolKind {
        match p {
            PoolChoice::Max => PoolKind::Max,
            PoolChoice::Avg => PoolKind::Avg,
        }
    }
}

impl Default for AtmosphericConfig {
    fn default() -> Self {
        AtmosphericConfig {
            widths: vec![16, 32, 64],
            groups: 8,
            global_pool: PoolChoice::Max,
        }
    }
}

/// Smallest accepted input side for the atmospheric estimator.
pub const MIN_ATMOSPHERIC_INPUT: usize = 64;

#[derive(Debug, Clone)]
pub struct AtmosphericEstimator {
    config: AtmosphericConfig,
    params: ModelParams,
    pairs: Vec<(ConvNormRelu, ConvNormRelu)>,
    head: Conv,
}

impl AtmosphericEstimator {
    pub fn new<R: RngExt + ?Sized>(config: AtmosphericConfig, rng: &mut R) -> Result<Self> {
        if config.widths.is_empty()
            || config.groups == 0
            || config.widths.iter().any(|w| *w == 0 || w % config.groups != 0)
        {
            return Err(DehazeError::param(
                "atmospheric widths",
                format!("{:?} must be positive multiples of {} groups", config.widths, config.groups),
            ));
        }
        let mut params = ModelParams::new();
        let mut cin = 3;
        let mut pairs = Vec::new();
        for (k, &w) in config.widths.iter().enumerate() {
            let first = ConvNormRelu::new(&mut params, rng, &format!("pair{k}.0"), cin, w, config.groups);
            let second = ConvNormRelu::new(&mut params, rng, &format!("pair{k}.1"), w, w, config.groups);
            pairs.push((first, second));
            cin = w;
        }
        let head = Conv::new(&mut params, rng, "head", cin + 3, 3, 3);
        Ok(AtmosphericEstimator {
            config,
            params,
            pairs,
            head,
        })
    }

    pub fn config(&self) -> &AtmosphericConfig {
        &self.config
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParams {
        &mut self.params
    }

    /// `[N, 3, H, W]` to `[N, 3, 1, 1]` airlight in `(0, 1)`.
    pub fn forward(&self, g: &mut Graph, b: &Bound, image: Var) -> Result<Var> {
        let (_, c, h, w) = g.value(image).dims4("atmospheric estimator")?;
        if c != 3 || h < MIN_ATMOSPHERIC_INPUT || w < MIN_ATMOSPHERIC_INPUT {
            return Err(DehazeError::shape(
                "atmospheric estimator",
                format!("needs 3 channels and at least {MIN_ATMOSPHERIC_INPUT}x{MIN_ATMOSPHERIC_INPUT}, got {c}x{h}x{w}"),
            ));
        }
        // the head also sees the raw input max-pooled down the same chain
        let mut x = image;
        let mut raw = image;
        for (k, (first, second)) in self.pairs.iter().enumerate() {
            if k > 0 {
                x = g.pool2d(x, PoolKind::Max, 7, 7, 2)?;
                raw = g.pool2d(raw, PoolKind::Max, 7, 7, 2)?;
            }
            x = first.forward(g, b, x)?;
            x = second.forward(g, b, x)?;
        }
        let x = g.concat_channels(&[x, raw])?;
        let y = self.head.forward(g, b, x)?;
        let y = g.global_pool(y, self.config.global_pool.into())?;
        Ok(g.sigmoid(y))
    }

    pub fn estimate(&self, image: &ImagePlane) -> Result<AtmosphericLight> {
        image.require_channels(3, "estimate_atmospheric")?;
        let mut g = Graph::new();
        let b = g.bind_frozen(&self.params);
        let x = g.constant(image.to_tensor());
        let a = self.forward(&mut g, &b, x)?;
        let d = g.value(a).data();
        Ok(AtmosphericLight::saturating([d[0], d[1], d[2]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn transmission_shape_with_padding() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = TransmissionEstimator::new(
            TransmissionConfig {
                widths: vec![4, 8],
            },
            &mut rng,
        )
        .unwrap();
        let img = ImagePlane::from_fn(10, 13, 3, |c, y, x| ((c + y + x) % 7) as f64 / 7.0);
        let t = net.estimate(&img).unwrap();
        assert_eq!((t.height(), t.width(), t.channels()), (10, 13, 1));
        assert!(t.data().iter().all(|v| *v > 0.0 && *v < 1.0));
    }

    #[test]
    fn atmospheric_rejects_small_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = AtmosphericEstimator::new(AtmosphericConfig::default(), &mut rng).unwrap();
        let img = ImagePlane::filled(32, 32, 3, 0.5);
        assert!(matches!(net.estimate(&img), Err(DehazeError::Shape { .. })));
    }

    #[test]
    fn atmospheric_groups_must_divide_widths() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = AtmosphericConfig {
            widths: vec![12],
            ..AtmosphericConfig::default()
        };
        assert!(AtmosphericEstimator::new(cfg, &mut rng).is_err());
    }
}
