//! Planar image containers shared by every module.

use dehaze_tensor::Tensor;

use crate::error::{DehazeError, Result};

/// An `H x W x C` map stored channel-major (`[C][H][W]`).
///
/// Used for RGB images, transmission maps and depth maps alike; the value
/// range is a convention of the caller.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePlane {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImagePlane {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(DehazeError::shape(
                "image",
                format!(
                    "{} values for {height}x{width}x{channels}",
                    data.len()
                ),
            ));
        }
        Ok(ImagePlane {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        ImagePlane {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    /// Builds a plane from `f(channel, y, x)`.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        ImagePlane {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.pixels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ImagePlane {
        ImagePlane {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    pub fn clamped(&self, lo: f64, hi: f64) -> ImagePlane {
        self.map(|v| v.clamp(lo, hi))
    }

    pub fn same_dims(&self, other: &ImagePlane) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub(crate) fn require_dims(
        &self,
        other: &ImagePlane,
        op: &'static str,
    ) -> Result<()> {
        if self.same_dims(other) {
            Ok(())
        } else {
            Err(DehazeError::shape(
                op,
                format!(
                    "{}x{} against {}x{}",
                    self.height, self.width, other.height, other.width
                ),
            ))
        }
    }

    pub(crate) fn require_channels(&self, channels: usize, op: &'static str) -> Result<()> {
        if self.channels == channels {
            Ok(())
        } else {
            Err(DehazeError::shape(
                op,
                format!("expected {channels} channels, got {}", self.channels),
            ))
        }
    }

    /// Window of `h x w` pixels starting at `(y0, x0)`.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<ImagePlane> {
        if y0 + h > self.height || x0 + w > self.width {
            return Err(DehazeError::shape(
                "crop",
                format!(
                    "window {h}x{w} at ({y0}, {x0}) outside {}x{}",
                    self.height, self.width
                ),
            ));
        }
        Ok(ImagePlane::from_fn(h, w, self.channels, |c, y, x| {
            self.get(c, y0 + y, x0 + x)
        }))
    }

    /// `[1, C, H, W]` tensor with the same values.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new([1, self.channels, self.height, self.width], self.data.clone())
            .expect("sizes agree")
    }

    /// Stacks planes of equal geometry into `[N, C, H, W]`.
    pub fn stack(planes: &[&ImagePlane]) -> Result<Tensor> {
        let Some(first) = planes.first() else {
            return Err(DehazeError::shape("stack", "no planes"));
        };
        let mut data = Vec::with_capacity(planes.len() * first.data.len());
        for p in planes {
            if !p.same_dims(first) || p.channels != first.channels {
                return Err(DehazeError::shape("stack", "planes differ in geometry"));
            }
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor::new(
            [planes.len(), first.channels, first.height, first.width],
            data,
        )?)
    }

    /// Sample `n` of an `[N, C, H, W]` tensor.
    pub fn from_tensor(t: &Tensor, n: usize) -> Result<ImagePlane> {
        let (count, c, h, w) = t.dims4("image from tensor")?;
        if n >= count {
            return Err(DehazeError::shape(
                "image from tensor",
                format!("sample {n} of {count}"),
            ));
        }
        let len = c * h * w;
        ImagePlane::new(h, w, c, t.data()[n * len..(n + 1) * len].to_vec())
    }
}

/// Global haze illumination, one value per RGB channel in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AtmosphericLight([f64; 3]);

impl AtmosphericLight {
    pub fn new(r: f64, g: f64, b: f64) -> Result<Self> {
        Self::from_array([r, g, b])
    }

    pub fn from_array(rgb: [f64; 3]) -> Result<Self> {
        if rgb.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(DehazeError::param(
                "atmospheric light",
                format!("components must lie in [0, 1], got {rgb:?}"),
            ));
        }
        Ok(AtmosphericLight(rgb))
    }

    /// Clamps each component into `[0, 1]`; NaN becomes 0.
    pub fn saturating(rgb: [f64; 3]) -> Self {
        AtmosphericLight(rgb.map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) }))
    }

    pub fn gray(v: f64) -> Result<Self> {
        Self::from_array([v; 3])
    }

    pub fn rgb(&self) -> [f64; 3] {
        self.0
    }

    pub fn r(&self) -> f64 {
        self.0[0]
    }

    pub fn g(&self) -> f64 {
        self.0[1]
    }

    pub fn b(&self) -> f64 {
        self.0[2]
    }

    /// Largest minus smallest component.
    pub fn spread(&self) -> f64 {
        let max = self.0.iter().copied().fold(f64::MIN, f64::max);
        let min = self.0.iter().copied().fold(f64::MAX, f64::min);
        max - min
    }

    /// `[1, 3, 1, 1]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new([1, 3, 1, 1], self.0.to_vec()).expect("three values")
    }

    pub fn to_plane(&self, height: usize, width: usize) -> ImagePlane {
        ImagePlane::from_fn(height, width, 3, |c, _, _| self.0[c])
    }
}

/// Haze density and colour for one synthetic sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HazeParams {
    pub beta: f64,
    pub airlight: AtmosphericLight,
}

impl HazeParams {
    pub fn new(beta: f64, airlight: AtmosphericLight) -> Result<Self> {
        if !(beta >= 0.0 && beta.is_finite()) {
            return Err(DehazeError::param("beta", format!("must be finite and >= 0, got {beta}")));
        }
        Ok(HazeParams { beta, airlight })
    }
}
