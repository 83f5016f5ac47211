//! Binary netpbm IO: 8-bit P6 color, 8- or 16-bit P5 grayscale.
//!
//! Values map linearly to `[0, 1]` by the header's maxval. Writers quantize
//! by rounding, so reading a file written by this module and writing it
//! back reproduces it byte for byte.

use std::path::Path;

use crate::error::{DehazeError, Result};
use crate::image::ImagePlane;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Header {
    magic: [u8; 2],
    width: usize,
    height: usize,
    maxval: u32,
    /// Offset of the first raster byte.
    data_start: usize,
}

fn format_err(format: &'static str, offset: usize, reason: impl Into<String>) -> DehazeError {
    DehazeError::Format {
        format,
        offset,
        reason: reason.into(),
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    format: &'static str,
}

impl Cursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<u64> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(format_err(self.format, start, format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| format_err(self.format, start, format!("{what} out of range")))
    }
}

fn parse_header(bytes: &[u8], format: &'static str) -> Result<Header> {
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(format_err(format, 0, "missing P magic"));
    }
    let magic = [bytes[0], bytes[1]];
    let mut c = Cursor { bytes, pos: 2, format };
    let width = c.number("width")? as usize;
    let height = c.number("height")? as usize;
    c.skip_space_and_comments();
    let maxval_at = c.pos;
    let maxval = c.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(format_err(format, 3, "zero image dimension"));
    }
    if !(1..=65535).contains(&maxval) {
        return Err(format_err(format, maxval_at, format!("maxval {maxval} outside 1..=65535")));
    }
    match bytes.get(c.pos) {
        Some(b) if b.is_ascii_whitespace() => {}
        _ => return Err(format_err(format, c.pos, "expected one whitespace byte after maxval")),
    }
    Ok(Header {
        magic,
        width,
        height,
        maxval: maxval as u32,
        data_start: c.pos + 1,
    })
}

fn decode(bytes: &[u8], h: &Header, channels: usize, format: &'static str) -> Result<ImagePlane> {
    let wide = h.maxval > 255;
    let per = if wide { 2 } else { 1 };
    let n = h.width * h.height * channels;
    let need = n * per;
    let raster = &bytes[h.data_start..];
    if raster.len() < need {
        return Err(format_err(
            format,
            bytes.len(),
            format!("raster truncated: {} of {need} bytes", raster.len()),
        ));
    }
    if raster.len() > need {
        return Err(format_err(format, h.data_start + need, "trailing bytes after raster"));
    }
    let max = h.maxval as f64;
    let mut data = vec![0.0; n];
    let px = h.width * h.height;
    for i in 0..n {
        let v = if wide {
            u16::from_be_bytes([raster[2 * i], raster[2 * i + 1]]) as u32
        } else {
            raster[i] as u32
        };
        if v > h.maxval {
            return Err(format_err(format, h.data_start + i * per, format!("sample {v} exceeds maxval")));
        }
        // interleaved on disk, planar in memory
        let (p, c) = (i / channels, i % channels);
        data[c * px + p] = v as f64 / max;
    }
    ImagePlane::new(h.height, h.width, channels, data)
}

/// Parses a binary P6 image.
pub fn decode_ppm(bytes: &[u8]) -> Result<ImagePlane> {
    let h = parse_header(bytes, "PPM")?;
    if &h.magic != b"P6" {
        return Err(format_err("PPM", 0, "expected P6 magic"));
    }
    decode(bytes, &h, 3, "PPM")
}

/// Parses a binary P5 image of any maxval.
pub fn decode_pgm(bytes: &[u8]) -> Result<ImagePlane> {
    let h = parse_header(bytes, "PGM")?;
    if &h.magic != b"P5" {
        return Err(format_err("PGM", 0, "expected P5 magic"));
    }
    decode(bytes, &h, 1, "PGM")
}

fn encode(img: &ImagePlane, magic: &str, maxval: u32) -> Vec<u8> {
    let (h, w, ch) = (img.height(), img.width(), img.channels());
    let mut out = format!("{magic}\n{w} {h}\n{maxval}\n").into_bytes();
    let max = maxval as f64;
    let px = h * w;
    for p in 0..px {
        for c in 0..ch {
            let q = (img.data()[c * px + p].clamp(0.0, 1.0) * max).round() as u32;
            if maxval > 255 {
                out.extend_from_slice(&(q as u16).to_be_bytes());
            } else {
                out.push(q as u8);
            }
        }
    }
    out
}

/// 8-bit P6; values are clamped to `[0, 1]`.
pub fn encode_ppm(img: &ImagePlane) -> Result<Vec<u8>> {
    img.require_channels(3, "encode_ppm")?;
    Ok(encode(img, "P6", 255))
}

/// 8-bit P5.
pub fn encode_pgm8(img: &ImagePlane) -> Result<Vec<u8>> {
    img.require_channels(1, "encode_pgm8")?;
    Ok(encode(img, "P5", 255))
}

/// 16-bit P5 with maxval 65535.
pub fn encode_pgm16(img: &ImagePlane) -> Result<Vec<u8>> {
    img.require_channels(1, "encode_pgm16")?;
    Ok(encode(img, "P5", 65535))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| DehazeError::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| DehazeError::io(path, e))
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<ImagePlane> {
    let path = path.as_ref();
    decode_ppm(&read(path)?).map_err(|e| at_path(e, path))
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<ImagePlane> {
    let path = path.as_ref();
    decode_pgm(&read(path)?).map_err(|e| at_path(e, path))
}

pub fn write_ppm(path: impl AsRef<Path>, img: &ImagePlane) -> Result<()> {
    write(path.as_ref(), &encode_ppm(img)?)
}

pub fn write_pgm8(path: impl AsRef<Path>, img: &ImagePlane) -> Result<()> {
    write(path.as_ref(), &encode_pgm8(img)?)
}

pub fn write_pgm16(path: impl AsRef<Path>, img: &ImagePlane) -> Result<()> {
    write(path.as_ref(), &encode_pgm16(img)?)
}

fn at_path(e: DehazeError, path: &Path) -> DehazeError {
    match e {
        DehazeError::Format { format, offset, reason } => DehazeError::Format {
            format,
            offset,
            reason: format!("{reason} ({})", path.display()),
        },
        other => other,
    }
}
