//! Binary netpbm images: PGM (P5) and PPM (P6), maxval 255.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::Mask;
use crate::tensor::Tensor;

/// An 8-bit image with `channels` interleaved samples per pixel (1 or 3).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

impl Image {
    pub fn gray(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        Self::checked(width, height, 1, data)
    }

    pub fn rgb(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        Self::checked(width, height, 3, data)
    }

    fn checked(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height * channels {
            return Err(Error::Format(format!(
                "{} bytes for a {width}x{height} image with {channels} channels",
                data.len()
            )));
        }
        Ok(Self { width, height, channels, data })
    }

    /// A `(3, H, W)` tensor in `[0, 1]`.
    pub fn from_chw(t: &Tensor) -> Result<Self> {
        let d = t.dims();
        if d.len() != 3 || d[0] != 3 {
            return Err(Error::Format(format!("expected a (3, H, W) image, got {d:?}")));
        }
        let plane = d[1] * d[2];
        let data = (0..plane)
            .flat_map(|p| (0..3).map(move |c| to_byte(t.data()[c * plane + p])))
            .collect();
        Self::rgb(d[2], d[1], data)
    }

    /// Set pixels white, the rest black.
    pub fn from_mask(m: &Mask) -> Self {
        let data = m.bits().iter().map(|&b| if b { 255 } else { 0 }).collect();
        Self {
            width: m.width(),
            height: m.height(),
            channels: 1,
            data,
        }
    }

    /// Nearest-neighbour enlargement by an integer factor.
    pub fn upscale(&self, factor: usize) -> Self {
        let (w, h, c) = (self.width * factor, self.height * factor, self.channels);
        let mut data = Vec::with_capacity(w * h * c);
        for y in 0..h {
            for x in 0..w {
                let src = ((y / factor) * self.width + x / factor) * c;
                data.extend_from_slice(&self.data[src..src + c]);
            }
        }
        Self { width: w, height: h, channels: c, data }
    }

    pub fn encode(&self) -> Vec<u8> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Format(format!("netpbm: {msg}"));
        let mut fields = Vec::with_capacity(4);
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ascii header"))?);
        }
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        let channels = match fields[0] {
            "P5" => 1,
            "P6" => 3,
            other => return Err(bad(&format!("unsupported magic {other:?}"))),
        };
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad number in header"));
        let (width, height) = (num(fields[1])?, num(fields[2])?);
        if num(fields[3])? != 255 {
            return Err(bad("maxval must be 255"));
        }
        let raster = bytes.get(pos..).ok_or_else(|| bad("missing raster"))?;
        Self::checked(width, height, channels, raster.to_vec())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(fs::write(path, self.encode())?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}
