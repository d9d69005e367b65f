//! HDR images, binary masks and LDR conversion.

use std::path::Path;

use crate::math::Rgb;
use crate::pfm::Pfm;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct HdrImage {
    pub width: usize,
    pub height: usize,
    /// Row-major linear RGB, top row first.
    pub data: Vec<[f32; 3]>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn indices(&self) -> Vec<u32> {
        self.data
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i as u32))
            .collect()
    }
}

/// Fixed LDR conversion: exposure, clamp to [0,1], then gamma.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ToneMap {
    pub exposure: f64,
    pub gamma: f64,
}

impl Default for ToneMap {
    fn default() -> Self {
        ToneMap {
            exposure: 1.0,
            gamma: 2.2,
        }
    }
}

impl ToneMap {
    pub fn apply(&self, v: f64) -> f64 {
        (v * self.exposure).clamp(0.0, 1.0).powf(1.0 / self.gamma)
    }
}

impl HdrImage {
    pub fn new(width: usize, height: usize) -> Self {
        HdrImage {
            width,
            height,
            data: vec![[0.0; 3]; width * height],
        }
    }

    pub fn from_rgb(width: usize, height: usize, pixels: &[Rgb]) -> Self {
        HdrImage {
            width,
            height,
            data: pixels
                .iter()
                .map(|c| [c.x as f32, c.y as f32, c.z as f32])
                .collect(),
        }
    }

    pub fn get(&self, x: usize, y: usize) -> Rgb {
        let p = self.data[y * self.width + x];
        Rgb::new(p[0] as f64, p[1] as f64, p[2] as f64)
    }

    pub fn pixel(&self, i: usize) -> Rgb {
        let p = self.data[i];
        Rgb::new(p[0] as f64, p[1] as f64, p[2] as f64)
    }

    pub fn mean(&self) -> Rgb {
        let mut acc = Rgb::ZERO;
        for i in 0..self.data.len() {
            acc += self.pixel(i);
        }
        acc / self.data.len().max(1) as f64
    }

    pub fn to_pfm(&self) -> Pfm {
        Pfm {
            width: self.width,
            height: self.height,
            channels: 3,
            data: self
                .data
                .iter()
                .flat_map(|p| p.map(|v| v.max(0.0)))
                .collect(),
        }
    }

    pub fn from_pfm(p: &Pfm) -> Result<Self> {
        let data = match p.channels {
            3 => p.data.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
            1 => p.data.iter().map(|&v| [v; 3]).collect(),
            c => return Err(Error::ShapeMismatch(format!("{c}-channel PFM"))),
        };
        Ok(HdrImage {
            width: p.width,
            height: p.height,
            data,
        })
    }

    /// Writes a PFM; negative values are clamped to zero on write only.
    pub fn save_pfm(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_pfm().write(path)
    }

    pub fn load_pfm(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_pfm(&Pfm::read(path)?)
    }

    pub fn to_ldr(&self, tm: &ToneMap) -> Vec<u8> {
        self.data
            .iter()
            .flat_map(|p| p.map(|v| (tm.apply(v as f64) * 255.0).round() as u8))
            .collect()
    }

    pub fn save_png(&self, path: impl AsRef<Path>, tm: &ToneMap) -> Result<()> {
        let path = path.as_ref();
        let io = |e: std::io::Error| Error::io(path, e);
        let file = std::fs::File::create(path).map_err(io)?;
        let mut enc = png::Encoder::new(std::io::BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc
            .write_header()
            .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
        w.write_image_data(&self.to_ldr(tm))
            .map_err(|e| Error::io(path, std::io::Error::other(e)))
    }

    /// Zero every pixel outside `mask`.
    pub fn masked(&self, mask: &Mask) -> HdrImage {
        let mut out = self.clone();
        for (p, &m) in out.data.iter_mut().zip(&mask.data) {
            if !m {
                *p = [0.0; 3];
            }
        }
        out
    }
}
