//! Lat-long environment maps.
//!
//! Row 0 is the cap around `+z`; azimuth 0 points at `+x` and increases
//! toward `+y`. Texel `(x, y)` has index `y * width + x` and covers
//! `phi in [2 pi x / W, 2 pi (x+1) / W]`, `theta in [pi y / H, pi (y+1) / H]`
//! with `theta` measured from `+z`. Radiance is piecewise constant per texel.

use std::f64::consts::PI;
use std::path::Path;

use crate::math::{luminance, DVec3, Rgb};
use crate::pfm::Pfm;
use crate::rng::UniformSource;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct EnvironmentMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<Rgb>,
}

impl EnvironmentMap {
    pub fn constant(width: usize, height: usize, value: Rgb) -> Self {
        EnvironmentMap {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    /// One lit texel of radiance `value` (grey), everything else black.
    pub fn one_hot(width: usize, height: usize, texel: usize, value: f64) -> Result<Self> {
        let mut m = Self::constant(width, height, Rgb::ZERO);
        m.check_index(texel)?;
        m.data[texel] = Rgb::splat(value);
        Ok(m)
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(DVec3) -> Rgb) -> Self {
        let mut m = Self::constant(width, height, Rgb::ZERO);
        for i in 0..m.len() {
            m.data[i] = f(m.direction_of(i));
        }
        m
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || self.data.len() != self.width * self.height {
            return Err(Error::ShapeMismatch(format!(
                "environment map {}x{} with {} texels",
                self.width,
                self.height,
                self.data.len()
            )));
        }
        if self
            .data
            .iter()
            .any(|c| !c.is_finite() || c.min_element() < 0.0)
        {
            return Err(Error::Config("environment map has negative or non-finite texels".into()));
        }
        Ok(())
    }

    fn check_index(&self, index: usize) -> Result<()> {
        if index >= self.len() {
            return Err(Error::TexelOutOfRange {
                index,
                width: self.width,
                height: self.height,
            });
        }
        Ok(())
    }

    pub fn texel_direction(&self, index: usize) -> Result<DVec3> {
        self.check_index(index)?;
        Ok(self.direction_of(index))
    }

    /// Texel-center direction; `index` must be in range.
    pub fn direction_of(&self, index: usize) -> DVec3 {
        texel_center_direction(self.width, self.height, index)
    }

    pub fn direction_to_texel(&self, dir: DVec3) -> usize {
        direction_to_texel(self.width, self.height, dir)
    }

    pub fn texel_solid_angle(&self, index: usize) -> Result<f64> {
        self.check_index(index)?;
        Ok(row_solid_angle(self.width, self.height, index / self.width))
    }

    pub fn solid_angles(&self) -> Vec<f64> {
        (0..self.len())
            .map(|i| row_solid_angle(self.width, self.height, i / self.width))
            .collect()
    }

    pub fn lookup(&self, dir: DVec3) -> Rgb {
        self.data[self.direction_to_texel(dir)]
    }

    /// Bilinear lookup with azimuthal wrap and clamped poles.
    pub fn lookup_bilinear(&self, dir: DVec3) -> Rgb {
        let (phi, theta) = spherical(dir);
        let fx = phi / (2.0 * PI) * self.width as f64 - 0.5;
        let fy = (theta / PI * self.height as f64 - 0.5).clamp(0.0, (self.height - 1) as f64);
        let x0 = fx.floor();
        let tx = fx - x0;
        let y0 = fy.floor().min((self.height - 1) as f64);
        let ty = fy - y0;
        let w = self.width as i64;
        let xa = (x0 as i64).rem_euclid(w) as usize;
        let xb = (x0 as i64 + 1).rem_euclid(w) as usize;
        let ya = y0 as usize;
        let yb = (ya + 1).min(self.height - 1);
        let at = |x: usize, y: usize| self.data[y * self.width + x];
        (1.0 - ty) * ((1.0 - tx) * at(xa, ya) + tx * at(xb, ya))
            + ty * ((1.0 - tx) * at(xa, yb) + tx * at(xb, yb))
    }

    pub fn mean(&self) -> Rgb {
        self.data.iter().copied().sum::<Rgb>() / self.len() as f64
    }

    pub fn scaled(&self, s: Rgb) -> Self {
        EnvironmentMap {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|c| *c * s).collect(),
        }
    }

    /// Rotate by a whole number of texel columns about `+z`.
    pub fn rotate_columns(&self, shift: usize) -> Self {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.data[y * self.width + (x + shift) % self.width] = self.data[y * self.width + x];
            }
        }
        out
    }

    /// Resample to `width x height`: solid-angle weighted area average when
    /// shrinking, bilinear when growing.
    pub fn resample(&self, width: usize, height: usize) -> Self {
        if width == self.width && height == self.height {
            return self.clone();
        }
        if width <= self.width && height <= self.height {
            let mut out = Self::constant(width, height, Rgb::ZERO);
            for ty in 0..height {
                let (ct0, ct1) = band(height, ty);
                for tx in 0..width {
                    let p0 = tx as f64 / width as f64;
                    let p1 = (tx + 1) as f64 / width as f64;
                    let mut acc = Rgb::ZERO;
                    let mut wsum = 0.0;
                    for sy in 0..self.height {
                        let (cs0, cs1) = band(self.height, sy);
                        // cos decreases with theta: overlap of [cs1, cs0] and [ct1, ct0].
                        let dc = cs0.min(ct0) - cs1.max(ct1);
                        if dc <= 0.0 {
                            continue;
                        }
                        for sx in 0..self.width {
                            let q0 = sx as f64 / self.width as f64;
                            let q1 = (sx + 1) as f64 / self.width as f64;
                            let dp = q1.min(p1) - q0.max(p0);
                            if dp <= 0.0 {
                                continue;
                            }
                            let w = dp * dc;
                            acc += w * self.data[sy * self.width + sx];
                            wsum += w;
                        }
                    }
                    out.data[ty * width + tx] = acc / wsum;
                }
            }
            out
        } else {
            Self::from_fn(width, height, |d| self.lookup_bilinear(d))
        }
    }

    pub fn to_pfm(&self) -> Pfm {
        Pfm {
            width: self.width,
            height: self.height,
            channels: 3,
            data: self
                .data
                .iter()
                .flat_map(|c| [c.x as f32, c.y as f32, c.z as f32])
                .collect(),
        }
    }

    pub fn from_pfm(p: &Pfm) -> Result<Self> {
        let data: Vec<Rgb> = match p.channels {
            3 => p
                .data
                .chunks_exact(3)
                .map(|c| Rgb::new(c[0] as f64, c[1] as f64, c[2] as f64))
                .collect(),
            _ => p.data.iter().map(|&v| Rgb::splat(v as f64)).collect(),
        };
        let m = EnvironmentMap {
            width: p.width,
            height: p.height,
            data,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_pfm(&Pfm::read(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_pfm().write(path)
    }
}

/// `(cos theta_top, cos theta_bottom)` of row `y`.
fn band(height: usize, y: usize) -> (f64, f64) {
    let t0 = PI * y as f64 / height as f64;
    let t1 = PI * (y + 1) as f64 / height as f64;
    (t0.cos(), t1.cos())
}

pub fn row_solid_angle(width: usize, height: usize, y: usize) -> f64 {
    let (c0, c1) = band(height, y);
    2.0 * PI / width as f64 * (c0 - c1)
}

/// `(phi in [0, 2 pi), theta in [0, pi])`.
pub fn spherical(dir: DVec3) -> (f64, f64) {
    let theta = dir.z.clamp(-1.0, 1.0).acos();
    let mut phi = dir.y.atan2(dir.x);
    if phi < 0.0 {
        phi += 2.0 * PI;
    }
    (phi, theta)
}

pub fn from_spherical(phi: f64, theta: f64) -> DVec3 {
    let (st, ct) = theta.sin_cos();
    let (sp, cp) = phi.sin_cos();
    DVec3::new(st * cp, st * sp, ct)
}

pub fn texel_center_direction(width: usize, height: usize, index: usize) -> DVec3 {
    let (x, y) = (index % width, index / width);
    from_spherical(
        2.0 * PI * (x as f64 + 0.5) / width as f64,
        PI * (y as f64 + 0.5) / height as f64,
    )
}

pub fn direction_to_texel(width: usize, height: usize, dir: DVec3) -> usize {
    let (phi, theta) = spherical(dir);
    let x = ((phi / (2.0 * PI) * width as f64) as usize).min(width - 1);
    let y = ((theta / PI * height as f64) as usize).min(height - 1);
    y * width + x
}

/// Texel importance sampler, probability proportional to luminance times
/// solid angle; directions uniform in solid angle within the texel.
#[derive(Clone, Debug)]
pub struct EnvSampler {
    width: usize,
    height: usize,
    cdf: Vec<f64>,
    /// Per-texel probability mass.
    pmf: Vec<f64>,
    solid_angle: Vec<f64>,
}

#[derive(Clone, Copy, Debug)]
pub struct EnvSample {
    pub texel: usize,
    pub dir: DVec3,
    /// Density per steradian.
    pub pdf: f64,
}

impl EnvSampler {
    pub fn new(map: &EnvironmentMap) -> Result<Self> {
        let solid_angle = map.solid_angles();
        let weights: Vec<f64> = map
            .data
            .iter()
            .zip(&solid_angle)
            .map(|(c, sa)| luminance(*c).max(0.0) * sa)
            .collect();
        let total: f64 = weights.iter().sum();
        if total <= 0.0 || !total.is_finite() {
            return Err(Error::NoLight);
        }
        let pmf: Vec<f64> = weights.iter().map(|w| w / total).collect();
        let mut cdf = Vec::with_capacity(pmf.len());
        let mut acc = 0.0;
        for &w in &weights {
            acc += w;
            cdf.push(acc / total);
        }
        Ok(EnvSampler {
            width: map.width,
            height: map.height,
            cdf,
            pmf,
            solid_angle,
        })
    }

    pub fn texel_probability(&self, texel: usize) -> f64 {
        self.pmf[texel]
    }

    pub fn sample(&self, rng: &mut impl UniformSource) -> Result<EnvSample> {
        let u = rng.uniform()?;
        let texel = self
            .cdf
            .partition_point(|&c| c <= u)
            .min(self.cdf.len() - 1);
        // Skip zero-mass texels that share a cdf value at the boundary.
        let texel = (texel..self.cdf.len())
            .find(|&t| self.pmf[t] > 0.0)
            .unwrap_or(texel);
        let (x, y) = (texel % self.width, texel / self.width);
        let (c0, c1) = band(self.height, y);
        let u1 = rng.uniform()?;
        let u2 = rng.uniform()?;
        let phi = 2.0 * PI * (x as f64 + u1) / self.width as f64;
        let cos_t = c0 - u2 * (c0 - c1);
        let sin_t = (1.0 - cos_t * cos_t).max(0.0).sqrt();
        let dir = DVec3::new(sin_t * phi.cos(), sin_t * phi.sin(), cos_t);
        Ok(EnvSample {
            texel,
            dir,
            pdf: self.pmf[texel] / self.solid_angle[texel],
        })
    }

    /// Solid-angle density of sampling `dir`.
    pub fn pdf(&self, dir: DVec3) -> f64 {
        let t = direction_to_texel(self.width, self.height, dir);
        self.pmf[t] / self.solid_angle[t]
    }
}
