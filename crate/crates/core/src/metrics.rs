//! Image metrics on tone-mapped images and the lighting scale
//! normalization used before comparing relit results.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::envmap::EnvironmentMap;
use crate::image::{HdrImage, ToneMap};
use crate::math::{Rgb, LUMINANCE};
use crate::{Error, Result};

pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn same_dims(a: &HdrImage, b: &HdrImage) -> Result<()> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

fn mapped(img: &HdrImage, tm: &ToneMap) -> Vec<[f64; 3]> {
    img.data
        .iter()
        .map(|p| p.map(|v| tm.apply(v as f64)))
        .collect()
}

/// `10 log10(1 / MSE)` over tone-mapped RGB, capped at [`PSNR_CAP`].
pub fn psnr(a: &HdrImage, b: &HdrImage, tm: &ToneMap) -> Result<f64> {
    same_dims(a, b)?;
    let (ma, mb) = (mapped(a, tm), mapped(b, tm));
    let se: f64 = ma
        .iter()
        .zip(&mb)
        .flat_map(|(x, y)| (0..3).map(move |c| (x[c] - y[c]).powi(2)))
        .sum();
    let mse = se / (3 * ma.len()).max(1) as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let r = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let x = i as f64 - r;
        *v = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Separable Gaussian filter over every full window ("valid" region).
fn filter_valid(x: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w + 1 - SSIM_WINDOW, h + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for ox in 0..ow {
            rows[y * ow + ox] = (0..SSIM_WINDOW).map(|i| k[i] * x[y * w + ox + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for oy in 0..oh {
        for ox in 0..ow {
            out[oy * ow + ox] = (0..SSIM_WINDOW).map(|i| k[i] * rows[(oy + i) * ow + ox]).sum();
        }
    }
    out
}

/// Mean SSIM of the tone-mapped luminance over all full 11x11 windows.
pub fn ssim(a: &HdrImage, b: &HdrImage, tm: &ToneMap) -> Result<f64> {
    same_dims(a, b)?;
    let (w, h) = (a.width, a.height);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::ImageTooSmall {
            width: w,
            height: h,
            window: SSIM_WINDOW,
        });
    }
    let lum = |img: &HdrImage| -> Vec<f64> {
        mapped(img, tm)
            .iter()
            .map(|p| Rgb::from_array(*p).dot(LUMINANCE))
            .collect()
    };
    let (x, y) = (lum(a), lum(b));
    let k = gaussian_kernel();
    let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(u, v)| u * v).collect() };
    let mx = filter_valid(&x, w, h, &k);
    let my = filter_valid(&y, w, h, &k);
    let sxx = filter_valid(&prod(&x, &x), w, h, &k);
    let syy = filter_valid(&prod(&y, &y), w, h, &k);
    let sxy = filter_valid(&prod(&x, &y), w, h, &k);
    let (c1, c2) = (K1 * K1, K2 * K2);
    let n = mx.len() as f64;
    let total: f64 = (0..mx.len())
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cxy = sxy[i] - ux * uy;
            ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / n)
}

/// Scale `est` per channel so its channel means equal those of `gt`.
pub fn normalize_lighting(est: &EnvironmentMap, gt: &EnvironmentMap) -> Result<EnvironmentMap> {
    est.validate()?;
    gt.validate()?;
    let (me, mg) = (est.mean(), gt.mean());
    let mut s = Rgb::ZERO;
    for c in 0..3 {
        if me[c] == 0.0 {
            return Err(Error::DegenerateEstimate(c));
        }
        s[c] = mg[c] / me[c];
    }
    Ok(est.scaled(s))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub tone_map: ToneMap,
    pub pairs: Vec<PairMetrics>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

impl MetricsReport {
    pub fn new(tone_map: ToneMap, pairs: Vec<PairMetrics>) -> Self {
        let n = pairs.len().max(1) as f64;
        MetricsReport {
            tone_map,
            mean_psnr: pairs.iter().map(|p| p.psnr).sum::<f64>() / n,
            mean_ssim: pairs.iter().map(|p| p.ssim).sum::<f64>() / n,
            pairs,
        }
    }

    /// Metrics of each `(name, reference, test)` triple.
    pub fn compare<'a>(
        tone_map: ToneMap,
        items: impl IntoIterator<Item = (String, &'a HdrImage, &'a HdrImage)>,
    ) -> Result<Self> {
        let pairs = items
            .into_iter()
            .map(|(name, r, t)| {
                Ok(PairMetrics {
                    psnr: psnr(r, t, &tone_map)?,
                    ssim: ssim(r, t, &tone_map)?,
                    name,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self::new(tone_map, pairs))
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        writeln!(out, "name,psnr,ssim").expect("vec write");
        for p in &self.pairs {
            writeln!(out, "{},{},{}", p.name, p.psnr, p.ssim).expect("vec write");
        }
        writeln!(out, "mean,{},{}", self.mean_psnr, self.mean_ssim).expect("vec write");
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}
