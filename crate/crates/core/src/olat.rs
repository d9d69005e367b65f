//! One-light-at-a-time dataset synthesis and its on-disk layout.
//!
//! A dataset directory holds one PFM per `(camera, texel)` pair plus a
//! `manifest.json` describing cameras, lit texels and render settings.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bsdf::BlendedBsdf;
use crate::camera::{orbit_cameras_phase, Camera};
use crate::image::HdrImage;
use crate::math::{mix_seed, DVec3};
use crate::pathtracer::{render_olat, RenderSettings};
use crate::scene::Scene;
use crate::{Error, Result};

pub const MANIFEST: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct OlatDataset {
    /// Camera-major: image `c * n_texels + t` is camera `c` lit by texel `t`.
    pub images: Vec<HdrImage>,
    pub cameras: Vec<Camera>,
    pub lit_texel: Vec<u32>,
    pub camera_of: Vec<u32>,
    pub olat_radiance: f64,
    pub env_dims: (usize, usize),
    pub settings: RenderSettings,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: usize,
    pub file: String,
    pub camera: u32,
    pub texel: u32,
    pub olat_radiance: f64,
    pub seed: u64,
    pub spp: u32,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub env_width: usize,
    pub env_height: usize,
    pub olat_radiance: f64,
    pub settings: RenderSettings,
    pub cameras: Vec<Camera>,
    pub images: Vec<ManifestEntry>,
}

/// Seed used for every image of camera `camera`.
pub fn camera_seed(seed: u64, camera: usize) -> u64 {
    mix_seed(seed, camera as u64)
}

/// Extra poses on a Fibonacci sphere at the mean training-camera distance
/// from `center`, rotated away from the training spiral.
pub fn extra_cameras(training: &[Camera], center: DVec3, count: usize) -> Result<Vec<Camera>> {
    let Some(first) = training.first() else {
        return Err(Error::InvalidCamera("no training cameras".into()));
    };
    if count == 0 {
        return Ok(Vec::new());
    }
    let radius = training
        .iter()
        .map(|c| (c.position() - center).length())
        .sum::<f64>()
        / training.len() as f64;
    orbit_cameras_phase(
        center,
        radius,
        count,
        std::f64::consts::PI * (3.0 - 5f64.sqrt()) * 0.5,
        first.fov_y,
        first.width,
        first.height,
    )
}

impl OlatDataset {
    pub fn n_texels(&self) -> usize {
        self.env_dims.0 * self.env_dims.1
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn index(&self, camera: usize, texel: usize) -> usize {
        camera * self.n_texels() + texel
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            version: MANIFEST_VERSION,
            env_width: self.env_dims.0,
            env_height: self.env_dims.1,
            olat_radiance: self.olat_radiance,
            settings: self.settings,
            cameras: self.cameras.clone(),
            images: (0..self.len())
                .map(|id| ManifestEntry {
                    id,
                    file: image_file(self.camera_of[id], self.lit_texel[id]),
                    camera: self.camera_of[id],
                    texel: self.lit_texel[id],
                    olat_radiance: self.olat_radiance,
                    seed: camera_seed(self.settings.seed, self.camera_of[id] as usize),
                    spp: self.settings.spp,
                })
                .collect(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = self.manifest();
        for (entry, img) in manifest.images.iter().zip(&self.images) {
            img.save_pfm(dir.join(&entry.file))
                .map_err(|e| Error::ImageWrite {
                    id: entry.file.clone(),
                    source: Box::new(e),
                })?;
        }
        let path = dir.join(MANIFEST);
        let text = serde_json::to_string_pretty(&manifest)?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::parse(&path, e.to_string()))?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::parse(&path, format!("unsupported version {}", m.version)));
        }
        let n_e = m.env_width * m.env_height;
        if m.images.len() != m.cameras.len() * n_e {
            return Err(Error::parse(&path, "image count is not cameras x texels"));
        }
        let mut images = Vec::with_capacity(m.images.len());
        for (i, e) in m.images.iter().enumerate() {
            let (c, t) = (i / n_e, i % n_e);
            if e.camera as usize != c || e.texel as usize != t {
                return Err(Error::parse(&path, format!("entry {i} out of order")));
            }
            let img = HdrImage::load_pfm(dir.join(&e.file))?;
            let cam = &m.cameras[c];
            if img.width != cam.width || img.height != cam.height {
                return Err(Error::ShapeMismatch(format!(
                    "{}: {}x{} but camera is {}x{}",
                    e.file, img.width, img.height, cam.width, cam.height
                )));
            }
            images.push(img);
        }
        Ok(OlatDataset {
            camera_of: m.images.iter().map(|e| e.camera).collect(),
            lit_texel: m.images.iter().map(|e| e.texel).collect(),
            images,
            cameras: m.cameras,
            olat_radiance: m.olat_radiance,
            env_dims: (m.env_width, m.env_height),
            settings: m.settings,
        })
    }
}

fn image_file(camera: u32, texel: u32) -> String {
    format!("olat_c{camera:03}_t{texel:04}.pfm")
}

/// Render every camera under every single-texel light of a
/// `env_dims.0 x env_dims.1` envmap. `cameras` should already contain the
/// training poses followed by any extra poses.
pub fn synthesize_olat_dataset(
    scene: &Scene,
    cameras: &[Camera],
    env_dims: (usize, usize),
    bsdf: &BlendedBsdf,
    settings: &RenderSettings,
) -> Result<OlatDataset> {
    if cameras.is_empty() {
        return Err(Error::InvalidCamera("OLAT synthesis needs at least one camera".into()));
    }
    settings.validate()?;
    let n_e = env_dims.0 * env_dims.1;
    let jobs: Vec<(usize, usize)> = (0..cameras.len())
        .flat_map(|c| (0..n_e).map(move |t| (c, t)))
        .collect();
    // Parallel inside each render; images are produced in job order.
    let images = jobs
        .iter()
        .map(|&(c, t)| {
            let s = RenderSettings {
                seed: camera_seed(settings.seed, c),
                ..*settings
            };
            render_olat(scene, &cameras[c], t, env_dims, bsdf, &s)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(OlatDataset {
        images,
        cameras: cameras.to_vec(),
        lit_texel: jobs.iter().map(|j| j.1 as u32).collect(),
        camera_of: jobs.iter().map(|j| j.0 as u32).collect(),
        olat_radiance: settings.olat_radiance,
        env_dims,
        settings: *settings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bundled;
    use crate::math::Rgb;
    use crate::texture::AlbedoTexture;

    fn tiny() -> (Scene, Vec<Camera>, BlendedBsdf) {
        let scene = Scene::new(bundled::probe_mesh().unwrap()).unwrap();
        let cams = bundled::probe_cameras(2, 6).unwrap();
        let bsdf = BlendedBsdf::new(0.3, 0.2, AlbedoTexture::constant(8, 8, Rgb::splat(0.5)));
        (scene, cams, bsdf)
    }

    #[test]
    fn count_layout_and_roundtrip() {
        let (scene, cams, bsdf) = tiny();
        let s = RenderSettings { spp: 1, max_bounces: 2, ..Default::default() };
        let ds = synthesize_olat_dataset(&scene, &cams, (4, 2), &bsdf, &s).unwrap();
        assert_eq!(ds.len(), 16);
        for (i, img) in ds.images.iter().enumerate() {
            let cam = &ds.cameras[ds.camera_of[i] as usize];
            assert_eq!((img.width, img.height), (cam.width, cam.height));
        }
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        let back = OlatDataset::load(dir.path()).unwrap();
        assert_eq!(back.images, ds.images);
        assert_eq!(back.lit_texel, ds.lit_texel);
        assert_eq!(back.cameras, ds.cameras);

        let again = synthesize_olat_dataset(&scene, &cams, (4, 2), &bsdf, &s).unwrap();
        assert_eq!(again.images, ds.images);
    }

    #[test]
    fn extra_cameras_differ_from_training() {
        let train = bundled::probe_cameras(8, 8).unwrap();
        let extra = extra_cameras(&train, DVec3::ZERO, 8).unwrap();
        for e in &extra {
            let r = e.position().length();
            assert!((r - 3.2).abs() < 1e-9);
            assert!(train.iter().all(|t| (t.position() - e.position()).length() > 0.1));
        }
    }

    #[test]
    fn write_failure_names_the_image() {
        let (scene, cams, bsdf) = tiny();
        let s = RenderSettings { spp: 1, max_bounces: 1, ..Default::default() };
        let ds = synthesize_olat_dataset(&scene, &cams[..1], (2, 1), &bsdf, &s).unwrap();
        let dir = tempfile::tempdir().unwrap();
        // A directory where the first image file should go blocks the write.
        std::fs::create_dir_all(dir.path().join(image_file(0, 0))).unwrap();
        match ds.save(dir.path()) {
            Err(Error::ImageWrite { id, .. }) => assert_eq!(id, image_file(0, 0)),
            other => panic!("{other:?}"),
        }
    }
}
