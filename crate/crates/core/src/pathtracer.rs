//! Forward Monte Carlo renderer under distant environment lighting.
//!
//! Every sample first records its path (geometry, sampled directions and the
//! frozen pdfs / MIS weights) and then evaluates the radiance by replaying
//! that record against the material and the envmap. The differentiable
//! renderer replays the same records, so forward values agree bit for bit.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bsdf::BlendedBsdf;
use crate::camera::Camera;
use crate::envmap::{EnvSampler, EnvironmentMap};
use crate::image::HdrImage;
use crate::math::{DVec2, DVec3, Rgb};
use crate::rng::{PathRng, UniformSource};
use crate::scene::{Ray, Scene};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderSettings {
    pub spp: u32,
    pub max_bounces: u32,
    pub seed: u64,
    /// Envmap next-event estimation combined with BSDF sampling by MIS.
    pub nee: bool,
    /// Sum over every lit texel at each vertex instead of sampling one.
    /// Exactly linear in the envmap; costs O(N_e) shadow rays per vertex.
    pub light_sum: bool,
    /// Radiance of the single lit texel in OLAT renders.
    pub olat_radiance: f64,
}

impl Default for RenderSettings {
    fn default() -> Self {
        RenderSettings {
            spp: 16,
            max_bounces: 5,
            seed: 0,
            nee: true,
            light_sum: false,
            olat_radiance: 50.0,
        }
    }
}

impl RenderSettings {
    pub fn validate(&self) -> Result<()> {
        if self.spp == 0 {
            return Err(Error::Config("spp must be at least 1".into()));
        }
        if !(1..=16).contains(&self.max_bounces) {
            return Err(Error::Config(format!(
                "max_bounces {} outside 1..=16",
                self.max_bounces
            )));
        }
        if !(self.olat_radiance > 0.0 && self.olat_radiance.is_finite()) {
            return Err(Error::Config("olat_radiance must be positive".into()));
        }
        Ok(())
    }
}

/// Envmap plus the structures needed to sample it.
pub struct Lighting<'a> {
    pub map: &'a EnvironmentMap,
    sampler: Option<EnvSampler>,
    /// `(texel, center direction, solid angle)` of every nonzero texel.
    lit: Vec<(u32, DVec3, f64)>,
}

impl<'a> Lighting<'a> {
    pub fn new(map: &'a EnvironmentMap, settings: &RenderSettings) -> Result<Self> {
        map.validate()?;
        let sampler = if settings.nee && !settings.light_sum {
            match EnvSampler::new(map) {
                Ok(s) => Some(s),
                Err(Error::NoLight) => None,
                Err(e) => return Err(e),
            }
        } else {
            None
        };
        let lit = if settings.light_sum {
            let sa = map.solid_angles();
            (0..map.len())
                .filter(|&t| map.data[t] != Rgb::ZERO)
                .map(|t| (t as u32, map.direction_of(t), sa[t]))
                .collect()
        } else {
            Vec::new()
        };
        Ok(Lighting { map, sampler, lit })
    }
}

/// Light arriving at a vertex from one envmap texel:
/// `f(wi) * cos * E[texel] * weight`.
#[derive(Clone, Copy, Debug)]
pub struct NeeRecord {
    pub texel: u32,
    pub wi: DVec3,
    pub weight: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct VertexRecord {
    pub uv: DVec2,
    pub n: DVec3,
    pub wo: DVec3,
    /// Range into [`PathRecord::nee`].
    pub nee: (u32, u32),
    /// BSDF-sampled continuation direction and its frozen pdf.
    pub next: Option<(DVec3, f64)>,
    /// The continuation escaped into texel `.0`, counted with MIS weight `.1`.
    pub escape: Option<(u32, f64)>,
}

/// One recorded camera path.
#[derive(Clone, Debug, Default)]
pub struct PathRecord {
    /// Primary ray missed and sees this texel directly.
    pub background: Option<u32>,
    pub vertices: Vec<VertexRecord>,
    pub nee: Vec<NeeRecord>,
}

impl PathRecord {
    fn clear(&mut self) {
        self.background = None;
        self.vertices.clear();
        self.nee.clear();
    }

    pub fn nee_of(&self, v: &VertexRecord) -> &[NeeRecord] {
        &self.nee[v.nee.0 as usize..v.nee.1 as usize]
    }

    /// Radiance of the path under `bsdf` and texel radiances `env`.
    pub fn radiance(&self, bsdf: &BlendedBsdf, env: &[Rgb]) -> Rgb {
        if let Some(t) = self.background {
            return env[t as usize];
        }
        let mut suffix = Rgb::ZERO;
        for v in self.vertices.iter().rev() {
            let mut s = Rgb::ZERO;
            for l in self.nee_of(v) {
                let f = bsdf.eval(v.uv, v.n, l.wi, v.wo);
                s += f * l.wi.dot(v.n) * env[l.texel as usize] * l.weight;
            }
            if let Some((wi, pdf)) = v.next {
                let mut t = suffix;
                if let Some((texel, m)) = v.escape {
                    t += env[texel as usize] * m;
                }
                let f = bsdf.eval(v.uv, v.n, wi, v.wo);
                s += f * (wi.dot(v.n) / pdf) * t;
            }
            suffix = s;
        }
        suffix
    }
}

/// Record one path starting with `ray`. The RNG must be positioned for the
/// sample; slot `k + 1` feeds vertex `k`.
pub fn record_path(
    scene: &Scene,
    lighting: &Lighting,
    bsdf: &BlendedBsdf,
    settings: &RenderSettings,
    mut ray: Ray,
    rng: &mut PathRng,
    rec: &mut PathRecord,
) -> Result<()> {
    rec.clear();
    let map = lighting.map;
    let Some(mut hit) = scene.intersect(&ray) else {
        rec.background = Some(map.direction_to_texel(ray.dir) as u32);
        return Ok(());
    };
    for k in 0..settings.max_bounces {
        rng.slot(k + 1);
        let n = hit.normal;
        let wo = -ray.dir;
        let start = rec.nee.len() as u32;
        if settings.light_sum {
            if wo.dot(n) > 0.0 {
                for &(texel, wi, sa) in &lighting.lit {
                    if wi.dot(n) <= 0.0 || scene.occluded(&scene.spawn(&hit, wi)) {
                        continue;
                    }
                    rec.nee.push(NeeRecord { texel, wi, weight: sa });
                }
            }
        } else if let Some(sampler) = &lighting.sampler {
            let ls = sampler.sample(rng)?;
            if ls.dir.dot(n) > 0.0
                && wo.dot(n) > 0.0
                && !scene.occluded(&scene.spawn(&hit, ls.dir))
            {
                let pb = bsdf.pdf(n, ls.dir, wo);
                rec.nee.push(NeeRecord {
                    texel: ls.texel as u32,
                    wi: ls.dir,
                    weight: 1.0 / (ls.pdf + pb),
                });
            }
        }
        let mut vertex = VertexRecord {
            uv: hit.uv,
            n,
            wo,
            nee: (start, rec.nee.len() as u32),
            next: None,
            escape: None,
        };
        // Fixed slot offset so the BSDF draw does not depend on how many
        // uniforms light sampling used.
        rng.slot_offset(k + 1, 8);
        let Some(bs) = bsdf.sample(hit.uv, n, wo, rng)? else {
            rec.vertices.push(vertex);
            break;
        };
        vertex.next = Some((bs.wi, bs.pdf));
        ray = scene.spawn(&hit, bs.wi);
        match scene.intersect(&ray) {
            Some(h) => {
                rec.vertices.push(vertex);
                hit = h;
            }
            None => {
                let texel = map.direction_to_texel(bs.wi);
                let m = if settings.light_sum {
                    0.0
                } else if let Some(sampler) = &lighting.sampler {
                    let pl = sampler.pdf(bs.wi);
                    bs.pdf / (bs.pdf + pl)
                } else {
                    1.0
                };
                if m > 0.0 {
                    vertex.escape = Some((texel as u32, m));
                }
                rec.vertices.push(vertex);
                break;
            }
        }
    }
    Ok(())
}

/// Jittered primary ray for `sample` of pixel `(x, y)`, drawn from slot 0.
pub fn camera_ray(camera: &Camera, x: usize, y: usize, rng: &mut PathRng) -> Result<Ray> {
    rng.slot(0);
    let jx = rng.uniform()?;
    let jy = rng.uniform()?;
    camera.primary_ray(x, y, (jx, jy))
}

/// Mean radiance of one pixel over `settings.spp` samples.
pub fn render_pixel(
    scene: &Scene,
    camera: &Camera,
    lighting: &Lighting,
    bsdf: &BlendedBsdf,
    settings: &RenderSettings,
    pixel: usize,
    rec: &mut PathRecord,
) -> Result<Rgb> {
    let (x, y) = (pixel % camera.width, pixel / camera.width);
    let mut sum = Rgb::ZERO;
    for s in 0..settings.spp {
        let mut rng = PathRng::new(settings.seed, pixel as u64, s as u64);
        let ray = camera_ray(camera, x, y, &mut rng)?;
        record_path(scene, lighting, bsdf, settings, ray, &mut rng, rec)?;
        let l = rec.radiance(bsdf, &lighting.map.data);
        if !l.is_finite() {
            return Err(Error::NanRadiance { x, y });
        }
        sum += l;
    }
    Ok(sum / settings.spp as f64)
}

/// Path-trace a full frame.
pub fn render(
    scene: &Scene,
    camera: &Camera,
    envmap: &EnvironmentMap,
    bsdf: &BlendedBsdf,
    settings: &RenderSettings,
) -> Result<HdrImage> {
    settings.validate()?;
    camera.validate()?;
    let lighting = Lighting::new(envmap, settings)?;
    let pixels: Vec<Rgb> = (0..camera.pixel_count())
        .into_par_iter()
        .map_init(PathRecord::default, |rec, p| {
            render_pixel(scene, camera, &lighting, bsdf, settings, p, rec)
        })
        .collect::<Result<_>>()?;
    Ok(HdrImage::from_rgb(camera.width, camera.height, &pixels))
}

/// Render lit only by `texel` of a `dims.0 x dims.1` envmap emitting
/// `settings.olat_radiance`.
pub fn render_olat(
    scene: &Scene,
    camera: &Camera,
    texel: usize,
    dims: (usize, usize),
    bsdf: &BlendedBsdf,
    settings: &RenderSettings,
) -> Result<HdrImage> {
    let env = EnvironmentMap::one_hot(dims.0, dims.1, texel, settings.olat_radiance)?;
    render(scene, camera, &env, bsdf, settings)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bundled;
    use crate::math::DMat4;
    use crate::texture::AlbedoTexture;

    fn lambert(a: f64) -> BlendedBsdf {
        BlendedBsdf::new(0.0, 0.3, AlbedoTexture::constant(4, 4, Rgb::splat(a)))
    }

    fn plane_camera(size: usize) -> Camera {
        // Looking straight down at the plane from z = 1 with a narrow view.
        let pose = DMat4::look_at_rh(DVec3::new(0.0, 0.0, 1.0), DVec3::ZERO, DVec3::Y).inverse();
        Camera::new(pose, 20.0, size, size).unwrap()
    }

    #[test]
    fn black_envmap_gives_black_image() {
        let scene = Scene::new(bundled::quad(1.0).unwrap()).unwrap();
        let env = EnvironmentMap::constant(8, 4, Rgb::ZERO);
        let img = render(&scene, &plane_camera(8), &env, &lambert(0.5), &RenderSettings::default()).unwrap();
        assert!(img.data.iter().all(|p| *p == [0.0; 3]));
    }

    #[test]
    fn lambertian_direct_light_is_albedo_times_radiance() {
        // One bounce, unoccluded plane, uniform sky: E = pi L, so radiance a L.
        let (a, l) = (0.6, 2.0);
        let scene = Scene::new(bundled::quad(50.0).unwrap()).unwrap();
        let cam = plane_camera(4);
        let env = EnvironmentMap::constant(32, 16, Rgb::splat(l));
        for light_sum in [false, true] {
            let settings = RenderSettings {
                spp: 4096,
                max_bounces: 1,
                seed: 3,
                light_sum,
                ..Default::default()
            };
            let lighting = Lighting::new(&env, &settings).unwrap();
            let bsdf = lambert(a);
            let mut rec = PathRecord::default();
            let mut samples = Vec::new();
            for s in 0..settings.spp {
                let mut rng = PathRng::new(settings.seed, 5, s as u64);
                let ray = camera_ray(&cam, 1, 1, &mut rng).unwrap();
                record_path(&scene, &lighting, &bsdf, &settings, ray, &mut rng, &mut rec).unwrap();
                samples.push(rec.radiance(&bsdf, &env.data).x);
            }
            let n = samples.len() as f64;
            let mean = samples.iter().sum::<f64>() / n;
            let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0);
            let sigma = (var / n).sqrt();
            if light_sum {
                // Exactly the midpoint quadrature of the cosine over texels.
                let sa = env.solid_angles();
                let quad: f64 = (0..env.len())
                    .map(|t| env.direction_of(t).z.max(0.0) * sa[t])
                    .sum();
                let expected = a / std::f64::consts::PI * l * quad;
                assert!((mean - expected).abs() <= 1e-12 * expected, "{mean} vs {expected}");
            } else {
                assert!((mean - a * l).abs() <= 3.0 * sigma + 1e-12, "{mean} vs {} (3s {})", a * l, 3.0 * sigma);
            }
        }
    }

    #[test]
    fn render_is_deterministic_and_seed_sensitive() {
        let scene = Scene::new(bundled::probe_mesh().unwrap()).unwrap();
        let cam = bundled::probe_cameras(3, 16).unwrap().remove(1);
        let env = bundled::probe_envmap(16, 8);
        let bsdf = BlendedBsdf::new(0.3, 0.15, bundled::probe_albedo(32));
        let s = RenderSettings { spp: 2, ..Default::default() };
        let a = render(&scene, &cam, &env, &bsdf, &s).unwrap();
        let b = render(&scene, &cam, &env, &bsdf, &s).unwrap();
        assert_eq!(a, b);
        let c = render(&scene, &cam, &env, &bsdf, &RenderSettings { seed: 9, ..s }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn more_bounces_never_darken() {
        let scene = Scene::new(bundled::probe_mesh().unwrap()).unwrap();
        let cam = bundled::probe_cameras(2, 12).unwrap().remove(0);
        let env = bundled::probe_envmap(16, 8);
        let bsdf = BlendedBsdf::new(0.3, 0.15, bundled::probe_albedo(32));
        let mut prev: Option<HdrImage> = None;
        for b in 1..=5 {
            let s = RenderSettings { spp: 2, max_bounces: b, ..Default::default() };
            let img = render(&scene, &cam, &env, &bsdf, &s).unwrap();
            if let Some(p) = prev {
                for (x, y) in p.data.iter().zip(&img.data) {
                    for c in 0..3 {
                        assert!(y[c] >= x[c] * (1.0 - 1e-6), "bounce {b}");
                    }
                }
            }
            prev = Some(img);
        }
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(16))]

        #[test]
        fn renders_are_finite_and_non_negative(
            seed in 0u64..u64::MAX, w in 0.0f64..=1.0, alpha in 0.01f64..=1.0,
            bounces in 1u32..4, nee in proptest::bool::ANY,
        ) {
            let scene = Scene::new(bundled::uv_sphere(DVec3::ZERO, 0.5, 16, 8, [0.0, 1.0]).unwrap()).unwrap();
            let pose = DMat4::look_at_rh(DVec3::new(0.0, 0.3, 2.0), DVec3::ZERO, DVec3::Y).inverse();
            let cam = Camera::new(pose, 40.0, 8, 8).unwrap();
            let env = EnvironmentMap::from_fn(8, 4, |d| Rgb::new(1.0 + d.x, 1.0 + d.y, 1.0 + d.z));
            let bsdf = BlendedBsdf::new(w, alpha, AlbedoTexture::constant(4, 4, Rgb::splat(0.7)));
            let settings = RenderSettings { spp: 2, max_bounces: bounces, seed, nee, ..Default::default() };
            let img = render(&scene, &cam, &env, &bsdf, &settings).unwrap();
            proptest::prop_assert!(img.data.iter().flatten().all(|v| v.is_finite() && *v >= 0.0));
        }
    }
}
