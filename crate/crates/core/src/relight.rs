//! Noise-free relighting: the discrete transfer sum over envmap texels at
//! every primary hit.

use rayon::prelude::*;

use crate::camera::Camera;
use crate::envmap::{direction_to_texel, row_solid_angle, texel_center_direction, EnvironmentMap};
use crate::image::{HdrImage, Mask};
use crate::math::Rgb;
use crate::nn::{sh_encode, NrtfField, Real, SH_DIM};
use crate::scene::Scene;
use crate::train::HitCache;
use crate::{Error, Result};

/// Foreground pixels per work item; fixed so output never depends on the
/// thread count.
const PIXEL_CHUNK: usize = 16;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RelightOptions {
    /// Evaluate the field at the target envmap's own texel directions
    /// instead of resampling the envmap to the training grid.
    pub continuous: bool,
    /// Black background instead of the envmap seen along the ray.
    pub mask_only: bool,
}

#[derive(Clone, Debug)]
pub struct Relit {
    pub image: HdrImage,
    pub mask: Mask,
    /// Foreground hits outside the hash shell at some level.
    pub clamped: usize,
}

/// Lighting basis for the sum: texel radiances, their encoded directions,
/// and per-texel weights relative to a training texel.
struct Basis {
    radiance: Vec<Rgb>,
    sh: Vec<[f64; SH_DIM]>,
    weight: Vec<f64>,
}

fn basis(env: &EnvironmentMap, train_dims: (usize, usize), continuous: bool) -> Result<Basis> {
    env.validate()?;
    if !continuous {
        let e = env.resample(train_dims.0, train_dims.1);
        let sh = (0..e.len())
            .map(|t| sh_encode(texel_center_direction(train_dims.0, train_dims.1, t)))
            .collect::<Result<_>>()?;
        return Ok(Basis {
            weight: vec![1.0; e.len()],
            radiance: e.data,
            sh,
        });
    }
    // The field's output at a training texel integrates that texel's solid
    // angle; other texel sizes scale by their solid-angle ratio.
    let sa = env.solid_angles();
    let mut b = Basis {
        radiance: Vec::new(),
        sh: Vec::new(),
        weight: Vec::new(),
    };
    for (t, (&radiance, &omega)) in env.data.iter().zip(&sa).enumerate() {
        if radiance == Rgb::ZERO {
            continue;
        }
        let d = env.direction_of(t);
        let row = direction_to_texel(train_dims.0, train_dims.1, d) / train_dims.0;
        b.radiance.push(radiance);
        b.sh.push(sh_encode(d)?);
        b.weight.push(omega / row_solid_angle(train_dims.0, train_dims.1, row));
    }
    Ok(b)
}

/// Render `camera` under `env` with a trained field whose texel basis is
/// `train_dims`.
pub fn relight<T: Real>(
    field: &NrtfField<T>,
    scene: &Scene,
    env: &EnvironmentMap,
    train_dims: (usize, usize),
    camera: &Camera,
    options: RelightOptions,
) -> Result<Relit> {
    if train_dims.0 == 0 || train_dims.1 == 0 {
        return Err(Error::Config("training envmap grid is empty".into()));
    }
    let cache = HitCache::build(scene, field, camera)?;
    let b = basis(env, train_dims, options.continuous)?;
    let slots: Vec<usize> = (0..cache.len()).collect();
    let values: Vec<Rgb> = slots
        .par_chunks(PIXEL_CHUNK)
        .map(|chunk| -> Result<Vec<Rgb>> {
            if b.radiance.is_empty() {
                return Ok(vec![Rgb::ZERO; chunk.len()]);
            }
            // The incoming direction is supplied per texel by `eval_pairs`.
            let samples: Vec<_> = chunk.iter().map(|&s| cache.sample(s, &b.sh[0])).collect();
            let out = field.eval_pairs(&samples, &b.sh)?;
            let nb = b.radiance.len();
            Ok((0..chunk.len())
                .map(|k| {
                    let mut acc = Rgb::ZERO;
                    for t in 0..nb {
                        let i = 3 * (k * nb + t);
                        let tr = Rgb::new(out[i].to_f64(), out[i + 1].to_f64(), out[i + 2].to_f64());
                        acc += tr * b.radiance[t] * b.weight[t];
                    }
                    acc
                })
                .collect())
        })
        .collect::<Result<Vec<_>>>()?
        .concat();

    let mut pixels = vec![Rgb::ZERO; camera.pixel_count()];
    let mut mask = vec![false; camera.pixel_count()];
    if !options.mask_only {
        for (p, px) in pixels.iter_mut().enumerate() {
            let ray = camera.primary_ray(p % camera.width, p / camera.width, (0.5, 0.5))?;
            *px = env.lookup(ray.dir);
        }
    }
    for (&p, v) in cache.pixels.iter().zip(&values) {
        pixels[p as usize] = *v;
        mask[p as usize] = true;
    }
    Ok(Relit {
        image: HdrImage::from_rgb(camera.width, camera.height, &pixels),
        mask: Mask {
            width: camera.width,
            height: camera.height,
            data: mask,
        },
        clamped: cache.clamped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bundled;
    use crate::math::DVec3;
    use crate::nn::field::tests::small_field;

    fn setup() -> (NrtfField<f64>, Scene, Camera) {
        let field = small_field::<f64>(11);
        let scene = Scene::new(bundled::uv_sphere(DVec3::ZERO, 0.5, 12, 6, [0.0, 1.0]).unwrap()).unwrap();
        let cam = bundled::probe_cameras(3, 12).unwrap().remove(1);
        (field, scene, cam)
    }

    #[test]
    fn black_envmap_gives_black_foreground() {
        let (f, s, c) = setup();
        let env = EnvironmentMap::constant(8, 4, Rgb::ZERO);
        let r = relight(&f, &s, &env, (4, 2), &c, RelightOptions::default()).unwrap();
        assert!(r.mask.count() > 0);
        assert!(r.image.data.iter().all(|p| *p == [0.0; 3]));
    }

    #[test]
    fn linear_in_envmap_and_deterministic() {
        let (f, s, c) = setup();
        let e1 = bundled::probe_envmap(4, 2);
        let e2 = bundled::holdout_envmap(4, 2);
        let sum = EnvironmentMap {
            data: e1.data.iter().zip(&e2.data).map(|(a, b)| *a + *b).collect(),
            ..e1.clone()
        };
        let o = RelightOptions { mask_only: true, ..Default::default() };
        let r1 = relight(&f, &s, &e1, (4, 2), &c, o).unwrap();
        let r2 = relight(&f, &s, &e2, (4, 2), &c, o).unwrap();
        let rs = relight(&f, &s, &sum, (4, 2), &c, o).unwrap();
        for p in 0..c.pixel_count() {
            let (a, b, t) = (r1.image.pixel(p), r2.image.pixel(p), rs.image.pixel(p));
            assert!((a + b - t).abs().max_element() <= 1e-6 * t.max_element().max(1e-30));
        }
        let again = relight(&f, &s, &sum, (4, 2), &c, o).unwrap();
        assert_eq!(again.image, rs.image);
    }

    #[test]
    fn continuous_on_training_grid_matches_default() {
        let (f, s, c) = setup();
        let env = bundled::probe_envmap(4, 2);
        let a = relight(&f, &s, &env, (4, 2), &c, RelightOptions::default()).unwrap();
        let b = relight(&f, &s, &env, (4, 2), &c, RelightOptions { continuous: true, ..Default::default() }).unwrap();
        for (x, y) in a.image.data.iter().zip(&b.image.data) {
            for k in 0..3 {
                assert!((x[k] - y[k]).abs() <= 1e-6 * x[k].abs().max(1e-30));
            }
        }
    }

    #[test]
    fn one_hot_envmap_reproduces_field_prediction() {
        let (f, s, c) = setup();
        let texel = 5;
        let env = EnvironmentMap::one_hot(4, 2, texel, 50.0).unwrap();
        let r = relight(&f, &s, &env, (4, 2), &c, RelightOptions::default()).unwrap();
        let cache = HitCache::build(&s, &f, &c).unwrap();
        let k = cache.len() / 2;
        let t = f
            .nrtf_eval(cache.positions[k], cache.normals[k], texel, (4, 2), c.primary_ray(
                cache.pixels[k] as usize % c.width,
                cache.pixels[k] as usize / c.width,
                (0.5, 0.5),
            ).unwrap().dir * -1.0)
            .unwrap();
        let got = r.image.pixel(cache.pixels[k] as usize);
        assert!((got - t * 50.0).abs().max_element() <= 1e-5 * got.max_element());
    }

    #[test]
    fn background_shows_envmap_unless_masked() {
        let (f, s, c) = setup();
        let env = bundled::probe_envmap(8, 4);
        let r = relight(&f, &s, &env, (4, 2), &c, RelightOptions::default()).unwrap();
        let bg = (0..c.pixel_count()).find(|&p| !r.mask.data[p]).unwrap();
        let ray = c.primary_ray(bg % c.width, bg / c.width, (0.5, 0.5)).unwrap();
        let e = env.lookup(ray.dir);
        assert_eq!(r.image.data[bg], [e.x as f32, e.y as f32, e.z as f32]);
        let m = relight(&f, &s, &env, (4, 2), &c, RelightOptions { mask_only: true, ..Default::default() }).unwrap();
        assert_eq!(m.image.data[bg], [0.0; 3]);
    }

    #[test]
    fn rotated_envmap_changes_output() {
        let (f, s, c) = setup();
        let env = bundled::probe_envmap(8, 4);
        let o = RelightOptions { mask_only: true, ..Default::default() };
        let a = relight(&f, &s, &env, (8, 4), &c, o).unwrap();
        let b = relight(&f, &s, &env.rotate_columns(2), (8, 4), &c, o).unwrap();
        assert_ne!(a.image, b.image);
    }
}
