//! Joint recovery of lighting and material from posed images.
//!
//! Gradients differentiate the Monte Carlo estimator with every sampling
//! decision frozen: paths are recorded under the current parameters and the
//! recorded directions, pdfs and MIS weights are treated as constants. Only
//! BSDF values and envmap radiances carry derivatives.

use std::f64::consts::PI;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bsdf::{BlendedBsdf, EvalParts, MIN_ALPHA};
use crate::camera::Camera;
use crate::envmap::EnvironmentMap;
use crate::image::{HdrImage, Mask};
use crate::math::{luminance, logit, mix_seed, sigmoid, softplus, softplus_inv, Rgb};
use crate::optim::{adam_step, AdamConfig, Moments};
use crate::pathtracer::{camera_ray, record_path, Lighting, PathRecord, RenderSettings};
use crate::rng::PathRng;
use crate::scene::Scene;
use crate::texture::{uv_coverage, AlbedoTexture};
use crate::{Error, Result};

/// Pixels per parallel work item. Fixed so the reduction order never
/// depends on the thread count.
const CHUNK: usize = 256;

/// Consecutive iterations above the divergence threshold before aborting.
const DIVERGENCE_WINDOW: usize = 100;
const DIVERGENCE_FACTOR: f64 = 1e3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub iters: usize,
    pub lr_env: f64,
    pub lr_albedo: f64,
    pub lr_material: f64,
    /// Learning-rate multiplier reached at the last iteration; all groups
    /// decay geometrically from 1, keeping their ratios.
    pub lr_decay: f64,
    pub lambda_reg: f64,
    pub lambda_bsdf: f64,
    /// Use only the first `views` views; 0 means all.
    pub views: usize,
    pub pixel_budget: usize,
    pub spp: u32,
    pub max_bounces: u32,
    pub nee: bool,
    pub loss_form: LossForm,
    pub env_width: usize,
    pub env_height: usize,
    pub albedo_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Where the divergence guard dumps the current estimate.
    pub dump_dir: Option<PathBuf>,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            iters: 3000,
            lr_env: 1.0,
            lr_albedo: 0.1,
            lr_material: 0.001,
            lr_decay: 0.01,
            lambda_reg: 0.001,
            lambda_bsdf: 0.1,
            views: 0,
            pixel_budget: 4096,
            spp: 16,
            max_bounces: 5,
            nee: true,
            loss_form: LossForm::Squared,
            env_width: 32,
            env_height: 16,
            albedo_size: 128,
            seed: 0,
            adam: AdamConfig::default(),
            dump_dir: None,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let lrs = [self.lr_env, self.lr_albedo, self.lr_material];
        if lrs.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config("lr_decay must be in (0, 1]".into()));
        }
        if !(self.lambda_reg >= 0.0 && self.lambda_bsdf >= 0.0) {
            return Err(Error::Config("regularizer weights must be non-negative".into()));
        }
        if self.pixel_budget == 0 || self.env_width == 0 || self.env_height == 0 {
            return Err(Error::Config("pixel budget and envmap size must be positive".into()));
        }
        if self.loss_form == LossForm::Crossed && self.spp < 2 {
            return Err(Error::Config("the crossed loss needs spp >= 2".into()));
        }
        if self.albedo_size < 2 {
            return Err(Error::Config("albedo_size must be at least 2".into()));
        }
        self.render_settings(0).validate()
    }

    fn render_settings(&self, seed: u64) -> RenderSettings {
        RenderSettings {
            spp: self.spp,
            max_bounces: self.max_bounces,
            seed,
            nee: self.nee,
            ..Default::default()
        }
    }
}

/// A posed target image and the pixels it constrains.
#[derive(Clone, Debug)]
pub struct View {
    pub camera: Camera,
    pub image: HdrImage,
    pub mask: Mask,
}

impl View {
    /// Target with the mask of pixels whose center ray hits the scene.
    pub fn new(scene: &Scene, camera: Camera, image: HdrImage) -> Result<Self> {
        if (image.width, image.height) != (camera.width, camera.height) {
            return Err(Error::ShapeMismatch(format!(
                "image {}x{} but camera {}x{}",
                image.width, image.height, camera.width, camera.height
            )));
        }
        let mask = scene.foreground_mask(&camera);
        Ok(View { camera, image, mask })
    }
}

/// Seed of the path streams used for view `view`.
pub fn view_seed(seed: u64, view: usize) -> u64 {
    mix_seed(seed, view as u64)
}

/// Gradients with respect to the constrained parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct PtGrads {
    pub w: f64,
    pub alpha: f64,
    pub albedo: Vec<Rgb>,
    pub env: Vec<Rgb>,
}

impl PtGrads {
    pub fn zeros(albedo: usize, env: usize) -> Self {
        PtGrads {
            w: 0.0,
            alpha: 0.0,
            albedo: vec![Rgb::ZERO; albedo],
            env: vec![Rgb::ZERO; env],
        }
    }

    fn add(&mut self, o: &PtGrads) {
        self.w += o.w;
        self.alpha += o.alpha;
        for (a, b) in self.albedo.iter_mut().zip(&o.albedo) {
            *a += *b;
        }
        for (a, b) in self.env.iter_mut().zip(&o.env) {
            *a += *b;
        }
    }

    fn check_finite(&self) -> Result<()> {
        if !self.w.is_finite() {
            return Err(Error::NonFiniteGradient("w"));
        }
        if !self.alpha.is_finite() {
            return Err(Error::NonFiniteGradient("alpha"));
        }
        if !self.albedo.iter().all(|g| g.is_finite()) {
            return Err(Error::NonFiniteGradient("albedo"));
        }
        if !self.env.iter().all(|g| g.is_finite()) {
            return Err(Error::NonFiniteGradient("env"));
        }
        Ok(())
    }
}

fn lit(n: glam::DVec3, wi: glam::DVec3, wo: glam::DVec3) -> bool {
    wi.dot(n) > 0.0 && wo.dot(n) > 0.0
}

/// Scatter a cotangent `df` on the BSDF value into the parameter gradients.
fn push_bsdf(bsdf: &BlendedBsdf, parts: &EvalParts, df: Rgb, g: &mut PtGrads) {
    g.w += df.dot(Rgb::splat(parts.spec) - parts.albedo / PI);
    g.alpha += df.element_sum() * bsdf.w * parts.dspec_dalpha;
    let k = (1.0 - bsdf.w) / PI;
    for &(i, fw) in &parts.footprint {
        if fw != 0.0 {
            g.albedo[i as usize] += df * (k * fw);
        }
    }
}

/// Reverse pass over one recorded path with output cotangent `cot`.
pub fn backprop_path(
    rec: &PathRecord,
    bsdf: &BlendedBsdf,
    env: &[Rgb],
    cot: Rgb,
    suffix: &mut Vec<Rgb>,
    g: &mut PtGrads,
) {
    if let Some(t) = rec.background {
        g.env[t as usize] += cot;
        return;
    }
    // suffix[k] is the radiance leaving vertex k toward vertex k - 1.
    let nv = rec.vertices.len();
    suffix.clear();
    suffix.resize(nv + 1, Rgb::ZERO);
    for k in (0..nv).rev() {
        let v = &rec.vertices[k];
        let mut s = Rgb::ZERO;
        for l in rec.nee_of(v) {
            let f = bsdf.eval(v.uv, v.n, l.wi, v.wo);
            s += f * l.wi.dot(v.n) * env[l.texel as usize] * l.weight;
        }
        if let Some((wi, pdf)) = v.next {
            let mut t = suffix[k + 1];
            if let Some((texel, m)) = v.escape {
                t += env[texel as usize] * m;
            }
            s += bsdf.eval(v.uv, v.n, wi, v.wo) * (wi.dot(v.n) / pdf) * t;
        }
        suffix[k] = s;
    }
    let mut a = cot;
    for (k, v) in rec.vertices.iter().enumerate() {
        for l in rec.nee_of(v) {
            if !lit(v.n, l.wi, v.wo) {
                continue;
            }
            let parts = bsdf.eval_parts(v.uv, v.n, l.wi, v.wo);
            let c = l.wi.dot(v.n) * l.weight;
            let e = env[l.texel as usize];
            g.env[l.texel as usize] += a * parts.value * c;
            push_bsdf(bsdf, &parts, a * e * c, g);
        }
        let Some((wi, pdf)) = v.next else { break };
        if !lit(v.n, wi, v.wo) {
            break;
        }
        let parts = bsdf.eval_parts(v.uv, v.n, wi, v.wo);
        let c = wi.dot(v.n) / pdf;
        let mut t = suffix[k + 1];
        if let Some((texel, m)) = v.escape {
            t += env[texel as usize] * m;
        }
        push_bsdf(bsdf, &parts, a * t * c, g);
        a *= parts.value * c;
        if let Some((texel, m)) = v.escape {
            g.env[texel as usize] += a * m;
        }
    }
}

/// Squared-error contribution of one pixel, scaled by `inv_n`, with its
/// gradient accumulated into `g`.
/// How a pixel's samples form its loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossForm {
    /// `|I_hat - I|^2` over all samples. Its gradient also descends the
    /// estimator's variance, which biases parameters toward noise-free
    /// configurations at low sample counts.
    #[default]
    Squared,
    /// `(I_hat_a - I) . (I_hat_b - I)` over two disjoint halves of the
    /// samples: an unbiased estimate of the squared bias whose gradient
    /// carries no variance term. Needs `spp >= 2`. Far noisier: with a
    /// handful of samples per pixel the envmap picks up texel-scale noise.
    Crossed,
}

#[allow(clippy::too_many_arguments)]
fn pixel_loss(
    records: &[PathRecord],
    target: Rgb,
    bsdf: &BlendedBsdf,
    env: &[Rgb],
    form: LossForm,
    inv_n: f64,
    suffix: &mut Vec<Rgb>,
    g: &mut PtGrads,
) -> Option<f64> {
    let mean = |rs: &[PathRecord]| rs.iter().map(|r| r.radiance(bsdf, env)).sum::<Rgb>() / rs.len() as f64;
    let half = records.len() / 2;
    match form {
        LossForm::Crossed if half > 0 => {
            let (a, b) = records.split_at(half);
            let (ra, rb) = (mean(a) - target, mean(b) - target);
            if !(ra.is_finite() && rb.is_finite()) {
                return None;
            }
            let (ca, cb) = (rb * (inv_n / a.len() as f64), ra * (inv_n / b.len() as f64));
            for rec in a {
                backprop_path(rec, bsdf, env, ca, suffix, g);
            }
            for rec in b {
                backprop_path(rec, bsdf, env, cb, suffix, g);
            }
            Some(ra.dot(rb) * inv_n)
        }
        _ => {
            let r = mean(records) - target;
            if !r.is_finite() {
                return None;
            }
            let cot = r * (2.0 * inv_n / records.len() as f64);
            for rec in records {
                backprop_path(rec, bsdf, env, cot, suffix, g);
            }
            Some(r.length_squared() * inv_n)
        }
    }
}

fn check_batch(views: &[View], batch: &[(u32, u32)]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Config("empty pixel batch".into()));
    }
    for &(v, p) in batch {
        let Some(view) = views.get(v as usize) else {
            return Err(Error::Config(format!("batch names view {v} of {}", views.len())));
        };
        if p as usize >= view.camera.pixel_count() {
            return Err(Error::PixelOutOfBounds {
                x: p as usize % view.camera.width,
                y: p as usize / view.camera.width,
                width: view.camera.width,
                height: view.camera.height,
            });
        }
    }
    Ok(())
}

fn record_pixel(
    scene: &Scene,
    view: &View,
    lighting: &Lighting,
    bsdf: &BlendedBsdf,
    settings: &RenderSettings,
    seed: u64,
    pixel: usize,
    out: &mut [PathRecord],
) -> Result<()> {
    let cam = &view.camera;
    let (x, y) = (pixel % cam.width, pixel / cam.width);
    for (s, rec) in out.iter_mut().enumerate() {
        let mut rng = PathRng::new(seed, pixel as u64, s as u64);
        let ray = camera_ray(cam, x, y, &mut rng)?;
        record_path(scene, lighting, bsdf, settings, ray, &mut rng, rec)?;
    }
    Ok(())
}

/// Mean per-channel loss of `form` over the batch pixels, with exact
/// gradients of the frozen-sample estimator. Pixel `(v, p)` traces
/// `settings.spp` paths seeded by [`view_seed`]`(settings.seed, v)`.
pub fn loss_pt(
    scene: &Scene,
    views: &[View],
    batch: &[(u32, u32)],
    bsdf: &BlendedBsdf,
    env: &EnvironmentMap,
    settings: &RenderSettings,
    form: LossForm,
) -> Result<(f64, PtGrads)> {
    settings.validate()?;
    check_batch(views, batch)?;
    let lighting = Lighting::new(env, settings)?;
    let inv_n = 1.0 / (3.0 * batch.len() as f64);
    let spp = settings.spp as usize;
    let parts: Vec<(f64, PtGrads)> = batch
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut g = PtGrads::zeros(bsdf.albedo.len(), env.len());
            let mut recs = vec![PathRecord::default(); spp];
            let mut suffix = Vec::new();
            let mut loss = 0.0;
            for &(v, p) in chunk {
                let view = &views[v as usize];
                let seed = view_seed(settings.seed, v as usize);
                record_pixel(scene, view, &lighting, bsdf, settings, seed, p as usize, &mut recs)?;
                let target = view.image.pixel(p as usize);
                loss += pixel_loss(&recs, target, bsdf, &env.data, form, inv_n, &mut suffix, &mut g)
                    .ok_or(Error::NanRadiance {
                        x: p as usize % view.camera.width,
                        y: p as usize / view.camera.width,
                    })?;
            }
            Ok((loss, g))
        })
        .collect::<Result<_>>()?;
    reduce(parts, bsdf.albedo.len(), env.len())
}

fn reduce(parts: Vec<(f64, PtGrads)>, n_albedo: usize, n_env: usize) -> Result<(f64, PtGrads)> {
    let mut g = PtGrads::zeros(n_albedo, n_env);
    let mut loss = 0.0;
    for (l, pg) in &parts {
        loss += l;
        g.add(pg);
    }
    g.check_finite()?;
    Ok((loss, g))
}

/// Paths recorded once and replayed under different parameters.
pub struct FrozenBatch {
    pub batch: Vec<(u32, u32)>,
    pub records: Vec<Vec<PathRecord>>,
}

impl FrozenBatch {
    pub fn record(
        scene: &Scene,
        views: &[View],
        batch: &[(u32, u32)],
        bsdf: &BlendedBsdf,
        env: &EnvironmentMap,
        settings: &RenderSettings,
    ) -> Result<Self> {
        settings.validate()?;
        check_batch(views, batch)?;
        let lighting = Lighting::new(env, settings)?;
        let records = batch
            .iter()
            .map(|&(v, p)| {
                let mut recs = vec![PathRecord::default(); settings.spp as usize];
                let seed = view_seed(settings.seed, v as usize);
                record_pixel(scene, &views[v as usize], &lighting, bsdf, settings, seed, p as usize, &mut recs)?;
                Ok(recs)
            })
            .collect::<Result<_>>()?;
        Ok(FrozenBatch {
            batch: batch.to_vec(),
            records,
        })
    }

    /// Loss and gradients of the recorded estimator under new parameters.
    pub fn loss(&self, views: &[View], bsdf: &BlendedBsdf, env: &[Rgb], form: LossForm) -> Result<(f64, PtGrads)> {
        let inv_n = 1.0 / (3.0 * self.batch.len() as f64);
        let mut g = PtGrads::zeros(bsdf.albedo.len(), env.len());
        let mut suffix = Vec::new();
        let mut loss = 0.0;
        for (&(v, p), recs) in self.batch.iter().zip(&self.records) {
            let view = &views[v as usize];
            let target = view.image.pixel(p as usize);
            loss += pixel_loss(recs, target, bsdf, env, form, inv_n, &mut suffix, &mut g).ok_or(
                Error::NanRadiance {
                    x: p as usize % view.camera.width,
                    y: p as usize / view.camera.width,
                },
            )?;
        }
        g.check_finite()?;
        Ok((loss, g))
    }
}

/// Regularizer value and gradients with respect to envmap and albedo.
#[derive(Clone, Debug, PartialEq)]
pub struct RegGrads {
    pub env: Vec<Rgb>,
    pub albedo: Vec<Rgb>,
}

fn sign(v: Rgb) -> Rgb {
    Rgb::new(sgn(v.x), sgn(v.y), sgn(v.z))
}

fn sgn(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn abs_sum(v: Rgb) -> f64 {
    v.abs().element_sum()
}

/// `sum |grad E| + lambda_bsdf * sum_{M_tex} |grad A|` with backward
/// differences. The envmap wraps in azimuth; albedo differences count only
/// when both texels are valid.
pub fn loss_reg(env: &EnvironmentMap, albedo: &AlbedoTexture, lambda_bsdf: f64) -> (f64, RegGrads) {
    let mut ge = vec![Rgb::ZERO; env.len()];
    let mut ga = vec![Rgb::ZERO; albedo.len()];
    let mut loss = 0.0;

    let (w, h) = (env.width, env.height);
    let e = &env.data;
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let mut diff = |j: usize, scale: f64, grads: &mut [Rgb]| {
                let d = e[i] - e[j];
                loss += scale * abs_sum(d);
                let s = sign(d) * scale;
                grads[i] += s;
                grads[j] -= s;
            };
            if w > 1 {
                diff(y * w + (x + w - 1) % w, 1.0, &mut ge);
            }
            if y > 0 {
                diff(i - w, 1.0, &mut ge);
            }
        }
    }

    let (w, h) = (albedo.width, albedo.height);
    let (a, valid) = (&albedo.data, &albedo.valid);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !valid[i] {
                continue;
            }
            let mut diff = |j: usize| {
                if !valid[j] {
                    return;
                }
                let d = a[i] - a[j];
                loss += lambda_bsdf * abs_sum(d);
                let s = sign(d) * lambda_bsdf;
                ga[i] += s;
                ga[j] -= s;
            };
            if x > 0 {
                diff(i - 1);
            }
            if y > 0 {
                diff(i - w);
            }
        }
    }
    (loss, RegGrads { env: ge, albedo: ga })
}

/// Unconstrained parameters plus optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct FitState {
    pub w_logit: f64,
    pub alpha_raw: f64,
    /// Flattened RGB, texel-major.
    pub albedo_raw: Vec<f64>,
    pub env_raw: Vec<f64>,
    pub albedo_size: usize,
    pub env_dims: (usize, usize),
    pub valid: Vec<bool>,
    pub material_moments: Moments<f64>,
    pub albedo_moments: Moments<f64>,
    pub env_moments: Moments<f64>,
    pub iteration: usize,
}

fn alpha_of(raw: f64) -> f64 {
    (MIN_ALPHA + softplus(raw)).min(1.0)
}

fn flatten(v: &[Rgb]) -> Vec<f64> {
    v.iter().flat_map(|c| c.to_array()).collect()
}

fn unflatten(v: &[f64], f: impl Fn(f64) -> f64) -> Vec<Rgb> {
    v.chunks_exact(3)
        .map(|c| Rgb::new(f(c[0]), f(c[1]), f(c[2])))
        .collect()
}

impl FitState {
    /// Start from `w = 0.5`, `alpha = 0.3`, albedo 0.5 and a gray envmap of
    /// radiance `gray`.
    pub fn init(config: &FitConfig, valid: Vec<bool>, gray: f64) -> Self {
        let na = config.albedo_size * config.albedo_size;
        let ne = config.env_width * config.env_height;
        FitState {
            w_logit: 0.0,
            alpha_raw: softplus_inv(0.3 - MIN_ALPHA),
            albedo_raw: vec![logit(0.5); 3 * na],
            env_raw: vec![softplus_inv(gray.max(1e-3)); 3 * ne],
            albedo_size: config.albedo_size,
            env_dims: (config.env_width, config.env_height),
            valid,
            material_moments: Moments::new(2),
            albedo_moments: Moments::new(3 * na),
            env_moments: Moments::new(3 * ne),
            iteration: 0,
        }
    }

    pub fn w(&self) -> f64 {
        sigmoid(self.w_logit)
    }

    pub fn alpha(&self) -> f64 {
        alpha_of(self.alpha_raw)
    }

    pub fn bsdf(&self) -> BlendedBsdf {
        let n = self.albedo_size;
        let texture = AlbedoTexture {
            width: n,
            height: n,
            data: unflatten(&self.albedo_raw, sigmoid),
            valid: self.valid.clone(),
        };
        BlendedBsdf {
            w: self.w(),
            alpha: self.alpha(),
            albedo: texture,
        }
    }

    pub fn envmap(&self) -> EnvironmentMap {
        EnvironmentMap {
            width: self.env_dims.0,
            height: self.env_dims.1,
            data: unflatten(&self.env_raw, softplus),
        }
    }

    /// Chain constrained-space gradients through the parameterization.
    fn raw_grads(&self, g: &PtGrads) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let w = self.w();
        let da = if MIN_ALPHA + softplus(self.alpha_raw) < 1.0 {
            sigmoid(self.alpha_raw)
        } else {
            0.0
        };
        let material = vec![g.w * w * (1.0 - w), g.alpha * da];
        let albedo = flatten(&g.albedo)
            .iter()
            .zip(&self.albedo_raw)
            .map(|(g, &r)| {
                let s = sigmoid(r);
                g * s * (1.0 - s)
            })
            .collect();
        let env = flatten(&g.env)
            .iter()
            .zip(&self.env_raw)
            .map(|(g, &r)| g * sigmoid(r))
            .collect();
        (material, albedo, env)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitTraceEntry {
    pub iter: usize,
    pub loss_pt: f64,
    pub loss_reg: f64,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct FitResult {
    pub bsdf: BlendedBsdf,
    pub envmap: EnvironmentMap,
    pub trace: Vec<FitTraceEntry>,
    pub state: FitState,
}

/// Every `(view, pixel)` inside a view mask.
pub fn foreground_pool(views: &[View]) -> Vec<(u32, u32)> {
    views
        .iter()
        .enumerate()
        .flat_map(|(v, view)| view.mask.indices().into_iter().map(move |p| (v as u32, p)))
        .collect()
}

/// Uniform draw with replacement of `budget` foreground pixels.
pub fn sample_batch(pool: &[(u32, u32)], budget: usize, seed: u64) -> Vec<(u32, u32)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..budget).map(|_| pool[rng.gen_range(0..pool.len())]).collect()
}

/// Mean foreground luminance over all views.
pub fn mean_foreground_luminance(views: &[View]) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in views {
        for p in v.mask.indices() {
            sum += luminance(v.image.pixel(p as usize));
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// One optimization step. Returns the trace entry for this iteration.
pub fn fit_step(
    scene: &Scene,
    views: &[View],
    pool: &[(u32, u32)],
    config: &FitConfig,
    state: &mut FitState,
) -> Result<FitTraceEntry> {
    let it = state.iteration;
    let seed = mix_seed(config.seed, it as u64);
    let batch = sample_batch(pool, config.pixel_budget, seed);
    let bsdf = state.bsdf();
    let env = state.envmap();
    let (lpt, mut g) = loss_pt(scene, views, &batch, &bsdf, &env, &config.render_settings(seed), config.loss_form)?;
    let (lreg, rg) = loss_reg(&env, &bsdf.albedo, config.lambda_bsdf);
    let lambda = reg_weight(config, pool.len());
    for (a, b) in g.env.iter_mut().zip(&rg.env) {
        *a += lambda * *b;
    }
    for (a, b) in g.albedo.iter_mut().zip(&rg.albedo) {
        *a += lambda * *b;
    }
    let (gm, ga, ge) = state.raw_grads(&g);
    let m = lr_multiplier(config, it);
    let mut material = [state.w_logit, state.alpha_raw];
    adam_step(&mut material, &gm, &mut state.material_moments, m * config.lr_material, &config.adam, "material")?;
    adam_step(&mut state.albedo_raw, &ga, &mut state.albedo_moments, m * config.lr_albedo, &config.adam, "albedo")?;
    adam_step(&mut state.env_raw, &ge, &mut state.env_moments, m * config.lr_env, &config.adam, "env")?;
    [state.w_logit, state.alpha_raw] = material;
    state.iteration += 1;
    Ok(FitTraceEntry {
        iter: it,
        loss_pt: lpt,
        loss_reg: lreg,
        loss: lpt + lambda * lreg,
    })
}

/// Learning-rate factor at iteration `it`: `lr_decay^(it / (iters - 1))`.
pub fn lr_multiplier(config: &FitConfig, it: usize) -> f64 {
    if config.lr_decay == 1.0 || config.iters < 2 {
        return 1.0;
    }
    config.lr_decay.powf(it as f64 / (config.iters - 1) as f64)
}

/// Weight of the summed regularizer next to the mean data term. A data term
/// summed over the `pool` foreground pixels, paired with `lambda_reg`, has
/// the same minimizer once both are divided by the residual count.
pub fn reg_weight(config: &FitConfig, pool: usize) -> f64 {
    config.lambda_reg / (3 * pool.max(1)) as f64
}

/// Fit `{w, alpha, A, E}` to the views by Adam on `L_PT + lambda_reg L_reg`,
/// both normalized per residual (see [`reg_weight`]).
/// `on_iter` sees the state after every step.
pub fn fit_light_material_with(
    scene: &Scene,
    views: &[View],
    config: &FitConfig,
    mut on_iter: impl FnMut(&FitState, &FitTraceEntry) -> Result<()>,
) -> Result<FitResult> {
    config.validate()?;
    let views = if config.views > 0 && config.views < views.len() {
        &views[..config.views]
    } else {
        views
    };
    let pool = foreground_pool(views);
    if pool.is_empty() {
        return Err(Error::Config("no foreground pixels in any view".into()));
    }
    let valid = uv_coverage(&scene.mesh, config.albedo_size, config.albedo_size);
    let mut state = FitState::init(config, valid, mean_foreground_luminance(views));
    let mut trace = Vec::with_capacity(config.iters);
    let mut initial = None;
    let mut above = 0;
    for _ in 0..config.iters {
        let entry = fit_step(scene, views, &pool, config, &mut state)?;
        let init = *initial.get_or_insert(entry.loss);
        if entry.loss > DIVERGENCE_FACTOR * init {
            above += 1;
        } else {
            above = 0;
        }
        trace.push(entry);
        on_iter(&state, &entry)?;
        if above >= DIVERGENCE_WINDOW {
            if let Some(dir) = &config.dump_dir {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                state.envmap().save(dir.join("diverged_env.pfm"))?;
                state.bsdf().albedo.save(dir.join("diverged_albedo.pfm"))?;
            }
            return Err(Error::Diverged {
                iteration: entry.iter,
                loss: entry.loss,
                initial: init,
            });
        }
    }
    Ok(FitResult {
        bsdf: state.bsdf(),
        envmap: state.envmap(),
        trace,
        state,
    })
}

pub fn fit_light_material(scene: &Scene, views: &[View], config: &FitConfig) -> Result<FitResult> {
    fit_light_material_with(scene, views, config, |_, _| Ok(()))
}

/// Per-channel scale `mean(est) / mean(gt)` and the RMSE of `est / scale`
/// against `gt`, both over all texels and channels.
pub fn scale_normalized_rmse(est: &EnvironmentMap, gt: &EnvironmentMap) -> Result<(Rgb, f64)> {
    if (est.width, est.height) != (gt.width, gt.height) {
        return Err(Error::ShapeMismatch(format!(
            "estimate {}x{} vs reference {}x{}",
            est.width, est.height, gt.width, gt.height
        )));
    }
    let (me, mg) = (est.mean(), gt.mean());
    let mut scale = Rgb::ZERO;
    for c in 0..3 {
        if me[c] <= 0.0 || mg[c] <= 0.0 {
            return Err(Error::DegenerateEstimate(c));
        }
        scale[c] = me[c] / mg[c];
    }
    let se: f64 = est
        .data
        .iter()
        .zip(&gt.data)
        .map(|(e, g)| (*e / scale - *g).length_squared())
        .sum();
    Ok((scale, (se / (3 * gt.len()) as f64).sqrt()))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::bundled;
    use crate::pathtracer::render;

    /// 8x8 views of the probe with a 2-bounce budget.
    pub(crate) fn probe_views(
        settings: &RenderSettings,
        bsdf: &BlendedBsdf,
        env: &EnvironmentMap,
        count: usize,
    ) -> (Scene, Vec<View>) {
        let scene = Scene::new(bundled::probe_mesh().unwrap()).unwrap();
        let views = bundled::probe_cameras(count, 8)
            .unwrap()
            .into_iter()
            .enumerate()
            .map(|(i, cam)| {
                let s = RenderSettings { seed: view_seed(settings.seed, i), ..*settings };
                let img = render(&scene, &cam, env, bsdf, &s).unwrap();
                View::new(&scene, cam, img).unwrap()
            })
            .collect();
        (scene, views)
    }

    fn gt() -> (BlendedBsdf, EnvironmentMap) {
        let mut albedo = bundled::probe_albedo(8);
        albedo.set_coverage(&bundled::probe_mesh().unwrap());
        (
            BlendedBsdf::new(bundled::PROBE_W, bundled::PROBE_ALPHA, albedo),
            bundled::probe_envmap(8, 4),
        )
    }

    fn full_batch(views: &[View]) -> Vec<(u32, u32)> {
        foreground_pool(views)
    }

    #[test]
    fn perfect_fit_in_light_sum_mode() {
        let s = RenderSettings { spp: 2, max_bounces: 2, light_sum: true, seed: 4, ..Default::default() };
        let (bsdf, env) = gt();
        let (scene, views) = probe_views(&s, &bsdf, &env, 2);
        let batch = full_batch(&views);
        let (loss, g) = loss_pt(&scene, &views, &batch, &bsdf, &env, &s, LossForm::Squared).unwrap();
        // Targets are stored as f32, so the residual is rounding only.
        assert!(loss < 1e-12, "{loss}");
        assert!(g.w.abs() < 1e-6 && g.alpha.abs() < 1e-6);
        assert!(g.env.iter().chain(&g.albedo).all(|v| v.abs().max_element() < 1e-6));
    }

    #[test]
    fn streaming_matches_frozen_replay() {
        let s = RenderSettings { spp: 2, max_bounces: 2, seed: 9, ..Default::default() };
        let (bsdf, env) = gt();
        let (scene, views) = probe_views(&s, &bsdf, &env, 2);
        let other = BlendedBsdf::new(0.5, 0.3, AlbedoTexture::constant(8, 8, Rgb::splat(0.5)));
        let other_env = env.scaled(Rgb::new(0.7, 1.1, 0.9));
        let batch = full_batch(&views);
        let a = loss_pt(&scene, &views, &batch, &other, &other_env, &s, LossForm::Crossed).unwrap();
        let frozen = FrozenBatch::record(&scene, &views, &batch, &other, &other_env, &s).unwrap();
        let b = frozen.loss(&views, &other, &other_env.data, LossForm::Crossed).unwrap();
        assert!((a.0 - b.0).abs() <= 1e-12 * a.0);
        assert!((a.1.w - b.1.w).abs() <= 1e-9 * a.1.w.abs().max(1e-12));
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
    }

    /// Central differences on the frozen estimator against the reverse pass.
    #[test]
    fn gradients_match_finite_differences() {
        let s = RenderSettings { spp: 2, max_bounces: 2, seed: 1, ..Default::default() };
        let (bsdf, env) = gt();
        let (scene, views) = probe_views(&s, &bsdf, &env, 2);
        let bsdf0 = BlendedBsdf::new(0.45, 0.25, AlbedoTexture {
            data: bsdf.albedo.data.iter().map(|a| *a * 0.8 + Rgb::splat(0.1)).collect(),
            ..bsdf.albedo.clone()
        });
        let env0 = env.scaled(Rgb::new(0.8, 1.2, 1.0));
        let batch = full_batch(&views);
        let frozen = FrozenBatch::record(&scene, &views, &batch, &bsdf0, &env0, &s).unwrap();
        for form in [LossForm::Squared, LossForm::Crossed] {
            check_gradients(&frozen, &views, &bsdf0, &env0, form);
        }
    }

    fn check_gradients(frozen: &FrozenBatch, views: &[View], bsdf0: &BlendedBsdf, env0: &EnvironmentMap, form: LossForm) {
        let (_, g) = frozen.loss(views, bsdf0, &env0.data, form).unwrap();
        let f = |b: &BlendedBsdf, e: &[Rgb]| frozen.loss(views, b, e, form).unwrap().0;

        let h = 1e-6;
        let fd_w = (f(&BlendedBsdf { w: bsdf0.w + h, ..bsdf0.clone() }, &env0.data)
            - f(&BlendedBsdf { w: bsdf0.w - h, ..bsdf0.clone() }, &env0.data))
            / (2.0 * h);
        assert!(rel(fd_w, g.w) < 1e-4, "w {fd_w} {}", g.w);
        let fd_a = (f(&BlendedBsdf { alpha: bsdf0.alpha + h, ..bsdf0.clone() }, &env0.data)
            - f(&BlendedBsdf { alpha: bsdf0.alpha - h, ..bsdf0.clone() }, &env0.data))
            / (2.0 * h);
        assert!(rel(fd_a, g.alpha) < 1e-4, "alpha {fd_a} {}", g.alpha);

        let mut checked = 0;
        for t in 0..env0.len() {
            for c in 0..3 {
                if g.env[t][c].abs() < 1e-8 {
                    continue;
                }
                let mut ep = env0.data.clone();
                let mut em = env0.data.clone();
                ep[t][c] += h;
                em[t][c] -= h;
                let fd = (f(&bsdf0, &ep) - f(&bsdf0, &em)) / (2.0 * h);
                assert!(rel(fd, g.env[t][c]) < 1e-4, "env {t}/{c} {fd} {}", g.env[t][c]);
                checked += 1;
            }
        }
        assert!(checked > 10);
        checked = 0;
        for t in 0..bsdf0.albedo.len() {
            for c in 0..3 {
                if g.albedo[t][c].abs() < 1e-8 {
                    continue;
                }
                let mut bp = bsdf0.clone();
                let mut bm = bsdf0.clone();
                bp.albedo.data[t][c] += h;
                bm.albedo.data[t][c] -= h;
                let fd = (f(&bp, &env0.data) - f(&bm, &env0.data)) / (2.0 * h);
                assert!(rel(fd, g.albedo[t][c]) < 1e-4, "albedo {t}/{c} {fd} {}", g.albedo[t][c]);
                checked += 1;
            }
        }
        assert!(checked > 10);
    }

    #[test]
    fn residual_is_linear_in_env_for_lambertian() {
        let s = RenderSettings { spp: 2, max_bounces: 1, light_sum: true, seed: 2, ..Default::default() };
        let lam = BlendedBsdf::new(0.0, 0.3, AlbedoTexture::constant(8, 8, Rgb::splat(0.6)));
        let env = bundled::probe_envmap(8, 4);
        let (scene, views) = probe_views(&s, &lam, &env, 1);
        let batch = full_batch(&views);
        let frozen = FrozenBatch::record(&scene, &views, &batch, &lam, &env, &s).unwrap();
        // Zero targets make the loss the mean squared prediction.
        let zero: Vec<View> = views
            .iter()
            .map(|v| View { image: HdrImage::new(v.image.width, v.image.height), ..v.clone() })
            .collect();
        let l1 = frozen.loss(&zero, &lam, &env.data, LossForm::Squared).unwrap().0;
        let l2 = frozen.loss(&zero, &lam, &env.scaled(Rgb::splat(2.0)).data, LossForm::Squared).unwrap().0;
        assert!((l2 / l1 - 4.0).abs() < 1e-9);
        // Residual against the original targets doubles plus the target.
        let r2 = frozen.loss(&views, &lam, &env.scaled(Rgb::splat(2.0)).data, LossForm::Squared).unwrap().0;
        assert!((r2 - l1).abs() < 1e-6 * l1);
    }

    #[test]
    fn reg_is_zero_on_constants() {
        let env = EnvironmentMap::constant(8, 4, Rgb::splat(0.7));
        let alb = AlbedoTexture::constant(6, 6, Rgb::splat(0.2));
        let (l, g) = loss_reg(&env, &alb, 0.1);
        assert_eq!(l, 0.0);
        assert!(g.env.iter().chain(&g.albedo).all(|v| *v == Rgb::ZERO));
    }

    #[test]
    fn reg_counts_step_edges() {
        // Columns 3..8 raised by h across all 4 rows: each row has one rise at
        // column 3 and one fall across the azimuth seam.
        let (w, rows, h) = (8, 4, 0.25);
        let mut env = EnvironmentMap::constant(w, rows, Rgb::splat(1.0));
        for y in 0..rows {
            for x in 3..w {
                env.data[y * w + x] += Rgb::splat(h);
            }
        }
        let alb = AlbedoTexture::constant(4, 4, Rgb::splat(0.5));
        let (l, _) = loss_reg(&env, &alb, 0.1);
        assert!((l - 2.0 * 3.0 * rows as f64 * h).abs() < 1e-12, "{l}");

        // Same block restricted to the top k rows adds one vertical crossing
        // per raised column.
        let k = 2;
        let mut env = EnvironmentMap::constant(w, rows, Rgb::splat(1.0));
        for y in 0..k {
            for x in 3..w {
                env.data[y * w + x] += Rgb::splat(h);
            }
        }
        let (l, _) = loss_reg(&env, &alb, 0.1);
        let expected = 2.0 * 3.0 * k as f64 * h + 3.0 * (w - 3) as f64 * h;
        assert!((l - expected).abs() < 1e-12, "{l} vs {expected}");
    }

    #[test]
    fn reg_ignores_texels_outside_coverage() {
        let env = EnvironmentMap::constant(4, 2, Rgb::ONE);
        let mut alb = AlbedoTexture::constant(4, 4, Rgb::splat(0.5));
        alb.valid[5] = false;
        let (l0, _) = loss_reg(&env, &alb, 0.1);
        alb.data[5] = Rgb::splat(0.9);
        let (l1, g) = loss_reg(&env, &alb, 0.1);
        assert_eq!(l0, l1);
        assert_eq!(g.albedo[5], Rgb::ZERO);
        alb.data[6] = Rgb::splat(0.9);
        let (l2, _) = loss_reg(&env, &alb, 0.1);
        assert!((l2 - 0.1 * 3.0 * 0.4 * 3.0).abs() < 1e-12, "{l2}");
    }

    #[test]
    fn reg_gradient_matches_differences() {
        // Generic values keep every difference away from the |.| kink.
        let mut env = EnvironmentMap::from_fn(8, 4, |d| Rgb::new(1.0 + d.x * 0.3, d.y.exp(), 2.0 + d.z * d.x));
        let alb = bundled::probe_albedo(6);
        let (_, g) = loss_reg(&env, &alb, 0.1);
        let h = 1e-7;
        for t in [0, 5, 17, 31] {
            let base = env.data[t].x;
            env.data[t].x = base + h;
            let lp = loss_reg(&env, &alb, 0.1).0;
            env.data[t].x = base - h;
            let lm = loss_reg(&env, &alb, 0.1).0;
            env.data[t].x = base;
            assert!(((lp - lm) / (2.0 * h) - g.env[t].x).abs() < 1e-6);
        }
    }

    #[test]
    fn raw_chain_matches_differences() {
        let cfg = FitConfig { albedo_size: 4, env_width: 4, env_height: 2, ..Default::default() };
        let mut st = FitState::init(&cfg, vec![true; 16], 0.8);
        st.w_logit = -0.4;
        st.albedo_raw[7] = 0.9;
        st.env_raw[5] = -1.3;
        // A linear functional of the constrained parameters.
        let cw = 0.7;
        let ca = -1.9;
        let lin = |s: &FitState| {
            let b = s.bsdf();
            let e = s.envmap();
            cw * b.w + ca * b.alpha + 2.0 * b.albedo.data[2].y + 3.0 * e.data[1].z
        };
        let mut g = PtGrads::zeros(16, 8);
        g.w = cw;
        g.alpha = ca;
        g.albedo[2].y = 2.0;
        g.env[1].z = 3.0;
        let (gm, ga, ge) = st.raw_grads(&g);
        let h = 1e-6;
        let fd = |f: &dyn Fn(&mut FitState, f64)| {
            let (mut p, mut m) = (st.clone(), st.clone());
            f(&mut p, h);
            f(&mut m, -h);
            (lin(&p) - lin(&m)) / (2.0 * h)
        };
        assert!((fd(&|s, d| s.w_logit += d) - gm[0]).abs() < 1e-8);
        assert!((fd(&|s, d| s.alpha_raw += d) - gm[1]).abs() < 1e-8);
        assert!((fd(&|s, d| s.albedo_raw[7] += d) - ga[7]).abs() < 1e-8);
        assert!((fd(&|s, d| s.env_raw[5] += d) - ge[5]).abs() < 1e-8);
    }

    #[test]
    fn black_targets_drive_env_down() {
        let s = RenderSettings { spp: 1, max_bounces: 2, ..Default::default() };
        let (bsdf, env) = gt();
        let (scene, views) = probe_views(&s, &bsdf, &env, 2);
        let black: Vec<View> = views
            .into_iter()
            .map(|v| View { image: HdrImage::new(v.image.width, v.image.height), ..v })
            .collect();
        let cfg = FitConfig {
            iters: 40,
            pixel_budget: 64,
            spp: 2,
            max_bounces: 2,
            env_width: 8,
            env_height: 4,
            albedo_size: 8,
            lr_decay: 1.0,
            ..Default::default()
        };
        let start = FitState::init(&cfg, vec![true; 64], 1e-3).envmap().mean();
        let fit = fit_light_material(&scene, &black, &cfg).unwrap();
        let end = fit.envmap.mean();
        assert!(end.max_element() < 0.05 * start.max_element(), "{end} vs {start}");
        assert!(fit.envmap.data.iter().all(|e| e.min_element() >= 0.0));
    }

    #[test]
    fn fit_is_deterministic_and_constrained() {
        let s = RenderSettings { spp: 1, max_bounces: 2, ..Default::default() };
        let (bsdf, env) = gt();
        let (scene, views) = probe_views(&s, &bsdf, &env, 2);
        let cfg = FitConfig {
            iters: 15,
            pixel_budget: 64,
            spp: 2,
            max_bounces: 2,
            env_width: 8,
            env_height: 4,
            albedo_size: 8,
            lr_material: 0.5,
            ..Default::default()
        };
        let a = fit_light_material(&scene, &views, &cfg).unwrap();
        let b = rayon::ThreadPoolBuilder::new()
            .num_threads(3)
            .build()
            .unwrap()
            .install(|| fit_light_material(&scene, &views, &cfg).unwrap());
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.state, b.state);
        assert!(a.bsdf.w > 0.0 && a.bsdf.w < 1.0);
        assert!((MIN_ALPHA..=1.0).contains(&a.bsdf.alpha));
        assert!(a.bsdf.albedo.data.iter().all(|c| c.min_element() > 0.0 && c.max_element() < 1.0));
    }

    #[test]
    fn scale_normalization_removes_global_gain() {
        let gt = bundled::probe_envmap(8, 4);
        let est = gt.scaled(Rgb::new(2.0, 0.5, 3.0));
        let (s, rmse) = scale_normalized_rmse(&est, &gt).unwrap();
        assert!((s - Rgb::new(2.0, 0.5, 3.0)).abs().max_element() < 1e-12);
        assert!(rmse < 1e-12);
    }

    proptest::proptest! {
        #[test]
        fn constrained_parameters_stay_in_range(
            w_logit in -50.0f64..50.0,
            alpha_raw in -50.0f64..50.0,
            raw in proptest::collection::vec(-50.0f64..50.0, 12),
        ) {
            let config = FitConfig { albedo_size: 2, env_width: 2, env_height: 2, ..FitConfig::default() };
            let mut s = FitState::init(&config, vec![true; 4], 0.5);
            s.w_logit = w_logit;
            s.alpha_raw = alpha_raw;
            s.albedo_raw.copy_from_slice(&raw);
            s.env_raw.copy_from_slice(&raw);
            proptest::prop_assert!((0.0..=1.0).contains(&s.w()));
            proptest::prop_assert!((0.01..=1.0).contains(&s.alpha()));
            let bsdf = s.bsdf();
            proptest::prop_assert!(bsdf.albedo.data.iter().all(|c| c.min_element() >= 0.0 && c.max_element() <= 1.0));
            proptest::prop_assert!(s.envmap().validate().is_ok());
        }
    }
}
