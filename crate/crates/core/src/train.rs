//! Two-stage training of the radiance transfer field: OLAT pretraining with
//! the stop-gradient relative L2 loss, then joint finetuning against real
//! views with a trainable environment map.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::envmap::{texel_center_direction, EnvironmentMap};
use crate::image::HdrImage;
use crate::invopt::View;
use crate::math::{mix_seed, sigmoid, softplus, softplus_inv, DVec3, Rgb};
use crate::nn::{sh_encode, EncodePlan, FieldGrads, HashConfig, MlpShape, NrtfField, Real, Sample, INPUT_DIM, SH_DIM};
use crate::olat::OlatDataset;
use crate::optim::{adam_step, adam_step_rows, AdamConfig, Moments};
use crate::scene::Scene;
use crate::{Error, Result};

/// Field rows evaluated per forward/backward pass.
const MICRO_ROWS: usize = 2048;
const DIVERGENCE_WINDOW: usize = 100;
const DIVERGENCE_FACTOR: f64 = 1e3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub pretrain_iters: usize,
    pub pretrain_lr: f64,
    pub pretrain_batch: usize,
    pub joint_iters: usize,
    pub joint_lr: f64,
    pub joint_olat_batch: usize,
    pub joint_real_batch: usize,
    pub epsilon: f64,
    pub lambda_olat: f64,
    pub lambda_prt: f64,
    pub lambda_envc: f64,
    /// Foreground rays drawn from each OLAT image per iteration.
    pub rays_per_image: usize,
    /// Foreground rays drawn from each real image per iteration.
    pub real_rays_per_image: usize,
    pub seed: u64,
    pub hash: HashConfig,
    pub hidden: usize,
    pub depth: usize,
    pub skip: Option<usize>,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            pretrain_iters: 20_000,
            pretrain_lr: 5e-4,
            pretrain_batch: 20,
            joint_iters: 10_000,
            joint_lr: 1e-4,
            joint_olat_batch: 5,
            joint_real_batch: 1,
            epsilon: 1e-3,
            lambda_olat: 0.1,
            lambda_prt: 1.0,
            lambda_envc: 0.001,
            rays_per_image: 1024,
            real_rays_per_image: 1024,
            seed: 0,
            hash: HashConfig::default(),
            hidden: MlpShape::NRTF.hidden,
            depth: MlpShape::NRTF.depth,
            skip: MlpShape::NRTF.skip,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = [self.pretrain_lr, self.joint_lr, self.epsilon];
        if pos.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::Config("learning rates and epsilon must be positive".into()));
        }
        let lambdas = [self.lambda_olat, self.lambda_prt, self.lambda_envc];
        if lambdas.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if self.pretrain_batch == 0 || self.rays_per_image == 0 || self.real_rays_per_image == 0 {
            return Err(Error::Config("batch sizes and ray budgets must be positive".into()));
        }
        if self.joint_olat_batch + self.joint_real_batch == 0 {
            return Err(Error::Config("joint batch is empty".into()));
        }
        if self.hidden == 0 || self.skip.is_some_and(|s| s == 0 || s >= self.depth) {
            return Err(Error::Config("invalid MLP shape".into()));
        }
        Ok(())
    }

    pub fn mlp_shape(&self) -> MlpShape {
        MlpShape {
            input: INPUT_DIM,
            hidden: self.hidden,
            depth: self.depth,
            skip: self.skip,
            output: 3,
        }
    }
}

/// Spherical-harmonics encodings of every texel center of a training grid.
pub fn texel_sh(dims: (usize, usize)) -> Vec<[f64; SH_DIM]> {
    (0..dims.0 * dims.1)
        .map(|t| sh_encode(texel_center_direction(dims.0, dims.1, t)).expect("texel directions are unit"))
        .collect()
}

/// Primary hits through the centers of a camera's foreground pixels,
/// encoded once and reused by every iteration.
#[derive(Clone, Debug)]
pub struct HitCache {
    pub camera: Camera,
    /// Pixel indices of the foreground, ascending.
    pub pixels: Vec<u32>,
    pub positions: Vec<DVec3>,
    pub normals: Vec<DVec3>,
    pub plans: Vec<EncodePlan>,
    pub sh_out: Vec<[f64; SH_DIM]>,
    /// Hits that fell outside the hash shell at some level.
    pub clamped: usize,
}

impl HitCache {
    pub fn build<T: Real>(scene: &Scene, field: &NrtfField<T>, camera: &Camera) -> Result<Self> {
        camera.validate()?;
        let mut c = HitCache {
            camera: camera.clone(),
            pixels: Vec::new(),
            positions: Vec::new(),
            normals: Vec::new(),
            plans: Vec::new(),
            sh_out: Vec::new(),
            clamped: 0,
        };
        for p in 0..camera.pixel_count() {
            let ray = camera.primary_ray(p % camera.width, p / camera.width, (0.5, 0.5))?;
            let Some(hit) = scene.intersect(&ray) else { continue };
            let (plan, clamped) = field.grid.plan(hit.position);
            c.clamped += clamped as usize;
            c.pixels.push(p as u32);
            c.positions.push(hit.position);
            c.normals.push(hit.normal);
            c.plans.push(plan);
            c.sh_out.push(sh_encode(-ray.dir)?);
        }
        Ok(c)
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn sample<'a>(&'a self, slot: usize, sh_in: &'a [f64; SH_DIM]) -> Sample<'a> {
        Sample {
            plan: &self.plans[slot],
            normal: self.normals[slot],
            sh_in,
            sh_out: &self.sh_out[slot],
        }
    }
}

/// Relative squared error with a stop-gradient denominator:
/// mean of `((p - o) / (sg(p) + eps))^2` and its derivative in `p` with the
/// denominator held constant.
pub fn relative_l2(pred: &[f64], target: &[f64], eps: f64) -> (f64, Vec<f64>) {
    let n = pred.len().max(1) as f64;
    let mut loss = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(&p, &o)| {
            let d = p + eps;
            let r = (p - o) / d;
            loss += r * r;
            2.0 * (p - o) / (d * d * n)
        })
        .collect();
    (loss / n, grad)
}

/// Mean squared texel difference and its gradient in `est`.
pub fn loss_envc(est: &[Rgb], init: &[Rgb]) -> Result<(f64, Vec<Rgb>)> {
    if est.len() != init.len() {
        return Err(Error::ShapeMismatch(format!(
            "envmap has {} texels, reference {}",
            est.len(),
            init.len()
        )));
    }
    let n = (3 * est.len()).max(1) as f64;
    let mut loss = 0.0;
    let grad = est
        .iter()
        .zip(init)
        .map(|(&e, &i)| {
            let d = e - i;
            loss += d.length_squared();
            2.0 * d / n
        })
        .collect();
    Ok((loss / n, grad))
}

/// `sum_t env[t] * transfer[t]`, the discrete transfer sum at one pixel.
pub fn prt_sum(transfer: &[Rgb], env: &[Rgb]) -> Rgb {
    transfer.iter().zip(env).map(|(t, e)| *t * *e).sum()
}

fn rgb_at<T: Real>(v: &[T], i: usize) -> Rgb {
    Rgb::new(v[3 * i].to_f64(), v[3 * i + 1].to_f64(), v[3 * i + 2].to_f64())
}

/// One OLAT supervision ray: image `image` of the dataset at foreground
/// slot `slot` of its camera's cache.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OlatDraw {
    pub image: u32,
    pub slot: u32,
}

/// Mean OLAT loss over `draws` (pixels times channels). With `grads`, adds
/// `scale` times its gradient.
#[allow(clippy::too_many_arguments)]
pub fn loss_olat<T: Real>(
    field: &NrtfField<T>,
    caches: &[HitCache],
    sh_in: &[[f64; SH_DIM]],
    dataset: &OlatDataset,
    draws: &[OlatDraw],
    eps: f64,
    scale: f64,
    mut grads: Option<&mut FieldGrads<T>>,
) -> Result<f64> {
    let q = dataset.olat_radiance;
    let n = (3 * draws.len()).max(1) as f64;
    let mut total = 0.0;
    for chunk in draws.chunks(MICRO_ROWS) {
        let mut samples = Vec::with_capacity(chunk.len());
        for d in chunk {
            let img = d.image as usize;
            let cam = dataset.camera_of[img] as usize;
            let texel = dataset.lit_texel[img] as usize;
            samples.push(caches[cam].sample(d.slot as usize, &sh_in[texel]));
        }
        let cache = field.forward(&samples)?;
        let out = cache.output();
        let mut d_out = vec![T::ZERO; out.len()];
        for (k, d) in chunk.iter().enumerate() {
            let img = d.image as usize;
            let c = &caches[dataset.camera_of[img] as usize];
            let pixel = c.pixels[d.slot as usize] as usize;
            let target = dataset.images[img].pixel(pixel);
            for ch in 0..3 {
                let p = q * out[3 * k + ch].to_f64();
                let o = target[ch];
                let den = p + eps;
                let r = (p - o) / den;
                if !r.is_finite() {
                    return Err(Error::NonFiniteLoss(pixel));
                }
                total += r * r / n;
                d_out[3 * k + ch] = T::from_f64(scale * q * 2.0 * (p - o) / (den * den * n));
            }
        }
        if let Some(g) = grads.as_deref_mut() {
            field.backward(&cache, &d_out, g)?;
        }
    }
    Ok(total)
}

/// Mean squared error of the transfer sum `sum_t env[t] T(t)` against
/// `target` over the cache slots `slots`. With gradients, adds `scale` times
/// the derivative in the field and in `env`.
#[allow(clippy::too_many_arguments)]
pub fn loss_prt<T: Real>(
    field: &NrtfField<T>,
    cache: &HitCache,
    sh_in: &[[f64; SH_DIM]],
    target: &HdrImage,
    env: &[Rgb],
    slots: &[u32],
    scale: f64,
    mut grads: Option<(&mut FieldGrads<T>, &mut [Rgb])>,
) -> Result<f64> {
    let ne = env.len();
    if sh_in.len() != ne {
        return Err(Error::ShapeMismatch(format!("{} texel encodings for {ne} texels", sh_in.len())));
    }
    let n = (3 * slots.len()).max(1) as f64;
    let per = (MICRO_ROWS / ne).max(1);
    let mut total = 0.0;
    for chunk in slots.chunks(per) {
        let mut samples = Vec::with_capacity(chunk.len() * ne);
        for &s in chunk {
            samples.extend(sh_in.iter().map(|sh| cache.sample(s as usize, sh)));
        }
        let fc = field.forward(&samples)?;
        let out = fc.output();
        let mut d_out = vec![T::ZERO; out.len()];
        for (k, &s) in chunk.iter().enumerate() {
            let pixel = cache.pixels[s as usize] as usize;
            let base = k * ne;
            let l: Rgb = (0..ne).map(|t| rgb_at(&out, base + t) * env[t]).sum();
            let r = l - target.pixel(pixel);
            if !r.is_finite() {
                return Err(Error::NonFiniteLoss(pixel));
            }
            total += r.length_squared() / n;
            let dl = r * (2.0 * scale / n);
            for t in 0..ne {
                let dt = dl * env[t];
                for ch in 0..3 {
                    d_out[3 * (base + t) + ch] = T::from_f64(dt[ch]);
                }
            }
            if let Some((_, denv)) = grads.as_mut() {
                for t in 0..ne {
                    denv[t] += dl * rgb_at(&out, base + t);
                }
            }
        }
        if let Some((g, _)) = grads.as_mut() {
            field.backward(&fc, &d_out, g)?;
        }
    }
    Ok(total)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Joint,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Joint => "joint",
        }
    }

    fn tag(self) -> u64 {
        match self {
            Stage::Pretrain => 1,
            Stage::Joint => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainTraceEntry {
    pub stage: Stage,
    pub iter: usize,
    pub loss: f64,
    pub loss_olat: f64,
    pub loss_prt: f64,
    pub loss_envc: f64,
    pub olat_images: usize,
    pub real_images: usize,
}

/// Field parameters, trainable envmap and optimizer state.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub field: NrtfField<f32>,
    pub stage: Stage,
    /// Iterations completed in the current stage.
    pub iteration: usize,
    pub env_dims: (usize, usize),
    /// Softplus-space envmap, flattened RGB; empty before the joint stage.
    pub env_raw: Vec<f64>,
    /// The stage-1 estimate the joint envmap starts from.
    pub env_init: Vec<Rgb>,
    pub trace: Vec<TrainTraceEntry>,
    mlp_moments: Vec<Moments<f32>>,
    table_moments: Moments<f32>,
    env_moments: Moments<f64>,
}

impl TrainState {
    pub fn new(field: NrtfField<f32>, env_dims: (usize, usize)) -> Self {
        let mlp_moments = field.mlp.tensors().iter().map(|t| Moments::new(t.len())).collect();
        let table_moments = Moments::new(field.tables.len());
        TrainState {
            field,
            stage: Stage::Pretrain,
            iteration: 0,
            env_dims,
            env_raw: Vec::new(),
            env_init: Vec::new(),
            trace: Vec::new(),
            mlp_moments,
            table_moments,
            env_moments: Moments::default(),
        }
    }

    /// The trainable envmap, or `None` before the joint stage.
    pub fn envmap(&self) -> Option<EnvironmentMap> {
        if self.env_raw.is_empty() {
            return None;
        }
        Some(EnvironmentMap {
            width: self.env_dims.0,
            height: self.env_dims.1,
            data: self
                .env_raw
                .chunks_exact(3)
                .map(|c| Rgb::new(softplus(c[0]), softplus(c[1]), softplus(c[2])))
                .collect(),
        })
    }

    fn step_field(&mut self, grads: &mut FieldGrads<f32>, lr: f64, cfg: &AdamConfig) -> Result<()> {
        let rows = grads.sorted_rows().to_vec();
        adam_step_rows(
            &mut self.field.tables,
            &grads.tables,
            &mut self.table_moments,
            crate::nn::hash::FEATURES,
            &rows,
            lr,
            cfg,
            "hash tables",
        )?;
        let gt = grads.mlp.tensors();
        for ((p, g), m) in self.field.mlp.tensors_mut().into_iter().zip(gt).zip(&mut self.mlp_moments) {
            adam_step(p, g, m, lr, cfg, "mlp")?;
        }
        Ok(())
    }
}

/// Fresh field over `scene` with the configured hash grid and MLP shape.
pub fn init_field(scene: &Scene, config: &TrainConfig) -> Result<NrtfField<f32>> {
    config.validate()?;
    let grid = crate::nn::HashGrid::build(&scene.mesh, config.hash)?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, 0x6e6e));
    NrtfField::with_grid(grid, config.mlp_shape(), &mut rng)
}

fn iter_rng(seed: u64, stage: Stage, iter: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(mix_seed(seed, stage.tag()), iter as u64))
}

fn usable_images(dataset: &OlatDataset, caches: &[HitCache]) -> Vec<u32> {
    (0..dataset.len() as u32)
        .filter(|&i| !caches[dataset.camera_of[i as usize] as usize].is_empty())
        .collect()
}

fn draw_olat(
    rng: &mut ChaCha8Rng,
    images: &[u32],
    dataset: &OlatDataset,
    caches: &[HitCache],
    count: usize,
    rays: usize,
) -> Vec<OlatDraw> {
    let mut draws = Vec::with_capacity(count * rays);
    for _ in 0..count {
        let image = images[rng.gen_range(0..images.len())];
        let n = caches[dataset.camera_of[image as usize] as usize].len();
        draws.extend((0..rays).map(|_| OlatDraw {
            image,
            slot: rng.gen_range(0..n) as u32,
        }));
    }
    draws
}

struct Guard {
    initial: Option<f64>,
    above: usize,
}

impl Guard {
    fn check(&mut self, iteration: usize, loss: f64) -> Result<()> {
        let init = *self.initial.get_or_insert(loss);
        if loss > DIVERGENCE_FACTOR * init {
            self.above += 1;
        } else {
            self.above = 0;
        }
        if self.above >= DIVERGENCE_WINDOW {
            return Err(Error::Diverged {
                iteration,
                loss,
                initial: init,
            });
        }
        Ok(())
    }
}

fn olat_caches(scene: &Scene, field: &NrtfField<f32>, dataset: &OlatDataset) -> Result<Vec<HitCache>> {
    dataset.cameras.iter().map(|c| HitCache::build(scene, field, c)).collect()
}

/// OLAT pretraining: Adam on the bare stop-gradient loss.
pub fn pretrain_with(
    mut state: TrainState,
    scene: &Scene,
    dataset: &OlatDataset,
    config: &TrainConfig,
    mut on_iter: impl FnMut(&TrainState) -> Result<()>,
) -> Result<TrainState> {
    config.validate()?;
    if dataset.env_dims != state.env_dims {
        return Err(Error::ShapeMismatch(format!(
            "dataset envmap {:?} vs training grid {:?}",
            dataset.env_dims, state.env_dims
        )));
    }
    let caches = olat_caches(scene, &state.field, dataset)?;
    let images = usable_images(dataset, &caches);
    if images.is_empty() {
        return Err(Error::Config("OLAT dataset has no foreground pixels".into()));
    }
    let sh_in = texel_sh(state.env_dims);
    let mut grads = FieldGrads::new(&state.field)?;
    let mut guard = Guard { initial: None, above: 0 };
    state.stage = Stage::Pretrain;
    for it in 0..config.pretrain_iters {
        let mut rng = iter_rng(config.seed, Stage::Pretrain, it);
        let draws = draw_olat(&mut rng, &images, dataset, &caches, config.pretrain_batch, config.rays_per_image);
        grads.clear();
        let loss = loss_olat(&state.field, &caches, &sh_in, dataset, &draws, config.epsilon, 1.0, Some(&mut grads))?;
        state.step_field(&mut grads, config.pretrain_lr, &config.adam)?;
        state.iteration = it + 1;
        state.trace.push(TrainTraceEntry {
            stage: Stage::Pretrain,
            iter: it,
            loss,
            loss_olat: loss,
            loss_prt: 0.0,
            loss_envc: 0.0,
            olat_images: config.pretrain_batch,
            real_images: 0,
        });
        on_iter(&state)?;
        guard.check(it, loss)?;
    }
    Ok(state)
}

pub fn pretrain(state: TrainState, scene: &Scene, dataset: &OlatDataset, config: &TrainConfig) -> Result<TrainState> {
    pretrain_with(state, scene, dataset, config, |_| Ok(()))
}

/// Loss terms of one joint iteration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JointTerms {
    pub olat: f64,
    pub prt: f64,
    pub envc: f64,
}

impl JointTerms {
    pub fn total(&self, c: &TrainConfig) -> f64 {
        c.lambda_olat * self.olat + c.lambda_prt * self.prt + c.lambda_envc * self.envc
    }
}

/// Everything the joint stage precomputes once.
pub struct JointContext<'a> {
    pub dataset: &'a OlatDataset,
    pub views: &'a [View],
    pub olat_caches: Vec<HitCache>,
    pub view_caches: Vec<HitCache>,
    pub sh_in: Vec<[f64; SH_DIM]>,
    images: Vec<u32>,
    usable_views: Vec<u32>,
}

impl<'a> JointContext<'a> {
    pub fn new(scene: &Scene, field: &NrtfField<f32>, dataset: &'a OlatDataset, views: &'a [View]) -> Result<Self> {
        let olat_caches = olat_caches(scene, field, dataset)?;
        let view_caches: Vec<HitCache> =
            views.iter().map(|v| HitCache::build(scene, field, &v.camera)).collect::<Result<_>>()?;
        let images = usable_images(dataset, &olat_caches);
        let usable_views = (0..views.len() as u32)
            .filter(|&v| !view_caches[v as usize].is_empty())
            .collect();
        Ok(JointContext {
            dataset,
            views,
            olat_caches,
            view_caches,
            sh_in: texel_sh(dataset.env_dims),
            images,
            usable_views,
        })
    }
}

/// Draws of one joint iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct JointBatch {
    pub olat: Vec<OlatDraw>,
    /// `(view, slots)` per drawn real image.
    pub real: Vec<(u32, Vec<u32>)>,
}

pub fn draw_joint(ctx: &JointContext, config: &TrainConfig, iter: usize) -> Result<JointBatch> {
    let mut rng = iter_rng(config.seed, Stage::Joint, iter);
    if config.joint_olat_batch > 0 && ctx.images.is_empty() {
        return Err(Error::Config("OLAT dataset has no foreground pixels".into()));
    }
    if config.joint_real_batch > 0 && ctx.usable_views.is_empty() {
        return Err(Error::Config("no real view has foreground pixels".into()));
    }
    let olat = draw_olat(
        &mut rng,
        &ctx.images,
        ctx.dataset,
        &ctx.olat_caches,
        config.joint_olat_batch,
        config.rays_per_image,
    );
    let real = (0..config.joint_real_batch)
        .map(|_| {
            let v = ctx.usable_views[rng.gen_range(0..ctx.usable_views.len())];
            let n = ctx.view_caches[v as usize].len();
            let slots = (0..config.real_rays_per_image).map(|_| rng.gen_range(0..n) as u32).collect();
            (v, slots)
        })
        .collect();
    Ok(JointBatch { olat, real })
}

/// Joint loss terms and, with `grads`, their weighted gradients in the field
/// and in the (constrained) envmap.
pub fn joint_terms(
    field: &NrtfField<f32>,
    ctx: &JointContext,
    batch: &JointBatch,
    env: &[Rgb],
    env_init: &[Rgb],
    config: &TrainConfig,
    grads: Option<(&mut FieldGrads<f32>, &mut [Rgb])>,
) -> Result<JointTerms> {
    let (mut fg, mut eg) = match grads {
        Some((f, e)) => (Some(f), Some(e)),
        None => (None, None),
    };
    let olat = if batch.olat.is_empty() {
        0.0
    } else {
        loss_olat(
            field,
            &ctx.olat_caches,
            &ctx.sh_in,
            ctx.dataset,
            &batch.olat,
            config.epsilon,
            config.lambda_olat,
            fg.as_deref_mut(),
        )?
    };
    let mut prt = 0.0;
    let nr = batch.real.len().max(1) as f64;
    for (v, slots) in &batch.real {
        let g = match (fg.as_deref_mut(), eg.as_deref_mut()) {
            (Some(f), Some(e)) => Some((f, e)),
            _ => None,
        };
        prt += loss_prt(
            field,
            &ctx.view_caches[*v as usize],
            &ctx.sh_in,
            &ctx.views[*v as usize].image,
            env,
            slots,
            config.lambda_prt / nr,
            g,
        )? / nr;
    }
    let (envc, dc) = loss_envc(env, env_init)?;
    if let Some(e) = eg {
        for (a, b) in e.iter_mut().zip(&dc) {
            *a += config.lambda_envc * *b;
        }
    }
    Ok(JointTerms { olat, prt, envc })
}

/// Joint finetuning of the field and the envmap, starting the envmap from
/// `env_init` (the stage-1 estimate on the training grid).
pub fn joint_finetune_with(
    mut state: TrainState,
    scene: &Scene,
    dataset: &OlatDataset,
    views: &[View],
    env_init: &EnvironmentMap,
    config: &TrainConfig,
    mut on_iter: impl FnMut(&TrainState) -> Result<()>,
) -> Result<TrainState> {
    config.validate()?;
    if (env_init.width, env_init.height) != state.env_dims || dataset.env_dims != state.env_dims {
        return Err(Error::ShapeMismatch(format!(
            "envmap {}x{} and dataset {:?} must match training grid {:?}",
            env_init.width, env_init.height, dataset.env_dims, state.env_dims
        )));
    }
    env_init.validate()?;
    if state.stage != Stage::Joint {
        state.stage = Stage::Joint;
        state.iteration = 0;
        state.env_init = env_init.data.clone();
        state.env_raw = env_init
            .data
            .iter()
            .flat_map(|c| c.to_array().map(|v| softplus_inv(v.max(1e-6))))
            .collect();
        state.env_moments = Moments::new(state.env_raw.len());
    }
    let ctx = JointContext::new(scene, &state.field, dataset, views)?;
    let mut grads = FieldGrads::new(&state.field)?;
    let mut guard = Guard { initial: None, above: 0 };
    let start = state.iteration;
    for it in start..start + config.joint_iters {
        let batch = draw_joint(&ctx, config, it)?;
        let env = state.envmap().expect("joint stage has an envmap").data;
        grads.clear();
        let mut denv = vec![Rgb::ZERO; env.len()];
        let terms = joint_terms(
            &state.field,
            &ctx,
            &batch,
            &env,
            &state.env_init,
            config,
            Some((&mut grads, &mut denv)),
        )?;
        let graw: Vec<f64> = denv
            .iter()
            .flat_map(|g| g.to_array())
            .zip(&state.env_raw)
            .map(|(g, &r)| g * sigmoid(r))
            .collect();
        state.step_field(&mut grads, config.joint_lr, &config.adam)?;
        adam_step(&mut state.env_raw, &graw, &mut state.env_moments, config.joint_lr, &config.adam, "envmap")?;
        state.iteration = it + 1;
        let loss = terms.total(config);
        state.trace.push(TrainTraceEntry {
            stage: Stage::Joint,
            iter: it,
            loss,
            loss_olat: terms.olat,
            loss_prt: terms.prt,
            loss_envc: terms.envc,
            olat_images: batch.olat.len() / config.rays_per_image,
            real_images: batch.real.len(),
        });
        on_iter(&state)?;
        guard.check(it, loss)?;
    }
    Ok(state)
}

pub fn joint_finetune(
    state: TrainState,
    scene: &Scene,
    dataset: &OlatDataset,
    views: &[View],
    env_init: &EnvironmentMap,
    config: &TrainConfig,
) -> Result<TrainState> {
    joint_finetune_with(state, scene, dataset, views, env_init, config, |_| Ok(()))
}

pub fn write_trace_csv(path: &Path, trace: &[TrainTraceEntry]) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "stage,iter,loss,loss_olat,loss_prt,loss_envc,olat_images,real_images").expect("vec write");
    for e in trace {
        writeln!(
            out,
            "{},{},{:e},{:e},{:e},{:e},{},{}",
            e.stage.name(),
            e.iter,
            e.loss,
            e.loss_olat,
            e.loss_prt,
            e.loss_envc,
            e.olat_images,
            e.real_images
        )
        .expect("vec write");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Training metadata stored next to a binary checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub format: String,
    pub version: u32,
    pub stage: Stage,
    pub iteration: usize,
    pub env_width: usize,
    pub env_height: usize,
    pub olat_radiance: f64,
    /// File name of the trained envmap, joint stage only.
    pub envmap: Option<String>,
    pub last_loss: Option<f64>,
    pub config: TrainConfig,
}

pub fn sidecar_path(checkpoint: &Path) -> std::path::PathBuf {
    checkpoint.with_extension("json")
}

/// Write `<path>`, its JSON sidecar and, in the joint stage, the envmap PFM
/// beside it.
pub fn save_checkpoint(path: &Path, state: &TrainState, config: &TrainConfig, olat_radiance: f64) -> Result<()> {
    crate::nn::checkpoint::save(&state.field, path)?;
    let envmap = match state.envmap() {
        Some(env) => {
            let file = path.with_extension("env.pfm");
            env.save(&file)?;
            file.file_name().map(|f| f.to_string_lossy().into_owned())
        }
        None => None,
    };
    let side = Sidecar {
        format: String::from_utf8_lossy(crate::nn::checkpoint::MAGIC).into_owned(),
        version: crate::nn::checkpoint::VERSION,
        stage: state.stage,
        iteration: state.iteration,
        env_width: state.env_dims.0,
        env_height: state.env_dims.1,
        olat_radiance,
        envmap,
        last_loss: state.trace.last().map(|e| e.loss),
        config: config.clone(),
    };
    let sp = sidecar_path(path);
    std::fs::write(&sp, serde_json::to_string_pretty(&side)?).map_err(|e| Error::io(&sp, e))
}

/// A checkpoint with its sidecar and, if recorded, its envmap.
pub struct LoadedCheckpoint {
    pub field: NrtfField<f32>,
    pub sidecar: Sidecar,
    pub envmap: Option<EnvironmentMap>,
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let field = crate::nn::checkpoint::load(path)?;
    let sp = sidecar_path(path);
    let text = std::fs::read_to_string(&sp).map_err(|e| Error::io(&sp, e))?;
    let sidecar: Sidecar = serde_json::from_str(&text).map_err(|e| Error::parse(&sp, e.to_string()))?;
    let envmap = match &sidecar.envmap {
        Some(f) => {
            let p = path.parent().unwrap_or(Path::new(".")).join(f);
            Some(EnvironmentMap::load(p)?)
        }
        None => None,
    };
    Ok(LoadedCheckpoint { field, sidecar, envmap })
}
