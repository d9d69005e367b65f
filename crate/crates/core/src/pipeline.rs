//! Stage drivers shared by the CLI subcommands and the end-to-end run.
//! Each stage reads and writes plain files so any of them can be rerun on
//! its own.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bsdf::BlendedBsdf;
use crate::camera::{load_cameras, save_cameras, Camera};
use crate::config::Config;
use crate::envmap::EnvironmentMap;
use crate::image::{HdrImage, ToneMap};
use crate::invopt::{fit_light_material_with, FitResult, FitTraceEntry, View};
use crate::math::{mix_seed, Rgb};
use crate::mesh::TriangleMesh;
use crate::metrics::MetricsReport;
use crate::olat::{extra_cameras, synthesize_olat_dataset, OlatDataset};
use crate::pathtracer::{render, RenderSettings};
use crate::relight::{relight, RelightOptions};
use crate::scene::Scene;
use crate::texture::AlbedoTexture;
use crate::train::{
    init_field, joint_finetune, load_checkpoint, pretrain, save_checkpoint, write_trace_csv, Stage,
    TrainState,
};
use crate::{Error, Result};

/// Fit snapshots are written this often.
pub const FIT_CHECKPOINT_EVERY: usize = 500;

pub fn view_file(i: usize) -> String {
    format!("view_{i:03}.pfm")
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::io(path, e))
}

/// Loaded scene assets.
pub struct SceneAssets {
    pub scene: Scene,
    pub cameras: Vec<Camera>,
    pub train_views: usize,
    pub env_gt: Option<EnvironmentMap>,
    pub env_holdout: Option<EnvironmentMap>,
    pub bsdf_gt: Option<BlendedBsdf>,
}

impl SceneAssets {
    pub fn load(cfg: &Config) -> Result<Self> {
        let s = &cfg.scene;
        let scene = Scene::new(TriangleMesh::load_obj(&s.mesh)?)?;
        let cameras = load_cameras(&s.cameras)?;
        if cameras.is_empty() {
            return Err(Error::InvalidCamera("camera file lists no cameras".into()));
        }
        let train_views = match s.train_views {
            0 => cameras.len(),
            n if n <= cameras.len() => n,
            n => {
                return Err(Error::Config(format!(
                    "train_views {n} exceeds the {} cameras",
                    cameras.len()
                )))
            }
        };
        let env_gt = s.env_gt.as_ref().map(EnvironmentMap::load).transpose()?;
        let env_holdout = s.env_holdout.as_ref().map(EnvironmentMap::load).transpose()?;
        let bsdf_gt = match (&s.albedo_gt, s.w_gt, s.alpha_gt) {
            (Some(a), Some(w), Some(alpha)) => {
                let mut albedo = AlbedoTexture::load(a)?;
                albedo.set_coverage(&scene.mesh);
                Some(BlendedBsdf::new(w, alpha, albedo))
            }
            _ => None,
        };
        Ok(SceneAssets {
            scene,
            cameras,
            train_views,
            env_gt,
            env_holdout,
            bsdf_gt,
        })
    }

    pub fn training_cameras(&self) -> &[Camera] {
        &self.cameras[..self.train_views]
    }

    /// Held-out cameras; the training cameras when none are held out.
    pub fn eval_cameras(&self) -> &[Camera] {
        if self.train_views < self.cameras.len() {
            &self.cameras[self.train_views..]
        } else {
            &self.cameras
        }
    }

    pub fn require_env_gt(&self) -> Result<&EnvironmentMap> {
        self.env_gt
            .as_ref()
            .ok_or_else(|| Error::Config("scene has no env_gt".into()))
    }

    pub fn require_bsdf_gt(&self) -> Result<&BlendedBsdf> {
        self.bsdf_gt
            .as_ref()
            .ok_or_else(|| Error::Config("scene needs albedo_gt, w_gt and alpha_gt".into()))
    }
}

/// Path-trace every camera and write `view_NNN.pfm` plus PNG previews.
/// Camera `i` uses seed `mix_seed(settings.seed, i)`.
pub fn render_views(
    scene: &Scene,
    cameras: &[Camera],
    env: &EnvironmentMap,
    bsdf: &BlendedBsdf,
    settings: &RenderSettings,
    tone_map: &ToneMap,
    dir: &Path,
) -> Result<Vec<HdrImage>> {
    create_dir(dir)?;
    let mut out = Vec::with_capacity(cameras.len());
    for (i, cam) in cameras.iter().enumerate() {
        let s = RenderSettings {
            seed: mix_seed(settings.seed, i as u64),
            ..*settings
        };
        let img = render(scene, cam, env, bsdf, &s)?;
        save_image(&img, dir, i, tone_map)?;
        out.push(img);
    }
    Ok(out)
}

fn save_image(img: &HdrImage, dir: &Path, i: usize, tone_map: &ToneMap) -> Result<()> {
    let file = view_file(i);
    let wrap = |e| Error::ImageWrite {
        id: file.clone(),
        source: Box::new(e),
    };
    img.save_pfm(dir.join(&file)).map_err(wrap)?;
    img.save_png(dir.join(&file).with_extension("png"), tone_map).map_err(wrap)
}

/// `view_NNN.pfm` for each camera, paired with its foreground mask.
pub fn load_views(scene: &Scene, cameras: &[Camera], dir: &Path) -> Result<Vec<View>> {
    cameras
        .iter()
        .enumerate()
        .map(|(i, cam)| View::new(scene, cam.clone(), HdrImage::load_pfm(dir.join(view_file(i)))?))
        .collect()
}

/// Scalar fit results written next to the fitted maps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub w: f64,
    pub alpha: f64,
    pub iterations: usize,
    pub trace: Vec<FitTraceEntry>,
}

pub fn write_fit_trace_csv(path: &Path, trace: &[FitTraceEntry]) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "iter,loss_pt,loss_reg,loss").expect("vec write");
    for e in trace {
        writeln!(out, "{},{:e},{:e},{:e}", e.iter, e.loss_pt, e.loss_reg, e.loss).expect("vec write");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Light and material fit; writes `env.pfm`, `albedo.pfm`, `fit.json` and
/// `trace.csv`, with snapshots of the maps every
/// [`FIT_CHECKPOINT_EVERY`] iterations.
pub fn run_fit(cfg: &Config, scene: &Scene, views: &[View], dir: &Path) -> Result<FitResult> {
    create_dir(dir)?;
    let mut fit_cfg = cfg.fit.clone();
    if fit_cfg.dump_dir.is_none() {
        fit_cfg.dump_dir = Some(dir.to_path_buf());
    }
    let result = fit_light_material_with(scene, views, &fit_cfg, |state, e| {
        if (e.iter + 1) % FIT_CHECKPOINT_EVERY == 0 {
            state.envmap().save(dir.join("env_snapshot.pfm"))?;
            state.bsdf().albedo.save(dir.join("albedo_snapshot.pfm"))?;
        }
        Ok(())
    })?;
    result.envmap.save(dir.join("env.pfm"))?;
    result.bsdf.albedo.save(dir.join("albedo.pfm"))?;
    write_fit_trace_csv(&dir.join("trace.csv"), &result.trace)?;
    write_json(
        &dir.join("fit.json"),
        &FitSummary {
            w: result.bsdf.w,
            alpha: result.bsdf.alpha,
            iterations: result.trace.len(),
            trace: result.trace.clone(),
        },
    )?;
    Ok(result)
}

/// Read back a fit directory as `(bsdf, envmap)`.
pub fn load_fit(dir: &Path, scene: &Scene) -> Result<(BlendedBsdf, EnvironmentMap)> {
    let path = dir.join("fit.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let s: FitSummary = serde_json::from_str(&text).map_err(|e| Error::parse(&path, e.to_string()))?;
    let mut albedo = AlbedoTexture::load(dir.join("albedo.pfm"))?;
    albedo.set_coverage(&scene.mesh);
    Ok((BlendedBsdf::new(s.w, s.alpha, albedo), EnvironmentMap::load(dir.join("env.pfm"))?))
}

/// OLAT synthesis over the training cameras plus extra poses.
pub fn run_olat(cfg: &Config, assets: &SceneAssets, bsdf: &BlendedBsdf, dir: &Path) -> Result<OlatDataset> {
    let train = assets.training_cameras();
    let extra = cfg.olat.extra_cameras.unwrap_or(train.len());
    let center = assets.scene.mesh.bounds().centroid();
    let mut cameras = train.to_vec();
    cameras.extend(extra_cameras(train, center, extra)?);
    let data = synthesize_olat_dataset(&assets.scene, &cameras, cfg.olat.dims(), bsdf, &cfg.olat.render_settings())?;
    data.save(dir)?;
    Ok(data)
}

pub fn run_pretrain(cfg: &Config, scene: &Scene, data: &OlatDataset, checkpoint: &Path) -> Result<TrainState> {
    let state = TrainState::new(init_field(scene, &cfg.train)?, data.env_dims);
    let state = pretrain(state, scene, data, &cfg.train)?;
    finish_training(cfg, &state, data, checkpoint)?;
    Ok(state)
}

/// Joint finetuning from a pretrain checkpoint; `env_fit` is resampled to
/// the OLAT grid to initialize the envmap.
pub fn run_joint(
    cfg: &Config,
    scene: &Scene,
    data: &OlatDataset,
    views: &[View],
    env_fit: &EnvironmentMap,
    from: &Path,
    checkpoint: &Path,
) -> Result<TrainState> {
    let loaded = load_checkpoint(from)?;
    if loaded.sidecar.stage != Stage::Pretrain {
        return Err(Error::Config(format!("{} is not a pretrain checkpoint", from.display())));
    }
    let state = TrainState::new(loaded.field, data.env_dims);
    let env_init = env_fit.resample(data.env_dims.0, data.env_dims.1);
    let state = joint_finetune(state, scene, data, views, &env_init, &cfg.train)?;
    finish_training(cfg, &state, data, checkpoint)?;
    Ok(state)
}

fn finish_training(cfg: &Config, state: &TrainState, data: &OlatDataset, checkpoint: &Path) -> Result<()> {
    if let Some(d) = checkpoint.parent() {
        create_dir(d)?;
    }
    save_checkpoint(checkpoint, state, &cfg.train, data.olat_radiance)?;
    write_trace_csv(&checkpoint.with_extension("trace.csv"), &state.trace)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelightSummary {
    pub checkpoint: PathBuf,
    pub envmap_width: usize,
    pub envmap_height: usize,
    pub continuous: bool,
    pub mask_only: bool,
    /// Clamped foreground hits per camera.
    pub clamped: Vec<usize>,
}

/// Relight every camera with a checkpoint; writes `view_NNN.pfm`, previews
/// and `relight.json`.
pub fn run_relight(
    checkpoint: &Path,
    scene: &Scene,
    env: &EnvironmentMap,
    cameras: &[Camera],
    options: RelightOptions,
    tone_map: &ToneMap,
    dir: &Path,
) -> Result<Vec<HdrImage>> {
    let loaded = load_checkpoint(checkpoint)?;
    let dims = (loaded.sidecar.env_width, loaded.sidecar.env_height);
    create_dir(dir)?;
    let mut images = Vec::with_capacity(cameras.len());
    let mut clamped = Vec::with_capacity(cameras.len());
    for (i, cam) in cameras.iter().enumerate() {
        let r = relight(&loaded.field, scene, env, dims, cam, options)?;
        save_image(&r.image, dir, i, tone_map)?;
        clamped.push(r.clamped);
        images.push(r.image);
    }
    write_json(
        &dir.join("relight.json"),
        &RelightSummary {
            checkpoint: checkpoint.to_path_buf(),
            envmap_width: env.width,
            envmap_height: env.height,
            continuous: options.continuous,
            mask_only: options.mask_only,
            clamped,
        },
    )?;
    Ok(images)
}

/// Compare every `*.pfm` in `reference` with the same name in `test`.
pub fn eval_dirs(reference: &Path, test: &Path, tone_map: ToneMap) -> Result<MetricsReport> {
    let mut names: Vec<String> = std::fs::read_dir(reference)
        .map_err(|e| Error::io(reference, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".pfm"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::Config(format!("no .pfm images in {}", reference.display())));
    }
    let pairs = names
        .iter()
        .map(|n| Ok((n.clone(), HdrImage::load_pfm(reference.join(n))?, HdrImage::load_pfm(test.join(n))?)))
        .collect::<Result<Vec<_>>>()?;
    MetricsReport::compare(tone_map, pairs.iter().map(|(n, a, b)| (n.clone(), a, b)))
}

pub fn save_report(report: &MetricsReport, stem: &Path) -> Result<()> {
    if let Some(d) = stem.parent() {
        create_dir(d)?;
    }
    report.save_json(&stem.with_extension("json"))?;
    report.save_csv(&stem.with_extension("csv"))
}

/// Foreground-masked copies, so metrics see only the object.
fn mask_all(scene: &Scene, cameras: &[Camera], images: &[HdrImage]) -> Vec<HdrImage> {
    cameras
        .iter()
        .zip(images)
        .map(|(c, img)| img.masked(&scene.foreground_mask(c)))
        .collect()
}

/// Results of an end-to-end run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub preset: crate::config::Preset,
    pub fit_w: f64,
    pub fit_alpha: f64,
    /// Scale-normalized envmap RMSE over the GT mean, when the GT is known.
    pub fit_env_rel_rmse: Option<f64>,
    /// Per-channel `mean(estimate) / mean(GT)` of the jointly trained envmap.
    pub light_scale: Option<[f64; 3]>,
    pub novel_view: Option<MetricsReport>,
    pub relighting: Option<MetricsReport>,
    /// Relative to the output directory when inside it.
    pub artifacts: Vec<PathBuf>,
}

/// Images, fit, OLAT, both training stages, relighting and evaluation.
///
/// Novel views relight the held-out cameras with the jointly trained
/// envmap; relighting uses the held-out envmap times the estimate's
/// per-channel scale, since lighting is only recovered up to scale. Both
/// are compared against path-traced references on foreground pixels.
pub fn run_pipeline(cfg: &Config, out: &Path) -> Result<PipelineSummary> {
    let assets = SceneAssets::load(cfg)?;
    let scene = &assets.scene;
    let tm = cfg.eval.tone_map;
    create_dir(out)?;
    write_json(&out.join("config.json"), cfg)?;
    save_cameras(out.join("cameras.json"), &assets.cameras)?;
    let train_cams = assets.training_cameras();

    let images_dir = match &cfg.scene.images {
        Some(d) => d.clone(),
        None => {
            let d = out.join("images");
            render_views(scene, train_cams, assets.require_env_gt()?, assets.require_bsdf_gt()?, &cfg.render, &tm, &d)?;
            d
        }
    };
    let views = load_views(scene, train_cams, &images_dir)?;

    let fit_dir = out.join("fit");
    let fit = run_fit(cfg, scene, &views, &fit_dir)?;
    let fit_env_rel_rmse = match &assets.env_gt {
        Some(gt) => {
            let (_, rmse) = crate::invopt::scale_normalized_rmse(&fit.envmap.resample(gt.width, gt.height), gt)?;
            Some(rmse / (gt.mean().element_sum() / 3.0))
        }
        None => None,
    };

    // Later stages read the fit back from disk, exactly as the stagewise
    // commands do.
    let (fit_bsdf, fit_env) = load_fit(&fit_dir, scene)?;
    let olat_dir = out.join("olat");
    let data = run_olat(cfg, &assets, &fit_bsdf, &olat_dir)?;
    let pre = out.join("train").join("pretrain.nrtf");
    run_pretrain(cfg, scene, &data, &pre)?;
    let joint = out.join("train").join("joint.nrtf");
    let state = run_joint(cfg, scene, &data, &views, &fit_env, &pre, &joint)?;
    let env_est = state.envmap().expect("joint stage trains an envmap");

    let mut artifacts = vec![
        out.join("config.json"),
        images_dir.clone(),
        fit_dir,
        olat_dir,
        pre,
        joint.clone(),
    ];
    let eval_cams = assets.eval_cameras();
    let opts = RelightOptions { mask_only: true, ..Default::default() };
    let novel_dir = out.join("relight_novel_view");
    let novel = run_relight(&joint, scene, &env_est, eval_cams, opts, &tm, &novel_dir)?;
    artifacts.push(novel_dir);

    let (mut novel_view, mut relighting, mut light_scale) = (None, None, None);
    if let (Some(gt_env), Some(gt_bsdf)) = (&assets.env_gt, &assets.bsdf_gt) {
        let ref_settings = RenderSettings {
            spp: cfg.eval.reference_spp,
            seed: mix_seed(cfg.render.seed, 0x5eed),
            ..cfg.render
        };
        let ref_dir = out.join("reference_novel_view");
        let refs = render_views(scene, eval_cams, gt_env, gt_bsdf, &ref_settings, &tm, &ref_dir)?;
        let report = compare_masked(scene, eval_cams, &refs, &novel, tm)?;
        save_report(&report, &out.join("report_novel_view"))?;
        novel_view = Some(report);
        artifacts.push(ref_dir);

        let g = gt_env.resample(env_est.width, env_est.height).mean();
        let e = env_est.mean();
        let scale = Rgb::new(e.x / g.x, e.y / g.y, e.z / g.z);
        light_scale = Some(scale.to_array());
        if let Some(hold) = &assets.env_holdout {
            let relit_dir = out.join("relight_holdout");
            let relit = run_relight(&joint, scene, &hold.scaled(scale), eval_cams, opts, &tm, &relit_dir)?;
            let ref_dir = out.join("reference_holdout");
            let refs = render_views(scene, eval_cams, hold, gt_bsdf, &ref_settings, &tm, &ref_dir)?;
            let report = compare_masked(scene, eval_cams, &refs, &relit, tm)?;
            save_report(&report, &out.join("report_relighting"))?;
            relighting = Some(report);
            artifacts.extend([relit_dir, ref_dir]);
        }
    }

    let summary = PipelineSummary {
        preset: cfg.preset,
        fit_w: fit.bsdf.w,
        fit_alpha: fit.bsdf.alpha,
        fit_env_rel_rmse,
        light_scale,
        novel_view,
        relighting,
        artifacts: artifacts
            .into_iter()
            .map(|a| a.strip_prefix(out).map(Path::to_path_buf).unwrap_or(a))
            .collect(),
    };
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

fn compare_masked(
    scene: &Scene,
    cameras: &[Camera],
    reference: &[HdrImage],
    test: &[HdrImage],
    tm: ToneMap,
) -> Result<MetricsReport> {
    let r = mask_all(scene, cameras, reference);
    let t = mask_all(scene, cameras, test);
    MetricsReport::compare(tm, r.iter().zip(&t).enumerate().map(|(i, (a, b))| (view_file(i), a, b)))
}
