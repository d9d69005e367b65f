//! `nrtf`: path tracing, inverse rendering, OLAT synthesis, transfer-field
//! training and relighting from the command line.
//!
//! Success prints one JSON line on stdout. Failure prints one JSON line
//! `{"error": <kind>, "message": <text>}` on stderr and exits 1, or 2 for
//! bad flags and malformed configs (followed by the usage text).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use nrtf_core::camera::Camera;
use nrtf_core::config::{Config, Preset};
use nrtf_core::envmap::EnvironmentMap;
use nrtf_core::image::ToneMap;
use nrtf_core::olat::OlatDataset;
use nrtf_core::pathtracer::RenderSettings;
use nrtf_core::pipeline::{self, SceneAssets};
use nrtf_core::relight::RelightOptions;
use nrtf_core::train::load_checkpoint;

#[derive(Parser)]
#[command(name = "nrtf", version, about = "Neural radiance transfer relighting toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct SceneArgs {
    /// Scene config TOML.
    #[arg(long)]
    scene: PathBuf,
    /// Settings preset the config overrides [default: the file's, else desk].
    #[arg(long, value_enum)]
    preset: Option<PresetArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Desk,
    Paper,
}

#[derive(Clone, Copy, ValueEnum)]
enum CameraSet {
    All,
    Train,
    Eval,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Pretrain,
    Joint,
}

#[derive(Subcommand)]
enum Command {
    /// Path-trace camera views of the scene.
    Render {
        #[command(flatten)]
        scene: SceneArgs,
        #[arg(long)]
        out: PathBuf,
        /// Envmap to render under [default: the scene's env_gt].
        #[arg(long)]
        envmap: Option<PathBuf>,
        /// Fit directory whose material replaces the ground truth.
        #[arg(long)]
        fit: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "train")]
        cameras: CameraSet,
        #[arg(long)]
        spp: Option<u32>,
    },
    /// Synthesize the OLAT dataset with a fitted material.
    Olat {
        #[command(flatten)]
        scene: SceneArgs,
        #[arg(long)]
        fit: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Jointly fit lighting and material to the training images.
    Fit {
        #[command(flatten)]
        scene: SceneArgs,
        /// Directory of view_NNN.pfm [default: the scene's images].
        #[arg(long)]
        images: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the transfer field.
    Train {
        #[command(flatten)]
        scene: SceneArgs,
        #[arg(long, value_enum)]
        stage: StageArg,
        /// OLAT dataset directory.
        #[arg(long)]
        olat: PathBuf,
        /// Checkpoint to write.
        #[arg(long)]
        out: PathBuf,
        /// Pretrain checkpoint to finetune (joint stage).
        #[arg(long)]
        from: Option<PathBuf>,
        /// Fit directory with the initial envmap (joint stage).
        #[arg(long)]
        fit: Option<PathBuf>,
        /// Training images (joint stage) [default: the scene's images].
        #[arg(long)]
        images: Option<PathBuf>,
    },
    /// Render novel views under an arbitrary envmap with a trained field.
    Relight {
        #[command(flatten)]
        scene: SceneArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Target envmap [default: the checkpoint's trained envmap].
        #[arg(long)]
        envmap: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "eval")]
        cameras: CameraSet,
        /// Evaluate at the target envmap's own texel directions.
        #[arg(long)]
        continuous: bool,
        /// Black background.
        #[arg(long)]
        mask_only: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// PSNR and SSIM of matching .pfm files in two directories.
    Eval {
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        test: PathBuf,
        /// Report path stem; writes <stem>.json and <stem>.csv.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        exposure: f64,
        #[arg(long, default_value_t = 2.2)]
        gamma: f64,
    },
    /// Every stage end to end on a scene config.
    Pipeline {
        #[command(flatten)]
        scene: SceneArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

enum Failure {
    Usage(String),
    Core(nrtf_core::Error),
}

impl From<nrtf_core::Error> for Failure {
    fn from(e: nrtf_core::Error) -> Self {
        Failure::Core(e)
    }
}

type Outcome = Result<Value, Failure>;

fn load_config(a: &SceneArgs) -> Result<Config, Failure> {
    let preset = a.preset.map(|p| match p {
        PresetArg::Desk => Preset::Desk,
        PresetArg::Paper => Preset::Paper,
    });
    Config::load(&a.scene, preset).map_err(|e| Failure::Usage(e.to_string()))
}

fn select(assets: &SceneAssets, set: CameraSet) -> &[Camera] {
    match set {
        CameraSet::All => &assets.cameras,
        CameraSet::Train => assets.training_cameras(),
        CameraSet::Eval => assets.eval_cameras(),
    }
}

fn images_dir(cfg: &Config, flag: Option<PathBuf>) -> Result<PathBuf, Failure> {
    flag.or_else(|| cfg.scene.images.clone())
        .ok_or_else(|| Failure::Usage("no training images: pass --images or set scene.images".into()))
}

fn path(p: &Path) -> Value {
    Value::String(p.display().to_string())
}

fn run(command: Command) -> Outcome {
    match command {
        Command::Render { scene, out, envmap, fit, cameras, spp } => {
            let cfg = load_config(&scene)?;
            let assets = SceneAssets::load(&cfg)?;
            let bsdf = match &fit {
                Some(dir) => pipeline::load_fit(dir, &assets.scene)?.0,
                None => assets.require_bsdf_gt()?.clone(),
            };
            let env = match &envmap {
                Some(p) => EnvironmentMap::load(p)?,
                None => assets.require_env_gt()?.clone(),
            };
            let settings = RenderSettings {
                spp: spp.unwrap_or(cfg.render.spp),
                ..cfg.render
            };
            let cams = select(&assets, cameras);
            pipeline::render_views(&assets.scene, cams, &env, &bsdf, &settings, &cfg.eval.tone_map, &out)?;
            Ok(json!({"command": "render", "images": cams.len(), "out": path(&out)}))
        }
        Command::Olat { scene, fit, out } => {
            let cfg = load_config(&scene)?;
            let assets = SceneAssets::load(&cfg)?;
            let (bsdf, _) = pipeline::load_fit(&fit, &assets.scene)?;
            let data = pipeline::run_olat(&cfg, &assets, &bsdf, &out)?;
            Ok(json!({"command": "olat", "images": data.len(), "cameras": data.cameras.len(), "out": path(&out)}))
        }
        Command::Fit { scene, images, out } => {
            let cfg = load_config(&scene)?;
            let assets = SceneAssets::load(&cfg)?;
            let dir = images_dir(&cfg, images)?;
            let views = pipeline::load_views(&assets.scene, assets.training_cameras(), &dir)?;
            let r = pipeline::run_fit(&cfg, &assets.scene, &views, &out)?;
            Ok(json!({
                "command": "fit",
                "w": r.bsdf.w,
                "alpha": r.bsdf.alpha,
                "final_loss": r.trace.last().map(|e| e.loss),
                "out": path(&out),
            }))
        }
        Command::Train { scene, stage, olat, out, from, fit, images } => {
            let cfg = load_config(&scene)?;
            let assets = SceneAssets::load(&cfg)?;
            let data = OlatDataset::load(&olat)?;
            let state = match stage {
                StageArg::Pretrain => pipeline::run_pretrain(&cfg, &assets.scene, &data, &out)?,
                StageArg::Joint => {
                    let from = from.ok_or_else(|| Failure::Usage("joint stage needs --from".into()))?;
                    let fit = fit.ok_or_else(|| Failure::Usage("joint stage needs --fit".into()))?;
                    let dir = images_dir(&cfg, images)?;
                    let views = pipeline::load_views(&assets.scene, assets.training_cameras(), &dir)?;
                    let (_, env) = pipeline::load_fit(&fit, &assets.scene)?;
                    pipeline::run_joint(&cfg, &assets.scene, &data, &views, &env, &from, &out)?
                }
            };
            Ok(json!({
                "command": "train",
                "stage": state.stage.name(),
                "iterations": state.iteration,
                "final_loss": state.trace.last().map(|e| e.loss),
                "checkpoint": path(&out),
            }))
        }
        Command::Relight { scene, checkpoint, envmap, cameras, continuous, mask_only, out } => {
            let cfg = load_config(&scene)?;
            let assets = SceneAssets::load(&cfg)?;
            let env = match &envmap {
                Some(p) => EnvironmentMap::load(p)?,
                None => load_checkpoint(&checkpoint)?
                    .envmap
                    .ok_or_else(|| Failure::Usage("checkpoint has no trained envmap: pass --envmap".into()))?,
            };
            let opts = RelightOptions { continuous, mask_only };
            let cams = select(&assets, cameras);
            pipeline::run_relight(&checkpoint, &assets.scene, &env, cams, opts, &cfg.eval.tone_map, &out)?;
            Ok(json!({"command": "relight", "images": cams.len(), "out": path(&out)}))
        }
        Command::Eval { reference, test, out, exposure, gamma } => {
            if !(exposure > 0.0 && gamma > 0.0) {
                return Err(Failure::Usage("exposure and gamma must be positive".into()));
            }
            let report = pipeline::eval_dirs(&reference, &test, ToneMap { exposure, gamma })?;
            pipeline::save_report(&report, &out)?;
            Ok(json!({
                "command": "eval",
                "pairs": report.pairs.len(),
                "mean_psnr": report.mean_psnr,
                "mean_ssim": report.mean_ssim,
                "out": path(&out),
            }))
        }
        Command::Pipeline { scene, out } => {
            let cfg = load_config(&scene)?;
            let s = pipeline::run_pipeline(&cfg, &out)?;
            Ok(json!({
                "command": "pipeline",
                "fit_w": s.fit_w,
                "fit_env_rel_rmse": s.fit_env_rel_rmse,
                "novel_view_psnr": s.novel_view.as_ref().map(|r| r.mean_psnr),
                "relighting_psnr": s.relighting.as_ref().map(|r| r.mean_psnr),
                "out": path(&out),
            }))
        }
    }
}

fn usage_exit(message: &str) -> ExitCode {
    eprintln!("{}", json!({"error": "usage", "message": message}));
    eprintln!("{}", Cli::command().render_usage());
    ExitCode::from(2)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let first = e.to_string();
            let line = first.lines().next().unwrap_or("invalid arguments");
            return usage_exit(line.trim_start_matches("error: "));
        }
    };
    match run(cli.command) {
        Ok(v) => {
            println!("{v}");
            ExitCode::SUCCESS
        }
        Err(Failure::Usage(m)) => usage_exit(&m),
        Err(Failure::Core(e)) => {
            eprintln!("{}", json!({"error": e.kind(), "message": e.to_string()}));
            ExitCode::from(1)
        }
    }
}
