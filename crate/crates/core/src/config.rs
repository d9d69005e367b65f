//! Scene configuration: a TOML file naming the scene assets plus optional
//! overrides of every stage's settings, layered over a named preset.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::image::ToneMap;
use crate::invopt::FitConfig;
use crate::pathtracer::RenderSettings;
use crate::train::TrainConfig;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Shrunk iteration counts and budgets for a single workstation.
    #[default]
    Desk,
    /// Published iteration counts; hours to days of CPU time.
    Paper,
}

impl FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            _ => Err(Error::Config(format!("unknown preset `{s}` (expected desk or paper)"))),
        }
    }
}

/// Scene assets. Relative paths resolve against the config file's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSection {
    pub mesh: PathBuf,
    pub cameras: PathBuf,
    /// Cameras used for fitting and training; the rest are held out.
    /// 0 means all.
    #[serde(default)]
    pub train_views: usize,
    /// Directory of captured images `view_NNN.pfm`. Without it, training
    /// images are rendered from the ground-truth assets.
    pub images: Option<PathBuf>,
    pub env_gt: Option<PathBuf>,
    pub env_holdout: Option<PathBuf>,
    pub albedo_gt: Option<PathBuf>,
    pub w_gt: Option<f64>,
    pub alpha_gt: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OlatConfig {
    pub env_width: usize,
    pub env_height: usize,
    /// Extra poses beyond the training cameras; `None` adds as many as there
    /// are training views.
    pub extra_cameras: Option<usize>,
    pub spp: u32,
    pub max_bounces: u32,
    pub olat_radiance: f64,
    pub seed: u64,
}

impl Default for OlatConfig {
    fn default() -> Self {
        OlatConfig {
            env_width: 16,
            env_height: 8,
            extra_cameras: None,
            spp: 64,
            max_bounces: 5,
            olat_radiance: 50.0,
            seed: 0,
        }
    }
}

impl OlatConfig {
    pub fn dims(&self) -> (usize, usize) {
        (self.env_width, self.env_height)
    }

    pub fn render_settings(&self) -> RenderSettings {
        RenderSettings {
            spp: self.spp,
            max_bounces: self.max_bounces,
            seed: self.seed,
            olat_radiance: self.olat_radiance,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.env_width == 0 || self.env_height == 0 {
            return Err(Error::Config("OLAT envmap grid is empty".into()));
        }
        self.render_settings().validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub tone_map: ToneMap,
    /// Samples per pixel of the path-traced references.
    pub reference_spp: u32,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            tone_map: ToneMap::default(),
            reference_spp: 256,
        }
    }
}

/// Everything a pipeline run needs. `render` drives ground-truth renders.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default)]
    pub preset: Preset,
    pub scene: SceneSection,
    pub render: RenderSettings,
    pub fit: FitConfig,
    pub olat: OlatConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

/// The stage sections a preset fills in.
#[derive(Serialize)]
struct PresetSections {
    render: RenderSettings,
    fit: FitConfig,
    olat: OlatConfig,
    train: TrainConfig,
    eval: EvalConfig,
}

fn preset_sections(preset: Preset) -> PresetSections {
    let desk = PresetSections {
        render: RenderSettings {
            spp: 64,
            ..Default::default()
        },
        fit: FitConfig::default(),
        olat: OlatConfig::default(),
        train: TrainConfig::default(),
        eval: EvalConfig::default(),
    };
    match preset {
        Preset::Desk => desk,
        Preset::Paper => PresetSections {
            olat: OlatConfig {
                env_width: 32,
                env_height: 16,
                spp: 256,
                ..desk.olat
            },
            train: TrainConfig {
                pretrain_iters: 150_000,
                joint_iters: 100_000,
                ..desk.train
            },
            render: RenderSettings {
                spp: 256,
                ..desk.render
            },
            eval: EvalConfig {
                reference_spp: 1024,
                ..desk.eval
            },
            ..desk
        },
    }
}

/// Recursively overlay `top` onto `base`; tables merge, everything else
/// replaces.
pub fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

impl Config {
    /// Parse config text, layering it over `preset` (or the file's own
    /// `preset` key, or desk). Paths are left as written.
    pub fn parse(text: &str, preset: Option<Preset>, origin: &Path) -> Result<Self> {
        let top: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::parse(origin, one_line(&e.to_string())))?;
        let preset = match (preset, top.get("preset")) {
            (Some(p), _) => p,
            (None, Some(toml::Value::String(s))) => s.parse()?,
            (None, Some(_)) => return Err(Error::parse(origin, "`preset` must be a string")),
            (None, None) => Preset::Desk,
        };
        let mut base = toml::Table::try_from(preset_sections(preset))
            .map_err(|e| Error::Config(format!("preset serialization: {e}")))?;
        merge(&mut base, top);
        base.insert("preset".into(), toml::Value::String(format!("{preset:?}").to_lowercase()));
        let cfg: Config = base
            .try_into()
            .map_err(|e: toml::de::Error| Error::parse(origin, one_line(&e.to_string())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Load a config file and resolve its scene paths.
    pub fn load(path: &Path, preset: Option<Preset>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text, preset, path)?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, dir: &Path) {
        let s = &mut self.scene;
        for p in [&mut s.mesh, &mut s.cameras] {
            *p = dir.join(&*p);
        }
        for p in [&mut s.images, &mut s.env_gt, &mut s.env_holdout, &mut s.albedo_gt]
            .into_iter()
            .flatten()
        {
            *p = dir.join(&*p);
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.render.validate()?;
        self.fit.validate()?;
        self.olat.validate()?;
        self.train.validate()?;
        if self.eval.reference_spp == 0 {
            return Err(Error::Config("reference_spp must be at least 1".into()));
        }
        let tm = &self.eval.tone_map;
        if !(tm.exposure > 0.0 && tm.gamma > 0.0) {
            return Err(Error::Config("tone map exposure and gamma must be positive".into()));
        }
        for (name, v) in [("w_gt", self.scene.w_gt), ("alpha_gt", self.scene.alpha_gt)] {
            if v.is_some_and(|v| !(0.0..=1.0).contains(&v)) {
                return Err(Error::Config(format!("{name} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Collapse a multi-line parser message onto one line.
pub(crate) fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "[scene]\nmesh = \"m.obj\"\ncameras = \"c.json\"\n";

    fn parse(text: &str, preset: Option<Preset>) -> Result<Config> {
        Config::parse(text, preset, Path::new("test.toml"))
    }

    #[test]
    fn minimal_file_takes_preset_defaults() {
        let c = parse(MINIMAL, None).unwrap();
        assert_eq!(c.preset, Preset::Desk);
        assert_eq!(c.fit, FitConfig::default());
        assert_eq!(c.train, TrainConfig::default());
        assert_eq!(c.olat.dims(), (16, 8));
        let p = parse(MINIMAL, Some(Preset::Paper)).unwrap();
        assert_eq!((p.train.pretrain_iters, p.train.joint_iters), (150_000, 100_000));
        assert_eq!(p.train.pretrain_lr, 5e-4);
    }

    #[test]
    fn overrides_merge_deeply() {
        let text = format!("{MINIMAL}[train]\njoint_iters = 7\n[train.hash]\nn_max = 128\n[fit]\nlr_env = 0.5\n");
        let c = parse(&text, None).unwrap();
        assert_eq!(c.train.joint_iters, 7);
        assert_eq!(c.train.pretrain_iters, 20_000);
        assert_eq!(c.train.hash.n_max, 128);
        assert_eq!(c.train.hash.n_min, 16);
        assert_eq!(c.fit.lr_env, 0.5);
        assert_eq!(c.fit.lr_albedo, 0.1);
    }

    #[test]
    fn file_preset_applies_unless_overridden() {
        let text = format!("preset = \"paper\"\n{MINIMAL}");
        assert_eq!(parse(&text, None).unwrap().preset, Preset::Paper);
        assert_eq!(parse(&text, Some(Preset::Desk)).unwrap().preset, Preset::Desk);
        assert!(parse(&format!("preset = \"laptop\"\n{MINIMAL}"), None).is_err());
    }

    #[test]
    fn malformed_configs_are_rejected() {
        for bad in [
            "[scene]\nmesh = \"m.obj\"\n".to_string(),
            format!("{MINIMAL}[train]\npretrain_itres = 3\n"),
            format!("{MINIMAL}[bogus]\nx = 1\n"),
            format!("{MINIMAL}[fit]\nlr_env = -1.0\n"),
            format!("{MINIMAL}[scene.extra]\n"),
            format!("{MINIMAL}w_gt = 2.0\n"),
            "mesh = ".to_string(),
        ] {
            let e = parse(&bad, None).unwrap_err();
            assert!(!e.to_string().contains('\n'), "{e}");
        }
    }

    #[test]
    fn paths_resolve_against_file_directory() {
        let mut c = parse(&format!("{MINIMAL}env_gt = \"e.pfm\"\n"), None).unwrap();
        c.resolve_paths(Path::new("/data/scene"));
        assert_eq!(c.scene.mesh, Path::new("/data/scene/m.obj"));
        assert_eq!(c.scene.env_gt.as_deref(), Some(Path::new("/data/scene/e.pfm")));
        assert_eq!(c.scene.env_holdout, None);
    }
}
