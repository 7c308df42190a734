//! Experiment configuration: a TOML file with fixed sections, every key
//! optional, unknown keys rejected. Command-line flags override the file.

use std::path::{Path, PathBuf};

use mvdistill_core::diffusion::{LatentMap, NoiseSchedule};
use mvdistill_core::distillation::{RefineConfig, RestoreConfig, StepSchedule};
use mvdistill_core::scene::{RenderOptions, ShapeSpec, SynthOptions};
use mvdistill_core::views::RingSpec;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSection {
    pub shape: String,
    pub grid_size: usize,
    pub bounds: f64,
    pub radius: f64,
    pub texture_amplitude: f64,
    /// Colour blur passes applied to the initial scene.
    pub init_smoothing: usize,
}

impl Default for SceneSection {
    fn default() -> Self {
        Self {
            shape: "textured-sphere".into(),
            grid_size: 16,
            bounds: 1.0,
            radius: 0.6,
            texture_amplitude: 1.0,
            init_smoothing: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraSection {
    pub views: usize,
    pub radius: f64,
    pub pitch_range: f64,
    pub focal: f64,
    pub resolution: usize,
}

impl Default for CameraSection {
    fn default() -> Self {
        let r = RingSpec::default();
        Self {
            views: r.views,
            radius: r.radius,
            pitch_range: r.pitch_range_deg,
            focal: r.focal,
            resolution: r.resolution,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderSection {
    pub samples: usize,
}

impl Default for RenderSection {
    fn default() -> Self {
        Self { samples: 32 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleSection {
    pub tau: f64,
    /// "identity" or "avgpool2".
    pub latent: String,
}

impl Default for OracleSection {
    fn default() -> Self {
        Self {
            tau: 0.1,
            latent: "identity".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefineSection {
    pub sigma: f64,
    pub steps: usize,
    pub step_size: f64,
    /// When set, the step size decays along a half cosine to this value.
    pub step_size_final: Option<f64>,
    pub reference_weight: f64,
    pub view_weight: f64,
    pub t_min: f64,
    pub t_max_start: f64,
    pub t_max_end: f64,
    pub w_ex: f64,
    pub optimize_decoder: bool,
    /// Write a scene checkpoint every this many iterations (0: never).
    pub checkpoint_every: usize,
    /// "initial" or "restored".
    pub start: String,
    /// Optional trained conditioning blocks.
    pub prior: Option<PathBuf>,
}

impl Default for RefineSection {
    fn default() -> Self {
        let d = RefineConfig::default();
        Self {
            sigma: d.sigma,
            steps: d.steps,
            step_size: 1000.0,
            step_size_final: None,
            reference_weight: d.reference_weight,
            view_weight: d.view_weight,
            t_min: d.t_min,
            t_max_start: d.t_max_start,
            t_max_end: d.t_max_end,
            w_ex: d.w_ex,
            optimize_decoder: false,
            checkpoint_every: 0,
            start: "initial".into(),
            prior: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSection {
    pub disable_anchor_init: bool,
    pub disable_retention: bool,
    pub freeze_noise: bool,
    /// Also run the baseline, no-retention and frozen-noise variants.
    pub compare: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RestoreSection {
    pub pretrain_steps: usize,
    pub finetune_steps: usize,
    pub step_size: f64,
    pub finetune_step_size: f64,
    pub views_per_step: usize,
    pub tau: f64,
    pub hidden: usize,
    /// Shapes of the pretraining set.
    pub shapes: Vec<String>,
    /// Density blur passes producing the coarse inputs.
    pub density_smoothing: usize,
    pub resolution: usize,
    pub eval_views: usize,
}

impl Default for RestoreSection {
    fn default() -> Self {
        let d = RestoreConfig::default();
        Self {
            pretrain_steps: d.pretrain_steps,
            finetune_steps: d.finetune_steps,
            step_size: d.step_size,
            finetune_step_size: d.finetune_step_size,
            views_per_step: d.views_per_step,
            tau: d.tau,
            hidden: 8,
            shapes: vec!["sphere".into(), "two-blob".into(), "checker-cube".into()],
            density_smoothing: 2,
            resolution: d.ring.resolution,
            eval_views: d.ring.views,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeedSection {
    pub master: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
    /// Directory written by `synth`; defaults to `dir`.
    pub fixture: Option<PathBuf>,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs/default"),
            fixture: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub scene: SceneSection,
    pub camera: CameraSection,
    pub render: RenderSection,
    pub oracle: OracleSection,
    pub refine: RefineSection,
    pub ablation: AblationSection,
    pub restore: RestoreSection,
    pub seeds: SeedSection,
    pub output: OutputSection,
}

/// Flag values that take precedence over the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub output: Option<PathBuf>,
    pub fixture: Option<PathBuf>,
    pub seed: Option<u64>,
    pub steps: Option<usize>,
    pub views: Option<usize>,
    pub sigma: Option<f64>,
    pub w_ex: Option<f64>,
    pub tau: Option<f64>,
    pub step_size: Option<f64>,
    pub no_anchor_init: bool,
    pub no_retention: bool,
    pub freeze_noise: bool,
    pub compare: bool,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Reads `path` (or the defaults when `None`), applies `overrides` and
    /// validates the result.
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self, CliError> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                Self::from_toml(&text)?
            }
            None => Self::default(),
        };
        cfg.apply(overrides);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = &o.output {
            self.output.dir = v.clone();
        }
        if let Some(v) = &o.fixture {
            self.output.fixture = Some(v.clone());
        }
        if let Some(v) = o.seed {
            self.seeds.master = v;
        }
        if let Some(v) = o.steps {
            self.refine.steps = v;
        }
        if let Some(v) = o.views {
            self.camera.views = v;
        }
        if let Some(v) = o.sigma {
            self.refine.sigma = v;
        }
        if let Some(v) = o.w_ex {
            self.refine.w_ex = v;
        }
        if let Some(v) = o.tau {
            self.oracle.tau = v;
        }
        if let Some(v) = o.step_size {
            self.refine.step_size = v;
        }
        self.ablation.disable_anchor_init |= o.no_anchor_init;
        self.ablation.disable_retention |= o.no_retention;
        self.ablation.freeze_noise |= o.freeze_noise;
        self.ablation.compare |= o.compare;
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.shape()?;
        self.latent()?;
        for s in &self.restore.shapes {
            s.parse::<ShapeSpec>()?;
        }
        if !matches!(self.refine.start.as_str(), "initial" | "restored") {
            return Err(CliError::Config(format!(
                "refine.start must be \"initial\" or \"restored\", got {:?}",
                self.refine.start
            )));
        }
        if self.oracle.tau < 0.0 || self.restore.tau < 0.0 {
            return Err(CliError::Config("tau must be >= 0".into()));
        }
        if self.scene.grid_size < 2 {
            return Err(CliError::Config("scene.grid_size must be >= 2".into()));
        }
        for path in [&self.output.fixture, &self.refine.prior].into_iter().flatten() {
            if !path.exists() {
                return Err(CliError::Config(format!("referenced path {} does not exist", path.display())));
            }
        }
        self.refine_config()?.validate()?;
        Ok(())
    }

    pub fn shape(&self) -> Result<ShapeSpec, CliError> {
        Ok(self.scene.shape.parse()?)
    }

    pub fn latent(&self) -> Result<LatentMap, CliError> {
        match self.oracle.latent.as_str() {
            "identity" => Ok(LatentMap::Identity),
            "avgpool2" => Ok(LatentMap::AvgPool2),
            other => Err(CliError::Config(format!("unknown latent map {other:?}"))),
        }
    }

    pub fn fixture_dir(&self) -> PathBuf {
        self.output.fixture.clone().unwrap_or_else(|| self.output.dir.clone())
    }

    pub fn synth_options(&self) -> SynthOptions {
        SynthOptions {
            grid_size: self.scene.grid_size,
            bounds: self.scene.bounds,
            radius: self.scene.radius,
            texture_amplitude: self.scene.texture_amplitude,
        }
    }

    pub fn ring(&self) -> RingSpec {
        RingSpec {
            views: self.camera.views,
            radius: self.camera.radius,
            pitch_range_deg: self.camera.pitch_range,
            focal: self.camera.focal,
            resolution: self.camera.resolution,
        }
    }

    pub fn render_options(&self) -> RenderOptions {
        RenderOptions {
            samples: self.render.samples,
            normals: false,
        }
    }

    pub fn refine_config(&self) -> Result<RefineConfig, CliError> {
        let r = &self.refine;
        Ok(RefineConfig {
            views: self.camera.views,
            pitch_range_deg: self.camera.pitch_range,
            radius: self.camera.radius,
            focal: self.camera.focal,
            resolution: self.camera.resolution,
            render: self.render_options(),
            latent: self.latent()?,
            schedule: NoiseSchedule::default(),
            sigma: r.sigma,
            steps: r.steps,
            step_size: match r.step_size_final {
                Some(end) => StepSchedule::Cosine {
                    start: r.step_size,
                    end,
                },
                None => StepSchedule::Constant { value: r.step_size },
            },
            seed: self.seeds.master,
            w_ex: r.w_ex,
            reference_weight: r.reference_weight,
            view_weight: r.view_weight,
            t_min: r.t_min,
            t_max_start: r.t_max_start,
            t_max_end: r.t_max_end,
            anchor_init: !self.ablation.disable_anchor_init,
            retention: !self.ablation.disable_retention,
            freeze_noise: self.ablation.freeze_noise,
            optimize_decoder: r.optimize_decoder,
        })
    }

    pub fn restore_config(&self) -> RestoreConfig {
        let r = &self.restore;
        let scale = r.resolution as f64 / self.camera.resolution as f64;
        RestoreConfig {
            pretrain_steps: r.pretrain_steps,
            finetune_steps: r.finetune_steps,
            step_size: r.step_size,
            finetune_step_size: r.finetune_step_size,
            views_per_step: r.views_per_step,
            tau: r.tau,
            seed: self.seeds.master,
            ring: RingSpec {
                views: r.eval_views,
                resolution: r.resolution,
                focal: self.camera.focal * scale,
                ..self.ring()
            },
            render: self.render_options(),
            latent: self.latent().unwrap_or_default(),
            ..RestoreConfig::default()
        }
    }
}
