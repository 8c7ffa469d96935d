//! Experiment configuration file.
//!
//! A single TOML document. Relative paths are resolved against the directory
//! that holds the file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use sha2::{Digest, Sha256};

use recodiff_core::restorer::AdamConfig;
use recodiff_core::sampler::{LevelTransition, SamplerOptions};
use recodiff_core::tomo::DEFAULT_DETECTOR_SPACING;
use recodiff_core::training::TrainConfig;
use recodiff_core::{Architecture, Geometry, ViewSchedule};

use crate::CliError;

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    /// Directory for checkpoints, logs and evaluation tables.
    pub output: PathBuf,
    pub geometry: GeometrySection,
    pub schedule: ScheduleSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub sampler: SamplerSection,
    #[serde(default)]
    pub evaluate: EvaluateSection,
    /// SHA-256 of the file text, set by [`ExperimentConfig::load`].
    #[serde(skip)]
    pub text_hash: String,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometrySection {
    pub image_size: usize,
    pub full_views: usize,
    pub n_detectors: Option<usize>,
    pub detector_spacing: Option<f64>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    /// View levels from `v_0` (full scan) down to the sparsest `v_T`.
    pub levels: Vec<usize>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub width: usize,
    pub dilations: Vec<usize>,
    pub embed_dim: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection { width: 16, dilations: vec![1, 2, 4, 8, 2, 1], embed_dim: 16 }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub dataset: Option<PathBuf>,
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub ema_decay: f64,
    /// Defaults to the sparsest schedule level.
    pub composite_targets: Option<Vec<usize>>,
    pub residual_gain: f64,
    /// Weight of the plain restoration loss on the null prediction.
    pub null_weight: f64,
    pub checkpoint_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let adam = AdamConfig::default();
        TrainSection {
            dataset: None,
            iterations: 2000,
            batch_size: 4,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            ema_decay: 0.999,
            composite_targets: None,
            residual_gain: 1.0,
            null_weight: 0.0,
            checkpoint_every: 0,
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSection {
    pub residual_gain: f64,
    /// Warm-up steps before the one-time transition; 0 disables it.
    pub transition_after: usize,
    /// The transition applies only to settings with at most this many views.
    pub transition_max_views: usize,
}

impl Default for SamplerSection {
    fn default() -> Self {
        SamplerSection { residual_gain: 1.0, transition_after: 2, transition_max_views: 18 }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateSection {
    pub dataset: Option<PathBuf>,
    pub views: Vec<usize>,
    pub methods: Vec<String>,
    /// `ema` or `params`.
    pub weights: String,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        EvaluateSection {
            dataset: None,
            views: vec![18, 36, 72],
            methods: vec!["fbp".into(), "naive".into(), "reco".into()],
            weights: "ema".into(),
        }
    }
}

fn config_err(key: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{key}: {msg}"))
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    /// Parses and validates without touching the filesystem.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| CliError::Config(format!("invalid config: {e}")))?;
        cfg.text_hash = Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect();
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        join(&mut self.output);
        if let Some(p) = self.train.dataset.as_mut() {
            join(p);
        }
        if let Some(p) = self.evaluate.dataset.as_mut() {
            join(p);
        }
    }

    fn validate(&self) -> Result<(), CliError> {
        let s = self.schedule()?;
        if s.n_full() != self.geometry.full_views {
            return Err(config_err(
                "schedule.levels",
                format!("must start at geometry.full_views = {}", self.geometry.full_views),
            ));
        }
        self.geometry()?;
        self.architecture()?;
        self.train_config()?;
        if self.sampler.residual_gain <= 0.0 || !self.sampler.residual_gain.is_finite() {
            return Err(config_err("sampler.residual_gain", "must be positive"));
        }
        for &v in &self.evaluate.views {
            if s.step_of(v).is_none() {
                return Err(config_err(
                    "evaluate.views",
                    format!("{v} is not a level of schedule.levels {:?}", s.levels()),
                ));
            }
        }
        for m in &self.evaluate.methods {
            m.parse::<Method>().map_err(|e| config_err("evaluate.methods", e))?;
        }
        if !matches!(self.evaluate.weights.as_str(), "ema" | "params") {
            return Err(config_err("evaluate.weights", "expected \"ema\" or \"params\""));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<ViewSchedule, CliError> {
        ViewSchedule::from_levels(self.schedule.levels.clone()).map_err(|e| config_err("schedule.levels", e))
    }

    pub fn geometry(&self) -> Result<Geometry, CliError> {
        let g = &self.geometry;
        let built = match (g.n_detectors, g.detector_spacing) {
            (None, None) => Geometry::parallel(g.image_size, g.full_views),
            (nd, spacing) => {
                let spacing = spacing.unwrap_or(DEFAULT_DETECTOR_SPACING);
                let nd = nd.unwrap_or_else(|| {
                    ((g.image_size as f64) * std::f64::consts::SQRT_2 / spacing).ceil() as usize + 1
                });
                Geometry::with_detectors(g.image_size, g.full_views, nd, spacing)
            }
        };
        built.map_err(|e| config_err("geometry", e))
    }

    pub fn architecture(&self) -> Result<Architecture, CliError> {
        let m = &self.model;
        let arch = Architecture {
            image_size: self.geometry.image_size,
            width: m.width,
            dilations: m.dilations.clone(),
            embed_dim: m.embed_dim,
            max_step: self.schedule.levels.len().saturating_sub(1),
        };
        arch.validate().map_err(|e| config_err("model", e))?;
        Ok(arch)
    }

    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        let t = &self.train;
        let schedule = self.schedule()?;
        let cfg = TrainConfig {
            iterations: t.iterations,
            batch_size: t.batch_size,
            adam: AdamConfig { lr: t.lr, beta1: t.beta1, beta2: t.beta2, eps: t.eps },
            ema_decay: t.ema_decay,
            composite_targets: t.composite_targets.clone().unwrap_or_else(|| vec![schedule.target()]),
            residual_gain: t.residual_gain,
            null_weight: t.null_weight,
            seed: self.seed,
            checkpoint_every: t.checkpoint_every,
            schedule,
        };
        cfg.validate().map_err(|e| config_err("train", e))?;
        Ok(cfg)
    }

    /// Sampler options for a run whose sparsest level is `views` and whose
    /// schedule has `steps` steps.
    pub fn sampler_options(&self, views: usize, steps: usize) -> SamplerOptions {
        let s = &self.sampler;
        let k = s.transition_after;
        let level_transition = if k > 0 && k <= steps && views <= s.transition_max_views {
            LevelTransition::AfterSteps(k)
        } else {
            LevelTransition::Off
        };
        SamplerOptions { residual_gain: s.residual_gain, level_transition, ..SamplerOptions::default() }
    }

    /// Training dataset directory, which must exist.
    pub fn train_dataset(&self) -> Result<&Path, CliError> {
        existing_dir("train.dataset", self.train.dataset.as_deref())
    }

    pub fn evaluate_dataset(&self) -> Result<&Path, CliError> {
        existing_dir("evaluate.dataset", self.evaluate.dataset.as_deref())
    }
}

fn existing_dir<'a>(key: &str, path: Option<&'a Path>) -> Result<&'a Path, CliError> {
    let p = path.ok_or_else(|| config_err(key, "not set"))?;
    if !p.is_dir() {
        return Err(config_err(key, format!("{} does not exist", p.display())));
    }
    Ok(p)
}

/// Reconstruction method.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Fbp,
    Naive,
    Reco,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Fbp => "fbp",
            Method::Naive => "naive",
            Method::Reco => "reco",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fbp" => Ok(Method::Fbp),
            "naive" => Ok(Method::Naive),
            "reco" => Ok(Method::Reco),
            other => Err(format!("unknown method {other:?} (expected fbp, naive or reco)")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
output = "out"
[geometry]
image_size = 32
full_views = 72
[schedule]
levels = [72, 36, 18]
[model]
width = 4
dilations = [1, 2, 1]
embed_dim = 4
"#;

    #[test]
    fn minimal_config_uses_defaults() {
        let cfg = ExperimentConfig::parse(MINIMAL).unwrap();
        assert_eq!(cfg.architecture().unwrap().max_step, 2);
        assert_eq!(cfg.train_config().unwrap().composite_targets, vec![18]);
        assert_eq!(cfg.sampler_options(18, 2).level_transition, LevelTransition::AfterSteps(2));
        assert_eq!(cfg.sampler_options(36, 1).level_transition, LevelTransition::Off);
        assert_eq!(cfg.text_hash.len(), 64);
    }

    #[test]
    fn rejects_inconsistent_settings() {
        let bad_start = MINIMAL.replace("[72, 36, 18]", "[90, 36, 18]");
        assert!(ExperimentConfig::parse(&bad_start).unwrap_err().to_string().contains("schedule.levels"));
        let unknown = format!("{MINIMAL}\n[evaluate]\nmethods = [\"sirt\"]\n");
        assert!(ExperimentConfig::parse(&unknown).unwrap_err().to_string().contains("evaluate.methods"));
        let stray = format!("colour = 1\n{MINIMAL}");
        assert!(ExperimentConfig::parse(&stray).is_err());
    }

    #[test]
    fn shipped_example_config_is_valid() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/example.toml");
        let cfg = ExperimentConfig::load(&path).unwrap();
        assert_eq!(cfg.schedule().unwrap().levels(), &[180, 90, 45, 18]);
        assert!(cfg.train_config().is_ok());
        assert!(cfg.train.dataset.as_deref().unwrap().ends_with("data/train"));
    }

    #[test]
    fn missing_dataset_names_the_key() {
        let text = format!("{MINIMAL}\n[train]\ndataset = \"/nonexistent/recodiff\"\n");
        let cfg = ExperimentConfig::parse(&text).unwrap();
        let err = cfg.train_dataset().unwrap_err();
        assert!(err.to_string().contains("train.dataset"));
        assert_eq!(err.exit_code(), 2);
    }
}
