//! JSON experiment configuration shared by the CLI subcommands.
//!
//! Every field has a default, so `{}` is a valid config. Unknown keys are
//! rejected at every level. [`ExperimentConfig::resolved`] fills the output
//! directory and is what gets echoed next to the results, so a run can be
//! repeated from its echo alone.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bench::{BenchMethod, BenchSettings, OverheadSettings};
use crate::diffusion::{GmmSpec, NoiseSchedule};
use crate::error::{Result, SparkeError};
use crate::guidance::{GuidanceConfig, GuidanceMode};
use crate::kernel::{ConditionVector, KernelSpec};
use crate::metrics::DEFAULT_RADIUS_MULT;
use crate::sampler::{cycle_prompts, RunConfig};

/// Environment variable that overrides the configured output directory.
pub const OUT_DIR_ENV: &str = "SPARKE_OUT_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub train_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Reverse (DDIM) steps actually taken.
    pub steps: usize,
    /// DDIM stochasticity; 0 is deterministic.
    pub ddim_eta: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { train_steps: 1000, beta_start: 1e-4, beta_end: 0.02, steps: 50, ddim_eta: 0.0 }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.train_steps, self.beta_start, self.beta_end, self.steps, self.ddim_eta)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GmmConfig {
    /// `size x size` grid centred at the origin, one condition per row.
    Grid { size: usize, spacing: f64, std: f64 },
    /// Two three-mode prompt clusters overlapping in the middle.
    OverlappingPair { std: f64 },
    Custom { components: Vec<crate::diffusion::GmmComponent>, conditions: Vec<crate::diffusion::GmmCondition> },
}

impl Default for GmmConfig {
    fn default() -> Self {
        GmmConfig::Grid { size: 5, spacing: 2.0, std: 0.05 }
    }
}

impl GmmConfig {
    pub fn build(&self) -> Result<GmmSpec> {
        let gmm = match self {
            GmmConfig::Grid { size, spacing, std } => GmmSpec::grid(*size, *spacing, *std)?,
            GmmConfig::OverlappingPair { std } => GmmSpec::overlapping_pair(*std),
            GmmConfig::Custom { components, conditions } => {
                GmmSpec { components: components.clone(), conditions: conditions.clone() }
            }
        };
        gmm.validate()?;
        Ok(gmm)
    }
}

/// Reference modes whose samples pre-load the history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoveltyConfig {
    /// Component indices of the reference modes.
    pub modes: Vec<usize>,
    pub per_mode: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    pub radius_mult: f64,
    /// Kernels used for scoring. Fixed separately from the guidance kernels
    /// so that sweep points are scored on the same scale.
    pub kernel_z: KernelSpec,
    pub kernel_y: KernelSpec,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self { radius_mult: DEFAULT_RADIUS_MULT, kernel_z: KernelSpec::gaussian(0.8), kernel_y: KernelSpec::gaussian(0.3) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    Gaussian,
    Cosine,
}

impl KernelKind {
    /// The latent kernel of this kind; a Gaussian keeps `base`'s bandwidth when it has one.
    pub fn with_bandwidth_of(self, base: &KernelSpec) -> KernelSpec {
        match (self, base) {
            (KernelKind::Cosine, _) => KernelSpec::Cosine,
            (KernelKind::Gaussian, KernelSpec::Gaussian { bandwidth }) => KernelSpec::gaussian(*bandwidth),
            (KernelKind::Gaussian, KernelSpec::Cosine) => GuidanceConfig::default().kernel_z,
        }
    }
}

/// Axes of a sweep. An absent axis stays at the base config's value; a
/// present axis must be nonempty.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eta: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cfg_scale: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kernel: Option<Vec<KernelKind>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode: Option<Vec<GuidanceMode>>,
}

/// One point of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub mode: GuidanceMode,
    pub eta: f64,
    pub cfg_scale: f64,
    pub kernel: KernelSpec,
}

impl SweepPoint {
    /// Directory-safe label, e.g. `sparke_eta0.03_w7.5_gaussian`.
    pub fn label(&self) -> String {
        format!("{}_eta{}_w{}_{}", self.mode.short_name(), self.eta, self.cfg_scale, self.kernel.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub methods: Vec<BenchMethod>,
    /// Size grid per method; methods not listed use their default grid.
    pub sizes: BTreeMap<BenchMethod, Vec<usize>>,
    pub settings: BenchSettings,
    /// Also time the sampler with and without guidance.
    pub pipeline: bool,
    pub overhead: OverheadSettings,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            methods: BenchMethod::ALL.to_vec(),
            sizes: BTreeMap::new(),
            settings: BenchSettings::default(),
            pipeline: true,
            overhead: OverheadSettings::default(),
        }
    }
}

impl BenchConfig {
    pub fn sizes_for(&self, method: BenchMethod) -> Vec<usize> {
        self.sizes.get(&method).cloned().unwrap_or_else(|| method.default_sizes())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    /// Classifier-free guidance scale.
    pub cfg_scale: f64,
    /// Explicit prompt sequence. When absent, every condition of the mixture
    /// is visited in order, `rounds` times.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prompts: Option<Vec<ConditionVector>>,
    pub rounds: usize,
    pub samples_per_prompt: usize,
    pub schedule: ScheduleConfig,
    pub gmm: GmmConfig,
    pub guidance: GuidanceConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub novelty: Option<NoveltyConfig>,
    pub metrics: MetricsConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
    pub bench: BenchConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: None,
            cfg_scale: 7.5,
            prompts: None,
            rounds: 100,
            samples_per_prompt: 1,
            schedule: ScheduleConfig::default(),
            gmm: GmmConfig::default(),
            guidance: GuidanceConfig::default(),
            novelty: None,
            metrics: MetricsConfig::default(),
            sweep: None,
            bench: BenchConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| SparkeError::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.prompts.is_none() && self.rounds == 0 {
            return Err(SparkeError::InvalidConfig("rounds must be >= 1".into()));
        }
        if !(self.metrics.radius_mult > 0.0 && self.metrics.radius_mult.is_finite()) {
            return Err(SparkeError::InvalidConfig("radius_mult must be positive".into()));
        }
        self.metrics.kernel_z.validate()?;
        self.metrics.kernel_y.validate()?;
        if let Some(n) = &self.novelty {
            let gmm = self.gmm.build()?;
            if n.per_mode == 0 || n.modes.is_empty() {
                return Err(SparkeError::InvalidConfig("novelty needs modes and per_mode >= 1".into()));
            }
            if let Some(&m) = n.modes.iter().find(|&&m| m >= gmm.components.len()) {
                return Err(SparkeError::InvalidConfig(format!("novelty mode {m} out of range")));
            }
        }
        if let Some(s) = &self.sweep {
            let lens = [
                s.eta.as_ref().map(Vec::len),
                s.cfg_scale.as_ref().map(Vec::len),
                s.kernel.as_ref().map(Vec::len),
                s.mode.as_ref().map(Vec::len),
            ];
            if lens.iter().all(Option::is_none) {
                return Err(SparkeError::InvalidConfig("sweep declares no axes".into()));
            }
            if lens.contains(&Some(0)) {
                return Err(SparkeError::InvalidConfig("sweep axes must be nonempty".into()));
            }
        }
        self.bench.settings.validate()?;
        self.run_config()?.validate()
    }

    /// The base run, before any sweep axis is applied.
    pub fn run_config(&self) -> Result<RunConfig> {
        let gmm = self.gmm.build()?;
        let prompts = match &self.prompts {
            Some(p) => p.clone(),
            None => cycle_prompts(&gmm, self.rounds),
        };
        Ok(RunConfig {
            schedule: self.schedule.build()?,
            gmm,
            guidance: self.guidance.clone(),
            cfg_scale: self.cfg_scale,
            prompts,
            seed: self.seed,
            samples_per_prompt: self.samples_per_prompt,
        })
    }

    /// Cross product of the sweep axes, in axis order mode, eta, cfg_scale,
    /// kernel. Without a sweep this is the single base point.
    pub fn sweep_points(&self) -> Vec<SweepPoint> {
        let s = self.sweep.clone().unwrap_or_default();
        let g = &self.guidance;
        let modes = s.mode.unwrap_or_else(|| vec![g.mode]);
        let etas = s.eta.unwrap_or_else(|| vec![g.eta]);
        let scales = s.cfg_scale.unwrap_or_else(|| vec![self.cfg_scale]);
        let kernels: Vec<KernelSpec> = match s.kernel {
            Some(kinds) => kinds.iter().map(|k| k.with_bandwidth_of(&g.kernel_z)).collect(),
            None => vec![g.kernel_z],
        };
        let mut points = Vec::new();
        for &mode in &modes {
            for &eta in &etas {
                for &cfg_scale in &scales {
                    for &kernel in &kernels {
                        points.push(SweepPoint { mode, eta, cfg_scale, kernel });
                    }
                }
            }
        }
        points
    }

    /// The config of a single sweep point, with the sweep removed.
    pub fn at_point(&self, p: &SweepPoint) -> Self {
        let mut c = self.clone();
        c.sweep = None;
        c.cfg_scale = p.cfg_scale;
        c.guidance.mode = p.mode;
        c.guidance.eta = p.eta;
        c.guidance.kernel_z = p.kernel;
        c
    }

    /// Copy with the output directory pinned, as echoed next to results.
    pub fn resolved(&self, output_dir: &Path) -> Self {
        Self { output_dir: Some(output_dir.to_path_buf()), ..self.clone() }
    }

    /// Output directory: the environment override, else the config, else `sparke-out`.
    pub fn effective_output_dir(&self) -> PathBuf {
        match std::env::var_os(OUT_DIR_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => self.output_dir.clone().unwrap_or_else(|| PathBuf::from("sparke-out")),
        }
    }
}
