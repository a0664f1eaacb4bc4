//! JSON run configuration.
//!
//! Every section is optional except `out_dir`; stage sections are partial
//! overrides on top of either the desk defaults or a named preset.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diffusion::{DataConfig, NetConfig, NoiseSchedule, Weighting};
use crate::error::{MoleError, Result};
use crate::pipeline::{DatasetSelector, OptimizerKind, Stage, StageConfig};

pub const OUT_ENV: &str = "MOLE_OUT";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            beta_start: 1e-4,
            beta_end: 0.1,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)
            .map_err(|e| MoleError::Config(format!("schedule: {e}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    /// Traced generations per group.
    pub runs: usize,
    pub seed: u64,
    /// Step at which the held-out reference is noised to start each chain.
    /// Unset: the last step whose SNR is still at least 1.
    pub t_start: Option<usize>,
    pub heatmaps: bool,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            runs: 20,
            seed: 1000,
            t_start: None,
            heatmaps: true,
        }
    }
}

impl AnalysisConfig {
    pub fn start_step(&self, sched: &NoiseSchedule) -> usize {
        self.t_start.unwrap_or_else(|| {
            (0..sched.num_steps())
                .take_while(|&t| sched.snr(t) >= 1.0)
                .last()
                .unwrap_or(0)
        })
    }
}

/// Partial stage settings as written in JSON.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StagePatch {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<OptimizerKind>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weight_decay: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weighting: Option<Weighting>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<DatasetSelector>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rank: Option<usize>,
}

impl StagePatch {
    fn resolve(&self, stage: Stage, path: &str) -> Result<StageConfig> {
        let mut cfg = match &self.preset {
            None => StageConfig::desk(stage),
            Some(name) => {
                let p = StageConfig::paper(name).ok_or_else(|| {
                    MoleError::Config(format!("{path}.preset: unknown preset {name:?}"))
                })?;
                if p.stage != stage {
                    return Err(MoleError::Config(format!(
                        "{path}.preset: {name} is a {} preset",
                        p.stage
                    )));
                }
                p
            }
        };
        if let Some(v) = self.steps {
            cfg.steps = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.learning_rate {
            cfg.learning_rate = v;
        }
        if let Some(v) = self.optimizer {
            cfg.optimizer = v;
        }
        if let Some(v) = self.weight_decay {
            cfg.weight_decay = Some(v);
        }
        if let Some(v) = self.weighting {
            cfg.weighting = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.dataset {
            cfg.dataset = v;
        }
        if let Some(v) = self.rank {
            cfg.rank = v;
        }
        Ok(cfg)
    }

    fn from_resolved(cfg: &StageConfig) -> Self {
        Self {
            preset: cfg.preset.clone(),
            steps: Some(cfg.steps),
            batch_size: Some(cfg.batch_size),
            learning_rate: Some(cfg.learning_rate),
            optimizer: Some(cfg.optimizer),
            weight_decay: cfg.weight_decay,
            weighting: Some(cfg.weighting),
            seed: Some(cfg.seed),
            dataset: Some(cfg.dataset),
            rank: Some(cfg.rank),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RawStages {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub init_seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wrap_layers: Option<Vec<usize>>,
    pub stage1: StagePatch,
    pub stage2_face: StagePatch,
    pub stage2_hand: StagePatch,
    pub stage3: StagePatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawRunConfig {
    #[serde(default)]
    pub model: NetConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub stage: RawStages,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

/// Resolved stage settings for the whole pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct StagesConfig {
    /// Seed of the untrained base network.
    pub init_seed: u64,
    /// Hidden layers that receive experts and gates.
    pub wrap_layers: Vec<usize>,
    pub stage1: StageConfig,
    pub stage2_face: StageConfig,
    pub stage2_hand: StageConfig,
    pub stage3: StageConfig,
}

impl StagesConfig {
    pub fn get(&self, stage: Stage) -> &StageConfig {
        match stage {
            Stage::Stage1 => &self.stage1,
            Stage::Stage2Face => &self.stage2_face,
            Stage::Stage2Hand => &self.stage2_hand,
            Stage::Stage3 => &self.stage3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: NetConfig,
    pub schedule: ScheduleConfig,
    pub data: DataConfig,
    pub stage: StagesConfig,
    pub analysis: AnalysisConfig,
    pub out_dir: PathBuf,
}

impl RunConfig {
    /// Defaults everywhere, writing under `out_dir`.
    pub fn with_out_dir(out_dir: impl Into<PathBuf>) -> Self {
        let raw = RawRunConfig {
            model: NetConfig::default(),
            schedule: ScheduleConfig::default(),
            data: DataConfig::default(),
            stage: RawStages::default(),
            analysis: AnalysisConfig::default(),
            out_dir: Some(out_dir.into()),
        };
        Self::resolve(raw, None).expect("defaults are valid")
    }

    /// Parses and validates; `env_out` (the `MOLE_OUT` value) wins over the
    /// file's `out_dir`.
    pub fn from_json(text: &str, env_out: Option<&str>) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let raw: RawRunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            if path == "." {
                MoleError::Config(inner.to_string())
            } else {
                MoleError::Config(format!("{path}: {inner}"))
            }
        })?;
        Self::resolve(raw, env_out)
    }

    pub fn resolve(raw: RawRunConfig, env_out: Option<&str>) -> Result<Self> {
        let out_dir = match env_out.filter(|v| !v.is_empty()) {
            Some(v) => PathBuf::from(v),
            None => raw.out_dir.clone().ok_or_else(|| {
                MoleError::Config(format!("out_dir: missing (set it or {OUT_ENV})"))
            })?,
        };
        raw.model.validate()?;
        let sched = raw.schedule.build()?;
        raw.data.validate()?;
        if raw.analysis.runs == 0 {
            return Err(MoleError::Config("analysis.runs must be positive".into()));
        }
        if let Some(t) = raw.analysis.t_start {
            if t >= sched.num_steps() {
                return Err(MoleError::Config(format!(
                    "analysis.t_start: {t} is beyond the last step {}",
                    sched.num_steps() - 1
                )));
            }
        }
        let layers = raw.model.hidden_layers;
        let wrap_layers = raw
            .stage
            .wrap_layers
            .clone()
            .unwrap_or_else(|| (0..layers).collect());
        if wrap_layers.is_empty() {
            return Err(MoleError::Config(
                "stage.wrap_layers: must not be empty".into(),
            ));
        }
        for (k, &i) in wrap_layers.iter().enumerate() {
            if i >= layers || wrap_layers[..k].contains(&i) {
                return Err(MoleError::Config(format!(
                    "stage.wrap_layers: {i} is out of range or repeated ({layers} hidden layers)"
                )));
            }
        }
        let resolve = |patch: &StagePatch, stage: Stage, key: &str| -> Result<StageConfig> {
            let path = format!("stage.{key}");
            let cfg = patch.resolve(stage, &path)?;
            cfg.validate(&path)?;
            Ok(cfg)
        };
        let stage = StagesConfig {
            init_seed: raw.stage.init_seed.unwrap_or(0),
            wrap_layers,
            stage1: resolve(&raw.stage.stage1, Stage::Stage1, "stage1")?,
            stage2_face: resolve(&raw.stage.stage2_face, Stage::Stage2Face, "stage2_face")?,
            stage2_hand: resolve(&raw.stage.stage2_hand, Stage::Stage2Hand, "stage2_hand")?,
            stage3: resolve(&raw.stage.stage3, Stage::Stage3, "stage3")?,
        };
        Ok(Self {
            model: raw.model,
            schedule: raw.schedule,
            data: raw.data,
            stage,
            analysis: raw.analysis,
            out_dir,
        })
    }

    /// Fully spelled-out form; loads back to the same config.
    pub fn to_raw(&self) -> RawRunConfig {
        RawRunConfig {
            model: self.model,
            schedule: self.schedule,
            data: self.data,
            stage: RawStages {
                init_seed: Some(self.stage.init_seed),
                wrap_layers: Some(self.stage.wrap_layers.clone()),
                stage1: StagePatch::from_resolved(&self.stage.stage1),
                stage2_face: StagePatch::from_resolved(&self.stage.stage2_face),
                stage2_hand: StagePatch::from_resolved(&self.stage.stage2_hand),
                stage3: StagePatch::from_resolved(&self.stage.stage3),
            },
            analysis: self.analysis,
            out_dir: Some(self.out_dir.clone()),
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.to_raw()).expect("serializable config");
        s.push('\n');
        s
    }

    pub fn schedule(&self) -> NoiseSchedule {
        self.schedule.build().expect("validated on load")
    }
}

/// Reads a config file, honouring `MOLE_OUT`.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| MoleError::io(path, e))?;
    let env = std::env::var(OUT_ENV).ok();
    RunConfig::from_json(&text, env.as_deref()).map_err(|e| match e {
        MoleError::Config(m) => MoleError::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}
