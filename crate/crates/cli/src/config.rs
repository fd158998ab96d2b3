use anyhow::{Context, Result};
use ftfoot::costmap::{Accumulation, DEFAULT_MAX_RANGE, DEFAULT_RESOLUTION};
use ftfoot::planner::{PlannerParams, RolloutParams};
use ftfoot::synth::{CameraRig, SceneSampler};
use ftfoot::trainer::TrainConfig;
use ftfoot::ModelConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const SEED_ENV: &str = "FTFOOT_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostmapDefaults {
    pub resolution: f64,
    pub max_range: f64,
    pub accumulation: Accumulation,
    /// Cells per side of the initial map around the first camera.
    pub initial_cells: usize,
}

impl Default for CostmapDefaults {
    fn default() -> Self {
        Self {
            resolution: DEFAULT_RESOLUTION,
            max_range: DEFAULT_MAX_RANGE,
            accumulation: Accumulation::Mean,
            initial_cells: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub sampler: SceneSampler,
    pub camera: CameraRig,
    pub seed: u64,
    /// Share of `--count` scenes written to the `val` split.
    pub val_fraction: f64,
    /// Frames of one scene driven along its lane, written to `sequence`.
    pub sequence_frames: usize,
    /// Lane distance between sequence frames, m.
    pub sequence_spacing: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            sampler: SceneSampler::default(),
            camera: CameraRig::default(),
            seed: 0,
            val_fraction: 0.2,
            sequence_frames: 20,
            sequence_spacing: 1.0,
        }
    }
}

/// Everything one pipeline run needs, as one strict JSON document.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Overrides every module seed when set.
    pub seed: Option<u64>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub planner: PlannerParams,
    pub rollout: RolloutParams,
    pub costmap: CostmapDefaults,
    pub synth: SynthConfig,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Reads `path` (defaults when `None`) and applies the seed override
    /// from the environment.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                Self::parse(&text).with_context(|| format!("parsing config {}", p.display()))?
            }
            None => Self::default(),
        };
        if let Ok(v) = std::env::var(SEED_ENV) {
            let seed = v.trim().parse().with_context(|| format!("{SEED_ENV}={v} is not an unsigned integer"))?;
            cfg.seed = Some(seed);
        }
        if let Some(s) = cfg.seed {
            cfg.train.seed = s;
            cfg.planner.seed = s;
            cfg.rollout.seed = s;
            cfg.synth.seed = s;
        }
        Ok(cfg)
    }
}
