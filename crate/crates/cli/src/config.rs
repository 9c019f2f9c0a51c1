use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use diffscen::diffusion::{ScheduleSpec, TrainConfig};
use diffscen::planner::PlanConfig;
use diffscen::simkit::{PolicyVector, SimNoiseSpec, POLICY_DIM};

use crate::ConfigError;

/// Everything a pipeline run reads, in one TOML file. Every field has a
/// default, so an empty file is a valid configuration.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub paths: Paths,
    pub simulate: SimulateConfig,
    pub diffusion: DiffusionConfig,
    pub sample: SampleConfig,
    pub plan: PlanConfig,
    pub check: CheckConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub out: PathBuf,
    /// Defaults below are relative to `out`.
    pub dataset: Option<PathBuf>,
    pub model: Option<PathBuf>,
    /// Network case JSON; the bundled 5-bus case when absent.
    pub case: Option<PathBuf>,
    /// Baseline-day CSV; a synthetic year when absent.
    pub baseline: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            out: PathBuf::from("out"),
            dataset: None,
            model: None,
            case: None,
            baseline: None,
        }
    }
}

impl Paths {
    pub fn dataset(&self) -> PathBuf {
        self.dataset.clone().unwrap_or_else(|| self.out.join("dataset.csv"))
    }

    pub fn model(&self) -> PathBuf {
        self.model.clone().unwrap_or_else(|| self.out.join("model.json"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub samples: usize,
    /// Seed of the synthetic baseline year (ignored with a baseline file).
    pub baseline_seed: u64,
    pub noise: SimNoiseSpec,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            samples: 10_000,
            baseline_seed: 0,
            noise: SimNoiseSpec::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    pub schedule: ScheduleSpec,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    pub policy: [f64; POLICY_DIM],
    /// Index into the baseline pool.
    pub day: usize,
    pub draws: usize,
    /// Also write the policy Jacobian of the first draw.
    pub jacobian: bool,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            policy: [0.5, 0.5, 0.1, 0.1],
            day: 0,
            draws: 1,
            jacobian: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CheckConfig {
    /// Largest accepted relative error of any check.
    pub tolerance: f64,
    /// Random (policy, day, noise) triples for the sampler check.
    pub sampler_triples: usize,
    pub sampler_step: f64,
    pub kkt_perturbations: usize,
    pub kkt_step: f64,
    pub policy_step: f64,
}

impl Default for CheckConfig {
    fn default() -> Self {
        Self {
            tolerance: 1e-3,
            sampler_triples: 5,
            sampler_step: 1e-4,
            kkt_perturbations: 30,
            kkt_step: 1e-3,
            policy_step: 1e-5,
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub samples: Option<usize>,
    pub epochs: Option<usize>,
    pub iterations: Option<usize>,
    pub learning_rate: Option<f64>,
    pub pins: Vec<String>,
    pub policy: Option<String>,
    pub day: Option<usize>,
    pub draws: Option<usize>,
    pub tolerance: Option<f64>,
}

impl PipelineConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text)
            .map_err(|e| ConfigError(format!("{}: {e}", path.display())).into())
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = &o.out {
            self.paths.out = v.clone();
        }
        if let Some(v) = o.samples {
            self.simulate.samples = v;
        }
        if let Some(v) = o.epochs {
            self.diffusion.train.epochs = v;
        }
        if let Some(v) = o.iterations {
            self.plan.max_iterations = v;
        }
        if let Some(v) = o.learning_rate {
            self.plan.learning_rate = v;
        }
        for pin in &o.pins {
            let (name, value) = pin
                .split_once('=')
                .ok_or_else(|| ConfigError(format!("pin `{pin}` is not NAME=VALUE")))?;
            let value = match value.trim() {
                "free" => None,
                v => Some(v.parse::<f64>().map_err(|_| {
                    ConfigError(format!("pin `{pin}`: `{v}` is neither a number nor `free`"))
                })?),
            };
            self.plan
                .pins
                .set(name.trim(), value)
                .map_err(|e| ConfigError(e.to_string()))?;
        }
        if let Some(v) = &o.policy {
            self.sample.policy = parse_policy(v)?;
        }
        if let Some(v) = o.day {
            self.sample.day = v;
        }
        if let Some(v) = o.draws {
            self.sample.draws = v;
        }
        if let Some(v) = o.tolerance {
            self.check.tolerance = v;
        }
        // One seed drives every stage.
        self.plan.seed = self.seed;
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| -> Result<()> { Err(ConfigError(m).into()) };
        if self.simulate.samples == 0 {
            return bad("simulate.samples must be at least 1".into());
        }
        if self.sample.draws == 0 {
            return bad("sample.draws must be at least 1".into());
        }
        PolicyVector::from_array(self.sample.policy)
            .map_err(|e| ConfigError(format!("sample.policy: {e}")))?;
        self.simulate
            .noise
            .validate()
            .map_err(|e| ConfigError(format!("simulate.noise: {e}")))?;
        self.diffusion
            .train
            .validate()
            .map_err(|e| ConfigError(e.to_string()))?;
        self.diffusion
            .schedule
            .build()
            .map_err(|e| ConfigError(e.to_string()))?;
        self.plan.validate().map_err(|e| ConfigError(e.to_string()))?;
        let c = &self.check;
        if !(c.tolerance >= 0.0 && c.sampler_step > 0.0 && c.kkt_step > 0.0 && c.policy_step > 0.0)
        {
            return bad("check tolerances and steps must be positive".into());
        }
        Ok(())
    }
}

fn parse_policy(s: &str) -> Result<[f64; POLICY_DIM]> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != POLICY_DIM {
        return Err(ConfigError(format!("policy `{s}` needs {POLICY_DIM} comma-separated values")).into());
    }
    let mut out = [0.0; POLICY_DIM];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p
            .parse()
            .map_err(|_| ConfigError(format!("policy component `{p}` is not a number")))?;
    }
    Ok(out)
}
