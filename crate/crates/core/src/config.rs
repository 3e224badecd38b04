//! TOML experiment configs.
//!
//! ```toml
//! [system]
//! n = 10000
//! m = 4.0
//! k_max = 64
//!
//! [[system.types]]
//! alpha = 0.08
//! beta = 0.01
//! gamma = 1.0
//! delta = 0.97
//! rho = 1.0
//! chi = 1.0
//! fraction = 1.0
//!
//! [scenario]
//! name = "fig1"
//! variable = "p_e"
//! values = [0.0, 0.0001, 0.0002]
//! p_s = 0.0001
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{validate_spec, AgentType, SystemSpec, DEFAULT_K_MAX};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TypeConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
    pub rho: f64,
    pub chi: f64,
    pub fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    pub n: usize,
    pub m: f64,
    #[serde(default = "default_k_max")]
    pub k_max: u32,
    pub types: Vec<TypeConfig>,
}

fn default_k_max() -> u32 {
    DEFAULT_K_MAX
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepVariable {
    M,
    SybilCount,
    SybilFraction,
    GroupSize,
    #[serde(rename = "p_e")]
    PE,
}

/// An evenly spaced grid, `stop` included when it lands on a step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RangeConfig {
    pub start: f64,
    pub stop: f64,
    pub step: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub variable: Option<SweepVariable>,
    #[serde(default)]
    pub values: Option<Vec<f64>>,
    #[serde(default)]
    pub range: Option<RangeConfig>,
    #[serde(default)]
    pub seeds: Option<Vec<u64>>,
    /// Measured simulator rounds; a sweep runs the simulator only when set.
    #[serde(default)]
    pub rounds: Option<u64>,
    #[serde(default)]
    pub warmup: Option<u64>,
    #[serde(default)]
    pub thresholds: Option<Vec<u32>>,
    #[serde(default)]
    pub p_s: Option<f64>,
    #[serde(default)]
    pub p_e: Option<f64>,
    #[serde(default)]
    pub sybil_type: Option<usize>,
    #[serde(default)]
    pub sybil_fraction: Option<f64>,
    #[serde(default)]
    pub sybil_count: Option<u32>,
    #[serde(default)]
    pub group_size: Option<usize>,
    #[serde(default)]
    pub colluding_fraction: Option<f64>,
    #[serde(default)]
    pub epsilon: Option<f64>,
    #[serde(default)]
    pub max_iter: Option<usize>,
    #[serde(default)]
    pub trace_every: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub system: SystemConfig,
    #[serde(default)]
    pub scenario: ScenarioConfig,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text)?;
        cfg.spec()?;
        cfg.scenario.grid()?;
        if let Some(seeds) = &cfg.scenario.seeds {
            if seeds.is_empty() {
                return Err(Error::Config("seeds must not be empty".into()));
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        let text = std::fs::read_to_string(path)?;
        Ok((Self::parse(&text)?, text))
    }

    pub fn spec(&self) -> Result<SystemSpec> {
        self.spec_with_m(self.system.m)
    }

    pub fn spec_with_m(&self, m: f64) -> Result<SystemSpec> {
        let s = &self.system;
        validate_spec(SystemSpec {
            types: s
                .types
                .iter()
                .map(|t| AgentType {
                    alpha: t.alpha,
                    beta: t.beta,
                    gamma: t.gamma,
                    delta: t.delta,
                    rho: t.rho,
                    chi: t.chi,
                })
                .collect(),
            fractions: s.types.iter().map(|t| t.fraction).collect(),
            n: s.n,
            m,
        })
    }
}

impl ScenarioConfig {
    /// The sweep grid, from `values` or `range`. Empty when neither is set.
    pub fn grid(&self) -> Result<Vec<f64>> {
        let grid = match (&self.values, &self.range) {
            (Some(_), Some(_)) => {
                return Err(Error::Config(
                    "give either values or range, not both".into(),
                ))
            }
            (Some(v), None) => v.clone(),
            (None, Some(r)) => {
                if !(r.step > 0.0) || r.stop < r.start {
                    return Err(Error::Config(format!("bad range {r:?}")));
                }
                let steps = ((r.stop - r.start) / r.step + 1e-9).floor() as usize;
                (0..=steps).map(|i| r.start + i as f64 * r.step).collect()
            }
            (None, None) => return Ok(Vec::new()),
        };
        if grid.is_empty() {
            return Err(Error::Config("sweep grid is empty".into()));
        }
        if grid.iter().any(|v| !v.is_finite()) || grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config(
                "sweep grid must be finite and strictly increasing".into(),
            ));
        }
        Ok(grid)
    }

    pub fn require_grid(&self, what: &str) -> Result<Vec<f64>> {
        let grid = self.grid()?;
        if grid.is_empty() {
            return Err(Error::Config(format!(
                "{what} needs a sweep grid (values or range)"
            )));
        }
        Ok(grid)
    }

    pub fn seeds(&self) -> Vec<u64> {
        self.seeds.clone().unwrap_or_else(|| vec![1])
    }
}
