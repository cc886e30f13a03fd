//! JSON configuration of the `simulate` subcommand.

use std::path::Path;

use anyhow::{anyhow, Context, Result};
use sepcor_core::simulation::{Scenario, TestSettings};
use sepcor_core::solver::SolverConfig;
use sepcor_core::Error;
use serde::Deserialize;
use serde_path_to_error::Segment;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    #[serde(default)]
    pub solver: SolverConfig,
    /// Omitted or null skips all hypothesis tests.
    #[serde(default)]
    pub tests: Option<TestSettings>,
    pub scenarios: Vec<Scenario>,
}

fn pointer(path: &serde_path_to_error::Path) -> String {
    let mut out = String::new();
    for seg in path.iter() {
        out.push('/');
        match seg {
            Segment::Seq { index } => out.push_str(&index.to_string()),
            Segment::Map { key } => out.push_str(&key.replace('~', "~0").replace('/', "~1")),
            Segment::Enum { variant } => out.push_str(variant),
            Segment::Unknown => out.push('?'),
        }
    }
    out
}

pub fn parse(text: &str) -> Result<SimulationConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: SimulationConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let at = pointer(e.path());
        anyhow!("invalid config at {}: {}", if at.is_empty() { "/" } else { &at }, e.inner())
    })?;
    validate(&cfg)?;
    Ok(cfg)
}

fn validate(cfg: &SimulationConfig) -> Result<()> {
    cfg.solver.validate().map_err(|e| anyhow!("invalid config at /solver: {e}"))?;
    if let Some(t) = &cfg.tests {
        if !(t.alpha > 0.0 && t.alpha < 1.0) {
            return Err(anyhow!("invalid config at /tests/alpha: must lie in (0, 1), got {}", t.alpha));
        }
        if t.bootstrap_replicates == Some(0) {
            return Err(anyhow!("invalid config at /tests/bootstrap_replicates: must be positive"));
        }
    }
    if cfg.scenarios.is_empty() {
        return Err(anyhow!("invalid config at /scenarios: no scenarios given"));
    }
    for (i, s) in cfg.scenarios.iter().enumerate() {
        match s.validate() {
            Ok(()) => {}
            Err(Error::InvalidScenario { field, message }) => {
                return Err(anyhow!("invalid config at /scenarios/{i}/{field}: {message}"));
            }
            Err(e) => return Err(anyhow!("invalid config at /scenarios/{i}: {e}")),
        }
    }
    Ok(())
}

pub fn load(path: &Path) -> Result<SimulationConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    parse(&text)
}
