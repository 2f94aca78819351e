//! Scenario files.
//!
//! TOML with four sections, `[dynamics]`, `[esc]`, `[objective]` and
//! `[sim]`; unknown keys are rejected. The shipped scenarios are compiled in
//! and can be loaded by name (`scenario_a`, ...).

use crate::controller::EscParams;
use crate::dynamics::{DynamicsParams, FlapperState, DEFAULT_DT_MAX};
use crate::engine::{Mode, SimConfig, SimError};
use crate::objective::{Interpolation, LightField, ObjectiveSpec, SensorModel, SourceSchedule};
use serde::Deserialize;
use std::path::Path;
use thiserror::Error;

pub const BUILTIN_SCENARIOS: [(&str, &str); 5] = [
    ("scenario_a", include_str!("../scenarios/scenario_a.toml")),
    ("scenario_b", include_str!("../scenarios/scenario_b.toml")),
    ("scenario_c", include_str!("../scenarios/scenario_c.toml")),
    ("scenario_n", include_str!("../scenarios/scenario_n.toml")),
    ("free_fall", include_str!("../scenarios/free_fall.toml")),
];

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("invalid `{field}`: {rule}")]
    Invalid { field: String, rule: String },
    #[error("unknown scenario `{0}` (not a file and not a built-in name)")]
    UnknownScenario(String),
}

impl ConfigError {
    fn invalid(field: &str, rule: impl Into<String>) -> Self {
        ConfigError::Invalid {
            field: field.into(),
            rule: rule.into(),
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    dynamics: DynamicsParams,
    esc: EscParams,
    objective: RawObjective,
    sim: RawSim,
}

#[derive(Deserialize)]
#[serde(rename_all = "snake_case")]
enum ObjectiveKind {
    Quadratic,
    LightField,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawObjective {
    kind: ObjectiveKind,
    z_d: Option<f64>,
    schedule: Option<Vec<(f64, f64)>>,
    interpolation: Option<Interpolation>,
    sensor: Option<SensorModel>,
}

#[derive(Deserialize, Clone, Copy)]
#[serde(rename_all = "snake_case")]
enum RawMode {
    ClosedLoop,
    OpenLoop,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSim {
    #[serde(default)]
    name: Option<String>,
    dt: f64,
    duration: f64,
    seed: u64,
    dt_max: Option<f64>,
    decimation: Option<u32>,
    mode: RawMode,
    m_const: Option<f64>,
    initial_state: FlapperState,
}

/// Parse and validate scenario text.
pub fn parse_config(text: &str) -> Result<SimConfig, ConfigError> {
    let raw: RawConfig = toml::from_str(text)
        .map_err(|e| ConfigError::Parse(e.to_string().trim_end().replace('\n', " | ")))?;

    let objective = match raw.objective.kind {
        ObjectiveKind::Quadratic => {
            for (present, field) in [
                (raw.objective.schedule.is_some(), "objective.schedule"),
                (
                    raw.objective.interpolation.is_some(),
                    "objective.interpolation",
                ),
                (raw.objective.sensor.is_some(), "objective.sensor"),
            ] {
                if present {
                    return Err(ConfigError::invalid(
                        field,
                        "not allowed for kind = \"quadratic\"",
                    ));
                }
            }
            let z_d = raw.objective.z_d.ok_or_else(|| {
                ConfigError::invalid("objective.z_d", "required for kind = \"quadratic\"")
            })?;
            ObjectiveSpec::Quadratic { z_d }
        }
        ObjectiveKind::LightField => {
            if raw.objective.z_d.is_some() {
                return Err(ConfigError::invalid(
                    "objective.z_d",
                    "not allowed for kind = \"light_field\" (use schedule)",
                ));
            }
            let breakpoints = raw.objective.schedule.ok_or_else(|| {
                ConfigError::invalid("objective.schedule", "required for kind = \"light_field\"")
            })?;
            let schedule =
                SourceSchedule::new(breakpoints, raw.objective.interpolation.unwrap_or_default())
                    .map_err(|e| ConfigError::invalid("objective.schedule", e.to_string()))?;
            let sensor = raw.objective.sensor.ok_or_else(|| {
                ConfigError::invalid("objective.sensor", "required for kind = \"light_field\"")
            })?;
            ObjectiveSpec::LightField(LightField { schedule, sensor })
        }
    };

    let mode = match (raw.sim.mode, raw.sim.m_const) {
        (RawMode::ClosedLoop, None) => Mode::ClosedLoop,
        (RawMode::ClosedLoop, Some(_)) => {
            return Err(ConfigError::invalid(
                "sim.m_const",
                "only allowed with mode = \"open_loop\"",
            ))
        }
        (RawMode::OpenLoop, Some(m_const)) => Mode::OpenLoop { m_const },
        (RawMode::OpenLoop, None) => {
            return Err(ConfigError::invalid(
                "sim.m_const",
                "required with mode = \"open_loop\"",
            ))
        }
    };

    let config = SimConfig {
        name: raw.sim.name.unwrap_or_default(),
        dt: raw.sim.dt,
        duration: raw.sim.duration,
        seed: raw.sim.seed,
        dt_max: raw.sim.dt_max.unwrap_or(DEFAULT_DT_MAX),
        decimation: raw.sim.decimation.unwrap_or(1),
        dynamics: raw.dynamics,
        esc: raw.esc,
        objective,
        initial_state: raw.sim.initial_state,
        mode,
    };
    config.validate().map_err(|e| match e {
        SimError::InvalidConfig { field, rule } => ConfigError::Invalid { field, rule },
        other => ConfigError::invalid("sim", other.to_string()),
    })?;
    Ok(config)
}

/// Load a scenario file. The scenario name defaults to the file stem.
pub fn load_config(path: &Path) -> Result<SimConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut config = parse_config(&text)?;
    if config.name.is_empty() {
        config.name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
    }
    Ok(config)
}

/// Load a scenario by path, falling back to the built-in of that name.
pub fn load_scenario(name_or_path: &str) -> Result<SimConfig, ConfigError> {
    let path = Path::new(name_or_path);
    if path.exists() {
        return load_config(path);
    }
    let name = name_or_path.trim_end_matches(".toml");
    let (name, text) = BUILTIN_SCENARIOS
        .iter()
        .find(|(n, _)| *n == name)
        .ok_or_else(|| ConfigError::UnknownScenario(name_or_path.to_string()))?;
    let mut config = parse_config(text)?;
    if config.name.is_empty() {
        config.name = name.to_string();
    }
    Ok(config)
}
