//! Extremum-seeking control of a one-dimensional flapping-wing robot.
//!
//! The crate is organised the way the closed loop is wired:
//!
//! - [`dynamics`]: the two-degree-of-freedom body/wing model and its RK4 integrator.
//! - [`controller`]: the extremum-seeking loop (washout, demodulation, integration, dither).
//! - [`objective`]: the measurable signals, a known quadratic and a light field
//!   read through a noisy, quantized, inverted photoresistor model.
//! - [`engine`]: scenario orchestration, live commands, convergence diagnostics.
//! - [`spectrum`]: dominant-frequency analysis of sampled signals.
//! - [`config`] and [`telemetry`]: scenario files and CSV telemetry logs.
//! - [`units`]: the PWM-count / normalized / percent command scaling.

pub mod config;
pub mod controller;
pub mod dynamics;
pub mod engine;
pub mod objective;
pub mod spectrum;
pub mod telemetry;
pub mod units;

pub use config::{load_config, load_scenario, parse_config, ConfigError};
pub use controller::{esc_step, hpf_update, reset, EscOutput, EscParams, EscState};
pub use dynamics::{
    derivatives, hover_equilibrium, step, ActuatorInput, DynamicsError, DynamicsParams,
    FlapperState, StateDerivative,
};
pub use engine::{
    acceptance_band, detect_convergence, measure_dither_ripple, run_scenario, CommandKind,
    CommandQueue, ConvergenceReport, LiveCommand, Mode, SimConfig, SimError, Simulation, Target,
    TelemetryFrame, TelemetryLog,
};
pub use objective::{
    light_sensor_read, quadratic_eval, source_position, Falloff, Interpolation, LightField,
    NoiseStream, ObjectiveSpec, SensorModel, SourceSchedule,
};
pub use spectrum::{spectrum_peak, SpectrumError, SpectrumPeak};
pub use telemetry::{read_log, write_log, TelemetryError, CSV_HEADER};
