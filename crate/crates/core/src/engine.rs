//! Scenario orchestration: plant, controller and objective on one clock.
//!
//! Frame `n` is taken at `t = n·dt`: the objective is measured on the plant
//! state at `t`, the controller produces the command, and that command is
//! held while the plant integrates to `t + dt`. A run of `duration` yields
//! `duration/dt + 1` frames.

use crate::controller::{reset, ControllerError, EscOutput, EscParams, EscState};
use crate::dynamics::{step_with_limit, DynamicsError, DynamicsParams, FlapperState};
use crate::objective::{
    quadratic_eval, NoiseStream, ObjectiveError, ObjectiveSpec, SourceSchedule,
};
use crate::units::{altitude_mm, z_from_altitude_mm};
use log::{debug, warn};
use std::sync::{Arc, Mutex};
use thiserror::Error;

pub use crate::telemetry::{TelemetryFrame, TelemetryLog};

/// Fraction of a step within which a command stamped just after a step
/// boundary still counts as due there (absorbs `n·dt` rounding).
const BOUNDARY_SLACK: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid configuration `{field}`: {rule}")]
    InvalidConfig { field: String, rule: String },
    #[error("simulation diverged after frame {last_valid_frame:?}: {source}")]
    Divergence {
        last_valid_frame: Option<usize>,
        #[source]
        source: DynamicsError,
    },
    #[error("controller fault at frame {frame}: {source}")]
    Controller {
        frame: usize,
        #[source]
        source: ControllerError,
    },
    #[error("invalid live command at t = {at}: {reason}")]
    InvalidCommand { at: f64, reason: String },
}

impl SimError {
    fn config(field: impl Into<String>, rule: impl Into<String>) -> Self {
        SimError::InvalidConfig {
            field: field.into(),
            rule: rule.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mode {
    /// Controller bypassed; the command is held at `m_const` (command units).
    OpenLoop {
        m_const: f64,
    },
    ClosedLoop,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    /// Scenario label, reported by the bridge.
    pub name: String,
    pub dt: f64,
    pub duration: f64,
    pub seed: u64,
    /// Largest step the integrator accepts.
    pub dt_max: f64,
    /// Plant steps per controller tick.
    pub decimation: u32,
    pub dynamics: DynamicsParams,
    pub esc: EscParams,
    pub objective: ObjectiveSpec,
    pub initial_state: FlapperState,
    pub mode: Mode,
}

impl SimConfig {
    /// Number of integration steps (`duration / dt`).
    pub fn steps(&self) -> usize {
        (self.duration / self.dt).round() as usize
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(SimError::config(
                "sim.dt",
                format!("must be finite and > 0 (got {})", self.dt),
            ));
        }
        if !(self.dt_max.is_finite() && self.dt_max > 0.0) {
            return Err(SimError::config(
                "sim.dt_max",
                format!("must be finite and > 0 (got {})", self.dt_max),
            ));
        }
        if self.dt > self.dt_max {
            return Err(SimError::config(
                "sim.dt",
                format!("must not exceed dt_max = {} (got {})", self.dt_max, self.dt),
            ));
        }
        if !(self.duration.is_finite() && self.duration > 0.0) {
            return Err(SimError::config(
                "sim.duration",
                format!("must be finite and > 0 (got {})", self.duration),
            ));
        }
        let ratio = self.duration / self.dt;
        if (ratio - ratio.round()).abs() > 1e-9 * ratio.max(1.0) {
            return Err(SimError::config(
                "sim.duration",
                format!(
                    "must be a whole number of steps of dt = {} (got {} steps)",
                    self.dt, ratio
                ),
            ));
        }
        if self.decimation == 0 {
            return Err(SimError::config("sim.decimation", "must be >= 1"));
        }
        if let Some((field, value)) = self.initial_state.first_non_finite() {
            return Err(SimError::config(
                format!("sim.initial_state.{field}"),
                format!("must be finite (got {value})"),
            ));
        }
        self.esc.validate().map_err(|e| match e {
            ControllerError::InvalidParams { field, rule } => {
                SimError::config(format!("esc.{field}"), rule)
            }
            other => SimError::config("esc", other.to_string()),
        })?;
        self.dynamics
            .validate(self.esc.m_max)
            .map_err(|e| match e {
                DynamicsError::InvalidParams { field, rule } => {
                    SimError::config(format!("dynamics.{field}"), rule)
                }
                other => SimError::config("dynamics", other.to_string()),
            })?;
        self.objective.validate().map_err(|e| match e {
            ObjectiveError::InvalidSensor { field, rule } => {
                SimError::config(format!("objective.sensor.{field}"), rule)
            }
            ObjectiveError::InvalidObjective { field, rule } => {
                SimError::config(format!("objective.{field}"), rule)
            }
            other => SimError::config("objective.schedule", other.to_string()),
        })?;
        if let Mode::OpenLoop { m_const } = self.mode {
            if !(m_const.is_finite() && m_const >= self.esc.m_min && m_const <= self.esc.m_max) {
                return Err(SimError::config(
                    "sim.m_const",
                    format!(
                        "must lie in [{}, {}] (got {m_const})",
                        self.esc.m_min, self.esc.m_max
                    ),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CommandKind {
    /// Move the light source to altitude `z` (mm).
    SetSource {
        z: f64,
    },
    Pause,
    Resume,
    /// Restore the initial plant and controller state; the clock keeps running.
    Reset,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LiveCommand {
    /// Earliest time (s) the command may take effect.
    pub at: f64,
    pub kind: CommandKind,
}

/// Thread-safe queue of live commands, ordered by time.
///
/// Commands with equal times keep their arrival order.
#[derive(Debug, Clone, Default)]
pub struct CommandQueue {
    inner: Arc<Mutex<Vec<LiveCommand>>>,
}

impl CommandQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&self, command: LiveCommand) {
        let mut q = self.inner.lock().expect("command queue poisoned");
        let idx = q.partition_point(|c| c.at <= command.at);
        q.insert(idx, command);
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("command queue poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Remove and return every command due at or before `t`.
    pub fn drain_due(&self, t: f64, slack: f64) -> Vec<LiveCommand> {
        let mut q = self.inner.lock().expect("command queue poisoned");
        let n = q.partition_point(|c| c.at <= t + slack);
        q.drain(..n).collect()
    }
}

/// Stepping state of one run.
pub struct Simulation {
    config: SimConfig,
    plant: FlapperState,
    esc: EscState,
    noise: NoiseStream,
    /// Index of the next frame to emit.
    next_frame: usize,
    total_steps: usize,
    command: f64,
    last_output: EscOutput,
    source_override: Option<f64>,
    paused: bool,
    queue: CommandQueue,
}

impl Simulation {
    pub fn new(config: SimConfig) -> Result<Self, SimError> {
        config.validate()?;
        let esc = reset(&config.esc);
        let command = match config.mode {
            Mode::OpenLoop { m_const } => m_const,
            Mode::ClosedLoop => esc.m_hat,
        };
        Ok(Self {
            plant: config.initial_state,
            noise: NoiseStream::new(config.seed),
            total_steps: config.steps(),
            next_frame: 0,
            command,
            last_output: EscOutput::default(),
            source_override: None,
            paused: false,
            queue: CommandQueue::new(),
            esc,
            config,
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    /// Handle for feeding live commands from another context.
    pub fn command_queue(&self) -> CommandQueue {
        self.queue.clone()
    }

    /// Time of the next frame.
    pub fn time(&self) -> f64 {
        self.next_frame as f64 * self.config.dt
    }

    pub fn frames_emitted(&self) -> usize {
        self.next_frame
    }

    pub fn total_frames(&self) -> usize {
        self.total_steps + 1
    }

    pub fn is_finished(&self) -> bool {
        self.next_frame > self.total_steps
    }

    /// Set by a `Pause` command. Only paced drivers act on it; headless
    /// runs keep stepping.
    pub fn is_paused(&self) -> bool {
        self.paused
    }

    pub fn accepts_source_moves(&self) -> bool {
        matches!(self.config.objective, ObjectiveSpec::LightField(_))
    }

    /// Current target position (mm).
    pub fn source(&self, t: f64) -> f64 {
        match (&self.config.objective, self.source_override) {
            (ObjectiveSpec::LightField(_), Some(z)) => z,
            (objective, _) => objective.target(t),
        }
    }

    /// Apply commands due at the next frame boundary without stepping.
    pub fn poll_commands(&mut self) {
        let t = self.time();
        for c in self.queue.drain_due(t, BOUNDARY_SLACK * self.config.dt) {
            self.apply(c);
        }
    }

    fn apply(&mut self, c: LiveCommand) {
        debug!("t={:.6}: applying {:?}", self.time(), c.kind);
        match c.kind {
            CommandKind::SetSource { z } => {
                if self.accepts_source_moves() && z.is_finite() {
                    self.source_override = Some(z);
                } else {
                    warn!("ignoring source move to {z} mm: objective has no movable source");
                }
            }
            CommandKind::Pause => self.paused = true,
            CommandKind::Resume => self.paused = false,
            CommandKind::Reset => {
                self.plant = self.config.initial_state;
                self.esc = reset(&self.config.esc);
                self.source_override = None;
                self.last_output = EscOutput::default();
                if matches!(self.config.mode, Mode::ClosedLoop) {
                    self.command = self.esc.m_hat;
                }
            }
        }
    }

    /// Emit the next frame, or `None` once the run is complete.
    pub fn advance(&mut self) -> Result<Option<TelemetryFrame>, SimError> {
        if self.is_finished() {
            return Ok(None);
        }
        let dt = self.config.dt;
        if self.next_frame > 0 {
            let t0 = (self.next_frame - 1) as f64 * dt;
            let m = self.command;
            let params = self.config.dynamics;
            self.plant = step_with_limit(
                &self.plant,
                |tau| params.actuator(m, tau),
                t0,
                dt,
                &params,
                self.config.dt_max,
            )
            .map_err(|source| SimError::Divergence {
                last_valid_frame: Some(self.next_frame - 1),
                source,
            })?;
        }
        self.poll_commands();

        let n = self.next_frame;
        let t = n as f64 * dt;
        let z = altitude_mm(self.plant.z);
        let z_src = self.source(t);
        let j = match &self.config.objective {
            ObjectiveSpec::Quadratic { z_d } => quadratic_eval(z, *z_d),
            ObjectiveSpec::LightField(field) => field.read_at(z, z_src, &mut self.noise),
        };

        let (j_hp, xi, m_hat) = match self.config.mode {
            Mode::OpenLoop { m_const } => {
                self.command = m_const;
                (0.0, 0.0, m_const)
            }
            Mode::ClosedLoop => {
                let dec = self.config.decimation as usize;
                if n % dec == 0 {
                    let out = self
                        .esc
                        .step(j, dt * dec as f64, &self.config.esc)
                        .map_err(|source| SimError::Controller { frame: n, source })?;
                    self.command = out.m;
                    self.last_output = out;
                }
                let o = self.last_output;
                (o.j_hp, o.xi, o.m_hat)
            }
        };

        self.next_frame += 1;
        Ok(Some(TelemetryFrame {
            t,
            z,
            z_dot: -1000.0 * self.plant.z_dot,
            phi_dot: self.plant.phi_dot,
            j,
            j_hp,
            xi,
            m_hat,
            m: self.command,
            z_src,
        }))
    }
}

/// Run a scenario to completion, applying `live_commands` at step boundaries.
pub fn run_scenario(
    config: &SimConfig,
    live_commands: &[LiveCommand],
) -> Result<TelemetryLog, SimError> {
    let mut sim = Simulation::new(config.clone())?;
    let queue = sim.command_queue();
    for c in live_commands {
        if !c.at.is_finite() {
            return Err(SimError::InvalidCommand {
                at: c.at,
                reason: "non-finite timestamp".into(),
            });
        }
        if let CommandKind::SetSource { z } = c.kind {
            if !sim.accepts_source_moves() {
                return Err(SimError::InvalidCommand {
                    at: c.at,
                    reason: "set_source requires a light_field objective".into(),
                });
            }
            if !z.is_finite() {
                return Err(SimError::InvalidCommand {
                    at: c.at,
                    reason: format!("non-finite source position {z}"),
                });
            }
        }
        queue.push(*c);
    }
    let mut frames = Vec::with_capacity(sim.total_frames());
    while let Some(frame) = sim.advance()? {
        frames.push(frame);
    }
    Ok(TelemetryLog { frames })
}

/// Reference trajectory for [`detect_convergence`].
#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Fixed(f64),
    Schedule(SourceSchedule),
    /// The `z_src` column recorded in each frame.
    Logged,
}

impl Target {
    pub fn at(&self, frame: &TelemetryFrame) -> f64 {
        match self {
            Target::Fixed(z) => *z,
            Target::Schedule(s) => s.at(frame.t),
            Target::Logged => frame.z_src,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvergenceReport {
    pub converged: bool,
    /// Start of the terminal in-band window (s), when converged.
    pub settle_time: Option<f64>,
    /// Mean |z - target| over the last 20 % of the frames (mm).
    pub terminal_mean_abs_error: f64,
    /// Largest |z - target| over the same window (mm).
    pub terminal_band: f64,
}

/// Converged when `|z - target| <= band` holds continuously over at least
/// the final `hold` seconds of `frames`.
pub fn detect_convergence(
    frames: &[TelemetryFrame],
    target: &Target,
    band: f64,
    hold: f64,
) -> ConvergenceReport {
    let Some(last) = frames.last() else {
        return ConvergenceReport {
            converged: false,
            settle_time: None,
            terminal_mean_abs_error: f64::NAN,
            terminal_band: f64::NAN,
        };
    };
    let errors: Vec<f64> = frames.iter().map(|f| (f.z - target.at(f)).abs()).collect();

    let start = errors
        .iter()
        .rposition(|e| e.is_nan() || *e > band)
        .map_or(0, |i| i + 1);
    let settle_time = frames.get(start).map(|f| f.t);
    let converged = settle_time.is_some_and(|ts| last.t - ts >= hold);

    let tail = (errors.len() / 5).max(1);
    let window = &errors[errors.len() - tail..];
    ConvergenceReport {
        converged,
        settle_time: if converged { settle_time } else { None },
        terminal_mean_abs_error: window.iter().sum::<f64>() / window.len() as f64,
        terminal_band: window.iter().cloned().fold(0.0, f64::max),
    }
}

/// Floor of the acceptance band (mm).
pub const MIN_BAND_MM: f64 = 5.0;

/// `max(3 × ripple, 5 mm)`.
pub fn acceptance_band(ripple: f64) -> f64 {
    (3.0 * ripple).max(MIN_BAND_MM)
}

/// Steady altitude ripple (mm) caused by the dither alone.
///
/// Runs the scenario's plant and dither with adaptation off (`k = 0`, no
/// lead), noise off, starting at the initial target position with the
/// source frozen there. The first half of a 10 s run is discarded and a
/// quadratic trend removed from the rest; the ripple is the largest
/// remaining deviation.
pub fn measure_dither_ripple(config: &SimConfig) -> Result<f64, SimError> {
    let mut probe = config.clone();
    probe.mode = Mode::ClosedLoop;
    probe.duration = 10.0;
    probe.esc.k = 0.0;
    probe.esc.lead = 0.0;
    let z0 = config.objective.target(0.0);
    if let ObjectiveSpec::LightField(field) = &mut probe.objective {
        field.sensor.noise_sigma = 0.0;
        field.schedule = SourceSchedule::fixed(z0);
    }
    probe.initial_state = FlapperState {
        z: z_from_altitude_mm(z0),
        ..Default::default()
    };
    let log = run_scenario(&probe, &[])?;
    let tail = &log.frames[log.frames.len() / 2..];
    let t: Vec<f64> = tail.iter().map(|f| f.t).collect();
    let z: Vec<f64> = tail.iter().map(|f| f.z).collect();
    let residual = detrend_quadratic(&t, &z);
    Ok(residual.iter().fold(0.0, |m, r| m.max(r.abs())))
}

fn detrend_quadratic(t: &[f64], y: &[f64]) -> Vec<f64> {
    let n = t.len() as f64;
    let tm = t.iter().sum::<f64>() / n;
    let xs: Vec<f64> = t.iter().map(|v| v - tm).collect();
    // normal equations for y ≈ c0 + c1 x + c2 x²
    let mut s = [0.0; 5];
    let mut b = [0.0; 3];
    for (x, yv) in xs.iter().zip(y) {
        let mut p = 1.0;
        for (k, sk) in s.iter_mut().enumerate() {
            *sk += p;
            if k < 3 {
                b[k] += p * yv;
            }
            p *= x;
        }
    }
    let a = [[s[0], s[1], s[2]], [s[1], s[2], s[3]], [s[2], s[3], s[4]]];
    let c = solve3(a, b);
    xs.iter()
        .zip(y)
        .map(|(x, yv)| yv - (c[0] + c[1] * x + c[2] * x * x))
        .collect()
}

fn solve3(a: [[f64; 3]; 3], b: [f64; 3]) -> [f64; 3] {
    let det = |m: [[f64; 3]; 3]| {
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    };
    let d = det(a);
    let mut out = [0.0; 3];
    for (col, o) in out.iter_mut().enumerate() {
        let mut m = a;
        for row in 0..3 {
            m[row][col] = b[row];
        }
        *o = det(m) / d;
    }
    out
}
