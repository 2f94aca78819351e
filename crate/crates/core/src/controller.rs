//! Perturbation-based extremum seeking loop.
//!
//! Per controller tick:
//!
//! 1. washout (optional): `eta += (J - eta)(1 - e^{-h dt})`, `J_hp = J - eta`
//! 2. demodulate: `xi = c · J_hp · cos(omega t)`
//! 3. integrate: `m_hat = clamp(m_hat + sign·(-k)·xi·dt)`
//! 4. emit: `m = clamp(m_hat + lead_term + a·cos(omega t))`
//!
//! `lead_term` is a phase-lead correction on the gradient estimate (see
//! [`EscParams::lead`]); with `lead = 0` the loop is the plain
//! integrate-and-dither form above. An optional jump filter in front of the
//! washout ([`EscParams::jump_threshold`]) keeps step changes of the
//! objective out of the gradient estimate.

use log::warn;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControllerError {
    #[error("measurement fault: J = {0}")]
    MeasurementFault(f64),
    #[error("invalid controller parameter `{field}`: {rule}")]
    InvalidParams { field: &'static str, rule: String },
    #[error("invalid controller step dt = {0}")]
    InvalidStep(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EscParams {
    /// Dither frequency (rad/s).
    pub omega: f64,
    /// Integrator gain.
    pub k: f64,
    /// Dither amplitude (command units).
    pub a: f64,
    /// Demodulation gain.
    pub c: f64,
    /// Washout gain (1/s). Ignored when `hpf_enabled` is false.
    #[serde(default)]
    pub h: f64,
    pub hpf_enabled: bool,
    pub m_min: f64,
    pub m_max: f64,
    /// +1 or -1: direction of descent through the plant.
    pub sign: i8,
    /// Initial adapted command; midpoint of the bounds when absent.
    #[serde(default)]
    pub m_init: Option<f64>,
    /// Lead time (s) applied to the averaged gradient estimate.
    ///
    /// The command-to-position path is a double integrator, so an integral
    /// action alone leaves the averaged loop without damping. Adding
    /// `sign·(-k)·lead·x̄`, with `x̄` the period-averaged demodulated
    /// signal, puts a zero at `-1/lead` in the loop. Zero disables it.
    #[serde(default)]
    pub lead: f64,
    /// Bound on the magnitude of the lead term (command units); unbounded
    /// when absent. A jump in the objective (a source that moves
    /// instantly) shows up as an impulse in the averaged gradient, which
    /// the lead path would otherwise pass straight to the command.
    #[serde(default)]
    pub lead_limit: Option<f64>,
    /// Per-tick change of `J` (objective units) treated as a jump of the
    /// objective itself rather than motion through it. A jump is absorbed
    /// into a running offset so the washout never sees the step;
    /// demodulating a step would otherwise inject a gradient impulse far
    /// larger than the dither response. Requires the washout.
    #[serde(default)]
    pub jump_threshold: Option<f64>,
}

impl Default for EscParams {
    fn default() -> Self {
        Self {
            omega: 100.0,
            k: 0.003,
            a: 0.7,
            c: 1.095,
            h: 0.0,
            hpf_enabled: false,
            m_min: 0.0,
            m_max: 100.0,
            sign: -1,
            m_init: None,
            lead: 0.0,
            lead_limit: None,
            jump_threshold: None,
        }
    }
}

impl EscParams {
    pub fn validate(&self) -> Result<(), ControllerError> {
        let bad =
            |field: &'static str, rule: String| Err(ControllerError::InvalidParams { field, rule });
        if !(self.omega.is_finite() && self.omega > 0.0) {
            return bad(
                "omega",
                format!("must be finite and > 0 (got {})", self.omega),
            );
        }
        if !(self.k.is_finite() && self.k >= 0.0) {
            return bad("k", format!("must be finite and >= 0 (got {})", self.k));
        }
        if !(self.a.is_finite() && self.a >= 0.0) {
            return bad("a", format!("must be finite and >= 0 (got {})", self.a));
        }
        if !(self.c.is_finite() && self.c > 0.0) {
            return bad("c", format!("must be finite and > 0 (got {})", self.c));
        }
        if self.hpf_enabled && !(self.h.is_finite() && self.h > 0.0) {
            return bad(
                "h",
                format!("must be > 0 when hpf_enabled (got {})", self.h),
            );
        }
        if !(self.m_min.is_finite() && self.m_max.is_finite() && self.m_min < self.m_max) {
            return bad(
                "m_min",
                format!(
                    "m_min < m_max required (got {} / {})",
                    self.m_min, self.m_max
                ),
            );
        }
        if self.sign != 1 && self.sign != -1 {
            return bad("sign", format!("must be +1 or -1 (got {})", self.sign));
        }
        if let Some(m0) = self.m_init {
            if !m0.is_finite() {
                return bad("m_init", format!("must be finite (got {m0})"));
            }
        }
        if !(self.lead.is_finite() && self.lead >= 0.0) {
            return bad(
                "lead",
                format!("must be finite and >= 0 (got {})", self.lead),
            );
        }
        if let Some(l) = self.lead_limit {
            if !(l.is_finite() && l > 0.0) {
                return bad("lead_limit", format!("must be finite and > 0 (got {l})"));
            }
        }
        if let Some(th) = self.jump_threshold {
            if !(th.is_finite() && th > 0.0) {
                return bad(
                    "jump_threshold",
                    format!("must be finite and > 0 (got {th})"),
                );
            }
            if !self.hpf_enabled {
                return bad("jump_threshold", "requires hpf_enabled = true".to_string());
            }
        }
        Ok(())
    }

    fn clamp(&self, m: f64) -> f64 {
        m.clamp(self.m_min, self.m_max)
    }

    fn period(&self) -> f64 {
        2.0 * PI / self.omega
    }
}

/// Moving average over a fixed window `T`, computed from a history of the
/// running integral with linear interpolation for the fractional sample.
#[derive(Debug, Clone, PartialEq)]
struct WindowMean {
    window: f64,
    dt: f64,
    whole: usize,
    frac: f64,
    integral: f64,
    history: VecDeque<f64>,
}

impl WindowMean {
    fn new(window: f64, dt: f64) -> Self {
        let ratio = window / dt;
        let whole = ratio.floor() as usize;
        Self {
            window,
            dt,
            whole,
            frac: ratio - whole as f64,
            integral: 0.0,
            history: VecDeque::with_capacity(whole + 2),
        }
    }

    fn push(&mut self, x: f64) -> Option<f64> {
        self.integral += x * self.dt;
        if self.history.len() == self.whole + 2 {
            self.history.pop_front();
        }
        self.history.push_back(self.integral);
        if self.history.len() < self.whole + 2 {
            return None;
        }
        // history[1] = I(t - whole·dt), history[0] = I(t - (whole+1)·dt)
        let near = self.history[1];
        let far = self.history[0];
        let lagged = near + (far - near) * self.frac;
        Some((self.integral - lagged) / self.window)
    }
}

/// Two cascaded one-period moving averages of `xi`.
#[derive(Debug, Clone, PartialEq)]
struct GradientAverager {
    first: WindowMean,
    second: WindowMean,
    value: f64,
}

impl GradientAverager {
    fn new(period: f64, dt: f64) -> Self {
        Self {
            first: WindowMean::new(period, dt),
            second: WindowMean::new(period, dt),
            value: 0.0,
        }
    }

    fn push(&mut self, xi: f64) -> f64 {
        if let Some(y) = self.first.push(xi) {
            if let Some(v) = self.second.push(y) {
                self.value = v;
            }
        }
        self.value
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EscState {
    /// Washout filter state (objective units).
    pub eta: f64,
    /// Adapted mean command (command units).
    pub m_hat: f64,
    /// Controller clock (s).
    pub t: f64,
    /// Sum of the objective jumps absorbed so far.
    pub jump_offset: f64,
    last_j: Option<f64>,
    averager: Option<GradientAverager>,
}

impl EscState {
    /// Advance the controller by one tick with measurement `j_meas`.
    pub fn step(
        &mut self,
        j_meas: f64,
        dt: f64,
        params: &EscParams,
    ) -> Result<EscOutput, ControllerError> {
        if !j_meas.is_finite() {
            return Err(ControllerError::MeasurementFault(j_meas));
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(ControllerError::InvalidStep(dt));
        }
        let mut jump_offset = self.jump_offset;
        if let (Some(th), Some(prev)) = (params.jump_threshold, self.last_j) {
            let delta = j_meas - prev;
            if delta.abs() > th {
                jump_offset += delta;
            }
        }
        let (eta, j_hp) = hpf_update(
            self.eta,
            j_meas - jump_offset,
            params.h,
            dt,
            params.hpf_enabled,
        );
        let dither = (params.omega * self.t).cos();
        let xi = params.c * j_hp * dither;
        let gain = -f64::from(params.sign) * params.k;
        let m_hat = params.clamp(self.m_hat + gain * xi * dt);

        let lead_term = if params.lead > 0.0 {
            let rebuild = match &self.averager {
                Some(avg) => avg.first.dt != dt || avg.first.window != params.period(),
                None => true,
            };
            if rebuild {
                self.averager = Some(GradientAverager::new(params.period(), dt));
            }
            let avg = self.averager.as_mut().expect("averager initialised above");
            let lead = gain * params.lead * avg.push(xi);
            match params.lead_limit {
                Some(l) => lead.clamp(-l, l),
                None => lead,
            }
        } else {
            0.0
        };

        let m = params.clamp(m_hat + lead_term + params.a * dither);
        self.eta = eta;
        self.m_hat = m_hat;
        self.jump_offset = jump_offset;
        self.last_j = Some(j_meas);
        self.t += dt;
        Ok(EscOutput {
            j_hp,
            xi,
            m_hat,
            m,
            lead_term,
        })
    }
}

/// Signals produced by one controller tick.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EscOutput {
    pub j_hp: f64,
    pub xi: f64,
    pub m_hat: f64,
    pub m: f64,
    pub lead_term: f64,
}

/// First-order washout, exact discretization of `eta' = h (J - eta)`.
///
/// Returns the updated filter state and the high-passed signal. With the
/// filter disabled the state is left as is and `J` passes through.
pub fn hpf_update(eta: f64, j: f64, h: f64, dt: f64, enabled: bool) -> (f64, f64) {
    if !enabled {
        return (eta, j);
    }
    let eta = eta + (j - eta) * -(-h * dt).exp_m1();
    (eta, j - eta)
}

/// Functional form of [`EscState::step`].
pub fn esc_step(
    state: &EscState,
    j_meas: f64,
    dt: f64,
    params: &EscParams,
) -> Result<(EscState, EscOutput), ControllerError> {
    let mut next = state.clone();
    let out = next.step(j_meas, dt, params)?;
    Ok((next, out))
}

/// Fresh controller state.
pub fn reset(params: &EscParams) -> EscState {
    let mid = 0.5 * (params.m_min + params.m_max);
    let m_hat = match params.m_init {
        None => mid,
        Some(m0) if m0 < params.m_min || m0 > params.m_max => {
            let clamped = params.clamp(m0);
            warn!(
                "initial command {m0} outside [{}, {}]; clamped to {clamped}",
                params.m_min, params.m_max
            );
            clamped
        }
        Some(m0) => m0,
    };
    EscState {
        eta: 0.0,
        m_hat,
        t: 0.0,
        jump_offset: 0.0,
        last_j: None,
        averager: None,
    }
}
