//! Vertical body / wing-flapping dynamics and fixed-step integration.
//!
//! Generalized coordinates are the vertical position `z` (m, positive in the
//! direction of gravity) and the wing flapping angle `phi` (rad):
//!
//! ```text
//! z''   = -k_d1·|phi'|·z' + g - k_L·phi'^2 + u_z
//! phi'' = -k_d3·z'·phi'   - k_d2·|phi'|·phi' + u_phi
//! ```
//!
//! Only the wing is actuated. The motor command `m` (percent PWM) becomes an
//! oscillating wing torque `u_phi = kappa_m·m·cos(omega_f·t)`; the lift term
//! rectifies the carrier, so a constant command yields a net mean lift plus a
//! body oscillation at `2·omega_f`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest step accepted by [`step`] unless a caller supplies its own limit.
pub const DEFAULT_DT_MAX: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("non-finite {what}: field `{field}` = {value}")]
    NonFinite {
        what: &'static str,
        field: &'static str,
        value: f64,
    },
    #[error("simulation diverged: field `{field}` became {value}")]
    Divergence { field: &'static str, value: f64 },
    #[error("invalid dynamics parameter `{field}`: {rule}")]
    InvalidParams { field: &'static str, rule: String },
    #[error("invalid step size {dt} (must satisfy 0 < dt <= {dt_max})")]
    InvalidStep { dt: f64, dt_max: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlapperState {
    /// Vertical position (m), positive down.
    pub z: f64,
    /// Vertical velocity (m/s).
    pub z_dot: f64,
    /// Wing flapping angle (rad).
    pub phi: f64,
    /// Flapping angular rate (rad/s).
    pub phi_dot: f64,
}

impl FlapperState {
    fn fields(&self) -> [(&'static str, f64); 4] {
        [
            ("z", self.z),
            ("z_dot", self.z_dot),
            ("phi", self.phi),
            ("phi_dot", self.phi_dot),
        ]
    }

    /// First non-finite field, if any.
    pub fn first_non_finite(&self) -> Option<(&'static str, f64)> {
        self.fields().into_iter().find(|(_, v)| !v.is_finite())
    }

    fn offset(&self, d: &StateDerivative, h: f64) -> Self {
        Self {
            z: self.z + h * d.z_dot,
            z_dot: self.z_dot + h * d.z_ddot,
            phi: self.phi + h * d.phi_dot,
            phi_dot: self.phi_dot + h * d.phi_ddot,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StateDerivative {
    pub z_dot: f64,
    pub z_ddot: f64,
    pub phi_dot: f64,
    pub phi_ddot: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynamicsParams {
    /// Vertical drag coefficient.
    pub k_d1: f64,
    /// Lift coefficient (`k_L·phi'^2` is an acceleration).
    #[serde(rename = "k_L")]
    pub k_l: f64,
    /// Rotational drag coefficient.
    pub k_d2: f64,
    /// Body/wing coupling drag coefficient.
    pub k_d3: f64,
    /// Gravitational acceleration (m/s²).
    pub g: f64,
    /// Wing torque per command unit (rad/s² per percent PWM).
    pub kappa_m: f64,
    /// Flapping carrier frequency (rad/s).
    pub omega_f: f64,
}

impl Default for DynamicsParams {
    fn default() -> Self {
        Self {
            k_d1: 0.2,
            k_l: 0.1,
            k_d2: 0.05,
            k_d3: 0.01,
            g: 9.81,
            kappa_m: 147.4,
            omega_f: 400.0,
        }
    }
}

impl DynamicsParams {
    /// Check the parameter invariants.
    ///
    /// `max_command` is the largest command the actuator can receive; the
    /// hover flapping rate must be reachable with it.
    pub fn validate(&self, max_command: f64) -> Result<(), DynamicsError> {
        let positive = [
            ("k_L", self.k_l),
            ("g", self.g),
            ("kappa_m", self.kappa_m),
            ("omega_f", self.omega_f),
        ];
        for (field, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(DynamicsError::InvalidParams {
                    field,
                    rule: format!("must be finite and > 0 (got {v})"),
                });
            }
        }
        let drags = [
            ("k_d1", self.k_d1),
            ("k_d2", self.k_d2),
            ("k_d3", self.k_d3),
        ];
        for (field, v) in drags {
            if !(v.is_finite() && v >= 0.0) {
                return Err(DynamicsError::InvalidParams {
                    field,
                    rule: format!("must be finite and >= 0 (got {v})"),
                });
            }
        }
        // RMS of the forced carrier rate at full command vs the hover rate.
        let v_eq = hover_equilibrium(self)?;
        let rms_at_max = self.kappa_m * max_command / self.omega_f / std::f64::consts::SQRT_2;
        if rms_at_max < v_eq {
            return Err(DynamicsError::InvalidParams {
                field: "kappa_m",
                rule: format!(
                    "hover flapping rate {v_eq:.4} rad/s unreachable: full command gives RMS {rms_at_max:.4} rad/s"
                ),
            });
        }
        Ok(())
    }

    /// Wing torque input for command `m` at time `t`.
    pub fn actuator(&self, m: f64, t: f64) -> ActuatorInput {
        ActuatorInput {
            u_z: 0.0,
            u_phi: self.kappa_m * m * (self.omega_f * t).cos(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ActuatorInput {
    /// Direct vertical force input (m/s²); zero in every shipped scenario.
    pub u_z: f64,
    /// Wing torque input (rad/s²).
    pub u_phi: f64,
}

/// Right-hand side of the body/wing equations.
pub fn derivatives(
    state: &FlapperState,
    input: &ActuatorInput,
    params: &DynamicsParams,
) -> Result<StateDerivative, DynamicsError> {
    if let Some((field, value)) = state.first_non_finite() {
        return Err(DynamicsError::NonFinite {
            what: "state",
            field,
            value,
        });
    }
    for (field, value) in [("u_z", input.u_z), ("u_phi", input.u_phi)] {
        if !value.is_finite() {
            return Err(DynamicsError::NonFinite {
                what: "input",
                field,
                value,
            });
        }
    }
    Ok(rhs(state, input, params))
}

#[inline]
fn rhs(s: &FlapperState, u: &ActuatorInput, p: &DynamicsParams) -> StateDerivative {
    let abs_rate = s.phi_dot.abs();
    StateDerivative {
        z_dot: s.z_dot,
        z_ddot: -p.k_d1 * abs_rate * s.z_dot + p.g - p.k_l * s.phi_dot * s.phi_dot + u.u_z,
        phi_dot: s.phi_dot,
        phi_ddot: -p.k_d3 * s.z_dot * s.phi_dot - p.k_d2 * abs_rate * s.phi_dot + u.u_phi,
    }
}

/// One classical RK4 step with `input_fn` sampled at the stage times.
pub fn step<F>(
    state: &FlapperState,
    input_fn: F,
    t: f64,
    dt: f64,
    params: &DynamicsParams,
) -> Result<FlapperState, DynamicsError>
where
    F: Fn(f64) -> ActuatorInput,
{
    step_with_limit(state, input_fn, t, dt, params, DEFAULT_DT_MAX)
}

/// [`step`] with an explicit upper bound on `dt`.
pub fn step_with_limit<F>(
    state: &FlapperState,
    input_fn: F,
    t: f64,
    dt: f64,
    params: &DynamicsParams,
    dt_max: f64,
) -> Result<FlapperState, DynamicsError>
where
    F: Fn(f64) -> ActuatorInput,
{
    if !(dt > 0.0 && dt <= dt_max) {
        return Err(DynamicsError::InvalidStep { dt, dt_max });
    }
    let half = 0.5 * dt;
    let k1 = derivatives(state, &input_fn(t), params)?;
    let k2 = rhs(&state.offset(&k1, half), &input_fn(t + half), params);
    let k3 = rhs(&state.offset(&k2, half), &input_fn(t + half), params);
    let k4 = rhs(&state.offset(&k3, dt), &input_fn(t + dt), params);

    let sixth = dt / 6.0;
    let next = FlapperState {
        z: state.z + sixth * (k1.z_dot + 2.0 * k2.z_dot + 2.0 * k3.z_dot + k4.z_dot),
        z_dot: state.z_dot + sixth * (k1.z_ddot + 2.0 * k2.z_ddot + 2.0 * k3.z_ddot + k4.z_ddot),
        phi: state.phi + sixth * (k1.phi_dot + 2.0 * k2.phi_dot + 2.0 * k3.phi_dot + k4.phi_dot),
        phi_dot: state.phi_dot
            + sixth * (k1.phi_ddot + 2.0 * k2.phi_ddot + 2.0 * k3.phi_ddot + k4.phi_ddot),
    };
    match next.first_non_finite() {
        Some((field, value)) => Err(DynamicsError::Divergence { field, value }),
        None => Ok(next),
    }
}

/// Constant flapping rate `sqrt(g / k_L)` at which lift balances gravity.
pub fn hover_equilibrium(params: &DynamicsParams) -> Result<f64, DynamicsError> {
    if params.k_l.is_nan() || params.k_l <= 0.0 {
        return Err(DynamicsError::InvalidParams {
            field: "k_L",
            rule: format!("must be > 0 (got {})", params.k_l),
        });
    }
    Ok((params.g / params.k_l).sqrt())
}

/// Wing torque gain for which a constant command `m_hover` holds the body
/// at hover under the oscillating actuator.
///
/// Starts from the lossless estimate (carrier RMS equal to the hover rate)
/// and rescales until the simulated mean lift over the carrier matches `g`
/// with the rotational drag included. `dt` should be the simulation step so
/// that the discrete plant is the one being balanced.
pub fn calibrate_kappa_m(
    params: &DynamicsParams,
    m_hover: f64,
    dt: f64,
) -> Result<f64, DynamicsError> {
    let v_eq = hover_equilibrium(params)?;
    if m_hover.is_nan() || m_hover <= 0.0 {
        return Err(DynamicsError::InvalidParams {
            field: "m_hover",
            rule: format!("must be > 0 (got {m_hover})"),
        });
    }
    let target = v_eq * v_eq;
    let period = 2.0 * std::f64::consts::PI / params.omega_f;
    let settle_steps = (2.0 / dt).round() as usize;
    let average_steps = ((50.0 * period) / dt).round() as usize;

    let mut kappa = params.omega_f * std::f64::consts::SQRT_2 * v_eq / m_hover;
    for _ in 0..8 {
        let p = DynamicsParams {
            kappa_m: kappa,
            ..*params
        };
        let mut s = FlapperState::default();
        let mut t = 0.0;
        let mut sum = 0.0;
        for n in 0..settle_steps + average_steps {
            // Body held fixed: only the wing equation matters here.
            s.z_dot = 0.0;
            s = step_with_limit(&s, |tau| p.actuator(m_hover, tau), t, dt, &p, f64::INFINITY)?;
            t = (n + 1) as f64 * dt;
            if n >= settle_steps {
                sum += s.phi_dot * s.phi_dot;
            }
        }
        let mean_sq = sum / average_steps as f64;
        let scale = (target / mean_sq).sqrt();
        kappa *= scale;
        if (scale - 1.0).abs() < 1e-9 {
            break;
        }
    }
    Ok(kappa)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn params() -> DynamicsParams {
        DynamicsParams::default()
    }

    fn zero_input(_: f64) -> ActuatorInput {
        ActuatorInput::default()
    }

    #[test]
    fn pure_gravity_at_rest() {
        let d = derivatives(
            &FlapperState::default(),
            &ActuatorInput::default(),
            &params(),
        )
        .unwrap();
        assert_eq!(
            d,
            StateDerivative {
                z_dot: 0.0,
                z_ddot: 9.81,
                phi_dot: 0.0,
                phi_ddot: 0.0
            }
        );
    }

    #[test]
    fn hover_rate_cancels_gravity() {
        let p = params();
        let s = FlapperState {
            phi_dot: (p.g / p.k_l).sqrt(),
            ..Default::default()
        };
        let d = derivatives(&s, &ActuatorInput::default(), &p).unwrap();
        assert!(d.z_ddot.abs() < 1e-12, "{}", d.z_ddot);
    }

    #[test]
    fn hand_substitution() {
        let p = DynamicsParams {
            k_d1: 0.2,
            k_l: 0.1,
            g: 9.81,
            ..params()
        };
        let s = FlapperState {
            z_dot: 1.0,
            phi_dot: 2.0,
            ..Default::default()
        };
        let d = derivatives(&s, &ActuatorInput::default(), &p).unwrap();
        // -0.2*2*1 + 9.81 - 0.1*4
        assert!((d.z_ddot - 9.01).abs() < 1e-12);
        // -0.01*1*2 - 0.05*2*2
        assert!((d.phi_ddot - (-0.22)).abs() < 1e-12);
    }

    #[test]
    fn rejects_non_finite() {
        let s = FlapperState {
            z_dot: f64::NAN,
            ..Default::default()
        };
        let err = derivatives(&s, &ActuatorInput::default(), &params()).unwrap_err();
        assert!(matches!(
            err,
            DynamicsError::NonFinite { field: "z_dot", .. }
        ));

        let u = ActuatorInput {
            u_z: 0.0,
            u_phi: f64::INFINITY,
        };
        let err = derivatives(&FlapperState::default(), &u, &params()).unwrap_err();
        assert!(matches!(
            err,
            DynamicsError::NonFinite { field: "u_phi", .. }
        ));
    }

    #[test]
    fn free_fall_closed_form() {
        let p = params();
        let z0 = -0.4;
        let mut s = FlapperState {
            z: z0,
            ..Default::default()
        };
        let dt = 1e-3;
        for n in 0..1000 {
            s = step(&s, zero_input, n as f64 * dt, dt, &p).unwrap();
        }
        let exact = z0 + 0.5 * p.g;
        assert!(
            ((s.z - exact) / exact).abs() <= 1e-8,
            "{} vs {}",
            s.z,
            exact
        );
        assert_eq!(s.phi_dot, 0.0);
    }

    #[test]
    fn step_is_deterministic() {
        let p = params();
        let s0 = FlapperState {
            z: -0.4,
            z_dot: 0.1,
            phi: 0.2,
            phi_dot: 3.0,
        };
        let input = |t: f64| p.actuator(38.0, t);
        let a = step(&s0, input, 0.25, 1e-3, &p).unwrap();
        let b = step(&s0, input, 0.25, 1e-3, &p).unwrap();
        assert_eq!(a.z.to_bits(), b.z.to_bits());
        assert_eq!(a.phi_dot.to_bits(), b.phi_dot.to_bits());
    }

    #[test]
    fn step_rejects_bad_dt() {
        let p = params();
        let s = FlapperState::default();
        assert!(matches!(
            step(&s, zero_input, 0.0, 0.0, &p),
            Err(DynamicsError::InvalidStep { .. })
        ));
        assert!(matches!(
            step(&s, zero_input, 0.0, 2e-3, &p),
            Err(DynamicsError::InvalidStep { .. })
        ));
    }

    #[test]
    fn divergence_names_the_field() {
        let p = params();
        let s = FlapperState::default();
        let err = step(
            &s,
            |_| ActuatorInput {
                u_z: 0.0,
                u_phi: 1e308,
            },
            0.0,
            1e-3,
            &p,
        )
        .unwrap_err();
        assert!(matches!(err, DynamicsError::Divergence { .. }), "{err:?}");
        assert!(err.to_string().contains("field `"), "{err}");
    }

    #[test]
    fn hover_equilibrium_values() {
        let p = DynamicsParams {
            k_l: 0.1,
            g: 9.81,
            ..params()
        };
        // sqrt(98.1) evaluated independently
        assert!((hover_equilibrium(&p).unwrap() - 9.904_544_411_531_507).abs() < 1e-12);
        let p = DynamicsParams {
            k_l: 9.81,
            g: 9.81,
            ..params()
        };
        assert_eq!(hover_equilibrium(&p).unwrap(), 1.0);
        let p = DynamicsParams {
            k_l: 0.0,
            ..params()
        };
        assert!(hover_equilibrium(&p).is_err());
    }

    #[test]
    fn validate_rejects_each_invariant() {
        let ok = params();
        assert!(ok.validate(100.0).is_ok());
        for (bad, field) in [
            (DynamicsParams { k_l: -1.0, ..ok }, "k_L"),
            (DynamicsParams { g: 0.0, ..ok }, "g"),
            (DynamicsParams { kappa_m: 0.0, ..ok }, "kappa_m"),
            (
                DynamicsParams {
                    omega_f: -3.0,
                    ..ok
                },
                "omega_f",
            ),
            (DynamicsParams { k_d1: -0.1, ..ok }, "k_d1"),
            (
                DynamicsParams {
                    k_d2: f64::NAN,
                    ..ok
                },
                "k_d2",
            ),
            (DynamicsParams { k_d3: -1.0, ..ok }, "k_d3"),
        ] {
            match bad.validate(100.0) {
                Err(DynamicsError::InvalidParams { field: f, .. }) => assert_eq!(f, field),
                other => panic!("expected rejection of {field}, got {other:?}"),
            }
        }
        // hover unreachable at a tiny command ceiling
        assert!(matches!(
            ok.validate(1.0),
            Err(DynamicsError::InvalidParams {
                field: "kappa_m",
                ..
            })
        ));
    }

    /// Fourth-order self-convergence on a driven trajectory that keeps
    /// `phi_dot` away from zero (the drag terms are not smooth there).
    #[test]
    fn rk4_self_convergence() {
        let p = params();
        let hold = p.k_d2 * 30.0 * 30.0;
        let input = |t: f64| ActuatorInput {
            u_z: 0.0,
            u_phi: hold + 4000.0 * (p.omega_f * t).cos(),
        };
        let s0 = FlapperState {
            z: -0.4,
            z_dot: 0.0,
            phi: 0.0,
            phi_dot: 30.0,
        };
        let horizon = 0.5;
        let run = |dt: f64| {
            let n = (horizon / dt).round() as usize;
            let mut s = s0;
            for i in 0..n {
                s = step(&s, input, i as f64 * dt, dt, &p).unwrap();
            }
            s
        };
        let dt = 1e-3;
        let reference = run(dt / 16.0);
        let err = |s: FlapperState| {
            ((s.z - reference.z).powi(2)
                + (s.z_dot - reference.z_dot).powi(2)
                + (s.phi - reference.phi).powi(2)
                + (s.phi_dot - reference.phi_dot).powi(2))
            .sqrt()
        };
        let ratio = err(run(dt)) / err(run(dt / 2.0));
        assert!((8.0..=32.0).contains(&ratio), "ratio {ratio}");
        assert!(ratio.log2() >= 3.8, "order {}", ratio.log2());
    }

    #[test]
    fn calibrated_gain_balances_gravity() {
        let p = params();
        let kappa = calibrate_kappa_m(&p, 38.0, 1e-3).unwrap();
        let lossless = p.omega_f * std::f64::consts::SQRT_2 * hover_equilibrium(&p).unwrap() / 38.0;
        // rotational drag costs a little amplitude
        assert!(
            kappa > lossless && kappa < 1.01 * lossless,
            "{kappa} vs {lossless}"
        );
    }

    proptest! {
        #[test]
        fn lift_sign_structure(rate in 0.0f64..40.0, k_l in 0.01f64..1.0) {
            let p = DynamicsParams { k_l, ..params() };
            let v_eq = hover_equilibrium(&p).unwrap();
            prop_assume!((rate - v_eq).abs() > 1e-6 * v_eq);
            for signed in [rate, -rate] {
                let s = FlapperState { phi_dot: signed, ..Default::default() };
                let d = derivatives(&s, &ActuatorInput::default(), &p).unwrap();
                if rate > v_eq {
                    prop_assert!(d.z_ddot < 0.0);
                } else {
                    prop_assert!(d.z_ddot > 0.0);
                }
            }
        }

        #[test]
        fn rotational_drag_dissipates(rate in -50.0f64..50.0, k_d2 in 0.0f64..1.0) {
            let p = DynamicsParams { k_d2, ..params() };
            let s = FlapperState { phi_dot: rate, ..Default::default() };
            let d = derivatives(&s, &ActuatorInput::default(), &p).unwrap();
            prop_assert!(d.phi_ddot * rate <= 0.0);

            let next = step(&s, zero_input, 0.0, 1e-3, &p).unwrap();
            prop_assert!(next.phi_dot.abs() <= rate.abs() + 1e-12);
        }

        #[test]
        fn unforced_free_fall(z0 in -2.0f64..2.0, v0 in -3.0f64..3.0) {
            let p = params();
            let mut s = FlapperState { z: z0, z_dot: v0, ..Default::default() };
            let dt = 1e-3;
            for n in 0..500 {
                s = step(&s, zero_input, n as f64 * dt, dt, &p).unwrap();
            }
            let t = 0.5;
            let exact = z0 + v0 * t + 0.5 * p.g * t * t;
            prop_assert!((s.z - exact).abs() <= 1e-9 * exact.abs().max(1.0));
            prop_assert_eq!(s.phi_dot, 0.0);
        }
    }
}
