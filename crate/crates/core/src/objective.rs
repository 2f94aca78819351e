//! Measured objective signals.
//!
//! Positions here are altitudes in mm (see [`crate::units::altitude_mm`]).
//! Both objectives are minimized at the target: a quadratic around `z_d`,
//! or photoresistor counts that fall as the sensor approaches the light.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObjectiveError {
    #[error("source schedule is empty")]
    EmptySchedule,
    #[error(
        "source schedule times must be strictly increasing (breakpoint {index}: {t} after {prev})"
    )]
    UnorderedSchedule { index: usize, t: f64, prev: f64 },
    #[error("non-finite source schedule breakpoint {index}")]
    NonFiniteBreakpoint { index: usize },
    #[error("invalid sensor parameter `{field}`: {rule}")]
    InvalidSensor { field: &'static str, rule: String },
    #[error("invalid objective parameter `{field}`: {rule}")]
    InvalidObjective { field: &'static str, rule: String },
}

/// `(z - z_d)^2`, in mm².
pub fn quadratic_eval(z: f64, z_d: f64) -> f64 {
    let e = z - z_d;
    e * e
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    /// Piecewise constant: the source jumps at each breakpoint.
    #[default]
    Step,
    /// Piecewise linear: the source is dragged between breakpoints.
    Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SourceSchedule {
    breakpoints: Vec<(f64, f64)>,
    interpolation: Interpolation,
}

impl SourceSchedule {
    pub fn new(
        breakpoints: Vec<(f64, f64)>,
        interpolation: Interpolation,
    ) -> Result<Self, ObjectiveError> {
        if breakpoints.is_empty() {
            return Err(ObjectiveError::EmptySchedule);
        }
        for (index, &(t, z)) in breakpoints.iter().enumerate() {
            if !(t.is_finite() && z.is_finite()) {
                return Err(ObjectiveError::NonFiniteBreakpoint { index });
            }
            if index > 0 {
                let prev = breakpoints[index - 1].0;
                if t <= prev {
                    return Err(ObjectiveError::UnorderedSchedule { index, t, prev });
                }
            }
        }
        Ok(Self {
            breakpoints,
            interpolation,
        })
    }

    pub fn fixed(z: f64) -> Self {
        Self {
            breakpoints: vec![(0.0, z)],
            interpolation: Interpolation::Step,
        }
    }

    pub fn breakpoints(&self) -> &[(f64, f64)] {
        &self.breakpoints
    }

    pub fn interpolation(&self) -> Interpolation {
        self.interpolation
    }

    /// Source position (mm) at time `t`.
    pub fn at(&self, t: f64) -> f64 {
        let bp = &self.breakpoints;
        // index of the first breakpoint strictly after t
        let next = bp.partition_point(|&(ti, _)| ti <= t);
        if next == 0 {
            return bp[0].1;
        }
        if next == bp.len() {
            return bp[bp.len() - 1].1;
        }
        let (t0, z0) = bp[next - 1];
        match self.interpolation {
            Interpolation::Step => z0,
            Interpolation::Linear => {
                let (t1, z1) = bp[next];
                z0 + (z1 - z0) * (t - t0) / (t1 - t0)
            }
        }
    }
}

/// Source position at `t`; see [`SourceSchedule::at`].
pub fn source_position(t: f64, schedule: &SourceSchedule) -> f64 {
    schedule.at(t)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Falloff {
    /// `r_floor + gamma·d²`.
    #[default]
    Quadratic,
    /// Counts from an inverse-square intensity, matched to the quadratic
    /// law's curvature at the source and saturating at `r_max` far away.
    InverseSquare,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorModel {
    /// Reading at the source (counts).
    pub r_floor: f64,
    /// Falloff curvature (counts/mm²).
    pub gamma: f64,
    /// Additive Gaussian noise standard deviation (counts).
    pub noise_sigma: f64,
    /// Quantizer resolution over `[0, r_max]`; 0 disables quantization.
    pub adc_bits: u32,
    /// Full-scale reading (counts).
    pub r_max: f64,
    #[serde(default)]
    pub falloff: Falloff,
}

impl Default for SensorModel {
    fn default() -> Self {
        Self {
            r_floor: 200.0,
            gamma: 0.0086,
            noise_sigma: 0.02,
            adc_bits: 16,
            r_max: 4095.0,
            falloff: Falloff::Quadratic,
        }
    }
}

impl SensorModel {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        let bad =
            |field: &'static str, rule: String| Err(ObjectiveError::InvalidSensor { field, rule });
        if !(self.r_floor.is_finite() && self.r_floor >= 0.0) {
            return bad(
                "r_floor",
                format!("must be finite and >= 0 (got {})", self.r_floor),
            );
        }
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return bad(
                "gamma",
                format!("must be finite and > 0 (got {})", self.gamma),
            );
        }
        if !(self.r_max.is_finite() && self.r_floor < self.r_max) {
            return bad(
                "r_max",
                format!(
                    "must be finite and > r_floor (got {} vs {})",
                    self.r_max, self.r_floor
                ),
            );
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return bad(
                "noise_sigma",
                format!("must be finite and >= 0 (got {})", self.noise_sigma),
            );
        }
        if self.adc_bits > 32 {
            return bad("adc_bits", format!("must be <= 32 (got {})", self.adc_bits));
        }
        Ok(())
    }

    /// Quantizer step (counts), or `None` when quantization is off.
    pub fn quantization_step(&self) -> Option<f64> {
        (self.adc_bits > 0).then(|| self.r_max / ((1u64 << self.adc_bits) - 1) as f64)
    }

    /// Noise-free, unquantized reading at distance `d` (mm) from the source.
    pub fn ideal(&self, d: f64) -> f64 {
        match self.falloff {
            Falloff::Quadratic => self.r_floor + self.gamma * d * d,
            Falloff::InverseSquare => {
                let span = self.r_max - self.r_floor;
                let d0_sq = span / self.gamma;
                self.r_max - span * d0_sq / (d0_sq + d * d)
            }
        }
    }

    /// Clamp to `[0, r_max]` and snap to the quantizer lattice.
    pub fn digitize(&self, raw: f64) -> f64 {
        let clamped = raw.clamp(0.0, self.r_max);
        match self.quantization_step() {
            Some(q) => ((clamped / q).round() * q).min(self.r_max),
            None => clamped,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LightField {
    pub schedule: SourceSchedule,
    pub sensor: SensorModel,
}

impl LightField {
    /// Reading for a sensor at `z` with the source at `z_src` (both mm).
    pub fn read_at(&self, z: f64, z_src: f64, noise: &mut NoiseStream) -> f64 {
        let raw = self.sensor.ideal(z - z_src) + noise.sample(self.sensor.noise_sigma);
        self.sensor.digitize(raw)
    }
}

/// Sensor reading at altitude `z` (mm) and time `t`, source from the schedule.
pub fn light_sensor_read(z: f64, t: f64, field: &LightField, noise: &mut NoiseStream) -> f64 {
    field.read_at(z, field.schedule.at(t), noise)
}

#[derive(Debug, Clone, PartialEq)]
pub enum ObjectiveSpec {
    Quadratic { z_d: f64 },
    LightField(LightField),
}

impl ObjectiveSpec {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        match self {
            ObjectiveSpec::Quadratic { z_d } if !z_d.is_finite() => {
                Err(ObjectiveError::InvalidObjective {
                    field: "z_d",
                    rule: format!("must be finite (got {z_d})"),
                })
            }
            ObjectiveSpec::Quadratic { .. } => Ok(()),
            ObjectiveSpec::LightField(f) => f.sensor.validate(),
        }
    }

    /// Target position at `t`: `z_d`, or the scheduled source position.
    pub fn target(&self, t: f64) -> f64 {
        match self {
            ObjectiveSpec::Quadratic { z_d } => *z_d,
            ObjectiveSpec::LightField(f) => f.schedule.at(t),
        }
    }
}

/// Seeded Gaussian noise source.
#[derive(Debug, Clone)]
pub struct NoiseStream {
    rng: ChaCha8Rng,
}

impl NoiseStream {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// One draw from `N(0, sigma²)`; no draw is consumed when `sigma == 0`.
    pub fn sample(&mut self, sigma: f64) -> f64 {
        if sigma == 0.0 {
            return 0.0;
        }
        let n: f64 = StandardNormal.sample(&mut self.rng);
        sigma * n
    }
}
