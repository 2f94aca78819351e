//! Motor command scaling.
//!
//! The hardware speaks in PWM counts; the plant and the controller work in
//! percent of full-scale PWM ("command units"). A normalized command in
//! `[0, 1]` is what an operator types on the command line.
//!
//! 38 000 counts ↔ 0.38 normalized ↔ 38 % command.

/// PWM counts at full scale.
pub const PWM_FULL_SCALE_COUNTS: f64 = 100_000.0;

/// Command units at full scale (percent).
pub const COMMAND_FULL_SCALE: f64 = 100.0;

pub fn counts_to_normalized(counts: f64) -> f64 {
    counts / PWM_FULL_SCALE_COUNTS
}

pub fn normalized_to_counts(normalized: f64) -> f64 {
    normalized * PWM_FULL_SCALE_COUNTS
}

pub fn normalized_to_command(normalized: f64) -> f64 {
    normalized * COMMAND_FULL_SCALE
}

pub fn command_to_normalized(command: f64) -> f64 {
    command / COMMAND_FULL_SCALE
}

pub fn counts_to_command(counts: f64) -> f64 {
    normalized_to_command(counts_to_normalized(counts))
}

/// Convert plant `z` (m, positive down) to reported altitude (mm, positive up).
pub fn altitude_mm(z: f64) -> f64 {
    -1000.0 * z
}

/// Inverse of [`altitude_mm`].
pub fn z_from_altitude_mm(altitude: f64) -> f64 {
    -altitude / 1000.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_command_maps_across_units() {
        assert_eq!(counts_to_normalized(38_000.0), 0.38);
        assert!((counts_to_command(38_000.0) - 38.0).abs() < 1e-12);
        assert!((normalized_to_command(0.38) - 38.0).abs() < 1e-12);
        assert!((command_to_normalized(38.0) - 0.38).abs() < 1e-15);
        assert_eq!(normalized_to_counts(1.0), PWM_FULL_SCALE_COUNTS);
    }

    #[test]
    fn altitude_is_negated_millimetres() {
        assert_eq!(altitude_mm(-0.4), 400.0);
        assert_eq!(z_from_altitude_mm(700.0), -0.7);
        assert_eq!(altitude_mm(z_from_altitude_mm(123.5)), 123.5);
    }
}
