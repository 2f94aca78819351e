//! Dominant-frequency analysis of uniformly sampled signals.

use rustfft::{num_complex::Complex, FftPlanner};
use std::f64::consts::PI;
use thiserror::Error;

/// Shortest series accepted by [`spectrum_peak`].
pub const MIN_SAMPLES: usize = 1 << 12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpectrumError {
    #[error("series too short: {len} samples (need at least {MIN_SAMPLES})")]
    TooShort { len: usize },
    #[error("invalid sample interval {0}")]
    InvalidInterval(f64),
    #[error("non-finite sample at index {0}")]
    NonFinite(usize),
    #[error("no frequency bins above {f_min} Hz (Nyquist {nyquist} Hz)")]
    NoBins { f_min: f64, nyquist: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectrumPeak {
    /// Frequency of the largest bin (Hz).
    pub frequency: f64,
    /// Magnitude of that bin.
    pub magnitude: f64,
    /// Median magnitude over the searched bins.
    pub median_floor: f64,
    /// Frequency resolution (Hz).
    pub bin_width: f64,
}

impl SpectrumPeak {
    pub fn prominence(&self) -> f64 {
        self.magnitude / self.median_floor
    }
}

/// Largest bin above `f_min` of the linearly detrended, Hann-windowed DFT.
pub fn spectrum_peak(signal: &[f64], dt: f64, f_min: f64) -> Result<SpectrumPeak, SpectrumError> {
    let n = signal.len();
    if n < MIN_SAMPLES {
        return Err(SpectrumError::TooShort { len: n });
    }
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(SpectrumError::InvalidInterval(dt));
    }
    if let Some(i) = signal.iter().position(|x| !x.is_finite()) {
        return Err(SpectrumError::NonFinite(i));
    }

    // least-squares line through (i, x_i)
    let nf = n as f64;
    let mean_i = (nf - 1.0) / 2.0;
    let mean_x = signal.iter().sum::<f64>() / nf;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, &x) in signal.iter().enumerate() {
        let di = i as f64 - mean_i;
        sxy += di * (x - mean_x);
        sxx += di * di;
    }
    let slope = sxy / sxx;

    let mut buf: Vec<Complex<f64>> = signal
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let di = i as f64 - mean_i;
            let w = 0.5 - 0.5 * (2.0 * PI * i as f64 / (nf - 1.0)).cos();
            Complex::new((x - mean_x - slope * di) * w, 0.0)
        })
        .collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);

    let bin_width = 1.0 / (nf * dt);
    let first = ((f_min / bin_width).ceil() as usize).max(1);
    let last = n / 2;
    if first > last {
        return Err(SpectrumError::NoBins {
            f_min,
            nyquist: 0.5 / dt,
        });
    }
    let mags: Vec<f64> = buf[first..=last].iter().map(|c| c.norm()).collect();
    let (peak_offset, &magnitude) = mags
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .expect("non-empty bin range");
    let mut sorted = mags.clone();
    sorted.sort_by(f64::total_cmp);
    let median_floor = sorted[sorted.len() / 2];

    Ok(SpectrumPeak {
        frequency: (first + peak_offset) as f64 * bin_width,
        magnitude,
        median_floor,
        bin_width,
    })
}
