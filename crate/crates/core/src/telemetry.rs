//! Telemetry frames and their CSV log format.
//!
//! One row per frame, header [`CSV_HEADER`], every value in scientific
//! notation with nine significant digits. Logs are meant to be diffed, so
//! the formatting is fixed and platform independent.

use std::fs::File;
use std::io::{self, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

pub const CSV_HEADER: &str = "t,z,z_dot,phi_dot,J,J_hp,xi,m_hat,m,z_src";

const COLUMNS: [&str; 10] = [
    "t", "z", "z_dot", "phi_dot", "J", "J_hp", "xi", "m_hat", "m", "z_src",
];

#[derive(Debug, Error)]
pub enum TelemetryError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
    #[error("header mismatch: expected `{CSV_HEADER}`, found `{found}`")]
    HeaderMismatch { found: String },
    #[error("ragged row at line {line}: {found} fields, expected {}", COLUMNS.len())]
    RaggedRow { line: u64, found: usize },
    #[error("unparsable value `{value}` in column `{column}` at line {line}")]
    BadValue {
        line: u64,
        column: &'static str,
        value: String,
    },
    #[error("refusing to write divergence artifact: frame {frame} has non-finite `{column}`")]
    NonFinite { frame: usize, column: &'static str },
}

/// One step of the closed loop.
///
/// `z` is altitude (mm, positive up) and `z_dot` its rate (mm/s); `z_src`
/// is the target position in the same frame: the light source, or `z_d`
/// for the quadratic objective.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TelemetryFrame {
    pub t: f64,
    pub z: f64,
    pub z_dot: f64,
    pub phi_dot: f64,
    pub j: f64,
    pub j_hp: f64,
    pub xi: f64,
    pub m_hat: f64,
    pub m: f64,
    pub z_src: f64,
}

impl TelemetryFrame {
    fn values(&self) -> [f64; 10] {
        [
            self.t,
            self.z,
            self.z_dot,
            self.phi_dot,
            self.j,
            self.j_hp,
            self.xi,
            self.m_hat,
            self.m,
            self.z_src,
        ]
    }

    fn from_values(v: [f64; 10]) -> Self {
        let [t, z, z_dot, phi_dot, j, j_hp, xi, m_hat, m, z_src] = v;
        Self {
            t,
            z,
            z_dot,
            phi_dot,
            j,
            j_hp,
            xi,
            m_hat,
            m,
            z_src,
        }
    }

    /// Tracking error `z - z_src` (mm).
    pub fn error(&self) -> f64 {
        self.z - self.z_src
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TelemetryLog {
    pub frames: Vec<TelemetryFrame>,
}

impl TelemetryLog {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn column(&self, f: impl Fn(&TelemetryFrame) -> f64) -> Vec<f64> {
        self.frames.iter().map(f).collect()
    }

    /// Serialize to CSV bytes.
    pub fn to_csv_bytes(&self) -> Result<Vec<u8>, TelemetryError> {
        let mut w = TelemetryWriter::new(Vec::new())?;
        for f in &self.frames {
            w.write_frame(f)?;
        }
        w.into_inner()
    }
}

/// Format a value at nine significant digits.
pub fn format_value(v: f64) -> String {
    format!("{v:.8e}")
}

/// Incremental CSV writer; the header is written on construction.
pub struct TelemetryWriter<W: Write> {
    inner: csv::Writer<W>,
    written: usize,
}

impl<W: Write> TelemetryWriter<W> {
    pub fn new(sink: W) -> Result<Self, TelemetryError> {
        let mut inner = csv::WriterBuilder::new()
            .has_headers(false)
            .from_writer(sink);
        inner.write_record(COLUMNS)?;
        Ok(Self { inner, written: 0 })
    }

    pub fn write_frame(&mut self, frame: &TelemetryFrame) -> Result<(), TelemetryError> {
        let values = frame.values();
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(TelemetryError::NonFinite {
                frame: self.written,
                column: COLUMNS[i],
            });
        }
        self.inner
            .write_record(values.iter().map(|v| format_value(*v)))?;
        self.written += 1;
        Ok(())
    }

    pub fn frames_written(&self) -> usize {
        self.written
    }

    pub fn flush(&mut self) -> Result<(), TelemetryError> {
        self.inner.flush().map_err(|source| TelemetryError::Io {
            path: "<telemetry sink>".into(),
            source,
        })
    }

    pub fn into_inner(self) -> Result<W, TelemetryError> {
        self.inner.into_inner().map_err(|e| TelemetryError::Io {
            path: "<telemetry sink>".into(),
            source: io::Error::new(e.error().kind(), e.error().to_string()),
        })
    }
}

impl TelemetryWriter<BufWriter<File>> {
    pub fn create(path: &Path) -> Result<Self, TelemetryError> {
        let file = File::create(path).map_err(|source| TelemetryError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::new(BufWriter::new(file))
    }
}

/// Write `log` to `path`. Nothing is written if any frame is non-finite.
pub fn write_log(path: &Path, log: &TelemetryLog) -> Result<(), TelemetryError> {
    // serialize first so a bad frame never leaves a partial file behind
    let bytes = log.to_csv_bytes()?;
    std::fs::write(path, bytes).map_err(|source| TelemetryError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_log(path: &Path) -> Result<TelemetryLog, TelemetryError> {
    let file = File::open(path).map_err(|source| TelemetryError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_log_from(file)
}

pub fn read_log_from<R: Read>(source: R) -> Result<TelemetryLog, TelemetryError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(source);
    let mut records = reader.records();
    match records.next() {
        None => {
            return Err(TelemetryError::HeaderMismatch {
                found: String::new(),
            })
        }
        Some(header) => {
            let header = header?;
            let found = header.iter().collect::<Vec<_>>().join(",");
            if found != CSV_HEADER {
                return Err(TelemetryError::HeaderMismatch { found });
            }
        }
    }
    let mut frames = Vec::new();
    for record in records {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != COLUMNS.len() {
            return Err(TelemetryError::RaggedRow {
                line,
                found: record.len(),
            });
        }
        let mut v = [0.0; 10];
        for (i, field) in record.iter().enumerate() {
            v[i] = field.trim().parse().map_err(|_| TelemetryError::BadValue {
                line,
                column: COLUMNS[i],
                value: field.to_string(),
            })?;
        }
        frames.push(TelemetryFrame::from_values(v));
    }
    Ok(TelemetryLog { frames })
}
