//! Wire records exchanged with the operator console.
//!
//! Every message is one JSON text frame carrying a `type` field.

use flapesc::TelemetryFrame;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    Frame {
        t: f64,
        /// Altitude (mm, positive up).
        z: f64,
        #[serde(rename = "J")]
        j: f64,
        m: f64,
        z_src: f64,
    },
    Status {
        running: bool,
        scenario: String,
    },
    Error {
        reason: String,
    },
}

impl ServerMessage {
    pub fn frame(f: &TelemetryFrame) -> Self {
        ServerMessage::Frame {
            t: f.t,
            z: f.z,
            j: f.j,
            m: f.m,
            z_src: f.z_src,
        }
    }

    pub fn error(reason: impl Into<String>) -> Self {
        ServerMessage::Error {
            reason: reason.into(),
        }
    }

    pub fn to_text(&self) -> String {
        serde_json::to_string(self).expect("wire records always serialize")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClientMessage {
    /// Move the light source to altitude `z` (mm).
    SetSource {
        z: f64,
    },
    Pause,
    Resume,
    Reset,
}

const CLIENT_TYPES: [&str; 4] = ["set_source", "pause", "resume", "reset"];

/// Parse a client record; the error string is sent back verbatim.
pub fn parse_client(text: &str) -> Result<ClientMessage, String> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| format!("malformed JSON: {e}"))?;
    let kind = match value.get("type") {
        Some(serde_json::Value::String(s)) => s.clone(),
        Some(_) => return Err("field `type` must be a string".into()),
        None if value.is_object() => return Err("missing field `type`".into()),
        None => return Err("message must be a JSON object".into()),
    };
    if !CLIENT_TYPES.contains(&kind.as_str()) {
        return Err(format!("unknown message type `{kind}`"));
    }
    // Internally tagged unit variants silently accept extra keys.
    let allowed: &[&str] = if kind == "set_source" {
        &["type", "z"]
    } else {
        &["type"]
    };
    if let Some(extra) = value
        .as_object()
        .and_then(|o| o.keys().find(|k| !allowed.contains(&k.as_str())))
    {
        return Err(format!("invalid `{kind}` message: unknown field `{extra}`"));
    }
    let msg: ClientMessage =
        serde_json::from_value(value).map_err(|e| format!("invalid `{kind}` message: {e}"))?;
    if let ClientMessage::SetSource { z } = msg {
        if !z.is_finite() {
            return Err(format!(
                "invalid `set_source` message: z must be finite (got {z})"
            ));
        }
    }
    Ok(msg)
}
