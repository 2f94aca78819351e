//! WebSocket bridge between a running simulation and the operator console.
//!
//! Server → client: `frame`, `status` and `error` records. Client → server:
//! `set_source`, `pause`, `resume`, `reset`. See [`protocol`] for the exact
//! field names.

pub mod protocol;
pub mod server;

pub use protocol::{parse_client, ClientMessage, ServerMessage};
pub use server::{BridgeConfig, BridgeError, RunSummary, Server};
