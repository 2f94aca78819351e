//! Paced stepping loop plus the WebSocket fan-out.
//!
//! One task steps the simulation against the wall clock and writes every
//! frame to the log. Frames are thinned to `rate_hz` and pushed through a
//! broadcast channel; a client that cannot keep up loses the oldest frames,
//! it never slows the run down.

use crate::protocol::{parse_client, ClientMessage, ServerMessage};
use flapesc::engine::{CommandKind, CommandQueue, LiveCommand, Simulation};
use flapesc::telemetry::TelemetryWriter;
use flapesc::{SimError, TelemetryError};
use futures_util::{SinkExt, StreamExt};
use log::{debug, info, warn};
use std::future::Future;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;
use thiserror::Error;
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{broadcast, watch};
use tokio::task::JoinHandle;
use tokio::time::Instant;
use tokio_tungstenite::tungstenite::Message;

/// Steps taken between yields when running unpaced.
const UNPACED_CHUNK: usize = 1000;
const PAUSED_POLL: Duration = Duration::from_millis(5);
const PACED_TICK: Duration = Duration::from_millis(2);
/// How long `run` waits for clients to drain before returning.
const CLIENT_GRACE: Duration = Duration::from_secs(1);

#[derive(Debug, Error)]
pub enum BridgeError {
    #[error("cannot listen on {addr}: {source}")]
    Bind {
        addr: SocketAddr,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid bridge setting `{field}`: {rule}")]
    InvalidConfig { field: &'static str, rule: String },
    #[error("telemetry log: {0}")]
    Log(#[from] TelemetryError),
    #[error("simulation stopped: {0}")]
    Simulation(#[from] SimError),
}

#[derive(Debug, Clone)]
pub struct BridgeConfig {
    pub addr: SocketAddr,
    /// Frames per simulated second sent to clients.
    pub rate_hz: f64,
    /// Simulated seconds per wall-clock second; `f64::INFINITY` runs unpaced.
    pub speed: f64,
    /// Every frame is written here, whatever the clients receive.
    pub log_path: Option<PathBuf>,
    /// Kernel send-buffer size (bytes) for client sockets.
    pub send_buffer: Option<usize>,
    /// Records buffered per client before the oldest are dropped.
    pub channel_capacity: usize,
    /// Return from `run` once the scenario ends instead of waiting for shutdown.
    pub exit_when_finished: bool,
}

impl Default for BridgeConfig {
    fn default() -> Self {
        Self {
            addr: SocketAddr::from(([127, 0, 0, 1], 8765)),
            rate_hz: 50.0,
            speed: 1.0,
            log_path: None,
            send_buffer: None,
            channel_capacity: 64,
            exit_when_finished: true,
        }
    }
}

impl BridgeConfig {
    pub fn validate(&self) -> Result<(), BridgeError> {
        let bad = |field, rule: &str| {
            Err(BridgeError::InvalidConfig {
                field,
                rule: rule.to_string(),
            })
        };
        if !(self.rate_hz.is_finite() && self.rate_hz > 0.0) {
            return bad("rate_hz", "must be finite and > 0");
        }
        if self.speed.is_nan() || self.speed <= 0.0 {
            return bad("speed", "must be > 0 (inf runs unpaced)");
        }
        if self.channel_capacity == 0 {
            return bad("channel_capacity", "must be >= 1");
        }
        if self.send_buffer == Some(0) {
            return bad("send_buffer", "must be > 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunSummary {
    pub frames_simulated: usize,
    pub frames_broadcast: usize,
    pub frames_logged: usize,
    pub finished: bool,
    pub clients: usize,
}

/// State shared between the stepping loop and the client tasks.
struct Shared {
    scenario: String,
    accepts_source_moves: bool,
    queue: CommandQueue,
    /// Bits of the time (s) of the next frame.
    clock: AtomicU64,
    finished: AtomicBool,
    /// Pause/resume commands received; each is acknowledged with a status
    /// record, even when it changes nothing.
    status_requests: AtomicU64,
    send_buffer: Option<usize>,
}

impl Shared {
    fn now(&self) -> f64 {
        f64::from_bits(self.clock.load(Ordering::Acquire))
    }

    fn handle(&self, msg: ClientMessage) -> Option<ServerMessage> {
        if self.finished.load(Ordering::Acquire) {
            return Some(ServerMessage::error("run finished; commands are ignored"));
        }
        let kind = match msg {
            ClientMessage::SetSource { .. } if !self.accepts_source_moves => {
                return Some(ServerMessage::error(
                    "set_source rejected: this scenario has a fixed quadratic objective",
                ))
            }
            ClientMessage::SetSource { z } => CommandKind::SetSource { z },
            ClientMessage::Pause => CommandKind::Pause,
            ClientMessage::Resume => CommandKind::Resume,
            ClientMessage::Reset => CommandKind::Reset,
        };
        self.queue.push(LiveCommand {
            at: self.now(),
            kind,
        });
        if matches!(kind, CommandKind::Pause | CommandKind::Resume) {
            self.status_requests.fetch_add(1, Ordering::AcqRel);
        }
        None
    }
}

pub struct Server {
    listener: TcpListener,
    sim: Simulation,
    config: BridgeConfig,
}

impl Server {
    pub async fn bind(sim: Simulation, config: BridgeConfig) -> Result<Self, BridgeError> {
        config.validate()?;
        let listener =
            TcpListener::bind(config.addr)
                .await
                .map_err(|source| BridgeError::Bind {
                    addr: config.addr,
                    source,
                })?;
        Ok(Self {
            listener,
            sim,
            config,
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.listener
            .local_addr()
            .expect("bound listener has an address")
    }

    /// Serve until the scenario ends (see `exit_when_finished`) or `shutdown` resolves.
    pub async fn run<F>(self, shutdown: F) -> Result<RunSummary, BridgeError>
    where
        F: Future<Output = ()>,
    {
        let Server {
            listener,
            mut sim,
            config,
        } = self;
        let mut log = match &config.log_path {
            Some(path) => Some(TelemetryWriter::create(path)?),
            None => None,
        };

        let shared = Arc::new(Shared {
            scenario: sim.config().name.clone(),
            accepts_source_moves: sim.accepts_source_moves(),
            queue: sim.command_queue(),
            clock: AtomicU64::new(sim.time().to_bits()),
            finished: AtomicBool::new(false),
            status_requests: AtomicU64::new(0),
            send_buffer: config.send_buffer,
        });
        let (tx, _) = broadcast::channel::<Arc<str>>(config.channel_capacity);
        let initial = status(&shared, true);
        let (status_tx, status_rx) = watch::channel(initial);
        let clients: Arc<Mutex<Vec<JoinHandle<()>>>> = Arc::default();
        let acceptor = tokio::spawn(accept_loop(
            listener,
            shared.clone(),
            tx.clone(),
            status_rx,
            clients.clone(),
        ));

        let dt = sim.config().dt;
        let every = ((1.0 / (config.rate_hz * dt)).round() as usize).max(1);
        let mut summary = RunSummary::default();
        let mut outcome = Ok(());
        let mut running = true;
        let mut acked = 0;

        let publish = |msg: ServerMessage| {
            // No receivers is fine: nobody is watching yet.
            let _ = tx.send(Arc::from(msg.to_text()));
        };
        let set_status = |running: bool| {
            let msg = status(&shared, running);
            status_tx.send_replace(msg.clone());
            publish(msg);
        };

        tokio::pin!(shutdown);
        let mut anchor_wall = Instant::now();
        let mut anchor_sim = sim.time();

        'outer: loop {
            let mut requested = acked;
            if sim.is_finished() {
                break;
            }
            if sim.is_paused() {
                tokio::select! {
                    _ = &mut shutdown => break 'outer,
                    _ = tokio::time::sleep(PAUSED_POLL) => {}
                }
                requested = shared.status_requests.load(Ordering::Acquire);
                sim.poll_commands();
                shared.clock.store(sim.time().to_bits(), Ordering::Release);
                anchor_wall = Instant::now();
                anchor_sim = sim.time();
            } else {
                let budget = if config.speed.is_infinite() {
                    UNPACED_CHUNK
                } else {
                    let target = anchor_sim + anchor_wall.elapsed().as_secs_f64() * config.speed;
                    (((target - sim.time()) / dt).floor() + 1.0).max(0.0) as usize
                };
                if budget > 0 {
                    requested = shared.status_requests.load(Ordering::Acquire);
                }
                for _ in 0..budget {
                    let frame = match sim.advance() {
                        Ok(Some(frame)) => frame,
                        Ok(None) => break,
                        Err(e) => {
                            warn!("{e}");
                            publish(ServerMessage::error(e.to_string()));
                            outcome = Err(e);
                            break 'outer;
                        }
                    };
                    shared.clock.store(sim.time().to_bits(), Ordering::Release);
                    summary.frames_simulated += 1;
                    if let Some(w) = log.as_mut() {
                        w.write_frame(&frame)?;
                    }
                    let index = summary.frames_simulated - 1;
                    if index % every == 0 || sim.is_finished() {
                        publish(ServerMessage::frame(&frame));
                        summary.frames_broadcast += 1;
                    }
                    if sim.is_paused() {
                        break;
                    }
                }
                if config.speed.is_infinite() {
                    tokio::select! {
                        _ = &mut shutdown => break 'outer,
                        _ = tokio::task::yield_now() => {}
                    }
                } else if !sim.is_paused() {
                    tokio::select! {
                        _ = &mut shutdown => break 'outer,
                        _ = tokio::time::sleep(PACED_TICK) => {}
                    }
                }
            }

            // Requests counted before the commands were polled have taken effect.
            let now_running = !sim.is_paused();
            let acks = requested - acked;
            acked = requested;
            if acks > 0 || now_running != running {
                running = now_running;
                debug!("t={:.3}: running={running}", sim.time());
                for _ in 0..acks.max(1) {
                    set_status(running);
                }
            }
        }

        summary.finished = sim.is_finished();
        shared.finished.store(true, Ordering::Release);
        set_status(false);
        if let Some(mut w) = log.take() {
            w.flush()?;
            summary.frames_logged = w.frames_written();
        }
        info!(
            "{}: {} frames simulated, {} broadcast",
            shared.scenario, summary.frames_simulated, summary.frames_broadcast
        );

        if outcome.is_ok() && summary.finished && !config.exit_when_finished {
            shutdown.await;
        }

        acceptor.abort();
        drop(tx);
        drop(status_tx);
        let handles = std::mem::take(&mut *clients.lock().expect("client list poisoned"));
        summary.clients = handles.len();
        let _ = tokio::time::timeout(CLIENT_GRACE, futures_util::future::join_all(handles)).await;

        outcome?;
        Ok(summary)
    }
}

fn status(shared: &Shared, running: bool) -> ServerMessage {
    ServerMessage::Status {
        running,
        scenario: shared.scenario.clone(),
    }
}

async fn accept_loop(
    listener: TcpListener,
    shared: Arc<Shared>,
    tx: broadcast::Sender<Arc<str>>,
    status: watch::Receiver<ServerMessage>,
    clients: Arc<Mutex<Vec<JoinHandle<()>>>>,
) {
    loop {
        let (stream, peer) = match listener.accept().await {
            Ok(pair) => pair,
            Err(e) => {
                warn!("accept failed: {e}");
                continue;
            }
        };
        // Subscribe before reading the status so nothing between the two is lost.
        let rx = tx.subscribe();
        let hello = status.borrow().clone();
        let handle = tokio::spawn(serve_client(stream, peer, shared.clone(), rx, hello));
        clients.lock().expect("client list poisoned").push(handle);
    }
}

async fn serve_client(
    stream: TcpStream,
    peer: SocketAddr,
    shared: Arc<Shared>,
    mut rx: broadcast::Receiver<Arc<str>>,
    hello: ServerMessage,
) {
    let _ = stream.set_nodelay(true);
    if let Some(bytes) = shared.send_buffer {
        if let Err(e) = socket2::SockRef::from(&stream).set_send_buffer_size(bytes) {
            warn!("{peer}: cannot set send buffer: {e}");
        }
    }
    let ws = match tokio_tungstenite::accept_async(stream).await {
        Ok(ws) => ws,
        Err(e) => {
            warn!("{peer}: handshake failed: {e}");
            return;
        }
    };
    debug!("{peer}: connected");
    let (mut sink, mut source) = ws.split();
    if sink.send(Message::text(hello.to_text())).await.is_err() {
        return;
    }

    loop {
        tokio::select! {
            incoming = source.next() => {
                let reply = match incoming {
                    None | Some(Err(_)) | Some(Ok(Message::Close(_))) => break,
                    Some(Ok(Message::Text(text))) => match parse_client(text.as_str()) {
                        Ok(msg) => shared.handle(msg),
                        Err(reason) => Some(ServerMessage::error(reason)),
                    },
                    Some(Ok(Message::Binary(_))) => {
                        Some(ServerMessage::error("binary frames are not supported; send JSON text"))
                    }
                    Some(Ok(_)) => None,
                };
                if let Some(reply) = reply {
                    if sink.send(Message::text(reply.to_text())).await.is_err() {
                        break;
                    }
                }
            }
            outgoing = rx.recv() => match outgoing {
                Ok(text) => {
                    if sink.send(Message::text(text.as_ref())).await.is_err() {
                        break;
                    }
                }
                Err(broadcast::error::RecvError::Lagged(n)) => {
                    debug!("{peer}: dropped {n} records");
                }
                Err(broadcast::error::RecvError::Closed) => {
                    let _ = sink.send(Message::Close(None)).await;
                    break;
                }
            }
        }
    }
    debug!("{peer}: disconnected");
}
