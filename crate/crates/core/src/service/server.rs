//! Threaded TCP server plus the WebSocket JSON mirror.
//!
//! One inference thread consumes the latest-wins slot as fast as cycles
//! complete; one publisher thread ticks at a fixed rate from an
//! atomically swapped command snapshot; every connection gets a reader and
//! a writer fed by its own drop-oldest queue.

use std::io::{self, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::channel::{DropOldestQueue, Hub, SlotCounts};
use super::engine::{Ingestor, Policy, Retargeter};
use super::protocol::{codes, read_message, write_message, Message, ReadError, WsMessage, PROTO_VERSION};
use super::publish::PublishState;
use super::stats::{LoopStats, StatsCollector};
use super::window::PadPolicy;
use crate::error::{Error, Result};

const POLL: Duration = Duration::from_millis(20);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServerConfig {
    pub host: String,
    /// `0` picks a free port.
    pub port: u16,
    /// WebSocket mirror port; `None` disables the mirror.
    pub ws_port: Option<u16>,
    pub publish_hz: f64,
    /// Newest-value weight of the output smoother; `None` disables it.
    pub smooth: Option<f32>,
    pub pad: PadPolicy,
    /// Per-subscriber queue length before the oldest entry is dropped.
    pub queue_capacity: usize,
    /// Period of unsolicited STATS pushes.
    pub stats_interval_ms: u64,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            host: "127.0.0.1".into(),
            port: 7400,
            ws_port: Some(7401),
            publish_hz: 60.0,
            smooth: None,
            pad: PadPolicy::default(),
            queue_capacity: 64,
            stats_interval_ms: 1000,
        }
    }
}

impl ServerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.publish_hz.is_finite() && self.publish_hz > 0.0 && self.publish_hz <= 1000.0) {
            return Err(Error::InvalidConfig(format!(
                "publish rate {} Hz outside (0, 1000]",
                self.publish_hz
            )));
        }
        if let Some(a) = self.smooth {
            if !(a > 0.0 && a <= 1.0) {
                return Err(Error::InvalidConfig(format!("smoothing weight {a} outside (0, 1]")));
            }
        }
        if self.queue_capacity == 0 {
            return Err(Error::InvalidConfig("queue capacity must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Command {
    values: Vec<f32>,
    source_ts: u64,
    received: Instant,
}

#[derive(Debug, Clone)]
enum Outbound {
    Motor { t_us: u64, values: Vec<f32> },
    Blendshape { t_us: u64, values: Vec<f32> },
    Neutral(Vec<f32>),
    Stats(LoopStats),
}

struct Shared {
    cfg: ServerConfig,
    dof: usize,
    ingest: Ingestor,
    latest: Mutex<Option<(u64, Arc<Command>)>>,
    command_seq: AtomicU64,
    stats: Mutex<StatsCollector>,
    tcp_hub: Hub<Outbound>,
    mirror_hub: Hub<Outbound>,
    shutdown: AtomicBool,
    epoch: Instant,
    /// Sockets to shut down on stop so blocked readers return.
    open: Mutex<Vec<TcpStream>>,
}

impl Shared {
    fn stopping(&self) -> bool {
        self.shutdown.load(Ordering::Acquire)
    }

    fn snapshot(&self) -> LoopStats {
        let counts = self.ingest.slot().counts();
        let mut stats = self.stats.lock().expect("stats lock").snapshot(
            self.tcp_hub.len() + self.mirror_hub.len(),
        );
        stats.frames_in = counts.offered;
        stats.frames_dropped = counts.replaced;
        stats
    }

    fn hello(&self) -> Message {
        Message::Hello {
            proto_version: PROTO_VERSION,
            dof: self.dof.min(255) as u8,
            blendshape_dim: self.ingest.dim().min(255) as u8,
        }
    }

    /// Shared handling of client input from either transport.
    fn on_frame(&self, t_us: u64, values: Vec<f32>) -> Result<()> {
        let (frame, _) = self.ingest.ingest(t_us, values)?;
        self.mirror_hub.broadcast(&Outbound::Blendshape {
            t_us,
            values: frame.into_inner(),
        });
        Ok(())
    }

    fn on_neutral(&self, values: Vec<f32>) -> Result<()> {
        self.ingest.set_neutral(values.clone())?;
        self.mirror_hub.broadcast(&Outbound::Neutral(values));
        Ok(())
    }
}

fn error_code(e: &Error) -> u16 {
    match e {
        Error::DimensionMismatch { .. } => codes::DIMENSION,
        Error::InvalidInput(_) | Error::Protocol(_) => codes::MALFORMED,
        _ => codes::INTERNAL,
    }
}

/// A running server; dropping it shuts everything down.
pub struct ServerHandle {
    shared: Arc<Shared>,
    tcp_addr: SocketAddr,
    ws_addr: Option<SocketAddr>,
    threads: Vec<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn tcp_addr(&self) -> SocketAddr {
        self.tcp_addr
    }

    pub fn ws_addr(&self) -> Option<SocketAddr> {
        self.ws_addr
    }

    pub fn stats(&self) -> LoopStats {
        self.shared.snapshot()
    }

    /// Counters of the pending-frame slot.
    pub fn slot_counts(&self) -> SlotCounts {
        self.shared.ingest.slot().counts()
    }

    /// Clears latency and rate windows, e.g. after a warm-up period.
    pub fn reset_stats(&self) {
        *self.shared.stats.lock().expect("stats lock") = StatsCollector::default();
    }

    /// Blocks until another thread calls [`shutdown`](Self::shutdown).
    pub fn wait(mut self) {
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        self.shared.shutdown.store(true, Ordering::Release);
        self.shared.ingest.slot().close();
        self.shared.tcp_hub.close_all();
        self.shared.mirror_hub.close_all();
        for s in self.shared.open.lock().expect("socket list").drain(..) {
            let _ = s.shutdown(std::net::Shutdown::Both);
        }
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

/// Binds the listeners and starts all service threads.
pub fn start(policy: Policy, cfg: ServerConfig) -> Result<ServerHandle> {
    cfg.validate()?;
    let tcp = TcpListener::bind((cfg.host.as_str(), cfg.port))?;
    tcp.set_nonblocking(true)?;
    let tcp_addr = tcp.local_addr()?;
    let ws = match cfg.ws_port {
        Some(port) => {
            let l = TcpListener::bind((cfg.host.as_str(), port))?;
            l.set_nonblocking(true)?;
            Some(l)
        }
        None => None,
    };
    let ws_addr = ws.as_ref().map(|l| l.local_addr()).transpose()?;

    let shared = Arc::new(Shared {
        dof: policy.dof(),
        ingest: Ingestor::new(policy.blendshape_dim()),
        latest: Mutex::new(None),
        command_seq: AtomicU64::new(0),
        stats: Mutex::new(StatsCollector::default()),
        tcp_hub: Hub::default(),
        mirror_hub: Hub::default(),
        shutdown: AtomicBool::new(false),
        epoch: Instant::now(),
        open: Mutex::new(Vec::new()),
        cfg,
    });
    let retargeter = Retargeter::new(policy, shared.cfg.pad);

    let mut threads = Vec::new();
    let spawn = |name: &str, f: Box<dyn FnOnce() + Send>| {
        thread::Builder::new().name(name.into()).spawn(f)
    };
    let s = Arc::clone(&shared);
    threads.push(spawn("inference", Box::new(move || inference_loop(&s, retargeter)))?);
    let s = Arc::clone(&shared);
    threads.push(spawn("publish", Box::new(move || publish_loop(&s)))?);
    let s = Arc::clone(&shared);
    threads.push(spawn("tcp-accept", Box::new(move || accept_loop(&s, tcp, serve_tcp)))?);
    if let Some(ws) = ws {
        let s = Arc::clone(&shared);
        threads.push(spawn("ws-accept", Box::new(move || accept_loop(&s, ws, serve_ws)))?);
    }
    log::info!(
        "serving on tcp://{tcp_addr}{}",
        ws_addr.map(|a| format!(", mirror ws://{a}")).unwrap_or_default()
    );
    Ok(ServerHandle {
        shared,
        tcp_addr,
        ws_addr,
        threads,
    })
}

fn inference_loop(shared: &Shared, mut retargeter: Retargeter) {
    while !shared.stopping() {
        let Some(pending) = shared.ingest.slot().take_timeout(POLL * 5) else {
            continue;
        };
        let started = Instant::now();
        let result = retargeter.control_cycle(Some(pending.frame));
        let ended = Instant::now();
        let mut stats = shared.stats.lock().expect("stats lock");
        stats.record_cycle(ended - started, ended);
        match result {
            Ok(out) => {
                if !out.fresh {
                    stats.errors += 1;
                }
                drop(stats);
                let seq = shared.command_seq.fetch_add(1, Ordering::AcqRel) + 1;
                let cmd = Command {
                    values: out.command.into_inner(),
                    source_ts: pending.timestamp_us,
                    received: pending.received,
                };
                *shared.latest.lock().expect("command lock") = Some((seq, Arc::new(cmd)));
            }
            Err(e) => {
                stats.errors += 1;
                log::warn!("no command available: {e}");
            }
        }
    }
}

fn publish_loop(shared: &Shared) {
    let period = Duration::from_secs_f64(1.0 / shared.cfg.publish_hz);
    let stats_every = Duration::from_millis(shared.cfg.stats_interval_ms.max(1));
    let mut state = PublishState::new(shared.cfg.smooth);
    let mut seen = 0u64;
    let mut current: Option<Arc<Command>> = None;
    let mut next = Instant::now() + period;
    let mut next_stats = Instant::now() + stats_every;
    while !shared.stopping() {
        let now = Instant::now();
        if next > now {
            thread::sleep(next - now);
        }
        let now = Instant::now();
        let t = now.duration_since(shared.epoch).as_secs_f64();
        if let Some((seq, cmd)) = shared.latest.lock().expect("command lock").clone() {
            if seq != seen {
                seen = seq;
                state.on_command(&cmd.values, cmd.source_ts, t);
                current = Some(cmd);
            }
        }
        if let Some(out) = state.tick(t) {
            let mut stats = shared.stats.lock().expect("stats lock");
            stats.record_publish(now);
            if out.new_command {
                if let Some(cmd) = &current {
                    stats.record_latency(now.duration_since(cmd.received));
                }
            }
            drop(stats);
            let msg = Outbound::Motor {
                t_us: out.timestamp_us,
                values: out.values,
            };
            shared.tcp_hub.broadcast(&msg);
            shared.mirror_hub.broadcast(&msg);
        }
        if now >= next_stats {
            let msg = Outbound::Stats(shared.snapshot());
            shared.tcp_hub.broadcast(&msg);
            shared.mirror_hub.broadcast(&msg);
            next_stats = now + stats_every;
        }
        next += period;
        // After a stall, resume the grid instead of bursting to catch up.
        if next + period < Instant::now() {
            next = Instant::now() + period;
        }
    }
}

fn accept_loop(shared: &Arc<Shared>, listener: TcpListener, serve: fn(Arc<Shared>, TcpStream)) {
    let mut conns: Vec<JoinHandle<()>> = Vec::new();
    while !shared.stopping() {
        match listener.accept() {
            Ok((stream, peer)) => {
                log::debug!("connection from {peer}");
                let s = Arc::clone(shared);
                if let Ok(h) = thread::Builder::new()
                    .name(format!("conn-{peer}"))
                    .spawn(move || serve(s, stream))
                {
                    conns.push(h);
                }
                conns.retain(|h| !h.is_finished());
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(POLL / 2),
            Err(e) => {
                log::warn!("accept failed: {e}");
                thread::sleep(POLL);
            }
        }
    }
    for h in conns {
        let _ = h.join();
    }
}

fn to_wire(ev: &Outbound) -> Option<Message> {
    match ev {
        Outbound::Motor { t_us, values } => Some(Message::MotorCommand {
            timestamp_us: *t_us,
            values: values.clone(),
        }),
        Outbound::Stats(s) => Some(Message::Stats(serde_json::to_vec(s).ok()?)),
        Outbound::Blendshape { .. } | Outbound::Neutral(_) => None,
    }
}

/// Records a socket for shutdown; `false` if the server is already stopping.
fn register(shared: &Shared, stream: &TcpStream) -> bool {
    let Ok(handle) = stream.try_clone() else {
        return false;
    };
    let mut open = shared.open.lock().expect("socket list");
    open.retain(|s| s.peer_addr().is_ok());
    open.push(handle);
    drop(open);
    !shared.stopping()
}

fn serve_tcp(shared: Arc<Shared>, stream: TcpStream) {
    if stream.set_nonblocking(false).is_err() || stream.set_nodelay(true).is_err() {
        return;
    }
    let Ok(write_half) = stream.try_clone() else {
        return;
    };
    if !register(&shared, &stream) {
        return;
    }
    // Replies and the command stream share one socket.
    let writer = Arc::new(Mutex::new(write_half));
    let queue = shared.tcp_hub.subscribe(shared.cfg.queue_capacity);
    let send = |w: &Mutex<TcpStream>, m: &Message| -> io::Result<()> {
        let mut w = w.lock().expect("writer lock");
        write_message(&mut *w, m)?;
        w.flush()
    };

    let pump = {
        let shared = Arc::clone(&shared);
        let queue = Arc::clone(&queue);
        let writer = Arc::clone(&writer);
        thread::spawn(move || {
            while !shared.stopping() && !queue.is_closed() {
                let Some(ev) = queue.pop_timeout(POLL * 5) else {
                    continue;
                };
                if let Some(msg) = to_wire(&ev) {
                    if send(&writer, &msg).is_err() {
                        break;
                    }
                }
            }
            queue.close();
        })
    };

    let mut reader = BufReader::new(stream);
    while !shared.stopping() && !queue.is_closed() {
        let msg = match read_message(&mut reader) {
            Ok(Some(m)) => m,
            Ok(None) => break,
            Err(ReadError::Frame(e)) => {
                let _ = send(&writer, &Message::error(codes::MALFORMED, e.to_string()));
                continue;
            }
            Err(e) => {
                log::debug!("closing connection: {e}");
                break;
            }
        };
        let reply = match msg {
            Message::Hello {
                proto_version,
                dof,
                blendshape_dim,
            } => {
                if proto_version != PROTO_VERSION
                    || dof as usize != shared.dof
                    || blendshape_dim as usize != shared.ingest.dim()
                {
                    let _ = send(
                        &writer,
                        &Message::error(
                            codes::HANDSHAKE,
                            format!(
                                "server speaks v{PROTO_VERSION} with dof {} and {} blendshapes; \
                                 client offered v{proto_version}, dof {dof}, {blendshape_dim} blendshapes",
                                shared.dof,
                                shared.ingest.dim()
                            ),
                        ),
                    );
                    break;
                }
                Some(shared.hello())
            }
            Message::SetNeutral(values) => shared
                .on_neutral(values)
                .err()
                .map(|e| Message::error(error_code(&e), e.to_string())),
            Message::BlendshapeFrame {
                timestamp_us,
                values,
            } => shared
                .on_frame(timestamp_us, values)
                .err()
                .map(|e| Message::error(error_code(&e), e.to_string())),
            Message::Stats(_) => serde_json::to_vec(&shared.snapshot()).ok().map(Message::Stats),
            Message::MotorCommand { .. } => Some(Message::error(
                codes::UNSUPPORTED,
                "motor commands flow from server to client only",
            )),
            Message::Error { code, message } => {
                log::info!("client reported error {code}: {message}");
                None
            }
        };
        if let Some(r) = reply {
            if send(&writer, &r).is_err() {
                break;
            }
        }
    }
    queue.close();
    let _ = writer.lock().expect("writer lock").shutdown(std::net::Shutdown::Both);
    let _ = pump.join();
}

fn to_json(ev: &Outbound, epoch: Instant) -> WsMessage {
    let now_us = epoch.elapsed().as_micros() as u64;
    match ev.clone() {
        Outbound::Motor { t_us, values } => WsMessage::MotorCommand { t_us, values },
        Outbound::Blendshape { t_us, values } => WsMessage::BlendshapeFrame { t_us, values },
        Outbound::Neutral(values) => WsMessage::SetNeutral {
            t_us: now_us,
            values,
        },
        Outbound::Stats(s) => WsMessage::Stats {
            t_us: now_us,
            values: serde_json::to_value(s).unwrap_or_default(),
        },
    }
}

fn serve_ws(shared: Arc<Shared>, stream: TcpStream) {
    use tungstenite::Message as Frame;

    if stream.set_nonblocking(false).is_err() || !register(&shared, &stream) {
        return;
    }
    let _ = stream.set_nodelay(true);
    let mut ws = match tungstenite::accept(stream) {
        Ok(ws) => ws,
        Err(e) => {
            log::debug!("websocket handshake failed: {e}");
            return;
        }
    };
    let _ = ws.get_ref().set_read_timeout(Some(Duration::from_millis(5)));
    let queue: Arc<DropOldestQueue<Outbound>> = shared.mirror_hub.subscribe(shared.cfg.queue_capacity);
    let text = |m: &WsMessage| Frame::text(serde_json::to_string(m).unwrap_or_default());
    let hello = WsMessage::Hello {
        proto_version: PROTO_VERSION,
        dof: shared.dof,
        blendshape_dim: shared.ingest.dim(),
    };
    if ws.send(text(&hello)).is_err() {
        queue.close();
        return;
    }
    'conn: while !shared.stopping() && !queue.is_closed() {
        match ws.read() {
            Ok(Frame::Text(body)) => {
                let reply = match serde_json::from_str::<WsMessage>(&body) {
                    Ok(WsMessage::BlendshapeFrame { t_us, values }) => shared.on_frame(t_us, values).err(),
                    Ok(WsMessage::SetNeutral { values, .. }) => shared.on_neutral(values).err(),
                    Ok(WsMessage::Stats { .. }) => {
                        queue.push(Outbound::Stats(shared.snapshot()));
                        None
                    }
                    Ok(_) => Some(Error::Protocol("message type is server-to-client only".into())),
                    Err(e) => Some(Error::Protocol(e.to_string())),
                };
                if let Some(e) = reply {
                    let msg = WsMessage::Error {
                        code: error_code(&e),
                        message: e.to_string(),
                    };
                    if ws.send(text(&msg)).is_err() {
                        break;
                    }
                }
            }
            Ok(Frame::Close(_)) => break,
            Ok(_) => {}
            Err(tungstenite::Error::Io(e))
                if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {}
            Err(e) => {
                log::debug!("mirror connection closed: {e}");
                break;
            }
        }
        for ev in queue.drain() {
            if ws.write(text(&to_json(&ev, shared.epoch))).is_err() {
                break 'conn;
            }
        }
        match ws.flush() {
            Ok(()) => {}
            Err(tungstenite::Error::Io(e)) if e.kind() == io::ErrorKind::WouldBlock => {}
            Err(_) => break,
        }
    }
    queue.close();
    let _ = ws.close(None);
    let _ = ws.flush();
}
