//! Client side of the protocol plus the replay and benchmark drivers.

use std::io::{BufReader, Write};
use std::net::{Shutdown, TcpStream, ToSocketAddrs};
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::engine::Policy;
use super::protocol::{read_message, write_message, Message, ReadError, PROTO_VERSION};
use super::server::{start, ServerConfig};
use super::stats::rate_hz;
use crate::error::{Error, Result};
use crate::trainer::read_dataset;

/// Blocking protocol client.
#[derive(Debug)]
pub struct Client {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

impl Client {
    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        Ok(Self {
            writer: stream.try_clone()?,
            reader: BufReader::new(stream),
        })
    }

    pub fn send(&mut self, msg: &Message) -> Result<()> {
        write_message(&mut self.writer, msg)?;
        self.writer.flush()?;
        Ok(())
    }

    /// Next message, `None` once the server closed the connection.
    pub fn recv(&mut self) -> Result<Option<Message>> {
        match read_message(&mut self.reader) {
            Ok(m) => Ok(m),
            Err(ReadError::Io(e)) => Err(e.into()),
            Err(ReadError::Frame(e)) => Err(e),
            Err(ReadError::Fatal(m)) => Err(Error::Protocol(m)),
        }
    }

    /// Reads until a message satisfies `pred`, skipping the rest.
    pub fn recv_until<F: FnMut(&Message) -> bool>(&mut self, mut pred: F) -> Result<Message> {
        loop {
            match self.recv()? {
                Some(m) if pred(&m) => return Ok(m),
                Some(_) => {}
                None => return Err(Error::Protocol("server closed the connection".into())),
            }
        }
    }

    pub fn set_read_timeout(&self, t: Option<Duration>) -> Result<()> {
        self.reader.get_ref().set_read_timeout(t)?;
        Ok(())
    }

    /// Performs the HELLO exchange; a server ERROR becomes `Err`.
    pub fn handshake(&mut self, dof: usize, blendshape_dim: usize) -> Result<(usize, usize)> {
        let narrow = |v: usize, what: &str| {
            u8::try_from(v).map_err(|_| Error::Protocol(format!("{what} {v} does not fit the handshake")))
        };
        self.send(&Message::Hello {
            proto_version: PROTO_VERSION,
            dof: narrow(dof, "dof")?,
            blendshape_dim: narrow(blendshape_dim, "blendshape_dim")?,
        })?;
        match self.recv_until(|m| matches!(m, Message::Hello { .. } | Message::Error { .. }))? {
            Message::Hello {
                dof, blendshape_dim, ..
            } => Ok((dof as usize, blendshape_dim as usize)),
            Message::Error { code, message } => {
                Err(Error::Protocol(format!("handshake refused ({code}): {message}")))
            }
            _ => unreachable!("filtered above"),
        }
    }

    pub fn send_frame(&mut self, timestamp_us: u64, values: &[f32]) -> Result<()> {
        self.send(&Message::BlendshapeFrame {
            timestamp_us,
            values: values.to_vec(),
        })
    }

    /// Splits off a second handle for reading on another thread.
    fn split(self) -> (BufReader<TcpStream>, TcpStream) {
        (self.reader, self.writer)
    }
}

/// Sleeps until `deadline`; returns immediately if it has passed.
fn sleep_until(deadline: Instant) {
    let now = Instant::now();
    if deadline > now {
        thread::sleep(deadline - now);
    }
}

/// Nominal wall time to stream `frames` at `rate_hz`.
pub fn replay_duration(frames: usize, rate_hz: f64) -> Duration {
    Duration::from_secs_f64(frames as f64 / rate_hz)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub frames_sent: usize,
    pub elapsed_s: f64,
    pub commands_received: u64,
    pub errors_received: u64,
}

/// Streams every frame of a dataset file to a server in file order.
pub fn replay_file(path: impl AsRef<Path>, addr: impl ToSocketAddrs, rate_hz: f64) -> Result<ReplayReport> {
    let data = read_dataset(path)?;
    let first = data
        .first()
        .ok_or_else(|| Error::InvalidInput("dataset has no frames".into()))?;
    let dof = first.motor.dof();
    let frames: Vec<Vec<f32>> = data
        .iter()
        .flat_map(|s| (0..s.len()).map(move |t| s.blendshape.frame(t).to_vec()))
        .collect();
    replay_frames(&frames, dof, addr, rate_hz)
}

/// Streams `frames` at a fixed rate with absolute deadlines, counting what
/// comes back.
pub fn replay_frames(
    frames: &[Vec<f32>],
    dof: usize,
    addr: impl ToSocketAddrs,
    rate_hz: f64,
) -> Result<ReplayReport> {
    if !(rate_hz.is_finite() && rate_hz > 0.0) {
        return Err(Error::InvalidConfig(format!("replay rate {rate_hz} Hz must be positive")));
    }
    let dim = frames
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::InvalidInput("nothing to replay".into()))?;
    let mut client = Client::connect(addr)?;
    client.handshake(dof, dim)?;
    let (mut reader, mut writer) = client.split();
    let commands = Arc::new(AtomicU64::new(0));
    let errors = Arc::new(AtomicU64::new(0));
    let counter = {
        let (commands, errors) = (Arc::clone(&commands), Arc::clone(&errors));
        thread::spawn(move || {
            while let Ok(Some(m)) = read_message(&mut reader) {
                match m {
                    Message::MotorCommand { .. } => {
                        commands.fetch_add(1, Ordering::Relaxed);
                    }
                    Message::Error { code, message } => {
                        log::warn!("server error {code}: {message}");
                        errors.fetch_add(1, Ordering::Relaxed);
                    }
                    _ => {}
                }
            }
        })
    };
    let period = Duration::from_secs_f64(1.0 / rate_hz);
    let start = Instant::now();
    for (k, values) in frames.iter().enumerate() {
        sleep_until(start + period * k as u32);
        let msg = Message::BlendshapeFrame {
            timestamp_us: (k as f64 * 1e6 / rate_hz) as u64,
            values: values.clone(),
        };
        write_message(&mut writer, &msg)?;
        writer.flush()?;
    }
    // The last frame is due one period after it was sent.
    sleep_until(start + period * frames.len() as u32);
    let elapsed_s = start.elapsed().as_secs_f64();
    let _ = writer.shutdown(Shutdown::Both);
    let _ = counter.join();
    Ok(ReplayReport {
        frames_sent: frames.len(),
        elapsed_s,
        commands_received: commands.load(Ordering::Relaxed),
        errors_received: errors.load(Ordering::Relaxed),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub duration_s: f64,
    pub warmup_s: f64,
    pub input_hz: f64,
    pub server: ServerConfig,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            duration_s: 10.0,
            warmup_s: 2.0,
            input_hz: 60.0,
            server: ServerConfig {
                port: 0,
                ws_port: None,
                ..ServerConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    /// Ingest→publish latency inside the server.
    pub latency_p50_ms: f64,
    pub latency_p95_ms: f64,
    pub cycle_p50_ms: f64,
    /// Publish rate seen by the client over the measurement window.
    pub publish_hz: f64,
    pub server_publish_hz: f64,
    pub inference_hz: f64,
    pub frames_sent: u64,
    pub frames_dropped: u64,
    pub commands_received: usize,
    pub duration_s: f64,
}

/// Deterministic smooth test signal inside `[0, 1]`.
pub fn bench_frame(dim: usize, t: f64) -> Vec<f32> {
    (0..dim)
        .map(|j| {
            let phase = j as f64 / dim as f64;
            (0.3 + 0.25 * (std::f64::consts::TAU * (0.4 * t + phase)).sin()) as f32
        })
        .collect()
}

/// Runs an in-process server on a free port, drives it with a steady frame
/// stream and measures latency and output rate after a warm-up.
pub fn bench(policy: Policy, cfg: &BenchConfig) -> Result<BenchReport> {
    if !(cfg.duration_s > 0.0 && cfg.input_hz > 0.0 && cfg.warmup_s >= 0.0) {
        return Err(Error::InvalidConfig("bench durations and rates must be positive".into()));
    }
    let (dof, dim) = (policy.dof(), policy.blendshape_dim());
    let server = start(policy, cfg.server.clone())?;
    let mut client = Client::connect(server.tcp_addr())?;
    client.handshake(dof, dim)?;
    let (mut reader, mut writer) = client.split();

    let stop = Arc::new(AtomicBool::new(false));
    let sent = Arc::new(AtomicU64::new(0));
    let sender = {
        let (stop, sent) = (Arc::clone(&stop), Arc::clone(&sent));
        let period = Duration::from_secs_f64(1.0 / cfg.input_hz);
        thread::spawn(move || {
            let start = Instant::now();
            let mut k = 0u32;
            while !stop.load(Ordering::Relaxed) {
                sleep_until(start + period * k);
                let t = period.as_secs_f64() * f64::from(k);
                let msg = Message::BlendshapeFrame {
                    timestamp_us: (t * 1e6) as u64,
                    values: bench_frame(dim, t),
                };
                if write_message(&mut writer, &msg).and_then(|_| writer.flush()).is_err() {
                    break;
                }
                sent.fetch_add(1, Ordering::Relaxed);
                k += 1;
            }
            let _ = writer.shutdown(Shutdown::Both);
        })
    };

    let warmup = Duration::from_secs_f64(cfg.warmup_s);
    let window = Duration::from_secs_f64(cfg.duration_s);
    let mut measuring_since: Option<Instant> = None;
    let mut first_command: Option<Instant> = None;
    let mut arrivals = Vec::new();
    let outcome = loop {
        let msg = match read_message(&mut reader) {
            Ok(Some(m)) => m,
            Ok(None) => break Err(Error::Protocol("server closed during bench".into())),
            Err(e) => break Err(Error::Protocol(e.to_string())),
        };
        if !matches!(msg, Message::MotorCommand { .. }) {
            continue;
        }
        let now = Instant::now();
        let first = *first_command.get_or_insert(now);
        match measuring_since {
            None if now.duration_since(first) >= warmup => {
                server.reset_stats();
                measuring_since = Some(now);
            }
            Some(since) => {
                arrivals.push(now);
                if now.duration_since(since) >= window {
                    break Ok(());
                }
            }
            None => {}
        }
    };
    let stats = server.stats();
    stop.store(true, Ordering::Relaxed);
    let _ = sender.join();
    drop(server);
    outcome?;
    Ok(BenchReport {
        latency_p50_ms: stats.latency_p50_ms,
        latency_p95_ms: stats.latency_p95_ms,
        cycle_p50_ms: stats.cycle_p50_ms,
        publish_hz: rate_hz(&arrivals),
        server_publish_hz: stats.publish_hz,
        inference_hz: stats.inference_hz,
        frames_sent: sent.load(Ordering::Relaxed),
        frames_dropped: stats.frames_dropped,
        commands_received: arrivals.len(),
        duration_s: match (arrivals.first(), arrivals.last()) {
            (Some(a), Some(b)) => b.duration_since(*a).as_secs_f64(),
            _ => 0.0,
        },
    })
}
