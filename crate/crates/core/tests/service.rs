use std::net::TcpStream;
use std::thread;
use std::time::{Duration, Instant};

use exface::denoiser::{Model, ModelConfig, ModelKind};
use exface::diffusion::ScheduleConfig;
use exface::face::BlendshapeFrame;
use exface::service::protocol::{codes, Message, WsMessage};
use exface::service::{
    replay_duration, replay_file, start, Client, PadPolicy, Policy, Retargeter, ServerConfig,
};
use exface::trainer::{write_dataset, Checkpoint, DataSource, TrainingSample};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const DOF: usize = 4;
const DIM: usize = 7;

fn checkpoint() -> Checkpoint {
    let model = ModelConfig {
        dof: DOF,
        blendshape_dim: DIM,
        seq_len: 8,
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        d_ff: 16,
        mlp_hidden: 8,
        final_norm: false,
    };
    let m = Model::new(ModelKind::Exface, model).unwrap();
    Checkpoint {
        kind: ModelKind::Exface,
        model,
        robot: "test".into(),
        schedule: ScheduleConfig::default(),
        training_steps: 0,
        plant_seed: None,
        params: m.init(&mut ChaCha8Rng::seed_from_u64(5)),
    }
}

fn policy() -> Policy {
    Policy::from_checkpoint(&checkpoint(), 8, 0).unwrap()
}

/// A model whose cycle takes several milliseconds, so 1 kHz input always
/// outpaces inference.
fn slow_policy() -> Policy {
    let mut ckpt = checkpoint();
    ckpt.model = ModelConfig {
        seq_len: 120,
        d_model: 64,
        n_layers: 2,
        n_heads: 4,
        d_ff: 128,
        ..ckpt.model
    };
    ckpt.params = Model::new(ModelKind::Exface, ckpt.model)
        .unwrap()
        .init(&mut ChaCha8Rng::seed_from_u64(5));
    Policy::from_checkpoint(&ckpt, 8, 0).unwrap()
}

fn local(ws: bool) -> ServerConfig {
    ServerConfig {
        port: 0,
        ws_port: ws.then_some(0),
        ..ServerConfig::default()
    }
}

fn connected(server: &exface::service::ServerHandle) -> Client {
    let mut c = Client::connect(server.tcp_addr()).unwrap();
    c.set_read_timeout(Some(Duration::from_secs(5))).unwrap();
    assert_eq!(c.handshake(DOF, DIM).unwrap(), (DOF, DIM));
    c
}

#[test]
fn handshake_mismatch_is_refused() {
    let server = start(policy(), local(false)).unwrap();
    let mut c = Client::connect(server.tcp_addr()).unwrap();
    c.set_read_timeout(Some(Duration::from_secs(5))).unwrap();
    let err = c.handshake(DOF + 1, DIM).unwrap_err();
    assert!(err.to_string().contains("handshake refused"), "{err}");
}

#[test]
fn wrong_dimension_frame_gets_error_and_connection_survives() {
    let server = start(policy(), local(false)).unwrap();
    let mut c = connected(&server);
    c.send_frame(1, &vec![0.2; DIM - 1]).unwrap();
    let reply = c.recv_until(|m| matches!(m, Message::Error { .. })).unwrap();
    assert!(matches!(reply, Message::Error { code, .. } if code == codes::DIMENSION));
    assert_eq!(server.slot_counts().offered, 0);
    c.send_frame(2, &vec![0.2; DIM]).unwrap();
    let cmd = c.recv_until(|m| matches!(m, Message::MotorCommand { .. })).unwrap();
    match cmd {
        Message::MotorCommand { timestamp_us, values } => {
            assert_eq!(timestamp_us, 2);
            assert_eq!(values.len(), DOF);
            assert!(values.iter().all(|v| (0.0..=1.0).contains(v)));
        }
        _ => unreachable!(),
    }
    assert_eq!(server.slot_counts().offered, 1);
    c.send(&Message::MotorCommand {
        timestamp_us: 0,
        values: vec![0.0; DOF],
    })
    .unwrap();
    let reply = c.recv_until(|m| matches!(m, Message::Error { .. })).unwrap();
    assert!(matches!(reply, Message::Error { code, .. } if code == codes::UNSUPPORTED));
}

#[test]
fn stats_request_returns_json() {
    let server = start(policy(), local(false)).unwrap();
    let mut c = connected(&server);
    c.send(&Message::Stats(Vec::new())).unwrap();
    let Message::Stats(body) = c.recv_until(|m| matches!(m, Message::Stats(_))).unwrap() else {
        unreachable!()
    };
    let v: serde_json::Value = serde_json::from_slice(&body).unwrap();
    for key in ["latency_p95_ms", "publish_hz", "frames_dropped"] {
        assert!(v.get(key).is_some(), "missing {key}");
    }
}

#[test]
fn published_stream_is_bounded_monotone_and_steady() {
    let server = start(policy(), local(false)).unwrap();
    let mut c = connected(&server);
    let start_t = Instant::now();
    let mut k = 0u64;
    let mut last_ts = 0;
    let mut arrivals = Vec::new();
    while start_t.elapsed() < Duration::from_secs(3) {
        c.send_frame(k * 16_667, &exface::service::bench_frame(DIM, k as f64 / 60.0))
            .unwrap();
        k += 1;
        if let Message::MotorCommand { timestamp_us, values } =
            c.recv_until(|m| matches!(m, Message::MotorCommand { .. })).unwrap()
        {
            assert!(timestamp_us >= last_ts);
            last_ts = timestamp_us;
            assert!(values.iter().all(|v| (0.0..=1.0).contains(v)));
            arrivals.push(Instant::now());
        }
    }
    let tail = &arrivals[arrivals.len() / 3..];
    let hz = exface::service::rate_hz(tail);
    assert!((hz - 60.0).abs() <= 1.0, "publish rate {hz}");
}

#[test]
fn flood_keeps_one_pending_frame_and_counts_drops() {
    let server = start(slow_policy(), local(false)).unwrap();
    let mut c = connected(&server);
    let frame = vec![0.4f32; DIM];
    let t0 = Instant::now();
    let sent = 2000u64;
    for k in 0..sent {
        let due = t0 + Duration::from_micros(k * 1000);
        if let Some(wait) = due.checked_duration_since(Instant::now()) {
            thread::sleep(wait);
        }
        c.send_frame(k, &frame).unwrap();
        assert!(server.slot_counts().depth <= 1);
    }
    let deadline = Instant::now() + Duration::from_secs(5);
    while server.slot_counts().offered < sent && Instant::now() < deadline {
        thread::sleep(Duration::from_millis(10));
    }
    let c = server.slot_counts();
    assert_eq!(c.offered, sent);
    assert!(c.depth <= 1);
    assert_eq!(c.offered, c.taken + c.replaced + c.depth as u64);
    assert!(c.replaced > 0, "a flood should displace frames");
    assert_eq!(server.stats().frames_dropped, c.replaced);
}

#[test]
fn websocket_mirror_round_trip() {
    let server = start(policy(), local(true)).unwrap();
    let url = format!("ws://{}", server.ws_addr().unwrap());
    let (mut ws, _) = tungstenite::connect(url).unwrap();
    if let tungstenite::stream::MaybeTlsStream::Plain(s) = ws.get_mut() {
        s.set_read_timeout(Some(Duration::from_secs(5))).unwrap();
    }
    let mut next = || -> WsMessage {
        loop {
            if let tungstenite::Message::Text(t) = ws.read().unwrap() {
                return serde_json::from_str(&t).unwrap();
            }
        }
    };
    assert_eq!(
        next(),
        WsMessage::Hello {
            proto_version: 1,
            dof: DOF,
            blendshape_dim: DIM
        }
    );
    drop(next);
    let send = |ws: &mut tungstenite::WebSocket<_>, m: &WsMessage| {
        ws.send(tungstenite::Message::text(serde_json::to_string(m).unwrap()))
            .unwrap()
    };
    send(&mut ws, &WsMessage::BlendshapeFrame {
        t_us: 9,
        values: vec![0.5; DIM - 2],
    });
    send(&mut ws, &WsMessage::BlendshapeFrame {
        t_us: 10,
        values: vec![0.5; DIM],
    });
    let (mut saw_error, mut saw_frame, mut saw_motor) = (false, false, false);
    let deadline = Instant::now() + Duration::from_secs(5);
    while !(saw_error && saw_frame && saw_motor) && Instant::now() < deadline {
        let msg = match ws.read().unwrap() {
            tungstenite::Message::Text(t) => serde_json::from_str::<WsMessage>(&t).unwrap(),
            _ => continue,
        };
        match msg {
            WsMessage::Error { code, .. } => saw_error |= code == codes::DIMENSION,
            WsMessage::BlendshapeFrame { t_us, values } => {
                saw_frame |= t_us == 10 && values.len() == DIM
            }
            WsMessage::MotorCommand { t_us, values } => {
                saw_motor |= t_us == 10 && values.len() == DOF
            }
            _ => {}
        }
    }
    assert!(saw_error && saw_frame && saw_motor);
}

#[test]
fn replay_streams_a_dataset_at_the_requested_rate() {
    let server = start(policy(), local(false)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("replay.jsonl");
    let motor = ndarray::Array2::from_elem((60, DOF), 0.5f32);
    let bs = ndarray::Array2::from_shape_fn((60, DIM), |(i, j)| ((i + j) % 10) as f32 / 10.0);
    let sample = TrainingSample::new(
        exface::face::MotorSequence::clean(motor).unwrap(),
        exface::face::BlendshapeSequence::new(bs, 60.0).unwrap(),
        DataSource::External,
        0,
    )
    .unwrap();
    write_dataset(&path, &[sample.clone(), sample]).unwrap();
    let rate = 240.0;
    let report = replay_file(&path, server.tcp_addr(), rate).unwrap();
    assert_eq!(report.frames_sent, 120);
    let nominal = replay_duration(120, rate).as_secs_f64();
    assert!((report.elapsed_s - nominal).abs() < 0.1, "{report:?}");
    assert!(report.commands_received > 0);
    assert_eq!(report.errors_received, 0);
    assert!((replay_duration(2000, 60.0).as_secs_f64() - 33.333).abs() < 1e-3);
}

#[test]
fn steady_input_gives_steady_commands() {
    let mut r = Retargeter::new(policy(), PadPolicy::RepeatEarliest);
    let frame = BlendshapeFrame::new(vec![0.35; DIM]).unwrap();
    let mut prev: Option<Vec<f32>> = None;
    for k in 0..20 {
        let out = r.control_cycle(Some(frame.clone())).unwrap().command.into_inner();
        if let (Some(p), true) = (&prev, k >= 8) {
            let jitter = p.iter().zip(&out).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
            assert!(jitter <= 0.01, "jitter {jitter}");
        }
        prev = Some(out);
    }
    let again = r.control_cycle(None).unwrap().command.into_inner();
    assert_eq!(Some(again), prev);
}

#[test]
fn server_shuts_down_with_open_connections() {
    let server = start(policy(), local(true)).unwrap();
    let _tcp = connected(&server);
    let _raw = TcpStream::connect(server.ws_addr().unwrap()).unwrap();
    let t = Instant::now();
    server.shutdown();
    assert!(t.elapsed() < Duration::from_secs(3));
}
