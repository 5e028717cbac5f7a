use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Command, Output, Stdio};
use std::time::Duration;

use exface::service::protocol::Message;
use exface::service::Client;

const TINY: &str = r#"{
  "model": {"d_model": 8, "n_layers": 1, "n_heads": 2, "d_ff": 16, "mlp_hidden": 8},
  "train": {"stage0_epochs": 1, "finetune_epochs": 1, "batch_size": 4},
  "scale": 0.01,
  "validation_frames": 240
}"#;

fn exface(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_exface"))
        .args(args)
        .arg("--out-dir")
        .arg(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn with_config(dir: &Path, body: &str) -> String {
    let path = dir.join("run.json");
    std::fs::write(&path, body).unwrap();
    path.to_string_lossy().into_owned()
}

fn json(path: impl AsRef<Path>) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn training_pipeline_writes_its_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = with_config(dir.path(), TINY);

    let o = exface(&out, &["--config", &cfg, "train-stage0"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let m1 = json(out.join("stage0_metrics.json"));
    assert_eq!(m1["frames"], 6 * 120);
    assert!(out.join("stage0/manifest.json").exists());
    assert!(out.join("config.json").exists());

    let o = exface(&out, &["--config", &cfg, "train-stage0"]);
    assert!(o.status.success());
    let m2 = json(out.join("stage0_metrics.json"));
    for key in ["frames", "steps", "loss_last", "blendshape_distance", "checkpoint_id"] {
        assert_eq!(m1[key], m2[key], "{key} differs between identical runs");
    }

    let o = exface(&out, &["--config", &cfg, "bootstrap", "--iters", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let curve = std::fs::read_to_string(out.join("bootstrap_curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 1 + 3);

    let o = exface(&out, &["--config", &cfg, "train-baselines"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = exface(&out, &["--config", &cfg, "eval"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report = json(out.join("report.json"));
    let methods: Vec<&str> = report["rows"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["method"].as_str().unwrap())
        .collect();
    assert_eq!(methods, ["random", "mlp", "transformer", "exface"]);
    let table = String::from_utf8_lossy(&o.stdout);
    assert!(table.contains("0.0353"), "reference footer missing:\n{table}");
}

#[test]
fn scale_flag_shrinks_stage0() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = with_config(
        dir.path(),
        r#"{"model": {"d_model": 8, "n_layers": 1, "n_heads": 2, "d_ff": 16},
            "train": {"stage0_epochs": 0}, "validation_frames": 120}"#,
    );
    let o = exface(dir.path(), &["--config", &cfg, "--scale", "0.1", "train-stage0"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(json(dir.path().join("stage0_metrics.json"))["frames"], 7200);
}

#[test]
fn config_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = with_config(dir.path(), r#"{"scale": 3.0}"#);
    assert_eq!(exface(dir.path(), &["--config", &bad, "train-stage0"]).status.code(), Some(2));
    assert_eq!(exface(dir.path(), &["--preset", "huge", "eval"]).status.code(), Some(2));
    assert_eq!(exface(dir.path(), &["eval"]).status.code(), Some(2));
    assert_eq!(exface(dir.path(), &["bogus-command"]).status.code(), Some(2));
}

#[test]
fn runtime_failures_exit_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nothing.jsonl");
    let o = exface(
        dir.path(),
        &["replay", "--file", missing.to_str().unwrap(), "--target", "127.0.0.1:1"],
    );
    assert_eq!(o.status.code(), Some(3));
}

fn tiny_checkpoint(dir: &Path, robot: &str, dof: usize) -> std::path::PathBuf {
    let model = exface::denoiser::ModelConfig {
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        d_ff: 16,
        mlp_hidden: 8,
        seq_len: 8,
        ..exface::denoiser::ModelConfig::new(dof, 55)
    };
    let ckpt = exface::trainer::Checkpoint::untrained(
        exface::denoiser::ModelKind::Exface,
        model,
        robot,
        Default::default(),
        1,
    )
    .unwrap();
    let path = dir.join(robot);
    exface::trainer::save_checkpoint(&path, &ckpt).unwrap();
    path
}

#[test]
fn serve_refuses_a_robot_with_different_dof() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = tiny_checkpoint(dir.path(), "hobbs", 32);
    let o = exface(
        dir.path(),
        &["serve", "--checkpoint", ckpt.to_str().unwrap(), "--robot-config", "micheal", "--port", "0"],
    );
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn serve_answers_a_client() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = tiny_checkpoint(dir.path(), "hobbs", 32);
    let mut child = Command::new(env!("CARGO_BIN_EXE_exface"))
        .args(["serve", "--checkpoint", ckpt.to_str().unwrap(), "--port", "0", "--ws-port", "0"])
        .env("RUST_LOG", "warn")
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let info: serde_json::Value = serde_json::from_str(&line).unwrap();
    assert_eq!(info["robot"], "hobbs");
    let mut c = Client::connect(info["tcp"].as_str().unwrap()).unwrap();
    c.set_read_timeout(Some(Duration::from_secs(10))).unwrap();
    assert_eq!(c.handshake(32, 55).unwrap(), (32, 55));
    c.send_frame(42, &[0.2; 55]).unwrap();
    let cmd = c.recv_until(|m| matches!(m, Message::MotorCommand { .. }));
    child.kill().unwrap();
    let _ = child.wait();
    match cmd.unwrap() {
        Message::MotorCommand { timestamp_us, values } => {
            assert_eq!(timestamp_us, 42);
            assert_eq!(values.len(), 32);
        }
        _ => unreachable!(),
    }
}

#[test]
fn bench_reports_latency_and_rate() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = tiny_checkpoint(dir.path(), "micheal", 33);
    let o = exface(
        dir.path(),
        &["bench", "--checkpoint", ckpt.to_str().unwrap(), "--duration", "1", "--warmup", "0.3"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report = &json(dir.path().join("bench.json"))["report"];
    for key in ["latency_p50_ms", "latency_p95_ms", "publish_hz"] {
        assert!(report[key].as_f64().unwrap() > 0.0, "{key}");
    }
}
