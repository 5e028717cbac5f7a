use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use exface::denoiser::ModelKind;
use exface::eval::write_curve_csv;
use exface::face::RobotConfig;
use exface::pipeline::{OutputLayout, RunConfig, RunContext, Stage0Output};
use exface::service::{self, BenchConfig, PadPolicy, Policy, ServerConfig};
use exface::trainer::{load_checkpoint, read_dataset, write_dataset, BootstrapMode, Checkpoint};

#[derive(Parser)]
#[command(name = "exface", version, about = "Blendshape-to-motor retargeting: train, evaluate, serve")]
struct Cli {
    #[command(flatten)]
    run: RunArgs,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct RunArgs {
    /// JSON run configuration; flags below override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Starting point when no config file is given: full, desk, desk-small.
    #[arg(long, global = true, default_value = "full")]
    preset: String,
    /// Shrinks stage-0 pairs and bootstrap budgets.
    #[arg(long, global = true)]
    scale: Option<f64>,
    #[arg(long, global = true, default_value = "runs/latest")]
    out_dir: PathBuf,
    /// Robot preset name or JSON path.
    #[arg(long, global = true)]
    robot: Option<String>,
    #[arg(long, global = true)]
    plant_seed: Option<u64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build the static dataset and train the first checkpoint.
    TrainStage0,
    /// Self-improvement rounds on top of stage 0.
    Bootstrap {
        #[arg(long)]
        iters: Option<usize>,
        /// Ablation: random-keyframe interpolation instead of human-driven data.
        #[arg(long)]
        interp_data: bool,
    },
    /// Train the regression baselines on the bootstrap dataset.
    TrainBaselines,
    /// Compare all available checkpoints against the random baseline.
    Eval,
    /// Run the streaming server.
    Serve(ServeArgs),
    /// Stream a dataset file to a running server.
    Replay {
        #[arg(long)]
        file: PathBuf,
        #[arg(long, default_value = "127.0.0.1:7400")]
        target: String,
        #[arg(long, default_value_t = 60.0)]
        rate: f64,
    },
    /// Measure cycle latency and publish rate against an in-process server.
    Bench {
        /// Checkpoint to time; a freshly initialised default model otherwise.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        sample_steps: usize,
        #[arg(long, default_value_t = 60.0)]
        publish_hz: f64,
        #[arg(long, default_value_t = 10.0)]
        duration: f64,
        #[arg(long, default_value_t = 2.0)]
        warmup: f64,
    },
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Defaults to the robot recorded in the checkpoint.
    #[arg(long)]
    robot_config: Option<String>,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    #[arg(long, default_value_t = 7400)]
    port: u16,
    /// WebSocket mirror port; 0 picks a free one.
    #[arg(long, default_value_t = 7401)]
    ws_port: u16,
    #[arg(long)]
    no_ws: bool,
    #[arg(long, default_value_t = 8)]
    sample_steps: usize,
    /// Newest-value weight of the output smoother, in (0, 1].
    #[arg(long)]
    smooth: Option<f32>,
    #[arg(long, default_value_t = 60.0)]
    publish_hz: f64,
    /// Window padding before enough history exists.
    #[arg(long, value_parser = ["repeat-earliest", "neutral"], default_value = "repeat-earliest")]
    pad: String,
}

/// Failure that should map to exit code 2.
#[derive(Debug)]
struct ConfigError(String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn is_config_error(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        c.is::<ConfigError>()
            || matches!(
                c.downcast_ref::<exface::Error>(),
                Some(
                    exface::Error::InvalidConfig(_)
                        | exface::Error::DimensionMismatch { .. }
                )
            )
    })
}

fn load_config(args: &RunArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::preset(&args.preset)?,
    };
    if let Some(s) = args.scale {
        cfg.scale = s;
    }
    if let Some(r) = &args.robot {
        cfg.robot = r.clone();
    }
    if let Some(seed) = args.plant_seed {
        cfg.seeds.plant = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?)
        .with_context(|| format!("writing {}", path.display()))
}

fn cmd_train_stage0(ctx: &RunContext, out: &OutputLayout) -> Result<()> {
    let t0 = Instant::now();
    let s0 = ctx.run_stage0()?;
    fs::create_dir_all(out.stage0_checkpoint())?;
    exface::trainer::save_checkpoint(out.stage0_checkpoint(), &s0.checkpoint)?;
    write_dataset(out.stage0_dataset(), &s0.dataset)?;
    let report = ctx.evaluate(&[&s0.checkpoint])?;
    let frames: usize = s0.dataset.iter().map(|s| s.len()).sum();
    let exface = report.row("exface").context("stage-0 row missing from report")?;
    let metrics = json!({
        "frames": frames,
        "sequences": s0.dataset.len(),
        "steps": s0.checkpoint.training_steps,
        "loss_first": s0.losses.first(),
        "loss_last": s0.losses.last(),
        "motor_distance": exface.motor_distance,
        "blendshape_distance": exface.blendshape_distance,
        "checkpoint_id": s0.checkpoint.id(),
        "seconds": t0.elapsed().as_secs_f64(),
    });
    write_json(&out.root().join("stage0_metrics.json"), &metrics)?;
    println!("{}", serde_json::to_string_pretty(&metrics)?);
    Ok(())
}

fn load_stage0(ctx: &RunContext, out: &OutputLayout) -> Result<Stage0Output> {
    if !out.stage0_checkpoint().join("manifest.json").exists() {
        log::info!("no stage-0 checkpoint under {}, training one", out.root().display());
        cmd_train_stage0(ctx, out)?;
    }
    let checkpoint = load_checkpoint(out.stage0_checkpoint(), Some(&ctx.robot))?;
    let dataset = read_dataset(out.stage0_dataset())?;
    Ok(Stage0Output {
        checkpoint,
        dataset,
        losses: Vec::new(),
    })
}

fn cmd_bootstrap(ctx: &RunContext, out: &OutputLayout, iters: usize) -> Result<()> {
    let stage0 = load_stage0(ctx, out)?;
    let result = ctx.run_bootstrap(stage0, iters)?;
    let dir = out.save_checkpoint(&result.checkpoint)?;
    write_dataset(out.dataset(), &result.dataset)?;
    write_curve_csv(out.curve(), &result.history)?;
    let metrics = json!({
        "mode": ctx.cfg.mode,
        "iterations": iters,
        "history": result.history,
        "checkpoint": dir,
        "checkpoint_id": result.checkpoint.id(),
    });
    write_json(&out.root().join("bootstrap_metrics.json"), &metrics)?;
    print!("{}", exface::eval::curve_csv(&result.history));
    Ok(())
}

fn cmd_train_baselines(ctx: &RunContext, out: &OutputLayout) -> Result<()> {
    let path = out.dataset();
    if !path.exists() {
        return Err(ConfigError(format!(
            "{} not found; run `bootstrap` first",
            path.display()
        ))
        .into());
    }
    let dataset = read_dataset(&path)?;
    let mut summary = Vec::new();
    for kind in [ModelKind::Transformer, ModelKind::Mlp] {
        let ckpt = ctx.train_baseline(kind, &dataset)?;
        let dir = out.save_checkpoint(&ckpt)?;
        summary.push(json!({"kind": kind, "steps": ckpt.training_steps, "checkpoint": dir}));
    }
    let metrics = serde_json::Value::Array(summary);
    write_json(&out.root().join("baselines.json"), &metrics)?;
    println!("{}", serde_json::to_string_pretty(&metrics)?);
    Ok(())
}

fn cmd_eval(ctx: &RunContext, out: &OutputLayout) -> Result<()> {
    let mut ckpts: Vec<Checkpoint> = Vec::new();
    for kind in [ModelKind::Mlp, ModelKind::Transformer, ModelKind::Exface] {
        let dir = out.checkpoint(kind);
        if dir.join("manifest.json").exists() {
            ckpts.push(load_checkpoint(&dir, Some(&ctx.robot))?);
        }
    }
    if ckpts.is_empty() {
        return Err(ConfigError(format!("no checkpoints under {}", out.root().display())).into());
    }
    let refs: Vec<&Checkpoint> = ckpts.iter().collect();
    let report = ctx.evaluate(&refs)?;
    fs::create_dir_all(out.root())?;
    fs::write(out.report_json(), report.to_json()?)?;
    fs::write(out.report_table(), report.to_table())?;
    print!("{}", report.to_table());
    Ok(())
}

fn cmd_serve(args: ServeArgs) -> Result<()> {
    let robot_spec = args.robot_config.clone();
    let manifest = exface::trainer::read_manifest(&args.checkpoint)?;
    let robot = RobotConfig::resolve(robot_spec.as_deref().unwrap_or(&manifest.robot))
        .map_err(|e| ConfigError(format!("robot config: {e}")))?;
    let ckpt = load_checkpoint(&args.checkpoint, Some(&robot))
        .map_err(|e| ConfigError(format!("{}: {e}", args.checkpoint.display())))?;
    let policy = Policy::from_checkpoint(&ckpt, args.sample_steps, 0)?;
    let cfg = ServerConfig {
        host: args.host,
        port: args.port,
        ws_port: (!args.no_ws).then_some(args.ws_port),
        publish_hz: args.publish_hz,
        smooth: args.smooth,
        pad: match args.pad.as_str() {
            "neutral" => PadPolicy::Neutral,
            _ => PadPolicy::RepeatEarliest,
        },
        ..ServerConfig::default()
    };
    let handle = service::start(policy, cfg)?;
    println!(
        "{}",
        json!({
            "tcp": handle.tcp_addr().to_string(),
            "ws": handle.ws_addr().map(|a| a.to_string()),
            "robot": robot.name,
            "checkpoint_id": ckpt.id(),
        })
    );
    handle.wait();
    Ok(())
}

fn cmd_bench(
    cfg: &RunConfig,
    out: &OutputLayout,
    checkpoint: Option<PathBuf>,
    sample_steps: usize,
    publish_hz: f64,
    duration: f64,
    warmup: f64,
) -> Result<()> {
    let ckpt = match checkpoint {
        Some(dir) => load_checkpoint(dir, None)?,
        None => {
            let robot = cfg.robot_config()?;
            let model = exface::denoiser::ModelConfig::new(robot.dof, robot.blendshape_dim);
            Checkpoint::untrained(ModelKind::Exface, model, &robot.name, cfg.schedule, cfg.seeds.init)?
        }
    };
    let policy = Policy::from_checkpoint(&ckpt, sample_steps, 0)?;
    let mut bench_cfg = BenchConfig {
        duration_s: duration,
        warmup_s: warmup,
        ..BenchConfig::default()
    };
    bench_cfg.server.publish_hz = publish_hz;
    let report = service::bench(policy, &bench_cfg)?;
    let value = json!({
        "model": ckpt.model,
        "sample_steps": sample_steps,
        "report": report,
    });
    write_json(&out.root().join("bench.json"), &value)?;
    println!(
        "latency p50 {:.1} ms  p95 {:.1} ms  publish {:.2} Hz  inference {:.1} Hz  dropped {}",
        report.latency_p50_ms,
        report.latency_p95_ms,
        report.publish_hz,
        report.inference_hz,
        report.frames_dropped
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let out = OutputLayout::new(&cli.run.out_dir);
    match cli.cmd {
        Cmd::Serve(args) => return cmd_serve(args),
        Cmd::Replay { file, target, rate } => {
            let report = service::replay_file(&file, target.as_str(), rate)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            return Ok(());
        }
        _ => {}
    }
    let mut cfg = load_config(&cli.run)?;
    if let Cmd::Bench {
        checkpoint,
        sample_steps,
        publish_hz,
        duration,
        warmup,
    } = cli.cmd
    {
        return cmd_bench(&cfg, &out, checkpoint, sample_steps, publish_hz, duration, warmup);
    }
    let iters = match &cli.cmd {
        Cmd::Bootstrap { iters, interp_data } => {
            if *interp_data {
                cfg.mode = BootstrapMode::Interpolation;
            }
            iters.unwrap_or(cfg.iterations)
        }
        _ => cfg.iterations,
    };
    let ctx = RunContext::new(cfg)?;
    out.save_config(&ctx.cfg)?;
    match cli.cmd {
        Cmd::TrainStage0 => cmd_train_stage0(&ctx, &out),
        Cmd::Bootstrap { .. } => cmd_bootstrap(&ctx, &out, iters),
        Cmd::TrainBaselines => cmd_train_baselines(&ctx, &out),
        Cmd::Eval => cmd_eval(&ctx, &out),
        Cmd::Serve(_) | Cmd::Replay { .. } | Cmd::Bench { .. } => {
            bail!("handled above")
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if is_config_error(&e) {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}
