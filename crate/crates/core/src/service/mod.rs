//! Real-time retargeting service: ingest, sliding window, deterministic
//! sampling, fixed-rate publication.

mod channel;
mod client;
mod engine;
pub mod protocol;
mod publish;
mod server;
mod stats;
mod window;

pub use channel::{DropOldestQueue, Hub, LatestSlot, SlotCounts};
pub use client::{
    bench, bench_frame, replay_duration, replay_file, replay_frames, BenchConfig, BenchReport,
    Client, ReplayReport,
};
pub use engine::{CycleOutput, Ingestor, Pending, Policy, Retargeter};
pub use publish::{PublishState, Published};
pub use server::{start, ServerConfig, ServerHandle};
pub use stats::{percentile, rate_hz, LoopStats, StatsCollector, STATS_WINDOW};
pub use window::{PadPolicy, WindowBuffer};
