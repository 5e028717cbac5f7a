use std::collections::VecDeque;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

/// Number of recent samples behind the rolling percentiles and rates.
pub const STATS_WINDOW: usize = 600;

/// Snapshot published on the STATS channel.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LoopStats {
    /// Ingest→publish latency, milliseconds.
    pub latency_p50_ms: f64,
    pub latency_p95_ms: f64,
    /// Sampler wall time per control cycle, milliseconds.
    pub cycle_p50_ms: f64,
    pub publish_hz: f64,
    pub inference_hz: f64,
    pub frames_in: u64,
    pub frames_dropped: u64,
    pub cycles: u64,
    pub published: u64,
    pub errors: u64,
    pub subscribers: usize,
}

/// Rolling collector behind [`LoopStats`].
#[derive(Debug, Clone)]
pub struct StatsCollector {
    latencies: VecDeque<f64>,
    cycle_times: VecDeque<f64>,
    publish_ticks: VecDeque<Instant>,
    cycle_ends: VecDeque<Instant>,
    pub frames_in: u64,
    pub frames_dropped: u64,
    pub cycles: u64,
    pub published: u64,
    pub errors: u64,
}

impl Default for StatsCollector {
    fn default() -> Self {
        Self {
            latencies: VecDeque::with_capacity(STATS_WINDOW),
            cycle_times: VecDeque::with_capacity(STATS_WINDOW),
            publish_ticks: VecDeque::with_capacity(STATS_WINDOW),
            cycle_ends: VecDeque::with_capacity(STATS_WINDOW),
            frames_in: 0,
            frames_dropped: 0,
            cycles: 0,
            published: 0,
            errors: 0,
        }
    }
}

fn push_bounded<T>(q: &mut VecDeque<T>, v: T) {
    if q.len() == STATS_WINDOW {
        q.pop_front();
    }
    q.push_back(v);
}

/// Nearest-rank percentile of unsorted samples; 0 when empty.
pub fn percentile(samples: impl IntoIterator<Item = f64>, p: f64) -> f64 {
    let mut v: Vec<f64> = samples.into_iter().collect();
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * v.len() as f64).ceil().max(1.0) as usize;
    v[rank.min(v.len()) - 1]
}

/// Events per second over a run of timestamps.
pub fn rate_hz(ticks: &[Instant]) -> f64 {
    match (ticks.first(), ticks.last()) {
        (Some(a), Some(b)) if ticks.len() > 1 && b > a => {
            (ticks.len() - 1) as f64 / b.duration_since(*a).as_secs_f64()
        }
        _ => 0.0,
    }
}

impl StatsCollector {
    pub fn record_latency(&mut self, latency: Duration) {
        push_bounded(&mut self.latencies, latency.as_secs_f64() * 1e3);
    }

    pub fn record_cycle(&mut self, took: Duration, end: Instant) {
        self.cycles += 1;
        push_bounded(&mut self.cycle_times, took.as_secs_f64() * 1e3);
        push_bounded(&mut self.cycle_ends, end);
    }

    pub fn record_publish(&mut self, at: Instant) {
        self.published += 1;
        push_bounded(&mut self.publish_ticks, at);
    }

    pub fn snapshot(&self, subscribers: usize) -> LoopStats {
        let ticks: Vec<Instant> = self.publish_ticks.iter().copied().collect();
        let ends: Vec<Instant> = self.cycle_ends.iter().copied().collect();
        LoopStats {
            latency_p50_ms: percentile(self.latencies.iter().copied(), 50.0),
            latency_p95_ms: percentile(self.latencies.iter().copied(), 95.0),
            cycle_p50_ms: percentile(self.cycle_times.iter().copied(), 50.0),
            publish_hz: rate_hz(&ticks),
            inference_hz: rate_hz(&ends),
            frames_in: self.frames_in,
            frames_dropped: self.frames_dropped,
            cycles: self.cycles,
            published: self.published,
            errors: self.errors,
            subscribers,
        }
    }
}
