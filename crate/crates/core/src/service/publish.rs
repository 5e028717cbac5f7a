//! Fixed-rate output shaping. Time is passed in explicitly (seconds since
//! an arbitrary origin) so the same inputs always give the same stream.

/// Output for one publish tick.
#[derive(Debug, Clone, PartialEq)]
pub struct Published {
    pub timestamp_us: u64,
    pub values: Vec<f32>,
    /// Set on the first tick that reflects a newly arrived command.
    pub new_command: bool,
}

/// Bounds on the interpolation span, in seconds.
const MIN_SPAN: f64 = 1e-3;
const MAX_SPAN: f64 = 1.0;

/// Turns irregular inference results into a steady command stream: each
/// new command is approached linearly from the current output over the
/// expected inference interval, optionally followed by an exponential
/// smoother.
#[derive(Debug, Clone)]
pub struct PublishState {
    from: Vec<f32>,
    to: Vec<f32>,
    start: f64,
    span: f64,
    /// Running estimate of the time between inference results.
    interval: Option<f64>,
    last_arrival: Option<f64>,
    source_ts: u64,
    last_ts: u64,
    smooth: Option<f32>,
    smoothed: Option<Vec<f32>>,
    output: Option<Vec<f32>>,
    fresh: bool,
}

impl PublishState {
    /// `smooth` is the weight of the newest value in the exponential
    /// smoother, in `(0, 1]`; `None` disables smoothing.
    pub fn new(smooth: Option<f32>) -> Self {
        Self {
            from: Vec::new(),
            to: Vec::new(),
            start: 0.0,
            span: MIN_SPAN,
            interval: None,
            last_arrival: None,
            source_ts: 0,
            last_ts: 0,
            smooth,
            smoothed: None,
            output: None,
            fresh: false,
        }
    }

    pub fn expected_interval(&self) -> Option<f64> {
        self.interval
    }

    /// Registers a command produced from a frame stamped `source_ts`.
    pub fn on_command(&mut self, command: &[f32], source_ts: u64, now: f64) {
        if let Some(prev) = self.last_arrival {
            let dt = (now - prev).max(0.0);
            self.interval = Some(match self.interval {
                Some(i) => 0.8 * i + 0.2 * dt,
                None => dt,
            });
        }
        self.last_arrival = Some(now);
        self.from = match &self.output {
            Some(current) if current.len() == command.len() => self.interpolated(now),
            _ => command.to_vec(),
        };
        self.to = command.to_vec();
        self.start = now;
        self.span = self.interval.unwrap_or(MIN_SPAN).clamp(MIN_SPAN, MAX_SPAN);
        self.source_ts = source_ts;
        self.fresh = true;
        if self.output.is_none() {
            self.output = Some(self.to.clone());
        }
    }

    fn interpolated(&self, now: f64) -> Vec<f32> {
        let a = ((now - self.start) / self.span).clamp(0.0, 1.0) as f32;
        self.from
            .iter()
            .zip(&self.to)
            .map(|(f, t)| (f + a * (t - f)).clamp(0.0, 1.0))
            .collect()
    }

    /// Output at a publish tick; `None` until the first command arrives.
    pub fn tick(&mut self, now: f64) -> Option<Published> {
        self.output.as_ref()?;
        let target = self.interpolated(now);
        let values = match (self.smooth, &self.smoothed) {
            (Some(alpha), Some(prev)) => prev
                .iter()
                .zip(&target)
                .map(|(p, t)| (p + alpha * (t - p)).clamp(0.0, 1.0))
                .collect(),
            _ => target,
        };
        if self.smooth.is_some() {
            self.smoothed = Some(values.clone());
        }
        self.output = Some(values.clone());
        self.last_ts = self.last_ts.max(self.source_ts);
        let new_command = std::mem::take(&mut self.fresh);
        Some(Published {
            timestamp_us: self.last_ts,
            values,
            new_command,
        })
    }
}
