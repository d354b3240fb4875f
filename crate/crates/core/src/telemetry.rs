//! Episode-return windows, throughput counters and JSON-lines metrics.
//!
//! Each counter has a single writer (its worker); the orchestrator reads
//! them through [`Metrics::snapshot`].

use std::collections::VecDeque;
use std::io::{self, Write};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const RETURN_WINDOW: usize = 100;
pub const DEFAULT_RATE_WINDOW: Duration = Duration::from_secs(1);

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TelemetryError {
    #[error("episode return {0} is not finite")]
    NonFiniteReturn(f64),
}

/// Sliding window over the most recent episode returns.
#[derive(Debug, Clone)]
pub struct ReturnWindow {
    ring: VecDeque<f64>,
    cap: usize,
    mean: f64,
}

impl Default for ReturnWindow {
    fn default() -> Self {
        Self::new(RETURN_WINDOW)
    }
}

impl ReturnWindow {
    pub fn new(cap: usize) -> Self {
        assert!(cap > 0, "window capacity must be positive");
        Self {
            ring: VecDeque::with_capacity(cap),
            cap,
            mean: 0.0,
        }
    }

    /// Adds a return and yields the new window mean.
    pub fn record(&mut self, ret: f64) -> Result<f64, TelemetryError> {
        if !ret.is_finite() {
            return Err(TelemetryError::NonFiniteReturn(ret));
        }
        if self.ring.len() == self.cap {
            self.ring.pop_front();
        }
        self.ring.push_back(ret);
        // summed afresh so no rounding drift accumulates
        self.mean = self.ring.iter().sum::<f64>() / self.ring.len() as f64;
        Ok(self.mean)
    }

    /// Mean of the current contents; 0 when empty.
    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn len(&self) -> usize {
        self.ring.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ring.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.ring.len() == self.cap
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.ring.iter()
    }
}

/// Records the first time a full window's mean reaches the target.
#[derive(Debug, Clone)]
pub struct FinalTime {
    target: f64,
    crossed_at: Option<f64>,
}

impl FinalTime {
    pub fn new(target: f64) -> Self {
        Self {
            target,
            crossed_at: None,
        }
    }

    pub fn target(&self) -> f64 {
        self.target
    }

    /// Feeds the window after a new episode; returns the crossing time once
    /// it has happened.
    pub fn observe(&mut self, window: &ReturnWindow, t_secs: f64) -> Option<f64> {
        if self.crossed_at.is_none() && window.is_full() && window.mean() >= self.target {
            self.crossed_at = Some(t_secs);
        }
        self.crossed_at
    }

    pub fn get(&self) -> Option<f64> {
        self.crossed_at
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CounterName {
    /// Environment steps taken by actors.
    Sample,
    /// Transitions received by buffers.
    Receive,
    /// Learner updates applied.
    Train,
}

impl CounterName {
    pub const ALL: [CounterName; 3] = [Self::Sample, Self::Receive, Self::Train];

    fn index(self) -> usize {
        self as usize
    }
}

/// Monotone event counter owned by one worker.
#[derive(Debug)]
pub struct ThroughputCounter {
    name: CounterName,
    count: AtomicU64,
}

impl ThroughputCounter {
    pub fn new(name: CounterName) -> Arc<Self> {
        Arc::new(Self {
            name,
            count: AtomicU64::new(0),
        })
    }

    pub fn name(&self) -> CounterName {
        self.name
    }

    pub fn add(&self, n: u64) {
        self.count.fetch_add(n, Ordering::Release);
    }

    pub fn count(&self) -> u64 {
        self.count.load(Ordering::Acquire)
    }
}

/// Rate of a monotone count over a sliding time window, from explicit
/// observations.
#[derive(Debug, Clone)]
pub struct RateWindow {
    window_ns: u64,
    history: VecDeque<(u64, u64)>,
}

impl RateWindow {
    pub fn new(window: Duration) -> Self {
        Self {
            window_ns: window.as_nanos().max(1) as u64,
            history: VecDeque::new(),
        }
    }

    /// Records `count` at `t_ns` and returns events per second over the
    /// window ending at `t_ns`.
    pub fn observe(&mut self, t_ns: u64, count: u64) -> f64 {
        self.history.push_back((t_ns, count));
        // keep the newest observation at or before the window start as the
        // baseline
        while self.history.len() > 2 && self.history[1].0 + self.window_ns <= t_ns {
            self.history.pop_front();
        }
        let (t0, c0) = self.history[0];
        if t_ns <= t0 {
            return 0.0;
        }
        count.saturating_sub(c0) as f64 / ((t_ns - t0) as f64 * 1e-9)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CounterTriple {
    pub sample: f64,
    pub receive: f64,
    pub train: f64,
}

/// One metrics row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    /// Monotonic nanoseconds since the metrics origin.
    pub t_ns: u64,
    pub sample_count: u64,
    pub receive_count: u64,
    pub train_count: u64,
    /// Events per second over the rate window.
    pub rates: CounterTriple,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub episodes: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window_mean: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy_version: Option<u64>,
}

impl MetricsRecord {
    pub fn t_secs(&self) -> f64 {
        self.t_ns as f64 * 1e-9
    }

    pub fn write_json_line<W: Write>(&self, mut w: W) -> io::Result<()> {
        serde_json::to_writer(&mut w, self)?;
        w.write_all(b"\n")
    }
}

/// Registry of every worker's counters plus the rate windows over their
/// sums.
#[derive(Debug)]
pub struct Metrics {
    origin: Instant,
    counters: Vec<Arc<ThroughputCounter>>,
    rates: [RateWindow; 3],
    last_t_ns: Option<u64>,
}

impl Metrics {
    pub fn new(rate_window: Duration) -> Self {
        Self::with_origin(Instant::now(), rate_window)
    }

    pub fn with_origin(origin: Instant, rate_window: Duration) -> Self {
        Self {
            origin,
            counters: Vec::new(),
            rates: std::array::from_fn(|_| RateWindow::new(rate_window)),
            last_t_ns: None,
        }
    }

    pub fn origin(&self) -> Instant {
        self.origin
    }

    /// Creates a counter owned by the caller's worker.
    pub fn counter(&mut self, name: CounterName) -> Arc<ThroughputCounter> {
        let c = ThroughputCounter::new(name);
        self.counters.push(Arc::clone(&c));
        c
    }

    pub fn total(&self, name: CounterName) -> u64 {
        self.counters
            .iter()
            .filter(|c| c.name == name)
            .map(|c| c.count())
            .sum()
    }

    pub fn elapsed_ns(&self) -> u64 {
        self.origin.elapsed().as_nanos() as u64
    }

    pub fn snapshot(&mut self) -> MetricsRecord {
        let t = self.elapsed_ns();
        self.snapshot_at(t)
    }

    /// Snapshot stamped at `t_ns`, nudged forward if needed so successive
    /// records have strictly increasing timestamps.
    pub fn snapshot_at(&mut self, t_ns: u64) -> MetricsRecord {
        let t_ns = match self.last_t_ns {
            Some(last) if t_ns <= last => last + 1,
            _ => t_ns,
        };
        self.last_t_ns = Some(t_ns);
        // train and receive are read before sample so that the receive <=
        // sample relation also holds for the snapshot
        let train_count = self.total(CounterName::Train);
        let receive_count = self.total(CounterName::Receive);
        let sample_count = self.total(CounterName::Sample);
        let counts = [sample_count, receive_count, train_count];
        let mut r = [0.0; 3];
        for name in CounterName::ALL {
            let i = name.index();
            r[i] = self.rates[i].observe(t_ns, counts[i]);
        }
        MetricsRecord {
            t_ns,
            sample_count,
            receive_count,
            train_count,
            rates: CounterTriple {
                sample: r[0],
                receive: r[1],
                train: r[2],
            },
            episodes: None,
            window_mean: None,
            policy_version: None,
        }
    }
}
