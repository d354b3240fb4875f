//! Virtual communication benchmark: simulated senders push fixed-size
//! messages to one receiver until a sample count is collected.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::comms::{inbox, CommError, Envelope, Kind, Transport};
use crate::config::{parse_toml, ConfigError, TransportKind};
use crate::strategy::{collect_time, Bound, StrategyError};

/// Simulated per-message production times offered as presets, in seconds.
pub const SAMPLE_TIME_PRESETS: [f64; 2] = [0.001, 0.01];
pub const DEFAULT_SAMPLES: u64 = 10_000;

#[derive(Debug, Error)]
pub enum CommbenchError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Comm(#[from] CommError),
    #[error(transparent)]
    Model(#[from] StrategyError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("a sender failed: {0}")]
    Sender(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CommbenchConfig {
    /// Payload bytes per message.
    pub message_size: usize,
    pub n_actors: usize,
    /// Simulated production time per message, in seconds.
    pub sample_time: f64,
    pub transport: TransportKind,
    pub base_port: u16,
    pub queue_depth: usize,
    /// Messages to collect before stopping.
    pub n_samples: u64,
    /// Actor counts for a sweep; empty runs `n_actors` only.
    pub sweep: Vec<usize>,
}

impl Default for CommbenchConfig {
    fn default() -> Self {
        Self {
            message_size: 512 * 1024,
            n_actors: 1,
            sample_time: SAMPLE_TIME_PRESETS[0],
            transport: TransportKind::Tcp,
            base_port: 0,
            queue_depth: 16,
            n_samples: DEFAULT_SAMPLES,
            sweep: Vec::new(),
        }
    }
}

impl CommbenchConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |field: &str, reason: &str| ConfigError::Invalid {
            field: field.to_string(),
            reason: reason.to_string(),
        };
        if self.message_size == 0 {
            return Err(invalid("message_size", "must be at least 1"));
        }
        if self.n_actors == 0 || self.sweep.contains(&0) {
            return Err(invalid("n_actors", "must be at least 1"));
        }
        if !(self.sample_time >= 0.0 && self.sample_time.is_finite()) {
            return Err(invalid("sample_time", "must be non-negative"));
        }
        if self.queue_depth == 0 {
            return Err(invalid("queue_depth", "must be at least 1"));
        }
        if self.n_samples == 0 {
            return Err(invalid("n_samples", "must be at least 1"));
        }
        Ok(())
    }

    pub fn transport(&self) -> Transport {
        match self.transport {
            TransportKind::InProcess => Transport::InProcess,
            TransportKind::Tcp => Transport::Tcp {
                base_port: self.base_port,
            },
        }
    }

    /// Actor counts to run, in order.
    pub fn actor_counts(&self) -> Vec<usize> {
        if self.sweep.is_empty() {
            vec![self.n_actors]
        } else {
            self.sweep.clone()
        }
    }
}

pub fn parse_commbench_str(text: &str) -> Result<CommbenchConfig, ConfigError> {
    let cfg: CommbenchConfig = parse_toml(text)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_commbench(path: &std::path::Path) -> Result<CommbenchConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
        path: path.display().to_string(),
        source,
    })?;
    parse_commbench_str(&text)
}

/// Per-message costs feeding the collection-time model, in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub t_sp: f64,
    pub t_sd: f64,
    /// Receiver time per message with senders flooding it.
    pub t_rv: f64,
}

impl Calibration {
    /// Smallest actor count whose predicted collection is receiver-bound.
    pub fn onset(&self) -> Result<usize, StrategyError> {
        crate::strategy::receiver_bound_onset(self.t_sp, self.t_sd, self.t_rv)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommbenchReport {
    pub n_actors: usize,
    pub message_size: usize,
    pub sample_time: f64,
    pub samples: u64,
    /// Seconds from the first send until the last sample arrived.
    pub collection_time: f64,
    /// Messages received per second.
    pub receive_throughput: f64,
    pub bytes_per_sec: f64,
    /// Mean measured production time per message.
    pub t_sp: f64,
    /// Mean measured time inside `push_send`.
    pub t_sd: f64,
    /// Mean receiver time per message, payload copy included.
    pub t_rv: f64,
    pub predicted_time: Option<f64>,
    pub predicted_bound: Option<Bound>,
}

impl CommbenchReport {
    pub fn relative_error(&self) -> Option<f64> {
        self.predicted_time
            .map(|p| (self.collection_time - p).abs() / p)
    }

    fn predict(&mut self, cal: &Calibration) -> Result<(), StrategyError> {
        let ct = collect_time(cal.t_sp, cal.t_sd, cal.t_rv, self.n_actors, self.samples)?;
        self.predicted_time = Some(ct.seconds);
        self.predicted_bound = Some(ct.bound);
        Ok(())
    }
}

#[derive(Default)]
struct SenderTally {
    produce_ns: u64,
    send_ns: u64,
    sends: u64,
}

/// Runs one collection with `n_actors` senders and returns raw
/// measurements; no prediction is attached.
pub fn run_once(
    cfg: &CommbenchConfig,
    n_actors: usize,
    sample_time: f64,
    n_samples: u64,
) -> Result<CommbenchReport, CommbenchError> {
    let (rx, addr) = inbox(cfg.transport(), cfg.queue_depth)?;
    let stop = Arc::new(AtomicBool::new(false));
    let template = Arc::new(vec![0xA5u8; cfg.message_size]);
    let sleep = Duration::from_secs_f64(sample_time);
    let start = Instant::now();
    let mut senders = Vec::with_capacity(n_actors);
    for id in 0..n_actors as u32 {
        let out = addr.connect(id, cfg.queue_depth)?;
        let stop = Arc::clone(&stop);
        let template = Arc::clone(&template);
        senders.push(thread::spawn(move || -> Result<SenderTally, String> {
            let mut tally = SenderTally::default();
            while !stop.load(Ordering::Relaxed) {
                let t0 = Instant::now();
                if !sleep.is_zero() {
                    thread::sleep(sleep);
                }
                let payload = template.as_ref().clone();
                let t1 = Instant::now();
                tally.produce_ns += (t1 - t0).as_nanos() as u64;
                match out.push_send(Envelope::new(Kind::Trajectory, id, tally.sends, payload)) {
                    Ok(()) => {
                        tally.send_ns += t1.elapsed().as_nanos() as u64;
                        tally.sends += 1;
                    }
                    Err(_) if stop.load(Ordering::Relaxed) => break,
                    Err(CommError::Closed) => break,
                    Err(e) => return Err(e.to_string()),
                }
            }
            let _ = out.close();
            Ok(tally)
        }));
    }
    drop(addr);

    let mut sink = vec![0u8; cfg.message_size];
    let mut received = 0u64;
    let mut recv_ns = 0u64;
    while received < n_samples {
        match rx.wait_recv(Duration::from_millis(50)) {
            Ok(Some(env)) => {
                let t0 = Instant::now();
                let n = env.payload.len().min(sink.len());
                sink[..n].copy_from_slice(&env.payload[..n]);
                std::hint::black_box(&sink);
                recv_ns += t0.elapsed().as_nanos() as u64;
                received += 1;
            }
            Ok(None) => {}
            Err(CommError::Closed) => break,
            Err(e) => return Err(e.into()),
        }
    }
    let collection_time = start.elapsed().as_secs_f64();
    stop.store(true, Ordering::Relaxed);
    // unblock senders stuck on a full queue
    drop(rx);

    let mut produce_ns = 0u64;
    let mut send_ns = 0u64;
    let mut sends = 0u64;
    for h in senders {
        let tally = h
            .join()
            .map_err(|_| CommbenchError::Sender("panicked".into()))?
            .map_err(CommbenchError::Sender)?;
        produce_ns += tally.produce_ns;
        send_ns += tally.send_ns;
        sends += tally.sends;
    }
    if received < n_samples {
        return Err(CommbenchError::Sender(format!(
            "senders stopped after {received} of {n_samples} messages"
        )));
    }
    let per = |ns: u64, n: u64| if n == 0 { 0.0 } else { ns as f64 * 1e-9 / n as f64 };
    let receive_throughput = received as f64 / collection_time;
    Ok(CommbenchReport {
        n_actors,
        message_size: cfg.message_size,
        sample_time,
        samples: received,
        collection_time,
        receive_throughput,
        bytes_per_sec: receive_throughput * cfg.message_size as f64,
        t_sp: per(produce_ns, sends),
        t_sd: per(send_ns, sends),
        t_rv: per(recv_ns, received),
        predicted_time: None,
        predicted_bound: None,
    })
}

/// Measures model inputs: one paced sender gives `t_sp` and `t_sd`, one
/// flooding sender gives the saturated per-message receive time.
pub fn calibrate(cfg: &CommbenchConfig) -> Result<Calibration, CommbenchError> {
    let paced_n = (cfg.n_samples / 20).clamp(50, 500);
    let paced = run_once(cfg, 1, cfg.sample_time, paced_n)?;
    let flood_n = (cfg.n_samples / 5).clamp(200, 2_000);
    let flood = run_once(cfg, 1, 0.0, flood_n)?;
    Ok(Calibration {
        t_sp: paced.t_sp.max(f64::MIN_POSITIVE),
        t_sd: paced.t_sd.max(f64::MIN_POSITIVE),
        t_rv: (flood.collection_time / flood.samples as f64).max(f64::MIN_POSITIVE),
    })
}

/// Calibrates once, then runs every configured actor count with the
/// model's prediction attached.
pub fn run_commbench(cfg: &CommbenchConfig) -> Result<(Calibration, Vec<CommbenchReport>), CommbenchError> {
    cfg.validate()?;
    let cal = calibrate(cfg)?;
    let mut reports = Vec::new();
    for n in cfg.actor_counts() {
        let mut r = run_once(cfg, n, cfg.sample_time, cfg.n_samples)?;
        r.predict(&cal)?;
        reports.push(r);
    }
    Ok((cal, reports))
}

/// Smallest actor count after which collection time stops improving by
/// more than `tolerance` relative to the best time observed.
pub fn measured_plateau_onset(reports: &[CommbenchReport], tolerance: f64) -> Option<usize> {
    let best = reports
        .iter()
        .map(|r| r.collection_time)
        .fold(f64::INFINITY, f64::min);
    let mut sorted: Vec<_> = reports.iter().collect();
    sorted.sort_by_key(|r| r.n_actors);
    sorted
        .iter()
        .find(|r| r.collection_time <= best * (1.0 + tolerance))
        .map(|r| r.n_actors)
}
