//! Actor, buffer and learner loops and the orchestrator that wires them.
//!
//! Every worker runs its own loop on its own thread and talks to the others
//! only through comms. Actors push trajectories to their group's buffer and
//! poll a newest-wins parameter slot; learners ask the buffer for batches
//! with request credits and publish parameters after updates; the buffer
//! interleaves inserts and batch service. The orchestrator only starts,
//! paces and stops workers.

mod actor;
mod buffer;
mod learner;
mod orchestrator;
mod serial;

use std::sync::mpsc;
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::algo::AlgoError;
use crate::comms::{CodecError, CommError};
use crate::config::{ConfigError, Mode, RunConfig};
use crate::envs::EnvError;
use crate::replay::StalenessReport;
use crate::telemetry::ThroughputCounter;
use crate::types::{ParamSet, WorkerId};

pub use actor::{actor_loop, ActorChannels, ActorStats};
pub use buffer::{buffer_loop, BufferChannels, BufferStats};
pub use learner::{learner_loop, LearnerChannels, LearnerOptions, LearnerStats};
pub use orchestrator::{run_training, run_training_with, RunOptions};
pub use serial::run_serial;

/// Sender id used by the orchestrator on control channels.
pub const ORCHESTRATOR_ID: WorkerId = u32::MAX;

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("invalid topology: {0}")]
    Topology(String),
    #[error(transparent)]
    Comm(#[from] CommError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Algo(#[from] AlgoError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("worker failed: {message}")]
    WorkerFailed {
        message: String,
        /// Whatever was collected before the run was aborted.
        partial: Box<RunReport>,
    },
}

impl From<CodecError> for RuntimeError {
    fn from(e: CodecError) -> Self {
        Self::Comm(CommError::Codec(e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Actor,
    Learner,
    Buffer,
}

/// Per-worker settings derived from the run configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkerConfig {
    pub role: Role,
    pub worker_id: WorkerId,
    pub group_id: u32,
    /// Cores this worker is meant to occupy; informational.
    pub core_hint: Option<usize>,
    pub rollout_length: usize,
    pub batch_size: usize,
    pub publish_interval: u64,
    pub batch_credits: usize,
    pub seed: u64,
    /// Actors stop on their own after this many environment steps.
    pub step_limit: Option<u64>,
    /// Buffer serves at most this many batches per inserted transition.
    pub max_updates_per_step: Option<f64>,
}

impl WorkerConfig {
    pub fn new(role: Role, worker_id: WorkerId, group_id: u32, cfg: &RunConfig) -> Self {
        Self {
            role,
            worker_id,
            group_id,
            core_hint: None,
            rollout_length: cfg.training.rollout_length,
            batch_size: cfg.training.batch_size,
            publish_interval: cfg.distribution.publish_interval,
            batch_credits: cfg.distribution.batch_credits,
            seed: cfg
                .environment
                .seed
                .wrapping_mul(1_000_003)
                .wrapping_add(u64::from(group_id) << 20)
                .wrapping_add(u64::from(worker_id)),
            step_limit: None,
            max_updates_per_step: cfg.distribution.max_updates_per_step,
        }
    }
}

/// A finished episode as reported by an actor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeEvent {
    pub group_id: u32,
    pub actor_id: WorkerId,
    pub ret: f64,
    pub length: u32,
    /// Nanoseconds since the run origin.
    pub t_ns: u64,
}

/// Where an actor reports to the orchestrator.
#[derive(Debug, Clone)]
pub struct ActorTelemetry {
    pub origin: Instant,
    pub samples: Arc<ThroughputCounter>,
    pub episodes: Option<mpsc::Sender<EpisodeEvent>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub index: u64,
    #[serde(rename = "return")]
    pub ret: f64,
    /// Seconds since the run started.
    pub wall_time: f64,
    pub group_id: u32,
    pub actor_id: WorkerId,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThroughputPoint {
    pub t: f64,
    /// Environment steps per second.
    pub tr_a: f64,
    /// Transitions received by buffers per second.
    pub tr_recv: f64,
    /// Learner updates per second.
    pub tr_l: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    TargetReached,
    BudgetExhausted,
    WallTimeLimit,
    WorkerFailed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub group_id: u32,
    pub actors: Vec<ActorStats>,
    pub learners: Vec<LearnerStats>,
    pub buffer: Option<BufferStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub mode: Mode,
    pub episodes: Vec<EpisodeRecord>,
    pub throughput: Vec<ThroughputPoint>,
    /// Seconds until the window-100 mean first reached the target.
    pub final_time: Option<f64>,
    /// Learner updates applied when the target was reached.
    pub final_updates: Option<u64>,
    /// Environment steps taken when the target was reached.
    pub final_steps: Option<u64>,
    pub versions_published: u64,
    pub stop_reason: StopReason,
    pub target_return: f64,
    pub wall_time: f64,
    pub total_steps: u64,
    pub total_received: u64,
    pub total_updates: u64,
    pub final_window_mean: Option<f64>,
    pub groups: Vec<GroupReport>,
    /// Final parameters of each group's lead learner (or the serial
    /// network).
    #[serde(skip)]
    pub final_params: Vec<ParamSet>,
}

impl RunReport {
    pub(crate) fn empty(mode: Mode, target_return: f64) -> Self {
        Self {
            mode,
            episodes: Vec::new(),
            throughput: Vec::new(),
            final_time: None,
            final_updates: None,
            final_steps: None,
            versions_published: 0,
            stop_reason: StopReason::WorkerFailed,
            target_return,
            wall_time: 0.0,
            total_steps: 0,
            total_received: 0,
            total_updates: 0,
            final_window_mean: None,
            groups: Vec::new(),
            final_params: Vec::new(),
        }
    }

    pub fn reached_target(&self) -> bool {
        self.final_time.is_some()
    }

    /// Mean of each throughput series over points with `t >= from`.
    pub fn mean_throughput(&self, from: f64) -> Option<ThroughputPoint> {
        let pts: Vec<_> = self.throughput.iter().filter(|p| p.t >= from).collect();
        if pts.is_empty() {
            return None;
        }
        let n = pts.len() as f64;
        Some(ThroughputPoint {
            t: from,
            tr_a: pts.iter().map(|p| p.tr_a).sum::<f64>() / n,
            tr_recv: pts.iter().map(|p| p.tr_recv).sum::<f64>() / n,
            tr_l: pts.iter().map(|p| p.tr_l).sum::<f64>() / n,
        })
    }

    pub fn staleness(&self) -> Vec<StalenessReport> {
        self.groups
            .iter()
            .filter_map(|g| g.buffer.as_ref().map(|b| b.staleness.clone()))
            .collect()
    }
}

/// Sleeps until `deadline` in short slices, returning early when `wake`
/// says so.
pub(crate) fn sleep_until(deadline: Instant, mut wake: impl FnMut() -> bool) {
    const SLICE: Duration = Duration::from_millis(20);
    loop {
        let now = Instant::now();
        if now >= deadline || wake() {
            return;
        }
        std::thread::sleep((deadline - now).min(SLICE));
    }
}
