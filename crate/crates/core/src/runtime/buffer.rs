use std::collections::{HashMap, VecDeque};
use std::sync::Arc;
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{RuntimeError, WorkerConfig};
use crate::comms::payload::{decode_control, decode_trajectory, encode_batch, encode_control, ControlMsg};
use crate::comms::{ChannelStats, CommError, Envelope, Inbox, Kind, Outbox};
use crate::replay::{ReplayBuffer, StalenessReport};
use crate::telemetry::ThroughputCounter;
use crate::types::WorkerId;

/// Envelopes handled per loop iteration before yielding to batch service.
const MAX_WORK_PER_ITERATION: usize = 64;

pub struct BufferChannels {
    /// Trajectories from actors and batch requests from learners.
    pub inbox: Inbox,
    /// Batch replies, keyed by learner id.
    pub learners: HashMap<WorkerId, Outbox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BufferStats {
    pub trajectories: u64,
    pub inserted_total: u64,
    pub consumed_total: u64,
    pub batches_served: u64,
    pub warmup_replies: u64,
    /// Requests held back by the updates-per-step limit at some point.
    pub deferred_requests: u64,
    pub final_len: usize,
    pub newest_policy_version: u64,
    pub staleness: StalenessReport,
    /// Inbox counters at exit.
    pub inbox: ChannelStats,
}

struct State {
    buf: ReplayBuffer,
    rng: ChaCha8Rng,
    learners: HashMap<WorkerId, Outbox>,
    deferred: VecDeque<(WorkerId, usize)>,
    limit: Option<f64>,
    stats: BufferStats,
    received: Arc<ThroughputCounter>,
}

impl State {
    fn within_limit(&self) -> bool {
        match self.limit {
            None => true,
            Some(r) => (self.stats.batches_served + 1) as f64 <= r * self.buf.inserted_total() as f64,
        }
    }

    fn reply(&mut self, learner: WorkerId, env: Envelope) -> Result<(), RuntimeError> {
        let Some(out) = self.learners.get(&learner) else {
            return Ok(());
        };
        match out.push_send(env) {
            Ok(()) => Ok(()),
            Err(CommError::Closed) => {
                self.learners.remove(&learner);
                Ok(())
            }
            Err(e) => Err(e.into()),
        }
    }

    fn serve(&mut self, learner: WorkerId, batch_size: usize) -> Result<(), RuntimeError> {
        match self.buf.sample_owned(batch_size, &mut self.rng) {
            Ok(batch) => {
                self.stats.batches_served += 1;
                let env = Envelope::new(Kind::Batch, 0, 0, encode_batch(&batch));
                self.reply(learner, env)
            }
            Err(_) => {
                self.stats.warmup_replies += 1;
                let msg = ControlMsg::WarmupPending {
                    len: self.buf.len() as u32,
                };
                self.reply(learner, Envelope::new(Kind::Control, 0, 0, encode_control(&msg)))
            }
        }
    }

    fn serve_deferred(&mut self) -> Result<(), RuntimeError> {
        while !self.deferred.is_empty() && self.within_limit() {
            let (learner, n) = self.deferred.pop_front().unwrap();
            self.serve(learner, n)?;
        }
        Ok(())
    }

    fn handle(&mut self, env: Envelope) -> Result<(), RuntimeError> {
        match env.kind {
            Kind::Trajectory => {
                let traj = decode_trajectory(&env.payload)?;
                self.stats.newest_policy_version =
                    self.stats.newest_policy_version.max(traj.policy_version);
                let n = self.buf.push(traj);
                self.stats.trajectories += 1;
                self.received.add(n as u64);
                self.serve_deferred()
            }
            Kind::Control => match decode_control(&env.payload)? {
                ControlMsg::BatchRequest { batch_size } => {
                    let n = batch_size as usize;
                    if self.buf.is_warm() && (!self.deferred.is_empty() || !self.within_limit()) {
                        self.stats.deferred_requests += 1;
                        self.deferred.push_back((env.sender_id, n));
                        Ok(())
                    } else {
                        self.serve(env.sender_id, n)
                    }
                }
                _ => Ok(()),
            },
            _ => Ok(()),
        }
    }
}

/// Inserts incoming trajectories and answers batch requests until every
/// sender has gone away.
///
/// Requests below warmup get an immediate pending reply. With an
/// updates-per-step limit, requests beyond it wait until enough new
/// transitions arrive.
pub fn buffer_loop(
    cfg: &WorkerConfig,
    buf: ReplayBuffer,
    ch: BufferChannels,
    received: Arc<ThroughputCounter>,
) -> Result<BufferStats, RuntimeError> {
    let BufferChannels { inbox, learners } = ch;
    let mut st = State {
        rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xB0FF_E400),
        learners,
        deferred: VecDeque::new(),
        limit: cfg.max_updates_per_step,
        stats: BufferStats {
            trajectories: 0,
            inserted_total: 0,
            consumed_total: 0,
            batches_served: 0,
            warmup_replies: 0,
            deferred_requests: 0,
            final_len: 0,
            newest_policy_version: 0,
            staleness: buf.staleness_report(0),
            inbox: ChannelStats::default(),
        },
        buf,
        received,
    };
    'run: loop {
        let mut work = 0;
        while work < MAX_WORK_PER_ITERATION {
            match inbox.probe_recv() {
                Ok(Some(env)) => st.handle(env)?,
                Ok(None) => break,
                Err(CommError::Closed) => break 'run,
                Err(e) => return Err(e.into()),
            }
            work += 1;
        }
        if work == 0 {
            match inbox.wait_recv(Duration::from_millis(5)) {
                Ok(Some(env)) => st.handle(env)?,
                Ok(None) => {}
                Err(CommError::Closed) => break,
                Err(e) => return Err(e.into()),
            }
        }
    }
    for (_, out) in st.learners.drain() {
        let _ = out.close();
    }
    let mut stats = st.stats;
    stats.inserted_total = st.buf.inserted_total();
    stats.consumed_total = st.buf.consumed_total();
    stats.final_len = st.buf.len();
    stats.staleness = st.buf.staleness_report(stats.newest_policy_version);
    stats.inbox = inbox.stats();
    Ok(stats)
}
