use std::collections::VecDeque;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::{RuntimeError, WorkerConfig};
use crate::algo::{self, Adam, QNetwork};
use crate::comms::payload::{
    decode_batch, decode_control, decode_gradient, encode_control, encode_gradient, ControlMsg,
};
use crate::comms::{CommError, Envelope, Inbox, Kind, Outbox, ParamPublisher, ParamSubscription};
use crate::telemetry::ThroughputCounter;
use crate::types::{HyperParams, ParamSet, Transition};

/// How long a learner waits before asking again after a warmup reply.
const WARMUP_RETRY: Duration = Duration::from_millis(2);
const IDLE_WAIT: Duration = Duration::from_millis(5);

pub enum LearnerChannels {
    /// Owns the model: applies its own and helpers' updates and publishes.
    Lead {
        inbox: Inbox,
        buffer: Outbox,
        publisher: ParamPublisher,
    },
    /// Computes gradients on its own batches for the lead to apply.
    Helper {
        inbox: Inbox,
        buffer: Outbox,
        lead: Outbox,
        params: ParamSubscription,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LearnerOptions {
    pub adam_epsilon: f64,
    /// Emulated extra cost per update.
    pub update_latency: Duration,
    /// Helper gradients computed on parameters older than this many
    /// versions are discarded.
    pub max_gradient_lag: u64,
}

impl Default for LearnerOptions {
    fn default() -> Self {
        Self {
            adam_epsilon: 1e-8,
            update_latency: Duration::ZERO,
            max_gradient_lag: 4,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LearnerStats {
    pub learner_id: u32,
    pub lead: bool,
    /// Updates applied to the model (lead) or gradients sent (helper).
    pub updates: u64,
    pub versions_published: u64,
    /// Target syncs after the initial copy.
    pub target_syncs: u64,
    pub batches_received: u64,
    pub warmup_replies: u64,
    pub gradients_applied: u64,
    pub gradients_dropped: u64,
    /// Sampled transitions whose policy version was newer than the
    /// learner's model; must stay zero.
    pub version_violations: u64,
    pub last_loss: Option<f64>,
    #[serde(skip)]
    pub final_params: Option<ParamSet>,
}

struct Core<'a> {
    opts: &'a LearnerOptions,
    inbox: Inbox,
    buffer: Option<Outbox>,
    batch_size: u32,
    credits: usize,
    outstanding: usize,
    retry_at: Option<Instant>,
    batches: VecDeque<Vec<Transition>>,
    cap: Option<f64>,
    last_update: Option<Instant>,
    stopping: bool,
    stats: LearnerStats,
}

impl Core<'_> {
    /// Handles one envelope; gradients are handed back to the caller.
    fn handle(&mut self, env: Envelope, model_version: u64) -> Result<Option<Envelope>, RuntimeError> {
        match env.kind {
            Kind::Batch => {
                self.outstanding = self.outstanding.saturating_sub(1);
                self.stats.batches_received += 1;
                let batch = decode_batch(&env.payload)?;
                self.stats.version_violations +=
                    batch.iter().filter(|(_, v)| *v > model_version).count() as u64;
                self.batches
                    .push_back(batch.into_iter().map(|(t, _)| t).collect());
                Ok(None)
            }
            Kind::Control => {
                match decode_control(&env.payload)? {
                    ControlMsg::Stop => self.stopping = true,
                    ControlMsg::Pace(p) => self.cap = p.learner_rate_cap.filter(|r| *r > 0.0),
                    ControlMsg::WarmupPending { .. } => {
                        self.outstanding = self.outstanding.saturating_sub(1);
                        self.stats.warmup_replies += 1;
                        self.retry_at = Some(Instant::now() + WARMUP_RETRY);
                    }
                    ControlMsg::BatchRequest { .. } => {}
                }
                Ok(None)
            }
            Kind::Gradient => Ok(Some(env)),
            _ => Ok(None),
        }
    }

    fn request_batches(&mut self) -> Result<(), RuntimeError> {
        if self.retry_at.is_some_and(|t| Instant::now() < t) {
            return Ok(());
        }
        self.retry_at = None;
        let Some(buffer) = &self.buffer else {
            return Ok(());
        };
        while self.outstanding + self.batches.len() < self.credits {
            let msg = ControlMsg::BatchRequest {
                batch_size: self.batch_size,
            };
            buffer.push_send(Envelope::new(Kind::Control, 0, 0, encode_control(&msg)))?;
            self.outstanding += 1;
        }
        Ok(())
    }

    /// Earliest instant the next update may start under the pacing cap.
    fn next_allowed(&self) -> Option<Instant> {
        match (self.cap, self.last_update) {
            (Some(rate), Some(last)) => Some(last + Duration::from_secs_f64(1.0 / rate)),
            _ => None,
        }
    }

    fn ready_batch(&mut self) -> Option<Vec<Transition>> {
        if self.next_allowed().is_some_and(|t| Instant::now() < t) {
            return None;
        }
        self.batches.pop_front()
    }

    fn idle_timeout(&self) -> Duration {
        let now = Instant::now();
        [self.next_allowed(), self.retry_at]
            .into_iter()
            .flatten()
            .map(|t| t.saturating_duration_since(now))
            .fold(IDLE_WAIT, Duration::min)
    }

    fn after_compute(&mut self) {
        self.last_update = Some(Instant::now());
        if !self.opts.update_latency.is_zero() {
            thread::sleep(self.opts.update_latency);
        }
    }

    /// Stops asking for batches and waits until every sender is gone.
    /// Gradients that arrive after the stop count as dropped, so every
    /// gradient a helper sent is accounted for.
    fn shut_down(&mut self) {
        if let Some(b) = self.buffer.take() {
            let _ = b.close();
        }
        let stats = &mut self.stats;
        self.inbox.drain_until_closed(|env| {
            if env.kind == Kind::Gradient {
                stats.gradients_dropped += 1;
            }
        });
    }
}

/// Runs one learner until stopped.
///
/// The lead keeps `batch_credits` batch requests outstanding, applies one
/// DQN update per batch (and one optimizer step per fresh helper gradient),
/// syncs its target network every `target_update_interval` updates and
/// publishes parameters every `publish_interval` updates.
pub fn learner_loop(
    cfg: &WorkerConfig,
    net: QNetwork,
    hp: &HyperParams,
    opts: &LearnerOptions,
    ch: LearnerChannels,
    train: Arc<ThroughputCounter>,
) -> Result<LearnerStats, RuntimeError> {
    match ch {
        LearnerChannels::Lead {
            inbox,
            buffer,
            publisher,
        } => lead_loop(cfg, net, hp, opts, inbox, buffer, publisher, train),
        LearnerChannels::Helper {
            inbox,
            buffer,
            lead,
            params,
        } => helper_loop(cfg, net, hp, opts, inbox, buffer, lead, params),
    }
}

fn core<'a>(
    cfg: &WorkerConfig,
    opts: &'a LearnerOptions,
    inbox: Inbox,
    buffer: Outbox,
    lead: bool,
) -> Core<'a> {
    Core {
        opts,
        inbox,
        buffer: Some(buffer),
        batch_size: cfg.batch_size as u32,
        credits: cfg.batch_credits.max(1),
        outstanding: 0,
        retry_at: None,
        batches: VecDeque::new(),
        cap: None,
        last_update: None,
        stopping: false,
        stats: LearnerStats {
            learner_id: cfg.worker_id,
            lead,
            ..LearnerStats::default()
        },
    }
}

#[allow(clippy::too_many_arguments)]
fn lead_loop(
    cfg: &WorkerConfig,
    mut net: QNetwork,
    hp: &HyperParams,
    opts: &LearnerOptions,
    inbox: Inbox,
    buffer: Outbox,
    mut publisher: ParamPublisher,
    train: Arc<ThroughputCounter>,
) -> Result<LearnerStats, RuntimeError> {
    let mut c = core(cfg, opts, inbox, buffer, true);
    let mut target = algo::sync_target(&net);
    let mut opt = Adam::new(net.layout().param_count(), hp.alpha, opts.adam_epsilon);
    let publish_interval = cfg.publish_interval.max(1);

    let after_update = |net: &QNetwork,
                            target: &mut QNetwork,
                            c: &mut Core<'_>,
                            publisher: &mut ParamPublisher|
     -> Result<(), RuntimeError> {
        c.stats.updates += 1;
        train.add(1);
        if c.stats.updates.is_multiple_of(hp.target_update_interval) {
            *target = algo::sync_target(net);
            c.stats.target_syncs += 1;
        }
        if c.stats.updates.is_multiple_of(publish_interval) {
            publisher.publish(net.params())?;
            c.stats.versions_published += 1;
        }
        Ok(())
    };

    let mut gradients: Vec<Envelope> = Vec::new();
    loop {
        let mut closed = false;
        loop {
            match c.inbox.probe_recv() {
                Ok(Some(env)) => gradients.extend(c.handle(env, net.version())?),
                Ok(None) => break,
                Err(CommError::Closed) => {
                    closed = true;
                    break;
                }
                Err(e) => return Err(e.into()),
            }
        }
        for g in gradients.drain(..) {
            let lag = net.version().saturating_sub(g.version);
            if lag > opts.max_gradient_lag {
                c.stats.gradients_dropped += 1;
                continue;
            }
            let (_, grad) = decode_gradient(&g.payload)?;
            net = algo::apply_gradient(&net, &grad, &mut opt)?;
            c.stats.gradients_applied += 1;
            after_update(&net, &mut target, &mut c, &mut publisher)?;
        }
        if c.stopping || closed {
            break;
        }
        c.request_batches()?;
        if let Some(batch) = c.ready_batch() {
            let (next, loss) = algo::dqn_update(&net, &target, &batch, hp.gamma, &mut opt)?;
            net = next;
            c.stats.last_loss = Some(loss);
            after_update(&net, &mut target, &mut c, &mut publisher)?;
            c.after_compute();
        } else {
            match c.inbox.wait_recv(c.idle_timeout()) {
                // gradients are applied at the top of the next pass
                Ok(Some(env)) => gradients.extend(c.handle(env, net.version())?),
                Ok(None) => {}
                Err(CommError::Closed) => break,
                Err(e) => return Err(e.into()),
            }
        }
    }
    drop(publisher);
    c.shut_down();
    let mut stats = c.stats;
    stats.final_params = Some(net.into_params());
    Ok(stats)
}

#[allow(clippy::too_many_arguments)]
fn helper_loop(
    cfg: &WorkerConfig,
    mut net: QNetwork,
    hp: &HyperParams,
    opts: &LearnerOptions,
    inbox: Inbox,
    buffer: Outbox,
    lead: Outbox,
    params: ParamSubscription,
) -> Result<LearnerStats, RuntimeError> {
    let mut c = core(cfg, opts, inbox, buffer, false);
    let mut target = algo::sync_target(&net);
    let mut target_epoch = 0u64;
    loop {
        let mut closed = false;
        loop {
            match c.inbox.probe_recv() {
                Ok(Some(env)) => {
                    c.handle(env, u64::MAX)?;
                }
                Ok(None) => break,
                Err(CommError::Closed) => {
                    closed = true;
                    break;
                }
                Err(e) => return Err(e.into()),
            }
        }
        if c.stopping || closed {
            break;
        }
        if let Some(p) = params.params_latest() {
            net = QNetwork::from_params(p);
            // follow the lead's target schedule by version
            let epoch = net.version() / hp.target_update_interval;
            if epoch > target_epoch {
                target = algo::sync_target(&net);
                target_epoch = epoch;
                c.stats.target_syncs += 1;
            }
        }
        c.request_batches()?;
        if let Some(batch) = c.ready_batch() {
            let targets = algo::dqn_targets(&target, &batch, hp.gamma)?;
            let (loss, grad) = algo::dqn_loss_and_grad(&net, &batch, &targets)?;
            c.stats.last_loss = Some(loss);
            let env = Envelope::new(
                Kind::Gradient,
                cfg.worker_id,
                net.version(),
                encode_gradient(batch.len() as u32, &grad),
            );
            match lead.push_send(env) {
                Ok(()) => c.stats.updates += 1,
                Err(CommError::Closed) => break,
                Err(e) => return Err(e.into()),
            }
            c.after_compute();
        } else {
            match c.inbox.wait_recv(c.idle_timeout()) {
                Ok(Some(env)) => {
                    c.handle(env, u64::MAX)?;
                }
                Ok(None) => {}
                Err(CommError::Closed) => break,
                Err(e) => return Err(e.into()),
            }
        }
    }
    let _ = lead.close();
    c.shut_down();
    Ok(c.stats)
}
