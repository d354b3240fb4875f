use std::collections::HashMap;
use std::io::Write;
use std::sync::mpsc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use super::{
    actor_loop, buffer_loop, learner_loop, run_serial, ActorChannels, ActorStats, ActorTelemetry,
    BufferChannels, BufferStats, EpisodeEvent, EpisodeRecord, GroupReport, LearnerChannels,
    LearnerOptions, LearnerStats, Role, RunReport, RuntimeError, StopReason, ThroughputPoint,
    WorkerConfig, ORCHESTRATOR_ID,
};
use crate::algo::QNetwork;
use crate::comms::payload::{encode_control, ControlMsg};
use crate::comms::{inbox, subscription, Envelope, Kind, Outbox, ParamPublisher};
use crate::config::{Mode, RunConfig};
use crate::replay::ReplayBuffer;
use crate::strategy::{PacingDirective, StalenessController};
use crate::telemetry::{
    CounterName, FinalTime, Metrics, MetricsRecord, ReturnWindow, DEFAULT_RATE_WINDOW,
};
use crate::types::WorkerId;

/// Depth of orchestrator-to-worker control queues.
const CONTROL_DEPTH: usize = 64;
/// Lowest total rate cap the controller will issue.
const PACING_FLOOR: f64 = 1.0;
const TICK: Duration = Duration::from_millis(10);

#[derive(Default)]
pub struct RunOptions<'a> {
    /// Receives one JSON metrics record per line.
    pub metrics: Option<&'a mut dyn Write>,
}

type Worker<T> = JoinHandle<Result<T, RuntimeError>>;

struct Group {
    group_id: u32,
    actors: Vec<Worker<ActorStats>>,
    learners: Vec<Worker<LearnerStats>>,
    buffer: Worker<BufferStats>,
    actor_control: Vec<Outbox>,
    learner_control: Vec<Outbox>,
}

impl Group {
    fn any_finished(&self) -> bool {
        self.actors.iter().any(|h| h.is_finished())
            || self.learners.iter().any(|h| h.is_finished())
            || self.buffer.is_finished()
    }
}

pub fn run_training(cfg: &RunConfig) -> Result<RunReport, RuntimeError> {
    run_training_with(cfg, RunOptions::default())
}

/// Runs a configuration to completion: serial mode in the calling thread,
/// distributed mode on one thread per worker.
///
/// The run stops when the window-100 mean reaches the target, the step
/// budget is spent, the wall-time limit passes or a worker exits on its
/// own. A worker that fails turns the whole run into
/// [`RuntimeError::WorkerFailed`] carrying the partial report.
pub fn run_training_with(cfg: &RunConfig, opts: RunOptions<'_>) -> Result<RunReport, RuntimeError> {
    cfg.validate()?;
    if cfg.distribution.mode == Mode::Serial {
        return run_serial(cfg, opts.metrics);
    }
    let mut metrics_out = opts.metrics;
    let d = &cfg.distribution;
    let spec = cfg.env_spec()?;
    let layout = cfg.layout()?;
    let hp = cfg.training.hyper_params();
    let target_return = cfg.target_return()?;
    let transport = d.transport();
    let depth = d.queue_depth;
    let learner_opts = LearnerOptions {
        adam_epsilon: cfg.training.adam_epsilon,
        update_latency: cfg.training.update_latency(),
        max_gradient_lag: d.max_gradient_lag,
    };

    let mut metrics = Metrics::new(DEFAULT_RATE_WINDOW);
    let origin = metrics.origin();
    let (episode_tx, episode_rx) = mpsc::channel::<EpisodeEvent>();
    let mut groups = Vec::with_capacity(d.n_groups);
    let mut next_id: WorkerId = 0;
    let mut take_id = || {
        let id = next_id;
        next_id += 1;
        id
    };

    for g in 0..d.n_groups as u32 {
        let buffer_id = take_id();
        let learner_ids: Vec<WorkerId> = (0..d.n_learners).map(|_| take_id()).collect();
        let actor_ids: Vec<WorkerId> = (0..d.n_actors).map(|_| take_id()).collect();
        let initial = QNetwork::init(layout.clone(), cfg.model.seed.wrapping_add(u64::from(g)));

        let (buffer_inbox, buffer_addr) = inbox(transport, depth)?;
        let mut learner_inboxes = Vec::with_capacity(learner_ids.len());
        let mut learner_addrs = Vec::with_capacity(learner_ids.len());
        for _ in &learner_ids {
            let (i, a) = inbox(transport, depth)?;
            learner_inboxes.push(i);
            learner_addrs.push(a);
        }
        let mut actor_inboxes = Vec::with_capacity(actor_ids.len());
        for _ in &actor_ids {
            actor_inboxes.push(inbox(transport, CONTROL_DEPTH)?);
        }

        let mut publisher = ParamPublisher::new(learner_ids[0]);
        let mut actor_subs = Vec::with_capacity(actor_ids.len());
        for _ in &actor_ids {
            let (sub, addr) = subscription(transport)?;
            publisher.add(&addr, depth)?;
            actor_subs.push(sub);
        }
        let mut helper_subs = Vec::new();
        for _ in 1..learner_ids.len() {
            let (sub, addr) = subscription(transport)?;
            publisher.add(&addr, depth)?;
            helper_subs.push(sub);
        }

        let mut replies = HashMap::new();
        let mut learner_control = Vec::with_capacity(learner_ids.len());
        for (id, addr) in learner_ids.iter().zip(&learner_addrs) {
            replies.insert(*id, addr.connect(buffer_id, depth)?);
            learner_control.push(addr.connect(ORCHESTRATOR_ID, CONTROL_DEPTH)?);
        }
        let mut actor_control = Vec::with_capacity(actor_ids.len());
        for (_, addr) in &actor_inboxes {
            actor_control.push(addr.connect(ORCHESTRATOR_ID, CONTROL_DEPTH)?);
        }

        let bcfg = WorkerConfig::new(Role::Buffer, buffer_id, g, cfg);
        let buf = ReplayBuffer::new(hp.buffer_capacity, hp.batch_size, hp.warmup_size);
        let received = metrics.counter(CounterName::Receive);
        let buffer = thread::Builder::new()
            .name(format!("buffer-{g}"))
            .spawn(move || {
                buffer_loop(
                    &bcfg,
                    buf,
                    BufferChannels {
                        inbox: buffer_inbox,
                        learners: replies,
                    },
                    received,
                )
            })?;

        let lead_addr = &learner_addrs[0];
        let mut lead_links = Vec::with_capacity(helper_subs.len());
        for id in &learner_ids[1..] {
            lead_links.push(lead_addr.connect(*id, depth)?);
        }
        let mut learners = Vec::with_capacity(learner_ids.len());
        let mut helper_parts = helper_subs.into_iter().zip(lead_links);
        let mut publisher = Some(publisher);
        for (id, learner_inbox) in learner_ids.iter().zip(learner_inboxes) {
            let buffer_link = buffer_addr.connect(*id, depth)?;
            let ch = match publisher.take() {
                Some(publisher) => LearnerChannels::Lead {
                    inbox: learner_inbox,
                    buffer: buffer_link,
                    publisher,
                },
                None => {
                    let (params, lead) = helper_parts.next().expect("one link per helper");
                    LearnerChannels::Helper {
                        inbox: learner_inbox,
                        buffer: buffer_link,
                        lead,
                        params,
                    }
                }
            };
            let lcfg = WorkerConfig::new(Role::Learner, *id, g, cfg);
            let net = QNetwork::from_params(initial.params().clone());
            let hp = hp.clone();
            let lopts = learner_opts.clone();
            let train = metrics.counter(CounterName::Train);
            learners.push(
                thread::Builder::new()
                    .name(format!("learner-{g}-{id}"))
                    .spawn(move || learner_loop(&lcfg, net, &hp, &lopts, ch, train))?,
            );
        }

        let mut actors = Vec::with_capacity(actor_ids.len());
        for ((id, (control, _)), params) in actor_ids.iter().zip(actor_inboxes).zip(actor_subs) {
            let ch = ActorChannels {
                trajectories: buffer_addr.connect(*id, depth)?,
                params,
                control,
            };
            let acfg = WorkerConfig::new(Role::Actor, *id, g, cfg);
            let tel = ActorTelemetry {
                origin,
                samples: metrics.counter(CounterName::Sample),
                episodes: Some(episode_tx.clone()),
            };
            let hp = hp.clone();
            let spec = spec.clone();
            let initial = initial.params().clone();
            actors.push(
                thread::Builder::new()
                    .name(format!("actor-{g}-{id}"))
                    .spawn(move || actor_loop(&acfg, spec, &hp, initial, ch, tel))?,
            );
        }
        // Workers now hold every endpoint they need; dropping the addresses
        // lets each inbox close once its senders are gone.
        drop(learner_addrs);
        drop(buffer_addr);

        groups.push(Group {
            group_id: g,
            actors,
            learners,
            buffer,
            actor_control,
            learner_control,
        });
    }
    drop(episode_tx);

    let n_actors = d.n_actors * d.n_groups;
    let n_learners = d.n_learners * d.n_groups;
    let mut controller = d.staleness_control.then(|| {
        StalenessController::new(
            Duration::from_millis(d.control_window_ms),
            d.staleness_band,
            1.0,
            PACING_FLOOR,
        )
    });
    let metrics_every = Duration::from_millis(d.metrics_interval_ms);
    let mut next_metrics = origin + metrics_every;
    let mut report = RunReport::empty(Mode::Distributed, target_return);
    let mut log = EpisodeLog::new(target_return);

    let reason = loop {
        match episode_rx.recv_timeout(TICK) {
            Ok(ev) => {
                log.record(ev, &mut report, &metrics);
                while let Ok(ev) = episode_rx.try_recv() {
                    log.record(ev, &mut report, &metrics);
                }
            }
            Err(mpsc::RecvTimeoutError::Timeout) => {}
            Err(mpsc::RecvTimeoutError::Disconnected) => thread::sleep(TICK),
        }
        if report.final_updates.is_some() {
            break StopReason::TargetReached;
        }
        if metrics.total(CounterName::Sample) >= cfg.training.step_budget {
            break StopReason::BudgetExhausted;
        }
        if cfg
            .training
            .wall_time_limit_secs
            .is_some_and(|l| origin.elapsed().as_secs_f64() >= l)
        {
            break StopReason::WallTimeLimit;
        }
        if groups.iter().any(Group::any_finished) {
            break StopReason::WorkerFailed;
        }

        let now = Instant::now();
        if now >= next_metrics {
            next_metrics = now + metrics_every;
            let mut rec = record_point(&mut metrics, &mut report);
            if let Some(w) = metrics_out.as_deref_mut() {
                rec.episodes = Some(report.episodes.len() as u64);
                rec.window_mean = log.mean();
                rec.write_json_line(w)?;
            }
        }
        if let Some(ctl) = controller.as_mut() {
            let t = origin.elapsed().as_secs_f64();
            let directive = ctl.observe(
                t,
                metrics.total(CounterName::Receive),
                metrics.total(CounterName::Train),
            );
            if directive != PacingDirective::NoOp {
                let pace = encode_control(&ControlMsg::Pace(ctl.per_worker(n_actors, n_learners)));
                for g in &groups {
                    for out in g.actor_control.iter().chain(&g.learner_control) {
                        let _ = out.push_send(Envelope::new(Kind::Control, 0, 0, pace.clone()));
                    }
                }
            }
        }
    };

    let mut failures = Vec::new();
    let stop = encode_control(&ControlMsg::Stop);
    let mut group_reports = Vec::with_capacity(groups.len());
    let mut pending = Vec::with_capacity(groups.len());
    for g in groups.iter_mut() {
        for out in g.actor_control.drain(..) {
            let _ = out.push_send(Envelope::new(Kind::Control, 0, 0, stop.clone()));
            let _ = out.close();
        }
    }
    for g in groups.iter_mut() {
        let actors = join_all(&mut g.actors, "actor", &mut failures);
        pending.push(actors);
    }
    for g in groups.iter_mut() {
        for out in g.learner_control.drain(..) {
            let _ = out.push_send(Envelope::new(Kind::Control, 0, 0, stop.clone()));
            let _ = out.close();
        }
    }
    for (g, actors) in groups.into_iter().zip(pending) {
        let mut learner_handles = g.learners;
        let learners = join_all(&mut learner_handles, "learner", &mut failures);
        let buffer = join_one(g.buffer, "buffer", &mut failures);
        group_reports.push(GroupReport {
            group_id: g.group_id,
            actors,
            learners,
            buffer,
        });
    }
    while let Ok(ev) = episode_rx.try_recv() {
        log.record(ev, &mut report, &metrics);
    }
    record_point(&mut metrics, &mut report);

    report.stop_reason = reason;
    report.final_time = log.final_time.get();
    report.wall_time = origin.elapsed().as_secs_f64();
    report.total_steps = metrics.total(CounterName::Sample);
    report.total_received = metrics.total(CounterName::Receive);
    report.total_updates = metrics.total(CounterName::Train);
    report.final_window_mean = log.mean();
    for g in &mut group_reports {
        for l in &mut g.learners {
            report.versions_published += l.versions_published;
            if let Some(p) = l.final_params.take() {
                report.final_params.push(p);
            }
        }
    }
    report.groups = group_reports;

    if reason == StopReason::WorkerFailed || !failures.is_empty() {
        let message = if failures.is_empty() {
            "a worker exited before the run was stopped".to_string()
        } else {
            failures.join("; ")
        };
        report.stop_reason = StopReason::WorkerFailed;
        return Err(RuntimeError::WorkerFailed {
            message,
            partial: Box::new(report),
        });
    }
    Ok(report)
}

struct EpisodeLog {
    window: ReturnWindow,
    final_time: FinalTime,
}

impl EpisodeLog {
    fn new(target: f64) -> Self {
        Self {
            window: ReturnWindow::default(),
            final_time: FinalTime::new(target),
        }
    }

    fn mean(&self) -> Option<f64> {
        (!self.window.is_empty()).then(|| self.window.mean())
    }

    /// Records one episode; the first time the window reaches the target,
    /// snapshots the step and update totals.
    fn record(&mut self, ev: EpisodeEvent, report: &mut RunReport, metrics: &Metrics) {
        let t = ev.t_ns as f64 * 1e-9;
        if self.window.record(ev.ret).is_err() {
            return;
        }
        report.episodes.push(EpisodeRecord {
            index: report.episodes.len() as u64,
            ret: ev.ret,
            wall_time: t,
            group_id: ev.group_id,
            actor_id: ev.actor_id,
        });
        if self.final_time.get().is_none() && self.final_time.observe(&self.window, t).is_some() {
            report.final_updates = Some(metrics.total(CounterName::Train));
            report.final_steps = Some(metrics.total(CounterName::Sample));
        }
    }
}

fn record_point(metrics: &mut Metrics, report: &mut RunReport) -> MetricsRecord {
    let rec = metrics.snapshot();
    report.throughput.push(ThroughputPoint {
        t: rec.t_secs(),
        tr_a: rec.rates.sample,
        tr_recv: rec.rates.receive,
        tr_l: rec.rates.train,
    });
    rec
}

fn join_one<T>(h: Worker<T>, role: &str, failures: &mut Vec<String>) -> Option<T> {
    let name = h.thread().name().unwrap_or(role).to_string();
    match h.join() {
        Ok(Ok(v)) => Some(v),
        Ok(Err(e)) => {
            failures.push(format!("{name}: {e}"));
            None
        }
        Err(_) => {
            failures.push(format!("{name}: panicked"));
            None
        }
    }
}

fn join_all<T>(hs: &mut Vec<Worker<T>>, role: &str, failures: &mut Vec<String>) -> Vec<T> {
    hs.drain(..).filter_map(|h| join_one(h, role, failures)).collect()
}
