use std::io::Write;
use std::thread;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{EpisodeRecord, RunReport, RuntimeError, StopReason, ThroughputPoint, WorkerConfig, Role};
use crate::algo::{self, epsilon_greedy, Adam, QNetwork};
use crate::config::{Mode, RunConfig};
use crate::envs::Environment;
use crate::replay::ReplayBuffer;
use crate::telemetry::{CounterName, FinalTime, Metrics, ReturnWindow, DEFAULT_RATE_WINDOW};
use crate::types::Transition;

/// Reference run: one thread alternates environment steps and learner
/// updates, one update every `train_every` steps once warm.
///
/// Episode returns depend only on the configuration, never on timing.
pub fn run_serial(cfg: &RunConfig, mut metrics_out: Option<&mut dyn Write>) -> Result<RunReport, RuntimeError> {
    cfg.validate()?;
    let spec = cfg.env_spec()?;
    let layout = cfg.layout()?;
    let hp = cfg.training.hyper_params();
    let target_return = cfg.target_return()?;
    let wcfg = WorkerConfig::new(Role::Actor, 0, 0, cfg);

    let mut env = Environment::new(spec, wcfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(wcfg.seed ^ 0xAC70_0000);
    let mut net = QNetwork::init(layout.clone(), cfg.model.seed);
    let mut target = algo::sync_target(&net);
    let mut opt = Adam::new(layout.param_count(), hp.alpha, cfg.training.adam_epsilon);
    let mut buf = ReplayBuffer::new(hp.buffer_capacity, hp.batch_size, hp.warmup_size);
    let latency = cfg.training.update_latency();

    let mut metrics = Metrics::new(DEFAULT_RATE_WINDOW);
    let samples = metrics.counter(CounterName::Sample);
    let received = metrics.counter(CounterName::Receive);
    let trained = metrics.counter(CounterName::Train);
    let origin = metrics.origin();
    let metrics_every = Duration::from_millis(cfg.distribution.metrics_interval_ms);
    let wall_limit = cfg.training.wall_time_limit_secs;

    let mut report = RunReport::empty(Mode::Serial, target_return);
    let mut window = ReturnWindow::default();
    let mut final_time = FinalTime::new(target_return);
    let mut epsilon = hp.epsilon;
    let mut episode_return = 0.0f64;
    let mut steps = 0u64;
    let mut updates = 0u64;
    let mut next_metrics = origin + metrics_every;

    let reason = loop {
        if steps >= cfg.training.step_budget {
            break StopReason::BudgetExhausted;
        }
        let state = env.observation().to_vec();
        let q = net.forward(&state)?;
        let action = epsilon_greedy(&q, epsilon, &mut rng) as u32;
        let step = env.step(action)?;
        steps += 1;
        samples.add(1);
        episode_return += f64::from(step.reward);
        buf.insert(
            Transition {
                state,
                action,
                reward: step.reward,
                next_state: step.state.observation.clone(),
                done: step.done && !step.state.truncated,
            },
            net.version(),
        );
        received.add(1);

        if steps.is_multiple_of(cfg.training.train_every) && buf.is_warm() {
            let batch: Vec<Transition> = buf
                .sample_owned(hp.batch_size, &mut rng)
                .expect("buffer is warm")
                .into_iter()
                .map(|(t, _)| t)
                .collect();
            let (next, _) = algo::dqn_update(&net, &target, &batch, hp.gamma, &mut opt)?;
            net = next;
            updates += 1;
            trained.add(1);
            if updates.is_multiple_of(hp.target_update_interval) {
                target = algo::sync_target(&net);
            }
            if !latency.is_zero() {
                thread::sleep(latency);
            }
        }

        if step.done {
            let t = origin.elapsed().as_secs_f64();
            window.record(episode_return).map_err(|e| {
                RuntimeError::Topology(format!("episode return rejected: {e}"))
            })?;
            report.episodes.push(EpisodeRecord {
                index: report.episodes.len() as u64,
                ret: episode_return,
                wall_time: t,
                group_id: 0,
                actor_id: 0,
            });
            episode_return = 0.0;
            epsilon = (epsilon * hp.epsilon_decay).max(hp.epsilon_min);
            env.reset()?;
            if final_time.get().is_none() && final_time.observe(&window, t).is_some() {
                report.final_updates = Some(updates);
                report.final_steps = Some(steps);
                break StopReason::TargetReached;
            }
        }

        if steps.is_multiple_of(64) {
            let now = Instant::now();
            if now >= next_metrics {
                next_metrics = now + metrics_every;
                let mut rec = metrics.snapshot();
                rec.episodes = Some(report.episodes.len() as u64);
                rec.window_mean = (!window.is_empty()).then(|| window.mean());
                rec.policy_version = Some(net.version());
                report.throughput.push(ThroughputPoint {
                    t: rec.t_secs(),
                    tr_a: rec.rates.sample,
                    tr_recv: rec.rates.receive,
                    tr_l: rec.rates.train,
                });
                if let Some(w) = metrics_out.as_deref_mut() {
                    rec.write_json_line(w)?;
                }
            }
            if wall_limit.is_some_and(|l| origin.elapsed().as_secs_f64() >= l) {
                break StopReason::WallTimeLimit;
            }
        }
    };

    report.stop_reason = reason;
    report.final_time = final_time.get();
    report.wall_time = origin.elapsed().as_secs_f64();
    report.total_steps = steps;
    report.total_received = steps;
    report.total_updates = updates;
    report.versions_published = updates;
    report.final_window_mean = (!window.is_empty()).then(|| window.mean());
    report.final_params.push(net.into_params());
    Ok(report)
}
