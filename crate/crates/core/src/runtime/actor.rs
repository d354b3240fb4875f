use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{sleep_until, ActorTelemetry, EpisodeEvent, RuntimeError, WorkerConfig};
use crate::algo::{epsilon_greedy, QNetwork};
use crate::comms::payload::{decode_control, encode_trajectory, ControlMsg};
use crate::comms::{ChannelStats, CommError, Envelope, Inbox, Kind, Outbox, ParamSubscription};
use crate::envs::{EnvSpec, Environment};
use crate::types::{HyperParams, ParamSet, Trajectory, Transition};

pub struct ActorChannels {
    /// Trajectories to the group's buffer.
    pub trajectories: Outbox,
    pub params: ParamSubscription,
    /// Stop and pacing from the orchestrator.
    pub control: Inbox,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ActorStats {
    pub actor_id: u32,
    pub steps: u64,
    pub trajectories_sent: u64,
    pub episodes: u64,
    /// Parameter versions swapped in, in order.
    pub versions_adopted: Vec<u64>,
    pub final_epsilon: f64,
    /// Parameter subscription counters at exit.
    pub params_channel: ChannelStats,
}

enum Signal {
    Continue,
    Stop,
}

fn poll_control(control: &Inbox, cap: &mut Option<f64>) -> Result<Signal, RuntimeError> {
    loop {
        match control.probe_recv() {
            Ok(Some(env)) => {
                if env.kind != Kind::Control {
                    continue;
                }
                match decode_control(&env.payload)? {
                    ControlMsg::Stop => return Ok(Signal::Stop),
                    ControlMsg::Pace(p) => *cap = p.actor_rate_cap.filter(|r| *r > 0.0),
                    _ => {}
                }
            }
            Ok(None) => return Ok(Signal::Continue),
            Err(CommError::Closed) => return Ok(Signal::Stop),
            Err(e) => return Err(e.into()),
        }
    }
}

/// Steps the environment with an ε-greedy policy, pushing one trajectory
/// every `rollout_length` steps and adopting newer parameters whenever the
/// subscription has one. Never waits for parameters.
pub fn actor_loop(
    cfg: &WorkerConfig,
    spec: EnvSpec,
    hp: &HyperParams,
    initial: ParamSet,
    ch: ActorChannels,
    tel: ActorTelemetry,
) -> Result<ActorStats, RuntimeError> {
    let mut net = QNetwork::from_params(initial);
    let mut env = Environment::new(spec, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xAC70_0000);
    let mut epsilon = hp.epsilon;
    let mut cap: Option<f64> = None;
    let mut stats = ActorStats {
        actor_id: cfg.worker_id,
        ..ActorStats::default()
    };
    let mut rollout: Vec<Transition> = Vec::with_capacity(cfg.rollout_length);
    let mut episode_return = 0.0f64;
    let mut rollout_started = Instant::now();

    'run: loop {
        if let Signal::Stop = poll_control(&ch.control, &mut cap)? {
            break;
        }
        if cfg.step_limit.is_some_and(|n| stats.steps >= n) {
            break;
        }
        if let Some(p) = ch.params.params_latest() {
            if p.version() > net.version() {
                stats.versions_adopted.push(p.version());
                net = QNetwork::from_params(p);
            }
        }

        let state = env.observation().to_vec();
        let q = net.forward(&state)?;
        let action = epsilon_greedy(&q, epsilon, &mut rng) as u32;
        let step = env.step(action)?;
        stats.steps += 1;
        tel.samples.add(1);
        episode_return += f64::from(step.reward);
        rollout.push(Transition {
            state,
            action,
            reward: step.reward,
            next_state: step.state.observation.clone(),
            done: step.done && !step.state.truncated,
        });
        if step.done {
            stats.episodes += 1;
            if let Some(tx) = &tel.episodes {
                let _ = tx.send(EpisodeEvent {
                    group_id: cfg.group_id,
                    actor_id: cfg.worker_id,
                    ret: episode_return,
                    length: step.state.step_count,
                    t_ns: tel.origin.elapsed().as_nanos() as u64,
                });
            }
            episode_return = 0.0;
            epsilon = (epsilon * hp.epsilon_decay).max(hp.epsilon_min);
            env.reset()?;
        }

        if rollout.len() == cfg.rollout_length {
            let produced_at = tel.origin.elapsed().as_nanos() as u64;
            let batch = std::mem::replace(&mut rollout, Vec::with_capacity(cfg.rollout_length));
            let traj = Trajectory::new(batch, net.version(), cfg.worker_id, produced_at)
                .expect("rollout is non-empty and uniform");
            let env = Envelope::new(
                Kind::Trajectory,
                cfg.worker_id,
                traj.policy_version,
                encode_trajectory(&traj),
            );
            match ch.trajectories.push_send(env) {
                Ok(()) => stats.trajectories_sent += 1,
                Err(CommError::Closed) => break,
                Err(e) => return Err(e.into()),
            }
            if let Some(rate) = cap {
                let min = Duration::from_secs_f64(cfg.rollout_length as f64 / rate);
                let mut stop = false;
                sleep_until(rollout_started + min, || {
                    stop = matches!(poll_control(&ch.control, &mut cap), Ok(Signal::Stop) | Err(_));
                    stop || cap.is_none()
                });
                if stop {
                    break 'run;
                }
            }
            rollout_started = Instant::now();
        }
    }
    stats.final_epsilon = epsilon;
    stats.params_channel = ch.params.stats();
    let _ = ch.trajectories.close();
    Ok(stats)
}
