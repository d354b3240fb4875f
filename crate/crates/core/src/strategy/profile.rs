use std::thread;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::StrategyError;
use crate::algo::{self, Adam, QNetwork};
use crate::comms::payload::encode_trajectory;
use crate::comms::{inbox, Envelope, Kind};
use crate::config::RunConfig;
use crate::envs::Environment;
use crate::types::{Trajectory, Transition};

pub const MIN_PROFILE_SAMPLES: usize = 20;
const MAX_PROFILE_SAMPLES: usize = 5_000;

/// Single-worker measurements feeding the planner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThroughputProfile {
    /// Environment steps per second from one actor, sends included.
    pub tr_a1: f64,
    /// Updates per second from one learner on one core.
    pub tr_l1: f64,
    /// Seconds to produce one step.
    pub t_sp: f64,
    /// Seconds inside `push_send` for one trajectory message.
    pub t_sd: f64,
    /// Seconds the receiver needs per trajectory message when saturated.
    pub t_rv: f64,
    /// Cores one learner can use before its throughput stops growing.
    pub learner_core_saturation: f64,
    pub measured_on: String,
}

impl ThroughputProfile {
    pub fn validate(&self) -> Result<(), StrategyError> {
        for (name, v) in [
            ("tr_a1", self.tr_a1),
            ("tr_l1", self.tr_l1),
            ("t_sp", self.t_sp),
            ("t_sd", self.t_sd),
            ("t_rv", self.t_rv),
            ("learner_core_saturation", self.learner_core_saturation),
        ] {
            super::positive(name, v)?;
        }
        Ok(())
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn enough(what: &'static str, xs: &[f64]) -> Result<(), StrategyError> {
    if xs.len() < MIN_PROFILE_SAMPLES {
        Err(StrategyError::InsufficientSamples {
            what,
            got: xs.len(),
            needed: MIN_PROFILE_SAMPLES,
        })
    } else {
        Ok(())
    }
}

fn run_err(e: impl std::fmt::Display) -> StrategyError {
    StrategyError::Run(e.to_string())
}

/// Measures one actor, one learner and one sender/receiver pair, each for a
/// third of `duration`, and reports medians.
///
/// The learner is single-threaded, so its core saturation is one core.
pub fn profile(cfg: &RunConfig, duration: Duration) -> Result<ThroughputProfile, StrategyError> {
    let spec = cfg.env_spec().map_err(run_err)?;
    let layout = cfg.layout().map_err(run_err)?;
    let hp = cfg.training.hyper_params();
    let phase = duration / 3;
    let seed = cfg.environment.seed;

    // actor: rollouts of rollout_length steps under the exploration policy
    let mut env = Environment::new(spec.clone(), seed).map_err(run_err)?;
    let net = QNetwork::init(layout.clone(), cfg.model.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut rollout_secs = Vec::new();
    let mut last_rollout: Vec<Transition> = Vec::new();
    let start = Instant::now();
    while start.elapsed() < phase && rollout_secs.len() < MAX_PROFILE_SAMPLES {
        let t0 = Instant::now();
        let mut rollout = Vec::with_capacity(hp.rollout_length);
        for _ in 0..hp.rollout_length {
            let s = env.observation().to_vec();
            let q = net.forward(&s).map_err(run_err)?;
            let a = algo::epsilon_greedy(&q, hp.epsilon, &mut rng) as u32;
            let r = env.step(a).map_err(run_err)?;
            rollout.push(Transition {
                state: s,
                action: a,
                reward: r.reward,
                next_state: r.state.observation.clone(),
                done: r.done,
            });
            if r.state.terminal || r.state.truncated {
                env.reset().map_err(run_err)?;
            }
        }
        rollout_secs.push(t0.elapsed().as_secs_f64());
        last_rollout = rollout;
    }
    enough("rollout", &rollout_secs)?;
    let t_sp = median(rollout_secs) / hp.rollout_length as f64;

    // learner: updates on batches drawn from the observed transitions
    let batch: Vec<Transition> = last_rollout
        .iter()
        .cycle()
        .take(hp.batch_size)
        .cloned()
        .collect();
    let mut online = net.clone();
    let target = algo::sync_target(&online);
    let mut opt = Adam::new(layout.param_count(), hp.alpha, cfg.training.adam_epsilon);
    let latency = cfg.training.update_latency();
    let mut update_secs = Vec::new();
    let start = Instant::now();
    while start.elapsed() < phase && update_secs.len() < MAX_PROFILE_SAMPLES {
        let t0 = Instant::now();
        let (next, _) =
            algo::dqn_update(&online, &target, &batch, hp.gamma, &mut opt).map_err(run_err)?;
        online = next;
        if !latency.is_zero() {
            thread::sleep(latency);
        }
        update_secs.push(t0.elapsed().as_secs_f64());
    }
    enough("update", &update_secs)?;
    let tr_l1 = 1.0 / median(update_secs);

    // comms: unsaturated sends for t_sd, then a flooding sender for t_rv
    let traj = Trajectory::new(last_rollout, 0, 0, 0).map_err(run_err)?;
    let payload = encode_trajectory(&traj);
    let transport = cfg.distribution.transport();
    let depth = cfg.distribution.queue_depth;
    let (rx, addr) = inbox(transport, depth).map_err(run_err)?;
    let tx = addr.connect(0, depth).map_err(run_err)?;
    let half = phase / 2;
    let mut send_secs = Vec::new();
    let start = Instant::now();
    while start.elapsed() < half && send_secs.len() < MAX_PROFILE_SAMPLES {
        let env = Envelope::new(Kind::Trajectory, 0, 0, payload.clone());
        let t0 = Instant::now();
        tx.push_send(env).map_err(run_err)?;
        send_secs.push(t0.elapsed().as_secs_f64());
        loop {
            match rx.wait_recv(Duration::from_secs(1)).map_err(run_err)? {
                Some(_) => break,
                None => continue,
            }
        }
    }
    enough("send", &send_secs)?;
    let t_sd = median(send_secs);

    let flood_payload = payload.clone();
    let flood = thread::spawn(move || {
        let deadline = Instant::now() + half;
        let mut n = 0usize;
        while Instant::now() < deadline && n < MAX_PROFILE_SAMPLES + 1 {
            let env = Envelope::new(Kind::Trajectory, 0, 0, flood_payload.clone());
            if tx.push_send(env).is_err() {
                break;
            }
            n += 1;
        }
        let _ = tx.close();
    });
    drop(addr);
    let mut gaps = Vec::new();
    let mut last: Option<Instant> = None;
    loop {
        match rx.wait_recv(Duration::from_millis(100)) {
            Ok(Some(_)) => {
                let now = Instant::now();
                if let Some(prev) = last {
                    gaps.push((now - prev).as_secs_f64());
                }
                last = Some(now);
            }
            Ok(None) => {}
            Err(_) => break,
        }
    }
    flood.join().map_err(|_| run_err("sender panicked"))?;
    // the first gaps include queue ramp-up; the backlog keeps the rest
    // saturated
    enough("receive", &gaps)?;
    let t_rv = median(gaps);

    let tr_a1 = hp.rollout_length as f64 / (t_sp * hp.rollout_length as f64 + t_sd);
    let p = ThroughputProfile {
        tr_a1,
        tr_l1,
        t_sp,
        t_sd,
        t_rv,
        learner_core_saturation: 1.0,
        measured_on: format!(
            "{}:{:?}:batch{}:rollout{}:{:?}",
            cfg.environment.name, layout.sizes, hp.batch_size, hp.rollout_length, transport
        ),
    };
    p.validate()?;
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn too_short_duration_is_an_error() {
        let mut cfg = RunConfig::default();
        cfg.environment.step_latency_ms = 5.0;
        let err = profile(&cfg, Duration::from_millis(30)).unwrap_err();
        assert!(matches!(err, StrategyError::InsufficientSamples { what: "rollout", .. }), "{err}");
    }
}
