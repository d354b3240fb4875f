mod common;

use std::collections::HashMap;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use pushrl::algo::{argmax, QNetwork};
use pushrl::comms::payload::{decode_trajectory, encode_control, ControlMsg};
use pushrl::comms::{inbox, subscription, CommError, Envelope, Kind, ParamPublisher, Transport};
use pushrl::config::{Mode, RunConfig, TransportKind};
use pushrl::envs::gridworld::{one_hot, CELLS, GOAL, START};
use pushrl::envs::{Environment, EnvSpec};
use pushrl::replay::ReplayBuffer;
use pushrl::runtime::{
    actor_loop, buffer_loop, learner_loop, run_serial, run_training, ActorChannels, ActorTelemetry,
    BufferChannels, LearnerChannels, LearnerOptions, Role, RuntimeError, StopReason, WorkerConfig,
    ORCHESTRATOR_ID,
};
use pushrl::telemetry::{CounterName, ThroughputCounter};
use pushrl::types::{HyperParams, Layout};

fn cartpole_cfg() -> RunConfig {
    RunConfig::default()
}

fn actor_tel() -> ActorTelemetry {
    ActorTelemetry {
        origin: Instant::now(),
        samples: ThroughputCounter::new(CounterName::Sample),
        episodes: None,
    }
}

#[test]
fn actor_pushes_one_trajectory_per_rollout() {
    let cfg = cartpole_cfg();
    let mut wcfg = WorkerConfig::new(Role::Actor, 3, 0, &cfg);
    wcfg.step_limit = Some(160);
    let (rx, addr) = inbox(Transport::InProcess, 64).unwrap();
    let (params, _sub_addr) = subscription(Transport::InProcess).unwrap();
    let (control, _ctl_addr) = inbox(Transport::InProcess, 4).unwrap();
    let net = QNetwork::init(cfg.layout().unwrap(), 0);
    let ch = ActorChannels {
        trajectories: addr.connect(3, 64).unwrap(),
        params,
        control,
    };
    drop(addr);
    let stats = actor_loop(&wcfg, cfg.env_spec().unwrap(), &HyperParams::default(), net.into_params(), ch, actor_tel())
        .unwrap();
    assert_eq!(stats.steps, 160);
    assert_eq!(stats.trajectories_sent, 10);
    let mut got = Vec::new();
    while let Ok(Some(env)) = rx.wait_recv(Duration::from_millis(100)) {
        assert_eq!(env.kind, Kind::Trajectory);
        assert_eq!(env.sender_id, 3);
        got.push(decode_trajectory(&env.payload).unwrap());
    }
    assert_eq!(got.len(), 10);
    assert!(got.iter().all(|t| t.len() == 16 && t.actor_id == 3 && t.policy_version == 0));
    assert!(matches!(rx.probe_recv(), Err(CommError::Closed)));
}

#[test]
fn actor_adopts_newer_parameters_without_waiting() {
    let cfg = cartpole_cfg();
    let mut wcfg = WorkerConfig::new(Role::Actor, 0, 0, &cfg);
    wcfg.step_limit = Some(64);
    let (_rx, addr) = inbox(Transport::InProcess, 64).unwrap();
    let (params, sub_addr) = subscription(Transport::InProcess).unwrap();
    let (control, _ctl_addr) = inbox(Transport::InProcess, 4).unwrap();
    let net = QNetwork::init(cfg.layout().unwrap(), 0);
    let mut publisher = ParamPublisher::new(9);
    publisher.add(&sub_addr, 4).unwrap();
    let newer = net.params().successor(net.params().theta().to_vec()).successor(net.params().theta().to_vec());
    publisher.publish(&newer).unwrap();
    let ch = ActorChannels {
        trajectories: addr.connect(0, 64).unwrap(),
        params,
        control,
    };
    let stats = actor_loop(&wcfg, cfg.env_spec().unwrap(), &HyperParams::default(), net.into_params(), ch, actor_tel())
        .unwrap();
    assert_eq!(stats.versions_adopted, vec![2]);
}

#[test]
fn actor_stops_on_control_message() {
    let cfg = cartpole_cfg();
    let wcfg = WorkerConfig::new(Role::Actor, 0, 0, &cfg);
    let (_rx, addr) = inbox(Transport::InProcess, 1 << 16).unwrap();
    let (params, _s) = subscription(Transport::InProcess).unwrap();
    let (control, ctl_addr) = inbox(Transport::InProcess, 4).unwrap();
    let ctl = ctl_addr.connect(ORCHESTRATOR_ID, 4).unwrap();
    let net = QNetwork::init(cfg.layout().unwrap(), 0);
    let ch = ActorChannels {
        trajectories: addr.connect(0, 64).unwrap(),
        params,
        control,
    };
    let spec = cfg.env_spec().unwrap();
    let h = thread::spawn(move || actor_loop(&wcfg, spec, &HyperParams::default(), net.into_params(), ch, actor_tel()));
    thread::sleep(Duration::from_millis(50));
    ctl.push_send(Envelope::new(Kind::Control, 0, 0, encode_control(&ControlMsg::Stop))).unwrap();
    let stats = h.join().unwrap().unwrap();
    assert!(stats.steps > 0);
}

/// Lead learner against a buffer that never receives data: every request
/// gets a warmup reply and no update happens.
#[test]
fn learner_on_empty_buffer_only_gets_warmup_replies() {
    let cfg = cartpole_cfg();
    let (buf_rx, buf_addr) = inbox(Transport::InProcess, 64).unwrap();
    let (l_rx, l_addr) = inbox(Transport::InProcess, 64).unwrap();
    let mut replies = HashMap::new();
    replies.insert(1, l_addr.connect(0, 64).unwrap());
    let bcfg = WorkerConfig::new(Role::Buffer, 0, 0, &cfg);
    let received = ThroughputCounter::new(CounterName::Receive);
    let buffer = thread::spawn(move || {
        buffer_loop(&bcfg, ReplayBuffer::new(2048, 32, 32), BufferChannels { inbox: buf_rx, learners: replies }, received)
    });
    let ctl = l_addr.connect(ORCHESTRATOR_ID, 4).unwrap();
    let ch = LearnerChannels::Lead {
        inbox: l_rx,
        buffer: buf_addr.connect(1, 64).unwrap(),
        publisher: ParamPublisher::new(1),
    };
    drop(buf_addr);
    drop(l_addr);
    let lcfg = WorkerConfig::new(Role::Learner, 1, 0, &cfg);
    let net = QNetwork::init(cfg.layout().unwrap(), 0);
    let train = ThroughputCounter::new(CounterName::Train);
    let t2 = Arc::clone(&train);
    let learner = thread::spawn(move || learner_loop(&lcfg, net, &HyperParams::default(), &LearnerOptions::default(), ch, t2));
    thread::sleep(Duration::from_millis(100));
    ctl.push_send(Envelope::new(Kind::Control, 0, 0, encode_control(&ControlMsg::Stop))).unwrap();
    ctl.close().unwrap();
    let stats = learner.join().unwrap().unwrap();
    let bstats = buffer.join().unwrap().unwrap();
    assert_eq!(stats.updates, 0);
    assert_eq!(train.count(), 0);
    assert!(stats.warmup_replies > 0);
    assert_eq!(bstats.batches_served, 0);
    assert_eq!(stats.final_params.unwrap().version(), 0);
}

fn short_distributed(budget: u64) -> RunConfig {
    let mut cfg = cartpole_cfg();
    cfg.training.step_budget = budget;
    cfg.training.target_return = Some(1e9);
    cfg.training.wall_time_limit_secs = Some(60.0);
    cfg
}

#[test]
fn publish_interval_and_target_syncs_follow_update_count() {
    let mut cfg = short_distributed(20_000);
    cfg.distribution.staleness_control = false;
    cfg.distribution.publish_interval = 5;
    cfg.training.target_update_interval = 40;
    cfg.distribution.max_updates_per_step = Some(1.0);
    let r = run_training(&cfg).unwrap();
    let lead = &r.groups[0].learners[0];
    assert!(lead.updates > 100, "only {} updates", lead.updates);
    assert_eq!(lead.versions_published, lead.updates / 5);
    assert_eq!(lead.target_syncs, lead.updates / 40);
    assert_eq!(lead.version_violations, 0);
    assert_eq!(r.versions_published, lead.versions_published);
    // actors only ever adopt published versions, in increasing order
    for a in &r.groups[0].actors {
        assert!(a.versions_adopted.windows(2).all(|w| w[0] < w[1]));
        assert!(a.versions_adopted.iter().all(|v| v % 5 == 0));
    }
}

#[test]
fn trajectories_are_conserved_end_to_end() {
    for transport in [TransportKind::InProcess, TransportKind::Tcp] {
        let mut cfg = short_distributed(8_000);
        cfg.distribution.n_actors = 3;
        cfg.distribution.transport = transport;
        let r = run_training(&cfg).unwrap();
        assert_eq!(r.stop_reason, StopReason::BudgetExhausted);
        let g = &r.groups[0];
        let sent: u64 = g.actors.iter().map(|a| a.trajectories_sent).sum();
        let steps: u64 = g.actors.iter().map(|a| a.steps).sum();
        let b = g.buffer.as_ref().unwrap();
        assert_eq!(b.trajectories, sent, "{transport:?}");
        assert_eq!(b.inserted_total, sent * 16);
        assert_eq!(r.total_steps, steps);
        assert_eq!(r.total_received, b.inserted_total);
        assert_eq!(b.inbox.in_flight(), 0);
        assert_eq!(b.inbox.sent_count, b.inbox.received_count);
        assert!(steps >= 8_000);
    }
}

#[test]
fn actors_with_fixed_step_limits_feed_exactly_their_output() {
    let cfg = cartpole_cfg();
    let (buf_rx, buf_addr) = inbox(Transport::InProcess, 16).unwrap();
    let bcfg = WorkerConfig::new(Role::Buffer, 0, 0, &cfg);
    let received = ThroughputCounter::new(CounterName::Receive);
    let r2 = Arc::clone(&received);
    let buffer = thread::spawn(move || {
        buffer_loop(&bcfg, ReplayBuffer::new(100_000, 32, 32), BufferChannels { inbox: buf_rx, learners: HashMap::new() }, r2)
    });
    let mut actors = Vec::new();
    for id in 1..=3u32 {
        let mut wcfg = WorkerConfig::new(Role::Actor, id, 0, &cfg);
        wcfg.step_limit = Some(1600);
        let (params, _s) = subscription(Transport::InProcess).unwrap();
        let (control, ctl_addr) = inbox(Transport::InProcess, 4).unwrap();
        let ch = ActorChannels {
            trajectories: buf_addr.connect(id, 16).unwrap(),
            params,
            control,
        };
        let spec = cfg.env_spec().unwrap();
        let net = QNetwork::init(cfg.layout().unwrap(), 0);
        actors.push(thread::spawn(move || {
            let _keep = ctl_addr;
            actor_loop(&wcfg, spec, &HyperParams::default(), net.into_params(), ch, actor_tel())
        }));
    }
    drop(buf_addr);
    for a in actors {
        let s = a.join().unwrap().unwrap();
        assert_eq!(s.trajectories_sent, 100);
    }
    let b = buffer.join().unwrap().unwrap();
    assert_eq!(b.trajectories, 300);
    assert_eq!(b.inserted_total, 4800);
    assert_eq!(received.count(), 4800);
}

fn greedy_path_length(params: &pushrl::types::ParamSet) -> Option<usize> {
    let net = QNetwork::from_params(params.clone());
    let mut env = Environment::new(EnvSpec::gridworld(100), 0).unwrap();
    let mut cell = START;
    for step in 1..=20 {
        let a = argmax(&net.forward(&one_hot(cell)).unwrap()) as u32;
        let r = env.step(a).unwrap();
        cell = r.state.observation.iter().position(|&v| v == 1.0).unwrap();
        if cell == GOAL {
            return Some(step);
        }
    }
    None
}

const POLICY_BUDGET: u64 = 100_000;

fn gridworld_cfg(mode: Mode) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.environment.name = "gridworld".into();
    cfg.distribution.mode = mode;
    // runs last well under a second; pace the actor from the start
    cfg.distribution.control_window_ms = 20;
    cfg.model.hidden = vec![];
    cfg.training.buffer_capacity = 512;
    cfg.training.alpha = 0.01;
    cfg.training.step_budget = 200_000;
    cfg.training.wall_time_limit_secs = Some(60.0);
    cfg
}

/// Both modes reach the target, and after a fixed budget the greedy
/// policy agrees with the value-iteration oracle on every non-goal cell.
#[test]
fn gridworld_policies_match_oracle_in_both_modes() {
    let oracle = common::grid_q_star(0.99);
    for mode in [Mode::Serial, Mode::Distributed] {
        let cfg = gridworld_cfg(mode);
        let t0 = Instant::now();
        let r = run_training(&cfg).unwrap();
        assert_eq!(r.stop_reason, StopReason::TargetReached, "{mode:?}");
        assert!(t0.elapsed() < Duration::from_secs(60));

        let mut cfg = gridworld_cfg(mode);
        cfg.training.target_return = Some(1e9);
        cfg.training.step_budget = POLICY_BUDGET;
        // off-policy learning reaches Q* only on cells it keeps visiting
        cfg.training.epsilon_min = 0.3;
        cfg.training.buffer_capacity = 8192;
        // Adam moves each weight by about alpha per step; the action gaps
        // here are about 0.02, so the steady-state jitter must be smaller
        cfg.training.alpha = 0.002;
        let r = run_training(&cfg).unwrap();
        let params = &r.final_params[0];
        assert_eq!(greedy_path_length(params), Some(common::grid_distance(START)), "{mode:?}");
        let net = QNetwork::from_params(params.clone());
        for cell in (0..CELLS).filter(|&c| c != GOAL) {
            let a = argmax(&net.forward(&one_hot(cell)).unwrap());
            assert!(common::optimal_actions(&oracle, cell, 1e-9).contains(&a), "{mode:?} cell {cell}");
        }
    }
}

#[test]
fn serial_mode_is_deterministic() {
    let mut cfg = gridworld_cfg(Mode::Serial);
    cfg.training.step_budget = 5_000;
    cfg.training.target_return = Some(10.0);
    let a = run_serial(&cfg, None).unwrap();
    let b = run_serial(&cfg, None).unwrap();
    let key = |r: &pushrl::runtime::RunReport| r.episodes.iter().map(|e| (e.index, e.ret.to_bits())).collect::<Vec<_>>();
    assert!(!a.episodes.is_empty());
    assert_eq!(key(&a), key(&b));
    assert_eq!(a.final_params[0], b.final_params[0]);
}

#[test]
fn helper_learners_contribute_gradients() {
    let mut cfg = short_distributed(6_000);
    cfg.distribution.n_learners = 2;
    cfg.distribution.max_gradient_lag = 1_000;
    let r = run_training(&cfg).unwrap();
    let g = &r.groups[0];
    assert_eq!(g.learners.len(), 2);
    let lead = g.learners.iter().find(|l| l.lead).unwrap();
    let helper = g.learners.iter().find(|l| !l.lead).unwrap();
    assert!(helper.updates > 0);
    assert_eq!(lead.gradients_applied + lead.gradients_dropped, helper.updates);
    assert!(lead.gradients_applied > 0);
}

#[test]
fn groups_train_independent_models() {
    let mut cfg = short_distributed(6_000);
    cfg.distribution.n_groups = 2;
    let r = run_training(&cfg).unwrap();
    assert_eq!(r.groups.len(), 2);
    assert_eq!(r.final_params.len(), 2);
    assert_ne!(r.final_params[0].theta(), r.final_params[1].theta());
    for g in &r.groups {
        assert!(g.buffer.as_ref().unwrap().trajectories > 0);
    }
}

#[test]
fn invalid_config_fails_before_spawning() {
    let mut cfg = cartpole_cfg();
    cfg.training.batch_size = 64;
    cfg.training.buffer_capacity = 32;
    cfg.training.warmup_size = 32;
    assert!(matches!(run_training(&cfg), Err(RuntimeError::Config(_))));
}

#[test]
fn wall_time_limit_stops_the_run() {
    let mut cfg = cartpole_cfg();
    cfg.training.target_return = Some(1e9);
    cfg.training.step_budget = u64::MAX;
    cfg.training.wall_time_limit_secs = Some(1.0);
    let t0 = Instant::now();
    let r = run_training(&cfg).unwrap();
    assert_eq!(r.stop_reason, StopReason::WallTimeLimit);
    assert!(t0.elapsed() < Duration::from_secs(10));
    assert!(!r.throughput.is_empty());
}

#[test]
fn one_hot_layout_is_linear() {
    let cfg = gridworld_cfg(Mode::Serial);
    assert_eq!(cfg.layout().unwrap(), Layout::new(vec![16, 4], true));
}
