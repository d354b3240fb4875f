//! Seedable environments: CartPole (continuous-state control) and a 4x4
//! GridWorld whose optimal values can be computed exactly.

use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EnvError {
    #[error("unknown environment `{0}`")]
    UnknownEnv(String),
    #[error("step called on a finished episode")]
    StepAfterTerminal,
    #[error("action {action} out of range for {n_actions} actions")]
    InvalidAction { action: u32, n_actions: u32 },
    #[error("invalid environment spec: {0}")]
    InvalidSpec(String),
    #[error("environment produced a non-finite observation")]
    Diverged,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvKind {
    CartPole,
    GridWorld,
}

impl FromStr for EnvKind {
    type Err = EnvError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "cartpole" => Ok(Self::CartPole),
            "gridworld" => Ok(Self::GridWorld),
            other => Err(EnvError::UnknownEnv(other.to_string())),
        }
    }
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::CartPole => "cartpole",
            Self::GridWorld => "gridworld",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvSpec {
    pub kind: EnvKind,
    pub obs_dim: usize,
    pub n_actions: u32,
    pub max_steps: u32,
    /// Extra wall-clock time spent inside every step, emulating a heavier
    /// simulator. Zero for the plain environments.
    pub step_latency: Duration,
}

impl EnvSpec {
    pub fn cartpole(max_steps: u32) -> Self {
        Self {
            kind: EnvKind::CartPole,
            obs_dim: 4,
            n_actions: 2,
            max_steps,
            step_latency: Duration::ZERO,
        }
    }

    pub fn gridworld(max_steps: u32) -> Self {
        Self {
            kind: EnvKind::GridWorld,
            obs_dim: gridworld::CELLS,
            n_actions: 4,
            max_steps,
            step_latency: Duration::ZERO,
        }
    }

    pub fn for_kind(kind: EnvKind, max_steps: u32) -> Self {
        match kind {
            EnvKind::CartPole => Self::cartpole(max_steps),
            EnvKind::GridWorld => Self::gridworld(max_steps),
        }
    }

    pub fn with_step_latency(mut self, latency: Duration) -> Self {
        self.step_latency = latency;
        self
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let (obs, acts) = match self.kind {
            EnvKind::CartPole => (4, 2),
            EnvKind::GridWorld => (gridworld::CELLS, 4),
        };
        if self.obs_dim != obs || self.n_actions != acts {
            return Err(EnvError::InvalidSpec(format!(
                "{} requires obs_dim={obs} n_actions={acts}",
                self.kind
            )));
        }
        if self.max_steps == 0 {
            return Err(EnvError::InvalidSpec("max_steps must be positive".into()));
        }
        Ok(())
    }
}

/// Observable state plus whatever the dynamics need at full precision.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub observation: Vec<f32>,
    pub step_count: u32,
    /// Episode over; no further step is accepted.
    pub terminal: bool,
    /// Episode ended by the step limit rather than a terminal state.
    pub truncated: bool,
    internal: Internal,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Internal {
    CartPole([f64; 4]),
    Grid(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub state: EnvState,
    pub reward: f32,
    /// Episode finished, either terminal or truncated.
    pub done: bool,
}

pub fn env_reset(spec: &EnvSpec, seed: u64) -> Result<EnvState, EnvError> {
    spec.validate()?;
    let internal = match spec.kind {
        EnvKind::CartPole => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut s = [0.0f64; 4];
            for v in &mut s {
                *v = rng.gen_range(-0.05..0.05);
            }
            Internal::CartPole(s)
        }
        EnvKind::GridWorld => Internal::Grid(gridworld::START),
    };
    Ok(EnvState {
        observation: observe(internal),
        step_count: 0,
        terminal: false,
        truncated: false,
        internal,
    })
}

/// Advances one step. Both environments are deterministic given the action;
/// the rng is accepted so stochastic variants share the signature.
pub fn env_step<R: Rng + ?Sized>(
    spec: &EnvSpec,
    state: &EnvState,
    action: u32,
    _rng: &mut R,
) -> Result<StepResult, EnvError> {
    if state.terminal {
        return Err(EnvError::StepAfterTerminal);
    }
    if action >= spec.n_actions {
        return Err(EnvError::InvalidAction {
            action,
            n_actions: spec.n_actions,
        });
    }
    if !spec.step_latency.is_zero() {
        std::thread::sleep(spec.step_latency);
    }
    let step_count = state.step_count + 1;
    let (internal, reward, terminated) = match state.internal {
        Internal::CartPole(s) => {
            let next = cartpole::euler_step(s, action);
            if next.iter().any(|v| !v.is_finite()) {
                return Err(EnvError::Diverged);
            }
            (Internal::CartPole(next), 1.0, cartpole::out_of_bounds(next))
        }
        Internal::Grid(cell) => {
            let next = gridworld::move_from(cell, action);
            if next == gridworld::GOAL {
                (Internal::Grid(next), gridworld::GOAL_REWARD, true)
            } else {
                (Internal::Grid(next), gridworld::STEP_REWARD, false)
            }
        }
    };
    let truncated = !terminated && step_count >= spec.max_steps;
    let done = terminated || truncated;
    Ok(StepResult {
        state: EnvState {
            observation: observe(internal),
            step_count,
            terminal: done,
            truncated,
            internal,
        },
        reward,
        done,
    })
}

fn observe(internal: Internal) -> Vec<f32> {
    match internal {
        Internal::CartPole(s) => s.iter().map(|&v| v as f32).collect(),
        Internal::Grid(cell) => gridworld::one_hot(cell),
    }
}

/// Stateful wrapper owned by a single actor.
#[derive(Debug)]
pub struct Environment {
    spec: EnvSpec,
    state: EnvState,
    rng: ChaCha8Rng,
    episodes: u64,
    seed: u64,
}

impl Environment {
    pub fn new(spec: EnvSpec, seed: u64) -> Result<Self, EnvError> {
        let state = env_reset(&spec, seed)?;
        Ok(Self {
            spec,
            state,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0fe4),
            episodes: 0,
            seed,
        })
    }

    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    pub fn observation(&self) -> &[f32] {
        &self.state.observation
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    /// Starts a new episode; each episode gets a distinct derived seed.
    pub fn reset(&mut self) -> Result<&[f32], EnvError> {
        self.episodes += 1;
        let seed = self
            .seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(self.episodes);
        self.state = env_reset(&self.spec, seed)?;
        Ok(&self.state.observation)
    }

    pub fn step(&mut self, action: u32) -> Result<StepResult, EnvError> {
        let res = env_step(&self.spec, &self.state, action, &mut self.rng)?;
        self.state = res.state.clone();
        Ok(res)
    }
}

pub mod cartpole {
    //! Cart-pole dynamics with the usual constants and explicit Euler
    //! integration.

    pub const GRAVITY: f64 = 9.8;
    pub const MASS_CART: f64 = 1.0;
    pub const MASS_POLE: f64 = 0.1;
    pub const TOTAL_MASS: f64 = MASS_CART + MASS_POLE;
    /// Half the pole length.
    pub const HALF_LENGTH: f64 = 0.5;
    pub const POLE_MASS_LENGTH: f64 = MASS_POLE * HALF_LENGTH;
    pub const FORCE_MAG: f64 = 10.0;
    pub const TAU: f64 = 0.02;
    pub const X_THRESHOLD: f64 = 2.4;
    pub const THETA_THRESHOLD: f64 = 12.0 * 2.0 * std::f64::consts::PI / 360.0;

    /// `s = [x, x_dot, theta, theta_dot]`.
    pub fn euler_step(s: [f64; 4], action: u32) -> [f64; 4] {
        let [x, x_dot, theta, theta_dot] = s;
        let force = if action == 1 { FORCE_MAG } else { -FORCE_MAG };
        let (sin, cos) = theta.sin_cos();
        let temp = (force + POLE_MASS_LENGTH * theta_dot * theta_dot * sin) / TOTAL_MASS;
        let theta_acc = (GRAVITY * sin - cos * temp)
            / (HALF_LENGTH * (4.0 / 3.0 - MASS_POLE * cos * cos / TOTAL_MASS));
        let x_acc = temp - POLE_MASS_LENGTH * theta_acc * cos / TOTAL_MASS;
        [
            x + TAU * x_dot,
            x_dot + TAU * x_acc,
            theta + TAU * theta_dot,
            theta_dot + TAU * theta_acc,
        ]
    }

    pub fn out_of_bounds(s: [f64; 4]) -> bool {
        s[0].abs() > X_THRESHOLD || s[2].abs() > THETA_THRESHOLD
    }
}

pub mod gridworld {
    //! 4x4 grid, start in the top-left cell, goal in the bottom-right.
    //! Actions: 0 up, 1 right, 2 down, 3 left. Moving into the border
    //! leaves the agent in place.

    pub const SIDE: usize = 4;
    pub const CELLS: usize = SIDE * SIDE;
    pub const START: usize = 0;
    pub const GOAL: usize = CELLS - 1;
    pub const STEP_REWARD: f32 = -0.01;
    pub const GOAL_REWARD: f32 = 1.0;
    pub const N_ACTIONS: usize = 4;

    pub fn move_from(cell: usize, action: u32) -> usize {
        let (r, c) = (cell / SIDE, cell % SIDE);
        let (r, c) = match action {
            0 => (r.saturating_sub(1), c),
            1 => (r, (c + 1).min(SIDE - 1)),
            2 => ((r + 1).min(SIDE - 1), c),
            3 => (r, c.saturating_sub(1)),
            _ => (r, c),
        };
        r * SIDE + c
    }

    pub fn one_hot(cell: usize) -> Vec<f32> {
        let mut v = vec![0.0; CELLS];
        v[cell] = 1.0;
        v
    }

    /// Reward for arriving in `next`.
    pub fn reward(next: usize) -> f32 {
        if next == GOAL {
            GOAL_REWARD
        } else {
            STEP_REWARD
        }
    }
}
