//! Shared vocabulary: transitions, trajectories, versioned parameter sets and
//! the training hyperparameters every worker agrees on.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Identifier of a worker within a run.
pub type WorkerId = u32;

/// One `(s, a, r, s', done)` step.
///
/// `done` marks a true terminal state. An episode cut short by a step limit
/// ends without setting it, so the learner still bootstraps from `s'`.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f32>,
    pub action: u32,
    pub reward: f32,
    pub next_state: Vec<f32>,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TransitionViolation {
    #[error("state dimension mismatch: expected {expected}, state has {state}, next_state has {next_state}")]
    DimensionMismatch {
        expected: usize,
        state: usize,
        next_state: usize,
    },
    #[error("action {action} out of range for {n_actions} actions")]
    ActionOutOfRange { action: u32, n_actions: u32 },
    #[error("non-finite value in {field}")]
    NonFinite { field: &'static str },
}

/// Checks the transition invariants against an environment's dimensions.
pub fn validate_transition(
    t: &Transition,
    obs_dim: usize,
    n_actions: u32,
) -> Result<(), TransitionViolation> {
    if t.state.len() != obs_dim || t.next_state.len() != obs_dim {
        return Err(TransitionViolation::DimensionMismatch {
            expected: obs_dim,
            state: t.state.len(),
            next_state: t.next_state.len(),
        });
    }
    if t.action >= n_actions {
        return Err(TransitionViolation::ActionOutOfRange {
            action: t.action,
            n_actions,
        });
    }
    if !t.reward.is_finite() {
        return Err(TransitionViolation::NonFinite { field: "reward" });
    }
    if t.state.iter().any(|v| !v.is_finite()) {
        return Err(TransitionViolation::NonFinite { field: "state" });
    }
    if t.next_state.iter().any(|v| !v.is_finite()) {
        return Err(TransitionViolation::NonFinite { field: "next_state" });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TrajectoryError {
    #[error("trajectory has no transitions")]
    Empty,
    #[error("transition {index} has state dimension {found}, expected {expected}")]
    MixedDimensions {
        index: usize,
        expected: usize,
        found: usize,
    },
}

/// Ordered transitions from one rollout segment, stamped with the policy
/// version that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    transitions: Vec<Transition>,
    pub policy_version: u64,
    pub actor_id: WorkerId,
    /// Monotonic nanoseconds since the run epoch.
    pub produced_at: u64,
}

impl Trajectory {
    pub fn new(
        transitions: Vec<Transition>,
        policy_version: u64,
        actor_id: WorkerId,
        produced_at: u64,
    ) -> Result<Self, TrajectoryError> {
        let first = transitions.first().ok_or(TrajectoryError::Empty)?;
        let dim = first.state.len();
        for (index, t) in transitions.iter().enumerate() {
            for found in [t.state.len(), t.next_state.len()] {
                if found != dim {
                    return Err(TrajectoryError::MixedDimensions {
                        index,
                        expected: dim,
                        found,
                    });
                }
            }
        }
        Ok(Self {
            transitions,
            policy_version,
            actor_id,
            produced_at,
        })
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.transitions
    }

    pub fn into_transitions(self) -> Vec<Transition> {
        self.transitions
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn obs_dim(&self) -> usize {
        self.transitions[0].state.len()
    }
}

/// Shape of a fully connected network: `sizes[0]` inputs, `sizes[last]`
/// outputs, rectified-linear activations between layers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub sizes: Vec<usize>,
    pub bias: bool,
}

impl Layout {
    pub fn new(sizes: Vec<usize>, bias: bool) -> Self {
        assert!(sizes.len() >= 2, "a layout needs at least input and output sizes");
        assert!(sizes.iter().all(|&s| s > 0), "layer sizes must be positive");
        Self { sizes, bias }
    }

    /// `[obs_dim, hidden.., n_actions]` with biases.
    pub fn mlp(obs_dim: usize, hidden: &[usize], n_actions: usize) -> Self {
        let mut sizes = Vec::with_capacity(hidden.len() + 2);
        sizes.push(obs_dim);
        sizes.extend_from_slice(hidden);
        sizes.push(n_actions);
        Self::new(sizes, true)
    }

    pub fn inputs(&self) -> usize {
        self.sizes[0]
    }

    pub fn outputs(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn n_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.sizes
            .windows(2)
            .map(|w| w[0] * w[1] + if self.bias { w[1] } else { 0 })
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("parameter vector has {found} values, layout {layout:?} needs {expected}")]
pub struct LayoutMismatch {
    pub layout: Layout,
    pub expected: usize,
    pub found: usize,
}

/// Immutable, versioned snapshot of network parameters.
///
/// Cloning is cheap; the parameter vector is shared.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    theta: Arc<[f64]>,
    version: u64,
    layout: Layout,
}

impl ParamSet {
    pub fn new(theta: Vec<f64>, version: u64, layout: Layout) -> Result<Self, LayoutMismatch> {
        let expected = layout.param_count();
        if theta.len() != expected {
            return Err(LayoutMismatch {
                layout,
                expected,
                found: theta.len(),
            });
        }
        Ok(Self {
            theta: theta.into(),
            version,
            layout,
        })
    }

    pub fn zeros(layout: Layout) -> Self {
        let n = layout.param_count();
        Self {
            theta: vec![0.0; n].into(),
            version: 0,
            layout,
        }
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    /// Same parameters under a different version stamp.
    pub fn with_version(&self, version: u64) -> Self {
        Self {
            theta: Arc::clone(&self.theta),
            version,
            layout: self.layout.clone(),
        }
    }

    /// Successor snapshot holding `theta`, stamped `version + 1`.
    pub fn successor(&self, theta: Vec<f64>) -> Self {
        debug_assert_eq!(theta.len(), self.theta.len());
        Self {
            theta: theta.into(),
            version: self.version + 1,
            layout: self.layout.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum HyperParamsError {
    #[error("{field} out of range: {detail}")]
    OutOfRange { field: &'static str, detail: String },
    #[error("batch_size {batch_size} exceeds buffer_capacity {buffer_capacity}")]
    BatchExceedsCapacity {
        batch_size: usize,
        buffer_capacity: usize,
    },
    #[error("warmup_size {warmup_size} is smaller than batch_size {batch_size}")]
    WarmupBelowBatch {
        warmup_size: usize,
        batch_size: usize,
    },
    #[error("warmup_size {warmup_size} exceeds buffer_capacity {buffer_capacity}")]
    WarmupExceedsCapacity {
        warmup_size: usize,
        buffer_capacity: usize,
    },
}

/// Training hyperparameters. Defaults are the DQN CartPole settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperParams {
    pub gamma: f64,
    /// Learning rate.
    pub alpha: f64,
    /// Initial exploration rate.
    pub epsilon: f64,
    /// Multiplicative decay applied at the end of every episode.
    pub epsilon_decay: f64,
    pub epsilon_min: f64,
    /// Learner updates between target network syncs.
    pub target_update_interval: u64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub warmup_size: usize,
    pub rollout_length: usize,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            alpha: 5e-4,
            epsilon: 1.0,
            epsilon_decay: 0.98,
            epsilon_min: 0.01,
            target_update_interval: 100,
            batch_size: 32,
            buffer_capacity: 2048,
            warmup_size: 32,
            rollout_length: 16,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<(), HyperParamsError> {
        fn range(field: &'static str, ok: bool, detail: String) -> Result<(), HyperParamsError> {
            if ok {
                Ok(())
            } else {
                Err(HyperParamsError::OutOfRange { field, detail })
            }
        }
        range(
            "gamma",
            (0.0..1.0).contains(&self.gamma),
            format!("{} not in [0, 1)", self.gamma),
        )?;
        range(
            "alpha",
            self.alpha > 0.0 && self.alpha.is_finite(),
            format!("{} must be positive", self.alpha),
        )?;
        range(
            "epsilon",
            (0.0..=1.0).contains(&self.epsilon),
            format!("{} not in [0, 1]", self.epsilon),
        )?;
        range(
            "epsilon_decay",
            self.epsilon_decay > 0.0 && self.epsilon_decay <= 1.0,
            format!("{} not in (0, 1]", self.epsilon_decay),
        )?;
        range(
            "epsilon_min",
            (0.0..=1.0).contains(&self.epsilon_min),
            format!("{} not in [0, 1]", self.epsilon_min),
        )?;
        for (field, v) in [
            ("target_update_interval", self.target_update_interval as usize),
            ("batch_size", self.batch_size),
            ("buffer_capacity", self.buffer_capacity),
            ("warmup_size", self.warmup_size),
            ("rollout_length", self.rollout_length),
        ] {
            range(field, v > 0, "must be positive".into())?;
        }
        if self.batch_size > self.buffer_capacity {
            return Err(HyperParamsError::BatchExceedsCapacity {
                batch_size: self.batch_size,
                buffer_capacity: self.buffer_capacity,
            });
        }
        if self.warmup_size < self.batch_size {
            return Err(HyperParamsError::WarmupBelowBatch {
                warmup_size: self.warmup_size,
                batch_size: self.batch_size,
            });
        }
        if self.warmup_size > self.buffer_capacity {
            return Err(HyperParamsError::WarmupExceedsCapacity {
                warmup_size: self.warmup_size,
                buffer_capacity: self.buffer_capacity,
            });
        }
        Ok(())
    }
}
