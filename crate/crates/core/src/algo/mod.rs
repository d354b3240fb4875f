//! Value-function approximation: the Q-network, epsilon-greedy selection,
//! the one-step TD(0) update and the batched DQN update with a target
//! network.

mod network;
mod optim;

use rand::Rng;
use thiserror::Error;

pub use network::QNetwork;
pub use optim::Adam;

use crate::types::{ParamSet, Transition};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AlgoError {
    #[error("state dimension {found} does not match network input {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("action {action} out of range for {n_actions} outputs")]
    ActionOutOfRange { action: usize, n_actions: usize },
    #[error("target network layout differs from the online network")]
    LayoutMismatch,
    #[error("empty batch")]
    EmptyBatch,
    #[error("divergence: non-finite {0}")]
    NonFinite(&'static str),
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// With probability `epsilon` a uniformly random action, otherwise the
/// greedy one.
pub fn epsilon_greedy<R: Rng + ?Sized>(values: &[f64], epsilon: f64, rng: &mut R) -> usize {
    assert!(!values.is_empty(), "epsilon_greedy needs at least one action");
    if epsilon > 0.0 && rng.gen::<f64>() < epsilon {
        rng.gen_range(0..values.len())
    } else {
        argmax(values)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TdResult {
    pub delta: f64,
    pub grad_norm: f64,
    pub updated: ParamSet,
}

/// One semi-gradient TD(0) step on `Q(s, a)`:
///
/// ```text
/// delta = r + gamma * max_a' Q(s', a') - Q(s, a)      (no bootstrap when done)
/// theta <- theta + alpha * delta * grad Q(s, a)
/// ```
pub fn td0_update(
    net: &QNetwork,
    t: &Transition,
    gamma: f64,
    alpha: f64,
) -> Result<TdResult, AlgoError> {
    let action = t.action as usize;
    let grad = net.action_gradient(&t.state, action)?;
    let q = net.forward(&t.state)?[action];
    let bootstrap = if t.done {
        0.0
    } else {
        let next = net.forward(&t.next_state)?;
        next[argmax(&next)]
    };
    let delta = t.reward as f64 + gamma * bootstrap - q;
    if !delta.is_finite() {
        return Err(AlgoError::NonFinite("TD error"));
    }
    let theta: Vec<f64> = net
        .params()
        .theta()
        .iter()
        .zip(&grad)
        .map(|(p, g)| p + alpha * delta * g)
        .collect();
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(AlgoError::NonFinite("parameters"));
    }
    let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    Ok(TdResult {
        delta,
        grad_norm,
        updated: net.params().successor(theta),
    })
}

/// Regression targets `y = r + gamma * max_a Q_target(s', a)` (`y = r` when
/// done).
pub fn dqn_targets(
    target: &QNetwork,
    batch: &[Transition],
    gamma: f64,
) -> Result<Vec<f64>, AlgoError> {
    batch
        .iter()
        .map(|t| {
            if t.done {
                Ok(t.reward as f64)
            } else {
                let next = target.forward(&t.next_state)?;
                Ok(t.reward as f64 + gamma * next[argmax(&next)])
            }
        })
        .collect()
}

/// Mean squared TD error of `net` against fixed targets, and its gradient.
pub fn dqn_loss_and_grad(
    net: &QNetwork,
    batch: &[Transition],
    targets: &[f64],
) -> Result<(f64, Vec<f64>), AlgoError> {
    if batch.is_empty() {
        return Err(AlgoError::EmptyBatch);
    }
    let n = batch.len() as f64;
    let n_actions = net.n_actions();
    let mut grad = vec![0.0; net.params().theta().len()];
    let mut loss = 0.0;
    let mut d_out = vec![0.0; n_actions];
    for (t, &y) in batch.iter().zip(targets) {
        net.check_input(&t.state)?;
        let a = t.action as usize;
        if a >= n_actions {
            return Err(AlgoError::ActionOutOfRange {
                action: a,
                n_actions,
            });
        }
        let trace = net.trace(&t.state);
        let residual = y - trace.output()[a];
        loss += residual * residual / n;
        d_out.fill(0.0);
        d_out[a] = -2.0 * residual / n;
        net.backward(&trace, &d_out, &mut grad);
    }
    if !loss.is_finite() {
        return Err(AlgoError::NonFinite("loss"));
    }
    Ok((loss, grad))
}

/// Batched DQN step: targets from `target`, one Adam step on the mean
/// squared TD error. Returns the updated network (version + 1) and the loss
/// measured before the step.
pub fn dqn_update(
    net: &QNetwork,
    target: &QNetwork,
    batch: &[Transition],
    gamma: f64,
    opt: &mut Adam,
) -> Result<(QNetwork, f64), AlgoError> {
    if batch.is_empty() {
        return Err(AlgoError::EmptyBatch);
    }
    if target.layout() != net.layout() {
        return Err(AlgoError::LayoutMismatch);
    }
    let targets = dqn_targets(target, batch, gamma)?;
    let (loss, grad) = dqn_loss_and_grad(net, batch, &targets)?;
    let updated = apply_gradient(net, &grad, opt)?;
    Ok((updated, loss))
}

/// Applies one optimizer step for an externally computed gradient.
pub fn apply_gradient(net: &QNetwork, grad: &[f64], opt: &mut Adam) -> Result<QNetwork, AlgoError> {
    let mut theta = net.params().theta().to_vec();
    opt.step(&mut theta, grad);
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(AlgoError::NonFinite("parameters"));
    }
    Ok(QNetwork::from_params(net.params().successor(theta)))
}

/// Deep copy of the online network for use as the bootstrap target.
pub fn sync_target(net: &QNetwork) -> QNetwork {
    QNetwork::from_params(
        ParamSet::new(
            net.params().theta().to_vec(),
            net.version(),
            net.layout().clone(),
        )
        .expect("copy has the same layout"),
    )
}
