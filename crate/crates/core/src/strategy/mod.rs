//! Throughput model and resource planning.
//!
//! Throughputs are in events per second: `TR_A` counts environment steps
//! produced, `TR_L` counts learner updates. One update per produced step is
//! the serial regime, so the two are balanced when they are equal.

mod controller;
mod profile;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::HyperParams;

pub use controller::{PacingDirective, Side, StalenessController};
pub use profile::{profile, ThroughputProfile, MIN_PROFILE_SAMPLES};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StrategyError {
    #[error("`{0}` must be positive and finite")]
    NonPositive(&'static str),
    #[error("no feasible allocation on {cores} cores")]
    Infeasible { cores: usize },
    #[error("profiling collected {got} {what} samples, at least {needed} required")]
    InsufficientSamples {
        what: &'static str,
        got: usize,
        needed: usize,
    },
    #[error("profiling run failed: {0}")]
    Run(String),
}

/// Where the critical path of collection lies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bound {
    /// Senders cannot produce fast enough.
    Actor,
    /// The receiver is saturated; more senders do not help.
    Receiver,
}

impl fmt::Display for Bound {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Actor => "actor",
            Self::Receiver => "receiver",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CollectModel {
    /// Sender cost amortized over all actors.
    #[default]
    Amortized,
    /// Sender branch without amortization; switches on the amortized
    /// condition.
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollectTime {
    pub seconds: f64,
    pub bound: Bound,
}

fn positive(name: &'static str, v: f64) -> Result<(), StrategyError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(StrategyError::NonPositive(name))
    }
}

/// Time to collect `n_collect` messages from `n_actors` senders, each
/// spending `t_sp` producing and `t_sd` sending, into one receiver spending
/// `t_rv` per message.
pub fn collect_time(
    t_sp: f64,
    t_sd: f64,
    t_rv: f64,
    n_actors: usize,
    n_collect: u64,
) -> Result<CollectTime, StrategyError> {
    collect_time_with(CollectModel::Amortized, t_sp, t_sd, t_rv, n_actors, n_collect)
}

pub fn collect_time_with(
    model: CollectModel,
    t_sp: f64,
    t_sd: f64,
    t_rv: f64,
    n_actors: usize,
    n_collect: u64,
) -> Result<CollectTime, StrategyError> {
    positive("t_sp", t_sp)?;
    positive("t_sd", t_sd)?;
    positive("t_rv", t_rv)?;
    if n_actors == 0 {
        return Err(StrategyError::NonPositive("n_actors"));
    }
    if n_collect == 0 {
        return Err(StrategyError::NonPositive("n_collect"));
    }
    let per_sender = (t_sp + t_sd) / n_actors as f64;
    let n = n_collect as f64;
    Ok(if per_sender > t_rv {
        let per = match model {
            CollectModel::Amortized => per_sender,
            CollectModel::Literal => t_sp + t_sd,
        };
        CollectTime {
            seconds: per * n,
            bound: Bound::Actor,
        }
    } else {
        CollectTime {
            seconds: t_rv * n,
            bound: Bound::Receiver,
        }
    })
}

/// Smallest actor count at which collection becomes receiver-bound.
pub fn receiver_bound_onset(t_sp: f64, t_sd: f64, t_rv: f64) -> Result<usize, StrategyError> {
    positive("t_sp", t_sp)?;
    positive("t_sd", t_sd)?;
    positive("t_rv", t_rv)?;
    Ok((((t_sp + t_sd) / t_rv).ceil() as usize).max(1))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationPlan {
    pub n_learners: usize,
    pub n_actors: usize,
    pub m_l: usize,
    pub m_a: usize,
    pub predicted_tr_a: f64,
    pub predicted_tr_l: f64,
    pub target_p: f64,
    pub adjusted_capacity: usize,
}

impl AllocationPlan {
    pub fn predicted_min(&self) -> f64 {
        self.predicted_tr_a.min(self.predicted_tr_l)
    }

    /// The side that limits the predicted throughput.
    pub fn bottleneck(&self) -> &'static str {
        if self.predicted_tr_l < self.predicted_tr_a {
            "learner"
        } else if self.predicted_tr_a < self.predicted_tr_l {
            "actor"
        } else {
            "balanced"
        }
    }
}

/// Predicted production for `n_actors` actors: linear in actors until the
/// receiver saturates.
pub fn predicted_tr_a(p: &ThroughputProfile, n_actors: usize, rollout_length: usize) -> f64 {
    let linear = n_actors as f64 * p.tr_a1;
    let receiver_cap = rollout_length as f64 / p.t_rv;
    linear.min(receiver_cap)
}

/// Predicted consumption: linear in learner cores, each learner saturating
/// at `learner_core_saturation` cores.
pub fn predicted_tr_l(p: &ThroughputProfile, n_learners: usize, m_l: usize) -> f64 {
    let usable = (m_l as f64).min(n_learners as f64 * p.learner_core_saturation);
    p.tr_l1 * usable
}

/// Exhaustive search over learner count, actor count and core split.
///
/// Each worker needs at least one core. The chosen point maximizes
/// `min(TR_A, TR_L)`; ties go to the smaller `|TR_L - TR_A|`, then fewer
/// workers, then fewer actor cores.
pub fn plan(profile: &ThroughputProfile, cores: usize, hp: &HyperParams) -> Result<AllocationPlan, StrategyError> {
    plan_with(profile, cores, hp, None)
}

/// [`plan`] with the learner count optionally pinned.
pub fn plan_with(
    profile: &ThroughputProfile,
    cores: usize,
    hp: &HyperParams,
    n_learners: Option<usize>,
) -> Result<AllocationPlan, StrategyError> {
    profile.validate()?;
    if cores < 2 || n_learners.is_some_and(|n| n == 0 || n >= cores) {
        return Err(StrategyError::Infeasible { cores });
    }
    let target_p = hp.batch_size as f64 / hp.buffer_capacity as f64;
    let adjusted_capacity = (hp.batch_size as f64 / target_p).round() as usize;
    let mut best: Option<(AllocationPlan, (f64, f64, usize, usize))> = None;
    let learner_counts = match n_learners {
        Some(n) => n..n + 1,
        None => 1..cores,
    };
    for n_l in learner_counts {
        for n_a in 1..=(cores - n_l) {
            for m_a in n_a..=(cores - n_l) {
                let m_l = cores - m_a;
                let tr_a = predicted_tr_a(profile, n_a, hp.rollout_length);
                let tr_l = predicted_tr_l(profile, n_l, m_l);
                // larger is better in every component after negation
                let key = (tr_a.min(tr_l), -(tr_l - tr_a).abs(), n_l + n_a, m_a);
                let better = match &best {
                    None => true,
                    Some((_, k)) => {
                        key.0 > k.0
                            || (key.0 == k.0
                                && (key.1 > k.1
                                    || (key.1 == k.1
                                        && (key.2 < k.2 || (key.2 == k.2 && key.3 < k.3)))))
                    }
                };
                if better {
                    best = Some((
                        AllocationPlan {
                            n_learners: n_l,
                            n_actors: n_a,
                            m_l,
                            m_a,
                            predicted_tr_a: tr_a,
                            predicted_tr_l: tr_l,
                            target_p,
                            adjusted_capacity,
                        },
                        key,
                    ));
                }
            }
        }
    }
    best.map(|(p, _)| p)
        .ok_or(StrategyError::Infeasible { cores })
}
