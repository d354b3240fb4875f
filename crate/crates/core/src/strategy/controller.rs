//! Closed-loop pacing that keeps consumption per produced step near the
//! serial regime.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::comms::payload::Pacing;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Actors,
    Learners,
}

/// Advisory pacing change. Rates are totals across all workers on a side:
/// environment steps per second for actors, updates per second for
/// learners.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PacingDirective {
    NoOp,
    Throttle { side: Side, rate: f64 },
    Relax { side: Side, rate: f64 },
}

/// Compares realized updates per produced step against the serial target
/// over fixed windows.
///
/// When consumption runs ahead (production lags) it first relaxes any actor
/// cap, otherwise caps learners at the production rate. When consumption
/// falls behind it first relaxes any learner cap, otherwise caps actors at
/// the consumption rate. A cap is relaxed by doubling it.
#[derive(Debug, Clone)]
pub struct StalenessController {
    window: f64,
    band: f64,
    updates_per_step: f64,
    floor: f64,
    last: Option<(f64, u64, u64)>,
    pacing: Pacing,
}

impl StalenessController {
    /// `updates_per_step` is the serial ratio (1 for one update per step);
    /// `band` is the tolerated factor either way; `floor` is the lowest cap
    /// ever issued.
    pub fn new(window: Duration, band: f64, updates_per_step: f64, floor: f64) -> Self {
        assert!(band > 1.0 && updates_per_step > 0.0 && floor > 0.0);
        Self {
            window: window.as_secs_f64(),
            band,
            updates_per_step,
            floor,
            last: None,
            pacing: Pacing::default(),
        }
    }

    /// Caps established so far, as totals per side.
    pub fn totals(&self) -> Pacing {
        self.pacing
    }

    /// Caps split evenly across workers, as sent on the control channel.
    pub fn per_worker(&self, n_actors: usize, n_learners: usize) -> Pacing {
        Pacing {
            actor_rate_cap: self.pacing.actor_rate_cap.map(|r| r / n_actors.max(1) as f64),
            learner_rate_cap: self
                .pacing
                .learner_rate_cap
                .map(|r| r / n_learners.max(1) as f64),
        }
    }

    /// Realized ratio of updates per step relative to the target, over a
    /// window with `steps` produced and `updates` consumed.
    pub fn ratio(&self, steps: u64, updates: u64) -> f64 {
        if steps == 0 {
            return if updates == 0 { 1.0 } else { f64::INFINITY };
        }
        updates as f64 / (steps as f64 * self.updates_per_step)
    }

    /// Feeds cumulative counts at time `t` (seconds). Acts once per window.
    pub fn observe(&mut self, t: f64, steps_total: u64, updates_total: u64) -> PacingDirective {
        let Some((t0, s0, u0)) = self.last else {
            self.last = Some((t, steps_total, updates_total));
            return PacingDirective::NoOp;
        };
        let dt = t - t0;
        if dt < self.window {
            return PacingDirective::NoOp;
        }
        self.last = Some((t, steps_total, updates_total));
        let ds = steps_total.saturating_sub(s0);
        let du = updates_total.saturating_sub(u0);
        if du == 0 {
            // learners idle (warmup or stopped): nothing to balance
            return PacingDirective::NoOp;
        }
        let q = self.ratio(ds, du);
        if q > self.band {
            if let Some(cap) = self.pacing.actor_rate_cap {
                return self.relax(Side::Actors, cap);
            }
            let rate = (ds as f64 / dt * self.updates_per_step).max(self.floor);
            self.pacing.learner_rate_cap = Some(rate);
            PacingDirective::Throttle {
                side: Side::Learners,
                rate,
            }
        } else if q < 1.0 / self.band {
            if let Some(cap) = self.pacing.learner_rate_cap {
                return self.relax(Side::Learners, cap);
            }
            let rate = (du as f64 / dt / self.updates_per_step).max(self.floor);
            self.pacing.actor_rate_cap = Some(rate);
            PacingDirective::Throttle {
                side: Side::Actors,
                rate,
            }
        } else {
            PacingDirective::NoOp
        }
    }

    fn relax(&mut self, side: Side, cap: f64) -> PacingDirective {
        let rate = cap * 2.0;
        match side {
            Side::Actors => self.pacing.actor_rate_cap = Some(rate),
            Side::Learners => self.pacing.learner_rate_cap = Some(rate),
        }
        PacingDirective::Relax { side, rate }
    }
}
