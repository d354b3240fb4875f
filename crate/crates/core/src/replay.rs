//! FIFO replay memory owned by the buffer worker, with staleness accounting.

use std::collections::{BTreeMap, VecDeque};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{Trajectory, Transition};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ReplayError {
    #[error("buffer holds {len} transitions, warmup needs {warmup}")]
    InsufficientWarmup { len: usize, warmup: usize },
    #[error("invalid staleness geometry: batch_size {batch_size}, capacity {capacity}")]
    InvalidGeometry { batch_size: usize, capacity: usize },
}

/// A stored transition with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub transition: Transition,
    pub insertion_index: u64,
    pub policy_version: u64,
}

#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    batch_size: usize,
    warmup: usize,
    entries: VecDeque<Entry>,
    inserted_total: u64,
    consumed_total: u64,
}

/// Staleness of the current buffer contents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StalenessReport {
    /// `batch_size / capacity`.
    pub configured_p: f64,
    /// Mean number of learner updates since each stored sample's policy was
    /// published.
    pub realized_mean_age: f64,
    /// `learner_version - policy_version` -> number of stored samples.
    pub version_lag_histogram: BTreeMap<u64, usize>,
}

/// Fraction of the buffer a single batch covers, `batch_size / capacity`.
pub fn staleness(batch_size: usize, capacity: usize) -> Result<f64, ReplayError> {
    if batch_size == 0 || batch_size > capacity {
        return Err(ReplayError::InvalidGeometry {
            batch_size,
            capacity,
        });
    }
    Ok(batch_size as f64 / capacity as f64)
}

impl ReplayBuffer {
    pub fn new(capacity: usize, batch_size: usize, warmup: usize) -> Self {
        assert!(capacity > 0, "capacity must be positive");
        assert!(
            batch_size > 0 && batch_size <= capacity,
            "batch size must be in 1..=capacity"
        );
        Self {
            capacity,
            batch_size,
            warmup,
            entries: VecDeque::with_capacity(capacity),
            inserted_total: 0,
            consumed_total: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn warmup(&self) -> usize {
        self.warmup
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_warm(&self) -> bool {
        self.entries.len() >= self.warmup
    }

    pub fn inserted_total(&self) -> u64 {
        self.inserted_total
    }

    pub fn consumed_total(&self) -> u64 {
        self.consumed_total
    }

    pub fn entries(&self) -> impl Iterator<Item = &Entry> {
        self.entries.iter()
    }

    /// Appends a trajectory, evicting the oldest entries beyond capacity.
    pub fn push(&mut self, traj: Trajectory) -> usize {
        let version = traj.policy_version;
        let n = traj.len();
        for t in traj.into_transitions() {
            self.insert(t, version);
        }
        n
    }

    pub fn insert(&mut self, transition: Transition, policy_version: u64) {
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(Entry {
            transition,
            insertion_index: self.inserted_total,
            policy_version,
        });
        self.inserted_total += 1;
    }

    /// Uniform sampling with replacement. Fails until the warmup size is
    /// reached; the caller skips its update and carries on.
    pub fn sample<R: Rng + ?Sized>(
        &mut self,
        batch_size: usize,
        rng: &mut R,
    ) -> Result<Vec<&Entry>, ReplayError> {
        self.sample_indices(batch_size, rng)
            .map(|idx| idx.into_iter().map(|i| &self.entries[i]).collect())
    }

    /// Like [`sample`](Self::sample) but returns owned transitions and their
    /// policy versions.
    pub fn sample_owned<R: Rng + ?Sized>(
        &mut self,
        batch_size: usize,
        rng: &mut R,
    ) -> Result<Vec<(Transition, u64)>, ReplayError> {
        self.sample_indices(batch_size, rng).map(|idx| {
            idx.into_iter()
                .map(|i| {
                    let e = &self.entries[i];
                    (e.transition.clone(), e.policy_version)
                })
                .collect()
        })
    }

    fn sample_indices<R: Rng + ?Sized>(
        &mut self,
        batch_size: usize,
        rng: &mut R,
    ) -> Result<Vec<usize>, ReplayError> {
        let len = self.entries.len();
        if len < self.warmup.max(1) {
            return Err(ReplayError::InsufficientWarmup {
                len,
                warmup: self.warmup,
            });
        }
        self.consumed_total += batch_size as u64;
        Ok((0..batch_size).map(|_| rng.gen_range(0..len)).collect())
    }

    pub fn staleness_report(&self, learner_version: u64) -> StalenessReport {
        let mut hist = BTreeMap::new();
        let mut total = 0u64;
        for e in &self.entries {
            let lag = learner_version.saturating_sub(e.policy_version);
            *hist.entry(lag).or_insert(0) += 1;
            total += lag;
        }
        let realized_mean_age = if self.entries.is_empty() {
            0.0
        } else {
            total as f64 / self.entries.len() as f64
        };
        StalenessReport {
            configured_p: self.batch_size as f64 / self.capacity as f64,
            realized_mean_age,
            version_lag_histogram: hist,
        }
    }
}
