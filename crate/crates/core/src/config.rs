//! Run configuration: a TOML document with four groups.
//!
//! ```toml
//! [distribution]   # topology, transport, pacing
//! [training]       # hyperparameters, budget, target
//! [model]          # hidden layer sizes, seed
//! [environment]    # which environment, episode cap, seed
//! [plan]           # optional, written by the planner; informational only
//! ```
//!
//! Every key has a default, unknown keys are rejected, and units are part of
//! the key name where they matter (`_ms`, `_secs`).

use std::fmt;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::comms::{Transport, DEFAULT_QUEUE_DEPTH};
use crate::envs::{EnvKind, EnvSpec};
use crate::types::{HyperParams, Layout};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}")]
    Read {
        path: String,
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid `{field}`: {reason}")]
    Invalid { field: String, reason: String },
}

fn invalid(field: &str, reason: impl fmt::Display) -> ConfigError {
    ConfigError::Invalid {
        field: field.to_string(),
        reason: reason.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Actor and learner interleaved in one thread, one update per step.
    Serial,
    #[default]
    Distributed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransportKind {
    #[default]
    InProcess,
    Tcp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistributionConfig {
    pub mode: Mode,
    pub n_actors: usize,
    pub n_learners: usize,
    pub n_groups: usize,
    /// Total cores the run may assume; used by the planner.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cores: Option<usize>,
    pub transport: TransportKind,
    /// First loopback port tried for TCP listeners; 0 picks ephemeral ports.
    pub base_port: u16,
    pub queue_depth: usize,
    /// Learner updates between parameter publications.
    pub publish_interval: u64,
    /// Batch requests a learner keeps outstanding.
    pub batch_credits: usize,
    /// Helper gradients older than this many versions are discarded.
    pub max_gradient_lag: u64,
    pub staleness_control: bool,
    pub control_window_ms: u64,
    /// Ratio band outside which the controller acts.
    pub staleness_band: f64,
    pub metrics_interval_ms: u64,
    /// Buffer-side cap on batches served per inserted transition.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_updates_per_step: Option<f64>,
}

impl Default for DistributionConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Distributed,
            n_actors: 1,
            n_learners: 1,
            n_groups: 1,
            cores: None,
            transport: TransportKind::InProcess,
            base_port: 0,
            queue_depth: DEFAULT_QUEUE_DEPTH,
            publish_interval: 1,
            batch_credits: 2,
            max_gradient_lag: 4,
            staleness_control: true,
            control_window_ms: 200,
            staleness_band: 2.0,
            metrics_interval_ms: 250,
            max_updates_per_step: None,
        }
    }
}

impl DistributionConfig {
    pub fn transport(&self) -> Transport {
        match self.transport {
            TransportKind::InProcess => Transport::InProcess,
            TransportKind::Tcp => Transport::Tcp {
                base_port: self.base_port,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub gamma: f64,
    pub alpha: f64,
    pub adam_epsilon: f64,
    pub epsilon: f64,
    pub epsilon_decay: f64,
    pub epsilon_min: f64,
    pub target_update_interval: u64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub warmup_size: usize,
    pub rollout_length: usize,
    /// Environment steps per update in serial mode.
    pub train_every: u64,
    /// Global environment-step budget.
    pub step_budget: u64,
    /// Window-100 mean return that ends the run; defaults per environment.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_return: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_time_limit_secs: Option<f64>,
    /// Emulated extra cost per learner update.
    pub update_latency_ms: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        let hp = HyperParams::default();
        Self {
            gamma: hp.gamma,
            alpha: hp.alpha,
            adam_epsilon: 1e-8,
            epsilon: hp.epsilon,
            epsilon_decay: hp.epsilon_decay,
            epsilon_min: hp.epsilon_min,
            target_update_interval: hp.target_update_interval,
            batch_size: hp.batch_size,
            buffer_capacity: hp.buffer_capacity,
            warmup_size: hp.warmup_size,
            rollout_length: hp.rollout_length,
            train_every: 1,
            step_budget: 300_000,
            target_return: None,
            wall_time_limit_secs: None,
            update_latency_ms: 0.0,
        }
    }
}

impl TrainingConfig {
    pub fn hyper_params(&self) -> HyperParams {
        HyperParams {
            gamma: self.gamma,
            alpha: self.alpha,
            epsilon: self.epsilon,
            epsilon_decay: self.epsilon_decay,
            epsilon_min: self.epsilon_min,
            target_update_interval: self.target_update_interval,
            batch_size: self.batch_size,
            buffer_capacity: self.buffer_capacity,
            warmup_size: self.warmup_size,
            rollout_length: self.rollout_length,
        }
    }

    pub fn set_hyper_params(&mut self, hp: &HyperParams) {
        self.gamma = hp.gamma;
        self.alpha = hp.alpha;
        self.epsilon = hp.epsilon;
        self.epsilon_decay = hp.epsilon_decay;
        self.epsilon_min = hp.epsilon_min;
        self.target_update_interval = hp.target_update_interval;
        self.batch_size = hp.batch_size;
        self.buffer_capacity = hp.buffer_capacity;
        self.warmup_size = hp.warmup_size;
        self.rollout_length = hp.rollout_length;
    }

    pub fn update_latency(&self) -> Duration {
        Duration::from_secs_f64(self.update_latency_ms.max(0.0) * 1e-3)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub bias: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![256],
            bias: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvironmentConfig {
    pub name: String,
    /// Episode truncation length; defaults per environment.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<u32>,
    pub step_latency_ms: f64,
    pub seed: u64,
}

impl Default for EnvironmentConfig {
    fn default() -> Self {
        Self {
            name: "cartpole".into(),
            max_steps: None,
            step_latency_ms: 0.0,
            seed: 0,
        }
    }
}

/// Planner output carried along in a config file. Not read by `train`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanSection {
    pub n_learners: usize,
    pub n_actors: usize,
    pub m_l: usize,
    pub m_a: usize,
    pub predicted_tr_a: f64,
    pub predicted_tr_l: f64,
    pub target_p: f64,
    pub adjusted_capacity: usize,
    pub bottleneck: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub distribution: DistributionConfig,
    pub training: TrainingConfig,
    pub model: ModelConfig,
    pub environment: EnvironmentConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub plan: Option<PlanSection>,
}

impl RunConfig {
    /// Adopts a plan's worker counts and buffer capacity and records the
    /// plan alongside.
    pub fn apply_plan(&mut self, plan: &crate::strategy::AllocationPlan, cores: usize) {
        self.distribution.n_actors = plan.n_actors;
        self.distribution.n_learners = plan.n_learners;
        self.distribution.cores = Some(cores);
        self.training.buffer_capacity = plan
            .adjusted_capacity
            .max(self.training.warmup_size)
            .max(self.training.batch_size);
        self.plan = Some(PlanSection {
            n_learners: plan.n_learners,
            n_actors: plan.n_actors,
            m_l: plan.m_l,
            m_a: plan.m_a,
            predicted_tr_a: plan.predicted_tr_a,
            predicted_tr_l: plan.predicted_tr_l,
            target_p: plan.target_p,
            adjusted_capacity: plan.adjusted_capacity,
            bottleneck: plan.bottleneck().to_string(),
        });
    }

    pub fn env_kind(&self) -> Result<EnvKind, ConfigError> {
        self.environment
            .name
            .parse()
            .map_err(|e| invalid("environment.name", e))
    }

    pub fn env_spec(&self) -> Result<EnvSpec, ConfigError> {
        let kind = self.env_kind()?;
        let default = EnvSpec::for_kind(kind, 1);
        let max_steps = self.environment.max_steps.unwrap_or(match kind {
            EnvKind::CartPole => 200,
            EnvKind::GridWorld => 100,
        });
        let latency = Duration::from_secs_f64(self.environment.step_latency_ms.max(0.0) * 1e-3);
        Ok(EnvSpec {
            max_steps,
            ..default
        }
        .with_step_latency(latency))
    }

    pub fn layout(&self) -> Result<Layout, ConfigError> {
        let spec = self.env_spec()?;
        let mut l = Layout::mlp(spec.obs_dim, &self.model.hidden, spec.n_actions as usize);
        l.bias = self.model.bias;
        Ok(l)
    }

    pub fn target_return(&self) -> Result<f64, ConfigError> {
        Ok(match self.training.target_return {
            Some(t) => t,
            None => match self.env_kind()? {
                EnvKind::CartPole => 195.0,
                EnvKind::GridWorld => 0.9,
            },
        })
    }

    /// Cross-field validation; run before any worker starts.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let d = &self.distribution;
        for (field, v) in [
            ("distribution.n_actors", d.n_actors),
            ("distribution.n_learners", d.n_learners),
            ("distribution.n_groups", d.n_groups),
            ("distribution.queue_depth", d.queue_depth),
            ("distribution.batch_credits", d.batch_credits),
        ] {
            if v == 0 {
                return Err(invalid(field, "must be at least 1"));
            }
        }
        if d.cores == Some(0) {
            return Err(invalid("distribution.cores", "must be at least 1"));
        }
        if d.publish_interval == 0 {
            return Err(invalid("distribution.publish_interval", "must be at least 1"));
        }
        if d.control_window_ms == 0 || d.metrics_interval_ms == 0 {
            return Err(invalid(
                "distribution.control_window_ms",
                "intervals must be positive",
            ));
        }
        if !(d.staleness_band > 1.0 && d.staleness_band.is_finite()) {
            return Err(invalid("distribution.staleness_band", "must exceed 1"));
        }
        if d.max_updates_per_step.is_some_and(|r| !(r > 0.0 && r.is_finite())) {
            return Err(invalid("distribution.max_updates_per_step", "must be positive"));
        }
        let t = &self.training;
        self.training.hyper_params().validate().map_err(|e| {
            let field = match &e {
                crate::types::HyperParamsError::OutOfRange { field, .. } => field.to_string(),
                crate::types::HyperParamsError::BatchExceedsCapacity { .. } => "batch_size".into(),
                crate::types::HyperParamsError::WarmupBelowBatch { .. }
                | crate::types::HyperParamsError::WarmupExceedsCapacity { .. } => {
                    "warmup_size".into()
                }
            };
            invalid(&format!("training.{field}"), e)
        })?;
        if !(t.adam_epsilon > 0.0 && t.adam_epsilon.is_finite()) {
            return Err(invalid("training.adam_epsilon", "must be positive"));
        }
        if t.train_every == 0 {
            return Err(invalid("training.train_every", "must be at least 1"));
        }
        if t.step_budget == 0 {
            return Err(invalid("training.step_budget", "must be at least 1"));
        }
        if t.target_return.is_some_and(|v| !v.is_finite()) {
            return Err(invalid("training.target_return", "must be finite"));
        }
        if t.wall_time_limit_secs.is_some_and(|v| v.is_nan() || v <= 0.0) {
            return Err(invalid("training.wall_time_limit_secs", "must be positive"));
        }
        if !(t.update_latency_ms >= 0.0 && t.update_latency_ms.is_finite()) {
            return Err(invalid("training.update_latency_ms", "must be non-negative"));
        }
        if self.model.hidden.contains(&0) {
            return Err(invalid("model.hidden", "layer sizes must be positive"));
        }
        let spec = self.env_spec()?;
        spec.validate()
            .map_err(|e| invalid("environment.max_steps", e))?;
        if !(self.environment.step_latency_ms >= 0.0 && self.environment.step_latency_ms.is_finite())
        {
            return Err(invalid("environment.step_latency_ms", "must be non-negative"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// 1-based line of a byte offset.
pub(crate) fn line_of(src: &str, offset: usize) -> usize {
    src[..offset.min(src.len())].matches('\n').count() + 1
}

/// Parses TOML text into `T`, mapping syntax and schema errors to line
/// numbers.
pub(crate) fn parse_toml<T: serde::de::DeserializeOwned>(src: &str) -> Result<T, ConfigError> {
    toml::from_str(src).map_err(|e| ConfigError::Parse {
        line: e.span().map(|s| line_of(src, s.start)).unwrap_or(1),
        message: e.message().to_string(),
    })
}

pub fn parse_config_str(src: &str) -> Result<RunConfig, ConfigError> {
    let cfg: RunConfig = parse_toml(src)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: impl AsRef<Path>) -> Result<RunConfig, ConfigError> {
    let path = path.as_ref();
    let src = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
        path: path.display().to_string(),
        source,
    })?;
    parse_config_str(&src)
}
