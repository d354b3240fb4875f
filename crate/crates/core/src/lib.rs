//! Decoupled reinforcement-learning training: actors, replay buffers and
//! learners exchange data through asynchronous push messaging, and a planner
//! sizes each role so that production and consumption stay balanced.

pub mod algo;
pub mod comms;
pub mod envs;
pub mod replay;
pub mod types;
pub mod config;
pub mod strategy;
pub mod telemetry;
pub mod runtime;
pub mod commbench;
