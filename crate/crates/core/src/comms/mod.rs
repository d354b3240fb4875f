//! Sender-initiated asynchronous messaging.
//!
//! A worker owns one [`Inbox`]; anyone holding its [`InboxAddr`] can open an
//! [`Outbox`] and push envelopes into it. `push_send` returns as soon as the
//! envelope is queued, so the sender's loop keeps computing while delivery
//! happens; the receiver polls with `probe_recv`, which never blocks.
//! Queues are bounded and a full queue blocks only the sender that filled it.
//!
//! Parameters use a different shape: each subscriber has a single
//! newest-wins slot ([`ParamSubscription`]) so stale versions are dropped
//! instead of queued.
//!
//! Both shapes work over in-process channels and over loopback TCP.

pub mod codec;
pub mod payload;

mod channel;
mod params;
mod tcp;

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use channel::{inbox, Inbox, InboxAddr, Outbox};
pub use codec::{decode, encode, CodecError, Envelope, Kind};
pub use params::{subscription, ParamPublisher, ParamSubscription, SubscriberAddr};

/// Default bounded queue depth, in envelopes.
pub const DEFAULT_QUEUE_DEPTH: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transport {
    InProcess,
    /// Loopback TCP; port 0 picks ephemeral ports.
    Tcp { base_port: u16 },
}

impl Transport {
    pub fn tcp() -> Self {
        Self::Tcp { base_port: 0 }
    }
}

#[derive(Debug, Error)]
pub enum CommError {
    #[error("channel closed")]
    Closed,
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("transport i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl CommError {
    pub fn is_closed(&self) -> bool {
        matches!(self, Self::Closed)
    }
}

/// Counters shared by both ends of a channel.
#[derive(Debug, Default)]
pub(crate) struct StatsCell {
    sent: AtomicU64,
    received: AtomicU64,
    dropped_stale: AtomicU64,
    bytes_sent: AtomicU64,
    send_busy_ns: AtomicU64,
    recv_busy_ns: AtomicU64,
}

impl StatsCell {
    pub(crate) fn on_send(&self, bytes: usize, busy_ns: u64) {
        self.sent.fetch_add(1, Ordering::Relaxed);
        self.bytes_sent.fetch_add(bytes as u64, Ordering::Relaxed);
        self.send_busy_ns.fetch_add(busy_ns, Ordering::Relaxed);
    }

    pub(crate) fn add_send_busy(&self, ns: u64) {
        self.send_busy_ns.fetch_add(ns, Ordering::Relaxed);
    }

    pub(crate) fn on_receive(&self) {
        self.received.fetch_add(1, Ordering::Relaxed);
    }

    pub(crate) fn on_drop_stale(&self) {
        self.dropped_stale.fetch_add(1, Ordering::Relaxed);
    }

    pub(crate) fn add_recv_busy(&self, ns: u64) {
        self.recv_busy_ns.fetch_add(ns, Ordering::Relaxed);
    }

    pub(crate) fn snapshot(&self) -> ChannelStats {
        // read receive-side counters first so received + dropped never
        // appears to exceed sent
        let received_count = self.received.load(Ordering::Acquire);
        let dropped_stale_count = self.dropped_stale.load(Ordering::Acquire);
        ChannelStats {
            sent_count: self.sent.load(Ordering::Acquire),
            received_count,
            dropped_stale_count,
            bytes_sent: self.bytes_sent.load(Ordering::Relaxed),
            send_busy_ns: self.send_busy_ns.load(Ordering::Relaxed),
            recv_busy_ns: self.recv_busy_ns.load(Ordering::Relaxed),
        }
    }
}

/// Point-in-time channel counters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ChannelStats {
    pub sent_count: u64,
    pub received_count: u64,
    pub dropped_stale_count: u64,
    pub bytes_sent: u64,
    pub send_busy_ns: u64,
    pub recv_busy_ns: u64,
}

impl ChannelStats {
    pub fn in_flight(&self) -> u64 {
        self.sent_count
            .saturating_sub(self.received_count + self.dropped_stale_count)
    }

    /// Mean time spent inside `push_send`, in seconds.
    pub fn mean_send_secs(&self) -> f64 {
        if self.sent_count == 0 {
            0.0
        } else {
            self.send_busy_ns as f64 / self.sent_count as f64 * 1e-9
        }
    }

    /// Mean receive-side handling time per delivered envelope, in seconds.
    pub fn mean_recv_secs(&self) -> f64 {
        if self.received_count == 0 {
            0.0
        } else {
            self.recv_busy_ns as f64 / self.received_count as f64 * 1e-9
        }
    }
}
