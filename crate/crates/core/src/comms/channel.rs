use std::net::SocketAddr;
use std::sync::mpsc::{sync_channel, Receiver, RecvTimeoutError, SyncSender, TryRecvError};
use std::sync::Arc;
use std::time::{Duration, Instant};

use super::codec::{check_payload_len, encode, Envelope};
use super::tcp::{bind, Acceptor, Sink, TcpLink};
use super::{ChannelStats, CommError, StatsCell, Transport};
use crate::types::WorkerId;

/// Receiving end of a multi-producer channel. Owned by one worker.
pub struct Inbox {
    rx: Receiver<Envelope>,
    stats: Arc<StatsCell>,
}

/// Handle for opening outboxes into an inbox. The inbox reports end of
/// stream only after every address handle and every outbox is gone.
#[derive(Clone)]
pub struct InboxAddr {
    inner: Arc<AddrInner>,
}

enum AddrInner {
    Local {
        tx: SyncSender<Envelope>,
        stats: Arc<StatsCell>,
    },
    Tcp {
        acceptor: Acceptor,
        stats: Arc<StatsCell>,
    },
}

/// Sending end bound to one sender id. Envelopes from one outbox arrive in
/// the order they were pushed.
pub struct Outbox {
    sender_id: WorkerId,
    link: Link,
    stats: Arc<StatsCell>,
}

enum Link {
    Local(SyncSender<Envelope>),
    Tcp(TcpLink),
}

/// Creates an inbox with a bounded queue of `depth` envelopes.
pub fn inbox(transport: Transport, depth: usize) -> Result<(Inbox, InboxAddr), CommError> {
    let stats = Arc::new(StatsCell::default());
    let (tx, rx) = sync_channel(depth.max(1));
    let inner = match transport {
        Transport::InProcess => AddrInner::Local {
            tx,
            stats: Arc::clone(&stats),
        },
        Transport::Tcp { base_port } => {
            let listener = bind(base_port)?;
            let sink: Sink = Arc::new(move |env| tx.send(env).is_ok());
            AddrInner::Tcp {
                acceptor: Acceptor::spawn(listener, sink)?,
                stats: Arc::clone(&stats),
            }
        }
    };
    Ok((
        Inbox { rx, stats },
        InboxAddr {
            inner: Arc::new(inner),
        },
    ))
}

impl Inbox {
    /// Non-blocking poll. `Err(Closed)` once every sender is gone and the
    /// queue is drained.
    pub fn probe_recv(&self) -> Result<Option<Envelope>, CommError> {
        let t0 = Instant::now();
        match self.rx.try_recv() {
            Ok(env) => {
                self.delivered(t0);
                Ok(Some(env))
            }
            Err(TryRecvError::Empty) => Ok(None),
            Err(TryRecvError::Disconnected) => Err(CommError::Closed),
        }
    }

    /// Idle wait for the next envelope, bounded by `timeout`. Loops call
    /// this only when they have nothing else to do.
    pub fn wait_recv(&self, timeout: Duration) -> Result<Option<Envelope>, CommError> {
        match self.rx.recv_timeout(timeout) {
            Ok(env) => {
                self.delivered(Instant::now());
                Ok(Some(env))
            }
            Err(RecvTimeoutError::Timeout) => Ok(None),
            Err(RecvTimeoutError::Disconnected) => Err(CommError::Closed),
        }
    }

    fn delivered(&self, t0: Instant) {
        self.stats.on_receive();
        self.stats.add_recv_busy(t0.elapsed().as_nanos() as u64);
    }

    /// Receives until end of stream, handing each envelope to `visit`;
    /// returns how many envelopes were drained.
    pub fn drain_until_closed(&self, mut visit: impl FnMut(Envelope)) -> usize {
        let mut n = 0;
        while let Ok(env) = self.rx.recv() {
            self.stats.on_receive();
            visit(env);
            n += 1;
        }
        n
    }

    pub fn stats(&self) -> ChannelStats {
        self.stats.snapshot()
    }
}

impl InboxAddr {
    pub fn connect(&self, sender_id: WorkerId, depth: usize) -> Result<Outbox, CommError> {
        let (link, stats) = match &*self.inner {
            AddrInner::Local { tx, stats } => (Link::Local(tx.clone()), Arc::clone(stats)),
            AddrInner::Tcp { acceptor, stats } => (
                Link::Tcp(TcpLink::connect(acceptor.addr(), depth)?),
                Arc::clone(stats),
            ),
        };
        Ok(Outbox {
            sender_id,
            link,
            stats,
        })
    }

    pub fn socket_addr(&self) -> Option<SocketAddr> {
        match &*self.inner {
            AddrInner::Local { .. } => None,
            AddrInner::Tcp { acceptor, .. } => Some(acceptor.addr()),
        }
    }

    pub fn stats(&self) -> ChannelStats {
        match &*self.inner {
            AddrInner::Local { stats, .. } | AddrInner::Tcp { stats, .. } => stats.snapshot(),
        }
    }
}

impl Outbox {
    pub fn sender_id(&self) -> WorkerId {
        self.sender_id
    }

    /// Queues the envelope (stamped with this outbox's sender id) and
    /// returns without waiting for the receiver. Blocks only while the
    /// bounded queue is full.
    pub fn push_send(&self, mut env: Envelope) -> Result<(), CommError> {
        let t0 = Instant::now();
        env.sender_id = self.sender_id;
        check_payload_len(env.payload.len())?;
        let bytes = env.frame_len();
        match &self.link {
            Link::Local(tx) => tx.send(env).map_err(|_| CommError::Closed)?,
            Link::Tcp(link) => link.send(encode(&env)?).map_err(|_| CommError::Closed)?,
        }
        self.stats.on_send(bytes, t0.elapsed().as_nanos() as u64);
        Ok(())
    }

    /// Closes the outbox, waiting until queued frames have left the process.
    pub fn close(self) -> Result<(), CommError> {
        match self.link {
            Link::Local(_) => Ok(()),
            Link::Tcp(mut link) => link.close().map_err(CommError::from),
        }
    }

    pub fn stats(&self) -> ChannelStats {
        self.stats.snapshot()
    }
}
