use std::net::SocketAddr;
use std::sync::{Arc, Condvar, Mutex, Weak};
use std::time::{Duration, Instant};

use super::codec::{encode, Envelope, Kind};
use super::payload::{decode_params, encode_params};
use super::tcp::{bind, Acceptor, Sink, TcpLink};
use super::{ChannelStats, CommError, StatsCell, Transport};
use crate::types::{ParamSet, WorkerId};

/// Newest-wins parameter slot. Every published version ends up exactly once
/// as delivered, dropped as stale, or pending.
pub struct ParamSubscription {
    slot: Arc<Slot>,
    _acceptor: Option<Acceptor>,
}

#[derive(Clone)]
pub struct SubscriberAddr {
    target: Target,
    stats: Arc<StatsCell>,
}

#[derive(Clone)]
enum Target {
    Local(Weak<Slot>),
    Tcp(SocketAddr),
}

/// Fans parameter snapshots out to subscribers. Subscribers that went away
/// are pruned silently.
pub struct ParamPublisher {
    sender_id: WorkerId,
    subs: Vec<Sub>,
}

struct Sub {
    link: SubLink,
    stats: Arc<StatsCell>,
}

enum SubLink {
    Local(Weak<Slot>),
    Tcp(TcpLink),
}

struct Slot {
    state: Mutex<SlotState>,
    ready: Condvar,
    stats: Arc<StatsCell>,
}

#[derive(Default)]
struct SlotState {
    pending: Option<ParamSet>,
    last_delivered: Option<u64>,
}

impl Slot {
    fn offer(&self, p: ParamSet) {
        let mut s = self.state.lock().unwrap();
        let newest = s
            .pending
            .as_ref()
            .map(|q| q.version())
            .or(s.last_delivered);
        if newest.is_some_and(|v| p.version() <= v) {
            self.stats.on_drop_stale();
            return;
        }
        if s.pending.replace(p).is_some() {
            self.stats.on_drop_stale();
        }
        self.ready.notify_all();
    }
}

pub fn subscription(transport: Transport) -> Result<(ParamSubscription, SubscriberAddr), CommError> {
    let stats = Arc::new(StatsCell::default());
    let slot = Arc::new(Slot {
        state: Mutex::new(SlotState::default()),
        ready: Condvar::new(),
        stats: Arc::clone(&stats),
    });
    let (acceptor, target) = match transport {
        Transport::InProcess => (None, Target::Local(Arc::downgrade(&slot))),
        Transport::Tcp { base_port } => {
            let listener = bind(base_port)?;
            let weak = Arc::downgrade(&slot);
            let sink: Sink = Arc::new(move |env: Envelope| {
                let Some(slot) = weak.upgrade() else {
                    return false;
                };
                match decode_params(&env.payload, env.version) {
                    Ok(p) => {
                        slot.offer(p);
                        true
                    }
                    Err(_) => false,
                }
            });
            let acceptor = Acceptor::spawn(listener, sink)?;
            let addr = acceptor.addr();
            (Some(acceptor), Target::Tcp(addr))
        }
    };
    Ok((
        ParamSubscription {
            slot,
            _acceptor: acceptor,
        },
        SubscriberAddr { target, stats },
    ))
}

impl ParamSubscription {
    /// Takes the newest undelivered snapshot, if any. Never blocks on the
    /// publisher.
    pub fn params_latest(&self) -> Option<ParamSet> {
        let mut s = self.slot.state.lock().unwrap();
        self.take(&mut s)
    }

    /// Like [`params_latest`](Self::params_latest) but waits up to `timeout`
    /// for a snapshot to arrive.
    pub fn wait_latest(&self, timeout: Duration) -> Option<ParamSet> {
        let deadline = Instant::now() + timeout;
        let mut s = self.slot.state.lock().unwrap();
        while s.pending.is_none() {
            let now = Instant::now();
            if now >= deadline {
                return None;
            }
            s = self.slot.ready.wait_timeout(s, deadline - now).unwrap().0;
        }
        self.take(&mut s)
    }

    fn take(&self, s: &mut SlotState) -> Option<ParamSet> {
        let p = s.pending.take()?;
        s.last_delivered = Some(p.version());
        self.slot.stats.on_receive();
        Some(p)
    }

    pub fn pending(&self) -> bool {
        self.slot.state.lock().unwrap().pending.is_some()
    }

    pub fn stats(&self) -> ChannelStats {
        self.slot.stats.snapshot()
    }
}

impl SubscriberAddr {
    pub fn stats(&self) -> ChannelStats {
        self.stats.snapshot()
    }
}

impl ParamPublisher {
    pub fn new(sender_id: WorkerId) -> Self {
        Self {
            sender_id,
            subs: Vec::new(),
        }
    }

    pub fn add(&mut self, addr: &SubscriberAddr, depth: usize) -> Result<(), CommError> {
        let link = match &addr.target {
            Target::Local(w) => SubLink::Local(w.clone()),
            Target::Tcp(a) => SubLink::Tcp(TcpLink::connect(*a, depth)?),
        };
        self.subs.push(Sub {
            link,
            stats: Arc::clone(&addr.stats),
        });
        Ok(())
    }

    pub fn subscriber_count(&self) -> usize {
        self.subs.len()
    }

    pub fn publish(&mut self, params: &ParamSet) -> Result<(), CommError> {
        let mut frame: Option<Vec<u8>> = None;
        let mut i = 0;
        while i < self.subs.len() {
            let t0 = Instant::now();
            let sub = &self.subs[i];
            let alive = match &sub.link {
                SubLink::Local(w) => match w.upgrade() {
                    Some(slot) => {
                        // count before offering so a snapshot never shows
                        // more delivered than sent
                        sub.stats.on_send(0, 0);
                        slot.offer(params.clone());
                        sub.stats.add_send_busy(t0.elapsed().as_nanos() as u64);
                        true
                    }
                    None => false,
                },
                SubLink::Tcp(link) => {
                    if frame.is_none() {
                        let env = Envelope::new(
                            Kind::Params,
                            self.sender_id,
                            params.version(),
                            encode_params(params),
                        );
                        frame = Some(encode(&env)?);
                    }
                    let f = frame.clone().unwrap();
                    let n = f.len();
                    let ok = link.send(f).is_ok();
                    if ok {
                        sub.stats.on_send(n, t0.elapsed().as_nanos() as u64);
                    }
                    ok
                }
            };
            if alive {
                i += 1;
            } else {
                self.subs.swap_remove(i);
            }
        }
        Ok(())
    }
}
