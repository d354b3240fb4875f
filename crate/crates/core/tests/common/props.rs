//! Property checks shared by the property tests and the acceptance target.
//! Each returns a description of the first violation.

use std::collections::HashMap;
use std::sync::mpsc;
use std::thread;
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use pushrl::comms::codec::read_frame;
use pushrl::comms::{decode, encode, inbox, subscription, CommError, Envelope, Kind, ParamPublisher, Transport};
use pushrl::replay::ReplayBuffer;
use pushrl::types::{Layout, ParamSet, Transition};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn kind_strategy() -> impl Strategy<Value = Kind> {
    prop_oneof![
        Just(Kind::Trajectory),
        Just(Kind::Params),
        Just(Kind::Control),
        Just(Kind::Batch),
        Just(Kind::Gradient),
    ]
}

pub fn envelope_strategy() -> impl Strategy<Value = Envelope> {
    (
        kind_strategy(),
        any::<u32>(),
        any::<u64>(),
        prop::collection::vec(any::<u8>(), 0..2048),
    )
        .prop_map(|(kind, sender_id, version, payload)| Envelope::new(kind, sender_id, version, payload))
}

/// Every envelope survives encode/decode, and a stream of frames reads back
/// in order.
pub fn codec_round_trip(cases: u32) -> Result<(), String> {
    let mut runner = TestRunner::new(Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    });
    runner
        .run(&prop::collection::vec(envelope_strategy(), 1..4), |envs| {
            let mut stream = Vec::new();
            for e in &envs {
                let bytes = encode(e).unwrap();
                prop_assert_eq!(bytes.len(), e.frame_len());
                prop_assert_eq!(&decode(&bytes).unwrap(), e);
                stream.extend_from_slice(&bytes);
            }
            let mut r = stream.as_slice();
            for e in &envs {
                prop_assert_eq!(&read_frame(&mut r).unwrap().unwrap(), e);
            }
            prop_assert!(read_frame(&mut r).unwrap().is_none());
            Ok(())
        })
        .map_err(|e| e.to_string())
}

/// Runs `f` on a helper thread and fails if it has not finished within
/// `limit`.
pub fn within<T: Send + 'static>(limit: Duration, f: impl FnOnce() -> T + Send + 'static) -> Result<T, String> {
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        let _ = tx.send(f());
    });
    rx.recv_timeout(limit)
        .map_err(|_| format!("no progress within {limit:?}; possible deadlock"))
}

/// `n_senders` push their own counts of sequence-numbered envelopes; after
/// every sender closes, the receiver has seen each exactly once and in
/// per-sender order.
pub fn channel_conservation(transport: Transport, counts: &[u64], depth: usize) -> Result<(), String> {
    let (rx, addr) = inbox(transport, depth).map_err(|e| e.to_string())?;
    let mut senders = Vec::new();
    for (id, &n) in counts.iter().enumerate() {
        let out = addr.connect(id as u32, depth).map_err(|e| e.to_string())?;
        senders.push(thread::spawn(move || {
            for seq in 0..n {
                out.push_send(Envelope::new(Kind::Trajectory, 0, seq, seq.to_le_bytes().to_vec()))
                    .unwrap();
            }
            out.close().unwrap();
        }));
    }
    drop(addr);
    let mut next: HashMap<u32, u64> = HashMap::new();
    let mut total = 0u64;
    loop {
        match rx.wait_recv(Duration::from_millis(20)) {
            Ok(Some(env)) => {
                let expected = next.entry(env.sender_id).or_insert(0);
                if env.version != *expected {
                    return Err(format!(
                        "sender {} delivered {} before {}",
                        env.sender_id, env.version, expected
                    ));
                }
                if env.payload != env.version.to_le_bytes() {
                    return Err("payload corrupted".into());
                }
                *expected += 1;
                total += 1;
            }
            Ok(None) => {}
            Err(CommError::Closed) => break,
            Err(e) => return Err(e.to_string()),
        }
    }
    for h in senders {
        h.join().map_err(|_| "sender panicked".to_string())?;
    }
    let stats = rx.stats();
    let sent: u64 = counts.iter().sum();
    if total != sent || stats.received_count != stats.sent_count || stats.in_flight() != 0 {
        return Err(format!(
            "sent {sent}, received {total}, counters {}/{}",
            stats.sent_count, stats.received_count
        ));
    }
    for (id, &n) in counts.iter().enumerate() {
        if next.get(&(id as u32)).copied().unwrap_or(0) != n {
            return Err(format!("sender {id} short"));
        }
    }
    Ok(())
}

/// A subscriber polling while versions 1..=n are published never sees a
/// version go backwards and ends on the newest.
pub fn monotone_versions(transport: Transport, n: u64, subscribers: usize) -> Result<(), String> {
    let layout = Layout::new(vec![2, 2], true);
    let mut publisher = ParamPublisher::new(0);
    let mut readers = Vec::new();
    for _ in 0..subscribers {
        let (sub, addr) = subscription(transport).map_err(|e| e.to_string())?;
        publisher.add(&addr, 8).map_err(|e| e.to_string())?;
        readers.push(thread::spawn(move || {
            let mut seen = Vec::new();
            let deadline = Instant::now() + Duration::from_secs(30);
            while seen.last() != Some(&n) && Instant::now() < deadline {
                if let Some(p) = sub.wait_latest(Duration::from_millis(5)) {
                    seen.push(p.version());
                }
            }
            seen
        }));
    }
    let mut p = ParamSet::zeros(layout);
    for v in 1..=n {
        p = p.successor(vec![v as f64; p.theta().len()]);
        assert_eq!(p.version(), v);
        publisher.publish(&p).map_err(|e| e.to_string())?;
    }
    for r in readers {
        let seen = r.join().map_err(|_| "subscriber panicked".to_string())?;
        if seen.windows(2).any(|w| w[1] <= w[0]) {
            return Err(format!("versions not increasing: {seen:?}"));
        }
        if seen.last() != Some(&n) {
            return Err(format!("newest version {n} never delivered"));
        }
    }
    Ok(())
}

fn marker(i: u64) -> Transition {
    Transition {
        state: vec![i as f32],
        action: 0,
        reward: 0.0,
        next_state: vec![i as f32],
        done: false,
    }
}

/// After any number of inserts the buffer holds exactly the newest
/// `min(n, capacity)` transitions in insertion order.
pub fn fifo_eviction(cases: u32) -> Result<(), String> {
    let mut runner = TestRunner::new(Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    });
    runner
        .run(&(1usize..64, 0u64..300), |(capacity, n)| {
            let mut b = ReplayBuffer::new(capacity, 1, 1);
            for i in 0..n {
                b.insert(marker(i), i / 7);
                prop_assert!(b.len() <= capacity);
            }
            let kept: Vec<u64> = b.entries().map(|e| e.insertion_index).collect();
            let first = n.saturating_sub(capacity as u64);
            prop_assert_eq!(kept, (first..n).collect::<Vec<_>>());
            for e in b.entries() {
                prop_assert_eq!(e.transition.state[0] as u64, e.insertion_index);
                prop_assert_eq!(e.policy_version, e.insertion_index / 7);
            }
            prop_assert_eq!(b.inserted_total(), n);
            Ok(())
        })
        .map_err(|e| e.to_string())
}

/// Chi-square statistic of slot frequencies over `draws` batch draws from a
/// full buffer of `capacity`.
pub fn sampling_chi_square(capacity: usize, batch: usize, draws: usize, seed: u64) -> f64 {
    let mut b = ReplayBuffer::new(capacity, batch, batch);
    for i in 0..capacity as u64 {
        b.insert(marker(i), 0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = vec![0u64; capacity];
    for _ in 0..draws {
        for e in b.sample(batch, &mut rng).unwrap() {
            counts[e.insertion_index as usize] += 1;
        }
    }
    let expected = (draws * batch) as f64 / capacity as f64;
    counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum()
}

/// Upper 0.1% point of chi-square with 63 degrees of freedom.
pub const CHI2_63_999: f64 = 103.442;

/// Uniformity bound: every one of several seeds stays under the 0.1%
/// critical value for 64 slots.
pub fn sampling_uniformity() -> Result<(), String> {
    for seed in 0..5 {
        let x2 = sampling_chi_square(64, 32, 4_000, seed);
        if x2 > CHI2_63_999 {
            return Err(format!("seed {seed}: chi-square {x2:.1} over {CHI2_63_999}"));
        }
    }
    Ok(())
}

/// Four senders push `total` small envelopes through a shallow queue while
/// the receiver only ever probes; must finish without stalling.
pub fn soak(transport: Transport, total: u64, limit: Duration) -> Result<u64, String> {
    within(limit, move || -> Result<u64, String> {
        let senders = 4u64;
        let (rx, addr) = inbox(transport, 64).map_err(|e| e.to_string())?;
        let mut hs = Vec::new();
        for id in 0..senders {
            let out = addr.connect(id as u32, 64).map_err(|e| e.to_string())?;
            let n = total / senders + u64::from(id < total % senders);
            hs.push(thread::spawn(move || {
                for seq in 0..n {
                    out.push_send(Envelope::new(Kind::Control, 0, seq, vec![seq as u8])).unwrap();
                }
                out.close().unwrap();
            }));
        }
        drop(addr);
        let mut got = 0u64;
        loop {
            match rx.probe_recv() {
                Ok(Some(_)) => got += 1,
                Ok(None) => thread::yield_now(),
                Err(CommError::Closed) => break,
                Err(e) => return Err(e.to_string()),
            }
        }
        for h in hs {
            h.join().map_err(|_| "sender panicked".to_string())?;
        }
        if got != total {
            return Err(format!("received {got} of {total}"));
        }
        Ok(got)
    })?
}
