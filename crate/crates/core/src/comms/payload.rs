//! Payload encodings carried inside envelopes. Everything here is
//! little-endian; real vectors inside transitions are `f32` preceded by a
//! `u32` element count.

use super::codec::CodecError;
use crate::types::{Layout, ParamSet, Trajectory, Transition, WorkerId};

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32s(&mut self, v: &[f32]) {
        self.u32(v.len() as u32);
        for &x in v {
            self.f32(x);
        }
    }
    fn f64s(&mut self, v: &[f64]) {
        self.u32(v.len() as u32);
        for &x in v {
            self.f64(x);
        }
    }
    fn transition(&mut self, t: &Transition) {
        self.f32s(&t.state);
        self.u32(t.action);
        self.f32(t.reward);
        self.f32s(&t.next_state);
        self.u8(t.done as u8);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        if self.buf.len() - self.pos < n {
            return Err(CodecError::Malformed(format!(
                "need {n} bytes at offset {}, {} left",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, CodecError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, CodecError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, CodecError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f32(&mut self) -> Result<f32, CodecError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, CodecError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn count(&mut self, elem_size: usize) -> Result<usize, CodecError> {
        let n = self.u32()? as usize;
        if n.saturating_mul(elem_size) > self.buf.len() - self.pos {
            return Err(CodecError::Malformed(format!("count {n} overruns payload")));
        }
        Ok(n)
    }
    fn f32s(&mut self) -> Result<Vec<f32>, CodecError> {
        let n = self.count(4)?;
        (0..n).map(|_| self.f32()).collect()
    }
    fn f64s(&mut self) -> Result<Vec<f64>, CodecError> {
        let n = self.count(8)?;
        (0..n).map(|_| self.f64()).collect()
    }
    fn transition(&mut self) -> Result<Transition, CodecError> {
        Ok(Transition {
            state: self.f32s()?,
            action: self.u32()?,
            reward: self.f32()?,
            next_state: self.f32s()?,
            done: match self.u8()? {
                0 => false,
                1 => true,
                b => return Err(CodecError::Malformed(format!("done flag {b}"))),
            },
        })
    }
    fn finish(self) -> Result<(), CodecError> {
        if self.pos != self.buf.len() {
            return Err(CodecError::Malformed(format!(
                "{} trailing payload bytes",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

pub fn encode_trajectory(t: &Trajectory) -> Vec<u8> {
    let mut w = Writer(Vec::with_capacity(24 + t.len() * (16 + 8 * t.obs_dim())));
    w.u32(t.actor_id);
    w.u64(t.policy_version);
    w.u64(t.produced_at);
    w.u32(t.len() as u32);
    for tr in t.transitions() {
        w.transition(tr);
    }
    w.0
}

pub fn decode_trajectory(payload: &[u8]) -> Result<Trajectory, CodecError> {
    let mut r = Reader::new(payload);
    let actor_id: WorkerId = r.u32()?;
    let policy_version = r.u64()?;
    let produced_at = r.u64()?;
    let n = r.count(17)?;
    let transitions = (0..n).map(|_| r.transition()).collect::<Result<Vec<_>, _>>()?;
    r.finish()?;
    Trajectory::new(transitions, policy_version, actor_id, produced_at)
        .map_err(|e| CodecError::Malformed(e.to_string()))
}

/// Sampled transitions, each with the policy version that produced it.
pub fn encode_batch(batch: &[(Transition, u64)]) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.u32(batch.len() as u32);
    for (t, v) in batch {
        w.u64(*v);
        w.transition(t);
    }
    w.0
}

pub fn decode_batch(payload: &[u8]) -> Result<Vec<(Transition, u64)>, CodecError> {
    let mut r = Reader::new(payload);
    let n = r.count(25)?;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let v = r.u64()?;
        out.push((r.transition()?, v));
    }
    r.finish()?;
    Ok(out)
}

/// Parameters travel as layout sizes, bias flag and `f64` values. The
/// version lives in the envelope header.
pub fn encode_params(p: &ParamSet) -> Vec<u8> {
    let layout = p.layout();
    let mut w = Writer(Vec::with_capacity(16 + 4 * layout.sizes.len() + 8 * p.theta().len()));
    w.u32(layout.sizes.len() as u32);
    for &s in &layout.sizes {
        w.u32(s as u32);
    }
    w.u8(layout.bias as u8);
    w.f64s(p.theta());
    w.0
}

pub fn decode_params(payload: &[u8], version: u64) -> Result<ParamSet, CodecError> {
    let mut r = Reader::new(payload);
    let n = r.count(4)?;
    let sizes = (0..n).map(|_| r.u32().map(|s| s as usize)).collect::<Result<Vec<_>, _>>()?;
    if sizes.len() < 2 || sizes.contains(&0) {
        return Err(CodecError::Malformed(format!("bad layout {sizes:?}")));
    }
    let bias = r.u8()? != 0;
    let theta = r.f64s()?;
    r.finish()?;
    ParamSet::new(theta, version, Layout::new(sizes, bias))
        .map_err(|e| CodecError::Malformed(e.to_string()))
}

/// Gradient computed on `samples` transitions. The envelope version carries
/// the parameter version the gradient was taken at.
pub fn encode_gradient(samples: u32, grad: &[f64]) -> Vec<u8> {
    let mut w = Writer(Vec::with_capacity(8 + 8 * grad.len()));
    w.u32(samples);
    w.f64s(grad);
    w.0
}

pub fn decode_gradient(payload: &[u8]) -> Result<(u32, Vec<f64>), CodecError> {
    let mut r = Reader::new(payload);
    let samples = r.u32()?;
    let grad = r.f64s()?;
    r.finish()?;
    Ok((samples, grad))
}

/// Rate caps applied by workers at loop boundaries. `None` lifts a cap.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Pacing {
    /// Environment steps per second, per actor.
    pub actor_rate_cap: Option<f64>,
    /// Updates per second, per learner.
    pub learner_rate_cap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ControlMsg {
    Stop,
    /// Learner asks its buffer for one batch.
    BatchRequest { batch_size: u32 },
    /// Reply to a batch request while the buffer is below warmup.
    WarmupPending { len: u32 },
    Pace(Pacing),
}

pub fn encode_control(m: &ControlMsg) -> Vec<u8> {
    let mut w = Writer(Vec::with_capacity(18));
    match m {
        ControlMsg::Stop => w.u8(0),
        ControlMsg::BatchRequest { batch_size } => {
            w.u8(1);
            w.u32(*batch_size);
        }
        ControlMsg::WarmupPending { len } => {
            w.u8(2);
            w.u32(*len);
        }
        ControlMsg::Pace(p) => {
            w.u8(3);
            w.u8(p.actor_rate_cap.is_some() as u8 | (p.learner_rate_cap.is_some() as u8) << 1);
            w.f64(p.actor_rate_cap.unwrap_or(0.0));
            w.f64(p.learner_rate_cap.unwrap_or(0.0));
        }
    }
    w.0
}

pub fn decode_control(payload: &[u8]) -> Result<ControlMsg, CodecError> {
    let mut r = Reader::new(payload);
    let msg = match r.u8()? {
        0 => ControlMsg::Stop,
        1 => ControlMsg::BatchRequest {
            batch_size: r.u32()?,
        },
        2 => ControlMsg::WarmupPending { len: r.u32()? },
        3 => {
            let flags = r.u8()?;
            let a = r.f64()?;
            let l = r.f64()?;
            ControlMsg::Pace(Pacing {
                actor_rate_cap: (flags & 1 != 0).then_some(a),
                learner_rate_cap: (flags & 2 != 0).then_some(l),
            })
        }
        t => return Err(CodecError::Malformed(format!("control tag {t}"))),
    };
    r.finish()?;
    Ok(msg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_traj() -> Trajectory {
        let t = |i: u32| Transition {
            state: vec![i as f32, -1.5, 0.25],
            action: i % 2,
            reward: 1.0,
            next_state: vec![i as f32 + 1.0, -1.5, 0.5],
            done: i == 2,
        };
        Trajectory::new(vec![t(0), t(1), t(2)], 17, 4, 123_456).unwrap()
    }

    #[test]
    fn trajectory_bytes_are_little_endian_f32_with_count() {
        let bytes = encode_trajectory(&sample_traj());
        // actor id, version, produced_at, count
        assert_eq!(&bytes[0..4], &4u32.to_le_bytes());
        assert_eq!(&bytes[4..12], &17u64.to_le_bytes());
        assert_eq!(&bytes[20..24], &3u32.to_le_bytes());
        // first state vector: count 3 then 0.0f32
        assert_eq!(&bytes[24..28], &3u32.to_le_bytes());
        assert_eq!(&bytes[32..36], &(-1.5f32).to_le_bytes());
        assert_eq!(decode_trajectory(&bytes).unwrap(), sample_traj());
    }

    #[test]
    fn batch_round_trip() {
        let batch: Vec<_> = sample_traj()
            .into_transitions()
            .into_iter()
            .zip([3u64, 4, 5])
            .collect();
        assert_eq!(decode_batch(&encode_batch(&batch)).unwrap(), batch);
    }

    #[test]
    fn params_round_trip() {
        let p = ParamSet::new(vec![0.5, -2.0, 1e-9, 3.0, 4.0, 5.0], 0, Layout::new(vec![2, 2], true))
            .unwrap();
        let back = decode_params(&encode_params(&p), 42).unwrap();
        assert_eq!(back.theta(), p.theta());
        assert_eq!(back.layout(), p.layout());
        assert_eq!(back.version(), 42);
    }

    #[test]
    fn control_round_trip() {
        for m in [
            ControlMsg::Stop,
            ControlMsg::BatchRequest { batch_size: 32 },
            ControlMsg::WarmupPending { len: 7 },
            ControlMsg::Pace(Pacing::default()),
            ControlMsg::Pace(Pacing {
                actor_rate_cap: Some(120.5),
                learner_rate_cap: None,
            }),
            ControlMsg::Pace(Pacing {
                actor_rate_cap: None,
                learner_rate_cap: Some(3.0),
            }),
        ] {
            assert_eq!(decode_control(&encode_control(&m)).unwrap(), m);
        }
    }

    #[test]
    fn malformed_payloads_rejected() {
        let bytes = encode_trajectory(&sample_traj());
        assert!(decode_trajectory(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_control(&[9]).is_err());
        // an absurd count must not allocate
        let mut evil = vec![0u8; 20];
        evil.extend_from_slice(&u32::MAX.to_le_bytes());
        assert!(decode_trajectory(&evil).is_err());
    }
}
