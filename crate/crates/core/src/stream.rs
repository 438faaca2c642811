//! Motion streaming between the retargeting relay and the policy server.
//!
//! Frames travel as little-endian UDP datagrams with a CRC32 trailer. The
//! receiver buffers them in a bounded FIFO ordered by sequence number, and a
//! fixed-rate consumer pops one frame per tick, repeating the last frame
//! (zero-order hold) whenever the queue runs dry.

use std::collections::{BinaryHeap, VecDeque};
use std::net::{SocketAddr, UdpSocket};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinematics::{HumanoidModel, RigidPose};
use crate::motion::{percentile_inclusive, Frame, MotionClip, MotionError};

pub const MAGIC: [u8; 4] = *b"OCL1";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 26;
pub const CRC_LEN: usize = 4;
pub const MAX_DATAGRAM: usize = 1400;
/// Default queue depth and future-window length.
pub const DEFAULT_WINDOW: usize = 5;
pub const DEFAULT_RATE_HZ: f64 = 50.0;
/// Fewest samples accepted by latency statistics.
pub const MIN_LATENCY_SAMPLES: usize = 10;

#[derive(Debug, Error)]
pub enum StreamError {
    #[error("truncated datagram: need {needed} bytes, got {got}")]
    Truncated { needed: usize, got: usize },
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported protocol version {0}")]
    BadVersion(u8),
    #[error("unknown message type {0}")]
    BadMsgType(u8),
    #[error("crc mismatch: header says {expected:08x}, computed {computed:08x}")]
    Corrupt { expected: u32, computed: u32 },
    #[error("datagram of {0} bytes exceeds the 1400-byte budget")]
    Oversize(usize),
    #[error("malformed packet: {0}")]
    Malformed(String),
    #[error("queue has never received a frame")]
    NoFrame,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("insufficient latency samples: {0} (need at least 10)")]
    InsufficientSamples(usize),
    #[error(transparent)]
    Motion(#[from] MotionError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, StreamError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MsgType {
    Frames = 0,
    Calibration = 1,
    Heartbeat = 2,
}

impl MsgType {
    fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(MsgType::Frames),
            1 => Ok(MsgType::Calibration),
            2 => Ok(MsgType::Heartbeat),
            other => Err(StreamError::BadMsgType(other)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WireBody {
    pub pos: [f32; 3],
    /// (w, x, y, z)
    pub quat: [f32; 4],
}

/// One frame as carried on the wire, single precision.
#[derive(Debug, Clone, PartialEq)]
pub struct WireFrame {
    pub root_lin_vel: [f32; 3],
    pub bodies: Vec<WireBody>,
    pub joint_pos: Vec<f32>,
}

impl WireFrame {
    pub fn byte_len(n_bodies: usize, n_joints: usize) -> usize {
        4 * (3 + 7 * n_bodies + n_joints)
    }

    /// Packs a motion frame; body poses come from the stored arrays or FK.
    pub fn from_frame(frame: &Frame, model: &HumanoidModel) -> Result<Self> {
        let poses = frame.key_body_poses(model)?;
        Ok(Self {
            root_lin_vel: frame.root_lin_vel.map(|v| v as f32).into(),
            bodies: poses
                .iter()
                .map(|p| {
                    let q = p.quat_wxyz();
                    WireBody {
                        pos: p.position.map(|v| v as f32).into(),
                        quat: [q[0] as f32, q[1] as f32, q[2] as f32, q[3] as f32],
                    }
                })
                .collect(),
            joint_pos: frame.joint_pos.iter().map(|&v| v as f32).collect(),
        })
    }

    /// Unpacks into a motion frame. The root pose is read from the key body
    /// that is the model's root link; angular velocity is not carried.
    pub fn to_frame(&self, t: f64, model: &HumanoidModel) -> Result<Frame> {
        if self.bodies.len() != model.key_bodies().len() || self.joint_pos.len() != model.dof() {
            return Err(StreamError::Malformed(format!(
                "frame has {} bodies / {} joints, model expects {} / {}",
                self.bodies.len(),
                self.joint_pos.len(),
                model.key_bodies().len(),
                model.dof()
            )));
        }
        let pos: Vec<Vector3<f64>> = self.bodies.iter().map(|b| Vector3::from(b.pos).cast::<f64>()).collect();
        let quat: Vec<UnitQuaternion<f64>> = self
            .bodies
            .iter()
            .map(|b| {
                let [w, x, y, z] = b.quat.map(f64::from);
                UnitQuaternion::from_quaternion(Quaternion::new(w, x, y, z))
            })
            .collect();
        let root_slot = model
            .key_bodies()
            .iter()
            .position(|&l| model.links()[l].parent.is_none())
            .ok_or_else(|| StreamError::Malformed("key bodies do not include the root link".into()))?;
        let mut frame = Frame::new(
            t,
            RigidPose::new(pos[root_slot], quat[root_slot]),
            self.joint_pos.iter().map(|&v| f64::from(v)).collect(),
        );
        frame.root_lin_vel = Vector3::from(self.root_lin_vel).cast::<f64>();
        frame.body_pos = Some(pos);
        frame.body_quat = Some(quat);
        Ok(frame)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamPacket {
    pub msg_type: MsgType,
    pub flags: u16,
    pub seq: u32,
    pub send_ts_us: u64,
    pub n_bodies: u16,
    pub n_joints: u16,
    pub frames: Vec<WireFrame>,
}

impl StreamPacket {
    pub fn heartbeat(seq: u32, send_ts_us: u64) -> Self {
        Self {
            msg_type: MsgType::Heartbeat,
            flags: 0,
            seq,
            send_ts_us,
            n_bodies: 0,
            n_joints: 0,
            frames: Vec::new(),
        }
    }

    pub fn frames(seq: u32, send_ts_us: u64, frames: Vec<WireFrame>) -> Result<Self> {
        let first = frames.first().ok_or_else(|| StreamError::Malformed("no frames".into()))?;
        let n_bodies = u16::try_from(first.bodies.len()).map_err(|_| StreamError::Malformed("too many bodies".into()))?;
        let n_joints = u16::try_from(first.joint_pos.len()).map_err(|_| StreamError::Malformed("too many joints".into()))?;
        Ok(Self {
            msg_type: MsgType::Frames,
            flags: 0,
            seq,
            send_ts_us,
            n_bodies,
            n_joints,
            frames,
        })
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + self.frames.len() * WireFrame::byte_len(self.n_bodies.into(), self.n_joints.into()) + CRC_LEN
    }
}

/// Largest frame count that fits one datagram for the given dimensions.
pub fn max_frames_per_packet(n_bodies: usize, n_joints: usize) -> usize {
    (MAX_DATAGRAM - HEADER_LEN - CRC_LEN) / WireFrame::byte_len(n_bodies, n_joints)
}

pub fn encode_packet(p: &StreamPacket) -> Result<Vec<u8>> {
    let len = p.encoded_len();
    if len > MAX_DATAGRAM {
        return Err(StreamError::Oversize(len));
    }
    let frame_count =
        u16::try_from(p.frames.len()).map_err(|_| StreamError::Malformed("too many frames".into()))?;
    let mut out = Vec::with_capacity(len);
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(p.msg_type as u8);
    out.extend_from_slice(&p.flags.to_le_bytes());
    out.extend_from_slice(&p.seq.to_le_bytes());
    out.extend_from_slice(&p.send_ts_us.to_le_bytes());
    out.extend_from_slice(&frame_count.to_le_bytes());
    out.extend_from_slice(&p.n_bodies.to_le_bytes());
    out.extend_from_slice(&p.n_joints.to_le_bytes());
    let mut put = |v: f32| -> Result<()> {
        if !v.is_finite() {
            return Err(StreamError::Malformed("non-finite value".into()));
        }
        out.extend_from_slice(&v.to_le_bytes());
        Ok(())
    };
    for (i, f) in p.frames.iter().enumerate() {
        if f.bodies.len() != usize::from(p.n_bodies) || f.joint_pos.len() != usize::from(p.n_joints) {
            return Err(StreamError::Malformed(format!("frame {i} does not match declared dimensions")));
        }
        f.root_lin_vel.iter().try_for_each(|&v| put(v))?;
        for b in &f.bodies {
            b.pos.iter().chain(&b.quat).try_for_each(|&v| put(v))?;
        }
        f.joint_pos.iter().try_for_each(|&v| put(v))?;
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    debug_assert_eq!(out.len(), len);
    Ok(out)
}

fn le_u16(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn le_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().expect("4 bytes"))
}

pub fn decode_packet(bytes: &[u8]) -> Result<StreamPacket> {
    if bytes.len() < HEADER_LEN + CRC_LEN {
        return Err(StreamError::Truncated { needed: HEADER_LEN + CRC_LEN, got: bytes.len() });
    }
    let magic: [u8; 4] = bytes[0..4].try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(StreamError::BadMagic(magic));
    }
    if bytes[4] != VERSION {
        return Err(StreamError::BadVersion(bytes[4]));
    }
    let frame_count = usize::from(le_u16(bytes, 20));
    let n_bodies = le_u16(bytes, 22);
    let n_joints = le_u16(bytes, 24);
    let needed = HEADER_LEN + frame_count * WireFrame::byte_len(n_bodies.into(), n_joints.into()) + CRC_LEN;
    if bytes.len() < needed {
        return Err(StreamError::Truncated { needed, got: bytes.len() });
    }
    if bytes.len() > needed {
        return Err(StreamError::Malformed(format!("{} trailing bytes", bytes.len() - needed)));
    }
    let body = &bytes[..needed - CRC_LEN];
    let expected = le_u32(bytes, needed - CRC_LEN);
    let computed = crc32fast::hash(body);
    if expected != computed {
        return Err(StreamError::Corrupt { expected, computed });
    }
    let msg_type = MsgType::from_u8(bytes[5])?;
    let mut at = HEADER_LEN;
    let mut take = || {
        let v = f32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"));
        at += 4;
        v
    };
    let mut frames = Vec::with_capacity(frame_count);
    for _ in 0..frame_count {
        let root_lin_vel = [take(), take(), take()];
        let bodies = (0..n_bodies)
            .map(|_| WireBody {
                pos: [take(), take(), take()],
                quat: [take(), take(), take(), take()],
            })
            .collect();
        let joint_pos = (0..n_joints).map(|_| take()).collect();
        frames.push(WireFrame { root_lin_vel, bodies, joint_pos });
    }
    Ok(StreamPacket {
        msg_type,
        flags: le_u16(bytes, 6),
        seq: le_u32(bytes, 8),
        send_ts_us: u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")),
        n_bodies,
        n_joints,
        frames,
    })
}

/// Microseconds since the Unix epoch on the local clock.
pub fn now_us() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_micros() as u64).unwrap_or(0)
}

/// One packet per frame, sequence numbers starting at `first_seq`.
pub fn packets_from_clip(clip: &MotionClip, model: &HumanoidModel, first_seq: u32) -> Result<Vec<StreamPacket>> {
    clip.frames
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let ts = (f.t * 1e6).round().max(0.0) as u64;
            StreamPacket::frames(first_seq.wrapping_add(i as u32), ts, vec![WireFrame::from_frame(f, model)?])
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PushOutcome {
    Accepted,
    /// Accepted, and the oldest buffered frame with this seq was evicted.
    Evicted(u32),
    /// seq at or below the last emitted one.
    Stale,
    Duplicate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Emitted<T> {
    pub seq: u32,
    pub item: T,
    pub held: bool,
}

#[derive(Debug)]
struct QueueState<T> {
    buf: VecDeque<(u32, T)>,
    last: Option<(u32, T)>,
    held_count: u64,
}

/// Bounded single-producer / single-consumer jitter buffer with
/// zero-order hold on underflow.
#[derive(Debug)]
pub struct FrameQueue<T> {
    capacity: usize,
    state: Mutex<QueueState<T>>,
}

impl<T: Clone> FrameQueue<T> {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(StreamError::Config("queue capacity must be at least 1".into()));
        }
        Ok(Self {
            capacity,
            state: Mutex::new(QueueState { buf: VecDeque::with_capacity(capacity), last: None, held_count: 0 }),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, QueueState<T>> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn push(&self, seq: u32, item: T) -> PushOutcome {
        let mut s = self.lock();
        if matches!(s.last, Some((last, _)) if seq <= last) {
            return PushOutcome::Stale;
        }
        let at = match s.buf.binary_search_by_key(&seq, |(k, _)| *k) {
            Ok(_) => return PushOutcome::Duplicate,
            Err(at) => at,
        };
        if s.buf.len() < self.capacity {
            s.buf.insert(at, (seq, item));
            return PushOutcome::Accepted;
        }
        if at == 0 {
            // Older than everything buffered: it is the one evicted.
            return PushOutcome::Evicted(seq);
        }
        let (old, _) = s.buf.pop_front().expect("full queue");
        s.buf.insert(at - 1, (seq, item));
        PushOutcome::Evicted(old)
    }

    pub fn pop(&self) -> Result<Emitted<T>> {
        let mut s = self.lock();
        if let Some((seq, item)) = s.buf.pop_front() {
            s.last = Some((seq, item.clone()));
            return Ok(Emitted { seq, item, held: false });
        }
        let (seq, item) = s.last.clone().ok_or(StreamError::NoFrame)?;
        s.held_count += 1;
        Ok(Emitted { seq, item, held: true })
    }

    pub fn len(&self) -> usize {
        self.lock().buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn held_count(&self) -> u64 {
        self.lock().held_count
    }

    pub fn last_emitted_seq(&self) -> Option<u32> {
        self.lock().last.as_ref().map(|(s, _)| *s)
    }

    /// Copies of the buffered frames, oldest first, without consuming them.
    pub fn snapshot(&self) -> Vec<(u32, T)> {
        self.lock().buf.iter().cloned().collect()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoopStats {
    pub ticks: u64,
    pub fresh: u64,
    pub held: u64,
    pub no_frame: u64,
    pub overruns: u64,
}

pub struct RateLoopHandle {
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<LoopStats>>,
}

impl RateLoopHandle {
    pub fn stop_flag(&self) -> Arc<AtomicBool> {
        self.stop.clone()
    }

    pub fn stop(mut self) -> LoopStats {
        self.stop.store(true, Ordering::SeqCst);
        self.thread.take().map(|t| t.join().unwrap_or_default()).unwrap_or_default()
    }

    /// Waits for the loop to end on its own (tick budget or external stop).
    pub fn join(mut self) -> LoopStats {
        self.thread.take().map(|t| t.join().unwrap_or_default()).unwrap_or_default()
    }
}

impl Drop for RateLoopHandle {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

/// Pops `queue` every `1 / rate_hz` seconds on a dedicated thread and hands
/// the result to `sink`. A sink that overruns its period bumps the overrun
/// counter; the next tick then fires immediately and the schedule restarts
/// from there, so at most one tick is caught up.
pub fn fixed_rate_loop<T, F>(
    queue: Arc<FrameQueue<T>>,
    rate_hz: f64,
    max_ticks: Option<u64>,
    mut sink: F,
) -> Result<RateLoopHandle>
where
    T: Clone + Send + 'static,
    F: FnMut(u64, Result<Emitted<T>>) + Send + 'static,
{
    if !(rate_hz.is_finite() && rate_hz > 0.0) {
        return Err(StreamError::Config(format!("rate must be positive, got {rate_hz}")));
    }
    let period = Duration::from_secs_f64(1.0 / rate_hz);
    let stop = Arc::new(AtomicBool::new(false));
    let flag = stop.clone();
    let thread = std::thread::Builder::new().name("fixed-rate-loop".into()).spawn(move || {
        let mut stats = LoopStats::default();
        let mut deadline = Instant::now();
        while !flag.load(Ordering::SeqCst) && max_ticks.is_none_or(|m| stats.ticks < m) {
            let now = Instant::now();
            if deadline > now {
                std::thread::sleep(deadline - now);
            }
            let out = queue.pop();
            match &out {
                Ok(e) if e.held => stats.held += 1,
                Ok(_) => stats.fresh += 1,
                Err(_) => stats.no_frame += 1,
            }
            sink(stats.ticks, out);
            stats.ticks += 1;
            deadline += period;
            let done = Instant::now();
            if done > deadline {
                stats.overruns += 1;
                deadline = done;
            }
        }
        stats
    })?;
    Ok(RateLoopHandle { stop, thread: Some(thread) })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum JitterDist {
    None,
    Constant { ms: f64 },
    Uniform { lo_ms: f64, hi_ms: f64 },
}

impl JitterDist {
    fn delay_ms(&self, u: f64) -> f64 {
        match *self {
            JitterDist::None => 0.0,
            JitterDist::Constant { ms } => ms,
            JitterDist::Uniform { lo_ms, hi_ms } => lo_ms + u * (hi_ms - lo_ms),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FaultConfig {
    pub drop_prob: f64,
    pub jitter: JitterDist,
    pub reorder_prob: f64,
    pub duplicate_prob: f64,
    /// Extra delay applied to a reordered datagram.
    pub reorder_extra_ms: f64,
    /// Delay of a duplicate after its original.
    pub duplicate_gap_ms: f64,
}

impl Default for FaultConfig {
    fn default() -> Self {
        Self {
            drop_prob: 0.0,
            jitter: JitterDist::None,
            reorder_prob: 0.0,
            duplicate_prob: 0.0,
            reorder_extra_ms: 40.0,
            duplicate_gap_ms: 1.0,
        }
    }
}

impl FaultConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("drop_prob", self.drop_prob),
            ("reorder_prob", self.reorder_prob),
            ("duplicate_prob", self.duplicate_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(StreamError::Config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        for (name, v) in [("reorder_extra_ms", self.reorder_extra_ms), ("duplicate_gap_ms", self.duplicate_gap_ms)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(StreamError::Config(format!("{name} must be finite and non-negative")));
            }
        }
        match self.jitter {
            JitterDist::None => {}
            JitterDist::Constant { ms } if ms.is_finite() && ms >= 0.0 => {}
            JitterDist::Uniform { lo_ms, hi_ms } if lo_ms.is_finite() && hi_ms.is_finite() && 0.0 <= lo_ms && lo_ms <= hi_ms => {}
            other => return Err(StreamError::Config(format!("invalid jitter {other:?}"))),
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Delivery {
    pub delay_ms: f64,
    pub bytes: Vec<u8>,
}

/// Seeded datagram perturbation. Every packet consumes exactly four uniform
/// draws, in order: drop, jitter, duplicate, reorder.
#[derive(Debug, Clone)]
pub struct FaultInjector {
    config: FaultConfig,
    rng: ChaCha8Rng,
}

impl FaultInjector {
    pub fn new(config: FaultConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, rng: ChaCha8Rng::seed_from_u64(seed) })
    }

    pub fn config(&self) -> &FaultConfig {
        &self.config
    }

    /// Deliveries for one datagram: none if dropped, two if duplicated.
    pub fn plan(&mut self, bytes: &[u8]) -> Vec<Delivery> {
        let u_drop: f64 = self.rng.random();
        let u_jitter: f64 = self.rng.random();
        let u_dup: f64 = self.rng.random();
        let u_reorder: f64 = self.rng.random();
        if u_drop < self.config.drop_prob {
            return Vec::new();
        }
        let mut delay = self.config.jitter.delay_ms(u_jitter);
        if u_reorder < self.config.reorder_prob {
            delay += self.config.reorder_extra_ms;
        }
        let mut out = vec![Delivery { delay_ms: delay, bytes: bytes.to_vec() }];
        if u_dup < self.config.duplicate_prob {
            out.push(Delivery { delay_ms: delay + self.config.duplicate_gap_ms, bytes: bytes.to_vec() });
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TickRecord {
    pub tick: u64,
    pub seq: u32,
    pub held: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContinuityConfig {
    pub packets: usize,
    pub rate_hz: f64,
    pub capacity: usize,
    pub fault: FaultConfig,
    pub seed: u64,
    /// Consumer tick offset relative to the producer schedule.
    pub phase_us: u64,
}

impl Default for ContinuityConfig {
    fn default() -> Self {
        Self {
            packets: 10_000,
            rate_hz: DEFAULT_RATE_HZ,
            capacity: DEFAULT_WINDOW,
            fault: FaultConfig::default(),
            seed: 0,
            phase_us: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContinuityTrace {
    /// Consumer ticks that ran before any frame had arrived.
    pub warmup_ticks: u64,
    pub records: Vec<TickRecord>,
    pub delivered: usize,
    pub decode_errors: usize,
}

impl ContinuityTrace {
    /// `tick,seq,held` lines, one per emission.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&format!("{},{},{}\n", r.tick, r.seq, u8::from(r.held)));
        }
        s.into_bytes()
    }
}

/// Discrete-event run of producer, faulty link, queue and fixed-rate
/// consumer on an integer-microsecond clock. Packet `i` is sent at
/// `i * period`; consumer tick `j` fires at `j * period + phase`; datagrams
/// arriving at or before a tick are pushed before that tick's pop.
pub fn simulate_continuity(cfg: &ContinuityConfig) -> Result<ContinuityTrace> {
    let period_us = (1e6 / cfg.rate_hz).round() as u64;
    let mut injector = FaultInjector::new(cfg.fault, cfg.seed)?;
    let mut arrivals: Vec<(u64, usize, Vec<u8>)> = Vec::new();
    for i in 0..cfg.packets {
        let send = i as u64 * period_us;
        let p = StreamPacket {
            msg_type: MsgType::Frames,
            flags: 0,
            seq: i as u32,
            send_ts_us: send,
            n_bodies: 0,
            n_joints: 0,
            frames: vec![WireFrame { root_lin_vel: [0.0; 3], bodies: vec![], joint_pos: vec![] }],
        };
        let bytes = encode_packet(&p)?;
        for d in injector.plan(&bytes) {
            arrivals.push((send + (d.delay_ms * 1000.0).round() as u64, arrivals.len(), d.bytes));
        }
    }
    arrivals.sort_by_key(|(t, order, _)| (*t, *order));
    let delivered = arrivals.len();
    let queue: FrameQueue<()> = FrameQueue::new(cfg.capacity)?;
    let mut next = 0;
    let mut decode_errors = 0;
    let mut warmup_ticks = 0;
    let mut records = Vec::with_capacity(cfg.packets);
    for tick in 0..cfg.packets as u64 {
        let now = tick * period_us + cfg.phase_us;
        while next < arrivals.len() && arrivals[next].0 <= now {
            match decode_packet(&arrivals[next].2) {
                Ok(p) => {
                    queue.push(p.seq, ());
                }
                Err(_) => decode_errors += 1,
            }
            next += 1;
        }
        match queue.pop() {
            Ok(e) => records.push(TickRecord { tick, seq: e.seq, held: e.held }),
            Err(_) => warmup_ticks += 1,
        }
    }
    Ok(ContinuityTrace { warmup_ticks, records, delivered, decode_errors })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub samples: usize,
    pub mean_ms: f64,
    pub p95_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
}

impl LatencyStats {
    pub fn from_samples(samples_ms: &[f64]) -> Result<Self> {
        if samples_ms.len() < MIN_LATENCY_SAMPLES {
            return Err(StreamError::InsufficientSamples(samples_ms.len()));
        }
        let mut sorted = samples_ms.to_vec();
        sorted.sort_by(f64::total_cmp);
        Ok(Self {
            samples: sorted.len(),
            mean_ms: sorted.iter().sum::<f64>() / sorted.len() as f64,
            p95_ms: percentile_inclusive(&sorted, 0.95),
            min_ms: sorted[0],
            max_ms: sorted[sorted.len() - 1],
        })
    }

    pub const CSV_HEADER: &'static str = "samples,mean_ms,p95_ms,min_ms,max_ms";

    pub fn csv_row(&self) -> String {
        format!("{},{:.3},{:.3},{:.3},{:.3}", self.samples, self.mean_ms, self.p95_ms, self.min_ms, self.max_ms)
    }
}

/// Clock offset of a remote peer from one heartbeat echo, assuming a
/// symmetric path: remote stamp minus the midpoint of the local round trip.
pub fn heartbeat_offset_us(local_send_us: u64, remote_us: u64, local_recv_us: u64) -> i64 {
    let mid = (local_send_us as i128 + local_recv_us as i128) / 2;
    (remote_us as i128 - mid) as i64
}

struct Scheduled {
    due: Instant,
    order: u64,
    bytes: Vec<u8>,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        (self.due, self.order) == (other.due, other.order)
    }
}
impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Scheduled {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (other.due, other.order).cmp(&(self.due, self.order))
    }
}

/// UDP sender that routes every datagram through a [`FaultInjector`] and
/// releases it from a delay scheduler thread.
pub struct FaultySender {
    tx: Option<mpsc::Sender<Scheduled>>,
    injector: FaultInjector,
    order: u64,
    thread: Option<JoinHandle<u64>>,
}

impl FaultySender {
    pub fn new(socket: UdpSocket, dest: SocketAddr, config: FaultConfig, seed: u64) -> Result<Self> {
        let injector = FaultInjector::new(config, seed)?;
        let (tx, rx) = mpsc::channel::<Scheduled>();
        let thread = std::thread::Builder::new().name("faulty-sender".into()).spawn(move || {
            let mut heap = BinaryHeap::new();
            let mut sent = 0u64;
            let mut open = true;
            while open || !heap.is_empty() {
                let wait = heap
                    .peek()
                    .map(|s: &Scheduled| s.due.saturating_duration_since(Instant::now()))
                    .unwrap_or(Duration::from_millis(100));
                if open {
                    match rx.recv_timeout(wait) {
                        Ok(s) => heap.push(s),
                        Err(mpsc::RecvTimeoutError::Timeout) => {}
                        Err(mpsc::RecvTimeoutError::Disconnected) => open = false,
                    }
                } else if !wait.is_zero() {
                    std::thread::sleep(wait);
                }
                while heap.peek().is_some_and(|s| s.due <= Instant::now()) {
                    let s = heap.pop().expect("peeked");
                    if socket.send_to(&s.bytes, dest).is_ok() {
                        sent += 1;
                    }
                }
            }
            sent
        })?;
        Ok(Self { tx: Some(tx), injector, order: 0, thread: Some(thread) })
    }

    pub fn send(&mut self, bytes: &[u8]) {
        let now = Instant::now();
        for d in self.injector.plan(bytes) {
            let s = Scheduled {
                due: now + Duration::from_secs_f64(d.delay_ms / 1000.0),
                order: self.order,
                bytes: d.bytes,
            };
            self.order += 1;
            if let Some(tx) = &self.tx {
                let _ = tx.send(s);
            }
        }
    }

    /// Flushes every pending datagram; returns how many were sent.
    pub fn finish(mut self) -> u64 {
        self.tx.take();
        self.thread.take().map(|t| t.join().unwrap_or(0)).unwrap_or(0)
    }
}

impl Drop for FaultySender {
    fn drop(&mut self) {
        self.tx.take();
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReceiverStats {
    pub datagrams: u64,
    pub frames: u64,
    pub heartbeats: u64,
    pub decode_errors: u64,
    pub stale: u64,
}

/// Receives datagrams on `socket` until `stop` is set, pushing every frame
/// into `queue` (frame `i` of a packet gets seq `packet.seq + i`). Decode
/// errors are counted and skipped.
pub fn spawn_receiver(
    socket: UdpSocket,
    queue: Arc<FrameQueue<WireFrame>>,
    stop: Arc<AtomicBool>,
) -> Result<JoinHandle<ReceiverStats>> {
    socket.set_read_timeout(Some(Duration::from_millis(20)))?;
    Ok(std::thread::Builder::new().name("stream-receiver".into()).spawn(move || {
        let mut stats = ReceiverStats::default();
        let mut buf = [0u8; 2048];
        while !stop.load(Ordering::SeqCst) {
            let Ok((len, _)) = socket.recv_from(&mut buf) else { continue };
            stats.datagrams += 1;
            match decode_packet(&buf[..len]) {
                Ok(p) if p.msg_type == MsgType::Heartbeat => stats.heartbeats += 1,
                Ok(p) => {
                    for (i, f) in p.frames.into_iter().enumerate() {
                        stats.frames += 1;
                        if matches!(
                            queue.push(p.seq.wrapping_add(i as u32), f),
                            PushOutcome::Stale | PushOutcome::Duplicate
                        ) {
                            stats.stale += 1;
                        }
                    }
                }
                Err(e) => {
                    stats.decode_errors += 1;
                    log::debug!("dropping datagram: {e}");
                }
            }
        }
        stats
    })?)
}

/// Sends `n_samples` heartbeats over loopback UDP through a fault injector
/// and reports receive time minus send timestamp.
pub fn measure_latency(n_samples: usize, interval: Duration, fault: FaultConfig, seed: u64) -> Result<LatencyStats> {
    let rx = UdpSocket::bind("127.0.0.1:0")?;
    let dest = rx.local_addr()?;
    let tx = UdpSocket::bind("127.0.0.1:0")?;
    rx.set_read_timeout(Some(Duration::from_millis(50)))?;
    let receiver = std::thread::spawn(move || {
        let mut samples = Vec::new();
        let mut seen = std::collections::HashSet::new();
        let mut buf = [0u8; 2048];
        let mut idle = 0;
        while idle < 40 {
            match rx.recv_from(&mut buf) {
                Ok((len, _)) => {
                    idle = 0;
                    let recv = now_us();
                    if let Ok(p) = decode_packet(&buf[..len]) {
                        if p.seq == u32::MAX {
                            break;
                        }
                        if seen.insert(p.seq) {
                            samples.push(recv.saturating_sub(p.send_ts_us) as f64 / 1000.0);
                        }
                    }
                }
                Err(_) => idle += 1,
            }
        }
        samples
    });
    let mut sender = FaultySender::new(tx.try_clone()?, dest, fault, seed)?;
    for seq in 0..n_samples as u32 {
        sender.send(&encode_packet(&StreamPacket::heartbeat(seq, now_us()))?);
        std::thread::sleep(interval);
    }
    sender.finish();
    tx.send_to(&encode_packet(&StreamPacket::heartbeat(u32::MAX, now_us()))?, dest)?;
    let samples = receiver.join().unwrap_or_default();
    LatencyStats::from_samples(&samples)
}
