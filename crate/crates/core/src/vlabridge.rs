//! Receding-horizon execution of planner action chunks, and conversion of
//! joint-space actions into key-body command frames.
//!
//! The executor runs the first `execute_len` actions of each chunk and then
//! asks the planner for a new one. A missing chunk is covered by holding the
//! last executed action.

use std::path::Path;
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinematics::{forward_kinematics, HumanoidModel, KinematicsError, RigidPose};
use crate::motion::{Category, Frame, Level, MotionClip};

pub const DEFAULT_HORIZON: usize = 16;
pub const DEFAULT_EXECUTE_LEN: usize = 8;
pub const DEFAULT_DENOISE_STEPS: u32 = 4;

#[derive(Debug, Error)]
pub enum VlaError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, VlaError>;

/// H × n joint targets predicted in one planner call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionChunk {
    pub actions: Vec<Vec<f64>>,
    /// Planner call this chunk answers.
    pub source_step: u64,
    #[serde(default = "default_denoise")]
    pub denoise_steps: u32,
}

fn default_denoise() -> u32 {
    DEFAULT_DENOISE_STEPS
}

impl ActionChunk {
    pub fn new(actions: Vec<Vec<f64>>, source_step: u64) -> Self {
        Self { actions, source_step, denoise_steps: DEFAULT_DENOISE_STEPS }
    }

    pub fn horizon(&self) -> usize {
        self.actions.len()
    }

    /// Checks H ≥ `execute_len`, a consistent width, and finite values.
    pub fn validate(&self, execute_len: usize, dof: Option<usize>) -> Result<()> {
        if self.horizon() < execute_len {
            return Err(VlaError::Contract(format!(
                "chunk {} has horizon {} < execute_len {execute_len}",
                self.source_step,
                self.horizon()
            )));
        }
        let width = dof.unwrap_or_else(|| self.actions[0].len());
        for (i, a) in self.actions.iter().enumerate() {
            if a.len() != width {
                return Err(VlaError::Contract(format!(
                    "chunk {} action {i} has {} values, expected {width}",
                    self.source_step,
                    a.len()
                )));
            }
            if a.iter().any(|v| !v.is_finite()) {
                return Err(VlaError::Contract(format!("chunk {} action {i} is not finite", self.source_step)));
            }
        }
        Ok(())
    }
}

/// What the executor hands the planner at a chunk boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanRequest {
    /// Index of the chunk being requested (tick / execute_len).
    pub step: u64,
    pub tick: u64,
    /// Measured joint state at the boundary.
    pub state: Vec<f64>,
}

/// High-level policy producing action chunks. `Ok(None)` means no chunk
/// arrived in time.
pub trait Planner {
    fn plan(&mut self, request: &PlanRequest) -> Result<Option<ActionChunk>>;
}

impl<F> Planner for F
where
    F: FnMut(&PlanRequest) -> Result<Option<ActionChunk>>,
{
    fn plan(&mut self, request: &PlanRequest) -> Result<Option<ActionChunk>> {
        self(request)
    }
}

/// Replays recorded chunks in order, one per planner call; runs dry with
/// `None` once the recording is exhausted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedPlanner {
    pub chunks: Vec<ActionChunk>,
    #[serde(skip)]
    cursor: usize,
}

impl ScriptedPlanner {
    pub fn new(chunks: Vec<ActionChunk>) -> Self {
        Self { chunks, cursor: 0 }
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_json_string(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("chunks serialize");
        s.push('\n');
        s
    }

    /// Joint count of the recording, if any chunk is present.
    pub fn dof(&self) -> Option<usize> {
        self.chunks.iter().find_map(|c| c.actions.first().map(Vec::len))
    }
}

impl Planner for ScriptedPlanner {
    fn plan(&mut self, request: &PlanRequest) -> Result<Option<ActionChunk>> {
        let Some(chunk) = self.chunks.get(self.cursor) else {
            return Ok(None);
        };
        self.cursor += 1;
        Ok(Some(ActionChunk { source_step: request.step, ..chunk.clone() }))
    }
}

/// One executed tick.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutedStep {
    pub tick: u64,
    pub action: Vec<f64>,
    /// Chunk and index that produced the action; `None` when held.
    pub source: Option<(u64, usize)>,
}

impl ExecutedStep {
    pub fn held(&self) -> bool {
        self.source.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ExecutionTrace {
    pub steps: Vec<ExecutedStep>,
    /// Tick of every planner invocation.
    pub refresh_log: Vec<u64>,
}

impl ExecutionTrace {
    pub fn actions(&self) -> Vec<Vec<f64>> {
        self.steps.iter().map(|s| s.action.clone()).collect()
    }

    pub fn held_count(&self) -> usize {
        self.steps.iter().filter(|s| s.held()).count()
    }
}

/// Tick-by-tick state machine shared by the inline and threaded executors.
#[derive(Debug, Clone)]
pub struct ChunkScheduler {
    execute_len: usize,
    dof: usize,
    tick: u64,
    current: Option<ActionChunk>,
    last_action: Vec<f64>,
}

impl ChunkScheduler {
    pub fn new(execute_len: usize, initial_action: Vec<f64>) -> Result<Self> {
        if execute_len == 0 {
            return Err(VlaError::Input("execute_len must be positive".into()));
        }
        if initial_action.iter().any(|v| !v.is_finite()) {
            return Err(VlaError::Input("initial action is not finite".into()));
        }
        Ok(Self { execute_len, dof: initial_action.len(), tick: 0, current: None, last_action: initial_action })
    }

    pub fn tick(&self) -> u64 {
        self.tick
    }

    /// Chunk index the next tick belongs to.
    pub fn window(&self) -> u64 {
        self.tick / self.execute_len as u64
    }

    pub fn at_boundary(&self) -> bool {
        self.tick % self.execute_len as u64 == 0
    }

    pub fn last_action(&self) -> &[f64] {
        &self.last_action
    }

    /// Installs a chunk. Returns false for a chunk that answers an earlier
    /// window; contract violations are errors.
    pub fn offer(&mut self, chunk: ActionChunk) -> Result<bool> {
        chunk.validate(self.execute_len, Some(self.dof))?;
        if chunk.source_step != self.window() {
            return Ok(false);
        }
        self.current = Some(chunk);
        Ok(true)
    }

    /// Executes the current tick and advances.
    pub fn step(&mut self) -> ExecutedStep {
        if self.at_boundary() {
            self.current = self.current.take().filter(|c| c.source_step == self.window());
        }
        let index = (self.tick % self.execute_len as u64) as usize;
        let source = match &self.current {
            Some(c) => {
                self.last_action.clone_from(&c.actions[index]);
                Some((c.source_step, index))
            }
            None => {
                log::debug!("tick {}: no chunk for window {}, holding last action", self.tick, self.window());
                None
            }
        };
        let step = ExecutedStep { tick: self.tick, action: self.last_action.clone(), source };
        self.tick += 1;
        step
    }
}

/// Runs the planner inline at every boundary. The planner sees the last
/// executed action as the measured state.
pub fn execute_chunks(
    planner: &mut dyn Planner,
    initial_action: Vec<f64>,
    execute_len: usize,
    ticks: u64,
) -> Result<ExecutionTrace> {
    let mut sched = ChunkScheduler::new(execute_len, initial_action)?;
    let mut trace = ExecutionTrace::default();
    while sched.tick() < ticks {
        if sched.at_boundary() {
            trace.refresh_log.push(sched.tick());
            let request = PlanRequest { step: sched.window(), tick: sched.tick(), state: sched.last_action().to_vec() };
            match planner.plan(&request)? {
                Some(chunk) => {
                    sched.offer(chunk)?;
                }
                None => log::warn!("planner gave no chunk at tick {}; holding", sched.tick()),
            }
        }
        trace.steps.push(sched.step());
    }
    Ok(trace)
}

/// Single-slot handoff; a new value replaces an unread one.
#[derive(Debug, Default)]
pub struct Mailbox<T> {
    slot: Mutex<(Option<T>, bool)>,
    ready: Condvar,
}

impl<T> Mailbox<T> {
    pub fn new() -> Self {
        Self { slot: Mutex::new((None, false)), ready: Condvar::new() }
    }

    /// Stores `value`, returning the unread value it displaced.
    pub fn put(&self, value: T) -> Option<T> {
        let mut g = self.slot.lock().expect("mailbox poisoned");
        let old = g.0.replace(value);
        self.ready.notify_all();
        old
    }

    pub fn take(&self) -> Option<T> {
        self.slot.lock().expect("mailbox poisoned").0.take()
    }

    /// Waits up to `timeout` for a value. Returns `None` on timeout or once
    /// closed and empty.
    pub fn take_timeout(&self, timeout: Duration) -> Option<T> {
        let deadline = Instant::now() + timeout;
        let mut g = self.slot.lock().expect("mailbox poisoned");
        loop {
            if let Some(v) = g.0.take() {
                return Some(v);
            }
            let now = Instant::now();
            if g.1 || now >= deadline {
                return None;
            }
            g = self.ready.wait_timeout(g, deadline - now).expect("mailbox poisoned").0;
        }
    }

    pub fn close(&self) {
        self.slot.lock().expect("mailbox poisoned").1 = true;
        self.ready.notify_all();
    }

    pub fn is_closed(&self) -> bool {
        self.slot.lock().expect("mailbox poisoned").1
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RealtimeConfig {
    pub execute_len: usize,
    pub ticks: u64,
    pub rate_hz: f64,
}

/// Runs the planner on its own thread and the executor at `rate_hz`. The
/// tick never waits for the planner: a chunk that is not in the mailbox
/// yet is covered by holding, and a late chunk takes over at index
/// `tick mod execute_len`. `sink` sees every step as it is executed.
pub fn execute_realtime<P, S>(
    planner: P,
    initial_action: Vec<f64>,
    cfg: RealtimeConfig,
    mut sink: S,
) -> Result<ExecutionTrace>
where
    P: Planner + Send + 'static,
    S: FnMut(&ExecutedStep),
{
    if !(cfg.rate_hz.is_finite() && cfg.rate_hz > 0.0) {
        return Err(VlaError::Input("rate must be positive".into()));
    }
    let mut sched = ChunkScheduler::new(cfg.execute_len, initial_action)?;
    let requests: Arc<Mailbox<PlanRequest>> = Arc::new(Mailbox::new());
    let replies: Arc<Mailbox<Result<Option<ActionChunk>>>> = Arc::new(Mailbox::new());
    let worker = {
        let (requests, replies) = (Arc::clone(&requests), Arc::clone(&replies));
        let mut planner = planner;
        std::thread::spawn(move || {
            while !requests.is_closed() {
                if let Some(req) = requests.take_timeout(Duration::from_millis(50)) {
                    replies.put(planner.plan(&req));
                }
            }
        })
    };
    let period = Duration::from_secs_f64(1.0 / cfg.rate_hz);
    let start = Instant::now();
    let mut trace = ExecutionTrace::default();
    let mut outcome = Ok(());
    while sched.tick() < cfg.ticks {
        if sched.at_boundary() {
            trace.refresh_log.push(sched.tick());
            requests.put(PlanRequest { step: sched.window(), tick: sched.tick(), state: sched.last_action().to_vec() });
        }
        // At a boundary allow a short grace for the fresh request; otherwise poll.
        let reply = if sched.at_boundary() { replies.take_timeout(period / 2) } else { replies.take() };
        match reply {
            Some(Ok(Some(chunk))) => {
                if let Err(e) = sched.offer(chunk) {
                    outcome = Err(e);
                    break;
                }
            }
            Some(Ok(None)) => log::warn!("planner gave no chunk near tick {}; holding", sched.tick()),
            Some(Err(e)) => {
                outcome = Err(e);
                break;
            }
            None => {}
        }
        let step = sched.step();
        sink(&step);
        trace.steps.push(step);
        let deadline = start + period.mul_f64(sched.tick() as f64);
        if let Some(wait) = deadline.checked_duration_since(Instant::now()) {
            std::thread::sleep(wait);
        }
    }
    requests.close();
    worker.join().map_err(|_| VlaError::Input("planner thread panicked".into()))?;
    outcome.map(|_| trace)
}

/// Key-body command frame for a joint-space action at an externally
/// supplied root pose.
pub fn joints_to_command(
    joint_targets: &[f64],
    model: &HumanoidModel,
    root: &RigidPose,
    t: f64,
) -> Result<Frame> {
    let poses = forward_kinematics(model, joint_targets, root)?;
    let key = model.key_body_poses(&poses);
    let mut frame = Frame::new(t, *root, joint_targets.to_vec());
    frame.body_pos = Some(key.iter().map(|p| p.position).collect());
    frame.body_quat = Some(key.iter().map(|p| p.orientation).collect());
    Ok(frame)
}

/// Command clip for an executed trace, with joint velocities by finite
/// differences so it can be tracked and scored like a teleoperation clip.
pub fn trace_to_clip(
    trace: &ExecutionTrace,
    model: &HumanoidModel,
    root: &RigidPose,
    rate_hz: f64,
    name: &str,
) -> Result<MotionClip> {
    let mut clip = MotionClip::for_model(name, rate_hz, Category::Other, Level::None, model);
    clip.frames = trace
        .steps
        .iter()
        .map(|s| joints_to_command(&s.action, model, root, s.tick as f64 / rate_hz))
        .collect::<Result<_>>()?;
    clip.derive_joint_velocities();
    Ok(clip)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chunk(step: u64, h: usize, n: usize) -> ActionChunk {
        ActionChunk::new((0..h).map(|i| vec![step as f64 * 100.0 + i as f64; n]).collect(), step)
    }

    #[test]
    fn sixteen_by_eight_schedule() {
        let mut planner = |r: &PlanRequest| -> Result<Option<ActionChunk>> { Ok(Some(chunk(r.step, 16, 2))) };
        let trace = execute_chunks(&mut planner, vec![0.0; 2], 8, 24).unwrap();
        assert_eq!(trace.refresh_log, vec![0, 8, 16]);
        assert_eq!(trace.steps.len(), 24);
        for s in &trace.steps {
            assert_eq!(s.source, Some((s.tick / 8, (s.tick % 8) as usize)));
            assert_eq!(s.action[0], (s.tick / 8) as f64 * 100.0 + (s.tick % 8) as f64);
        }
    }

    #[test]
    fn short_chunk_is_contract_error() {
        let mut planner = |r: &PlanRequest| -> Result<Option<ActionChunk>> { Ok(Some(chunk(r.step, 4, 2))) };
        assert!(matches!(execute_chunks(&mut planner, vec![0.0; 2], 8, 8), Err(VlaError::Contract(_))));
    }

    #[test]
    fn missing_chunk_holds() {
        let mut planner = |r: &PlanRequest| -> Result<Option<ActionChunk>> {
            Ok((r.step != 1).then(|| chunk(r.step, 8, 1)))
        };
        let trace = execute_chunks(&mut planner, vec![0.0], 8, 20).unwrap();
        assert_eq!(trace.held_count(), 8);
        assert!(trace.steps[8..16].iter().all(|s| s.held() && s.action == vec![7.0]));
        assert_eq!(trace.steps[16].action, vec![200.0]);
        assert_eq!(trace.refresh_log, vec![0, 8, 16]);
    }

    #[test]
    fn scripted_planner_round_trip() {
        let p = ScriptedPlanner::new(vec![chunk(0, 16, 3), chunk(1, 16, 3)]);
        let mut back = ScriptedPlanner::from_json_str(&p.to_json_string()).unwrap();
        assert_eq!(back.chunks, p.chunks);
        let trace = execute_chunks(&mut back, vec![0.0; 3], 8, 24).unwrap();
        assert_eq!(trace.held_count(), 8);
    }

    #[test]
    fn mailbox_latest_wins() {
        let m = Mailbox::new();
        assert_eq!(m.put(1), None);
        assert_eq!(m.put(2), Some(1));
        assert_eq!(m.take(), Some(2));
        assert_eq!(m.take_timeout(Duration::from_millis(5)), None);
    }

    #[test]
    fn realtime_slow_planner_never_blocks() {
        let planner = |r: &PlanRequest| -> Result<Option<ActionChunk>> {
            if r.step == 1 {
                std::thread::sleep(Duration::from_millis(50));
            }
            Ok(Some(chunk(r.step, 8, 1)))
        };
        let cfg = RealtimeConfig { execute_len: 8, ticks: 24, rate_hz: 200.0 };
        let start = Instant::now();
        let trace = execute_realtime(planner, vec![0.0], cfg, |_| {}).unwrap();
        assert!(start.elapsed() < Duration::from_millis(400));
        assert_eq!(trace.steps.len(), 24);
        // Late chunk 1 is picked up mid-window at the scheduled index.
        for s in &trace.steps {
            if let Some((c, i)) = s.source {
                assert_eq!((c, i as u64), (s.tick / 8, s.tick % 8));
            }
        }
        assert!(trace.steps[8].held());
    }

    #[test]
    fn zero_configuration_command_matches_fk() {
        let model = HumanoidModel::reference();
        let root = RigidPose::from_xyz_yaw(0.3, -0.2, 0.79, 0.4);
        let q = model.zero_configuration();
        let frame = joints_to_command(&q, &model, &root, 0.0).unwrap();
        let fk = model.key_body_poses(&forward_kinematics(&model, &q, &root).unwrap());
        let pos = frame.body_pos.unwrap();
        for (a, b) in pos.iter().zip(&fk) {
            assert!((a - b.position).norm() < 1e-12);
        }
    }
}
