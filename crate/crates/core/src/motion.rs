//! Motion clips: data model, text file format, resampling, corpus
//! statistics, heuristic filtering, and training-recipe composition.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{UnitQuaternion, Vector3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinematics::{
    forward_kinematics, quat_from_wxyz, quat_to_wxyz, slerp, HumanoidModel, KinematicsError,
    RigidPose, ROOT_UNIT_TOL,
};

/// Allowed deviation of frame spacing from `1 / fps`.
pub const TIMESTAMP_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum MotionError {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("invalid clip at {field}: {message}")]
    Invalid { field: String, message: String },
    #[error("cannot resample a single-frame clip from {from} Hz to {to} Hz")]
    Unsupported { from: f64, to: f64 },
    #[error("input error: {0}")]
    Input(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MotionError>;

fn invalid(field: impl Into<String>, message: impl Into<String>) -> MotionError {
    MotionError::Invalid {
        field: field.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    LocoManip,
    Manip,
    Squat,
    Walk,
    Run,
    Jump,
    Other,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    High,
    Medium,
    Low,
    Fast,
    MediumSpeed,
    Slow,
    None,
}

impl Category {
    /// The six benchmark categories in report order.
    pub const BENCHMARK: [Category; 6] = [
        Category::LocoManip,
        Category::Manip,
        Category::Squat,
        Category::Walk,
        Category::Run,
        Category::Jump,
    ];

    /// Levels valid for this category, in report order.
    pub fn levels(self) -> &'static [Level] {
        match self {
            Category::Walk | Category::Run => &[Level::Fast, Level::MediumSpeed, Level::Slow],
            Category::LocoManip | Category::Manip | Category::Squat | Category::Jump => {
                &[Level::High, Level::Medium, Level::Low]
            }
            Category::Other => &[Level::None],
        }
    }

    pub fn accepts(self, level: Level) -> bool {
        self.levels().contains(&level)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Category::LocoManip => "loco_manip",
            Category::Manip => "manip",
            Category::Squat => "squat",
            Category::Walk => "walk",
            Category::Run => "run",
            Category::Jump => "jump",
            Category::Other => "other",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            Category::LocoManip => "Loco-Manip",
            Category::Manip => "Manip",
            Category::Squat => "Squat",
            Category::Walk => "Walk",
            Category::Run => "Run",
            Category::Jump => "Jump",
            Category::Other => "Other",
        }
    }
}

impl Level {
    pub fn as_str(self) -> &'static str {
        match self {
            Level::High => "high",
            Level::Medium => "medium",
            Level::Low => "low",
            Level::Fast => "fast",
            Level::MediumSpeed => "medium_speed",
            Level::Slow => "slow",
            Level::None => "none",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            Level::High => "High",
            Level::Medium | Level::MediumSpeed => "Medium",
            Level::Low => "Low",
            Level::Fast => "Fast",
            Level::Slow => "Slow",
            Level::None => "-",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Category {
    type Err = MotionError;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| MotionError::Parse(format!("unknown category `{s}`")))
    }
}

impl FromStr for Level {
    type Err = MotionError;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| MotionError::Parse(format!("unknown level `{s}`")))
    }
}

/// One timestamped sample of a reference trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub t: f64,
    pub root: RigidPose,
    pub root_lin_vel: Vector3<f64>,
    pub root_ang_vel: Vector3<f64>,
    pub joint_pos: Vec<f64>,
    pub joint_vel: Option<Vec<f64>>,
    /// World-frame key-body positions, one per clip key body.
    pub body_pos: Option<Vec<Vector3<f64>>>,
    pub body_quat: Option<Vec<UnitQuaternion<f64>>>,
}

impl Frame {
    /// A frame with zero velocities and no body arrays.
    pub fn new(t: f64, root: RigidPose, joint_pos: Vec<f64>) -> Self {
        Self {
            t,
            root,
            root_lin_vel: Vector3::zeros(),
            root_ang_vel: Vector3::zeros(),
            joint_pos,
            joint_vel: None,
            body_pos: None,
            body_quat: None,
        }
    }

    /// Key-body poses in world frame; taken from the stored arrays when both
    /// are present, otherwise computed by forward kinematics.
    pub fn key_body_poses(&self, model: &HumanoidModel) -> Result<Vec<RigidPose>> {
        if let (Some(pos), Some(quat)) = (&self.body_pos, &self.body_quat) {
            if pos.len() == model.key_bodies().len() && quat.len() == pos.len() {
                return Ok(pos.iter().zip(quat).map(|(p, q)| RigidPose::new(*p, *q)).collect());
            }
        }
        let poses = forward_kinematics(model, &self.joint_pos, &self.root)?;
        Ok(model.key_body_poses(&poses))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MotionClip {
    pub name: String,
    pub fps: f64,
    pub category: Category,
    pub level: Level,
    pub dof_names: Vec<String>,
    pub key_bodies: Vec<String>,
    pub frames: Vec<Frame>,
}

impl MotionClip {
    /// Number of joint values per frame.
    pub fn dof(&self) -> usize {
        self.frames.first().map_or(self.dof_names.len(), |f| f.joint_pos.len())
    }

    /// Nominal duration: frame count times the sample period.
    pub fn duration(&self) -> f64 {
        self.frames.len() as f64 / self.fps
    }

    /// Time between the first and the last frame.
    pub fn span(&self) -> f64 {
        match (self.frames.first(), self.frames.last()) {
            (Some(a), Some(b)) => b.t - a.t,
            _ => 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return Err(invalid("fps", "fps must be positive"));
        }
        if !self.category.accepts(self.level) {
            return Err(invalid(
                "level",
                format!("level `{}` is not valid for category `{}`", self.level, self.category),
            ));
        }
        if self.frames.is_empty() {
            return Err(invalid("frames", "clip has no frames"));
        }
        let n = self.frames[0].joint_pos.len();
        if !self.dof_names.is_empty() && self.dof_names.len() != n {
            return Err(invalid(
                "dof_names",
                format!("{} names for {} joints", self.dof_names.len(), n),
            ));
        }
        let k = self.key_bodies.len();
        let period = 1.0 / self.fps;
        for (i, f) in self.frames.iter().enumerate() {
            let at = |field: &str| format!("frames[{i}].{field}");
            if !f.t.is_finite() {
                return Err(invalid(at("t"), "non-finite timestamp"));
            }
            if i > 0 {
                let dt = f.t - self.frames[i - 1].t;
                if dt <= 0.0 {
                    return Err(invalid(at("t"), "timestamps must be strictly increasing"));
                }
                if (dt - period).abs() > TIMESTAMP_TOL {
                    return Err(invalid(at("t"), format!("spacing {dt} differs from 1/fps = {period}")));
                }
            }
            if !f.root.is_finite() {
                return Err(invalid(at("root"), "non-finite root pose"));
            }
            if !(f.root_lin_vel.iter().all(|v| v.is_finite()) && f.root_ang_vel.iter().all(|v| v.is_finite())) {
                return Err(invalid(at("root_vel"), "non-finite root velocity"));
            }
            if f.joint_pos.len() != n {
                return Err(invalid(at("joint_pos"), format!("expected {n} values, got {}", f.joint_pos.len())));
            }
            if f.joint_pos.iter().any(|v| !v.is_finite()) {
                return Err(invalid(at("joint_pos"), "non-finite value"));
            }
            if let Some(v) = &f.joint_vel {
                if v.len() != n || v.iter().any(|x| !x.is_finite()) {
                    return Err(invalid(at("joint_vel"), format!("expected {n} finite values")));
                }
            }
            if let Some(p) = &f.body_pos {
                if p.len() != k || p.iter().any(|x| !x.iter().all(|v| v.is_finite())) {
                    return Err(invalid(at("body_pos"), format!("expected {k} finite positions")));
                }
            }
            if let Some(q) = &f.body_quat {
                if q.len() != k {
                    return Err(invalid(at("body_quat"), format!("expected {k} quaternions")));
                }
            }
        }
        Ok(())
    }

    /// Fills missing joint velocities by central differences (one-sided at
    /// the ends).
    pub fn derive_joint_velocities(&mut self) {
        if self.frames.iter().all(|f| f.joint_vel.is_some()) {
            return;
        }
        let vel = finite_difference(&self.frames, self.fps, |f| f.joint_pos.clone());
        for (f, v) in self.frames.iter_mut().zip(vel) {
            if f.joint_vel.is_none() {
                f.joint_vel = Some(v);
            }
        }
    }

    /// Fills missing key-body arrays from forward kinematics.
    pub fn derive_body_kinematics(&mut self, model: &HumanoidModel) -> Result<()> {
        for f in &mut self.frames {
            if f.body_pos.is_some() && f.body_quat.is_some() {
                continue;
            }
            let poses = forward_kinematics(model, &f.joint_pos, &f.root)?;
            let key = model.key_body_poses(&poses);
            if f.body_pos.is_none() {
                f.body_pos = Some(key.iter().map(|p| p.position).collect());
            }
            if f.body_quat.is_none() {
                f.body_quat = Some(key.iter().map(|p| p.orientation).collect());
            }
        }
        if self.key_bodies.is_empty() {
            self.key_bodies = model.key_body_names();
        }
        Ok(())
    }

    /// Empty clip header bound to `model`'s joint and key-body names.
    pub fn for_model(name: &str, fps: f64, category: Category, level: Level, model: &HumanoidModel) -> Self {
        Self {
            name: name.to_string(),
            fps,
            category,
            level,
            dof_names: model.joint_names(),
            key_bodies: model.key_body_names(),
            frames: Vec::new(),
        }
    }
}

/// Per-frame derivative of a vector-valued channel at the given rate.
pub(crate) fn finite_difference<F>(frames: &[Frame], fps: f64, channel: F) -> Vec<Vec<f64>>
where
    F: Fn(&Frame) -> Vec<f64>,
{
    let values: Vec<Vec<f64>> = frames.iter().map(&channel).collect();
    let n = values.len();
    (0..n)
        .map(|i| {
            if n < 2 {
                return vec![0.0; values[i].len()];
            }
            let (a, b, span) = if i == 0 {
                (0, 1, 1.0)
            } else if i == n - 1 {
                (n - 2, n - 1, 1.0)
            } else {
                (i - 1, i + 1, 2.0)
            };
            values[b]
                .iter()
                .zip(&values[a])
                .map(|(x1, x0)| (x1 - x0) * fps / span)
                .collect()
        })
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct FrameRecord {
    t: f64,
    root_pos: [f64; 3],
    root_quat: [f64; 4],
    root_lin_vel: [f64; 3],
    root_ang_vel: [f64; 3],
    joint_pos: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    joint_vel: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    body_pos: Option<Vec<[f64; 3]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    body_quat: Option<Vec<[f64; 4]>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ClipFile {
    name: String,
    fps: f64,
    category: Category,
    level: Level,
    n: usize,
    #[serde(rename = "K")]
    k: usize,
    #[serde(default)]
    dof_names: Vec<String>,
    #[serde(default)]
    key_bodies: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    duration: Option<f64>,
    frames: Vec<FrameRecord>,
}

fn v3(v: &Vector3<f64>) -> [f64; 3] {
    [v.x, v.y, v.z]
}

impl MotionClip {
    /// Canonical text serialization (pretty JSON, newline-terminated).
    pub fn to_json_string(&self) -> String {
        let file = ClipFile {
            name: self.name.clone(),
            fps: self.fps,
            category: self.category,
            level: self.level,
            n: self.dof(),
            k: self.key_bodies.len(),
            dof_names: self.dof_names.clone(),
            key_bodies: self.key_bodies.clone(),
            duration: Some(self.duration()),
            frames: self
                .frames
                .iter()
                .map(|f| FrameRecord {
                    t: f.t,
                    root_pos: f.root.position_array(),
                    root_quat: f.root.quat_wxyz(),
                    root_lin_vel: v3(&f.root_lin_vel),
                    root_ang_vel: v3(&f.root_ang_vel),
                    joint_pos: f.joint_pos.clone(),
                    joint_vel: f.joint_vel.clone(),
                    body_pos: f.body_pos.as_ref().map(|b| b.iter().map(v3).collect()),
                    body_quat: f.body_quat.as_ref().map(|b| b.iter().map(quat_to_wxyz).collect()),
                })
                .collect(),
        };
        let mut s = serde_json::to_string_pretty(&file).expect("clip serializes");
        s.push('\n');
        s
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let file: ClipFile = serde_json::from_str(s).map_err(|e| MotionError::Parse(e.to_string()))?;
        if !(file.fps.is_finite() && file.fps > 0.0) {
            return Err(invalid("fps", "fps must be positive"));
        }
        if !file.dof_names.is_empty() && file.dof_names.len() != file.n {
            return Err(invalid("dof_names", format!("{} names but n = {}", file.dof_names.len(), file.n)));
        }
        if !file.key_bodies.is_empty() && file.key_bodies.len() != file.k {
            return Err(invalid("key_bodies", format!("{} names but K = {}", file.key_bodies.len(), file.k)));
        }
        let mut frames = Vec::with_capacity(file.frames.len());
        for (i, r) in file.frames.into_iter().enumerate() {
            let at = |field: &str| format!("frames[{i}].{field}");
            if r.joint_pos.len() != file.n {
                return Err(invalid(at("joint_pos"), format!("expected n = {} values, got {}", file.n, r.joint_pos.len())));
            }
            if let Some(v) = &r.joint_vel {
                if v.len() != file.n {
                    return Err(invalid(at("joint_vel"), format!("expected n = {} values, got {}", file.n, v.len())));
                }
            }
            let root = RigidPose::from_arrays(r.root_pos, r.root_quat)
                .map_err(|e| invalid(at("root"), e.to_string()))?;
            let body_pos = match r.body_pos {
                Some(b) if b.len() != file.k => {
                    return Err(invalid(at("body_pos"), format!("expected K = {} entries, got {}", file.k, b.len())))
                }
                Some(b) => Some(b.into_iter().map(Vector3::from).collect()),
                None => None,
            };
            let body_quat = match r.body_quat {
                Some(b) if b.len() != file.k => {
                    return Err(invalid(at("body_quat"), format!("expected K = {} entries, got {}", file.k, b.len())))
                }
                Some(b) => Some(
                    b.into_iter()
                        .enumerate()
                        .map(|(j, q)| {
                            quat_from_wxyz(q, ROOT_UNIT_TOL)
                                .map_err(|e| invalid(format!("frames[{i}].body_quat[{j}]"), e.to_string()))
                        })
                        .collect::<Result<Vec<_>>>()?,
                ),
                None => None,
            };
            frames.push(Frame {
                t: r.t,
                root,
                root_lin_vel: Vector3::from(r.root_lin_vel),
                root_ang_vel: Vector3::from(r.root_ang_vel),
                joint_pos: r.joint_pos,
                joint_vel: r.joint_vel,
                body_pos,
                body_quat,
            });
        }
        let clip = MotionClip {
            name: file.name,
            fps: file.fps,
            category: file.category,
            level: file.level,
            dof_names: file.dof_names,
            key_bodies: file.key_bodies,
            frames,
        };
        clip.validate()?;
        Ok(clip)
    }
}

pub fn load_clip(path: impl AsRef<Path>) -> Result<MotionClip> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    MotionClip::from_json_str(&text).map_err(|e| match e {
        MotionError::Parse(m) => MotionError::Parse(format!("{}: {m}", path.display())),
        MotionError::Invalid { field, message } => MotionError::Invalid {
            field: format!("{}: {field}", path.display()),
            message,
        },
        other => other,
    })
}

pub fn save_clip(clip: &MotionClip, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, clip.to_json_string())?;
    Ok(())
}

fn lerp_vec(a: &[f64], b: &[f64], alpha: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + (y - x) * alpha).collect()
}

fn lerp3(a: &Vector3<f64>, b: &Vector3<f64>, alpha: f64) -> Vector3<f64> {
    a + (b - a) * alpha
}

fn interpolate(a: &Frame, b: &Frame, alpha: f64, t: f64) -> Frame {
    Frame {
        t,
        root: RigidPose::new(
            lerp3(&a.root.position, &b.root.position, alpha),
            slerp(&a.root.orientation, &b.root.orientation, alpha),
        ),
        root_lin_vel: lerp3(&a.root_lin_vel, &b.root_lin_vel, alpha),
        root_ang_vel: lerp3(&a.root_ang_vel, &b.root_ang_vel, alpha),
        joint_pos: lerp_vec(&a.joint_pos, &b.joint_pos, alpha),
        joint_vel: match (&a.joint_vel, &b.joint_vel) {
            (Some(x), Some(y)) => Some(lerp_vec(x, y, alpha)),
            _ => None,
        },
        body_pos: match (&a.body_pos, &b.body_pos) {
            (Some(x), Some(y)) => Some(x.iter().zip(y).map(|(p, q)| lerp3(p, q, alpha)).collect()),
            _ => None,
        },
        body_quat: match (&a.body_quat, &b.body_quat) {
            (Some(x), Some(y)) => Some(x.iter().zip(y).map(|(p, q)| slerp(p, q, alpha)).collect()),
            _ => None,
        },
    }
}

/// Resamples a clip onto a uniform grid at `target_fps`.
///
/// The output grid starts at the first source timestamp and is the shortest
/// uniform grid reaching the last one; a final sample past the source end
/// clamps to the last source frame, so both endpoint frames are preserved.
pub fn resample(clip: &MotionClip, target_fps: f64) -> Result<MotionClip> {
    if !(target_fps.is_finite() && target_fps > 0.0) {
        return Err(MotionError::Input("target fps must be positive".into()));
    }
    clip.validate()?;
    if target_fps == clip.fps {
        return Ok(clip.clone());
    }
    if clip.frames.len() == 1 {
        return Err(MotionError::Unsupported {
            from: clip.fps,
            to: target_fps,
        });
    }
    let t0 = clip.frames[0].t;
    let last = clip.frames.len() - 1;
    let t_end = clip.frames[last].t;
    let count = ((t_end - t0) * target_fps - 1e-9).ceil() as usize + 1;
    let mut frames = Vec::with_capacity(count);
    for i in 0..count {
        let t = t0 + i as f64 / target_fps;
        let at = t.min(t_end);
        // Source index from the uniform source grid.
        let pos = (at - t0) * clip.fps;
        let lo = (pos.floor() as usize).min(last);
        let alpha = pos - lo as f64;
        let frame = if lo == last || alpha.abs() < 1e-9 {
            let mut f = clip.frames[lo].clone();
            f.t = t;
            f
        } else if (1.0 - alpha).abs() < 1e-9 {
            let mut f = clip.frames[lo + 1].clone();
            f.t = t;
            f
        } else {
            interpolate(&clip.frames[lo], &clip.frames[lo + 1], alpha, t)
        };
        frames.push(frame);
    }
    Ok(MotionClip {
        fps: target_fps,
        frames,
        ..clip.clone()
    })
}

/// Percentile by linear interpolation between closest ranks (inclusive
/// definition). `sorted` must be ascending and non-empty; `p` in `[0, 1]`.
pub fn percentile_inclusive(sorted: &[f64], p: f64) -> f64 {
    let rank = p * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (rank - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatMetric {
    /// Planar root speed (m/s); min/max columns hold min-P5 and max-P95.
    Speed,
    RootHeight,
    HandHeight,
}

impl StatMetric {
    pub fn as_str(self) -> &'static str {
        match self {
            StatMetric::Speed => "speed",
            StatMetric::RootHeight => "root_height",
            StatMetric::HandHeight => "hand_height",
        }
    }

    /// The metric reported for a category in the published corpus table.
    pub fn primary_for(category: Category) -> StatMetric {
        match category {
            Category::Walk | Category::Run => StatMetric::Speed,
            Category::Jump | Category::Squat => StatMetric::RootHeight,
            _ => StatMetric::HandHeight,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsRow {
    pub category: Category,
    pub level: Level,
    pub metric: StatMetric,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub clips: usize,
    pub frames: usize,
}

impl StatsRow {
    pub fn label(&self) -> String {
        format!("{} {}", self.category.display_name(), self.level.display_name())
    }

    /// `Walk Slow | 0.618 | 1.704 | 1.026`
    pub fn table_line(&self) -> String {
        format!("{} | {:.3} | {:.3} | {:.3}", self.label(), self.min, self.max, self.mean)
    }
}

pub const STATS_CSV_HEADER: &str = "category,level,metric,min,max,mean,clips,frames";

pub fn stats_to_csv(rows: &[StatsRow]) -> String {
    let mut out = String::from(STATS_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.category,
            r.level,
            r.metric.as_str(),
            r.min,
            r.max,
            r.mean,
            r.clips,
            r.frames
        ));
    }
    out
}

/// Arithmetic mean computed about the first sample, `x0 + Σ(x - x0) / n`.
/// Constant inputs come back exactly. `values` must be non-empty.
pub fn shifted_mean(values: &[f64]) -> f64 {
    let shift = values[0];
    shift + values.iter().map(|v| v - shift).sum::<f64>() / values.len() as f64
}

/// Per (category, level) statistics of planar root speed, root height, and
/// hand height.
///
/// Speed percentiles are taken per clip and then reduced with min (P5) and
/// max (P95) across clips; means are over all frames of all clips in the
/// group. Hand heights use every key body whose name contains `wrist`.
pub fn clip_stats(clips: &[MotionClip], model: &HumanoidModel) -> Result<Vec<StatsRow>> {
    if clips.is_empty() {
        return Err(MotionError::Input("no clips to summarize".into()));
    }
    let hands: Vec<usize> = model
        .key_bodies()
        .iter()
        .copied()
        .filter(|&i| model.link_name(i).contains("wrist"))
        .collect();

    #[derive(Default)]
    struct Acc {
        clips: usize,
        frames: usize,
        p5: Vec<f64>,
        p95: Vec<f64>,
        speeds: Vec<f64>,
        root_h: Vec<f64>,
        hand_h: Vec<f64>,
    }
    let mut groups: BTreeMap<(Category, Level), Acc> = BTreeMap::new();
    for clip in clips {
        if clip.dof() != model.dof() {
            return Err(MotionError::Input(format!(
                "clip `{}` has {} joints, model has {}",
                clip.name,
                clip.dof(),
                model.dof()
            )));
        }
        if clip.frames.is_empty() {
            return Err(MotionError::Input(format!("clip `{}` is empty", clip.name)));
        }
        let acc = groups.entry((clip.category, clip.level)).or_default();
        acc.clips += 1;
        acc.frames += clip.frames.len();
        let mut speeds: Vec<f64> = clip
            .frames
            .iter()
            .map(|f| f.root_lin_vel.xy().norm())
            .collect();
        acc.speeds.extend_from_slice(&speeds);
        speeds.sort_by(f64::total_cmp);
        acc.p5.push(percentile_inclusive(&speeds, 0.05));
        acc.p95.push(percentile_inclusive(&speeds, 0.95));
        for f in &clip.frames {
            acc.root_h.push(f.root.position.z);
            if !hands.is_empty() {
                let poses = forward_kinematics(model, &f.joint_pos, &f.root)?;
                acc.hand_h.extend(hands.iter().map(|&h| poses[h].position.z));
            }
        }
    }

    let min_max_mean = |v: &[f64]| {
        let min = v.iter().copied().fold(f64::INFINITY, f64::min);
        let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (min, max, shifted_mean(v))
    };
    let mut rows = Vec::new();
    for ((category, level), acc) in groups {
        let row = |metric, min, max, mean| StatsRow {
            category,
            level,
            metric,
            min,
            max,
            mean,
            clips: acc.clips,
            frames: acc.frames,
        };
        rows.push(row(
            StatMetric::Speed,
            acc.p5.iter().copied().fold(f64::INFINITY, f64::min),
            acc.p95.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            shifted_mean(&acc.speeds),
        ));
        let (lo, hi, mean) = min_max_mean(&acc.root_h);
        rows.push(row(StatMetric::RootHeight, lo, hi, mean));
        if !acc.hand_h.is_empty() {
            let (lo, hi, mean) = min_max_mean(&acc.hand_h);
            rows.push(row(StatMetric::HandHeight, lo, hi, mean));
        }
    }
    Ok(rows)
}

/// Heuristic training-data filter thresholds. Unset position bounds are
/// unconstrained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterCriteria {
    #[serde(default)]
    pub root_pos_bounds: [Option<[f64; 2]>; 3],
    pub root_speed_max: f64,
    pub joint_energy_max: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    RootPos,
    RootSpeed,
    JointEnergy,
}

#[derive(Debug, Clone)]
pub struct Rejected {
    pub clip: MotionClip,
    pub reasons: Vec<RejectReason>,
    pub joint_energy: f64,
}

#[derive(Debug, Clone, Default)]
pub struct FilterOutcome {
    pub kept: Vec<MotionClip>,
    pub rejected: Vec<Rejected>,
}

/// Mean over frames of the summed squared joint velocities.
pub fn joint_energy(clip: &MotionClip) -> f64 {
    let vel: Vec<Vec<f64>> = if clip.frames.iter().all(|f| f.joint_vel.is_some()) {
        clip.frames.iter().map(|f| f.joint_vel.clone().unwrap_or_default()).collect()
    } else {
        finite_difference(&clip.frames, clip.fps, |f| f.joint_pos.clone())
    };
    if vel.is_empty() {
        return 0.0;
    }
    vel.iter().map(|v| v.iter().map(|x| x * x).sum::<f64>()).sum::<f64>() / vel.len() as f64
}

pub fn filter_clips(clips: Vec<MotionClip>, criteria: &FilterCriteria) -> Result<FilterOutcome> {
    let bounds_ok = criteria
        .root_pos_bounds
        .iter()
        .flatten()
        .all(|b| b[0].is_finite() && b[1].is_finite() && b[0] <= b[1]);
    if !bounds_ok || !criteria.root_speed_max.is_finite() || !criteria.joint_energy_max.is_finite() {
        return Err(MotionError::Config("filter thresholds must be finite".into()));
    }
    if criteria.joint_energy_max < 0.0 || criteria.root_speed_max < 0.0 {
        return Err(MotionError::Config("filter thresholds must be non-negative".into()));
    }
    let mut out = FilterOutcome::default();
    for clip in clips {
        let mut reasons = Vec::new();
        let pos_ok = clip.frames.iter().all(|f| {
            criteria
                .root_pos_bounds
                .iter()
                .zip(f.root.position.iter())
                .all(|(b, v)| b.is_none_or(|[lo, hi]| *v >= lo && *v <= hi))
        });
        if !pos_ok {
            reasons.push(RejectReason::RootPos);
        }
        if clip.frames.iter().any(|f| f.root_lin_vel.norm() > criteria.root_speed_max) {
            reasons.push(RejectReason::RootSpeed);
        }
        let energy = joint_energy(&clip);
        if energy > criteria.joint_energy_max {
            reasons.push(RejectReason::JointEnergy);
        }
        if reasons.is_empty() {
            out.kept.push(clip);
        } else {
            out.rejected.push(Rejected {
                clip,
                reasons,
                joint_energy: energy,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedClip {
    pub label: String,
    pub clip: String,
    /// Sampling weight; weights of one label sum to its target fraction.
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecipeManifest {
    pub seed: u64,
    pub total_count: usize,
    pub pools: BTreeMap<String, Vec<String>>,
    pub target_fraction: BTreeMap<String, f64>,
    pub counts: BTreeMap<String, usize>,
    pub selected: Vec<SelectedClip>,
    /// Labels whose pool was exhausted and sampled again with replacement.
    pub wrapped: Vec<String>,
}

impl RecipeManifest {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("label,clip,weight\n");
        for s in &self.selected {
            out.push_str(&format!("{},{},{}\n", s.label, s.clip, s.weight));
        }
        out
    }
}

/// Integer counts proportional to `fractions` that sum to `total`, using
/// largest-remainder rounding with ties broken by label order.
pub fn largest_remainder(fractions: &BTreeMap<String, f64>, total: usize) -> BTreeMap<String, usize> {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut remainders: Vec<(&String, f64)> = Vec::new();
    let mut assigned = 0usize;
    for (label, &f) in fractions {
        let exact = f * total as f64;
        let floor = exact.floor();
        counts.insert(label.clone(), floor as usize);
        assigned += floor as usize;
        remainders.push((label, exact - floor));
    }
    // Stable sort keeps label order among equal remainders.
    remainders.sort_by(|a, b| b.1.total_cmp(&a.1));
    for (label, _) in remainders.iter().take(total.saturating_sub(assigned)) {
        *counts.get_mut(*label).expect("label present") += 1;
    }
    counts
}

pub fn compose_recipe(
    pools: &BTreeMap<String, Vec<String>>,
    fractions: &BTreeMap<String, f64>,
    total_count: usize,
    seed: u64,
) -> Result<RecipeManifest> {
    let sum: f64 = fractions.values().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(MotionError::Config(format!("fractions sum to {sum}, expected 1")));
    }
    for (label, &f) in fractions {
        if !(0.0..=1.0).contains(&f) {
            return Err(MotionError::Config(format!("fraction for `{label}` is outside [0, 1]")));
        }
        if f > 0.0 && pools.get(label).is_none_or(|p| p.is_empty()) {
            return Err(MotionError::Config(format!("pool `{label}` is empty")));
        }
    }
    let counts = largest_remainder(fractions, total_count);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut selected = Vec::with_capacity(total_count);
    let mut wrapped = Vec::new();
    for (label, &count) in &counts {
        if count == 0 {
            continue;
        }
        let pool = &pools[label];
        let mut order: Vec<usize> = (0..pool.len()).collect();
        order.shuffle(&mut rng);
        if count > pool.len() {
            wrapped.push(label.clone());
        }
        let weight = fractions[label] / count as f64;
        selected.extend((0..count).map(|i| SelectedClip {
            label: label.clone(),
            clip: pool[order[i % pool.len()]].clone(),
            weight,
        }));
    }
    Ok(RecipeManifest {
        seed,
        total_count,
        pools: pools.clone(),
        target_fraction: fractions.clone(),
        counts,
        selected,
        wrapped,
    })
}
