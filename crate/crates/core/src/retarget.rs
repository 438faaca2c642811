//! Subject-agnostic retargeting.
//!
//! A single uniform scale factor is estimated once per session from the
//! calibration frame: the ratio of the humanoid's segment-length metric to
//! the same metric measured on the subject's markers. Every later frame is
//! re-zeroed at the calibration root's planar position and multiplied by
//! that scale. Orientations and angular velocities pass through untouched.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinematics::{
    chain_height, forward_kinematics, quat_from_wxyz, quat_to_wxyz, HumanoidModel, KinematicsError,
    RigidPose, ROOT_UNIT_TOL,
};
use crate::motion::{Category, Frame, Level, MotionClip, MotionError};

/// Accepted range of calibration scale factors.
pub const SCALE_BAND: [f64; 2] = [0.3, 3.0];

/// Subject metrics below this are treated as degenerate.
pub const MIN_SUBJECT_METRIC: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum RetargetError {
    #[error("calibration frame is missing marker `{0}`")]
    MissingMarker(String),
    #[error("degenerate subject metric {0} m")]
    DegenerateSubject(f64),
    #[error("scale {0} is outside the sanity band [0.3, 3.0]")]
    ScaleOutOfRange(f64),
    #[error("calibration chain has fewer than two mapped markers")]
    ChainNotCovered,
    #[error("invalid mapping: {0}")]
    Mapping(String),
    #[error("marker dropout at t = {0} with no previous frame to hold")]
    DropoutWithoutHistory(f64),
    #[error("input error: {0}")]
    Input(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error(transparent)]
    Motion(#[from] MotionError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, RetargetError>;

/// Ordered, injective mapping from subject marker names to humanoid key bodies.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MarkerMapping {
    pairs: Vec<(String, String)>,
}

impl MarkerMapping {
    pub fn new(pairs: Vec<(String, String)>, model: &HumanoidModel) -> Result<Self> {
        let key_bodies = model.key_body_names();
        let mut seen_subject = std::collections::BTreeSet::new();
        let mut seen_target = std::collections::BTreeSet::new();
        for (subject, target) in &pairs {
            if !key_bodies.contains(target) {
                return Err(RetargetError::Mapping(format!("`{target}` is not a key body")));
            }
            if !seen_subject.insert(subject.clone()) {
                return Err(RetargetError::Mapping(format!("marker `{subject}` mapped twice")));
            }
            if !seen_target.insert(target.clone()) {
                return Err(RetargetError::Mapping(format!("key body `{target}` mapped twice")));
            }
        }
        if pairs.is_empty() {
            return Err(RetargetError::Mapping("mapping is empty".into()));
        }
        Ok(Self { pairs })
    }

    /// Maps every key body to a marker of the same name.
    pub fn identity(model: &HumanoidModel) -> Self {
        Self {
            pairs: model.key_body_names().into_iter().map(|n| (n.clone(), n)).collect(),
        }
    }

    /// Parses a two-column table (`subject humanoid` per line, whitespace or
    /// comma separated, `#` starts a comment).
    pub fn parse(text: &str, model: &HumanoidModel) -> Result<Self> {
        let mut pairs = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let cols: Vec<&str> = line
                .split(|c: char| c == ',' || c.is_whitespace())
                .filter(|s| !s.is_empty())
                .collect();
            if cols.len() != 2 {
                return Err(RetargetError::Parse(format!(
                    "mapping line {}: expected two columns",
                    lineno + 1
                )));
            }
            pairs.push((cols[0].to_string(), cols[1].to_string()));
        }
        Self::new(pairs, model)
    }

    pub fn load(path: impl AsRef<Path>, model: &HumanoidModel) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?, model)
    }

    pub fn pairs(&self) -> &[(String, String)] {
        &self.pairs
    }

    pub fn targets(&self) -> Vec<String> {
        self.pairs.iter().map(|(_, t)| t.clone()).collect()
    }

    fn subject_for(&self, target: &str) -> Option<&str> {
        self.pairs.iter().find(|(_, t)| t == target).map(|(s, _)| s.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarkerSample {
    pub pos: Vector3<f64>,
    pub quat: Option<UnitQuaternion<f64>>,
}

/// One raw capture sample; a marker missing from `markers` is a dropout.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectFrame {
    pub t: f64,
    pub root: RigidPose,
    pub root_lin_vel: Vector3<f64>,
    pub root_ang_vel: Vector3<f64>,
    pub markers: BTreeMap<String, MarkerSample>,
    pub joint_pos: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationResult {
    pub scale: f64,
    pub subject_height_metric: f64,
    pub humanoid_height_metric: f64,
    /// Session origin: the calibration root's planar position.
    pub origin: Vector3<f64>,
    pub key_body_mapping: MarkerMapping,
}

impl CalibrationResult {
    /// A pass-through session (scale 1) anchored at `origin`; the baseline
    /// for measuring uncalibrated discrepancies.
    pub fn uncalibrated(origin: Vector3<f64>, mapping: MarkerMapping) -> Self {
        Self {
            scale: 1.0,
            subject_height_metric: 1.0,
            humanoid_height_metric: 1.0,
            origin: Vector3::new(origin.x, origin.y, 0.0),
            key_body_mapping: mapping,
        }
    }
}

fn check_scale(scale: f64) -> Result<f64> {
    if !(SCALE_BAND[0]..=SCALE_BAND[1]).contains(&scale) {
        return Err(RetargetError::ScaleOutOfRange(scale));
    }
    Ok(scale)
}

/// Estimates the session scale from marker positions in the calibration frame.
///
/// The metric is the segment-length sum over the calibration-chain links that
/// have a mapped marker, taken in chain order, for both the subject and the
/// humanoid (the latter at its zero configuration).
pub fn calibrate(
    calibration: &SubjectFrame,
    humanoid: &HumanoidModel,
    mapping: &MarkerMapping,
) -> Result<CalibrationResult> {
    for (subject, _) in mapping.pairs() {
        if !calibration.markers.contains_key(subject) {
            return Err(RetargetError::MissingMarker(subject.clone()));
        }
    }
    let covered: Vec<(usize, &str)> = humanoid
        .calibration_chain()
        .iter()
        .filter_map(|&link| mapping.subject_for(humanoid.link_name(link)).map(|s| (link, s)))
        .collect();
    if covered.len() < 2 {
        return Err(RetargetError::ChainNotCovered);
    }
    let poses = forward_kinematics(humanoid, &humanoid.zero_configuration(), &RigidPose::identity())?;
    let mut humanoid_metric = 0.0;
    let mut subject_metric = 0.0;
    for w in covered.windows(2) {
        humanoid_metric += (poses[w[1].0].position - poses[w[0].0].position).norm();
        subject_metric += (calibration.markers[w[1].1].pos - calibration.markers[w[0].1].pos).norm();
    }
    if !(subject_metric.is_finite() && subject_metric > MIN_SUBJECT_METRIC) {
        return Err(RetargetError::DegenerateSubject(subject_metric));
    }
    let scale = check_scale(humanoid_metric / subject_metric)?;
    let root = calibration.root.position;
    Ok(CalibrationResult {
        scale,
        subject_height_metric: subject_metric,
        humanoid_height_metric: humanoid_metric,
        origin: Vector3::new(root.x, root.y, 0.0),
        key_body_mapping: mapping.clone(),
    })
}

/// Estimates the session scale from measured subject segment lengths along
/// the full calibration chain.
pub fn calibrate_from_lengths(
    subject_chain_lengths: &[f64],
    calibration_root: &RigidPose,
    humanoid: &HumanoidModel,
    mapping: &MarkerMapping,
) -> Result<CalibrationResult> {
    let humanoid_metric = chain_height(humanoid, &humanoid.zero_configuration())?;
    let expected = humanoid.calibration_chain().len().saturating_sub(1).max(1);
    if subject_chain_lengths.len() != expected {
        return Err(RetargetError::Input(format!(
            "expected {expected} segment lengths, got {}",
            subject_chain_lengths.len()
        )));
    }
    let subject_metric: f64 = subject_chain_lengths.iter().sum();
    if !(subject_metric.is_finite() && subject_metric > MIN_SUBJECT_METRIC) {
        return Err(RetargetError::DegenerateSubject(subject_metric));
    }
    let scale = check_scale(humanoid_metric / subject_metric)?;
    let root = calibration_root.position;
    Ok(CalibrationResult {
        scale,
        subject_height_metric: subject_metric,
        humanoid_height_metric: humanoid_metric,
        origin: Vector3::new(root.x, root.y, 0.0),
        key_body_mapping: mapping.clone(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetargetedFrame {
    pub frame: Frame,
    /// Set when a marker dropped out and the previous output was repeated.
    pub held: bool,
}

/// Rescales one raw frame into humanoid space. Body arrays follow the
/// mapping's order.
pub fn retarget_frame(
    raw: &SubjectFrame,
    cal: &CalibrationResult,
    previous: Option<&Frame>,
) -> Result<RetargetedFrame> {
    let pairs = cal.key_body_mapping.pairs();
    let samples: Option<Vec<&MarkerSample>> = pairs.iter().map(|(s, _)| raw.markers.get(s)).collect();
    let Some(samples) = samples else {
        return match previous {
            Some(prev) => {
                let mut frame = prev.clone();
                frame.t = raw.t;
                Ok(RetargetedFrame { frame, held: true })
            }
            None => Err(RetargetError::DropoutWithoutHistory(raw.t)),
        };
    };
    let rescale = |p: &Vector3<f64>| (p - cal.origin) * cal.scale;
    let body_quat = samples.iter().map(|m| m.quat).collect::<Option<Vec<_>>>();
    let frame = Frame {
        t: raw.t,
        root: RigidPose::new(rescale(&raw.root.position), raw.root.orientation),
        root_lin_vel: raw.root_lin_vel * cal.scale,
        root_ang_vel: raw.root_ang_vel,
        joint_pos: raw.joint_pos.clone(),
        joint_vel: None,
        body_pos: Some(samples.iter().map(|m| rescale(&m.pos)).collect()),
        body_quat,
    };
    Ok(RetargetedFrame { frame, held: false })
}

/// A raw capture recording.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectClip {
    pub name: String,
    pub fps: f64,
    pub category: Category,
    pub level: Level,
    pub frames: Vec<SubjectFrame>,
}

/// Retargets a whole recording; returns the humanoid clip and the number of
/// held frames.
pub fn retarget_clip(raw: &SubjectClip, cal: &CalibrationResult) -> Result<(MotionClip, usize)> {
    let mut frames: Vec<Frame> = Vec::with_capacity(raw.frames.len());
    let mut held = 0;
    for f in &raw.frames {
        let out = retarget_frame(f, cal, frames.last())?;
        held += usize::from(out.held);
        frames.push(out.frame);
    }
    let clip = MotionClip {
        name: raw.name.clone(),
        fps: raw.fps,
        category: raw.category,
        level: raw.level,
        dof_names: Vec::new(),
        key_bodies: cal.key_body_mapping.targets(),
        frames,
    };
    Ok((clip, held))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiscrepancyReport {
    pub max_keybody_deviation_m: f64,
    pub mean_deviation_m: f64,
}

/// Max and mean Euclidean key-body deviation between two clips of equal
/// length and key-body set.
pub fn discrepancy_report(retargeted: &MotionClip, reference: &MotionClip) -> Result<DiscrepancyReport> {
    if retargeted.frames.len() != reference.frames.len() {
        return Err(RetargetError::Input(format!(
            "frame counts differ: {} vs {}",
            retargeted.frames.len(),
            reference.frames.len()
        )));
    }
    if retargeted.key_bodies != reference.key_bodies {
        return Err(RetargetError::Input("key-body sets differ".into()));
    }
    let mut max: f64 = 0.0;
    let mut sum = 0.0;
    let mut count = 0usize;
    for (i, (a, b)) in retargeted.frames.iter().zip(&reference.frames).enumerate() {
        let (Some(pa), Some(pb)) = (&a.body_pos, &b.body_pos) else {
            return Err(RetargetError::Input(format!("frame {i} lacks body positions")));
        };
        if pa.len() != pb.len() {
            return Err(RetargetError::Input(format!("frame {i} body counts differ")));
        }
        for (x, y) in pa.iter().zip(pb) {
            let d = (x - y).norm();
            max = max.max(d);
            sum += d;
            count += 1;
        }
    }
    Ok(DiscrepancyReport {
        max_keybody_deviation_m: max,
        mean_deviation_m: if count == 0 { 0.0 } else { sum / count as f64 },
    })
}

/// Builds a raw subject frame from a humanoid frame by scaling every position
/// and linear velocity about the world origin by `subject_scale`. Marker names
/// come from the mapping; the humanoid frame must carry body arrays in the
/// model's key-body order.
pub fn synthesize_subject(
    frame: &Frame,
    model: &HumanoidModel,
    mapping: &MarkerMapping,
    subject_scale: f64,
) -> Result<SubjectFrame> {
    let poses = frame.key_body_poses(model)?;
    let key_names = model.key_body_names();
    let mut markers = BTreeMap::new();
    for (subject, target) in mapping.pairs() {
        let idx = key_names
            .iter()
            .position(|n| n == target)
            .ok_or_else(|| RetargetError::Mapping(format!("`{target}` is not a key body")))?;
        markers.insert(
            subject.clone(),
            MarkerSample {
                pos: poses[idx].position * subject_scale,
                quat: Some(poses[idx].orientation),
            },
        );
    }
    Ok(SubjectFrame {
        t: frame.t,
        root: RigidPose::new(frame.root.position * subject_scale, frame.root.orientation),
        root_lin_vel: frame.root_lin_vel * subject_scale,
        root_ang_vel: frame.root_ang_vel,
        markers,
        joint_pos: frame.joint_pos.clone(),
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct MarkerRecord {
    pos: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    quat: Option<[f64; 4]>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SubjectFrameRecord {
    t: f64,
    root_pos: [f64; 3],
    root_quat: [f64; 4],
    #[serde(default)]
    root_lin_vel: [f64; 3],
    #[serde(default)]
    root_ang_vel: [f64; 3],
    markers: BTreeMap<String, MarkerRecord>,
    #[serde(default)]
    joint_pos: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SubjectClipFile {
    name: String,
    fps: f64,
    #[serde(default = "other_category")]
    category: Category,
    #[serde(default = "no_level")]
    level: Level,
    frames: Vec<SubjectFrameRecord>,
}

fn other_category() -> Category {
    Category::Other
}

fn no_level() -> Level {
    Level::None
}

impl SubjectFrameRecord {
    fn into_frame(self, at: &str) -> Result<SubjectFrame> {
        let root = RigidPose::from_arrays(self.root_pos, self.root_quat)
            .map_err(|e| RetargetError::Parse(format!("{at}.root: {e}")))?;
        let mut markers = BTreeMap::new();
        for (name, m) in self.markers {
            let quat = m
                .quat
                .map(|q| quat_from_wxyz(q, ROOT_UNIT_TOL))
                .transpose()
                .map_err(|e| RetargetError::Parse(format!("{at}.markers.{name}: {e}")))?;
            markers.insert(name, MarkerSample { pos: Vector3::from(m.pos), quat });
        }
        Ok(SubjectFrame {
            t: self.t,
            root,
            root_lin_vel: Vector3::from(self.root_lin_vel),
            root_ang_vel: Vector3::from(self.root_ang_vel),
            markers,
            joint_pos: self.joint_pos,
        })
    }

    fn from_frame(f: &SubjectFrame) -> Self {
        Self {
            t: f.t,
            root_pos: f.root.position_array(),
            root_quat: f.root.quat_wxyz(),
            root_lin_vel: [f.root_lin_vel.x, f.root_lin_vel.y, f.root_lin_vel.z],
            root_ang_vel: [f.root_ang_vel.x, f.root_ang_vel.y, f.root_ang_vel.z],
            markers: f
                .markers
                .iter()
                .map(|(n, m)| {
                    (
                        n.clone(),
                        MarkerRecord {
                            pos: [m.pos.x, m.pos.y, m.pos.z],
                            quat: m.quat.as_ref().map(quat_to_wxyz),
                        },
                    )
                })
                .collect(),
            joint_pos: f.joint_pos.clone(),
        }
    }
}

impl SubjectFrame {
    pub fn from_json_str(s: &str) -> Result<Self> {
        let rec: SubjectFrameRecord = serde_json::from_str(s).map_err(|e| RetargetError::Parse(e.to_string()))?;
        rec.into_frame("frame")
    }

    pub fn to_json_string(&self) -> String {
        let mut s = serde_json::to_string_pretty(&SubjectFrameRecord::from_frame(self)).expect("frame serializes");
        s.push('\n');
        s
    }
}

impl SubjectClip {
    pub fn from_json_str(s: &str) -> Result<Self> {
        let file: SubjectClipFile = serde_json::from_str(s).map_err(|e| RetargetError::Parse(e.to_string()))?;
        if !(file.fps.is_finite() && file.fps > 0.0) {
            return Err(RetargetError::Parse("fps must be positive".into()));
        }
        let frames = file
            .frames
            .into_iter()
            .enumerate()
            .map(|(i, r)| r.into_frame(&format!("frames[{i}]")))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            name: file.name,
            fps: file.fps,
            category: file.category,
            level: file.level,
            frames,
        })
    }

    pub fn to_json_string(&self) -> String {
        let file = SubjectClipFile {
            name: self.name.clone(),
            fps: self.fps,
            category: self.category,
            level: self.level,
            frames: self.frames.iter().map(SubjectFrameRecord::from_frame).collect(),
        };
        let mut s = serde_json::to_string_pretty(&file).expect("clip serializes");
        s.push('\n');
        s
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }
}
