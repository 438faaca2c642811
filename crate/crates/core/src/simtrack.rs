//! Policy-side machinery without a learned network: observation builders,
//! reward evaluation, domain-randomization sampling, a deterministic oracle
//! tracker that stands in for the policy, and a parameter-count audit of the
//! transformer backbone.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinematics::{
    canonical, forward_kinematics, BaseFrame, HumanoidModel, KinematicsError, RigidPose,
};
use crate::motion::{Frame, MotionClip, MotionError};

pub const GRAVITY: f64 = 9.81;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("input error: {0}")]
    Input(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error(transparent)]
    Motion(#[from] MotionError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error: {0}")]
    Parse(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, SimError>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BodyState {
    pub pos: Vector3<f64>,
    pub quat: UnitQuaternion<f64>,
    pub lin_vel: Vector3<f64>,
    pub ang_vel: Vector3<f64>,
}

/// Full kinematic state of the robot. Body quantities and the root linear
/// velocity are in world frame; the root angular velocity is in base frame.
#[derive(Debug, Clone, PartialEq)]
pub struct RobotState {
    pub root: RigidPose,
    pub root_lin_vel: Vector3<f64>,
    pub root_ang_vel: Vector3<f64>,
    pub joint_pos: Vec<f64>,
    pub joint_vel: Vec<f64>,
    /// Used only by the joint-acceleration penalty.
    pub joint_acc: Vec<f64>,
    /// One entry per key body, in the model's key-body order.
    pub bodies: Vec<BodyState>,
    pub last_action: Vec<f64>,
    pub gravity_world: Vector3<f64>,
}

fn angular_velocity(q0: &UnitQuaternion<f64>, q1: &UnitQuaternion<f64>, dt: f64) -> Vector3<f64> {
    canonical(q1 * q0.inverse()).scaled_axis() / dt
}

impl RobotState {
    /// State of a robot sitting exactly on frame `idx` of `clip`. Body
    /// velocities come from central differences of neighbouring frames.
    pub fn from_clip(clip: &MotionClip, idx: usize, model: &HumanoidModel) -> Result<Self> {
        let frame = clip
            .frames
            .get(idx)
            .ok_or_else(|| SimError::Input(format!("frame {idx} out of range")))?;
        let lo = idx.saturating_sub(1);
        let hi = (idx + 1).min(clip.frames.len() - 1);
        let poses = frame.key_body_poses(model)?;
        let (before, after) = (clip.frames[lo].key_body_poses(model)?, clip.frames[hi].key_body_poses(model)?);
        let dt = clip.frames[hi].t - clip.frames[lo].t;
        let bodies = poses
            .iter()
            .enumerate()
            .map(|(k, p)| {
                let (lin_vel, ang_vel) = if hi > lo {
                    (
                        (after[k].position - before[k].position) / dt,
                        angular_velocity(&before[k].orientation, &after[k].orientation, dt),
                    )
                } else {
                    (Vector3::zeros(), Vector3::zeros())
                };
                BodyState { pos: p.position, quat: p.orientation, lin_vel, ang_vel }
            })
            .collect();
        let n = frame.joint_pos.len();
        Ok(Self {
            root: frame.root,
            root_lin_vel: frame.root_lin_vel,
            root_ang_vel: frame.root.orientation.inverse() * frame.root_ang_vel,
            joint_pos: frame.joint_pos.clone(),
            joint_vel: frame.joint_vel.clone().unwrap_or_else(|| vec![0.0; n]),
            joint_acc: vec![0.0; n],
            bodies,
            last_action: frame.joint_pos.clone(),
            gravity_world: Vector3::new(0.0, 0.0, -GRAVITY),
        })
    }

    fn check(&self, model: &HumanoidModel) -> Result<()> {
        let n = model.dof();
        let k = model.key_bodies().len();
        for (name, len) in [
            ("joint_pos", self.joint_pos.len()),
            ("joint_vel", self.joint_vel.len()),
            ("last_action", self.last_action.len()),
        ] {
            if len != n {
                return Err(SimError::Input(format!("{name} has {len} entries, model has {n} joints")));
            }
        }
        if self.bodies.len() != k {
            return Err(SimError::Input(format!("state has {} bodies, model has {k}", self.bodies.len())));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutEntry {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ObsLayout {
    pub entries: Vec<LayoutEntry>,
}

impl ObsLayout {
    fn push(&mut self, name: impl Into<String>, len: usize) {
        let offset = self.total_len();
        self.entries.push(LayoutEntry { name: name.into(), offset, len });
    }

    pub fn total_len(&self) -> usize {
        self.entries.last().map(|e| e.offset + e.len).unwrap_or(0)
    }

    pub fn entry(&self, name: &str) -> Option<&LayoutEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("name,offset,length\n");
        for e in &self.entries {
            s.push_str(&format!("{},{},{}\n", e.name, e.offset, e.len));
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObservationVector {
    pub values: Vec<f64>,
    pub layout: ObsLayout,
}

impl ObservationVector {
    pub fn slice(&self, name: &str) -> Option<&[f64]> {
        self.layout.entry(name).map(|e| &self.values[e.offset..e.offset + e.len])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObsOptions {
    /// Whether the teacher's reference joint block carries velocities too.
    pub include_ref_joint_vel: bool,
}

impl Default for ObsOptions {
    fn default() -> Self {
        Self { include_ref_joint_vel: true }
    }
}

pub fn teacher_layout(n: usize, k: usize, opts: &ObsOptions) -> ObsLayout {
    let mut l = ObsLayout::default();
    l.push("joint_pos", n);
    l.push("joint_vel", n);
    l.push("body_pos", 3 * k);
    l.push("body_quat", 4 * k);
    l.push("body_lin_vel", 3 * k);
    l.push("body_ang_vel", 3 * k);
    l.push("gravity", 3);
    l.push("root_ang_vel", 3);
    l.push("last_action", n);
    l.push("ref_joint_pos", n);
    if opts.include_ref_joint_vel {
        l.push("ref_joint_vel", n);
    }
    l.push("ref_body_pos", 3 * k);
    l.push("ref_body_quat", 4 * k);
    l.push("ref_root_lin_vel", 3);
    l
}

pub fn student_layout(n: usize, k: usize, window: usize) -> ObsLayout {
    let mut l = ObsLayout::default();
    l.push("joint_pos", n);
    l.push("gravity", 3);
    l.push("root_ang_vel", 3);
    l.push("last_action", n);
    for i in 0..window {
        l.push(format!("ref[{i}].body_pos"), 3 * k);
        l.push(format!("ref[{i}].body_quat"), 4 * k);
        l.push(format!("ref[{i}].root_lin_vel"), 3);
    }
    l
}

fn push3(out: &mut Vec<f64>, v: &Vector3<f64>) {
    out.extend_from_slice(v.as_slice());
}

fn push_quat(out: &mut Vec<f64>, q: &UnitQuaternion<f64>) {
    let q = canonical(*q);
    out.extend_from_slice(&[q.w, q.i, q.j, q.k]);
}

fn push_reference(out: &mut Vec<f64>, base: &BaseFrame, frame: &Frame, model: &HumanoidModel) -> Result<()> {
    let poses = frame.key_body_poses(model)?;
    for p in &poses {
        push3(out, &base.point(&p.position));
    }
    for p in &poses {
        push_quat(out, &base.orientation(&p.orientation));
    }
    push3(out, &base.vector(&frame.root_lin_vel));
    Ok(())
}

fn check_frame(frame: &Frame, model: &HumanoidModel, what: &str) -> Result<()> {
    if frame.joint_pos.len() != model.dof() {
        return Err(SimError::Input(format!(
            "{what} has {} joints, model has {}",
            frame.joint_pos.len(),
            model.dof()
        )));
    }
    Ok(())
}

/// Privileged observation: full robot kinematics plus one reference frame,
/// all expressed in the robot's base frame.
pub fn build_teacher_obs(
    state: &RobotState,
    reference: &Frame,
    model: &HumanoidModel,
    opts: &ObsOptions,
) -> Result<ObservationVector> {
    state.check(model)?;
    check_frame(reference, model, "reference")?;
    let base = BaseFrame::new(&state.root)?;
    let layout = teacher_layout(model.dof(), model.key_bodies().len(), opts);
    let mut v = Vec::with_capacity(layout.total_len());
    v.extend_from_slice(&state.joint_pos);
    v.extend_from_slice(&state.joint_vel);
    for b in &state.bodies {
        push3(&mut v, &base.point(&b.pos));
    }
    for b in &state.bodies {
        push_quat(&mut v, &base.orientation(&b.quat));
    }
    for b in &state.bodies {
        push3(&mut v, &base.vector(&b.lin_vel));
    }
    for b in &state.bodies {
        push3(&mut v, &base.vector(&b.ang_vel));
    }
    push3(&mut v, &base.vector(&state.gravity_world));
    push3(&mut v, &state.root_ang_vel);
    v.extend_from_slice(&state.last_action);
    v.extend_from_slice(&reference.joint_pos);
    if opts.include_ref_joint_vel {
        let vel = reference
            .joint_vel
            .as_ref()
            .ok_or_else(|| SimError::Input("reference frame lacks joint velocities".into()))?;
        if vel.len() != model.dof() {
            return Err(SimError::Input("reference joint_vel length mismatch".into()));
        }
        v.extend_from_slice(vel);
    }
    push_reference(&mut v, &base, reference, model)?;
    debug_assert_eq!(v.len(), layout.total_len());
    Ok(ObservationVector { values: v, layout })
}

/// Deployable observation: proprioception plus `window.len()` future
/// reference frames of key-body poses and root linear velocity.
pub fn build_student_obs(
    state: &RobotState,
    window: &[Frame],
    f: usize,
    model: &HumanoidModel,
) -> Result<ObservationVector> {
    state.check(model)?;
    if window.len() != f {
        return Err(SimError::Input(format!("reference window has {} frames, expected {f}", window.len())));
    }
    if f == 0 {
        return Err(SimError::Input("window length must be at least 1".into()));
    }
    let base = BaseFrame::new(&state.root)?;
    let layout = student_layout(model.dof(), model.key_bodies().len(), f);
    let mut v = Vec::with_capacity(layout.total_len());
    v.extend_from_slice(&state.joint_pos);
    push3(&mut v, &base.vector(&state.gravity_world));
    push3(&mut v, &state.root_ang_vel);
    v.extend_from_slice(&state.last_action);
    for frame in window {
        check_frame(frame, model, "reference")?;
        push_reference(&mut v, &base, frame, model)?;
    }
    debug_assert_eq!(v.len(), layout.total_len());
    Ok(ObservationVector { values: v, layout })
}

/// Reward components. Tracking terms are exponential kernels, the rest are
/// penalties.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Term {
    ActionRate,
    ContactAirTime,
    JointAcc,
    JointPosLimits,
    VelActionLimits,
    TorsoGlobalPos,
    TorsoGlobalRot,
    BodyGlobalLinVel,
    BodyGlobalAngVel,
    BodyRelPos,
    BodyRelRot,
    EeRelPos,
    EeRelRot,
    EeLinVel,
    EeAngVel,
}

impl Term {
    pub const ALL: [Term; 15] = [
        Term::ActionRate,
        Term::ContactAirTime,
        Term::JointAcc,
        Term::JointPosLimits,
        Term::VelActionLimits,
        Term::TorsoGlobalPos,
        Term::TorsoGlobalRot,
        Term::BodyGlobalLinVel,
        Term::BodyGlobalAngVel,
        Term::BodyRelPos,
        Term::BodyRelRot,
        Term::EeRelPos,
        Term::EeRelRot,
        Term::EeLinVel,
        Term::EeAngVel,
    ];

    pub fn is_tracking(self) -> bool {
        !matches!(
            self,
            Term::ActionRate | Term::ContactAirTime | Term::JointAcc | Term::JointPosLimits | Term::VelActionLimits
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Term::ActionRate => "action_rate",
            Term::ContactAirTime => "contact_air_time",
            Term::JointAcc => "joint_acc",
            Term::JointPosLimits => "joint_pos_limits",
            Term::VelActionLimits => "vel_action_limits",
            Term::TorsoGlobalPos => "torso_global_pos",
            Term::TorsoGlobalRot => "torso_global_rot",
            Term::BodyGlobalLinVel => "body_global_lin_vel",
            Term::BodyGlobalAngVel => "body_global_ang_vel",
            Term::BodyRelPos => "body_rel_pos",
            Term::BodyRelRot => "body_rel_rot",
            Term::EeRelPos => "ee_rel_pos",
            Term::EeRelRot => "ee_rel_rot",
            Term::EeLinVel => "ee_lin_vel",
            Term::EeAngVel => "ee_ang_vel",
        }
    }

    /// The grouped table row a term belongs to: (category, label).
    pub fn table_row(self) -> (&'static str, &'static str) {
        match self {
            Term::ActionRate => ("Regularization", "Action Rate Penalty"),
            Term::ContactAirTime => ("Regularization", "Contact Air Time Penalty"),
            Term::JointAcc => ("Regularization", "Joint Acceleration Penalty"),
            Term::JointPosLimits => ("Regularization", "Joint Position Limits"),
            Term::VelActionLimits => ("Regularization", "Velocity/Action Limits"),
            Term::TorsoGlobalPos | Term::TorsoGlobalRot => ("Tracking", "Torso Global Pos. / Rot."),
            Term::BodyGlobalLinVel | Term::BodyGlobalAngVel => ("Tracking", "Full-Body Global Lin. / Ang. Vel."),
            Term::BodyRelPos | Term::BodyRelRot => ("Tracking", "Full-Body Relative Pos. / Rot."),
            Term::EeRelPos | Term::EeRelRot | Term::EeLinVel | Term::EeAngVel => {
                ("Tracking", "End-effector Relative Pos. / Rot. / Lin. / Ang. Vel.")
            }
        }
    }

    fn default_weight(self) -> f64 {
        match self {
            Term::ActionRate => -8.0,
            Term::ContactAirTime => -100.0,
            Term::JointAcc => -1.0e-7,
            Term::JointPosLimits => -10.0,
            Term::VelActionLimits => -1.0,
            Term::TorsoGlobalPos | Term::TorsoGlobalRot => 0.5,
            Term::BodyGlobalLinVel | Term::BodyGlobalAngVel => 1.0,
            Term::BodyRelPos | Term::BodyRelRot => 1.0,
            Term::EeRelPos | Term::EeRelRot | Term::EeLinVel | Term::EeAngVel => 0.5,
        }
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConfig {
    /// Every grouped table weight applies to each of its sub-terms.
    pub weights: BTreeMap<Term, f64>,
    /// Kernel sharpness per tracking term.
    pub sigmas: BTreeMap<Term, f64>,
    pub torso_body: String,
    pub end_effector_suffixes: Vec<String>,
    pub foot_suffix: String,
    /// Foot height below which a foot counts as in contact.
    pub contact_height_m: f64,
    pub joint_vel_limit_rad_s: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            weights: Term::ALL.iter().map(|&t| (t, t.default_weight())).collect(),
            sigmas: Term::ALL.iter().filter(|t| t.is_tracking()).map(|&t| (t, 1.0)).collect(),
            torso_body: "torso_link".into(),
            end_effector_suffixes: vec!["wrist_yaw_link".into(), "ankle_roll_link".into()],
            foot_suffix: "ankle_roll_link".into(),
            contact_height_m: 0.1,
            joint_vel_limit_rad_s: 30.0,
        }
    }
}

impl RewardConfig {
    pub fn weight(&self, t: Term) -> f64 {
        self.weights.get(&t).copied().unwrap_or(0.0)
    }

    pub fn sigma(&self, t: Term) -> f64 {
        self.sigmas.get(&t).copied().unwrap_or(1.0)
    }

    /// The grouped (category, label, weight) rows implied by the weights;
    /// errors if sub-terms of one row disagree.
    pub fn table_rows(&self) -> Result<Vec<(String, String, f64)>> {
        let mut rows: Vec<(String, String, f64)> = Vec::new();
        for t in Term::ALL {
            let (cat, label) = t.table_row();
            let w = self.weight(t);
            match rows.iter().find(|r| r.1 == label) {
                Some(r) if r.2 != w => {
                    return Err(SimError::Config(format!("sub-terms of `{label}` have different weights")))
                }
                Some(_) => {}
                None => rows.push((cat.into(), label.into(), w)),
            }
        }
        Ok(rows)
    }

    /// Sum of tracking weights, the total reward at zero error.
    pub fn tracking_weight_sum(&self) -> f64 {
        Term::ALL.iter().filter(|t| t.is_tracking()).map(|&t| self.weight(t)).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
struct RewardBodies {
    torso: usize,
    end_effectors: Vec<usize>,
    feet: Vec<usize>,
}

fn resolve_bodies(model: &HumanoidModel, cfg: &RewardConfig) -> Result<RewardBodies> {
    let names = model.key_body_names();
    let torso = names
        .iter()
        .position(|n| *n == cfg.torso_body)
        .ok_or_else(|| SimError::Config(format!("torso body `{}` is not a key body", cfg.torso_body)))?;
    let mut end_effectors = Vec::new();
    for suffix in &cfg.end_effector_suffixes {
        let hits: Vec<usize> = names.iter().enumerate().filter(|(_, n)| n.ends_with(suffix.as_str())).map(|(i, _)| i).collect();
        if hits.is_empty() {
            return Err(SimError::Config(format!("no key body matches end effector `{suffix}`")));
        }
        end_effectors.extend(hits);
    }
    let feet: Vec<usize> = names.iter().enumerate().filter(|(_, n)| n.ends_with(cfg.foot_suffix.as_str())).map(|(i, _)| i).collect();
    if feet.is_empty() {
        return Err(SimError::Config(format!("no key body matches foot `{}`", cfg.foot_suffix)));
    }
    Ok(RewardBodies { torso, end_effectors, feet })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardOutput {
    pub total: f64,
    /// Weighted contribution of every term.
    pub terms: BTreeMap<Term, f64>,
    /// Raw error or penalty magnitude before weighting.
    pub raw: BTreeMap<Term, f64>,
}

fn mean_sq<I: Iterator<Item = f64>>(it: I) -> f64 {
    let (sum, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v * v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn overshoot(v: f64, lo: f64, hi: f64) -> f64 {
    (lo - v).max(0.0) + (v - hi).max(0.0)
}

/// Weighted reward terms for one control step. Tracking errors are mean
/// squared errors over the relevant bodies.
pub fn reward(
    state: &RobotState,
    reference: &RobotState,
    action: &[f64],
    prev_action: &[f64],
    model: &HumanoidModel,
    cfg: &RewardConfig,
) -> Result<RewardOutput> {
    state.check(model)?;
    reference.check(model)?;
    let n = model.dof();
    if action.len() != n || prev_action.len() != n {
        return Err(SimError::Input("action length does not match the model".into()));
    }
    let bodies = resolve_bodies(model, cfg)?;
    let all: Vec<usize> = (0..state.bodies.len()).collect();

    let rel_pos = |s: &RobotState, k: usize| s.root.orientation.inverse() * (s.bodies[k].pos - s.root.position);
    let rel_rot = |s: &RobotState, k: usize| s.root.orientation.inverse() * s.bodies[k].quat;
    let pos_err = |set: &[usize]| mean_sq(set.iter().map(|&k| (rel_pos(state, k) - rel_pos(reference, k)).norm()));
    let rot_err = |set: &[usize]| mean_sq(set.iter().map(|&k| rel_rot(state, k).angle_to(&rel_rot(reference, k))));
    let lin_err =
        |set: &[usize]| mean_sq(set.iter().map(|&k| (state.bodies[k].lin_vel - reference.bodies[k].lin_vel).norm()));
    let ang_err =
        |set: &[usize]| mean_sq(set.iter().map(|&k| (state.bodies[k].ang_vel - reference.bodies[k].ang_vel).norm()));

    let t = bodies.torso;
    let mut raw = BTreeMap::new();
    raw.insert(Term::TorsoGlobalPos, (state.bodies[t].pos - reference.bodies[t].pos).norm_squared());
    raw.insert(Term::TorsoGlobalRot, state.bodies[t].quat.angle_to(&reference.bodies[t].quat).powi(2));
    raw.insert(Term::BodyGlobalLinVel, lin_err(&all));
    raw.insert(Term::BodyGlobalAngVel, ang_err(&all));
    raw.insert(Term::BodyRelPos, pos_err(&all));
    raw.insert(Term::BodyRelRot, rot_err(&all));
    raw.insert(Term::EeRelPos, pos_err(&bodies.end_effectors));
    raw.insert(Term::EeRelRot, rot_err(&bodies.end_effectors));
    raw.insert(Term::EeLinVel, lin_err(&bodies.end_effectors));
    raw.insert(Term::EeAngVel, ang_err(&bodies.end_effectors));

    raw.insert(Term::ActionRate, action.iter().zip(prev_action).map(|(a, b)| (a - b).powi(2)).sum());
    raw.insert(Term::JointAcc, state.joint_acc.iter().map(|a| a * a).sum());
    let limits = model.joint_limits();
    raw.insert(
        Term::JointPosLimits,
        state.joint_pos.iter().zip(&limits).map(|(&q, l)| overshoot(q, l[0], l[1])).sum(),
    );
    let vmax = cfg.joint_vel_limit_rad_s;
    let vel_over: f64 = state.joint_vel.iter().map(|&v| overshoot(v, -vmax, vmax)).sum();
    let act_over: f64 = action.iter().zip(&limits).map(|(&a, l)| overshoot(a, l[0], l[1])).sum();
    raw.insert(Term::VelActionLimits, vel_over + act_over);
    let h = cfg.contact_height_m;
    let disagreements = bodies
        .feet
        .iter()
        .filter(|&&k| (state.bodies[k].pos.z < h) != (reference.bodies[k].pos.z < h))
        .count();
    raw.insert(Term::ContactAirTime, disagreements as f64);

    let mut terms = BTreeMap::new();
    let mut total = 0.0;
    for term in Term::ALL {
        let e = raw[&term];
        let value = if term.is_tracking() {
            cfg.weight(term) * (-cfg.sigma(term) * e).exp()
        } else {
            cfg.weight(term) * e
        };
        total += value;
        terms.insert(term, value);
    }
    Ok(RewardOutput { total, terms, raw })
}

/// Closed sampling range `[lo, hi]`.
pub type Range = [f64; 2];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DrRanges {
    pub action_delay_s: Range,
    pub action_noise_rad: Range,
    pub link_mass_scale: Range,
    pub link_mass_links: Vec<String>,
    pub torso_com_offset_x_m: Range,
    pub torso_com_offset_yz_m: Range,
    pub torque_rfi_fraction: f64,
    pub static_friction: Range,
    pub dynamic_friction: Range,
    pub friction_joints: Vec<String>,
    pub stiffness_scale: Range,
    pub damping_scale: Range,
    pub armature_scale: Range,
}

impl Default for DrRanges {
    fn default() -> Self {
        Self {
            action_delay_s: [0.0, 0.02],
            action_noise_rad: [0.0, 0.02],
            link_mass_scale: [0.9, 1.1],
            link_mass_links: vec!["torso".into(), "shoulder yaw".into()],
            torso_com_offset_x_m: [-0.075, 0.075],
            torso_com_offset_yz_m: [-0.1, 0.1],
            torque_rfi_fraction: 0.02,
            static_friction: [0.3, 2.0],
            dynamic_friction: [0.3, 2.0],
            friction_joints: vec![
                "ankle roll".into(),
                "pelvis".into(),
                "hip roll".into(),
                "knee".into(),
                "elbow".into(),
            ],
            stiffness_scale: [0.95, 1.05],
            damping_scale: [0.95, 1.05],
            armature_scale: [0.995, 1.015],
        }
    }
}

impl DrRanges {
    pub fn validate(&self) -> Result<()> {
        for (name, r) in [
            ("action_delay_s", self.action_delay_s),
            ("action_noise_rad", self.action_noise_rad),
            ("link_mass_scale", self.link_mass_scale),
            ("torso_com_offset_x_m", self.torso_com_offset_x_m),
            ("torso_com_offset_yz_m", self.torso_com_offset_yz_m),
            ("static_friction", self.static_friction),
            ("dynamic_friction", self.dynamic_friction),
            ("stiffness_scale", self.stiffness_scale),
            ("damping_scale", self.damping_scale),
            ("armature_scale", self.armature_scale),
        ] {
            if !(r[0].is_finite() && r[1].is_finite() && r[0] <= r[1]) {
                return Err(SimError::Config(format!("range {name} = {r:?} is invalid")));
            }
        }
        if !(self.torque_rfi_fraction.is_finite() && self.torque_rfi_fraction >= 0.0) {
            return Err(SimError::Config("torque_rfi_fraction must be non-negative".into()));
        }
        Ok(())
    }
}

/// One domain-randomization draw. Only the action delay and noise are
/// consumed (by the PD tracker); the remaining fields are sampled and
/// serialized but never simulated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrConfig {
    pub action_delay_s: f64,
    pub action_noise_rad: f64,
    pub link_mass_scale: Vec<(String, f64)>,
    pub torso_com_offset_m: [f64; 3],
    pub torque_rfi_fraction: f64,
    pub static_friction: Vec<(String, f64)>,
    pub dynamic_friction: Vec<(String, f64)>,
    pub stiffness_scale: f64,
    pub damping_scale: f64,
    pub armature_scale: f64,
}

fn draw(rng: &mut ChaCha8Rng, r: Range) -> f64 {
    let u: f64 = rng.random();
    r[0] + u * (r[1] - r[0])
}

/// Samples every range uniformly, in table order, one draw per scalar.
pub fn sample_dr(ranges: &DrRanges, seed: u64) -> DrConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_dr_with(ranges, &mut rng)
}

pub fn sample_dr_with(ranges: &DrRanges, rng: &mut ChaCha8Rng) -> DrConfig {
    let action_delay_s = draw(rng, ranges.action_delay_s);
    let action_noise_rad = draw(rng, ranges.action_noise_rad);
    let link_mass_scale = ranges.link_mass_links.iter().map(|l| (l.clone(), draw(rng, ranges.link_mass_scale))).collect();
    let torso_com_offset_m = [
        draw(rng, ranges.torso_com_offset_x_m),
        draw(rng, ranges.torso_com_offset_yz_m),
        draw(rng, ranges.torso_com_offset_yz_m),
    ];
    let static_friction = ranges.friction_joints.iter().map(|j| (j.clone(), draw(rng, ranges.static_friction))).collect();
    let dynamic_friction = ranges.friction_joints.iter().map(|j| (j.clone(), draw(rng, ranges.dynamic_friction))).collect();
    DrConfig {
        action_delay_s,
        action_noise_rad,
        link_mass_scale,
        torso_com_offset_m,
        torque_rfi_fraction: ranges.torque_rfi_fraction,
        static_friction,
        dynamic_friction,
        stiffness_scale: draw(rng, ranges.stiffness_scale),
        damping_scale: draw(rng, ranges.damping_scale),
        armature_scale: draw(rng, ranges.armature_scale),
    }
}

impl DrConfig {
    /// True when every field lies inside its closed range.
    pub fn within(&self, r: &DrRanges) -> bool {
        let inside = |v: f64, r: Range| r[0] <= v && v <= r[1];
        inside(self.action_delay_s, r.action_delay_s)
            && inside(self.action_noise_rad, r.action_noise_rad)
            && self.link_mass_scale.iter().all(|(_, v)| inside(*v, r.link_mass_scale))
            && inside(self.torso_com_offset_m[0], r.torso_com_offset_x_m)
            && self.torso_com_offset_m[1..].iter().all(|&v| inside(v, r.torso_com_offset_yz_m))
            && self.static_friction.iter().all(|(_, v)| inside(*v, r.static_friction))
            && self.dynamic_friction.iter().all(|(_, v)| inside(*v, r.dynamic_friction))
            && inside(self.stiffness_scale, r.stiffness_scale)
            && inside(self.damping_scale, r.damping_scale)
            && inside(self.armature_scale, r.armature_scale)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrackerMode {
    Perfect,
    /// Replays the reference `k` frames late.
    Lag(usize),
    /// Perfect replay plus seeded zero-mean Gaussian joint noise (rad).
    Noise(f64),
    /// Per-joint double integrator driven by a PD law.
    Pd { kp: f64, kd: f64, dt: f64 },
    /// Holds the first reference frame forever.
    Frozen,
}

impl FromStr for TrackerMode {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |m: &str| SimError::Config(format!("invalid tracker `{s}`: {m}"));
        let (head, arg) = match s.split_once(':') {
            Some((h, a)) => (h, Some(a)),
            None => (s, None),
        };
        let mode = match (head, arg) {
            ("perfect" | "oracle", None) => TrackerMode::Perfect,
            ("frozen", None) => TrackerMode::Frozen,
            ("lag", Some(k)) => TrackerMode::Lag(k.parse().map_err(|_| bad("lag needs a frame count"))?),
            ("noise", Some(sigma)) => {
                let sigma: f64 = sigma.parse().map_err(|_| bad("noise needs a standard deviation"))?;
                if !(sigma.is_finite() && sigma >= 0.0) {
                    return Err(bad("noise must be finite and non-negative"));
                }
                TrackerMode::Noise(sigma)
            }
            ("pd", Some(args)) => {
                let v: Vec<f64> = args
                    .split(',')
                    .map(|x| x.trim().parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| bad("pd needs kp,kd,dt"))?;
                let [kp, kd, dt] = v[..] else { return Err(bad("pd needs kp,kd,dt")) };
                TrackerMode::Pd { kp, kd, dt }
            }
            _ => return Err(bad("expected perfect, lag:k, noise:sigma, pd:kp,kd,dt or frozen")),
        };
        mode.validate()?;
        Ok(mode)
    }
}

impl fmt::Display for TrackerMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrackerMode::Perfect => write!(f, "perfect"),
            TrackerMode::Lag(k) => write!(f, "lag:{k}"),
            TrackerMode::Noise(s) => write!(f, "noise:{s}"),
            TrackerMode::Pd { kp, kd, dt } => write!(f, "pd:{kp},{kd},{dt}"),
            TrackerMode::Frozen => write!(f, "frozen"),
        }
    }
}

impl TrackerMode {
    pub fn validate(&self) -> Result<()> {
        match *self {
            TrackerMode::Pd { kp, kd, dt } => {
                if !(kp.is_finite() && kp > 0.0) {
                    return Err(SimError::Config(format!("pd gain kp must be positive, got {kp}")));
                }
                if !(kd.is_finite() && kd >= 0.0) {
                    return Err(SimError::Config(format!("pd gain kd must be non-negative, got {kd}")));
                }
                if !(dt.is_finite() && dt > 0.0) {
                    return Err(SimError::Config(format!("pd step dt must be positive, got {dt}")));
                }
                Ok(())
            }
            TrackerMode::Noise(s) if !(s.is_finite() && s >= 0.0) => {
                Err(SimError::Config(format!("noise sigma must be non-negative, got {s}")))
            }
            _ => Ok(()),
        }
    }
}

/// Deterministic stand-in for a learned tracking policy.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleTracker {
    pub mode: TrackerMode,
    pub seed: u64,
    /// Action delay and noise for the PD mode.
    pub dr: Option<DrConfig>,
}

fn with_bodies(mut frame: Frame, model: &HumanoidModel, use_stored: bool) -> Result<Frame> {
    let poses = if use_stored {
        frame.key_body_poses(model)?
    } else {
        model.key_body_poses(&forward_kinematics(model, &frame.joint_pos, &frame.root)?)
    };
    frame.body_pos = Some(poses.iter().map(|p| p.position).collect());
    frame.body_quat = Some(poses.iter().map(|p| p.orientation).collect());
    Ok(frame)
}

impl OracleTracker {
    pub fn new(mode: TrackerMode, seed: u64) -> Result<Self> {
        mode.validate()?;
        Ok(Self { mode, seed, dr: None })
    }

    /// Tracked frame per reference tick, each with key-body arrays filled.
    pub fn track(&self, clip: &MotionClip, model: &HumanoidModel) -> Result<Vec<Frame>> {
        if clip.frames.is_empty() {
            return Err(SimError::Input("empty clip".into()));
        }
        let n = clip.frames.len();
        match self.mode {
            TrackerMode::Perfect => clip.frames.iter().map(|f| with_bodies(f.clone(), model, true)).collect(),
            TrackerMode::Frozen => {
                let first = with_bodies(clip.frames[0].clone(), model, true)?;
                Ok(clip.frames.iter().map(|f| Frame { t: f.t, ..first.clone() }).collect())
            }
            TrackerMode::Lag(k) => (0..n)
                .map(|t| {
                    let src = &clip.frames[t.saturating_sub(k)];
                    with_bodies(Frame { t: clip.frames[t].t, ..src.clone() }, model, true)
                })
                .collect(),
            TrackerMode::Noise(sigma) => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                let normal = Normal::new(0.0, sigma).map_err(|e| SimError::Config(e.to_string()))?;
                clip.frames
                    .iter()
                    .map(|f| {
                        let mut g = f.clone();
                        for q in &mut g.joint_pos {
                            *q += normal.sample(&mut rng);
                        }
                        with_bodies(g, model, false)
                    })
                    .collect()
            }
            TrackerMode::Pd { kp, kd, dt } => self.track_pd(clip, model, kp, kd, dt),
        }
    }

    fn track_pd(&self, clip: &MotionClip, model: &HumanoidModel, kp: f64, kd: f64, dt: f64) -> Result<Vec<Frame>> {
        let substeps = ((1.0 / clip.fps) / dt).round().max(1.0) as usize;
        let (delay_steps, noise) = match &self.dr {
            Some(dr) => ((dr.action_delay_s / dt).round() as usize, dr.action_noise_rad),
            None => (0, 0.0),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let normal = Normal::new(0.0, noise).map_err(|e| SimError::Config(e.to_string()))?;
        let mut q = clip.frames[0].joint_pos.clone();
        let mut qd = vec![0.0; q.len()];
        let mut pending: std::collections::VecDeque<Vec<f64>> = std::collections::VecDeque::new();
        let mut out = Vec::with_capacity(clip.frames.len());
        for f in &clip.frames {
            for _ in 0..substeps {
                let mut target = f.joint_pos.clone();
                if noise > 0.0 {
                    for v in &mut target {
                        *v += normal.sample(&mut rng);
                    }
                }
                pending.push_back(target);
                let applied = if pending.len() > delay_steps {
                    pending.pop_front().expect("non-empty")
                } else {
                    pending.front().cloned().expect("non-empty")
                };
                pd_step(&mut q, &mut qd, &applied, kp, kd, dt);
            }
            let mut g = Frame::new(f.t, f.root, q.clone());
            g.root_lin_vel = f.root_lin_vel;
            g.root_ang_vel = f.root_ang_vel;
            g.joint_vel = Some(qd.clone());
            out.push(with_bodies(g, model, false)?);
        }
        Ok(out)
    }
}

/// One semi-implicit Euler step of `q'' = kp (target - q) - kd q'`.
pub fn pd_step(q: &mut [f64], qd: &mut [f64], target: &[f64], kp: f64, kd: f64, dt: f64) {
    for ((q, v), r) in q.iter_mut().zip(qd.iter_mut()).zip(target) {
        *v += dt * (kp * (r - *q) - kd * *v);
        *q += dt * *v;
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub d_model: usize,
    pub d_ff: usize,
    pub n_heads: usize,
    pub n_tokens: usize,
    pub n_layers: usize,
    /// Hidden widths of the output MLP; the final layer maps to the action.
    #[serde(default)]
    pub head_hidden: Vec<usize>,
}

impl ArchSpec {
    pub fn teacher(n_layers: usize) -> Self {
        Self { d_model: 256, d_ff: 512, n_heads: 4, n_tokens: 4, n_layers, head_hidden: Vec::new() }
    }

    pub fn student(n_layers: usize) -> Self {
        Self { d_model: 512, d_ff: 1024, n_heads: 4, n_tokens: 2, n_layers, head_hidden: Vec::new() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_ff == 0 || self.n_heads == 0 || self.n_tokens == 0 || self.n_layers == 0 {
            return Err(SimError::Config("architecture sizes must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(SimError::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    /// Attention projections with bias, feed-forward, and two normalizations.
    pub fn params_per_layer(&self) -> usize {
        let (d, ff) = (self.d_model, self.d_ff);
        4 * d * d + 4 * d + 2 * d * ff + d + ff + 4 * d
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchShape {
    /// Contiguous `(offset, len)` slice of the observation per token.
    pub tokens: Vec<(usize, usize)>,
    pub head_dim: usize,
    pub params_per_layer: usize,
    pub input_projection_params: usize,
    pub head_params: usize,
    pub total_params: usize,
}

/// Shape and parameter audit of the transformer backbone; nothing is run.
pub fn arch_shape(spec: &ArchSpec, obs_len: usize, action_len: usize) -> Result<ArchShape> {
    spec.validate()?;
    if obs_len < spec.n_tokens {
        return Err(SimError::Config(format!(
            "observation length {obs_len} is shorter than {} tokens",
            spec.n_tokens
        )));
    }
    let base = obs_len / spec.n_tokens;
    let extra = obs_len % spec.n_tokens;
    let mut tokens = Vec::with_capacity(spec.n_tokens);
    let mut offset = 0;
    for i in 0..spec.n_tokens {
        let len = base + usize::from(i < extra);
        tokens.push((offset, len));
        offset += len;
    }
    let d = spec.d_model;
    let input_projection_params = tokens.iter().map(|(_, len)| len * d).sum::<usize>() + spec.n_tokens * d;
    let mut widths = vec![d];
    widths.extend(&spec.head_hidden);
    widths.push(action_len);
    let head_params = widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
    let params_per_layer = spec.params_per_layer();
    Ok(ArchShape {
        tokens,
        head_dim: d / spec.n_heads,
        params_per_layer,
        input_projection_params,
        head_params,
        total_params: params_per_layer * spec.n_layers + input_projection_params + head_params,
    })
}

/// Policy-side configuration file. Defaults reproduce the reward and
/// domain-randomization tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub reward: RewardConfig,
    pub domain_randomization: DrRanges,
    pub observation: ObsOptions,
    pub teacher: ArchSpec,
    pub student: ArchSpec,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            reward: RewardConfig::default(),
            domain_randomization: DrRanges::default(),
            observation: ObsOptions::default(),
            teacher: ArchSpec::teacher(4),
            student: ArchSpec::student(4),
        }
    }
}

impl SimConfig {
    pub fn from_json_str(s: &str) -> Result<Self> {
        let cfg: SimConfig = serde_json::from_str(s)?;
        cfg.domain_randomization.validate()?;
        cfg.teacher.validate()?;
        cfg.student.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_json_string(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }
}
