//! Humanoid morphology, rigid poses, and forward kinematics.
//!
//! Conventions: right-handed, Z-up world; quaternions are stored and
//! serialized as `(w, x, y, z)` and kept in the `w >= 0` hemisphere.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::{Quaternion, Unit, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance used when validating unit axes and offset quaternions in a model.
pub const MODEL_UNIT_TOL: f64 = 1e-9;

/// Tolerance used when validating a root quaternion supplied from outside.
pub const ROOT_UNIT_TOL: f64 = 1e-6;

const REFERENCE_MODEL_JSON: &str = include_str!("../assets/g1_29dof.json");

#[derive(Debug, Error)]
pub enum KinematicsError {
    #[error("expected {expected} joint values, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("quaternion norm {0} is not unit")]
    NonUnitQuaternion(f64),
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("unknown link `{0}`")]
    UnknownLink(String),
    #[error("calibration chain is empty")]
    EmptyCalibrationChain,
    #[error("calibration chain has zero length")]
    DegenerateCalibrationChain,
    #[error("failed to read model: {0}")]
    Io(#[from] std::io::Error),
    #[error("failed to parse model: {0}")]
    Parse(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, KinematicsError>;

/// Flips a quaternion into the `w >= 0` hemisphere.
pub fn canonical(q: UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    if q.w < 0.0 {
        UnitQuaternion::new_unchecked(-q.into_inner())
    } else {
        q
    }
}

/// Builds a unit quaternion from `(w, x, y, z)` components, normalizing and
/// rejecting inputs whose norm deviates from one by more than `tol`.
pub fn quat_from_wxyz(q: [f64; 4], tol: f64) -> Result<UnitQuaternion<f64>> {
    if q.iter().any(|v| !v.is_finite()) {
        return Err(KinematicsError::NonFinite("quaternion"));
    }
    let raw = Quaternion::new(q[0], q[1], q[2], q[3]);
    let norm = raw.norm();
    if (norm - 1.0).abs() > tol {
        return Err(KinematicsError::NonUnitQuaternion(norm));
    }
    // Already-unit inputs keep their exact bits so text round trips are stable.
    let unit = if (norm - 1.0).abs() <= 1e-12 {
        UnitQuaternion::new_unchecked(raw)
    } else {
        UnitQuaternion::from_quaternion(raw)
    };
    Ok(canonical(unit))
}

pub fn quat_to_wxyz(q: &UnitQuaternion<f64>) -> [f64; 4] {
    [q.w, q.i, q.j, q.k]
}

/// Shortest-arc spherical interpolation between two attitudes.
pub fn slerp(a: &UnitQuaternion<f64>, b: &UnitQuaternion<f64>, alpha: f64) -> UnitQuaternion<f64> {
    let qa = a.as_ref().coords;
    let mut qb = b.as_ref().coords;
    let mut dot = qa.dot(&qb);
    if dot < 0.0 {
        qb = -qb;
        dot = -dot;
    }
    let coords = if dot > 0.9995 {
        (qa * (1.0 - alpha) + qb * alpha).normalize()
    } else {
        let theta = dot.min(1.0).acos();
        let sin = theta.sin();
        qa * (((1.0 - alpha) * theta).sin() / sin) + qb * ((alpha * theta).sin() / sin)
    };
    canonical(UnitQuaternion::from_quaternion(Quaternion::from(coords)))
}

/// Sign-invariant distance between two unit quaternions.
pub fn quat_distance(a: &UnitQuaternion<f64>, b: &UnitQuaternion<f64>) -> f64 {
    let a = a.as_ref().coords;
    let b = b.as_ref().coords;
    (a - b).norm().min((a + b).norm())
}

/// Position plus orientation of a rigid frame expressed in some parent frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidPose {
    pub position: Vector3<f64>,
    pub orientation: UnitQuaternion<f64>,
}

impl Default for RigidPose {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidPose {
    pub fn identity() -> Self {
        Self {
            position: Vector3::zeros(),
            orientation: UnitQuaternion::identity(),
        }
    }

    pub fn new(position: Vector3<f64>, orientation: UnitQuaternion<f64>) -> Self {
        Self {
            position,
            orientation: canonical(orientation),
        }
    }

    pub fn from_translation(position: Vector3<f64>) -> Self {
        Self::new(position, UnitQuaternion::identity())
    }

    /// Planar pose: translation `(x, y, z)` and a rotation about +Z.
    pub fn from_xyz_yaw(x: f64, y: f64, z: f64, yaw: f64) -> Self {
        Self::new(
            Vector3::new(x, y, z),
            UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw),
        )
    }

    /// Parses raw position and `(w, x, y, z)` arrays, checking the quaternion
    /// norm against [`ROOT_UNIT_TOL`].
    pub fn from_arrays(position: [f64; 3], quat_wxyz: [f64; 4]) -> Result<Self> {
        if position.iter().any(|v| !v.is_finite()) {
            return Err(KinematicsError::NonFinite("position"));
        }
        let q = quat_from_wxyz(quat_wxyz, ROOT_UNIT_TOL)?;
        Ok(Self::new(Vector3::from(position), q))
    }

    pub fn position_array(&self) -> [f64; 3] {
        [self.position.x, self.position.y, self.position.z]
    }

    pub fn quat_wxyz(&self) -> [f64; 4] {
        quat_to_wxyz(&self.orientation)
    }

    /// `self ∘ other`: `other` is expressed in the frame described by `self`.
    pub fn compose(&self, other: &RigidPose) -> RigidPose {
        RigidPose::new(
            self.position + self.orientation * other.position,
            self.orientation * other.orientation,
        )
    }

    pub fn inverse(&self) -> RigidPose {
        let inv = self.orientation.inverse();
        RigidPose::new(-(inv * self.position), inv)
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.position + self.orientation * p
    }

    /// Heading angle about +Z.
    pub fn yaw(&self) -> f64 {
        self.orientation.euler_angles().2
    }

    pub fn is_finite(&self) -> bool {
        self.position.iter().all(|v| v.is_finite())
            && self.orientation.as_ref().coords.iter().all(|v| v.is_finite())
    }
}

/// A world-frame quantity that can be re-expressed in a robot base frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FrameValue {
    /// A point; subject to both translation and rotation.
    Position(Vector3<f64>),
    /// An attitude; left-multiplied by the inverse root rotation.
    Orientation(UnitQuaternion<f64>),
    /// A free vector (velocity, gravity); rotation only.
    Vector(Vector3<f64>),
}

fn check_root(root: &RigidPose) -> Result<()> {
    let norm = root.orientation.as_ref().norm();
    if !norm.is_finite() || (norm - 1.0).abs() > ROOT_UNIT_TOL {
        return Err(KinematicsError::NonUnitQuaternion(norm));
    }
    Ok(())
}

/// Re-expresses a world-frame value in the local frame of `root`.
pub fn to_base_frame(value: FrameValue, root: &RigidPose) -> Result<FrameValue> {
    check_root(root)?;
    let inv = root.orientation.inverse();
    Ok(match value {
        FrameValue::Position(p) => FrameValue::Position(inv * (p - root.position)),
        FrameValue::Orientation(q) => FrameValue::Orientation(canonical(inv * q)),
        FrameValue::Vector(v) => FrameValue::Vector(inv * v),
    })
}

/// Inverse of [`to_base_frame`].
pub fn from_base_frame(value: FrameValue, root: &RigidPose) -> Result<FrameValue> {
    check_root(root)?;
    Ok(match value {
        FrameValue::Position(p) => FrameValue::Position(root.orientation * p + root.position),
        FrameValue::Orientation(q) => FrameValue::Orientation(canonical(root.orientation * q)),
        FrameValue::Vector(v) => FrameValue::Vector(root.orientation * v),
    })
}

/// Precomputed base-frame transform for hot paths that convert many values
/// against the same root.
#[derive(Debug, Clone, Copy)]
pub struct BaseFrame {
    origin: Vector3<f64>,
    inv: UnitQuaternion<f64>,
}

impl BaseFrame {
    pub fn new(root: &RigidPose) -> Result<Self> {
        check_root(root)?;
        Ok(Self {
            origin: root.position,
            inv: root.orientation.inverse(),
        })
    }

    pub fn point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.inv * (p - self.origin)
    }

    pub fn vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.inv * v
    }

    pub fn orientation(&self, q: &UnitQuaternion<f64>) -> UnitQuaternion<f64> {
        canonical(self.inv * q)
    }
}

#[derive(Debug, Clone)]
pub struct JointSpec {
    pub name: String,
    pub axis: Unit<Vector3<f64>>,
    pub limits: [f64; 2],
}

#[derive(Debug, Clone)]
pub struct Link {
    pub name: String,
    pub parent: Option<usize>,
    /// Fixed transform from the parent link frame to this link's joint frame.
    pub offset: RigidPose,
    /// Index into the actuated joint vector, `None` for the root and fixed links.
    pub joint: Option<usize>,
}

/// Kinematic tree of a floating-base humanoid.
///
/// Links are stored in topological order (every parent precedes its
/// children), so forward kinematics is a single pass.
#[derive(Debug, Clone)]
pub struct HumanoidModel {
    name: String,
    links: Vec<Link>,
    joints: Vec<JointSpec>,
    joint_links: Vec<usize>,
    key_bodies: Vec<usize>,
    calibration_chain: Vec<usize>,
    by_name: HashMap<String, usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct JointEntry {
    name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    link: Option<String>,
    parent: String,
    offset_pos: [f64; 3],
    #[serde(default = "identity_wxyz")]
    offset_quat: [f64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    axis: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    limits: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    fixed: bool,
}

fn identity_wxyz() -> [f64; 4] {
    [1.0, 0.0, 0.0, 0.0]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelFile {
    #[serde(default)]
    name: String,
    #[serde(default = "default_root")]
    root: String,
    joints: Vec<JointEntry>,
    #[serde(default)]
    key_bodies: Vec<String>,
    #[serde(default)]
    calibration_chain: Vec<String>,
}

fn default_root() -> String {
    "pelvis".to_string()
}

/// Incremental construction of a [`HumanoidModel`]; validation happens in
/// [`ModelBuilder::build`].
#[derive(Debug, Clone)]
pub struct ModelBuilder {
    file: ModelFile,
}

impl ModelBuilder {
    pub fn new(root: impl Into<String>) -> Self {
        Self {
            file: ModelFile {
                name: String::new(),
                root: root.into(),
                joints: Vec::new(),
                key_bodies: Vec::new(),
                calibration_chain: Vec::new(),
            },
        }
    }

    pub fn name(mut self, name: impl Into<String>) -> Self {
        self.file.name = name.into();
        self
    }

    /// Adds a revolute joint driving link `link`. The joint name is derived
    /// from the link name.
    pub fn revolute(
        mut self,
        link: &str,
        parent: &str,
        offset: RigidPose,
        axis: [f64; 3],
        limits: [f64; 2],
    ) -> Self {
        self.file.joints.push(JointEntry {
            name: format!("{link}_joint"),
            link: Some(link.to_string()),
            parent: parent.to_string(),
            offset_pos: offset.position_array(),
            offset_quat: offset.quat_wxyz(),
            axis: Some(axis),
            limits: Some(limits),
            fixed: false,
        });
        self
    }

    pub fn fixed(mut self, link: &str, parent: &str, offset: RigidPose) -> Self {
        self.file.joints.push(JointEntry {
            name: format!("{link}_fixed"),
            link: Some(link.to_string()),
            parent: parent.to_string(),
            offset_pos: offset.position_array(),
            offset_quat: offset.quat_wxyz(),
            axis: None,
            limits: None,
            fixed: true,
        });
        self
    }

    pub fn key_bodies<S: AsRef<str>>(mut self, names: &[S]) -> Self {
        self.file.key_bodies = names.iter().map(|s| s.as_ref().to_string()).collect();
        self
    }

    pub fn calibration_chain<S: AsRef<str>>(mut self, names: &[S]) -> Self {
        self.file.calibration_chain = names.iter().map(|s| s.as_ref().to_string()).collect();
        self
    }

    pub fn build(self) -> Result<HumanoidModel> {
        HumanoidModel::from_file(self.file)
    }
}

impl HumanoidModel {
    pub fn builder(root: impl Into<String>) -> ModelBuilder {
        ModelBuilder::new(root)
    }

    /// The bundled 29-joint reference humanoid.
    pub fn reference() -> Self {
        Self::from_json_str(REFERENCE_MODEL_JSON).expect("bundled reference model is valid")
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(s)?;
        Self::from_file(file)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json_str(&text)
    }

    pub fn to_json_string(&self) -> String {
        let joints = self.links[1..]
            .iter()
            .map(|l| {
                let parent = &self.links[l.parent.expect("non-root link")].name;
                let (name, axis, limits, fixed) = match l.joint {
                    Some(j) => {
                        let spec = &self.joints[j];
                        (
                            spec.name.clone(),
                            Some([spec.axis.x, spec.axis.y, spec.axis.z]),
                            Some(spec.limits),
                            false,
                        )
                    }
                    None => (format!("{}_fixed", l.name), None, None, true),
                };
                JointEntry {
                    name,
                    link: Some(l.name.clone()),
                    parent: parent.clone(),
                    offset_pos: l.offset.position_array(),
                    offset_quat: l.offset.quat_wxyz(),
                    axis,
                    limits,
                    fixed,
                }
            })
            .collect();
        let file = ModelFile {
            name: self.name.clone(),
            root: self.links[0].name.clone(),
            joints,
            key_bodies: self.key_bodies.iter().map(|&i| self.links[i].name.clone()).collect(),
            calibration_chain: self
                .calibration_chain
                .iter()
                .map(|&i| self.links[i].name.clone())
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("model serializes")
    }

    fn from_file(file: ModelFile) -> Result<Self> {
        let invalid = |msg: String| KinematicsError::InvalidModel(msg);

        let mut child_names = Vec::with_capacity(file.joints.len());
        for entry in &file.joints {
            let link = entry.link.clone().unwrap_or_else(|| entry.name.clone());
            if link == file.root {
                return Err(invalid(format!("link `{link}` duplicates the root")));
            }
            if child_names.contains(&link) {
                return Err(invalid(format!("duplicate link `{link}`")));
            }
            child_names.push(link);
        }

        // Topological order by repeated sweeps; anything left unplaced is
        // either orphaned or part of a cycle.
        let mut placed: HashMap<String, usize> = HashMap::new();
        placed.insert(file.root.clone(), 0);
        let mut order: Vec<usize> = Vec::with_capacity(file.joints.len());
        let mut remaining: Vec<usize> = (0..file.joints.len()).collect();
        while !remaining.is_empty() {
            let before = remaining.len();
            remaining.retain(|&i| {
                if placed.contains_key(&file.joints[i].parent) {
                    placed.insert(child_names[i].clone(), order.len() + 1);
                    order.push(i);
                    false
                } else {
                    true
                }
            });
            if remaining.len() == before {
                let entry = &file.joints[remaining[0]];
                let known = child_names.contains(&entry.parent) || entry.parent == file.root;
                return Err(invalid(if known {
                    format!("cycle through link `{}`", child_names[remaining[0]])
                } else {
                    format!("unknown parent `{}`", entry.parent)
                }));
            }
        }

        let mut links = vec![Link {
            name: file.root.clone(),
            parent: None,
            offset: RigidPose::identity(),
            joint: None,
        }];
        let mut joint_of_entry: Vec<Option<usize>> = vec![None; file.joints.len()];
        let mut joints = Vec::new();
        for (i, entry) in file.joints.iter().enumerate() {
            if entry.fixed {
                continue;
            }
            let axis = entry
                .axis
                .ok_or_else(|| invalid(format!("joint `{}` has no axis", entry.name)))?;
            let axis = Vector3::from(axis);
            if !axis.iter().all(|v| v.is_finite()) || (axis.norm() - 1.0).abs() > MODEL_UNIT_TOL {
                return Err(invalid(format!("joint `{}` axis is not unit", entry.name)));
            }
            let limits = entry.limits.unwrap_or([-std::f64::consts::PI, std::f64::consts::PI]);
            if !(limits[0].is_finite() && limits[1].is_finite() && limits[0] <= limits[1]) {
                return Err(invalid(format!("joint `{}` has invalid limits", entry.name)));
            }
            joint_of_entry[i] = Some(joints.len());
            joints.push(JointSpec {
                name: entry.name.clone(),
                axis: Unit::new_unchecked(axis),
                limits,
            });
        }

        let mut joint_links = vec![0; joints.len()];
        for &i in &order {
            let entry = &file.joints[i];
            if entry.offset_pos.iter().any(|v| !v.is_finite()) {
                return Err(KinematicsError::NonFinite("offset_pos"));
            }
            let q = quat_from_wxyz(entry.offset_quat, MODEL_UNIT_TOL).map_err(|_| {
                invalid(format!("joint `{}` offset quaternion is not unit", entry.name))
            })?;
            let link_index = links.len();
            if let Some(j) = joint_of_entry[i] {
                joint_links[j] = link_index;
            }
            links.push(Link {
                name: child_names[i].clone(),
                parent: Some(placed[&entry.parent]),
                offset: RigidPose::new(Vector3::from(entry.offset_pos), q),
                joint: joint_of_entry[i],
            });
        }

        let by_name: HashMap<String, usize> =
            links.iter().enumerate().map(|(i, l)| (l.name.clone(), i)).collect();
        let resolve = |names: &[String]| -> Result<Vec<usize>> {
            names
                .iter()
                .map(|n| by_name.get(n).copied().ok_or_else(|| KinematicsError::UnknownLink(n.clone())))
                .collect()
        };
        let key_bodies = resolve(&file.key_bodies)?;
        let calibration_chain = resolve(&file.calibration_chain)?;
        for pair in calibration_chain.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            if links[a].parent != Some(b) && links[b].parent != Some(a) {
                return Err(invalid(format!(
                    "calibration chain is not connected between `{}` and `{}`",
                    links[a].name, links[b].name
                )));
            }
        }

        Ok(Self {
            name: file.name,
            links,
            joints,
            joint_links,
            key_bodies,
            calibration_chain,
            by_name,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Number of actuated joints.
    pub fn dof(&self) -> usize {
        self.joints.len()
    }

    pub fn links(&self) -> &[Link] {
        &self.links
    }

    pub fn joints(&self) -> &[JointSpec] {
        &self.joints
    }

    pub fn joint_names(&self) -> Vec<String> {
        self.joints.iter().map(|j| j.name.clone()).collect()
    }

    pub fn joint_limits(&self) -> Vec<[f64; 2]> {
        self.joints.iter().map(|j| j.limits).collect()
    }

    pub fn link_index(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn link_name(&self, index: usize) -> &str {
        &self.links[index].name
    }

    /// Link index driven by actuated joint `joint`.
    pub fn joint_link(&self, joint: usize) -> usize {
        self.joint_links[joint]
    }

    pub fn key_bodies(&self) -> &[usize] {
        &self.key_bodies
    }

    pub fn key_body_names(&self) -> Vec<String> {
        self.key_bodies.iter().map(|&i| self.links[i].name.clone()).collect()
    }

    pub fn calibration_chain(&self) -> &[usize] {
        &self.calibration_chain
    }

    /// Replaces the key-body set; every name must be a link of the model.
    pub fn with_key_bodies<S: AsRef<str>>(mut self, names: &[S]) -> Result<Self> {
        self.key_bodies = names
            .iter()
            .map(|n| {
                self.link_index(n.as_ref())
                    .ok_or_else(|| KinematicsError::UnknownLink(n.as_ref().to_string()))
            })
            .collect::<Result<_>>()?;
        Ok(self)
    }

    /// Key-body positions in `poses` order of [`HumanoidModel::key_bodies`].
    pub fn key_body_poses(&self, poses: &[RigidPose]) -> Vec<RigidPose> {
        self.key_bodies.iter().map(|&i| poses[i]).collect()
    }

    pub fn zero_configuration(&self) -> Vec<f64> {
        vec![0.0; self.dof()]
    }

    fn check_joints(&self, joint_pos: &[f64]) -> Result<()> {
        if joint_pos.len() != self.dof() {
            return Err(KinematicsError::DimensionMismatch {
                expected: self.dof(),
                got: joint_pos.len(),
            });
        }
        if joint_pos.iter().any(|v| !v.is_finite()) {
            return Err(KinematicsError::NonFinite("joint_pos"));
        }
        Ok(())
    }
}

/// Poses of every link in world frame, indexed like [`HumanoidModel::links`].
///
/// Joint limits are not enforced here.
pub fn forward_kinematics(
    model: &HumanoidModel,
    joint_pos: &[f64],
    root: &RigidPose,
) -> Result<Vec<RigidPose>> {
    model.check_joints(joint_pos)?;
    if !root.is_finite() {
        return Err(KinematicsError::NonFinite("root"));
    }
    let mut poses = Vec::with_capacity(model.links.len());
    poses.push(*root);
    for link in &model.links[1..] {
        let parent = poses[link.parent.expect("non-root link")];
        let mut pose = parent.compose(&link.offset);
        if let Some(j) = link.joint {
            let rot = UnitQuaternion::from_axis_angle(&model.joints[j].axis, joint_pos[j]);
            pose = RigidPose::new(pose.position, pose.orientation * rot);
        }
        poses.push(pose);
    }
    Ok(poses)
}

/// Sum of segment lengths along the calibration chain.
///
/// A single-link chain measures the segment from that link to its parent.
pub fn chain_height(model: &HumanoidModel, joint_pos: &[f64]) -> Result<f64> {
    let chain = model.calibration_chain();
    if chain.is_empty() {
        return Err(KinematicsError::EmptyCalibrationChain);
    }
    let poses = forward_kinematics(model, joint_pos, &RigidPose::identity())?;
    let height = if chain.len() == 1 {
        let link = &model.links[chain[0]];
        match link.parent {
            Some(p) => (poses[chain[0]].position - poses[p].position).norm(),
            None => 0.0,
        }
    } else {
        chain
            .windows(2)
            .map(|w| (poses[w[1]].position - poses[w[0]].position).norm())
            .sum()
    };
    if height <= 0.0 {
        return Err(KinematicsError::DegenerateCalibrationChain);
    }
    Ok(height)
}
