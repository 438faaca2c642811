//! Independent reference implementations shared by the integration tests.
//! Nothing here calls into the code under test except to build inputs.

#![allow(dead_code)]

use std::collections::BTreeMap;

use nalgebra::{UnitQuaternion, Vector3};
use omniclone_core::kinematics::{HumanoidModel, RigidPose};
use omniclone_core::motion::Frame;
use omniclone_core::simtrack::{BodyState, RobotState};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub type Mat4 = [[f64; 4]; 4];

pub fn identity4() -> Mat4 {
    let mut m = [[0.0; 4]; 4];
    for (i, row) in m.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    m
}

pub fn mul4(a: &Mat4, b: &Mat4) -> Mat4 {
    let mut m = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            m[i][j] = (0..4).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    m
}

/// Rotation matrix of a unit quaternion (w, x, y, z).
pub fn quat_matrix(q: [f64; 4]) -> [[f64; 3]; 3] {
    let [w, x, y, z] = q;
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

/// Rodrigues rotation about a unit axis.
pub fn axis_angle_matrix(axis: [f64; 3], angle: f64) -> [[f64; 3]; 3] {
    let [x, y, z] = axis;
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ]
}

pub fn homogeneous(r: [[f64; 3]; 3], p: [f64; 3]) -> Mat4 {
    let mut m = identity4();
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] = r[i][j];
        }
        m[i][3] = p[i];
    }
    m
}

/// Quaternion (w, x, y, z) with w >= 0 from a rotation matrix (Shepperd).
pub fn matrix_quat(m: &Mat4) -> [f64; 4] {
    let tr = m[0][0] + m[1][1] + m[2][2];
    let q = if tr > 0.0 {
        let s = (tr + 1.0).sqrt() * 2.0;
        [0.25 * s, (m[2][1] - m[1][2]) / s, (m[0][2] - m[2][0]) / s, (m[1][0] - m[0][1]) / s]
    } else if m[0][0] > m[1][1] && m[0][0] > m[2][2] {
        let s = (1.0 + m[0][0] - m[1][1] - m[2][2]).sqrt() * 2.0;
        [(m[2][1] - m[1][2]) / s, 0.25 * s, (m[0][1] + m[1][0]) / s, (m[0][2] + m[2][0]) / s]
    } else if m[1][1] > m[2][2] {
        let s = (1.0 + m[1][1] - m[0][0] - m[2][2]).sqrt() * 2.0;
        [(m[0][2] - m[2][0]) / s, (m[0][1] + m[1][0]) / s, 0.25 * s, (m[1][2] + m[2][1]) / s]
    } else {
        let s = (1.0 + m[2][2] - m[0][0] - m[1][1]).sqrt() * 2.0;
        [(m[1][0] - m[0][1]) / s, (m[0][2] + m[2][0]) / s, (m[1][2] + m[2][1]) / s, 0.25 * s]
    };
    if q[0] < 0.0 {
        [-q[0], -q[1], -q[2], -q[3]]
    } else {
        q
    }
}

pub fn quat_dist(a: [f64; 4], b: [f64; 4]) -> f64 {
    let d: f64 = (0..4).map(|i| (a[i] - b[i]).powi(2)).sum::<f64>().sqrt();
    let s: f64 = (0..4).map(|i| (a[i] + b[i]).powi(2)).sum::<f64>().sqrt();
    d.min(s)
}

pub fn random_unit3(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 0.1 && n <= 1.0 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

pub fn random_quat(rng: &mut ChaCha8Rng) -> [f64; 4] {
    loop {
        let v: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.1 && n <= 1.0 {
            let q = v.map(|x| x / n);
            return if q[0] < 0.0 { q.map(|x| -x) } else { q };
        }
    }
}

pub fn quat_of(q: [f64; 4]) -> UnitQuaternion<f64> {
    UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(q[0], q[1], q[2], q[3]))
}

/// One serial-chain joint: fixed offset from the parent, then rotation about `axis`.
#[derive(Debug, Clone)]
pub struct ChainJoint {
    pub offset_pos: [f64; 3],
    pub offset_quat: [f64; 4],
    pub axis: [f64; 3],
}

pub fn random_chain(rng: &mut ChaCha8Rng, joints: usize) -> Vec<ChainJoint> {
    (0..joints)
        .map(|_| ChainJoint {
            offset_pos: std::array::from_fn(|_| rng.random_range(-0.5..0.5)),
            offset_quat: random_quat(rng),
            axis: random_unit3(rng),
        })
        .collect()
}

/// Serial model `base -> l0 -> ... -> l{n-1}` with every link a key body.
pub fn chain_model(chain: &[ChainJoint]) -> HumanoidModel {
    let mut b = HumanoidModel::builder("base");
    let mut names = vec!["base".to_string()];
    for (i, j) in chain.iter().enumerate() {
        let link = format!("l{i}");
        let offset = RigidPose::new(Vector3::from(j.offset_pos), quat_of(j.offset_quat));
        b = b.revolute(&link, &names[i].clone(), offset, j.axis, [-10.0, 10.0]);
        names.push(link);
    }
    b.key_bodies(&names).build().expect("valid chain")
}

/// World poses of base and every link as (position, quaternion).
pub fn oracle_chain_fk(chain: &[ChainJoint], q: &[f64], root_pos: [f64; 3], root_quat: [f64; 4]) -> Vec<([f64; 3], [f64; 4])> {
    let mut m = homogeneous(quat_matrix(root_quat), root_pos);
    let mut out = vec![(root_pos, matrix_quat(&m))];
    for (j, angle) in chain.iter().zip(q) {
        m = mul4(&m, &homogeneous(quat_matrix(j.offset_quat), j.offset_pos));
        m = mul4(&m, &homogeneous(axis_angle_matrix(j.axis, *angle), [0.0; 3]));
        out.push(([m[0][3], m[1][3], m[2][3]], matrix_quat(&m)));
    }
    out
}

/// Bitwise CRC-32 (IEEE, reflected, poly 0xEDB88320).
pub fn crc32_bitwise(data: &[u8]) -> u32 {
    let mut crc = 0xFFFF_FFFFu32;
    for &b in data {
        crc ^= b as u32;
        for _ in 0..8 {
            crc = if crc & 1 != 0 { (crc >> 1) ^ 0xEDB8_8320 } else { crc >> 1 };
        }
    }
    !crc
}

/// Plain-data packet description for the reference encoder.
#[derive(Debug, Clone)]
pub struct RefPacket {
    pub msg_type: u8,
    pub flags: u16,
    pub seq: u32,
    pub send_ts_us: u64,
    pub n_bodies: u16,
    pub n_joints: u16,
    /// Each frame flattened: root_lin_vel(3), per body pos(3)+quat(4), joints.
    pub frames: Vec<Vec<f32>>,
}

/// Byte-by-byte little-endian writer following the wire layout.
pub fn reference_encode(p: &RefPacket) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(b"OCL1");
    out.push(1);
    out.push(p.msg_type);
    for b in [p.flags as u8, (p.flags >> 8) as u8] {
        out.push(b);
    }
    for i in 0..4 {
        out.push((p.seq >> (8 * i)) as u8);
    }
    for i in 0..8 {
        out.push((p.send_ts_us >> (8 * i)) as u8);
    }
    for v in [p.frames.len() as u16, p.n_bodies, p.n_joints] {
        out.push(v as u8);
        out.push((v >> 8) as u8);
    }
    for f in &p.frames {
        for v in f {
            let bits = v.to_bits();
            for i in 0..4 {
                out.push((bits >> (8 * i)) as u8);
            }
        }
    }
    let crc = crc32_bitwise(&out);
    for i in 0..4 {
        out.push((crc >> (8 * i)) as u8);
    }
    out
}

/// Discrete-event model of the streaming pipeline: four uniform draws per
/// packet (drop, jitter, duplicate, reorder), arrivals at integer
/// microseconds, a bounded reordering buffer and a fixed-rate consumer.
/// Returns the `tick,seq,held` trace bytes and the warm-up tick count.
pub fn continuity_oracle(
    packets: usize,
    rate_hz: f64,
    capacity: usize,
    drop_prob: f64,
    jitter_ms: (f64, f64),
    seed: u64,
    phase_us: u64,
) -> (Vec<u8>, u64) {
    use rand::SeedableRng;
    let period = (1e6 / rate_hz).round() as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut arrivals: Vec<(u64, usize, u32)> = Vec::new();
    for i in 0..packets {
        let draws: [f64; 4] = std::array::from_fn(|_| rng.random::<f64>());
        if draws[0] < drop_prob {
            continue;
        }
        let delay_ms = jitter_ms.0 + draws[1] * (jitter_ms.1 - jitter_ms.0);
        let order = arrivals.len();
        arrivals.push((i as u64 * period + (delay_ms * 1000.0).round() as u64, order, i as u32));
    }
    arrivals.sort();
    let mut buffer: BTreeMap<u32, ()> = BTreeMap::new();
    let mut last: Option<u32> = None;
    let mut next = 0;
    let mut warmup = 0;
    let mut text = String::new();
    for tick in 0..packets as u64 {
        let now = tick * period + phase_us;
        while next < arrivals.len() && arrivals[next].0 <= now {
            let seq = arrivals[next].2;
            next += 1;
            if last.is_some_and(|l| seq <= l) || buffer.contains_key(&seq) {
                continue;
            }
            buffer.insert(seq, ());
            if buffer.len() > capacity {
                let oldest = *buffer.keys().next().unwrap();
                buffer.remove(&oldest);
            }
        }
        if let Some((&seq, _)) = buffer.iter().next() {
            buffer.remove(&seq);
            last = Some(seq);
            text.push_str(&format!("{tick},{seq},0\n"));
        } else if let Some(seq) = last {
            text.push_str(&format!("{tick},{seq},1\n"));
        } else {
            warmup += 1;
        }
    }
    (text.into_bytes(), warmup)
}

/// Step-by-step receding-horizon schedule: for each tick, the
/// (chunk, index) that should serve it and the planner call ticks.
pub fn chunk_schedule_oracle(execute_len: usize, ticks: u64) -> (Vec<(u64, usize)>, Vec<u64>) {
    let mut served = Vec::new();
    let mut calls = Vec::new();
    let mut chunk = 0u64;
    let mut index = execute_len;
    for tick in 0..ticks {
        if index == execute_len {
            if tick > 0 {
                chunk += 1;
            }
            index = 0;
            calls.push(tick);
        }
        served.push((chunk, index));
        index += 1;
    }
    (served, calls)
}

pub fn random_vec3(rng: &mut ChaCha8Rng, r: f64) -> Vector3<f64> {
    Vector3::new(rng.random_range(-r..r), rng.random_range(-r..r), rng.random_range(-r..r))
}

/// Arbitrary (not necessarily physical) robot state for `model`.
pub fn random_state(rng: &mut ChaCha8Rng, model: &HumanoidModel) -> RobotState {
    let n = model.dof();
    let k = model.key_bodies().len();
    let mut vec_n = |r: f64| -> Vec<f64> { (0..n).map(|_| rng.random_range(-r..r)).collect() };
    let (joint_pos, joint_vel, joint_acc, last_action) = (vec_n(1.0), vec_n(3.0), vec_n(10.0), vec_n(1.0));
    let root = RigidPose::new(random_vec3(rng, 2.0), quat_of(random_quat(rng)));
    let bodies = (0..k)
        .map(|_| BodyState {
            pos: random_vec3(rng, 2.0),
            quat: quat_of(random_quat(rng)),
            lin_vel: random_vec3(rng, 2.0),
            ang_vel: random_vec3(rng, 2.0),
        })
        .collect();
    RobotState {
        root,
        root_lin_vel: random_vec3(rng, 2.0),
        root_ang_vel: random_vec3(rng, 2.0),
        joint_pos,
        joint_vel,
        joint_acc,
        bodies,
        last_action,
        gravity_world: Vector3::new(0.0, 0.0, -9.81),
    }
}

/// Arbitrary reference frame with explicit body arrays.
pub fn random_frame(rng: &mut ChaCha8Rng, model: &HumanoidModel, t: f64) -> Frame {
    let n = model.dof();
    let k = model.key_bodies().len();
    let root = RigidPose::new(random_vec3(rng, 2.0), quat_of(random_quat(rng)));
    let mut f = Frame::new(t, root, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect());
    f.root_lin_vel = random_vec3(rng, 2.0);
    f.root_ang_vel = random_vec3(rng, 2.0);
    f.joint_vel = Some((0..n).map(|_| rng.random_range(-3.0..3.0)).collect());
    f.body_pos = Some((0..k).map(|_| random_vec3(rng, 2.0)).collect());
    f.body_quat = Some((0..k).map(|_| quat_of(random_quat(rng))).collect());
    f
}

/// Planar rigid motion: yaw about world z plus a horizontal translation.
#[derive(Debug, Clone, Copy)]
pub struct Planar {
    pub rot: UnitQuaternion<f64>,
    pub shift: Vector3<f64>,
}

impl Planar {
    pub fn new(yaw: f64, dx: f64, dy: f64) -> Self {
        Self { rot: UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw), shift: Vector3::new(dx, dy, 0.0) }
    }

    pub fn point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rot * p + self.shift
    }

    pub fn pose(&self, p: &RigidPose) -> RigidPose {
        RigidPose::new(self.point(&p.position), self.rot * p.orientation)
    }

    pub fn state(&self, s: &RobotState) -> RobotState {
        RobotState {
            root: self.pose(&s.root),
            root_lin_vel: self.rot * s.root_lin_vel,
            bodies: s
                .bodies
                .iter()
                .map(|b| BodyState {
                    pos: self.point(&b.pos),
                    quat: self.rot * b.quat,
                    lin_vel: self.rot * b.lin_vel,
                    ang_vel: self.rot * b.ang_vel,
                })
                .collect(),
            ..s.clone()
        }
    }

    pub fn frame(&self, f: &Frame) -> Frame {
        Frame {
            root: self.pose(&f.root),
            root_lin_vel: self.rot * f.root_lin_vel,
            root_ang_vel: self.rot * f.root_ang_vel,
            body_pos: f.body_pos.as_ref().map(|v| v.iter().map(|p| self.point(p)).collect()),
            body_quat: f.body_quat.as_ref().map(|v| v.iter().map(|q| self.rot * q).collect()),
            ..f.clone()
        }
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
