//! Built-in scenarios: a mannequin near a robot carrying three rings of
//! eight sensors (base, elbow, end-effector), over a floor at `z = 0`.
//!
//! Names are `<family>@<speed>`, e.g. `approach-y@0.15`. Families:
//!
//! - `approach-y`: the mannequin moves 0.30 m along −y toward the robot.
//! - `lateral-x`: the mannequin moves 0.25 m along +x, centered on the robot.
//! - `both-moving`: `approach-y`, while the end-effector link moves 0.15 m
//!   along −y and 0.05 m along +x, then 0.10 m along −y, at 0.25 m/s. The
//!   elbow link follows at half that displacement.
//! - `self-occlusion`: `approach-y` with the forearm folded low in front of
//!   the base ring.

use super::noise::NoiseModel;
use super::{Scenario, SensorSpec, Trajectory};
use crate::geometry::{Point3, RigidTransform, Vec3};
use crate::sensing::{RobotPart, RobotShape, SensorId, TofExtrinsics, TofIntrinsics};
use crate::shapes::Primitive;
use nalgebra::{Matrix3, Rotation3};
use std::collections::BTreeMap;

pub const PRESET_SPEEDS: [f64; 4] = [0.15, 0.20, 0.25, 0.30];
pub const PRESET_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
pub const FAMILIES: [&str; 4] = ["approach-y", "lateral-x", "both-moving", "self-occlusion"];

pub const RATE: f64 = 15.0;
/// Still time before and after the commanded motion, in steps.
pub const HOLD_STEPS: u32 = 6;
/// Distance from the robot base to the mannequin's axis at the start.
pub const OBJECT_DISTANCE: f64 = 0.75;
/// Height of the mannequin frame origin (torso center).
pub const OBJECT_HEIGHT: f64 = 0.9;
pub const SENSORS_PER_RING: usize = 8;

const ELBOW_HEIGHT: f64 = 0.5;
const EE_HEIGHT: f64 = 0.85;
const ROBOT_PATH_SPEED: f64 = 0.25;

/// Head sphere, a torso of two side-by-side capsules, and two arm capsules,
/// in a frame at the torso center with the chest facing −y.
pub fn mannequin() -> Vec<Primitive> {
    let p = Point3::new;
    vec![
        Primitive::sphere(p(0.0, 0.0, 0.45), 0.11),
        Primitive::capsule(p(-0.08, 0.0, -0.25), p(-0.08, 0.0, 0.2), 0.11),
        Primitive::capsule(p(0.08, 0.0, -0.25), p(0.08, 0.0, 0.2), 0.11),
        Primitive::capsule(p(-0.25, 0.0, 0.22), p(-0.28, 0.02, -0.25), 0.05),
        Primitive::capsule(p(0.25, 0.0, 0.22), p(0.28, 0.02, -0.25), 0.05),
    ]
}

/// Mount rotation for a sensor looking radially outward at `yaw`, tilted
/// `pitch_down` below the horizon.
pub fn ring_mount_rotation(yaw: f64, pitch_down: f64) -> Rotation3<f64> {
    let (sy, cy) = yaw.sin_cos();
    let (sp, cp) = pitch_down.sin_cos();
    let x = Vec3::new(-sy, cy, 0.0);
    let z = Vec3::new(cy * cp, sy * cp, -sp);
    let y = z.cross(&x);
    Rotation3::from_matrix_unchecked(Matrix3::from_columns(&[x, y, z]))
}

/// Eight sensors around a link axis; sensor `j` looks along yaw `j·45°`.
pub fn ring(prefix: &str, link: &str, height: f64, radius: f64, pitch_down: f64) -> Vec<SensorSpec> {
    (0..SENSORS_PER_RING)
        .map(|j| {
            let yaw = j as f64 * std::f64::consts::TAU / SENSORS_PER_RING as f64;
            let pos = Vec3::new(radius * yaw.cos(), radius * yaw.sin(), height);
            SensorSpec {
                extrinsics: TofExtrinsics {
                    sensor_id: SensorId::new(&format!("{prefix}-{j}")),
                    mount_pose: RigidTransform::from_parts(ring_mount_rotation(yaw, pitch_down), pos),
                    link_id: link.into(),
                },
                intrinsics: TofIntrinsics::default(),
            }
        })
        .collect()
}

pub fn sensor_rings() -> Vec<SensorSpec> {
    let deg = f64::to_radians;
    let mut s = ring("base", "base", 0.15, 0.08, deg(15.0));
    s.extend(ring("elbow", "elbow", 0.15, 0.075, deg(0.0)));
    s.extend(ring("ee", "ee", 0.1, 0.07, deg(10.0)));
    s
}

pub fn robot_shape() -> RobotShape {
    let p = Point3::new;
    let part = |link: &str, prim| RobotPart {
        link_id: link.into(),
        primitive: prim,
    };
    RobotShape {
        parts: vec![
            part(
                "base",
                Primitive::capsule(p(0.0, 0.0, 0.0), p(0.0, 0.0, ELBOW_HEIGHT), 0.06),
            ),
            part(
                "elbow",
                Primitive::capsule(p(0.0, 0.0, 0.0), p(0.0, 0.0, EE_HEIGHT - ELBOW_HEIGHT), 0.055),
            ),
            part("ee", Primitive::capsule(p(0.0, 0.0, 0.0), p(0.0, 0.0, 0.2), 0.05)),
        ],
    }
}

fn link_paths() -> BTreeMap<String, Trajectory> {
    let fixed = |z: f64| Trajectory::fixed(RigidTransform::from_translation(Vec3::new(0.0, 0.0, z)));
    BTreeMap::from([
        ("base".to_string(), fixed(0.0)),
        ("elbow".to_string(), fixed(ELBOW_HEIGHT)),
        ("ee".to_string(), fixed(EE_HEIGHT)),
    ])
}

/// Hold, move `travel` along `dir` at `speed`, hold. Returns the path and
/// the total duration.
fn hold_move_hold(start: Vec3, dir: Vec3, travel: f64, speed: f64) -> (Trajectory, f64) {
    let hold = HOLD_STEPS as f64 / RATE;
    let t_move = travel / speed;
    let end = start + dir.normalize() * travel;
    let traj = Trajectory::translation_path(
        Rotation3::identity(),
        &[(0.0, start), (hold, start), (hold + t_move, end)],
    );
    (traj, hold + t_move + hold)
}

/// Waypoints of the end-effector path relative to its start.
pub fn robot_path_offsets() -> [Vec3; 3] {
    [Vec3::zeros(), Vec3::new(0.05, -0.15, 0.0), Vec3::new(0.05, -0.25, 0.0)]
}

fn moving_link(base: Vec3, scale: f64) -> (Trajectory, f64) {
    let hold = HOLD_STEPS as f64 / RATE;
    let offs = robot_path_offsets();
    let mut pts = vec![(0.0, base), (hold, base)];
    let mut t = hold;
    for w in offs.windows(2) {
        t += (w[1] - w[0]).norm() / ROBOT_PATH_SPEED;
        pts.push((t, base + w[1] * scale));
    }
    (Trajectory::translation_path(Rotation3::identity(), &pts), t + hold)
}

/// A preset by family and speed with seed 0; `None` for unknown families.
pub fn preset(family: &str, speed: f64) -> Option<Scenario> {
    let start = Vec3::new(0.0, OBJECT_DISTANCE, OBJECT_HEIGHT);
    let (object_trajectory, mut duration) = match family {
        "approach-y" | "both-moving" | "self-occlusion" => hold_move_hold(start, -Vec3::y(), 0.30, speed),
        "lateral-x" => hold_move_hold(start - Vec3::new(0.125, 0.0, 0.0), Vec3::x(), 0.25, speed),
        _ => return None,
    };
    let mut robot_trajectory = link_paths();
    let mut robot = robot_shape();
    if family == "both-moving" {
        let (ee, d_ee) = moving_link(Vec3::new(0.0, 0.0, EE_HEIGHT), 1.0);
        let (elbow, _) = moving_link(Vec3::new(0.0, 0.0, ELBOW_HEIGHT), 0.5);
        robot_trajectory.insert("ee".into(), ee);
        robot_trajectory.insert("elbow".into(), elbow);
        duration = duration.max(d_ee);
    }
    if family == "self-occlusion" {
        // Forearm folded down across the front of the base ring.
        let z = 0.15 - ELBOW_HEIGHT;
        robot.parts.push(RobotPart {
            link_id: "elbow".into(),
            primitive: Primitive::capsule(Point3::new(-0.4, 0.22, z), Point3::new(0.4, 0.22, z), 0.12),
        });
    }
    Some(Scenario {
        name: format!("{family}@{speed:.2}"),
        seed: 0,
        duration: (duration * RATE).round() / RATE,
        rate: RATE,
        sensors: sensor_rings(),
        robot_shape: robot,
        robot_trajectory,
        object: mannequin(),
        object_trajectory,
        background: vec![Primitive::plane(Point3::origin(), Vec3::z())],
        noise_rel: 0.10,
        noise_model: NoiseModel::GaussianRelative,
    })
}

/// Parses `family@speed`.
pub fn preset_by_name(name: &str) -> Option<Scenario> {
    let (family, speed) = name.split_once('@')?;
    let speed: f64 = speed.parse().ok()?;
    (speed > 0.0).then(|| preset(family, speed)).flatten()
}

/// Every family at every preset speed, keyed by name.
pub fn preset_scenarios() -> BTreeMap<String, Scenario> {
    let mut out = BTreeMap::new();
    for family in FAMILIES {
        for speed in PRESET_SPEEDS {
            if let Some(s) = preset(family, speed) {
                out.insert(s.name.clone(), s);
            }
        }
    }
    out
}
