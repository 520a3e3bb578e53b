//! Deterministic ToF scene simulator.
//!
//! A [`Scenario`] places ring-mounted sensors on a robot made of spheres and
//! capsules, moves a primitive-built object and the robot links along
//! piecewise-linear paths, and ray-casts every zone of every sensor at every
//! step. Ranges get relative noise from a counter-based stream, so any frame
//! can be regenerated on its own.

pub mod noise;
pub mod presets;
pub mod trajectory;

use crate::geometry::{Point3, RigidTransform, Vec3};
use crate::sensing::{zone_directions, DepthFrame, LinkPoses, RobotShape, SensorId, TofExtrinsics, TofIntrinsics};
use crate::shapes::{Primitive, Ray};
use noise::{relative_error, NoiseModel};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;
pub use trajectory::{Trajectory, Waypoint};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("scenario config: {0}")]
    Config(String),
    #[error("unknown sensor {0}")]
    UnknownSensor(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorSpec {
    #[serde(flatten)]
    pub extrinsics: TofExtrinsics,
    #[serde(default)]
    pub intrinsics: TofIntrinsics,
}

fn default_rate() -> f64 {
    15.0
}

fn default_noise_rel() -> f64 {
    0.10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    pub seed: u64,
    /// Seconds.
    pub duration: f64,
    #[serde(default = "default_rate")]
    pub rate: f64,
    pub sensors: Vec<SensorSpec>,
    pub robot_shape: RobotShape,
    /// One path per robot link, in the base frame.
    pub robot_trajectory: BTreeMap<String, Trajectory>,
    /// Object geometry in the object frame.
    pub object: Vec<Primitive>,
    pub object_trajectory: Trajectory,
    /// Static scene geometry in the base frame.
    #[serde(default)]
    pub background: Vec<Primitive>,
    #[serde(default = "default_noise_rel")]
    pub noise_rel: f64,
    #[serde(default)]
    pub noise_model: NoiseModel,
}

/// What a zone's return came from. `Miss` covers both no intersection and
/// a range outside the sensor limits, so labels other than `Miss` are exactly
/// the valid zones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HitLabel {
    Object,
    Robot,
    Background,
    Miss,
}

/// Everything the ray caster needs at one step, posed in the base frame.
#[derive(Debug, Clone)]
pub struct SceneState {
    pub step: u32,
    pub time: f64,
    pub link_poses: LinkPoses,
    pub object_pose: RigidTransform,
    pub primitives: Vec<(Primitive, HitLabel)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimFrame {
    pub sensor_pose: RigidTransform,
    pub frame: DepthFrame,
    pub hits: Vec<HitLabel>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub step: u32,
    pub time: f64,
    pub object_pose: RigidTransform,
    /// Right derivative of the object path, m/s.
    pub velocity: Vec3,
    pub hits: BTreeMap<SensorId, Vec<HitLabel>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOutput {
    /// Ordered by (step, sensor id).
    pub frames: Vec<SimFrame>,
    pub truth: Vec<GroundTruth>,
}

impl Scenario {
    pub fn validate(&self) -> Result<(), SimError> {
        let cfg = |m: String| Err(SimError::Config(m));
        if !(self.rate > 0.0) {
            return cfg(format!("rate {} must be > 0", self.rate));
        }
        if !(self.duration >= 0.0) {
            return cfg(format!("duration {} must be ≥ 0", self.duration));
        }
        if !(0.0..=0.2).contains(&self.noise_rel) {
            return cfg(format!("noise_rel {} outside [0, 0.2]", self.noise_rel));
        }
        self.robot_shape
            .validate()
            .map_err(|e| SimError::Config(e.to_string()))?;
        self.object_trajectory.validate("object")?;
        for (link, t) in &self.robot_trajectory {
            t.validate(link)?;
        }
        let known = |link: &str| self.robot_trajectory.contains_key(link);
        for part in &self.robot_shape.parts {
            if !known(&part.link_id) {
                return cfg(format!("robot part on link {} has no trajectory", part.link_id));
            }
        }
        let mut ids = std::collections::BTreeSet::new();
        for s in &self.sensors {
            if !known(&s.extrinsics.link_id) {
                return cfg(format!(
                    "sensor {} mounted on link {} with no trajectory",
                    s.extrinsics.sensor_id, s.extrinsics.link_id
                ));
            }
            if !ids.insert(s.extrinsics.sensor_id.clone()) {
                return cfg(format!("duplicate sensor {}", s.extrinsics.sensor_id));
            }
            s.intrinsics.validate().map_err(|e| SimError::Config(e.to_string()))?;
        }
        Ok(())
    }

    /// Number of sampled steps: `k = 0..=⌊duration·rate⌋`.
    pub fn steps(&self) -> u32 {
        (self.duration * self.rate + 1e-9).floor() as u32 + 1
    }

    pub fn time_of(&self, step: u32) -> f64 {
        step as f64 / self.rate
    }

    pub fn link_poses_at(&self, t: f64) -> LinkPoses {
        self.robot_trajectory
            .iter()
            .map(|(link, traj)| (link.clone(), traj.pose_at(t)))
            .collect()
    }

    pub fn extrinsics(&self) -> Vec<TofExtrinsics> {
        self.sensors.iter().map(|s| s.extrinsics.clone()).collect()
    }

    pub fn scene_at(&self, step: u32) -> SceneState {
        let time = self.time_of(step);
        let link_poses = self.link_poses_at(time);
        let object_pose = self.object_trajectory.pose_at(time);
        let mut primitives = Vec::new();
        primitives.extend(
            self.object
                .iter()
                .map(|p| (p.transformed(&object_pose), HitLabel::Object)),
        );
        for part in &self.robot_shape.parts {
            if let Some(pose) = link_poses.get(&part.link_id) {
                primitives.push((part.primitive.transformed(pose), HitLabel::Robot));
            }
        }
        primitives.extend(self.background.iter().map(|p| (*p, HitLabel::Background)));
        SceneState {
            step,
            time,
            link_poses,
            object_pose,
            primitives,
        }
    }
}

/// Nearest surface along `ray` and what it belongs to.
pub fn cast(ray: &Ray, primitives: &[(Primitive, HitLabel)]) -> Option<(f64, HitLabel)> {
    primitives
        .iter()
        .filter_map(|(p, label)| p.intersect(ray).map(|s| (s, *label)))
        .min_by(|a, b| a.0.total_cmp(&b.0))
}

fn render(scenario: &Scenario, spec: &SensorSpec, scene: &SceneState) -> SimFrame {
    let e = &spec.extrinsics;
    let intr = &spec.intrinsics;
    let sensor_pose = scene.link_poses[&e.link_id].compose(&e.mount_pose);
    let origin = Point3::from(*sensor_pose.translation());
    let dirs = zone_directions(intr);
    let mut depth_mm = Vec::with_capacity(dirs.len());
    let mut valid = Vec::with_capacity(dirs.len());
    let mut hits = Vec::with_capacity(dirs.len());
    for (zone, dir) in dirs.iter().enumerate() {
        let ray = Ray {
            origin,
            direction: sensor_pose.transform_vector(dir),
        };
        match cast(&ray, &scene.primitives) {
            Some((s, label)) => {
                let eps = relative_error(
                    scenario.noise_model,
                    scenario.noise_rel,
                    scenario.seed,
                    e.sensor_id.as_str(),
                    scene.step,
                    zone,
                );
                let measured = s * (1.0 + eps);
                let ok = intr.in_range(measured);
                depth_mm.push(if ok { measured * 1000.0 } else { 0.0 });
                valid.push(ok);
                hits.push(if ok { label } else { HitLabel::Miss });
            }
            None => {
                depth_mm.push(0.0);
                valid.push(false);
                hits.push(HitLabel::Miss);
            }
        }
    }
    SimFrame {
        sensor_pose,
        frame: DepthFrame {
            sensor_id: e.sensor_id.clone(),
            step: scene.step,
            timestamp: scene.time,
            depth_mm,
            valid,
        },
        hits,
    }
}

/// One sensor's frame at `step`, with per-zone hit labels.
pub fn raycast_frame(scenario: &Scenario, sensor_id: &str, step: u32) -> Result<SimFrame, SimError> {
    let spec = scenario
        .sensors
        .iter()
        .find(|s| s.extrinsics.sensor_id.as_str() == sensor_id)
        .ok_or_else(|| SimError::UnknownSensor(sensor_id.to_string()))?;
    scenario.validate()?;
    Ok(render(scenario, spec, &scenario.scene_at(step)))
}

pub fn run_scenario(scenario: &Scenario) -> Result<SimOutput, SimError> {
    scenario.validate()?;
    let mut order: Vec<&SensorSpec> = scenario.sensors.iter().collect();
    order.sort_by(|a, b| a.extrinsics.sensor_id.cmp(&b.extrinsics.sensor_id));
    let per_step: Vec<(Vec<SimFrame>, GroundTruth)> = (0..scenario.steps())
        .into_par_iter()
        .map(|k| {
            let scene = scenario.scene_at(k);
            let frames: Vec<SimFrame> = order.iter().map(|s| render(scenario, s, &scene)).collect();
            let hits = frames
                .iter()
                .map(|f| (f.frame.sensor_id.clone(), f.hits.clone()))
                .collect();
            let truth = GroundTruth {
                step: k,
                time: scene.time,
                object_pose: scene.object_pose,
                velocity: scenario.object_trajectory.velocity_at(scene.time),
                hits,
            };
            (frames, truth)
        })
        .collect();
    let mut out = SimOutput {
        frames: Vec::new(),
        truth: Vec::new(),
    };
    for (frames, truth) in per_step {
        out.frames.extend(frames);
        out.truth.push(truth);
    }
    Ok(out)
}
