//! Multizone ToF frames to base-frame point clouds, and robot self-filtering.
//!
//! Each sensor reports an 8×8 grid of ranges. A zone's range is the distance
//! along that zone's ray from the sensor origin, so a valid zone maps to
//! `pose · (direction × range)`. The zone grid uses a square tangent-plane
//! model: zone centers are uniformly spaced on the plane `z = 1` of the sensor
//! frame, over a square whose corner rays sit at half the diagonal field of
//! view from the optical axis (`+z`).

use crate::geometry::{Point3, RigidTransform, Vec3};
use crate::shapes::{Primitive, Ray};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;
use thiserror::Error;

pub const GRID_ROWS: usize = 8;
pub const GRID_COLS: usize = 8;
pub const ZONES: usize = GRID_ROWS * GRID_COLS;

pub const DEFAULT_SELF_FILTER_MARGIN: f64 = 0.02;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SensingError {
    #[error("sensor {sensor}: zone {zone} depth {depth_mm} mm is outside [{min_m}, {max_m}] m")]
    UnitMismatch {
        sensor: SensorId,
        zone: usize,
        depth_mm: f64,
        min_m: f64,
        max_m: f64,
    },
    #[error("no extrinsics for sensor {0}")]
    MissingExtrinsics(SensorId),
    #[error("no pose for link {0}")]
    MissingLinkPose(String),
    #[error("frame for sensor {sensor} has {got} zones, expected {expected}")]
    ZoneCount {
        sensor: SensorId,
        got: usize,
        expected: usize,
    },
    #[error("frames mix steps {0} and {1}")]
    MixedSteps(u32, u32),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("robot primitive {0} must be a sphere or capsule with positive radius")]
    InvalidRobotPrimitive(usize),
}

/// Sensor identifier, cheap to clone into per-point metadata.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SensorId(Arc<str>);

impl SensorId {
    pub fn new(id: &str) -> Self {
        Self(Arc::from(id))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for SensorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for SensorId {
    fn from(s: &str) -> Self {
        Self::new(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TofIntrinsics {
    pub grid_rows: usize,
    pub grid_cols: usize,
    /// Degrees.
    pub diagonal_fov: f64,
    pub min_range: f64,
    pub max_range: f64,
}

impl Default for TofIntrinsics {
    fn default() -> Self {
        Self {
            grid_rows: GRID_ROWS,
            grid_cols: GRID_COLS,
            diagonal_fov: 65.0,
            min_range: 0.02,
            max_range: 4.0,
        }
    }
}

impl TofIntrinsics {
    pub fn validate(&self) -> Result<(), SensingError> {
        if self.grid_rows == 0 || self.grid_cols == 0 {
            return Err(SensingError::InvalidIntrinsics("empty zone grid".into()));
        }
        if !(self.diagonal_fov > 0.0 && self.diagonal_fov < 180.0) {
            return Err(SensingError::InvalidIntrinsics(format!(
                "diagonal fov {} not in (0, 180)",
                self.diagonal_fov
            )));
        }
        if !(self.min_range > 0.0 && self.min_range < self.max_range) {
            return Err(SensingError::InvalidIntrinsics(format!(
                "range [{}, {}] is not 0 < min < max",
                self.min_range, self.max_range
            )));
        }
        Ok(())
    }

    pub fn zones(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    /// Half-width of the square footprint on the `z = 1` plane.
    pub fn tangent_half_width(&self) -> f64 {
        (self.diagonal_fov.to_radians() / 2.0).tan() / std::f64::consts::SQRT_2
    }

    /// Per-axis half-angle of the square field of view, in radians.
    pub fn axis_half_angle(&self) -> f64 {
        self.tangent_half_width().atan()
    }

    pub fn in_range(&self, meters: f64) -> bool {
        meters >= self.min_range && meters <= self.max_range
    }
}

/// Unit ray directions of every zone in the sensor frame, row-major
/// (row index along `+y`, column index along `+x`).
pub fn zone_directions(intr: &TofIntrinsics) -> Vec<Vec3> {
    let w = intr.tangent_half_width();
    let mut dirs = Vec::with_capacity(intr.zones());
    for row in 0..intr.grid_rows {
        let v = w * (2.0 * (row as f64 + 0.5) / intr.grid_rows as f64 - 1.0);
        for col in 0..intr.grid_cols {
            let u = w * (2.0 * (col as f64 + 0.5) / intr.grid_cols as f64 - 1.0);
            dirs.push(Vec3::new(u, v, 1.0).normalize());
        }
    }
    dirs
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TofExtrinsics {
    pub sensor_id: SensorId,
    /// Sensor frame to mount-link frame.
    pub mount_pose: RigidTransform,
    pub link_id: String,
}

pub type LinkPoses = BTreeMap<String, RigidTransform>;
pub type SensorPoses = BTreeMap<SensorId, RigidTransform>;

/// Base-frame pose of every sensor: `base ← link ∘ mount`.
pub fn sensor_poses(extrinsics: &[TofExtrinsics], link_poses: &LinkPoses) -> Result<SensorPoses, SensingError> {
    extrinsics
        .iter()
        .map(|e| {
            let link = link_poses
                .get(&e.link_id)
                .ok_or_else(|| SensingError::MissingLinkPose(e.link_id.clone()))?;
            Ok((e.sensor_id.clone(), link.compose(&e.mount_pose)))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthFrame {
    pub sensor_id: SensorId,
    pub step: u32,
    pub timestamp: f64,
    /// Range along each zone ray, millimeters, row-major.
    pub depth_mm: Vec<f64>,
    pub valid: Vec<bool>,
}

impl DepthFrame {
    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CloudPoint {
    pub position: Point3,
    pub sensor: SensorId,
    pub step: u32,
    /// Stable identifier; subsets keep the id of the point they came from.
    pub id: usize,
    /// Zone of the source frame, when the point came from one.
    pub zone: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<CloudPoint>,
}

impl PointCloud {
    pub fn new(points: Vec<CloudPoint>) -> Self {
        Self { points }
    }

    /// Untagged cloud from bare positions; ids are positions, sensor is empty.
    pub fn from_positions(positions: &[Point3], step: u32) -> Self {
        let sensor = SensorId::new("");
        Self {
            points: positions
                .iter()
                .enumerate()
                .map(|(id, p)| CloudPoint {
                    position: *p,
                    sensor: sensor.clone(),
                    step,
                    id,
                    zone: None,
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn positions(&self) -> Vec<Point3> {
        self.points.iter().map(|p| p.position).collect()
    }

    /// Renumbers ids to positions `0..len`.
    pub fn reindexed(mut self) -> Self {
        for (i, p) in self.points.iter_mut().enumerate() {
            p.id = i;
        }
        self
    }

    /// Points at the given positions, ids preserved.
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        PointCloud {
            points: indices.iter().map(|&i| self.points[i].clone()).collect(),
        }
    }

    pub fn transformed(&self, t: &RigidTransform) -> PointCloud {
        PointCloud {
            points: self
                .points
                .iter()
                .map(|p| CloudPoint {
                    position: t.transform_point(&p.position),
                    ..p.clone()
                })
                .collect(),
        }
    }

    pub fn extend(&mut self, other: PointCloud) {
        self.points.extend(other.points);
    }
}

/// Converts one frame into base-frame points. Invalid zones produce nothing.
pub fn frame_to_points(
    frame: &DepthFrame,
    intr: &TofIntrinsics,
    sensor_pose_in_base: &RigidTransform,
) -> Result<PointCloud, SensingError> {
    let zones = intr.zones();
    if frame.depth_mm.len() != zones || frame.valid.len() != zones {
        return Err(SensingError::ZoneCount {
            sensor: frame.sensor_id.clone(),
            got: frame.depth_mm.len().min(frame.valid.len()),
            expected: zones,
        });
    }
    let dirs = zone_directions(intr);
    let mut points = Vec::with_capacity(frame.valid_count());
    for (zone, dir) in dirs.iter().enumerate() {
        if !frame.valid[zone] {
            continue;
        }
        let depth_mm = frame.depth_mm[zone];
        let meters = depth_mm / 1000.0;
        if !meters.is_finite() || !intr.in_range(meters) {
            return Err(SensingError::UnitMismatch {
                sensor: frame.sensor_id.clone(),
                zone,
                depth_mm,
                min_m: intr.min_range,
                max_m: intr.max_range,
            });
        }
        let local = Point3::from(dir * meters);
        points.push(CloudPoint {
            position: sensor_pose_in_base.transform_point(&local),
            sensor: frame.sensor_id.clone(),
            step: frame.step,
            id: points.len(),
            zone: Some(zone),
        });
    }
    Ok(PointCloud { points })
}

/// Merges frames of one step from sensors with known base-frame poses.
/// Sensors are visited in id order; ids are renumbered over the union.
pub fn merge_posed_frames(
    frames: &[(&DepthFrame, RigidTransform)],
    intr: &TofIntrinsics,
) -> Result<PointCloud, SensingError> {
    let mut sorted: Vec<_> = frames.iter().collect();
    sorted.sort_by(|a, b| a.0.sensor_id.cmp(&b.0.sensor_id));
    if let Some(first) = sorted.first() {
        if let Some(other) = sorted.iter().find(|f| f.0.step != first.0.step) {
            return Err(SensingError::MixedSteps(first.0.step, other.0.step));
        }
    }
    let mut merged = PointCloud::default();
    for (frame, pose) in sorted {
        merged.extend(frame_to_points(frame, intr, pose)?);
    }
    Ok(merged.reindexed())
}

/// `P_k`: the union of all sensors' clouds at one step, in the base frame.
pub fn merge_frames(
    frames: &[DepthFrame],
    extrinsics: &[TofExtrinsics],
    link_poses: &LinkPoses,
    intr: &TofIntrinsics,
) -> Result<PointCloud, SensingError> {
    let by_id: BTreeMap<&SensorId, &TofExtrinsics> = extrinsics.iter().map(|e| (&e.sensor_id, e)).collect();
    let mut posed = Vec::with_capacity(frames.len());
    for f in frames {
        let e = by_id
            .get(&f.sensor_id)
            .ok_or_else(|| SensingError::MissingExtrinsics(f.sensor_id.clone()))?;
        let link = link_poses
            .get(&e.link_id)
            .ok_or_else(|| SensingError::MissingLinkPose(e.link_id.clone()))?;
        posed.push((f, link.compose(&e.mount_pose)));
    }
    merge_posed_frames(&posed, intr)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotPart {
    pub link_id: String,
    /// Geometry in the link frame.
    pub primitive: Primitive,
}

/// The robot's body as spheres and capsules attached to links.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RobotShape {
    pub parts: Vec<RobotPart>,
}

impl RobotShape {
    pub fn validate(&self) -> Result<(), SensingError> {
        for (i, part) in self.parts.iter().enumerate() {
            match part.primitive.radius() {
                Some(r) if r > 0.0 => {}
                _ => return Err(SensingError::InvalidRobotPrimitive(i)),
            }
        }
        Ok(())
    }

    /// Primitives posed in the base frame.
    pub fn posed(&self, link_poses: &LinkPoses) -> Result<Vec<Primitive>, SensingError> {
        self.parts
            .iter()
            .map(|part| {
                let pose = link_poses
                    .get(&part.link_id)
                    .ok_or_else(|| SensingError::MissingLinkPose(part.link_id.clone()))?;
                Ok(part.primitive.transformed(pose))
            })
            .collect()
    }
}

/// Removes points that belong to the robot body.
pub fn self_filter(
    cloud: &PointCloud,
    shape: &RobotShape,
    extrinsics: &[TofExtrinsics],
    link_poses: &LinkPoses,
    margin: f64,
) -> Result<PointCloud, SensingError> {
    let poses = sensor_poses(extrinsics, link_poses)?;
    let body = shape.posed(link_poses)?;
    Ok(self_filter_posed(cloud, &body, &poses, margin))
}

/// Self-filter against already posed robot primitives.
///
/// A point is dropped when the ray from its sensor toward it meets the robot
/// no farther than `margin` beyond the measured range, or when the point
/// itself lies within `margin` of (or inside) a robot primitive. Points from
/// sensors with no known pose get only the proximity test.
pub fn self_filter_posed(
    cloud: &PointCloud,
    body: &[Primitive],
    sensor_poses: &SensorPoses,
    margin: f64,
) -> PointCloud {
    let margin = margin.max(0.0);
    if body.is_empty() {
        return cloud.clone();
    }
    let keep = |p: &CloudPoint| -> bool {
        if body.iter().any(|prim| prim.signed_distance(&p.position) <= margin) {
            return false;
        }
        let Some(pose) = sensor_poses.get(&p.sensor) else {
            return true;
        };
        let origin = Point3::from(*pose.translation());
        let offset = p.position - origin;
        let range = offset.norm();
        if range <= 0.0 {
            return true;
        }
        let ray = Ray {
            origin,
            direction: offset / range,
        };
        !body
            .iter()
            .any(|prim| prim.intersect(&ray).is_some_and(|s| s <= range + margin))
    };
    PointCloud {
        points: cloud.points.iter().filter(|p| keep(p)).cloned().collect(),
    }
}
