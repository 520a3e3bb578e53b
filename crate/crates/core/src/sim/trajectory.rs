//! Piecewise-linear rigid paths.

use super::SimError;
use crate::geometry::{RigidTransform, Vec3};
use nalgebra::{Rotation3, UnitQuaternion};
use serde::{Deserialize, Serialize};

/// Times closer than this to a waypoint count as the waypoint itself, so
/// sample times `k / rate` land on segment boundaries deterministically.
pub const TIME_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub t: f64,
    pub pose: RigidTransform,
}

/// Poses at strictly increasing times starting at 0. Translation is linear
/// between waypoints, rotation is slerped, and the last pose is held.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Trajectory {
    pub waypoints: Vec<Waypoint>,
}

impl Trajectory {
    pub fn fixed(pose: RigidTransform) -> Self {
        Self {
            waypoints: vec![Waypoint { t: 0.0, pose }],
        }
    }

    /// Pure translation through `points`, keeping `rotation` throughout.
    pub fn translation_path(rotation: Rotation3<f64>, points: &[(f64, Vec3)]) -> Self {
        Self {
            waypoints: points
                .iter()
                .map(|&(t, p)| Waypoint {
                    t,
                    pose: RigidTransform::from_parts(rotation, p),
                })
                .collect(),
        }
    }

    pub fn validate(&self, what: &str) -> Result<(), SimError> {
        let first = self
            .waypoints
            .first()
            .ok_or_else(|| SimError::Config(format!("{what}: empty trajectory")))?;
        if first.t.abs() > TIME_EPS {
            return Err(SimError::Config(format!(
                "{what}: first waypoint at t={} instead of 0",
                first.t
            )));
        }
        for w in self.waypoints.windows(2) {
            if !(w[1].t > w[0].t + TIME_EPS) {
                return Err(SimError::Config(format!(
                    "{what}: waypoint times {} and {} are not increasing",
                    w[0].t, w[1].t
                )));
            }
        }
        Ok(())
    }

    /// Index of the segment `[t_i, t_{i+1})` holding `t`; `None` past the end.
    fn segment(&self, t: f64) -> Option<usize> {
        let i = self.waypoints.iter().rposition(|w| w.t <= t + TIME_EPS).unwrap_or(0);
        (i + 1 < self.waypoints.len()).then_some(i)
    }

    pub fn pose_at(&self, t: f64) -> RigidTransform {
        let Some(i) = self.segment(t) else {
            return self.waypoints.last().map(|w| w.pose).unwrap_or_default();
        };
        let (a, b) = (&self.waypoints[i], &self.waypoints[i + 1]);
        let h = ((t - a.t) / (b.t - a.t)).clamp(0.0, 1.0);
        if h <= 0.0 {
            return a.pose;
        }
        let p = a.pose.translation() + (b.pose.translation() - a.pose.translation()) * h;
        let qa = UnitQuaternion::from_matrix(a.pose.rotation());
        let qb = UnitQuaternion::from_matrix(b.pose.rotation());
        let r = if qa.angle_to(&qb) < 1e-15 {
            *a.pose.rotation()
        } else {
            qa.slerp(&qb, h).to_rotation_matrix().into_inner()
        };
        RigidTransform::from_parts(Rotation3::from_matrix_unchecked(r), p)
    }

    /// Right derivative of the translation at `t`.
    pub fn velocity_at(&self, t: f64) -> Vec3 {
        match self.segment(t) {
            Some(i) => {
                let (a, b) = (&self.waypoints[i], &self.waypoints[i + 1]);
                (b.pose.translation() - a.pose.translation()) / (b.t - a.t)
            }
            None => Vec3::zeros(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path() -> Trajectory {
        Trajectory::translation_path(
            Rotation3::identity(),
            &[
                (0.0, Vec3::new(0.0, 0.75, 0.0)),
                (0.4, Vec3::new(0.0, 0.75, 0.0)),
                (2.4, Vec3::new(0.0, 0.45, 0.0)),
            ],
        )
    }

    #[test]
    fn hold_move_hold() {
        let p = path();
        assert_eq!(p.velocity_at(0.0), Vec3::zeros());
        assert!((p.velocity_at(0.4) - Vec3::new(0.0, -0.15, 0.0)).norm() < 1e-12);
        assert!((p.velocity_at(36.0 / 15.0)).norm() == 0.0);
        assert!((p.pose_at(1.4).translation().y - 0.6).abs() < 1e-12);
        assert!((p.pose_at(9.0).translation().y - 0.45).abs() < 1e-15);
    }

    #[test]
    fn velocity_integrates_to_displacement() {
        let p = path();
        let rate = 15.0;
        let mut y = p.pose_at(0.0).translation().y;
        for k in 0..60 {
            y += p.velocity_at(k as f64 / rate).y / rate;
        }
        assert!((y - 0.45).abs() < 1e-9);
    }

    #[test]
    fn rejects_bad_times() {
        let mut p = path();
        p.waypoints[2].t = 0.3;
        assert!(p.validate("object").is_err());
        p.waypoints.clear();
        assert!(p.validate("object").is_err());
        assert!(path().validate("object").is_ok());
    }

    #[test]
    fn slerps_rotation() {
        let t = Trajectory {
            waypoints: vec![
                Waypoint {
                    t: 0.0,
                    pose: RigidTransform::identity(),
                },
                Waypoint {
                    t: 1.0,
                    pose: RigidTransform::from_yaw(1.0, Vec3::zeros()),
                },
            ],
        };
        assert!((t.pose_at(0.5).angle() - 0.5).abs() < 1e-12);
    }
}
