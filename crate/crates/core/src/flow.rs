//! Two-frame scene flow: cluster the merged clouds, register each cluster's
//! older points onto its newer points, and gate the result.
//!
//! Per cluster the estimator runs a small state machine:
//!
//! 1. Skip the cluster when both frame subsets have fewer than `n_min` points.
//! 2. Register the `k−n` subset onto the `k` subset with ICP.
//! 3. If the fitness exceeds `gamma`, the mean displacement `‖D‖₂,₁ / s`
//!    decides between `Stationary` (below `delta`) and `Moving`, whose
//!    per-point velocities are `D / (n·ΔT)`.
//! 4. Otherwise drop the inlier pairs and register the remainder again, at
//!    most `max_retry` times and while both sides keep ≥ 3 points. What is left
//!    after that is `Unclassified`.
//!
//! Baseline mode turns off steps 1, 3 and 4: every cluster is `Moving`
//! straight from its first registration.

use crate::clustering::{hdbscan, ClusterError, ClusterParams, NOISE};
use crate::geometry::{RigidTransform, Vec3};
use crate::icp::{displacement_matrix, icp, mean_l21, remove_inliers, IcpParams, IcpResult};
use crate::sensing::PointCloud;
use nalgebra::Matrix3xX;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlowError {
    #[error("frame mismatch: {0}")]
    FrameMismatch(String),
    #[error("invalid flow parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowParams {
    /// Frame gap.
    pub n: u32,
    /// Sampling period, seconds.
    pub delta_t: f64,
    pub n_min: usize,
    /// Fitness threshold.
    pub gamma: f64,
    /// Mean-displacement threshold, meters.
    pub delta: f64,
    pub max_retry: usize,
    pub baseline: bool,
}

impl Default for FlowParams {
    fn default() -> Self {
        Self {
            n: 8,
            delta_t: 1.0 / 15.0,
            n_min: 60,
            gamma: 0.7,
            delta: 0.04,
            max_retry: 5,
            baseline: false,
        }
    }
}

impl FlowParams {
    pub fn validate(&self) -> Result<(), FlowError> {
        let bad = |m: &str| Err(FlowError::InvalidParams(m.into()));
        if self.n < 1 {
            return bad("n must be ≥ 1");
        }
        if !(self.delta_t > 0.0) {
            return bad("delta_t must be > 0");
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1]");
        }
        if !(self.delta > 0.0) {
            return bad("delta must be > 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Classification {
    Stationary,
    Moving,
    Unclassified,
}

impl Classification {
    pub fn as_str(&self) -> &'static str {
        match self {
            Classification::Stationary => "Stationary",
            Classification::Moving => "Moving",
            Classification::Unclassified => "Unclassified",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterReport {
    pub cluster_id: usize,
    pub classification: Classification,
    pub transform: RigidTransform,
    pub fitness: f64,
    pub mean_displacement: f64,
    /// Surviving frame-`k−n` points the final registration used.
    pub points_kn: PointCloud,
    /// Surviving frame-`k` points.
    pub points_k: PointCloud,
    /// One per `points_kn` entry when `Moving`, else empty.
    pub velocities: Vec<Vec3>,
    pub retry_rounds: usize,
    /// Cluster membership before any inlier removal.
    pub size_k: usize,
    pub size_kn: usize,
    pub note: Option<String>,
}

impl ClusterReport {
    pub fn member_count(&self) -> usize {
        self.size_k + self.size_kn
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub step_kn: u32,
    pub step_k: u32,
    pub clusters: Vec<ClusterReport>,
    pub noise_points: usize,
    /// Points of clusters below `n_min` on both sides.
    pub skipped_points: usize,
    pub total_points: usize,
}

impl FlowField {
    pub fn moving(&self) -> impl Iterator<Item = &ClusterReport> {
        self.clusters
            .iter()
            .filter(|c| c.classification == Classification::Moving)
    }

    pub fn count_points(&self, class: Classification) -> usize {
        self.clusters
            .iter()
            .filter(|c| c.classification == class)
            .map(|c| c.member_count())
            .sum()
    }
}

/// `D / (n·ΔT)`, column by column.
pub fn velocity_field(d: &Matrix3xX<f64>, n: u32, delta_t: f64) -> Vec<Vec3> {
    let scale = 1.0 / (n as f64 * delta_t);
    d.column_iter().map(|c| Vec3::new(c[0], c[1], c[2]) * scale).collect()
}

fn report_from(
    result: &IcpResult,
    points_k: PointCloud,
    points_kn: PointCloud,
    class: Classification,
    params: &FlowParams,
) -> ClusterReport {
    let d = displacement_matrix(&points_kn.positions(), &result.transform);
    let velocities = if class == Classification::Moving {
        velocity_field(&d, params.n, params.delta_t)
    } else {
        Vec::new()
    };
    ClusterReport {
        cluster_id: 0,
        classification: class,
        transform: result.transform,
        fitness: result.fitness,
        mean_displacement: mean_l21(&d),
        points_kn,
        points_k,
        velocities,
        retry_rounds: 0,
        size_k: 0,
        size_kn: 0,
        note: None,
    }
}

fn unclassified(points_k: PointCloud, points_kn: PointCloud, last: Option<&IcpResult>, note: String) -> ClusterReport {
    ClusterReport {
        cluster_id: 0,
        classification: Classification::Unclassified,
        transform: last.map(|r| r.transform).unwrap_or_default(),
        fitness: last.map(|r| r.fitness).unwrap_or(0.0),
        mean_displacement: 0.0,
        points_kn,
        points_k,
        velocities: Vec::new(),
        retry_rounds: 0,
        size_k: 0,
        size_kn: 0,
        note: Some(note),
    }
}

/// Gate/retry state machine for one cluster's two frame subsets.
pub fn classify_cluster(
    subset_k: &PointCloud,
    subset_kn: &PointCloud,
    params: &FlowParams,
    icp_params: &IcpParams,
) -> ClusterReport {
    let mut k = subset_k.clone();
    let mut kn = subset_kn.clone();
    let mut rounds = 0;
    let mut last: Option<IcpResult> = None;
    let mut report = loop {
        let result = match icp(&k, &kn, icp_params, &RigidTransform::identity()) {
            Ok(r) => r,
            Err(e) => break unclassified(k, kn, last.as_ref(), e.to_string()),
        };
        if result.degenerate {
            break unclassified(k, kn, Some(&result), "no correspondences within threshold".into());
        }
        if params.baseline {
            break report_from(&result, k, kn, Classification::Moving, params);
        }
        if result.fitness > params.gamma {
            let d = displacement_matrix(&kn.positions(), &result.transform);
            let class = if mean_l21(&d) < params.delta {
                Classification::Stationary
            } else {
                Classification::Moving
            };
            break report_from(&result, k, kn, class, params);
        }
        if rounds >= params.max_retry {
            break unclassified(
                k,
                kn,
                Some(&result),
                format!("fitness {:.3} after {rounds} retries", result.fitness),
            );
        }
        let (rest_k, rest_kn) = remove_inliers(&k, &kn, &result);
        rounds += 1;
        if rest_k.len() < 3 || rest_kn.len() < 3 {
            break unclassified(
                rest_k,
                rest_kn,
                Some(&result),
                "too few points left after inlier removal".into(),
            );
        }
        k = rest_k;
        kn = rest_kn;
        last = Some(result);
    };
    report.retry_rounds = rounds;
    report.size_k = subset_k.len();
    report.size_kn = subset_kn.len();
    report
}

fn single_step(cloud: &PointCloud, which: &str) -> Result<Option<u32>, FlowError> {
    let mut steps = cloud.points.iter().map(|p| p.step);
    let Some(first) = steps.next() else {
        return Ok(None);
    };
    if let Some(other) = steps.find(|s| *s != first) {
        return Err(FlowError::FrameMismatch(format!(
            "{which} mixes steps {first} and {other}"
        )));
    }
    Ok(Some(first))
}

/// Scene flow between `p_kn` (older) and `p_k` (newer), both in the base frame.
pub fn estimate_flow(
    p_k: &PointCloud,
    p_kn: &PointCloud,
    params: &FlowParams,
    cluster_params: &ClusterParams,
    icp_params: &IcpParams,
) -> Result<FlowField, FlowError> {
    params.validate()?;
    icp_params
        .validate()
        .map_err(|e| FlowError::InvalidParams(e.to_string()))?;
    let step_k = single_step(p_k, "P_k")?;
    let step_kn = single_step(p_kn, "P_k-n")?;
    let (step_k, step_kn) = match (step_k, step_kn) {
        (Some(a), Some(b)) if a != b + params.n => {
            return Err(FlowError::FrameMismatch(format!(
                "steps {b} and {a} are not {} apart",
                params.n
            )));
        }
        (Some(a), Some(b)) => (a, b),
        (Some(a), None) => (a, a.saturating_sub(params.n)),
        (None, Some(b)) => (b + params.n, b),
        (None, None) => (params.n, 0),
    };

    let mut merged = p_k.positions();
    merged.extend(p_kn.positions());
    let split = p_k.len();
    let labels = hdbscan(&merged, cluster_params)?;

    let mut members: Vec<(Vec<usize>, Vec<usize>)> = vec![(Vec::new(), Vec::new()); labels.n_clusters];
    let mut noise_points = 0;
    for (i, &l) in labels.labels.iter().enumerate() {
        if l == NOISE {
            noise_points += 1;
        } else if i < split {
            members[l as usize].0.push(i);
        } else {
            members[l as usize].1.push(i - split);
        }
    }

    let mut skipped_points = 0;
    let mut work = Vec::new();
    for (id, (mk, mkn)) in members.into_iter().enumerate() {
        if !params.baseline && mk.len() < params.n_min && mkn.len() < params.n_min {
            skipped_points += mk.len() + mkn.len();
            continue;
        }
        work.push((id, p_k.select(&mk), p_kn.select(&mkn)));
    }
    let clusters: Vec<ClusterReport> = work
        .into_par_iter()
        .map(|(id, sk, skn)| {
            let mut r = classify_cluster(&sk, &skn, params, icp_params);
            r.cluster_id = id;
            r
        })
        .collect();

    Ok(FlowField {
        step_kn,
        step_k,
        clusters,
        noise_points,
        skipped_points,
        total_points: p_k.len() + p_kn.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Point3;
    use crate::sensing::PointCloud;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn object(seed: u64, n: usize) -> Vec<Point3> {
        // Points on an ellipsoid shell, roughly torso-sized.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let v = Vec3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                )
                .normalize();
                Point3::new(0.2 * v.x, 0.75 + 0.12 * v.y, 0.6 + 0.3 * v.z)
            })
            .collect()
    }

    fn flow_of(k: &[Point3], kn: &[Point3], params: &FlowParams) -> FlowField {
        estimate_flow(
            &PointCloud::from_positions(k, params.n),
            &PointCloud::from_positions(kn, 0),
            params,
            &ClusterParams::default(),
            &IcpParams::default(),
        )
        .unwrap()
    }

    #[test]
    fn static_object_is_stationary() {
        let pts = object(1, 200);
        let f = flow_of(&pts, &pts, &FlowParams::default());
        assert_eq!(f.clusters.len(), 1);
        let c = &f.clusters[0];
        assert_eq!(c.classification, Classification::Stationary);
        assert_eq!(c.fitness, 1.0);
        assert_eq!(c.mean_displacement, 0.0);
        assert!(c.velocities.is_empty());
    }

    #[test]
    fn translated_object_moves_at_analytic_speed() {
        let kn = object(2, 200);
        let shift = Vec3::new(0.0, -0.1, 0.0);
        let k: Vec<_> = kn.iter().map(|p| p + shift).collect();
        let f = flow_of(&k, &kn, &FlowParams::default());
        let moving: Vec<_> = f.moving().collect();
        assert_eq!(moving.len(), 1);
        let c = moving[0];
        assert_eq!(c.velocities.len(), c.points_kn.len());
        // 0.1 m over 8 frames at 15 Hz.
        let expected = Vec3::new(0.0, -0.1 * 15.0 / 8.0, 0.0);
        for v in &c.velocities {
            assert!((v - expected).norm() < 1e-6, "{v:?}");
        }
    }

    #[test]
    fn frame_mismatch_detected() {
        let pts = object(3, 50);
        let r = estimate_flow(
            &PointCloud::from_positions(&pts, 5),
            &PointCloud::from_positions(&pts, 0),
            &FlowParams::default(),
            &ClusterParams::default(),
            &IcpParams::default(),
        );
        assert!(matches!(r, Err(FlowError::FrameMismatch(_))));
    }

    #[test]
    fn velocity_field_cases() {
        assert!(velocity_field(&Matrix3xX::zeros(3), 8, 1.0 / 15.0)
            .iter()
            .all(|v| v.norm() == 0.0));
        let d = Matrix3xX::from_column_slice(&[0.08, 0.0, 0.0]);
        let v = velocity_field(&d, 8, 1.0 / 15.0);
        assert!((v[0] - Vec3::new(0.15, 0.0, 0.0)).norm() < 1e-12);
        let v2 = velocity_field(&(d * 2.0), 8, 1.0 / 15.0);
        assert!((v2[0] - v[0] * 2.0).norm() < 1e-15);
    }

    fn report_with(fitness_target: f64, shift: f64, max_retry: usize) -> ClusterReport {
        // Build a pair whose registration has the requested inlier fraction:
        // a shared core plus extra source points far outside the threshold.
        let core = object(4, 90);
        let n_out = ((1.0 - fitness_target) / fitness_target * 90.0).round() as usize;
        let mut kn = core.clone();
        kn.extend(object(5, n_out).into_iter().map(|p| p + Vec3::new(2.0, 0.0, 0.0)));
        let k: Vec<_> = core.iter().map(|p| p + Vec3::new(shift, 0.0, 0.0)).collect();
        let params = FlowParams {
            max_retry,
            ..Default::default()
        };
        classify_cluster(
            &PointCloud::from_positions(&k, 8),
            &PointCloud::from_positions(&kn, 0),
            &params,
            &IcpParams::default(),
        )
    }

    #[test]
    fn classify_gates() {
        let r = report_with(0.9, 0.01, 5);
        assert!((r.fitness - 0.9).abs() < 0.01);
        assert_eq!(r.classification, Classification::Stationary);
        let r = report_with(0.9, 0.08, 5);
        assert_eq!(r.classification, Classification::Moving);
        assert!(r.mean_displacement >= 0.04);
        let r = report_with(0.4, 0.01, 0);
        assert_eq!(r.classification, Classification::Unclassified);
        assert_eq!(r.retry_rounds, 0);
    }

    #[test]
    fn points_are_conserved() {
        let a = object(6, 150);
        let b: Vec<_> = object(7, 15)
            .into_iter()
            .map(|p| p + Vec3::new(1.5, 0.0, 0.0))
            .collect();
        let mut kn = a.clone();
        kn.extend(b.iter().copied());
        let mut k: Vec<_> = a.iter().map(|p| p + Vec3::new(0.0, -0.06, 0.0)).collect();
        k.extend(b);
        k.push(Point3::new(9.0, 9.0, 9.0));
        let f = flow_of(&k, &kn, &FlowParams::default());
        let in_reports: usize = f.clusters.iter().map(|c| c.member_count()).sum();
        assert_eq!(in_reports + f.noise_points + f.skipped_points, f.total_points);
        assert!(f.noise_points >= 1);
    }
}
