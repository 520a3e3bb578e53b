//! Point-to-point ICP with a correspondence distance threshold.
//!
//! Each iteration matches every source point to its nearest target point and
//! re-solves the rigid transform over the matches that lie within the
//! threshold `τ`. The tracked residual is the truncated RMS
//! `sqrt(mean(min(d², τ²)))`, which the alternation can never increase.

use crate::geometry::{kabsch_align_pairs, Point3, RigidTransform};
use crate::sensing::PointCloud;
use crate::spatial::SpatialIndex;
use nalgebra::Matrix3xX;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IcpError {
    #[error("degenerate cluster: {source_len} source / {target_len} target points (need ≥ 3 each)")]
    DegenerateCluster { source_len: usize, target_len: usize },
    #[error("invalid ICP parameters: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IcpParams {
    pub max_iterations: usize,
    /// Stop once the residual changes by less than this (meters).
    pub convergence_eps: f64,
    /// `τ`: correspondences farther than this are not inliers (meters).
    pub correspondence_threshold: f64,
}

impl Default for IcpParams {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            convergence_eps: 1e-6,
            correspondence_threshold: 0.10,
        }
    }
}

impl IcpParams {
    pub fn validate(&self) -> Result<(), IcpError> {
        if self.max_iterations < 1 {
            return Err(IcpError::InvalidParams("max_iterations must be ≥ 1".into()));
        }
        if !(self.correspondence_threshold > 0.0) {
            return Err(IcpError::InvalidParams("correspondence threshold must be > 0".into()));
        }
        if !(self.convergence_eps >= 0.0) {
            return Err(IcpError::InvalidParams("convergence_eps must be ≥ 0".into()));
        }
        Ok(())
    }
}

/// Source position, target position, distance after alignment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InlierPair {
    pub source: usize,
    pub target: usize,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IcpResult {
    /// Maps source (frame `k−n`) points toward the target (frame `k`).
    pub transform: RigidTransform,
    /// `|inlier_pairs| / |source|`.
    pub fitness: f64,
    pub inlier_pairs: Vec<InlierPair>,
    /// RMS distance over the final inliers.
    pub rms_residual: f64,
    pub iterations_used: usize,
    /// Truncated RMS before the first update and after each iteration.
    pub residual_history: Vec<f64>,
    /// No source point ever came within `τ` of the target.
    pub degenerate: bool,
}

struct Matching {
    pairs: Vec<InlierPair>,
    truncated_rms: f64,
}

fn match_points(index: &SpatialIndex, source: &[Point3], t: &RigidTransform, tau: f64) -> Matching {
    let mut pairs = Vec::with_capacity(source.len());
    let mut cost = 0.0;
    for (i, s) in source.iter().enumerate() {
        // The index is non-empty by precondition.
        let (j, d) = index
            .nearest(&t.transform_point(s))
            .unwrap_or((usize::MAX, f64::INFINITY));
        if d <= tau {
            pairs.push(InlierPair {
                source: i,
                target: j,
                distance: d,
            });
            cost += d * d;
        } else {
            cost += tau * tau;
        }
    }
    Matching {
        pairs,
        truncated_rms: (cost / source.len() as f64).sqrt(),
    }
}

/// ICP over bare point sets; see [`icp`].
pub fn icp_points(
    target: &[Point3],
    source: &[Point3],
    params: &IcpParams,
    initial: &RigidTransform,
) -> Result<IcpResult, IcpError> {
    params.validate()?;
    if source.len() < 3 || target.len() < 3 {
        return Err(IcpError::DegenerateCluster {
            source_len: source.len(),
            target_len: target.len(),
        });
    }
    let tau = params.correspondence_threshold;
    let index = SpatialIndex::new(target);
    let mut transform = *initial;
    let mut matching = match_points(&index, source, &transform, tau);
    let mut history = vec![matching.truncated_rms];
    let mut iterations = 0;
    let mut ever_matched = !matching.pairs.is_empty();

    while iterations < params.max_iterations && matching.pairs.len() >= 3 && matching.truncated_rms > 0.0 {
        let pairs = matching.pairs.iter().map(|p| (source[p.source], target[p.target]));
        let Ok(next) = kabsch_align_pairs(pairs) else {
            break;
        };
        let next_matching = match_points(&index, source, &next, tau);
        // Rounding can make a converged solve marginally worse; keep the old one.
        if next_matching.truncated_rms > matching.truncated_rms {
            break;
        }
        iterations += 1;
        let prev = matching.truncated_rms;
        transform = next;
        matching = next_matching;
        history.push(matching.truncated_rms);
        ever_matched |= !matching.pairs.is_empty();
        if (prev - matching.truncated_rms).abs() < params.convergence_eps {
            break;
        }
    }

    if !ever_matched {
        return Ok(IcpResult {
            transform: RigidTransform::identity(),
            fitness: 0.0,
            inlier_pairs: Vec::new(),
            rms_residual: 0.0,
            iterations_used: iterations,
            residual_history: history,
            degenerate: true,
        });
    }

    let rms_residual = if matching.pairs.is_empty() {
        0.0
    } else {
        (matching.pairs.iter().map(|p| p.distance * p.distance).sum::<f64>() / matching.pairs.len() as f64).sqrt()
    };
    Ok(IcpResult {
        transform,
        fitness: matching.pairs.len() as f64 / source.len() as f64,
        inlier_pairs: matching.pairs,
        rms_residual,
        iterations_used: iterations,
        residual_history: history,
        degenerate: false,
    })
}

/// Registers `source` (frame `k−n` points) onto `target` (frame `k` points).
pub fn icp(
    target: &PointCloud,
    source: &PointCloud,
    params: &IcpParams,
    initial: &RigidTransform,
) -> Result<IcpResult, IcpError> {
    icp_points(&target.positions(), &source.positions(), params, initial)
}

/// Drops every matched source point from `cluster_kn` and every matched
/// target point from `cluster_k`. Returns `(cluster_k, cluster_kn)`.
pub fn remove_inliers(cluster_k: &PointCloud, cluster_kn: &PointCloud, result: &IcpResult) -> (PointCloud, PointCloud) {
    let mut drop_k = vec![false; cluster_k.len()];
    let mut drop_kn = vec![false; cluster_kn.len()];
    for p in &result.inlier_pairs {
        if let Some(d) = drop_kn.get_mut(p.source) {
            *d = true;
        }
        if let Some(d) = drop_k.get_mut(p.target) {
            *d = true;
        }
    }
    let keep = |cloud: &PointCloud, drop: &[bool]| PointCloud {
        points: cloud
            .points
            .iter()
            .zip(drop)
            .filter(|(_, d)| !**d)
            .map(|(p, _)| p.clone())
            .collect(),
    };
    (keep(cluster_k, &drop_k), keep(cluster_kn, &drop_kn))
}

/// Columns `T·pᵢ − pᵢ`.
pub fn displacement_matrix(source: &[Point3], transform: &RigidTransform) -> Matrix3xX<f64> {
    Matrix3xX::from_iterator(
        source.len(),
        source.iter().flat_map(|p| {
            let d = transform.transform_point(p) - p;
            [d.x, d.y, d.z]
        }),
    )
}

/// `‖D‖₂,₁ / s`: mean column norm.
pub fn mean_l21(d: &Matrix3xX<f64>) -> f64 {
    if d.ncols() == 0 {
        return 0.0;
    }
    d.column_iter().map(|c| c.norm()).sum::<f64>() / d.ncols() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    fn cloud(seed: u64, n: usize, extent: [f64; 3]) -> Vec<Point3> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                Point3::new(
                    rng.random_range(-extent[0]..extent[0]),
                    rng.random_range(-extent[1]..extent[1]),
                    rng.random_range(-extent[2]..extent[2]),
                )
            })
            .collect()
    }

    #[test]
    fn identical_clouds() {
        let pts = PointCloud::from_positions(&cloud(1, 80, [0.3, 0.2, 0.4]), 0);
        let r = icp(&pts, &pts, &IcpParams::default(), &RigidTransform::identity()).unwrap();
        assert_eq!(r.fitness, 1.0);
        assert_eq!(r.rms_residual, 0.0);
        assert!((r.transform.rotation() - nalgebra::Matrix3::identity()).abs().max() < 1e-12);
        assert!(r.transform.translation().norm() < 1e-12);
    }

    #[test]
    fn recovers_small_translation() {
        let src = cloud(2, 120, [0.3, 0.2, 0.4]);
        let shift = Vec3::new(0.0, -0.02, 0.0);
        let dst: Vec<_> = src.iter().map(|p| p + shift).collect();
        let r = icp_points(&dst, &src, &IcpParams::default(), &RigidTransform::identity()).unwrap();
        assert!((r.transform.translation() - shift).norm() < 1e-9);
        assert_eq!(r.fitness, 1.0);
    }

    #[test]
    fn disjoint_objects_are_degenerate() {
        let src = cloud(3, 50, [0.1, 0.1, 0.1]);
        let dst: Vec<_> = src.iter().map(|p| p + Vec3::new(1.0, 0.0, 0.0)).collect();
        let r = icp_points(&dst, &src, &IcpParams::default(), &RigidTransform::identity()).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.fitness, 0.0);
        assert_eq!(r.transform, RigidTransform::identity());
    }

    #[test]
    fn too_few_points_error() {
        let pts = cloud(4, 2, [1.0; 3]);
        let more = cloud(5, 10, [1.0; 3]);
        assert!(matches!(
            icp_points(&more, &pts, &IcpParams::default(), &RigidTransform::identity()),
            Err(IcpError::DegenerateCluster { source_len: 2, .. })
        ));
    }

    #[test]
    fn remove_inliers_all_and_none() {
        let pts = PointCloud::from_positions(&cloud(6, 40, [0.3; 3]), 0);
        let r = icp(&pts, &pts, &IcpParams::default(), &RigidTransform::identity()).unwrap();
        let (k, kn) = remove_inliers(&pts, &pts, &r);
        assert!(k.is_empty() && kn.is_empty());

        let far = pts.transformed(&RigidTransform::from_translation(Vec3::new(3.0, 0.0, 0.0)));
        let r = icp(&far, &pts, &IcpParams::default(), &RigidTransform::identity()).unwrap();
        assert_eq!(r.fitness, 0.0);
        let (k, kn) = remove_inliers(&far, &pts, &r);
        assert_eq!((k, kn), (far, pts));
    }

    #[test]
    fn remove_inliers_keeps_displaced_points() {
        // 50 static points plus 50 points displaced by 0.3 m in frame k.
        let static_pts = cloud(7, 50, [0.3, 0.02, 0.3]);
        let moving_pts: Vec<_> = cloud(8, 50, [0.1, 0.1, 0.1])
            .into_iter()
            .map(|p| p + Vec3::new(0.0, 0.5, 0.0))
            .collect();
        let kn_pts: Vec<_> = static_pts.iter().chain(&moving_pts).copied().collect();
        let k_pts: Vec<_> = static_pts
            .iter()
            .copied()
            .chain(moving_pts.iter().map(|p| p + Vec3::new(0.0, 0.3, 0.0)))
            .collect();
        let kn = PointCloud::from_positions(&kn_pts, 0);
        let k = PointCloud::from_positions(&k_pts, 8);
        let r = icp(&k, &kn, &IcpParams::default(), &RigidTransform::identity()).unwrap();
        let (rest_k, rest_kn) = remove_inliers(&k, &kn, &r);
        assert!(
            rest_kn.points.iter().all(|p| p.id >= 50),
            "static source points must be removed"
        );
        assert!(rest_k.points.iter().all(|p| p.id >= 50));
        assert_eq!(rest_kn.len(), kn.len() - r.inlier_pairs.len());
        assert!(rest_kn.len() >= 40, "most displaced points survive: {}", rest_kn.len());
    }

    #[test]
    fn displacement_cases() {
        let pts = [Point3::new(1.0, 0.0, 0.0), Point3::new(0.2, 0.3, 0.4)];
        assert_eq!(displacement_matrix(&pts, &RigidTransform::identity()).abs().max(), 0.0);
        let d = displacement_matrix(&pts, &RigidTransform::from_translation(Vec3::new(0.05, 0.0, 0.0)));
        for c in d.column_iter() {
            assert!((c - Vec3::new(0.05, 0.0, 0.0)).norm() < 1e-15);
        }
        let d = displacement_matrix(&pts[..1], &RigidTransform::from_yaw(FRAC_PI_2, Vec3::zeros()));
        assert!((d.column(0) - Vec3::new(-1.0, 1.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn mean_l21_cases() {
        assert_eq!(mean_l21(&Matrix3xX::zeros(4)), 0.0);
        let d = Matrix3xX::from_fn(5, |r, _| [0.03, 0.04, 0.0][r]);
        assert!((mean_l21(&d) - 0.05).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let d: Matrix3xX<f64> = Matrix3xX::from_fn(7, |_, _| rng.random_range(-1.0..1.0));
        let mut direct = 0.0f64;
        for c in 0..7 {
            direct += (d[(0, c)] * d[(0, c)] + d[(1, c)] * d[(1, c)] + d[(2, c)] * d[(2, c)]).sqrt();
        }
        assert!((mean_l21(&d) - direct / 7.0).abs() < 1e-15);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn residual_never_increases(seed in 0u64..10_000, shift in prop::array::uniform3(-0.15f64..0.15), yaw in -0.3f64..0.3) {
            let src = cloud(seed, 100, [0.3, 0.2, 0.25]);
            let g = RigidTransform::from_yaw(yaw, Vec3::from(shift));
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
            let dst: Vec<_> = src.iter()
                .map(|p| g.transform_point(p) + Vec3::new(rng.random_range(-0.02..0.02), 0.0, rng.random_range(-0.02..0.02)))
                .collect();
            let r = icp_points(&dst, &src, &IcpParams::default(), &RigidTransform::identity()).unwrap();
            for w in r.residual_history.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-12, "{:?}", r.residual_history);
            }
            prop_assert_eq!((r.fitness * src.len() as f64).round() as usize, r.inlier_pairs.len());
            prop_assert!(r.inlier_pairs.iter().all(|p| p.distance <= 0.10));
        }

        #[test]
        fn remove_inliers_never_grows(seed in 0u64..10_000, shift in -0.3f64..0.3) {
            let src = PointCloud::from_positions(&cloud(seed, 60, [0.2; 3]), 0);
            let dst = src.transformed(&RigidTransform::from_translation(Vec3::new(shift, 0.0, 0.0)));
            let r = icp(&dst, &src, &IcpParams::default(), &RigidTransform::identity()).unwrap();
            let (k, kn) = remove_inliers(&dst, &src, &r);
            prop_assert!(k.len() <= dst.len() && kn.len() <= src.len());
            let distinct_targets: std::collections::BTreeSet<_> = r.inlier_pairs.iter().map(|p| p.target).collect();
            prop_assert_eq!(k.len(), dst.len() - distinct_targets.len());
            prop_assert_eq!(kn.len(), src.len() - r.inlier_pairs.len());
        }
    }
}
