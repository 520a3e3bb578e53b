//! Rigid transforms and closed-form least-squares alignment.

use nalgebra::{Matrix3, Rotation3, Vector3, SVD};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Point3 = nalgebra::Point3<f64>;
pub type Vec3 = Vector3<f64>;

/// Tolerance on `RᵀR − I` and `det R − 1` for a rotation to count as proper.
pub const ORTHONORMAL_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("rotation is not proper orthonormal (deviation {0:.3e})")]
    NotARotation(f64),
    #[error("non-finite value in transform")]
    NonFinite,
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
}

/// An element of SE(3): `p ↦ R·p + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TransformRepr", into = "TransformRepr")]
pub struct RigidTransform {
    rotation: Matrix3<f64>,
    translation: Vec3,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
        }
    }

    /// Builds a transform after checking that `rotation` is a proper rotation.
    pub fn new(rotation: Matrix3<f64>, translation: Vec3) -> Result<Self, GeometryError> {
        if rotation.iter().chain(translation.iter()).any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        let dev = rotation_deviation(&rotation);
        if dev > ORTHONORMAL_TOL {
            return Err(GeometryError::NotARotation(dev));
        }
        Ok(Self { rotation, translation })
    }

    pub fn from_translation(translation: Vec3) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    pub fn from_rotation(rotation: Rotation3<f64>) -> Self {
        Self {
            rotation: *rotation.matrix(),
            translation: Vec3::zeros(),
        }
    }

    pub fn from_parts(rotation: Rotation3<f64>, translation: Vec3) -> Self {
        Self {
            rotation: *rotation.matrix(),
            translation,
        }
    }

    /// Rotation of `angle` radians about the z axis followed by `translation`.
    pub fn from_yaw(angle: f64, translation: Vec3) -> Self {
        Self::from_parts(Rotation3::from_axis_angle(&Vector3::z_axis(), angle), translation)
    }

    /// Row-major rotation plus translation, as stored in the frame log.
    pub fn from_row_major(rotation: &[f64; 9], translation: &[f64; 3]) -> Result<Self, GeometryError> {
        Self::new(
            Matrix3::from_row_slice(rotation),
            Vec3::new(translation[0], translation[1], translation[2]),
        )
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    pub fn rotation_row_major(&self) -> [f64; 9] {
        let r = &self.rotation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
        ]
    }

    pub fn transform_point(&self, p: &Point3) -> Point3 {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    pub fn transform_vector(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Rotation angle in radians.
    pub fn angle(&self) -> f64 {
        let c = ((self.rotation.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
        c.acos()
    }
}

/// `transform_point(t, p) = R·p + t`.
pub fn transform_point(t: &RigidTransform, p: &Point3) -> Point3 {
    t.transform_point(p)
}

/// Larger of `‖RᵀR − I‖_max` and `|det R − 1|`.
pub fn rotation_deviation(r: &Matrix3<f64>) -> f64 {
    let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
    ortho.max((r.determinant() - 1.0).abs())
}

#[derive(Serialize, Deserialize)]
struct TransformRepr {
    #[serde(rename = "R")]
    rotation: [f64; 9],
    #[serde(rename = "p")]
    translation: [f64; 3],
}

impl From<RigidTransform> for TransformRepr {
    fn from(t: RigidTransform) -> Self {
        Self {
            rotation: t.rotation_row_major(),
            translation: [t.translation.x, t.translation.y, t.translation.z],
        }
    }
}

impl TryFrom<TransformRepr> for RigidTransform {
    type Error = GeometryError;

    fn try_from(r: TransformRepr) -> Result<Self, Self::Error> {
        RigidTransform::from_row_major(&r.rotation, &r.translation)
    }
}

/// Least-squares rigid alignment of corresponding point pairs (Kabsch).
///
/// Returns the proper rotation and translation minimizing
/// `Σ ‖R·sᵢ + t − tᵢ‖²`. A reflection in the SVD solution is repaired by
/// flipping the singular vector of the smallest singular value.
pub fn kabsch_align(source: &[Point3], target: &[Point3]) -> Result<RigidTransform, GeometryError> {
    if source.len() != target.len() {
        return Err(GeometryError::DegenerateGeometry(format!(
            "length mismatch: {} source vs {} target points",
            source.len(),
            target.len()
        )));
    }
    kabsch_align_pairs(source.iter().zip(target.iter()).map(|(s, t)| (*s, *t)))
}

/// Kabsch alignment over an iterator of `(source, target)` pairs.
pub fn kabsch_align_pairs<I>(pairs: I) -> Result<RigidTransform, GeometryError>
where
    I: IntoIterator<Item = (Point3, Point3)> + Clone,
{
    let mut count = 0usize;
    let mut src_sum = Vec3::zeros();
    let mut dst_sum = Vec3::zeros();
    for (s, t) in pairs.clone() {
        count += 1;
        src_sum += s.coords;
        dst_sum += t.coords;
    }
    if count < 3 {
        return Err(GeometryError::DegenerateGeometry(format!(
            "need at least 3 point pairs, got {count}"
        )));
    }
    let src_mean = src_sum / count as f64;
    let dst_mean = dst_sum / count as f64;

    let mut cov = Matrix3::zeros();
    for (s, t) in pairs {
        cov += (s.coords - src_mean) * (t.coords - dst_mean).transpose();
    }

    let svd = SVD::new(cov, true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(GeometryError::DegenerateGeometry("SVD did not converge".into())),
    };
    let sv = svd.singular_values;
    // Singular values come unsorted from nalgebra; sort descending by index.
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]));
    let scale = sv[order[0]].max(f64::MIN_POSITIVE);
    if sv[order[1]] <= 1e-12 * scale || sv[order[0]] <= 1e-300 {
        return Err(GeometryError::DegenerateGeometry(
            "cross-covariance has rank < 2 (collinear or coincident points)".into(),
        ));
    }

    let v = v_t.transpose();
    let mut rotation = v * u.transpose();
    if rotation.determinant() < 0.0 {
        let mut v_fixed = v;
        let idx = order[2];
        for row in 0..3 {
            v_fixed[(row, idx)] = -v_fixed[(row, idx)];
        }
        rotation = v_fixed * u.transpose();
    }
    let translation = dst_mean - rotation * src_mean;
    Ok(RigidTransform { rotation, translation })
}

/// Sum of squared residuals `Σ ‖T·sᵢ − tᵢ‖²`.
pub fn alignment_cost(t: &RigidTransform, source: &[Point3], target: &[Point3]) -> f64 {
    source
        .iter()
        .zip(target)
        .map(|(s, d)| (t.transform_point(s) - d).norm_squared())
        .sum()
}
