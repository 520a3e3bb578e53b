//! Analytic primitives shared by the robot model and the simulator.

use crate::geometry::{Point3, RigidTransform, Vec3};
use serde::{Deserialize, Serialize};

/// A ray `origin + s·direction`, `direction` unit length.
#[derive(Debug, Clone, Copy)]
pub struct Ray {
    pub origin: Point3,
    pub direction: Vec3,
}

impl Ray {
    pub fn at(&self, s: f64) -> Point3 {
        self.origin + self.direction * s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Primitive {
    Sphere {
        center: [f64; 3],
        radius: f64,
    },
    /// Segment `a`–`b` swept by a ball of `radius`.
    Capsule {
        a: [f64; 3],
        b: [f64; 3],
        radius: f64,
    },
    /// Infinite plane through `point` with normal `normal`.
    Plane {
        point: [f64; 3],
        normal: [f64; 3],
    },
}

impl Primitive {
    pub fn sphere(center: Point3, radius: f64) -> Self {
        Primitive::Sphere {
            center: center.into(),
            radius,
        }
    }

    pub fn capsule(a: Point3, b: Point3, radius: f64) -> Self {
        Primitive::Capsule {
            a: a.into(),
            b: b.into(),
            radius,
        }
    }

    pub fn plane(point: Point3, normal: Vec3) -> Self {
        Primitive::Plane {
            point: point.into(),
            normal: normal.normalize().into(),
        }
    }

    pub fn radius(&self) -> Option<f64> {
        match *self {
            Primitive::Sphere { radius, .. } | Primitive::Capsule { radius, .. } => Some(radius),
            Primitive::Plane { .. } => None,
        }
    }

    pub fn transformed(&self, t: &RigidTransform) -> Primitive {
        let tp = |p: [f64; 3]| -> [f64; 3] { t.transform_point(&Point3::from(p)).into() };
        match *self {
            Primitive::Sphere { center, radius } => Primitive::Sphere {
                center: tp(center),
                radius,
            },
            Primitive::Capsule { a, b, radius } => Primitive::Capsule {
                a: tp(a),
                b: tp(b),
                radius,
            },
            Primitive::Plane { point, normal } => Primitive::Plane {
                point: tp(point),
                normal: t.transform_vector(&Vec3::from(normal)).into(),
            },
        }
    }

    /// Smallest `s ≥ 0` at which the ray meets the surface. Rays starting
    /// inside a solid primitive report the exit point.
    pub fn intersect(&self, ray: &Ray) -> Option<f64> {
        match *self {
            Primitive::Sphere { center, radius } => ray_sphere(ray, &Point3::from(center), radius),
            Primitive::Capsule { a, b, radius } => ray_capsule(ray, &Point3::from(a), &Point3::from(b), radius),
            Primitive::Plane { point, normal } => {
                let n = Vec3::from(normal);
                let denom = n.dot(&ray.direction);
                if denom.abs() < 1e-15 {
                    return None;
                }
                let s = (Point3::from(point) - ray.origin).dot(&n) / denom;
                (s >= 0.0).then_some(s)
            }
        }
    }

    /// Signed distance from `p` to the surface (negative inside solids and
    /// behind planes).
    pub fn signed_distance(&self, p: &Point3) -> f64 {
        match *self {
            Primitive::Sphere { center, radius } => (p - Point3::from(center)).norm() - radius,
            Primitive::Capsule { a, b, radius } => segment_distance(p, &Point3::from(a), &Point3::from(b)) - radius,
            Primitive::Plane { point, normal } => (p - Point3::from(point)).dot(&Vec3::from(normal)),
        }
    }
}

fn ray_sphere(ray: &Ray, center: &Point3, radius: f64) -> Option<f64> {
    let oc = ray.origin - center;
    let b = oc.dot(&ray.direction);
    let c = oc.norm_squared() - radius * radius;
    let disc = b * b - c;
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    let s0 = -b - sq;
    let s1 = -b + sq;
    if s0 >= 0.0 {
        Some(s0)
    } else if s1 >= 0.0 {
        Some(s1)
    } else {
        None
    }
}

/// Collects cylinder and cap-sphere roots and keeps the nearest one that lies
/// on the union surface.
fn ray_capsule(ray: &Ray, a: &Point3, b: &Point3, radius: f64) -> Option<f64> {
    let axis = b - a;
    let len2 = axis.norm_squared();
    if len2 < 1e-24 {
        return ray_sphere(ray, a, radius);
    }
    let mut cands = [f64::NAN; 6];
    let ao = ray.origin - a;
    let d_par = ray.direction.dot(&axis) / len2;
    let o_par = ao.dot(&axis) / len2;
    let d_perp = ray.direction - axis * d_par;
    let o_perp = ao - axis * o_par;
    let qa = d_perp.norm_squared();
    if qa > 1e-24 {
        let qb = d_perp.dot(&o_perp);
        let qc = o_perp.norm_squared() - radius * radius;
        let disc = qb * qb - qa * qc;
        if disc >= 0.0 {
            let sq = disc.sqrt();
            cands[0] = (-qb - sq) / qa;
            cands[1] = (-qb + sq) / qa;
        }
    }
    for (i, cap) in [a, b].into_iter().enumerate() {
        let oc = ray.origin - cap;
        let bb = oc.dot(&ray.direction);
        let disc = bb * bb - (oc.norm_squared() - radius * radius);
        if disc >= 0.0 {
            cands[2 + 2 * i] = -bb - disc.sqrt();
            cands[3 + 2 * i] = -bb + disc.sqrt();
        }
    }
    let tol = 1e-9 * radius.max(1.0);
    cands
        .into_iter()
        .filter(|&s| s >= 0.0)
        .filter(|&s| (segment_distance(&ray.at(s), a, b) - radius).abs() < tol)
        .min_by(f64::total_cmp)
}

pub fn segment_distance(p: &Point3, a: &Point3, b: &Point3) -> f64 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    let h = if len2 < 1e-24 {
        0.0
    } else {
        ((p - a).dot(&ab) / len2).clamp(0.0, 1.0)
    };
    (p - (a + ab * h)).norm()
}
