//! Rigid poses, point clouds and analytic shape primitives.
//!
//! Conventions: quaternions are scalar-first `[w, x, y, z]` when serialized,
//! composed with the Hamilton product and interpreted as active rotations.
//! Lengths are meters, angles radians.

use nalgebra::{Matrix3, Quaternion, Unit, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::GeometryError;

pub type Vec3 = Vector3<f64>;

/// Rigid transform: `x' = R x + t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "PoseRepr", into = "PoseRepr")]
pub struct Pose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vec3,
}

#[derive(Serialize, Deserialize)]
struct PoseRepr {
    #[serde(default = "identity_quat")]
    rotation: [f64; 4],
    #[serde(default)]
    translation: [f64; 3],
}

fn identity_quat() -> [f64; 4] {
    [1.0, 0.0, 0.0, 0.0]
}

impl From<PoseRepr> for Pose {
    fn from(r: PoseRepr) -> Self {
        let [w, x, y, z] = r.rotation;
        Pose::new(
            UnitQuaternion::from_quaternion(Quaternion::new(w, x, y, z)),
            Vec3::from(r.translation),
        )
    }
}

impl From<Pose> for PoseRepr {
    fn from(p: Pose) -> Self {
        let q = p.rotation.quaternion();
        PoseRepr {
            rotation: [q.w, q.i, q.j, q.k],
            translation: [p.translation.x, p.translation.y, p.translation.z],
        }
    }
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: UnitQuaternion::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vec3) -> Self {
        Pose {
            rotation: renormalize(rotation),
            translation,
        }
    }

    pub fn from_translation(t: Vec3) -> Self {
        Pose::new(UnitQuaternion::identity(), t)
    }

    pub fn from_axis_angle(axis: Vec3, angle: f64, translation: Vec3) -> Self {
        let rotation = match Unit::try_new(axis, 1e-12) {
            Some(a) => UnitQuaternion::from_axis_angle(&a, angle),
            None => UnitQuaternion::identity(),
        };
        Pose::new(rotation, translation)
    }

    /// Pose whose rotation maps the canonical axes onto the given columns.
    pub fn from_rotation_matrix(m: &Matrix3<f64>, translation: Vec3) -> Self {
        let rot = nalgebra::Rotation3::from_matrix_eps(m, 1e-12, 100, nalgebra::Rotation3::identity());
        Pose::new(UnitQuaternion::from_rotation_matrix(&rot), translation)
    }

    pub fn rot_x(angle: f64) -> Self {
        Pose::from_axis_angle(Vec3::x(), angle, Vec3::zeros())
    }

    pub fn rot_y(angle: f64) -> Self {
        Pose::from_axis_angle(Vec3::y(), angle, Vec3::zeros())
    }

    pub fn rot_z(angle: f64) -> Self {
        Pose::from_axis_angle(Vec3::z(), angle, Vec3::zeros())
    }

    pub fn with_translation(mut self, t: Vec3) -> Self {
        self.translation = t;
        self
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn inverse(&self) -> Pose {
        let inv = self.rotation.inverse();
        Pose::new(inv, -(inv * self.translation))
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn transform_vector(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        *self.rotation.to_rotation_matrix().matrix()
    }

    /// Angle of the relative rotation between two poses.
    pub fn rotation_angle_to(&self, other: &Pose) -> f64 {
        self.rotation.angle_to(&other.rotation)
    }

    pub fn translation_distance(&self, other: &Pose) -> f64 {
        (self.translation - other.translation).norm()
    }

    pub fn is_finite(&self) -> bool {
        let q = self.rotation.quaternion();
        q.coords.iter().all(|v| v.is_finite()) && self.translation.iter().all(|v| v.is_finite())
    }
}

fn renormalize(q: UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    UnitQuaternion::new_normalize(q.into_inner())
}

pub fn compose(a: &Pose, b: &Pose) -> Pose {
    a.compose(b)
}

/// Angle in `[0, π]` between the rotated body axis and world +Z.
pub fn axis_tilt(pose: &Pose, body_axis: &Vec3) -> f64 {
    let world = pose.rotation * body_axis.normalize();
    world.z.clamp(-1.0, 1.0).acos()
}

/// The 24 proper rotations that map the coordinate axes onto themselves.
pub fn octahedral_rotations() -> Vec<UnitQuaternion<f64>> {
    let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    let mut out = Vec::with_capacity(24);
    for perm in perms {
        for signs in 0..8u8 {
            let mut m = Matrix3::zeros();
            for (row, &col) in perm.iter().enumerate() {
                let s = if signs & (1 << row) != 0 { -1.0 } else { 1.0 };
                m[(row, col)] = s;
            }
            if m.determinant() > 0.0 {
                let rot = nalgebra::Rotation3::from_matrix_unchecked(m);
                out.push(UnitQuaternion::from_rotation_matrix(&rot));
            }
        }
    }
    out
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<u32>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Result<Self, GeometryError> {
        if points.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(GeometryError::NonFinite);
        }
        Ok(PointCloud { points, labels: None })
    }

    pub fn with_labels(points: Vec<Vec3>, labels: Vec<u32>) -> Result<Self, GeometryError> {
        if labels.len() != points.len() {
            return Err(GeometryError::LabelMismatch {
                points: points.len(),
                labels: labels.len(),
            });
        }
        let mut cloud = PointCloud::new(points)?;
        cloud.labels = Some(labels);
        Ok(cloud)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Option<Vec3> {
        if self.points.is_empty() {
            return None;
        }
        let sum: Vec3 = self.points.iter().sum();
        Some(sum / self.points.len() as f64)
    }

    pub fn covariance(&self) -> Option<Matrix3<f64>> {
        let c = self.centroid()?;
        let mut cov = Matrix3::zeros();
        for p in &self.points {
            let d = p - c;
            cov += d * d.transpose();
        }
        Some(cov / self.points.len() as f64)
    }

    pub fn as_arrays(&self) -> Vec<[f64; 3]> {
        self.points.iter().map(|p| [p.x, p.y, p.z]).collect()
    }
}

pub fn transform_cloud(pose: &Pose, cloud: &PointCloud) -> PointCloud {
    PointCloud {
        points: cloud.points.iter().map(|p| pose.transform_point(p)).collect(),
        labels: cloud.labels.clone(),
    }
}

/// Axis-aligned bounding box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Result<Self, GeometryError> {
        if (0..3).any(|i| min[i] > max[i]) {
            return Err(GeometryError::InvertedAabb);
        }
        Ok(Aabb { min, max })
    }

    pub fn from_center_half(center: Vec3, half: Vec3) -> Self {
        let half = half.abs();
        Aabb {
            min: center - half,
            max: center + half,
        }
    }

    pub fn center(&self) -> Vec3 {
        (self.min + self.max) * 0.5
    }

    pub fn half_extents(&self) -> Vec3 {
        (self.max - self.min) * 0.5
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    /// Grows (or shrinks, for negative `d`) every face by `d`.
    pub fn inflate(&self, d: f64) -> Aabb {
        let dv = Vec3::repeat(d);
        let min = self.min - dv;
        let max = self.max + dv;
        let c = self.center();
        Aabb {
            min: min.zip_map(&c, f64::min),
            max: max.zip_map(&c, f64::max),
        }
    }

    pub fn overlaps(&self, other: &Aabb) -> bool {
        (0..3).all(|i| self.min[i] <= other.max[i] && other.min[i] <= self.max[i])
    }

    pub fn distance_to_point(&self, p: &Vec3) -> f64 {
        let mut d = Vec3::zeros();
        for i in 0..3 {
            d[i] = (self.min[i] - p[i]).max(0.0).max(p[i] - self.max[i]);
        }
        d.norm()
    }
}

/// Analytic solid in its canonical frame. Boxes are centered at the origin;
/// cylinders and cones have their axis on +Z and span `z ∈ [-h/2, h/2]`,
/// with the cone base at `-h/2` and apex at `+h/2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ShapePrimitive {
    Box { extents: [f64; 3] },
    Cylinder { radius: f64, height: f64 },
    Sphere { radius: f64 },
    Cone { radius: f64, height: f64 },
    FlatSlab { extents: [f64; 3] },
    DeformableSheet { extents: [f64; 3] },
}

/// Rotational symmetry of a primitive, used to compare orientation estimates.
#[derive(Clone, Debug)]
pub enum Symmetry {
    /// Any rotation maps the shape onto itself.
    Full,
    /// Free rotation about +Z; `flip` when the shape is also symmetric under z → -z.
    Axial { flip: bool },
    Discrete(Vec<UnitQuaternion<f64>>),
}

impl ShapePrimitive {
    pub fn validate(&self) -> Result<(), GeometryError> {
        let dims: Vec<f64> = match *self {
            ShapePrimitive::Box { extents }
            | ShapePrimitive::FlatSlab { extents }
            | ShapePrimitive::DeformableSheet { extents } => extents.to_vec(),
            ShapePrimitive::Cylinder { radius, height } | ShapePrimitive::Cone { radius, height } => {
                vec![radius, height]
            }
            ShapePrimitive::Sphere { radius } => vec![radius],
        };
        if dims.iter().all(|d| d.is_finite() && *d > 0.0) {
            Ok(())
        } else {
            Err(GeometryError::NonPositiveDimension)
        }
    }

    pub fn box_extents(&self) -> Option<Vec3> {
        match *self {
            ShapePrimitive::Box { extents }
            | ShapePrimitive::FlatSlab { extents }
            | ShapePrimitive::DeformableSheet { extents } => Some(Vec3::from(extents)),
            _ => None,
        }
    }

    pub fn is_axial(&self) -> bool {
        matches!(self, ShapePrimitive::Cylinder { .. } | ShapePrimitive::Cone { .. })
    }

    /// Half extents of the canonical-frame bounding box.
    pub fn half_extents(&self) -> Vec3 {
        match *self {
            ShapePrimitive::Box { .. }
            | ShapePrimitive::FlatSlab { .. }
            | ShapePrimitive::DeformableSheet { .. } => self.box_extents().unwrap() * 0.5,
            ShapePrimitive::Cylinder { radius, height } | ShapePrimitive::Cone { radius, height } => {
                Vec3::new(radius, radius, height * 0.5)
            }
            ShapePrimitive::Sphere { radius } => Vec3::repeat(radius),
        }
    }

    /// Volume centroid in the canonical frame.
    pub fn centroid(&self) -> Vec3 {
        match *self {
            ShapePrimitive::Cone { height, .. } => Vec3::new(0.0, 0.0, -height * 0.25),
            _ => Vec3::zeros(),
        }
    }

    pub fn bounding_radius(&self) -> f64 {
        self.half_extents().norm()
    }

    pub fn symmetry(&self) -> Symmetry {
        match *self {
            ShapePrimitive::Sphere { .. } => Symmetry::Full,
            ShapePrimitive::Cylinder { .. } => Symmetry::Axial { flip: true },
            ShapePrimitive::Cone { .. } => Symmetry::Axial { flip: false },
            _ => {
                let e = self.box_extents().unwrap();
                let rots = octahedral_rotations()
                    .into_iter()
                    .filter(|q| {
                        let m = q.to_rotation_matrix();
                        let mapped = m.matrix().abs() * e;
                        (mapped - e).norm() < 1e-12
                    })
                    .collect();
                Symmetry::Discrete(rots)
            }
        }
    }

    /// Orientation error between two poses of this shape, modulo its symmetry.
    pub fn symmetric_rotation_error(&self, estimate: &Pose, truth: &Pose) -> f64 {
        match self.symmetry() {
            Symmetry::Full => 0.0,
            Symmetry::Axial { flip } => {
                let a = estimate.rotation * Vec3::z();
                let b = truth.rotation * Vec3::z();
                let angle = a.dot(&b).clamp(-1.0, 1.0).acos();
                if flip {
                    angle.min(PI - angle)
                } else {
                    angle
                }
            }
            Symmetry::Discrete(rots) => rots
                .iter()
                .map(|s| (truth.rotation * s).angle_to(&estimate.rotation))
                .fold(f64::INFINITY, f64::min),
        }
    }

    pub fn surface_area(&self) -> f64 {
        match *self {
            ShapePrimitive::Sphere { radius } => 4.0 * PI * radius * radius,
            ShapePrimitive::Cylinder { radius, height } => {
                2.0 * PI * radius * height + 2.0 * PI * radius * radius
            }
            ShapePrimitive::Cone { radius, height } => {
                let slant = (radius * radius + height * height).sqrt();
                PI * radius * slant + PI * radius * radius
            }
            _ => {
                let e = self.box_extents().unwrap();
                2.0 * (e.x * e.y + e.y * e.z + e.x * e.z)
            }
        }
    }

    /// Unsigned distance from a canonical-frame point to the surface.
    pub fn surface_distance(&self, p: &Vec3) -> f64 {
        match *self {
            ShapePrimitive::Sphere { radius } => (p.norm() - radius).abs(),
            ShapePrimitive::Cylinder { radius, height } => {
                let rho = (p.x * p.x + p.y * p.y).sqrt();
                let h = height * 0.5;
                let q = [rho, p.z];
                let side = segment_distance_2d(q, [radius, -h], [radius, h]);
                let top = segment_distance_2d(q, [0.0, h], [radius, h]);
                let bottom = segment_distance_2d(q, [0.0, -h], [radius, -h]);
                side.min(top).min(bottom)
            }
            ShapePrimitive::Cone { radius, height } => {
                let rho = (p.x * p.x + p.y * p.y).sqrt();
                let h = height * 0.5;
                let q = [rho, p.z];
                let slant = segment_distance_2d(q, [radius, -h], [0.0, h]);
                let base = segment_distance_2d(q, [0.0, -h], [radius, -h]);
                slant.min(base)
            }
            _ => {
                let half = self.half_extents();
                let outside = p.abs() - half;
                if outside.iter().any(|v| *v > 0.0) {
                    outside.map(|v| v.max(0.0)).norm()
                } else {
                    -outside.max()
                }
            }
        }
    }

    /// Closest surface point to a canonical-frame point and the outward
    /// normal of the face it lies on.
    pub fn closest_surface_point(&self, p: &Vec3) -> (Vec3, Vec3) {
        match *self {
            ShapePrimitive::Sphere { radius } => {
                let n = if p.norm() > 1e-15 { p.normalize() } else { Vec3::z() };
                (n * radius, n)
            }
            ShapePrimitive::Cylinder { radius, height } => {
                let h = height * 0.5;
                closest_on_profile(p, &[[0.0, h], [radius, h], [radius, -h], [0.0, -h]], [radius * 0.5, 0.0])
            }
            ShapePrimitive::Cone { radius, height } => {
                let h = height * 0.5;
                closest_on_profile(p, &[[0.0, h], [radius, -h], [0.0, -h]], [radius / 3.0, -h / 3.0])
            }
            _ => {
                let half = self.half_extents();
                let outside = p.abs() - half;
                if outside.iter().any(|v| *v > 0.0) {
                    let q = Vec3::from_fn(|i, _| p[i].clamp(-half[i], half[i]));
                    let mut n = Vec3::zeros();
                    let i = outside.imax();
                    n[i] = p[i].signum();
                    (q, n)
                } else {
                    let i = outside.imax();
                    let mut q = *p;
                    let s = if p[i] >= 0.0 { 1.0 } else { -1.0 };
                    q[i] = s * half[i];
                    let mut n = Vec3::zeros();
                    n[i] = s;
                    (q, n)
                }
            }
        }
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        match *self {
            ShapePrimitive::Sphere { radius } => p.norm() <= radius,
            ShapePrimitive::Cylinder { radius, height } => {
                p.z.abs() <= height * 0.5 && p.x * p.x + p.y * p.y <= radius * radius
            }
            ShapePrimitive::Cone { radius, height } => {
                let h = height * 0.5;
                if p.z < -h || p.z > h {
                    return false;
                }
                let allowed = radius * (h - p.z) / height;
                (p.x * p.x + p.y * p.y).sqrt() <= allowed
            }
            _ => {
                let half = self.half_extents();
                (0..3).all(|i| p[i].abs() <= half[i])
            }
        }
    }

    /// Parameter interval `[t_in, t_out]` where the line `origin + t·dir`
    /// lies inside the solid (canonical frame). `dir` need not be unit length.
    pub fn line_interval(&self, origin: &Vec3, dir: &Vec3) -> Option<(f64, f64)> {
        match *self {
            ShapePrimitive::Sphere { radius } => {
                let a = dir.dot(dir);
                let b = 2.0 * origin.dot(dir);
                let c = origin.dot(origin) - radius * radius;
                quadratic_below_zero(a, b, c).and_then(|ivs| hull(&ivs))
            }
            ShapePrimitive::Cylinder { radius, height } => {
                let h = height * 0.5;
                let slab = slab_interval(origin.z, dir.z, -h, h)?;
                let a = dir.x * dir.x + dir.y * dir.y;
                let b = 2.0 * (origin.x * dir.x + origin.y * dir.y);
                let c = origin.x * origin.x + origin.y * origin.y - radius * radius;
                let ivs = quadratic_below_zero(a, b, c)?;
                intersect_all(&ivs, slab)
            }
            ShapePrimitive::Cone { radius, height } => {
                let h = height * 0.5;
                let slab = slab_interval(origin.z, dir.z, -h, h)?;
                let k = radius / height;
                // x² + y² - k²(h - z)² ≤ 0
                let w0 = h - origin.z;
                let a = dir.x * dir.x + dir.y * dir.y - k * k * dir.z * dir.z;
                let b = 2.0 * (origin.x * dir.x + origin.y * dir.y + k * k * w0 * dir.z);
                let c = origin.x * origin.x + origin.y * origin.y - k * k * w0 * w0;
                let ivs = quadratic_below_zero(a, b, c)?;
                intersect_all(&ivs, slab)
            }
            _ => {
                let half = self.half_extents();
                let mut iv = (f64::NEG_INFINITY, f64::INFINITY);
                for i in 0..3 {
                    let s = slab_interval(origin[i], dir[i], -half[i], half[i])?;
                    iv = (iv.0.max(s.0), iv.1.min(s.1));
                    if iv.0 > iv.1 {
                        return None;
                    }
                }
                Some(iv)
            }
        }
    }

    /// Samples `n` points uniformly by area on the surface; deterministic per seed.
    pub fn sample_surface(&self, n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points = (0..n).map(|_| self.sample_point(&mut rng)).collect();
        PointCloud { points, labels: None }
    }

    fn sample_point(&self, rng: &mut impl Rng) -> Vec3 {
        match *self {
            ShapePrimitive::Sphere { radius } => loop {
                let v = Vec3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                );
                let n = v.norm();
                if n > 1e-3 && n <= 1.0 {
                    return v / n * radius;
                }
            },
            ShapePrimitive::Cylinder { radius, height } => {
                let side = 2.0 * PI * radius * height;
                let cap = PI * radius * radius;
                let pick = rng.random_range(0.0..side + 2.0 * cap);
                let theta = rng.random_range(0.0..2.0 * PI);
                if pick < side {
                    let z = rng.random_range(-0.5..0.5) * height;
                    Vec3::new(radius * theta.cos(), radius * theta.sin(), z)
                } else {
                    let rho = radius * rng.random_range(0.0f64..1.0).sqrt();
                    let z = if pick < side + cap { height * 0.5 } else { -height * 0.5 };
                    Vec3::new(rho * theta.cos(), rho * theta.sin(), z)
                }
            }
            ShapePrimitive::Cone { radius, height } => {
                let slant = (radius * radius + height * height).sqrt();
                let lateral = PI * radius * slant;
                let base = PI * radius * radius;
                let pick = rng.random_range(0.0..lateral + base);
                let theta = rng.random_range(0.0..2.0 * PI);
                let u = rng.random_range(0.0f64..1.0).sqrt();
                let rho = radius * u;
                if pick < lateral {
                    let z = height * 0.5 - height * u;
                    Vec3::new(rho * theta.cos(), rho * theta.sin(), z)
                } else {
                    Vec3::new(rho * theta.cos(), rho * theta.sin(), -height * 0.5)
                }
            }
            _ => {
                let e = self.box_extents().unwrap();
                let areas = [e.y * e.z, e.x * e.z, e.x * e.y];
                let total = 2.0 * (areas[0] + areas[1] + areas[2]);
                let mut pick = rng.random_range(0.0..total);
                let mut axis = 2;
                for (i, a) in areas.iter().enumerate() {
                    if pick < 2.0 * a {
                        axis = i;
                        break;
                    }
                    pick -= 2.0 * a;
                }
                let mut p = Vec3::new(
                    rng.random_range(-0.5..0.5) * e.x,
                    rng.random_range(-0.5..0.5) * e.y,
                    rng.random_range(-0.5..0.5) * e.z,
                );
                p[axis] = if rng.random_bool(0.5) { 0.5 * e[axis] } else { -0.5 * e[axis] };
                p
            }
        }
    }
}

pub fn sample_surface(shape: &ShapePrimitive, n: usize, seed: u64) -> PointCloud {
    shape.sample_surface(n, seed)
}

/// Closest point on the surface of revolution swept by the open polyline
/// `profile` in the (ρ, z) half-plane; `inside` is a profile interior point.
fn closest_on_profile(p: &Vec3, profile: &[[f64; 2]], inside: [f64; 2]) -> (Vec3, Vec3) {
    let rho = (p.x * p.x + p.y * p.y).sqrt();
    let radial = if rho > 1e-15 { Vec3::new(p.x / rho, p.y / rho, 0.0) } else { Vec3::x() };
    let q = [rho, p.z];
    let mut best = (f64::INFINITY, [0.0, 0.0], [0.0, 1.0]);
    for w in profile.windows(2) {
        let (a, b) = (w[0], w[1]);
        let ab = [b[0] - a[0], b[1] - a[1]];
        let len2 = ab[0] * ab[0] + ab[1] * ab[1];
        let t = (((q[0] - a[0]) * ab[0] + (q[1] - a[1]) * ab[1]) / len2).clamp(0.0, 1.0);
        let c = [a[0] + t * ab[0], a[1] + t * ab[1]];
        let d = ((q[0] - c[0]).powi(2) + (q[1] - c[1]).powi(2)).sqrt();
        if d < best.0 {
            let mut n = [ab[1], -ab[0]];
            let mid = [(a[0] + b[0]) * 0.5 - inside[0], (a[1] + b[1]) * 0.5 - inside[1]];
            if n[0] * mid[0] + n[1] * mid[1] < 0.0 {
                n = [-n[0], -n[1]];
            }
            let l = (n[0] * n[0] + n[1] * n[1]).sqrt();
            best = (d, c, [n[0] / l, n[1] / l]);
        }
    }
    let (_, c, n) = best;
    (radial * c[0] + Vec3::z() * c[1], radial * n[0] + Vec3::z() * n[1])
}

fn segment_distance_2d(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let ap = [p[0] - a[0], p[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len2 > 0.0 {
        ((ap[0] * ab[0] + ap[1] * ab[1]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let d = [ap[0] - t * ab[0], ap[1] - t * ab[1]];
    (d[0] * d[0] + d[1] * d[1]).sqrt()
}

fn slab_interval(o: f64, d: f64, lo: f64, hi: f64) -> Option<(f64, f64)> {
    if d.abs() < 1e-15 {
        if o >= lo && o <= hi {
            Some((f64::NEG_INFINITY, f64::INFINITY))
        } else {
            None
        }
    } else {
        let t0 = (lo - o) / d;
        let t1 = (hi - o) / d;
        Some((t0.min(t1), t0.max(t1)))
    }
}

/// Intervals of `t` where `a t² + b t + c ≤ 0`.
fn quadratic_below_zero(a: f64, b: f64, c: f64) -> Option<Vec<(f64, f64)>> {
    const INF: f64 = f64::INFINITY;
    if a.abs() < 1e-14 {
        if b.abs() < 1e-14 {
            return if c <= 0.0 { Some(vec![(-INF, INF)]) } else { None };
        }
        let t = -c / b;
        return Some(vec![if b > 0.0 { (-INF, t) } else { (t, INF) }]);
    }
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return if a < 0.0 { Some(vec![(-INF, INF)]) } else { None };
    }
    let sq = disc.sqrt();
    let q = -0.5 * (b + b.signum() * sq);
    let (mut r0, mut r1) = if q.abs() > 0.0 { (q / a, c / q) } else { (0.0, 0.0) };
    if r0 > r1 {
        std::mem::swap(&mut r0, &mut r1);
    }
    if a > 0.0 {
        Some(vec![(r0, r1)])
    } else {
        Some(vec![(-INF, r0), (r1, INF)])
    }
}

fn intersect_all(ivs: &[(f64, f64)], with: (f64, f64)) -> Option<(f64, f64)> {
    let pieces: Vec<(f64, f64)> = ivs
        .iter()
        .map(|iv| (iv.0.max(with.0), iv.1.min(with.1)))
        .filter(|iv| iv.0 <= iv.1)
        .collect();
    hull(&pieces)
}

fn hull(ivs: &[(f64, f64)]) -> Option<(f64, f64)> {
    if ivs.is_empty() {
        return None;
    }
    let lo = ivs.iter().map(|i| i.0).fold(f64::INFINITY, f64::min);
    let hi = ivs.iter().map(|i| i.1).fold(f64::NEG_INFINITY, f64::max);
    Some((lo, hi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn rot_matrix_z(angle: f64) -> Matrix3<f64> {
        let (s, c) = angle.sin_cos();
        Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
    }

    fn arb_pose() -> impl Strategy<Value = Pose> {
        (
            prop::array::uniform3(-1.0f64..1.0),
            -PI..PI,
            prop::array::uniform3(-2.0f64..2.0),
        )
            .prop_map(|(axis, angle, t)| Pose::from_axis_angle(Vec3::from(axis), angle, Vec3::from(t)))
    }

    #[test]
    fn compose_with_identity() {
        let p = Pose::from_axis_angle(Vec3::new(1.0, 2.0, 3.0), 0.7, Vec3::new(0.1, -0.2, 0.3));
        let q = Pose::identity().compose(&p);
        assert!(q.rotation_angle_to(&p) < 1e-12);
        assert!(q.translation_distance(&p) < 1e-12);
    }

    #[test]
    fn quarter_turns_about_z_compose_to_half_turn() {
        let q = Pose::rot_z(PI / 2.0);
        let r = q.compose(&q);
        let expected = rot_matrix_z(PI / 2.0) * rot_matrix_z(PI / 2.0);
        assert!((r.rotation_matrix() - expected).norm() < 1e-12);
        assert!(r.rotation_angle_to(&Pose::rot_z(PI)) < 1e-9);
    }

    #[test]
    fn scalar_first_serialization() {
        let p = Pose::rot_z(PI / 2.0);
        let s = toml::to_string(&p).unwrap();
        let back: Pose = toml::from_str(&s).unwrap();
        assert!(back.rotation_angle_to(&p) < 1e-12);
        let raw: Pose = toml::from_str("rotation = [0.0, 0.0, 0.0, 1.0]\ntranslation = [1.0, 0.0, 0.0]").unwrap();
        assert!(raw.rotation_angle_to(&Pose::rot_z(PI)) < 1e-12);
    }

    #[test]
    fn pure_translation_of_cloud() {
        let c = PointCloud::new(vec![Vec3::zeros()]).unwrap();
        let t = transform_cloud(&Pose::from_translation(Vec3::x()), &c);
        assert_eq!(t.points[0], Vec3::x());
    }

    #[test]
    fn labels_must_match_points() {
        assert!(PointCloud::with_labels(vec![Vec3::zeros()], vec![1, 2]).is_err());
        assert!(PointCloud::new(vec![Vec3::new(f64::NAN, 0.0, 0.0)]).is_err());
    }

    #[test]
    fn sphere_samples_lie_on_radius() {
        let c = ShapePrimitive::Sphere { radius: 0.1 }.sample_surface(1000, 7);
        assert_eq!(c.len(), 1000);
        for p in &c.points {
            assert!((p.norm() - 0.1).abs() < 1e-9);
        }
    }

    #[test]
    fn box_samples_touch_a_face() {
        let c = ShapePrimitive::Box { extents: [0.1, 0.1, 0.1] }.sample_surface(500, 3);
        for p in &c.points {
            assert!(p.iter().any(|v| (v.abs() - 0.05).abs() < 1e-12));
        }
    }

    #[test]
    fn sampling_is_seeded() {
        let s = ShapePrimitive::Cone { radius: 0.05, height: 0.1 };
        assert_eq!(s.sample_surface(200, 11), s.sample_surface(200, 11));
        assert_ne!(s.sample_surface(200, 11), s.sample_surface(200, 12));
    }

    #[test]
    fn every_kind_samples_on_its_surface() {
        let shapes = [
            ShapePrimitive::Box { extents: [0.1, 0.2, 0.05] },
            ShapePrimitive::Cylinder { radius: 0.03, height: 0.1 },
            ShapePrimitive::Sphere { radius: 0.04 },
            ShapePrimitive::Cone { radius: 0.05, height: 0.12 },
            ShapePrimitive::FlatSlab { extents: [0.3, 0.06, 0.04] },
            ShapePrimitive::DeformableSheet { extents: [0.2, 0.12, 0.01] },
        ];
        for s in shapes {
            for p in s.sample_surface(800, 5).points {
                assert!(s.surface_distance(&p) < 1e-9, "{s:?} {p:?}");
            }
        }
    }

    #[test]
    fn tilt_examples() {
        assert_relative_eq!(axis_tilt(&Pose::identity(), &Vec3::z()), 0.0, epsilon = 1e-12);
        assert_relative_eq!(axis_tilt(&Pose::rot_x(PI / 2.0), &Vec3::z()), PI / 2.0, epsilon = 1e-12);
        // closed form: R_y(θ)·ẑ = (sin θ, 0, cos θ)
        let theta = PI / 6.0;
        let oracle = Vec3::new(theta.sin(), 0.0, theta.cos()).z.acos();
        assert_relative_eq!(axis_tilt(&Pose::rot_y(theta), &Vec3::z()), oracle, epsilon = 1e-12);
        assert_relative_eq!(oracle, PI / 6.0, epsilon = 1e-12);
    }

    #[test]
    fn octahedral_group_has_24_distinct_members() {
        let rots = octahedral_rotations();
        assert_eq!(rots.len(), 24);
        for (i, a) in rots.iter().enumerate() {
            for b in &rots[i + 1..] {
                assert!(a.angle_to(b) > 1e-6);
            }
        }
    }

    #[test]
    fn box_symmetry_counts() {
        let count = |e: [f64; 3]| match (ShapePrimitive::Box { extents: e }).symmetry() {
            Symmetry::Discrete(v) => v.len(),
            _ => 0,
        };
        assert_eq!(count([0.1, 0.1, 0.1]), 24);
        assert_eq!(count([0.1, 0.1, 0.03]), 8);
        assert_eq!(count([0.1, 0.2, 0.03]), 4);
    }

    #[test]
    fn line_intervals_match_containment() {
        let shapes = [
            ShapePrimitive::Box { extents: [0.1, 0.2, 0.05] },
            ShapePrimitive::Cylinder { radius: 0.03, height: 0.1 },
            ShapePrimitive::Sphere { radius: 0.04 },
            ShapePrimitive::Cone { radius: 0.05, height: 0.12 },
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for s in shapes {
            for _ in 0..300 {
                let o = Vec3::new(
                    rng.random_range(-0.1..0.1),
                    rng.random_range(-0.1..0.1),
                    rng.random_range(-0.1..0.1),
                );
                let d = Vec3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                );
                let iv = s.line_interval(&o, &d);
                for k in 0..200 {
                    let t = -0.3 + 0.6 * k as f64 / 199.0;
                    let p = o + d * t;
                    let inside_iv = iv.map(|(a, b)| t >= a + 1e-9 && t <= b - 1e-9).unwrap_or(false);
                    let outside_iv = iv.map(|(a, b)| t < a - 1e-9 || t > b + 1e-9).unwrap_or(true);
                    if inside_iv {
                        assert!(s.contains(&p), "{s:?}");
                    }
                    if outside_iv {
                        assert!(!s.contains(&p) || s.surface_distance(&p) < 1e-7, "{s:?}");
                    }
                }
            }
        }
    }

    proptest! {
        #[test]
        fn closest_point_matches_surface_distance(kind in 0usize..6, x in -0.2f64..0.2, y in -0.2f64..0.2, z in -0.2f64..0.2) {
            let shapes = [
                ShapePrimitive::Box { extents: [0.1, 0.06, 0.04] },
                ShapePrimitive::Cylinder { radius: 0.03, height: 0.1 },
                ShapePrimitive::Sphere { radius: 0.05 },
                ShapePrimitive::Cone { radius: 0.05, height: 0.1 },
                ShapePrimitive::FlatSlab { extents: [0.2, 0.06, 0.05] },
                ShapePrimitive::DeformableSheet { extents: [0.2, 0.12, 0.01] },
            ];
            let s = shapes[kind];
            let p = Vec3::new(x, y, z);
            let (q, n) = s.closest_surface_point(&p);
            prop_assert!(s.surface_distance(&q) < 1e-9);
            prop_assert!(((p - q).norm() - s.surface_distance(&p)).abs() < 1e-9);
            prop_assert!((n.norm() - 1.0).abs() < 1e-9);
        }


        #[test]
        fn composition_is_associative(a in arb_pose(), b in arb_pose(), c in arb_pose()) {
            let l = a.compose(&b).compose(&c);
            let r = a.compose(&b.compose(&c));
            prop_assert!(l.rotation_angle_to(&r) < 1e-9);
            prop_assert!(l.translation_distance(&r) < 1e-9);
        }

        #[test]
        fn inverse_cancels(p in arb_pose()) {
            let id = p.compose(&p.inverse());
            prop_assert!(id.rotation.angle() < 1e-9);
            prop_assert!(id.translation.norm() < 1e-9);
            prop_assert!((id.rotation.quaternion().norm() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn transform_is_rigid(p in arb_pose(), seed in 0u64..1000) {
            let c = ShapePrimitive::Box { extents: [0.3, 0.2, 0.1] }.sample_surface(100, seed);
            let t = transform_cloud(&p, &c);
            for i in 0..10 {
                for j in 0..10 {
                    let d0 = (c.points[i] - c.points[j]).norm();
                    let d1 = (t.points[i] - t.points[j]).norm();
                    prop_assert!((d0 - d1).abs() < 1e-9);
                }
            }
            let moved = p.transform_point(&c.centroid().unwrap());
            prop_assert!((t.centroid().unwrap() - moved).norm() < 1e-9);
        }

        #[test]
        fn tilt_ignores_spin_about_body_axis(p in arb_pose(), spin in -PI..PI) {
            let spun = p.compose(&Pose::rot_z(spin));
            prop_assert!((axis_tilt(&p, &Vec3::z()) - axis_tilt(&spun, &Vec3::z())).abs() < 1e-9);
        }
    }
}
