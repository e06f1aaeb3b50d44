//! Capsule, box and sphere proximity tests for arm links, grasped objects
//! and static obstacles.

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use super::arm::{Arms, DualConfig, Side, DOF};
use crate::geometry::{Pose, ShapePrimitive, Vec3};

/// Convex solid used as an obstacle or attached-object proxy.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Solid {
    /// Oriented box: `pose` places the box center, `half` its half extents.
    Box { pose: Pose, half: [f64; 3] },
    Sphere { center: [f64; 3], radius: f64 },
}

impl Solid {
    /// Spheres stay spheres; every other primitive is replaced by its
    /// bounding box. Axial shapes get the box spun about their axis to line
    /// up with world x where possible.
    pub fn from_primitive(shape: &ShapePrimitive, pose: &Pose) -> Solid {
        match shape {
            ShapePrimitive::Sphere { radius } => Solid::Sphere {
                center: pose.translation.into(),
                radius: *radius,
            },
            ShapePrimitive::Cylinder { .. } | ShapePrimitive::Cone { .. } => {
                let z = pose.transform_vector(&Vec3::z());
                let mut x = Vec3::x() - z * z.x;
                if x.norm() < 1e-6 {
                    x = Vec3::y() - z * z.y;
                }
                let x = x.normalize();
                let m = Matrix3::from_columns(&[x, z.cross(&x), z]);
                Solid::Box {
                    pose: Pose::from_rotation_matrix(&m, pose.translation),
                    half: shape.half_extents().into(),
                }
            }
            _ => Solid::Box {
                pose: *pose,
                half: shape.half_extents().into(),
            },
        }
    }

    pub fn aabb_box(min: Vec3, max: Vec3) -> Solid {
        Solid::Box {
            pose: Pose::from_translation((min + max) * 0.5),
            half: ((max - min) * 0.5).into(),
        }
    }

    pub fn bounding_sphere(&self) -> (Vec3, f64) {
        match self {
            Solid::Box { pose, half } => (pose.translation, Vec3::from(*half).norm()),
            Solid::Sphere { center, radius } => (Vec3::from(*center), *radius),
        }
    }

    pub fn transformed(&self, p: &Pose) -> Solid {
        match self {
            Solid::Box { pose, half } => Solid::Box {
                pose: p.compose(pose),
                half: *half,
            },
            Solid::Sphere { center, radius } => Solid::Sphere {
                center: p.transform_point(&Vec3::from(*center)).into(),
                radius: *radius,
            },
        }
    }

    pub fn contains(&self, x: &Vec3) -> bool {
        match self {
            Solid::Box { pose, half } => {
                let l = pose.inverse().transform_point(x);
                (0..3).all(|i| l[i].abs() <= half[i])
            }
            Solid::Sphere { center, radius } => (x - Vec3::from(*center)).norm() <= *radius,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub name: String,
    pub solid: Solid,
}

/// An object rigidly held by a gripper. `offset` is the object pose in the
/// tool frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Attached {
    pub shape: ShapePrimitive,
    pub offset: Pose,
    /// Held by both grippers; the other arm's hand may touch it.
    pub shared: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollisionWorld {
    pub obstacles: Vec<Obstacle>,
    pub attached: [Option<Attached>; 2],
    /// Minimum clearance (m) between any two bodies.
    pub margin: f64,
}

impl Default for CollisionWorld {
    fn default() -> Self {
        CollisionWorld {
            obstacles: Vec::new(),
            attached: [None, None],
            margin: 0.005,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Body {
    Link(Side, usize),
    Attached(Side),
    Obstacle(usize),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CollisionReport {
    pub pairs: Vec<(Body, Body)>,
}

impl CollisionReport {
    pub fn is_free(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn involves(&self, b: Body) -> bool {
        self.pairs.iter().any(|(x, y)| *x == b || *y == b)
    }

    pub fn arm_arm(&self) -> bool {
        self.pairs.iter().any(|p| {
            matches!(
                p,
                (Body::Link(Side::Left, _) | Body::Attached(Side::Left), Body::Link(Side::Right, _) | Body::Attached(Side::Right))
            )
        })
    }
}

/// Links from this index on count as the hand when a shared object is held.
const HAND_LINKS: usize = DOF - 1;

struct Posed {
    capsules: Vec<(Vec3, Vec3, f64, usize)>,
    attached: Option<(Solid, bool)>,
}

impl CollisionWorld {
    pub fn with_obstacle(mut self, name: &str, solid: Solid) -> Self {
        self.obstacles.push(Obstacle { name: name.to_string(), solid });
        self
    }

    pub fn without(&self, name: &str) -> CollisionWorld {
        let mut w = self.clone();
        w.obstacles.retain(|o| o.name != name);
        w
    }

    fn pose_arms(&self, arms: &Arms, c: &DualConfig) -> [Posed; 2] {
        Side::BOTH.map(|side| {
            let model = arms.get(side);
            let q = c.get(side);
            let attached = self.attached[side.index()].map(|a| {
                let tool = model.link_poses(q).tool;
                (Solid::from_primitive(&a.shape, &tool.compose(&a.offset)), a.shared)
            });
            Posed {
                capsules: model.world_capsules(q),
                attached,
            }
        })
    }

    /// All colliding body pairs at configuration `c`.
    pub fn check(&self, arms: &Arms, c: &DualConfig) -> CollisionReport {
        let mut report = CollisionReport::default();
        self.scan(arms, c, &mut |a, b| {
            report.pairs.push((a, b));
            true
        });
        report
    }

    pub fn is_free(&self, arms: &Arms, c: &DualConfig) -> bool {
        let mut hit = false;
        self.scan(arms, c, &mut |_, _| {
            hit = true;
            false
        });
        !hit
    }

    /// Visits colliding pairs; stops when `visit` returns false.
    fn scan(&self, arms: &Arms, c: &DualConfig, visit: &mut dyn FnMut(Body, Body) -> bool) {
        let m = self.margin;
        let posed = self.pose_arms(arms, c);
        for side in Side::BOTH {
            let p = &posed[side.index()];
            for (oi, o) in self.obstacles.iter().enumerate() {
                for (ci, (a, b, r, _)) in p.capsules.iter().enumerate() {
                    if capsule_solid_hit(a, b, *r + m, &o.solid) && !visit(Body::Link(side, ci), Body::Obstacle(oi)) {
                        return;
                    }
                }
                if let Some((s, _)) = &p.attached {
                    if solids_hit(s, &o.solid, m) && !visit(Body::Attached(side), Body::Obstacle(oi)) {
                        return;
                    }
                }
            }
        }
        let (l, r) = (&posed[0], &posed[1]);
        for (li, (a1, b1, r1, _)) in l.capsules.iter().enumerate() {
            for (ri, (a2, b2, r2, _)) in r.capsules.iter().enumerate() {
                if segment_segment_distance(a1, b1, a2, b2) < r1 + r2 + m
                    && !visit(Body::Link(Side::Left, li), Body::Link(Side::Right, ri))
                {
                    return;
                }
            }
        }
        for (holder, other, hs) in [(l, r, Side::Left), (r, l, Side::Right)] {
            if let Some((s, shared)) = &holder.attached {
                for (ci, (a, b, rad, link)) in other.capsules.iter().enumerate() {
                    if *shared && *link >= HAND_LINKS {
                        continue;
                    }
                    if capsule_solid_hit(a, b, *rad + m, s)
                        && !visit(Body::Link(hs.other(), ci), Body::Attached(hs))
                    {
                        return;
                    }
                }
            }
        }
        if let (Some((s1, sh1)), Some((s2, sh2))) = (&l.attached, &r.attached) {
            if !(*sh1 && *sh2) && solids_hit(s1, s2, m) {
                visit(Body::Attached(Side::Left), Body::Attached(Side::Right));
            }
        }
    }
}

pub fn check_collision(world: &CollisionWorld, arms: &Arms, c: &DualConfig) -> CollisionReport {
    world.check(arms, c)
}

/// Closest distance between segments `p1q1` and `p2q2`.
pub fn segment_segment_distance(p1: &Vec3, q1: &Vec3, p2: &Vec3, q2: &Vec3) -> f64 {
    let d1 = q1 - p1;
    let d2 = q2 - p2;
    let r = p1 - p2;
    let a = d1.dot(&d1);
    let e = d2.dot(&d2);
    let f = d2.dot(&r);
    let eps = 1e-15;
    let (s, t);
    if a <= eps && e <= eps {
        return r.norm();
    }
    if a <= eps {
        s = 0.0;
        t = (f / e).clamp(0.0, 1.0);
    } else {
        let c = d1.dot(&r);
        if e <= eps {
            t = 0.0;
            s = (-c / a).clamp(0.0, 1.0);
        } else {
            let b = d1.dot(&d2);
            let denom = a * e - b * b;
            let mut s0 = if denom > eps { ((b * f - c * e) / denom).clamp(0.0, 1.0) } else { 0.0 };
            let mut t0 = (b * s0 + f) / e;
            if t0 < 0.0 {
                t0 = 0.0;
                s0 = (-c / a).clamp(0.0, 1.0);
            } else if t0 > 1.0 {
                t0 = 1.0;
                s0 = ((b - c) / a).clamp(0.0, 1.0);
            }
            s = s0;
            t = t0;
        }
    }
    ((p1 + d1 * s) - (p2 + d2 * t)).norm()
}

pub fn point_segment_distance(x: &Vec3, a: &Vec3, b: &Vec3) -> f64 {
    let d = b - a;
    let len2 = d.norm_squared();
    let t = if len2 > 0.0 { ((x - a).dot(&d) / len2).clamp(0.0, 1.0) } else { 0.0 };
    (x - (a + d * t)).norm()
}

/// Distance from a point in the box frame to a centered box.
fn point_box_distance(x: &Vec3, half: &Vec3) -> f64 {
    let mut d2 = 0.0;
    for i in 0..3 {
        let e = x[i].abs() - half[i];
        if e > 0.0 {
            d2 += e * e;
        }
    }
    d2.sqrt()
}

/// Distance between segment `ab` and an oriented box. The distance along the
/// segment is convex, so a golden-section search finds its minimum.
pub fn segment_box_distance(a: &Vec3, b: &Vec3, pose: &Pose, half: &Vec3) -> f64 {
    let inv = pose.inverse();
    let la = inv.transform_point(a);
    let lb = inv.transform_point(b);
    let f = |t: f64| point_box_distance(&(la + (lb - la) * t), half);
    golden_min(f, 0.0, 1.0)
}

fn golden_min(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    const INV_PHI: f64 = 0.618_033_988_749_894_8;
    let mut x1 = hi - INV_PHI * (hi - lo);
    let mut x2 = lo + INV_PHI * (hi - lo);
    let (mut f1, mut f2) = (f(x1), f(x2));
    let mut best = f(lo).min(f(hi)).min(f1).min(f2);
    for _ in 0..48 {
        if best == 0.0 {
            return 0.0;
        }
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - INV_PHI * (hi - lo);
            f1 = f(x1);
            best = best.min(f1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + INV_PHI * (hi - lo);
            f2 = f(x2);
            best = best.min(f2);
        }
        if hi - lo < 1e-10 {
            break;
        }
    }
    best
}

/// True when a capsule of radius `r` around `ab` comes within `r` of `s`
/// (the margin is already folded into `r`).
fn capsule_solid_hit(a: &Vec3, b: &Vec3, r: f64, s: &Solid) -> bool {
    let (c, br) = s.bounding_sphere();
    let mid = (a + b) * 0.5;
    let half_len = (b - a).norm() * 0.5;
    if (mid - c).norm() > half_len + r + br {
        return false;
    }
    match s {
        Solid::Box { pose, half } => segment_box_distance(a, b, pose, &Vec3::from(*half)) < r,
        Solid::Sphere { center, radius } => point_segment_distance(&Vec3::from(*center), a, b) < r + radius,
    }
}

/// Separating-axis test with both boxes grown by half the margin.
pub fn obb_overlap(p1: &Pose, h1: &Vec3, p2: &Pose, h2: &Vec3, margin: f64) -> bool {
    let h1 = h1.add_scalar(margin * 0.5);
    let h2 = h2.add_scalar(margin * 0.5);
    let r1 = p1.rotation_matrix();
    let r2 = p2.rotation_matrix();
    let t = p2.translation - p1.translation;
    let rot: Matrix3<f64> = r1.transpose() * r2;
    let abs = rot.abs().add_scalar(1e-12);
    let tl = r1.transpose() * t;
    for i in 0..3 {
        let ra = h1[i];
        let rb = h2[0] * abs[(i, 0)] + h2[1] * abs[(i, 1)] + h2[2] * abs[(i, 2)];
        if tl[i].abs() > ra + rb {
            return false;
        }
    }
    for j in 0..3 {
        let ra = h1[0] * abs[(0, j)] + h1[1] * abs[(1, j)] + h1[2] * abs[(2, j)];
        let rb = h2[j];
        let proj = tl[0] * rot[(0, j)] + tl[1] * rot[(1, j)] + tl[2] * rot[(2, j)];
        if proj.abs() > ra + rb {
            return false;
        }
    }
    for i in 0..3 {
        for j in 0..3 {
            let (i1, i2) = ((i + 1) % 3, (i + 2) % 3);
            let (j1, j2) = ((j + 1) % 3, (j + 2) % 3);
            let ra = h1[i1] * abs[(i2, j)] + h1[i2] * abs[(i1, j)];
            let rb = h2[j1] * abs[(i, j2)] + h2[j2] * abs[(i, j1)];
            let proj = (tl[i2] * rot[(i1, j)] - tl[i1] * rot[(i2, j)]).abs();
            if proj > ra + rb {
                return false;
            }
        }
    }
    true
}

fn solids_hit(a: &Solid, b: &Solid, margin: f64) -> bool {
    match (a, b) {
        (Solid::Box { pose: p1, half: h1 }, Solid::Box { pose: p2, half: h2 }) => {
            obb_overlap(p1, &Vec3::from(*h1), p2, &Vec3::from(*h2), margin)
        }
        (Solid::Sphere { center, radius }, Solid::Box { pose, half })
        | (Solid::Box { pose, half }, Solid::Sphere { center, radius }) => {
            let l = pose.inverse().transform_point(&Vec3::from(*center));
            point_box_distance(&l, &Vec3::from(*half)) < radius + margin
        }
        (Solid::Sphere { center: c1, radius: r1 }, Solid::Sphere { center: c2, radius: r2 }) => {
            (Vec3::from(*c1) - Vec3::from(*c2)).norm() < r1 + r2 + margin
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::arm::JointVector;
    use crate::skill_graph::{ToolKind, ToolSpec};
    use proptest::prelude::*;

    fn arms() -> Arms {
        Arms::default_pair(&ToolSpec {
            id: "t".into(),
            kind: ToolKind::TwoFingerGripper,
            max_opening: 0.085,
            finger_length: 0.05,
        })
    }

    /// Brute-force segment–segment distance by dense sampling of both
    /// parameters followed by local refinement.
    fn brute_seg_seg(p1: &Vec3, q1: &Vec3, p2: &Vec3, q2: &Vec3) -> f64 {
        let n = 200;
        let mut best = f64::INFINITY;
        for i in 0..=n {
            let s = i as f64 / n as f64;
            let x = p1 + (q1 - p1) * s;
            best = best.min(point_segment_distance(&x, p2, q2));
        }
        best
    }

    fn brute_seg_box(a: &Vec3, b: &Vec3, pose: &Pose, half: &Vec3) -> f64 {
        let inv = pose.inverse();
        (0..=4000)
            .map(|i| {
                let x = a + (b - a) * (i as f64 / 4000.0);
                point_box_distance(&inv.transform_point(&x), half)
            })
            .fold(f64::INFINITY, f64::min)
    }

    fn v() -> impl Strategy<Value = Vec3> {
        (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64).prop_map(|(x, y, z)| Vec3::new(x, y, z))
    }

    proptest! {
        #[test]
        fn segment_distance_matches_sampling(p1 in v(), q1 in v(), p2 in v(), q2 in v()) {
            let d = segment_segment_distance(&p1, &q1, &p2, &q2);
            let brute = brute_seg_seg(&p1, &q1, &p2, &q2);
            prop_assert!(d <= brute + 1e-9);
            prop_assert!(d >= brute - 0.02);
        }

        #[test]
        fn segment_box_matches_sampling(a in v(), b in v(), ax in v(), ang in -3.0..3.0f64,
                                        hx in 0.05..0.5f64, hy in 0.05..0.5f64, hz in 0.05..0.5f64) {
            prop_assume!(ax.norm() > 0.1);
            let pose = Pose::from_axis_angle(ax, ang, Vec3::new(0.1, -0.2, 0.05));
            let half = Vec3::new(hx, hy, hz);
            let d = segment_box_distance(&a, &b, &pose, &half);
            let brute = brute_seg_box(&a, &b, &pose, &half);
            prop_assert!((d - brute).abs() < 1e-3, "{} vs {}", d, brute);
        }

        #[test]
        fn sat_agrees_with_vertex_containment(ax in v(), ang in -3.0..3.0f64, t in v()) {
            prop_assume!(ax.norm() > 0.1);
            let p1 = Pose::identity();
            let h = Vec3::new(0.3, 0.2, 0.1);
            let p2 = Pose::from_axis_angle(ax, ang, t);
            let overlap = obb_overlap(&p1, &h, &p2, &h, 0.0);
            // any vertex of one box inside the other implies overlap
            let corners = |p: Pose| (0..8).map(move |k| {
                let s = Vec3::new(
                    if k & 1 == 0 { -1.0 } else { 1.0 },
                    if k & 2 == 0 { -1.0 } else { 1.0 },
                    if k & 4 == 0 { -1.0 } else { 1.0 },
                );
                p.transform_point(&h.component_mul(&s))
            });
            let b1 = Solid::Box { pose: p1, half: h.into() };
            let b2 = Solid::Box { pose: p2, half: h.into() };
            if corners(p2).any(|c| b1.contains(&c)) || corners(p1).any(|c| b2.contains(&c)) {
                prop_assert!(overlap);
            }
            // a separating face plane of box 1 implies no overlap
            let inv = p1.inverse();
            let sep = (0..3).any(|i| corners(p2).all(|c| inv.transform_point(&c)[i] > h[i] + 1e-9)
                || corners(p2).all(|c| inv.transform_point(&c)[i] < -h[i] - 1e-9));
            if sep {
                prop_assert!(!overlap);
            }
        }
    }

    #[test]
    fn home_in_empty_world_is_free() {
        let w = CollisionWorld::default();
        assert!(w.check(&arms(), &DualConfig::home()).is_free());
    }

    #[test]
    fn box_on_left_tool_collides_with_left_arm() {
        let a = arms();
        let tool = a.left.link_poses(&JointVector::zeros()).tool;
        let w = CollisionWorld::default().with_obstacle(
            "block",
            Solid::Box {
                pose: Pose::from_translation(tool.translation),
                half: [0.03; 3],
            },
        );
        let r = w.check(&a, &DualConfig::home());
        assert!(r.pairs.iter().any(|(x, _)| matches!(x, Body::Link(Side::Left, _))));
        assert!(!r.pairs.iter().any(|(x, _)| matches!(x, Body::Link(Side::Right, _))));
    }

    #[test]
    fn arms_meeting_over_the_box_collide() {
        let a = arms();
        let target = Pose::rot_x(std::f64::consts::PI).with_translation(Vec3::new(0.42, 0.0, 0.25));
        let params = crate::motion::arm::IkParams::default();
        let ql = a.left.solve_ik(&target, &JointVector::zeros(), &params).unwrap();
        let qr = a.right.solve_ik(&target, &JointVector::zeros(), &params).unwrap();
        let c = DualConfig { left: ql, right: qr };
        // oracle: the two hand segments end at the same point
        let lc = a.left.world_capsules(&ql);
        let rc = a.right.world_capsules(&qr);
        let closest = lc
            .iter()
            .flat_map(|x| rc.iter().map(move |y| segment_segment_distance(&x.0, &x.1, &y.0, &y.1) - x.2 - y.2))
            .fold(f64::INFINITY, f64::min);
        assert!(closest < 0.0);
        let r = CollisionWorld::default().check(&a, &c);
        assert!(r.arm_arm());
    }

    #[test]
    fn attached_object_checked_against_obstacles() {
        let a = arms();
        let tool = a.left.link_poses(&JointVector::zeros()).tool;
        let mut w = CollisionWorld::default();
        w.attached[0] = Some(Attached {
            shape: ShapePrimitive::Box { extents: [0.06, 0.06, 0.06] },
            offset: Pose::identity(),
            shared: false,
        });
        let below = tool.translation - Vec3::new(0.0, 0.0, 0.032);
        let w = w.with_obstacle("slab", Solid::aabb_box(below - Vec3::new(0.1, 0.1, 0.01), below + Vec3::new(0.1, 0.1, 0.0)));
        let r = w.check(&a, &DualConfig::home());
        assert!(r.involves(Body::Attached(Side::Left)));
    }
}
