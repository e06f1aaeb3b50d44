//! Kinematic packing world: storage bins, packing box, object instances,
//! grippers with a geometric grasp model, and a canonical state hash.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::f64::consts::PI;
use std::sync::Arc;

use crate::error::SimError;
use crate::geometry::{Aabb, Pose, ShapePrimitive, Vec3};
use crate::motion::collision::point_segment_distance;
use crate::motion::{Arms, Attached, CollisionWorld, DualConfig, GripperAction, JointPath, Side, Solid};
use crate::skill_graph::{ObjectCategory, ObjectSpec, Rigidity, SkillGraph};

/// Tolerance below the commanded close width that still counts as contact.
pub const CLOSE_TOLERANCE: f64 = 0.005;
/// Distance from the grasp center to the graspable feature that still counts.
pub const PICK_RADIUS: f64 = 0.04;
/// Simulated seconds per radian of ∞-norm joint motion.
pub const SECONDS_PER_RADIAN: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinMissRate {
    pub bin: usize,
    pub miss_rate: f64,
}

/// Perception and execution noise knobs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseProfile {
    /// Gaussian depth noise on every observed point (m).
    pub depth_sigma: f64,
    /// Fraction of observed points dropped.
    pub dropout: f64,
    /// Probability an instance is missing from a segmentation.
    pub miss_rate: f64,
    /// Probability a slippery object slips out on a grasp.
    pub slip_probability: f64,
    /// Standard deviation of grasp execution error (m for position, rad for
    /// rotation about the approach axis).
    pub pose_jitter: f64,
    /// Per-bin overrides of `miss_rate`.
    #[serde(default)]
    pub bin_miss_rate: Vec<BinMissRate>,
}

impl Default for NoiseProfile {
    fn default() -> Self {
        NoiseProfile::zero()
    }
}

impl NoiseProfile {
    pub fn zero() -> Self {
        NoiseProfile {
            depth_sigma: 0.0,
            dropout: 0.0,
            miss_rate: 0.0,
            slip_probability: 0.0,
            pose_jitter: 0.0,
            bin_miss_rate: Vec::new(),
        }
    }

    /// Calibrated so every category stays at or above 85 % per-object
    /// success with recovery enabled.
    pub fn lab() -> Self {
        NoiseProfile {
            depth_sigma: 0.001,
            dropout: 0.3,
            miss_rate: 0.05,
            slip_probability: 0.1,
            pose_jitter: 0.002,
            bin_miss_rate: Vec::new(),
        }
    }

    /// Harsher setting standing in for the wrist-camera-only setup.
    pub fn competition() -> Self {
        NoiseProfile {
            depth_sigma: 0.002,
            dropout: 0.4,
            miss_rate: 0.1,
            slip_probability: 0.2,
            pose_jitter: 0.004,
            bin_miss_rate: Vec::new(),
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "zero" => Some(Self::zero()),
            "lab" => Some(Self::lab()),
            "competition" => Some(Self::competition()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let probs = [self.dropout, self.miss_rate, self.slip_probability]
            .into_iter()
            .chain(self.bin_miss_rate.iter().map(|b| b.miss_rate));
        for p in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(SimError::InvalidNoise(format!("probability {p} outside [0, 1]")));
            }
        }
        if !(self.depth_sigma >= 0.0 && self.pose_jitter >= 0.0) {
            return Err(SimError::InvalidNoise("negative standard deviation".into()));
        }
        Ok(())
    }

    pub fn miss_rate_for(&self, bin: Option<usize>) -> f64 {
        bin.and_then(|b| self.bin_miss_rate.iter().find(|o| o.bin == b))
            .map_or(self.miss_rate, |o| o.miss_rate)
    }
}

/// Open-top container on the table: floor at z = 0, four thin walls.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContainerSpec {
    pub center: [f64; 2],
    pub interior: [f64; 2],
    pub wall_height: f64,
    pub wall_thickness: f64,
}

impl ContainerSpec {
    pub fn interior_aabb(&self) -> Aabb {
        let c = Vec3::new(self.center[0], self.center[1], self.wall_height * 0.5);
        Aabb::from_center_half(c, Vec3::new(self.interior[0] * 0.5, self.interior[1] * 0.5, self.wall_height * 0.5))
    }

    pub fn walls(&self) -> Vec<Solid> {
        let (cx, cy) = (self.center[0], self.center[1]);
        let (hx, hy) = (self.interior[0] * 0.5, self.interior[1] * 0.5);
        let t = self.wall_thickness;
        let h = self.wall_height;
        vec![
            Solid::aabb_box(Vec3::new(cx + hx, cy - hy - t, 0.0), Vec3::new(cx + hx + t, cy + hy + t, h)),
            Solid::aabb_box(Vec3::new(cx - hx - t, cy - hy - t, 0.0), Vec3::new(cx - hx, cy + hy + t, h)),
            Solid::aabb_box(Vec3::new(cx - hx, cy + hy, 0.0), Vec3::new(cx + hx, cy + hy + t, h)),
            Solid::aabb_box(Vec3::new(cx - hx, cy - hy - t, 0.0), Vec3::new(cx + hx, cy - hy, h)),
        ]
    }

    pub fn center3(&self) -> Vec3 {
        Vec3::new(self.center[0], self.center[1], 0.0)
    }

    /// Segment a tool touches to fold each flap shut, in flap order: above
    /// the wall tops, a little inboard, spanning the middle half of the wall.
    pub fn flap_push_segments(&self) -> [(Vec3, Vec3); 4] {
        let (hx, hy) = (self.interior[0] * 0.5, self.interior[1] * 0.5);
        let z = self.wall_height + 0.04;
        let c = self.center3();
        let inset = 0.03;
        let along_y = |x: f64| (c + Vec3::new(x, -hy * 0.5, z), c + Vec3::new(x, hy * 0.5, z));
        let along_x = |y: f64| (c + Vec3::new(-hx * 0.5, y, z), c + Vec3::new(hx * 0.5, y, z));
        [along_y(hx - inset), along_y(-hx + inset), along_x(hy - inset), along_x(-hy + inset)]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Layout {
    pub bins: Vec<ContainerSpec>,
    pub packing_box: ContainerSpec,
    /// Minimum gap between a spawned object and the bin walls (m).
    pub spawn_margin: f64,
    /// Stir displacement bound (m) and yaw bound (rad).
    pub stir_shift: f64,
    pub stir_yaw: f64,
}

impl Default for Layout {
    fn default() -> Self {
        let bin = |y: f64| ContainerSpec {
            center: [0.36, y],
            interior: [0.30, 0.26],
            wall_height: 0.05,
            wall_thickness: 0.01,
        };
        Layout {
            bins: vec![bin(0.30), bin(-0.30)],
            packing_box: ContainerSpec {
                center: [0.42, 0.0],
                interior: [0.30, 0.24],
                wall_height: 0.06,
                wall_thickness: 0.01,
            },
            spawn_margin: 0.04,
            stir_shift: 0.03,
            stir_yaw: 30f64.to_radians(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    /// Resting on its base with a random yaw.
    #[default]
    Upright,
    /// Longitudinal axis horizontal.
    Lying,
    /// Units placed in pairs, the second on top of the first.
    Stacked,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stock {
    pub object: String,
    pub bin: usize,
    pub count: u32,
    #[serde(default)]
    pub placement: Placement,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    #[serde(default)]
    pub layout: Layout,
    #[serde(default)]
    pub stock: Vec<Stock>,
    #[serde(default)]
    pub noise: NoiseProfile,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectStatus {
    InBin(usize),
    Grasped(Side),
    InBox,
    Dropped,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectState {
    pub id: u32,
    pub spec: ObjectSpec,
    pub pose: Pose,
    pub status: ObjectStatus,
}

impl ObjectState {
    /// World position of the volume centroid.
    pub fn centroid(&self) -> Vec3 {
        self.pose.transform_point(&self.spec.shape.centroid())
    }

    pub fn is_free(&self) -> bool {
        !matches!(self.status, ObjectStatus::Grasped(_))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeldObject {
    pub id: u32,
    /// Object pose in the tool frame.
    pub offset: Pose,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gripper {
    pub opening: f64,
    pub max_opening: f64,
    pub attached: Option<HeldObject>,
    /// Object that slipped during the grasp; it rides along until the end of
    /// the current path and then falls.
    pub slipping: Option<HeldObject>,
    /// Dual-arm object touched by this gripper, waiting for the other hand.
    pub contact: Option<u32>,
}

impl Gripper {
    fn new(max_opening: f64) -> Self {
        Gripper {
            opening: max_opening,
            max_opening,
            attached: None,
            slipping: None,
            contact: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraspOutcome {
    Attached(u32),
    /// First hand on a two-handed object.
    Contact(u32),
    Slipped(u32),
    Missed,
}

/// Replayable world mutation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    ApplyPath(JointPath),
    Perturb { bin: usize, seed: u64 },
    Hold(f64),
    ReleaseAll,
    Equip { side: Side, max_opening: f64 },
}

/// Flap order: +x, -x, +y, -y edges of the packing box.
pub const FLAP_NAMES: [&str; 4] = ["far", "near", "left", "right"];

#[derive(Clone, Debug)]
pub struct WorldState {
    pub robot: Arc<Arms>,
    pub layout: Layout,
    pub objects: Vec<ObjectState>,
    pub flaps_closed: [bool; 4],
    pub arms: DualConfig,
    pub grippers: [Gripper; 2],
    pub clock: f64,
    pub noise: NoiseProfile,
    pub rng: ChaCha8Rng,
}

/// Depth of the lowest point below the center and height of the highest
/// point above it, for a primitive rotated by `rot`.
pub fn vertical_extent(shape: &ShapePrimitive, rot: &Pose) -> (f64, f64) {
    let axis = rot.transform_vector(&Vec3::z());
    let az = axis.z.clamp(-1.0, 1.0);
    let lateral = (1.0 - az * az).max(0.0).sqrt();
    match *shape {
        ShapePrimitive::Sphere { radius } => (radius, radius),
        ShapePrimitive::Cylinder { radius, height } => {
            let e = radius * lateral + height * 0.5 * az.abs();
            (e, e)
        }
        ShapePrimitive::Cone { radius, height } => {
            let h = height * 0.5;
            // apex at +h along the axis, base rim at -h
            let apex = az * h;
            let rim_low = -az * h - radius * lateral;
            let rim_high = -az * h + radius * lateral;
            (-(apex.min(rim_low)), apex.max(rim_high))
        }
        _ => {
            let half = shape.half_extents();
            let m = rot.rotation_matrix();
            let e: f64 = (0..3).map(|j| m[(2, j)].abs() * half[j]).sum();
            (e, e)
        }
    }
}

/// Half extents of the world-axis-aligned box around a posed primitive.
pub fn world_half_extents(shape: &ShapePrimitive, pose: &Pose) -> Vec3 {
    match *shape {
        ShapePrimitive::Sphere { radius } => Vec3::repeat(radius),
        ShapePrimitive::Cylinder { radius, height } | ShapePrimitive::Cone { radius, height } => {
            let a = pose.transform_vector(&Vec3::z());
            a.map(|c| radius * (1.0 - c * c).max(0.0).sqrt() + 0.5 * height * c.abs())
        }
        _ => {
            let half = shape.half_extents();
            let m = pose.rotation_matrix();
            Vec3::from_fn(|i, _| (0..3).map(|j| m[(i, j)].abs() * half[j]).sum())
        }
    }
}

fn horizontal_radius(shape: &ShapePrimitive, pose: &Pose) -> f64 {
    match *shape {
        ShapePrimitive::Sphere { radius } => radius,
        ShapePrimitive::Cylinder { radius, height } | ShapePrimitive::Cone { radius, height } => {
            let a = pose.transform_vector(&Vec3::z());
            radius + 0.5 * height * (a.x * a.x + a.y * a.y).sqrt()
        }
        _ => {
            let h = shape.half_extents();
            let mut r: f64 = 0.0;
            for sx in [-1.0, 1.0] {
                for sy in [-1.0, 1.0] {
                    for sz in [-1.0, 1.0] {
                        let c = pose.transform_vector(&Vec3::new(sx * h.x, sy * h.y, sz * h.z));
                        r = r.max((c.x * c.x + c.y * c.y).sqrt());
                    }
                }
            }
            r
        }
    }
}

impl WorldState {
    /// Seeded initial placement of the stocked objects, arms at home, flaps
    /// open, clock at zero.
    pub fn reset(scene: &SceneSpec, graph: &SkillGraph, robot: Arc<Arms>, seed: u64) -> Result<WorldState, SimError> {
        scene.noise.validate()?;
        let max_opening = graph.tool("two_finger_gripper").map_or(0.085, |t| t.max_opening);
        let mut world = WorldState {
            robot,
            layout: scene.layout.clone(),
            objects: Vec::new(),
            flaps_closed: [false; 4],
            arms: DualConfig::home(),
            grippers: [Gripper::new(max_opening), Gripper::new(max_opening)],
            clock: 0.0,
            noise: scene.noise.clone(),
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x6a09_e667_f3bc_c908),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // area lower bound per bin
        for (b, bin) in scene.layout.bins.iter().enumerate() {
            let area: f64 = scene
                .stock
                .iter()
                .filter(|s| s.bin == b)
                .map(|s| {
                    let spec = graph.object(&s.object);
                    let r = spec.map_or(0.0, |o| horizontal_radius(&o.shape, &upright_rotation(&o.shape, s.placement)));
                    let footprints = if s.placement == Placement::Stacked { s.count.div_ceil(2) } else { s.count };
                    footprints as f64 * PI * r * r
                })
                .sum();
            if area > bin.interior[0] * bin.interior[1] {
                return Err(SimError::ScenarioInfeasible(format!("bin {b} cannot hold its stock")));
            }
        }
        for s in &scene.stock {
            let spec = graph.object(&s.object).ok_or_else(|| SimError::UnknownObject(s.object.clone()))?;
            if s.bin >= scene.layout.bins.len() {
                return Err(SimError::UnknownBin(s.bin));
            }
            for k in 0..s.count {
                if s.placement == Placement::Stacked && k % 2 == 1 {
                    let below = world.objects.last().expect("stack base placed").pose;
                    world.spawn_at(spec, s.bin, below.translation.x, below.translation.y, below.rotation);
                    continue;
                }
                world.spawn_random(spec, s.bin, s.placement, &mut rng)?;
            }
        }
        Ok(world)
    }

    fn spawn_random(&mut self, spec: &ObjectSpec, bin: usize, placement: Placement, rng: &mut ChaCha8Rng) -> Result<(), SimError> {
        let b = self.layout.bins[bin].clone();
        let margin = self.layout.spawn_margin;
        for _ in 0..500 {
            let yaw = rng.random_range(0.0..2.0 * PI);
            let rot = Pose::rot_z(yaw).compose(&upright_rotation(&spec.shape, placement));
            let r = horizontal_radius(&spec.shape, &rot);
            let hx = b.interior[0] * 0.5 - r - margin;
            let hy = b.interior[1] * 0.5 - r - margin;
            if hx < 0.0 || hy < 0.0 {
                break;
            }
            let x = b.center[0] + rng.random_range(-hx..=hx);
            let y = b.center[1] + rng.random_range(-hy..=hy);
            let clear = self.objects.iter().filter(|o| o.status == ObjectStatus::InBin(bin)).all(|o| {
                let ro = horizontal_radius(&o.spec.shape, &o.pose);
                let d = ((o.pose.translation.x - x).powi(2) + (o.pose.translation.y - y).powi(2)).sqrt();
                d > r + ro + 0.01
            });
            if clear {
                self.spawn_at(spec, bin, x, y, rot.rotation);
                return Ok(());
            }
        }
        Err(SimError::ScenarioInfeasible(format!("no room for {} in bin {bin}", spec.name)))
    }

    fn spawn_at(&mut self, spec: &ObjectSpec, bin: usize, x: f64, y: f64, rotation: nalgebra::UnitQuaternion<f64>) {
        let id = self.objects.len() as u32;
        let pose = Pose::new(rotation, Vec3::new(x, y, 0.0));
        let z = self.rest_height(None, &spec.shape, &pose);
        self.objects.push(ObjectState {
            id,
            spec: spec.clone(),
            pose: pose.with_translation(Vec3::new(x, y, z)),
            status: ObjectStatus::InBin(bin),
        });
    }

    /// Center height at which `shape` posed at `pose` rests on the table or
    /// on free objects beneath it.
    fn rest_height(&self, skip: Option<u32>, shape: &ShapePrimitive, pose: &Pose) -> f64 {
        let (below, _) = vertical_extent(shape, pose);
        let h = world_half_extents(shape, pose);
        let mut support: f64 = 0.0;
        for o in &self.objects {
            if Some(o.id) == skip || !o.is_free() {
                continue;
            }
            let oh = world_half_extents(&o.spec.shape, &o.pose);
            let dx = (o.pose.translation.x - pose.translation.x).abs();
            let dy = (o.pose.translation.y - pose.translation.y).abs();
            if dx < oh.x + h.x - 1e-9 && dy < oh.y + h.y - 1e-9 {
                let (_, above) = vertical_extent(&o.spec.shape, &o.pose);
                support = support.max(o.pose.translation.z + above);
            }
        }
        support + below
    }

    pub fn object(&self, id: u32) -> Option<&ObjectState> {
        self.objects.get(id as usize)
    }

    pub fn tool_pose(&self, side: Side) -> Pose {
        self.robot.get(side).link_poses(self.arms.get(side)).tool
    }

    pub fn bin_of(&self, p: &Vec3) -> Option<usize> {
        self.layout.bins.iter().position(|b| {
            let a = b.interior_aabb();
            p.x >= a.min.x && p.x <= a.max.x && p.y >= a.min.y && p.y <= a.max.y
        })
    }

    pub fn in_packing_box(&self, p: &Vec3) -> bool {
        let a = self.layout.packing_box.interior_aabb();
        p.x >= a.min.x && p.x <= a.max.x && p.y >= a.min.y && p.y <= a.max.y
    }

    /// Static obstacles (table, container walls, free objects other than
    /// `exclude`) and the objects currently held.
    pub fn collision_world(&self, exclude: &[u32]) -> CollisionWorld {
        let mut w = CollisionWorld::default().with_obstacle(
            "table",
            Solid::aabb_box(Vec3::new(-0.3, -1.0, -0.05), Vec3::new(1.2, 1.0, 0.0)),
        );
        for (b, bin) in self.layout.bins.iter().enumerate() {
            for s in bin.walls() {
                w = w.with_obstacle(&format!("bin{b}"), s);
            }
        }
        for s in self.layout.packing_box.walls() {
            w = w.with_obstacle("packing_box", s);
        }
        for o in &self.objects {
            if o.is_free() && !exclude.contains(&o.id) {
                w = w.with_obstacle(&format!("object{}", o.id), Solid::from_primitive(&o.spec.shape, &o.pose));
            }
        }
        for side in Side::BOTH {
            if let Some(h) = self.grippers[side.index()].attached {
                let o = &self.objects[h.id as usize];
                let shared = self.grippers[side.other().index()].attached.map(|x| x.id) == Some(h.id);
                if shared && side == Side::Right {
                    continue;
                }
                w.attached[side.index()] = Some(Attached {
                    shape: o.spec.shape,
                    offset: h.offset,
                    shared,
                });
            }
        }
        w
    }

    /// Chord of the closing line through `tool` inside `o` and the
    /// line-parameter interval it spans.
    pub fn closing_chord(o: &ObjectState, tool: &Pose) -> Option<(f64, f64)> {
        let inv = o.pose.inverse();
        let origin = inv.transform_point(&tool.translation);
        let dir = inv.transform_vector(&tool.transform_vector(&Vec3::y()));
        o.spec.shape.line_interval(&origin, &dir)
    }

    /// Distance from the grasp center to the object's graspable feature.
    pub fn feature_distance(o: &ObjectState, point: &Vec3) -> f64 {
        let local = o.pose.inverse().transform_point(point);
        match o.spec.category {
            ObjectCategory::SmallRigid | ObjectCategory::Cube | ObjectCategory::Sphere | ObjectCategory::SmallPrecise => {
                (local - o.spec.shape.centroid()).norm()
            }
            ObjectCategory::Cylinder => {
                let h = o.spec.shape.half_extents().z;
                let z = local.z.clamp(-h, h);
                (local - Vec3::new(0.0, 0.0, z)).norm()
            }
            _ => {
                if o.spec.shape.contains(&local) {
                    0.0
                } else {
                    o.spec.shape.surface_distance(&local)
                }
            }
        }
    }

    fn grasp_ok(&self, o: &ObjectState, tool: &Pose, close_width: f64, max_opening: f64) -> bool {
        let Some((t0, t1)) = Self::closing_chord(o, tool) else {
            return false;
        };
        let half = max_opening * 0.5;
        if o.spec.rigidity == Rigidity::Deformable {
            // cloth bunches between the fingers, so only the span they cover counts
            let covered = t1.min(half) - t0.max(-half);
            return covered > 0.0
                && covered >= close_width - CLOSE_TOLERANCE
                && Self::feature_distance(o, &tool.translation) <= PICK_RADIUS;
        }
        let chord = t1 - t0;
        chord <= max_opening
            && chord >= close_width - CLOSE_TOLERANCE
            && t0 >= -half - 1e-9
            && t1 <= half + 1e-9
            && Self::feature_distance(o, &tool.translation) <= PICK_RADIUS
    }

    /// Closes `side`'s gripper to `close_width` and attaches the object in
    /// reach, if any.
    pub fn attempt_grasp(&mut self, side: Side, close_width: f64) -> GraspOutcome {
        let g = &self.grippers[side.index()];
        if g.attached.is_some() {
            return GraspOutcome::Missed;
        }
        let max_opening = g.max_opening;
        let nominal = self.tool_pose(side);
        let mut tool = nominal;
        if self.noise.pose_jitter > 0.0 {
            let n = Normal::new(0.0, self.noise.pose_jitter).expect("valid sigma");
            let dp = Vec3::new(n.sample(&mut self.rng), n.sample(&mut self.rng), n.sample(&mut self.rng));
            let yaw = n.sample(&mut self.rng);
            tool = Pose::new(tool.rotation * nalgebra::UnitQuaternion::from_axis_angle(&Vec3::z_axis(), yaw), tool.translation + dp);
        }
        self.grippers[side.index()].opening = close_width;
        let candidate = self
            .objects
            .iter()
            .filter(|o| o.is_free() && self.grasp_ok(o, &tool, close_width, max_opening))
            .min_by(|a, b| {
                Self::feature_distance(a, &tool.translation).total_cmp(&Self::feature_distance(b, &tool.translation))
            })
            .map(|o| o.id);
        let Some(id) = candidate else {
            return GraspOutcome::Missed;
        };
        let offset = nominal.inverse().compose(&self.objects[id as usize].pose);
        let held = HeldObject { id, offset };
        let obj = &self.objects[id as usize];
        if obj.spec.category.is_dual_arm() {
            let other = side.other();
            if self.grippers[other.index()].contact != Some(id) {
                self.grippers[side.index()].contact = Some(id);
                return GraspOutcome::Contact(id);
            }
            self.grippers[other.index()].contact = None;
            let other_offset = self.tool_pose(other).inverse().compose(&obj.pose);
            self.grippers[other.index()].attached = Some(HeldObject { id, offset: other_offset });
            self.grippers[side.index()].attached = Some(held);
            self.objects[id as usize].status = ObjectStatus::Grasped(Side::Left);
            return GraspOutcome::Attached(id);
        }
        if obj.spec.slippery && self.noise.slip_probability > 0.0 && self.rng.random_bool(self.noise.slip_probability) {
            self.grippers[side.index()].slipping = Some(held);
            return GraspOutcome::Slipped(id);
        }
        self.grippers[side.index()].attached = Some(held);
        self.objects[id as usize].status = ObjectStatus::Grasped(side);
        GraspOutcome::Attached(id)
    }

    /// Opens `side`'s gripper, releasing whatever it holds.
    pub fn release(&mut self, side: Side) {
        let g = &mut self.grippers[side.index()];
        g.opening = g.max_opening;
        g.contact = None;
        if let Some(h) = g.attached.take() {
            let other = &mut self.grippers[side.other().index()];
            if other.attached.map(|x| x.id) == Some(h.id) {
                other.attached = None;
            }
            self.settle(h.id);
        }
        if let Some(h) = self.grippers[side.index()].slipping.take() {
            self.settle(h.id);
        }
    }

    pub fn release_all(&mut self) {
        for side in Side::BOTH {
            self.release(side);
        }
    }

    /// Drops a released object straight down and classifies where it landed.
    fn settle(&mut self, id: u32) {
        let o = &self.objects[id as usize];
        let pose = o.pose;
        let shape = o.spec.shape;
        self.objects[id as usize].status = ObjectStatus::Dropped;
        let z = self.rest_height(Some(id), &shape, &pose);
        let p = Vec3::new(pose.translation.x, pose.translation.y, z);
        let status = if self.in_packing_box(&p) {
            ObjectStatus::InBox
        } else if let Some(b) = self.bin_of(&p) {
            ObjectStatus::InBin(b)
        } else {
            ObjectStatus::Dropped
        };
        let o = &mut self.objects[id as usize];
        o.pose = pose.with_translation(p);
        o.status = status;
    }

    fn drop_slipped(&mut self, side: Side) {
        if let Some(h) = self.grippers[side.index()].slipping.take() {
            self.settle(h.id);
            self.objects[h.id as usize].status = ObjectStatus::Dropped;
        }
    }

    fn carry(&mut self) {
        for side in Side::BOTH {
            let tool = self.tool_pose(side);
            let g = &self.grippers[side.index()];
            if let Some(h) = g.attached {
                // a shared object follows the left hand
                if self.objects[h.id as usize].status == ObjectStatus::Grasped(side) {
                    self.objects[h.id as usize].pose = tool.compose(&h.offset);
                }
            }
            if let Some(h) = g.slipping {
                self.objects[h.id as usize].pose = tool.compose(&h.offset);
            }
        }
    }

    /// Midpoint of the push segment of flap `i`.
    pub fn flap_push_point(&self, i: usize) -> Vec3 {
        let (a, b) = self.layout.packing_box.flap_push_segments()[i];
        (a + b) * 0.5
    }

    fn touch_flaps(&mut self) {
        let segs = self.layout.packing_box.flap_push_segments();
        for side in Side::BOTH {
            let t = self.tool_pose(side).translation;
            for (i, (a, b)) in segs.iter().enumerate() {
                if point_segment_distance(&t, a, b) <= 0.03 {
                    self.flaps_closed[i] = true;
                }
            }
        }
    }

    /// Moves the arms along `path`, carrying held objects and firing gripper
    /// events on arrival at their configurations.
    pub fn apply_path(&mut self, path: &JointPath) -> Result<Vec<GraspOutcome>, SimError> {
        let Some(first) = path.configs.first() else {
            return Ok(Vec::new());
        };
        if first.distance(&self.arms) > 1e-9 {
            return Err(SimError::Desync);
        }
        let mut outcomes = Vec::new();
        let mut prev = self.arms;
        for (i, c) in path.configs.iter().enumerate() {
            self.clock += prev.distance(c) * SECONDS_PER_RADIAN;
            prev = *c;
            self.arms = *c;
            self.carry();
            self.touch_flaps();
            for e in path.events.iter().filter(|e| e.index == i) {
                match e.action {
                    GripperAction::None => {}
                    GripperAction::Open => self.release(e.side),
                    GripperAction::Close(w) => outcomes.push(self.attempt_grasp(e.side, w)),
                }
            }
        }
        for side in Side::BOTH {
            self.drop_slipped(side);
        }
        Ok(outcomes)
    }

    /// Random planar shift and yaw of every object lying in `bin`, resampled
    /// until the footprint stays inside the bin; shifted objects then settle.
    pub fn perturb_bin(&mut self, bin: usize, seed: u64) -> Result<(), SimError> {
        let b = self.layout.bins.get(bin).ok_or(SimError::UnknownBin(bin))?.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids: Vec<u32> = self
            .objects
            .iter()
            .filter(|o| o.status == ObjectStatus::InBin(bin))
            .map(|o| o.id)
            .collect();
        for &id in &ids {
            let o = &self.objects[id as usize];
            let (shape, pose) = (o.spec.shape, o.pose);
            let mut moved = pose;
            for _ in 0..100 {
                let r = self.layout.stir_shift * rng.random_range(0.0f64..1.0).sqrt();
                let a = rng.random_range(0.0..2.0 * PI);
                let yaw = rng.random_range(-self.layout.stir_yaw..=self.layout.stir_yaw);
                let rot = Pose::rot_z(yaw).compose(&Pose::new(pose.rotation, Vec3::zeros()));
                let t = pose.translation + Vec3::new(r * a.cos(), r * a.sin(), 0.0);
                let cand = Pose::new(rot.rotation, t);
                let h = world_half_extents(&shape, &cand);
                let fits = (t.x - h.x >= b.center[0] - b.interior[0] * 0.5)
                    && (t.x + h.x <= b.center[0] + b.interior[0] * 0.5)
                    && (t.y - h.y >= b.center[1] - b.interior[1] * 0.5)
                    && (t.y + h.y <= b.center[1] + b.interior[1] * 0.5);
                if fits {
                    moved = cand;
                    break;
                }
            }
            self.objects[id as usize].pose = moved;
        }
        // settle bottom-up so stacks resolve
        let mut order = ids.clone();
        order.sort_by(|a, b| {
            self.objects[*a as usize].pose.translation.z.total_cmp(&self.objects[*b as usize].pose.translation.z)
        });
        for id in order {
            let o = &self.objects[id as usize];
            let z = self.rest_height(Some(id), &o.spec.shape, &o.pose);
            let p = o.pose.translation;
            self.objects[id as usize].pose.translation = Vec3::new(p.x, p.y, z);
        }
        Ok(())
    }

    pub fn hold(&mut self, duration: f64) {
        self.clock += duration.max(0.0);
    }

    pub fn apply(&mut self, cmd: &Command) -> Result<Vec<GraspOutcome>, SimError> {
        match cmd {
            Command::ApplyPath(p) => self.apply_path(p),
            Command::Perturb { bin, seed } => self.perturb_bin(*bin, *seed).map(|_| Vec::new()),
            Command::Hold(d) => {
                self.hold(*d);
                Ok(Vec::new())
            }
            Command::ReleaseAll => {
                self.release_all();
                Ok(Vec::new())
            }
            Command::Equip { side, max_opening } => {
                let g = &mut self.grippers[side.index()];
                g.max_opening = *max_opening;
                if g.attached.is_none() {
                    g.opening = *max_opening;
                }
                Ok(Vec::new())
            }
        }
    }

    /// Canonical little-endian encoding: clock, twelve joints, both grippers,
    /// objects by id (pose as w x y z tx ty tz, status tag and argument),
    /// flap flags, then the RNG word position.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let f = |out: &mut Vec<u8>, v: f64| out.extend_from_slice(&v.to_le_bytes());
        let pose = |out: &mut Vec<u8>, p: &Pose| {
            let q = p.rotation.quaternion();
            for v in [q.w, q.i, q.j, q.k, p.translation.x, p.translation.y, p.translation.z] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        };
        f(&mut out, self.clock);
        for v in self.arms.to_array() {
            f(&mut out, v);
        }
        for g in &self.grippers {
            f(&mut out, g.opening);
            f(&mut out, g.max_opening);
            for h in [g.attached, g.slipping] {
                match h {
                    Some(h) => {
                        out.extend_from_slice(&h.id.to_le_bytes());
                        pose(&mut out, &h.offset);
                    }
                    None => {
                        out.extend_from_slice(&u32::MAX.to_le_bytes());
                        pose(&mut out, &Pose::identity());
                    }
                }
            }
            out.extend_from_slice(&g.contact.unwrap_or(u32::MAX).to_le_bytes());
        }
        for o in &self.objects {
            out.extend_from_slice(&o.id.to_le_bytes());
            pose(&mut out, &o.pose);
            let (tag, arg): (u8, u32) = match o.status {
                ObjectStatus::InBin(b) => (0, b as u32),
                ObjectStatus::Grasped(s) => (1, s.index() as u32),
                ObjectStatus::InBox => (2, 0),
                ObjectStatus::Dropped => (3, 0),
            };
            out.push(tag);
            out.extend_from_slice(&arg.to_le_bytes());
        }
        out.extend(self.flaps_closed.iter().map(|&c| c as u8));
        out.extend_from_slice(&self.rng.get_word_pos().to_le_bytes());
        out
    }

    pub fn state_hash(&self) -> String {
        hex(&Sha256::digest(self.canonical_bytes()))
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Rotation that makes a primitive rest as `placement` asks before yaw.
fn upright_rotation(shape: &ShapePrimitive, placement: Placement) -> Pose {
    match (placement, shape) {
        (Placement::Lying, ShapePrimitive::Cylinder { .. } | ShapePrimitive::Cone { .. }) => Pose::rot_y(PI / 2.0),
        _ => Pose::identity(),
    }
}

pub fn reset(scene: &SceneSpec, graph: &SkillGraph, robot: Arc<Arms>, seed: u64) -> Result<WorldState, SimError> {
    WorldState::reset(scene, graph, robot, seed)
}

pub fn apply_path(mut world: WorldState, path: &JointPath) -> Result<WorldState, SimError> {
    world.apply_path(path)?;
    Ok(world)
}

pub fn attempt_grasp(world: &mut WorldState, side: Side, close_width: f64) -> GraspOutcome {
    world.attempt_grasp(side, close_width)
}

pub fn perturb_bin(mut world: WorldState, bin: usize, seed: u64) -> Result<WorldState, SimError> {
    world.perturb_bin(bin, seed)?;
    Ok(world)
}
