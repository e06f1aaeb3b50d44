//! Parameterized manipulation templates: four pick variants, place, stir
//! and flap sealing, each emitted as a labeled Cartesian plan.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::ManipulationError;
use crate::geometry::{Aabb, Pose, ShapePrimitive, Vec3};
use crate::motion::arm::finger_radius;
use crate::motion::cartesian::solve_waypoint;
use crate::motion::{ArmTarget, Arms, CollisionWorld, DualConfig, GripperAction, IkParams, LabeledCartesianPlan, Side, Waypoint};
use crate::perception::{EdgeCandidate, PoseEstimate};
use crate::sim::{vertical_extent, world_half_extents, ContainerSpec};
use crate::skill_graph::{ObjectCategory, ObjectSpec, ToolSpec};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ManipulationParams {
    pub pregrasp_offset: f64,
    pub lift_height: f64,
    /// Wrist rotations tried by the center grasp.
    pub orientations: usize,
    /// Close this much tighter than the estimated chord.
    pub squeeze: f64,
    /// Height of the support surface under the bins (m).
    pub floor_z: f64,
    /// Fingertip clearance above the floor on top of the finger radius and
    /// the collision margin.
    pub floor_clearance: f64,
    pub corner_inset: f64,
    pub corner_pitch: f64,
    /// Rim grasp height above the cone base and inset from its surface.
    pub rim_height: f64,
    pub rim_inset: f64,
    pub edge_inset: f64,
    pub edge_depth: f64,
    pub edge_pitch: f64,
    pub cloth_close_width: f64,
    pub grid_pitch: f64,
    pub footprint_margin: f64,
    /// Free cells tried, in first-fit order, before a place gives up.
    pub place_attempts: usize,
    pub release_height: f64,
    pub above_height: f64,
    pub retreat_height: f64,
    pub transit_height: f64,
    pub stir_depth: f64,
    pub stir_inset: f64,
    pub stir_retract: f64,
    pub seal_approach: f64,
}

impl Default for ManipulationParams {
    fn default() -> Self {
        ManipulationParams {
            pregrasp_offset: 0.08,
            lift_height: 0.10,
            orientations: 8,
            squeeze: 0.004,
            floor_z: 0.0,
            floor_clearance: 0.002,
            corner_inset: 0.015,
            corner_pitch: 45f64.to_radians(),
            rim_height: 0.02,
            rim_inset: 0.012,
            edge_inset: 0.015,
            edge_depth: 0.01,
            edge_pitch: 60f64.to_radians(),
            cloth_close_width: 0.005,
            grid_pitch: 0.02,
            footprint_margin: 0.01,
            place_attempts: 40,
            release_height: 0.01,
            above_height: 0.12,
            retreat_height: 0.10,
            transit_height: 0.16,
            stir_depth: 0.03,
            stir_inset: 0.04,
            stir_retract: 0.20,
            seal_approach: 0.06,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArmAssignment {
    Left,
    Right,
    Dual,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraspSpec {
    pub arm_assignment: ArmAssignment,
    /// Tool pose at grasp closure for every arm involved, left first.
    pub grasp_poses: Vec<(Side, Pose)>,
    pub pregrasp_offset: f64,
    pub close_width: f64,
    pub lift_height: f64,
    /// Estimated object pose when the grasp closes.
    pub object_pose: Pose,
}

impl GraspSpec {
    pub fn sides(&self) -> Vec<Side> {
        self.grasp_poses.iter().map(|(s, _)| *s).collect()
    }

    /// Side whose tool the object is expected to follow.
    pub fn lead(&self) -> Side {
        self.grasp_poses[0].0
    }

    /// Object pose in the frame of `side`'s tool.
    pub fn object_offset(&self, side: Side) -> Option<Pose> {
        self.grasp_poses
            .iter()
            .find(|(s, _)| *s == side)
            .map(|(_, g)| g.inverse().compose(&self.object_pose))
    }

    /// Where the object should be when the lead tool is at `tool`.
    pub fn expected_object_pose(&self, tool: &Pose) -> Pose {
        tool.compose(&self.object_offset(self.lead()).expect("lead side is in the grasp"))
    }

    /// Tool targets that put the object at `object`.
    pub fn tool_targets(&self, object: &Pose) -> ArmTarget {
        let t = |side: Side| object.compose(&self.object_offset(side).expect("side is in the grasp").inverse());
        match self.arm_assignment {
            ArmAssignment::Left => ArmTarget::Left(t(Side::Left)),
            ArmAssignment::Right => ArmTarget::Right(t(Side::Right)),
            ArmAssignment::Dual => ArmTarget::Both {
                left: t(Side::Left),
                right: t(Side::Right),
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlaceSpec {
    /// Object pose at release.
    pub target_location: Pose,
    pub release_height: f64,
}

/// Perception output a pick template consumes.
#[derive(Clone, Copy, Debug)]
pub enum Percept<'a> {
    Pose(&'a PoseEstimate),
    /// Edge candidates ranked best first and the centroid of the cloud they
    /// came from.
    Edges { edges: &'a [EdgeCandidate], centroid: Vec3 },
}

/// What candidate grasps are checked against.
#[derive(Clone, Debug)]
pub struct GraspContext<'a> {
    pub world: &'a CollisionWorld,
    pub arms: &'a Arms,
    pub current: DualConfig,
    pub ik: IkParams,
    /// Single-arm templates try these arms in order.
    pub sides: Vec<Side>,
}

/// Tool frame with closing axis `y` and approach axis `z` at `origin`.
pub fn tool_frame(y: &Vec3, z: &Vec3, origin: Vec3) -> Pose {
    let z = z.normalize();
    let y = (y - z * y.dot(&z)).normalize();
    let x = y.cross(&z);
    Pose::from_rotation_matrix(&nalgebra::Matrix3::from_columns(&[x, y, z]), origin)
}

/// Straight-down tool pose with wrist yaw `psi`.
pub fn top_down(psi: f64, origin: Vec3) -> Pose {
    Pose::rot_z(psi).compose(&Pose::rot_x(PI)).with_translation(origin)
}

fn approach_of(tool: &Pose) -> Vec3 {
    tool.transform_vector(&Vec3::z())
}

fn shifted(p: &Pose, d: Vec3) -> Pose {
    p.with_translation(p.translation + d)
}

/// Length of the closing line through the tool point inside the object.
pub fn chord_width(shape: &ShapePrimitive, object: &Pose, tool: &Pose) -> Option<f64> {
    let inv = object.inverse();
    let origin = inv.transform_point(&tool.translation);
    let dir = inv.transform_vector(&tool.transform_vector(&Vec3::y()));
    shape.line_interval(&origin, &dir).map(|(a, b)| b - a)
}

fn arm_target(poses: &[(Side, Pose)]) -> ArmTarget {
    match poses {
        [(s, p)] => ArmTarget::single(*s, *p),
        [(Side::Left, l), (Side::Right, r)] => ArmTarget::Both { left: *l, right: *r },
        _ => panic!("grasp poses must be one arm or left then right"),
    }
}

fn map_targets(poses: &[(Side, Pose)], f: impl Fn(&Pose) -> Pose) -> Vec<(Side, Pose)> {
    poses.iter().map(|(s, p)| (*s, f(p))).collect()
}

/// Pregrasp, approach, close and lift for the given grasp poses.
fn pick_waypoints(poses: &[(Side, Pose)], close_width: f64, params: &ManipulationParams) -> Vec<Waypoint> {
    let pre = map_targets(poses, |p| shifted(p, -approach_of(p) * params.pregrasp_offset));
    let lift = map_targets(poses, |p| shifted(p, Vec3::z() * params.lift_height));
    vec![
        Waypoint::required(arm_target(&pre)).with_gripper(GripperAction::Open),
        Waypoint::required(arm_target(poses)),
        Waypoint::required(arm_target(poses)).with_gripper(GripperAction::Close(close_width)),
        Waypoint::required(arm_target(&lift)),
    ]
}

/// Solves every waypoint in turn from the current configuration.
fn reachable(ctx: &GraspContext, waypoints: &[Waypoint], salt: u64) -> bool {
    let mut q = ctx.current;
    for (i, w) in waypoints.iter().enumerate() {
        let ik = IkParams {
            seed: ctx.ik.seed.wrapping_mul(31).wrapping_add(salt * 16 + i as u64),
            ..ctx.ik
        };
        match solve_waypoint(ctx.world, ctx.arms, &w.arm.targets(), &q, &ik) {
            Some(next) => q = next,
            None => return false,
        }
    }
    true
}

fn assignment(poses: &[(Side, Pose)]) -> ArmAssignment {
    match poses {
        [(Side::Left, _)] => ArmAssignment::Left,
        [(Side::Right, _)] => ArmAssignment::Right,
        _ => ArmAssignment::Dual,
    }
}

/// Returns the first candidate whose whole pick sequence is reachable and
/// collision-free.
fn first_feasible(
    candidates: Vec<(Vec<(Side, Pose)>, f64)>,
    object_pose: Pose,
    ctx: &GraspContext,
    params: &ManipulationParams,
) -> Result<(GraspSpec, LabeledCartesianPlan), ManipulationError> {
    for (k, (poses, close_width)) in candidates.into_iter().enumerate() {
        let waypoints = pick_waypoints(&poses, close_width, params);
        if reachable(ctx, &waypoints, k as u64) {
            let spec = GraspSpec {
                arm_assignment: assignment(&poses),
                grasp_poses: poses,
                pregrasp_offset: params.pregrasp_offset,
                close_width,
                lift_height: params.lift_height,
                object_pose,
            };
            return Ok((spec, LabeledCartesianPlan::new(waypoints)));
        }
    }
    Err(ManipulationError::NoFeasibleGrasp)
}

fn clearance(tool: &ToolSpec, params: &ManipulationParams) -> f64 {
    params.floor_z + finger_radius(tool) + 0.005 + params.floor_clearance
}

/// Yaw of the top-down closing axis giving the narrowest chord.
fn narrowest_yaw(object: &ObjectSpec, pose: &Pose, at: Vec3) -> f64 {
    let n = 180;
    let widths: Vec<(f64, f64)> = (0..n)
        .map(|i| PI * i as f64 / n as f64)
        .filter_map(|psi| chord_width(&object.shape, pose, &top_down(psi, at)).map(|w| (psi, w)))
        .collect();
    let least = widths.iter().map(|w| w.1).fold(f64::INFINITY, f64::min);
    widths.iter().find(|w| w.1 <= least + 1e-6).map_or(0.0, |w| w.0)
}

/// Top-down grasp through the estimated centroid at `n` wrist rotations,
/// starting from the narrowest one. Returns the rotations with their chords.
pub fn center_grasp_candidates(
    object: &ObjectSpec,
    estimate: &PoseEstimate,
    tool: &ToolSpec,
    params: &ManipulationParams,
) -> Vec<(Pose, Option<f64>)> {
    let c = estimate.pose.transform_point(&object.shape.centroid());
    let at = Vec3::new(c.x, c.y, c.z.max(clearance(tool, params)));
    let psi0 = narrowest_yaw(object, &estimate.pose, at);
    let n = params.orientations.max(1);
    (0..n)
        .map(|k| {
            let g = top_down(psi0 + 2.0 * PI * k as f64 / n as f64, at);
            (g, chord_width(&object.shape, &estimate.pose, &g))
        })
        .collect()
}

fn pick_center(
    object: &ObjectSpec,
    estimate: &PoseEstimate,
    tool: &ToolSpec,
    ctx: &GraspContext,
    params: &ManipulationParams,
) -> Result<(GraspSpec, LabeledCartesianPlan), ManipulationError> {
    let candidates = center_grasp_candidates(object, estimate, tool, params);
    let fits = |w: f64| w + params.squeeze <= tool.max_opening;
    let widths: Vec<f64> = candidates.iter().filter_map(|(_, w)| *w).collect();
    let narrowest = widths.iter().copied().fold(f64::INFINITY, f64::min);
    if !fits(narrowest) {
        return Err(ManipulationError::WidthExceeded {
            width: narrowest,
            max_opening: tool.max_opening,
        });
    }
    let mut poses = Vec::new();
    for &side in &ctx.sides {
        for (g, w) in &candidates {
            if let Some(w) = w.filter(|w| fits(*w)) {
                poses.push((vec![(side, *g)], (w - params.squeeze).max(0.0)));
            }
        }
    }
    first_feasible(poses, estimate.pose, ctx, params)
}

fn pick_cylinder(
    object: &ObjectSpec,
    estimate: &PoseEstimate,
    tool: &ToolSpec,
    ctx: &GraspContext,
    params: &ManipulationParams,
) -> Result<(GraspSpec, LabeledCartesianPlan), ManipulationError> {
    let axis = estimate.pose.transform_vector(&Vec3::z());
    let side_on = Vec3::z().cross(&axis);
    if estimate.upright.unwrap_or(false) || side_on.norm() < 1e-6 {
        return pick_center(object, estimate, tool, ctx, params);
    }
    let closing = side_on.normalize();
    let approach = (-Vec3::z() + axis * Vec3::z().dot(&axis)).normalize();
    let c = estimate.pose.transform_point(&object.shape.centroid());
    let at = Vec3::new(c.x, c.y, c.z.max(clearance(tool, params)));
    let probe = tool_frame(&closing, &approach, at);
    let width = chord_width(&object.shape, &estimate.pose, &probe).unwrap_or(f64::INFINITY);
    if width + params.squeeze > tool.max_opening {
        return Err(ManipulationError::WidthExceeded {
            width,
            max_opening: tool.max_opening,
        });
    }
    let close = (width - params.squeeze).max(0.0);
    let mut cands = Vec::new();
    for &side in &ctx.sides {
        for sign in [1.0, -1.0] {
            cands.push((vec![(side, tool_frame(&(closing * sign), &approach, at))], close));
        }
    }
    first_feasible(cands, estimate.pose, ctx, params)
}

/// Orders a pair of world points so the left arm takes the one further
/// towards +y.
fn left_right(a: Pose, b: Pose) -> Vec<(Side, Pose)> {
    if a.translation.y >= b.translation.y {
        vec![(Side::Left, a), (Side::Right, b)]
    } else {
        vec![(Side::Left, b), (Side::Right, a)]
    }
}

fn pitched(inward: &Vec3, pitch: f64) -> Vec3 {
    (inward * pitch.cos() - Vec3::z() * pitch.sin()).normalize()
}

/// Corner grasps for box-like objects: both diagonals, points inset from
/// the corners, approach pitched down towards the centroid.
pub fn corner_grasp_candidates(
    object: &ObjectSpec,
    pose: &Pose,
    tool: &ToolSpec,
    params: &ManipulationParams,
) -> Vec<Vec<(Side, Pose)>> {
    let half = object.shape.half_extents();
    let axes: Vec<Vec3> = (0..3).map(|i| pose.transform_vector(&Vec3::ith(i, 1.0))).collect();
    let up = (0..3).max_by(|&a, &b| axes[a].z.abs().total_cmp(&axes[b].z.abs())).unwrap();
    let (i, j) = match up {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    let flat = |v: &Vec3| Vec3::new(v.x, v.y, 0.0).normalize();
    let (h1, h2) = (flat(&axes[i]), flat(&axes[j]));
    let (e1, e2) = ((half[i] - params.corner_inset).max(0.0), (half[j] - params.corner_inset).max(0.0));
    let c = pose.translation;
    let z = c.z.max(clearance(tool, params));
    let grasp = |s1: f64, s2: f64, pitch: f64| {
        let p = c + h1 * (s1 * e1) + h2 * (s2 * e2);
        let bisector = (h1 * s1 + h2 * s2).normalize();
        let approach = pitched(&-bisector, pitch);
        tool_frame(&Vec3::z().cross(&bisector), &approach, Vec3::new(p.x, p.y, z))
    };
    // steeper approaches clear nearby walls at the cost of reach
    let pitches = [0.0, 15.0, 30.0].map(|d: f64| (params.corner_pitch + d.to_radians()).min(80f64.to_radians()));
    pitches
        .iter()
        .flat_map(|&p| {
            [
                left_right(grasp(1.0, 1.0, p), grasp(-1.0, -1.0, p)),
                left_right(grasp(1.0, -1.0, p), grasp(-1.0, 1.0, p)),
            ]
        })
        .collect()
}

/// Opposed rim grasps near the base of a cone, closing tangentially.
pub fn rim_grasp_candidates(object: &ObjectSpec, pose: &Pose, params: &ManipulationParams) -> Vec<Vec<(Side, Pose)>> {
    let ShapePrimitive::Cone { radius, height } = object.shape else {
        return Vec::new();
    };
    let axis = pose.transform_vector(&Vec3::z());
    let base = pose.transform_point(&Vec3::new(0.0, 0.0, -height * 0.5));
    let h = params.rim_height.min(height * 0.5);
    let rho = (radius * (1.0 - h / height) - params.rim_inset).max(0.0);
    let center = base + axis * h;
    let grasp = |phi: f64| {
        let d = Vec3::new(phi.cos(), phi.sin(), 0.0);
        let radial = (d - axis * d.dot(&axis)).normalize();
        let approach = (-radial * params.corner_pitch.cos() - axis * params.corner_pitch.sin()).normalize();
        tool_frame(&axis.cross(&radial), &approach, center + radial * rho)
    };
    [90.0f64, 60.0, 120.0, 45.0, 135.0]
        .iter()
        .map(|deg| {
            let phi = deg.to_radians();
            left_right(grasp(phi), grasp(phi + PI))
        })
        .collect()
}

fn pick_dual(
    object: &ObjectSpec,
    estimate: &PoseEstimate,
    tool: &ToolSpec,
    ctx: &GraspContext,
    params: &ManipulationParams,
) -> Result<(GraspSpec, LabeledCartesianPlan), ManipulationError> {
    let cands = match object.shape {
        ShapePrimitive::Cone { .. } => rim_grasp_candidates(object, &estimate.pose, params),
        _ => corner_grasp_candidates(object, &estimate.pose, tool, params),
    };
    // both hands close to the narrower of their two chords
    let chords = |pair: &Vec<(Side, Pose)>| -> Option<(f64, f64)> {
        let w: Vec<f64> = pair
            .iter()
            .map(|(_, g)| chord_width(&object.shape, &estimate.pose, g))
            .collect::<Option<_>>()?;
        Some((w.iter().copied().fold(f64::INFINITY, f64::min), w.iter().copied().fold(0.0, f64::max)))
    };
    let widest = cands.iter().filter_map(chords).map(|c| c.1).fold(f64::INFINITY, f64::min);
    if widest + params.squeeze > tool.max_opening {
        return Err(ManipulationError::WidthExceeded {
            width: widest,
            max_opening: tool.max_opening,
        });
    }
    let cands = cands
        .into_iter()
        .filter_map(|pair| {
            let (lo, hi) = chords(&pair)?;
            (hi + params.squeeze <= tool.max_opening).then(|| (pair, (lo - params.squeeze).max(0.0)))
        })
        .collect();
    first_feasible(cands, estimate.pose, ctx, params)
}

fn pick_edge(
    edges: &[EdgeCandidate],
    centroid: Vec3,
    tool: &ToolSpec,
    ctx: &GraspContext,
    params: &ManipulationParams,
) -> Result<(GraspSpec, LabeledCartesianPlan), ManipulationError> {
    let mut ranked: Vec<&EdgeCandidate> = edges.iter().collect();
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score));
    let floor = clearance(tool, params);
    let close = params.cloth_close_width.min(tool.max_opening);
    let mut cands = Vec::new();
    for &side in &ctx.sides {
        for e in &ranked {
            let inward = Vec3::new(e.approach_direction.x, e.approach_direction.y, 0.0).normalize();
            let p = e.grasp_point + inward * params.edge_inset;
            let at = Vec3::new(p.x, p.y, (e.grasp_point.z - params.edge_depth).max(floor));
            let approach = pitched(&inward, params.edge_pitch);
            for sign in [1.0, -1.0] {
                cands.push((vec![(side, tool_frame(&(e.edge_tangent * sign), &approach, at))], close));
            }
        }
    }
    first_feasible(cands, Pose::from_translation(centroid), ctx, params)
}

/// Grasp plan for `object` by category: center grasp over several wrist
/// rotations, perpendicular or top grasp for cylinders, two-arm corner or
/// rim grasps for large objects, edge grasps for cloth.
pub fn plan_pick(
    object: &ObjectSpec,
    percept: Percept,
    tool: &ToolSpec,
    ctx: &GraspContext,
    params: &ManipulationParams,
) -> Result<(GraspSpec, LabeledCartesianPlan), ManipulationError> {
    use ObjectCategory::*;
    match (object.category, percept) {
        (SmallRigid | Cube | Sphere | SmallPrecise, Percept::Pose(e)) => pick_center(object, e, tool, ctx, params),
        (Cylinder, Percept::Pose(e)) => pick_cylinder(object, e, tool, ctx, params),
        (CuboidLarge | Cone | FlatLarge | Stacked, Percept::Pose(e)) => pick_dual(object, e, tool, ctx, params),
        (Deformable, Percept::Edges { edges, centroid }) => pick_edge(edges, centroid, tool, ctx, params),
        (c, _) => Err(ManipulationError::WrongPercept(c.name().to_string())),
    }
}

fn rect_overlap(a: &Aabb, b: &Aabb) -> bool {
    a.min.x < b.max.x && b.min.x < a.max.x && a.min.y < b.max.y && b.min.y < a.max.y
}

/// Planar footprint of `shape` at `pose`.
pub fn footprint(shape: &ShapePrimitive, pose: &Pose) -> Aabb {
    let h = world_half_extents(shape, pose);
    Aabb::from_center_half(pose.translation, h)
}

/// Free cells of a grid over the packing-box floor in first-fit order: rows
/// of increasing y, each of increasing x. Each cell is the object's centroid
/// target at release height, held in the grasp orientation.
pub fn place_cells(
    object: &ObjectSpec,
    grasp: &GraspSpec,
    packing_box: &ContainerSpec,
    occupancy: &[Aabb],
    params: &ManipulationParams,
) -> Vec<Pose> {
    let rot = Pose::new(grasp.object_pose.rotation, Vec3::zeros());
    let half = world_half_extents(&object.shape, &rot);
    let interior = packing_box.interior_aabb();
    let inset = half + Vec3::repeat(params.footprint_margin);
    let (x0, x1) = (interior.min.x + inset.x, interior.max.x - inset.x);
    let (y0, y1) = (interior.min.y + inset.y, interior.max.y - inset.y);
    if x1 < x0 || y1 < y0 {
        return Vec::new();
    }
    let nx = ((x1 - x0) / params.grid_pitch + 1e-9).floor() as usize + 1;
    let ny = ((y1 - y0) / params.grid_pitch + 1e-9).floor() as usize + 1;
    let blocked: Vec<Aabb> = occupancy.iter().map(|a| a.inflate(params.footprint_margin)).collect();
    let (below, _) = vertical_extent(&object.shape, &rot);
    let z = params.floor_z + below + params.release_height;
    (0..ny)
        .flat_map(|j| (0..nx).map(move |i| (i, j)))
        .map(|(i, j)| Vec3::new(x0 + i as f64 * params.grid_pitch, y0 + j as f64 * params.grid_pitch, z))
        .filter(|p| {
            let f = Aabb::from_center_half(*p, half);
            !blocked.iter().any(|b| rect_overlap(&f, b))
        })
        .map(|p| rot.with_translation(p))
        .collect()
}

/// Above, descend, release and retreat waypoints for a place at `target`.
pub fn place_at(grasp: &GraspSpec, target: &Pose, params: &ManipulationParams) -> (PlaceSpec, LabeledCartesianPlan) {
    let up = |d: f64| shifted(target, Vec3::z() * d);
    let plan = LabeledCartesianPlan::new(vec![
        Waypoint::required(grasp.tool_targets(&up(params.above_height))),
        Waypoint::required(grasp.tool_targets(target)),
        Waypoint::required(grasp.tool_targets(target)).with_gripper(GripperAction::Open),
        Waypoint::optional(grasp.tool_targets(&up(params.retreat_height))),
    ]);
    (
        PlaceSpec {
            target_location: *target,
            release_height: params.release_height,
        },
        plan,
    )
}

/// First-fit target on a grid over the packing-box floor, then above,
/// descend, release and retreat waypoints.
pub fn plan_place(
    object: &ObjectSpec,
    grasp: &GraspSpec,
    packing_box: &ContainerSpec,
    occupancy: &[Aabb],
    params: &ManipulationParams,
) -> Result<(PlaceSpec, LabeledCartesianPlan), ManipulationError> {
    let cells = place_cells(object, grasp, packing_box, occupancy, params);
    let target = cells.first().ok_or(ManipulationError::BoxFull)?;
    Ok(place_at(grasp, target, params))
}

/// Carries a held object to a point above the packing box, keeping its
/// orientation.
pub fn plan_transit_holding(
    object: &ObjectSpec,
    grasp: &GraspSpec,
    packing_box: &ContainerSpec,
    params: &ManipulationParams,
) -> LabeledCartesianPlan {
    let c = packing_box.center3();
    let (below, _) = vertical_extent(&object.shape, &grasp.object_pose);
    let target = grasp
        .object_pose
        .with_translation(Vec3::new(c.x, c.y, packing_box.wall_height + params.transit_height + below));
    LabeledCartesianPlan::new(vec![Waypoint::required(grasp.tool_targets(&target))])
}

/// Moves an empty hand to a ready pose above its own half of the box.
pub fn plan_transit_free(side: Side, packing_box: &ContainerSpec, params: &ManipulationParams) -> LabeledCartesianPlan {
    let c = packing_box.center3();
    let dy = match side {
        Side::Left => packing_box.interior[1] * 0.25,
        Side::Right => -packing_box.interior[1] * 0.25,
    };
    let at = Vec3::new(c.x, c.y + dy, packing_box.wall_height + params.transit_height);
    LabeledCartesianPlan::new(vec![Waypoint::required(ArmTarget::single(side, top_down(0.0, at)))])
}

/// Descend into the bin, sweep across it, retract. The sweeps are optional.
pub fn plan_stir(bin: &ContainerSpec, side: Side, params: &ManipulationParams) -> LabeledCartesianPlan {
    let c = bin.center3();
    let reach = (bin.interior[0] * 0.5 - params.stir_inset).max(0.0);
    let at = |dx: f64, z: f64| ArmTarget::single(side, top_down(PI / 2.0, c + Vec3::new(dx, 0.0, z)));
    LabeledCartesianPlan::new(vec![
        Waypoint::required(at(0.0, params.stir_depth)),
        Waypoint::optional(at(reach, params.stir_depth)),
        Waypoint::optional(at(-reach, params.stir_depth)),
        Waypoint::required(at(0.0, params.stir_retract)),
    ])
}

/// Approach and push for every flap, arms alternating over opposing pairs:
/// the left arm takes the far and left flaps from the +y half, the right
/// arm the near and right flaps from the -y half.
pub fn plan_pack_seal(packing_box: &ContainerSpec, params: &ManipulationParams) -> LabeledCartesianPlan {
    let segs = packing_box.flap_push_segments();
    let mid = |i: usize| (segs[i].0 + segs[i].1) * 0.5;
    let points = [
        (Side::Left, segs[0].1),
        (Side::Right, segs[1].0),
        (Side::Left, mid(2)),
        (Side::Right, mid(3)),
    ];
    let mut w = Vec::new();
    for (side, p) in points {
        let above = p + Vec3::z() * params.seal_approach;
        w.push(Waypoint::required(ArmTarget::single(side, top_down(0.0, above))));
        w.push(Waypoint::required(ArmTarget::single(side, top_down(0.0, p))));
    }
    LabeledCartesianPlan::new(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::Solid;
    use crate::sim::Layout;
    use crate::skill_graph::SkillGraph;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn graph() -> SkillGraph {
        SkillGraph::default_graph()
    }

    fn two_finger() -> ToolSpec {
        graph().tool("two_finger_gripper").unwrap().clone()
    }

    fn one_finger() -> ToolSpec {
        graph().tool("one_finger_gripper").unwrap().clone()
    }

    fn table() -> CollisionWorld {
        CollisionWorld::default().with_obstacle("table", Solid::aabb_box(Vec3::new(-0.3, -1.0, -0.05), Vec3::new(1.2, 1.0, 0.0)))
    }

    fn ctx<'a>(world: &'a CollisionWorld, arms: &'a Arms, sides: Vec<Side>) -> GraspContext<'a> {
        GraspContext {
            world,
            arms,
            current: DualConfig::home(),
            ik: IkParams::default(),
            sides,
        }
    }

    fn estimate(pose: Pose) -> PoseEstimate {
        PoseEstimate { pose, residual: 0.0, upright: None, converged: true }
    }

    fn resting(object: &ObjectSpec, rot: Pose, x: f64, y: f64) -> Pose {
        let (below, _) = vertical_extent(&object.shape, &rot);
        rot.with_translation(Vec3::new(x, y, below))
    }

    fn angle_deg(a: &Vec3, b: &Vec3) -> f64 {
        a.normalize().dot(&b.normalize()).clamp(-1.0, 1.0).acos().to_degrees()
    }

    #[test]
    fn upright_can_is_grasped_from_the_top() {
        let g = graph();
        let can = g.object("can").unwrap();
        let arms = Arms::default_pair(&two_finger());
        let w = table();
        let pose = resting(can, Pose::identity(), 0.36, 0.25);
        let e = PoseEstimate { upright: Some(true), ..estimate(pose) };
        let (spec, plan) = plan_pick(can, Percept::Pose(&e), &two_finger(), &ctx(&w, &arms, vec![Side::Left]), &Default::default()).unwrap();
        let (_, grasp) = spec.grasp_poses[0];
        assert!(angle_deg(&approach_of(&grasp), &-Vec3::z()) < 1e-6);
        let on_axis = grasp.translation - pose.translation;
        assert!(on_axis.xy().norm() < 1e-9);
        assert_eq!(plan.waypoints.len(), 4);
        assert!((spec.close_width - (0.066 - 0.004)).abs() < 1e-6);
    }

    #[test]
    fn lying_can_is_grasped_across_its_axis() {
        let g = graph();
        let can = g.object("can").unwrap();
        let arms = Arms::default_pair(&two_finger());
        let w = table();
        let pose = resting(can, Pose::rot_y(PI / 2.0), 0.36, 0.25);
        let e = PoseEstimate { upright: Some(false), ..estimate(pose) };
        let (spec, _) = plan_pick(can, Percept::Pose(&e), &two_finger(), &ctx(&w, &arms, vec![Side::Left]), &Default::default()).unwrap();
        let (_, grasp) = spec.grasp_poses[0];
        let closing = grasp.transform_vector(&Vec3::y());
        let axis = Vec3::x();
        assert!((angle_deg(&closing, &axis) - 90.0).abs() < 2.0);
        let c = closing.normalize();
        assert!(c.y.abs() > 1.0 - 1e-6 || c.z.abs() > 1.0 - 1e-6);
        assert!((grasp.translation - pose.translation).norm() < 1e-9);
    }

    #[test]
    fn tilted_cylinder_grasp_is_perpendicular_to_true_axis() {
        let g = graph();
        let can = g.object("can").unwrap();
        let arms = Arms::default_pair(&two_finger());
        let w = table();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut planned = 0;
        for _ in 0..20 {
            let tilt = rng.random_range(20f64..90.0).to_radians();
            let yaw = rng.random_range(0.0..2.0 * PI);
            let rot = Pose::rot_z(yaw).compose(&Pose::rot_y(tilt));
            let pose = resting(can, rot, 0.36, 0.22);
            let e = PoseEstimate { upright: Some(false), ..estimate(pose) };
            let Ok((spec, _)) = plan_pick(can, Percept::Pose(&e), &two_finger(), &ctx(&w, &arms, vec![Side::Left, Side::Right]), &Default::default()) else {
                continue;
            };
            planned += 1;
            let (_, grasp) = spec.grasp_poses[0];
            let axis = rot.transform_vector(&Vec3::z());
            assert!((angle_deg(&grasp.transform_vector(&Vec3::y()), &axis) - 90.0).abs() < 2.0);
            assert!((angle_deg(&approach_of(&grasp), &axis) - 90.0).abs() < 2.0);
        }
        assert!(planned >= 15, "only {planned} tilted grasps planned");
    }

    #[test]
    fn dual_grasps_straddle_the_centroid() {
        let g = graph();
        let arms = Arms::default_pair(&one_finger());
        let w = table();
        for (name, yaw) in [("cuboid", 0.3), ("baguette", -0.8), ("stacked_cups", 1.2), ("bowl", 0.0), ("cone", 2.0)] {
            let o = g.object(name).unwrap();
            let pose = resting(o, Pose::rot_z(yaw), 0.38, 0.0);
            let (spec, plan) = plan_pick(o, Percept::Pose(&estimate(pose)), &one_finger(), &ctx(&w, &arms, vec![]), &Default::default())
                .unwrap_or_else(|e| panic!("{name}: {e}"));
            assert_eq!(spec.arm_assignment, ArmAssignment::Dual);
            let c = pose.transform_point(&o.shape.centroid());
            let d: Vec<Vec3> = spec.grasp_poses.iter().map(|(_, p)| p.translation - c).collect();
            assert!(d[0].dot(&d[1]) < 0.0, "{name}");
            assert!(matches!(plan.waypoints[0].arm, ArmTarget::Both { .. }));
            for (_, p) in &spec.grasp_poses {
                let chord = chord_width(&o.shape, &pose, p).unwrap();
                assert!(chord <= one_finger().max_opening && chord >= spec.close_width, "{name}");
            }
        }
    }

    #[test]
    fn oversized_object_exceeds_width() {
        let mut o = graph().object("cube").unwrap().clone();
        o.shape = ShapePrimitive::Box { extents: [0.12, 0.12, 0.06] };
        let arms = Arms::default_pair(&two_finger());
        let w = table();
        let pose = resting(&o, Pose::identity(), 0.36, 0.2);
        let r = plan_pick(&o, Percept::Pose(&estimate(pose)), &two_finger(), &ctx(&w, &arms, vec![Side::Left]), &Default::default());
        assert!(matches!(r, Err(ManipulationError::WidthExceeded { .. })));
    }

    fn solid_distance(s: &Solid, x: &Vec3) -> f64 {
        match s {
            Solid::Box { pose, half } => {
                let l = pose.inverse().transform_point(x);
                let d = Vec3::new((l.x.abs() - half[0]).max(0.0), (l.y.abs() - half[1]).max(0.0), (l.z.abs() - half[2]).max(0.0));
                d.norm()
            }
            Solid::Sphere { center, radius } => (x - Vec3::from(*center)).norm() - radius,
        }
    }

    /// Independent finger check straight from the tool geometry.
    fn fingers_clear(world: &CollisionWorld, tool: &ToolSpec, grasp: &Pose) -> bool {
        let r = 0.006;
        let y = tool.max_opening / 2.0 + r;
        for side in [-1.0, 1.0] {
            for k in 0..=20 {
                let z = -tool.finger_length + r + (tool.finger_length - r) * k as f64 / 20.0;
                let p = grasp.transform_point(&Vec3::new(0.0, side * y, z));
                if world.obstacles.iter().any(|o| solid_distance(&o.solid, &p) < r) {
                    return false;
                }
            }
        }
        true
    }

    #[test]
    fn center_grasp_skips_colliding_orientations() {
        let g = graph();
        let ball = g.object("tennis_ball").unwrap();
        let layout = Layout::default();
        let bin = &layout.bins[0];
        let mut w = table();
        for s in bin.walls() {
            w = w.with_obstacle("bin0", s);
        }
        let arms = Arms::default_pair(&two_finger());
        let a = bin.interior_aabb();
        // against the far wall: only closing axes parallel to it are free
        let pose = resting(ball, Pose::identity(), a.max.x - 0.04, bin.center[1]);
        let e = estimate(pose);
        let tool = two_finger();
        let params = ManipulationParams::default();
        let cands = center_grasp_candidates(ball, &e, &tool, &params);
        assert_eq!(cands.len(), 8);
        let blocked: Vec<bool> = cands.iter().map(|(g, _)| !fingers_clear(&w, &tool, g)).collect();
        assert_eq!(blocked.iter().filter(|b| **b).count(), 6, "{blocked:?}");
        let (spec, _) = plan_pick(ball, Percept::Pose(&e), &tool, &ctx(&w, &arms, vec![Side::Left]), &params).unwrap();
        let chosen = spec.grasp_poses[0].1;
        assert!(fingers_clear(&w, &tool, &chosen));
        let k = cands.iter().position(|(g, _)| g.rotation_angle_to(&chosen) < 1e-9).unwrap();
        assert!(!blocked[k]);
    }

    fn cube_grasp(pose: Pose) -> GraspSpec {
        GraspSpec {
            arm_assignment: ArmAssignment::Left,
            grasp_poses: vec![(Side::Left, top_down(0.0, pose.translation))],
            pregrasp_offset: 0.08,
            close_width: 0.056,
            lift_height: 0.1,
            object_pose: pose,
        }
    }

    #[test]
    fn place_first_fit_fills_the_box() {
        let g = graph();
        let cube = g.object("cube").unwrap();
        let layout = Layout::default();
        let bx = &layout.packing_box;
        let params = ManipulationParams::default();
        let grasp = cube_grasp(Pose::from_translation(Vec3::new(0.36, 0.3, 0.03)));
        let (first, plan) = plan_place(cube, &grasp, bx, &[], &params).unwrap();
        let a = bx.interior_aabb();
        // corner cell: half the cube plus the wall clearance
        assert!((first.target_location.translation.x - (a.min.x + 0.04)).abs() < 1e-9);
        assert!((first.target_location.translation.y - (a.min.y + 0.04)).abs() < 1e-9);
        assert_eq!(plan.waypoints.len(), 4);
        assert_eq!(plan.waypoints[2].gripper, GripperAction::Open);
        assert_eq!(plan.waypoints[3].label, crate::motion::Label::Optional);
        let mut occupied = vec![footprint(&cube.shape, &first.target_location)];
        let (second, _) = plan_place(cube, &grasp, bx, &occupied, &params).unwrap();
        let f2 = footprint(&cube.shape, &second.target_location);
        assert!(!rect_overlap(&f2, &occupied[0].inflate(0.01)));
        occupied.push(f2);
        loop {
            match plan_place(cube, &grasp, bx, &occupied, &params) {
                Ok((p, _)) => occupied.push(footprint(&cube.shape, &p.target_location)),
                Err(e) => {
                    assert_eq!(e, ManipulationError::BoxFull);
                    break;
                }
            }
            assert!(occupied.len() < 50);
        }
        // 30 x 24 cm floor, 6 cm cubes 1 cm apart, 2 cm grid
        assert!(occupied.len() >= 6);
    }

    #[test]
    fn place_puts_the_object_where_the_tool_carries_it() {
        let g = graph();
        let cube = g.object("cube").unwrap();
        let layout = Layout::default();
        let obj = Pose::rot_z(0.4).with_translation(Vec3::new(0.36, 0.3, 0.03));
        let mut grasp = cube_grasp(obj);
        grasp.grasp_poses[0].1 = top_down(0.4, obj.translation + Vec3::new(0.0, 0.0, 0.005));
        let (spec, plan) = plan_place(cube, &grasp, &layout.packing_box, &[], &Default::default()).unwrap();
        let ArmTarget::Left(tool) = plan.waypoints[1].arm else { panic!() };
        let carried = grasp.expected_object_pose(&tool);
        assert!(carried.translation_distance(&spec.target_location) < 1e-9);
        assert!(carried.rotation_angle_to(&spec.target_location) < 1e-9);
    }

    #[test]
    fn stir_and_seal_shapes() {
        let layout = Layout::default();
        let params = ManipulationParams::default();
        let stir = plan_stir(&layout.bins[0], Side::Left, &params);
        let labels: Vec<_> = stir.waypoints.iter().map(|w| w.label).collect();
        use crate::motion::Label::*;
        assert_eq!(labels, vec![Required, Optional, Optional, Required]);
        let seal = plan_pack_seal(&layout.packing_box, &params);
        assert_eq!(seal.waypoints.len(), 8);
        assert!(seal.waypoints.iter().all(|w| w.label == Required));
        let sides: Vec<Side> = seal.waypoints.iter().map(|w| w.arm.targets()[0].0).collect();
        assert_eq!(sides, [Side::Left, Side::Left, Side::Right, Side::Right, Side::Left, Side::Left, Side::Right, Side::Right]);
    }

    #[test]
    fn edge_grasp_uses_the_best_reachable_edge() {
        let g = graph();
        let tool = two_finger();
        let arms = Arms::default_pair(&tool);
        let w = table();
        let edges = [
            EdgeCandidate {
                grasp_point: Vec3::new(0.32, 0.24, 0.03),
                approach_direction: Vec3::new(1.0, 0.0, 0.0),
                edge_tangent: Vec3::new(0.0, 1.0, 0.0),
                score: 0.01,
            },
            EdgeCandidate {
                grasp_point: Vec3::new(0.36, 0.18, 0.03),
                approach_direction: Vec3::new(0.0, 1.0, 0.0),
                edge_tangent: Vec3::new(1.0, 0.0, 0.0),
                score: 0.02,
            },
        ];
        let o = g.object("tshirt").unwrap();
        let centroid = Vec3::new(0.36, 0.24, 0.03);
        let (spec, plan) = plan_pick(o, Percept::Edges { edges: &edges, centroid }, &tool, &ctx(&w, &arms, vec![Side::Left]), &Default::default()).unwrap();
        let grasp = spec.grasp_poses[0].1;
        assert!((grasp.translation.y - 0.195).abs() < 1e-9);
        assert!((grasp.translation.z - 0.02).abs() < 1e-9);
        assert!(angle_deg(&grasp.transform_vector(&Vec3::y()), &Vec3::x()).min(180.0 - angle_deg(&grasp.transform_vector(&Vec3::y()), &Vec3::x())) < 1e-6);
        assert!(plan.waypoints[2].gripper == GripperAction::Close(0.005));
        let wrong = estimate(Pose::identity());
        assert!(matches!(
            plan_pick(o, Percept::Pose(&wrong), &tool, &ctx(&w, &arms, vec![Side::Left]), &Default::default()),
            Err(ManipulationError::WrongPercept(_))
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn place_targets_stay_inside_the_shrunk_box(yaw in 0.0..PI, n in 0usize..4) {
            let g = graph();
            let o = g.object("eraser").unwrap();
            let layout = Layout::default();
            let bx = &layout.packing_box;
            let params = ManipulationParams::default();
            let grasp = cube_grasp(Pose::rot_z(yaw).with_translation(Vec3::new(0.36, 0.3, 0.01)));
            let mut occ = Vec::new();
            for _ in 0..=n {
                let (p, _) = plan_place(o, &grasp, bx, &occ, &params).unwrap();
                let f = footprint(&o.shape, &p.target_location);
                let a = bx.interior_aabb();
                prop_assert!(f.min.x >= a.min.x - 1e-9 && f.max.x <= a.max.x + 1e-9);
                prop_assert!(f.min.y >= a.min.y - 1e-9 && f.max.y <= a.max.y + 1e-9);
                for q in &occ {
                    prop_assert!(!rect_overlap(&f, &q.inflate(params.footprint_margin)));
                }
                occ.push(f);
            }
        }

        #[test]
        fn perpendicular_axes_for_any_tilt(tilt in 0.3f64..1.57, yaw in 0.0..6.28) {
            let g = graph();
            let can = g.object("can").unwrap();
            let rot = Pose::rot_z(yaw).compose(&Pose::rot_y(tilt));
            let axis = rot.transform_vector(&Vec3::z());
            let closing = Vec3::z().cross(&axis).normalize();
            let approach = (-Vec3::z() + axis * Vec3::z().dot(&axis)).normalize();
            let f = tool_frame(&closing, &approach, Vec3::zeros());
            prop_assert!(f.transform_vector(&Vec3::y()).dot(&axis).abs() < 1e-9);
            prop_assert!(f.transform_vector(&Vec3::z()).dot(&axis).abs() < 1e-9);
            prop_assert!(chord_width(&can.shape, &rot, &f).is_some());
        }
    }
}
