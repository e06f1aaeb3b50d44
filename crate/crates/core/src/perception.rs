//! Synthetic instance segmentation, multi-start ICP, boundary-edge grasp
//! proposals for deformables, and pick verification.

use rstar::primitives::GeomWithData;
use rstar::RTree;
use nalgebra::{Matrix3, SymmetricEigen, UnitQuaternion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};

use crate::error::PerceptionError;
use crate::geometry::{axis_tilt, octahedral_rotations, Aabb, PointCloud, Pose, ShapePrimitive, Vec3};
use crate::motion::Side;
use crate::sim::{ContainerSpec, ObjectStatus, WorldState};
use crate::skill_graph::{ObjectCategory, ObjectSpec, PerceptiveFeature, SensorKind, SensorSpec};

/// Points in every model cloud.
pub const MODEL_POINTS: usize = 2000;
pub const MODEL_SEED: u64 = 0x1c9_0d31;
/// Fewest points an instance cloud may have.
pub const MIN_POINTS: usize = 10;
/// Instance ids at and above this value are containers (bins, packing box).
pub const CONTAINER_ID_BASE: u32 = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub class: String,
    pub cloud: PointCloud,
    pub confidence: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SegmentedCloud {
    pub instances: BTreeMap<u32, Instance>,
}

impl SegmentedCloud {
    pub fn of_class<'a>(&'a self, class: &'a str) -> impl Iterator<Item = (u32, &'a Instance)> + 'a {
        self.instances.iter().filter(move |(_, i)| i.class == class).map(|(id, i)| (*id, i))
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseEstimate {
    pub pose: Pose,
    /// RMS nearest-neighbour distance from observed points to the model (m).
    pub residual: f64,
    pub upright: Option<bool>,
    pub converged: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeCandidate {
    pub grasp_point: Vec3,
    pub approach_direction: Vec3,
    pub edge_tangent: Vec3,
    pub score: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PickReason {
    Aligned,
    ObjectAbsent,
    Misaligned,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PickVerdict {
    pub success: bool,
    /// Infinite when the object is absent.
    pub gripper_object_offset: f64,
    pub reason: PickReason,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IcpParams {
    pub max_iters: usize,
    /// Stop once the RMS residual improves by less than this (m).
    pub tolerance: f64,
    pub model_points: usize,
    /// Observed points used while comparing starts; the winner is refined on
    /// the full cloud.
    pub coarse_points: usize,
    pub accept_residual: f64,
    pub upright_threshold: f64,
}

impl Default for IcpParams {
    fn default() -> Self {
        IcpParams {
            max_iters: 50,
            tolerance: 1e-6,
            model_points: MODEL_POINTS,
            coarse_points: 200,
            accept_residual: 0.008,
            upright_threshold: 15f64.to_radians(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EdgeParams {
    /// Largest turn between merged boundary pieces (rad).
    pub edge_angle_tol: f64,
    pub min_edge_length: f64,
    /// Alpha radius as a multiple of the median nearest-neighbour spacing.
    pub alpha_factor: f64,
    pub clearance_cap: f64,
    /// Points further below the sheet plane than this are support, not
    /// obstacles.
    pub support_tolerance: f64,
}

impl Default for EdgeParams {
    fn default() -> Self {
        EdgeParams {
            edge_angle_tol: 20f64.to_radians(),
            min_edge_length: 0.03,
            alpha_factor: 2.0,
            clearance_cap: 0.15,
            support_tolerance: 0.003,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerceptionParams {
    pub icp: IcpParams,
    pub edges: EdgeParams,
    pub initial_guesses: usize,
    pub pick_radius: f64,
    /// Only instances whose centroid falls inside are considered.
    #[serde(skip)]
    pub search_region: Option<Aabb>,
}

impl Default for PerceptionParams {
    fn default() -> Self {
        PerceptionParams {
            icp: IcpParams::default(),
            edges: EdgeParams::default(),
            initial_guesses: 24,
            pick_radius: 0.04,
            search_region: None,
        }
    }
}

/// World pose of a sensor's optical frame.
pub fn sensor_pose(world: &WorldState, sensor: &SensorSpec) -> Pose {
    match sensor.kind {
        SensorKind::HeadCamera => sensor.mount_pose,
        SensorKind::WristCameraLeft => world.tool_pose(Side::Left).compose(&sensor.mount_pose),
        SensorKind::WristCameraRight => world.tool_pose(Side::Right).compose(&sensor.mount_pose),
    }
}

struct Occluder {
    inv: Pose,
    shape: ShapePrimitive,
}

impl Occluder {
    /// Whether the open segment `cam → cam + t·dir, t ∈ (0, limit)` enters the solid.
    fn blocks(&self, cam: &Vec3, dir: &Vec3, limit: f64) -> bool {
        let o = self.inv.transform_point(cam);
        let d = self.inv.transform_vector(dir);
        match self.shape.line_interval(&o, &d) {
            Some((t0, t1)) => t1 > 1e-9 && t0 < limit,
            None => false,
        }
    }
}

fn container_surface(c: &ContainerSpec, rng: &mut ChaCha8Rng) -> Vec<Vec3> {
    let (hx, hy) = (c.interior[0] * 0.5, c.interior[1] * 0.5);
    let h = c.wall_height;
    let base = c.center3();
    let mut pts = Vec::with_capacity(600);
    for _ in 0..400 {
        pts.push(base + Vec3::new(rng.random_range(-hx..hx), rng.random_range(-hy..hy), 0.0));
    }
    for _ in 0..200 {
        let z = rng.random_range(0.0..h);
        let p = match rng.random_range(0..4) {
            0 => Vec3::new(hx, rng.random_range(-hy..hy), z),
            1 => Vec3::new(-hx, rng.random_range(-hy..hy), z),
            2 => Vec3::new(rng.random_range(-hx..hx), hy, z),
            _ => Vec3::new(rng.random_range(-hx..hx), -hy, z),
        };
        pts.push(base + p);
    }
    pts
}

/// Nearest-neighbour index over a fixed point set.
pub struct PointIndex(RTree<GeomWithData<[f64; 3], usize>>);

impl PointIndex {
    pub fn new(points: &[Vec3]) -> PointIndex {
        PointIndex(RTree::bulk_load(
            points.iter().enumerate().map(|(i, p)| GeomWithData::new([p.x, p.y, p.z], i)).collect(),
        ))
    }

    /// Index of the closest point and its squared distance.
    pub fn nearest(&self, q: &Vec3) -> Option<(usize, f64)> {
        self.0.nearest_neighbor(&[q.x, q.y, q.z]).map(|n| {
            let g = n.geom();
            (n.data, (g[0] - q.x).powi(2) + (g[1] - q.y).powi(2) + (g[2] - q.z).powi(2))
        })
    }
}

/// Synthetic instance segmentation from one sensor: first-hit visibility
/// inside the view cone, depth noise along the viewing ray, point dropout,
/// whole-instance misses, and container clouds cleaned of object points.
pub fn segment_scene(world: &WorldState, sensor: &SensorSpec, noise: &crate::sim::NoiseProfile, seed: u64) -> SegmentedCloud {
    let cam = sensor_pose(world, sensor);
    let c = cam.translation;
    let axis = cam.transform_vector(&Vec3::z());
    let cos_fov = sensor.half_fov.cos();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let depth = Normal::new(0.0, noise.depth_sigma.max(0.0)).expect("finite sigma");
    let occluders: Vec<Occluder> = world
        .objects
        .iter()
        .map(|o| Occluder { inv: o.pose.inverse(), shape: o.spec.shape })
        .collect();

    let observe = |p: &Vec3, rng: &mut ChaCha8Rng| -> Option<Vec3> {
        let ray = p - c;
        let dist = ray.norm();
        if dist < 1e-9 || ray.dot(&axis) < cos_fov * dist {
            return None;
        }
        let limit = 1.0 - 1e-6;
        for occ in &occluders {
            // the point's own solid hides it when the ray enters earlier
            if occ.blocks(&c, &ray, limit) {
                return None;
            }
        }
        if noise.dropout > 0.0 && rng.random_bool(noise.dropout) {
            return None;
        }
        let n = if noise.depth_sigma > 0.0 { depth.sample(rng) } else { 0.0 };
        Some(p + ray / dist * n)
    };

    let mut seg = SegmentedCloud::default();
    for o in &world.objects {
        let miss_bin = match o.status {
            ObjectStatus::InBin(b) => Some(Some(b)),
            ObjectStatus::Dropped => Some(None),
            _ => None,
        };
        if let Some(bin) = miss_bin {
            let rate = noise.miss_rate_for(bin);
            if rate > 0.0 && rng.random_bool(rate.min(1.0)) {
                continue;
            }
        }
        let model = o.spec.shape.sample_surface(MODEL_POINTS, MODEL_SEED);
        let mut pts = Vec::new();
        for lp in &model.points {
            let p = o.pose.transform_point(lp);
            if let Some(q) = observe(&p, &mut rng) {
                pts.push(q);
            }
        }
        if pts.len() >= MIN_POINTS {
            let confidence = pts.len() as f64 / MODEL_POINTS as f64;
            seg.instances.insert(
                o.id,
                Instance { class: o.spec.name.clone(), cloud: PointCloud { points: pts, labels: None }, confidence },
            );
        }
    }

    let object_points: Vec<Vec3> = seg.instances.values().flat_map(|i| i.cloud.points.iter().copied()).collect();
    let tree = PointIndex::new(&object_points);
    let containers = world
        .layout
        .bins
        .iter()
        .enumerate()
        .map(|(b, spec)| (format!("bin{b}"), spec))
        .chain(std::iter::once(("packing_box".to_string(), &world.layout.packing_box)));
    for (k, (class, spec)) in containers.enumerate() {
        let interior = spec.interior_aabb();
        let mut pts: Vec<Vec3> = container_surface(spec, &mut rng)
            .iter()
            .filter_map(|p| observe(p, &mut rng))
            .collect();
        // mask bleed: object points over the container floor carry its label
        pts.extend(
            object_points
                .iter()
                .copied()
                .filter(|p| p.x >= interior.min.x && p.x <= interior.max.x && p.y >= interior.min.y && p.y <= interior.max.y),
        );
        pts.retain(|p| tree.nearest(p).is_none_or(|(_, d2)| d2 > 0.003 * 0.003));
        if pts.len() >= MIN_POINTS {
            let confidence = (pts.len() as f64 / 600.0).min(1.0);
            seg.instances.insert(
                CONTAINER_ID_BASE + k as u32,
                Instance { class, cloud: PointCloud { points: pts, labels: None }, confidence },
            );
        }
    }
    seg
}

/// Model cloud with its nearest-neighbour index.
pub struct IcpModel {
    pub points: Vec<Vec3>,
    pub centroid: Vec3,
    index: PointIndex,
}

impl IcpModel {
    pub fn new(shape: &ShapePrimitive, n: usize) -> IcpModel {
        let cloud = shape.sample_surface(n.max(1), MODEL_SEED);
        IcpModel {
            centroid: cloud.centroid().unwrap_or_else(Vec3::zeros),
            index: PointIndex::new(&cloud.points),
            points: cloud.points,
        }
    }

    /// RMS distance from `observed` to the model placed at `pose`, and the
    /// matching model index per observed point.
    pub fn residual(&self, pose: &Pose, observed: &[Vec3]) -> (f64, Vec<usize>) {
        let inv = pose.inverse();
        let mut sum = 0.0;
        let mut idx = Vec::with_capacity(observed.len());
        for p in observed {
            let q = inv.transform_point(p);
            let (i, d2) = self.index.nearest(&q).expect("non-empty model");
            sum += d2;
            idx.push(i);
        }
        ((sum / observed.len().max(1) as f64).sqrt(), idx)
    }
}

/// Best rigid transform taking `from[i]` onto `to[i]` in the least-squares sense.
pub fn kabsch(from: &[Vec3], to: &[Vec3]) -> Pose {
    let n = from.len().max(1) as f64;
    let cf = from.iter().sum::<Vec3>() / n;
    let ct = to.iter().sum::<Vec3>() / n;
    let mut h = Matrix3::zeros();
    for (a, b) in from.iter().zip(to) {
        h += (a - cf) * (b - ct).transpose();
    }
    let svd = h.svd(true, true);
    let (u, vt) = (svd.u.expect("u"), svd.v_t.expect("v_t"));
    let v = vt.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let r = v * Matrix3::from_diagonal(&Vec3::new(1.0, 1.0, d)) * u.transpose();
    let rot = UnitQuaternion::from_matrix(&r);
    Pose::new(rot, ct - (rot * cf))
}

#[derive(Clone, Debug, PartialEq)]
pub struct IcpRun {
    pub pose: Pose,
    /// RMS residual at every visited pose, starting with the initial one.
    pub history: Vec<f64>,
}

impl IcpRun {
    pub fn residual(&self) -> f64 {
        *self.history.last().unwrap_or(&f64::INFINITY)
    }
}

/// Point-to-point ICP from a single start.
pub fn icp_from(model: &IcpModel, observed: &[Vec3], start: Pose, params: &IcpParams) -> IcpRun {
    let mut pose = start;
    let mut history = Vec::new();
    let mut matched = vec![Vec3::zeros(); observed.len()];
    for k in 0..=params.max_iters {
        let (rms, idx) = model.residual(&pose, observed);
        history.push(rms);
        if rms == 0.0 || (k > 0 && history[k - 1] - rms < params.tolerance) || k == params.max_iters {
            break;
        }
        for (m, i) in matched.iter_mut().zip(&idx) {
            *m = model.points[*i];
        }
        let next = kabsch(&matched, observed);
        pose = Pose::new(UnitQuaternion::new_normalize(*next.rotation.quaternion()), next.translation);
    }
    IcpRun { pose, history }
}

/// RMS distance from `observed` to the primitive surface placed at `pose`.
pub fn surface_residual(shape: &ShapePrimitive, pose: &Pose, observed: &[Vec3]) -> f64 {
    let inv = pose.inverse();
    let sum: f64 = observed.iter().map(|p| shape.surface_distance(&inv.transform_point(p)).powi(2)).sum();
    (sum / observed.len().max(1) as f64).sqrt()
}

/// Point-to-plane Gauss-Newton against the analytic primitive surface,
/// halving steps that would raise the residual.
pub fn refine_to_surface(shape: &ShapePrimitive, observed: &[Vec3], start: Pose, params: &IcpParams) -> IcpRun {
    let n = observed.len().max(1) as f64;
    let c = observed.iter().sum::<Vec3>() / n;
    let mut pose = start;
    let mut current = surface_residual(shape, &pose, observed);
    let mut history = vec![current];
    for _ in 0..params.max_iters {
        if current < 1e-12 {
            break;
        }
        let inv = pose.inverse();
        let mut jtj = nalgebra::Matrix6::<f64>::zeros();
        let mut jtr = nalgebra::Vector6::<f64>::zeros();
        for p in observed {
            let (q, nl) = shape.closest_surface_point(&inv.transform_point(p));
            let qw = pose.transform_point(&q);
            let nw = pose.transform_vector(&nl);
            let arm = (qw - c).cross(&nw);
            let j = nalgebra::Vector6::new(arm.x, arm.y, arm.z, nw.x, nw.y, nw.z);
            jtj += j * j.transpose();
            jtr += j * nw.dot(&(p - qw));
        }
        let Ok(x) = jtj.svd(true, true).solve(&jtr, 1e-12 * jtj.norm().max(1e-300)) else { break };
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..10 {
            let w = Vec3::new(x[0], x[1], x[2]) * scale;
            let v = Vec3::new(x[3], x[4], x[5]) * scale;
            let rot = UnitQuaternion::from_scaled_axis(w);
            let step = Pose::new(rot, c - rot * c + v);
            let cand = step.compose(&pose);
            let r = surface_residual(shape, &cand, observed);
            if r <= current {
                accepted = Some((cand, r));
                break;
            }
            scale *= 0.5;
        }
        let Some((cand, r)) = accepted else { break };
        let gain = current - r;
        pose = cand;
        current = r;
        history.push(r);
        if gain < params.tolerance {
            break;
        }
    }
    IcpRun { pose, history }
}

fn covariance_rank(points: &[Vec3]) -> usize {
    let n = points.len() as f64;
    let c = points.iter().sum::<Vec3>() / n;
    let mut cov = Matrix3::zeros();
    for p in points {
        cov += (p - c) * (p - c).transpose();
    }
    cov /= n;
    let eig = SymmetricEigen::new(cov).eigenvalues;
    let max = eig.max();
    if max < 1e-14 {
        return 0;
    }
    eig.iter().filter(|&&l| l > max * 1e-8).count()
}

fn tilt_for(shape: &ShapePrimitive, pose: &Pose) -> f64 {
    let t = axis_tilt(pose, &Vec3::z());
    match shape {
        ShapePrimitive::Cylinder { .. } => t.min(std::f64::consts::PI - t),
        _ => t,
    }
}

/// Multi-start ICP: each of the first `initial_guesses` octahedral
/// rotations, up to model symmetry, with translation from the observed
/// centroid, runs on a subsample,
/// the lowest-residual start is rerun on the full cloud and then polished
/// against the analytic surface. The reported residual is the RMS distance
/// to that surface.
pub fn icp_register(
    observed: &PointCloud,
    model: &ShapePrimitive,
    initial_guesses: usize,
    params: &IcpParams,
) -> Result<PoseEstimate, PerceptionError> {
    let pts = &observed.points;
    if pts.len() < MIN_POINTS {
        return Err(PerceptionError::TooFewPoints(pts.len()));
    }
    if covariance_rank(pts) < 2 {
        return Err(PerceptionError::Degenerate);
    }
    let m = IcpModel::new(model, params.model_points);
    let oc = pts.iter().sum::<Vec3>() / pts.len() as f64;
    let stride = pts.len().div_ceil(params.coarse_points.max(1));
    let coarse: Vec<Vec3> = pts.iter().step_by(stride.max(1)).copied().collect();
    // starts that differ only by a symmetry of the model are the same start
    let mut starts: Vec<UnitQuaternion<f64>> = Vec::new();
    for r in octahedral_rotations().into_iter().take(initial_guesses.clamp(1, 24)) {
        let p = Pose::new(r, Vec3::zeros());
        if starts.iter().all(|k| model.symmetric_rotation_error(&p, &Pose::new(*k, Vec3::zeros())) > 1e-6) {
            starts.push(r);
        }
    }
    let best = starts
        .par_iter()
        .enumerate()
        .map(|(i, r)| {
            let start = Pose::new(*r, oc - (r * m.centroid));
            (i, icp_from(&m, &coarse, start, params))
        })
        .min_by(|a, b| a.1.residual().total_cmp(&b.1.residual()).then(a.0.cmp(&b.0)))
        .expect("at least one start")
        .1;
    let coarse_fit = icp_from(&m, pts, best.pose, params);
    let fine = refine_to_surface(model, pts, coarse_fit.pose, params);
    let residual = fine.residual();
    let upright = model.is_axial().then(|| tilt_for(model, &fine.pose) <= params.upright_threshold);
    Ok(PoseEstimate { pose: fine.pose, residual, upright, converged: residual < params.accept_residual })
}

/// Sphere center with known radius: algebraic fit, then Gauss-Newton on the
/// geometric distance. Returns the center and the RMS radial residual.
pub fn fit_sphere(points: &[Vec3], radius: f64) -> Result<(Vec3, f64), PerceptionError> {
    if points.len() < MIN_POINTS {
        return Err(PerceptionError::TooFewPoints(points.len()));
    }
    if covariance_rank(points) < 2 {
        return Err(PerceptionError::Degenerate);
    }
    let n = points.len();
    let a = nalgebra::DMatrix::from_fn(n, 4, |i, j| if j < 3 { 2.0 * points[i][j] } else { 1.0 });
    let b = nalgebra::DVector::from_fn(n, |i, _| points[i].norm_squared());
    let centroid = points.iter().sum::<Vec3>() / n as f64;
    let mut c = a
        .svd(true, true)
        .solve(&b, 1e-12)
        .map(|x| Vec3::new(x[0], x[1], x[2]))
        .ok()
        .filter(|c| c.iter().all(|v| v.is_finite()))
        .unwrap_or(centroid);
    for _ in 0..30 {
        let mut jtj = Matrix3::zeros();
        let mut jtr = Vec3::zeros();
        for p in points {
            let d = c - p;
            let dn = d.norm().max(1e-12);
            let j = d / dn;
            let r = dn - radius;
            jtj += j * j.transpose();
            jtr += j * r;
        }
        let Some(step) = jtj.try_inverse().map(|inv| inv * jtr) else { break };
        c -= step;
        if step.norm() < 1e-12 {
            break;
        }
    }
    let rms = (points.iter().map(|p| ((p - c).norm() - radius).powi(2)).sum::<f64>() / n as f64).sqrt();
    Ok((c, rms))
}

pub fn select_instance<'a>(seg: &'a SegmentedCloud, object: &'a ObjectSpec, region: Option<&Aabb>) -> Option<&'a Instance> {
    seg.of_class(&object.name)
        .filter(|(_, i)| match (region, i.cloud.centroid()) {
            (Some(r), Some(c)) => r.contains(&c),
            (None, Some(_)) => true,
            _ => false,
        })
        .max_by(|a, b| a.1.confidence.total_cmp(&b.1.confidence).then(b.0.cmp(&a.0)))
        .map(|(_, i)| i)
}

/// Pose of a rigid object in the base frame from the best-matching instance.
pub fn detect_rigid(seg: &SegmentedCloud, object: &ObjectSpec, params: &PerceptionParams) -> Result<PoseEstimate, PerceptionError> {
    if object.category == ObjectCategory::Deformable {
        return Err(PerceptionError::NotRigid(object.name.clone()));
    }
    let inst = select_instance(seg, object, params.search_region.as_ref())
        .ok_or_else(|| PerceptionError::NotFound(object.name.clone()))?;
    estimate_instance(&inst.cloud, object, params)
}

fn estimate_instance(cloud: &PointCloud, object: &ObjectSpec, params: &PerceptionParams) -> Result<PoseEstimate, PerceptionError> {
    if let ShapePrimitive::Sphere { radius } = object.shape {
        let (c, rms) = fit_sphere(&cloud.points, radius)?;
        return Ok(PoseEstimate {
            pose: Pose::from_translation(c),
            residual: rms,
            upright: None,
            converged: rms < params.icp.accept_residual,
        });
    }
    let mut est = icp_register(cloud, &object.shape, params.initial_guesses, &params.icp)?;
    if !object.perceptive_features.contains(&PerceptiveFeature::UprightFlag) {
        est.upright = None;
    }
    Ok(est)
}

struct Plane {
    origin: Vec3,
    u: Vec3,
    v: Vec3,
    normal: Vec3,
}

impl Plane {
    fn fit(points: &[Vec3]) -> Plane {
        let n = points.len() as f64;
        let origin = points.iter().sum::<Vec3>() / n;
        let mut cov = Matrix3::zeros();
        for p in points {
            cov += (p - origin) * (p - origin).transpose();
        }
        let eig = SymmetricEigen::new(cov);
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let u: Vec3 = eig.eigenvectors.column(order[0]).into();
        let mut normal: Vec3 = eig.eigenvectors.column(order[2]).into();
        if normal.z < 0.0 {
            normal = -normal;
        }
        let v = normal.cross(&u);
        Plane { origin, u, v, normal }
    }

    fn project(&self, p: &Vec3) -> [f64; 2] {
        let d = p - self.origin;
        [d.dot(&self.u), d.dot(&self.v)]
    }

    fn lift(&self, q: [f64; 2]) -> Vec3 {
        self.origin + self.u * q[0] + self.v * q[1]
    }
}

fn circumradius(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    let ab = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
    let bc = ((b[0] - c[0]).powi(2) + (b[1] - c[1]).powi(2)).sqrt();
    let ca = ((c[0] - a[0]).powi(2) + (c[1] - a[1]).powi(2)).sqrt();
    let area2 = ((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])).abs();
    if area2 < 1e-18 {
        f64::INFINITY
    } else {
        ab * bc * ca / (2.0 * area2)
    }
}

fn signed_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    (0..n)
        .map(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            a[0] * b[1] - b[0] * a[1]
        })
        .sum::<f64>()
        * 0.5
}

fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn point_line_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let l = dist2(a, b);
    if l < 1e-15 {
        return dist2(p, a);
    }
    ((b[0] - a[0]) * (a[1] - p[1]) - (a[0] - p[0]) * (b[1] - a[1])).abs() / l
}

/// Ramer–Douglas–Peucker on an open polyline; keeps both ends.
fn rdp(points: &[[f64; 2]], eps: f64, out: &mut Vec<[f64; 2]>) {
    let n = points.len();
    if n < 3 {
        out.extend_from_slice(&points[..n.saturating_sub(1)]);
        return;
    }
    let (a, b) = (points[0], points[n - 1]);
    let (k, d) = (1..n - 1)
        .map(|i| (i, point_line_distance(points[i], a, b)))
        .fold((0, -1.0), |acc, x| if x.1 > acc.1 { x } else { acc });
    if d > eps {
        rdp(&points[..=k], eps, out);
        rdp(&points[k..], eps, out);
    } else {
        out.push(a);
    }
}

/// Outer boundary of the alpha shape of a planar point set, counter-clockwise,
/// together with the median nearest-neighbour spacing.
pub fn alpha_boundary(points: &[[f64; 2]], alpha_factor: f64) -> Option<(Vec<[f64; 2]>, f64)> {
    let pts: Vec<delaunator::Point> = points.iter().map(|p| delaunator::Point { x: p[0], y: p[1] }).collect();
    let tri = delaunator::triangulate(&pts);
    if tri.triangles.is_empty() {
        return None;
    }
    let mut nn = vec![f64::INFINITY; points.len()];
    for e in 0..tri.triangles.len() {
        let (a, b) = (tri.triangles[e], tri.triangles[delaunator::next_halfedge(e)]);
        let d = dist2(points[a], points[b]);
        nn[a] = nn[a].min(d);
        nn[b] = nn[b].min(d);
    }
    let mut spacing: Vec<f64> = nn.into_iter().filter(|d| d.is_finite()).collect();
    spacing.sort_by(f64::total_cmp);
    let median = spacing[spacing.len() / 2];
    let alpha = alpha_factor * median;
    let ntri = tri.triangles.len() / 3;
    let keep: Vec<bool> = (0..ntri)
        .map(|t| {
            let [a, b, c] = [tri.triangles[3 * t], tri.triangles[3 * t + 1], tri.triangles[3 * t + 2]];
            circumradius(points[a], points[b], points[c]) <= alpha
        })
        .collect();
    let mut out_edges: HashMap<usize, Vec<usize>> = HashMap::new();
    let mut edges = Vec::new();
    for e in 0..tri.triangles.len() {
        if !keep[e / 3] {
            continue;
        }
        let opp = tri.halfedges[e];
        if opp == delaunator::EMPTY || !keep[opp / 3] {
            let (a, b) = (tri.triangles[e], tri.triangles[delaunator::next_halfedge(e)]);
            out_edges.entry(a).or_default().push(edges.len());
            edges.push((a, b));
        }
    }
    let mut used = vec![false; edges.len()];
    let mut best: Option<Vec<[f64; 2]>> = None;
    for start in 0..edges.len() {
        if used[start] {
            continue;
        }
        let mut lp = Vec::new();
        let mut e = start;
        loop {
            used[e] = true;
            let (a, b) = edges[e];
            lp.push(points[a]);
            if b == edges[start].0 {
                break;
            }
            match out_edges.get(&b).and_then(|v| v.iter().copied().find(|&x| !used[x])) {
                Some(n) => e = n,
                None => break,
            }
        }
        if lp.len() >= 3 && best.as_ref().is_none_or(|b| signed_area(&lp).abs() > signed_area(b).abs()) {
            best = Some(lp);
        }
    }
    let mut best = best?;
    if signed_area(&best) < 0.0 {
        best.reverse();
    }
    Some((best, median))
}

/// Straight boundary pieces of a closed counter-clockwise polygon: RDP
/// simplification, then merging of neighbours that turn by less than `tol`.
pub fn straight_edges(poly: &[[f64; 2]], eps: f64, tol: f64) -> Vec<([f64; 2], [f64; 2])> {
    let n = poly.len();
    if n < 3 {
        return Vec::new();
    }
    // split the loop at vertex 0 and its farthest vertex
    let far = (0..n).max_by(|&a, &b| dist2(poly[0], poly[a]).total_cmp(&dist2(poly[0], poly[b]))).unwrap_or(0);
    let mut simplified = Vec::new();
    rdp(&poly[..=far], eps, &mut simplified);
    let mut second: Vec<[f64; 2]> = poly[far..].to_vec();
    second.push(poly[0]);
    rdp(&second, eps, &mut simplified);
    let m = simplified.len();
    let mut segs: Vec<([f64; 2], [f64; 2])> = (0..m).map(|i| (simplified[i], simplified[(i + 1) % m])).collect();
    let heading = |s: &([f64; 2], [f64; 2])| (s.1[1] - s.0[1]).atan2(s.1[0] - s.0[0]);
    let turn = |a: f64, b: f64| {
        let mut d = b - a;
        while d > std::f64::consts::PI {
            d -= 2.0 * std::f64::consts::PI;
        }
        while d < -std::f64::consts::PI {
            d += 2.0 * std::f64::consts::PI;
        }
        d.abs()
    };
    let mut changed = true;
    while changed && segs.len() > 1 {
        changed = false;
        let k = segs.len();
        for i in 0..k {
            let j = (i + 1) % k;
            if turn(heading(&segs[i]), heading(&segs[j])) < tol {
                let merged = (segs[i].0, segs[j].1);
                segs[i] = merged;
                segs.remove(j);
                changed = true;
                break;
            }
        }
    }
    segs
}

/// Ranked grasp edges of a deformable object: boundary of the projected
/// cloud split into straight pieces, scored by length × clearance.
pub fn detect_deformable(seg: &SegmentedCloud, object: &ObjectSpec, params: &PerceptionParams) -> Result<Vec<EdgeCandidate>, PerceptionError> {
    let (id, inst) = seg
        .of_class(&object.name)
        .filter(|(_, i)| match (params.search_region.as_ref(), i.cloud.centroid()) {
            (Some(r), Some(c)) => r.contains(&c),
            (None, Some(_)) => true,
            _ => false,
        })
        .max_by(|a, b| a.1.confidence.total_cmp(&b.1.confidence).then(b.0.cmp(&a.0)))
        .ok_or_else(|| PerceptionError::NotFound(object.name.clone()))?;
    let pts = &inst.cloud.points;
    let p = &params.edges;
    if pts.len() < MIN_POINTS || covariance_rank(pts) < 2 {
        return Err(PerceptionError::NoEdges);
    }
    let plane = Plane::fit(pts);
    let flat: Vec<[f64; 2]> = pts.iter().map(|x| plane.project(x)).collect();
    let (boundary, spacing) = alpha_boundary(&flat, p.alpha_factor).ok_or(PerceptionError::NoEdges)?;
    let perimeter: f64 = (0..boundary.len()).map(|i| dist2(boundary[i], boundary[(i + 1) % boundary.len()])).sum();
    if perimeter < p.min_edge_length {
        return Err(PerceptionError::NoEdges);
    }
    let segs = straight_edges(&boundary, spacing * p.alpha_factor * 0.5, p.edge_angle_tol);

    let obstacles: Vec<Vec3> = seg
        .instances
        .iter()
        .filter(|(k, _)| **k != id)
        .flat_map(|(_, i)| i.cloud.points.iter())
        .filter(|q| (*q - plane.origin).dot(&plane.normal) >= -p.support_tolerance)
        .copied()
        .collect();
    let tree = (!obstacles.is_empty()).then(|| PointIndex::new(&obstacles));

    let mut out = Vec::new();
    for (a2, b2) in segs {
        let len = dist2(a2, b2);
        if len < p.min_edge_length {
            continue;
        }
        let (a, b) = (plane.lift(a2), plane.lift(b2));
        let tangent = (b - a).normalize();
        let inward = plane.u * -(b2[1] - a2[1]) + plane.v * (b2[0] - a2[0]);
        let mut approach = Vec3::z().cross(&tangent);
        if approach.norm() < 1e-6 {
            approach = inward - tangent * inward.dot(&tangent);
        }
        approach = approach.normalize();
        if approach.dot(&inward) < 0.0 {
            approach = -approach;
        }
        let clearance = match &tree {
            None => p.clearance_cap,
            Some(t) => (0..=8)
                .map(|k| {
                    let q = a + (b - a) * (k as f64 / 8.0);
                    t.nearest(&q).map_or(f64::INFINITY, |(_, d2)| d2.sqrt())
                })
                .fold(p.clearance_cap, f64::min),
        };
        out.push(EdgeCandidate {
            grasp_point: (a + b) * 0.5,
            approach_direction: approach,
            edge_tangent: tangent,
            score: len * clearance,
        });
    }
    if out.is_empty() {
        return Err(PerceptionError::NoEdges);
    }
    out.sort_by(|x, y| y.score.total_cmp(&x.score));
    Ok(out)
}

/// Perceived centroid of an instance: registered model centroid for rigid
/// objects, fitted center for spheres, raw centroid otherwise.
pub fn perceived_centroid(cloud: &PointCloud, object: &ObjectSpec, params: &PerceptionParams) -> Option<Vec3> {
    let raw = cloud.centroid()?;
    if object.category == ObjectCategory::Deformable {
        return Some(raw);
    }
    match estimate_instance(cloud, object, params) {
        Ok(est) => Some(est.pose.transform_point(&object.shape.centroid())),
        Err(_) => Some(raw),
    }
}

/// Verifies a grasp by comparing the expected object centroid (`gripper`,
/// the tool pose composed with the planned grasp offset) against the
/// perceived one.
pub fn detect_pick(gripper: &Pose, seg: &SegmentedCloud, object: &ObjectSpec, params: &PerceptionParams) -> PickVerdict {
    let g = gripper.translation;
    let nearest = seg
        .of_class(&object.name)
        .filter_map(|(id, i)| i.cloud.centroid().map(|c| (id, i, (c - g).norm())))
        .min_by(|a, b| a.2.total_cmp(&b.2).then(a.0.cmp(&b.0)));
    let Some((_, inst, _)) = nearest else {
        return PickVerdict { success: false, gripper_object_offset: f64::INFINITY, reason: PickReason::ObjectAbsent };
    };
    let c = perceived_centroid(&inst.cloud, object, params).expect("non-empty instance");
    let offset = (c - g).norm();
    pick_verdict(offset, params.pick_radius)
}

pub fn pick_verdict(offset: f64, pick_radius: f64) -> PickVerdict {
    let success = offset <= pick_radius;
    PickVerdict {
        success,
        gripper_object_offset: offset,
        reason: if success { PickReason::Aligned } else { PickReason::Misaligned },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::transform_cloud;
    use crate::motion::Arms;
    use crate::sim::{NoiseProfile, Placement, SceneSpec, Stock};
    use crate::skill_graph::SkillGraph;
    use proptest::prelude::*;
    use rand::Rng;
    use std::sync::Arc;

    fn graph() -> SkillGraph {
        SkillGraph::default_graph()
    }

    fn world(stock: Vec<(&str, usize, u32, Placement)>, seed: u64) -> WorldState {
        let g = graph();
        let robot = Arc::new(Arms::default_pair(g.tool("two_finger_gripper").unwrap()));
        let scene = SceneSpec {
            stock: stock
                .into_iter()
                .map(|(o, b, c, p)| Stock { object: o.into(), bin: b, count: c, placement: p })
                .collect(),
            ..SceneSpec::default()
        };
        WorldState::reset(&scene, &g, robot, seed).unwrap()
    }

    fn head() -> SensorSpec {
        graph().sensor("head").unwrap().clone()
    }

    fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
        let axis = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let angle = rng.random_range(0.0..std::f64::consts::PI);
        let t = Vec3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(0.0..0.3));
        Pose::from_axis_angle(axis, angle, t)
    }

    #[test]
    fn zero_noise_sphere_points_lie_on_surface() {
        let w = world(vec![("tennis_ball", 0, 1, Placement::Upright)], 1);
        let seg = segment_scene(&w, &head(), &NoiseProfile::zero(), 0);
        let balls: Vec<_> = seg.of_class("tennis_ball").collect();
        assert_eq!(balls.len(), 1);
        let c = w.objects[0].pose.translation;
        for p in &balls[0].1.cloud.points {
            assert!(((p - c).norm() - 0.033).abs() < 1e-9);
        }
        // visible cap faces the camera
        let cam = head().mount_pose.translation;
        assert!(balls[0].1.cloud.points.iter().all(|p| (p - c).dot(&(cam - c)) > -1e-9));
    }

    #[test]
    fn full_miss_rate_empties_objects() {
        let w = world(vec![("tennis_ball", 0, 2, Placement::Upright)], 1);
        let noise = NoiseProfile { miss_rate: 1.0, ..NoiseProfile::zero() };
        let seg = segment_scene(&w, &head(), &noise, 0);
        assert!(seg.instances.keys().all(|&k| k >= CONTAINER_ID_BASE));
    }

    #[test]
    fn stacked_top_hides_bottom() {
        let w = world(vec![("cube", 0, 2, Placement::Stacked)], 2);
        let seg = segment_scene(&w, &head(), &NoiseProfile::zero(), 0);
        let count = |id: u32| seg.instances.get(&id).map_or(0, |i| i.cloud.len());
        assert!(count(1) > count(0), "{} vs {}", count(1), count(0));
        // ray oracle: every observed point of the bottom cube is the first hit
        let cam = head().mount_pose.translation;
        let top = &w.objects[1];
        for p in &seg.instances[&0].cloud.points {
            let inv = top.pose.inverse();
            let hit = top.spec.shape.line_interval(&inv.transform_point(&cam), &inv.transform_vector(&(p - cam)));
            assert!(hit.is_none_or(|(t0, t1)| t1 <= 1e-9 || t0 >= 1.0 - 1e-6));
        }
    }

    #[test]
    fn box_cloud_has_no_object_points() {
        let mut w = world(vec![("cube", 0, 1, Placement::Upright)], 3);
        w.objects[0].pose = Pose::from_translation(Vec3::new(0.42, 0.0, 0.03));
        w.objects[0].status = ObjectStatus::InBox;
        let seg = segment_scene(&w, &head(), &NoiseProfile::zero(), 0);
        let bx = seg.of_class("packing_box").next().unwrap().1;
        let o = &w.objects[0];
        assert!(bx.cloud.points.iter().all(|p| o.spec.shape.surface_distance(&o.pose.inverse().transform_point(p)) > 1e-3));
    }

    #[test]
    fn self_registration_is_exact_for_every_kind() {
        let shapes = [
            ShapePrimitive::Box { extents: [0.06, 0.05, 0.04] },
            ShapePrimitive::Cylinder { radius: 0.03, height: 0.1 },
            ShapePrimitive::Sphere { radius: 0.03 },
            ShapePrimitive::Cone { radius: 0.05, height: 0.1 },
            ShapePrimitive::FlatSlab { extents: [0.2, 0.06, 0.05] },
            ShapePrimitive::DeformableSheet { extents: [0.2, 0.12, 0.01] },
        ];
        for s in shapes {
            let cloud = s.sample_surface(MODEL_POINTS, MODEL_SEED);
            let est = icp_register(&cloud, &s, 1, &IcpParams::default()).unwrap();
            assert!(est.residual < 1e-9, "{s:?} {}", est.residual);
            assert!(est.pose.translation.norm() < 1e-9);
            assert!(est.pose.rotation.angle() < 1e-9);
        }
    }

    #[test]
    fn noisy_registration_recovers_transform() {
        let shape = ShapePrimitive::Box { extents: [0.08, 0.05, 0.03] };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let noise = Normal::new(0.0, 0.001).unwrap();
        let mut ok = 0;
        for trial in 0..20 {
            let truth = random_pose(&mut rng);
            let sample = shape.sample_surface(1500, 100 + trial);
            let mut pts = Vec::new();
            for p in &sample.points {
                if rng.random_bool(0.3) {
                    continue;
                }
                pts.push(truth.transform_point(p) + Vec3::from_fn(|_, _| noise.sample(&mut rng)));
            }
            let est = icp_register(&PointCloud::new(pts).unwrap(), &shape, 24, &IcpParams::default()).unwrap();
            let rot = shape.symmetric_rotation_error(&est.pose, &truth);
            let trans = (est.pose.translation - truth.translation).norm();
            if rot < 2f64.to_radians() && trans < 0.002 {
                ok += 1;
            }
        }
        assert!(ok >= 19, "{ok}");
    }

    #[test]
    fn residual_never_increases_within_a_start() {
        let shape = ShapePrimitive::Cone { radius: 0.05, height: 0.1 };
        let m = IcpModel::new(&shape, MODEL_POINTS);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for k in 0..10 {
            let truth = random_pose(&mut rng);
            let obs: Vec<Vec3> = shape.sample_surface(400, k).points.iter().map(|p| truth.transform_point(p)).collect();
            let run = icp_from(&m, &obs, Pose::identity(), &IcpParams::default());
            for w in run.history.windows(2) {
                assert!(w[1] <= w[0] + 1e-12, "{:?}", run.history);
            }
        }
    }

    #[test]
    fn degenerate_clouds_are_rejected() {
        let line: Vec<Vec3> = (0..20).map(|i| Vec3::new(i as f64 * 0.01, 0.0, 0.0)).collect();
        let shape = ShapePrimitive::Sphere { radius: 0.03 };
        assert_eq!(icp_register(&PointCloud::new(line).unwrap(), &shape, 1, &IcpParams::default()), Err(PerceptionError::Degenerate));
        let few = PointCloud::new(vec![Vec3::zeros(); 5]).unwrap();
        assert_eq!(icp_register(&few, &shape, 1, &IcpParams::default()), Err(PerceptionError::TooFewPoints(5)));
    }

    #[test]
    fn upright_flag_follows_tilt() {
        let g = graph();
        let can = g.object("can").unwrap();
        for (tilt, upright) in [(0.0, true), (10.0, true), (30.0, false), (90.0, false)] {
            let truth = Pose::rot_x(f64::to_radians(tilt)).with_translation(Vec3::new(0.3, 0.1, 0.1));
            let cloud = transform_cloud(&truth, &can.shape.sample_surface(800, 77));
            let mut seg = SegmentedCloud::default();
            seg.instances.insert(0, Instance { class: "can".into(), cloud, confidence: 1.0 });
            let est = detect_rigid(&seg, can, &PerceptionParams::default()).unwrap();
            assert_eq!(est.upright, Some(upright), "tilt {tilt}");
        }
        let cube = g.object("cube").unwrap();
        let mut seg = SegmentedCloud::default();
        seg.instances.insert(0, Instance { class: "cube".into(), cloud: cube.shape.sample_surface(500, 1), confidence: 1.0 });
        assert_eq!(detect_rigid(&seg, cube, &PerceptionParams::default()).unwrap().upright, None);
    }

    #[test]
    fn sphere_center_from_partial_cap() {
        let g = graph();
        let ball = g.object("tennis_ball").unwrap();
        let center = Vec3::new(0.3, 0.1, 0.05);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let noise = Normal::new(0.0, 0.001).unwrap();
        let pts: Vec<Vec3> = ball
            .shape
            .sample_surface(1000, 3)
            .points
            .into_iter()
            .filter(|p| p.z > -0.005 && p.x < 0.01)
            .map(|p| p + center + Vec3::from_fn(|_, _| noise.sample(&mut rng)))
            .collect();
        let mut seg = SegmentedCloud::default();
        seg.instances.insert(4, Instance { class: "tennis_ball".into(), cloud: PointCloud::new(pts).unwrap(), confidence: 0.5 });
        let est = detect_rigid(&seg, ball, &PerceptionParams::default()).unwrap();
        assert!((est.pose.translation - center).norm() < 0.002);
        assert_eq!(est.pose.rotation.angle(), 0.0);
        assert_eq!(
            detect_rigid(&SegmentedCloud::default(), ball, &PerceptionParams::default()),
            Err(PerceptionError::NotFound("tennis_ball".into()))
        );
    }

    #[test]
    fn can_in_world_registers_exactly() {
        let w = world(vec![("can", 1, 1, Placement::Upright)], 6);
        let g = graph();
        let seg = segment_scene(&w, &head(), &NoiseProfile::zero(), 0);
        let est = detect_rigid(&seg, g.object("can").unwrap(), &PerceptionParams::default()).unwrap();
        assert!(est.residual < 1e-6, "{}", est.residual);
        let truth = w.objects[0].pose;
        assert!((est.pose.translation - truth.translation).norm() < 1e-3);
        assert!(g.object("can").unwrap().shape.symmetric_rotation_error(&est.pose, &truth) < 1e-3);
        assert_eq!(est.upright, Some(true));
    }

    fn sheet_seg(extra: Option<Vec<Vec3>>) -> (SegmentedCloud, ObjectSpec) {
        let g = graph();
        let sheet = g.object("tshirt").unwrap().clone();
        let ShapePrimitive::DeformableSheet { extents } = sheet.shape else { unreachable!() };
        let (hx, hy) = (extents[0] / 2.0, extents[1] / 2.0);
        // dense top surface as seen from above
        let mut pts = Vec::new();
        let n = 60;
        for i in 0..=n {
            for j in 0..=n * 6 / 10 {
                let x = -hx + 2.0 * hx * i as f64 / n as f64;
                let y = -hy + 2.0 * hy * j as f64 / (n * 6 / 10) as f64;
                pts.push(Vec3::new(x + 0.3, y + 0.3, 0.01));
            }
        }
        let mut seg = SegmentedCloud::default();
        seg.instances.insert(0, Instance { class: sheet.name.clone(), cloud: PointCloud::new(pts).unwrap(), confidence: 1.0 });
        if let Some(e) = extra {
            seg.instances.insert(CONTAINER_ID_BASE, Instance { class: "bin0".into(), cloud: PointCloud::new(e).unwrap(), confidence: 1.0 });
        }
        (seg, sheet)
    }

    #[test]
    fn isolated_sheet_gives_four_edges_long_side_first() {
        let (seg, sheet) = sheet_seg(None);
        let c = detect_deformable(&seg, &sheet, &PerceptionParams::default()).unwrap();
        assert_eq!(c.len(), 4, "{c:?}");
        // long sides run along x
        assert!(c[0].edge_tangent.x.abs() > 0.99);
        assert!((c[0].grasp_point.y - 0.3).abs() > 0.05);
        for e in &c {
            assert!(e.approach_direction.dot(&e.edge_tangent).abs() < 1e-6);
            assert!(e.approach_direction.z.abs() < 1e-9);
            // inward
            let to_center = Vec3::new(0.3, 0.3, 0.01) - e.grasp_point;
            assert!(e.approach_direction.dot(&to_center) > 0.0);
        }
        assert!(c.windows(2).all(|w| w[0].score >= w[1].score));
    }

    #[test]
    fn wall_lowers_adjacent_edge_score() {
        // wall 2 cm beyond the +y long side
        let wall: Vec<Vec3> = (0..200).map(|i| Vec3::new(0.2 + i as f64 * 0.001, 0.38, 0.02 + (i % 5) as f64 * 0.005)).collect();
        let (seg, sheet) = sheet_seg(Some(wall));
        let c = detect_deformable(&seg, &sheet, &PerceptionParams::default()).unwrap();
        let side = |sign: f64| c.iter().find(|e| e.edge_tangent.x.abs() > 0.99 && (e.grasp_point.y - 0.3) * sign > 0.0).unwrap().score;
        assert!(side(1.0) < side(-1.0));
    }

    #[test]
    fn tiny_cloud_has_no_edges() {
        let g = graph();
        let sheet = g.object("tshirt").unwrap();
        let pts = vec![Vec3::zeros(), Vec3::x() * 0.001, Vec3::y() * 0.001, Vec3::new(0.001, 0.001, 0.0), Vec3::new(0.0005, 0.0005, 0.0)];
        let mut seg = SegmentedCloud::default();
        seg.instances.insert(0, Instance { class: "tshirt".into(), cloud: PointCloud::new(pts).unwrap(), confidence: 1.0 });
        assert_eq!(detect_deformable(&seg, sheet, &PerceptionParams::default()), Err(PerceptionError::NoEdges));
    }

    #[test]
    fn pick_verdicts() {
        let g = graph();
        let cube = g.object("cube").unwrap();
        let at = Vec3::new(0.3, 0.2, 0.2);
        let cloud = transform_cloud(&Pose::from_translation(at), &cube.shape.sample_surface(MODEL_POINTS, MODEL_SEED));
        let mut seg = SegmentedCloud::default();
        seg.instances.insert(0, Instance { class: "cube".into(), cloud, confidence: 1.0 });
        let p = PerceptionParams::default();
        let v = detect_pick(&Pose::from_translation(at + Vec3::new(0.005, 0.0, 0.0)), &seg, cube, &p);
        assert_eq!(v.reason, PickReason::Aligned);
        assert!(v.success && (v.gripper_object_offset - 0.005).abs() < 1e-6);
        let v = detect_pick(&Pose::from_translation(at + Vec3::new(0.0, 0.0, 0.25)), &seg, cube, &p);
        assert_eq!(v.reason, PickReason::Misaligned);
        let v = detect_pick(&Pose::identity(), &SegmentedCloud::default(), cube, &p);
        assert_eq!(v.reason, PickReason::ObjectAbsent);
        assert!(!v.success);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn registration_is_equivariant(ax in -1.0f64..1.0, ay in -1.0f64..1.0, az in 0.1f64..1.0, angle in 0.0f64..3.0,
                                       tx in -0.5f64..0.5, ty in -0.5f64..0.5, tz in -0.5f64..0.5) {
            let shape = ShapePrimitive::Box { extents: [0.08, 0.05, 0.03] };
            let base = Pose::from_axis_angle(Vec3::new(0.2, 0.1, 1.0), 0.4, Vec3::new(0.1, 0.0, 0.05));
            let obs = transform_cloud(&base, &shape.sample_surface(600, 12));
            let g = Pose::from_axis_angle(Vec3::new(ax, ay, az), angle, Vec3::new(tx, ty, tz));
            let a = icp_register(&obs, &shape, 24, &IcpParams::default()).unwrap();
            let b = icp_register(&transform_cloud(&g, &obs), &shape, 24, &IcpParams::default()).unwrap();
            let expect = g.compose(&a.pose);
            prop_assert!((b.pose.translation - expect.translation).norm() < 1e-3);
            prop_assert!(shape.symmetric_rotation_error(&b.pose, &expect) < 1f64.to_radians());
        }

        #[test]
        fn pick_is_monotone_in_offset(d1 in 0.0f64..0.1, d2 in 0.0f64..0.1) {
            let (lo, hi) = if d1 < d2 { (d1, d2) } else { (d2, d1) };
            if pick_verdict(hi, 0.04).success {
                prop_assert!(pick_verdict(lo, 0.04).success);
            }
        }
    }
}
