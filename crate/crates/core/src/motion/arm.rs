//! Serial-chain arm model, forward kinematics and damped-least-squares IK.

use nalgebra::{Matrix6, SVector, Unit, UnitQuaternion, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::MotionError;
use crate::geometry::{Pose, Vec3};
use crate::skill_graph::{ToolKind, ToolSpec};

pub const DOF: usize = 6;
pub type JointVector = SVector<f64, DOF>;

pub const DEFAULT_ARMS: &str = include_str!("../../data/default_arm.toml");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Joint {
    pub axis: [f64; 3],
    pub offset: [f64; 3],
    pub limits: [f64; 2],
}

/// Swept sphere around segment `a`–`b`, fixed to link `link`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Capsule {
    pub link: usize,
    pub a: [f64; 3],
    pub b: [f64; 3],
    pub radius: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmModel {
    pub joints: Vec<Joint>,
    pub capsules: Vec<Capsule>,
    /// Tool frame in the last joint frame.
    pub tool: Pose,
    #[serde(default)]
    pub base_pose: Pose,
}

/// The two arms of the robot.
#[derive(Clone, Debug, PartialEq)]
pub struct Arms {
    pub left: ArmModel,
    pub right: ArmModel,
}

#[derive(Deserialize)]
struct ArmsFile {
    left_base: Pose,
    right_base: Pose,
    arm: ArmModel,
}

impl Arms {
    /// The shipped arm pair fitted with the given gripper.
    pub fn default_pair(tool: &ToolSpec) -> Arms {
        Arms::from_toml_str(DEFAULT_ARMS, tool).expect("shipped arm file is valid")
    }

    pub fn from_toml_str(s: &str, tool: &ToolSpec) -> Result<Arms, MotionError> {
        let f: ArmsFile = toml::from_str(s).map_err(|e| MotionError::Model(e.to_string()))?;
        f.arm.validate()?;
        let arm = f.arm.with_tool(tool);
        let mut left = arm.clone();
        left.base_pose = f.left_base;
        let mut right = arm;
        right.base_pose = f.right_base;
        Ok(Arms { left, right })
    }

    pub fn load(path: &Path, tool: &ToolSpec) -> Result<Arms, MotionError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| MotionError::Model(format!("{}: {e}", path.display())))?;
        Arms::from_toml_str(&text, tool)
    }

    pub fn get(&self, side: Side) -> &ArmModel {
        match side {
            Side::Left => &self.left,
            Side::Right => &self.right,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub const BOTH: [Side; 2] = [Side::Left, Side::Right];

    pub fn other(self) -> Side {
        match self {
            Side::Left => Side::Right,
            Side::Right => Side::Left,
        }
    }

    pub fn index(self) -> usize {
        match self {
            Side::Left => 0,
            Side::Right => 1,
        }
    }
}

/// Link frames (index 0 is the mount) and the tool pose for one configuration.
#[derive(Clone, Debug)]
pub struct LinkPoses {
    pub frames: Vec<Pose>,
    pub tool: Pose,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IkParams {
    pub pos_tol: f64,
    pub rot_tol: f64,
    pub restarts: usize,
    pub max_iters: usize,
    pub seed: u64,
}

impl Default for IkParams {
    fn default() -> Self {
        IkParams {
            pos_tol: 1e-3,
            rot_tol: 0.5f64.to_radians(),
            restarts: 16,
            max_iters: 150,
            seed: 0,
        }
    }
}

const FINGER_RADIUS: f64 = 0.006;
const FIXED_JAW_RADIUS: f64 = 0.01;

/// Radius of the thickest finger capsule `tool` adds to the hand.
pub fn finger_radius(tool: &ToolSpec) -> f64 {
    match tool.kind {
        ToolKind::TwoFingerGripper => FINGER_RADIUS,
        ToolKind::OneFingerGripper => FIXED_JAW_RADIUS,
    }
}

impl ArmModel {
    pub fn validate(&self) -> Result<(), MotionError> {
        if self.joints.len() != DOF {
            return Err(MotionError::Model(format!("expected {DOF} joints, got {}", self.joints.len())));
        }
        for (i, j) in self.joints.iter().enumerate() {
            if !(j.limits[0] < j.limits[1]) {
                return Err(MotionError::Model(format!("joint {i}: limits min must be < max")));
            }
            if Vec3::from(j.axis).norm() < 1e-9 {
                return Err(MotionError::Model(format!("joint {i}: zero axis")));
            }
        }
        for c in &self.capsules {
            if !(c.radius > 0.0) || c.link > DOF {
                return Err(MotionError::Model(format!("bad capsule on link {}", c.link)));
            }
        }
        Ok(())
    }

    /// Adds finger capsules for `tool` on the last link, replacing any
    /// previous ones. Fingers end at the tool point.
    pub fn with_tool(mut self, tool: &ToolSpec) -> ArmModel {
        self.capsules.retain(|c| c.link != DOF + 1);
        let w = tool.max_opening / 2.0;
        let fingers: Vec<(f64, f64)> = match tool.kind {
            ToolKind::TwoFingerGripper => vec![(w + FINGER_RADIUS, FINGER_RADIUS), (-w - FINGER_RADIUS, FINGER_RADIUS)],
            ToolKind::OneFingerGripper => vec![(w + FINGER_RADIUS, FINGER_RADIUS), (-w - FIXED_JAW_RADIUS, FIXED_JAW_RADIUS)],
        };
        for (y, r) in fingers {
            let a = self.tool.transform_point(&Vec3::new(0.0, y, -tool.finger_length + r));
            let b = self.tool.transform_point(&Vec3::new(0.0, y, 0.0));
            self.capsules.push(Capsule {
                link: DOF + 1,
                a: a.into(),
                b: b.into(),
                radius: r,
            });
        }
        self
    }

    pub fn home(&self) -> JointVector {
        JointVector::zeros()
    }

    pub fn within_limits(&self, q: &JointVector) -> bool {
        self.joints.iter().enumerate().all(|(i, j)| q[i] >= j.limits[0] && q[i] <= j.limits[1])
    }

    pub fn clamp(&self, q: &JointVector) -> JointVector {
        JointVector::from_fn(|i, _| q[i].clamp(self.joints[i].limits[0], self.joints[i].limits[1]))
    }

    pub fn random_config(&self, rng: &mut impl Rng) -> JointVector {
        JointVector::from_fn(|i, _| {
            let [lo, hi] = self.joints[i].limits;
            rng.random_range(lo..=hi)
        })
    }

    /// Distance from the shoulder (second joint) to the tool point when the
    /// chain is stretched out.
    pub fn reach(&self) -> f64 {
        self.joints[2..].iter().map(|j| Vec3::from(j.offset).norm()).sum::<f64>() + self.tool.translation.norm()
    }

    /// Shoulder position in the base frame of the robot.
    pub fn shoulder(&self) -> Vec3 {
        let mut p = Vec3::zeros();
        for j in &self.joints[..2] {
            p += Vec3::from(j.offset);
        }
        self.base_pose.transform_point(&p)
    }

    /// Link frames without a limit check; callers that sample inside the
    /// limits use this on hot paths.
    pub fn link_poses(&self, q: &JointVector) -> LinkPoses {
        let mut frames = Vec::with_capacity(DOF + 1);
        let mut current = self.base_pose;
        frames.push(current);
        for (i, j) in self.joints.iter().enumerate() {
            let axis = Unit::new_normalize(Vec3::from(j.axis));
            let local = Pose::new(UnitQuaternion::from_axis_angle(&axis, q[i]), Vec3::from(j.offset));
            current = current.compose(&local);
            frames.push(current);
        }
        let tool = current.compose(&self.tool);
        LinkPoses { frames, tool }
    }

    pub fn forward_kinematics(&self, q: &JointVector) -> Result<Pose, MotionError> {
        for (i, j) in self.joints.iter().enumerate() {
            if !(q[i] >= j.limits[0] && q[i] <= j.limits[1]) {
                return Err(MotionError::JointLimit { joint: i, value: q[i] });
            }
        }
        Ok(self.link_poses(q).tool)
    }

    /// World-frame capsule segments for configuration `q`. Link `DOF + 1`
    /// holds the gripper fingers and shares the last joint frame.
    pub fn world_capsules(&self, q: &JointVector) -> Vec<(Vec3, Vec3, f64, usize)> {
        let lp = self.link_poses(q);
        self.capsules
            .iter()
            .map(|c| {
                let f = &lp.frames[c.link.min(DOF)];
                (
                    f.transform_point(&Vec3::from(c.a)),
                    f.transform_point(&Vec3::from(c.b)),
                    c.radius,
                    c.link,
                )
            })
            .collect()
    }

    /// Geometric Jacobian of the tool point (rows: linear then angular).
    pub fn jacobian(&self, q: &JointVector) -> nalgebra::Matrix6<f64> {
        let lp = self.link_poses(q);
        let p = lp.tool.translation;
        let mut jac = Matrix6::zeros();
        for i in 0..DOF {
            let frame = &lp.frames[i + 1];
            let z = frame.rotation * Vec3::from(self.joints[i].axis).normalize();
            let v = z.cross(&(p - frame.translation));
            for r in 0..3 {
                jac[(r, i)] = v[r];
                jac[(r + 3, i)] = z[r];
            }
        }
        jac
    }

    /// Damped-least-squares IK from `seed`, then from random restarts.
    pub fn solve_ik(&self, target: &Pose, seed: &JointVector, params: &IkParams) -> Result<JointVector, MotionError> {
        self.solve_ik_filtered(target, seed, params, |_| true)
    }

    /// As [`ArmModel::solve_ik`], accepting only solutions for which `accept`
    /// holds (used to reject colliding solutions).
    pub fn solve_ik_filtered(
        &self,
        target: &Pose,
        seed: &JointVector,
        params: &IkParams,
        mut accept: impl FnMut(&JointVector) -> bool,
    ) -> Result<JointVector, MotionError> {
        if !target.is_finite() {
            return Err(MotionError::Infeasible);
        }
        // cheap reject: farther than the stretched chain
        if (target.translation - self.shoulder()).norm() > self.reach() + params.pos_tol {
            return Err(MotionError::Infeasible);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let first = self.clamp(seed);
        for attempt in 0..=params.restarts {
            let start = if attempt == 0 { first } else { self.random_config(&mut rng) };
            if let Some(q) = self.dls(target, start, params) {
                if accept(&q) {
                    return Ok(q);
                }
            }
        }
        Err(MotionError::Infeasible)
    }

    fn pose_error(&self, q: &JointVector, target: &Pose) -> Vector6<f64> {
        let cur = self.link_poses(q).tool;
        let dp = target.translation - cur.translation;
        let dr = (target.rotation * cur.rotation.inverse()).scaled_axis();
        Vector6::new(dp.x, dp.y, dp.z, dr.x, dr.y, dr.z)
    }

    fn converged(e: &Vector6<f64>, params: &IkParams) -> bool {
        e.fixed_rows::<3>(0).norm() <= params.pos_tol && e.fixed_rows::<3>(3).norm() <= params.rot_tol
    }

    fn dls(&self, target: &Pose, start: JointVector, params: &IkParams) -> Option<JointVector> {
        // orientation error weighted so 1 rad counts like 0.2 m
        const ROT_WEIGHT: f64 = 0.2;
        let weigh = |e: &Vector6<f64>| {
            let mut w = *e;
            for r in 3..6 {
                w[r] *= ROT_WEIGHT;
            }
            w
        };
        let mut q = start;
        let mut e = self.pose_error(&q, target);
        let mut cost = weigh(&e).norm_squared();
        let mut lambda = 1e-2;
        for _ in 0..params.max_iters {
            if Self::converged(&e, params) {
                // tolerance checks above are on the raw error; re-verify exactly
                return Some(q);
            }
            let mut jac = self.jacobian(&q);
            for r in 3..6 {
                for c in 0..DOF {
                    jac[(r, c)] *= ROT_WEIGHT;
                }
            }
            let ew = weigh(&e);
            let jjt = jac * jac.transpose() + Matrix6::identity() * lambda;
            let Some(y) = jjt.lu().solve(&ew) else {
                lambda *= 10.0;
                continue;
            };
            let mut dq = jac.transpose() * y;
            let max_step = dq.amax();
            if max_step > 0.5 {
                dq *= 0.5 / max_step;
            }
            let candidate = self.clamp(&(q + dq));
            let ce = self.pose_error(&candidate, target);
            let c_cost = weigh(&ce).norm_squared();
            if c_cost < cost {
                q = candidate;
                e = ce;
                cost = c_cost;
                lambda = (lambda * 0.3).max(1e-6);
            } else {
                lambda *= 5.0;
                if lambda > 1e3 {
                    break;
                }
            }
        }
        Self::converged(&e, params).then_some(q)
    }
}

/// Composite configuration of both arms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualConfig {
    pub left: JointVector,
    pub right: JointVector,
}

impl DualConfig {
    pub fn home() -> DualConfig {
        DualConfig {
            left: JointVector::zeros(),
            right: JointVector::zeros(),
        }
    }

    pub fn get(&self, side: Side) -> &JointVector {
        match side {
            Side::Left => &self.left,
            Side::Right => &self.right,
        }
    }

    pub fn get_mut(&mut self, side: Side) -> &mut JointVector {
        match side {
            Side::Left => &mut self.left,
            Side::Right => &mut self.right,
        }
    }

    pub fn with(mut self, side: Side, q: JointVector) -> DualConfig {
        *self.get_mut(side) = q;
        self
    }

    pub fn to_array(&self) -> [f64; 2 * DOF] {
        let mut out = [0.0; 2 * DOF];
        out[..DOF].copy_from_slice(self.left.as_slice());
        out[DOF..].copy_from_slice(self.right.as_slice());
        out
    }

    pub fn from_array(a: &[f64; 2 * DOF]) -> DualConfig {
        DualConfig {
            left: JointVector::from_column_slice(&a[..DOF]),
            right: JointVector::from_column_slice(&a[DOF..]),
        }
    }

    /// ∞-norm distance over all twelve joints.
    pub fn distance(&self, other: &DualConfig) -> f64 {
        (self.left - other.left).amax().max((self.right - other.right).amax())
    }

    pub fn lerp(&self, other: &DualConfig, t: f64) -> DualConfig {
        if t >= 1.0 {
            return *other;
        }
        DualConfig {
            left: self.left + (other.left - self.left) * t,
            right: self.right + (other.right - self.right) * t,
        }
    }

    pub fn within_limits(&self, arms: &Arms) -> bool {
        arms.left.within_limits(&self.left) && arms.right.within_limits(&self.right)
    }
}
