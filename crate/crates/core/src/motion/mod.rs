//! Kinematics, collision checking, RRT-Connect planning and realization of
//! labeled Cartesian plans in joint space.

pub mod arm;
pub mod cartesian;
pub mod collision;
pub mod rrt;

use serde::{Deserialize, Serialize};

pub use arm::{ArmModel, Arms, DualConfig, IkParams, JointVector, Side, DOF};
pub use cartesian::map_cartesian_plan;
pub use collision::{check_collision, Attached, Body, CollisionReport, CollisionWorld, Obstacle, Solid};
pub use rrt::{rrt_connect, PlannerParams};

use crate::error::MotionError;
use crate::geometry::Pose;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Required,
    Optional,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GripperAction {
    None,
    Open,
    /// Close down to the given finger separation (m).
    Close(f64),
}

/// Which arm a waypoint drives, with its tool target(s).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArmTarget {
    Left(Pose),
    Right(Pose),
    Both { left: Pose, right: Pose },
}

impl ArmTarget {
    pub fn single(side: Side, pose: Pose) -> ArmTarget {
        match side {
            Side::Left => ArmTarget::Left(pose),
            Side::Right => ArmTarget::Right(pose),
        }
    }

    pub fn targets(&self) -> Vec<(Side, Pose)> {
        match *self {
            ArmTarget::Left(p) => vec![(Side::Left, p)],
            ArmTarget::Right(p) => vec![(Side::Right, p)],
            ArmTarget::Both { left, right } => vec![(Side::Left, left), (Side::Right, right)],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub arm: ArmTarget,
    pub label: Label,
    pub gripper: GripperAction,
}

impl Waypoint {
    pub fn required(arm: ArmTarget) -> Waypoint {
        Waypoint {
            arm,
            label: Label::Required,
            gripper: GripperAction::None,
        }
    }

    pub fn optional(arm: ArmTarget) -> Waypoint {
        Waypoint {
            arm,
            label: Label::Optional,
            gripper: GripperAction::None,
        }
    }

    pub fn with_gripper(mut self, g: GripperAction) -> Waypoint {
        self.gripper = g;
        self
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LabeledCartesianPlan {
    pub waypoints: Vec<Waypoint>,
}

impl LabeledCartesianPlan {
    pub fn new(waypoints: Vec<Waypoint>) -> Self {
        LabeledCartesianPlan { waypoints }
    }

    pub fn validate(&self, max_opening: f64) -> Result<(), MotionError> {
        if !self.waypoints.iter().any(|w| w.label == Label::Required) {
            return Err(MotionError::InvalidPlan("no required waypoint".into()));
        }
        for w in &self.waypoints {
            if let GripperAction::Close(width) = w.gripper {
                if width > max_opening {
                    return Err(MotionError::InvalidPlan(format!("close width {width} exceeds tool opening")));
                }
            }
        }
        Ok(())
    }
}

/// A gripper command fired on arrival at `configs[index]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathEvent {
    pub index: usize,
    pub side: Side,
    pub action: GripperAction,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct JointPath {
    pub configs: Vec<DualConfig>,
    pub events: Vec<PathEvent>,
    /// `(waypoint index, config index)` of every realized waypoint.
    pub reached: Vec<(usize, usize)>,
    /// Optional waypoints dropped because no IK solution exists.
    pub skipped: Vec<usize>,
}

impl JointPath {
    pub fn from_configs(configs: Vec<DualConfig>) -> JointPath {
        JointPath {
            configs,
            ..JointPath::default()
        }
    }

    pub fn start(&self) -> Option<&DualConfig> {
        self.configs.first()
    }

    pub fn end(&self) -> Option<&DualConfig> {
        self.configs.last()
    }

    pub fn length(&self) -> f64 {
        rrt::path_length(&self.configs)
    }

    /// Appends `other`, dropping its first config when it repeats our last.
    pub fn append(&mut self, other: JointPath) {
        let shift = match (self.configs.last(), other.configs.first()) {
            (Some(a), Some(b)) if a == b => 1,
            _ => 0,
        };
        let base = self.configs.len() - shift.min(self.configs.len());
        for e in other.events {
            self.events.push(PathEvent { index: e.index + base, ..e });
        }
        for (w, i) in other.reached {
            self.reached.push((w, i + base));
        }
        self.skipped.extend(other.skipped);
        self.configs.extend(other.configs.into_iter().skip(shift));
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MotionParams {
    pub ik: IkParams,
    pub planner: PlannerParams,
}

impl Default for MotionParams {
    fn default() -> Self {
        MotionParams {
            ik: IkParams::default(),
            planner: PlannerParams::default(),
        }
    }
}

/// Timed pause of both arms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HoldCommand {
    pub duration: f64,
}

pub fn hold(duration: f64) -> Result<HoldCommand, MotionError> {
    if !(duration >= 0.0) || !duration.is_finite() {
        return Err(MotionError::InvalidPlan(format!("hold duration {duration}")));
    }
    Ok(HoldCommand { duration })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hold_validates_duration() {
        assert_eq!(hold(0.0).unwrap().duration, 0.0);
        assert_eq!(hold(1.5).unwrap().duration, 1.5);
        assert!(hold(-1.0).is_err());
        assert!(hold(f64::NAN).is_err());
    }

    #[test]
    fn append_shifts_indices() {
        let a = DualConfig::home();
        let mut b = a;
        b.left[0] = 0.1;
        let mut p = JointPath::from_configs(vec![a, b]);
        let mut q = JointPath::from_configs(vec![b, a]);
        q.events.push(PathEvent { index: 1, side: Side::Left, action: GripperAction::Open });
        q.reached.push((4, 1));
        p.append(q);
        assert_eq!(p.configs.len(), 3);
        assert_eq!(p.events[0].index, 2);
        assert_eq!(p.reached, vec![(4, 2)]);
    }

    #[test]
    fn plan_needs_a_required_waypoint() {
        let w = Waypoint::optional(ArmTarget::Left(Pose::identity()));
        assert!(LabeledCartesianPlan::new(vec![w]).validate(0.08).is_err());
        let c = Waypoint::required(ArmTarget::Left(Pose::identity())).with_gripper(GripperAction::Close(0.2));
        assert!(LabeledCartesianPlan::new(vec![c]).validate(0.08).is_err());
    }
}
