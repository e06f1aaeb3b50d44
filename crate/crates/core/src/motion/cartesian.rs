//! Realizes a labeled Cartesian plan as a joint path: IK per waypoint,
//! RRT-Connect between consecutive realized configurations.

use super::arm::{Arms, DualConfig, IkParams};
use super::collision::CollisionWorld;
use super::rrt::rrt_connect;
use super::{JointPath, Label, LabeledCartesianPlan, MotionParams, PathEvent};
use crate::error::{MappingError, MotionError};

/// IK for every target of a waypoint, seeded from `prev`; the returned
/// configuration is collision-free in `world`.
pub fn solve_waypoint(
    world: &CollisionWorld,
    arms: &Arms,
    targets: &[(super::Side, crate::geometry::Pose)],
    prev: &DualConfig,
    ik: &IkParams,
) -> Option<DualConfig> {
    match targets {
        [(side, pose)] => {
            let model = arms.get(*side);
            model
                .solve_ik_filtered(pose, prev.get(*side), ik, |q| world.is_free(arms, &prev.with(*side, *q)))
                .ok()
                .map(|q| prev.with(*side, q))
        }
        [(s1, p1), (s2, p2)] => {
            // solve each arm; retry the second with new seeds if the pair collides
            let q1 = arms.get(*s1).solve_ik(p1, prev.get(*s1), ik).ok()?;
            let partial = prev.with(*s1, q1);
            let q2 = arms
                .get(*s2)
                .solve_ik_filtered(p2, prev.get(*s2), ik, |q| world.is_free(arms, &partial.with(*s2, *q)))
                .ok()?;
            Some(partial.with(*s2, q2))
        }
        _ => None,
    }
}

pub fn map_cartesian_plan(
    world: &CollisionWorld,
    arms: &Arms,
    plan: &LabeledCartesianPlan,
    start: &DualConfig,
    params: &MotionParams,
    seed: u64,
) -> Result<JointPath, MotionError> {
    let mut path = JointPath::from_configs(vec![*start]);
    let mut current = *start;
    for (i, w) in plan.waypoints.iter().enumerate() {
        let ik = IkParams {
            seed: seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(i as u64),
            ..params.ik
        };
        let Some(next) = solve_waypoint(world, arms, &w.arm.targets(), &current, &ik) else {
            match w.label {
                Label::Optional => {
                    path.skipped.push(i);
                    continue;
                }
                Label::Required => return Err(MappingError::UnreachableRequired(i).into()),
            }
        };
        let segment = match rrt_connect(world, arms, &current, &next, &params.planner, seed.wrapping_add(i as u64)) {
            Ok(s) => s,
            Err(_) if w.label == Label::Optional => {
                path.skipped.push(i);
                continue;
            }
            Err(_) => return Err(MappingError::NoPathBetween(i).into()),
        };
        path.append(segment);
        let at = path.configs.len() - 1;
        path.reached.push((i, at));
        if w.gripper != super::GripperAction::None {
            for (side, _) in w.arm.targets() {
                path.events.push(PathEvent {
                    index: at,
                    side,
                    action: w.gripper,
                });
            }
        }
        current = next;
    }
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Pose, Vec3};
    use crate::motion::{ArmTarget, GripperAction, Side, Waypoint};
    use crate::skill_graph::{ToolKind, ToolSpec};

    fn arms() -> Arms {
        Arms::default_pair(&ToolSpec {
            id: "t".into(),
            kind: ToolKind::TwoFingerGripper,
            max_opening: 0.085,
            finger_length: 0.05,
        })
    }

    fn down_at(x: f64, y: f64, z: f64) -> Pose {
        Pose::rot_x(std::f64::consts::PI).with_translation(Vec3::new(x, y, z))
    }

    #[test]
    fn three_required_waypoints_are_visited() {
        let a = arms();
        let w = CollisionWorld::default();
        let plan = LabeledCartesianPlan::new(vec![
            Waypoint::required(ArmTarget::Left(down_at(0.35, 0.25, 0.30))),
            Waypoint::required(ArmTarget::Left(down_at(0.40, 0.30, 0.20))).with_gripper(GripperAction::Close(0.04)),
            Waypoint::required(ArmTarget::Left(down_at(0.30, 0.20, 0.35))),
        ]);
        let p = map_cartesian_plan(&w, &a, &plan, &DualConfig::home(), &MotionParams::default(), 1).unwrap();
        assert_eq!(p.reached.len(), 3);
        for (wi, ci) in &p.reached {
            let ArmTarget::Left(target) = plan.waypoints[*wi].arm else { unreachable!() };
            let got = a.left.forward_kinematics(&p.configs[*ci].left).unwrap();
            assert!(got.translation_distance(&target) <= 1e-3);
            assert!(got.rotation_angle_to(&target) <= 0.5f64.to_radians());
        }
        assert_eq!(p.events.len(), 1);
        assert_eq!(p.events[0].index, p.reached[1].1);
        // the idle arm never moves
        assert!(p.configs.iter().all(|c| c.right == DualConfig::home().right));
    }

    #[test]
    fn unreachable_optional_is_skipped() {
        let a = arms();
        let w = CollisionWorld::default();
        let beyond = a.left.reach() + 0.3;
        let plan = LabeledCartesianPlan::new(vec![
            Waypoint::required(ArmTarget::Left(down_at(0.35, 0.25, 0.30))),
            Waypoint::optional(ArmTarget::Left(down_at(beyond, 0.2, 0.3))),
            Waypoint::required(ArmTarget::Left(down_at(0.30, 0.20, 0.35))),
        ]);
        let p = map_cartesian_plan(&w, &a, &plan, &DualConfig::home(), &MotionParams::default(), 1).unwrap();
        assert_eq!(p.skipped, vec![1]);
        assert_eq!(p.reached.iter().map(|r| r.0).collect::<Vec<_>>(), vec![0, 2]);
    }

    #[test]
    fn unreachable_required_is_an_error() {
        let a = arms();
        let w = CollisionWorld::default();
        let beyond = a.left.reach() + 0.3;
        let plan = LabeledCartesianPlan::new(vec![
            Waypoint::required(ArmTarget::Left(down_at(0.35, 0.25, 0.30))),
            Waypoint::required(ArmTarget::single(Side::Left, down_at(beyond, 0.2, 0.3))),
        ]);
        let r = map_cartesian_plan(&w, &a, &plan, &DualConfig::home(), &MotionParams::default(), 1);
        assert_eq!(r, Err(MotionError::Mapping(MappingError::UnreachableRequired(1))));
    }
}
