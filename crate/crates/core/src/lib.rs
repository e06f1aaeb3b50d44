pub mod error;
pub mod geometry;
pub mod harness;
pub mod htr;
pub mod manipulation;
pub mod motion;
pub mod perception;
pub mod sim;
pub mod skill_graph;

pub use geometry::{Aabb, PointCloud, Pose, ShapePrimitive, Vec3};
