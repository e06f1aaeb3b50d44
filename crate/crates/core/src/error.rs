use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("non-finite coordinate")]
    NonFinite,
    #[error("label count {labels} does not match point count {points}")]
    LabelMismatch { points: usize, labels: usize },
    #[error("aabb min exceeds max")]
    InvertedAabb,
    #[error("shape dimensions must be strictly positive")]
    NonPositiveDimension,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("unknown skill `{0}`")]
    UnknownSkill(String),
    #[error("unknown object category `{0}`")]
    UnknownCategory(String),
    #[error("graph parse error: {0}")]
    Parse(String),
    #[error("graph io error: {0}")]
    Io(String),
    #[error("graph failed validation: {}", .0.join("; "))]
    Invalid(Vec<String>),
    #[error("id `{0}` already registered with different content")]
    DuplicateId(String),
    #[error("binding references unknown {0}")]
    DanglingRef(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ResolveError {
    #[error("no binding for skill {skill} on category {category:?}")]
    NoBinding {
        skill: crate::skill_graph::SkillId,
        category: Option<String>,
    },
    #[error("unknown object `{0}`")]
    UnknownObject(String),
    #[error("executor {executor} requires parameter `{key}`")]
    MissingParameter { executor: String, key: String },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HtrError {
    #[error("unknown object `{0}`")]
    UnknownObject(String),
    #[error("quantity of `{0}` must be at least 1")]
    ZeroQuantity(String),
    #[error("subtask `{0}` is not pending")]
    InvalidState(String),
    #[error(transparent)]
    NoBinding(#[from] ResolveError),
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum MappingError {
    #[error("required waypoint {0} has no IK solution")]
    UnreachableRequired(usize),
    #[error("no collision-free path to waypoint {0}")]
    NoPathBetween(usize),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MotionError {
    #[error("joint {joint} value {value} outside its limits")]
    JointLimit { joint: usize, value: f64 },
    #[error("no IK solution")]
    Infeasible,
    #[error("no path found within the iteration budget")]
    NoPath,
    #[error("start configuration in collision")]
    StartInCollision,
    #[error("goal configuration in collision")]
    GoalInCollision,
    #[error(transparent)]
    Mapping(#[from] MappingError),
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error("arm model: {0}")]
    Model(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("scenario infeasible: {0}")]
    ScenarioInfeasible(String),
    #[error("unknown object `{0}`")]
    UnknownObject(String),
    #[error("unknown bin {0}")]
    UnknownBin(usize),
    #[error("invalid noise profile: {0}")]
    InvalidNoise(String),
    #[error("path does not start at the current configuration")]
    Desync,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PerceptionError {
    #[error("no instance of `{0}` in the segmentation")]
    NotFound(String),
    #[error("no usable boundary edges")]
    NoEdges,
    #[error("degenerate point cloud (rank < 2)")]
    Degenerate,
    #[error("{0} points is too few to register")]
    TooFewPoints(usize),
    #[error("`{0}` is not rigid")]
    NotRigid(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ManipulationError {
    #[error("every candidate grasp collides or is unreachable")]
    NoFeasibleGrasp,
    #[error("object cross-section {width:.3} m exceeds tool opening {max_opening:.3} m")]
    WidthExceeded { width: f64, max_opening: f64 },
    #[error("no free footprint left in the packing box")]
    BoxFull,
    #[error("perception output does not fit the {0} template")]
    WrongPercept(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HarnessError {
    #[error("io: {0}")]
    Io(String),
    #[error("parse: {0}")]
    Parse(String),
    #[error("invalid scenario: {}", .0.join("; "))]
    Invalid(Vec<String>),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Htr(#[from] HtrError),
    #[error(transparent)]
    Resolve(#[from] ResolveError),
}
