//! Symbolic registry of skills, objects, embodiments, tools, sensors and
//! executors, and the query that grounds an atomic task into a binding.

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{GraphError, ResolveError};
use crate::geometry::{Pose, ShapePrimitive};
use crate::htr::{self, AtomicTask, ParamValue};

const DEFAULT_GRAPH: &str = include_str!("../data/default_graph.toml");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SkillId {
    DetectObject,
    DetectPick,
    Pick,
    Place,
    Stir,
    Pack,
    Hold,
    Transit,
}

impl SkillId {
    pub const ALL: [SkillId; 8] = [
        SkillId::DetectObject,
        SkillId::DetectPick,
        SkillId::Pick,
        SkillId::Place,
        SkillId::Stir,
        SkillId::Pack,
        SkillId::Hold,
        SkillId::Transit,
    ];
}

impl FromStr for SkillId {
    type Err = GraphError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SkillId::ALL
            .into_iter()
            .find(|k| format!("{k:?}") == s)
            .ok_or_else(|| GraphError::UnknownSkill(s.to_string()))
    }
}

impl fmt::Display for SkillId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectCategory {
    SmallRigid,
    Cylinder,
    Sphere,
    Cube,
    Cone,
    CuboidLarge,
    FlatLarge,
    Stacked,
    Deformable,
    SmallPrecise,
}

impl ObjectCategory {
    pub const ALL: [ObjectCategory; 10] = [
        ObjectCategory::SmallRigid,
        ObjectCategory::Cylinder,
        ObjectCategory::Sphere,
        ObjectCategory::Cube,
        ObjectCategory::Cone,
        ObjectCategory::CuboidLarge,
        ObjectCategory::FlatLarge,
        ObjectCategory::Stacked,
        ObjectCategory::Deformable,
        ObjectCategory::SmallPrecise,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ObjectCategory::SmallRigid => "small_rigid",
            ObjectCategory::Cylinder => "cylinder",
            ObjectCategory::Sphere => "sphere",
            ObjectCategory::Cube => "cube",
            ObjectCategory::Cone => "cone",
            ObjectCategory::CuboidLarge => "cuboid_large",
            ObjectCategory::FlatLarge => "flat_large",
            ObjectCategory::Stacked => "stacked",
            ObjectCategory::Deformable => "deformable",
            ObjectCategory::SmallPrecise => "small_precise",
        }
    }

    /// Categories handled with two arms.
    pub fn is_dual_arm(&self) -> bool {
        matches!(
            self,
            ObjectCategory::Cone
                | ObjectCategory::CuboidLarge
                | ObjectCategory::FlatLarge
                | ObjectCategory::Stacked
        )
    }
}

impl fmt::Display for ObjectCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ObjectCategory {
    type Err = GraphError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ObjectCategory::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| GraphError::UnknownCategory(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rigidity {
    Rigid,
    Deformable,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerceptiveFeature {
    PositionOnly,
    FullPose,
    UprightFlag,
    EdgeSet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub name: String,
    pub category: ObjectCategory,
    pub shape: ShapePrimitive,
    pub mass: f64,
    pub rigidity: Rigidity,
    #[serde(default)]
    pub slippery: bool,
    pub perceptive_features: BTreeSet<PerceptiveFeature>,
}

impl ObjectSpec {
    /// Descriptions of violated object invariants.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        let f = &self.perceptive_features;
        if self.shape.validate().is_err() {
            out.push("shape dimensions must be positive".to_string());
        }
        if self.category == ObjectCategory::Sphere
            && (f.len() != 1 || !f.contains(&PerceptiveFeature::PositionOnly))
        {
            out.push("sphere objects carry only position_only".to_string());
        }
        if self.category == ObjectCategory::Cylinder && !f.contains(&PerceptiveFeature::UprightFlag) {
            out.push("cylinder objects carry upright_flag".to_string());
        }
        if self.rigidity == Rigidity::Deformable
            && (!f.contains(&PerceptiveFeature::EdgeSet) || f.contains(&PerceptiveFeature::FullPose))
        {
            out.push("deformable objects carry edge_set and no full_pose".to_string());
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbodimentMode {
    SingleArmLeft,
    SingleArmRight,
    DualArm,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbodimentSpec {
    pub id: String,
    pub mode: EmbodimentMode,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToolKind {
    TwoFingerGripper,
    OneFingerGripper,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToolSpec {
    pub id: String,
    pub kind: ToolKind,
    pub max_opening: f64,
    pub finger_length: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensorKind {
    HeadCamera,
    WristCameraLeft,
    WristCameraRight,
}

/// Camera; the optical axis is the mount frame's +Z.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensorSpec {
    pub id: String,
    pub kind: SensorKind,
    pub mount_pose: Pose,
    /// Half-angle of the view cone (radians).
    pub half_fov: f64,
}

/// A registered executable function and the payload keys it needs.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutorDecl {
    pub name: String,
    #[serde(default)]
    pub required_params: Vec<String>,
}

/// Object-category selector of a binding; `*` in files.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CategoryMatch {
    Any,
    Exactly(ObjectCategory),
}

impl CategoryMatch {
    pub fn matches(&self, c: Option<ObjectCategory>) -> bool {
        match (self, c) {
            (CategoryMatch::Any, _) => true,
            (CategoryMatch::Exactly(a), Some(b)) => *a == b,
            (CategoryMatch::Exactly(_), None) => false,
        }
    }

    fn specificity(&self) -> u8 {
        match self {
            CategoryMatch::Any => 0,
            CategoryMatch::Exactly(_) => 1,
        }
    }
}

impl Serialize for CategoryMatch {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            CategoryMatch::Any => s.serialize_str("*"),
            CategoryMatch::Exactly(c) => s.serialize_str(c.name()),
        }
    }
}

impl<'de> Deserialize<'de> for CategoryMatch {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        if s == "*" {
            return Ok(CategoryMatch::Any);
        }
        s.parse().map(CategoryMatch::Exactly).map_err(serde::de::Error::custom)
    }
}

impl fmt::Display for CategoryMatch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CategoryMatch::Any => f.write_str("*"),
            CategoryMatch::Exactly(c) => write!(f, "{c}"),
        }
    }
}

/// Links a (skill, object category) pair to an executor with the embodiment,
/// tool and sensors it runs with.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutorBinding {
    pub skill: SkillId,
    pub object_category: CategoryMatch,
    pub embodiment: String,
    pub tool: String,
    #[serde(default)]
    pub sensors: Vec<String>,
    pub executor: String,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct SkillGraph {
    #[serde(default)]
    pub skills: Vec<SkillId>,
    #[serde(default)]
    pub objects: Vec<ObjectSpec>,
    #[serde(default)]
    pub embodiments: Vec<EmbodimentSpec>,
    #[serde(default)]
    pub tools: Vec<ToolSpec>,
    #[serde(default)]
    pub sensors: Vec<SensorSpec>,
    #[serde(default)]
    pub executors: Vec<ExecutorDecl>,
    #[serde(default)]
    pub bindings: Vec<ExecutorBinding>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum GraphElement {
    Skill(SkillId),
    Object(ObjectSpec),
    Embodiment(EmbodimentSpec),
    Tool(ToolSpec),
    Sensor(SensorSpec),
    Executor(ExecutorDecl),
    Binding(ExecutorBinding),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Info,
    Error,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiagnosticKind {
    DuplicateId,
    DanglingRef,
    MissingBinding,
    InvalidObject,
    InvalidTool,
    AmbiguousEmbodiment,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub severity: Severity,
    pub kind: DiagnosticKind,
    pub ids: Vec<String>,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{:?}] {:?}: {} ({})", self.severity, self.kind, self.message, self.ids.join(", "))
    }
}

/// An atomic task bound to an executor with its parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundedExecution {
    pub binding: ExecutorBinding,
    pub parameters: BTreeMap<String, ParamValue>,
}

impl SkillGraph {
    /// The graph shipped in `data/default_graph.toml`.
    pub fn default_graph() -> SkillGraph {
        SkillGraph::from_toml_str(DEFAULT_GRAPH).expect("shipped graph is valid")
    }

    /// Parses a graph file and rejects it when validation reports errors.
    pub fn from_toml_str(s: &str) -> Result<SkillGraph, GraphError> {
        let graph: SkillGraph = toml::from_str(s).map_err(|e| GraphError::Parse(e.to_string()))?;
        let errors: Vec<Diagnostic> = graph
            .validate()
            .into_iter()
            .filter(|d| d.severity == Severity::Error)
            .collect();
        if errors.is_empty() {
            Ok(graph)
        } else {
            Err(GraphError::Invalid(errors.iter().map(|d| d.to_string()).collect()))
        }
    }

    pub fn load(path: &Path) -> Result<SkillGraph, GraphError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| GraphError::Io(format!("{}: {e}", path.display())))?;
        SkillGraph::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("graph serializes")
    }

    pub fn object(&self, name: &str) -> Option<&ObjectSpec> {
        self.objects.iter().find(|o| o.name == name)
    }

    pub fn tool(&self, id: &str) -> Option<&ToolSpec> {
        self.tools.iter().find(|t| t.id == id)
    }

    pub fn sensor(&self, id: &str) -> Option<&SensorSpec> {
        self.sensors.iter().find(|s| s.id == id)
    }

    pub fn embodiment(&self, id: &str) -> Option<&EmbodimentSpec> {
        self.embodiments.iter().find(|e| e.id == id)
    }

    pub fn executor(&self, name: &str) -> Option<&ExecutorDecl> {
        self.executors.iter().find(|e| e.name == name)
    }

    /// Returns a new graph with `element` added. Re-registering identical
    /// content is a no-op.
    pub fn register(&self, element: GraphElement) -> Result<SkillGraph, GraphError> {
        let mut g = self.clone();
        fn insert<T: PartialEq + Clone>(
            list: &mut Vec<T>,
            item: T,
            same_id: impl Fn(&T) -> bool,
            id: &str,
        ) -> Result<(), GraphError> {
            match list.iter().find(|x| same_id(x)) {
                Some(existing) if *existing == item => Ok(()),
                Some(_) => Err(GraphError::DuplicateId(id.to_string())),
                None => {
                    list.push(item);
                    Ok(())
                }
            }
        }
        match element {
            GraphElement::Skill(s) => {
                if !g.skills.contains(&s) {
                    g.skills.push(s);
                }
            }
            GraphElement::Object(o) => {
                let id = o.name.clone();
                insert(&mut g.objects, o, |x| x.name == id, &id)?;
            }
            GraphElement::Embodiment(e) => {
                let id = e.id.clone();
                insert(&mut g.embodiments, e, |x| x.id == id, &id)?;
            }
            GraphElement::Tool(t) => {
                let id = t.id.clone();
                insert(&mut g.tools, t, |x| x.id == id, &id)?;
            }
            GraphElement::Sensor(s) => {
                let id = s.id.clone();
                insert(&mut g.sensors, s, |x| x.id == id, &id)?;
            }
            GraphElement::Executor(e) => {
                let id = e.name.clone();
                insert(&mut g.executors, e, |x| x.name == id, &id)?;
            }
            GraphElement::Binding(b) => {
                if let Some(missing) = g.dangling_refs(&b).into_iter().next() {
                    return Err(GraphError::DanglingRef(missing));
                }
                if !g.bindings.contains(&b) {
                    g.bindings.push(b);
                }
            }
        }
        Ok(g)
    }

    fn dangling_refs(&self, b: &ExecutorBinding) -> Vec<String> {
        let mut out = Vec::new();
        if !self.skills.contains(&b.skill) {
            out.push(format!("skill {}", b.skill));
        }
        if self.embodiment(&b.embodiment).is_none() {
            out.push(format!("embodiment {}", b.embodiment));
        }
        if self.tool(&b.tool).is_none() {
            out.push(format!("tool {}", b.tool));
        }
        for s in &b.sensors {
            if self.sensor(s).is_none() {
                out.push(format!("sensor {s}"));
            }
        }
        if self.executor(&b.executor).is_none() {
            out.push(format!("executor {}", b.executor));
        }
        out
    }

    /// Checks every graph invariant; an empty list means the graph is sound.
    pub fn validate(&self) -> Vec<Diagnostic> {
        let mut out = Vec::new();
        let mut error = |kind, ids: Vec<String>, message: String| {
            out.push(Diagnostic { severity: Severity::Error, kind, ids, message })
        };

        let id_lists: [(&str, Vec<&str>); 5] = [
            ("object", self.objects.iter().map(|o| o.name.as_str()).collect()),
            ("embodiment", self.embodiments.iter().map(|e| e.id.as_str()).collect()),
            ("tool", self.tools.iter().map(|t| t.id.as_str()).collect()),
            ("sensor", self.sensors.iter().map(|s| s.id.as_str()).collect()),
            ("executor", self.executors.iter().map(|e| e.name.as_str()).collect()),
        ];
        for (what, ids) in &id_lists {
            let mut seen = BTreeSet::new();
            for id in ids {
                if !seen.insert(*id) {
                    error(DiagnosticKind::DuplicateId, vec![id.to_string()], format!("duplicate {what} id"));
                }
            }
        }
        for o in &self.objects {
            for v in o.violations() {
                error(DiagnosticKind::InvalidObject, vec![o.name.clone()], v);
            }
        }
        for t in &self.tools {
            if !(t.max_opening > 0.0) {
                error(DiagnosticKind::InvalidTool, vec![t.id.clone()], "max_opening must be positive".into());
            }
        }
        for (i, b) in self.bindings.iter().enumerate() {
            for r in self.dangling_refs(b) {
                error(
                    DiagnosticKind::DanglingRef,
                    vec![format!("binding#{i}"), b.executor.clone()],
                    format!("unresolved {r}"),
                );
            }
        }
        let categories: BTreeSet<ObjectCategory> = self.objects.iter().map(|o| o.category).collect();
        let categories: Vec<ObjectCategory> = categories.into_iter().collect();
        for (skill, cat) in htr::required_bindings(&categories) {
            if self.select_binding(skill, cat).is_err() {
                let what = cat.map_or("*".to_string(), |c| c.to_string());
                error(
                    DiagnosticKind::MissingBinding,
                    vec![skill.to_string(), what.clone()],
                    format!("no binding for ({skill}, {what})"),
                );
            }
        }
        // single- and dual-arm bindings for one (skill, category) pair
        let mut modes: BTreeMap<(SkillId, CategoryMatch), BTreeSet<bool>> = BTreeMap::new();
        for b in &self.bindings {
            if let Some(e) = self.embodiment(&b.embodiment) {
                modes
                    .entry((b.skill, b.object_category))
                    .or_default()
                    .insert(e.mode == EmbodimentMode::DualArm);
            }
        }
        for ((skill, cat), m) in modes {
            if m.len() > 1 {
                out.push(Diagnostic {
                    severity: Severity::Info,
                    kind: DiagnosticKind::AmbiguousEmbodiment,
                    ids: vec![skill.to_string(), cat.to_string()],
                    message: "both single- and dual-arm bindings; the first declared wins".into(),
                });
            }
        }
        out
    }

    /// Most specific binding for `(skill, category)`; ties go to the
    /// lexicographically smallest executor name.
    pub fn select_binding(
        &self,
        skill: SkillId,
        category: Option<ObjectCategory>,
    ) -> Result<&ExecutorBinding, ResolveError> {
        self.bindings
            .iter()
            .filter(|b| b.skill == skill && b.object_category.matches(category))
            .min_by(|a, b| {
                b.object_category
                    .specificity()
                    .cmp(&a.object_category.specificity())
                    .then_with(|| a.executor.cmp(&b.executor))
            })
            .ok_or_else(|| ResolveError::NoBinding {
                skill,
                category: category.map(|c| c.to_string()),
            })
    }

    pub fn resolve(&self, task: &AtomicTask) -> Result<GroundedExecution, ResolveError> {
        let category = match &task.object {
            Some(name) => Some(
                self.object(name)
                    .ok_or_else(|| ResolveError::UnknownObject(name.clone()))?
                    .category,
            ),
            None => None,
        };
        let binding = self.select_binding(task.skill, category)?;
        if let Some(decl) = self.executor(&binding.executor) {
            for key in &decl.required_params {
                if !task.payload.contains_key(key) {
                    return Err(ResolveError::MissingParameter {
                        executor: decl.name.clone(),
                        key: key.clone(),
                    });
                }
            }
        }
        Ok(GroundedExecution {
            binding: binding.clone(),
            parameters: task.payload.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::htr::Origin;

    fn task(skill: SkillId, object: Option<&str>) -> AtomicTask {
        AtomicTask::new(skill, object)
    }

    fn pick_ready(object: &str) -> AtomicTask {
        task(SkillId::Pick, Some(object)).with_param("estimate", ParamValue::Pose(Pose::identity()))
    }

    #[test]
    fn default_graph_is_clean() {
        let g = SkillGraph::default_graph();
        assert_eq!(g.validate(), vec![]);
        assert_eq!(g.skills.len(), 8);
        let cats: BTreeSet<_> = g.objects.iter().map(|o| o.category).collect();
        assert_eq!(cats.len(), 10);
    }

    #[test]
    fn pick_bowl_grounding() {
        let g = SkillGraph::default_graph();
        let r = g.resolve(&pick_ready("bowl")).unwrap();
        assert_eq!(r.binding.executor, "pick_bowl");
        assert_eq!(g.embodiment(&r.binding.embodiment).unwrap().mode, EmbodimentMode::DualArm);
        assert_eq!(g.tool(&r.binding.tool).unwrap().kind, ToolKind::OneFingerGripper);
        let kinds: BTreeSet<_> = r
            .binding
            .sensors
            .iter()
            .map(|s| format!("{:?}", g.sensor(s).unwrap().kind))
            .collect();
        assert_eq!(
            kinds,
            ["HeadCamera", "WristCameraLeft", "WristCameraRight"].iter().map(|s| s.to_string()).collect()
        );
    }

    #[test]
    fn hold_needs_duration() {
        let g = SkillGraph::default_graph();
        let bare = task(SkillId::Hold, None);
        assert!(matches!(g.resolve(&bare), Err(ResolveError::MissingParameter { .. })));
        let timed = bare.with_param("duration", ParamValue::Number(1.5));
        let r = g.resolve(&timed).unwrap();
        assert_eq!(r.binding.executor, "hold");
        assert_eq!(r.parameters.get("duration"), Some(&ParamValue::Number(1.5)));
    }

    #[test]
    fn specific_binding_beats_wildcard() {
        let g = SkillGraph::default_graph();
        let wildcard = ExecutorBinding {
            skill: SkillId::Pick,
            object_category: CategoryMatch::Any,
            embodiment: "single_arm_left".into(),
            tool: "two_finger_gripper".into(),
            sensors: vec!["head".into()],
            executor: "pick_center".into(),
        };
        let g = g.register(GraphElement::Binding(wildcard)).unwrap();
        // oracle: filter candidates by hand, rank by (specificity desc, name asc)
        let mut candidates: Vec<&ExecutorBinding> = g
            .bindings
            .iter()
            .filter(|b| b.skill == SkillId::Pick)
            .filter(|b| matches!(b.object_category, CategoryMatch::Any | CategoryMatch::Exactly(ObjectCategory::Sphere)))
            .collect();
        candidates.sort_by_key(|b| (b.object_category == CategoryMatch::Any, b.executor.clone()));
        let r = g.resolve(&pick_ready("tennis_ball")).unwrap();
        assert_eq!(&r.binding, candidates[0]);
        assert_eq!(r.binding.object_category, CategoryMatch::Exactly(ObjectCategory::Sphere));
    }

    #[test]
    fn equal_specificity_ties_break_by_executor_name() {
        let g = SkillGraph::default_graph();
        let g = g
            .register(GraphElement::Executor(ExecutorDecl { name: "aaa_pick".into(), required_params: vec![] }))
            .unwrap();
        let b = ExecutorBinding {
            skill: SkillId::Pick,
            object_category: CategoryMatch::Exactly(ObjectCategory::Sphere),
            embodiment: "single_arm_left".into(),
            tool: "two_finger_gripper".into(),
            sensors: vec![],
            executor: "aaa_pick".into(),
        };
        let g = g.register(GraphElement::Binding(b)).unwrap();
        assert_eq!(g.resolve(&pick_ready("tennis_ball")).unwrap().binding.executor, "aaa_pick");
    }

    #[test]
    fn registering_object_is_idempotent_and_modular() {
        let g = SkillGraph::default_graph();
        let baguette = ObjectSpec {
            name: "baguette_long".into(),
            category: ObjectCategory::FlatLarge,
            shape: ShapePrimitive::FlatSlab { extents: [0.34, 0.06, 0.05] },
            mass: 0.25,
            rigidity: Rigidity::Rigid,
            slippery: false,
            perceptive_features: [PerceptiveFeature::FullPose].into_iter().collect(),
        };
        let g1 = g.register(GraphElement::Object(baguette.clone())).unwrap();
        assert_eq!(g1.objects.len(), g.objects.len() + 1);
        let g2 = g1.register(GraphElement::Object(baguette.clone())).unwrap();
        assert_eq!(g1, g2);
        let mut changed = baguette;
        changed.mass = 1.0;
        assert_eq!(
            g1.register(GraphElement::Object(changed)),
            Err(GraphError::DuplicateId("baguette_long".into()))
        );
        for o in &g.objects {
            let t = pick_ready(&o.name);
            assert_eq!(g.resolve(&t), g1.resolve(&t));
        }
    }

    #[test]
    fn binding_with_unknown_tool_rejected() {
        let g = SkillGraph::default_graph();
        let b = ExecutorBinding {
            skill: SkillId::Pick,
            object_category: CategoryMatch::Any,
            embodiment: "dual_arm".into(),
            tool: "suction_cup".into(),
            sensors: vec![],
            executor: "pick_center".into(),
        };
        assert!(matches!(g.register(GraphElement::Binding(b)), Err(GraphError::DanglingRef(_))));
    }

    #[test]
    fn removed_executor_is_one_dangling_ref() {
        let mut g = SkillGraph::default_graph();
        g.executors.retain(|e| e.name != "pack_seal");
        let d = g.validate();
        assert_eq!(d.len(), 1, "{d:?}");
        assert_eq!(d[0].kind, DiagnosticKind::DanglingRef);
    }

    #[test]
    fn missing_sphere_pick_is_one_missing_binding() {
        let mut g = SkillGraph::default_graph();
        g.bindings
            .retain(|b| !(b.skill == SkillId::Pick && b.object_category == CategoryMatch::Exactly(ObjectCategory::Sphere)));
        // oracle: enumerate required pairs and count those without any matching binding
        let cats: Vec<ObjectCategory> = g.objects.iter().map(|o| o.category).collect::<BTreeSet<_>>().into_iter().collect();
        let unmatched: Vec<_> = htr::required_bindings(&cats)
            .into_iter()
            .filter(|(s, c)| !g.bindings.iter().any(|b| b.skill == *s && b.object_category.matches(*c)))
            .collect();
        assert_eq!(unmatched, vec![(SkillId::Pick, Some(ObjectCategory::Sphere))]);
        let d = g.validate();
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].kind, DiagnosticKind::MissingBinding);
    }

    #[test]
    fn object_invariants_checked() {
        let mut g = SkillGraph::default_graph();
        let ball = g.objects.iter_mut().find(|o| o.category == ObjectCategory::Sphere).unwrap();
        ball.perceptive_features.insert(PerceptiveFeature::FullPose);
        assert!(g.validate().iter().any(|d| d.kind == DiagnosticKind::InvalidObject));
    }

    #[test]
    fn ambiguous_embodiment_is_info_only() {
        let g = SkillGraph::default_graph();
        let b = ExecutorBinding {
            skill: SkillId::Pick,
            object_category: CategoryMatch::Exactly(ObjectCategory::Cone),
            embodiment: "single_arm_left".into(),
            tool: "two_finger_gripper".into(),
            sensors: vec![],
            executor: "pick_center".into(),
        };
        let g = g.register(GraphElement::Binding(b)).unwrap();
        let d = g.validate();
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].severity, Severity::Info);
        assert!(SkillGraph::from_toml_str(&g.to_toml_string()).is_ok());
    }

    #[test]
    fn file_round_trip_and_rejection() {
        let g = SkillGraph::default_graph();
        let back = SkillGraph::from_toml_str(&g.to_toml_string()).unwrap();
        assert_eq!(back, g);
        let mut broken = g.clone();
        broken.tools.clear();
        assert!(matches!(SkillGraph::from_toml_str(&broken.to_toml_string()), Err(GraphError::Invalid(_))));
        assert!("Juggle".parse::<SkillId>().is_err());
        assert!(toml::from_str::<SkillGraph>("skills = [\"Juggle\"]").is_err());
    }

    #[test]
    fn resolve_is_deterministic() {
        let g = SkillGraph::default_graph();
        for o in &g.objects {
            for skill in htr::PACK_TEMPLATE {
                let mut t = task(skill, Some(&o.name))
                    .with_param("estimate", ParamValue::Pose(Pose::identity()))
                    .with_param("target", ParamValue::Text("packing_box".into()));
                t.origin = Origin::Recovery;
                assert_eq!(g.resolve(&t), g.resolve(&t));
            }
        }
    }
}
