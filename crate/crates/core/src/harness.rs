//! Scenario loading, Monte Carlo trial execution and success-rate reports.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use crate::error::{HarnessError, ManipulationError};
use crate::geometry::{Aabb, Pose, Vec3};
use crate::htr::{FailureKind, HtrConfig, Outcome, ParamValue, Plan, SubtaskKind, SubtaskStatus, TaskSpec};
use crate::manipulation::{
    footprint, place_at, place_cells, plan_pack_seal, plan_pick, plan_stir, plan_transit_free, plan_transit_holding, GraspContext,
    GraspSpec, ManipulationParams, Percept,
};
use crate::motion::arm::DEFAULT_ARMS;
use crate::motion::{map_cartesian_plan, rrt_connect, Arms, DualConfig, IkParams, LabeledCartesianPlan, MotionParams, Side};
use crate::perception::{
    detect_deformable, detect_pick, detect_rigid, segment_scene, select_instance, EdgeCandidate, PerceptionParams,
    PoseEstimate,
};
use crate::sim::{hex, Command, GraspOutcome, Layout, NoiseProfile, ObjectStatus, SceneSpec, Stock, WorldState};
use crate::skill_graph::{ObjectCategory, ObjectSpec, SensorSpec, Severity, SkillGraph, SkillId};

/// Noise given either as a preset name or spelled out.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NoiseSetting {
    Preset(String),
    Profile(NoiseProfile),
}

impl NoiseSetting {
    pub fn resolve(&self) -> Result<NoiseProfile, HarnessError> {
        match self {
            NoiseSetting::Preset(name) => {
                NoiseProfile::preset(name).ok_or_else(|| HarnessError::Invalid(vec![format!("unknown noise preset `{name}`")]))
            }
            NoiseSetting::Profile(p) => Ok(p.clone()),
        }
    }
}

/// On-disk scenario. Paths are relative to the scenario file.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    name: Option<String>,
    #[serde(default = "default_trials")]
    trials: u64,
    #[serde(default)]
    seed: u64,
    graph: Option<String>,
    arm_model: Option<String>,
    noise: Option<NoiseSetting>,
    task: TaskSpec,
    layout: Option<Layout>,
    #[serde(default)]
    stock: Vec<Stock>,
    #[serde(default)]
    labels: BTreeMap<String, String>,
    #[serde(default)]
    htr: HtrConfig,
    #[serde(default)]
    perception: PerceptionParams,
    #[serde(default)]
    motion: MotionParams,
    #[serde(default)]
    manipulation: ManipulationParams,
}

fn default_trials() -> u64 {
    10
}

/// A fully resolved scenario: referenced files are inlined so a trace can
/// carry everything needed to replay it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub trials: u64,
    pub seed: u64,
    pub task: TaskSpec,
    pub scene: SceneSpec,
    pub graph: SkillGraph,
    /// Arm model file contents.
    pub arm_model: String,
    /// Report row label per object name, overriding the category default.
    pub labels: BTreeMap<String, String>,
    pub htr: HtrConfig,
    pub perception: PerceptionParams,
    pub motion: MotionParams,
    pub manipulation: ManipulationParams,
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Scenario, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut s = Scenario::from_toml_str(&text, base)?;
        if s.name.is_empty() {
            s.name = path.file_stem().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        }
        Ok(s)
    }

    /// Parses scenario text; `base` resolves relative file references.
    pub fn from_toml_str(text: &str, base: &Path) -> Result<Scenario, HarnessError> {
        let f: ScenarioFile = toml::from_str(text).map_err(|e| HarnessError::Parse(e.to_string()))?;
        let graph = match &f.graph {
            None => SkillGraph::default_graph(),
            Some(p) => SkillGraph::load(&base.join(p)).map_err(|e| HarnessError::Invalid(vec![e.to_string()]))?,
        };
        let arm_model = match &f.arm_model {
            None => DEFAULT_ARMS.to_string(),
            Some(p) => {
                let p = base.join(p);
                std::fs::read_to_string(&p).map_err(|e| HarnessError::Io(format!("{}: {e}", p.display())))?
            }
        };
        let noise = match &f.noise {
            None => NoiseProfile::zero(),
            Some(n) => n.resolve()?,
        };
        Ok(Scenario {
            name: f.name.unwrap_or_default(),
            trials: f.trials,
            seed: f.seed,
            task: f.task,
            scene: SceneSpec {
                layout: f.layout.unwrap_or_default(),
                stock: f.stock,
                noise,
            },
            graph,
            arm_model,
            labels: f.labels,
            htr: f.htr,
            perception: f.perception,
            motion: f.motion,
            manipulation: f.manipulation,
        })
    }

    /// Problems that make the scenario unusable.
    pub fn validate(&self) -> Vec<String> {
        let mut out: Vec<String> = self
            .graph
            .validate()
            .into_iter()
            .filter(|d| d.severity == Severity::Error)
            .map(|d| d.to_string())
            .collect();
        if let Err(e) = self.scene.noise.validate() {
            out.push(e.to_string());
        }
        if self.trials == 0 {
            out.push("trials must be at least 1".into());
        }
        for item in &self.task.items {
            if self.graph.object(&item.object).is_none() {
                out.push(format!("task object `{}` is not in the skill graph", item.object));
            }
        }
        for s in &self.scene.stock {
            if self.graph.object(&s.object).is_none() {
                out.push(format!("stocked object `{}` is not in the skill graph", s.object));
            }
            if s.bin >= self.scene.layout.bins.len() {
                out.push(format!("stock of `{}` names bin {} of {}", s.object, s.bin, self.scene.layout.bins.len()));
            }
        }
        for tool in &self.graph.tools {
            if let Err(e) = Arms::from_toml_str(&self.arm_model, tool) {
                out.push(format!("arm model: {e}"));
                break;
            }
        }
        if let Err(e) = crate::htr::decompose_task(&self.task, &self.graph) {
            out.push(e.to_string());
        }
        out
    }

    /// Report row label for an object.
    pub fn label_of(&self, object: &str) -> String {
        if let Some(l) = self.labels.get(object) {
            return l.clone();
        }
        self.graph.object(object).map_or_else(|| object.to_string(), |o| category_label(o.category).to_string())
    }

    fn source_bins(&self) -> BTreeMap<String, u64> {
        let mut bins = BTreeMap::new();
        for s in &self.scene.stock {
            bins.entry(s.object.clone()).or_insert(s.bin as u64);
        }
        bins
    }
}

/// Row label used for a category in reports.
pub fn category_label(c: ObjectCategory) -> &'static str {
    match c {
        ObjectCategory::Cube => "Cube",
        ObjectCategory::Sphere => "Sphere",
        ObjectCategory::Stacked => "Stacked",
        ObjectCategory::Cylinder => "Can",
        ObjectCategory::Cone => "Cone",
        ObjectCategory::SmallRigid | ObjectCategory::SmallPrecise => "Small",
        ObjectCategory::CuboidLarge => "Cuboid",
        ObjectCategory::FlatLarge => "Large",
        ObjectCategory::Deformable => "Deformable",
    }
}

/// One executed atomic task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub trial: u64,
    pub sim_time: f64,
    pub subtask: String,
    pub atomic_task: String,
    pub skill: SkillId,
    pub object: Option<String>,
    pub outcome: String,
    pub origin: crate::htr::Origin,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubtaskResult {
    pub name: String,
    pub object: Option<String>,
    pub success: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialTrace {
    pub trial: u64,
    pub records: Vec<TraceRecord>,
    /// World mutations in order; replaying them from reset reproduces
    /// `final_hash`.
    pub commands: Vec<Command>,
    pub subtasks: Vec<SubtaskResult>,
    pub recoveries: usize,
    pub sim_time: f64,
    pub wall_time: f64,
    pub final_hash: String,
}

impl TrialTrace {
    /// Digest of the atomic-task log and final world state.
    pub fn trace_hash(&self) -> String {
        let mut h = Sha256::new();
        for r in &self.records {
            h.update(serde_json::to_vec(r).expect("records serialize"));
            h.update(b"\n");
        }
        h.update(self.final_hash.as_bytes());
        hex(&h.finalize())
    }
}

enum Detection {
    Pose { object: String, estimate: PoseEstimate },
    Edges { object: String, edges: Vec<EdgeCandidate>, centroid: Vec3 },
}

impl Detection {
    fn object(&self) -> &str {
        match self {
            Detection::Pose { object, .. } | Detection::Edges { object, .. } => object,
        }
    }
}

struct Held {
    object: String,
    grasp: GraspSpec,
    tool: String,
    id: Option<u32>,
}

struct Trial<'a> {
    sc: &'a Scenario,
    world: WorldState,
    arms: BTreeMap<String, Arc<Arms>>,
    default_tool: String,
    detection: Option<Detection>,
    held: Option<Held>,
    /// Object put in the box by the last executed task.
    placed_now: Option<u32>,
    commands: Vec<Command>,
    seed: u64,
    step: u64,
}

fn mix(a: u64, b: u64) -> u64 {
    a.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ b.wrapping_mul(0xc2b2_ae3d_27d4_eb4f).rotate_left(17)
}

fn motion_failure() -> Outcome {
    Outcome::Failure(FailureKind::Motion)
}

fn text_param<'p>(params: &'p BTreeMap<String, ParamValue>, key: &str) -> Option<&'p str> {
    match params.get(key) {
        Some(ParamValue::Text(t)) => Some(t),
        _ => None,
    }
}

/// Tool pair built from the arm model for every tool in the graph.
fn build_arms(sc: &Scenario) -> Result<BTreeMap<String, Arc<Arms>>, HarnessError> {
    sc.graph
        .tools
        .iter()
        .map(|t| {
            Arms::from_toml_str(&sc.arm_model, t)
                .map(|a| (t.id.clone(), Arc::new(a)))
                .map_err(|e| HarnessError::Invalid(vec![format!("arm model: {e}")]))
        })
        .collect()
}

/// Fresh world for a trial seed, built exactly as `run_trial` builds it.
pub fn reset_world(sc: &Scenario, seed: u64) -> Result<WorldState, HarnessError> {
    let arms = build_arms(sc)?;
    let tool = sc.graph.tools.first().ok_or_else(|| HarnessError::Invalid(vec!["graph has no tools".into()]))?;
    Ok(WorldState::reset(&sc.scene, &sc.graph, arms[&tool.id].clone(), seed)?)
}

impl<'a> Trial<'a> {
    fn apply(&mut self, cmd: Command) -> Result<Vec<GraspOutcome>, HarnessError> {
        let out = self.world.apply(&cmd)?;
        self.commands.push(cmd);
        Ok(out)
    }

    fn sub_seed(&self) -> u64 {
        mix(self.seed, self.step)
    }

    fn sensor(&self, ids: &[String]) -> Result<SensorSpec, HarnessError> {
        let id = ids.first().ok_or_else(|| HarnessError::Invalid(vec!["binding without sensors".into()]))?;
        self.sc
            .graph
            .sensor(id)
            .cloned()
            .ok_or_else(|| HarnessError::Invalid(vec![format!("unknown sensor `{id}`")]))
    }

    fn object(&self, name: &str) -> Result<ObjectSpec, HarnessError> {
        self.sc
            .graph
            .object(name)
            .cloned()
            .ok_or_else(|| HarnessError::Invalid(vec![format!("unknown object `{name}`")]))
    }

    fn arms_for(&self, tool: &str) -> Arc<Arms> {
        self.arms.get(tool).unwrap_or(&self.arms[&self.default_tool]).clone()
    }

    fn plan_and_apply(&mut self, tool: &str, exclude: &[u32], plan: &LabeledCartesianPlan) -> Result<bool, HarnessError> {
        let cw = self.world.collision_world(exclude);
        let arms = self.arms_for(tool);
        match map_cartesian_plan(&cw, &arms, plan, &self.world.arms, &self.sc.motion, self.sub_seed()) {
            Ok(path) => {
                self.apply(Command::ApplyPath(path))?;
                Ok(true)
            }
            Err(_) => Ok(false),
        }
    }

    /// Arms ordered by distance from their base to `p`.
    fn nearest_sides(&self, p: &Vec3) -> Vec<Side> {
        let d = |s: Side| {
            let b = self.world.robot.get(s).base_pose.translation;
            (b.xy() - p.xy()).norm()
        };
        let mut sides = Side::BOTH.to_vec();
        sides.sort_by(|a, b| d(*a).total_cmp(&d(*b)));
        sides
    }

    fn execute(&mut self, task: &crate::htr::AtomicTask) -> Result<Outcome, HarnessError> {
        let mut task = task.clone();
        if task.skill == SkillId::Pick {
            match &self.detection {
                Some(Detection::Pose { object, estimate }) if Some(object) == task.object.as_ref() => {
                    task.payload.insert("estimate".into(), ParamValue::Pose(estimate.pose));
                }
                Some(Detection::Edges { object, centroid, .. }) if Some(object) == task.object.as_ref() => {
                    task.payload.insert("estimate".into(), ParamValue::Pose(Pose::from_translation(*centroid)));
                }
                _ => return Ok(Outcome::Failure(FailureKind::Perception)),
            }
        }
        let grounded = match self.sc.graph.resolve(&task) {
            Ok(g) => g,
            Err(crate::error::ResolveError::MissingParameter { .. }) => return Ok(motion_failure()),
            Err(e) => return Err(e.into()),
        };
        let b = &grounded.binding;
        let params = &grounded.parameters;
        match b.executor.as_str() {
            "detect_rigid" | "detect_deformable" => self.detect_object(b.sensors.clone(), params),
            "detect_pick" => self.verify_pick(b.sensors.clone()),
            "pick_center" | "pick_cylinder" | "pick_bowl" | "pick_dual_corner" | "pick_edge" => {
                self.pick(task.object.as_deref().unwrap_or_default(), &b.tool)
            }
            "transit" | "transit_dual" => self.transit(&b.tool),
            "place" | "place_dual" => self.place(),
            "stir" => match params.get("bin") {
                Some(ParamValue::Index(bin)) => self.stir(*bin as usize, &b.tool),
                _ => Ok(motion_failure()),
            },
            "pack_seal" => self.seal(&b.tool),
            "hold" => match params.get("duration") {
                Some(ParamValue::Number(d)) if *d >= 0.0 => {
                    self.apply(Command::Hold(*d))?;
                    Ok(Outcome::Success)
                }
                _ => Ok(motion_failure()),
            },
            other => Err(HarnessError::Invalid(vec![format!("no executor named `{other}`")])),
        }
    }

    fn detect_object(&mut self, sensors: Vec<String>, params: &BTreeMap<String, ParamValue>) -> Result<Outcome, HarnessError> {
        self.detection = None;
        let name = text_param(params, "object").unwrap_or_default().to_string();
        let object = self.object(&name)?;
        let sensor = self.sensor(&sensors)?;
        let seg = segment_scene(&self.world, &sensor, &self.world.noise, self.sub_seed());
        let mut pp = self.sc.perception.clone();
        if let Some(ParamValue::Index(bin)) = params.get("bin") {
            if let Some(b) = self.world.layout.bins.get(*bin as usize) {
                let a = b.interior_aabb();
                pp.search_region = Some(Aabb::from_center_half(a.center(), a.half_extents() + Vec3::new(0.01, 0.01, 0.5)));
            }
        }
        if object.category == ObjectCategory::Deformable {
            let Ok(edges) = detect_deformable(&seg, &object, &pp) else {
                return Ok(Outcome::Failure(FailureKind::Perception));
            };
            let centroid = select_instance(&seg, &object, pp.search_region.as_ref())
                .and_then(|i| i.cloud.centroid())
                .expect("edges come from an instance");
            self.detection = Some(Detection::Edges { object: name, edges, centroid });
        } else {
            match detect_rigid(&seg, &object, &pp) {
                Ok(estimate) if estimate.converged => self.detection = Some(Detection::Pose { object: name, estimate }),
                _ => return Ok(Outcome::Failure(FailureKind::Perception)),
            }
        }
        Ok(Outcome::Success)
    }

    fn pick(&mut self, name: &str, tool_id: &str) -> Result<Outcome, HarnessError> {
        let object = self.object(name)?;
        let tool = self
            .sc
            .graph
            .tool(tool_id)
            .cloned()
            .ok_or_else(|| HarnessError::Invalid(vec![format!("unknown tool `{tool_id}`")]))?;
        let Some(det) = self.detection.as_ref().filter(|d| d.object() == name) else {
            return Ok(Outcome::Failure(FailureKind::Perception));
        };
        let (centroid, estimate, edges) = match det {
            Detection::Pose { estimate, .. } => (estimate.pose.transform_point(&object.shape.centroid()), Some(*estimate), None),
            Detection::Edges { edges, centroid, .. } => (*centroid, None, Some((edges.clone(), *centroid))),
        };
        for side in Side::BOTH {
            if self.world.grippers[side.index()].max_opening != tool.max_opening {
                self.apply(Command::Equip { side, max_opening: tool.max_opening })?;
            }
        }
        // the perceived object itself is not an obstacle
        let reach = object.shape.bounding_radius() + 0.02;
        let exclude: Vec<u32> = self
            .world
            .objects
            .iter()
            .filter(|o| o.is_free() && (o.centroid() - centroid).norm() <= reach)
            .map(|o| o.id)
            .collect();
        let cw = self.world.collision_world(&exclude);
        let arms = self.arms_for(&tool.id);
        let ctx = GraspContext {
            world: &cw,
            arms: &arms,
            current: self.world.arms,
            ik: IkParams {
                seed: self.sub_seed(),
                ..self.sc.motion.ik
            },
            sides: self.nearest_sides(&centroid),
        };
        let percept = match (&estimate, &edges) {
            (Some(e), _) => Percept::Pose(e),
            (None, Some((edges, c))) => Percept::Edges { edges, centroid: *c },
            _ => unreachable!("detection is a pose or edges"),
        };
        let (grasp, plan) = match plan_pick(&object, percept, &tool, &ctx, &self.sc.manipulation) {
            Ok(r) => r,
            Err(ManipulationError::NoFeasibleGrasp) => return Ok(motion_failure()),
            Err(_) => return Ok(Outcome::Failure(FailureKind::Pick)),
        };
        let path = match map_cartesian_plan(&cw, &arms, &plan, &self.world.arms, &self.sc.motion, self.sub_seed()) {
            Ok(p) => p,
            Err(_) => return Ok(motion_failure()),
        };
        let outcomes = self.apply(Command::ApplyPath(path))?;
        let id = outcomes.iter().find_map(|o| match o {
            GraspOutcome::Attached(id) => Some(*id),
            _ => None,
        });
        self.held = Some(Held {
            object: name.to_string(),
            grasp,
            tool: tool.id.clone(),
            id,
        });
        Ok(Outcome::Success)
    }

    fn verify_pick(&mut self, sensors: Vec<String>) -> Result<Outcome, HarnessError> {
        let Some(held) = &self.held else {
            return Ok(Outcome::Failure(FailureKind::Pick));
        };
        let object = self.object(&held.object)?;
        let tool = self.world.tool_pose(held.grasp.lead());
        let expected = held.grasp.expected_object_pose(&tool).transform_point(&object.shape.centroid());
        let sensor = self.sensor(&sensors)?;
        let seg = segment_scene(&self.world, &sensor, &self.world.noise, self.sub_seed());
        let verdict = detect_pick(&Pose::from_translation(expected), &seg, &object, &self.sc.perception);
        Ok(if verdict.success { Outcome::Success } else { Outcome::Failure(FailureKind::Pick) })
    }

    fn transit(&mut self, tool: &str) -> Result<Outcome, HarnessError> {
        let bx = self.world.layout.packing_box.clone();
        let (plan, tool) = match &self.held {
            Some(h) => {
                let object = self.object(&h.object)?;
                (plan_transit_holding(&object, &h.grasp, &bx, &self.sc.manipulation), h.tool.clone())
            }
            None => (plan_transit_free(Side::Left, &bx, &self.sc.manipulation), tool.to_string()),
        };
        Ok(if self.plan_and_apply(&tool, &[], &plan)? { Outcome::Success } else { motion_failure() })
    }

    fn place(&mut self) -> Result<Outcome, HarnessError> {
        let Some(h) = &self.held else {
            return Ok(Outcome::Failure(FailureKind::Pick));
        };
        let object = self.object(&h.object)?;
        let occupancy: Vec<Aabb> = self
            .world
            .objects
            .iter()
            .filter(|o| o.status == ObjectStatus::InBox)
            .map(|o| footprint(&o.spec.shape, &o.pose))
            .collect();
        let bx = self.world.layout.packing_box.clone();
        let mp = &self.sc.manipulation;
        let cells = place_cells(&object, &h.grasp, &bx, &occupancy, mp);
        let (tool, id) = (h.tool.clone(), h.id);
        // first fit among the cells the arms can actually reach
        let plans: Vec<LabeledCartesianPlan> =
            cells.iter().take(mp.place_attempts).map(|c| place_at(&h.grasp, c, mp).1).collect();
        let mut placed = false;
        for plan in &plans {
            if self.plan_and_apply(&tool, &[], plan)? {
                placed = true;
                break;
            }
        }
        if !placed {
            return Ok(motion_failure());
        }
        self.held = None;
        self.go_home()?;
        match id {
            Some(id) if self.world.objects[id as usize].status == ObjectStatus::InBox => {
                self.placed_now = Some(id);
                Ok(Outcome::Success)
            }
            _ => Ok(Outcome::Failure(FailureKind::Pick)),
        }
    }

    fn stir(&mut self, bin: usize, tool: &str) -> Result<Outcome, HarnessError> {
        let Some(spec) = self.world.layout.bins.get(bin).cloned() else {
            return Ok(motion_failure());
        };
        let side = self.nearest_sides(&spec.center3())[0];
        let contents: Vec<u32> = self
            .world
            .objects
            .iter()
            .filter(|o| o.status == ObjectStatus::InBin(bin))
            .map(|o| o.id)
            .collect();
        let plan = plan_stir(&spec, side, &self.sc.manipulation);
        if !self.plan_and_apply(tool, &contents, &plan)? {
            return Ok(motion_failure());
        }
        let seed = self.sub_seed();
        self.apply(Command::Perturb { bin, seed })?;
        Ok(Outcome::Success)
    }

    fn seal(&mut self, tool: &str) -> Result<Outcome, HarnessError> {
        let plan = plan_pack_seal(&self.world.layout.packing_box, &self.sc.manipulation);
        if !self.plan_and_apply(tool, &[], &plan)? {
            return Ok(motion_failure());
        }
        Ok(if self.world.flaps_closed.iter().all(|c| *c) { Outcome::Success } else { motion_failure() })
    }

    /// Joint-space move of both arms to their home configuration; a failed
    /// plan leaves the arms where they are.
    fn go_home(&mut self) -> Result<(), HarnessError> {
        let home = DualConfig::home();
        if self.world.arms == home {
            return Ok(());
        }
        let cw = self.world.collision_world(&[]);
        let arms = self.arms_for(&self.default_tool);
        if let Ok(path) = rrt_connect(&cw, &arms, &self.world.arms, &home, &self.sc.motion.planner, self.sub_seed()) {
            self.apply(Command::ApplyPath(path))?;
        }
        Ok(())
    }

    fn holding_anything(&self) -> bool {
        self.world.grippers.iter().any(|g| g.attached.is_some() || g.slipping.is_some() || g.contact.is_some())
    }
}

/// Runs one trial of `sc` with the given seed.
pub fn run_trial(sc: &Scenario, seed: u64) -> Result<TrialTrace, HarnessError> {
    let started = Instant::now();
    let arms = build_arms(sc)?;
    let default_tool = sc
        .graph
        .tools
        .first()
        .ok_or_else(|| HarnessError::Invalid(vec!["graph has no tools".into()]))?
        .id
        .clone();
    let world = WorldState::reset(&sc.scene, &sc.graph, arms[&default_tool].clone(), seed)?;
    let mut plan = Plan::build(&sc.task, &sc.graph, &sc.source_bins(), sc.htr)?;
    let mut t = Trial {
        sc,
        world,
        arms,
        default_tool,
        detection: None,
        held: None,
        placed_now: None,
        commands: Vec::new(),
        seed,
        step: 0,
    };
    let mut placed: BTreeMap<usize, u32> = BTreeMap::new();
    let mut records = Vec::new();
    let bound = plan.step_bound();
    while let Some(p) = plan.current().cloned() {
        if t.step as usize >= bound {
            return Err(HarnessError::Invalid(vec![format!("plan exceeded its step bound of {bound}")]));
        }
        t.step += 1;
        t.placed_now = None;
        let outcome = t.execute(&p.task)?;
        if let Some(id) = t.placed_now {
            placed.insert(p.subtask, id);
        }
        if outcome != Outcome::Success && t.holding_anything() {
            t.apply(Command::ReleaseAll)?;
            t.held = None;
            t.go_home()?;
        }
        records.push(TraceRecord {
            trial: seed,
            sim_time: t.world.clock,
            subtask: plan.subtasks[p.subtask].to_string(),
            atomic_task: p.task.to_string(),
            skill: p.task.skill,
            object: p.task.object.clone(),
            outcome: outcome.to_string(),
            origin: p.task.origin,
        });
        plan.monitor_step(outcome);
    }
    let subtasks = plan
        .subtasks
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let done = s.status == SubtaskStatus::Done;
            let success = match &s.kind {
                SubtaskKind::PackItem { .. } => {
                    done && placed.get(&i).is_some_and(|id| t.world.objects[*id as usize].status == ObjectStatus::InBox)
                }
                SubtaskKind::SealBox => done,
            };
            SubtaskResult {
                name: s.to_string(),
                object: s.object().map(str::to_string),
                success,
            }
        })
        .collect();
    Ok(TrialTrace {
        trial: seed,
        records,
        commands: t.commands,
        subtasks,
        recoveries: plan.progress().recovery_inserted,
        sim_time: t.world.clock,
        wall_time: started.elapsed().as_secs_f64(),
        final_hash: t.world.state_hash(),
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportRow {
    pub object: String,
    pub success: u64,
    pub attempts: u64,
}

impl ReportRow {
    pub fn rate(&self) -> Option<f64> {
        (self.attempts > 0).then(|| self.success as f64 / self.attempts as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialReport {
    pub scenario: String,
    pub base_seed: u64,
    pub rows: Vec<ReportRow>,
    pub traces: Vec<TrialTrace>,
}

impl TrialReport {
    pub fn row(&self, object: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.object == object)
    }

    /// Trials whose subtasks all succeeded.
    pub fn full_successes(&self) -> usize {
        self.traces.iter().filter(|t| t.subtasks.iter().all(|s| s.success)).count()
    }
}

/// Per-label counts over pack subtasks. Row order follows the task items.
pub fn aggregate(sc: &Scenario, traces: &[TrialTrace]) -> Vec<ReportRow> {
    let mut rows: Vec<ReportRow> = Vec::new();
    for item in &sc.task.items {
        let label = sc.label_of(&item.object);
        if !rows.iter().any(|r| r.object == label) {
            rows.push(ReportRow {
                object: label,
                success: 0,
                attempts: 0,
            });
        }
    }
    for t in traces {
        for s in &t.subtasks {
            let Some(object) = &s.object else { continue };
            let label = sc.label_of(object);
            if let Some(r) = rows.iter_mut().find(|r| r.object == label) {
                r.attempts += 1;
                r.success += u64::from(s.success);
            }
        }
    }
    rows
}

/// Runs seeds `sc.seed .. sc.seed + sc.trials` on up to `jobs` threads.
pub fn run_batch(sc: &Scenario, jobs: usize) -> Result<TrialReport, HarnessError> {
    if sc.trials == 0 {
        return Err(HarnessError::Invalid(vec!["trials must be at least 1".into()]));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| HarnessError::Io(e.to_string()))?;
    let traces: Vec<TrialTrace> = pool.install(|| {
        (0..sc.trials)
            .into_par_iter()
            .map(|i| run_trial(sc, sc.seed.wrapping_add(i)))
            .collect::<Result<_, _>>()
    })?;
    Ok(TrialReport {
        scenario: sc.name.clone(),
        base_seed: sc.seed,
        rows: aggregate(sc, &traces),
        traces,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Text,
    Machine,
}

pub const REPORT_COLUMNS: [&str; 4] = ["Object", "Success Count", "Total Attempts", "Success Rate"];

/// Percentage with one decimal, dropping a trailing ".0".
pub fn format_rate(success: u64, attempts: u64) -> String {
    if attempts == 0 {
        return "n/a".into();
    }
    let tenths = (success as f64 * 1000.0 / attempts as f64).round() as u64;
    if tenths % 10 == 0 {
        format!("{}%", tenths / 10)
    } else {
        format!("{}.{}%", tenths / 10, tenths % 10)
    }
}

pub fn emit_report(rows: &[ReportRow], format: ReportFormat) -> String {
    let cells: Vec<[String; 4]> = rows
        .iter()
        .map(|r| {
            [
                r.object.clone(),
                r.success.to_string(),
                r.attempts.to_string(),
                format_rate(r.success, r.attempts),
            ]
        })
        .collect();
    match format {
        ReportFormat::Machine => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(REPORT_COLUMNS).expect("in-memory write");
            for c in &cells {
                w.write_record(c).expect("in-memory write");
            }
            String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv output is utf-8")
        }
        ReportFormat::Text => {
            let mut widths = REPORT_COLUMNS.map(str::len);
            for c in &cells {
                for (w, s) in widths.iter_mut().zip(c) {
                    *w = (*w).max(s.len());
                }
            }
            let mut out = String::new();
            let mut line = |row: [&str; 4]| {
                let mut l = format!("{:<w$}", row[0], w = widths[0]);
                for i in 1..4 {
                    let _ = write!(l, "  {:>w$}", row[i], w = widths[i]);
                }
                out.push_str(l.trim_end());
                out.push('\n');
            };
            line(REPORT_COLUMNS);
            for c in &cells {
                line([&c[0], &c[1], &c[2], &c[3]]);
            }
            out
        }
    }
}

/// One line of a trace file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TraceLine {
    Scenario { scenario: Box<Scenario> },
    Trial { trial: u64 },
    Record(TraceRecord),
    Command { trial: u64, command: Command },
    Final { trial: u64, state_hash: String, trace_hash: String },
}

pub fn write_trace(sc: &Scenario, traces: &[TrialTrace], out: &mut impl std::io::Write) -> Result<(), HarnessError> {
    let mut put = |l: &TraceLine| -> Result<(), HarnessError> {
        let s = serde_json::to_string(l).map_err(|e| HarnessError::Parse(e.to_string()))?;
        writeln!(out, "{s}").map_err(|e| HarnessError::Io(e.to_string()))
    };
    put(&TraceLine::Scenario {
        scenario: Box::new(sc.clone()),
    })?;
    for t in traces {
        put(&TraceLine::Trial { trial: t.trial })?;
        for r in &t.records {
            put(&TraceLine::Record(r.clone()))?;
        }
        for c in &t.commands {
            put(&TraceLine::Command {
                trial: t.trial,
                command: c.clone(),
            })?;
        }
        put(&TraceLine::Final {
            trial: t.trial,
            state_hash: t.final_hash.clone(),
            trace_hash: t.trace_hash(),
        })?;
    }
    Ok(())
}

/// Contents of a trace file, grouped per trial.
#[derive(Clone, Debug)]
pub struct LoadedTrace {
    pub scenario: Scenario,
    pub trials: Vec<LoadedTrial>,
}

#[derive(Clone, Debug, Default)]
pub struct LoadedTrial {
    pub trial: u64,
    pub records: Vec<TraceRecord>,
    pub commands: Vec<Command>,
    pub state_hash: String,
    pub trace_hash: String,
}

pub fn read_trace(text: &str) -> Result<LoadedTrace, HarnessError> {
    let mut scenario = None;
    let mut trials: Vec<LoadedTrial> = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let l: TraceLine = serde_json::from_str(line).map_err(|e| HarnessError::Parse(format!("line {}: {e}", n + 1)))?;
        let bad = || HarnessError::Parse(format!("line {}: out of order", n + 1));
        match l {
            TraceLine::Scenario { scenario: s } => scenario = Some(*s),
            TraceLine::Trial { trial } => trials.push(LoadedTrial {
                trial,
                ..LoadedTrial::default()
            }),
            TraceLine::Record(r) => trials.last_mut().filter(|t| t.trial == r.trial).ok_or_else(bad)?.records.push(r),
            TraceLine::Command { trial, command } => {
                trials.last_mut().filter(|t| t.trial == trial).ok_or_else(bad)?.commands.push(command)
            }
            TraceLine::Final {
                trial,
                state_hash,
                trace_hash,
            } => {
                let t = trials.last_mut().filter(|t| t.trial == trial).ok_or_else(bad)?;
                t.state_hash = state_hash;
                t.trace_hash = trace_hash;
            }
        }
    }
    let scenario = scenario.ok_or_else(|| HarnessError::Parse("trace has no scenario line".into()))?;
    Ok(LoadedTrace { scenario, trials })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReplayResult {
    pub trial: u64,
    /// Re-applying the logged commands reproduced the final world.
    pub state_match: bool,
    /// Re-running the trial reproduced the logged records.
    pub trace_match: bool,
}

pub fn replay(trace: &LoadedTrace) -> Result<Vec<ReplayResult>, HarnessError> {
    let sc = &trace.scenario;
    trace
        .trials
        .iter()
        .map(|t| {
            let mut world = reset_world(sc, t.trial)?;
            for c in &t.commands {
                world.apply(c)?;
            }
            let rerun = run_trial(sc, t.trial)?;
            Ok(ReplayResult {
                trial: t.trial,
                state_match: world.state_hash() == t.state_hash,
                trace_match: rerun.trace_hash() == t.trace_hash,
            })
        })
        .collect()
}
