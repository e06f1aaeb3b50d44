//! Hierarchical task reasoning: packing order → subtasks → atomic tasks,
//! plus execution monitoring with recovery insertion.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;

use crate::error::HtrError;
use crate::geometry::Pose;
use crate::skill_graph::{ObjectCategory, SkillGraph, SkillId};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskItem {
    pub object: String,
    pub quantity: u32,
}

/// A packing order: items in order, optionally followed by sealing the box.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    #[serde(default)]
    pub items: Vec<TaskItem>,
    #[serde(default)]
    pub seal: bool,
}

impl TaskSpec {
    pub fn subtask_count(&self) -> usize {
        self.items.iter().map(|i| i.quantity as usize).sum::<usize>() + usize::from(self.seal)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SubtaskKind {
    /// The `index`-th unit (1-based) of `object`.
    PackItem { object: String, index: u32 },
    SealBox,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubtaskStatus {
    Pending,
    Active,
    Done,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subtask {
    pub kind: SubtaskKind,
    pub status: SubtaskStatus,
}

impl Subtask {
    pub fn object(&self) -> Option<&str> {
        match &self.kind {
            SubtaskKind::PackItem { object, .. } => Some(object),
            SubtaskKind::SealBox => None,
        }
    }
}

impl fmt::Display for Subtask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            SubtaskKind::PackItem { object, index } => write!(f, "pack {object}#{index}"),
            SubtaskKind::SealBox => write!(f, "seal box"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Nominal,
    Recovery,
}

/// Executor parameter value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamValue {
    Text(String),
    Number(f64),
    Index(u64),
    Flag(bool),
    Pose(Pose),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AtomicTask {
    pub skill: SkillId,
    pub object: Option<String>,
    #[serde(default)]
    pub payload: BTreeMap<String, ParamValue>,
    pub origin: Origin,
}

impl AtomicTask {
    pub fn new(skill: SkillId, object: Option<&str>) -> Self {
        let mut payload = BTreeMap::new();
        if let Some(o) = object {
            payload.insert("object".to_string(), ParamValue::Text(o.to_string()));
        }
        AtomicTask {
            skill,
            object: object.map(str::to_string),
            payload,
            origin: Origin::Nominal,
        }
    }

    pub fn with_param(mut self, key: &str, value: ParamValue) -> Self {
        self.payload.insert(key.to_string(), value);
        self
    }

    pub fn recovery(mut self) -> Self {
        self.origin = Origin::Recovery;
        self
    }
}

impl fmt::Display for AtomicTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.object {
            Some(o) => write!(f, "{:?}({o})", self.skill),
            None => write!(f, "{:?}", self.skill),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    /// No pose found, or registration residual too high.
    Perception,
    /// DetectPick reported the object is not held.
    Pick,
    /// No joint-space realization of the requested motion.
    Motion,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Success,
    Failure(FailureKind),
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Outcome::Success => f.write_str("success"),
            Outcome::Failure(FailureKind::Perception) => f.write_str("perception_failure"),
            Outcome::Failure(FailureKind::Pick) => f.write_str("pick_failure"),
            Outcome::Failure(FailureKind::Motion) => f.write_str("motion_failure"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HtrConfig {
    pub max_retries: u32,
    pub recovery_enabled: bool,
}

impl Default for HtrConfig {
    fn default() -> Self {
        HtrConfig {
            max_retries: 2,
            recovery_enabled: true,
        }
    }
}

/// Nominal atomic template of a pack subtask.
pub const PACK_TEMPLATE: [SkillId; 5] = [
    SkillId::DetectObject,
    SkillId::Pick,
    SkillId::DetectPick,
    SkillId::Transit,
    SkillId::Place,
];

/// Nominal atomic template of the seal subtask.
pub const SEAL_TEMPLATE: [SkillId; 2] = [SkillId::Transit, SkillId::Pack];

/// `(skill, category)` pairs the templates need bindings for; `None` is an
/// object-free task that can only match wildcard bindings.
pub fn required_bindings(categories: &[ObjectCategory]) -> Vec<(SkillId, Option<ObjectCategory>)> {
    let mut out = Vec::new();
    for &c in categories {
        for skill in PACK_TEMPLATE {
            out.push((skill, Some(c)));
        }
    }
    out.push((SkillId::Stir, None));
    for skill in SEAL_TEMPLATE {
        out.push((skill, None));
    }
    out.sort();
    out.dedup();
    out
}

pub fn decompose_task(task: &TaskSpec, graph: &SkillGraph) -> Result<Vec<Subtask>, HtrError> {
    let mut out = Vec::with_capacity(task.subtask_count());
    for item in &task.items {
        if graph.object(&item.object).is_none() {
            return Err(HtrError::UnknownObject(item.object.clone()));
        }
        if item.quantity == 0 {
            return Err(HtrError::ZeroQuantity(item.object.clone()));
        }
        for j in 1..=item.quantity {
            out.push(Subtask {
                kind: SubtaskKind::PackItem {
                    object: item.object.clone(),
                    index: j,
                },
                status: SubtaskStatus::Pending,
            });
        }
    }
    if task.seal {
        out.push(Subtask {
            kind: SubtaskKind::SealBox,
            status: SubtaskStatus::Pending,
        });
    }
    Ok(out)
}

/// Expands a pending subtask into its nominal atomic tasks. `source_bin` is
/// recorded on detection tasks so a later recovery knows which bin to stir.
pub fn expand_subtask(
    subtask: &Subtask,
    graph: &SkillGraph,
    source_bin: Option<u64>,
) -> Result<Vec<AtomicTask>, HtrError> {
    if subtask.status != SubtaskStatus::Pending {
        return Err(HtrError::InvalidState(subtask.to_string()));
    }
    let tasks: Vec<AtomicTask> = match &subtask.kind {
        SubtaskKind::PackItem { object, .. } => PACK_TEMPLATE
            .iter()
            .map(|&skill| {
                let t = AtomicTask::new(skill, Some(object));
                match skill {
                    SkillId::DetectObject => match source_bin {
                        Some(b) => t.with_param("bin", ParamValue::Index(b)),
                        None => t,
                    },
                    SkillId::Transit | SkillId::Place => {
                        t.with_param("target", ParamValue::Text("packing_box".into()))
                    }
                    _ => t,
                }
            })
            .collect(),
        SubtaskKind::SealBox => vec![
            AtomicTask::new(SkillId::Transit, None)
                .with_param("target", ParamValue::Text("packing_box".into())),
            AtomicTask::new(SkillId::Pack, None)
                .with_param("mode", ParamValue::Text("seal".into())),
        ],
    };
    for t in &tasks {
        let category = match &t.object {
            Some(o) => Some(
                graph
                    .object(o)
                    .ok_or_else(|| HtrError::UnknownObject(o.clone()))?
                    .category,
            ),
            None => None,
        };
        graph.select_binding(t.skill, category)?;
    }
    Ok(tasks)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlannedTask {
    pub task: AtomicTask,
    pub subtask: usize,
}

/// One executed atomic task and its outcome.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExecutedTask {
    pub subtask: usize,
    pub task: AtomicTask,
    pub outcome: Outcome,
}

/// Step-by-step execution plan with a cursor over the atomic task queue.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub subtasks: Vec<Subtask>,
    pub queue: Vec<PlannedTask>,
    pub cursor: usize,
    pub retry_counts: Vec<u32>,
    pub config: HtrConfig,
    pub executed: Vec<ExecutedTask>,
}

impl Plan {
    /// Decomposes and expands a whole task. `source_bins` maps object names
    /// to the storage bin they are picked from.
    pub fn build(
        task: &TaskSpec,
        graph: &SkillGraph,
        source_bins: &BTreeMap<String, u64>,
        config: HtrConfig,
    ) -> Result<Plan, HtrError> {
        let subtasks = decompose_task(task, graph)?;
        let mut queue = Vec::new();
        for (i, s) in subtasks.iter().enumerate() {
            let bin = s.object().and_then(|o| source_bins.get(o).copied());
            for task in expand_subtask(s, graph, bin)? {
                queue.push(PlannedTask { task, subtask: i });
            }
        }
        let mut plan = Plan {
            retry_counts: vec![0; subtasks.len()],
            subtasks,
            queue,
            cursor: 0,
            config,
            executed: Vec::new(),
        };
        plan.activate_current();
        Ok(plan)
    }

    pub fn is_finished(&self) -> bool {
        self.cursor >= self.queue.len()
    }

    pub fn current(&self) -> Option<&PlannedTask> {
        self.queue.get(self.cursor)
    }

    pub fn current_mut(&mut self) -> Option<&mut PlannedTask> {
        self.queue.get_mut(self.cursor)
    }

    fn activate_current(&mut self) {
        if let Some(p) = self.queue.get(self.cursor) {
            let s = &mut self.subtasks[p.subtask];
            if s.status == SubtaskStatus::Pending {
                s.status = SubtaskStatus::Active;
            }
        }
    }

    /// Records the outcome of the task at the cursor and advances the plan,
    /// inserting a recovery sequence or failing the subtask when needed.
    pub fn monitor_step(&mut self, outcome: Outcome) {
        let Some(current) = self.queue.get(self.cursor).cloned() else {
            return;
        };
        let sub = current.subtask;
        self.executed.push(ExecutedTask {
            subtask: sub,
            task: current.task.clone(),
            outcome,
        });
        match outcome {
            Outcome::Success => {
                self.cursor += 1;
                let subtask_over = self
                    .queue
                    .get(self.cursor)
                    .map_or(true, |next| next.subtask != sub);
                if subtask_over {
                    self.subtasks[sub].status = SubtaskStatus::Done;
                }
            }
            Outcome::Failure(kind) => {
                let recovery = if self.config.recovery_enabled
                    && self.retry_counts[sub] < self.config.max_retries
                {
                    recovery_sequence(kind, &current.task)
                } else {
                    None
                };
                match recovery {
                    Some(tasks) => {
                        self.retry_counts[sub] += 1;
                        let at = self.cursor + 1;
                        let inserted = tasks.into_iter().map(|task| PlannedTask { task, subtask: sub });
                        self.queue.splice(at..at, inserted);
                        self.cursor += 1;
                    }
                    None => {
                        self.subtasks[sub].status = SubtaskStatus::Failed;
                        while self.cursor < self.queue.len() && self.queue[self.cursor].subtask == sub {
                            self.cursor += 1;
                        }
                    }
                }
            }
        }
        self.activate_current();
    }

    pub fn progress(&self) -> Progress {
        let mut p = Progress {
            total: self.subtasks.len(),
            ..Progress::default()
        };
        for s in &self.subtasks {
            match s.status {
                SubtaskStatus::Done => p.done += 1,
                SubtaskStatus::Failed => p.failed += 1,
                SubtaskStatus::Pending | SubtaskStatus::Active => p.pending += 1,
            }
        }
        for e in &self.executed {
            match e.task.origin {
                Origin::Nominal => p.nominal_executed += 1,
                Origin::Recovery => p.recovery_executed += 1,
            }
        }
        for t in &self.queue {
            if t.task.origin == Origin::Recovery {
                p.recovery_inserted += 1;
            }
        }
        p
    }

    /// Upper bound on executed steps for this plan's nominal content.
    pub fn step_bound(&self) -> usize {
        let nominal = self
            .queue
            .iter()
            .filter(|t| t.task.origin == Origin::Nominal)
            .count();
        let longest_recovery = 3;
        nominal + self.config.max_retries as usize * longest_recovery * self.subtasks.len()
    }
}

pub fn monitor_step(mut plan: Plan, outcome: Outcome) -> Plan {
    plan.monitor_step(outcome);
    plan
}

pub fn plan_progress(plan: &Plan) -> Progress {
    plan.progress()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub total: usize,
    pub done: usize,
    pub failed: usize,
    pub pending: usize,
    pub nominal_executed: usize,
    pub recovery_executed: usize,
    pub recovery_inserted: usize,
}

/// Tasks inserted after a failed task; `None` when no recovery applies.
fn recovery_sequence(kind: FailureKind, failed: &AtomicTask) -> Option<Vec<AtomicTask>> {
    let object = failed.object.as_deref();
    let redetect = || {
        let mut t = AtomicTask::new(SkillId::DetectObject, object);
        if let Some(bin) = failed.payload.get("bin") {
            t = t.with_param("bin", bin.clone());
        }
        t.recovery()
    };
    let seq = match kind {
        FailureKind::Perception if failed.skill == SkillId::DetectObject => {
            let mut stir = AtomicTask::new(SkillId::Stir, None);
            if let Some(bin) = failed.payload.get("bin") {
                stir = stir.with_param("bin", bin.clone());
            }
            vec![stir.recovery(), failed.clone().recovery()]
        }
        FailureKind::Perception | FailureKind::Pick if object.is_some() => vec![
            redetect(),
            AtomicTask::new(SkillId::Pick, object).recovery(),
            AtomicTask::new(SkillId::DetectPick, object).recovery(),
        ],
        FailureKind::Motion if object.is_some() => {
            let mut seq = vec![redetect(), AtomicTask::new(SkillId::Pick, object).recovery()];
            if !matches!(failed.skill, SkillId::Pick | SkillId::DetectObject) {
                seq.push(failed.clone().recovery());
            }
            seq
        }
        FailureKind::Motion => vec![failed.clone().recovery()],
        _ => return None,
    };
    Some(seq)
}
