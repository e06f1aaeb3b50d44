//! Bidirectional RRT-Connect in the composite joint space of both arms,
//! with shortcut smoothing.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::arm::{Arms, DualConfig, Side, DOF};
use super::collision::CollisionWorld;
use super::JointPath;
use crate::error::MotionError;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerParams {
    /// Maximum tree extension per step (∞-norm, rad).
    pub step: f64,
    /// Edge validation resolution (∞-norm, rad).
    pub check_res: f64,
    pub max_iters: usize,
    pub shortcut_iters: usize,
}

impl Default for PlannerParams {
    fn default() -> Self {
        PlannerParams {
            step: 0.1,
            check_res: 0.02,
            max_iters: 5000,
            shortcut_iters: 100,
        }
    }
}

const N: usize = 2 * DOF;
type Q = [f64; N];

struct Tree {
    nodes: Vec<Q>,
    parents: Vec<usize>,
}

impl Tree {
    fn new(root: Q) -> Tree {
        Tree {
            nodes: vec![root],
            parents: vec![usize::MAX],
        }
    }

    fn nearest(&self, q: &Q, active: &[bool; N]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, n) in self.nodes.iter().enumerate() {
            let mut d = 0.0;
            for k in 0..N {
                if active[k] {
                    let e = n[k] - q[k];
                    d += e * e;
                }
            }
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    }

    fn branch(&self, mut i: usize) -> Vec<Q> {
        let mut out = Vec::new();
        while i != usize::MAX {
            out.push(self.nodes[i]);
            i = self.parents[i];
        }
        out
    }
}

enum Extend {
    Reached,
    Advanced,
    Trapped,
}

fn dist_inf(a: &Q, b: &Q) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn lerp(a: &Q, b: &Q, t: f64) -> Q {
    if t >= 1.0 {
        return *b;
    }
    let mut out = *a;
    for k in 0..N {
        out[k] = a[k] + (b[k] - a[k]) * t;
    }
    out
}

/// Collision test for composite configurations, counting queries.
pub struct Validator<'a> {
    pub world: &'a CollisionWorld,
    pub arms: &'a Arms,
    pub checks: usize,
}

impl<'a> Validator<'a> {
    pub fn new(world: &'a CollisionWorld, arms: &'a Arms) -> Self {
        Validator { world, arms, checks: 0 }
    }

    pub fn config_free(&mut self, c: &DualConfig) -> bool {
        self.checks += 1;
        c.within_limits(self.arms) && self.world.is_free(self.arms, c)
    }

    fn free(&mut self, q: &Q) -> bool {
        self.config_free(&DualConfig::from_array(q))
    }

    /// Checks the straight segment `a`→`b` at resolution `res`, excluding `a`.
    fn edge_free(&mut self, a: &Q, b: &Q, res: f64) -> bool {
        let n = (dist_inf(a, b) / res).ceil().max(1.0) as usize;
        // coarse-to-fine order rejects blocked edges early
        let mut order: Vec<usize> = Vec::with_capacity(n);
        let mut stride = n.next_power_of_two();
        let mut seen = vec![false; n + 1];
        while stride >= 1 {
            let mut i = stride;
            while i <= n {
                if !seen[i] {
                    seen[i] = true;
                    order.push(i);
                }
                i += stride;
            }
            stride /= 2;
        }
        order.iter().all(|&i| self.free(&lerp(a, b, i as f64 / n as f64)))
    }

    pub fn segment_free(&mut self, a: &DualConfig, b: &DualConfig, res: f64) -> bool {
        self.edge_free(&a.to_array(), &b.to_array(), res)
    }
}

fn sample(rng: &mut ChaCha8Rng, arms: &Arms, active: &[bool; N], fixed: &Q) -> Q {
    let mut q = *fixed;
    for side in Side::BOTH {
        let model = arms.get(side);
        for j in 0..DOF {
            let k = side.index() * DOF + j;
            if active[k] {
                let [lo, hi] = model.joints[j].limits;
                q[k] = rng.random_range(lo..=hi);
            }
        }
    }
    q
}

fn extend(tree: &mut Tree, target: &Q, v: &mut Validator, params: &PlannerParams, active: &[bool; N]) -> Extend {
    let i = tree.nearest(target, active);
    let from = tree.nodes[i];
    let d = dist_inf(&from, target);
    let (to, reached) = if d <= params.step {
        (*target, true)
    } else {
        (lerp(&from, target, params.step / d), false)
    };
    if !v.edge_free(&from, &to, params.check_res) {
        return Extend::Trapped;
    }
    tree.nodes.push(to);
    tree.parents.push(i);
    if reached {
        Extend::Reached
    } else {
        Extend::Advanced
    }
}

fn connect(tree: &mut Tree, target: &Q, v: &mut Validator, params: &PlannerParams, active: &[bool; N]) -> Extend {
    loop {
        match extend(tree, target, v, params, active) {
            Extend::Advanced => continue,
            other => return other,
        }
    }
}

/// Plans a collision-free path from `start` to `goal`. An arm whose start
/// and goal configurations are identical stays parked for the whole path.
pub fn rrt_connect(
    world: &CollisionWorld,
    arms: &Arms,
    start: &DualConfig,
    goal: &DualConfig,
    params: &PlannerParams,
    seed: u64,
) -> Result<JointPath, MotionError> {
    let mut v = Validator::new(world, arms);
    if !v.config_free(start) {
        return Err(MotionError::StartInCollision);
    }
    if !v.config_free(goal) {
        return Err(MotionError::GoalInCollision);
    }
    let s = start.to_array();
    let g = goal.to_array();
    if s == g {
        return Ok(JointPath::from_configs(vec![*start]));
    }
    let mut active = [false; N];
    for side in Side::BOTH {
        let moves = start.get(side) != goal.get(side);
        for j in 0..DOF {
            active[side.index() * DOF + j] = moves;
        }
    }
    let raw = if v.edge_free(&s, &g, params.check_res) {
        vec![s, g]
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ta = Tree::new(s);
        let mut tb = Tree::new(g);
        let mut a_is_start = true;
        let mut found = None;
        for _ in 0..params.max_iters {
            let qr = sample(&mut rng, arms, &active, &s);
            if !matches!(extend(&mut ta, &qr, &mut v, params, &active), Extend::Trapped) {
                let qn = *ta.nodes.last().unwrap();
                if matches!(connect(&mut tb, &qn, &mut v, params, &active), Extend::Reached) {
                    let mut pa = ta.branch(ta.nodes.len() - 1);
                    pa.reverse();
                    let pb = tb.branch(tb.nodes.len() - 1);
                    // pb starts with the duplicate meeting node
                    pa.extend(pb.into_iter().skip(1));
                    if !a_is_start {
                        pa.reverse();
                    }
                    found = Some(pa);
                    break;
                }
            }
            std::mem::swap(&mut ta, &mut tb);
            a_is_start = !a_is_start;
        }
        let Some(p) = found else {
            return Err(MotionError::NoPath);
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5bd1_e995);
        shortcut(p, &mut v, params, &mut rng)
    };
    Ok(JointPath::from_configs(densify(&raw, params.step).iter().map(DualConfig::from_array).collect()))
}

fn shortcut(mut path: Vec<Q>, v: &mut Validator, params: &PlannerParams, rng: &mut ChaCha8Rng) -> Vec<Q> {
    for _ in 0..params.shortcut_iters {
        if path.len() < 3 {
            break;
        }
        let i = rng.random_range(0..path.len() - 2);
        let j = rng.random_range(i + 2..path.len());
        if v.edge_free(&path[i], &path[j], params.check_res) {
            path.drain(i + 1..j);
        }
    }
    path
}

fn densify(path: &[Q], step: f64) -> Vec<Q> {
    let mut out = vec![path[0]];
    for w in path.windows(2) {
        let n = (dist_inf(&w[0], &w[1]) / step).ceil().max(1.0) as usize;
        for i in 1..=n {
            out.push(lerp(&w[0], &w[1], i as f64 / n as f64));
        }
    }
    out
}

/// ∞-norm arc length of a configuration sequence.
pub fn path_length(configs: &[DualConfig]) -> f64 {
    configs.windows(2).map(|w| w[0].distance(&w[1])).sum()
}

/// Re-checks every segment of `path` at resolution `res`; returns the number
/// of colliding samples.
pub fn dense_violations(world: &CollisionWorld, arms: &Arms, path: &JointPath, res: f64) -> usize {
    let mut bad = 0;
    for w in path.configs.windows(2) {
        let n = (w[0].distance(&w[1]) / res).ceil().max(1.0) as usize;
        for i in 0..=n {
            let c = w[0].lerp(&w[1], i as f64 / n as f64);
            if !(c.within_limits(arms) && world.is_free(arms, &c)) {
                bad += 1;
            }
        }
    }
    if path.configs.len() == 1 && !world.is_free(arms, &path.configs[0]) {
        bad += 1;
    }
    bad
}
