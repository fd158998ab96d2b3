//! RRT* over a cost map, pure-pursuit rollouts and path / freespace metrics.

use crate::costmap::GlobalCostMap;
use crate::error::{invalid, Error, Result};
use diffcore::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Cells costing more than this are impassable.
pub const OBSTACLE_COST: f64 = 0.8;

/// Polyline of world `(x, y)` waypoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<[f64; 2]>", into = "Vec<[f64; 2]>")]
pub struct Path {
    waypoints: Vec<[f64; 2]>,
}

impl TryFrom<Vec<[f64; 2]>> for Path {
    type Error = String;

    fn try_from(waypoints: Vec<[f64; 2]>) -> std::result::Result<Self, String> {
        if waypoints.len() < 2 {
            return Err(format!("a path needs at least 2 waypoints, got {}", waypoints.len()));
        }
        if waypoints.iter().flatten().any(|v| !v.is_finite()) {
            return Err("non-finite waypoint".into());
        }
        if let Some(i) = waypoints.windows(2).position(|w| w[0] == w[1]) {
            return Err(format!("waypoints {i} and {} coincide", i + 1));
        }
        Ok(Self { waypoints })
    }
}

impl From<Path> for Vec<[f64; 2]> {
    fn from(p: Path) -> Self {
        p.waypoints
    }
}

impl Path {
    pub fn new(waypoints: Vec<[f64; 2]>) -> Result<Self> {
        Self::try_from(waypoints).map_err(invalid)
    }

    pub fn waypoints(&self) -> &[[f64; 2]] {
        &self.waypoints
    }

    pub fn length(&self) -> f64 {
        self.waypoints.windows(2).map(|w| dist(w[0], w[1])).sum()
    }

    pub fn start(&self) -> [f64; 2] {
        self.waypoints[0]
    }

    pub fn end(&self) -> [f64; 2] {
        *self.waypoints.last().unwrap()
    }

    /// Points every `spacing` meters of arc length, plus the final vertex.
    pub fn resample(&self, spacing: f64) -> Vec<[f64; 2]> {
        assert!(spacing > 0.0, "resample spacing must be positive");
        let mut out = vec![self.waypoints[0]];
        let mut carry = 0.0;
        for w in self.waypoints.windows(2) {
            let len = dist(w[0], w[1]);
            let mut s = spacing - carry;
            while s < len {
                out.push(lerp(w[0], w[1], s / len));
                s += spacing;
            }
            carry = len - (s - spacing);
        }
        if *out.last().unwrap() != self.end() {
            out.push(self.end());
        }
        out
    }

    /// Largest map cost over points sampled every half cell along the path.
    pub fn max_cost(&self, map: &GlobalCostMap) -> Option<f64> {
        let mut worst: f64 = 0.0;
        for p in self.resample(map.resolution() / 2.0) {
            worst = worst.max(map.cost_at(p[0], p[1])?);
        }
        Some(worst)
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn lerp(a: [f64; 2], b: [f64; 2], t: f64) -> [f64; 2] {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlannerParams {
    pub step: f64,
    pub goal_bias: f64,
    pub max_iters: usize,
    pub rewire_radius: f64,
    /// Weight λ of the mean traversed cost in the edge cost.
    pub cost_weight: f64,
    pub seed: u64,
}

impl Default for PlannerParams {
    fn default() -> Self {
        Self {
            step: 1.0,
            goal_bias: 0.1,
            max_iters: 3000,
            rewire_radius: 2.5,
            cost_weight: 5.0,
            seed: 0,
        }
    }
}

impl PlannerParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0) || !(0.0..=1.0).contains(&self.goal_bias) || !(self.rewire_radius > 0.0) {
            return Err(invalid(format!("invalid planner parameters {self:?}")));
        }
        if !(self.cost_weight >= 0.0) {
            return Err(invalid("cost weight must be non-negative"));
        }
        Ok(())
    }
}

/// Edge cost `len·(1 + λ·mean cost)` with costs sampled every half cell,
/// or `None` if the edge leaves the map or touches an obstacle.
pub fn edge_cost(map: &GlobalCostMap, a: [f64; 2], b: [f64; 2], lambda: f64) -> Option<f64> {
    let len = dist(a, b);
    let n = ((len / (map.resolution() / 2.0)).ceil() as usize).max(1);
    let mut sum = 0.0;
    for k in 0..=n {
        let c = map.cost_at_point(lerp(a, b, k as f64 / n as f64))?;
        if c > OBSTACLE_COST {
            return None;
        }
        sum += c;
    }
    Some(len * (1.0 + lambda * sum / (n + 1) as f64))
}

impl GlobalCostMap {
    fn cost_at_point(&self, p: [f64; 2]) -> Option<f64> {
        self.cost_at(p[0], p[1])
    }
}

struct Node {
    pos: [f64; 2],
    parent: Option<usize>,
    cost: f64,
    children: Vec<usize>,
}

/// A planned path and its accumulated edge cost.
#[derive(Clone, Debug, PartialEq)]
pub struct Plan {
    pub path: Path,
    pub cost: f64,
}

/// RRT* from `start` to within `step` of `goal`. Every iteration draws the
/// same number of random values, so runs with a larger `max_iters` extend
/// the tree of shorter runs.
pub fn rrt_star_plan(map: &GlobalCostMap, start: [f64; 2], goal: [f64; 2], params: &PlannerParams) -> Result<Plan> {
    params.validate()?;
    for (name, p) in [("start", start), ("goal", goal)] {
        if map.cost_at_point(p).is_none() {
            return Err(invalid(format!("{name} {p:?} lies outside the map")));
        }
    }
    let lambda = params.cost_weight;
    let [xmin, ymin, xmax, ymax] = map.bounds();
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut nodes = vec![Node {
        pos: start,
        parent: None,
        cost: 0.0,
        children: Vec::new(),
    }];
    for _ in 0..params.max_iters {
        let u: f64 = rng.gen();
        let sx: f64 = rng.gen_range(xmin..xmax);
        let sy: f64 = rng.gen_range(ymin..ymax);
        let sample = if u < params.goal_bias { goal } else { [sx, sy] };
        let nearest = nearest_node(&nodes, sample);
        let from = nodes[nearest].pos;
        let d = dist(from, sample);
        if d == 0.0 {
            continue;
        }
        let new = if d <= params.step { sample } else { lerp(from, sample, params.step / d) };
        if nodes.iter().any(|n| n.pos == new) {
            continue;
        }
        let near: Vec<usize> = (0..nodes.len()).filter(|&i| dist(nodes[i].pos, new) <= params.rewire_radius).collect();
        let mut best: Option<(usize, f64)> = edge_cost(map, from, new, lambda).map(|c| (nearest, nodes[nearest].cost + c));
        let mut edges = Vec::with_capacity(near.len());
        for &i in &near {
            let e = edge_cost(map, nodes[i].pos, new, lambda);
            if let Some(c) = e {
                let total = nodes[i].cost + c;
                if best.map_or(true, |(_, b)| total < b) {
                    best = Some((i, total));
                }
            }
            edges.push(e);
        }
        let Some((parent, cost)) = best else {
            continue;
        };
        let id = nodes.len();
        nodes.push(Node {
            pos: new,
            parent: Some(parent),
            cost,
            children: Vec::new(),
        });
        nodes[parent].children.push(id);
        for (&i, e) in near.iter().zip(edges) {
            let Some(c) = e else { continue };
            if i == parent || cost + c >= nodes[i].cost {
                continue;
            }
            if let Some(old) = nodes[i].parent {
                nodes[old].children.retain(|&ch| ch != i);
            }
            nodes[i].parent = Some(id);
            nodes[id].children.push(i);
            let delta = cost + c - nodes[i].cost;
            propagate(&mut nodes, i, delta);
        }
    }
    let mut best: Option<(usize, f64, f64)> = None;
    for (i, n) in nodes.iter().enumerate() {
        let d = dist(n.pos, goal);
        if d > params.step {
            continue;
        }
        let tail = if d == 0.0 { Some(0.0) } else { edge_cost(map, n.pos, goal, lambda) };
        if let Some(c) = tail {
            if best.map_or(true, |(_, b, _)| n.cost + c < b) {
                best = Some((i, n.cost + c, d));
            }
        }
    }
    let (end, cost, d) = best.ok_or(Error::NoPath(params.max_iters))?;
    let mut waypoints = vec![];
    if d > 0.0 {
        waypoints.push(goal);
    }
    let mut cur = Some(end);
    while let Some(i) = cur {
        waypoints.push(nodes[i].pos);
        cur = nodes[i].parent;
    }
    waypoints.reverse();
    if waypoints.len() < 2 {
        waypoints.push(goal);
    }
    Ok(Plan {
        path: Path::new(waypoints)?,
        cost,
    })
}

fn nearest_node(nodes: &[Node], p: [f64; 2]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, n) in nodes.iter().enumerate() {
        let d = dist(n.pos, p);
        if d < best.1 {
            best = (i, d);
        }
    }
    best.0
}

fn propagate(nodes: &mut [Node], root: usize, delta: f64) {
    let mut stack = vec![root];
    while let Some(i) = stack.pop() {
        nodes[i].cost += delta;
        stack.extend(nodes[i].children.iter().copied());
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RolloutParams {
    /// Forward speed, m/s.
    pub speed: f64,
    pub dt: f64,
    /// Pure-pursuit lookahead distance, m.
    pub lookahead: f64,
    /// Largest admissible curvature, 1/m.
    pub max_curvature: f64,
    /// Heading noise standard deviation, rad/√s.
    pub heading_noise: f64,
    /// Distance to the final waypoint counted as arrival, m.
    pub goal_tolerance: f64,
    /// Time budget as a multiple of the nominal traversal time, plus 10 s.
    pub time_factor: f64,
    pub seed: u64,
}

impl Default for RolloutParams {
    fn default() -> Self {
        Self {
            speed: 1.0,
            dt: 0.05,
            lookahead: 1.0,
            max_curvature: 2.0,
            heading_noise: 0.05,
            goal_tolerance: 0.3,
            time_factor: 3.0,
            seed: 0,
        }
    }
}

/// Poses `(x, y, heading)` visited by a rollout.
#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    pub trace: Vec<[f64; 3]>,
    pub success: bool,
}

/// Closest point to `p` on segment `ab`, as `(distance, parameter)`.
fn segment_projection(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> (f64, f64) {
    let (vx, vy) = (b[0] - a[0], b[1] - a[1]);
    let l2 = vx * vx + vy * vy;
    let t = if l2 == 0.0 { 0.0 } else { (((p[0] - a[0]) * vx + (p[1] - a[1]) * vy) / l2).clamp(0.0, 1.0) };
    (dist(p, lerp(a, b, t)), t)
}

/// Distance from a point to a polyline.
pub fn distance_to_path(p: [f64; 2], path: &Path) -> f64 {
    path.waypoints
        .windows(2)
        .map(|w| segment_projection(p, w[0], w[1]).0)
        .fold(f64::INFINITY, f64::min)
}

/// Unicycle at constant speed steered by pure pursuit along `path`.
pub fn rollout(path: &Path, map: &GlobalCostMap, params: &RolloutParams) -> Rollout {
    let wp = path.waypoints();
    let cum: Vec<f64> = std::iter::once(0.0)
        .chain(wp.windows(2).scan(0.0, |s, w| {
            *s += dist(w[0], w[1]);
            Some(*s)
        }))
        .collect();
    let total = *cum.last().unwrap();
    let point_at = |s: f64| -> [f64; 2] {
        let s = s.clamp(0.0, total);
        let k = cum.partition_point(|&c| c <= s).clamp(1, wp.len() - 1);
        let len = cum[k] - cum[k - 1];
        lerp(wp[k - 1], wp[k], if len > 0.0 { (s - cum[k - 1]) / len } else { 0.0 })
    };
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let (mut x, mut y) = (wp[0][0], wp[0][1]);
    let mut th = (wp[1][1] - wp[0][1]).atan2(wp[1][0] - wp[0][0]);
    let mut trace = vec![[x, y, th]];
    let budget = params.time_factor * total / params.speed + 10.0;
    let steps = (budget / params.dt).ceil() as usize;
    let goal = path.end();
    let mut progress = 0.0;
    let passable = |x: f64, y: f64| map.cost_at(x, y).is_some_and(|c| c <= OBSTACLE_COST);
    if !passable(x, y) {
        return Rollout { trace, success: false };
    }
    for _ in 0..steps {
        if dist([x, y], goal) <= params.goal_tolerance {
            return Rollout { trace, success: true };
        }
        // closest path point at or beyond the current progress, within reach
        let mut best = (f64::INFINITY, progress);
        for k in 1..wp.len() {
            if cum[k] < progress {
                continue;
            }
            let (d, t) = segment_projection([x, y], wp[k - 1], wp[k]);
            let s = (cum[k - 1] + t * (cum[k] - cum[k - 1])).max(progress);
            if s > progress + 2.0 * params.lookahead + params.speed * params.dt {
                break;
            }
            if d < best.0 {
                best = (d, s);
            }
        }
        progress = best.1;
        let target = point_at(progress + params.lookahead);
        let (tx, ty) = (target[0] - x, target[1] - y);
        let ld = tx.hypot(ty);
        let kappa = if ld > 1e-9 {
            let eta = ty.atan2(tx) - th;
            (2.0 * eta.sin() / ld).clamp(-params.max_curvature, params.max_curvature)
        } else {
            0.0
        };
        let noise: f64 = StandardNormal.sample(&mut rng);
        th += params.speed * kappa * params.dt + params.heading_noise * params.dt.sqrt() * noise;
        x += params.speed * th.cos() * params.dt;
        y += params.speed * th.sin() * params.dt;
        trace.push([x, y, th]);
        if !passable(x, y) {
            return Rollout { trace, success: false };
        }
    }
    let success = dist([x, y], goal) <= params.goal_tolerance;
    Rollout { trace, success }
}

/// Mean distance from trace positions to the path polyline.
pub fn cross_track_error(trace: &[[f64; 3]], path: &Path) -> f64 {
    assert!(!trace.is_empty(), "cross-track error of an empty trace");
    trace.iter().map(|p| distance_to_path([p[0], p[1]], path)).sum::<f64>() / trace.len() as f64
}

/// Symmetric Hausdorff distance between two point sets.
pub fn hausdorff_points(a: &[[f64; 2]], b: &[[f64; 2]]) -> f64 {
    let directed = |a: &[[f64; 2]], b: &[[f64; 2]]| {
        a.iter()
            .map(|p| b.iter().map(|q| dist(*p, *q)).fold(f64::INFINITY, f64::min))
            .fold(0.0, f64::max)
    };
    directed(a, b).max(directed(b, a))
}

/// Hausdorff distance between two paths resampled every `spacing` meters.
pub fn hausdorff(a: &Path, b: &Path, spacing: f64) -> f64 {
    hausdorff_points(&a.resample(spacing), &b.resample(spacing))
}

/// Seed of rollout trial `t` under a base seed.
pub fn trial_seed(base: u64, t: usize) -> u64 {
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(t as u64 + 1)
}

/// Fraction of successful rollouts over `trials` seeded trials.
pub fn success_rate(path: &Path, map: &GlobalCostMap, params: &RolloutParams, trials: usize) -> Result<f64> {
    if trials == 0 {
        return Err(invalid("success rate needs at least one trial"));
    }
    let ok = (0..trials)
        .filter(|&t| {
            let p = RolloutParams {
                seed: trial_seed(params.seed, t),
                ..params.clone()
            };
            rollout(path, map, &p).success
        })
        .count();
    Ok(ok as f64 / trials as f64)
}

/// Confusion-matrix metrics of a binary prediction.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FreespaceMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
    pub iou: f64,
    /// Names of metrics whose denominator was zero (reported as 0).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub degenerate: Vec<String>,
}

/// Confusion counts `(tp, fp, fn, tn)` of two binary masks.
pub fn confusion(pred: &Tensor, gt: &Tensor) -> Result<[usize; 4]> {
    if pred.shape() != gt.shape() {
        return Err(invalid(format!("mask shapes differ: {:?} vs {:?}", pred.shape(), gt.shape())));
    }
    let mut c = [0; 4];
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let idx = match (p > 0.5, g > 0.5) {
            (true, true) => 0,
            (true, false) => 1,
            (false, true) => 2,
            (false, false) => 3,
        };
        c[idx] += 1;
    }
    Ok(c)
}

impl FreespaceMetrics {
    pub fn from_counts([tp, fp, fneg, tn]: [usize; 4]) -> Self {
        let mut m = Self::default();
        let mut ratio = |name: &str, num: usize, den: usize| {
            if den == 0 {
                m.degenerate.push(name.to_string());
                0.0
            } else {
                num as f64 / den as f64
            }
        };
        let accuracy = ratio("accuracy", tp + tn, tp + fp + fneg + tn);
        let precision = ratio("precision", tp, tp + fp);
        let recall = ratio("recall", tp, tp + fneg);
        let iou = ratio("iou", tp, tp + fp + fneg);
        let f_score = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            m.degenerate.push("f_score".into());
            0.0
        };
        Self {
            accuracy,
            precision,
            recall,
            f_score,
            iou,
            degenerate: m.degenerate,
        }
    }
}

pub fn freespace_metrics(pred: &Tensor, gt: &Tensor) -> Result<FreespaceMetrics> {
    Ok(FreespaceMetrics::from_counts(confusion(pred, gt)?))
}
