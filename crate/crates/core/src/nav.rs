//! Instruction-following navigation on a jittered grid graph, with optional
//! imagination of the views at candidate nodes.

use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap, VecDeque};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{self, Point, Pose};
use crate::seed::{self, tag};
use crate::world::{self, Bounds, NoiseModel, Observation, Scene, SceneObject, Sensor, WorldModel};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NavError {
    #[error("invalid navigation config: {0}")]
    InvalidConfig(String),
    #[error("no start/goal pair satisfies the hop constraints")]
    NoEpisode,
    #[error("graph is not connected")]
    Disconnected,
    #[error("unknown node {0}")]
    UnknownNode(u32),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NavNode {
    pub id: u32,
    pub position: Point,
    /// Scene object ids placed at this node.
    pub landmarks: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NavGraph {
    pub nodes: Vec<NavNode>,
    /// Undirected, stored with the smaller id first.
    pub edges: Vec<(u32, u32)>,
    pub scene: Scene,
}

impl NavGraph {
    pub fn node(&self, id: u32) -> Option<&NavNode> {
        self.nodes.get(id as usize).filter(|n| n.id == id)
    }

    pub fn neighbors(&self, id: u32) -> Vec<u32> {
        let mut out: Vec<u32> = self
            .edges
            .iter()
            .filter_map(|&(a, b)| match (a == id, b == id) {
                (true, _) => Some(b),
                (_, true) => Some(a),
                _ => None,
            })
            .collect();
        out.sort_unstable();
        out
    }

    pub fn adjacent(&self, a: u32, b: u32) -> bool {
        self.edges.contains(&(a.min(b), a.max(b)))
    }

    pub fn edge_length(&self, a: u32, b: u32) -> f64 {
        self.nodes[a as usize].position.distance(self.nodes[b as usize].position)
    }

    pub fn is_connected(&self) -> bool {
        if self.nodes.is_empty() {
            return true;
        }
        let mut seen = vec![false; self.nodes.len()];
        let mut queue = VecDeque::from([0u32]);
        seen[0] = true;
        while let Some(n) = queue.pop_front() {
            for m in self.neighbors(n) {
                if !std::mem::replace(&mut seen[m as usize], true) {
                    queue.push_back(m);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    /// Shortest path length from `from` to every node (Dijkstra); `None` where unreachable.
    pub fn shortest_lengths(&self, from: u32) -> Vec<Option<f64>> {
        #[derive(PartialEq)]
        struct Item(f64, u32);
        impl Eq for Item {}
        impl PartialOrd for Item {
            fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
                Some(self.cmp(other))
            }
        }
        impl Ord for Item {
            fn cmp(&self, other: &Self) -> Ordering {
                other.0.total_cmp(&self.0).then(other.1.cmp(&self.1))
            }
        }
        let mut dist: Vec<Option<f64>> = vec![None; self.nodes.len()];
        let mut heap = BinaryHeap::new();
        if (from as usize) < self.nodes.len() {
            dist[from as usize] = Some(0.0);
            heap.push(Item(0.0, from));
        }
        while let Some(Item(d, n)) = heap.pop() {
            if dist[n as usize].is_some_and(|best| d > best) {
                continue;
            }
            for m in self.neighbors(n) {
                let nd = d + self.edge_length(n, m);
                if dist[m as usize].is_none_or(|cur| nd < cur) {
                    dist[m as usize] = Some(nd);
                    heap.push(Item(nd, m));
                }
            }
        }
        dist
    }

    /// Node sequence of a shortest path, or `None` if unreachable.
    pub fn shortest_path(&self, from: u32, to: u32) -> Option<Vec<u32>> {
        let dist = self.shortest_lengths(to);
        dist.get(from as usize).copied().flatten()?;
        let mut path = vec![from];
        let mut cur = from;
        while cur != to {
            let d = dist[cur as usize]?;
            cur = self.neighbors(cur).into_iter().find(|&m| {
                dist[m as usize].is_some_and(|dm| (dm + self.edge_length(cur, m) - d).abs() < 1e-9)
            })?;
            path.push(cur);
        }
        Some(path)
    }

    pub fn landmark_label(&self, node: u32) -> Option<&str> {
        let id = *self.node(node)?.landmarks.first()?;
        self.scene.object(id).map(|o| o.label.as_str())
    }
}

pub const NAV_VOCABULARY: [&str; 30] = [
    "sofa", "armchair", "piano", "fireplace", "bookshelf", "aquarium", "fridge", "oven", "sink", "bathtub", "wardrobe", "bed",
    "desk", "globe", "statue", "clock", "mirror", "painting", "plant", "rug", "lamp", "television", "stairs", "door", "window",
    "bench", "vase", "chest", "printer", "washer",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GraphConfig {
    pub rows: usize,
    pub cols: usize,
    pub spacing: f64,
    pub jitter: f64,
    /// Probability of removing each grid edge, subject to connectivity.
    pub edge_drop: f64,
    pub landmark_prob: f64,
    pub landmark_offset: f64,
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig {
            rows: 5,
            cols: 5,
            spacing: 4.0,
            jitter: 0.6,
            edge_drop: 0.25,
            landmark_prob: 0.6,
            landmark_offset: 1.0,
        }
    }
}

pub fn generate_graph(cfg: &GraphConfig, seed: u64) -> Result<NavGraph, NavError> {
    if cfg.rows == 0 || cfg.cols == 0 || !(cfg.spacing > 0.0) || cfg.rows * cfg.cols > NAV_VOCABULARY.len() * 4 {
        return Err(NavError::InvalidConfig("grid must be non-empty with positive spacing".into()));
    }
    if cfg.jitter < 0.0 || cfg.jitter * 2.0 >= cfg.spacing {
        return Err(NavError::InvalidConfig("jitter must be below half the spacing".into()));
    }
    let mut rng = seed::rng(seed, &[tag::NAV, tag::SCENE]);
    let mut nodes = Vec::with_capacity(cfg.rows * cfg.cols);
    for r in 0..cfg.rows {
        for c in 0..cfg.cols {
            let j = cfg.jitter;
            let dx = if j > 0.0 { rng.gen_range(-j..=j) } else { 0.0 };
            let dy = if j > 0.0 { rng.gen_range(-j..=j) } else { 0.0 };
            nodes.push(NavNode {
                id: (r * cfg.cols + c) as u32,
                position: Point::new(c as f64 * cfg.spacing + dx, r as f64 * cfg.spacing + dy),
                landmarks: Vec::new(),
            });
        }
    }
    let mut edges = Vec::new();
    for r in 0..cfg.rows {
        for c in 0..cfg.cols {
            let id = (r * cfg.cols + c) as u32;
            if c + 1 < cfg.cols {
                edges.push((id, id + 1));
            }
            if r + 1 < cfg.rows {
                edges.push((id, id + cfg.cols as u32));
            }
        }
    }
    let mut graph = NavGraph {
        nodes,
        edges: edges.clone(),
        scene: Scene {
            objects: Vec::new(),
            bounds: Bounds {
                min: Point::new(-cfg.spacing, -cfg.spacing),
                max: Point::new(cfg.cols as f64 * cfg.spacing, cfg.rows as f64 * cfg.spacing),
            },
            seed,
            vocabulary: NAV_VOCABULARY.iter().map(|s| s.to_string()).collect(),
        },
    };
    edges.shuffle(&mut rng);
    for e in edges {
        if rng.gen::<f64>() < cfg.edge_drop {
            graph.edges.retain(|&x| x != e);
            if !graph.is_connected() {
                graph.edges.push(e);
            }
        }
    }
    graph.edges.sort_unstable();

    let mut labels: Vec<&str> = NAV_VOCABULARY.to_vec();
    labels.shuffle(&mut rng);
    let mut labels = labels.into_iter();
    for node in &mut graph.nodes {
        if rng.gen::<f64>() >= cfg.landmark_prob {
            continue;
        }
        let Some(label) = labels.next() else { break };
        let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let id = graph.scene.objects.len() as u32;
        graph.scene.objects.push(SceneObject {
            id,
            label: label.to_string(),
            position: Point::new(
                node.position.x + cfg.landmark_offset * angle.cos(),
                node.position.y + cfg.landmark_offset * angle.sin(),
            ),
            radius: 0.3,
            facing: rng.gen_range(0..360) as f64,
            color: world::COLORS[rng.gen_range(0..world::COLORS.len())].to_string(),
        });
        node.landmarks.push(id);
    }
    Ok(graph)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NavEpisode {
    pub id: u64,
    pub graph: NavGraph,
    pub start_node: u32,
    pub goal_node: u32,
    /// Landmark labels along the route, ending with the goal's landmark.
    pub instruction: Vec<String>,
    pub max_steps: usize,
    pub success_threshold: f64,
}

impl NavEpisode {
    pub fn instruction_text(&self) -> String {
        match self.instruction.split_last() {
            Some((last, [])) => format!("Go to the {last} and stop there."),
            Some((last, rest)) => format!(
                "Walk past the {}, then stop at the {last}.",
                rest.join(", then the ")
            ),
            None => String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NavSuiteSpec {
    pub episodes: usize,
    pub graph: GraphConfig,
    pub min_hops: usize,
    pub max_hops: usize,
    pub max_steps: usize,
    pub success_threshold: f64,
}

impl Default for NavSuiteSpec {
    fn default() -> Self {
        NavSuiteSpec {
            episodes: 50,
            graph: GraphConfig::default(),
            min_hops: 3,
            max_hops: 6,
            max_steps: 15,
            success_threshold: 3.0,
        }
    }
}

fn hop_counts(graph: &NavGraph, from: u32) -> Vec<Option<usize>> {
    let mut hops = vec![None; graph.nodes.len()];
    hops[from as usize] = Some(0);
    let mut queue = VecDeque::from([from]);
    while let Some(n) = queue.pop_front() {
        let h = hops[n as usize].expect("queued nodes have hops");
        for m in graph.neighbors(n) {
            if hops[m as usize].is_none() {
                hops[m as usize] = Some(h + 1);
                queue.push_back(m);
            }
        }
    }
    hops
}

pub fn generate_nav_episode(spec: &NavSuiteSpec, seed: u64, id: u64) -> Result<NavEpisode, NavError> {
    let mut rng = seed::rng(seed, &[tag::NAV, tag::EPISODE, id]);
    for attempt in 0..20u64 {
        let graph = generate_graph(&spec.graph, seed::derive(seed, &[tag::NAV, id, attempt]))?;
        let n = graph.nodes.len() as u32;
        for _ in 0..20 {
            let start = rng.gen_range(0..n);
            let hops = hop_counts(&graph, start);
            let goals: Vec<u32> = (0..n)
                .filter(|&g| {
                    hops[g as usize].is_some_and(|h| (spec.min_hops..=spec.max_hops).contains(&h)) && graph.landmark_label(g).is_some()
                })
                .collect();
            let Some(&goal) = goals.choose(&mut rng) else { continue };
            let path = graph.shortest_path(start, goal).ok_or(NavError::Disconnected)?;
            let instruction: Vec<String> = path[1..]
                .iter()
                .filter_map(|&p| graph.landmark_label(p).map(str::to_string))
                .collect();
            return Ok(NavEpisode {
                id,
                graph,
                start_node: start,
                goal_node: goal,
                instruction,
                max_steps: spec.max_steps,
                success_threshold: spec.success_threshold,
            });
        }
    }
    Err(NavError::NoEpisode)
}

pub fn generate_nav_suite(spec: &NavSuiteSpec, seed: u64) -> Result<Vec<NavEpisode>, NavError> {
    (0..spec.episodes as u64).map(|i| generate_nav_episode(spec, seed, i)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NavMode {
    /// Never imagine.
    #[default]
    None,
    /// Imagine candidate views when a policy majority asks for it.
    Adaptive,
    /// Imagine candidate views at every step.
    AlwaysOn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NavConfig {
    pub mode: NavMode,
    /// Policy samples per gating decision.
    #[serde(rename = "M")]
    pub m: usize,
    pub q_gate: f64,
    /// What the agent sees at its current node.
    pub observation: Sensor,
    /// What an imagined candidate view shows.
    pub imagined: Sensor,
    pub noise: NoiseModel,
    /// A landmark this close counts as reached.
    pub reach_radius: f64,
    /// A landmark within this many degrees of an edge direction is evidence for it.
    pub edge_cone: f64,
}

impl Default for NavConfig {
    fn default() -> Self {
        NavConfig {
            mode: NavMode::None,
            m: 5,
            q_gate: 0.9,
            observation: Sensor {
                fov: 360.0,
                range: 3.0,
                occlusion: true,
            },
            imagined: Sensor {
                fov: 240.0,
                range: 5.0,
                occlusion: true,
            },
            noise: NoiseModel::none(),
            reach_radius: 1.5,
            edge_cone: 30.0,
        }
    }
}

impl NavConfig {
    pub fn validate(&self) -> Result<(), NavError> {
        self.observation.validate().map_err(|e| NavError::InvalidConfig(e.to_string()))?;
        self.imagined.validate().map_err(|e| NavError::InvalidConfig(e.to_string()))?;
        self.noise.validate().map_err(|e| NavError::InvalidConfig(e.to_string()))?;
        if self.m == 0 {
            return Err(NavError::InvalidConfig("M must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.q_gate) {
            return Err(NavError::InvalidConfig("q_gate outside [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NavState {
    pub current: u32,
    pub visited: Vec<u32>,
    /// Index of the next instruction landmark not yet reached.
    pub progress: usize,
}

impl NavState {
    pub fn start(ep: &NavEpisode) -> Self {
        NavState {
            current: ep.start_node,
            visited: vec![ep.start_node],
            progress: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "action", content = "node")]
pub enum NavAction {
    Move(u32),
    Stop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StepBudget {
    pub imagined: bool,
    pub wm_calls: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Agent,
    NoCandidates,
    StepBudget,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NavRecord {
    pub episode_id: u64,
    pub mode: NavMode,
    pub visited: Vec<u32>,
    pub stopped: bool,
    pub stop_reason: StopReason,
    pub final_error: f64,
    pub steps: Vec<StepBudget>,
}

fn observe(ep: &NavEpisode, node: u32, sensor: &Sensor) -> Observation {
    let p = ep.graph.nodes[node as usize].position;
    world::render(&ep.graph.scene, &Pose::new(p.x, p.y, 0.0), sensor)
}

/// 2 for the next landmark, 1 for any later instruction landmark, else 0.
fn evidence_score(ep: &NavEpisode, progress: usize, labels: impl IntoIterator<Item = String>) -> u8 {
    let mut best = 0;
    for l in labels {
        match ep.instruction.iter().skip(progress).position(|i| *i == l) {
            Some(0) => return 2,
            Some(_) => best = 1,
            None => {}
        }
    }
    best
}

/// Advances `progress` past every instruction landmark within reach of the current node.
pub fn update_progress(ep: &NavEpisode, state: &mut NavState, cfg: &NavConfig) {
    let obs = observe(ep, state.current, &cfg.observation);
    while let Some(next) = ep.instruction.get(state.progress) {
        if obs.percepts.iter().any(|p| &p.label == next && p.distance <= cfg.reach_radius) {
            state.progress += 1;
        } else {
            break;
        }
    }
}

/// One decision: stop, or move to the best-supported neighbor.
pub fn nav_step(ep: &NavEpisode, state: &NavState, cfg: &NavConfig, seed: u64) -> Result<(NavAction, StepBudget), NavError> {
    let graph = &ep.graph;
    let here = graph.node(state.current).ok_or(NavError::UnknownNode(state.current))?.position;
    let obs = observe(ep, state.current, &cfg.observation);
    if let Some(last) = ep.instruction.last() {
        if obs.percepts.iter().any(|p| &p.label == last && p.distance <= cfg.reach_radius) {
            return Ok((NavAction::Stop, StepBudget::default()));
        }
    }
    let neighbors = graph.neighbors(state.current);
    let unvisited: Vec<u32> = neighbors.iter().copied().filter(|n| !state.visited.contains(n)).collect();
    let candidates = if unvisited.is_empty() { neighbors } else { unvisited };
    if candidates.is_empty() {
        return Ok((NavAction::Stop, StepBudget::default()));
    }

    let heading_to = |n: u32| {
        let p = graph.nodes[n as usize].position;
        (p.y - here.y).atan2(p.x - here.x).to_degrees()
    };
    let at_here = Pose::new(here.x, here.y, 0.0);
    let mut scores: Vec<u8> = candidates
        .iter()
        .map(|&c| {
            let dir = heading_to(c);
            let along: Vec<String> = obs
                .percepts
                .iter()
                .filter(|p| {
                    let w = p.world_position(&at_here);
                    geometry::bearing_to(&Pose::new(here.x, here.y, dir), w).is_ok_and(|b| b.abs() <= cfg.edge_cone)
                })
                .map(|p| p.label.clone())
                .collect();
            evidence_score(ep, state.progress, along)
        })
        .collect();

    let needed = scores.iter().all(|&s| s == 0);
    let imagine = match cfg.mode {
        NavMode::None => false,
        NavMode::AlwaysOn => true,
        NavMode::Adaptive => {
            let mut rng = seed::rng(seed, &[tag::POLICY]);
            let votes = (0..cfg.m)
                .filter(|_| {
                    let right = rng.gen::<f64>() < cfg.q_gate;
                    right == needed
                })
                .count();
            votes * 2 > cfg.m
        }
    };
    let mut budget = StepBudget::default();
    if imagine {
        let wm = WorldModel::new(cfg.imagined, cfg.noise);
        budget.imagined = true;
        for (k, &c) in candidates.iter().enumerate() {
            let p = graph.nodes[c as usize].position;
            let pose = Pose::new(p.x, p.y, heading_to(c).round());
            let (frame, _) = wm.imagine_frame(&graph.scene, &pose, 0, seed::derive(seed, &[tag::IMAGINE, c as u64]));
            budget.wm_calls += 1;
            let s = evidence_score(ep, state.progress, frame.percepts.into_iter().map(|p| p.label));
            scores[k] = scores[k].max(s);
        }
    }
    let best = scores
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
        .map(|(i, _)| i)
        .expect("candidates non-empty");
    Ok((NavAction::Move(candidates[best]), budget))
}

pub fn run_nav(ep: &NavEpisode, cfg: &NavConfig, seed: u64) -> Result<NavRecord, NavError> {
    cfg.validate()?;
    let mut state = NavState::start(ep);
    let mut steps = Vec::new();
    let mut reason = StopReason::StepBudget;
    update_progress(ep, &mut state, cfg);
    for step in 0..ep.max_steps {
        let (action, budget) = nav_step(ep, &state, cfg, seed::derive(seed, &[tag::NAV, step as u64]))?;
        steps.push(budget);
        match action {
            NavAction::Stop => {
                reason = if ep.graph.neighbors(state.current).is_empty() {
                    StopReason::NoCandidates
                } else {
                    StopReason::Agent
                };
                break;
            }
            NavAction::Move(n) => {
                state.current = n;
                state.visited.push(n);
                update_progress(ep, &mut state, cfg);
            }
        }
    }
    let end = ep.graph.nodes[state.current as usize].position;
    let goal = ep.graph.nodes[ep.goal_node as usize].position;
    Ok(NavRecord {
        episode_id: ep.id,
        mode: cfg.mode,
        visited: state.visited,
        stopped: reason != StopReason::StepBudget,
        stop_reason: reason,
        final_error: end.distance(goal),
        steps,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NavScore {
    pub episode_id: u64,
    pub ne: f64,
    pub oracle_success: bool,
    pub success: bool,
    pub spl: f64,
    pub shortest: f64,
    pub traversed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NavMetrics {
    pub episodes: usize,
    pub ne: f64,
    pub osr: f64,
    pub sr: f64,
    pub spl: f64,
    pub per_episode: Vec<NavScore>,
}

pub fn traversed_length(graph: &NavGraph, visited: &[u32]) -> f64 {
    visited.windows(2).map(|w| graph.edge_length(w[0], w[1])).sum()
}

/// Scores one record; `None` if its goal is unreachable.
pub fn score_episode(record: &NavRecord, ep: &NavEpisode) -> Option<NavScore> {
    let g = &ep.graph;
    let shortest = g.shortest_lengths(ep.start_node)[ep.goal_node as usize]?;
    let goal = g.nodes[ep.goal_node as usize].position;
    let end = record.visited.last().map_or(goal, |&n| g.nodes[n as usize].position);
    let ne = end.distance(goal);
    let success = ne <= ep.success_threshold;
    let oracle_success = record
        .visited
        .iter()
        .any(|&n| g.nodes[n as usize].position.distance(goal) <= ep.success_threshold);
    let traversed = traversed_length(g, &record.visited);
    let denom = traversed.max(shortest);
    let spl = match (success, denom > 0.0) {
        (false, _) => 0.0,
        (true, true) => shortest / denom,
        (true, false) => 1.0,
    };
    Some(NavScore {
        episode_id: ep.id,
        ne,
        oracle_success,
        success,
        spl,
        shortest,
        traversed,
    })
}

/// Means over records whose goal is reachable; others are skipped with a warning.
pub fn nav_metrics(records: &[NavRecord], episodes: &[NavEpisode]) -> NavMetrics {
    let mut per_episode = Vec::new();
    for r in records {
        let Some(ep) = episodes.iter().find(|e| e.id == r.episode_id) else {
            log::warn!("no episode {} for nav record, skipped", r.episode_id);
            continue;
        };
        match score_episode(r, ep) {
            Some(s) => per_episode.push(s),
            None => log::warn!("episode {}: goal unreachable, excluded", ep.id),
        }
    }
    let n = per_episode.len();
    let mean = |f: &dyn Fn(&NavScore) -> f64| {
        if n == 0 {
            0.0
        } else {
            per_episode.iter().map(f).sum::<f64>() / n as f64
        }
    };
    NavMetrics {
        episodes: n,
        ne: mean(&|s| s.ne),
        osr: mean(&|s| s.oracle_success as u8 as f64),
        sr: mean(&|s| s.success as u8 as f64),
        spl: mean(&|s| s.spl),
        per_episode: per_episode.clone(),
    }
}

/// Labels of landmarks an imagined view at `node`, facing away from `from`, would show.
pub fn candidate_view_labels(ep: &NavEpisode, from: u32, node: u32, sensor: &Sensor) -> BTreeSet<String> {
    let a = ep.graph.nodes[from as usize].position;
    let b = ep.graph.nodes[node as usize].position;
    let heading = (b.y - a.y).atan2(b.x - a.x).to_degrees().round();
    world::render(&ep.graph.scene, &Pose::new(b.x, b.y, heading), sensor)
        .percepts
        .into_iter()
        .map(|p| p.label)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Independent all-pairs shortest paths.
    fn floyd_warshall(g: &NavGraph) -> Vec<Vec<f64>> {
        let n = g.nodes.len();
        let mut d = vec![vec![f64::INFINITY; n]; n];
        for (i, row) in d.iter_mut().enumerate() {
            row[i] = 0.0;
        }
        for &(a, b) in &g.edges {
            let l = g.edge_length(a, b);
            d[a as usize][b as usize] = l;
            d[b as usize][a as usize] = l;
        }
        for k in 0..n {
            for i in 0..n {
                for j in 0..n {
                    if d[i][k] + d[k][j] < d[i][j] {
                        d[i][j] = d[i][k] + d[k][j];
                    }
                }
            }
        }
        d
    }

    #[test]
    fn dijkstra_matches_floyd_warshall() {
        for seed in 0..5 {
            let g = generate_graph(&GraphConfig::default(), seed).unwrap();
            assert!(g.is_connected());
            let fw = floyd_warshall(&g);
            for s in 0..g.nodes.len() {
                let dj = g.shortest_lengths(s as u32);
                for t in 0..g.nodes.len() {
                    assert!((dj[t].unwrap() - fw[s][t]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn episodes_are_valid() {
        let suite = generate_nav_suite(&NavSuiteSpec::default(), 3).unwrap();
        for ep in &suite {
            let path = ep.graph.shortest_path(ep.start_node, ep.goal_node).unwrap();
            assert!(path.windows(2).all(|w| ep.graph.adjacent(w[0], w[1])));
            assert_eq!(ep.instruction.last().map(String::as_str), ep.graph.landmark_label(ep.goal_node));
            for l in &ep.instruction {
                assert!(ep.graph.scene.by_label(l).is_some());
            }
        }
        assert_eq!(suite, generate_nav_suite(&NavSuiteSpec::default(), 3).unwrap());
    }

    #[test]
    fn zero_steps_stays_at_start() {
        let mut ep = generate_nav_episode(&NavSuiteSpec::default(), 1, 0).unwrap();
        ep.max_steps = 0;
        let r = run_nav(&ep, &NavConfig::default(), 0).unwrap();
        assert_eq!(r.visited, vec![ep.start_node]);
        assert!(!r.stopped);
        assert_eq!(r.stop_reason, StopReason::StepBudget);
    }

    #[test]
    fn imagined_evidence_picks_candidate() {
        // Find a step where the next landmark shows only in one candidate's imagined view.
        let cfg = NavConfig {
            mode: NavMode::AlwaysOn,
            ..Default::default()
        };
        let mut checked = 0;
        for id in 0..40 {
            let ep = generate_nav_episode(&NavSuiteSpec::default(), 9, id).unwrap();
            let mut state = NavState::start(&ep);
            update_progress(&ep, &mut state, &cfg);
            let Some(next) = ep.instruction.get(state.progress) else { continue };
            let obs = observe(&ep, state.current, &cfg.observation);
            if obs.labels().any(|l| ep.instruction.contains(&l.to_string())) {
                continue;
            }
            let cands = ep.graph.neighbors(state.current);
            let seeing: Vec<u32> = cands
                .iter()
                .copied()
                .filter(|&c| candidate_view_labels(&ep, state.current, c, &cfg.imagined).contains(next))
                .collect();
            let later: Vec<u32> = cands
                .iter()
                .copied()
                .filter(|&c| {
                    let v = candidate_view_labels(&ep, state.current, c, &cfg.imagined);
                    ep.instruction.iter().any(|l| v.contains(l))
                })
                .collect();
            if seeing.len() == 1 && later.len() == 1 {
                let (action, budget) = nav_step(&ep, &state, &cfg, 0).unwrap();
                assert_eq!(action, NavAction::Move(seeing[0]));
                assert_eq!(budget.wm_calls as usize, cands.len());
                checked += 1;
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn blind_agent_takes_lowest_unvisited() {
        let cfg = NavConfig::default();
        for id in 0..20 {
            let ep = generate_nav_episode(&NavSuiteSpec::default(), 4, id).unwrap();
            let state = NavState::start(&ep);
            let obs = observe(&ep, state.current, &cfg.observation);
            if obs.labels().any(|l| ep.instruction.contains(&l.to_string())) {
                continue;
            }
            let (action, budget) = nav_step(&ep, &state, &cfg, 0).unwrap();
            assert_eq!(action, NavAction::Move(ep.graph.neighbors(state.current)[0]));
            assert!(!budget.imagined);
        }
    }

    #[test]
    fn stops_at_final_landmark() {
        let ep = generate_nav_episode(&NavSuiteSpec::default(), 2, 0).unwrap();
        let state = NavState {
            current: ep.goal_node,
            visited: vec![ep.goal_node],
            progress: ep.instruction.len() - 1,
        };
        let (action, _) = nav_step(&ep, &state, &NavConfig::default(), 0).unwrap();
        assert_eq!(action, NavAction::Stop);
    }

    fn two_node_episode() -> NavEpisode {
        let scene = Scene {
            objects: vec![SceneObject {
                id: 0,
                label: "piano".into(),
                position: Point::new(5.0, 0.0),
                radius: 0.3,
                facing: 0.0,
                color: "red".into(),
            }],
            bounds: Bounds {
                min: Point::new(-1.0, -1.0),
                max: Point::new(6.0, 1.0),
            },
            seed: 0,
            vocabulary: vec!["piano".into()],
        };
        NavEpisode {
            id: 0,
            graph: NavGraph {
                nodes: vec![
                    NavNode { id: 0, position: Point::new(0.0, 0.0), landmarks: vec![] },
                    NavNode { id: 1, position: Point::new(4.0, 0.0), landmarks: vec![0] },
                ],
                edges: vec![(0, 1)],
                scene,
            },
            start_node: 0,
            goal_node: 1,
            instruction: vec!["piano".into()],
            max_steps: 15,
            success_threshold: 3.0,
        }
    }

    #[test]
    fn adjacent_goal_reached_in_one_move() {
        let ep = two_node_episode();
        let r = run_nav(&ep, &NavConfig::default(), 0).unwrap();
        assert_eq!(r.visited, vec![0, 1]);
        assert!(r.stopped);
        assert_eq!(r.stop_reason, StopReason::Agent);
        let s = score_episode(&r, &ep).unwrap();
        assert!(s.success);
        assert_eq!(s.spl, 1.0);
    }

    proptest! {
        #[test]
        fn metric_ordering_and_path_validity(seed in 0u64..1000, mode in 0usize..3) {
            let spec = NavSuiteSpec { episodes: 4, ..Default::default() };
            let suite = generate_nav_suite(&spec, seed).unwrap();
            let cfg = NavConfig {
                mode: [NavMode::None, NavMode::Adaptive, NavMode::AlwaysOn][mode],
                noise: NoiseModel { p_drop: 0.2, p_label: 0.1, sigma_pos: 0.0 },
                ..Default::default()
            };
            let records: Vec<NavRecord> = suite.iter().map(|e| run_nav(e, &cfg, seed).unwrap()).collect();
            for (r, e) in records.iter().zip(&suite) {
                prop_assert!(r.visited.windows(2).all(|w| e.graph.adjacent(w[0], w[1])));
                prop_assert!(r.visited.len() <= e.max_steps + 1);
                let s = score_episode(r, e).unwrap();
                prop_assert!(s.spl <= s.success as u8 as f64 + 1e-12);
                prop_assert!((0.0..=1.0).contains(&s.spl));
            }
            let m = nav_metrics(&records, &suite);
            prop_assert!(m.spl <= m.sr + 1e-12 && m.sr <= m.osr + 1e-12);
        }
    }
}
