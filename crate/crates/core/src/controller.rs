//! The imagination control loop and the strategies it is compared against.
//!
//! Adaptive control samples the policy `M` times, imagines only when a strict
//! majority asks for it, renders one trajectory per distinct proposed plan,
//! keeps the best-scored trajectory and answers from the start views plus that
//! trajectory. Always-on control runs a fixed spatial beam search instead.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{AnswerDistribution, Backends, Decision, PolicySample, QueryContext};
use crate::geometry::{self, ActionEntry, ActionKind, ActionPlan, Pose};
use crate::seed::{self, tag};
use crate::tasks::{self, Episode, ErrorTag, QuestionCategory};
use crate::world::{ImaginedTrajectory, NoiseModel, Observation, WorldError, WorldModel};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControllerError {
    #[error("no policy samples to vote on")]
    NoSamples,
    #[error("no candidate trajectories to select from")]
    NoCandidates,
    #[error("plan pool requested but the vote was skip")]
    VoteWasSkip,
    #[error("every call_wm sample carried an empty plan")]
    EmptyPool,
    #[error("invalid controller config: {field}: {message}")]
    InvalidConfig { field: &'static str, message: String },
    #[error("run logs are not aligned: {0}")]
    Misaligned(String),
    #[error("{0} is not a per-episode strategy")]
    NotRunnable(StrategyKind),
    #[error(transparent)]
    World(#[from] WorldError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    None,
    AlwaysOn,
    GatingOnly,
    Adaptive,
    UpperBound,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 5] = [
        StrategyKind::None,
        StrategyKind::AlwaysOn,
        StrategyKind::GatingOnly,
        StrategyKind::Adaptive,
        StrategyKind::UpperBound,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StrategyKind::None => "none",
            StrategyKind::AlwaysOn => "always_on",
            StrategyKind::GatingOnly => "gating_only",
            StrategyKind::Adaptive => "adaptive",
            StrategyKind::UpperBound => "upper_bound",
        }
    }
}

impl std::fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieRule {
    #[default]
    SkipOnTie,
    CallOnTie,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BeamConfig {
    pub branch_actions: Vec<ActionEntry>,
    pub width: usize,
    pub depth: usize,
    pub keyframe_top_k: usize,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig {
            branch_actions: vec![
                ActionEntry::new(ActionKind::TurnLeft, 5),
                ActionEntry::new(ActionKind::TurnRight, 5),
                ActionEntry::new(ActionKind::MoveForward, 4),
            ],
            width: 2,
            depth: 3,
            keyframe_top_k: 2,
        }
    }
}

impl BeamConfig {
    /// Frames rendered by a full search: `|A| * (1 + B * (D - 1))`, with the
    /// beam width capped by the first level's size.
    pub fn frames_rendered(&self) -> usize {
        let a = self.branch_actions.len();
        if self.depth == 0 || a == 0 {
            return 0;
        }
        let mut total = a;
        let mut beams = a.min(self.width);
        for _ in 1..self.depth {
            total += beams * a;
            beams = (beams * a).min(self.width);
        }
        total
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControllerConfig {
    /// Policy samples per episode.
    #[serde(rename = "M")]
    pub m: usize,
    pub tie_rule: TieRule,
    pub dedup_plans: bool,
    pub beam: BeamConfig,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            m: 5,
            tie_rule: TieRule::SkipOnTie,
            dedup_plans: true,
            beam: BeamConfig::default(),
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<(), ControllerError> {
        let bad = |field, message: &str| {
            Err(ControllerError::InvalidConfig {
                field,
                message: message.to_string(),
            })
        };
        if self.m == 0 {
            return bad("M", "must be at least 1");
        }
        if self.beam.width == 0 {
            return bad("beam.width", "must be at least 1");
        }
        if self.beam.depth == 0 {
            return bad("beam.depth", "must be at least 1");
        }
        if self.beam.branch_actions.is_empty() {
            return bad("beam.branch_actions", "must not be empty");
        }
        if self.beam.branch_actions.iter().any(|a| a.value == 0) {
            return bad("beam.branch_actions", "values must be positive");
        }
        Ok(())
    }
}

/// Pseudo-token prices for one model call.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostModel {
    pub fixed_per_call: f64,
    pub per_image: f64,
    pub per_char: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            fixed_per_call: 50.0,
            per_image: 256.0,
            per_char: 0.25,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Policy,
    Verifier,
    Answerer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelCall {
    pub role: Role,
    pub images: u32,
    pub chars: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Budget {
    pub wm_calls: u32,
    pub imagined_frames: u32,
    pub pseudo_tokens: u64,
    /// Not logged: it would make run logs non-reproducible.
    #[serde(skip)]
    pub wall_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub plan: ActionPlan,
    pub frames: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<u8>,
    /// Corruption events in this trajectory.
    pub corruptions: usize,
    /// Reached the answerer.
    pub used: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub episode_id: u64,
    pub category: QuestionCategory,
    pub error_tag: ErrorTag,
    pub strategy: StrategyKind,
    pub seed: u64,
    /// The start views alone do not hold the required evidence.
    pub needed: bool,
    pub samples: Vec<PolicySample>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vote: Option<Decision>,
    pub trajectories: Vec<TrajectoryRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selected_plan: Option<ActionPlan>,
    /// Imagined frames shown to the answerer.
    pub imagined_in_answer: usize,
    pub answer: AnswerDistribution,
    pub predicted: usize,
    pub truth: usize,
    pub correct: bool,
    pub calls: Vec<ModelCall>,
    pub budget: Budget,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fallback: Option<String>,
}

impl RunRecord {
    /// The world model was consulted.
    pub fn invoked(&self) -> bool {
        self.budget.wm_calls > 0
    }
}

/// Pseudo-token and call totals for a record under `cost`.
pub fn account(record: &RunRecord, cost: &CostModel) -> Budget {
    let tokens: f64 = record
        .calls
        .iter()
        .map(|c| cost.fixed_per_call + cost.per_image * c.images as f64 + (cost.per_char * c.chars as f64).round())
        .sum();
    Budget {
        pseudo_tokens: tokens.round() as u64,
        ..record.budget
    }
}

/// Strict majority for imagination under the skip-on-tie rule.
pub fn gate(samples: &[PolicySample]) -> Result<Decision, ControllerError> {
    gate_with(samples, TieRule::SkipOnTie)
}

pub fn gate_with(samples: &[PolicySample], tie: TieRule) -> Result<Decision, ControllerError> {
    if samples.is_empty() {
        return Err(ControllerError::NoSamples);
    }
    let calls = samples.iter().filter(|s| s.decision == Decision::CallWm).count();
    let skips = samples.len() - calls;
    Ok(match calls.cmp(&skips) {
        std::cmp::Ordering::Greater => Decision::CallWm,
        std::cmp::Ordering::Less => Decision::Skip,
        std::cmp::Ordering::Equal => match tie {
            TieRule::SkipOnTie => Decision::Skip,
            TieRule::CallOnTie => Decision::CallWm,
        },
    })
}

/// Plans proposed by call_wm samples, first occurrence order, duplicates removed.
pub fn plan_pool(samples: &[PolicySample]) -> Result<Vec<ActionPlan>, ControllerError> {
    plan_pool_with(samples, TieRule::SkipOnTie, true)
}

pub fn plan_pool_with(samples: &[PolicySample], tie: TieRule, dedup: bool) -> Result<Vec<ActionPlan>, ControllerError> {
    if gate_with(samples, tie)? != Decision::CallWm {
        return Err(ControllerError::VoteWasSkip);
    }
    let mut pool: Vec<ActionPlan> = Vec::new();
    for s in samples.iter().filter(|s| s.decision == Decision::CallWm && !s.plan.is_empty()) {
        if !dedup || !pool.contains(&s.plan) {
            pool.push(s.plan.clone());
        }
    }
    if pool.is_empty() {
        return Err(ControllerError::EmptyPool);
    }
    Ok(pool)
}

/// A verifier score and the length of the trajectory it was given to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Scored {
    pub score: u8,
    pub frames: usize,
}

/// Highest score; ties go to fewer frames, then to the lower index.
pub fn select_trajectory(scored: &[Scored]) -> Result<usize, ControllerError> {
    scored
        .iter()
        .enumerate()
        .min_by_key(|(i, s)| (std::cmp::Reverse(s.score), s.frames, *i))
        .map(|(i, _)| i)
        .ok_or(ControllerError::NoCandidates)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpperBound {
    pub accuracy: f64,
    pub per_episode: Vec<(u64, bool)>,
}

/// Per-episode union of the correctness of two strategies.
pub fn upper_bound(records_none: &[RunRecord], records_always: &[RunRecord]) -> Result<UpperBound, ControllerError> {
    let none: BTreeMap<u64, bool> = records_none.iter().map(|r| (r.episode_id, r.correct)).collect();
    let always: BTreeMap<u64, bool> = records_always.iter().map(|r| (r.episode_id, r.correct)).collect();
    if none.len() != records_none.len() || always.len() != records_always.len() {
        return Err(ControllerError::Misaligned("duplicate episode ids".into()));
    }
    if none.keys().ne(always.keys()) {
        return Err(ControllerError::Misaligned("episode id sets differ".into()));
    }
    let per_episode: Vec<(u64, bool)> = none.iter().map(|(&id, &c)| (id, c || always[&id])).collect();
    let hits = per_episode.iter().filter(|(_, c)| *c).count();
    let accuracy = if per_episode.is_empty() {
        0.0
    } else {
        hits as f64 / per_episode.len() as f64
    };
    Ok(UpperBound { accuracy, per_episode })
}

struct BeamFrame {
    path: Vec<ActionEntry>,
    pose: Pose,
    frame: Observation,
    corruptions: usize,
    score: u8,
}

/// Runs strategies over episodes. Stateless across episodes.
#[derive(Debug, Clone)]
pub struct Controller {
    pub config: ControllerConfig,
    pub backends: Backends,
    pub noise: NoiseModel,
    pub cost: CostModel,
}

struct Trace {
    calls: Vec<ModelCall>,
    budget: Budget,
}

impl Trace {
    fn new() -> Self {
        Trace {
            calls: Vec::new(),
            budget: Budget::default(),
        }
    }

    fn call(&mut self, role: Role, images: usize, ep: &Episode) {
        self.calls.push(ModelCall {
            role,
            images: images as u32,
            chars: ep.question.chars().count() as u32,
        });
    }
}

impl Controller {
    pub fn new(config: ControllerConfig, backends: Backends, noise: NoiseModel, cost: CostModel) -> Self {
        Controller {
            config,
            backends,
            noise,
            cost,
        }
    }

    fn world(&self, ep: &Episode) -> WorldModel {
        WorldModel::new(ep.sensor, self.noise)
    }

    pub fn run(&self, ep: &Episode, strategy: StrategyKind, seed: u64) -> Result<RunRecord, ControllerError> {
        match strategy {
            StrategyKind::None => Ok(self.run_none(ep, seed)),
            StrategyKind::AlwaysOn => self.run_always_on(ep, seed),
            StrategyKind::GatingOnly => self.run_gating_only(ep, seed),
            StrategyKind::Adaptive => self.run_adaptive(ep, seed),
            StrategyKind::UpperBound => Err(ControllerError::NotRunnable(strategy)),
        }
    }

    fn blank(&self, ep: &Episode, strategy: StrategyKind, seed: u64, start: &[Observation]) -> RunRecord {
        RunRecord {
            episode_id: ep.id,
            category: ep.category,
            error_tag: ep.error_tag,
            strategy,
            seed,
            needed: !tasks::sufficient(ep, start),
            samples: Vec::new(),
            vote: None,
            trajectories: Vec::new(),
            selected_plan: None,
            imagined_in_answer: 0,
            answer: AnswerDistribution::uniform(ep.k().max(1)),
            predicted: 0,
            truth: ep.truth_index,
            correct: false,
            calls: Vec::new(),
            budget: Budget::default(),
            fallback: None,
        }
    }

    /// Answers from `frames` and finishes the record.
    fn finish(&self, mut rec: RunRecord, ep: &Episode, start: &[Observation], frames: &[Observation], mut trace: Trace, seed: u64, t0: Instant) -> RunRecord {
        let ctx = QueryContext { episode: ep, start_frames: start };
        trace.call(Role::Answerer, frames.len(), ep);
        rec.answer = match self.backends.answerer.answer(&ctx, frames, seed::derive(seed, &[tag::ANSWER])) {
            Ok(a) if a.scores.len() == ep.k() => a,
            Ok(a) => {
                rec.fallback = Some(format!("answerer returned {} scores for {} choices", a.scores.len(), ep.k()));
                AnswerDistribution::uniform(ep.k())
            }
            Err(e) => {
                log::warn!("episode {}: answerer failed: {e}", ep.id);
                rec.fallback = Some(format!("answerer failed: {e}"));
                AnswerDistribution::uniform(ep.k())
            }
        };
        rec.imagined_in_answer = frames.len() - start.len();
        rec.predicted = rec.answer.argmax();
        rec.correct = rec.predicted == ep.truth_index;
        rec.calls = trace.calls;
        rec.budget = trace.budget;
        rec.budget = account(&rec, &self.cost);
        rec.budget.wall_time = t0.elapsed().as_secs_f64();
        rec
    }

    pub fn run_none(&self, ep: &Episode, seed: u64) -> RunRecord {
        let t0 = Instant::now();
        let start = ep.start_frames();
        let rec = self.blank(ep, StrategyKind::None, seed, &start);
        self.finish(rec, ep, &start, &start, Trace::new(), seed, t0)
    }

    pub fn run_adaptive(&self, ep: &Episode, seed: u64) -> Result<RunRecord, ControllerError> {
        self.run_gated(ep, seed, self.config.m, StrategyKind::Adaptive)
    }

    /// Adaptive control with a single policy sample.
    pub fn run_gating_only(&self, ep: &Episode, seed: u64) -> Result<RunRecord, ControllerError> {
        self.run_gated(ep, seed, 1, StrategyKind::GatingOnly)
    }

    fn run_gated(&self, ep: &Episode, seed: u64, m: usize, strategy: StrategyKind) -> Result<RunRecord, ControllerError> {
        self.config.validate()?;
        let t0 = Instant::now();
        let start = ep.start_frames();
        let ctx = QueryContext { episode: ep, start_frames: &start };
        let mut rec = self.blank(ep, strategy, seed, &start);
        let mut trace = Trace::new();

        let mut samples = Vec::with_capacity(m);
        for i in 0..m {
            trace.call(Role::Policy, start.len(), ep);
            match self.backends.policy.sample(&ctx, seed::derive(seed, &[tag::POLICY, i as u64])) {
                Ok(s) => samples.push(s),
                Err(e) => {
                    log::warn!("episode {}: policy failed: {e}", ep.id);
                    rec.fallback = Some(format!("policy failed: {e}"));
                    rec.samples = samples;
                    rec.vote = Some(Decision::Skip);
                    return Ok(self.finish(rec, ep, &start, &start, trace, seed, t0));
                }
            }
        }
        let mut vote = gate_with(&samples, self.config.tie_rule)?;
        let pool = match vote {
            Decision::CallWm => match plan_pool_with(&samples, self.config.tie_rule, self.config.dedup_plans) {
                Ok(p) => p,
                Err(ControllerError::EmptyPool) => {
                    rec.fallback = Some("empty plan pool, skipped imagination".into());
                    vote = Decision::Skip;
                    Vec::new()
                }
                Err(e) => return Err(e),
            },
            Decision::Skip => Vec::new(),
        };
        rec.samples = samples;
        rec.vote = Some(vote);
        if pool.is_empty() {
            return Ok(self.finish(rec, ep, &start, &start, trace, seed, t0));
        }

        let world = self.world(ep);
        let mut trajectories: Vec<ImaginedTrajectory> = Vec::with_capacity(pool.len());
        for (j, plan) in pool.iter().enumerate() {
            let traj = world.imagine(&ep.scene, ep.start_pose, plan, seed::derive(seed, &[tag::IMAGINE, j as u64]))?;
            trace.budget.wm_calls += 1;
            trace.budget.imagined_frames += traj.frames.len() as u32;
            trajectories.push(traj);
        }

        // A lone candidate wins by default, so the verifier is not consulted.
        let mut scores: Vec<Option<u8>> = vec![None; trajectories.len()];
        if trajectories.len() > 1 {
            for (j, traj) in trajectories.iter().enumerate() {
                trace.call(Role::Verifier, start.len() + traj.frames.len(), ep);
                scores[j] = Some(
                    self.backends
                        .verifier
                        .score(&ctx, traj, seed::derive(seed, &[tag::VERIFY, j as u64]))
                        .unwrap_or_else(|e| {
                            log::warn!("episode {}: verifier failed: {e}", ep.id);
                            rec.fallback = Some(format!("verifier failed: {e}"));
                            0
                        }),
                );
            }
        }
        let scored: Vec<Scored> = trajectories
            .iter()
            .zip(&scores)
            .map(|(t, s)| Scored {
                score: s.unwrap_or(0),
                frames: t.frames.len(),
            })
            .collect();
        let best = select_trajectory(&scored)?;

        rec.trajectories = trajectories
            .iter()
            .zip(&scores)
            .enumerate()
            .map(|(j, (t, s))| TrajectoryRecord {
                plan: t.plan.clone(),
                frames: t.frames.len(),
                score: *s,
                corruptions: t.corruption_log.len(),
                used: j == best,
            })
            .collect();
        rec.selected_plan = Some(pool[best].clone());
        let mut frames = start.clone();
        frames.extend(trajectories.swap_remove(best).frames);
        Ok(self.finish(rec, ep, &start, &frames, trace, seed, t0))
    }

    /// Renders beam-search frames in expansion order, stopping after `limit`
    /// frames or `depth` levels.
    fn beam_frames(&self, ep: &Episode, start: &[Observation], seed: u64, depth: usize, limit: usize, trace: &mut Trace) -> Vec<BeamFrame> {
        let beam = &self.config.beam;
        let ctx = QueryContext { episode: ep, start_frames: start };
        let world = self.world(ep);
        let mut out: Vec<BeamFrame> = Vec::new();
        let mut frontier: Vec<(Vec<ActionEntry>, Pose)> = vec![(Vec::new(), ep.start_pose)];
        'levels: for _ in 0..depth {
            let level_start = out.len();
            for (path, pose) in &frontier {
                for &action in &beam.branch_actions {
                    if out.len() >= limit {
                        break 'levels;
                    }
                    let r = out.len() as u64;
                    let next = geometry::apply_repeated(*pose, action);
                    let (frame, events) = world.imagine_frame(&ep.scene, &next, 0, seed::derive(seed, &[tag::BEAM, r]));
                    trace.budget.wm_calls += 1;
                    trace.budget.imagined_frames += 1;
                    let mut p = path.clone();
                    p.push(action);
                    let single = ImaginedTrajectory {
                        plan: ActionPlan::new(p.clone()),
                        frames: vec![frame],
                        corruption_log: events,
                    };
                    trace.call(Role::Verifier, start.len() + 1, ep);
                    let score = self
                        .backends
                        .verifier
                        .score(&ctx, &single, seed::derive(seed, &[tag::VERIFY, tag::BEAM, r]))
                        .unwrap_or(0);
                    let corruptions = single.corruption_log.len();
                    out.push(BeamFrame {
                        path: p,
                        pose: next,
                        frame: single.frames.into_iter().next().expect("one frame"),
                        corruptions,
                        score,
                    });
                }
            }
            let mut level: Vec<usize> = (level_start..out.len()).collect();
            level.sort_by_key(|&i| (std::cmp::Reverse(out[i].score), i));
            frontier = level
                .into_iter()
                .take(beam.width)
                .map(|i| (out[i].path.clone(), out[i].pose))
                .collect();
            if frontier.is_empty() {
                break;
            }
        }
        out
    }

    fn beam_record(&self, rec: &mut RunRecord, frames: &[BeamFrame], used: &[usize]) {
        rec.trajectories = frames
            .iter()
            .enumerate()
            .map(|(i, f)| TrajectoryRecord {
                plan: ActionPlan::new(f.path.clone()),
                frames: 1,
                score: Some(f.score),
                corruptions: f.corruptions,
                used: used.contains(&i),
            })
            .collect();
    }

    /// Spatial beam search; the best-scored frames become keyframes.
    pub fn run_always_on(&self, ep: &Episode, seed: u64) -> Result<RunRecord, ControllerError> {
        self.config.validate()?;
        let t0 = Instant::now();
        let start = ep.start_frames();
        let mut rec = self.blank(ep, StrategyKind::AlwaysOn, seed, &start);
        let mut trace = Trace::new();
        let rendered = self.beam_frames(ep, &start, seed, self.config.beam.depth, usize::MAX, &mut trace);
        let mut order: Vec<usize> = (0..rendered.len()).collect();
        order.sort_by_key(|&i| (std::cmp::Reverse(rendered[i].score), i));
        let mut keys: Vec<usize> = order.into_iter().take(self.config.beam.keyframe_top_k).collect();
        keys.sort_unstable();
        self.beam_record(&mut rec, &rendered, &keys);
        let mut frames = start.clone();
        frames.extend(keys.iter().map(|&i| rendered[i].frame.clone()));
        Ok(self.finish(rec, ep, &start, &frames, trace, seed, t0))
    }

    /// Answers from the start views plus the first `n` beam-search frames.
    pub fn run_fixed_views(&self, ep: &Episode, seed: u64, n: usize) -> Result<RunRecord, ControllerError> {
        self.config.validate()?;
        let t0 = Instant::now();
        let start = ep.start_frames();
        let mut rec = self.blank(ep, StrategyKind::AlwaysOn, seed, &start);
        let mut trace = Trace::new();
        let rendered = self.beam_frames(ep, &start, seed, usize::MAX, n, &mut trace);
        let used: Vec<usize> = (0..rendered.len()).collect();
        self.beam_record(&mut rec, &rendered, &used);
        let mut frames = start.clone();
        frames.extend(rendered.into_iter().map(|f| f.frame));
        Ok(self.finish(rec, ep, &start, &frames, trace, seed, t0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::{AnswerConfig, PolicyConfig, VerifierConfig};
    use crate::tasks::{generate_suite, CategoryMix, SuiteSpec};
    use proptest::prelude::*;

    fn sample(d: Decision, plan: &[(ActionKind, u32)]) -> PolicySample {
        let plan = ActionPlan::new(plan.iter().map(|&(k, v)| ActionEntry::new(k, v)).collect());
        match d {
            Decision::Skip => PolicySample::skip(""),
            Decision::CallWm => PolicySample::call(plan, ""),
        }
    }

    fn skip() -> PolicySample {
        sample(Decision::Skip, &[])
    }

    fn call(v: u32) -> PolicySample {
        sample(Decision::CallWm, &[(ActionKind::TurnLeft, v)])
    }

    #[test]
    fn gate_examples() {
        assert_eq!(gate(&[skip(), skip(), call(1), call(1), call(1)]).unwrap(), Decision::CallWm);
        assert_eq!(gate(&vec![skip(); 5]).unwrap(), Decision::Skip);
        assert_eq!(gate(&[skip(), skip(), call(1), call(1)]).unwrap(), Decision::Skip);
        assert_eq!(gate_with(&[skip(), call(1)], TieRule::CallOnTie).unwrap(), Decision::CallWm);
        assert_eq!(gate(&[]), Err(ControllerError::NoSamples));
    }

    #[test]
    fn pool_examples() {
        let pool = plan_pool(&[call(3), call(3), call(3), call(4), call(5)]).unwrap();
        assert_eq!(pool.len(), 3);
        assert_eq!(pool[0].entries[0].value, 3);
        assert_eq!(pool[2].entries[0].value, 5);
        assert_eq!(plan_pool(&vec![skip(); 5]), Err(ControllerError::VoteWasSkip));
        // Minority skip plans never contribute.
        assert_eq!(plan_pool(&[call(2), call(2), skip()]).unwrap().len(), 1);
        assert_eq!(plan_pool_with(&[call(2), call(2)], TieRule::SkipOnTie, false).unwrap().len(), 2);
        let empty = PolicySample::call(ActionPlan::empty(), "");
        assert_eq!(plan_pool(&[empty.clone(), empty]), Err(ControllerError::EmptyPool));
    }

    #[test]
    fn selection_examples() {
        let s = |v: &[(u8, usize)]| v.iter().map(|&(score, frames)| Scored { score, frames }).collect::<Vec<_>>();
        assert_eq!(select_trajectory(&s(&[(7, 4), (7, 2), (3, 5)])).unwrap(), 1);
        assert_eq!(select_trajectory(&s(&[(2, 3)])).unwrap(), 0);
        assert_eq!(select_trajectory(&s(&[(0, 3), (0, 1), (0, 1)])).unwrap(), 1);
        assert_eq!(select_trajectory(&[]), Err(ControllerError::NoCandidates));
    }

    fn record(id: u64, correct: bool) -> RunRecord {
        RunRecord {
            episode_id: id,
            category: QuestionCategory::EgoM,
            error_tag: ErrorTag::VD,
            strategy: StrategyKind::None,
            seed: 0,
            needed: false,
            samples: vec![],
            vote: None,
            trajectories: vec![],
            selected_plan: None,
            imagined_in_answer: 0,
            answer: AnswerDistribution::uniform(4),
            predicted: 0,
            truth: 0,
            correct,
            calls: vec![],
            budget: Budget::default(),
            fallback: None,
        }
    }

    #[test]
    fn upper_bound_examples() {
        let none: Vec<_> = [true, false, true, false].iter().enumerate().map(|(i, &c)| record(i as u64, c)).collect();
        let always: Vec<_> = [false, true, true, false].iter().enumerate().map(|(i, &c)| record(i as u64, c)).collect();
        assert_eq!(upper_bound(&none, &always).unwrap().accuracy, 0.75);
        let subset: Vec<_> = [true, false, false, false].iter().enumerate().map(|(i, &c)| record(i as u64, c)).collect();
        assert_eq!(upper_bound(&none, &subset).unwrap().accuracy, 0.5);
        assert!(matches!(upper_bound(&none, &always[..3]), Err(ControllerError::Misaligned(_))));
    }

    #[test]
    fn account_formula() {
        let mut r = record(0, true);
        r.calls = vec![ModelCall {
            role: Role::Answerer,
            images: 1,
            chars: 200,
        }];
        assert_eq!(account(&r, &CostModel::default()).pseudo_tokens, 356);
    }

    fn controller(policy: PolicyConfig, c: f64, noise: NoiseModel, amp: u8) -> Controller {
        Controller::new(
            ControllerConfig::default(),
            Backends::synthetic(policy, VerifierConfig { noise_amplitude: amp }, AnswerConfig { competence: c }),
            noise,
            CostModel::default(),
        )
    }

    fn suite(n: usize, mix: CategoryMix, seed: u64) -> Vec<Episode> {
        generate_suite(
            &SuiteSpec {
                episodes: n,
                mix,
                ..Default::default()
            },
            seed,
        )
        .unwrap()
    }

    #[test]
    fn perfect_adaptive_ego_act() {
        let ctl = controller(PolicyConfig::perfect(), 1.0, NoiseModel::none(), 0);
        for ep in suite(20, CategoryMix::only(QuestionCategory::EgoAct), 3) {
            let r = ctl.run_adaptive(&ep, 11).unwrap();
            assert!(r.correct);
            assert_eq!(r.budget.wm_calls, 1);
            assert!(r.trajectories.iter().filter(|t| t.used).count() == 1);
        }
    }

    #[test]
    fn skip_path_has_no_imagination() {
        let ctl = controller(PolicyConfig::perfect(), 1.0, NoiseModel::none(), 0);
        for ep in suite(20, CategoryMix::only(QuestionCategory::Pers), 4) {
            let r = ctl.run_adaptive(&ep, 1).unwrap();
            assert_eq!(r.vote, Some(Decision::Skip));
            assert_eq!((r.budget.wm_calls, r.budget.imagined_frames, r.imagined_in_answer), (0, 0, 0));
            assert!(r.selected_plan.is_none());
            let always = ctl.run_always_on(&ep, 1).unwrap();
            assert!(r.budget.pseudo_tokens < always.budget.pseudo_tokens);
        }
    }

    #[test]
    fn beam_frame_counts() {
        let mut ctl = controller(PolicyConfig::default(), 0.8, NoiseModel::none(), 1);
        let eps = suite(10, CategoryMix::default(), 5);
        for ep in &eps {
            let r = ctl.run_always_on(ep, 2).unwrap();
            assert_eq!(r.budget.wm_calls, 15);
            assert_eq!(r.imagined_in_answer, 2);
            assert!(r.samples.is_empty());
        }
        ctl.config.beam.depth = 1;
        ctl.config.beam.width = 1;
        assert_eq!(ctl.run_always_on(&eps[0], 2).unwrap().budget.wm_calls, 3);
        assert_eq!(ctl.config.beam.frames_rendered(), 3);
        assert_eq!(BeamConfig::default().frames_rendered(), 15);
    }

    #[test]
    fn fixed_views_extend_beam_prefix() {
        let ctl = controller(PolicyConfig::default(), 0.8, NoiseModel::none(), 1);
        let ep = &suite(1, CategoryMix::default(), 6)[0];
        let a = ctl.run_fixed_views(ep, 4, 5).unwrap();
        let b = ctl.run_fixed_views(ep, 4, 20).unwrap();
        assert_eq!(a.budget.wm_calls, 5);
        assert_eq!(b.budget.wm_calls, 20);
        assert_eq!(a.trajectories[..], b.trajectories[..5]);
        let zero = ctl.run_fixed_views(ep, 4, 0).unwrap();
        assert_eq!(zero.answer, ctl.run_none(ep, 4).answer);
    }

    #[test]
    fn none_never_imagines_and_lo_is_uniform() {
        let ctl = controller(PolicyConfig::perfect(), 1.0, NoiseModel::none(), 0);
        for ep in suite(60, CategoryMix::only(QuestionCategory::Goal), 8) {
            let r = ctl.run_none(&ep, 0);
            assert_eq!(r.budget.wm_calls, 0);
            assert!(r.trajectories.is_empty());
            if ep.error_tag == ErrorTag::LO {
                assert!(r.answer.scores.iter().all(|&s| (s - 0.25).abs() < 1e-12));
            }
        }
    }

    #[test]
    fn gating_only_uses_single_plan_unverified() {
        let ctl = controller(PolicyConfig { q_plan: 0.0, ..PolicyConfig::perfect() }, 1.0, NoiseModel::none(), 0);
        for ep in suite(10, CategoryMix::only(QuestionCategory::EgoAct), 9) {
            let r = ctl.run_gating_only(&ep, 3).unwrap();
            assert_eq!(r.samples.len(), 1);
            assert_eq!(r.selected_plan.as_ref(), Some(&r.samples[0].plan));
            assert!(r.calls.iter().all(|c| c.role != Role::Verifier));
        }
    }

    #[test]
    fn records_are_deterministic() {
        let ctl = controller(PolicyConfig::default(), 0.8, NoiseModel { p_drop: 0.2, p_label: 0.1, sigma_pos: 0.05 }, 1);
        for ep in suite(15, CategoryMix::default(), 10) {
            for s in [StrategyKind::None, StrategyKind::Adaptive, StrategyKind::AlwaysOn, StrategyKind::GatingOnly] {
                let a = serde_json::to_string(&ctl.run(&ep, s, 99).unwrap()).unwrap();
                let b = serde_json::to_string(&ctl.run(&ep, s, 99).unwrap()).unwrap();
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn config_validation() {
        let mut c = ControllerConfig::default();
        c.m = 0;
        assert!(matches!(c.validate(), Err(ControllerError::InvalidConfig { field: "M", .. })));
        let json = serde_json::to_value(ControllerConfig::default()).unwrap();
        assert_eq!(json["M"], 5);
    }

    proptest! {
        #[test]
        fn gate_matches_count(calls in 0usize..8, skips in 0usize..8) {
            prop_assume!(calls + skips > 0);
            let mut v = vec![call(1); calls];
            v.extend(vec![skip(); skips]);
            let d = gate(&v).unwrap();
            prop_assert_eq!(d == Decision::CallWm, calls > skips);
        }

        #[test]
        fn upper_bound_dominates(bits in prop::collection::vec((any::<bool>(), any::<bool>()), 1..40)) {
            let none: Vec<_> = bits.iter().enumerate().map(|(i, b)| record(i as u64, b.0)).collect();
            let always: Vec<_> = bits.iter().enumerate().map(|(i, b)| record(i as u64, b.1)).collect();
            let ub = upper_bound(&none, &always).unwrap().accuracy;
            let acc = |r: &[RunRecord]| r.iter().filter(|x| x.correct).count() as f64 / r.len() as f64;
            prop_assert!(ub >= acc(&none) && ub >= acc(&always));
        }

        #[test]
        fn selected_is_a_maximum(scores in prop::collection::vec((0u8..=9, 1usize..6), 1..10)) {
            let s: Vec<Scored> = scores.iter().map(|&(score, frames)| Scored { score, frames }).collect();
            let i = select_trajectory(&s).unwrap();
            prop_assert!(s.iter().all(|x| x.score <= s[i].score));
        }
    }
}
