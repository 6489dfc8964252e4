//! Calibrated stand-ins for the three model roles. Each is a pure function of
//! its inputs and seed.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{AnswerBackend, AnswerDistribution, BackendError, PolicyBackend, PolicySample, QueryContext, VerifierBackend};
use crate::geometry::{self, ActionEntry, ActionKind, ActionPlan, PlanLimits, Point, Pose};
use crate::seed::{self, tag};
use crate::tasks::{self, Episode, QuestionCategory, Sector, Template, ViewpointPredicate};
use crate::world::{ImaginedTrajectory, Observation};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyConfig {
    /// Probability the gate decision matches the true need for imagination.
    pub q_gate: f64,
    /// Probability the plan is left unperturbed.
    pub q_plan: f64,
    /// Per-sample probability of nudging one plan entry by one unit.
    pub sample_jitter: f64,
    pub limits: PlanLimits,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            q_gate: 0.9,
            q_plan: 0.9,
            sample_jitter: 0.1,
            limits: PlanLimits::default(),
        }
    }
}

impl PolicyConfig {
    pub fn perfect() -> Self {
        PolicyConfig {
            q_gate: 1.0,
            q_plan: 1.0,
            sample_jitter: 0.0,
            ..Default::default()
        }
    }

    /// Returns the offending field name and a message.
    pub fn validate(&self) -> Result<(), (&'static str, String)> {
        for (name, p) in [("q_gate", self.q_gate), ("q_plan", self.q_plan), ("sample_jitter", self.sample_jitter)] {
            if !(0.0..=1.0).contains(&p) {
                return Err((name, format!("{p} outside [0, 1]")));
            }
        }
        if self.limits.max_entries == 0 || self.limits.max_value == 0 {
            return Err(("limits", "plan limits must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct VerifierConfig {
    pub noise_amplitude: u8,
}

impl Default for VerifierConfig {
    fn default() -> Self {
        VerifierConfig { noise_amplitude: 1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnswerConfig {
    /// Probability of reasoning correctly over resolved evidence.
    pub competence: f64,
}

impl Default for AnswerConfig {
    fn default() -> Self {
        AnswerConfig { competence: 0.8 }
    }
}

impl AnswerConfig {
    pub fn validate(&self) -> Result<(), (&'static str, String)> {
        if !(0.0..=1.0).contains(&self.competence) {
            return Err(("competence", format!("{} outside [0, 1]", self.competence)));
        }
        Ok(())
    }
}

fn turn_kind(left: bool) -> ActionKind {
    if left {
        ActionKind::TurnLeft
    } else {
        ActionKind::TurnRight
    }
}

/// Appends `count` units of `kind`, merging into a trailing entry of the same
/// kind and splitting at the per-entry cap.
fn push_units(entries: &mut Vec<ActionEntry>, kind: ActionKind, mut count: u32, limits: &PlanLimits) {
    if let Some(last) = entries.last_mut() {
        if last.kind == kind && last.value < limits.max_value {
            let add = count.min(limits.max_value - last.value);
            last.value += add;
            count -= add;
        }
    }
    while count > 0 {
        let v = count.min(limits.max_value);
        entries.push(ActionEntry::new(kind, v));
        count -= v;
    }
}

fn units(deg: f64) -> u32 {
    (deg.abs() / geometry::TURN_STEP_DEG).round() as u32
}

/// Greedy discretization: face the target position, walk to it, then turn to
/// the target heading, always turning in the same direction.
fn plan_to_pose(start: Pose, target: &Pose, limits: &PlanLimits) -> ActionPlan {
    let mut entries = Vec::new();
    let mut direction: Option<bool> = None;
    let steps = (start.position().distance(target.position()) / geometry::FORWARD_STEP).round() as u32;
    if steps > 0 {
        let b = geometry::bearing_to(&start, target.position()).unwrap_or(0.0);
        let k = units(b);
        if k > 0 {
            direction = Some(b > 0.0);
            push_units(&mut entries, turn_kind(b > 0.0), k, limits);
        }
        push_units(&mut entries, ActionKind::MoveForward, steps, limits);
    }
    let here = geometry::final_pose(start, &entries);
    let delta = geometry::angle_diff_deg(target.heading_deg(), here.heading_deg());
    let k = units(delta);
    if k > 0 {
        let left = delta > 0.0;
        match direction {
            Some(d) if d != left => push_units(&mut entries, turn_kind(d), 40 - k, limits),
            _ => push_units(&mut entries, turn_kind(left), k, limits),
        }
    }
    entries.truncate(limits.max_entries);
    ActionPlan::new(entries)
}

fn turn_toward(start: Pose, point: Point, limits: &PlanLimits) -> ActionPlan {
    let b = geometry::bearing_to(&start, point).unwrap_or(0.0);
    let mut entries = Vec::new();
    push_units(&mut entries, turn_kind(b > 0.0), units(b).max(1), limits);
    ActionPlan::new(entries)
}

/// The plan a competent policy would imagine for this episode.
pub fn goal_directed_plan(episode: &Episode, limits: &PlanLimits) -> ActionPlan {
    let start = episode.start_pose;
    match episode.evidence.required_viewpoints.first() {
        Some(ViewpointPredicate::AtPose { pose, .. }) => plan_to_pose(start, pose, limits),
        Some(ViewpointPredicate::Facing { point, .. }) => turn_toward(start, *point, limits),
        None => match &episode.evidence.reference_plan {
            Some(p) => p.clone(),
            None => ActionPlan::new(vec![ActionEntry::new(ActionKind::TurnLeft, 5)]),
        },
    }
}

fn perturb(plan: &ActionPlan, rng: &mut impl Rng) -> ActionPlan {
    let has_turn = plan.entries.iter().any(|e| e.kind.is_turn());
    let mut entries = plan.entries.clone();
    if has_turn && rng.gen_bool(0.5) {
        for e in &mut entries {
            e.kind = e.kind.mirrored();
        }
    } else if entries.len() > 1 {
        entries.pop();
    } else if entries.first().is_some_and(|e| e.value > 1) {
        entries[0].value /= 2;
    } else {
        entries = vec![ActionEntry::new(ActionKind::TurnLeft, 5)];
    }
    ActionPlan::new(entries)
}

fn jitter(plan: &mut ActionPlan, limits: &PlanLimits, rng: &mut impl Rng) {
    if plan.entries.is_empty() {
        return;
    }
    let i = rng.gen_range(0..plan.entries.len());
    let e = &mut plan.entries[i];
    let up = rng.gen_bool(0.5);
    if (up && e.value < limits.max_value) || e.value == 1 {
        e.value += 1;
    } else {
        e.value -= 1;
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SyntheticPolicy {
    pub cfg: PolicyConfig,
}

impl SyntheticPolicy {
    pub fn new(cfg: PolicyConfig) -> Self {
        SyntheticPolicy { cfg }
    }
}

impl PolicyBackend for SyntheticPolicy {
    fn sample(&self, ctx: &QueryContext<'_>, seed: u64) -> Result<PolicySample, BackendError> {
        let mut rng = seed::rng(seed, &[tag::POLICY]);
        let enough = tasks::sufficient(ctx.episode, ctx.start_frames);
        let judged_right = rng.gen::<f64>() < self.cfg.q_gate;
        if enough == judged_right {
            return Ok(PolicySample::skip("the given views already show what the question needs"));
        }
        let mut plan = goal_directed_plan(ctx.episode, &self.cfg.limits);
        if rng.gen::<f64>() >= self.cfg.q_plan {
            plan = perturb(&plan, &mut rng);
        }
        if rng.gen::<f64>() < self.cfg.sample_jitter {
            jitter(&mut plan, &self.cfg.limits, &mut rng);
        }
        if plan.validate(&self.cfg.limits).is_err() {
            plan = goal_directed_plan(ctx.episode, &self.cfg.limits);
        }
        Ok(PolicySample::call(plan, "the answer depends on views not yet observed"))
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SyntheticVerifier {
    pub cfg: VerifierConfig,
}

impl SyntheticVerifier {
    pub fn new(cfg: VerifierConfig) -> Self {
        SyntheticVerifier { cfg }
    }

    /// Score before noise.
    pub fn base_score(ctx: &QueryContext<'_>, trajectory: &ImaginedTrajectory) -> u8 {
        if trajectory.frames.is_empty() {
            return 0;
        }
        let ev = &ctx.episode.evidence;
        let start_labels: Vec<&str> = ctx.start_frames.iter().flat_map(|f| f.labels()).collect();
        let missing_labels: Vec<&String> = ev
            .required_labels
            .iter()
            .filter(|l| !start_labels.contains(&l.as_str()))
            .collect();
        let missing_views: Vec<&ViewpointPredicate> = ev
            .required_viewpoints
            .iter()
            .filter(|v| !ctx.start_frames.iter().any(|f| v.satisfied_by(&f.viewpoint)))
            .collect();
        let missing = missing_labels.len() + missing_views.len();
        let revealed = if missing == 0 {
            0.0
        } else {
            let frames = &trajectory.frames;
            let labels = missing_labels
                .iter()
                .filter(|l| frames.iter().any(|f| f.find(l).is_some()))
                .count();
            let views = missing_views
                .iter()
                .filter(|v| frames.iter().any(|f| v.satisfied_by(&f.viewpoint)))
                .count();
            (labels + views) as f64 / missing as f64
        };
        let scene = &ctx.episode.scene;
        let (mut relevant, mut corrupted) = (0usize, 0usize);
        for p in trajectory.frames.iter().flat_map(|f| &f.percepts) {
            let true_label = scene.object(p.source_id).map(|o| o.label.as_str());
            if ev.required_labels.contains(&p.label) || true_label.is_some_and(|l| ev.required_labels.contains(l)) {
                relevant += 1;
                corrupted += p.corrupted as usize;
            }
        }
        let penalty = if relevant == 0 {
            0.0
        } else {
            0.5 * corrupted as f64 / relevant as f64
        };
        (9.0 * (revealed - penalty).max(0.0)).round() as u8
    }
}

impl VerifierBackend for SyntheticVerifier {
    fn score(&self, ctx: &QueryContext<'_>, trajectory: &ImaginedTrajectory, seed: u64) -> Result<u8, BackendError> {
        if trajectory.frames.is_empty() {
            return Ok(0);
        }
        let base = Self::base_score(ctx, trajectory) as i32;
        let amp = self.cfg.noise_amplitude as i32;
        let noise = if amp > 0 {
            seed::rng(seed, &[tag::VERIFY]).gen_range(-amp..=amp)
        } else {
            0
        };
        Ok((base + noise).clamp(0, 9) as u8)
    }
}

/// A label resolved to a world-frame position and facing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Resolved {
    pub position: Point,
    pub facing: f64,
}

/// Frames whose viewpoint the answerer may use to place percepts in the world.
/// The second view of an ego-motion question has an unknown pose, and the
/// first view of an object-motion question shows the old scene.
fn known_pose(category: QuestionCategory, index: usize) -> bool {
    match category {
        QuestionCategory::EgoM => index != 1,
        QuestionCategory::ObjM => index != 0,
        _ => true,
    }
}

/// Most recent percept of each required label across the usable frames.
/// `None` if any required label is missing.
pub fn resolve_evidence(episode: &Episode, frames: &[Observation]) -> Option<BTreeMap<String, Resolved>> {
    let mut out = BTreeMap::new();
    for label in &episode.evidence.required_labels {
        let hit = frames
            .iter()
            .enumerate()
            .rev()
            .filter(|(i, _)| known_pose(episode.category, *i))
            .find_map(|(_, f)| f.find(label).map(|p| (f, p)))?;
        let (frame, p) = hit;
        out.insert(
            label.clone(),
            Resolved {
                position: p.world_position(&frame.viewpoint),
                facing: p.world_facing(&frame.viewpoint),
            },
        );
    }
    Some(out)
}

fn predict(episode: &Episode, frames: &[Observation]) -> Option<usize> {
    let facts = resolve_evidence(episode, frames)?;
    let origin = frames.first()?.viewpoint;
    let choice: String = match &episode.template {
        Template::ActionConsequence { target, plan } => {
            let post = geometry::final_pose(origin, &plan.entries);
            Sector::of(geometry::bearing_to(&post, facts.get(target)?.position).ok()?).choice().into()
        }
        Template::GoalAiming { target, candidates } => {
            let t = facts.get(target)?.position;
            let (best, off) = candidates
                .iter()
                .enumerate()
                .filter_map(|(i, p)| {
                    let end = geometry::final_pose(origin, &p.entries);
                    geometry::bearing_to(&end, t).ok().map(|b| (i, b.abs()))
                })
                .min_by(|a, b| a.1.total_cmp(&b.1))?;
            if off > episode.sensor.fov / 6.0 {
                return None;
            }
            return Some(best);
        }
        Template::Perspective { anchor, subject } => {
            let a = facts.get(anchor)?;
            let frame = Pose::new(a.position.x, a.position.y, a.facing);
            tasks::side_choice(geometry::bearing_to(&frame, facts.get(subject)?.position).ok()?).into()
        }
        Template::EgoMotion { landmark, .. } => {
            let l = facts.get(landmark)?.position;
            let second = frames.get(1)?.find(landmark)?;
            let first = (geometry::bearing_to(&origin, l).ok()?, origin.position().distance(l));
            tasks::infer_ego_motion(first, (second.bearing, second.distance)).into()
        }
        Template::ObjectMotion { object, .. } => {
            let before = frames.first()?.find(object)?.world_position(&origin);
            tasks::classify_displacement(&origin, before, facts.get(object)?.position).into()
        }
    };
    episode.choices.iter().position(|c| *c == choice)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SyntheticAnswerer {
    pub cfg: AnswerConfig,
}

impl SyntheticAnswerer {
    pub fn new(cfg: AnswerConfig) -> Self {
        SyntheticAnswerer { cfg }
    }
}

impl AnswerBackend for SyntheticAnswerer {
    fn answer(&self, ctx: &QueryContext<'_>, frames: &[Observation], seed: u64) -> Result<AnswerDistribution, BackendError> {
        let ep = ctx.episode;
        let k = ep.k();
        if k == 0 {
            return Err(BackendError::Invalid("episode has no choices".into()));
        }
        let competent = seed::rng(seed, &[tag::ANSWER]).gen::<f64>() < self.cfg.competence;
        let views_met = ep
            .evidence
            .required_viewpoints
            .iter()
            .all(|v| frames.iter().any(|f| v.satisfied_by(&f.viewpoint)));
        if !competent || !views_met {
            return Ok(AnswerDistribution::uniform(k));
        }
        Ok(match predict(ep, frames) {
            Some(i) => AnswerDistribution::one_hot(k, i),
            None => AnswerDistribution::uniform(k),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::{generate_suite, sufficient, SuiteSpec};
    use crate::world::WorldModel;
    use proptest::prelude::*;

    fn suite(n: usize, seed: u64) -> Vec<Episode> {
        generate_suite(
            &SuiteSpec {
                episodes: n,
                ..Default::default()
            },
            seed,
        )
        .unwrap()
    }

    fn ctx<'a>(ep: &'a Episode, start: &'a [Observation]) -> QueryContext<'a> {
        QueryContext { episode: ep, start_frames: start }
    }

    #[test]
    fn perfect_policy_gate_matches_need() {
        let policy = SyntheticPolicy::new(PolicyConfig::perfect());
        for ep in suite(150, 5) {
            let start = ep.start_frames();
            let s = policy.sample(&ctx(&ep, &start), 1).unwrap();
            let need = !sufficient(&ep, &start);
            assert_eq!(s.decision == super::super::Decision::CallWm, need, "episode {}", ep.id);
            if !need {
                assert!(s.plan.is_empty());
            }
        }
    }

    #[test]
    fn greedy_plan_reaches_required_heading() {
        let start = Pose::new(0.0, 0.0, 0.0);
        let target = Pose::new(0.0, 0.0, 90.0);
        let plan = plan_to_pose(start, &target, &PlanLimits::default());
        let end = geometry::final_pose(start, &plan.entries);
        assert!(geometry::angle_diff_deg(end.heading_deg(), 90.0).abs() <= 4.5);

        let target = Pose::new(1.0, 1.0, 200.0);
        let plan = plan_to_pose(start, &target, &PlanLimits::default());
        plan.validate(&PlanLimits::default()).unwrap();
        let end = geometry::final_pose(start, &plan.entries);
        assert!(end.position().distance(target.position()) <= 0.2);
        assert!(geometry::angle_diff_deg(end.heading_deg(), 200.0).abs() <= 4.5);
        let turns: Vec<_> = plan.entries.iter().filter(|e| e.kind.is_turn()).map(|e| e.kind).collect();
        assert!(turns.windows(2).all(|w| w[0] == w[1]), "not monotone: {plan}");
    }

    #[test]
    fn perfect_pipeline_answers_everything() {
        let policy = SyntheticPolicy::new(PolicyConfig::perfect());
        let answerer = SyntheticAnswerer::new(AnswerConfig { competence: 1.0 });
        let wm = WorldModel::default();
        for ep in suite(300, 9) {
            let start = ep.start_frames();
            let c = ctx(&ep, &start);
            let s = policy.sample(&c, 0).unwrap();
            let mut frames = start.clone();
            if !s.plan.is_empty() {
                frames.extend(wm.imagine(&ep.scene, ep.start_pose, &s.plan, 0).unwrap().frames);
            }
            assert!(sufficient(&ep, &frames), "episode {} {:?}", ep.id, ep.category);
            let a = answerer.answer(&c, &frames, 3).unwrap();
            assert_eq!(a.argmax(), ep.truth_index, "episode {} {:?}", ep.id, ep.category);
        }
    }

    #[test]
    fn answerer_without_evidence_is_uniform() {
        let answerer = SyntheticAnswerer::new(AnswerConfig { competence: 1.0 });
        let ep = suite(20, 3).into_iter().find(|e| e.category == QuestionCategory::EgoAct).unwrap();
        let start = ep.start_frames();
        let a = answerer.answer(&ctx(&ep, &start), &start, 0).unwrap();
        assert!(a.scores.iter().all(|&s| (s - 0.25).abs() < 1e-12));
    }

    #[test]
    fn corrupted_position_flips_answer() {
        let answerer = SyntheticAnswerer::new(AnswerConfig { competence: 1.0 });
        let ep = suite(40, 12)
            .into_iter()
            .find(|e| e.category == QuestionCategory::Pers)
            .unwrap();
        let Template::Perspective { anchor, subject } = &ep.template else { unreachable!() };
        let given = ep.start_frames();
        let mut start = given.clone();
        let c = ctx(&ep, &given);
        assert_eq!(answerer.answer(&c, &start, 0).unwrap().argmax(), ep.truth_index);
        // Reflect the subject across the anchor's facing axis, in world coordinates.
        let viewpoint = start[0].viewpoint;
        let a = start[0].find(anchor).unwrap().clone();
        let apos = a.world_position(&viewpoint);
        let axis = a.world_facing(&viewpoint).to_radians();
        let p = start[0].percepts.iter_mut().find(|p| &p.label == subject).unwrap();
        let s = p.world_position(&viewpoint);
        let (ux, uy) = (axis.cos(), axis.sin());
        let (dx, dy) = (s.x - apos.x, s.y - apos.y);
        let along = dx * ux + dy * uy;
        let mirrored = Point::new(apos.x + 2.0 * along * ux - dx, apos.y + 2.0 * along * uy - dy);
        p.bearing = geometry::bearing_to(&viewpoint, mirrored).unwrap();
        p.distance = viewpoint.position().distance(mirrored);
        p.corrupted = true;
        let got = answerer.answer(&c, &start, 0).unwrap().argmax();
        assert_ne!(got, ep.truth_index);
    }

    #[test]
    fn verifier_examples() {
        let (ep, mut traj, target) = suite(60, 21)
            .into_iter()
            .filter(|e| e.category == QuestionCategory::EgoAct)
            .find_map(|ep| {
                let plan = goal_directed_plan(&ep, &PlanLimits::default());
                let traj = WorldModel::default().imagine(&ep.scene, ep.start_pose, &plan, 0).unwrap();
                let target = ep.evidence.required_labels.iter().next().unwrap().clone();
                traj.frames.iter().any(|f| f.find(&target).is_some()).then_some((ep, traj, target))
            })
            .unwrap();
        let start = ep.start_frames();
        let c = ctx(&ep, &start);
        let v = SyntheticVerifier::new(VerifierConfig { noise_amplitude: 0 });
        assert_eq!(v.score(&c, &ImaginedTrajectory::empty(), 0).unwrap(), 0);
        assert_eq!(v.score(&c, &traj, 0).unwrap(), 9);

        // Half of the relevant percepts corrupted: round(9 * (1 - 0.25)) = 7.
        let mut relevant: Vec<&mut crate::world::Percept> = traj
            .frames
            .iter_mut()
            .flat_map(|f| f.percepts.iter_mut())
            .filter(|p| p.label == target)
            .collect();
        let extra = relevant[0].clone();
        for p in relevant.iter_mut() {
            p.corrupted = true;
        }
        let n = relevant.len();
        let last = traj.frames.last_mut().unwrap();
        for _ in 0..n {
            let mut clean = extra.clone();
            clean.corrupted = false;
            last.percepts.push(clean);
        }
        assert_eq!(v.score(&c, &traj, 0).unwrap(), 7);
    }

    proptest! {
        #[test]
        fn verifier_stays_in_range(seed in any::<u64>(), amp in 0u8..=12, idx in 0usize..30) {
            let eps = suite(30, 77);
            let ep = &eps[idx];
            let start = ep.start_frames();
            let plan = goal_directed_plan(ep, &PlanLimits::default());
            let traj = WorldModel::new(ep.sensor, crate::world::NoiseModel { p_drop: 0.3, p_label: 0.3, sigma_pos: 0.1 })
                .imagine(&ep.scene, ep.start_pose, &plan, seed)
                .unwrap();
            let s = SyntheticVerifier::new(VerifierConfig { noise_amplitude: amp }).score(&ctx(ep, &start), &traj, seed).unwrap();
            prop_assert!(s <= 9);
        }

        #[test]
        fn emitted_plans_are_valid(seed in any::<u64>(), idx in 0usize..30, q in 0.0f64..=1.0) {
            let eps = suite(30, 78);
            let ep = &eps[idx];
            let start = ep.start_frames();
            let policy = SyntheticPolicy::new(PolicyConfig { q_gate: q, q_plan: q, sample_jitter: 1.0 - q, ..Default::default() });
            let s = policy.sample(&ctx(ep, &start), seed).unwrap();
            prop_assert!(s.plan.validate(&PlanLimits::default()).is_ok());
            prop_assert_eq!(s.decision == super::super::Decision::Skip, s.plan.is_empty());
        }

        #[test]
        fn answers_are_normalized(seed in any::<u64>(), idx in 0usize..30, c in 0.0f64..=1.0) {
            let eps = suite(30, 79);
            let ep = &eps[idx];
            let start = ep.start_frames();
            let a = SyntheticAnswerer::new(AnswerConfig { competence: c }).answer(&ctx(ep, &start), &start, seed).unwrap();
            prop_assert!((a.scores.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert_eq!(a.scores.len(), ep.k());
        }
    }
}
