//! Synthetic 2D scenes, the ground-truth egocentric renderer, and the world
//! model that turns an action plan into imagined frames.
//!
//! Objects are discs. A percept is produced for every object inside the
//! sensor cone and range that is not hidden behind a nearer disc. The world
//! model renders the same way, after optionally corrupting each object per
//! frame (drop, then relabel, then positional jitter).

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{self, ActionPlan, PlanError, Point, Pose, EPS};
use crate::seed::{self, tag};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WorldError {
    #[error("vocabulary has {vocabulary} labels, {requested} objects requested")]
    VocabularyTooSmall { vocabulary: usize, requested: usize },
    #[error("could not place object {index} after {attempts} attempts")]
    PlacementFailed { index: usize, attempts: usize },
    #[error("invalid scene config: {0}")]
    InvalidConfig(String),
    #[error("invalid sensor: {0}")]
    InvalidSensor(String),
    #[error("invalid noise model: {0}")]
    InvalidNoise(String),
    #[error(transparent)]
    Plan(#[from] PlanError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub id: u32,
    pub label: String,
    pub position: Point,
    pub radius: f64,
    /// World-frame facing direction, degrees in `[0, 360)`.
    pub facing: f64,
    pub color: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub min: Point,
    pub max: Point,
}

impl Bounds {
    pub fn contains(&self, p: Point) -> bool {
        p.x >= self.min.x && p.x <= self.max.x && p.y >= self.min.y && p.y <= self.max.y
    }

    pub fn width(&self) -> f64 {
        self.max.x - self.min.x
    }

    pub fn height(&self) -> f64 {
        self.max.y - self.min.y
    }
}

impl Default for Bounds {
    fn default() -> Self {
        Bounds {
            min: Point::new(-5.0, -5.0),
            max: Point::new(5.0, 5.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub objects: Vec<SceneObject>,
    pub bounds: Bounds,
    pub seed: u64,
    /// Label pool the scene was drawn from; the world model relabels from it.
    pub vocabulary: Vec<String>,
}

impl Scene {
    pub fn object(&self, id: u32) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.id == id)
    }

    pub fn by_label(&self, label: &str) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.label == label)
    }

    /// Smallest pairwise center distance, `None` with fewer than two objects.
    pub fn min_pairwise_distance(&self) -> Option<f64> {
        let mut best: Option<f64> = None;
        for (i, a) in self.objects.iter().enumerate() {
            for b in &self.objects[i + 1..] {
                let d = a.position.distance(b.position);
                best = Some(best.map_or(d, |m| m.min(d)));
            }
        }
        best
    }

    /// True if `p` lies at least `clearance` outside every object disc.
    pub fn is_free(&self, p: Point, clearance: f64) -> bool {
        self.objects
            .iter()
            .all(|o| o.position.distance(p) >= o.radius + clearance)
    }
}

pub const DEFAULT_VOCABULARY: [&str; 12] = [
    "chair", "table", "sofa", "lamp", "plant", "bookshelf", "television", "bed", "desk", "cabinet", "trash bin",
    "refrigerator",
];

pub const COLORS: [&str; 6] = ["red", "green", "blue", "yellow", "white", "black"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneGenConfig {
    pub n_objects: usize,
    pub bounds: Bounds,
    pub min_separation: f64,
    pub vocabulary: Vec<String>,
    pub radius_min: f64,
    pub radius_max: f64,
    pub max_attempts: usize,
}

impl Default for SceneGenConfig {
    fn default() -> Self {
        SceneGenConfig {
            n_objects: 8,
            bounds: Bounds::default(),
            min_separation: 0.8,
            vocabulary: DEFAULT_VOCABULARY.iter().map(|s| s.to_string()).collect(),
            radius_min: 0.15,
            radius_max: 0.35,
            max_attempts: 500,
        }
    }
}

impl SceneGenConfig {
    pub fn validate(&self) -> Result<(), WorldError> {
        if self.vocabulary.len() < self.n_objects {
            return Err(WorldError::VocabularyTooSmall {
                vocabulary: self.vocabulary.len(),
                requested: self.n_objects,
            });
        }
        if !(self.radius_min > 0.0 && self.radius_min <= self.radius_max) {
            return Err(WorldError::InvalidConfig("need 0 < radius_min <= radius_max".into()));
        }
        if self.radius_max > self.min_separation / 2.0 {
            return Err(WorldError::InvalidConfig(
                "radius_max must not exceed min_separation / 2".into(),
            ));
        }
        if self.bounds.width() <= 2.0 * self.radius_max || self.bounds.height() <= 2.0 * self.radius_max {
            return Err(WorldError::InvalidConfig("bounds too small".into()));
        }
        let unique: BTreeSet<&String> = self.vocabulary.iter().collect();
        if unique.len() != self.vocabulary.len() {
            return Err(WorldError::InvalidConfig("vocabulary labels must be unique".into()));
        }
        Ok(())
    }
}

pub fn generate_scene(cfg: &SceneGenConfig, seed: u64) -> Result<Scene, WorldError> {
    cfg.validate()?;
    let mut rng = seed::rng(seed, &[tag::SCENE]);
    let mut labels = cfg.vocabulary.clone();
    labels.shuffle(&mut rng);
    let mut objects: Vec<SceneObject> = Vec::with_capacity(cfg.n_objects);
    for index in 0..cfg.n_objects {
        let radius = rng.gen_range(cfg.radius_min..=cfg.radius_max);
        let b = &cfg.bounds;
        let placed = (0..cfg.max_attempts).find_map(|_| {
            let p = Point::new(
                rng.gen_range(b.min.x + radius..=b.max.x - radius),
                rng.gen_range(b.min.y + radius..=b.max.y - radius),
            );
            objects
                .iter()
                .all(|o| o.position.distance(p) >= cfg.min_separation)
                .then_some(p)
        });
        let Some(position) = placed else {
            return Err(WorldError::PlacementFailed {
                index,
                attempts: cfg.max_attempts,
            });
        };
        objects.push(SceneObject {
            id: index as u32,
            label: labels[index].clone(),
            position,
            radius,
            facing: (rng.gen_range(0..360) as f64),
            color: COLORS[rng.gen_range(0..COLORS.len())].to_string(),
        });
    }
    Ok(Scene {
        objects,
        bounds: cfg.bounds,
        seed,
        vocabulary: cfg.vocabulary.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Sensor {
    /// Total field of view, degrees.
    pub fov: f64,
    pub range: f64,
    pub occlusion: bool,
}

impl Default for Sensor {
    fn default() -> Self {
        Sensor {
            fov: 90.0,
            range: 5.0,
            occlusion: true,
        }
    }
}

impl Sensor {
    pub fn validate(&self) -> Result<(), WorldError> {
        if !(self.fov > 0.0 && self.fov <= 360.0) {
            return Err(WorldError::InvalidSensor(format!("fov {} outside (0, 360]", self.fov)));
        }
        if !(self.range > 0.0) {
            return Err(WorldError::InvalidSensor(format!("range {} must be positive", self.range)));
        }
        Ok(())
    }

    pub fn half_fov(&self) -> f64 {
        self.fov / 2.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Percept {
    pub label: String,
    pub color: String,
    /// Relative bearing, degrees, positive to the left.
    pub bearing: f64,
    pub distance: f64,
    /// Object facing relative to the viewer heading, degrees in `(-180, 180]`.
    pub facing: f64,
    /// Ground-truth object id. Oracle and analysis use only.
    pub source_id: u32,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub corrupted: bool,
}

impl Percept {
    /// World-frame position implied by this percept seen from `viewpoint`.
    pub fn world_position(&self, viewpoint: &Pose) -> Point {
        geometry::point_at(viewpoint, self.bearing, self.distance)
    }

    pub fn world_facing(&self, viewpoint: &Pose) -> f64 {
        (viewpoint.heading_deg() + self.facing).rem_euclid(360.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub viewpoint: Pose,
    pub percepts: Vec<Percept>,
    pub imagined: bool,
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub corrupted_ids: BTreeSet<u32>,
}

impl Observation {
    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.percepts.iter().map(|p| p.label.as_str())
    }

    pub fn find(&self, label: &str) -> Option<&Percept> {
        self.percepts.iter().find(|p| p.label == label)
    }

    /// Equality of everything except the `imagined` flag.
    pub fn same_content(&self, other: &Observation) -> bool {
        self.viewpoint == other.viewpoint && self.percepts == other.percepts && self.corrupted_ids == other.corrupted_ids
    }
}

struct Disc<'a> {
    id: u32,
    label: &'a str,
    color: &'a str,
    position: Point,
    radius: f64,
    facing: f64,
    corrupted: bool,
}

impl<'a> From<&'a SceneObject> for Disc<'a> {
    fn from(o: &'a SceneObject) -> Self {
        Disc {
            id: o.id,
            label: &o.label,
            color: &o.color,
            position: o.position,
            radius: o.radius,
            facing: o.facing,
            corrupted: false,
        }
    }
}

fn render_discs(discs: &[Disc<'_>], pose: &Pose, sensor: &Sensor) -> Vec<Percept> {
    let polar: Vec<Option<(f64, f64)>> = discs
        .iter()
        .map(|d| {
            let dist = pose.position().distance(d.position);
            geometry::bearing_to(pose, d.position).ok().map(|b| (b, dist))
        })
        .collect();
    let half = sensor.half_fov();
    let mut out = Vec::new();
    for (i, d) in discs.iter().enumerate() {
        let Some((bearing, dist)) = polar[i] else { continue };
        if dist > sensor.range + EPS || (sensor.fov < 360.0 && bearing.abs() > half + EPS) {
            continue;
        }
        if sensor.occlusion {
            let hidden = discs.iter().enumerate().any(|(j, occ)| {
                let Some((ob, od)) = polar[j] else { return false };
                if j == i || od >= dist {
                    return false;
                }
                let half_width = (occ.radius / od).min(1.0).asin().to_degrees();
                geometry::angle_diff_deg(ob, bearing).abs() <= half_width
            });
            if hidden {
                continue;
            }
        }
        out.push(Percept {
            label: d.label.to_string(),
            color: d.color.to_string(),
            bearing,
            distance: dist,
            facing: geometry::normalize_signed_deg(d.facing - pose.heading_deg()),
            source_id: d.id,
            corrupted: d.corrupted,
        });
    }
    out
}

/// Ground-truth egocentric view.
pub fn render(scene: &Scene, pose: &Pose, sensor: &Sensor) -> Observation {
    let discs: Vec<Disc<'_>> = scene.objects.iter().map(Disc::from).collect();
    Observation {
        viewpoint: *pose,
        percepts: render_discs(&discs, pose, sensor),
        imagined: false,
        corrupted_ids: BTreeSet::new(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct NoiseModel {
    pub p_drop: f64,
    pub p_label: f64,
    pub sigma_pos: f64,
}

impl NoiseModel {
    pub fn none() -> Self {
        NoiseModel::default()
    }

    pub fn validate(&self) -> Result<(), WorldError> {
        for (name, p) in [("p_drop", self.p_drop), ("p_label", self.p_label)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(WorldError::InvalidNoise(format!("{name} = {p} outside [0, 1]")));
            }
        }
        if !(self.sigma_pos >= 0.0 && self.sigma_pos.is_finite()) {
            return Err(WorldError::InvalidNoise(format!("sigma_pos = {} must be >= 0", self.sigma_pos)));
        }
        Ok(())
    }

    pub fn is_zero(&self) -> bool {
        self.p_drop == 0.0 && self.p_label == 0.0 && self.sigma_pos == 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Corruption {
    Drop,
    Relabel { from: String, to: String },
    Jitter { dx: f64, dy: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionEvent {
    pub frame: usize,
    pub object_id: u32,
    #[serde(flatten)]
    pub kind: Corruption,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImaginedTrajectory {
    pub plan: ActionPlan,
    pub frames: Vec<Observation>,
    pub corruption_log: Vec<CorruptionEvent>,
}

impl ImaginedTrajectory {
    pub fn empty() -> Self {
        ImaginedTrajectory {
            plan: ActionPlan::empty(),
            frames: Vec::new(),
            corruption_log: Vec::new(),
        }
    }
}

/// The world model: a renderer plus a per-frame corruption process.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct WorldModel {
    pub sensor: Sensor,
    pub noise: NoiseModel,
}

impl WorldModel {
    pub fn new(sensor: Sensor, noise: NoiseModel) -> Self {
        WorldModel { sensor, noise }
    }

    /// One imagined frame per plan entry.
    pub fn imagine(&self, scene: &Scene, start: Pose, plan: &ActionPlan, seed: u64) -> Result<ImaginedTrajectory, WorldError> {
        let poses = geometry::simulate_plan(start, plan)?;
        let mut frames = Vec::with_capacity(poses.len());
        let mut log = Vec::new();
        for (k, pose) in poses.iter().enumerate() {
            let (frame, events) = self.imagine_frame(scene, pose, k, seed);
            frames.push(frame);
            log.extend(events);
        }
        Ok(ImaginedTrajectory {
            plan: plan.clone(),
            frames,
            corruption_log: log,
        })
    }

    /// Renders a single imagined frame at `pose`; corruption is keyed by
    /// `(seed, frame_index, object id)`.
    pub fn imagine_frame(&self, scene: &Scene, pose: &Pose, frame_index: usize, seed: u64) -> (Observation, Vec<CorruptionEvent>) {
        if self.noise.is_zero() {
            let mut obs = render(scene, pose, &self.sensor);
            obs.imagined = true;
            return (obs, Vec::new());
        }
        let mut discs: Vec<Disc<'_>> = Vec::with_capacity(scene.objects.len());
        let mut events = Vec::new();
        let mut dropped = BTreeSet::new();
        for o in &scene.objects {
            let mut rng = seed::rng(seed, &[tag::IMAGINE, frame_index as u64, o.id as u64]);
            let mut disc = Disc::from(o);
            let kind = if rng.gen::<f64>() < self.noise.p_drop {
                Some(Corruption::Drop)
            } else if rng.gen::<f64>() < self.noise.p_label && scene.vocabulary.len() > 1 {
                let others: Vec<&String> = scene.vocabulary.iter().filter(|l| **l != o.label).collect();
                let to = others[rng.gen_range(0..others.len())];
                disc.label = to;
                Some(Corruption::Relabel {
                    from: o.label.clone(),
                    to: to.clone(),
                })
            } else if self.noise.sigma_pos > 0.0 {
                let normal = Normal::new(0.0, self.noise.sigma_pos).expect("sigma validated");
                let (dx, dy) = (normal.sample(&mut rng), normal.sample(&mut rng));
                disc.position = Point::new(o.position.x + dx, o.position.y + dy);
                Some(Corruption::Jitter { dx, dy })
            } else {
                None
            };
            if let Some(kind) = kind {
                disc.corrupted = true;
                if kind == Corruption::Drop {
                    dropped.insert(o.id);
                }
                events.push(CorruptionEvent {
                    frame: frame_index,
                    object_id: o.id,
                    kind,
                });
            }
            if !dropped.contains(&o.id) {
                discs.push(disc);
            }
        }
        let percepts = render_discs(&discs, pose, &self.sensor);
        let mut corrupted_ids: BTreeSet<u32> = percepts.iter().filter(|p| p.corrupted).map(|p| p.source_id).collect();
        if !dropped.is_empty() {
            let clean = render(scene, pose, &self.sensor);
            corrupted_ids.extend(clean.percepts.iter().map(|p| p.source_id).filter(|id| dropped.contains(id)));
        }
        (
            Observation {
                viewpoint: *pose,
                percepts,
                imagined: true,
                corrupted_ids,
            },
            events,
        )
    }
}

pub fn imagine(
    scene: &Scene,
    start: Pose,
    plan: &ActionPlan,
    noise: &NoiseModel,
    sensor: &Sensor,
    seed: u64,
) -> Result<ImaginedTrajectory, WorldError> {
    WorldModel::new(*sensor, *noise).imagine(scene, start, plan, seed)
}
