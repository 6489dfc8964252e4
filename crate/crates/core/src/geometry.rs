//! Pose arithmetic over the fixed egocentric action space.
//!
//! Convention: heading 0° points along +x, angles grow counter-clockwise, and a
//! positive relative bearing means "to the left of the viewer".
//!
//! Headings are stored as integer millidegrees so that every turn is exact and
//! a left turn followed by a right turn restores the pose bit-for-bit.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Distance covered by one `move-forward` unit, meters.
pub const FORWARD_STEP: f64 = 0.25;
/// Rotation of one `turn-left` / `turn-right` unit, degrees.
pub const TURN_STEP_DEG: f64 = 9.0;

const MDEG_PER_DEG: i64 = 1000;
const FULL_TURN_MDEG: i64 = 360 * MDEG_PER_DEG;
const TURN_STEP_MDEG: i64 = 9 * MDEG_PER_DEG;

/// Tolerance used when comparing derived floating-point geometry.
pub const EPS: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point coincides with the viewer position")]
    CoincidentPoint,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PlanError {
    #[error("plan has {len} entries, at most {max} allowed")]
    TooManyEntries { len: usize, max: usize },
    #[error("entry {index} has value 0, repeat counts start at 1")]
    ZeroValue { index: usize },
    #[error("entry {index} has value {value}, cap is {max}")]
    ValueTooLarge { index: usize, value: u32, max: u32 },
    #[error("entries {index} and {next} are opposing turns", next = index + 1)]
    OpposingTurns { index: usize },
}

/// A heading in `[0, 360)` degrees with millidegree resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Heading(i64);

impl Heading {
    pub fn from_millidegrees(mdeg: i64) -> Self {
        Heading(mdeg.rem_euclid(FULL_TURN_MDEG))
    }

    /// Rounds to the nearest millidegree.
    pub fn from_degrees(deg: f64) -> Self {
        Self::from_millidegrees((deg * MDEG_PER_DEG as f64).round() as i64)
    }

    pub fn millidegrees(self) -> i64 {
        self.0
    }

    pub fn degrees(self) -> f64 {
        self.0 as f64 / MDEG_PER_DEG as f64
    }

    pub fn rotated_mdeg(self, delta: i64) -> Self {
        Self::from_millidegrees(self.0 + delta)
    }

    /// Unit vector along the heading. Exact on the four axis directions.
    pub fn unit(self) -> (f64, f64) {
        match self.0 {
            0 => (1.0, 0.0),
            90_000 => (0.0, 1.0),
            180_000 => (-1.0, 0.0),
            270_000 => (0.0, -1.0),
            _ => {
                let r = self.degrees().to_radians();
                (r.cos(), r.sin())
            }
        }
    }
}

impl Serialize for Heading {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(self.degrees())
    }
}

impl<'de> Deserialize<'de> for Heading {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let deg = f64::deserialize(d)?;
        if !deg.is_finite() {
            return Err(serde::de::Error::custom("heading must be finite"));
        }
        Ok(Heading::from_degrees(deg))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn distance(self, other: Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub heading: Heading,
}

impl Pose {
    pub fn new(x: f64, y: f64, heading_deg: f64) -> Self {
        Pose {
            x,
            y,
            heading: Heading::from_degrees(heading_deg),
        }
    }

    pub fn position(&self) -> Point {
        Point::new(self.x, self.y)
    }

    pub fn heading_deg(&self) -> f64 {
        self.heading.degrees()
    }

    pub fn with_heading(self, heading: Heading) -> Self {
        Pose { heading, ..self }
    }

    /// Same position and heading up to `pos_tol` meters and `heading_tol` degrees.
    pub fn approx_eq(&self, other: &Pose, pos_tol: f64, heading_tol: f64) -> bool {
        self.position().distance(other.position()) <= pos_tol
            && angle_diff_deg(self.heading_deg(), other.heading_deg()).abs() <= heading_tol
    }
}

impl fmt::Display for Pose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({:.3}, {:.3}, {}°)", self.x, self.y, self.heading_deg())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActionKind {
    MoveForward,
    TurnLeft,
    TurnRight,
}

impl ActionKind {
    pub const ALL: [ActionKind; 3] = [ActionKind::MoveForward, ActionKind::TurnLeft, ActionKind::TurnRight];

    pub fn as_str(self) -> &'static str {
        match self {
            ActionKind::MoveForward => "move-forward",
            ActionKind::TurnLeft => "turn-left",
            ActionKind::TurnRight => "turn-right",
        }
    }

    pub fn is_turn(self) -> bool {
        !matches!(self, ActionKind::MoveForward)
    }

    pub fn opposes(self, other: ActionKind) -> bool {
        matches!(
            (self, other),
            (ActionKind::TurnLeft, ActionKind::TurnRight) | (ActionKind::TurnRight, ActionKind::TurnLeft)
        )
    }

    /// Swaps left and right; forward is unchanged.
    pub fn mirrored(self) -> ActionKind {
        match self {
            ActionKind::TurnLeft => ActionKind::TurnRight,
            ActionKind::TurnRight => ActionKind::TurnLeft,
            ActionKind::MoveForward => ActionKind::MoveForward,
        }
    }
}

impl fmt::Display for ActionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ActionEntry {
    #[serde(rename = "type")]
    pub kind: ActionKind,
    pub value: u32,
}

impl ActionEntry {
    pub const fn new(kind: ActionKind, value: u32) -> Self {
        ActionEntry { kind, value }
    }
}

impl fmt::Display for ActionEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} x{}", self.kind, self.value)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlanLimits {
    pub max_entries: usize,
    pub max_value: u32,
}

impl Default for PlanLimits {
    fn default() -> Self {
        PlanLimits {
            max_entries: 6,
            max_value: 20,
        }
    }
}

/// An ordered sequence of repeated unit actions.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(transparent)]
pub struct ActionPlan {
    pub entries: Vec<ActionEntry>,
}

impl ActionPlan {
    pub fn new(entries: Vec<ActionEntry>) -> Self {
        ActionPlan { entries }
    }

    pub fn empty() -> Self {
        ActionPlan::default()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn validate(&self, limits: &PlanLimits) -> Result<(), PlanError> {
        if self.entries.len() > limits.max_entries {
            return Err(PlanError::TooManyEntries {
                len: self.entries.len(),
                max: limits.max_entries,
            });
        }
        for (index, e) in self.entries.iter().enumerate() {
            if e.value == 0 {
                return Err(PlanError::ZeroValue { index });
            }
            if e.value > limits.max_value {
                return Err(PlanError::ValueTooLarge {
                    index,
                    value: e.value,
                    max: limits.max_value,
                });
            }
        }
        if let Some(index) = self
            .entries
            .windows(2)
            .position(|w| w[0].kind.opposes(w[1].kind))
        {
            return Err(PlanError::OpposingTurns { index });
        }
        Ok(())
    }

    /// Total unit actions across all entries.
    pub fn unit_count(&self) -> u32 {
        self.entries.iter().map(|e| e.value).sum()
    }
}

impl fmt::Display for ActionPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.entries.is_empty() {
            return f.write_str("(no actions)");
        }
        for (i, e) in self.entries.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{e}")?;
        }
        Ok(())
    }
}

pub fn apply_unit(pose: Pose, kind: ActionKind) -> Pose {
    apply_repeated(pose, ActionEntry::new(kind, 1))
}

/// Applies `entry.value` repetitions of the unit action.
pub fn apply_repeated(pose: Pose, entry: ActionEntry) -> Pose {
    match entry.kind {
        ActionKind::TurnLeft => pose.with_heading(pose.heading.rotated_mdeg(TURN_STEP_MDEG * entry.value as i64)),
        ActionKind::TurnRight => pose.with_heading(pose.heading.rotated_mdeg(-TURN_STEP_MDEG * entry.value as i64)),
        ActionKind::MoveForward => {
            let (ux, uy) = pose.heading.unit();
            let mut p = pose;
            // Step-by-step accumulation keeps axis-aligned motion exact (0.25 is dyadic).
            for _ in 0..entry.value {
                p.x += FORWARD_STEP * ux;
                p.y += FORWARD_STEP * uy;
            }
            p
        }
    }
}

/// One pose per plan entry, each taken after all repetitions of that entry.
pub fn simulate_plan(start: Pose, plan: &ActionPlan) -> Result<Vec<Pose>, PlanError> {
    simulate_plan_with(start, plan, &PlanLimits::default())
}

pub fn simulate_plan_with(start: Pose, plan: &ActionPlan, limits: &PlanLimits) -> Result<Vec<Pose>, PlanError> {
    plan.validate(limits)?;
    Ok(trace(start, &plan.entries))
}

/// Pose sequence without plan validation; used by beam expansion where
/// entries are composed freely.
pub fn trace(start: Pose, entries: &[ActionEntry]) -> Vec<Pose> {
    entries
        .iter()
        .scan(start, |pose, &e| {
            *pose = apply_repeated(*pose, e);
            Some(*pose)
        })
        .collect()
}

pub fn final_pose(start: Pose, entries: &[ActionEntry]) -> Pose {
    entries.iter().fold(start, |p, &e| apply_repeated(p, e))
}

/// Maps any angle to `(-180, 180]`.
pub fn normalize_signed_deg(deg: f64) -> f64 {
    let r = deg.rem_euclid(360.0);
    if r > 180.0 {
        r - 360.0
    } else {
        r
    }
}

/// Signed smallest difference `a - b`, in `(-180, 180]`.
pub fn angle_diff_deg(a: f64, b: f64) -> f64 {
    normalize_signed_deg(a - b)
}

/// Signed bearing of `point` relative to the viewer's heading; positive is left.
pub fn bearing_to(pose: &Pose, point: Point) -> Result<f64, GeometryError> {
    let dx = point.x - pose.x;
    let dy = point.y - pose.y;
    if dx.hypot(dy) < 1e-12 {
        return Err(GeometryError::CoincidentPoint);
    }
    let absolute = dy.atan2(dx).to_degrees();
    Ok(normalize_signed_deg(absolute - pose.heading_deg()))
}

/// Inverse of `bearing_to` + distance: the world point seen at a relative bearing.
pub fn point_at(pose: &Pose, bearing_deg: f64, distance: f64) -> Point {
    let a = (pose.heading_deg() + bearing_deg).to_radians();
    Point::new(pose.x + distance * a.cos(), pose.y + distance * a.sin())
}
