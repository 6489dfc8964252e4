//! HTTP adapter: one endpoint per role, JSON request bodies, role-specific
//! text responses.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::protocol::{parse_answer_output, parse_policy_output_with, parse_verifier_output};
use super::{AnswerBackend, AnswerDistribution, BackendError, PolicyBackend, PolicySample, QueryContext, VerifierBackend};
use crate::geometry::{ActionPlan, PlanLimits};
use crate::world::{ImaginedTrajectory, Observation};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteConfig {
    /// Base URL; `/policy`, `/verify` and `/answer` are appended.
    pub endpoint: String,
    pub timeout_s: f64,
    pub max_in_flight: usize,
    /// Reject policy outputs with fields outside the schema.
    pub strict: bool,
    /// Extra attempts after a failed call.
    pub retries: u32,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        RemoteConfig {
            endpoint: "http://127.0.0.1:8080".into(),
            timeout_s: 60.0,
            max_in_flight: 4,
            strict: true,
            retries: 1,
        }
    }
}

struct Semaphore {
    free: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Semaphore);

impl Semaphore {
    fn new(n: usize) -> Self {
        Semaphore {
            free: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.cv.notify_one();
    }
}

#[derive(Serialize)]
struct WirePercept<'a> {
    label: &'a str,
    color: &'a str,
    bearing: f64,
    distance: f64,
    facing: f64,
}

/// Frames as sent to a model: what is seen, never where from or which object.
#[derive(Serialize)]
struct WireFrame<'a> {
    imagined: bool,
    percepts: Vec<WirePercept<'a>>,
}

fn wire_frames(frames: &[Observation]) -> Vec<WireFrame<'_>> {
    frames
        .iter()
        .map(|f| WireFrame {
            imagined: f.imagined,
            percepts: f
                .percepts
                .iter()
                .map(|p| WirePercept {
                    label: &p.label,
                    color: &p.color,
                    bearing: p.bearing,
                    distance: p.distance,
                    facing: p.facing,
                })
                .collect(),
        })
        .collect()
}

#[derive(Serialize)]
struct Query<'a> {
    question: &'a str,
    choices: &'a [String],
    frames: Vec<WireFrame<'a>>,
}

#[derive(Serialize)]
struct WireTrajectory<'a> {
    actions: &'a ActionPlan,
    frames: Vec<WireFrame<'a>>,
}

#[derive(Serialize)]
struct VerifyQuery<'a> {
    #[serde(flatten)]
    query: Query<'a>,
    trajectory: WireTrajectory<'a>,
}

pub struct RemoteBackend {
    cfg: RemoteConfig,
    client: reqwest::blocking::Client,
    gate: Semaphore,
}

impl RemoteBackend {
    pub fn new(cfg: RemoteConfig) -> Result<Self, BackendError> {
        if !(cfg.timeout_s > 0.0) {
            return Err(BackendError::Invalid("timeout_s must be positive".into()));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(cfg.timeout_s))
            .build()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let gate = Semaphore::new(cfg.max_in_flight);
        Ok(RemoteBackend { cfg, client, gate })
    }

    fn post<T: Serialize>(&self, path: &str, body: &T) -> Result<String, BackendError> {
        let _permit = self.gate.acquire();
        let url = format!("{}/{}", self.cfg.endpoint.trim_end_matches('/'), path);
        let resp = self
            .client
            .post(&url)
            .json(body)
            .send()
            .map_err(|e| BackendError::Transport(e.without_url().to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            return Err(BackendError::Transport(format!("/{path} returned {status}")));
        }
        resp.text().map_err(|e| BackendError::Transport(e.without_url().to_string()))
    }

    /// Calls `path` and parses the reply, retrying the whole exchange.
    fn call<T: Serialize, R>(&self, path: &str, body: &T, parse: impl Fn(&str) -> Result<R, BackendError>) -> Result<R, BackendError> {
        let mut last = None;
        for attempt in 0..=self.cfg.retries {
            match self.post(path, body).and_then(|text| parse(&text)) {
                Ok(r) => return Ok(r),
                Err(e) => {
                    log::warn!("/{path} attempt {} failed: {e}", attempt + 1);
                    last = Some(e);
                }
            }
        }
        Err(last.expect("at least one attempt"))
    }

    fn query<'a>(ctx: &QueryContext<'a>, frames: &'a [Observation]) -> Query<'a> {
        Query {
            question: &ctx.episode.question,
            choices: &ctx.episode.choices,
            frames: wire_frames(frames),
        }
    }
}

impl PolicyBackend for RemoteBackend {
    fn sample(&self, ctx: &QueryContext<'_>, _seed: u64) -> Result<PolicySample, BackendError> {
        let body = Self::query(ctx, ctx.start_frames);
        let strict = self.cfg.strict;
        let limits = PlanLimits::default();
        match self.call("policy", &body, |t| {
            parse_policy_output_with(t, strict, &limits).map_err(|e| BackendError::Parse(e.to_string()))
        }) {
            Ok(s) => Ok(s),
            Err(e) => Ok(PolicySample {
                fallback: true,
                ..PolicySample::skip(format!("fallback to skip: {e}"))
            }),
        }
    }
}

impl VerifierBackend for RemoteBackend {
    fn score(&self, ctx: &QueryContext<'_>, trajectory: &ImaginedTrajectory, _seed: u64) -> Result<u8, BackendError> {
        let body = VerifyQuery {
            query: Self::query(ctx, ctx.start_frames),
            trajectory: WireTrajectory {
                actions: &trajectory.plan,
                frames: wire_frames(&trajectory.frames),
            },
        };
        self.call("verify", &body, |t| parse_verifier_output(t).map_err(|e| BackendError::Parse(e.to_string())))
    }
}

impl AnswerBackend for RemoteBackend {
    fn answer(&self, ctx: &QueryContext<'_>, frames: &[Observation], _seed: u64) -> Result<AnswerDistribution, BackendError> {
        let body = Self::query(ctx, frames);
        let k = ctx.episode.k();
        self.call("answer", &body, |t| parse_answer_output(t, k).map_err(|e| BackendError::Parse(e.to_string())))
    }
}
