//! The three model roles: a policy that decides whether to imagine and
//! proposes action plans, a verifier that scores imagined trajectories, and an
//! answerer that picks a choice from a set of frames.
//!
//! Each role has a calibrated synthetic backend and a remote HTTP adapter.

mod protocol;
mod remote;
mod synthetic;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::ActionPlan;
use crate::tasks::Episode;
use crate::world::{ImaginedTrajectory, Observation};

pub use protocol::{
    parse_answer_output, parse_policy_output, parse_policy_output_with, parse_verifier_output, AnswerParseError, PolicyParseError,
    VerifierParseError,
};
pub use remote::{RemoteBackend, RemoteConfig};
pub use synthetic::{
    goal_directed_plan, resolve_evidence, AnswerConfig, PolicyConfig, SyntheticAnswerer, SyntheticPolicy, SyntheticVerifier, VerifierConfig,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("unparseable response: {0}")]
    Parse(String),
    #[error("invalid request: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Skip,
    CallWm,
}

/// One policy draw: a gate decision and, when imagining, the plan to imagine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySample {
    pub decision: Decision,
    pub reason: String,
    #[serde(rename = "actions")]
    pub plan: ActionPlan,
    /// Set when a backend failure was replaced by a skip.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub fallback: bool,
}

impl PolicySample {
    pub fn skip(reason: impl Into<String>) -> Self {
        PolicySample {
            decision: Decision::Skip,
            reason: reason.into(),
            plan: ActionPlan::empty(),
            fallback: false,
        }
    }

    pub fn call(plan: ActionPlan, reason: impl Into<String>) -> Self {
        PolicySample {
            decision: Decision::CallWm,
            reason: reason.into(),
            plan,
            fallback: false,
        }
    }

    /// Wire form: `{"decision": ..., "reason": ..., "actions": [...]}`.
    pub fn to_wire(&self) -> String {
        #[derive(Serialize)]
        struct Wire<'a> {
            decision: Decision,
            reason: &'a str,
            actions: &'a ActionPlan,
        }
        serde_json::to_string(&Wire {
            decision: self.decision,
            reason: &self.reason,
            actions: &self.plan,
        })
        .expect("policy sample serializes")
    }
}

/// A probability vector over the answer choices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerDistribution {
    pub scores: Vec<f64>,
}

impl AnswerDistribution {
    pub fn uniform(k: usize) -> Self {
        AnswerDistribution {
            scores: vec![1.0 / k as f64; k],
        }
    }

    pub fn one_hot(k: usize, index: usize) -> Self {
        let mut scores = vec![0.0; k];
        scores[index] = 1.0;
        AnswerDistribution { scores }
    }

    /// Normalizes non-negative scores; `None` if they are empty, negative,
    /// non-finite or sum to zero.
    pub fn from_scores(scores: &[f64]) -> Option<Self> {
        let total: f64 = scores.iter().sum();
        if scores.is_empty() || scores.iter().any(|s| !s.is_finite() || *s < 0.0) || !(total > 0.0) {
            return None;
        }
        Some(AnswerDistribution {
            scores: scores.iter().map(|s| s / total).collect(),
        })
    }

    /// Index of the largest probability; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.scores.iter().enumerate() {
            if p > self.scores[best] {
                best = i;
            }
        }
        best
    }
}

/// What every role sees about the episode: question, choices and the views
/// given with it.
#[derive(Debug, Clone, Copy)]
pub struct QueryContext<'a> {
    pub episode: &'a Episode,
    pub start_frames: &'a [Observation],
}

pub trait PolicyBackend: Send + Sync {
    fn sample(&self, ctx: &QueryContext<'_>, seed: u64) -> Result<PolicySample, BackendError>;
}

pub trait VerifierBackend: Send + Sync {
    /// Integer helpfulness score in `0..=9` for one whole trajectory.
    fn score(&self, ctx: &QueryContext<'_>, trajectory: &ImaginedTrajectory, seed: u64) -> Result<u8, BackendError>;
}

pub trait AnswerBackend: Send + Sync {
    fn answer(&self, ctx: &QueryContext<'_>, frames: &[Observation], seed: u64) -> Result<AnswerDistribution, BackendError>;
}

#[derive(Clone)]
pub struct Backends {
    pub policy: Arc<dyn PolicyBackend>,
    pub verifier: Arc<dyn VerifierBackend>,
    pub answerer: Arc<dyn AnswerBackend>,
}

impl Backends {
    pub fn synthetic(policy: PolicyConfig, verifier: VerifierConfig, answer: AnswerConfig) -> Self {
        Backends {
            policy: Arc::new(SyntheticPolicy::new(policy)),
            verifier: Arc::new(SyntheticVerifier::new(verifier)),
            answerer: Arc::new(SyntheticAnswerer::new(answer)),
        }
    }

    pub fn remote(cfg: RemoteConfig) -> Result<Self, BackendError> {
        let remote = Arc::new(RemoteBackend::new(cfg)?);
        Ok(Backends {
            policy: remote.clone(),
            verifier: remote.clone(),
            answerer: remote,
        })
    }
}

impl std::fmt::Debug for Backends {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("Backends { .. }")
    }
}
