//! Aggregations over run logs: case taxonomy, view curves, cost frontier,
//! error-tag breakdown and gating quality. Everything here is a pure function
//! of records except `view_curve`, which drives the controller.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controller::{Controller, ControllerError, RunRecord, StrategyKind};
use crate::seed;
use crate::tasks::{self, Episode, ErrorTag, QuestionCategory};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("episode ids differ: {0} vs {1}")]
    IdMismatch(u64, u64),
    #[error("run sets differ in size: {0} vs {1}")]
    SizeMismatch(usize, usize),
    #[error("no records")]
    Empty,
    #[error("forced view counts must be non-empty")]
    NoViewCounts,
    #[error(transparent)]
    Controller(#[from] ControllerError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaseLabel {
    Helpful,
    Misleading,
    Unnecessary,
    /// Baseline right, imagination wrong.
    Harmful,
}

impl CaseLabel {
    pub const ALL: [CaseLabel; 4] = [CaseLabel::Helpful, CaseLabel::Misleading, CaseLabel::Unnecessary, CaseLabel::Harmful];

    pub fn as_str(self) -> &'static str {
        match self {
            CaseLabel::Helpful => "helpful",
            CaseLabel::Misleading => "misleading",
            CaseLabel::Unnecessary => "unnecessary",
            CaseLabel::Harmful => "harmful",
        }
    }

    /// Three-way reporting folds harmful into unnecessary.
    pub fn three_way(self) -> CaseLabel {
        match self {
            CaseLabel::Harmful => CaseLabel::Unnecessary,
            l => l,
        }
    }
}

/// The case of one episode from the baseline's correctness and the imagination run's outcome.
pub fn case_of(none_correct: bool, invoked: bool, imagination_correct: bool) -> CaseLabel {
    match (none_correct, imagination_correct) {
        (true, _) if imagination_correct || !invoked => CaseLabel::Unnecessary,
        (true, _) => CaseLabel::Harmful,
        (false, true) => CaseLabel::Helpful,
        (false, false) => CaseLabel::Misleading,
    }
}

pub fn classify_case(record_none: &RunRecord, record_imagination: &RunRecord) -> Result<CaseLabel, AnalysisError> {
    if record_none.episode_id != record_imagination.episode_id {
        return Err(AnalysisError::IdMismatch(record_none.episode_id, record_imagination.episode_id));
    }
    Ok(case_of(record_none.correct, record_imagination.invoked(), record_imagination.correct))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseStats {
    pub total: usize,
    pub counts: BTreeMap<CaseLabel, usize>,
    pub fractions: BTreeMap<CaseLabel, f64>,
}

impl CaseStats {
    pub fn from_labels(labels: &[CaseLabel]) -> Self {
        let mut counts: BTreeMap<CaseLabel, usize> = CaseLabel::ALL.iter().map(|&l| (l, 0)).collect();
        for l in labels {
            *counts.entry(*l).or_default() += 1;
        }
        let total = labels.len();
        let fractions = counts
            .iter()
            .map(|(&l, &c)| (l, if total == 0 { 0.0 } else { c as f64 / total as f64 }))
            .collect();
        CaseStats { total, counts, fractions }
    }

    pub fn fraction(&self, label: CaseLabel) -> f64 {
        self.fractions.get(&label).copied().unwrap_or(0.0)
    }

    /// Fractions with harmful folded into unnecessary.
    pub fn three_way(&self) -> BTreeMap<CaseLabel, f64> {
        let mut out = BTreeMap::new();
        for (&l, &f) in &self.fractions {
            *out.entry(l.three_way()).or_insert(0.0) += f;
        }
        out
    }
}

/// Pairs records by episode id; both sides must cover the same episodes.
pub fn pair_by_episode<'a>(a: &'a [RunRecord], b: &'a [RunRecord]) -> Result<Vec<(&'a RunRecord, &'a RunRecord)>, AnalysisError> {
    if a.len() != b.len() {
        return Err(AnalysisError::SizeMismatch(a.len(), b.len()));
    }
    let by_id: BTreeMap<u64, &RunRecord> = b.iter().map(|r| (r.episode_id, r)).collect();
    a.iter()
        .map(|r| {
            by_id
                .get(&r.episode_id)
                .map(|&o| (r, o))
                .ok_or(AnalysisError::IdMismatch(r.episode_id, r.episode_id))
        })
        .collect()
}

pub fn case_stats(records_none: &[RunRecord], records_imagination: &[RunRecord]) -> Result<CaseStats, AnalysisError> {
    let labels = pair_by_episode(records_none, records_imagination)?
        .into_iter()
        .map(|(n, i)| classify_case(n, i))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(CaseStats::from_labels(&labels))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub views: usize,
    pub accuracy: f64,
}

/// Accuracy when answering from the start views plus exactly `n` beam frames, per `n`.
pub fn view_curve(controller: &Controller, episodes: &[Episode], forced_counts: &[usize], run_seed: u64) -> Result<Vec<CurvePoint>, AnalysisError> {
    if forced_counts.is_empty() {
        return Err(AnalysisError::NoViewCounts);
    }
    if episodes.is_empty() {
        return Err(AnalysisError::Empty);
    }
    let mut counts = forced_counts.to_vec();
    counts.sort_unstable();
    counts.dedup();
    counts
        .into_iter()
        .map(|n| {
            let correct = episodes
                .par_iter()
                .map(|ep| controller.run_fixed_views(ep, seed::for_episode(run_seed, ep.id), n).map(|r| r.correct as usize))
                .collect::<Result<Vec<_>, _>>()?
                .into_iter()
                .sum::<usize>();
            Ok(CurvePoint {
                views: n,
                accuracy: correct as f64 / episodes.len() as f64,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyAggregate {
    pub strategy: StrategyKind,
    pub episodes: usize,
    pub accuracy: f64,
    /// Mean accuracy per category; categories absent from the run are omitted.
    pub per_category: BTreeMap<QuestionCategory, f64>,
    pub wm_calls: f64,
    pub pseudo_tokens: f64,
    pub wall_time: f64,
}

impl StrategyAggregate {
    /// Unweighted mean over the categories present.
    pub fn macro_accuracy(&self) -> f64 {
        if self.per_category.is_empty() {
            return 0.0;
        }
        self.per_category.values().sum::<f64>() / self.per_category.len() as f64
    }
}

pub fn aggregate(records: &[RunRecord]) -> Result<StrategyAggregate, AnalysisError> {
    let first = records.first().ok_or(AnalysisError::Empty)?;
    let n = records.len() as f64;
    let mean = |f: &dyn Fn(&RunRecord) -> f64| records.iter().map(f).sum::<f64>() / n;
    let mut by_cat: BTreeMap<QuestionCategory, (usize, usize)> = BTreeMap::new();
    for r in records {
        let e = by_cat.entry(r.category).or_default();
        e.0 += r.correct as usize;
        e.1 += 1;
    }
    Ok(StrategyAggregate {
        strategy: first.strategy,
        episodes: records.len(),
        accuracy: mean(&|r| r.correct as u8 as f64),
        per_category: by_cat.into_iter().map(|(c, (k, t))| (c, k as f64 / t as f64)).collect(),
        wm_calls: mean(&|r| r.budget.wm_calls as f64),
        pseudo_tokens: mean(&|r| r.budget.pseudo_tokens as f64),
        wall_time: mean(&|r| r.budget.wall_time),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontierPoint {
    pub strategy: StrategyKind,
    pub pseudo_tokens: f64,
    pub accuracy: f64,
    pub wall_time: f64,
}

/// One point per strategy, ordered by token cost.
pub fn frontier(aggregates: &[StrategyAggregate]) -> Vec<FrontierPoint> {
    let mut points: Vec<FrontierPoint> = aggregates
        .iter()
        .map(|a| FrontierPoint {
            strategy: a.strategy,
            pseudo_tokens: a.pseudo_tokens,
            accuracy: a.accuracy,
            wall_time: a.wall_time,
        })
        .collect();
    points.sort_by(|a, b| a.pseudo_tokens.total_cmp(&b.pseudo_tokens).then(a.strategy.cmp(&b.strategy)));
    points
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TagRow {
    pub tag: ErrorTag,
    pub episodes: usize,
    pub invocation_rate: f64,
    pub accuracy_none: f64,
    pub accuracy_imagination: f64,
    pub gain: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBreakdown {
    pub rows: Vec<TagRow>,
}

/// Per error tag: how often imagination ran and what it gained over the baseline.
pub fn error_breakdown(records_imagination: &[RunRecord], records_none: &[RunRecord]) -> Result<ErrorBreakdown, AnalysisError> {
    let pairs = pair_by_episode(records_imagination, records_none)?;
    let mut acc: BTreeMap<ErrorTag, (usize, usize, usize, usize)> = BTreeMap::new();
    for (i, n) in pairs {
        let e = acc.entry(i.error_tag).or_default();
        e.0 += 1;
        e.1 += i.invoked() as usize;
        e.2 += n.correct as usize;
        e.3 += i.correct as usize;
    }
    let rows = acc
        .into_iter()
        .map(|(tag, (count, inv, cn, ci))| {
            let c = count as f64;
            TagRow {
                tag,
                episodes: count,
                invocation_rate: inv as f64 / c,
                accuracy_none: cn as f64 / c,
                accuracy_imagination: ci as f64 / c,
                gain: (ci as f64 - cn as f64) / c,
            }
        })
        .collect();
    Ok(ErrorBreakdown { rows })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GatingQuality {
    pub needed: usize,
    pub invoked: usize,
    pub hits: usize,
    /// `None` when nothing was needed.
    pub recall: Option<f64>,
    /// `None` when nothing was invoked.
    pub precision: Option<f64>,
}

/// Gate recall and precision against the sufficiency of each episode's start views.
pub fn gating_quality(records: &[RunRecord], episodes: &[Episode]) -> GatingQuality {
    let by_id: BTreeMap<u64, &Episode> = episodes.iter().map(|e| (e.id, e)).collect();
    let (mut needed, mut invoked, mut hits) = (0, 0, 0);
    for r in records {
        let Some(ep) = by_id.get(&r.episode_id) else {
            log::warn!("record for unknown episode {}", r.episode_id);
            continue;
        };
        let need = !tasks::sufficient(ep, &ep.start_frames());
        let inv = r.invoked();
        needed += need as usize;
        invoked += inv as usize;
        hits += (need && inv) as usize;
    }
    let ratio = |a: usize, b: usize| (b > 0).then(|| a as f64 / b as f64);
    GatingQuality {
        needed,
        invoked,
        hits,
        recall: ratio(hits, needed),
        precision: ratio(hits, invoked),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisSummary {
    /// How cases were paired: the strategy compared against the no-imagination baseline.
    pub case_pairing: String,
    pub cases: Option<CaseStats>,
    pub view_curve: Vec<CurvePoint>,
    pub frontier: Vec<FrontierPoint>,
    pub error_breakdown: Option<ErrorBreakdown>,
    pub gating_quality: Option<GatingQuality>,
}

pub const CASES_CSV: &str = "cases.csv";
pub const VIEW_CURVE_CSV: &str = "view_curve.csv";
pub const FRONTIER_CSV: &str = "frontier.csv";
pub const ERROR_BREAKDOWN_CSV: &str = "error_breakdown.csv";
pub const GATING_CSV: &str = "gating_quality.csv";
pub const SUMMARY_JSON: &str = "analysis_summary.json";

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| format!("{x:.6}"))
}

/// Writes one CSV per populated analysis plus the JSON summary into `dir`.
pub fn write_summary(dir: &Path, summary: &AnalysisSummary) -> Result<(), AnalysisError> {
    std::fs::create_dir_all(dir)?;
    if let Some(cases) = &summary.cases {
        let mut w = csv::Writer::from_path(dir.join(CASES_CSV))?;
        w.write_record(["case", "count", "fraction"])?;
        for l in CaseLabel::ALL {
            let count = cases.counts.get(&l).copied().unwrap_or(0);
            w.write_record([l.as_str().to_string(), count.to_string(), format!("{:.6}", cases.fraction(l))])?;
        }
        w.flush()?;
    }
    if !summary.view_curve.is_empty() {
        let mut w = csv::Writer::from_path(dir.join(VIEW_CURVE_CSV))?;
        w.write_record(["views", "accuracy"])?;
        for p in &summary.view_curve {
            w.write_record([p.views.to_string(), format!("{:.6}", p.accuracy)])?;
        }
        w.flush()?;
    }
    if !summary.frontier.is_empty() {
        let mut w = csv::Writer::from_path(dir.join(FRONTIER_CSV))?;
        w.write_record(["strategy", "pseudo_tokens", "accuracy", "wall_time_s"])?;
        for p in &summary.frontier {
            w.write_record([
                p.strategy.as_str().to_string(),
                format!("{:.3}", p.pseudo_tokens),
                format!("{:.6}", p.accuracy),
                format!("{:.6}", p.wall_time),
            ])?;
        }
        w.flush()?;
    }
    if let Some(b) = &summary.error_breakdown {
        let mut w = csv::Writer::from_path(dir.join(ERROR_BREAKDOWN_CSV))?;
        w.write_record(["tag", "episodes", "invocation_rate", "accuracy_none", "accuracy_imagination", "gain"])?;
        for r in &b.rows {
            w.write_record([
                r.tag.as_str().to_string(),
                r.episodes.to_string(),
                format!("{:.6}", r.invocation_rate),
                format!("{:.6}", r.accuracy_none),
                format!("{:.6}", r.accuracy_imagination),
                format!("{:.6}", r.gain),
            ])?;
        }
        w.flush()?;
    }
    if let Some(g) = &summary.gating_quality {
        let mut w = csv::Writer::from_path(dir.join(GATING_CSV))?;
        w.write_record(["needed", "invoked", "hits", "recall", "precision"])?;
        w.write_record([
            g.needed.to_string(),
            g.invoked.to_string(),
            g.hits.to_string(),
            fmt_opt(g.recall),
            fmt_opt(g.precision),
        ])?;
        w.flush()?;
    }
    let mut f = std::fs::File::create(dir.join(SUMMARY_JSON))?;
    serde_json::to_writer_pretty(&mut f, summary)?;
    writeln!(f)?;
    Ok(())
}
