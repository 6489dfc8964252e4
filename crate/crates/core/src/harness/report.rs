use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::run::{build_controller, load_suite, read_run_log, read_wall_times, run_log_path, RunLog};
use super::{io_err, HarnessError};
use crate::analysis::{self, AnalysisSummary};
use crate::controller::{RunRecord, StrategyKind};
use crate::tasks::{Episode, QuestionCategory};

pub const REPORT_CSV: &str = "report.csv";
pub const REPORT_COLUMNS: [&str; 9] = ["strategy", "EgoM", "ObjM", "EgoAct", "Goal", "Pers", "Avg.", "# Token (K)", "Avg. WM"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub strategy: StrategyKind,
    /// Accuracy in percent per category present in the run.
    pub per_category: BTreeMap<QuestionCategory, f64>,
    /// Unweighted mean of the category accuracies.
    pub avg: f64,
    pub tokens_k: Option<f64>,
    pub avg_wm: Option<f64>,
}

fn category_accuracy(records: &[(QuestionCategory, bool)]) -> BTreeMap<QuestionCategory, f64> {
    let mut acc: BTreeMap<QuestionCategory, (usize, usize)> = BTreeMap::new();
    for &(c, ok) in records {
        let e = acc.entry(c).or_default();
        e.0 += ok as usize;
        e.1 += 1;
    }
    acc.into_iter().map(|(c, (k, n))| (c, 100.0 * k as f64 / n as f64)).collect()
}

fn macro_mean(per: &BTreeMap<QuestionCategory, f64>) -> f64 {
    if per.is_empty() {
        0.0
    } else {
        per.values().sum::<f64>() / per.len() as f64
    }
}

fn check_versions(logs: &[RunLog]) -> Result<(), HarnessError> {
    let first = logs.first().ok_or(HarnessError::NoLogs)?.header.schema_version;
    match logs.iter().find(|l| l.header.schema_version != first) {
        Some(l) => Err(HarnessError::MixedSchema(first, l.header.schema_version)),
        None => Ok(()),
    }
}

fn strategy_of(log: &RunLog) -> Option<StrategyKind> {
    StrategyKind::ALL.into_iter().find(|s| s.as_str() == log.header.strategy)
}

/// One row per strategy log, plus the selective upper bound when none and always-on are both present.
pub fn report_rows(logs: &[RunLog]) -> Result<Vec<ReportRow>, HarnessError> {
    check_versions(logs)?;
    let mut rows: Vec<ReportRow> = Vec::new();
    let mut by_strategy: BTreeMap<StrategyKind, &[RunRecord]> = BTreeMap::new();
    for log in logs {
        let Some(strategy) = strategy_of(log) else {
            log::warn!("{}: unknown strategy {:?}, skipped", log.path.display(), log.header.strategy);
            continue;
        };
        let Ok(agg) = analysis::aggregate(&log.records) else { continue };
        let per_category = category_accuracy(&log.records.iter().map(|r| (r.category, r.correct)).collect::<Vec<_>>());
        rows.push(ReportRow {
            strategy,
            avg: macro_mean(&per_category),
            per_category,
            tokens_k: Some(agg.pseudo_tokens / 1000.0),
            avg_wm: Some(agg.wm_calls),
        });
        by_strategy.insert(strategy, &log.records);
    }
    if let (Some(none), Some(always)) = (by_strategy.get(&StrategyKind::None), by_strategy.get(&StrategyKind::AlwaysOn)) {
        let ub = crate::controller::upper_bound(none, always)?;
        let cat: BTreeMap<u64, QuestionCategory> = none.iter().map(|r| (r.episode_id, r.category)).collect();
        let per_category = category_accuracy(&ub.per_episode.iter().map(|&(id, ok)| (cat[&id], ok)).collect::<Vec<_>>());
        rows.push(ReportRow {
            strategy: StrategyKind::UpperBound,
            avg: macro_mean(&per_category),
            per_category,
            tokens_k: None,
            avg_wm: None,
        });
    }
    rows.sort_by_key(|r| r.strategy);
    Ok(rows)
}

pub fn write_report_csv(rows: &[ReportRow], path: &Path) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(REPORT_COLUMNS)?;
    let opt = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x:.2}"));
    for r in rows {
        let mut rec = vec![r.strategy.as_str().to_string()];
        rec.extend(QuestionCategory::ALL.iter().map(|c| opt(r.per_category.get(c).copied())));
        rec.push(format!("{:.2}", r.avg));
        rec.push(opt(r.tokens_k));
        rec.push(opt(r.avg_wm));
        w.write_record(&rec)?;
    }
    w.flush().map_err(io_err(path))
}

fn with_wall_times(log: &RunLog) -> Vec<RunRecord> {
    let times = read_wall_times(&log.path).unwrap_or_default();
    log.records
        .iter()
        .cloned()
        .map(|mut r| {
            r.budget.wall_time = times.get(&r.episode_id).copied().unwrap_or(0.0);
            r
        })
        .collect()
}

/// Analyses that need only logs and the episodes they ran on.
fn log_analysis(logs: &[RunLog], episodes: &[Episode]) -> Result<AnalysisSummary, HarnessError> {
    let by: BTreeMap<StrategyKind, &RunLog> = logs.iter().filter_map(|l| strategy_of(l).map(|s| (s, l))).collect();
    let none = by.get(&StrategyKind::None);
    let imagination = [StrategyKind::Adaptive, StrategyKind::AlwaysOn, StrategyKind::GatingOnly]
        .into_iter()
        .find_map(|s| by.get(&s).map(|l| (s, *l)));
    let mut summary = AnalysisSummary {
        case_pairing: String::new(),
        cases: None,
        view_curve: Vec::new(),
        frontier: Vec::new(),
        error_breakdown: None,
        gating_quality: None,
    };
    if let (Some(none), Some((s, imag))) = (none, imagination) {
        summary.case_pairing = format!("{s} paired with none by episode id");
        summary.cases = Some(analysis::case_stats(&none.records, &imag.records)?);
        summary.error_breakdown = Some(analysis::error_breakdown(&imag.records, &none.records)?);
    }
    if let Some(adaptive) = by.get(&StrategyKind::Adaptive) {
        summary.gating_quality = Some(analysis::gating_quality(&adaptive.records, episodes));
    }
    let aggregates = by
        .values()
        .filter_map(|l| analysis::aggregate(&with_wall_times(l)).ok())
        .collect::<Vec<_>>();
    summary.frontier = analysis::frontier(&aggregates);
    Ok(summary)
}

fn episodes_for(log: &RunLog) -> Result<Vec<Episode>, HarnessError> {
    let cfg = log.header.experiment().map_err(|e| HarnessError::Log {
        path: log.path.clone(),
        line: 1,
        message: format!("config echo: {e}"),
    })?;
    load_suite(&cfg)
}

/// Reads run logs and writes the report table plus log-derived analysis CSVs into `out_dir`.
pub fn report(log_paths: &[PathBuf], out_dir: &Path) -> Result<Vec<ReportRow>, HarnessError> {
    let logs = log_paths.iter().map(|p| read_run_log(p)).collect::<Result<Vec<_>, _>>()?;
    let rows = report_rows(&logs)?;
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    write_report_csv(&rows, &out_dir.join(REPORT_CSV))?;
    let episodes = episodes_for(&logs[0])?;
    analysis::write_summary(out_dir, &log_analysis(&logs, &episodes)?)?;
    Ok(rows)
}

/// Full analysis for a config: view curve from fresh runs, the rest from any logs in the output directory.
pub fn analyze(cfg: &ExperimentConfig) -> Result<AnalysisSummary, HarnessError> {
    cfg.validate()?;
    let episodes = load_suite(cfg)?;
    let controller = build_controller(cfg)?;
    let logs = StrategyKind::ALL
        .into_iter()
        .map(|s| run_log_path(&cfg.output.dir, s))
        .filter(|p| p.exists())
        .map(|p| read_run_log(&p))
        .collect::<Result<Vec<_>, _>>()?;
    let mut summary = log_analysis(&logs, &episodes)?;
    summary.view_curve = analysis::view_curve(&controller, &episodes, &cfg.analysis.view_counts, cfg.run_seed)?;
    analysis::write_summary(&cfg.output.dir, &summary)?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::execute;

    #[test]
    fn report_has_documented_layout() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ExperimentConfig::with_seed(2);
        cfg.suite.episodes = 30;
        cfg.strategies = vec![StrategyKind::None, StrategyKind::AlwaysOn, StrategyKind::GatingOnly, StrategyKind::Adaptive];
        cfg.output.dir = dir.path().to_path_buf();
        execute(&cfg).unwrap();
        let paths: Vec<PathBuf> = cfg.strategies.iter().map(|&s| run_log_path(dir.path(), s)).collect();
        let rows = report(&paths, dir.path()).unwrap();
        let names: Vec<StrategyKind> = rows.iter().map(|r| r.strategy).collect();
        assert_eq!(
            names,
            vec![
                StrategyKind::None,
                StrategyKind::AlwaysOn,
                StrategyKind::GatingOnly,
                StrategyKind::Adaptive,
                StrategyKind::UpperBound
            ]
        );
        for r in &rows {
            let mean = r.per_category.values().sum::<f64>() / r.per_category.len() as f64;
            assert!((r.avg - mean).abs() < 1e-12);
        }
        let text = std::fs::read_to_string(dir.path().join(REPORT_CSV)).unwrap();
        assert_eq!(text.lines().next().unwrap(), REPORT_COLUMNS.join(","));
        assert_eq!(text.lines().count(), 6);
        for f in [analysis::CASES_CSV, analysis::FRONTIER_CSV, analysis::ERROR_BREAKDOWN_CSV, analysis::GATING_CSV] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
    }

    #[test]
    fn single_log_gives_one_row() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ExperimentConfig::with_seed(2);
        cfg.suite.episodes = 10;
        cfg.output.dir = dir.path().to_path_buf();
        execute(&cfg).unwrap();
        let rows = report(&[run_log_path(dir.path(), StrategyKind::Adaptive)], dir.path()).unwrap();
        assert_eq!(rows.len(), 1);
    }

    #[test]
    fn mixed_schema_versions_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ExperimentConfig::with_seed(2);
        cfg.suite.episodes = 5;
        cfg.strategies = vec![StrategyKind::None, StrategyKind::Adaptive];
        cfg.output.dir = dir.path().to_path_buf();
        execute(&cfg).unwrap();
        let mut logs: Vec<RunLog> = cfg
            .strategies
            .iter()
            .map(|&s| read_run_log(&run_log_path(dir.path(), s)).unwrap())
            .collect();
        logs[1].header.schema_version = 2;
        assert!(matches!(report_rows(&logs), Err(HarnessError::MixedSchema(1, 2))));
        assert!(matches!(report_rows(&[]), Err(HarnessError::NoLogs)));
    }
}
