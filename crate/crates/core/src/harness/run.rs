use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::config::{BackendKind, ExperimentConfig};
use super::{io_err, HarnessError};
use crate::agents::Backends;
use crate::analysis::{self, StrategyAggregate};
use crate::controller::{self, Controller, RunRecord, StrategyKind};
use crate::nav::{self, NavMetrics, NavMode, NavRecord};
use crate::seed;
use crate::tasks::{self, Episode};

pub const SCHEMA_VERSION: u32 = 1;
pub const SUMMARY_JSON: &str = "summary.json";
pub const NAV_METRICS_CSV: &str = "nav_metrics.csv";

/// Episodes run between flushes of the log.
const CHUNK: usize = 128;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogHeader {
    pub schema_version: u32,
    pub artifact_version: String,
    /// "run" for question answering, "nav" for navigation.
    pub kind: String,
    pub strategy: String,
    pub config: Value,
}

impl LogHeader {
    fn new(cfg: &ExperimentConfig, kind: &str, strategy: &str) -> Self {
        LogHeader {
            schema_version: SCHEMA_VERSION,
            artifact_version: env!("CARGO_PKG_VERSION").to_string(),
            kind: kind.to_string(),
            strategy: strategy.to_string(),
            config: cfg.echo(),
        }
    }

    /// The experiment config echoed in the header.
    pub fn experiment(&self) -> Result<ExperimentConfig, serde_json::Error> {
        serde_json::from_value(self.config.clone())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunLog {
    pub path: PathBuf,
    pub header: LogHeader,
    pub records: Vec<RunRecord>,
}

pub fn run_log_path(dir: &Path, strategy: StrategyKind) -> PathBuf {
    dir.join(format!("run_{strategy}.jsonl"))
}

fn wall_time_path(log: &Path) -> PathBuf {
    log.with_extension("walltime.csv")
}

pub fn write_suite(path: &Path, episodes: &[Episode]) -> Result<(), HarnessError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    for ep in episodes {
        serde_json::to_writer(&mut w, ep).expect("episode serializes");
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_suite(path: &Path) -> Result<Vec<Episode>, HarnessError> {
    let r = BufReader::new(File::open(path).map_err(io_err(path))?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| HarnessError::Log {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn load_suite(cfg: &ExperimentConfig) -> Result<Vec<Episode>, HarnessError> {
    match &cfg.suite_path {
        Some(p) => read_suite(p),
        None => Ok(tasks::generate_suite(&cfg.suite, cfg.run_seed)?),
    }
}

pub fn build_controller(cfg: &ExperimentConfig) -> Result<Controller, HarnessError> {
    let b = &cfg.backend;
    let backends = match b.kind {
        BackendKind::Synthetic => Backends::synthetic(b.policy, b.verifier, b.answer),
        BackendKind::Remote => Backends::remote(b.remote.clone())?,
    };
    Ok(Controller::new(cfg.controller.clone(), backends, cfg.noise, cfg.cost))
}

fn pool(workers: usize) -> Result<rayon::ThreadPool, HarnessError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| HarnessError::Pool(e.to_string()))
}

fn write_line<T: Serialize>(w: &mut impl Write, value: &T, path: &Path) -> Result<(), HarnessError> {
    serde_json::to_writer(&mut *w, value).expect("record serializes");
    w.write_all(b"\n").map_err(io_err(path))
}

/// Runs one strategy over `episodes`, writing its log as it goes. Records are
/// emitted in episode order whatever the worker count.
pub fn run_strategy(
    cfg: &ExperimentConfig,
    controller: &Controller,
    episodes: &[Episode],
    strategy: StrategyKind,
) -> Result<(PathBuf, Vec<RunRecord>), HarnessError> {
    let dir = &cfg.output.dir;
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let path = run_log_path(dir, strategy);
    let times_path = wall_time_path(&path);
    let mut log = BufWriter::new(File::create(&path).map_err(io_err(&path))?);
    let mut times = csv::Writer::from_path(&times_path)?;
    times.write_record(["episode_id", "wall_time_s"])?;
    write_line(&mut log, &LogHeader::new(cfg, "run", strategy.as_str()), &path)?;

    let workers = pool(cfg.workers)?;
    let mut all = Vec::with_capacity(episodes.len());
    for chunk in episodes.chunks(CHUNK) {
        let records = workers.install(|| {
            chunk
                .par_iter()
                .map(|ep| controller.run(ep, strategy, seed::for_episode(cfg.run_seed, ep.id)))
                .collect::<Result<Vec<_>, _>>()
        })?;
        for r in &records {
            write_line(&mut log, r, &path)?;
            times.write_record([r.episode_id.to_string(), format!("{:.6}", r.budget.wall_time)])?;
        }
        log.flush().map_err(io_err(&path))?;
        all.extend(records);
    }
    times.flush().map_err(io_err(&times_path))?;
    Ok((path, all))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionSummary {
    pub run_seed: u64,
    pub episodes: usize,
    pub aggregates: Vec<StrategyAggregate>,
    /// Per-episode union of none and always-on correctness, when both ran.
    pub upper_bound: Option<f64>,
    pub fallbacks: BTreeMap<StrategyKind, usize>,
    pub logs: Vec<PathBuf>,
}

/// Runs every configured strategy and writes logs plus a summary to the output directory.
pub fn execute(cfg: &ExperimentConfig) -> Result<ExecutionSummary, HarnessError> {
    cfg.validate()?;
    let episodes = load_suite(cfg)?;
    let controller = build_controller(cfg)?;
    let mut strategies: BTreeSet<StrategyKind> = cfg.strategies.iter().copied().collect();
    let want_upper = strategies.remove(&StrategyKind::UpperBound);
    if want_upper {
        strategies.insert(StrategyKind::None);
        strategies.insert(StrategyKind::AlwaysOn);
    }
    let mut summary = ExecutionSummary {
        run_seed: cfg.run_seed,
        episodes: episodes.len(),
        aggregates: Vec::new(),
        upper_bound: None,
        fallbacks: BTreeMap::new(),
        logs: Vec::new(),
    };
    let mut by_strategy = BTreeMap::new();
    for s in strategies {
        log::info!("running {s} on {} episodes", episodes.len());
        let (path, records) = run_strategy(cfg, &controller, &episodes, s)?;
        summary.aggregates.push(analysis::aggregate(&records)?);
        summary.fallbacks.insert(s, records.iter().filter(|r| r.fallback.is_some()).count());
        summary.logs.push(path);
        by_strategy.insert(s, records);
    }
    if let (Some(none), Some(always)) = (by_strategy.get(&StrategyKind::None), by_strategy.get(&StrategyKind::AlwaysOn)) {
        summary.upper_bound = Some(controller::upper_bound(none, always)?.accuracy);
    }
    let path = cfg.output.dir.join(SUMMARY_JSON);
    let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    std::fs::write(&path, text + "\n").map_err(io_err(&path))?;
    Ok(summary)
}

fn check_record(r: &RunRecord) -> Result<(), String> {
    if r.predicted >= r.answer.scores.len() {
        return Err(format!("predicted index {} outside {} choices", r.predicted, r.answer.scores.len()));
    }
    if r.correct != (r.predicted == r.truth) {
        return Err("correct flag disagrees with predicted and truth".into());
    }
    Ok(())
}

/// Reads and validates a run log; any bad line is an error.
pub fn read_run_log(path: &Path) -> Result<RunLog, HarnessError> {
    let r = BufReader::new(File::open(path).map_err(io_err(path))?);
    let mut lines = r.lines().enumerate();
    let bad = |line: usize, message: String| HarnessError::Log {
        path: path.to_path_buf(),
        line,
        message,
    };
    let header: LogHeader = match lines.next() {
        Some((_, l)) => serde_json::from_str(&l.map_err(io_err(path))?).map_err(|e| bad(1, format!("bad header: {e}")))?,
        None => return Err(bad(1, "empty log".into())),
    };
    if header.schema_version != SCHEMA_VERSION {
        return Err(HarnessError::SchemaVersion {
            path: path.to_path_buf(),
            found: header.schema_version,
            expected: SCHEMA_VERSION,
        });
    }
    if header.kind != "run" {
        return Err(bad(1, format!("expected a run log, found kind {:?}", header.kind)));
    }
    let mut records = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, line) in lines {
        let line = line.map_err(io_err(path))?;
        let rec: RunRecord = serde_json::from_str(&line).map_err(|e| bad(i + 1, e.to_string()))?;
        check_record(&rec).map_err(|m| bad(i + 1, m))?;
        if rec.strategy.as_str() != header.strategy {
            return Err(bad(i + 1, format!("record strategy {} in a {} log", rec.strategy, header.strategy)));
        }
        if !seen.insert(rec.episode_id) {
            return Err(bad(i + 1, format!("duplicate episode {}", rec.episode_id)));
        }
        records.push(rec);
    }
    Ok(RunLog {
        path: path.to_path_buf(),
        header,
        records,
    })
}

/// Per-episode wall times from a log's sidecar, if it exists.
pub fn read_wall_times(log: &Path) -> Option<BTreeMap<u64, f64>> {
    let mut r = csv::Reader::from_path(wall_time_path(log)).ok()?;
    r.deserialize::<(u64, f64)>().collect::<Result<BTreeMap<_, _>, _>>().ok()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NavModeSummary {
    pub mode: NavMode,
    pub metrics: NavMetrics,
    pub wm_calls: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NavSummary {
    pub episodes: usize,
    pub modes: Vec<NavModeSummary>,
}

impl NavSummary {
    pub fn get(&self, mode: NavMode) -> Option<&NavModeSummary> {
        self.modes.iter().find(|m| m.mode == mode)
    }
}

/// Runs the navigation suite under every configured mode; writes per-mode logs and a metrics CSV.
pub fn run_nav_experiment(cfg: &ExperimentConfig) -> Result<NavSummary, HarnessError> {
    cfg.validate()?;
    let episodes = nav::generate_nav_suite(&cfg.nav.suite, cfg.run_seed)?;
    let workers = pool(cfg.workers)?;
    let dir = &cfg.output.dir;
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut summary = NavSummary {
        episodes: episodes.len(),
        modes: Vec::new(),
    };
    for &mode in &cfg.nav.modes {
        let agent = nav::NavConfig {
            mode,
            ..cfg.nav.agent.clone()
        };
        let records: Vec<NavRecord> = workers.install(|| {
            episodes
                .par_iter()
                .map(|ep| nav::run_nav(ep, &agent, seed::for_episode(cfg.run_seed, ep.id)))
                .collect::<Result<Vec<_>, _>>()
        })?;
        let mode_name = serde_json::to_value(mode).expect("mode serializes");
        let mode_name = mode_name.as_str().unwrap_or("mode");
        let path = dir.join(format!("nav_{mode_name}.jsonl"));
        let mut w = BufWriter::new(File::create(&path).map_err(io_err(&path))?);
        write_line(&mut w, &LogHeader::new(cfg, "nav", mode_name), &path)?;
        for r in &records {
            write_line(&mut w, r, &path)?;
        }
        w.flush().map_err(io_err(&path))?;
        let calls = records.iter().map(|r| r.steps.iter().map(|s| s.wm_calls as f64).sum::<f64>()).sum::<f64>() / records.len().max(1) as f64;
        summary.modes.push(NavModeSummary {
            mode,
            metrics: nav::nav_metrics(&records, &episodes),
            wm_calls: calls,
        });
    }
    let mut w = csv::Writer::from_path(dir.join(NAV_METRICS_CSV))?;
    w.write_record(["mode", "NE", "OSR", "SR", "SPL", "Avg. WM"])?;
    for m in &summary.modes {
        let name = serde_json::to_value(m.mode).expect("mode serializes");
        w.write_record([
            name.as_str().unwrap_or("").to_string(),
            format!("{:.3}", m.metrics.ne),
            format!("{:.2}", 100.0 * m.metrics.osr),
            format!("{:.2}", 100.0 * m.metrics.sr),
            format!("{:.2}", 100.0 * m.metrics.spl),
            format!("{:.2}", m.wm_calls),
        ])?;
    }
    w.flush().map_err(io_err(dir.join(NAV_METRICS_CSV)))?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(dir: &Path, workers: usize) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::with_seed(3);
        cfg.suite.episodes = 40;
        cfg.noise.p_drop = 0.2;
        cfg.strategies = vec![StrategyKind::Adaptive, StrategyKind::UpperBound];
        cfg.output.dir = dir.to_path_buf();
        cfg.workers = workers;
        cfg
    }

    #[test]
    fn logs_do_not_depend_on_worker_count() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let sa = execute(&small(a.path(), 1)).unwrap();
        let sb = execute(&small(b.path(), 4)).unwrap();
        assert_eq!(sa.aggregates.len(), 3);
        for s in [StrategyKind::None, StrategyKind::AlwaysOn, StrategyKind::Adaptive] {
            let x = std::fs::read_to_string(run_log_path(a.path(), s)).unwrap();
            let y = std::fs::read_to_string(run_log_path(b.path(), s)).unwrap();
            assert!(x == y, "{s} logs differ");
        }
        assert_eq!(sa.upper_bound, sb.upper_bound);
    }

    #[test]
    fn log_roundtrip_and_header_reruns() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small(dir.path(), 2);
        let summary = execute(&cfg).unwrap();
        let log = read_run_log(&run_log_path(dir.path(), StrategyKind::Adaptive)).unwrap();
        assert_eq!(log.records.len(), 40);
        let acc = log.records.iter().filter(|r| r.correct).count() as f64 / 40.0;
        let agg = summary.aggregates.iter().find(|a| a.strategy == StrategyKind::Adaptive).unwrap();
        assert_eq!(acc, agg.accuracy);

        // The header alone reproduces the run.
        let mut again = log.header.experiment().unwrap();
        let other = tempfile::tempdir().unwrap();
        again.output.dir = other.path().to_path_buf();
        execute(&again).unwrap();
        assert_eq!(
            std::fs::read_to_string(run_log_path(dir.path(), StrategyKind::Adaptive)).unwrap(),
            std::fs::read_to_string(run_log_path(other.path(), StrategyKind::Adaptive)).unwrap()
        );
        let times = read_wall_times(&log.path).unwrap();
        assert_eq!(times.len(), 40);
    }

    #[test]
    fn corrupt_lines_are_detected() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small(dir.path(), 1);
        cfg.strategies = vec![StrategyKind::None];
        execute(&cfg).unwrap();
        let path = run_log_path(dir.path(), StrategyKind::None);
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines: Vec<&str> = text.lines().collect();
        lines[3] = "{\"episode_id\": 2}";
        std::fs::write(&path, lines.join("\n")).unwrap();
        assert!(matches!(read_run_log(&path), Err(HarnessError::Log { line: 4, .. })));

        let bumped = text.replacen("\"schema_version\":1", "\"schema_version\":99", 1);
        std::fs::write(&path, bumped).unwrap();
        assert!(matches!(read_run_log(&path), Err(HarnessError::SchemaVersion { found: 99, .. })));
    }

    #[test]
    fn suite_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ExperimentConfig::with_seed(5);
        cfg.suite.episodes = 15;
        let eps = load_suite(&cfg).unwrap();
        let path = dir.path().join("suite.jsonl");
        write_suite(&path, &eps).unwrap();
        assert_eq!(read_suite(&path).unwrap(), eps);
        cfg.suite_path = Some(path);
        assert_eq!(load_suite(&cfg).unwrap(), eps);
    }

    #[test]
    fn nav_experiment_writes_metrics() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ExperimentConfig::with_seed(8);
        cfg.nav.suite.episodes = 6;
        cfg.output.dir = dir.path().to_path_buf();
        let s = run_nav_experiment(&cfg).unwrap();
        assert_eq!(s.modes.len(), 2);
        let csv = std::fs::read_to_string(dir.path().join(NAV_METRICS_CSV)).unwrap();
        assert!(csv.starts_with("mode,NE,OSR,SR,SPL,Avg. WM\n"));
        assert_eq!(s.get(NavMode::None).unwrap().wm_calls, 0.0);
    }
}
