use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use imagine_core::controller::StrategyKind;
use imagine_core::harness::{self, ExperimentConfig};

#[derive(Parser, Debug)]
#[command(name = "imagine", version, about = "Run and analyse adaptive world-model imagination experiments")]
struct Cli {
    /// Experiment config (JSON). Without one, defaults are used and --seed is required.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides run_seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Base URL of a remote model server; selects the remote backend.
    #[arg(long, global = true, env = "IMAGINE_ENDPOINT", hide_env_values = true)]
    endpoint: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the episode suite as JSONL.
    Gen {
        /// Defaults to <out>/suite.jsonl.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Execute strategies and write run logs.
    Run {
        /// Replaces the configured strategy list; repeatable.
        #[arg(long = "strategy", value_parser = parse_strategy)]
        strategies: Vec<StrategyKind>,
    },
    /// Case taxonomy, view curve, frontier, error breakdown and gating quality.
    Analyze,
    /// Run the navigation suite.
    Nav,
    /// Build the accuracy/cost table from run logs.
    Report {
        /// Run logs; defaults to every run_*.jsonl in the output directory.
        logs: Vec<PathBuf>,
    },
}

fn parse_strategy(s: &str) -> Result<StrategyKind, String> {
    StrategyKind::ALL
        .into_iter()
        .find(|k| k.as_str() == s)
        .ok_or_else(|| format!("unknown strategy {s:?}; expected one of none, always_on, gating_only, adaptive, upper_bound"))
}

fn resolve_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match (&cli.config, cli.seed) {
        (Some(path), _) => harness::load_config(path).with_context(|| format!("loading {}", path.display()))?,
        (None, Some(seed)) => ExperimentConfig::with_seed(seed),
        (None, None) => bail!("either --config or --seed is required"),
    };
    if let Some(seed) = cli.seed {
        cfg.run_seed = seed;
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    if let Some(out) = &cli.out {
        cfg.output.dir = out.clone();
    }
    if let Some(endpoint) = &cli.endpoint {
        cfg.backend.kind = harness::BackendKind::Remote;
        cfg.backend.remote.endpoint = endpoint.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn pct(x: f64) -> String {
    format!("{:.1}", 100.0 * x)
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let mut cfg = resolve_config(&cli)?;
    match cli.command {
        Command::Gen { output } => {
            let episodes = harness::load_suite(&cfg)?;
            let path = output.unwrap_or_else(|| cfg.output.dir.join("suite.jsonl"));
            harness::write_suite(&path, &episodes)?;
            println!("wrote {} episodes to {}", episodes.len(), path.display());
        }
        Command::Run { strategies } => {
            if !strategies.is_empty() {
                cfg.strategies = strategies;
            }
            let summary = harness::execute(&cfg)?;
            println!("strategy\taccuracy\tavg_wm\ttokens\tfallbacks");
            for a in &summary.aggregates {
                println!(
                    "{}\t{}\t{:.3}\t{:.0}\t{}",
                    a.strategy,
                    pct(a.accuracy),
                    a.wm_calls,
                    a.pseudo_tokens,
                    summary.fallbacks.get(&a.strategy).copied().unwrap_or(0)
                );
            }
            if let Some(ub) = summary.upper_bound {
                println!("upper_bound\t{}", pct(ub));
            }
        }
        Command::Analyze => {
            let s = harness::analyze(&cfg)?;
            for p in &s.view_curve {
                println!("views={}\taccuracy={}", p.views, pct(p.accuracy));
            }
            if let Some(c) = &s.cases {
                for (label, f) in &c.fractions {
                    println!("{}\t{}", label.as_str(), pct(*f));
                }
            }
            println!("analysis written to {}", cfg.output.dir.display());
        }
        Command::Nav => {
            let s = harness::run_nav_experiment(&cfg)?;
            println!("mode\tNE\tOSR\tSR\tSPL\tavg_wm");
            for m in &s.modes {
                println!(
                    "{:?}\t{:.2}\t{}\t{}\t{}\t{:.2}",
                    m.mode,
                    m.metrics.ne,
                    pct(m.metrics.osr),
                    pct(m.metrics.sr),
                    pct(m.metrics.spl),
                    m.wm_calls
                );
            }
        }
        Command::Report { logs } => {
            let logs = if logs.is_empty() {
                StrategyKind::ALL
                    .into_iter()
                    .map(|s| harness::run_log_path(&cfg.output.dir, s))
                    .filter(|p| p.exists())
                    .collect()
            } else {
                logs
            };
            if logs.is_empty() {
                bail!("no run logs found in {}", cfg.output.dir.display());
            }
            let rows = harness::report(&logs, &cfg.output.dir)?;
            println!("{}", harness::REPORT_COLUMNS.join("\t"));
            for r in rows {
                let cats: Vec<String> = imagine_core::tasks::QuestionCategory::ALL
                    .iter()
                    .map(|c| r.per_category.get(c).map_or(String::new(), |v| format!("{v:.1}")))
                    .collect();
                let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.2}"));
                println!("{}\t{}\t{:.1}\t{}\t{}", r.strategy, cats.join("\t"), r.avg, opt(r.tokens_k), opt(r.avg_wm));
            }
        }
    }
    Ok(())
}
