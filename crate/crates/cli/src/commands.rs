//! The `synth`, `target`, `run` and `ensemble-study` commands.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::{error, info, warn};

use dslq_core::backtest::{run_backtest, write_equity_csv, write_summary_csv, write_trades_csv};
use dslq_core::ensemble::{bootstrap_study, train_pool, write_study_csv, EnsembleSpec, MemberPool};
use dslq_core::marketdata::{write_ohlcv_csv, generate_synthetic_market, MarketTable, SynthConfig, UniverseCalendar};
use dslq_core::strategies::{
    run_strategy_schedule, write_decisions_csv, Method, StrategyConfig, WeightDecision,
};
use dslq_core::targetsolver::{build_target_schedule, write_target_csv, Objective, TargetPortfolio};

use crate::config::LoadedConfig;
use crate::manifest::{file_digest, sha256_hex, ArtifactWriter, ExperimentManifest, Failure};
use crate::report::{mark_best, write_report_csv, SummaryRow};
use crate::{runtime, CliError};

/// Writes a synthetic market. `out` is the CSV path, or a directory that
/// receives `market.csv`. Returns the written path and its sha256.
pub fn cmd_synth(config: &Path, out: &Path, seed: Option<u64>) -> Result<(PathBuf, String), CliError> {
    let text = std::fs::read_to_string(config)
        .map_err(|e| CliError::Validation(format!("cannot read {}: {e}", config.display())))?;
    let mut cfg = SynthConfig::from_toml(&text)
        .map_err(|e| CliError::Validation(format!("{}: {e}", config.display())))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()
        .map_err(|e| CliError::Validation(format!("{}: {e}", config.display())))?;
    let table = generate_synthetic_market(&cfg).map_err(runtime)?;
    let path = if out.extension().is_some_and(|e| e == "csv") {
        out.to_path_buf()
    } else {
        out.join("market.csv")
    };
    let mut buf = Vec::new();
    write_ohlcv_csv(&table, &mut buf).map_err(runtime)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(&path, &buf).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    Ok((path, sha256_hex(&buf)))
}

/// Market, universe and the manifest skeleton shared by the config-driven
/// commands.
struct Session<'a> {
    loaded: &'a LoadedConfig,
    table: MarketTable,
    universe: UniverseCalendar,
    writer: ArtifactWriter,
    manifest: ExperimentManifest,
    targets: BTreeMap<Objective, Vec<TargetPortfolio>>,
}

impl<'a> Session<'a> {
    fn open(loaded: &'a LoadedConfig, out: &Path, command: &str) -> Result<Self, CliError> {
        let (table, universe) = loaded.load_market()?;
        let mut manifest =
            ExperimentManifest::new(command, loaded.config.clone(), sha256_hex(&loaded.raw));
        for rel in loaded.input_files() {
            let digest = file_digest(&loaded.resolve(&rel))?;
            manifest.inputs.insert(rel.to_string_lossy().replace('\\', "/"), digest);
        }
        Ok(Self {
            loaded,
            table,
            universe,
            writer: ArtifactWriter::new(out)?,
            manifest,
            targets: BTreeMap::new(),
        })
    }

    /// Target schedule for `objective`, solved once and written as
    /// `targets_{code}.csv`.
    fn targets(&mut self, objective: Objective) -> Result<&[TargetPortfolio], CliError> {
        if !self.targets.contains_key(&objective) {
            let spec = self.loaded.target_spec_for(objective);
            let (mut start, end) = self.loaded.target_range();
            // The first `lookback` days cannot carry a full return window.
            if let Some(&first) = self.table.calendar().get(spec.lookback) {
                start = start.max(first);
            }
            let schedule = build_target_schedule(&self.table, &self.universe, &spec, start, end)
                .map_err(|e| runtime(format!("targets {}: {e}", objective.code())))?;
            let unconverged = schedule.iter().filter(|t| !t.converged).count();
            info!(
                "{} targets: {} months, {} converged, {} at the iteration cap",
                objective.code(),
                schedule.len(),
                schedule.len() - unconverged,
                unconverged
            );
            if unconverged > 0 {
                warn!("{} targets: {unconverged} solves did not converge", objective.code());
            }
            self.writer.write_with(&format!("targets_{}.csv", objective.code()), |buf| {
                write_target_csv(&schedule, buf)
            })?;
            self.targets.insert(objective, schedule);
        }
        Ok(&self.targets[&objective])
    }

    /// Targets the strategy trains on; empty unless it is DSL.
    fn targets_for(&mut self, cfg: &StrategyConfig) -> Result<Vec<TargetPortfolio>, CliError> {
        match (cfg.method, cfg.objective) {
            (Method::Dsl, Some(o)) => Ok(self.targets(o)?.to_vec()),
            _ => Ok(Vec::new()),
        }
    }

    fn train(&mut self, cfg: &StrategyConfig, m: usize) -> Result<MemberPool, CliError> {
        let targets = self.targets_for(cfg)?;
        let spec = EnsembleSpec::new(m, self.loaded.config.seed);
        let bt = &self.loaded.config.backtest;
        let pool = train_pool(cfg, &spec, &self.table, &self.universe, &targets, bt.start, bt.end)
            .map_err(runtime)?;
        self.manifest.seeds.members.insert(cfg.name(), spec.seeds());
        Ok(pool)
    }

    fn finish(self) -> Result<ExperimentManifest, CliError> {
        self.writer.finish(self.manifest)
    }
}

/// Solves and writes the target schedule of every configured objective.
pub fn cmd_target(loaded: &LoadedConfig, out: &Path) -> Result<ExperimentManifest, CliError> {
    let mut session = Session::open(loaded, out, "target")?;
    let mut objectives = loaded.config.target.objectives.clone();
    if objectives.is_empty() {
        objectives = loaded.dsl_objectives();
    }
    if objectives.is_empty() {
        objectives.push(Objective::MaxSharpe);
    }
    objectives.sort();
    objectives.dedup();
    for o in objectives {
        session.targets(o)?;
    }
    session.finish()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub manifest: ExperimentManifest,
    pub rows: Vec<SummaryRow>,
}

impl RunOutcome {
    pub fn failed(&self) -> bool {
        !self.manifest.failures.is_empty()
    }
}

/// `decision_date,asset,weight` of the aggregated schedule.
fn write_schedule_csv(decisions: &[WeightDecision], buf: &mut Vec<u8>) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(buf);
    w.write_record(["decision_date", "asset", "weight"])?;
    for d in decisions {
        for (a, x) in d.assets.iter().zip(&d.weights) {
            w.write_record([d.decision_date.to_string(), a.clone(), x.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn run_strategy(session: &mut Session<'_>, cfg: &StrategyConfig) -> Result<SummaryRow, CliError> {
    let name = cfg.name();
    let bt = session.loaded.config.backtest;
    let decisions = if cfg.method.is_learning() {
        let pool = session.train(cfg, session.loaded.config.ensemble.m)?;
        let w = &session.writer;
        for (i, member) in pool.members.iter().enumerate() {
            for month in &member.months {
                if let Some(ck) = &month.checkpoint {
                    let rel = format!("checkpoints/{name}/{}/member_{i}.json", month.decision.decision_date);
                    w.write_with(&rel, |buf| serde_json::to_writer_pretty(buf, ck))?;
                }
            }
        }
        let per_member: Vec<Vec<WeightDecision>> =
            pool.members.iter().map(|m| m.decisions().cloned().collect()).collect();
        let listed: Vec<(usize, &[WeightDecision])> =
            per_member.iter().enumerate().map(|(i, d)| (i, d.as_slice())).collect();
        w.write_with(&format!("{name}_members.csv"), |buf| write_decisions_csv(cfg, &listed, buf))?;
        pool.full_ensemble().map_err(runtime)?
    } else {
        run_strategy_schedule(cfg, &session.table, &session.universe, &[], bt.start, bt.end)
            .map_err(runtime)?
    };
    let w = &session.writer;
    w.write_with(&format!("{name}_decisions.csv"), |buf| write_schedule_csv(&decisions, buf))?;
    let report = run_backtest(&decisions, &session.table, &bt).map_err(runtime)?;
    w.write_with(&format!("{name}_equity.csv"), |buf| write_equity_csv(&report, buf))?;
    w.write_with(&format!("{name}_trades.csv"), |buf| write_trades_csv(&report, buf))?;
    w.write_with(&format!("{name}_summary.csv"), |buf| {
        write_summary_csv(&[(name.clone(), report.summary)], buf)
    })?;
    info!("{name}: CR {:.4}", report.summary.cumulative_return);
    Ok(SummaryRow::new(cfg, &session.loaded.config.universe_name, &report.summary))
}

/// Runs every configured strategy end to end. A failing strategy is logged
/// and listed in the manifest; the others still run.
pub fn cmd_run(loaded: &LoadedConfig, out: &Path) -> Result<RunOutcome, CliError> {
    if loaded.config.strategies.is_empty() {
        return Err(CliError::Validation("config lists no [[strategy]]".into()));
    }
    let mut session = Session::open(loaded, out, "run")?;
    let mut rows = Vec::new();
    for cfg in &loaded.config.strategies {
        match run_strategy(&mut session, cfg) {
            Ok(row) => rows.push(row),
            Err(e) => {
                error!("{}: {e}", cfg.name());
                session.manifest.failures.push(Failure {
                    strategy: cfg.name(),
                    error: e.to_string(),
                });
            }
        }
    }
    mark_best(&mut rows);
    if !rows.is_empty() {
        session
            .writer
            .write_with("summary.csv", |buf| write_report_csv(&rows, buf))?;
    }
    let manifest = session.finish()?;
    Ok(RunOutcome { manifest, rows })
}

/// Trains the study pool and writes `ensemble_study_{name}.csv`. Pool size
/// against ensemble sizes is checked when the config loads, before any
/// training.
pub fn cmd_ensemble_study(loaded: &LoadedConfig, out: &Path) -> Result<ExperimentManifest, CliError> {
    let study = loaded
        .config
        .study
        .clone()
        .ok_or_else(|| CliError::Validation("config has no [study] table".into()))?;
    let cfg = loaded
        .strategy(&study.strategy)
        .cloned()
        .ok_or_else(|| CliError::Validation(format!("no strategy named {}", study.strategy)))?;
    let mut session = Session::open(loaded, out, "ensemble-study")?;
    let pool = session.train(&cfg, study.pool_size())?;
    let name = cfg.name();
    let per_member: Vec<Vec<WeightDecision>> =
        pool.members.iter().map(|m| m.decisions().cloned().collect()).collect();
    let listed: Vec<(usize, &[WeightDecision])> =
        per_member.iter().enumerate().map(|(i, d)| (i, d.as_slice())).collect();
    session
        .writer
        .write_with(&format!("{name}_members.csv"), |buf| write_decisions_csv(&cfg, &listed, buf))?;
    let bootstrap = study.bootstrap(loaded.config.seed);
    let result = bootstrap_study(&pool, &bootstrap, &session.table, &loaded.config.backtest)
        .map_err(runtime)?;
    session
        .writer
        .write_with(&format!("ensemble_study_{name}.csv"), |buf| write_study_csv(&result, buf))?;
    session.manifest.seeds.bootstrap = Some(bootstrap.seed);
    session.finish()
}
