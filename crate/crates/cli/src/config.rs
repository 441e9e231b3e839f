//! Experiment configuration files.
//!
//! One TOML file describes the data, the target portfolios, every strategy
//! of the experiment grid, the ensemble size and the backtest. Relative
//! paths resolve against the directory of the config file.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use dslq_core::backtest::BacktestConfig;
use dslq_core::ensemble::{BootstrapStudyConfig, EnsembleSpec};
use dslq_core::marketdata::{
    generate_synthetic_market, load_ohlcv_csv, load_universe_csv, MarketTable, SynthConfig,
    UniverseCalendar,
};
use dslq_core::strategies::{Method, StrategyConfig};
use dslq_core::targetsolver::{Objective, TargetSpec};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Long-format OHLCV file.
    #[serde(default)]
    pub csv: Option<PathBuf>,
    /// Inline synthetic market, used when `csv` is absent.
    #[serde(default)]
    pub synth: Option<SynthConfig>,
    /// `asset,start,end` membership file; every asset always when absent.
    #[serde(default)]
    pub universe: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct TargetConfig {
    /// Objectives to solve in `dslq target`; defaults to those of the DSL
    /// strategies, or MaxSharpe when there are none.
    #[serde(default)]
    pub objectives: Vec<Objective>,
    #[serde(default)]
    pub lookback: Option<usize>,
    /// Schedule range; defaults to the earliest train_start (or the backtest
    /// start) through the backtest end.
    #[serde(default)]
    pub start: Option<NaiveDate>,
    #[serde(default)]
    pub end: Option<NaiveDate>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    /// Members per learning strategy.
    #[serde(default = "one")]
    pub m: usize,
}

fn one() -> usize {
    1
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self { m: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    /// Name of the learning strategy whose pool is studied, e.g. `MSO_L_DSL`.
    pub strategy: String,
    /// Pool size; the largest ensemble size when absent.
    #[serde(default)]
    pub pool: Option<usize>,
    #[serde(default = "default_sizes")]
    pub ensemble_sizes: Vec<usize>,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default = "yes")]
    pub with_replacement: bool,
}

fn default_sizes() -> Vec<usize> {
    BootstrapStudyConfig::default().ensemble_sizes
}

fn default_iterations() -> usize {
    BootstrapStudyConfig::default().iterations
}

fn yes() -> bool {
    true
}

impl StudyConfig {
    pub fn pool_size(&self) -> usize {
        self.pool
            .unwrap_or_else(|| self.ensemble_sizes.iter().copied().max().unwrap_or(1))
    }

    pub fn bootstrap(&self, seed: u64) -> BootstrapStudyConfig {
        BootstrapStudyConfig {
            ensemble_sizes: self.ensemble_sizes.clone(),
            iterations: self.iterations,
            seed,
            with_replacement: self.with_replacement,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Base seed of every random stream in the run.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_universe_name")]
    pub universe_name: String,
    pub data: DataConfig,
    #[serde(default)]
    pub target: TargetConfig,
    pub backtest: BacktestConfig,
    #[serde(default)]
    pub ensemble: EnsembleConfig,
    #[serde(default, rename = "strategy")]
    pub strategies: Vec<StrategyConfig>,
    #[serde(default)]
    pub study: Option<StudyConfig>,
}

fn default_universe_name() -> String {
    "default".into()
}

/// A parsed config with the directory its relative paths resolve against.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub base_dir: PathBuf,
    pub path: PathBuf,
    pub raw: Vec<u8>,
}

pub fn load_run_config(path: &Path, seed: Option<u64>) -> Result<LoadedConfig, CliError> {
    let raw = std::fs::read(path)
        .map_err(|e| CliError::Validation(format!("cannot read {}: {e}", path.display())))?;
    let text = String::from_utf8(raw.clone())
        .map_err(|_| CliError::Validation(format!("{} is not UTF-8", path.display())))?;
    let mut config: RunConfig = toml::from_str(&text)
        .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    if let Some(s) = seed {
        config.seed = s;
    }
    for s in &mut config.strategies {
        s.seed = config.seed;
    }
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let loaded = LoadedConfig {
        config,
        base_dir,
        path: path.to_path_buf(),
        raw,
    };
    loaded.validate()?;
    Ok(loaded)
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}

impl LoadedConfig {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        self.base_dir.join(p)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let c = &self.config;
        match (&c.data.csv, &c.data.synth) {
            (Some(_), Some(_)) => return Err(invalid("data: give either `csv` or `synth`, not both")),
            (None, None) => return Err(invalid("data: one of `csv` or `synth` is required")),
            (Some(p), None) if !self.resolve(p).is_file() => {
                return Err(invalid(format!("data.csv: {} does not exist", p.display())))
            }
            (None, Some(s)) => s.validate().map_err(|e| invalid(format!("data.synth: {e}")))?,
            _ => {}
        }
        if let Some(u) = &c.data.universe {
            if !self.resolve(u).is_file() {
                return Err(invalid(format!("data.universe: {} does not exist", u.display())));
            }
        }
        c.backtest
            .validate()
            .map_err(|e| invalid(format!("backtest: {e}")))?;
        if c.ensemble.m == 0 {
            return Err(invalid("ensemble.m must be at least 1"));
        }
        let mut names = BTreeSet::new();
        for s in &c.strategies {
            s.validate()
                .map_err(|e| invalid(format!("strategy {}: {e}", s.name())))?;
            if !names.insert(s.name()) {
                return Err(invalid(format!("strategy {} listed twice", s.name())));
            }
            if let Some(ts) = s.train_start {
                if ts >= c.backtest.start {
                    return Err(invalid(format!(
                        "strategy {}: train_start {ts} must precede backtest.start {}",
                        s.name(),
                        c.backtest.start
                    )));
                }
            }
        }
        if let Some(lb) = c.target.lookback {
            self.target_spec(Objective::MaxSharpe, lb)
                .validate()
                .map_err(|e| invalid(format!("target.lookback: {e}")))?;
        }
        if let Some(study) = &c.study {
            let strategy = self.strategy(&study.strategy).ok_or_else(|| {
                invalid(format!("study.strategy: no strategy named {}", study.strategy))
            })?;
            if !strategy.method.is_learning() {
                return Err(invalid(format!("study.strategy: {} is not a learning strategy", study.strategy)));
            }
            EnsembleSpec::new(study.pool_size(), c.seed)
                .validate()
                .map_err(|e| invalid(format!("study.pool: {e}")))?;
            study
                .bootstrap(c.seed)
                .validate(study.pool_size())
                .map_err(|e| invalid(format!("study: {e}")))?;
        }
        Ok(())
    }

    pub fn strategy(&self, name: &str) -> Option<&StrategyConfig> {
        self.config.strategies.iter().find(|s| s.name() == name)
    }

    fn target_spec(&self, objective: Objective, lookback: usize) -> TargetSpec {
        TargetSpec {
            lookback,
            ..TargetSpec::new(objective)
        }
    }

    pub fn target_spec_for(&self, objective: Objective) -> TargetSpec {
        let lookback = self.config.target.lookback.unwrap_or(TargetSpec::new(objective).lookback);
        self.target_spec(objective, lookback)
    }

    /// Objectives whose target schedules the DSL strategies need.
    pub fn dsl_objectives(&self) -> Vec<Objective> {
        let set: BTreeSet<Objective> = self
            .config
            .strategies
            .iter()
            .filter(|s| s.method == Method::Dsl)
            .filter_map(|s| s.objective)
            .collect();
        set.into_iter().collect()
    }

    pub fn target_range(&self) -> (NaiveDate, NaiveDate) {
        let c = &self.config;
        let earliest = c
            .strategies
            .iter()
            .filter_map(|s| s.train_start)
            .min()
            .unwrap_or(c.backtest.start);
        (
            c.target.start.unwrap_or(earliest),
            c.target.end.unwrap_or(c.backtest.end),
        )
    }

    /// Input files the run reads, config-relative.
    pub fn input_files(&self) -> Vec<PathBuf> {
        let d = &self.config.data;
        d.csv.iter().chain(&d.universe).cloned().collect()
    }

    pub fn load_market(&self) -> Result<(MarketTable, UniverseCalendar), CliError> {
        let d = &self.config.data;
        let table = match (&d.csv, &d.synth) {
            (Some(p), _) => load_ohlcv_csv(self.resolve(p)),
            (None, Some(s)) => generate_synthetic_market(s),
            (None, None) => unreachable!("validated"),
        }
        .map_err(|e| CliError::Runtime(format!("market data: {e}")))?;
        let universe = match &d.universe {
            Some(p) => {
                let u = load_universe_csv(self.resolve(p))
                    .map_err(|e| CliError::Validation(format!("data.universe: {e}")))?;
                u.check_against(&table)
                    .map_err(|e| CliError::Validation(format!("data.universe: {e}")))?;
                u
            }
            None => UniverseCalendar::static_universe(&table),
        };
        Ok((table, universe))
    }
}
