//! Monthly supervised targets: long-only portfolios that maximize the sample
//! Sharpe or Sortino ratio over a trailing window, solved with Dinkelbach's
//! parametric iteration.

mod brute;
mod dinkelbach;
mod schedule;

pub use brute::brute_force_target;
pub use dinkelbach::{portfolio_ratio, solve_mean_variance, solve_target, TargetSolution};
pub use schedule::{build_target_schedule, read_target_csv, write_target_csv, TargetPortfolio};
pub(crate) use schedule::trailing_returns;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::marketdata::MarketDataError;

#[derive(Debug, Error)]
pub enum TargetError {
    #[error("degenerate window: the ratio denominator is zero for every portfolio")]
    DegenerateWindow,
    #[error("Dinkelbach iteration hit the cap of {0} without converging")]
    NoConvergence(usize),
    #[error("brute force supports at most 3 assets, got {0}")]
    TooManyAssets(usize),
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("window has {rows} rows, need at least 2 and {cols} >= 1 columns")]
    BadWindow { rows: usize, cols: usize },
    #[error("empty universe at {0}")]
    EmptyUniverse(chrono::NaiveDate),
    #[error("no asset has {need} days of history at {date}")]
    InsufficientHistory { date: chrono::NaiveDate, need: usize },
    #[error(transparent)]
    MarketData(#[from] MarketDataError),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed target file: {0}")]
    Malformed(String),
}

pub type Result<T> = std::result::Result<T, TargetError>;

/// Ratio maximized by the target portfolio.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Objective {
    #[serde(rename = "MSH")]
    MaxSharpe,
    #[serde(rename = "MSO")]
    MaxSortino,
}

impl Objective {
    pub fn code(self) -> &'static str {
        match self {
            Objective::MaxSharpe => "MSH",
            Objective::MaxSortino => "MSO",
        }
    }

    pub fn from_code(code: &str) -> Option<Self> {
        match code {
            "MSH" => Some(Objective::MaxSharpe),
            "MSO" => Some(Objective::MaxSortino),
            _ => None,
        }
    }
}

impl std::fmt::Display for Objective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.code())
    }
}

/// Inner solver settings for the concave parametric subproblem.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubproblemConfig {
    /// Initial step as a fraction of `1 / L`, where `L` bounds the gradient's
    /// Lipschitz constant at the warm start.
    pub step_scale: f64,
    pub max_iters: usize,
    /// Stop once an accepted step moves the iterate less than this (L2).
    pub tol: f64,
}

impl Default for SubproblemConfig {
    fn default() -> Self {
        Self {
            step_scale: 0.1,
            max_iters: 2000,
            tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetSpec {
    pub objective: Objective,
    pub lookback: usize,
    pub dinkelbach_tol: f64,
    pub max_outer_iters: usize,
    pub subproblem: SubproblemConfig,
}

impl TargetSpec {
    pub fn new(objective: Objective) -> Self {
        Self {
            objective,
            lookback: 21,
            dinkelbach_tol: 1e-8,
            max_outer_iters: 100,
            subproblem: SubproblemConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lookback < 2 {
            return Err(TargetError::InvalidSpec("lookback must be at least 2".into()));
        }
        if !(self.dinkelbach_tol > 0.0) || !(self.subproblem.tol > 0.0) {
            return Err(TargetError::InvalidSpec("tolerances must be positive".into()));
        }
        if !(self.subproblem.step_scale > 0.0) {
            return Err(TargetError::InvalidSpec("step_scale must be positive".into()));
        }
        if self.max_outer_iters == 0 || self.subproblem.max_iters == 0 {
            return Err(TargetError::InvalidSpec("iteration caps must be positive".into()));
        }
        Ok(())
    }
}
