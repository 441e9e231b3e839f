//! Deep ensembles: independently seeded members whose weights are averaged,
//! the equicorrelated variance law behind them, and the bootstrap study of
//! performance against ensemble size.

use std::io::Write;

use chrono::NaiveDate;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backtest::{run_backtest, BacktestConfig, BacktestError};
use crate::marketdata::{MarketTable, UniverseCalendar};
use crate::strategies::{run_member_schedule, MemberMonth, StrategyConfig, StrategyError, WeightDecision};
use crate::targetsolver::TargetPortfolio;
use crate::tensorauto::RngStream;

#[derive(Debug, Error)]
pub enum EnsembleError {
    #[error("no members to aggregate")]
    Empty,
    #[error("member {0} disagrees on assets or dates")]
    AssetMismatch(usize),
    #[error("invalid ensemble spec: {0}")]
    InvalidSpec(String),
    #[error("invalid study config: {0}")]
    InvalidStudy(String),
    #[error("pool of {pool} members is smaller than ensemble size {need}")]
    PoolTooSmall { pool: usize, need: usize },
    #[error("member {index} (seed {seed}) failed: {source}")]
    Member {
        index: usize,
        seed: u64,
        #[source]
        source: StrategyError,
    },
    #[error(transparent)]
    Strategy(#[from] StrategyError),
    #[error(transparent)]
    Backtest(#[from] BacktestError),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, EnsembleError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleSpec {
    /// Member count.
    #[serde(default = "default_members")]
    pub m: usize,
    #[serde(default)]
    pub base_seed: u64,
}

fn default_members() -> usize {
    64
}

impl EnsembleSpec {
    pub fn new(m: usize, base_seed: u64) -> Self {
        Self { m, base_seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(EnsembleError::InvalidSpec("m must be at least 1".into()));
        }
        if self.base_seed.checked_add(self.m as u64 - 1).is_none() {
            return Err(EnsembleError::InvalidSpec("member seeds overflow u64".into()));
        }
        Ok(())
    }

    /// `base_seed + i` for member `i`.
    pub fn seed(&self, index: usize) -> u64 {
        self.base_seed + index as u64
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.m).map(|i| self.seed(i)).collect()
    }
}

/// Elementwise mean of equally long weight vectors.
pub fn aggregate_weights<W: AsRef<[f64]>>(members: &[W]) -> Result<Vec<f64>> {
    let first = members.first().ok_or(EnsembleError::Empty)?.as_ref();
    let mut sum = vec![0.0; first.len()];
    for (i, w) in members.iter().enumerate() {
        let w = w.as_ref();
        if w.len() != sum.len() {
            return Err(EnsembleError::AssetMismatch(i));
        }
        sum.iter_mut().zip(w).for_each(|(s, x)| *s += x);
    }
    let m = members.len() as f64;
    Ok(sum.into_iter().map(|s| s / m).collect())
}

/// Averages decisions for one date; every member must list the same assets.
pub fn aggregate_decisions(members: &[&WeightDecision]) -> Result<WeightDecision> {
    let first = *members.first().ok_or(EnsembleError::Empty)?;
    if let Some(i) = members
        .iter()
        .position(|d| d.assets != first.assets || d.decision_date != first.decision_date)
    {
        return Err(EnsembleError::AssetMismatch(i));
    }
    let weights: Vec<&[f64]> = members.iter().map(|d| d.weights.as_slice()).collect();
    Ok(WeightDecision {
        decision_date: first.decision_date,
        assets: first.assets.clone(),
        weights: aggregate_weights(&weights)?,
        feature_end: members.iter().map(|d| d.feature_end).max().expect("non-empty"),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolMember {
    pub seed: u64,
    pub months: Vec<MemberMonth>,
}

impl PoolMember {
    pub fn decisions(&self) -> impl Iterator<Item = &WeightDecision> {
        self.months.iter().map(|m| &m.decision)
    }
}

/// Decisions of every member of one strategy over the same dates.
#[derive(Debug, Clone, PartialEq)]
pub struct MemberPool {
    pub strategy: String,
    pub dates: Vec<NaiveDate>,
    pub members: Vec<PoolMember>,
}

impl MemberPool {
    /// Checks that every member decides on every date over the same assets.
    pub fn new(strategy: String, members: Vec<PoolMember>) -> Result<Self> {
        let first = members.first().ok_or(EnsembleError::Empty)?;
        let dates: Vec<NaiveDate> = first.decisions().map(|d| d.decision_date).collect();
        for (i, m) in members.iter().enumerate() {
            let same = m.months.len() == dates.len()
                && m.decisions()
                    .zip(first.decisions())
                    .all(|(a, b)| a.decision_date == b.decision_date && a.assets == b.assets);
            if !same {
                return Err(EnsembleError::AssetMismatch(i));
            }
        }
        Ok(Self {
            strategy,
            dates,
            members,
        })
    }

    pub fn size(&self) -> usize {
        self.members.len()
    }

    pub fn decision_count(&self) -> usize {
        self.members.iter().map(|m| m.months.len()).sum()
    }

    /// Ensemble schedule of the members at `indices` (repeats allowed).
    pub fn ensemble_schedule(&self, indices: &[usize]) -> Result<Vec<WeightDecision>> {
        (0..self.dates.len())
            .map(|t| {
                let picked: Vec<&WeightDecision> =
                    indices.iter().map(|&i| &self.members[i].months[t].decision).collect();
                aggregate_decisions(&picked)
            })
            .collect()
    }

    pub fn full_ensemble(&self) -> Result<Vec<WeightDecision>> {
        self.ensemble_schedule(&(0..self.size()).collect::<Vec<_>>())
    }
}

/// Trains `spec.m` members of `cfg`, member `i` seeded with `base_seed + i`.
/// The first failing member, by index, aborts the pool.
pub fn train_pool(
    cfg: &StrategyConfig,
    spec: &EnsembleSpec,
    table: &MarketTable,
    universe: &UniverseCalendar,
    targets: &[TargetPortfolio],
    start: NaiveDate,
    end: NaiveDate,
) -> Result<MemberPool> {
    spec.validate()?;
    cfg.validate()?;
    if !cfg.method.is_learning() {
        return Err(StrategyError::NotLearning(cfg.method).into());
    }
    let members: Vec<Result<PoolMember>> = (0..spec.m)
        .into_par_iter()
        .map(|i| {
            let seed = spec.seed(i);
            run_member_schedule(cfg, seed, table, universe, targets, start, end)
                .map(|months| PoolMember { seed, months })
                .map_err(|source| EnsembleError::Member { index: i, seed, source })
        })
        .collect();
    let members = members.into_iter().collect::<Result<Vec<_>>>()?;
    MemberPool::new(cfg.name(), members)
}

/// `sigma^2 (1 + (m - 1) rho) / m`.
pub fn predicted_ensemble_variance(sigma: f64, rho: f64, m: usize) -> f64 {
    sigma * sigma * (1.0 + (m as f64 - 1.0) * rho) / m as f64
}

/// Empirical variance of the mean of `m` equicorrelated Gaussians over
/// `trials` draws, next to the closed form.
///
/// Each draw is `sigma (sqrt(rho) z0 + sqrt(1 - rho) z_i)` with independent
/// standard normals, which has variance `sigma^2` and pairwise correlation
/// `rho`.
pub fn ensemble_variance_check(
    sigma: f64,
    rho: f64,
    m: usize,
    trials: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if trials < 10_000 {
        return Err(EnsembleError::InvalidStudy("trials must be at least 10000".into()));
    }
    if m == 0 || !(sigma > 0.0) || !(0.0..1.0).contains(&rho) {
        return Err(EnsembleError::InvalidStudy("need m >= 1, sigma > 0, rho in [0, 1)".into()));
    }
    let mut rng = RngStream::new(seed);
    let (a, b) = (rho.sqrt(), (1.0 - rho).sqrt());
    let means: Vec<f64> = (0..trials)
        .map(|_| {
            let z0: f64 = rng.sample(StandardNormal);
            let idio: f64 = (0..m).map(|_| rng.sample::<f64, _>(StandardNormal)).sum::<f64>() / m as f64;
            sigma * (a * z0 + b * idio)
        })
        .collect();
    let n = trials as f64;
    let mu = means.iter().sum::<f64>() / n;
    let var = means.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / (n - 1.0);
    Ok((var, predicted_ensemble_variance(sigma, rho, m)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BootstrapStudyConfig {
    #[serde(default = "default_sizes")]
    pub ensemble_sizes: Vec<usize>,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default)]
    pub seed: u64,
    /// Draw members with replacement. Without it each draw is a subset.
    #[serde(default = "default_true")]
    pub with_replacement: bool,
}

fn default_sizes() -> Vec<usize> {
    vec![1, 2, 4, 8, 16, 32, 64]
}

fn default_iterations() -> usize {
    200
}

fn default_true() -> bool {
    true
}

impl Default for BootstrapStudyConfig {
    fn default() -> Self {
        Self {
            ensemble_sizes: default_sizes(),
            iterations: default_iterations(),
            seed: 0,
            with_replacement: true,
        }
    }
}

impl BootstrapStudyConfig {
    /// Checks the config against a pool of `pool` members.
    pub fn validate(&self, pool: usize) -> Result<()> {
        if self.ensemble_sizes.is_empty() || self.ensemble_sizes.contains(&0) {
            return Err(EnsembleError::InvalidStudy("sizes must be non-empty and positive".into()));
        }
        if self.iterations == 0 {
            return Err(EnsembleError::InvalidStudy("iterations must be positive".into()));
        }
        let need = *self.ensemble_sizes.iter().max().expect("non-empty");
        if pool < need {
            return Err(EnsembleError::PoolTooSmall { pool, need });
        }
        Ok(())
    }
}

/// Headline metric tracked by the study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StudyMetric {
    #[serde(rename = "CR")]
    CumulativeReturn,
    #[serde(rename = "SH")]
    Sharpe,
    #[serde(rename = "SO")]
    Sortino,
}

impl StudyMetric {
    pub const ALL: [StudyMetric; 3] = [StudyMetric::CumulativeReturn, StudyMetric::Sharpe, StudyMetric::Sortino];

    pub fn code(self) -> &'static str {
        match self {
            StudyMetric::CumulativeReturn => "CR",
            StudyMetric::Sharpe => "SH",
            StudyMetric::Sortino => "SO",
        }
    }
}

/// Five-number summary of one metric at one ensemble size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub metric: StudyMetric,
    pub ensemble_size: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    /// Iterations where the metric was defined.
    pub count: usize,
}

impl StudyRow {
    pub fn iqr(&self) -> f64 {
        self.q3 - self.q1
    }
}

/// Raw per-iteration metrics of one ensemble size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeSamples {
    pub ensemble_size: usize,
    /// `[CR, SH, SO]` per iteration; undefined ratios are `None`.
    pub values: Vec<[Option<f64>; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyResult {
    pub samples: Vec<SizeSamples>,
    pub rows: Vec<StudyRow>,
}

impl StudyResult {
    pub fn row(&self, metric: StudyMetric, size: usize) -> Option<&StudyRow> {
        self.rows
            .iter()
            .find(|r| r.metric == metric && r.ensemble_size == size)
    }
}

/// Sample quantile with linear interpolation between order statistics
/// (Hyndman-Fan type 7). `sorted` must be ascending and non-empty.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Member indices for one iteration, drawn from its own stream.
fn draw_members(pool: usize, size: usize, with_replacement: bool, rng: &mut RngStream) -> Vec<usize> {
    if with_replacement {
        (0..size).map(|_| rng.gen_range(0..pool)).collect()
    } else {
        let mut idx: Vec<usize> = (0..pool).collect();
        for i in 0..size {
            let j = rng.gen_range(i..pool);
            idx.swap(i, j);
        }
        idx.truncate(size);
        // Sorted so the averaging order, and hence the bits, depend only on
        // the subset.
        idx.sort_unstable();
        idx
    }
}

/// For every ensemble size and iteration: draw members, average their
/// weights per date, backtest, record CR, Sharpe and Sortino. Iteration `k`
/// of size index `s` uses stream `(s << 32) | k` of `cfg.seed`.
pub fn bootstrap_study(
    pool: &MemberPool,
    cfg: &BootstrapStudyConfig,
    table: &MarketTable,
    backtest: &BacktestConfig,
) -> Result<StudyResult> {
    cfg.validate(pool.size())?;
    let mut samples = Vec::with_capacity(cfg.ensemble_sizes.len());
    for (s, &size) in cfg.ensemble_sizes.iter().enumerate() {
        let values = (0..cfg.iterations)
            .into_par_iter()
            .map(|k| {
                let mut rng = RngStream::with_stream(cfg.seed, ((s as u64) << 32) | k as u64);
                let picked = draw_members(pool.size(), size, cfg.with_replacement, &mut rng);
                let schedule = pool.ensemble_schedule(&picked)?;
                let report = run_backtest(&schedule, table, backtest)?;
                let sm = report.summary;
                Ok([Some(sm.cumulative_return), sm.sharpe, sm.sortino])
            })
            .collect::<Result<Vec<_>>>()?;
        samples.push(SizeSamples {
            ensemble_size: size,
            values,
        });
    }
    let mut rows = Vec::new();
    for (j, metric) in StudyMetric::ALL.into_iter().enumerate() {
        for s in &samples {
            let mut v: Vec<f64> = s.values.iter().filter_map(|x| x[j]).collect();
            v.sort_by(f64::total_cmp);
            let q = |p: f64| if v.is_empty() { f64::NAN } else { quantile(&v, p) };
            rows.push(StudyRow {
                metric,
                ensemble_size: s.ensemble_size,
                min: q(0.0),
                q1: q(0.25),
                median: q(0.5),
                q3: q(0.75),
                max: q(1.0),
                count: v.len(),
            });
        }
    }
    Ok(StudyResult { samples, rows })
}

/// `metric,ensemble_size,min,q1,median,q3,max`.
pub fn write_study_csv<W: Write>(study: &StudyResult, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["metric", "ensemble_size", "min", "q1", "median", "q3", "max"])?;
    for r in &study.rows {
        w.write_record([
            r.metric.code().to_string(),
            r.ensemble_size.to_string(),
            r.min.to_string(),
            r.q1.to_string(),
            r.median.to_string(),
            r.q3.to_string(),
            r.max.to_string(),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}
