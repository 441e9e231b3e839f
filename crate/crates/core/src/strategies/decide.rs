use chrono::NaiveDate;
use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;

use super::train::score_windows;
use super::window::features_if_available;
use super::{
    build_train_window, train_member, Method, ModelCheckpoint, PflStage2, Result,
    SampleProvenance, StrategyConfig, StrategyError, WeightDecision,
};
use crate::marketdata::{MarketTable, UniverseCalendar};
use crate::metrics::sample_mean_cov;
use crate::targetsolver::{
    solve_mean_variance, solve_target, trailing_returns, Objective, SubproblemConfig,
    TargetError, TargetPortfolio, TargetSpec,
};
use crate::tensorauto::allocation_weights;

/// One month of one member: the decision, the model behind it and the
/// dates its training data touched.
#[derive(Debug, Clone, PartialEq)]
pub struct MemberMonth {
    pub decision: WeightDecision,
    pub checkpoint: Option<ModelCheckpoint>,
    pub provenance: Vec<SampleProvenance>,
}

fn day_of(table: &MarketTable, date: NaiveDate) -> Result<usize> {
    table.day_index(date).ok_or(StrategyError::UnknownDate(date))
}

fn one_hot_best(mu: &[f64]) -> Vec<f64> {
    let best = (0..mu.len()).fold(0, |b, j| if mu[j] > mu[b] { j } else { b });
    (0..mu.len()).map(|j| if j == best { 1.0 } else { 0.0 }).collect()
}

/// PFL second stage: predicted `horizon`-day returns `mu_hat` and the
/// trailing daily return window `r` (`lookback x n`) to weights.
pub(crate) fn pfl_stage2(
    mu_hat: &[f64],
    r: ArrayView2<'_, f64>,
    cfg: &StrategyConfig,
) -> Result<Vec<f64>> {
    let horizon = cfg.horizon as f64;
    let daily: Vec<f64> = mu_hat.iter().map(|m| m / horizon).collect();
    match cfg.pfl_stage2 {
        PflStage2::Ratio => {
            // Keep the trailing co-movement, replace the mean by the forecast.
            let means = r.mean_axis(ndarray::Axis(0)).expect("non-empty window");
            let shifted = Array2::from_shape_fn(r.dim(), |(t, j)| r[[t, j]] - means[j] + daily[j]);
            let objective = cfg.objective.unwrap_or(Objective::MaxSharpe);
            let spec = TargetSpec {
                lookback: r.nrows(),
                ..TargetSpec::new(objective)
            };
            match solve_target(shifted.view(), &spec) {
                Ok(sol) => Ok(sol.weights),
                // No dispersion (or no downside) left: every portfolio ties
                // on risk, so take the best forecast.
                Err(TargetError::DegenerateWindow) => Ok(one_hot_best(&daily)),
                Err(e) => Err(e.into()),
            }
        }
        PflStage2::MeanVariance { risk_aversion } => {
            let (_, cov) = sample_mean_cov(r).map_err(|e| StrategyError::InvalidConfig(e.to_string()))?;
            Ok(solve_mean_variance(&daily, cov.view(), risk_aversion, &SubproblemConfig::default()))
        }
    }
}

/// Weights for `decision_date` from a trained member.
///
/// Universe members without a full feature window are left out. DSL and E2E
/// softmax the per-asset scores; PFL treats them as forecasts of the next
/// `horizon`-day return and optimizes.
pub fn decide_weights(
    checkpoint: &ModelCheckpoint,
    cfg: &StrategyConfig,
    table: &MarketTable,
    universe: &UniverseCalendar,
    decision_date: NaiveDate,
) -> Result<WeightDecision> {
    if !cfg.method.is_learning() {
        return Err(StrategyError::NotLearning(cfg.method));
    }
    let day = day_of(table, decision_date)?;
    let members = universe.universe_at(decision_date);
    if members.is_empty() {
        return Err(StrategyError::EmptyUniverse(decision_date));
    }
    let mut assets = Vec::new();
    let mut features = Vec::new();
    for m in members {
        if let Some(f) = features_if_available(table, &m, decision_date)? {
            // PFL also needs the trailing return window.
            let a = table.asset_index(&m).expect("features found the asset");
            if cfg.method == Method::Pfl && table.history_len(day, a) <= cfg.lookback {
                continue;
            }
            assets.push(m);
            features.push(f);
        }
    }
    if assets.is_empty() {
        return Err(StrategyError::InsufficientHistory(decision_date));
    }
    let feature_end = features.iter().map(|f| f.as_of).max().expect("non-empty");
    let weights = if assets.len() == 1 {
        vec![1.0]
    } else {
        let windows: Vec<&[f64]> = features.iter().map(|f| f.values.as_slice()).collect();
        let scores = score_windows(&checkpoint.params, &windows)?;
        if cfg.method.uses_softmax() {
            allocation_weights(&scores)?
        } else {
            let columns: Vec<usize> = assets
                .iter()
                .map(|a| table.asset_index(a).expect("known"))
                .collect();
            let r = trailing_returns(table, day, &columns, cfg.lookback);
            pfl_stage2(&scores, r.view(), cfg)?
        }
    };
    Ok(WeightDecision {
        decision_date,
        assets,
        weights,
        feature_end,
    })
}

/// Equal or cap weights over the universe members trading on `date`.
pub fn baseline_weights(
    method: Method,
    table: &MarketTable,
    universe: &UniverseCalendar,
    date: NaiveDate,
) -> Result<WeightDecision> {
    let day = day_of(table, date)?;
    let mut assets = Vec::new();
    let mut raw = Vec::new();
    for m in universe.universe_at(date) {
        let Some(a) = table.asset_index(&m) else {
            continue;
        };
        if table.bar(day, a).is_none() {
            continue;
        }
        raw.push(match method {
            Method::Ew => 1.0,
            Method::Vw => table
                .cap(day, a)
                .filter(|c| *c > 0.0)
                .ok_or_else(|| StrategyError::MissingCaps {
                    asset: m.clone(),
                    date,
                })?,
            other => return Err(StrategyError::InvalidConfig(format!("{other} is not a baseline"))),
        });
        assets.push(m);
    }
    if assets.is_empty() {
        return Err(StrategyError::EmptyUniverse(date));
    }
    let total: f64 = raw.iter().sum();
    let n = assets.len() as f64;
    let weights = raw
        .iter()
        .map(|x| if method == Method::Ew { 1.0 / n } else { x / total })
        .collect();
    Ok(WeightDecision {
        decision_date: date,
        assets,
        weights,
        feature_end: date,
    })
}

/// Every month-end decision in `[start, end]` for one member seed. Months
/// train in parallel; the result is in date order.
pub fn run_member_schedule(
    cfg: &StrategyConfig,
    seed: u64,
    table: &MarketTable,
    universe: &UniverseCalendar,
    targets: &[TargetPortfolio],
    start: NaiveDate,
    end: NaiveDate,
) -> Result<Vec<MemberMonth>> {
    cfg.validate()?;
    let dates = table.month_ends(start, end);
    dates
        .par_iter()
        .map(|&date| {
            if !cfg.method.is_learning() {
                return Ok(MemberMonth {
                    decision: baseline_weights(cfg.method, table, universe, date)?,
                    checkpoint: None,
                    provenance: Vec::new(),
                });
            }
            let window = build_train_window(table, universe, targets, cfg, date)?;
            let checkpoint = train_member(&window, cfg, seed)?;
            let decision = decide_weights(&checkpoint, cfg, table, universe, date)?;
            Ok(MemberMonth {
                decision,
                checkpoint: Some(checkpoint),
                provenance: window.provenance(),
            })
        })
        .collect()
}

/// Decisions of a single member seeded with `cfg.seed`.
pub fn run_strategy_schedule(
    cfg: &StrategyConfig,
    table: &MarketTable,
    universe: &UniverseCalendar,
    targets: &[TargetPortfolio],
    start: NaiveDate,
    end: NaiveDate,
) -> Result<Vec<WeightDecision>> {
    Ok(
        run_member_schedule(cfg, cfg.seed, table, universe, targets, start, end)?
            .into_iter()
            .map(|m| m.decision)
            .collect(),
    )
}
