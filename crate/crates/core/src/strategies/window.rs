use std::collections::BTreeMap;

use chrono::NaiveDate;
use log::debug;
use serde::{Deserialize, Serialize};

use super::{Method, Result, StrategyConfig, StrategyError};
use crate::marketdata::{
    preprocess_features, FeatureWindow, MarketDataError, MarketTable, UniverseCalendar,
};
use crate::targetsolver::TargetPortfolio;
use crate::tensorauto::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub enum Label {
    /// DSL: target portfolio weights over the sample's assets.
    Weights(Vec<f64>),
    /// E2E: `h x n` daily simple returns following the rebalance date.
    ForwardReturns(Tensor),
    /// PFL: per-asset cumulative simple return over the same days.
    CumulativeReturns(Vec<f64>),
}

/// Dates a sample depends on, for look-ahead audits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleProvenance {
    pub rebalance_date: NaiveDate,
    /// Latest bar read by any feature window.
    pub feature_end: NaiveDate,
    /// Latest bar read by the label.
    pub label_end: NaiveDate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub rebalance_date: NaiveDate,
    pub assets: Vec<String>,
    pub features: Vec<FeatureWindow>,
    pub label: Label,
    pub label_end: NaiveDate,
}

impl TrainSample {
    pub fn provenance(&self) -> SampleProvenance {
        SampleProvenance {
            rebalance_date: self.rebalance_date,
            feature_end: self
                .features
                .iter()
                .map(|f| f.as_of)
                .max()
                .unwrap_or(self.rebalance_date),
            label_end: self.label_end,
        }
    }
}

/// Samples for one monthly retrain. `validation` holds the final month.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainWindow {
    pub as_of: NaiveDate,
    pub samples: Vec<TrainSample>,
    pub validation: Vec<TrainSample>,
}

impl TrainWindow {
    pub fn provenance(&self) -> Vec<SampleProvenance> {
        self.samples
            .iter()
            .chain(&self.validation)
            .map(TrainSample::provenance)
            .collect()
    }
}

/// Feature window of `asset` at `date`, or `None` when its history is too
/// short or has a zero-volume bar.
pub(crate) fn features_if_available(
    table: &MarketTable,
    asset: &str,
    date: NaiveDate,
) -> Result<Option<FeatureWindow>> {
    match preprocess_features(table, asset, date) {
        Ok(f) => Ok(Some(f)),
        Err(e @ (MarketDataError::InsufficientHistory { .. } | MarketDataError::ZeroVolume { .. })) => {
            debug!("{date}: skipping {asset}: {e}");
            Ok(None)
        }
        Err(e) => Err(e.into()),
    }
}

/// Builds the training window for the decision at `as_of`.
///
/// One sample per month-end from `train_start` up to (excluding) `as_of`.
/// Labels look forward to the next rebalance date and never past `as_of`:
/// DSL uses the target portfolio of the next month-end, E2E and PFL the
/// `horizon` daily returns after the sample date, truncated at `as_of`.
pub fn build_train_window(
    table: &MarketTable,
    universe: &UniverseCalendar,
    targets: &[TargetPortfolio],
    cfg: &StrategyConfig,
    as_of: NaiveDate,
) -> Result<TrainWindow> {
    cfg.validate()?;
    if !cfg.method.is_learning() {
        return Err(StrategyError::NotLearning(cfg.method));
    }
    let train_start = cfg.train_start.expect("validated");
    let as_of_day = table
        .day_index(as_of)
        .ok_or(StrategyError::UnknownDate(as_of))?;
    let days: Vec<usize> = table
        .month_end_days(train_start, as_of)
        .into_iter()
        .filter(|&d| d < as_of_day)
        .collect();
    if days.is_empty() {
        return Err(StrategyError::NoSamples(as_of));
    }
    let by_date: BTreeMap<NaiveDate, &TargetPortfolio> =
        targets.iter().map(|t| (t.rebalance_date, t)).collect();

    let mut samples = Vec::with_capacity(days.len());
    for (i, &day) in days.iter().enumerate() {
        let next_day = days.get(i + 1).copied().unwrap_or(as_of_day);
        if let Some(s) = build_sample(table, universe, &by_date, cfg, day, next_day, as_of_day)? {
            samples.push(s);
        }
    }
    let last_date = table.calendar()[*days.last().expect("non-empty")];
    match samples.last() {
        Some(s) if s.rebalance_date == last_date => {}
        _ => return Err(StrategyError::NoValidation(as_of)),
    }
    let validation = vec![samples.pop().expect("checked")];
    if samples.is_empty() {
        return Err(StrategyError::NoSamples(as_of));
    }
    Ok(TrainWindow {
        as_of,
        samples,
        validation,
    })
}

fn build_sample(
    table: &MarketTable,
    universe: &UniverseCalendar,
    targets: &BTreeMap<NaiveDate, &TargetPortfolio>,
    cfg: &StrategyConfig,
    day: usize,
    next_day: usize,
    as_of_day: usize,
) -> Result<Option<TrainSample>> {
    let date = table.calendar()[day];
    let target = if cfg.method == Method::Dsl {
        let label_date = table.calendar()[next_day];
        Some(
            *targets
                .get(&label_date)
                .ok_or(StrategyError::MissingTarget(label_date))?,
        )
    } else {
        None
    };
    let end_day = (day + cfg.horizon).min(as_of_day);

    let mut assets = Vec::new();
    let mut features = Vec::new();
    let mut columns = Vec::new();
    let mut weights = Vec::new();
    for m in universe.universe_at(date) {
        let Some(f) = features_if_available(table, &m, date)? else {
            continue;
        };
        let a = table
            .asset_index(&m)
            .ok_or_else(|| MarketDataError::UnknownAsset(m.clone()))?;
        match target {
            Some(t) => match t.weight_of(&m) {
                Some(w) => weights.push(w),
                None => continue,
            },
            None => {
                if (day..=end_day).any(|d| table.bar(d, a).is_none()) {
                    continue;
                }
            }
        }
        assets.push(m);
        features.push(f);
        columns.push(a);
    }
    if assets.is_empty() {
        return Ok(None);
    }

    let (label, label_end) = match target {
        Some(t) => {
            let total: f64 = weights.iter().sum();
            if !(total > 0.0) {
                return Ok(None);
            }
            if assets.len() != t.assets.len() {
                weights.iter_mut().for_each(|w| *w /= total);
            }
            (Label::Weights(weights), t.rebalance_date)
        }
        None => {
            let h = end_day - day;
            if h < 2 {
                return Ok(None);
            }
            let close = |d: usize, a: usize| table.close(d, a).expect("checked above");
            let label = match cfg.method {
                Method::E2e => {
                    let mut data = Vec::with_capacity(h * columns.len());
                    for d in day + 1..=end_day {
                        for &a in &columns {
                            data.push(close(d, a) / close(d - 1, a) - 1.0);
                        }
                    }
                    Label::ForwardReturns(Tensor::new(h, columns.len(), data))
                }
                _ => Label::CumulativeReturns(
                    columns
                        .iter()
                        .map(|&a| close(end_day, a) / close(day, a) - 1.0)
                        .collect(),
                ),
            };
            (label, table.calendar()[end_day])
        }
    };
    Ok(Some(TrainSample {
        rebalance_date: date,
        assets,
        features,
        label,
        label_end,
    }))
}
