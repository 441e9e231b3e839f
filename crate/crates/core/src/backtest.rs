//! Daily close-to-close simulator for weight schedules.
//!
//! A decision dated `d` executes at the close of the `lag_days`-th trading
//! day after `d`. Costs are proportional to traded notional on each side.
//! Cash earns nothing. Positions are fractional share counts and never
//! negative.

use std::collections::{BTreeMap, VecDeque};
use std::io::Write;

use chrono::NaiveDate;
use log::{debug, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::marketdata::MarketTable;
use crate::metrics::{
    simple_returns, summarize_equity, MetricsError, PerformanceSummary, ReturnSeries, TRADING_DAYS_PER_YEAR,
};
use crate::strategies::WeightDecision;

#[derive(Debug, Error)]
pub enum BacktestError {
    #[error("empty decision schedule")]
    EmptySchedule,
    #[error("decisions not strictly date-ordered at {0}")]
    UnorderedSchedule(NaiveDate),
    #[error("{0} is not a trading day")]
    UnknownDate(NaiveDate),
    #[error("no price for {asset} at {date}")]
    MissingPrice { asset: String, date: NaiveDate },
    #[error("cost {cost} exceeds equity {equity}")]
    InfeasibleCost { cost: f64, equity: f64 },
    #[error("invalid backtest config: {0}")]
    InvalidConfig(String),
    #[error("curve too short for a report")]
    ShortCurve,
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, BacktestError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BacktestConfig {
    /// Cost per unit of traded notional, charged on each side.
    #[serde(default = "default_cost")]
    pub cost_rate: f64,
    /// Trading days between a decision and its execution.
    #[serde(default = "default_lag")]
    pub lag_days: usize,
    pub start: NaiveDate,
    pub end: NaiveDate,
    #[serde(default = "default_equity")]
    pub initial_equity: f64,
    /// Periods per year for Sharpe and Sortino; 1 reports raw daily ratios.
    #[serde(default = "default_annualization")]
    pub annualization: f64,
}

fn default_cost() -> f64 {
    0.004
}

fn default_lag() -> usize {
    2
}

fn default_equity() -> f64 {
    1.0
}

fn default_annualization() -> f64 {
    TRADING_DAYS_PER_YEAR
}

impl BacktestConfig {
    pub fn new(start: NaiveDate, end: NaiveDate) -> Self {
        Self {
            cost_rate: default_cost(),
            lag_days: default_lag(),
            start,
            end,
            initial_equity: default_equity(),
            annualization: default_annualization(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(BacktestError::InvalidConfig(m.to_string()));
        if !(self.cost_rate >= 0.0 && self.cost_rate < 1.0) {
            return bad("cost_rate must be in [0, 1)");
        }
        if !(self.initial_equity > 0.0 && self.initial_equity.is_finite()) {
            return bad("initial_equity must be positive");
        }
        if !(self.annualization > 0.0 && self.annualization.is_finite()) {
            return bad("annualization must be positive");
        }
        if self.start > self.end {
            return bad("start after end");
        }
        Ok(())
    }
}

/// Order waiting for its execution day.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PendingOrder {
    pub exec_date: NaiveDate,
    pub decision: WeightDecision,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ledger {
    pub cash: f64,
    /// Share counts, all non-negative.
    pub positions: BTreeMap<String, f64>,
    /// Decisions not yet executed, in execution order.
    pub pending: VecDeque<PendingOrder>,
}

impl Ledger {
    pub fn all_cash(equity: f64) -> Self {
        Self {
            cash: equity,
            positions: BTreeMap::new(),
            pending: VecDeque::new(),
        }
    }

    /// `cash + sum(shares * price)`. Panics if a held asset has no price.
    pub fn equity(&self, price: impl Fn(&str) -> Option<f64>) -> f64 {
        self.cash
            + self
                .positions
                .iter()
                .map(|(a, s)| s * price(a).expect("held asset priced"))
                .sum::<f64>()
    }
}

/// One executed trade line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trade {
    pub exec_date: NaiveDate,
    pub asset: String,
    /// Signed change in position value at the execution price.
    pub delta_notional: f64,
    pub cost: f64,
}

/// Summary of one rebalance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RebalanceEntry {
    pub decision_date: NaiveDate,
    pub exec_date: NaiveDate,
    /// Pre-trade equity.
    pub equity: f64,
    /// Traded notional over pre-trade equity.
    pub turnover: f64,
    pub cost: f64,
    /// Shares held after the trade, per target asset.
    pub shares: Vec<(String, f64)>,
}

/// Result of [`apply_rebalance`].
#[derive(Debug, Clone, PartialEq)]
pub struct Rebalance {
    pub ledger: Ledger,
    pub trades: Vec<Trade>,
    /// Pre-trade equity.
    pub equity: f64,
    /// `sum|w_i E - held_i|`, the cost base.
    pub traded_notional: f64,
    pub cost: f64,
}

/// Rebalances `ledger` to `weights` over `assets` at `prices`.
///
/// Target notionals are `w * E` on the pre-trade equity `E`, and the cost is
/// `cost_rate * sum|w_i E - held_i|`. The cost is paid by scaling every
/// target notional by `(E - cost) / E`, so the book stays fully invested and
/// cash never goes negative.
pub fn apply_rebalance(
    ledger: &Ledger,
    assets: &[String],
    weights: &[f64],
    prices: impl Fn(&str) -> Option<f64>,
    cost_rate: f64,
    exec_date: NaiveDate,
) -> Result<Rebalance> {
    assert_eq!(assets.len(), weights.len(), "one weight per asset");
    let missing = |asset: &str| BacktestError::MissingPrice {
        asset: asset.to_string(),
        date: exec_date,
    };
    let mut price_of = BTreeMap::new();
    for a in assets.iter().chain(ledger.positions.keys()) {
        let p = prices(a).filter(|p| *p > 0.0).ok_or_else(|| missing(a))?;
        price_of.insert(a.clone(), p);
    }
    let equity = ledger.equity(|a| price_of.get(a).copied());
    let held = |a: &str| ledger.positions.get(a).map_or(0.0, |s| s * price_of[a]);

    let mut target: BTreeMap<&str, f64> = BTreeMap::new();
    for (a, w) in assets.iter().zip(weights) {
        *target.entry(a).or_default() += w * equity;
    }
    let mut names: Vec<&str> = target.keys().copied().collect();
    names.extend(ledger.positions.keys().map(String::as_str).filter(|a| !target.contains_key(a)));

    let per_asset: Vec<(&str, f64)> = names
        .iter()
        .map(|a| (*a, (target.get(a).copied().unwrap_or(0.0) - held(a)).abs()))
        .collect();
    let traded_notional: f64 = per_asset.iter().map(|(_, t)| t).sum();
    let cost = cost_rate * traded_notional;
    if cost >= equity && cost > 0.0 {
        return Err(BacktestError::InfeasibleCost { cost, equity });
    }
    let scale = if equity > 0.0 { (equity - cost) / equity } else { 0.0 };

    let mut next = Ledger {
        cash: 0.0,
        positions: BTreeMap::new(),
        pending: ledger.pending.clone(),
    };
    let mut invested = 0.0;
    let mut trades = Vec::new();
    for (a, traded) in per_asset {
        let c = cost_rate * traded;
        let notional = target.get(a).copied().unwrap_or(0.0) * scale;
        let shares = notional / price_of[a];
        if shares > 0.0 {
            next.positions.insert(a.to_string(), shares);
            invested += shares * price_of[a];
        }
        let delta = notional - held(a);
        if delta != 0.0 || c != 0.0 {
            trades.push(Trade {
                exec_date,
                asset: a.to_string(),
                delta_notional: delta,
                cost: c,
            });
        }
    }
    // Residual cash: uninvested weight plus float dust, floored at zero.
    next.cash = (equity - cost - invested).max(0.0);
    Ok(Rebalance {
        ledger: next,
        trades,
        equity,
        traded_notional,
        cost,
    })
}

/// Ledger state at one close, after any trades of the day.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerSnapshot {
    pub date: NaiveDate,
    pub cash: f64,
    pub positions: Vec<(String, f64)>,
    pub equity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktestReport {
    pub dates: Vec<NaiveDate>,
    pub equity_curve: Vec<f64>,
    pub daily_returns: ReturnSeries,
    pub summary: PerformanceSummary,
    pub rebalances: Vec<RebalanceEntry>,
    pub trades: Vec<Trade>,
    pub snapshots: Vec<LedgerSnapshot>,
}

/// Summary of an equity curve: CR, annualized Sharpe and Sortino, MDD.
/// Undefined ratios are absent rather than errors.
pub fn compute_report(equity_curve: &[f64], annualization: f64) -> Result<PerformanceSummary> {
    if equity_curve.len() < 2 {
        return Err(BacktestError::ShortCurve);
    }
    Ok(summarize_equity(equity_curve, annualization)?)
}

/// Simulates `decisions` over `[cfg.start, cfg.end]`.
///
/// Decisions whose execution day falls before the first simulated day are
/// superseded by later ones; the latest of them executes on the first day.
/// Target assets without a bar on the execution day are dropped and the
/// remaining weights renormalized. A held asset whose series ends is sold at
/// its last close, with costs, on the next trading day.
pub fn run_backtest(
    decisions: &[WeightDecision],
    table: &MarketTable,
    cfg: &BacktestConfig,
) -> Result<BacktestReport> {
    cfg.validate()?;
    if decisions.is_empty() {
        return Err(BacktestError::EmptySchedule);
    }
    if let Some(w) = decisions.windows(2).find(|w| w[0].decision_date >= w[1].decision_date) {
        return Err(BacktestError::UnorderedSchedule(w[1].decision_date));
    }
    let first = table
        .day_index_at_or_after(cfg.start)
        .ok_or(BacktestError::UnknownDate(cfg.start))?;
    let last = table
        .day_index_at_or_before(cfg.end)
        .filter(|&l| l >= first)
        .ok_or(BacktestError::UnknownDate(cfg.end))?;
    let cal = table.calendar();

    // Execution day of every decision, clamped to the simulated range.
    let mut orders: VecDeque<(usize, &WeightDecision)> = VecDeque::new();
    for d in decisions {
        let day = table
            .day_index(d.decision_date)
            .ok_or(BacktestError::UnknownDate(d.decision_date))?;
        let exec = (day + cfg.lag_days).max(first);
        if exec > last {
            debug!("{}: executes after the backtest end", d.decision_date);
            continue;
        }
        if orders.back().is_some_and(|(e, _)| *e == exec) {
            orders.pop_back();
        }
        orders.push_back((exec, d));
    }

    let mut ledger = Ledger::all_cash(cfg.initial_equity);
    ledger.pending = orders
        .iter()
        .map(|(e, d)| PendingOrder {
            exec_date: cal[*e],
            decision: (*d).clone(),
        })
        .collect();
    let close = |day: usize, asset: &str| table.asset_index(asset).and_then(|a| table.close(day, a));

    let mut dates = Vec::with_capacity(last - first + 1);
    let mut curve = Vec::with_capacity(last - first + 1);
    let mut snapshots = Vec::with_capacity(last - first + 1);
    let mut rebalances = Vec::new();
    let mut trades = Vec::new();
    for day in first..=last {
        let date = cal[day];
        // Delisted holdings: sell at the last close seen.
        let gone: Vec<String> = ledger
            .positions
            .keys()
            .filter(|a| close(day, a).is_none())
            .cloned()
            .collect();
        for asset in gone {
            let last_close = (day > 0)
                .then(|| close(day - 1, &asset))
                .flatten()
                .ok_or_else(|| BacktestError::MissingPrice {
                    asset: asset.clone(),
                    date,
                })?;
            let shares = ledger.positions.remove(&asset).expect("listed above");
            let notional = shares * last_close;
            let cost = cfg.cost_rate * notional;
            ledger.cash += notional - cost;
            warn!("{date}: liquidating delisted {asset} at {last_close}");
            trades.push(Trade {
                exec_date: date,
                asset,
                delta_notional: -notional,
                cost,
            });
        }

        while ledger.pending.front().is_some_and(|o| o.exec_date == date) {
            let order = ledger.pending.pop_front().expect("checked");
            let d = &order.decision;
            let mut assets = Vec::new();
            let mut weights = Vec::new();
            for (a, w) in d.assets.iter().zip(&d.weights) {
                if close(day, a).is_some() {
                    assets.push(a.clone());
                    weights.push(*w);
                } else {
                    warn!("{date}: {a} has no bar on execution day, dropped from the target");
                }
            }
            let total: f64 = weights.iter().sum();
            if total > 0.0 {
                weights.iter_mut().for_each(|w| *w /= total);
            } else {
                assets.clear();
                weights.clear();
            }
            let r = apply_rebalance(&ledger, &assets, &weights, |a| close(day, a), cfg.cost_rate, date)?;
            rebalances.push(RebalanceEntry {
                decision_date: d.decision_date,
                exec_date: date,
                equity: r.equity,
                turnover: r.traded_notional / r.equity,
                cost: r.cost,
                shares: assets
                    .iter()
                    .map(|a| (a.clone(), r.ledger.positions.get(a).copied().unwrap_or(0.0)))
                    .collect(),
            });
            trades.extend(r.trades);
            ledger = r.ledger;
        }

        let equity = ledger.equity(|a| close(day, a));
        dates.push(date);
        curve.push(equity);
        snapshots.push(LedgerSnapshot {
            date,
            cash: ledger.cash,
            positions: ledger.positions.iter().map(|(a, s)| (a.clone(), *s)).collect(),
            equity,
        });
    }

    let summary = compute_report(&curve, cfg.annualization)?;
    let daily_returns = ReturnSeries::new(dates[1..].to_vec(), simple_returns(&curve)?)?;
    Ok(BacktestReport {
        dates,
        equity_curve: curve,
        daily_returns,
        summary,
        rebalances,
        trades,
        snapshots,
    })
}

/// `date,equity`.
pub fn write_equity_csv<W: Write>(report: &BacktestReport, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["date", "equity"])?;
    for (d, e) in report.dates.iter().zip(&report.equity_curve) {
        w.write_record([d.to_string(), e.to_string()])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// `exec_date,asset,delta_notional,cost`.
pub fn write_trades_csv<W: Write>(report: &BacktestReport, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["exec_date", "asset", "delta_notional", "cost"])?;
    for t in &report.trades {
        w.write_record([
            t.exec_date.to_string(),
            t.asset.clone(),
            t.delta_notional.to_string(),
            t.cost.to_string(),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Renders an optional ratio; absent values are empty cells.
pub fn format_metric(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// `strategy,CR,SH,SO,MDD`, one row per named summary.
pub fn write_summary_csv<W: Write>(rows: &[(String, PerformanceSummary)], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["strategy", "CR", "SH", "SO", "MDD"])?;
    for (name, s) in rows {
        w.write_record([
            name.clone(),
            s.cumulative_return.to_string(),
            format_metric(s.sharpe),
            format_metric(s.sortino),
            s.max_drawdown.to_string(),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}
