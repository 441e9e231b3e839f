use std::collections::BTreeMap;
use std::io::{Read, Write};

use chrono::NaiveDate;
use log::warn;
use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{solve_target, Objective, Result, TargetError, TargetSpec};
use crate::marketdata::{MarketTable, UniverseCalendar};

/// Supervised label for one rebalance date.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetPortfolio {
    pub rebalance_date: NaiveDate,
    pub objective: Objective,
    pub assets: Vec<String>,
    pub weights: Vec<f64>,
    pub achieved_ratio: f64,
    pub converged: bool,
}

impl TargetPortfolio {
    pub fn weight_of(&self, asset: &str) -> Option<f64> {
        self.assets
            .iter()
            .position(|a| a == asset)
            .map(|i| self.weights[i])
    }
}

/// `lookback x k` simple returns ending at `day` for the given asset columns.
pub(crate) fn trailing_returns(
    table: &MarketTable,
    day: usize,
    columns: &[usize],
    lookback: usize,
) -> Array2<f64> {
    Array2::from_shape_fn((lookback, columns.len()), |(t, j)| {
        let d = day + 1 - lookback + t;
        let a = columns[j];
        table.close(d, a).expect("history checked") / table.close(d - 1, a).expect("history checked")
            - 1.0
    })
}

/// One target per month-end trading day in `[start, end]`, each solved on the
/// trailing `lookback` daily returns of that date's universe members.
///
/// Members without `lookback + 1` consecutive closes are dropped from that
/// month with a warning. Months are solved in parallel and returned in date
/// order.
pub fn build_target_schedule(
    table: &MarketTable,
    universe: &UniverseCalendar,
    spec: &TargetSpec,
    start: NaiveDate,
    end: NaiveDate,
) -> Result<Vec<TargetPortfolio>> {
    spec.validate()?;
    let days = table.month_end_days(start, end);
    days.par_iter()
        .map(|&day| {
            let date = table.calendar()[day];
            let members = universe.universe_at(date);
            if members.is_empty() {
                return Err(TargetError::EmptyUniverse(date));
            }
            let mut assets = Vec::new();
            let mut columns = Vec::new();
            for m in members {
                let Some(a) = table.asset_index(&m) else {
                    return Err(crate::marketdata::MarketDataError::UnknownAsset(m).into());
                };
                if table.history_len(day, a) > spec.lookback {
                    assets.push(m);
                    columns.push(a);
                } else {
                    warn!("{date}: dropping {m} from target, fewer than {} closes", spec.lookback + 1);
                }
            }
            if assets.is_empty() {
                return Err(TargetError::InsufficientHistory {
                    date,
                    need: spec.lookback + 1,
                });
            }
            let r = trailing_returns(table, day, &columns, spec.lookback);
            let sol = solve_target(r.view(), spec)?;
            if !sol.converged {
                warn!("{date}: target solve hit the iteration cap");
            }
            Ok(TargetPortfolio {
                rebalance_date: date,
                objective: spec.objective,
                assets,
                weights: sol.weights,
                achieved_ratio: sol.achieved_ratio,
                converged: sol.converged,
            })
        })
        .collect()
}

/// Writes `date,asset,weight,objective,achieved_ratio,converged` rows.
pub fn write_target_csv<W: Write>(targets: &[TargetPortfolio], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["date", "asset", "weight", "objective", "achieved_ratio", "converged"])?;
    for t in targets {
        for (asset, weight) in t.assets.iter().zip(&t.weights) {
            w.write_record([
                t.rebalance_date.to_string(),
                asset.clone(),
                weight.to_string(),
                t.objective.code().to_string(),
                t.achieved_ratio.to_string(),
                t.converged.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_target_csv<R: Read>(reader: R) -> Result<Vec<TargetPortfolio>> {
    #[derive(Deserialize)]
    struct Row {
        date: NaiveDate,
        asset: String,
        weight: f64,
        objective: String,
        achieved_ratio: f64,
        converged: bool,
    }
    let mut by_date: BTreeMap<NaiveDate, TargetPortfolio> = BTreeMap::new();
    for row in csv::Reader::from_reader(reader).deserialize::<Row>() {
        let row = row?;
        let objective = Objective::from_code(&row.objective)
            .ok_or_else(|| TargetError::Malformed(format!("objective {:?}", row.objective)))?;
        let entry = by_date.entry(row.date).or_insert_with(|| TargetPortfolio {
            rebalance_date: row.date,
            objective,
            assets: Vec::new(),
            weights: Vec::new(),
            achieved_ratio: row.achieved_ratio,
            converged: row.converged,
        });
        entry.assets.push(row.asset);
        entry.weights.push(row.weight);
    }
    Ok(by_date.into_values().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::marketdata::{generate_synthetic_market, SynthConfig};
    use crate::metrics::is_on_simplex;

    fn d(y: i32, m: u32, day: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(y, m, day).unwrap()
    }

    #[test]
    fn three_months_three_targets() {
        let mut cfg = SynthConfig::equicorrelated(3, 110, 0.05, 0.25, 0.2, 5);
        cfg.start_date = d(2021, 1, 4);
        let table = generate_synthetic_market(&cfg).unwrap();
        let universe = UniverseCalendar::static_universe(&table);
        let spec = TargetSpec::new(Objective::MaxSortino);
        let targets =
            build_target_schedule(&table, &universe, &spec, d(2021, 2, 1), d(2021, 4, 30)).unwrap();
        let dates: Vec<_> = targets.iter().map(|t| t.rebalance_date).collect();
        assert_eq!(dates, [d(2021, 2, 26), d(2021, 3, 31), d(2021, 4, 30)]);
        for t in &targets {
            assert!(is_on_simplex(&t.weights, 1e-9));
            assert_eq!(t.assets.len(), 3);
        }

        let mut buf = Vec::new();
        write_target_csv(&targets, &mut buf).unwrap();
        assert_eq!(read_target_csv(buf.as_slice()).unwrap(), targets);
    }

    #[test]
    fn late_listing_is_excluded() {
        let mut cfg = SynthConfig::equicorrelated(2, 60, 0.05, 0.25, 0.2, 5);
        cfg.start_date = d(2021, 1, 4);
        let full = generate_synthetic_market(&cfg).unwrap();
        // Asset S01 only starts trading on the 40th day.
        let n = full.n_assets();
        let mut bars = Vec::new();
        for day in 0..full.n_days() {
            for a in 0..n {
                let keep = a == 0 || day >= 40;
                bars.push(if keep { full.bar(day, a).copied() } else { None });
            }
        }
        let table = MarketTable::new(full.calendar().to_vec(), full.assets().to_vec(), bars, None).unwrap();
        let universe = UniverseCalendar::static_universe(&table);
        let spec = TargetSpec::new(Objective::MaxSharpe);
        let targets =
            build_target_schedule(&table, &universe, &spec, d(2021, 3, 1), d(2021, 3, 31)).unwrap();
        assert_eq!(targets.len(), 1);
        assert_eq!(targets[0].assets, ["S00"]);
        assert_eq!(targets[0].weights, [1.0]);
    }

    #[test]
    fn empty_universe_is_an_error() {
        let cfg = SynthConfig::equicorrelated(2, 60, 0.05, 0.25, 0.2, 5);
        let table = generate_synthetic_market(&cfg).unwrap();
        let universe = UniverseCalendar::default();
        let spec = TargetSpec::new(Objective::MaxSharpe);
        let end = *table.calendar().last().unwrap();
        assert!(matches!(
            build_target_schedule(&table, &universe, &spec, table.calendar()[30], end),
            Err(TargetError::EmptyUniverse(_))
        ));
    }
}
