use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use chrono::NaiveDate;

use super::{MarketDataError, MarketTable, Result};

/// End date used for open-ended membership.
pub const OPEN_END: NaiveDate = match NaiveDate::from_ymd_opt(9999, 12, 31) {
    Some(d) => d,
    None => panic!("valid date"),
};

/// Per-asset inclusive membership intervals.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct UniverseCalendar {
    memberships: BTreeMap<String, Vec<(NaiveDate, NaiveDate)>>,
}

impl UniverseCalendar {
    /// Validates that intervals are well-formed, sorted and disjoint.
    pub fn new(memberships: BTreeMap<String, Vec<(NaiveDate, NaiveDate)>>) -> Result<Self> {
        for (asset, intervals) in &memberships {
            for (s, e) in intervals {
                if s > e {
                    return Err(MarketDataError::InvalidUniverse {
                        asset: asset.clone(),
                        reason: format!("interval start {s} after end {e}"),
                    });
                }
            }
            if intervals.windows(2).any(|w| w[0].1 >= w[1].0) {
                return Err(MarketDataError::InvalidUniverse {
                    asset: asset.clone(),
                    reason: "intervals overlap or are unsorted".into(),
                });
            }
        }
        Ok(Self { memberships })
    }

    /// Every asset of the table is a member for all time.
    pub fn static_universe(table: &MarketTable) -> Self {
        let memberships = table
            .assets()
            .iter()
            .map(|a| (a.clone(), vec![(NaiveDate::MIN, OPEN_END)]))
            .collect();
        Self { memberships }
    }

    /// Rejects memberships naming assets absent from `table`.
    pub fn check_against(&self, table: &MarketTable) -> Result<()> {
        match self
            .memberships
            .keys()
            .find(|a| table.asset_index(a).is_none())
        {
            Some(a) => Err(MarketDataError::UnknownAsset(a.clone())),
            None => Ok(()),
        }
    }

    pub fn memberships(&self) -> &BTreeMap<String, Vec<(NaiveDate, NaiveDate)>> {
        &self.memberships
    }

    /// Lexicographically ordered members on `date`.
    pub fn universe_at(&self, date: NaiveDate) -> Vec<String> {
        self.memberships
            .iter()
            .filter(|(_, iv)| iv.iter().any(|(s, e)| *s <= date && date <= *e))
            .map(|(a, _)| a.clone())
            .collect()
    }
}

/// Loads `asset,start,end` membership rows.
pub fn load_universe_csv(path: impl AsRef<Path>) -> Result<UniverseCalendar> {
    read_universe_csv(std::fs::File::open(path)?)
}

pub fn read_universe_csv<R: Read>(reader: R) -> Result<UniverseCalendar> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| MarketDataError::MissingColumn(name.to_string()))
    };
    let (ia, is, ie) = (col("asset")?, col("start")?, col("end")?);
    let mut memberships: BTreeMap<String, Vec<(NaiveDate, NaiveDate)>> = BTreeMap::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let date = |i: usize, name: &str| {
            let raw = record.get(i).unwrap_or("");
            NaiveDate::parse_from_str(raw, "%Y-%m-%d").map_err(|_| MarketDataError::Parse {
                line,
                field: name.to_string(),
                value: raw.to_string(),
            })
        };
        let asset = record.get(ia).unwrap_or("").to_string();
        memberships
            .entry(asset)
            .or_default()
            .push((date(is, "start")?, date(ie, "end")?));
    }
    for iv in memberships.values_mut() {
        iv.sort();
    }
    UniverseCalendar::new(memberships)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(y: i32, m: u32, day: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(y, m, day).unwrap()
    }

    #[test]
    fn interval_boundaries() {
        let csv = "asset,start,end\nB,2020-01-01,2020-06-30\nA,2020-03-01,9999-12-31\n";
        let u = read_universe_csv(csv.as_bytes()).unwrap();
        assert_eq!(u.universe_at(d(2020, 6, 30)), ["A", "B"]);
        assert_eq!(u.universe_at(d(2020, 7, 1)), ["A"]);
        assert_eq!(u.universe_at(d(2020, 1, 15)), ["B"]);
        assert!(u.universe_at(d(2019, 1, 1)).is_empty());
    }

    #[test]
    fn overlapping_intervals_rejected() {
        let csv = "asset,start,end\nA,2020-01-01,2020-06-30\nA,2020-06-01,2020-12-31\n";
        assert!(matches!(
            read_universe_csv(csv.as_bytes()),
            Err(MarketDataError::InvalidUniverse { .. })
        ));
    }

    #[test]
    fn static_universe_is_constant() {
        let t = super::super::test_support::table_from_closes(
            d(2020, 1, 1),
            &[vec![1.0; 3], vec![2.0; 3]],
        );
        let u = UniverseCalendar::static_universe(&t);
        for date in [d(1990, 1, 1), d(2020, 1, 2), d(2500, 5, 5)] {
            assert_eq!(u.universe_at(date), ["A0", "A1"]);
        }
        assert!(u.check_against(&t).is_ok());
    }

    #[test]
    fn query_is_order_independent() {
        let csv = "asset,start,end\nA,2020-01-01,2020-01-31\nB,2020-01-15,2020-02-28\n";
        let u = read_universe_csv(csv.as_bytes()).unwrap();
        let dates = [d(2020, 1, 20), d(2020, 2, 10), d(2020, 1, 2)];
        let forward: Vec<_> = dates.iter().map(|&x| u.universe_at(x)).collect();
        let backward: Vec<_> = dates.iter().rev().map(|&x| u.universe_at(x)).collect();
        assert_eq!(forward, backward.into_iter().rev().collect::<Vec<_>>());
        assert_eq!(forward[0], ["A", "B"]);
    }
}
