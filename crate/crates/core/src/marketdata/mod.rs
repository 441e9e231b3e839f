//! Market data: OHLCV tables, universe membership, model features and a
//! seeded synthetic market generator.

mod features;
mod io;
mod synth;
mod universe;

pub use features::{preprocess_features, FeatureWindow, FEATURE_COLUMNS, WINDOW_LEN};
pub use io::{load_ohlcv_csv, read_ohlcv_csv, write_ohlcv_csv};
pub use synth::{generate_synthetic_market, Regime, SynthConfig};
pub use universe::{load_universe_csv, read_universe_csv, UniverseCalendar, OPEN_END};

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MarketDataError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("line {line}: cannot parse {field}: {value:?}")]
    Parse {
        line: u64,
        field: String,
        value: String,
    },
    #[error("non-positive price for {asset} on {date}")]
    NonPositivePrice { asset: String, date: NaiveDate },
    #[error("invalid bar for {asset} on {date}: {reason}")]
    InvalidBar {
        asset: String,
        date: NaiveDate,
        reason: String,
    },
    #[error("duplicate row for {asset} on {date}")]
    DuplicateRow { asset: String, date: NaiveDate },
    #[error("gap in series for {asset}: no bar on {date}")]
    GapInSeries { asset: String, date: NaiveDate },
    #[error("unknown asset `{0}`")]
    UnknownAsset(String),
    #[error("date {0} is not a trading day of the table")]
    UnknownDate(NaiveDate),
    #[error("insufficient history for {asset} at {date}: need {need} bars, have {have}")]
    InsufficientHistory {
        asset: String,
        date: NaiveDate,
        need: usize,
        have: usize,
    },
    #[error("zero volume for {asset} on {date}")]
    ZeroVolume { asset: String, date: NaiveDate },
    #[error("invalid universe for {asset}: {reason}")]
    InvalidUniverse { asset: String, reason: String },
    #[error("invalid synthetic config field `{field}`: {reason}")]
    InvalidConfig { field: String, reason: String },
    #[error("correlation matrix is not positive semi-definite")]
    NonPsdCorrelation,
}

pub type Result<T> = std::result::Result<T, MarketDataError>;

/// One daily OHLCV bar.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bar {
    pub date: NaiveDate,
    pub open: f64,
    pub high: f64,
    pub low: f64,
    pub close: f64,
    pub volume: f64,
}

impl Bar {
    /// Checks `low <= min(open, close)`, `high >= max(open, close)` and
    /// positive prices.
    pub fn validate(&self, asset: &str) -> Result<()> {
        let prices = [self.open, self.high, self.low, self.close];
        if prices.iter().any(|p| !(*p > 0.0) || !p.is_finite()) {
            return Err(MarketDataError::NonPositivePrice {
                asset: asset.to_string(),
                date: self.date,
            });
        }
        let invalid = |reason: &str| MarketDataError::InvalidBar {
            asset: asset.to_string(),
            date: self.date,
            reason: reason.to_string(),
        };
        if self.low > self.open.min(self.close) {
            return Err(invalid("low above min(open, close)"));
        }
        if self.high < self.open.max(self.close) {
            return Err(invalid("high below max(open, close)"));
        }
        if !(self.volume >= 0.0) || !self.volume.is_finite() {
            return Err(invalid("negative volume"));
        }
        Ok(())
    }
}

/// Calendar-aligned dense grid of bars, `calendar x assets`.
///
/// Immutable after construction; every asset's bars form one contiguous
/// block of the calendar.
#[derive(Debug, Clone, PartialEq)]
pub struct MarketTable {
    calendar: Vec<NaiveDate>,
    assets: Vec<String>,
    bars: Vec<Option<Bar>>,
    caps: Option<Vec<Option<f64>>>,
}

impl MarketTable {
    /// Builds a table, validating calendar order, bar dates, bar invariants
    /// and per-asset contiguity.
    pub fn new(
        calendar: Vec<NaiveDate>,
        assets: Vec<String>,
        bars: Vec<Option<Bar>>,
        caps: Option<Vec<Option<f64>>>,
    ) -> Result<Self> {
        let n = assets.len();
        assert_eq!(bars.len(), calendar.len() * n, "bar grid shape");
        if let Some(c) = &caps {
            assert_eq!(c.len(), bars.len(), "cap grid shape");
        }
        if let Some(w) = calendar.windows(2).find(|w| w[0] >= w[1]) {
            return Err(MarketDataError::InvalidBar {
                asset: String::new(),
                date: w[1],
                reason: "calendar not strictly increasing".into(),
            });
        }
        for (a, asset) in assets.iter().enumerate() {
            let mut first = None;
            let mut last = None;
            for (d, date) in calendar.iter().enumerate() {
                if let Some(bar) = &bars[d * n + a] {
                    if bar.date != *date {
                        return Err(MarketDataError::InvalidBar {
                            asset: asset.clone(),
                            date: bar.date,
                            reason: format!("bar stored in calendar slot {date}"),
                        });
                    }
                    bar.validate(asset)?;
                    first.get_or_insert(d);
                    last = Some(d);
                }
            }
            if let (Some(f), Some(l)) = (first, last) {
                if let Some(d) = (f..=l).find(|&d| bars[d * n + a].is_none()) {
                    return Err(MarketDataError::GapInSeries {
                        asset: asset.clone(),
                        date: calendar[d],
                    });
                }
            }
        }
        Ok(Self {
            calendar,
            assets,
            bars,
            caps,
        })
    }

    pub fn calendar(&self) -> &[NaiveDate] {
        &self.calendar
    }

    pub fn assets(&self) -> &[String] {
        &self.assets
    }

    pub fn n_days(&self) -> usize {
        self.calendar.len()
    }

    pub fn n_assets(&self) -> usize {
        self.assets.len()
    }

    pub fn has_caps(&self) -> bool {
        self.caps.is_some()
    }

    pub fn asset_index(&self, asset: &str) -> Option<usize> {
        self.assets.binary_search_by(|a| a.as_str().cmp(asset)).ok()
    }

    /// Index of `date` in the calendar, if it is a trading day.
    pub fn day_index(&self, date: NaiveDate) -> Option<usize> {
        self.calendar.binary_search(&date).ok()
    }

    /// Index of the last trading day on or before `date`.
    pub fn day_index_at_or_before(&self, date: NaiveDate) -> Option<usize> {
        match self.calendar.binary_search(&date) {
            Ok(i) => Some(i),
            Err(0) => None,
            Err(i) => Some(i - 1),
        }
    }

    /// Index of the first trading day on or after `date`.
    pub fn day_index_at_or_after(&self, date: NaiveDate) -> Option<usize> {
        match self.calendar.binary_search(&date) {
            Ok(i) => Some(i),
            Err(i) if i < self.calendar.len() => Some(i),
            Err(_) => None,
        }
    }

    pub fn bar(&self, day: usize, asset: usize) -> Option<&Bar> {
        self.bars[day * self.assets.len() + asset].as_ref()
    }

    pub fn close(&self, day: usize, asset: usize) -> Option<f64> {
        self.bar(day, asset).map(|b| b.close)
    }

    pub fn cap(&self, day: usize, asset: usize) -> Option<f64> {
        self.caps
            .as_ref()
            .and_then(|c| c[day * self.assets.len() + asset])
    }

    /// Number of consecutive bars of `asset` ending at (and including) `day`.
    pub fn history_len(&self, day: usize, asset: usize) -> usize {
        (0..=day)
            .rev()
            .take_while(|&d| self.bar(d, asset).is_some())
            .count()
    }

    /// Last trading day of each calendar month with a day in `[start, end]`,
    /// restricted to days inside the range.
    pub fn month_end_days(&self, start: NaiveDate, end: NaiveDate) -> Vec<usize> {
        let mut out = Vec::new();
        for (i, d) in self.calendar.iter().enumerate() {
            let is_month_end = match self.calendar.get(i + 1) {
                Some(next) => (next.year(), next.month()) != (d.year(), d.month()),
                None => true,
            };
            if is_month_end && *d >= start && *d <= end {
                out.push(i);
            }
        }
        out
    }

    /// Month-end trading dates in `[start, end]`.
    pub fn month_ends(&self, start: NaiveDate, end: NaiveDate) -> Vec<NaiveDate> {
        self.month_end_days(start, end)
            .into_iter()
            .map(|i| self.calendar[i])
            .collect()
    }

    /// Returns a copy of the table with a closure applied to every bar.
    /// Used for what-if price perturbations.
    pub fn map_bars(&self, mut f: impl FnMut(usize, usize, &mut Bar)) -> Result<Self> {
        let n = self.assets.len();
        let mut bars = self.bars.clone();
        for (idx, slot) in bars.iter_mut().enumerate() {
            if let Some(bar) = slot {
                f(idx / n, idx % n, bar);
            }
        }
        Self::new(
            self.calendar.clone(),
            self.assets.clone(),
            bars,
            self.caps.clone(),
        )
    }
}


#[cfg(test)]
mod tests {
    use super::test_support::*;
    use super::*;

    fn d(y: i32, m: u32, day: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(y, m, day).unwrap()
    }

    #[test]
    fn month_ends_are_last_trading_days() {
        let t = table_from_closes(d(2020, 1, 1), &[vec![1.0; 70]]);
        let ends = t.month_ends(d(2020, 1, 1), d(2020, 12, 31));
        assert_eq!(ends[0], d(2020, 1, 31));
        assert_eq!(ends[1], d(2020, 2, 28));
        assert_eq!(ends[2], d(2020, 3, 31));
        assert_eq!(ends.len(), 4);
    }

    #[test]
    fn gap_inside_range_is_rejected() {
        let cal = weekdays(d(2020, 1, 6), 3);
        let bar = |date| {
            Some(Bar {
                date,
                open: 1.0,
                high: 1.0,
                low: 1.0,
                close: 1.0,
                volume: 1.0,
            })
        };
        let bars = vec![bar(cal[0]), None, bar(cal[2])];
        let err = MarketTable::new(cal, vec!["X".into()], bars, None).unwrap_err();
        assert!(matches!(err, MarketDataError::GapInSeries { .. }));
    }

    #[test]
    fn bar_invariants() {
        let mut b = Bar {
            date: d(2020, 1, 6),
            open: 10.0,
            high: 11.0,
            low: 9.0,
            close: 10.5,
            volume: 5.0,
        };
        assert!(b.validate("X").is_ok());
        b.low = 10.2;
        assert!(b.validate("X").is_err());
        b.low = 9.0;
        b.close = 0.0;
        assert!(matches!(
            b.validate("X"),
            Err(MarketDataError::NonPositivePrice { .. })
        ));
    }
}
