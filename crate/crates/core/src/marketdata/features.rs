use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::{MarketDataError, MarketTable, Result};

/// Rows per model input window.
pub const WINDOW_LEN: usize = 21;
/// Column order of a feature row.
pub const FEATURE_COLUMNS: [&str; 5] = ["open", "high", "low", "close_return", "volume"];

/// Log-transformed OHLCV features of one asset over the 21 trading days
/// ending at `as_of`, row-major `21 x 5`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureWindow {
    pub asset: String,
    pub as_of: NaiveDate,
    /// Date of the oldest price the window reads (the close preceding the
    /// first row).
    pub first_date: NaiveDate,
    pub values: Vec<f64>,
}

impl FeatureWindow {
    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * FEATURE_COLUMNS.len()..(t + 1) * FEATURE_COLUMNS.len()]
    }
}

/// Builds the feature window of `asset` ending at `as_of`.
///
/// Per row: `ln(open/close)`, `ln(high/close)`, `ln(low/close)`,
/// `ln(close/prev_close)`, `ln(volume)`. Needs 22 consecutive bars.
pub fn preprocess_features(
    table: &MarketTable,
    asset: &str,
    as_of: NaiveDate,
) -> Result<FeatureWindow> {
    let a = table
        .asset_index(asset)
        .ok_or_else(|| MarketDataError::UnknownAsset(asset.to_string()))?;
    let day = table
        .day_index(as_of)
        .ok_or(MarketDataError::UnknownDate(as_of))?;
    let need = WINDOW_LEN + 1;
    let have = table.history_len(day, a).min(need);
    if have < need {
        return Err(MarketDataError::InsufficientHistory {
            asset: asset.to_string(),
            date: as_of,
            need,
            have,
        });
    }
    let first = day + 1 - WINDOW_LEN;
    let mut values = Vec::with_capacity(WINDOW_LEN * FEATURE_COLUMNS.len());
    for d in first..=day {
        let bar = table.bar(d, a).expect("history checked");
        let prev = table.bar(d - 1, a).expect("history checked");
        if !(bar.volume > 0.0) {
            return Err(MarketDataError::ZeroVolume {
                asset: asset.to_string(),
                date: bar.date,
            });
        }
        values.extend_from_slice(&[
            (bar.open / bar.close).ln(),
            (bar.high / bar.close).ln(),
            (bar.low / bar.close).ln(),
            (bar.close / prev.close).ln(),
            bar.volume.ln(),
        ]);
    }
    Ok(FeatureWindow {
        asset: asset.to_string(),
        as_of,
        first_date: table.calendar()[first - 1],
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::super::test_support::weekdays;
    use super::super::Bar;
    use super::*;
    use proptest::prelude::*;

    fn table(ohlcv: &[(f64, f64, f64, f64, f64)]) -> MarketTable {
        let cal = weekdays(NaiveDate::from_ymd_opt(2021, 3, 1).unwrap(), ohlcv.len());
        let bars = cal
            .iter()
            .zip(ohlcv)
            .map(|(date, &(open, high, low, close, volume))| {
                Some(Bar {
                    date: *date,
                    open,
                    high,
                    low,
                    close,
                    volume,
                })
            })
            .collect();
        MarketTable::new(cal, vec!["A".into()], bars, None).unwrap()
    }

    #[test]
    fn formula_examples() {
        let mut rows = vec![(100.0, 100.0, 100.0, 100.0, 1000.0); 22];
        rows[21] = (105.0, 112.0, 104.0, 110.0, 1000.0);
        let t = table(&rows);
        let as_of = *t.calendar().last().unwrap();
        let w = preprocess_features(&t, "A", as_of).unwrap();
        assert_eq!(w.values.len(), 21 * 5);
        let last = w.row(20);
        assert!((last[0] - (-0.046_520_015_634_892_9)).abs() < 1e-12);
        assert!((last[3] - 0.095_310_179_804_324_9).abs() < 1e-12);
        assert!((last[4] - 6.907_755_278_982_137).abs() < 1e-12);
        assert_eq!(w.first_date, t.calendar()[0]);
    }

    #[test]
    fn short_history() {
        let t = table(&vec![(1.0, 1.0, 1.0, 1.0, 1.0); 15]);
        let as_of = *t.calendar().last().unwrap();
        assert!(matches!(
            preprocess_features(&t, "A", as_of),
            Err(MarketDataError::InsufficientHistory { have: 15, .. })
        ));
    }

    #[test]
    fn zero_volume() {
        let mut rows = vec![(1.0, 1.0, 1.0, 1.0, 1.0); 22];
        rows[10].4 = 0.0;
        let t = table(&rows);
        let as_of = *t.calendar().last().unwrap();
        assert!(matches!(
            preprocess_features(&t, "A", as_of),
            Err(MarketDataError::ZeroVolume { .. })
        ));
    }

    proptest! {
        #[test]
        fn price_scaling_leaves_price_features_unchanged(
            closes in prop::collection::vec(1.0f64..200.0, 22),
            c in 0.01f64..100.0,
        ) {
            let rows: Vec<_> = closes.iter().map(|&x| (x, x * 1.01, x * 0.99, x, 500.0)).collect();
            let scaled: Vec<_> = rows.iter().map(|&(o, h, l, cl, v)| (o * c, h * c, l * c, cl * c, v)).collect();
            let t1 = table(&rows);
            let t2 = table(&scaled);
            let as_of = *t1.calendar().last().unwrap();
            let w1 = preprocess_features(&t1, "A", as_of).unwrap();
            let w2 = preprocess_features(&t2, "A", as_of).unwrap();
            for (a, b) in w1.values.iter().zip(&w2.values) {
                prop_assert!(a.is_finite());
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
    }
}
