use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::path::Path;

use chrono::NaiveDate;

use super::{Bar, MarketDataError, MarketTable, Result};

const REQUIRED: [&str; 7] = ["date", "asset", "open", "high", "low", "close", "volume"];

/// Loads a long-format OHLCV CSV (`date,asset,open,high,low,close,volume[,cap]`).
///
/// The calendar is the sorted union of all dates and assets are sorted
/// lexicographically. Rows may appear in any order.
pub fn load_ohlcv_csv(path: impl AsRef<Path>) -> Result<MarketTable> {
    let file = std::fs::File::open(path)?;
    read_ohlcv_csv(std::io::BufReader::new(file))
}

pub fn read_ohlcv_csv<R: Read>(reader: R) -> Result<MarketTable> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let mut idx = [0usize; 7];
    for (slot, name) in idx.iter_mut().zip(REQUIRED) {
        *slot = col(name).ok_or_else(|| MarketDataError::MissingColumn(name.to_string()))?;
    }
    let cap_col = col("cap");

    let mut rows: BTreeMap<(String, NaiveDate), (Bar, Option<f64>)> = BTreeMap::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let field = |i: usize| record.get(i).unwrap_or("");
        let parse_f = |i: usize, name: &str| -> Result<f64> {
            field(i).parse::<f64>().map_err(|_| MarketDataError::Parse {
                line,
                field: name.to_string(),
                value: field(i).to_string(),
            })
        };
        let date = NaiveDate::parse_from_str(field(idx[0]), "%Y-%m-%d").map_err(|_| {
            MarketDataError::Parse {
                line,
                field: "date".into(),
                value: field(idx[0]).to_string(),
            }
        })?;
        let asset = field(idx[1]).to_string();
        let bar = Bar {
            date,
            open: parse_f(idx[2], "open")?,
            high: parse_f(idx[3], "high")?,
            low: parse_f(idx[4], "low")?,
            close: parse_f(idx[5], "close")?,
            volume: parse_f(idx[6], "volume")?,
        };
        bar.validate(&asset)?;
        let cap = match cap_col {
            Some(c) if !field(c).is_empty() => Some(parse_f(c, "cap")?),
            _ => None,
        };
        if rows.insert((asset.clone(), date), (bar, cap)).is_some() {
            return Err(MarketDataError::DuplicateRow { asset, date });
        }
    }

    let calendar: Vec<NaiveDate> = rows
        .keys()
        .map(|(_, d)| *d)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let assets: Vec<String> = rows
        .keys()
        .map(|(a, _)| a.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let n = assets.len();
    let mut bars = vec![None; calendar.len() * n];
    let mut caps = cap_col.map(|_| vec![None; calendar.len() * n]);
    // BTreeMap order is (asset, date), so the asset index only moves forward.
    let mut a = 0;
    for ((asset, date), (bar, cap)) in rows {
        while assets[a] != asset {
            a += 1;
        }
        let d = calendar.binary_search(&date).expect("date from union");
        bars[d * n + a] = Some(bar);
        if let Some(c) = caps.as_mut() {
            c[d * n + a] = cap;
        }
    }
    MarketTable::new(calendar, assets, bars, caps)
}

/// Writes a table in the long CSV format read by [`load_ohlcv_csv`]. Floats
/// use the shortest round-trip representation, so reloading is exact.
pub fn write_ohlcv_csv<W: Write>(table: &MarketTable, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = REQUIRED.to_vec();
    if table.has_caps() {
        header.push("cap");
    }
    w.write_record(&header)?;
    for (d, date) in table.calendar().iter().enumerate() {
        for (a, asset) in table.assets().iter().enumerate() {
            let Some(bar) = table.bar(d, a) else { continue };
            let mut rec = vec![
                date.format("%Y-%m-%d").to_string(),
                asset.clone(),
                bar.open.to_string(),
                bar.high.to_string(),
                bar.low.to_string(),
                bar.close.to_string(),
                bar.volume.to_string(),
            ];
            if table.has_caps() {
                rec.push(table.cap(d, a).map(|c| c.to_string()).unwrap_or_default());
            }
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}
