//! Summary tables: one row per strategy, with the best learning method of
//! each (universe, objective, model) group flagged.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use dslq_core::metrics::PerformanceSummary;
use dslq_core::strategies::{Method, StrategyConfig};

use crate::manifest::ArtifactWriter;
use crate::{runtime, CliError};

pub const SUMMARY_FILE: &str = "summary.csv";
pub const REPORT_FILE: &str = "report.csv";

/// `strategy,method,model,objective,universe,CR,SH,SO,MDD,best`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub strategy: String,
    pub method: String,
    pub model: String,
    pub objective: String,
    pub universe: String,
    #[serde(rename = "CR")]
    pub cr: f64,
    #[serde(rename = "SH")]
    pub sh: Option<f64>,
    #[serde(rename = "SO")]
    pub so: Option<f64>,
    #[serde(rename = "MDD")]
    pub mdd: f64,
    pub best: bool,
}

impl SummaryRow {
    pub fn new(cfg: &StrategyConfig, universe: &str, s: &PerformanceSummary) -> Self {
        Self {
            strategy: cfg.name(),
            method: cfg.method.code().into(),
            model: cfg.model.map(|m| m.code().to_string()).unwrap_or_default(),
            objective: cfg.objective.map(|o| o.code().to_string()).unwrap_or_default(),
            universe: universe.into(),
            cr: s.cumulative_return,
            sh: s.sharpe,
            so: s.sortino,
            mdd: s.max_drawdown,
            best: false,
        }
    }

    fn is_learning(&self) -> bool {
        Method::from_code(&self.method).is_some_and(Method::is_learning)
    }
}

/// Undefined ratios rank below every defined one.
fn cmp_opt(a: Option<f64>, b: Option<f64>) -> Ordering {
    match (a, b) {
        (Some(x), Some(y)) => x.total_cmp(&y),
        (Some(_), None) => Ordering::Greater,
        (None, Some(_)) => Ordering::Less,
        (None, None) => Ordering::Equal,
    }
}

/// Ranking of two rows: CR, then SH, then SO. Full ties keep the earlier row.
fn rank(a: &SummaryRow, b: &SummaryRow) -> Ordering {
    a.cr.total_cmp(&b.cr)
        .then_with(|| cmp_opt(a.sh, b.sh))
        .then_with(|| cmp_opt(a.so, b.so))
}

/// Sets `best` on the top learning row of each (universe, objective, model)
/// group and clears it everywhere else.
pub fn mark_best(rows: &mut [SummaryRow]) {
    let mut best: BTreeMap<(String, String, String), usize> = BTreeMap::new();
    for (i, r) in rows.iter().enumerate() {
        if !r.is_learning() {
            continue;
        }
        let key = (r.universe.clone(), r.objective.clone(), r.model.clone());
        match best.get(&key) {
            Some(&j) if rank(r, &rows[j]) != Ordering::Greater => {}
            _ => {
                best.insert(key, i);
            }
        }
    }
    for r in rows.iter_mut() {
        r.best = false;
    }
    for i in best.into_values() {
        rows[i].best = true;
    }
}

pub fn write_report_csv(rows: &[SummaryRow], buf: &mut Vec<u8>) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(buf);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_summary_csv(path: &Path) -> Result<Vec<SummaryRow>, CliError> {
    let mut rd = csv::Reader::from_path(path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    rd.deserialize()
        .collect::<Result<Vec<SummaryRow>, _>>()
        .map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn find_summaries(dir: &Path, found: &mut Vec<PathBuf>) -> Result<(), CliError> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| CliError::Validation(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            find_summaries(&p, found)?;
        } else if p.file_name().is_some_and(|n| n == SUMMARY_FILE) {
            found.push(p);
        }
    }
    Ok(())
}

/// Merges every `summary.csv` under `dir` into `dir/report.csv`, re-marking
/// the best learning method per group across all runs.
pub fn cmd_report(dir: &Path) -> Result<Vec<SummaryRow>, CliError> {
    let mut files = Vec::new();
    find_summaries(dir, &mut files)?;
    let mut rows = Vec::new();
    for f in &files {
        rows.extend(read_summary_csv(f)?);
    }
    if rows.is_empty() {
        return Err(CliError::NoResults(dir.display().to_string()));
    }
    mark_best(&mut rows);
    ArtifactWriter::new(dir)?.write_with(REPORT_FILE, |buf| write_report_csv(&rows, buf))?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(strategy: &str, method: &str, cr: f64, sh: Option<f64>, so: Option<f64>) -> SummaryRow {
        SummaryRow {
            strategy: strategy.into(),
            method: method.into(),
            model: "L".into(),
            objective: "MSO".into(),
            universe: "u".into(),
            cr,
            sh,
            so,
            mdd: 0.1,
            best: true,
        }
    }

    fn best(rows: &mut [SummaryRow]) -> Vec<String> {
        mark_best(rows);
        rows.iter().filter(|r| r.best).map(|r| r.strategy.clone()).collect()
    }

    #[test]
    fn tie_order_is_cr_sh_so() {
        let mut rows = vec![
            row("a", "DSL", 1.1, Some(0.5), Some(0.9)),
            row("b", "E2E", 1.1, Some(0.5), Some(1.0)),
            row("c", "PFL", 1.0, Some(2.0), Some(3.0)),
        ];
        assert_eq!(best(&mut rows), vec!["b"]);
        let mut rows = vec![
            row("a", "DSL", 1.1, None, Some(0.9)),
            row("b", "E2E", 1.1, Some(-3.0), None),
        ];
        assert_eq!(best(&mut rows), vec!["b"]);
        let mut rows = vec![row("a", "DSL", 1.1, None, None), row("b", "E2E", 1.1, None, None)];
        assert_eq!(best(&mut rows), vec!["a"]);
    }

    #[test]
    fn baselines_never_best_and_groups_are_separate() {
        let mut rows = vec![
            row("EW", "EW", 9.0, Some(9.0), Some(9.0)),
            row("a", "DSL", 1.0, None, None),
            SummaryRow {
                model: "T".into(),
                ..row("b", "DSL", 0.5, None, None)
            },
            SummaryRow {
                universe: "v".into(),
                ..row("c", "DSL", 0.2, None, None)
            },
        ];
        assert_eq!(best(&mut rows), vec!["a", "b", "c"]);
    }
}
