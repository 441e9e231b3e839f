//! Rolling monthly strategies: the three learning methods (PFL, E2E, DSL)
//! sharing one per-asset encoder, plus equal- and value-weighted baselines.
//!
//! Every month-end in the backtest range a learning strategy builds a
//! training window from `train_start` up to the decision date, trains a
//! fresh model, keeps its best validation epoch and decides weights for the
//! live universe.

mod decide;
mod train;
mod window;

use std::fmt;
use std::io::{Read, Write};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use decide::{
    baseline_weights, decide_weights, run_member_schedule, run_strategy_schedule, MemberMonth,
};
pub use train::{train_member, window_loss, ModelCheckpoint};
pub use window::{build_train_window, Label, SampleProvenance, TrainSample, TrainWindow};

use crate::marketdata::MarketDataError;
use crate::targetsolver::{Objective, TargetError};
use crate::tensorauto::{AdamConfig, Architecture, ModelHyper, TensorError};

#[derive(Debug, Error)]
pub enum StrategyError {
    #[error("no training samples before {0}")]
    NoSamples(NaiveDate),
    #[error("no validation sample before {0}")]
    NoValidation(NaiveDate),
    #[error("training diverged at epoch {epoch} (seed {seed}, month {as_of}): {detail}")]
    DivergenceDetected {
        epoch: usize,
        seed: u64,
        as_of: NaiveDate,
        detail: String,
    },
    #[error("empty universe at {0}")]
    EmptyUniverse(NaiveDate),
    #[error("no universe member has a full feature window at {0}")]
    InsufficientHistory(NaiveDate),
    #[error("missing market cap for {asset} at {date}")]
    MissingCaps { asset: String, date: NaiveDate },
    #[error("no target portfolio for {0}")]
    MissingTarget(NaiveDate),
    #[error("{0} is not a learning method")]
    NotLearning(Method),
    #[error("invalid strategy config: {0}")]
    InvalidConfig(String),
    #[error("{0} is not a trading day")]
    UnknownDate(NaiveDate),
    #[error(transparent)]
    Target(#[from] TargetError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    MarketData(#[from] MarketDataError),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("malformed decision file: {0}")]
    Malformed(String),
}

pub type Result<T> = std::result::Result<T, StrategyError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "PFL")]
    Pfl,
    #[serde(rename = "E2E")]
    E2e,
    #[serde(rename = "DSL")]
    Dsl,
    #[serde(rename = "EW")]
    Ew,
    #[serde(rename = "VW")]
    Vw,
}

impl Method {
    pub fn code(self) -> &'static str {
        match self {
            Method::Pfl => "PFL",
            Method::E2e => "E2E",
            Method::Dsl => "DSL",
            Method::Ew => "EW",
            Method::Vw => "VW",
        }
    }

    pub fn from_code(s: &str) -> Option<Self> {
        [Method::Pfl, Method::E2e, Method::Dsl, Method::Ew, Method::Vw]
            .into_iter()
            .find(|m| m.code() == s)
    }

    pub fn is_learning(self) -> bool {
        matches!(self, Method::Pfl | Method::E2e | Method::Dsl)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

/// Second stage of PFL: how predicted returns become weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PflStage2 {
    /// Dinkelbach ratio maximization on the trailing return scenarios,
    /// re-centred on the predicted mean.
    Ratio,
    /// Long-only mean-variance with the given risk aversion.
    MeanVariance { risk_aversion: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategyConfig {
    pub method: Method,
    #[serde(default)]
    pub model: Option<Architecture>,
    #[serde(default)]
    pub objective: Option<Objective>,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub train_start: Option<NaiveDate>,
    #[serde(default = "default_window")]
    pub horizon: usize,
    #[serde(default = "default_window")]
    pub lookback: usize,
    #[serde(default)]
    pub seed: u64,
    /// Encoder sizes; the architecture default when absent.
    #[serde(default)]
    pub hyper: Option<ModelHyper>,
    #[serde(default)]
    pub adam: AdamConfig,
    #[serde(default = "default_stage2")]
    pub pfl_stage2: PflStage2,
}

fn default_epochs() -> usize {
    100
}

fn default_window() -> usize {
    21
}

fn default_stage2() -> PflStage2 {
    PflStage2::Ratio
}

impl StrategyConfig {
    pub fn baseline(method: Method) -> Self {
        Self {
            method,
            model: None,
            objective: None,
            epochs: default_epochs(),
            train_start: None,
            horizon: default_window(),
            lookback: default_window(),
            seed: 0,
            hyper: None,
            adam: AdamConfig::default(),
            pfl_stage2: default_stage2(),
        }
    }

    pub fn learning(
        method: Method,
        model: Architecture,
        objective: Objective,
        train_start: NaiveDate,
        seed: u64,
    ) -> Self {
        Self {
            model: Some(model),
            objective: Some(objective),
            train_start: Some(train_start),
            seed,
            ..Self::baseline(method)
        }
    }

    /// Table-1 style name: `MSO_L_DSL` for learning methods, `EW`/`VW` for
    /// baselines.
    pub fn name(&self) -> String {
        match (self.model, self.objective) {
            (Some(m), Some(o)) if self.method.is_learning() => {
                format!("{}_{}_{}", o.code(), m.code(), self.method.code())
            }
            _ => self.method.code().to_string(),
        }
    }

    pub fn hyper(&self) -> ModelHyper {
        self.hyper
            .unwrap_or_else(|| ModelHyper::default_for(self.model.unwrap_or(Architecture::Lstm)))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(StrategyError::InvalidConfig(m));
        let learning = self.method.is_learning();
        if learning {
            let Some(model) = self.model else {
                return bad(format!("{} needs a model", self.method));
            };
            if self.objective.is_none() {
                return bad(format!("{} needs an objective", self.method));
            }
            if self.train_start.is_none() {
                return bad(format!("{} needs train_start", self.method));
            }
            if self.epochs == 0 {
                return bad("epochs must be positive".into());
            }
            if self.horizon < 2 {
                return bad("horizon must be at least 2".into());
            }
            if self.lookback < 2 {
                return bad("lookback must be at least 2".into());
            }
            if !(self.adam.lr > 0.0) {
                return bad("adam.lr must be positive".into());
            }
            if let PflStage2::MeanVariance { risk_aversion } = self.pfl_stage2 {
                if !(risk_aversion >= 0.0) {
                    return bad("risk_aversion must be non-negative".into());
                }
            }
            self.hyper().validate(model)?;
        } else if self.model.is_some() || self.train_start.is_some() || self.hyper.is_some() {
            return bad(format!("{} takes no model, train_start or hyper", self.method));
        }
        Ok(())
    }

    /// sha256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}

/// Weights held from the execution following `decision_date`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightDecision {
    pub decision_date: NaiveDate,
    pub assets: Vec<String>,
    pub weights: Vec<f64>,
    /// Latest bar date any input of this decision read.
    pub feature_end: NaiveDate,
}

impl WeightDecision {
    pub fn weight_of(&self, asset: &str) -> Option<f64> {
        self.assets
            .iter()
            .position(|a| a == asset)
            .map(|i| self.weights[i])
    }
}

/// One row per (decision, member, asset):
/// `decision_date,method,model,objective,member,asset,weight`.
pub fn write_decisions_csv<W: Write>(
    cfg: &StrategyConfig,
    members: &[(usize, &[WeightDecision])],
    writer: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["decision_date", "method", "model", "objective", "member", "asset", "weight"])?;
    let model = cfg.model.map(|m| m.code()).unwrap_or("");
    let objective = cfg.objective.map(|o| o.code()).unwrap_or("");
    for (member, decisions) in members {
        for d in *decisions {
            for (asset, weight) in d.assets.iter().zip(&d.weights) {
                w.write_record([
                    d.decision_date.to_string(),
                    cfg.method.code().to_string(),
                    model.to_string(),
                    objective.to_string(),
                    member.to_string(),
                    asset.clone(),
                    weight.to_string(),
                ])?;
            }
        }
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Decisions per member index, in file order of first appearance.
pub fn read_decisions_csv<R: Read>(reader: R) -> Result<Vec<(usize, Vec<WeightDecision>)>> {
    #[derive(Deserialize)]
    struct Row {
        decision_date: NaiveDate,
        member: usize,
        asset: String,
        weight: f64,
    }
    let mut out: Vec<(usize, Vec<WeightDecision>)> = Vec::new();
    for row in csv::Reader::from_reader(reader).deserialize::<Row>() {
        let row = row?;
        let slot = match out.iter().position(|(m, _)| *m == row.member) {
            Some(i) => i,
            None => {
                out.push((row.member, Vec::new()));
                out.len() - 1
            }
        };
        let list = &mut out[slot].1;
        match list.last_mut() {
            Some(d) if d.decision_date == row.decision_date => {
                d.assets.push(row.asset);
                d.weights.push(row.weight);
            }
            Some(d) if d.decision_date > row.decision_date => {
                return Err(StrategyError::Malformed(format!(
                    "decision dates out of order at {}",
                    row.decision_date
                )))
            }
            _ => list.push(WeightDecision {
                decision_date: row.decision_date,
                assets: vec![row.asset],
                weights: vec![row.weight],
                // Provenance is not persisted; decisions only read data up
                // to their own date.
                feature_end: row.decision_date,
            }),
        }
    }
    Ok(out)
}
