use std::collections::BTreeMap;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

use super::{Label, Method, Result, StrategyConfig, StrategyError, TrainSample, TrainWindow};
use crate::tensorauto::{
    adam_step, allocation_head, bind_params, cross_entropy, encode, init_params, mse, neg_ratio,
    score_head, AdamState, BoundParams, ModelParams, RngStream, Tape, Tensor, TensorError, Var,
};

/// Best-validation snapshot of one member trained for one month.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub params: ModelParams,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub validation_loss: f64,
    pub validation_trace: Vec<f64>,
    /// Training loss at the start of each epoch.
    pub train_trace: Vec<f64>,
    pub config_hash: String,
    pub seed: u64,
    pub as_of: NaiveDate,
}

/// Mean per-sample loss of `samples` for the method in `cfg`. All windows go
/// through the encoder as one batch.
pub fn window_loss(
    tape: &mut Tape,
    params: &ModelParams,
    bound: &BoundParams,
    samples: &[TrainSample],
    cfg: &StrategyConfig,
) -> std::result::Result<Var, TensorError> {
    let windows: Vec<&[f64]> = samples
        .iter()
        .flat_map(|s| s.features.iter().map(|f| f.values.as_slice()))
        .collect();
    let h = encode(tape, params, bound, &windows)?;
    let scores = score_head(tape, bound, h)?;
    let mut total: Option<Var> = None;
    let mut offset = 0;
    for s in samples {
        let n = s.assets.len();
        let si = tape.slice_rows(scores, offset, offset + n)?;
        offset += n;
        let li = match &s.label {
            Label::Weights(t) => {
                let w = allocation_head(tape, si)?;
                cross_entropy(tape, w, t)?
            }
            Label::ForwardReturns(r) => {
                let w = allocation_head(tape, si)?;
                let obj = cfg.objective.expect("learning config has an objective");
                neg_ratio(tape, w, r, obj)?
            }
            Label::CumulativeReturns(c) => mse(tape, si, c)?,
        };
        total = Some(match total {
            Some(t) => tape.add(t, li)?,
            None => li,
        });
    }
    let total = total.expect("at least one sample");
    tape.scale(total, 1.0 / samples.len() as f64)
}

fn eval_loss(params: &ModelParams, samples: &[TrainSample], cfg: &StrategyConfig) -> std::result::Result<f64, TensorError> {
    let mut tape = Tape::new();
    let bound = bind_params(&mut tape, params, false)?;
    let l = window_loss(&mut tape, params, &bound, samples, cfg)?;
    Ok(tape.value(l).item())
}

/// RNG stream for a member's initialization in a given month.
pub(crate) fn init_stream(seed: u64, as_of: NaiveDate) -> RngStream {
    RngStream::with_stream(seed, as_of.num_days_from_ce() as u64)
}

/// Full-batch training of a fresh model on `window`, returning the epoch
/// snapshot with the lowest validation loss (earliest on ties).
pub fn train_member(window: &TrainWindow, cfg: &StrategyConfig, seed: u64) -> Result<ModelCheckpoint> {
    cfg.validate()?;
    if !cfg.method.is_learning() {
        return Err(StrategyError::NotLearning(cfg.method));
    }
    if window.samples.is_empty() {
        return Err(StrategyError::NoSamples(window.as_of));
    }
    if window.validation.is_empty() {
        return Err(StrategyError::NoValidation(window.as_of));
    }
    let arch = cfg.model.expect("validated");
    let mut params = init_params(arch, cfg.hyper(), &mut init_stream(seed, window.as_of))?;
    let mut adam = AdamState::new(cfg.adam);
    let diverged = |epoch: usize, e: TensorError| StrategyError::DivergenceDetected {
        epoch,
        seed,
        as_of: window.as_of,
        detail: e.to_string(),
    };

    let mut train_trace = Vec::with_capacity(cfg.epochs);
    let mut validation_trace = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, ModelParams)> = None;
    for epoch in 1..=cfg.epochs {
        let grads = {
            let mut tape = Tape::new();
            let bound = bind_params(&mut tape, &params, true)?;
            let loss = window_loss(&mut tape, &params, &bound, &window.samples, cfg)
                .map_err(|e| diverged(epoch, e))?;
            train_trace.push(tape.value(loss).item());
            let g = tape.backward(loss)?;
            bound
                .iter()
                .map(|(name, v)| (name.clone(), g.wrt(&tape, *v)))
                .collect::<BTreeMap<String, Tensor>>()
        };
        adam_step(&mut params, &grads, &mut adam).map_err(|e| diverged(epoch, e))?;
        let val = eval_loss(&params, &window.validation, cfg).map_err(|e| diverged(epoch, e))?;
        validation_trace.push(val);
        if best.as_ref().map_or(true, |(_, b, _)| val < *b) {
            best = Some((epoch, val, params.clone()));
        }
    }
    let (best_epoch, validation_loss, params) = best.expect("epochs > 0");
    Ok(ModelCheckpoint {
        params,
        best_epoch,
        validation_loss,
        validation_trace,
        train_trace,
        config_hash: cfg.hash(),
        seed,
        as_of: window.as_of,
    })
}

/// Per-asset raw scores of `windows` under `params`.
pub(crate) fn score_windows(params: &ModelParams, windows: &[&[f64]]) -> std::result::Result<Vec<f64>, TensorError> {
    let mut tape = Tape::new();
    let bound = bind_params(&mut tape, params, false)?;
    let h = encode(&mut tape, params, &bound, windows)?;
    let s = score_head(&mut tape, &bound, h)?;
    Ok(tape.value(s).data().to_vec())
}

impl Method {
    /// Whether decisions pass the scores through the softmax head.
    pub(crate) fn uses_softmax(self) -> bool {
        matches!(self, Method::Dsl | Method::E2e)
    }
}
