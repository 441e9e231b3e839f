use std::collections::BTreeMap;

use super::{Architecture, ModelParams, Result, Tape, Tensor, TensorError, Var};

const LN_EPS: f64 = 1e-5;

/// Parameters of one model placed on a tape.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    /// Wraps leaves the caller already placed on the tape.
    pub fn from_vars(vars: BTreeMap<String, Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Records every parameter as a leaf. `trainable = false` gives an
/// inference-only graph.
pub fn bind_params(tape: &mut Tape, params: &ModelParams, trainable: bool) -> Result<BoundParams> {
    let mut vars = BTreeMap::new();
    for (name, t) in &params.tensors {
        vars.insert(name.clone(), tape.leaf(t.clone(), trainable)?);
    }
    Ok(BoundParams { vars })
}

/// Number of time steps in each window, all windows sharing one length.
fn sequence_len(params: &ModelParams, windows: &[&[f64]]) -> Result<usize> {
    let h = &params.hyper;
    let Some(first) = windows.first() else {
        return Err(TensorError::ShapeMismatch {
            op: "encode",
            left: [0, 0],
            right: [h.window_len, h.input_dim],
        });
    };
    let len = first.len();
    let rows = len / h.input_dim;
    if len % h.input_dim != 0 || rows == 0 || rows > h.window_len {
        return Err(TensorError::ShapeMismatch {
            op: "encode",
            left: [rows, len % h.input_dim],
            right: [h.window_len, h.input_dim],
        });
    }
    if let Some(w) = windows.iter().find(|w| w.len() != len) {
        return Err(TensorError::ShapeMismatch {
            op: "encode",
            left: [rows, h.input_dim],
            right: [w.len() / h.input_dim, h.input_dim],
        });
    }
    Ok(rows)
}

/// Encodes a batch of row-major `steps x input_dim` windows into a
/// `batch x hidden` matrix of final representations.
pub fn encode(
    tape: &mut Tape,
    params: &ModelParams,
    bound: &BoundParams,
    windows: &[&[f64]],
) -> Result<Var> {
    match params.architecture() {
        Architecture::Lstm => lstm_graph(tape, params, bound, windows),
        Architecture::Transformer => transformer_graph(tape, params, bound, windows, None),
    }
}

fn lstm_graph(
    tape: &mut Tape,
    params: &ModelParams,
    bound: &BoundParams,
    windows: &[&[f64]],
) -> Result<Var> {
    let steps = sequence_len(params, windows)?;
    let hp = &params.hyper;
    let d = hp.hidden;
    let inp = hp.input_dim;
    let batch = windows.len();
    // Time-major stack of every step: rows t*B..(t+1)*B hold step t.
    let mut data = Vec::with_capacity(steps * batch * inp);
    for t in 0..steps {
        for w in windows {
            data.extend_from_slice(&w[t * inp..(t + 1) * inp]);
        }
    }
    let mut input = tape.constant(Tensor::new(steps * batch, inp, data))?;
    let mut last = None;
    for layer in 0..hp.layers {
        let wx = bound.var(&format!("lstm{layer}.w_x"))?;
        let wh = bound.var(&format!("lstm{layer}.w_h"))?;
        let bias = bound.var(&format!("lstm{layer}.b"))?;
        // Input projections of all steps in one product.
        let zx = tape.matmul(input, wx)?;
        let zx = tape.add_row(zx, bias)?;
        let mut state: Option<(Var, Var)> = None;
        let mut outputs = Vec::with_capacity(steps);
        for t in 0..steps {
            let mut z = tape.slice_rows(zx, t * batch, (t + 1) * batch)?;
            if let Some((h, _)) = state {
                let zh = tape.matmul(h, wh)?;
                z = tape.add(z, zh)?;
            }
            let cell = tape.lstm_cell(z, state.map(|(_, c)| c))?;
            let h = tape.slice_cols(cell, 0, d)?;
            let c = tape.slice_cols(cell, d, 2 * d)?;
            state = Some((h, c));
            outputs.push(h);
        }
        last = state.map(|(h, _)| h);
        if layer + 1 < hp.layers {
            input = tape.concat_rows(outputs)?;
        }
    }
    Ok(last.expect("at least one layer and step"))
}

fn layer_norm(tape: &mut Tape, x: Var, gain: Var, bias: Var) -> Result<Var> {
    let y = tape.layer_norm(x, LN_EPS)?;
    let y = tape.mul_row(y, gain)?;
    tape.add_row(y, bias)
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

fn transformer_graph(
    tape: &mut Tape,
    params: &ModelParams,
    bound: &BoundParams,
    windows: &[&[f64]],
    mut attention: Option<&mut Vec<Var>>,
) -> Result<Var> {
    let steps = sequence_len(params, windows)?;
    let hp = &params.hyper;
    let batch = windows.len();
    let dh = hp.hidden / hp.heads;
    let mut data = Vec::with_capacity(batch * steps * hp.input_dim);
    for w in windows {
        data.extend_from_slice(w);
    }
    let x = tape.constant(Tensor::new(batch * steps, hp.input_dim, data))?;
    let mut z = linear(tape, x, bound.var("in.w")?, bound.var("in.b")?)?;
    let pos = tape.slice_rows(bound.var("pos")?, 0, steps)?;
    z = tape.add_tiled(z, pos)?;
    for b in 0..hp.layers {
        let p = |s: &str| bound.var(&format!("blk{b}.{s}"));
        let y = layer_norm(tape, z, p("ln1.g")?, p("ln1.b")?)?;
        let q = linear(tape, y, p("attn.wq")?, p("attn.bq")?)?;
        let k = linear(tape, y, p("attn.wk")?, p("attn.bk")?)?;
        let v = linear(tape, y, p("attn.wv")?, p("attn.bv")?)?;
        let mut heads = Vec::with_capacity(hp.heads);
        for h in 0..hp.heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let qh = tape.slice_cols(q, lo, hi)?;
            let kh = tape.slice_cols(k, lo, hi)?;
            let vh = tape.slice_cols(v, lo, hi)?;
            let s = tape.group_matmul_nt(qh, kh, batch)?;
            let s = tape.scale(s, 1.0 / (dh as f64).sqrt())?;
            let a = tape.softmax_rows(s)?;
            if let Some(rec) = attention.as_deref_mut() {
                rec.push(a);
            }
            heads.push(tape.group_matmul(a, vh, batch)?);
        }
        let cat = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat_cols(heads)?
        };
        let o = linear(tape, cat, p("attn.wo")?, p("attn.bo")?)?;
        z = tape.add(z, o)?;
        let y = layer_norm(tape, z, p("ln2.g")?, p("ln2.b")?)?;
        let f = linear(tape, y, p("ffn.w1")?, p("ffn.b1")?)?;
        let f = tape.relu(f)?;
        let f = linear(tape, f, p("ffn.w2")?, p("ffn.b2")?)?;
        z = tape.add(z, f)?;
    }
    z = layer_norm(tape, z, bound.var("ln_f.g")?, bound.var("ln_f.b")?)?;
    tape.group_mean_rows(z, batch)
}

/// Linear map from `batch x hidden` representations to `batch x 1` scores.
pub fn score_head(tape: &mut Tape, bound: &BoundParams, hidden: Var) -> Result<Var> {
    linear(tape, hidden, bound.var("head.w")?, bound.var("head.b")?)
}

/// Softmax across assets. Accepts a column of per-asset scores or a row and
/// returns a `1 x n` weight row.
pub fn allocation_head(tape: &mut Tape, scores: Var) -> Result<Var> {
    let s = if tape.value(scores).cols() == 1 && tape.value(scores).rows() > 1 {
        tape.transpose(scores)?
    } else {
        scores
    };
    tape.softmax_rows(s)
}

/// Plain-value [`allocation_head`].
pub fn allocation_weights(scores: &[f64]) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let s = tape.constant(Tensor::row(scores))?;
    let w = allocation_head(&mut tape, s)?;
    Ok(tape.value(w).data().to_vec())
}

fn single(params: &ModelParams, expected: Architecture, window: &[f64]) -> Result<Vec<f64>> {
    if params.architecture() != expected {
        return Err(TensorError::ArchitectureMismatch {
            expected,
            actual: params.architecture(),
        });
    }
    let mut tape = Tape::new();
    let bound = bind_params(&mut tape, params, false)?;
    let h = encode(&mut tape, params, &bound, &[window])?;
    Ok(tape.value(h).data().to_vec())
}

/// Final hidden state of the LSTM over one row-major window.
pub fn lstm_encode(params: &ModelParams, window: &[f64]) -> Result<Vec<f64>> {
    single(params, Architecture::Lstm, window)
}

/// Mean-pooled Transformer representation of one row-major window.
pub fn transformer_encode(params: &ModelParams, window: &[f64]) -> Result<Vec<f64>> {
    single(params, Architecture::Transformer, window)
}

/// Attention matrices of one window, block-major then head-major.
pub fn transformer_attention(params: &ModelParams, window: &[f64]) -> Result<Vec<Tensor>> {
    if params.architecture() != Architecture::Transformer {
        return Err(TensorError::ArchitectureMismatch {
            expected: Architecture::Transformer,
            actual: params.architecture(),
        });
    }
    let mut tape = Tape::new();
    let bound = bind_params(&mut tape, params, false)?;
    let mut rec = Vec::new();
    transformer_graph(&mut tape, params, &bound, &[window], Some(&mut rec))?;
    Ok(rec.into_iter().map(|v| tape.value(v).clone()).collect())
}
