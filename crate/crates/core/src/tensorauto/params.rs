use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Result, RngStream, Tensor, TensorError};
use crate::marketdata::{FEATURE_COLUMNS, WINDOW_LEN};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Architecture {
    #[serde(rename = "LSTM")]
    Lstm,
    #[serde(rename = "Transformer")]
    Transformer,
}

impl Architecture {
    /// Single-letter tag used in strategy names (`L`, `T`).
    pub fn code(self) -> &'static str {
        match self {
            Architecture::Lstm => "L",
            Architecture::Transformer => "T",
        }
    }

    pub fn from_code(s: &str) -> Option<Self> {
        match s {
            "L" | "LSTM" | "lstm" => Some(Architecture::Lstm),
            "T" | "TRF" | "Transformer" | "transformer" => Some(Architecture::Transformer),
            _ => None,
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Architecture::Lstm => "LSTM",
            Architecture::Transformer => "Transformer",
        })
    }
}

/// Sizes of one encoder. `hidden` is the LSTM state size or the Transformer
/// model width; `layers` counts stacked LSTM layers or encoder blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelHyper {
    pub input_dim: usize,
    pub window_len: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
}

impl ModelHyper {
    pub fn default_for(arch: Architecture) -> Self {
        match arch {
            Architecture::Lstm => Self {
                input_dim: FEATURE_COLUMNS.len(),
                window_len: WINDOW_LEN,
                hidden: 32,
                layers: 1,
                heads: 1,
                ffn: 0,
            },
            Architecture::Transformer => Self {
                input_dim: FEATURE_COLUMNS.len(),
                window_len: WINDOW_LEN,
                hidden: 32,
                layers: 2,
                heads: 4,
                ffn: 64,
            },
        }
    }

    pub fn validate(&self, arch: Architecture) -> Result<()> {
        let bad = |m: &str| Err(TensorError::InvalidHyper(m.to_string()));
        if self.input_dim == 0 || self.window_len == 0 || self.hidden == 0 || self.layers == 0 {
            return bad("input_dim, window_len, hidden and layers must be positive");
        }
        if arch == Architecture::Transformer {
            if self.heads == 0 || self.hidden % self.heads != 0 {
                return bad("hidden must be a positive multiple of heads");
            }
            if self.ffn == 0 {
                return bad("ffn must be positive");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Glorot,
    Zeros,
    Ones,
}

/// Parameter names, shapes and initializers in draw order.
fn layout(arch: Architecture, h: &ModelHyper) -> Vec<(String, [usize; 2], Init)> {
    let mut out = Vec::new();
    let mut push = |name: String, shape: [usize; 2], init: Init| out.push((name, shape, init));
    let d = h.hidden;
    match arch {
        Architecture::Lstm => {
            for l in 0..h.layers {
                let input = if l == 0 { h.input_dim } else { d };
                push(format!("lstm{l}.w_x"), [input, 4 * d], Init::Glorot);
                push(format!("lstm{l}.w_h"), [d, 4 * d], Init::Glorot);
                push(format!("lstm{l}.b"), [1, 4 * d], Init::Zeros);
            }
        }
        Architecture::Transformer => {
            push("in.w".into(), [h.input_dim, d], Init::Glorot);
            push("in.b".into(), [1, d], Init::Zeros);
            push("pos".into(), [h.window_len, d], Init::Glorot);
            for b in 0..h.layers {
                push(format!("blk{b}.ln1.g"), [1, d], Init::Ones);
                push(format!("blk{b}.ln1.b"), [1, d], Init::Zeros);
                for m in ["q", "k", "v", "o"] {
                    push(format!("blk{b}.attn.w{m}"), [d, d], Init::Glorot);
                    push(format!("blk{b}.attn.b{m}"), [1, d], Init::Zeros);
                }
                push(format!("blk{b}.ln2.g"), [1, d], Init::Ones);
                push(format!("blk{b}.ln2.b"), [1, d], Init::Zeros);
                push(format!("blk{b}.ffn.w1"), [d, h.ffn], Init::Glorot);
                push(format!("blk{b}.ffn.b1"), [1, h.ffn], Init::Zeros);
                push(format!("blk{b}.ffn.w2"), [h.ffn, d], Init::Glorot);
                push(format!("blk{b}.ffn.b2"), [1, d], Init::Zeros);
            }
            push("ln_f.g".into(), [1, d], Init::Ones);
            push("ln_f.b".into(), [1, d], Init::Zeros);
        }
    }
    push("head.w".into(), [d, 1], Init::Glorot);
    push("head.b".into(), [1, 1], Init::Zeros);
    out
}

/// Glorot uniform bound for a `fan_in x fan_out` weight.
pub fn glorot_limit(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Named parameters of one encoder plus its score head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    architecture: Architecture,
    pub hyper: ModelHyper,
    pub seed: u64,
    pub tensors: BTreeMap<String, Tensor>,
}

impl ModelParams {
    pub fn architecture(&self) -> Architecture {
        self.architecture
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let p: ModelParams = serde_json::from_str(s)?;
        p.hyper.validate(p.architecture)?;
        for (name, shape, _) in layout(p.architecture, &p.hyper) {
            let t = p.get(&name)?;
            if t.shape() != shape {
                return Err(TensorError::ShapeMismatch {
                    op: "checkpoint",
                    left: t.shape(),
                    right: shape,
                });
            }
        }
        if !p.is_finite() {
            return Err(TensorError::NumericalFault { op: "checkpoint" });
        }
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Glorot-uniform weights, zero biases and unit layernorm gains, drawn in
/// layout order from `rng` only.
pub fn init_params(
    architecture: Architecture,
    hyper: ModelHyper,
    rng: &mut RngStream,
) -> Result<ModelParams> {
    hyper.validate(architecture)?;
    let mut tensors = BTreeMap::new();
    for (name, [r, c], init) in layout(architecture, &hyper) {
        let t = match init {
            Init::Zeros => Tensor::zeros(r, c),
            Init::Ones => Tensor::full(r, c, 1.0),
            Init::Glorot => {
                let lim = glorot_limit(r, c);
                Tensor::new(r, c, (0..r * c).map(|_| rng.uniform(-lim, lim)).collect())
            }
        };
        tensors.insert(name, t);
    }
    Ok(ModelParams {
        architecture,
        hyper,
        seed: rng.seed(),
        tensors,
    })
}
