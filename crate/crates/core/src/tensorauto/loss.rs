use super::{Result, Tape, Tensor, TensorError, Var};
use crate::targetsolver::Objective;

/// Added under the square root of the deviation in [`neg_ratio`] so the
/// loss stays differentiable on flat return paths.
pub const RATIO_EPS: f64 = 1e-8;

/// `-sum(target * ln(pred))` for a `1 x n` prediction row.
pub fn cross_entropy(tape: &mut Tape, pred: Var, target: &[f64]) -> Result<Var> {
    let shape = tape.value(pred).shape();
    if shape != [1, target.len()] {
        return Err(TensorError::ShapeMismatch {
            op: "cross_entropy",
            left: shape,
            right: [1, target.len()],
        });
    }
    let t = tape.constant(Tensor::row(target))?;
    let lp = tape.log(pred)?;
    let prod = tape.mul(t, lp)?;
    let s = tape.sum(prod)?;
    tape.neg(s)
}

pub fn cross_entropy_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(Tensor::row(pred))?;
    let l = cross_entropy(&mut tape, p, target)?;
    Ok(tape.value(l).item())
}

/// Shannon entropy in nats; zero entries contribute nothing.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum::<f64>()
}

/// Negative Sharpe or Sortino ratio of the portfolio path
/// `future_returns * weights^T`, with [`RATIO_EPS`] inside the square root.
pub fn neg_ratio(
    tape: &mut Tape,
    weights: Var,
    future_returns: &Tensor,
    objective: Objective,
) -> Result<Var> {
    let shape = tape.value(weights).shape();
    if shape != [1, future_returns.cols()] || future_returns.rows() < 2 {
        return Err(TensorError::ShapeMismatch {
            op: "neg_ratio",
            left: shape,
            right: future_returns.shape(),
        });
    }
    let r = tape.constant(future_returns.clone())?;
    let wt = tape.transpose(weights)?;
    let p = tape.matmul(r, wt)?;
    let m = tape.mean(p)?;
    let var = match objective {
        Objective::MaxSharpe => tape.variance(p, 1, RATIO_EPS)?,
        Objective::MaxSortino => {
            let neg = tape.neg(p)?;
            let loss = tape.relu(neg)?;
            let sq = tape.mul(loss, loss)?;
            let ms = tape.mean(sq)?;
            let eps = tape.constant(Tensor::scalar(RATIO_EPS))?;
            tape.add(ms, eps)?
        }
    };
    let dev = tape.sqrt(var)?;
    let ratio = tape.div(m, dev)?;
    tape.neg(ratio)
}

pub fn neg_ratio_loss(weights: &[f64], future_returns: &Tensor, objective: Objective) -> Result<f64> {
    let mut tape = Tape::new();
    let w = tape.constant(Tensor::row(weights))?;
    let l = neg_ratio(&mut tape, w, future_returns, objective)?;
    Ok(tape.value(l).item())
}

/// Mean squared error between a prediction of any shape and `target` taken
/// in row-major order.
pub fn mse(tape: &mut Tape, pred: Var, target: &[f64]) -> Result<Var> {
    let [r, c] = tape.value(pred).shape();
    if r * c != target.len() {
        return Err(TensorError::ShapeMismatch {
            op: "mse",
            left: [r, c],
            right: [target.len(), 1],
        });
    }
    let t = tape.constant(Tensor::new(r, c, target.to_vec()))?;
    let d = tape.sub(pred, t)?;
    let sq = tape.mul(d, d)?;
    tape.mean(sq)
}
