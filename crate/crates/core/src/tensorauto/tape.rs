use super::tensor::{gemm, gemm_acc, Tensor};
use super::{Result, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive operations. Every variant has a forward rule in [`compute`] and
/// an adjoint in [`Tape::backward`].
#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    /// `a + row` with `row` (1 x c) broadcast over every row of `a`.
    AddRow(Var, Var),
    /// `a * row` elementwise with `row` broadcast over rows.
    MulRow(Var, Var),
    /// `a + b` with `b` (p x c) repeated over consecutive blocks of p rows.
    AddTiled(Var, Var),
    Scale(Var, f64),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Sqrt(Var),
    SoftmaxRows(Var),
    Sum(Var),
    Mean(Var),
    /// `sum((x - mean)^2) / (n - ddof) + eps` over every entry.
    Variance { x: Var, ddof: usize, eps: f64 },
    /// Per-row standardization `(x - mean) / sqrt(var + eps)`, population var.
    LayerNorm { x: Var, eps: f64 },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize, end: usize },
    SliceRows { x: Var, start: usize, end: usize },
    Transpose(Var),
    /// Block-diagonal `A_g B_g^T` for `groups` equal row blocks of A and B.
    GroupMatMulNT { a: Var, b: Var, groups: usize },
    /// Block-diagonal `A_g B_g` for `groups` equal row blocks of A and B.
    GroupMatMul { a: Var, b: Var, groups: usize },
    /// Mean of each of `groups` equal row blocks, one output row per block.
    GroupMeanRows { x: Var, groups: usize },
    /// One LSTM step from gate pre-activations `z` (`B x 4H`, blocks input,
    /// forget, candidate, output) and the previous cell state (`B x H`,
    /// zero when absent). Output rows are `[h, c, i, f, g, o, tanh(c)]`,
    /// each `H` wide; the gates are kept for the adjoint.
    LstmCell { z: Var, c_prev: Option<Var> },
}

/// Column blocks in an [`Op::LstmCell`] output row.
pub const LSTM_CELL_BLOCKS: usize = 7;

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::AddTiled(..) => "add_tiled",
            Op::Scale(..) => "scale",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Relu(_) => "relu",
            Op::Sqrt(_) => "sqrt",
            Op::SoftmaxRows(_) => "softmax",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Variance { .. } => "variance",
            Op::LayerNorm { .. } => "layernorm",
            Op::ConcatCols(_) => "concat_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::SliceRows { .. } => "slice_rows",
            Op::Transpose(_) => "transpose",
            Op::GroupMatMulNT { .. } => "group_matmul_nt",
            Op::GroupMatMul { .. } => "group_matmul",
            Op::GroupMeanRows { .. } => "group_mean_rows",
            Op::LstmCell { .. } => "lstm_cell",
        }
    }

    pub fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::AddRow(a, b)
            | Op::MulRow(a, b)
            | Op::AddTiled(a, b)
            | Op::GroupMatMulNT { a, b, .. }
            | Op::GroupMatMul { a, b, .. } => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Relu(a)
            | Op::Sqrt(a)
            | Op::SoftmaxRows(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Transpose(a)
            | Op::Variance { x: a, .. }
            | Op::LayerNorm { x: a, .. }
            | Op::SliceCols { x: a, .. }
            | Op::SliceRows { x: a, .. }
            | Op::GroupMeanRows { x: a, .. } => vec![*a],
            Op::ConcatCols(v) | Op::ConcatRows(v) => v.clone(),
            Op::LstmCell { z, c_prev } => {
                let mut v = vec![*z];
                v.extend(c_prev);
                v
            }
        }
    }
}

fn mismatch(op: &Op, left: [usize; 2], right: [usize; 2]) -> TensorError {
    TensorError::ShapeMismatch {
        op: op.name(),
        left,
        right,
    }
}

fn same_shape(op: &Op, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(mismatch(op, a.shape(), b.shape()))
    }
}

fn group_rows(op: &Op, t: &Tensor, groups: usize) -> Result<usize> {
    if groups == 0 || t.rows() % groups != 0 {
        return Err(mismatch(op, t.shape(), [groups, 0]));
    }
    Ok(t.rows() / groups)
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Forward rule shared by recording and replay, so both produce identical
/// bits. `inputs` are the values of `op.inputs()` in order.
pub fn compute(op: &Op, inputs: &[&Tensor]) -> Result<Tensor> {
    let out = match op {
        Op::Leaf => unreachable!("leaves carry their own value"),
        Op::MatMul(..) => {
            let (a, b) = (inputs[0], inputs[1]);
            if a.cols() != b.rows() {
                return Err(mismatch(op, a.shape(), b.shape()));
            }
            let (m, k, n) = (a.rows(), a.cols(), b.cols());
            Tensor::new(m, n, gemm(a.data(), false, b.data(), false, m, k, n))
        }
        Op::Add(..) => {
            same_shape(op, inputs[0], inputs[1])?;
            inputs[0].zip_map(inputs[1], |x, y| x + y)
        }
        Op::Sub(..) => {
            same_shape(op, inputs[0], inputs[1])?;
            inputs[0].zip_map(inputs[1], |x, y| x - y)
        }
        Op::Mul(..) => {
            same_shape(op, inputs[0], inputs[1])?;
            inputs[0].zip_map(inputs[1], |x, y| x * y)
        }
        Op::Div(..) => {
            same_shape(op, inputs[0], inputs[1])?;
            inputs[0].zip_map(inputs[1], |x, y| x / y)
        }
        Op::AddRow(..) | Op::MulRow(..) => {
            let (a, row) = (inputs[0], inputs[1]);
            if row.rows() != 1 || row.cols() != a.cols() {
                return Err(mismatch(op, a.shape(), row.shape()));
            }
            let c = a.cols();
            let r = row.data();
            let add = matches!(op, Op::AddRow(..));
            let data = a
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| if add { x + r[i % c] } else { x * r[i % c] })
                .collect();
            Tensor::new(a.rows(), c, data)
        }
        Op::AddTiled(..) => {
            let (a, b) = (inputs[0], inputs[1]);
            if b.cols() != a.cols() || b.rows() == 0 || a.rows() % b.rows() != 0 {
                return Err(mismatch(op, a.shape(), b.shape()));
            }
            let block = b.len();
            let bd = b.data();
            let data = a
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| x + bd[i % block])
                .collect();
            Tensor::new(a.rows(), a.cols(), data)
        }
        Op::Scale(_, f) => inputs[0].map(|x| x * f),
        Op::Exp(_) => inputs[0].map(f64::exp),
        Op::Log(_) => inputs[0].map(f64::ln),
        Op::Tanh(_) => inputs[0].map(f64::tanh),
        Op::Sigmoid(_) => inputs[0].map(|x| 1.0 / (1.0 + (-x).exp())),
        Op::Relu(_) => inputs[0].map(|x| if x > 0.0 { x } else { 0.0 }),
        Op::Sqrt(_) => inputs[0].map(f64::sqrt),
        Op::SoftmaxRows(_) => {
            let a = inputs[0];
            let mut data = a.data().to_vec();
            if a.cols() > 0 {
                for row in data.chunks_mut(a.cols()) {
                    softmax_in_place(row);
                }
            }
            Tensor::new(a.rows(), a.cols(), data)
        }
        Op::Sum(_) => Tensor::scalar(inputs[0].data().iter().sum()),
        Op::Mean(_) => {
            let a = inputs[0];
            if a.is_empty() {
                return Err(mismatch(op, a.shape(), [1, 1]));
            }
            Tensor::scalar(a.data().iter().sum::<f64>() / a.len() as f64)
        }
        Op::Variance { ddof, eps, .. } => {
            let a = inputs[0];
            if a.len() <= *ddof {
                return Err(mismatch(op, a.shape(), [*ddof + 1, 1]));
            }
            let n = a.len() as f64;
            let m = a.data().iter().sum::<f64>() / n;
            let ss: f64 = a.data().iter().map(|x| (x - m) * (x - m)).sum();
            Tensor::scalar(ss / (n - *ddof as f64) + eps)
        }
        Op::LayerNorm { eps, .. } => {
            let a = inputs[0];
            let c = a.cols();
            if c == 0 {
                return Err(mismatch(op, a.shape(), [a.rows(), 1]));
            }
            let mut data = a.data().to_vec();
            for row in data.chunks_mut(c) {
                let m = row.iter().sum::<f64>() / c as f64;
                let v = row.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / c as f64;
                let s = (v + eps).sqrt();
                for x in row.iter_mut() {
                    *x = (*x - m) / s;
                }
            }
            Tensor::new(a.rows(), c, data)
        }
        Op::ConcatCols(_) => {
            let rows = inputs[0].rows();
            for t in inputs {
                if t.rows() != rows {
                    return Err(mismatch(op, inputs[0].shape(), t.shape()));
                }
            }
            let cols: usize = inputs.iter().map(|t| t.cols()).sum();
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for t in inputs {
                    data.extend_from_slice(&t.data()[r * t.cols()..(r + 1) * t.cols()]);
                }
            }
            Tensor::new(rows, cols, data)
        }
        Op::ConcatRows(_) => {
            let cols = inputs[0].cols();
            for t in inputs {
                if t.cols() != cols {
                    return Err(mismatch(op, inputs[0].shape(), t.shape()));
                }
            }
            let rows: usize = inputs.iter().map(|t| t.rows()).sum();
            let mut data = Vec::with_capacity(rows * cols);
            for t in inputs {
                data.extend_from_slice(t.data());
            }
            Tensor::new(rows, cols, data)
        }
        Op::SliceCols { start, end, .. } => {
            let a = inputs[0];
            if start >= end || *end > a.cols() {
                return Err(mismatch(op, a.shape(), [*start, *end]));
            }
            let mut data = Vec::with_capacity(a.rows() * (end - start));
            for r in 0..a.rows() {
                data.extend_from_slice(&a.data()[r * a.cols() + start..r * a.cols() + end]);
            }
            Tensor::new(a.rows(), end - start, data)
        }
        Op::SliceRows { start, end, .. } => {
            let a = inputs[0];
            if start >= end || *end > a.rows() {
                return Err(mismatch(op, a.shape(), [*start, *end]));
            }
            let c = a.cols();
            Tensor::new(end - start, c, a.data()[start * c..end * c].to_vec())
        }
        Op::Transpose(_) => inputs[0].transpose(),
        Op::GroupMatMulNT { groups, .. } => {
            let (a, b) = (inputs[0], inputs[1]);
            let m = group_rows(op, a, *groups)?;
            let n = group_rows(op, b, *groups)?;
            if a.cols() != b.cols() {
                return Err(mismatch(op, a.shape(), b.shape()));
            }
            let k = a.cols();
            let mut data = Vec::with_capacity(a.rows() * n);
            for g in 0..*groups {
                let ag = &a.data()[g * m * k..(g + 1) * m * k];
                let bg = &b.data()[g * n * k..(g + 1) * n * k];
                data.extend(gemm(ag, false, bg, true, m, k, n));
            }
            Tensor::new(a.rows(), n, data)
        }
        Op::GroupMatMul { groups, .. } => {
            let (a, b) = (inputs[0], inputs[1]);
            let m = group_rows(op, a, *groups)?;
            let k = group_rows(op, b, *groups)?;
            if a.cols() != k {
                return Err(mismatch(op, a.shape(), b.shape()));
            }
            let n = b.cols();
            let mut data = Vec::with_capacity(a.rows() * n);
            for g in 0..*groups {
                let ag = &a.data()[g * m * k..(g + 1) * m * k];
                let bg = &b.data()[g * k * n..(g + 1) * k * n];
                data.extend(gemm(ag, false, bg, false, m, k, n));
            }
            Tensor::new(a.rows(), n, data)
        }
        Op::GroupMeanRows { groups, .. } => {
            let a = inputs[0];
            let p = group_rows(op, a, *groups)?;
            let c = a.cols();
            let mut data = vec![0.0; groups * c];
            for g in 0..*groups {
                for r in 0..p {
                    let row = &a.data()[(g * p + r) * c..(g * p + r + 1) * c];
                    for (o, x) in data[g * c..(g + 1) * c].iter_mut().zip(row) {
                        *o += x;
                    }
                }
            }
            for x in data.iter_mut() {
                *x /= p as f64;
            }
            Tensor::new(*groups, c, data)
        }
        Op::LstmCell { .. } => {
            let z = inputs[0];
            if z.cols() == 0 || z.cols() % 4 != 0 {
                return Err(mismatch(op, z.shape(), [z.rows(), 4]));
            }
            let h = z.cols() / 4;
            if let Some(c) = inputs.get(1) {
                if c.shape() != [z.rows(), h] {
                    return Err(mismatch(op, z.shape(), c.shape()));
                }
            }
            let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
            let w = LSTM_CELL_BLOCKS * h;
            let mut data = vec![0.0; z.rows() * w];
            for r in 0..z.rows() {
                let zr = &z.data()[r * 4 * h..(r + 1) * 4 * h];
                let out = &mut data[r * w..(r + 1) * w];
                for j in 0..h {
                    let i = sig(zr[j]);
                    let f = sig(zr[h + j]);
                    let g = zr[2 * h + j].tanh();
                    let o = sig(zr[3 * h + j]);
                    let prev = inputs.get(1).map_or(0.0, |c| c.data()[r * h + j]);
                    let c = i * g + f * prev;
                    let tc = c.tanh();
                    out[j] = o * tc;
                    out[h + j] = c;
                    out[2 * h + j] = i;
                    out[3 * h + j] = f;
                    out[4 * h + j] = g;
                    out[5 * h + j] = o;
                    out[6 * h + j] = tc;
                }
            }
            Tensor::new(z.rows(), w, data)
        }
    };
    if !out.is_finite() {
        return Err(TensorError::NumericalFault { op: op.name() });
    }
    Ok(out)
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Record of one forward pass. Nodes are appended in execution order, so the
/// node list is already a topological order.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints indexed by node. Nodes that do not influence the loss, or do not
/// require gradients, have none.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, zero-filled when `v` is off the loss path.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => {
                let [r, c] = tape.value(v).shape();
                Tensor::zeros(r, c)
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// All nodes in recording order.
    pub fn vars(&self) -> impl Iterator<Item = Var> {
        (0..self.nodes.len()).map(Var)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn op(&self, v: Var) -> &Op {
        &self.nodes[v.0].op
    }

    /// Trainable input.
    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NumericalFault { op: "leaf" });
        }
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Runs `op` on the current values of its inputs and records the node.
    pub fn apply(&mut self, op: Op) -> Result<Var> {
        let ins = op.inputs();
        let value = {
            let vals: Vec<&Tensor> = ins.iter().map(|v| &self.nodes[v.0].value).collect();
            compute(&op, &vals)?
        };
        let requires_grad = ins.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::MatMul(a, b))
    }
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Add(a, b))
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Sub(a, b))
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Mul(a, b))
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Div(a, b))
    }
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.apply(Op::AddRow(a, row))
    }
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.apply(Op::MulRow(a, row))
    }
    pub fn add_tiled(&mut self, a: Var, block: Var) -> Result<Var> {
        self.apply(Op::AddTiled(a, block))
    }
    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.apply(Op::Scale(a, factor))
    }
    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Scale(a, -1.0))
    }
    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Exp(a))
    }
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Log(a))
    }
    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Tanh(a))
    }
    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Sigmoid(a))
    }
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Relu(a))
    }
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Sqrt(a))
    }
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::SoftmaxRows(a))
    }
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Sum(a))
    }
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Mean(a))
    }
    pub fn variance(&mut self, x: Var, ddof: usize, eps: f64) -> Result<Var> {
        self.apply(Op::Variance { x, ddof, eps })
    }
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        self.apply(Op::LayerNorm { x, eps })
    }
    pub fn concat_cols(&mut self, parts: Vec<Var>) -> Result<Var> {
        self.apply(Op::ConcatCols(parts))
    }
    pub fn concat_rows(&mut self, parts: Vec<Var>) -> Result<Var> {
        self.apply(Op::ConcatRows(parts))
    }
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        self.apply(Op::SliceCols { x, start, end })
    }
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        self.apply(Op::SliceRows { x, start, end })
    }
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Transpose(a))
    }
    pub fn group_matmul_nt(&mut self, a: Var, b: Var, groups: usize) -> Result<Var> {
        self.apply(Op::GroupMatMulNT { a, b, groups })
    }
    pub fn group_matmul(&mut self, a: Var, b: Var, groups: usize) -> Result<Var> {
        self.apply(Op::GroupMatMul { a, b, groups })
    }
    pub fn group_mean_rows(&mut self, x: Var, groups: usize) -> Result<Var> {
        self.apply(Op::GroupMeanRows { x, groups })
    }
    pub fn lstm_cell(&mut self, z: Var, c_prev: Option<Var>) -> Result<Var> {
        self.apply(Op::LstmCell { z, c_prev })
    }

    /// Smallest `|x|` over all relu inputs, infinity when there are none.
    /// Finite-difference checks need this well above the step size.
    pub fn relu_margin(&self) -> f64 {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(x) => Some(self.value(x).data().iter().fold(f64::INFINITY, |m, v| m.min(v.abs()))),
                _ => None,
            })
            .fold(f64::INFINITY, f64::min)
    }

    /// Recomputes every node from the leaf values in recording order.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match &node.op {
                Op::Leaf => node.value.clone(),
                op => {
                    let ins: Vec<&Tensor> = op.inputs().iter().map(|v| &values[v.0]).collect();
                    compute(op, &ins)?
                }
            };
            values.push(v);
        }
        Ok(values)
    }


    /// Reverse-mode accumulation from a scalar `loss`. Each node adds its
    /// vector-Jacobian products straight into its inputs' gradient buffers.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.value(loss).shape();
        if shape != [1, 1] {
            return Err(TensorError::NonScalarLoss { shape });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.accumulate(&node.op, &node.value, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Gradient buffer of `v`, zero-filled on first use. `None` when `v`
    /// takes no gradient.
    fn slot<'g>(&self, grads: &'g mut [Option<Tensor>], v: Var) -> Option<&'g mut Tensor> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let [r, c] = node.value.shape();
        Some(grads[v.0].get_or_insert_with(|| Tensor::zeros(r, c)))
    }

    /// `grad(v)[k] += f(k, g[k])` over every entry.
    fn add_map(&self, grads: &mut [Option<Tensor>], v: Var, g: &Tensor, f: impl Fn(usize, f64) -> f64) {
        if let Some(s) = self.slot(grads, v) {
            for (k, (s, &x)) in s.data_mut().iter_mut().zip(g.data()).enumerate() {
                *s += f(k, x);
            }
        }
    }

    /// Adds the vector-Jacobian products of `op` for upstream `g`.
    fn accumulate(&self, op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let o = out.data();
        match *op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(a), val(b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if let Some(s) = self.slot(grads, a) {
                    gemm_acc(s.data_mut(), g.data(), false, bv.data(), true, m, n, k);
                }
                if let Some(s) = self.slot(grads, b) {
                    gemm_acc(s.data_mut(), av.data(), true, g.data(), false, k, m, n);
                }
            }
            Op::Add(a, b) => {
                self.add_map(grads, a, g, |_, x| x);
                self.add_map(grads, b, g, |_, x| x);
            }
            Op::Sub(a, b) => {
                self.add_map(grads, a, g, |_, x| x);
                self.add_map(grads, b, g, |_, x| -x);
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (val(a).data(), val(b).data());
                self.add_map(grads, a, g, |k, x| x * bd[k]);
                self.add_map(grads, b, g, |k, x| x * ad[k]);
            }
            Op::Div(a, b) => {
                let bd = val(b).data();
                self.add_map(grads, a, g, |k, x| x / bd[k]);
                self.add_map(grads, b, g, |k, x| -x * o[k] / bd[k]);
            }
            Op::AddRow(a, row) | Op::MulRow(a, row) => {
                let add = matches!(op, Op::AddRow(..));
                let c = val(a).cols();
                let (ad, rd) = (val(a).data(), val(row).data());
                if add {
                    self.add_map(grads, a, g, |_, x| x);
                } else {
                    self.add_map(grads, a, g, |k, x| x * rd[k % c]);
                }
                if let Some(s) = self.slot(grads, row) {
                    let s = s.data_mut();
                    for (k, &x) in g.data().iter().enumerate() {
                        s[k % c] += if add { x } else { x * ad[k] };
                    }
                }
            }
            Op::AddTiled(a, b) => {
                self.add_map(grads, a, g, |_, x| x);
                if let Some(s) = self.slot(grads, b) {
                    let s = s.data_mut();
                    let block = s.len();
                    for (k, &x) in g.data().iter().enumerate() {
                        s[k % block] += x;
                    }
                }
            }
            Op::Scale(a, f) => self.add_map(grads, a, g, |_, x| x * f),
            Op::Exp(a) => self.add_map(grads, a, g, |k, x| x * o[k]),
            Op::Log(a) => {
                let ad = val(a).data();
                self.add_map(grads, a, g, |k, x| x / ad[k]);
            }
            Op::Tanh(a) => self.add_map(grads, a, g, |k, x| x * (1.0 - o[k] * o[k])),
            Op::Sigmoid(a) => self.add_map(grads, a, g, |k, x| x * o[k] * (1.0 - o[k])),
            Op::Relu(a) => {
                let ad = val(a).data();
                self.add_map(grads, a, g, |k, x| if ad[k] > 0.0 { x } else { 0.0 });
            }
            Op::Sqrt(a) => self.add_map(grads, a, g, |k, x| x / (2.0 * o[k])),
            Op::SoftmaxRows(a) => {
                let c = out.cols();
                if let (Some(s), true) = (self.slot(grads, a), c > 0) {
                    let rows = s.data_mut().chunks_mut(c).zip(o.chunks(c)).zip(g.data().chunks(c));
                    for ((s, y), gr) in rows {
                        let dot: f64 = y.iter().zip(gr).map(|(y, g)| y * g).sum();
                        for j in 0..c {
                            s[j] += y[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::Sum(a) => {
                let g0 = g.item();
                self.add_map(grads, a, &Tensor::full(val(a).rows(), val(a).cols(), g0), |_, x| x);
            }
            Op::Mean(a) => {
                let g0 = g.item() / val(a).len() as f64;
                if let Some(s) = self.slot(grads, a) {
                    s.data_mut().iter_mut().for_each(|s| *s += g0);
                }
            }
            Op::Variance { x, ddof, .. } => {
                let xd = val(x).data();
                let n = xd.len() as f64;
                let m = xd.iter().sum::<f64>() / n;
                let f = 2.0 * g.item() / (n - ddof as f64);
                if let Some(s) = self.slot(grads, x) {
                    for (s, v) in s.data_mut().iter_mut().zip(xd) {
                        *s += f * (v - m);
                    }
                }
            }
            Op::LayerNorm { x, eps } => {
                let xv = val(x);
                let c = xv.cols();
                if let Some(s) = self.slot(grads, x) {
                    let rows = s
                        .data_mut()
                        .chunks_mut(c)
                        .zip(xv.data().chunks(c))
                        .zip(o.chunks(c).zip(g.data().chunks(c)));
                    for ((s, xr), (y, gr)) in rows {
                        let m = xr.iter().sum::<f64>() / c as f64;
                        let var = xr.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / c as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        let gm = gr.iter().sum::<f64>() / c as f64;
                        let gy = gr.iter().zip(y).map(|(g, y)| g * y).sum::<f64>() / c as f64;
                        for j in 0..c {
                            s[j] += inv * (gr[j] - gm - y[j] * gy);
                        }
                    }
                }
            }
            Op::ConcatCols(ref parts) => {
                let total = out.cols();
                let mut offset = 0;
                for &p in parts {
                    let pc = val(p).cols();
                    if let Some(s) = self.slot(grads, p) {
                        for (r, s) in s.data_mut().chunks_mut(pc.max(1)).enumerate() {
                            let gr = &g.data()[r * total + offset..r * total + offset + pc];
                            s.iter_mut().zip(gr).for_each(|(s, x)| *s += x);
                        }
                    }
                    offset += pc;
                }
            }
            Op::ConcatRows(ref parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = val(p).len();
                    if let Some(s) = self.slot(grads, p) {
                        let gr = &g.data()[offset..offset + len];
                        s.data_mut().iter_mut().zip(gr).for_each(|(s, x)| *s += x);
                    }
                    offset += len;
                }
            }
            Op::SliceCols { x, start, end } => {
                let w = end - start;
                let c = val(x).cols();
                if let Some(s) = self.slot(grads, x) {
                    for (r, gr) in g.data().chunks(w).enumerate() {
                        let dst = &mut s.data_mut()[r * c + start..r * c + end];
                        dst.iter_mut().zip(gr).for_each(|(s, x)| *s += x);
                    }
                }
            }
            Op::SliceRows { x, start, .. } => {
                let c = val(x).cols();
                if let Some(s) = self.slot(grads, x) {
                    let dst = &mut s.data_mut()[start * c..start * c + g.len()];
                    dst.iter_mut().zip(g.data()).for_each(|(s, x)| *s += x);
                }
            }
            Op::Transpose(a) => {
                let [r, c] = val(a).shape();
                if let Some(s) = self.slot(grads, a) {
                    let s = s.data_mut();
                    for i in 0..r {
                        for j in 0..c {
                            s[i * c + j] += g.data()[j * r + i];
                        }
                    }
                }
            }
            Op::GroupMatMulNT { a, b, groups } => {
                // out_g = A_g B_g^T: dA_g = G_g B_g, dB_g = G_g^T A_g.
                let (av, bv) = (val(a), val(b));
                let (m, n, k) = (av.rows() / groups, bv.rows() / groups, av.cols());
                if let Some(s) = self.slot(grads, a) {
                    for q in 0..groups {
                        let gg = &g.data()[q * m * n..(q + 1) * m * n];
                        let bg = &bv.data()[q * n * k..(q + 1) * n * k];
                        gemm_acc(&mut s.data_mut()[q * m * k..(q + 1) * m * k], gg, false, bg, false, m, n, k);
                    }
                }
                if let Some(s) = self.slot(grads, b) {
                    for q in 0..groups {
                        let gg = &g.data()[q * m * n..(q + 1) * m * n];
                        let ag = &av.data()[q * m * k..(q + 1) * m * k];
                        gemm_acc(&mut s.data_mut()[q * n * k..(q + 1) * n * k], gg, true, ag, false, n, m, k);
                    }
                }
            }
            Op::GroupMatMul { a, b, groups } => {
                // out_g = A_g B_g: dA_g = G_g B_g^T, dB_g = A_g^T G_g.
                let (av, bv) = (val(a), val(b));
                let (m, k, n) = (av.rows() / groups, av.cols(), bv.cols());
                if let Some(s) = self.slot(grads, a) {
                    for q in 0..groups {
                        let gg = &g.data()[q * m * n..(q + 1) * m * n];
                        let bg = &bv.data()[q * k * n..(q + 1) * k * n];
                        gemm_acc(&mut s.data_mut()[q * m * k..(q + 1) * m * k], gg, false, bg, true, m, n, k);
                    }
                }
                if let Some(s) = self.slot(grads, b) {
                    for q in 0..groups {
                        let gg = &g.data()[q * m * n..(q + 1) * m * n];
                        let ag = &av.data()[q * m * k..(q + 1) * m * k];
                        gemm_acc(&mut s.data_mut()[q * k * n..(q + 1) * k * n], ag, true, gg, false, k, m, n);
                    }
                }
            }
            Op::GroupMeanRows { x, groups } => {
                let xv = val(x);
                let (p, c) = (xv.rows() / groups, xv.cols());
                if let Some(s) = self.slot(grads, x) {
                    let s = s.data_mut();
                    for (k, s) in s.iter_mut().enumerate() {
                        let (row, col) = (k / c, k % c);
                        *s += g.data()[(row / p) * c + col] / p as f64;
                    }
                }
            }
            Op::LstmCell { z, c_prev } => {
                let h = val(z).cols() / 4;
                let w = LSTM_CELL_BLOCKS * h;
                let rows = out.rows();
                let mut dz = vec![0.0; rows * 4 * h];
                let mut dc_prev = vec![0.0; rows * h];
                for r in 0..rows {
                    let y = &o[r * w..(r + 1) * w];
                    let gy = &g.data()[r * w..(r + 1) * w];
                    for j in 0..h {
                        let (i, f, gc, og, tc) = (y[2 * h + j], y[3 * h + j], y[4 * h + j], y[5 * h + j], y[6 * h + j]);
                        let prev = c_prev.map_or(0.0, |c| val(c).data()[r * h + j]);
                        let dtc = 1.0 - tc * tc;
                        let dc = gy[h + j] + gy[j] * og * dtc + gy[6 * h + j] * dtc;
                        let di = gy[2 * h + j] + dc * gc;
                        let df = gy[3 * h + j] + dc * prev;
                        let dg = gy[4 * h + j] + dc * i;
                        let d_o = gy[5 * h + j] + gy[j] * tc;
                        let dzr = &mut dz[r * 4 * h..(r + 1) * 4 * h];
                        dzr[j] = di * i * (1.0 - i);
                        dzr[h + j] = df * f * (1.0 - f);
                        dzr[2 * h + j] = dg * (1.0 - gc * gc);
                        dzr[3 * h + j] = d_o * og * (1.0 - og);
                        dc_prev[r * h + j] = dc * f;
                    }
                }
                if let Some(s) = self.slot(grads, z) {
                    s.data_mut().iter_mut().zip(&dz).for_each(|(s, x)| *s += x);
                }
                if let Some(c) = c_prev {
                    if let Some(s) = self.slot(grads, c) {
                        s.data_mut().iter_mut().zip(&dc_prev).for_each(|(s, x)| *s += x);
                    }
                }
            }
        }
    }
}
