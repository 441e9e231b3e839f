//! Central finite-difference oracle for tape gradients.

use rand::seq::index::sample;

use super::{Result, RngStream, Tape, Tensor, Var};

/// Floor on the denominator of [`relative_error`], so coordinates whose true
/// derivative is zero are judged on absolute error. [`check_gradients`]
/// scales it by the loss magnitude when that exceeds one, since the rounding
/// error of a central difference grows with the loss.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Coordinates checked per input; `None` checks all of them.
    pub coords_per_input: Option<usize>,
    /// Minimum distance of every relu input from its kink.
    pub kink_margin: f64,
    /// Jitter applied to the point when it sits too close to a kink.
    pub jitter: f64,
    pub max_jitters: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            coords_per_input: None,
            kink_margin: 1e-4,
            jitter: 1e-2,
            max_jitters: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// `(input, coordinate, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
    /// Loss at the checked point.
    pub loss: f64,
    /// Inputs actually checked, after any kink jitter.
    pub point: Vec<Tensor>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    scaled_relative_error(analytic, numeric, 1.0)
}

/// [`relative_error`] with the floor raised to `REL_FLOOR * scale`.
pub fn scaled_relative_error(analytic: f64, numeric: f64, scale: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR * scale.max(1.0))
}

fn evaluate<F>(build: &F, inputs: &[Tensor]) -> Result<(Tape, Vec<Var>, Var)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|t| tape.param(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let loss = build(&mut tape, &vars)?;
    Ok((tape, vars, loss))
}

/// Compares [`Tape::backward`] with central differences of `build`, which
/// must map the given inputs to a scalar loss.
pub fn check_gradients<F>(
    build: F,
    inputs: &[Tensor],
    opts: &GradCheckOptions,
    rng: &mut RngStream,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut point = inputs.to_vec();
    let (mut tape, mut vars, mut loss) = evaluate(&build, &point)?;
    let mut jitters = 0;
    while tape.relu_margin() < opts.kink_margin && jitters < opts.max_jitters {
        for t in point.iter_mut() {
            for x in t.data_mut() {
                *x += rng.uniform(-opts.jitter, opts.jitter);
            }
        }
        (tape, vars, loss) = evaluate(&build, &point)?;
        jitters += 1;
    }
    let grads = tape.backward(loss)?;
    let loss_value = tape.value(loss).item();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: None,
        loss: loss_value,
        point: Vec::new(),
    };
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(&tape, *var);
        let n = point[i].len();
        let coords: Vec<usize> = match opts.coords_per_input {
            Some(k) if k < n => {
                let mut c = sample(rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        for c in coords {
            let mut shifted = point.clone();
            let x0 = point[i].data()[c];
            shifted[i].data_mut()[c] = x0 + opts.step;
            let (t, _, l) = evaluate(&build, &shifted)?;
            let up = t.value(l).item();
            shifted[i].data_mut()[c] = x0 - opts.step;
            let (t, _, l) = evaluate(&build, &shifted)?;
            let down = t.value(l).item();
            let numeric = (up - down) / (2.0 * opts.step);
            let a = analytic.data()[c];
            let err = scaled_relative_error(a, numeric, loss_value.abs());
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((i, c, a, numeric));
            }
        }
    }
    report.point = point;
    Ok(report)
}
