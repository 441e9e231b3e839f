use ndarray::{Array1, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::{Objective, Result, SubproblemConfig, TargetError, TargetSpec};
use crate::metrics::{downside_deviation, mean, project_to_simplex, sample_std};

/// Added under the square root of the denominator when differentiating it.
/// Never used for reported ratios.
const GRAD_EPS: f64 = 1e-12;
/// Halvings allowed per line search before the subproblem gives up.
const MAX_BACKTRACKS: usize = 60;
/// Step growth after an accepted step.
const STEP_GROWTH: f64 = 1.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSolution {
    pub weights: Vec<f64>,
    /// Sample ratio (daily, not annualized) of the returned weights.
    pub achieved_ratio: f64,
    /// Dinkelbach parameter per outer iteration; non-decreasing.
    pub lambda_history: Vec<f64>,
    pub converged: bool,
    pub outer_iters: usize,
}

impl TargetSolution {
    /// Turns an unconverged solve into [`TargetError::NoConvergence`].
    pub fn require_converged(self) -> Result<Self> {
        if self.converged {
            Ok(self)
        } else {
            Err(TargetError::NoConvergence(self.outer_iters))
        }
    }
}

/// `f / g` with the conventions used throughout the solver for `g = 0`:
/// `+inf` for positive mean, `-inf` for negative, 0 for zero.
fn ratio_of(f: f64, g: f64) -> f64 {
    if g > 0.0 {
        f / g
    } else if f > 0.0 {
        f64::INFINITY
    } else if f < 0.0 {
        f64::NEG_INFINITY
    } else {
        0.0
    }
}

fn deviation(p: &[f64], objective: Objective) -> f64 {
    match objective {
        Objective::MaxSharpe => sample_std(p),
        Objective::MaxSortino => downside_deviation(p),
    }
}

/// Sample ratio of portfolio `w` over the return window `r` (`T x n`).
pub fn portfolio_ratio(r: ArrayView2<'_, f64>, w: &[f64], objective: Objective) -> f64 {
    let p = r.dot(&ArrayView1::from(w)).to_vec();
    ratio_of(mean(&p), deviation(&p, objective))
}

struct Problem<'a> {
    r: ArrayView2<'a, f64>,
    objective: Objective,
    col_means: Array1<f64>,
    /// Upper bound on the curvature of the denominator times its value:
    /// trace of the covariance (Sharpe) or of `R'R / T` (Sortino).
    curvature: f64,
}

impl<'a> Problem<'a> {
    fn new(r: ArrayView2<'a, f64>, objective: Objective) -> Self {
        let col_means = r.mean_axis(Axis(0)).expect("non-empty");
        let t = r.nrows() as f64;
        let curvature = match objective {
            Objective::MaxSharpe => r
                .columns()
                .into_iter()
                .map(|c| sample_std(&c.to_vec()).powi(2))
                .sum(),
            Objective::MaxSortino => r.iter().map(|x| x * x).sum::<f64>() / t,
        };
        Self {
            r,
            objective,
            col_means,
            curvature,
        }
    }

    fn portfolio(&self, w: &[f64]) -> Vec<f64> {
        self.r.dot(&ArrayView1::from(w)).to_vec()
    }

    /// Numerator and denominator at `w`.
    fn parts(&self, w: &[f64]) -> (f64, f64) {
        let p = self.portfolio(w);
        (mean(&p), deviation(&p, self.objective))
    }

    fn ratio(&self, w: &[f64]) -> f64 {
        let (f, g) = self.parts(w);
        ratio_of(f, g)
    }

    fn h(&self, w: &[f64], lambda: f64) -> f64 {
        let (f, g) = self.parts(w);
        f - lambda * g
    }

    fn grad_h(&self, w: &[f64], lambda: f64) -> Vec<f64> {
        let p = self.portfolio(w);
        let t = p.len() as f64;
        let (weights, denom) = match self.objective {
            Objective::MaxSharpe => {
                let m = mean(&p);
                let centered: Vec<f64> = p.iter().map(|x| x - m).collect();
                let var = centered.iter().map(|x| x * x).sum::<f64>() / (t - 1.0);
                (centered, (t - 1.0) * (var + GRAD_EPS).sqrt())
            }
            Objective::MaxSortino => {
                let neg: Vec<f64> = p.iter().map(|x| x.min(0.0)).collect();
                let ms = neg.iter().map(|x| x * x).sum::<f64>() / t;
                (neg, t * (ms + GRAD_EPS).sqrt())
            }
        };
        let dg = self.r.t().dot(&ArrayView1::from(&weights[..]));
        self.col_means
            .iter()
            .zip(dg.iter())
            .map(|(mu, d)| mu - lambda * d / denom)
            .collect()
    }

    fn vertex(&self, j: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.r.ncols()];
        v[j] = 1.0;
        v
    }

    /// `argmax_{w in simplex} f(w) - lambda g(w)`, warm-started at `start`.
    fn subproblem(&self, lambda: f64, start: &[f64], cfg: &SubproblemConfig) -> Vec<f64> {
        let n = self.r.ncols();
        if lambda == f64::NEG_INFINITY {
            // Any finite ratio improves on -inf; take the best vertex.
            let mut best = start.to_vec();
            let mut best_ratio = self.ratio(start);
            for j in 0..n {
                let v = self.vertex(j);
                let rv = self.ratio(&v);
                if rv > best_ratio {
                    best = v;
                    best_ratio = rv;
                }
            }
            return best;
        }
        if lambda <= 0.0 {
            // f - lambda g is convex here, so its maximum is at a vertex.
            let mut best = start.to_vec();
            let mut best_h = self.h(start, lambda);
            for j in 0..n {
                let v = self.vertex(j);
                let hv = self.h(&v, lambda);
                if hv > best_h {
                    best = v;
                    best_h = hv;
                }
            }
            return best;
        }
        self.ascend(lambda, start, cfg)
    }

    /// Projected gradient ascent with a sufficient-increase line search.
    /// Every accepted step increases the objective, so the result is never
    /// worse than `start`.
    fn ascend(&self, lambda: f64, start: &[f64], cfg: &SubproblemConfig) -> Vec<f64> {
        let (_, g0) = self.parts(start);
        let lipschitz = lambda * self.curvature / g0.max(1e-300);
        let mut step = if lipschitz > 0.0 && lipschitz.is_finite() {
            cfg.step_scale / lipschitz
        } else {
            cfg.step_scale
        };
        let mut w = start.to_vec();
        let mut hw = self.h(&w, lambda);
        for _ in 0..cfg.max_iters {
            let grad = self.grad_h(&w, lambda);
            let mut accepted = None;
            for _ in 0..MAX_BACKTRACKS {
                let trial: Vec<f64> = w.iter().zip(&grad).map(|(x, g)| x + step * g).collect();
                let cand = project_to_simplex(&trial);
                let d: Vec<f64> = cand.iter().zip(&w).map(|(a, b)| a - b).collect();
                let lin: f64 = grad.iter().zip(&d).map(|(g, x)| g * x).sum();
                let sq: f64 = d.iter().map(|x| x * x).sum();
                let hc = self.h(&cand, lambda);
                if hc >= hw + lin - sq / (2.0 * step) && hc >= hw {
                    accepted = Some((cand, hc, sq.sqrt()));
                    break;
                }
                step *= 0.5;
            }
            let Some((cand, hc, moved)) = accepted else { break };
            w = cand;
            hw = hc;
            if moved <= cfg.tol {
                break;
            }
            step *= STEP_GROWTH;
        }
        w
    }
}

/// Maximizes the sample Sharpe or Sortino ratio of a long-only portfolio over
/// the return window `r` (`T x n`) with Dinkelbach's method.
///
/// Starts from equal weights; each outer step solves
/// `max_w f(w) - lambda_k g(w)` and sets `lambda_{k+1} = f/g` at the
/// maximizer. Stops when `|F(lambda_k)| <= tol * max(1, |f|)`.
pub fn solve_target(r: ArrayView2<'_, f64>, spec: &TargetSpec) -> Result<TargetSolution> {
    spec.validate()?;
    let (t, n) = r.dim();
    if t < 2 || n == 0 {
        return Err(TargetError::BadWindow { rows: t, cols: n });
    }
    let degenerate = match spec.objective {
        Objective::MaxSharpe => r.columns().into_iter().all(|c| {
            let first = c[0];
            c.iter().all(|&x| x == first)
        }),
        Objective::MaxSortino => r.iter().all(|&x| x >= 0.0),
    };
    if degenerate {
        return Err(TargetError::DegenerateWindow);
    }

    let problem = Problem::new(r, spec.objective);
    let mut w = vec![1.0 / n as f64; n];
    let mut lambda = problem.ratio(&w);
    let mut history = vec![lambda];
    if n == 1 {
        return Ok(TargetSolution {
            weights: w,
            achieved_ratio: lambda,
            lambda_history: history,
            converged: true,
            outer_iters: 0,
        });
    }

    let mut converged = false;
    let mut iters = 0;
    while iters < spec.max_outer_iters {
        if lambda == f64::INFINITY {
            converged = true;
            break;
        }
        iters += 1;
        let next = problem.subproblem(lambda, &w, &spec.subproblem);
        let (f, g) = problem.parts(&next);
        let next_lambda = ratio_of(f, g);
        if next_lambda < lambda {
            // The subproblem could not improve on the current iterate.
            converged = true;
            break;
        }
        let gap = if lambda.is_finite() { f - lambda * g } else { f64::INFINITY };
        w = next;
        lambda = next_lambda;
        history.push(lambda);
        if gap.abs() <= spec.dinkelbach_tol * f.abs().max(1.0) {
            converged = true;
            break;
        }
    }
    Ok(TargetSolution {
        achieved_ratio: problem.ratio(&w),
        weights: w,
        lambda_history: history,
        converged,
        outer_iters: iters,
    })
}

/// Long-only mean-variance portfolio: `max mu'w - (gamma/2) w'Cw` over the
/// simplex, by projected gradient ascent with step `1 / (gamma * tr C)`.
pub fn solve_mean_variance(
    mu: &[f64],
    cov: ArrayView2<'_, f64>,
    risk_aversion: f64,
    cfg: &SubproblemConfig,
) -> Vec<f64> {
    let n = mu.len();
    let trace: f64 = (0..n).map(|i| cov[[i, i]]).sum();
    let lipschitz = risk_aversion * trace;
    let mut w = vec![1.0 / n as f64; n];
    if !(lipschitz > 0.0) {
        // Linear objective: all weight on the best mean (lowest index on ties).
        let best = (0..n).fold(0, |b, j| if mu[j] > mu[b] { j } else { b });
        w.iter_mut().enumerate().for_each(|(j, x)| *x = (j == best) as u8 as f64);
        return w;
    }
    let step = 1.0 / lipschitz;
    for _ in 0..cfg.max_iters {
        let cw = cov.dot(&ArrayView1::from(&w[..]));
        let trial: Vec<f64> = (0..n)
            .map(|j| w[j] + step * (mu[j] - risk_aversion * cw[j]))
            .collect();
        let next = project_to_simplex(&trial);
        let moved: f64 = next
            .iter()
            .zip(&w)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        w = next;
        if moved <= cfg.tol {
            break;
        }
    }
    w
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::is_on_simplex;
    use ndarray::{array, Array2};

    fn spec(obj: Objective, lookback: usize) -> TargetSpec {
        TargetSpec {
            lookback,
            ..TargetSpec::new(obj)
        }
    }

    /// Grid oracle over `w1` in {0, 0.001, ..., 1} for two assets.
    fn grid_two(r: &Array2<f64>, obj: Objective) -> (f64, f64) {
        let mut best = (f64::NEG_INFINITY, 0.0);
        for i in 0..=1000 {
            let w1 = i as f64 / 1000.0;
            let p: Vec<f64> = r.rows().into_iter().map(|row| row[0] * w1 + row[1] * (1.0 - w1)).collect();
            let ratio = mean(&p)
                / match obj {
                    Objective::MaxSharpe => sample_std(&p),
                    Objective::MaxSortino => downside_deviation(&p),
                };
            if ratio > best.0 {
                best = (ratio, w1);
            }
        }
        best
    }

    #[test]
    fn single_asset_is_full_weight() {
        let r = array![[0.01], [-0.02], [0.005]];
        let s = solve_target(r.view(), &spec(Objective::MaxSharpe, 3)).unwrap();
        assert_eq!(s.weights, vec![1.0]);
        assert!(s.converged);
    }

    #[test]
    fn duplicate_columns_split_evenly() {
        let r = array![[0.01, 0.01], [-0.02, -0.02], [0.03, 0.03], [0.0, 0.0]];
        for obj in [Objective::MaxSharpe, Objective::MaxSortino] {
            let s = solve_target(r.view(), &spec(obj, 4)).unwrap();
            assert_eq!(s.weights[0], s.weights[1]);
            assert!((s.weights[0] - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn uncorrelated_corner_optimum() {
        // Orthogonal zero-mean patterns with unit sample variance.
        let k = 3f64.sqrt() / 2.0;
        let z1 = [k, k, -k, -k];
        let z2 = [k, -k, k, -k];
        let r = Array2::from_shape_fn((4, 2), |(t, j)| {
            if j == 0 {
                0.01 + 0.02 * z1[t]
            } else {
                0.02 * z2[t]
            }
        });
        let (mu, cov) = crate::metrics::sample_mean_cov(r.view()).unwrap();
        assert!((mu[0] - 0.01).abs() < 1e-15 && mu[1].abs() < 1e-15);
        assert!((cov[[0, 0]].sqrt() - 0.02).abs() < 1e-12);
        assert!(cov[[0, 1]].abs() < 1e-15);

        let (oracle_ratio, oracle_w1) = grid_two(&r, Objective::MaxSharpe);
        assert_eq!(oracle_w1, 1.0);
        let s = solve_target(r.view(), &spec(Objective::MaxSharpe, 4)).unwrap();
        assert!(s.converged);
        assert!((s.weights[0] - 1.0).abs() < 1e-6, "{:?}", s.weights);
        assert!((s.achieved_ratio - oracle_ratio).abs() < 1e-9);
    }

    #[test]
    fn interior_optimum_matches_grid() {
        let r = array![
            [0.012, -0.004],
            [-0.008, 0.011],
            [0.015, 0.002],
            [-0.003, 0.009],
            [0.006, -0.007],
            [0.001, 0.004]
        ];
        for obj in [Objective::MaxSharpe, Objective::MaxSortino] {
            let (oracle_ratio, _) = grid_two(&r, obj);
            let s = solve_target(r.view(), &spec(obj, 6)).unwrap();
            assert!(s.converged);
            assert!(s.achieved_ratio >= oracle_ratio - 1e-9, "{obj:?}");
            assert!(s.lambda_history.windows(2).all(|w| w[1] >= w[0] - 1e-10));
            assert!(is_on_simplex(&s.weights, 1e-9));
        }
    }

    #[test]
    fn all_negative_means_pick_best_vertex() {
        let r = array![[-0.01, -0.002], [-0.02, 0.001], [0.005, -0.004], [-0.01, -0.001]];
        let s = solve_target(r.view(), &spec(Objective::MaxSharpe, 4)).unwrap();
        let (oracle_ratio, _) = grid_two(&r, Objective::MaxSharpe);
        assert!(s.achieved_ratio >= oracle_ratio - 1e-9);
        assert!(s.achieved_ratio < 0.0);
    }

    #[test]
    fn degenerate_windows() {
        let flat = array![[0.01, 0.02], [0.01, 0.02], [0.01, 0.02]];
        assert!(matches!(
            solve_target(flat.view(), &spec(Objective::MaxSharpe, 3)),
            Err(TargetError::DegenerateWindow)
        ));
        let pos = array![[0.01, 0.02], [0.03, 0.0], [0.01, 0.02]];
        assert!(matches!(
            solve_target(pos.view(), &spec(Objective::MaxSortino, 3)),
            Err(TargetError::DegenerateWindow)
        ));
    }

    #[test]
    fn mean_variance_prefers_higher_mean_at_low_risk_aversion() {
        let cov = array![[0.0004, 0.0], [0.0, 0.0004]];
        let w = solve_mean_variance(&[0.01, 0.0], cov.view(), 1e-3, &SubproblemConfig::default());
        assert!((w[0] - 1.0).abs() < 1e-9);
        let w = solve_mean_variance(&[0.01, 0.01], cov.view(), 10.0, &SubproblemConfig::default());
        assert!((w[0] - 0.5).abs() < 1e-9);
    }
}
