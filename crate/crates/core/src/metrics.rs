//! Portfolio arithmetic shared by every stage.
//!
//! All ratios assume a zero risk-free rate. Sharpe uses the sample (`T - 1`)
//! standard deviation; Sortino uses the downside deviation against a zero
//! target with the full sample count `T` in the denominator.

use chrono::NaiveDate;
use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Trading days per year used for annualization of daily ratios.
pub const TRADING_DAYS_PER_YEAR: f64 = 252.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("series too short: need at least {need}, got {got}")]
    TooShort { need: usize, got: usize },
    #[error("zero dispersion: standard deviation is zero")]
    ZeroDispersion,
    #[error("zero downside: no negative returns in series")]
    ZeroDownside,
    #[error("non-positive price {0} at index {1}")]
    NonPositivePrice(f64, usize),
    #[error("length mismatch: {0} dates vs {1} values")]
    LengthMismatch(usize, usize),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Simple daily returns aligned with the dates they are realized on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReturnSeries {
    pub dates: Vec<NaiveDate>,
    pub values: Vec<f64>,
}

impl ReturnSeries {
    pub fn new(dates: Vec<NaiveDate>, values: Vec<f64>) -> Result<Self> {
        if dates.len() != values.len() {
            return Err(MetricsError::LengthMismatch(dates.len(), values.len()));
        }
        Ok(Self { dates, values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Headline performance numbers of an equity curve.
///
/// Ratios are `None` when undefined for the curve (e.g. a flat curve has no
/// dispersion, so no Sharpe ratio).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerformanceSummary {
    /// Final over initial equity, e.g. `2.79` means the curve grew 2.79x.
    pub cumulative_return: f64,
    pub sharpe: Option<f64>,
    pub sortino: Option<f64>,
    pub max_drawdown: f64,
}

/// `r_t = p_t / p_{t-1} - 1`.
pub fn simple_returns(prices: &[f64]) -> Result<Vec<f64>> {
    if prices.len() < 2 {
        return Err(MetricsError::TooShort {
            need: 2,
            got: prices.len(),
        });
    }
    if let Some((i, &p)) = prices.iter().enumerate().find(|(_, p)| !(**p > 0.0)) {
        return Err(MetricsError::NonPositivePrice(p, i));
    }
    Ok(prices.windows(2).map(|w| w[1] / w[0] - 1.0).collect())
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample standard deviation (`T - 1` denominator).
pub fn sample_std(values: &[f64]) -> f64 {
    let m = mean(values);
    let ss: f64 = values.iter().map(|v| (v - m) * (v - m)).sum();
    (ss / (values.len() as f64 - 1.0)).sqrt()
}

/// Root mean square of the negative part of the series, target 0,
/// denominator `T`.
pub fn downside_deviation(values: &[f64]) -> f64 {
    let ss: f64 = values
        .iter()
        .map(|v| {
            let d = v.min(0.0);
            d * d
        })
        .sum();
    (ss / values.len() as f64).sqrt()
}

/// `mean / sample_std * sqrt(annualization)`. Use 252 for daily data, 1 for raw.
pub fn sharpe_ratio(returns: &[f64], annualization: f64) -> Result<f64> {
    if returns.len() < 2 {
        return Err(MetricsError::TooShort {
            need: 2,
            got: returns.len(),
        });
    }
    let sd = sample_std(returns);
    if !(sd > 0.0) {
        return Err(MetricsError::ZeroDispersion);
    }
    Ok(mean(returns) / sd * annualization.sqrt())
}

/// `mean / downside_deviation * sqrt(annualization)`.
pub fn sortino_ratio(returns: &[f64], annualization: f64) -> Result<f64> {
    if returns.len() < 2 {
        return Err(MetricsError::TooShort {
            need: 2,
            got: returns.len(),
        });
    }
    if !returns.iter().any(|&r| r < 0.0) {
        return Err(MetricsError::ZeroDownside);
    }
    Ok(mean(returns) / downside_deviation(returns) * annualization.sqrt())
}

/// Largest peak-to-trough loss as a fraction of the running peak.
pub fn max_drawdown(equity: &[f64]) -> f64 {
    let mut peak = f64::NEG_INFINITY;
    let mut worst = 0.0_f64;
    for &e in equity {
        peak = peak.max(e);
        worst = worst.max((peak - e) / peak);
    }
    worst
}

/// Column means and unbiased covariance of a `T x n` return window.
///
/// The covariance is symmetrized on output.
pub fn sample_mean_cov(window: ArrayView2<'_, f64>) -> Result<(Array1<f64>, Array2<f64>)> {
    let t = window.nrows();
    if t < 2 {
        return Err(MetricsError::TooShort { need: 2, got: t });
    }
    let means = window.mean_axis(Axis(0)).expect("non-empty window");
    let centered = &window - &means.view().insert_axis(Axis(0));
    let mut cov = centered.t().dot(&centered) / (t as f64 - 1.0);
    let n = cov.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let s = 0.5 * (cov[[i, j]] + cov[[j, i]]);
            cov[[i, j]] = s;
            cov[[j, i]] = s;
        }
    }
    Ok((means, cov))
}

/// Euclidean projection onto the probability simplex `{w >= 0, sum w = 1}`
/// by sorting and thresholding.
pub fn project_to_simplex(v: &[f64]) -> Vec<f64> {
    assert!(!v.is_empty(), "projection of an empty vector");
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (k, &u) in sorted.iter().enumerate() {
        cumsum += u;
        let t = (cumsum - 1.0) / (k as f64 + 1.0);
        if u - t > 0.0 {
            theta = t;
        } else {
            break;
        }
    }
    let mut w: Vec<f64> = v.iter().map(|&x| (x - theta).max(0.0)).collect();
    // Clean up the last ulp of drift so the output sums to one.
    let s: f64 = w.iter().sum();
    if s > 0.0 && s != 1.0 {
        w.iter_mut().for_each(|x| *x /= s);
    }
    w
}

/// True when `w` is non-negative and sums to one within `tol`.
pub fn is_on_simplex(w: &[f64], tol: f64) -> bool {
    !w.is_empty() && w.iter().all(|&x| x >= 0.0) && (w.iter().sum::<f64>() - 1.0).abs() <= tol
}

/// Computes the summary of an equity curve, scaling daily ratios by
/// `sqrt(annualization)`. Undefined ratios are `None`.
pub fn summarize_equity(equity: &[f64], annualization: f64) -> Result<PerformanceSummary> {
    let returns = simple_returns(equity)?;
    Ok(PerformanceSummary {
        cumulative_return: equity[equity.len() - 1] / equity[0],
        sharpe: sharpe_ratio(&returns, annualization).ok(),
        sortino: sortino_ratio(&returns, annualization).ok(),
        max_drawdown: max_drawdown(equity),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn simple_return_examples() {
        let r = simple_returns(&[100.0, 110.0]).unwrap();
        assert!((r[0] - 0.10).abs() < 1e-15);
        assert!(simple_returns(&[5.0, 5.0, 5.0]).unwrap().iter().all(|&x| x == 0.0));
        assert_eq!(
            simple_returns(&[1.0]),
            Err(MetricsError::TooShort { need: 2, got: 1 })
        );
    }

    #[test]
    fn sharpe_examples() {
        let alt = [0.01, -0.01, 0.01, -0.01];
        assert_eq!(sharpe_ratio(&alt, 252.0).unwrap(), 0.0);
        let s = sharpe_ratio(&[0.01, 0.02, 0.03], 1.0).unwrap();
        assert!((s - 2.0).abs() < 1e-12);
        assert_eq!(sharpe_ratio(&[0.01, 0.01], 1.0), Err(MetricsError::ZeroDispersion));
    }

    #[test]
    fn sortino_examples() {
        let s = sortino_ratio(&[0.02, -0.01], 1.0).unwrap();
        assert!((downside_deviation(&[0.02, -0.01]) - 0.007_071_067_811_865_475).abs() < 1e-15);
        assert!((s - 0.707_106_781_186_547_5).abs() < 1e-12);
        assert_eq!(sortino_ratio(&[0.01, 0.02], 1.0), Err(MetricsError::ZeroDownside));
        assert_eq!(sortino_ratio(&[0.03, -0.03], 1.0).unwrap(), 0.0);
    }

    #[test]
    fn drawdown_examples() {
        assert!((max_drawdown(&[1.0, 1.2, 0.9, 1.0]) - 0.25).abs() < 1e-15);
        assert_eq!(max_drawdown(&[1.0, 2.0, 3.0]), 0.0);
        assert_eq!(max_drawdown(&[1.0]), 0.0);
    }

    #[test]
    fn mean_cov_examples() {
        let w = array![[0.01], [0.03]];
        let (m, c) = sample_mean_cov(w.view()).unwrap();
        assert!((m[0] - 0.02).abs() < 1e-15);
        assert!((c[[0, 0]] - 0.0002).abs() < 1e-15);

        let dup = array![[0.01, 0.01], [0.02, 0.02], [-0.01, -0.01]];
        let (_, c) = sample_mean_cov(dup.view()).unwrap();
        assert_eq!(c[[0, 1]], c[[0, 0]]);
        assert_eq!(c[[1, 0]], c[[1, 1]]);

        let one = array![[0.01, 0.02]];
        assert!(matches!(
            sample_mean_cov(one.view()),
            Err(MetricsError::TooShort { .. })
        ));
    }

    /// Dense-grid oracle: minimize squared distance over simplex points on a
    /// 1e-3 lattice.
    fn grid_projection_3(v: &[f64; 3]) -> [f64; 3] {
        let steps = 1000;
        let mut best = [0.0; 3];
        let mut best_d = f64::INFINITY;
        for i in 0..=steps {
            for j in 0..=(steps - i) {
                let w = [
                    i as f64 / steps as f64,
                    j as f64 / steps as f64,
                    (steps - i - j) as f64 / steps as f64,
                ];
                let d: f64 = (0..3).map(|k| (v[k] - w[k]).powi(2)).sum();
                if d < best_d {
                    best_d = d;
                    best = w;
                }
            }
        }
        best
    }

    #[test]
    fn projection_matches_grid_oracle() {
        let v = [0.5, 0.5, 1.5];
        let oracle = grid_projection_3(&v);
        assert_eq!(oracle, [0.0, 0.0, 1.0]);
        let p = project_to_simplex(&v);
        for k in 0..3 {
            assert!((p[k] - oracle[k]).abs() <= 1e-3);
        }
        let v = [0.3, -0.2, 0.6];
        let oracle = grid_projection_3(&v);
        let p = project_to_simplex(&v);
        for k in 0..3 {
            assert!((p[k] - oracle[k]).abs() <= 1e-3, "{p:?} vs {oracle:?}");
        }
    }

    #[test]
    fn projection_fixed_points() {
        let w = [0.2, 0.3, 0.5];
        let p = project_to_simplex(&w);
        for k in 0..3 {
            assert!((p[k] - w[k]).abs() < 1e-12);
        }
        for c in [-3.0, 0.0, 0.7, 10.0] {
            let p = project_to_simplex(&[c; 4]);
            assert!(p.iter().all(|&x| (x - 0.25).abs() < 1e-15));
        }
    }

    fn two_pass_cov(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let t = rows.len();
        let n = rows[0].len();
        let mut mu = vec![0.0; n];
        for r in rows {
            for j in 0..n {
                mu[j] += r[j];
            }
        }
        mu.iter_mut().for_each(|m| *m /= t as f64);
        let mut c = vec![vec![0.0; n]; n];
        for r in rows {
            for i in 0..n {
                for j in 0..n {
                    c[i][j] += (r[i] - mu[i]) * (r[j] - mu[j]);
                }
            }
        }
        for row in c.iter_mut() {
            row.iter_mut().for_each(|x| *x /= t as f64 - 1.0);
        }
        c
    }

    proptest! {
        #[test]
        fn projection_is_idempotent_and_feasible(v in prop::collection::vec(-5.0f64..5.0, 1..12)) {
            let p = project_to_simplex(&v);
            prop_assert!(p.iter().all(|&x| x >= 0.0));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            let pp = project_to_simplex(&p);
            for (a, b) in p.iter().zip(&pp) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }

        #[test]
        fn projection_is_closest_point(
            v in prop::collection::vec(-2.0f64..2.0, 3),
            seed in any::<u64>(),
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let p = project_to_simplex(&v);
            let dp: f64 = v.iter().zip(&p).map(|(a, b)| (a - b).powi(2)).sum();
            for _ in 0..1000 {
                let raw: Vec<f64> = (0..3).map(|_| -rng.gen::<f64>().ln()).collect();
                let s: f64 = raw.iter().sum();
                let w: Vec<f64> = raw.iter().map(|x| x / s).collect();
                let dw: f64 = v.iter().zip(&w).map(|(a, b)| (a - b).powi(2)).sum();
                prop_assert!(dp <= dw + 1e-12);
            }
        }

        #[test]
        fn ratios_are_scale_invariant(
            mut r in prop::collection::vec(-0.05f64..0.05, 3..40),
            c in 0.01f64..100.0,
        ) {
            r[0] = -0.01;
            r[1] = 0.02;
            let scaled: Vec<f64> = r.iter().map(|x| x * c).collect();
            let s1 = sharpe_ratio(&r, 1.0).unwrap();
            let s2 = sharpe_ratio(&scaled, 1.0).unwrap();
            prop_assert!((s1 - s2).abs() <= 1e-12 * s1.abs().max(1.0));
            let o1 = sortino_ratio(&r, 1.0).unwrap();
            let o2 = sortino_ratio(&scaled, 1.0).unwrap();
            prop_assert!((o1 - o2).abs() <= 1e-12 * o1.abs().max(1.0));
        }

        #[test]
        fn drawdown_is_scale_invariant(
            e in prop::collection::vec(0.1f64..10.0, 1..50),
            c in 0.01f64..100.0,
        ) {
            let scaled: Vec<f64> = e.iter().map(|x| x * c).collect();
            let d = max_drawdown(&e);
            prop_assert!((0.0..=1.0).contains(&d));
            prop_assert!((d - max_drawdown(&scaled)).abs() <= 1e-12);
        }

        #[test]
        fn covariance_matches_two_pass(rows in prop::collection::vec(prop::collection::vec(-0.1f64..0.1, 4), 2..30)) {
            let t = rows.len();
            let flat: Vec<f64> = rows.iter().flatten().copied().collect();
            let m = Array2::from_shape_vec((t, 4), flat).unwrap();
            let (_, c) = sample_mean_cov(m.view()).unwrap();
            let oracle = two_pass_cov(&rows);
            for i in 0..4 {
                for j in 0..4 {
                    prop_assert!((c[[i, j]] - oracle[i][j]).abs() <= 1e-12);
                }
            }
        }
    }
}
