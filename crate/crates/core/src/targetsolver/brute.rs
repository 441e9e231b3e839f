use ndarray::ArrayView2;

use super::{Objective, Result, TargetError};
use crate::metrics::{downside_deviation, mean, sample_std};

/// Exhaustive search over the simplex lattice with spacing `resolution`.
///
/// Verification oracle for [`super::solve_target`]: evaluates the sample
/// ratio of every lattice portfolio directly from its return series. Ties go
/// to the lexicographically smallest weight vector. Returns the weights and
/// their ratio.
pub fn brute_force_target(
    r: ArrayView2<'_, f64>,
    objective: Objective,
    resolution: f64,
) -> Result<(Vec<f64>, f64)> {
    let n = r.ncols();
    if n > 3 {
        return Err(TargetError::TooManyAssets(n));
    }
    if n == 0 || r.nrows() < 2 {
        return Err(TargetError::BadWindow {
            rows: r.nrows(),
            cols: n,
        });
    }
    if !(resolution > 0.0 && resolution <= 0.01) {
        return Err(TargetError::InvalidSpec(format!(
            "resolution must be in (0, 0.01], got {resolution}"
        )));
    }
    let steps = (1.0 / resolution).round() as usize;
    let ratio = |w: &[f64]| -> f64 {
        let p: Vec<f64> = r
            .rows()
            .into_iter()
            .map(|row| row.iter().zip(w).map(|(a, b)| a * b).sum())
            .collect();
        let f = mean(&p);
        let g = match objective {
            Objective::MaxSharpe => sample_std(&p),
            Objective::MaxSortino => downside_deviation(&p),
        };
        if g > 0.0 {
            f / g
        } else if f > 0.0 {
            f64::INFINITY
        } else if f < 0.0 {
            f64::NEG_INFINITY
        } else {
            0.0
        }
    };

    let mut best_w = Vec::new();
    let mut best = f64::NEG_INFINITY;
    let mut consider = |w: Vec<f64>| {
        let v = ratio(&w);
        if best_w.is_empty() || v > best {
            best = v;
            best_w = w;
        }
    };
    let s = steps as f64;
    match n {
        1 => consider(vec![1.0]),
        2 => {
            for i in 0..=steps {
                consider(vec![i as f64 / s, (steps - i) as f64 / s]);
            }
        }
        _ => {
            for i in 0..=steps {
                for j in 0..=(steps - i) {
                    consider(vec![i as f64 / s, j as f64 / s, (steps - i - j) as f64 / s]);
                }
            }
        }
    }
    Ok((best_w, best))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::targetsolver::{solve_target, TargetSpec};
    use ndarray::array;

    #[test]
    fn single_asset() {
        let r = array![[0.01], [0.02]];
        let (w, _) = brute_force_target(r.view(), Objective::MaxSharpe, 0.01).unwrap();
        assert_eq!(w, vec![1.0]);
    }

    #[test]
    fn rejects_four_assets() {
        let r = ndarray::Array2::<f64>::zeros((3, 4));
        assert!(matches!(
            brute_force_target(r.view(), Objective::MaxSharpe, 0.01),
            Err(TargetError::TooManyAssets(4))
        ));
    }

    #[test]
    fn flat_objective_agrees_on_ratio() {
        let r = array![[0.01, 0.01], [-0.02, -0.02], [0.03, 0.03], [0.0, 0.0]];
        let (_, oracle) = brute_force_target(r.view(), Objective::MaxSharpe, 0.001).unwrap();
        let spec = TargetSpec {
            lookback: 4,
            ..TargetSpec::new(Objective::MaxSharpe)
        };
        let s = solve_target(r.view(), &spec).unwrap();
        assert!((s.achieved_ratio - oracle).abs() < 1e-6);
    }
}
