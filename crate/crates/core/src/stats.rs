//! Small statistics kernel: ranks, Pearson and Spearman correlation, and
//! ordinary least squares with an intercept.

use nalgebra::{DMatrix, DVector};

use crate::error::StatsError;

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n - 1 denominator); `None` below two values.
pub fn sample_std(xs: &[f64]) -> Option<f64> {
    if xs.len() < 2 {
        return None;
    }
    let m = mean(xs);
    let ss: f64 = xs.iter().map(|x| (x - m) * (x - m)).sum();
    Some((ss / (xs.len() - 1) as f64).sqrt())
}

/// 1-based ranks; tied values share the average of their positions.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && xs[order[j]] == xs[order[i]] {
            j += 1;
        }
        // Positions i..j (0-based) share rank (i + 1 + j) / 2.
        let r = (i + j + 1) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = r;
        }
        i = j;
    }
    ranks
}

fn check_pair(x: &[f64], y: &[f64]) -> Result<(), StatsError> {
    if x.len() != y.len() {
        return Err(StatsError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(StatsError::TooFewObservations {
            needed: 2,
            got: x.len(),
        });
    }
    Ok(())
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64, StatsError> {
    check_pair(x, y)?;
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(StatsError::ZeroVariance);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Spearman's rho: Pearson correlation of the average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64, StatsError> {
    check_pair(x, y)?;
    pearson(&average_ranks(x), &average_ranks(y))
}

#[derive(Debug, Clone, PartialEq)]
pub struct OlsFit {
    pub intercept: f64,
    /// One slope per predictor column.
    pub coefficients: Vec<f64>,
    pub r_squared: f64,
    pub adj_r_squared: f64,
    pub residuals: Vec<f64>,
}

/// Least-squares fit of `y ~ 1 + X` via a QR decomposition.
///
/// `predictors` holds one row per observation. When `y` has zero variance
/// R² is reported as 0.
pub fn ols_fit(predictors: &[Vec<f64>], y: &[f64]) -> Result<OlsFit, StatsError> {
    let n = y.len();
    if predictors.len() != n {
        return Err(StatsError::LengthMismatch(predictors.len(), n));
    }
    let k = predictors.first().map_or(0, Vec::len);
    if let Some(row) = predictors.iter().find(|r| r.len() != k) {
        return Err(StatsError::LengthMismatch(row.len(), k));
    }
    let cols = k + 1;
    if n < cols + 1 {
        return Err(StatsError::TooFewObservations {
            needed: cols + 1,
            got: n,
        });
    }
    let x = DMatrix::from_fn(n, cols, |i, j| if j == 0 { 1.0 } else { predictors[i][j - 1] });
    let collinear = collinear_columns(&x);
    if !collinear.is_empty() {
        return Err(StatsError::RankDeficient(collinear));
    }
    let yv = DVector::from_column_slice(y);
    let qr = x.clone().qr();
    let qty = qr.q().transpose() * &yv;
    let beta = qr
        .r()
        .solve_upper_triangular(&qty)
        .ok_or_else(|| StatsError::RankDeficient((0..k).collect()))?;
    let fitted = &x * &beta;
    let residuals: Vec<f64> = (&yv - fitted).iter().copied().collect();
    let my = y.iter().sum::<f64>() / n as f64;
    let sst: f64 = y.iter().map(|v| (v - my) * (v - my)).sum();
    let sse: f64 = residuals.iter().map(|r| r * r).sum();
    let r_squared = if sst == 0.0 { 0.0 } else { 1.0 - sse / sst };
    let adj_r_squared = 1.0 - (1.0 - r_squared) * (n - 1) as f64 / (n - k - 1) as f64;
    Ok(OlsFit {
        intercept: beta[0],
        coefficients: beta.iter().skip(1).copied().collect(),
        r_squared,
        adj_r_squared,
        residuals,
    })
}

/// Predictor columns (0-based, intercept excluded) that lie in the span of
/// the intercept and the columns before them.
fn collinear_columns(x: &DMatrix<f64>) -> Vec<usize> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut bad = Vec::new();
    for j in 0..x.ncols() {
        let col = x.column(j).into_owned();
        let norm = col.norm();
        let mut v = col.clone();
        for _ in 0..2 {
            for q in &basis {
                let proj = q.dot(&v);
                v -= q * proj;
            }
        }
        let rest = v.norm();
        if norm == 0.0 || rest <= 1e-10 * norm {
            if j > 0 {
                bad.push(j - 1);
            }
            continue;
        }
        basis.push(v / rest);
    }
    bad
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn ranks_average_ties() {
        assert_eq!(average_ranks(&[10.0, 20.0, 10.0, 5.0]), vec![2.5, 4.0, 2.5, 1.0]);
    }

    #[test]
    fn spearman_basics() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert_abs_diff_eq!(spearman(&x, &x).unwrap(), 1.0, epsilon = 1e-12);
        let rev: Vec<f64> = x.iter().rev().copied().collect();
        assert_abs_diff_eq!(spearman(&x, &rev).unwrap(), -1.0, epsilon = 1e-12);
        // By hand: d = (0, -1, 1), rho = 1 - 6*2 / (3*8) = 0.5.
        assert_abs_diff_eq!(
            spearman(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap(),
            0.5,
            epsilon = 1e-12
        );
    }

    #[test]
    fn spearman_errors() {
        assert_eq!(
            spearman(&[1.0], &[1.0]),
            Err(StatsError::TooFewObservations { needed: 2, got: 1 })
        );
        assert_eq!(spearman(&[1.0, 2.0], &[1.0]), Err(StatsError::LengthMismatch(2, 1)));
        assert_eq!(spearman(&[1.0, 1.0], &[1.0, 2.0]), Err(StatsError::ZeroVariance));
    }

    #[test]
    fn exact_line() {
        let x: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64]).collect();
        let y: Vec<f64> = (0..10).map(|i| 2.0 * i as f64).collect();
        let fit = ols_fit(&x, &y).unwrap();
        assert_abs_diff_eq!(fit.coefficients[0], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(fit.intercept, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(fit.adj_r_squared, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn constant_response() {
        let x: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64]).collect();
        let fit = ols_fit(&x, &[3.0; 10]).unwrap();
        assert_abs_diff_eq!(fit.coefficients[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(fit.intercept, 3.0, epsilon = 1e-12);
        assert_eq!(fit.r_squared, 0.0);
    }

    #[test]
    fn collinear_columns_are_named() {
        let x: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, 1.0, 3.0 * i as f64]).collect();
        let y: Vec<f64> = (0..10).map(|i| i as f64 * 0.5 + 1.0).collect();
        assert_eq!(ols_fit(&x, &y), Err(StatsError::RankDeficient(vec![1, 2])));
    }

    #[test]
    fn too_few_rows() {
        let x = vec![vec![1.0], vec![2.0]];
        assert!(matches!(
            ols_fit(&x, &[1.0, 2.0]),
            Err(StatsError::TooFewObservations { .. })
        ));
    }

    proptest! {
        #[test]
        fn spearman_ignores_monotone_transforms(
            pts in proptest::collection::vec((-1e3f64..1e3, -1e3f64..1e3), 3..40)
        ) {
            let x: Vec<f64> = pts.iter().map(|p| p.0).collect();
            let y: Vec<f64> = pts.iter().map(|p| p.1).collect();
            let fx: Vec<f64> = x.iter().map(|v| (v / 100.0).exp()).collect();
            let fy: Vec<f64> = y.iter().map(|v| 3.0 * v - 7.0).collect();
            match (spearman(&x, &y), spearman(&fx, &fy)) {
                (Ok(a), Ok(b)) => prop_assert!((a - b).abs() < 1e-9),
                (Err(a), Err(b)) => prop_assert_eq!(a, b),
                other => prop_assert!(false, "{:?}", other),
            }
        }

        #[test]
        fn residuals_are_orthogonal(
            rows in proptest::collection::vec((-10f64..10.0, -10f64..10.0, -10f64..10.0), 8..40)
        ) {
            let x: Vec<Vec<f64>> = rows.iter().map(|r| vec![r.0, r.1]).collect();
            let y: Vec<f64> = rows.iter().map(|r| r.2).collect();
            if let Ok(fit) = ols_fit(&x, &y) {
                let rn: f64 = fit.residuals.iter().map(|r| r * r).sum::<f64>().sqrt();
                let ones: f64 = fit.residuals.iter().sum();
                prop_assert!(ones.abs() < 1e-6 * rn.max(1.0) * (x.len() as f64).sqrt());
                for j in 0..2 {
                    let col: Vec<f64> = x.iter().map(|r| r[j]).collect();
                    let cn: f64 = col.iter().map(|c| c * c).sum::<f64>().sqrt();
                    let dot: f64 = col.iter().zip(&fit.residuals).map(|(c, r)| c * r).sum();
                    prop_assert!(dot.abs() < 1e-6 * cn * rn.max(1.0));
                }
            }
        }
    }
}
