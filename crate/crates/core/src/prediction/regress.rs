use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Affine least-squares map from features to one raw trait value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearRegressor {
    pub w: Vec<f64>,
    pub b: f64,
}

/// Relative ridge added to the normal equations so rank-deficient
/// features still yield the minimum-norm-like solution.
const JITTER: f64 = 1e-10;

impl LinearRegressor {
    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.w.len() {
            return Err(Error::dim("regressor", format!("input of width {} for {} weights", x.len(), self.w.len())));
        }
        Ok(self.b + self.w.iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
    }
}

/// Minimizes the mean squared error over rows with a target. The bias is
/// solved exactly by centering.
pub fn train_regressor(features: &Tensor, targets: &[Option<f64>]) -> Result<LinearRegressor> {
    let (n, d) = features.as_rows();
    if targets.len() != n {
        return Err(Error::dim("train_regressor", format!("{} targets for {n} rows", targets.len())));
    }
    let rows: Vec<(usize, f64)> = targets.iter().enumerate().filter_map(|(i, t)| t.map(|v| (i, v))).collect();
    if rows.is_empty() {
        return Err(Error::Label("no targets to regress".into()));
    }
    let m = rows.len() as f64;
    let y_mean = rows.iter().map(|r| r.1).sum::<f64>() / m;
    let mut x_mean = vec![0.0; d];
    for &(i, _) in &rows {
        x_mean.iter_mut().zip(features.row(i)).for_each(|(a, v)| *a += v / m);
    }
    let mut gram = vec![0.0; d * d];
    let mut rhs = vec![0.0; d];
    for &(i, y) in &rows {
        let xc: Vec<f64> = features.row(i).iter().zip(&x_mean).map(|(v, mu)| v - mu).collect();
        for a in 0..d {
            rhs[a] += xc[a] * (y - y_mean);
            for b in 0..d {
                gram[a * d + b] += xc[a] * xc[b];
            }
        }
    }
    let scale = (0..d).map(|a| gram[a * d + a]).sum::<f64>() / d.max(1) as f64;
    let ridge = JITTER * scale.max(1e-300);
    (0..d).for_each(|a| gram[a * d + a] += ridge);
    let w = if scale > 0.0 { cholesky_solve(&mut gram, &rhs, d)? } else { vec![0.0; d] };
    let b = y_mean - w.iter().zip(&x_mean).map(|(w, m)| w * m).sum::<f64>();
    Ok(LinearRegressor { w, b })
}

fn cholesky_solve(a: &mut [f64], rhs: &[f64], d: usize) -> Result<Vec<f64>> {
    for j in 0..d {
        let mut diag = a[j * d + j];
        for k in 0..j {
            diag -= a[j * d + k] * a[j * d + k];
        }
        if !(diag > 0.0) {
            return Err(Error::Degenerate("normal equations are not positive definite".into()));
        }
        let diag = diag.sqrt();
        a[j * d + j] = diag;
        for i in j + 1..d {
            let mut v = a[i * d + j];
            for k in 0..j {
                v -= a[i * d + k] * a[j * d + k];
            }
            a[i * d + j] = v / diag;
        }
    }
    let mut z = rhs.to_vec();
    for i in 0..d {
        for k in 0..i {
            z[i] -= a[i * d + k] * z[k];
        }
        z[i] /= a[i * d + i];
    }
    for i in (0..d).rev() {
        for k in i + 1..d {
            z[i] -= a[k * d + i] * z[k];
        }
        z[i] /= a[i * d + i];
    }
    Ok(z)
}

pub fn rmse(pred: &[f64], truth: &[f64]) -> f64 {
    let n = pred.len().max(1) as f64;
    (pred.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / n).sqrt()
}
