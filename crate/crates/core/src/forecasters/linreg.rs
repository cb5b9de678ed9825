use serde::{Deserialize, Serialize};

use super::{encode_inputs, ModelConfig, ModelWeights, TrainedForecaster, FUSED_DIM};
use crate::autodiff::{gemm, Tensor};
use crate::dataset::{fit_normalization, WindowedExample};
use crate::error::{Error, Result};

/// Ridge damping added to the normal equations (intercept excluded).
pub const RIDGE_LAMBDA: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OlsFit {
    pub coefficients: Vec<f64>,
    pub intercept: f64,
}

impl OlsFit {
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.intercept
            + self
                .coefficients
                .iter()
                .zip(x)
                .map(|(b, x)| b * x)
                .sum::<f64>()
    }
}

/// In-place Cholesky factorization and solve of a symmetric positive
/// definite `n×n` system.
fn cholesky_solve(a: &mut [f64], n: usize, b: &mut [f64]) -> Result<()> {
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if !(d > 0.0) {
            return Err(Error::NonFinite {
                context: format!("normal equations lost positive definiteness at pivot {j}"),
            });
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / d;
        }
    }
    solve_factored(a, n, b);
    Ok(())
}

/// Forward and back substitution with a lower Cholesky factor.
fn solve_factored(l: &[f64], n: usize, b: &mut [f64]) {
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in i + 1..n {
            s -= l[k * n + i] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
}

/// Least squares with intercept via damped normal equations on an `n×p`
/// design.
pub fn fit_ols(x: &Tensor, y: &[f64]) -> Result<OlsFit> {
    let (n, p) = (x.rows(), x.cols());
    if n == 0 {
        return Err(Error::EmptyInput("regression design"));
    }
    if y.len() != n {
        return Err(Error::Shape {
            op: "fit_ols",
            expected: format!("{n} targets"),
            got: y.len().to_string(),
        });
    }
    let q = p + 1;
    let mut design = Vec::with_capacity(n * q);
    for r in 0..n {
        design.extend_from_slice(x.row(r));
        design.push(1.0);
    }
    let mut gram = vec![0.0; q * q];
    // Aᵀ·A with Aᵀ read through swapped strides.
    gemm(
        q,
        n,
        q,
        &design,
        (1, q as isize),
        &design,
        (q as isize, 1),
        0.0,
        &mut gram,
    );
    for j in 0..p {
        gram[j * q + j] += RIDGE_LAMBDA;
    }
    let mut rhs = vec![0.0; q];
    for r in 0..n {
        for (acc, a) in rhs.iter_mut().zip(&design[r * q..(r + 1) * q]) {
            *acc += a * y[r];
        }
    }
    let mut factor = gram.clone();
    let mut beta = rhs.clone();
    cholesky_solve(&mut factor, q, &mut beta)?;
    // One refinement step against the undamped system removes the damping
    // bias on well-determined directions; null directions stay at zero.
    let mut residual = rhs;
    for i in 0..q {
        let undamped: f64 = (0..q).map(|j| gram[i * q + j] * beta[j]).sum::<f64>()
            - if i < p { RIDGE_LAMBDA * beta[i] } else { 0.0 };
        residual[i] -= undamped;
    }
    solve_factored(&factor, q, &mut residual);
    for (b, r) in beta.iter_mut().zip(&residual) {
        *b += r;
    }
    let mut rhs = beta;
    let intercept = rhs.pop().expect("q ≥ 1");
    Ok(OlsFit {
        coefficients: rhs,
        intercept,
    })
}

/// One modality's columns of an encoded window, flattened row by row.
pub(super) fn flatten(encoded: &[f64], start: usize, len: usize) -> Vec<f64> {
    encoded
        .chunks(FUSED_DIM)
        .flat_map(|row| row[start..start + len].iter().copied())
        .collect()
}

/// Least squares from the flattened normalized window to the normalized
/// outcome.
pub fn train_linreg(config: &ModelConfig, train: &[WindowedExample]) -> Result<TrainedForecaster> {
    config.validate()?;
    if !config.architecture.is_linreg() {
        return Err(Error::Config(format!(
            "{} is not a linear model",
            config.architecture
        )));
    }
    if train.is_empty() {
        return Err(Error::EmptyInput("training set"));
    }
    let stats = fit_normalization(train)?;
    let (start, len) = config.architecture.modality().columns();
    let p = config.window * len;
    let mut values = Vec::with_capacity(train.len() * p);
    let mut y = Vec::with_capacity(train.len());
    for e in train {
        super::check_example(config, e)?;
        values.extend(flatten(&encode_inputs(e, &stats)?, start, len));
        y.push(stats.normalize_target(config.outcome, e.target(config.outcome)?)?);
    }
    let fit = fit_ols(&Tensor::matrix(train.len(), p, values)?, &y)?;
    Ok(TrainedForecaster {
        config: config.clone(),
        normalization: Some(stats),
        weights: ModelWeights::Linear { fit },
        training_log: Vec::new(),
    })
}
