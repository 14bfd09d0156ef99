//! Activation statistics: shrunk correlation, diagonal scales, and the
//! activation-aware quantization losses.

use crate::error::{Result, TtqError};
use crate::tensor::{matmul, row_lp_norms, DenseMatrix};

/// Full or diagonal estimate of the input autocorrelation `E[X Xt]`.
#[derive(Debug, Clone)]
pub struct CorrelationEstimate {
    kind: CorrelationKind,
    lambda: f64,
    /// Energy per channel, `|X|_F^2 / d`.
    eta: f64,
}

#[derive(Debug, Clone)]
enum CorrelationKind {
    Full(DenseMatrix),
    Diagonal(Vec<f64>),
}

impl CorrelationEstimate {
    /// Wraps a full (dense, symmetric PSD) correlation matrix.
    pub fn full(matrix: DenseMatrix, lambda: f64, eta: f64) -> Result<Self> {
        if matrix.rows() != matrix.cols() {
            return Err(TtqError::InvalidShape(format!(
                "correlation must be square, got {}x{}",
                matrix.rows(),
                matrix.cols()
            )));
        }
        let scale = matrix
            .as_slice()
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()))
            .max(1.0);
        for i in 0..matrix.rows() {
            for j in (i + 1)..matrix.cols() {
                if (matrix.get(i, j) - matrix.get(j, i)).abs() > 1e-8 * scale {
                    return Err(TtqError::InvalidParameter(format!(
                        "correlation not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        Ok(Self {
            kind: CorrelationKind::Full(matrix),
            lambda,
            eta,
        })
    }

    /// Wraps a diagonal correlation.
    pub fn diagonal(diag: Vec<f64>, lambda: f64, eta: f64) -> Result<Self> {
        if lambda > 0.0 {
            if let Some(idx) = diag.iter().position(|v| !(*v > 0.0)) {
                return Err(TtqError::NonPositiveScale {
                    index: idx,
                    value: diag[idx],
                });
            }
        }
        Ok(Self {
            kind: CorrelationKind::Diagonal(diag),
            lambda,
            eta,
        })
    }

    pub fn is_full(&self) -> bool {
        matches!(self.kind, CorrelationKind::Full(_))
    }

    pub fn matrix(&self) -> Option<&DenseMatrix> {
        match &self.kind {
            CorrelationKind::Full(m) => Some(m),
            CorrelationKind::Diagonal(_) => None,
        }
    }

    pub fn diag(&self) -> Option<&[f64]> {
        match &self.kind {
            CorrelationKind::Diagonal(d) => Some(d),
            CorrelationKind::Full(_) => None,
        }
    }

    pub fn dim(&self) -> usize {
        match &self.kind {
            CorrelationKind::Full(m) => m.rows(),
            CorrelationKind::Diagonal(d) => d.len(),
        }
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    /// Damping factor `lambda' = lambda * eta / (1 - lambda)`; `None` at
    /// full shrinkage.
    pub fn damping(&self) -> Option<f64> {
        if self.lambda < 1.0 {
            Some(self.lambda * self.eta / (1.0 - self.lambda))
        } else {
            None
        }
    }
}

/// AWQ/TTQ hyperparameters: norm exponent, damping, and lp order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AwqHyperparams {
    pub alpha: f64,
    pub lambda: f64,
    pub p: f64,
}

impl Default for AwqHyperparams {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            lambda: 0.4,
            p: 2.0,
        }
    }
}

impl AwqHyperparams {
    pub fn new(alpha: f64, lambda: f64, p: f64) -> Result<Self> {
        if !(alpha >= 0.0) || !alpha.is_finite() {
            return Err(TtqError::InvalidParameter(format!(
                "alpha must be a nonnegative real, got {alpha}"
            )));
        }
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(TtqError::InvalidParameter(format!(
                "lambda must be a nonnegative real, got {lambda}"
            )));
        }
        if !(p > 0.0) || !p.is_finite() {
            return Err(TtqError::InvalidParameter(format!(
                "p must be a positive real, got {p}"
            )));
        }
        Ok(Self { alpha, lambda, p })
    }
}

/// Per-input-channel scaling vector (the diagonal `D` applied to columns
/// of `W`). Entries are strictly positive.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagScale(Vec<f64>);

impl DiagScale {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(idx) = values.iter().position(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(TtqError::NonPositiveScale {
                index: idx,
                value: values[idx],
            });
        }
        Ok(Self(values))
    }

    pub fn uniform(len: usize) -> Self {
        Self(vec![1.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    /// Elementwise reciprocal, for scaling back after QDQ.
    pub fn reciprocal(&self) -> Vec<f64> {
        self.0.iter().map(|v| 1.0 / v).collect()
    }
}

/// Shrunk correlation estimate `(1 - lambda) X Xt + lambda eta I` with
/// `eta = |X|_F^2 / d`.
pub fn shrunk_correlation(x: &DenseMatrix, lambda: f64) -> Result<CorrelationEstimate> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(TtqError::InvalidParameter(format!(
            "shrinkage must lie in [0, 1], got {lambda}"
        )));
    }
    let d = x.rows();
    let eta = x.frobenius_norm_sq() / d as f64;
    let gram = matmul(x, &x.transpose())?;
    let c = DenseMatrix::from_fn(d, d, |i, j| {
        let base = (1.0 - lambda) * gram.get(i, j);
        if i == j {
            base + lambda * eta
        } else {
            base
        }
    });
    CorrelationEstimate::full(c, lambda, eta)
}

/// Diagonal scale `s_i = (|X_i|_p + lambda)^alpha`.
pub fn diag_scale(x: &DenseMatrix, hp: &AwqHyperparams) -> Result<DiagScale> {
    let norms = row_lp_norms(x, hp.p)?;
    let values: Vec<f64> = norms
        .iter()
        .map(|n| (n + hp.lambda).powf(hp.alpha))
        .collect();
    if let Some(idx) = values.iter().position(|v| !(*v > 0.0) || !v.is_finite()) {
        // Happens only for a zero row with lambda = 0 (and alpha > 0).
        return Err(TtqError::NonPositiveScale {
            index: idx,
            value: values[idx],
        });
    }
    DiagScale::new(values)
}

/// Activation-aware loss `|(W - What) X|_F^2`.
pub fn activation_loss(w: &DenseMatrix, what: &DenseMatrix, x: &DenseMatrix) -> Result<f64> {
    if w.rows() != what.rows() || w.cols() != what.cols() {
        return Err(TtqError::DimensionMismatch(format!(
            "W is {}x{}, What is {}x{}",
            w.rows(),
            w.cols(),
            what.rows(),
            what.cols()
        )));
    }
    let err = w.sub(what)?;
    let proj = matmul(&err, x)?;
    Ok(proj.frobenius_norm_sq())
}

/// Weighted loss `(1 - lambda) |(W - What) X|^2 + lambda eta |W - What|^2`.
pub fn weighted_loss(
    w: &DenseMatrix,
    what: &DenseMatrix,
    x: &DenseMatrix,
    lambda: f64,
) -> Result<f64> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(TtqError::InvalidParameter(format!(
            "shrinkage must lie in [0, 1], got {lambda}"
        )));
    }
    let err = w.sub(what)?;
    let eta = x.frobenius_norm_sq() / x.rows() as f64;
    let act = matmul(&err, x)?.frobenius_norm_sq();
    Ok((1.0 - lambda) * act + lambda * eta * err.frobenius_norm_sq())
}
