//! Offline activation-aware quantization: scaled QDQ, a projected-gradient
//! reference solver, a brute-force integer-code oracle, and hyperparameter
//! grid search.

use rayon::prelude::*;

use crate::calibration::{diag_scale, weighted_loss, AwqHyperparams, CorrelationEstimate, DiagScale};
use crate::error::{Result, TtqError};
use crate::quantizer::{dequantize_groups, quantize_groups, QuantConfig, QuantizedTensor};
use crate::tensor::{matmul, DenseMatrix};

/// Default search grids bracketing the recommended hyperparameter region.
pub const DEFAULT_ALPHA_GRID: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];
pub const DEFAULT_LAMBDA_GRID: [f64; 4] = [0.01, 0.1, 0.4, 0.7];
pub const DEFAULT_P_GRID: [f64; 3] = [1.0, 2.0, 4.0];

/// Scaled quantization: quantizes `W * diag(s)` and returns the codes plus
/// the dequantized matrix with the scaling divided back out.
pub fn awq_quantize(
    w: &DenseMatrix,
    s: &DiagScale,
    config: &QuantConfig,
) -> Result<(QuantizedTensor, DenseMatrix)> {
    if s.len() != w.cols() {
        return Err(TtqError::DimensionMismatch(format!(
            "{} scales for {} columns",
            s.len(),
            w.cols()
        )));
    }
    let scaled = w.scale_columns(s.values())?;
    let qt = quantize_groups(&scaled, config)?;
    let deq = dequantize_groups(&qt)?;
    let what = deq.scale_columns(&s.reciprocal())?;
    Ok((qt, what))
}

/// Scaled QDQ: column `j` of `W` is multiplied by `s_j` before quantization
/// and divided back after dequantization.
pub fn awq_qdq(w: &DenseMatrix, s: &DiagScale, config: &QuantConfig) -> Result<DenseMatrix> {
    Ok(awq_quantize(w, s, config)?.1)
}

/// Offline AWQ: derives the diagonal scale from calibration activations and
/// applies scaled QDQ. The scale is returned so callers can evaluate it on
/// held-out data.
pub fn offline_awq(
    w: &DenseMatrix,
    x_calib: &DenseMatrix,
    hp: &AwqHyperparams,
    config: &QuantConfig,
) -> Result<(DenseMatrix, DiagScale)> {
    let s = diag_scale(x_calib, hp)?;
    let what = awq_qdq(w, &s, config)?;
    Ok((what, s))
}

/// Outcome of the projected-gradient reference solver.
#[derive(Debug, Clone)]
pub struct AwpResult {
    /// Iterate with the lowest correlation-weighted loss seen.
    pub best: DenseMatrix,
    /// Quantized form of the best iterate.
    pub best_quantized: QuantizedTensor,
    pub best_loss: f64,
    /// Last iterate, which is not necessarily the best one.
    pub final_iterate: DenseMatrix,
    pub initial_loss: f64,
}

/// Correlation-weighted loss `tr[(W - What) C (W - What)t]` evaluated
/// without materializing `C^(1/2)`.
pub fn correlation_loss(
    w: &DenseMatrix,
    what: &DenseMatrix,
    c: &CorrelationEstimate,
) -> Result<f64> {
    let matrix = c.matrix().ok_or_else(|| {
        TtqError::InvalidParameter("correlation-weighted loss needs a full estimate".into())
    })?;
    let err = w.sub(what)?;
    let ec = matmul(&err, matrix)?;
    let loss = err
        .as_slice()
        .iter()
        .zip(ec.as_slice())
        .map(|(a, b)| a * b)
        .sum::<f64>();
    Ok(loss.max(0.0))
}

/// Largest eigenvalue of a full correlation estimate by 20 power-iteration
/// steps (deterministic start vector).
pub fn spectral_norm(c: &CorrelationEstimate) -> Result<f64> {
    let matrix = c.matrix().ok_or_else(|| {
        TtqError::InvalidParameter("spectral norm needs a full estimate".into())
    })?;
    let d = matrix.rows();
    let mut v = DenseMatrix::new(d, 1, vec![1.0 / (d as f64).sqrt(); d])?;
    let mut eig = 0.0;
    for _ in 0..20 {
        let mv = matmul(matrix, &v)?;
        let norm = mv.frobenius_norm();
        if norm == 0.0 {
            return Ok(0.0);
        }
        v = mv.scale(1.0 / norm);
        eig = norm;
    }
    Ok(eig)
}

/// Default stepsize `1 / lambda_max(C)`.
pub fn default_stepsize(c: &CorrelationEstimate) -> Result<f64> {
    let eig = spectral_norm(c)?;
    if eig <= f64::MIN_POSITIVE {
        return Ok(1.0);
    }
    Ok(1.0 / eig)
}

const AWP_DIVERGENCE_FACTOR: f64 = 1e6;

/// Projected gradient descent on the correlation-weighted loss:
/// `What_(k+1) = Q[What_k + mu (W - What_k) C]`, starting from plain RTN.
///
/// Projection through QDQ is not monotone, so the best iterate seen is
/// tracked and returned alongside the final one.
pub fn awp_pgd(
    w: &DenseMatrix,
    c: &CorrelationEstimate,
    mu: f64,
    iterations: usize,
    config: &QuantConfig,
) -> Result<AwpResult> {
    if !(mu > 0.0) || !mu.is_finite() {
        return Err(TtqError::InvalidParameter(format!(
            "stepsize must be positive, got {mu}"
        )));
    }
    let matrix = c.matrix().ok_or_else(|| {
        TtqError::InvalidParameter("projected gradient descent needs a full estimate".into())
    })?;
    if matrix.rows() != w.cols() {
        return Err(TtqError::DimensionMismatch(format!(
            "correlation is {}x{} but W has {} columns",
            matrix.rows(),
            matrix.cols(),
            w.cols()
        )));
    }

    let qt0 = quantize_groups(w, config)?;
    let what0 = dequantize_groups(&qt0)?;
    let initial_loss = correlation_loss(w, &what0, c)?;

    let mut best = what0.clone();
    let mut best_qt = qt0;
    let mut best_loss = initial_loss;
    let mut current = what0;

    for _ in 0..iterations {
        let err = w.sub(&current)?;
        let step = matmul(&err, matrix)?.scale(mu);
        let target = current.add(&step)?;
        let qt = quantize_groups(&target, config)?;
        current = dequantize_groups(&qt)?;
        let loss = correlation_loss(w, &current, c)?;
        if loss > AWP_DIVERGENCE_FACTOR * initial_loss && loss > f64::MIN_POSITIVE {
            return Err(TtqError::Diverged {
                loss,
                initial: initial_loss,
                factor: AWP_DIVERGENCE_FACTOR,
            });
        }
        if loss < best_loss {
            best_loss = loss;
            best = current.clone();
            best_qt = qt;
        }
    }

    Ok(AwpResult {
        best,
        best_quantized: best_qt,
        best_loss,
        final_iterate: current,
        initial_loss,
    })
}

const BRUTE_FORCE_BIT_BUDGET: u32 = 16;

/// Exhaustive minimizer of the diagonal objective
/// `sum_i s_i^2 (w_i - (c_i S + Z))^2` over all code tuples.
///
/// Ties resolve to the lexicographically lowest code tuple. The budget
/// `g * q <= 16` caps enumeration at 65536 tuples.
pub fn brute_force_codes(
    w_group: &[f64],
    s_group: &[f64],
    scale: f64,
    zero: f64,
    bits: u8,
) -> Result<Vec<u8>> {
    let g = w_group.len();
    if s_group.len() != g {
        return Err(TtqError::DimensionMismatch(format!(
            "{} scales for {} weights",
            s_group.len(),
            g
        )));
    }
    if let Some(idx) = s_group.iter().position(|v| !(*v > 0.0)) {
        return Err(TtqError::NonPositiveScale {
            index: idx,
            value: s_group[idx],
        });
    }
    let total_bits = g as u32 * u32::from(bits);
    if total_bits > BRUTE_FORCE_BIT_BUDGET {
        return Err(TtqError::BudgetExceeded {
            bits: total_bits,
            budget: BRUTE_FORCE_BIT_BUDGET,
        });
    }
    let levels = 1u64 << bits;
    let combos = levels.pow(g as u32);
    let mut best_codes: Vec<u8> = vec![0; g];
    let mut best_err = f64::MAX;
    let mut codes = vec![0u8; g];
    for combo in 0..combos {
        // Decode with the first element as the most significant digit so the
        // scan order is lexicographic ascending.
        let mut rem = combo;
        for i in (0..g).rev() {
            codes[i] = (rem % levels) as u8;
            rem /= levels;
        }
        let mut err = 0.0;
        for i in 0..g {
            let deq = f64::from(codes[i]) * scale + zero;
            let diff = w_group[i] - deq;
            err += s_group[i] * s_group[i] * diff * diff;
        }
        if err < best_err {
            best_err = err;
            best_codes.copy_from_slice(&codes);
        }
    }
    Ok(best_codes)
}

/// One evaluated grid point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridPoint {
    pub hp: AwqHyperparams,
    pub loss: f64,
}

/// Result of a hyperparameter grid search: the winner and the full table in
/// grid order (alpha outer, lambda middle, p inner).
#[derive(Debug, Clone)]
pub struct GridSearchResult {
    pub best: GridPoint,
    pub table: Vec<GridPoint>,
}

impl GridSearchResult {
    /// Top `k` grid points by ascending loss (stable under the tie rule).
    pub fn top(&self, k: usize) -> Vec<GridPoint> {
        let mut sorted = self.table.clone();
        sorted.sort_by(|a, b| {
            a.loss
                .partial_cmp(&b.loss)
                .unwrap()
                .then(a.hp.alpha.partial_cmp(&b.hp.alpha).unwrap())
                .then(a.hp.lambda.partial_cmp(&b.hp.lambda).unwrap())
                .then(
                    (a.hp.p - 2.0)
                        .abs()
                        .partial_cmp(&(b.hp.p - 2.0).abs())
                        .unwrap(),
                )
        });
        sorted.truncate(k);
        sorted
    }
}

fn better(candidate: &GridPoint, incumbent: &GridPoint) -> bool {
    if candidate.loss != incumbent.loss {
        return candidate.loss < incumbent.loss;
    }
    if candidate.hp.alpha != incumbent.hp.alpha {
        return candidate.hp.alpha < incumbent.hp.alpha;
    }
    if candidate.hp.lambda != incumbent.hp.lambda {
        return candidate.hp.lambda < incumbent.hp.lambda;
    }
    (candidate.hp.p - 2.0).abs() < (incumbent.hp.p - 2.0).abs()
}

/// Evaluates `offline_awq` at every `(alpha, lambda, p)` combination and
/// returns the argmin plus the complete loss table.
///
/// Each point's loss is the weighted loss under that point's own lambda.
/// Points run in parallel; the reduction happens in grid order, so results
/// do not depend on scheduling. Ties break toward smaller alpha, then
/// smaller lambda, then p closest to 2.
pub fn grid_search_hyperparams(
    w: &DenseMatrix,
    x: &DenseMatrix,
    config: &QuantConfig,
    alphas: &[f64],
    lambdas: &[f64],
    ps: &[f64],
) -> Result<GridSearchResult> {
    if alphas.is_empty() || lambdas.is_empty() || ps.is_empty() {
        return Err(TtqError::InvalidParameter(
            "hyperparameter grids must be nonempty".into(),
        ));
    }
    let mut combos = Vec::with_capacity(alphas.len() * lambdas.len() * ps.len());
    for &alpha in alphas {
        for &lambda in lambdas {
            for &p in ps {
                combos.push(AwqHyperparams::new(alpha, lambda, p)?);
            }
        }
    }
    let table: Vec<GridPoint> = combos
        .par_iter()
        .map(|hp| -> Result<GridPoint> {
            let (what, _) = offline_awq(w, x, hp, config)?;
            let loss = weighted_loss(w, &what, x, hp.lambda.min(1.0))?;
            Ok(GridPoint { hp: *hp, loss })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut best = table[0];
    for point in &table[1..] {
        if better(point, &best) {
            best = *point;
        }
    }
    Ok(GridSearchResult { best, table })
}
