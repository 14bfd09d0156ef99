//! Dense row-major matrices, norms, truncated SVD, and synthetic data.
//!
//! Everything here is pure and operates on immutable inputs; all accumulation
//! happens in `f64` so results are reproducible across platforms.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Result, TtqError};

/// Row-major real matrix. Construction rejects NaN/Inf entries.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    /// Builds a matrix from row-major data, validating shape and finiteness.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(TtqError::InvalidShape(format!(
                "rows and cols must be positive, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(TtqError::InvalidShape(format!(
                "data length {} != {rows}x{cols}",
                data.len()
            )));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(TtqError::NonFinite { index });
        }
        Ok(Self { rows, cols, data })
    }

    /// Zero matrix of the given shape.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Identity matrix of order `n`.
    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix by evaluating `f(row, col)`.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.cols + col] = value;
    }

    /// Row-major backing slice.
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> DenseMatrix {
        DenseMatrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    /// Elementwise difference; shapes must match.
    pub fn sub(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(TtqError::DimensionMismatch(format!(
                "{}x{} - {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn add(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(TtqError::DimensionMismatch(format!(
                "{}x{} + {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    /// Multiplies every entry by `factor`.
    pub fn scale(&self, factor: f64) -> DenseMatrix {
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    /// Multiplies column `j` by `factors[j]`.
    pub fn scale_columns(&self, factors: &[f64]) -> Result<DenseMatrix> {
        if factors.len() != self.cols {
            return Err(TtqError::DimensionMismatch(format!(
                "{} column factors for a {}x{} matrix",
                factors.len(),
                self.rows,
                self.cols
            )));
        }
        let mut data = Vec::with_capacity(self.data.len());
        for i in 0..self.rows {
            for j in 0..self.cols {
                data.push(self.data[i * self.cols + j] * factors[j]);
            }
        }
        Ok(DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Squared Frobenius norm.
    pub fn frobenius_norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>()
    }
}

/// Deterministic spec for synthetic channel-scaled Gaussian data.
///
/// The same spec always produces the bit-identical matrix: the stream is a
/// ChaCha12 generator keyed by `seed`, standard normals come from the
/// `rand_distr` ziggurat, and the draw order is fixed (one scale per channel
/// first, then entries row-major).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RandomSpec {
    pub seed: u64,
    /// Lognormal std of per-channel (per-row) scales; 0 gives unit scales.
    pub channel_scale_sigma: f64,
    pub rows: usize,
    pub cols: usize,
}

/// Standard matrix product with `f64` accumulation.
pub fn matmul(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.cols != b.rows {
        return Err(TtqError::DimensionMismatch(format!(
            "{}x{} * {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = vec![0.0f64; a.rows * b.cols];
    for i in 0..a.rows {
        let a_row = &a.data[i * a.cols..(i + 1) * a.cols];
        let out_row = &mut out[i * b.cols..(i + 1) * b.cols];
        for (k, &aik) in a_row.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let b_row = &b.data[k * b.cols..(k + 1) * b.cols];
            for (o, &bkj) in out_row.iter_mut().zip(b_row) {
                *o += aik * bkj;
            }
        }
    }
    Ok(DenseMatrix {
        rows: a.rows,
        cols: b.cols,
        data: out,
    })
}

/// Per-row lp-norms: entry `i` is `(sum_t |X[i,t]|^p)^(1/p)`.
pub fn row_lp_norms(x: &DenseMatrix, p: f64) -> Result<Vec<f64>> {
    if !(p > 0.0) || !p.is_finite() {
        return Err(TtqError::InvalidParameter(format!(
            "lp-norm order must be a positive real, got {p}"
        )));
    }
    let mut norms = Vec::with_capacity(x.rows);
    for i in 0..x.rows {
        let row = x.row(i);
        let sum: f64 = if p == 2.0 {
            row.iter().map(|v| v * v).sum()
        } else if p == 1.0 {
            row.iter().map(|v| v.abs()).sum()
        } else {
            row.iter().map(|v| v.abs().powf(p)).sum()
        };
        let norm = if p == 2.0 { sum.sqrt() } else { sum.powf(1.0 / p) };
        norms.push(norm);
    }
    Ok(norms)
}

/// Rank-`r` truncated SVD: `u` is d'xr, `singular_values` descending, `vt` is rxd.
#[derive(Debug, Clone)]
pub struct TruncatedSvd {
    pub u: DenseMatrix,
    pub singular_values: Vec<f64>,
    pub vt: DenseMatrix,
}

impl TruncatedSvd {
    /// Reconstructs `U diag(s) Vt`.
    pub fn reconstruct(&self) -> Result<DenseMatrix> {
        let r = self.singular_values.len();
        let scaled = DenseMatrix::from_fn(r, self.vt.cols(), |i, j| {
            self.singular_values[i] * self.vt.get(i, j)
        });
        matmul(&self.u, &scaled)
    }
}

const SVD_TOL: f64 = 1e-12;

/// Rank-`r` truncated SVD via one-sided Jacobi rotations.
///
/// Converges when the largest normalized column correlation drops below
/// 1e-12; gives up with an error after `100 * min(rows, cols)` sweeps.
pub fn truncated_svd(w: &DenseMatrix, r: usize) -> Result<TruncatedSvd> {
    let min_dim = w.rows.min(w.cols);
    if r == 0 || r > min_dim {
        return Err(TtqError::RankOutOfRange {
            rank: r,
            rows: w.rows,
            cols: w.cols,
        });
    }
    if w.rows >= w.cols {
        let (u_cols, sigma, v_cols) = jacobi_svd_tall(w)?;
        Ok(assemble_truncated(w.rows, w.cols, u_cols, sigma, v_cols, r))
    } else {
        // Wide matrix: factor the transpose and swap the roles of U and V.
        let wt = w.transpose();
        let (u_cols, sigma, v_cols) = jacobi_svd_tall(&wt)?;
        Ok(assemble_truncated(w.rows, w.cols, v_cols, sigma, u_cols, r))
    }
}

/// One-sided Jacobi on a tall (rows >= cols) matrix. Returns the column sets
/// of U (rows-length each), the singular values, and the columns of V
/// (cols-length each), unsorted.
fn jacobi_svd_tall(w: &DenseMatrix) -> Result<(Vec<Vec<f64>>, Vec<f64>, Vec<Vec<f64>>)> {
    let m = w.rows;
    let n = w.cols;
    let mut a: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| w.get(i, j)).collect()).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    let max_sweeps = 100 * m.min(n);
    let mut off = 0.0f64;
    let mut converged = n < 2;
    for _ in 0..max_sweeps {
        if converged {
            break;
        }
        off = 0.0;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let (alpha, beta, gamma) = column_moments(&a[p], &a[q]);
                if alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                let corr = gamma.abs() / (alpha * beta).sqrt();
                off = off.max(corr);
                if corr <= SVD_TOL {
                    continue;
                }
                // Classic Jacobi rotation zeroing the (p, q) inner product.
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_pair(&mut a, p, q, c, s);
                rotate_pair(&mut v, p, q, c, s);
            }
        }
        converged = off <= SVD_TOL;
    }
    if !converged {
        return Err(TtqError::SvdNoConvergence {
            sweeps: max_sweeps,
            off,
        });
    }

    let mut sigma = Vec::with_capacity(n);
    let mut u_cols = Vec::with_capacity(n);
    for col in &a {
        let norm = col.iter().map(|x| x * x).sum::<f64>().sqrt();
        sigma.push(norm);
        if norm > 0.0 {
            u_cols.push(col.iter().map(|x| x / norm).collect());
        } else {
            u_cols.push(vec![0.0; m]);
        }
    }
    Ok((u_cols, sigma, v))
}

fn column_moments(p: &[f64], q: &[f64]) -> (f64, f64, f64) {
    let mut alpha = 0.0;
    let mut beta = 0.0;
    let mut gamma = 0.0;
    for (&x, &y) in p.iter().zip(q) {
        alpha += x * x;
        beta += y * y;
        gamma += x * y;
    }
    (alpha, beta, gamma)
}

fn rotate_pair(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (head, tail) = cols.split_at_mut(q);
    let cp = &mut head[p];
    let cq = &mut tail[0];
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let xp = c * *x - s * *y;
        let yq = s * *x + c * *y;
        *x = xp;
        *y = yq;
    }
}

fn assemble_truncated(
    rows: usize,
    cols: usize,
    u_cols: Vec<Vec<f64>>,
    sigma: Vec<f64>,
    v_cols: Vec<Vec<f64>>,
    r: usize,
) -> TruncatedSvd {
    let mut order: Vec<usize> = (0..sigma.len()).collect();
    order.sort_by(|&i, &j| sigma[j].partial_cmp(&sigma[i]).unwrap());
    let top = &order[..r];

    let u = DenseMatrix::from_fn(rows, r, |i, k| u_cols[top[k]][i]);
    let vt = DenseMatrix::from_fn(r, cols, |k, j| v_cols[top[k]][j]);
    let singular_values = top.iter().map(|&k| sigma[k]).collect();
    TruncatedSvd {
        u,
        singular_values,
        vt,
    }
}

/// Synthetic activations: row `i` is i.i.d. standard normal scaled by
/// `c_i = exp(sigma * z_i)` with `z_i` standard normal.
pub fn synth_activations(spec: &RandomSpec) -> DenseMatrix {
    let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);
    let normal = StandardNormal;
    let scales: Vec<f64> = (0..spec.rows)
        .map(|_| {
            let z: f64 = normal.sample(&mut rng);
            (spec.channel_scale_sigma * z).exp()
        })
        .collect();
    let mut data = Vec::with_capacity(spec.rows * spec.cols);
    for &c in scales.iter() {
        for _ in 0..spec.cols {
            let g: f64 = normal.sample(&mut rng);
            data.push(c * g);
        }
    }
    DenseMatrix {
        rows: spec.rows,
        cols: spec.cols,
        data,
    }
}
