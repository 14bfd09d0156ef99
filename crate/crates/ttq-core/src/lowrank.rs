//! Low-rank factor initialization and residual quantization.
//!
//! The approximation is `What = What_q + B A` where the rank-r factors stay
//! in full precision and only the residual `W - B A` goes through scaled QDQ.

use crate::awq::{awq_quantize, awq_qdq};
use crate::calibration::DiagScale;
use crate::error::{Result, TtqError};
use crate::quantizer::{QuantConfig, QuantizedTensor};
use crate::tensor::{matmul, truncated_svd, DenseMatrix};

/// Rank-r factor pair `B` (d'xr) and `A` (rxd). Rank 0 means an empty pair
/// contributing zero.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankFactors {
    b: Option<DenseMatrix>,
    a: Option<DenseMatrix>,
    rank: usize,
}

impl LowRankFactors {
    pub fn new(b: DenseMatrix, a: DenseMatrix) -> Result<Self> {
        if b.cols() != a.rows() {
            return Err(TtqError::DimensionMismatch(format!(
                "B is {}x{} but A is {}x{}",
                b.rows(),
                b.cols(),
                a.rows(),
                a.cols()
            )));
        }
        let rank = b.cols();
        Ok(Self {
            b: Some(b),
            a: Some(a),
            rank,
        })
    }

    /// Factors that contribute exactly zero.
    pub fn empty() -> Self {
        Self {
            b: None,
            a: None,
            rank: 0,
        }
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn is_empty(&self) -> bool {
        self.rank == 0
    }

    pub fn b(&self) -> Option<&DenseMatrix> {
        self.b.as_ref()
    }

    pub fn a(&self) -> Option<&DenseMatrix> {
        self.a.as_ref()
    }

    /// Materializes the product `B A`, or `None` for empty factors.
    pub fn product(&self) -> Result<Option<DenseMatrix>> {
        match (&self.b, &self.a) {
            (Some(b), Some(a)) => Ok(Some(matmul(b, a)?)),
            _ => Ok(None),
        }
    }

    /// `W - B A`; returns `W` unchanged for empty factors.
    pub fn residual(&self, w: &DenseMatrix) -> Result<DenseMatrix> {
        match self.product()? {
            Some(ba) => w.sub(&ba),
            None => Ok(w.clone()),
        }
    }
}

/// Splits a truncated SVD into balanced factors `B = U s^(1/2)`,
/// `A = s^(-1/2) Vt`. Zero singular values yield zero factor columns.
fn factors_from_svd(
    u: &DenseMatrix,
    singular_values: &[f64],
    vt: &DenseMatrix,
) -> Result<LowRankFactors> {
    let r = singular_values.len();
    let roots: Vec<f64> = singular_values.iter().map(|s| s.sqrt()).collect();
    let b = DenseMatrix::from_fn(u.rows(), r, |i, k| u.get(i, k) * roots[k]);
    let a = DenseMatrix::from_fn(r, vt.cols(), |k, j| {
        if roots[k] > 0.0 {
            vt.get(k, j) / roots[k] * singular_values[k]
        } else {
            0.0
        }
    });
    LowRankFactors::new(b, a)
}

/// Top-r principal components of `W`: `B A` equals the rank-r SVD truncation.
pub fn pca_init(w: &DenseMatrix, r: usize) -> Result<LowRankFactors> {
    if r == 0 {
        return Ok(LowRankFactors::empty());
    }
    let svd = truncated_svd(w, r)?;
    factors_from_svd(&svd.u, &svd.singular_values, &svd.vt)
}

/// Activation-scaled SVD init: factors of `svd_r(W diag(s))` with the right
/// factor divided by `s`, minimizing `|(W - B A) diag(s)|_F` over rank-r
/// products.
pub fn asvd_init(w: &DenseMatrix, s: &DiagScale, r: usize) -> Result<LowRankFactors> {
    if s.len() != w.cols() {
        return Err(TtqError::DimensionMismatch(format!(
            "{} scales for {} columns",
            s.len(),
            w.cols()
        )));
    }
    if r == 0 {
        return Ok(LowRankFactors::empty());
    }
    let scaled = w.scale_columns(s.values())?;
    let factors = pca_init(&scaled, r)?;
    let a_unscaled = factors
        .a()
        .expect("rank > 0")
        .scale_columns(&s.reciprocal())?;
    LowRankFactors::new(factors.b().expect("rank > 0").clone(), a_unscaled)
}

/// Quantizes the residual `W - B A` through scaled QDQ, returning both the
/// packed tensor and the dequantized residual.
pub fn quantize_residual(
    w: &DenseMatrix,
    factors: &LowRankFactors,
    s: &DiagScale,
    config: &QuantConfig,
) -> Result<(QuantizedTensor, DenseMatrix)> {
    let residual = factors.residual(w)?;
    awq_quantize(&residual, s, config)
}

/// Dequantized residual `What_q`; the full approximation is `What_q + B A`.
/// With empty factors this is exactly `awq_qdq(W)`.
pub fn residual_qdq(
    w: &DenseMatrix,
    factors: &LowRankFactors,
    s: &DiagScale,
    config: &QuantConfig,
) -> Result<DenseMatrix> {
    if factors.is_empty() {
        return awq_qdq(w, s, config);
    }
    Ok(quantize_residual(w, factors, s, config)?.1)
}

/// Optional factor compression: quantizes `A` through plain groupwise QDQ
/// with the same config while `B` stays in full precision, so the product
/// `B A` is not itself quantized. `A`'s element count must divide by the
/// groupsize.
pub fn quantize_factor_a(factors: &LowRankFactors, config: &QuantConfig) -> Result<LowRankFactors> {
    match (factors.b(), factors.a()) {
        (Some(b), Some(a)) => {
            let qt = crate::quantizer::quantize_groups(a, config)?;
            let a_hat = crate::quantizer::dequantize_groups(&qt)?;
            LowRankFactors::new(b.clone(), a_hat)
        }
        _ => Ok(LowRankFactors::empty()),
    }
}

/// Alternating quantization-aware refinement: factors from the SVD of
/// `W - What_q`, then requantize `W - B A`, keeping the pair with the lowest
/// total error `|W - (What_q + B A)|_F` among all visited.
pub fn alternate_refine(
    w: &DenseMatrix,
    s: &DiagScale,
    config: &QuantConfig,
    r: usize,
    iterations: usize,
) -> Result<(LowRankFactors, QuantizedTensor)> {
    if iterations == 0 {
        return Err(TtqError::InvalidParameter(
            "alternating refinement needs at least one iteration".into(),
        ));
    }
    let mut factors = pca_init(w, r)?;
    let (mut qt, mut what_q) = quantize_residual(w, &factors, s, config)?;

    let total_error = |factors: &LowRankFactors, what_q: &DenseMatrix| -> Result<f64> {
        let approx = match factors.product()? {
            Some(ba) => what_q.add(&ba)?,
            None => what_q.clone(),
        };
        Ok(w.sub(&approx)?.frobenius_norm())
    };

    let mut best_factors = factors.clone();
    let mut best_qt = qt.clone();
    let mut best_err = total_error(&factors, &what_q)?;

    for _ in 0..iterations {
        if r == 0 {
            break;
        }
        let target = w.sub(&what_q)?;
        factors = pca_init(&target, r)?;
        let (next_qt, next_what_q) = quantize_residual(w, &factors, s, config)?;
        qt = next_qt;
        what_q = next_what_q;
        let err = total_error(&factors, &what_q)?;
        if err < best_err {
            best_err = err;
            best_factors = factors.clone();
            best_qt = qt.clone();
        }
    }
    Ok((best_factors, best_qt))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::{diag_scale, weighted_loss, AwqHyperparams};
    use crate::quantizer::{dequantize_groups, QuantFormat};
    use crate::tensor::{synth_activations, truncated_svd, RandomSpec};
    use approx::assert_relative_eq;

    fn cfg(bits: u8, groupsize: usize) -> QuantConfig {
        QuantConfig::new(bits, groupsize, QuantFormat::Asymmetric).unwrap()
    }

    fn random(seed: u64, rows: usize, cols: usize, sigma: f64) -> DenseMatrix {
        synth_activations(&RandomSpec {
            seed,
            channel_scale_sigma: sigma,
            rows,
            cols,
        })
    }

    #[test]
    fn pca_exact_on_rank_one() {
        let u = vec![1.0, 2.0, -1.0];
        let v = vec![0.5, -0.25];
        let w = DenseMatrix::from_fn(3, 2, |i, j| u[i] * v[j]);
        let f = pca_init(&w, 1).unwrap();
        let ba = f.product().unwrap().unwrap();
        let err = w.sub(&ba).unwrap().frobenius_norm();
        assert!(err <= 1e-8 * w.frobenius_norm());
    }

    #[test]
    fn pca_rank_zero_is_empty() {
        let w = DenseMatrix::identity(3);
        let f = pca_init(&w, 0).unwrap();
        assert!(f.is_empty());
        assert!(f.product().unwrap().is_none());
        assert_eq!(f.residual(&w).unwrap().as_slice(), w.as_slice());
    }

    #[test]
    fn pca_eckart_young() {
        let w = random(7, 16, 12, 0.5);
        let full = truncated_svd(&w, 12).unwrap();
        let f = pca_init(&w, 4).unwrap();
        let resid = w
            .sub(&f.product().unwrap().unwrap())
            .unwrap()
            .frobenius_norm_sq();
        let discarded: f64 = full.singular_values[4..].iter().map(|s| s * s).sum();
        assert_relative_eq!(resid, discarded, max_relative = 1e-6);
    }

    #[test]
    fn pca_balanced_split() {
        // B and A should carry sqrt(sigma) each: their column/row norms match.
        let w = random(13, 8, 8, 0.3);
        let f = pca_init(&w, 3).unwrap();
        let b = f.b().unwrap();
        let a = f.a().unwrap();
        for k in 0..3 {
            let bcol: f64 = (0..8).map(|i| b.get(i, k) * b.get(i, k)).sum::<f64>().sqrt();
            let arow: f64 = (0..8).map(|j| a.get(k, j) * a.get(k, j)).sum::<f64>().sqrt();
            assert_relative_eq!(bcol, arow, max_relative = 1e-8);
        }
    }

    #[test]
    fn asvd_unit_scale_matches_pca() {
        let w = random(21, 8, 6, 0.5);
        let s = DiagScale::uniform(6);
        let pca = pca_init(&w, 2).unwrap();
        let asvd = asvd_init(&w, &s, 2).unwrap();
        let pa = pca.product().unwrap().unwrap();
        let aa = asvd.product().unwrap().unwrap();
        for (x, y) in pa.as_slice().iter().zip(aa.as_slice()) {
            assert_relative_eq!(x, y, max_relative = 1e-9, epsilon = 1e-12);
        }
    }

    #[test]
    fn asvd_full_rank_row() {
        let w = DenseMatrix::new(1, 2, vec![1.0, 1.0]).unwrap();
        let s = DiagScale::new(vec![10.0, 1.0]).unwrap();
        let f = asvd_init(&w, &s, 1).unwrap();
        let ba = f.product().unwrap().unwrap();
        for (x, y) in ba.as_slice().iter().zip(w.as_slice()) {
            assert_relative_eq!(x, y, max_relative = 1e-9);
        }
    }

    #[test]
    fn asvd_never_worse_than_pca_in_weighted_norm() {
        for seed in 0..100u64 {
            let w = random(100 + seed, 8, 8, 0.5);
            let x = random(300 + seed, 8, 16, 1.5);
            let s = diag_scale(&x, &AwqHyperparams::default()).unwrap();
            let pca = pca_init(&w, 2).unwrap();
            let asvd = asvd_init(&w, &s, 2).unwrap();
            let weighted = |f: &LowRankFactors| -> f64 {
                f.residual(&w)
                    .unwrap()
                    .scale_columns(s.values())
                    .unwrap()
                    .frobenius_norm()
            };
            let wp = weighted(&pca);
            let wa = weighted(&asvd);
            assert!(
                wa <= wp * (1.0 + 1e-9) + 1e-12,
                "seed {seed}: asvd {wa} worse than pca {wp}"
            );
        }
    }

    #[test]
    fn residual_qdq_rank_zero_equals_awq() {
        let w = random(31, 8, 8, 0.5);
        let x = random(32, 8, 16, 1.5);
        let s = diag_scale(&x, &AwqHyperparams::default()).unwrap();
        let c = cfg(3, 8);
        let via_residual = residual_qdq(&w, &LowRankFactors::empty(), &s, &c).unwrap();
        let via_awq = awq_qdq(&w, &s, &c).unwrap();
        assert_eq!(via_residual.as_slice(), via_awq.as_slice());
    }

    #[test]
    fn full_rank_factors_quantize_residual_exactly() {
        let w = random(41, 6, 6, 0.5);
        let f = pca_init(&w, 6).unwrap();
        let s = DiagScale::uniform(6);
        let c = cfg(2, 6);
        let (qt, what_q) = quantize_residual(&w, &f, &s, &c).unwrap();
        // The zero residual hits the degenerate fallback, so codes decode to
        // (almost exactly) zero and the total approximation is W itself.
        let max_resid = what_q.as_slice().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max_resid <= 1e-12 * w.frobenius_norm());
        let approx = what_q.add(&f.product().unwrap().unwrap()).unwrap();
        let err = w.sub(&approx).unwrap().frobenius_norm();
        assert!(err <= 1e-8 * w.frobenius_norm(), "err = {err}");
        let deq = dequantize_groups(&qt).unwrap();
        assert_eq!(deq.as_slice(), what_q.as_slice());
    }

    #[test]
    fn alternate_refine_full_rank_exact() {
        let w = random(51, 6, 6, 0.5);
        let s = DiagScale::uniform(6);
        let c = cfg(2, 6);
        let (factors, qt) = alternate_refine(&w, &s, &c, 6, 3).unwrap();
        let what_q = dequantize_groups(&qt).unwrap();
        let approx = what_q.add(&factors.product().unwrap().unwrap()).unwrap();
        let err = w.sub(&approx).unwrap().frobenius_norm();
        assert!(err <= 1e-8 * w.frobenius_norm());
    }

    #[test]
    fn alternate_refine_never_worse_than_first_pass() {
        let s_uniform = DiagScale::uniform(8);
        let c = cfg(2, 8);
        for seed in 0..20u64 {
            let w = random(600 + seed, 8, 8, 0.5);
            let err_of = |iters: usize| -> f64 {
                let (factors, qt) = alternate_refine(&w, &s_uniform, &c, 2, iters).unwrap();
                let what_q = dequantize_groups(&qt).unwrap();
                let approx = what_q.add(&factors.product().unwrap().unwrap()).unwrap();
                w.sub(&approx).unwrap().frobenius_norm()
            };
            let at1 = err_of(1);
            let at5 = err_of(5);
            assert!(at5 <= at1 + 1e-12, "seed {seed}: {at5} > {at1}");
        }
    }

    #[test]
    fn quantize_factor_a_keeps_b_and_approximates() {
        let w = random(61, 8, 8, 0.5);
        let f = pca_init(&w, 2).unwrap();
        let c = cfg(8, 8);
        let fq = quantize_factor_a(&f, &c).unwrap();
        assert_eq!(
            fq.b().unwrap().as_slice(),
            f.b().unwrap().as_slice(),
            "B must stay untouched"
        );
        let a = f.a().unwrap();
        let aq = fq.a().unwrap();
        let diff: f64 = a
            .as_slice()
            .iter()
            .zip(aq.as_slice())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        let norm: f64 = a.as_slice().iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(diff > 0.0, "8-bit codes should not be exact in general");
        assert!(diff <= 1e-2 * norm, "A drifted too far: {diff} vs {norm}");

        assert!(quantize_factor_a(&LowRankFactors::empty(), &c)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn alternate_refine_exact_rank_is_fixed_point() {
        // W of exact rank 2: the initial factors already absorb everything,
        // the residual quantizes to (nearly) zero, and one refinement pass
        // leaves the answer unchanged.
        let b = random(71, 8, 2, 0.3);
        let a = random(72, 2, 8, 0.3);
        let w = crate::tensor::matmul(&b, &a).unwrap();
        let s = DiagScale::uniform(8);
        let c = cfg(2, 8);
        let (factors, qt) = alternate_refine(&w, &s, &c, 2, 1).unwrap();
        let what_q = dequantize_groups(&qt).unwrap();
        let approx = what_q.add(&factors.product().unwrap().unwrap()).unwrap();
        let err = w.sub(&approx).unwrap().frobenius_norm();
        assert!(err <= 1e-8 * w.frobenius_norm(), "err = {err}");
    }

    #[test]
    fn lowrank_helps_at_extreme_bits() {
        // 2-bit quantization with a rank-16 correction must beat rank 0 on
        // most heavy-tailed layers.
        let c = cfg(2, 32);
        let hp = AwqHyperparams::default();
        let mut wins = 0;
        for seed in 0..100u64 {
            let w = random(700 + seed, 64, 64, 0.0)
                .add(&random(900 + seed, 64, 64, 1.0))
                .unwrap();
            let x = random(1100 + seed, 64, 128, 2.0);
            let s = diag_scale(&x, &hp).unwrap();
            let with = {
                let f = pca_init(&w, 16).unwrap();
                let what_q = residual_qdq(&w, &f, &s, &c).unwrap();
                let what = what_q.add(&f.product().unwrap().unwrap()).unwrap();
                weighted_loss(&w, &what, &x, hp.lambda).unwrap()
            };
            let without = {
                let what = residual_qdq(&w, &LowRankFactors::empty(), &s, &c).unwrap();
                weighted_loss(&w, &what, &x, hp.lambda).unwrap()
            };
            if with < without {
                wins += 1;
            }
        }
        assert!(wins >= 90, "rank 16 won only {wins}/100 trials");
    }
}
