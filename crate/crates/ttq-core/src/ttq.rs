//! Online test-time quantization of a linear layer.
//!
//! A [`TtqLayerState`] keeps the full-precision weights (they are never
//! discarded), static low-rank factors, and constant hyperparameters. Each
//! forward call derives a fresh diagonal scale from the incoming activation
//! block, quantizes the weight residual on the fly, and projects. Nothing is
//! accumulated across calls.

use serde_json::json;

use crate::calibration::{diag_scale, weighted_loss, AwqHyperparams, DiagScale};
use crate::error::{Result, TtqError};
use crate::lowrank::{quantize_residual, LowRankFactors};
use crate::quantizer::QuantConfig;
use crate::tensor::{matmul, row_lp_norms, DenseMatrix};

/// Immutable per-layer state for online quantization.
#[derive(Debug, Clone)]
pub struct TtqLayerState {
    weights: DenseMatrix,
    factors: LowRankFactors,
    config: QuantConfig,
    hp: AwqHyperparams,
}

impl TtqLayerState {
    pub fn new(
        weights: DenseMatrix,
        factors: LowRankFactors,
        config: QuantConfig,
        hp: AwqHyperparams,
    ) -> Result<Self> {
        config.validate()?;
        if let Some(b) = factors.b() {
            if b.rows() != weights.rows() {
                return Err(TtqError::DimensionMismatch(format!(
                    "B has {} rows but W has {}",
                    b.rows(),
                    weights.rows()
                )));
            }
        }
        if let Some(a) = factors.a() {
            if a.cols() != weights.cols() {
                return Err(TtqError::DimensionMismatch(format!(
                    "A has {} cols but W has {}",
                    a.cols(),
                    weights.cols()
                )));
            }
        }
        Ok(Self {
            weights,
            factors,
            config,
            hp,
        })
    }

    pub fn weights(&self) -> &DenseMatrix {
        &self.weights
    }

    pub fn factors(&self) -> &LowRankFactors {
        &self.factors
    }

    pub fn config(&self) -> &QuantConfig {
        &self.config
    }

    pub fn hyperparams(&self) -> &AwqHyperparams {
        &self.hp
    }
}

/// Per-call record: the scale that was used, the achieved weighted loss, and
/// a checksum of the packed codes for cheap code-level equality checks.
#[derive(Debug, Clone)]
pub struct TtqReport {
    pub tokens: usize,
    pub scale: DiagScale,
    pub loss: f64,
    pub rho: f64,
    pub codes_checksum: u64,
}

impl TtqReport {
    /// One JSON line: `{layer, T, loss, rho, codes_checksum}`.
    pub fn to_json_line(&self, layer: &str) -> String {
        json!({
            "layer": layer,
            "T": self.tokens,
            "loss": self.loss,
            "rho": self.rho,
            "codes_checksum": self.codes_checksum,
        })
        .to_string()
    }
}

/// FNV-1a 64-bit checksum of the packed code bytes.
pub fn codes_checksum(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// One online-quantized forward pass: `Y = What_q X + B (A X)` with the
/// diagonal scale recomputed from this call's activation block only.
pub fn ttq_forward(state: &TtqLayerState, x: &DenseMatrix) -> Result<(DenseMatrix, TtqReport)> {
    let s = diag_scale(x, &state.hp)?;
    forward_with_scale(state, x, s)
}

/// Running statistics for the opt-in decode-stream mode: lp row norms
/// smoothed by an exponential moving average before the scale is formed.
#[derive(Debug, Clone)]
pub struct EmaNorms {
    decay: f64,
    norms: Option<Vec<f64>>,
}

impl EmaNorms {
    /// Standard decay used for decode streams.
    pub const DEFAULT_DECAY: f64 = 0.9;

    pub fn new(decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&decay) {
            return Err(TtqError::InvalidParameter(format!(
                "EMA decay must lie in [0, 1), got {decay}"
            )));
        }
        Ok(Self { decay, norms: None })
    }

    fn update(&mut self, fresh: &[f64]) -> Vec<f64> {
        match &mut self.norms {
            None => {
                self.norms = Some(fresh.to_vec());
                fresh.to_vec()
            }
            Some(prev) => {
                for (p, &f) in prev.iter_mut().zip(fresh) {
                    *p = self.decay * *p + (1.0 - self.decay) * f;
                }
                prev.clone()
            }
        }
    }
}

/// Forward pass with EMA-smoothed norms; the first call matches
/// [`ttq_forward`] exactly. Disabled by default -- callers opt in by
/// holding an [`EmaNorms`].
pub fn ttq_forward_ema(
    state: &TtqLayerState,
    ema: &mut EmaNorms,
    x: &DenseMatrix,
) -> Result<(DenseMatrix, TtqReport)> {
    let fresh = row_lp_norms(x, state.hp.p)?;
    let smoothed = ema.update(&fresh);
    let values: Vec<f64> = smoothed
        .iter()
        .map(|n| (n + state.hp.lambda).powf(state.hp.alpha))
        .collect();
    let s = DiagScale::new(values)?;
    forward_with_scale(state, x, s)
}

fn forward_with_scale(
    state: &TtqLayerState,
    x: &DenseMatrix,
    s: DiagScale,
) -> Result<(DenseMatrix, TtqReport)> {
    if x.rows() != state.weights.cols() {
        return Err(TtqError::DimensionMismatch(format!(
            "activations have {} channels but W has {} columns",
            x.rows(),
            state.weights.cols()
        )));
    }
    let (qt, what_q) = quantize_residual(&state.weights, &state.factors, &s, &state.config)?;
    let mut y = matmul(&what_q, x)?;
    let what = match state.factors.product()? {
        Some(ba) => {
            let ax = matmul(state.factors.a().expect("rank > 0"), x)?;
            let bax = matmul(state.factors.b().expect("rank > 0"), &ax)?;
            y = y.add(&bax)?;
            what_q.add(&ba)?
        }
        None => what_q,
    };
    let loss = weighted_loss(&state.weights, &what, x, state.hp.lambda.min(1.0))?;
    let report = TtqReport {
        tokens: x.cols(),
        rho: overhead_fraction(
            state.weights.cols() as u64,
            state.weights.rows() as u64,
            x.cols() as u64,
        ),
        loss,
        codes_checksum: codes_checksum(&qt.codes),
        scale: s,
    };
    Ok((y, report))
}

/// Threshold above which the online-overhead formula reports its asymptote.
pub const OVERHEAD_ASYMPTOTE_TOKENS: u64 = 1_000_000_000;

/// Fraction of online-quantization work over the unquantized projection:
/// `rho = (d T + 3 d' d) / (d' d T) = 1/d' + 3/T`. For `T >= 1e9` the
/// asymptote `1/d'` is reported.
pub fn overhead_fraction(d: u64, d_prime: u64, tokens: u64) -> f64 {
    debug_assert!(d > 0 && d_prime > 0 && tokens > 0);
    if tokens >= OVERHEAD_ASYMPTOTE_TOKENS {
        return 1.0 / d_prime as f64;
    }
    let d = d as f64;
    let dp = d_prime as f64;
    let t = tokens as f64;
    (d * t + 3.0 * dp * d) / (dp * d * t)
}

/// Relative extra complexity of the low-rank projection: `r/d + r/d'`.
pub fn lowrank_overhead(d: u64, d_prime: u64, r: u64) -> f64 {
    debug_assert!(d > 0 && d_prime > 0);
    r as f64 / d as f64 + r as f64 / d_prime as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lowrank::pca_init;
    use crate::quantizer::{quantize_groups, rtn_qdq, QuantFormat};
    use crate::tensor::{synth_activations, RandomSpec};
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

    /// X whose rows are sign patterns of a one-hot unit vector, so every row
    /// lp-norm is exactly 1 and the derived scale is exactly uniform.
    fn unit_norm_acts(d: usize, t: usize) -> DenseMatrix {
        DenseMatrix::from_fn(d, t, |i, j| {
            if j == i % t {
                if i % 2 == 0 {
                    1.0
                } else {
                    -1.0
                }
            } else {
                0.0
            }
        })
    }

    #[test]
    fn uniform_norms_match_rtn_bit_exact() {
        let w = random(1, 8, 8, 0.5);
        let x = unit_norm_acts(8, 4);
        let hp = AwqHyperparams::new(0.5, 0.0, 2.0).unwrap();
        let c = cfg(3, 8);
        let state = TtqLayerState::new(w.clone(), LowRankFactors::empty(), c, hp).unwrap();
        let (y, report) = ttq_forward(&state, &x).unwrap();
        assert!(report.scale.values().iter().all(|&v| v == 1.0));

        let rtn = rtn_qdq(&w, &c).unwrap();
        let expect = matmul(&rtn, &x).unwrap();
        assert_eq!(y.as_slice(), expect.as_slice());

        let rtn_qt = quantize_groups(&w, &c).unwrap();
        assert_eq!(report.codes_checksum, codes_checksum(&rtn_qt.codes));
    }

    #[test]
    fn single_token_column_consistency() {
        let w = random(2, 6, 6, 0.5);
        let x = random(3, 6, 4, 1.0);
        let hp = AwqHyperparams::default();
        let c = cfg(3, 6);
        let state = TtqLayerState::new(w, LowRankFactors::empty(), c, hp).unwrap();
        let (y, report) = ttq_forward(&state, &x).unwrap();

        // Columns of the batched product equal What * x_col for the batch's
        // quantization; and a T = 1 call goes through the same path.
        let what = {
            let s = report.scale.clone();
            crate::lowrank::residual_qdq(state.weights(), state.factors(), &s, state.config())
                .unwrap()
        };
        for t in 0..4 {
            let col = DenseMatrix::from_fn(6, 1, |i, _| x.get(i, t));
            let y_col = matmul(&what, &col).unwrap();
            for i in 0..6 {
                assert_relative_eq!(y.get(i, t), y_col.get(i, 0), max_relative = 1e-12, epsilon = 1e-12);
            }
        }

        let single = DenseMatrix::from_fn(6, 1, |i, _| x.get(i, 0));
        let (y1, r1) = ttq_forward(&state, &single).unwrap();
        assert_eq!(y1.rows(), 6);
        assert_eq!(y1.cols(), 1);
        assert_eq!(r1.tokens, 1);
    }

    #[test]
    fn stateless_across_prompts() {
        let w = random(5, 8, 8, 0.5);
        let c = cfg(3, 8);
        let state =
            TtqLayerState::new(w.clone(), LowRankFactors::empty(), c, AwqHyperparams::default())
                .unwrap();
        let x1 = random(6, 8, 16, 2.0);
        let x2 = random(7, 8, 16, 2.0);
        let (_, _) = ttq_forward(&state, &x1).unwrap();
        let (y2_after, r2_after) = ttq_forward(&state, &x2).unwrap();
        let fresh =
            TtqLayerState::new(w.clone(), LowRankFactors::empty(), c, AwqHyperparams::default())
                .unwrap();
        let (y2_fresh, r2_fresh) = ttq_forward(&fresh, &x2).unwrap();
        assert_eq!(y2_after.as_slice(), y2_fresh.as_slice());
        assert_eq!(r2_after.codes_checksum, r2_fresh.codes_checksum);
        // Weights retained bit-identically.
        assert_eq!(state.weights().as_slice(), w.as_slice());
    }

    #[test]
    fn ttq_beats_rtn_on_heavy_tails() {
        use crate::calibration::activation_loss;
        let c = cfg(3, 32);
        let mut wins = 0;
        for seed in 0..100u64 {
            let w = random(4000 + seed, 64, 64, 0.0);
            let x = random(5000 + seed, 64, 256, 2.0);
            let state =
                TtqLayerState::new(w.clone(), LowRankFactors::empty(), c, AwqHyperparams::default())
                    .unwrap();
            let (_, report) = ttq_forward(&state, &x).unwrap();
            let what = crate::lowrank::residual_qdq(&w, &LowRankFactors::empty(), &report.scale, &c)
                .unwrap();
            let ttq_loss = activation_loss(&w, &what, &x).unwrap();
            let rtn = rtn_qdq(&w, &c).unwrap();
            let rtn_loss = activation_loss(&w, &rtn, &x).unwrap();
            if ttq_loss < 0.9 * rtn_loss {
                wins += 1;
            }
        }
        assert!(wins >= 90, "TTQ beat RTN by 10% in only {wins}/100 trials");
    }

    #[test]
    fn zero_row_without_damping_is_an_error() {
        let w = random(8, 4, 4, 0.5);
        let c = cfg(3, 4);
        let hp = AwqHyperparams::new(0.5, 0.0, 2.0).unwrap();
        let state = TtqLayerState::new(w, LowRankFactors::empty(), c, hp).unwrap();
        // Channel 2 never fires; with lambda = 0 its scale would be zero.
        let x = DenseMatrix::from_fn(4, 3, |i, j| if i == 2 { 0.0 } else { (i + j) as f64 + 1.0 });
        assert!(ttq_forward(&state, &x).is_err());
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let w = random(8, 4, 4, 0.5);
        let c = cfg(3, 4);
        let state =
            TtqLayerState::new(w, LowRankFactors::empty(), c, AwqHyperparams::default()).unwrap();
        let x = random(9, 6, 3, 0.5);
        assert!(ttq_forward(&state, &x).is_err());
    }

    #[test]
    fn ema_first_call_matches_default_path() {
        let w = random(9, 8, 8, 0.5);
        let c = cfg(3, 8);
        let state =
            TtqLayerState::new(w, LowRankFactors::empty(), c, AwqHyperparams::default()).unwrap();
        let x = random(10, 8, 16, 1.0);
        let mut ema = EmaNorms::new(EmaNorms::DEFAULT_DECAY).unwrap();
        let (y_ema, r_ema) = ttq_forward_ema(&state, &mut ema, &x).unwrap();
        let (y, r) = ttq_forward(&state, &x).unwrap();
        assert_eq!(y_ema.as_slice(), y.as_slice());
        assert_eq!(r_ema.codes_checksum, r.codes_checksum);

        // Later calls blend norms, so the scale shifts toward history.
        let x2 = random(11, 8, 16, 2.0);
        let (_, r2_ema) = ttq_forward_ema(&state, &mut ema, &x2).unwrap();
        let (_, r2) = ttq_forward(&state, &x2).unwrap();
        assert_ne!(r2_ema.scale.values(), r2.scale.values());
    }

    #[test]
    fn forward_with_lowrank_factors() {
        let w = random(12, 8, 8, 0.5);
        let factors = pca_init(&w, 2).unwrap();
        let c = cfg(2, 8);
        let state =
            TtqLayerState::new(w.clone(), factors.clone(), c, AwqHyperparams::default()).unwrap();
        let x = random(13, 8, 8, 1.0);
        let (y, report) = ttq_forward(&state, &x).unwrap();
        // Y must equal (What_q + BA) X.
        let what_q =
            crate::lowrank::residual_qdq(&w, &factors, &report.scale, &c).unwrap();
        let what = what_q.add(&factors.product().unwrap().unwrap()).unwrap();
        let expect = matmul(&what, &x).unwrap();
        for (a, b) in y.as_slice().iter().zip(expect.as_slice()) {
            assert_relative_eq!(a, b, max_relative = 1e-10, epsilon = 1e-10);
        }
    }

    #[test]
    fn report_json_shape() {
        let w = random(14, 4, 4, 0.5);
        let c = cfg(3, 4);
        let state =
            TtqLayerState::new(w, LowRankFactors::empty(), c, AwqHyperparams::default()).unwrap();
        let x = random(15, 4, 2, 1.0);
        let (_, report) = ttq_forward(&state, &x).unwrap();
        let line = report.to_json_line("fc1");
        let parsed: serde_json::Value = serde_json::from_str(&line).unwrap();
        assert_eq!(parsed["layer"], "fc1");
        assert_eq!(parsed["T"], 2);
        assert!(parsed["loss"].is_f64());
        assert!(parsed["rho"].is_f64());
        assert!(parsed["codes_checksum"].is_u64());
    }

    #[test]
    fn overhead_formula_values() {
        assert_eq!(overhead_fraction(1024, 1024, 1024), 0.00390625);
        assert_eq!(overhead_fraction(64, 1, 3), 2.0);
        assert_eq!(
            overhead_fraction(128, 512, OVERHEAD_ASYMPTOTE_TOKENS),
            1.0 / 512.0
        );
        // T = 1 decode worst case: 1/d' + 3.
        assert_relative_eq!(
            overhead_fraction(256, 64, 1),
            1.0 / 64.0 + 3.0,
            max_relative = 1e-12
        );
    }

    #[test]
    fn overhead_strictly_decreasing() {
        let mut prev = f64::MAX;
        for t in [1u64, 2, 8, 64, 1024, 65536] {
            let rho = overhead_fraction(512, 512, t);
            assert!(rho < prev);
            prev = rho;
        }
        let mut prev = f64::MAX;
        for dp in [1u64, 4, 16, 256, 4096] {
            let rho = overhead_fraction(512, dp, 512);
            assert!(rho < prev);
            prev = rho;
        }
    }

    #[test]
    fn lowrank_overhead_values() {
        assert_eq!(lowrank_overhead(1024, 1024, 16), 0.03125);
        assert_eq!(lowrank_overhead(64, 32, 0), 0.0);
        assert_eq!(lowrank_overhead(64, 64, 64), 2.0);
    }

    #[test]
    fn checksum_is_stable_and_input_sensitive() {
        let a = codes_checksum(&[1, 2, 3]);
        let b = codes_checksum(&[1, 2, 3]);
        let c = codes_checksum(&[1, 2, 4]);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
