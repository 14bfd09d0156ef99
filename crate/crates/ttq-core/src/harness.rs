//! Seeded self-test checks: code-level oracles, format roundtrips, and the
//! statistical trend checks run by both `selftest` and the acceptance suite.
//!
//! Every check is deterministic under its seed. Monte-Carlo trials fan out
//! over rayon but collect in seed order, so results never depend on
//! scheduling.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;

use crate::awq::{awp_pgd, awq_quantize, brute_force_codes, grid_search_hyperparams, offline_awq};
use crate::calibration::{activation_loss, diag_scale, AwqHyperparams, DiagScale};
use crate::io::{
    read_container_from, read_tensor_from, write_container_to, write_tensor_to, ContainerPayload,
    Dtype, QuantContainer, QuantMethod,
};
use crate::lowrank::{pca_init, residual_qdq, LowRankFactors};
use crate::quantizer::{
    dequantize_groups, quantize_groups, rtn_qdq, QuantConfig, QuantFormat, QuantizedTensor,
};
use crate::tensor::{synth_activations, truncated_svd, DenseMatrix, RandomSpec};
use crate::Result;

/// Repo-fixed default seed for CI-stable randomized checks.
pub const DEFAULT_SEED: u64 = 42;

/// Outcome of one named check.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &'static str, passed: bool, detail: String) -> Self {
        Self {
            name,
            passed,
            detail,
        }
    }
}

fn gaussian(seed: u64, rows: usize, cols: usize) -> DenseMatrix {
    synth_activations(&RandomSpec {
        seed,
        channel_scale_sigma: 0.0,
        rows,
        cols,
    })
}

fn channel_scaled(seed: u64, rows: usize, cols: usize, sigma: f64) -> DenseMatrix {
    synth_activations(&RandomSpec {
        seed,
        channel_scale_sigma: sigma,
        rows,
        cols,
    })
}

/// Weights with both an i.i.d. part and heavy-tailed output channels, the
/// shape the low-rank correction is meant to absorb.
fn structured_weights(seed: u64, rows: usize, cols: usize) -> DenseMatrix {
    gaussian(seed, rows, cols)
        .add(&channel_scaled(seed ^ 0x9e37_79b9, rows, cols, 1.0))
        .expect("same shape")
}

fn asym(bits: u8, groupsize: usize) -> QuantConfig {
    QuantConfig::new(bits, groupsize, QuantFormat::Asymmetric).expect("valid config")
}

/// Criterion 1: scaled-QDQ rounding matches the exhaustive minimizer on
/// 1000 random groups (g = 4, q = 2, random positive per-element scales).
pub fn check_oracle_optimality(seed: u64) -> Result<CheckResult> {
    let start = Instant::now();
    let config = asym(2, 4);
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x0001);
    let mut mismatches = 0usize;
    for _ in 0..1000 {
        let w: Vec<f64> = (0..4).map(|_| rng.random_range(-1.5..1.5)).collect();
        let s: Vec<f64> = (0..4)
            .map(|_| {
                let z: f64 = rng.random_range(-1.0..1.0);
                z.exp()
            })
            .collect();
        let row = DenseMatrix::new(1, 4, w)?;
        let scale_vec = DiagScale::new(s.clone())?;
        let (qt, _) = awq_quantize(&row, &scale_vec, &config)?;
        let scaled = row.scale_columns(scale_vec.values())?;
        let (grid_s, grid_z) = crate::quantizer::compute_scale_zero(scaled.as_slice(), &config)?;
        let brute = brute_force_codes(scaled.as_slice(), &s, grid_s, grid_z, config.bits)?;
        if qt.unpacked_codes()? != brute {
            mismatches += 1;
        }
    }
    let in_budget = start.elapsed().as_secs_f64() < 10.0;
    let passed = mismatches == 0 && in_budget;
    // Reports must be identical across runs of the same seed, so the detail
    // carries only the budget verdict, not the wall-clock time.
    Ok(CheckResult::new(
        "oracle_optimality",
        passed,
        format!(
            "{mismatches}/1000 mismatches, 10s budget {}",
            if in_budget { "met" } else { "exceeded" }
        ),
    ))
}

/// Criterion 2: quantize-dequantize-quantize reproduces codes exactly and
/// scales within 1e-9 for 500 matrices across all formats and bit-widths.
pub fn check_qdq_idempotence(seed: u64) -> Result<CheckResult> {
    let formats = [
        QuantFormat::Asymmetric,
        QuantFormat::Symmetric,
        QuantFormat::AltIntegerZero,
    ];
    let bits = [2u8, 3, 4, 5, 8];
    let failures: usize = (0..500u64)
        .into_par_iter()
        .map(|trial| {
            let w = channel_scaled(seed.wrapping_add(trial), 8, 16, 1.0);
            let mut bad = 0usize;
            for format in formats {
                for q in bits {
                    let config = QuantConfig::new(q, 16, format).expect("valid");
                    let q1 = quantize_groups(&w, &config).expect("quantize");
                    let d1 = dequantize_groups(&q1).expect("dequantize");
                    let q2 = quantize_groups(&d1, &config).expect("requantize");
                    let codes_ok = q1.codes == q2.codes;
                    let scales_ok = q1
                        .scales
                        .iter()
                        .zip(&q2.scales)
                        .all(|(a, b)| (f64::from(*a) - f64::from(*b)).abs() <= 1e-9);
                    if !codes_ok || !scales_ok {
                        bad += 1;
                    }
                }
            }
            bad
        })
        .sum();
    Ok(CheckResult::new(
        "qdq_idempotence",
        failures == 0,
        format!("{failures} failures over 500 matrices x 3 formats x 5 bit-widths"),
    ))
}

const LAYER_DIM: usize = 64;
const LAYER_TOKENS: usize = 256;
const HEAVY_SIGMA: f64 = 2.0;

fn ttq_what(w: &DenseMatrix, x: &DenseMatrix, r: usize, config: &QuantConfig) -> Result<DenseMatrix> {
    let hp = AwqHyperparams::default();
    let s = diag_scale(x, &hp)?;
    let factors = if r == 0 {
        LowRankFactors::empty()
    } else {
        pca_init(w, r)?
    };
    let what_q = residual_qdq(w, &factors, &s, config)?;
    match factors.product()? {
        Some(ba) => what_q.add(&ba),
        None => Ok(what_q),
    }
}

/// Criterion 3: online quantization beats plain RTN by >10% on nearly all
/// heavy-tailed layers.
pub fn check_activation_aware_benefit(seed: u64) -> Result<CheckResult> {
    let start = Instant::now();
    let config = asym(3, 32);
    let results: Vec<(f64, f64)> = (0..100u64)
        .into_par_iter()
        .map(|t| {
            let w = gaussian(seed.wrapping_add(10_000 + t), LAYER_DIM, LAYER_DIM);
            let x = channel_scaled(
                seed.wrapping_add(20_000 + t),
                LAYER_DIM,
                LAYER_TOKENS,
                HEAVY_SIGMA,
            );
            let what = ttq_what(&w, &x, 0, &config).expect("ttq");
            let ttq_loss = activation_loss(&w, &what, &x).expect("loss");
            let rtn = rtn_qdq(&w, &config).expect("rtn");
            let rtn_loss = activation_loss(&w, &rtn, &x).expect("loss");
            (ttq_loss, rtn_loss)
        })
        .collect();
    let wins = results.iter().filter(|(t, r)| *t < 0.9 * r).count();
    let mean_ttq: f64 = results.iter().map(|(t, _)| t).sum::<f64>() / 100.0;
    let mean_rtn: f64 = results.iter().map(|(_, r)| r).sum::<f64>() / 100.0;
    let in_budget = start.elapsed().as_secs_f64() < 30.0;
    let passed = wins >= 90 && mean_ttq < mean_rtn && in_budget;
    Ok(CheckResult::new(
        "activation_aware_benefit",
        passed,
        format!(
            "ratio<0.9 in {wins}/100 trials, mean ttq {mean_ttq:.3e} vs rtn {mean_rtn:.3e}, 30s budget {}",
            if in_budget { "met" } else { "exceeded" }
        ),
    ))
}

/// Criterion 4: mean online-quantization loss increases strictly with the
/// groupsize over {8, 16, 32, 64} (rank correlation +1 over the 4 points).
pub fn check_groupsize_trend(seed: u64) -> Result<CheckResult> {
    let groupsizes = [8usize, 16, 32, 64];
    let mut means = Vec::with_capacity(groupsizes.len());
    for &g in &groupsizes {
        let config = asym(3, g);
        let total: f64 = (0..50u64)
            .into_par_iter()
            .map(|t| {
                let w = gaussian(seed.wrapping_add(30_000 + t), LAYER_DIM, LAYER_DIM);
                let x = channel_scaled(
                    seed.wrapping_add(40_000 + t),
                    LAYER_DIM,
                    LAYER_TOKENS,
                    HEAVY_SIGMA,
                );
                let what = ttq_what(&w, &x, 0, &config).expect("ttq");
                activation_loss(&w, &what, &x).expect("loss")
            })
            .sum();
        means.push(total / 50.0);
    }
    let monotone = means.windows(2).all(|pair| pair[0] < pair[1]);
    Ok(CheckResult::new(
        "groupsize_trend",
        monotone,
        format!(
            "mean loss by groupsize {{8,16,32,64}}: {:?}",
            means.iter().map(|m| format!("{m:.3e}")).collect::<Vec<_>>()
        ),
    ))
}

/// Criterion 5: at 2 bits, a rank-16 correction lowers the loss versus rank
/// 0 on at least 90 of 100 heavy-tailed layers.
pub fn check_lowrank_benefit(seed: u64) -> Result<CheckResult> {
    let config = asym(2, 32);
    let wins: usize = (0..100u64)
        .into_par_iter()
        .map(|t| {
            let w = structured_weights(seed.wrapping_add(50_000 + t), LAYER_DIM, LAYER_DIM);
            let x = channel_scaled(
                seed.wrapping_add(60_000 + t),
                LAYER_DIM,
                LAYER_TOKENS,
                HEAVY_SIGMA,
            );
            let with_rank = ttq_what(&w, &x, 16, &config).expect("ttq r=16");
            let rank_loss = activation_loss(&w, &with_rank, &x).expect("loss");
            let flat = ttq_what(&w, &x, 0, &config).expect("ttq r=0");
            let flat_loss = activation_loss(&w, &flat, &x).expect("loss");
            usize::from(rank_loss < flat_loss)
        })
        .sum();
    Ok(CheckResult::new(
        "lowrank_benefit_2bit",
        wins >= 90,
        format!("rank 16 beat rank 0 in {wins}/100 trials"),
    ))
}

/// Criterion 6: offline calibration on one activation distribution loses to
/// online quantization when evaluated on an independent distribution.
pub fn check_domain_shift(seed: u64) -> Result<CheckResult> {
    let config = asym(3, 32);
    let hp = AwqHyperparams::default();
    let wins: usize = (0..100u64)
        .into_par_iter()
        .map(|t| {
            let w = gaussian(seed.wrapping_add(70_000 + t), LAYER_DIM, LAYER_DIM);
            let x_calib = channel_scaled(
                seed.wrapping_add(80_000 + t),
                LAYER_DIM,
                LAYER_TOKENS,
                HEAVY_SIGMA,
            );
            let x_eval = channel_scaled(
                seed.wrapping_add(90_000 + t),
                LAYER_DIM,
                LAYER_TOKENS,
                HEAVY_SIGMA,
            );
            let (what_awq, _) = offline_awq(&w, &x_calib, &hp, &config).expect("awq");
            let awq_loss = activation_loss(&w, &what_awq, &x_eval).expect("loss");
            let what_ttq = ttq_what(&w, &x_eval, 0, &config).expect("ttq");
            let ttq_loss = activation_loss(&w, &what_ttq, &x_eval).expect("loss");
            usize::from(awq_loss > ttq_loss)
        })
        .sum();
    Ok(CheckResult::new(
        "domain_shift",
        wins >= 90,
        format!("shifted offline calibration lost in {wins}/100 trials"),
    ))
}

/// Criterion 7: per seed and per method, one more bit never hurts.
pub fn check_monotone_precision(seed: u64) -> Result<CheckResult> {
    let bit_ladder = [2u8, 3, 4, 5];
    let violations: usize = (0..100u64)
        .into_par_iter()
        .map(|t| {
            let w = gaussian(seed.wrapping_add(100_000 + t), LAYER_DIM, LAYER_DIM);
            let x = channel_scaled(seed.wrapping_add(110_000 + t), LAYER_DIM, 128, HEAVY_SIGMA);
            let hp = AwqHyperparams::default();
            let mut bad = 0usize;
            let mut prev = [f64::MAX; 3];
            for q in bit_ladder {
                let config = asym(q, 32);
                let rtn_loss = {
                    let what = rtn_qdq(&w, &config).expect("rtn");
                    activation_loss(&w, &what, &x).expect("loss")
                };
                let awq_loss = {
                    let (what, _) = offline_awq(&w, &x, &hp, &config).expect("awq");
                    activation_loss(&w, &what, &x).expect("loss")
                };
                let ttq_loss = {
                    let what = ttq_what(&w, &x, 0, &config).expect("ttq");
                    activation_loss(&w, &what, &x).expect("loss")
                };
                for (slot, loss) in prev.iter_mut().zip([rtn_loss, awq_loss, ttq_loss]) {
                    if loss > *slot {
                        bad += 1;
                    }
                    *slot = loss;
                }
            }
            bad
        })
        .sum();
    Ok(CheckResult::new(
        "monotone_precision",
        violations == 0,
        format!("{violations} per-seed violations across rtn/awq/ttq, q in {{2,3,4,5}}"),
    ))
}

/// Criterion 8: principal-component residual energy equals the discarded
/// singular-value energy within 1e-6 relative on 100 random 16x12 matrices.
pub fn check_eckart_young(seed: u64) -> Result<CheckResult> {
    let mut worst: f64 = 0.0;
    for t in 0..100u64 {
        let w = channel_scaled(seed.wrapping_add(120_000 + t), 16, 12, 0.5);
        let r = 4;
        let factors = pca_init(&w, r)?;
        let resid = w
            .sub(&factors.product()?.expect("rank 4"))?
            .frobenius_norm_sq();
        let full = truncated_svd(&w, 12)?;
        let discarded: f64 = full.singular_values[r..].iter().map(|s| s * s).sum();
        let rel = (resid - discarded).abs() / discarded.max(f64::MIN_POSITIVE);
        worst = worst.max(rel);
    }
    Ok(CheckResult::new(
        "eckart_young",
        worst <= 1e-6,
        format!("worst relative energy gap {worst:.3e} (tolerance 1e-6)"),
    ))
}

/// Criterion 9: the analytic cost model reproduces its reference values
/// exactly.
pub fn check_overhead_formulas() -> Result<CheckResult> {
    let rho = crate::ttq::overhead_fraction(1024, 1024, 1024);
    let lr = crate::ttq::lowrank_overhead(1024, 1024, 16);
    let passed = rho == 0.00390625 && lr == 0.03125;
    Ok(CheckResult::new(
        "overhead_formulas",
        passed,
        format!("rho(1024,1024,1024) = {rho}, lowrank(1024,1024,16) = {lr}"),
    ))
}

fn random_container(rng: &mut ChaCha12Rng, seed: u64) -> Result<(QuantContainer, QuantizedTensor)> {
    let shapes = [(4usize, 8usize), (8, 8), (8, 16), (16, 8)];
    let (rows, cols) = shapes[rng.random_range(0..shapes.len())];
    let bits = [2u8, 3, 4, 5, 8][rng.random_range(0..5)];
    let format = [
        QuantFormat::Asymmetric,
        QuantFormat::Symmetric,
        QuantFormat::AltIntegerZero,
    ][rng.random_range(0..3)];
    let groupsize = [4usize, 8][rng.random_range(0..2)];
    let config = QuantConfig::new(bits, groupsize, format)?;
    let w = channel_scaled(seed, rows, cols, 0.8);
    let qt = quantize_groups(&w, &config)?;
    let factors = if rng.random_bool(0.5) {
        pca_init(&w, 2)?
    } else {
        LowRankFactors::empty()
    };
    let diag = if rng.random_bool(0.5) {
        Some(DiagScale::new(
            (0..cols).map(|j| 0.5 + j as f64 / 4.0).collect(),
        )?)
    } else {
        None
    };
    let method = if rng.random_bool(0.5) {
        QuantMethod::Rtn
    } else {
        QuantMethod::Awq
    };
    Ok((
        QuantContainer {
            method,
            config,
            hp: AwqHyperparams::default(),
            rows,
            cols,
            payload: ContainerPayload::Quantized(qt.clone()),
            diag_scale: diag,
            factors,
        },
        qt,
    ))
}

/// Criterion 10: tensors and containers roundtrip bit-exactly and a flipped
/// byte in a container is always caught by the checksum, over 200 cases.
pub fn check_format_roundtrips(seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x00FF);
    let mut failures = Vec::new();
    for case in 0..200u64 {
        // Tensor roundtrip at f64.
        let t = channel_scaled(seed.wrapping_add(130_000 + case), 4, 6, 1.0);
        let mut tbuf = Vec::new();
        write_tensor_to(&mut tbuf, &t, Dtype::F64)?;
        let t_back = read_tensor_from(&mut std::io::Cursor::new(&tbuf))?;
        if t_back.as_slice() != t.as_slice() {
            failures.push(format!("tensor payload mismatch (case {case})"));
            continue;
        }

        let (container, qt) = random_container(&mut rng, seed.wrapping_add(140_000 + case))?;
        let mut buf = Vec::new();
        write_container_to(&mut buf, &container)?;
        let back = read_container_from(&mut std::io::Cursor::new(&buf))?;
        let payload_ok = match &back.payload {
            ContainerPayload::Quantized(q2) => {
                q2.codes == qt.codes && q2.scales == qt.scales && q2.zeros == qt.zeros
            }
            _ => false,
        };
        let mut rebuf = Vec::new();
        write_container_to(&mut rebuf, &back)?;
        if !payload_ok || rebuf != buf {
            failures.push(format!("container roundtrip mismatch (case {case})"));
            continue;
        }

        let pos = rng.random_range(0..buf.len());
        let mut corrupted = buf.clone();
        corrupted[pos] ^= 1 << rng.random_range(0..8);
        if read_container_from(&mut std::io::Cursor::new(&corrupted)).is_ok() {
            failures.push(format!("flipped byte at {pos} undetected (case {case})"));
        }
    }
    let passed = failures.is_empty();
    let detail = if passed {
        "200/200 roundtrips bit-exact, all corruptions detected".to_string()
    } else {
        format!("{} failures, first: {}", failures.len(), failures[0])
    };
    Ok(CheckResult::new("format_roundtrips", passed, detail))
}

/// Criterion 11: with the grid p in {1, 2} (alpha 0.5, lambda 0.4) the
/// l2-norm wins at least 70 of 100 seeded searches.
pub fn check_hyperparameter_trend(seed: u64) -> Result<CheckResult> {
    let config = asym(3, 32);
    let p2_wins: usize = (0..100u64)
        .into_par_iter()
        .map(|t| {
            let w = gaussian(seed.wrapping_add(150_000 + t), LAYER_DIM, LAYER_DIM);
            let x = channel_scaled(
                seed.wrapping_add(160_000 + t),
                LAYER_DIM,
                LAYER_TOKENS,
                HEAVY_SIGMA,
            );
            let result =
                grid_search_hyperparams(&w, &x, &config, &[0.5], &[0.4], &[1.0, 2.0])
                    .expect("grid search");
            usize::from(result.best.hp.p == 2.0)
        })
        .sum();
    Ok(CheckResult::new(
        "hyperparameter_trend",
        p2_wins >= 70,
        format!("p=2 won {p2_wins}/100 grid searches against p=1"),
    ))
}

/// Criterion 12: the four degeneracy identities hold bit-exactly.
pub fn check_degeneracy_equalities(seed: u64) -> Result<CheckResult> {
    let mut problems = Vec::new();

    // alpha = 0 makes offline AWQ identical to RTN.
    {
        let w = channel_scaled(seed.wrapping_add(170_000), 16, 16, 0.5);
        let x = channel_scaled(seed.wrapping_add(170_001), 16, 64, HEAVY_SIGMA);
        let config = asym(3, 16);
        let hp = AwqHyperparams::new(0.0, 0.4, 2.0)?;
        let s = diag_scale(&x, &hp)?;
        let (qt, _) = awq_quantize(&w, &s, &config)?;
        let rtn_qt = quantize_groups(&w, &config)?;
        if qt.codes != rtn_qt.codes {
            problems.push("alpha=0 AWQ codes differ from RTN");
        }
    }

    // Uniform row norms make online quantization identical to RTN.
    {
        let w = channel_scaled(seed.wrapping_add(170_002), 8, 8, 0.5);
        let x = DenseMatrix::from_fn(8, 4, |i, j| {
            if j == i % 4 {
                if i % 2 == 0 {
                    1.0
                } else {
                    -1.0
                }
            } else {
                0.0
            }
        });
        let config = asym(3, 8);
        let hp = AwqHyperparams::new(0.5, 0.0, 2.0)?;
        let s = diag_scale(&x, &hp)?;
        if !s.values().iter().all(|&v| v == 1.0) {
            problems.push("unit-norm rows did not give an exactly uniform scale");
        }
        let (qt, _) = awq_quantize(&w, &s, &config)?;
        let rtn_qt = quantize_groups(&w, &config)?;
        if qt.codes != rtn_qt.codes {
            problems.push("uniform-norm TTQ codes differ from RTN");
        }
    }

    // Rank 0 residual quantization is exactly scaled QDQ.
    {
        let w = channel_scaled(seed.wrapping_add(170_003), 8, 8, 0.5);
        let x = channel_scaled(seed.wrapping_add(170_004), 8, 32, HEAVY_SIGMA);
        let config = asym(3, 8);
        let s = diag_scale(&x, &AwqHyperparams::default())?;
        let a = residual_qdq(&w, &LowRankFactors::empty(), &s, &config)?;
        let b = crate::awq::awq_qdq(&w, &s, &config)?;
        if a.as_slice() != b.as_slice() {
            problems.push("rank-0 residual QDQ differs from scaled QDQ");
        }
    }

    // Zero iterations of projected gradient descent is exactly RTN.
    {
        let w = channel_scaled(seed.wrapping_add(170_005), 8, 8, 0.5);
        let x = channel_scaled(seed.wrapping_add(170_006), 8, 32, 1.0);
        let config = asym(2, 8);
        let corr = crate::calibration::shrunk_correlation(&x, 0.4)?;
        let result = awp_pgd(&w, &corr, 0.1, 0, &config)?;
        let rtn_qt = quantize_groups(&w, &config)?;
        if result.best_quantized.codes != rtn_qt.codes {
            problems.push("K=0 projected gradient descent codes differ from RTN");
        }
        if result.best.as_slice() != rtn_qdq(&w, &config)?.as_slice() {
            problems.push("K=0 projected gradient descent output differs from RTN");
        }
    }

    let passed = problems.is_empty();
    let detail = if passed {
        "alpha=0, uniform norms, rank 0, K=0 all bit-exact".to_string()
    } else {
        problems.join("; ")
    };
    Ok(CheckResult::new("degeneracy_equalities", passed, detail))
}

/// Runs every check with the given base seed, in criterion order.
pub fn run_all_checks(seed: u64) -> Result<Vec<CheckResult>> {
    Ok(vec![
        check_oracle_optimality(seed)?,
        check_qdq_idempotence(seed)?,
        check_activation_aware_benefit(seed)?,
        check_groupsize_trend(seed)?,
        check_lowrank_benefit(seed)?,
        check_domain_shift(seed)?,
        check_monotone_precision(seed)?,
        check_eckart_young(seed)?,
        check_overhead_formulas()?,
        check_format_roundtrips(seed)?,
        check_hyperparameter_trend(seed)?,
        check_degeneracy_equalities(seed)?,
    ])
}
