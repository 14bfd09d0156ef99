//! Groupwise quantization-dequantization (QDQ) and bit-exact code packing.
//!
//! Weights are flattened row-major and chunked into consecutive groups of
//! `g` elements. Each group gets an affine integer grid `w ~ code * S + Z`
//! whose parameters depend on the format:
//!
//! * `Asymmetric` — `S = (W'max - W'min) / (2^q - 1)`, `Z = W'min`, where the
//!   primed extrema widen or narrow the raw min/max range by the expansion
//!   factor `nu` (`nu = 1` keeps them unchanged).
//! * `Symmetric` — `S = 2 |W|max / (2^q - 1)`, `Z = -|W|max`. `Z` and `S` are
//!   redundant here; the stored zero-point is authoritative and the working
//!   scale is derived as `-2 Z / (2^q - 1)` so that requantizing a
//!   dequantized tensor reproduces the exact same grid.
//! * `AltIntegerZero` — `code = clamp(round(w / S) + Z', 0, 2^q - 1)` with an
//!   integer zero-point `Z' = -round(Wmin / S)`; dequantization is
//!   `(code - Z') * S`.
//!
//! Scales and zero-points are computed in `f64` and then snapped to `f32`,
//! which is the metadata precision of the serialized container; codes are
//! chosen against the snapped grid so the in-memory and on-disk paths see
//! identical values. Rounding is half-away-from-zero everywhere.

use crate::error::{Result, TtqError};
use crate::tensor::DenseMatrix;

/// Scale/zero-point format of a quantized group.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantFormat {
    Asymmetric,
    Symmetric,
    AltIntegerZero,
}

impl QuantFormat {
    pub fn code(self) -> u8 {
        match self {
            QuantFormat::Asymmetric => 0,
            QuantFormat::Symmetric => 1,
            QuantFormat::AltIntegerZero => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(QuantFormat::Asymmetric),
            1 => Ok(QuantFormat::Symmetric),
            2 => Ok(QuantFormat::AltIntegerZero),
            other => Err(TtqError::Format(format!("unknown format code {other}"))),
        }
    }
}

/// Bits, groupsize, format, and expansion factor of a quantization run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantConfig {
    pub bits: u8,
    pub groupsize: usize,
    pub format: QuantFormat,
    /// Expansion factor applied to the asymmetric range; the other formats
    /// ignore it.
    pub nu: f64,
}

impl QuantConfig {
    pub fn new(bits: u8, groupsize: usize, format: QuantFormat) -> Result<Self> {
        let config = Self {
            bits,
            groupsize,
            format,
            nu: 1.0,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn with_nu(mut self, nu: f64) -> Result<Self> {
        self.nu = nu;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=8).contains(&self.bits) {
            return Err(TtqError::InvalidParameter(format!(
                "bits must be in 1..=8, got {}",
                self.bits
            )));
        }
        if self.groupsize == 0 {
            return Err(TtqError::InvalidParameter(
                "groupsize must be positive".into(),
            ));
        }
        if !(self.nu > 0.0 && self.nu <= 2.0) {
            return Err(TtqError::InvalidParameter(format!(
                "expansion factor must be in (0, 2], got {}",
                self.nu
            )));
        }
        Ok(())
    }

    /// Largest representable code, `2^q - 1`.
    pub fn max_code(&self) -> u32 {
        (1u32 << self.bits) - 1
    }
}

/// Per-group zero-points: real for asymmetric/symmetric, integer for the
/// alternative representation.
#[derive(Debug, Clone, PartialEq)]
pub enum GroupZeros {
    Real(Vec<f32>),
    Integer(Vec<i32>),
}

impl GroupZeros {
    pub fn len(&self) -> usize {
        match self {
            GroupZeros::Real(v) => v.len(),
            GroupZeros::Integer(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Packed groupwise codes plus per-group scale and zero-point metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub rows: usize,
    pub cols: usize,
    pub config: QuantConfig,
    /// Codes packed least-significant-bit first, contiguous across bytes.
    pub codes: Vec<u8>,
    pub scales: Vec<f32>,
    pub zeros: GroupZeros,
}

impl QuantizedTensor {
    /// Validates the structural invariants of an externally assembled tensor.
    pub fn from_parts(
        rows: usize,
        cols: usize,
        config: QuantConfig,
        codes: Vec<u8>,
        scales: Vec<f32>,
        zeros: GroupZeros,
    ) -> Result<Self> {
        config.validate()?;
        let total = rows * cols;
        if total == 0 || total % config.groupsize != 0 {
            return Err(TtqError::GroupDivisibility {
                size: total,
                groupsize: config.groupsize,
            });
        }
        let n_groups = total / config.groupsize;
        let expected_bytes = packed_len(total, config.bits);
        if codes.len() != expected_bytes {
            return Err(TtqError::PackLength {
                expected: expected_bytes,
                got: codes.len(),
            });
        }
        if scales.len() != n_groups || zeros.len() != n_groups {
            return Err(TtqError::InvalidShape(format!(
                "{} scales / {} zeros for {} groups",
                scales.len(),
                zeros.len(),
                n_groups
            )));
        }
        if let Some(idx) = scales.iter().position(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(TtqError::NonPositiveScale {
                index: idx,
                value: scales[idx] as f64,
            });
        }
        let matches_format = matches!(
            (&zeros, config.format),
            (GroupZeros::Real(_), QuantFormat::Asymmetric)
                | (GroupZeros::Real(_), QuantFormat::Symmetric)
                | (GroupZeros::Integer(_), QuantFormat::AltIntegerZero)
        );
        if !matches_format {
            return Err(TtqError::Format(
                "zero-point storage kind does not match the format".into(),
            ));
        }
        Ok(Self {
            rows,
            cols,
            config,
            codes,
            scales,
            zeros,
        })
    }

    pub fn n_groups(&self) -> usize {
        self.rows * self.cols / self.config.groupsize
    }

    /// Unpacks all codes in flattened row-major order.
    pub fn unpacked_codes(&self) -> Result<Vec<u8>> {
        unpack_codes(&self.codes, self.config.bits, self.rows * self.cols)
    }
}

fn round_half_away(x: f64) -> f64 {
    // f64::round is round-half-away-from-zero, fixed here on purpose so codes
    // do not depend on the platform's FP rounding mode.
    x.round()
}

/// Ideal (pre-snap) scale and zero-point of one group.
///
/// Returned values are the ones the packed grid will use: the scale is
/// already snapped to `f32` and the zero-point is consistent with the format
/// conventions described at module level. A degenerate group (zero range)
/// falls back to `S = 1`, `Z = Wmin`, which makes all-constant groups --
/// in particular all-zero residuals -- quantize exactly.
pub fn compute_scale_zero(group: &[f64], config: &QuantConfig) -> Result<(f64, f64)> {
    if group.is_empty() {
        return Err(TtqError::InvalidShape("empty group".into()));
    }
    if let Some(index) = group.iter().position(|v| !v.is_finite()) {
        return Err(TtqError::NonFinite { index });
    }
    let qmax = config.max_code() as f64;
    let mut wmin = f64::MAX;
    let mut wmax = f64::MIN;
    for &w in group {
        wmin = wmin.min(w);
        wmax = wmax.max(w);
    }
    match config.format {
        QuantFormat::Asymmetric => {
            let hi = 0.5 * (1.0 + config.nu);
            let lo = 0.5 * (1.0 - config.nu);
            let wmax_exp = hi * wmax + lo * wmin;
            let wmin_exp = lo * wmax + hi * wmin;
            let range = wmax_exp - wmin_exp;
            if range <= 0.0 {
                return Ok((1.0, f64::from(wmin as f32)));
            }
            let scale = f64::from((range / qmax) as f32);
            let zero = f64::from(wmin_exp as f32);
            Ok((scale, zero))
        }
        QuantFormat::Symmetric => {
            let absmax = wmax.abs().max(wmin.abs());
            if absmax == 0.0 {
                return Ok((1.0, 0.0));
            }
            // The f32 zero-point is authoritative; the working scale is
            // derived from it so requantization reproduces the grid exactly.
            let zero = f64::from((-absmax) as f32);
            let scale = -2.0 * zero / qmax;
            Ok((scale, zero))
        }
        QuantFormat::AltIntegerZero => {
            let range = wmax - wmin;
            if range <= 0.0 {
                let scale = 1.0;
                let zero = -round_half_away(wmin / scale);
                return Ok((scale, zero));
            }
            let scale = f64::from((range / qmax) as f32);
            let zero = -round_half_away(wmin / scale);
            Ok((scale, zero))
        }
    }
}

/// True when the group hit the degenerate constant fallback.
fn is_degenerate(group_min: f64, group_max: f64, config: &QuantConfig) -> bool {
    match config.format {
        QuantFormat::Symmetric => group_max.abs().max(group_min.abs()) == 0.0,
        QuantFormat::Asymmetric => {
            let hi = 0.5 * (1.0 + config.nu);
            let lo = 0.5 * (1.0 - config.nu);
            hi * group_max + lo * group_min - (lo * group_max + hi * group_min) <= 0.0
        }
        QuantFormat::AltIntegerZero => group_max - group_min <= 0.0,
    }
}

/// Groupwise quantization of a dense matrix.
pub fn quantize_groups(w: &DenseMatrix, config: &QuantConfig) -> Result<QuantizedTensor> {
    config.validate()?;
    let total = w.rows() * w.cols();
    if total % config.groupsize != 0 {
        return Err(TtqError::GroupDivisibility {
            size: total,
            groupsize: config.groupsize,
        });
    }
    let g = config.groupsize;
    let n_groups = total / g;
    let qmax = config.max_code() as f64;
    let data = w.as_slice();

    let mut codes = Vec::with_capacity(total);
    let mut scales = Vec::with_capacity(n_groups);
    let mut zeros_real = Vec::new();
    let mut zeros_int = Vec::new();

    for gi in 0..n_groups {
        let group = &data[gi * g..(gi + 1) * g];
        let (scale, zero) = compute_scale_zero(group, config)?;
        let mut gmin = f64::MAX;
        let mut gmax = f64::MIN;
        for &v in group {
            gmin = gmin.min(v);
            gmax = gmax.max(v);
        }
        let degenerate = is_degenerate(gmin, gmax, config);

        match config.format {
            QuantFormat::Asymmetric | QuantFormat::Symmetric => {
                for &v in group {
                    let code = if degenerate {
                        0.0
                    } else {
                        round_half_away((v - zero) / scale).clamp(0.0, qmax)
                    };
                    codes.push(code as u8);
                }
                zeros_real.push(zero as f32);
            }
            QuantFormat::AltIntegerZero => {
                if !(f64::from(i32::MIN)..=f64::from(i32::MAX)).contains(&zero) {
                    return Err(TtqError::InvalidParameter(format!(
                        "integer zero-point {zero} overflows i32"
                    )));
                }
                // Same formula in the degenerate case (S = 1): constants land
                // within S/2 of round(wmin), and a zero residual is exact.
                for &v in group {
                    let code = (round_half_away(v / scale) + zero).clamp(0.0, qmax);
                    codes.push(code as u8);
                }
                zeros_int.push(zero as i32);
            }
        }
        scales.push(scale as f32);
    }

    let packed = pack_codes_u8(&codes, config.bits)?;
    let zeros = match config.format {
        QuantFormat::AltIntegerZero => GroupZeros::Integer(zeros_int),
        _ => GroupZeros::Real(zeros_real),
    };
    Ok(QuantizedTensor {
        rows: w.rows(),
        cols: w.cols(),
        config: *config,
        codes: packed,
        scales,
        zeros,
    })
}

/// Working (f64) scale and zero-point of group `gi`, applying the
/// symmetric-format derivation rule.
pub(crate) fn group_grid(t: &QuantizedTensor, gi: usize) -> (f64, f64) {
    let qmax = t.config.max_code() as f64;
    match (&t.zeros, t.config.format) {
        (GroupZeros::Real(zs), QuantFormat::Symmetric) => {
            let z = f64::from(zs[gi]);
            if z < 0.0 {
                (-2.0 * z / qmax, z)
            } else {
                // Degenerate all-zero group stored as (S=1, Z=0).
                (f64::from(t.scales[gi]), z)
            }
        }
        (GroupZeros::Real(zs), _) => (f64::from(t.scales[gi]), f64::from(zs[gi])),
        (GroupZeros::Integer(zs), _) => (f64::from(t.scales[gi]), f64::from(zs[gi])),
    }
}

/// Reconstructs the dense matrix encoded by a quantized tensor.
pub fn dequantize_groups(t: &QuantizedTensor) -> Result<DenseMatrix> {
    let total = t.rows * t.cols;
    let flat = unpack_codes(&t.codes, t.config.bits, total)?;
    let g = t.config.groupsize;
    if total % g != 0 || t.scales.len() != total / g || t.zeros.len() != total / g {
        return Err(TtqError::InvalidShape(
            "metadata length does not match shape".into(),
        ));
    }
    let alt = t.config.format == QuantFormat::AltIntegerZero;
    let mut data = Vec::with_capacity(total);
    for gi in 0..total / g {
        let (scale, zero) = group_grid(t, gi);
        for &code in &flat[gi * g..(gi + 1) * g] {
            let c = f64::from(code);
            let v = if alt { (c - zero) * scale } else { c * scale + zero };
            data.push(v);
        }
    }
    DenseMatrix::new(t.rows, t.cols, data)
}

/// Round-to-nearest QDQ: quantize then dequantize.
pub fn rtn_qdq(w: &DenseMatrix, config: &QuantConfig) -> Result<DenseMatrix> {
    dequantize_groups(&quantize_groups(w, config)?)
}

pub(crate) fn packed_len(count: usize, bits: u8) -> usize {
    (count * bits as usize).div_ceil(8)
}

/// Packs `q`-bit codes least-significant-bit first, contiguous across byte
/// boundaries (so q = 3 or 5 codes straddle bytes).
pub fn pack_codes(codes: &[u32], bits: u8) -> Result<Vec<u8>> {
    if !(1..=8).contains(&bits) {
        return Err(TtqError::InvalidParameter(format!(
            "bits must be in 1..=8, got {bits}"
        )));
    }
    let limit = 1u32 << bits;
    let mut out = vec![0u8; packed_len(codes.len(), bits)];
    for (i, &code) in codes.iter().enumerate() {
        if code >= limit {
            return Err(TtqError::CodeOutOfRange { code, bits });
        }
        let bitpos = i * bits as usize;
        let byte = bitpos / 8;
        let offset = bitpos % 8;
        let val = (code as u16) << offset;
        out[byte] |= (val & 0xFF) as u8;
        if offset + bits as usize > 8 {
            out[byte + 1] |= (val >> 8) as u8;
        }
    }
    Ok(out)
}

fn pack_codes_u8(codes: &[u8], bits: u8) -> Result<Vec<u8>> {
    let wide: Vec<u32> = codes.iter().map(|&c| u32::from(c)).collect();
    pack_codes(&wide, bits)
}

/// Inverse of [`pack_codes`].
pub fn unpack_codes(bytes: &[u8], bits: u8, count: usize) -> Result<Vec<u8>> {
    if !(1..=8).contains(&bits) {
        return Err(TtqError::InvalidParameter(format!(
            "bits must be in 1..=8, got {bits}"
        )));
    }
    let expected = packed_len(count, bits);
    if bytes.len() != expected {
        return Err(TtqError::PackLength {
            expected,
            got: bytes.len(),
        });
    }
    let mask = ((1u16 << bits) - 1) as u16;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let bitpos = i * bits as usize;
        let byte = bitpos / 8;
        let offset = bitpos % 8;
        let mut val = (bytes[byte] as u16) >> offset;
        if offset + bits as usize > 8 {
            val |= (bytes[byte + 1] as u16) << (8 - offset);
        }
        out.push((val & mask) as u8);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{synth_activations, RandomSpec};
    use approx::assert_relative_eq;

    fn cfg(bits: u8, groupsize: usize, format: QuantFormat) -> QuantConfig {
        QuantConfig::new(bits, groupsize, format).unwrap()
    }

    fn row(data: &[f64]) -> DenseMatrix {
        DenseMatrix::new(1, data.len(), data.to_vec()).unwrap()
    }

    #[test]
    fn scale_zero_asymmetric() {
        let c = cfg(3, 2, QuantFormat::Asymmetric);
        let (s, z) = compute_scale_zero(&[-1.0, 3.0], &c).unwrap();
        assert_relative_eq!(s, 4.0 / 7.0, max_relative = 1e-6);
        assert_relative_eq!(z, -1.0, max_relative = 1e-6);
    }

    #[test]
    fn scale_zero_symmetric() {
        let c = cfg(3, 2, QuantFormat::Symmetric);
        let (s, z) = compute_scale_zero(&[-1.0, 3.0], &c).unwrap();
        assert_relative_eq!(s, 6.0 / 7.0, max_relative = 1e-6);
        assert_relative_eq!(z, -3.0, max_relative = 1e-6);
    }

    #[test]
    fn scale_zero_expansion_factor() {
        let c = cfg(4, 16, QuantFormat::Asymmetric).with_nu(0.95).unwrap();
        let mut group = vec![1.0; 16];
        group[0] = 0.0;
        let (s, z) = compute_scale_zero(&group, &c).unwrap();
        assert_relative_eq!(s, 0.95 / 15.0, max_relative = 1e-6);
        assert_relative_eq!(z, 0.025, max_relative = 1e-6);
    }

    #[test]
    fn quantize_hand_case() {
        let c = cfg(2, 4, QuantFormat::Asymmetric);
        let qt = quantize_groups(&row(&[0.0, 0.3, 0.7, 1.0]), &c).unwrap();
        assert_eq!(qt.unpacked_codes().unwrap(), vec![0, 1, 2, 3]);
        assert_relative_eq!(f64::from(qt.scales[0]), 1.0 / 3.0, max_relative = 1e-6);
        match &qt.zeros {
            GroupZeros::Real(z) => assert_eq!(z[0], 0.0),
            _ => panic!("wrong zeros kind"),
        }
        let deq = dequantize_groups(&qt).unwrap();
        let expect = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
        for (v, e) in deq.as_slice().iter().zip(&expect) {
            assert_relative_eq!(v, e, max_relative = 1e-6, epsilon = 1e-7);
        }
    }

    #[test]
    fn quantize_on_grid_is_fixed_point() {
        // Values already of the form Z + k*S reproduce exactly under QDQ.
        let s = 0.25f64;
        let z = -0.5f64;
        let vals: Vec<f64> = [0u32, 1, 2, 3].iter().map(|&k| z + k as f64 * s).collect();
        let c = cfg(2, 4, QuantFormat::Asymmetric);
        let w = row(&vals);
        let deq = rtn_qdq(&w, &c).unwrap();
        for (v, e) in deq.as_slice().iter().zip(&vals) {
            assert_eq!(v, e);
        }
    }

    #[test]
    fn degenerate_constant_group() {
        let c = cfg(3, 4, QuantFormat::Asymmetric);
        let qt = quantize_groups(&row(&[5.0, 5.0, 5.0, 5.0]), &c).unwrap();
        assert_eq!(qt.unpacked_codes().unwrap(), vec![0, 0, 0, 0]);
        assert_eq!(qt.scales[0], 1.0);
        match &qt.zeros {
            GroupZeros::Real(z) => assert_eq!(z[0], 5.0),
            _ => panic!("wrong zeros kind"),
        }
        let deq = dequantize_groups(&qt).unwrap();
        assert!(deq.as_slice().iter().all(|&v| v == 5.0));
    }

    #[test]
    fn dequantize_affine_map() {
        let c = cfg(2, 4, QuantFormat::Asymmetric);
        let qt = QuantizedTensor::from_parts(
            1,
            4,
            c,
            pack_codes(&[0, 1, 2, 3], 2).unwrap(),
            vec![1.0f32 / 3.0],
            GroupZeros::Real(vec![0.0]),
        )
        .unwrap();
        let deq = dequantize_groups(&qt).unwrap();
        let expect = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
        for (v, e) in deq.as_slice().iter().zip(&expect) {
            assert_relative_eq!(v, e, max_relative = 1e-6, epsilon = 1e-9);
        }
    }

    #[test]
    fn dequantize_all_zero_codes() {
        let c = cfg(2, 4, QuantFormat::Asymmetric);
        let qt = QuantizedTensor::from_parts(
            1,
            4,
            c,
            pack_codes(&[0, 0, 0, 0], 2).unwrap(),
            vec![1.0],
            GroupZeros::Real(vec![5.0]),
        )
        .unwrap();
        let deq = dequantize_groups(&qt).unwrap();
        assert!(deq.as_slice().iter().all(|&v| v == 5.0));
    }

    #[test]
    fn rtn_error_bound_8bit() {
        let spec = RandomSpec {
            seed: 21,
            channel_scale_sigma: 0.0,
            rows: 4,
            cols: 8,
        };
        // Map synthetic normals into [0, 1].
        let raw = synth_activations(&spec);
        let w = DenseMatrix::from_fn(4, 8, |i, j| 0.5 + 0.5 * (raw.get(i, j) / 4.0).clamp(-1.0, 1.0));
        let c = cfg(8, 4, QuantFormat::Asymmetric);
        let deq = rtn_qdq(&w, &c).unwrap();
        let max_err = w
            .as_slice()
            .iter()
            .zip(deq.as_slice())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_err <= 0.5 / 255.0 + 1e-9, "max_err = {max_err}");
    }

    #[test]
    fn per_element_error_bound_all_formats() {
        for format in [
            QuantFormat::Asymmetric,
            QuantFormat::Symmetric,
            QuantFormat::AltIntegerZero,
        ] {
            for seed in 0..20u64 {
                let spec = RandomSpec {
                    seed,
                    channel_scale_sigma: 1.0,
                    rows: 4,
                    cols: 16,
                };
                let w = synth_activations(&spec);
                let c = cfg(3, 8, format);
                let qt = quantize_groups(&w, &c).unwrap();
                let deq = dequantize_groups(&qt).unwrap();
                let g = c.groupsize;
                for (idx, (a, b)) in w.as_slice().iter().zip(deq.as_slice()).enumerate() {
                    let gi = idx / g;
                    let (scale, zero) = group_grid(&qt, gi);
                    let top = if c.format == QuantFormat::AltIntegerZero {
                        (c.max_code() as f64 - zero) * scale
                    } else {
                        c.max_code() as f64 * scale + zero
                    };
                    let bottom = if c.format == QuantFormat::AltIntegerZero {
                        -zero * scale
                    } else {
                        zero
                    };
                    // The bound applies to elements inside the representable range.
                    if *a >= bottom && *a <= top {
                        assert!(
                            (a - b).abs() <= scale / 2.0 + 1e-9,
                            "format {format:?} seed {seed}: |{a} - {b}| > {scale}/2"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn idempotent_codes_all_formats() {
        for format in [
            QuantFormat::Asymmetric,
            QuantFormat::Symmetric,
            QuantFormat::AltIntegerZero,
        ] {
            for bits in [2u8, 3, 4, 5, 8] {
                for seed in 0..10u64 {
                    let spec = RandomSpec {
                        seed: seed + 1000 * u64::from(bits),
                        channel_scale_sigma: 1.0,
                        rows: 4,
                        cols: 8,
                    };
                    let w = synth_activations(&spec);
                    let c = cfg(bits, 8, format);
                    let q1 = quantize_groups(&w, &c).unwrap();
                    let d1 = dequantize_groups(&q1).unwrap();
                    let q2 = quantize_groups(&d1, &c).unwrap();
                    assert_eq!(q1.codes, q2.codes, "format {format:?} bits {bits} seed {seed}");
                    for (a, b) in q1.scales.iter().zip(&q2.scales) {
                        assert!((f64::from(*a) - f64::from(*b)).abs() <= 1e-9);
                    }
                    assert_eq!(q1.zeros, q2.zeros);
                }
            }
        }
    }

    #[test]
    fn monotone_precision_in_bits() {
        for seed in 0..100u64 {
            let spec = RandomSpec {
                seed,
                channel_scale_sigma: 1.0,
                rows: 8,
                cols: 16,
            };
            let w = synth_activations(&spec);
            let mut prev = f64::MAX;
            for bits in [2u8, 3, 4, 5, 8] {
                let c = cfg(bits, 16, QuantFormat::Asymmetric);
                let err = w.sub(&rtn_qdq(&w, &c).unwrap()).unwrap().frobenius_norm();
                assert!(
                    err <= prev,
                    "seed {seed}: error at {bits} bits ({err}) exceeds previous ({prev})"
                );
                prev = err;
            }
        }
    }

    #[test]
    fn positive_scale_equivariance() {
        // Seeded: code flips under metadata rounding would break the bound,
        // so determinism matters here. The 1e-6 tolerance is relative to the
        // tensor magnitude, never to individual near-zero entries.
        for seed in [3u64, 17, 29] {
            let spec = RandomSpec {
                seed,
                channel_scale_sigma: 0.5,
                rows: 4,
                cols: 8,
            };
            let w = synth_activations(&spec);
            let c = cfg(3, 8, QuantFormat::Asymmetric);
            let base = rtn_qdq(&w, &c).unwrap();
            for factor in [0.5f64, 3.0, 100.0] {
                let scaled = rtn_qdq(&w.scale(factor), &c).unwrap();
                let tol = 1e-6
                    * factor
                    * base.as_slice().iter().fold(0.0f64, |m, v| m.max(v.abs()));
                for (a, b) in scaled.as_slice().iter().zip(base.as_slice()) {
                    assert!(
                        (a - b * factor).abs() <= tol,
                        "seed {seed} factor {factor}: {a} vs {}",
                        b * factor
                    );
                }
            }
        }
    }

    #[test]
    fn pack_examples() {
        assert_eq!(pack_codes(&[1, 2], 4).unwrap(), vec![0x21]);
        assert_eq!(pack_codes(&[0, 1, 2, 3], 2).unwrap(), vec![0xE4]);
        assert_eq!(pack_codes(&[7, 7, 7], 3).unwrap(), vec![0xFF, 0x01]);
    }

    #[test]
    fn pack_unpack_exhaustive_codes() {
        // Every code value at every width and length up to 64, cycling so
        // all values appear and straddle byte boundaries.
        for bits in 1u8..=8 {
            let limit = 1u32 << bits;
            for len in 1usize..=64 {
                let codes: Vec<u32> = (0..len).map(|i| (i as u32 * 7 + 3) % limit).collect();
                let packed = pack_codes(&codes, bits).unwrap();
                let unpacked = unpack_codes(&packed, bits, len).unwrap();
                let wide: Vec<u32> = unpacked.iter().map(|&c| u32::from(c)).collect();
                assert_eq!(wide, codes, "bits {bits} len {len}");
            }
        }
    }

    #[test]
    fn pack_rejects_oversized_codes() {
        assert!(matches!(
            pack_codes(&[4], 2),
            Err(TtqError::CodeOutOfRange { code: 4, bits: 2 })
        ));
    }

    #[test]
    fn unpack_rejects_bad_length() {
        assert!(unpack_codes(&[0xFF], 3, 3).is_err());
        assert!(unpack_codes(&[0xFF, 0x01, 0x00], 3, 3).is_err());
    }

    #[test]
    fn divisibility_enforced() {
        let c = cfg(2, 3, QuantFormat::Asymmetric);
        let w = row(&[0.0, 1.0, 2.0, 3.0]);
        assert!(matches!(
            quantize_groups(&w, &c),
            Err(TtqError::GroupDivisibility { .. })
        ));
    }

    #[test]
    fn groups_flatten_row_major_across_rows() {
        // 2x4 with g = 4: each row is one group; 2x4 with g = 8: one group
        // spanning both rows.
        let w = DenseMatrix::new(2, 4, vec![0.0, 1.0, 2.0, 3.0, 10.0, 11.0, 12.0, 13.0]).unwrap();
        let per_row = quantize_groups(&w, &cfg(2, 4, QuantFormat::Asymmetric)).unwrap();
        assert_eq!(per_row.n_groups(), 2);
        let spanning = quantize_groups(&w, &cfg(2, 8, QuantFormat::Asymmetric)).unwrap();
        assert_eq!(spanning.n_groups(), 1);
    }

    #[test]
    fn alt_integer_zero_roundtrip() {
        let c = cfg(3, 4, QuantFormat::AltIntegerZero);
        let w = row(&[-0.8, -0.1, 0.4, 1.3]);
        let qt = quantize_groups(&w, &c).unwrap();
        match &qt.zeros {
            GroupZeros::Integer(z) => assert_eq!(z.len(), 1),
            _ => panic!("alt format must store integer zeros"),
        }
        let deq = dequantize_groups(&qt).unwrap();
        let (scale, _) = group_grid(&qt, 0);
        for (a, b) in w.as_slice().iter().zip(deq.as_slice()) {
            assert!((a - b).abs() <= scale / 2.0 + 1e-9);
        }
    }
}
