//! Bit-exact binary formats for dense tensors and quantized containers.
//!
//! Tensor files (`TTQT`):
//!
//! ```text
//! magic "TTQT" | version u16 | dtype u8 (0 = f64, 1 = f32) | ndim u8 |
//! dims (u64 each) | payload row-major
//! ```
//!
//! Quantized containers (`TTQC`) carry the method, quantization config,
//! recorded hyperparameters, and one of two payloads: packed codes with
//! groupwise scales (f32) and zero-points (f32, or i32 for the integer
//! zero-point format), or -- for the test-time method, which quantizes at
//! inference -- the full-precision weights. Optional blocks hold the
//! calibration diagonal scale and the low-rank factors; a trailing CRC32
//! (IEEE) covers every preceding byte. All integers are little-endian and
//! files are byte-identical across platforms for identical inputs.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::calibration::{AwqHyperparams, DiagScale};
use crate::error::{Result, TtqError};
use crate::lowrank::LowRankFactors;
use crate::quantizer::{packed_len, GroupZeros, QuantConfig, QuantFormat, QuantizedTensor};
use crate::tensor::DenseMatrix;

const TENSOR_MAGIC: &[u8; 4] = b"TTQT";
const CONTAINER_MAGIC: &[u8; 4] = b"TTQC";
const FORMAT_VERSION: u16 = 1;

/// Element storage type of a tensor file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F64,
    F32,
}

impl Dtype {
    fn code(self) -> u8 {
        match self {
            Dtype::F64 => 0,
            Dtype::F32 => 1,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Dtype::F64),
            1 => Ok(Dtype::F32),
            other => Err(TtqError::Format(format!("unknown dtype code {other}"))),
        }
    }
}

/// Quantization method recorded in a container.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantMethod {
    Rtn,
    Awq,
    Awp,
    Ttq,
}

impl QuantMethod {
    pub fn code(self) -> u8 {
        match self {
            QuantMethod::Rtn => 0,
            QuantMethod::Awq => 1,
            QuantMethod::Awp => 2,
            QuantMethod::Ttq => 3,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(QuantMethod::Rtn),
            1 => Ok(QuantMethod::Awq),
            2 => Ok(QuantMethod::Awp),
            3 => Ok(QuantMethod::Ttq),
            other => Err(TtqError::Format(format!("unknown method code {other}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            QuantMethod::Rtn => "rtn",
            QuantMethod::Awq => "awq",
            QuantMethod::Awp => "awp",
            QuantMethod::Ttq => "ttq",
        }
    }
}

impl std::str::FromStr for QuantMethod {
    type Err = TtqError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rtn" => Ok(QuantMethod::Rtn),
            "awq" => Ok(QuantMethod::Awq),
            "awp" => Ok(QuantMethod::Awp),
            "ttq" => Ok(QuantMethod::Ttq),
            other => Err(TtqError::InvalidParameter(format!(
                "unknown method '{other}' (expected rtn|awq|awp|ttq)"
            ))),
        }
    }
}

/// Payload of a container: packed codes for offline methods, retained
/// full-precision weights for the test-time method.
#[derive(Debug, Clone)]
pub enum ContainerPayload {
    Quantized(QuantizedTensor),
    FullPrecision(DenseMatrix),
}

/// Everything stored in one `TTQC` file.
#[derive(Debug, Clone)]
pub struct QuantContainer {
    pub method: QuantMethod,
    pub config: QuantConfig,
    pub hp: AwqHyperparams,
    pub rows: usize,
    pub cols: usize,
    pub payload: ContainerPayload,
    pub diag_scale: Option<DiagScale>,
    pub factors: LowRankFactors,
}

// ---------------------------------------------------------------------------
// Tensor files
// ---------------------------------------------------------------------------

/// Writes a dense matrix at the given storage precision.
pub fn write_tensor_to(w: &mut impl Write, m: &DenseMatrix, dtype: Dtype) -> Result<()> {
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&[dtype.code(), 2])?;
    w.write_all(&(m.rows() as u64).to_le_bytes())?;
    w.write_all(&(m.cols() as u64).to_le_bytes())?;
    match dtype {
        Dtype::F64 => {
            for &v in m.as_slice() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Dtype::F32 => {
            for &v in m.as_slice() {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
    }
    Ok(())
}

/// Reads one tensor from a stream; f32 payloads widen losslessly to f64.
pub fn read_tensor_from(r: &mut impl Read) -> Result<DenseMatrix> {
    let mut magic = [0u8; 4];
    read_exact_or_truncated(r, &mut magic)?;
    if &magic != TENSOR_MAGIC {
        return Err(TtqError::Format(format!(
            "bad magic {:02x?}, expected {TENSOR_MAGIC:02x?}",
            magic
        )));
    }
    let version = read_u16(r)?;
    if version != FORMAT_VERSION {
        return Err(TtqError::UnsupportedVersion(version));
    }
    let mut head = [0u8; 2];
    read_exact_or_truncated(r, &mut head)?;
    let dtype = Dtype::from_code(head[0])?;
    let ndim = head[1];
    if ndim != 2 {
        return Err(TtqError::Format(format!(
            "expected a 2-dimensional tensor, got ndim {ndim}"
        )));
    }
    let rows = read_u64(r)? as usize;
    let cols = read_u64(r)? as usize;
    let count = rows
        .checked_mul(cols)
        .ok_or_else(|| TtqError::Format("dimension overflow".into()))?;
    let data = match dtype {
        Dtype::F64 => read_n_bytes(r, count * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        Dtype::F32 => read_n_bytes(r, count * 4)?
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
            .collect(),
    };
    DenseMatrix::new(rows, cols, data)
}

pub fn write_tensor(path: impl AsRef<Path>, m: &DenseMatrix, dtype: Dtype) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor_to(&mut w, m, dtype)?;
    w.flush()?;
    Ok(())
}

/// Reads a tensor file, rejecting trailing bytes.
pub fn read_tensor(path: impl AsRef<Path>) -> Result<DenseMatrix> {
    let mut r = BufReader::new(File::open(path)?);
    let m = read_tensor_from(&mut r)?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(TtqError::Format("trailing bytes after payload".into()));
    }
    Ok(m)
}

// ---------------------------------------------------------------------------
// Quantized containers
// ---------------------------------------------------------------------------

/// Serializes a container; the trailing CRC32 covers every preceding byte.
pub fn write_container_to(w: &mut impl Write, c: &QuantContainer) -> Result<()> {
    let bytes = container_bytes(c)?;
    w.write_all(&bytes)?;
    Ok(())
}

pub fn write_container(path: impl AsRef<Path>, c: &QuantContainer) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_container_to(&mut w, c)?;
    w.flush()?;
    Ok(())
}

fn container_bytes(c: &QuantContainer) -> Result<Vec<u8>> {
    c.config.validate()?;
    let mut buf = Vec::new();
    buf.extend_from_slice(CONTAINER_MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.push(c.method.code());
    buf.push(c.config.bits);
    buf.extend_from_slice(&(c.config.groupsize as u32).to_le_bytes());
    buf.push(c.config.format.code());
    buf.extend_from_slice(&c.config.nu.to_le_bytes());
    buf.extend_from_slice(&c.hp.alpha.to_le_bytes());
    buf.extend_from_slice(&c.hp.lambda.to_le_bytes());
    buf.extend_from_slice(&c.hp.p.to_le_bytes());
    buf.extend_from_slice(&(c.rows as u64).to_le_bytes());
    buf.extend_from_slice(&(c.cols as u64).to_le_bytes());

    match (&c.payload, c.method) {
        (ContainerPayload::Quantized(qt), method) => {
            if method == QuantMethod::Ttq {
                return Err(TtqError::Format(
                    "the test-time method stores full-precision weights".into(),
                ));
            }
            if qt.rows != c.rows || qt.cols != c.cols {
                return Err(TtqError::InvalidShape(
                    "payload shape does not match the header".into(),
                ));
            }
            buf.extend_from_slice(&qt.codes);
            for &s in &qt.scales {
                buf.extend_from_slice(&s.to_le_bytes());
            }
            match &qt.zeros {
                GroupZeros::Real(zs) => {
                    for &z in zs {
                        buf.extend_from_slice(&z.to_le_bytes());
                    }
                }
                GroupZeros::Integer(zs) => {
                    for &z in zs {
                        buf.extend_from_slice(&z.to_le_bytes());
                    }
                }
            }
        }
        (ContainerPayload::FullPrecision(m), QuantMethod::Ttq) => {
            if m.rows() != c.rows || m.cols() != c.cols {
                return Err(TtqError::InvalidShape(
                    "payload shape does not match the header".into(),
                ));
            }
            for &v in m.as_slice() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        (ContainerPayload::FullPrecision(_), method) => {
            return Err(TtqError::Format(format!(
                "method {} requires a quantized payload",
                method.name()
            )));
        }
    }

    match &c.diag_scale {
        Some(s) => {
            if s.len() != c.cols {
                return Err(TtqError::InvalidShape(
                    "diagonal scale length does not match cols".into(),
                ));
            }
            buf.push(1);
            for &v in s.values() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        None => buf.push(0),
    }

    if c.factors.is_empty() {
        buf.push(0);
    } else {
        let b = c.factors.b().expect("rank > 0");
        let a = c.factors.a().expect("rank > 0");
        if b.rows() != c.rows || a.cols() != c.cols {
            return Err(TtqError::InvalidShape(
                "factor shape does not match the header".into(),
            ));
        }
        buf.push(1);
        buf.extend_from_slice(&(c.factors.rank() as u64).to_le_bytes());
        for &v in b.as_slice() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for &v in a.as_slice() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

/// Incremental reader that keeps every consumed byte for the CRC check.
struct TrackingReader<'a, R: Read> {
    inner: &'a mut R,
    consumed: Vec<u8>,
}

impl<'a, R: Read> TrackingReader<'a, R> {
    fn new(inner: &'a mut R) -> Self {
        Self {
            inner,
            consumed: Vec::new(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        // Chunked so a corrupted length field runs into EOF instead of a
        // giant allocation.
        const CHUNK: usize = 1 << 16;
        let start = self.consumed.len();
        let mut remaining = n;
        while remaining > 0 {
            let step = remaining.min(CHUNK);
            let pos = self.consumed.len();
            self.consumed.resize(pos + step, 0);
            read_exact_or_truncated(self.inner, &mut self.consumed[pos..])?;
            remaining -= step;
        }
        Ok(&self.consumed[start..])
    }

    fn take_u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn take_u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn take_u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn take_u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn take_f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn take_f64_vec(&mut self, count: usize) -> Result<Vec<f64>> {
        Ok(self
            .take(count * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Reads one container from a stream, verifying the trailing CRC32.
pub fn read_container_from(r: &mut impl Read) -> Result<QuantContainer> {
    let mut tr = TrackingReader::new(r);
    let magic: [u8; 4] = tr.take(4)?.try_into().unwrap();
    if &magic != CONTAINER_MAGIC {
        return Err(TtqError::Format(format!(
            "bad magic {:02x?}, expected {CONTAINER_MAGIC:02x?}",
            magic
        )));
    }
    let version = tr.take_u16()?;
    if version > FORMAT_VERSION {
        return Err(TtqError::UnsupportedVersion(version));
    }
    let method = QuantMethod::from_code(tr.take_u8()?)?;
    let bits = tr.take_u8()?;
    let groupsize = tr.take_u32()? as usize;
    let format = QuantFormat::from_code(tr.take_u8()?)?;
    let nu = tr.take_f64()?;
    let config = QuantConfig::new(bits, groupsize, format)
        .and_then(|c| c.with_nu(nu))
        .map_err(|e| TtqError::Format(format!("bad config block: {e}")))?;
    let alpha = tr.take_f64()?;
    let lambda = tr.take_f64()?;
    let p = tr.take_f64()?;
    let hp = AwqHyperparams::new(alpha, lambda, p)
        .map_err(|e| TtqError::Format(format!("bad hyperparameter block: {e}")))?;
    let rows = tr.take_u64()? as usize;
    let cols = tr.take_u64()? as usize;
    let total = rows
        .checked_mul(cols)
        .ok_or_else(|| TtqError::Format("dimension overflow".into()))?;

    let payload = if method == QuantMethod::Ttq {
        let data = tr.take_f64_vec(total)?;
        ContainerPayload::FullPrecision(
            DenseMatrix::new(rows, cols, data)
                .map_err(|e| TtqError::Format(format!("bad weight payload: {e}")))?,
        )
    } else {
        if total == 0 || total % groupsize != 0 {
            return Err(TtqError::Format(format!(
                "{total} elements not divisible by groupsize {groupsize}"
            )));
        }
        let n_groups = total / groupsize;
        let codes = tr.take(packed_len(total, bits))?.to_vec();
        let scales: Vec<f32> = tr
            .take(n_groups * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let zeros = match format {
            QuantFormat::AltIntegerZero => GroupZeros::Integer(
                tr.take(n_groups * 4)?
                    .chunks_exact(4)
                    .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            _ => GroupZeros::Real(
                tr.take(n_groups * 4)?
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
        };
        let qt = QuantizedTensor::from_parts(rows, cols, config, codes, scales, zeros)
            .map_err(|e| TtqError::Format(format!("bad quantized payload: {e}")))?;
        ContainerPayload::Quantized(qt)
    };

    let diag_scale = match tr.take_u8()? {
        0 => None,
        1 => {
            let values = tr.take_f64_vec(cols)?;
            Some(
                DiagScale::new(values)
                    .map_err(|e| TtqError::Format(format!("bad diagonal scale block: {e}")))?,
            )
        }
        other => {
            return Err(TtqError::Format(format!(
                "bad diagonal-scale flag {other}"
            )))
        }
    };

    let factors = match tr.take_u8()? {
        0 => LowRankFactors::empty(),
        1 => {
            let r = tr.take_u64()? as usize;
            if r == 0 || r > rows.min(cols) {
                return Err(TtqError::Format(format!(
                    "factor rank {r} out of range for {rows}x{cols}"
                )));
            }
            let b_data = tr.take_f64_vec(rows * r)?;
            let a_data = tr.take_f64_vec(r * cols)?;
            let b = DenseMatrix::new(rows, r, b_data)
                .map_err(|e| TtqError::Format(format!("bad factor block: {e}")))?;
            let a = DenseMatrix::new(r, cols, a_data)
                .map_err(|e| TtqError::Format(format!("bad factor block: {e}")))?;
            LowRankFactors::new(b, a)?
        }
        other => return Err(TtqError::Format(format!("bad factor flag {other}"))),
    };

    let computed = crc32fast::hash(&tr.consumed);
    let mut crc_bytes = [0u8; 4];
    read_exact_or_truncated(tr.inner, &mut crc_bytes)?;
    let stored = u32::from_le_bytes(crc_bytes);
    if stored != computed {
        return Err(TtqError::CrcMismatch { stored, computed });
    }

    Ok(QuantContainer {
        method,
        config,
        hp,
        rows,
        cols,
        payload,
        diag_scale,
        factors,
    })
}

/// Reads a container file, rejecting trailing bytes.
pub fn read_container(path: impl AsRef<Path>) -> Result<QuantContainer> {
    let mut r = BufReader::new(File::open(path)?);
    let c = read_container_from(&mut r)?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(TtqError::Format("trailing bytes after checksum".into()));
    }
    Ok(c)
}

fn read_u16(r: &mut impl Read) -> Result<u16> {
    let mut buf = [0u8; 2];
    read_exact_or_truncated(r, &mut buf)?;
    Ok(u16::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    read_exact_or_truncated(r, &mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

/// Reads exactly `n` bytes in bounded chunks, so corrupted length fields
/// surface as truncation errors rather than giant allocations.
fn read_n_bytes(r: &mut impl Read, n: usize) -> Result<Vec<u8>> {
    const CHUNK: usize = 1 << 16;
    let mut buf = Vec::new();
    let mut remaining = n;
    while remaining > 0 {
        let step = remaining.min(CHUNK);
        let pos = buf.len();
        buf.resize(pos + step, 0);
        read_exact_or_truncated(r, &mut buf[pos..])?;
        remaining -= step;
    }
    Ok(buf)
}

fn read_exact_or_truncated(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            TtqError::Format("truncated file".into())
        } else {
            TtqError::Io(e)
        }
    })
}
