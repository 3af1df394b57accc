//! N-dimensional nonnegative tensors and the MPXT file format.
//!
//! MPXT layout (little-endian): `"MPXT"` · `u8 version = 1` · `u8 rank` ·
//! `rank × u32 extents` · `product(extents) × f32`, row-major, no padding.
//! The part after the magic is the *body*; it is embedded verbatim in
//! saliency files and bridge frames.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use thiserror::Error;

pub const MPXT_MAGIC: &[u8; 4] = b"MPXT";
pub const MPXT_VERSION: u8 = 1;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("unsupported format version {0}")]
    BadVersion(u8),
    #[error("shape {0:?} overflows the addressable element count")]
    ShapeOverflow(Vec<usize>),
    #[error("payload holds {actual} bytes but the shape requires {expected}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("negative value {value} at flat index {index}")]
    NegativeValue { index: usize, value: f32 },
    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),
    #[error("invalid shape {0:?}: rank and every extent must be at least 1")]
    InvalidShape(Vec<usize>),
    #[error("rank {0} does not fit in one byte")]
    RankTooLarge(usize),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// How negative entries are treated when a tensor enters the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NonNegMode {
    #[default]
    Strict,
    ShiftMin,
}

/// Row-major `f32` tensor with an explicit shape.
///
/// Every tensor handed to the attribution pipeline is finite and
/// nonnegative; [`InputTensor::new`] enforces this. Masked copies keep the
/// property because masking only writes zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct InputTensor {
    shape: Vec<usize>,
    values: Vec<f32>,
}

fn checked_volume(shape: &[usize]) -> Result<usize, TensorError> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(TensorError::InvalidShape(shape.to_vec()));
    }
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|&v| v.checked_mul(4).is_some())
        .ok_or_else(|| TensorError::ShapeOverflow(shape.to_vec()))
}

fn check_finite(values: &[f32]) -> Result<(), TensorError> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(TensorError::NonFinite(i)),
        None => Ok(()),
    }
}

fn check_nonneg(values: &[f32]) -> Result<(), TensorError> {
    match values.iter().position(|&v| v < 0.0) {
        Some(index) => Err(TensorError::NegativeValue {
            index,
            value: values[index],
        }),
        None => Ok(()),
    }
}

impl InputTensor {
    /// Builds a validated tensor (finite, nonnegative).
    pub fn new(shape: Vec<usize>, values: Vec<f32>) -> Result<Self, TensorError> {
        let t = Self::new_unchecked_sign(shape, values)?;
        check_nonneg(&t.values)?;
        Ok(t)
    }

    /// Builds a tensor that is finite but may hold negative entries. Use
    /// [`validate_or_shift`] before handing it to the attribution pipeline.
    pub fn new_unchecked_sign(shape: Vec<usize>, values: Vec<f32>) -> Result<Self, TensorError> {
        let expected = checked_volume(&shape)?;
        if values.len() != expected {
            return Err(TensorError::LengthMismatch {
                expected: expected * 4,
                actual: values.len() * 4,
            });
        }
        check_finite(&values)?;
        Ok(Self { shape, values })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self, TensorError> {
        let n = checked_volume(&shape)?;
        Ok(Self {
            shape,
            values: vec![0.0; n],
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    /// Row-major flat offset of a coordinate. Panics if out of range.
    pub fn offset(&self, coord: &[usize]) -> usize {
        assert_eq!(coord.len(), self.shape.len(), "coordinate rank");
        coord.iter().zip(&self.shape).fold(0, |acc, (&c, &d)| {
            assert!(c < d, "coordinate {c} out of extent {d}");
            acc * d + c
        })
    }

    pub fn get(&self, coord: &[usize]) -> f32 {
        self.values[self.offset(coord)]
    }

    pub(crate) fn from_parts_unchecked(shape: Vec<usize>, values: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        Self { shape, values }
    }

    /// Serialises the body (version, rank, extents, payload) without magic.
    pub fn write_body<W: Write>(&self, w: &mut W) -> Result<(), TensorError> {
        let rank = u8::try_from(self.shape.len())
            .map_err(|_| TensorError::RankTooLarge(self.shape.len()))?;
        w.write_u8(MPXT_VERSION)?;
        w.write_u8(rank)?;
        for &d in &self.shape {
            let d = u32::try_from(d).map_err(|_| TensorError::ShapeOverflow(self.shape.clone()))?;
            w.write_u32::<LittleEndian>(d)?;
        }
        for &v in &self.values {
            w.write_f32::<LittleEndian>(v)?;
        }
        Ok(())
    }

    /// Byte length of [`InputTensor::write_body`] output.
    pub fn body_len(&self) -> usize {
        2 + 4 * self.shape.len() + 4 * self.values.len()
    }

    /// Parses one body from a reader positioned right after any magic and
    /// leaves it positioned after the payload. `strict` rejects negatives.
    pub fn read_body<R: Read>(r: &mut R, strict: bool) -> Result<Self, TensorError> {
        let version = r.read_u8()?;
        if version != MPXT_VERSION {
            return Err(TensorError::BadVersion(version));
        }
        let rank = r.read_u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.read_u32::<LittleEndian>()? as usize);
        }
        let n = checked_volume(&shape)?;
        let mut raw = Vec::with_capacity(n * 4);
        r.take((n * 4) as u64).read_to_end(&mut raw)?;
        if raw.len() != n * 4 {
            return Err(TensorError::LengthMismatch {
                expected: n * 4,
                actual: raw.len(),
            });
        }
        let values: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        check_finite(&values)?;
        if strict {
            check_nonneg(&values)?;
        }
        Ok(Self { shape, values })
    }

    /// Full MPXT encoding including magic.
    pub fn to_mpxt_bytes(&self) -> Result<Vec<u8>, TensorError> {
        let mut out = Vec::with_capacity(4 + self.body_len());
        out.extend_from_slice(MPXT_MAGIC);
        self.write_body(&mut out)?;
        Ok(out)
    }

    pub fn from_mpxt_bytes(bytes: &[u8], strict: bool) -> Result<Self, TensorError> {
        if bytes.len() < 4 || &bytes[..4] != MPXT_MAGIC {
            return Err(TensorError::BadMagic {
                expected: "MPXT".into(),
                found: String::from_utf8_lossy(&bytes[..bytes.len().min(4)]).into_owned(),
            });
        }
        let mut cursor = &bytes[4..];
        let t = Self::read_body(&mut cursor, strict)?;
        if !cursor.is_empty() {
            let n = t.values.len() * 4;
            return Err(TensorError::LengthMismatch {
                expected: n,
                actual: n + cursor.len(),
            });
        }
        Ok(t)
    }
}

/// Reads an MPXT file. Negative values are rejected in strict mode.
pub fn load_tensor(path: &Path, strict: bool) -> Result<InputTensor, TensorError> {
    let bytes = fs::read(path)?;
    InputTensor::from_mpxt_bytes(&bytes, strict)
}

pub fn save_tensor(path: &Path, tensor: &InputTensor) -> Result<(), TensorError> {
    fs::write(path, tensor.to_mpxt_bytes()?)?;
    Ok(())
}

/// Enforces nonnegativity: strict mode rejects, shift-min subtracts the
/// minimum when it is negative.
pub fn validate_or_shift(x: InputTensor, mode: NonNegMode) -> Result<InputTensor, TensorError> {
    check_finite(&x.values)?;
    match mode {
        NonNegMode::Strict => {
            check_nonneg(&x.values)?;
            Ok(x)
        }
        NonNegMode::ShiftMin => {
            let min = x.values.iter().copied().fold(f32::INFINITY, f32::min);
            if min >= 0.0 {
                return Ok(x);
            }
            let InputTensor { shape, values } = x;
            let values = values.into_iter().map(|v| (v - min).max(0.0)).collect();
            Ok(InputTensor { shape, values })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn file_bytes(shape: &[u32], values: &[f32]) -> Vec<u8> {
        let mut b = b"MPXT".to_vec();
        b.push(1);
        b.push(shape.len() as u8);
        for d in shape {
            b.extend_from_slice(&d.to_le_bytes());
        }
        for v in values {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b
    }

    #[test]
    fn decodes_hand_built_file() {
        let bytes = file_bytes(&[2, 2], &[0.0, 1.0, 2.0, 3.0]);
        let t = InputTensor::from_mpxt_bytes(&bytes, true).unwrap();
        assert_eq!(t.shape(), &[2, 2]);
        assert_eq!(t.values(), &[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(t.to_mpxt_bytes().unwrap(), bytes);
    }

    #[test]
    fn short_payload_is_length_mismatch() {
        let bytes = file_bytes(&[2, 2], &[0.0, 1.0, 2.0]);
        assert!(matches!(
            InputTensor::from_mpxt_bytes(&bytes, true),
            Err(TensorError::LengthMismatch { expected: 16, actual: 12 })
        ));
    }

    #[test]
    fn trailing_bytes_are_length_mismatch() {
        let bytes = file_bytes(&[1], &[0.0, 1.0]);
        assert!(matches!(
            InputTensor::from_mpxt_bytes(&bytes, true),
            Err(TensorError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn bad_magic() {
        let mut bytes = file_bytes(&[1], &[0.0]);
        bytes[0] = b'X';
        assert!(matches!(
            InputTensor::from_mpxt_bytes(&bytes, true),
            Err(TensorError::BadMagic { .. })
        ));
    }

    #[test]
    fn shape_overflow() {
        let bytes = file_bytes(&[u32::MAX, u32::MAX, u32::MAX], &[]);
        assert!(matches!(
            InputTensor::from_mpxt_bytes(&bytes, true),
            Err(TensorError::ShapeOverflow(_))
        ));
    }

    #[test]
    fn negative_value_in_strict_load() {
        let bytes = file_bytes(&[2], &[1.0, -1.0]);
        assert!(matches!(
            InputTensor::from_mpxt_bytes(&bytes, true),
            Err(TensorError::NegativeValue { index: 1, .. })
        ));
        assert!(InputTensor::from_mpxt_bytes(&bytes, false).is_ok());
    }

    #[test]
    fn strict_and_shift_modes() {
        let z = InputTensor::new(vec![3], vec![0.0; 3]).unwrap();
        assert_eq!(validate_or_shift(z.clone(), NonNegMode::Strict).unwrap(), z);

        let neg = InputTensor::new_unchecked_sign(vec![2], vec![1.0, -1.0]).unwrap();
        assert!(matches!(
            validate_or_shift(neg, NonNegMode::Strict),
            Err(TensorError::NegativeValue { .. })
        ));

        let neg = InputTensor::new_unchecked_sign(vec![2], vec![-1.0, 3.0]).unwrap();
        let shifted = validate_or_shift(neg, NonNegMode::ShiftMin).unwrap();
        assert_eq!(shifted.values(), &[0.0, 4.0]);
    }

    #[test]
    fn offsets_are_row_major() {
        let t = InputTensor::new(vec![2, 3], (0..6).map(|v| v as f32).collect()).unwrap();
        assert_eq!(t.offset(&[1, 2]), 5);
        assert_eq!(t.get(&[1, 0]), 3.0);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.mpxt");
        let t = InputTensor::new(vec![2, 1, 3], vec![0.5, 0.0, 1.25, 7.0, 3.0, 1e-30]).unwrap();
        save_tensor(&p, &t).unwrap();
        let first = fs::read(&p).unwrap();
        let back = load_tensor(&p, true).unwrap();
        assert_eq!(back, t);
        save_tensor(&p, &back).unwrap();
        assert_eq!(fs::read(&p).unwrap(), first);
    }
}
