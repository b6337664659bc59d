//! The `.vkt` tensor framing: magic `VKT1`, dtype code u8, rank u8, rank ×
//! u64 dims, then raw row-major data, all little-endian.

use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::{DType, Element};
use crate::tensor::Tensor;

pub const TENSOR_MAGIC: [u8; 4] = *b"VKT1";

/// A tensor of any storable dtype.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
    U8(Tensor<u8>),
    I64(Tensor<i64>),
}

impl AnyTensor {
    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
            AnyTensor::U8(_) => DType::U8,
            AnyTensor::I64(_) => DType::I64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
            AnyTensor::U8(t) => t.shape(),
            AnyTensor::I64(t) => t.shape(),
        }
    }

    /// The tensor, if it holds `E`.
    pub fn into_typed<E: TypedTensor>(self) -> Result<Tensor<E>> {
        let found = self.dtype().name();
        E::extract(self).ok_or(Error::DtypeMismatch {
            expected: E::DTYPE.name(),
            found,
        })
    }
}

/// Element types that can be pulled out of an [`AnyTensor`].
pub trait TypedTensor: Element {
    fn extract(t: AnyTensor) -> Option<Tensor<Self>>;
}

macro_rules! typed {
    ($t:ty, $v:ident) => {
        impl TypedTensor for $t {
            fn extract(t: AnyTensor) -> Option<Tensor<Self>> {
                match t {
                    AnyTensor::$v(x) => Some(x),
                    _ => None,
                }
            }
        }
        impl From<Tensor<$t>> for AnyTensor {
            fn from(t: Tensor<$t>) -> Self {
                AnyTensor::$v(t)
            }
        }
    };
}

typed!(f32, F32);
typed!(f64, F64);
typed!(u8, U8);
typed!(i64, I64);

pub fn encode_tensor<E: Element>(t: &Tensor<E>, out: &mut Vec<u8>) -> Result<()> {
    let rank = u8::try_from(t.rank()).map_err(|_| Error::InvalidArgument(format!("rank {} exceeds 255", t.rank())))?;
    out.extend_from_slice(&TENSOR_MAGIC);
    out.push(E::DTYPE.code());
    out.push(rank);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out.reserve(t.numel() * E::DTYPE.size());
    for &v in t.data() {
        v.write_le(out);
    }
    Ok(())
}

fn take<'a>(bytes: &'a [u8], at: &mut usize, n: usize, what: &str) -> Result<&'a [u8]> {
    let end = at.checked_add(n).filter(|&e| e <= bytes.len()).ok_or_else(|| {
        Error::Truncated(format!("{what}: needed {n} bytes at offset {at}, {} available", bytes.len() - *at))
    })?;
    let s = &bytes[*at..end];
    *at = end;
    Ok(s)
}

fn decode_typed<E: Element>(shape: Vec<usize>, raw: &[u8]) -> Result<Tensor<E>> {
    let size = E::DTYPE.size();
    let data = raw.chunks_exact(size).map(E::read_le).collect();
    Tensor::new(shape, data)
}

/// Decodes one framed tensor from the front of `bytes`; returns it and the
/// number of bytes consumed.
pub fn decode_tensor(bytes: &[u8]) -> Result<(AnyTensor, usize)> {
    let mut at = 0;
    let magic = take(bytes, &mut at, 4, "magic")?;
    if magic != TENSOR_MAGIC {
        let mut found = [0u8; 4];
        found.copy_from_slice(magic);
        return Err(Error::BadMagic { expected: TENSOR_MAGIC, found });
    }
    let head = take(bytes, &mut at, 2, "header")?;
    let dtype = DType::from_code(head[0]).ok_or(Error::UnknownDtype(head[0]))?;
    let rank = head[1] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let d = u64::from_le_bytes(take(bytes, &mut at, 8, "dims")?.try_into().expect("8 bytes"));
        shape.push(usize::try_from(d).map_err(|_| Error::InvalidArgument(format!("dimension {d} too large")))?);
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .and_then(|n| n.checked_mul(dtype.size()))
        .ok_or_else(|| Error::InvalidArgument(format!("shape {shape:?} overflows")))?;
    let raw = take(bytes, &mut at, numel, "data")?;
    let t = match dtype {
        DType::F32 => AnyTensor::F32(decode_typed(shape, raw)?),
        DType::F64 => AnyTensor::F64(decode_typed(shape, raw)?),
        DType::U8 => AnyTensor::U8(decode_typed(shape, raw)?),
        DType::I64 => AnyTensor::I64(decode_typed(shape, raw)?),
    };
    Ok((t, at))
}

pub fn write_tensor<E: Element>(path: impl AsRef<Path>, t: &Tensor<E>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    encode_tensor(t, &mut buf)?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Reads a whole `.vkt` file; trailing bytes are an error.
pub fn read_tensor(path: impl AsRef<Path>) -> Result<AnyTensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (t, used) = decode_tensor(&bytes)?;
    if used != bytes.len() {
        return Err(Error::InvalidArgument(format!(
            "{}: {} trailing bytes after tensor",
            path.display(),
            bytes.len() - used
        )));
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_layout() {
        let mut buf = Vec::new();
        encode_tensor(&Tensor::scalar(3.5f64), &mut buf).unwrap();
        assert_eq!(buf.len(), 4 + 1 + 1 + 8);
        assert_eq!(&buf[..6], b"VKT1\x01\x00");
        assert_eq!(&buf[6..], &3.5f64.to_le_bytes());
        let (back, used) = decode_tensor(&buf).unwrap();
        assert_eq!(used, buf.len());
        assert_eq!(back, AnyTensor::F64(Tensor::scalar(3.5)));
    }

    #[test]
    fn header_counts_dims() {
        let mut buf = Vec::new();
        encode_tensor(&Tensor::full(vec![2, 3], 0u8), &mut buf).unwrap();
        assert_eq!(buf.len(), 6 + 16 + 6);
        assert_eq!(buf[4], 2);
        assert_eq!(buf[5], 2);
    }

    #[test]
    fn distinct_errors() {
        let mut buf = Vec::new();
        encode_tensor(&Tensor::from_fn(vec![4], |i| i as i64), &mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(decode_tensor(&bad), Err(Error::BadMagic { .. })));
        let mut bad = buf.clone();
        bad[4] = 9;
        assert!(matches!(decode_tensor(&bad), Err(Error::UnknownDtype(9))));
        assert!(matches!(decode_tensor(&buf[..buf.len() - 1]), Err(Error::Truncated(_))));
        assert!(matches!(decode_tensor(&buf[..2]), Err(Error::Truncated(_))));
    }

    #[test]
    fn typed_extraction() {
        let t = AnyTensor::from(Tensor::from_fn(vec![2], |i| i as f32));
        assert!(t.clone().into_typed::<f32>().is_ok());
        assert!(matches!(t.into_typed::<f64>(), Err(Error::DtypeMismatch { .. })));
    }
}
