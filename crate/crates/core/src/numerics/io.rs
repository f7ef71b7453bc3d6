//! Binary tensor serialization.
//!
//! Layout: magic `MPET`, version byte, dtype byte (0 = f32, 1 = f64), rank
//! byte, then `rank` little-endian u64 dimensions, then the row-major payload
//! in little-endian scalars. The format is intentionally minimal: fixed
//! header, no alignment padding, no compression, so files are byte-identical
//! whenever the tensor contents are.

use std::io::{Read as _, Write as _};
use std::path::Path;

use super::tensor::{DType, Scalar, Tensor};
use super::{NumericsError, Result};

const MAGIC: &[u8; 4] = b"MPET";
const VERSION: u8 = 1;

fn format_err(msg: impl Into<String>) -> NumericsError {
    NumericsError::Format(msg.into())
}

/// Serialize a tensor to the binary format.
pub fn tensor_to_bytes<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(7 + 8 * t.rank() + t.numel() * T::byte_width());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(T::DTYPE.code());
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes_vec());
    }
    out
}

/// Deserialize a tensor, checking magic, version, dtype, and payload length.
pub fn tensor_from_bytes<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    if bytes.len() < 7 {
        return Err(format_err("tensor file truncated before header"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(format_err("bad magic; not a tensor file"));
    }
    if bytes[4] != VERSION {
        return Err(format_err(format!("unsupported version {}", bytes[4])));
    }
    let dtype = DType::from_code(bytes[5])
        .ok_or_else(|| format_err(format!("unknown dtype code {}", bytes[5])))?;
    if dtype != T::DTYPE {
        return Err(format_err(format!(
            "dtype mismatch: file holds {dtype:?}, caller expects {:?}",
            T::DTYPE
        )));
    }
    let rank = bytes[6] as usize;
    let dims_end = 7 + 8 * rank;
    if bytes.len() < dims_end {
        return Err(format_err("tensor file truncated in dimension list"));
    }
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        let start = 7 + 8 * i;
        let mut buf = [0u8; 8];
        buf.copy_from_slice(&bytes[start..start + 8]);
        shape.push(u64::from_le_bytes(buf) as usize);
    }
    let numel: usize = shape.iter().product();
    let width = T::byte_width();
    let expected = dims_end + numel * width;
    if bytes.len() != expected {
        return Err(format_err(format!(
            "payload length {} does not match shape {:?} (expected {} bytes)",
            bytes.len() - dims_end,
            shape,
            numel * width
        )));
    }
    let mut data = Vec::with_capacity(numel);
    for i in 0..numel {
        let start = dims_end + i * width;
        data.push(T::from_le_slice(&bytes[start..start + width]));
    }
    Ok(Tensor::new(shape, data))
}

/// Write a tensor to a file.
pub fn save_tensor<T: Scalar>(path: &Path, t: &Tensor<T>) -> Result<()> {
    let bytes = tensor_to_bytes(t);
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

/// Read a tensor from a file.
pub fn load_tensor<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let mut f = std::fs::File::open(path)?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes)?;
    tensor_from_bytes(&bytes)
}

/// Peek at the dtype of a serialized tensor without reading the payload.
pub fn peek_dtype(path: &Path) -> Result<DType> {
    let mut f = std::fs::File::open(path)?;
    let mut head = [0u8; 6];
    f.read_exact(&mut head)?;
    if &head[0..4] != MAGIC {
        return Err(format_err("bad magic; not a tensor file"));
    }
    DType::from_code(head[5]).ok_or_else(|| format_err(format!("unknown dtype code {}", head[5])))
}
