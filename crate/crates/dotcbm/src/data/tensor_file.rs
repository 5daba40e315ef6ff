//! Binary tensor file format (`.dott`).
//!
//! Layout, all little-endian:
//!
//! ```text
//! offset  size          field
//! 0       4             magic "DOTT"
//! 4       4             version (u32, currently 1)
//! 8       4             rank (u32, 1..=4)
//! 12      8 * rank      dims (u64 each)
//! ...     4 * prod(dims) payload (f32, row-major)
//! ```
//!
//! Round trips are bit-exact: `read(write(x)) == x` for every payload,
//! including NaN bit patterns.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"DOTT";
pub const VERSION: u32 = 1;
pub const MAX_RANK: u32 = 4;

fn format_err(path: &Path, offset: u64, msg: impl Into<String>) -> Error {
    Error::TensorFormat {
        path: path.to_path_buf(),
        offset,
        msg: msg.into(),
    }
}

/// Serialize a tensor to `path`. `values.len()` must equal the product of `dims`.
pub fn write_tensor(path: impl AsRef<Path>, dims: &[u64], values: &[f32]) -> Result<()> {
    let path = path.as_ref();
    let rank = dims.len() as u32;
    if rank == 0 || rank > MAX_RANK {
        return Err(format_err(path, 8, format!("rank {rank} out of range 1..=4")));
    }
    let expected: u64 = dims.iter().product();
    if expected != values.len() as u64 {
        return Err(Error::Shape(format!(
            "dims {:?} imply {} values, got {}",
            dims,
            expected,
            values.len()
        )));
    }

    let mut buf = Vec::with_capacity(16 + dims.len() * 8 + values.len() * 4);
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&rank.to_le_bytes());
    for &d in dims {
        buf.extend_from_slice(&d.to_le_bytes());
    }
    for &v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }

    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Deserialize a tensor from `path`, returning `(dims, values)`.
pub fn read_tensor(path: impl AsRef<Path>) -> Result<(Vec<u64>, Vec<f32>)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_tensor(path, &bytes)
}

fn parse_tensor(path: &Path, bytes: &[u8]) -> Result<(Vec<u64>, Vec<f32>)> {
    let take = |offset: usize, len: usize, what: &str| -> Result<&[u8]> {
        bytes.get(offset..offset + len).ok_or_else(|| {
            format_err(
                path,
                bytes.len() as u64,
                format!("truncated while reading {what} (need {} bytes)", offset + len),
            )
        })
    };

    let magic = take(0, 4, "magic")?;
    if magic != MAGIC {
        return Err(format_err(path, 0, format!("bad magic {:?}", magic)));
    }
    let version = u32::from_le_bytes(take(4, 4, "version")?.try_into().unwrap());
    if version != VERSION {
        return Err(format_err(path, 4, format!("unsupported version {version}")));
    }
    let rank = u32::from_le_bytes(take(8, 4, "rank")?.try_into().unwrap());
    if rank == 0 || rank > MAX_RANK {
        return Err(format_err(path, 8, format!("rank {rank} out of range 1..=4")));
    }

    let mut dims = Vec::with_capacity(rank as usize);
    for i in 0..rank as usize {
        let off = 12 + i * 8;
        dims.push(u64::from_le_bytes(take(off, 8, "dims")?.try_into().unwrap()));
    }
    let payload_off = 12 + rank as usize * 8;
    let count = dims.iter().product::<u64>() as usize;
    let payload = take(payload_off, count * 4, "payload")?;
    if bytes.len() != payload_off + count * 4 {
        return Err(format_err(
            path,
            (payload_off + count * 4) as u64,
            format!("{} trailing bytes after payload", bytes.len() - payload_off - count * 4),
        ));
    }

    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((dims, values))
}
