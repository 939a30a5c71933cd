//! Little-endian 32-bit float blobs and atomic file writes.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use crate::Real;

/// Writes `bytes` to a sibling temporary file and renames it into place.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = Path::new(&tmp);
    {
        let mut f = fs::File::create(tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(tmp, path)
}

pub(crate) fn encode_f32(values: &[Real]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 4);
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub(crate) fn decode_f32(bytes: &[u8]) -> io::Result<Vec<Real>> {
    if bytes.len() % 4 != 0 {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "blob length is not a multiple of 4"));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as Real)
        .collect())
}

pub(crate) fn write_f32_blob(path: &Path, values: &[Real]) -> io::Result<()> {
    write_atomic(path, &encode_f32(values))
}

pub(crate) fn read_f32_blob(path: &Path, expected: usize) -> io::Result<Vec<Real>> {
    let values = decode_f32(&fs::read(path)?)?;
    if values.len() != expected {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("{}: expected {expected} floats, found {}", path.display(), values.len()),
        ));
    }
    Ok(values)
}

/// Rounds to the nearest value representable in a 32-bit blob.
pub(crate) fn quantize(v: Real) -> Real {
    v as f32 as Real
}
