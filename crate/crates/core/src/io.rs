//! Atomic file writes and the `PC3F` point-cloud format (magic `PC3F`,
//! `u32` LE count, then `count` × (x, y, z) `f32` LE).

use std::fs;
use std::path::Path;

use crate::error::{BevError, Result};

/// Writes via a sibling temp file and rename, creating parent directories.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| BevError::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = Path::new(&tmp);
    fs::write(tmp, bytes).map_err(|e| BevError::io(tmp, e))?;
    fs::rename(tmp, path).map_err(|e| BevError::io(path, e))
}

pub fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| BevError::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let s = read_to_string(path)?;
    serde_json::from_str(&s).map_err(|e| BevError::format(path, e.to_string()))
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)
        .map_err(|e| BevError::format(path, e.to_string()))?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

pub const PC3F_MAGIC: &[u8; 4] = b"PC3F";

pub fn encode_cloud(points: &[[f32; 3]]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 12 * points.len());
    out.extend_from_slice(PC3F_MAGIC);
    out.extend_from_slice(&(points.len() as u32).to_le_bytes());
    for p in points {
        for v in p {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_cloud(bytes: &[u8], origin: &Path) -> Result<Vec<[f32; 3]>> {
    if bytes.len() < 8 || &bytes[..4] != PC3F_MAGIC {
        return Err(BevError::format(origin, "missing PC3F magic"));
    }
    let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let body = &bytes[8..];
    if body.len() != 12 * n {
        return Err(BevError::format(
            origin,
            format!("{n} points need {} bytes, found {}", 12 * n, body.len()),
        ));
    }
    Ok(body
        .chunks_exact(12)
        .map(|c| {
            let f = |i: usize| f32::from_le_bytes(c[i..i + 4].try_into().unwrap());
            [f(0), f(4), f(8)]
        })
        .collect())
}

pub fn read_cloud(path: &Path) -> Result<Vec<[f32; 3]>> {
    let bytes = fs::read(path).map_err(|e| BevError::io(path, e))?;
    decode_cloud(&bytes, path)
}

pub fn write_cloud(path: &Path, points: &[[f32; 3]]) -> Result<()> {
    write_atomic(path, &encode_cloud(points))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cloud_round_trip_and_corruption() {
        let pts = vec![[1.0, 2.0, 3.0], [-4.5, 0.0, 1e-3]];
        let b = encode_cloud(&pts);
        assert_eq!(&b[..4], b"PC3F");
        assert_eq!(decode_cloud(&b, Path::new("m")).unwrap(), pts);
        assert!(decode_cloud(&b[..b.len() - 1], Path::new("m")).is_err());
    }

    #[test]
    fn atomic_write_leaves_no_temp() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/a.bin");
        write_atomic(&p, b"abc").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"abc");
        assert_eq!(fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
    }
}
