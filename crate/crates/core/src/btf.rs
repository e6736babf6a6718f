//! `BTF1` tensor files: magic `BTF1`, `u32` LE rank, rank × `u32` LE extents,
//! then the `f32` LE payload in row-major order.

use std::fs;
use std::path::Path;

use crate::error::{BevError, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"BTF1";

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.ndim() + 4 * t.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8], origin: &Path) -> Result<Tensor> {
    let bad = |msg: &str| BevError::format(origin, msg);
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(bad("missing BTF1 magic"));
    }
    let word = |i: usize| -> Result<u32> {
        bytes
            .get(i..i + 4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
            .ok_or_else(|| bad("truncated header"))
    };
    let ndim = word(4)? as usize;
    let mut shape = Vec::with_capacity(ndim);
    for k in 0..ndim {
        shape.push(word(8 + 4 * k)? as usize);
    }
    let start = 8 + 4 * ndim;
    let n: usize = shape.iter().product();
    let payload = &bytes[start.min(bytes.len())..];
    if ndim == 0 || payload.len() != 4 * n {
        return Err(bad(&format!(
            "shape {shape:?} needs {} payload bytes, found {}",
            4 * n,
            payload.len()
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Tensor::new(shape, data).map_err(|e| bad(&e.to_string()))
}

pub fn read(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| BevError::io(path, e))?;
    decode(&bytes, path)
}

pub fn write(path: &Path, t: &Tensor) -> Result<()> {
    crate::io::write_atomic(path, &encode(t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new(vec![1, 2], vec![1.0, -2.5]).unwrap();
        let b = encode(&t);
        assert_eq!(&b[..4], b"BTF1");
        assert_eq!(&b[4..8], &2u32.to_le_bytes());
        assert_eq!(&b[8..12], &1u32.to_le_bytes());
        assert_eq!(&b[12..16], &2u32.to_le_bytes());
        assert_eq!(&b[16..20], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 24);
    }

    #[test]
    fn rejects_corrupt_input() {
        let p = Path::new("x.btf");
        assert!(decode(b"BTF0\x01\0\0\0", p).is_err());
        let mut b = encode(&Tensor::zeros(&[3]));
        b.pop();
        assert!(decode(&b, p).is_err());
    }

    proptest! {
        #[test]
        fn round_trip(shape in prop::collection::vec(1usize..5, 1..4), seed in any::<u32>()) {
            let t = Tensor::from_fn(&shape, |i| (i as f32 + seed as f32).sin());
            let back = decode(&encode(&t), Path::new("mem")).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}
