//! EMOF tensor files.
//!
//! Layout, all little-endian:
//!
//! | bytes        | content                         |
//! |--------------|---------------------------------|
//! | 4            | magic `EMOF`                    |
//! | 2            | version (`u16`, currently 1)    |
//! | 1            | rank (`u8`)                     |
//! | 4 × rank     | extents (`u32` each)            |
//! | 4 × numel    | payload (`f32`, row-major)      |

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"EMOF";
pub const VERSION: u16 = 1;

pub fn encode(t: &Tensor) -> Result<Vec<u8>> {
    let rank = u8::try_from(t.shape().len())
        .map_err(|_| Error::Usage(format!("rank {} too large for EMOF", t.shape().len())))?;
    let mut out = Vec::with_capacity(7 + 4 * t.shape().len() + 4 * t.numel());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(rank);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::Usage(format!("extent {d} too large for EMOF")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let bad = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < 7 || &bytes[..4] != MAGIC {
        return Err(bad("missing EMOF magic".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(bad(format!("unsupported EMOF version {version}")));
    }
    let rank = bytes[6] as usize;
    let header = 7 + 4 * rank;
    if rank == 0 || bytes.len() < header {
        return Err(bad(format!("truncated header for rank {rank}")));
    }
    let shape: Vec<usize> = bytes[7..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let numel: usize = shape.iter().product();
    if bytes.len() != header + 4 * numel {
        return Err(bad(format!(
            "payload is {} bytes, shape {shape:?} needs {}",
            bytes.len() - header,
            4 * numel
        )));
    }
    let data = bytes[header..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Tensor::new(shape, data).map_err(|e| bad(e.to_string()))
}

pub fn read(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

pub fn write(path: &Path, t: &Tensor) -> Result<()> {
    crate::data::write_atomic(path, &encode(t)?)
}

/// Round every entry to the nearest `f32`, the precision EMOF stores.
pub fn quantize(t: &Tensor) -> Tensor {
    let data = t.data().iter().map(|&v| v as f32 as f64).collect();
    Tensor::new(t.shape().to_vec(), data).expect("same shape")
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn header_bytes_are_exact() {
        let t = Tensor::matrix(1, 2, vec![1.0, -2.5]).unwrap();
        let bytes = encode(&t).unwrap();
        let expected: Vec<u8> = [
            b"EMOF".to_vec(),
            vec![1, 0],
            vec![2],
            vec![1, 0, 0, 0],
            vec![2, 0, 0, 0],
            1.0f32.to_le_bytes().to_vec(),
            (-2.5f32).to_le_bytes().to_vec(),
        ]
        .concat();
        assert_eq!(bytes, expected);
    }

    #[test]
    fn rejects_corruption() {
        let p = Path::new("x.emof");
        let good = encode(&Tensor::vector(vec![1.0, 2.0])).unwrap();
        assert!(decode(&good[..good.len() - 1], p).is_err());
        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(decode(&bad_magic, p).is_err());
        let mut bad_version = good.clone();
        bad_version[4] = 9;
        assert!(decode(&bad_version, p).is_err());
        let mut trailing = good;
        trailing.push(0);
        assert!(matches!(decode(&trailing, p), Err(Error::Format { .. })));
    }

    proptest! {
        #[test]
        fn f32_values_round_trip_bit_exact(
            rows in 1usize..5,
            cols in 1usize..7,
            raw in proptest::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), 36),
        ) {
            let data: Vec<f64> = raw[..rows * cols].iter().map(|&v| v as f64).collect();
            let t = Tensor::matrix(rows, cols, data).unwrap();
            let back = decode(&encode(&t).unwrap(), Path::new("mem")).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            for (a, b) in back.data().iter().zip(t.data()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
