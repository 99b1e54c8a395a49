//! DLM1 matrix files and weight checkpoints.
//!
//! Layout: the ASCII line `DLM1 <rows> <cols>\n` followed by `rows * cols`
//! little-endian `f64` values in row-major order.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::model::NetworkWeights;

const MAGIC: &str = "DLM1";

pub fn encode_dlm(m: &Array2<f64>) -> Vec<u8> {
    let (rows, cols) = m.dim();
    let mut out = format!("{MAGIC} {rows} {cols}\n").into_bytes();
    out.reserve(rows * cols * 8);
    for v in m.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_dlm(bytes: &[u8], path: &Path) -> Result<Array2<f64>> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC.as_bytes() {
        return Err(Error::BadMagic {
            path: path.into(),
            detail: "expected DLM1".into(),
        });
    }
    let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| Error::Truncated {
        path: path.into(),
        detail: "header has no newline".into(),
    })?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| Error::MalformedHeader {
        path: path.into(),
        detail: "header is not ASCII".into(),
    })?;
    let fields: Vec<&str> = header.split(' ').collect();
    let dims = match fields.as_slice() {
        [_, r, c] => r.parse::<usize>().ok().zip(c.parse::<usize>().ok()),
        _ => None,
    };
    let (rows, cols) = dims.ok_or_else(|| Error::MalformedHeader {
        path: path.into(),
        detail: format!("{header:?}"),
    })?;
    let payload = &bytes[nl + 1..];
    let need = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| Error::MalformedHeader {
            path: path.into(),
            detail: "dimensions overflow".into(),
        })?;
    if payload.len() < need {
        return Err(Error::Truncated {
            path: path.into(),
            detail: format!("need {need} payload bytes, found {}", payload.len()),
        });
    }
    let values: Vec<f64> = payload[..need]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Array2::from_shape_vec((rows, cols), values)
        .map_err(|e| Error::DimensionMismatch(e.to_string()))
}

pub fn write_dlm(path: impl AsRef<Path>, m: &Array2<f64>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_dlm(m)).map_err(|e| Error::io(path, e))
}

pub fn read_dlm(path: impl AsRef<Path>) -> Result<Array2<f64>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_dlm(&bytes, path)
}

/// File names used inside a checkpoint directory.
pub struct CheckpointPaths {
    pub f: PathBuf,
    pub b: PathBuf,
    pub h: PathBuf,
    pub s: PathBuf,
}

impl CheckpointPaths {
    pub fn new(dir: &Path) -> Self {
        Self {
            f: dir.join("F.dlm"),
            b: dir.join("B.dlm"),
            h: dir.join("H.dlm"),
            s: dir.join("s.dlm"),
        }
    }
}

/// Writes `F`, `B`, `H` and `s` (as a `1 x N` matrix) into `dir`.
pub fn save_weights(dir: impl AsRef<Path>, w: &NetworkWeights) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let p = CheckpointPaths::new(dir);
    write_dlm(&p.f, &w.f)?;
    write_dlm(&p.b, &w.b)?;
    write_dlm(&p.h, &w.h)?;
    let s = w.s.clone().into_shape_with_order((1, w.s.len())).expect("row vector");
    write_dlm(&p.s, &s)
}

/// Reads a checkpoint directory. A missing `s.dlm` defaults to `diag(H)`.
pub fn load_weights(dir: impl AsRef<Path>, lambda1: f64, gamma: f64) -> Result<NetworkWeights> {
    let p = CheckpointPaths::new(dir.as_ref());
    let f = read_dlm(&p.f)?;
    let b = read_dlm(&p.b)?;
    let h = read_dlm(&p.h)?;
    let s = if p.s.exists() {
        Array1::from_iter(read_dlm(&p.s)?.iter().copied())
    } else {
        h.diag().to_owned()
    };
    Ok(NetworkWeights {
        f,
        b,
        h,
        s,
        lambda1,
        gamma,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn header_is_ascii_then_le_payload() {
        let bytes = encode_dlm(&array![[1.0, 2.0]]);
        assert!(bytes.starts_with(b"DLM1 1 2\n"));
        assert_eq!(&bytes[9..17], &1.0f64.to_le_bytes());
        assert_eq!(bytes.len(), 9 + 16);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let mut bytes = encode_dlm(&array![[1.0, 2.0], [3.0, 4.0]]);
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(
            decode_dlm(&bytes, Path::new("x")),
            Err(Error::Truncated { .. })
        ));
        assert!(matches!(
            decode_dlm(b"PST1 1 1\n", Path::new("x")),
            Err(Error::BadMagic { .. })
        ));
    }

    proptest! {
        #[test]
        fn dlm_round_trip_is_bit_exact(rows in 1usize..6, cols in 1usize..6, seed in any::<u64>()) {
            let vals: Vec<f64> = (0..rows * cols)
                .map(|i| f64::from_bits(seed.wrapping_mul(6364136223846793005).wrapping_add(i as u64) >> 2))
                .collect();
            let m = Array2::from_shape_vec((rows, cols), vals).unwrap();
            let back = decode_dlm(&encode_dlm(&m), Path::new("mem")).unwrap();
            prop_assert_eq!(back.dim(), m.dim());
            for (a, b) in back.iter().zip(m.iter()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
