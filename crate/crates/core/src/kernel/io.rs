//! Gram files: `DESKGRAM`, `u32` rows, `u32` cols, `u8` state tag, the
//! little-endian `f64` values row-major, then the row IDs and the column IDs,
//! one decimal ID per line.

use std::fs;
use std::path::Path;

use super::{GramMatrix, GramState};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 8] = b"DESKGRAM";
const HEADER: usize = 8 + 4 + 4 + 1;

pub fn encode_gram<T: Scalar>(g: &GramMatrix<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER + 8 * g.values().len() + 8 * (g.rows() + g.cols()));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(g.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(g.cols() as u32).to_le_bytes());
    out.push(g.state().tag());
    for v in g.values() {
        out.extend_from_slice(&v.as_f64().to_le_bytes());
    }
    for id in g.row_ids().iter().chain(g.col_ids()) {
        out.extend_from_slice(id.to_string().as_bytes());
        out.push(b'\n');
    }
    out
}

pub fn decode_gram<T: Scalar>(bytes: &[u8], path: &Path) -> Result<GramMatrix<T>> {
    let truncated = |expected: usize| Error::Truncated { path: path.display().to_string(), expected, found: bytes.len() };
    if bytes.len() < HEADER {
        return Err(truncated(HEADER));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::format(path, format!("bad magic {:?}, expected \"DESKGRAM\"", String::from_utf8_lossy(&bytes[..8]))));
    }
    let rows = u32::from_le_bytes(bytes[8..12].try_into().expect("4")) as usize;
    let cols = u32::from_le_bytes(bytes[12..16].try_into().expect("4")) as usize;
    let state = GramState::from_tag(bytes[16]).ok_or_else(|| Error::format(path, format!("unknown state tag {}", bytes[16])))?;
    let end = HEADER + rows * cols * 8;
    let payload = bytes.get(HEADER..end).ok_or_else(|| truncated(end))?;
    let values = payload.chunks_exact(8).map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("8")))).collect();
    let text = std::str::from_utf8(&bytes[end..]).map_err(|_| Error::format(path, "id lists are not text"))?;
    let ids: Vec<u64> = text
        .lines()
        .map(|l| l.trim().parse().map_err(|_| Error::format(path, format!("bad sample id `{l}`"))))
        .collect::<Result<_>>()?;
    if ids.len() != rows + cols {
        return Err(Error::format(path, format!("{} ids listed, expected {}", ids.len(), rows + cols)));
    }
    let col_ids = ids[rows..].to_vec();
    let mut row_ids = ids;
    row_ids.truncate(rows);
    GramMatrix::new(values, row_ids, col_ids, state)
}

pub fn write_gram<T: Scalar>(path: impl AsRef<Path>, g: &GramMatrix<T>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_gram(g)).map_err(|e| Error::io(path, e))
}

pub fn read_gram<T: Scalar>(path: impl AsRef<Path>) -> Result<GramMatrix<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_gram(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bit_exact_round_trip() {
        let values = vec![0.1, -0.0, f64::MIN_POSITIVE, 1.0 / 3.0, 7.5, 2e-300];
        let g = GramMatrix::new(values, vec![10, 42], vec![3, 1, 4], GramState::CrossSymmetrized).unwrap();
        let bytes = encode_gram(&g);
        assert_eq!(&bytes[..8], b"DESKGRAM");
        assert_eq!(bytes[16], 4);
        let back: GramMatrix<f64> = decode_gram(&bytes, Path::new("m")).unwrap();
        assert_eq!(back.row_ids(), g.row_ids());
        assert_eq!(back.col_ids(), g.col_ids());
        assert_eq!(back.state(), g.state());
        let bits = |m: &GramMatrix<f64>| m.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&g));
        assert_eq!(encode_gram(&back), bytes);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let g = GramMatrix::new(vec![1.0], vec![0], vec![0], GramState::Raw).unwrap();
        let mut bytes = encode_gram(&g);
        bytes[0] = b'X';
        assert!(matches!(decode_gram::<f64>(&bytes, Path::new("g")), Err(Error::Format { .. })));
        let bytes = encode_gram(&g);
        assert!(matches!(decode_gram::<f64>(&bytes[..20], Path::new("g")), Err(Error::Truncated { .. })));
        let mut bytes = encode_gram(&g);
        bytes[16] = 9;
        assert!(decode_gram::<f64>(&bytes, Path::new("g")).is_err());
    }
}
