//! IDX binary files (the MNIST distribution format).
//!
//! Layout: big-endian `u32` magic (`0x00000803` for `u8` rank-3 image arrays,
//! `0x00000801` for `u8` rank-1 label arrays), one big-endian `u32` per
//! dimension, then the raw bytes. Gzip-compressed files are detected by their
//! magic and inflated transparently.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;

use crate::error::{Error, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out).map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    let word = bytes.get(at..at + 4).ok_or_else(|| Error::Truncated {
        path: path.display().to_string(),
        expected: at + 4,
        found: bytes.len(),
    })?;
    Ok(u32::from_be_bytes(word.try_into().expect("4 bytes")))
}

fn check_magic(bytes: &[u8], expected: u32, path: &Path) -> Result<()> {
    let found = be_u32(bytes, 0, path)?;
    if found != expected {
        return Err(Error::BadMagic { path: path.display().to_string(), expected, found });
    }
    Ok(())
}

fn payload<'a>(bytes: &'a [u8], header: usize, len: usize, path: &Path) -> Result<&'a [u8]> {
    let expected = header + len;
    if bytes.len() < expected {
        return Err(Error::Truncated { path: path.display().to_string(), expected, found: bytes.len() });
    }
    Ok(&bytes[header..expected])
}

pub fn parse_images(bytes: &[u8], path: &Path) -> Result<IdxImages> {
    check_magic(bytes, IMAGES_MAGIC, path)?;
    let count = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)? as usize;
    let cols = be_u32(bytes, 12, path)? as usize;
    let pixels = payload(bytes, 16, count * rows * cols, path)?.to_vec();
    Ok(IdxImages { count, rows, cols, pixels })
}

pub fn parse_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    check_magic(bytes, LABELS_MAGIC, path)?;
    let count = be_u32(bytes, 4, path)? as usize;
    Ok(payload(bytes, 8, count, path)?.to_vec())
}

pub fn read_images(path: impl AsRef<Path>) -> Result<IdxImages> {
    let path = path.as_ref();
    parse_images(&read_bytes(path)?, path)
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    let path = path.as_ref();
    parse_labels(&read_bytes(path)?, path)
}

pub fn encode_images(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    for word in [IMAGES_MAGIC, images.count as u32, images.rows as u32, images.cols as u32] {
        out.extend_from_slice(&word.to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    out
}

pub fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

pub fn write_file(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_level_round_trip() {
        let images = IdxImages { count: 2, rows: 2, cols: 3, pixels: vec![0, 1, 2, 3, 4, 5, 250, 251, 252, 253, 254, 255] };
        let bytes = encode_images(&images);
        assert_eq!(&bytes[..4], &[0, 0, 8, 3]);
        assert_eq!(parse_images(&bytes, Path::new("mem")).unwrap(), images);
        let labels = vec![7, 3];
        assert_eq!(parse_labels(&encode_labels(&labels), Path::new("mem")).unwrap(), labels);
    }

    #[test]
    fn wrong_magic_is_named() {
        let bytes = encode_images(&IdxImages { count: 0, rows: 1, cols: 1, pixels: vec![] });
        let err = parse_labels(&bytes, Path::new("labels.idx")).unwrap_err();
        assert!(matches!(err, Error::BadMagic { found: 0x803, expected: 0x801, .. }));
        assert!(err.to_string().contains("0x00000803"), "{err}");
    }

    #[test]
    fn truncation_is_reported() {
        let mut bytes = encode_labels(&[1, 2, 3]);
        bytes.pop();
        assert!(matches!(parse_labels(&bytes, Path::new("x")), Err(Error::Truncated { expected: 11, found: 10, .. })));
        assert!(matches!(parse_images(&[0, 0, 8], Path::new("x")), Err(Error::Truncated { .. })));
    }
}
