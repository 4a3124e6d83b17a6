//! IDX files (the MNIST distribution format).
//!
//! Big-endian header: magic `0x00000803` (u8 images, rank 3) or
//! `0x00000801` (u8 labels, rank 1), followed by one u32 per dimension and
//! the raw bytes. Files ending in `.gz` are decompressed on load.

use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;

use super::{DataError, Dataset, Result};
use crate::tensor::Tensor;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| DataError::Idx {
            offset,
            reason: format!("truncated {what}"),
        })
}

fn parse(bytes: &[u8], magic: u32, rank: usize) -> Result<(Vec<usize>, &[u8])> {
    let found = be_u32(bytes, 0, "magic")?;
    if found != magic {
        return Err(DataError::Idx {
            offset: 0,
            reason: format!("bad magic {found:#010x}, expected {magic:#010x}"),
        });
    }
    let mut dims = Vec::with_capacity(rank);
    for r in 0..rank {
        dims.push(be_u32(bytes, 4 + 4 * r, "dimension")? as usize);
    }
    let start = 4 + 4 * rank;
    let need: usize = dims.iter().product();
    let have = bytes.len() - start;
    if have < need {
        return Err(DataError::Idx {
            offset: bytes.len(),
            reason: format!("truncated payload: expected {need} bytes after header, found {have}"),
        });
    }
    Ok((dims, &bytes[start..start + need]))
}

/// Returns `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    let (dims, payload) = parse(bytes, IMAGES_MAGIC, 3)?;
    Ok((dims[0], dims[1], dims[2], payload.to_vec()))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let (_, payload) = parse(bytes, LABELS_MAGIC, 1)?;
    Ok(payload.to_vec())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let io_err = |source| DataError::Io {
        path: path.display().to_string(),
        source,
    };
    let raw = std::fs::read(path).map_err(io_err)?;
    if path.extension().is_some_and(|e| e == "gz") {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(io_err)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Loads an image/label file pair; pixels are scaled to `[0, 1]`.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (n, rows, cols, pixels) = parse_idx_images(&read_file(images_path.as_ref())?)?;
    let labels = parse_idx_labels(&read_file(labels_path.as_ref())?)?;
    if labels.len() != n {
        return Err(DataError::CountMismatch {
            images: n,
            labels: labels.len(),
        });
    }
    let features = Tensor::matrix(
        n,
        rows * cols,
        pixels.iter().map(|&p| p as f64 / 255.0).collect(),
    )?;
    let labels: Vec<usize> = labels.into_iter().map(usize::from).collect();
    let num_classes = labels.iter().max().map_or(2, |&m| (m + 1).max(2));
    Dataset::new(features, labels, num_classes)
}

pub fn write_idx_images<W: Write>(
    mut w: W,
    rows: usize,
    cols: usize,
    pixels: &[u8],
) -> std::io::Result<()> {
    let n = pixels.len() / (rows * cols);
    w.write_all(&IMAGES_MAGIC.to_be_bytes())?;
    for d in [n, rows, cols] {
        w.write_all(&(d as u32).to_be_bytes())?;
    }
    w.write_all(pixels)
}

pub fn write_idx_labels<W: Write>(mut w: W, labels: &[u8]) -> std::io::Result<()> {
    w.write_all(&LABELS_MAGIC.to_be_bytes())?;
    w.write_all(&(labels.len() as u32).to_be_bytes())?;
    w.write_all(labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bad_magic() {
        let mut buf = Vec::new();
        write_idx_labels(&mut buf, &[1, 2]).unwrap();
        let err = parse_idx_images(&buf).unwrap_err();
        assert!(matches!(err, DataError::Idx { offset: 0, .. }), "{err}");
    }

    #[test]
    fn truncated_payload_names_offset() {
        let mut buf = Vec::new();
        write_idx_images(&mut buf, 2, 2, &[0; 8]).unwrap();
        buf.truncate(buf.len() - 1);
        match parse_idx_images(&buf).unwrap_err() {
            DataError::Idx { offset, reason } => {
                assert_eq!(offset, 16 + 7);
                assert!(reason.contains("truncated"));
            }
            other => panic!("{other}"),
        }
        assert!(matches!(
            parse_idx_images(&buf[..6]),
            Err(DataError::Idx { offset: 4, .. })
        ));
    }
}
