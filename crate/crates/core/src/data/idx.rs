//! IDX files (the MNIST container), optionally gzip-compressed.

use std::fs;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;

use super::Dataset;
use crate::error::{Error, Result};
use crate::nn::Targets;
use crate::tensor::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// Raw bytes of `path`, transparently gunzipped when it starts with the
/// gzip signature.
pub fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::parse(offset as u64, "truncated IDX header"))
}

/// Returns `(count, rows, cols, pixels)` with pixels scaled to `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<f64>)> {
    let magic = be_u32(bytes, 0)?;
    if magic != IMAGES_MAGIC {
        return Err(Error::parse(0, format!("bad image magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let want = n
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| Error::parse(4, "image dimensions overflow"))?;
    let body = &bytes[16..];
    if body.len() < want {
        return Err(Error::parse(
            16 + body.len() as u64,
            format!("truncated: expected {want} pixel bytes"),
        ));
    }
    if body.len() > want {
        return Err(Error::parse(
            16 + want as u64,
            "trailing bytes after pixel data",
        ));
    }
    Ok((
        n,
        rows,
        cols,
        body.iter().map(|&p| p as f64 / 255.0).collect(),
    ))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0)?;
    if magic != LABELS_MAGIC {
        return Err(Error::parse(0, format!("bad label magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(Error::parse(
            8 + body.len() as u64,
            format!("truncated: expected {n} labels"),
        ));
    }
    if body.len() > n {
        return Err(Error::parse(8 + n as u64, "trailing bytes after labels"));
    }
    Ok(body.to_vec())
}

/// Images become `[n, rows·cols]`; reshape for convolutional models.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let (n, rows, cols, pixels) = parse_idx_images(&read_maybe_gz(images)?)?;
    let labels = parse_idx_labels(&read_maybe_gz(labels)?)?;
    if labels.len() != n {
        return Err(Error::parse(
            4,
            format!("count mismatch: {n} images but {} labels", labels.len()),
        ));
    }
    let y: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    let classes = y.iter().max().map_or(0, |m| m + 1);
    Dataset::new(
        Tensor::new(vec![n, rows * cols], pixels)?,
        Targets::Classes(y),
        classes,
    )
}

pub fn encode_idx_images(n: usize, rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn fixture() -> Vec<u8> {
        encode_idx_images(
            4,
            2,
            2,
            &[0, 255, 51, 102, 1, 2, 3, 4, 255, 255, 0, 0, 10, 20, 30, 40],
        )
    }

    #[test]
    fn four_image_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img");
        let lab = dir.path().join("lab.gz");
        fs::write(&img, fixture()).unwrap();
        let mut gz = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::default());
        gz.write_all(&encode_idx_labels(&[3, 1, 4, 1])).unwrap();
        fs::write(&lab, gz.finish().unwrap()).unwrap();
        let ds = load_idx(&img, &lab).unwrap();
        assert_eq!(ds.x.shape(), &[4, 4]);
        assert_eq!(&ds.x.data()[..4], &[0.0, 1.0, 0.2, 0.4]);
        assert_eq!(ds.x.data()[8], 1.0);
        assert_eq!(ds.y, Targets::Classes(vec![3, 1, 4, 1]));
        assert_eq!(ds.classes, 5);
    }

    #[test]
    fn empty_and_mismatched() {
        assert!(matches!(
            parse_idx_images(&[]),
            Err(Error::Parse { offset: 0, .. })
        ));
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img");
        let lab = dir.path().join("lab");
        fs::write(&img, fixture()).unwrap();
        fs::write(&lab, encode_idx_labels(&[1, 2, 3])).unwrap();
        let err = load_idx(&img, &lab).unwrap_err();
        assert!(err.to_string().contains("count mismatch"), "{err}");
    }

    #[test]
    fn truncation_offset() {
        let mut bytes = fixture();
        bytes.truncate(20);
        match parse_idx_images(&bytes) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 20),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn every_header_byte_corruption_is_rejected() {
        let good = fixture();
        for pos in 0..16 {
            for delta in [1u8, 0x80, 0xff] {
                let mut bad = good.clone();
                bad[pos] = bad[pos].wrapping_add(delta);
                assert!(parse_idx_images(&bad).is_err(), "byte {pos} +{delta}");
            }
        }
        let labels = encode_idx_labels(&[1, 2, 3, 4]);
        for pos in 0..8 {
            let mut bad = labels.clone();
            bad[pos] ^= 0x10;
            assert!(parse_idx_labels(&bad).is_err());
        }
    }
}
