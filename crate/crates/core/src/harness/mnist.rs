//! Reader for the big-endian IDX files the MNIST corpus ships in.

use std::fs;
use std::path::Path;

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::nn::Matrix;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;
const CLASSES: usize = 10;

fn format_error(offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        message: message.into(),
    }
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| format_error(offset, "truncated header"))
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<()> {
    let magic = read_u32(bytes, 0)?;
    if magic != expected {
        return Err(format_error(0, format!("magic {magic:#010x}, expected {expected:#010x}")));
    }
    Ok(())
}

/// Parses an image file into an `n x (rows * cols)` matrix scaled to `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Matrix> {
    check_magic(bytes, IMAGES_MAGIC)?;
    let n = read_u32(bytes, 4)? as usize;
    let rows = read_u32(bytes, 8)? as usize;
    let cols = read_u32(bytes, 12)? as usize;
    let dim = rows * cols;
    let body = &bytes[16..];
    let expected = n * dim;
    if body.len() < expected {
        return Err(format_error(
            16 + body.len(),
            format!("truncated pixel data: {} of {expected} bytes", body.len()),
        ));
    }
    if body.len() > expected {
        return Err(format_error(16 + expected, "trailing bytes after pixel data"));
    }
    let data = body.iter().map(|&p| f64::from(p) / 255.0).collect();
    Matrix::from_vec(n, dim, data)
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    check_magic(bytes, LABELS_MAGIC)?;
    let n = read_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(format_error(8 + body.len(), format!("truncated labels: {} of {n}", body.len())));
    }
    if body.len() > n {
        return Err(format_error(8 + n, "trailing bytes after labels"));
    }
    body.iter()
        .enumerate()
        .map(|(i, &y)| {
            if (y as usize) < CLASSES {
                Ok(y as usize)
            } else {
                Err(format_error(8 + i, format!("label {y} outside 0..{CLASSES}")))
            }
        })
        .collect()
}

fn load_pair(dir: &Path, images: &str, labels: &str) -> Result<Dataset> {
    let read = |name: &str| {
        fs::read(dir.join(name)).map_err(|e| Error::Input(format!("{}: {e}", dir.join(name).display())))
    };
    let x = parse_idx_images(&read(images)?)?;
    let y = parse_idx_labels(&read(labels)?)?;
    if x.rows() != y.len() {
        return Err(format_error(4, format!("{} images but {} labels", x.rows(), y.len())));
    }
    Dataset::new(x, y, CLASSES)
}

/// Loads `(train, test)` from a directory holding the four standard files.
pub fn load_mnist(dir: impl AsRef<Path>) -> Result<(Dataset, Dataset)> {
    let dir = dir.as_ref();
    let train = load_pair(dir, "train-images-idx3-ubyte", "train-labels-idx1-ubyte")?;
    let test = load_pair(dir, "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")?;
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn images(n: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
        let mut out = Vec::new();
        for v in [IMAGES_MAGIC, n, rows, cols] {
            out.extend_from_slice(&v.to_be_bytes());
        }
        out.extend_from_slice(pixels);
        out
    }

    fn labels(ys: &[u8]) -> Vec<u8> {
        let mut out = LABELS_MAGIC.to_be_bytes().to_vec();
        out.extend_from_slice(&(ys.len() as u32).to_be_bytes());
        out.extend_from_slice(ys);
        out
    }

    #[test]
    fn parses_tiny_image_file() {
        let m = parse_idx_images(&images(2, 1, 2, &[0, 255, 51, 102])).unwrap();
        assert_eq!((m.rows(), m.cols()), (2, 2));
        assert_eq!(m.row(0), &[0.0, 1.0]);
        assert_eq!(m.row(1), &[0.2, 0.4]);
    }

    #[test]
    fn parses_labels() {
        assert_eq!(parse_idx_labels(&labels(&[3, 0, 9])).unwrap(), vec![3, 0, 9]);
    }

    #[test]
    fn flipped_magic_fails_at_offset_zero() {
        let mut bytes = images(1, 1, 1, &[7]);
        bytes[3] ^= 0xff;
        match parse_idx_images(&bytes) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("{other:?}"),
        }
        let mut bytes = labels(&[1]);
        bytes[2] = 1;
        assert!(matches!(parse_idx_labels(&bytes), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn truncation_reports_where_data_ends() {
        let bytes = images(2, 2, 2, &[1, 2, 3]);
        assert!(matches!(parse_idx_images(&bytes), Err(Error::Format { offset: 19, .. })));
        assert!(matches!(parse_idx_images(&bytes[..10]), Err(Error::Format { offset: 8, .. })));
        let mut bytes = labels(&[1, 2]);
        bytes.pop();
        assert!(matches!(parse_idx_labels(&bytes), Err(Error::Format { offset: 9, .. })));
    }

    #[test]
    fn out_of_range_label() {
        assert!(matches!(parse_idx_labels(&labels(&[1, 10])), Err(Error::Format { offset: 9, .. })));
    }
}
