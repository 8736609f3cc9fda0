//! Big-endian IDX files (the MNIST distribution format).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(path, "truncated header"))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Raw pixel bytes plus `(count, rows, cols)`.
pub fn read_idx_images(path: impl AsRef<Path>) -> Result<(Vec<u8>, usize, usize, usize)> {
    let path = path.as_ref();
    let bytes = read(path)?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != IMAGE_MAGIC {
        return Err(Error::format(
            path,
            format!("bad magic {magic:#010x}, expected {IMAGE_MAGIC:#010x}"),
        ));
    }
    let n = be_u32(&bytes, 4, path)? as usize;
    let rows = be_u32(&bytes, 8, path)? as usize;
    let cols = be_u32(&bytes, 12, path)? as usize;
    let need = n * rows * cols;
    let body = &bytes[16..];
    if body.len() < need {
        return Err(Error::format(
            path,
            format!(
                "truncated: {need} pixel bytes declared, {} present",
                body.len()
            ),
        ));
    }
    Ok((body[..need].to_vec(), n, rows, cols))
}

pub fn read_idx_labels(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    let path = path.as_ref();
    let bytes = read(path)?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != LABEL_MAGIC {
        return Err(Error::format(
            path,
            format!("bad magic {magic:#010x}, expected {LABEL_MAGIC:#010x}"),
        ));
    }
    let n = be_u32(&bytes, 4, path)? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(Error::format(
            path,
            format!("truncated: {n} labels declared, {} present", body.len()),
        ));
    }
    Ok(body[..n].to_vec())
}

/// Images as `N×1×rows×cols` in [0, 1] and their labels.
pub fn load_mnist_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<(Tensor, Vec<usize>)> {
    let (pixels, n, rows, cols) = read_idx_images(images_path.as_ref())?;
    let labels = read_idx_labels(labels_path.as_ref())?;
    if labels.len() != n {
        return Err(Error::format(
            labels_path.as_ref(),
            format!("{} labels for {n} images", labels.len()),
        ));
    }
    if n == 0 {
        return Err(Error::format(images_path.as_ref(), "no images"));
    }
    let x = Tensor::new(
        vec![n, 1, rows, cols],
        pixels.iter().map(|&p| p as f64 / 255.0).collect(),
    )?;
    Ok((x, labels.into_iter().map(usize::from).collect()))
}

pub fn write_idx_images(
    path: impl AsRef<Path>,
    pixels: &[u8],
    n: usize,
    rows: usize,
    cols: usize,
) -> Result<()> {
    let path = path.as_ref();
    if pixels.len() != n * rows * cols {
        return Err(Error::Invalid(format!(
            "{} pixel bytes for {n}×{rows}×{cols} images",
            pixels.len()
        )));
    }
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IMAGE_MAGIC, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_idx_labels(path: impl AsRef<Path>, labels: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
