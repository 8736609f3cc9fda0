//! Binary PGM (P5) ingestion for `root/<class_name>/*.pgm` trees.

use std::fs;
use std::path::Path;

use super::ClassPool;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Decode a P5 image into an `H×W` buffer scaled to [0, 1].
pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(path, "truncated header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token()?;
    if magic != "P5" {
        return Err(Error::format(
            path,
            format!("not a binary PGM (magic {magic:?})"),
        ));
    }
    let mut number = |what: &str| -> Result<usize> {
        token()?
            .parse()
            .map_err(|_| Error::format(path, format!("bad {what}")))
    };
    let width = number("width")?;
    let height = number("height")?;
    let maxval = number("maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::format(
            path,
            format!("maxval {maxval} outside 1..=255"),
        ));
    }
    // exactly one whitespace byte separates the header from the raster
    let body = bytes
        .get(pos + 1..)
        .ok_or_else(|| Error::format(path, "missing raster"))?;
    let n = width * height;
    if width == 0 || height == 0 || body.len() < n {
        return Err(Error::format(
            path,
            format!(
                "raster has {} bytes, {width}×{height} needs {n}",
                body.len()
            ),
        ));
    }
    let scale = maxval as f64;
    Ok((
        width,
        height,
        body[..n]
            .iter()
            .map(|&b| (b as f64 / scale).min(1.0))
            .collect(),
    ))
}

/// Nearest-neighbour resampling: output pixel `(i, j)` takes source pixel
/// `(⌊i·h/size⌋, ⌊j·w/size⌋)`.
pub fn resample_nearest(src: &[f64], width: usize, height: usize, size: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(size * size);
    for i in 0..size {
        let si = i * height / size;
        for j in 0..size {
            let sj = j * width / size;
            out.push(src[si * width + sj]);
        }
    }
    out
}

/// Load every class directory under `root`; images become `1×size×size`.
pub fn load_pgm_classes(root: impl AsRef<Path>, size: usize) -> Result<ClassPool> {
    let root = root.as_ref();
    let mut dirs: Vec<_> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::format(root, "no class directories"));
    }
    let mut pool = ClassPool::new();
    for dir in dirs {
        let mut files: Vec<_> = fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("pgm")))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::format(&dir, "empty class directory"));
        }
        let mut images = Vec::with_capacity(files.len());
        for f in files {
            let bytes = fs::read(&f).map_err(|e| Error::io(&f, e))?;
            let (w, h, px) = decode_pgm(&bytes, &f)?;
            images.push(Tensor::new(
                vec![1, size, size],
                resample_nearest(&px, w, h, size),
            )?);
        }
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        pool.insert(name, images);
    }
    Ok(pool)
}
