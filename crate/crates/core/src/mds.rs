//! Classical (Torgerson) multidimensional scaling.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::repsim::Rdm;
use crate::tensor::Tensor;

const MAX_SWEEPS: usize = 100;

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// `s` is `n×n` row-major. Returns eigenvalues in descending order and the
/// matching orthonormal eigenvectors as the columns of an `n×n` tensor.
pub fn jacobi_eigh(s: &[f64], n: usize) -> Result<(Vec<f64>, Tensor)> {
    if n == 0 || s.len() != n * n {
        return Err(Error::shape(
            "jacobi_eigh",
            format!("{} entries for n = {n}", s.len()),
        ));
    }
    for i in 0..n {
        for j in 0..i {
            if (s[i * n + j] - s[j * n + i]).abs() > 1e-10 {
                return Err(Error::Invalid(format!(
                    "matrix is not symmetric at ({i}, {j})"
                )));
            }
        }
    }
    let mut a: Vec<f64> = (0..n * n)
        .map(|k| {
            let (i, j) = (k / n, k % n);
            0.5 * (s[i * n + j] + s[j * n + i])
        })
        .collect();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let off = |a: &[f64]| -> f64 {
        let mut sum = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    sum += a[i * n + j] * a[i * n + j];
                }
            }
        }
        sum.sqrt()
    };

    for _ in 0..MAX_SWEEPS {
        if off(&a) < 1e-12 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k * n + p], a[k * n + q]);
                    a[k * n + p] = c * akp - sn * akq;
                    a[k * n + q] = sn * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p * n + k], a[q * n + k]);
                    a[p * n + k] = c * apk - sn * aqk;
                    a[q * n + k] = sn * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - sn * vkq;
                    v[k * n + q] = sn * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| a[y * n + y].total_cmp(&a[x * n + x]));
    let values = order.iter().map(|&k| a[k * n + k]).collect();
    let mut vectors = vec![0.0; n * n];
    for (col, &k) in order.iter().enumerate() {
        for row in 0..n {
            vectors[row * n + col] = v[row * n + k];
        }
    }
    Ok((values, Tensor::new(vec![n, n], vectors)?))
}

/// Low-dimensional coordinates from classical MDS.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    /// `n×dim`, columns ordered by descending eigenvalue.
    pub coords: Tensor,
    /// The leading `dim` eigenvalues of the double-centered matrix.
    pub eigenvalues: Vec<f64>,
    /// Sum of the positive eigenvalues left out of the embedding.
    pub residual: f64,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    eigenvalues: Vec<f64>,
    residual: f64,
}

impl Embedding {
    pub fn dim(&self) -> usize {
        self.coords.shape()[1]
    }

    /// `point_id,x,y` (further axes named `c3`, `c4`, ...).
    pub fn to_csv(&self) -> String {
        let axes: Vec<String> = (0..self.dim())
            .map(|k| match k {
                0 => "x".to_string(),
                1 => "y".to_string(),
                k => format!("c{}", k + 1),
            })
            .collect();
        let mut s = format!("point_id,{}\n", axes.join(","));
        for (i, row) in self.coords.data().chunks(self.dim()).enumerate() {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(s, "{i},{}", cells.join(","));
        }
        s
    }

    /// JSON with the eigenvalues and residual.
    pub fn sidecar_json(&self) -> String {
        serde_json::to_string_pretty(&Sidecar {
            eigenvalues: self.eigenvalues.clone(),
            residual: self.residual,
        })
        .expect("plain numbers serialize")
    }
}

/// Embed a dissimilarity matrix in `dim` dimensions.
///
/// Negative eigenvalues of `−½·J·(d∘d)·J` are clamped to zero; the
/// corresponding coordinate columns are zero.
pub fn classical_mds(d: &Rdm, dim: usize) -> Result<Embedding> {
    let n = d.n();
    if dim == 0 || dim + 1 > n {
        return Err(Error::Invalid(format!(
            "cannot embed {n} points in {dim} dimensions"
        )));
    }
    let sq: Vec<f64> = d.entries().iter().map(|v| v * v).collect();
    let row_means: Vec<f64> = sq
        .chunks(n)
        .map(|r| r.iter().sum::<f64>() / n as f64)
        .collect();
    let grand = row_means.iter().sum::<f64>() / n as f64;
    // d is symmetric, so column means equal row means
    let b: Vec<f64> = (0..n * n)
        .map(|k| {
            let (i, j) = (k / n, k % n);
            -0.5 * (sq[k] - row_means[i] - row_means[j] + grand)
        })
        .collect();
    let (values, vectors) = jacobi_eigh(&b, n)?;
    let scale = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = scale * 1e-12 * n as f64;
    if values[0] <= floor {
        return Err(Error::Degenerate(
            "dissimilarity matrix has no positive Euclidean component".into(),
        ));
    }

    let mut coords = vec![0.0; n * dim];
    for k in 0..dim {
        let lambda = values[k];
        if lambda <= floor {
            continue;
        }
        let col: Vec<f64> = (0..n).map(|i| vectors.data()[i * n + k]).collect();
        let pivot = col
            .iter()
            .fold(0.0f64, |m, &x| if x.abs() > m.abs() { x } else { m });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        let root = lambda.sqrt();
        for i in 0..n {
            coords[i * dim + k] = sign * col[i] * root;
        }
    }
    let residual = values[dim..].iter().filter(|&&l| l > 0.0).sum();
    Ok(Embedding {
        coords: Tensor::new(vec![n, dim], coords)?,
        eigenvalues: values[..dim].to_vec(),
        residual,
    })
}
