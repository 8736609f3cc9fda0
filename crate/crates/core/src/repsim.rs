//! Representational similarity: first-stage RDMs, RSA dissimilarity
//! between RDMs, and linear CKA.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// How pairwise dissimilarities between probe activations are measured.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RdmMetric {
    #[default]
    Euclidean,
    /// `1 − Pearson` between activation rows.
    Correlation,
}

/// Symmetric `n×n` dissimilarity matrix with a zero diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct Rdm {
    n: usize,
    entries: Vec<f64>,
}

impl Rdm {
    /// Build from a full row-major matrix, checking symmetry and the diagonal.
    pub fn from_matrix(n: usize, entries: Vec<f64>) -> Result<Rdm> {
        if entries.len() != n * n {
            return Err(Error::shape(
                "rdm",
                format!("{} entries for n = {n}", entries.len()),
            ));
        }
        for i in 0..n {
            if entries[i * n + i] != 0.0 {
                return Err(Error::Invalid(format!(
                    "rdm diagonal entry {i} is not zero"
                )));
            }
            for j in 0..i {
                if entries[i * n + j] != entries[j * n + i] {
                    return Err(Error::Invalid(format!(
                        "rdm is not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        Ok(Rdm { n, entries })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.n + j]
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    /// Entries strictly below the diagonal, row by row.
    pub fn lower_triangle(&self) -> Vec<f64> {
        (1..self.n)
            .flat_map(|i| (0..i).map(move |j| (i, j)))
            .map(|(i, j)| self.get(i, j))
            .collect()
    }

    /// Header-less CSV, one matrix row per line.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for row in self.entries.chunks(self.n) {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(s, "{}", cells.join(","));
        }
        s
    }
}

fn rows(rep: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    if rep.rank() != 2 {
        return Err(Error::shape(
            op,
            format!("expected P×d, got {:?}", rep.shape()),
        ));
    }
    let (p, d) = (rep.shape()[0], rep.shape()[1]);
    if p < 3 {
        return Err(Error::Invalid(format!(
            "{op} needs at least 3 probe rows, got {p}"
        )));
    }
    Ok((p, d))
}

fn symmetric_from(p: usize, f: impl Fn(usize, usize) -> f64 + Sync) -> Rdm {
    let lower: Vec<Vec<f64>> = (0..p)
        .into_par_iter()
        .map(|i| (0..i).map(|j| f(i, j)).collect())
        .collect();
    let mut entries = vec![0.0; p * p];
    for (i, row) in lower.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            entries[i * p + j] = v;
            entries[j * p + i] = v;
        }
    }
    Rdm { n: p, entries }
}

/// Pairwise Euclidean distances between the rows of a `P×d` matrix.
pub fn rdm_euclidean(rep: &Tensor) -> Result<Rdm> {
    let (p, d) = rows(rep, "rdm_euclidean")?;
    let x = rep.data();
    Ok(symmetric_from(p, |i, j| {
        x[i * d..(i + 1) * d]
            .iter()
            .zip(&x[j * d..(j + 1) * d])
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }))
}

/// `1 − Pearson(row_i, row_j)`, clamped to [0, 2].
pub fn rdm_correlation(rep: &Tensor) -> Result<Rdm> {
    let (p, d) = rows(rep, "rdm_correlation")?;
    let mut centered = Vec::with_capacity(p);
    for (i, row) in rep.data().chunks(d).enumerate() {
        let mean = row.iter().sum::<f64>() / d as f64;
        let c: Vec<f64> = row.iter().map(|v| v - mean).collect();
        let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::Degenerate(format!("probe row {i} is constant")));
        }
        centered.push(c.into_iter().map(|v| v / norm).collect::<Vec<f64>>());
    }
    Ok(symmetric_from(p, |i, j| {
        let r: f64 = centered[i]
            .iter()
            .zip(&centered[j])
            .map(|(a, b)| a * b)
            .sum();
        (1.0 - r).clamp(0.0, 2.0)
    }))
}

pub fn rdm(rep: &Tensor, metric: RdmMetric) -> Result<Rdm> {
    match metric {
        RdmMetric::Euclidean => rdm_euclidean(rep),
        RdmMetric::Correlation => rdm_correlation(rep),
    }
}

/// 1-based ranks; tied values share the mean of their positions.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && x[order[end]] == x[order[start]] {
            end += 1;
        }
        // positions start+1 ..= end
        let rank = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64], what: &str) -> Result<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        let which = if sxx == 0.0 { "first" } else { "second" };
        return Err(Error::Degenerate(format!("{which} {what} is constant")));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::shape(
            "spearman",
            format!("lengths {} and {}", x.len(), y.len()),
        ));
    }
    if x.len() < 3 {
        return Err(Error::Invalid(format!(
            "spearman needs n ≥ 3, got {}",
            x.len()
        )));
    }
    pearson(&average_ranks(x), &average_ranks(y), "input")
}

/// `1 − Spearman` between the strict lower triangles of two RDMs.
pub fn rsa_dissimilarity(a: &Rdm, b: &Rdm) -> Result<f64> {
    if a.n != b.n {
        return Err(Error::shape(
            "rsa_dissimilarity",
            format!("{}×{} vs {}×{}", a.n, a.n, b.n, b.n),
        ));
    }
    if a.n < 3 {
        return Err(Error::Invalid(format!(
            "rsa_dissimilarity needs n ≥ 3, got {}",
            a.n
        )));
    }
    let (ta, tb) = (a.lower_triangle(), b.lower_triangle());
    let rho = pearson(&average_ranks(&ta), &average_ranks(&tb), "RDM triangle")?;
    Ok(1.0 - rho)
}

fn center_columns(x: &Tensor, op: &'static str) -> Result<(usize, usize, Vec<f64>)> {
    if x.rank() != 2 {
        return Err(Error::shape(
            op,
            format!("expected P×d, got {:?}", x.shape()),
        ));
    }
    let (p, d) = (x.shape()[0], x.shape()[1]);
    let mut means = vec![0.0; d];
    for row in x.data().chunks(d) {
        for (m, v) in means.iter_mut().zip(row) {
            *m += v;
        }
    }
    means.iter_mut().for_each(|m| *m /= p as f64);
    let data = x
        .data()
        .chunks(d)
        .flat_map(|row| row.iter().zip(&means).map(|(v, m)| v - m))
        .collect();
    Ok((p, d, data))
}

/// Linear CKA between two `P×d` representations of the same probe set.
///
/// Computed through the centered Gram matrices: `‖YᵀX‖²_F = ⟨XXᵀ, YYᵀ⟩`.
pub fn linear_cka(x: &Tensor, y: &Tensor) -> Result<f64> {
    let (p, dx, xc) = center_columns(x, "linear_cka")?;
    let (py, dy, yc) = center_columns(y, "linear_cka")?;
    if p != py {
        return Err(Error::shape(
            "linear_cka",
            format!("{p} vs {py} probe rows"),
        ));
    }
    if p < 2 {
        return Err(Error::Invalid(
            "linear_cka needs at least 2 probe rows".into(),
        ));
    }
    let mut kx = vec![0.0; p * p];
    let mut ky = vec![0.0; p * p];
    tensor::gemm(p, dx, p, &xc, false, &xc, true, 0.0, &mut kx);
    tensor::gemm(p, dy, p, &yc, false, &yc, true, 0.0, &mut ky);
    let cross: f64 = kx.iter().zip(&ky).map(|(a, b)| a * b).sum();
    let nx = kx.iter().map(|v| v * v).sum::<f64>();
    let ny = ky.iter().map(|v| v * v).sum::<f64>();
    if nx == 0.0 || ny == 0.0 {
        return Err(Error::Degenerate(
            "linear_cka input has no variance after centering".into(),
        ));
    }
    Ok((cross / (nx * ny).sqrt()).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::new(vec![rows.len(), rows[0].len()], rows.concat()).unwrap()
    }

    fn random(rng: &mut ChaCha8Rng, p: usize, d: usize) -> Tensor {
        Tensor::new(
            vec![p, d],
            (0..p * d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn three_four_five() {
        let r = rdm_euclidean(&t(&[&[0.0, 0.0], &[3.0, 4.0], &[0.0, 0.0]])).unwrap();
        assert_eq!((r.get(0, 1), r.get(0, 2), r.get(1, 2)), (5.0, 0.0, 5.0));
        assert_eq!(r.lower_triangle(), vec![5.0, 0.0, 5.0]);
    }

    #[test]
    fn euclidean_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = random(&mut rng, 10, 7);
        let r = rdm_euclidean(&x).unwrap();
        for i in 0..10 {
            for j in 0..10 {
                let mut s = 0.0;
                for k in 0..7 {
                    s += (x.data()[i * 7 + k] - x.data()[j * 7 + k]).powi(2);
                }
                assert!((r.get(i, j) - s.sqrt()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn too_few_rows() {
        assert!(rdm_euclidean(&t(&[&[1.0], &[2.0]])).is_err());
    }

    #[test]
    fn correlation_distances() {
        let r = rdm_correlation(&t(&[
            &[1.0, 2.0, 4.0],
            &[-1.0, -2.0, -4.0],
            &[3.0, 5.0, 9.0],
        ]))
        .unwrap();
        assert!((r.get(0, 1) - 2.0).abs() < 1e-15);
        assert!(r.get(0, 2).abs() < 1e-15);
        assert_eq!(r.get(1, 1), 0.0);
        let err = rdm_correlation(&t(&[&[1.0, 2.0], &[5.0, 5.0], &[0.0, 1.0]])).unwrap_err();
        assert!(err.to_string().contains("row 1"), "{err}");
    }

    #[test]
    fn spearman_cases() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 1.0);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
        // ranks (1, 2.5, 2.5, 4) vs (1, 3, 2, 4): centered dot 4.5, norms √4.5 and √5
        let want = 4.5 / (4.5f64.sqrt() * 5f64.sqrt());
        let got = spearman(&[1.0, 2.0, 2.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
        assert!((got - want).abs() < 1e-15);
        assert!(matches!(
            spearman(&[1.0; 4], &[1.0, 2.0, 3.0, 4.0]),
            Err(Error::Degenerate(_))
        ));
        assert!(spearman(&[1.0, 2.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn average_ranks_of_ties() {
        assert_eq!(
            average_ranks(&[3.0, 1.0, 3.0, 3.0]),
            vec![3.0, 1.0, 3.0, 3.0]
        );
        assert_eq!(average_ranks(&[0.5, 0.5, -1.0]), vec![2.5, 2.5, 1.0]);
    }

    #[test]
    fn rsa_is_rank_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = rdm_euclidean(&random(&mut rng, 8, 3)).unwrap();
        assert_eq!(rsa_dissimilarity(&a, &a).unwrap(), 0.0);
        let b =
            Rdm::from_matrix(8, a.entries().iter().map(|v| v.powi(3) + 2.0 * v).collect()).unwrap();
        assert!(rsa_dissimilarity(&a, &b).unwrap().abs() < 1e-15);
        let c = rdm_euclidean(&random(&mut rng, 8, 3)).unwrap();
        let d = rsa_dissimilarity(&a, &c).unwrap();
        assert!((0.0..=2.0).contains(&d));
        assert_eq!(d, rsa_dissimilarity(&c, &a).unwrap());
    }

    #[test]
    fn constant_triangle_is_degenerate() {
        let x = t(&[&[0.0, 0.0], &[1.0, 0.0], &[0.5, 3f64.sqrt() / 2.0]]);
        let equilateral = Rdm::from_matrix(3, {
            let r = rdm_euclidean(&x).unwrap();
            r.entries()
                .iter()
                .map(|v| if *v > 0.0 { 1.0 } else { 0.0 })
                .collect()
        })
        .unwrap();
        let other = rdm_euclidean(&t(&[&[0.0], &[1.0], &[3.0]])).unwrap();
        let err = rsa_dissimilarity(&equilateral, &other).unwrap_err();
        assert!(err.to_string().contains("first"), "{err}");
        assert!(rsa_dissimilarity(
            &other,
            &rdm_euclidean(&t(&[&[0.0], &[1.0], &[3.0], &[4.0]])).unwrap()
        )
        .is_err());
    }

    #[test]
    fn cka_invariances() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&mut rng, 12, 4);
        assert!((linear_cka(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        assert!((linear_cka(&x, &x.map(|v| 3.0 * v + 1.0)).unwrap() - 1.0).abs() < 1e-12);
        // rotation in the first two columns
        let (c, s) = (0.3f64.cos(), 0.3f64.sin());
        let mut rotated = x.data().to_vec();
        for row in rotated.chunks_mut(4) {
            let (a, b) = (row[0], row[1]);
            row[0] = c * a - s * b;
            row[1] = s * a + c * b;
        }
        let xr = Tensor::new(vec![12, 4], rotated).unwrap();
        assert!((linear_cka(&x, &xr).unwrap() - 1.0).abs() < 1e-10);
        let y = random(&mut rng, 12, 6);
        let v = linear_cka(&x, &y).unwrap();
        assert!((0.0..=1.0).contains(&v) && v < 1.0);
        assert!(matches!(
            linear_cka(&x, &Tensor::full(&[12, 2], 5.0)),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn rdm_csv_shape() {
        let r = rdm_euclidean(&t(&[&[0.0], &[1.0], &[3.0]])).unwrap();
        assert_eq!(r.to_csv(), "0,1,3\n1,0,2\n3,2,0\n");
    }
}
