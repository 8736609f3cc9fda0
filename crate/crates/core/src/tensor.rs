//! Dense row-major `f64` tensors and the raw numeric kernels the
//! differentiation record is built on.

use crate::error::{Error, Result};

/// Dense n-dimensional array of `f64`, row-major.
///
/// A rank-0 tensor (empty shape) holds exactly one value.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::shape("tensor", format!("zero extent in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape),
            ));
        }
        Ok(Tensor::from_parts(shape.to_vec(), self.data.clone()))
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let cols = self.shape[1];
        &self.data[i * cols..(i + 1) * cols]
    }

    /// Rows `[start, start+len)` along the leading axis.
    pub fn slice_leading(&self, start: usize, len: usize) -> Result<Tensor> {
        let lead = *self.shape.first().unwrap_or(&1);
        if start + len > lead || len == 0 {
            return Err(Error::shape(
                "slice_leading",
                format!("[{start}, {}) of {lead}", start + len),
            ));
        }
        let stride = self.numel() / lead;
        let mut shape = self.shape.clone();
        shape[0] = len;
        Ok(Tensor::from_parts(
            shape,
            self.data[start * stride..(start + len) * stride].to_vec(),
        ))
    }

    /// Concatenate along the leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::Invalid("stack of zero tensors".into()))?;
        let tail = &first.shape[1..];
        let mut data = Vec::with_capacity(items.iter().map(Tensor::numel).sum());
        let mut lead = 0;
        for t in items {
            if &t.shape[1..] != tail {
                return Err(Error::shape(
                    "stack",
                    format!("{:?} vs {:?}", t.shape, first.shape),
                ));
            }
            lead += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = lead;
        Ok(Tensor::from_parts(shape, data))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    pub fn zip_with(
        &self,
        other: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(Tensor::from_parts(
            self.shape.clone(),
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        matmul(self, other, false, false)
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::shape("transpose", format!("rank {}", self.rank())));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor::from_parts(vec![c, r], out))
    }
}

/// `c = a·b + beta·c` where `a` is m×k and `b` is k×n after the optional
/// transposes (`ta`/`tb` mean the stored buffer holds the transpose).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the strides can reach.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Matrix product `op(a)·op(b)` of rank-2 tensors.
pub fn matmul(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(Error::shape(
            "matmul",
            format!("needs rank-2 operands, got {:?} and {:?}", a.shape, b.shape),
        ));
    }
    let (m, k) = if ta {
        (a.shape[1], a.shape[0])
    } else {
        (a.shape[0], a.shape[1])
    };
    let (k2, n) = if tb {
        (b.shape[1], b.shape[0])
    } else {
        (b.shape[0], b.shape[1])
    };
    if k != k2 {
        return Err(Error::shape(
            "matmul",
            format!("inner extents {k} and {k2} ({:?} · {:?})", a.shape, b.shape),
        ));
    }
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, &a.data, ta, &b.data, tb, 0.0, &mut out);
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// Split a tensor's flat layout as `[outer, mid, inner]` and sum over the
/// outer and inner axes, keeping `mid`.
pub(crate) fn sum_mid(
    x: &Tensor,
    outer: usize,
    mid: usize,
    inner: usize,
    out_shape: &[usize],
) -> Tensor {
    debug_assert_eq!(outer * mid * inner, x.numel());
    let mut out = vec![0.0; mid];
    for o in 0..outer {
        for (m, acc) in out.iter_mut().enumerate() {
            let base = (o * mid + m) * inner;
            *acc += x.data[base..base + inner].iter().sum::<f64>();
        }
    }
    Tensor::from_parts(out_shape.to_vec(), out)
}

/// Adjoint of [`sum_mid`]: replicate a length-`mid` vector to `shape`.
pub(crate) fn broadcast_mid(
    v: &Tensor,
    outer: usize,
    mid: usize,
    inner: usize,
    shape: &[usize],
) -> Tensor {
    debug_assert_eq!(v.numel(), mid);
    let mut out = Vec::with_capacity(outer * mid * inner);
    for _ in 0..outer {
        for m in 0..mid {
            out.extend(std::iter::repeat_n(v.data[m], inner));
        }
    }
    Tensor::from_parts(shape.to_vec(), out)
}
