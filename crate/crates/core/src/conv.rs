//! 3×3 SAME-padded convolution and 2×2 max-pool kernels.
//!
//! Padding follows the usual SAME rule: the output extent is `⌈in/stride⌉`
//! and the total padding `max((out-1)·stride + 3 - in, 0)` is split with the
//! smaller half before the image.

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

pub const KERNEL: usize = 3;

#[derive(Clone, Copy, Debug)]
struct Geom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    stride: usize,
    ho: usize,
    wo: usize,
    pad_top: usize,
    pad_left: usize,
}

impl Geom {
    fn new(input: &[usize], out_channels: usize, stride: usize) -> Geom {
        let (n, c, h, w) = (input[0], input[1], input[2], input[3]);
        let ho = same_extent(h, stride);
        let wo = same_extent(w, stride);
        Geom {
            n,
            c,
            h,
            w,
            o: out_channels,
            stride,
            ho,
            wo,
            pad_top: pad_before(h, ho, stride),
            pad_left: pad_before(w, wo, stride),
        }
    }

    fn patch(&self) -> usize {
        self.c * KERNEL * KERNEL
    }

    fn pixels(&self) -> usize {
        self.ho * self.wo
    }
}

/// Output extent of a SAME convolution or pool.
pub fn same_extent(extent: usize, stride: usize) -> usize {
    extent.div_ceil(stride)
}

fn pad_before(extent: usize, out: usize, stride: usize) -> usize {
    let total = ((out - 1) * stride + KERNEL).saturating_sub(extent);
    total / 2
}

fn check_conv(input: &[usize], kernel: &[usize], stride: usize) -> Result<()> {
    if input.len() != 4 || kernel.len() != 4 {
        return Err(Error::shape(
            "conv2d",
            format!("input {input:?} and kernel {kernel:?} must be rank 4"),
        ));
    }
    if kernel[2] != KERNEL || kernel[3] != KERNEL {
        return Err(Error::shape(
            "conv2d",
            format!("kernel {kernel:?} is not 3×3"),
        ));
    }
    if input[1] != kernel[1] {
        return Err(Error::shape(
            "conv2d",
            format!(
                "input has {} channels, kernel expects {}",
                input[1], kernel[1]
            ),
        ));
    }
    if stride != 1 && stride != 2 {
        return Err(Error::Invalid(format!(
            "conv2d stride {stride} not in {{1, 2}}"
        )));
    }
    Ok(())
}

fn im2col(x: &[f64], g: &Geom, col: &mut [f64]) {
    let px = g.pixels();
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = &mut col[((c * KERNEL + ky) * KERNEL + kx) * px..][..px];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad_top as isize;
                    let dst = &mut row[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad_left as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add(col: &[f64], g: &Geom, x: &mut [f64]) {
    let px = g.pixels();
    for c in 0..g.c {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = &col[((c * KERNEL + ky) * KERNEL + kx) * px..][..px];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad_top as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad_left as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += row[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// SAME-padded 3×3 convolution of `N×C×H×W` input with an `O×C×3×3` kernel.
pub fn conv2d_same(input: &Tensor, kernel: &Tensor, stride: usize) -> Result<Tensor> {
    check_conv(input.shape(), kernel.shape(), stride)?;
    let g = Geom::new(input.shape(), kernel.shape()[0], stride);
    let (patch, px) = (g.patch(), g.pixels());
    let in_stride = g.c * g.h * g.w;
    let mut col = vec![0.0; patch * px];
    let mut out = vec![0.0; g.n * g.o * px];
    for n in 0..g.n {
        im2col(
            &input.data()[n * in_stride..(n + 1) * in_stride],
            &g,
            &mut col,
        );
        gemm(
            g.o,
            patch,
            px,
            kernel.data(),
            false,
            &col,
            false,
            0.0,
            &mut out[n * g.o * px..(n + 1) * g.o * px],
        );
    }
    Ok(Tensor::from_parts(vec![g.n, g.o, g.ho, g.wo], out))
}

/// Vector-Jacobian product of [`conv2d_same`] with respect to its input.
pub(crate) fn conv2d_grad_input(
    grad_out: &Tensor,
    kernel: &Tensor,
    stride: usize,
    input_shape: &[usize],
) -> Result<Tensor> {
    check_conv(input_shape, kernel.shape(), stride)?;
    let g = Geom::new(input_shape, kernel.shape()[0], stride);
    expect_out(grad_out, &g)?;
    let (patch, px) = (g.patch(), g.pixels());
    let in_stride = g.c * g.h * g.w;
    let mut col = vec![0.0; patch * px];
    let mut out = vec![0.0; g.n * in_stride];
    for n in 0..g.n {
        gemm(
            patch,
            g.o,
            px,
            kernel.data(),
            true,
            &grad_out.data()[n * g.o * px..(n + 1) * g.o * px],
            false,
            0.0,
            &mut col,
        );
        col2im_add(&col, &g, &mut out[n * in_stride..(n + 1) * in_stride]);
    }
    Ok(Tensor::from_parts(input_shape.to_vec(), out))
}

/// Vector-Jacobian product of [`conv2d_same`] with respect to its kernel.
pub(crate) fn conv2d_grad_kernel(
    input: &Tensor,
    grad_out: &Tensor,
    stride: usize,
) -> Result<Tensor> {
    let out_channels = grad_out.shape().get(1).copied().unwrap_or(0);
    let kshape = [
        out_channels,
        input.shape().get(1).copied().unwrap_or(0),
        KERNEL,
        KERNEL,
    ];
    check_conv(input.shape(), &kshape, stride)?;
    let g = Geom::new(input.shape(), out_channels, stride);
    expect_out(grad_out, &g)?;
    let (patch, px) = (g.patch(), g.pixels());
    let in_stride = g.c * g.h * g.w;
    let mut col = vec![0.0; patch * px];
    let mut out = vec![0.0; g.o * patch];
    for n in 0..g.n {
        im2col(
            &input.data()[n * in_stride..(n + 1) * in_stride],
            &g,
            &mut col,
        );
        gemm(
            g.o,
            px,
            patch,
            &grad_out.data()[n * g.o * px..(n + 1) * g.o * px],
            false,
            &col,
            true,
            1.0,
            &mut out,
        );
    }
    Ok(Tensor::from_parts(kshape.to_vec(), out))
}

fn expect_out(grad_out: &Tensor, g: &Geom) -> Result<()> {
    let want = [g.n, g.o, g.ho, g.wo];
    if grad_out.shape() != want {
        return Err(Error::shape(
            "conv2d",
            format!("output gradient {:?}, expected {want:?}", grad_out.shape()),
        ));
    }
    Ok(())
}

/// Flat input index of the maximum in each 2×2 (stride 2, ceil) window.
/// Ties resolve to the first position in row-major order.
pub(crate) fn pool_argmax(x: &Tensor) -> Result<(Vec<usize>, Vec<usize>)> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::shape(
            "max_pool",
            format!("rank-4 input expected, got {s:?}"),
        ));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (ho, wo) = (same_extent(h, 2), same_extent(w, 2));
    let mut idx = Vec::with_capacity(n * c * ho * wo);
    let d = x.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + 2 * oy * w + 2 * ox;
                for y in 2 * oy..(2 * oy + 2).min(h) {
                    for xx in 2 * ox..(2 * ox + 2).min(w) {
                        let i = base + y * w + xx;
                        if d[i] > d[best] {
                            best = i;
                        }
                    }
                }
                idx.push(best);
            }
        }
    }
    Ok((idx, vec![n, c, ho, wo]))
}

pub(crate) fn pool_gather(v: &Tensor, idx: &[usize], out_shape: &[usize]) -> Tensor {
    Tensor::from_parts(
        out_shape.to_vec(),
        idx.iter().map(|&i| v.data()[i]).collect(),
    )
}

pub(crate) fn pool_scatter(g: &Tensor, idx: &[usize], in_shape: &[usize]) -> Tensor {
    let mut out = vec![0.0; in_shape.iter().product()];
    for (&i, &v) in idx.iter().zip(g.data()) {
        out[i] += v;
    }
    Tensor::from_parts(in_shape.to_vec(), out)
}
