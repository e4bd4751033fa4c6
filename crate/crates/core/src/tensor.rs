//! Dense row-major tensors and the compute kernels the network layers use.
//!
//! Image-shaped kernels take a single `[c, h, w]` plane stack; batched layers
//! in [`crate::nn`] call the slice-level variants once per example.

use std::fmt;

use crate::error::{Error, Result};
use crate::scalar::{gemm, MatRef, Scalar};

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= SHOWN {
            write!(f, " {:?}", self.data)
        } else {
            write!(f, " {:?}…", &self.data[..SHOWN])
        }
    }
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::dim("tensor shape must have at least one extent"));
    }
    if let Some(pos) = shape.iter().position(|&e| e == 0) {
        return Err(Error::dim(format!(
            "extent {pos} of shape {shape:?} is zero; extents must be >= 1"
        )));
    }
    shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| Error::dim(format!("shape {shape:?} overflows")))
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let len = check_shape(&shape)?;
        if len != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} needs {len} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Result<Self> {
        let shape = shape.into();
        let len = check_shape(&shape)?;
        Ok(Tensor {
            shape,
            data: vec![value; len],
        })
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Result<Self> {
        let shape = shape.into();
        let len = check_shape(&shape)?;
        Ok(Tensor {
            shape,
            data: (0..len).map(&mut f).collect(),
        })
    }

    /// Builds a tensor from `f64` literals, converting to `T`.
    pub fn from_f64(shape: impl Into<Vec<usize>>, values: &[f64]) -> Result<Self> {
        Self::new(shape, values.iter().map(|&v| T::lit(v)).collect())
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Element-wise conversion to another scalar type.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&v| U::from_f64(v.as_f64()).unwrap_or_else(U::nan))
                .collect(),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn sum_squares(&self) -> T {
        self.data.iter().map(|&v| v * v).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute element-wise difference; `None` on shape mismatch.
    pub fn max_abs_diff(&self, other: &Self) -> Option<T> {
        (self.shape == other.shape).then(|| {
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| (a - b).abs())
                .fold(T::zero(), T::max)
        })
    }

    /// Values at the given leading index, e.g. one image of a batch.
    pub fn slab(&self, index: usize) -> &[T] {
        let per = self.data.len() / self.shape[0];
        &self.data[index * per..(index + 1) * per]
    }

    pub fn slab_mut(&mut self, index: usize) -> &mut [T] {
        let per = self.data.len() / self.shape[0];
        &mut self.data[index * per..(index + 1) * per]
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, factor: T) -> Self {
        self.map(|v| v * factor)
    }

    pub fn relu(&self) -> Self {
        self.map(relu)
    }

    /// Passes `self` (the upstream gradient) where `pre_activation > 0`.
    pub fn relu_backward(&self, pre_activation: &Self) -> Result<Self> {
        self.zip_with(pre_activation, "relu_backward", |g, x| {
            if x > T::zero() {
                g
            } else {
                T::zero()
            }
        })
    }

    fn zip_with(&self, other: &Self, op: &str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::dim(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape, other.shape
            )));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }
}

#[inline]
pub(crate) fn relu<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        v
    } else {
        T::zero()
    }
}

/// `[m, k] x [k, n] -> [m, n]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::dim(format!(
            "matmul: cannot multiply {:?} by {:?}",
            a.shape, b.shape
        )));
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![T::zero(); m * n];
    gemm(MatRef::new(&a.data, m, k), MatRef::new(&b.data, k, n), &mut out, false);
    Tensor::new(vec![m, n], out)
}

/// Spatial geometry of a square convolution window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    /// Stride 1 with `(k - 1) / 2` zero padding: output extent equals input.
    pub fn same(kernel: usize) -> Self {
        ConvGeometry {
            kernel,
            stride: 1,
            pad: kernel / 2,
        }
    }

    pub fn output_dims(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let span_h = h + 2 * self.pad;
        let span_w = w + 2 * self.pad;
        if self.kernel == 0 || self.stride == 0 || span_h < self.kernel || span_w < self.kernel {
            return None;
        }
        Some((
            (span_h - self.kernel) / self.stride + 1,
            (span_w - self.kernel) / self.stride + 1,
        ))
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Dimensions of one convolution application on a single example.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub oh: usize,
    pub ow: usize,
    pub geom: ConvGeometry,
}

impl ConvDims {
    pub fn new(c_in: usize, h: usize, w: usize, c_out: usize, geom: ConvGeometry) -> Option<Self> {
        let (oh, ow) = geom.output_dims(h, w)?;
        Some(ConvDims {
            c_in,
            h,
            w,
            c_out,
            oh,
            ow,
            geom,
        })
    }

    fn patch(&self) -> usize {
        self.c_in * self.geom.kernel * self.geom.kernel
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }
}

/// Output columns `[lo, hi)` whose unit-stride tap `ox + kx - pad` lands
/// inside a row of width `w`.
fn unit_stride_span(kx: usize, pad: usize, w: usize, ow: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kx).min(ow);
    let hi = (w + pad).saturating_sub(kx).min(ow).max(lo);
    (lo, hi)
}

fn im2col<T: Scalar>(x: &[T], d: &ConvDims, cols: &mut [T], ld: usize, off: usize) {
    let ConvGeometry { kernel: k, stride: s, pad } = d.geom;
    let p = d.positions();
    for ci in 0..d.c_in {
        let plane = &x[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * ld + off..row * ld + off + p];
                for oy in 0..d.oh {
                    let iy = (oy * s + ky) as isize - pad as isize;
                    let line = &mut dst[oy * d.ow..(oy + 1) * d.ow];
                    if iy < 0 || iy >= d.h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    if s == 1 {
                        let (lo, hi) = unit_stride_span(kx, pad, d.w, d.ow);
                        line[..lo].iter_mut().for_each(|v| *v = T::zero());
                        line[hi..].iter_mut().for_each(|v| *v = T::zero());
                        if lo < hi {
                            let start = lo + kx - pad;
                            line[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                        }
                        continue;
                    }
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * s + kx) as isize - pad as isize;
                        *v = if ix < 0 || ix >= d.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], d: &ConvDims, gx: &mut [T], ld: usize, off: usize) {
    let ConvGeometry { kernel: k, stride: s, pad } = d.geom;
    let p = d.positions();
    for ci in 0..d.c_in {
        let plane = &mut gx[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * ld + off..row * ld + off + p];
                for oy in 0..d.oh {
                    let iy = (oy * s + ky) as isize - pad as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    if s == 1 {
                        let (lo, hi) = unit_stride_span(kx, pad, d.w, d.ow);
                        if lo < hi {
                            let start = lo + kx - pad;
                            let line = &src[oy * d.ow + lo..oy * d.ow + hi];
                            for (g, &v) in dst[start..start + hi - lo].iter_mut().zip(line) {
                                *g += v;
                            }
                        }
                        continue;
                    }
                    for ox in 0..d.ow {
                        let ix = (ox * s + kx) as isize - pad as isize;
                        if ix >= 0 && ix < d.w as isize {
                            dst[ix as usize] += src[oy * d.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution of one example via patch unrolling and a GEMM.
///
/// `weights` is `[c_out, c_in, k, k]`, `out` is `[c_out, oh, ow]`.
pub(crate) fn conv_forward_image<T: Scalar>(
    x: &[T],
    weights: &[T],
    bias: &[T],
    d: &ConvDims,
    out: &mut [T],
    scratch: &mut Vec<T>,
) {
    let p = d.positions();
    let patch = d.patch();
    let cols: &[T] = if d.geom.is_pointwise() {
        x
    } else {
        scratch.resize(patch * p, T::zero());
        im2col(x, d, scratch, p, 0);
        scratch
    };
    gemm(
        MatRef::new(weights, d.c_out, patch),
        MatRef::new(cols, patch, p),
        out,
        false,
    );
    for (o, plane) in out.chunks_exact_mut(p).enumerate() {
        let b = bias[o];
        plane.iter_mut().for_each(|v| *v += b);
    }
}

/// Accumulates kernel/bias gradients and optionally writes the input gradient.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward_image<T: Scalar>(
    grad_out: &[T],
    x: &[T],
    weights: &[T],
    d: &ConvDims,
    grad_w: Option<&mut [T]>,
    grad_b: Option<&mut [T]>,
    grad_x: Option<&mut [T]>,
    scratch: &mut Vec<T>,
) {
    let p = d.positions();
    let patch = d.patch();
    if let Some(gb) = grad_b {
        for (o, plane) in grad_out.chunks_exact(p).enumerate() {
            gb[o] += plane.iter().copied().sum::<T>();
        }
    }
    let pointwise = d.geom.is_pointwise();
    if let Some(gw) = grad_w {
        let cols: &[T] = if pointwise {
            x
        } else {
            scratch.resize(patch * p, T::zero());
            im2col(x, d, scratch, p, 0);
            scratch
        };
        gemm(
            MatRef::new(grad_out, d.c_out, p),
            MatRef::new(cols, patch, p).t(),
            gw,
            true,
        );
    }
    if let Some(gx) = grad_x {
        let wt = MatRef::new(weights, d.c_out, patch).t();
        let go = MatRef::new(grad_out, d.c_out, p);
        if pointwise {
            gemm(wt, go, gx, false);
        } else {
            scratch.resize(patch * p, T::zero());
            gemm(wt, go, scratch, false);
            gx.iter_mut().for_each(|v| *v = T::zero());
            col2im(scratch, d, gx, p, 0);
        }
    }
}

/// Upper bound on unrolled elements per batched GEMM chunk.
const UNROLL_LIMIT: usize = 1 << 22;
const MIN_GEMM_COLS: usize = 1024;

/// Images per GEMM: enough to give the product about `MIN_GEMM_COLS`
/// columns, bounded by `UNROLL_LIMIT`.
fn chunk_len(d: &ConvDims, n: usize) -> usize {
    let p = d.positions().max(1);
    let wanted = MIN_GEMM_COLS.div_ceil(p);
    let cap = (UNROLL_LIMIT / (d.patch() * p).max(1)).max(1);
    wanted.min(cap).clamp(1, n.max(1))
}

/// Batched forward convolution: images are unrolled side by side so each
/// chunk is a single GEMM. `x` is `[n, c_in, h, w]`, `out` is `[n, c_out, oh, ow]`.
pub(crate) fn conv_forward_batch<T: Scalar>(
    x: &[T],
    n: usize,
    weights: &[T],
    bias: &[T],
    d: &ConvDims,
    out: &mut [T],
) {
    let (p, patch) = (d.positions(), d.patch());
    let per_in = d.c_in * d.h * d.w;
    let per_out = d.c_out * p;
    let chunk = chunk_len(d, n);
    let mut cols = Vec::new();
    let mut prod = Vec::new();
    for i0 in (0..n).step_by(chunk) {
        let m = chunk.min(n - i0);
        let ld = m * p;
        cols.resize(patch * ld, T::zero());
        prod.resize(d.c_out * ld, T::zero());
        for j in 0..m {
            let img = &x[(i0 + j) * per_in..(i0 + j + 1) * per_in];
            im2col(img, d, &mut cols, ld, j * p);
        }
        gemm(
            MatRef::new(weights, d.c_out, patch),
            MatRef::new(&cols, patch, ld),
            &mut prod,
            false,
        );
        for j in 0..m {
            let dst = &mut out[(i0 + j) * per_out..(i0 + j + 1) * per_out];
            for o in 0..d.c_out {
                let b = bias[o];
                let src = &prod[o * ld + j * p..o * ld + (j + 1) * p];
                for (v, &s) in dst[o * p..(o + 1) * p].iter_mut().zip(src) {
                    *v = s + b;
                }
            }
        }
    }
}

/// Batched counterpart of [`conv_backward_image`]. Kernel and bias
/// gradients accumulate; the input gradient is overwritten.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward_batch<T: Scalar>(
    grad_out: &[T],
    x: &[T],
    n: usize,
    weights: &[T],
    d: &ConvDims,
    mut grad_w: Option<&mut [T]>,
    mut grad_b: Option<&mut [T]>,
    mut grad_x: Option<&mut [T]>,
) {
    let (p, patch) = (d.positions(), d.patch());
    let per_in = d.c_in * d.h * d.w;
    let per_out = d.c_out * p;
    let chunk = chunk_len(d, n);
    let mut go = Vec::new();
    let mut cols = Vec::new();
    for i0 in (0..n).step_by(chunk) {
        let m = chunk.min(n - i0);
        let ld = m * p;
        go.resize(d.c_out * ld, T::zero());
        for j in 0..m {
            let src = &grad_out[(i0 + j) * per_out..(i0 + j + 1) * per_out];
            for o in 0..d.c_out {
                go[o * ld + j * p..o * ld + (j + 1) * p].copy_from_slice(&src[o * p..(o + 1) * p]);
            }
        }
        if let Some(gb) = grad_b.as_deref_mut() {
            for (o, row) in go.chunks_exact(ld).enumerate() {
                gb[o] += row.iter().copied().sum::<T>();
            }
        }
        cols.resize(patch * ld, T::zero());
        if let Some(gw) = grad_w.as_deref_mut() {
            for j in 0..m {
                let img = &x[(i0 + j) * per_in..(i0 + j + 1) * per_in];
                im2col(img, d, &mut cols, ld, j * p);
            }
            gemm(
                MatRef::new(&go, d.c_out, ld),
                MatRef::new(&cols, patch, ld).t(),
                gw,
                true,
            );
        }
        if let Some(gx) = grad_x.as_deref_mut() {
            gemm(
                MatRef::new(weights, d.c_out, patch).t(),
                MatRef::new(&go, d.c_out, ld),
                &mut cols,
                false,
            );
            for j in 0..m {
                let dst = &mut gx[(i0 + j) * per_in..(i0 + j + 1) * per_in];
                dst.iter_mut().for_each(|v| *v = T::zero());
                col2im(&cols, d, dst, ld, j * p);
            }
        }
    }
}

fn conv_dims_for<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geom: ConvGeometry,
) -> Result<ConvDims> {
    if input.rank() != 3 || kernels.rank() != 4 {
        return Err(Error::dim(format!(
            "conv2d expects input [c,h,w] and kernels [o,c,k,k], got {:?} and {:?}",
            input.shape, kernels.shape
        )));
    }
    let (c, h, w) = (input.shape[0], input.shape[1], input.shape[2]);
    let (o, kc, kh, kw) = (
        kernels.shape[0],
        kernels.shape[1],
        kernels.shape[2],
        kernels.shape[3],
    );
    if kc != c {
        return Err(Error::dim(format!(
            "conv2d: input {:?} has {c} channels but kernels {:?} expect {kc}",
            input.shape, kernels.shape
        )));
    }
    if kh != kw || kh != geom.kernel {
        return Err(Error::dim(format!(
            "conv2d: kernels {:?} do not match a {}x{} window",
            kernels.shape, geom.kernel, geom.kernel
        )));
    }
    if let Some(b) = bias {
        if b.shape != [o] {
            return Err(Error::dim(format!(
                "conv2d: bias {:?} does not match {o} output channels",
                b.shape
            )));
        }
    }
    ConvDims::new(c, h, w, o, geom).ok_or_else(|| {
        Error::dim(format!(
            "conv2d: window {geom:?} does not fit input {:?}",
            input.shape
        ))
    })
}

/// SAME-padded, stride-1 cross-correlation: `[c,h,w] -> [c_out,h,w]`.
pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let k = kernels.shape.get(2).copied().unwrap_or(0);
    if k % 2 == 0 {
        return Err(Error::dim(format!(
            "SAME convolution needs an odd kernel, got kernels {:?}",
            kernels.shape
        )));
    }
    conv2d_forward_with(input, kernels, bias, ConvGeometry::same(k))
}

/// Cross-correlation with explicit stride and zero padding.
pub fn conv2d_forward_with<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    bias: &Tensor<T>,
    geom: ConvGeometry,
) -> Result<Tensor<T>> {
    let d = conv_dims_for(input, kernels, Some(bias), geom)?;
    let mut out = vec![T::zero(); d.c_out * d.oh * d.ow];
    let mut scratch = Vec::new();
    conv_forward_image(&input.data, &kernels.data, &bias.data, &d, &mut out, &mut scratch);
    Tensor::new(vec![d.c_out, d.oh, d.ow], out)
}

/// Gradients of a convolution with respect to its input, kernels and bias.
#[derive(Clone, Debug)]
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub kernels: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv2d_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    kernels: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let k = kernels.shape.get(2).copied().unwrap_or(0);
    conv2d_backward_with(grad_out, input, kernels, ConvGeometry::same(k))
}

pub fn conv2d_backward_with<T: Scalar>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    geom: ConvGeometry,
) -> Result<ConvGrads<T>> {
    let d = conv_dims_for(input, kernels, None, geom)?;
    if grad_out.shape != [d.c_out, d.oh, d.ow] {
        return Err(Error::dim(format!(
            "conv2d_backward: grad_out {:?} does not match output [{}, {}, {}]",
            grad_out.shape, d.c_out, d.oh, d.ow
        )));
    }
    let mut gw = Tensor::zeros(kernels.shape.clone())?;
    let mut gb = Tensor::zeros(vec![d.c_out])?;
    let mut gx = Tensor::zeros(input.shape.clone())?;
    let mut scratch = Vec::new();
    conv_backward_image(
        &grad_out.data,
        &input.data,
        &kernels.data,
        &d,
        Some(&mut gw.data),
        Some(&mut gb.data),
        Some(&mut gx.data),
        &mut scratch,
    );
    Ok(ConvGrads {
        input: gx,
        kernels: gw,
        bias: gb,
    })
}

/// Square pooling window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolGeometry {
    pub window: usize,
    pub stride: usize,
    pub pad: usize,
}

impl PoolGeometry {
    pub const TWO_BY_TWO: PoolGeometry = PoolGeometry {
        window: 2,
        stride: 2,
        pad: 0,
    };

    pub fn output_dims(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        if self.pad >= self.window {
            return None;
        }
        ConvGeometry {
            kernel: self.window,
            stride: self.stride,
            pad: self.pad,
        }
        .output_dims(h, w)
    }
}

/// Winner positions recorded by a max-pooling forward pass.
///
/// `winners[i]` is the flat input index that produced output element `i`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArgmaxMap {
    input_shape: Vec<usize>,
    output_shape: Vec<usize>,
    winners: Vec<usize>,
}

impl ArgmaxMap {
    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.output_shape
    }

    pub fn winners(&self) -> &[usize] {
        &self.winners
    }

    /// Routes each output value back to its winning input position; zero elsewhere.
    pub fn scatter<T: Scalar>(&self, values: &Tensor<T>) -> Result<Tensor<T>> {
        if values.shape != self.output_shape {
            return Err(Error::dim(format!(
                "argmax map was recorded for output {:?}, got gradient {:?}",
                self.output_shape, values.shape
            )));
        }
        let mut out = Tensor::zeros(self.input_shape.clone())?;
        for (&idx, &v) in self.winners.iter().zip(&values.data) {
            out.data[idx] += v;
        }
        Ok(out)
    }
}

/// Max pooling of one `[c,h,w]` example; ties go to the first element in
/// row-major window order. Padded cells never win.
pub(crate) fn maxpool_image<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    geom: PoolGeometry,
    oh: usize,
    ow: usize,
    out: &mut [T],
    winners: &mut [usize],
) {
    let PoolGeometry { window, stride, pad } = geom;
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = T::neg_infinity();
                let mut best_idx = usize::MAX;
                for wy in 0..window {
                    let iy = (oy * stride + wy) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for wx in 0..window {
                        let ix = (ox * stride + wx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let idx = base + iy as usize * w + ix as usize;
                        let v = x[idx];
                        if best_idx == usize::MAX || v > best {
                            best = v;
                            best_idx = idx;
                        }
                    }
                }
                let o = (ch * oh + oy) * ow + ox;
                out[o] = best;
                winners[o] = best_idx;
            }
        }
    }
}

/// 2x2, stride-2 max pooling with floor semantics on odd extents.
pub fn maxpool2<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, ArgmaxMap)> {
    maxpool(input, PoolGeometry::TWO_BY_TWO)
}

pub fn maxpool<T: Scalar>(input: &Tensor<T>, geom: PoolGeometry) -> Result<(Tensor<T>, ArgmaxMap)> {
    if input.rank() != 3 {
        return Err(Error::dim(format!(
            "maxpool expects [c,h,w], got {:?}",
            input.shape
        )));
    }
    let (c, h, w) = (input.shape[0], input.shape[1], input.shape[2]);
    let (oh, ow) = geom.output_dims(h, w).ok_or_else(|| {
        Error::dim(format!(
            "maxpool window {}x{} does not fit input {:?}",
            geom.window, geom.window, input.shape
        ))
    })?;
    let mut out = vec![T::zero(); c * oh * ow];
    let mut winners = vec![0; c * oh * ow];
    maxpool_image(&input.data, c, h, w, geom, oh, ow, &mut out, &mut winners);
    Ok((
        Tensor::new(vec![c, oh, ow], out)?,
        ArgmaxMap {
            input_shape: input.shape.clone(),
            output_shape: vec![c, oh, ow],
            winners,
        },
    ))
}

pub fn maxpool2_backward<T: Scalar>(grad_out: &Tensor<T>, map: &ArgmaxMap) -> Result<Tensor<T>> {
    map.scatter(grad_out)
}

/// Per-channel spatial maximum: `[c,h,w] -> [c]`.
pub fn global_max_pool<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, ArgmaxMap)> {
    if input.rank() != 3 {
        return Err(Error::dim(format!(
            "global_max_pool expects [c,h,w], got {:?}",
            input.shape
        )));
    }
    let c = input.shape[0];
    let mut out = vec![T::zero(); c];
    let mut winners = vec![0; c];
    global_max_pool_image(&input.data, c, &mut out, &mut winners);
    Ok((
        Tensor::new(vec![c], out)?,
        ArgmaxMap {
            input_shape: input.shape.clone(),
            output_shape: vec![c],
            winners,
        },
    ))
}

pub(crate) fn global_max_pool_image<T: Scalar>(
    x: &[T],
    c: usize,
    out: &mut [T],
    winners: &mut [usize],
) {
    let plane = x.len() / c;
    for ch in 0..c {
        let base = ch * plane;
        let mut best_idx = base;
        for idx in base + 1..base + plane {
            if x[idx] > x[best_idx] {
                best_idx = idx;
            }
        }
        out[ch] = x[best_idx];
        winners[ch] = best_idx;
    }
}
