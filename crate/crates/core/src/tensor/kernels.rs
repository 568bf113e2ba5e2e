//! Forward kernels and their adjoints. Everything here works on plain
//! [`Tensor`] values; [`super::Tape`] wires them into the gradient graph.

use rayon::prelude::*;

use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Work size (multiply-adds) above which GEMM rows are spread over threads.
const PAR_THRESHOLD: usize = 1 << 16;

/// `c += a · b` with `a: m×k`, `b: k×n`, `c: m×n`.
pub(crate) fn gemm_nn<T: Element>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    let row = |(i, crow): (usize, &mut [T])| {
        let arow = &a[i * k..(i + 1) * k];
        for (t, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let brow = &b[t * n..(t + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        c.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        c.chunks_mut(n).enumerate().for_each(row);
    }
}

/// `c += a · bᵀ` with `a: m×k`, `b: n×k`, `c: m×n`.
pub(crate) fn gemm_nt<T: Element>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    let row = |(i, crow): (usize, &mut [T])| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, cv) in crow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            *cv += acc;
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        c.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        c.chunks_mut(n).enumerate().for_each(row);
    }
}

/// `c += aᵀ · b` with `a: k×m`, `b: k×n`, `c: m×n`.
pub(crate) fn gemm_tn<T: Element>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    let row = |(i, crow): (usize, &mut [T])| {
        for t in 0..k {
            let av = a[t * m + i];
            if av == T::zero() {
                continue;
            }
            let brow = &b[t * n..(t + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        c.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        c.chunks_mut(n).enumerate().for_each(row);
    }
}

/// Batch/row/inner/column extents of a matmul, after validating shapes.
#[derive(Debug, Clone, Copy)]
pub(crate) struct MatmulDims {
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    /// `b` is a single matrix shared by every batch entry of `a`.
    pub broadcast_b: bool,
}

pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> Result<MatmulDims> {
    let mismatch = || Error::dim(format!("matmul of {a:?} by {b:?}"));
    match (a.len(), b.len()) {
        (2, 2) if a[1] == b[0] => Ok(MatmulDims {
            batch: 1,
            m: a[0],
            k: a[1],
            n: b[1],
            broadcast_b: true,
        }),
        (3, 2) if a[2] == b[0] => Ok(MatmulDims {
            batch: a[0],
            m: a[1],
            k: a[2],
            n: b[1],
            broadcast_b: true,
        }),
        (3, 3) if a[0] == b[0] && a[2] == b[1] => Ok(MatmulDims {
            batch: a[0],
            m: a[1],
            k: a[2],
            n: b[2],
            broadcast_b: false,
        }),
        _ => Err(mismatch()),
    }
}

/// Matrix product with an optional leading batch axis. `b` may be a plain
/// matrix, in which case it is broadcast over the batch.
pub fn matmul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let d = matmul_dims(a.shape(), b.shape())?;
    let mut out = vec![T::zero(); d.batch * d.m * d.n];
    for bi in 0..d.batch {
        let aslice = &a.data()[bi * d.m * d.k..(bi + 1) * d.m * d.k];
        let bslice = if d.broadcast_b {
            b.data()
        } else {
            &b.data()[bi * d.k * d.n..(bi + 1) * d.k * d.n]
        };
        gemm_nn(
            d.m,
            d.k,
            d.n,
            aslice,
            bslice,
            &mut out[bi * d.m * d.n..(bi + 1) * d.m * d.n],
        );
    }
    let shape = if a.rank() == 3 {
        vec![d.batch, d.m, d.n]
    } else {
        vec![d.m, d.n]
    };
    Tensor::new(shape, out)
}

pub(crate) fn matmul_backward<T: Element>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    grad: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let d = matmul_dims(a.shape(), b.shape()).expect("validated in forward");
    let mut ga = vec![T::zero(); a.numel()];
    let mut gb = vec![T::zero(); b.numel()];
    for bi in 0..d.batch {
        let g = &grad.data()[bi * d.m * d.n..(bi + 1) * d.m * d.n];
        let aslice = &a.data()[bi * d.m * d.k..(bi + 1) * d.m * d.k];
        let (bslice, gbslice) = if d.broadcast_b {
            (b.data(), &mut gb[..])
        } else {
            let r = bi * d.k * d.n..(bi + 1) * d.k * d.n;
            (&b.data()[r.clone()], &mut gb[r])
        };
        gemm_nt(
            d.m,
            d.n,
            d.k,
            g,
            bslice,
            &mut ga[bi * d.m * d.k..(bi + 1) * d.m * d.k],
        );
        gemm_tn(d.k, d.m, d.n, aslice, g, gbslice);
    }
    (
        Tensor::new(a.shape().to_vec(), ga).expect("same shape"),
        Tensor::new(b.shape().to_vec(), gb).expect("same shape"),
    )
}

/// Reorders axes; `axes[i]` names the source axis of output axis `i`.
pub fn permute<T: Element>(x: &Tensor<T>, axes: &[usize]) -> Result<Tensor<T>> {
    let rank = x.rank();
    let mut seen = vec![false; rank];
    if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
        return Err(Error::dim(format!(
            "invalid permutation {axes:?} for rank {rank}"
        )));
    }
    let in_shape = x.shape();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(x.numel());
    let mut idx = vec![0usize; rank];
    let src = x.data();
    for _ in 0..x.numel() {
        let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(src[off]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    Tensor::new(out_shape, out)
}

pub(crate) fn inverse_permutation(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

/// Softmax over the last axis, stabilized by subtracting the slice maximum.
pub fn softmax_lastdim<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let last = *x.shape().last().unwrap_or(&1);
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(last) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Tensor::new(x.shape().to_vec(), out).expect("same shape")
}

pub(crate) fn softmax_backward<T: Element>(y: &Tensor<T>, grad: &Tensor<T>) -> Tensor<T> {
    let last = *y.shape().last().unwrap_or(&1);
    let mut out = vec![T::zero(); y.numel()];
    for ((o, yr), gr) in out
        .chunks_mut(last)
        .zip(y.data().chunks(last))
        .zip(grad.data().chunks(last))
    {
        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        for ((ov, &yv), &gv) in o.iter_mut().zip(yr).zip(gr) {
            *ov = yv * (gv - dot);
        }
    }
    Tensor::new(y.shape().to_vec(), out).expect("same shape")
}

#[inline]
fn std_normal_cdf<T: Element>(x: T) -> T {
    let half = T::from_f64_lossy(0.5);
    half * (T::one() + (x * T::from_f64_lossy(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

/// Exact GELU, `x · Φ(x)`.
pub fn gelu<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v * std_normal_cdf(v))
}

pub(crate) fn gelu_backward<T: Element>(x: &Tensor<T>, grad: &Tensor<T>) -> Tensor<T> {
    let inv_sqrt_2pi = T::from_f64_lossy(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    let half = T::from_f64_lossy(0.5);
    let data = x
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&v, &g)| {
            let pdf = inv_sqrt_2pi * (-half * v * v).exp();
            g * (std_normal_cdf(v) + v * pdf)
        })
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

/// Layer normalization over the last axis.
pub fn layer_norm<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    let c = *x.shape().last().unwrap_or(&1);
    if gamma.numel() != c || beta.numel() != c {
        return Err(Error::dim(format!(
            "layer norm over {c} features with gamma {:?} / beta {:?}",
            gamma.shape(),
            beta.shape()
        )));
    }
    let eps = T::from_f64_lossy(eps);
    let n = T::from_usize(c).expect("usize to float");
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(c) {
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let rstd = T::one() / (var + eps).sqrt();
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) * rstd * gamma.data()[j] + beta.data()[j];
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Gradients of a normalization over `rows` independent slices of length
/// `len`, where the affine parameter of element `j` of a slice is selected
/// by `channel(row, j)`.
#[allow(clippy::too_many_arguments)]
fn norm_backward<T: Element>(
    x: &[T],
    gamma: &[T],
    grad: &[T],
    len: usize,
    eps: f64,
    channel: impl Fn(usize, usize) -> usize,
    gx: &mut [T],
    ggamma: &mut [T],
    gbeta: &mut [T],
) {
    let eps = T::from_f64_lossy(eps);
    let n = T::from_usize(len).expect("usize to float");
    for (r, ((xr, gr), gxr)) in x
        .chunks(len)
        .zip(grad.chunks(len))
        .zip(gx.chunks_mut(len))
        .enumerate()
    {
        let mean = xr.iter().copied().sum::<T>() / n;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let rstd = T::one() / (var + eps).sqrt();
        let mut sum_dxhat = T::zero();
        let mut sum_dxhat_xhat = T::zero();
        for j in 0..len {
            let ch = channel(r, j);
            let xhat = (xr[j] - mean) * rstd;
            ggamma[ch] += gr[j] * xhat;
            gbeta[ch] += gr[j];
            let dxhat = gr[j] * gamma[ch];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
        }
        let mean_dxhat = sum_dxhat / n;
        let mean_dxhat_xhat = sum_dxhat_xhat / n;
        for j in 0..len {
            let ch = channel(r, j);
            let xhat = (xr[j] - mean) * rstd;
            let dxhat = gr[j] * gamma[ch];
            gxr[j] = rstd * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
        }
    }
}

pub(crate) fn layer_norm_backward<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    grad: &Tensor<T>,
    eps: f64,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let c = gamma.numel();
    let mut gx = vec![T::zero(); x.numel()];
    let mut gg = vec![T::zero(); c];
    let mut gb = vec![T::zero(); c];
    norm_backward(
        x.data(),
        gamma.data(),
        grad.data(),
        c,
        eps,
        |_, j| j,
        &mut gx,
        &mut gg,
        &mut gb,
    );
    (
        Tensor::new(x.shape().to_vec(), gx).expect("same shape"),
        Tensor::new(gamma.shape().to_vec(), gg).expect("same shape"),
        Tensor::new(gamma.shape().to_vec(), gb).expect("same shape"),
    )
}

/// Group normalization of a `C×H×W` map with per-channel affine parameters.
pub fn group_norm<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    groups: usize,
    eps: f64,
) -> Result<Tensor<T>> {
    let (c, spatial) = group_norm_dims(x, gamma, groups)?;
    let per_group = c / groups * spatial;
    let eps_t = T::from_f64_lossy(eps);
    let n = T::from_usize(per_group).expect("usize to float");
    let mut out = x.data().to_vec();
    for (g, chunk) in out.chunks_mut(per_group).enumerate() {
        let mean = chunk.iter().copied().sum::<T>() / n;
        let var = chunk.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let rstd = T::one() / (var + eps_t).sqrt();
        for (j, v) in chunk.iter_mut().enumerate() {
            let ch = g * (c / groups) + j / spatial;
            *v = (*v - mean) * rstd * gamma.data()[ch] + beta.data()[ch];
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

fn group_norm_dims<T: Element>(x: &Tensor<T>, gamma: &Tensor<T>, groups: usize) -> Result<(usize, usize)> {
    if x.rank() != 3 {
        return Err(Error::dim(format!("group norm expects C×H×W, got {:?}", x.shape())));
    }
    let c = x.shape()[0];
    if groups == 0 || c % groups != 0 {
        return Err(Error::config(
            "norm_groups",
            format!("{groups} groups do not divide {c} channels"),
        ));
    }
    if gamma.numel() != c {
        return Err(Error::dim(format!("group norm gamma {:?} for {c} channels", gamma.shape())));
    }
    Ok((c, x.shape()[1] * x.shape()[2]))
}

pub(crate) fn group_norm_backward<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    grad: &Tensor<T>,
    groups: usize,
    eps: f64,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let c = x.shape()[0];
    let spatial = x.shape()[1] * x.shape()[2];
    let cpg = c / groups;
    let mut gx = vec![T::zero(); x.numel()];
    let mut gg = vec![T::zero(); c];
    let mut gb = vec![T::zero(); c];
    norm_backward(
        x.data(),
        gamma.data(),
        grad.data(),
        cpg * spatial,
        eps,
        |g, j| g * cpg + j / spatial,
        &mut gx,
        &mut gg,
        &mut gb,
    );
    (
        Tensor::new(x.shape().to_vec(), gx).expect("same shape"),
        Tensor::new(gamma.shape().to_vec(), gg).expect("same shape"),
        Tensor::new(gamma.shape().to_vec(), gb).expect("same shape"),
    )
}

/// Geometry of a 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub fn new(stride: usize, pad: usize, groups: usize) -> Self {
        Self { stride, pad, groups }
    }

    /// Output extent along one axis, `floor((len + 2p − k)/s) + 1`.
    pub fn out_len(&self, len: usize, kernel: usize) -> Result<usize> {
        if self.stride == 0 {
            return Err(Error::config("stride", "must be positive"));
        }
        if len + 2 * self.pad < kernel {
            return Err(Error::dim(format!(
                "input extent {len} with padding {} is smaller than kernel {kernel}",
                self.pad
            )));
        }
        Ok((len + 2 * self.pad - kernel) / self.stride + 1)
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    cin_g: usize,
    cout_g: usize,
}

fn conv_geom<T: Element>(x: &Tensor<T>, w: &Tensor<T>, spec: ConvSpec) -> Result<ConvGeom> {
    if x.rank() != 3 || w.rank() != 4 {
        return Err(Error::dim(format!(
            "conv2d expects C×H×W input and 4-d kernel, got {:?} and {:?}",
            x.shape(),
            w.shape()
        )));
    }
    let (c_in, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (c_out, cin_g, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let g = spec.groups;
    if g == 0 || c_in % g != 0 || c_out % g != 0 {
        return Err(Error::config(
            "groups",
            format!("{g} groups incompatible with {c_in} input / {c_out} output channels"),
        ));
    }
    if cin_g != c_in / g {
        return Err(Error::dim(format!(
            "kernel expects {cin_g} channels per group, input has {}",
            c_in / g
        )));
    }
    Ok(ConvGeom {
        h,
        w: wd,
        c_out,
        kh,
        kw,
        ho: spec.out_len(h, kh)?,
        wo: spec.out_len(wd, kw)?,
        cin_g,
        cout_g: c_out / g,
    })
}

/// Unfolds `channels` input planes into a `(channels·kh·kw) × (ho·wo)` matrix.
fn im2col<T: Element>(x: &[T], g: &ConvGeom, spec: ConvSpec, col: &mut [T]) {
    let hw_out = g.ho * g.wo;
    for c in 0..g.cin_g {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut col[row * hw_out..(row + 1) * hw_out];
                for oy in 0..g.ho {
                    let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                    for ox in 0..g.wo {
                        let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                        dst[oy * g.wo + ox] = if iy >= 0
                            && ix >= 0
                            && (iy as usize) < g.h
                            && (ix as usize) < g.w
                        {
                            plane[iy as usize * g.w + ix as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Element>(col: &[T], g: &ConvGeom, spec: ConvSpec, dx: &mut [T]) {
    let hw_out = g.ho * g.wo;
    for c in 0..g.cin_g {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &col[row * hw_out..(row + 1) * hw_out];
                for oy in 0..g.ho {
                    let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                    if iy < 0 || iy as usize >= g.h {
                        continue;
                    }
                    for ox in 0..g.wo {
                        let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            plane[iy as usize * g.w + ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Grouped 2-D convolution of a `C_in×H×W` input with zero padding.
pub fn conv2d<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: ConvSpec,
) -> Result<Tensor<T>> {
    let g = conv_geom(x, w, spec)?;
    if let Some(b) = bias {
        if b.numel() != g.c_out {
            return Err(Error::dim(format!("bias {:?} for {} outputs", b.shape(), g.c_out)));
        }
    }
    let hw_out = g.ho * g.wo;
    let kdim = g.cin_g * g.kh * g.kw;
    let mut out = vec![T::zero(); g.c_out * hw_out];
    let group_out = |(gi, out_g): (usize, &mut [T])| {
        let xg = &x.data()[gi * g.cin_g * g.h * g.w..(gi + 1) * g.cin_g * g.h * g.w];
        let wg = &w.data()[gi * g.cout_g * kdim..(gi + 1) * g.cout_g * kdim];
        let mut col = vec![T::zero(); kdim * hw_out];
        im2col(xg, &g, spec, &mut col);
        gemm_nn(g.cout_g, kdim, hw_out, wg, &col, out_g);
        if let Some(b) = bias {
            for (o, plane) in out_g.chunks_mut(hw_out).enumerate() {
                let bv = b.data()[gi * g.cout_g + o];
                plane.iter_mut().for_each(|v| *v += bv);
            }
        }
    };
    let chunk = g.cout_g * hw_out;
    if spec.groups > 1 && g.c_out * kdim * hw_out >= PAR_THRESHOLD {
        out.par_chunks_mut(chunk).enumerate().for_each(group_out);
    } else {
        out.chunks_mut(chunk).enumerate().for_each(group_out);
    }
    Tensor::new(vec![g.c_out, g.ho, g.wo], out)
}

/// Returns gradients with respect to input, kernel and (when present) bias.
pub(crate) fn conv2d_backward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    has_bias: bool,
    spec: ConvSpec,
    grad: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Option<Tensor<T>>) {
    let g = conv_geom(x, w, spec).expect("validated in forward");
    let hw_out = g.ho * g.wo;
    let kdim = g.cin_g * g.kh * g.kw;
    let groups = spec.groups;
    let in_chunk = g.cin_g * g.h * g.w;
    let w_chunk = g.cout_g * kdim;

    let per_group = |gi: usize, dx_g: &mut [T], dw_g: &mut [T]| {
        let xg = &x.data()[gi * in_chunk..(gi + 1) * in_chunk];
        let wg = &w.data()[gi * w_chunk..(gi + 1) * w_chunk];
        let gg = &grad.data()[gi * g.cout_g * hw_out..(gi + 1) * g.cout_g * hw_out];
        let mut col = vec![T::zero(); kdim * hw_out];
        im2col(xg, &g, spec, &mut col);
        gemm_nt(g.cout_g, hw_out, kdim, gg, &col, dw_g);
        let mut dcol = vec![T::zero(); kdim * hw_out];
        gemm_tn(kdim, g.cout_g, hw_out, wg, gg, &mut dcol);
        col2im(&dcol, &g, spec, dx_g);
    };

    let mut dx = vec![T::zero(); x.numel()];
    let mut dw = vec![T::zero(); w.numel()];
    if groups > 1 && g.c_out * kdim * hw_out >= PAR_THRESHOLD {
        dx.par_chunks_mut(in_chunk)
            .zip(dw.par_chunks_mut(w_chunk))
            .enumerate()
            .for_each(|(gi, (a, b))| per_group(gi, a, b));
    } else {
        dx.chunks_mut(in_chunk)
            .zip(dw.chunks_mut(w_chunk))
            .enumerate()
            .for_each(|(gi, (a, b))| per_group(gi, a, b));
    }
    let db = has_bias.then(|| {
        let sums = grad
            .data()
            .chunks(hw_out)
            .map(|plane| plane.iter().copied().sum())
            .collect();
        Tensor::new(vec![g.c_out], sums).expect("bias shape")
    });
    (
        Tensor::new(x.shape().to_vec(), dx).expect("same shape"),
        Tensor::new(w.shape().to_vec(), dw).expect("same shape"),
        db,
    )
}

/// Source taps of one output coordinate under half-pixel-center sampling.
#[derive(Debug, Clone, Copy)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
}

fn taps(src_len: usize, dst_len: usize) -> Vec<Tap> {
    let scale = src_len as f64 / dst_len as f64;
    (0..dst_len)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (s.floor() as usize).min(src_len - 1);
            let hi = (lo + 1).min(src_len - 1);
            Tap {
                lo,
                hi,
                frac: s - lo as f64,
            }
        })
        .collect()
}

/// Bilinear resampling of a `C×H×W` map with half-pixel centers
/// (corners not aligned). Reads past the border clamp to the edge sample.
pub fn bilinear_resize<T: Element>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    if x.rank() != 3 {
        return Err(Error::dim(format!("resize expects C×H×W, got {:?}", x.shape())));
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::dim("resize target must be at least 1×1"));
    }
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let ty = taps(h, out_h);
    let tx = taps(w, out_w);
    let mut out = vec![T::zero(); c * out_h * out_w];
    for (ch, plane) in out.chunks_mut(out_h * out_w).enumerate() {
        let src = &x.data()[ch * h * w..(ch + 1) * h * w];
        for (oy, yt) in ty.iter().enumerate() {
            let fy = T::from_f64_lossy(yt.frac);
            for (ox, xt) in tx.iter().enumerate() {
                let fx = T::from_f64_lossy(xt.frac);
                let top = src[yt.lo * w + xt.lo] * (T::one() - fx) + src[yt.lo * w + xt.hi] * fx;
                let bot = src[yt.hi * w + xt.lo] * (T::one() - fx) + src[yt.hi * w + xt.hi] * fx;
                plane[oy * out_w + ox] = top * (T::one() - fy) + bot * fy;
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out)
}

pub(crate) fn bilinear_resize_backward<T: Element>(
    in_shape: &[usize],
    grad: &Tensor<T>,
) -> Tensor<T> {
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (out_h, out_w) = (grad.shape()[1], grad.shape()[2]);
    if (h, w) == (out_h, out_w) {
        return grad.clone();
    }
    let ty = taps(h, out_h);
    let tx = taps(w, out_w);
    let mut dx = vec![T::zero(); c * h * w];
    for (ch, plane) in dx.chunks_mut(h * w).enumerate() {
        let g = &grad.data()[ch * out_h * out_w..(ch + 1) * out_h * out_w];
        for (oy, yt) in ty.iter().enumerate() {
            let fy = T::from_f64_lossy(yt.frac);
            for (ox, xt) in tx.iter().enumerate() {
                let fx = T::from_f64_lossy(xt.frac);
                let gv = g[oy * out_w + ox];
                let top = gv * (T::one() - fy);
                let bot = gv * fy;
                plane[yt.lo * w + xt.lo] += top * (T::one() - fx);
                plane[yt.lo * w + xt.hi] += top * fx;
                plane[yt.hi * w + xt.lo] += bot * (T::one() - fx);
                plane[yt.hi * w + xt.hi] += bot * fx;
            }
        }
    }
    Tensor::new(in_shape.to_vec(), dx).expect("same shape")
}

/// Mean per-pixel cross-entropy of `K×P` logits against class targets.
/// Returns the loss and the number of scored pixels; a fully ignored target
/// yields a loss of zero.
pub fn cross_entropy<T: Element>(logits: &Tensor<T>, target: &[u8], ignore_index: u8) -> Result<(T, usize)> {
    let (k, p) = ce_dims(logits, target)?;
    let mut total = 0.0f64;
    let mut count = 0usize;
    let data = logits.data();
    for (px, &t) in target.iter().enumerate() {
        if t == ignore_index {
            continue;
        }
        let t = t as usize;
        if t >= k {
            return Err(Error::Data(format!("target class {t} out of range for {k} classes")));
        }
        let max = (0..k).map(|c| data[c * p + px].to_f64_lossy()).fold(f64::NEG_INFINITY, f64::max);
        let lse = (0..k)
            .map(|c| (data[c * p + px].to_f64_lossy() - max).exp())
            .sum::<f64>()
            .ln()
            + max;
        total += lse - data[t * p + px].to_f64_lossy();
        count += 1;
    }
    let loss = if count == 0 { 0.0 } else { total / count as f64 };
    Ok((T::from_f64_lossy(loss), count))
}

fn ce_dims<T: Element>(logits: &Tensor<T>, target: &[u8]) -> Result<(usize, usize)> {
    if logits.rank() < 2 {
        return Err(Error::dim(format!("logits {:?} need a class axis", logits.shape())));
    }
    let k = logits.shape()[0];
    let p = logits.numel() / k;
    if p != target.len() {
        return Err(Error::dim(format!(
            "{p} logit pixels against {} target pixels",
            target.len()
        )));
    }
    Ok((k, p))
}

pub(crate) fn cross_entropy_backward<T: Element>(
    logits: &Tensor<T>,
    target: &[u8],
    ignore_index: u8,
    count: usize,
    grad: T,
) -> Tensor<T> {
    let (k, p) = ce_dims(logits, target).expect("validated in forward");
    let mut out = vec![T::zero(); logits.numel()];
    if count == 0 {
        return Tensor::new(logits.shape().to_vec(), out).expect("same shape");
    }
    let scale = grad / T::from_usize(count).expect("usize to float");
    let data = logits.data();
    for (px, &t) in target.iter().enumerate() {
        if t == ignore_index {
            continue;
        }
        let max = (0..k).map(|c| data[c * p + px]).fold(T::neg_infinity(), T::max);
        let sum: T = (0..k).map(|c| (data[c * p + px] - max).exp()).sum();
        for c in 0..k {
            let prob = (data[c * p + px] - max).exp() / sum;
            let onehot = if c == t as usize { T::one() } else { T::zero() };
            out[c * p + px] = (prob - onehot) * scale;
        }
    }
    Tensor::new(logits.shape().to_vec(), out).expect("same shape")
}

/// Concatenates tensors along the first axis; trailing extents must agree.
pub fn concat0<T: Element>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts.first().ok_or_else(|| Error::dim("concat of zero tensors"))?;
    let tail = &first.shape()[1..];
    let mut lead = 0;
    let mut data = Vec::new();
    for p in parts {
        if p.rank() != first.rank() || &p.shape()[1..] != tail {
            return Err(Error::dim(format!(
                "concat of {:?} with {:?}",
                first.shape(),
                p.shape()
            )));
        }
        lead += p.shape()[0];
        data.extend_from_slice(p.data());
    }
    let mut shape = vec![lead];
    shape.extend_from_slice(tail);
    Tensor::new(shape, data)
}
