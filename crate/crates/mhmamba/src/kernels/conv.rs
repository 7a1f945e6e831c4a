//! Dense 3D convolution (cross-correlation) with zero padding, cubic stride,
//! and channel groups, plus the two adjoint kernels needed for backprop.
//!
//! Weight layout is (C_out, C_in/groups, kD, kH, kW). The inner loops run
//! along the contiguous W axis as saxpy/dot operations so they vectorize;
//! parallelism is one task per (batch, output-channel) slab with no shared
//! writes, which keeps results bitwise identical to the sequential path.

use crate::error::{Error, Result};
use crate::par;
use crate::scalar::Scalar;
use crate::volume::Volume5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv3dSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Default for Conv3dSpec {
    fn default() -> Self {
        Conv3dSpec { stride: 1, padding: 0, groups: 1 }
    }
}

impl Conv3dSpec {
    pub fn new(stride: usize, padding: usize, groups: usize) -> Self {
        Conv3dSpec { stride, padding, groups }
    }
}

fn out_extent(n: usize, k: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = n + 2 * padding;
    if padded < k {
        return Err(Error::shape(
            "conv3d",
            format!("kernel extent {} exceeds padded input extent {}", k, padded),
        ));
    }
    Ok((padded - k) / stride + 1)
}

/// Output shape of `conv3d` for the given input and weight shapes.
pub fn conv3d_out_shape(
    x_shape: [usize; 5],
    w_shape: [usize; 5],
    spec: Conv3dSpec,
) -> Result<[usize; 5]> {
    let [b, c_in, d, h, w] = x_shape;
    let [c_out, c_in_g, kd, kh, kw] = w_shape;
    if spec.stride == 0 {
        return Err(Error::config("conv3d stride must be positive".to_string()));
    }
    if spec.groups == 0 || c_in % spec.groups != 0 || c_out % spec.groups != 0 {
        return Err(Error::shape(
            "conv3d",
            format!(
                "groups {} must divide input channels {} and output channels {}",
                spec.groups, c_in, c_out
            ),
        ));
    }
    if c_in_g != c_in / spec.groups {
        return Err(Error::shape(
            "conv3d",
            format!(
                "weight channel axis holds {}, expected input channels {} / groups {} = {}",
                c_in_g,
                c_in,
                spec.groups,
                c_in / spec.groups
            ),
        ));
    }
    if kd == 0 || kh == 0 || kw == 0 {
        return Err(Error::shape("conv3d", "kernel extents must be positive".to_string()));
    }
    Ok([
        b,
        c_out,
        out_extent(d, kd, spec.stride, spec.padding)?,
        out_extent(h, kh, spec.stride, spec.padding)?,
        out_extent(w, kw, spec.stride, spec.padding)?,
    ])
}

/// Valid output index range [lo, hi) along one axis for kernel offset `k`:
/// the positions where `o*stride + k - padding` lands inside [0, n).
#[inline]
fn valid_range(out_n: usize, in_n: usize, k: usize, stride: usize, padding: usize) -> (usize, usize) {
    let lo = padding.saturating_sub(k).div_ceil(stride);
    let max_in = in_n + padding;
    if k >= max_in {
        return (0, 0);
    }
    let hi = ((max_in - 1 - k) / stride + 1).min(out_n);
    (lo.min(hi), hi)
}

#[inline]
fn axpy<T: Scalar>(y: &mut [T], x: &[T], a: T) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
fn axpy_gather<T: Scalar>(y: &mut [T], x: &[T], stride: usize, a: T) {
    for (yi, &xi) in y.iter_mut().zip(x.iter().step_by(stride)) {
        *yi += a * xi;
    }
}

#[inline]
fn axpy_scatter<T: Scalar>(y: &mut [T], stride: usize, x: &[T], a: T) {
    for (yi, &xi) in y.iter_mut().step_by(stride).zip(x) {
        *yi += a * xi;
    }
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut s = T::ZERO;
    for (&ai, &bi) in a.iter().zip(b) {
        s += ai * bi;
    }
    s
}

#[inline]
fn dot_gather<T: Scalar>(a: &[T], b: &[T], stride: usize) -> T {
    let mut s = T::ZERO;
    for (&ai, &bi) in a.iter().zip(b.iter().step_by(stride)) {
        s += ai * bi;
    }
    s
}

fn check_bias<T: Scalar>(bias: Option<&[T]>, c_out: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.len() != c_out {
            return Err(Error::shape(
                "conv3d",
                format!("bias length {} does not match output channels {}", b.len(), c_out),
            ));
        }
    }
    Ok(())
}

/// 3D cross-correlation of `x` (B, C_in, D, H, W) with `weight`
/// (C_out, C_in/groups, kD, kH, kW), zero padding on all six faces.
pub fn conv3d<T: Scalar>(
    x: &Volume5<T>,
    weight: &Volume5<T>,
    bias: Option<&[T]>,
    spec: Conv3dSpec,
) -> Result<Volume5<T>> {
    let out_shape = conv3d_out_shape(x.shape(), weight.shape(), spec)?;
    let [_, c_out, od_n, oh_n, ow_n] = out_shape;
    let [_, _, d_n, h_n, w_n] = x.shape();
    let [_, c_in_g, kd_n, kh_n, kw_n] = weight.shape();
    check_bias(bias, c_out)?;
    let c_out_g = c_out / spec.groups;
    let (s, p) = (spec.stride, spec.padding);
    let kvol = kd_n * kh_n * kw_n;

    let (d_lo, d_hi): (Vec<usize>, Vec<usize>) =
        (0..kd_n).map(|k| valid_range(od_n, d_n, k, s, p)).unzip();
    let (h_lo, h_hi): (Vec<usize>, Vec<usize>) =
        (0..kh_n).map(|k| valid_range(oh_n, h_n, k, s, p)).unzip();
    let (w_lo, w_hi): (Vec<usize>, Vec<usize>) =
        (0..kw_n).map(|k| valid_range(ow_n, w_n, k, s, p)).unzip();

    let mut out = Volume5::zeros(out_shape);
    let slab = od_n * oh_n * ow_n;
    let wdata = weight.data();
    par::for_each_slab(out.data_mut(), slab, |slab_idx, y| {
        let b = slab_idx / c_out;
        let co = slab_idx % c_out;
        let g = co / c_out_g;
        if let Some(bias) = bias {
            y.fill(bias[co]);
        }
        for ci_g in 0..c_in_g {
            let xs = x.channel(b, g * c_in_g + ci_g);
            let wk = &wdata[(co * c_in_g + ci_g) * kvol..][..kvol];
            if kvol == 1 && s == 1 && p == 0 {
                axpy(y, xs, wk[0]);
                continue;
            }
            for kd in 0..kd_n {
                for kh in 0..kh_n {
                    let wrow = &wk[(kd * kh_n + kh) * kw_n..][..kw_n];
                    for od in d_lo[kd]..d_hi[kd] {
                        let id = od * s + kd - p;
                        for oh in h_lo[kh]..h_hi[kh] {
                            let ih = oh * s + kh - p;
                            let xrow = &xs[(id * h_n + ih) * w_n..][..w_n];
                            let yrow = &mut y[(od * oh_n + oh) * ow_n..][..ow_n];
                            for kw in 0..kw_n {
                                let (lo, hi) = (w_lo[kw], w_hi[kw]);
                                if lo >= hi {
                                    continue;
                                }
                                let wv = wrow[kw];
                                let x0 = lo * s + kw - p;
                                if s == 1 {
                                    axpy(&mut yrow[lo..hi], &xrow[x0..x0 + (hi - lo)], wv);
                                } else {
                                    axpy_gather(&mut yrow[lo..hi], &xrow[x0..], s, wv);
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    Ok(out)
}

/// Gradient of `conv3d` with respect to its input: scatters
/// `grad_out * weight` back through the correlation geometry.
pub fn conv3d_backward_input<T: Scalar>(
    grad_out: &Volume5<T>,
    weight: &Volume5<T>,
    x_shape: [usize; 5],
    spec: Conv3dSpec,
) -> Result<Volume5<T>> {
    let expect = conv3d_out_shape(x_shape, weight.shape(), spec)?;
    if grad_out.shape() != expect {
        return Err(Error::shape(
            "conv3d_backward_input",
            format!("grad shape {:?}, expected {:?}", grad_out.shape(), expect),
        ));
    }
    let [_, c_out, od_n, oh_n, ow_n] = expect;
    let [_, c_in, d_n, h_n, w_n] = x_shape;
    let [_, c_in_g, kd_n, kh_n, kw_n] = weight.shape();
    let c_out_g = c_out / spec.groups;
    let (s, p) = (spec.stride, spec.padding);
    let kvol = kd_n * kh_n * kw_n;

    let (d_lo, d_hi): (Vec<usize>, Vec<usize>) =
        (0..kd_n).map(|k| valid_range(od_n, d_n, k, s, p)).unzip();
    let (h_lo, h_hi): (Vec<usize>, Vec<usize>) =
        (0..kh_n).map(|k| valid_range(oh_n, h_n, k, s, p)).unzip();
    let (w_lo, w_hi): (Vec<usize>, Vec<usize>) =
        (0..kw_n).map(|k| valid_range(ow_n, w_n, k, s, p)).unzip();

    let mut dx = Volume5::zeros(x_shape);
    let slab = d_n * h_n * w_n;
    let wdata = weight.data();
    // Each task owns one (b, ci) input slab and gathers from every output
    // channel of its group; writes stay disjoint.
    par::for_each_slab(dx.data_mut(), slab, |slab_idx, dxs| {
        let b = slab_idx / c_in;
        let ci = slab_idx % c_in;
        let g = ci / c_in_g;
        let ci_g = ci % c_in_g;
        for co_g in 0..c_out_g {
            let co = g * c_out_g + co_g;
            let gos = grad_out.channel(b, co);
            let wk = &wdata[(co * c_in_g + ci_g) * kvol..][..kvol];
            if kvol == 1 && s == 1 && p == 0 {
                axpy(dxs, gos, wk[0]);
                continue;
            }
            for kd in 0..kd_n {
                for kh in 0..kh_n {
                    let wrow = &wk[(kd * kh_n + kh) * kw_n..][..kw_n];
                    for od in d_lo[kd]..d_hi[kd] {
                        let id = od * s + kd - p;
                        for oh in h_lo[kh]..h_hi[kh] {
                            let ih = oh * s + kh - p;
                            let gorow = &gos[(od * oh_n + oh) * ow_n..][..ow_n];
                            let dxrow = &mut dxs[(id * h_n + ih) * w_n..][..w_n];
                            for kw in 0..kw_n {
                                let (lo, hi) = (w_lo[kw], w_hi[kw]);
                                if lo >= hi {
                                    continue;
                                }
                                let wv = wrow[kw];
                                let x0 = lo * s + kw - p;
                                if s == 1 {
                                    axpy(&mut dxrow[x0..x0 + (hi - lo)], &gorow[lo..hi], wv);
                                } else {
                                    axpy_scatter(&mut dxrow[x0..], s, &gorow[lo..hi], wv);
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    Ok(dx)
}

/// Gradients of `conv3d` with respect to weight and bias.
pub fn conv3d_backward_weight<T: Scalar>(
    grad_out: &Volume5<T>,
    x: &Volume5<T>,
    w_shape: [usize; 5],
    spec: Conv3dSpec,
    want_bias: bool,
) -> Result<(Volume5<T>, Option<Vec<T>>)> {
    let expect = conv3d_out_shape(x.shape(), w_shape, spec)?;
    if grad_out.shape() != expect {
        return Err(Error::shape(
            "conv3d_backward_weight",
            format!("grad shape {:?}, expected {:?}", grad_out.shape(), expect),
        ));
    }
    let [b_n, c_out, od_n, oh_n, ow_n] = expect;
    let [_, _, d_n, h_n, w_n] = x.shape();
    let [_, c_in_g, kd_n, kh_n, kw_n] = w_shape;
    let c_out_g = c_out / spec.groups;
    let (s, p) = (spec.stride, spec.padding);
    let kvol = kd_n * kh_n * kw_n;

    let (d_lo, d_hi): (Vec<usize>, Vec<usize>) =
        (0..kd_n).map(|k| valid_range(od_n, d_n, k, s, p)).unzip();
    let (h_lo, h_hi): (Vec<usize>, Vec<usize>) =
        (0..kh_n).map(|k| valid_range(oh_n, h_n, k, s, p)).unzip();
    let (w_lo, w_hi): (Vec<usize>, Vec<usize>) =
        (0..kw_n).map(|k| valid_range(ow_n, w_n, k, s, p)).unzip();

    let mut dw = Volume5::zeros(w_shape);
    // One task per output channel owns that channel's weight slab.
    par::for_each_slab(dw.data_mut(), c_in_g * kvol, |co, dwk| {
        let g = co / c_out_g;
        for b in 0..b_n {
            let gos = grad_out.channel(b, co);
            for ci_g in 0..c_in_g {
                let xs = x.channel(b, g * c_in_g + ci_g);
                let dslab = &mut dwk[ci_g * kvol..][..kvol];
                if kvol == 1 && s == 1 && p == 0 {
                    dslab[0] += dot(gos, xs);
                    continue;
                }
                for kd in 0..kd_n {
                    for kh in 0..kh_n {
                        let drow = &mut dslab[(kd * kh_n + kh) * kw_n..][..kw_n];
                        for od in d_lo[kd]..d_hi[kd] {
                            let id = od * s + kd - p;
                            for oh in h_lo[kh]..h_hi[kh] {
                                let ih = oh * s + kh - p;
                                let gorow = &gos[(od * oh_n + oh) * ow_n..][..ow_n];
                                let xrow = &xs[(id * h_n + ih) * w_n..][..w_n];
                                for kw in 0..kw_n {
                                    let (lo, hi) = (w_lo[kw], w_hi[kw]);
                                    if lo >= hi {
                                        continue;
                                    }
                                    let x0 = lo * s + kw - p;
                                    drow[kw] += if s == 1 {
                                        dot(&gorow[lo..hi], &xrow[x0..x0 + (hi - lo)])
                                    } else {
                                        dot_gather(&gorow[lo..hi], &xrow[x0..], s)
                                    };
                                }
                            }
                        }
                    }
                }
            }
        }
    });

    let db = if want_bias {
        let mut db = vec![T::ZERO; c_out];
        for b in 0..b_n {
            for (co, dbv) in db.iter_mut().enumerate() {
                *dbv += grad_out.channel(b, co).iter().copied().sum();
            }
        }
        Some(db)
    } else {
        None
    };
    Ok((dw, db))
}
