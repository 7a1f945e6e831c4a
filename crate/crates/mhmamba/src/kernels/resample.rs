//! Trilinear 2x upsampling with half-pixel alignment.
//!
//! Output voxel o samples source coordinate (o + 0.5) / 2 - 0.5, clamped to
//! the valid range, matching align_corners=false resampling. The adjoint
//! scatters each output gradient to its eight source corners.

use crate::error::{Error, Result};
use crate::par;
use crate::scalar::Scalar;
use crate::volume::Volume5;

/// Per-axis interpolation table: lower index, upper index, upper weight.
fn axis_table<T: Scalar>(out_n: usize, in_n: usize) -> Vec<(usize, usize, T)> {
    (0..out_n)
        .map(|o| {
            let s = ((o as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (in_n - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(in_n - 1);
            (i0, i1, T::from_f64(s - i0 as f64))
        })
        .collect()
}

/// Doubles the three spatial extents of `x`.
pub fn upsample_trilinear_2x<T: Scalar>(x: &Volume5<T>) -> Result<Volume5<T>> {
    let (b_n, c_n, d, h, w) = x.dims();
    if d == 0 || h == 0 || w == 0 {
        return Err(Error::shape("upsample_trilinear_2x", "empty spatial extent".to_string()));
    }
    let (od, oh, ow) = (2 * d, 2 * h, 2 * w);
    let td = axis_table::<T>(od, d);
    let th = axis_table::<T>(oh, h);
    let tw = axis_table::<T>(ow, w);
    let mut out = Volume5::zeros([b_n, c_n, od, oh, ow]);
    par::for_each_slab(out.data_mut(), od * oh * ow, |i, y| {
        let xs = x.channel(i / c_n, i % c_n);
        let mut j = 0;
        for &(d0, d1, fd) in &td {
            let gd = T::ONE - fd;
            for &(h0, h1, fh) in &th {
                let gh = T::ONE - fh;
                let r00 = &xs[(d0 * h + h0) * w..][..w];
                let r01 = &xs[(d0 * h + h1) * w..][..w];
                let r10 = &xs[(d1 * h + h0) * w..][..w];
                let r11 = &xs[(d1 * h + h1) * w..][..w];
                for &(w0, w1, fw) in &tw {
                    let gw = T::ONE - fw;
                    let c00 = r00[w0] * gw + r00[w1] * fw;
                    let c01 = r01[w0] * gw + r01[w1] * fw;
                    let c10 = r10[w0] * gw + r10[w1] * fw;
                    let c11 = r11[w0] * gw + r11[w1] * fw;
                    y[j] = (c00 * gh + c01 * fh) * gd + (c10 * gh + c11 * fh) * fd;
                    j += 1;
                }
            }
        }
    });
    Ok(out)
}

/// Adjoint of `upsample_trilinear_2x`: accumulates output gradients back to
/// the halved grid.
pub fn upsample_trilinear_2x_backward<T: Scalar>(
    grad_out: &Volume5<T>,
    in_shape: [usize; 5],
) -> Result<Volume5<T>> {
    let [b_n, c_n, d, h, w] = in_shape;
    let [gb, gc, gd_, gh_, gw_] = grad_out.shape();
    if gb != b_n || gc != c_n || gd_ != 2 * d || gh_ != 2 * h || gw_ != 2 * w {
        return Err(Error::shape(
            "upsample_trilinear_2x_backward",
            format!("grad shape {:?} is not double of {:?}", grad_out.shape(), in_shape),
        ));
    }
    let td = axis_table::<T>(2 * d, d);
    let th = axis_table::<T>(2 * h, h);
    let tw = axis_table::<T>(2 * w, w);
    let mut dx = Volume5::zeros(in_shape);
    par::for_each_slab(dx.data_mut(), d * h * w, |i, acc| {
        let gs = grad_out.channel(i / c_n, i % c_n);
        let mut j = 0;
        for &(d0, d1, fd) in &td {
            let gdw = T::ONE - fd;
            for &(h0, h1, fh) in &th {
                let ghw = T::ONE - fh;
                for &(w0, w1, fw) in &tw {
                    let g = gs[j];
                    j += 1;
                    let gww = T::ONE - fw;
                    acc[(d0 * h + h0) * w + w0] += g * gdw * ghw * gww;
                    acc[(d0 * h + h0) * w + w1] += g * gdw * ghw * fw;
                    acc[(d0 * h + h1) * w + w0] += g * gdw * fh * gww;
                    acc[(d0 * h + h1) * w + w1] += g * gdw * fh * fw;
                    acc[(d1 * h + h0) * w + w0] += g * fd * ghw * gww;
                    acc[(d1 * h + h0) * w + w1] += g * fd * ghw * fw;
                    acc[(d1 * h + h1) * w + w0] += g * fd * fh * gww;
                    acc[(d1 * h + h1) * w + w1] += g * fd * fh * fw;
                }
            }
        }
    });
    Ok(dx)
}
