//! Hardwired 3D Sobel gradient-magnitude operator.
//!
//! Per channel, three directional filters built from the separable taps
//! smooth = [1, 2, 1] and derivative = [-1, 0, +1] (unnormalized), with
//! reflect-101 borders (index -1 maps to 1, index n maps to n-2). Reflection
//! acts per axis, so the separable passes reproduce the full 27-tap filter
//! exactly. Output is the Euclidean magnitude of the three responses.

use crate::error::Result;
use crate::par;
use crate::scalar::Scalar;
use crate::volume::Volume5;

#[derive(Clone, Copy)]
enum Tap {
    Smooth,
    Derivative,
}

impl Tap {
    #[inline]
    fn weights<T: Scalar>(self) -> [T; 3] {
        match self {
            Tap::Smooth => [T::ONE, T::from_f64(2.0), T::ONE],
            Tap::Derivative => [-T::ONE, T::ZERO, T::ONE],
        }
    }
}

#[inline]
fn reflect(i: isize, n: usize) -> usize {
    // reflect-101 for |i| within one period; a singleton axis has only
    // itself to reflect into, which zeroes the derivative tap there.
    if n == 1 {
        0
    } else if i < 0 {
        (-i) as usize
    } else if i as usize >= n {
        2 * n - 2 - i as usize
    } else {
        i as usize
    }
}

/// One filtering pass along `axis` (0=depth, 1=height, 2=width) of a single
/// (D, H, W) slab.
fn line_pass<T: Scalar>(src: &[T], dst: &mut [T], dims: [usize; 3], axis: usize, tap: Tap) {
    let [d, h, w] = dims;
    let [k0, k1, k2] = tap.weights::<T>();
    let (len, stride, lines) = match axis {
        0 => (d, h * w, h * w),
        1 => (h, w, d * w),
        2 => (w, 1, d * h),
        _ => unreachable!(),
    };
    for line in 0..lines {
        // Origin of this line in the slab.
        let base = match axis {
            0 => line,
            1 => (line / w) * (h * w) + line % w,
            _ => line * w,
        };
        for i in 0..len {
            let a = src[base + reflect(i as isize - 1, len) * stride];
            let b = src[base + i * stride];
            let c = src[base + reflect(i as isize + 1, len) * stride];
            dst[base + i * stride] = k0 * a + k1 * b + k2 * c;
        }
    }
}

/// Adjoint of `line_pass`: scatters through the same reflected geometry.
fn line_pass_adjoint<T: Scalar>(src: &[T], dst: &mut [T], dims: [usize; 3], axis: usize, tap: Tap) {
    let [d, h, w] = dims;
    let [k0, k1, k2] = tap.weights::<T>();
    let (len, stride, lines) = match axis {
        0 => (d, h * w, h * w),
        1 => (h, w, d * w),
        2 => (w, 1, d * h),
        _ => unreachable!(),
    };
    dst.fill(T::ZERO);
    for line in 0..lines {
        let base = match axis {
            0 => line,
            1 => (line / w) * (h * w) + line % w,
            _ => line * w,
        };
        for i in 0..len {
            let g = src[base + i * stride];
            dst[base + reflect(i as isize - 1, len) * stride] += k0 * g;
            dst[base + i * stride] += k1 * g;
            dst[base + reflect(i as isize + 1, len) * stride] += k2 * g;
        }
    }
}

/// Directional responses (g_depth, g_height, g_width), each shaped like `x`.
pub fn sobel3d_components<T: Scalar>(
    x: &Volume5<T>,
) -> Result<(Volume5<T>, Volume5<T>, Volume5<T>)> {
    let [b_n, c_n, d, h, w] = x.shape();
    let dims = [d, h, w];
    let n = d * h * w;
    let slabs: Vec<(Vec<T>, Vec<T>, Vec<T>)> = par::map_indexed(b_n * c_n, |i| {
        let xs = x.channel(i / c_n, i % c_n);
        let mut sw = vec![T::ZERO; n];
        let mut tmp = vec![T::ZERO; n];
        let mut gd = vec![T::ZERO; n];
        let mut gh = vec![T::ZERO; n];
        let mut gw = vec![T::ZERO; n];
        // g_depth = deriv_d(smooth_h(smooth_w(x)))
        line_pass(xs, &mut sw, dims, 2, Tap::Smooth);
        line_pass(&sw, &mut tmp, dims, 1, Tap::Smooth);
        line_pass(&tmp, &mut gd, dims, 0, Tap::Derivative);
        // g_height = smooth_d(deriv_h(smooth_w(x)))
        line_pass(&sw, &mut tmp, dims, 1, Tap::Derivative);
        line_pass(&tmp, &mut gh, dims, 0, Tap::Smooth);
        // g_width = smooth_d(smooth_h(deriv_w(x)))
        line_pass(xs, &mut tmp, dims, 2, Tap::Derivative);
        line_pass(&tmp, &mut sw, dims, 1, Tap::Smooth);
        line_pass(&sw, &mut gw, dims, 0, Tap::Smooth);
        (gd, gh, gw)
    });
    let shape = x.shape();
    let mut vd = Volume5::zeros(shape);
    let mut vh = Volume5::zeros(shape);
    let mut vw = Volume5::zeros(shape);
    for (i, (gd, gh, gw)) in slabs.into_iter().enumerate() {
        vd.channel_mut(i / c_n, i % c_n).copy_from_slice(&gd);
        vh.channel_mut(i / c_n, i % c_n).copy_from_slice(&gh);
        vw.channel_mut(i / c_n, i % c_n).copy_from_slice(&gw);
    }
    Ok((vd, vh, vw))
}

/// Per-voxel gradient magnitude `sqrt(gd^2 + gh^2 + gw^2)`.
pub fn sobel3d<T: Scalar>(x: &Volume5<T>) -> Result<Volume5<T>> {
    let (gd, gh, gw) = sobel3d_components(x)?;
    let mut out = gd;
    for ((o, &a), &b) in out.data_mut().iter_mut().zip(gh.data()).zip(gw.data()) {
        let m = *o * *o + a * a + b * b;
        *o = m.sqrt();
    }
    Ok(out)
}

/// Backward pass of `sobel3d` given the upstream gradient of the magnitude,
/// the saved directional responses, and the saved magnitude. Where the
/// magnitude is exactly zero the subgradient zero is used.
pub fn sobel3d_backward<T: Scalar>(
    grad_mag: &Volume5<T>,
    components: (&Volume5<T>, &Volume5<T>, &Volume5<T>),
    magnitude: &Volume5<T>,
) -> Result<Volume5<T>> {
    let (gd, gh, gw) = components;
    let shape = grad_mag.shape();
    let [b_n, c_n, d, h, w] = shape;
    let dims = [d, h, w];
    let n = d * h * w;
    let scale = |comp: &Volume5<T>| -> Volume5<T> {
        let mut out = comp.clone();
        for ((o, &m), &g) in out.data_mut().iter_mut().zip(magnitude.data()).zip(grad_mag.data()) {
            *o = if m == T::ZERO { T::ZERO } else { *o / m * g };
        }
        out
    };
    let dd = scale(gd);
    let dh = scale(gh);
    let dw = scale(gw);
    let slabs: Vec<Vec<T>> = par::map_indexed(b_n * c_n, |i| {
        let (b, c) = (i / c_n, i % c_n);
        let mut dx = vec![T::ZERO; n];
        let mut t1 = vec![T::ZERO; n];
        let mut t2 = vec![T::ZERO; n];
        // Adjoint of deriv_d . smooth_h . smooth_w applied in reverse order.
        line_pass_adjoint(dd.channel(b, c), &mut t1, dims, 0, Tap::Derivative);
        line_pass_adjoint(&t1, &mut t2, dims, 1, Tap::Smooth);
        line_pass_adjoint(&t2, &mut t1, dims, 2, Tap::Smooth);
        for (acc, &v) in dx.iter_mut().zip(&t1) {
            *acc += v;
        }
        line_pass_adjoint(dh.channel(b, c), &mut t1, dims, 0, Tap::Smooth);
        line_pass_adjoint(&t1, &mut t2, dims, 1, Tap::Derivative);
        line_pass_adjoint(&t2, &mut t1, dims, 2, Tap::Smooth);
        for (acc, &v) in dx.iter_mut().zip(&t1) {
            *acc += v;
        }
        line_pass_adjoint(dw.channel(b, c), &mut t1, dims, 0, Tap::Smooth);
        line_pass_adjoint(&t1, &mut t2, dims, 1, Tap::Smooth);
        line_pass_adjoint(&t2, &mut t1, dims, 2, Tap::Derivative);
        for (acc, &v) in dx.iter_mut().zip(&t1) {
            *acc += v;
        }
        dx
    });
    let mut out = Volume5::zeros(shape);
    for (i, slab) in slabs.into_iter().enumerate() {
        out.channel_mut(i / c_n, i % c_n).copy_from_slice(&slab);
    }
    Ok(out)
}
