//! Global pooling over the spatial extent and per-site channel statistics.

use crate::error::{Error, Result};
use crate::par;
use crate::scalar::Scalar;
use crate::volume::Volume5;

/// Global average pool: (B, C, D, H, W) -> (B, C, 1, 1, 1).
pub fn global_avg_pool<T: Scalar>(x: &Volume5<T>) -> Volume5<T> {
    let (b_n, c_n, _, _, _) = x.dims();
    let n = x.spatial_len();
    let inv_n = T::ONE / T::from_f64(n as f64);
    let mut out = Volume5::zeros([b_n, c_n, 1, 1, 1]);
    for (i, o) in out.data_mut().iter_mut().enumerate() {
        let mut s = T::ZERO;
        for &v in x.channel(i / c_n, i % c_n) {
            s += v;
        }
        *o = s * inv_n;
    }
    out
}

/// Global max pool with saved argmax (first occurrence wins ties):
/// (B, C, D, H, W) -> (B, C, 1, 1, 1).
pub fn global_max_pool<T: Scalar>(x: &Volume5<T>) -> (Volume5<T>, Vec<u32>) {
    let (b_n, c_n, _, _, _) = x.dims();
    let mut out = Volume5::zeros([b_n, c_n, 1, 1, 1]);
    let mut arg = vec![0u32; b_n * c_n];
    for (i, (o, a)) in out.data_mut().iter_mut().zip(arg.iter_mut()).enumerate() {
        let xs = x.channel(i / c_n, i % c_n);
        let mut best = xs[0];
        let mut best_i = 0usize;
        for (j, &v) in xs.iter().enumerate().skip(1) {
            if v > best {
                best = v;
                best_i = j;
            }
        }
        *o = best;
        *a = best_i as u32;
    }
    (out, arg)
}

/// Saved indices for the extremum channels of `channel_stats`.
#[derive(Clone, Debug)]
pub struct ChannelStatArgs {
    pub argmax: Vec<u32>,
    pub argmin: Vec<u32>,
}

/// Per-site statistics over the channel axis, stacked as four channels
/// (mean, std, max, min): (B, C, D, H, W) -> (B, 4, D, H, W).
///
/// Std is the population standard deviation with no epsilon; its backward
/// uses subgradient zero where the deviation is exactly zero. Extrema take
/// the first channel index on ties.
pub fn channel_stats<T: Scalar>(x: &Volume5<T>) -> (Volume5<T>, ChannelStatArgs) {
    let (b_n, c_n, d, h, w) = x.dims();
    let n = x.spatial_len();
    let inv_c = T::ONE / T::from_f64(c_n as f64);
    let mut out = Volume5::zeros([b_n, 4, d, h, w]);
    let mut argmax = vec![0u32; b_n * n];
    let mut argmin = vec![0u32; b_n * n];
    for b in 0..b_n {
        let amax = &mut argmax[b * n..(b + 1) * n];
        let amin = &mut argmin[b * n..(b + 1) * n];
        {
            // Accumulate into the four stat slabs channel by channel so the
            // inner loops stay contiguous.
            let first = x.channel(b, 0);
            out.channel_mut(b, 0).copy_from_slice(first);
            out.channel_mut(b, 2).copy_from_slice(first);
            out.channel_mut(b, 3).copy_from_slice(first);
        }
        for c in 1..c_n {
            let xs = x.channel(b, c);
            let base = (b * 4) * n;
            let (head, rest) = out.data_mut()[base..base + 4 * n].split_at_mut(2 * n);
            let mean = &mut head[..n];
            let (maxs, mins) = rest.split_at_mut(n);
            for j in 0..n {
                let v = xs[j];
                mean[j] += v;
                if v > maxs[j] {
                    maxs[j] = v;
                    amax[j] = c as u32;
                }
                if v < mins[j] {
                    mins[j] = v;
                    amin[j] = c as u32;
                }
            }
        }
        for m in out.channel_mut(b, 0) {
            *m *= inv_c;
        }
        // Second pass for the population variance.
        let mut var = vec![T::ZERO; n];
        for c in 0..c_n {
            let xs = x.channel(b, c);
            let mean = out.channel(b, 0);
            for ((v, &xi), &m) in var.iter_mut().zip(xs).zip(mean) {
                let dv = xi - m;
                *v += dv * dv;
            }
        }
        for (s, v) in out.channel_mut(b, 1).iter_mut().zip(var) {
            *s = (v * inv_c).sqrt();
        }
    }
    (out, ChannelStatArgs { argmax, argmin })
}

/// Backward pass of `channel_stats`: routes the four stat gradients back to
/// the input channels.
pub fn channel_stats_backward<T: Scalar>(
    grad_out: &Volume5<T>,
    x: &Volume5<T>,
    stats: &Volume5<T>,
    args: &ChannelStatArgs,
) -> Result<Volume5<T>> {
    let (_, c_n, _, _, _) = x.dims();
    let n = x.spatial_len();
    if grad_out.shape() != stats.shape() {
        return Err(Error::shape(
            "channel_stats_backward",
            format!("grad shape {:?} vs stats shape {:?}", grad_out.shape(), stats.shape()),
        ));
    }
    let inv_c = T::ONE / T::from_f64(c_n as f64);
    let mut dx = Volume5::zeros(x.shape());
    par::for_each_slab(dx.data_mut(), n, |i, d| {
        let (b, c) = (i / c_n, i % c_n);
        let xs = x.channel(b, c);
        let mean = stats.channel(b, 0);
        let std = stats.channel(b, 1);
        let g_mean = grad_out.channel(b, 0);
        let g_std = grad_out.channel(b, 1);
        let g_max = grad_out.channel(b, 2);
        let g_min = grad_out.channel(b, 3);
        let amax = &args.argmax[b * n..(b + 1) * n];
        let amin = &args.argmin[b * n..(b + 1) * n];
        for j in 0..n {
            let mut g = g_mean[j] * inv_c;
            if std[j] != T::ZERO {
                // d std / d x_c = (x_c - mean) / (C * std)
                g += g_std[j] * (xs[j] - mean[j]) * inv_c / std[j];
            }
            if amax[j] as usize == c {
                g += g_max[j];
            }
            if amin[j] as usize == c {
                g += g_min[j];
            }
            d[j] = g;
        }
    });
    Ok(dx)
}
