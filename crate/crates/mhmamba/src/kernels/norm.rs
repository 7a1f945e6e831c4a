//! Layer and instance normalization with saved statistics for backprop.
//!
//! Layer norm normalizes each spatial site over the channel axis; instance
//! norm normalizes each (batch, channel) slab over its spatial extent. Both
//! use population variance and `1/sqrt(var + eps)` with a caller-supplied
//! epsilon inside the square root.

use crate::error::{Error, Result};
use crate::par;
use crate::scalar::Scalar;
use crate::volume::Volume5;

/// Per-group statistics saved by the forward pass. For layer norm the group
/// axis is (batch * spatial site); for instance norm it is (batch * channel).
#[derive(Clone, Debug)]
pub struct NormStats<T> {
    pub mean: Vec<T>,
    pub inv_std: Vec<T>,
}

fn check_affine<T>(context: &'static str, c: usize, gamma: &[T], beta: &[T]) -> Result<()> {
    if gamma.len() != c || beta.len() != c {
        return Err(Error::shape(
            context,
            format!("gamma/beta lengths ({}, {}) must equal channels {}", gamma.len(), beta.len(), c),
        ));
    }
    Ok(())
}

/// Channel-axis layer norm: for every (b, site), y_c = gamma_c * xhat_c + beta_c
/// where xhat = (x - mean_c(x)) / sqrt(var_c(x) + eps).
pub fn layer_norm<T: Scalar>(
    x: &Volume5<T>,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> Result<(Volume5<T>, NormStats<T>)> {
    let (b_n, c_n, _, _, _) = x.dims();
    check_affine("layer_norm", c_n, gamma, beta)?;
    let n = x.spatial_len();
    let inv_c = T::ONE / T::from_f64(c_n as f64);
    let mut mean = vec![T::ZERO; b_n * n];
    let mut inv_std = vec![T::ZERO; b_n * n];
    let mut out = Volume5::zeros(x.shape());
    for b in 0..b_n {
        let mu = &mut mean[b * n..(b + 1) * n];
        for c in 0..c_n {
            for (m, &v) in mu.iter_mut().zip(x.channel(b, c)) {
                *m += v;
            }
        }
        for m in mu.iter_mut() {
            *m *= inv_c;
        }
        let var = &mut inv_std[b * n..(b + 1) * n];
        for c in 0..c_n {
            for ((v, &xi), &m) in var.iter_mut().zip(x.channel(b, c)).zip(mu.iter()) {
                let d = xi - m;
                *v += d * d;
            }
        }
        for v in var.iter_mut() {
            *v = T::ONE / (*v * inv_c + eps).sqrt();
        }
    }
    let slab = n;
    par::for_each_slab(out.data_mut(), slab, |i, y| {
        let (b, c) = (i / c_n, i % c_n);
        let (g, bt) = (gamma[c], beta[c]);
        let mu = &mean[b * n..(b + 1) * n];
        let istd = &inv_std[b * n..(b + 1) * n];
        let xs = x.channel(b, c);
        for (((yo, &xi), &m), &s) in y.iter_mut().zip(xs).zip(mu).zip(istd) {
            *yo = (xi - m) * s * g + bt;
        }
    });
    Ok((out, NormStats { mean, inv_std }))
}

/// Backward pass of `layer_norm`. Returns (dx, dgamma, dbeta).
pub fn layer_norm_backward<T: Scalar>(
    grad_out: &Volume5<T>,
    x: &Volume5<T>,
    gamma: &[T],
    stats: &NormStats<T>,
) -> Result<(Volume5<T>, Vec<T>, Vec<T>)> {
    let (b_n, c_n, _, _, _) = x.dims();
    let n = x.spatial_len();
    let inv_c = T::ONE / T::from_f64(c_n as f64);
    let mut dgamma = vec![T::ZERO; c_n];
    let mut dbeta = vec![T::ZERO; c_n];
    let mut dx = Volume5::zeros(x.shape());
    // m1(site) = mean_c(dxhat), m2(site) = mean_c(dxhat * xhat)
    let mut m1 = vec![T::ZERO; n];
    let mut m2 = vec![T::ZERO; n];
    for b in 0..b_n {
        let mu = &stats.mean[b * n..(b + 1) * n];
        let istd = &stats.inv_std[b * n..(b + 1) * n];
        m1.fill(T::ZERO);
        m2.fill(T::ZERO);
        for c in 0..c_n {
            let g = gamma[c];
            let xs = x.channel(b, c);
            let gos = grad_out.channel(b, c);
            let (mut dg, mut db) = (T::ZERO, T::ZERO);
            for ((((&go, &xi), &m), &s), (a1, a2)) in
                gos.iter().zip(xs).zip(mu).zip(istd).zip(m1.iter_mut().zip(m2.iter_mut()))
            {
                let xhat = (xi - m) * s;
                dg += go * xhat;
                db += go;
                let dxhat = go * g;
                *a1 += dxhat;
                *a2 += dxhat * xhat;
            }
            dgamma[c] += dg;
            dbeta[c] += db;
        }
        for v in m1.iter_mut() {
            *v *= inv_c;
        }
        for v in m2.iter_mut() {
            *v *= inv_c;
        }
        for c in 0..c_n {
            let g = gamma[c];
            let xs = x.channel(b, c);
            let gos = grad_out.channel(b, c);
            let dxs = dx.channel_mut(b, c);
            for (((((d, &go), &xi), &m), &s), (&a1, &a2)) in dxs
                .iter_mut()
                .zip(gos)
                .zip(xs)
                .zip(mu)
                .zip(istd)
                .zip(m1.iter().zip(m2.iter()))
            {
                let xhat = (xi - m) * s;
                *d = s * (go * g - a1 - xhat * a2);
            }
        }
    }
    Ok((dx, dgamma, dbeta))
}

/// Instance norm: each (b, c) slab is normalized over its spatial extent,
/// then scaled and shifted by per-channel gamma/beta.
pub fn instance_norm<T: Scalar>(
    x: &Volume5<T>,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> Result<(Volume5<T>, NormStats<T>)> {
    let (b_n, c_n, _, _, _) = x.dims();
    check_affine("instance_norm", c_n, gamma, beta)?;
    let n = x.spatial_len();
    if n == 0 {
        return Err(Error::shape("instance_norm", "empty spatial extent".to_string()));
    }
    let inv_n = T::ONE / T::from_f64(n as f64);
    let mut out = Volume5::zeros(x.shape());
    let stats: Vec<(T, T)> = par::map_indexed(b_n * c_n, |i| {
        let xs = x.channel(i / c_n, i % c_n);
        let mut s = T::ZERO;
        for &v in xs {
            s += v;
        }
        let mu = s * inv_n;
        let mut q = T::ZERO;
        for &v in xs {
            let d = v - mu;
            q += d * d;
        }
        (mu, T::ONE / (q * inv_n + eps).sqrt())
    });
    par::for_each_slab(out.data_mut(), n, |i, y| {
        let (b, c) = (i / c_n, i % c_n);
        let (mu, istd) = stats[i];
        let (g, bt) = (gamma[c], beta[c]);
        for (yo, &xi) in y.iter_mut().zip(x.channel(b, c)) {
            *yo = (xi - mu) * istd * g + bt;
        }
    });
    let (mean, inv_std) = stats.into_iter().unzip();
    Ok((out, NormStats { mean, inv_std }))
}

/// Backward pass of `instance_norm`. Returns (dx, dgamma, dbeta).
pub fn instance_norm_backward<T: Scalar>(
    grad_out: &Volume5<T>,
    x: &Volume5<T>,
    gamma: &[T],
    stats: &NormStats<T>,
) -> Result<(Volume5<T>, Vec<T>, Vec<T>)> {
    let (b_n, c_n, _, _, _) = x.dims();
    let n = x.spatial_len();
    let inv_n = T::ONE / T::from_f64(n as f64);
    let mut dgamma = vec![T::ZERO; c_n];
    let mut dbeta = vec![T::ZERO; c_n];
    let mut dx = Volume5::zeros(x.shape());
    let slab = n;
    let partials: Vec<(T, T)> = par::map_indexed(b_n * c_n, |i| {
        let (b, c) = (i / c_n, i % c_n);
        let (mu, istd) = (stats.mean[i], stats.inv_std[i]);
        let xs = x.channel(b, c);
        let gos = grad_out.channel(b, c);
        let (mut dg, mut db) = (T::ZERO, T::ZERO);
        for (&go, &xi) in gos.iter().zip(xs) {
            dg += go * (xi - mu) * istd;
            db += go;
        }
        (dg, db)
    });
    for (i, (dg, db)) in partials.iter().enumerate() {
        dgamma[i % c_n] += *dg;
        dbeta[i % c_n] += *db;
    }
    par::for_each_slab(dx.data_mut(), slab, |i, d| {
        let (b, c) = (i / c_n, i % c_n);
        let (mu, istd) = (stats.mean[i], stats.inv_std[i]);
        let g = gamma[c];
        let (sg, sb) = partials[i];
        let m1 = sb * inv_n;
        let m2 = sg * inv_n;
        let xs = x.channel(b, c);
        let gos = grad_out.channel(b, c);
        for ((di, &go), &xi) in d.iter_mut().zip(gos).zip(xs) {
            let xhat = (xi - mu) * istd;
            *di = istd * g * (go - m1 - xhat * m2);
        }
    });
    Ok((dx, dgamma, dbeta))
}
