//! Elementwise binary operations with singleton-axis broadcasting.
//!
//! Two shapes combine when every axis either matches or is 1 on one side.
//! The hot cases (identical shapes, per-channel vectors against full
//! volumes, scalars) take specialized contiguous loops; anything else goes
//! through a generic strided walk.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::volume::Volume5;

/// Broadcast result shape, or an error naming the incompatible axis.
pub fn broadcast_shape(a: [usize; 5], b: [usize; 5]) -> Result<[usize; 5]> {
    let mut out = [0usize; 5];
    for i in 0..5 {
        out[i] = if a[i] == b[i] {
            a[i]
        } else if a[i] == 1 {
            b[i]
        } else if b[i] == 1 {
            a[i]
        } else {
            return Err(Error::shape(
                "broadcast",
                format!("axis {} has extents {} and {}; broadcasting needs a singleton", i, a[i], b[i]),
            ));
        };
    }
    Ok(out)
}

fn strides_for(shape: [usize; 5], out: [usize; 5]) -> [usize; 5] {
    let mut s = [0usize; 5];
    let mut acc = 1;
    for i in (0..5).rev() {
        s[i] = if shape[i] == out[i] { acc } else { 0 };
        acc *= shape[i];
    }
    s
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Pattern {
    Same,
    /// b is (B|1, C, 1, 1, 1): one value per channel.
    ChannelVec,
    /// b is (B, 1, D, H, W): one value per site shared by all channels.
    SiteMap,
    /// b is a single value.
    Scalar,
    General,
}

fn classify(a: [usize; 5], b: [usize; 5]) -> Pattern {
    if a == b {
        Pattern::Same
    } else if b == [1, 1, 1, 1, 1] {
        Pattern::Scalar
    } else if b[1] == a[1] && b[2] == 1 && b[3] == 1 && b[4] == 1 && (b[0] == a[0] || b[0] == 1) {
        Pattern::ChannelVec
    } else if b[0] == a[0] && b[1] == 1 && b[2] == a[2] && b[3] == a[3] && b[4] == a[4] {
        Pattern::SiteMap
    } else {
        Pattern::General
    }
}

/// out[i] = f(a[i], broadcast(b)[i]); the output takes the broadcast shape.
pub fn broadcast_zip<T: Scalar>(
    a: &Volume5<T>,
    b: &Volume5<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Volume5<T>> {
    let out_shape = broadcast_shape(a.shape(), b.shape())?;
    // Orient so the larger operand drives the contiguous loop.
    if a.shape() != out_shape && b.shape() == out_shape {
        return zip_oriented(b, a, out_shape, |x, y| f(y, x));
    }
    zip_oriented(a, b, out_shape, f)
}

fn zip_oriented<T: Scalar>(
    a: &Volume5<T>,
    b: &Volume5<T>,
    out_shape: [usize; 5],
    f: impl Fn(T, T) -> T,
) -> Result<Volume5<T>> {
    if a.shape() != out_shape {
        // Both operands need expansion; use the generic strided walk.
        return general_zip(a, b, out_shape, f);
    }
    match classify(a.shape(), b.shape()) {
        Pattern::Same => a.zip_with(b, f),
        Pattern::Scalar => {
            let s = b.data()[0];
            Ok(a.map(|x| f(x, s)))
        }
        Pattern::ChannelVec => {
            let (b_n, c_n, _, _, _) = a.dims();
            let mut out = Volume5::zeros(a.shape());
            let n = a.spatial_len();
            for bi in 0..b_n {
                for c in 0..c_n {
                    let v = b.data()[if b.shape()[0] == 1 { c } else { bi * c_n + c }];
                    let src = a.channel(bi, c);
                    let dst = &mut out.channel_mut(bi, c)[..n];
                    for (o, &x) in dst.iter_mut().zip(src) {
                        *o = f(x, v);
                    }
                }
            }
            Ok(out)
        }
        Pattern::SiteMap => {
            let (b_n, c_n, _, _, _) = a.dims();
            let mut out = Volume5::zeros(a.shape());
            for bi in 0..b_n {
                let map = b.channel(bi, 0);
                for c in 0..c_n {
                    let src = a.channel(bi, c);
                    let dst = out.channel_mut(bi, c);
                    for ((o, &x), &m) in dst.iter_mut().zip(src).zip(map) {
                        *o = f(x, m);
                    }
                }
            }
            Ok(out)
        }
        Pattern::General => general_zip(a, b, out_shape, f),
    }
}

fn general_zip<T: Scalar>(
    a: &Volume5<T>,
    b: &Volume5<T>,
    out_shape: [usize; 5],
    f: impl Fn(T, T) -> T,
) -> Result<Volume5<T>> {
    let sa = strides_for(a.shape(), out_shape);
    let sb = strides_for(b.shape(), out_shape);
    let [ob, oc, od, oh, ow] = out_shape;
    let mut out = Volume5::zeros(out_shape);
    let data = out.data_mut();
    let mut i = 0;
    for ib in 0..ob {
        for ic in 0..oc {
            for id in 0..od {
                for ih in 0..oh {
                    let base_a = ib * sa[0] + ic * sa[1] + id * sa[2] + ih * sa[3];
                    let base_b = ib * sb[0] + ic * sb[1] + id * sb[2] + ih * sb[3];
                    for iw in 0..ow {
                        data[i] = f(a.data()[base_a + iw * sa[4]], b.data()[base_b + iw * sb[4]]);
                        i += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Sums `grad` down to `shape` over the axes that were broadcast, the adjoint
/// of broadcasting a `shape` operand up to the gradient's shape.
pub fn reduce_to_shape<T: Scalar>(grad: &Volume5<T>, shape: [usize; 5]) -> Result<Volume5<T>> {
    if grad.shape() == shape {
        return Ok(grad.clone());
    }
    // Validate that shape broadcasts to grad.shape().
    let check = broadcast_shape(grad.shape(), shape)?;
    if check != grad.shape() {
        return Err(Error::shape(
            "reduce_to_shape",
            format!("{:?} does not broadcast to {:?}", shape, grad.shape()),
        ));
    }
    let s = strides_for(shape, grad.shape());
    let [gb, gc, gd, gh, gw] = grad.shape();
    let mut out = Volume5::zeros(shape);
    let data = out.data_mut();
    let mut i = 0;
    for ib in 0..gb {
        for ic in 0..gc {
            for id in 0..gd {
                for ih in 0..gh {
                    let base = ib * s[0] + ic * s[1] + id * s[2] + ih * s[3];
                    for iw in 0..gw {
                        data[base + iw * s[4]] += grad.data()[i];
                        i += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    #[test]
    fn equal_shapes_add() {
        let a = Volume5::from_fn([1, 2, 1, 1, 2], |i| i as f64);
        let b = Volume5::from_fn([1, 2, 1, 1, 2], |i| 10.0 * i as f64);
        let c = broadcast_zip(&a, &b, |x, y| x + y).unwrap();
        assert_eq!(c.data(), &[0.0, 11.0, 22.0, 33.0]);
    }

    #[test]
    fn channel_vector_broadcast() {
        let a = Volume5::<f64>::full([1, 3, 2, 2, 2], 1.0);
        let b = Volume5::new([1, 3, 1, 1, 1], vec![1.0, 2.0, 3.0]).unwrap();
        let c = broadcast_zip(&a, &b, |x, y| x * y).unwrap();
        for ch in 0..3 {
            assert!(c.channel(0, ch).iter().all(|&v| v == (ch + 1) as f64));
        }
    }

    #[test]
    fn site_map_broadcast() {
        let a = Volume5::<f64>::full([1, 2, 1, 1, 3], 2.0);
        let b = Volume5::new([1, 1, 1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let c = broadcast_zip(&a, &b, |x, y| x * y).unwrap();
        assert_eq!(c.channel(0, 0), &[2.0, 4.0, 6.0]);
        assert_eq!(c.channel(0, 1), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn scalar_broadcast_both_orders() {
        let a = Volume5::from_fn([1, 1, 1, 2, 2], |i| i as f64);
        let s = Volume5::scalar(3.0);
        let c1 = broadcast_zip(&a, &s, |x, y| x - y).unwrap();
        let c2 = broadcast_zip(&s, &a, |x, y| x - y).unwrap();
        assert_eq!(c1.data(), &[-3.0, -2.0, -1.0, 0.0]);
        assert_eq!(c2.data(), &[3.0, 2.0, 1.0, 0.0]);
    }

    #[test]
    fn general_pattern_matches_naive() {
        let mut rng = StdRng::seed_from_u64(31);
        let a = Volume5::from_fn([2, 3, 2, 1, 4], |_| rng.gen_range(-1.0..1.0f64));
        let b = Volume5::from_fn([2, 1, 2, 5, 1], |_| rng.gen_range(-1.0..1.0f64));
        let c = broadcast_zip(&a, &b, |x, y| x * y).unwrap();
        assert_eq!(c.shape(), [2, 3, 2, 5, 4]);
        for ib in 0..2 {
            for ic in 0..3 {
                for id in 0..2 {
                    for ih in 0..5 {
                        for iw in 0..4 {
                            let want = a.at(ib, ic, id, 0, iw) * b.at(ib, 0, id, ih, 0);
                            assert_eq!(c.at(ib, ic, id, ih, iw), want);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn incompatible_axes_error() {
        let a = Volume5::<f64>::zeros([1, 3, 2, 2, 2]);
        let b = Volume5::<f64>::zeros([1, 2, 2, 2, 2]);
        let err = broadcast_zip(&a, &b, |x, _| x).unwrap_err();
        assert!(err.to_string().contains("axis 1"));
    }

    #[test]
    fn reduce_is_adjoint_of_broadcast() {
        // <broadcast(b), g> == <b, reduce(g)> for every broadcast pattern.
        let mut rng = StdRng::seed_from_u64(32);
        for shape in [[1, 3, 1, 1, 1], [2, 1, 2, 3, 2], [1, 1, 1, 1, 1], [2, 3, 2, 3, 2]] {
            let out_shape = [2usize, 3, 2, 3, 2];
            let b = Volume5::from_fn(shape, |_| rng.gen_range(-1.0..1.0f64));
            let g = Volume5::from_fn(out_shape, |_| rng.gen_range(-1.0..1.0f64));
            let ones = Volume5::<f64>::full(out_shape, 0.0);
            let bb = broadcast_zip(&ones, &b, |_, y| y).unwrap();
            let lhs: f64 = bb.data().iter().zip(g.data()).map(|(x, y)| x * y).sum();
            let red = reduce_to_shape(&g, shape).unwrap();
            let rhs: f64 = b.data().iter().zip(red.data()).map(|(x, y)| x * y).sum();
            assert!((lhs - rhs).abs() <= 1e-12);
        }
    }
}
