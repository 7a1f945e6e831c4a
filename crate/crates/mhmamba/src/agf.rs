//! Gated fusion of the encoder skip and the upsampled decoder stream.
//! Both inputs are split into four channel groups; each group learns a
//! per-voxel sigmoid gate from the concatenated pair and blends the two
//! streams convexly before a final pointwise mix.

use rand::Rng;

use crate::autodiff::{Tape, VarId};
use crate::blocks::{pointwise, ConvParams};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;

pub const AGF_GROUPS: usize = 4;

/// One gate conv per channel group plus the output mix. The gate convs map
/// the 2g concatenated group channels to a single logit channel; the mix
/// is written as a bare matrix in the fusion formula, so it carries no bias.
#[derive(Clone, Debug)]
pub struct AgfParams {
    pub gates: Vec<ConvParams>,
    pub fuse: ConvParams,
    pub channels: usize,
}

impl AgfParams {
    pub fn register<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        prefix: &str,
        channels: usize,
    ) -> Result<Self> {
        if channels == 0 || channels % AGF_GROUPS != 0 {
            return Err(Error::config(format!(
                "fusion: {channels} channels not divisible into {AGF_GROUPS} groups"
            )));
        }
        let g = channels / AGF_GROUPS;
        let mut gates = Vec::with_capacity(AGF_GROUPS);
        for k in 0..AGF_GROUPS {
            gates.push(ConvParams::register(
                store,
                rng,
                &format!("{prefix}.gate{k}"),
                1,
                2 * g,
                1,
                pointwise(),
                true,
            )?);
        }
        let fuse =
            ConvParams::register(store, rng, &format!("{prefix}.fuse"), channels, channels, 1, pointwise(), false)?;
        Ok(AgfParams { gates, fuse, channels })
    }
}

/// Per-group gate maps and the blended volume before the output mix,
/// kept for gate-range and convexity checks.
pub struct AgfTrace {
    pub deltas: Vec<VarId>,
    pub blended: VarId,
}

pub fn agf_forward_traced<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    p: &AgfParams,
    enc: VarId,
    dec: VarId,
) -> Result<(VarId, AgfTrace)> {
    let es = tape.value(enc).shape();
    let ds = tape.value(dec).shape();
    if es != ds {
        return Err(Error::shape("fusion", format!("encoder {es:?} vs decoder {ds:?}")));
    }
    if es[1] != p.channels {
        return Err(Error::shape(
            "fusion",
            format!("expected {} channels, got {}", p.channels, es[1]),
        ));
    }
    let g = p.channels / AGF_GROUPS;
    let mut fused = Vec::with_capacity(AGF_GROUPS);
    let mut deltas = Vec::with_capacity(AGF_GROUPS);
    for k in 0..AGF_GROUPS {
        let ek = tape.slice_channels(enc, k * g, g)?;
        let dk = tape.slice_channels(dec, k * g, g)?;
        let cat = tape.concat_channels(&[ek, dk])?;
        let logit = p.gates[k].forward(tape, store, cat)?;
        let delta = tape.sigmoid(logit)?;
        let keep = tape.mul(delta, ek)?;
        let rest = tape.one_minus(delta)?;
        let pass = tape.mul(rest, dk)?;
        fused.push(tape.add(keep, pass)?);
        deltas.push(delta);
    }
    let blended = tape.concat_channels(&fused)?;
    let out = p.fuse.forward(tape, store, blended)?;
    Ok((out, AgfTrace { deltas, blended }))
}

pub fn agf_forward<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    p: &AgfParams,
    enc: VarId,
    dec: VarId,
) -> Result<VarId> {
    agf_forward_traced(tape, store, p, enc, dec).map(|(out, _)| out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{check_store_gradients, CheckOutcome, CoordPlan};
    use crate::kernels::conv::conv3d;
    use crate::scalar::sigmoid;
    use crate::volume::Volume5;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_vol(rng: &mut ChaCha8Rng, shape: [usize; 5]) -> Volume5<f64> {
        Volume5::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    fn fuse_oracle(store: &ParamStore<f64>, p: &AgfParams, v: &Volume5<f64>) -> Volume5<f64> {
        conv3d(v, store.value(p.fuse.weight), None, pointwise()).unwrap()
    }

    #[test]
    fn identical_streams_collapse_to_the_output_mix() {
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        let mut store = ParamStore::<f64>::new();
        let p = AgfParams::register(&mut store, &mut rng, "agf", 8).unwrap();
        let x = rand_vol(&mut rng, [2, 8, 3, 3, 3]);
        let mut t = Tape::new();
        let e = t.leaf(x.clone());
        let d = t.leaf(x.clone());
        let y = agf_forward(&mut t, &store, &p, e, d).unwrap();
        // delta*x + (1-delta)*x == x up to one rounding each side.
        let want = fuse_oracle(&store, &p, &x);
        for (a, b) in t.value(y).data().iter().zip(want.data()) {
            assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn saturated_gates_pass_one_stream_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let mut store = ParamStore::<f64>::new();
        let p = AgfParams::register(&mut store, &mut rng, "agf", 8).unwrap();
        let enc = rand_vol(&mut rng, [1, 8, 3, 3, 3]);
        let dec = rand_vol(&mut rng, [1, 8, 3, 3, 3]);
        for (lift, pick) in [(50.0, &enc), (-50.0, &dec)] {
            // exp(-50) underflows the mantissa, so sigma saturates exactly.
            for gate in &p.gates {
                for v in store.value_mut(gate.bias.unwrap()).data_mut() {
                    *v = lift;
                }
                for v in store.value_mut(gate.weight).data_mut() {
                    *v = 0.0;
                }
            }
            let mut t = Tape::new();
            let e = t.leaf(enc.clone());
            let d = t.leaf(dec.clone());
            let y = agf_forward(&mut t, &store, &p, e, d).unwrap();
            let want = fuse_oracle(&store, &p, pick);
            assert_eq!(t.value(y).data(), want.data());
        }
    }

    #[test]
    fn composition_matches_primitive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(62);
        let mut store = ParamStore::<f64>::new();
        let p = AgfParams::register(&mut store, &mut rng, "agf", 8).unwrap();
        let enc = rand_vol(&mut rng, [1, 8, 3, 3, 3]);
        let dec = rand_vol(&mut rng, [1, 8, 3, 3, 3]);
        let mut t = Tape::new();
        let e = t.leaf(enc.clone());
        let d = t.leaf(dec.clone());
        let y = agf_forward(&mut t, &store, &p, e, d).unwrap();

        // Rebuild from raw kernels: per group, gate from the stacked pair,
        // then the convex blend, then the output mix.
        let g = 2;
        let n = 27;
        let mut blended = Volume5::<f64>::zeros([1, 8, 3, 3, 3]);
        for k in 0..AGF_GROUPS {
            let mut cat = Volume5::<f64>::zeros([1, 2 * g, 3, 3, 3]);
            for c in 0..g {
                for i in 0..n {
                    cat.data_mut()[c * n + i] = enc.data()[(k * g + c) * n + i];
                    cat.data_mut()[(g + c) * n + i] = dec.data()[(k * g + c) * n + i];
                }
            }
            let gate = &p.gates[k];
            let logit = conv3d(
                &cat,
                store.value(gate.weight),
                Some(store.value(gate.bias.unwrap()).data()),
                pointwise(),
            )
            .unwrap();
            for c in 0..g {
                for i in 0..n {
                    let del = sigmoid(logit.data()[i]);
                    let ev = enc.data()[(k * g + c) * n + i];
                    let dv = dec.data()[(k * g + c) * n + i];
                    blended.data_mut()[(k * g + c) * n + i] = del * ev + (1.0 - del) * dv;
                }
            }
        }
        let want = fuse_oracle(&store, &p, &blended);
        for (a, b) in t.value(y).data().iter().zip(want.data()) {
            assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn blend_stays_between_stream_extremes_and_gates_inside_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(63);
        let mut store = ParamStore::<f64>::new();
        let p = AgfParams::register(&mut store, &mut rng, "agf", 8).unwrap();
        for _ in 0..5 {
            let enc = rand_vol(&mut rng, [1, 8, 3, 3, 3]);
            let dec = rand_vol(&mut rng, [1, 8, 3, 3, 3]);
            let mut t = Tape::new();
            let e = t.leaf(enc.clone());
            let d = t.leaf(dec.clone());
            let (_, trace) = agf_forward_traced(&mut t, &store, &p, e, d).unwrap();
            for del in &trace.deltas {
                for &v in t.value(*del).data() {
                    assert!(v > 0.0 && v < 1.0, "gate value {v} escapes (0,1)");
                }
            }
            for (i, &f) in t.value(trace.blended).data().iter().enumerate() {
                let (ev, dv) = (enc.data()[i], dec.data()[i]);
                let lo = ev.min(dv) - 1e-12;
                let hi = ev.max(dv) + 1e-12;
                assert!(f >= lo && f <= hi, "blend {f} outside [{lo}, {hi}]");
            }
        }
    }

    #[test]
    fn fusion_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(64);
        let mut store = ParamStore::<f64>::new();
        let p = AgfParams::register(&mut store, &mut rng, "agf", 8).unwrap();
        let enc = store.add("input.enc", rand_vol(&mut rng, [1, 8, 3, 3, 3])).unwrap();
        let dec = store.add("input.dec", rand_vol(&mut rng, [1, 8, 3, 3, 3])).unwrap();
        let probe = Volume5::from_fn([1, 8, 3, 3, 3], |i| {
            ((i as u64).wrapping_mul(2654435761) % 1999) as f64 / 999.5 - 1.0
        });
        let run = |s: &ParamStore<f64>| -> Result<(Tape<f64>, VarId)> {
            let mut t = Tape::new();
            let e = t.param(s, enc);
            let d = t.param(s, dec);
            let y = agf_forward(&mut t, s, &p, e, d)?;
            let w = t.leaf(probe.clone());
            let prod = t.mul(y, w)?;
            let loss = t.sum_all(prod)?;
            Ok((t, loss))
        };
        let (tape, loss) = run(&store).unwrap();
        let grads = tape.backward(loss).unwrap();
        let analytic = tape.param_grads(&grads);
        let outcome: CheckOutcome = check_store_gradients(
            &mut store,
            &analytic,
            |s| run(s).map(|(t, l)| t.value(l).data()[0]),
            CoordPlan::Sample { per_param: 6, seed: 65 },
            1e-4,
            1e-6,
        )
        .unwrap();
        assert!(
            outcome.max_rel_err < 1e-4,
            "worst {} at {}[{}]: analytic {} numeric {}",
            outcome.max_rel_err,
            outcome.worst_param,
            outcome.worst_index,
            outcome.worst_analytic,
            outcome.worst_numeric
        );
        assert!(outcome.coords_checked >= 30, "only {} coords probed", outcome.coords_checked);
    }

    #[test]
    fn construction_and_shape_guards() {
        let mut rng = ChaCha8Rng::seed_from_u64(66);
        let mut store = ParamStore::<f64>::new();
        assert!(AgfParams::register(&mut store, &mut rng, "bad", 6).is_err());
        let p = AgfParams::register(&mut store, &mut rng, "agf", 8).unwrap();
        let mut t = Tape::new();
        let e = t.leaf(rand_vol(&mut rng, [1, 8, 3, 3, 3]));
        let d = t.leaf(rand_vol(&mut rng, [1, 8, 3, 3, 2]));
        assert!(agf_forward(&mut t, &store, &p, e, d).is_err());
        let narrow = t.leaf(rand_vol(&mut rng, [1, 4, 3, 3, 3]));
        assert!(agf_forward(&mut t, &store, &p, narrow, narrow).is_err());
    }
}
