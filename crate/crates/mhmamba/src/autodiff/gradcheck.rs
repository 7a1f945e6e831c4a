use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::volume::Volume5;

/// |a - b| / max(|a|, |b|, 1e-8). Relative near large values, absolute
/// near zero, so a pair of tiny gradients does not blow up the ratio.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Central difference of `eval` in one coordinate of one stored parameter.
/// The coordinate is restored afterwards even if evaluation fails.
pub fn central_diff<T: Scalar, F>(
    store: &mut ParamStore<T>,
    id: ParamId,
    index: usize,
    eps: f64,
    eval: &mut F,
) -> Result<f64>
where
    F: FnMut(&ParamStore<T>) -> Result<T>,
{
    let base = store.value(id).data()[index];
    let step = T::from_f64(eps);
    store.value_mut(id).data_mut()[index] = base + step;
    let plus = eval(store);
    store.value_mut(id).data_mut()[index] = base - step;
    let minus = plus.and_then(|p| eval(store).map(|m| (p, m)));
    store.value_mut(id).data_mut()[index] = base;
    let (plus, minus) = minus?;
    Ok((plus.to_f64() - minus.to_f64()) / (2.0 * eps))
}

/// Which coordinates of each parameter to probe.
#[derive(Clone, Copy, Debug)]
pub enum CoordPlan {
    /// Every coordinate of every parameter. Only viable for small stores.
    All,
    /// At most `per_param` distinct coordinates per parameter, drawn from a
    /// seeded generator so reruns probe the same set.
    Sample { per_param: usize, seed: u64 },
    /// At most `total` distinct coordinates across the whole store, drawn
    /// uniformly over the concatenated parameter space so large tensors get
    /// proportionally more probes. For models where even one coordinate per
    /// tensor is too many forward evaluations.
    Budget { total: usize, seed: u64 },
    /// The `total` coordinates with the largest analytic magnitude across
    /// the whole store. Complements `Budget` on deep networks where most
    /// coordinates carry structurally tiny gradients: uniform draws would
    /// almost never land on the weights that actually move training.
    Largest { total: usize },
}

/// Worst observed disagreement between analytic and numeric gradients.
#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub coords_checked: usize,
    /// Coordinates where analytic and numeric both sit below the
    /// negligibility floor: they agree that the gradient vanishes, which
    /// is all a finite difference can certify there.
    pub coords_negligible: usize,
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

/// Compares `analytic` gradients against central differences of `eval`
/// for every coordinate the plan selects. `eval` must rebuild the forward
/// pass from the store on each call; the store is returned unmodified.
/// An absent entry in `analytic` is treated as an all-zero gradient.
///
/// `min_grad` guards against measuring noise: where a true gradient is far
/// smaller than the loss, the central difference is dominated by rounding
/// in the forward evaluations, so a relative comparison is meaningless.
/// A coordinate is only exempted when BOTH sides fall below the floor; a
/// tiny analytic value against a large numeric one (a dropped term) is
/// still measured and fails.
pub fn check_store_gradients<T: Scalar, F>(
    store: &mut ParamStore<T>,
    analytic: &HashMap<ParamId, Volume5<T>>,
    mut eval: F,
    plan: CoordPlan,
    eps: f64,
    min_grad: f64,
) -> Result<CheckOutcome>
where
    F: FnMut(&ParamStore<T>) -> Result<T>,
{
    let mut outcome = CheckOutcome {
        coords_checked: 0,
        coords_negligible: 0,
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
    };
    let mut rng = match plan {
        CoordPlan::All | CoordPlan::Largest { .. } => None,
        CoordPlan::Sample { seed, .. } | CoordPlan::Budget { seed, .. } => {
            Some(ChaCha8Rng::seed_from_u64(seed))
        }
    };
    let ids: Vec<ParamId> = store.ids().collect();
    let preplanned: Option<HashMap<ParamId, Vec<usize>>> = match plan {
        CoordPlan::Budget { total, .. } => {
            let sizes: Vec<usize> = ids.iter().map(|&id| store.value(id).numel()).collect();
            let space: usize = sizes.iter().sum();
            let rng = rng.as_mut().unwrap();
            let mut flat = Vec::with_capacity(total.min(space));
            while flat.len() < total.min(space) {
                let pick = rng.gen_range(0..space);
                if !flat.contains(&pick) {
                    flat.push(pick);
                }
            }
            let mut by_id: HashMap<ParamId, Vec<usize>> = HashMap::new();
            for pick in flat {
                let mut offset = pick;
                for (&id, &n) in ids.iter().zip(&sizes) {
                    if offset < n {
                        by_id.entry(id).or_default().push(offset);
                        break;
                    }
                    offset -= n;
                }
            }
            Some(by_id)
        }
        CoordPlan::Largest { total } => {
            // Bounded min-heap of (magnitude, position) keeps the winners
            // in O(space log total) without materializing the whole space.
            // Magnitudes are non-negative, so their bit patterns order the
            // same way the floats do; non-finite values sort above all
            // finite ones, so a NaN gradient cannot hide from selection.
            let mut heap: BinaryHeap<Reverse<(u64, usize, usize)>> = BinaryHeap::new();
            for (pos, &id) in ids.iter().enumerate() {
                let g = analytic.get(&id);
                for index in 0..store.value(id).numel() {
                    let a = g.map_or(0.0, |v| v.data()[index].to_f64());
                    let mag = if a.is_finite() { a.abs() } else { f64::INFINITY };
                    heap.push(Reverse((mag.to_bits(), pos, index)));
                    if heap.len() > total {
                        heap.pop();
                    }
                }
            }
            let mut by_id: HashMap<ParamId, Vec<usize>> = HashMap::new();
            for Reverse((_, pos, index)) in heap {
                by_id.entry(ids[pos]).or_default().push(index);
            }
            Some(by_id)
        }
        _ => None,
    };
    for id in ids {
        let numel = store.value(id).numel();
        let coords: Vec<usize> = match (&plan, rng.as_mut()) {
            (CoordPlan::All, _) => (0..numel).collect(),
            (CoordPlan::Budget { .. } | CoordPlan::Largest { .. }, _) => {
                preplanned.as_ref().unwrap().get(&id).cloned().unwrap_or_default()
            }
            (CoordPlan::Sample { per_param, .. }, Some(rng)) => {
                if *per_param >= numel {
                    (0..numel).collect()
                } else {
                    // Distinct draws; resample collisions.
                    let mut picked = Vec::with_capacity(*per_param);
                    while picked.len() < *per_param {
                        let i = rng.gen_range(0..numel);
                        if !picked.contains(&i) {
                            picked.push(i);
                        }
                    }
                    picked
                }
            }
            _ => unreachable!(),
        };
        for index in coords {
            let a = analytic.get(&id).map_or(0.0, |g| g.data()[index].to_f64());
            outcome.coords_checked += 1;
            // A disagreeing coordinate is retried at other step sizes and
            // the closest agreement kept. A secant across a ReLU kink or an
            // argmax switch is biased until the step drops below the kink
            // distance; a slope much smaller than the loss drowns in
            // evaluation rounding until the step grows. A real gradient bug
            // is step-independent and fails every rung. The ladder reaches
            // down to eps/10000 because deep compositions pack kinks
            // densely: over a 16^3 volume some downstream relu input sits
            // within 1e-6 of zero along almost every parameter direction.
            let mut best_err = f64::INFINITY;
            let mut best_numeric = 0.0;
            let mut negligible = false;
            for h in [eps, eps * 10.0, eps / 10.0, eps / 100.0, eps / 1000.0, eps / 10000.0] {
                let numeric = central_diff(store, id, index, h, &mut eval)?;
                if a.abs() < min_grad && numeric.abs() < min_grad {
                    negligible = true;
                    break;
                }
                let err = rel_err(a, numeric);
                if err < best_err {
                    best_err = err;
                    best_numeric = numeric;
                }
                if best_err <= REFINE_BELOW {
                    break;
                }
            }
            if negligible {
                outcome.coords_negligible += 1;
                continue;
            }
            if best_err > outcome.max_rel_err {
                outcome.max_rel_err = best_err;
                outcome.worst_param = store.name(id).to_string();
                outcome.worst_index = index;
                outcome.worst_analytic = a;
                outcome.worst_numeric = best_numeric;
            }
        }
    }
    Ok(outcome)
}

/// Agreement this tight needs no step refinement.
const REFINE_BELOW: f64 = 1e-5;
