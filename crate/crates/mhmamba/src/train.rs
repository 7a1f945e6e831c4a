//! Loss, optimizer, learning-rate schedule, patch sampling, and the
//! training loop: equally weighted soft-Dice plus cross-entropy, plain SGD
//! with decoupled weight decay, polynomial decay, random crops with
//! optional mirror flips. Single-threaded over steps so a fixed seed
//! reproduces the loss log byte for byte.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, VarId};
use crate::error::{Error, Result};
use crate::network::Network;
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::volume::{LabelVolume, Volume5};

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    pub momentum: f64,
    pub patch: [usize; 3],
    pub seed: u64,
    pub mirror_flips: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 150,
            batch: 1,
            lr: 1e-3,
            weight_decay: 1e-5,
            poly_power: 0.9,
            momentum: 0.0,
            patch: [32, 32, 32],
            seed: 0,
            mirror_flips: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 && self.lr != 0.0 {
            return Err(Error::config(format!("lr {} must be nonnegative", self.lr)));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1".to_string()));
        }
        if self.batch == 0 {
            return Err(Error::config("batch must be at least 1".to_string()));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(Error::config(format!("momentum {} outside [0, 1]", self.momentum)));
        }
        Ok(())
    }
}

/// The three logged scalars. `total` is defined as the equal-weight sum of
/// the two terms, so the logged identity total == 0.5*dice + 0.5*ce is
/// exact by construction.
#[derive(Clone, Copy, Debug)]
pub struct LossValue {
    pub total: f64,
    pub dice: f64,
    pub ce: f64,
}

/// Records softmax, Dice, and cross-entropy on the tape and returns the
/// combined scalar variable for backward plus the logged values.
pub fn combined_loss<T: Scalar>(
    tape: &mut Tape<T>,
    logits: VarId,
    labels: &LabelVolume,
) -> Result<(VarId, LossValue)> {
    let probs = tape.softmax_channels(logits)?;
    let dice = tape.dice_loss(probs, labels)?;
    let ce = tape.cross_entropy(logits, labels)?;
    let half = T::from_f64(0.5);
    let hd = tape.scale(dice, half)?;
    let hc = tape.scale(ce, half)?;
    let total = tape.add(hd, hc)?;
    let dv = tape.value(dice).data()[0].to_f64();
    let cv = tape.value(ce).data()[0].to_f64();
    Ok((total, LossValue { total: 0.5 * dv + 0.5 * cv, dice: dv, ce: cv }))
}

/// lr0 * (1 - step/total)^power, the paper's polynomial decay.
pub fn poly_lr(step: usize, total: usize, lr0: f64, power: f64) -> f64 {
    let frac = 1.0 - step as f64 / total as f64;
    lr0 * frac.powf(power)
}

/// Mirrors a volume along the chosen spatial axes (depth, height, width).
pub fn flip_volume<T: Scalar>(v: &Volume5<T>, axes: [bool; 3]) -> Volume5<T> {
    let [b_n, c_n, d, h, w] = v.shape();
    Volume5::from_fn(v.shape(), |idx| {
        let wi = idx % w;
        let hi = (idx / w) % h;
        let di = (idx / (w * h)) % d;
        let rest = idx / (w * h * d);
        let (c, b) = (rest % c_n, rest / c_n);
        let sd = if axes[0] { d - 1 - di } else { di };
        let sh = if axes[1] { h - 1 - hi } else { hi };
        let sw = if axes[2] { w - 1 - wi } else { wi };
        let _ = b_n;
        v.data()[(((b * c_n + c) * d + sd) * h + sh) * w + sw]
    })
}

pub fn flip_labels(l: &LabelVolume, axes: [bool; 3]) -> LabelVolume {
    let [b_n, d, h, w] = l.shape();
    let mut out = LabelVolume::zeros(l.shape());
    for b in 0..b_n {
        for di in 0..d {
            for hi in 0..h {
                for wi in 0..w {
                    let sd = if axes[0] { d - 1 - di } else { di };
                    let sh = if axes[1] { h - 1 - hi } else { hi };
                    let sw = if axes[2] { w - 1 - wi } else { wi };
                    out.data_mut()[((b * d + di) * h + hi) * w + wi] =
                        l.data()[((b * d + sd) * h + sh) * w + sw];
                }
            }
        }
    }
    out
}

/// Crops a random patch (uniform corner) from a single-batch volume/label
/// pair, mirroring both consistently when `mirror` is set. Draw order is
/// fixed: three corner coordinates, then three flip coins.
pub fn sample_patch<T: Scalar, R: Rng>(
    image: &Volume5<T>,
    labels: &LabelVolume,
    patch: [usize; 3],
    rng: &mut R,
    mirror: bool,
) -> Result<(Volume5<T>, LabelVolume)> {
    let [b_n, c_n, d, h, w] = image.shape();
    let [lb, ld, lh, lw] = labels.shape();
    if b_n != 1 || lb != 1 {
        return Err(Error::shape("sample_patch", "expects single-batch volumes".to_string()));
    }
    if [ld, lh, lw] != [d, h, w] {
        return Err(Error::shape(
            "sample_patch",
            format!("labels {:?} do not match image {:?}", labels.shape(), image.shape()),
        ));
    }
    let [pd, ph, pw] = patch;
    if pd > d || ph > h || pw > w || pd == 0 || ph == 0 || pw == 0 {
        return Err(Error::shape(
            "sample_patch",
            format!("patch {patch:?} does not fit volume ({d}, {h}, {w})"),
        ));
    }
    let d0 = rng.gen_range(0..=d - pd);
    let h0 = rng.gen_range(0..=h - ph);
    let w0 = rng.gen_range(0..=w - pw);
    let mut img = Volume5::from_fn([1, c_n, pd, ph, pw], |idx| {
        let wi = idx % pw;
        let hi = (idx / pw) % ph;
        let di = (idx / (pw * ph)) % pd;
        let c = idx / (pw * ph * pd);
        image.data()[((c * d + d0 + di) * h + h0 + hi) * w + w0 + wi]
    });
    let mut lab = LabelVolume::zeros([1, pd, ph, pw]);
    for di in 0..pd {
        for hi in 0..ph {
            for wi in 0..pw {
                lab.data_mut()[(di * ph + hi) * pw + wi] =
                    labels.data()[((d0 + di) * h + h0 + hi) * w + w0 + wi];
            }
        }
    }
    if mirror {
        let axes = [rng.gen_bool(0.5), rng.gen_bool(0.5), rng.gen_bool(0.5)];
        img = flip_volume(&img, axes);
        lab = flip_labels(&lab, axes);
    }
    Ok((img, lab))
}

/// Plain SGD with decoupled weight decay: p -= lr*v + lr*wd*p, where v is
/// the gradient or, with momentum, its running accumulation (decay stays
/// outside the buffer). Parameters are visited in registration order.
pub struct Sgd<T> {
    momentum: f64,
    buffers: HashMap<ParamId, Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(momentum: f64) -> Self {
        Sgd { momentum, buffers: HashMap::new() }
    }

    pub fn step(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &HashMap<ParamId, Volume5<T>>,
        lr: f64,
        weight_decay: f64,
    ) {
        let lr_t = T::from_f64(lr);
        let wd_t = T::from_f64(lr * weight_decay);
        let mu = T::from_f64(self.momentum);
        for id in store.ids().collect::<Vec<_>>() {
            let Some(g) = grads.get(&id) else { continue };
            let value = store.value_mut(id);
            if self.momentum > 0.0 {
                let buf = self
                    .buffers
                    .entry(id)
                    .or_insert_with(|| vec![T::ZERO; g.numel()]);
                for ((p, &gv), bv) in value.data_mut().iter_mut().zip(g.data()).zip(buf) {
                    *bv = mu * *bv + gv;
                    *p = *p - lr_t * *bv - wd_t * *p;
                }
            } else {
                for (p, &gv) in value.data_mut().iter_mut().zip(g.data()) {
                    *p = *p - lr_t * gv - wd_t * *p;
                }
            }
        }
    }
}

pub struct TrainOutcome {
    /// CSV with header "epoch,total,dice,ce,lr", one row per epoch holding
    /// the epoch's mean losses and the lr of its first step.
    pub log: String,
    pub epoch_losses: Vec<LossValue>,
}

/// Runs the full loop: per epoch, one batch of random patches from each
/// training pair in order. Aborts with a named tensor on a non-finite loss.
pub fn train<T: Scalar>(
    net: &Network,
    store: &mut ParamStore<T>,
    data: &[(Volume5<T>, LabelVolume)],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::config("no training volumes".to_string()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Sgd::new(cfg.momentum);
    let total_steps = cfg.epochs * data.len();
    let mut log = String::from("epoch,total,dice,ce,lr\n");
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let lr_at_start = poly_lr(step, total_steps, cfg.lr, cfg.poly_power);
        let mut sums = LossValue { total: 0.0, dice: 0.0, ce: 0.0 };
        for (image, labels) in data {
            let (x, y) = stack_batch(image, labels, cfg, &mut rng)?;
            let mut tape = Tape::new();
            let xi = tape.leaf(x);
            let logits = net.forward(&mut tape, store, xi)?;
            let (total, value) = combined_loss(&mut tape, logits, &y)?;
            if !value.total.is_finite() {
                let tensor = tape
                    .first_non_finite(Some(store))
                    .map(|(_, name)| name)
                    .unwrap_or_else(|| "loss".to_string());
                return Err(Error::NonFinite { tensor });
            }
            let grads = tape.backward(total)?;
            let param_grads = tape.param_grads(&grads);
            let lr = poly_lr(step, total_steps, cfg.lr, cfg.poly_power);
            opt.step(store, &param_grads, lr, cfg.weight_decay);
            sums.total += value.total;
            sums.dice += value.dice;
            sums.ce += value.ce;
            step += 1;
        }
        let n = data.len() as f64;
        let mean = LossValue { total: sums.total / n, dice: sums.dice / n, ce: sums.ce / n };
        log.push_str(&format!(
            "{},{},{},{},{}\n",
            epoch + 1,
            mean.total,
            mean.dice,
            mean.ce,
            lr_at_start
        ));
        epoch_losses.push(mean);
    }
    Ok(TrainOutcome { log, epoch_losses })
}

/// Draws `cfg.batch` patches from one volume and stacks them along the
/// batch axis.
fn stack_batch<T: Scalar>(
    image: &Volume5<T>,
    labels: &LabelVolume,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Volume5<T>, LabelVolume)> {
    let [pd, ph, pw] = cfg.patch;
    let c_n = image.shape()[1];
    let mut x = Volume5::zeros([cfg.batch, c_n, pd, ph, pw]);
    let mut y = LabelVolume::zeros([cfg.batch, pd, ph, pw]);
    let img_len = c_n * pd * ph * pw;
    let lab_len = pd * ph * pw;
    for b in 0..cfg.batch {
        let (img, lab) = sample_patch(image, labels, cfg.patch, rng, cfg.mirror_flips)?;
        x.data_mut()[b * img_len..(b + 1) * img_len].copy_from_slice(img.data());
        y.data_mut()[b * lab_len..(b + 1) * lab_len].copy_from_slice(lab.data());
    }
    Ok((x, y))
}
