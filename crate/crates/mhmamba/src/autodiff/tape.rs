use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::kernels::conv::{
    conv3d, conv3d_backward_input, conv3d_backward_weight, Conv3dSpec,
};
use crate::kernels::elementwise::{broadcast_zip, reduce_to_shape};
use crate::kernels::norm::{
    instance_norm, instance_norm_backward, layer_norm, layer_norm_backward, NormStats,
};
use crate::kernels::pool::{
    channel_stats, channel_stats_backward, global_avg_pool, global_max_pool, ChannelStatArgs,
};
use crate::kernels::resample::{upsample_trilinear_2x, upsample_trilinear_2x_backward};
use crate::kernels::sobel::{sobel3d_backward, sobel3d_components};
use crate::params::{ParamId, ParamStore};
use crate::scalar::{sigmoid, softplus, Scalar};
use crate::volume::{LabelVolume, Volume5};

/// Epsilon inside the square root of both normalization layers.
pub const NORM_EPS: f64 = 1e-5;
/// Additive smoothing in the dice loss numerator and denominator.
pub const DICE_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct VarId(usize);

struct SsmSaved<T> {
    /// States after each step: h[((b*C + c)*N + t)*d + n].
    h: Vec<T>,
    /// delta[(b*C + c)*N + t]
    delta: Vec<T>,
    /// bp[(b*d + n)*N + t]
    bp: Vec<T>,
    /// cp[(b*d + n)*N + t]
    cp: Vec<T>,
}

enum Op<T: Scalar> {
    Leaf { param: Option<ParamId> },
    Conv3d { x: VarId, w: VarId, bias: Option<VarId>, spec: Conv3dSpec },
    Sobel3d { x: VarId, comps: Box<(Volume5<T>, Volume5<T>, Volume5<T>)> },
    LayerNorm { x: VarId, gamma: VarId, beta: VarId, stats: NormStats<T> },
    InstanceNorm { x: VarId, gamma: VarId, beta: VarId, stats: NormStats<T> },
    Relu { x: VarId },
    Sigmoid { x: VarId },
    Softplus { x: VarId },
    Add { a: VarId, b: VarId },
    Mul { a: VarId, b: VarId },
    Scale { x: VarId, k: T },
    AddScalar { x: VarId },
    GlobalAvgPool { x: VarId },
    GlobalMaxPool { x: VarId, argmax: Vec<u32> },
    ChannelStats { x: VarId, args: ChannelStatArgs },
    SliceChannels { x: VarId, start: usize },
    ConcatChannels { parts: Vec<VarId> },
    Upsample2x { x: VarId },
    Reshape { x: VarId },
    SumAll { x: VarId },
    SsmScan {
        x: VarId,
        a_log: VarId,
        w_delta: VarId,
        b_delta: VarId,
        w_b: VarId,
        w_c: VarId,
        d_skip: VarId,
        d_state: usize,
        saved: SsmSaved<T>,
    },
    SoftmaxChannels { x: VarId },
    CrossEntropy { logits: VarId, labels: LabelVolume, probs: Volume5<T> },
    DiceLoss { probs: VarId, labels: LabelVolume, inter: Vec<T>, psum: Vec<T>, gsum: Vec<T> },
}

impl<T: Scalar> Op<T> {
    fn kind(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::Conv3d { .. } => "conv3d",
            Op::Sobel3d { .. } => "sobel3d",
            Op::LayerNorm { .. } => "layer_norm",
            Op::InstanceNorm { .. } => "instance_norm",
            Op::Relu { .. } => "relu",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Softplus { .. } => "softplus",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::AddScalar { .. } => "add_scalar",
            Op::GlobalAvgPool { .. } => "global_avg_pool",
            Op::GlobalMaxPool { .. } => "global_max_pool",
            Op::ChannelStats { .. } => "channel_stats",
            Op::SliceChannels { .. } => "slice_channels",
            Op::ConcatChannels { .. } => "concat_channels",
            Op::Upsample2x { .. } => "upsample_trilinear_2x",
            Op::Reshape { .. } => "reshape",
            Op::SumAll { .. } => "sum_all",
            Op::SsmScan { .. } => "ssm_scan",
            Op::SoftmaxChannels { .. } => "softmax_channels",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::DiceLoss { .. } => "dice_loss",
        }
    }
}

struct Node<T: Scalar> {
    value: Volume5<T>,
    op: Op<T>,
}

/// Gradient buffers produced by `Tape::backward`, indexed by variable.
pub struct Gradients<T> {
    grads: Vec<Option<Volume5<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, id: VarId) -> Option<&Volume5<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

/// Dynamic tape: one forward pass, then at most one backward walk.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, VarId>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), param_vars: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: VarId) -> &Volume5<T> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Volume5<T>, op: Op<T>) -> VarId {
        let id = VarId(self.nodes.len());
        self.nodes.push(Node { value, op });
        id
    }

    /// Ensures an operand was produced by this tape. Because ids are handed
    /// out append-only and ops only reference earlier ids, the recorded
    /// graph is acyclic by construction.
    fn check_operand(&self, id: VarId, context: &'static str) -> Result<()> {
        if id.0 >= self.nodes.len() {
            return Err(Error::config(format!(
                "{context}: variable {} does not belong to this tape",
                id.0
            )));
        }
        Ok(())
    }

    /// New input leaf holding `value`.
    pub fn leaf(&mut self, value: Volume5<T>) -> VarId {
        self.push(value, Op::Leaf { param: None })
    }

    /// Leaf for a stored parameter. Memoized: repeated calls for the same
    /// parameter return the same variable, so each parameter occurs exactly
    /// once per tape and its gradient accumulates across all uses.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> VarId {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Leaf { param: Some(id) });
        self.param_vars.insert(id, v);
        v
    }

    pub fn conv3d(
        &mut self,
        x: VarId,
        w: VarId,
        bias: Option<VarId>,
        spec: Conv3dSpec,
    ) -> Result<VarId> {
        self.check_operand(x, "conv3d")?;
        self.check_operand(w, "conv3d")?;
        let bias_slice = match bias {
            Some(b) => {
                self.check_operand(b, "conv3d")?;
                let bv = self.value(b);
                let [_, c, d, h, wdim] = bv.shape();
                let c_out = self.value(w).shape()[0];
                if bv.numel() != c_out || c != c_out || d != 1 || h != 1 || wdim != 1 {
                    return Err(Error::shape(
                        "conv3d",
                        format!("bias must be [1, {c_out}, 1, 1, 1], got {:?}", bv.shape()),
                    ));
                }
                Some(b)
            }
            None => None,
        };
        let y = conv3d(
            self.value(x),
            self.value(w),
            bias_slice.map(|b| self.value(b).data()),
            spec,
        )?;
        Ok(self.push(y, Op::Conv3d { x, w, bias, spec }))
    }

    pub fn sobel3d(&mut self, x: VarId) -> Result<VarId> {
        self.check_operand(x, "sobel3d")?;
        let (gd, gh, gw) = sobel3d_components(self.value(x))?;
        let mut mag = gd.clone();
        for ((m, &a), &b) in mag.data_mut().iter_mut().zip(gh.data()).zip(gw.data()) {
            *m = (*m * *m + a * a + b * b).sqrt();
        }
        Ok(self.push(mag, Op::Sobel3d { x, comps: Box::new((gd, gh, gw)) }))
    }

    fn check_affine(&self, context: &'static str, x: VarId, gamma: VarId, beta: VarId) -> Result<()> {
        let c = self.value(x).channels();
        for id in [gamma, beta] {
            self.check_operand(id, context)?;
            let s = self.value(id).shape();
            if s != [1, c, 1, 1, 1] {
                return Err(Error::shape(
                    context,
                    format!("affine parameter must be [1, {c}, 1, 1, 1], got {s:?}"),
                ));
            }
        }
        Ok(())
    }

    pub fn layer_norm(&mut self, x: VarId, gamma: VarId, beta: VarId) -> Result<VarId> {
        self.check_operand(x, "layer_norm")?;
        self.check_affine("layer_norm", x, gamma, beta)?;
        let (y, stats) = layer_norm(
            self.value(x),
            self.value(gamma).data(),
            self.value(beta).data(),
            T::from_f64(NORM_EPS),
        )?;
        Ok(self.push(y, Op::LayerNorm { x, gamma, beta, stats }))
    }

    pub fn instance_norm(&mut self, x: VarId, gamma: VarId, beta: VarId) -> Result<VarId> {
        self.check_operand(x, "instance_norm")?;
        self.check_affine("instance_norm", x, gamma, beta)?;
        let (y, stats) = instance_norm(
            self.value(x),
            self.value(gamma).data(),
            self.value(beta).data(),
            T::from_f64(NORM_EPS),
        )?;
        Ok(self.push(y, Op::InstanceNorm { x, gamma, beta, stats }))
    }

    pub fn relu(&mut self, x: VarId) -> Result<VarId> {
        self.check_operand(x, "relu")?;
        let y = self.value(x).map(|v| if v > T::ZERO { v } else { T::ZERO });
        Ok(self.push(y, Op::Relu { x }))
    }

    pub fn sigmoid(&mut self, x: VarId) -> Result<VarId> {
        self.check_operand(x, "sigmoid")?;
        let y = self.value(x).map(sigmoid);
        Ok(self.push(y, Op::Sigmoid { x }))
    }

    pub fn softplus(&mut self, x: VarId) -> Result<VarId> {
        self.check_operand(x, "softplus")?;
        let y = self.value(x).map(softplus);
        Ok(self.push(y, Op::Softplus { x }))
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.check_operand(a, "add")?;
        self.check_operand(b, "add")?;
        let y = broadcast_zip(self.value(a), self.value(b), |x, y| x + y)?;
        Ok(self.push(y, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.check_operand(a, "mul")?;
        self.check_operand(b, "mul")?;
        let y = broadcast_zip(self.value(a), self.value(b), |x, y| x * y)?;
        Ok(self.push(y, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: VarId, k: T) -> Result<VarId> {
        self.check_operand(x, "scale")?;
        let y = self.value(x).map(|v| v * k);
        Ok(self.push(y, Op::Scale { x, k }))
    }

    pub fn add_scalar(&mut self, x: VarId, k: T) -> Result<VarId> {
        self.check_operand(x, "add_scalar")?;
        let y = self.value(x).map(|v| v + k);
        Ok(self.push(y, Op::AddScalar { x }))
    }

    /// Convenience: 1 - x, used by complementary gates.
    pub fn one_minus(&mut self, x: VarId) -> Result<VarId> {
        let neg = self.scale(x, -T::ONE)?;
        self.add_scalar(neg, T::ONE)
    }

    pub fn global_avg_pool(&mut self, x: VarId) -> Result<VarId> {
        self.check_operand(x, "global_avg_pool")?;
        let y = global_avg_pool(self.value(x));
        Ok(self.push(y, Op::GlobalAvgPool { x }))
    }

    pub fn global_max_pool(&mut self, x: VarId) -> Result<VarId> {
        self.check_operand(x, "global_max_pool")?;
        let (y, argmax) = global_max_pool(self.value(x));
        Ok(self.push(y, Op::GlobalMaxPool { x, argmax }))
    }

    pub fn channel_stats(&mut self, x: VarId) -> Result<VarId> {
        self.check_operand(x, "channel_stats")?;
        let (y, args) = channel_stats(self.value(x));
        Ok(self.push(y, Op::ChannelStats { x, args }))
    }

    pub fn slice_channels(&mut self, x: VarId, start: usize, len: usize) -> Result<VarId> {
        self.check_operand(x, "slice_channels")?;
        let (b_n, c_n, d, h, w) = self.value(x).dims();
        if len == 0 || start + len > c_n {
            return Err(Error::shape(
                "slice_channels",
                format!("range {start}..{} out of {c_n} channels", start + len),
            ));
        }
        let mut y = Volume5::zeros([b_n, len, d, h, w]);
        for b in 0..b_n {
            for c in 0..len {
                y.channel_mut(b, c).copy_from_slice(self.value(x).channel(b, start + c));
            }
        }
        Ok(self.push(y, Op::SliceChannels { x, start }))
    }

    pub fn concat_channels(&mut self, parts: &[VarId]) -> Result<VarId> {
        if parts.is_empty() {
            return Err(Error::config("concat_channels: no inputs"));
        }
        for &p in parts {
            self.check_operand(p, "concat_channels")?;
        }
        let (b_n, _, d, h, w) = self.value(parts[0]).dims();
        let mut c_total = 0;
        for &p in parts {
            let (pb, pc, pd, ph, pw) = self.value(p).dims();
            if (pb, pd, ph, pw) != (b_n, d, h, w) {
                return Err(Error::shape(
                    "concat_channels",
                    format!(
                        "part shape {:?} incompatible with {:?}",
                        self.value(p).shape(),
                        self.value(parts[0]).shape()
                    ),
                ));
            }
            c_total += pc;
        }
        let mut y = Volume5::zeros([b_n, c_total, d, h, w]);
        for b in 0..b_n {
            let mut at = 0;
            for &p in parts {
                let pc = self.value(p).channels();
                for c in 0..pc {
                    y.channel_mut(b, at + c).copy_from_slice(self.value(p).channel(b, c));
                }
                at += pc;
            }
        }
        Ok(self.push(y, Op::ConcatChannels { parts: parts.to_vec() }))
    }

    pub fn upsample_trilinear_2x(&mut self, x: VarId) -> Result<VarId> {
        self.check_operand(x, "upsample_trilinear_2x")?;
        let y = upsample_trilinear_2x(self.value(x))?;
        Ok(self.push(y, Op::Upsample2x { x }))
    }

    pub fn reshape(&mut self, x: VarId, shape: [usize; 5]) -> Result<VarId> {
        self.check_operand(x, "reshape")?;
        let y = self.value(x).reshaped(shape)?;
        Ok(self.push(y, Op::Reshape { x }))
    }

    /// Scalar sum of every element.
    pub fn sum_all(&mut self, x: VarId) -> Result<VarId> {
        self.check_operand(x, "sum_all")?;
        let mut acc = T::ZERO;
        for &v in self.value(x).data() {
            acc += v;
        }
        Ok(self.push(Volume5::scalar(acc), Op::SumAll { x }))
    }

    /// Selective state-space scan over the raster-flattened spatial extent
    /// of `x` (B, C, D, H, W), with `d_state` hidden states per channel.
    ///
    /// Parameter variables must be shaped a_log [C, d, 1, 1, 1],
    /// w_delta [C, C, 1, 1, 1], w_b / w_c [d, C, 1, 1, 1], and
    /// b_delta / d_skip [1, C, 1, 1, 1].
    #[allow(clippy::too_many_arguments)]
    pub fn ssm_scan(
        &mut self,
        x: VarId,
        a_log: VarId,
        w_delta: VarId,
        b_delta: VarId,
        w_b: VarId,
        w_c: VarId,
        d_skip: VarId,
        d_state: usize,
    ) -> Result<VarId> {
        for (id, ctx) in [
            (x, "ssm_scan x"),
            (a_log, "ssm_scan a_log"),
            (w_delta, "ssm_scan w_delta"),
            (b_delta, "ssm_scan b_delta"),
            (w_b, "ssm_scan w_b"),
            (w_c, "ssm_scan w_c"),
            (d_skip, "ssm_scan d_skip"),
        ] {
            self.check_operand(id, "ssm_scan")?;
            let _ = ctx;
        }
        let (b_n, c_n, _, _, _) = self.value(x).dims();
        let n = self.value(x).spatial_len();
        let d_n = d_state;
        let expect: [(&str, VarId, [usize; 5]); 6] = [
            ("a_log", a_log, [c_n, d_n, 1, 1, 1]),
            ("w_delta", w_delta, [c_n, c_n, 1, 1, 1]),
            ("b_delta", b_delta, [1, c_n, 1, 1, 1]),
            ("w_b", w_b, [d_n, c_n, 1, 1, 1]),
            ("w_c", w_c, [d_n, c_n, 1, 1, 1]),
            ("d_skip", d_skip, [1, c_n, 1, 1, 1]),
        ];
        for (name, id, shape) in expect {
            if self.value(id).shape() != shape {
                return Err(Error::shape(
                    "ssm_scan",
                    format!("{name} must be {:?}, got {:?}", shape, self.value(id).shape()),
                ));
            }
        }
        if d_n == 0 {
            return Err(Error::config("ssm_scan: d_state must be positive"));
        }

        let xv = self.value(x);
        let al = self.value(a_log).data();
        let wd = self.value(w_delta).data();
        let bd = self.value(b_delta).data();
        let wb = self.value(w_b).data();
        let wc = self.value(w_c).data();
        let ds = self.value(d_skip).data();

        let mut out = Volume5::zeros(xv.shape());
        let mut saved = SsmSaved {
            h: vec![T::ZERO; b_n * c_n * n * d_n],
            delta: vec![T::ZERO; b_n * c_n * n],
            bp: vec![T::ZERO; b_n * d_n * n],
            cp: vec![T::ZERO; b_n * d_n * n],
        };
        for b in 0..b_n {
            // Input-dependent projections as (rows, N) matrices.
            let delta_b = &mut saved.delta[b * c_n * n..(b + 1) * c_n * n];
            for c in 0..c_n {
                let row = &mut delta_b[c * n..(c + 1) * n];
                row.fill(bd[c]);
                for k in 0..c_n {
                    let wv = wd[c * c_n + k];
                    for (r, &xk) in row.iter_mut().zip(xv.channel(b, k)) {
                        *r += wv * xk;
                    }
                }
                for r in row.iter_mut() {
                    *r = softplus(*r);
                }
            }
            for (mat, w) in [(&mut saved.bp, wb), (&mut saved.cp, wc)] {
                let mat_b = &mut mat[b * d_n * n..(b + 1) * d_n * n];
                for nn in 0..d_n {
                    let row = &mut mat_b[nn * n..(nn + 1) * n];
                    row.fill(T::ZERO);
                    for k in 0..c_n {
                        let wv = w[nn * c_n + k];
                        for (r, &xk) in row.iter_mut().zip(xv.channel(b, k)) {
                            *r += wv * xk;
                        }
                    }
                }
            }
            // Recurrence, channel by channel.
            let delta_b = &saved.delta[b * c_n * n..(b + 1) * c_n * n];
            let bp_b = &saved.bp[b * d_n * n..(b + 1) * d_n * n];
            let cp_b = &saved.cp[b * d_n * n..(b + 1) * d_n * n];
            for c in 0..c_n {
                let xrow = xv.channel(b, c);
                let drow = &delta_b[c * n..(c + 1) * n];
                let hrow = &mut saved.h[((b * c_n + c) * n) * d_n..((b * c_n + c + 1) * n) * d_n];
                let arow = &al[c * d_n..(c + 1) * d_n];
                let yrow = out.channel_mut(b, c);
                let mut h = vec![T::ZERO; d_n];
                for t in 0..n {
                    let xval = xrow[t];
                    let dl = drow[t];
                    let mut acc = ds[c] * xval;
                    for nn in 0..d_n {
                        let a = -arow[nn].exp();
                        let abar = (dl * a).exp();
                        let hv = abar * h[nn] + dl * bp_b[nn * n + t] * xval;
                        h[nn] = hv;
                        hrow[t * d_n + nn] = hv;
                        acc += cp_b[nn * n + t] * hv;
                    }
                    yrow[t] = acc;
                }
            }
        }
        Ok(self.push(
            out,
            Op::SsmScan { x, a_log, w_delta, b_delta, w_b, w_c, d_skip, d_state, saved },
        ))
    }

    /// Channel-axis softmax with the max-subtraction stabilization.
    pub fn softmax_channels(&mut self, x: VarId) -> Result<VarId> {
        self.check_operand(x, "softmax_channels")?;
        let xv = self.value(x);
        let (b_n, c_n, _, _, _) = xv.dims();
        let n = xv.spatial_len();
        let mut y = Volume5::zeros(xv.shape());
        for b in 0..b_n {
            for site in 0..n {
                let mut m = xv.channel(b, 0)[site];
                for c in 1..c_n {
                    m = m.max_with(xv.channel(b, c)[site]);
                }
                let mut z = T::ZERO;
                for c in 0..c_n {
                    z += (xv.channel(b, c)[site] - m).exp();
                }
                for c in 0..c_n {
                    y.channel_mut(b, c)[site] = (xv.channel(b, c)[site] - m).exp() / z;
                }
            }
        }
        Ok(self.push(y, Op::SoftmaxChannels { x }))
    }

    fn check_labels(
        &self,
        context: &'static str,
        scores: VarId,
        labels: &LabelVolume,
    ) -> Result<()> {
        let (b_n, c_n, d, h, w) = self.value(scores).dims();
        if labels.shape() != [b_n, d, h, w] {
            return Err(Error::shape(
                context,
                format!("labels {:?} do not match scores {:?}", labels.shape(), self.value(scores).shape()),
            ));
        }
        if usize::from(labels.max_class()) >= c_n {
            return Err(Error::shape(
                context,
                format!("label class {} out of range for {c_n} channels", labels.max_class()),
            ));
        }
        Ok(())
    }

    /// Mean multinomial cross-entropy from raw logits, evaluated through
    /// log-sum-exp so large logits cannot overflow. Scalar output.
    pub fn cross_entropy(&mut self, logits: VarId, labels: &LabelVolume) -> Result<VarId> {
        self.check_operand(logits, "cross_entropy")?;
        self.check_labels("cross_entropy", logits, labels)?;
        let xv = self.value(logits);
        let (b_n, c_n, _, _, _) = xv.dims();
        let n = xv.spatial_len();
        let mut probs = Volume5::zeros(xv.shape());
        let mut total = T::ZERO;
        for b in 0..b_n {
            let lab = labels.entry(b);
            for site in 0..n {
                let mut m = xv.channel(b, 0)[site];
                for c in 1..c_n {
                    m = m.max_with(xv.channel(b, c)[site]);
                }
                let mut z = T::ZERO;
                for c in 0..c_n {
                    z += (xv.channel(b, c)[site] - m).exp();
                }
                let lse = m + z.ln();
                for c in 0..c_n {
                    probs.channel_mut(b, c)[site] = (xv.channel(b, c)[site] - lse).exp();
                }
                total += lse - xv.channel(b, lab[site] as usize)[site];
            }
        }
        let mean = total / T::from_f64((b_n * n) as f64);
        Ok(self.push(
            Volume5::scalar(mean),
            Op::CrossEntropy { logits, labels: labels.clone(), probs },
        ))
    }

    /// Soft dice loss over the foreground classes (1..C) of channel-softmax
    /// probabilities: 1 - mean_c (2 I_c + eps) / (P_c + G_c + eps). Scalar.
    pub fn dice_loss(&mut self, probs: VarId, labels: &LabelVolume) -> Result<VarId> {
        self.check_operand(probs, "dice_loss")?;
        self.check_labels("dice_loss", probs, labels)?;
        let pv = self.value(probs);
        let (b_n, c_n, _, _, _) = pv.dims();
        if c_n < 2 {
            return Err(Error::shape("dice_loss", "need at least one foreground class".to_string()));
        }
        let fg = c_n - 1;
        let mut inter = vec![T::ZERO; fg];
        let mut psum = vec![T::ZERO; fg];
        let mut gsum = vec![T::ZERO; fg];
        for b in 0..b_n {
            let lab = labels.entry(b);
            for c in 1..c_n {
                let ps = pv.channel(b, c);
                let (mut i_acc, mut p_acc, mut g_acc) = (T::ZERO, T::ZERO, T::ZERO);
                for (site, &p) in ps.iter().enumerate() {
                    p_acc += p;
                    if lab[site] as usize == c {
                        i_acc += p;
                        g_acc += T::ONE;
                    }
                }
                inter[c - 1] += i_acc;
                psum[c - 1] += p_acc;
                gsum[c - 1] += g_acc;
            }
        }
        let eps = T::from_f64(DICE_EPS);
        let mut dice_sum = T::ZERO;
        for c in 0..fg {
            dice_sum += (T::from_f64(2.0) * inter[c] + eps) / (psum[c] + gsum[c] + eps);
        }
        let loss = T::ONE - dice_sum / T::from_f64(fg as f64);
        Ok(self.push(
            Volume5::scalar(loss),
            Op::DiceLoss { probs, labels: labels.clone(), inter, psum, gsum },
        ))
    }

    /// First tape value containing a non-finite element, reported as
    /// (variable, op kind). Parameters report their registered name.
    pub fn first_non_finite(&self, store: Option<&ParamStore<T>>) -> Option<(VarId, String)> {
        for (i, node) in self.nodes.iter().enumerate() {
            if node.value.first_non_finite().is_some() {
                let desc = match (&node.op, store) {
                    (Op::Leaf { param: Some(p) }, Some(s)) => {
                        format!("parameter {}", s.name(*p))
                    }
                    (op, _) => format!("{} output (var {i})", op.kind()),
                };
                return Some((VarId(i), desc));
            }
        }
        None
    }

    /// Reverse sweep from a scalar loss variable. Returns one gradient
    /// buffer per reachable variable.
    pub fn backward(&self, loss: VarId) -> Result<Gradients<T>> {
        self.check_operand(loss, "backward")?;
        if self.value(loss).shape() != [1, 1, 1, 1, 1] {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Volume5<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Volume5::scalar(T::ONE));
        for id in (0..=loss.0).rev() {
            if grads[id].is_none() {
                continue;
            }
            let (head, tail) = grads.split_at_mut(id);
            let go = tail[0].as_ref().unwrap();
            self.backprop_node(id, go, head)?;
        }
        Ok(Gradients { grads })
    }

    /// Gradients of every parameter leaf after `backward`. Parameters whose
    /// gradient is entirely unreached are omitted.
    pub fn param_grads(&self, grads: &Gradients<T>) -> HashMap<ParamId, Volume5<T>> {
        let mut out = HashMap::new();
        for (&pid, &vid) in &self.param_vars {
            if let Some(g) = grads.wrt(vid) {
                out.insert(pid, g.clone());
            }
        }
        out
    }

    fn backprop_node(
        &self,
        id: usize,
        go: &Volume5<T>,
        head: &mut [Option<Volume5<T>>],
    ) -> Result<()> {
        let node = &self.nodes[id];
        let acc = |slot: &mut Option<Volume5<T>>, g: Volume5<T>| {
            match slot {
                Some(s) => {
                    debug_assert_eq!(s.shape(), g.shape());
                    for (a, &b) in s.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                None => *slot = Some(g),
            }
        };
        match &node.op {
            Op::Leaf { .. } => {}
            Op::Conv3d { x, w, bias, spec } => {
                let dx =
                    conv3d_backward_input(go, self.value(*w), self.value(*x).shape(), *spec)?;
                let (dw, db) = conv3d_backward_weight(
                    go,
                    self.value(*x),
                    self.value(*w).shape(),
                    *spec,
                    bias.is_some(),
                )?;
                acc(&mut head[x.0], dx);
                acc(&mut head[w.0], dw);
                if let Some(b) = bias {
                    let dbv = db.unwrap();
                    let c = dbv.len();
                    acc(&mut head[b.0], Volume5::new([1, c, 1, 1, 1], dbv)?);
                }
            }
            Op::Sobel3d { x, comps } => {
                let (gd, gh, gw) = (&comps.0, &comps.1, &comps.2);
                let dx = sobel3d_backward(go, (gd, gh, gw), &node.value)?;
                acc(&mut head[x.0], dx);
            }
            Op::LayerNorm { x, gamma, beta, stats } => {
                let (dx, dg, db) =
                    layer_norm_backward(go, self.value(*x), self.value(*gamma).data(), stats)?;
                let c = dg.len();
                acc(&mut head[x.0], dx);
                acc(&mut head[gamma.0], Volume5::new([1, c, 1, 1, 1], dg)?);
                acc(&mut head[beta.0], Volume5::new([1, c, 1, 1, 1], db)?);
            }
            Op::InstanceNorm { x, gamma, beta, stats } => {
                let (dx, dg, db) =
                    instance_norm_backward(go, self.value(*x), self.value(*gamma).data(), stats)?;
                let c = dg.len();
                acc(&mut head[x.0], dx);
                acc(&mut head[gamma.0], Volume5::new([1, c, 1, 1, 1], dg)?);
                acc(&mut head[beta.0], Volume5::new([1, c, 1, 1, 1], db)?);
            }
            Op::Relu { x } => {
                let dx = go.zip_with(self.value(*x), |g, xv| if xv > T::ZERO { g } else { T::ZERO })?;
                acc(&mut head[x.0], dx);
            }
            Op::Sigmoid { x } => {
                let dx = go.zip_with(&node.value, |g, y| g * y * (T::ONE - y))?;
                acc(&mut head[x.0], dx);
            }
            Op::Softplus { x } => {
                let dx = go.zip_with(self.value(*x), |g, xv| g * sigmoid(xv))?;
                acc(&mut head[x.0], dx);
            }
            Op::Add { a, b } => {
                acc(&mut head[a.0], reduce_to_shape(go, self.value(*a).shape())?);
                acc(&mut head[b.0], reduce_to_shape(go, self.value(*b).shape())?);
            }
            Op::Mul { a, b } => {
                let ga = broadcast_zip(go, self.value(*b), |g, bv| g * bv)?;
                acc(&mut head[a.0], reduce_to_shape(&ga, self.value(*a).shape())?);
                let gb = broadcast_zip(go, self.value(*a), |g, av| g * av)?;
                acc(&mut head[b.0], reduce_to_shape(&gb, self.value(*b).shape())?);
            }
            Op::Scale { x, k } => {
                let k = *k;
                acc(&mut head[x.0], go.map(|g| g * k));
            }
            Op::AddScalar { x } => {
                acc(&mut head[x.0], go.clone());
            }
            Op::GlobalAvgPool { x } => {
                let xv = self.value(*x);
                let (b_n, c_n, _, _, _) = xv.dims();
                let n = xv.spatial_len();
                let inv_n = T::ONE / T::from_f64(n as f64);
                let mut dx = Volume5::zeros(xv.shape());
                for b in 0..b_n {
                    for c in 0..c_n {
                        let g = go.data()[b * c_n + c] * inv_n;
                        dx.channel_mut(b, c).fill(g);
                    }
                }
                acc(&mut head[x.0], dx);
            }
            Op::GlobalMaxPool { x, argmax } => {
                let xv = self.value(*x);
                let (b_n, c_n, _, _, _) = xv.dims();
                let mut dx = Volume5::zeros(xv.shape());
                for b in 0..b_n {
                    for c in 0..c_n {
                        let i = b * c_n + c;
                        dx.channel_mut(b, c)[argmax[i] as usize] = go.data()[i];
                    }
                }
                acc(&mut head[x.0], dx);
            }
            Op::ChannelStats { x, args } => {
                let dx = channel_stats_backward(go, self.value(*x), &node.value, args)?;
                acc(&mut head[x.0], dx);
            }
            Op::SliceChannels { x, start } => {
                let xv = self.value(*x);
                let mut dx = Volume5::zeros(xv.shape());
                let (b_n, len, _, _, _) = node.value.dims();
                for b in 0..b_n {
                    for c in 0..len {
                        dx.channel_mut(b, start + c).copy_from_slice(go.channel(b, c));
                    }
                }
                acc(&mut head[x.0], dx);
            }
            Op::ConcatChannels { parts } => {
                let mut at = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let (b_n, pc, _, _, _) = pv.dims();
                    let mut dp = Volume5::zeros(pv.shape());
                    for b in 0..b_n {
                        for c in 0..pc {
                            dp.channel_mut(b, c).copy_from_slice(go.channel(b, at + c));
                        }
                    }
                    acc(&mut head[p.0], dp);
                    at += pc;
                }
            }
            Op::Upsample2x { x } => {
                let dx = upsample_trilinear_2x_backward(go, self.value(*x).shape())?;
                acc(&mut head[x.0], dx);
            }
            Op::Reshape { x } => {
                acc(&mut head[x.0], go.reshaped(self.value(*x).shape())?);
            }
            Op::SumAll { x } => {
                let g = go.data()[0];
                acc(&mut head[x.0], Volume5::full(self.value(*x).shape(), g));
            }
            Op::SsmScan { x, a_log, w_delta, b_delta, w_b, w_c, d_skip, d_state, saved } => {
                self.backprop_ssm(
                    go, *x, *a_log, *w_delta, *b_delta, *w_b, *w_c, *d_skip, *d_state, saved,
                    head,
                )?;
            }
            Op::SoftmaxChannels { x } => {
                let y = &node.value;
                let (b_n, c_n, _, _, _) = y.dims();
                let n = y.spatial_len();
                let mut dx = Volume5::zeros(y.shape());
                for b in 0..b_n {
                    for site in 0..n {
                        let mut dot = T::ZERO;
                        for c in 0..c_n {
                            dot += go.channel(b, c)[site] * y.channel(b, c)[site];
                        }
                        for c in 0..c_n {
                            let yv = y.channel(b, c)[site];
                            dx.channel_mut(b, c)[site] = yv * (go.channel(b, c)[site] - dot);
                        }
                    }
                }
                acc(&mut head[x.0], dx);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let g = go.data()[0];
                let (b_n, c_n, _, _, _) = probs.dims();
                let n = probs.spatial_len();
                let scale = g / T::from_f64((b_n * n) as f64);
                let mut dx = probs.clone();
                for b in 0..b_n {
                    let lab = labels.entry(b);
                    for c in 0..c_n {
                        let row = dx.channel_mut(b, c);
                        for (site, r) in row.iter_mut().enumerate() {
                            if lab[site] as usize == c {
                                *r -= T::ONE;
                            }
                            *r *= scale;
                        }
                    }
                }
                acc(&mut head[logits.0], dx);
            }
            Op::DiceLoss { probs, labels, inter, psum, gsum } => {
                let g = go.data()[0];
                let pv = self.value(*probs);
                let (b_n, c_n, _, _, _) = pv.dims();
                let fg = c_n - 1;
                let eps = T::from_f64(DICE_EPS);
                let inv_fg = T::ONE / T::from_f64(fg as f64);
                let mut dx = Volume5::zeros(pv.shape());
                for c in 1..c_n {
                    let denom = psum[c - 1] + gsum[c - 1] + eps;
                    let num = T::from_f64(2.0) * inter[c - 1] + eps;
                    // d dice_c / d p_i = (2 [y_i = c] denom - num) / denom^2
                    let coef_hit = (T::from_f64(2.0) * denom - num) / (denom * denom);
                    let coef_miss = -num / (denom * denom);
                    for b in 0..b_n {
                        let lab = labels.entry(b);
                        let row = dx.channel_mut(b, c);
                        for (site, r) in row.iter_mut().enumerate() {
                            let coef = if lab[site] as usize == c { coef_hit } else { coef_miss };
                            *r = -g * inv_fg * coef;
                        }
                    }
                }
                acc(&mut head[probs.0], dx);
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_ssm(
        &self,
        go: &Volume5<T>,
        x: VarId,
        a_log: VarId,
        w_delta: VarId,
        b_delta: VarId,
        w_b: VarId,
        w_c: VarId,
        d_skip: VarId,
        d_state: usize,
        saved: &SsmSaved<T>,
        head: &mut [Option<Volume5<T>>],
    ) -> Result<()> {
        let xv = self.value(x);
        let (b_n, c_n, _, _, _) = xv.dims();
        let n = xv.spatial_len();
        let d_n = d_state;
        let al = self.value(a_log).data();
        let wd = self.value(w_delta).data();
        let wb = self.value(w_b).data();
        let wc = self.value(w_c).data();
        let ds = self.value(d_skip).data();

        let mut dx = Volume5::zeros(xv.shape());
        let mut d_al = vec![T::ZERO; c_n * d_n];
        let mut d_wd = vec![T::ZERO; c_n * c_n];
        let mut d_bd = vec![T::ZERO; c_n];
        let mut d_wb = vec![T::ZERO; d_n * c_n];
        let mut d_wc = vec![T::ZERO; d_n * c_n];
        let mut d_ds = vec![T::ZERO; c_n];

        let mut d_delta = vec![T::ZERO; c_n * n];
        let mut d_bp = vec![T::ZERO; d_n * n];
        let mut d_cp = vec![T::ZERO; d_n * n];
        let mut dh = vec![T::ZERO; d_n];
        for b in 0..b_n {
            d_delta.fill(T::ZERO);
            d_bp.fill(T::ZERO);
            d_cp.fill(T::ZERO);
            let delta_b = &saved.delta[b * c_n * n..(b + 1) * c_n * n];
            let bp_b = &saved.bp[b * d_n * n..(b + 1) * d_n * n];
            let cp_b = &saved.cp[b * d_n * n..(b + 1) * d_n * n];
            for c in 0..c_n {
                let xrow = xv.channel(b, c);
                let gorow = go.channel(b, c);
                let drow = &delta_b[c * n..(c + 1) * n];
                let hrow = &saved.h[((b * c_n + c) * n) * d_n..((b * c_n + c + 1) * n) * d_n];
                let arow = &al[c * d_n..(c + 1) * d_n];
                let dxrow = dx.channel_mut(b, c);
                dh.fill(T::ZERO);
                let mut d_ds_c = T::ZERO;
                for t in (0..n).rev() {
                    let gy = gorow[t];
                    let xval = xrow[t];
                    let dl = drow[t];
                    d_ds_c += gy * xval;
                    let mut dxval = gy * ds[c];
                    let mut d_dl = T::ZERO;
                    for nn in 0..d_n {
                        let h_t = hrow[t * d_n + nn];
                        d_cp[nn * n + t] += gy * h_t;
                        let dh_n = dh[nn] + gy * cp_b[nn * n + t];
                        let a = -arow[nn].exp();
                        let abar = (dl * a).exp();
                        let h_prev = if t > 0 { hrow[(t - 1) * d_n + nn] } else { T::ZERO };
                        let bp_v = bp_b[nn * n + t];
                        d_dl += dh_n * (h_prev * abar * a + bp_v * xval);
                        // dA accumulated directly as d a_log via dA * A.
                        d_al[c * d_n + nn] += dh_n * h_prev * abar * dl * a;
                        d_bp[nn * n + t] += dh_n * dl * xval;
                        dxval += dh_n * dl * bp_v;
                        dh[nn] = dh_n * abar;
                    }
                    d_delta[c * n + t] = d_dl;
                    dxrow[t] += dxval;
                }
                d_ds[c] += d_ds_c;
            }
            // Through the projections. d softplus(u) = sigmoid(u) = 1 - e^-delta.
            for c in 0..c_n {
                let drow = &delta_b[c * n..(c + 1) * n];
                let durow = &mut d_delta[c * n..(c + 1) * n];
                for (du, &dl) in durow.iter_mut().zip(drow) {
                    *du *= T::ONE - (-dl).exp();
                }
            }
            for c in 0..c_n {
                let durow = &d_delta[c * n..(c + 1) * n];
                let mut s = T::ZERO;
                for &v in durow {
                    s += v;
                }
                d_bd[c] += s;
                for k in 0..c_n {
                    let mut dot = T::ZERO;
                    for (&a, &b2) in durow.iter().zip(xv.channel(b, k)) {
                        dot += a * b2;
                    }
                    d_wd[c * c_n + k] += dot;
                    let wv = wd[c * c_n + k];
                    for (d, &u) in dx.channel_mut(b, k).iter_mut().zip(durow) {
                        *d += wv * u;
                    }
                }
            }
            for (dmat, w, dw) in
                [(&d_bp, wb, &mut d_wb), (&d_cp, wc, &mut d_wc)]
            {
                for nn in 0..d_n {
                    let row = &dmat[nn * n..(nn + 1) * n];
                    for k in 0..c_n {
                        let mut dot = T::ZERO;
                        for (&a, &b2) in row.iter().zip(xv.channel(b, k)) {
                            dot += a * b2;
                        }
                        dw[nn * c_n + k] += dot;
                        let wv = w[nn * c_n + k];
                        for (d, &u) in dx.channel_mut(b, k).iter_mut().zip(row) {
                            *d += wv * u;
                        }
                    }
                }
            }
        }
        let acc = |slot: &mut Option<Volume5<T>>, g: Volume5<T>| match slot {
            Some(s) => {
                for (a, &b) in s.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            None => *slot = Some(g),
        };
        acc(&mut head[x.0], dx);
        acc(&mut head[a_log.0], Volume5::new([c_n, d_n, 1, 1, 1], d_al)?);
        acc(&mut head[w_delta.0], Volume5::new([c_n, c_n, 1, 1, 1], d_wd)?);
        acc(&mut head[b_delta.0], Volume5::new([1, c_n, 1, 1, 1], d_bd)?);
        acc(&mut head[w_b.0], Volume5::new([d_n, c_n, 1, 1, 1], d_wb)?);
        acc(&mut head[w_c.0], Volume5::new([d_n, c_n, 1, 1, 1], d_wc)?);
        acc(&mut head[d_skip.0], Volume5::new([1, c_n, 1, 1, 1], d_ds)?);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::rel_err;
    use crate::ssm::{flatten_tokens, scan_sequential, SsmParams};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vol(rng: &mut ChaCha8Rng, shape: [usize; 5], lo: f64, hi: f64) -> Volume5<f64> {
        Volume5::from_fn(shape, |_| rng.gen_range(lo..hi))
    }

    /// Fixed non-degenerate weighting so sum(w * y) exercises every output.
    fn probe_weights(shape: [usize; 5]) -> Volume5<f64> {
        Volume5::from_fn(shape, |i| {
            let h = (i as u64).wrapping_mul(2654435761).wrapping_add(97) % 1999;
            h as f64 / 999.5 - 1.0
        })
    }

    type Build = dyn Fn(&mut Tape<f64>, &[VarId]) -> Result<VarId>;

    fn eval_loss(inputs: &[Volume5<f64>], build: &Build) -> f64 {
        let mut tape = Tape::new();
        let ids: Vec<VarId> = inputs.iter().map(|v| tape.leaf(v.clone())).collect();
        let loss = build(&mut tape, &ids).unwrap();
        tape.value(loss).data()[0]
    }

    /// Checks d loss / d input against central differences for every
    /// coordinate of every input leaf.
    fn check_input_grads(inputs: &[Volume5<f64>], eps: f64, tol: f64, build: &Build) {
        let mut tape = Tape::new();
        let ids: Vec<VarId> = inputs.iter().map(|v| tape.leaf(v.clone())).collect();
        let loss = build(&mut tape, &ids).unwrap();
        assert_eq!(tape.value(loss).shape(), [1, 1, 1, 1, 1], "loss must be scalar");
        let grads = tape.backward(loss).unwrap();
        for (i, input) in inputs.iter().enumerate() {
            for j in 0..input.numel() {
                let mut plus = inputs.to_vec();
                plus[i].data_mut()[j] += eps;
                let mut minus = inputs.to_vec();
                minus[i].data_mut()[j] -= eps;
                let numeric = (eval_loss(&plus, build) - eval_loss(&minus, build)) / (2.0 * eps);
                let analytic = grads.wrt(ids[i]).map_or(0.0, |g| g.data()[j]);
                let err = rel_err(analytic, numeric);
                assert!(
                    err < tol,
                    "input {i} coord {j}: analytic {analytic} vs numeric {numeric} (err {err})"
                );
            }
        }
    }

    /// loss = sum(w * op(x)) wired through the tape itself.
    fn weighted_sum(tape: &mut Tape<f64>, y: VarId) -> Result<VarId> {
        let w = tape.leaf(probe_weights(tape.value(y).shape()));
        let p = tape.mul(y, w)?;
        tape.sum_all(p)
    }

    #[test]
    fn elementwise_ops_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        // Away from zero so the relu kink cannot straddle the FD step.
        let x = Volume5::from_fn([1, 2, 2, 2, 2], |_| {
            let v: f64 = rng.gen_range(0.3..1.5);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        });
        for op in ["relu", "sigmoid", "softplus", "scale", "add_scalar", "one_minus"] {
            let build = move |t: &mut Tape<f64>, ids: &[VarId]| {
                let y = match op {
                    "relu" => t.relu(ids[0])?,
                    "sigmoid" => t.sigmoid(ids[0])?,
                    "softplus" => t.softplus(ids[0])?,
                    "scale" => t.scale(ids[0], -1.7)?,
                    "add_scalar" => t.add_scalar(ids[0], 0.4)?,
                    _ => t.one_minus(ids[0])?,
                };
                weighted_sum(t, y)
            };
            check_input_grads(std::slice::from_ref(&x), 1e-6, 1e-6, &build);
        }
    }

    #[test]
    fn add_mul_broadcast_backward_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let a = rand_vol(&mut rng, [1, 3, 2, 2, 2], -1.0, 1.0);
        let b = rand_vol(&mut rng, [1, 3, 1, 1, 1], -1.0, 1.0);
        let s = rand_vol(&mut rng, [1, 1, 1, 1, 1], -1.0, 1.0);
        let build = |t: &mut Tape<f64>, ids: &[VarId]| {
            let sum = t.add(ids[0], ids[1])?;
            let prod = t.mul(sum, ids[2])?;
            weighted_sum(t, prod)
        };
        check_input_grads(&[a, b, s], 1e-6, 1e-6, &build);
    }

    #[test]
    fn conv_backward_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = rand_vol(&mut rng, [1, 3, 4, 4, 4], -1.0, 1.0);
        let w = rand_vol(&mut rng, [4, 3, 3, 3, 3], -0.5, 0.5);
        let bias = rand_vol(&mut rng, [1, 4, 1, 1, 1], -0.5, 0.5);
        let spec = Conv3dSpec { stride: 2, padding: 1, groups: 1 };
        let build = move |t: &mut Tape<f64>, ids: &[VarId]| {
            let y = t.conv3d(ids[0], ids[1], Some(ids[2]), spec)?;
            weighted_sum(t, y)
        };
        check_input_grads(&[x, w, bias], 1e-6, 1e-6, &build);
    }

    #[test]
    fn norm_backward_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let x = rand_vol(&mut rng, [1, 4, 2, 2, 2], -2.0, 2.0);
        let gamma = rand_vol(&mut rng, [1, 4, 1, 1, 1], 0.5, 1.5);
        let beta = rand_vol(&mut rng, [1, 4, 1, 1, 1], -0.5, 0.5);
        for which in ["layer", "instance"] {
            let build = move |t: &mut Tape<f64>, ids: &[VarId]| {
                let y = match which {
                    "layer" => t.layer_norm(ids[0], ids[1], ids[2])?,
                    _ => t.instance_norm(ids[0], ids[1], ids[2])?,
                };
                weighted_sum(t, y)
            };
            check_input_grads(
                &[x.clone(), gamma.clone(), beta.clone()],
                1e-6,
                2e-6,
                &build,
            );
        }
    }

    #[test]
    fn sobel_backward_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        // Random fields keep every gradient magnitude comfortably nonzero.
        let x = rand_vol(&mut rng, [1, 2, 3, 3, 4], -1.0, 1.0);
        let build = |t: &mut Tape<f64>, ids: &[VarId]| {
            let y = t.sobel3d(ids[0])?;
            weighted_sum(t, y)
        };
        check_input_grads(std::slice::from_ref(&x), 1e-6, 1e-5, &build);
    }

    #[test]
    fn pool_backward_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let x = rand_vol(&mut rng, [2, 3, 2, 2, 2], -1.0, 1.0);
        for op in ["gap", "gmp", "stats"] {
            let build = move |t: &mut Tape<f64>, ids: &[VarId]| {
                let y = match op {
                    "gap" => t.global_avg_pool(ids[0])?,
                    "gmp" => t.global_max_pool(ids[0])?,
                    _ => t.channel_stats(ids[0])?,
                };
                weighted_sum(t, y)
            };
            check_input_grads(std::slice::from_ref(&x), 1e-6, 1e-5, &build);
        }
    }

    #[test]
    fn slice_concat_upsample_reshape_backward_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let a = rand_vol(&mut rng, [1, 4, 2, 2, 2], -1.0, 1.0);
        let b = rand_vol(&mut rng, [1, 2, 2, 2, 2], -1.0, 1.0);
        let build = |t: &mut Tape<f64>, ids: &[VarId]| {
            let lo = t.slice_channels(ids[0], 0, 2)?;
            let hi = t.slice_channels(ids[0], 2, 2)?;
            let mixed = t.concat_channels(&[lo, ids[1], hi])?;
            let up = t.upsample_trilinear_2x(mixed)?;
            let flat = t.reshape(up, [1, 1, 6, 8, 8])?;
            weighted_sum(t, flat)
        };
        check_input_grads(&[a, b], 1e-6, 1e-6, &build);
    }

    fn small_ssm_inputs(seed: u64) -> Vec<Volume5<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c_n, d_n) = (3, 2);
        let x = rand_vol(&mut rng, [1, c_n, 2, 2, 1], -1.0, 1.0);
        // a_log near zero keeps decay rates in a numerically lively range.
        let a_log = rand_vol(&mut rng, [c_n, d_n, 1, 1, 1], -1.0, 0.5);
        let w_delta = rand_vol(&mut rng, [c_n, c_n, 1, 1, 1], -0.6, 0.6);
        let b_delta = rand_vol(&mut rng, [1, c_n, 1, 1, 1], -1.0, 0.0);
        let w_b = rand_vol(&mut rng, [d_n, c_n, 1, 1, 1], -0.6, 0.6);
        let w_c = rand_vol(&mut rng, [d_n, c_n, 1, 1, 1], -0.6, 0.6);
        let d_skip = rand_vol(&mut rng, [1, c_n, 1, 1, 1], 0.5, 1.5);
        vec![x, a_log, w_delta, b_delta, w_b, w_c, d_skip]
    }

    fn build_ssm(t: &mut Tape<f64>, ids: &[VarId]) -> Result<VarId> {
        t.ssm_scan(ids[0], ids[1], ids[2], ids[3], ids[4], ids[5], ids[6], 2)
    }

    #[test]
    fn ssm_scan_forward_matches_reference_scan() {
        let inputs = small_ssm_inputs(18);
        let mut tape = Tape::new();
        let ids: Vec<VarId> = inputs.iter().map(|v| tape.leaf(v.clone())).collect();
        let y = build_ssm(&mut tape, &ids).unwrap();

        let params = SsmParams {
            channels: 3,
            d_state: 2,
            a_log: inputs[1].data().to_vec(),
            w_delta: inputs[2].data().to_vec(),
            b_delta: inputs[3].data().to_vec(),
            w_b: inputs[4].data().to_vec(),
            w_c: inputs[5].data().to_vec(),
            d_skip: inputs[6].data().to_vec(),
        };
        let seq = flatten_tokens(&inputs[0]);
        let want = scan_sequential(&params, &seq).unwrap();
        let got = flatten_tokens(tape.value(y));
        let mut worst = 0.0f64;
        for (a, b) in got.data.iter().zip(&want.data) {
            worst = worst.max((a - b).abs());
        }
        assert!(worst <= 1e-12, "tape scan deviates from reference scan by {worst}");
    }

    #[test]
    fn ssm_scan_backward_matches_fd() {
        let inputs = small_ssm_inputs(19);
        let build = |t: &mut Tape<f64>, ids: &[VarId]| {
            let y = build_ssm(t, ids)?;
            weighted_sum(t, y)
        };
        check_input_grads(&inputs, 1e-6, 2e-5, &build);
    }

    #[test]
    fn batched_ssm_keeps_entries_independent() {
        // Gradients for batch entry 0 must ignore entry 1 entirely.
        let mut inputs = small_ssm_inputs(20);
        let single = inputs[0].clone();
        let (_, c_n, d, h, w) = single.dims();
        let mut both = Volume5::zeros([2, c_n, d, h, w]);
        let n = single.numel();
        both.data_mut()[..n].copy_from_slice(single.data());
        for v in &mut both.data_mut()[n..] {
            *v = 9.0;
        }
        inputs[0] = both;

        let mut tape = Tape::new();
        let ids: Vec<VarId> = inputs.iter().map(|v| tape.leaf(v.clone())).collect();
        let y = build_ssm(&mut tape, &ids).unwrap();
        // Weight only batch entry 0 of the output.
        let mut mask = Volume5::zeros(tape.value(y).shape());
        let wsrc = probe_weights(single.shape());
        mask.data_mut()[..n].copy_from_slice(wsrc.data());
        let m = tape.leaf(mask);
        let prod = tape.mul(y, m).unwrap();
        let loss = tape.sum_all(prod).unwrap();
        let grads = tape.backward(loss).unwrap();
        let dx = grads.wrt(ids[0]).unwrap();
        for (i, &g) in dx.data()[n..].iter().enumerate() {
            assert_eq!(g, 0.0, "entry-1 coord {i} leaked gradient {g}");
        }

        // And entry-0 gradients equal the single-batch run.
        let mut tape1 = Tape::new();
        let mut in1 = inputs.clone();
        in1[0] = single;
        let ids1: Vec<VarId> = in1.iter().map(|v| tape1.leaf(v.clone())).collect();
        let y1 = build_ssm(&mut tape1, &ids1).unwrap();
        let l1 = weighted_sum(&mut tape1, y1).unwrap();
        let g1 = tape1.backward(l1).unwrap();
        let dx1 = g1.wrt(ids1[0]).unwrap();
        for (i, (&a, &b)) in dx.data()[..n].iter().zip(dx1.data()).enumerate() {
            assert!((a - b).abs() <= 1e-12, "coord {i}: batched {a} vs single {b}");
        }
    }

    #[test]
    fn softmax_backward_matches_fd_and_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = rand_vol(&mut rng, [1, 4, 2, 2, 1], -3.0, 3.0);
        let mut tape = Tape::new();
        let id = tape.leaf(x.clone());
        let y = tape.softmax_channels(id).unwrap();
        let yv = tape.value(y);
        for site in 0..yv.spatial_len() {
            let mut s = 0.0;
            for c in 0..4 {
                s += yv.channel(0, c)[site];
            }
            assert!((s - 1.0).abs() < 1e-12);
        }
        let build = |t: &mut Tape<f64>, ids: &[VarId]| {
            let y = t.softmax_channels(ids[0])?;
            weighted_sum(t, y)
        };
        check_input_grads(std::slice::from_ref(&x), 1e-6, 1e-6, &build);
    }

    fn checker_labels(shape: [usize; 4], classes: u8) -> LabelVolume {
        let mut lab = LabelVolume::zeros(shape);
        for (i, v) in lab.data_mut().iter_mut().enumerate() {
            *v = (i % classes as usize) as u8;
        }
        lab
    }

    #[test]
    fn cross_entropy_matches_naive_and_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let logits = rand_vol(&mut rng, [1, 4, 2, 2, 1], -2.0, 2.0);
        let labels = checker_labels([1, 2, 2, 1], 4);

        // Naive oracle: mean over sites of -log softmax[label].
        let n = logits.spatial_len();
        let mut want = 0.0;
        for site in 0..n {
            let vals: Vec<f64> = (0..4).map(|c| logits.channel(0, c)[site]).collect();
            let z: f64 = vals.iter().map(|v| v.exp()).sum();
            want -= (vals[labels.entry(0)[site] as usize].exp() / z).ln();
        }
        want /= n as f64;

        let mut tape = Tape::new();
        let id = tape.leaf(logits.clone());
        let loss = tape.cross_entropy(id, &labels).unwrap();
        let got = tape.value(loss).data()[0];
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");

        let lab2 = labels.clone();
        let build = move |t: &mut Tape<f64>, ids: &[VarId]| t.cross_entropy(ids[0], &lab2);
        check_input_grads(std::slice::from_ref(&logits), 1e-6, 1e-6, &build);
    }

    #[test]
    fn dice_loss_matches_hand_value_and_fd() {
        // Two sites, two classes, labels [0, 1]. Foreground channel holds
        // p = [0.3, 0.8], so I = 0.8, P = 1.1, G = 1.
        let probs = Volume5::new([1, 2, 1, 1, 2], vec![0.7, 0.2, 0.3, 0.8]).unwrap();
        let labels = LabelVolume::new([1, 1, 1, 2], vec![0, 1]).unwrap();
        let mut tape = Tape::new();
        let id = tape.leaf(probs.clone());
        let loss = tape.dice_loss(id, &labels).unwrap();
        let eps = DICE_EPS;
        let want = 1.0 - (2.0 * 0.8 + eps) / (1.1 + 1.0 + eps);
        assert!((tape.value(loss).data()[0] - want).abs() < 1e-12);

        let lab2 = labels.clone();
        let build = move |t: &mut Tape<f64>, ids: &[VarId]| t.dice_loss(ids[0], &lab2);
        check_input_grads(std::slice::from_ref(&probs), 1e-7, 1e-6, &build);
    }

    #[test]
    fn dice_after_softmax_composes() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let logits = rand_vol(&mut rng, [1, 3, 2, 1, 2], -1.5, 1.5);
        let labels = checker_labels([1, 2, 1, 2], 3);
        let lab2 = labels.clone();
        let build = move |t: &mut Tape<f64>, ids: &[VarId]| {
            let probs = t.softmax_channels(ids[0])?;
            let dice = t.dice_loss(probs, &lab2)?;
            let ce = t.cross_entropy(ids[0], &lab2)?;
            let d2 = t.scale(dice, 0.5)?;
            let c2 = t.scale(ce, 0.5)?;
            t.add(d2, c2)
        };
        check_input_grads(std::slice::from_ref(&logits), 1e-6, 1e-6, &build);
    }

    #[test]
    fn param_fanout_accumulates_once_per_use() {
        // p enters twice; the analytic gradient is the sum of both paths.
        let mut store = ParamStore::<f64>::new();
        let pid = store
            .add("fan.p", Volume5::new([1, 2, 1, 1, 1], vec![0.4, -0.9]).unwrap())
            .unwrap();
        let mut tape = Tape::new();
        let p1 = tape.param(&store, pid);
        let p2 = tape.param(&store, pid);
        assert_eq!(p1, p2, "parameter leaves must be memoized");
        let sq = tape.mul(p1, p1).unwrap();
        let tripled = tape.scale(p1, 3.0).unwrap();
        let both = tape.add(sq, tripled).unwrap();
        let loss = tape.sum_all(both).unwrap();
        let grads = tape.backward(loss).unwrap();
        let pg = tape.param_grads(&grads);
        let g = pg.get(&pid).unwrap();
        // d/dp (p^2 + 3p) = 2p + 3.
        assert!((g.data()[0] - (2.0 * 0.4 + 3.0)).abs() < 1e-12);
        assert!((g.data()[1] - (2.0 * -0.9 + 3.0)).abs() < 1e-12);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Volume5::full([1, 2, 1, 1, 1], 1.0));
        let err = match tape.backward(x) {
            Err(e) => e,
            Ok(_) => panic!("vector loss accepted"),
        };
        assert!(err.to_string().contains("scalar"), "{err}");
    }

    #[test]
    fn off_path_variables_receive_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Volume5::full([1, 2, 1, 1, 1], 1.0));
        let unused = tape.leaf(Volume5::full([1, 2, 1, 1, 1], 5.0));
        let _unused_relu = tape.relu(unused).unwrap();
        let loss = tape.sum_all(x).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.wrt(x).is_some());
        assert!(grads.wrt(unused).is_none());
        assert!(grads.wrt(_unused_relu).is_none());
    }

    #[test]
    fn non_finite_probe_names_the_parameter() {
        let mut store = ParamStore::<f64>::new();
        let pid = store
            .add("enc.w", Volume5::new([1, 2, 1, 1, 1], vec![1.0, f64::NAN]).unwrap())
            .unwrap();
        let mut tape = Tape::new();
        let p = tape.param(&store, pid);
        let _ = tape.relu(p).unwrap();
        let (_, desc) = tape.first_non_finite(Some(&store)).unwrap();
        assert!(desc.contains("enc.w"), "{desc}");

        let mut clean = Tape::<f64>::new();
        let x = clean.leaf(Volume5::full([1, 1, 1, 1, 1], 2.0));
        let _ = clean.relu(x).unwrap();
        assert!(clean.first_non_finite(Some(&store)).is_none());
    }

    #[test]
    fn store_gradcheck_drives_a_real_tape() {
        use crate::autodiff::{check_store_gradients, CoordPlan};
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let mut store = ParamStore::<f64>::new();
        let w = store.add("lin.w", rand_vol(&mut rng, [2, 3, 1, 1, 1], -0.5, 0.5)).unwrap();
        let b = store.add("lin.b", rand_vol(&mut rng, [1, 2, 1, 1, 1], -0.5, 0.5)).unwrap();
        let x = rand_vol(&mut rng, [1, 3, 2, 2, 2], -1.0, 1.0);
        let labels = checker_labels([1, 2, 2, 2], 2);

        let run = |s: &ParamStore<f64>| -> Result<(Tape<f64>, VarId)> {
            let mut t = Tape::new();
            let xi = t.leaf(x.clone());
            let wi = t.param(s, w);
            let bi = t.param(s, b);
            let y = t.conv3d(xi, wi, Some(bi), Conv3dSpec { stride: 1, padding: 0, groups: 1 })?;
            let loss = t.cross_entropy(y, &labels)?;
            Ok((t, loss))
        };
        let (tape, loss) = run(&store).unwrap();
        let grads = tape.backward(loss).unwrap();
        let analytic = tape.param_grads(&grads);
        let outcome = check_store_gradients(
            &mut store,
            &analytic,
            |s| run(s).map(|(t, l)| t.value(l).data()[0]),
            CoordPlan::All,
            1e-6,
            0.0,
        )
        .unwrap();
        assert_eq!(outcome.coords_checked, 8);
        assert!(outcome.max_rel_err < 1e-7, "worst {:?}", outcome.max_rel_err);
    }
}
