//! The encoder building blocks: gated local aggregation, the multi-head
//! selective-scan mixer, channel-spatial calibration, plus the stem and
//! the stage downsamplers. Parameter structs hold `ParamId`s into a shared
//! `ParamStore`; forwards are recorded on a `Tape` so the same code path
//! serves inference and training.

use rand::Rng;

use crate::autodiff::{Tape, VarId};
use crate::error::{Error, Result};
use crate::kernels::conv::Conv3dSpec;
use crate::params::{fan_in_bound, uniform_init, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::volume::Volume5;

/// Activation applied after the per-head pre-scan convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Softplus,
}

impl Activation {
    pub fn apply<T: Scalar>(self, tape: &mut Tape<T>, x: VarId) -> Result<VarId> {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Softplus => tape.softplus(x),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "softplus" => Ok(Activation::Softplus),
            other => Err(Error::config(format!("unknown activation {other}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Softplus => "softplus",
        }
    }
}

/// Static shape/width settings shared by every block in one stage.
#[derive(Clone, Copy, Debug)]
pub struct BlockConfig {
    pub channels: usize,
    pub heads: usize,
    pub d_state: usize,
    pub activation: Activation,
}

impl BlockConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.heads == 0 || self.d_state == 0 {
            return Err(Error::config("block: channels, heads, d_state must be positive"));
        }
        if self.channels % self.heads != 0 {
            return Err(Error::config(format!(
                "block: {} channels not divisible by {} heads",
                self.channels, self.heads
            )));
        }
        Ok(())
    }

    fn head_width(&self) -> usize {
        self.channels / self.heads
    }
}

/// One convolution's parameters plus its geometry.
#[derive(Clone, Debug)]
pub struct ConvParams {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: Conv3dSpec,
}

impl ConvParams {
    /// Registers weight (and optionally bias) with Kaiming-uniform init:
    /// bound = 1/sqrt(fan_in), fan_in = per-group input channels x kernel volume.
    #[allow(clippy::too_many_arguments)]
    pub fn register<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        prefix: &str,
        c_out: usize,
        c_in_g: usize,
        k: usize,
        spec: Conv3dSpec,
        with_bias: bool,
    ) -> Result<Self> {
        let bound = fan_in_bound(c_in_g * k * k * k);
        let weight = store.add(
            format!("{prefix}.weight"),
            uniform_init(rng, [c_out, c_in_g, k, k, k], bound),
        )?;
        let bias = if with_bias {
            Some(store.add(format!("{prefix}.bias"), uniform_init(rng, [1, c_out, 1, 1, 1], bound))?)
        } else {
            None
        };
        Ok(ConvParams { weight, bias, spec })
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: VarId,
    ) -> Result<VarId> {
        let w = tape.param(store, self.weight);
        let b = self.bias.map(|id| tape.param(store, id));
        tape.conv3d(x, w, b, self.spec)
    }
}

pub fn pointwise() -> Conv3dSpec {
    Conv3dSpec { stride: 1, padding: 0, groups: 1 }
}

pub fn same3() -> Conv3dSpec {
    Conv3dSpec { stride: 1, padding: 1, groups: 1 }
}

/// Affine pair for a normalization layer: gamma init 1, beta init 0.
#[derive(Clone, Debug)]
pub struct NormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl NormParams {
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
    ) -> Result<Self> {
        let gamma =
            store.add(format!("{prefix}.gamma"), Volume5::full([1, channels, 1, 1, 1], T::ONE))?;
        let beta =
            store.add(format!("{prefix}.beta"), Volume5::zeros([1, channels, 1, 1, 1]))?;
        Ok(NormParams { gamma, beta })
    }

    pub fn layer_norm<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: VarId,
    ) -> Result<VarId> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm(x, g, b)
    }

    pub fn instance_norm<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: VarId,
    ) -> Result<VarId> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.instance_norm(x, g, b)
    }
}

fn scalar_param<T: Scalar>(
    store: &mut ParamStore<T>,
    name: String,
    value: f64,
) -> Result<ParamId> {
    store.add(name, Volume5::scalar(T::from_f64(value)))
}

/// Gated local aggregation: alpha * Sobel3D(F) + beta * Conv(ReLU(IN(F))).
#[derive(Clone, Debug)]
pub struct GlaParams {
    pub norm: NormParams,
    pub detail: ConvParams,
    pub alpha: ParamId,
    pub beta: ParamId,
}

impl GlaParams {
    pub fn register<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        prefix: &str,
        channels: usize,
    ) -> Result<Self> {
        Ok(GlaParams {
            norm: NormParams::register(store, &format!("{prefix}.norm"), channels)?,
            detail: ConvParams::register(
                store,
                rng,
                &format!("{prefix}.detail"),
                channels,
                channels,
                3,
                same3(),
                true,
            )?,
            alpha: scalar_param(store, format!("{prefix}.alpha"), 1.0)?,
            beta: scalar_param(store, format!("{prefix}.beta"), 1.0)?,
        })
    }
}

pub fn gla_forward<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    p: &GlaParams,
    x: VarId,
) -> Result<VarId> {
    let edge = tape.sobel3d(x)?;
    let normed = p.norm.instance_norm(tape, store, x)?;
    let act = tape.relu(normed)?;
    let detail = p.detail.forward(tape, store, act)?;
    let a = tape.param(store, p.alpha);
    let b = tape.param(store, p.beta);
    let edge_w = tape.mul(edge, a)?;
    let detail_w = tape.mul(detail, b)?;
    tape.add(edge_w, detail_w)
}

/// Selective-scan parameters of one head, all width head_width = C / N_h.
#[derive(Clone, Debug)]
pub struct SsmHeadParams {
    pub a_log: ParamId,
    pub w_delta: ParamId,
    pub b_delta: ParamId,
    pub w_b: ParamId,
    pub w_c: ParamId,
    pub d_skip: ParamId,
    pub d_state: usize,
}

impl SsmHeadParams {
    pub fn register<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        prefix: &str,
        width: usize,
        d_state: usize,
    ) -> Result<Self> {
        // A = -exp(a_log) with a_log = ln(1..d_state): a stable spectrum of
        // decay rates 1..d_state per channel.
        let a_log = store.add(
            format!("{prefix}.a_log"),
            Volume5::from_fn([width, d_state, 1, 1, 1], |i| {
                T::from_f64(((i % d_state + 1) as f64).ln())
            }),
        )?;
        let bound = fan_in_bound(width);
        let w_delta = store.add(
            format!("{prefix}.w_delta"),
            uniform_init(rng, [width, width, 1, 1, 1], bound),
        )?;
        // b_delta = softplus^-1(dt) with dt log-uniform in [1e-3, 1e-1] so
        // initial step sizes span two decades.
        let b_delta = store.add(
            format!("{prefix}.b_delta"),
            Volume5::from_fn([1, width, 1, 1, 1], |_| {
                let u: f64 = rng.gen_range(0.0..1.0);
                let dt = 1e-3_f64.powf(1.0 - u) * 1e-1_f64.powf(u);
                T::from_f64(dt.exp_m1().ln())
            }),
        )?;
        let w_b = store.add(
            format!("{prefix}.w_b"),
            uniform_init(rng, [d_state, width, 1, 1, 1], bound),
        )?;
        let w_c = store.add(
            format!("{prefix}.w_c"),
            uniform_init(rng, [d_state, width, 1, 1, 1], bound),
        )?;
        let d_skip =
            store.add(format!("{prefix}.d_skip"), Volume5::full([1, width, 1, 1, 1], T::ONE))?;
        Ok(SsmHeadParams { a_log, w_delta, b_delta, w_b, w_c, d_skip, d_state })
    }

    pub fn scan<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: VarId,
    ) -> Result<VarId> {
        let a_log = tape.param(store, self.a_log);
        let w_delta = tape.param(store, self.w_delta);
        let b_delta = tape.param(store, self.b_delta);
        let w_b = tape.param(store, self.w_b);
        let w_c = tape.param(store, self.w_c);
        let d_skip = tape.param(store, self.d_skip);
        tape.ssm_scan(x, a_log, w_delta, b_delta, w_b, w_c, d_skip, self.d_state)
    }
}

/// One head of the mixer: pre-scan conv, scan, conv-only mixing path, gate.
#[derive(Clone, Debug)]
pub struct MhmHeadParams {
    pub pre: ConvParams,
    pub mix: ConvParams,
    pub gate: ConvParams,
    pub ssm: SsmHeadParams,
}

impl MhmHeadParams {
    pub fn register<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        prefix: &str,
        width: usize,
        d_state: usize,
    ) -> Result<Self> {
        Ok(MhmHeadParams {
            pre: ConvParams::register(
                store,
                rng,
                &format!("{prefix}.pre"),
                width,
                width,
                3,
                same3(),
                true,
            )?,
            mix: ConvParams::register(
                store,
                rng,
                &format!("{prefix}.mix"),
                width,
                width,
                3,
                same3(),
                true,
            )?,
            gate: ConvParams::register(
                store,
                rng,
                &format!("{prefix}.gate"),
                width,
                2 * width,
                1,
                pointwise(),
                true,
            )?,
            ssm: SsmHeadParams::register(store, rng, &format!("{prefix}.ssm"), width, d_state)?,
        })
    }
}

/// Multi-head mixer: LN, channel split, per-head dual-path scan/mix fusion,
/// concat, 1x1x1 projection plus the learnable residual to its input.
#[derive(Clone, Debug)]
pub struct MhmParams {
    pub ln: NormParams,
    pub heads: Vec<MhmHeadParams>,
    pub w_p: ConvParams,
    pub delta: ParamId,
}

impl MhmParams {
    pub fn register<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        prefix: &str,
        cfg: &BlockConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let width = cfg.head_width();
        let mut heads = Vec::with_capacity(cfg.heads);
        for h in 0..cfg.heads {
            heads.push(MhmHeadParams::register(
                store,
                rng,
                &format!("{prefix}.head{h}"),
                width,
                cfg.d_state,
            )?);
        }
        Ok(MhmParams {
            ln: NormParams::register(store, &format!("{prefix}.ln"), cfg.channels)?,
            heads,
            w_p: ConvParams::register(
                store,
                rng,
                &format!("{prefix}.proj"),
                cfg.channels,
                cfg.channels,
                1,
                pointwise(),
                true,
            )?,
            delta: scalar_param(store, format!("{prefix}.delta"), 1.0)?,
        })
    }
}

/// Intermediate handles exposed for isolation tests and gate-range probes.
pub struct MhmParts {
    /// Per-head fusion gates g, each strictly inside (0,1).
    pub gates: Vec<VarId>,
    /// Channel concat of the fused head outputs, before the projection.
    pub concat: VarId,
    pub out: VarId,
}

/// One head's dual path on its channel slice of the normalized input.
pub fn mhm_head_forward<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    head: &MhmHeadParams,
    activation: Activation,
    x_head: VarId,
) -> Result<(VarId, VarId)> {
    let pre = head.pre.forward(tape, store, x_head)?;
    let u = activation.apply(tape, pre)?;
    let ssm_out = head.ssm.scan(tape, store, u)?;
    let mix_out = head.mix.forward(tape, store, u)?;
    let both = tape.concat_channels(&[ssm_out, mix_out])?;
    let gate_logit = head.gate.forward(tape, store, both)?;
    let g = tape.sigmoid(gate_logit)?;
    let ssm_gated = tape.mul(g, ssm_out)?;
    let inv_g = tape.one_minus(g)?;
    let mix_gated = tape.mul(inv_g, mix_out)?;
    let fused = tape.add(ssm_gated, mix_gated)?;
    Ok((fused, g))
}

pub fn mhm_forward_parts<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    p: &MhmParams,
    cfg: &BlockConfig,
    f_gla: VarId,
) -> Result<MhmParts> {
    cfg.validate()?;
    let width = cfg.head_width();
    let normed = p.ln.layer_norm(tape, store, f_gla)?;
    let mut fused = Vec::with_capacity(cfg.heads);
    let mut gates = Vec::with_capacity(cfg.heads);
    for (h, head) in p.heads.iter().enumerate() {
        let slice = tape.slice_channels(normed, h * width, width)?;
        let (out, g) = mhm_head_forward(tape, store, head, cfg.activation, slice)?;
        fused.push(out);
        gates.push(g);
    }
    let concat = tape.concat_channels(&fused)?;
    let projected = p.w_p.forward(tape, store, concat)?;
    let d = tape.param(store, p.delta);
    let residual = tape.mul(f_gla, d)?;
    let out = tape.add(projected, residual)?;
    Ok(MhmParts { gates, concat, out })
}

pub fn mhm_forward<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    p: &MhmParams,
    cfg: &BlockConfig,
    f_gla: VarId,
) -> Result<VarId> {
    Ok(mhm_forward_parts(tape, store, p, cfg, f_gla)?.out)
}

/// Channel-spatial calibration. The channel path squeezes with a shared
/// two-layer MLP over GAP and GMP; the spatial path convolves the stacked
/// mean/std/max/min channel statistics; a pooled scalar gate blends them.
#[derive(Clone, Debug)]
pub struct CscaParams {
    /// Shared squeeze MLP, applied to both pooled vectors: C -> C/4 -> C.
    pub squeeze: ConvParams,
    pub expand: ConvParams,
    /// 3x3x3 over the 4 stacked channel statistics -> 1 spatial map.
    pub spatial: ConvParams,
    /// Pooled [F_c, F_s] features (2C) -> scalar gate logit; no bias, so
    /// zero weights sit exactly at lambda = 0.5.
    pub w_gate: ConvParams,
    pub ln: NormParams,
    /// Output MLP C -> 4C -> C.
    pub mlp_a: ConvParams,
    pub mlp_b: ConvParams,
}

/// Squeeze reduction ratio of the channel-attention MLP.
pub const CSCA_REDUCTION: usize = 4;

impl CscaParams {
    pub fn register<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        prefix: &str,
        channels: usize,
    ) -> Result<Self> {
        if channels % CSCA_REDUCTION != 0 {
            return Err(Error::config(format!(
                "csca: {channels} channels not divisible by reduction {CSCA_REDUCTION}"
            )));
        }
        let hidden = channels / CSCA_REDUCTION;
        Ok(CscaParams {
            squeeze: ConvParams::register(
                store,
                rng,
                &format!("{prefix}.squeeze"),
                hidden,
                channels,
                1,
                pointwise(),
                true,
            )?,
            expand: ConvParams::register(
                store,
                rng,
                &format!("{prefix}.expand"),
                channels,
                hidden,
                1,
                pointwise(),
                true,
            )?,
            spatial: ConvParams::register(
                store,
                rng,
                &format!("{prefix}.spatial"),
                1,
                4,
                3,
                same3(),
                true,
            )?,
            w_gate: ConvParams::register(
                store,
                rng,
                &format!("{prefix}.gate"),
                1,
                2 * channels,
                1,
                pointwise(),
                false,
            )?,
            ln: NormParams::register(store, &format!("{prefix}.ln"), channels)?,
            mlp_a: ConvParams::register(
                store,
                rng,
                &format!("{prefix}.mlp_a"),
                4 * channels,
                channels,
                1,
                pointwise(),
                true,
            )?,
            mlp_b: ConvParams::register(
                store,
                rng,
                &format!("{prefix}.mlp_b"),
                channels,
                4 * channels,
                1,
                pointwise(),
                true,
            )?,
        })
    }

    fn channel_mlp<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        pooled: VarId,
    ) -> Result<VarId> {
        let h = self.squeeze.forward(tape, store, pooled)?;
        let h = tape.relu(h)?;
        self.expand.forward(tape, store, h)
    }
}

/// Gate maps surfaced for range probes.
pub struct CscaParts {
    pub channel_map: VarId,
    pub spatial_map: VarId,
    pub lambda: VarId,
    pub calibrated: VarId,
}

/// lambda*F_c + (1-lambda)*F_s + F_MHM, before the output MLP.
pub fn csca_calibrate<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    p: &CscaParams,
    f_mhm: VarId,
) -> Result<CscaParts> {
    let gap = tape.global_avg_pool(f_mhm)?;
    let gmp = tape.global_max_pool(f_mhm)?;
    let avg_path = p.channel_mlp(tape, store, gap)?;
    let max_path = p.channel_mlp(tape, store, gmp)?;
    let summed = tape.add(avg_path, max_path)?;
    let channel_map = tape.sigmoid(summed)?;
    let f_c = tape.mul(f_mhm, channel_map)?;

    let stats = tape.channel_stats(f_mhm)?;
    let spatial_logit = p.spatial.forward(tape, store, stats)?;
    let spatial_map = tape.sigmoid(spatial_logit)?;
    let f_s = tape.mul(f_mhm, spatial_map)?;

    let c_pooled = tape.global_avg_pool(f_c)?;
    let s_pooled = tape.global_avg_pool(f_s)?;
    let both = tape.concat_channels(&[c_pooled, s_pooled])?;
    let gate_logit = p.w_gate.forward(tape, store, both)?;
    let lambda = tape.sigmoid(gate_logit)?;

    let c_part = tape.mul(f_c, lambda)?;
    let inv = tape.one_minus(lambda)?;
    let s_part = tape.mul(f_s, inv)?;
    let blended = tape.add(c_part, s_part)?;
    let calibrated = tape.add(blended, f_mhm)?;
    Ok(CscaParts { channel_map, spatial_map, lambda, calibrated })
}

/// The output MLP over the calibrated features: MLP(LN(F_CSCA)).
pub fn csca_mlp<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    p: &CscaParams,
    f_csca: VarId,
) -> Result<VarId> {
    let normed = p.ln.layer_norm(tape, store, f_csca)?;
    let h = p.mlp_a.forward(tape, store, normed)?;
    let h = tape.relu(h)?;
    p.mlp_b.forward(tape, store, h)
}

pub fn csca_forward<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    p: &CscaParams,
    f_mhm: VarId,
) -> Result<VarId> {
    let parts = csca_calibrate(tape, store, p, f_mhm)?;
    csca_mlp(tape, store, p, parts.calibrated)
}

/// One full encoder block.
#[derive(Clone, Debug)]
pub struct BlockParams {
    pub gla: GlaParams,
    pub mhm: MhmParams,
    pub csca: CscaParams,
}

impl BlockParams {
    pub fn register<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        prefix: &str,
        cfg: &BlockConfig,
    ) -> Result<Self> {
        Ok(BlockParams {
            gla: GlaParams::register(store, rng, &format!("{prefix}.gla"), cfg.channels)?,
            mhm: MhmParams::register(store, rng, &format!("{prefix}.mhm"), cfg)?,
            csca: CscaParams::register(store, rng, &format!("{prefix}.csca"), cfg.channels)?,
        })
    }
}

/// Every gate map produced by one block forward, for range assertions.
pub struct BlockTrace {
    pub head_gates: Vec<VarId>,
    pub channel_map: VarId,
    pub spatial_map: VarId,
    pub lambda: VarId,
}

/// Block output with both residuals: the learnable delta residual inside
/// the mixer, and the outer one around the calibration MLP:
/// out = F_CSCA + MLP(LN(F_CSCA)).
pub fn block_forward_traced<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    p: &BlockParams,
    cfg: &BlockConfig,
    x: VarId,
) -> Result<(VarId, BlockTrace)> {
    let f_gla = gla_forward(tape, store, &p.gla, x)?;
    let mhm = mhm_forward_parts(tape, store, &p.mhm, cfg, f_gla)?;
    let csca = csca_calibrate(tape, store, &p.csca, mhm.out)?;
    let refined = csca_mlp(tape, store, &p.csca, csca.calibrated)?;
    let out = tape.add(csca.calibrated, refined)?;
    Ok((
        out,
        BlockTrace {
            head_gates: mhm.gates,
            channel_map: csca.channel_map,
            spatial_map: csca.spatial_map,
            lambda: csca.lambda,
        },
    ))
}

pub fn block_forward<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    p: &BlockParams,
    cfg: &BlockConfig,
    x: VarId,
) -> Result<VarId> {
    Ok(block_forward_traced(tape, store, p, cfg, x)?.0)
}

/// Input stem: 7x7x7 depthwise stride-2 conv over the 4 modalities, then a
/// pointwise projection into the first-stage embedding width.
#[derive(Clone, Debug)]
pub struct StemParams {
    pub depthwise: ConvParams,
    pub pointwise: ConvParams,
}

impl StemParams {
    pub fn register<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        prefix: &str,
        in_channels: usize,
        embed: usize,
    ) -> Result<Self> {
        Ok(StemParams {
            depthwise: ConvParams::register(
                store,
                rng,
                &format!("{prefix}.depthwise"),
                in_channels,
                1,
                7,
                Conv3dSpec { stride: 2, padding: 3, groups: in_channels },
                true,
            )?,
            pointwise: ConvParams::register(
                store,
                rng,
                &format!("{prefix}.pointwise"),
                embed,
                in_channels,
                1,
                pointwise(),
                true,
            )?,
        })
    }
}

pub fn stem_forward<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    p: &StemParams,
    x: VarId,
) -> Result<VarId> {
    let d = p.depthwise.forward(tape, store, x)?;
    p.pointwise.forward(tape, store, d)
}

/// Stage-boundary downsampler: 3x3x3 stride-2 pad-1 conv, widening channels.
pub fn register_downsample<T: Scalar, R: Rng>(
    store: &mut ParamStore<T>,
    rng: &mut R,
    prefix: &str,
    c_in: usize,
    c_out: usize,
) -> Result<ConvParams> {
    ConvParams::register(
        store,
        rng,
        prefix,
        c_out,
        c_in,
        3,
        Conv3dSpec { stride: 2, padding: 1, groups: 1 },
        true,
    )
}
